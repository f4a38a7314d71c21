//! Binary checkpoint format.
//!
//! Layout: the magic bytes `PLDM`, one version byte, four little-endian u32
//! dimensions (vocab, embed, hidden, window), then every parameter as a
//! little-endian f64 in storage order: embeddings row-major, hidden weights,
//! hidden biases, output weights, output biases.

use std::io::{Read, Write};

use super::{ModelDims, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PLDM";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    let d = params.dims();
    let mut buf = Vec::with_capacity(21 + 8 * params.as_slice().len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    for dim in [d.vocab_size, d.embed_dim, d.hidden_dim, d.window] {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::Checkpoint(format!("dimension {dim} exceeds u32")))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for x in params.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 21 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing PLDM header".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            bytes[4]
        )));
    }
    let dim = |i: usize| {
        let o = 5 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
    };
    let dims = ModelDims {
        vocab_size: dim(0),
        embed_dim: dim(1),
        hidden_dim: dim(2),
        window: dim(3),
    };
    let body = &bytes[21..];
    if body.len() != 8 * dims.param_count() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes for {dims:?}, found {}",
            8 * dims.param_count(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ModelParams::from_vec(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let dims = ModelDims {
            vocab_size: 5,
            embed_dim: 2,
            hidden_dim: 3,
            window: 2,
        };
        let p = ModelParams::init(dims, 1);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..5], b"PLDM\x01");
        assert_eq!(&buf[5..9], &5u32.to_le_bytes());
        assert_eq!(&buf[17..21], &2u32.to_le_bytes());
        assert_eq!(buf.len(), 21 + 8 * dims.param_count());
        assert_eq!(&buf[21..29], &p.as_slice()[0].to_le_bytes());
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), p);
    }

    #[test]
    fn rejects_corruption() {
        let p = ModelParams::init(ModelDims::new(7), 1);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_checkpoint(&bad[..]).is_err());
        assert!(read_checkpoint(&b"nope"[..]).is_err());
    }
}
