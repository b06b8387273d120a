//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "CMAMBA01"
//! config_len   u32, then config_len bytes of UTF-8 config echo
//! val_rmse     f64
//! n_features   u32, then n_features (shift f64, scale f64) pairs
//! target       (shift f64, scale f64)
//! n_params     u32, then per parameter in path order:
//!   path_len u32, path bytes, ndim u32, ndim x u64 dims, prod(dims) x f64
//! ```
//!
//! `n_features = 0` means no normalizer is stored and the target pair is
//! omitted.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::autodiff::{ParamStore, Tensor};
use crate::data::{Affine, Normalizer};

pub const MAGIC: &[u8; 8] = b"CMAMBA01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub val_rmse: f64,
    pub normalizer: Option<Normalizer>,
    pub params: ParamStore<f64>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Malformed("length exceeds u32".into()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_affine(w: &mut impl Write, a: &Affine) -> io::Result<()> {
    put_f64(w, a.shift)?;
    put_f64(w, a.scale)
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    put_u32(w, ckpt.config.len())?;
    w.write_all(ckpt.config.as_bytes())?;
    put_f64(w, ckpt.val_rmse)?;
    match &ckpt.normalizer {
        None => put_u32(w, 0)?,
        Some(n) => {
            put_u32(w, n.features.len())?;
            for a in &n.features {
                put_affine(w, a)?;
            }
            put_affine(w, &n.target)?;
        }
    }
    put_u32(w, ckpt.params.len())?;
    for (path, p) in ckpt.params.iter() {
        put_u32(w, path.len())?;
        w.write_all(path.as_bytes())?;
        put_u32(w, p.value.shape().len())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            put_f64(w, v)?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => CheckpointError::Malformed("truncated".into()),
            _ => CheckpointError::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()?;
        let mut buf = Vec::new();
        (&mut self.inner)
            .take(len as u64)
            .read_to_end(&mut buf)?;
        if buf.len() != len {
            return Err(CheckpointError::Malformed("truncated".into()));
        }
        String::from_utf8(buf).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
    }

    fn affine(&mut self) -> Result<Affine, CheckpointError> {
        Ok(Affine {
            shift: self.f64()?,
            scale: self.f64()?,
        })
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { inner: r };
    if &r.bytes::<8>()? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let config = r.string()?;
    let val_rmse = r.f64()?;
    let nf = r.u32()?;
    let normalizer = if nf == 0 {
        None
    } else {
        let features = (0..nf).map(|_| r.affine()).collect::<Result<_, _>>()?;
        Some(Normalizer {
            features,
            target: r.affine()?,
        })
    };
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let path = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed("shape overflow".into()))?;
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let tensor =
            Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        params
            .insert(path, tensor)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config,
        val_rmse,
        normalizer,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params
            .insert("a.w", Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        params.insert("b", Tensor::scalar(0.125)).unwrap();
        Checkpoint {
            config: "model_dim = 2\n".into(),
            val_rmse: 0.5,
            normalizer: Some(Normalizer {
                features: vec![Affine { shift: 1.0, scale: 2.0 }],
                target: Affine { shift: 1.0, scale: 2.0 },
            }),
            params,
        }
    }

    #[test]
    fn round_trip() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), sample());
    }

    #[test]
    fn round_trip_without_normalizer() {
        let ckpt = Checkpoint {
            normalizer: None,
            ..sample()
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), ckpt);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        assert!(matches!(
            read_checkpoint(&b"NOTMAGIC"[..]),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            read_checkpoint(&buf[..buf.len() - 3]),
            Err(CheckpointError::Malformed(_))
        ));
        buf.push(0);
        assert!(matches!(
            read_checkpoint(buf.as_slice()),
            Err(CheckpointError::Malformed(_))
        ));
    }
}
