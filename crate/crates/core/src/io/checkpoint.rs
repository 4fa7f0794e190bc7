//! Parameter checkpoints.
//!
//! ```text
//! "XMRC"  u16 version  u32 header_len  header_len bytes JSON  n_params × f64
//! ```
//!
//! The JSON header names the mode, the encoder dimensions and each tensor's
//! shape in storage order. Values are little-endian f64, so a checkpoint
//! restores the trained parameters exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderDims, EncoderParams, EncodingMode, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XMRC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    mode: EncodingMode,
    dims: EncoderDims,
    tensors: Vec<TensorSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: EncodingMode,
    pub params: EncoderParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            mode: self.mode,
            dims: self.params.dims,
            tensors: TENSOR_NAMES
                .iter()
                .zip(self.params.shapes())
                .map(|(name, shape)| TensorSpec {
                    name: name.to_string(),
                    shape,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(10 + json.len() + 8 * self.params.n_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "XMRC",
            });
        }
        let mut r = Reader::new(bytes, path);
        r.take(4)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadVersion {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| r.malformed(format!("checkpoint header: {e}")))?;
        header
            .dims
            .validate()
            .map_err(|e| r.malformed(format!("checkpoint header: {e}")))?;

        let mut params = EncoderParams::zeros(header.dims);
        let expected: Vec<(&str, Vec<usize>)> =
            TENSOR_NAMES.iter().copied().zip(params.shapes()).collect();
        let found: Vec<(&str, Vec<usize>)> = header
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t.shape.clone()))
            .collect();
        if found != expected {
            return Err(r.malformed(format!(
                "tensor table {found:?} does not match dims {:?}",
                header.dims
            )));
        }
        for t in params.tensors_mut() {
            let raw = r.take(8 * t.len())?;
            for (v, c) in t.iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(c.try_into().unwrap());
            }
        }
        r.finish()?;
        Ok(Checkpoint {
            mode: header.mode,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&read_bytes(path)?, path)
    }

    /// Fails unless the stored dimensions equal `dims`.
    pub fn expect_dims(&self, dims: &EncoderDims, path: &Path) -> Result<()> {
        if self.params.dims != *dims {
            return Err(Error::Validation(format!(
                "checkpoint {} has encoder dims {:?}, config expects {:?}",
                path.display(),
                self.params.dims,
                dims
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample() -> Checkpoint {
        let dims = EncoderDims {
            frame_dim: 5,
            text_dim: 4,
            hidden: 6,
            frame_embed: 3,
            embed: 7,
        };
        Checkpoint {
            mode: EncodingMode::SingleImage,
            params: EncoderParams::init(dims, &mut Rng::new(9)),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ck);
        let bits = |c: &Checkpoint| -> Vec<u64> {
            c.params.tensors().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&ck));
    }

    #[test]
    fn header_describes_shapes() {
        let bytes = sample().to_bytes();
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[10..10 + len]).unwrap();
        assert_eq!(header["mode"], "single_image");
        assert_eq!(header["tensors"][0]["name"], "frame_hidden.weight");
        assert_eq!(header["tensors"][0]["shape"], serde_json::json!([6, 5]));
        assert_eq!(header["tensors"][10]["shape"], serde_json::json!([]));
        assert_eq!(bytes.len(), 10 + len + 8 * sample().params.n_params());
    }

    #[test]
    fn rejects_corruption() {
        let good = sample().to_bytes();
        let p = Path::new("m.ckpt");
        let mut bad = good.clone();
        bad[1] = 0;
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::BadVersion { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&good[..good.len() - 8], p),
            Err(Error::Format { .. })
        ));
        let mut bad = good.clone();
        bad.extend([0u8; 8]);
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Format { .. })));
        // A store file is not a checkpoint.
        assert!(matches!(
            Checkpoint::from_bytes(b"XMRV\x01\x00", p),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn rejects_header_shape_mismatch() {
        let good = sample().to_bytes();
        let len = u32::from_le_bytes(good[6..10].try_into().unwrap()) as usize;
        let text = String::from_utf8(good[10..10 + len].to_vec()).unwrap();
        let edited = text.replacen("[6,5]", "[5,6]", 1);
        assert_ne!(edited, text);
        let mut bad = good[..10].to_vec();
        bad.extend_from_slice(edited.as_bytes());
        bad.extend_from_slice(&good[10 + len..]);
        assert!(matches!(Checkpoint::from_bytes(&bad, Path::new("m")), Err(Error::Format { .. })));
    }

    #[test]
    fn dims_check() {
        let ck = sample();
        assert!(ck.expect_dims(&ck.params.dims, Path::new("m")).is_ok());
        let err = ck.expect_dims(&EncoderDims::default(), Path::new("m")).unwrap_err();
        assert!(err.is_validation());
    }
}
