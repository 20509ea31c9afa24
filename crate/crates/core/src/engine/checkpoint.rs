//! Model checkpoints and their on-disk format.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `VTHZCKPT` |
//! | 4     | format version (`1`) |
//! | 4     | header length `h` |
//! | h     | `ArchConfig` as sorted `key=value\n` lines |
//! | 8     | element count `e` |
//! | 4e    | f32 tensors in [`Params::tensors`] order, row-major |
//! | 8     | checksum: first 8 bytes of SHA-256 over the tensor blob |
//!
//! Tensor order: token embedding, position embedding, then per layer
//! attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down, then final norm
//! and unembedding.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::arch::ArchConfig;
use super::model::Model;
use super::params::Params;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VTHZCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture plus weights. Weights live in f64 and are stored as f32.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub arch: ArchConfig,
    pub params: Params<f64>,
}

pub fn blob_checksum(blob: &[u8]) -> u64 {
    let digest = Sha256::digest(blob);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl ModelCheckpoint {
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = Params::init(&arch, seed);
        Ok(Self { arch, params })
    }

    pub fn identity(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let params = Params::identity(&arch);
        Ok(Self { arch, params })
    }

    pub fn new(arch: ArchConfig, params: Params<f64>) -> Result<Self> {
        arch.validate()?;
        if !params.shapes_match(&arch) {
            return Err(Error::Config("parameter shapes do not match the architecture".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn model<T: Scalar>(&self) -> Result<Model<T>> {
        Model::new(self.arch.clone(), self.params.cast())
    }

    /// Rounds weights through f32 so in-memory state equals what a save and
    /// load would produce.
    pub fn quantized(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            params: self.params.cast::<f32>().cast(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.arch.to_header();
        let n = self.params.n_elements();
        let mut out = Vec::with_capacity(32 + header.len() + 4 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        let blob_start = out.len();
        for t in self.params.tensors() {
            for &x in t.as_slice() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let checksum = blob_checksum(&out[blob_start..]);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], expected: Option<&ArchConfig>) -> Result<Self> {
        let need = |len: usize| -> Result<()> {
            if bytes.len() < len {
                Err(Error::Truncated {
                    expected: len,
                    found: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(16)?;
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        need(16 + header_len + 8)?;
        let header = std::str::from_utf8(&bytes[16..16 + header_len])
            .map_err(|_| Error::Checkpoint("corrupt header: not UTF-8".into()))?;
        let arch = ArchConfig::from_header(header)?;
        if let Some(want) = expected {
            if *want != arch {
                return Err(Error::ArchMismatch {
                    expected: want.to_string(),
                    found: arch.to_string(),
                });
            }
        }
        let mut params = Params::<f64>::identity(&arch);
        let n = params.n_elements();
        let count_at = 16 + header_len;
        let stored_n = u64::from_le_bytes(bytes[count_at..count_at + 8].try_into().expect("8 bytes"));
        if stored_n != n as u64 {
            return Err(Error::Checkpoint(format!(
                "corrupt header: {stored_n} elements stored, architecture needs {n}"
            )));
        }
        let blob_start = count_at + 8;
        let blob_end = blob_start + 4 * n;
        need(blob_end + 8)?;
        if bytes.len() != blob_end + 8 {
            return Err(Error::Checkpoint("trailing bytes after checksum".into()));
        }
        let blob = &bytes[blob_start..blob_end];
        let stored = u64::from_le_bytes(bytes[blob_end..blob_end + 8].try_into().expect("8 bytes"));
        let computed = blob_checksum(blob);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut values = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        for t in params.tensors_mut() {
            for x in t.as_mut_slice() {
                *x = values.next().expect("length checked");
            }
        }
        Ok(Self { arch, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&ArchConfig>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes, expected)
    }

    /// Hex SHA-256 of the serialised checkpoint.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::arch::Precision;

    fn arch() -> ArchConfig {
        ArchConfig::new(2, 8, 2, 16, 12, 10).with_precision(Precision::Double)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = ModelCheckpoint::init(arch(), 3).unwrap();
        let bytes = ck.to_bytes();
        let back = ModelCheckpoint::from_bytes(&bytes, Some(&arch())).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, ck.quantized());
    }

    #[test]
    fn truncated_blob_is_reported() {
        let bytes = ModelCheckpoint::init(arch(), 3).unwrap().to_bytes();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            match ModelCheckpoint::from_bytes(&bytes[..cut], None) {
                Err(Error::Truncated { .. }) => {}
                other => panic!("cut at {cut}: expected truncation, got {other:?}"),
            }
        }
    }

    #[test]
    fn checksum_field_matches_recomputation() {
        let bytes = ModelCheckpoint::init(arch(), 5).unwrap().to_bytes();
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let blob = &bytes[16 + header_len + 8..bytes.len() - 8];
        let digest = Sha256::digest(blob);
        let expect = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        assert_eq!(stored, expect);
    }

    #[test]
    fn corruption_and_mismatch_are_rejected() {
        let mut bytes = ModelCheckpoint::init(arch(), 5).unwrap().to_bytes();
        let mut other = arch();
        other.n_layers = 3;
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes, Some(&other)),
            Err(Error::ArchMismatch { .. })
        ));
        let last_blob = bytes.len() - 9;
        bytes[last_blob] ^= 0x40;
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes, None),
            Err(Error::Checksum { .. })
        ));
        bytes[17] = b'#';
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes, None),
            Err(Error::Checkpoint(_))
        ));
    }
}
