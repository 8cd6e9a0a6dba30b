//! Binary container for trained parameter sets.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, `u64` parameter count, then the parameters as little-endian `f64`.
//! Parameters are stored as raw bits so a write-read cycle is exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::critic::Critic;
use crate::error::{Error, Result};
use crate::field::{FieldConfig, ScalarField};
use crate::schedule::DiffusionSchedule;

pub const MAGIC: &[u8; 8] = b"DFALCKPT";
pub const VERSION: u32 = 1;

/// Architecture of the stored parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Field(FieldConfig),
    Critic {
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        layers: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub architecture: Architecture,
    pub schedule: DiffusionSchedule,
    pub seed: u64,
    /// Free-form provenance such as the training stage or record count.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_field(field: &ScalarField, schedule: DiffusionSchedule, seed: u64) -> Self {
        Self {
            header: Header {
                architecture: Architecture::Field(field.config().clone()),
                schedule,
                seed,
                metadata: BTreeMap::new(),
            },
            params: field.params().to_vec(),
        }
    }

    pub fn from_critic(critic: &Critic, seed: u64) -> Self {
        Self {
            header: Header {
                architecture: Architecture::Critic {
                    state_dim: critic.state_dim,
                    action_dim: critic.action_dim,
                    hidden: critic.hidden,
                    layers: critic.layers,
                },
                schedule: DiffusionSchedule::default(),
                seed,
                metadata: BTreeMap::new(),
            },
            params: critic.params().to_vec(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.header.metadata.insert(key.into(), value.to_string());
        self
    }

    /// Rebuilds the field; `expected` guards against loading into a different architecture.
    pub fn into_field(self, expected: Option<&FieldConfig>) -> Result<ScalarField> {
        match self.header.architecture {
            Architecture::Field(cfg) => {
                if let Some(want) = expected {
                    if want != &cfg {
                        return Err(Error::CheckpointMismatch(format!(
                            "checkpoint holds {cfg:?}, configuration asks for {want:?}"
                        )));
                    }
                }
                ScalarField::from_parts(cfg, self.params)
                    .map_err(|e| Error::Checkpoint(format!("parameters do not fit architecture: {e}")))
            }
            Architecture::Critic { .. } => Err(Error::CheckpointMismatch(
                "expected a scalar field, found a critic".into(),
            )),
        }
    }

    pub fn into_critic(self) -> Result<Critic> {
        match self.header.architecture {
            Architecture::Critic {
                state_dim,
                action_dim,
                hidden,
                layers,
            } => Critic::from_parts(state_dim, action_dim, hidden, layers, self.params)
                .map_err(|e| Error::Checkpoint(format!("parameters do not fit architecture: {e}"))),
            Architecture::Field(_) => Err(Error::CheckpointMismatch(
                "expected a critic, found a scalar field".into(),
            )),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(28 + header.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_bits().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(take(&mut r)?) as usize;
        if header_len > r.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..header_len])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        r = &r[header_len..];
        let n = u64::from_le_bytes(take(&mut r)?) as usize;
        if r.len() != n.saturating_mul(8) {
            return Err(Error::Checkpoint(format!(
                "expected {n} parameters, found {} bytes",
                r.len()
            )));
        }
        let params = r
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok(Self { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
