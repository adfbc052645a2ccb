//! Checkpoint container and report files.
//!
//! Layout: the 8-byte magic `BITPRUNE`, a little-endian `u64` header
//! length, a JSON header, then the raw little-endian `f64` payload. Every
//! tensor entry in the header carries its payload offset, element count and
//! SHA-256 digest.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bitloss::BitLossConfig;
use crate::models::{Model, ModelSpec};
use crate::optim::Sgd;
use crate::params::ParamKind;
use crate::quantizer::{attach_quantization, QuantPlan};
use crate::tensor::Tensor;
use crate::training::TrainState;

pub const MAGIC: &[u8; 8] = b"BITPRUNE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: not a checkpoint file (bad magic)")]
    BadMagic(PathBuf),
    #[error("{path}: truncated, need {expected} bytes but file has {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: format version {found} is not supported (expected {supported})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        supported: u32,
    },
    #[error("{path}: checksum mismatch in tensor `{tensor}`")]
    Checksum { path: PathBuf, tensor: String },
    #[error("{path}: malformed header: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("checkpoint does not match the model: {0}")]
    Incompatible(String),
    #[error("checkpoint was written for config {found}, current config is {expected}")]
    ConfigHash { expected: String, found: String },
}

/// Data order is a pure function of `(seed, epoch)`, so this is the whole
/// generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub kind: ParamKind,
    pub frozen: bool,
    pub lr_mult: f64,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupState {
    pub id: String,
    pub n: f64,
    pub rounded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub plan: Option<QuantPlan>,
    pub params: Vec<SavedParam>,
    pub optimizer: Sgd,
    pub state: TrainState,
    pub rng: RngState,
    pub bitloss: BitLossConfig,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        plan: Option<&QuantPlan>,
        optimizer: &Sgd,
        state: &TrainState,
        rng: RngState,
        bitloss: &BitLossConfig,
        config_hash: &str,
    ) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(_, p)| SavedParam {
                name: p.name.clone(),
                kind: p.kind,
                frozen: p.frozen,
                lr_mult: p.lr_mult,
                tensor: p.tensor.clone(),
            })
            .collect();
        Self {
            spec: model.spec().clone(),
            plan: plan.cloned(),
            params,
            optimizer: optimizer.clone(),
            state: state.clone(),
            rng,
            bitloss: bitloss.clone(),
            config_hash: config_hash.to_string(),
        }
    }

    /// Per-group bitlength and whether it has been fixed to an integer.
    pub fn groups(&self) -> Vec<GroupState> {
        let Some(plan) = &self.plan else {
            return Vec::new();
        };
        plan.groups
            .iter()
            .map(|g| {
                let p = &self.params[g.bits.0];
                GroupState {
                    id: g.id.clone(),
                    n: p.tensor.item(),
                    rounded: self.state.rounded,
                }
            })
            .collect()
    }

    /// Rebuilds the model and plan and copies every saved tensor in.
    pub fn restore_model(&self) -> Result<(Model, Option<QuantPlan>), CheckpointError> {
        let incompatible = |e: crate::error::Error| CheckpointError::Incompatible(e.to_string());
        let mut model = Model::build(&self.spec).map_err(incompatible)?;
        let plan = match &self.plan {
            Some(saved) => {
                let fresh = attach_quantization(&mut model, saved.granularity, saved.roles)
                    .map_err(incompatible)?;
                let same = fresh.groups.len() == saved.groups.len()
                    && fresh
                        .groups
                        .iter()
                        .zip(&saved.groups)
                        .all(|(a, b)| a.id == b.id && a.bits == b.bits);
                if !same {
                    return Err(CheckpointError::Incompatible(
                        "quantization groups differ from the model's".into(),
                    ));
                }
                Some(saved.clone())
            }
            None => None,
        };
        if model.params().len() != self.params.len() {
            return Err(CheckpointError::Incompatible(format!(
                "{} saved parameters, model has {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for (saved, (_, p)) in self.params.iter().zip(model.params_mut().iter_mut()) {
            if saved.name != p.name || saved.tensor.shape() != p.tensor.shape() {
                return Err(CheckpointError::Incompatible(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    saved.name,
                    saved.tensor.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = saved.tensor.clone();
            p.kind = saved.kind;
            p.frozen = saved.frozen;
            p.lr_mult = saved.lr_mult;
        }
        Ok((model, plan))
    }

    pub fn check_config_hash(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.config_hash != expected {
            return Err(CheckpointError::ConfigHash {
                expected: expected.to_string(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    kind: ParamKind,
    frozen: bool,
    lr_mult: f64,
    tensor: TensorEntry,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Option<TensorEntry>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: ModelSpec,
    plan: Option<QuantPlan>,
    groups: Vec<GroupState>,
    params: Vec<ParamEntry>,
    optimizer: OptimizerEntry,
    state: TrainState,
    rng: RngState,
    bitloss: BitLossConfig,
    config_hash: String,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn push_tensor(
    payload: &mut Vec<u8>,
    name: String,
    shape: Vec<usize>,
    data: &[f64],
) -> TensorEntry {
    let offset = payload.len();
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    TensorEntry {
        name,
        shape,
        offset,
        len: data.len(),
        sha256: hex::encode(Sha256::digest(&payload[offset..])),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut payload = Vec::new();
    let params = ckpt
        .params
        .iter()
        .map(|p| ParamEntry {
            kind: p.kind,
            frozen: p.frozen,
            lr_mult: p.lr_mult,
            tensor: push_tensor(
                &mut payload,
                p.name.clone(),
                p.tensor.shape().to_vec(),
                p.tensor.data(),
            ),
        })
        .collect();
    let velocity = ckpt
        .optimizer
        .velocity()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_ref()
                .map(|v| push_tensor(&mut payload, format!("velocity.{i}"), vec![v.len()], v))
        })
        .collect();
    let header = Header {
        version: FORMAT_VERSION,
        spec: ckpt.spec.clone(),
        plan: ckpt.plan.clone(),
        groups: ckpt.groups(),
        params,
        optimizer: OptimizerEntry {
            momentum: ckpt.optimizer.momentum,
            weight_decay: ckpt.optimizer.weight_decay,
            velocity,
        },
        state: ckpt.state.clone(),
        rng: ckpt.rng,
        bitloss: ckpt.bitloss.clone(),
        config_hash: ckpt.config_hash.clone(),
    };
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Writes to a sibling temporary file first so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = to_bytes(ckpt);
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes, path)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint, CheckpointError> {
    let truncated = |expected: usize| CheckpointError::Truncated {
        path: path.to_owned(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < MAGIC.len() {
        return Err(truncated(16));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic(path.to_owned()));
    }
    if bytes.len() < 16 {
        return Err(truncated(16));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .ok_or_else(|| truncated(usize::MAX))?;
    if bytes.len() < payload_start {
        return Err(truncated(payload_start));
    }
    let header_bytes = &bytes[16..payload_start];
    let malformed = |e: serde_json::Error| CheckpointError::Header {
        path: path.to_owned(),
        reason: e.to_string(),
    };
    let probe: VersionProbe = serde_json::from_slice(header_bytes).map_err(malformed)?;
    if probe.version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            path: path.to_owned(),
            found: probe.version,
            supported: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_slice(header_bytes).map_err(malformed)?;
    let payload = &bytes[payload_start..];
    let read = |e: &TensorEntry| -> Result<Tensor, CheckpointError> {
        let end = e.offset + e.len * 8;
        if payload.len() < end {
            return Err(truncated(payload_start + end));
        }
        let raw = &payload[e.offset..end];
        if hex::encode(Sha256::digest(raw)) != e.sha256 {
            return Err(CheckpointError::Checksum {
                path: path.to_owned(),
                tensor: e.name.clone(),
            });
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Header {
            path: path.to_owned(),
            reason: format!("tensor `{}`: {err}", e.name),
        })
    };
    let mut params = Vec::with_capacity(header.params.len());
    for p in &header.params {
        params.push(SavedParam {
            name: p.tensor.name.clone(),
            kind: p.kind,
            frozen: p.frozen,
            lr_mult: p.lr_mult,
            tensor: read(&p.tensor)?,
        });
    }
    let mut velocity = Vec::with_capacity(header.optimizer.velocity.len());
    for v in &header.optimizer.velocity {
        velocity.push(match v {
            Some(e) => Some(read(e)?.into_data()),
            None => None,
        });
    }
    let mut optimizer = Sgd::new(header.optimizer.momentum, header.optimizer.weight_decay);
    optimizer.set_velocity(velocity);
    Ok(Checkpoint {
        spec: header.spec,
        plan: header.plan,
        params,
        optimizer,
        state: header.state,
        rng: header.rng,
        bitloss: header.bitloss,
        config_hash: header.config_hash,
    })
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> crate::error::Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| crate::error::Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> crate::error::Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::error::Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::error::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| crate::error::Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{Granularity, RoleSelection};

    fn sample() -> Checkpoint {
        let spec = ModelSpec::Mlp {
            widths: vec![4, 3, 2],
            seed: 7,
        };
        let mut model = Model::build(&spec).unwrap();
        let plan =
            attach_quantization(&mut model, Granularity::Channel, RoleSelection::Both).unwrap();
        model
            .params_mut()
            .set_bits(plan.groups[1].bits, 5.123456789);
        let mut sgd = Sgd::new(0.9, 1e-4);
        sgd.set_velocity(vec![Some(vec![0.1, -1e-300, f64::MIN_POSITIVE]), None]);
        Checkpoint::capture(
            &model,
            Some(&plan),
            &sgd,
            &TrainState::default(),
            RngState { seed: 7, epoch: 3 },
            &BitLossConfig::default(),
            "abc",
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let c = sample();
        save(&c, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.params.iter().zip(&c.params) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        let (m, plan) = back.restore_model().unwrap();
        let plan = plan.unwrap();
        assert_eq!(m.params().bits(plan.groups[1].bits), 5.123456789);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = to_bytes(&sample());
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(
            from_bytes(&bytes, Path::new("c")),
            Err(CheckpointError::Checksum { .. })
        ));
    }

    #[test]
    fn truncation_and_magic_are_distinct() {
        let bytes = to_bytes(&sample());
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 8], Path::new("c")),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(
            from_bytes(&bytes[..100], Path::new("c")),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            from_bytes(&bad, Path::new("c")),
            Err(CheckpointError::BadMagic(_))
        ));
    }

    #[test]
    fn version_mismatch() {
        let bytes = to_bytes(&sample());
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + len].to_vec()).unwrap();
        let header = header.replacen("\"version\": 1", "\"version\": 9", 1);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&bytes[16 + len..]);
        assert!(matches!(
            from_bytes(&out, Path::new("c")),
            Err(CheckpointError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn config_hash_check() {
        let c = sample();
        assert!(c.check_config_hash("abc").is_ok());
        assert!(matches!(
            c.check_config_hash("zzz"),
            Err(CheckpointError::ConfigHash { .. })
        ));
    }
}
