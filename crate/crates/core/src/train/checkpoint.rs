//! Versioned JSON checkpoints.
//!
//! A checkpoint carries the model config, every parameter tensor, the
//! optimizer moments, the shuffling RNG position and the completed epoch
//! count, so a run resumed from it continues bit-for-bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::train::optim::{OptimizerKind, OptimizerState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub epoch: usize,
}

/// Position of a ChaCha8 stream. `word_pos` is a `u128`, stored as a
/// decimal string because JSON numbers cannot hold it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().unwrap_or(0));
        rng
    }

    fn check(&self) -> Result<()> {
        self.word_pos
            .parse::<u128>()
            .map(|_| ())
            .map_err(|_| Error::Invalid(format!("bad rng word_pos `{}`", self.word_pos)))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum OptimizerRecord {
    Sgd,
    Adam {
        step: u64,
        m: Vec<TensorRecord>,
        v: Vec<TensorRecord>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema_version: u32,
    model_config: ModelConfig,
    epoch: usize,
    tensors: Vec<TensorRecord>,
    optimizer: OptimizerRecord,
    rng: RngState,
}

fn records(map: &BTreeMap<String, Tensor>) -> Vec<TensorRecord> {
    map.iter()
        .map(|(name, t)| TensorRecord {
            name: name.clone(),
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        })
        .collect()
}

fn from_records(recs: Vec<TensorRecord>) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for r in recs {
        let t = Tensor::new(r.shape, r.values).map_err(|e| {
            Error::Invalid(format!("tensor `{}`: {e}", r.name))
        })?;
        if out.insert(r.name.clone(), t).is_some() {
            return Err(Error::Invalid(format!("duplicate tensor `{}`", r.name)));
        }
    }
    Ok(out)
}

/// Moments must mirror the parameters name for name and shape for shape.
fn check_moments(params: &ModelParams, moments: &BTreeMap<String, Tensor>, which: &str) -> Result<()> {
    for (name, p) in params.iter() {
        let m = moments
            .get(name)
            .ok_or_else(|| Error::MissingTensor(format!("optimizer.{which}.{name}")))?;
        if m.shape() != p.shape() {
            return Err(Error::TensorShape {
                name: format!("optimizer.{which}.{name}"),
                found: m.shape().to_vec(),
                expected: p.shape().to_vec(),
            });
        }
    }
    if moments.len() != params.len() {
        return Err(Error::Invalid(format!("optimizer.{which} has extra tensors")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            schema_version: CHECKPOINT_VERSION,
            model_config: self.params.config.clone(),
            epoch: self.epoch,
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
            optimizer: match &self.optimizer {
                OptimizerState::Sgd => OptimizerRecord::Sgd,
                OptimizerState::Adam { step, m, v } => OptimizerRecord::Adam {
                    step: *step,
                    m: records(m),
                    v: records(v),
                },
            },
            rng: self.rng.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// The schema version is checked before anything else, so a file from
    /// a different version reports that rather than a field error.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Invalid("checkpoint has no schema_version".into()))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::VersionMismatch {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: CHECKPOINT_VERSION,
            });
        }
        let file: CheckpointFile = serde_json::from_value(value)?;
        let params = ModelParams::new(file.model_config, from_records(file.tensors)?)?;
        let optimizer = match file.optimizer {
            OptimizerRecord::Sgd => OptimizerState::Sgd,
            OptimizerRecord::Adam { step, m, v } => {
                let (m, v) = (from_records(m)?, from_records(v)?);
                check_moments(&params, &m, "m")?;
                check_moments(&params, &v, "v")?;
                OptimizerState::Adam { step, m, v }
            }
        };
        file.rng.check()?;
        Ok(Self {
            params,
            optimizer,
            rng: file.rng,
            epoch: file.epoch,
        })
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.optimizer.kind()
    }
}

/// Writes to a sibling temp file and renames it into place, so a crash
/// never leaves a truncated checkpoint at `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, ckpt.to_json()?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&fs::read_to_string(path)?)
}
