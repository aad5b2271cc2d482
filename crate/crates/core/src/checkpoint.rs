//! Self-describing binary checkpoints.
//!
//! ```text
//! "CMBCKPT1" | header length u64 | JSON header | f64 payload (little endian)
//! ```
//!
//! The header echoes the network configuration and lists every record in the
//! payload with its name and length. All floating-point state lives in the
//! payload, so a save/load round trip is bit exact.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::train::{EpochRecord, Stage};
use crate::unet::{UNet, UNetConfig};

const MAGIC: &[u8; 8] = b"CMBCKPT1";

/// Optimizer and bookkeeping needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    /// Last completed epoch.
    pub epoch: usize,
    pub master_seed: u64,
    pub history: Vec<EpochRecord>,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub params: Vec<(String, Tensor)>,
    /// `(layer, running mean, running var)` per batch norm.
    pub batch_norm: Vec<(String, Vec<f64>, Vec<f64>)>,
    pub training: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: UNetConfig,
    params: Vec<TensorEntry>,
    batch_norm: Vec<BnEntry>,
    /// Informational copy of every dropout probability.
    dropout_p: Vec<f64>,
    training: Option<TrainHeader>,
    /// Human-readable description of the random streams behind this state.
    seed_label: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BnEntry {
    name: String,
    channels: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainHeader {
    stage: Stage,
    epoch: usize,
    master_seed: u64,
    history_len: usize,
    optimizer: OptimizerKind,
    optimizer_steps: u64,
}

impl Checkpoint {
    pub fn capture(model: &UNet, training: Option<TrainState>) -> Self {
        let store = model.params();
        Checkpoint {
            config: model.config().clone(),
            params: store.names().iter().cloned().zip(store.values().iter().cloned()).collect(),
            batch_norm: model.bn_state(),
            training,
        }
    }

    /// Rebuilds the network, checking names and shapes against the config.
    pub fn to_model(&self) -> Result<UNet> {
        // initial values are overwritten below; the generator only fills them
        let mut model = UNet::new(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint has {} parameters, configuration implies {}",
                self.params.len(),
                store.len()
            )));
        }
        for (id, (name, value)) in self.params.iter().enumerate() {
            if store.name(id) != name || store.get(id).shape() != value.shape() {
                return Err(Error::ArchitectureMismatch(format!(
                    "parameter {id}: checkpoint {name} {:?}, network {} {:?}",
                    value.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = value.clone();
        }
        model.set_bn_state(&self.batch_norm)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let dropout_p = self
            .params
            .iter()
            .filter(|(n, _)| n.ends_with(".p_logit"))
            .map(|(_, t)| crate::layers::sigmoid(t.data()[0]))
            .collect();
        let seed_label = match &self.training {
            Some(t) => format!("seed {} stage {} after epoch {}", t.master_seed, t.stage.name(), t.epoch),
            None => "inference snapshot".to_string(),
        };
        let header = Header {
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape() }).collect(),
            batch_norm: self
                .batch_norm
                .iter()
                .map(|(n, m, _)| BnEntry { name: n.clone(), channels: m.len() })
                .collect(),
            dropout_p,
            training: self.training.as_ref().map(|t| TrainHeader {
                stage: t.stage,
                epoch: t.epoch,
                master_seed: t.master_seed,
                history_len: t.history.len(),
                optimizer: t.optimizer.kind(),
                optimizer_steps: t.optimizer.steps(),
            }),
            seed_label,
        };
        let json = serde_json::to_vec(&header)?;

        let mut payload: Vec<f64> = Vec::new();
        for (_, t) in &self.params {
            payload.extend_from_slice(t.data());
        }
        for (_, m, v) in &self.batch_norm {
            if m.len() != v.len() {
                return Err(Error::shape("checkpoint", "running mean and variance lengths differ"));
            }
            payload.extend_from_slice(m);
            payload.extend_from_slice(v);
        }
        if let Some(t) = &self.training {
            payload.push(t.optimizer.learning_rate());
            for r in &t.history {
                payload.extend_from_slice(&[r.epoch as f64, r.train_loss, r.val_loss]);
            }
            for m in t.optimizer.first_moments().iter().chain(t.optimizer.second_moments()) {
                payload.extend_from_slice(m.data());
            }
        }

        let mut out = Vec::with_capacity(16 + json.len() + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format { kind: "checkpoint", path: path.to_path_buf(), detail };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated".into()))?;
        if hlen > body.len() {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(e.to_string()))?;
        let raw = &body[hlen..];
        if raw.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values".into()));
        }
        let payload: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut pos = 0;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let s = payload.get(pos..pos + n).ok_or_else(|| bad("payload shorter than header".into()))?;
            pos += n;
            Ok(s.to_vec())
        };

        let mut params = Vec::with_capacity(header.params.len());
        for e in &header.params {
            let n = e.shape.iter().product();
            params.push((e.name.clone(), Tensor::new(e.shape, take(n)?)?));
        }
        let mut batch_norm = Vec::with_capacity(header.batch_norm.len());
        for e in &header.batch_norm {
            batch_norm.push((e.name.clone(), take(e.channels)?, take(e.channels)?));
        }
        let training = match &header.training {
            None => None,
            Some(t) => {
                let lr = take(1)?[0];
                let mut history = Vec::with_capacity(t.history_len);
                for _ in 0..t.history_len {
                    let r = take(3)?;
                    history.push(EpochRecord { epoch: r[0] as usize, train_loss: r[1], val_loss: r[2] });
                }
                let (m, v) = match t.optimizer {
                    OptimizerKind::Sgd => (Vec::new(), Vec::new()),
                    OptimizerKind::Adam => {
                        let mut m = Vec::new();
                        let mut v = Vec::new();
                        for (_, p) in &params {
                            m.push(Tensor::new(p.shape(), take(p.len())?)?);
                        }
                        for (_, p) in &params {
                            v.push(Tensor::new(p.shape(), take(p.len())?)?);
                        }
                        (m, v)
                    }
                };
                let optimizer = Optimizer::from_parts(t.optimizer, lr, t.optimizer_steps, m, v)?;
                Some(TrainState { stage: t.stage, epoch: t.epoch, master_seed: t.master_seed, history, optimizer })
            }
        };
        if pos != payload.len() {
            return Err(bad(format!("{} trailing values", payload.len() - pos)));
        }
        Ok(Checkpoint { config: header.config, params, batch_norm, training })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::decode(&bytes, path)
    }
}
