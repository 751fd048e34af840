//! End-to-end gradients, the joint training loop and checkpoints.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ad::{gradient, with_tape, Var};
use crate::error::{Error, Result};
use crate::field::{ChartField, Field};
use crate::model::{ConditionalModel, ConditionalSpec, FlowModel};
use crate::nn::{clip_global_norm, AdamConfig, AdamState};
use crate::scalar::Scalar;

/// splitmix64 of `seed` combined with `stream`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean loss and gradient over the samples that stayed inside the chart
/// domain.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub used: usize,
    pub skipped: usize,
}

fn reduce(results: Vec<Result<(f64, Vec<f64>)>>, n_params: usize, skip_domain: bool) -> Result<BatchGradient> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    let (mut used, mut skipped) = (0, 0);
    for r in results {
        match r {
            Ok((l, g)) => {
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                used += 1;
            }
            Err(Error::ChartDomain { layer, msg }) => {
                if !skip_domain {
                    return Err(Error::ChartDomain { layer, msg });
                }
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::NumericalAbort("every sample in the batch left the chart domain".into()));
    }
    let inv = 1.0 / used as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(BatchGradient { loss: loss * inv, gradient: grad, used, skipped })
}

fn sample_gradient(n_params: usize, f: impl FnOnce(&mut dyn FnMut(&f64) -> Var) -> Result<Var>) -> Result<(f64, Vec<f64>)> {
    with_tape(|| {
        let loss = f(&mut |p: &f64| Var::leaf(*p))?;
        if !loss.value().is_finite() {
            return Err(Error::NonFinite(format!("loss {}", loss.value())));
        }
        let mut g = gradient(loss);
        g.truncate(n_params);
        g.resize(n_params, 0.0);
        Ok((loss.value(), g))
    })
}

/// Gradient of the mean NLL of a single flow over `batch`.
pub fn end_to_end_gradient(model: &FlowModel<f64>, batch: &[ChartField<f64>]) -> Result<BatchGradient> {
    let n = model.param_count();
    let results: Vec<_> = batch
        .par_iter()
        .map(|x| {
            sample_gradient(n, |leaf| {
                let m = model.map(leaf);
                m.nll_chart(&ChartField::lift(x))
            })
        })
        .collect();
    reduce(results, n, false)
}

/// A paired training sample in chart coordinates: target `x`, source `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartPair {
    pub x: ChartField<f64>,
    pub y: ChartField<f64>,
}

impl ChartPair {
    pub fn from_fields(x: &Field, y: &Field) -> Result<Self> {
        Ok(ChartPair { x: x.to_chart()?, y: y.to_chart()? })
    }
}

/// Gradient of the mean conditional NLL over `batch`.
pub fn conditional_gradient(model: &ConditionalModel<f64>, batch: &[&ChartPair], skip_domain: bool) -> Result<BatchGradient> {
    let n = model.param_count();
    let results: Vec<_> = batch
        .par_iter()
        .map(|p| {
            sample_gradient(n, |leaf| {
                let m = model.map(leaf);
                m.conditional_nll_chart(&ChartField::lift(&p.x), &ChartField::lift(&p.y))
            })
        })
        .collect();
    reduce(results, n, skip_domain)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 200, batch_size: 8, adam: AdamConfig::default(), clip_norm: 100.0, checkpoint_every: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Joint training state: model, optimizer and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub spec: ConditionalSpec,
    pub model: ConditionalModel<f64>,
    pub adam: AdamState,
    pub step: u64,
    pub seed: u64,
    pub config: TrainConfig,
}

impl Trainer {
    /// Builds the model and initializes actnorm from the first `batch_size`
    /// training pairs.
    pub fn new(spec: ConditionalSpec, config: TrainConfig, seed: u64, data: &[ChartPair]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptySplit("training set".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        let mut model = spec.build(seed)?;
        let init: Vec<_> = data.iter().take(config.batch_size.max(2)).collect();
        model.source.init_actnorm(&init.iter().map(|p| p.y.clone()).collect::<Vec<_>>())?;
        model.target.init_actnorm(&init.iter().map(|p| p.x.clone()).collect::<Vec<_>>())?;
        let adam = AdamState::new(config.adam, model.param_count());
        Ok(Trainer { spec, model, adam, step: 0, seed, config })
    }

    pub fn batch_indices(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.step));
        rand::seq::index::sample(&mut rng, n, self.config.batch_size.min(n)).into_vec()
    }

    pub fn step(&mut self, data: &[ChartPair]) -> Result<StepStats> {
        let idx = self.batch_indices(data.len());
        let batch: Vec<&ChartPair> = idx.iter().map(|&i| &data[i]).collect();
        let mut g = conditional_gradient(&self.model, &batch, true)?;
        let grad_norm = clip_global_norm(&mut g.gradient, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NumericalAbort(format!("gradient norm {grad_norm} at step {}", self.step)));
        }
        let mut params = self.model.params();
        self.adam.update(&mut params, &g.gradient).map_err(|e| Error::NumericalAbort(e.to_string()))?;
        self.model.set_params(&params)?;
        self.model.project();
        let stats = StepStats { step: self.step, loss: g.loss, grad_norm, used: g.used, skipped: g.skipped };
        self.step += 1;
        Ok(stats)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            params: self.model.params(),
            adam: self.adam.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut model = ck.spec.build(ck.seed)?;
        model.set_params(&ck.params)?;
        if ck.adam.m.len() != ck.params.len() || ck.adam.v.len() != ck.params.len() {
            return Err(Error::Shape("optimizer moments do not match the parameter count".into()));
        }
        Ok(Trainer { spec: ck.spec, model, adam: ck.adam, step: ck.step, seed: ck.seed, config: ck.config })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    spec: ConditionalSpec,
    config: TrainConfig,
    seed: u64,
    step: u64,
    adam: AdamConfig,
    adam_step: u64,
    param_count: usize,
}

/// Serialized trainer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: ConditionalSpec,
    pub config: TrainConfig,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<f64>,
    pub adam: AdamState,
}

impl Checkpoint {
    /// `MFCK`, u16 version, u32 header length, JSON header, f64 payload
    /// (parameters, first moments, second moments), SHA-256 of all
    /// preceding bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            spec: self.spec.clone(),
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            adam: self.adam.config,
            adam_step: self.adam.step,
            param_count: self.params.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(10 + json.len() + 24 * self.params.len() + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.iter().chain(&self.adam.m).chain(&self.adam.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |pos: usize, msg: &str| Error::Format { pos, msg: msg.into() };
        if bytes.len() < 10 + 32 {
            return Err(fmt(bytes.len(), "checkpoint shorter than its fixed header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt(0, "bad magic, expected MFCK"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let hlen = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
        let json = body.get(10..10 + hlen).ok_or_else(|| fmt(10, "header length exceeds file"))?;
        let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| fmt(10, &format!("header: {e}")))?;
        let payload = &body[10 + hlen..];
        let n = header.param_count;
        if payload.len() != 24 * n {
            return Err(fmt(10 + hlen, &format!("payload of {} bytes for {} parameters", payload.len(), n)));
        }
        let vals: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut adam = AdamState::new(header.adam, n);
        adam.step = header.adam_step;
        adam.m = vals[n..2 * n].to_vec();
        adam.v = vals[2 * n..].to_vec();
        Ok(Checkpoint { spec: header.spec, config: header.config, seed: header.seed, step: header.step, params: vals[..n].to_vec(), adam })
    }

    /// Writes through a temporary file so a failed write never clobbers the
    /// previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rejects a checkpoint whose model structure differs from `expected`.
    pub fn expect_spec(&self, expected: &ConditionalSpec) -> Result<()> {
        if &self.spec != expected {
            return Err(Error::Shape("checkpoint was written for a different model structure".into()));
        }
        Ok(())
    }
}
