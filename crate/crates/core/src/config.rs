//! Declarative TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::check::CheckConfig;
use crate::data::{uniform_pole, GroupStudyConfig, PairedConfig};
use crate::error::{Error, Result};
use crate::geometry::{Kind, ManifoldKind, ManifoldName, ManifoldSpec};
use crate::model::{ConditionalSpec, FlowSpec, StreamSpec, StreamWeights, TransferScope, TransferSpec};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Paired,
    Texture,
    GroupStudy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: Generator,
    pub seed: u64,
    /// Dataset directory; relative paths resolve against `out`.
    pub dir: PathBuf,
    pub grid: Vec<usize>,
    pub count: usize,
    pub n_dirs: usize,
    pub noise: f64,
    pub smoothness: f64,
    pub scale_jitter: f64,
    pub train_fraction: f64,
    pub group: GroupStudyConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = PairedConfig::default();
        DataConfig {
            generator: Generator::Paired,
            seed: 1,
            dir: PathBuf::from("data"),
            grid: p.grid,
            count: p.count,
            n_dirs: p.n_dirs,
            noise: p.noise,
            smoothness: p.smoothness,
            scale_jitter: p.scale_jitter,
            train_fraction: 0.8,
            group: GroupStudyConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn paired(&self) -> PairedConfig {
        PairedConfig {
            grid: self.grid.clone(),
            count: self.count,
            n_dirs: self.n_dirs,
            noise: self.noise,
            smoothness: self.smoothness,
            scale_jitter: self.scale_jitter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub flow: FlowSpec,
    /// Overrides `flow` for the source stream.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_flow: Option<FlowSpec>,
    /// Overrides `flow` for the target stream.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_flow: Option<FlowSpec>,
    pub weights: StreamWeights,
    pub detach_source: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            flow: FlowSpec {
                levels: vec![
                    crate::model::LevelSpec { squeeze: true, blocks: 2, split: true },
                    crate::model::LevelSpec { squeeze: false, blocks: 2, split: false },
                ],
                hidden: vec![32],
                ..FlowSpec::default()
            },
            source_flow: None,
            target_flow: None,
            weights: StreamWeights::default(),
            detach_source: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_perm: usize,
    pub alpha: f64,
    pub temperatures: Vec<f64>,
    /// Generation seeds; confusion matrices are averaged over them.
    pub seeds: Vec<u64>,
    pub benjamini_hochberg: bool,
    pub histogram_bins: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_dominance: Option<f64>,
    /// Largest accepted ratio of model error to the Fréchet-mean baseline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_error_ratio: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_perm: 1000,
            alpha: 0.05,
            temperatures: vec![0.0],
            seeds: vec![0],
            benjamini_hochberg: false,
            histogram_bins: 20,
            min_dominance: Some(0.8),
            max_error_ratio: None,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

fn default_source() -> ManifoldSpec {
    ManifoldSpec { manifold: ManifoldName::Spd, n: Some(3), chart: None, pole: None }
}

fn default_target() -> ManifoldSpec {
    ManifoldSpec { manifold: ManifoldName::Sphere, n: Some(12), chart: None, pole: None }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_source")]
    pub source: ManifoldSpec,
    #[serde(default = "default_target")]
    pub target: ManifoldSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub transfer: TransferSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub check: CheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

/// The dotted key at a byte offset of a TOML document.
fn key_at(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with('[') {
            table = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = t.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len() + 1;
        if pos > offset {
            break;
        }
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

/// A validated configuration with everything derived from it.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub source: ManifoldKind,
    pub target: ManifoldKind,
    pub spec: ConditionalSpec,
}

impl Resolved {
    pub fn data_dir(&self) -> PathBuf {
        self.config.out.join(&self.config.data.dir)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir().join("manifest.tsv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.config.out.join("checkpoint.mfck")
    }
}

fn resolve_manifold(key: &str, spec: &ManifoldSpec, default_pole: impl Fn(usize) -> Vec<f64>) -> Result<ManifoldKind> {
    let mut spec = spec.clone();
    if spec.manifold == ManifoldName::Sphere && spec.pole.is_none() {
        let n = spec.n.ok_or_else(|| Error::config(format!("{key}.n"), "sphere needs an ambient dimension"))?;
        spec.pole = Some(default_pole(n));
    }
    ManifoldKind::try_from(spec).map_err(|e| match e {
        Error::Config { key: k, msg } => Error::config(format!("{key}.{k}"), msg),
        other => other,
    })
}

/// The spec of `m` with any sphere pole written out explicitly.
fn pinned(m: &ManifoldKind) -> ManifoldSpec {
    let mut s: ManifoldSpec = m.clone().into();
    if let Kind::Sphere(_) = m.kind() {
        s.pole = Some(m.pole().to_vec());
    }
    s
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("{v} must be positive and finite")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| key_at(text, s.start)).unwrap_or_default();
            Error::config(if key.is_empty() { "<config>".into() } else { key }, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every module constraint without touching the filesystem.
    pub fn validate(&self) -> Result<Resolved> {
        let d = &self.data;
        if d.grid.is_empty() || d.grid.len() > 3 || d.grid.contains(&0) {
            return Err(Error::config("data.grid", format!("{:?} is not a 1-3 dimensional nonempty grid", d.grid)));
        }
        if !(d.noise >= 0.0) {
            return Err(Error::config("data.noise", "must be nonnegative"));
        }
        if !(d.scale_jitter >= 0.0) {
            return Err(Error::config("data.scale_jitter", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&d.smoothness) {
            return Err(Error::config("data.smoothness", "must lie in [0, 1]"));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::config("data.train_fraction", "must lie strictly between 0 and 1"));
        }
        if d.generator != Generator::GroupStudy && d.count < 2 {
            return Err(Error::config("data.count", "at least 2 pairs are needed for a split"));
        }
        if d.generator == Generator::GroupStudy && d.group.per_group < 2 {
            return Err(Error::config("data.group.per_group", "each group needs at least 2 subjects"));
        }
        let source = resolve_manifold("source", &self.source, |n| {
            let mut p = vec![0.0; n];
            p[0] = 1.0;
            p
        })?;
        let target = resolve_manifold("target", &self.target, uniform_pole)?;
        let (src_ch, tgt_ch) = match d.generator {
            Generator::Paired | Generator::GroupStudy => {
                if d.n_dirs < 4 || d.n_dirs % 2 != 0 {
                    return Err(Error::config("data.n_dirs", format!("{} must be even and at least 4", d.n_dirs)));
                }
                if source.kind() != Kind::Spd(3) {
                    return Err(Error::config("source.manifold", "the paired generators produce Spd(3) sources"));
                }
                if target.kind() != Kind::Sphere(d.n_dirs) {
                    return Err(Error::config("target.n", format!("the paired generators produce Sphere({}) targets", d.n_dirs)));
                }
                (1, 1)
            }
            Generator::Texture => {
                if d.grid.len() < 2 || d.grid[0] < 8 || d.grid[1] < 8 {
                    return Err(Error::config("data.grid", "texture grids need at least 8×8"));
                }
                if source.kind() != Kind::Spd(3) {
                    return Err(Error::config("source.manifold", "the texture generator produces Spd(3) sources"));
                }
                if target.kind() != Kind::PositiveReals {
                    return Err(Error::config("target.manifold", "the texture generator produces positive_reals targets"));
                }
                (1, 3)
            }
        };
        let m = &self.model;
        let spec = ConditionalSpec {
            source: StreamSpec {
                manifold: source.clone(),
                grid: d.grid.clone(),
                channels: src_ch,
                flow: m.source_flow.clone().unwrap_or_else(|| m.flow.clone()),
            },
            target: StreamSpec {
                manifold: target.clone(),
                grid: d.grid.clone(),
                channels: tgt_ch,
                flow: m.target_flow.clone().unwrap_or_else(|| m.flow.clone()),
            },
            transfer: self.transfer.clone(),
            weights: m.weights,
            detach_source: m.detach_source,
        };
        positive("model.weights.source", m.weights.source.max(m.weights.target))?;
        if m.weights.source < 0.0 || m.weights.target < 0.0 {
            return Err(Error::config("model.weights", "stream weights must be nonnegative"));
        }
        for (key, f) in [("model.flow", &spec.source.flow), ("model.flow", &spec.target.flow)] {
            if f.levels.is_empty() {
                return Err(Error::config(format!("{key}.levels"), "at least one level is required"));
            }
            if f.hidden.is_empty() || f.hidden.contains(&0) {
                return Err(Error::config(format!("{key}.hidden"), "hidden widths must be positive"));
            }
            positive(&format!("{key}.scale_clamp"), f.scale_clamp)?;
        }
        if self.transfer.scope == TransferScope::PerLocation && self.transfer.hidden == 0 {
            return Err(Error::config("transfer.hidden", "must be positive"));
        }
        spec.build(self.seed).map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::config("model", other.to_string()),
        })?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        positive("train.adam.lr", t.adam.lr)?;
        positive("train.adam.eps", t.adam.eps)?;
        if !(0.0..1.0).contains(&t.adam.beta1) || !(0.0..1.0).contains(&t.adam.beta2) {
            return Err(Error::config("train.adam", "betas must lie in [0, 1)"));
        }
        positive("train.clip_norm", t.clip_norm)?;
        let e = &self.eval;
        if e.n_perm < 100 {
            return Err(Error::config("eval.n_perm", "at least 100 permutations are required"));
        }
        if !(e.alpha > 0.0 && e.alpha < 1.0) {
            return Err(Error::config("eval.alpha", "must lie strictly between 0 and 1"));
        }
        if e.temperatures.is_empty() || e.temperatures.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::config("eval.temperatures", "need at least one finite nonnegative temperature"));
        }
        if e.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "need at least one seed"));
        }
        self.check.oracle.validate()?;
        if self.check.cases == 0 {
            return Err(Error::config("check.cases", "must be positive"));
        }
        let mut config = self.clone();
        config.source = pinned(&source);
        config.target = pinned(&target);
        Ok(Resolved { config, source, target, spec })
    }
}
