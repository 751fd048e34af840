//! Multiscale flows, the latent transfer network and the two-stream
//! conditional model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{squeezed_shape, ChartField, Field};
use crate::geometry::{diag_gaussian_logpdf, standard_gaussian_logpdf, ManifoldGaussian, ManifoldKind, TOL};
use crate::layers::{ActnormParams, Conv1x1Params, CouplingMode, CouplingParams, Layer, LayerCtx};
use crate::nn::{Activation, NetworkParams};
use crate::scalar::Scalar;

/// Any log-density or log-det term beyond this magnitude aborts the step.
pub const NUMERICAL_FLOOR: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub squeeze: bool,
    pub blocks: usize,
    pub split: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSpec {
    pub levels: Vec<LevelSpec>,
    /// Hidden widths of the coupling networks.
    pub hidden: Vec<usize>,
    pub coupling: CouplingMode,
    pub scale_clamp: f64,
    pub actnorm_per_location: bool,
    /// Standard deviation of the initial 1×1 convolution generators.
    pub conv_init: f64,
}

impl Default for FlowSpec {
    fn default() -> Self {
        FlowSpec {
            levels: vec![
                LevelSpec { squeeze: true, blocks: 2, split: true },
                LevelSpec { squeeze: true, blocks: 2, split: true },
                LevelSpec { squeeze: true, blocks: 2, split: false },
            ],
            hidden: vec![64, 64],
            coupling: CouplingMode::Channel,
            scale_clamp: 2.0,
            actnorm_per_location: false,
            conv_init: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level<T> {
    pub squeeze: bool,
    pub split: bool,
    /// Grid before the optional squeeze.
    pub input_grid: Vec<usize>,
    pub layers: Vec<Layer<T>>,
}

/// Latent chart coordinates of one sample, one entry per emitted scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents<T> {
    pub scales: Vec<ChartField<T>>,
    pub logdet: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<T> {
    pub ctx: LayerCtx,
    pub spec: FlowSpec,
    pub grid: Vec<usize>,
    pub channels: usize,
    pub levels: Vec<Level<T>>,
}

fn floor_check<T: Scalar>(what: &str, v: T) -> Result<T> {
    if !v.is_finite() || v.value().abs() > NUMERICAL_FLOOR {
        return Err(Error::NumericalAbort(format!("{what} is {:e}", v.value())));
    }
    Ok(v)
}

impl FlowModel<f64> {
    /// A freshly initialized flow: identity actnorm and couplings, random
    /// 1×1 rotations.
    pub fn new(manifold: ManifoldKind, grid: &[usize], channels: usize, spec: FlowSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = LayerCtx::new(manifold);
        ctx.scale_clamp = spec.scale_clamp;
        if !(spec.scale_clamp > 0.0) {
            return Err(Error::config("scale_clamp", "must be positive"));
        }
        let mut g = grid.to_vec();
        let mut c = channels;
        let mut levels = Vec::with_capacity(spec.levels.len());
        let mut block = 0;
        for lv in &spec.levels {
            let input_grid = g.clone();
            if lv.squeeze {
                let (ng, nc) = squeezed_shape(&g, c)?;
                g = ng;
                c = nc;
            }
            let locs: usize = g.iter().product();
            let mut layers = Vec::new();
            for _ in 0..lv.blocks {
                layers.push(Layer::Actnorm(ActnormParams::identity(&ctx, locs, c, spec.actnorm_per_location)));
                let mut conv = Conv1x1Params::identity(c);
                for p in &mut conv.generator {
                    *p = spec.conv_init * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng);
                }
                layers.push(Layer::Conv1x1(conv));
                let coupled = match spec.coupling {
                    CouplingMode::Channel => c >= 2,
                    CouplingMode::Slices { .. } => true,
                };
                if coupled {
                    layers.push(Layer::Coupling(CouplingParams::new(&ctx, &g, c, spec.coupling, block % 2 == 1, &spec.hidden, &mut rng)?));
                }
                block += 1;
            }
            if lv.split {
                if c % 2 != 0 {
                    return Err(Error::OddChannels(c));
                }
                c /= 2;
            }
            levels.push(Level { squeeze: lv.squeeze, split: lv.split, input_grid, layers });
        }
        Ok(FlowModel { ctx, spec, grid: grid.to_vec(), channels, levels })
    }

    /// Data-dependent actnorm initialization, layer by layer.
    pub fn init_actnorm(&mut self, batch: &[ChartField<f64>]) -> Result<()> {
        let mut acts: Vec<ChartField<f64>> = batch.to_vec();
        let ctx = self.ctx.clone();
        let per_location = self.spec.actnorm_per_location;
        let mut index = 0;
        for level in &mut self.levels {
            if level.squeeze {
                acts = acts.iter().map(|a| a.squeeze()).collect::<Result<_>>()?;
            }
            for layer in &mut level.layers {
                if let Layer::Actnorm(p) = layer {
                    *p = ActnormParams::init(&ctx, &acts, per_location).map_err(|e| e.at_layer(index))?;
                }
                acts = acts
                    .iter()
                    .map(|a| layer.forward(&ctx, a).map(|r| r.0))
                    .collect::<Result<_>>()
                    .map_err(|e| e.at_layer(index))?;
                index += 1;
            }
            if level.split {
                acts = acts.iter().map(|a| a.split().map(|s| s.0)).collect::<Result<_>>()?;
            }
        }
        Ok(())
    }

    /// Clamps actnorm scales into their admissible range.
    pub fn project(&mut self) {
        for level in &mut self.levels {
            for layer in &mut level.layers {
                if let Layer::Actnorm(p) = layer {
                    p.project();
                }
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_param(&mut |p| out.push(*p));
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!("{} parameters for a model with {}", values.len(), self.param_count())));
        }
        let mut it = values.iter();
        self.for_each_param_mut(&mut |p| *p = *it.next().unwrap());
        Ok(())
    }
}

impl<T> FlowModel<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> FlowModel<U> {
        FlowModel {
            ctx: self.ctx.clone(),
            spec: self.spec.clone(),
            grid: self.grid.clone(),
            channels: self.channels,
            levels: self
                .levels
                .iter()
                .map(|l| Level {
                    squeeze: l.squeeze,
                    split: l.split,
                    input_grid: l.input_grid.clone(),
                    layers: l.layers.iter().map(|x| x.map(&mut *f)).collect(),
                })
                .collect(),
        }
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&T)) {
        for l in &self.levels {
            for x in &l.layers {
                x.for_each_param(f);
            }
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for l in &mut self.levels {
            for x in &mut l.layers {
                x.for_each_param_mut(f);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_| n += 1);
        n
    }

    pub fn coupling_param_count(&self) -> usize {
        self.layers().filter(|l| matches!(l, Layer::Coupling(_))).map(|l| l.param_count()).sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.levels.iter().flat_map(|l| l.layers.iter())
    }

    pub fn manifold(&self) -> &ManifoldKind {
        &self.ctx.manifold
    }

    /// Shapes `(grid, channels)` of the emitted latents, in emission order.
    pub fn latent_shapes(&self) -> Vec<(Vec<usize>, usize)> {
        let mut g = self.grid.clone();
        let mut c = self.channels;
        let mut out = Vec::new();
        for lv in &self.levels {
            if lv.squeeze {
                let (ng, nc) = squeezed_shape(&g, c).expect("validated at construction");
                g = ng;
                c = nc;
            }
            if lv.split {
                c /= 2;
                out.push((g.clone(), c));
            }
        }
        out.push((g, c));
        out
    }

    /// Total number of latent chart coordinates.
    pub fn latent_dim(&self) -> usize {
        let m = self.ctx.manifold.dim();
        self.latent_shapes().iter().map(|(g, c)| g.iter().product::<usize>() * c * m).sum()
    }
}

impl<T: Scalar> FlowModel<T> {
    fn check_input(&self, v: &ChartField<T>) -> Result<()> {
        if v.grid != self.grid || v.channels != self.channels || v.dim != self.ctx.manifold.dim() {
            return Err(Error::Shape(format!(
                "input of grid {:?} × {} channels × {} coords for a flow over {:?} × {} × {}",
                v.grid,
                v.channels,
                v.dim,
                self.grid,
                self.channels,
                self.ctx.manifold.dim()
            )));
        }
        Ok(())
    }

    /// Runs the flow on chart coordinates.
    pub fn forward_chart(&self, v: &ChartField<T>) -> Result<Latents<T>> {
        self.check_input(v)?;
        let mut h = v.clone();
        let mut logdet = T::zero();
        let mut scales = Vec::new();
        let mut index = 0;
        for level in &self.levels {
            if level.squeeze {
                h = h.squeeze()?;
            }
            for layer in &level.layers {
                let (y, ld) = layer.forward(&self.ctx, &h).map_err(|e| e.at_layer(index))?;
                h = y;
                logdet += ld;
                index += 1;
            }
            if level.split {
                let (kept, emitted) = h.split()?;
                scales.push(emitted);
                h = kept;
            }
        }
        scales.push(h);
        Ok(Latents { scales, logdet })
    }

    /// Inverts the flow; the log-det is that of the forward map at the
    /// reconstructed input.
    pub fn inverse_chart(&self, latents: &[ChartField<T>]) -> Result<(ChartField<T>, T)> {
        let emitted = self.levels.iter().filter(|l| l.split).count();
        if latents.len() != emitted + 1 {
            return Err(Error::Shape(format!("{} latent scales for a flow emitting {}", latents.len(), emitted + 1)));
        }
        let shapes = self.latent_shapes();
        for (z, (g, c)) in latents.iter().zip(&shapes) {
            if &z.grid != g || z.channels != *c || z.dim != self.ctx.manifold.dim() {
                return Err(Error::Shape(format!("latent of grid {:?} × {} does not match {:?} × {}", z.grid, z.channels, g, c)));
            }
        }
        let mut h = latents[emitted].clone();
        let mut next = emitted;
        let mut logdet = T::zero();
        let mut index: usize = self.levels.iter().map(|l| l.layers.len()).sum();
        for level in self.levels.iter().rev() {
            if level.split {
                next -= 1;
                h = ChartField::merge(&h, &latents[next])?;
            }
            for layer in level.layers.iter().rev() {
                index -= 1;
                let (x, ld) = layer.inverse(&self.ctx, &h).map_err(|e| e.at_layer(index))?;
                h = x;
                logdet += ld;
            }
            if level.squeeze {
                h = h.unsqueeze(&level.input_grid)?;
            }
        }
        Ok((h, logdet))
    }

    /// `−[Σ log N(z; 0, I) + log|det|]`.
    pub fn nll_chart(&self, v: &ChartField<T>) -> Result<T> {
        let lat = self.forward_chart(v)?;
        let lp: T = lat.scales.iter().map(|z| standard_gaussian_logpdf(&z.coords)).sum();
        Ok(-(floor_check("latent log-density", lp)? + floor_check("log-determinant", lat.logdet)?))
    }
}

impl FlowModel<f64> {
    pub fn forward(&self, x: &Field) -> Result<Latents<f64>> {
        self.forward_chart(&x.to_chart()?)
    }

    pub fn inverse(&self, latents: &[ChartField<f64>]) -> Result<Field> {
        let (v, _) = self.inverse_chart(latents)?;
        Field::from_chart(&self.ctx.manifold, &v)
    }

    pub fn nll(&self, x: &Field) -> Result<f64> {
        self.nll_chart(&x.to_chart()?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferScope {
    /// One network over all flattened source latents.
    Global,
    /// One network applied per location; all latents must share a grid.
    PerLocation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSpec {
    pub hidden: usize,
    pub blocks: usize,
    pub scope: TransferScope,
    /// Upper bound of the predicted log-variances.
    pub max_logvar: f64,
}

impl Default for TransferSpec {
    fn default() -> Self {
        TransferSpec { hidden: 64, blocks: 3, scope: TransferScope::Global, max_logvar: 4f64.ln() }
    }
}

/// Residual network producing the target-latent Gaussian from source latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTransfer<T> {
    pub spec: TransferSpec,
    pub input: NetworkParams<T>,
    pub blocks: Vec<NetworkParams<T>>,
    /// Zero-initialized; emits means followed by raw log-variances.
    pub head: NetworkParams<T>,
    source_shapes: Vec<(Vec<usize>, usize)>,
    target_shapes: Vec<(Vec<usize>, usize)>,
    source_dim: usize,
    target_dim: usize,
}

/// Lower bound of the predicted log-variances, `ln 1e-8`.
pub const LOGVAR_FLOOR: f64 = -18.420_680_743_952_367;

/// Smooth squash into `(LOGVAR_FLOOR, hi)` with unit slope at 0.
fn squash_logvar<T: Scalar>(raw: T, hi: f64) -> T {
    let b = if raw.value() <= 0.0 { -LOGVAR_FLOOR } else { hi };
    let b = T::c(b);
    b * (raw / b).tanh()
}

/// Per-entry diagonal Gaussians over target latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian<T> {
    pub mean: Vec<ChartField<T>>,
    pub logvar: Vec<ChartField<T>>,
}

impl LatentTransfer<f64> {
    pub fn new<S, U>(spec: TransferSpec, source: &FlowModel<S>, target: &FlowModel<U>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source_shapes = source.latent_shapes();
        let target_shapes = target.latent_shapes();
        let (sd, td) = (source.ctx.manifold.dim(), target.ctx.manifold.dim());
        let (in_w, out_w) = match spec.scope {
            TransferScope::Global => (source.latent_dim(), target.latent_dim()),
            TransferScope::PerLocation => {
                let g = &source_shapes[0].0;
                if source_shapes.iter().chain(&target_shapes).any(|(sg, _)| sg != g) {
                    return Err(Error::config(
                        "transfer.scope",
                        "per_location transfer needs every source and target latent on one grid",
                    ));
                }
                (
                    source_shapes.iter().map(|(_, c)| c * sd).sum(),
                    target_shapes.iter().map(|(_, c)| c * td).sum(),
                )
            }
        };
        if spec.hidden == 0 {
            return Err(Error::config("transfer.hidden", "must be positive"));
        }
        if !(spec.max_logvar > 0.0 && spec.max_logvar <= -LOGVAR_FLOOR) {
            return Err(Error::config("transfer.max_logvar", "must lie in (0, ln 1e8]"));
        }
        let mut input = NetworkParams::mlp(&[in_w, spec.hidden], Activation::Tanh, false, &mut rng);
        input.layers[0].activation = Activation::Tanh;
        let blocks = (0..spec.blocks)
            .map(|_| {
                let mut b = NetworkParams::mlp(&[spec.hidden, spec.hidden, spec.hidden], Activation::Tanh, false, &mut rng);
                // residual branches start small so the stack is near identity
                b.layers[1].weight = b.layers[1].weight.scale(0.1);
                b
            })
            .collect();
        let head = NetworkParams::mlp(&[spec.hidden, 2 * out_w], Activation::Tanh, true, &mut rng);
        Ok(LatentTransfer { spec, input, blocks, head, source_shapes, target_shapes, source_dim: sd, target_dim: td })
    }
}

impl<T> LatentTransfer<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> LatentTransfer<U> {
        LatentTransfer {
            spec: self.spec.clone(),
            input: self.input.map(&mut *f),
            blocks: self.blocks.iter().map(|b| b.map(&mut *f)).collect(),
            head: self.head.map(&mut *f),
            source_shapes: self.source_shapes.clone(),
            target_shapes: self.target_shapes.clone(),
            source_dim: self.source_dim,
            target_dim: self.target_dim,
        }
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&T)) {
        self.input.for_each_param(f);
        self.blocks.iter().for_each(|b| b.for_each_param(f));
        self.head.for_each_param(f);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.input.for_each_param_mut(f);
        self.blocks.iter_mut().for_each(|b| b.for_each_param_mut(f));
        self.head.for_each_param_mut(f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_| n += 1);
        n
    }
}

impl<T: Scalar> LatentTransfer<T> {
    fn rows(&self) -> usize {
        match self.spec.scope {
            TransferScope::Global => 1,
            TransferScope::PerLocation => self.source_shapes[0].0.iter().product(),
        }
    }

    /// The target-latent Gaussian implied by source latents `z_src`.
    pub fn apply(&self, z_src: &[ChartField<T>]) -> Result<LatentGaussian<T>> {
        if z_src.len() != self.source_shapes.len()
            || z_src.iter().zip(&self.source_shapes).any(|(z, (g, c))| &z.grid != g || z.channels != *c || z.dim != self.source_dim)
        {
            return Err(Error::Shape("source latents do not match the transfer network".into()));
        }
        let rows = self.rows();
        let mut x = Vec::new();
        match self.spec.scope {
            TransferScope::Global => z_src.iter().for_each(|z| x.extend_from_slice(&z.coords)),
            TransferScope::PerLocation => {
                for l in 0..rows {
                    z_src.iter().for_each(|z| x.extend_from_slice(z.location(l)));
                }
            }
        }
        let mut h = T::dense_network(&self.input, &x, rows)?;
        for b in &self.blocks {
            let r = T::dense_network(b, &h, rows)?;
            h.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        let out = T::dense_network(&self.head, &h, rows)?;
        let out_w = out.len() / rows;
        let half = out_w / 2;
        let hi = self.spec.max_logvar;
        let mut mean: Vec<ChartField<T>> = self.target_shapes.iter().map(|(g, c)| ChartField::zeros(g.clone(), *c, self.target_dim)).collect();
        let mut logvar = mean.clone();
        match self.spec.scope {
            TransferScope::Global => {
                let mut k = 0;
                for (mz, lz) in mean.iter_mut().zip(&mut logvar) {
                    let n = mz.coords.len();
                    mz.coords.copy_from_slice(&out[k..k + n]);
                    for (dst, &raw) in lz.coords.iter_mut().zip(&out[half + k..half + k + n]) {
                        *dst = squash_logvar(raw, hi);
                    }
                    k += n;
                }
            }
            TransferScope::PerLocation => {
                for l in 0..rows {
                    let row = &out[l * out_w..(l + 1) * out_w];
                    let mut k = 0;
                    for (mz, lz) in mean.iter_mut().zip(&mut logvar) {
                        let w = mz.channels * mz.dim;
                        mz.coords[l * w..(l + 1) * w].copy_from_slice(&row[k..k + w]);
                        for (dst, &raw) in lz.coords[l * w..(l + 1) * w].iter_mut().zip(&row[half + k..half + k + w]) {
                            *dst = squash_logvar(raw, hi);
                        }
                        k += w;
                    }
                }
            }
        }
        Ok(LatentGaussian { mean, logvar })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamWeights {
    pub source: f64,
    pub target: f64,
}

impl Default for StreamWeights {
    fn default() -> Self {
        StreamWeights { source: 1.0, target: 1.0 }
    }
}

/// Source flow on N, target flow on M, and the transfer between their latents.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalModel<T> {
    pub source: FlowModel<T>,
    pub target: FlowModel<T>,
    pub transfer: LatentTransfer<T>,
    pub weights: StreamWeights,
    /// Stops conditional-term gradients from reaching the source flow.
    pub detach_source: bool,
}

impl<T> ConditionalModel<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ConditionalModel<U> {
        ConditionalModel {
            source: self.source.map(&mut *f),
            target: self.target.map(&mut *f),
            transfer: self.transfer.map(&mut *f),
            weights: self.weights,
            detach_source: self.detach_source,
        }
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&T)) {
        self.source.for_each_param(f);
        self.target.for_each_param(f);
        self.transfer.for_each_param(f);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.source.for_each_param_mut(f);
        self.target.for_each_param_mut(f);
        self.transfer.for_each_param_mut(f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_| n += 1);
        n
    }
}

impl ConditionalModel<f64> {
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_param(&mut |p| out.push(*p));
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!("{} parameters for a model with {}", values.len(), self.param_count())));
        }
        let mut it = values.iter();
        self.for_each_param_mut(&mut |p| *p = *it.next().unwrap());
        Ok(())
    }

    pub fn project(&mut self) {
        self.source.project();
        self.target.project();
    }

    /// Generates a target field conditioned on `y`. Temperature 0 follows the
    /// conditional mean.
    pub fn generate(&self, y: &Field, temperature: f64, seed: u64) -> Result<Field> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::config("temperature", "must be finite and nonnegative"));
        }
        let zy = self.source.forward(y)?;
        let gauss = self.transfer.apply(&zy.scales)?;
        let manifold = self.target.ctx.manifold.clone();
        let m = manifold.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if temperature == 0.0 {
            return self.target.inverse(&gauss.mean);
        }
        let t2 = temperature * temperature;
        let per_entry: Vec<Vec<ManifoldGaussian>> = gauss
            .mean
            .iter()
            .zip(&gauss.logvar)
            .map(|(z, lv)| {
                z.coords
                    .chunks_exact(m)
                    .zip(lv.coords.chunks_exact(m))
                    .map(|(mu, l)| {
                        let var: Vec<f64> = l.iter().map(|&l| t2 * l.exp()).collect();
                        ManifoldGaussian::diagonal(manifold.clone(), mu.to_vec(), &var)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        // whole draws whose inverse leaves a chart domain are redrawn
        for _ in 0..TOL.max_rejections {
            let mut latents = gauss.mean.clone();
            for (z, gs) in latents.iter_mut().zip(&per_entry) {
                for (dst, g) in z.coords.chunks_exact_mut(m).zip(gs) {
                    dst.copy_from_slice(&g.sample_chart(&mut rng)?);
                }
            }
            match self.target.inverse(&latents) {
                Err(Error::ChartDomain { .. }) => continue,
                other => return other,
            }
        }
        Err(Error::RejectionExhausted(TOL.max_rejections))
    }
}

impl<T: Scalar> ConditionalModel<T> {
    /// `w_s · nll_source(y) + w_t · nll_target(x | y)`.
    pub fn conditional_nll_chart(&self, x: &ChartField<T>, y: &ChartField<T>) -> Result<T> {
        let zy = self.source.forward_chart(y)?;
        let lp_y: T = zy.scales.iter().map(|z| standard_gaussian_logpdf(&z.coords)).sum();
        let nll_y = -(floor_check("source latent log-density", lp_y)? + floor_check("source log-determinant", zy.logdet)?);
        let cond: Vec<ChartField<T>> = if self.detach_source {
            zy.scales
                .iter()
                .map(|z| ChartField { grid: z.grid.clone(), channels: z.channels, dim: z.dim, coords: z.coords.iter().map(|v| T::c(v.value())).collect() })
                .collect()
        } else {
            zy.scales
        };
        let gauss = self.transfer.apply(&cond)?;
        let zx = self.target.forward_chart(x)?;
        let mut lp_x = T::zero();
        for ((z, mu), lv) in zx.scales.iter().zip(&gauss.mean).zip(&gauss.logvar) {
            lp_x += diag_gaussian_logpdf(&z.coords, &mu.coords, &lv.coords);
        }
        let nll_x = -(floor_check("target latent log-density", lp_x)? + floor_check("target log-determinant", zx.logdet)?);
        Ok(nll_y * T::c(self.weights.source) + nll_x * T::c(self.weights.target))
    }
}

/// Rebuilds `model`'s architecture with `tau` slice couplings sharing one
/// network.
pub fn nanoflow_share(model: &FlowModel<f64>, tau: usize, seed: u64) -> Result<FlowModel<f64>> {
    let mut spec = model.spec.clone();
    spec.coupling = CouplingMode::Slices { tau, shared: true };
    FlowModel::new(model.ctx.manifold.clone(), &model.grid, model.channels, spec, seed)
}

/// One stream's manifold, grid and architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub manifold: ManifoldKind,
    pub grid: Vec<usize>,
    pub channels: usize,
    pub flow: FlowSpec,
}

/// Everything needed to rebuild a conditional model's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalSpec {
    pub source: StreamSpec,
    pub target: StreamSpec,
    pub transfer: TransferSpec,
    pub weights: StreamWeights,
    pub detach_source: bool,
}

impl ConditionalSpec {
    pub fn build(&self, seed: u64) -> Result<ConditionalModel<f64>> {
        if self.source.grid != self.target.grid {
            return Err(Error::config("target.grid", "source and target streams must share a grid"));
        }
        let source = FlowModel::new(self.source.manifold.clone(), &self.source.grid, self.source.channels, self.source.flow.clone(), seed)?;
        let target = FlowModel::new(
            self.target.manifold.clone(),
            &self.target.grid,
            self.target.channels,
            self.target.flow.clone(),
            seed.wrapping_add(1),
        )?;
        let transfer = LatentTransfer::new(self.transfer.clone(), &source, &target, seed.wrapping_add(2))?;
        Ok(ConditionalModel { source, target, transfer, weights: self.weights, detach_source: self.detach_source })
    }
}
