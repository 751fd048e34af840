//! Invertible layers acting on chart coordinates.
//!
//! Every layer maps a [`ChartField`] to a [`ChartField`] of the same shape and
//! reports the exact log-determinant of that map. Points are only touched
//! through the chart, so a layer's action on the manifold is
//! `Φ⁻¹ ∘ layer ∘ Φ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ChartField;
use crate::geometry::{ChartKind, GroupElement, ManifoldKind};
use crate::linalg::{self, Mat};
use crate::nn::{Activation, NetworkParams};
use crate::scalar::Scalar;

pub const MIN_LOG_SCALE: f64 = -13.815_510_557_964_274; // ln 1e-6
pub const MAX_LOG_SCALE: f64 = 13.815_510_557_964_274;

/// How a coupling layer partitions its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum CouplingMode {
    /// Split along channels: the first half conditions the second.
    Channel,
    /// Split the leading spatial axis into `2τ` slices; slice pairs couple,
    /// with one network per pair or one shared by all pairs.
    Slices { tau: usize, shared: bool },
}

/// Settings shared by every layer of a flow.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCtx {
    pub manifold: ManifoldKind,
    /// Coupling log-scales are squashed to `(−clamp, clamp)`.
    pub scale_clamp: f64,
    /// Fault injection: the forward map ignores the clamp while the log-det
    /// still uses it.
    pub unclamped_forward: bool,
}

impl LayerCtx {
    pub fn new(manifold: ManifoldKind) -> Self {
        LayerCtx { manifold, scale_clamp: 2.0, unclamped_forward: false }
    }

    fn check<T: Scalar>(&self, v: &[T]) -> Result<()> {
        self.manifold.check_chart_domain(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActnormParams<T> {
    /// `units × m` log-scales, `units` being channels (shared) or
    /// locations × channels.
    pub log_scale: Vec<T>,
    /// `units × group_dim` raw group parameters.
    pub shift: Vec<T>,
    pub per_location: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1x1Params<T> {
    pub channels: usize,
    /// Strictly-upper entries of the skew-symmetric generator.
    pub generator: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingParams<T> {
    pub mode: CouplingMode,
    /// Conditioner slices are the odd ones instead of the even ones.
    pub flip: bool,
    pub nets: Vec<NetworkParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Actnorm(ActnormParams<T>),
    Conv1x1(Conv1x1Params<T>),
    Coupling(CouplingParams<T>),
}

impl<T: Scalar> ActnormParams<T> {
    pub fn identity(ctx: &LayerCtx, locations: usize, channels: usize, per_location: bool) -> Self {
        let units = if per_location { locations * channels } else { channels };
        ActnormParams {
            log_scale: vec![T::zero(); units * ctx.manifold.dim()],
            shift: vec![T::zero(); units * ctx.manifold.group_dim()],
            per_location,
        }
    }

    fn unit(&self, channels: usize, location: usize, channel: usize) -> usize {
        if self.per_location {
            location * channels + channel
        } else {
            channel
        }
    }

    fn units(&self, m: usize) -> usize {
        self.log_scale.len() / m.max(1)
    }

    fn check_shape(&self, ctx: &LayerCtx, v: &ChartField<T>) -> Result<()> {
        let m = ctx.manifold.dim();
        let units = if self.per_location { v.len() } else { v.channels };
        if self.log_scale.len() != units * m || self.shift.len() != units * ctx.manifold.group_dim() {
            return Err(Error::Shape(format!("actnorm parameters for {} units do not fit the field", self.units(m))));
        }
        Ok(())
    }

    fn elements(&self, ctx: &LayerCtx, inverse: bool) -> Result<Vec<GroupElement<T>>> {
        let gd = ctx.manifold.group_dim();
        let m = ctx.manifold.dim();
        (0..self.units(m))
            .map(|u| {
                let g = ctx.manifold.group_from_params(&self.shift[u * gd..(u + 1) * gd])?;
                let g = materialize(g)?;
                Ok(if inverse { g.inverse() } else { g })
            })
            .collect()
    }

    pub fn forward(&self, ctx: &LayerCtx, v: &ChartField<T>) -> Result<(ChartField<T>, T)> {
        self.check_shape(ctx, v)?;
        let m = ctx.manifold.dim();
        let gs = self.elements(ctx, false)?;
        let scales: Vec<T> = self.log_scale.iter().map(|l| l.exp()).collect();
        let mut out = v.clone();
        let mut ld = T::zero();
        for loc in 0..v.locations() {
            for ch in 0..v.channels {
                let u = self.unit(v.channels, loc, ch);
                let w: Vec<T> = v.entry(loc, ch).iter().zip(&scales[u * m..(u + 1) * m]).map(|(&a, &s)| a * s).collect();
                ctx.check(&w)?;
                let (y, l) = ctx.manifold.chart_act(&gs[u], &w)?;
                ctx.check(&y)?;
                out.entry_mut(loc, ch).copy_from_slice(&y);
                ld += l;
            }
        }
        let total: T = self.log_scale.iter().copied().sum();
        let reps = if self.per_location { 1 } else { v.locations() };
        Ok((out, ld + total * T::c(reps as f64)))
    }

    pub fn inverse(&self, ctx: &LayerCtx, y: &ChartField<T>) -> Result<(ChartField<T>, T)> {
        self.check_shape(ctx, y)?;
        let m = ctx.manifold.dim();
        let ginv = self.elements(ctx, true)?;
        let inv_scales: Vec<T> = self.log_scale.iter().map(|l| (-*l).exp()).collect();
        let mut out = y.clone();
        let mut ld = T::zero();
        for loc in 0..y.locations() {
            for ch in 0..y.channels {
                let u = self.unit(y.channels, loc, ch);
                let (w, l) = ctx.manifold.chart_act(&ginv[u], y.entry(loc, ch))?;
                ctx.check(&w)?;
                let x: Vec<T> = w.iter().zip(&inv_scales[u * m..(u + 1) * m]).map(|(&a, &s)| a * s).collect();
                ctx.check(&x)?;
                out.entry_mut(loc, ch).copy_from_slice(&x);
                ld -= l;
            }
        }
        let total: T = self.log_scale.iter().copied().sum();
        let reps = if self.per_location { 1 } else { y.locations() };
        Ok((out, ld + total * T::c(reps as f64)))
    }
}

impl ActnormParams<f64> {
    /// Data-dependent initialization from a batch of chart fields.
    ///
    /// On the positive reals the output has zero mean and unit variance per
    /// coordinate. Rotations cannot cancel a mean, so on the other manifolds
    /// the scale normalizes the root-mean-square and the shift is the
    /// identity; pole-log scales are further capped so that no initialized
    /// coordinate vector exceeds norm π/4.
    pub fn init(ctx: &LayerCtx, batch: &[ChartField<f64>], per_location: bool) -> Result<Self> {
        let first = batch.first().ok_or_else(|| Error::Shape("actnorm init needs a nonempty batch".into()))?;
        let m = ctx.manifold.dim();
        let (locs, channels) = (first.locations(), first.channels);
        if batch.iter().any(|f| f.grid != first.grid || f.channels != channels || f.dim != m) {
            return Err(Error::Shape("actnorm init batch has mixed shapes".into()));
        }
        let mut p = ActnormParams::<f64>::identity(ctx, locs, channels, per_location);
        let units = p.units(m);
        let mut sum = vec![0.0; units * m];
        let mut sq = vec![0.0; units * m];
        let mut count = vec![0usize; units];
        for f in batch {
            for loc in 0..locs {
                for ch in 0..channels {
                    let u = p.unit(channels, loc, ch);
                    count[u] += 1;
                    for (i, &x) in f.entry(loc, ch).iter().enumerate() {
                        sum[u * m + i] += x;
                        sq[u * m + i] += x * x;
                    }
                }
            }
        }
        let scalar = ctx.manifold.chart() == ChartKind::ScalarLog;
        for u in 0..units {
            let n = count[u] as f64;
            for i in 0..m {
                let k = u * m + i;
                let mean = sum[k] / n;
                let var = (sq[k] / n - mean * mean).max(0.0);
                let std = var.sqrt();
                if std < 1e-8 {
                    return Err(Error::DegenerateBatch { coord: k, std });
                }
                if scalar {
                    p.log_scale[k] = -std.ln();
                    p.shift[u] = -mean / std;
                } else {
                    p.log_scale[k] = -(sq[k] / n).sqrt().ln();
                }
            }
        }
        if ctx.manifold.chart() == ChartKind::PoleLog {
            let cap = std::f64::consts::FRAC_PI_4;
            let mut worst = vec![0.0f64; units];
            for f in batch {
                for loc in 0..locs {
                    for ch in 0..channels {
                        let u = p.unit(channels, loc, ch);
                        let r = f
                            .entry(loc, ch)
                            .iter()
                            .zip(&p.log_scale[u * m..(u + 1) * m])
                            .map(|(x, l)| (x * l.exp()).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        worst[u] = worst[u].max(r);
                    }
                }
            }
            for u in 0..units {
                if worst[u] > cap {
                    let d = (worst[u] / cap).ln();
                    p.log_scale[u * m..(u + 1) * m].iter_mut().for_each(|l| *l -= d);
                }
            }
        }
        p.project();
        Ok(p)
    }

    /// Keeps every scale inside `[1e-6, 1e6]`.
    pub fn project(&mut self) {
        for l in &mut self.log_scale {
            *l = l.clamp(MIN_LOG_SCALE, MAX_LOG_SCALE);
        }
    }
}

fn materialize<T: Scalar>(g: GroupElement<T>) -> Result<GroupElement<T>> {
    Ok(match g {
        GroupElement::Cayley(_) => GroupElement::Rotation(g.matrix()?),
        other => other,
    })
}

impl<T: Scalar> Conv1x1Params<T> {
    pub fn identity(channels: usize) -> Self {
        Conv1x1Params { channels, generator: vec![T::zero(); linalg::skew_dim(channels)] }
    }

    pub fn rotation(&self) -> Result<Mat<T>> {
        if self.channels <= 1 {
            return Ok(Mat::identity(self.channels));
        }
        linalg::cayley(&linalg::skew_from_params(self.channels, &self.generator))
    }

    fn apply(&self, ctx: &LayerCtx, v: &ChartField<T>, r: &Mat<T>) -> Result<ChartField<T>> {
        if v.channels != self.channels {
            return Err(Error::Shape(format!("1x1 convolution over {} channels applied to {}", self.channels, v.channels)));
        }
        let (c, m) = (v.channels, v.dim);
        let mut out = v.clone();
        let mut col = vec![T::zero(); c];
        for loc in 0..v.locations() {
            let src = v.location(loc);
            for i in 0..m {
                for ch in 0..c {
                    col[ch] = src[ch * m + i];
                }
                let rc = r.matvec(&col);
                for ch in 0..c {
                    out.entry_mut(loc, ch)[i] = rc[ch];
                }
            }
            for ch in 0..c {
                ctx.check(out.entry(loc, ch))?;
            }
        }
        Ok(out)
    }

    /// The log-determinant `locations · m · log|det R|` vanishes for rotations.
    pub fn forward(&self, ctx: &LayerCtx, v: &ChartField<T>) -> Result<(ChartField<T>, T)> {
        if self.channels <= 1 {
            return Ok((v.clone(), T::zero()));
        }
        Ok((self.apply(ctx, v, &self.rotation()?)?, T::zero()))
    }

    pub fn inverse(&self, ctx: &LayerCtx, y: &ChartField<T>) -> Result<(ChartField<T>, T)> {
        if self.channels <= 1 {
            return Ok((y.clone(), T::zero()));
        }
        Ok((self.apply(ctx, y, &self.rotation()?.transpose())?, T::zero()))
    }
}

/// Partition of a coupling layer's entries: rows fed to the network and the
/// entries they transform.
struct CouplingPlan {
    /// Per network: conditioner (location, channel-range) rows and matching
    /// transformed rows.
    groups: Vec<CouplingGroup>,
}

struct CouplingGroup {
    net: usize,
    cond_locs: Vec<usize>,
    out_locs: Vec<usize>,
}

impl CouplingParams<f64> {
    pub fn new(
        ctx: &LayerCtx,
        grid: &[usize],
        channels: usize,
        mode: CouplingMode,
        flip: bool,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let m = ctx.manifold.dim();
        let out_per = m + ctx.manifold.group_dim();
        let (input, output, count) = match mode {
            CouplingMode::Channel => {
                if channels < 2 {
                    return Err(Error::Shape("channel coupling needs at least 2 channels".into()));
                }
                let ca = channels / 2;
                (ca * m, (channels - ca) * out_per, 1)
            }
            CouplingMode::Slices { tau, shared } => {
                slice_thickness(grid, tau)?;
                (channels * m, channels * out_per, if shared { 1 } else { tau })
            }
        };
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let nets = (0..count).map(|_| NetworkParams::mlp(&widths, Activation::Tanh, true, rng)).collect();
        Ok(CouplingParams { mode, flip, nets })
    }
}

fn slice_thickness(grid: &[usize], tau: usize) -> Result<usize> {
    if tau == 0 || grid[0] % (2 * tau) != 0 {
        return Err(Error::Divisibility { extent: grid[0], divisor: 2 * tau.max(1) });
    }
    Ok(grid[0] / (2 * tau))
}

impl<T: Scalar> CouplingParams<T> {
    fn plan(&self, v: &ChartField<T>) -> Result<CouplingPlan> {
        match self.mode {
            CouplingMode::Channel => {
                let all: Vec<usize> = (0..v.locations()).collect();
                Ok(CouplingPlan { groups: vec![CouplingGroup { net: 0, cond_locs: all.clone(), out_locs: all }] })
            }
            CouplingMode::Slices { tau, shared } => {
                let t = slice_thickness(&v.grid, tau)?;
                let per_slice = t * v.grid[1..].iter().product::<usize>();
                let mut groups: Vec<CouplingGroup> = Vec::new();
                for k in 0..tau {
                    let (a, b) = if self.flip { (2 * k + 1, 2 * k) } else { (2 * k, 2 * k + 1) };
                    let cond: Vec<usize> = (a * per_slice..(a + 1) * per_slice).collect();
                    let out: Vec<usize> = (b * per_slice..(b + 1) * per_slice).collect();
                    let net = if shared { 0 } else { k };
                    match groups.iter_mut().find(|g| g.net == net) {
                        Some(g) => {
                            g.cond_locs.extend(cond);
                            g.out_locs.extend(out);
                        }
                        None => groups.push(CouplingGroup { net, cond_locs: cond, out_locs: out }),
                    }
                }
                Ok(CouplingPlan { groups })
            }
        }
    }

    /// Conditioner channel range and transformed channel range.
    fn channel_split(&self, channels: usize) -> ((usize, usize), (usize, usize)) {
        match self.mode {
            CouplingMode::Channel => {
                let ca = channels / 2;
                ((0, ca), (ca, channels))
            }
            CouplingMode::Slices { .. } => ((0, channels), (0, channels)),
        }
    }

    /// Raw network outputs for each transformed location of each group.
    fn conditioner(&self, v: &ChartField<T>, plan: &CouplingPlan) -> Result<Vec<Vec<T>>> {
        let ((c0, c1), _) = self.channel_split(v.channels);
        let m = v.dim;
        plan.groups
            .iter()
            .map(|g| {
                let net = self.nets.get(g.net).ok_or_else(|| Error::Shape("missing coupling network".into()))?;
                let mut input = Vec::with_capacity(g.cond_locs.len() * (c1 - c0) * m);
                for &l in &g.cond_locs {
                    input.extend_from_slice(&v.location(l)[c0 * m..c1 * m]);
                }
                T::dense_network(net, &input, g.cond_locs.len())
            })
            .collect()
    }

    fn transform(&self, ctx: &LayerCtx, v: &ChartField<T>, inverse: bool) -> Result<(ChartField<T>, T)> {
        let plan = self.plan(v)?;
        let raw = self.conditioner(v, &plan)?;
        let (_, (b0, b1)) = self.channel_split(v.channels);
        let m = v.dim;
        let gd = ctx.manifold.group_dim();
        let per = m + gd;
        let cb = b1 - b0;
        let clamp = T::c(ctx.scale_clamp);
        let mut out = v.clone();
        let mut ld = T::zero();
        for (g, raw) in plan.groups.iter().zip(&raw) {
            if raw.len() != g.out_locs.len() * cb * per {
                return Err(Error::Shape(format!(
                    "coupling network emits {} values, expected {}",
                    raw.len(),
                    g.out_locs.len() * cb * per
                )));
            }
            for (row, &loc) in g.out_locs.iter().enumerate() {
                for j in 0..cb {
                    let r = &raw[(row * cb + j) * per..(row * cb + j + 1) * per];
                    let log_s: Vec<T> = r[..m].iter().map(|&x| clamp * (x / clamp).tanh()).collect();
                    let applied: Vec<T> = if ctx.unclamped_forward { r[..m].to_vec() } else { log_s.clone() };
                    let elem = ctx.manifold.group_from_params(&r[m..])?;
                    let ch = b0 + j;
                    let x = v.entry(loc, ch);
                    if !inverse {
                        let w: Vec<T> = x.iter().zip(&applied).map(|(&a, &l)| a * l.exp()).collect();
                        ctx.check(&w)?;
                        let (y, l) = ctx.manifold.chart_act(&elem, &w)?;
                        ctx.check(&y)?;
                        out.entry_mut(loc, ch).copy_from_slice(&y);
                        ld += l;
                    } else {
                        let (w, l) = ctx.manifold.chart_act(&elem.inverse(), x)?;
                        ctx.check(&w)?;
                        let y: Vec<T> = w.iter().zip(&applied).map(|(&a, &l)| a * (-l).exp()).collect();
                        ctx.check(&y)?;
                        out.entry_mut(loc, ch).copy_from_slice(&y);
                        ld -= l;
                    }
                    ld += log_s.iter().copied().sum::<T>();
                }
            }
        }
        Ok((out, ld))
    }

    pub fn forward(&self, ctx: &LayerCtx, v: &ChartField<T>) -> Result<(ChartField<T>, T)> {
        self.transform(ctx, v, false)
    }

    pub fn inverse(&self, ctx: &LayerCtx, y: &ChartField<T>) -> Result<(ChartField<T>, T)> {
        self.transform(ctx, y, true)
    }
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&self, ctx: &LayerCtx, v: &ChartField<T>) -> Result<(ChartField<T>, T)> {
        match self {
            Layer::Actnorm(p) => p.forward(ctx, v),
            Layer::Conv1x1(p) => p.forward(ctx, v),
            Layer::Coupling(p) => p.forward(ctx, v),
        }
    }

    /// Inverse map; the returned log-det is the forward one at the
    /// reconstructed input.
    pub fn inverse(&self, ctx: &LayerCtx, y: &ChartField<T>) -> Result<(ChartField<T>, T)> {
        match self {
            Layer::Actnorm(p) => p.inverse(ctx, y),
            Layer::Conv1x1(p) => p.inverse(ctx, y),
            Layer::Coupling(p) => p.inverse(ctx, y),
        }
    }
}

impl<T> Layer<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Layer<U> {
        match self {
            Layer::Actnorm(p) => Layer::Actnorm(ActnormParams {
                log_scale: p.log_scale.iter().map(&mut *f).collect(),
                shift: p.shift.iter().map(&mut *f).collect(),
                per_location: p.per_location,
            }),
            Layer::Conv1x1(p) => Layer::Conv1x1(Conv1x1Params { channels: p.channels, generator: p.generator.iter().map(&mut *f).collect() }),
            Layer::Coupling(p) => Layer::Coupling(CouplingParams {
                mode: p.mode,
                flip: p.flip,
                nets: p.nets.iter().map(|n| n.map(&mut *f)).collect(),
            }),
        }
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&T)) {
        match self {
            Layer::Actnorm(p) => {
                p.log_scale.iter().for_each(&mut *f);
                p.shift.iter().for_each(&mut *f);
            }
            Layer::Conv1x1(p) => p.generator.iter().for_each(&mut *f),
            Layer::Coupling(p) => p.nets.iter().for_each(|n| n.for_each_param(f)),
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        match self {
            Layer::Actnorm(p) => {
                p.log_scale.iter_mut().for_each(&mut *f);
                p.shift.iter_mut().for_each(&mut *f);
            }
            Layer::Conv1x1(p) => p.generator.iter_mut().for_each(&mut *f),
            Layer::Coupling(p) => p.nets.iter_mut().for_each(|n| n.for_each_param_mut(f)),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_| n += 1);
        n
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Actnorm(_) => "actnorm",
            Layer::Conv1x1(_) => "conv1x1",
            Layer::Coupling(_) => "coupling",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Field;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{E, LN_2};

    fn rplus_ctx() -> LayerCtx {
        LayerCtx::new(ManifoldKind::positive_reals())
    }

    #[test]
    fn actnorm_hand_example() {
        let ctx = rplus_ctx();
        let p = ActnormParams { log_scale: vec![LN_2], shift: vec![3f64.ln()], per_location: false };
        let x = Field::constant(ctx.manifold.clone(), vec![1], 1, &[E]).unwrap();
        let (y, ld) = p.forward(&ctx, &x.to_chart().unwrap()).unwrap();
        let yf = Field::from_chart(&ctx.manifold, &y).unwrap();
        assert!((yf.data()[0] - 3.0 * E * E).abs() < 1e-12);
        assert!((ld - LN_2).abs() < 1e-15);
        let (back, ld2) = p.inverse(&ctx, &y).unwrap();
        assert!((back.coords[0] - 1.0).abs() < 1e-15);
        assert!((ld2 - LN_2).abs() < 1e-15);
    }

    #[test]
    fn actnorm_init_standardizes_rplus() {
        let ctx = rplus_ctx();
        let batch: Vec<ChartField<f64>> = [-1.0, 1.0, 3.0].iter().map(|&v| ChartField::new(vec![1], 1, 1, vec![v]).unwrap()).collect();
        let p = ActnormParams::init(&ctx, &batch, false).unwrap();
        let ys: Vec<f64> = batch.iter().map(|b| p.forward(&ctx, b).unwrap().0.coords[0]).collect();
        let mean = ys.iter().sum::<f64>() / 3.0;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
        let constant = vec![ChartField::new(vec![1], 1, 1, vec![2.0]).unwrap(); 3];
        assert!(matches!(ActnormParams::init(&ctx, &constant, false), Err(Error::DegenerateBatch { .. })));
    }

    #[test]
    fn conv_swap_example() {
        let ctx = rplus_ctx();
        // Cayley generator a with (1−a²)/(1+a²) = 0 and 2a/(1+a²) = 1 gives [[0,1],[-1,0]]
        let p = Conv1x1Params { channels: 2, generator: vec![1.0f64] };
        let r = p.rotation().unwrap();
        assert!((r[(0, 1)] - 1.0).abs() < 1e-15 && (r[(1, 0)] + 1.0).abs() < 1e-15 && r[(0, 0)].abs() < 1e-15);
        let x = ChartField::new(vec![1], 2, 1, vec![1.0f64, 2.0]).unwrap();
        let (y, ld) = p.forward(&ctx, &x).unwrap();
        assert_eq!(ld, 0.0);
        assert!((y.coords[0] - 2.0).abs() < 1e-15 && (y.coords[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn fresh_coupling_is_identity() {
        let ctx = LayerCtx::new(ManifoldKind::sphere(3).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = CouplingParams::new(&ctx, &[2, 2], 4, CouplingMode::Channel, false, &[8, 8], &mut rng).unwrap();
        let x = Field::from_fn(ctx.manifold.clone(), vec![2, 2], 4, |_, _| ctx.manifold.random_point(&mut rng, 0.5)).unwrap();
        let v = x.to_chart().unwrap();
        let (y, ld) = p.forward(&ctx, &v).unwrap();
        assert_eq!(y, v);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn slice_mode_needs_divisible_axis() {
        let ctx = rplus_ctx();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mode = CouplingMode::Slices { tau: 4, shared: true };
        assert!(matches!(
            CouplingParams::new(&ctx, &[12], 1, mode, false, &[4], &mut rng),
            Err(Error::Divisibility { extent: 12, divisor: 8 })
        ));
    }
}
