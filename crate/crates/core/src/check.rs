//! The verification suite behind `mflow check`: round trips, log-dets
//! against finite differences and gradients against finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ChartField, Field};
use crate::geometry::{ChartKind, ManifoldKind};
use crate::layers::{ActnormParams, Conv1x1Params, CouplingMode, CouplingParams, Layer, LayerCtx};
use crate::model::{FlowModel, FlowSpec, LevelSpec};
use crate::oracle::{agrees, fd_gradient, fd_logdet, NumericJacobianConfig};
use crate::train::end_to_end_gradient;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Actnorm,
    Conv1x1,
    Coupling,
}

pub const LAYER_KINDS: [LayerKind; 3] = [LayerKind::Actnorm, LayerKind::Conv1x1, LayerKind::Coupling];

/// The manifold/chart combinations exercised by the suite.
pub fn check_manifolds() -> Vec<ManifoldKind> {
    vec![
        ManifoldKind::sphere(3).unwrap(),
        ManifoldKind::sphere(12).unwrap(),
        ManifoldKind::positive_reals(),
        ManifoldKind::spd(2, ChartKind::MatrixLog).unwrap(),
        ManifoldKind::spd(2, ChartKind::Cholesky).unwrap(),
        ManifoldKind::spd(3, ChartKind::MatrixLog).unwrap(),
        ManifoldKind::spd(3, ChartKind::Cholesky).unwrap(),
    ]
}

fn normal(rng: &mut impl Rng, s: f64) -> f64 {
    s * rng.sample::<f64, _>(StandardNormal)
}

/// A layer with random, non-identity parameters.
pub fn random_layer(kind: LayerKind, ctx: &LayerCtx, grid: &[usize], channels: usize, rng: &mut impl Rng) -> Result<Layer<f64>> {
    let locs: usize = grid.iter().product();
    Ok(match kind {
        LayerKind::Actnorm => {
            let mut p = ActnormParams::identity(ctx, locs, channels, false);
            p.log_scale.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            p.shift.iter_mut().for_each(|v| *v = normal(rng, 0.3));
            Layer::Actnorm(p)
        }
        LayerKind::Conv1x1 => {
            let mut p = Conv1x1Params::identity(channels);
            p.generator.iter_mut().for_each(|v| *v = normal(rng, 0.5));
            Layer::Conv1x1(p)
        }
        LayerKind::Coupling => {
            let mut p = CouplingParams::new(ctx, grid, channels, CouplingMode::Channel, rng.random(), &[8], rng)?;
            p.nets.iter_mut().for_each(|n| n.for_each_param_mut(&mut |w| *w += normal(rng, 0.4)));
            Layer::Coupling(p)
        }
    })
}

/// A random field in chart coordinates, kept well inside the chart domain.
pub fn random_chart_field(manifold: &ManifoldKind, grid: &[usize], channels: usize, rng: &mut impl Rng) -> Result<ChartField<f64>> {
    let f = Field::from_fn(manifold.clone(), grid.to_vec(), channels, |_, _| manifold.random_point(rng, 0.5))?;
    f.to_chart()
}

/// Like [`random_chart_field`] with points concentrated near the base point,
/// so deep stacks of random layers stay inside the chart domain.
pub fn compact_chart_field(manifold: &ManifoldKind, grid: &[usize], channels: usize, rng: &mut impl Rng) -> Result<ChartField<f64>> {
    let f = Field::from_fn(manifold.clone(), grid.to_vec(), channels, |_, _| manifold.random_point(rng, 0.25))?;
    f.to_chart()
}

/// Largest geodesic distance between corresponding entries.
pub fn max_distance(manifold: &ManifoldKind, a: &ChartField<f64>, b: &ChartField<f64>) -> Result<f64> {
    let fa = Field::from_chart(manifold, a)?;
    let fb = Field::from_chart(manifold, b)?;
    let mut worst = 0.0f64;
    for (x, y) in fa.points().zip(fb.points()) {
        worst = worst.max(manifold.distance(x, y)?);
    }
    Ok(worst)
}

/// A square chart-coordinate map from a layer, for the log-det oracle.
pub fn layer_chart_map<'a>(layer: &'a Layer<f64>, ctx: &'a LayerCtx, shape: &'a ChartField<f64>) -> impl Fn(&[f64]) -> Result<Vec<f64>> + 'a {
    move |v: &[f64]| {
        let f = ChartField::new(shape.grid.clone(), shape.channels, shape.dim, v.to_vec())?;
        layer.forward(ctx, &f).map(|(y, _)| y.coords)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    pub bound: f64,
    pub passed: bool,
    pub cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    pub cases: usize,
    pub seed: u64,
    pub oracle: NumericJacobianConfig,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { cases: 20, seed: 0, oracle: NumericJacobianConfig::default() }
    }
}

fn short_name(m: &ManifoldKind) -> String {
    format!("{:?}/{:?}", m.kind(), m.chart())
}

/// Runs `attempt` until `cases` successes, resampling cases that leave the
/// chart domain. Returns the worst value seen.
fn collect(cases: usize, rng: &mut ChaCha8Rng, mut attempt: impl FnMut(&mut ChaCha8Rng) -> Result<f64>) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut tries = 0;
    while done < cases {
        tries += 1;
        if tries > 20 * cases + 20 {
            log::warn!("only {done} of {cases} random cases stayed inside the chart domain");
            return Ok((f64::INFINITY, done));
        }
        match attempt(rng) {
            Ok(v) => {
                worst = worst.max(if v.is_nan() { f64::INFINITY } else { v });
                done += 1;
            }
            Err(Error::ChartDomain { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok((worst, done))
}

/// Round-trip and log-det checks for every layer and manifold, a composed
/// model round trip, and the end-to-end gradient check.
///
/// With `inject_fault` the coupling forward pass skips the scale clamp while
/// its log-det keeps it.
pub fn run_checks(cfg: &CheckConfig, inject_fault: bool) -> Result<Vec<CheckResult>> {
    cfg.oracle.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let grid = [2usize, 2];
    let channels = 2;
    for m in check_manifolds() {
        let mut ctx = LayerCtx::new(m.clone());
        ctx.unclamped_forward = inject_fault;
        for kind in LAYER_KINDS {
            let (rt, n) = collect(cfg.cases, &mut rng, |rng| {
                let layer = random_layer(kind, &ctx, &grid, channels, rng)?;
                let x = random_chart_field(&m, &grid, channels, rng)?;
                let (y, _) = layer.forward(&ctx, &x)?;
                let (back, _) = layer.inverse(&ctx, &y)?;
                max_distance(&m, &x, &back)
            })?;
            out.push(CheckResult { name: format!("round trip {kind:?} {}", short_name(&m)), worst: rt, bound: 1e-8, passed: rt < 1e-8, cases: n });
            let (ld, n) = collect(cfg.cases.div_ceil(4), &mut rng, |rng| {
                let layer = random_layer(kind, &ctx, &grid, channels, rng)?;
                let x = random_chart_field(&m, &grid, channels, rng)?;
                let (_, analytic) = layer.forward(&ctx, &x)?;
                let numeric = fd_logdet(layer_chart_map(&layer, &ctx, &x), &x.coords, cfg.oracle)?;
                Ok((analytic - numeric).abs() / 1f64.max(numeric.abs()))
            })?;
            out.push(CheckResult { name: format!("log-det {kind:?} {}", short_name(&m)), worst: ld, bound: 1e-4, passed: ld <= 1e-4, cases: n });
        }
        let spec = FlowSpec {
            levels: vec![LevelSpec { squeeze: false, blocks: 2, split: false }],
            hidden: vec![8],
            ..FlowSpec::default()
        };
        let (rt, n) = collect(cfg.cases, &mut rng, |rng| {
            let mut model = FlowModel::new(m.clone(), &grid, channels, spec.clone(), rng.random())?;
            model.ctx.unclamped_forward = inject_fault;
            let mut layers: Vec<Layer<f64>> = Vec::new();
            for l in model.layers() {
                let kind = match l {
                    Layer::Actnorm(_) => LayerKind::Actnorm,
                    Layer::Conv1x1(_) => LayerKind::Conv1x1,
                    Layer::Coupling(_) => LayerKind::Coupling,
                };
                layers.push(random_layer(kind, &model.ctx, &grid, channels, rng)?);
            }
            model.levels[0].layers = layers;
            let x = compact_chart_field(&m, &grid, channels, rng)?;
            let z = model.forward_chart(&x)?;
            let (back, _) = model.inverse_chart(&z.scales)?;
            max_distance(&m, &x, &back)
        })?;
        out.push(CheckResult { name: format!("round trip 2-block model {}", short_name(&m)), worst: rt, bound: 1e-7, passed: rt < 1e-7, cases: n });
    }
    out.push(gradient_check(cfg, inject_fault)?);
    Ok(out)
}

/// A 2-block flow on a 2×2 positive-reals field with perturbed parameters.
pub fn gradient_check_model(seed: u64) -> Result<FlowModel<f64>> {
    let spec = FlowSpec {
        levels: vec![LevelSpec { squeeze: true, blocks: 2, split: false }],
        hidden: vec![8],
        ..FlowSpec::default()
    };
    let mut m = FlowModel::new(ManifoldKind::positive_reals(), &[2, 2], 1, spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.for_each_param_mut(&mut |p| *p += rng.random_range(-0.3..0.3));
    Ok(m)
}

fn gradient_check(cfg: &CheckConfig, inject_fault: bool) -> Result<CheckResult> {
    let mut model = gradient_check_model(cfg.seed)?;
    model.ctx.unclamped_forward = inject_fault;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let batch: Vec<ChartField<f64>> =
        (0..3).map(|_| random_chart_field(&ManifoldKind::positive_reals(), &[2, 2], 1, &mut rng)).collect::<Result<_>>()?;
    let analytic = end_to_end_gradient(&model, &batch)?.gradient;
    let numeric = fd_gradient(
        |p| {
            let mut m = model.clone();
            m.set_params(p)?;
            let mut s = 0.0;
            for x in &batch {
                s += m.nll_chart(x)?;
            }
            Ok(s / batch.len() as f64)
        },
        &model.params(),
        cfg.oracle,
    )?;
    let mut worst = 0.0f64;
    let mut passed = true;
    for (a, n) in analytic.iter().zip(&numeric) {
        passed &= agrees(*a, *n, 1e-4, 1e-7);
        worst = worst.max((a - n).abs() / 1e-7f64.max(n.abs()).max(1e-3));
    }
    Ok(CheckResult { name: format!("gradient {} params", analytic.len()), worst, bound: 1e-4, passed, cases: 1 })
}
