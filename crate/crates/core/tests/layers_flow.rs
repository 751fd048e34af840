use std::f64::consts::{E, LN_2};

use manifold_flow::check::{check_manifolds, max_distance, random_chart_field, random_layer, LAYER_KINDS};
use manifold_flow::geometry::standard_gaussian_logpdf;
use manifold_flow::layers::{ActnormParams, CouplingMode, CouplingParams, Layer, LayerCtx};
use manifold_flow::model::{nanoflow_share, LevelSpec};
use manifold_flow::train::end_to_end_gradient;
use manifold_flow::{ChartField, Error, Field, FlowModel, FlowSpec, ManifoldGaussian, ManifoldKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn one_level(blocks: usize, hidden: usize) -> FlowSpec {
    FlowSpec { levels: vec![LevelSpec { squeeze: false, blocks, split: false }], hidden: vec![hidden], ..FlowSpec::default() }
}

fn perturbed(m: &ManifoldKind, grid: &[usize], channels: usize, spec: FlowSpec, seed: u64) -> FlowModel<f64> {
    let mut model = FlowModel::new(m.clone(), grid, channels, spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    model.for_each_param_mut(&mut |p| *p += 0.2 * rng.sample::<f64, _>(StandardNormal));
    model
}

#[test]
fn layer_round_trips_on_random_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for m in check_manifolds() {
        let ctx = LayerCtx::new(m.clone());
        for kind in LAYER_KINDS {
            let mut done = 0;
            while done < 100 {
                let layer = random_layer(kind, &ctx, &[2, 2], 2, &mut rng).unwrap();
                let x = random_chart_field(&m, &[2, 2], 2, &mut rng).unwrap();
                let y = match layer.forward(&ctx, &x) {
                    Ok((y, _)) => y,
                    Err(Error::ChartDomain { .. }) => continue,
                    Err(e) => panic!("{e}"),
                };
                let (back, _) = layer.inverse(&ctx, &y).unwrap();
                assert!(max_distance(&m, &x, &back).unwrap() < 1e-8, "{kind:?} {m:?}");
                done += 1;
            }
        }
    }
}

#[test]
fn block_logdet_is_sum_of_layer_logdets() {
    for m in check_manifolds() {
        let model = perturbed(&m, &[2, 2], 2, one_level(2, 8), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_chart_field(&m, &[2, 2], 2, &mut rng).unwrap();
        let Ok(total) = model.forward_chart(&x) else { continue };
        let mut h = x;
        let mut sum = 0.0;
        for layer in model.layers() {
            let (y, ld) = layer.forward(&model.ctx, &h).unwrap();
            sum += ld;
            h = y;
        }
        assert!((total.logdet - sum).abs() < 1e-10, "{m:?}");
        assert_eq!(total.scales[0], h);
    }
}

#[test]
fn coupling_passes_conditioner_through_bitwise() {
    let m = ManifoldKind::spd(2, manifold_flow::ChartKind::MatrixLog).unwrap();
    let ctx = LayerCtx::new(m.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let layer = random_layer(manifold_flow::check::LayerKind::Coupling, &ctx, &[2, 2, 2], 2, &mut rng).unwrap();
    let Layer::Coupling(p) = &layer else { unreachable!() };
    let x = random_chart_field(&m, &[2, 2, 2], 2, &mut rng).unwrap();
    let (y, _) = layer.forward(&ctx, &x).unwrap();
    let kept = usize::from(p.flip);
    for loc in 0..x.locations() {
        assert_eq!(x.entry(loc, kept), y.entry(loc, kept));
        assert_ne!(x.entry(loc, 1 - kept), y.entry(loc, 1 - kept));
    }
}

#[test]
fn conv_hand_example_inverts() {
    let ctx = LayerCtx::new(ManifoldKind::positive_reals());
    let conv = Layer::Conv1x1(manifold_flow::layers::Conv1x1Params { channels: 2, generator: vec![1.0] });
    let x = Field::new(ctx.manifold.clone(), vec![1], 2, vec![E, E * E]).unwrap();
    let (y, _) = conv.forward(&ctx, &x.to_chart().unwrap()).unwrap();
    let yf = Field::from_chart(&ctx.manifold, &y).unwrap();
    assert!((yf.data()[0] - E * E).abs() < 1e-12 && (yf.data()[1] - 1.0 / E).abs() < 1e-12);
    let (back, _) = conv.inverse(&ctx, &y).unwrap();
    let bf = Field::from_chart(&ctx.manifold, &back).unwrap();
    assert!((bf.data()[0] - E).abs() < 1e-12 && (bf.data()[1] - E * E).abs() < 1e-12);
}

#[test]
fn sphere_layers_never_emit_nan() {
    let m = ManifoldKind::sphere(3).unwrap();
    let ctx = LayerCtx::new(m.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut rejected = 0;
    for _ in 0..200 {
        let mut p = ActnormParams::identity(&ctx, 4, 2, false);
        p.log_scale.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.5));
        let x = random_chart_field(&m, &[2, 2], 2, &mut rng).unwrap();
        match p.forward(&ctx, &x) {
            Ok((y, ld)) => {
                assert!(ld.is_finite());
                for loc in 0..4 {
                    for c in 0..2 {
                        let r = y.entry(loc, c).iter().map(|v| v * v).sum::<f64>().sqrt();
                        assert!(r < std::f64::consts::PI - 1e-3);
                    }
                }
            }
            Err(Error::ChartDomain { .. }) => rejected += 1,
            Err(e) => panic!("{e}"),
        }
    }
    assert!(rejected > 0);
}

#[test]
fn chart_domain_errors_name_the_layer() {
    let m = ManifoldKind::sphere(3).unwrap();
    let mut model = FlowModel::new(m.clone(), &[2, 2], 2, one_level(2, 8), 15).unwrap();
    if let Layer::Actnorm(p) = &mut model.levels[0].layers[3] {
        p.log_scale.iter_mut().for_each(|v| *v = 3.0);
    } else {
        panic!("layer 3 should be the second actnorm");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random_chart_field(&m, &[2, 2], 2, &mut rng).unwrap();
    assert!(matches!(model.forward_chart(&x), Err(Error::ChartDomain { layer: Some(3), .. })));
}

#[test]
fn coupling_inverse_consistent_after_a_training_step() {
    let m = ManifoldKind::positive_reals();
    let spec = FlowSpec { levels: vec![LevelSpec { squeeze: true, blocks: 2, split: false }], hidden: vec![8], ..FlowSpec::default() };
    let mut model = FlowModel::new(m.clone(), &[2, 2], 1, spec, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let batch: Vec<ChartField<f64>> = (0..4).map(|_| random_chart_field(&m, &[2, 2], 1, &mut rng).unwrap()).collect();
    let g = end_to_end_gradient(&model, &batch).unwrap().gradient;
    let stepped: Vec<f64> = model.params().iter().zip(&g).map(|(p, d)| p - 0.05 * d).collect();
    model.set_params(&stepped).unwrap();
    assert!(g.iter().any(|v| v.abs() > 1e-6));
    for x in &batch {
        let z = model.forward_chart(x).unwrap();
        let (back, _) = model.inverse_chart(&z.scales).unwrap();
        assert!(max_distance(&m, x, &back).unwrap() < 1e-8);
    }
}

#[test]
fn squeeze_and_split_shapes() {
    let f = ChartField::new(vec![2, 2, 2], 3, 1, (0..24).map(f64::from).collect()).unwrap();
    let s = f.squeeze().unwrap();
    assert_eq!((s.grid.clone(), s.channels), (vec![1, 1, 1], 24));
    assert!(matches!(ChartField::<f64>::zeros(vec![3, 2], 1, 1).squeeze(), Err(Error::Divisibility { extent: 3, .. })));
    let g = ChartField::new(vec![2], 4, 2, (0..16).map(f64::from).collect()).unwrap();
    let (kept, emitted) = g.split().unwrap();
    assert_eq!((kept.channels, emitted.channels), (2, 2));
    assert_eq!(ChartField::merge(&kept, &emitted).unwrap(), g);
    assert!(matches!(ChartField::<f64>::zeros(vec![2], 3, 1).split(), Err(Error::OddChannels(3))));
}

#[test]
fn emitted_slice_score_matches_gaussian() {
    let m = ManifoldKind::sphere(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random_chart_field(&m, &[2], 4, &mut rng).unwrap();
    let (_, emitted) = x.split().unwrap();
    let g = ManifoldGaussian::standard(m.clone());
    let direct: f64 = emitted.coords.chunks(2).map(|v| g.logpdf_chart(v).unwrap()).sum();
    assert!((standard_gaussian_logpdf(&emitted.coords) - direct).abs() < 1e-12);
}

#[test]
fn odd_channels_at_a_split_are_rejected() {
    let spec = FlowSpec { levels: vec![LevelSpec { squeeze: false, blocks: 1, split: true }, LevelSpec { squeeze: false, blocks: 1, split: false }], ..FlowSpec::default() };
    assert!(matches!(FlowModel::new(ManifoldKind::positive_reals(), &[2], 3, spec, 0), Err(Error::OddChannels(3))));
}

#[test]
fn actnorm_initialized_model_standardizes_its_batch() {
    let m = ManifoldKind::positive_reals();
    let spec = FlowSpec { conv_init: 0.0, ..one_level(2, 8) };
    let mut model = FlowModel::new(m.clone(), &[2, 2], 2, spec, 18).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let batch: Vec<ChartField<f64>> = (0..20)
        .map(|_| {
            let coords = (0..8).map(|i| 1.5 + (1 + i % 2) as f64 * rng.sample::<f64, _>(StandardNormal)).collect();
            ChartField::new(vec![2, 2], 2, 1, coords).unwrap()
        })
        .collect();
    model.init_actnorm(&batch).unwrap();
    let mut scale_sum = 0.0;
    for layer in model.layers() {
        if let Layer::Actnorm(p) = layer {
            scale_sum += p.log_scale.iter().sum::<f64>() * 4.0;
        }
    }
    let mut sums = [[0.0; 2]; 2];
    for x in &batch {
        let z = model.forward_chart(x).unwrap();
        assert!((z.logdet - scale_sum).abs() < 1e-10);
        for loc in 0..4 {
            for c in 0..2 {
                let v = z.scales[0].entry(loc, c)[0];
                sums[c][0] += v;
                sums[c][1] += v * v;
            }
        }
    }
    let n = (batch.len() * 4) as f64;
    for [s, s2] in sums {
        let mean = s / n;
        assert!(mean.abs() < 1e-6 && (s2 / n - mean * mean - 1.0).abs() < 1e-6);
    }
}

#[test]
fn single_block_model_reduces_to_actnorm_example() {
    let m = ManifoldKind::positive_reals();
    let mut model = FlowModel::new(m.clone(), &[1], 1, one_level(1, 4), 19).unwrap();
    assert_eq!(model.layers().count(), 2);
    if let Layer::Actnorm(p) = &mut model.levels[0].layers[0] {
        p.log_scale[0] = LN_2;
        p.shift[0] = 3f64.ln();
    }
    let x = Field::new(m.clone(), vec![1], 1, vec![E]).unwrap();
    let z = model.forward(&x).unwrap();
    assert!((z.scales[0].coords[0] - (3.0 * E * E).ln()).abs() < 1e-12);
    assert!((z.logdet - LN_2).abs() < 1e-15);
}

#[test]
fn nll_at_origin_of_identity_model() {
    let m = ManifoldKind::sphere(12).unwrap();
    let spec = FlowSpec { conv_init: 0.0, ..one_level(2, 8) };
    let model = FlowModel::new(m.clone(), &[2, 2], 2, spec, 20).unwrap();
    let x = ChartField::zeros(vec![2, 2], 2, 11);
    let d = model.latent_dim() as f64;
    assert!((model.nll_chart(&x).unwrap() - 0.5 * d * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-10);
}

#[test]
fn batch_loss_ignores_sample_order() {
    let model = manifold_flow::check::gradient_check_model(21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let m = ManifoldKind::positive_reals();
    let mut batch: Vec<ChartField<f64>> = (0..5).map(|_| random_chart_field(&m, &[2, 2], 1, &mut rng).unwrap()).collect();
    let a = end_to_end_gradient(&model, &batch).unwrap();
    batch.reverse();
    let b = end_to_end_gradient(&model, &batch).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    for (x, y) in a.gradient.iter().zip(&b.gradient) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn generation_and_likelihood_agree() {
    for m in [ManifoldKind::positive_reals(), ManifoldKind::sphere(3).unwrap(), ManifoldKind::spd(2, manifold_flow::ChartKind::MatrixLog).unwrap()] {
        let spec = FlowSpec {
            levels: vec![LevelSpec { squeeze: true, blocks: 2, split: true }, LevelSpec { squeeze: false, blocks: 1, split: false }],
            hidden: vec![8],
            ..FlowSpec::default()
        };
        let model = perturbed(&m, &[2, 2], 2, spec, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let latents: Vec<ChartField<f64>> = model
            .latent_shapes()
            .into_iter()
            .map(|(g, c)| {
                let n = g.iter().product::<usize>() * c * m.dim();
                ChartField::new(g, c, m.dim(), (0..n).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
            })
            .collect();
        let (x, logdet) = model.inverse_chart(&latents).unwrap();
        let lp: f64 = latents.iter().map(|z| standard_gaussian_logpdf(&z.coords)).sum();
        assert!((model.nll_chart(&x).unwrap() + lp + logdet).abs() < 1e-8, "{m:?}");
    }
}

#[test]
fn nanoflow_counts_and_tied_weights() {
    let m = ManifoldKind::positive_reals();
    let slices = |tau, shared| FlowSpec { coupling: CouplingMode::Slices { tau, shared }, ..one_level(2, 8) };
    let unshared = FlowModel::new(m.clone(), &[16], 2, slices(4, false), 23).unwrap();
    let shared = nanoflow_share(&unshared, 4, 23).unwrap();
    let single = FlowModel::new(m.clone(), &[16], 2, slices(1, false), 23).unwrap();
    assert_eq!(shared.coupling_param_count(), single.coupling_param_count());
    assert_eq!(unshared.coupling_param_count(), 4 * shared.coupling_param_count());

    let mut tied = FlowModel::new(m.clone(), &[16], 2, slices(1, true), 99).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut p = single.clone();
    p.for_each_param_mut(&mut |v| *v += 0.3 * rng.sample::<f64, _>(StandardNormal));
    tied.set_params(&p.params()).unwrap();
    let x = random_chart_field(&m, &[16], 2, &mut rng).unwrap();
    let (a, b) = (p.forward_chart(&x).unwrap(), tied.forward_chart(&x).unwrap());
    assert_eq!(a.scales, b.scales);
    assert_eq!(a.logdet, b.logdet);
}

#[test]
fn slice_couplings_reject_indivisible_axes() {
    let spec = FlowSpec { coupling: CouplingMode::Slices { tau: 4, shared: true }, ..one_level(1, 4) };
    assert!(matches!(FlowModel::new(ManifoldKind::positive_reals(), &[12], 1, spec, 0), Err(Error::Divisibility { .. })));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ctx = LayerCtx::new(ManifoldKind::positive_reals());
    assert!(CouplingParams::new(&ctx, &[16], 1, CouplingMode::Slices { tau: 4, shared: true }, false, &[4], &mut rng).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sharing_preserves_invertibility(tau in prop::sample::select(vec![1usize, 2, 4]), shared: bool, seed in 0u64..1000) {
        let m = ManifoldKind::spd(3, manifold_flow::ChartKind::MatrixLog).unwrap();
        let spec = FlowSpec { coupling: CouplingMode::Slices { tau, shared }, ..one_level(2, 8) };
        let model = perturbed(&m, &[8, 2], 1, spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_chart_field(&m, &[8, 2], 1, &mut rng).unwrap();
        let z = model.forward_chart(&x).unwrap();
        let (back, _) = model.inverse_chart(&z.scales).unwrap();
        prop_assert!(max_distance(&m, &x, &back).unwrap() < 1e-7);
    }

    #[test]
    fn squeeze_round_trip_is_bitwise(a in 1usize..3, b in 1usize..3, c in 1usize..4) {
        let grid = vec![2 * a, 2 * b];
        let n = grid.iter().product::<usize>() * c * 2;
        let f = ChartField::new(grid.clone(), c, 2, (0..n).map(|i| i as f64 * 0.5).collect()).unwrap();
        prop_assert_eq!(f.squeeze().unwrap().unsqueeze(&grid).unwrap(), f);
    }
}
