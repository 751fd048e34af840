use manifold_flow::field::{ChartField, Field};
use manifold_flow::geometry::ManifoldKind;
use manifold_flow::model::{FlowModel, FlowSpec, LevelSpec};
use manifold_flow::oracle::{agrees, fd_gradient, NumericJacobianConfig};
use manifold_flow::train::end_to_end_gradient;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn perturbed_rplus_model(seed: u64) -> FlowModel<f64> {
    let spec = FlowSpec {
        levels: vec![LevelSpec { squeeze: true, blocks: 2, split: false }],
        hidden: vec![8],
        ..FlowSpec::default()
    };
    let mut m = FlowModel::new(ManifoldKind::positive_reals(), &[2, 2], 1, spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.for_each_param_mut(&mut |p| *p += rng.random_range(-0.3..0.3));
    m
}

fn rplus_batch(seed: u64, n: usize) -> Vec<ChartField<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let f = Field::from_fn(ManifoldKind::positive_reals(), vec![2, 2], 1, |_, _| vec![rng.random_range(0.3..3.0)]).unwrap();
            f.to_chart().unwrap()
        })
        .collect()
}

#[test]
fn rplus_model_gradient_matches_finite_differences() {
    let model = perturbed_rplus_model(3);
    assert!(model.param_count() <= 500, "{}", model.param_count());
    let batch = rplus_batch(4, 3);
    let analytic = end_to_end_gradient(&model, &batch).unwrap().gradient;
    let p0 = model.params();
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
        &p0,
        NumericJacobianConfig::default(),
    )
    .unwrap();
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        assert!(agrees(*a, *n, 1e-4, 1e-7), "param {i}: analytic {a} numeric {n}");
    }
}

#[test]
fn duplicated_batch_leaves_gradient_unchanged() {
    let model = perturbed_rplus_model(5);
    let batch = rplus_batch(6, 2);
    let doubled: Vec<_> = batch.iter().chain(&batch).cloned().collect();
    let a = end_to_end_gradient(&model, &batch).unwrap();
    let b = end_to_end_gradient(&model, &doubled).unwrap();
    for (x, y) in a.gradient.iter().zip(&b.gradient) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
    }
}
