use std::f64::consts::PI;

use manifold_flow::check::check_manifolds;
use manifold_flow::geometry::{chart_transition_logdet, GroupElement, TOL};
use manifold_flow::oracle::{fd_logdet, NumericJacobianConfig};
use manifold_flow::{ChartKind, ManifoldGaussian, ManifoldKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn random_group(m: &ManifoldKind, rng: &mut impl Rng) -> GroupElement<f64> {
    let raw: Vec<f64> = (0..m.group_dim()).map(|_| rng.sample(StandardNormal)).collect();
    m.group_from_params(&raw).unwrap()
}

#[test]
fn chart_round_trips_on_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in check_manifolds() {
        for _ in 0..1000 {
            let x = m.random_point(&mut rng, 0.8);
            let v = m.chart_forward(&x).unwrap();
            let back = m.chart_inverse(&v).unwrap();
            assert!(norm_diff(&x, &back) < TOL.round_trip, "{m:?}");
            let again = m.chart_forward(&back).unwrap();
            assert!(norm_diff(&v, &again) < TOL.round_trip, "{m:?}");
        }
    }
}

#[test]
fn metric_axioms_hold_on_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in check_manifolds() {
        for _ in 0..200 {
            let (x, y, z) = (m.random_point(&mut rng, 0.7), m.random_point(&mut rng, 0.7), m.random_point(&mut rng, 0.7));
            let dxy = m.distance(&x, &y).unwrap();
            assert_eq!(dxy.to_bits(), m.distance(&y, &x).unwrap().to_bits());
            assert!(dxy >= 0.0);
            assert!(m.distance(&x, &z).unwrap() <= dxy + m.distance(&y, &z).unwrap() + 1e-10);
            assert_eq!(m.distance(&x, &x).unwrap(), 0.0);
        }
    }
}

#[test]
fn group_actions_are_isometries_with_inverses() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for m in check_manifolds() {
        for _ in 0..100 {
            let g = random_group(&m, &mut rng);
            let (x, y) = (m.random_point(&mut rng, 0.7), m.random_point(&mut rng, 0.7));
            let (gx, gy) = (m.group_apply(&g, &x).unwrap(), m.group_apply(&g, &y).unwrap());
            let gap = (m.distance(&gx, &gy).unwrap() - m.distance(&x, &y).unwrap()).abs();
            assert!(gap < 1e-10, "{m:?}: {gap}");
            let back = m.group_apply(&g.inverse(), &gx).unwrap();
            assert!(m.distance(&back, &x).unwrap() < 1e-10);
        }
    }
}

#[test]
fn rotation_inverse_is_transpose() {
    let m = ManifoldKind::sphere(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random_group(&m, &mut rng).matrix().unwrap();
    let qinv = GroupElement::Rotation(q.clone()).inverse().matrix().unwrap();
    assert_eq!(qinv, q.transpose());
}

#[test]
fn unit_jacobian_group_actions_in_chart() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let oracle = NumericJacobianConfig::default();
    let unit = [
        ManifoldKind::positive_reals(),
        ManifoldKind::sphere(3).unwrap(),
        ManifoldKind::sphere(12).unwrap(),
        ManifoldKind::spd(3, ChartKind::MatrixLog).unwrap(),
    ];
    for m in unit {
        for _ in 0..5 {
            let g = random_group(&m, &mut rng);
            let v = m.chart_forward(&m.random_point(&mut rng, 0.5)).unwrap();
            let map = |w: &[f64]| m.chart_forward(&m.group_apply(&g, &m.chart_inverse(w)?)?);
            let ld = fd_logdet(map, &v, oracle).unwrap();
            assert!(ld.abs() < 1e-5, "{m:?}: {ld}");
        }
    }
}

#[test]
fn cholesky_group_action_changes_chart_volume() {
    let m = ManifoldKind::spd(2, ChartKind::Cholesky).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = random_group(&m, &mut rng);
    let v = m.chart_forward(&m.random_point(&mut rng, 0.5)).unwrap();
    let (_, analytic) = m.chart_act(&g, &v).unwrap();
    let map = |w: &[f64]| m.chart_forward(&m.group_apply(&g, &m.chart_inverse(w)?)?);
    let numeric = fd_logdet(map, &v, NumericJacobianConfig::default()).unwrap();
    assert!((analytic - numeric).abs() < 1e-6, "{analytic} vs {numeric}");
}

#[test]
fn transition_logdets_match_finite_differences() {
    let oracle = NumericJacobianConfig::default();
    let chol = ManifoldKind::spd(2, ChartKind::Cholesky).unwrap();
    let log = ManifoldKind::spd(2, ChartKind::MatrixLog).unwrap();
    let s = 0.5f64.sqrt();
    let p1 = ManifoldKind::sphere_with_pole(3, &[1.0, 0.0, 0.0]).unwrap();
    let p2 = ManifoldKind::sphere_with_pole(3, &[0.0, 1.0, 0.0]).unwrap();
    let cases: [(&ManifoldKind, &ManifoldKind, Vec<f64>); 3] = [
        (&chol, &log, vec![1.0, 0.0, 0.0, 1.0]),
        (&chol, &log, vec![2.0, 0.3, 0.3, 0.5]),
        (&p1, &p2, vec![s * 0.6, s * 0.6, 0.8]),
    ];
    for (src, dst, at) in cases {
        let analytic = chart_transition_logdet(src, dst, &at).unwrap();
        let map = |w: &[f64]| dst.chart_forward(&src.chart_inverse(w)?);
        let numeric = fd_logdet(map, &src.chart_forward(&at).unwrap(), oracle).unwrap();
        assert!((analytic - numeric).abs() < 1e-4, "{analytic} vs {numeric}");
    }
}

fn trapezoid(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (hi - lo) / n as f64;
    h * ((1..n).map(|i| f(lo + i as f64 * h)).sum::<f64>() + 0.5 * (f(lo) + f(hi)))
}

#[test]
fn gaussian_integrates_to_one() {
    let r = ManifoldKind::positive_reals();
    let g = ManifoldGaussian::new(r.clone(), &[1.0], manifold_flow::linalg::Mat::identity(1)).unwrap();
    let mass = trapezoid(-8.0, 8.0, 4000, |t| g.logpdf(&r.chart_inverse(&[t]).unwrap()).unwrap().exp());
    assert!((mass - 1.0).abs() < 1e-6, "{mass}");

    let s = ManifoldKind::sphere(3).unwrap();
    let g = ManifoldGaussian::diagonal(s, vec![0.2, -0.1], &[0.1, 0.2]).unwrap();
    let lim = PI - 0.01;
    let mass = trapezoid(-lim, lim, 400, |a| {
        trapezoid(-lim, lim, 400, |b| if a * a + b * b < lim * lim { g.logpdf_chart(&[a, b]).unwrap().exp() } else { 0.0 })
    });
    assert!((mass - 1.0).abs() < 1e-4, "{mass}");
}

#[test]
fn gaussian_logpdf_is_even_about_the_mean() {
    let m = ManifoldKind::spd(2, ChartKind::MatrixLog).unwrap();
    let g = ManifoldGaussian::standard(m);
    let u = [0.3, -0.2, 0.5];
    let neg: Vec<f64> = u.iter().map(|v| -v).collect();
    assert_eq!(g.logpdf_chart(&u).unwrap(), g.logpdf_chart(&neg).unwrap());
}

#[test]
fn gaussian_sampling_examples() {
    let r = ManifoldKind::positive_reals();
    let narrow = ManifoldGaussian::diagonal(r.clone(), vec![0.0], &[1e-12]).unwrap();
    assert!((narrow.sample_seeded(9).unwrap()[0] - 1.0).abs() < 1e-5);

    let g = ManifoldGaussian::diagonal(r.clone(), vec![0.0], &[1.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mean = (0..10_000).map(|_| r.chart_forward(&g.sample(&mut rng).unwrap()).unwrap()[0]).sum::<f64>() / 10_000.0;
    assert!(mean.abs() < 0.05, "{mean}");

    let s = ManifoldKind::sphere(12).unwrap();
    let g = ManifoldGaussian::standard(s);
    for _ in 0..500 {
        let x = g.sample(&mut rng).unwrap();
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-10);
    }
    assert_eq!(g.sample_seeded(3).unwrap(), g.sample_seeded(3).unwrap());
}

#[test]
fn too_wide_gaussians_exhaust_rejection() {
    let s = ManifoldKind::sphere(3).unwrap();
    let g = ManifoldGaussian::diagonal(s, vec![0.0, 0.0], &[1e6, 1e6]).unwrap();
    assert!(matches!(g.sample_seeded(0), Err(manifold_flow::Error::RejectionExhausted(_))));
}

proptest! {
    #[test]
    fn sphere_chart_round_trip(a in -1.5f64..1.5, b in -1.5f64..1.5, c in -1.5f64..1.5) {
        let m = ManifoldKind::sphere(4).unwrap();
        let v = [a, b, c];
        let x = m.chart_inverse(&v).unwrap();
        prop_assert!((x.iter().map(|t| t * t).sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(norm_diff(&m.chart_forward(&x).unwrap(), &v) < 1e-10);
    }

    #[test]
    fn positive_reals_distance_is_log_ratio(x in 1e-3f64..1e3, y in 1e-3f64..1e3) {
        let m = ManifoldKind::positive_reals();
        prop_assert!((m.distance(&[x], &[y]).unwrap() - (x / y).ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn spd_distance_is_congruence_invariant(seed in 0u64..1000) {
        let m = ManifoldKind::spd(3, ChartKind::MatrixLog).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (m.random_point(&mut rng, 0.6), m.random_point(&mut rng, 0.6));
        let g = random_group(&m, &mut rng);
        let d0 = m.distance(&x, &y).unwrap();
        let d1 = m.distance(&m.group_apply(&g, &x).unwrap(), &m.group_apply(&g, &y).unwrap()).unwrap();
        prop_assert!((d0 - d1).abs() < 1e-10);
    }
}
