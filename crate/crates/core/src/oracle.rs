//! Brute-force finite-difference kernels. Nothing here calls into the
//! analytic derivative paths; the determinant uses its own factorization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericJacobianConfig {
    /// Central-difference step in chart coordinates.
    pub step: f64,
}

impl Default for NumericJacobianConfig {
    fn default() -> Self {
        NumericJacobianConfig { step: 1e-5 }
    }
}

impl NumericJacobianConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1e-9..=1e-2).contains(&self.step) {
            return Err(Error::config("oracle.step", format!("{} is outside [1e-9, 1e-2]", self.step)));
        }
        Ok(())
    }
}

/// Central-difference Jacobian, row-major `n_out × n_in`.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Result<Vec<f64>>, at: &[f64], cfg: NumericJacobianConfig) -> Result<(usize, Vec<f64>)> {
    cfg.validate()?;
    let h = cfg.step;
    let n = at.len();
    let mut cols = Vec::with_capacity(n);
    let mut x = at.to_vec();
    for j in 0..n {
        x[j] = at[j] + h;
        let plus = f(&x)?;
        x[j] = at[j] - h;
        let minus = f(&x)?;
        x[j] = at[j];
        if plus.len() != minus.len() {
            return Err(Error::Shape("map output width changed under perturbation".into()));
        }
        let col: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect();
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("jacobian column {j}")));
        }
        cols.push(col);
    }
    let rows = cols.first().map_or(0, |c| c.len());
    let mut out = vec![0.0; rows * n];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            out[i * n + j] = *v;
        }
    }
    Ok((rows, out))
}

/// `log|det A|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut a: Vec<f64>, n: usize) -> Result<f64> {
    if a.len() != n * n {
        return Err(Error::Shape(format!("{} entries for a {n}×{n} matrix", a.len())));
    }
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs())).unwrap();
        let piv = a[p * n + k];
        if piv == 0.0 {
            return Err(Error::SingularJacobian);
        }
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
        }
        acc += piv.abs().ln();
        for i in k + 1..n {
            let r = a[i * n + k] / piv;
            if r != 0.0 {
                for j in k..n {
                    a[i * n + j] -= r * a[k * n + j];
                }
            }
        }
    }
    if acc < 1e-300f64.ln() {
        return Err(Error::SingularJacobian);
    }
    Ok(acc)
}

/// `log|det J|` of a square map at `at`.
pub fn fd_logdet(f: impl Fn(&[f64]) -> Result<Vec<f64>>, at: &[f64], cfg: NumericJacobianConfig) -> Result<f64> {
    let (rows, j) = fd_jacobian(f, at, cfg)?;
    if rows != at.len() {
        return Err(Error::Shape(format!("map from {} to {} coordinates is not square", at.len(), rows)));
    }
    log_abs_det(j, rows)
}

/// Central-difference gradient of a scalar loss.
pub fn fd_gradient(loss: impl Fn(&[f64]) -> Result<f64>, params: &[f64], cfg: NumericJacobianConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let h = cfg.step;
    let mut x = params.to_vec();
    let mut g = Vec::with_capacity(params.len());
    for j in 0..params.len() {
        x[j] = params[j] + h;
        let plus = loss(&x)?;
        x[j] = params[j] - h;
        let minus = loss(&x)?;
        x[j] = params[j];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluation around parameter {j}")));
        }
        g.push((plus - minus) / (2.0 * h));
    }
    Ok(g)
}

/// `|a − b| ≤ max(abs, rel·|b|)`.
pub fn agrees(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= abs.max(rel * b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NumericJacobianConfig {
        NumericJacobianConfig::default()
    }

    #[test]
    fn identity_and_diagonal() {
        assert!(fd_logdet(|v| Ok(v.to_vec()), &[0.3, -1.0], cfg()).unwrap().abs() < 1e-10);
        let ld = fd_logdet(|v| Ok(vec![2.0 * v[0], 3.0 * v[1]]), &[1.0, 2.0], cfg()).unwrap();
        assert!((ld - 6f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn actnorm_chart_map() {
        let ld = fd_logdet(|v| Ok(vec![2.0 * v[0] + 3f64.ln()]), &[1.0], cfg()).unwrap();
        assert!((ld - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn quadratic_gradient() {
        let p = [0.5, -2.0, 3.0];
        let g = fd_gradient(|x| Ok(0.5 * x.iter().map(|v| v * v).sum::<f64>()), &p, cfg()).unwrap();
        assert!(g.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-8));
        let z = fd_gradient(|_| Ok(4.0), &p, cfg()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singular_and_invalid() {
        assert!(matches!(fd_logdet(|v| Ok(vec![v[0] + v[1], v[0] + v[1]]), &[1.0, 1.0], cfg()), Err(Error::SingularJacobian)));
        assert!(fd_logdet(|v| Ok(v.to_vec()), &[1.0], NumericJacobianConfig { step: 0.1 }).is_err());
        assert!(fd_gradient(|_| Ok(f64::NAN), &[1.0], cfg()).is_err());
    }

    #[test]
    fn second_order_convergence() {
        type Map = fn(&[f64]) -> Result<Vec<f64>>;
        let cases: [(Map, [f64; 2], f64); 3] = [
            (|v| Ok(vec![v[0].powi(3), v[1].powi(3)]), [1.0, 2.0], (3.0f64 * 12.0).ln()),
            (|v| Ok(vec![v[0].exp(), v[1] + v[0].powi(2)]), [0.5, 1.0], 0.5),
            (|v| Ok(vec![v[0].sin() + v[1], v[1].powi(3)]), [0.3, 0.7], (0.3f64.cos() * 3.0 * 0.49).ln()),
        ];
        for (f, at, exact) in cases {
            let e1 = (fd_logdet(f, &at, NumericJacobianConfig { step: 1e-2 }).unwrap() - exact).abs();
            let e2 = (fd_logdet(f, &at, NumericJacobianConfig { step: 5e-3 }).unwrap() - exact).abs();
            let ratio = e1 / e2;
            assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
        }
    }
}
