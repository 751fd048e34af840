//! Manifolds, charts, isometry groups and chart-space Gaussians.
//!
//! Points are passed around as ambient slices: a unit vector of length `n`
//! on the sphere, a single positive value on the positive reals, and a
//! row-major `n×n` matrix on SPD(n). Chart coordinates are plain slices of
//! length [`ManifoldKind::dim`].

use std::f64::consts::{LN_2, PI, SQRT_2};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, SymFn};
use crate::scalar::{values, Scalar};

/// Module-wide numerical tolerances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub point_norm: f64,
    pub symmetry: f64,
    pub min_eigenvalue: f64,
    pub cut_locus_margin: f64,
    pub arccos_window: f64,
    pub reprojection: f64,
    pub round_trip: f64,
    pub fd_agreement: f64,
    pub singular_det: f64,
    pub max_rejections: usize,
}

pub const TOL: Tolerances = Tolerances {
    point_norm: 1e-10,
    symmetry: 1e-10,
    min_eigenvalue: 1e-12,
    cut_locus_margin: 1e-3,
    arccos_window: 1e-8,
    reprojection: 1e-8,
    round_trip: 1e-8,
    fd_agreement: 1e-4,
    singular_det: 1e-30,
    max_rejections: 10_000,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    /// Unit sphere in `R^n`.
    Sphere(usize),
    PositiveReals,
    Spd(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    PoleLog,
    ScalarLog,
    Cholesky,
    MatrixLog,
}

impl Kind {
    pub fn tag(self) -> u8 {
        match self {
            Kind::Sphere(_) => 0,
            Kind::PositiveReals => 1,
            Kind::Spd(_) => 2,
        }
    }

    pub fn n(self) -> usize {
        match self {
            Kind::Sphere(n) | Kind::Spd(n) => n,
            Kind::PositiveReals => 1,
        }
    }

    pub fn from_tag(tag: u8, n: usize) -> Option<Kind> {
        match tag {
            0 => Some(Kind::Sphere(n)),
            1 => Some(Kind::PositiveReals),
            2 => Some(Kind::Spd(n)),
            _ => None,
        }
    }

    pub fn default_chart(self) -> ChartKind {
        match self {
            Kind::Sphere(_) => ChartKind::PoleLog,
            Kind::PositiveReals => ChartKind::ScalarLog,
            Kind::Spd(_) => ChartKind::MatrixLog,
        }
    }
}

impl ChartKind {
    pub fn tag(self) -> u8 {
        match self {
            ChartKind::PoleLog => 0,
            ChartKind::ScalarLog => 1,
            ChartKind::Cholesky => 2,
            ChartKind::MatrixLog => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<ChartKind> {
        match tag {
            0 => Some(ChartKind::PoleLog),
            1 => Some(ChartKind::ScalarLog),
            2 => Some(ChartKind::Cholesky),
            3 => Some(ChartKind::MatrixLog),
            _ => None,
        }
    }
}

/// A manifold together with the global chart used for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ManifoldSpec", into = "ManifoldSpec")]
pub struct ManifoldKind {
    kind: Kind,
    chart: ChartKind,
    pole: Vec<f64>,
    /// `(n-1) × n`, rows orthonormal and orthogonal to the pole.
    basis: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldName {
    Sphere,
    PositiveReals,
    Spd,
}

/// Serialized form of a [`ManifoldKind`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSpec {
    pub manifold: ManifoldName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chart: Option<ChartKind>,
    /// Sphere pole; `"ones"` style shortcuts are resolved by the caller.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pole: Option<Vec<f64>>,
}

impl TryFrom<ManifoldSpec> for ManifoldKind {
    type Error = Error;
    fn try_from(s: ManifoldSpec) -> Result<Self> {
        let kind = match s.manifold {
            ManifoldName::Sphere => Kind::Sphere(s.n.ok_or_else(|| Error::config("n", "sphere needs an ambient dimension"))?),
            ManifoldName::PositiveReals => {
                if s.n.is_some_and(|n| n != 1) {
                    return Err(Error::config("n", "positive reals are one-dimensional"));
                }
                Kind::PositiveReals
            }
            ManifoldName::Spd => Kind::Spd(s.n.ok_or_else(|| Error::config("n", "spd needs a matrix size"))?),
        };
        let chart = s.chart.unwrap_or(kind.default_chart());
        match (s.pole, kind) {
            (Some(p), Kind::Sphere(n)) => {
                if chart != ChartKind::PoleLog {
                    return Err(Error::config("chart", "sphere supports only the pole_log chart"));
                }
                ManifoldKind::sphere_with_pole(n, &p)
            }
            (Some(_), _) => Err(Error::config("pole", "a pole is only meaningful for spheres")),
            (None, _) => ManifoldKind::new(kind, chart),
        }
    }
}

impl From<ManifoldKind> for ManifoldSpec {
    fn from(m: ManifoldKind) -> Self {
        let (manifold, n) = match m.kind {
            Kind::Sphere(n) => (ManifoldName::Sphere, Some(n)),
            Kind::PositiveReals => (ManifoldName::PositiveReals, None),
            Kind::Spd(n) => (ManifoldName::Spd, Some(n)),
        };
        let default_pole = matches!(m.kind, Kind::Sphere(_)) && m.pole[0] == 1.0 && m.pole[1..].iter().all(|&p| p == 0.0);
        ManifoldSpec {
            manifold,
            n,
            chart: Some(m.chart),
            pole: (matches!(m.kind, Kind::Sphere(_)) && !default_pole).then_some(m.pole),
        }
    }
}

/// Orthonormal basis of the complement of `pole`, by Gram–Schmidt on the
/// canonical vectors in order.
fn tangent_basis(pole: &[f64]) -> Vec<f64> {
    let n = pole.len();
    let mut accepted: Vec<Vec<f64>> = vec![pole.to_vec()];
    for k in 0..n {
        if accepted.len() == n {
            break;
        }
        let mut w = vec![0.0; n];
        w[k] = 1.0;
        for _pass in 0..2 {
            for u in &accepted {
                let d: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(u).for_each(|(wi, ui)| *wi -= d * ui);
            }
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-3 {
            w.iter_mut().for_each(|v| *v /= norm);
            accepted.push(w);
        }
    }
    accepted.into_iter().skip(1).flatten().collect()
}

impl ManifoldKind {
    pub fn new(kind: Kind, chart: ChartKind) -> Result<Self> {
        match kind {
            Kind::Sphere(n) | Kind::Spd(n) if n < 2 => {
                return Err(Error::config("n", format!("dimension {n} is below the minimum of 2")));
            }
            _ => {}
        }
        let ok = matches!(
            (kind, chart),
            (Kind::Sphere(_), ChartKind::PoleLog)
                | (Kind::PositiveReals, ChartKind::ScalarLog)
                | (Kind::Spd(_), ChartKind::Cholesky | ChartKind::MatrixLog)
        );
        if !ok {
            return Err(Error::config("chart", format!("{chart:?} is not a chart of {kind:?}")));
        }
        let (pole, basis) = match kind {
            Kind::Sphere(n) => {
                let mut p = vec![0.0; n];
                p[0] = 1.0;
                let b = tangent_basis(&p);
                (p, b)
            }
            _ => (Vec::new(), Vec::new()),
        };
        Ok(ManifoldKind { kind, chart, pole, basis })
    }

    pub fn sphere(n: usize) -> Result<Self> {
        Self::new(Kind::Sphere(n), ChartKind::PoleLog)
    }

    pub fn sphere_with_pole(n: usize, pole: &[f64]) -> Result<Self> {
        let mut m = Self::sphere(n)?;
        if pole.len() != n {
            return Err(Error::config("pole", format!("pole has {} entries, expected {n}", pole.len())));
        }
        let norm = pole.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::config("pole", "pole must be a nonzero finite vector"));
        }
        m.pole = pole.iter().map(|v| v / norm).collect();
        m.basis = tangent_basis(&m.pole);
        Ok(m)
    }

    pub fn positive_reals() -> Self {
        Self::new(Kind::PositiveReals, ChartKind::ScalarLog).expect("valid")
    }

    pub fn spd(n: usize, chart: ChartKind) -> Result<Self> {
        Self::new(Kind::Spd(n), chart)
    }

    /// Same manifold under another chart (the sphere keeps its pole).
    pub fn with_chart(&self, chart: ChartKind) -> Result<Self> {
        let mut m = Self::new(self.kind, chart)?;
        m.pole.clone_from(&self.pole);
        m.basis.clone_from(&self.basis);
        Ok(m)
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn chart(&self) -> ChartKind {
        self.chart
    }

    pub fn pole(&self) -> &[f64] {
        &self.pole
    }

    pub fn tangent_basis(&self) -> &[f64] {
        &self.basis
    }

    /// Intrinsic dimension `m`.
    pub fn dim(&self) -> usize {
        match self.kind {
            Kind::Sphere(n) => n - 1,
            Kind::PositiveReals => 1,
            Kind::Spd(n) => n * (n + 1) / 2,
        }
    }

    pub fn ambient_len(&self) -> usize {
        match self.kind {
            Kind::Sphere(n) => n,
            Kind::PositiveReals => 1,
            Kind::Spd(n) => n * n,
        }
    }

    /// Number of raw parameters of a group element.
    pub fn group_dim(&self) -> usize {
        match self.kind {
            Kind::Sphere(n) => linalg::skew_dim(n - 1),
            Kind::PositiveReals => 1,
            Kind::Spd(n) => linalg::skew_dim(n),
        }
    }

    /// Checks the point invariants of an ambient representation.
    pub fn validate_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.ambient_len() {
            return Err(Error::InvalidPoint(format!("expected {} ambient values, got {}", self.ambient_len(), x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPoint("non-finite entry".into()));
        }
        match self.kind {
            Kind::Sphere(_) => {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() >= TOL.point_norm {
                    return Err(Error::InvalidPoint(format!("sphere point has norm {norm}")));
                }
            }
            Kind::PositiveReals => {
                if !(x[0] > 0.0) {
                    return Err(Error::InvalidPoint(format!("positive-real point {} is not positive", x[0])));
                }
            }
            Kind::Spd(n) => {
                let m = Mat::from_vec(n, n, x.to_vec());
                let asym = m.asymmetry();
                if asym >= TOL.symmetry {
                    return Err(Error::InvalidPoint(format!("matrix asymmetry {asym:e}")));
                }
                let (lambda, _) = linalg::sym_eigen(&m)?;
                if !(lambda[0] > TOL.min_eigenvalue) {
                    return Err(Error::InvalidPoint(format!("smallest eigenvalue {:e}", lambda[0])));
                }
            }
        }
        Ok(())
    }

    /// Geodesic distance.
    pub fn distance<T: Scalar>(&self, x: &[T], y: &[T]) -> Result<T> {
        self.validate_point(&values(x))?;
        self.validate_point(&values(y))?;
        // a fixed argument order keeps the result bitwise symmetric
        let (x, y) = if values(x).iter().map(|v| v.to_bits()).lt(values(y).iter().map(|v| v.to_bits())) {
            (x, y)
        } else {
            (y, x)
        };
        match self.kind {
            Kind::Sphere(_) => {
                let dot = T::dot(x, y).value();
                if dot.abs() > 1.0 + TOL.arccos_window {
                    return Err(Error::Domain(format!("cosine {dot} outside [-1, 1]")));
                }
                let diff: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a - b).collect();
                let sum: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a + b).collect();
                let a = T::dot(&diff, &diff);
                let b = T::dot(&sum, &sum);
                if a.value() == 0.0 {
                    return Ok(T::zero());
                }
                Ok(T::c(2.0) * a.sqrt().atan2(b.sqrt()))
            }
            Kind::PositiveReals => Ok((x[0].ln() - y[0].ln()).abs()),
            Kind::Spd(n) => {
                if x.iter().zip(y).all(|(a, b)| a.value() == b.value()) {
                    return Ok(T::zero());
                }
                let l = linalg::cholesky(&Mat::from_vec(n, n, x.to_vec()))?;
                let ym = Mat::from_vec(n, n, y.to_vec());
                // W = L⁻¹ Y, then Z = L⁻¹ Wᵀ = L⁻¹ Y L⁻ᵀ
                let mut w = Mat::zeros(n, n);
                let yt = ym.transpose();
                for j in 0..n {
                    let col = linalg::forward_substitute(&l, yt.row(j));
                    for i in 0..n {
                        w[(i, j)] = col[i];
                    }
                }
                let mut z = Mat::zeros(n, n);
                for j in 0..n {
                    let col = linalg::forward_substitute(&l, w.row(j));
                    for i in 0..n {
                        z[(i, j)] = col[i];
                    }
                }
                let (lambda, _) = linalg::sym_eigen(&z)?;
                Ok(lambda.iter().map(|&l| l.ln() * l.ln()).sum::<T>().sqrt())
            }
        }
    }

    /// Φ(x).
    pub fn chart_forward<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.ambient_len() {
            return Err(Error::Shape(format!("expected {} ambient values, got {}", self.ambient_len(), x.len())));
        }
        match self.chart {
            ChartKind::PoleLog => {
                let n = self.pole.len();
                let pole: Vec<T> = self.pole.iter().map(|&p| T::c(p)).collect();
                let c = T::dot(&pole, x);
                let t: Vec<T> = self
                    .basis
                    .chunks(n)
                    .map(|b| T::dot(&b.iter().map(|&v| T::c(v)).collect::<Vec<_>>(), x))
                    .collect();
                let s2 = T::dot(&t, &t);
                let (s2v, cv) = (s2.value(), c.value());
                let theta = s2v.sqrt().atan2(cv);
                if theta >= PI - TOL.cut_locus_margin {
                    return Err(Error::CutLocus { distance: theta });
                }
                // θ/s, with the series of atan(s/c)/s near the pole
                let factor = if s2v < 1e-8 * cv * cv && cv > 0.0 {
                    let q = s2 / (c * c);
                    (T::one() - q / T::c(3.0) + q * q / T::c(5.0)) / c
                } else {
                    let s = s2.sqrt();
                    s.atan2(c) / s
                };
                Ok(t.into_iter().map(|v| v * factor).collect())
            }
            ChartKind::ScalarLog => Ok(vec![x[0].ln()]),
            ChartKind::Cholesky => {
                let n = self.kind.n();
                let l = linalg::cholesky(&Mat::from_vec(n, n, x.to_vec()))?;
                Ok(flatten_lower(&l))
            }
            ChartKind::MatrixLog => {
                let n = self.kind.n();
                let v = T::sym_function(&Mat::from_vec(n, n, x.to_vec()), SymFn::Log)?;
                Ok(flatten_sym(&v))
            }
        }
    }

    /// Φ⁻¹(v).
    pub fn chart_inverse<T: Scalar>(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.dim() {
            return Err(Error::Shape(format!("expected {} chart coordinates, got {}", self.dim(), v.len())));
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("chart coordinate".into()));
        }
        match self.chart {
            ChartKind::PoleLog => {
                let n = self.pole.len();
                let r2 = T::dot(v, v);
                let r2v = r2.value();
                if r2v.sqrt() >= PI {
                    return Err(Error::Domain(format!("pole-log coordinates of norm {} reach the cut locus", r2v.sqrt())));
                }
                let (cos_r, sinc) = if r2v < 1e-6 {
                    let r4 = r2 * r2;
                    (
                        T::one() - r2 / T::c(2.0) + r4 / T::c(24.0) - r4 * r2 / T::c(720.0),
                        T::one() - r2 / T::c(6.0) + r4 / T::c(120.0) - r4 * r2 / T::c(5040.0),
                    )
                } else {
                    let r = r2.sqrt();
                    (r.cos(), r.sin() / r)
                };
                let mut x: Vec<T> = self.pole.iter().map(|&p| T::c(p) * cos_r).collect();
                for (k, b) in self.basis.chunks(n).enumerate() {
                    let w = v[k] * sinc;
                    for (xi, &bi) in x.iter_mut().zip(b) {
                        *xi += w * T::c(bi);
                    }
                }
                Ok(x)
            }
            ChartKind::ScalarLog => Ok(vec![v[0].exp()]),
            ChartKind::Cholesky => {
                let n = self.kind.n();
                let l = unflatten_lower(n, v);
                for i in 0..n {
                    if !(l[(i, i)].value() > 0.0) {
                        return Err(Error::Domain(format!("cholesky coordinate diagonal {} is not positive", l[(i, i)].value())));
                    }
                }
                Ok(gram_lower(&l).into_data())
            }
            ChartKind::MatrixLog => {
                let n = self.kind.n();
                let m = unflatten_sym(n, v);
                Ok(symmetrized(T::sym_function(&m, SymFn::Exp)?).into_data())
            }
        }
    }

    /// Raises a chart-domain error when `v` lies outside the layer-safe part of
    /// the chart image.
    pub fn check_chart_domain<T: Scalar>(&self, v: &[T]) -> Result<()> {
        if let Some(bad) = v.iter().find(|c| !c.is_finite()) {
            return Err(Error::ChartDomain { layer: None, msg: format!("non-finite chart coordinate {}", bad.value()) });
        }
        match self.chart {
            ChartKind::PoleLog => {
                let r = v.iter().map(|c| c.value() * c.value()).sum::<f64>().sqrt();
                if r >= PI - TOL.cut_locus_margin {
                    return Err(Error::ChartDomain {
                        layer: None,
                        msg: format!("pole-log norm {r:.6} outside the injectivity ball"),
                    });
                }
            }
            ChartKind::Cholesky => {
                let n = self.kind.n();
                let mut k = 0;
                for i in 0..n {
                    k += i;
                    let d = v[k].value();
                    if !(d > 0.0) {
                        return Err(Error::ChartDomain { layer: None, msg: format!("cholesky diagonal {d:e} is not positive") });
                    }
                    k += 1;
                }
            }
            ChartKind::ScalarLog | ChartKind::MatrixLog => {}
        }
        Ok(())
    }

    /// Log density, in this chart's coordinates, of the reference measure
    /// shared by all charts of the manifold (Riemannian volume on the sphere,
    /// Lebesgue measure on the symmetric entries for SPD).
    pub fn log_volume_density(&self, v: &[f64]) -> Result<f64> {
        self.check_chart_domain(v)?;
        match self.chart {
            ChartKind::ScalarLog => Ok(0.0),
            ChartKind::PoleLog => {
                let r = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                let m = self.dim() as f64;
                if r < 1e-8 {
                    return Ok(0.0);
                }
                Ok((m - 1.0) * (r.sin() / r).ln())
            }
            ChartKind::Cholesky => {
                let n = self.kind.n();
                let l = unflatten_lower(n, v);
                Ok(n as f64 * LN_2 + (0..n).map(|i| (n - i) as f64 * l[(i, i)].ln()).sum::<f64>())
            }
            ChartKind::MatrixLog => {
                let n = self.kind.n();
                let (mu, _) = linalg::sym_eigen(&unflatten_sym(n, v))?;
                let mut acc = 0.0;
                for i in 0..n {
                    for j in i..n {
                        acc += exp_divided_difference(mu[i], mu[j]).ln();
                    }
                }
                Ok(acc - (n * (n - 1)) as f64 / 4.0 * LN_2)
            }
        }
    }

    /// Group element from unconstrained parameters: `exp(raw)` on the positive
    /// reals and a Cayley rotation of the skew matrix built from `raw` otherwise.
    pub fn group_from_params<T: Scalar>(&self, raw: &[T]) -> Result<GroupElement<T>> {
        if raw.len() != self.group_dim() {
            return Err(Error::Shape(format!("group element needs {} parameters, got {}", self.group_dim(), raw.len())));
        }
        Ok(match self.kind {
            Kind::PositiveReals => GroupElement::Scale(raw[0].exp()),
            Kind::Sphere(n) => GroupElement::Cayley(linalg::skew_from_params(n - 1, raw)),
            Kind::Spd(n) => GroupElement::Cayley(linalg::skew_from_params(n, raw)),
        })
    }

    pub fn group_identity<T: Scalar>(&self) -> GroupElement<T> {
        match self.kind {
            Kind::PositiveReals => GroupElement::Scale(T::one()),
            Kind::Sphere(n) => GroupElement::Rotation(Mat::identity(n - 1)),
            Kind::Spd(n) => GroupElement::Rotation(Mat::identity(n)),
        }
    }

    fn rotation_size(&self) -> usize {
        match self.kind {
            Kind::Sphere(n) => n - 1,
            Kind::Spd(n) => n,
            Kind::PositiveReals => 0,
        }
    }

    /// Checks that `g` belongs to this manifold's group.
    pub fn validate_group<T: Scalar>(&self, g: &GroupElement<T>) -> Result<()> {
        match (g, self.kind) {
            (GroupElement::Scale(s), Kind::PositiveReals) => {
                if !(s.value() > 0.0) || !s.is_finite() {
                    return Err(Error::Invariant(format!("scale element {} is not positive", s.value())));
                }
                Ok(())
            }
            (GroupElement::Rotation(r), Kind::Sphere(_) | Kind::Spd(_)) => {
                if r.rows() != self.rotation_size() || r.cols() != self.rotation_size() {
                    return Err(Error::Shape(format!("rotation of size {} for {:?}", r.rows(), self.kind)));
                }
                let r64 = r.map(|v| v.value());
                if r64.orthogonality_defect() >= TOL.reprojection {
                    return Err(Error::Invariant("rotation is not orthogonal".into()));
                }
                let (ld, sign) = linalg::lu(&r64)?.log_abs_det();
                if sign < 0.0 || ld.abs() >= TOL.reprojection {
                    return Err(Error::Invariant("rotation does not have determinant 1".into()));
                }
                Ok(())
            }
            (GroupElement::Cayley(a), Kind::Sphere(_) | Kind::Spd(_)) => {
                if a.rows() != self.rotation_size() || a.cols() != self.rotation_size() {
                    return Err(Error::Shape(format!("generator of size {} for {:?}", a.rows(), self.kind)));
                }
                Ok(())
            }
            _ => Err(Error::Shape(format!("group element does not act on {:?}", self.kind))),
        }
    }

    /// `g · x` on ambient points.
    pub fn group_apply<T: Scalar>(&self, g: &GroupElement<T>, x: &[T]) -> Result<Vec<T>> {
        self.validate_group(g)?;
        self.validate_point(&values(x))?;
        let out = match self.kind {
            Kind::PositiveReals => match g {
                GroupElement::Scale(s) => vec![*s * x[0]],
                _ => unreachable!("validated"),
            },
            Kind::Sphere(n) => {
                let basis: Vec<Vec<T>> = self.basis.chunks(n).map(|b| b.iter().map(|&v| T::c(v)).collect()).collect();
                let pole: Vec<T> = self.pole.iter().map(|&p| T::c(p)).collect();
                let t: Vec<T> = basis.iter().map(|b| T::dot(b, x)).collect();
                let rt = g.rotate(&t)?;
                let c = T::dot(&pole, x);
                let mut y: Vec<T> = pole.iter().map(|&p| p * c).collect();
                for (b, &w) in basis.iter().zip(&rt) {
                    for (yi, &bi) in y.iter_mut().zip(b) {
                        *yi += w * bi;
                    }
                }
                let norm = T::dot(&y, &y).sqrt();
                let drift = (norm.value() - 1.0).abs();
                if drift >= TOL.reprojection {
                    return Err(Error::Invariant(format!("sphere action drifted off the manifold by {drift:e}")));
                }
                y.into_iter().map(|v| v / norm).collect()
            }
            Kind::Spd(n) => {
                let q = g.matrix()?;
                let xm = Mat::from_vec(n, n, x.to_vec());
                let y = q.matmul(&xm).matmul(&q.transpose());
                let drift = y.asymmetry();
                if drift >= TOL.reprojection {
                    return Err(Error::Invariant(format!("conjugation drifted off the manifold by {drift:e}")));
                }
                symmetrized(y).into_data()
            }
        };
        Ok(out)
    }

    /// The induced action of `g` on chart coordinates, with the log-determinant
    /// of its chart Jacobian at `v`.
    pub fn chart_act<T: Scalar>(&self, g: &GroupElement<T>, v: &[T]) -> Result<(Vec<T>, T)> {
        match (self.chart, g) {
            (ChartKind::ScalarLog, GroupElement::Scale(s)) => Ok((vec![v[0] + s.ln()], T::zero())),
            (ChartKind::PoleLog, _) => Ok((g.rotate(v)?, T::zero())),
            (ChartKind::MatrixLog, _) => {
                let n = self.kind.n();
                let q = g.matrix()?;
                let m = unflatten_sym(n, v);
                let out = q.matmul(&m).matmul(&q.transpose());
                Ok((flatten_sym(&symmetrized(out)), T::zero()))
            }
            (ChartKind::Cholesky, _) => {
                let n = self.kind.n();
                let q = g.matrix()?;
                let l = unflatten_lower(n, v);
                let x = gram_lower(&l);
                let y = symmetrized(q.matmul(&x).matmul(&q.transpose()));
                let l2 = linalg::cholesky(&y).map_err(|e| Error::ChartDomain { layer: None, msg: e.to_string() })?;
                let mut ld = T::zero();
                for i in 0..n {
                    ld += T::c((n - i) as f64) * (l[(i, i)].ln() - l2[(i, i)].ln());
                }
                Ok((flatten_lower(&l2), ld))
            }
            _ => Err(Error::Shape(format!("group element does not act on the {:?} chart", self.chart))),
        }
    }

    /// A random valid point, drawn by pushing a scaled standard normal through
    /// the chart (clipped into the pole-log ball).
    pub fn random_point(&self, rng: &mut impl Rng, spread: f64) -> Vec<f64> {
        loop {
            let mut v: Vec<f64> = (0..self.dim()).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect();
            if self.chart == ChartKind::Cholesky {
                let n = self.kind.n();
                let mut k = 0;
                for i in 0..n {
                    k += i;
                    v[k] = (v[k] * 0.5).exp();
                    k += 1;
                }
            }
            if self.chart == ChartKind::PoleLog {
                let r = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                let cap = 0.9 * (PI - TOL.cut_locus_margin);
                if r > cap {
                    v.iter_mut().for_each(|c| *c *= cap / r);
                }
            }
            if let Ok(x) = self.chart_inverse(&v) {
                if self.validate_point(&x).is_ok() {
                    return x;
                }
            }
        }
    }
}

/// Elements of the isometry groups acting on each manifold.
#[derive(Clone, Debug, PartialEq)]
pub enum GroupElement<T> {
    /// Positive multiplicative factor on the positive reals.
    Scale(T),
    /// Explicit rotation matrix.
    Rotation(Mat<T>),
    /// Rotation given by the Cayley transform of a skew-symmetric generator.
    Cayley(Mat<T>),
}

impl<T: Scalar> GroupElement<T> {
    pub fn inverse(&self) -> Self {
        match self {
            GroupElement::Scale(s) => GroupElement::Scale(s.recip()),
            GroupElement::Rotation(r) => GroupElement::Rotation(r.transpose()),
            GroupElement::Cayley(a) => GroupElement::Cayley(a.scale(-T::one())),
        }
    }

    /// The rotation as an explicit matrix.
    pub fn matrix(&self) -> Result<Mat<T>> {
        match self {
            GroupElement::Rotation(r) => Ok(r.clone()),
            GroupElement::Cayley(a) => linalg::cayley(a),
            GroupElement::Scale(_) => Err(Error::Shape("a scale element has no rotation matrix".into())),
        }
    }

    fn rotate(&self, v: &[T]) -> Result<Vec<T>> {
        match self {
            GroupElement::Rotation(r) => Ok(r.matvec(v)),
            GroupElement::Cayley(a) => {
                if a.rows() == 0 {
                    return Ok(v.to_vec());
                }
                linalg::cayley_apply(a, v)
            }
            GroupElement::Scale(_) => Err(Error::Shape("a scale element cannot rotate".into())),
        }
    }
}

/// log|det| of the Jacobian of `dst ∘ src⁻¹` at `src(at)`.
pub fn chart_transition_logdet(src: &ManifoldKind, dst: &ManifoldKind, at: &[f64]) -> Result<f64> {
    if src.kind != dst.kind {
        return Err(Error::Shape(format!("chart transition between {:?} and {:?}", src.kind, dst.kind)));
    }
    if src == dst {
        return Ok(0.0);
    }
    src.validate_point(at)?;
    let vs = src.chart_forward(at)?;
    let vd = dst.chart_forward(at)?;
    Ok(src.log_volume_density(&vs)? - dst.log_volume_density(&vd)?)
}

/// `(e^a − e^b)/(a − b)`, or `e^a` on the diagonal.
fn exp_divided_difference(a: f64, b: f64) -> f64 {
    let d = a - b;
    if d.abs() < 1e-10 * a.abs().max(b.abs()).max(1.0) {
        (0.5 * (a + b)).exp()
    } else {
        b.exp() * d.exp_m1() / d
    }
}

/// Lower triangle, row-major: `L00, L10, L11, L20, …`.
pub fn flatten_lower<T: Scalar>(l: &Mat<T>) -> Vec<T> {
    let n = l.rows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            out.push(l[(i, j)]);
        }
    }
    out
}

pub fn unflatten_lower<T: Scalar>(n: usize, v: &[T]) -> Mat<T> {
    let mut l = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = v[k];
            k += 1;
        }
    }
    l
}

/// Upper triangle, row-major, off-diagonals scaled by √2 so that the
/// flattening is an isometry of the Frobenius inner product.
pub fn flatten_sym<T: Scalar>(m: &Mat<T>) -> Vec<T> {
    let n = m.rows();
    let s = T::c(SQRT_2);
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(if i == j { m[(i, i)] } else { m[(i, j)] * s });
        }
    }
    out
}

pub fn unflatten_sym<T: Scalar>(n: usize, v: &[T]) -> Mat<T> {
    let s = T::c(SQRT_2);
    let mut m = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                let e = v[k] / s;
                m[(i, j)] = e;
                m[(j, i)] = e;
            }
            k += 1;
        }
    }
    m
}

/// `L Lᵀ`, exactly symmetric.
fn gram_lower<T: Scalar>(l: &Mat<T>) -> Mat<T> {
    let n = l.rows();
    let mut x = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = T::dot(&l.row(i)[..=j], &l.row(j)[..=j]);
            x[(i, j)] = s;
            x[(j, i)] = s;
        }
    }
    x
}

fn symmetrized<T: Scalar>(mut m: Mat<T>) -> Mat<T> {
    let n = m.rows();
    for i in 0..n {
        for j in 0..i {
            let s = (m[(i, j)] + m[(j, i)]) * T::c(0.5);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    m
}

/// `−½ Σ [(v−μ)²/σ² + log σ² + log 2π]` for a diagonal Gaussian.
pub fn diag_gaussian_logpdf<T: Scalar>(v: &[T], mean: &[T], logvar: &[T]) -> T {
    let ln2pi = T::c((2.0 * PI).ln());
    let mut acc = T::zero();
    for ((&x, &m), &lv) in v.iter().zip(mean).zip(logvar) {
        let d = x - m;
        acc += d * d * (-lv).exp() + lv + ln2pi;
    }
    acc * T::c(-0.5)
}

/// `log N(v; 0, I)`.
pub fn standard_gaussian_logpdf<T: Scalar>(v: &[T]) -> T {
    let ln2pi = T::c((2.0 * PI).ln());
    (T::dot(v, v) + ln2pi * T::c(v.len() as f64)) * T::c(-0.5)
}

/// A Gaussian in chart coordinates pushed onto the manifold.
#[derive(Clone, Debug)]
pub struct ManifoldGaussian {
    manifold: ManifoldKind,
    mean_chart: Vec<f64>,
    cov: Mat<f64>,
    chol: Mat<f64>,
    log_det: f64,
}

impl ManifoldGaussian {
    /// `mean` is an ambient point.
    pub fn new(manifold: ManifoldKind, mean: &[f64], cov: Mat<f64>) -> Result<Self> {
        manifold.validate_point(mean)?;
        let mean_chart = manifold.chart_forward(mean)?;
        Self::from_chart(manifold, mean_chart, cov)
    }

    pub fn from_chart(manifold: ManifoldKind, mean_chart: Vec<f64>, cov: Mat<f64>) -> Result<Self> {
        let m = manifold.dim();
        if mean_chart.len() != m || cov.rows() != m || cov.cols() != m {
            return Err(Error::Shape(format!("gaussian of dimension {m} with a {}x{} covariance", cov.rows(), cov.cols())));
        }
        if cov.asymmetry() > TOL.symmetry * cov.frobenius().max(1.0) {
            return Err(Error::SingularCovariance(0.0));
        }
        let chol = linalg::cholesky(&cov).map_err(|_| Error::SingularCovariance(0.0))?;
        let log_det = 2.0 * (0..m).map(|i| chol[(i, i)].ln()).sum::<f64>();
        Ok(ManifoldGaussian { manifold, mean_chart, cov, chol, log_det })
    }

    /// Standard Gaussian at the chart origin.
    pub fn standard(manifold: ManifoldKind) -> Self {
        let m = manifold.dim();
        Self::from_chart(manifold, vec![0.0; m], Mat::identity(m)).expect("identity covariance")
    }

    pub fn diagonal(manifold: ManifoldKind, mean_chart: Vec<f64>, variances: &[f64]) -> Result<Self> {
        Self::from_chart(manifold, mean_chart, Mat::diag(variances))
    }

    pub fn manifold(&self) -> &ManifoldKind {
        &self.manifold
    }

    pub fn mean_chart(&self) -> &[f64] {
        &self.mean_chart
    }

    pub fn covariance(&self) -> &Mat<f64> {
        &self.cov
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn logpdf_chart(&self, v: &[f64]) -> Result<f64> {
        if self.log_det < TOL.singular_det.ln() {
            return Err(Error::SingularCovariance(self.log_det.exp()));
        }
        let d: Vec<f64> = v.iter().zip(&self.mean_chart).map(|(a, b)| a - b).collect();
        let w = linalg::forward_substitute(&self.chol, &d);
        let quad: f64 = w.iter().map(|x| x * x).sum();
        let m = self.mean_chart.len() as f64;
        Ok(-0.5 * quad - 0.5 * m * (2.0 * PI).ln() - 0.5 * self.log_det)
    }

    /// Density of an ambient point, with respect to Lebesgue measure in chart
    /// coordinates.
    pub fn logpdf(&self, z: &[f64]) -> Result<f64> {
        self.manifold.validate_point(z)?;
        let v = self.manifold.chart_forward(z)?;
        self.logpdf_chart(&v)
    }

    /// Draws chart coordinates, rejecting draws outside the chart domain.
    pub fn sample_chart(&self, rng: &mut impl Rng) -> Result<Vec<f64>> {
        for _ in 0..TOL.max_rejections {
            let eps: Vec<f64> = (0..self.mean_chart.len()).map(|_| rng.sample(StandardNormal)).collect();
            let lv = self.chol.matvec(&eps);
            let v: Vec<f64> = self.mean_chart.iter().zip(&lv).map(|(a, b)| a + b).collect();
            if self.manifold.check_chart_domain(&v).is_ok() {
                return Ok(v);
            }
        }
        Err(Error::RejectionExhausted(TOL.max_rejections))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let v = self.sample_chart(rng)?;
        self.manifold.chart_inverse(&v)
    }

    pub fn sample_seeded(&self, seed: u64) -> Result<Vec<f64>> {
        self.sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize, chart: ChartKind) -> ManifoldKind {
        ManifoldKind::spd(n, chart).unwrap()
    }

    #[test]
    fn distance_examples() {
        let r = ManifoldKind::positive_reals();
        assert_eq!(r.distance(&[2.0], &[2.0]).unwrap(), 0.0);
        let s = ManifoldKind::sphere(3).unwrap();
        let d = s.distance(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!((d - PI / 2.0).abs() < 1e-15);
        let p = spd(2, ChartKind::MatrixLog);
        let d = p.distance(&[1.0, 0.0, 0.0, 1.0], &[4.0, 0.0, 0.0, 4.0]).unwrap();
        assert!((d - SQRT_2 * 4f64.ln()).abs() < 1e-12, "{d}");
    }

    #[test]
    fn chart_examples() {
        let r = ManifoldKind::positive_reals();
        assert!((r.chart_forward(&[std::f64::consts::E]).unwrap()[0] - 1.0).abs() < 1e-15);
        assert_eq!(r.chart_inverse(&[0.0]).unwrap(), vec![1.0]);
        let s = ManifoldKind::sphere(4).unwrap();
        assert_eq!(s.chart_forward(&[1.0, 0.0, 0.0, 0.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(s.chart_inverse(&[0.0; 3]).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        let c = spd(2, ChartKind::Cholesky);
        assert_eq!(c.chart_forward(&[1.0, 0.0, 0.0, 1.0]).unwrap(), vec![1.0, 0.0, 1.0]);
        assert_eq!(c.chart_inverse(&[1.0, 0.0, 1.0]).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cut_locus_rejected() {
        let s = ManifoldKind::sphere(3).unwrap();
        assert!(matches!(s.chart_forward(&[-1.0, 0.0, 0.0]), Err(Error::CutLocus { .. })));
        assert!(s.chart_inverse(&[PI, 0.0]).is_err());
    }

    #[test]
    fn tangent_basis_orthonormal() {
        let pole = [1.0, 1.0, 1.0, 1.0, 1.0];
        let m = ManifoldKind::sphere_with_pole(5, &pole).unwrap();
        let mut all = m.pole().to_vec();
        all.extend_from_slice(m.tangent_basis());
        let q = Mat::from_vec(5, 5, all);
        assert!(q.orthogonality_defect() < 1e-14);
    }

    #[test]
    fn group_examples() {
        let r = ManifoldKind::positive_reals();
        assert_eq!(r.group_apply(&GroupElement::Scale(2.0), &[3.0]).unwrap(), vec![6.0]);
        assert_eq!(GroupElement::Scale(4.0).inverse(), GroupElement::Scale(0.25));
        let s = ManifoldKind::sphere(3).unwrap();
        let x = [0.6, 0.0, 0.8];
        assert_eq!(s.group_apply(&s.group_identity(), &x).unwrap(), x.to_vec());
    }

    #[test]
    fn transition_identity_and_spd_value() {
        let c = spd(2, ChartKind::Cholesky);
        let l = spd(2, ChartKind::MatrixLog);
        let id = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(chart_transition_logdet(&c, &c, &id).unwrap(), 0.0);
        let v = chart_transition_logdet(&c, &l, &id).unwrap();
        assert!((v - 2.5 * LN_2).abs() < 1e-12, "{v}");
    }

    #[test]
    fn gaussian_at_mean() {
        let s = ManifoldKind::sphere(4).unwrap();
        let g = ManifoldGaussian::standard(s);
        let lp = g.logpdf(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((lp + 1.5 * (2.0 * PI).ln()).abs() < 1e-14);
        let tiny = ManifoldGaussian::diagonal(ManifoldKind::positive_reals(), vec![0.0], &[1e-40]).unwrap();
        assert!(matches!(tiny.logpdf(&[1.0]), Err(Error::SingularCovariance(_))));
    }

    #[test]
    fn spec_round_trip_serde() {
        let m = ManifoldKind::sphere_with_pole(3, &[0.0, 0.0, 2.0]).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: ManifoldKind = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
        let bad: std::result::Result<ManifoldKind, _> = serde_json::from_str(r#"{"manifold":"spd","n":3,"chart":"pole_log"}"#);
        assert!(bad.is_err());
    }
}
