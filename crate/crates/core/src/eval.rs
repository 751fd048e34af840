//! Reconstruction error, confusion matrices, voxelwise permutation tests,
//! IoU of significant sets and the Fréchet-mean baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::{Kind, ManifoldKind};
use crate::linalg::{self, Mat, SymFn};
use crate::train::derive_seed;

fn same_shape(a: &Field, b: &Field) -> Result<()> {
    if a.manifold().kind() != b.manifold().kind() || a.grid() != b.grid() || a.channels() != b.channels() {
        return Err(Error::Shape(format!(
            "fields differ: {:?} {:?}×{} vs {:?} {:?}×{}",
            a.manifold().kind(),
            a.grid(),
            a.channels(),
            b.manifold().kind(),
            b.grid(),
            b.channels()
        )));
    }
    Ok(())
}

/// Mean geodesic distance over all (voxel, channel) entries.
pub fn reconstruction_error(generated: &Field, reference: &Field) -> Result<f64> {
    same_shape(generated, reference)?;
    let m = reference.manifold();
    let mut total = 0.0;
    for (a, b) in generated.points().zip(reference.points()) {
        total += m.distance(a, b)?;
    }
    Ok(total / reference.len() as f64)
}

/// Entry `(i, j)` is the reconstruction error of `generated[i]` against
/// `references[j]`.
pub fn confusion_matrix(generated: &[Field], references: &[Field]) -> Result<Vec<Vec<f64>>> {
    if generated.len() != references.len() || generated.is_empty() {
        return Err(Error::Shape(format!("{} generated vs {} references", generated.len(), references.len())));
    }
    generated.par_iter().map(|g| references.iter().map(|r| reconstruction_error(g, r)).collect()).collect()
}

/// Fraction of rows whose entry in column `perm[i]` is the (weak) row
/// minimum.
pub fn dominance_against(matrix: &[Vec<f64>], perm: &[usize]) -> f64 {
    if matrix.is_empty() {
        return 0.0;
    }
    let hits = matrix
        .iter()
        .zip(perm)
        .filter(|(row, &j)| {
            let d = row[j];
            row.iter().all(|&v| d <= v)
        })
        .count();
    hits as f64 / matrix.len() as f64
}

pub fn dominance(matrix: &[Vec<f64>]) -> f64 {
    let id: Vec<usize> = (0..matrix.len()).collect();
    dominance_against(matrix, &id)
}

/// Elementwise mean of equally shaped matrices.
pub fn mean_matrix(runs: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let first = runs.first().ok_or_else(|| Error::Shape("no matrices to average".into()))?;
    let mut out = vec![vec![0.0; first.first().map_or(0, |r| r.len())]; first.len()];
    for m in runs {
        if m.len() != out.len() || m.iter().any(|r| r.len() != out[0].len()) {
            return Err(Error::Shape("matrices to average differ in shape".into()));
        }
        for (o, r) in out.iter_mut().zip(m) {
            o.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
    }
    let k = runs.len() as f64;
    out.iter_mut().flatten().for_each(|v| *v /= k);
    Ok(out)
}

fn spd_sqrt_pair(p: &Mat<f64>) -> Result<(Mat<f64>, Mat<f64>)> {
    let (ev, u) = linalg::sym_eigen(p)?;
    if ev.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::Domain("matrix is not positive definite".into()));
    }
    let s: Vec<f64> = ev.iter().map(|e| e.sqrt()).collect();
    let si: Vec<f64> = s.iter().map(|e| 1.0 / e).collect();
    Ok((linalg::reconstruct(&u, &s), linalg::reconstruct(&u, &si)))
}

fn sym(m: Mat<f64>) -> Mat<f64> {
    m.add(&m.transpose()).scale(0.5)
}

/// Karcher mean under the manifold's own metric.
pub fn frechet_mean(manifold: &ManifoldKind, points: &[&[f64]]) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::Shape("Fréchet mean of no points".into()));
    }
    let k = points.len() as f64;
    match manifold.kind() {
        Kind::PositiveReals => Ok(vec![(points.iter().map(|p| p[0].ln()).sum::<f64>() / k).exp()]),
        Kind::Sphere(n) => {
            let mut mu: Vec<f64> = (0..n).map(|i| points.iter().map(|p| p[i]).sum::<f64>()).collect();
            let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-12) {
                mu = points[0].to_vec();
            } else {
                mu.iter_mut().for_each(|v| *v /= norm);
            }
            for _ in 0..100 {
                let mut step = vec![0.0; n];
                for p in points {
                    let c: f64 = mu.iter().zip(*p).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
                    let theta = c.acos();
                    let f = if theta < 1e-12 { 1.0 } else { theta / theta.sin() };
                    for i in 0..n {
                        step[i] += f * (p[i] - c * mu[i]) / k;
                    }
                }
                let r = step.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r < 1e-14 {
                    break;
                }
                let (s, c) = r.sin_cos();
                for i in 0..n {
                    mu[i] = c * mu[i] + s * step[i] / r;
                }
                let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
                mu.iter_mut().for_each(|v| *v /= norm);
            }
            Ok(mu)
        }
        Kind::Spd(n) => {
            let mats: Vec<Mat<f64>> = points.iter().map(|p| Mat::from_vec(n, n, p.to_vec())).collect();
            // start from the log-Euclidean mean
            let mut acc = Mat::zeros(n, n);
            for m in &mats {
                acc = acc.add(&linalg::sym_function_eigen(m, SymFn::Log)?);
            }
            let mut mu = sym(linalg::sym_function_eigen(&acc.scale(1.0 / k), SymFn::Exp)?);
            for _ in 0..100 {
                let (h, hi) = spd_sqrt_pair(&mu)?;
                let mut t = Mat::zeros(n, n);
                for m in &mats {
                    t = t.add(&linalg::sym_function_eigen(&sym(hi.matmul(m).matmul(&hi)), SymFn::Log)?);
                }
                let t = t.scale(1.0 / k);
                let done = t.frobenius() < 1e-13;
                mu = sym(h.matmul(&linalg::sym_function_eigen(&sym(t), SymFn::Exp)?).matmul(&h));
                if done {
                    break;
                }
            }
            Ok(mu.into_data())
        }
    }
}

/// Per-(voxel, channel) Fréchet mean of a set of fields.
pub fn frechet_mean_field(fields: &[Field]) -> Result<Field> {
    let first = fields.first().ok_or_else(|| Error::Shape("mean of no fields".into()))?;
    for f in fields {
        same_shape(first, f)?;
    }
    let m = first.manifold().clone();
    let entries: Vec<Vec<f64>> = (0..first.len())
        .into_par_iter()
        .map(|e| {
            let pts: Vec<&[f64]> = fields.iter().map(|f| f.point(e / f.channels(), e % f.channels())).collect();
            frechet_mean(&m, &pts)
        })
        .collect::<Result<_>>()?;
    Field::from_fn(m, first.grid().to_vec(), first.channels(), |loc, c| entries[loc * first.channels() + c].clone())
}

fn content_hash(f: &Field) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in f.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Per-voxel chart vectors (all channels concatenated) of each subject.
fn voxel_vectors(fields: &[&Field]) -> Result<Vec<Vec<f64>>> {
    fields.iter().map(|f| f.to_chart().map(|c| c.coords)).collect()
}

fn mean_difference_norms(data: &[Vec<f64>], in_first: &[bool], width: usize, locs: usize) -> Vec<f64> {
    let n1 = in_first.iter().filter(|&&b| b).count() as f64;
    let n2 = in_first.len() as f64 - n1;
    let len = width * locs;
    let mut s1 = vec![0.0; len];
    let mut s2 = vec![0.0; len];
    for (v, &first) in data.iter().zip(in_first) {
        let dst = if first { &mut s1 } else { &mut s2 };
        dst.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    (0..locs)
        .map(|l| {
            (0..width)
                .map(|k| {
                    let d = s1[l * width + k] / n1 - s2[l * width + k] / n2;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Voxelwise permutation p-values for the chart-space mean-difference norm.
///
/// Subjects are pooled in content-hash order and each permutation draws the
/// smaller group's size, so swapping the group labels gives identical
/// p-values.
pub fn permutation_test(group_a: &[Field], group_b: &[Field], n_perm: usize, seed: u64) -> Result<Vec<f64>> {
    if group_a.len() < 2 {
        return Err(Error::DegenerateGroup(group_a.len()));
    }
    if group_b.len() < 2 {
        return Err(Error::DegenerateGroup(group_b.len()));
    }
    if n_perm < 100 {
        return Err(Error::config("eval.n_perm", format!("{n_perm} permutations is below the minimum of 100")));
    }
    let first = &group_a[0];
    for f in group_a.iter().chain(group_b) {
        same_shape(first, f)?;
    }
    let mut pool: Vec<(&Field, bool)> = group_a.iter().map(|f| (f, true)).chain(group_b.iter().map(|f| (f, false))).collect();
    pool.sort_by_cached_key(|(f, _)| content_hash(f));
    let small_is_a = group_a.len() <= group_b.len();
    let small = group_a.len().min(group_b.len());
    let data = voxel_vectors(&pool.iter().map(|(f, _)| *f).collect::<Vec<_>>())?;
    let locs = first.locations();
    let width = first.channels() * first.manifold().dim();
    let labels: Vec<bool> = pool.iter().map(|(_, a)| *a == small_is_a).collect();
    let observed = mean_difference_norms(&data, &labels, width, locs);
    let counts = (0..n_perm)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
            let mut pick = vec![false; pool.len()];
            for i in sample(&mut rng, pool.len(), small) {
                pick[i] = true;
            }
            let stat = mean_difference_norms(&data, &pick, width, locs);
            stat.iter().zip(&observed).map(|(s, o)| u32::from(*s >= *o)).collect::<Vec<u32>>()
        })
        .reduce(|| vec![0; locs], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    Ok(counts.iter().map(|&c| (1.0 + c as f64) / (1.0 + n_perm as f64)).collect())
}

/// IoU of `{p < α}` under two p-volumes; 1 when both sets are empty.
pub fn iou_significant(pa: &[f64], pb: &[f64], alpha: f64) -> Result<f64> {
    if pa.len() != pb.len() {
        return Err(Error::Shape(format!("p-volumes of {} and {} voxels", pa.len(), pb.len())));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config("eval.alpha", "must lie strictly between 0 and 1"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pa.iter().zip(pb) {
        let (x, y) = (*a < alpha, *b < alpha);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU of a p-volume's significant set against a boolean mask.
pub fn iou_mask(p: &[f64], mask: &[bool], alpha: f64) -> Result<f64> {
    let q: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
    iou_significant(p, &q, alpha)
}

/// Benjamini–Hochberg adjusted p-values.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; n];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * n as f64 / (rank + 1) as f64);
        out[i] = running.min(1.0);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reconstruction_errors: Vec<f64>,
    pub mean_reconstruction_error: f64,
    pub baseline_error: Option<f64>,
    pub confusion: Vec<Vec<f64>>,
    pub dominance: f64,
    /// Per-setting voxelwise p-values.
    pub p_values: BTreeMap<String, Vec<f64>>,
    pub iou: BTreeMap<String, f64>,
    pub seeds: Vec<u64>,
    pub temperatures: Vec<f64>,
    pub thresholds: BTreeMap<String, ThresholdResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn all_thresholds_pass(&self) -> bool {
        self.thresholds.values().all(|t| t.passed)
    }
}

/// SVG histogram with `bins` equal-width bins.
pub fn histogram_svg(values: &[f64], bins: usize, title: &str) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let bins = bins.max(1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / span) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bw = (w - 2.0 * pad) / bins as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    for (i, &c) in counts.iter().enumerate() {
        let bh = (h - 2.0 * pad) * c as f64 / top;
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4477aa"/>"##,
            pad + i as f64 * bw,
            h - pad - bh,
            bw * 0.95,
            bh
        );
    }
    let _ = writeln!(s, r#"<text x="{pad}" y="{}" font-size="11">{lo:.4e}</text>"#, h - pad / 3.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{hi:.4e}</text>"#, w - pad, h - pad / 3.0);
    s.push_str("</svg>\n");
    s
}

/// SVG heatmap of a matrix, darker for smaller values.
pub fn heatmap_svg(matrix: &[Vec<f64>], title: &str) -> String {
    let n = matrix.len().max(1);
    let cols = matrix.first().map_or(1, |r| r.len().max(1));
    let cell = (400.0 / n.max(cols) as f64).max(4.0);
    let (pad, top) = (20.0, 40.0);
    let w = 2.0 * pad + cell * cols as f64;
    let h = top + pad + cell * n as f64;
    let lo = matrix.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = matrix.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let g = (255.0 * (v - lo) / span).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({g},{g},255)"/>"#,
                pad + j as f64 * cell,
                top + i as f64 * cell
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dominance_of_identity_errors() {
        let m = vec![vec![0.0, 1.0], vec![2.0, 0.5]];
        assert_eq!(dominance(&m), 1.0);
        assert_eq!(dominance_against(&m, &[1, 0]), 0.0);
    }

    #[test]
    fn iou_edge_cases() {
        assert_eq!(iou_significant(&[0.5, 0.5], &[0.9, 0.9], 0.05).unwrap(), 1.0);
        assert_eq!(iou_significant(&[0.01, 0.5], &[0.5, 0.9], 0.05).unwrap(), 0.0);
        assert_eq!(iou_significant(&[0.01, 0.01], &[0.01, 0.9], 0.05).unwrap(), 0.5);
    }

    #[test]
    fn bh_is_monotone_and_bounded() {
        let q = benjamini_hochberg(&[0.01, 0.04, 0.03, 0.5]);
        assert!((q[0] - 0.04).abs() < 1e-15);
        assert!((q[1] - 0.04 * 4.0 / 3.0).abs() < 1e-15);
        assert!(q.iter().all(|&v| v <= 1.0));
    }
}
