//! Synthetic manifold-valued datasets and the `MFLD` field file format.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::{unflatten_sym, ChartKind, Kind, ManifoldKind};
use crate::linalg::{self, Mat};
use crate::train::derive_seed;

pub const FIELD_MAGIC: &[u8; 4] = b"MFLD";
pub const FIELD_VERSION: u16 = 1;
/// Kind tag of files holding plain arrays (matrices, p-value volumes).
pub const RAW_ARRAY_TAG: u8 = 255;

fn format_err(pos: usize, msg: impl Into<String>) -> Error {
    Error::Format { pos, msg: msg.into() }
}

fn encode_header(out: &mut Vec<u8>, kind: u8, n: u16, chart: u8, grid: &[usize], channels: usize) {
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&n.to_le_bytes());
    out.push(chart);
    out.push(grid.len() as u8);
    for &e in grid {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.extend_from_slice(&(channels as u32).to_le_bytes());
}

struct Header {
    kind: u8,
    n: u16,
    chart: u8,
    grid: Vec<usize>,
    channels: usize,
    payload_at: usize,
}

fn decode_header(bytes: &[u8]) -> Result<Header> {
    let need = |pos: usize, len: usize, what: &str| -> Result<()> {
        if bytes.len() < pos + len {
            Err(format_err(pos, format!("file ends before {what}")))
        } else {
            Ok(())
        }
    };
    need(0, 4, "magic")?;
    if &bytes[..4] != FIELD_MAGIC {
        return Err(format_err(0, "bad magic, expected MFLD"));
    }
    need(4, 2, "version")?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FIELD_VERSION {
        return Err(Error::Version { found: version, expected: FIELD_VERSION });
    }
    need(6, 5, "manifold descriptor")?;
    let kind = bytes[6];
    let n = u16::from_le_bytes([bytes[7], bytes[8]]);
    let chart = bytes[9];
    let rank = bytes[10] as usize;
    if !(1..=3).contains(&rank) {
        return Err(format_err(10, format!("spatial rank {rank} is outside 1..=3")));
    }
    let mut pos = 11;
    let mut grid = Vec::with_capacity(rank);
    for _ in 0..rank {
        need(pos, 4, "spatial extents")?;
        let e = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if e == 0 {
            return Err(format_err(pos, "zero spatial extent"));
        }
        grid.push(e);
        pos += 4;
    }
    need(pos, 4, "channel count")?;
    let channels = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    if channels == 0 {
        return Err(format_err(pos, "zero channels"));
    }
    Ok(Header { kind, n, chart, grid, channels, payload_at: pos + 4 })
}

fn decode_payload(bytes: &[u8], at: usize, count: usize) -> Result<Vec<f64>> {
    let have = bytes.len() - at;
    if have != count * 8 {
        return Err(format_err(at, format!("payload has {have} bytes, expected {}", count * 8)));
    }
    Ok(bytes[at..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn encode_field(field: &Field) -> Vec<u8> {
    let m = field.manifold();
    let mut out = Vec::with_capacity(32 + field.data().len() * 8);
    encode_header(&mut out, m.kind().tag(), m.kind().n() as u16, m.chart().tag(), field.grid(), field.channels());
    for v in field.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Sphere fields decode with the default pole; callers relabel with
/// [`Field::with_manifold`] when another pole is wanted.
pub fn decode_field(bytes: &[u8]) -> Result<Field> {
    let h = decode_header(bytes)?;
    let kind = Kind::from_tag(h.kind, h.n as usize).ok_or_else(|| format_err(6, format!("unknown manifold tag {}", h.kind)))?;
    let chart = ChartKind::from_tag(h.chart).ok_or_else(|| format_err(9, format!("unknown chart tag {}", h.chart)))?;
    let manifold = ManifoldKind::new(kind, chart).map_err(|e| format_err(6, e.to_string()))?;
    let count = h.grid.iter().product::<usize>() * h.channels * manifold.ambient_len();
    let data = decode_payload(bytes, h.payload_at, count)?;
    Field::new(manifold, h.grid, h.channels, data)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    write_bytes(path, &encode_field(field))
}

pub fn read_field(path: &Path) -> Result<Field> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field(&bytes)
}

/// A plain float64 array stored with the field header layout.
#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("array of {} values cannot have shape {:?}", data.len(), shape)));
        }
        Ok(RawArray { shape, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        encode_header(&mut out, RAW_ARRAY_TAG, 0, 0, &self.shape, 1);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let h = decode_header(bytes)?;
        if h.kind != RAW_ARRAY_TAG {
            return Err(format_err(6, "not a raw array file"));
        }
        let data = decode_payload(bytes, h.payload_at, h.grid.iter().product::<usize>() * h.channels)?;
        Ok(RawArray { shape: h.grid, data })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

/// One subject: a source field on N and its target field on M.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub source: Field,
    pub target: Field,
    pub group: Option<Group>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub pairs: Vec<Pair>,
    pub meta: DatasetMeta,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn check_grid(grid: &[usize]) -> Result<()> {
    if grid.is_empty() || grid.len() > 3 || grid.contains(&0) {
        return Err(Error::config("grid", format!("{grid:?} is not a 1-3 dimensional nonempty grid")));
    }
    Ok(())
}

/// Gaussian noise summed over a 3-wide box per axis (clamped at the
/// borders) and divided by the root of each voxel's term count, so every
/// voxel keeps unit variance.
fn blurred_noise(rng: &mut impl Rng, grid: &[usize]) -> Vec<f64> {
    let n: usize = grid.iter().product();
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut terms = vec![1.0f64; n];
    let mut stride = 1;
    for axis in (0..grid.len()).rev() {
        let ext = grid[axis];
        let prev = v.clone();
        for (i, (out, t)) in v.iter_mut().zip(terms.iter_mut()).enumerate() {
            let c = (i / stride) % ext;
            let mut acc = prev[i];
            let mut k = 1.0;
            if c > 0 {
                acc += prev[i - stride];
                k += 1.0;
            }
            if c + 1 < ext {
                acc += prev[i + stride];
                k += 1.0;
            }
            *out = acc;
            *t *= k;
        }
        stride *= ext;
    }
    v.iter_mut().zip(&terms).for_each(|(x, t)| *x /= t.sqrt());
    v
}

/// Smooth random SPD field with eigenvalues in `(0.1, 10)`.
pub fn synth_spd_field(seed: u64, grid: &[usize], channels: usize, smoothness: f64, n: usize) -> Result<Field> {
    check_grid(grid)?;
    if !(0.0..=1.0).contains(&smoothness) {
        return Err(Error::config("smoothness", format!("{smoothness} is outside [0, 1]")));
    }
    let manifold = ManifoldKind::spd(n, ChartKind::MatrixLog)?;
    let dim = manifold.dim();
    let locs: usize = grid.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (smoothness.sqrt(), (1.0 - smoothness).sqrt());
    // coords[c][k][loc]
    let mut coords = vec![vec![vec![0.0; locs]; dim]; channels];
    for ch in coords.iter_mut() {
        for k in ch.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            let local = blurred_noise(&mut rng, grid);
            for (dst, l) in k.iter_mut().zip(local) {
                *dst = a * g + b * l;
            }
        }
    }
    let ln10 = std::f64::consts::LN_10;
    Field::from_fn(manifold, grid.to_vec(), channels, |loc, c| {
        let v: Vec<f64> = (0..dim).map(|k| coords[c][k][loc]).collect();
        let s = unflatten_sym(n, &v);
        let (ev, u) = linalg::sym_eigen(&s).expect("symmetric");
        let lam: Vec<f64> = ev.iter().map(|&e| (ln10 * e.tanh()).exp()).collect();
        symmetrize(linalg::reconstruct(&u, &lam)).into_data()
    })
}

fn symmetrize(m: Mat<f64>) -> Mat<f64> {
    let n = m.rows();
    let mut out = m.clone();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    out
}

/// `count` unit directions, antipodally symmetric: `count / 2` Fibonacci
/// points on the upper hemisphere followed by their negations.
pub fn symmetric_directions(count: usize) -> Result<Vec<[f64; 3]>> {
    if count < 4 || count % 2 != 0 {
        return Err(Error::config("n_dirs", format!("{count} must be even and at least 4")));
    }
    let half = count / 2;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut out: Vec<[f64; 3]> = (0..half)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / half as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect();
    let neg: Vec<[f64; 3]> = out.iter().map(|d| [-d[0], -d[1], -d[2]]).collect();
    out.extend(neg);
    Ok(out)
}

/// Square root of the normalized quadratic-form profile `(uₖᵀ D uₖ)ₖ`.
pub fn odf_profile(dirs: &[[f64; 3]], d: &[f64]) -> Vec<f64> {
    let q: Vec<f64> = dirs
        .iter()
        .map(|u| {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += u[i] * d[i * 3 + j] * u[j];
                }
            }
            s
        })
        .collect();
    let total: f64 = q.iter().sum();
    q.iter().map(|v| (v / total).sqrt()).collect()
}

/// Pole of the target sphere for paired datasets: the uniform profile.
pub fn uniform_pole(n_dirs: usize) -> Vec<f64> {
    vec![1.0 / (n_dirs as f64).sqrt(); n_dirs]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairedConfig {
    pub grid: Vec<usize>,
    pub count: usize,
    pub n_dirs: usize,
    /// Chart-space noise on the target.
    pub noise: f64,
    pub smoothness: f64,
    /// Standard deviation of a smooth per-voxel log-scale applied to the
    /// source tensors; the target is invariant to it.
    pub scale_jitter: f64,
}

impl Default for PairedConfig {
    fn default() -> Self {
        PairedConfig { grid: vec![4, 4, 4], count: 80, n_dirs: 12, noise: 0.02, smoothness: 0.5, scale_jitter: 0.3 }
    }
}

fn odf_field(dirs: &[[f64; 3]], target: &ManifoldKind, d: &Field, noise: f64, rng: &mut impl Rng) -> Result<Field> {
    let m = target.dim();
    Field::from_fn(target.clone(), d.grid().to_vec(), d.channels(), |loc, c| {
        let p = odf_profile(dirs, d.point(loc, c));
        if noise == 0.0 {
            return p;
        }
        let mut v = target.chart_forward(&p).expect("profile lies on the positive orthant");
        for x in v.iter_mut().take(m) {
            *x += noise * rng.sample::<f64, _>(StandardNormal);
        }
        target.chart_inverse(&v).expect("noise stays inside the chart")
    })
}

fn scale_field(d: &Field, log_scale: &[f64]) -> Result<Field> {
    Field::from_fn(d.manifold().clone(), d.grid().to_vec(), d.channels(), |loc, c| {
        let s = log_scale[loc].exp();
        d.point(loc, c).iter().map(|v| v * s).collect()
    })
}

/// Spd(3) → Sphere(n_dirs) pairs through [`odf_profile`].
pub fn synth_paired(seed: u64, cfg: &PairedConfig) -> Result<PairedDataset> {
    check_grid(&cfg.grid)?;
    if !(cfg.noise >= 0.0) || !(cfg.scale_jitter >= 0.0) {
        return Err(Error::config("data.noise", "noise levels must be nonnegative"));
    }
    let dirs = symmetric_directions(cfg.n_dirs)?;
    let target = ManifoldKind::sphere_with_pole(cfg.n_dirs, &uniform_pole(cfg.n_dirs))?;
    let mut pairs = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let s = derive_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 1));
        let mut d = synth_spd_field(s, &cfg.grid, 1, cfg.smoothness, 3)?;
        if cfg.scale_jitter > 0.0 {
            let ls: Vec<f64> = blurred_noise(&mut rng, &cfg.grid).iter().map(|v| v * cfg.scale_jitter).collect();
            d = scale_field(&d, &ls)?;
        }
        let x = odf_field(&dirs, &target, &d, cfg.noise, &mut rng)?;
        pairs.push(Pair { source: d, target: x, group: None });
    }
    Ok(PairedDataset { pairs, meta: DatasetMeta { generator: "paired".into(), seed, noise: cfg.noise } })
}

/// Positive 3-channel textures (target) and their regularized local 3×3
/// window covariances (source).
pub fn synth_texture_pair(seed: u64, grid: &[usize], count: usize) -> Result<PairedDataset> {
    check_grid(grid)?;
    if grid.len() < 2 || grid[0] < 8 || grid[1] < 8 {
        return Err(Error::config("grid", "texture grids need at least 8×8"));
    }
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let locs: usize = grid.iter().product();
        let mut logs = vec![[0.0; 3]; locs];
        for ch in 0..3 {
            let freq: f64 = rng.random_range(0.3..1.5);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let noise = blurred_noise(&mut rng, grid);
            for (loc, l) in logs.iter_mut().enumerate() {
                let (r, c) = ((loc / grid[1..].iter().product::<usize>()) % grid[0], (loc / grid[2..].iter().product::<usize>()) % grid[1]);
                l[ch] = 0.5 * (freq * r as f64 + 0.7 * freq * c as f64 + phase).sin() + 0.3 * noise[loc];
            }
        }
        let texture = Field::from_fn(ManifoldKind::positive_reals(), grid.to_vec(), 3, |loc, ch| vec![logs[loc][ch].exp()])?;
        let cov = window_covariance(&texture)?;
        pairs.push(Pair { source: cov, target: texture, group: None });
    }
    Ok(PairedDataset { pairs, meta: DatasetMeta { generator: "texture".into(), seed, noise: 0.0 } })
}

/// Population covariance of the 3 channels over the 3×3 window spanned by
/// the first two axes (clipped at borders), plus `1e-4·I`.
pub fn window_covariance(texture: &Field) -> Result<Field> {
    if texture.channels() != 3 || texture.manifold().kind() != Kind::PositiveReals || texture.grid().len() < 2 {
        return Err(Error::Shape("window covariance needs a 3-channel positive field on a 2D or 3D grid".into()));
    }
    let grid = texture.grid().to_vec();
    let inner: usize = grid[2..].iter().product();
    let s1 = inner;
    let s0 = grid[1] * inner;
    let manifold = ManifoldKind::spd(3, ChartKind::MatrixLog)?;
    Field::from_fn(manifold, grid.clone(), 1, |loc, _| {
        let (r, c) = (loc / s0, (loc / s1) % grid[1]);
        let mut samples = Vec::new();
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr < 0 || cc < 0 || rr >= grid[0] as i64 || cc >= grid[1] as i64 {
                    continue;
                }
                let l = loc - r * s0 - c * s1 + rr as usize * s0 + cc as usize * s1;
                samples.push([texture.point(l, 0)[0], texture.point(l, 1)[0], texture.point(l, 2)[0]]);
            }
        }
        let k = samples.len() as f64;
        let mean: Vec<f64> = (0..3).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / k).collect();
        let mut cov = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                cov[i * 3 + j] = samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).sum::<f64>() / k;
            }
            cov[i * 3 + i] += 1e-4;
        }
        cov
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupStudyConfig {
    pub per_group: usize,
    /// Chart-space standard deviation of subject variation around the template.
    pub subject_noise: f64,
    /// Rotation angle (radians) applied to group B tensors in the planted region.
    pub rotation: f64,
    /// Log-scale applied to group B tensors in the decoy region.
    pub decoy_log_scale: f64,
}

impl Default for GroupStudyConfig {
    fn default() -> Self {
        GroupStudyConfig { per_group: 12, subject_noise: 0.15, rotation: 1.2, decoy_log_scale: 0.4 }
    }
}

/// Two groups of subjects around a common template. Group B differs in the
/// planted region by a rotation of each tensor (visible in both streams)
/// and in the decoy region by a scaling (visible only in the source).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStudy {
    pub dataset: PairedDataset,
    pub planted: Vec<bool>,
    pub decoy: Vec<bool>,
}

fn rotation_about(axis: &[f64], angle: f64) -> Mat<f64> {
    let (s, c) = angle.sin_cos();
    let (x, y, z) = (axis[0], axis[1], axis[2]);
    let t = 1.0 - c;
    Mat::from_vec(
        3,
        3,
        vec![
            t * x * x + c,
            t * x * y - s * z,
            t * x * z + s * y,
            t * x * y + s * z,
            t * y * y + c,
            t * y * z - s * x,
            t * x * z - s * y,
            t * y * z + s * x,
            t * z * z + c,
        ],
    )
}

/// Region masks: the planted region is the low corner block of half extent,
/// the decoy region the high corner block.
pub fn group_regions(grid: &[usize]) -> (Vec<bool>, Vec<bool>) {
    let locs: usize = grid.iter().product();
    let mut planted = vec![false; locs];
    let mut decoy = vec![false; locs];
    for loc in 0..locs {
        let mut rem = loc;
        let mut lo = true;
        let mut hi = true;
        for &e in grid.iter().rev() {
            let c = rem % e;
            rem /= e;
            let h = (e / 2).max(1);
            lo &= c < h;
            hi &= c >= e - h;
        }
        planted[loc] = lo;
        decoy[loc] = hi && !lo;
    }
    (planted, decoy)
}

pub fn synth_group_study(seed: u64, paired: &PairedConfig, cfg: &GroupStudyConfig) -> Result<GroupStudy> {
    check_grid(&paired.grid)?;
    if cfg.per_group < 2 {
        return Err(Error::config("group.per_group", "each group needs at least 2 subjects"));
    }
    let dirs = symmetric_directions(paired.n_dirs)?;
    let target = ManifoldKind::sphere_with_pole(paired.n_dirs, &uniform_pole(paired.n_dirs))?;
    let template = synth_spd_field(derive_seed(seed, u64::MAX), &paired.grid, 1, paired.smoothness, 3)?;
    let (planted, decoy) = group_regions(&paired.grid);
    let chart = template.manifold().clone();
    let mut pairs = Vec::with_capacity(2 * cfg.per_group);
    for i in 0..2 * cfg.per_group {
        let group = if i < cfg.per_group { Group::A } else { Group::B };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let d = Field::from_fn(chart.clone(), paired.grid.clone(), 1, |loc, _| {
            let mut v = chart.chart_forward(template.point(loc, 0)).expect("valid template");
            v.iter_mut().for_each(|x| *x += cfg.subject_noise * rng.sample::<f64, _>(StandardNormal));
            let mut p = Mat::from_vec(3, 3, chart.chart_inverse(&v).expect("matrix exponential"));
            if group == Group::B && planted[loc] {
                let (_, u) = linalg::sym_eigen(&p).expect("symmetric");
                let axis = [u[(0, 0)], u[(1, 0)], u[(2, 0)]];
                let r = rotation_about(&axis, cfg.rotation);
                p = r.matmul(&p).matmul(&r.transpose());
            }
            if group == Group::B && decoy[loc] {
                p = p.scale(cfg.decoy_log_scale.exp());
            }
            symmetrize(p).into_data()
        })?;
        let x = odf_field(&dirs, &target, &d, paired.noise, &mut rng)?;
        pairs.push(Pair { source: d, target: x, group: Some(group) });
    }
    Ok(GroupStudy {
        dataset: PairedDataset { pairs, meta: DatasetMeta { generator: "group_study".into(), seed, noise: paired.noise } },
        planted,
        decoy,
    })
}

/// Disjoint, exhaustive, seed-deterministic split; the train size is
/// `round(fraction · count)`.
pub fn split_indices(count: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if count < 2 {
        return Err(Error::EmptySplit(format!("{count} items cannot be split")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("data.train_fraction", "must lie strictly between 0 and 1"));
    }
    let n_train = (train_fraction * count as f64).round() as usize;
    if n_train == 0 || n_train == count {
        return Err(Error::EmptySplit(format!("fraction {train_fraction} of {count} leaves one side empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..count).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_dataset(data: &PairedDataset, train_fraction: f64, seed: u64) -> Result<(PairedDataset, PairedDataset)> {
    let (tr, te) = split_indices(data.len(), train_fraction, seed)?;
    let pick = |ix: &[usize]| PairedDataset { pairs: ix.iter().map(|&i| data.pairs[i].clone()).collect(), meta: data.meta.clone() };
    Ok((pick(&tr), pick(&te)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line: source path, target path, group label, split.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    pub group: Option<Group>,
    pub split: Split,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::from("source\ttarget\tgroup\tsplit\n");
    for e in entries {
        let g = match e.group {
            Some(Group::A) => "A",
            Some(Group::B) => "B",
            None => "-",
        };
        let sp = match e.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        s.push_str(&format!("{}\t{}\t{g}\t{sp}\n", e.source.display(), e.target.display()));
    }
    write_bytes(path, s.as_bytes())
}

/// Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    let mut pos = 0;
    for (i, line) in text.lines().enumerate() {
        let at = pos;
        pos += line.len() + 1;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(format_err(at, format!("manifest line {} has {} columns, expected 4", i + 1, cols.len())));
        }
        let group = match cols[2] {
            "A" => Some(Group::A),
            "B" => Some(Group::B),
            "-" => None,
            g => return Err(format_err(at, format!("unknown group label {g:?}"))),
        };
        let split = match cols[3] {
            "train" => Split::Train,
            "test" => Split::Test,
            s => return Err(format_err(at, format!("unknown split {s:?}"))),
        };
        out.push(ManifestEntry { source: base.join(cols[0]), target: base.join(cols[1]), group, split });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directions_are_symmetric_unit_vectors() {
        let d = symmetric_directions(12).unwrap();
        assert_eq!(d.len(), 12);
        for k in 0..6 {
            assert_eq!(d[k + 6], [-d[k][0], -d[k][1], -d[k][2]]);
            assert!((d[k].iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-14);
        }
        assert!(symmetric_directions(5).is_err());
        assert!(symmetric_directions(2).is_err());
    }

    #[test]
    fn isotropic_tensor_gives_uniform_profile() {
        let dirs = symmetric_directions(12).unwrap();
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        for v in odf_profile(&dirs, &id) {
            assert!((v - 1.0 / 12f64.sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn regions_are_disjoint_corners() {
        let (p, d) = group_regions(&[4, 4, 4]);
        assert_eq!(p.iter().filter(|&&b| b).count(), 8);
        assert_eq!(d.iter().filter(|&&b| b).count(), 8);
        assert!(p.iter().zip(&d).all(|(a, b)| !(a & b)));
        assert!(p[0] && d[63]);
    }

    #[test]
    fn split_rounds_train_count() {
        let (tr, te) = split_indices(1065, 0.8, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (852, 213));
    }
}
