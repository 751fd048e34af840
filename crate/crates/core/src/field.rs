//! Fields of manifold points on a spatial grid, their chart images, and the
//! squeeze / split plumbing of the multiscale flow.
//!
//! Both [`Field`] and [`ChartField`] store entries in row-major
//! `(spatial…, channel, component)` order.

use crate::error::{Error, Result};
use crate::geometry::ManifoldKind;
use crate::scalar::{lift, values, Scalar};

/// A grid of points on one manifold, stored by ambient representation.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    manifold: ManifoldKind,
    grid: Vec<usize>,
    channels: usize,
    data: Vec<f64>,
}

fn check_grid(grid: &[usize], channels: usize) -> Result<()> {
    if grid.is_empty() || grid.len() > 3 {
        return Err(Error::Shape(format!("grids have 1 to 3 spatial dimensions, got {}", grid.len())));
    }
    if grid.contains(&0) || channels == 0 {
        return Err(Error::Shape(format!("empty grid {grid:?} with {channels} channels")));
    }
    Ok(())
}

impl Field {
    /// Builds a field and validates every point.
    pub fn new(manifold: ManifoldKind, grid: Vec<usize>, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_grid(&grid, channels)?;
        let expect = grid.iter().product::<usize>() * channels * manifold.ambient_len();
        if data.len() != expect {
            return Err(Error::Shape(format!("field payload has {} values, expected {expect}", data.len())));
        }
        let f = Field { manifold, grid, channels, data };
        for (i, p) in f.points().enumerate() {
            f.manifold.validate_point(p).map_err(|e| Error::InvalidPoint(format!("entry {i}: {e}")))?;
        }
        Ok(f)
    }

    /// Fills a field from a per-entry generator of ambient points.
    pub fn from_fn(
        manifold: ManifoldKind,
        grid: Vec<usize>,
        channels: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        check_grid(&grid, channels)?;
        let locs: usize = grid.iter().product();
        let mut data = Vec::with_capacity(locs * channels * manifold.ambient_len());
        for l in 0..locs {
            for c in 0..channels {
                data.extend(f(l, c));
            }
        }
        Self::new(manifold, grid, channels, data)
    }

    /// A field of identical points.
    pub fn constant(manifold: ManifoldKind, grid: Vec<usize>, channels: usize, point: &[f64]) -> Result<Self> {
        Self::from_fn(manifold, grid, channels, |_, _| point.to_vec())
    }

    pub fn manifold(&self) -> &ManifoldKind {
        &self.manifold
    }

    /// Replaces the chart metadata (the points are unchanged).
    pub fn with_manifold(mut self, manifold: ManifoldKind) -> Result<Self> {
        if manifold.kind() != self.manifold.kind() {
            return Err(Error::Shape(format!("cannot relabel {:?} as {:?}", self.manifold.kind(), manifold.kind())));
        }
        self.manifold = manifold;
        Ok(self)
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn locations(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn len(&self) -> usize {
        self.locations() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn point(&self, location: usize, channel: usize) -> &[f64] {
        let a = self.manifold.ambient_len();
        let i = (location * self.channels + channel) * a;
        &self.data[i..i + a]
    }

    pub fn points(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.manifold.ambient_len())
    }

    pub fn to_chart(&self) -> Result<ChartField<f64>> {
        let m = self.manifold.dim();
        let mut coords = Vec::with_capacity(self.len() * m);
        for p in self.points() {
            coords.extend(self.manifold.chart_forward(p)?);
        }
        Ok(ChartField { grid: self.grid.clone(), channels: self.channels, dim: m, coords })
    }

    pub fn from_chart<T: Scalar>(manifold: &ManifoldKind, v: &ChartField<T>) -> Result<Field> {
        if v.dim != manifold.dim() {
            return Err(Error::Shape(format!("chart field of width {} for a manifold of dimension {}", v.dim, manifold.dim())));
        }
        let mut data = Vec::with_capacity(v.len() * manifold.ambient_len());
        for c in v.coords.chunks_exact(v.dim) {
            data.extend(manifold.chart_inverse(&values(c))?);
        }
        Field::new(manifold.clone(), v.grid.clone(), v.channels, data)
    }

    pub fn squeeze(&self) -> Result<Field> {
        let (grid, channels, data) = squeeze_raw(&self.grid, self.channels, self.manifold.ambient_len(), &self.data)?;
        Ok(Field { manifold: self.manifold.clone(), grid, channels, data })
    }

    pub fn unsqueeze(&self, grid: &[usize]) -> Result<Field> {
        let (g, channels, data) = unsqueeze_raw(&self.grid, self.channels, self.manifold.ambient_len(), &self.data, grid)?;
        Ok(Field { manifold: self.manifold.clone(), grid: g, channels, data })
    }

    pub fn split(&self) -> Result<(Field, Field)> {
        let (a, b) = split_raw(self.locations(), self.channels, self.manifold.ambient_len(), &self.data)?;
        let half = self.channels / 2;
        let mk = |data| Field { manifold: self.manifold.clone(), grid: self.grid.clone(), channels: half, data };
        Ok((mk(a), mk(b)))
    }

    pub fn merge(kept: &Field, emitted: &Field) -> Result<Field> {
        if kept.grid != emitted.grid || kept.manifold != emitted.manifold {
            return Err(Error::Shape("merging fields of different shape".into()));
        }
        let data = merge_raw(kept.locations(), kept.channels, emitted.channels, kept.manifold.ambient_len(), &kept.data, &emitted.data);
        Ok(Field { manifold: kept.manifold.clone(), grid: kept.grid.clone(), channels: kept.channels + emitted.channels, data })
    }
}

/// Chart coordinates of a field.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartField<T> {
    pub grid: Vec<usize>,
    pub channels: usize,
    /// Chart dimension `m`.
    pub dim: usize,
    pub coords: Vec<T>,
}

impl<T: Scalar> ChartField<T> {
    pub fn new(grid: Vec<usize>, channels: usize, dim: usize, coords: Vec<T>) -> Result<Self> {
        check_grid(&grid, channels)?;
        let expect = grid.iter().product::<usize>() * channels * dim;
        if coords.len() != expect {
            return Err(Error::Shape(format!("chart field has {} coordinates, expected {expect}", coords.len())));
        }
        Ok(ChartField { grid, channels, dim, coords })
    }

    pub fn zeros(grid: Vec<usize>, channels: usize, dim: usize) -> Self {
        let n = grid.iter().product::<usize>() * channels * dim;
        ChartField { grid, channels, dim, coords: vec![T::zero(); n] }
    }

    pub fn locations(&self) -> usize {
        self.grid.iter().product()
    }

    /// Number of (location, channel) entries.
    pub fn len(&self) -> usize {
        self.locations() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn entry(&self, location: usize, channel: usize) -> &[T] {
        let i = (location * self.channels + channel) * self.dim;
        &self.coords[i..i + self.dim]
    }

    pub fn entry_mut(&mut self, location: usize, channel: usize) -> &mut [T] {
        let i = (location * self.channels + channel) * self.dim;
        &mut self.coords[i..i + self.dim]
    }

    /// All channels at one location, concatenated.
    pub fn location(&self, location: usize) -> &[T] {
        let w = self.channels * self.dim;
        &self.coords[location * w..(location + 1) * w]
    }

    pub fn lift(v: &ChartField<f64>) -> Self {
        ChartField { grid: v.grid.clone(), channels: v.channels, dim: v.dim, coords: lift(&v.coords) }
    }

    pub fn values(&self) -> ChartField<f64> {
        ChartField { grid: self.grid.clone(), channels: self.channels, dim: self.dim, coords: values(&self.coords) }
    }

    pub fn squeeze(&self) -> Result<Self> {
        let (grid, channels, coords) = squeeze_raw(&self.grid, self.channels, self.dim, &self.coords)?;
        Ok(ChartField { grid, channels, dim: self.dim, coords })
    }

    /// Inverse of [`squeeze`](Self::squeeze) back onto `grid`.
    pub fn unsqueeze(&self, grid: &[usize]) -> Result<Self> {
        let (g, channels, coords) = unsqueeze_raw(&self.grid, self.channels, self.dim, &self.coords, grid)?;
        Ok(ChartField { grid: g, channels, dim: self.dim, coords })
    }

    /// First half of the channels is kept, the second half emitted.
    pub fn split(&self) -> Result<(Self, Self)> {
        let (a, b) = split_raw(self.locations(), self.channels, self.dim, &self.coords)?;
        let half = self.channels / 2;
        let mk = |coords| ChartField { grid: self.grid.clone(), channels: half, dim: self.dim, coords };
        Ok((mk(a), mk(b)))
    }

    pub fn merge(kept: &Self, emitted: &Self) -> Result<Self> {
        if kept.grid != emitted.grid || kept.dim != emitted.dim {
            return Err(Error::Shape("merging chart fields of different shape".into()));
        }
        let coords = merge_raw(kept.locations(), kept.channels, emitted.channels, kept.dim, &kept.coords, &emitted.coords);
        Ok(ChartField { grid: kept.grid.clone(), channels: kept.channels + emitted.channels, dim: kept.dim, coords })
    }
}

/// Grid and channel count after one squeeze; extent-1 axes are left alone.
pub fn squeezed_shape(grid: &[usize], channels: usize) -> Result<(Vec<usize>, usize)> {
    let mut out = Vec::with_capacity(grid.len());
    let mut factor = 1;
    for &e in grid {
        if e == 1 {
            out.push(1);
        } else if e % 2 != 0 {
            return Err(Error::Divisibility { extent: e, divisor: 2 });
        } else {
            out.push(e / 2);
            factor *= 2;
        }
    }
    Ok((out, channels * factor))
}

fn strides(grid: &[usize]) -> Vec<usize> {
    let mut s = vec![1; grid.len()];
    for d in (0..grid.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * grid[d + 1];
    }
    s
}

/// For each entry of the squeezed layout, the index of its source entry.
///
/// Squeezed channel `c' = c · 2^k + sub`, where `sub` is the row-major index
/// of the position inside the `2×…×2` block over the `k` squeezed axes.
fn squeeze_map(grid: &[usize], channels: usize) -> Result<(Vec<usize>, usize, Vec<usize>)> {
    let (new_grid, new_channels) = squeezed_shape(grid, channels)?;
    let squeezed: Vec<usize> = (0..grid.len()).filter(|&d| grid[d] > 1).collect();
    let block = 1usize << squeezed.len();
    let old_strides = strides(grid);
    let new_strides = strides(&new_grid);
    let new_locs: usize = new_grid.iter().product();
    let mut map = Vec::with_capacity(new_locs * new_channels);
    for nl in 0..new_locs {
        let pos: Vec<usize> = (0..grid.len()).map(|d| (nl / new_strides[d]) % new_grid[d]).collect();
        for c in 0..channels {
            for sub in 0..block {
                let mut old = 0;
                for d in 0..grid.len() {
                    let offset = match squeezed.iter().position(|&s| s == d) {
                        Some(k) => (sub >> (squeezed.len() - 1 - k)) & 1,
                        None => 0,
                    };
                    let p = if grid[d] > 1 { pos[d] * 2 + offset } else { 0 };
                    old += p * old_strides[d];
                }
                map.push(old * channels + c);
            }
        }
    }
    Ok((new_grid, new_channels, map))
}

fn squeeze_raw<T: Copy>(grid: &[usize], channels: usize, width: usize, data: &[T]) -> Result<(Vec<usize>, usize, Vec<T>)> {
    let (g, c, map) = squeeze_map(grid, channels)?;
    let mut out = Vec::with_capacity(data.len());
    for &src in &map {
        out.extend_from_slice(&data[src * width..(src + 1) * width]);
    }
    Ok((g, c, out))
}

fn unsqueeze_raw<T: Copy>(
    grid: &[usize],
    channels: usize,
    width: usize,
    data: &[T],
    target: &[usize],
) -> Result<(Vec<usize>, usize, Vec<T>)> {
    let (g, c) = squeezed_shape(target, 1)?;
    if g != grid || channels % c != 0 {
        return Err(Error::Shape(format!("cannot unsqueeze a {grid:?} grid onto {target:?}")));
    }
    let old_channels = channels / c;
    let (_, _, map) = squeeze_map(target, old_channels)?;
    let mut out = data.to_vec();
    for (dst, &src) in map.iter().enumerate() {
        out[src * width..(src + 1) * width].copy_from_slice(&data[dst * width..(dst + 1) * width]);
    }
    Ok((target.to_vec(), old_channels, out))
}

fn split_raw<T: Copy>(locations: usize, channels: usize, width: usize, data: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if channels % 2 != 0 {
        return Err(Error::OddChannels(channels));
    }
    let half = channels / 2 * width;
    let mut a = Vec::with_capacity(data.len() / 2);
    let mut b = Vec::with_capacity(data.len() / 2);
    for l in 0..locations {
        let row = &data[l * channels * width..(l + 1) * channels * width];
        a.extend_from_slice(&row[..half]);
        b.extend_from_slice(&row[half..]);
    }
    Ok((a, b))
}

fn merge_raw<T: Copy>(locations: usize, ca: usize, cb: usize, width: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for l in 0..locations {
        out.extend_from_slice(&a[l * ca * width..(l + 1) * ca * width]);
        out.extend_from_slice(&b[l * cb * width..(l + 1) * cb * width]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn indexed(grid: Vec<usize>, channels: usize) -> ChartField<f64> {
        let n = grid.iter().product::<usize>() * channels;
        ChartField::new(grid, channels, 1, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn squeeze_shapes() {
        let f = indexed(vec![4, 4], 1).squeeze().unwrap();
        assert_eq!((f.grid.clone(), f.channels), (vec![2, 2], 4));
        let g = indexed(vec![2, 2, 2], 3).squeeze().unwrap();
        assert_eq!((g.grid.clone(), g.channels), (vec![1, 1, 1], 24));
        let h = indexed(vec![4, 1], 2).squeeze().unwrap();
        assert_eq!((h.grid.clone(), h.channels), (vec![2, 1], 4));
        assert!(matches!(indexed(vec![3, 2], 1).squeeze(), Err(Error::Divisibility { extent: 3, divisor: 2 })));
    }

    #[test]
    fn squeeze_ordering_is_pinned() {
        // 2×4 grid, 1 channel: location (0,0) block holds (0,0),(0,1),(1,0),(1,1)
        let f = indexed(vec![2, 4], 1).squeeze().unwrap();
        assert_eq!(f.coords, vec![0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
        // with two channels the sub-block index varies fastest
        let g = indexed(vec![2, 2], 2).squeeze().unwrap();
        assert_eq!(g.coords, vec![0.0, 2.0, 4.0, 6.0, 1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn unsqueeze_inverts_bitwise() {
        let f = indexed(vec![4, 2, 6], 3);
        let back = f.squeeze().unwrap().unsqueeze(&[4, 2, 6]).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn split_merge() {
        let f = indexed(vec![2], 4);
        let (a, b) = f.split().unwrap();
        assert_eq!((a.channels, b.channels), (2, 2));
        assert_eq!(ChartField::merge(&a, &b).unwrap(), f);
        assert!(matches!(indexed(vec![2], 3).split(), Err(Error::OddChannels(3))));
    }
}
