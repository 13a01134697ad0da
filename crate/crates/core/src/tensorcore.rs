//! Dense grid numerics shared by the model, the abstractor and evaluation.
//!
//! Everything here works in `f64`. Grids are stored row-major with the channel
//! axis innermost, i.e. `data[(y * width + x) * dim + c]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn from_vec(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::dims(
                format!("{height}x{width}x{dim} = {}", height * width * dim),
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, dim: usize, value: f64) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![value; height * width * dim],
        }
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.dim;
        &self.data[start..start + self.dim]
    }

    #[inline]
    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    #[inline]
    pub fn cell_at(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    #[inline]
    pub fn cell_at_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.height == other.height && self.width == other.width && self.dim == other.dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pixelwise OR in place.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        if !self.same_dims(other) {
            return Err(Error::dims(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// The mask as a single-channel real grid (1.0 inside, 0.0 outside).
    pub fn to_grid(&self) -> FeatureGrid {
        FeatureGrid {
            height: self.height,
            width: self.width,
            dim: 1,
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Per-axis sampling taps for align-corners-false bilinear resampling.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            if lo == n_in - 1 {
                Tap {
                    lo,
                    hi: lo,
                    frac: 0.0,
                }
            } else {
                Tap {
                    lo,
                    hi: lo + 1,
                    frac: src - lo as f64,
                }
            }
        })
        .collect()
}

/// Bilinear resampling with sample centres at `(i + 0.5) / n`, edges clamped.
///
/// Channels are resampled independently. Interpolation uses the lerp form
/// `a + f * (b - a)` so constant grids come back bit-identical.
pub fn bilinear_resize(grid: &FeatureGrid, out_h: usize, out_w: usize) -> FeatureGrid {
    assert!(out_h >= 1 && out_w >= 1, "output dims must be positive");
    if out_h == grid.height && out_w == grid.width {
        return grid.clone();
    }
    let ty = axis_taps(grid.height, out_h);
    let tx = axis_taps(grid.width, out_w);
    let d = grid.dim;
    let mut out = FeatureGrid::zeros(out_h, out_w, d);
    for (oy, ry) in ty.iter().enumerate() {
        for (ox, rx) in tx.iter().enumerate() {
            let v00 = grid.cell(ry.lo, rx.lo);
            let v01 = grid.cell(ry.lo, rx.hi);
            let v10 = grid.cell(ry.hi, rx.lo);
            let v11 = grid.cell(ry.hi, rx.hi);
            let dst = out.cell_mut(oy, ox);
            for c in 0..d {
                let top = v00[c] + rx.frac * (v01[c] - v00[c]);
                let bottom = v10[c] + rx.frac * (v11[c] - v10[c]);
                dst[c] = top + ry.frac * (bottom - top);
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: maps a gradient on the resized grid back onto
/// a grid of the original `in_h x in_w` shape.
pub fn bilinear_resize_adjoint(grad_out: &FeatureGrid, in_h: usize, in_w: usize) -> FeatureGrid {
    if grad_out.height == in_h && grad_out.width == in_w {
        return grad_out.clone();
    }
    let ty = axis_taps(in_h, grad_out.height);
    let tx = axis_taps(in_w, grad_out.width);
    let d = grad_out.dim;
    let mut grad_in = FeatureGrid::zeros(in_h, in_w, d);
    for (oy, ry) in ty.iter().enumerate() {
        for (ox, rx) in tx.iter().enumerate() {
            let g = grad_out.cell(oy, ox);
            let w00 = (1.0 - ry.frac) * (1.0 - rx.frac);
            let w01 = (1.0 - ry.frac) * rx.frac;
            let w10 = ry.frac * (1.0 - rx.frac);
            let w11 = ry.frac * rx.frac;
            for (y, x, w) in [
                (ry.lo, rx.lo, w00),
                (ry.lo, rx.hi, w01),
                (ry.hi, rx.lo, w10),
                (ry.hi, rx.hi, w11),
            ] {
                if w == 0.0 {
                    continue;
                }
                let dst = grad_in.cell_mut(y, x);
                for c in 0..d {
                    dst[c] += w * g[c];
                }
            }
        }
    }
    grad_in
}

/// How a pixel mask is brought to feature resolution before pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Bilinear resample, then keep cells with value >= 0.5 at weight 1.
    #[default]
    Threshold,
    /// Use the bilinear-resampled values directly as weights.
    Soft,
}

/// Integer form of one bilinear tap: `lo`, `hi` and `frac = num / den`.
fn exact_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, u64)> {
    let den = 2 * n_out as u64;
    (0..n_out)
        .map(|i| {
            // source coordinate (2i + 1) n_in / (2 n_out) - 1/2, clamped at 0
            let src = ((2 * i as u64 + 1) * n_in as u64).saturating_sub(n_out as u64);
            let lo = (src / den) as usize;
            if lo >= n_in - 1 {
                (n_in - 1, n_in - 1, 0)
            } else {
                (lo, lo + 1, src % den)
            }
        })
        .collect()
}

/// Bilinear resample of a binary mask followed by `>= 0.5`, decided in exact
/// integer arithmetic so cells that land on one half are always kept.
pub fn resize_mask(mask: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    assert!(out_h >= 1 && out_w >= 1, "output dims must be positive");
    if out_h == mask.height && out_w == mask.width {
        return mask.clone();
    }
    let (dy, dx) = (2 * out_h as u64, 2 * out_w as u64);
    let ty = exact_taps(mask.height, out_h);
    let tx = exact_taps(mask.width, out_w);
    let bit = |y: usize, x: usize| mask.get(y, x) as u64;
    let mut bits = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let num = (dy - fy) * ((dx - fx) * bit(y0, x0) + fx * bit(y0, x1))
                + fy * ((dx - fx) * bit(y1, x0) + fx * bit(y1, x1));
            bits.push(2 * num >= dy * dx);
        }
    }
    BinaryMask {
        height: out_h,
        width: out_w,
        bits,
    }
}

/// Normalised pooling weights over feature cells: `(cell index, weight)` with
/// weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolWeights {
    pub cells: Vec<(usize, f64)>,
}

impl PoolWeights {
    pub fn from_mask(mask: &BinaryMask, height: usize, width: usize, mode: MaskMode) -> Result<Self> {
        let mut cells: Vec<(usize, f64)> = match mode {
            MaskMode::Threshold => resize_mask(mask, height, width)
                .bits
                .iter()
                .enumerate()
                .filter(|(_, &on)| on)
                .map(|(i, _)| (i, 1.0))
                .collect(),
            MaskMode::Soft => bilinear_resize(&mask.to_grid(), height, width)
                .data
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(i, &v)| (i, v))
                .collect(),
        };
        let total: f64 = cells.iter().map(|(_, w)| w).sum();
        if cells.is_empty() || total <= 0.0 {
            return Err(Error::EmptyMask);
        }
        for (_, w) in cells.iter_mut() {
            *w /= total;
        }
        Ok(Self { cells })
    }

    pub fn pool(&self, features: &FeatureGrid) -> Vec<f64> {
        let mut out = vec![0.0; features.dim];
        for &(idx, w) in &self.cells {
            for (o, &f) in out.iter_mut().zip(features.cell_at(idx)) {
                *o += w * f;
            }
        }
        out
    }

    /// Accumulates `d pool / d features` applied to `grad` into `grad_features`.
    pub fn backward(&self, grad: &[f64], grad_features: &mut FeatureGrid) {
        for &(idx, w) in &self.cells {
            for (g, &u) in grad_features.cell_at_mut(idx).iter_mut().zip(grad) {
                *g += w * u;
            }
        }
    }
}

/// Mean of the feature cells selected by `mask` after resampling it to the
/// grid resolution (thresholded mode).
pub fn masked_mean_pool(features: &FeatureGrid, mask: &BinaryMask) -> Result<Vec<f64>> {
    masked_mean_pool_with(features, mask, MaskMode::Threshold)
}

pub fn masked_mean_pool_with(
    features: &FeatureGrid,
    mask: &BinaryMask,
    mode: MaskMode,
) -> Result<Vec<f64>> {
    let weights = PoolWeights::from_mask(mask, features.height, features.width, mode)?;
    Ok(weights.pool(features))
}

/// A grid regrouped into non-overlapping `s x s` windows.
///
/// Layout is `[window][channel][position]`: windows row-major over the grid,
/// positions row-major inside each window.
#[derive(Debug, Clone, PartialEq)]
pub struct Windows {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl Windows {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn positions(&self) -> usize {
        self.size * self.size
    }

    #[inline]
    pub fn get(&self, window: usize, channel: usize, position: usize) -> f64 {
        self.data[(window * self.dim + channel) * self.positions() + position]
    }
}

pub fn window_partition(grid: &FeatureGrid, size: usize) -> Result<Windows> {
    if size == 0 || !grid.height.is_multiple_of(size) || !grid.width.is_multiple_of(size) {
        return Err(Error::Shape(format!(
            "window size {size} does not divide {}x{}",
            grid.height, grid.width
        )));
    }
    let rows = grid.height / size;
    let cols = grid.width / size;
    let s2 = size * size;
    let mut data = vec![0.0; grid.data.len()];
    for wr in 0..rows {
        for wc in 0..cols {
            let w = wr * cols + wc;
            for j in 0..s2 {
                let cell = grid.cell(wr * size + j / size, wc * size + j % size);
                for (c, &v) in cell.iter().enumerate() {
                    data[(w * grid.dim + c) * s2 + j] = v;
                }
            }
        }
    }
    Ok(Windows {
        rows,
        cols,
        dim: grid.dim,
        size,
        data,
    })
}

pub fn window_merge(windows: &Windows) -> FeatureGrid {
    let size = windows.size;
    let s2 = size * size;
    let mut grid = FeatureGrid::zeros(windows.rows * size, windows.cols * size, windows.dim);
    for wr in 0..windows.rows {
        for wc in 0..windows.cols {
            let w = wr * windows.cols + wc;
            for j in 0..s2 {
                let cell = grid.cell_mut(wr * size + j / size, wc * size + j % size);
                for (c, v) in cell.iter_mut().enumerate() {
                    *v = windows.data[(w * windows.dim + c) * s2 + j];
                }
            }
        }
    }
    grid
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericalFailure { coordinate: i });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut impl Rng, h: usize, w: usize, d: usize) -> FeatureGrid {
        let data = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureGrid::from_vec(h, w, d, data).unwrap()
    }

    #[test]
    fn resize_mask_matches_float_resize_off_the_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..300 {
            let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
            let (oh, ow) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
            let m = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(0.5));
            let exact = resize_mask(&m, oh, ow);
            let float = bilinear_resize(&m.to_grid(), oh, ow);
            for (b, v) in exact.bits.iter().zip(&float.data) {
                if (v - 0.5).abs() > 1e-9 {
                    assert_eq!(*b, *v >= 0.5);
                }
            }
        }
    }

    #[test]
    fn resize_mask_keeps_exact_halves() {
        // 2 -> 1 averages both cells: exactly one half
        let m = BinaryMask::from_fn(1, 2, |_, x| x == 0);
        assert!(resize_mask(&m, 1, 1).bits[0]);
        let m = BinaryMask::from_fn(1, 2, |_, _| false);
        assert!(!resize_mask(&m, 1, 1).bits[0]);
        // 4 -> 3: the middle sample sits halfway between cells 1 and 2
        let m = BinaryMask::from_fn(1, 4, |_, x| x == 1);
        assert_eq!(resize_mask(&m, 1, 3).bits, vec![false, true, false]);
    }

    /// Direct evaluation of the align-corners-false formula at one output cell.
    fn bilinear_oracle(g: &FeatureGrid, oh: usize, ow: usize, oy: usize, ox: usize, c: usize) -> f64 {
        let sy = (((oy as f64 + 0.5) * g.height as f64 / oh as f64) - 0.5).clamp(0.0, (g.height - 1) as f64);
        let sx = (((ox as f64 + 0.5) * g.width as f64 / ow as f64) - 0.5).clamp(0.0, (g.width - 1) as f64);
        let mut acc = 0.0;
        for y in 0..g.height {
            for x in 0..g.width {
                let wy = (1.0 - (sy - y as f64).abs()).max(0.0);
                let wx = (1.0 - (sx - x as f64).abs()).max(0.0);
                acc += wy * wx * g.cell(y, x)[c];
            }
        }
        acc
    }

    #[test]
    fn resize_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 5, 7, 3);
        assert_eq!(bilinear_resize(&g, 5, 7), g);
    }

    #[test]
    fn resize_two_by_two_to_one() {
        // columns 0 and 4
        let g = FeatureGrid::from_vec(2, 2, 1, vec![0.0, 4.0, 0.0, 4.0]).unwrap();
        let out = bilinear_resize(&g, 1, 1);
        assert_eq!(out.data, vec![2.0]);
    }

    #[test]
    fn resize_matches_formula_oracle() {
        let g = FeatureGrid::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let out = bilinear_resize(&g, 3, 3);
        // centre sample sits at (0.5, 0.5) in source coordinates
        assert!((out.cell(1, 1)[0] - 2.75).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let (oh, ow) = (rng.gen_range(1..9), rng.gen_range(1..9));
            let g = random_grid(&mut rng, h, w, 2);
            let out = bilinear_resize(&g, oh, ow);
            for y in 0..oh {
                for x in 0..ow {
                    for c in 0..2 {
                        let want = bilinear_oracle(&g, oh, ow, y, x, c);
                        assert!((out.cell(y, x)[c] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn resize_adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let g = random_grid(&mut rng, 3, 5, 2);
            let u = random_grid(&mut rng, 7, 4, 2);
            let lhs = dot(&bilinear_resize(&g, 7, 4).data, &u.data);
            let rhs = dot(&g.data, &bilinear_resize_adjoint(&u, 3, 5).data);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_all_ones_is_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_grid(&mut rng, 4, 4, 3);
        let pooled = masked_mean_pool(&g, &BinaryMask::full(4, 4)).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..16).map(|i| g.cell_at(i)[c]).sum::<f64>() / 16.0;
            assert!((pooled[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_single_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_grid(&mut rng, 4, 4, 3);
        let mut m = BinaryMask::empty(4, 4);
        m.set(2, 1, true);
        assert_eq!(masked_mean_pool(&g, &m).unwrap(), g.cell(2, 1).to_vec());
    }

    #[test]
    fn pool_empty_mask_errors() {
        let g = FeatureGrid::zeros(4, 4, 2);
        assert!(matches!(
            masked_mean_pool(&g, &BinaryMask::empty(4, 4)),
            Err(Error::EmptyMask)
        ));
        // one pixel of 64x64 vanishes at 4x4 after thresholding
        let mut m = BinaryMask::empty(64, 64);
        m.set(7, 7, true);
        assert!(matches!(masked_mean_pool(&g, &m), Err(Error::EmptyMask)));
        assert!(masked_mean_pool_with(&g, &m, MaskMode::Soft).is_ok());
    }

    #[test]
    fn window_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_grid(&mut rng, 4, 4, 2);
        let w1 = window_partition(&g, 1).unwrap();
        assert_eq!(w1.count(), 16);
        assert_eq!(w1.data, g.data);
        let w4 = window_partition(&g, 4).unwrap();
        assert_eq!(w4.count(), 1);
        for j in 0..16 {
            assert_eq!(w4.get(0, 1, j), g.cell(j / 4, j % 4)[1]);
        }
        let big = random_grid(&mut rng, 8, 8, 3);
        assert_eq!(window_merge(&window_partition(&big, 4).unwrap()), big);
        assert!(matches!(window_partition(&big, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x.iter().sum(), &[1.0, -2.0, 3.0], 1e-5).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let err = finite_diff_grad(|x| if x[1] > 0.5 { f64::NAN } else { 0.0 }, &[0.0, 0.5], 1e-3);
        assert!(matches!(err, Err(Error::NumericalFailure { coordinate: 1 })));
    }

    #[test]
    fn cosine_examples() {
        let a = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &a[..2]), Err(Error::ZeroNorm)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn resize_preserves_constants(h in 1usize..9, w in 1usize..9, oh in 1usize..17, ow in 1usize..17, v in -1e3f64..1e3) {
                let g = FeatureGrid::filled(h, w, 2, v);
                let out = bilinear_resize(&g, oh, ow);
                prop_assert!(out.data.iter().all(|&x| x == v));
            }

            #[test]
            fn pool_ignores_background_shuffle(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = random_grid(&mut rng, 6, 6, 3);
                let m = BinaryMask::from_fn(6, 6, |_, _| rng.gen_bool(0.4));
                prop_assume!(!m.is_empty());
                let mut shuffled = g.clone();
                let bg: Vec<usize> = (0..36).filter(|&i| !m.bits[i]).collect();
                for (k, &i) in bg.iter().enumerate() {
                    let j = bg[(k * 7 + 3) % bg.len()];
                    for c in 0..3 {
                        shuffled.data[i * 3 + c] = g.data[j * 3 + c] * 2.0 + 1.0;
                    }
                }
                prop_assert_eq!(masked_mean_pool(&g, &m).unwrap(), masked_mean_pool(&shuffled, &m).unwrap());
            }

            #[test]
            fn quadratic_gradients(seed in 0u64..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = 4;
                let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let f = |v: &[f64]| {
                    let mut s = 0.0;
                    for i in 0..n { for j in 0..n { s += v[i] * a[i * n + j] * v[j]; } }
                    s
                };
                let eps = 1e-5;
                let num = finite_diff_grad(f, &x, eps).unwrap();
                for i in 0..n {
                    let exact: f64 = (0..n).map(|j| (a[i * n + j] + a[j * n + i]) * x[j]).sum();
                    prop_assert!((num[i] - exact).abs() <= 10.0 * eps * exact.abs().max(1.0));
                }
            }
        }
    }
}
