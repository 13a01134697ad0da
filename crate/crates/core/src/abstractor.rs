//! Multi-scale cropping and the windowed token abstractor that compresses the
//! upsampled feature grid into visual tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::linalg::softmax_rows;
use crate::tensorcore::{bilinear_resize, dot, FeatureGrid};

pub const DEFAULT_CROP_SIZE: usize = 448;
pub const DEFAULT_MAX_CROPS: usize = 6;
pub const DEFAULT_WINDOW: usize = 4;

const ASPECT_TOL: f64 = 1e-12;

/// Sub-image grid. A global thumbnail is always produced in addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPlan {
    pub rows: usize,
    pub cols: usize,
    pub crop_size: usize,
}

impl CropPlan {
    pub fn tiles(&self) -> usize {
        self.rows * self.cols
    }

    /// Global thumbnail plus tiles.
    pub fn images(&self) -> usize {
        self.tiles() + 1
    }
}

fn aspect_error(h: usize, w: usize, rows: usize, cols: usize) -> f64 {
    ((w as f64 / h as f64).ln() - (cols as f64 / rows as f64).ln()).abs()
}

fn resolution_error(h: usize, w: usize, rows: usize, cols: usize, crop: usize) -> f64 {
    let area = (rows * cols * crop * crop) as f64;
    ((h as f64 * w as f64) / area).ln().abs()
}

/// Picks the `rows x cols` grid (`rows * cols <= max_crops`) whose aspect ratio
/// is closest to the image's in log space. Aspect ties go to the grid whose
/// total area is closest to the image area, then to more tiles, then to fewer
/// rows.
pub fn plan_crops(height: usize, width: usize, crop_size: usize, max_crops: usize) -> CropPlan {
    let (h, w) = (height.max(1), width.max(1));
    let mut best: Option<(f64, f64, usize, usize)> = None;
    for rows in 1..=max_crops.max(1) {
        for cols in 1..=max_crops.max(1) / rows {
            let a = aspect_error(h, w, rows, cols);
            let r = resolution_error(h, w, rows, cols, crop_size);
            let better = match best {
                None => true,
                Some((ba, br, brows, bcols)) => {
                    if (a - ba).abs() > ASPECT_TOL {
                        a < ba
                    } else if (r - br).abs() > ASPECT_TOL {
                        r < br
                    } else if rows * cols != brows * bcols {
                        rows * cols > brows * bcols
                    } else {
                        rows < brows
                    }
                }
            };
            if better {
                best = Some((a, r, rows, cols));
            }
        }
    }
    let (_, _, rows, cols) = best.expect("at least the 1x1 grid is considered");
    CropPlan {
        rows,
        cols,
        crop_size,
    }
}

/// Global thumbnail first, then the tiles of the resized image in row-major order.
pub fn crop_images(image: &FeatureGrid, plan: &CropPlan) -> Vec<FeatureGrid> {
    let i = plan.crop_size;
    let mut out = Vec::with_capacity(plan.images());
    out.push(bilinear_resize(image, i, i));
    let big = bilinear_resize(image, plan.rows * i, plan.cols * i);
    for r in 0..plan.rows {
        for c in 0..plan.cols {
            let mut tile = FeatureGrid::zeros(i, i, image.dim);
            for y in 0..i {
                for x in 0..i {
                    tile.cell_mut(y, x).copy_from_slice(big.cell(r * i + y, c * i + x));
                }
            }
            out.push(tile);
        }
    }
    out
}

/// Output of [`token_abstract`]: the compressed grid and the per-window
/// softmax weights (`windows x s^2`, positions row-major within a window).
#[derive(Debug, Clone, PartialEq)]
pub struct Abstracted {
    pub output: FeatureGrid,
    pub alpha: Vec<f64>,
    pub window: usize,
}

fn window_cell(y0: usize, x0: usize, s: usize, j: usize) -> (usize, usize) {
    (y0 + j / s, x0 + j % s)
}

/// Each `s x s` window collapses to `sum_j alpha_j F[j]` with
/// `alpha = softmax_j(e_s . F[j])`.
pub fn token_abstract(features: &FeatureGrid, e_s: &[f64], s: usize) -> Result<Abstracted> {
    if e_s.len() != features.dim {
        return Err(Error::dims(features.dim.to_string(), e_s.len().to_string()));
    }
    if s == 0 || !features.height.is_multiple_of(s) || !features.width.is_multiple_of(s) {
        return Err(Error::Shape(format!(
            "window {s} does not divide {}x{}",
            features.height, features.width
        )));
    }
    let (oh, ow) = (features.height / s, features.width / s);
    let s2 = s * s;
    let mut alpha = vec![0.0; oh * ow * s2];
    let mut output = FeatureGrid::zeros(oh, ow, features.dim);
    for wy in 0..oh {
        for wx in 0..ow {
            let w = wy * ow + wx;
            let a = &mut alpha[w * s2..(w + 1) * s2];
            for (j, aj) in a.iter_mut().enumerate() {
                let (y, x) = window_cell(wy * s, wx * s, s, j);
                *aj = dot(e_s, features.cell(y, x));
            }
            softmax_rows(a, s2);
            let dst = output.cell_mut(wy, wx);
            for (j, &aj) in a.iter().enumerate() {
                let (y, x) = window_cell(wy * s, wx * s, s, j);
                for (d, v) in dst.iter_mut().zip(features.cell(y, x)) {
                    *d += aj * v;
                }
            }
        }
    }
    Ok(Abstracted {
        output,
        alpha,
        window: s,
    })
}

/// Gradients of [`token_abstract`] w.r.t. the input grid and `e_s`.
pub fn token_abstract_backward(
    features: &FeatureGrid,
    e_s: &[f64],
    fwd: &Abstracted,
    grad_out: &FeatureGrid,
) -> (FeatureGrid, Vec<f64>) {
    let s = fwd.window;
    let s2 = s * s;
    let (oh, ow) = (fwd.output.height, fwd.output.width);
    let mut gf = FeatureGrid::zeros(features.height, features.width, features.dim);
    let mut ge = vec![0.0; e_s.len()];
    for wy in 0..oh {
        for wx in 0..ow {
            let w = wy * ow + wx;
            let a = &fwd.alpha[w * s2..(w + 1) * s2];
            let g = grad_out.cell(wy, wx);
            let g_out = dot(g, fwd.output.cell(wy, wx));
            for (j, &aj) in a.iter().enumerate() {
                let (y, x) = window_cell(wy * s, wx * s, s, j);
                let f = features.cell(y, x);
                let gl = aj * (dot(g, f) - g_out);
                for (c, d) in gf.cell_mut(y, x).iter_mut().enumerate() {
                    *d += aj * g[c] + gl * e_s[c];
                }
                for (d, v) in ge.iter_mut().zip(f) {
                    *d += gl * v;
                }
            }
        }
    }
    (gf, ge)
}

/// Where a visual token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// 0 is the global thumbnail, `1..` are tiles in crop order.
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

/// Flattened visual tokens `V` with per-token provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualSequence {
    pub tokens: Vec<Vec<f64>>,
    pub provenance: Vec<Provenance>,
    pub side: usize,
    pub dim: usize,
}

impl VisualSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn images(&self) -> usize {
        if self.side == 0 {
            0
        } else {
            self.tokens.len() / (self.side * self.side)
        }
    }

    /// Inverse of [`flatten_sequence`].
    pub fn to_grids(&self) -> Vec<FeatureGrid> {
        let mut grids = vec![FeatureGrid::zeros(self.side, self.side, self.dim); self.images()];
        for (tok, p) in self.tokens.iter().zip(&self.provenance) {
            grids[p.image].cell_mut(p.row, p.col).copy_from_slice(tok);
        }
        grids
    }
}

/// Visual tokens per image times images: `(i / (p * s / 4))^2 * (tiles + 1)`.
pub fn visual_token_count(crop_size: usize, patch: usize, window: usize, tiles: usize) -> usize {
    let side = 4 * crop_size / (patch * window);
    side * side * (tiles + 1)
}

/// Global grid first, then tiles in crop order; each grid row-major.
pub fn flatten_sequence(grids: &[FeatureGrid]) -> Result<VisualSequence> {
    let first = grids.first().ok_or(Error::EmptyBatch)?;
    if first.height != first.width {
        return Err(Error::Shape(format!("grid {}x{} is not square", first.height, first.width)));
    }
    let (side, dim) = (first.height, first.dim);
    let mut tokens = Vec::with_capacity(grids.len() * side * side);
    let mut provenance = Vec::with_capacity(tokens.capacity());
    for (image, g) in grids.iter().enumerate() {
        if g.height != side || g.width != side || g.dim != dim {
            return Err(Error::Shape(format!(
                "grid {image} is {}x{}x{}, expected {side}x{side}x{dim}",
                g.height, g.width, g.dim
            )));
        }
        for row in 0..side {
            for col in 0..side {
                tokens.push(g.cell(row, col).to_vec());
                provenance.push(Provenance { image, row, col });
            }
        }
    }
    Ok(VisualSequence {
        tokens,
        provenance,
        side,
        dim,
    })
}
