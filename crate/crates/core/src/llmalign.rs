//! Token alignment at the language-model level, over hidden states from a
//! small frozen stub model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abstractor::CropPlan;
use crate::corpus::TokenEntry;
use crate::error::{Error, Result};
use crate::losses::{total_alignment_loss, AlignmentBatch, LossOutput, LossWeights, SigOptions};
use crate::model::linalg::{matmul, matmul_a_bt, softmax_rows};
use crate::tensorcore::{bilinear_resize, bilinear_resize_adjoint, BinaryMask, FeatureGrid};

/// Hidden states of one layer, laid out as visual, question, answer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub states: Vec<Vec<f64>>,
    pub n_v: usize,
    pub n_q: usize,
    pub n_a: usize,
    pub layer: usize,
}

impl HiddenStates {
    pub fn new(states: Vec<Vec<f64>>, n_v: usize, n_q: usize, n_a: usize, layer: usize) -> Result<Self> {
        if states.len() != n_v + n_q + n_a {
            return Err(Error::dims((n_v + n_q + n_a).to_string(), states.len().to_string()));
        }
        Ok(Self {
            states,
            n_v,
            n_q,
            n_a,
            layer,
        })
    }

    pub fn visual(&self) -> &[Vec<f64>] {
        &self.states[..self.n_v]
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerTokenRef {
    pub entry: TokenEntry,
    pub absolute_index: usize,
}

pub fn locate_answer_token(entry: &TokenEntry, n_v: usize, n_q: usize, n_a: usize) -> Result<AnswerTokenRef> {
    if entry.index_in_text >= n_a {
        return Err(Error::Index {
            index: entry.index_in_text,
            len: n_a,
        });
    }
    Ok(AnswerTokenRef {
        entry: entry.clone(),
        absolute_index: n_v + n_q + entry.index_in_text,
    })
}

fn check_visual_len(len: usize, plan: &CropPlan, side: usize) -> Result<()> {
    let want = plan.images() * side * side;
    if len != want {
        return Err(Error::Shape(format!("{len} visual tokens, plan needs {want}")));
    }
    Ok(())
}

/// Places tile tokens back into one `(rows*side) x (cols*side)` map. The
/// global thumbnail (first `side^2` tokens) is dropped.
pub fn reassemble_submaps(visual: &[Vec<f64>], plan: &CropPlan, side: usize) -> Result<FeatureGrid> {
    check_visual_len(visual.len(), plan, side)?;
    let dim = visual.first().map_or(0, Vec::len);
    let mut out = FeatureGrid::zeros(plan.rows * side, plan.cols * side, dim);
    let per = side * side;
    for tile in 0..plan.tiles() {
        let (tr, tc) = (tile / plan.cols, tile % plan.cols);
        for j in 0..per {
            let v = &visual[(tile + 1) * per + j];
            if v.len() != dim {
                return Err(Error::dims(dim.to_string(), v.len().to_string()));
            }
            out.cell_mut(tr * side + j / side, tc * side + j % side).copy_from_slice(v);
        }
    }
    Ok(out)
}

/// Transpose of [`reassemble_submaps`]; global-thumbnail slots get zeros.
pub fn reassemble_adjoint(grad: &FeatureGrid, plan: &CropPlan, side: usize) -> Vec<Vec<f64>> {
    let per = side * side;
    let mut out = vec![vec![0.0; grad.dim]; plan.images() * per];
    for tile in 0..plan.tiles() {
        let (tr, tc) = (tile / plan.cols, tile % plan.cols);
        for j in 0..per {
            out[(tile + 1) * per + j].copy_from_slice(grad.cell(tr * side + j / side, tc * side + j % side));
        }
    }
    out
}

/// Masked average of a feature map bilinearly resized to the mask resolution.
#[derive(Debug, Clone)]
pub struct LlmPool {
    pub value: Vec<f64>,
    cells: Vec<usize>,
    in_h: usize,
    in_w: usize,
    mask_h: usize,
    mask_w: usize,
}

impl LlmPool {
    /// Gradient w.r.t. the un-resized feature map.
    pub fn backward(&self, grad: &[f64]) -> FeatureGrid {
        let mut g = FeatureGrid::zeros(self.mask_h, self.mask_w, grad.len());
        let inv = 1.0 / self.cells.len() as f64;
        for &c in &self.cells {
            for (d, v) in g.cell_at_mut(c).iter_mut().zip(grad) {
                *d = v * inv;
            }
        }
        bilinear_resize_adjoint(&g, self.in_h, self.in_w)
    }
}

pub fn llm_pool_token(features: &FeatureGrid, mask: &BinaryMask) -> Result<LlmPool> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let resized = bilinear_resize(features, mask.height, mask.width);
    let cells: Vec<usize> = (0..mask.bits.len()).filter(|&i| mask.bits[i]).collect();
    let mut value = vec![0.0; features.dim];
    for &c in &cells {
        for (v, x) in value.iter_mut().zip(resized.cell_at(c)) {
            *v += x;
        }
    }
    let n = cells.len() as f64;
    value.iter_mut().for_each(|v| *v /= n);
    Ok(LlmPool {
        value,
        cells,
        in_h: features.height,
        in_w: features.width,
        mask_h: mask.height,
        mask_w: mask.width,
    })
}

#[derive(Debug, Clone)]
pub struct LlmAlignOutput {
    pub loss: LossOutput,
    /// Same layout as `HiddenStates::states`.
    pub grad_hidden: Vec<Vec<f64>>,
    /// Refs skipped because their mask was empty.
    pub skipped: usize,
}

/// Pairs each answer token's hidden state with the masked pool of the
/// reassembled visual hidden states and evaluates the alignment objectives.
#[allow(clippy::too_many_arguments)]
pub fn llm_token_align_loss(
    hidden: &HiddenStates,
    refs: &[(AnswerTokenRef, BinaryMask)],
    plan: &CropPlan,
    side: usize,
    k: f64,
    b: f64,
    weights: &LossWeights,
    opts: &SigOptions,
) -> Result<LlmAlignOutput> {
    let fmap = reassemble_submaps(hidden.visual(), plan, side)?;
    let mut pools = Vec::new();
    let mut used = Vec::new();
    for (r, mask) in refs {
        if r.absolute_index >= hidden.states.len() {
            return Err(Error::Index {
                index: r.absolute_index,
                len: hidden.states.len(),
            });
        }
        match llm_pool_token(&fmap, mask) {
            Ok(p) => {
                pools.push(p);
                used.push(r.absolute_index);
            }
            Err(Error::EmptyMask) => {}
            Err(e) => return Err(e),
        }
    }
    if used.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch = AlignmentBatch::new(
        used.iter().map(|&i| hidden.states[i].clone()).collect(),
        pools.iter().map(|p| p.value.clone()).collect(),
    )?;
    let loss = total_alignment_loss(&batch, k, b, weights, opts)?;
    let mut grad_hidden = vec![vec![0.0; hidden.dim()]; hidden.states.len()];
    let mut gmap = FeatureGrid::zeros(fmap.height, fmap.width, fmap.dim);
    for (n, &i) in used.iter().enumerate() {
        for (d, v) in grad_hidden[i].iter_mut().zip(&loss.grad_e[n]) {
            *d += v;
        }
        let g = pools[n].backward(&loss.grad_t[n]);
        for (d, v) in gmap.data.iter_mut().zip(&g.data) {
            *d += v;
        }
    }
    for (d, g) in grad_hidden.iter_mut().zip(reassemble_adjoint(&gmap, plan, side)) {
        for (x, y) in d.iter_mut().zip(g) {
            *x += y;
        }
    }
    Ok(LlmAlignOutput {
        loss,
        grad_hidden,
        skipped: refs.len() - used.len(),
    })
}

/// Teacher-forced next-token cross-entropy. Row `r` of `logits` (`n_a x z`)
/// predicts answer token `r + 1`; the last row is unused. Returns the summed
/// loss and its gradient w.r.t. `logits`.
pub fn next_token_ce(logits: &[f64], ids: &[usize], z: usize) -> Result<(f64, Vec<f64>)> {
    let n_a = ids.len();
    if logits.len() != n_a * z {
        return Err(Error::dims(format!("{n_a}x{z}"), logits.len().to_string()));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= z) {
        return Err(Error::UnknownToken { id, vocab_size: z });
    }
    let mut probs = logits.to_vec();
    softmax_rows(&mut probs, z);
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for r in 0..n_a.saturating_sub(1) {
        let row = &logits[r * z..(r + 1) * z];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let target = ids[r + 1];
        loss += lse - row[target];
        grad[r * z..(r + 1) * z].copy_from_slice(&probs[r * z..(r + 1) * z]);
        grad[r * z + target] -= 1.0;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubLlmConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    /// Hidden layer tapped for alignment, `0..=layers` (0 is the input embedding).
    pub tap_layer: usize,
    pub vocab_size: usize,
    pub visual_dim: usize,
    pub seed: u64,
}

/// Frozen, seeded stand-in for a language model. Visual tokens enter through a
/// linear map; text tokens are embeddings plus the mean visual state; each
/// layer is `h + h A`; logits are `h W_out` at the final layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StubLlm {
    pub config: StubLlmConfig,
    w_in: Vec<f64>,
    embed: Vec<f64>,
    layers: Vec<Vec<f64>>,
    w_out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StubForward {
    pub tapped: HiddenStates,
    /// `n_a x vocab` answer logits.
    pub logits: Vec<f64>,
}

impl StubLlm {
    pub fn new(config: StubLlmConfig) -> Result<Self> {
        if config.tap_layer > config.layers || config.hidden_dim == 0 || config.vocab_size == 0 {
            return Err(Error::Config(format!(
                "tap_layer {} must be <= layers {} and dims positive",
                config.tap_layer, config.layers
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (h, d, z) = (config.hidden_dim, config.visual_dim, config.vocab_size);
        let mut u = |n: usize, bound: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        let w_in = u(d * h, 1.0 / (d as f64).sqrt());
        let embed = u(z * h, 1.0);
        let layers = (0..config.layers).map(|_| u(h * h, 0.1 / (h as f64).sqrt())).collect();
        let w_out = u(h * z, 1.0 / (h as f64).sqrt());
        Ok(Self {
            config,
            w_in,
            embed,
            layers,
            w_out,
        })
    }

    pub fn forward(&self, visual: &[Vec<f64>], question: &[usize], answer: &[usize]) -> Result<StubForward> {
        let (h, d, z) = (self.config.hidden_dim, self.config.visual_dim, self.config.vocab_size);
        if let Some(&id) = question.iter().chain(answer).find(|&&id| id >= z) {
            return Err(Error::UnknownToken { id, vocab_size: z });
        }
        let n_v = visual.len();
        if n_v == 0 {
            return Err(Error::EmptyBatch);
        }
        let flat: Vec<f64> = visual
            .iter()
            .map(|v| {
                if v.len() == d {
                    Ok(v.as_slice())
                } else {
                    Err(Error::dims(d.to_string(), v.len().to_string()))
                }
            })
            .collect::<Result<Vec<_>>>()?
            .concat();
        let mut x = matmul(&flat, &self.w_in, n_v, d, h);
        let mut mean = vec![0.0; h];
        for row in x.chunks(h) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n_v as f64;
            }
        }
        for &id in question.iter().chain(answer) {
            x.extend(self.embed[id * h..(id + 1) * h].iter().zip(&mean).map(|(e, m)| e + m));
        }
        let n = n_v + question.len() + answer.len();
        let mut tapped = (self.config.tap_layer == 0).then(|| x.clone());
        for (l, a) in self.layers.iter().enumerate() {
            let dx = matmul(&x, a, n, h, h);
            for (v, dv) in x.iter_mut().zip(&dx) {
                *v += dv;
            }
            if l + 1 == self.config.tap_layer {
                tapped = Some(x.clone());
            }
        }
        let ans = &x[(n_v + question.len()) * h..];
        let logits = matmul(ans, &self.w_out, answer.len(), h, z);
        let states = tapped.expect("tap layer validated").chunks(h).map(<[f64]>::to_vec).collect();
        Ok(StubForward {
            tapped: HiddenStates::new(states, n_v, question.len(), answer.len(), self.config.tap_layer)?,
            logits,
        })
    }

    /// Gradient w.r.t. the visual inputs, given gradients at the tapped layer
    /// and at the answer logits. The stub itself stays frozen.
    pub fn backward(&self, n_v: usize, n_q: usize, grad_tapped: Option<&[Vec<f64>]>, grad_logits: Option<&[f64]>) -> Vec<Vec<f64>> {
        let (h, d, z) = (self.config.hidden_dim, self.config.visual_dim, self.config.vocab_size);
        let n_a = grad_logits.map_or(0, |g| g.len() / z);
        let n = grad_tapped.map_or(n_v + n_q + n_a, <[_]>::len);
        let mut g = vec![0.0; n * h];
        if let Some(gl) = grad_logits {
            let ga = matmul_a_bt(gl, &self.w_out, n_a, z, h);
            g[(n_v + n_q) * h..(n_v + n_q + n_a) * h].copy_from_slice(&ga);
        }
        let add_tap = |g: &mut [f64]| {
            if let Some(gt) = grad_tapped {
                for (row, t) in g.chunks_mut(h).zip(gt) {
                    for (a, b) in row.iter_mut().zip(t) {
                        *a += b;
                    }
                }
            }
        };
        if self.config.tap_layer == self.layers.len() {
            add_tap(&mut g);
        }
        for l in (0..self.layers.len()).rev() {
            let back = matmul_a_bt(&g, &self.layers[l], n, h, h);
            for (a, b) in g.iter_mut().zip(&back) {
                *a += b;
            }
            if l == self.config.tap_layer {
                add_tap(&mut g);
            }
        }
        // text positions read the visual mean
        let mut text_sum = vec![0.0; h];
        for row in g[n_v * h..].chunks(h) {
            for (s, v) in text_sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        for row in g[..n_v * h].chunks_mut(h) {
            for (a, s) in row.iter_mut().zip(&text_sum) {
                *a += s / n_v as f64;
            }
        }
        let gv = matmul_a_bt(&g[..n_v * h], &self.w_in, n_v, h, d);
        gv.chunks(d).map(<[f64]>::to_vec).collect()
    }
}
