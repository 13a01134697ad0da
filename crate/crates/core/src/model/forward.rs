use super::linalg::{add_bias, col_sum_acc, matmul, matmul_a_bt, matmul_at_b_acc, sigmoid, softmax_rows, softplus};
use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensorcore::FeatureGrid;

#[derive(Debug, Clone)]
struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    mixed: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    x_in: Vec<f64>,
    attn: Option<AttnCache>,
    x_mid: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// Intermediates of the patch encoder.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub grid_h: usize,
    pub grid_w: usize,
    patches: Vec<f64>,
    blocks: Vec<BlockCache>,
}

/// Intermediates of the full image -> upsampled-feature pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub encoder: EncoderCache,
    pub encoded: FeatureGrid,
    up1: FeatureGrid,
    up2: FeatureGrid,
}

fn extract_patches(image: &FeatureGrid, p: usize) -> Result<(usize, usize, Vec<f64>)> {
    if image.dim != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", image.dim)));
    }
    if !image.height.is_multiple_of(p) || !image.width.is_multiple_of(p) || image.height == 0 || image.width == 0 {
        return Err(Error::Shape(format!(
            "image {}x{} not divisible by patch size {p}",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / p, image.width / p);
    let mut out = Vec::with_capacity(gh * gw * 3 * p * p);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    out.extend_from_slice(image.cell(py * p + dy, px * p + dx));
                }
            }
        }
    }
    Ok((gh, gw, out))
}

fn deconv(input: &FeatureGrid, w: &[f64], b: &[f64]) -> FeatureGrid {
    let c_in = input.dim;
    let c_out = b.len();
    let n = input.cells();
    let y = matmul(&input.data, w, n, c_in, 4 * c_out);
    let mut out = FeatureGrid::zeros(input.height * 2, input.width * 2, c_out);
    for i in 0..input.height {
        for j in 0..input.width {
            let row = &y[(i * input.width + j) * 4 * c_out..][..4 * c_out];
            for u in 0..2 {
                for v in 0..2 {
                    let src = &row[(u * 2 + v) * c_out..][..c_out];
                    let dst = out.cell_mut(2 * i + u, 2 * j + v);
                    for co in 0..c_out {
                        dst[co] = src[co] + b[co];
                    }
                }
            }
        }
    }
    out
}

/// Returns the gradient w.r.t. the deconvolution input.
fn deconv_backward(
    input: &FeatureGrid,
    grad_out: &FeatureGrid,
    w: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> FeatureGrid {
    let c_in = input.dim;
    let c_out = grad_out.dim;
    let n = input.cells();
    let mut g = vec![0.0; n * 4 * c_out];
    for i in 0..input.height {
        for j in 0..input.width {
            let row = &mut g[(i * input.width + j) * 4 * c_out..][..4 * c_out];
            for u in 0..2 {
                for v in 0..2 {
                    row[(u * 2 + v) * c_out..][..c_out].copy_from_slice(grad_out.cell(2 * i + u, 2 * j + v));
                }
            }
        }
    }
    col_sum_acc(grad_b, &grad_out.data);
    matmul_at_b_acc(grad_w, &input.data, &g, n, c_in, 4 * c_out);
    let gx = matmul_a_bt(&g, w, n, 4 * c_out, c_in);
    FeatureGrid {
        height: input.height,
        width: input.width,
        dim: c_in,
        data: gx,
    }
}

/// Two stride-2 2x2 transposed convolutions followed by a per-cell `C -> D`
/// projection: `(h, w, C)` becomes `(4h, 4w, D)`.
pub fn upsample_project(params: &ModelParams, encoded: &FeatureGrid) -> FeatureGrid {
    let up1 = deconv(encoded, &params.deconv1_w, &params.deconv1_b);
    let up2 = deconv(&up1, &params.deconv2_w, &params.deconv2_b);
    project(params, &up2)
}

fn project(params: &ModelParams, up2: &FeatureGrid) -> FeatureGrid {
    let c = params.config.encoder_dim;
    let d = params.config.embed_dim;
    let mut data = matmul(&up2.data, &params.proj_w, up2.cells(), c, d);
    add_bias(&mut data, &params.proj_b);
    FeatureGrid {
        height: up2.height,
        width: up2.width,
        dim: d,
        data,
    }
}

impl ModelParams {
    /// Patch projection followed by the encoder blocks: `(H, W, 3)` to `(H/p, W/p, C)`.
    pub fn patch_embed(&self, image: &FeatureGrid) -> Result<FeatureGrid> {
        self.encode(image).map(|(g, _)| g)
    }

    pub fn encode(&self, image: &FeatureGrid) -> Result<(FeatureGrid, EncoderCache)> {
        let p = self.config.patch_size;
        let c = self.config.encoder_dim;
        let hid = self.config.mlp_hidden();
        let (gh, gw, patches) = extract_patches(image, p)?;
        let n = gh * gw;
        let mut x = matmul(&patches, &self.patch_w, n, self.config.patch_inputs(), c);
        add_bias(&mut x, &self.patch_b);
        let mut caches = Vec::with_capacity(self.blocks.len());
        let scale = 1.0 / (c as f64).sqrt();
        for blk in &self.blocks {
            let x_in = x.clone();
            let attn = blk.attention.as_ref().map(|a| {
                let q = matmul(&x, &a.wq, n, c, c);
                let k = matmul(&x, &a.wk, n, c, c);
                let v = matmul(&x, &a.wv, n, c, c);
                let mut probs = matmul_a_bt(&q, &k, n, c, n);
                probs.iter_mut().for_each(|s| *s *= scale);
                softmax_rows(&mut probs, n);
                let mixed = matmul(&probs, &v, n, n, c);
                let o = matmul(&mixed, &a.wo, n, c, c);
                for (xv, ov) in x.iter_mut().zip(&o) {
                    *xv += ov;
                }
                AttnCache { q, k, v, probs, mixed }
            });
            let x_mid = x.clone();
            let mut pre = matmul(&x, &blk.w1, n, c, hid);
            add_bias(&mut pre, &blk.b1);
            let act: Vec<f64> = pre.iter().map(|&h| softplus(h)).collect();
            let mut y = matmul(&act, &blk.w2, n, hid, c);
            add_bias(&mut y, &blk.b2);
            for (xv, yv) in x.iter_mut().zip(&y) {
                *xv += yv;
            }
            caches.push(BlockCache {
                x_in,
                attn,
                x_mid,
                pre,
                act,
            });
        }
        Ok((
            FeatureGrid {
                height: gh,
                width: gw,
                dim: c,
                data: x,
            },
            EncoderCache {
                grid_h: gh,
                grid_w: gw,
                patches,
                blocks: caches,
            },
        ))
    }

    /// Image to upsampled, projected features `(4H/p, 4W/p, D)`.
    pub fn forward(&self, image: &FeatureGrid) -> Result<(FeatureGrid, ForwardCache)> {
        let (encoded, encoder) = self.encode(image)?;
        let up1 = deconv(&encoded, &self.deconv1_w, &self.deconv1_b);
        let up2 = deconv(&up1, &self.deconv2_w, &self.deconv2_b);
        let out = project(self, &up2);
        Ok((
            out,
            ForwardCache {
                encoder,
                encoded,
                up1,
                up2,
            },
        ))
    }

    pub fn features(&self, image: &FeatureGrid) -> Result<FeatureGrid> {
        self.forward(image).map(|(f, _)| f)
    }

    /// Accumulates parameter gradients for `d loss / d output = grad_out`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &FeatureGrid, grads: &mut ModelParams) {
        let c = self.config.encoder_dim;
        let d = self.config.embed_dim;
        let up2 = &cache.up2;
        let n_up = up2.cells();
        col_sum_acc(&mut grads.proj_b, &grad_out.data);
        matmul_at_b_acc(&mut grads.proj_w, &up2.data, &grad_out.data, n_up, c, d);
        let g_up2 = FeatureGrid {
            height: up2.height,
            width: up2.width,
            dim: c,
            data: matmul_a_bt(&grad_out.data, &self.proj_w, n_up, d, c),
        };
        let g_up1 = deconv_backward(
            &cache.up1,
            &g_up2,
            &self.deconv2_w,
            &mut grads.deconv2_w,
            &mut grads.deconv2_b,
        );
        let g_enc = deconv_backward(
            &cache.encoded,
            &g_up1,
            &self.deconv1_w,
            &mut grads.deconv1_w,
            &mut grads.deconv1_b,
        );
        self.encoder_backward(&cache.encoder, g_enc.data, grads);
    }

    fn encoder_backward(&self, cache: &EncoderCache, mut gx: Vec<f64>, grads: &mut ModelParams) {
        let c = self.config.encoder_dim;
        let hid = self.config.mlp_hidden();
        let n = cache.grid_h * cache.grid_w;
        let scale = 1.0 / (c as f64).sqrt();
        for (bi, blk) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[bi];
            let gblk = &mut grads.blocks[bi];
            // MLP sublayer: x_out = x_mid + softplus(x_mid W1 + b1) W2 + b2
            col_sum_acc(&mut gblk.b2, &gx);
            matmul_at_b_acc(&mut gblk.w2, &bc.act, &gx, n, hid, c);
            let mut g_pre = matmul_a_bt(&gx, &blk.w2, n, c, hid);
            for (g, &h) in g_pre.iter_mut().zip(&bc.pre) {
                *g *= sigmoid(h);
            }
            col_sum_acc(&mut gblk.b1, &g_pre);
            matmul_at_b_acc(&mut gblk.w1, &bc.x_mid, &g_pre, n, c, hid);
            let g_mid = matmul_a_bt(&g_pre, &blk.w1, n, hid, c);
            for (g, v) in gx.iter_mut().zip(&g_mid) {
                *g += v;
            }
            // attention sublayer: x_mid = x_in + softmax(q k^T / sqrt(c)) v Wo
            if let (Some(a), Some(ac)) = (&blk.attention, &bc.attn) {
                let ga = gblk.attention.as_mut().expect("grad structure mirrors params");
                matmul_at_b_acc(&mut ga.wo, &ac.mixed, &gx, n, c, c);
                let g_mixed = matmul_a_bt(&gx, &a.wo, n, c, c);
                let g_probs = matmul_a_bt(&g_mixed, &ac.v, n, c, n);
                let mut g_v = vec![0.0; n * c];
                matmul_at_b_acc(&mut g_v, &ac.probs, &g_mixed, n, n, c);
                let mut g_scores = vec![0.0; n * n];
                for i in 0..n {
                    let pr = &ac.probs[i * n..(i + 1) * n];
                    let gp = &g_probs[i * n..(i + 1) * n];
                    let inner: f64 = pr.iter().zip(gp).map(|(p, g)| p * g).sum();
                    for j in 0..n {
                        g_scores[i * n + j] = pr[j] * (gp[j] - inner) * scale;
                    }
                }
                let g_q = matmul(&g_scores, &ac.k, n, n, c);
                let mut g_k = vec![0.0; n * c];
                matmul_at_b_acc(&mut g_k, &g_scores, &ac.q, n, n, c);
                matmul_at_b_acc(&mut ga.wq, &bc.x_in, &g_q, n, c, c);
                matmul_at_b_acc(&mut ga.wk, &bc.x_in, &g_k, n, c, c);
                matmul_at_b_acc(&mut ga.wv, &bc.x_in, &g_v, n, c, c);
                for (wm, gm) in [(&a.wq, &g_q), (&a.wk, &g_k), (&a.wv, &g_v)] {
                    let back = matmul_a_bt(gm, wm, n, c, c);
                    for (g, v) in gx.iter_mut().zip(&back) {
                        *g += v;
                    }
                }
            }
        }
        col_sum_acc(&mut grads.patch_b, &gx);
        matmul_at_b_acc(
            &mut grads.patch_w,
            &cache.patches,
            &gx,
            n,
            self.config.patch_inputs(),
            c,
        );
    }
}
