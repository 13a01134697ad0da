//! Visual encoder, 4x deconvolution upsampler, token embedding table and the
//! learnable alignment scalars.

mod checkpoint;
mod forward;
pub(crate) mod linalg;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, save_checkpoint_with, Checkpoint, Dtype, CHECKPOINT_VERSION};
pub use forward::{upsample_project, EncoderCache, ForwardCache};

/// How the `log 10` initial value of `k` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleInit {
    /// `k = ln 10`.
    #[default]
    Ln,
    /// `k = log10(10) = 1`.
    Log10,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Adds a single-head self-attention sublayer to every encoder block.
    #[serde(default)]
    pub attention: bool,
    #[serde(default)]
    pub scale_init: ScaleInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 14,
            encoder_dim: 32,
            encoder_layers: 2,
            embed_dim: 32,
            vocab_size: 256,
            seed: 0,
            attention: false,
            scale_init: ScaleInit::Ln,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.encoder_dim == 0 || self.embed_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "patch_size, encoder_dim, embed_dim and vocab_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        2 * self.encoder_dim
    }

    pub fn patch_inputs(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
}

/// Residual block: optional attention sublayer, then `x + W2 softplus(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub attention: Option<AttentionParams>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// All trainable state. Matrices are row-major `[in][out]`; deconvolution
/// kernels are `[in][ky][kx][out]` with a 2x2 kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub patch_w: Vec<f64>,
    pub patch_b: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    pub deconv1_w: Vec<f64>,
    pub deconv1_b: Vec<f64>,
    pub deconv2_w: Vec<f64>,
    pub deconv2_b: Vec<f64>,
    pub proj_w: Vec<f64>,
    pub proj_b: Vec<f64>,
    pub token_embed: Vec<f64>,
    /// Embedding of the `<text>` query token that drives the abstractor.
    pub special: Vec<f64>,
    pub k: f64,
    pub b: f64,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Deconvolution kernel that copies every channel to all four outputs.
fn nearest_upsample(c: usize) -> Vec<f64> {
    let mut w = vec![0.0; c * 4 * c];
    for ci in 0..c {
        for tap in 0..4 {
            w[(ci * 4 + tap) * c + ci] = 1.0;
        }
    }
    w
}

pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.encoder_dim;
    let h = config.mlp_hidden();
    let d = config.embed_dim;
    let pin = config.patch_inputs();
    let patch_w = uniform(&mut rng, pin * c, pin);
    let blocks = (0..config.encoder_layers)
        .map(|_| {
            let attention = config.attention.then(|| AttentionParams {
                wq: uniform(&mut rng, c * c, c),
                wk: uniform(&mut rng, c * c, c),
                wv: uniform(&mut rng, c * c, c),
                wo: uniform(&mut rng, c * c, c),
            });
            BlockParams {
                attention,
                w1: uniform(&mut rng, c * h, c),
                b1: vec![0.0; h],
                w2: uniform(&mut rng, h * c, h),
                b2: vec![0.0; c],
            }
        })
        .collect();
    let deconv1_w = nearest_upsample(c);
    let deconv2_w = nearest_upsample(c);
    let proj_w = uniform(&mut rng, c * d, c);
    let token_embed = uniform(&mut rng, config.vocab_size * d, 1);
    let special = uniform(&mut rng, d, 1);
    let k = match config.scale_init {
        ScaleInit::Ln => std::f64::consts::LN_10,
        ScaleInit::Log10 => 1.0,
    };
    Ok(ModelParams {
        config: config.clone(),
        patch_w,
        patch_b: vec![0.0; c],
        blocks,
        deconv1_w,
        deconv1_b: vec![0.0; c],
        deconv2_w,
        deconv2_b: vec![0.0; c],
        proj_w,
        proj_b: vec![0.0; d],
        token_embed,
        special,
        k,
        b: -10.0,
    })
}

/// Shape descriptor used by the checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ModelParams {
    pub fn embedding_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn token_embedding(&self, token_id: usize) -> Result<&[f64]> {
        let d = self.config.embed_dim;
        if token_id >= self.config.vocab_size {
            return Err(Error::UnknownToken {
                id: token_id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(&self.token_embed[token_id * d..(token_id + 1) * d])
    }

    pub fn token_embedding_mut(&mut self, token_id: usize) -> &mut [f64] {
        let d = self.config.embed_dim;
        &mut self.token_embed[token_id * d..(token_id + 1) * d]
    }

    /// Every array in a fixed order, with its manifest name and shape.
    pub fn arrays(&self) -> Vec<(ArraySpec, &[f64])> {
        let c = self.config.encoder_dim;
        let h = self.config.mlp_hidden();
        let d = self.config.embed_dim;
        let spec = |name: String, shape: Vec<usize>| ArraySpec { name, shape };
        let mut out: Vec<(ArraySpec, &[f64])> = vec![
            (spec("patch_w".into(), vec![self.config.patch_inputs(), c]), &self.patch_w),
            (spec("patch_b".into(), vec![c]), &self.patch_b),
        ];
        for (i, blk) in self.blocks.iter().enumerate() {
            if let Some(a) = &blk.attention {
                out.push((spec(format!("block{i}.wq"), vec![c, c]), &a.wq));
                out.push((spec(format!("block{i}.wk"), vec![c, c]), &a.wk));
                out.push((spec(format!("block{i}.wv"), vec![c, c]), &a.wv));
                out.push((spec(format!("block{i}.wo"), vec![c, c]), &a.wo));
            }
            out.push((spec(format!("block{i}.w1"), vec![c, h]), &blk.w1));
            out.push((spec(format!("block{i}.b1"), vec![h]), &blk.b1));
            out.push((spec(format!("block{i}.w2"), vec![h, c]), &blk.w2));
            out.push((spec(format!("block{i}.b2"), vec![c]), &blk.b2));
        }
        out.extend([
            (spec("deconv1_w".into(), vec![c, 2, 2, c]), self.deconv1_w.as_slice()),
            (spec("deconv1_b".into(), vec![c]), &self.deconv1_b),
            (spec("deconv2_w".into(), vec![c, 2, 2, c]), &self.deconv2_w),
            (spec("deconv2_b".into(), vec![c]), &self.deconv2_b),
            (spec("proj_w".into(), vec![c, d]), &self.proj_w),
            (spec("proj_b".into(), vec![d]), &self.proj_b),
            (spec("token_embed".into(), vec![self.config.vocab_size, d]), &self.token_embed),
            (spec("special".into(), vec![d]), &self.special),
            (spec("k".into(), vec![1]), std::slice::from_ref(&self.k)),
            (spec("b".into(), vec![1]), std::slice::from_ref(&self.b)),
        ]);
        out
    }

    /// Mutable views in the same order as [`ModelParams::arrays`].
    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.patch_w, &mut self.patch_b];
        for blk in self.blocks.iter_mut() {
            if let Some(a) = &mut blk.attention {
                out.push(&mut a.wq);
                out.push(&mut a.wk);
                out.push(&mut a.wv);
                out.push(&mut a.wo);
            }
            out.push(&mut blk.w1);
            out.push(&mut blk.b1);
            out.push(&mut blk.w2);
            out.push(&mut blk.b2);
        }
        out.extend([
            self.deconv1_w.as_mut_slice(),
            &mut self.deconv1_b,
            &mut self.deconv2_w,
            &mut self.deconv2_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.token_embed,
            &mut self.special,
            std::slice::from_mut(&mut self.k),
            std::slice::from_mut(&mut self.b),
        ]);
        out
    }

    /// Same structure, all values zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for a in z.arrays_mut() {
            a.fill(0.0);
        }
        z
    }

    pub fn num_values(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// Flattened copy of every value, in [`ModelParams::arrays`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.arrays().into_iter().flat_map(|(_, a)| a.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut offset = index;
        for a in self.arrays_mut() {
            if offset < a.len() {
                a[offset] = value;
                return;
            }
            offset -= a.len();
        }
        panic!("flat index {index} out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, arraywise.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let src = other.arrays();
        for (dst, (_, s)) in self.arrays_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += scale * v;
            }
        }
    }
}
