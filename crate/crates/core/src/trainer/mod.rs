//! Training loop: corpus records through the model, pooling and alignment
//! objectives, with an optional language-model branch.

mod config;
mod heldout;
mod optim;
mod synthetic;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abstractor::{crop_images, flatten_sequence, plan_crops, token_abstract, token_abstract_backward, VisualSequence};
use crate::corpus::{BpeVocab, TokenRecord};
use crate::error::{Error, Result};
use crate::llmalign::{llm_token_align_loss, locate_answer_token, next_token_ce, StubLlm, StubLlmConfig};
use crate::losses::{total_alignment_loss, AlignmentBatch, PairLabels, SigOptions};
use crate::model::{init_params, save_checkpoint, ForwardCache, ModelParams};
use crate::tensorcore::{FeatureGrid, PoolWeights};

pub use config::{OptimizerKind, Stage, TrainConfig};
pub use heldout::{alignment_report, mask_to_features, retrieval_report, segmentation_report, AlignmentReport};
pub use optim::{cosine_lr, Optimizer};
pub use synthetic::{
    generate_synthetic_corpus, glyph_char, glyph_patterns, glyph_vocab, SyntheticCorpus, SyntheticCorpusSpec,
    SYNTHETIC_QUESTION, UNK,
};

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub align: f64,
    pub llm_align: f64,
    pub ce: f64,
    pub pairs: usize,
    /// Token entries dropped because their mask pooled to nothing.
    pub skipped: usize,
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// The differentiable training objective for a fixed config and vocabulary.
#[derive(Debug, Clone)]
pub struct Objective {
    pub config: TrainConfig,
    pub vocab: BpeVocab,
    stub: Option<StubLlm>,
    space_id: Option<usize>,
}

struct RecordForward {
    cache: ForwardCache,
    features: FeatureGrid,
    pools: Vec<PoolWeights>,
}

impl Objective {
    pub fn new(config: TrainConfig, vocab: BpeVocab) -> Result<Self> {
        let mut config = config;
        config.validate()?;
        let stub = if config.stage == Stage::Pretrain {
            None
        } else {
            Some(StubLlm::new(StubLlmConfig {
                hidden_dim: config.llm_hidden,
                layers: config.llm_layers,
                tap_layer: config.llm_tap,
                vocab_size: vocab.len(),
                visual_dim: config.embed_dim,
                seed: config.seed ^ 0x11a1,
            })?)
        };
        let space_id = vocab.id(" ");
        Ok(Self {
            config,
            vocab,
            stub,
            space_id,
        })
    }

    pub fn init_params(&self) -> Result<ModelParams> {
        init_params(&self.config.model_config(self.vocab.len()))
    }

    fn sig_options(&self, groups: Vec<usize>) -> SigOptions {
        SigOptions {
            labels: if self.config.group_labels {
                PairLabels::ByGroup(groups)
            } else {
                PairLabels::Diagonal
            },
            normalize: self.config.normalize_sig,
        }
    }

    /// Loss only.
    pub fn loss(&self, params: &ModelParams, batch: &[&TokenRecord]) -> Result<StepLoss> {
        self.evaluate(params, batch, None)
    }

    /// Loss and the gradient w.r.t. every parameter.
    pub fn loss_and_grads(&self, params: &ModelParams, batch: &[&TokenRecord]) -> Result<(StepLoss, ModelParams)> {
        let mut grads = params.zeros_like();
        let loss = self.evaluate(params, batch, Some(&mut grads))?;
        Ok((loss, grads))
    }

    fn evaluate(&self, params: &ModelParams, batch: &[&TokenRecord], mut grads: Option<&mut ModelParams>) -> Result<StepLoss> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut out = StepLoss::default();
        if self.config.stage != Stage::Finetune {
            self.pooled_alignment(params, batch, grads.as_deref_mut(), &mut out)?;
        }
        if self.config.stage != Stage::Pretrain {
            for rec in batch {
                self.language_branch(params, rec, 1.0 / batch.len() as f64, grads.as_deref_mut(), &mut out)?;
            }
        }
        out.total = out.align + out.llm_align + out.ce;
        Ok(out)
    }

    fn pooled_alignment(
        &self,
        params: &ModelParams,
        batch: &[&TokenRecord],
        grads: Option<&mut ModelParams>,
        out: &mut StepLoss,
    ) -> Result<()> {
        let mut forwards = Vec::with_capacity(batch.len());
        let (mut e, mut t, mut groups, mut owner) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (ri, rec) in batch.iter().enumerate() {
            let (features, cache) = params.forward(&rec.image_grid())?;
            let mut pools = Vec::new();
            let mut masks: Vec<(usize, _)> = rec.entries.iter().map(|en| (en.token_id, rec.token_mask(en))).collect();
            if self.config.background_token {
                if let Some(space) = self.space_id {
                    masks.push((space, rec.mask.foreground().complement()));
                }
            }
            for (id, mask) in masks {
                if mask.is_empty() {
                    continue;
                }
                let pw = match PoolWeights::from_mask(&mask, features.height, features.width, self.config.mask_mode) {
                    Ok(pw) => pw,
                    Err(Error::EmptyMask) => {
                        out.skipped += 1;
                        continue;
                    }
                    Err(err) => return Err(err),
                };
                e.push(params.token_embedding(id)?.to_vec());
                t.push(pw.pool(&features));
                groups.push(id);
                owner.push((ri, pools.len()));
                pools.push(pw);
            }
            forwards.push(RecordForward { cache, features, pools });
        }
        if e.is_empty() {
            return Err(Error::EmptyBatch);
        }
        out.pairs += e.len();
        let ab = AlignmentBatch::new(e, t)?;
        let loss = total_alignment_loss(&ab, params.k, params.b, &self.config.weights, &self.sig_options(groups.clone()))
            .map_err(|err| match err {
                Error::NumericalFailure { .. } => Error::Diverged { step: 0, loss: f64::NAN },
                other => other,
            })?;
        out.align += loss.value;
        let Some(grads) = grads else { return Ok(()) };
        grads.k += loss.grad_k;
        grads.b += loss.grad_b;
        let mut grad_features: Vec<FeatureGrid> = forwards
            .iter()
            .map(|f| FeatureGrid::zeros(f.features.height, f.features.width, f.features.dim))
            .collect();
        for (n, &(ri, pi)) in owner.iter().enumerate() {
            for (d, v) in grads.token_embedding_mut(groups[n]).iter_mut().zip(&loss.grad_e[n]) {
                *d += v;
            }
            forwards[ri].pools[pi].backward(&loss.grad_t[n], &mut grad_features[ri]);
        }
        for (f, g) in forwards.iter().zip(&grad_features) {
            params.backward(&f.cache, g, grads);
        }
        Ok(())
    }

    fn token_ids(&self, text: &str) -> Result<Vec<usize>> {
        Ok(self.vocab.tokenize(text)?.into_iter().map(|s| s.token_id).collect())
    }

    fn language_branch(
        &self,
        params: &ModelParams,
        rec: &TokenRecord,
        scale: f64,
        grads: Option<&mut ModelParams>,
        out: &mut StepLoss,
    ) -> Result<()> {
        let stub = self.stub.as_ref().expect("stub exists outside pretraining");
        let c = &self.config;
        let image = rec.image_grid();
        let plan = plan_crops(image.height, image.width, c.crop_size, c.max_crops);
        let mut crops = Vec::with_capacity(plan.images());
        for crop in crop_images(&image, &plan) {
            let (f, cache) = params.forward(&crop)?;
            let abs = token_abstract(&f, &params.special, c.window)?;
            crops.push((f, cache, abs));
        }
        let seq = flatten_sequence(&crops.iter().map(|(_, _, a)| a.output.clone()).collect::<Vec<_>>())?;
        let q = self.token_ids(&rec.question)?;
        let a = self.token_ids(&rec.answer)?;
        let fwd = stub.forward(&seq.tokens, &q, &a)?;
        let mut grad_tapped = None;
        if c.llm_alignment_active() {
            let refs: Vec<_> = rec
                .entries
                .iter()
                .filter(|en| en.index_in_text < a.len())
                .map(|en| Ok((locate_answer_token(en, seq.len(), q.len(), a.len())?, rec.token_mask(en))))
                .collect::<Result<_>>()?;
            // sigmoid-loss groups follow the refs that survive the empty-mask filter
            let used: Vec<usize> = refs.iter().filter(|(_, m)| !m.is_empty()).map(|(r, _)| r.entry.token_id).collect();
            let opts = self.sig_options(used);
            match llm_token_align_loss(&fwd.tapped, &refs, &plan, seq.side, params.k, params.b, &c.weights, &opts) {
                Ok(la) => {
                    out.llm_align += scale * la.loss.value;
                    grad_tapped = Some((la.grad_hidden, la.loss.grad_k, la.loss.grad_b));
                }
                Err(Error::EmptyBatch) => {}
                Err(err) => return Err(err),
            }
        }
        let (ce, grad_logits) = next_token_ce(&fwd.logits, &a, self.vocab.len())?;
        out.ce += scale * ce;
        let Some(grads) = grads else { return Ok(()) };
        let grad_logits: Vec<f64> = grad_logits.iter().map(|g| g * scale).collect();
        let tapped = grad_tapped.map(|(gh, gk, gb)| {
            grads.k += scale * gk;
            grads.b += scale * gb;
            gh.into_iter().map(|row| row.into_iter().map(|v| v * scale).collect()).collect::<Vec<Vec<f64>>>()
        });
        let gv = stub.backward(seq.len(), q.len(), tapped.as_deref(), Some(&grad_logits));
        let grad_seq = VisualSequence {
            tokens: gv,
            provenance: seq.provenance.clone(),
            side: seq.side,
            dim: seq.dim,
        };
        for ((f, cache, abs), g) in crops.iter().zip(grad_seq.to_grids()) {
            let (gf, ge) = token_abstract_backward(f, &params.special, abs, &g);
            for (d, v) in grads.special.iter_mut().zip(&ge) {
                *d += v;
            }
            params.backward(cache, &gf, grads);
        }
        Ok(())
    }
}

/// One optimizer step. On a non-finite loss or update, `params` is left
/// untouched and `Diverged` is returned.
pub fn train_step(
    objective: &Objective,
    params: &mut ModelParams,
    optimizer: &mut Optimizer,
    batch: &[&TokenRecord],
    lr: f64,
    step: usize,
) -> Result<StepLoss> {
    let (loss, grads) = objective.loss_and_grads(params, batch).map_err(|e| match e {
        Error::Diverged { loss, .. } => Error::Diverged { step, loss },
        other => other,
    })?;
    if !loss.total.is_finite() || !grads.is_finite() {
        return Err(Error::Diverged { step, loss: loss.total });
    }
    let mut next = params.clone();
    optimizer.update(&mut next, &grads, lr);
    if !next.is_finite() {
        return Err(Error::Diverged { step, loss: loss.total });
    }
    *params = next;
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<StepMetric>,
    pub best_epoch_loss: Option<f64>,
}

/// Total optimizer steps for a corpus of `n` records.
pub fn total_steps(config: &TrainConfig, n: usize) -> usize {
    let per_epoch = n.div_ceil(config.batch_size);
    let all = config.epochs * per_epoch;
    config.max_steps.map_or(all, |m| all.min(m))
}

/// Runs the full schedule. With `out_dir`, writes `metrics.jsonl`,
/// `final.ckpt`, `best.ckpt` (lowest epoch-mean loss) and, on divergence,
/// `last_good.ckpt`.
pub fn train(config: &TrainConfig, vocab: &BpeVocab, records: &[TokenRecord], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let objective = Objective::new(config.clone(), vocab.clone())?;
    let mut params = objective.init_params()?;
    let mut optimizer = Optimizer::new(&objective.config);
    let total = total_steps(&objective.config, records.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut metrics = Vec::with_capacity(total);
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut best: Option<f64> = None;
    let mut step = 0;
    'epochs: for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(config.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let batch: Vec<&TokenRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let lr = cosine_lr(config.lr, step, total);
            let loss = match train_step(&objective, &mut params, &mut optimizer, &batch, lr, step) {
                Ok(l) => l,
                Err(err @ Error::Diverged { .. }) => {
                    if let Some(dir) = out_dir {
                        save_checkpoint(&dir.join("last_good.ckpt"), &params, Some(vocab))?;
                    }
                    return Err(err);
                }
                Err(err) => return Err(err),
            };
            let m = StepMetric {
                step,
                loss: loss.total,
                lr,
            };
            if let Some((f, p)) = log.as_mut() {
                let line = serde_json::to_string(&m).expect("metric serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
            }
            metrics.push(m);
            epoch_sum += loss.total;
            epoch_steps += 1;
            step += 1;
        }
        if epoch_steps > 0 {
            let mean = epoch_sum / epoch_steps as f64;
            if best.is_none_or(|b| mean < b) {
                best = Some(mean);
                if let Some(dir) = out_dir {
                    save_checkpoint(&dir.join("best.ckpt"), &params, Some(vocab))?;
                }
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("final.ckpt"), &params, Some(vocab))?;
        if best.is_none() {
            save_checkpoint(&dir.join("best.ckpt"), &params, Some(vocab))?;
        }
    }
    Ok(TrainOutcome {
        params,
        metrics,
        best_epoch_loss: best,
    })
}
