use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{BpeVocab, TokenRecord};
use crate::error::{Error, Result};
use crate::evalkit::{
    fg_iou, retrieval_score_and_map, roc_auc, similarity_map, zero_shot_foreground, EvalReport, ReportItem, RetrievalScoring,
};
use crate::model::ModelParams;
use crate::tensorcore::{cosine_similarity, masked_mean_pool, resize_mask, BinaryMask, FeatureGrid};

/// Held-out alignment quality of a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Pooled feature vs own token embedding, ranked against every other token.
    pub pair_auc: f64,
    /// Per-token zero-shot segmentation IoU at the given threshold.
    pub mean_fg_iou: f64,
    /// Mean of the space-negation foreground map over text cells.
    pub text_foreground: f64,
    /// Same over background cells.
    pub background_foreground: f64,
    pub tokens: usize,
}

/// Mask at feature resolution: bilinear resize, then `>= 0.5`.
pub fn mask_to_features(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    resize_mask(mask, height, width)
}

/// Scores every record. For segmentation, the ground truth of a token is the
/// union of all its occurrences in the image, since the similarity map of a
/// token cannot tell instances apart.
pub fn alignment_report(
    params: &ModelParams,
    vocab: &BpeVocab,
    records: &[TokenRecord],
    threshold: f64,
) -> Result<AlignmentReport> {
    let space = vocab.id(" ");
    let candidates = content_tokens(vocab);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    let mut ious = Vec::new();
    let (mut text_fg, mut bg_fg) = (Vec::new(), Vec::new());
    for rec in records {
        let f = params.features(&rec.image_grid())?;
        for en in rec.entries.iter().filter(|e| !e.is_whitespace()) {
            let mask = rec.token_mask(en);
            if mask.is_empty() {
                continue;
            }
            let t = match masked_mean_pool(&f, &mask) {
                Ok(t) => t,
                Err(Error::EmptyMask) => continue,
                Err(e) => return Err(e),
            };
            for &c in &candidates {
                let s = cosine_similarity(&t, params.token_embedding(c)?).unwrap_or(0.0);
                if c == en.token_id {
                    pos.push(s);
                } else {
                    neg.push(s);
                }
            }
        }
        ious.extend(token_ious(params, rec, &f, threshold)?.into_iter().map(|(_, v)| v));
        if let Some(space) = space {
            let fg = zero_shot_foreground(&f, params.token_embedding(space)?)?;
            let text = mask_to_features(&rec.mask.foreground(), f.height, f.width);
            let (mut ts, mut tn, mut bs, mut bn) = (0.0, 0, 0.0, 0);
            for (i, &on) in text.bits.iter().enumerate() {
                if on {
                    ts += fg.scores[i];
                    tn += 1;
                } else {
                    bs += fg.scores[i];
                    bn += 1;
                }
            }
            if tn > 0 && bn > 0 {
                text_fg.push(ts / tn as f64);
                bg_fg.push(bs / bn as f64);
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(AlignmentReport {
        pair_auc: roc_auc(&pos, &neg)?,
        mean_fg_iou: mean(&ious),
        text_foreground: mean(&text_fg),
        background_foreground: mean(&bg_fg),
        tokens: pos.len(),
    })
}

/// Tokens that can be scored: everything except the space and the unknown symbol.
fn content_tokens(vocab: &BpeVocab) -> Vec<usize> {
    let space = vocab.id(" ");
    (0..vocab.len()).filter(|&i| Some(i) != space && Some(i) != vocab.unk_id()).collect()
}

/// IoU per distinct non-whitespace token of one record, against the union of
/// that token's masks.
fn token_ious(params: &ModelParams, rec: &TokenRecord, f: &FeatureGrid, threshold: f64) -> Result<Vec<(usize, f64)>> {
    let mut by_token: BTreeMap<usize, BinaryMask> = BTreeMap::new();
    for en in rec.entries.iter().filter(|e| !e.is_whitespace()) {
        let mask = rec.token_mask(en);
        if mask.is_empty() {
            continue;
        }
        by_token
            .entry(en.token_id)
            .or_insert_with(|| BinaryMask::empty(mask.height, mask.width))
            .union_with(&mask)?;
    }
    let mut out = Vec::with_capacity(by_token.len());
    for (&id, mask) in &by_token {
        let gt = mask_to_features(mask, f.height, f.width);
        if gt.is_empty() {
            continue;
        }
        let pred = similarity_map(f, params.token_embedding(id)?)?.minmax().binarize(threshold);
        out.push((id, fg_iou(&pred, &gt)?));
    }
    Ok(out)
}

/// Zero-shot segmentation over a corpus: one item per (record, token).
pub fn segmentation_report(
    params: &ModelParams,
    vocab: &BpeVocab,
    records: &[TokenRecord],
    threshold: f64,
) -> Result<EvalReport> {
    let mut items = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        let f = params.features(&rec.image_grid())?;
        for (id, value) in token_ious(params, rec, &f, threshold)? {
            items.push(ReportItem {
                name: format!("{r}:{}", vocab.token(id).unwrap_or("?")),
                value,
            });
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let value = items.iter().map(|i| i.value).sum::<f64>() / items.len() as f64;
    Ok(EvalReport {
        metric: "fgIoU".into(),
        value,
        items,
    })
}

/// Token-to-image retrieval: every content token that occurs somewhere in the
/// corpus queries all images; an image is relevant when it contains the token.
pub fn retrieval_report(
    params: &ModelParams,
    vocab: &BpeVocab,
    records: &[TokenRecord],
    scoring: &RetrievalScoring,
) -> Result<EvalReport> {
    let gallery = records
        .iter()
        .map(|r| params.features(&r.image_grid()))
        .collect::<Result<Vec<_>>>()?;
    let mut ids = Vec::new();
    let mut relevance = Vec::new();
    for id in content_tokens(vocab) {
        let rel: Vec<bool> = records.iter().map(|r| r.entries.iter().any(|e| e.token_id == id)).collect();
        if rel.iter().any(|&b| b) {
            ids.push(id);
            relevance.push(rel);
        }
    }
    if ids.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let queries = ids
        .iter()
        .map(|&id| params.token_embedding(id).map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let mut report = retrieval_score_and_map(&queries, &gallery, &relevance, scoring)?;
    for (item, &id) in report.items.iter_mut().zip(&ids) {
        item.name = vocab.token(id).unwrap_or("?").to_string();
    }
    Ok(report)
}
