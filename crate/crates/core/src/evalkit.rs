//! Evaluation: similarity maps, zero-shot foreground, segmentation IoU,
//! retrieval mAP, edit distance and linear probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::linalg::sigmoid;
use crate::tensorcore::{dot, norm, BinaryMask, FeatureGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
}

impl SimilarityMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.scores[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Cells with score `>= threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.scores.iter().map(|&s| s >= threshold).collect(),
        }
    }

    /// Rescales to `[0, 1]`; a constant map becomes all `0.5`.
    pub fn minmax(&self) -> SimilarityMap {
        let lo = self.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.max();
        let scores = if hi > lo {
            self.scores.iter().map(|s| ((s - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.5; self.scores.len()]
        };
        SimilarityMap { scores, ..*self }
    }
}

/// Per-cell cosine against `query`; zero-norm cells score 0.
pub fn similarity_map(features: &FeatureGrid, query: &[f64]) -> Result<SimilarityMap> {
    if query.len() != features.dim {
        return Err(Error::dims(features.dim.to_string(), query.len().to_string()));
    }
    let nq = norm(query);
    if nq == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let scores = (0..features.cells())
        .map(|i| {
            let c = features.cell_at(i);
            let nc = norm(c);
            if nc == 0.0 {
                0.0
            } else {
                (dot(c, query) / (nc * nq)).clamp(-1.0, 1.0)
            }
        })
        .collect();
    Ok(SimilarityMap {
        height: features.height,
        width: features.width,
        scores,
    })
}

/// Foreground map from the space token: `1 - minmax(similarity)`.
pub fn zero_shot_foreground(features: &FeatureGrid, space_embedding: &[f64]) -> Result<SimilarityMap> {
    let s = similarity_map(features, space_embedding)?.minmax();
    Ok(SimilarityMap {
        scores: s.scores.iter().map(|v| 1.0 - v).collect(),
        ..s
    })
}

fn counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize, usize)> {
    if !pred.same_dims(gt) {
        return Err(Error::dims(
            format!("{}x{}", gt.height, gt.width),
            format!("{}x{}", pred.height, pred.width),
        ));
    }
    let mut inter = 0;
    let (mut p, mut g) = (0, 0);
    for (&a, &b) in pred.bits.iter().zip(&gt.bits) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    Ok((inter, p, g))
}

/// Foreground IoU; two empty masks score 1.
pub fn fg_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (inter, p, g) = counts(pred, gt)?;
    let union = p + g - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Pixel F1; two empty masks score 1.
pub fn f_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (inter, p, g) = counts(pred, gt)?;
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportItem {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub items: Vec<ReportItem>,
}

/// Average precision of one ranked list. Ranking is by score descending, ties
/// by ascending index.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Result<f64> {
    if scores.len() != relevant.len() {
        return Err(Error::dims(relevant.len().to_string(), scores.len().to_string()));
    }
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::UndefinedAp { query: 0 });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

/// mAP over a `queries x gallery` score matrix.
pub fn mean_average_precision(scores: &[Vec<f64>], relevance: &[Vec<bool>]) -> Result<EvalReport> {
    if scores.len() != relevance.len() {
        return Err(Error::dims(relevance.len().to_string(), scores.len().to_string()));
    }
    if scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let items = scores
        .iter()
        .zip(relevance)
        .enumerate()
        .map(|(q, (s, r))| {
            let value = average_precision(s, r).map_err(|e| match e {
                Error::UndefinedAp { .. } => Error::UndefinedAp { query: q },
                other => other,
            })?;
            Ok(ReportItem {
                name: format!("query{q}"),
                value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let value = items.iter().map(|i| i.value).sum::<f64>() / items.len() as f64;
    Ok(EvalReport {
        metric: "mAP".into(),
        value,
        items,
    })
}

/// How an image-level retrieval score is obtained from a similarity map.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum RetrievalScoring {
    /// Max cell of the cosine map.
    #[default]
    MaxCell,
    /// `sigmoid(w * max_cell + b) > 0.5`, scored 1 or 0.
    Probe(LinearProbe),
}

pub fn retrieval_score(features: &FeatureGrid, query: &[f64], scoring: &RetrievalScoring) -> Result<f64> {
    let s = similarity_map(features, query)?.max();
    Ok(match scoring {
        RetrievalScoring::MaxCell => s,
        RetrievalScoring::Probe(p) => {
            if p.predict(&[s]) > 0.5 {
                1.0
            } else {
                0.0
            }
        }
    })
}

pub fn retrieval_score_and_map(
    queries: &[Vec<f64>],
    gallery: &[FeatureGrid],
    relevance: &[Vec<bool>],
    scoring: &RetrievalScoring,
) -> Result<EvalReport> {
    if relevance.len() != queries.len() || relevance.iter().any(|r| r.len() != gallery.len()) {
        return Err(Error::dims(
            format!("{}x{}", queries.len(), gallery.len()),
            format!("{} relevance rows", relevance.len()),
        ));
    }
    let scores = queries
        .iter()
        .map(|q| gallery.iter().map(|g| retrieval_score(g, q, scoring)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    mean_average_precision(&scores, relevance)
}

/// Raw Levenshtein distance and `raw / max(len)` (0 when both are empty).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditDistance {
    pub raw: usize,
    pub normalized: f64,
}

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(pred: &str, gt: &str) -> EditDistance {
    let a: Vec<char> = pred.chars().collect();
    let b: Vec<char> = gt.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + (a[i - 1] != b[j - 1]) as usize;
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let raw = prev[b.len()];
    let longest = a.len().max(b.len());
    EditDistance {
        raw,
        normalized: if longest == 0 { 0.0 } else { raw as f64 / longest as f64 },
    }
}

/// Edit distance report over paired lines.
pub fn edit_distance_report(preds: &[String], gts: &[String]) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::dims(gts.len().to_string(), preds.len().to_string()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let items: Vec<ReportItem> = preds
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (p, g))| ReportItem {
            name: format!("line{i}"),
            value: edit_distance(p, g).normalized,
        })
        .collect();
    Ok(EvalReport {
        metric: "normalized_edit_distance".into(),
        value: items.iter().map(|i| i.value).sum::<f64>() / items.len() as f64,
        items,
    })
}

/// Area under the ROC curve; ties count half.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    let mut wins = 0.0;
    for &p in positives {
        for &n in negatives {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (positives.len() * negatives.len()) as f64)
}

/// Logistic-regression layer over frozen features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearProbe {
    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.weights, x) + self.bias)
    }

    /// Per-cell foreground probability.
    pub fn segment(&self, features: &FeatureGrid) -> SimilarityMap {
        SimilarityMap {
            height: features.height,
            width: features.width,
            scores: (0..features.cells()).map(|i| self.predict(features.cell_at(i))).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.5,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent on the mean logistic loss.
pub fn linear_probe_train(features: &[Vec<f64>], labels: &[bool], opts: &ProbeOptions) -> Result<LinearProbe> {
    if features.len() != labels.len() {
        return Err(Error::dims(labels.len().to_string(), features.len().to_string()));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::DegenerateLabels);
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("probe features have differing lengths".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = LinearProbe {
        weights: (0..d).map(|_| rng.gen_range(-0.01..0.01)).collect(),
        bias: 0.0,
    };
    let n = features.len() as f64;
    for _ in 0..opts.epochs {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let r = probe.predict(x) - if y { 1.0 } else { 0.0 };
            for (g, v) in gw.iter_mut().zip(x) {
                *g += r * v / n;
            }
            gb += r / n;
        }
        for (w, g) in probe.weights.iter_mut().zip(&gw) {
            *w -= opts.lr * g;
        }
        probe.bias -= opts.lr * gb;
    }
    Ok(probe)
}
