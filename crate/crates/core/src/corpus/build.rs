//! Corpus builder: character annotations -> token records on disk.
//!
//! Input directory layout: one JSON annotation per sample,
//!
//! ```json
//! {"image": "img.png", "answer": "...", "question": "...",
//!  "char_masks": [{"char_index": 0, "mask": "c0.png"}],
//!  "image_type": "document", "bbox": [x1, y1, x2, y2]}
//! ```
//!
//! Paths are relative to the annotation. Any non-zero mask pixel is "on".

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bpe::BpeVocab;
use super::masks::{build_token_masks, CharMask, OverlapWarning, TokenMaskPair};
use super::record::{assemble_record, decode_rgb, write_record, RecordParts, TokenRecord};
use crate::error::{Error, Result};
use crate::tensorcore::BinaryMask;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharMaskRef {
    pub char_index: usize,
    pub mask: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharAnnotation {
    pub image: String,
    pub answer: String,
    #[serde(default = "default_question")]
    pub question: String,
    #[serde(default)]
    pub char_masks: Vec<CharMaskRef>,
    #[serde(default)]
    pub image_type: Option<String>,
    #[serde(default)]
    pub bbox: Option<[u32; 4]>,
}

fn default_question() -> String {
    "Recognizing full text.".into()
}

#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    /// How many answer tokens to keep per record; `None` keeps all of them.
    pub select: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BuildSummary {
    pub records: Vec<PathBuf>,
    pub overlaps: Vec<(String, OverlapWarning)>,
}

/// Keeps `count` randomly chosen pairs, preserving answer order.
pub fn select_tokens(
    mut pairs: Vec<TokenMaskPair>,
    count: Option<usize>,
    rng: &mut impl rand::Rng,
) -> Vec<TokenMaskPair> {
    match count {
        Some(n) if n < pairs.len() => {
            let mut keep = rand::seq::index::sample(rng, pairs.len(), n).into_vec();
            keep.sort_unstable();
            let mut it = keep.into_iter().peekable();
            let mut idx = 0;
            pairs.retain(|_| {
                let hit = it.peek() == Some(&idx);
                if hit {
                    it.next();
                }
                idx += 1;
                hit
            });
            pairs
        }
        _ => pairs,
    }
}

fn load_binary_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let luma = img.to_luma16();
    Ok(BinaryMask {
        height: luma.height() as usize,
        width: luma.width() as usize,
        bits: luma.as_raw().iter().map(|&v| v != 0).collect(),
    })
}

/// Turns one annotation into a record: tokenize, union char masks, select, paint.
pub fn build_record(
    annotation_path: &Path,
    vocab: &BpeVocab,
    select: Option<usize>,
    rng: &mut impl rand::Rng,
) -> Result<(TokenRecord, Vec<OverlapWarning>)> {
    let text = std::fs::read_to_string(annotation_path).map_err(|e| Error::io(annotation_path, e))?;
    let ann: CharAnnotation = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: annotation_path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let dir = annotation_path.parent().unwrap_or(Path::new("."));
    let image_path = dir.join(&ann.image);
    let bytes = std::fs::read(&image_path).map_err(|e| Error::io(&image_path, e))?;
    let image = decode_rgb(&bytes, &image_path)?;
    let (w, h) = (image.width() as usize, image.height() as usize);
    let char_masks = ann
        .char_masks
        .iter()
        .map(|r| {
            Ok(CharMask {
                char_index: r.char_index,
                mask: load_binary_mask(&dir.join(&r.mask))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spans = vocab.tokenize(&ann.answer)?;
    let pairs = build_token_masks(&spans, &char_masks, h, w)?;
    let pairs = select_tokens(pairs, select, rng);
    let assembled = assemble_record(RecordParts {
        image,
        question: ann.question,
        answer: ann.answer,
        pairs,
        image_type: ann.image_type,
        bbox: ann.bbox,
    })?;
    Ok((assembled.record, assembled.warnings))
}

/// Builds every annotation in `chars_dir` into `out_dir`.
///
/// Records are processed in parallel; each gets its own RNG stream derived from
/// `(seed, position)`, so output does not depend on scheduling.
pub fn build_corpus(
    chars_dir: &Path,
    out_dir: &Path,
    vocab: &BpeVocab,
    options: &BuildOptions,
) -> Result<BuildSummary> {
    let mut inputs = Vec::new();
    for entry in std::fs::read_dir(chars_dir).map_err(|e| Error::io(chars_dir, e))? {
        let path = entry.map_err(|e| Error::io(chars_dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            inputs.push(path);
        }
    }
    inputs.sort();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let built: Vec<(String, TokenRecord, Vec<OverlapWarning>)> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(i as u64);
            let (record, warnings) = build_record(path, vocab, options.select, &mut rng)?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("{i:06}"));
            Ok((name, record, warnings))
        })
        .collect::<Result<_>>()?;

    let mut summary = BuildSummary::default();
    for (name, record, warnings) in built {
        summary.records.push(write_record(out_dir, &name, &record)?);
        summary
            .overlaps
            .extend(warnings.into_iter().map(|w| (name.clone(), w)));
    }
    vocab.save(&out_dir.join("vocab.json"))?;
    Ok(summary)
}
