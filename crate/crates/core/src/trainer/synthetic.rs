//! Seeded glyph corpus: blocky 4x4 glyphs drawn on a cell grid, one glyph
//! class per single-letter token.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_record, build_token_masks, BpeVocab, CharMask, RecordParts, TokenRecord};
use crate::error::{Error, Result};
use crate::tensorcore::BinaryMask;

const GLYPH_SEED: u64 = 0x7f4a_7c15;
const BLOCKS: usize = 4;
pub const UNK: &str = "<unk>";
pub const SYNTHETIC_QUESTION: &str = "Recognizing full text.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub image_side: usize,
    /// Side of one glyph cell in pixels; a multiple of 4.
    pub cell: usize,
    pub glyph_classes: usize,
    pub glyphs_per_image: usize,
    /// Uniform pixel noise amplitude in `[0, 1]` intensity units.
    pub noise: f64,
    pub records: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            image_side: 64,
            cell: 8,
            glyph_classes: 8,
            glyphs_per_image: 6,
            noise: 0.05,
            records: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub vocab: BpeVocab,
    pub records: Vec<TokenRecord>,
}

pub fn glyph_char(class: usize) -> char {
    (b'a' + class as u8) as char
}

/// Letters `a..`, the space and an unknown symbol; no merges.
pub fn glyph_vocab(classes: usize) -> Result<BpeVocab> {
    let mut base: Vec<String> = (0..classes).map(|c| glyph_char(c).to_string()).collect();
    base.push(" ".into());
    BpeVocab::new(base, Vec::new(), Some(UNK.into()))
}

/// Fixed 4x4 block patterns, 12 of 16 blocks on, pairwise distinct.
pub fn glyph_patterns(classes: usize) -> Vec<[bool; BLOCKS * BLOCKS]> {
    let mut rng = ChaCha8Rng::seed_from_u64(GLYPH_SEED);
    let mut out: Vec<[bool; 16]> = Vec::with_capacity(classes);
    while out.len() < classes {
        let mut idx: Vec<usize> = (0..16).collect();
        idx.shuffle(&mut rng);
        let mut p = [false; 16];
        for &i in &idx[..12] {
            p[i] = true;
        }
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

impl SyntheticCorpusSpec {
    fn validate(&self) -> Result<()> {
        if self.cell == 0 || !self.cell.is_multiple_of(BLOCKS) || !self.image_side.is_multiple_of(self.cell) {
            return Err(Error::Spec(format!(
                "cell {} must be a multiple of {BLOCKS} dividing image side {}",
                self.cell, self.image_side
            )));
        }
        if self.glyph_classes == 0 || self.glyph_classes > 26 {
            return Err(Error::Spec(format!("glyph_classes {} not in 1..=26", self.glyph_classes)));
        }
        let capacity = (self.image_side / self.cell).pow(2);
        if self.glyphs_per_image == 0 || self.glyphs_per_image > capacity {
            return Err(Error::Spec(format!(
                "{} glyphs per image exceeds grid capacity {capacity}",
                self.glyphs_per_image
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Spec(format!("noise {} not in [0, 1]", self.noise)));
        }
        Ok(())
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let vocab = glyph_vocab(spec.glyph_classes)?;
    let patterns = glyph_patterns(spec.glyph_classes);
    let grid = spec.image_side / spec.cell;
    let block = spec.cell / BLOCKS;
    let side = spec.image_side;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.records);
    for _ in 0..spec.records {
        let mut cells: Vec<usize> = (0..grid * grid).collect();
        cells.shuffle(&mut rng);
        let mut chosen = cells[..spec.glyphs_per_image].to_vec();
        chosen.sort_unstable();
        let classes: Vec<usize> = chosen.iter().map(|_| rng.gen_range(0..spec.glyph_classes)).collect();
        let mut image = RgbImage::new(side as u32, side as u32);
        for px in image.pixels_mut() {
            let v = to_u8(0.15 + rng.gen_range(-spec.noise..=spec.noise));
            *px = Rgb([v, v, v]);
        }
        let mut char_masks = Vec::with_capacity(chosen.len());
        for (k, (&cell, &class)) in chosen.iter().zip(&classes).enumerate() {
            let (cy, cx) = (cell / grid * spec.cell, cell % grid * spec.cell);
            let pat = &patterns[class];
            let mask = BinaryMask::from_fn(side, side, |y, x| {
                y >= cy && y < cy + spec.cell && x >= cx && x < cx + spec.cell && pat[(y - cy) / block * BLOCKS + (x - cx) / block]
            });
            for y in cy..cy + spec.cell {
                for x in cx..cx + spec.cell {
                    if mask.get(y, x) {
                        let v = to_u8(0.85 + rng.gen_range(-spec.noise..=spec.noise));
                        image.put_pixel(x as u32, y as u32, Rgb([v, v, v]));
                    }
                }
            }
            // glyph k sits at character 2k of "a b c ..."
            char_masks.push(CharMask { char_index: 2 * k, mask });
        }
        let answer: Vec<String> = classes.iter().map(|&c| glyph_char(c).to_string()).collect();
        let answer = answer.join(" ");
        let spans = vocab.tokenize(&answer)?;
        let pairs = build_token_masks(&spans, &char_masks, side, side)?;
        let assembled = assemble_record(RecordParts {
            image,
            question: SYNTHETIC_QUESTION.into(),
            answer,
            pairs,
            image_type: Some("synthetic".into()),
            bbox: None,
        })?;
        records.push(assembled.record);
    }
    Ok(SyntheticCorpus { vocab, records })
}
