use serde::{Deserialize, Serialize};

use super::bpe::TokenSpan;
use crate::error::{Error, Result};
use crate::tensorcore::BinaryMask;

/// Character-level segmentation mask for one character of the answer.
#[derive(Debug, Clone, PartialEq)]
pub struct CharMask {
    pub char_index: usize,
    pub mask: BinaryMask,
}

/// A BPE token together with the union of its character masks.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMaskPair {
    pub text: String,
    pub token_id: usize,
    pub index_in_text: usize,
    pub mask: BinaryMask,
}

impl TokenMaskPair {
    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Pixels claimed by more than one token; they go to the lower `index_in_text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapWarning {
    pub kept: usize,
    pub dropped: usize,
    pub pixels: usize,
}

/// Unions each token's character masks into one token mask.
///
/// Characters without a mask contribute nothing, so whitespace tokens come back
/// empty. Token `i` of `spans` gets `index_in_text = i`.
pub fn build_token_masks(
    spans: &[TokenSpan],
    char_masks: &[CharMask],
    height: usize,
    width: usize,
) -> Result<Vec<TokenMaskPair>> {
    for cm in char_masks {
        if cm.mask.height != height || cm.mask.width != width {
            return Err(Error::dims(
                format!("{height}x{width}"),
                format!(
                    "{}x{} (char {})",
                    cm.mask.height, cm.mask.width, cm.char_index
                ),
            ));
        }
    }
    spans
        .iter()
        .enumerate()
        .map(|(index, span)| {
            let mut mask = BinaryMask::empty(height, width);
            for cm in char_masks
                .iter()
                .filter(|cm| cm.char_index >= span.start && cm.char_index < span.end)
            {
                mask.union_with(&cm.mask)?;
            }
            Ok(TokenMaskPair {
                text: span.text.clone(),
                token_id: span.token_id,
                index_in_text: index,
                mask,
            })
        })
        .collect()
}

/// Makes token masks pairwise disjoint by giving contested pixels to the
/// token with the lowest `index_in_text`.
pub fn resolve_overlaps(pairs: &mut [TokenMaskPair]) -> Vec<OverlapWarning> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| pairs[i].index_in_text);
    let Some(first) = pairs.first() else {
        return Vec::new();
    };
    let mut owner: Vec<Option<usize>> = vec![None; first.mask.bits.len()];
    let mut counts: std::collections::BTreeMap<(usize, usize), usize> = Default::default();
    for &i in &order {
        for p in 0..owner.len() {
            if !pairs[i].mask.bits[p] {
                continue;
            }
            match owner[p] {
                None => owner[p] = Some(i),
                Some(o) => {
                    pairs[i].mask.bits[p] = false;
                    *counts
                        .entry((pairs[o].index_in_text, pairs[i].index_in_text))
                        .or_default() += 1;
                }
            }
        }
    }
    counts
        .into_iter()
        .map(|((kept, dropped), pixels)| OverlapWarning {
            kept,
            dropped,
            pixels,
        })
        .collect()
}
