use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::Serialize;

use super::bpe::BpeVocab;
use super::record::{decode_record, read_encoded, TokenRecord};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DimensionMismatch { detail: String },
    /// Entry whose pixel value never occurs in the mask plane.
    OrphanEntry { pixel_value: u16, text: String },
    /// Mask value with no entry claiming it.
    UnclaimedMaskValue { value: u16, pixels: usize },
    ZeroPixelValue { index_in_text: usize },
    DuplicatePixelValue { pixel_value: u16 },
    IndexOutOfRange { index_in_text: usize, answer_tokens: usize },
    TextMismatch {
        index_in_text: usize,
        expected: String,
        found: String,
    },
    IdMismatch {
        index_in_text: usize,
        expected: usize,
        found: usize,
    },
    Untokenizable { detail: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DimensionMismatch { detail } => write!(f, "dimension mismatch: {detail}"),
            Violation::OrphanEntry { pixel_value, text } => {
                write!(f, "orphan metadata entry: pixel value {pixel_value} ({text:?}) absent from mask")
            }
            Violation::UnclaimedMaskValue { value, pixels } => {
                write!(f, "mask value {value} ({pixels} px) has no entry")
            }
            Violation::ZeroPixelValue { index_in_text } => {
                write!(f, "entry {index_in_text} uses background value 0")
            }
            Violation::DuplicatePixelValue { pixel_value } => {
                write!(f, "pixel value {pixel_value} used by several entries")
            }
            Violation::IndexOutOfRange {
                index_in_text,
                answer_tokens,
            } => write!(f, "index out of range: {index_in_text} >= {answer_tokens}"),
            Violation::TextMismatch {
                index_in_text,
                expected,
                found,
            } => write!(f, "token {index_in_text}: expected {expected:?}, found {found:?}"),
            Violation::IdMismatch {
                index_in_text,
                expected,
                found,
            } => write!(f, "token {index_in_text}: expected id {expected}, found {found}"),
            Violation::Untokenizable { detail } => write!(f, "answer cannot be tokenized: {detail}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a record against its own mask plane and a re-tokenization of the answer.
///
/// Whitespace entries may legitimately have no pixels; any other entry whose
/// pixel value is missing from the plane is reported as an orphan.
pub fn validate_record(record: &TokenRecord, vocab: &BpeVocab) -> ValidationReport {
    let mut violations = Vec::new();
    if record.mask.width != record.image.width() || record.mask.height != record.image.height() {
        violations.push(Violation::DimensionMismatch {
            detail: format!(
                "image {}x{}, mask {}x{}",
                record.image.width(),
                record.image.height(),
                record.mask.width,
                record.mask.height
            ),
        });
    }

    let mut histogram: BTreeMap<u16, usize> = BTreeMap::new();
    for &v in &record.mask.data {
        if v != 0 {
            *histogram.entry(v).or_default() += 1;
        }
    }

    let mut seen = BTreeSet::new();
    for e in &record.entries {
        if e.pixel_value == 0 {
            violations.push(Violation::ZeroPixelValue {
                index_in_text: e.index_in_text,
            });
            continue;
        }
        if !seen.insert(e.pixel_value) {
            violations.push(Violation::DuplicatePixelValue {
                pixel_value: e.pixel_value,
            });
        }
        if !histogram.contains_key(&e.pixel_value) && !e.is_whitespace() {
            violations.push(Violation::OrphanEntry {
                pixel_value: e.pixel_value,
                text: e.text.clone(),
            });
        }
    }
    for (&value, &pixels) in &histogram {
        if !seen.contains(&value) {
            violations.push(Violation::UnclaimedMaskValue { value, pixels });
        }
    }

    match vocab.tokenize(&record.answer) {
        Ok(tokens) => {
            for e in &record.entries {
                match tokens.get(e.index_in_text) {
                    None => violations.push(Violation::IndexOutOfRange {
                        index_in_text: e.index_in_text,
                        answer_tokens: tokens.len(),
                    }),
                    Some(t) if t.text != e.text => violations.push(Violation::TextMismatch {
                        index_in_text: e.index_in_text,
                        expected: t.text.clone(),
                        found: e.text.clone(),
                    }),
                    Some(t) if t.token_id != e.token_id => {
                        violations.push(Violation::IdMismatch {
                            index_in_text: e.index_in_text,
                            expected: t.token_id,
                            found: e.token_id,
                        })
                    }
                    Some(_) => {}
                }
            }
        }
        Err(err) => violations.push(Violation::Untokenizable {
            detail: err.to_string(),
        }),
    }

    ValidationReport { violations }
}

/// Validates a record on disk, including metadata dims against the files.
pub fn validate_file(json_path: &Path, vocab: &BpeVocab) -> Result<ValidationReport> {
    let encoded = read_encoded(json_path)?;
    let record = decode_record(&encoded)?;
    let mut report = validate_record(&record, vocab);
    if encoded.meta.width != record.width() || encoded.meta.height != record.height() {
        report.violations.insert(
            0,
            Violation::DimensionMismatch {
                detail: format!(
                    "metadata {}x{}, image {}x{}",
                    encoded.meta.width,
                    encoded.meta.height,
                    record.width(),
                    record.height()
                ),
            },
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::masks::TokenMaskPair;
    use crate::corpus::record::{assemble_record, RecordParts};
    use crate::tensorcore::BinaryMask;
    use image::RgbImage;

    fn vocab() -> BpeVocab {
        BpeVocab::new(
            ["a", "b", " "].iter().map(|s| s.to_string()).collect(),
            vec![("a".into(), "b".into())],
            None,
        )
        .unwrap()
    }

    fn record() -> TokenRecord {
        let v = vocab();
        // "ab a" -> ["ab", " ", "a"]
        let spans = v.tokenize("ab a").unwrap();
        let masks = [
            BinaryMask::from_fn(4, 4, |y, _| y == 0),
            BinaryMask::empty(4, 4),
            BinaryMask::from_fn(4, 4, |y, _| y == 3),
        ];
        let pairs = spans
            .iter()
            .zip(masks)
            .enumerate()
            .map(|(i, (s, m))| TokenMaskPair {
                text: s.text.clone(),
                token_id: s.token_id,
                index_in_text: i,
                mask: m,
            })
            .collect();
        assemble_record(RecordParts {
            image: RgbImage::new(4, 4),
            question: "q".into(),
            answer: "ab a".into(),
            pairs,
            image_type: None,
            bbox: None,
        })
        .unwrap()
        .record
    }

    #[test]
    fn well_formed_is_clean() {
        let r = record();
        let report = validate_record(&r, &vocab());
        assert!(report.is_valid(), "{:?}", report.violations);
    }

    #[test]
    fn orphan_entry() {
        let mut r = record();
        r.entries[2].pixel_value = 4;
        let report = validate_record(&r, &vocab());
        assert!(report.violations.contains(&Violation::OrphanEntry {
            pixel_value: 4,
            text: "a".into()
        }));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::UnclaimedMaskValue { value: 3, .. })));
        assert!(report.violations[0].to_string().contains("orphan metadata entry"));
    }

    #[test]
    fn index_out_of_range() {
        let mut r = record();
        r.entries[0].index_in_text = 3;
        let report = validate_record(&r, &vocab());
        assert!(report.violations.contains(&Violation::IndexOutOfRange {
            index_in_text: 3,
            answer_tokens: 3
        }));
    }

    #[test]
    fn text_mismatch_and_dims() {
        let mut r = record();
        r.entries[0].text = "ba".into();
        r.mask.width = 2;
        r.mask.data.truncate(8);
        let report = validate_record(&r, &vocab());
        assert!(matches!(report.violations[0], Violation::DimensionMismatch { .. }));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::TextMismatch { index_in_text: 0, .. })));
    }

    #[test]
    fn missing_files_are_io_failures() {
        let dir = tempfile::tempdir().unwrap();
        let err = validate_file(&dir.path().join("nope.json"), &vocab());
        assert!(matches!(err, Err(crate::Error::Io { .. })));
    }
}
