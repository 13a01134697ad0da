//! Token-mask corpus: tokenizer, record model, pipeline, validation and stats.

mod bpe;
mod build;
mod masks;
mod prompt;
mod record;
mod render;
mod stats;
mod validate;

pub use bpe::{BpeVocab, TokenSpan, VocabFile};
pub use build::{build_corpus, build_record, select_tokens, BuildOptions, BuildSummary, CharAnnotation, CharMaskRef};
pub use masks::{build_token_masks, resolve_overlaps, CharMask, OverlapWarning, TokenMaskPair};
pub use prompt::{bbox_tag, make_parsing_prompt, ocr_tag, ParsingTask};
pub use record::{
    assemble_record, decode_record, decode_rgb, encode_record, grid_to_rgb, list_records, read_encoded,
    read_record, rgb_to_grid, write_record, Assembled, EncodedRecord, MaskPlane, RecordMeta, RecordParts,
    TokenEntry, TokenMeta, TokenRecord, MAX_TOKENS_PER_RECORD,
};
pub use render::{render_overlay, tint_color};
pub use stats::{corpus_stats, CorpusStats, TokenCount};
pub use validate::{validate_file, validate_record, ValidationReport, Violation};
