use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::record::RecordMeta;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenCount {
    pub text: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub records: usize,
    pub total_entries: usize,
    /// Records per `image_type`; untyped records count under `"unknown"`.
    pub records_by_type: BTreeMap<String, usize>,
    /// Number of entries per record -> number of records with that count.
    pub token_count_histogram: BTreeMap<usize, usize>,
    /// Most frequent entry texts, count descending, ties by text.
    pub top_tokens: Vec<TokenCount>,
}

pub fn corpus_stats<'a>(
    records: impl IntoIterator<Item = &'a RecordMeta>,
    top_k: usize,
) -> Result<CorpusStats> {
    let mut n = 0;
    let mut total_entries = 0;
    let mut records_by_type = BTreeMap::new();
    let mut histogram = BTreeMap::new();
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for meta in records {
        n += 1;
        total_entries += meta.tokens.len();
        let kind = meta.image_type.clone().unwrap_or_else(|| "unknown".into());
        *records_by_type.entry(kind).or_default() += 1;
        *histogram.entry(meta.tokens.len()).or_default() += 1;
        for t in &meta.tokens {
            *freq.entry(t.text.as_str()).or_default() += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut top: Vec<TokenCount> = freq
        .into_iter()
        .map(|(text, count)| TokenCount {
            text: text.to_string(),
            count,
        })
        .collect();
    top.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.text.cmp(&b.text)));
    top.truncate(top_k);
    Ok(CorpusStats {
        records: n,
        total_entries,
        records_by_type,
        token_count_histogram: histogram,
        top_tokens: top,
    })
}
