//! Line-delimited JSON datasets, seeded splitting and parallel normalization.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenizedFunction;
use crate::error::{LeoError, Result};
use crate::normalize::{encode_tokens, normalize_text, NormalizedFunction, Vocabulary};

/// Fewest records that can be split into train and validation parts.
pub const MIN_SPLIT_RECORDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    TestId,
    TestOod,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub code: String,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwe: Option<String>,
}

#[derive(Deserialize)]
struct RawRecord {
    code: String,
    label: serde_json::Value,
    #[serde(default)]
    cwe: Option<String>,
    #[serde(default)]
    id: Option<serde_json::Value>,
}

fn parse_line(line: &str, n: usize) -> std::result::Result<DatasetRecord, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let label = match raw.label.as_u64() {
        Some(l @ (0 | 1)) => l as u8,
        _ => return Err(format!("label {} is not 0 or 1", raw.label)),
    };
    let id = match raw.id {
        None | Some(serde_json::Value::Null) => format!("line{n}"),
        Some(serde_json::Value::String(s)) => s,
        Some(v) => v.to_string(),
    };
    Ok(DatasetRecord {
        id,
        code: raw.code,
        label,
        cwe: raw.cwe,
    })
}

/// Parses records from text; `path` is only used in error messages.
/// Blank lines are skipped. Ids must be unique.
pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(line, i + 1).map_err(|message| LeoError::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(LeoError::Dataset {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("duplicate id `{}`", rec.id),
            });
        }
        out.push(rec);
    }
    if out.is_empty() {
        log::warn!("dataset {} is empty", path.display());
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, path)
}

/// One JSON object per line.
pub fn dataset_to_jsonl(records: &[DatasetRecord]) -> String {
    let mut s = String::new();
    for r in records {
        // A record of strings and an integer always serializes.
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(dataset_to_jsonl(records).as_bytes())?;
    Ok(())
}

/// Seeded shuffle, then the first `⌈(1 − val_fraction)·n⌉` records train.
/// Records are ordered by id before shuffling, so the split depends only on
/// the ids and the seed.
pub fn split_dataset(
    records: &[DatasetRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    if records.len() < MIN_SPLIT_RECORDS {
        return Err(LeoError::usage(format!(
            "{} records are too few to split (need {MIN_SPLIT_RECORDS})",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].id.cmp(&records[b].id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((1.0 - val_fraction) * records.len() as f64 - 1e-9).ceil() as usize;
    let n_train = n_train.clamp(1, records.len() - 1);
    let train = order[..n_train].iter().map(|&i| records[i].clone()).collect();
    let val = order[n_train..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, val))
}

/// Normalizes every record, fanning out over up to `threads` workers; the
/// output keeps input order. The first failure (in input order) is returned
/// with the offending record id.
pub fn normalize_records(records: &[DatasetRecord], threads: usize) -> Result<Vec<NormalizedFunction>> {
    let threads = threads.clamp(1, records.len().max(1));
    let chunk = records.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<NormalizedFunction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|r| {
                            normalize_text(&r.code).map_err(|e| LeoError::usage(format!("record `{}`: {e}", r.id)))
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(LeoError::usage("normalization worker panicked"))))
            .collect()
    });
    let mut out = Vec::with_capacity(records.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

/// Maps normalized statements to token ids. Empty statements are dropped.
pub fn tokenize(f: &NormalizedFunction, label: u8, vocab: &Vocabulary) -> TokenizedFunction {
    TokenizedFunction {
        statements: f
            .statements
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| encode_tokens(s, vocab))
            .collect(),
        label,
    }
}
