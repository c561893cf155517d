//! Scoring test populations and producing reports.

use super::artifact::{ModelArtifact, ScoreKind};
use super::dataset::{default_threads, normalize_records, tokenize, DatasetRecord};
use crate::encoder::TokenizedFunction;
use crate::error::{LeoError, Result};
use crate::metrics::{build_report, EvalReport, Population, ScoreRecord, ScoreSet};

/// Normalizes records and maps them through the artifact's vocabulary.
pub fn tokenize_records(artifact: &ModelArtifact, records: &[DatasetRecord]) -> Result<Vec<TokenizedFunction>> {
    let norm = normalize_records(records, default_threads())?;
    Ok(norm.iter().zip(records).map(|(n, r)| tokenize(n, r.label, &artifact.vocab)).collect())
}

/// Scores records and attaches decisions.
pub fn score_records(
    artifact: &ModelArtifact,
    records: &[DatasetRecord],
    population: Population,
    kind: ScoreKind,
) -> Result<Vec<ScoreRecord>> {
    let fns = tokenize_records(artifact, records)?;
    let scores = artifact.score(&fns, kind)?;
    Ok(records
        .iter()
        .zip(scores)
        .map(|(r, score)| ScoreRecord {
            id: r.id.clone(),
            population,
            score,
            decision: artifact.decide(score),
        })
        .collect())
}

/// Metrics on an ID test set against an OOD test set, plus the per-sample
/// score dump (ID records first).
pub fn evaluate(
    artifact: &ModelArtifact,
    id_test: &[DatasetRecord],
    ood_test: &[DatasetRecord],
    kind: ScoreKind,
) -> Result<(EvalReport, Vec<ScoreRecord>)> {
    if id_test.is_empty() {
        return Err(LeoError::usage("the ID test set is empty"));
    }
    if ood_test.is_empty() {
        return Err(LeoError::usage("the OOD test set is empty"));
    }
    let mut dump = score_records(artifact, id_test, Population::Id, kind)?;
    dump.extend(score_records(artifact, ood_test, Population::Ood, kind)?);
    let set = ScoreSet::new(
        dump.iter().filter(|r| r.population == Population::Id).map(|r| r.score).collect(),
        dump.iter().filter(|r| r.population == Population::Ood).map(|r| r.score).collect(),
    );
    let report = build_report(&set, &artifact.config.fingerprint())?;
    Ok((report, dump))
}
