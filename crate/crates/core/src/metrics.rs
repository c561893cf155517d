//! OOD detection measures with OOD as the positive class, and report I/O.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{LeoError, Result};
use crate::scorer::{nearest_rank, Decision};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Self {
        ScoreSet { id_scores, ood_scores }
    }

    fn check(&self) -> Result<()> {
        if self.id_scores.is_empty() || self.ood_scores.is_empty() {
            return Err(LeoError::usage("both ID and OOD scores are required"));
        }
        if self.id_scores.iter().chain(&self.ood_scores).any(|s| !s.is_finite()) {
            return Err(LeoError::usage("scores must be finite"));
        }
        Ok(())
    }
}

/// Fraction of OOD scores at or below the nearest-rank `tpr` quantile of the
/// ID scores.
pub fn fpr_at_tpr(scores: &ScoreSet, tpr: f64) -> Result<f64> {
    scores.check()?;
    let t = nearest_rank(&scores.id_scores, tpr)?;
    let n = scores.ood_scores.iter().filter(|&&s| s <= t).count();
    Ok(n as f64 / scores.ood_scores.len() as f64)
}

/// Mann–Whitney AUROC: P(OOD score > ID score) with ties counted ½.
pub fn auroc(scores: &ScoreSet) -> Result<f64> {
    scores.check()?;
    // Rank-sum over the merged list with average ranks for ties.
    let mut all: Vec<(f64, bool)> = scores
        .id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(scores.ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j averaged
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let n_pos = scores.ood_scores.len() as f64;
    let n_neg = scores.id_scores.len() as f64;
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Average precision over the OOD-positive ranking by descending score; tied
/// scores form a single threshold step.
pub fn aupr(scores: &ScoreSet) -> Result<f64> {
    scores.check()?;
    let mut all: Vec<(f64, bool)> = scores
        .id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(scores.ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = scores.ood_scores.len() as f64;
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            tp += all[j].1 as usize;
            j += 1;
        }
        seen = j;
        let recall = tp as f64 / n_pos;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    debug_assert_eq!(seen, all.len());
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fpr_at_tpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub n_id: usize,
    pub n_ood: usize,
    /// Free-form `key=value` description of the configuration and seed.
    pub fingerprint: String,
}

pub fn build_report(scores: &ScoreSet, fingerprint: &str) -> Result<EvalReport> {
    Ok(EvalReport {
        fpr_at_tpr95: fpr_at_tpr(scores, 0.95)?,
        auroc: auroc(scores)?,
        aupr: aupr(scores)?,
        n_id: scores.id_scores.len(),
        n_ood: scores.ood_scores.len(),
        fingerprint: fingerprint.to_string(),
    })
}

impl EvalReport {
    /// `metric,value` table. Floats use Rust's shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "fpr_at_tpr95,{}", self.fpr_at_tpr95);
        let _ = writeln!(s, "auroc,{}", self.auroc);
        let _ = writeln!(s, "aupr,{}", self.aupr);
        let _ = writeln!(s, "n_id,{}", self.n_id);
        let _ = writeln!(s, "n_ood,{}", self.n_ood);
        let _ = writeln!(s, "fingerprint,\"{}\"", self.fingerprint.replace('"', "\"\""));
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("metric,value") {
            return Err(LeoError::Format("report header must be `metric,value`".into()));
        }
        let mut r = EvalReport {
            fpr_at_tpr95: f64::NAN,
            auroc: f64::NAN,
            aupr: f64::NAN,
            n_id: 0,
            n_ood: 0,
            fingerprint: String::new(),
        };
        for line in lines {
            let (key, value) = line
                .split_once(',')
                .ok_or_else(|| LeoError::Format(format!("malformed report line `{line}`")))?;
            match key {
                "fpr_at_tpr95" => r.fpr_at_tpr95 = parse_field(key, value)?,
                "auroc" => r.auroc = parse_field(key, value)?,
                "aupr" => r.aupr = parse_field(key, value)?,
                "n_id" => r.n_id = parse_field(key, value)?,
                "n_ood" => r.n_ood = parse_field(key, value)?,
                "fingerprint" => {
                    let v = value
                        .strip_prefix('"')
                        .and_then(|v| v.strip_suffix('"'))
                        .ok_or_else(|| LeoError::Format("fingerprint must be quoted".into()))?;
                    r.fingerprint = v.replace("\"\"", "\"");
                }
                _ => return Err(LeoError::Format(format!("unknown metric `{key}`"))),
            }
        }
        Ok(r)
    }
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| LeoError::Format(format!("bad value for {key}: `{value}`")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Population {
    Id,
    Ood,
}

impl Population {
    pub fn as_str(self) -> &'static str {
        match self {
            Population::Id => "id",
            Population::Ood => "ood",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub population: Population,
    pub score: f64,
    pub decision: Decision,
}

/// `id,population,score,decision` dump. Ids containing commas or quotes are
/// quoted.
pub fn score_dump_csv(records: &[ScoreRecord]) -> String {
    let mut s = String::from("id,population,score,decision\n");
    for r in records {
        let id = if r.id.contains([',', '"', '\n']) {
            format!("\"{}\"", r.id.replace('"', "\"\""))
        } else {
            r.id.clone()
        };
        let _ = writeln!(s, "{id},{},{},{}", r.population.as_str(), r.score, r.decision.as_str());
    }
    s
}
