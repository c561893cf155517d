//! Template-driven generator of labelled C-like functions.
//!
//! Each family has a characteristic core with one guard line. The benign
//! variant keeps the guard; the vulnerable variant (label 1) omits it.
//! Families share a pool of filler statements so that only the core tells
//! them apart.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::DatasetRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Array write guarded by an index-bounds check.
    BoundsCheck,
    /// Buffer allocation and copy guarded by a size check.
    AllocCopy,
    /// Privileged operation guarded by an authorization check.
    Authorization,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::BoundsCheck, Family::AllocCopy, Family::Authorization];

    pub fn tag(self) -> &'static str {
        match self {
            Family::BoundsCheck => "A",
            Family::AllocCopy => "B",
            Family::Authorization => "C",
        }
    }

    fn cwe(self) -> &'static str {
        match self {
            Family::BoundsCheck => "CWE-787",
            Family::AllocCopy => "CWE-120",
            Family::Authorization => "CWE-862",
        }
    }
}

/// A generated function as source lines, one of which is the guard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionTemplate {
    pub family: Family,
    pub lines: Vec<String>,
    pub guard: usize,
}

impl FunctionTemplate {
    pub fn render(&self, vulnerable: bool) -> String {
        self.lines
            .iter()
            .enumerate()
            .filter(|&(i, _)| !(vulnerable && i == self.guard))
            .map(|(_, l)| l.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

const NAMES: &[&str] = &["buf", "items", "table", "slots", "vec", "arr", "cells", "block", "entries", "rows", "values"];
const COUNTS: &[&str] = &["len", "count", "n", "cap", "limit", "total", "max_items"];
const INDEXES: &[&str] = &["idx", "pos", "i", "off", "k", "slot"];
const FUNCS: &[&str] = &["process", "handle", "update", "store", "apply", "run", "do_op", "exec_step"];

fn filler(rng: &mut impl Rng) -> String {
    let v = *["tmp", "acc", "flag", "state", "ret", "status"].choose(rng).unwrap();
    let w = *["x", "y", "z", "w", "q"].choose(rng).unwrap();
    let c = rng.random_range(1..5);
    match rng.random_range(0..7) {
        0 => format!("    int {v} = {c};"),
        1 => format!("    {v} = {v} + {c};"),
        2 => format!("    printf(\"{v}=%d\\n\", {v});"),
        3 => format!("    for ({w} = 0; {w} < {c}; {w}++) {{ {v} += {w}; }}"),
        4 => format!("    {v} = log_event({v}, {c});"),
        5 => format!("    {w} = {v} * {c};"),
        _ => format!("    {v}++;"),
    }
}

fn core(family: Family, rng: &mut impl Rng) -> (Vec<String>, usize, String) {
    let name = *NAMES.choose(rng).unwrap();
    let count = *COUNTS.choose(rng).unwrap();
    let f = *FUNCS.choose(rng).unwrap();
    match family {
        Family::BoundsCheck => {
            let idx = *INDEXES.choose(rng).unwrap();
            let sig = format!("int {f}_{name}(int *{name}, int {count}, int {idx}, int val) {{");
            let mut lines = Vec::new();
            if rng.random_bool(0.5) {
                lines.push(format!("    int old = {name}[0];"));
            }
            let guard = lines.len();
            lines.push(match rng.random_range(0..3) {
                0 => format!("    if ({idx} >= {count}) return -1;"),
                1 => format!("    if ({idx} < 0 || {idx} >= {count}) return -1;"),
                _ => format!("    if ({idx} >= {count}) {{ return -1; }}"),
            });
            lines.push(match rng.random_range(0..3) {
                0 => format!("    {name}[{idx}] = val;"),
                1 => format!("    {name}[{idx}] = {name}[{idx}] + val;"),
                _ => format!("    {name}[{idx}] = val * 2;"),
            });
            lines.push(match rng.random_range(0..2) {
                0 => format!("    val = {name}[{idx}] - {name}[0];"),
                _ => format!("    {name}[0] = {name}[{idx}];"),
            });
            (lines, guard, sig)
        }
        Family::AllocCopy => {
            let src = *["src", "input", "msg", "payload"].choose(rng).unwrap();
            let sig = format!("char *{f}_{name}(const char *{src}, size_t {count}, size_t cap) {{");
            let mut lines = vec![format!(
                "    char *{name} = {};",
                if rng.random_bool(0.5) { "malloc(cap)" } else { "calloc(cap, 1)" }
            )];
            lines.push(format!("    if ({name} == NULL) return NULL;"));
            let guard = lines.len();
            lines.push(match rng.random_range(0..2) {
                0 => format!("    if ({count} >= cap) {{ free({name}); return NULL; }}"),
                _ => format!("    if ({count} + 1 > cap) {{ free({name}); return NULL; }}"),
            });
            lines.push(if rng.random_bool(0.5) {
                format!("    memcpy({name}, {src}, {count});")
            } else {
                format!("    strncpy({name}, {src}, {count});")
            });
            lines.push(format!("    {name}[{count}] = 0;"));
            (lines, guard, sig)
        }
        Family::Authorization => {
            let path = *["path", "target", "file", "cmd"].choose(rng).unwrap();
            let sig = format!("int {f}_{name}(const char *{path}, int mode) {{");
            let mut lines = Vec::new();
            if rng.random_bool(0.5) {
                lines.push("    uid_t uid = getuid();".to_string());
            }
            let guard = lines.len();
            lines.push(match rng.random_range(0..3) {
                0 => "    if (geteuid() != 0) return -1;".to_string(),
                1 => format!("    if (access({path}, 2) != 0) return -1;"),
                _ => "    if (getuid() != 0) { return -1; }".to_string(),
            });
            lines.push("    setuid(0);".to_string());
            lines.push(match rng.random_range(0..4) {
                0 => format!("    chmod({path}, mode);"),
                1 => format!("    unlink({path});"),
                2 => format!("    system({path});"),
                _ => format!("    chown({path}, 0, 0);"),
            });
            lines.push(format!("    fprintf(stderr, \"%s\\n\", {path});"));
            (lines, guard, sig)
        }
    }
}

/// One function of the given family; filler lines surround the core.
pub fn generate_template(family: Family, rng: &mut impl Rng) -> FunctionTemplate {
    let (core_lines, guard_in_core, sig) = core(family, rng);
    let mut lines = vec![sig];
    for _ in 0..rng.random_range(0..3) {
        lines.push(filler(rng));
    }
    let guard = lines.len() + guard_in_core;
    lines.extend(core_lines);
    for _ in 0..rng.random_range(0..3) {
        lines.push(filler(rng));
    }
    lines.push("    return 0;".to_string());
    lines.push("}".to_string());
    FunctionTemplate { family, lines, guard }
}

/// `n` records of one family, each vulnerable with probability ½.
pub fn generate_family(family: Family, n: usize, seed: u64, id_prefix: &str) -> Vec<DatasetRecord> {
    // Per-family stream so adding a family never perturbs another.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(family as u64 + 1)));
    (0..n)
        .map(|i| {
            let t = generate_template(family, &mut rng);
            let vulnerable = rng.random_bool(0.5);
            DatasetRecord {
                id: format!("{id_prefix}{}-{i:05}", family.tag()),
                code: t.render(vulnerable),
                label: vulnerable as u8,
                cwe: Some(family.cwe().to_string()),
            }
        })
        .collect()
}

/// Sizes of a synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    /// Training (train + validation) functions per ID family.
    pub id_per_family: usize,
    /// Held-out ID test functions per ID family.
    pub id_test_per_family: usize,
    pub ood: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            id_per_family: 1000,
            id_test_per_family: 250,
            ood: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub id_train: Vec<DatasetRecord>,
    pub id_test: Vec<DatasetRecord>,
    pub ood_test: Vec<DatasetRecord>,
}

/// ID families A and B for training and ID testing; family C as OOD.
pub fn generate_synthetic(spec: &SynthSpec) -> SyntheticCorpus {
    let id_families = [Family::BoundsCheck, Family::AllocCopy];
    let mut id_train = Vec::new();
    let mut id_test = Vec::new();
    for f in id_families {
        let all = generate_family(f, spec.id_per_family + spec.id_test_per_family, spec.seed, "id");
        let (train, test) = all.split_at(spec.id_per_family);
        id_train.extend_from_slice(train);
        id_test.extend_from_slice(test);
    }
    SyntheticCorpus {
        id_train,
        id_test,
        ood_test: generate_family(Family::Authorization, spec.ood, spec.seed, "ood"),
    }
}
