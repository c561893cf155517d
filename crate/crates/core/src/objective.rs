//! Training losses: classifier cross-entropy over masked functions, the
//! random-mask data-distribution loss, and the cluster-contrastive loss.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::encoder::{encode_batch, EncodedBatch, TokenizedFunction};
use crate::error::{LeoError, Result};
use crate::kmeans::{kmeans, KMeansResult};
use crate::model::ModelConfig;
use crate::params::ParameterStore;
use crate::selector::{mlp_forward, relaxed_gates, sample_gumbel_difference, selector_logits, MlpConfig};
use crate::tensor::Tensor;

pub const CLASSIFIER_PREFIX: &str = "classifier";

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Two hidden layers and a 2-way output over the flattened `L·d` input.
pub fn classifier_mlp(input: usize, hidden: usize, retain: f64) -> MlpConfig {
    MlpConfig {
        input,
        hidden: vec![hidden; 2],
        output: 2,
        retain,
    }
}

/// Unnormalised class scores for an `m × (L·d)` batch.
pub fn classifier_logits(g: &mut Graph, store: &ParameterStore, cfg: &MlpConfig, x: NodeId, rng: &mut impl Rng) -> Result<NodeId> {
    mlp_forward(g, store, CLASSIFIER_PREFIX, cfg, x, rng)
}

/// `-log probs[label]` with the probability clamped to `[1e-12, 1]`.
pub fn cross_entropy(probs: &[f64], label: u8) -> Result<f64> {
    let p = probs
        .get(label as usize)
        .filter(|_| label <= 1)
        .ok_or_else(|| LeoError::usage(format!("label {label} is not 0 or 1")))?;
    Ok(-p.clamp(PROB_FLOOR, 1.0).ln())
}

/// Mean cross-entropy node for class logits against integer labels.
pub fn mean_cross_entropy(g: &mut Graph, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
    let logp = g.log_softmax(logits)?;
    let picked = g.pick(logp, Rc::new(labels.iter().map(|&l| l as usize).collect()))?;
    let mean = g.mean(picked)?;
    g.scale(mean, -1.0)
}

/// Row-major concatenation of the statement vectors.
pub fn flatten_representation(x: &Tensor) -> Vec<f64> {
    x.data().to_vec()
}

/// `u·v / (‖u‖‖v‖)`, or 0 when either norm is below `1e-12`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < crate::autodiff::NORM_FLOOR || nv < crate::autodiff::NORM_FLOOR {
        return 0.0;
    }
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    d / (nu * nv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContrastiveVariant {
    /// Positives share a k-means cluster (and are vulnerable).
    #[default]
    Cluster,
    /// Positives share the class label.
    SupervisedClass,
}

impl ContrastiveVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ContrastiveVariant::Cluster => "cluster",
            ContrastiveVariant::SupervisedClass => "supervised-class",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cluster" => Some(ContrastiveVariant::Cluster),
            "supervised-class" | "supcon" => Some(ContrastiveVariant::SupervisedClass),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub lambda: f64,
    pub k: usize,
    pub variant: ContrastiveVariant,
    pub kmeans_iters: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.5,
            lambda: 0.1,
            k: 3,
            variant: ContrastiveVariant::Cluster,
            kmeans_iters: 10,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 || self.lambda.is_nan() || self.lambda < 0.0 || self.k == 0 {
            return Err(LeoError::config(format!("invalid contrastive configuration {self:?}")));
        }
        Ok(())
    }
}

/// Cluster labels of the vulnerable members of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// `Some(cluster)` for vulnerable samples, `None` otherwise.
    pub labels: Vec<Option<usize>>,
    pub centroids: Vec<Vec<f64>>,
}

impl ClusterAssignment {
    /// Effective number of clusters `K'`.
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

/// Runs k-means (k-means++ seeding, Lloyd iterations) on a set of points.
pub fn minibatch_kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> KMeansResult {
    kmeans(points, k, max_iters, seed)
}

/// L2-normalises each representation and clusters the vulnerable ones.
pub fn assign_clusters(reps: &[Vec<f64>], labels: &[u8], k: usize, max_iters: usize, seed: u64) -> ClusterAssignment {
    let vulnerable: Vec<usize> = (0..reps.len()).filter(|&i| labels[i] == 1).collect();
    let points: Vec<Vec<f64>> = vulnerable
        .iter()
        .map(|&i| {
            let norm = reps[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = if norm < crate::autodiff::NORM_FLOOR { 0.0 } else { 1.0 / norm };
            reps[i].iter().map(|v| v * inv).collect()
        })
        .collect();
    let km = minibatch_kmeans(&points, k, max_iters, seed);
    let mut out = vec![None; reps.len()];
    for (&i, &l) in vulnerable.iter().zip(&km.labels) {
        out[i] = Some(l);
    }
    ClusterAssignment {
        labels: out,
        centroids: km.centroids,
    }
}

/// Positive sets `C(i)` for every anchor. Only vulnerable anchors have
/// positives; under [`ContrastiveVariant::SupervisedClass`] every other
/// vulnerable sample is a positive.
pub fn positive_sets(labels: &[u8], assignment: &ClusterAssignment, variant: ContrastiveVariant) -> Vec<Vec<usize>> {
    let m = labels.len();
    (0..m)
        .map(|i| {
            if labels[i] != 1 {
                return Vec::new();
            }
            (0..m)
                .filter(|&c| c != i && labels[c] == 1)
                .filter(|&c| match variant {
                    ContrastiveVariant::SupervisedClass => true,
                    ContrastiveVariant::Cluster => {
                        assignment.labels[c].is_some() && assignment.labels[c] == assignment.labels[i]
                    }
                })
                .collect()
        })
        .collect()
}

/// Weight matrix with `-1/|C(i)|` at every `(i, c ∈ C(i))`, zero elsewhere.
pub fn positive_weights(positives: &[Vec<usize>]) -> Tensor {
    let m = positives.len();
    let mut w = Tensor::zeros(&[m, m]);
    for (i, set) in positives.iter().enumerate() {
        for &c in set {
            w.data_mut()[i * m + c] = -1.0 / set.len() as f64;
        }
    }
    w
}

/// Cluster-contrastive loss evaluated directly from representations:
///
/// `Σ_i 1[Y_i=1] (-1/|C(i)|) Σ_{c∈C(i)} log( exp(sim(i,c)/τ) / Σ_{a≠i} exp(sim(i,a)/τ) )`
///
/// with cosine similarity. Anchors with an empty `C(i)` contribute nothing.
pub fn cluster_contrastive_loss(
    reps: &[Vec<f64>],
    labels: &[u8],
    assignment: &ClusterAssignment,
    tau: f64,
    variant: ContrastiveVariant,
) -> f64 {
    let m = reps.len();
    if m < 2 {
        return 0.0;
    }
    let positives = positive_sets(labels, assignment, variant);
    let mut loss = 0.0;
    for (i, set) in positives.iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        let sims: Vec<f64> = (0..m).map(|a| cosine_similarity(&reps[i], &reps[a]) / tau).collect();
        let max = (0..m).filter(|&a| a != i).map(|a| sims[a]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..m).filter(|&a| a != i).map(|a| (sims[a] - max).exp()).sum::<f64>().ln();
        let s: f64 = set.iter().map(|&c| sims[c] - lse).sum();
        loss -= s / set.len() as f64;
    }
    loss
}

/// Graph form of [`cluster_contrastive_loss`] over `m × D` representations.
pub fn contrastive_node(g: &mut Graph, reps: NodeId, weights: Tensor, tau: f64) -> Result<NodeId> {
    let unit = g.row_normalize(reps)?;
    let sim = g.matmul_nt(unit, unit)?;
    let sim = g.scale(sim, 1.0 / tau)?;
    let logp = g.off_diag_log_softmax(sim)?;
    g.weighted_sum(logp, weights)
}

/// Where statement gates come from.
#[derive(Debug, Clone, Copy)]
pub enum GateSource<'a> {
    /// Relaxed Bernoulli samples (the normal training path).
    Sample,
    /// Explicit gates per function and statement (test hook).
    Fixed(&'a [Vec<f64>]),
}

fn fixed_gates(enc: &EncodedBatch, gates: &[Vec<f64>]) -> Result<Vec<f64>> {
    if gates.len() != enc.batch_size() {
        return Err(LeoError::usage("fixed gates: one gate vector per function required"));
    }
    let mut out = Vec::with_capacity(enc.positions.len());
    for (gv, &len) in gates.iter().zip(&enc.true_lengths) {
        if gv.len() < len {
            return Err(LeoError::usage("fixed gates: fewer gates than statements"));
        }
        out.extend_from_slice(&gv[..len]);
    }
    Ok(out)
}

/// `m × (L·d)` masked representations: statement rows scaled by their gates
/// and scattered into the padded layout (padding rows stay zero).
fn masked_flat(g: &mut Graph, enc: &EncodedBatch, gates: NodeId, dim: usize) -> Result<NodeId> {
    let rows = g.row_scale(enc.statements, gates)?;
    let m = enc.batch_size();
    let full = g.scatter_rows(rows, enc.positions.clone(), m * enc.seq_len)?;
    g.reshape(full, vec![m, enc.seq_len * dim])
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub cross_entropy: f64,
    pub contrastive: f64,
}

/// Forward graph of one step.
#[derive(Debug)]
pub struct StepGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub parts: LossParts,
    /// Flattened masked representations (`m × L·d`).
    pub representations: NodeId,
    pub assignment: Option<ClusterAssignment>,
}

fn empty_representation(g: &mut Graph, m: usize, cfg: &ModelConfig) -> Result<NodeId> {
    g.input(Tensor::zeros(&[m, cfg.seq_len * cfg.dim()]))
}

/// Cross-entropy of the classifier on randomly masked functions
/// (`r ~ RelaxedBernoulli(0.5)` at temperature `relax_temp`). The selector is
/// not part of this graph, so it receives no gradient.
pub fn data_distribution_loss(
    store: &ParameterStore,
    cfg: &ModelConfig,
    batch: &[&TokenizedFunction],
    relax_temp: f64,
    gates: GateSource<'_>,
    mode: crate::autodiff::Mode,
    rng: &mut impl Rng,
) -> Result<StepGraph> {
    if relax_temp <= 0.0 {
        return Err(LeoError::config("relaxation temperature must be positive"));
    }
    let mut g = Graph::new(mode);
    let labels: Vec<u8> = batch.iter().map(|f| f.label).collect();
    let reps = match encode_batch(&mut g, store, &cfg.encoder, batch, cfg.seq_len, rng)? {
        Some(enc) => {
            let r = match gates {
                GateSource::Fixed(v) => fixed_gates(&enc, v)?,
                GateSource::Sample => sample_gumbel_difference(enc.positions.len(), rng)
                    .into_iter()
                    .map(|e| sigmoid(e / relax_temp))
                    .collect(),
            };
            let n = r.len();
            let r = g.input(Tensor::new(vec![n, 1], r)?)?;
            masked_flat(&mut g, &enc, r, cfg.dim())?
        }
        None => empty_representation(&mut g, batch.len(), cfg)?,
    };
    let logits = classifier_logits(&mut g, store, &cfg.classifier, reps, rng)?;
    let loss = mean_cross_entropy(&mut g, logits, &labels)?;
    let ce = g.value(loss).item();
    Ok(StepGraph {
        graph: g,
        loss,
        parts: LossParts {
            total: ce,
            cross_entropy: ce,
            contrastive: 0.0,
        },
        representations: reps,
        assignment: None,
    })
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Joint selector + classifier objective: mean cross-entropy on `X ⊙ z` plus
/// `λ · L_ccl` on the same masked representations.
///
/// Clusters are computed from the current representations unless a frozen
/// assignment is supplied; either way they are constants for the gradient.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    store: &ParameterStore,
    cfg: &ModelConfig,
    batch: &[&TokenizedFunction],
    nu: f64,
    contrastive: &ContrastiveConfig,
    gates: GateSource<'_>,
    frozen: Option<&ClusterAssignment>,
    mode: crate::autodiff::Mode,
    rng: &mut impl Rng,
) -> Result<StepGraph> {
    contrastive.validate()?;
    let mut g = Graph::new(mode);
    let labels: Vec<u8> = batch.iter().map(|f| f.label).collect();
    let reps = match encode_batch(&mut g, store, &cfg.encoder, batch, cfg.seq_len, rng)? {
        Some(enc) => {
            let z = match gates {
                GateSource::Fixed(v) => {
                    let z = fixed_gates(&enc, v)?;
                    let n = z.len();
                    g.input(Tensor::new(vec![n, 1], z)?)?
                }
                GateSource::Sample => {
                    let logits = selector_logits(&mut g, store, &cfg.selector, enc.statements, rng)?;
                    let noise = sample_gumbel_difference(enc.positions.len(), rng);
                    relaxed_gates(&mut g, logits, noise, nu)?
                }
            };
            masked_flat(&mut g, &enc, z, cfg.dim())?
        }
        None => empty_representation(&mut g, batch.len(), cfg)?,
    };
    let logits = classifier_logits(&mut g, store, &cfg.classifier, reps, rng)?;
    let ce = mean_cross_entropy(&mut g, logits, &labels)?;
    let ce_value = g.value(ce).item();

    let mut assignment = None;
    let mut ccl_value = 0.0;
    let mut loss = ce;
    if contrastive.lambda > 0.0 && batch.len() > 1 {
        let assign = match frozen {
            Some(a) => a.clone(),
            None => {
                let r = g.value(reps);
                let rows: Vec<Vec<f64>> = (0..r.rows()).map(|i| r.row(i).to_vec()).collect();
                assign_clusters(&rows, &labels, contrastive.k, contrastive.kmeans_iters, rng.random())
            }
        };
        let positives = positive_sets(&labels, &assign, contrastive.variant);
        if positives.iter().any(|p| !p.is_empty()) {
            let ccl = contrastive_node(&mut g, reps, positive_weights(&positives), contrastive.tau)?;
            ccl_value = g.value(ccl).item();
            let weighted = g.scale(ccl, contrastive.lambda)?;
            loss = g.add(ce, weighted)?;
        }
        assignment = Some(assign);
    }
    let total = g.value(loss).item();
    Ok(StepGraph {
        graph: g,
        loss,
        parts: LossParts {
            total,
            cross_entropy: ce_value,
            contrastive: ccl_value,
        },
        representations: reps,
        assignment,
    })
}
