//! Statement selection network and the binary-Concrete relaxation.
//!
//! The selector maps each statement vector to a Bernoulli probability `p_i`.
//! During training the gates are relaxed:
//! `z_i = σ((log(p_i/(1-p_i)) + a_i - b_i) / ν)` with `a_i, b_i` standard
//! Gumbel noise, which is the two-term softmax
//! `exp((log p + a)/ν) / (exp((log p + a)/ν) + exp((log(1-p) + b)/ν))`
//! written without the overflow-prone exponentials.

use rand::{Rng, SeedableRng};

use crate::autodiff::{Graph, Mode, NodeId};
use crate::encoder::EncodedFunction;
use crate::error::{LeoError, Result};
use crate::params::{glorot_uniform, ParamGroup, ParameterStore};
use crate::tensor::Tensor;

/// Lower/upper clamp on uniform draws before `-log(-log u)`.
pub const GUMBEL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    /// Keep probability of the dropout after each hidden layer.
    pub retain: f64,
}

/// Registers dense layers `{prefix}.{i}.weight` / `{prefix}.{i}.bias`.
pub fn init_mlp(store: &mut ParameterStore, prefix: &str, group: ParamGroup, cfg: &MlpConfig, rng: &mut impl Rng) -> Result<()> {
    let mut fan_in = cfg.input;
    for (i, &width) in cfg.hidden.iter().chain(std::iter::once(&cfg.output)).enumerate() {
        store.insert(
            &format!("{prefix}.{i}.weight"),
            group,
            glorot_uniform(&[fan_in, width], fan_in, width, rng),
        )?;
        store.insert(&format!("{prefix}.{i}.bias"), group, Tensor::zeros(&[width]))?;
        fan_in = width;
    }
    Ok(())
}

/// Dense → ReLU → dropout for each hidden layer, then a linear output layer.
pub fn mlp_forward(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    cfg: &MlpConfig,
    x: NodeId,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let mut h = x;
    let layers = cfg.hidden.len() + 1;
    for i in 0..layers {
        let w = g.param_by_name(store, &format!("{prefix}.{i}.weight"))?;
        let b = g.param_by_name(store, &format!("{prefix}.{i}.bias"))?;
        h = g.matmul(h, w)?;
        h = g.add_bias(h, b)?;
        if i + 1 < layers {
            h = g.relu(h)?;
            h = g.dropout(h, cfg.retain, rng)?;
        }
    }
    Ok(h)
}

pub const SELECTOR_PREFIX: &str = "selector";

pub fn selector_mlp(dim: usize, hidden: usize, retain: f64) -> MlpConfig {
    MlpConfig {
        input: dim,
        hidden: vec![hidden; 3],
        output: 1,
        retain,
    }
}

/// Per-statement logits `log(p/(1-p))` for an `S × d` statement matrix.
pub fn selector_logits(g: &mut Graph, store: &ParameterStore, cfg: &MlpConfig, statements: NodeId, rng: &mut impl Rng) -> Result<NodeId> {
    mlp_forward(g, store, SELECTOR_PREFIX, cfg, statements, rng)
}

/// `p ∈ (0,1)^L`, one probability per statement row (padding included).
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProbabilities(pub Vec<f64>);

/// Relaxed gates `z ∈ [0,1]^L`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedMask(pub Vec<f64>);

/// Evaluates the selector (eval mode) on every row of `X`.
pub fn selector_forward(x: &EncodedFunction, store: &ParameterStore, cfg: &MlpConfig) -> Result<SelectionProbabilities> {
    let mut g = Graph::new(Mode::Eval);
    let input = g.input(x.matrix.clone())?;
    // eval mode never draws from the stream
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let logits = selector_logits(&mut g, store, cfg, input, &mut rng)?;
    let p = g.sigmoid(logits)?;
    Ok(SelectionProbabilities(g.value(p).data().to_vec()))
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

/// `n` i.i.d. standard Gumbel draws.
pub fn sample_gumbel(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| gumbel_from_uniform(rng.random::<f64>())).collect()
}

/// The difference `a - b` of two Gumbel draws for each of `n` gates.
pub fn sample_gumbel_difference(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let a = sample_gumbel(n, rng);
    let b = sample_gumbel(n, rng);
    a.iter().zip(&b).map(|(a, b)| a - b).collect()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Binary-Concrete relaxation of a Bernoulli(`p`) draw with Gumbel noises
/// `a`, `b` and temperature `nu`.
pub fn relax_bernoulli(p: f64, a: f64, b: f64, nu: f64) -> f64 {
    let p = p.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    let logit = p.ln() - (1.0 - p).ln();
    sigmoid((logit + a - b) / nu)
}

/// Graph form: gates from selector logits and fixed noise `a - b`.
pub fn relaxed_gates(g: &mut Graph, logits: NodeId, noise: Vec<f64>, nu: f64) -> Result<NodeId> {
    if nu <= 0.0 {
        return Err(LeoError::config(format!("temperature {nu} must be positive")));
    }
    let shape = g.value(logits).shape().to_vec();
    let noise = g.input(Tensor::new(shape, noise)?)?;
    let t = g.add(logits, noise)?;
    let t = g.scale(t, 1.0 / nu)?;
    g.sigmoid(t)
}

/// `X̃ = X ⊙ z`: row `i` scaled by `z_i`.
pub fn apply_mask(x: &Tensor, z: &RelaxedMask) -> Result<Tensor> {
    if x.rows() != z.0.len() {
        return Err(LeoError::usage(format!("{} gates for {} statements", z.0.len(), x.rows())));
    }
    let mut out = x.clone();
    for (i, &zi) in z.0.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v *= zi);
    }
    Ok(out)
}

/// How gates are formed at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    /// `z = p`.
    #[default]
    Expected,
    /// `z = 1[p > 0.5]`.
    Hard,
    /// A relaxed sample (non-deterministic unless the RNG is fixed).
    Sampled,
}

impl GateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::Expected => "expected",
            GateMode::Hard => "hard",
            GateMode::Sampled => "sampled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "expected" => Some(GateMode::Expected),
            "hard" => Some(GateMode::Hard),
            "sampled" => Some(GateMode::Sampled),
            _ => None,
        }
    }
}

pub fn deterministic_mask(p: &SelectionProbabilities, mode: GateMode) -> RelaxedMask {
    RelaxedMask(match mode {
        GateMode::Hard => p.0.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect(),
        _ => p.0.clone(),
    })
}

/// Gates for inference, with padding rows forced to zero.
pub fn inference_mask(
    p: &SelectionProbabilities,
    true_length: usize,
    mode: GateMode,
    nu: f64,
    rng: &mut impl Rng,
) -> RelaxedMask {
    let mut z = match mode {
        GateMode::Sampled => {
            let noise = sample_gumbel_difference(p.0.len(), rng);
            RelaxedMask(p.0.iter().zip(&noise).map(|(&p, &n)| relax_bernoulli(p, n, 0.0, nu)).collect())
        }
        _ => deterministic_mask(p, mode),
    };
    z.0.iter_mut().skip(true_length).for_each(|v| *v = 0.0);
    z
}
