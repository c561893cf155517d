//! Statement encoder: token embedding, dropout, 1-D convolution and
//! max-pool over time, producing one `d`-vector per statement and an `L × d`
//! matrix per function.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Mode, NodeId};
use crate::error::{LeoError, Result};
use crate::normalize::PAD_ID;
use crate::params::{glorot_uniform, uniform, ParamGroup, ParameterStore};
use crate::tensor::Tensor;

pub const EMBEDDING: &str = "encoder.embedding";
pub const CONV_WEIGHT: &str = "encoder.conv.weight";
pub const CONV_BIAS: &str = "encoder.conv.bias";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    /// Embedding width, which is also the number of convolution filters.
    pub dim: usize,
    pub kernel_size: usize,
    /// Keep probability of the dropout applied to embeddings.
    pub embed_retain: f64,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, dim: usize) -> Self {
        EncoderConfig {
            vocab_size,
            dim,
            kernel_size: 3,
            embed_retain: 0.8,
        }
    }
}

/// Creates the encoder parameters. Row [`PAD_ID`] of the embedding is zero.
pub fn init_encoder(store: &mut ParameterStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<()> {
    if cfg.dim == 0 || cfg.kernel_size == 0 || cfg.vocab_size < 2 {
        return Err(LeoError::config(format!("invalid encoder configuration {cfg:?}")));
    }
    let mut emb = uniform(&[cfg.vocab_size, cfg.dim], 0.05, rng);
    emb.row_mut(PAD_ID as usize).fill(0.0);
    store.insert(EMBEDDING, ParamGroup::Encoder, emb)?;
    let fan = cfg.kernel_size * cfg.dim;
    store.insert(
        CONV_WEIGHT,
        ParamGroup::Encoder,
        glorot_uniform(&[cfg.kernel_size, cfg.dim, cfg.dim], fan, fan, rng),
    )?;
    store.insert(CONV_BIAS, ParamGroup::Encoder, Tensor::zeros(&[cfg.dim]))?;
    Ok(())
}

/// Re-zeroes the PAD embedding row and its gradient.
pub fn pin_pad_row(store: &mut ParameterStore) -> Result<()> {
    let id = store.id(EMBEDDING)?;
    let p = store.get_mut(id);
    p.value.row_mut(PAD_ID as usize).fill(0.0);
    p.grad.row_mut(PAD_ID as usize).fill(0.0);
    Ok(())
}

/// A function as statement token ids, before padding/truncation to `L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedFunction {
    pub statements: Vec<Vec<u32>>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFunction {
    /// `L × d`; rows at and beyond `true_length` are zero.
    pub matrix: Tensor,
    pub true_length: usize,
    pub label: u8,
}

/// Graph nodes for the statements of a batch of functions.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `S × d`: every kept statement of every function, in order.
    pub statements: NodeId,
    /// Row of each statement in the stacked `(m·L) × d` padded layout.
    pub positions: Rc<Vec<usize>>,
    pub true_lengths: Vec<usize>,
    pub seq_len: usize,
}

impl EncodedBatch {
    pub fn batch_size(&self) -> usize {
        self.true_lengths.len()
    }
}

/// Encodes a list of statements (each a token-id list) to an `S × d` node.
/// Statements shorter than the kernel are right-padded with PAD.
pub fn encode_statements(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    statements: &[&[u32]],
    rng: &mut impl Rng,
) -> Result<NodeId> {
    if statements.is_empty() {
        return Err(LeoError::usage("no statements to encode"));
    }
    let mut ids = Vec::new();
    let mut segments = Vec::with_capacity(statements.len());
    let mut pooled = Vec::with_capacity(statements.len());
    for s in statements {
        let len = s.len().max(cfg.kernel_size);
        ids.extend(s.iter().map(|&t| t as usize));
        ids.extend(std::iter::repeat_n(PAD_ID as usize, len - s.len()));
        segments.push(len);
        pooled.push(len - cfg.kernel_size + 1);
    }
    let table = g.param_by_name(store, EMBEDDING)?;
    let w = g.param_by_name(store, CONV_WEIGHT)?;
    let b = g.param_by_name(store, CONV_BIAS)?;
    let emb = g.gather(table, Rc::new(ids))?;
    let emb = g.dropout(emb, cfg.embed_retain, rng)?;
    let conv = g.conv1d(emb, w, b, Rc::new(segments))?;
    let act = g.relu(conv)?;
    g.max_pool(act, &pooled)
}

/// Encodes the first `seq_len` statements of each function in the batch.
/// Returns `None` for `statements` when the whole batch has no statements.
pub fn encode_batch(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    batch: &[&TokenizedFunction],
    seq_len: usize,
    rng: &mut impl Rng,
) -> Result<Option<EncodedBatch>> {
    let mut flat: Vec<&[u32]> = Vec::new();
    let mut positions = Vec::new();
    let mut true_lengths = Vec::with_capacity(batch.len());
    for (b, f) in batch.iter().enumerate() {
        let kept = f.statements.len().min(seq_len);
        true_lengths.push(kept);
        for (i, s) in f.statements[..kept].iter().enumerate() {
            flat.push(s);
            positions.push(b * seq_len + i);
        }
    }
    if flat.is_empty() {
        return Ok(None);
    }
    let statements = encode_statements(g, store, cfg, &flat, rng)?;
    Ok(Some(EncodedBatch {
        statements,
        positions: Rc::new(positions),
        true_lengths,
        seq_len,
    }))
}

/// Embeds one statement: row `t` is the embedding of token `t`, with dropout
/// in train mode.
pub fn embed_statement(
    ids: &[u32],
    store: &ParameterStore,
    cfg: &EncoderConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut g = Graph::new(mode);
    let table = g.param_by_name(store, EMBEDDING)?;
    let e = g.gather(table, Rc::new(ids.iter().map(|&i| i as usize).collect()))?;
    let e = g.dropout(e, cfg.embed_retain, rng)?;
    Ok(g.value(e).clone())
}

/// Convolution, ReLU and max-pool over an already embedded `T × d` statement.
pub fn encode_statement(embedded: &Tensor, store: &ParameterStore, cfg: &EncoderConfig) -> Result<Tensor> {
    let t = embedded.rows();
    if t == 0 {
        return Err(LeoError::usage("empty statement"));
    }
    let len = t.max(cfg.kernel_size);
    let mut padded = Tensor::zeros(&[len, cfg.dim]);
    padded.data_mut()[..embedded.len()].copy_from_slice(embedded.data());
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(padded)?;
    let w = g.param_by_name(store, CONV_WEIGHT)?;
    let b = g.param_by_name(store, CONV_BIAS)?;
    let conv = g.conv1d(x, w, b, Rc::new(vec![len]))?;
    let act = g.relu(conv)?;
    let pooled = g.max_pool(act, &[len - cfg.kernel_size + 1])?;
    g.value(pooled).clone().reshape(vec![cfg.dim])
}

/// Encodes a whole function into its padded `L × d` matrix.
pub fn encode_function(
    f: &TokenizedFunction,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    seq_len: usize,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<EncodedFunction> {
    let mut g = Graph::new(mode);
    let mut matrix = Tensor::zeros(&[seq_len, cfg.dim]);
    let true_length = f.statements.len().min(seq_len);
    if let Some(enc) = encode_batch(&mut g, store, cfg, &[f], seq_len, rng)? {
        let rows = g.value(enc.statements);
        for i in 0..true_length {
            matrix.row_mut(i).copy_from_slice(rows.row(i));
        }
    }
    Ok(EncodedFunction {
        matrix,
        true_length,
        label: f.label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize) -> (ParameterStore, EncoderConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = EncoderConfig::new(10, dim);
        let mut store = ParameterStore::new();
        init_encoder(&mut store, &cfg, &mut rng).unwrap();
        (store, cfg)
    }

    #[test]
    fn pad_statement_embeds_to_zero() {
        let (store, cfg) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = embed_statement(&[0, 0, 0], &store, &cfg, Mode::Eval, &mut rng).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_eval_is_embedding_row() {
        let (store, cfg) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = embed_statement(&[5], &store, &cfg, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e.data(), store.by_name(EMBEDDING).unwrap().value.row(5));
    }

    #[test]
    fn train_mode_embedding_is_unbiased() {
        let (store, cfg) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eval = embed_statement(&[3], &store, &cfg, Mode::Eval, &mut rng).unwrap();
        let n = 100_000;
        let mut mean = [0.0; 4];
        for _ in 0..n {
            let e = embed_statement(&[3], &store, &cfg, Mode::Train, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(e.data()) {
                *m += v / n as f64;
            }
        }
        for (m, e) in mean.iter().zip(eval.data()) {
            assert!((m - e).abs() <= 0.02 * e.abs(), "{m} vs {e}");
        }
    }

    #[test]
    fn zero_input_gives_relu_bias() {
        let (mut store, cfg) = setup(3);
        let bid = store.id(CONV_BIAS).unwrap();
        store.get_mut(bid).value = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let out = encode_statement(&Tensor::zeros(&[2, 3]), &store, &cfg).unwrap();
        assert_eq!(out.data(), &[0.5, 0.0, 2.0]);
    }

    #[test]
    fn one_token_matches_hand_convolution() {
        // d = 1, kernel 3: a single token x padded to [x, 0, 0]; output is
        // relu(w0·x + b), the only window.
        let cfg = EncoderConfig {
            vocab_size: 3,
            dim: 1,
            kernel_size: 3,
            embed_retain: 0.8,
        };
        let mut store = ParameterStore::new();
        store
            .insert(EMBEDDING, ParamGroup::Encoder, Tensor::new(vec![3, 1], vec![0.0, 0.0, 2.0]).unwrap())
            .unwrap();
        store
            .insert(CONV_WEIGHT, ParamGroup::Encoder, Tensor::new(vec![3, 1, 1], vec![1.5, 7.0, -3.0]).unwrap())
            .unwrap();
        store.insert(CONV_BIAS, ParamGroup::Encoder, Tensor::vector(vec![0.25])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = embed_statement(&[2], &store, &cfg, Mode::Eval, &mut rng).unwrap();
        let out = encode_statement(&e, &store, &cfg).unwrap();
        assert_eq!(out.data(), &[1.5 * 2.0 + 0.25]);
    }

    #[test]
    fn duplicating_max_window_changes_nothing() {
        let (store, cfg) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = embed_statement(&[2, 3, 4, 5], &store, &cfg, Mode::Eval, &mut rng).unwrap();
        let out_a = encode_statement(&a, &store, &cfg).unwrap();
        // appending a copy of the whole statement duplicates every window
        let b = embed_statement(&[2, 3, 4, 5, 2, 3, 4, 5], &store, &cfg, Mode::Eval, &mut rng).unwrap();
        let out_b = encode_statement(&b, &store, &cfg).unwrap();
        for (x, y) in out_a.data().iter().zip(out_b.data()) {
            assert!(y >= x);
        }
        let c = embed_statement(&[2, 3, 4, 2, 3, 4], &store, &cfg, Mode::Eval, &mut rng).unwrap();
        let d = embed_statement(&[2, 3, 4], &store, &cfg, Mode::Eval, &mut rng).unwrap();
        let out_c = encode_statement(&c, &store, &cfg).unwrap();
        let out_d = encode_statement(&d, &store, &cfg).unwrap();
        // [2,3,4,2,3,4] has windows (2,3,4),(3,4,2),(4,2,3),(2,3,4): max ≥ single window
        for (x, y) in out_d.data().iter().zip(out_c.data()) {
            assert!(y >= x);
        }
    }

    fn func(n: usize) -> TokenizedFunction {
        TokenizedFunction {
            statements: (0..n).map(|i| vec![2 + (i % 7) as u32, 3]).collect(),
            label: 1,
        }
    }

    #[test]
    fn padding_rows_are_zero() {
        let (store, cfg) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = encode_function(&func(3), &store, &cfg, 100, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e.matrix.shape(), &[100, 4]);
        assert_eq!(e.true_length, 3);
        assert!((3..100).all(|i| e.matrix.row(i).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn truncates_to_seq_len() {
        let (store, cfg) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let long = func(150);
        let e = encode_function(&long, &store, &cfg, 100, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e.true_length, 100);
        let head = TokenizedFunction {
            statements: long.statements[..100].to_vec(),
            label: 1,
        };
        let e2 = encode_function(&head, &store, &cfg, 100, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e.matrix, e2.matrix);
    }

    #[test]
    fn empty_function_is_zero_matrix() {
        let (store, cfg) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = encode_function(&func(0), &store, &cfg, 10, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e.true_length, 0);
        assert!(e.matrix.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_id_is_usage_error() {
        let (store, cfg) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            embed_statement(&[99], &store, &cfg, Mode::Eval, &mut rng),
            Err(LeoError::Usage(_))
        ));
    }
}
