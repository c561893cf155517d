//! Trained model bundle, batched inference and the `LEO1` file container.
//!
//! Layout: `"LEO1"`, `u32` version, then sections of `[4-byte tag][u64
//! length][payload]` in the order VOCB, TENS, CONF, STAT, THRS, LOGD, and a
//! trailing SHA-256 of every preceding byte. Integers and floats are little
//! endian. Parameter tensors are stored as `f32`; cluster statistics and the
//! threshold as `f64`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::autodiff::{Graph, Mode};
use crate::encoder::{encode_batch, TokenizedFunction};
use crate::error::{LeoError, Result};
use crate::model::ModelConfig;
use crate::normalize::Vocabulary;
use crate::objective::classifier_logits;
use crate::params::{ParamGroup, ParameterStore};
use crate::scorer::{
    msp_score, scoring_representation, CalibratedDetector, ClusterStat, ClusterStatistics, Decision, Precision,
    ScoringMode,
};
use crate::selector::{inference_mask, selector_logits, SelectionProbabilities};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LEO1";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;
/// Functions per inference graph.
const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub struct ModelArtifact {
    pub vocab: Vocabulary,
    pub params: ParameterStore,
    pub config: TrainConfig,
    pub detector: CalibratedDetector,
    /// Human-readable training log summary.
    pub log_digest: String,
}

/// Everything inference produces for one function.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionOutput {
    pub true_length: usize,
    /// Selection probability per real statement.
    pub selection: Vec<f64>,
    /// Scoring vector under the configured mode.
    pub representation: Vec<f64>,
    /// Classifier probabilities on the masked function.
    pub class_probs: [f64; 2],
}

pub fn model_config(cfg: &TrainConfig, vocab_size: usize) -> ModelConfig {
    let mut m = ModelConfig::new(
        vocab_size,
        cfg.dim,
        cfg.seq_len,
        cfg.selector_hidden,
        cfg.classifier_hidden,
        cfg.retain,
    );
    m.encoder.kernel_size = cfg.kernel_size;
    m.encoder.embed_retain = cfg.embed_retain;
    m
}

/// Eval-mode forward pass: selection probabilities, deterministic gates,
/// scoring representation and classifier probabilities.
pub fn infer(store: &ParameterStore, cfg: &TrainConfig, mc: &ModelConfig, fns: &[TokenizedFunction]) -> Result<Vec<FunctionOutput>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = mc.dim();
    let l = mc.seq_len;
    let mut out = Vec::with_capacity(fns.len());
    for chunk in fns.chunks(INFER_CHUNK) {
        let batch: Vec<&TokenizedFunction> = chunk.iter().collect();
        let m = batch.len();
        let mut g = Graph::new(Mode::Eval);
        let mut matrices = vec![vec![0.0; l * dim]; m];
        let mut selections = vec![Vec::new(); m];
        let mut lengths = vec![0; m];
        let mut gates_all = vec![vec![0.0; l]; m];
        let mut flat = Tensor::zeros(&[m, l * dim]);
        if let Some(enc) = encode_batch(&mut g, store, &mc.encoder, &batch, l, &mut rng)? {
            let logits = selector_logits(&mut g, store, &mc.selector, enc.statements, &mut rng)?;
            let probs = g.sigmoid(logits)?;
            let rows = g.value(enc.statements);
            let p = g.value(probs).data();
            let mut s = 0;
            for (b, &len) in enc.true_lengths.iter().enumerate() {
                lengths[b] = len;
                for i in 0..len {
                    matrices[b][i * dim..(i + 1) * dim].copy_from_slice(rows.row(s + i));
                }
                selections[b] = p[s..s + len].to_vec();
                let mut padded = selections[b].clone();
                padded.resize(l, 0.0);
                let z = inference_mask(&SelectionProbabilities(padded), len, cfg.gate_mode, cfg.nu, &mut rng);
                gates_all[b] = z.0;
                s += len;
            }
        }
        for b in 0..m {
            let row = flat.row_mut(b);
            for i in 0..lengths[b] {
                for j in 0..dim {
                    row[i * dim + j] = gates_all[b][i] * matrices[b][i * dim + j];
                }
            }
        }
        let x = g.input(flat)?;
        let logits = classifier_logits(&mut g, store, &mc.classifier, x, &mut rng)?;
        let probs = g.softmax(logits)?;
        let probs = g.value(probs);
        for b in 0..m {
            out.push(FunctionOutput {
                true_length: lengths[b],
                selection: std::mem::take(&mut selections[b]),
                representation: scoring_representation(&matrices[b], dim, lengths[b], &gates_all[b], cfg.scoring_mode),
                class_probs: [probs.row(b)[0], probs.row(b)[1]],
            });
        }
    }
    Ok(out)
}

/// Which outlier score to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreKind {
    #[default]
    Mahalanobis,
    /// `1 − max` classifier probability.
    Msp,
}

impl ScoreKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mahalanobis" => Some(ScoreKind::Mahalanobis),
            "msp" => Some(ScoreKind::Msp),
            _ => None,
        }
    }
}

impl ModelArtifact {
    pub fn model_config(&self) -> ModelConfig {
        model_config(&self.config, self.vocab.len())
    }

    pub fn infer(&self, fns: &[TokenizedFunction]) -> Result<Vec<FunctionOutput>> {
        infer(&self.params, &self.config, &self.model_config(), fns)
    }

    /// Outlier scores of tokenized functions.
    pub fn score(&self, fns: &[TokenizedFunction], kind: ScoreKind) -> Result<Vec<f64>> {
        self.infer(fns)?
            .iter()
            .map(|o| match kind {
                ScoreKind::Mahalanobis => self.detector.score(&o.representation),
                ScoreKind::Msp => Ok(msp_score(&o.class_probs)),
            })
            .collect()
    }

    pub fn decide(&self, score: f64) -> Decision {
        self.detector.decide(score)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        section(&mut out, b"VOCB", &self.vocab_bytes());
        section(&mut out, b"TENS", &self.tensor_bytes());
        section(&mut out, b"CONF", self.config.to_text().as_bytes());
        section(&mut out, b"STAT", &stats_bytes(&self.detector.stats));
        let mut thr = Vec::new();
        thr.extend_from_slice(&self.detector.threshold.to_le_bytes());
        thr.extend_from_slice(&self.detector.quantile.to_le_bytes());
        section(&mut out, b"THRS", &thr);
        section(&mut out, b"LOGD", self.log_digest.as_bytes());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(digest.as_slice());
        out
    }

    fn vocab_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        put_u32(&mut b, self.vocab.max_size() as u32);
        put_u32(&mut b, self.vocab.len() as u32);
        for t in self.vocab.tokens() {
            put_str(&mut b, t);
        }
        b
    }

    fn tensor_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        put_u32(&mut b, self.params.len() as u32);
        for (_, p) in self.params.iter() {
            put_str(&mut b, &p.name);
            b.push(p.group as u8);
            put_u32(&mut b, p.value.shape().len() as u32);
            for &d in p.value.shape() {
                put_u64(&mut b, d as u64);
            }
            for &v in p.value.data() {
                b.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(LeoError::Format("bad magic: not a LEO1 model file".into()));
        }
        if bytes.len() < 8 + CHECKSUM_LEN {
            return Err(LeoError::Format("checksum mismatch: file truncated".into()));
        }
        let (payload, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(payload).as_slice() != sum {
            return Err(LeoError::Format("checksum mismatch: file corrupt or truncated".into()));
        }
        let mut r = Reader { buf: payload, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(LeoError::Format(format!("unsupported format version {version}")));
        }
        let vocab = {
            let mut s = r.section(b"VOCB")?;
            let max = s.u32()? as usize;
            let n = s.u32()? as usize;
            let tokens = (0..n).map(|_| s.string()).collect::<Result<Vec<_>>>()?;
            s.finish()?;
            Vocabulary::from_tokens(tokens, max)
        };
        let params = {
            let mut s = r.section(b"TENS")?;
            let n = s.u32()? as usize;
            let mut store = ParameterStore::new();
            for _ in 0..n {
                let name = s.string()?;
                let group = *ParamGroup::ALL
                    .get(s.u8()? as usize)
                    .ok_or_else(|| LeoError::Format(format!("bad group for tensor {name}")))?;
                let ndim = s.u32()? as usize;
                let shape = (0..ndim).map(|_| s.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let len: usize = shape.iter().product();
                let data = (0..len).map(|_| s.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
                store.insert(&name, group, Tensor::new(shape, data)?)?;
            }
            s.finish()?;
            store
        };
        let config = {
            let s = r.section(b"CONF")?;
            let text = std::str::from_utf8(s.buf).map_err(|_| LeoError::Format("config is not UTF-8".into()))?;
            TrainConfig::from_text(text)?
        };
        let stats = {
            let mut s = r.section(b"STAT")?;
            let st = read_stats(&mut s)?;
            s.finish()?;
            st
        };
        let (threshold, quantile) = {
            let mut s = r.section(b"THRS")?;
            let v = (s.f64()?, s.f64()?);
            s.finish()?;
            v
        };
        let log_digest = {
            let s = r.section(b"LOGD")?;
            String::from_utf8(s.buf.to_vec()).map_err(|_| LeoError::Format("log digest is not UTF-8".into()))?
        };
        r.finish()?;
        let artifact = ModelArtifact {
            vocab,
            params,
            config,
            detector: CalibratedDetector::new(stats, threshold, quantile)?,
            log_digest,
        };
        artifact.check_shapes()?;
        Ok(artifact)
    }

    /// Every parameter the model configuration needs exists with the right shape.
    fn check_shapes(&self) -> Result<()> {
        let expected = crate::model::init_model(&self.model_config(), 0)?;
        for (_, p) in expected.iter() {
            let got = self
                .params
                .by_name(&p.name)
                .ok_or_else(|| LeoError::Format(format!("missing tensor {}", p.name)))?;
            if got.value.shape() != p.value.shape() {
                return Err(LeoError::Format(format!("tensor {} has the wrong shape", p.name)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_model(artifact: &ModelArtifact, path: &Path) -> Result<()> {
    artifact.save(path)
}

pub fn load_model(path: &Path) -> Result<ModelArtifact> {
    ModelArtifact::load(path)
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    put_u64(out, payload.len() as u64);
    out.extend_from_slice(payload);
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

fn put_f64s(b: &mut Vec<u8>, v: &[f64]) {
    put_u64(b, v.len() as u64);
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

fn stats_bytes(stats: &ClusterStatistics) -> Vec<u8> {
    let mut b = vec![match stats.mode {
        ScoringMode::Pooled => 0,
        ScoringMode::ConcatDiagonal => 1,
    }];
    put_u32(&mut b, stats.clusters.len() as u32);
    for c in &stats.clusters {
        put_u64(&mut b, c.count as u64);
        b.extend_from_slice(&c.shrinkage.to_le_bytes());
        put_f64s(&mut b, &c.mean);
        match &c.precision {
            Precision::Dense(p) => {
                b.push(0);
                put_f64s(&mut b, p);
            }
            Precision::Diagonal(p) => {
                b.push(1);
                put_f64s(&mut b, p);
            }
        }
    }
    b
}

fn read_stats(s: &mut Reader<'_>) -> Result<ClusterStatistics> {
    let mode = match s.u8()? {
        0 => ScoringMode::Pooled,
        1 => ScoringMode::ConcatDiagonal,
        m => return Err(LeoError::Format(format!("unknown scoring mode {m}"))),
    };
    let k = s.u32()? as usize;
    let mut clusters = Vec::with_capacity(k);
    for _ in 0..k {
        let count = s.u64()? as usize;
        let shrinkage = s.f64()?;
        let mean = s.f64s()?;
        let precision = match s.u8()? {
            0 => Precision::Dense(s.f64s()?),
            1 => Precision::Diagonal(s.f64s()?),
            p => return Err(LeoError::Format(format!("unknown precision kind {p}"))),
        };
        let expect = match &precision {
            Precision::Dense(p) => p.len() == mean.len() * mean.len(),
            Precision::Diagonal(p) => p.len() == mean.len(),
        };
        if !expect {
            return Err(LeoError::Format("cluster precision does not match its mean".into()));
        }
        clusters.push(ClusterStat {
            mean,
            precision,
            count,
            shrinkage,
        });
    }
    Ok(ClusterStatistics { clusters, mode })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| LeoError::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() / 8 {
            return Err(LeoError::Format("vector length exceeds data".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| LeoError::Format("string is not UTF-8".into()))
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>> {
        let got = self.take(4)?;
        if got != tag {
            return Err(LeoError::Format(format!(
                "expected section {}, found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(got)
            )));
        }
        let n = self.u64()? as usize;
        Ok(Reader { buf: self.take(n)?, pos: 0 })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(LeoError::Format("trailing bytes in section".into()));
        }
        Ok(())
    }
}
