//! The two-step training loop and post-training calibration.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::artifact::{infer, model_config, ModelArtifact};
use super::config::TrainConfig;
use super::dataset::{default_threads, normalize_records, split_dataset, tokenize, DatasetRecord};
use crate::autodiff::Mode;
use crate::encoder::{pin_pad_row, TokenizedFunction};
use crate::error::{LeoError, Result};
use crate::model::{init_model, ModelConfig};
use crate::normalize::Vocabulary;
use crate::objective::{data_distribution_loss, joint_loss, GateSource, StepGraph};
use crate::optim::{clip_gradients, AdamState};
use crate::params::{ParamGroup, ParameterStore};
use crate::scorer::{calibrate_threshold, fit_cluster_statistics, CalibratedDetector};

const STEP1_GROUPS: [ParamGroup; 2] = [ParamGroup::Encoder, ParamGroup::Classifier];

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub epoch: usize,
    /// Random-mask cross-entropy (zero when the step is disabled).
    pub step1_ce: f64,
    pub joint_ce: f64,
    pub contrastive: f64,
    pub joint_total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub train_size: usize,
    pub val_size: usize,
    pub vocab_size: usize,
}

impl TrainLog {
    pub fn digest(&self) -> String {
        let mut s = format!(
            "train={} val={} vocab={}\n",
            self.train_size, self.val_size, self.vocab_size
        );
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "epoch {} step1_ce={:.6} joint_ce={:.6} ccl={:.6} total={:.6}",
                e.epoch, e.step1_ce, e.joint_ce, e.contrastive, e.joint_total
            );
        }
        s
    }
}

/// Prepared training state: vocabulary, tokenized splits and a fresh model.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub train: Vec<TokenizedFunction>,
    pub val: Vec<TokenizedFunction>,
    pub params: ParameterStore,
    rng: ChaCha8Rng,
    step1_opt: AdamState,
    joint_opt: AdamState,
    log: TrainLog,
}

impl Trainer {
    /// Splits, normalizes and builds the vocabulary from the training part.
    pub fn new(config: &TrainConfig, records: &[DatasetRecord]) -> Result<Self> {
        config.validate()?;
        let (train_rec, val_rec) = split_dataset(records, config.val_fraction, config.seed)?;
        let threads = default_threads();
        let train_norm = normalize_records(&train_rec, threads)?;
        let val_norm = normalize_records(&val_rec, threads)?;
        let vocab = Vocabulary::build(&train_norm, config.vocab_max)?;
        let train: Vec<TokenizedFunction> = train_norm
            .iter()
            .zip(&train_rec)
            .map(|(n, r)| tokenize(n, r.label, &vocab))
            .collect();
        let val = val_norm.iter().zip(&val_rec).map(|(n, r)| tokenize(n, r.label, &vocab)).collect();
        if !train.iter().any(|f| f.label == 1) {
            log::warn!("no vulnerable samples in the training split; the contrastive term stays 0");
        }
        let model = model_config(config, vocab.len());
        let params = init_model(&model, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let log = TrainLog {
            epochs: Vec::new(),
            train_size: train.len(),
            val_size: val_rec.len(),
            vocab_size: vocab.len(),
        };
        Ok(Trainer {
            config: config.clone(),
            model,
            vocab,
            train,
            val,
            params,
            rng,
            step1_opt: AdamState::new(config.lr),
            joint_opt: AdamState::new(config.lr),
            log,
        })
    }

    fn apply(&mut self, step: StepGraph, groups: &[ParamGroup], epoch: usize, batch: usize) -> Result<()> {
        if !step.parts.total.is_finite() {
            return Err(LeoError::Diverged { epoch, batch });
        }
        self.params.zero_grads();
        step.graph.backward(step.loss).map_err(|e| diverged(e, epoch, batch))?.accumulate(&mut self.params);
        let norm = clip_gradients(&mut self.params, groups, self.config.clip_norm);
        if !norm.is_finite() {
            return Err(LeoError::Diverged { epoch, batch });
        }
        let opt = if groups == STEP1_GROUPS {
            &mut self.step1_opt
        } else {
            &mut self.joint_opt
        };
        opt.update(&mut self.params, groups)?;
        pin_pad_row(&mut self.params)
    }

    /// Step 1 on one batch: random-mask cross-entropy, updating encoder and
    /// classifier. Returns the loss.
    pub fn step1(&mut self, batch: &[usize], epoch: usize, index: usize) -> Result<f64> {
        let fns: Vec<&TokenizedFunction> = batch.iter().map(|&i| &self.train[i]).collect();
        let step = data_distribution_loss(&self.params, &self.model, &fns, self.config.nu, GateSource::Sample, Mode::Train, &mut self.rng)
            .map_err(|e| diverged(e, epoch, index))?;
        let ce = step.parts.cross_entropy;
        self.apply(step, &STEP1_GROUPS, epoch, index)?;
        Ok(ce)
    }

    /// Step 2 on one batch: joint selector/classifier objective over all
    /// parameters. Returns (total, cross-entropy, contrastive).
    pub fn step2(&mut self, batch: &[usize], epoch: usize, index: usize) -> Result<(f64, f64, f64)> {
        let fns: Vec<&TokenizedFunction> = batch.iter().map(|&i| &self.train[i]).collect();
        let step = joint_loss(
            &self.params,
            &self.model,
            &fns,
            self.config.nu,
            &self.config.contrastive(),
            GateSource::Sample,
            None,
            Mode::Train,
            &mut self.rng,
        )
        .map_err(|e| diverged(e, epoch, index))?;
        let p = step.parts;
        self.apply(step, &ParamGroup::ALL, epoch, index)?;
        Ok((p.total, p.cross_entropy, p.contrastive))
    }

    /// One pass over the training split in a seeded order; the last partial
    /// batch is kept.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let batches: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
        let mut st = EpochStats {
            epoch,
            ..Default::default()
        };
        for (i, b) in batches.iter().enumerate() {
            if !self.config.ablate_cd {
                st.step1_ce += self.step1(b, epoch, i)?;
            }
            let (total, ce, ccl) = self.step2(b, epoch, i)?;
            st.joint_total += total;
            st.joint_ce += ce;
            st.contrastive += ccl;
        }
        let n = batches.len().max(1) as f64;
        st.step1_ce /= n;
        st.joint_ce /= n;
        st.contrastive /= n;
        st.joint_total /= n;
        log::info!(
            "epoch {epoch}: step1_ce={:.4} joint_ce={:.4} ccl={:.4}",
            st.step1_ce,
            st.joint_ce,
            st.contrastive
        );
        self.log.epochs.push(st);
        Ok(st)
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Rounds parameters to their stored precision, fits cluster statistics
    /// on the training split and calibrates the threshold on validation.
    pub fn finish(mut self) -> Result<(ModelArtifact, TrainLog)> {
        for p in self.params.iter_mut() {
            p.value.round_to_f32();
            p.grad.data_mut().fill(0.0);
        }
        let detector = calibrate(&self.params, &self.config, &self.model, &self.train, &self.val)?;
        let artifact = ModelArtifact {
            vocab: self.vocab,
            params: self.params,
            config: self.config,
            detector,
            log_digest: self.log.digest(),
        };
        Ok((artifact, self.log))
    }
}

fn diverged(e: LeoError, epoch: usize, batch: usize) -> LeoError {
    match e {
        LeoError::NonFinite { .. } => LeoError::Diverged { epoch, batch },
        e => e,
    }
}

/// Cluster statistics from training representations and the threshold from
/// validation scores, both through the deterministic-mask path.
pub fn calibrate(
    params: &ParameterStore,
    cfg: &TrainConfig,
    mc: &ModelConfig,
    train: &[TokenizedFunction],
    val: &[TokenizedFunction],
) -> Result<CalibratedDetector> {
    let reps: Vec<Vec<f64>> = infer(params, cfg, mc, train)?.into_iter().map(|o| o.representation).collect();
    let stats = fit_cluster_statistics(&reps, cfg.k, cfg.seed, cfg.scoring_mode, cfg.shrinkage, cfg.kmeans_iters)?;
    let scores = infer(params, cfg, mc, val)?
        .iter()
        .map(|o| crate::scorer::mahalanobis_score(&o.representation, &stats))
        .collect::<Result<Vec<_>>>()?;
    let threshold = calibrate_threshold(&scores, cfg.quantile)?;
    CalibratedDetector::new(stats, threshold, cfg.quantile)
}

/// Full training run on in-distribution records.
pub fn train(config: &TrainConfig, records: &[DatasetRecord]) -> Result<(ModelArtifact, TrainLog)> {
    let mut t = Trainer::new(config, records)?;
    for epoch in 0..config.epochs {
        t.run_epoch(epoch)?;
    }
    t.finish()
}
