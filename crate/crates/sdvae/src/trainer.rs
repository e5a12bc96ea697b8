//! Training loop: Adam, stratified semi-supervised splits, mixed
//! labeled/unlabeled minibatches, divergence handling and per-epoch
//! metrics.

use crate::data::Dataset;
use crate::model::{
    predict, sdvae1_loss, sdvae2_loss, unlabeled_loss, Arch, BaselineMode, Batch, ConvSpec,
    EncoderKind, ModelError, ModelParams, NoiseBundle, ObjectiveConfig, ReconKind,
};
use crate::autodiff::Tape;
use crate::distributions::NoiseSource;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("training configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Sdvae1,
    Sdvae2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub mu: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub baseline: BaselineMode,
    pub decode_sampled: Option<bool>,
    pub dim_u: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub flow_length: usize,
    pub dropout: f64,
    pub encoder: EncoderKind,
    pub conv: Option<ConvSpec>,
    pub recon: ReconKind,
    pub binarize_threshold: f64,
    pub labeled_count: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            variant: Variant::Sdvae2,
            seed: 0,
            epochs: 200,
            batch_size: 100,
            lr: 1e-3,
            lambda: 0.1,
            mu: 1.0,
            beta1: 0.1,
            beta2: 1.0,
            baseline: BaselineMode::ProbsMean,
            decode_sampled: None,
            dim_u: 50,
            enc_hidden: vec![256, 128],
            dec_hidden: vec![128],
            flow_length: 1,
            dropout: 0.1,
            encoder: EncoderKind::Mlp,
            conv: None,
            recon: ReconKind::Bernoulli,
            binarize_threshold: 0.5,
            labeled_count: 100,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("bad learning rate {}", self.lr)));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn arch(&self, dim_x: usize, k: usize) -> Arch {
        Arch {
            dim_x,
            dim_u: self.dim_u,
            k,
            enc_hidden: self.enc_hidden.clone(),
            dec_hidden: self.dec_hidden.clone(),
            flow_length: self.flow_length,
            encoder: self.encoder,
            conv: self.conv.clone(),
            dropout: self.dropout,
            recon: self.recon,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            mu: self.mu,
            beta1: self.beta1,
            beta2: self.beta2,
            baseline: self.baseline,
            decode_sampled: self.decode_sampled,
        }
    }
}

// ── Adam ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(model: &ModelParams) -> Self {
        OptimizerState {
            m: model
                .store
                .tensors
                .iter()
                .map(|t| vec![0.0; t.values.len()])
                .collect(),
            v: model
                .store
                .tensors
                .iter()
                .map(|t| vec![0.0; t.values.len()])
                .collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update; aborts on any non-finite gradient,
/// naming the offending tensor.
pub fn adam_step(
    model: &mut ModelParams,
    state: &mut OptimizerState,
    grads: &[Vec<f64>],
    lr: f64,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), model.store.tensors.len());
    for (ti, tensor) in model.store.tensors.iter().enumerate() {
        if grads[ti].iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGrad {
                name: tensor.name.clone(),
            });
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for (ti, tensor) in model.store.tensors.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[ti], &mut state.v[ti]);
        for (j, g) in grads[ti].iter().enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            tensor.values[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

// ── splits and batching ────────────────────────────────────────────────

/// Stratified labeled/unlabeled split: as close to labeled_count/k per
/// class as the counts allow, remainder spread over the lowest classes.
pub fn split_semisupervised(
    labels: &[usize],
    k: usize,
    labeled_count: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if labeled_count < k {
        return Err(TrainError::Config(format!(
            "labeled_count {labeled_count} is below the class count {k}"
        )));
    }
    if labeled_count > labels.len() {
        return Err(TrainError::Config(format!(
            "labeled_count {labeled_count} exceeds dataset size {}",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(TrainError::Config(format!("label {l} out of range for k={k}")));
        }
        by_class[l].push(i);
    }
    let base = labeled_count / k;
    let rem = labeled_count % k;
    let mut labeled = Vec::with_capacity(labeled_count);
    let mut unlabeled = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        idx.shuffle(&mut rng);
        let want = base + (c < rem) as usize;
        if idx.len() < want {
            return Err(TrainError::Config(format!(
                "class {c} has only {} examples, need {want} labeled",
                idx.len()
            )));
        }
        labeled.extend_from_slice(&idx[..want]);
        unlabeled.extend_from_slice(&idx[want..]);
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok((labeled, unlabeled))
}

// ── training loop ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: f64,
    pub re: f64,
    pub kl_u: f64,
    pub kl_v: f64,
    pub entropy: f64,
    pub train_err: f64,
    pub test_err: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub metrics: Vec<MetricsRecord>,
    /// Epoch at which training hit non-finite numbers, if any; the model
    /// is then the snapshot from the last completed epoch.
    pub diverged: Option<usize>,
}

/// Trains on `ds`, revealing labels only at `labeled_idx`. `test` is used
/// for the per-epoch error metric only.
pub fn train_with_indices(
    cfg: &TrainingConfig,
    ds: &Dataset,
    k: usize,
    labeled_idx: &[usize],
    test: Option<&Dataset>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let arch = cfg.arch(ds.dim_x, k);
    let mut model = ModelParams::new(arch, cfg.seed)?;
    let mut opt = OptimizerState::new(&model);
    let mut noise_src = NoiseSource::new(cfg.seed.wrapping_add(1));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let obj = cfg.objective();

    let labeled_set: std::collections::HashSet<usize> = labeled_idx.iter().copied().collect();
    let unlabeled_idx: Vec<usize> = (0..ds.n).filter(|i| !labeled_set.contains(i)).collect();
    let n_lab = labeled_idx.len();
    let n_total = ds.n;
    if n_total == 0 {
        return Err(TrainError::Config("empty training set".into()));
    }
    let batch = cfg.batch_size.min(n_total);
    let lab_per_batch = if n_lab == 0 {
        0
    } else {
        ((batch * n_lab) / n_total).max(1).min(batch)
    };
    let batches_per_epoch = (n_total / batch).max(1);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.clone();
    let mut diverged = None;

    'epochs: for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut lab_pool = labeled_idx.to_vec();
        let mut unl_pool = unlabeled_idx.clone();
        lab_pool.shuffle(&mut shuffle_rng);
        unl_pool.shuffle(&mut shuffle_rng);
        let (mut lp, mut up) = (0usize, 0usize);
        let take_lab = |lp: &mut usize, pool: &mut Vec<usize>, rng: &mut ChaCha8Rng| {
            if *lp >= pool.len() {
                pool.shuffle(rng);
                *lp = 0;
            }
            let i = pool[*lp];
            *lp += 1;
            i
        };

        let mut sums = [0.0f64; 5]; // loss, re, kl_u, kl_v, entropy
        let mut rows_seen = 0usize;
        for _ in 0..batches_per_epoch {
            let mut rows: Vec<(usize, Option<usize>)> = Vec::with_capacity(batch);
            for _ in 0..lab_per_batch {
                let i = take_lab(&mut lp, &mut lab_pool, &mut shuffle_rng);
                rows.push((i, Some(ds.labels[i])));
            }
            let unl_in_batch = batch - lab_per_batch.min(batch);
            for _ in 0..unl_in_batch {
                if unl_pool.is_empty() {
                    let i = take_lab(&mut lp, &mut lab_pool, &mut shuffle_rng);
                    rows.push((i, Some(ds.labels[i])));
                } else {
                    let i = take_lab(&mut up, &mut unl_pool, &mut shuffle_rng);
                    rows.push((i, None));
                }
            }
            let n = rows.len();
            let mut x = Vec::with_capacity(n * ds.dim_x);
            let mut labels = Vec::with_capacity(n);
            for &(i, l) in &rows {
                x.extend_from_slice(&ds.x[i * ds.dim_x..(i + 1) * ds.dim_x]);
                labels.push(l);
            }
            let b = Batch::new(x, n, ds.dim_x, labels);
            let noise = NoiseBundle::draw(&mut noise_src, &model.arch, n, true);

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let loss = match cfg.variant {
                _ if b.labeled_count() == 0 => {
                    unlabeled_loss(&mut tape, &model, &bound, &b, &noise, &obj)
                }
                Variant::Sdvae1 => sdvae1_loss(&mut tape, &model, &bound, &b, &noise, &obj),
                Variant::Sdvae2 => sdvae2_loss(&mut tape, &model, &bound, &b, &noise, &obj),
            };
            let loss = match loss {
                Ok(l) => l,
                Err(e) if e.is_numeric() => {
                    diverged = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            if tape.backward(loss.total).is_err() {
                diverged = Some(epoch);
                break 'epochs;
            }
            let grads = model.collect_grads(&tape, &bound);
            match adam_step(&mut model, &mut opt, &grads, cfg.lr) {
                Ok(()) => {}
                Err(TrainError::NonFiniteGrad { .. }) => {
                    diverged = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            sums[0] += loss.total_value * n as f64;
            sums[1] += loss.re.iter().sum::<f64>();
            sums[2] += loss.kl_u.iter().sum::<f64>();
            sums[3] += loss.kl_v.iter().sum::<f64>();
            sums[4] += loss.entropy.iter().sum::<f64>();
            rows_seen += n;
        }
        if !model.store.all_finite() {
            diverged = Some(epoch);
            break 'epochs;
        }
        last_good = model.clone();

        let train_err = if n_lab > 0 {
            let (lx, ly) = ds.rows(labeled_idx);
            error_rate(&model, &lx, &ly, n_lab)?
        } else {
            f64::NAN
        };
        let test_err = match test {
            Some(t) => Some(error_rate(&model, &t.x, &t.labels, t.n)?),
            None => None,
        };
        let d = rows_seen.max(1) as f64;
        metrics.push(MetricsRecord {
            epoch,
            loss: sums[0] / d,
            re: sums[1] / d,
            kl_u: sums[2] / d,
            kl_v: sums[3] / d,
            entropy: sums[4] / d,
            train_err,
            test_err,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome {
        model: if diverged.is_some() { last_good } else { model },
        metrics,
        diverged,
    })
}

/// Convenience wrapper: stratified split by `cfg.labeled_count`, then train.
pub fn train(
    cfg: &TrainingConfig,
    ds: &Dataset,
    k: usize,
    test: Option<&Dataset>,
) -> Result<TrainOutcome, TrainError> {
    let (labeled, _) = split_semisupervised(&ds.labels, k, cfg.labeled_count, cfg.seed)?;
    train_with_indices(cfg, ds, k, &labeled, test)
}

/// Fraction of rows whose argmax class disagrees with the label.
pub fn error_rate(
    model: &ModelParams,
    x: &[f64],
    labels: &[usize],
    n: usize,
) -> Result<f64, TrainError> {
    if n == 0 {
        return Ok(f64::NAN);
    }
    let pred = predict(model, x, n)?;
    let wrong = pred
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count();
    Ok(wrong as f64 / n as f64)
}

pub fn metrics_to_jsonl(metrics: &[MetricsRecord]) -> String {
    metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize"))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}
