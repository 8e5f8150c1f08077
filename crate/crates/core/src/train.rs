//! SGD training of a backbone alone, and end-to-end fine-tuning of a
//! backbone together with the CRF behind segment-wise shielding.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::backbone::{cross_entropy, PixelScores, ScoreWeights, TrainableBackbone};
use crate::crf::{mean_field_backward, mean_field_forward, CrfParams, UnaryField};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::eval::summary;
use crate::filters::bilateral_filter;
use crate::image::{to_mean_subtracted, BinaryMask, ImageTensor, SaliencyMap};
use crate::pipeline::{backbone_saliency, rosa_predict, RosaConfig, SHIELD_STREAM};
use crate::rng::Rng;
use crate::shielding::shield;

/// Stream id for the epoch ordering; epoch `e` uses `child(e)` of it.
const ORDER_STREAM: u64 = 0x004f_5244_4552;
/// Stream id for training-time shuffling; step draws are `child(epoch).child(index)`.
const TRAIN_SHIELD_STREAM: u64 = 0x5452_5348;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation improvement; 0 disables.
    pub early_stop_patience: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 20,
            batch_size: 8,
            early_stop_patience: 2,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Extra settings for joint backbone + CRF fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RosaTrainConfig {
    /// Learning rate of the CRF kernel weights and compatibility.
    pub crf_learning_rate: f64,
    /// Whether the compatibility matrix is trained (kernel weights always are).
    pub train_compatibility: bool,
}

impl Default for RosaTrainConfig {
    fn default() -> Self {
        Self {
            crf_learning_rate: 1e-2,
            train_compatibility: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of every completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation F-beta after every completed epoch (empty without a validation split).
    pub val_f_beta: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub steps: usize,
}

/// Momentum SGD over a flat parameter vector with per-coordinate rates.
struct Sgd {
    velocity: Vec<f64>,
    lr: Vec<f64>,
    decay: Vec<f64>,
    momentum: f64,
}

impl Sgd {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for i in 0..params.len() {
            self.velocity[i] = self.momentum * self.velocity[i] + grad[i] + self.decay[i] * params[i];
            params[i] -= self.lr[i] * self.velocity[i];
        }
    }
}

/// Generic epoch loop. `sample_grad(params, epoch, index)` returns the loss
/// and gradient of one training sample; `validate(params)` the validation
/// score (higher is better), if any.
fn fit(
    params: &mut Vec<f64>,
    n_train: usize,
    sgd_cfg: &SgdConfig,
    mut opt: Sgd,
    seed: u64,
    sample_grad: &mut dyn FnMut(&[f64], usize, usize) -> Result<(f64, Vec<f64>)>,
    validate: &mut dyn FnMut(&[f64]) -> Result<Option<f64>>,
    project: &dyn Fn(&mut [f64]),
) -> Result<TrainReport> {
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        val_f_beta: Vec::new(),
        best_epoch: None,
        stopped_early: false,
        steps: 0,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0;
    let order_rng = Rng::with_stream(seed, ORDER_STREAM);
    for epoch in 0..sgd_cfg.epochs {
        let order = order_rng.child(epoch as u64).permutation(n_train);
        let mut total = 0.0;
        for batch in order.chunks(sgd_cfg.batch_size) {
            let mut grad = vec![0.0; params.len()];
            for &i in batch {
                let (loss, g) = sample_grad(params, epoch, i)?;
                total += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad {
                *g *= scale;
            }
            opt.step(params, &grad);
            project(params);
            report.steps += 1;
        }
        let mean_loss = total / n_train as f64;
        if !mean_loss.is_finite() || params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch, loss: mean_loss });
        }
        report.epoch_losses.push(mean_loss);
        match validate(params)? {
            Some(score) => {
                report.val_f_beta.push(score);
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, params.clone()));
                    report.best_epoch = Some(epoch);
                    stale = 0;
                } else {
                    stale += 1;
                    if sgd_cfg.early_stop_patience > 0 && stale >= sgd_cfg.early_stop_patience {
                        report.stopped_early = true;
                        break;
                    }
                }
            }
            None => report.best_epoch = Some(epoch),
        }
    }
    if let Some((_, p)) = best {
        *params = p;
    }
    Ok(report)
}

fn check_samples(train: &[Sample]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    Ok(())
}

/// Trains the backbone alone with mean pixel-wise cross-entropy on clean
/// images, keeping the parameters of the best validation epoch.
pub fn train_backbone<B: TrainableBackbone>(
    model: &mut B,
    train: &[Sample],
    val: &[Sample],
    mean: &[f64],
    sgd: &SgdConfig,
    seed: u64,
) -> Result<TrainReport> {
    sgd.validate()?;
    check_samples(train)?;
    let inputs: Vec<ImageTensor> = train
        .iter()
        .map(|s| to_mean_subtracted(&s.image, mean))
        .collect::<Result<_>>()?;
    let n = model.param_count();
    let opt = Sgd {
        velocity: vec![0.0; n],
        lr: vec![sgd.learning_rate; n],
        decay: vec![sgd.weight_decay; n],
        momentum: sgd.momentum,
    };
    let mut params = model.param_vec();
    let mut work = model.clone();
    let mut sample_grad = |p: &[f64], _epoch: usize, i: usize| -> Result<(f64, Vec<f64>)> {
        work.set_param_vec(p)?;
        let loss = RefCell::new(0.0);
        let mask = &train[i].mask;
        let (_, g) = work.scores_and_param_gradient(&inputs[i], &|scores: &PixelScores| {
            let (l, w) = cross_entropy(scores, mask)?;
            *loss.borrow_mut() = l;
            Ok(w)
        })?;
        Ok((loss.into_inner(), g))
    };
    let mut probe = model.clone();
    let mut validate = |p: &[f64]| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        probe.set_param_vec(p)?;
        let maps: Vec<SaliencyMap> = val
            .iter()
            .map(|s| backbone_saliency(&probe, &s.image, mean))
            .collect::<Result<_>>()?;
        let masks: Vec<BinaryMask> = val.iter().map(|s| s.mask.clone()).collect();
        Ok(Some(summary(&maps, &masks)?.0))
    };
    let report = fit(
        &mut params,
        train.len(),
        sgd,
        opt,
        seed,
        &mut sample_grad,
        &mut validate,
        &|_| {},
    )?;
    model.set_param_vec(&params)?;
    Ok(report)
}

/// Mean binary cross-entropy of `q` against `y`, and `dL/dq`.
fn bce(q: &[f64], y: &[u8]) -> (f64, Vec<f64>) {
    const CLAMP: f64 = 1e-12;
    let n = q.len() as f64;
    let mut loss = 0.0;
    let grad = q
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = p.clamp(CLAMP, 1.0 - CLAMP);
            let t = f64::from(t);
            loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            (p - t) / (p * (1.0 - p)) / n
        })
        .collect();
    (loss / n, grad)
}

/// Number of CRF entries appended to the parameter vector.
const CRF_PARAMS: usize = 6;

fn crf_to_vec(c: &CrfParams) -> [f64; CRF_PARAMS] {
    [c.omega1, c.omega2, c.mu[0][0], c.mu[0][1], c.mu[1][0], c.mu[1][1]]
}

fn crf_from_vec(base: &CrfParams, v: &[f64]) -> CrfParams {
    CrfParams {
        omega1: v[0],
        omega2: v[1],
        mu: [[v[2], v[3]], [v[4], v[5]]],
        ..*base
    }
}

/// Fine-tunes backbone and CRF together. Every training image is shielded
/// (no gradient flows through the shuffling), classified, and restored by
/// the CRF with guidance from the bilateral-filtered unshuffled image; the
/// loss is the mean binary cross-entropy of the restored map. Validation
/// uses the full pipeline.
#[allow(clippy::too_many_arguments)]
pub fn train_rosa<B: TrainableBackbone>(
    model: &mut B,
    crf: &mut CrfParams,
    train: &[Sample],
    val: &[Sample],
    mean: &[f64],
    sgd: &SgdConfig,
    rosa_train: &RosaTrainConfig,
    cfg: &RosaConfig,
    seed: u64,
) -> Result<TrainReport> {
    sgd.validate()?;
    crf.validate()?;
    check_samples(train)?;
    if !(rosa_train.crf_learning_rate >= 0.0) {
        return Err(Error::Config("crf learning rate must be >= 0".into()));
    }
    for s in train {
        cfg.validate(s.image.pixel_count())?;
    }
    let guidance: Vec<ImageTensor> = train
        .iter()
        .map(|s| bilateral_filter(&s.image, &cfg.bilateral))
        .collect::<Result<_>>()?;
    let nb = model.param_count();
    let mut lr = vec![sgd.learning_rate; nb + CRF_PARAMS];
    let mut decay = vec![sgd.weight_decay; nb + CRF_PARAMS];
    for k in 0..CRF_PARAMS {
        let trainable = k < 2 || rosa_train.train_compatibility;
        lr[nb + k] = if trainable { rosa_train.crf_learning_rate } else { 0.0 };
        decay[nb + k] = 0.0;
    }
    let opt = Sgd {
        velocity: vec![0.0; nb + CRF_PARAMS],
        lr,
        decay,
        momentum: sgd.momentum,
    };
    let mut params = model.param_vec();
    params.extend_from_slice(&crf_to_vec(crf));
    let base = *crf;
    let shield_rng = Rng::with_stream(seed, TRAIN_SHIELD_STREAM);
    let mut work = model.clone();
    let mut sample_grad = |p: &[f64], epoch: usize, i: usize| -> Result<(f64, Vec<f64>)> {
        work.set_param_vec(&p[..nb])?;
        let crf_now = crf_from_vec(&base, &p[nb..]);
        let (shielded, _) = shield(
            &train[i].image,
            &cfg.slic,
            &shield_rng.child(epoch as u64).child(i as u64),
        )?;
        let input = to_mean_subtracted(&shielded, mean)?;
        let out = RefCell::new((0.0, [0.0; CRF_PARAMS]));
        let mask = &train[i].mask;
        let (_, mut g) = work.scores_and_param_gradient(&input, &|scores: &PixelScores| -> Result<ScoreWeights> {
            let unary = UnaryField::from_scores(scores);
            let (q, trace) = mean_field_forward(&unary, &guidance[i], &crf_now)?;
            let (loss, upstream) = bce(q.values(), mask.values());
            let grads = mean_field_backward(&trace, &upstream)?;
            *out.borrow_mut() = (
                loss,
                [
                    grads.omega1,
                    grads.omega2,
                    grads.mu[0][0],
                    grads.mu[0][1],
                    grads.mu[1][0],
                    grads.mu[1][1],
                ],
            );
            Ok(grads.logits.iter().map(|&d| [-d, d]).collect())
        })?;
        let (loss, crf_grad) = out.into_inner();
        g.extend_from_slice(&crf_grad);
        Ok((loss, g))
    };
    let mut probe = model.clone();
    let mut validate = |p: &[f64]| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        probe.set_param_vec(&p[..nb])?;
        let crf_now = crf_from_vec(&base, &p[nb..]);
        let shield_rng = Rng::with_stream(seed, SHIELD_STREAM);
        let maps: Vec<SaliencyMap> = val
            .iter()
            .enumerate()
            .map(|(i, s)| rosa_predict(&s.image, &probe, mean, &crf_now, cfg, &shield_rng.child(i as u64)))
            .collect::<Result<_>>()?;
        let masks: Vec<BinaryMask> = val.iter().map(|s| s.mask.clone()).collect();
        Ok(Some(summary(&maps, &masks)?.0))
    };
    let project = |p: &mut [f64]| {
        p[nb] = p[nb].max(0.0);
        p[nb + 1] = p[nb + 1].max(0.0);
    };
    let report = fit(
        &mut params,
        train.len(),
        sgd,
        opt,
        seed,
        &mut sample_grad,
        &mut validate,
        &project,
    )?;
    model.set_param_vec(&params[..nb])?;
    *crf = crf_from_vec(&base, &params[nb..]);
    Ok(report)
}
