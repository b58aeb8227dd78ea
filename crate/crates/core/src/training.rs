//! Losses with exact score gradients, and the Adagrad epoch loop for full
//! softmax and (regularized) negative sampling.
//!
//! Every loss here is a function of a handful of scores `ξ_y(x)`. Gradients
//! are returned with respect to those scores; the parameter gradient of label
//! `y` is then `dℓ/dξ_y · (x, 1)`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data_io::{Example, SparseDataset};
use crate::error::{Error, Result};
use crate::inference::{self, PredictionConfig};
use crate::linear_model::{LinearClassifier, OptimizerConfig, SharedClassifier};
use crate::math;
use crate::noise::{NoiseContext, NoiseModel};

/// Above this many labels the full softmax logs a warning per training run.
pub const SOFTMAX_LABEL_WARNING: usize = 100_000;
pub const DEFAULT_LOG_EVERY_STEPS: u64 = 10_000;

/// A loss value and its derivatives with respect to the scores of the labels
/// it touches. Each label appears at most once.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<(usize, f64)>,
}

impl LossGrad {
    fn add(&mut self, y: usize, g: f64) {
        match self.grads.iter_mut().find(|(l, _)| *l == y) {
            Some((_, acc)) => *acc += g,
            None => self.grads.push((y, g)),
        }
    }

    pub fn grad(&self, y: usize) -> f64 {
        self.grads.iter().filter(|(l, _)| *l == y).map(|(_, g)| g).sum()
    }
}

/// `−ξ_y + log Σ e^{ξ}` and its gradient `softmax(ξ) − 1[·=y]` over all
/// labels.
pub fn softmax_loss_from_scores(scores: &[f64], y: usize) -> Result<LossGrad> {
    if y >= scores.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            num_labels: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score in softmax".into()));
    }
    let lse = math::log_sum_exp(scores);
    let grads = scores
        .iter()
        .enumerate()
        .map(|(l, &s)| (l, (s - lse).exp() - (l == y) as u8 as f64))
        .collect();
    Ok(LossGrad {
        loss: lse - scores[y],
        grads,
    })
}

/// `−log σ(ξ_y) − Σ_j log σ(−ξ_{y′_j})`. Negatives equal to `y` are kept and
/// their gradient adds onto `y`.
pub fn neg_sampling_loss_from_scores(y: usize, score_y: f64, negatives: &[(usize, f64)]) -> LossGrad {
    let mut out = LossGrad {
        loss: -math::log_sigmoid(score_y),
        grads: vec![(y, -math::sigmoid(-score_y))],
    };
    for &(yn, s) in negatives {
        out.loss -= math::log_sigmoid(-s);
        out.add(yn, math::sigmoid(s));
    }
    out
}

/// Negative sampling plus `λ(ξ + log p_n)²` on the positive and on every
/// negative. Entries are `(label, score, log p_n(label|x))`.
pub fn regularized_loss_from_scores(
    positive: (usize, f64, f64),
    negatives: &[(usize, f64, f64)],
    lambda: f64,
) -> LossGrad {
    let neg: Vec<(usize, f64)> = negatives.iter().map(|&(l, s, _)| (l, s)).collect();
    let mut out = neg_sampling_loss_from_scores(positive.0, positive.1, &neg);
    if lambda != 0.0 {
        for &(l, s, lp) in std::iter::once(&positive).chain(negatives) {
            let r = s + lp;
            out.loss += lambda * r * r;
            out.add(l, 2.0 * lambda * r);
        }
    }
    out
}

/// Full softmax loss of one example under `model`.
pub fn softmax_loss_and_grad(model: &LinearClassifier, example: &Example) -> Result<LossGrad> {
    softmax_loss_from_scores(&model.scores(&example.features)?, example.label)
}

pub fn neg_sampling_loss_and_grad(model: &LinearClassifier, example: &Example, negatives: &[usize]) -> Result<LossGrad> {
    let x = &example.features;
    let sy = model.score(x, example.label)?;
    let neg = negatives
        .iter()
        .map(|&l| model.score(x, l).map(|s| (l, s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(neg_sampling_loss_from_scores(example.label, sy, &neg))
}

pub fn regularized_loss_and_grad(
    model: &LinearClassifier,
    example: &Example,
    negatives: &[usize],
    noise: &NoiseContext<'_>,
    lambda: f64,
) -> Result<LossGrad> {
    let x = &example.features;
    let entry = |l: usize| -> Result<(usize, f64, f64)> {
        let lp = noise.log_prob(l)?;
        if !lp.is_finite() {
            return Err(Error::NonFinite(format!("noise log-probability of label {l}")));
        }
        Ok((l, model.score(x, l)?, lp))
    };
    let pos = entry(example.label)?;
    let neg = negatives.iter().map(|&l| entry(l)).collect::<Result<Vec<_>>>()?;
    Ok(regularized_loss_from_scores(pos, &neg, lambda))
}

/// Squared-score penalty `λ Σ_y ξ_y²` used with the full softmax.
fn add_score_penalty(out: &mut LossGrad, scores: &[f64], lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for (l, g) in out.grads.iter_mut() {
        let s = scores[*l];
        out.loss += lambda * s * s;
        *g += 2.0 * lambda * s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    SoftmaxFull,
    NegSampling,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_full" => Ok(Method::SoftmaxFull),
            "neg_sampling" => Ok(Method::NegSampling),
            _ => Err(Error::invalid(format!("unknown training method '{s}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::SoftmaxFull => "softmax_full",
            Method::NegSampling => "neg_sampling",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub rho: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub negatives_per_positive: usize,
    pub adagrad_epsilon: f64,
    pub bias_removal_at_eval: bool,
    /// Learning-curve cadence in steps; 0 disables intra-epoch points.
    pub log_every_steps: u64,
    /// 1 is the deterministic sequential mode.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::NegSampling,
            rho: 0.01,
            lambda: 0.0,
            epochs: 1,
            seed: 0,
            negatives_per_positive: 1,
            adagrad_epsilon: 1e-8,
            bias_removal_at_eval: true,
            log_every_steps: DEFAULT_LOG_EVERY_STEPS,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.rho,
            regularizer: self.lambda,
            adagrad_epsilon: self.adagrad_epsilon,
        }
    }

    pub fn validate(&self, noise: Option<&NoiseModel>) -> Result<()> {
        self.optimizer().validate()?;
        if self.negatives_per_positive == 0 {
            return Err(Error::invalid("negatives_per_positive must be at least 1"));
        }
        if self.threads == 0 {
            return Err(Error::invalid("threads must be at least 1"));
        }
        match (self.method, noise) {
            (Method::SoftmaxFull, Some(_)) => Err(Error::invalid("softmax_full takes no noise model")),
            (Method::NegSampling, None) => Err(Error::invalid("neg_sampling needs a noise model")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: u64,
    pub wall_clock_s: f64,
    pub train_loss: f64,
    pub val_log_lik: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub steps: u64,
    pub wall_clock_s: f64,
    pub val_log_lik: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Validation metrics every `log_every_steps` steps, starting at step 0.
    pub curve: Vec<CurvePoint>,
}

struct Validator<'a> {
    data: Option<&'a SparseDataset>,
    noise: Option<&'a NoiseModel>,
    cfg: PredictionConfig,
}

impl Validator<'_> {
    fn run(&self, model: &LinearClassifier) -> Result<Option<(f64, f64)>> {
        match self.data {
            Some(d) => {
                let r = inference::evaluate(model, self.noise, d, &self.cfg)?;
                Ok(Some((r.log_likelihood, r.accuracy)))
            }
            None => Ok(None),
        }
    }
}

/// One SGD step on `ex`. Returns the loss. Shared by the sequential and
/// lock-free paths through the two closures.
#[allow(clippy::too_many_arguments)]
fn step<R: Rng>(
    cfg: &TrainConfig,
    num_labels: usize,
    noise: Option<&NoiseModel>,
    ex: &Example,
    rng: &mut R,
    negatives: &mut Vec<usize>,
    score: impl Fn(usize) -> f64,
    mut apply: impl FnMut(usize, f64) -> Result<()>,
) -> Result<f64> {
    let out = match (cfg.method, noise) {
        (Method::SoftmaxFull, _) => {
            let scores: Vec<f64> = (0..num_labels).map(&score).collect();
            let mut out = softmax_loss_from_scores(&scores, ex.label)?;
            add_score_penalty(&mut out, &scores, cfg.lambda);
            out
        }
        (Method::NegSampling, Some(noise)) => {
            let ctx = noise.condition(&ex.features)?;
            negatives.clear();
            for _ in 0..cfg.negatives_per_positive {
                negatives.push(ctx.sample(rng)?);
            }
            if cfg.lambda == 0.0 {
                let neg: Vec<(usize, f64)> = negatives.iter().map(|&l| (l, score(l))).collect();
                neg_sampling_loss_from_scores(ex.label, score(ex.label), &neg)
            } else {
                let entry = |l: usize| -> Result<(usize, f64, f64)> {
                    let lp = ctx.log_prob(l)?;
                    if !lp.is_finite() {
                        return Err(Error::NonFinite(format!("noise log-probability of label {l}")));
                    }
                    Ok((l, score(l), lp))
                };
                let pos = entry(ex.label)?;
                let neg = negatives.iter().map(|&l| entry(l)).collect::<Result<Vec<_>>>()?;
                regularized_loss_from_scores(pos, &neg, cfg.lambda)
            }
        }
        (Method::NegSampling, None) => unreachable!("validated"),
    };
    if !out.loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss {} on label {} (touched scores: {:?})",
            out.loss,
            ex.label,
            out.grads.iter().map(|&(l, _)| (l, score(l))).collect::<Vec<_>>()
        )));
    }
    for &(l, g) in &out.grads {
        apply(l, g)?;
    }
    Ok(out.loss)
}

/// Trains `model` in place. `validation` (if any) is evaluated at the end of
/// every epoch and along the learning curve, with bias removal as configured.
pub fn train(
    dataset: &SparseDataset,
    cfg: &TrainConfig,
    model: &mut LinearClassifier,
    noise: Option<&NoiseModel>,
    validation: Option<&SparseDataset>,
) -> Result<TrainReport> {
    cfg.validate(noise)?;
    if dataset.num_features() != model.num_features() || dataset.num_labels() != model.num_labels() {
        return Err(Error::invalid(format!(
            "dataset is {}×{} (features×labels) but model is {}×{}",
            dataset.num_features(),
            dataset.num_labels(),
            model.num_features(),
            model.num_labels()
        )));
    }
    if let Some(n) = noise {
        if n.num_labels() != model.num_labels() {
            return Err(Error::Dimension {
                expected: model.num_labels(),
                got: n.num_labels(),
            });
        }
        if let Some(k) = n.input_dim() {
            if k != model.num_features() {
                return Err(Error::Dimension {
                    expected: model.num_features(),
                    got: k,
                });
            }
        }
    }
    if cfg.method == Method::SoftmaxFull && model.num_labels() > SOFTMAX_LABEL_WARNING {
        warn!("full softmax over {} labels; each step is O(C)", model.num_labels());
    }
    let validator = Validator {
        data: validation,
        noise: if cfg.bias_removal_at_eval { noise } else { None },
        cfg: PredictionConfig {
            bias_removal: cfg.bias_removal_at_eval,
            top_k: 1,
        },
    };
    if cfg.threads > 1 {
        train_lock_free(dataset, cfg, model, noise, &validator)
    } else {
        train_sequential(dataset, cfg, model, noise, &validator)
    }
}

fn train_sequential(
    dataset: &SparseDataset,
    cfg: &TrainConfig,
    model: &mut LinearClassifier,
    noise: Option<&NoiseModel>,
    validator: &Validator<'_>,
) -> Result<TrainReport> {
    let opt = cfg.optimizer();
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut negatives = Vec::with_capacity(cfg.negatives_per_positive);
    let mut pending: Vec<(usize, f64)> = Vec::new();
    let num_labels = model.num_labels();
    let mut steps: u64 = 0;
    let curve_on = cfg.log_every_steps > 0 && validator.data.is_some();
    if curve_on && cfg.epochs > 0 {
        push_curve(&mut report, validator, model, 0, &start)?;
    }
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let ex = &dataset.examples()[i];
            // all scores of a step are read before any of its updates
            let snapshot: &LinearClassifier = model;
            let score = |l: usize| snapshot.score_unchecked(&ex.features, l);
            pending.clear();
            let loss = step(cfg, num_labels, noise, ex, &mut sample_rng, &mut negatives, score, |l, g| {
                pending.push((l, g));
                Ok(())
            })
            .map_err(|e| annotate(e, epoch, steps, i))?;
            for &(l, g) in &pending {
                model.apply_score_gradient(l, &ex.features, g, &opt)?;
            }
            loss_sum += loss;
            steps += 1;
            if curve_on && steps % cfg.log_every_steps == 0 {
                push_curve(&mut report, validator, model, steps, &start)?;
            }
        }
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("model parameters after epoch {epoch}")));
        }
        finish_epoch(&mut report, validator, model, epoch, steps, loss_sum, dataset.len(), &start)?;
    }
    Ok(report)
}

fn annotate(e: Error, epoch: usize, steps: u64, index: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, step {steps}, example {index}: {msg}")),
        other => other,
    }
}

fn push_curve(
    report: &mut TrainReport,
    validator: &Validator<'_>,
    model: &LinearClassifier,
    steps: u64,
    start: &Instant,
) -> Result<()> {
    if let Some((ll, acc)) = validator.run(model)? {
        report.curve.push(CurvePoint {
            steps,
            wall_clock_s: start.elapsed().as_secs_f64(),
            val_log_lik: ll,
            val_acc: acc,
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    report: &mut TrainReport,
    validator: &Validator<'_>,
    model: &LinearClassifier,
    epoch: usize,
    steps: u64,
    loss_sum: f64,
    n: usize,
    start: &Instant,
) -> Result<()> {
    let val = validator.run(model)?;
    let m = EpochMetrics {
        epoch,
        steps,
        wall_clock_s: start.elapsed().as_secs_f64(),
        train_loss: loss_sum / n.max(1) as f64,
        val_log_lik: val.map(|v| v.0),
        val_acc: val.map(|v| v.1),
    };
    info!(
        "epoch {epoch}: loss {:.6}, val acc {}, {:.2}s",
        m.train_loss,
        m.val_acc.map_or("-".to_string(), |a| format!("{a:.4}")),
        m.wall_clock_s
    );
    report.epochs.push(m);
    Ok(())
}

/// Workers take disjoint shards of each epoch's shuffled order and update
/// shared parameters without locks. Not reproducible across runs.
fn train_lock_free(
    dataset: &SparseDataset,
    cfg: &TrainConfig,
    model: &mut LinearClassifier,
    noise: Option<&NoiseModel>,
    validator: &Validator<'_>,
) -> Result<TrainReport> {
    let opt = cfg.optimizer();
    let start = Instant::now();
    let mut report = TrainReport::default();
    let shared = SharedClassifier::new(model);
    let num_labels = model.num_labels();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut steps: u64 = 0;
    if validator.data.is_some() && cfg.log_every_steps > 0 && cfg.epochs > 0 {
        push_curve(&mut report, validator, model, 0, &start)?;
    }
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let shard = order.len().div_ceil(cfg.threads);
        let loss_bits = AtomicU64::new(0f64.to_bits());
        let results: Vec<Result<()>> = std::thread::scope(|s| {
            let handles: Vec<_> = order
                .chunks(shard.max(1))
                .enumerate()
                .map(|(w, chunk)| {
                    let shared = &shared;
                    let loss_bits = &loss_bits;
                    s.spawn(move || -> Result<()> {
                        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                        rng.set_stream(1 + (epoch as u64) * cfg.threads as u64 + w as u64);
                        let mut negatives = Vec::with_capacity(cfg.negatives_per_positive);
                        let mut local = 0.0;
                        for &i in chunk {
                            let ex = &dataset.examples()[i];
                            let mut pending: Vec<(usize, f64)> = Vec::new();
                            local += step(cfg, num_labels, noise, ex, &mut rng, &mut negatives, |l| shared.score(&ex.features, l), |l, g| {
                                pending.push((l, g));
                                Ok(())
                            })
                            .map_err(|e| annotate(e, epoch, 0, i))?;
                            for (l, g) in pending {
                                shared.apply_score_gradient(l, &ex.features, g, &opt);
                            }
                        }
                        let mut cur = loss_bits.load(Ordering::Relaxed);
                        loop {
                            let next = (f64::from_bits(cur) + local).to_bits();
                            match loss_bits.compare_exchange(cur, next, Ordering::AcqRel, Ordering::Relaxed) {
                                Ok(_) => break,
                                Err(v) => cur = v,
                            }
                        }
                        Ok(())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
        });
        for r in results {
            r?;
        }
        steps += order.len() as u64;
        *model = shared.snapshot();
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("model parameters after epoch {epoch}")));
        }
        if validator.data.is_some() && cfg.log_every_steps > 0 {
            push_curve(&mut report, validator, model, steps, &start)?;
        }
        let loss_sum = f64::from_bits(loss_bits.load(Ordering::Acquire));
        finish_epoch(&mut report, validator, model, epoch, steps, loss_sum, dataset.len(), &start)?;
    }
    Ok(report)
}
