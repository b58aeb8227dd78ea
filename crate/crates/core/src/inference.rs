//! Bias-corrected prediction and evaluation.
//!
//! A model trained against noise `p_n` learns scores that are off by
//! `log p_n(y|x)` up to a label-independent constant. Adding the noise
//! log-probability back recovers scores that rank (and, after a softmax,
//! normalize) like a full softmax model.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::data_io::{SparseDataset, SparseVector};
use crate::error::{Error, Result};
use crate::linear_model::LinearClassifier;
use crate::math;
use crate::noise::NoiseModel;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionConfig {
    pub bias_removal: bool,
    pub top_k: usize,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            bias_removal: true,
            top_k: 1,
        }
    }
}

/// `ξ_y(x) + log p_n(y|x)`.
pub fn corrected_score(model: &LinearClassifier, noise: &NoiseModel, x: &SparseVector, y: usize) -> Result<f64> {
    let lp = noise.log_prob(x, y)?;
    if !lp.is_finite() {
        return Err(Error::NonFinite(format!("noise log-probability of label {y}")));
    }
    Ok(model.score(x, y)? + lp)
}

/// Scores used for ranking. Without a noise model, or with bias removal off,
/// these are the raw model scores. A noise model whose log-probability does
/// not depend on `y` is skipped too, since it only shifts every score alike.
pub fn ranking_scores(
    model: &LinearClassifier,
    noise: Option<&NoiseModel>,
    x: &SparseVector,
    bias_removal: bool,
) -> Result<Vec<f64>> {
    let mut scores = model.scores(x)?;
    if let Some(noise) = noise.filter(|n| bias_removal && !n.is_constant()) {
        if noise.num_labels() != scores.len() {
            return Err(Error::Dimension {
                expected: scores.len(),
                got: noise.num_labels(),
            });
        }
        for (s, lp) in scores.iter_mut().zip(noise.log_probs(x)?) {
            *s += lp;
        }
    }
    Ok(scores)
}

/// The `k` best labels by descending score, ties by ascending label id.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn check_config(cfg: &PredictionConfig, num_labels: usize) -> Result<()> {
    if cfg.top_k == 0 || cfg.top_k > num_labels {
        return Err(Error::invalid(format!("top_k = {} must be in 1..={num_labels}", cfg.top_k)));
    }
    Ok(())
}

pub fn predict_topk(
    model: &LinearClassifier,
    noise: Option<&NoiseModel>,
    x: &SparseVector,
    cfg: &PredictionConfig,
) -> Result<Vec<usize>> {
    check_config(cfg, model.num_labels())?;
    Ok(top_k(&ranking_scores(model, noise, x, cfg.bias_removal)?, cfg.top_k))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Mean log-softmax of the ranking scores at the true label, in nats.
    pub log_likelihood: f64,
    pub n_points: usize,
    pub wall_clock_s: f64,
}

/// Top-1 accuracy and predictive log-likelihood per point. Points are
/// processed in parallel in fixed-size chunks whose partial sums are added in
/// order, so the result does not depend on the thread count.
pub fn evaluate(
    model: &LinearClassifier,
    noise: Option<&NoiseModel>,
    dataset: &SparseDataset,
    cfg: &PredictionConfig,
) -> Result<EvalReport> {
    let start = Instant::now();
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    check_config(cfg, model.num_labels())?;
    let partials: Vec<Result<(usize, f64)>> = dataset
        .examples()
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let mut correct = 0;
            let mut ll = 0.0;
            for ex in chunk {
                let scores = ranking_scores(model, noise, &ex.features, cfg.bias_removal)?;
                if ex.label >= scores.len() {
                    return Err(Error::LabelOutOfRange {
                        label: ex.label,
                        num_labels: scores.len(),
                    });
                }
                correct += (argmax(&scores) == ex.label) as usize;
                ll += scores[ex.label] - math::log_sum_exp(&scores);
            }
            Ok((correct, ll))
        })
        .collect();
    let mut correct = 0;
    let mut ll = 0.0;
    for p in partials {
        let (c, l) = p?;
        correct += c;
        ll += l;
    }
    let n = dataset.len();
    Ok(EvalReport {
        accuracy: correct as f64 / n as f64,
        log_likelihood: ll / n as f64,
        n_points: n,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::Example;
    use proptest::prelude::*;

    fn onehot(dim: usize, i: usize) -> SparseVector {
        SparseVector::new(dim, vec![(i, 1.0)]).unwrap()
    }

    #[test]
    fn corrected_score_examples() {
        let mut m = LinearClassifier::zeros(3, 2);
        m.set_bias(0, 1.2);
        m.weights_mut(1)[1] = -0.4;
        let noise = NoiseModel::frequency_from_counts(&[1, 9, 4], 0.5).unwrap();
        let x = SparseVector::from_dense(&[0.3, 2.0]);
        for y in 0..3 {
            let expected = m.score(&x, y).unwrap() + noise.log_prob(&x, y).unwrap();
            assert_eq!(corrected_score(&m, &noise, &x, y).unwrap().to_bits(), expected.to_bits());
        }
        assert!((1.2f64 + -2.0 - -0.8).abs() < 1e-15);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(top_k(&[0.1, 0.5, 0.2], 3), vec![1, 2, 0]);
        assert_eq!(top_k(&[0.0; 4], 4), vec![0, 1, 2, 3]);
        assert_eq!(top_k(&[0.1, 0.5, 0.2], 1), vec![1]);
    }

    #[test]
    fn uniform_noise_keeps_raw_ranking() {
        let mut m = LinearClassifier::zeros(3, 2);
        m.weights_mut(2)[0] = 1.0;
        m.set_bias(1, 0.5);
        let noise = NoiseModel::uniform(3).unwrap();
        let x = SparseVector::from_dense(&[0.7, 0.0]);
        let on = PredictionConfig { bias_removal: true, top_k: 3 };
        let off = PredictionConfig { bias_removal: false, top_k: 3 };
        assert_eq!(
            predict_topk(&m, Some(&noise), &x, &on).unwrap(),
            predict_topk(&m, Some(&noise), &x, &off).unwrap()
        );
        assert!(predict_topk(&m, None, &x, &PredictionConfig { bias_removal: true, top_k: 4 }).is_err());
    }

    #[test]
    fn zero_model_uniform_noise() {
        let c = 5;
        let ex: Vec<Example> = (0..10)
            .map(|i| Example {
                features: onehot(3, i % 3),
                label: [0, 1, 0, 4, 2][i % 5],
            })
            .collect();
        let ds = SparseDataset::with_labels(ex, 3, c).unwrap();
        let m = LinearClassifier::zeros(c, 3);
        let noise = NoiseModel::uniform(c).unwrap();
        let r = evaluate(&m, Some(&noise), &ds, &PredictionConfig::default()).unwrap();
        assert!((r.log_likelihood + (c as f64).ln()).abs() < 1e-12);
        // tie-break winner is label 0, which has 4 of 10 points
        assert_eq!(r.accuracy, 0.4);
        let off = evaluate(&m, Some(&noise), &ds, &PredictionConfig { bias_removal: false, top_k: 1 }).unwrap();
        assert_eq!((off.accuracy, off.log_likelihood), (r.accuracy, r.log_likelihood));
    }

    #[test]
    fn perfect_fit_has_full_accuracy() {
        let ex: Vec<Example> = (0..6).map(|i| Example { features: onehot(3, i % 3), label: i % 3 }).collect();
        let ds = SparseDataset::with_labels(ex, 3, 3).unwrap();
        let mut m = LinearClassifier::zeros(3, 3);
        for y in 0..3 {
            m.weights_mut(y)[y] = 10.0;
        }
        let r = evaluate(&m, None, &ds, &PredictionConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.log_likelihood <= 0.0 && r.log_likelihood > -1e-3);
        assert!(evaluate(&m, None, &ds.subset(&[]), &PredictionConfig::default()).is_err());
    }

    #[test]
    fn frequency_correction_changes_ranking() {
        let m = LinearClassifier::zeros(2, 1);
        let noise = NoiseModel::frequency_from_counts(&[1, 9], 0.0).unwrap();
        let x = SparseVector::zeros(1);
        let on = PredictionConfig { bias_removal: true, top_k: 1 };
        assert_eq!(predict_topk(&m, Some(&noise), &x, &on).unwrap(), vec![1]);
        let off = PredictionConfig { bias_removal: false, top_k: 1 };
        assert_eq!(predict_topk(&m, Some(&noise), &x, &off).unwrap(), vec![0]);
    }

    proptest! {
        #[test]
        fn ranking_invariant_under_shift(
            scores in prop::collection::vec(-5.0f64..5.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            // exact shifts can round ties differently only when scores coincide after rounding
            let a = top_k(&scores, scores.len());
            let b = top_k(&shifted, scores.len());
            for w in b.windows(2) {
                prop_assert!(shifted[w[0]] >= shifted[w[1]]);
            }
            let distinct = a.windows(2).all(|w| (scores[w[0]] - scores[w[1]]).abs() > 1e-9);
            if distinct {
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn log_likelihood_nonpositive(
            biases in prop::collection::vec(-3.0f64..3.0, 4),
            labels in prop::collection::vec(0usize..4, 1..10),
        ) {
            let mut m = LinearClassifier::zeros(4, 1);
            for (y, b) in biases.iter().enumerate() {
                m.set_bias(y, *b);
            }
            let ex = labels.iter().map(|&l| Example { features: SparseVector::zeros(1), label: l }).collect();
            let ds = SparseDataset::with_labels(ex, 1, 4).unwrap();
            let r = evaluate(&m, None, &ds, &PredictionConfig::default()).unwrap();
            prop_assert!(r.log_likelihood <= 0.0);
        }
    }
}
