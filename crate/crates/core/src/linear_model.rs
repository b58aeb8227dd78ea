//! Per-label affine scores `ξ_y(x) = xᵀw_y + b_y` trained with sparse Adagrad.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::binio::{self, BinReader, BinWriter};
use crate::data_io::SparseVector;
use crate::error::{Error, Result};

const MODEL_MAGIC: &[u8; 8] = b"ADVNSLM\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Strength of the squared-score regularizer in the training loss.
    pub regularizer: f64,
    pub adagrad_epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            regularizer: 0.0,
            adagrad_epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.regularizer >= 0.0 && self.regularizer.is_finite()) {
            return Err(Error::invalid(format!("regularizer {} must be nonnegative", self.regularizer)));
        }
        if !(self.adagrad_epsilon > 0.0) {
            return Err(Error::invalid("adagrad epsilon must be positive"));
        }
        Ok(())
    }
}

/// Dense per-label weights and biases plus their Adagrad accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    num_labels: usize,
    num_features: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    accum_w: Vec<f64>,
    accum_b: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(num_labels: usize, num_features: usize) -> Self {
        LinearClassifier {
            num_labels,
            num_features,
            weights: vec![0.0; num_labels * num_features],
            biases: vec![0.0; num_labels],
            accum_w: vec![0.0; num_labels * num_features],
            accum_b: vec![0.0; num_labels],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn weights(&self, y: usize) -> &[f64] {
        &self.weights[y * self.num_features..(y + 1) * self.num_features]
    }

    pub fn weights_mut(&mut self, y: usize) -> &mut [f64] {
        &mut self.weights[y * self.num_features..(y + 1) * self.num_features]
    }

    pub fn bias(&self, y: usize) -> f64 {
        self.biases[y]
    }

    pub fn set_bias(&mut self, y: usize, b: f64) {
        self.biases[y] = b;
    }

    pub fn weight_accumulator(&self, y: usize) -> &[f64] {
        &self.accum_w[y * self.num_features..(y + 1) * self.num_features]
    }

    pub fn bias_accumulator(&self, y: usize) -> f64 {
        self.accum_b[y]
    }

    pub fn reset_accumulators(&mut self) {
        self.accum_w.iter_mut().for_each(|a| *a = 0.0);
        self.accum_b.iter_mut().for_each(|a| *a = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|v| v.is_finite())
    }

    fn check(&self, x: &SparseVector, y: usize) -> Result<()> {
        if y >= self.num_labels {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_labels: self.num_labels,
            });
        }
        if x.dim() != self.num_features {
            return Err(Error::Dimension {
                expected: self.num_features,
                got: x.dim(),
            });
        }
        Ok(())
    }

    pub fn score(&self, x: &SparseVector, y: usize) -> Result<f64> {
        self.check(x, y)?;
        Ok(self.score_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn score_unchecked(&self, x: &SparseVector, y: usize) -> f64 {
        x.dot_dense(self.weights(y)) + self.biases[y]
    }

    /// Scores for every label, `O(C · nnz(x))`.
    pub fn scores(&self, x: &SparseVector) -> Result<Vec<f64>> {
        self.check(x, 0)?;
        Ok((0..self.num_labels).map(|y| self.score_unchecked(x, y)).collect())
    }

    /// One Adagrad step on the parameters of label `y`. Only coordinates in
    /// the support of `grad_w` are touched.
    pub fn adagrad_update(
        &mut self,
        y: usize,
        grad_w: &SparseVector,
        grad_b: f64,
        cfg: &OptimizerConfig,
    ) -> Result<()> {
        self.check(grad_w, y)?;
        if !grad_b.is_finite() || grad_w.values().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient for label {y}")));
        }
        let rho = cfg.learning_rate;
        let eps = cfg.adagrad_epsilon;
        let base = y * self.num_features;
        for (i, g) in grad_w.iter() {
            adagrad_coord(&mut self.weights[base + i], &mut self.accum_w[base + i], g, rho, eps);
        }
        adagrad_coord(&mut self.biases[y], &mut self.accum_b[y], grad_b, rho, eps);
        Ok(())
    }

    /// Adagrad step for a loss whose derivative with respect to the score
    /// `ξ_y(x)` is `dscore`; equivalent to `adagrad_update(y, dscore·x, dscore)`
    /// without materializing the gradient.
    pub fn apply_score_gradient(
        &mut self,
        y: usize,
        x: &SparseVector,
        dscore: f64,
        cfg: &OptimizerConfig,
    ) -> Result<()> {
        self.check(x, y)?;
        if !dscore.is_finite() {
            return Err(Error::NonFinite(format!("score gradient for label {y}")));
        }
        let rho = cfg.learning_rate;
        let eps = cfg.adagrad_epsilon;
        let base = y * self.num_features;
        for (i, v) in x.iter() {
            adagrad_coord(&mut self.weights[base + i], &mut self.accum_w[base + i], dscore * v, rho, eps);
        }
        adagrad_coord(&mut self.biases[y], &mut self.accum_b[y], dscore, rho, eps);
        Ok(())
    }

    pub fn write<W: Write>(&self, out: W, include_accumulators: bool) -> Result<()> {
        let mut w = BinWriter::new(out, MODEL_MAGIC, FORMAT_VERSION)?;
        w.u64(self.num_labels as u64)?;
        w.u64(self.num_features as u64)?;
        w.u8(include_accumulators as u8)?;
        w.f64s(&self.weights)?;
        w.f64s(&self.biases)?;
        if include_accumulators {
            w.f64s(&self.accum_w)?;
            w.f64s(&self.accum_b)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = BinReader::new(input, MODEL_MAGIC, FORMAT_VERSION)?;
        let c = r.usize()?;
        let k = r.usize()?;
        let has_accum = r.u8()? != 0;
        let size = c
            .checked_mul(k)
            .ok_or_else(|| Error::Format("model size overflows".into()))?;
        let weights = r.f64s(size)?;
        let biases = r.f64s(c)?;
        let (accum_w, accum_b) = if has_accum {
            (r.f64s(size)?, r.f64s(c)?)
        } else {
            (vec![0.0; size], vec![0.0; c])
        };
        Ok(LinearClassifier {
            num_labels: c,
            num_features: k,
            weights,
            biases,
            accum_w,
            accum_b,
        })
    }

    pub fn save(&self, path: &Path, include_accumulators: bool) -> Result<()> {
        self.write(binio::create(path)?, include_accumulators)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(binio::open(path)?)
    }
}

#[inline]
fn adagrad_coord(param: &mut f64, accum: &mut f64, g: f64, rho: f64, eps: f64) {
    *accum += g * g;
    *param -= rho * g / (accum.sqrt() + eps);
}

/// Parameters shared between training threads without locking.
///
/// Loads and stores are individually atomic (relaxed), but read-modify-write
/// sequences from different threads may interleave and lose updates. That is
/// the usual lock-free SGD contract; results are not reproducible.
pub struct SharedClassifier {
    num_labels: usize,
    num_features: usize,
    weights: Vec<AtomicU64>,
    biases: Vec<AtomicU64>,
    accum_w: Vec<AtomicU64>,
    accum_b: Vec<AtomicU64>,
}

fn to_atomic(v: &[f64]) -> Vec<AtomicU64> {
    v.iter().map(|x| AtomicU64::new(x.to_bits())).collect()
}

fn from_atomic(v: &[AtomicU64]) -> Vec<f64> {
    v.iter().map(|x| f64::from_bits(x.load(Ordering::Relaxed))).collect()
}

#[inline]
fn load(a: &AtomicU64) -> f64 {
    f64::from_bits(a.load(Ordering::Relaxed))
}

#[inline]
fn store(a: &AtomicU64, v: f64) {
    a.store(v.to_bits(), Ordering::Relaxed)
}

impl SharedClassifier {
    pub fn new(model: &LinearClassifier) -> Self {
        SharedClassifier {
            num_labels: model.num_labels,
            num_features: model.num_features,
            weights: to_atomic(&model.weights),
            biases: to_atomic(&model.biases),
            accum_w: to_atomic(&model.accum_w),
            accum_b: to_atomic(&model.accum_b),
        }
    }

    pub fn snapshot(&self) -> LinearClassifier {
        LinearClassifier {
            num_labels: self.num_labels,
            num_features: self.num_features,
            weights: from_atomic(&self.weights),
            biases: from_atomic(&self.biases),
            accum_w: from_atomic(&self.accum_w),
            accum_b: from_atomic(&self.accum_b),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn score(&self, x: &SparseVector, y: usize) -> f64 {
        let base = y * self.num_features;
        x.iter().map(|(i, v)| v * load(&self.weights[base + i])).sum::<f64>() + load(&self.biases[y])
    }

    pub fn apply_score_gradient(&self, y: usize, x: &SparseVector, dscore: f64, cfg: &OptimizerConfig) {
        let rho = cfg.learning_rate;
        let eps = cfg.adagrad_epsilon;
        let base = y * self.num_features;
        let step = |p: &AtomicU64, a: &AtomicU64, g: f64| {
            let acc = load(a) + g * g;
            store(a, acc);
            store(p, load(p) - rho * g / (acc.sqrt() + eps));
        };
        for (i, v) in x.iter() {
            step(&self.weights[base + i], &self.accum_w[base + i], dscore * v);
        }
        step(&self.biases[y], &self.accum_b[y], dscore);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(rho: f64) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: rho,
            regularizer: 0.0,
            adagrad_epsilon: 1e-8,
        }
    }

    #[test]
    fn score_examples() {
        let mut m = LinearClassifier::zeros(2, 4);
        m.set_bias(1, 0.3);
        let x = SparseVector::new(4, vec![(0, 1.0), (3, -2.0)]).unwrap();
        assert_eq!(m.score(&x, 1).unwrap(), 0.3);

        m.weights_mut(0)[2] = 1.5;
        let e2 = SparseVector::new(4, vec![(2, 1.0)]).unwrap();
        assert_eq!(m.score(&e2, 0).unwrap(), 1.5);

        assert!(matches!(m.score(&x, 2), Err(Error::LabelOutOfRange { .. })));
        assert!(matches!(m.score(&SparseVector::zeros(3), 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn score_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = LinearClassifier::zeros(3, 20);
        for y in 0..3 {
            for w in m.weights_mut(y) {
                *w = rng.gen::<f64>() * 2.0 - 1.0;
            }
            m.set_bias(y, rng.gen());
        }
        let entries: Vec<(usize, f64)> = (0..20).filter(|i| i % 3 == 1).map(|i| (i, rng.gen())).collect();
        let x = SparseVector::new(20, entries).unwrap();
        let dense = x.to_dense();
        for y in 0..3 {
            let oracle: f64 = dense.iter().zip(m.weights(y)).map(|(a, b)| a * b).sum::<f64>() + m.bias(y);
            assert!((m.score(&x, y).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn first_adagrad_step() {
        let mut m = LinearClassifier::zeros(1, 2);
        let g = SparseVector::new(2, vec![(0, 4.0)]).unwrap();
        m.adagrad_update(0, &g, 0.0, &cfg(0.1)).unwrap();
        assert!((m.weights(0)[0] - (-0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(m.weight_accumulator(0)[0], 16.0);
        // untouched coordinate and zero-gradient bias
        assert_eq!(m.weights(0)[1], 0.0);
        assert_eq!(m.weight_accumulator(0)[1], 0.0);
        assert_eq!(m.bias(0), 0.0);
        assert_eq!(m.bias_accumulator(0), 0.0);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut m = LinearClassifier::zeros(1, 2);
        let before = m.clone();
        let g = SparseVector::new(2, vec![(0, 0.0), (1, 0.0)]).unwrap();
        m.adagrad_update(0, &g, 0.0, &cfg(0.1)).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn second_step_shrinks_by_sqrt_two() {
        let mut m = LinearClassifier::zeros(1, 1);
        let g = SparseVector::new(1, vec![(0, 1.0)]).unwrap();
        m.adagrad_update(0, &g, 0.0, &cfg(0.5)).unwrap();
        let w1 = m.weights(0)[0];
        m.adagrad_update(0, &g, 0.0, &cfg(0.5)).unwrap();
        let step2 = w1 - m.weights(0)[0];
        // accumulator recursion: a₁ = 1, a₂ = 2 → step = ρ/√2
        assert!((step2 - 0.5 / (2f64.sqrt() + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut m = LinearClassifier::zeros(1, 1);
        let g = SparseVector::new(1, vec![(0, f64::NAN)]).unwrap();
        assert!(matches!(m.adagrad_update(0, &g, 0.0, &cfg(0.1)), Err(Error::NonFinite(_))));
        let x = SparseVector::new(1, vec![(0, 1.0)]).unwrap();
        assert!(m.apply_score_gradient(0, &x, f64::INFINITY, &cfg(0.1)).is_err());
    }

    #[test]
    fn score_gradient_matches_explicit_update() {
        let x = SparseVector::new(5, vec![(1, 0.5), (4, -2.0)]).unwrap();
        let mut a = LinearClassifier::zeros(2, 5);
        let mut b = a.clone();
        for d in [0.3, -1.2, 0.7] {
            a.apply_score_gradient(1, &x, d, &cfg(0.2)).unwrap();
            b.adagrad_update(1, &x.scaled(d), d, &cfg(0.2)).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn serialization_with_and_without_accumulators() {
        let mut m = LinearClassifier::zeros(2, 3);
        let x = SparseVector::new(3, vec![(0, 1.0), (2, 0.5)]).unwrap();
        m.apply_score_gradient(1, &x, 0.8, &cfg(0.1)).unwrap();

        let mut buf = Vec::new();
        m.write(&mut buf, true).unwrap();
        assert_eq!(LinearClassifier::read(&buf[..]).unwrap(), m);

        let mut buf = Vec::new();
        m.write(&mut buf, false).unwrap();
        let back = LinearClassifier::read(&buf[..]).unwrap();
        assert_eq!(back.weights(1), m.weights(1));
        assert_eq!(back.bias_accumulator(1), 0.0);
    }

    #[test]
    fn shared_classifier_single_thread_matches() {
        let x = SparseVector::new(3, vec![(0, 1.0), (2, -0.5)]).unwrap();
        let mut m = LinearClassifier::zeros(2, 3);
        let shared = SharedClassifier::new(&m);
        for d in [0.4, -0.1] {
            m.apply_score_gradient(0, &x, d, &cfg(0.3)).unwrap();
            shared.apply_score_gradient(0, &x, d, &cfg(0.3));
        }
        assert_eq!(shared.snapshot(), m);
        assert_eq!(shared.score(&x, 0), m.score(&x, 0).unwrap());
    }

    proptest! {
        #[test]
        fn score_is_linear_without_bias(
            w in prop::collection::vec(-3.0f64..3.0, 6),
            a in prop::collection::vec(-3.0f64..3.0, 6),
            b in prop::collection::vec(-3.0f64..3.0, 6),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let mut m = LinearClassifier::zeros(1, 6);
            m.weights_mut(0).copy_from_slice(&w);
            let xa = SparseVector::from_dense(&a);
            let xb = SparseVector::from_dense(&b);
            let mix: Vec<f64> = a.iter().zip(&b).map(|(p, q)| alpha * p + beta * q).collect();
            let lhs = m.score(&SparseVector::from_dense(&mix), 0).unwrap();
            let rhs = alpha * m.score(&xa, 0).unwrap() + beta * m.score(&xb, 0).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn first_touch_step_bounded_by_learning_rate(g in -1e6f64..1e6, rho in 1e-4f64..1.0) {
            let mut m = LinearClassifier::zeros(1, 1);
            let grad = SparseVector::new(1, vec![(0, g)]).unwrap();
            m.adagrad_update(0, &grad, g, &cfg(rho)).unwrap();
            prop_assert!(m.weights(0)[0].abs() <= rho * (1.0 + 1e-12));
            prop_assert!(m.bias(0).abs() <= rho * (1.0 + 1e-12));
        }

        #[test]
        fn accumulators_nondecreasing(gs in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let mut m = LinearClassifier::zeros(1, 1);
            let x = SparseVector::new(1, vec![(0, 1.0)]).unwrap();
            let mut prev = 0.0;
            for g in gs {
                m.apply_score_gradient(0, &x, g, &cfg(0.1)).unwrap();
                prop_assert!(m.weight_accumulator(0)[0] >= prev);
                prev = m.weight_accumulator(0)[0];
            }
        }
    }
}
