//! Noise distributions `p_n(y|x)` for negative sampling: uniform, empirical
//! label frequency, and the adversarial label tree.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::aux_tree::AuxiliaryTree;
use crate::data_io::{PcaProjection, SparseDataset, SparseVector};
use crate::error::{Error, Result};

/// Log-probability reported for a label with zero unsmoothed frequency,
/// about the log of the smallest positive double.
pub const LOG_PROB_FLOOR: f64 = -745.0;
pub const DEFAULT_SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct FrequencyNoise {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    smoothing: f64,
    sampler: WeightedIndex<f64>,
}

impl FrequencyNoise {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }
}

#[derive(Debug, Clone)]
pub struct AdversarialNoise {
    tree: AuxiliaryTree,
    pca: PcaProjection,
}

impl AdversarialNoise {
    pub fn tree(&self) -> &AuxiliaryTree {
        &self.tree
    }

    pub fn pca(&self) -> &PcaProjection {
        &self.pca
    }
}

#[derive(Debug, Clone)]
pub enum NoiseModel {
    Uniform { num_labels: usize },
    Frequency(FrequencyNoise),
    Adversarial(AdversarialNoise),
}

impl NoiseModel {
    pub fn uniform(num_labels: usize) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::invalid("uniform noise over zero labels"));
        }
        Ok(NoiseModel::Uniform { num_labels })
    }

    /// `p(y) = (count_y + s) / (N + sC)`.
    pub fn frequency_from_counts(counts: &[u64], smoothing: f64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("frequency noise over zero labels"));
        }
        if !(smoothing >= 0.0 && smoothing.is_finite()) {
            return Err(Error::invalid(format!("smoothing {smoothing} must be nonnegative")));
        }
        let total: f64 = counts.iter().map(|&c| c as f64).sum::<f64>() + smoothing * counts.len() as f64;
        if !(total > 0.0) {
            return Err(Error::EmptyDataset("no label counts and no smoothing".into()));
        }
        let probs: Vec<f64> = counts.iter().map(|&c| (c as f64 + smoothing) / total).collect();
        let log_probs = counts
            .iter()
            .map(|&c| {
                let w = c as f64 + smoothing;
                if w > 0.0 {
                    w.ln() - total.ln()
                } else {
                    LOG_PROB_FLOOR
                }
            })
            .collect();
        let sampler = WeightedIndex::new(&probs).map_err(|e| Error::Numeric(format!("frequency table: {e}")))?;
        Ok(NoiseModel::Frequency(FrequencyNoise {
            probs,
            log_probs,
            smoothing,
            sampler,
        }))
    }

    pub fn frequency(dataset: &SparseDataset, smoothing: f64) -> Result<Self> {
        Self::frequency_from_counts(dataset.label_counts(), smoothing)
    }

    pub fn adversarial(tree: AuxiliaryTree, pca: PcaProjection) -> Result<Self> {
        if tree.reduced_dim() != pca.k() {
            return Err(Error::Dimension {
                expected: tree.reduced_dim(),
                got: pca.k(),
            });
        }
        Ok(NoiseModel::Adversarial(AdversarialNoise { tree, pca }))
    }

    pub fn num_labels(&self) -> usize {
        match self {
            NoiseModel::Uniform { num_labels } => *num_labels,
            NoiseModel::Frequency(f) => f.probs.len(),
            NoiseModel::Adversarial(a) => a.tree.num_labels(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseModel::Uniform { .. } => "uniform",
            NoiseModel::Frequency(_) => "frequency",
            NoiseModel::Adversarial(_) => "adversarial",
        }
    }

    /// True when `log p_n(y|x)` is constant in `y`, so adding it never
    /// changes a ranking.
    pub fn is_constant(&self) -> bool {
        matches!(self, NoiseModel::Uniform { .. })
    }

    /// Expected input dimension for conditional models.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            NoiseModel::Adversarial(a) => Some(a.pca.input_dim()),
            _ => None,
        }
    }

    /// Fixes the context `x`; for the adversarial model this does the PCA
    /// projection once so that several draws and lookups can share it.
    pub fn condition(&self, x: &SparseVector) -> Result<NoiseContext<'_>> {
        match self {
            NoiseModel::Adversarial(a) => Ok(NoiseContext {
                model: self,
                reduced: a.pca.apply(x)?,
            }),
            _ => Ok(NoiseContext {
                model: self,
                reduced: Vec::new(),
            }),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &SparseVector, rng: &mut R) -> Result<usize> {
        self.condition(x)?.sample(rng)
    }

    pub fn log_prob(&self, x: &SparseVector, y: usize) -> Result<f64> {
        self.condition(x)?.log_prob(y)
    }

    pub fn log_probs(&self, x: &SparseVector) -> Result<Vec<f64>> {
        self.condition(x)?.log_probs()
    }
}

/// A noise model with its context bound.
#[derive(Debug, Clone)]
pub struct NoiseContext<'a> {
    model: &'a NoiseModel,
    reduced: Vec<f64>,
}

impl NoiseContext<'_> {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        match self.model {
            NoiseModel::Uniform { num_labels } => Ok(rng.gen_range(0..*num_labels)),
            NoiseModel::Frequency(f) => Ok(f.sampler.sample(rng)),
            NoiseModel::Adversarial(a) => a.tree.sample(&self.reduced, rng),
        }
    }

    pub fn log_prob(&self, y: usize) -> Result<f64> {
        let c = self.model.num_labels();
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, num_labels: c });
        }
        match self.model {
            NoiseModel::Uniform { num_labels } => Ok(-(*num_labels as f64).ln()),
            NoiseModel::Frequency(f) => Ok(f.log_probs[y]),
            NoiseModel::Adversarial(a) => a.tree.log_prob(&self.reduced, y),
        }
    }

    pub fn log_probs(&self) -> Result<Vec<f64>> {
        match self.model {
            NoiseModel::Uniform { num_labels } => Ok(vec![-(*num_labels as f64).ln(); *num_labels]),
            NoiseModel::Frequency(f) => Ok(f.log_probs.clone()),
            NoiseModel::Adversarial(a) => a.tree.log_probs(&self.reduced),
        }
    }
}
