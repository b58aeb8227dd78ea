//! Loading, label reduction, splitting, caching, and PCA projection of
//! sparse datasets.
//!
//! Input text follows the Extreme Classification Repository layout: an
//! optional `N K C` header line, then one example per line,
//!
//! ```text
//! 12,4 0:0.5 7:1.25
//! 3 2:1.0
//! ```
//!
//! where the comma-separated label list may be empty and feature indices must
//! be strictly increasing.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{self, BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::math::{self, PowerIterationConfig};

const DATASET_MAGIC: &[u8; 8] = b"ADVNSDS\0";
const PCA_MAGIC: &[u8; 8] = b"ADVNSPCA";
const FORMAT_VERSION: u32 = 1;

/// A sparse feature vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVector {
    pub fn new(dim: usize, entries: Vec<(usize, f64)>) -> Result<Self> {
        let (indices, values): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        Self::from_parts(dim, indices, values)
    }

    pub fn from_parts(dim: usize, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::invalid("index and value arrays differ in length"));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid(format!(
                    "feature indices not strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: last + 1,
                });
            }
        }
        Ok(SparseVector {
            dim,
            indices,
            values,
        })
    }

    /// Stores every coordinate, zeros included.
    pub fn from_dense(values: &[f64]) -> Self {
        SparseVector {
            dim: values.len(),
            indices: (0..values.len()).collect(),
            values: values.to_vec(),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        SparseVector {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    /// Dot product with a dense vector of length `dim`.
    #[inline]
    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        debug_assert_eq!(dense.len(), self.dim);
        self.iter().map(|(i, v)| v * dense[i]).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> SparseVector {
        SparseVector {
            dim: self.dim,
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawExample {
    pub labels: Vec<u64>,
    pub features: SparseVector,
}

/// A multi-label dataset as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub examples: Vec<RawExample>,
    pub num_features: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Feature indices in the file start at 1.
    pub one_based_features: bool,
    /// Label ids in the file start at 1.
    pub one_based_labels: bool,
    /// Overrides both the header and the inferred feature dimension.
    pub num_features: Option<usize>,
}

pub fn load_svmlight(path: &Path, opts: LoadOptions) -> Result<RawDataset> {
    let file = binio::open(path)?;
    parse_svmlight(file, opts)
}

pub fn parse_svmlight<R: BufRead>(reader: R, opts: LoadOptions) -> Result<RawDataset> {
    let mut examples = Vec::new();
    let mut header: Option<(usize, usize, usize)> = None;
    let mut max_index: Option<usize> = None;
    let mut seen_data = false;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        if content.trim().is_empty() {
            continue;
        }
        if !seen_data && header.is_none() {
            if let Some(h) = parse_header(content) {
                header = Some(h);
                continue;
            }
        }
        seen_data = true;
        let ex = parse_line(content, lineno, opts)?;
        if let Some(&last) = ex.1.last() {
            max_index = Some(max_index.map_or(last, |m: usize| m.max(last)));
        }
        examples.push(ex);
    }

    let num_features = match (opts.num_features, header) {
        (Some(k), _) => k,
        (None, Some((_, k, _))) => k,
        (None, None) => max_index.map_or(0, |m| m + 1),
    };
    if let Some((n, _, _)) = header {
        if n != examples.len() {
            warn!("header declares {n} examples, found {}", examples.len());
        }
    }

    let examples = examples
        .into_iter()
        .map(|(labels, indices, values, lineno)| {
            SparseVector::from_parts(num_features, indices, values)
                .map(|features| RawExample { labels, features })
                .map_err(|e| Error::Parse {
                    line: lineno,
                    msg: e.to_string(),
                })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(RawDataset {
        examples,
        num_features,
    })
}

fn parse_header(content: &str) -> Option<(usize, usize, usize)> {
    let toks: Vec<&str> = content.split_whitespace().collect();
    if toks.len() != 3 || toks.iter().any(|t| t.contains(':') || t.contains(',')) {
        return None;
    }
    let n = toks[0].parse().ok()?;
    let k = toks[1].parse().ok()?;
    let c = toks[2].parse().ok()?;
    Some((n, k, c))
}

type ParsedLine = (Vec<u64>, Vec<usize>, Vec<f64>, usize);

fn parse_line(content: &str, lineno: usize, opts: LoadOptions) -> Result<ParsedLine> {
    let err = |msg: String| Error::Parse { line: lineno, msg };
    let mut toks = content.split_whitespace().peekable();

    let mut labels = Vec::new();
    if let Some(first) = toks.peek() {
        if !first.contains(':') {
            for lab in first.split(',').filter(|s| !s.is_empty()) {
                let id: u64 = lab
                    .parse()
                    .map_err(|_| err(format!("invalid label {lab:?}")))?;
                let id = if opts.one_based_labels {
                    id.checked_sub(1)
                        .ok_or_else(|| err("label 0 in a 1-based file".into()))?
                } else {
                    id
                };
                labels.push(id);
            }
            toks.next();
        }
    }

    let mut indices = Vec::new();
    let mut values = Vec::new();
    for tok in toks {
        let (i, v) = tok
            .split_once(':')
            .ok_or_else(|| err(format!("expected index:value, got {tok:?}")))?;
        let idx: usize = i.parse().map_err(|_| err(format!("invalid index {i:?}")))?;
        let idx = if opts.one_based_features {
            idx.checked_sub(1)
                .ok_or_else(|| err("feature index 0 in a 1-based file".into()))?
        } else {
            idx
        };
        let val: f64 = v.parse().map_err(|_| err(format!("invalid value {v:?}")))?;
        if !val.is_finite() {
            return Err(err(format!("non-finite feature value {v:?}")));
        }
        if let Some(&prev) = indices.last() {
            if idx <= prev {
                return Err(err(format!("feature indices not increasing ({prev} then {idx})")));
            }
        }
        if let Some(k) = opts.num_features {
            if idx >= k {
                return Err(err(format!("feature index {idx} >= num_features {k}")));
            }
        }
        indices.push(idx);
        values.push(val);
    }
    Ok((labels, indices, values, lineno))
}

/// Writes `raw` in the same text format [`parse_svmlight`] reads (0-based,
/// with an `N K C` header).
pub fn write_svmlight<W: Write>(raw: &RawDataset, mut out: W) -> Result<()> {
    let num_labels = raw
        .examples
        .iter()
        .flat_map(|e| e.labels.iter())
        .max()
        .map_or(0, |&m| m + 1);
    writeln!(out, "{} {} {}", raw.examples.len(), raw.num_features, num_labels)?;
    for ex in &raw.examples {
        let labels: Vec<String> = ex.labels.iter().map(|l| l.to_string()).collect();
        write!(out, "{}", labels.join(","))?;
        for (i, v) in ex.features.iter() {
            write!(out, " {i}:{v:?}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelPolicy {
    /// Keep the smallest label id of each example.
    #[default]
    SmallestId,
    /// Keep the label listed first in the file.
    FirstListed,
}

impl std::str::FromStr for LabelPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smallest_id" => Ok(LabelPolicy::SmallestId),
            "first_listed" => Ok(LabelPolicy::FirstListed),
            _ => Err(Error::invalid(format!(
                "unknown label policy {s:?} (expected smallest_id or first_listed)"
            ))),
        }
    }
}

impl std::fmt::Display for LabelPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelPolicy::SmallestId => "smallest_id",
            LabelPolicy::FirstListed => "first_listed",
        })
    }
}

impl LabelPolicy {
    pub fn select(self, labels: &[u64]) -> Option<u64> {
        match self {
            LabelPolicy::SmallestId => labels.iter().copied().min(),
            LabelPolicy::FirstListed => labels.first().copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: SparseVector,
    pub label: usize,
}

/// Single-label dataset with dense label ids `0..num_labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    examples: Vec<Example>,
    num_features: usize,
    label_counts: Vec<u64>,
    /// Original (file) id of every dense label.
    label_ids: Vec<u64>,
}

impl SparseDataset {
    pub fn new(examples: Vec<Example>, num_features: usize, label_ids: Vec<u64>) -> Result<Self> {
        if num_features == 0 {
            return Err(Error::invalid("num_features must be positive"));
        }
        if label_ids.is_empty() {
            return Err(Error::invalid("num_labels must be positive"));
        }
        let num_labels = label_ids.len();
        let mut label_counts = vec![0u64; num_labels];
        for ex in &examples {
            if ex.label >= num_labels {
                return Err(Error::LabelOutOfRange {
                    label: ex.label,
                    num_labels,
                });
            }
            if ex.features.dim() != num_features {
                return Err(Error::Dimension {
                    expected: num_features,
                    got: ex.features.dim(),
                });
            }
            label_counts[ex.label] += 1;
        }
        Ok(SparseDataset {
            examples,
            num_features,
            label_counts,
            label_ids,
        })
    }

    /// Dataset whose label ids are simply `0..num_labels`.
    pub fn with_labels(examples: Vec<Example>, num_features: usize, num_labels: usize) -> Result<Self> {
        Self::new(examples, num_features, (0..num_labels as u64).collect())
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_labels(&self) -> usize {
        self.label_ids.len()
    }

    pub fn label_counts(&self) -> &[u64] {
        &self.label_counts
    }

    pub fn label_ids(&self) -> &[u64] {
        &self.label_ids
    }

    pub fn subset(&self, indices: &[usize]) -> SparseDataset {
        let examples: Vec<Example> = indices.iter().map(|&i| self.examples[i].clone()).collect();
        let mut label_counts = vec![0u64; self.num_labels()];
        for ex in &examples {
            label_counts[ex.label] += 1;
        }
        SparseDataset {
            examples,
            num_features: self.num_features,
            label_counts,
            label_ids: self.label_ids.clone(),
        }
    }

    /// Seeded random split into `(train, validation)`. Both sides keep the
    /// full label space and the original example order.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> Result<(SparseDataset, SparseDataset)> {
        if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "validation fraction {validation_fraction} not in (0, 1)"
            )));
        }
        let n = self.len();
        let n_val = (n as f64 * validation_fraction).round() as usize;
        if n_val == 0 || n_val >= n {
            return Err(Error::invalid(format!(
                "validation fraction {validation_fraction} on {n} examples leaves one side empty"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut val_idx = order[..n_val].to_vec();
        let mut train_idx = order[n_val..].to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        Ok((self.subset(&train_idx), self.subset(&val_idx)))
    }

    /// Replaces every feature vector by its dense PCA projection.
    pub fn project(&self, pca: &PcaProjection) -> Result<SparseDataset> {
        let examples = self
            .examples
            .iter()
            .map(|ex| {
                pca.apply(&ex.features).map(|z| Example {
                    features: SparseVector::from_dense(&z),
                    label: ex.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SparseDataset {
            examples,
            num_features: pca.k(),
            label_counts: self.label_counts.clone(),
            label_ids: self.label_ids.clone(),
        })
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BinWriter::new(out, DATASET_MAGIC, FORMAT_VERSION)?;
        w.u64(self.len() as u64)?;
        w.u64(self.num_features as u64)?;
        w.u64(self.num_labels() as u64)?;
        for &id in &self.label_ids {
            w.u64(id)?;
        }
        for ex in &self.examples {
            w.u64(ex.label as u64)?;
            w.u64(ex.features.nnz() as u64)?;
            for (i, v) in ex.features.iter() {
                w.u64(i as u64)?;
                w.f64(v)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = BinReader::new(input, DATASET_MAGIC, FORMAT_VERSION)?;
        let n = r.usize()?;
        let k = r.usize()?;
        let c = r.usize()?;
        let label_ids = (0..c).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let mut examples = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let label = r.usize()?;
            let nnz = r.usize()?;
            let mut indices = Vec::with_capacity(nnz.min(k));
            let mut values = Vec::with_capacity(nnz.min(k));
            for _ in 0..nnz {
                indices.push(r.usize()?);
                values.push(r.f64()?);
            }
            let features = SparseVector::from_parts(k, indices, values)
                .map_err(|e| Error::Format(e.to_string()))?;
            examples.push(Example { features, label });
        }
        SparseDataset::new(examples, k, label_ids).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(binio::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(binio::open(path)?)
    }
}

/// Reduces a multi-label dataset to one label per example and re-indexes the
/// surviving labels densely in ascending order of their original id.
/// Examples with no labels are dropped.
pub fn reduce_multilabel(raw: &RawDataset, policy: LabelPolicy) -> Result<SparseDataset> {
    if raw.examples.is_empty() {
        return Err(Error::EmptyDataset("input has no examples".into()));
    }
    let selected: Vec<(u64, &SparseVector)> = raw
        .examples
        .iter()
        .filter_map(|ex| policy.select(&ex.labels).map(|l| (l, &ex.features)))
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptyDataset("every example is label-free".into()));
    }
    let mut dense: BTreeMap<u64, usize> = selected.iter().map(|&(l, _)| (l, 0)).collect();
    for (i, v) in dense.values_mut().enumerate() {
        *v = i;
    }
    let label_ids: Vec<u64> = dense.keys().copied().collect();
    let examples = selected
        .into_iter()
        .map(|(l, f)| Example {
            features: f.clone(),
            label: dense[&l],
        })
        .collect();
    SparseDataset::new(examples, raw.num_features, label_ids)
}

/// Like [`reduce_multilabel`] but maps onto an existing label space (e.g. the
/// training set's). Examples whose selected label is not in `label_ids` are
/// dropped; the number dropped is returned alongside.
pub fn reduce_multilabel_onto(
    raw: &RawDataset,
    policy: LabelPolicy,
    label_ids: &[u64],
    num_features: usize,
) -> Result<(SparseDataset, usize)> {
    let index: BTreeMap<u64, usize> = label_ids.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut dropped = 0;
    let mut examples = Vec::new();
    for ex in &raw.examples {
        let Some(l) = policy.select(&ex.labels) else {
            continue;
        };
        match index.get(&l) {
            Some(&dense) => {
                let features = if ex.features.dim() == num_features {
                    ex.features.clone()
                } else if ex.features.indices().last().map_or(true, |&i| i < num_features) {
                    SparseVector::from_parts(num_features, ex.features.indices().to_vec(), ex.features.values().to_vec())?
                } else {
                    return Err(Error::Dimension {
                        expected: num_features,
                        got: ex.features.dim(),
                    });
                };
                examples.push(Example { features, label: dense });
            }
            None => dropped += 1,
        }
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset("no example has a known label".into()));
    }
    Ok((SparseDataset::new(examples, num_features, label_ids.to_vec())?, dropped))
}

/// Linear projection onto the top principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    mean: Vec<f64>,
    components: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    /// `components · mean`, cached so projecting a sparse vector stays sparse.
    mean_proj: Vec<f64>,
    rank_deficient: bool,
}

impl PcaProjection {
    pub fn from_parts(mean: Vec<f64>, components: Vec<Vec<f64>>, eigenvalues: Vec<f64>) -> Result<Self> {
        if components.is_empty() || components.len() != eigenvalues.len() {
            return Err(Error::invalid("need k >= 1 components with matching eigenvalues"));
        }
        if components.iter().any(|c| c.len() != mean.len()) {
            return Err(Error::Dimension {
                expected: mean.len(),
                got: components.iter().map(Vec::len).find(|&l| l != mean.len()).unwrap_or(0),
            });
        }
        let mean_proj = components.iter().map(|c| math::dot(c, &mean)).collect();
        Ok(PcaProjection {
            mean,
            components,
            eigenvalues,
            mean_proj,
            rank_deficient: false,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// Variance captured by each component, nonincreasing.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// True when the data had rank below `k` and some components are an
    /// arbitrary orthonormal completion.
    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    pub fn apply(&self, x: &SparseVector) -> Result<Vec<f64>> {
        if x.dim() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.dim(),
            });
        }
        Ok(self
            .components
            .iter()
            .zip(&self.mean_proj)
            .map(|(c, mp)| x.dot_dense(c) - mp)
            .collect())
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BinWriter::new(out, PCA_MAGIC, FORMAT_VERSION)?;
        w.u64(self.input_dim() as u64)?;
        w.u64(self.k() as u64)?;
        w.u8(self.rank_deficient as u8)?;
        w.f64s(&self.mean)?;
        w.f64s(&self.eigenvalues)?;
        for c in &self.components {
            w.f64s(c)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = BinReader::new(input, PCA_MAGIC, FORMAT_VERSION)?;
        let dim = r.usize()?;
        let k = r.usize()?;
        let rank_deficient = r.u8()? != 0;
        let mean = r.f64s(dim)?;
        let eigenvalues = r.f64s(k)?;
        let components = (0..k).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
        let mut p = PcaProjection::from_parts(mean, components, eigenvalues)?;
        p.rank_deficient = rank_deficient;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(binio::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(binio::open(path)?)
    }
}

const PCA_CHUNK: usize = 2048;

/// Fits the top-`k` principal components of the (population) feature
/// covariance by power iteration with deflation. The covariance is never
/// materialized; each iteration costs one pass over the nonzeros.
pub fn fit_pca(dataset: &SparseDataset, k: usize) -> Result<PcaProjection> {
    let dim = dataset.num_features();
    let n = dataset.len();
    if k == 0 || k > dim {
        return Err(Error::invalid(format!("PCA k = {k} must be in 1..={dim}")));
    }
    if n < k {
        return Err(Error::invalid(format!("PCA needs at least k = {k} examples, got {n}")));
    }
    let examples = dataset.examples();
    let mut mean = vec![0.0; dim];
    for ex in examples {
        for (i, v) in ex.features.iter() {
            mean[i] += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let apply = |v: &[f64], out: &mut [f64]| {
        // Fixed chunking keeps the reduction order independent of thread count.
        let partials: Vec<Vec<f64>> = examples
            .par_chunks(PCA_CHUNK)
            .map(|chunk| {
                let mut acc = vec![0.0; dim];
                for ex in chunk {
                    let p = ex.features.dot_dense(v);
                    for (i, x) in ex.features.iter() {
                        acc[i] += x * p;
                    }
                }
                acc
            })
            .collect();
        out.iter_mut().for_each(|o| *o = 0.0);
        for part in &partials {
            out.iter_mut().zip(part).for_each(|(o, p)| *o += p);
        }
        let mv = math::dot(&mean, v);
        out.iter_mut()
            .zip(&mean)
            .for_each(|(o, m)| *o = *o / n as f64 - m * mv);
    };

    let eig = math::top_eigenpairs(dim, k, PowerIterationConfig::default(), apply);
    if eig.completed > 0 {
        warn!(
            "PCA: data has rank {} < k = {k}; filled {} components with an orthonormal completion",
            k - eig.completed,
            eig.completed
        );
    }
    if eig.unconverged > 0 {
        warn!("PCA: {} components did not reach tolerance", eig.unconverged);
    }
    let mut proj = PcaProjection::from_parts(mean, eig.vectors, eig.values)?;
    proj.rank_deficient = eig.completed > 0;
    Ok(proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::Rng;

    fn parse(text: &str) -> Result<RawDataset> {
        parse_svmlight(text.as_bytes(), LoadOptions::default())
    }

    #[test]
    fn parses_single_and_multi_label_lines() {
        let raw = parse("3 0:0.5 7:1.2\n1,4 2:1.0\n5 \n").unwrap();
        assert_eq!(raw.examples.len(), 3);
        assert_eq!(raw.num_features, 8);
        assert_eq!(raw.examples[0].labels, vec![3]);
        assert_eq!(
            raw.examples[0].features.iter().collect::<Vec<_>>(),
            vec![(0, 0.5), (7, 1.2)]
        );
        assert_eq!(raw.examples[1].labels, vec![1, 4]);
        assert_eq!(raw.examples[1].features.iter().collect::<Vec<_>>(), vec![(2, 1.0)]);
        assert_eq!(raw.examples[2].labels, vec![5]);
        assert_eq!(raw.examples[2].features.nnz(), 0);
    }

    #[test]
    fn header_sets_dimension_and_label_free_lines_parse() {
        let raw = parse("2 10 5\n 1:1.0\n4 3:2.0\n").unwrap();
        assert_eq!(raw.num_features, 10);
        assert!(raw.examples[0].labels.is_empty());
        assert_eq!(raw.examples[1].labels, vec![4]);
    }

    #[test]
    fn one_based_indices() {
        let opts = LoadOptions {
            one_based_features: true,
            one_based_labels: true,
            num_features: None,
        };
        let raw = parse_svmlight("2 1:1.0 3:2.0\n".as_bytes(), opts).unwrap();
        assert_eq!(raw.examples[0].labels, vec![1]);
        assert_eq!(raw.examples[0].features.indices(), &[0, 2]);
        assert!(parse_svmlight("1 0:1.0\n".as_bytes(), opts).is_err());
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        match parse("1 0:1\n2 3:1 1:2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse("1 0:1\n\n2 0:abc\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse("x 0:1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("1 0:1 0:2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("1 7\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn label_policies() {
        assert_eq!(LabelPolicy::SmallestId.select(&[4, 1, 7]), Some(1));
        assert_eq!(LabelPolicy::FirstListed.select(&[4, 1, 7]), Some(4));
        assert_eq!(LabelPolicy::SmallestId.select(&[]), None);
    }

    #[test]
    fn reduce_drops_label_free_and_reindexes() {
        let raw = parse("4,1,7 0:1\n 1:1\n9 2:1\n7 0:2\n").unwrap();
        let ds = reduce_multilabel(&raw, LabelPolicy::SmallestId).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.label_ids(), &[1, 7, 9]);
        let labels: Vec<usize> = ds.examples().iter().map(|e| e.label).collect();
        assert_eq!(labels, vec![0, 2, 1]);
        assert_eq!(ds.label_counts(), &[1, 1, 1]);
        assert_eq!(ds.examples()[0].features, raw.examples[0].features);

        let first = reduce_multilabel(&raw, LabelPolicy::FirstListed).unwrap();
        assert_eq!(first.label_ids(), &[4, 7, 9]);

        let none = parse(" 0:1\n 1:1\n").unwrap();
        assert!(matches!(
            reduce_multilabel(&none, LabelPolicy::SmallestId),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn reduce_onto_existing_label_space() {
        let raw = parse("3 0:1\n8 1:1\n1 2:1\n").unwrap();
        let (ds, dropped) = reduce_multilabel_onto(&raw, LabelPolicy::SmallestId, &[1, 3], 5).unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(ds.num_features(), 5);
        assert_eq!(ds.examples().iter().map(|e| e.label).collect::<Vec<_>>(), vec![1, 0]);
    }

    fn toy(n: usize) -> SparseDataset {
        let examples = (0..n)
            .map(|i| Example {
                features: SparseVector::new(3, vec![(i % 3, i as f64)]).unwrap(),
                label: i % 2,
            })
            .collect();
        SparseDataset::with_labels(examples, 3, 2).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = toy(10);
        let (tr, va) = ds.split(0.1, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (9, 1));
        let (tr2, va2) = ds.split(0.1, 7).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);

        let (tr, va) = toy(4).split(0.5, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (2, 2));

        assert!(toy(4).split(0.05, 1).is_err());
        assert!(toy(4).split(1.0, 1).is_err());
        assert!(toy(1).split(0.5, 1).is_err());
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let ds = toy(37);
        let (tr, va) = ds.split(0.3, 3).unwrap();
        let mut all: Vec<f64> = tr
            .examples()
            .iter()
            .chain(va.examples())
            .map(|e| e.features.values()[0])
            .collect();
        all.sort_by(f64::total_cmp);
        let expect: Vec<f64> = (0..37).map(|i| i as f64).collect();
        assert_eq!(all, expect);
        let total: u64 = tr.label_counts().iter().chain(va.label_counts()).sum();
        assert_eq!(total, 37);
    }

    #[test]
    fn dataset_cache_round_trip() {
        let raw = parse("3 0:0.5 7:1.2\n1,4 2:1.0\n5 \n").unwrap();
        let ds = reduce_multilabel(&raw, LabelPolicy::SmallestId).unwrap();
        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        let back = SparseDataset::read(&buf[..]).unwrap();
        assert_eq!(ds, back);
        buf[0] = b'X';
        assert!(matches!(SparseDataset::read(&buf[..]), Err(Error::Format(_))));
    }

    fn dense_dataset(rows: &[Vec<f64>]) -> SparseDataset {
        let dim = rows[0].len();
        let examples = rows
            .iter()
            .map(|r| Example {
                features: SparseVector::from_dense(r),
                label: 0,
            })
            .collect();
        SparseDataset::with_labels(examples, dim, 1).unwrap()
    }

    #[test]
    fn pca_diagonal_direction() {
        let ds = dense_dataset(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![-1.0, -1.0]]);
        let p = fit_pca(&ds, 1).unwrap();
        let c = &p.components()[0];
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c[0].abs() - s).abs() < 1e-8 && (c[1].abs() - s).abs() < 1e-8);
        assert!(c[0] * c[1] > 0.0);
    }

    #[test]
    fn pca_axis_aligned_orders_by_variance() {
        // variances: axis 0 small, axis 1 large, axis 2 medium
        let rows = vec![
            vec![0.1, 0.0, 0.0],
            vec![-0.1, 0.0, 0.0],
            vec![0.0, 5.0, 0.0],
            vec![0.0, -5.0, 0.0],
            vec![0.0, 0.0, 2.0],
            vec![0.0, 0.0, -2.0],
        ];
        let p = fit_pca(&dense_dataset(&rows), 3).unwrap();
        let argmax: Vec<usize> = p
            .components()
            .iter()
            .map(|c| (0..3).max_by(|&a, &b| c[a].abs().total_cmp(&c[b].abs())).unwrap())
            .collect();
        assert_eq!(argmax, vec![1, 2, 0]);
        assert!(!p.rank_deficient());
    }

    #[test]
    fn pca_matches_dense_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..8).map(|j| rng.gen::<f64>() * (1.0 + j as f64 * 0.7)).collect())
            .collect();
        let p = fit_pca(&dense_dataset(&rows), 3).unwrap();

        // oracle: explicit covariance and a dense symmetric eigensolver
        let n = rows.len() as f64;
        let mut mean = vec![0.0; 8];
        for r in &rows {
            for j in 0..8 {
                mean[j] += r[j] / n;
            }
        }
        let cov = DMatrix::from_fn(8, 8, |a, b| {
            rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n
        });
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (ci, &oi) in order.iter().take(3).enumerate() {
            let oracle: Vec<f64> = eig.eigenvectors.column(oi).iter().copied().collect();
            let sign = math::dot(&oracle, &p.components()[ci]).signum();
            for j in 0..8 {
                assert!(
                    (p.components()[ci][j] - sign * oracle[j]).abs() < 1e-6,
                    "component {ci} entry {j}"
                );
            }
            assert!((p.eigenvalues()[ci] - eig.eigenvalues[oi]).abs() < 1e-8);
        }
    }

    #[test]
    fn pca_rank_deficient_flags_and_completes() {
        let ds = dense_dataset(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]]);
        let p = fit_pca(&ds, 3).unwrap();
        assert!(p.rank_deficient());
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((math::dot(&p.components()[i], &p.components()[j]) - e).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn apply_pca_centering_identity_and_dense_oracle() {
        let mean = vec![1.0, -2.0, 0.5];
        let identity = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let p = PcaProjection::from_parts(mean.clone(), identity.clone(), vec![1.0; 3]).unwrap();
        let z = p.apply(&SparseVector::from_dense(&mean)).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-15));

        let p0 = PcaProjection::from_parts(vec![0.0; 3], identity, vec![1.0; 3]).unwrap();
        let x = SparseVector::new(3, vec![(0, 3.0), (2, -1.5)]).unwrap();
        assert_eq!(p0.apply(&x).unwrap(), vec![3.0, 0.0, -1.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let comps: Vec<Vec<f64>> = (0..2).map(|_| (0..6).map(|_| rng.gen::<f64>()).collect()).collect();
        let mean: Vec<f64> = (0..6).map(|_| rng.gen::<f64>()).collect();
        let p = PcaProjection::from_parts(mean.clone(), comps.clone(), vec![1.0, 0.5]).unwrap();
        let x = SparseVector::new(6, vec![(1, 0.3), (4, -2.0), (5, 1.1)]).unwrap();
        let dense = x.to_dense();
        let got = p.apply(&x).unwrap();
        for (c, g) in comps.iter().zip(&got) {
            let oracle: f64 = c.iter().zip(dense.iter().zip(&mean)).map(|(ci, (xi, mi))| ci * (xi - mi)).sum();
            assert!((oracle - g).abs() < 1e-10);
        }
        assert!(matches!(p.apply(&SparseVector::zeros(5)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn pca_round_trip() {
        let ds = dense_dataset(&[vec![1.0, 0.2], vec![2.0, 2.0], vec![-1.0, -1.0]]);
        let p = fit_pca(&ds, 2).unwrap();
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        assert_eq!(PcaProjection::read(&buf[..]).unwrap(), p);
    }
}
