//! Balanced probabilistic binary tree over labels, used as a conditional
//! noise distribution `p_n(y|x)`.
//!
//! Every internal node `ν` holds `(w_ν, b_ν)` and sends an input `x` (already
//! reduced to `k` dimensions) to its right child with probability
//! `σ(w_νᵀx + b_ν)` and to its left child otherwise. A label's probability is
//! the product of the decisions along its root-to-leaf path, so sampling and
//! log-likelihood evaluation both cost `O(k log C)`.
//!
//! The tree is complete with `C′ = 2^⌈log₂ C⌉` leaves. The `C′ − C` padding
//! leaves are made unreachable by pinning the bias of any node that has an
//! all-padding child to [`PADDING_BIAS`].
//!
//! Internal nodes are stored in heap order: node `i` has children `2i + 1`
//! (left, `ζ = −1`) and `2i + 2` (right, `ζ = +1`). Heap indices `C′ − 1 ..
//! 2C′ − 1` are the leaves.

use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::binio::{self, BinReader, BinWriter};
use crate::data_io::SparseDataset;
use crate::error::{Error, Result};
use crate::math::{self, PowerIterationConfig};

const TREE_MAGIC: &[u8; 8] = b"ADVNSTRE";
const FORMAT_VERSION: u32 = 1;
const NO_LABEL: u64 = u64::MAX;

/// Bias magnitude that routes around all-padding subtrees; `σ(−700)` is below
/// `1e-300`.
pub const PADDING_BIAS: f64 = 700.0;
pub const DEFAULT_NODE_REGULARIZER: f64 = 0.1;
pub const MAX_NEWTON_ITERATIONS: usize = 100;
pub const MAX_ALTERNATIONS: usize = 50;
/// Largest supported reduced dimension `k`.
pub const MAX_REDUCED_DIM: usize = 64;
const GRADIENT_TOLERANCE: f64 = 1e-10;
/// Node problems with more points than this fit their two subtrees in parallel.
const PARALLEL_SPLIT_POINTS: usize = 20_000;

/// Branch parameters of one internal node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeParams {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl NodeParams {
    pub fn zeros(k: usize) -> Self {
        NodeParams {
            weight: vec![0.0; k],
            bias: 0.0,
        }
    }

    #[inline]
    pub fn logit(&self, xr: &[f64]) -> f64 {
        math::dot(&self.weight, xr) + self.bias
    }

    /// `σ(ζ(wᵀx + b))` for the decision `ζ ∈ {−1, +1}`.
    pub fn decision_prob(&self, xr: &[f64], zeta: i8) -> f64 {
        math::sigmoid(zeta as f64 * self.logit(xr))
    }

    pub fn log_decision_prob(&self, xr: &[f64], zeta: i8) -> f64 {
        math::log_sigmoid(zeta as f64 * self.logit(xr))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryTree {
    depth: usize,
    num_labels: usize,
    k: usize,
    nodes: Vec<NodeParams>,
    /// Nodes whose bias is the padding sentinel.
    padding_router: Vec<bool>,
    /// Label at each leaf position, `None` for padding.
    leaf_label: Vec<Option<usize>>,
    label_leaf: Vec<usize>,
    pca_reference: String,
}

pub fn padded_size(num_labels: usize) -> usize {
    num_labels.next_power_of_two()
}

impl AuxiliaryTree {
    /// A tree with all parameters zero (uniform over the real labels at every
    /// node that is not a padding router) and labels placed in order.
    pub fn uniform(num_labels: usize, k: usize) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::invalid("a label tree needs at least 2 labels"));
        }
        let padded = padded_size(num_labels);
        let leaf_label: Vec<Option<usize>> = (0..padded).map(|p| (p < num_labels).then_some(p)).collect();
        let mut tree = AuxiliaryTree {
            depth: padded.trailing_zeros() as usize,
            num_labels,
            k,
            nodes: vec![NodeParams::zeros(k); padded - 1],
            padding_router: vec![false; padded - 1],
            leaf_label,
            label_leaf: (0..num_labels).collect(),
            pca_reference: String::new(),
        };
        tree.route_around_padding();
        Ok(tree)
    }

    /// Builds a tree from explicit parts. `leaf_label` must map leaf positions
    /// to distinct labels `0..num_labels`, with `None` for padding.
    pub fn from_parts(num_labels: usize, k: usize, nodes: Vec<NodeParams>, leaf_label: Vec<Option<usize>>) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::invalid("a label tree needs at least 2 labels"));
        }
        let padded = padded_size(num_labels);
        if leaf_label.len() != padded || nodes.len() != padded - 1 {
            return Err(Error::invalid(format!(
                "expected {padded} leaves and {} nodes, got {} and {}",
                padded - 1,
                leaf_label.len(),
                nodes.len()
            )));
        }
        if nodes.iter().any(|n| n.weight.len() != k) {
            return Err(Error::invalid("node weight length differs from k"));
        }
        let mut label_leaf = vec![usize::MAX; num_labels];
        for (pos, l) in leaf_label.iter().enumerate() {
            if let Some(l) = *l {
                if l >= num_labels || label_leaf[l] != usize::MAX {
                    return Err(Error::invalid(format!("leaf map is not a bijection at label {l}")));
                }
                label_leaf[l] = pos;
            }
        }
        if label_leaf.contains(&usize::MAX) {
            return Err(Error::invalid("some label has no leaf"));
        }
        let mut tree = AuxiliaryTree {
            depth: padded.trailing_zeros() as usize,
            num_labels,
            k,
            nodes,
            padding_router: vec![false; padded - 1],
            leaf_label,
            label_leaf,
            pca_reference: String::new(),
        };
        tree.route_around_padding();
        Ok(tree)
    }

    /// Pins `w = 0, b = ±PADDING_BIAS` on every node with exactly one
    /// all-padding child.
    fn route_around_padding(&mut self) {
        let padded = self.padded_size();
        // real-label count per heap index, bottom-up
        let mut real = vec![0usize; 2 * padded - 1];
        for (pos, l) in self.leaf_label.iter().enumerate() {
            real[padded - 1 + pos] = l.is_some() as usize;
        }
        for i in (0..padded - 1).rev() {
            real[i] = real[2 * i + 1] + real[2 * i + 2];
        }
        for i in 0..padded - 1 {
            let (left, right) = (real[2 * i + 1], real[2 * i + 2]);
            if left == 0 && right > 0 {
                self.nodes[i] = NodeParams {
                    weight: vec![0.0; self.k],
                    bias: PADDING_BIAS,
                };
                self.padding_router[i] = true;
            } else if right == 0 && left > 0 {
                self.nodes[i] = NodeParams {
                    weight: vec![0.0; self.k],
                    bias: -PADDING_BIAS,
                };
                self.padding_router[i] = true;
            }
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn padded_size(&self) -> usize {
        self.leaf_label.len()
    }

    pub fn reduced_dim(&self) -> usize {
        self.k
    }

    pub fn nodes(&self) -> &[NodeParams] {
        &self.nodes
    }

    pub fn is_padding_router(&self, node: usize) -> bool {
        self.padding_router[node]
    }

    pub fn leaf_labels(&self) -> &[Option<usize>] {
        &self.leaf_label
    }

    pub fn leaf_of_label(&self, y: usize) -> usize {
        self.label_leaf[y]
    }

    pub fn pca_reference(&self) -> &str {
        &self.pca_reference
    }

    pub fn set_pca_reference(&mut self, reference: impl Into<String>) {
        self.pca_reference = reference.into();
    }

    /// Copy with every fitted node's `(w, b)` multiplied by `factor`.
    /// `factor > 1` sharpens the distribution, `factor < 1` flattens it.
    /// Padding routers keep their sentinel.
    pub fn tempered(&self, factor: f64) -> AuxiliaryTree {
        let mut t = self.clone();
        for (node, &router) in t.nodes.iter_mut().zip(&self.padding_router) {
            if !router {
                node.weight.iter_mut().for_each(|w| *w *= factor);
                node.bias *= factor;
            }
        }
        t
    }

    /// `(node, ζ)` pairs on the root-to-leaf path of `y`.
    pub fn path(&self, y: usize) -> Result<Vec<(usize, i8)>> {
        self.check_label(y)?;
        let leaf = self.label_leaf[y];
        let mut node = 0;
        let mut out = Vec::with_capacity(self.depth);
        for level in (0..self.depth).rev() {
            let right = (leaf >> level) & 1 == 1;
            out.push((node, if right { 1 } else { -1 }));
            node = 2 * node + 1 + right as usize;
        }
        Ok(out)
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.num_labels {
            if y < self.padded_size() {
                return Err(Error::invalid(format!("label {y} is a padding label")));
            }
            return Err(Error::LabelOutOfRange {
                label: y,
                num_labels: self.num_labels,
            });
        }
        Ok(())
    }

    fn check_input(&self, xr: &[f64]) -> Result<()> {
        if xr.len() != self.k {
            return Err(Error::Dimension {
                expected: self.k,
                got: xr.len(),
            });
        }
        Ok(())
    }

    /// `log p_n(y | x)` in nats; exactly `depth` terms.
    pub fn log_prob(&self, xr: &[f64], y: usize) -> Result<f64> {
        self.check_input(xr)?;
        Ok(self
            .path(y)?
            .into_iter()
            .map(|(node, zeta)| self.nodes[node].log_decision_prob(xr, zeta))
            .sum())
    }

    /// `log p_n(y | x)` for every real label, `O(C k)`.
    pub fn log_probs(&self, xr: &[f64]) -> Result<Vec<f64>> {
        self.check_input(xr)?;
        let padded = self.padded_size();
        let mut lp = vec![0.0; 2 * padded - 1];
        for i in 0..padded - 1 {
            let z = self.nodes[i].logit(xr);
            lp[2 * i + 1] = lp[i] + math::log_sigmoid(-z);
            lp[2 * i + 2] = lp[i] + math::log_sigmoid(z);
        }
        Ok(self.label_leaf.iter().map(|&leaf| lp[padded - 1 + leaf]).collect())
    }

    /// Ancestral sample of a label given the reduced input.
    pub fn sample<R: Rng + ?Sized>(&self, xr: &[f64], rng: &mut R) -> Result<usize> {
        self.sample_counted(xr, rng).map(|(y, _)| y)
    }

    /// Like [`sample`](Self::sample), also returning the number of node
    /// evaluations performed.
    pub fn sample_counted<R: Rng + ?Sized>(&self, xr: &[f64], rng: &mut R) -> Result<(usize, usize)> {
        self.check_input(xr)?;
        let mut node = 0;
        let mut visits = 0;
        for _ in 0..self.depth {
            let p_right = self.nodes[node].decision_prob(xr, 1);
            visits += 1;
            let right = rng.gen::<f64>() < p_right;
            node = 2 * node + 1 + right as usize;
        }
        let leaf = node + 1 - self.padded_size();
        match self.leaf_label[leaf] {
            Some(y) => Ok((y, visits)),
            None => Err(Error::CorruptModel(format!("sampled padding leaf {leaf}"))),
        }
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BinWriter::new(out, TREE_MAGIC, FORMAT_VERSION)?;
        w.u64(self.depth as u64)?;
        w.u64(self.num_labels as u64)?;
        w.u64(self.padded_size() as u64)?;
        w.u64(self.k as u64)?;
        w.string(&self.pca_reference)?;
        for l in &self.leaf_label {
            w.u64(l.map_or(NO_LABEL, |l| l as u64))?;
        }
        for (node, &router) in self.nodes.iter().zip(&self.padding_router) {
            w.u8(router as u8)?;
            w.f64s(&node.weight)?;
            w.f64(node.bias)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = BinReader::new(input, TREE_MAGIC, FORMAT_VERSION)?;
        let depth = r.usize()?;
        let num_labels = r.usize()?;
        let padded = r.usize()?;
        let k = r.usize()?;
        let pca_reference = r.string()?;
        if num_labels < 2 || padded != padded_size(num_labels) || depth != padded.trailing_zeros() as usize {
            return Err(Error::Format(format!(
                "inconsistent tree header: depth {depth}, C {num_labels}, C' {padded}"
            )));
        }
        let leaf_label = (0..padded)
            .map(|_| r.u64().map(|l| (l != NO_LABEL).then_some(l as usize)))
            .collect::<Result<Vec<_>>>()?;
        let mut nodes = Vec::with_capacity(padded - 1);
        let mut routers = Vec::with_capacity(padded - 1);
        for _ in 0..padded - 1 {
            routers.push(r.u8()? != 0);
            let weight = r.f64s(k)?;
            let bias = r.f64()?;
            nodes.push(NodeParams { weight, bias });
        }
        let mut tree = AuxiliaryTree::from_parts(num_labels, k, nodes, leaf_label)
            .map_err(|e| Error::Format(e.to_string()))?;
        if tree.padding_router != routers {
            return Err(Error::Format("padding router flags disagree with leaf map".into()));
        }
        tree.pca_reference = pca_reference;
        Ok(tree)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(binio::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(binio::open(path)?)
    }
}

/// Data for fitting one node: the reduced points of every label in `Y_ν`,
/// grouped by label, plus per-label sums `s_y` and counts.
#[derive(Debug, Clone)]
pub struct NodeFitProblem {
    k: usize,
    labels: Vec<usize>,
    padding: Vec<bool>,
    /// Row-major `n × k`.
    points: Vec<f64>,
    point_slot: Vec<usize>,
    aggregates: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl NodeFitProblem {
    /// `groups` holds `(label, points)` for every label of the node; padding
    /// labels are given with `is_padding = true` and no points.
    pub fn new(k: usize, groups: Vec<(usize, bool, Vec<Vec<f64>>)>) -> Result<Self> {
        if groups.len() < 2 {
            return Err(Error::invalid("a node needs at least two labels"));
        }
        let mut p = NodeFitProblem {
            k,
            labels: Vec::with_capacity(groups.len()),
            padding: Vec::with_capacity(groups.len()),
            points: Vec::new(),
            point_slot: Vec::new(),
            aggregates: Vec::with_capacity(groups.len()),
            counts: Vec::with_capacity(groups.len()),
        };
        for (slot, (label, is_padding, pts)) in groups.into_iter().enumerate() {
            if is_padding && !pts.is_empty() {
                return Err(Error::invalid(format!("padding label {label} has data")));
            }
            let mut agg = vec![0.0; k];
            for x in &pts {
                if x.len() != k {
                    return Err(Error::Dimension {
                        expected: k,
                        got: x.len(),
                    });
                }
                agg.iter_mut().zip(x).for_each(|(a, v)| *a += v);
                p.points.extend_from_slice(x);
                p.point_slot.push(slot);
            }
            p.labels.push(label);
            p.padding.push(is_padding);
            p.counts.push(pts.len());
            p.aggregates.push(agg);
        }
        Ok(p)
    }

    fn from_rows(k: usize, labels: &[usize], num_real: usize, rows: &[f64], members: &[Vec<usize>]) -> Self {
        let n: usize = labels.iter().filter(|&&l| l < num_real).map(|&l| members[l].len()).sum();
        let mut p = NodeFitProblem {
            k,
            labels: labels.to_vec(),
            padding: labels.iter().map(|&l| l >= num_real).collect(),
            points: Vec::with_capacity(n * k),
            point_slot: Vec::with_capacity(n),
            aggregates: Vec::with_capacity(labels.len()),
            counts: Vec::with_capacity(labels.len()),
        };
        for (slot, &label) in labels.iter().enumerate() {
            let mut agg = vec![0.0; k];
            let idx: &[usize] = if label < num_real { &members[label] } else { &[] };
            for &i in idx {
                let x = &rows[i * k..(i + 1) * k];
                agg.iter_mut().zip(x).for_each(|(a, v)| *a += v);
                p.points.extend_from_slice(x);
                p.point_slot.push(slot);
            }
            p.counts.push(idx.len());
            p.aggregates.push(agg);
        }
        p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_points(&self) -> usize {
        self.point_slot.len()
    }

    pub fn aggregate(&self, slot: usize) -> &[f64] {
        &self.aggregates[slot]
    }

    pub fn count(&self, slot: usize) -> usize {
        self.counts[slot]
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.k..(i + 1) * self.k]
    }

    /// `Δ_y = Σ_{x∈D_y} (wᵀx + b) = wᵀs_y + |D_y| b`: the change in the node
    /// objective from moving label `y` from the left to the right child.
    pub fn compute_delta(&self, params: &NodeParams, slot: usize) -> f64 {
        math::dot(&params.weight, &self.aggregates[slot]) + self.counts[slot] as f64 * params.bias
    }

    pub fn deltas(&self, params: &NodeParams) -> Vec<f64> {
        (0..self.labels.len()).map(|s| self.compute_delta(params, s)).collect()
    }

    /// Regularized node objective
    /// `Σ log σ(ζ_y (wᵀx + b)) − λ (‖w‖² + b²)`.
    pub fn objective(&self, params: &NodeParams, assignment: &[i8], lambda: f64) -> f64 {
        let data: f64 = (0..self.num_points())
            .map(|i| {
                let z = params.logit(self.point(i));
                math::log_sigmoid(assignment[self.point_slot[i]] as f64 * z)
            })
            .sum();
        data - lambda * (math::dot(&params.weight, &params.weight) + params.bias * params.bias)
    }

    /// Gradient of [`objective`](Self::objective) with respect to `(w, b)`,
    /// bias last.
    pub fn gradient(&self, params: &NodeParams, assignment: &[i8], lambda: f64) -> Vec<f64> {
        let k = self.k;
        let mut g = vec![0.0; k + 1];
        for i in 0..self.num_points() {
            let x = self.point(i);
            let zeta = assignment[self.point_slot[i]] as f64;
            let c = zeta * math::sigmoid(-zeta * params.logit(x));
            g[..k].iter_mut().zip(x).for_each(|(gi, xi)| *gi += c * xi);
            g[k] += c;
        }
        for j in 0..k {
            g[j] -= 2.0 * lambda * params.weight[j];
        }
        g[k] -= 2.0 * lambda * params.bias;
        g
    }

    /// Gradient and negated Hessian (positive definite for `λ > 0`).
    fn gradient_and_neg_hessian(&self, params: &NodeParams, assignment: &[i8], lambda: f64) -> (Vec<f64>, DMatrix<f64>) {
        let k = self.k;
        let mut g = vec![0.0; k + 1];
        let mut h = DMatrix::<f64>::zeros(k + 1, k + 1);
        for i in 0..self.num_points() {
            let x = self.point(i);
            let zeta = assignment[self.point_slot[i]] as f64;
            let z = params.logit(x);
            let c = zeta * math::sigmoid(-zeta * z);
            let s = math::sigmoid(z) * math::sigmoid(-z);
            for a in 0..k {
                g[a] += c * x[a];
                let sa = s * x[a];
                for b in 0..=a {
                    h[(a, b)] += sa * x[b];
                }
                h[(k, a)] += sa;
            }
            g[k] += c;
            h[(k, k)] += s;
        }
        for a in 0..=k {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        for j in 0..k {
            g[j] -= 2.0 * lambda * params.weight[j];
        }
        g[k] -= 2.0 * lambda * params.bias;
        for a in 0..=k {
            h[(a, a)] += 2.0 * lambda;
        }
        (g, h)
    }
}

/// Balanced split: the half of the labels with the largest `Δ_y` gets
/// `ζ = +1`, the rest `−1`. Ties go to the smaller label id.
pub fn split_labels(labels: &[usize], deltas: &[f64]) -> Vec<i8> {
    assert_eq!(labels.len(), deltas.len());
    assert!(labels.len() % 2 == 0, "cannot split {} labels in half", labels.len());
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| deltas[b].total_cmp(&deltas[a]).then(labels[a].cmp(&labels[b])));
    let mut zeta = vec![-1i8; labels.len()];
    for &slot in &order[..labels.len() / 2] {
        zeta[slot] = 1;
    }
    zeta
}

#[derive(Debug, Clone)]
pub struct NewtonFit {
    pub params: NodeParams,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximizes the regularized node objective over `(w, b)` for a fixed
/// assignment with damped Newton ascent, starting from `start`.
pub fn newton_fit(problem: &NodeFitProblem, assignment: &[i8], lambda: f64, start: &NodeParams) -> Result<NewtonFit> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("node regularizer must be positive"));
    }
    if problem.k > MAX_REDUCED_DIM {
        return Err(Error::invalid(format!("reduced dimension {} exceeds {MAX_REDUCED_DIM}", problem.k)));
    }
    let k = problem.k;
    let mut params = start.clone();
    let mut f = problem.objective(&params, assignment, lambda);
    let scale = 1.0 + problem.num_points() as f64;
    let mut iterations = 0;
    let mut grad_norm;
    let mut converged = false;
    loop {
        let (g, neg_h) = problem.gradient_and_neg_hessian(&params, assignment, lambda);
        grad_norm = math::norm(&g);
        if grad_norm < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        if iterations >= MAX_NEWTON_ITERATIONS {
            break;
        }
        iterations += 1;
        let chol = neg_h
            .cholesky()
            .ok_or_else(|| Error::Numeric("node Hessian is not negative definite".into()))?;
        let step = chol.solve(&DVector::from_vec(g));
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let cand = NodeParams {
                weight: (0..k).map(|j| params.weight[j] + t * step[j]).collect(),
                bias: params.bias + t * step[k],
            };
            let fc = problem.objective(&cand, assignment, lambda);
            if fc >= f {
                params = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No representable ascent left along the Newton direction.
            converged = grad_norm < 1e-7 * scale;
            break;
        }
    }
    if !converged {
        warn!("Newton ascent stopped after {iterations} iterations with gradient norm {grad_norm:.3e}");
    }
    Ok(NewtonFit {
        params,
        objective: f,
        gradient_norm: grad_norm,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct NodeInit {
    pub params: NodeParams,
    /// The aggregates had zero covariance and `w₀` fell back to `e₀`.
    pub degenerate: bool,
}

/// `w₀` = dominant eigenvector of the covariance of the per-label sums `s_y`
/// over the node's non-padding labels; `b₀ = 0`.
pub fn init_node(problem: &NodeFitProblem) -> NodeInit {
    let k = problem.k;
    let aggs: Vec<&Vec<f64>> = problem
        .aggregates
        .iter()
        .zip(&problem.padding)
        .filter(|(_, &pad)| !pad)
        .map(|(a, _)| a)
        .collect();
    let m = aggs.len().max(1) as f64;
    let mut mean = vec![0.0; k];
    for a in &aggs {
        mean.iter_mut().zip(a.iter()).for_each(|(u, v)| *u += v / m);
    }
    let mut cov = vec![0.0; k * k];
    for a in &aggs {
        for i in 0..k {
            let di = a[i] - mean[i];
            for j in 0..k {
                cov[i * k + j] += di * (a[j] - mean[j]) / m;
            }
        }
    }
    let trace: f64 = (0..k).map(|i| cov[i * k + i]).sum();
    let fallback = || {
        let mut w = vec![0.0; k];
        if k > 0 {
            w[0] = 1.0;
        }
        NodeInit {
            params: NodeParams { weight: w, bias: 0.0 },
            degenerate: true,
        }
    };
    if !(trace > 0.0) || k == 0 {
        warn!("node init: aggregate covariance is zero, using first basis vector");
        return fallback();
    }
    let eig = math::top_eigenpairs(k, 1, PowerIterationConfig::default(), |v, out| {
        for i in 0..k {
            out[i] = math::dot(&cov[i * k..(i + 1) * k], v);
        }
    });
    if eig.completed > 0 {
        return fallback();
    }
    NodeInit {
        params: NodeParams {
            weight: eig.vectors.into_iter().next().unwrap(),
            bias: 0.0,
        },
        degenerate: false,
    }
}

#[derive(Debug, Clone)]
pub struct NodeFit {
    pub params: NodeParams,
    pub assignment: Vec<i8>,
    /// Regularized objective after the initial split and after every Newton
    /// solve and every re-split, in order.
    pub objective_trace: Vec<f64>,
    pub alternations: usize,
    pub cycle_guard_hit: bool,
    pub newton_unconverged: usize,
    pub degenerate_init: bool,
}

/// Alternates Newton ascent over `(w, b)` with the balanced discrete split
/// until the split is a fixed point.
pub fn fit_node(problem: &NodeFitProblem, lambda: f64) -> Result<NodeFit> {
    if problem.labels.len() % 2 != 0 {
        return Err(Error::invalid(format!("node has an odd number of labels ({})", problem.labels.len())));
    }
    let init = init_node(problem);
    let mut params = init.params;
    let mut assignment = split_labels(&problem.labels, &problem.deltas(&params));
    let mut trace = vec![problem.objective(&params, &assignment, lambda)];
    let mut alternations = 0;
    let mut newton_unconverged = 0;
    let mut cycle_guard_hit = true;
    while alternations < MAX_ALTERNATIONS {
        alternations += 1;
        let fit = newton_fit(problem, &assignment, lambda, &params)?;
        newton_unconverged += (!fit.converged) as usize;
        params = fit.params;
        trace.push(fit.objective);
        let next = split_labels(&problem.labels, &problem.deltas(&params));
        if next == assignment {
            cycle_guard_hit = false;
            break;
        }
        assignment = next;
        trace.push(problem.objective(&params, &assignment, lambda));
    }
    if cycle_guard_hit {
        warn!("node fit: split did not settle after {MAX_ALTERNATIONS} alternations, keeping the last one");
    }
    Ok(NodeFit {
        params,
        assignment,
        objective_trace: trace,
        alternations,
        cycle_guard_hit,
        newton_unconverged,
        degenerate_init: init.degenerate,
    })
}

/// Counters collected while fitting a whole tree.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitReport {
    pub nodes_fitted: usize,
    pub padding_routers: usize,
    pub total_alternations: usize,
    pub cycle_guards: usize,
    pub newton_unconverged: usize,
    pub degenerate_inits: usize,
}

impl FitReport {
    fn merge(&mut self, o: FitReport) {
        self.nodes_fitted += o.nodes_fitted;
        self.padding_routers += o.padding_routers;
        self.total_alternations += o.total_alternations;
        self.cycle_guards += o.cycle_guards;
        self.newton_unconverged += o.newton_unconverged;
        self.degenerate_inits += o.degenerate_inits;
    }
}

#[derive(Default)]
struct Subtree {
    nodes: Vec<(usize, NodeParams)>,
    leaves: Vec<(usize, Option<usize>)>,
    report: FitReport,
}

impl Subtree {
    fn merge(&mut self, o: Subtree) {
        self.nodes.extend(o.nodes);
        self.leaves.extend(o.leaves);
        self.report.merge(o.report);
    }
}

struct TreeData<'a> {
    k: usize,
    num_labels: usize,
    padded: usize,
    rows: &'a [f64],
    members: Vec<Vec<usize>>,
    lambda: f64,
}

/// Fits structure and parameters of a label tree on a dataset whose features
/// are already reduced to `k` dimensions (see
/// [`SparseDataset::project`](crate::data_io::SparseDataset::project)).
pub fn fit_tree(data: &SparseDataset, lambda_n: f64) -> Result<AuxiliaryTree> {
    fit_tree_with_report(data, lambda_n).map(|(t, _)| t)
}

pub fn fit_tree_with_report(data: &SparseDataset, lambda_n: f64) -> Result<(AuxiliaryTree, FitReport)> {
    let k = data.num_features();
    let mut rows = vec![0.0; data.len() * k];
    for (i, ex) in data.examples().iter().enumerate() {
        for (j, v) in ex.features.iter() {
            rows[i * k + j] = v;
        }
    }
    let labels: Vec<usize> = data.examples().iter().map(|e| e.label).collect();
    fit_tree_rows(k, data.num_labels(), &rows, &labels, lambda_n)
}

/// Same as [`fit_tree_with_report`] on a row-major `n × k` matrix.
pub fn fit_tree_rows(
    k: usize,
    num_labels: usize,
    rows: &[f64],
    labels: &[usize],
    lambda_n: f64,
) -> Result<(AuxiliaryTree, FitReport)> {
    if num_labels < 2 {
        return Err(Error::invalid(format!("need at least 2 labels, got {num_labels}")));
    }
    if k == 0 || k > MAX_REDUCED_DIM {
        return Err(Error::invalid(format!("reduced dimension {k} not in 1..={MAX_REDUCED_DIM}")));
    }
    if !(lambda_n > 0.0) {
        return Err(Error::invalid("node regularizer must be positive"));
    }
    if rows.len() != labels.len() * k {
        return Err(Error::Dimension {
            expected: labels.len() * k,
            got: rows.len(),
        });
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reduced features".into()));
    }
    let mut members = vec![Vec::new(); num_labels];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_labels {
            return Err(Error::LabelOutOfRange { label: l, num_labels });
        }
        members[l].push(i);
    }
    let padded = padded_size(num_labels);
    let ctx = TreeData {
        k,
        num_labels,
        padded,
        rows,
        members,
        lambda: lambda_n,
    };
    let all: Vec<usize> = (0..padded).collect();
    let sub = build_subtree(&ctx, 0, all)?;

    let mut nodes = vec![NodeParams::zeros(k); padded - 1];
    for (i, p) in sub.nodes {
        nodes[i] = p;
    }
    let mut leaf_label = vec![None; padded];
    for (pos, l) in sub.leaves {
        leaf_label[pos] = l;
    }
    let tree = AuxiliaryTree::from_parts(num_labels, k, nodes, leaf_label)?;
    let mut report = sub.report;
    report.padding_routers = tree.padding_router.iter().filter(|&&r| r).count();
    Ok((tree, report))
}

fn build_subtree(ctx: &TreeData<'_>, node: usize, labels: Vec<usize>) -> Result<Subtree> {
    let mut out = Subtree::default();
    if labels.len() == 1 {
        let l = labels[0];
        out.leaves.push((node + 1 - ctx.padded, (l < ctx.num_labels).then_some(l)));
        return Ok(out);
    }
    let real = labels.iter().filter(|&&l| l < ctx.num_labels).count();
    let half = labels.len() / 2;

    let (left, right) = if real == 0 {
        out.nodes.push((node, NodeParams::zeros(ctx.k)));
        (labels[..half].to_vec(), labels[half..].to_vec())
    } else if labels.len() - real >= half {
        // All real labels go right; the left child is padding only and the
        // node's bias is pinned once the tree is assembled.
        let (mut reals, pads): (Vec<usize>, Vec<usize>) = labels.iter().partition(|&&l| l < ctx.num_labels);
        let fill = half - reals.len();
        reals.extend_from_slice(&pads[..fill]);
        out.nodes.push((node, NodeParams::zeros(ctx.k)));
        (pads[fill..].to_vec(), reals)
    } else {
        let problem = NodeFitProblem::from_rows(ctx.k, &labels, ctx.num_labels, ctx.rows, &ctx.members);
        let fit = fit_node(&problem, ctx.lambda)?;
        out.report.nodes_fitted += 1;
        out.report.total_alternations += fit.alternations;
        out.report.cycle_guards += fit.cycle_guard_hit as usize;
        out.report.newton_unconverged += fit.newton_unconverged;
        out.report.degenerate_inits += fit.degenerate_init as usize;
        let mut left = Vec::with_capacity(half);
        let mut right = Vec::with_capacity(half);
        for (&l, &z) in labels.iter().zip(&fit.assignment) {
            if z > 0 {
                right.push(l);
            } else {
                left.push(l);
            }
        }
        out.nodes.push((node, fit.params));
        (left, right)
    };

    let points: usize = labels
        .iter()
        .filter(|&&l| l < ctx.num_labels)
        .map(|&l| ctx.members[l].len())
        .sum();
    let (l, r) = if points > PARALLEL_SPLIT_POINTS {
        rayon::join(
            || build_subtree(ctx, 2 * node + 1, left),
            || build_subtree(ctx, 2 * node + 2, right),
        )
    } else {
        (build_subtree(ctx, 2 * node + 1, left), build_subtree(ctx, 2 * node + 2, right))
    };
    out.merge(l?);
    out.merge(r?);
    Ok(out)
}
