//! Nonparametric negative-sampling diagnostics on explicit probability
//! tables: optimal scores, Hessian, gradient-noise covariance, and the scalar
//! signal-to-noise ratio `η̄ = 1 / Tr[Cov · H⁻¹]`.
//!
//! In the nonparametric limit every cell `(x, y)` has its own score
//! `ξ_{x,y}`, so everything here is a small table computation. Contexts `x`
//! are indices `0..|X|`; `N` is the dataset-size scale.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Row sums of probability tables must be 1 within this.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;
/// Largest condition number accepted by [`reparameterization_check`].
pub const MAX_CONDITION_NUMBER: f64 = 1e6;
pub const DEFAULT_MC_SAMPLES: usize = 1_000_000;

pub type Table = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonparametricProblem {
    pub p_data: Table,
    pub p_noise: Table,
    #[serde(default = "default_scale")]
    pub n_scale: f64,
    /// Current scores; [`NonparametricProblem::new`] sets them to `ξ*` when
    /// that exists and to zero otherwise.
    #[serde(default)]
    pub scores: Table,
}

fn default_scale() -> f64 {
    1.0
}

fn check_table(name: &str, t: &Table, cols: usize) -> Result<()> {
    for (x, row) in t.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::invalid(format!("{name} row {x} has {} entries, expected {cols}", row.len())));
        }
        if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid(format!("{name} row {x} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::invalid(format!("{name} row {x} sums to {s}")));
        }
    }
    Ok(())
}

impl NonparametricProblem {
    pub fn new(p_data: Table, p_noise: Table, n_scale: f64) -> Result<Self> {
        let mut p = NonparametricProblem {
            p_data,
            p_noise,
            n_scale,
            scores: Vec::new(),
        };
        p.validate()?;
        p.scores = p.optimal_scores().unwrap_or_else(|_| vec![vec![0.0; p.num_labels()]; p.num_contexts()]);
        Ok(p)
    }

    /// Checks shapes and that every row is a distribution. Zero entries are
    /// allowed here; the operations that need strict positivity reject them.
    pub fn validate(&self) -> Result<()> {
        if self.p_data.is_empty() || self.p_data[0].is_empty() {
            return Err(Error::invalid("empty probability table"));
        }
        if self.p_noise.len() != self.p_data.len() {
            return Err(Error::invalid("p_data and p_noise have different numbers of contexts"));
        }
        if !(self.n_scale > 0.0 && self.n_scale.is_finite()) {
            return Err(Error::invalid(format!("N = {} must be positive", self.n_scale)));
        }
        let cols = self.p_data[0].len();
        check_table("p_data", &self.p_data, cols)?;
        check_table("p_noise", &self.p_noise, cols)?;
        if !self.scores.is_empty() {
            if self.scores.len() != self.p_data.len() || self.scores.iter().any(|r| r.len() != cols) {
                return Err(Error::invalid("score table shape differs from the probability tables"));
            }
        }
        Ok(())
    }

    pub fn with_scores(mut self, scores: Table) -> Result<Self> {
        self.scores = scores;
        self.validate()?;
        Ok(self)
    }

    pub fn num_contexts(&self) -> usize {
        self.p_data.len()
    }

    pub fn num_labels(&self) -> usize {
        self.p_data[0].len()
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize)> {
        let c = self.num_labels();
        (0..self.num_contexts()).flat_map(move |x| (0..c).map(move |y| (x, y)))
    }

    fn require_positive(&self) -> Result<()> {
        for (x, y) in self.cells() {
            if !(self.p_data[x][y] > 0.0 && self.p_noise[x][y] > 0.0) {
                return Err(Error::Numeric(format!("zero probability at context {x}, label {y}")));
            }
        }
        Ok(())
    }

    /// `ξ*_{x,y} = ln p_D(y|x) − ln p_n(y|x)`.
    pub fn optimal_scores(&self) -> Result<Table> {
        self.require_positive()?;
        Ok(self
            .p_data
            .iter()
            .zip(&self.p_noise)
            .map(|(d, n)| d.iter().zip(n).map(|(a, b)| a.ln() - b.ln()).collect())
            .collect())
    }

    /// The same problem with its scores moved to `ξ*`.
    pub fn at_optimum(&self) -> Result<Self> {
        let mut p = self.clone();
        p.scores = self.optimal_scores()?;
        Ok(p)
    }

    /// Per-cell terms of the expected loss
    /// `−p_D log σ(ξ) − p_n log σ(−ξ)` at `scores`.
    pub fn loss_terms(&self, scores: &Table) -> Table {
        self.cells_map(|x, y| {
            let s = scores[x][y];
            -self.p_data[x][y] * math::log_sigmoid(s) - self.p_noise[x][y] * math::log_sigmoid(-s)
        })
    }

    /// Expected negative-sampling loss summed over all cells.
    pub fn expected_loss(&self, scores: &Table) -> f64 {
        self.loss_terms(scores).iter().flatten().sum()
    }

    /// `g = −p_D σ(−ξ) + p_n σ(ξ)` at the stored scores.
    pub fn expected_gradient(&self) -> Table {
        self.cells_map(|x, y| {
            let s = self.scores[x][y];
            -self.p_data[x][y] * math::sigmoid(-s) + self.p_noise[x][y] * math::sigmoid(s)
        })
    }

    /// Hessian diagonal of the expected loss at arbitrary stored scores,
    /// `(p_D + p_n) σ(−ξ) σ(ξ)`.
    pub fn hessian_diagonal(&self) -> Table {
        self.cells_map(|x, y| {
            let s = self.scores[x][y];
            (self.p_data[x][y] + self.p_noise[x][y]) * math::sigmoid(-s) * math::sigmoid(s)
        })
    }

    /// `α_{x,y} = p_n(y|x) σ(ξ*_{x,y})`, checked against the unsimplified
    /// form within 1e-12.
    pub fn hessian_alpha(&self) -> Result<Table> {
        let opt = self.at_optimum()?;
        let alpha = opt.cells_map(|x, y| opt.p_noise[x][y] * math::sigmoid(opt.scores[x][y]));
        let general = opt.hessian_diagonal();
        for (x, y) in self.cells() {
            if (alpha[x][y] - general[x][y]).abs() > 1e-12 {
                return Err(Error::Numeric(format!(
                    "alpha forms disagree at ({x}, {y}): {} vs {}",
                    alpha[x][y], general[x][y]
                )));
            }
        }
        Ok(alpha)
    }

    /// Blocks `C_x = N diag(α_x) − 2N α_x α_xᵀ` of the gradient-noise
    /// covariance at `ξ*`.
    pub fn noise_covariance(&self) -> Result<Vec<DMatrix<f64>>> {
        let alpha = self.hessian_alpha()?;
        let n = self.n_scale;
        Ok(alpha
            .iter()
            .map(|a| {
                let c = a.len();
                DMatrix::from_fn(c, c, |i, j| n * (if i == j { a[i] } else { 0.0 }) - 2.0 * n * a[i] * a[j])
            })
            .collect())
    }

    /// `E_{p_n}[f(p_D/p_n)]` with `f(z) = z/(1+z)`, per context.
    pub fn sum_alpha_via_f(&self) -> Result<Vec<f64>> {
        self.require_positive()?;
        let f = |z: f64| 1.0 / (1.0 + 1.0 / z);
        Ok(self
            .p_data
            .iter()
            .zip(&self.p_noise)
            .map(|(d, n)| d.iter().zip(n).map(|(pd, pn)| pn * f(pd / pn)).sum())
            .collect())
    }

    /// Closed form `1/η̄ = N Σ_x (|Y| − 2 Σ_y α_{x,y})`, from `α` alone.
    pub fn inverse_snr_closed_form(&self) -> Result<f64> {
        let alpha = self.hessian_alpha()?;
        let c = self.num_labels() as f64;
        Ok(self.n_scale * alpha.iter().map(|a| c - 2.0 * a.iter().sum::<f64>()).sum::<f64>())
    }

    /// Dense Hessian `diag(α)` over all cells, row-major by context.
    pub fn hessian_matrix(&self) -> Result<DMatrix<f64>> {
        let alpha = self.hessian_alpha()?;
        let flat: Vec<f64> = alpha.into_iter().flatten().collect();
        Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(flat)))
    }

    /// Dense block-diagonal covariance over all cells.
    pub fn covariance_matrix(&self) -> Result<DMatrix<f64>> {
        let blocks = self.noise_covariance()?;
        let c = self.num_labels();
        let d = c * blocks.len();
        let mut m = DMatrix::zeros(d, d);
        for (x, b) in blocks.iter().enumerate() {
            m.view_mut((x * c, x * c), (c, c)).copy_from(b);
        }
        Ok(m)
    }

    /// `Tr[Cov · H⁻¹]` with dense matrices.
    pub fn inverse_snr_trace(&self) -> Result<f64> {
        inverse_snr_dense(&self.covariance_matrix()?, &self.hessian_matrix()?)
    }

    pub fn snr(&self) -> Result<SnrReport> {
        let alpha = self.hessian_alpha()?;
        if alpha.iter().flatten().any(|a| *a <= 0.0) {
            return Err(Error::Numeric("singular Hessian: some alpha is zero".into()));
        }
        let closed = self.inverse_snr_closed_form()?;
        let trace = self.inverse_snr_trace()?;
        if (closed - trace).abs() > 1e-9 * closed.abs().max(1.0) {
            return Err(Error::Numeric(format!("SNR forms disagree: closed {closed}, trace {trace}")));
        }
        let blocks = self.noise_covariance()?;
        Ok(SnrReport {
            sum_alpha: alpha.iter().map(|a| a.iter().sum()).collect(),
            covariance_blocks: blocks
                .iter()
                .map(|b| (0..b.nrows()).map(|i| b.row(i).iter().copied().collect()).collect())
                .collect(),
            alpha,
            eta_bar: 1.0 / closed,
            inverse_eta_bar_closed: closed,
            inverse_eta_bar_trace: trace,
        })
    }

    fn cells_map(&self, f: impl Fn(usize, usize) -> f64) -> Table {
        (0..self.num_contexts())
            .map(|x| (0..self.num_labels()).map(|y| f(x, y)).collect())
            .collect()
    }
}

fn inverse_snr_dense(cov: &DMatrix<f64>, hessian: &DMatrix<f64>) -> Result<f64> {
    let inv = hessian
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular Hessian".into()))?;
    Ok((cov * inv).trace())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnrReport {
    pub alpha: Table,
    pub covariance_blocks: Vec<Table>,
    pub eta_bar: f64,
    pub sum_alpha: Vec<f64>,
    pub inverse_eta_bar_closed: f64,
    pub inverse_eta_bar_trace: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReparameterizationCheck {
    pub eta_bar: f64,
    pub eta_bar_transformed: f64,
    pub condition_number: f64,
    pub relative_difference: f64,
    pub invariant: bool,
}

/// Recomputes `η̄` after `H → JᵀHJ`, `Cov → JᵀCovJ` and compares with the
/// untransformed value at relative tolerance 1e-8.
pub fn reparameterization_check(problem: &NonparametricProblem, j: &DMatrix<f64>) -> Result<ReparameterizationCheck> {
    let h = problem.hessian_matrix()?;
    let cov = problem.covariance_matrix()?;
    if j.nrows() != h.nrows() || j.ncols() != h.ncols() {
        return Err(Error::Dimension {
            expected: h.nrows(),
            got: j.nrows(),
        });
    }
    let sv = j.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond < MAX_CONDITION_NUMBER) {
        return Err(Error::invalid(format!("reparameterization is ill-conditioned (condition number {cond:.3e})")));
    }
    let eta = 1.0 / inverse_snr_dense(&cov, &h)?;
    let jt = j.transpose();
    let eta_t = 1.0 / inverse_snr_dense(&(&jt * &cov * j), &(&jt * &h * j))?;
    let rel = (eta - eta_t).abs() / eta.abs();
    Ok(ReparameterizationCheck {
        eta_bar: eta,
        eta_bar_transformed: eta_t,
        condition_number: cond,
        relative_difference: rel,
        invariant: rel <= 1e-8,
    })
}

/// Draws a random `rows × cols` table with rows uniform on the simplex.
pub fn random_table<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Table {
    (0..rows)
        .map(|_| {
            let e: Vec<f64> = (0..cols).map(|_| Exp1.sample(rng)).collect();
            let s: f64 = e.iter().sum();
            let mut row: Vec<f64> = e.iter().map(|v| v / s).collect();
            // put the rounding residue on the largest entry so the row sums to 1
            let resid = 1.0 - row.iter().sum::<f64>();
            let imax = (0..cols).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            row[imax] += resid;
            row
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub candidate: usize,
    pub eta_bar: f64,
    pub min_sum_alpha_gap: f64,
}

/// `η̄` for each candidate noise table against a fixed `p_D`.
pub fn snr_sweep(p_data: &Table, candidates: &[Table], n_scale: f64) -> Result<Vec<SweepEntry>> {
    candidates
        .iter()
        .enumerate()
        .map(|(i, pn)| {
            let p = NonparametricProblem::new(p_data.clone(), pn.clone(), n_scale)?;
            let inv = p.inverse_snr_closed_form()?;
            let gap = p
                .sum_alpha_via_f()?
                .iter()
                .map(|s| 0.5 - s)
                .fold(f64::INFINITY, f64::min);
            Ok(SweepEntry {
                candidate: i,
                eta_bar: 1.0 / inv,
                min_sum_alpha_gap: gap,
            })
        })
        .collect()
}

/// The stochastic gradient for context `x` given a positive `y` and a
/// negative `y′`: `−N[σ(−ξ_y) 1_{ỹ=y} − σ(ξ_{y′}) 1_{ỹ=y′}]`.
pub fn stochastic_gradient(problem: &NonparametricProblem, x: usize, y: usize, y_neg: usize, out: &mut [f64]) {
    let n = problem.n_scale;
    let s = &problem.scores[x];
    out.iter_mut().for_each(|v| *v = 0.0);
    out[y] -= n * math::sigmoid(-s[y]);
    out[y_neg] += n * math::sigmoid(s[y_neg]);
}

#[derive(Debug, Clone)]
pub struct MonteCarloEstimate {
    pub samples: usize,
    /// Sample mean of `ĝ` and its standard error.
    pub mean: Vec<f64>,
    pub mean_stderr: Vec<f64>,
    /// `(1/N) · mean of ĝĝᵀ` and the standard error of each entry.
    pub second_moment: DMatrix<f64>,
    pub second_moment_stderr: DMatrix<f64>,
}

/// Monte-Carlo estimate of the covariance block for context `x` at the stored
/// scores, drawing `y ∼ p_D(·|x)` and `y′ ∼ p_n(·|x)` independently.
pub fn monte_carlo_block<R: Rng + ?Sized>(
    problem: &NonparametricProblem,
    x: usize,
    samples: usize,
    rng: &mut R,
) -> Result<MonteCarloEstimate> {
    let c = problem.num_labels();
    let pd = WeightedIndex::new(&problem.p_data[x]).map_err(|e| Error::invalid(e.to_string()))?;
    let pn = WeightedIndex::new(&problem.p_noise[x]).map_err(|e| Error::invalid(e.to_string()))?;
    let mut acc = Accumulator::new(c);
    let mut g = vec![0.0; c];
    for _ in 0..samples {
        let y = pd.sample(rng);
        let yn = pn.sample(rng);
        stochastic_gradient(problem, x, y, yn, &mut g);
        acc.push(&g);
    }
    Ok(acc.finish(problem.n_scale))
}

/// Joint estimate over all cells with `x` drawn uniformly; its second moment
/// is centered, so off-block entries estimate the cross-context covariance.
pub fn monte_carlo_joint<R: Rng + ?Sized>(problem: &NonparametricProblem, samples: usize, rng: &mut R) -> Result<MonteCarloEstimate> {
    let c = problem.num_labels();
    let nx = problem.num_contexts();
    let pd: Vec<WeightedIndex<f64>> = problem
        .p_data
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| Error::invalid(e.to_string())))
        .collect::<Result<_>>()?;
    let pn: Vec<WeightedIndex<f64>> = problem
        .p_noise
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| Error::invalid(e.to_string())))
        .collect::<Result<_>>()?;
    let mut acc = Accumulator::new(c * nx);
    let mut full = vec![0.0; c * nx];
    let mut g = vec![0.0; c];
    for _ in 0..samples {
        let x = rng.gen_range(0..nx);
        let y = pd[x].sample(rng);
        let yn = pn[x].sample(rng);
        stochastic_gradient(problem, x, y, yn, &mut g);
        full.iter_mut().for_each(|v| *v = 0.0);
        full[x * c..(x + 1) * c].copy_from_slice(&g);
        acc.push(&full);
    }
    let mut est = acc.finish(1.0);
    // center: Cov = E[ggᵀ] − E[g]E[g]ᵀ
    let d = c * nx;
    for a in 0..d {
        for b in 0..d {
            est.second_moment[(a, b)] -= est.mean[a] * est.mean[b];
        }
    }
    Ok(est)
}

struct Accumulator {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    prod: DMatrix<f64>,
    prod_sq: DMatrix<f64>,
}

impl Accumulator {
    fn new(d: usize) -> Self {
        Accumulator {
            n: 0,
            sum: vec![0.0; d],
            sum_sq: vec![0.0; d],
            prod: DMatrix::zeros(d, d),
            prod_sq: DMatrix::zeros(d, d),
        }
    }

    fn push(&mut self, g: &[f64]) {
        self.n += 1;
        let nz: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0.0).collect();
        for &a in &nz {
            self.sum[a] += g[a];
            self.sum_sq[a] += g[a] * g[a];
            for &b in &nz {
                let p = g[a] * g[b];
                self.prod[(a, b)] += p;
                self.prod_sq[(a, b)] += p * p;
            }
        }
    }

    fn finish(self, n_scale: f64) -> MonteCarloEstimate {
        let n = self.n as f64;
        let d = self.sum.len();
        let se = |s: f64, sq: f64| ((sq / n - (s / n).powi(2)).max(0.0) / n).sqrt();
        MonteCarloEstimate {
            samples: self.n,
            mean: self.sum.iter().map(|s| s / n).collect(),
            mean_stderr: (0..d).map(|i| se(self.sum[i], self.sum_sq[i])).collect(),
            second_moment: self.prod.map(|v| v / n / n_scale),
            second_moment_stderr: DMatrix::from_fn(d, d, |a, b| se(self.prod[(a, b)], self.prod_sq[(a, b)]) / n_scale),
        }
    }
}

/// Pass rule for comparing a Monte-Carlo entry to its analytic value: within
/// 2% of the analytic magnitude, or within 1e-3 absolute for small entries.
pub fn mc_entry_agrees(estimate: f64, analytic: f64) -> bool {
    (estimate - analytic).abs() <= (0.02 * analytic.abs()).max(1e-3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_label(pd: [f64; 2], pn: [f64; 2]) -> NonparametricProblem {
        NonparametricProblem::new(vec![pd.to_vec()], vec![pn.to_vec()], 1.0).unwrap()
    }

    #[test]
    fn optimal_score_examples() {
        let p = two_label([0.5, 0.5], [0.5, 0.5]);
        assert_eq!(p.optimal_scores().unwrap(), vec![vec![0.0, 0.0]]);
        let p = two_label([0.8, 0.2], [0.5, 0.5]);
        let xi = p.optimal_scores().unwrap();
        assert!((xi[0][0] - 0.47000362924573558).abs() < 1e-12);
        assert!((xi[0][1] - -0.91629073187415511).abs() < 1e-12);
        for y in 0..2 {
            let ratio = math::sigmoid(xi[0][y]) / math::sigmoid(-xi[0][y]);
            assert!((ratio - p.p_data[0][y] / p.p_noise[0][y]).abs() < 1e-12);
        }
        let zero = NonparametricProblem::new(vec![vec![1.0, 0.0]], vec![vec![0.5, 0.5]], 1.0).unwrap();
        assert!(matches!(zero.optimal_scores(), Err(Error::Numeric(_))));
        assert!(NonparametricProblem::new(vec![vec![0.7, 0.2]], vec![vec![0.5, 0.5]], 1.0).is_err());
    }

    #[test]
    fn gradient_examples() {
        let p = two_label([0.8, 0.2], [0.5, 0.5]);
        assert!(p.expected_gradient().iter().flatten().all(|g| g.abs() < 1e-12));
        let p0 = p.clone().with_scores(vec![vec![0.0, 0.0]]).unwrap();
        let g = p0.expected_gradient();
        assert!((g[0][0] - (0.5 - 0.8) / 2.0).abs() < 1e-15);
        assert!((g[0][1] - (0.5 - 0.2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_examples() {
        let p = NonparametricProblem::new(vec![vec![0.1, 0.6, 0.3]], vec![vec![0.1, 0.6, 0.3]], 1.0).unwrap();
        let a = p.hessian_alpha().unwrap();
        assert!((a[0].iter().sum::<f64>() - 0.5).abs() < 1e-15);
        let p = two_label([0.8, 0.2], [0.5, 0.5]);
        let a = p.hessian_alpha().unwrap();
        // 0.5 σ(ln 1.6) = 0.5 · 1.6/2.6, 0.5 σ(ln 0.4) = 0.5 · 0.4/1.4
        assert!((a[0][0] - 0.8 / 2.6).abs() < 1e-15);
        assert!((a[0][1] - 0.2 / 1.4).abs() < 1e-15);
        assert!((a[0][0] - 0.3077).abs() < 1e-4 && (a[0][1] - 0.1429).abs() < 1e-4);
    }

    #[test]
    fn covariance_examples() {
        let p = two_label([0.5, 0.5], [0.5, 0.5]);
        let c = &p.noise_covariance().unwrap()[0];
        assert!((c[(0, 0)] - 0.125).abs() < 1e-15);
        assert!((c[(0, 1)] + 0.125).abs() < 1e-15);
        assert!((c[(1, 1)] - 0.125).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = NonparametricProblem::new(random_table(2, 5, &mut rng), random_table(2, 5, &mut rng), 3.0).unwrap();
            let alpha = p.hessian_alpha().unwrap();
            for (b, a) in p.noise_covariance().unwrap().iter().zip(&alpha) {
                assert!((b - b.transpose()).abs().max() < 1e-12);
                let expected = 3.0 * (a.iter().sum::<f64>() - 2.0 * a.iter().map(|v| v * v).sum::<f64>());
                assert!((b.trace() - expected).abs() < 1e-12);
                assert!(b.trace() >= 0.0);
            }
        }
    }

    #[test]
    fn snr_examples() {
        let p = two_label([0.5, 0.5], [0.5, 0.5]);
        assert!((p.snr().unwrap().eta_bar - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pd = random_table(4, 6, &mut rng);
        let p = NonparametricProblem::new(pd.clone(), pd, 2.5).unwrap();
        assert!((p.inverse_snr_closed_form().unwrap() - 2.5 * 4.0 * 5.0).abs() < 1e-9);
        let uni = two_label([0.8, 0.2], [0.5, 0.5]).snr().unwrap().eta_bar;
        let adv = two_label([0.8, 0.2], [0.8, 0.2]).snr().unwrap().eta_bar;
        assert!(uni < adv);
    }

    #[test]
    fn trace_and_closed_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = NonparametricProblem::new(random_table(3, 4, &mut rng), random_table(3, 4, &mut rng), 1.7).unwrap();
            let r = p.snr().unwrap();
            assert!((r.inverse_eta_bar_closed - r.inverse_eta_bar_trace).abs() < 1e-9);
        }
    }

    #[test]
    fn sum_alpha_examples() {
        let p = two_label([0.3, 0.7], [0.3, 0.7]);
        assert!((p.sum_alpha_via_f().unwrap()[0] - 0.5).abs() < 1e-15);
        let p = two_label([0.5, 0.5], [0.99, 0.01]);
        let s = p.sum_alpha_via_f().unwrap()[0];
        assert!(s < 0.5);
        // direct: 0.99 f(0.5/0.99) + 0.01 f(50)
        let f = |z: f64| z / (1.0 + z);
        assert!((s - (0.99 * f(0.5 / 0.99) + 0.01 * f(50.0))).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let p = NonparametricProblem::new(random_table(2, 5, &mut rng), random_table(2, 5, &mut rng), 1.0).unwrap();
            let via_f = p.sum_alpha_via_f().unwrap();
            let rows: Vec<f64> = p.hessian_alpha().unwrap().iter().map(|r| r.iter().sum()).collect();
            for (a, b) in via_f.iter().zip(&rows) {
                assert!((a - b).abs() < 1e-12);
                assert!(*a <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn reparameterization_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = NonparametricProblem::new(random_table(2, 3, &mut rng), random_table(2, 3, &mut rng), 1.0).unwrap();
        let id = DMatrix::identity(6, 6);
        let r = reparameterization_check(&p, &id).unwrap();
        assert_eq!(r.eta_bar, r.eta_bar_transformed);
        assert!(reparameterization_check(&p, &(id.clone() * 2.0)).unwrap().invariant);
        let j = DMatrix::from_fn(6, 6, |i, k| if i == k { 2.0 } else { 0.0 } + rng.gen::<f64>() - 0.5);
        assert!(reparameterization_check(&p, &j).unwrap().invariant);
        let mut bad = id.clone();
        bad[(5, 5)] = 1e-9;
        assert!(matches!(reparameterization_check(&p, &bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn monte_carlo_small_run_is_consistent() {
        let p = two_label([0.5, 0.5], [0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let est = monte_carlo_block(&p, 0, 200_000, &mut rng).unwrap();
        let c = &p.noise_covariance().unwrap()[0];
        for a in 0..2 {
            assert!(est.mean[a].abs() < 4.0 * est.mean_stderr[a]);
            for b in 0..2 {
                assert!(mc_entry_agrees(est.second_moment[(a, b)], c[(a, b)]));
            }
        }
    }

    #[test]
    fn problem_json_round_trip() {
        let p = two_label([0.8, 0.2], [0.5, 0.5]);
        let s = serde_json::to_string(&p).unwrap();
        let back: NonparametricProblem = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let minimal: NonparametricProblem = serde_json::from_str(r#"{"p_data": [[0.5, 0.5]], "p_noise": [[0.5, 0.5]]}"#).unwrap();
        assert_eq!(minimal.n_scale, 1.0);
        assert!(minimal.scores.is_empty());
    }
}
