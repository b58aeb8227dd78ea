//! Small numeric helpers shared across modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// `ln σ(z)`, accurate for large |z|.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Flips `v` so that its largest-magnitude entry is positive.
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PowerIterationConfig {
    /// Stop once the eigenvector changes by less than this (2-norm).
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PowerIterationConfig {
    fn default() -> Self {
        PowerIterationConfig {
            tolerance: 1e-9,
            max_iterations: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Eigenpairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    /// Number of components that came from an orthonormal completion because
    /// the operator had no remaining spectrum.
    pub completed: usize,
    /// Components that hit `max_iterations` before meeting the tolerance.
    pub unconverged: usize,
}

/// Top-`count` eigenpairs of a symmetric positive semidefinite operator by
/// power iteration with deflation.
///
/// `apply` must write `A v` into its second argument. Deflation is done by
/// subtracting the already-found components' contribution and by keeping each
/// iterate orthogonal to them.
pub fn top_eigenpairs<F>(dim: usize, count: usize, cfg: PowerIterationConfig, mut apply: F) -> Eigenpairs
where
    F: FnMut(&[f64], &mut [f64]),
{
    assert!(count <= dim, "cannot extract {count} eigenvectors in dimension {dim}");
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_cafe);
    let mut values: Vec<f64> = Vec::with_capacity(count);
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut completed = 0;
    let mut unconverged = 0;
    let mut scale = 0.0f64;
    let mut av = vec![0.0; dim];

    for _ in 0..count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        orthogonalize(&mut v, &vectors);
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);

        let mut lambda = 0.0;
        let mut converged = false;
        let mut vanished = false;
        for _ in 0..cfg.max_iterations {
            apply(&v, &mut av);
            for (c, &val) in vectors.iter().zip(&values) {
                let proj = dot(c, &v) * val;
                av.iter_mut().zip(c).for_each(|(a, ci)| *a -= proj * ci);
            }
            orthogonalize(&mut av, &vectors);
            let n = norm(&av);
            lambda = dot(&v, &av);
            scale = scale.max(lambda.abs());
            if n <= 1e-13 * scale.max(f64::MIN_POSITIVE) || n == 0.0 {
                vanished = true;
                break;
            }
            av.iter_mut().for_each(|x| *x /= n);
            canonical_sign(&mut av);
            let change = av
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            std::mem::swap(&mut v, &mut av);
            if change < cfg.tolerance {
                converged = true;
                break;
            }
        }

        if vanished {
            break;
        }
        if !converged {
            unconverged += 1;
        }
        apply(&v, &mut av);
        lambda = dot(&v, &av).max(lambda.min(0.0));
        values.push(lambda);
        vectors.push(v);
    }

    // Orthonormal completion from the standard basis.
    let mut basis = 0;
    while vectors.len() < count {
        let mut e = vec![0.0; dim];
        e[basis] = 1.0;
        basis += 1;
        orthogonalize(&mut e, &vectors);
        let n = norm(&e);
        if n < 1e-6 {
            continue;
        }
        e.iter_mut().for_each(|x| *x /= n);
        // second pass for numerical orthogonality
        orthogonalize(&mut e, &vectors);
        let n = norm(&e);
        e.iter_mut().for_each(|x| *x /= n);
        vectors.push(e);
        values.push(0.0);
        completed += 1;
    }

    Eigenpairs {
        values,
        vectors,
        completed,
        unconverged,
    }
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for c in basis {
        let p = dot(c, v);
        v.iter_mut().zip(c).for_each(|(x, ci)| *x -= p * ci);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_and_log_sigmoid_agree() {
        for &z in &[-800.0, -30.0, -1.0, 0.0, 0.5, 30.0, 800.0] {
            let s: f64 = sigmoid(z);
            assert!((0.0..=1.0).contains(&s));
            if s > 0.0 {
                assert!((s.ln() - log_sigmoid(z)).abs() < 1e-12 * (1.0 + z.abs()));
            }
        }
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
    }

    #[test]
    fn log_sum_exp_is_shift_invariant() {
        let v = [1000.0, 999.0, 998.5];
        let w: Vec<f64> = v.iter().map(|x| x - 1000.0).collect();
        assert!((log_sum_exp(&v) - 1000.0 - log_sum_exp(&w)).abs() < 1e-12);
    }

    #[test]
    fn power_iteration_on_diagonal_matrix() {
        let d = [1.0, 5.0, 3.0];
        let ep = top_eigenpairs(3, 3, PowerIterationConfig::default(), |v, out| {
            for i in 0..3 {
                out[i] = d[i] * v[i];
            }
        });
        assert_eq!(ep.completed, 0);
        assert!((ep.values[0] - 5.0).abs() < 1e-9);
        assert!((ep.values[1] - 3.0).abs() < 1e-9);
        assert!((ep.values[2] - 1.0).abs() < 1e-9);
        assert!((ep.vectors[0][1] - 1.0).abs() < 1e-8);
        assert!((ep.vectors[1][2] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn power_iteration_completes_rank_deficient_operator() {
        // rank one: u uᵀ with u = (1,1,0)/√2
        let ep = top_eigenpairs(3, 3, PowerIterationConfig::default(), |v, out| {
            let p = (v[0] + v[1]) / 2.0;
            out[0] = p;
            out[1] = p;
            out[2] = 0.0;
        });
        assert_eq!(ep.completed, 2);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&ep.vectors[i], &ep.vectors[j]) - expect).abs() < 1e-10);
            }
        }
    }
}
