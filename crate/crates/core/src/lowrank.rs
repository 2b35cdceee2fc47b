//! Truncated SVD re-factorization of delta matrices.
//!
//! After extraction or subtraction a delta is generally full rank. To store
//! it back as adapter factors it is truncated to `r′` singular triplets and
//! split as `B = U·√Σ`, `A = √Σ·Vᵀ`.
//!
//! Decompositions run in `f64` whatever the compute precision.

use serde::Serialize;
use thiserror::Error;

use crate::matrix::{Matrix, Real};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LowRankError {
    #[error("target rank {requested} exceeds min(d, k) = {max}")]
    RankTooLarge { requested: usize, max: usize },
    #[error("target rank must be positive")]
    ZeroRank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationResult<T> {
    /// `d×r′`
    pub b: Matrix<T>,
    /// `r′×k`
    pub a: Matrix<T>,
    /// All singular values of the input, descending.
    pub singular_values: Vec<f64>,
    pub target_rank: usize,
    /// `sqrt(Σ_{i≥r′} σᵢ² / Σ σᵢ²)`, zero for a zero matrix.
    pub rel_frobenius_error: f64,
}

impl<T: Real> TruncationResult<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        self.b.matmul(&self.a)
    }
}

/// Per-layer summary reported alongside written checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncationSummary {
    pub target_rank: usize,
    pub rel_frobenius_error: f64,
    #[serde(rename = "effective_rank_at_1e-6")]
    pub effective_rank: usize,
}

impl<T> TruncationResult<T> {
    pub fn summary(&self) -> TruncationSummary {
        TruncationSummary {
            target_rank: self.target_rank,
            rel_frobenius_error: self.rel_frobenius_error,
            effective_rank: effective_rank_of(&self.singular_values, 1e-6),
        }
    }
}

struct Decomposition {
    /// `d×n` left singular vectors, columns ordered by `sigma`.
    u: Matrix<f64>,
    sigma: Vec<f64>,
    /// `n×k`
    v_t: Matrix<f64>,
}

/// SVD with descending singular values and a fixed sign per triplet: the
/// largest-magnitude entry of each left singular vector (lowest index on
/// ties) is non-negative.
fn decompose<T: Real>(delta: &Matrix<T>) -> Decomposition {
    let (d, k) = delta.shape();
    let n = d.min(k);
    if n == 0 {
        return Decomposition { u: Matrix::zeros(d, 0), sigma: Vec::new(), v_t: Matrix::zeros(0, k) };
    }
    let m = faer::Mat::<f64>::from_fn(d, k, |i, j| delta.get(i, j).as_f64());
    let svd = m.thin_svd().expect("svd of a finite matrix");
    let (u, v, s) = (svd.U(), svd.V(), svd.S().column_vector());

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));

    let mut u_sorted = Matrix::zeros(d, n);
    let mut v_sorted = Matrix::zeros(n, k);
    let mut sigma = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for i in 0..d {
            if u[(i, src)].abs() > u[(pivot, src)].abs() {
                pivot = i;
            }
        }
        let sign = if u[(pivot, src)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            u_sorted.set(i, dst, sign * u[(i, src)]);
        }
        for j in 0..k {
            v_sorted.set(dst, j, sign * v[(j, src)]);
        }
        sigma.push(s[src].max(0.0));
    }
    Decomposition { u: u_sorted, sigma, v_t: v_sorted }
}

/// Singular values of `delta`, descending.
pub fn singular_values<T: Real>(delta: &Matrix<T>) -> Vec<f64> {
    decompose(delta).sigma
}

/// Tail-energy ratio `sqrt(Σ_{i≥r} σᵢ² / Σ σᵢ²)`; 0 when all σ are zero.
pub fn tail_energy_error(sigma: &[f64], rank: usize) -> f64 {
    let total = sigma.iter().fold(0.0, |acc, s| acc + s * s);
    if total == 0.0 {
        return 0.0;
    }
    let tail = sigma.iter().skip(rank).fold(0.0, |acc, s| acc + s * s);
    (tail / total).sqrt().min(1.0)
}

pub fn svd_truncate<T: Real>(delta: &Matrix<T>, target_rank: usize) -> Result<TruncationResult<T>, LowRankError> {
    if target_rank == 0 {
        return Err(LowRankError::ZeroRank);
    }
    let (d, k) = delta.shape();
    if target_rank > d.min(k) {
        return Err(LowRankError::RankTooLarge { requested: target_rank, max: d.min(k) });
    }
    let Decomposition { u, sigma, v_t } = decompose(delta);
    let roots: Vec<f64> = sigma[..target_rank].iter().map(|s| s.sqrt()).collect();
    let b = Matrix::from_fn(d, target_rank, |i, j| T::from_f64(u.get(i, j) * roots[j]));
    let a = Matrix::from_fn(target_rank, k, |i, j| T::from_f64(roots[i] * v_t.get(i, j)));
    let rel_frobenius_error = tail_energy_error(&sigma, target_rank);
    Ok(TruncationResult { b, a, singular_values: sigma, target_rank, rel_frobenius_error })
}

fn effective_rank_of(sigma: &[f64], tol_ratio: f64) -> usize {
    match sigma.first() {
        Some(&top) if top > 0.0 => sigma.iter().filter(|&&s| s >= tol_ratio * top).count(),
        _ => 0,
    }
}

/// Number of singular values at least `tol_ratio · σ₁`; 0 for a zero matrix.
pub fn effective_rank<T: Real>(delta: &Matrix<T>, tol_ratio: f64) -> usize {
    effective_rank_of(&singular_values(delta), tol_ratio)
}
