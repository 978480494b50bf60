//! Matrix norms, the hybrid norm, Gram matrices and coherence metrics.
//!
//! These are pure kernels: no normalization or shape policy beyond what each
//! function states. Callers that need unit-norm columns normalize first.

use ndarray::{Array2, ArrayView2};

use crate::{scalar, Error, Result, Scalar};

/// Absolute tolerance floor used when a relative tolerance would collapse to
/// zero on zero-magnitude operands.
pub const TOLERANCE_FLOOR: f64 = 1e-15;

pub(crate) fn ensure_finite<F: Scalar>(m: &ArrayView2<F>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput)
    }
}

pub(crate) fn check_alpha<F: Scalar>(alpha: F) -> Result<()> {
    if alpha < F::zero() || alpha > F::one() {
        Err(Error::AlphaOutOfRange(
            alpha.to_f64().unwrap_or(f64::NAN),
        ))
    } else {
        Ok(())
    }
}

/// Sum of squared entries, `‖M‖_F²`.
pub fn frobenius_sq<F: Scalar>(m: ArrayView2<F>) -> F {
    m.iter().map(|&v| v * v).sum()
}

/// Sum of absolute entries, `‖M‖_{1,1}`.
pub fn l11_norm<F: Scalar>(m: ArrayView2<F>) -> F {
    m.iter().map(|&v| v.abs()).sum()
}

/// Entry-wise `L_{p,q}` norm: `(Σ_i (Σ_j |z_ij|^p)^{q/p})^{1/q}`, the inner
/// sum running along each row.
///
/// `L_{2,2}` is the Frobenius norm and `L_{1,1}` the sum of absolute entries.
pub fn lpq_norm<F: Scalar>(m: ArrayView2<F>, p: F, q: F) -> Result<F> {
    ensure_finite(&m)?;
    if p < F::one() || q < F::one() {
        return Err(Error::BadExponent);
    }
    let mut outer = F::zero();
    for row in m.rows() {
        let inner: F = row.iter().map(|&v| v.abs().powf(p)).sum();
        outer = outer + inner.powf(q / p);
    }
    Ok(outer.powf(F::one() / q))
}

/// Hybrid norm `α‖M‖_F² + (1−α)‖M‖_{1,1}`.
///
/// The Frobenius term enters squared: `α = 1` gives the squared Frobenius
/// norm and `α = 0` the plain `l_{1,1}` norm.
pub fn hybrid_norm<F: Scalar>(m: ArrayView2<F>, alpha: F) -> Result<F> {
    ensure_finite(&m)?;
    check_alpha(alpha)?;
    Ok(alpha * frobenius_sq(m) + (F::one() - alpha) * l11_norm(m))
}

/// Symmetric matrix of pairwise column inner products.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<F> {
    values: Array2<F>,
}

impl<F: Scalar> GramMatrix<F> {
    /// Number of columns of the source matrix.
    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<F> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.values[[i, j]]
    }
}

/// Gram matrix `G = MᵀM`; `G[i][j]` is the inner product of columns `i`
/// and `j`. Symmetry is exact by construction (each pair is computed once).
pub fn gram<F: Scalar>(m: ArrayView2<F>) -> Result<GramMatrix<F>> {
    ensure_finite(&m)?;
    let n = m.ncols();
    let mut g = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = m.column(i).dot(&m.column(j));
            g[[i, j]] = v;
            g[[j, i]] = v;
        }
    }
    Ok(GramMatrix { values: g })
}

/// Mutual coherence: the off-diagonal Gram entry of largest magnitude,
/// `max_{i≠j} |mᵢᵀmⱼ|`.
///
/// Columns are not normalized here; with unit-norm columns the value is the
/// worst-case pairwise correlation and never exceeds one.
pub fn mutual_coherence<F: Scalar>(m: ArrayView2<F>) -> Result<F> {
    if m.ncols() < 2 {
        return Err(Error::TooFewColumns);
    }
    let g = gram(m)?;
    let n = g.size();
    let mut best = F::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            best = best.max(g.get(i, j).abs());
        }
    }
    Ok(best)
}

/// Average mutual coherence: the mean of `|mᵢᵀmⱼ|` over the `n(n−1)/2`
/// unordered column pairs.
pub fn avg_mutual_coherence<F: Scalar>(m: ArrayView2<F>) -> Result<F> {
    if m.ncols() < 2 {
        return Err(Error::TooFewColumns);
    }
    let g = gram(m)?;
    let n = g.size();
    let mut sum = F::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            sum = sum + g.get(i, j).abs();
        }
    }
    let pairs = scalar::<F>((n * (n - 1) / 2) as f64);
    Ok(sum / pairs)
}

/// Cross-block coherence `‖DkᵀDj‖_F²`, the incoherence measure between two
/// atom blocks.
pub fn cross_block_coherence<F: Scalar>(dk: ArrayView2<F>, dj: ArrayView2<F>) -> Result<F> {
    if dk.nrows() != dj.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "blocks have {} vs {} rows",
            dk.nrows(),
            dj.nrows()
        )));
    }
    let mut sum = F::zero();
    for a in dk.columns() {
        for b in dj.columns() {
            let ip = a.dot(&b);
            sum = sum + ip * ip;
        }
    }
    Ok(sum)
}
