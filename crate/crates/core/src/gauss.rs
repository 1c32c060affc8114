//! Multivariate-Gaussian primitives: log-density through a Cholesky factor,
//! an underflow-safe log-sum, and conditioning/marginalization of a
//! partitioned Gaussian.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// ln(2π)
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative size of the diagonal jitter tried when a factorization fails.
pub const JITTER: f64 = 1e-10;

/// Replace `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

/// Factor symmetric `a` into the lower triangle of `l` (same shape) and
/// return `ln det a`. If the plain factorization fails it is retried once
/// with `1e-10 · trace / n` added to the diagonal; `None` if that fails too.
pub fn cholesky_into(a: &DMatrix<f64>, l: &mut DMatrix<f64>) -> Option<f64> {
    if let Some(log_det) = factor(a, 0.0, l) {
        return Some(log_det);
    }
    let n = a.nrows().max(1) as f64;
    let jitter = JITTER * a.trace() / n;
    if jitter > 0.0 && jitter.is_finite() {
        return factor(a, jitter, l);
    }
    None
}

/// Cholesky–Banachiewicz on `a + jitter I`.
fn factor(a: &DMatrix<f64>, jitter: f64, l: &mut DMatrix<f64>) -> Option<f64> {
    let n = a.nrows();
    if a.ncols() != n || l.shape() != (n, n) || a.iter().any(|x| !x.is_finite()) {
        return None;
    }
    l.fill(0.0);
    let mut log_det = 0.0;
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            if i == j {
                s += jitter;
                if !(s > 0.0) {
                    return None;
                }
                let d = s.sqrt();
                l[(i, i)] = d;
                log_det += 2.0 * d.ln();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    log_det.is_finite().then_some(log_det)
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`, plus `ln det A`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    log_det: f64,
}

impl CholeskyFactor {
    /// Factor a symmetric matrix. If the plain factorization fails, retry once
    /// with `1e-10 · trace / n` added to the diagonal; a second failure is a
    /// [`Error::SingularCovariance`] carrying `what()` for context.
    pub fn new(a: &DMatrix<f64>, what: impl FnOnce() -> String) -> Result<Self> {
        let mut l = DMatrix::zeros(a.nrows(), a.nrows());
        match cholesky_into(a, &mut l) {
            Some(log_det) => Ok(CholeskyFactor { l, log_det }),
            None => Err(Error::SingularCovariance(what())),
        }
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `L⁻¹ x`
    pub fn whiten(&self, x: &DVector<f64>) -> DVector<f64> {
        self.l.solve_lower_triangular(x).expect("Cholesky diagonal is nonzero")
    }

    /// `xᵀ A⁻¹ x`
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        self.whiten(x).norm_squared()
    }

    /// `A⁻¹ x`
    pub fn solve(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = self.whiten(x);
        self.l.tr_solve_lower_triangular_mut(&mut y);
        y
    }

    /// `A⁻¹ X`
    pub fn solve_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = self.l.solve_lower_triangular(x).expect("Cholesky diagonal is nonzero");
        self.l.tr_solve_lower_triangular_mut(&mut y);
        y
    }

    /// `ln N(x | mean, A)` given the residual `x − mean`.
    pub fn log_density_of_residual(&self, resid: &DVector<f64>) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + self.quad_form(resid))
    }
}

/// `ln N(x | mean, covar)`.
pub fn log_normal_density(x: &DVector<f64>, mean: &DVector<f64>, covar: &DMatrix<f64>) -> Result<f64> {
    let d = x.len();
    if mean.len() != d || covar.nrows() != d || covar.ncols() != d {
        return Err(Error::Dimension(format!(
            "point has length {d}, mean {}, covariance {}x{}",
            mean.len(),
            covar.nrows(),
            covar.ncols()
        )));
    }
    let f = CholeskyFactor::new(covar, || format!("covariance {covar:?} is not positive definite"))?;
    Ok(f.log_density_of_residual(&(x - mean)))
}

/// `ln Σ exp(values)`, with `−∞` entries treated as absent terms.
///
/// The largest term is factored out so every exponentiated ratio lies in
/// `(0, 1]`; the remaining sum is accumulated with compensation and added
/// through `ln_1p`. Returns `−∞` when every entry is `−∞`.
///
/// # Panics
/// Panics on an empty slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "logsumexp of an empty list");
    let mut imax = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[imax] || values[imax].is_nan() {
            imax = i;
        }
    }
    let max = values[imax];
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    // Neumaier summation of exp(v - max) over the non-maximal terms.
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (i, &v) in values.iter().enumerate() {
        if i == imax || v == f64::NEG_INFINITY {
            continue;
        }
        let t = (v - max).exp();
        let s = sum + t;
        if sum.abs() >= t.abs() {
            comp += (sum - s) + t;
        } else {
            comp += (t - s) + sum;
        }
        sum = s;
    }
    max + (sum + comp).ln_1p()
}

/// The shift constant `c` that moves every `exp(v + c)` above the smallest
/// normal double while keeping the K-term sum below the largest double:
/// `c = min(ln DBL_MIN − min v, ln DBL_MAX − max v − ln K)`.
///
/// `−∞` entries are ignored; returns `None` when no finite entry exists.
pub fn range_shift(values: &[f64]) -> Option<f64> {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi, k) = finite.fold((f64::INFINITY, f64::NEG_INFINITY, 0usize), |(lo, hi, k), v| {
        (lo.min(v), hi.max(v), k + 1)
    });
    if k == 0 {
        return None;
    }
    let under = f64::MIN_POSITIVE.ln() - lo;
    let over = f64::MAX.ln() - hi - (k as f64).ln();
    Some(under.min(over))
}

/// `ln Σ exp(values)` evaluated literally as `ln Σ exp(v + c) − c` with
/// `c` from [`range_shift`].
///
/// Overflow- and underflow-safe, but the shifted exponent `v + c` is rounded
/// at the magnitude of `c`, so this loses digits when `|c| ≫ |v|`. Prefer
/// [`logsumexp`].
pub fn logsumexp_shifted(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "logsumexp of an empty list");
    let Some(c) = range_shift(values) else {
        return values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    };
    let s: f64 = values.iter().filter(|v| v.is_finite()).map(|v| (v + c).exp()).sum();
    s.ln() - c
}

/// A plain Gaussian `N(mean, covar)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub covar: DMatrix<f64>,
}

/// A Gaussian over `(v₁, v₂)` stored as mean and covariance blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedGaussian {
    pub m1: DVector<f64>,
    pub m2: DVector<f64>,
    pub v11: DMatrix<f64>,
    pub v12: DMatrix<f64>,
    pub v22: DMatrix<f64>,
}

impl PartitionedGaussian {
    /// Split a joint Gaussian after its first `d1` coordinates.
    pub fn from_joint(mean: &DVector<f64>, covar: &DMatrix<f64>, d1: usize) -> Result<Self> {
        let d = mean.len();
        if d1 > d || covar.nrows() != d || covar.ncols() != d {
            return Err(Error::Dimension(format!(
                "cannot split a {d}-dimensional Gaussian at {d1}"
            )));
        }
        let d2 = d - d1;
        Ok(PartitionedGaussian {
            m1: mean.rows(0, d1).into_owned(),
            m2: mean.rows(d1, d2).into_owned(),
            v11: covar.view((0, 0), (d1, d1)).into_owned(),
            v12: covar.view((0, d1), (d1, d2)).into_owned(),
            v22: covar.view((d1, d1), (d2, d2)).into_owned(),
        })
    }

    pub fn d1(&self) -> usize {
        self.m1.len()
    }

    pub fn d2(&self) -> usize {
        self.m2.len()
    }

    /// Reassemble the joint mean and covariance; `V₂₁` is `V₁₂ᵀ`.
    pub fn assemble(&self) -> Gaussian {
        let (d1, d2) = (self.d1(), self.d2());
        let d = d1 + d2;
        let mut mean = DVector::zeros(d);
        mean.rows_mut(0, d1).copy_from(&self.m1);
        mean.rows_mut(d1, d2).copy_from(&self.m2);
        let mut covar = DMatrix::zeros(d, d);
        covar.view_mut((0, 0), (d1, d1)).copy_from(&self.v11);
        covar.view_mut((0, d1), (d1, d2)).copy_from(&self.v12);
        covar.view_mut((d1, 0), (d2, d1)).copy_from(&self.v12.transpose());
        covar.view_mut((d1, d1), (d2, d2)).copy_from(&self.v22);
        Gaussian { mean, covar }
    }

    /// `p(v₂)`: the marginal over the second block.
    pub fn marginalize(&self) -> Gaussian {
        Gaussian {
            mean: self.m2.clone(),
            covar: self.v22.clone(),
        }
    }

    /// Factor `V₂₂` once so [`Conditioner::condition`] can be applied to many
    /// values of `v₂`.
    pub fn conditioner(&self) -> Result<Conditioner<'_>> {
        if self.v12.nrows() != self.d1() || self.v12.ncols() != self.d2() || self.v22.nrows() != self.d2() {
            return Err(Error::Dimension("malformed partition blocks".into()));
        }
        let factor = CholeskyFactor::new(&self.v22, || "V22 is not positive definite".into())?;
        // gain = V12 V22⁻¹
        let gain = factor.solve_matrix(&self.v12.transpose()).transpose();
        let mut covar = &self.v11 - &gain * self.v12.transpose();
        symmetrize(&mut covar);
        Ok(Conditioner {
            g: self,
            gain,
            covar,
            factor,
        })
    }

    /// `p(v₁ | v₂)`.
    pub fn condition(&self, v2: &DVector<f64>) -> Result<Gaussian> {
        self.conditioner()?.condition(v2)
    }
}

/// Conditioning on `v₂` with a cached factorization of `V₂₂`.
#[derive(Debug, Clone)]
pub struct Conditioner<'a> {
    g: &'a PartitionedGaussian,
    gain: DMatrix<f64>,
    covar: DMatrix<f64>,
    factor: CholeskyFactor,
}

impl Conditioner<'_> {
    pub fn condition(&self, v2: &DVector<f64>) -> Result<Gaussian> {
        if v2.len() != self.g.d2() {
            return Err(Error::Dimension(format!(
                "conditioning value has length {}, expected {}",
                v2.len(),
                self.g.d2()
            )));
        }
        let mean = &self.g.m1 + &self.gain * (v2 - &self.g.m2);
        Ok(Gaussian {
            mean,
            covar: self.covar.clone(),
        })
    }

    /// `ln det V₂₂`
    pub fn log_det_v22(&self) -> f64 {
        self.factor.log_det()
    }
}
