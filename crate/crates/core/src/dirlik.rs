//! Directional line-integral likelihood over multivariate Gaussians.
//!
//! A pairwise preference observation is the *direction* of the rating
//! difference `d = r_ui - r_uj`. Under a Gaussian belief `N(d̂, Σ)` about the
//! difference vector, the likelihood of that direction is the mass along the
//! ray `{γ·d : γ ≥ ξ}`:
//!
//! ```text
//! ℓ(d) = ∫_ξ^∞ N(γd | d̂, Σ) dγ
//!      = (2π)^{-K/2} |Σ|^{-1/2} exp(-½(C - B²/A)) √(π/(2A)) erfc(Z)
//! ```
//!
//! with `A = dᵀΣ⁻¹d`, `B = dᵀΣ⁻¹d̂`, `C = d̂ᵀΣ⁻¹d̂` and
//! `Z = √(A/2)(ξ - B/A)`. Everything here is computed in log space through
//! [`crate::special::ln_erfcx`], so the result stays finite for any `Z` that
//! training can reach. [`quadrature_oracle`] evaluates the same integral by
//! adaptive Gauss-Kronrod quadrature without touching the closed form, and is
//! the reference the closed form is tested against.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::special::ln_erfcx;
use crate::{DmrError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian belief about a difference vector: mean `d̂` and covariance `Σ`.
#[derive(Debug, Clone)]
pub struct GaussianSpec {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianSpec {
    /// Validates shape and symmetry. Positive definiteness is enforced where
    /// the covariance is factorized; callers composing covariances via
    /// `LLᵀ + εI` satisfy it by construction.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != covariance.ncols() || covariance.nrows() != mean.len() {
            return Err(DmrError::DimensionMismatch(format!(
                "mean has {} entries but covariance is {}x{}",
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        for r in 0..covariance.nrows() {
            for c in (r + 1)..covariance.ncols() {
                let (x, y) = (covariance[(r, c)], covariance[(c, r)]);
                if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                    return Err(DmrError::Data(format!(
                        "covariance not symmetric at ({r},{c}): {x} vs {y}"
                    )));
                }
            }
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// An observed difference vector with its per-aspect observation mask.
/// Masked-out entries of `d` are ignored by every operation.
#[derive(Debug, Clone)]
pub struct ObservedDirection {
    pub d: DVector<f64>,
    pub mask: Vec<bool>,
}

impl ObservedDirection {
    pub fn new(d: DVector<f64>, mask: Vec<bool>) -> Result<Self> {
        if d.len() != mask.len() {
            return Err(DmrError::DimensionMismatch(format!(
                "difference vector has {} entries, mask {}",
                d.len(),
                mask.len()
            )));
        }
        Ok(Self { d, mask })
    }

    /// A fully observed direction.
    pub fn dense(d: DVector<f64>) -> Self {
        let mask = vec![true; d.len()];
        Self { d, mask }
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The sub-vector of observed entries.
    pub fn masked_d(&self) -> DVector<f64> {
        let vals: Vec<f64> = self
            .mask
            .iter()
            .zip(self.d.iter())
            .filter_map(|(&m, &v)| m.then_some(v))
            .collect();
        DVector::from_vec(vals)
    }
}

/// The quadratic-form statistics of one pair, sufficient for the closed-form
/// likelihood and every gradient. `dim` is the number of observed aspects and
/// `ln_det` the log determinant of the marginalized covariance.
#[derive(Debug, Clone, Copy)]
pub struct QuadStats {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub z: f64,
    pub ln_det: f64,
    pub dim: usize,
}

fn select_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Exact Gaussian marginalization: keep the masked-in coordinates of the mean
/// and the corresponding principal submatrix of the covariance.
pub fn marginalize(spec: &GaussianSpec, mask: &[bool]) -> Result<GaussianSpec> {
    if mask.len() != spec.dim() {
        return Err(DmrError::DimensionMismatch(format!(
            "mask has {} entries, spec dimension is {}",
            mask.len(),
            spec.dim()
        )));
    }
    let idx = select_indices(mask);
    if idx.is_empty() {
        return Err(DmrError::EmptyComparison);
    }
    let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&i| spec.mean[i]));
    let cov = DMatrix::from_fn(idx.len(), idx.len(), |r, c| {
        spec.covariance[(idx[r], idx[c])]
    });
    Ok(GaussianSpec {
        mean,
        covariance: cov,
    })
}

struct ReducedPair {
    d: DVector<f64>,
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    ln_det: f64,
    dim: usize,
}

fn reduce(dir: &ObservedDirection, spec: &GaussianSpec) -> Result<ReducedPair> {
    if dir.d.len() != spec.dim() {
        return Err(DmrError::DimensionMismatch(format!(
            "direction has {} entries, spec dimension is {}",
            dir.d.len(),
            spec.dim()
        )));
    }
    let sub = marginalize(spec, &dir.mask)?;
    let d = dir.masked_d();
    let chol = Cholesky::new(sub.covariance).ok_or(DmrError::CovarianceNotInvertible)?;
    let ln_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    Ok(ReducedPair {
        dim: d.len(),
        d,
        mean: sub.mean,
        chol,
        ln_det,
    })
}

/// Computes `(A, B, C, Z)` for a pair via one Cholesky factorization of the
/// marginalized covariance (two triangular solves, no explicit inverse).
pub fn quad_stats(dir: &ObservedDirection, spec: &GaussianSpec, xi: f64) -> Result<QuadStats> {
    let red = reduce(dir, spec)?;
    let x = red.chol.solve(&red.d);
    let y = red.chol.solve(&red.mean);
    let a = red.d.dot(&x);
    let b = red.d.dot(&y);
    let c = red.mean.dot(&y);
    if !(a.is_finite() && a > 0.0) {
        return Err(DmrError::ZeroDifference);
    }
    let z = (a / 2.0).sqrt() * (xi - b / a);
    Ok(QuadStats {
        a,
        b,
        c,
        z,
        ln_det: red.ln_det,
        dim: red.dim,
    })
}

/// Log of the closed-form line-integral likelihood, computed entirely in log
/// space:
///
/// ```text
/// -(K'/2)·ln 2π - ½ln|Σ| - ½(C - B²/A) + ½ln(π/(2A)) - Z² + ln erfcx(Z)
/// ```
///
/// where `K'` counts the observed aspects. Finite for any reachable `Z` and
/// strictly decreasing in `ξ`.
pub fn log_pair_likelihood(dir: &ObservedDirection, spec: &GaussianSpec, xi: f64) -> Result<f64> {
    let stats = quad_stats(dir, spec, xi)?;
    Ok(log_likelihood_from_stats(&stats))
}

/// The same quantity as [`log_pair_likelihood`], from precomputed stats.
pub fn log_likelihood_from_stats(stats: &QuadStats) -> f64 {
    let kp = stats.dim as f64;
    -0.5 * kp * LN_2PI - 0.5 * stats.ln_det - 0.5 * (stats.c - stats.b * stats.b / stats.a)
        + 0.5 * (std::f64::consts::PI / (2.0 * stats.a)).ln()
        - stats.z * stats.z
        + ln_erfcx(stats.z)
}

// 15-point Kronrod rule with its embedded 7-point Gauss rule. Positive nodes
// only; (abscissa, Kronrod weight, Gauss weight), Gauss weight 0 at the
// Kronrod-only points.
const GK15: [(f64, f64, f64); 8] = [
    (0.991_455_371_120_813, 0.022_935_322_010_529, 0.0),
    (0.949_107_912_342_759, 0.063_092_092_629_979, 0.129_484_966_168_870),
    (0.864_864_423_359_769, 0.104_790_010_322_250, 0.0),
    (0.741_531_185_599_394, 0.140_653_259_715_525, 0.279_705_391_489_277),
    (0.586_087_235_467_691, 0.169_004_726_639_267, 0.0),
    (0.405_845_151_377_397, 0.190_350_578_064_785, 0.381_830_050_505_119),
    (0.207_784_955_007_898, 0.204_432_940_075_298, 0.0),
    (0.0, 0.209_482_141_084_728, 0.417_959_183_673_469),
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut kronrod = 0.0;
    let mut gauss = 0.0;
    for &(x, wk, wg) in &GK15 {
        if x == 0.0 {
            let v = f(center);
            kronrod += wk * v;
            gauss += wg * v;
        } else {
            let v = f(center - half * x) + f(center + half * x);
            kronrod += wk * v;
            gauss += wg * v;
        }
    }
    let integral = kronrod * half;
    let error = ((kronrod - gauss) * half).abs();
    (integral, error)
}

fn adapt<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    tol: f64,
    depth: usize,
    estimate: (f64, f64),
) -> std::result::Result<f64, f64> {
    let (integral, error) = estimate;
    if error <= tol {
        return Ok(integral);
    }
    if depth == 0 {
        return Err(error);
    }
    let mid = 0.5 * (a + b);
    let left = gk15(f, a, mid);
    let right = gk15(f, mid, b);
    match (
        adapt(f, a, mid, tol / 2.0, depth - 1, left),
        adapt(f, mid, b, tol / 2.0, depth - 1, right),
    ) {
        (Ok(l), Ok(r)) => Ok(l + r),
        (l, r) => Err(l.err().unwrap_or(0.0) + r.err().unwrap_or(0.0)),
    }
}

/// Adaptive Gauss-Kronrod integration of `f` over `[a, b]` to absolute
/// tolerance `abs_tol` (or `rel_tol` of the running estimate, whichever is
/// looser once the magnitude is known).
pub(crate) fn adaptive_integrate<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64> {
    let rough = gk15(f, a, b);
    let tol = abs_tol.max(rel_tol * rough.0.abs());
    adapt(f, a, b, tol, 48, rough).map_err(|achieved| DmrError::QuadratureNonConvergence {
        achieved,
        requested: tol,
    })
}

/// Numerically integrates `γ ↦ N(γd | d̂, Σ)` over `[ξ, ∞)` by adaptive
/// quadrature after the substitution `γ = ξ + u/(1-u)`. Shares no code with
/// the closed form; this is the oracle the closed form is verified against.
pub fn quadrature_oracle(dir: &ObservedDirection, spec: &GaussianSpec, xi: f64) -> Result<f64> {
    let red = reduce(dir, spec)?;
    let kp = red.dim as f64;
    let log_norm = -0.5 * kp * LN_2PI - 0.5 * red.ln_det;
    let integrand = move |u: f64| -> f64 {
        if u >= 1.0 {
            return 0.0;
        }
        let one_minus = 1.0 - u;
        let gamma = xi + u / one_minus;
        let x = &red.d * gamma - &red.mean;
        let solved = red.chol.solve(&x);
        let quad_form = x.dot(&solved);
        // ln N(γd|d̂,Σ) plus the ln of the substitution Jacobian 1/(1-u)².
        let ln_val = log_norm - 0.5 * quad_form - 2.0 * one_minus.ln();
        ln_val.exp()
    };
    adaptive_integrate(&integrand, 0.0, 1.0, 1e-12, 1e-10)
}
