//! The training objective and its analytic gradients.
//!
//! Per sampled triple (u, i, j) the maximized quantity is the closed-form log
//! likelihood of the observed rating-difference direction, plus Gaussian log
//! priors on the factor matrices and inverse-Wishart log priors on the three
//! covariances the triple touches. Gradients are hand-derived; central finite
//! differences are the acceptance oracle for every parameter group.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::Triple;
use crate::dirlik::QuadStats;
use crate::model::{covariance_from_factor, PmtfModel};
use crate::special::{erfcx_recip, ln_multivariate_gamma};
use crate::{DmrError, Result};

/// Gradients of one triple's objective with respect to every parameter group
/// it touches: the user row, the two item rows, the aspect matrix, and the
/// three covariance factors.
#[derive(Debug, Clone)]
pub struct PairGradients {
    pub g_u: DVector<f64>,
    pub g_vi: DVector<f64>,
    pub g_vj: DVector<f64>,
    pub g_w: DMatrix<f64>,
    pub g_lu: DMatrix<f64>,
    pub g_li: DMatrix<f64>,
    pub g_lj: DMatrix<f64>,
}

/// Log-prior values of the parameters one triple touches. Normalization
/// constants are included, so these are proper log densities.
#[derive(Debug, Clone, Copy)]
pub struct PriorTerms {
    pub niw_user: f64,
    pub niw_item_i: f64,
    pub niw_item_j: f64,
    pub gauss_user: f64,
    pub gauss_item_i: f64,
    pub gauss_item_j: f64,
    pub gauss_aspects: f64,
}

impl PriorTerms {
    pub fn total(&self) -> f64 {
        self.niw_user
            + self.niw_item_i
            + self.niw_item_j
            + self.gauss_user
            + self.gauss_item_i
            + self.gauss_item_j
            + self.gauss_aspects
    }
}

fn masked_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Everything the gradient chains need from the likelihood of one pair:
/// the objective term, the gradient with respect to the predicted difference
/// (expanded to full K), and the entrywise gradient with respect to the pair
/// covariance (expanded to full K×K).
struct LikelihoodPieces {
    term: f64,
    g_dhat: DVector<f64>,
    g_sigma: DMatrix<f64>,
}

/// The stable rewrite of (2/√π)·e^{−Z²}/(1−erf(Z)); underflows to 0 for very
/// negative Z and grows like 2Z for large positive Z.
fn stable_gradient_factor(z: f64) -> f64 {
    2.0 / std::f64::consts::PI.sqrt() * erfcx_recip(z)
}

fn likelihood_pieces(model: &PmtfModel, triple: &Triple) -> Result<LikelihoodPieces> {
    let k = model.hyper.num_aspects();
    let xi = model.hyper.margin;
    let dhat_full = model.predict_difference(triple.user, triple.item_i, triple.item_j)?;
    let sigma_full = model.pair_covariance(triple.user, triple.item_i, triple.item_j)?;
    let idx = masked_indices(&triple.direction.mask);
    if idx.is_empty() {
        return Err(DmrError::EmptyComparison);
    }
    let kp = idx.len();
    let d = DVector::from_iterator(kp, idx.iter().map(|&i| triple.direction.d[i]));
    let dhat = DVector::from_iterator(kp, idx.iter().map(|&i| dhat_full[i]));
    let sigma = DMatrix::from_fn(kp, kp, |r, c| sigma_full[(idx[r], idx[c])]);

    let chol = Cholesky::new(sigma).ok_or(DmrError::CovarianceNotInvertible)?;
    let ln_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let x = chol.solve(&d);
    let y = chol.solve(&dhat);
    let a = d.dot(&x);
    let b = d.dot(&y);
    let c = dhat.dot(&y);
    if !(a.is_finite() && a > 0.0) {
        return Err(DmrError::ZeroDifference);
    }
    let z = (a / 2.0).sqrt() * (xi - b / a);
    let term = -0.5 * (ln_det + c - b * b / a + (2.0 * a).ln()) - z * z
        + crate::special::ln_erfcx(z);

    let sqrt_2a = (2.0 * a).sqrt();
    let g = stable_gradient_factor(z);

    // ∂term/∂d̂ on the observed aspects, then zero-padded to full K.
    let g_dhat_masked = -&y + &x * (b / a) + &x * (g / sqrt_2a);
    let mut g_dhat = DVector::zeros(k);
    for (r, &i) in idx.iter().enumerate() {
        g_dhat[i] = g_dhat_masked[r];
    }

    // Entrywise ∂term/∂Σ on the observed block. Built from the identities
    // ∂A/∂Σ = −xxᵀ, ∂B/∂Σ = −xyᵀ, ∂C/∂Σ = −yyᵀ, ∂ln|Σ|/∂Σ = Σ⁻¹ with
    // x = Σ⁻¹d, y = Σ⁻¹d̂, and ∂(−Z² + ln erfcx Z)/∂Z = −g.
    let p = chol.inverse();
    let xxt = &x * x.transpose();
    let xyt = &x * y.transpose();
    let yyt = &y * y.transpose();
    let dz_dsigma =
        &xxt * (-(xi / (2.0 * sqrt_2a) + b / (2.0 * a * sqrt_2a))) + &xyt * (1.0 / sqrt_2a);
    let g_sigma_masked = p * (-0.5) + &yyt * 0.5 - &xyt * (b / a)
        + &xxt * (b * b / (2.0 * a * a))
        + &xxt * (1.0 / (2.0 * a))
        - dz_dsigma * g;
    let mut g_sigma = DMatrix::zeros(k, k);
    for (r, &ir) in idx.iter().enumerate() {
        for (s, &is) in idx.iter().enumerate() {
            g_sigma[(ir, is)] = g_sigma_masked[(r, s)];
        }
    }

    Ok(LikelihoodPieces {
        term,
        g_dhat,
        g_sigma,
    })
}

/// The per-pair objective term
///
/// ```text
/// -½(ln|Σ| + C - B²/A + ln(2A)) - Z² + ln erfcx(Z)
/// ```
///
/// which differs from the pair log likelihood only by the parameter-free
/// constant (K'/2)ln 2π - ½ln π.
pub fn pair_objective_term(model: &PmtfModel, triple: &Triple) -> Result<f64> {
    Ok(likelihood_pieces(model, triple)?.term)
}

/// Gradient of the pair term with respect to the predicted difference vector,
/// on the observed aspects:
///
/// ```text
/// -Σ⁻¹d̂ + (B/A)Σ⁻¹d + [2/(√π·erfcx(Z))]·Σ⁻¹d/√(2A)
/// ```
///
/// `d`, `dhat`, and `sigma` must already be marginalized to the observed
/// aspects matching `stats` (the margin is folded into `stats.z`).
pub fn grad_wrt_dhat(
    stats: &QuadStats,
    d: &DVector<f64>,
    dhat: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if d.len() != stats.dim || dhat.len() != stats.dim || sigma.nrows() != stats.dim {
        return Err(DmrError::DimensionMismatch(format!(
            "stats were computed for dimension {}",
            stats.dim
        )));
    }
    let chol = Cholesky::new(sigma.clone()).ok_or(DmrError::CovarianceNotInvertible)?;
    let x = chol.solve(d);
    let y = chol.solve(dhat);
    let g = stable_gradient_factor(stats.z);
    Ok(-y + &x * (stats.b / stats.a) + &x * (g / (2.0 * stats.a).sqrt()))
}

/// Inverse-Wishart log density at `cov`:
///
/// ```text
/// (ν/2)ln|Ψ| - (νK/2)ln 2 - ln Γ_K(ν/2) - ((ν+K+1)/2)ln|Σ| - ½tr(ΨΣ⁻¹)
/// ```
pub fn niw_log_prior(cov: &DMatrix<f64>, nu: f64, psi: &DMatrix<f64>) -> Result<f64> {
    let k = cov.nrows();
    if cov.ncols() != k || psi.nrows() != k || psi.ncols() != k {
        return Err(DmrError::DimensionMismatch(
            "covariance and scale matrix must be square with equal size".into(),
        ));
    }
    if nu <= k as f64 - 1.0 {
        return Err(DmrError::InvalidConfig(format!(
            "degrees of freedom {nu} must exceed K-1 = {}",
            k - 1
        )));
    }
    let chol_cov = Cholesky::new(cov.clone()).ok_or(DmrError::CovarianceNotInvertible)?;
    let chol_psi = Cholesky::new(psi.clone()).ok_or(DmrError::CovarianceNotInvertible)?;
    let ln_det_cov: f64 = chol_cov.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let ln_det_psi: f64 = chol_psi.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let trace = chol_cov.solve(psi).trace();
    let kf = k as f64;
    Ok(0.5 * nu * ln_det_psi
        - 0.5 * nu * kf * std::f64::consts::LN_2
        - ln_multivariate_gamma(0.5 * nu, k)
        - 0.5 * (nu + kf + 1.0) * ln_det_cov
        - 0.5 * trace)
}

/// Entrywise gradient of [`niw_log_prior`] with respect to the covariance:
/// `½Σ⁻¹ΨΣ⁻¹ − ((ν+K+1)/2)Σ⁻¹`, symmetric for symmetric inputs. Zero exactly
/// at the mode Σ = Ψ/(ν+K+1).
pub fn niw_sigma_gradient(
    cov: &DMatrix<f64>,
    nu: f64,
    psi: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = cov.nrows();
    let chol = Cholesky::new(cov.clone()).ok_or(DmrError::CovarianceNotInvertible)?;
    let p = chol.inverse();
    Ok(&p * psi * &p * 0.5 - p * (0.5 * (nu + k as f64 + 1.0)))
}

fn gauss_log_prior(norm_squared: f64, count: usize, sigma: f64) -> f64 {
    -norm_squared / (2.0 * sigma * sigma)
        - 0.5 * count as f64 * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
}

/// Log priors of everything the triple touches.
pub fn prior_terms(model: &PmtfModel, triple: &Triple) -> Result<PriorTerms> {
    let h = &model.hyper;
    let d = h.latent_dim;
    let k = h.num_aspects();
    let u = model.u_factors.row(triple.user);
    let vi = model.v_factors.row(triple.item_i);
    let vj = model.v_factors.row(triple.item_j);
    Ok(PriorTerms {
        niw_user: niw_log_prior(&model.user_covariance(triple.user)?, h.nu, &h.psi)?,
        niw_item_i: niw_log_prior(&model.item_covariance(triple.item_i)?, h.nu, &h.psi)?,
        niw_item_j: niw_log_prior(&model.item_covariance(triple.item_j)?, h.nu, &h.psi)?,
        gauss_user: gauss_log_prior(u.norm_squared(), d, h.sigma_u),
        gauss_item_i: gauss_log_prior(vi.norm_squared(), d, h.sigma_v),
        gauss_item_j: gauss_log_prior(vj.norm_squared(), d, h.sigma_v),
        gauss_aspects: gauss_log_prior(model.w_factors.norm_squared(), k * d, h.sigma_w),
    })
}

/// The full scalar objective of one triple: pair term plus every prior term.
/// This is the function the finite-difference harness differentiates.
pub fn triple_objective(model: &PmtfModel, triple: &Triple) -> Result<f64> {
    Ok(pair_objective_term(model, triple)? + prior_terms(model, triple)?.total())
}

/// Chain-rule gradients for the factor rows, with Gaussian prior terms:
///
/// ```text
/// ∂/∂U_u = (Wᵀg) ∘ (V_i − V_j) − U_u/σ_U²
/// ∂/∂V_i = (Wᵀg) ∘ U_u − V_i/σ_V²        ∂/∂V_j = −(Wᵀg) ∘ U_u − V_j/σ_V²
/// ∂/∂W   = g·(U_u ∘ (V_i − V_j))ᵀ − W/σ_W²
/// ```
///
/// `g_dhat` is the likelihood gradient with respect to the predicted
/// difference, expanded to full K with zeros at masked-out aspects.
pub fn grad_latent(
    model: &PmtfModel,
    triple: &Triple,
    g_dhat: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DMatrix<f64>)> {
    let h = &model.hyper;
    let u = model.u_factors.row(triple.user).transpose();
    let vi = model.v_factors.row(triple.item_i).transpose();
    let vj = model.v_factors.row(triple.item_j).transpose();
    let e = &vi - &vj;
    let wg = model.w_factors.transpose() * g_dhat;
    let g_u = wg.component_mul(&e) - &u / (h.sigma_u * h.sigma_u);
    let chain_v = wg.component_mul(&u);
    let g_vi = &chain_v - &vi / (h.sigma_v * h.sigma_v);
    let g_vj = -chain_v - &vj / (h.sigma_v * h.sigma_v);
    let g_w = g_dhat * u.component_mul(&e).transpose()
        - &model.w_factors / (h.sigma_w * h.sigma_w);
    Ok((g_u, g_vi, g_vj, g_w))
}

/// Covariance-factor gradients. The likelihood part chains the entrywise
/// Σ-gradient G through Σ_uij = 2λΣ_u + (1−λ)(Σ_i + Σ_j) and LLᵀ:
///
/// ```text
/// ∂/∂L_u = 2λ(G + Gᵀ)L_u + 2·G_prior(Σ_u)L_u
/// ∂/∂L_i = (1−λ)(G + Gᵀ)L_i + 2·G_prior(Σ_i)L_i     (L_j alike)
/// ```
pub fn grad_covariance(
    model: &PmtfModel,
    triple: &Triple,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let pieces = likelihood_pieces(model, triple)?;
    covariance_chain(model, triple, &pieces.g_sigma)
}

fn covariance_chain(
    model: &PmtfModel,
    triple: &Triple,
    g_sigma: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let h = &model.hyper;
    let lam = h.lambda;
    let sym = g_sigma + g_sigma.transpose();
    let chain = |l: &DMatrix<f64>, weight: f64| -> Result<DMatrix<f64>> {
        let cov = covariance_from_factor(l, h.jitter);
        let prior = niw_sigma_gradient(&cov, h.nu, &h.psi)?;
        Ok(&sym * l * weight + prior * l * 2.0)
    };
    let g_lu = chain(&model.user_cov_factors[triple.user], 2.0 * lam)?;
    let g_li = chain(&model.item_cov_factors[triple.item_i], 1.0 - lam)?;
    let g_lj = chain(&model.item_cov_factors[triple.item_j], 1.0 - lam)?;
    Ok((g_lu, g_li, g_lj))
}

/// One-pass objective value and all gradients for one triple (likelihood and
/// priors together). This is what the trainer accumulates.
pub fn triple_gradients(model: &PmtfModel, triple: &Triple) -> Result<(f64, PairGradients)> {
    let pieces = likelihood_pieces(model, triple)?;
    let value = pieces.term + prior_terms(model, triple)?.total();
    let (g_u, g_vi, g_vj, g_w) = grad_latent(model, triple, &pieces.g_dhat)?;
    let (g_lu, g_li, g_lj) = covariance_chain(model, triple, &pieces.g_sigma)?;
    Ok((
        value,
        PairGradients {
            g_u,
            g_vi,
            g_vj,
            g_w,
            g_lu,
            g_li,
            g_lj,
        },
    ))
}

/// Parameter groups the finite-difference harness can perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    User,
    ItemI,
    ItemJ,
    Aspects,
    UserCov,
    ItemICov,
    ItemJCov,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::User,
        ParamGroup::ItemI,
        ParamGroup::ItemJ,
        ParamGroup::Aspects,
        ParamGroup::UserCov,
        ParamGroup::ItemICov,
        ParamGroup::ItemJCov,
    ];
}

/// Central finite differences of [`triple_objective`] against the analytic
/// gradient of one parameter group. Returns the worst relative error over the
/// group's entries, with the denominator floored at 1e-6 so that near-zero
/// gradients are compared absolutely.
pub fn finite_difference_check(
    group: ParamGroup,
    model: &PmtfModel,
    triple: &Triple,
    h: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(DmrError::InvalidConfig(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    let (_, grads) = triple_gradients(model, triple)?;
    let (u, i, j) = (triple.user, triple.item_i, triple.item_j);
    let entries: Vec<(f64, Box<dyn Fn(&mut PmtfModel, f64)>)> = match group {
        ParamGroup::User => (0..model.hyper.latent_dim)
            .map(|f| {
                let an = grads.g_u[f];
                let bump: Box<dyn Fn(&mut PmtfModel, f64)> =
                    Box::new(move |m, eps| m.u_factors[(u, f)] += eps);
                (an, bump)
            })
            .collect(),
        ParamGroup::ItemI => (0..model.hyper.latent_dim)
            .map(|f| {
                let an = grads.g_vi[f];
                let bump: Box<dyn Fn(&mut PmtfModel, f64)> =
                    Box::new(move |m, eps| m.v_factors[(i, f)] += eps);
                (an, bump)
            })
            .collect(),
        ParamGroup::ItemJ => (0..model.hyper.latent_dim)
            .map(|f| {
                let an = grads.g_vj[f];
                let bump: Box<dyn Fn(&mut PmtfModel, f64)> =
                    Box::new(move |m, eps| m.v_factors[(j, f)] += eps);
                (an, bump)
            })
            .collect(),
        ParamGroup::Aspects => iter_matrix(model.hyper.num_aspects(), model.hyper.latent_dim)
            .map(|(r, c)| {
                let an = grads.g_w[(r, c)];
                let bump: Box<dyn Fn(&mut PmtfModel, f64)> =
                    Box::new(move |m, eps| m.w_factors[(r, c)] += eps);
                (an, bump)
            })
            .collect(),
        ParamGroup::UserCov => iter_matrix(model.hyper.num_aspects(), model.hyper.num_aspects())
            .map(|(r, c)| {
                let an = grads.g_lu[(r, c)];
                let bump: Box<dyn Fn(&mut PmtfModel, f64)> =
                    Box::new(move |m, eps| m.user_cov_factors[u][(r, c)] += eps);
                (an, bump)
            })
            .collect(),
        ParamGroup::ItemICov => iter_matrix(model.hyper.num_aspects(), model.hyper.num_aspects())
            .map(|(r, c)| {
                let an = grads.g_li[(r, c)];
                let bump: Box<dyn Fn(&mut PmtfModel, f64)> =
                    Box::new(move |m, eps| m.item_cov_factors[i][(r, c)] += eps);
                (an, bump)
            })
            .collect(),
        ParamGroup::ItemJCov => iter_matrix(model.hyper.num_aspects(), model.hyper.num_aspects())
            .map(|(r, c)| {
                let an = grads.g_lj[(r, c)];
                let bump: Box<dyn Fn(&mut PmtfModel, f64)> =
                    Box::new(move |m, eps| m.item_cov_factors[j][(r, c)] += eps);
                (an, bump)
            })
            .collect(),
    };
    // The error is norm-relative over the group: the largest component
    // disagreement divided by the largest gradient magnitude. Comparing
    // component-wise would divide rounding noise by near-zero entries.
    let mut worst_diff = 0.0f64;
    let mut scale = 0.0f64;
    for (analytic, bump) in entries {
        let mut plus = model.clone();
        bump(&mut plus, h);
        let mut minus = model.clone();
        bump(&mut minus, -h);
        let fd = (triple_objective(&plus, triple)? - triple_objective(&minus, triple)?)
            / (2.0 * h);
        worst_diff = worst_diff.max((fd - analytic).abs());
        scale = scale.max(fd.abs()).max(analytic.abs());
    }
    Ok(worst_diff / scale.max(1e-6))
}

fn iter_matrix(rows: usize, cols: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..rows).flat_map(move |r| (0..cols).map(move |c| (r, c)))
}
