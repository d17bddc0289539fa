//! Self-contained numerical verification: every suite draws random instances
//! from a seed, checks the production code against an independent reference
//! (quadrature, finite differences, brute-force metric computation, or a
//! closed identity), and reports the worst error it saw. The `verify`
//! subcommand runs them all; a build passes only if every suite passes.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Observation, Partition, RatingVector, Triple};
use crate::dirlik::{
    log_pair_likelihood, quad_stats, quadrature_oracle, GaussianSpec, ObservedDirection,
};
use crate::eval::{mean_average_precision, ndcg_at_k, pairwise_accuracy};
use crate::model::{Hyperparams, PmtfModel};
use crate::objective::{
    finite_difference_check, niw_log_prior, niw_sigma_gradient, triple_gradients, ParamGroup,
};
use crate::special::erf;
use crate::trainer::adagrad_step;
use crate::Result;

/// Outcome of one verification suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl SuiteReport {
    fn from_error(
        name: &'static str,
        instances: usize,
        worst_error: f64,
        tolerance: f64,
        detail: String,
    ) -> Self {
        Self {
            name,
            instances,
            worst_error,
            tolerance,
            passed: worst_error <= tolerance,
            detail,
        }
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} over {} instances, worst error {:.3e} (tolerance {:.1e}){}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.instances,
            self.worst_error,
            self.tolerance,
            if self.detail.is_empty() {
                String::new()
            } else {
                format!("; {}", self.detail)
            }
        )
    }
}

pub fn all_passed(reports: &[SuiteReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

/// Runs every suite with its default instance counts.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        quadrature_suite(seed, 1000)?,
        scalar_tail_suite(seed, 100)?,
        gradient_suite(seed, 100, 0.0)?,
        prior_gradient_suite(seed, 100)?,
        stability_suite()?,
        metric_suite(seed, 1000)?,
        antisymmetry_suite(seed, 50)?,
        cauchy_schwarz_suite(seed, 200)?,
        scale_property_suite(seed, 100)?,
        psd_update_suite(seed, 50)?,
    ])
}

fn random_spd(k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    let q = m.qr().q();
    let eigs = DVector::from_fn(k, |_, _| rng.random_range(0.3..3.0));
    let raw = &q * DMatrix::from_diagonal(&eigs) * q.transpose();
    (&raw + raw.transpose()) * 0.5
}

fn random_direction(k: usize, rng: &mut ChaCha8Rng) -> ObservedDirection {
    let mut d = DVector::from_fn(k, |_, _| rng.random_range(-2.0..2.0));
    if d.norm() < 1e-3 {
        d[0] += 1.0;
    }
    ObservedDirection::dense(d)
}

/// Closed-form likelihood against adaptive quadrature on random instances.
/// Instances whose likelihood would sink below the quadrature routine's own
/// absolute accuracy are redrawn; the comparison is only meaningful where
/// the reference is trustworthy.
pub fn quadrature_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut done = 0usize;
    let mut draws = 0usize;
    while done < instances {
        draws += 1;
        if draws > 50 * instances {
            return Err(crate::DmrError::Data(
                "quadrature suite could not draw enough well-scaled instances".into(),
            ));
        }
        let k = rng.random_range(1..=5);
        let cov = random_spd(k, &mut rng);
        let mean = DVector::from_fn(k, |_, _| rng.random_range(-1.5..1.5));
        let dir = random_direction(k, &mut rng);
        let xi = rng.random_range(0.0..1.0);
        let spec = GaussianSpec::new(mean, cov)?;
        let closed = log_pair_likelihood(&dir, &spec, xi)?.exp();
        if closed < 1e-4 {
            continue;
        }
        let oracle = quadrature_oracle(&dir, &spec, xi)?;
        let err = (closed - oracle).abs() / oracle.abs().max(1e-300);
        if err > worst {
            worst = err;
            worst_at = format!("worst at K={k}, xi={xi:.3}, likelihood {closed:.3e}");
        }
        done += 1;
    }
    Ok(SuiteReport::from_error(
        "closed form vs quadrature",
        instances,
        worst,
        1e-8,
        worst_at,
    ))
}

/// One-dimensional reduction: for scalar observations with d > 0 the
/// likelihood is (1 − Φ((ξd − μ)/σ))/d.
pub fn scalar_tail_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.random_range(0.1..3.0);
        let mu = rng.random_range(-2.0..2.0);
        let var = rng.random_range(0.2..2.5);
        let xi = rng.random_range(0.0..1.0);
        let spec = GaussianSpec::new(
            DVector::from_row_slice(&[mu]),
            DMatrix::from_row_slice(1, 1, &[var]),
        )?;
        let dir = ObservedDirection::dense(DVector::from_row_slice(&[d]));
        let got = log_pair_likelihood(&dir, &spec, xi)?.exp();
        let want = (1.0 - crate::special::normal_cdf((xi * d - mu) / var.sqrt())) / d;
        worst = worst.max((got - want).abs());
    }
    Ok(SuiteReport::from_error(
        "scalar tail identity",
        instances,
        worst,
        1e-10,
        String::new(),
    ))
}

/// A random small model plus a random triple against it, with partial aspect
/// masks roughly a third of the time.
fn random_model_and_triple(rng: &mut ChaCha8Rng) -> Result<(PmtfModel, Triple)> {
    let k = rng.random_range(2..=4);
    let d = rng.random_range(2..=3);
    let mut hyper = Hyperparams::defaults(k, d);
    hyper.margin = rng.random_range(0.0..0.3);
    hyper.lambda = rng.random_range(0.2..0.8);
    let hyper = hyper.with_prior_covariance(&random_spd(k, rng));
    let names = (0..k).map(|a| format!("a{a}")).collect();
    let factor = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-0.7..0.7))
    };
    // Lower-triangular factor with a dominant diagonal keeps the composed
    // covariance well-conditioned, which keeps finite differences clean.
    let cov_factor = |rng: &mut ChaCha8Rng| {
        DMatrix::from_fn(k, k, |r, c| {
            if r == c {
                rng.random_range(0.7..1.3)
            } else if r > c {
                rng.random_range(-0.3..0.3)
            } else {
                0.0
            }
        })
    };
    let model = PmtfModel::from_parts(
        hyper,
        names,
        factor(2, d, rng),
        factor(3, d, rng),
        factor(k, d, rng),
        vec![cov_factor(rng), cov_factor(rng)],
        vec![cov_factor(rng), cov_factor(rng), cov_factor(rng)],
    )?;
    let mask: Vec<bool> = loop {
        let m: Vec<bool> = (0..k).map(|_| rng.random_range(0.0..1.0) < 0.7).collect();
        if m.iter().any(|&b| b) {
            break m;
        }
    };
    let diff = loop {
        let v = DVector::from_fn(k, |a, _| {
            if mask[a] {
                rng.random_range(-1.5..1.5)
            } else {
                0.0
            }
        });
        if v.norm() > 0.3 {
            break v;
        }
    };
    let triple = Triple {
        user: 0,
        item_i: 0,
        item_j: 1,
        direction: ObservedDirection::new(diff, mask)?,
    };
    Ok((model, triple))
}

/// Central finite differences against every analytic gradient group. A
/// nonzero `corruption` scales the analytic user gradient before comparison
/// and must make the suite fail (negative control).
pub fn gradient_suite(seed: u64, instances: usize, corruption: f64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_group = ParamGroup::User;
    for _ in 0..instances {
        let (model, triple) = random_model_and_triple(&mut rng)?;
        for group in ParamGroup::ALL {
            let err = finite_difference_check(group, &model, &triple, h)?;
            if err > worst {
                worst = err;
                worst_group = group;
            }
        }
        if corruption != 0.0 {
            worst = worst.max(corrupted_user_gradient_error(&model, &triple, h, corruption)?);
        }
    }
    Ok(SuiteReport::from_error(
        "analytic gradients vs finite differences",
        instances,
        worst,
        1e-4,
        format!("worst group {worst_group:?}"),
    ))
}

/// Rescales the analytic user-factor gradient by (1 + corruption) and
/// reports its worst disagreement with finite differences.
fn corrupted_user_gradient_error(
    model: &PmtfModel,
    triple: &Triple,
    h: f64,
    corruption: f64,
) -> Result<f64> {
    let (_, grads) = triple_gradients(model, triple)?;
    let mut worst: f64 = 0.0;
    for f in 0..model.hyper.latent_dim {
        let analytic = grads.g_u[f] * (1.0 + corruption);
        let mut bumped = model.clone();
        bumped.u_factors[(triple.user, f)] += h;
        let plus = crate::objective::triple_objective(&bumped, triple)?;
        bumped.u_factors[(triple.user, f)] -= 2.0 * h;
        let minus = crate::objective::triple_objective(&bumped, triple)?;
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6));
    }
    Ok(worst)
}

/// Symmetric finite differences on the covariance-prior density against its
/// analytic gradient.
pub fn prior_gradient_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(2..=4);
        let cov = random_spd(k, &mut rng);
        let psi = random_spd(k, &mut rng);
        let nu = k as f64 + rng.random_range(1.0..5.0);
        let grad = niw_sigma_gradient(&cov, nu, &psi)?;
        for r in 0..k {
            for c in r..k {
                let mut plus = cov.clone();
                let mut minus = cov.clone();
                plus[(r, c)] += h;
                minus[(r, c)] -= h;
                if r != c {
                    plus[(c, r)] += h;
                    minus[(c, r)] -= h;
                }
                let fd = (niw_log_prior(&plus, nu, &psi)? - niw_log_prior(&minus, nu, &psi)?)
                    / (2.0 * h);
                let analytic = if r == c {
                    grad[(r, c)]
                } else {
                    grad[(r, c)] + grad[(c, r)]
                };
                worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6));
            }
        }
    }
    Ok(SuiteReport::from_error(
        "covariance prior gradient vs finite differences",
        instances,
        worst,
        1e-6,
        String::new(),
    ))
}

/// Builds a one-aspect model whose pair statistic Z is exactly the requested
/// value: identity covariances give Σ_pair = 2I, and the single latent
/// coordinate sets the predicted difference directly.
fn model_pinned_at_z(z: f64, xi: f64) -> Result<(PmtfModel, Triple)> {
    let mut hyper = Hyperparams::defaults(1, 1);
    hyper.margin = xi;
    let dhat = xi - 2.0 * z;
    let mut model = PmtfModel::from_parts(
        hyper,
        vec!["a0".into()],
        DMatrix::from_row_slice(1, 1, &[1.0]),
        DMatrix::from_row_slice(2, 1, &[dhat, 0.0]),
        DMatrix::from_row_slice(1, 1, &[1.0]),
        vec![DMatrix::identity(1, 1)],
        vec![DMatrix::identity(1, 1); 2],
    )?;
    model.set_identity_covariances();
    let triple = Triple {
        user: 0,
        item_i: 0,
        item_j: 1,
        direction: ObservedDirection::dense(DVector::from_row_slice(&[1.0])),
    };
    Ok((model, triple))
}

/// Sweeps Z across [−50, 50]: the objective and all gradients must stay
/// finite everywhere, while the naive ln(1 − erf(Z)) route must break down
/// near Z ≈ 6 (its argument underflows to zero).
pub fn stability_suite() -> Result<SuiteReport> {
    let xi = 0.3;
    let mut non_finite = 0usize;
    let mut checked = 0usize;
    let mut step = -50.0f64;
    while step <= 50.0 {
        // With d = 1 and Σ_pair = 2I: A = 1/2, B = d̂/2, and
        // Z = √(A/2)(ξ − B/A) = (ξ − d̂)/2.
        let (model, triple) = model_pinned_at_z(step, xi)?;
        let spec = GaussianSpec::new(
            model.predict_difference(0, 0, 1)?,
            model.pair_covariance(0, 0, 1)?,
        )?;
        let stats = quad_stats(&triple.direction, &spec, xi)?;
        debug_assert!((stats.z - step).abs() < 1e-9);
        let (value, grads) = triple_gradients(&model, &triple)?;
        let all_finite = value.is_finite()
            && grads.g_u.iter().all(|v| v.is_finite())
            && grads.g_vi.iter().all(|v| v.is_finite())
            && grads.g_vj.iter().all(|v| v.is_finite())
            && grads.g_w.iter().all(|v| v.is_finite())
            && grads.g_lu.iter().all(|v| v.is_finite())
            && grads.g_li.iter().all(|v| v.is_finite())
            && grads.g_lj.iter().all(|v| v.is_finite());
        if !all_finite {
            non_finite += 1;
        }
        checked += 1;
        step += 0.25;
    }
    // The unstable reference: where does ln(1 − erf(Z)) stop being finite?
    let mut naive_breaks_at = f64::INFINITY;
    let mut z = 0.0f64;
    while z <= 10.0 {
        if !(1.0 - erf(z)).ln().is_finite() {
            naive_breaks_at = z;
            break;
        }
        z += 0.05;
    }
    let naive_broke_in_time = naive_breaks_at <= 6.5;
    let mut report = SuiteReport::from_error(
        "stability across extreme Z",
        checked,
        non_finite as f64,
        0.0,
        format!("naive ln(1-erf(Z)) breaks at Z = {naive_breaks_at:.2}"),
    );
    report.passed = report.passed && naive_broke_in_time;
    Ok(report)
}

/// Reference DCG by repeated selection: pick the highest-scoring remaining
/// item (lowest index on ties), accumulate discounted gain.
fn selection_dcg(scores: &[f64], gains: &[f64], k: usize) -> f64 {
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut total = 0.0;
    for rank in 1..=k.min(scores.len()) {
        let best = remaining
            .iter()
            .copied()
            .max_by(|&a, &b| {
                scores[a]
                    .partial_cmp(&scores[b])
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .unwrap();
        remaining.retain(|&i| i != best);
        total += gains[best] / ((rank + 1) as f64).log2();
    }
    total
}

fn reference_ndcg(scores: &[f64], gains: &[f64], k: usize) -> f64 {
    let ideal = selection_dcg(gains, gains, k);
    if ideal == 0.0 {
        return 1.0;
    }
    selection_dcg(scores, gains, k) / ideal
}

fn reference_map(users: &[(Vec<f64>, Vec<bool>)]) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for (scores, relevant) in users {
        if !relevant.iter().any(|&r| r) {
            continue;
        }
        let mut remaining: Vec<usize> = (0..scores.len()).collect();
        let mut hits = 0.0;
        let mut sum = 0.0;
        for rank in 1..=scores.len() {
            let best = remaining
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    scores[a]
                        .partial_cmp(&scores[b])
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .unwrap();
            remaining.retain(|&i| i != best);
            if relevant[best] {
                hits += 1.0;
                sum += hits / rank as f64;
            }
        }
        total += sum / relevant.iter().filter(|&&r| r).count() as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// A three-item fixture whose pairwise accuracy is exactly 2/3: the model
/// inverts one of the three ground-truth orders.
fn pairwise_fixture_error() -> Result<f64> {
    let hyper = Hyperparams::defaults(1, 1);
    let model = PmtfModel::from_parts(
        hyper,
        vec!["Overall".into()],
        DMatrix::from_row_slice(1, 1, &[1.0]),
        DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 0.0]),
        DMatrix::from_row_slice(1, 1, &[1.0]),
        vec![DMatrix::identity(1, 1)],
        vec![DMatrix::identity(1, 1); 3],
    )?;
    let obs = |item: usize, rating: f64| -> Result<Observation> {
        Ok(Observation {
            user: 0,
            item,
            ratings: RatingVector::new(vec![Some(rating)])?,
            partition: Partition::Train,
        })
    };
    let dataset = Dataset::new(
        vec!["Overall".into()],
        vec!["u".into()],
        vec!["a".into(), "b".into(), "c".into()],
        vec![obs(0, 5.0)?, obs(1, 3.0)?, obs(2, 1.0)?],
        None,
    )?;
    let got = pairwise_accuracy(&model, &dataset, Partition::Train)?;
    Ok((got - 2.0 / 3.0).abs())
}

/// Production ranking metrics against selection-based references on random
/// instances with deliberate score ties.
pub fn metric_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..=20);
        // Quantized scores force ties; integer gains include zeros.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 * 0.5).collect();
        let gains: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let k = rng.random_range(1..=n);
        let got = ndcg_at_k(&scores, &gains, k)?;
        worst = worst.max((got - reference_ndcg(&scores, &gains, k)).abs());

        let num_users = rng.random_range(1..=4);
        let users: Vec<(Vec<f64>, Vec<bool>)> = (0..num_users)
            .map(|_| {
                let m = rng.random_range(1..=12);
                let s: Vec<f64> = (0..m).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
                let r: Vec<bool> = (0..m).map(|_| rng.random_range(0.0..1.0) < 0.4).collect();
                (s, r)
            })
            .collect();
        let got = mean_average_precision(&users)?;
        worst = worst.max((got - reference_map(&users)).abs());
    }
    worst = worst.max(pairwise_fixture_error()?);
    Ok(SuiteReport::from_error(
        "ranking metrics vs brute-force references",
        instances,
        worst,
        1e-12,
        String::new(),
    ))
}

/// Swapping the two items negates the predicted difference exactly.
pub fn antisymmetry_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (model, _) = random_model_and_triple(&mut rng)?;
        let fwd = model.predict_difference(0, 0, 1)?;
        let rev = model.predict_difference(0, 1, 0)?;
        worst = worst.max((fwd + rev).amax());
    }
    Ok(SuiteReport::from_error(
        "predicted difference antisymmetry",
        instances,
        worst,
        0.0,
        String::new(),
    ))
}

/// B² ≤ A·C for the quadratic forms of any instance, since they are inner
/// products under the same inverse covariance.
pub fn cauchy_schwarz_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(6));
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(1..=5);
        let cov = random_spd(k, &mut rng);
        let mean = DVector::from_fn(k, |_, _| rng.random_range(-2.0..2.0));
        let dir = random_direction(k, &mut rng);
        let spec = GaussianSpec::new(mean, cov)?;
        let stats = quad_stats(&dir, &spec, rng.random_range(0.0..1.0))?;
        let violation = (stats.b * stats.b - stats.a * stats.c) / (stats.a * stats.c).abs().max(1e-12);
        worst = worst.max(violation);
    }
    Ok(SuiteReport::from_error(
        "Cauchy-Schwarz on quadratic forms",
        instances,
        worst,
        1e-12,
        String::new(),
    ))
}

/// Stretching the observed difference by c > 0 scales the likelihood by 1/c
/// once the margin is stretched the same way; with zero margin the 1/c
/// factor alone relates the two.
pub fn scale_property_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(1..=4);
        let cov = random_spd(k, &mut rng);
        let mean = DVector::from_fn(k, |_, _| rng.random_range(-1.5..1.5));
        let spec = GaussianSpec::new(mean, cov)?;
        let dir = random_direction(k, &mut rng);
        let c = rng.random_range(0.1..10.0);
        let scaled = ObservedDirection::dense(&dir.d * c);

        let base = log_pair_likelihood(&dir, &spec, 0.0)?;
        let stretched = log_pair_likelihood(&scaled, &spec, 0.0)?;
        worst = worst.max((stretched - (base - c.ln())).abs());

        let xi = rng.random_range(0.0..0.8);
        let base = log_pair_likelihood(&dir, &spec, c * xi)?;
        let stretched = log_pair_likelihood(&scaled, &spec, xi)?;
        worst = worst.max((stretched - (base - c.ln())).abs());
    }
    Ok(SuiteReport::from_error(
        "ray scale property of the likelihood",
        instances,
        worst,
        1e-10,
        String::new(),
    ))
}

/// Covariances composed from factor matrices stay positive definite no
/// matter how the optimizer moves the factors.
pub fn psd_update_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(8));
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (mut model, _) = random_model_and_triple(&mut rng)?;
        let k = model.hyper.num_aspects();
        let mut acc = DMatrix::zeros(k, k);
        for _ in 0..5 {
            let grad = DMatrix::from_fn(k, k, |_, _| rng.random_range(-3.0..3.0));
            adagrad_step(&mut model.user_cov_factors[0], &grad, &mut acc, 0.5, 1e-8)?;
        }
        for cov in [
            model.user_covariance(0)?,
            model.item_covariance(0)?,
            model.pair_covariance(0, 0, 1)?,
        ] {
            let min_eig = cov
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .fold(f64::INFINITY, |m, &v| m.min(v));
            worst = worst.max(model.hyper.jitter - min_eig);
        }
    }
    Ok(SuiteReport::from_error(
        "positive definiteness after factor updates",
        instances,
        worst,
        1e-10,
        String::new(),
    ))
}
