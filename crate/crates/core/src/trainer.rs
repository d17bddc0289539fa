//! Two-phase stochastic training: bootstrap-sampled rating-difference
//! triples, AdaGrad ascent on the log posterior, factor updates and
//! covariance updates on alternating fresh batches, early stopping on
//! validation NDCG.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand::distr::weighted::WeightedIndex;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, Partition, Triple};
use crate::dirlik::{self, GaussianSpec, ObservedDirection};
use crate::eval::{rank_metrics, EvalConfig};
use crate::model::{Hyperparams, PmtfModel};
use crate::objective::{pair_objective_term, triple_gradients, PairGradients};
use crate::{DmrError, Result};

/// Everything the training loop needs to know. `latent_dim`, `margin`, and
/// `lambda` feed the model hyperparameters; the rest shapes the loop.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Triples per phase per iteration.
    pub batch_size: usize,
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Integration margin ξ. Values above 0.5 turn on gradient clipping.
    pub margin: f64,
    /// User-side covariance weight λ.
    pub lambda: f64,
    pub latent_dim: usize,
    pub seed: u64,
    /// Validation cadence in iterations.
    pub eval_every: usize,
    /// Stop after this many validation checks without improvement.
    pub patience: usize,
    /// Compute batch gradients in parallel but reduce them in sample order
    /// (bitwise reproducible). Turning this off allows unordered reduction.
    pub deterministic: bool,
    /// Also draw rated-versus-unrated triples (half the batch). Off by
    /// default; co-rated pairs are the evaluated path.
    pub implicit_triples: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 500,
            max_iters: 2000,
            learning_rate: 0.03,
            margin: 0.2,
            lambda: 0.5,
            latent_dim: 10,
            seed: 42,
            eval_every: 100,
            patience: 5,
            deterministic: true,
            implicit_triples: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.max_iters == 0
            || self.eval_every == 0
            || self.patience == 0
            || self.latent_dim == 0
        {
            return Err(DmrError::InvalidConfig(
                "batch_size, max_iters, eval_every, patience, and latent_dim must be positive"
                    .into(),
            ));
        }
        if !(self.learning_rate > 0.0) && self.learning_rate != 0.0 {
            return Err(DmrError::InvalidConfig(format!(
                "learning rate {} must be nonnegative",
                self.learning_rate
            )));
        }
        if self.margin < 0.0 || !self.margin.is_finite() {
            return Err(DmrError::InvalidConfig(format!(
                "margin {} must be finite and nonnegative",
                self.margin
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(DmrError::InvalidConfig(format!(
                "lambda {} must lie in [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Large margins destabilize gradients; flag anything past 0.5.
    pub fn margin_warning(&self) -> Option<String> {
        (self.margin > 0.5).then(|| {
            format!(
                "margin {} exceeds 0.5: expect degraded ranking quality; gradient \
                 clipping at norm {CLIP_NORM} is active",
                self.margin
            )
        })
    }
}

const CLIP_NORM: f64 = 100.0;
const ADAGRAD_EPSILON: f64 = 1e-8;
const PROBE_CAP: usize = 256;

/// Per-coordinate squared-gradient accumulators, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdaGradState {
    pub epsilon: f64,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub user_cov: Vec<DMatrix<f64>>,
    pub item_cov: Vec<DMatrix<f64>>,
}

impl AdaGradState {
    pub fn for_model(model: &PmtfModel) -> Self {
        let k = model.hyper.num_aspects();
        Self {
            epsilon: ADAGRAD_EPSILON,
            u: DMatrix::zeros(model.u_factors.nrows(), model.u_factors.ncols()),
            v: DMatrix::zeros(model.v_factors.nrows(), model.v_factors.ncols()),
            w: DMatrix::zeros(model.w_factors.nrows(), model.w_factors.ncols()),
            user_cov: vec![DMatrix::zeros(k, k); model.user_cov_factors.len()],
            item_cov: vec![DMatrix::zeros(k, k); model.item_cov_factors.len()],
        }
    }
}

/// One AdaGrad ascent step on a whole tensor: the accumulator absorbs g²
/// first, then θ += lr·g/√(acc + ε).
pub fn adagrad_step(
    params: &mut DMatrix<f64>,
    grads: &DMatrix<f64>,
    acc: &mut DMatrix<f64>,
    learning_rate: f64,
    epsilon: f64,
) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != acc.shape() {
        return Err(DmrError::DimensionMismatch(format!(
            "adagrad shapes disagree: params {:?}, grads {:?}, accumulator {:?}",
            params.shape(),
            grads.shape(),
            acc.shape()
        )));
    }
    for ((p, g), a) in params.iter_mut().zip(grads.iter()).zip(acc.iter_mut()) {
        *a += g * g;
        *p += learning_rate * g / (*a + epsilon).sqrt();
    }
    Ok(())
}

/// AdaGrad step on a single row of a parameter matrix.
fn adagrad_row_step(
    params: &mut DMatrix<f64>,
    acc: &mut DMatrix<f64>,
    row: usize,
    grad: &DVector<f64>,
    learning_rate: f64,
    epsilon: f64,
) {
    for c in 0..grad.len() {
        let g = grad[c];
        acc[(row, c)] += g * g;
        params[(row, c)] += learning_rate * g / (acc[(row, c)] + epsilon).sqrt();
    }
}

/// Precomputed sampling state: which users can produce a co-rated pair from
/// the training partition, weighted by their pair count so that every
/// eligible pair is equally likely.
pub struct TripleSampler {
    users: Vec<usize>,
    items_by_user: Vec<Vec<usize>>,
    weights: WeightedIndex<f64>,
    /// When implicit triples are on: every item the user has not rated in any
    /// partition, per eligible user.
    unrated_by_user: Vec<Vec<usize>>,
    implicit: bool,
}

impl TripleSampler {
    pub fn new(dataset: &Dataset, partition: Partition, implicit: bool) -> Result<Self> {
        let mut users = Vec::new();
        let mut items_by_user = Vec::new();
        let mut unrated_by_user = Vec::new();
        let mut weights = Vec::new();
        for user in 0..dataset.num_users() {
            let mut items: Vec<usize> = dataset
                .user_observations(user)
                .iter()
                .map(|&n| &dataset.observations()[n])
                .filter(|o| o.partition == partition)
                .map(|o| o.item)
                .collect();
            items.sort_unstable();
            if items.len() < 2 {
                continue;
            }
            let n = items.len() as f64;
            users.push(user);
            weights.push(n * (n - 1.0) / 2.0);
            if implicit {
                let unrated: Vec<usize> = (0..dataset.num_items())
                    .filter(|&i| dataset.find(user, i).is_none())
                    .collect();
                unrated_by_user.push(unrated);
            } else {
                unrated_by_user.push(Vec::new());
            }
            items_by_user.push(items);
        }
        if users.is_empty() {
            return Err(DmrError::NoComparablePairs);
        }
        let weights = WeightedIndex::new(&weights)
            .map_err(|e| DmrError::Data(format!("sampler weights: {e}")))?;
        Ok(Self {
            users,
            items_by_user,
            weights,
            unrated_by_user,
            implicit,
        })
    }

    fn draw(&self, dataset: &Dataset, rng: &mut ChaCha8Rng) -> Result<Option<Triple>> {
        let slot = rng.sample(&self.weights);
        let user = self.users[slot];
        let items = &self.items_by_user[slot];
        if self.implicit && !self.unrated_by_user[slot].is_empty() && rng.random::<bool>() {
            let item_i = items[rng.random_range(0..items.len())];
            let unrated = &self.unrated_by_user[slot];
            let item_j = unrated[rng.random_range(0..unrated.len())];
            let ratings = &dataset.find(user, item_i).unwrap().ratings;
            let k = dataset.num_aspects();
            let mask = ratings.observed_mask();
            let d = DVector::from_fn(k, |a, _| ratings.get(a).unwrap_or(0.0));
            if d.iter().all(|&v| v == 0.0) {
                return Ok(None);
            }
            return Ok(Some(Triple {
                user,
                item_i,
                item_j,
                direction: ObservedDirection::new(d, mask)?,
            }));
        }
        let a = rng.random_range(0..items.len());
        let mut b = rng.random_range(0..items.len() - 1);
        if b >= a {
            b += 1;
        }
        match dataset.make_triple(user, items[a], items[b]) {
            Ok(t) => Ok(Some(t)),
            // Pairs that share no aspect or tie everywhere carry no order
            // information; the caller redraws.
            Err(DmrError::EmptyComparison) | Err(DmrError::ZeroDifference) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Bootstrap sampling with replacement: `batch_size` triples, uniform over
/// eligible (user, item, item) combinations, redrawing the uninformative
/// ones. Deterministic for a given rng state.
pub fn sample_triples(
    dataset: &Dataset,
    sampler: &TripleSampler,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Triple>> {
    let mut out = Vec::with_capacity(batch_size);
    let mut attempts = 0usize;
    let budget = 200 * batch_size.max(1);
    while out.len() < batch_size {
        attempts += 1;
        if attempts > budget {
            return Err(DmrError::NoComparablePairs);
        }
        if let Some(t) = sampler.draw(dataset, rng)? {
            out.push(t);
        }
    }
    Ok(out)
}

/// One validation record of the training log.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub probe_objective: f64,
    pub validation_ndcg50: f64,
    pub improved: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The best-validation checkpoint.
    pub model: PmtfModel,
    pub log: Vec<TrainLogRecord>,
    pub iterations_run: usize,
    pub best_iteration: usize,
    pub best_validation: f64,
    pub initial_probe_objective: f64,
    pub best_probe_objective: f64,
}

/// The model exactly as [`train`] initializes it for this dataset and
/// config: prior covariance estimated from the training partition, factors
/// seeded from `config.seed`.
pub fn init_model(dataset: &Dataset, config: &TrainConfig) -> Result<PmtfModel> {
    config.validate()?;
    let sigma_priori = crate::data::estimate_global_covariance(dataset, Partition::Train)?;
    let mut hyper = Hyperparams::defaults(dataset.num_aspects(), config.latent_dim);
    hyper.margin = config.margin;
    hyper.lambda = config.lambda;
    let hyper = hyper.with_prior_covariance(&sigma_priori);
    PmtfModel::init(
        dataset.num_users(),
        dataset.num_items(),
        dataset.aspect_names().to_vec(),
        hyper,
        config.seed,
    )
}

/// Mean pair objective over a fixed probe batch; the training loop requires
/// it to stay finite.
fn probe_objective(model: &PmtfModel, probe: &[Triple]) -> Result<f64> {
    let mut total = 0.0;
    for t in probe {
        total += pair_objective_term(model, t)?;
    }
    Ok(total / probe.len() as f64)
}

/// On a non-finite objective, name the first offending triple and its Z.
fn divergence_detail(model: &PmtfModel, probe: &[Triple]) -> String {
    for t in probe {
        let term = pair_objective_term(model, t);
        let finite = matches!(&term, Ok(v) if v.is_finite());
        if !finite {
            let z = model
                .predict_difference(t.user, t.item_i, t.item_j)
                .ok()
                .and_then(|dhat| {
                    let cov = model.pair_covariance(t.user, t.item_i, t.item_j).ok()?;
                    let spec = GaussianSpec::new(dhat, cov).ok()?;
                    dirlik::quad_stats(&t.direction, &spec, model.hyper.margin)
                        .ok()
                        .map(|s| s.z)
                });
            return match z {
                Some(z) => format!(
                    "triple (user {}, items {} vs {}) has non-finite objective at Z = {z}",
                    t.user, t.item_i, t.item_j
                ),
                None => format!(
                    "triple (user {}, items {} vs {}) has non-finite objective and \
                     unrecoverable statistics",
                    t.user, t.item_i, t.item_j
                ),
            };
        }
    }
    "objective non-finite but every probe triple evaluates finite".into()
}

/// Batch-mean gradients bucketed by the parameter rows they touch. Latent
/// factor gradients live in `u_rows`/`v_rows`/`w`; covariance factor
/// gradients in `user_cov`/`item_cov`.
#[derive(Clone)]
struct BatchGradients {
    u_rows: BTreeMap<usize, DVector<f64>>,
    v_rows: BTreeMap<usize, DVector<f64>>,
    w: DMatrix<f64>,
    user_cov: BTreeMap<usize, DMatrix<f64>>,
    item_cov: BTreeMap<usize, DMatrix<f64>>,
}

fn add_row(map: &mut BTreeMap<usize, DVector<f64>>, key: usize, grad: &DVector<f64>) {
    map.entry(key)
        .and_modify(|g| *g += grad)
        .or_insert_with(|| grad.clone());
}

fn add_mat(map: &mut BTreeMap<usize, DMatrix<f64>>, key: usize, grad: &DMatrix<f64>) {
    map.entry(key)
        .and_modify(|g| *g += grad)
        .or_insert_with(|| grad.clone());
}

impl BatchGradients {
    fn empty(model: &PmtfModel) -> Self {
        Self {
            u_rows: BTreeMap::new(),
            v_rows: BTreeMap::new(),
            w: DMatrix::zeros(model.w_factors.nrows(), model.w_factors.ncols()),
            user_cov: BTreeMap::new(),
            item_cov: BTreeMap::new(),
        }
    }

    fn absorb(&mut self, triple: &Triple, grads: &PairGradients, covariances: bool) {
        if covariances {
            add_mat(&mut self.user_cov, triple.user, &grads.g_lu);
            add_mat(&mut self.item_cov, triple.item_i, &grads.g_li);
            add_mat(&mut self.item_cov, triple.item_j, &grads.g_lj);
        } else {
            add_row(&mut self.u_rows, triple.user, &grads.g_u);
            add_row(&mut self.v_rows, triple.item_i, &grads.g_vi);
            add_row(&mut self.v_rows, triple.item_j, &grads.g_vj);
            self.w += &grads.g_w;
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (k, g) in other.u_rows {
            add_row(&mut self.u_rows, k, &g);
        }
        for (k, g) in other.v_rows {
            add_row(&mut self.v_rows, k, &g);
        }
        self.w += other.w;
        for (k, g) in other.user_cov {
            add_mat(&mut self.user_cov, k, &g);
        }
        for (k, g) in other.item_cov {
            add_mat(&mut self.item_cov, k, &g);
        }
        self
    }

    /// Converts accumulated sums into the batch mean and, when `clip`, caps
    /// the joint gradient norm at `CLIP_NORM`.
    fn finish(&mut self, batch_size: usize, clip: bool) {
        let scale = 1.0 / batch_size as f64;
        let mut squared = 0.0;
        for g in self.u_rows.values_mut().chain(self.v_rows.values_mut()) {
            *g *= scale;
            squared += g.norm_squared();
        }
        self.w *= scale;
        squared += self.w.norm_squared();
        for g in self.user_cov.values_mut().chain(self.item_cov.values_mut()) {
            *g *= scale;
            squared += g.norm_squared();
        }
        if clip {
            let norm = squared.sqrt();
            if norm > CLIP_NORM {
                let shrink = CLIP_NORM / norm;
                for g in self.u_rows.values_mut().chain(self.v_rows.values_mut()) {
                    *g *= shrink;
                }
                self.w *= shrink;
                for g in self.user_cov.values_mut().chain(self.item_cov.values_mut()) {
                    *g *= shrink;
                }
            }
        }
    }
}

/// Computes batch-mean gradients for one phase. `ordered` folds triples in
/// sample order after a parallel map (bitwise reproducible); otherwise each
/// rayon worker folds its own chunk and partial sums merge in whatever order
/// the scheduler finishes them.
fn phase_gradients(
    model: &PmtfModel,
    batch: &[Triple],
    iteration: usize,
    covariances: bool,
    clip: bool,
    ordered: bool,
) -> Result<BatchGradients> {
    let one = |acc: Result<BatchGradients>, triple: &Triple| -> Result<BatchGradients> {
        let mut acc = acc?;
        let (value, grads) = triple_gradients(model, triple)?;
        if !value.is_finite() {
            return Err(DmrError::Divergence {
                iteration,
                detail: divergence_detail(model, std::slice::from_ref(triple)),
            });
        }
        acc.absorb(triple, &grads, covariances);
        Ok(acc)
    };
    let mut folded = if ordered {
        let per_triple: Vec<(f64, PairGradients)> = batch
            .par_iter()
            .map(|t| triple_gradients(model, t))
            .collect::<Result<_>>()?;
        let mut acc = BatchGradients::empty(model);
        for (triple, (value, grads)) in batch.iter().zip(&per_triple) {
            if !value.is_finite() {
                return Err(DmrError::Divergence {
                    iteration,
                    detail: divergence_detail(model, std::slice::from_ref(triple)),
                });
            }
            acc.absorb(triple, grads, covariances);
        }
        acc
    } else {
        batch
            .par_iter()
            .fold(
                || Ok(BatchGradients::empty(model)),
                |acc, t| one(acc, t),
            )
            .reduce(
                || Ok(BatchGradients::empty(model)),
                |a, b| Ok(a?.merge(b?)),
            )?
    };
    folded.finish(batch.len(), clip);
    Ok(folded)
}

fn run_training(dataset: &Dataset, config: &TrainConfig, update_covariances: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = init_model(dataset, config)?;
    if !update_covariances {
        model.set_identity_covariances();
    }
    let mut adagrad = AdaGradState::for_model(&model);
    let sampler = TripleSampler::new(dataset, Partition::Train, config.implicit_triples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e3779b97f4a7c15));
    let probe = sample_triples(dataset, &sampler, config.batch_size.min(PROBE_CAP), &mut rng)?;
    let clip = config.margin > 0.5;
    let eval_config = EvalConfig::default();

    let initial_probe_objective = probe_objective(&model, &probe)?;
    if !initial_probe_objective.is_finite() {
        return Err(DmrError::Divergence {
            iteration: 0,
            detail: divergence_detail(&model, &probe),
        });
    }

    let mut log = Vec::new();
    let mut best_model = model.clone();
    let mut best_validation = f64::NEG_INFINITY;
    let mut best_iteration = 0usize;
    let mut since_best = 0usize;
    let mut iterations_run = 0usize;

    for iteration in 1..=config.max_iters {
        iterations_run = iteration;

        // Phase 1: latent factors on a fresh batch.
        let batch = sample_triples(dataset, &sampler, config.batch_size, &mut rng)?;
        let folded = phase_gradients(&model, &batch, iteration, false, clip, config.deterministic)?;
        for (user, g) in &folded.u_rows {
            adagrad_row_step(
                &mut model.u_factors,
                &mut adagrad.u,
                *user,
                g,
                config.learning_rate,
                adagrad.epsilon,
            );
        }
        for (item, g) in &folded.v_rows {
            adagrad_row_step(
                &mut model.v_factors,
                &mut adagrad.v,
                *item,
                g,
                config.learning_rate,
                adagrad.epsilon,
            );
        }
        adagrad_step(
            &mut model.w_factors,
            &folded.w,
            &mut adagrad.w,
            config.learning_rate,
            adagrad.epsilon,
        )?;

        // Phase 2: covariance factors on another fresh batch.
        if update_covariances {
            let batch = sample_triples(dataset, &sampler, config.batch_size, &mut rng)?;
            let folded =
                phase_gradients(&model, &batch, iteration, true, clip, config.deterministic)?;
            for (user, g) in &folded.user_cov {
                adagrad_step(
                    &mut model.user_cov_factors[*user],
                    g,
                    &mut adagrad.user_cov[*user],
                    config.learning_rate,
                    adagrad.epsilon,
                )?;
            }
            for (item, g) in &folded.item_cov {
                adagrad_step(
                    &mut model.item_cov_factors[*item],
                    g,
                    &mut adagrad.item_cov[*item],
                    config.learning_rate,
                    adagrad.epsilon,
                )?;
            }
        }

        let probe_value = probe_objective(&model, &probe)?;
        if !probe_value.is_finite() {
            return Err(DmrError::Divergence {
                iteration,
                detail: divergence_detail(&model, &probe),
            });
        }

        if iteration % config.eval_every == 0 || iteration == config.max_iters {
            let metric = rank_metrics(&model, dataset, Partition::Valid, &eval_config)?
                .average
                .ndcg50;
            let improved = metric > best_validation;
            log.push(TrainLogRecord {
                iteration,
                probe_objective: probe_value,
                validation_ndcg50: metric,
                improved,
            });
            if improved {
                best_validation = metric;
                best_iteration = iteration;
                best_model = model.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        }
    }

    let best_probe_objective = probe_objective(&best_model, &probe)?;
    Ok(TrainOutcome {
        model: best_model,
        log,
        iterations_run,
        best_iteration,
        best_validation,
        initial_probe_objective,
        best_probe_objective,
    })
}

/// Full two-phase training; returns the best-validation checkpoint.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    run_training(dataset, config, true)
}

/// The identity-covariance ablation: covariances pinned at I, phase 2
/// skipped, only latent factors learn.
pub fn train_dmr_i(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    run_training(dataset, config, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, split, PlantedCovariance, SynthConfig};
    use crate::eval::pairwise_accuracy;
    use approx::assert_abs_diff_eq;
    use std::collections::HashMap;

    fn planted_split_dataset(seed: u64) -> Dataset {
        let (dataset, _) = synthesize_dataset(&SynthConfig {
            num_users: 30,
            num_items: 24,
            num_aspects: 3,
            latent_dim: 3,
            density: 0.7,
            factor_scale: 0.9,
            noise_scale: 0.3,
            covariance: PlantedCovariance::Correlated { strength: 0.7 },
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        split(&dataset, (0.7, 0.15, 0.15), seed).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 100,
            max_iters: 150,
            eval_every: 50,
            latent_dim: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sampler_on_single_pair_dataset_yields_that_pair() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.tsv");
        std::fs::write(&path, "user_id\titem_id\tOverall\nu\ta\t5\nu\tb\t3\n").unwrap();
        let dataset = crate::data::load_ratings(&path).unwrap();
        let sampler = TripleSampler::new(&dataset, Partition::Train, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let triples = sample_triples(&dataset, &sampler, 50, &mut rng).unwrap();
        for t in &triples {
            assert_eq!(t.user, 0);
            assert!((t.item_i == 0 && t.item_j == 1) || (t.item_i == 1 && t.item_j == 0));
        }
        // Same seed reproduces the exact sequence.
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let again = sample_triples(&dataset, &sampler, 50, &mut rng2).unwrap();
        for (a, b) in triples.iter().zip(&again) {
            assert_eq!((a.user, a.item_i, a.item_j), (b.user, b.item_i, b.item_j));
        }
    }

    #[test]
    fn sampler_is_uniform_over_eligible_pairs() {
        // Users with 2, 3, and 4 train items → 1 + 3 + 6 = 10 unordered pairs.
        let mut lines = vec!["user_id\titem_id\tOverall".to_string()];
        let counts = [2usize, 3, 4];
        for (u, &n) in counts.iter().enumerate() {
            for i in 0..n {
                lines.push(format!("u{u}\tu{u}i{i}\t{}", (u + i) % 5 + 1));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        let dataset = crate::data::load_ratings(&path).unwrap();
        let sampler = TripleSampler::new(&dataset, Partition::Train, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let draws = 100_000usize;
        let mut freq: HashMap<(usize, usize, usize), usize> = HashMap::new();
        let triples = sample_triples(&dataset, &sampler, draws, &mut rng).unwrap();
        for t in triples {
            let (lo, hi) = if t.item_i < t.item_j {
                (t.item_i, t.item_j)
            } else {
                (t.item_j, t.item_i)
            };
            *freq.entry((t.user, lo, hi)).or_insert(0) += 1;
        }
        assert_eq!(freq.len(), 10, "every eligible pair appears");
        let p = 0.1f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (&pair, &count) in &freq {
            let dev = (count as f64 - draws as f64 * p).abs();
            assert!(
                dev <= 3.0 * sigma,
                "pair {pair:?} drawn {count} times, {dev:.0} > 3σ = {:.0}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn sampler_redraws_uninformative_pairs() {
        // Items a and b share no aspect; every sampled triple avoids that
        // combination. Item c pairs with both.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.tsv");
        std::fs::write(
            &path,
            "user_id\titem_id\tx\ty\n\
             u\ta\t4\tNA\n\
             u\tb\tNA\t2\n\
             u\tc\t3\t5\n",
        )
        .unwrap();
        let dataset = crate::data::load_ratings(&path).unwrap();
        let sampler = TripleSampler::new(&dataset, Partition::Train, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let triples = sample_triples(&dataset, &sampler, 200, &mut rng).unwrap();
        for t in &triples {
            let pair = (t.item_i.min(t.item_j), t.item_i.max(t.item_j));
            assert_ne!(pair, (0, 1), "void pair must be redrawn");
        }
    }

    #[test]
    fn sampler_fails_without_eligible_users() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lonely.tsv");
        std::fs::write(&path, "user_id\titem_id\tOverall\nu\ta\t5\nv\tb\t3\n").unwrap();
        let dataset = crate::data::load_ratings(&path).unwrap();
        assert!(matches!(
            TripleSampler::new(&dataset, Partition::Train, false),
            Err(DmrError::NoComparablePairs)
        ));
    }

    #[test]
    fn implicit_mode_samples_unrated_items() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imp.tsv");
        std::fs::write(
            &path,
            "user_id\titem_id\tOverall\n\
             u\ta\t5\nu\tb\t3\n\
             v\ta\t4\nv\tc\t2\n",
        )
        .unwrap();
        let dataset = crate::data::load_ratings(&path).unwrap();
        let sampler = TripleSampler::new(&dataset, Partition::Train, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let triples = sample_triples(&dataset, &sampler, 300, &mut rng).unwrap();
        let mut saw_implicit = false;
        for t in &triples {
            let j_rated = dataset.find(t.user, t.item_j).is_some();
            if !j_rated {
                saw_implicit = true;
                // The direction is the rated item's own vector.
                let ri = &dataset.find(t.user, t.item_i).unwrap().ratings;
                assert_eq!(t.direction.d[0], ri.get(0).unwrap());
            }
        }
        assert!(saw_implicit, "implicit draws must appear in 300 samples");
    }

    #[test]
    fn adagrad_first_step_approximates_signed_learning_rate() {
        let mut params = DMatrix::zeros(1, 2);
        let grads = DMatrix::from_row_slice(1, 2, &[3.0, -2.0]);
        let mut acc = DMatrix::zeros(1, 2);
        adagrad_step(&mut params, &grads, &mut acc, 0.03, 1e-8).unwrap();
        assert_abs_diff_eq!(params[(0, 0)], 0.03, epsilon = 1e-8);
        assert_abs_diff_eq!(params[(0, 1)], -0.03, epsilon = 1e-8);
        // Zero gradient: nothing moves, accumulator untouched.
        let before = params.clone();
        adagrad_step(&mut params, &DMatrix::zeros(1, 2), &mut acc, 0.03, 1e-8).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adagrad_step_size_decays_as_inverse_square_root() {
        let mut params = DMatrix::zeros(1, 1);
        let grads = DMatrix::from_element(1, 1, 2.0);
        let mut acc = DMatrix::zeros(1, 1);
        let lr = 0.1;
        let mut prev = 0.0;
        let mut steps = Vec::new();
        for _ in 0..10 {
            adagrad_step(&mut params, &grads, &mut acc, lr, 1e-8).unwrap();
            steps.push(params[(0, 0)] - prev);
            prev = params[(0, 0)];
        }
        // t-th step = lr·g/√(t·g²+ε) ≈ lr/√t.
        for (t, step) in steps.iter().enumerate() {
            let want = lr / ((t + 1) as f64).sqrt();
            assert_abs_diff_eq!(*step, want, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(steps[9] / steps[0], 0.1f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn adagrad_accumulator_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = DMatrix::zeros(2, 2);
        let mut acc = DMatrix::zeros(2, 2);
        let mut last = acc.clone();
        for _ in 0..50 {
            let grads = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            adagrad_step(&mut params, &grads, &mut acc, 0.05, 1e-8).unwrap();
            for (a, b) in acc.iter().zip(last.iter()) {
                assert!(a >= b);
            }
            last = acc.clone();
        }
    }

    #[test]
    fn adagrad_rejects_shape_mismatch() {
        let mut params = DMatrix::zeros(2, 2);
        let grads = DMatrix::zeros(2, 3);
        let mut acc = DMatrix::zeros(2, 2);
        assert!(matches!(
            adagrad_step(&mut params, &grads, &mut acc, 0.1, 1e-8),
            Err(DmrError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn zero_learning_rate_keeps_the_initial_model() {
        let dataset = planted_split_dataset(3);
        let config = TrainConfig {
            learning_rate: 0.0,
            max_iters: 40,
            eval_every: 20,
            ..small_config()
        };
        let outcome = train(&dataset, &config).unwrap();
        let init = init_model(&dataset, &config).unwrap();
        assert_eq!(outcome.model.u_factors, init.u_factors);
        assert_eq!(outcome.model.v_factors, init.v_factors);
        assert_eq!(outcome.model.w_factors, init.w_factors);
        assert_eq!(outcome.model.user_cov_factors, init.user_cov_factors);
        // Validation metric is frozen too.
        let metrics: Vec<f64> = outcome.log.iter().map(|r| r.validation_ndcg50).collect();
        for m in &metrics {
            assert_abs_diff_eq!(*m, metrics[0], epsilon = 0.0);
        }
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let dataset = planted_split_dataset(9);
        let config = TrainConfig {
            max_iters: 10,
            eval_every: 5,
            ..small_config()
        };
        let a = train(&dataset, &config).unwrap();
        let b = train(&dataset, &config).unwrap();
        assert_eq!(a.model.u_factors, b.model.u_factors);
        assert_eq!(a.model.v_factors, b.model.v_factors);
        assert_eq!(a.model.w_factors, b.model.w_factors);
        assert_eq!(a.model.user_cov_factors, b.model.user_cov_factors);
        assert_eq!(a.model.item_cov_factors, b.model.item_cov_factors);
        assert_eq!(a.iterations_run, b.iterations_run);
    }

    #[test]
    fn training_improves_probe_objective_and_accuracy() {
        let dataset = planted_split_dataset(17);
        let config = small_config();
        let outcome = train(&dataset, &config).unwrap();
        assert!(
            outcome.best_probe_objective > outcome.initial_probe_objective,
            "probe objective {} -> {}",
            outcome.initial_probe_objective,
            outcome.best_probe_objective
        );
        let init = init_model(&dataset, &config).unwrap();
        let acc_init = pairwise_accuracy(&init, &dataset, Partition::Test).unwrap();
        let acc_trained = pairwise_accuracy(&outcome.model, &dataset, Partition::Test).unwrap();
        assert!(
            acc_trained > acc_init,
            "held-out accuracy {acc_init} -> {acc_trained}"
        );
        assert!(!outcome.log.is_empty());
        for r in &outcome.log {
            assert!(r.probe_objective.is_finite());
            assert!(r.iteration % config.eval_every == 0 || r.iteration == outcome.iterations_run);
        }
    }

    #[test]
    fn covariances_stay_positive_definite_through_training() {
        let dataset = planted_split_dataset(23);
        let outcome = train(
            &dataset,
            &TrainConfig {
                max_iters: 30,
                eval_every: 15,
                ..small_config()
            },
        )
        .unwrap();
        let model = &outcome.model;
        let floor = model.hyper.jitter - 1e-10;
        for u in 0..model.num_users() {
            let eig = model.user_covariance(u).unwrap().symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&v| v >= floor));
        }
        for i in 0..model.num_items() {
            let eig = model.item_covariance(i).unwrap().symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&v| v >= floor));
        }
    }

    #[test]
    fn identity_variant_never_moves_covariances() {
        let dataset = planted_split_dataset(29);
        let outcome = train_dmr_i(
            &dataset,
            &TrainConfig {
                max_iters: 25,
                eval_every: 25,
                ..small_config()
            },
        )
        .unwrap();
        let model = &outcome.model;
        let k = model.hyper.num_aspects();
        let eye = DMatrix::<f64>::identity(k, k);
        for u in 0..model.num_users() {
            let cov = model.user_covariance(u).unwrap();
            assert_abs_diff_eq!(cov, eye.clone(), epsilon = 1e-12);
        }
        for i in 0..model.num_items() {
            let cov = model.item_covariance(i).unwrap();
            assert_abs_diff_eq!(cov, eye.clone(), epsilon = 1e-12);
        }
        // Factors did move.
        let init = {
            let mut m = init_model(&dataset, &TrainConfig { max_iters: 25, eval_every: 25, ..small_config() }).unwrap();
            m.set_identity_covariances();
            m
        };
        assert_ne!(outcome.model.u_factors, init.u_factors);
    }

    #[test]
    fn runaway_learning_rate_reports_divergence_with_triple_and_z() {
        let dataset = planted_split_dataset(31);
        let result = train(
            &dataset,
            &TrainConfig {
                learning_rate: 1e80,
                max_iters: 10,
                eval_every: 10,
                ..small_config()
            },
        );
        match result {
            Err(DmrError::Divergence { iteration, detail }) => {
                assert!(iteration >= 1);
                assert!(
                    detail.contains("triple") || detail.contains("Z"),
                    "diagnostic should name the triple and Z: {detail}"
                );
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn margin_warning_triggers_above_half() {
        let mut config = TrainConfig::default();
        assert!(config.margin_warning().is_none());
        config.margin = 2.0;
        let warning = config.margin_warning().unwrap();
        assert!(warning.contains("clipping"));
        config.validate().unwrap();
        config.margin = -0.1;
        assert!(config.validate().is_err());
        config.margin = 0.2;
        config.batch_size = 0;
        assert!(config.validate().is_err());
    }
}
