//! Ranking and ordering metrics: NDCG@k, MAP, pairwise order accuracy,
//! confidence-bucket analysis, and the correlation-based aspect explanation.
//!
//! Determinism rules used throughout: ranking ties break by ascending item
//! index, explanation ties by ascending aspect index, and parallel per-user
//! work is reduced in user order.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::{Dataset, Partition};
use crate::dirlik::{self, GaussianSpec, ObservedDirection};
use crate::model::PmtfModel;
use crate::{DmrError, Result};

/// MAP and NDCG for one aspect, averaged over users.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AspectMetrics {
    pub map: f64,
    pub ndcg10: f64,
    pub ndcg50: f64,
}

/// Per-aspect ranking metrics plus their all-aspect average (the Overall
/// aspect, index 0, is included in the average).
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub aspect_names: Vec<String>,
    pub per_aspect: Vec<AspectMetrics>,
    pub average: AspectMetrics,
}

impl RankingResult {
    pub fn overall(&self) -> &AspectMetrics {
        &self.per_aspect[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    /// A rating at or above this value counts as relevant for MAP.
    pub relevance_threshold: f64,
    /// Rank every item (unrated ones with gain 0) instead of only the user's
    /// partition items.
    pub all_items_candidates: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            relevance_threshold: 4.0,
            all_items_candidates: false,
        }
    }
}

/// One confidence decile: the range of pair log likelihoods it covers, how
/// many pairs landed in it, and their pairwise order accuracy.
#[derive(Debug, Clone, Copy)]
pub struct ConfidenceBucket {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ConfidenceReport {
    pub buckets: Vec<ConfidenceBucket>,
}

/// Indices 0..n ordered by descending score; equal scores keep ascending
/// index order.
fn ranking_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order
}

fn dcg(order: &[usize], gains: &[f64], k: usize) -> f64 {
    order
        .iter()
        .take(k)
        .enumerate()
        .map(|(rank, &idx)| gains[idx] / ((rank + 2) as f64).log2())
        .sum()
}

/// NDCG@k with gain = the raw rating and a log₂(rank+1) discount. Returns 1.0
/// when the ideal DCG is 0 (nothing to get wrong).
pub fn ndcg_at_k(scores: &[f64], gains: &[f64], k: usize) -> Result<f64> {
    if scores.is_empty() || scores.len() != gains.len() {
        return Err(DmrError::Data(format!(
            "ranking needs matching nonempty lists, got {} scores and {} gains",
            scores.len(),
            gains.len()
        )));
    }
    if k == 0 {
        return Err(DmrError::InvalidConfig("NDCG cutoff must be at least 1".into()));
    }
    let ideal = dcg(&ranking_order(gains), gains, k);
    if ideal == 0.0 {
        return Ok(1.0);
    }
    Ok(dcg(&ranking_order(scores), gains, k) / ideal)
}

/// Average precision of one ranked list; `None` when nothing is relevant.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Result<Option<f64>> {
    if scores.is_empty() || scores.len() != relevant.len() {
        return Err(DmrError::Data(format!(
            "average precision needs matching nonempty lists, got {} scores and {} flags",
            scores.len(),
            relevant.len()
        )));
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &idx) in ranking_order(scores).iter().enumerate() {
        if relevant[idx] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| acc / hits as f64))
}

/// Mean of per-user average precision over the users that have at least one
/// relevant item; 0.0 when no user does.
pub fn mean_average_precision(users: &[(Vec<f64>, Vec<bool>)]) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for (scores, relevant) in users {
        if let Some(ap) = average_precision(scores, relevant)? {
            total += ap;
            counted += 1;
        }
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

/// Sorted item indices of one user's observations in `partition`.
fn user_partition_items(dataset: &Dataset, user: usize, partition: Partition) -> Vec<usize> {
    let mut items: Vec<usize> = dataset
        .user_observations(user)
        .iter()
        .map(|&n| &dataset.observations()[n])
        .filter(|o| o.partition == partition)
        .map(|o| o.item)
        .collect();
    items.sort_unstable();
    items
}

fn check_shapes(model: &PmtfModel, dataset: &Dataset) -> Result<()> {
    if model.hyper.num_aspects() != dataset.num_aspects()
        || model.num_users() < dataset.num_users()
        || model.num_items() < dataset.num_items()
    {
        return Err(DmrError::DimensionMismatch(format!(
            "model covers {} users x {} items x {} aspects, dataset has {} x {} x {}",
            model.num_users(),
            model.num_items(),
            model.hyper.num_aspects(),
            dataset.num_users(),
            dataset.num_items(),
            dataset.num_aspects()
        )));
    }
    Ok(())
}

/// MAP and NDCG@{10,50} per aspect over one partition. Each user ranks their
/// own candidate items by predicted aspect rating against the true ratings;
/// per-user values are averaged per aspect, and per-aspect values averaged
/// into the all-aspect summary.
pub fn rank_metrics(
    model: &PmtfModel,
    dataset: &Dataset,
    partition: Partition,
    config: &EvalConfig,
) -> Result<RankingResult> {
    check_shapes(model, dataset)?;
    let k = dataset.num_aspects();

    struct UserAspect {
        ndcg10: f64,
        ndcg50: f64,
        ap: Option<f64>,
    }

    let per_user: Vec<Vec<Option<UserAspect>>> = (0..dataset.num_users())
        .into_par_iter()
        .map(|user| -> Result<Vec<Option<UserAspect>>> {
            let candidates: Vec<usize> = if config.all_items_candidates {
                (0..dataset.num_items()).collect()
            } else {
                user_partition_items(dataset, user, partition)
            };
            let mut per_aspect = Vec::with_capacity(k);
            for aspect in 0..k {
                let mut scores = Vec::new();
                let mut gains = Vec::new();
                for &item in &candidates {
                    let truth = dataset
                        .find(user, item)
                        .filter(|o| o.partition == partition)
                        .and_then(|o| o.ratings.get(aspect));
                    let gain = match truth {
                        Some(g) => g,
                        // In all-items mode unrated candidates rank with
                        // gain 0; otherwise a missing aspect drops the item
                        // from this aspect's list.
                        None if config.all_items_candidates => 0.0,
                        None => continue,
                    };
                    scores.push(model.predict_ratings(user, item)?[aspect]);
                    gains.push(gain);
                }
                if scores.is_empty() {
                    per_aspect.push(None);
                    continue;
                }
                let relevant: Vec<bool> = gains
                    .iter()
                    .map(|&g| g >= config.relevance_threshold)
                    .collect();
                per_aspect.push(Some(UserAspect {
                    ndcg10: ndcg_at_k(&scores, &gains, 10)?,
                    ndcg50: ndcg_at_k(&scores, &gains, 50)?,
                    ap: average_precision(&scores, &relevant)?,
                }));
            }
            Ok(per_aspect)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_aspect = Vec::with_capacity(k);
    for aspect in 0..k {
        let mut ndcg10 = 0.0;
        let mut ndcg50 = 0.0;
        let mut ranked_users = 0usize;
        let mut ap_total = 0.0;
        let mut ap_users = 0usize;
        for stats in per_user.iter().filter_map(|u| u[aspect].as_ref()) {
            ndcg10 += stats.ndcg10;
            ndcg50 += stats.ndcg50;
            ranked_users += 1;
            if let Some(ap) = stats.ap {
                ap_total += ap;
                ap_users += 1;
            }
        }
        if ranked_users == 0 {
            return Err(DmrError::Data(format!(
                "no user has a rateable item for aspect '{}' in {partition}",
                dataset.aspect_names()[aspect]
            )));
        }
        per_aspect.push(AspectMetrics {
            map: if ap_users == 0 {
                0.0
            } else {
                ap_total / ap_users as f64
            },
            ndcg10: ndcg10 / ranked_users as f64,
            ndcg50: ndcg50 / ranked_users as f64,
        });
    }
    let kf = k as f64;
    let average = AspectMetrics {
        map: per_aspect.iter().map(|m| m.map).sum::<f64>() / kf,
        ndcg10: per_aspect.iter().map(|m| m.ndcg10).sum::<f64>() / kf,
        ndcg50: per_aspect.iter().map(|m| m.ndcg50).sum::<f64>() / kf,
    };
    Ok(RankingResult {
        aspect_names: dataset.aspect_names().to_vec(),
        per_aspect,
        average,
    })
}

/// Order outcome of one within-user item pair: how many aspect comparisons
/// were decidable, how many the model got right, and the model's confidence
/// (log likelihood of its own predicted direction).
struct PairOutcome {
    correct: usize,
    comparable: usize,
    confidence: f64,
}

fn pair_outcomes(
    model: &PmtfModel,
    dataset: &Dataset,
    partition: Partition,
    with_confidence: bool,
) -> Result<Vec<PairOutcome>> {
    check_shapes(model, dataset)?;
    let k = dataset.num_aspects();
    let mut outcomes = Vec::new();
    for user in 0..dataset.num_users() {
        let items = user_partition_items(dataset, user, partition);
        for a in 0..items.len() {
            for b in (a + 1)..items.len() {
                let (item_i, item_j) = (items[a], items[b]);
                let ri = &dataset.find(user, item_i).unwrap().ratings;
                let rj = &dataset.find(user, item_j).unwrap().ratings;
                let pred_i = model.predict_ratings(user, item_i)?;
                let pred_j = model.predict_ratings(user, item_j)?;
                let mut correct = 0usize;
                let mut comparable = 0usize;
                let mut mask = vec![false; k];
                for aspect in 0..k {
                    let (x, y) = match (ri.get(aspect), rj.get(aspect)) {
                        (Some(x), Some(y)) => (x, y),
                        _ => continue,
                    };
                    mask[aspect] = true;
                    let truth = x - y;
                    if truth == 0.0 {
                        continue;
                    }
                    comparable += 1;
                    if truth * (pred_i[aspect] - pred_j[aspect]) > 0.0 {
                        correct += 1;
                    }
                }
                if comparable == 0 {
                    continue;
                }
                let confidence = if with_confidence {
                    pair_confidence(model, user, item_i, item_j, &mask)?
                } else {
                    0.0
                };
                outcomes.push(PairOutcome {
                    correct,
                    comparable,
                    confidence,
                });
            }
        }
    }
    if outcomes.is_empty() {
        return Err(DmrError::NoComparablePairs);
    }
    Ok(outcomes)
}

/// Log likelihood of the model's own predicted difference direction: the
/// observed d is replaced by the unit vector d̂/‖d̂‖ on the shared aspects.
/// Normalizing removes the line-measure factor 1/‖d‖ that would otherwise
/// reward weak predictions; what remains rises with the predicted separation
/// and falls with the pair's noise volume. A predicted difference of exactly
/// zero gets -∞ (no confidence at all).
fn pair_confidence(
    model: &PmtfModel,
    user: usize,
    item_i: usize,
    item_j: usize,
    mask: &[bool],
) -> Result<f64> {
    let dhat = model.predict_difference(user, item_i, item_j)?;
    let mut masked = dhat.clone();
    for (a, &m) in mask.iter().enumerate() {
        if !m {
            masked[a] = 0.0;
        }
    }
    let norm = masked.norm();
    if norm <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    masked /= norm;
    let dir = ObservedDirection::new(masked, mask.to_vec())?;
    let spec = GaussianSpec::new(dhat, model.pair_covariance(user, item_i, item_j)?)?;
    match dirlik::log_pair_likelihood(&dir, &spec, model.hyper.margin) {
        Ok(v) => Ok(v),
        Err(DmrError::ZeroDifference) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

/// Proportion of correctly predicted aspect orders over all within-user item
/// pairs of the partition. Ground-truth ties and missing aspects are left out
/// of the denominator.
pub fn pairwise_accuracy(
    model: &PmtfModel,
    dataset: &Dataset,
    partition: Partition,
) -> Result<f64> {
    let outcomes = pair_outcomes(model, dataset, partition, false)?;
    let correct: usize = outcomes.iter().map(|o| o.correct).sum();
    let comparable: usize = outcomes.iter().map(|o| o.comparable).sum();
    Ok(correct as f64 / comparable as f64)
}

/// Buckets the partition's pairs into `n_buckets` confidence quantiles (low
/// to high) and reports pairwise accuracy inside each. Bucket populations
/// differ by at most one; empty buckets are dropped.
pub fn confidence_report(
    model: &PmtfModel,
    dataset: &Dataset,
    partition: Partition,
    n_buckets: usize,
) -> Result<ConfidenceReport> {
    if n_buckets == 0 {
        return Err(DmrError::InvalidConfig("need at least one bucket".into()));
    }
    let mut outcomes = pair_outcomes(model, dataset, partition, true)?;
    outcomes.sort_by(|a, b| a.confidence.partial_cmp(&b.confidence).unwrap());
    let n = outcomes.len();
    let base = n / n_buckets;
    let extra = n % n_buckets;
    let mut buckets = Vec::new();
    let mut start = 0usize;
    for b in 0..n_buckets {
        let size = base + usize::from(b < extra);
        if size == 0 {
            continue;
        }
        let slice = &outcomes[start..start + size];
        let correct: usize = slice.iter().map(|o| o.correct).sum();
        let comparable: usize = slice.iter().map(|o| o.comparable).sum();
        buckets.push(ConfidenceBucket {
            low: slice.first().unwrap().confidence,
            high: slice.last().unwrap().confidence,
            count: size,
            accuracy: correct as f64 / comparable as f64,
        });
        start += size;
    }
    Ok(ConfidenceReport { buckets })
}

/// The non-Overall aspect whose rating is most correlated with the Overall
/// rating under `cov`. Aspects whose variance is at or below `var_floor` are
/// excluded as degenerate; ties go to the lowest index.
pub fn explanation_from_covariance(cov: &DMatrix<f64>, var_floor: f64) -> Result<usize> {
    let k = cov.nrows();
    if k < 2 {
        return Err(DmrError::NoExplainableAspect(
            "need at least one aspect besides Overall".into(),
        ));
    }
    let var0 = cov[(0, 0)];
    if var0 <= var_floor {
        return Err(DmrError::NoExplainableAspect(
            "Overall aspect has degenerate variance".into(),
        ));
    }
    let mut best: Option<(usize, f64)> = None;
    for aspect in 1..k {
        let var = cov[(aspect, aspect)];
        if var <= var_floor {
            continue;
        }
        let corr = cov[(0, aspect)] / (var0 * var).sqrt();
        if best.map_or(true, |(_, b)| corr > b) {
            best = Some((aspect, corr));
        }
    }
    best.map(|(aspect, _)| aspect).ok_or_else(|| {
        DmrError::NoExplainableAspect("every non-Overall aspect is degenerate".into())
    })
}

/// Explanation aspect for a (user, item) pair from the composed rating
/// covariance Σ_ui. The variance floor is tied to the model's jitter so that
/// an all-zero covariance factor row counts as degenerate.
pub fn explanation_aspect(model: &PmtfModel, user: usize, item: usize) -> Result<usize> {
    let cov = model.point_covariance(user, item)?;
    explanation_from_covariance(&cov, 4.0 * model.hyper.jitter)
}

/// Mean absolute gap between the Overall rating and the rating of the aspect
/// `selector` picks, over the partition's vectors that carry an Overall
/// rating. A missing selected-aspect rating counts as 0.
pub fn avg_rating_difference_with(
    dataset: &Dataset,
    partition: Partition,
    selector: &mut dyn FnMut(usize, usize) -> Result<usize>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for obs in dataset.observations() {
        if obs.partition != partition {
            continue;
        }
        let overall = match obs.ratings.get(0) {
            Some(v) => v,
            None => continue,
        };
        let aspect = selector(obs.user, obs.item)?;
        if aspect == 0 || aspect >= dataset.num_aspects() {
            return Err(DmrError::IndexOutOfRange(format!(
                "selected aspect {aspect} is not a non-Overall aspect"
            )));
        }
        let selected = obs.ratings.get(aspect).unwrap_or(0.0);
        total += (overall - selected).abs();
        count += 1;
    }
    if count == 0 {
        return Err(DmrError::Data(format!(
            "no {partition} vector carries an Overall rating"
        )));
    }
    Ok(total / count as f64)
}

/// [`avg_rating_difference_with`] using the model's explanation aspect.
pub fn avg_rating_difference(
    model: &PmtfModel,
    dataset: &Dataset,
    partition: Partition,
) -> Result<f64> {
    check_shapes(model, dataset)?;
    avg_rating_difference_with(dataset, partition, &mut |u, i| {
        explanation_aspect(model, u, i)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Observation, RatingVector};
    use crate::model::Hyperparams;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::{Cholesky, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    // Rank by repeated selection of the best remaining item, then sum the
    // discounted gains directly. Independent of the library's sort-based path.
    fn dcg_oracle(scores: &[f64], gains: &[f64], k: usize) -> f64 {
        let mut used = vec![false; scores.len()];
        let mut total = 0.0;
        for rank in 1..=k.min(scores.len()) {
            let mut best = usize::MAX;
            for i in 0..scores.len() {
                if used[i] {
                    continue;
                }
                if best == usize::MAX || scores[i] > scores[best] {
                    best = i;
                }
            }
            used[best] = true;
            total += gains[best] / ((rank + 1) as f64).log2();
        }
        total
    }

    fn ndcg_oracle(scores: &[f64], gains: &[f64], k: usize) -> f64 {
        let ideal = dcg_oracle(gains, gains, k);
        if ideal == 0.0 {
            1.0
        } else {
            dcg_oracle(scores, gains, k) / ideal
        }
    }

    fn ap_oracle(scores: &[f64], relevant: &[bool]) -> Option<f64> {
        let mut used = vec![false; scores.len()];
        let mut hits = 0usize;
        let mut acc = 0.0;
        for rank in 1..=scores.len() {
            let mut best = usize::MAX;
            for i in 0..scores.len() {
                if used[i] {
                    continue;
                }
                if best == usize::MAX || scores[i] > scores[best] {
                    best = i;
                }
            }
            used[best] = true;
            if relevant[best] {
                hits += 1;
                acc += hits as f64 / rank as f64;
            }
        }
        (hits > 0).then(|| acc / hits as f64)
    }

    #[test]
    fn ndcg_hand_arithmetic() {
        // Gains (3,2,1) ranked exactly backwards.
        let got = ndcg_at_k(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], 3).unwrap();
        let want = (1.0 / 2.0f64.log2() + 2.0 / 3.0f64.log2() + 3.0 / 4.0f64.log2())
            / (3.0 / 2.0f64.log2() + 2.0 / 3.0f64.log2() + 1.0 / 4.0f64.log2());
        assert_relative_eq!(got, want, max_relative = 1e-15);
        // Perfect ordering and single item are both 1.
        assert_abs_diff_eq!(
            ndcg_at_k(&[3.0, 2.0, 1.0], &[3.0, 2.0, 1.0], 3).unwrap(),
            1.0
        );
        assert_abs_diff_eq!(ndcg_at_k(&[0.4], &[2.0], 10).unwrap(), 1.0);
        // All-zero gains: ideal DCG 0 scores as 1 by convention.
        assert_abs_diff_eq!(ndcg_at_k(&[1.0, 2.0], &[0.0, 0.0], 2).unwrap(), 1.0);
        assert!(ndcg_at_k(&[], &[], 3).is_err());
        assert!(ndcg_at_k(&[1.0], &[1.0], 0).is_err());
    }

    #[test]
    fn ndcg_ties_break_by_ascending_index() {
        // Equal scores: item 0 must rank first. Gains reward that order.
        let tied = ndcg_at_k(&[1.0, 1.0], &[3.0, 1.0], 2).unwrap();
        assert_abs_diff_eq!(tied, 1.0);
        // With the high gain on index 1, the same tie hurts.
        let tied_bad = ndcg_at_k(&[1.0, 1.0], &[1.0, 3.0], 2).unwrap();
        assert!(tied_bad < 1.0);
    }

    #[test]
    fn map_trivial_cases() {
        let users = vec![(vec![3.0, 2.0, 1.0], vec![true, true, true])];
        assert_abs_diff_eq!(mean_average_precision(&users).unwrap(), 1.0);
        // Single relevant item ranked last of 4.
        let users = vec![(vec![4.0, 3.0, 2.0, 1.0], vec![false, false, false, true])];
        assert_abs_diff_eq!(mean_average_precision(&users).unwrap(), 0.25);
        // Users without relevant items do not dilute the mean.
        let users = vec![
            (vec![2.0, 1.0], vec![true, false]),
            (vec![2.0, 1.0], vec![false, false]),
        ];
        assert_abs_diff_eq!(mean_average_precision(&users).unwrap(), 1.0);
        assert_abs_diff_eq!(
            mean_average_precision(&[(vec![1.0], vec![false])]).unwrap(),
            0.0
        );
    }

    #[test]
    fn ndcg_and_map_match_oracles_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for _ in 0..1000 {
            let n = rng.random_range(1..=20);
            // Half-step quantization forces plenty of score ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..10) as f64) * 0.5)
                .collect();
            let gains: Vec<f64> = (0..n).map(|_| rng.random_range(1..=5) as f64).collect();
            let relevant: Vec<bool> = gains.iter().map(|&g| g >= 4.0).collect();
            let k = rng.random_range(1..=25);
            assert_abs_diff_eq!(
                ndcg_at_k(&scores, &gains, k).unwrap(),
                ndcg_oracle(&scores, &gains, k),
                epsilon = 1e-12
            );
            let got = average_precision(&scores, &relevant).unwrap();
            let want = ap_oracle(&scores, &relevant);
            match (got, want) {
                (Some(g), Some(w)) => assert_abs_diff_eq!(g, w, epsilon = 1e-12),
                (None, None) => {}
                other => panic!("AP mismatch: {other:?}"),
            }
        }
    }

    /// Model whose prediction for (user, item) is exactly the item's factor
    /// row: U rows of ones and W = I, so r̂_ui = V_i.
    fn passthrough_model(num_users: usize, v_rows: Vec<Vec<f64>>, k: usize) -> PmtfModel {
        let hyper = Hyperparams::defaults(k, k);
        let n = v_rows.len();
        let v = DMatrix::from_fn(n, k, |r, c| v_rows[r][c]);
        let eye = DMatrix::identity(k, k);
        PmtfModel::from_parts(
            hyper,
            (0..k).map(|a| format!("a{a}")).collect(),
            DMatrix::from_element(num_users, k, 1.0),
            v,
            eye.clone(),
            (0..num_users).map(|_| eye.clone()).collect(),
            (0..n).map(|_| eye.clone()).collect(),
        )
        .unwrap()
    }

    fn test_dataset(k: usize, rows: &[(usize, usize, Vec<Option<f64>>)]) -> Dataset {
        let num_users = rows.iter().map(|r| r.0).max().unwrap() + 1;
        let num_items = rows.iter().map(|r| r.1).max().unwrap() + 1;
        let observations = rows
            .iter()
            .map(|(u, i, vals)| Observation {
                user: *u,
                item: *i,
                ratings: RatingVector::new(vals.clone()).unwrap(),
                partition: Partition::Test,
            })
            .collect();
        Dataset::new(
            (0..k).map(|a| format!("a{a}")).collect(),
            (0..num_users).map(|u| format!("u{u}")).collect(),
            (0..num_items).map(|i| format!("i{i}")).collect(),
            observations,
            None,
        )
        .unwrap()
    }

    #[test]
    fn pairwise_accuracy_hand_count() {
        // Two pairs, two aspects, one ground-truth tie: denominator 3.
        let dataset = test_dataset(
            2,
            &[
                (0, 0, vec![Some(5.0), Some(3.0)]),
                (0, 1, vec![Some(4.0), Some(3.0)]),
                (1, 2, vec![Some(5.0), Some(1.0)]),
                (1, 3, vec![Some(4.0), Some(3.0)]),
            ],
        );
        // Predictions: user 0 pair ordered right on a0; user 1 right on a0
        // but flipped on a1 → 2 of 3.
        let model = passthrough_model(
            2,
            vec![
                vec![2.0, 0.0],
                vec![1.0, 0.0],
                vec![3.0, 5.0],
                vec![2.0, 1.0],
            ],
            2,
        );
        let acc = pairwise_accuracy(&model, &dataset, Partition::Test).unwrap();
        assert_relative_eq!(acc, 2.0 / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn pairwise_accuracy_extremes_and_monotone_invariance() {
        let truth = [
            vec![Some(5.0), Some(2.0)],
            vec![Some(3.0), Some(4.0)],
            vec![Some(4.0), Some(1.0)],
        ];
        let dataset = test_dataset(
            2,
            &[
                (0, 0, truth[0].clone()),
                (0, 1, truth[1].clone()),
                (0, 2, truth[2].clone()),
            ],
        );
        let rows: Vec<Vec<f64>> = truth
            .iter()
            .map(|r| r.iter().map(|v| v.unwrap()).collect())
            .collect();
        let exact = passthrough_model(1, rows.clone(), 2);
        assert_abs_diff_eq!(
            pairwise_accuracy(&exact, &dataset, Partition::Test).unwrap(),
            1.0
        );
        let negated = passthrough_model(
            1,
            rows.iter()
                .map(|r| r.iter().map(|v| -v).collect())
                .collect(),
            2,
        );
        assert_abs_diff_eq!(
            pairwise_accuracy(&negated, &dataset, Partition::Test).unwrap(),
            0.0
        );
        // Strictly increasing per-aspect transforms leave accuracy alone.
        let warped = passthrough_model(
            1,
            rows.iter()
                .map(|r| vec![r[0].exp(), 2.0 * r[1] + 7.0])
                .collect(),
            2,
        );
        assert_abs_diff_eq!(
            pairwise_accuracy(&warped, &dataset, Partition::Test).unwrap(),
            1.0
        );
    }

    #[test]
    fn pairwise_accuracy_needs_a_decidable_pair() {
        // Only ties → no denominator.
        let dataset = test_dataset(
            1,
            &[(0, 0, vec![Some(3.0)]), (0, 1, vec![Some(3.0)])],
        );
        let model = passthrough_model(1, vec![vec![1.0], vec![2.0]], 1);
        assert!(matches!(
            pairwise_accuracy(&model, &dataset, Partition::Test),
            Err(DmrError::NoComparablePairs)
        ));
    }

    #[test]
    fn confidence_buckets_partition_with_near_equal_sizes() {
        // One user, 8 items → 28 pairs; 10 buckets → sizes 3 and 2.
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let rows: Vec<(usize, usize, Vec<Option<f64>>)> = (0..8)
            .map(|i| {
                (
                    0,
                    i,
                    vec![
                        Some(rng.random_range(1..=5) as f64),
                        Some(rng.random_range(1..=5) as f64),
                    ],
                )
            })
            .collect();
        let dataset = test_dataset(2, &rows);
        let v: Vec<Vec<f64>> = (0..8)
            .map(|_| vec![rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)])
            .collect();
        let model = passthrough_model(1, v, 2);
        let report = confidence_report(&model, &dataset, Partition::Test, 10).unwrap();
        let total: usize = report.buckets.iter().map(|b| b.count).sum();
        let evaluated = pair_outcomes(&model, &dataset, Partition::Test, false)
            .unwrap()
            .len();
        assert_eq!(total, evaluated);
        let max = report.buckets.iter().map(|b| b.count).max().unwrap();
        let min = report.buckets.iter().map(|b| b.count).min().unwrap();
        assert!(max - min <= 1, "bucket sizes {min}..{max}");
        for w in report.buckets.windows(2) {
            assert!(w[0].low <= w[1].low);
        }
        for b in &report.buckets {
            assert!((0.0..=1.0).contains(&b.accuracy));
        }
    }

    #[test]
    fn identical_confidences_do_not_break_bucketing() {
        // Two users whose pairs all share the same predicted difference and
        // the same covariances → every confidence identical.
        let dataset = test_dataset(
            2,
            &[
                (0, 0, vec![Some(5.0), Some(4.0)]),
                (0, 1, vec![Some(3.0), Some(2.0)]),
                (1, 2, vec![Some(4.0), Some(5.0)]),
                (1, 3, vec![Some(2.0), Some(3.0)]),
            ],
        );
        let model = passthrough_model(
            2,
            vec![
                vec![1.0, 1.0],
                vec![0.0, 0.0],
                vec![3.0, 3.0],
                vec![2.0, 2.0],
            ],
            2,
        );
        let report = confidence_report(&model, &dataset, Partition::Test, 10).unwrap();
        let total: usize = report.buckets.iter().map(|b| b.count).sum();
        assert_eq!(total, 2);
        let confs: Vec<f64> = report.buckets.iter().map(|b| b.low).collect();
        assert_abs_diff_eq!(confs[0], confs[1], epsilon = 1e-12);
    }

    #[test]
    fn confident_pairs_score_higher_when_covariances_are_honest() {
        // User 0: tight covariance and correct predictions. User 1: huge
        // covariance and wrong predictions. The top bucket must beat the
        // bottom one.
        let k = 2;
        let hyper = Hyperparams::defaults(k, k);
        let eye = DMatrix::identity(k, k);
        let tight = &eye * 0.05;
        let wide = &eye * 3.0;
        let mut rows = Vec::new();
        let mut v_rows = Vec::new();
        for i in 0..6 {
            // User 0's items: truth descends with i, predictions agree.
            rows.push((0usize, i, vec![Some(5.0 - i as f64 * 0.5), Some(5.0 - i as f64 * 0.5)]));
            v_rows.push(vec![5.0 - i as f64 * 0.5, 5.0 - i as f64 * 0.5]);
        }
        for i in 6..12 {
            // User 1's items: predictions run against the truth.
            rows.push((1usize, i, vec![Some(i as f64 * 0.4), Some(i as f64 * 0.4)]));
            v_rows.push(vec![-(i as f64) * 0.4, -(i as f64) * 0.4]);
        }
        let dataset = test_dataset(k, &rows);
        let model = PmtfModel::from_parts(
            hyper,
            vec!["a0".into(), "a1".into()],
            DMatrix::from_element(2, k, 1.0),
            DMatrix::from_fn(12, k, |r, c| v_rows[r][c]),
            eye.clone(),
            vec![tight.clone(), wide.clone()],
            (0..12).map(|_| eye.clone() * 0.2).collect(),
        )
        .unwrap();
        let report = confidence_report(&model, &dataset, Partition::Test, 5).unwrap();
        let first = report.buckets.first().unwrap();
        let last = report.buckets.last().unwrap();
        assert!(
            last.accuracy > first.accuracy,
            "top bucket {} vs bottom {}",
            last.accuracy,
            first.accuracy
        );
    }

    #[test]
    fn explanation_picks_strongest_correlation() {
        // Diagonal: all correlations zero, lowest index wins.
        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        assert_eq!(explanation_from_covariance(&diag, 1e-9).unwrap(), 1);
        // One strong (0, 2) link.
        let mut cov = DMatrix::identity(3, 3);
        cov[(0, 2)] = 0.8;
        cov[(2, 0)] = 0.8;
        assert_eq!(explanation_from_covariance(&cov, 1e-9).unwrap(), 2);
        // Scale invariance.
        assert_eq!(explanation_from_covariance(&(cov * 37.5), 1e-9).unwrap(), 2);
        // Degenerate aspects are skipped; all-degenerate errors out.
        let mut flat = DMatrix::identity(3, 3);
        flat[(1, 1)] = 0.0;
        flat[(2, 2)] = 0.0;
        assert!(matches!(
            explanation_from_covariance(&flat, 1e-9),
            Err(DmrError::NoExplainableAspect(_))
        ));
        let mut one_live = DMatrix::identity(3, 3);
        one_live[(1, 1)] = 0.0;
        one_live[(0, 2)] = -0.5;
        one_live[(2, 0)] = -0.5;
        assert_eq!(explanation_from_covariance(&one_live, 1e-9).unwrap(), 2);
    }

    #[test]
    fn explanation_matches_direct_correlation_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        for _ in 0..200 {
            let k = rng.random_range(2..=6);
            let l = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let cov = &l * l.transpose() + DMatrix::identity(k, k) * 0.05;
            let got = explanation_from_covariance(&cov, 1e-9).unwrap();
            let mut best = 1usize;
            let mut best_corr = f64::NEG_INFINITY;
            for a in 1..k {
                let corr = cov[(0, a)] / (cov[(0, 0)] * cov[(a, a)]).sqrt();
                if corr > best_corr {
                    best_corr = corr;
                    best = a;
                }
            }
            assert_eq!(got, best);
        }
    }

    #[test]
    fn explanation_from_model_composes_point_covariance() {
        let k = 3;
        let hyper = Hyperparams::defaults(k, 2);
        // User covariance ties aspect 1 to Overall, item covariance aspect 2,
        // with λ = 0.5 the user side is made stronger.
        let mut lu = DMatrix::identity(k, k);
        lu[(1, 0)] = 0.9;
        let mut li = DMatrix::identity(k, k);
        li[(2, 0)] = 0.3;
        let model = PmtfModel::from_parts(
            hyper,
            vec!["a0".into(), "a1".into(), "a2".into()],
            DMatrix::from_element(1, 2, 0.1),
            DMatrix::from_element(1, 2, 0.1),
            DMatrix::from_element(k, 2, 0.1),
            vec![lu],
            vec![li],
        )
        .unwrap();
        assert_eq!(explanation_aspect(&model, 0, 0).unwrap(), 1);
    }

    #[test]
    fn rating_difference_zero_when_selection_mirrors_overall() {
        let dataset = test_dataset(
            3,
            &[
                (0, 0, vec![Some(4.0), Some(4.0), Some(1.0)]),
                (0, 1, vec![Some(2.5), Some(2.5), Some(5.0)]),
            ],
        );
        let got =
            avg_rating_difference_with(&dataset, Partition::Test, &mut |_, _| Ok(1)).unwrap();
        assert_abs_diff_eq!(got, 0.0);
        // Missing selected aspect counts as a rating of zero.
        let sparse = test_dataset(2, &[(0, 0, vec![Some(4.0), None])]);
        let got =
            avg_rating_difference_with(&sparse, Partition::Test, &mut |_, _| Ok(1)).unwrap();
        assert_abs_diff_eq!(got, 4.0);
    }

    #[test]
    fn random_selection_matches_gaussian_expectation() {
        // Ratings drawn from a fixed trivariate Gaussian; for a uniformly
        // random pick among aspects {1,2}, E|r₀ - r_k| averages
        // √(2σ²_diff/π) over k with σ²_diff = Σ₀₀ + Σ_kk - 2Σ₀k.
        let sigma = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.8, 0.2, 0.8, 1.0, 0.5, 0.2, 0.5, 1.0],
        );
        let chol = Cholesky::new(sigma.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let n = 20_000;
        let rows: Vec<(usize, usize, Vec<Option<f64>>)> = (0..n)
            .map(|i| {
                let z = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x = chol.l() * z;
                (0, i, vec![Some(x[0]), Some(x[1]), Some(x[2])])
            })
            .collect();
        let dataset = test_dataset(3, &rows);
        let mut pick_rng = ChaCha8Rng::seed_from_u64(5);
        let got = avg_rating_difference_with(&dataset, Partition::Test, &mut |_, _| {
            Ok(pick_rng.random_range(1..=2))
        })
        .unwrap();
        let expect = |k: usize| {
            let var = sigma[(0, 0)] + sigma[(k, k)] - 2.0 * sigma[(0, k)];
            (2.0 * var / std::f64::consts::PI).sqrt()
        };
        let want = 0.5 * (expect(1) + expect(2));
        assert_abs_diff_eq!(got, want, epsilon = 0.03);
    }

    #[test]
    fn rank_metrics_aggregate_and_stay_in_range() {
        let truth = [
            vec![Some(5.0), Some(2.0)],
            vec![Some(4.0), Some(3.0)],
            vec![Some(1.0), Some(4.5)],
            vec![Some(3.0), None],
        ];
        let dataset = test_dataset(
            2,
            &[
                (0, 0, truth[0].clone()),
                (0, 1, truth[1].clone()),
                (0, 2, truth[2].clone()),
                (0, 3, truth[3].clone()),
            ],
        );
        // Exact predictions: every metric is 1 (MAP where defined).
        let rows: Vec<Vec<f64>> = truth
            .iter()
            .map(|r| r.iter().map(|v| v.unwrap_or(0.0)).collect())
            .collect();
        let model = passthrough_model(1, rows, 2);
        let result =
            rank_metrics(&model, &dataset, Partition::Test, &EvalConfig::default()).unwrap();
        assert_eq!(result.per_aspect.len(), 2);
        for m in &result.per_aspect {
            assert_abs_diff_eq!(m.ndcg10, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(m.ndcg50, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(m.map, 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(result.average.ndcg10, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(result.overall().map, 1.0, epsilon = 1e-12);
        // A shuffled model stays within [0, 1] and below perfect.
        let bad = passthrough_model(
            1,
            vec![
                vec![1.0, 9.0],
                vec![7.0, 2.0],
                vec![9.0, 0.5],
                vec![2.0, 1.0],
            ],
            2,
        );
        let worse = rank_metrics(&bad, &dataset, Partition::Test, &EvalConfig::default()).unwrap();
        for m in worse.per_aspect.iter().chain([&worse.average]) {
            assert!((0.0..=1.0).contains(&m.map));
            assert!((0.0..=1.0).contains(&m.ndcg10));
            assert!((0.0..=1.0).contains(&m.ndcg50));
        }
        assert!(worse.average.ndcg10 < 1.0);
    }

    #[test]
    fn all_items_mode_ranks_unrated_candidates_with_zero_gain() {
        let dataset = test_dataset(
            1,
            &[
                (0, 0, vec![Some(5.0)]),
                (0, 1, vec![Some(2.0)]),
                (1, 2, vec![Some(3.0)]),
            ],
        );
        // Item 2 is unrated by user 0; the model scoring it highest hurts
        // user 0's all-items NDCG only.
        let model = passthrough_model(2, vec![vec![5.0], vec![2.0], vec![9.0]], 1);
        let strict =
            rank_metrics(&model, &dataset, Partition::Test, &EvalConfig::default()).unwrap();
        assert_abs_diff_eq!(strict.per_aspect[0].ndcg10, 1.0, epsilon = 1e-12);
        let all_items = rank_metrics(
            &model,
            &dataset,
            Partition::Test,
            &EvalConfig {
                all_items_candidates: true,
                ..EvalConfig::default()
            },
        )
        .unwrap();
        assert!(all_items.per_aspect[0].ndcg10 < 1.0);
    }
}
