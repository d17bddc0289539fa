//! Dataset ingestion, filtering, splitting, global covariance estimation,
//! and synthetic data generation from a planted model.
//!
//! On-disk format: UTF-8 TSV with header
//! `user_id<TAB>item_id<TAB><aspect_0><TAB>…<TAB><aspect_{K-1}>`, one
//! observation per line, ratings as decimal literals, missing values as an
//! empty field or `NA`. Aspect 0 is the Overall rating by convention.
//! Partition assignments can be exported/imported as a sidecar TSV of
//! `user_id<TAB>item_id<TAB>partition`.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dirlik::ObservedDirection;
use crate::model::{symmetric_sqrt, Hyperparams, PmtfModel};
use crate::{DmrError, Result};

/// One user-item evaluation: K aspect slots, each possibly missing.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingVector {
    values: Vec<Option<f64>>,
}

impl RatingVector {
    pub fn new(values: Vec<Option<f64>>) -> Result<Self> {
        if values.iter().all(|v| v.is_none()) {
            return Err(DmrError::Data(
                "rating vector has no observed aspect".into(),
            ));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DmrError::Data("rating vector has non-finite value".into()));
        }
        Ok(Self { values })
    }

    pub fn get(&self, aspect: usize) -> Option<f64> {
        self.values.get(aspect).copied().flatten()
    }

    pub fn num_aspects(&self) -> usize {
        self.values.len()
    }

    pub fn observed_mask(&self) -> Vec<bool> {
        self.values.iter().map(|v| v.is_some()).collect()
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Valid,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Valid, Partition::Test];

    fn parse(s: &str) -> Option<Partition> {
        match s {
            "train" => Some(Partition::Train),
            "valid" => Some(Partition::Valid),
            "test" => Some(Partition::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Valid => "valid",
            Partition::Test => "test",
        })
    }
}

/// One observed (user, item) rating vector with its partition label.
#[derive(Debug, Clone)]
pub struct Observation {
    pub user: usize,
    pub item: usize,
    pub ratings: RatingVector,
    pub partition: Partition,
}

/// A sampled pairwise comparison: user `user` rated both `item_i` and
/// `item_j`; `direction` holds `r_ui - r_uj` on the shared aspects.
#[derive(Debug, Clone)]
pub struct Triple {
    pub user: usize,
    pub item_i: usize,
    pub item_j: usize,
    pub direction: ObservedDirection,
}

/// Indexed rating data. Users, items, and aspects are referred to by dense
/// indices; the original string ids are retained for I/O.
#[derive(Debug, Clone)]
pub struct Dataset {
    aspect_names: Vec<String>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    observations: Vec<Observation>,
    by_user: Vec<Vec<usize>>,
    index: HashMap<(usize, usize), usize>,
    rating_bounds: Option<(f64, f64)>,
}

impl Dataset {
    /// Assembles a dataset from parts; every (user, item) may appear once.
    pub fn new(
        aspect_names: Vec<String>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        observations: Vec<Observation>,
        rating_bounds: Option<(f64, f64)>,
    ) -> Result<Self> {
        let k = aspect_names.len();
        if k == 0 {
            return Err(DmrError::Data("no aspects declared".into()));
        }
        let mut by_user = vec![Vec::new(); user_ids.len()];
        let mut index = HashMap::with_capacity(observations.len());
        for (n, obs) in observations.iter().enumerate() {
            if obs.user >= user_ids.len() || obs.item >= item_ids.len() {
                return Err(DmrError::IndexOutOfRange(format!(
                    "observation {n} refers to user {} / item {}",
                    obs.user, obs.item
                )));
            }
            if obs.ratings.num_aspects() != k {
                return Err(DmrError::DimensionMismatch(format!(
                    "observation {n} has {} aspects, dataset has {k}",
                    obs.ratings.num_aspects()
                )));
            }
            if let Some((lo, hi)) = rating_bounds {
                for v in obs.ratings.values().iter().flatten() {
                    if *v < lo || *v > hi {
                        return Err(DmrError::Data(format!(
                            "rating {v} outside declared bounds [{lo}, {hi}]"
                        )));
                    }
                }
            }
            if index.insert((obs.user, obs.item), n).is_some() {
                return Err(DmrError::Data(format!(
                    "duplicate observation for user '{}' item '{}'",
                    user_ids[obs.user], item_ids[obs.item]
                )));
            }
            by_user[obs.user].push(n);
        }
        Ok(Self {
            aspect_names,
            user_ids,
            item_ids,
            observations,
            by_user,
            index,
            rating_bounds,
        })
    }

    pub fn aspect_names(&self) -> &[String] {
        &self.aspect_names
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_aspects(&self) -> usize {
        self.aspect_names.len()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn rating_bounds(&self) -> Option<(f64, f64)> {
        self.rating_bounds
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    /// Indices into [`Self::observations`] for one user, all partitions.
    pub fn user_observations(&self, user: usize) -> &[usize] {
        &self.by_user[user]
    }

    pub fn find(&self, user: usize, item: usize) -> Option<&Observation> {
        self.index.get(&(user, item)).map(|&n| &self.observations[n])
    }

    pub fn partition_counts(&self) -> HashMap<Partition, usize> {
        let mut counts = HashMap::new();
        for obs in &self.observations {
            *counts.entry(obs.partition).or_insert(0) += 1;
        }
        counts
    }

    /// The observed difference `r_ui - r_uj` on the aspect intersection.
    /// Fails with `EmptyComparison` when no aspect is shared and with
    /// `ZeroDifference` when the shared aspects all tie.
    pub fn make_triple(&self, user: usize, item_i: usize, item_j: usize) -> Result<Triple> {
        if item_i == item_j {
            return Err(DmrError::SameItem(item_i));
        }
        let a = self
            .find(user, item_i)
            .ok_or_else(|| DmrError::Data(format!("user {user} did not rate item {item_i}")))?;
        let b = self
            .find(user, item_j)
            .ok_or_else(|| DmrError::Data(format!("user {user} did not rate item {item_j}")))?;
        let k = self.num_aspects();
        let mut d = DVector::zeros(k);
        let mut mask = vec![false; k];
        let mut any = false;
        let mut nonzero = false;
        for aspect in 0..k {
            if let (Some(x), Some(y)) = (a.ratings.get(aspect), b.ratings.get(aspect)) {
                mask[aspect] = true;
                d[aspect] = x - y;
                any = true;
                nonzero |= x != y;
            }
        }
        if !any {
            return Err(DmrError::EmptyComparison);
        }
        if !nonzero {
            return Err(DmrError::ZeroDifference);
        }
        Ok(Triple {
            user,
            item_i,
            item_j,
            direction: ObservedDirection::new(d, mask)?,
        })
    }

    /// Replaces all partition labels.
    fn with_partitions(mut self, labels: Vec<Partition>) -> Self {
        for (obs, p) in self.observations.iter_mut().zip(labels) {
            obs.partition = p;
        }
        self
    }
}

fn parse_rating_field(field: &str) -> std::result::Result<Option<f64>, String> {
    let trimmed = field.trim();
    if trimmed.is_empty() || trimmed == "NA" {
        return Ok(None);
    }
    trimmed
        .parse::<f64>()
        .map(Some)
        .map_err(|_| format!("'{trimmed}' is not a rating"))
}

/// Parses the TSV rating format. Everything loads into the train partition;
/// use [`split`] or [`load_partitions`] to assign partitions.
pub fn load_ratings(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let path_str = path.display().to_string();
    let mut lines = reader.lines().enumerate();

    let header = match lines.next() {
        Some((_, line)) => line?,
        None => {
            return Err(DmrError::Parse {
                path: path_str,
                line: 1,
                message: "empty file".into(),
            })
        }
    };
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 3 || cols[0] != "user_id" || cols[1] != "item_id" {
        return Err(DmrError::Parse {
            path: path_str,
            line: 1,
            message: "header must be user_id<TAB>item_id<TAB><aspect names...>".into(),
        });
    }
    let aspect_names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let k = aspect_names.len();

    let mut user_ids: Vec<String> = Vec::new();
    let mut item_ids: Vec<String> = Vec::new();
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut observations = Vec::new();

    for (lineno, line) in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != k + 2 {
            return Err(DmrError::Parse {
                path: path_str,
                line: lineno + 1,
                message: format!("expected {} fields, found {}", k + 2, fields.len()),
            });
        }
        let user = *user_index.entry(fields[0].to_string()).or_insert_with(|| {
            user_ids.push(fields[0].to_string());
            user_ids.len() - 1
        });
        let item = *item_index.entry(fields[1].to_string()).or_insert_with(|| {
            item_ids.push(fields[1].to_string());
            item_ids.len() - 1
        });
        let mut values = Vec::with_capacity(k);
        for (a, field) in fields[2..].iter().enumerate() {
            let v = parse_rating_field(field).map_err(|message| DmrError::Parse {
                path: path_str.clone(),
                line: lineno + 1,
                message: format!("aspect '{}': {message}", aspect_names[a]),
            })?;
            values.push(v);
        }
        let ratings = RatingVector::new(values).map_err(|e| DmrError::Parse {
            path: path_str.clone(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        observations.push(Observation {
            user,
            item,
            ratings,
            partition: Partition::Train,
        });
    }
    Dataset::new(aspect_names, user_ids, item_ids, observations, None)
}

/// Writes the TSV rating format (missing values as `NA`). Lossless: reloading
/// reproduces every value and mask exactly.
pub fn save_ratings(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "user_id\titem_id")?;
    for name in dataset.aspect_names() {
        write!(w, "\t{name}")?;
    }
    writeln!(w)?;
    for obs in dataset.observations() {
        write!(
            w,
            "{}\t{}",
            dataset.user_ids()[obs.user],
            dataset.item_ids()[obs.item]
        )?;
        for v in obs.ratings.values() {
            match v {
                Some(x) => write!(w, "\t{x}")?,
                None => write!(w, "\tNA")?,
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Exports partition labels as `user_id<TAB>item_id<TAB>partition`.
pub fn save_partitions(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for obs in dataset.observations() {
        writeln!(
            w,
            "{}\t{}\t{}",
            dataset.user_ids()[obs.user],
            dataset.item_ids()[obs.item],
            obs.partition
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Applies partition labels from a sidecar file to a loaded dataset. Every
/// observation must be covered exactly once.
pub fn load_partitions(dataset: Dataset, path: &Path) -> Result<Dataset> {
    let path_str = path.display().to_string();
    let user_index: HashMap<&str, usize> = dataset
        .user_ids()
        .iter()
        .enumerate()
        .map(|(n, s)| (s.as_str(), n))
        .collect();
    let item_index: HashMap<&str, usize> = dataset
        .item_ids()
        .iter()
        .enumerate()
        .map(|(n, s)| (s.as_str(), n))
        .collect();
    let mut labels: Vec<Option<Partition>> = vec![None; dataset.len()];
    for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |message: String| DmrError::Parse {
            path: path_str.clone(),
            line: lineno + 1,
            message,
        };
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", fields.len())));
        }
        let user = *user_index
            .get(fields[0])
            .ok_or_else(|| bad(format!("unknown user '{}'", fields[0])))?;
        let item = *item_index
            .get(fields[1])
            .ok_or_else(|| bad(format!("unknown item '{}'", fields[1])))?;
        let partition = Partition::parse(fields[2])
            .ok_or_else(|| bad(format!("unknown partition '{}'", fields[2])))?;
        let idx = *dataset
            .index
            .get(&(user, item))
            .ok_or_else(|| bad(format!("no observation for ({}, {})", fields[0], fields[1])))?;
        if labels[idx].replace(partition).is_some() {
            return Err(bad(format!(
                "duplicate assignment for ({}, {})",
                fields[0], fields[1]
            )));
        }
    }
    if let Some(missing) = labels.iter().position(|l| l.is_none()) {
        let obs = &dataset.observations[missing];
        return Err(DmrError::Data(format!(
            "partition file does not cover ({}, {})",
            dataset.user_ids()[obs.user],
            dataset.item_ids()[obs.item]
        )));
    }
    let labels = labels.into_iter().map(|l| l.unwrap()).collect();
    Ok(dataset.with_partitions(labels))
}

/// Iteratively removes users and items with fewer than `min_obs`
/// observations until the fixed point (a removal can push another entity
/// below the threshold).
pub fn filter_min_observations(dataset: &Dataset, min_obs: usize) -> Result<Dataset> {
    let mut user_alive = vec![true; dataset.num_users()];
    let mut item_alive = vec![true; dataset.num_items()];
    loop {
        let mut user_counts = vec![0usize; dataset.num_users()];
        let mut item_counts = vec![0usize; dataset.num_items()];
        for obs in dataset.observations() {
            if user_alive[obs.user] && item_alive[obs.item] {
                user_counts[obs.user] += 1;
                item_counts[obs.item] += 1;
            }
        }
        let mut changed = false;
        for u in 0..dataset.num_users() {
            if user_alive[u] && user_counts[u] < min_obs {
                user_alive[u] = false;
                changed = true;
            }
        }
        for i in 0..dataset.num_items() {
            if item_alive[i] && item_counts[i] < min_obs {
                item_alive[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut user_map = vec![usize::MAX; dataset.num_users()];
    let user_ids: Vec<String> = dataset
        .user_ids()
        .iter()
        .enumerate()
        .filter(|(u, _)| user_alive[*u])
        .enumerate()
        .map(|(new, (old, id))| {
            user_map[old] = new;
            id.clone()
        })
        .collect();
    let mut item_map = vec![usize::MAX; dataset.num_items()];
    let item_ids: Vec<String> = dataset
        .item_ids()
        .iter()
        .enumerate()
        .filter(|(i, _)| item_alive[*i])
        .enumerate()
        .map(|(new, (old, id))| {
            item_map[old] = new;
            id.clone()
        })
        .collect();
    let observations: Vec<Observation> = dataset
        .observations()
        .iter()
        .filter(|obs| user_alive[obs.user] && item_alive[obs.item])
        .map(|obs| Observation {
            user: user_map[obs.user],
            item: item_map[obs.item],
            ratings: obs.ratings.clone(),
            partition: obs.partition,
        })
        .collect();
    if observations.is_empty() {
        return Err(DmrError::Data(format!(
            "filtering at min_obs={min_obs} removed every observation"
        )));
    }
    Dataset::new(
        dataset.aspect_names().to_vec(),
        user_ids,
        item_ids,
        observations,
        dataset.rating_bounds(),
    )
}

/// Per-user partition sizes under largest-remainder rounding of `fractions`,
/// with remainder ties resolved in train > valid > test order, and at least
/// one training observation per user whenever the user has any.
fn partition_sizes(n: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let fracs = [fractions.0, fractions.1, fractions.2];
    let mut sizes = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    let mut assigned = 0;
    for p in 0..3 {
        let quota = fracs[p] * n as f64;
        sizes[p] = quota.floor() as usize;
        remainders[p] = quota - quota.floor();
        assigned += sizes[p];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].partial_cmp(&remainders[a]).unwrap().then(a.cmp(&b)));
    let mut leftover = n - assigned;
    for &p in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        sizes[p] += 1;
        leftover -= 1;
    }
    if n > 0 && sizes[0] == 0 {
        let donor = if sizes[1] >= sizes[2] { 1 } else { 2 };
        sizes[donor] -= 1;
        sizes[0] += 1;
    }
    sizes
}

/// Per-user stratified random split. Every user's observations are shuffled
/// (seed-deterministic) and cut to the largest-remainder sizes of
/// `fractions`; a user with a single observation goes to train.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let total = fractions.0 + fractions.1 + fractions.2;
    if fractions.0 < 0.0 || fractions.1 < 0.0 || fractions.2 < 0.0 || (total - 1.0).abs() > 1e-9 {
        return Err(DmrError::InvalidConfig(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![Partition::Train; dataset.len()];
    for u in 0..dataset.num_users() {
        let mut obs_idx: Vec<usize> = dataset.user_observations(u).to_vec();
        obs_idx.shuffle(&mut rng);
        let sizes = partition_sizes(obs_idx.len(), fractions);
        for (pos, &n) in obs_idx.iter().enumerate() {
            labels[n] = if pos < sizes[0] {
                Partition::Train
            } else if pos < sizes[0] + sizes[1] {
                Partition::Valid
            } else {
                Partition::Test
            };
        }
    }
    Ok(dataset.clone().with_partitions(labels))
}

/// Pairwise-complete sample covariance over one partition, projected to SPD
/// by flooring eigenvalues at 1e-6. Each (k, l) entry is estimated from the
/// vectors where both aspects are present; aspect pairs with fewer than two
/// joint observations contribute 0 (they carry no evidence).
pub fn estimate_global_covariance(dataset: &Dataset, partition: Partition) -> Result<DMatrix<f64>> {
    let k = dataset.num_aspects();
    let vectors: Vec<&RatingVector> = dataset
        .observations()
        .iter()
        .filter(|o| o.partition == partition)
        .map(|o| &o.ratings)
        .collect();
    if vectors.len() < 2 {
        return Err(DmrError::Data(format!(
            "need at least 2 vectors in {partition} to estimate a covariance"
        )));
    }

    let mut mean = vec![0.0f64; k];
    let mut count = vec![0usize; k];
    for v in &vectors {
        for a in 0..k {
            if let Some(x) = v.get(a) {
                mean[a] += x;
                count[a] += 1;
            }
        }
    }
    for a in 0..k {
        if count[a] < 2 {
            return Err(DmrError::Data(format!(
                "aspect '{}' has {} observation(s) in {partition}; need ≥ 2",
                dataset.aspect_names()[a],
                count[a]
            )));
        }
        mean[a] /= count[a] as f64;
    }

    let mut cov = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let mut acc = 0.0;
            let mut n = 0usize;
            for v in &vectors {
                if let (Some(x), Some(y)) = (v.get(a), v.get(b)) {
                    acc += (x - mean[a]) * (y - mean[b]);
                    n += 1;
                }
            }
            let entry = if n >= 2 { acc / (n - 1) as f64 } else { 0.0 };
            cov[(a, b)] = entry;
            cov[(b, a)] = entry;
        }
    }
    Ok(floor_spd(&cov, 1e-6))
}

/// Projects a symmetric matrix to SPD by flooring its eigenvalues.
pub fn floor_spd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Shape of the covariances planted in a synthetic dataset.
#[derive(Debug, Clone)]
pub enum PlantedCovariance {
    /// Σ = I for every user and item (the null-effect control).
    Identity,
    /// Σ = D((1-ρ)I + ρ11ᵀ)D with the equicorrelation strength ρ jittered
    /// and the diagonal scales D drawn per entity. Aspects correlate
    /// positively, as rating aspects do in practice, while every user and
    /// item still gets its own covariance.
    Correlated { strength: f64 },
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_aspects: usize,
    pub latent_dim: usize,
    pub lambda: f64,
    /// Probability that each (user, item) cell is observed.
    pub density: f64,
    /// Probability that an observed vector drops each non-Overall aspect.
    pub missing_rate: f64,
    /// Standard deviation of ground-truth factor entries.
    pub factor_scale: f64,
    /// Base standard deviation of planted rating noise.
    pub noise_scale: f64,
    pub covariance: PlantedCovariance,
    /// Added to every predicted mean before sampling (e.g. 3.0 to center a
    /// 1-5 scale).
    pub mean_offset: f64,
    /// Clip sampled ratings into these bounds when set.
    pub clip: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 100,
            num_aspects: 4,
            latent_dim: 5,
            lambda: 0.5,
            density: 0.3,
            missing_rate: 0.0,
            factor_scale: 0.8,
            noise_scale: 1.1,
            covariance: PlantedCovariance::Correlated { strength: 0.8 },
            mean_offset: 0.0,
            clip: None,
            seed: 17,
        }
    }
}

fn planted_factor(
    kind: &PlantedCovariance,
    k: usize,
    noise_scale: f64,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    match kind {
        PlantedCovariance::Identity => DMatrix::identity(k, k) * (1.0 - jitter).sqrt(),
        PlantedCovariance::Correlated { strength } => {
            let rho = (strength * rng.random_range(0.75..1.25)).clamp(0.0, 0.95);
            let ones = DVector::from_element(k, 1.0);
            let corr = DMatrix::identity(k, k) * (1.0 - rho) + (&ones * ones.transpose()) * rho;
            // Noise magnitude ramps across aspects with the same ordering for
            // every entity, so some aspects are consistently harder to read
            // than others. The ramp has unit mean square, which keeps
            // noise_scale as the overall level. Entities jitter widely around
            // it, giving each user and item a covariance of its own.
            let ramp = aspect_noise_ramp(k);
            let scales = DVector::from_fn(k, |a, _| {
                noise_scale * ramp[a] * rng.random_range(0.65..1.45)
            });
            let d = DMatrix::from_diagonal(&scales);
            let mut cov = &d * corr * &d;
            for i in 0..k {
                cov[(i, i)] -= jitter;
            }
            symmetric_sqrt(&((&cov + cov.transpose()) * 0.5))
        }
    }
}

/// Per-aspect noise multipliers rising geometrically from 0.55 to 1.45,
/// normalized to unit mean square so they redistribute noise across aspects
/// without changing the overall level.
fn aspect_noise_ramp(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let lo: f64 = 0.45;
    let hi: f64 = 1.55;
    let raw: Vec<f64> = (0..k)
        .map(|a| lo * (hi / lo).powf(a as f64 / (k - 1) as f64))
        .collect();
    let rms = (raw.iter().map(|x| x * x).sum::<f64>() / k as f64).sqrt();
    raw.into_iter().map(|x| x / rms).collect()
}

/// Draws a ground-truth PMTF model and samples a rating dataset from it:
/// `r_ui ~ N((U_u ∘ V_i)Wᵀ + offset, Σ_ui)` at the configured density.
/// Returns the dataset (all observations labeled train; split separately)
/// and the generator model.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<(Dataset, PmtfModel)> {
    if cfg.num_users == 0 || cfg.num_items == 0 || cfg.num_aspects == 0 || cfg.latent_dim == 0 {
        return Err(DmrError::InvalidConfig(
            "synthetic dimensions must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.density) {
        return Err(DmrError::InvalidConfig("density must be in [0, 1]".into()));
    }
    let (m, n, k, d) = (cfg.num_users, cfg.num_items, cfg.num_aspects, cfg.latent_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut hyper = Hyperparams::defaults(k, d);
    hyper.lambda = cfg.lambda;
    let jitter = hyper.jitter;

    let gauss =
        |rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng| {
            DMatrix::from_fn(rows, cols, |_, _| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            })
        };
    let u_factors = gauss(m, d, cfg.factor_scale, &mut rng);
    let v_factors = gauss(n, d, cfg.factor_scale, &mut rng);
    // Aspect rows are drawn independently and normalized to equal power, so
    // every aspect carries the same signal strength and no single latent
    // direction dominates the projection.
    let row_norm = cfg.factor_scale * (d as f64).sqrt();
    let mut w_factors = gauss(k, d, cfg.factor_scale, &mut rng);
    for r in 0..k {
        let norm = w_factors.row(r).norm();
        if norm > 0.0 {
            let scale = row_norm / norm;
            for c in 0..d {
                w_factors[(r, c)] *= scale;
            }
        }
    }
    let user_cov_factors: Vec<DMatrix<f64>> = (0..m)
        .map(|_| planted_factor(&cfg.covariance, k, cfg.noise_scale, jitter, &mut rng))
        .collect();
    let item_cov_factors: Vec<DMatrix<f64>> = (0..n)
        .map(|_| planted_factor(&cfg.covariance, k, cfg.noise_scale, jitter, &mut rng))
        .collect();
    let aspect_names: Vec<String> = (0..k)
        .map(|a| {
            if a == 0 {
                "Overall".to_string()
            } else {
                format!("Aspect{a}")
            }
        })
        .collect();
    let model = PmtfModel::from_parts(
        hyper,
        aspect_names.clone(),
        u_factors,
        v_factors,
        w_factors,
        user_cov_factors,
        item_cov_factors,
    )?;

    let user_ids: Vec<String> = (0..m).map(|u| format!("u{u}")).collect();
    let item_ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
    let mut observations = Vec::new();
    for u in 0..m {
        for i in 0..n {
            if rng.random::<f64>() >= cfg.density {
                continue;
            }
            let mean = model.predict_ratings(u, i)?;
            let cov = model.point_covariance(u, i)?;
            let chol = Cholesky::new(cov).ok_or(DmrError::CovarianceNotInvertible)?;
            let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let sample = mean + chol.l() * z;
            let mut values: Vec<Option<f64>> = sample
                .iter()
                .map(|&v| {
                    let v = v + cfg.mean_offset;
                    Some(match cfg.clip {
                        Some((lo, hi)) => v.clamp(lo, hi),
                        None => v,
                    })
                })
                .collect();
            if cfg.missing_rate > 0.0 {
                for value in values.iter_mut().skip(1) {
                    if rng.random::<f64>() < cfg.missing_rate {
                        *value = None;
                    }
                }
            }
            observations.push(Observation {
                user: u,
                item: i,
                ratings: RatingVector::new(values)?,
                partition: Partition::Train,
            });
        }
    }
    let dataset = Dataset::new(aspect_names, user_ids, item_ids, observations, cfg.clip)?;
    Ok((dataset, model))
}
