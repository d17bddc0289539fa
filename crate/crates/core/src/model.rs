//! PMTF parameter container: latent factors, personalized covariance factors,
//! covariance composition, and rating/difference prediction.
//!
//! A rating vector is modeled as `r_ui ~ N((U_u ∘ V_i)Wᵀ, Σ_ui)` with the
//! personalized covariance mixed from a user part and an item part,
//! `Σ_ui = λΣ_u + (1-λ)Σ_i`. Covariances are carried as unconstrained factors
//! `L` with `Σ = LLᵀ + εI`, which keeps every composed covariance symmetric
//! positive definite through arbitrary gradient updates.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::{DmrError, Result};

/// Model-level hyperparameters: dimensions, margin, covariance mixing, and
/// the priors (normal-inverse-Wishart on covariances, zero-mean Gaussians on
/// factors).
#[derive(Debug, Clone)]
pub struct Hyperparams {
    /// Latent dimensionality d of U, V, W rows.
    pub latent_dim: usize,
    /// Integration margin ξ ≥ 0.
    pub margin: f64,
    /// User-side covariance mixing weight λ ∈ [0, 1].
    pub lambda: f64,
    /// Inverse-Wishart degrees of freedom ν > K-1.
    pub nu: f64,
    /// Inverse-Wishart scale Ψ = ν·Σ_priori.
    pub psi: DMatrix<f64>,
    /// Gaussian prior standard deviations for U, V, W entries.
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub sigma_w: f64,
    /// Jitter ε added to LLᵀ so covariances stay strictly positive definite.
    pub jitter: f64,
}

impl Hyperparams {
    /// Defaults: λ=0.5, ξ=0.2, ν=K+2 (smallest value with a finite prior
    /// mean), Ψ=ν·I, ε=1e-6.
    ///
    /// The factor priors are wide (σ_U=σ_V=10, σ_W=50) because every sampled
    /// triple contributes the full prior gradient of the rows it touches, so
    /// a row's shrinkage rate scales with how often it is sampled. W appears
    /// in every triple and needs the widest prior; tight priors here make
    /// the factors decay to zero before the likelihood signal can form.
    pub fn defaults(num_aspects: usize, latent_dim: usize) -> Self {
        let nu = num_aspects as f64 + 2.0;
        Self {
            latent_dim,
            margin: 0.2,
            lambda: 0.5,
            nu,
            psi: DMatrix::identity(num_aspects, num_aspects) * nu,
            sigma_u: 10.0,
            sigma_v: 10.0,
            sigma_w: 50.0,
            jitter: 1e-6,
        }
    }

    /// Centers the inverse-Wishart prior on an estimated global covariance:
    /// Ψ = ν·Σ_priori.
    pub fn with_prior_covariance(mut self, sigma_priori: &DMatrix<f64>) -> Self {
        self.psi = sigma_priori * self.nu;
        self
    }

    pub fn num_aspects(&self) -> usize {
        self.psi.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.psi.nrows();
        if self.psi.ncols() != k {
            return Err(DmrError::InvalidConfig("psi must be square".into()));
        }
        if self.latent_dim == 0 {
            return Err(DmrError::InvalidConfig("latent_dim must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(DmrError::InvalidConfig(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.margin < 0.0 {
            return Err(DmrError::InvalidConfig("margin must be ≥ 0".into()));
        }
        if self.nu <= k as f64 - 1.0 {
            return Err(DmrError::InvalidConfig(format!(
                "nu {} must exceed K-1 = {}",
                self.nu,
                k - 1
            )));
        }
        if self.sigma_u <= 0.0 || self.sigma_v <= 0.0 || self.sigma_w <= 0.0 {
            return Err(DmrError::InvalidConfig(
                "factor prior sigmas must be positive".into(),
            ));
        }
        if self.jitter <= 0.0 {
            return Err(DmrError::InvalidConfig("jitter must be positive".into()));
        }
        Ok(())
    }
}

/// `LLᵀ + εI`: symmetric by construction, smallest eigenvalue ≥ ε.
pub fn covariance_from_factor(l: &DMatrix<f64>, jitter: f64) -> DMatrix<f64> {
    let mut cov = l * l.transpose();
    for i in 0..cov.nrows() {
        cov[(i, i)] += jitter;
    }
    // l*lᵀ is symmetric up to round-off; make it exact so downstream
    // symmetry checks are strict.
    for r in 0..cov.nrows() {
        for c in (r + 1)..cov.ncols() {
            let avg = 0.5 * (cov[(r, c)] + cov[(c, r)]);
            cov[(r, c)] = avg;
            cov[(c, r)] = avg;
        }
    }
    cov
}

/// Symmetric positive square root of a symmetric PSD matrix, with negative
/// round-off eigenvalues clamped to zero.
pub fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// The PMTF parameter set.
#[derive(Debug, Clone)]
pub struct PmtfModel {
    pub hyper: Hyperparams,
    /// Aspect names; index 0 is the Overall aspect.
    pub aspect_names: Vec<String>,
    /// M×d user factors U.
    pub u_factors: DMatrix<f64>,
    /// N×d item factors V.
    pub v_factors: DMatrix<f64>,
    /// K×d aspect factors W.
    pub w_factors: DMatrix<f64>,
    /// Per-user covariance factors L_u (Σ_u = L_uL_uᵀ + εI).
    pub user_cov_factors: Vec<DMatrix<f64>>,
    /// Per-item covariance factors L_i.
    pub item_cov_factors: Vec<DMatrix<f64>>,
}

impl PmtfModel {
    /// Fresh model: factor entries uniform(-0.5, 0.5), every covariance
    /// factor at the symmetric root of the prior covariance Ψ/ν (so training
    /// starts from the global prior).
    ///
    /// The all-zeros point is a fixed point of the trilinear prediction, and
    /// near it the Gaussian priors outpull the likelihood chain, so tiny
    /// initial factors can shrink to exact zero instead of learning. The
    /// 0.5 half-width keeps the initial predicted differences large enough
    /// that the data term dominates from the first step.
    pub fn init(
        num_users: usize,
        num_items: usize,
        aspect_names: Vec<String>,
        hyper: Hyperparams,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        let k = hyper.num_aspects();
        if aspect_names.len() != k {
            return Err(DmrError::DimensionMismatch(format!(
                "{} aspect names but psi is {}x{}",
                aspect_names.len(),
                k,
                k
            )));
        }
        let d = hyper.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| {
            DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-0.5..0.5))
        };
        let u_factors = draw(num_users, d);
        let v_factors = draw(num_items, d);
        let w_factors = draw(k, d);

        // Σ_priori - εI has the exact prior as LLᵀ + εI; clamping covers the
        // case where the prior itself sits at the ε floor.
        let sigma_priori = &hyper.psi / hyper.nu;
        let mut shifted = sigma_priori.clone();
        for i in 0..k {
            shifted[(i, i)] -= hyper.jitter;
        }
        let l0 = symmetric_sqrt(&shifted);
        Ok(Self {
            aspect_names,
            u_factors,
            v_factors,
            w_factors,
            user_cov_factors: vec![l0.clone(); num_users],
            item_cov_factors: vec![l0; num_items],
            hyper,
        })
    }

    /// Builds a model from explicit parts (fixtures, planted ground truth).
    pub fn from_parts(
        hyper: Hyperparams,
        aspect_names: Vec<String>,
        u_factors: DMatrix<f64>,
        v_factors: DMatrix<f64>,
        w_factors: DMatrix<f64>,
        user_cov_factors: Vec<DMatrix<f64>>,
        item_cov_factors: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        hyper.validate()?;
        let k = hyper.num_aspects();
        let d = hyper.latent_dim;
        if u_factors.ncols() != d || v_factors.ncols() != d || w_factors.ncols() != d {
            return Err(DmrError::DimensionMismatch(
                "factor matrices must have latent_dim columns".into(),
            ));
        }
        if w_factors.nrows() != k || aspect_names.len() != k {
            return Err(DmrError::DimensionMismatch(
                "aspect factor rows and names must match psi dimension".into(),
            ));
        }
        if user_cov_factors.len() != u_factors.nrows()
            || item_cov_factors.len() != v_factors.nrows()
        {
            return Err(DmrError::DimensionMismatch(
                "one covariance factor required per user and per item".into(),
            ));
        }
        if user_cov_factors
            .iter()
            .chain(item_cov_factors.iter())
            .any(|l| l.nrows() != k || l.ncols() != k)
        {
            return Err(DmrError::DimensionMismatch(
                "covariance factors must be K×K".into(),
            ));
        }
        Ok(Self {
            hyper,
            aspect_names,
            u_factors,
            v_factors,
            w_factors,
            user_cov_factors,
            item_cov_factors,
        })
    }

    pub fn num_users(&self) -> usize {
        self.u_factors.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.v_factors.nrows()
    }

    pub fn num_aspects(&self) -> usize {
        self.w_factors.nrows()
    }

    pub fn lambda(&self) -> f64 {
        self.hyper.lambda
    }

    pub fn jitter(&self) -> f64 {
        self.hyper.jitter
    }

    /// Freezes every covariance at the identity (the DMR-I ablation):
    /// L = √(1-ε)·I makes LLᵀ + εI exactly I.
    pub fn set_identity_covariances(&mut self) {
        let k = self.num_aspects();
        let l = DMatrix::identity(k, k) * (1.0 - self.hyper.jitter).sqrt();
        self.user_cov_factors = vec![l.clone(); self.num_users()];
        self.item_cov_factors = vec![l; self.num_items()];
    }

    fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.num_users() {
            return Err(DmrError::IndexOutOfRange(format!(
                "user {u} of {}",
                self.num_users()
            )));
        }
        Ok(())
    }

    fn check_item(&self, i: usize) -> Result<()> {
        if i >= self.num_items() {
            return Err(DmrError::IndexOutOfRange(format!(
                "item {i} of {}",
                self.num_items()
            )));
        }
        Ok(())
    }

    /// Predicted rating vector `r̂_ui = (U_u ∘ V_i)Wᵀ`.
    pub fn predict_ratings(&self, u: usize, i: usize) -> Result<DVector<f64>> {
        self.check_user(u)?;
        self.check_item(i)?;
        let uv = self
            .u_factors
            .row(u)
            .component_mul(&self.v_factors.row(i));
        Ok(&self.w_factors * uv.transpose())
    }

    /// Predicted difference `d̂_uij = (U_u ∘ (V_i - V_j))Wᵀ`, which equals
    /// `predict_ratings(u,i) - predict_ratings(u,j)` by bilinearity.
    pub fn predict_difference(&self, u: usize, i: usize, j: usize) -> Result<DVector<f64>> {
        if i == j {
            return Err(DmrError::SameItem(i));
        }
        self.check_user(u)?;
        self.check_item(i)?;
        self.check_item(j)?;
        let vdiff = self.v_factors.row(i) - self.v_factors.row(j);
        let uv = self.u_factors.row(u).component_mul(&vdiff);
        Ok(&self.w_factors * uv.transpose())
    }

    /// Σ_u = L_uL_uᵀ + εI.
    pub fn user_covariance(&self, u: usize) -> Result<DMatrix<f64>> {
        self.check_user(u)?;
        Ok(covariance_from_factor(
            &self.user_cov_factors[u],
            self.hyper.jitter,
        ))
    }

    /// Σ_i = L_iL_iᵀ + εI.
    pub fn item_covariance(&self, i: usize) -> Result<DMatrix<f64>> {
        self.check_item(i)?;
        Ok(covariance_from_factor(
            &self.item_cov_factors[i],
            self.hyper.jitter,
        ))
    }

    /// Rating covariance Σ_ui = λΣ_u + (1-λ)Σ_i.
    pub fn point_covariance(&self, u: usize, i: usize) -> Result<DMatrix<f64>> {
        let lam = self.hyper.lambda;
        Ok(self.user_covariance(u)? * lam + self.item_covariance(i)? * (1.0 - lam))
    }

    /// Pair covariance Σ_uij = Σ_ui + Σ_uj = 2λΣ_u + (1-λ)(Σ_i + Σ_j).
    pub fn pair_covariance(&self, u: usize, i: usize, j: usize) -> Result<DMatrix<f64>> {
        if i == j {
            return Err(DmrError::SameItem(i));
        }
        let lam = self.hyper.lambda;
        let user_part = self.user_covariance(u)? * (2.0 * lam);
        let item_part = (self.item_covariance(i)? + self.item_covariance(j)?) * (1.0 - lam);
        Ok(user_part + item_part)
    }

    /// Writes the model as a versioned little-endian binary checkpoint. The
    /// exact f64 bit patterns are preserved, so save → load round-trips
    /// bitwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut w, CHECKPOINT_VERSION)?;
        write_u64(&mut w, self.num_users() as u64)?;
        write_u64(&mut w, self.num_items() as u64)?;
        write_u64(&mut w, self.num_aspects() as u64)?;
        write_u64(&mut w, self.hyper.latent_dim as u64)?;
        for v in [
            self.hyper.margin,
            self.hyper.lambda,
            self.hyper.nu,
            self.hyper.jitter,
            self.hyper.sigma_u,
            self.hyper.sigma_v,
            self.hyper.sigma_w,
        ] {
            write_f64(&mut w, v)?;
        }
        write_matrix(&mut w, &self.hyper.psi)?;
        for name in &self.aspect_names {
            let bytes = name.as_bytes();
            write_u32(&mut w, bytes.len() as u32)?;
            w.write_all(bytes)?;
        }
        write_matrix(&mut w, &self.u_factors)?;
        write_matrix(&mut w, &self.v_factors)?;
        write_matrix(&mut w, &self.w_factors)?;
        for l in &self.user_cov_factors {
            write_matrix(&mut w, l)?;
        }
        for l in &self.item_cov_factors {
            write_matrix(&mut w, l)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(DmrError::InvalidCheckpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(DmrError::InvalidCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let m = read_u64(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let k = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        if m.max(n).max(k).max(d) > 100_000_000 {
            return Err(DmrError::InvalidCheckpoint("implausible dimensions".into()));
        }
        let margin = read_f64(&mut r)?;
        let lambda = read_f64(&mut r)?;
        let nu = read_f64(&mut r)?;
        let jitter = read_f64(&mut r)?;
        let sigma_u = read_f64(&mut r)?;
        let sigma_v = read_f64(&mut r)?;
        let sigma_w = read_f64(&mut r)?;
        let psi = read_matrix(&mut r, k, k)?;
        let mut aspect_names = Vec::with_capacity(k);
        for _ in 0..k {
            let len = read_u32(&mut r)? as usize;
            if len > 1_000_000 {
                return Err(DmrError::InvalidCheckpoint("implausible name length".into()));
            }
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            aspect_names.push(String::from_utf8(buf).map_err(|_| {
                DmrError::InvalidCheckpoint("aspect name is not valid UTF-8".into())
            })?);
        }
        let u_factors = read_matrix(&mut r, m, d)?;
        let v_factors = read_matrix(&mut r, n, d)?;
        let w_factors = read_matrix(&mut r, k, d)?;
        let mut user_cov_factors = Vec::with_capacity(m);
        for _ in 0..m {
            user_cov_factors.push(read_matrix(&mut r, k, k)?);
        }
        let mut item_cov_factors = Vec::with_capacity(n);
        for _ in 0..n {
            item_cov_factors.push(read_matrix(&mut r, k, k)?);
        }
        let hyper = Hyperparams {
            latent_dim: d,
            margin,
            lambda,
            nu,
            psi,
            sigma_u,
            sigma_v,
            sigma_w,
            jitter,
        };
        PmtfModel::from_parts(
            hyper,
            aspect_names,
            u_factors,
            v_factors,
            w_factors,
            user_cov_factors,
            item_cov_factors,
        )
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PMTF";
const CHECKPOINT_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> std::io::Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            write_f64(w, m[(r, c)])?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> std::io::Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(rows, cols);
    for row in 0..rows {
        for col in 0..cols {
            m[(row, col)] = read_f64(r)?;
        }
    }
    Ok(m)
}
