//! Sum-decomposable potentials `F = (1/n) Σ F_i`.
//!
//! The sampled law is `π ∝ exp(−F)`. Client `i` can only evaluate its own
//! score `∇F_i`. Each potential carries the constants the theory needs:
//! per-client smoothness `L_i`, the smoothness `L` of `F`, the mean squared
//! smoothness `L̄ = (1/n) Σ L_i²`, and, where it is known analytically, the
//! LSI constant `μ`.

use std::fmt::Debug;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ElfError, Result};
use crate::linalg::{self, dist_sq, dot, matvec};
use crate::streams::{standard_normal, stream};

/// One client's share of the potential.
pub trait ClientPotential: Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn grad_into(&self, x: &[f64], out: &mut [f64]);
    /// A Lipschitz constant of the gradient.
    fn smoothness(&self) -> f64;
}

/// `F_i(x) = ½ (x − m_i)ᵀ A_i (x − m_i)` with `A_i` symmetric PSD.
#[derive(Debug, Clone)]
pub struct QuadraticClient {
    mean: Vec<f64>,
    precision: Vec<f64>,
    lipschitz: f64,
}

impl QuadraticClient {
    pub fn new(mean: Vec<f64>, precision: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if precision.nrows() != d || precision.ncols() != d {
            return Err(ElfError::DimensionMismatch {
                expected: d,
                got: precision.nrows(),
            });
        }
        if !linalg::is_symmetric(precision, 1e-12) {
            return Err(ElfError::NotPositiveDefinite("precision is not symmetric".into()));
        }
        let ev = linalg::sym_eigenvalues(precision);
        let scale = ev.last().copied().unwrap_or(0.0).abs().max(1.0);
        if ev[0] < -1e-12 * scale {
            return Err(ElfError::NotPositiveDefinite(format!(
                "client precision has eigenvalue {}",
                ev[0]
            )));
        }
        Ok(Self {
            mean,
            precision: linalg::row_major(precision),
            lipschitz: ev[d - 1].max(0.0),
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn precision(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_row_slice(d, d, &self.precision)
    }
}

impl ClientPotential for QuadraticClient {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut ad = vec![0.0; diff.len()];
        matvec(&self.precision, &diff, &mut ad);
        0.5 * dot(&diff, &ad)
    }

    fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.precision[i * d..(i + 1) * d];
            *o = row
                .iter()
                .zip(x.iter().zip(&self.mean))
                .map(|(a, (xj, mj))| a * (xj - mj))
                .sum();
        }
    }

    fn smoothness(&self) -> f64 {
        self.lipschitz
    }
}

/// Logistic-regression shard with a Gaussian prior:
/// `F_i(x) = (τ/2)‖x‖² + (1/|S_i|) Σ_{j∈S_i} log(1 + exp(−y_j a_jᵀx))`.
#[derive(Debug, Clone)]
pub struct LogisticClient {
    prior_precision: f64,
    labels: Vec<f64>,
    features: Vec<f64>,
    dim: usize,
    lipschitz: f64,
}

impl LogisticClient {
    pub fn new(prior_precision: f64, shard: &LogisticShard) -> Result<Self> {
        let rows = shard.labels.len();
        if rows == 0 {
            return Err(ElfError::InvalidPotential("empty data shard".into()));
        }
        if !(prior_precision > 0.0) {
            return Err(ElfError::InvalidPotential(
                "prior precision must be positive".into(),
            ));
        }
        let dim = shard.features[0].len();
        if dim == 0 {
            return Err(ElfError::InvalidPotential("shard has no feature columns".into()));
        }
        let mut features = Vec::with_capacity(rows * dim);
        for (r, row) in shard.features.iter().enumerate() {
            if row.len() != dim {
                return Err(ElfError::InvalidPotential(format!(
                    "row {r} has {} features, expected {dim}",
                    row.len()
                )));
            }
            features.extend_from_slice(row);
        }
        for &y in &shard.labels {
            if y != 1.0 && y != -1.0 {
                return Err(ElfError::InvalidPotential(format!("label {y} is not ±1")));
            }
        }
        let gram = shard_gram(&features, dim, rows);
        let top = *linalg::sym_eigenvalues(&gram).last().unwrap();
        Ok(Self {
            prior_precision,
            labels: shard.labels.clone(),
            features,
            dim,
            lipschitz: prior_precision + top / 4.0,
        })
    }

    /// `(1/|S|) Σ a_j a_jᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        shard_gram(&self.features, self.dim, self.labels.len())
    }
}

fn shard_gram(features: &[f64], dim: usize, rows: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(dim, dim);
    for r in 0..rows {
        let a = &features[r * dim..(r + 1) * dim];
        for i in 0..dim {
            for j in 0..dim {
                g[(i, j)] += a[i] * a[j];
            }
        }
    }
    g / rows as f64
}

fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl ClientPotential for LogisticClient {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        let loss: f64 = self
            .labels
            .iter()
            .enumerate()
            .map(|(r, y)| log1p_exp(-y * dot(&self.features[r * d..(r + 1) * d], x)))
            .sum();
        0.5 * self.prior_precision * dot(x, x) + loss / self.labels.len() as f64
    }

    fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let scale = 1.0 / self.labels.len() as f64;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.prior_precision * xi;
        }
        for (r, y) in self.labels.iter().enumerate() {
            let a = &self.features[r * d..(r + 1) * d];
            let w = -y * sigmoid(-y * dot(a, x)) * scale;
            for (o, aj) in out.iter_mut().zip(a) {
                *o += w * aj;
            }
        }
    }

    fn smoothness(&self) -> f64 {
        self.lipschitz
    }
}

/// `F_i(x) = −log Σ_c w_c exp(−‖x − m_c‖² / (2σ²))`; not log-concave in
/// general.
#[derive(Debug, Clone)]
pub struct MixtureClient {
    log_weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    sigma: f64,
    lipschitz: f64,
}

impl MixtureClient {
    pub fn new(spec: &MixtureClientSpec) -> Result<Self> {
        let MixtureClientSpec { weights, means, sigma } = spec;
        if weights.is_empty() || weights.len() != means.len() {
            return Err(ElfError::InvalidPotential(
                "mixture needs one positive weight per mean".into(),
            ));
        }
        if weights.iter().any(|w| !(*w > 0.0)) || !(*sigma > 0.0) {
            return Err(ElfError::InvalidPotential(
                "mixture weights and sigma must be positive".into(),
            ));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(ElfError::InvalidPotential("mixture means differ in dimension".into()));
        }
        let total: f64 = weights.iter().sum();
        let mut diam_sq: f64 = 0.0;
        for a in means {
            for b in means {
                diam_sq = diam_sq.max(dist_sq(a, b));
            }
        }
        // Hessian = I/σ² − Cov_r(m)/σ⁴ and Cov_r(m) ⪯ (diam²/4) I
        let s2 = sigma * sigma;
        let lipschitz = (1.0 / s2).max(diam_sq / (4.0 * s2 * s2) - 1.0 / s2);
        Ok(Self {
            log_weights: weights.iter().map(|w| (w / total).ln()).collect(),
            means: means.clone(),
            sigma: *sigma,
            lipschitz,
        })
    }

    fn log_terms(&self, x: &[f64]) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        self.log_weights
            .iter()
            .zip(&self.means)
            .map(|(lw, m)| lw - dist_sq(x, m) / (2.0 * s2))
            .collect()
    }
}

fn log_sum_exp(t: &[f64]) -> f64 {
    let max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + t.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl ClientPotential for MixtureClient {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        -log_sum_exp(&self.log_terms(x))
    }

    fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        let t = self.log_terms(x);
        let lse = log_sum_exp(&t);
        let s2 = self.sigma * self.sigma;
        out.fill(0.0);
        for (tc, m) in t.iter().zip(&self.means) {
            let r = (tc - lse).exp();
            for ((o, xj), mj) in out.iter_mut().zip(x).zip(m) {
                *o += r * (xj - mj) / s2;
            }
        }
    }

    fn smoothness(&self) -> f64 {
        self.lipschitz
    }
}

/// Closed-form Gaussian target `N(m, A⁻¹)` assembled from quadratic clients.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianTarget {
    /// Builds the global law from client splits `(m_i, A_i)`:
    /// `A = (1/n) Σ A_i`, `A m = (1/n) Σ A_i m_i`.
    pub fn from_clients(clients: &[QuadraticClient]) -> Result<Self> {
        let n = clients.len() as f64;
        let d = clients[0].dim();
        let mut a = DMatrix::zeros(d, d);
        let mut b = DVector::zeros(d);
        for c in clients {
            let ai = c.precision();
            b += &ai * DVector::from_column_slice(c.mean());
            a += ai;
        }
        a /= n;
        b /= n;
        let chol = a.clone().cholesky().ok_or_else(|| {
            ElfError::NotPositiveDefinite("average precision is singular".into())
        })?;
        let mean = chol.solve(&b);
        let covariance = chol.inverse();
        Ok(Self {
            mean,
            precision: a,
            covariance,
        })
    }
}

pub struct FederatedPotential {
    clients: Vec<Arc<dyn ClientPotential>>,
    dim: usize,
    lipschitz_clients: Vec<f64>,
    lipschitz: f64,
    l_bar: f64,
    mu: Option<f64>,
    gaussian: Option<GaussianTarget>,
}

impl Debug for FederatedPotential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FederatedPotential")
            .field("n", &self.clients.len())
            .field("d", &self.dim)
            .field("L_i", &self.lipschitz_clients)
            .field("L", &self.lipschitz)
            .field("L_bar", &self.l_bar)
            .field("mu", &self.mu)
            .finish()
    }
}

impl FederatedPotential {
    /// Assembles a potential from arbitrary clients. `lipschitz` defaults to
    /// `max_i L_i` when not given.
    pub fn new(
        clients: Vec<Arc<dyn ClientPotential>>,
        lipschitz: Option<f64>,
        mu: Option<f64>,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(ElfError::InvalidPotential("need at least one client".into()));
        }
        let dim = clients[0].dim();
        if dim == 0 {
            return Err(ElfError::InvalidPotential("dimension must be >= 1".into()));
        }
        if let Some(c) = clients.iter().find(|c| c.dim() != dim) {
            return Err(ElfError::DimensionMismatch {
                expected: dim,
                got: c.dim(),
            });
        }
        if let Some(m) = mu {
            if !(m > 0.0) {
                return Err(ElfError::InvalidPotential(format!("mu = {m} must be positive")));
            }
        }
        let lipschitz_clients: Vec<f64> = clients.iter().map(|c| c.smoothness()).collect();
        let max_li = lipschitz_clients.iter().copied().fold(0.0, f64::max);
        let l_bar =
            lipschitz_clients.iter().map(|l| l * l).sum::<f64>() / lipschitz_clients.len() as f64;
        Ok(Self {
            clients,
            dim,
            lipschitz_clients,
            lipschitz: lipschitz.unwrap_or(max_li),
            l_bar,
            mu,
            gaussian: None,
        })
    }

    pub fn gaussian(clients: Vec<QuadraticClient>) -> Result<Self> {
        if clients.is_empty() {
            return Err(ElfError::InvalidPotential("need at least one client".into()));
        }
        let target = GaussianTarget::from_clients(&clients)?;
        let ev = linalg::sym_eigenvalues(&target.precision);
        let arcs: Vec<Arc<dyn ClientPotential>> = clients
            .into_iter()
            .map(|c| Arc::new(c) as Arc<dyn ClientPotential>)
            .collect();
        let mut p = Self::new(arcs, Some(*ev.last().unwrap()), Some(ev[0]))?;
        p.gaussian = Some(target);
        Ok(p)
    }

    /// `n` clients that all hold `½‖x‖²`: the standard normal in `d` dimensions.
    pub fn standard_gaussian(dim: usize, n: usize) -> Result<Self> {
        if dim == 0 || n == 0 {
            return Err(ElfError::InvalidPotential("dim and clients must be >= 1".into()));
        }
        let eye = DMatrix::identity(dim, dim);
        let clients = (0..n)
            .map(|_| QuadraticClient::new(vec![0.0; dim], &eye))
            .collect::<Result<Vec<_>>>()?;
        Self::gaussian(clients)
    }

    pub fn bayesian_logistic(prior_precision: f64, shards: &[LogisticShard]) -> Result<Self> {
        if shards.is_empty() {
            return Err(ElfError::InvalidPotential("need at least one shard".into()));
        }
        let clients = shards
            .iter()
            .map(|s| LogisticClient::new(prior_precision, s))
            .collect::<Result<Vec<_>>>()?;
        let d = clients[0].dim;
        let mut avg = DMatrix::zeros(d, d);
        for c in &clients {
            if c.dim != d {
                return Err(ElfError::DimensionMismatch {
                    expected: d,
                    got: c.dim,
                });
            }
            avg += c.gram();
        }
        avg /= clients.len() as f64;
        let lipschitz = prior_precision + linalg::sym_eigenvalues(&avg).last().unwrap() / 4.0;
        let arcs = clients
            .into_iter()
            .map(|c| Arc::new(c) as Arc<dyn ClientPotential>)
            .collect();
        Self::new(arcs, Some(lipschitz), Some(prior_precision))
    }

    pub fn gaussian_mixture(clients: &[MixtureClientSpec]) -> Result<Self> {
        let arcs = clients
            .iter()
            .map(|c| MixtureClient::new(c).map(|m| Arc::new(m) as Arc<dyn ClientPotential>))
            .collect::<Result<Vec<_>>>()?;
        Self::new(arcs, None, None)
    }

    pub fn n(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lipschitz_clients(&self) -> &[f64] {
        &self.lipschitz_clients
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// `L̄ = (1/n) Σ L_i²`.
    pub fn l_bar(&self) -> f64 {
        self.l_bar
    }

    pub fn mu(&self) -> Option<f64> {
        self.mu
    }

    pub fn gaussian_target(&self) -> Option<&GaussianTarget> {
        self.gaussian.as_ref()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(ElfError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.clients.iter().map(|c| c.value(x)).sum::<f64>() / self.n() as f64)
    }

    pub fn component_value(&self, i: usize, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let c = self.client(i)?;
        Ok(c.value(x))
    }

    fn client(&self, i: usize) -> Result<&Arc<dyn ClientPotential>> {
        self.clients.get(i).ok_or(ElfError::ClientOutOfRange {
            index: i,
            n: self.n(),
        })
    }

    /// `∇F_i(x)`.
    pub fn grad_component(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.grad_component_into(i, x, &mut out)?;
        Ok(out)
    }

    pub fn grad_component_into(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check(x)?;
        self.check(out)?;
        self.client(i)?.grad_into(x, out);
        Ok(())
    }

    /// `∇F(x) = (1/n) Σ ∇F_i(x)`, summed left to right over clients.
    pub fn grad_full(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        let mut scratch = vec![0.0; self.dim];
        self.grad_full_into(x, &mut out, &mut scratch)?;
        Ok(out)
    }

    pub fn grad_full_into(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) -> Result<()> {
        self.check(x)?;
        self.check(out)?;
        self.check(scratch)?;
        out.fill(0.0);
        for c in &self.clients {
            c.grad_into(x, scratch);
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += *s;
            }
        }
        finish_average(out, self.n());
        Ok(())
    }
}

/// Divides an accumulated sum by `n`. Every client average in the crate goes
/// through this so that identical inputs give bitwise-identical results.
#[inline]
pub fn finish_average(acc: &mut [f64], n: usize) {
    let n = n as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
}

/// `(1/n) Σ vectors[i]`, left to right.
pub fn average_into<V: AsRef<[f64]>>(vectors: &[V], out: &mut [f64]) {
    out.fill(0.0);
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v.as_ref()) {
            *o += *x;
        }
    }
    finish_average(out, vectors.len());
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticClientSpec {
    pub mean: Vec<f64>,
    pub precision: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureClientSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticShard {
    pub labels: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

impl LogisticShard {
    /// Reads a headerless CSV: label in {−1, +1}, then the feature columns.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut shard = LogisticShard {
            labels: Vec::new(),
            features: Vec::new(),
        };
        for (r, rec) in reader.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|e| {
                        ElfError::InvalidPotential(format!(
                            "{}: row {r}: cannot parse `{f}`: {e}",
                            path.display()
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() < 2 {
                return Err(ElfError::InvalidPotential(format!(
                    "{}: row {r} needs a label and at least one feature",
                    path.display()
                )));
            }
            shard.labels.push(vals[0]);
            shard.features.push(vals[1..].to_vec());
        }
        Ok(shard)
    }

    /// Synthetic shards: features `N(0, I)/√d`, labels drawn from the logistic
    /// model at a random ground-truth vector. Fully determined by `seed`.
    pub fn synthetic(clients: usize, rows: usize, dim: usize, seed: u64) -> Vec<Self> {
        let mut truth_rng = stream(seed, "logistic-truth", &[]);
        let truth: Vec<f64> = (0..dim).map(|_| standard_normal(&mut truth_rng)).collect();
        let scale = 1.0 / (dim as f64).sqrt();
        (0..clients)
            .map(|c| {
                let mut rng = stream(seed, "logistic-shard", &[c as u64]);
                let mut shard = LogisticShard {
                    labels: Vec::with_capacity(rows),
                    features: Vec::with_capacity(rows),
                };
                for _ in 0..rows {
                    let a: Vec<f64> = (0..dim)
                        .map(|_| scale * standard_normal(&mut rng))
                        .collect();
                    let u: f64 = rand::Rng::random(&mut rng);
                    let y = if u < sigmoid(dot(&a, &truth)) { 1.0 } else { -1.0 };
                    shard.labels.push(y);
                    shard.features.push(a);
                }
                shard
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShardSource {
    Csv(PathBuf),
    Inline(LogisticShard),
}

/// Built-in potential menu, as written in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    Gaussian {
        clients: Vec<QuadraticClientSpec>,
    },
    StandardGaussian {
        dim: usize,
        clients: usize,
    },
    BayesianLogistic {
        prior_precision: f64,
        shards: Vec<ShardSource>,
    },
    SyntheticLogistic {
        prior_precision: f64,
        dim: usize,
        clients: usize,
        rows_per_client: usize,
        seed: u64,
    },
    GaussianMixture {
        clients: Vec<MixtureClientSpec>,
    },
}

/// Builds a potential from its config. Relative CSV paths resolve against
/// `base_dir`.
pub fn make_builtin(spec: &PotentialSpec, base_dir: Option<&Path>) -> Result<FederatedPotential> {
    match spec {
        PotentialSpec::Gaussian { clients } => {
            if clients.is_empty() {
                return Err(ElfError::InvalidPotential("need at least one client".into()));
            }
            let qs = clients
                .iter()
                .map(|c| QuadraticClient::new(c.mean.clone(), &linalg::to_matrix(&c.precision)?))
                .collect::<Result<Vec<_>>>()?;
            FederatedPotential::gaussian(qs)
        }
        PotentialSpec::StandardGaussian { dim, clients } => {
            FederatedPotential::standard_gaussian(*dim, *clients)
        }
        PotentialSpec::BayesianLogistic {
            prior_precision,
            shards,
        } => {
            let loaded = shards
                .iter()
                .map(|s| match s {
                    ShardSource::Inline(sh) => Ok(sh.clone()),
                    ShardSource::Csv(p) => {
                        let path = match base_dir {
                            Some(b) if p.is_relative() => b.join(p),
                            _ => p.clone(),
                        };
                        LogisticShard::from_csv(&path)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            FederatedPotential::bayesian_logistic(*prior_precision, &loaded)
        }
        PotentialSpec::SyntheticLogistic {
            prior_precision,
            dim,
            clients,
            rows_per_client,
            seed,
        } => {
            if *dim == 0 || *clients == 0 || *rows_per_client == 0 {
                return Err(ElfError::InvalidPotential(
                    "synthetic logistic needs dim, clients and rows_per_client >= 1".into(),
                ));
            }
            let shards = LogisticShard::synthetic(*clients, *rows_per_client, *dim, *seed);
            FederatedPotential::bayesian_logistic(*prior_precision, &shards)
        }
        PotentialSpec::GaussianMixture { clients } => FederatedPotential::gaussian_mixture(clients),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    fn random_point(rng: &mut impl Rng, d: usize, scale: f64) -> Vec<f64> {
        (0..d)
            .map(|_| scale * standard_normal(rng))
            .collect()
    }

    fn finite_difference(p: &FederatedPotential, i: usize, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|j| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[j] += h;
                xm[j] -= h;
                (p.component_value(i, &xp).unwrap() - p.component_value(i, &xm).unwrap())
                    / (2.0 * h)
            })
            .collect()
    }

    fn logistic_fixture() -> FederatedPotential {
        let shards = LogisticShard::synthetic(5, 20, 4, 3);
        FederatedPotential::bayesian_logistic(0.1, &shards).unwrap()
    }

    fn mixture_fixture() -> FederatedPotential {
        FederatedPotential::gaussian_mixture(&[
            MixtureClientSpec {
                weights: vec![0.5, 0.5],
                means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
                sigma: 1.0,
            },
            MixtureClientSpec {
                weights: vec![0.3, 0.7],
                means: vec![vec![0.0, 1.0], vec![0.0, -1.0]],
                sigma: 0.8,
            },
        ])
        .unwrap()
    }

    #[test]
    fn identity_quadratic_gradient() {
        let p = FederatedPotential::standard_gaussian(2, 1).unwrap();
        assert_eq!(p.grad_component(0, &[2.0, -1.0]).unwrap(), vec![2.0, -1.0]);
    }

    #[test]
    fn affine_quadratic_gradient() {
        let c = QuadraticClient::new(vec![1.0, 0.0], &diag(&[2.0, 1.0])).unwrap();
        let p = FederatedPotential::gaussian(vec![c]).unwrap();
        assert_eq!(p.grad_component(0, &[0.0, 0.0]).unwrap(), vec![-2.0, 0.0]);
    }

    #[test]
    fn grad_full_single_client_and_average() {
        let c = QuadraticClient::new(vec![1.0, 0.0], &diag(&[2.0, 1.0])).unwrap();
        let p = FederatedPotential::gaussian(vec![c]).unwrap();
        let x = [0.3, -0.7];
        assert_eq!(p.grad_full(&x).unwrap(), p.grad_component(0, &x).unwrap());

        let two = FederatedPotential::gaussian(vec![
            QuadraticClient::new(vec![0.0], &diag(&[1.0])).unwrap(),
            QuadraticClient::new(vec![0.0], &diag(&[3.0])).unwrap(),
        ])
        .unwrap();
        assert_eq!(two.grad_full(&[1.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn grad_full_equals_resummed_client_gradients() {
        let p = logistic_fixture();
        let mut rng = stream(9, "pts", &[]);
        for _ in 0..20 {
            let x = random_point(&mut rng, 4, 1.0);
            let grads: Vec<Vec<f64>> =
                (0..p.n()).map(|i| p.grad_component(i, &x).unwrap()).collect();
            let mut manual = vec![0.0; 4];
            average_into(&grads, &mut manual);
            assert_eq!(p.grad_full(&x).unwrap(), manual);
        }
    }

    #[test]
    fn errors_on_bad_index_and_dimension() {
        let p = FederatedPotential::standard_gaussian(2, 2).unwrap();
        assert!(matches!(
            p.grad_component(2, &[0.0, 0.0]),
            Err(ElfError::ClientOutOfRange { index: 2, n: 2 })
        ));
        assert!(matches!(
            p.grad_full(&[0.0]),
            Err(ElfError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn standard_gaussian_constants() {
        let p = FederatedPotential::standard_gaussian(3, 4).unwrap();
        assert_eq!(p.lipschitz(), 1.0);
        assert!(p.lipschitz_clients().iter().all(|&l| l == 1.0));
        assert_eq!(p.l_bar(), 1.0);
        assert_eq!(p.mu(), Some(1.0));
    }

    #[test]
    fn gaussian_split_reproduces_global_law() {
        let p = FederatedPotential::gaussian(vec![
            QuadraticClient::new(vec![1.0, 0.0], &diag(&[2.0, 0.0])).unwrap(),
            QuadraticClient::new(vec![0.0, -1.0], &diag(&[0.0, 4.0])).unwrap(),
        ])
        .unwrap();
        let t = p.gaussian_target().unwrap();
        assert!((t.mean[0] - 1.0).abs() < 1e-14 && (t.mean[1] + 1.0).abs() < 1e-14);
        assert_eq!(p.mu(), Some(1.0));
        assert_eq!(p.lipschitz(), 2.0);
        assert_eq!(p.lipschitz_clients(), &[2.0, 4.0]);
        assert_eq!(p.l_bar(), 10.0);
        // gradient of F vanishes at the global mean
        let g = p.grad_full(&[1.0, -1.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn rejects_non_psd_precision() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            QuadraticClient::new(vec![0.0, 0.0], &bad),
            Err(ElfError::NotPositiveDefinite(_))
        ));
        let singular = vec![QuadraticClient::new(vec![0.0, 0.0], &diag(&[1.0, 0.0])).unwrap()];
        assert!(FederatedPotential::gaussian(singular).is_err());
    }

    #[test]
    fn rejects_empty_shard() {
        let empty = LogisticShard {
            labels: vec![],
            features: vec![],
        };
        assert!(FederatedPotential::bayesian_logistic(0.1, &[empty]).is_err());
    }

    #[test]
    fn logistic_constants_follow_hessian_bound() {
        let shards = LogisticShard::synthetic(3, 10, 2, 1);
        let p = FederatedPotential::bayesian_logistic(0.1, &shards).unwrap();
        assert_eq!(p.mu(), Some(0.1));
        for (s, &li) in shards.iter().zip(p.lipschitz_clients()) {
            let rows = s.labels.len() as f64;
            let mut gram = DMatrix::<f64>::zeros(2, 2);
            for a in &s.features {
                let v = DVector::from_column_slice(a);
                gram += &v * v.transpose();
            }
            let top = linalg::sym_eigenvalues(&(gram / rows))[1];
            assert!((li - (0.1 + top / 4.0)).abs() < 1e-12);
            let r2 = s.features.iter().map(|a| dot(a, a)).fold(0.0, f64::max);
            assert!(li <= 0.1 + r2 / 4.0 + 1e-12);
        }
        let max_li = p.lipschitz_clients().iter().copied().fold(0.0, f64::max);
        assert!(p.lipschitz() <= max_li + 1e-12);
    }

    #[test]
    fn mixture_has_no_lsi_constant() {
        let p = mixture_fixture();
        assert_eq!(p.mu(), None);
        assert!(p.gaussian_target().is_none());
        assert!(p.grad_full(&[0.1, 0.2]).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let p = logistic_fixture();
        let mut rng = stream(4, "fd", &[]);
        let mut worst: f64 = 0.0;
        for t in 0..100 {
            let x = random_point(&mut rng, 4, 2.0);
            let i = t % p.n();
            let g = p.grad_component(i, &x).unwrap();
            let fd = finite_difference(&p, i, &x, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 1e-6, "max deviation {worst}");
    }

    #[test]
    fn builtins_pass_gradient_and_smoothness_certificates() {
        let mut rng = stream(8, "cert", &[]);
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 0.5]);
        let gaussian = FederatedPotential::gaussian(vec![
            QuadraticClient::new(vec![1.0, 0.0, -1.0], &cov).unwrap(),
            QuadraticClient::new(vec![0.0, 2.0, 0.0], &diag(&[0.5, 1.5, 3.0])).unwrap(),
        ])
        .unwrap();
        let logistic = FederatedPotential::bayesian_logistic(
            0.2,
            &LogisticShard::synthetic(3, 15, 3, 12),
        )
        .unwrap();
        let mixture = FederatedPotential::gaussian_mixture(&[MixtureClientSpec {
            weights: vec![1.0, 2.0, 1.0],
            means: vec![vec![0.0, 0.0, 0.0], vec![1.5, -1.0, 0.5], vec![-1.0, 1.0, 2.0]],
            sigma: 0.9,
        }])
        .unwrap();
        for p in [&gaussian, &logistic, &mixture] {
            let d = p.dim();
            for t in 0..100 {
                let x = random_point(&mut rng, d, 1.5);
                let i = t % p.n();
                let g = p.grad_component(i, &x).unwrap();
                let fd = finite_difference(p, i, &x, 1e-5);
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{p:?}: {a} vs {b}");
                }
            }
            for t in 0..1000 {
                let x = random_point(&mut rng, d, 2.0);
                let y = random_point(&mut rng, d, 2.0);
                let i = t % p.n();
                let gx = p.grad_component(i, &x).unwrap();
                let gy = p.grad_component(i, &y).unwrap();
                let lhs = dist_sq(&gx, &gy).sqrt();
                let rhs = p.lipschitz_clients()[i] * dist_sq(&x, &y).sqrt();
                assert!(lhs <= rhs * (1.0 + 1e-12), "{p:?}: {lhs} > {rhs}");
                let full = dist_sq(&p.grad_full(&x).unwrap(), &p.grad_full(&y).unwrap()).sqrt();
                assert!(full <= p.lipschitz() * dist_sq(&x, &y).sqrt() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn client_order_only_changes_summation_order() {
        let shards = LogisticShard::synthetic(4, 8, 3, 21);
        let p = FederatedPotential::bayesian_logistic(0.3, &shards).unwrap();
        let mut rev = shards.clone();
        rev.reverse();
        let q = FederatedPotential::bayesian_logistic(0.3, &rev).unwrap();
        let x = [0.4, -0.2, 1.1];
        // same client gradients, permuted
        for i in 0..4 {
            assert_eq!(
                p.grad_component(i, &x).unwrap(),
                q.grad_component(3 - i, &x).unwrap()
            );
        }
        let a = p.grad_full(&x).unwrap();
        let b = q.grad_full(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-15 * u.abs().max(1.0));
        }
        // re-summing q's client gradients in p's order is bitwise equal to p
        let resorted: Vec<Vec<f64>> = (0..4).rev().map(|i| q.grad_component(i, &x).unwrap()).collect();
        let mut c = vec![0.0; 3];
        average_into(&resorted, &mut c);
        assert_eq!(a, c);
    }

    #[test]
    fn csv_shards_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(&path, "1, 0.5, -1.0\n-1, 0.25, 2.0\n").unwrap();
        let shard = LogisticShard::from_csv(&path).unwrap();
        assert_eq!(shard.labels, vec![1.0, -1.0]);
        assert_eq!(shard.features[1], vec![0.25, 2.0]);
        let spec = PotentialSpec::BayesianLogistic {
            prior_precision: 1.0,
            shards: vec![ShardSource::Csv("s.csv".into())],
        };
        let p = make_builtin(&spec, Some(dir.path())).unwrap();
        assert_eq!((p.n(), p.dim()), (1, 2));
    }

    #[test]
    fn builtin_spec_parses() {
        let spec: PotentialSpec = serde_json::from_str(
            r#"{"kind":"gaussian","clients":[{"mean":[0,0],"precision":[[1,0],[0,1]]}]}"#,
        )
        .unwrap();
        let p = make_builtin(&spec, None).unwrap();
        assert_eq!(p.mu(), Some(1.0));
        let spec: PotentialSpec =
            serde_json::from_str(r#"{"kind":"standard_gaussian","dim":3,"clients":4}"#).unwrap();
        assert_eq!(make_builtin(&spec, None).unwrap().n(), 4);
    }
}
