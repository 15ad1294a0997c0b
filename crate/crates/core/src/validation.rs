//! Property suites with machine-readable pass/fail reports.
//!
//! Margins are signed slack: positive means the property holds with room
//! to spare, zero means it holds with equality.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::compressors::Compressor;
use crate::error::{ElfError, Result};
use crate::linalg::{dist_sq, norm_sq, sym_eigenvalues};
use crate::metrics::{
    chebyshev_lemma_check_law, gaussian_fisher, gaussian_kl, gaussian_w2, lmc_propagate, talagrand_w2_bound,
    GaussianLaw,
};
use crate::potentials::{FederatedPotential, QuadraticClient};
use crate::samplers::{init_state, step, Algorithm, ChainConfig, CompressorPair, InitSpec};
use crate::streams::{standard_normal, stream, ChainSeeds, Stream};
use crate::theory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Compressors,
    Recurrences,
    Theory,
    Oracles,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Compressors, Suite::Recurrences, Suite::Theory, Suite::Oracles];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Compressors => "compressors",
            Suite::Recurrences => "recurrences",
            Suite::Theory => "theory",
            Suite::Oracles => "oracles",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = ElfError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| ElfError::InvalidArgument(format!("unknown suite `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    pub detail: String,
}

impl PropertyResult {
    fn exact(name: impl Into<String>, margin: f64, tol: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: margin >= -tol,
            margin,
            se: None,
            detail: detail.into(),
        }
    }

    fn failed(name: impl Into<String>, err: ElfError) -> Self {
        Self {
            name: name.into(),
            passed: false,
            margin: f64::NAN,
            se: None,
            detail: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
}

impl SuiteReport {
    fn new(suite: Suite, properties: Vec<PropertyResult>) -> Self {
        Self {
            suite,
            passed: properties.iter().all(|p| p.passed),
            properties,
        }
    }
}

pub fn validate(suite: Suite, seed: u64) -> SuiteReport {
    let props = match suite {
        Suite::Compressors => compressors_suite(seed),
        Suite::Recurrences => recurrences_suite(seed),
        Suite::Theory => theory_suite(seed),
        Suite::Oracles => oracles_suite(seed),
    };
    SuiteReport::new(suite, props)
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// Compressors

/// Test input `i` of dimension `d`: Gaussian, heavy-tailed, tied integers
/// and sparse vectors in rotation. Never the zero vector.
pub fn test_input(i: usize, d: usize, rng: &mut Stream) -> Vec<f64> {
    let mut v: Vec<f64> = match i % 4 {
        0 => (0..d).map(|_| standard_normal(rng)).collect(),
        1 => (0..d)
            .map(|_| standard_normal(rng) / rng.random_range(0.05..1.0))
            .collect(),
        2 => (0..d).map(|_| rng.random_range(-3i32..=3) as f64).collect(),
        _ => (0..d)
            .map(|_| if rng.random::<f64>() < 0.8 { 0.0 } else { standard_normal(rng) })
            .collect(),
    };
    if v.iter().all(|x| *x == 0.0) {
        v[rng.random_range(0..d)] = 1.0;
    }
    v
}

/// The compressor menu at dimension `d`.
pub fn compressor_menu(d: usize) -> Vec<Compressor> {
    let mut out = vec![Compressor::Identity, Compressor::TopK { k: 1 }, Compressor::RandK { k: 1 }];
    if d > 2 {
        out.push(Compressor::TopK { k: d / 2 });
        out.push(Compressor::RandK { k: d / 2 });
    }
    out.extend([
        Compressor::ScaledNatural,
        Compressor::ScaledUnbiasedWrapper { omega: 0.0 },
        Compressor::ScaledUnbiasedWrapper { omega: 3.0 },
    ]);
    out
}

/// Checks `E‖C(x) − x‖² ≤ (1 − α)‖x‖²` through the ratio
/// `‖C(x) − x‖²/‖x‖²` over `inputs` vectors. Deterministic compressors
/// must satisfy it pointwise; random ones on average within 3 SE.
pub fn contractivity_check(c: &Compressor, d: usize, inputs: usize, seed: u64) -> PropertyResult {
    let name = format!("contractivity {c:?} d={d}");
    if let Err(e) = c.validate(d) {
        return PropertyResult::failed(name, e);
    }
    let alpha = c.alpha(d);
    let mut rng = stream(seed, "contractivity", &[d as u64]);
    let mut ratios = Vec::with_capacity(inputs);
    for i in 0..inputs {
        let x = test_input(i, d, &mut rng);
        let y = match c.compress(&x, &mut rng) {
            Ok(y) => y,
            Err(e) => return PropertyResult::failed(name, e),
        };
        ratios.push(dist_sq(&y, &x) / norm_sq(&x));
    }
    let bound = 1.0 - alpha;
    let tol = 1e-12;
    if c.is_deterministic() {
        let worst = ratios.iter().copied().fold(0.0, f64::max);
        PropertyResult {
            name,
            passed: worst <= bound + tol,
            margin: bound - worst,
            se: None,
            detail: format!("pointwise: max ratio {worst:.6e} vs 1 - alpha = {bound:.6e}"),
        }
    } else {
        let (mean, se) = mean_se(&ratios);
        PropertyResult {
            name,
            passed: mean <= bound + 3.0 * se + tol,
            margin: bound - mean,
            se: Some(se),
            detail: format!("mean ratio {mean:.6e} (se {se:.2e}) vs 1 - alpha = {bound:.6e}"),
        }
    }
}

fn payload_check(c: &Compressor, d: usize, seed: u64) -> PropertyResult {
    let mut rng = stream(seed, "payload", &[d as u64]);
    let x = test_input(0, d, &mut rng);
    let y = match c.compress(&x, &mut rng) {
        Ok(y) => y,
        Err(e) => return PropertyResult::failed(format!("payload {c:?} d={d}"), e),
    };
    let got = c.payload_floats(&y) as f64;
    let expected = match *c {
        Compressor::Identity | Compressor::ScaledNatural => d as f64,
        Compressor::TopK { k } | Compressor::RandK { k } => 2.0 * k as f64,
        Compressor::ScaledUnbiasedWrapper { omega } if omega == 0.0 => d as f64,
        Compressor::ScaledUnbiasedWrapper { .. } => {
            (2 * y.iter().filter(|v| **v != 0.0).count()).min(d) as f64
        }
    };
    PropertyResult::exact(
        format!("payload {c:?} d={d}"),
        -(got - expected).abs(),
        0.0,
        format!("{got} floats, expected {expected}"),
    )
}

fn compressors_suite(seed: u64) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    for d in [1usize, 5, 50] {
        for c in compressor_menu(d) {
            out.push(contractivity_check(&c, d, 2000, seed));
            out.push(payload_check(&c, d, seed));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Recurrences

/// The fixed heterogeneous 3-client quadratic used by recurrence audits.
pub fn audit_problem() -> FederatedPotential {
    let d = 4;
    let mut rng = stream(2024, "audit-problem", &[]);
    let clients = (0..3)
        .map(|_| {
            let b = DMatrix::from_fn(d, d, |_, _| standard_normal(&mut rng));
            let a = &b * b.transpose() / d as f64 + DMatrix::identity(d, d) * 0.5;
            let mean = (0..d).map(|_| 2.0 * standard_normal(&mut rng)).collect();
            QuadraticClient::new(mean, &a).expect("positive definite")
        })
        .collect();
    FederatedPotential::gaussian(clients).expect("valid problem")
}

/// Per-chain `(G^D_k, G^P_k, ‖x_k − x_{k−1}‖²)` for `k = 0..=rounds`.
pub fn lyapunov_paths(
    potential: &FederatedPotential,
    config: &ChainConfig,
    chains: usize,
    master_seed: u64,
) -> Result<Vec<Vec<[f64; 3]>>> {
    (0..chains)
        .into_par_iter()
        .map(|c| {
            let seeds = ChainSeeds::new(master_seed, c as u64);
            let mut state = init_state(config, potential, &seeds)?;
            let (g0d, g0p) = state.lyapunov(potential)?;
            let mut path = Vec::with_capacity(config.rounds + 1);
            path.push([g0d, g0p, 0.0]);
            let mut outbox = Vec::new();
            for _ in 0..config.rounds {
                outbox.clear();
                let diag = step(&mut state, potential, &config.compressors, &seeds, &mut outbox)?;
                path.push([diag.lyapunov_dual, diag.lyapunov_primal, diag.step_sq]);
            }
            Ok(path)
        })
        .collect()
}

/// Right-hand side of a one-step recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Recurrence {
    /// `G^D_{k+1} ≤ (1−p)G^D_k + (1−p)β‖Δx‖²`.
    Dual { p: f64, beta: f64 },
    /// `G^P_{k+1} ≤ (1−p)G^P_k + (1−p)β‖Δx‖²`.
    Primal { p: f64, beta: f64 },
    /// `G^D_{k+1} ≤ λ₁G^D_k + λ₂‖Δx‖² + λ₃G^P_k`.
    Bidirectional { lambda1: f64, lambda2: f64, lambda3: f64 },
}

impl Recurrence {
    /// The recurrence covering `algorithm` under the default parameters.
    pub fn for_algorithm(algorithm: Algorithm, compressors: &CompressorPair, potential: &FederatedPotential) -> Result<Self> {
        let d = potential.dim();
        let l_bar = potential.l_bar();
        let need = |c: Option<Compressor>, what| c.ok_or(ElfError::MissingState(what));
        match algorithm {
            Algorithm::Delf => {
                let a = need(compressors.uplink, "an uplink compressor")?.alpha(d);
                let (p, beta) = theory::recurrence_p_beta(a, theory::default_s(a), l_bar)?;
                Ok(Recurrence::Dual { p, beta })
            }
            Algorithm::Pelf => {
                let a = need(compressors.downlink, "a downlink compressor")?.alpha(d);
                let (p, beta) = theory::recurrence_p_beta(a, theory::default_s(a), l_bar)?;
                Ok(Recurrence::Primal { p, beta })
            }
            Algorithm::Belf => {
                let ad = need(compressors.uplink, "an uplink compressor")?.alpha(d);
                let ap = need(compressors.downlink, "a downlink compressor")?.alpha(d);
                let lam = theory::belf_lambdas(ad, ap, l_bar)?;
                Ok(Recurrence::Bidirectional {
                    lambda1: lam.lambda1,
                    lambda2: lam.lambda2,
                    lambda3: lam.lambda3,
                })
            }
            Algorithm::Lmc => Err(ElfError::InvalidArgument("LMC has no estimator recurrence".into())),
        }
    }

    /// `rhs − lhs` for one chain at step `k → k+1`.
    pub fn slack(&self, now: &[f64; 3], next: &[f64; 3]) -> f64 {
        let step = next[2];
        match *self {
            Recurrence::Dual { p, beta } => (1.0 - p) * now[0] + (1.0 - p) * beta * step - next[0],
            Recurrence::Primal { p, beta } => (1.0 - p) * now[1] + (1.0 - p) * beta * step - next[1],
            Recurrence::Bidirectional {
                lambda1,
                lambda2,
                lambda3,
            } => lambda1 * now[0] + lambda2 * step + lambda3 * now[1] - next[0],
        }
    }
}

/// Audits the recurrence in expectation at every step `k → k+1`: the mean
/// per-chain slack must be ≥ −3 SE.
pub fn recurrence_audit(recurrence: &Recurrence, paths: &[Vec<[f64; 3]>], label: &str) -> Vec<PropertyResult> {
    let rounds = paths.first().map(|p| p.len().saturating_sub(1)).unwrap_or(0);
    (0..rounds)
        .map(|k| {
            let slack: Vec<f64> = paths.iter().map(|p| recurrence.slack(&p[k], &p[k + 1])).collect();
            let (mean, se) = mean_se(&slack);
            let scale = paths.iter().map(|p| p[k + 1][0].abs() + p[k + 1][1].abs()).sum::<f64>() / paths.len() as f64;
            PropertyResult {
                name: format!("{label} k={k}"),
                passed: mean >= -3.0 * se - 1e-12 * (1.0 + scale),
                margin: mean,
                se: Some(se),
                detail: format!("mean slack {mean:.6e}, se {se:.2e}, {} chains", paths.len()),
            }
        })
        .collect()
}

/// Recurrence audit of one algorithm on the fixed problem.
pub fn audit_algorithm(
    algorithm: Algorithm,
    compressors: CompressorPair,
    chains: usize,
    rounds: usize,
    gamma: f64,
    seed: u64,
) -> Vec<PropertyResult> {
    let potential = audit_problem();
    let label = format!("{algorithm} {:?}/{:?}", compressors.uplink, compressors.downlink);
    let recurrence = match Recurrence::for_algorithm(algorithm, &compressors, &potential) {
        Ok(r) => r,
        Err(e) => return vec![PropertyResult::failed(label, e)],
    };
    let cfg = ChainConfig {
        algorithm,
        compressors,
        gamma,
        rounds,
        init: InitSpec::StandardNormal,
    };
    match lyapunov_paths(&potential, &cfg, chains, seed) {
        Ok(paths) => recurrence_audit(&recurrence, &paths, &label),
        Err(e) => vec![PropertyResult::failed(label, e)],
    }
}

fn recurrences_suite(seed: u64) -> Vec<PropertyResult> {
    let (chains, rounds, gamma) = (10_000, 20, 0.05);
    let mut out = Vec::new();
    for q in [Compressor::TopK { k: 1 }, Compressor::RandK { k: 1 }] {
        out.extend(audit_algorithm(
            Algorithm::Delf,
            CompressorPair { uplink: Some(q), downlink: None },
            chains,
            rounds,
            gamma,
            seed,
        ));
        out.extend(audit_algorithm(
            Algorithm::Pelf,
            CompressorPair { uplink: None, downlink: Some(q) },
            chains,
            rounds,
            gamma,
            seed,
        ));
        out.extend(audit_algorithm(
            Algorithm::Belf,
            CompressorPair { uplink: Some(q), downlink: Some(q) },
            chains,
            rounds,
            gamma,
            seed,
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Theory

/// Lower bound `q·w ≥ α_Pα_D / (24(1−α_P)(1−α_D))` over `pairs`
/// uniform draws from `(0,1)²`. Margin is the worst ratio minus one.
pub fn qw_check(pairs: usize, seed: u64) -> PropertyResult {
    let mut rng = stream(seed, "qw-pairs", &[]);
    let mut worst = f64::INFINITY;
    let mut worst_at = (0.0, 0.0);
    let mut violations = 0usize;
    for _ in 0..pairs {
        let ad: f64 = rng.random_range(f64::EPSILON..1.0);
        let ap: f64 = rng.random_range(f64::EPSILON..1.0);
        let lam = match theory::belf_lambdas(ad, ap, 1.0) {
            Ok(l) => l,
            Err(e) => return PropertyResult::failed("qw lower bound", e),
        };
        let ratio = lam.q * lam.w / (ap * ad / (24.0 * (1.0 - ap) * (1.0 - ad)));
        if ratio < 1.0 - 1e-12 {
            violations += 1;
        }
        if ratio < worst {
            worst = ratio;
            worst_at = (ad, ap);
        }
    }
    PropertyResult {
        name: "qw lower bound".into(),
        passed: violations == 0,
        margin: worst - 1.0,
        se: None,
        detail: format!(
            "{violations}/{pairs} pairs violate; worst ratio {worst:.6} at alpha_D = {:.6}, alpha_P = {:.6} \
             (the bound fails whenever alpha_D > 48/49)",
            worst_at.0, worst_at.1
        ),
    }
}

/// Reproduces the two reference step sizes to `tol`.
pub fn gamma_max_regressions(tol: f64) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    let expected = (0.25f64 / 3.0).sqrt() / 14.0;
    out.push(match theory::delf_max_stepsize(0.5, 1.0, 1.0, 1.0) {
        Ok(g) => PropertyResult::exact(
            "single-direction gamma_max alpha=0.5",
            tol - (g - expected).abs(),
            0.0,
            format!("{g:.12e} vs {expected:.12e} (~0.020620)"),
        ),
        Err(e) => PropertyResult::failed("single-direction gamma_max alpha=0.5", e),
    });
    let expected = 0.25 / 371.25;
    out.push(match theory::belf_max_stepsize(0.5, 0.5, 1.0, 1.0) {
        Ok(g) => PropertyResult::exact(
            "bidirectional gamma_max alpha_D=alpha_P=0.5",
            tol - (g - expected).abs(),
            0.0,
            format!("{g:.12e} vs {expected:.12e} (~6.734e-4)"),
        ),
        Err(e) => PropertyResult::failed("bidirectional gamma_max alpha_D=alpha_P=0.5", e),
    });
    out
}

fn theory_suite(seed: u64) -> Vec<PropertyResult> {
    let mut out = gamma_max_regressions(1e-9);
    out.push(qw_check(1000, seed));

    let mut rng = stream(seed, "theory-positivity", &[]);
    let mut worst = f64::INFINITY;
    let mut failure = None;
    for _ in 0..1000 {
        let a: f64 = rng.random_range(0.01..=1.0);
        let b: f64 = rng.random_range(0.01..0.99);
        let l_bar: f64 = rng.random_range(0.1..10.0);
        let l = l_bar.sqrt() * rng.random_range(1.0..2.0);
        let mu = rng.random_range(0.01..1.0) * l;
        let check = || -> Result<f64> {
            let g = theory::delf_max_stepsize(a, l_bar, l, mu)?;
            let c = theory::delf_constants(a, l_bar, l, mu, g, 3, None)?;
            let g2 = theory::belf_max_stepsize(b, b, l_bar, mu)?;
            let c2 = theory::belf_constants(b, b, l_bar, mu, g2, 3, l)?;
            Ok([c.p, c.c, c.tau, g, c2.c, c2.d, c2.tau, g2, 1.0 - c.p + 1e-300]
                .into_iter()
                .fold(f64::INFINITY, f64::min))
        };
        match check() {
            Ok(m) => worst = worst.min(m),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    out.push(match failure {
        None => PropertyResult::exact(
            "constants positive for admissible inputs",
            worst,
            0.0,
            "min over p, 1-p, C, D, tau, gamma_max across 1000 draws",
        ),
        Some(e) => PropertyResult::failed("constants positive for admissible inputs", e),
    });

    let mut worst = f64::INFINITY;
    for i in 0..100 {
        let ad = 0.01 + 0.98 * i as f64 / 99.0;
        if let Ok(lam) = theory::belf_lambdas(ad, 0.5, 1.0) {
            worst = worst.min(-(lam.lambda1 - (1.0 - ad / 2.0)).abs());
        }
    }
    out.push(PropertyResult::exact("lambda1 = 1 - alpha_D/2", worst, 1e-12, "default q = s choice"));

    out.push(
        match (
            theory::iteration_budget_delf(0.1, 0.5, 1.0, 1.0, 1.0, 2, 1.0, 0.0),
            theory::iteration_budget_delf(0.05, 0.5, 1.0, 1.0, 1.0, 2, 1.0, 0.0),
        ) {
            (Ok(a), Ok(b)) => PropertyResult::exact(
                "budget: halving epsilon at least doubles K",
                b.rounds as f64 - 2.0 * a.rounds as f64,
                0.0,
                format!("K(0.1) = {}, K(0.05) = {}", a.rounds, b.rounds),
            ),
            (Err(e), _) | (_, Err(e)) => PropertyResult::failed("budget: halving epsilon at least doubles K", e),
        },
    );
    out
}

// ---------------------------------------------------------------------------
// Oracles

fn law(mean: &[f64], cov: DMatrix<f64>) -> GaussianLaw {
    GaussianLaw {
        mean: DVector::from_column_slice(mean),
        covariance: cov,
    }
}

fn random_spd(d: usize, rng: &mut Stream) -> DMatrix<f64> {
    let b = DMatrix::from_fn(d, d, |_, _| standard_normal(rng));
    &b * b.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1
}

fn oracles_suite(seed: u64) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    let n01 = law(&[0.0], DMatrix::identity(1, 1));
    let n11 = law(&[1.0], DMatrix::identity(1, 1));
    let n14 = law(&[1.0], DMatrix::from_element(1, 1, 4.0));
    let closed = |name: &str, got: Result<f64>, expected: f64| match got {
        Ok(v) => PropertyResult::exact(name, 1e-12 - (v - expected).abs(), 0.0, format!("{v:.15e} vs {expected}")),
        Err(e) => PropertyResult::failed(name, e),
    };
    out.push(closed("KL(N(0,1)|N(0,1)) = 0", gaussian_kl(&n01, &n01), 0.0));
    out.push(closed("KL(N(1,1)|N(0,1)) = 1/2", gaussian_kl(&n11, &n01), 0.5));
    out.push(closed("W2(N(1,4), N(0,1)) = sqrt 2", gaussian_w2(&n14, &n01), 2f64.sqrt()));
    out.push(closed("FI(N(1,1)|N(0,1)) = 1", gaussian_fisher(&n11, &n01), 1.0));

    let mut rng = stream(seed, "oracle-pairs", &[]);
    let (mut lsi, mut tal, mut lemma) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut failure = None;
    for _ in 0..1000 {
        let d = rng.random_range(1..=5usize);
        let a_prec = random_spd(d, &mut rng);
        let m_t: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let m_a: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let cov_a = random_spd(d, &mut rng);
        let run = || -> Result<(f64, f64, f64)> {
            let target_client = QuadraticClient::new(m_t.clone(), &a_prec)?;
            let potential = FederatedPotential::gaussian(vec![target_client])?;
            let target = GaussianLaw::from_target(potential.gaussian_target().unwrap());
            let mu = sym_eigenvalues(&a_prec)[0];
            let nu = law(&m_a, cov_a.clone());
            let kl = gaussian_kl(&nu, &target)?;
            let fi = gaussian_fisher(&nu, &target)?;
            let w2 = gaussian_w2(&nu, &target)?;
            let check = chebyshev_lemma_check_law(&nu, &potential)?;
            let scale = 1.0 + kl;
            Ok((
                (fi / (2.0 * mu) - kl) / scale,
                (talagrand_w2_bound(kl, mu)? - w2) / (1.0 + w2),
                (check.rhs - check.lhs) / (1.0 + check.rhs),
            ))
        };
        match run() {
            Ok((a, b, c)) => {
                lsi = lsi.min(a);
                tal = tal.min(b);
                lemma = lemma.min(c);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    if let Some(e) = failure {
        out.push(PropertyResult::failed("random Gaussian pairs", e));
    } else {
        out.push(PropertyResult::exact("LSI: KL <= FI/(2 mu) on 1000 pairs", lsi, 1e-10, "relative slack"));
        out.push(PropertyResult::exact("Talagrand: W2 <= sqrt(2 KL/mu) on 1000 pairs", tal, 1e-10, "relative slack"));
        out.push(PropertyResult::exact(
            "E|grad F|^2 <= FI + 2dL on 1000 pairs",
            lemma,
            1e-10,
            "relative slack",
        ));
    }

    let potential = FederatedPotential::standard_gaussian(1, 1).expect("valid");
    let target = potential.gaussian_target().unwrap();
    let gamma = 0.1;
    let mut nu = GaussianLaw::standard(1);
    for _ in 0..2000 {
        nu = lmc_propagate(&nu, target, gamma);
    }
    let s2 = 1.0 / (1.0 - gamma / 2.0);
    let kl_closed = 0.5 * (s2 - 1.0 - s2.ln());
    out.push(closed("LMC stationary variance 1/(1 - gamma/2)", Ok(nu.covariance[(0, 0)]), s2));
    out.push(closed(
        "LMC stationary KL closed form",
        gaussian_kl(&nu, &GaussianLaw::from_target(target)),
        kl_closed,
    ));
    out
}
