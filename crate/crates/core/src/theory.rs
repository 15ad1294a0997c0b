//! Constants, step-size conditions and iteration budgets for the
//! single-direction (D-ELF, P-ELF) and bidirectional (B-ELF) analyses.
//!
//! Free Young parameters follow one rule: `(1−α)(1+s) = 1 − α/2` for the
//! single-direction recurrences, and `(1−α_D)(1+q)² = 1 − α_D/2`, `q = s`,
//! `u = 1`, `(1−α_P)(1+w) = 1 − α_P/2` for B-ELF. At `α = 1` the rule sends
//! `s → ∞`, so `β → 0` and `p = 1`.

use serde::Serialize;

use crate::error::{ElfError, Result};

/// Number of bisection steps used when certifying a budget step size.
const BISECTION_STEPS: usize = 200;

/// Flags the two forms of the discretisation factor in τ.
pub const TAU_NOTE: &str = "single-direction tau uses (16 gamma^2 d + 4 d gamma); \
bidirectional tau uses (16 gamma^2 d L + 4 d gamma); the single-direction derivation carries 16 L gamma^2 d";

fn check_alpha(name: &str, alpha: f64, closed: bool) -> Result<()> {
    let ok = alpha > 0.0 && if closed { alpha <= 1.0 } else { alpha < 1.0 };
    if ok && alpha.is_finite() {
        Ok(())
    } else {
        let range = if closed { "(0, 1]" } else { "(0, 1)" };
        Err(ElfError::Inadmissible(format!("{name} = {alpha} must lie in {range}")))
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ElfError::Inadmissible(format!("{name} = {v} must be positive and finite")))
    }
}

fn require_mu(mu: Option<f64>) -> Result<f64> {
    match mu {
        Some(m) if m > 0.0 && m.is_finite() => Ok(m),
        Some(m) => Err(ElfError::MissingLsiConstant(format!("mu = {m} is not positive"))),
        None => Err(ElfError::MissingLsiConstant(
            "the target has no log-Sobolev constant; set `potential.mu` or give an explicit gamma".into(),
        )),
    }
}

/// Default `s`: solves `(1−α)(1+s) = 1 − α/2`. Infinite at `α = 1`.
pub fn default_s(alpha: f64) -> f64 {
    if alpha >= 1.0 {
        f64::INFINITY
    } else {
        (alpha / 2.0) / (1.0 - alpha)
    }
}

/// `(p, β)` of the single-direction recurrence for a given `s`.
pub fn recurrence_p_beta(alpha: f64, s: f64, l_bar: f64) -> Result<(f64, f64)> {
    check_alpha("alpha", alpha, true)?;
    if !(s > 0.0) {
        return Err(ElfError::Inadmissible(format!("s = {s} must be positive")));
    }
    if alpha == 1.0 {
        let beta = if s.is_infinite() { 0.0 } else { (1.0 + 1.0 / s) / (1.0 + s) * l_bar };
        return Ok((1.0, beta));
    }
    let contraction = (1.0 - alpha) * (1.0 + s);
    if contraction >= 1.0 {
        return Err(ElfError::Inadmissible(format!(
            "(1 - alpha)(1 + s) = {contraction} must be < 1"
        )));
    }
    let beta = if s.is_infinite() { 0.0 } else { (1.0 + 1.0 / s) / (1.0 + s) * l_bar };
    Ok((1.0 - contraction, beta))
}

/// Largest step size admitted by the single-direction theorem.
pub fn delf_max_stepsize(alpha: f64, l_bar: f64, l: f64, mu: f64) -> Result<f64> {
    let mu = require_mu(Some(mu))?;
    check_positive("L", l)?;
    check_positive("L_bar", l_bar)?;
    let (p, beta) = recurrence_p_beta(alpha, default_s(alpha), l_bar)?;
    Ok(delf_gamma_max(p, beta, l, mu))
}

fn delf_gamma_max(p: f64, beta: f64, l: f64, mu: f64) -> f64 {
    let a = (p / (1.0 + beta)).sqrt() / 14.0;
    let b = p / (6.0 * mu);
    let c = 1.0 / (2.0 * std::f64::consts::SQRT_2 * l);
    a.min(b).min(c)
}

/// Constants of the single-direction theorem at a fixed step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DelfConstants {
    pub alpha: f64,
    /// `None` when `s` is infinite (`α = 1`).
    pub s: Option<f64>,
    pub p: f64,
    pub beta: f64,
    pub l: f64,
    pub l_bar: f64,
    pub mu: f64,
    pub gamma: f64,
    pub gamma_max: f64,
    /// `γ ≤ γ_max`.
    pub admissible: bool,
    pub c: f64,
    pub tau: f64,
    pub dim: usize,
    /// Coefficient of `G_0` inside Ψ: `(1 − e^{−μγ}) C / μ`.
    pub psi_g0_coefficient: f64,
}

impl DelfConstants {
    pub fn psi(&self, kl0: f64, g0: f64) -> f64 {
        kl0 + self.psi_g0_coefficient * g0
    }

    pub fn bias(&self) -> f64 {
        self.tau / self.mu
    }

    /// `e^{−μkγ} Ψ + τ/μ`.
    pub fn bound(&self, round: usize, psi: f64) -> f64 {
        (-self.mu * round as f64 * self.gamma).exp() * psi + self.bias()
    }
}

/// Single-direction constants with the default `s` unless one is supplied.
pub fn delf_constants(
    alpha: f64,
    l_bar: f64,
    l: f64,
    mu: f64,
    gamma: f64,
    dim: usize,
    s: Option<f64>,
) -> Result<DelfConstants> {
    let mu = require_mu(Some(mu))?;
    check_positive("L", l)?;
    check_positive("L_bar", l_bar)?;
    check_positive("gamma", gamma)?;
    let s = s.unwrap_or_else(|| default_s(alpha));
    let (p, beta) = recurrence_p_beta(alpha, s, l_bar)?;
    let denom = (-mu * gamma).exp() - (1.0 - p) * (4.0 * gamma * gamma * beta + 1.0);
    if !(denom > 0.0) {
        return Err(ElfError::Inadmissible(format!(
            "gamma = {gamma} makes the C denominator {denom:.3e} nonpositive"
        )));
    }
    let c = (8.0 * l * l * gamma * gamma + 2.0) / denom;
    let d = dim as f64;
    let tau = (2.0 * l * l + c * (1.0 - p) * beta) * (16.0 * gamma * gamma * d + 4.0 * d * gamma);
    let gamma_max = delf_gamma_max(p, beta, l, mu);
    Ok(DelfConstants {
        alpha,
        s: s.is_finite().then_some(s),
        p,
        beta,
        l,
        l_bar,
        mu,
        gamma,
        gamma_max,
        admissible: gamma <= gamma_max,
        c,
        tau,
        dim,
        psi_g0_coefficient: (1.0 - (-mu * gamma).exp()) / mu * c,
    })
}

/// Young parameters and recurrence coefficients of the bidirectional
/// estimator recurrence `G^D_{k+1} ≤ λ₁G^D_k + λ₂‖Δx‖² + λ₃G^P_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BelfLambdas {
    pub q: f64,
    pub s: f64,
    pub u: f64,
    pub w: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

/// `λ₁–λ₃` for arbitrary positive `s, q, u, w`.
pub fn belf_lambdas_with(alpha_d: f64, alpha_p: f64, l_bar: f64, s: f64, q: f64, u: f64, w: f64) -> BelfLambdas {
    let a = (1.0 - alpha_d) * (1.0 + s);
    let mixed = a * (1.0 + 1.0 / q) * (1.0 + 1.0 / u) + (1.0 + 1.0 / s);
    BelfLambdas {
        q,
        s,
        u,
        w,
        lambda1: a * (1.0 + q),
        lambda2: a * (1.0 + 1.0 / q) * (1.0 + u) * l_bar + mixed * (1.0 - alpha_p) * (1.0 + 1.0 / w) * l_bar,
        lambda3: mixed * (1.0 - alpha_p) * (1.0 + w),
    }
}

/// `λ₁–λ₃` under the default parameter choice.
pub fn belf_lambdas(alpha_d: f64, alpha_p: f64, l_bar: f64) -> Result<BelfLambdas> {
    check_alpha("alpha_D", alpha_d, false).map_err(|_| {
        ElfError::Inadmissible(format!(
            "alpha_D = {alpha_d}: (1 - alpha_D)(1 + q)^2 = 1 - alpha_D/2 needs alpha_D in (0, 1); \
             q blows up as alpha_D -> 1"
        ))
    })?;
    check_alpha("alpha_P", alpha_p, false).map_err(|_| {
        ElfError::Inadmissible(format!(
            "alpha_P = {alpha_p}: (1 - alpha_P)(1 + w) = 1 - alpha_P/2 needs alpha_P in (0, 1); \
             w blows up as alpha_P -> 1"
        ))
    })?;
    check_positive("L_bar", l_bar)?;
    let q = ((1.0 - alpha_d / 2.0) / (1.0 - alpha_d)).sqrt() - 1.0;
    let w = (alpha_p / 2.0) / (1.0 - alpha_p);
    Ok(belf_lambdas_with(alpha_d, alpha_p, l_bar, q, q, 1.0, w))
}

pub fn belf_max_stepsize(alpha_d: f64, alpha_p: f64, l_bar: f64, mu: f64) -> Result<f64> {
    let mu = require_mu(Some(mu))?;
    check_alpha("alpha_D", alpha_d, true)?;
    check_alpha("alpha_P", alpha_p, true)?;
    check_positive("L_bar", l_bar)?;
    Ok(belf_gamma_max(alpha_d, alpha_p, l_bar, mu))
}

fn belf_gamma_max(alpha_d: f64, alpha_p: f64, l_bar: f64, mu: f64) -> f64 {
    let third = alpha_d * alpha_p / (495.0 * ((1.0 - alpha_d / 2.0) * (1.0 - alpha_p / 2.0) * l_bar).sqrt());
    (alpha_d / (4.0 * mu)).min(alpha_p / (4.0 * mu)).min(third)
}

/// Constants of the bidirectional theorem at a fixed step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BelfConstants {
    pub alpha_d: f64,
    pub alpha_p: f64,
    #[serde(flatten)]
    pub lambdas: BelfLambdas,
    pub l: f64,
    pub l_bar: f64,
    pub mu: f64,
    pub gamma: f64,
    pub gamma_max: f64,
    pub admissible: bool,
    pub c: f64,
    pub d: f64,
    pub tau: f64,
    pub dim: usize,
}

impl BelfConstants {
    pub fn psi(&self, kl0: f64, g0_dual: f64, g0_primal: f64) -> f64 {
        kl0 + (self.c * g0_dual + self.d * g0_primal) / self.mu
    }

    pub fn bias(&self) -> f64 {
        self.tau / self.mu
    }

    pub fn bound(&self, round: usize, psi: f64) -> f64 {
        (-self.mu * round as f64 * self.gamma).exp() * psi + self.bias()
    }
}

pub fn belf_constants(
    alpha_d: f64,
    alpha_p: f64,
    l_bar: f64,
    mu: f64,
    gamma: f64,
    dim: usize,
    l: f64,
) -> Result<BelfConstants> {
    let mu = require_mu(Some(mu))?;
    check_positive("L", l)?;
    check_positive("gamma", gamma)?;
    let lambdas = belf_lambdas(alpha_d, alpha_p, l_bar)?;
    let limit = alpha_d.min(alpha_p) / (4.0 * mu);
    if gamma >= limit {
        return Err(ElfError::Inadmissible(format!(
            "gamma = {gamma} must be < min(alpha_D, alpha_P)/(4 mu) = {limit}"
        )));
    }
    let e = (-mu * gamma).exp();
    let c = 2.125 / (e - lambdas.lambda1);
    let d_const = c * lambdas.lambda3 / (e - (1.0 - alpha_p) * (1.0 + lambdas.w));
    let dd = dim as f64;
    let tau = (2.0 * l * l + 5.0 * c * lambdas.lambda2 / alpha_p) * (16.0 * gamma * gamma * dd * l + 4.0 * dd * gamma);
    let gamma_max = belf_gamma_max(alpha_d, alpha_p, l_bar, mu);
    Ok(BelfConstants {
        alpha_d,
        alpha_p,
        lambdas,
        l,
        l_bar,
        mu,
        gamma,
        gamma_max,
        admissible: gamma <= gamma_max,
        c,
        d: d_const,
        tau,
        dim,
    })
}

/// A certified `(γ, K)` pair: at `γ` the theorem preconditions hold,
/// `τ/μ ≤ ε/2` and `e^{−μKγ}Ψ ≤ ε/2` (or `Ψ ≤ ε` with `K = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Budget {
    pub epsilon: f64,
    pub gamma: f64,
    pub rounds: u64,
    pub psi: f64,
    pub bias: f64,
    /// Theorem bound at `(γ, K)`.
    pub certified_bound: f64,
}

/// Largest `γ ∈ (0, γ_max]` with `bias(γ) ≤ target`, by bisection.
fn certify_gamma<F>(gamma_max: f64, target: f64, bias: F) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    if bias(gamma_max).map(|b| b <= target).unwrap_or(false) {
        return Ok(gamma_max);
    }
    let (mut lo, mut hi) = (0.0, gamma_max);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= 0.0 || mid == lo || mid == hi {
            break;
        }
        match bias(mid) {
            Ok(b) if b <= target => lo = mid,
            _ => hi = mid,
        }
    }
    if lo > 0.0 {
        Ok(lo)
    } else {
        Err(ElfError::Inadmissible(format!("no admissible step size reaches bias {target:.3e}")))
    }
}

fn rounds_for(psi: f64, epsilon: f64, mu: f64, gamma: f64) -> u64 {
    if psi <= epsilon {
        0
    } else {
        ((2.0 * psi / epsilon).ln() / (mu * gamma)).ceil().max(0.0) as u64
    }
}

/// Single-direction budget for `KL(ρ_K) ≤ ε`, with `KL(ρ_0) = kl0` and
/// Lyapunov start `g0`.
#[allow(clippy::too_many_arguments)]
pub fn iteration_budget_delf(
    epsilon: f64,
    alpha: f64,
    l_bar: f64,
    l: f64,
    mu: f64,
    dim: usize,
    kl0: f64,
    g0: f64,
) -> Result<Budget> {
    check_positive("epsilon", epsilon)?;
    let gamma_max = delf_max_stepsize(alpha, l_bar, l, mu)?;
    let gamma = certify_gamma(gamma_max, epsilon / 2.0, |g| {
        delf_constants(alpha, l_bar, l, mu, g, dim, None).map(|c| c.bias())
    })?;
    let c = delf_constants(alpha, l_bar, l, mu, gamma, dim, None)?;
    let psi = c.psi(kl0, g0);
    let rounds = rounds_for(psi, epsilon, mu, gamma);
    let certified_bound = if rounds == 0 { psi } else { c.bound(rounds as usize, psi) };
    Ok(Budget {
        epsilon,
        gamma,
        rounds,
        psi,
        bias: c.bias(),
        certified_bound,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn iteration_budget_belf(
    epsilon: f64,
    alpha_d: f64,
    alpha_p: f64,
    l_bar: f64,
    l: f64,
    mu: f64,
    dim: usize,
    kl0: f64,
    g0_dual: f64,
    g0_primal: f64,
) -> Result<Budget> {
    check_positive("epsilon", epsilon)?;
    let gamma_max = belf_max_stepsize(alpha_d, alpha_p, l_bar, mu)?;
    let gamma = certify_gamma(gamma_max, epsilon / 2.0, |g| {
        belf_constants(alpha_d, alpha_p, l_bar, mu, g, dim, l).map(|c| c.bias())
    })?;
    let c = belf_constants(alpha_d, alpha_p, l_bar, mu, gamma, dim, l)?;
    let psi = c.psi(kl0, g0_dual, g0_primal);
    let rounds = rounds_for(psi, epsilon, mu, gamma);
    let certified_bound = if rounds == 0 { psi } else { c.bound(rounds as usize, psi) };
    Ok(Budget {
        epsilon,
        gamma,
        rounds,
        psi,
        bias: c.bias(),
        certified_bound,
    })
}

/// Constants for whichever theorem covers a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "theorem", rename_all = "snake_case")]
pub enum TheoryConstants {
    SingleDirection(DelfConstants),
    Bidirectional(BelfConstants),
}

impl TheoryConstants {
    pub fn gamma_max(&self) -> f64 {
        match self {
            TheoryConstants::SingleDirection(c) => c.gamma_max,
            TheoryConstants::Bidirectional(c) => c.gamma_max,
        }
    }

    pub fn admissible(&self) -> bool {
        match self {
            TheoryConstants::SingleDirection(c) => c.admissible,
            TheoryConstants::Bidirectional(c) => c.admissible,
        }
    }

    pub fn psi(&self, kl0: f64, g0_dual: f64, g0_primal: f64) -> f64 {
        match self {
            TheoryConstants::SingleDirection(c) => c.psi(kl0, g0_dual.max(g0_primal)),
            TheoryConstants::Bidirectional(c) => c.psi(kl0, g0_dual, g0_primal),
        }
    }

    pub fn bound(&self, round: usize, psi: f64) -> f64 {
        match self {
            TheoryConstants::SingleDirection(c) => c.bound(round, psi),
            TheoryConstants::Bidirectional(c) => c.bound(round, psi),
        }
    }
}
