//! Gaussian divergence oracles and moment-matched proxies.
//!
//! For compressed chains the law of `x_k` is not Gaussian, so the reported
//! KL / W2 / Fisher values are computed between the Gaussian fitted to the
//! empirical first two moments and the target. Those numbers are *proxies*
//! and every output that carries them says so. For plain LMC on a Gaussian
//! target the chain map is affine and [`lmc_propagate`] gives the exact law.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{ElfError, Result};
use crate::linalg;
use crate::potentials::{FederatedPotential, GaussianTarget};

/// Regularization added to a singular empirical covariance.
pub const SINGULAR_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(ElfError::DimensionMismatch {
                expected: d,
                got: covariance.nrows(),
            });
        }
        if !linalg::is_symmetric(&covariance, 1e-10) {
            return Err(ElfError::NotPositiveDefinite("covariance is not symmetric".into()));
        }
        Ok(Self { mean, covariance })
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            covariance: DMatrix::identity(d, d),
        }
    }

    pub fn from_target(t: &GaussianTarget) -> Self {
        Self {
            mean: t.mean.clone(),
            covariance: t.covariance.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn same_dim(a: &GaussianLaw, b: &GaussianLaw) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(ElfError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

fn cholesky(m: &DMatrix<f64>, which: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    m.clone()
        .cholesky()
        .ok_or_else(|| ElfError::NotPositiveDefinite(format!("{which} covariance is singular")))
}

/// `KL(a ‖ b)` in nats.
pub fn gaussian_kl(a: &GaussianLaw, b: &GaussianLaw) -> Result<f64> {
    same_dim(a, b)?;
    let ca = cholesky(&a.covariance, "first")?;
    let cb = cholesky(&b.covariance, "second")?;
    let d = a.dim() as f64;
    let trace = cb.solve(&a.covariance).trace();
    let dm = &b.mean - &a.mean;
    let maha = dm.dot(&cb.solve(&dm));
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    };
    let kl = 0.5 * (trace - d + maha + logdet(&cb) - logdet(&ca));
    Ok(kl.max(0.0))
}

/// Wasserstein-2 distance; PSD covariances are allowed.
pub fn gaussian_w2(a: &GaussianLaw, b: &GaussianLaw) -> Result<f64> {
    same_dim(a, b)?;
    let root_b = linalg::sym_sqrt(&b.covariance);
    let cross = linalg::sym_sqrt(&(&root_b * &a.covariance * &root_b));
    let bures = (&a.covariance + &b.covariance - cross * 2.0).trace();
    let shift = (&a.mean - &b.mean).norm_squared();
    Ok((shift + bures.max(0.0)).sqrt())
}

/// Relative Fisher information `E_a ‖∇ log(a/target)‖²`.
///
/// With `u = x − m_a` the score difference is
/// `(Σ_t⁻¹ − Σ_a⁻¹) u + Σ_t⁻¹ (m_a − m_t)`, so the expectation is
/// `tr(M Σ_a Mᵀ) + ‖Σ_t⁻¹ (m_a − m_t)‖²` with `M = Σ_t⁻¹ − Σ_a⁻¹`.
pub fn gaussian_fisher(a: &GaussianLaw, target: &GaussianLaw) -> Result<f64> {
    same_dim(a, target)?;
    let pa = cholesky(&a.covariance, "first")?.inverse();
    let pt = cholesky(&target.covariance, "target")?.inverse();
    let m = &pt - &pa;
    let spread = (&m * &a.covariance * m.transpose()).trace();
    let drift = (&pt * (&a.mean - &target.mean)).norm_squared();
    Ok((spread + drift).max(0.0))
}

/// Pinsker: `TV ≤ √(KL/2)`.
pub fn pinsker_tv_bound(kl: f64) -> Result<f64> {
    if !(kl >= 0.0) {
        return Err(ElfError::InvalidArgument(format!("kl = {kl} must be >= 0")));
    }
    Ok((kl / 2.0).sqrt())
}

/// Talagrand under LSI(μ): `W2 ≤ √(2 KL / μ)`.
pub fn talagrand_w2_bound(kl: f64, mu: f64) -> Result<f64> {
    if !(kl >= 0.0) {
        return Err(ElfError::InvalidArgument(format!("kl = {kl} must be >= 0")));
    }
    if !(mu > 0.0) {
        return Err(ElfError::InvalidArgument(format!("mu = {mu} must be > 0")));
    }
    Ok((2.0 * kl / mu).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub kl: f64,
    pub w2: f64,
    pub fisher: f64,
    pub tv_upper: f64,
    pub w2_upper: Option<f64>,
}

pub fn divergence_report(
    law: &GaussianLaw,
    target: &GaussianLaw,
    mu: Option<f64>,
) -> Result<DivergenceReport> {
    let kl = gaussian_kl(law, target)?;
    Ok(DivergenceReport {
        kl,
        w2: gaussian_w2(law, target)?,
        fisher: gaussian_fisher(law, target)?,
        tv_upper: pinsker_tv_bound(kl)?,
        w2_upper: mu.map(|m| talagrand_w2_bound(kl, m)).transpose()?,
    })
}

/// Running sums of `x − shift` and `(x − shift)(x − shift)ᵀ`.
///
/// Raw sums (rather than Welford updates) make merging and jackknife
/// leave-one-group-out subtraction exact in structure; the shift keeps the
/// cancellation in `S2 − n m mᵀ` small when it is near the sample mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    shift: Vec<f64>,
    count: usize,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(d: usize) -> Self {
        Self::with_shift(vec![0.0; d])
    }

    pub fn with_shift(shift: Vec<f64>) -> Self {
        let d = shift.len();
        Self {
            shift,
            count: 0,
            sum: vec![0.0; d],
            outer: vec![0.0; d * d],
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        self.count += 1;
        for i in 0..d {
            let ci = x[i] - self.shift[i];
            self.sum[i] += ci;
            let row = &mut self.outer[i * d..(i + 1) * d];
            for j in i..d {
                row[j] += ci * (x[j] - self.shift[j]);
            }
        }
    }

    /// Adds another accumulator with the same shift.
    pub fn merge(&mut self, other: &MomentAccumulator) {
        debug_assert_eq!(self.shift, other.shift);
        self.count += other.count;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.outer.iter_mut().zip(&other.outer) {
            *a += b;
        }
    }

    fn without(&self, other: &MomentAccumulator) -> MomentAccumulator {
        let mut out = self.clone();
        out.count -= other.count;
        for (a, b) in out.sum.iter_mut().zip(&other.sum) {
            *a -= b;
        }
        for (a, b) in out.outer.iter_mut().zip(&other.outer) {
            *a -= b;
        }
        out
    }

    /// Sample mean and unbiased covariance.
    pub fn estimate(&self) -> Result<MomentEstimate> {
        let d = self.dim();
        if self.count < d + 1 || self.count < 2 {
            return Err(ElfError::TooFewSamples {
                needed: (d + 1).max(2),
                got: self.count,
            });
        }
        let n = self.count as f64;
        let centered_mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let c = (self.outer[i * d + j] - n * centered_mean[i] * centered_mean[j]) / (n - 1.0);
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        let mean = DVector::from_iterator(
            d,
            centered_mean.iter().zip(&self.shift).map(|(m, s)| m + s),
        );
        let ev = linalg::sym_eigenvalues(&cov);
        let scale = ev[d - 1].abs().max(1e-300);
        let singular = ev[0] <= 1e-12 * scale || ev[d - 1] <= 0.0;
        Ok(MomentEstimate {
            law: GaussianLaw {
                mean,
                covariance: cov,
            },
            singular,
            samples: self.count,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub law: GaussianLaw,
    /// Covariance is rank deficient; divergence ops see `cov + 1e−10·I`.
    pub singular: bool,
    pub samples: usize,
}

impl MomentEstimate {
    pub fn law_for_divergence(&self) -> GaussianLaw {
        if self.singular {
            let d = self.law.dim();
            GaussianLaw {
                mean: self.law.mean.clone(),
                covariance: &self.law.covariance + DMatrix::identity(d, d) * SINGULAR_JITTER,
            }
        } else {
            self.law.clone()
        }
    }
}

pub fn empirical_moments<V: AsRef<[f64]>>(samples: &[V]) -> Result<MomentEstimate> {
    let d = samples.first().map(|s| s.as_ref().len()).unwrap_or(0);
    if d == 0 {
        return Err(ElfError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let mut acc = MomentAccumulator::with_shift(samples[0].as_ref().to_vec());
    for s in samples {
        let s = s.as_ref();
        if s.len() != d {
            return Err(ElfError::DimensionMismatch {
                expected: d,
                got: s.len(),
            });
        }
        acc.push(s);
    }
    acc.estimate()
}

/// A statistic with its delete-one-group jackknife standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// Evaluates `stat` on the pooled moments of `groups` and estimates its
/// standard error by deleting one group at a time. Groups must be
/// independent (e.g. disjoint sets of chains).
pub fn jackknife<F>(groups: &[MomentAccumulator], stat: F) -> Result<Estimate>
where
    F: Fn(&MomentEstimate) -> Result<f64>,
{
    let d = groups
        .first()
        .map(|g| g.dim())
        .ok_or_else(|| ElfError::InvalidArgument("jackknife needs at least one group".into()))?;
    let mut total = groups[0].clone();
    for g in &groups[1..] {
        total.merge(g);
    }
    let value = stat(&total.estimate()?)?;
    let g = groups.len();
    if g < 2 {
        return Ok(Estimate {
            value,
            se: f64::NAN,
        });
    }
    let leave_out = groups
        .iter()
        .map(|grp| stat(&total.without(grp).estimate()?))
        .collect::<Result<Vec<f64>>>()?;
    let mean = leave_out.iter().sum::<f64>() / g as f64;
    let var = leave_out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (g as f64 - 1.0)
        / g as f64;
    let _ = d;
    Ok(Estimate {
        value,
        se: var.sqrt(),
    })
}

/// One exact LMC step for the law of `x_k` on a Gaussian target:
/// `m⁺ = m − γ A (m − m*)`, `Σ⁺ = (I − γA) Σ (I − γA)ᵀ + 2γ I`.
pub fn lmc_propagate(law: &GaussianLaw, target: &GaussianTarget, gamma: f64) -> GaussianLaw {
    let d = law.dim();
    let contraction = DMatrix::identity(d, d) - &target.precision * gamma;
    let mean = &law.mean - &target.precision * (&law.mean - &target.mean) * gamma;
    let covariance = &contraction * &law.covariance * contraction.transpose()
        + DMatrix::identity(d, d) * (2.0 * gamma);
    GaussianLaw { mean, covariance }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LemmaCheck {
    /// `E_ν ‖∇F‖²`
    pub lhs: f64,
    /// `FI(ν ‖ π) + 2 d L`
    pub rhs: f64,
    pub holds: bool,
}

/// Checks `E_ν‖∇F‖² ≤ FI(ν‖π) + 2dL` for a Gaussian `ν` on a Gaussian target.
pub fn chebyshev_lemma_check_law(nu: &GaussianLaw, potential: &FederatedPotential) -> Result<LemmaCheck> {
    let target = potential.gaussian_target().ok_or_else(|| {
        ElfError::InvalidArgument("lemma check needs a Gaussian target".into())
    })?;
    if nu.dim() != potential.dim() {
        return Err(ElfError::DimensionMismatch {
            expected: potential.dim(),
            got: nu.dim(),
        });
    }
    let a = &target.precision;
    // ∇F(x) = A (x − m*)
    let lhs = (a * &nu.covariance * a).trace() + (a * (&nu.mean - &target.mean)).norm_squared();
    let fisher = gaussian_fisher(nu, &GaussianLaw::from_target(target))?;
    let rhs = fisher + 2.0 * potential.dim() as f64 * potential.lipschitz();
    Ok(LemmaCheck {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-12),
    })
}

pub fn chebyshev_lemma_check<V: AsRef<[f64]>>(
    samples: &[V],
    potential: &FederatedPotential,
) -> Result<LemmaCheck> {
    if potential.gaussian_target().is_none() {
        return Err(ElfError::InvalidArgument("lemma check needs a Gaussian target".into()));
    }
    chebyshev_lemma_check_law(&empirical_moments(samples)?.law_for_divergence(), potential)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::QuadraticClient;
    use crate::streams::{standard_normal, stream};
    use rand::Rng;
    
    fn law1(m: f64, var: f64) -> GaussianLaw {
        GaussianLaw::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, var)).unwrap()
    }

    fn random_spd(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(d, d, |_, _| standard_normal(rng));
        &b * b.transpose() + DMatrix::identity(d, d) * 0.1
    }

    fn random_law(rng: &mut impl Rng, d: usize) -> GaussianLaw {
        let mean = DVector::from_fn(d, |_, _| standard_normal(rng));
        GaussianLaw::new(mean, random_spd(rng, d)).unwrap()
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(gaussian_kl(&law1(0.0, 1.0), &law1(0.0, 1.0)).unwrap(), 0.0);
        let v = gaussian_kl(&law1(0.0, 1.0), &law1(0.0, 2.0)).unwrap();
        assert!((v - 0.5 * (0.5 - 1.0 + 2f64.ln())).abs() < 1e-15);
        assert!((v - 0.0965735).abs() < 1e-7);
        let shifted = GaussianLaw::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
        assert!((gaussian_kl(&shifted, &GaussianLaw::standard(2)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_singular_and_mismatched() {
        let sing = GaussianLaw::new(DVector::zeros(2), DMatrix::from_diagonal_element(2, 2, 0.0)).unwrap();
        assert!(gaussian_kl(&sing, &GaussianLaw::standard(2)).is_err());
        assert!(gaussian_kl(&GaussianLaw::standard(1), &GaussianLaw::standard(2)).is_err());
    }

    #[test]
    fn w2_closed_form_values() {
        assert!(gaussian_w2(&law1(0.0, 1.0), &law1(0.0, 1.0)).unwrap() < 1e-12);
        assert!((gaussian_w2(&law1(0.0, 1.0), &law1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-12);
        let shifted = GaussianLaw::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
        assert!((gaussian_w2(&shifted, &GaussianLaw::standard(2)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn w2_is_symmetric() {
        let mut rng = stream(3, "w2", &[]);
        for _ in 0..50 {
            let a = random_law(&mut rng, 3);
            let b = random_law(&mut rng, 3);
            let ab = gaussian_w2(&a, &b).unwrap();
            let ba = gaussian_w2(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
        }
    }

    #[test]
    fn fisher_closed_form_values() {
        let t = GaussianLaw::standard(2);
        assert!(gaussian_fisher(&t, &t).unwrap() < 1e-15);
        let m = GaussianLaw::new(DVector::from_vec(vec![1.0, -2.0]), DMatrix::identity(2, 2)).unwrap();
        assert!((gaussian_fisher(&m, &t).unwrap() - 5.0).abs() < 1e-12);
        // 1-d variance mismatch: (1 − 1/s)² s with s = var_a, target N(0, 1)
        let s = 2.0;
        let v = gaussian_fisher(&law1(0.0, s), &law1(0.0, 1.0)).unwrap();
        assert!((v - (1.0 - 1.0 / s).powi(2) * s).abs() < 1e-12);
    }

    #[test]
    fn divergences_on_random_pairs() {
        let mut rng = stream(4, "pairs", &[]);
        let target = GaussianLaw::standard(3);
        for _ in 0..1000 {
            let a = random_law(&mut rng, 3);
            let b = random_law(&mut rng, 3);
            assert!(gaussian_kl(&a, &b).unwrap() > 0.0);
            assert!(gaussian_kl(&a, &a).unwrap() < 1e-12);
            // LSI with μ = 1 for the standard normal
            let kl = gaussian_kl(&a, &target).unwrap();
            let fi = gaussian_fisher(&a, &target).unwrap();
            assert!(kl <= fi / 2.0 + 1e-12, "kl {kl} fi {fi}");
            // Talagrand
            let w2 = gaussian_w2(&a, &target).unwrap();
            assert!(w2 <= talagrand_w2_bound(kl, 1.0).unwrap() + 1e-9);
        }
    }

    #[test]
    fn bounds() {
        assert_eq!(pinsker_tv_bound(0.0).unwrap(), 0.0);
        assert_eq!(talagrand_w2_bound(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(pinsker_tv_bound(0.5).unwrap(), 0.5);
        assert_eq!(talagrand_w2_bound(0.5, 1.0).unwrap(), 1.0);
        assert!(pinsker_tv_bound(-1.0).is_err());
        assert!(talagrand_w2_bound(1.0, 0.0).is_err());
        let mut prev = (0.0, 0.0);
        for i in 1..100 {
            let kl = i as f64 * 0.1;
            let cur = (pinsker_tv_bound(kl).unwrap(), talagrand_w2_bound(kl, 2.0).unwrap());
            assert!(cur.0 > prev.0 && cur.1 > prev.1);
            prev = cur;
        }
    }

    #[test]
    fn moments_hand_cases() {
        let est = empirical_moments(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(est.law.mean[0], 1.0);
        assert_eq!(est.law.covariance[(0, 0)], 2.0);
        assert!(!est.singular);

        let same = vec![vec![1.0, -3.0]; 5];
        let est = empirical_moments(&same).unwrap();
        assert_eq!(est.law.mean.as_slice(), &[1.0, -3.0]);
        assert!(est.law.covariance.iter().all(|v| *v == 0.0));
        assert!(est.singular);
        let reg = est.law_for_divergence();
        assert_eq!(reg.covariance[(0, 0)], SINGULAR_JITTER);
        assert!(gaussian_kl(&reg, &GaussianLaw::standard(2)).is_ok());

        assert!(matches!(
            empirical_moments(&[vec![0.0, 1.0], vec![1.0, 1.0]]),
            Err(ElfError::TooFewSamples { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn moments_concentrate() {
        let mut rng = stream(5, "mom", &[]);
        let mut acc = MomentAccumulator::new(3);
        let mut x = [0.0; 3];
        for _ in 0..1_000_000 {
            for v in x.iter_mut() {
                *v = standard_normal(&mut rng);
            }
            acc.push(&x);
        }
        let est = acc.estimate().unwrap();
        for i in 0..3 {
            assert!(est.law.mean[i].abs() < 0.01);
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((est.law.covariance[(i, j)] - want).abs() < 0.02);
            }
        }
    }

    #[test]
    fn jackknife_se_of_a_mean_matches_textbook() {
        let mut rng = stream(6, "jk", &[]);
        let groups: Vec<MomentAccumulator> = (0..50)
            .map(|_| {
                let mut a = MomentAccumulator::new(1);
                for _ in 0..200 {
                    a.push(&[standard_normal(&mut rng)]);
                }
                a
            })
            .collect();
        let est = jackknife(&groups, |m| Ok(m.law.mean[0])).unwrap();
        // SE of a mean of 10⁴ unit-variance draws is 0.01
        assert!((est.se - 0.01).abs() < 0.003, "{est:?}");
        assert!(est.value.abs() < 0.04);
    }

    #[test]
    fn propagation_reaches_the_discrete_fixed_point() {
        let gamma = 0.1;
        let target = FederatedPotential::standard_gaussian(1, 1).unwrap();
        let t = target.gaussian_target().unwrap();
        let mut law = GaussianLaw::standard(1);
        for _ in 0..500 {
            law = lmc_propagate(&law, t, gamma);
        }
        let want = 1.0 / (1.0 - gamma / 2.0);
        assert!((law.covariance[(0, 0)] - want).abs() < 1e-14);
    }

    #[test]
    fn lemma_check_cases() {
        let p = FederatedPotential::standard_gaussian(3, 1).unwrap();
        let stationary = chebyshev_lemma_check_law(&GaussianLaw::standard(3), &p).unwrap();
        assert!((stationary.lhs - 3.0).abs() < 1e-12);
        assert!((stationary.rhs - 6.0).abs() < 1e-12);
        let m = GaussianLaw::new(DVector::from_vec(vec![1.0, 2.0, 0.0]), DMatrix::identity(3, 3)).unwrap();
        let r = chebyshev_lemma_check_law(&m, &p).unwrap();
        assert!((r.lhs - 8.0).abs() < 1e-12 && (r.rhs - 11.0).abs() < 1e-12 && r.holds);

        let diag_target = FederatedPotential::gaussian(vec![QuadraticClient::new(
            vec![0.0, 0.0],
            &DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5])),
        )
        .unwrap()])
        .unwrap();
        let mut rng = stream(7, "lemma", &[]);
        for _ in 0..1000 {
            let nu = random_law(&mut rng, 2);
            assert!(chebyshev_lemma_check_law(&nu, &diag_target).unwrap().holds);
        }
    }

    #[test]
    fn lemma_check_refuses_non_gaussian_targets() {
        let mix = FederatedPotential::gaussian_mixture(&[crate::potentials::MixtureClientSpec {
            weights: vec![1.0],
            means: vec![vec![0.0]],
            sigma: 1.0,
        }])
        .unwrap();
        assert!(chebyshev_lemma_check(&[vec![0.0], vec![1.0]], &mix).is_err());
    }
}
