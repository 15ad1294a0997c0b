//! Contractive compression operators.
//!
//! A compressor `Q` belongs to `B(alpha)` when `E‖Q(x) − x‖² ≤ (1 − alpha)‖x‖²`
//! for every `x`. All kinds here are either *selections* (each output
//! coordinate is the input coordinate verbatim or zero) or the scaled natural
//! compressor, which rewrites every coordinate.
//!
//! Payload accounting counts scalars ("floats") on the wire, not bytes:
//!
//! | kind                      | floats per message        |
//! |---------------------------|---------------------------|
//! | `identity`                | `d`                       |
//! | `top_k`, `rand_k`         | `2k` (index + value each) |
//! | `scaled_natural`          | `d`                       |
//! | `scaled_unbiased_wrapper` | `min(2·nnz, d)`, `d` if ω = 0 |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ElfError, Result};

/// Contraction coefficient of the natural compressor after `8/9` scaling.
pub const NATURAL_ALPHA: f64 = 8.0 / 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Compressor {
    Identity,
    /// Keep the `k` largest-magnitude coordinates, ties to the lowest index.
    TopK { k: usize },
    /// Keep `k` coordinates drawn uniformly without replacement, unscaled.
    RandK { k: usize },
    /// `(8/9)·Q_nat`: randomized rounding of each magnitude to a power of two.
    ScaledNatural,
    /// `(1/(ω+1))·Q` for the unbiased Bernoulli sparsifier `Q` with variance
    /// parameter `ω`, which keeps each coordinate with probability `1/(ω+1)`
    /// and rescales by `ω+1`. After scaling the output is the plain masked
    /// input.
    ScaledUnbiasedWrapper { omega: f64 },
}

impl Compressor {
    /// Checks the parameters against the dimension the compressor will see.
    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(ElfError::InvalidCompressor("dimension must be >= 1".into()));
        }
        match *self {
            Compressor::TopK { k } | Compressor::RandK { k } => {
                if k == 0 || k > d {
                    return Err(ElfError::InvalidCompressor(format!(
                        "k = {k} must satisfy 1 <= k <= d = {d}"
                    )));
                }
            }
            Compressor::ScaledUnbiasedWrapper { omega } => {
                if !(omega >= 0.0 && omega.is_finite()) {
                    return Err(ElfError::InvalidCompressor(format!(
                        "omega = {omega} must be finite and nonnegative"
                    )));
                }
            }
            Compressor::Identity | Compressor::ScaledNatural => {}
        }
        Ok(())
    }

    /// Declared contractivity coefficient for inputs of dimension `d`.
    pub fn alpha(&self, d: usize) -> f64 {
        match *self {
            Compressor::Identity => 1.0,
            Compressor::TopK { k } | Compressor::RandK { k } => k as f64 / d as f64,
            Compressor::ScaledNatural => NATURAL_ALPHA,
            Compressor::ScaledUnbiasedWrapper { omega } => 1.0 / (omega + 1.0),
        }
    }

    /// True when the output does not consume randomness.
    pub fn is_deterministic(&self) -> bool {
        match *self {
            Compressor::Identity | Compressor::TopK { .. } => true,
            Compressor::ScaledUnbiasedWrapper { omega } => omega == 0.0,
            Compressor::RandK { .. } | Compressor::ScaledNatural => false,
        }
    }

    /// True when every output coordinate is either the input coordinate
    /// verbatim or zero.
    pub fn is_selection(&self) -> bool {
        !matches!(self, Compressor::ScaledNatural)
    }

    pub fn compress<R: Rng + ?Sized>(&self, v: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let mut out = vec![0.0; v.len()];
        self.compress_into(v, &mut out, rng)?;
        Ok(out)
    }

    pub fn compress_into<R: Rng + ?Sized>(
        &self,
        v: &[f64],
        out: &mut [f64],
        rng: &mut R,
    ) -> Result<()> {
        let d = v.len();
        if out.len() != d {
            return Err(ElfError::DimensionMismatch {
                expected: out.len(),
                got: d,
            });
        }
        self.validate(d)?;
        match *self {
            Compressor::Identity => out.copy_from_slice(v),
            Compressor::TopK { k } => {
                out.fill(0.0);
                for i in top_k_indices(v, k) {
                    out[i] = v[i];
                }
            }
            Compressor::RandK { k } => {
                out.fill(0.0);
                for i in rand::seq::index::sample(rng, d, k) {
                    out[i] = v[i];
                }
            }
            Compressor::ScaledNatural => {
                for (o, &x) in out.iter_mut().zip(v) {
                    *o = NATURAL_ALPHA * natural_round(x, rng.random::<f64>());
                }
            }
            Compressor::ScaledUnbiasedWrapper { omega } => {
                if omega == 0.0 {
                    out.copy_from_slice(v);
                } else {
                    let keep = 1.0 / (omega + 1.0);
                    for (o, &x) in out.iter_mut().zip(v) {
                        *o = if rng.random::<f64>() < keep { x } else { 0.0 };
                    }
                }
            }
        }
        Ok(())
    }

    /// Scalars that cross the wire to reconstruct `output`.
    pub fn payload_floats(&self, output: &[f64]) -> usize {
        let d = output.len();
        match *self {
            Compressor::Identity | Compressor::ScaledNatural => d,
            Compressor::TopK { k } | Compressor::RandK { k } => 2 * k,
            Compressor::ScaledUnbiasedWrapper { omega } => {
                if omega == 0.0 {
                    d
                } else {
                    let nnz = output.iter().filter(|x| **x != 0.0).count();
                    (2 * nnz).min(d)
                }
            }
        }
    }
}

/// Indices of the `k` largest `|v_i|`, ties broken by lowest index, sorted
/// ascending.
pub fn top_k_indices(v: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(v.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let by_magnitude = |a: &usize, b: &usize| {
        v[*b]
            .abs()
            .total_cmp(&v[*a].abs())
            .then_with(|| a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_magnitude);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Unbiased randomized rounding of `x` to a signed power of two, driven by a
/// uniform draw `u ∈ [0, 1)`. Zero and non-finite values pass through.
pub fn natural_round(x: f64, u: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let a = x.abs();
    let lo = power_of_two_floor(a);
    if lo == a {
        return x;
    }
    let hi = 2.0 * lo;
    let p_up = (a - lo) / lo;
    let r = if u < p_up { hi } else { lo };
    r.copysign(x)
}

fn power_of_two_floor(a: f64) -> f64 {
    if a.is_normal() {
        f64::from_bits(a.to_bits() & 0x7ff0_0000_0000_0000)
    } else {
        // subnormal: the highest set mantissa bit is the power of two
        let bits = a.to_bits();
        let top = 63 - bits.leading_zeros();
        f64::from_bits(1u64 << top)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{standard_normal, stream};
    use proptest::prelude::*;
    
    fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    #[test]
    fn top1_keeps_largest_magnitude() {
        let mut rng = stream(0, "t", &[]);
        let out = Compressor::TopK { k: 1 }
            .compress(&[3.0, 1.0, -2.0], &mut rng)
            .unwrap();
        assert_eq!(out, vec![3.0, 0.0, 0.0]);
    }

    #[test]
    fn top_k_ties_go_to_lowest_index() {
        assert_eq!(top_k_indices(&[1.0, -2.0, 2.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.0, 0.0, 0.0], 1), vec![0]);
    }

    #[test]
    fn identity_is_exact() {
        let mut rng = stream(0, "t", &[]);
        let v = [1.5, -0.25, 7.0];
        let out = Compressor::Identity.compress(&v, &mut rng).unwrap();
        assert_eq!(out, v);
        assert_eq!(sq_dist(&out, &v), 0.0);
    }

    #[test]
    fn wrapper_with_zero_omega_is_identity() {
        let mut rng = stream(1, "t", &[]);
        let v = [0.3, -4.0, 2.5, 0.0];
        let c = Compressor::ScaledUnbiasedWrapper { omega: 0.0 };
        assert_eq!(c.compress(&v, &mut rng).unwrap(), v);
        assert_eq!(c.alpha(4), 1.0);
        assert_eq!(c.payload_floats(&v), 4);
        assert!(c.is_deterministic());
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut rng = stream(0, "t", &[]);
        assert!(Compressor::TopK { k: 4 }.compress(&[1.0, 2.0], &mut rng).is_err());
        assert!(Compressor::RandK { k: 0 }.compress(&[1.0, 2.0], &mut rng).is_err());
        assert!(Compressor::ScaledUnbiasedWrapper { omega: -1.0 }
            .compress(&[1.0], &mut rng)
            .is_err());
        let mut out = [0.0; 3];
        assert!(matches!(
            Compressor::Identity.compress_into(&[1.0, 2.0], &mut out, &mut rng),
            Err(ElfError::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn payload_rules() {
        let dense = vec![1.0; 10];
        assert_eq!(Compressor::Identity.payload_floats(&dense), 10);
        assert_eq!(Compressor::TopK { k: 1 }.payload_floats(&dense), 2);
        assert_eq!(Compressor::RandK { k: 3 }.payload_floats(&vec![0.0; 100]), 6);
        assert_eq!(Compressor::ScaledNatural.payload_floats(&dense), 10);
        let w = Compressor::ScaledUnbiasedWrapper { omega: 3.0 };
        assert_eq!(w.payload_floats(&[0.0, 1.0, 0.0, 0.0, 2.0, 0.0]), 4);
        assert_eq!(w.payload_floats(&[1.0, 1.0, 1.0, 0.0]), 4);
    }

    #[test]
    fn alphas() {
        assert_eq!(Compressor::TopK { k: 2 }.alpha(8), 0.25);
        assert_eq!(Compressor::RandK { k: 3 }.alpha(4), 0.75);
        assert_eq!(Compressor::ScaledNatural.alpha(5), 8.0 / 9.0);
        assert_eq!(Compressor::ScaledUnbiasedWrapper { omega: 1.0 }.alpha(5), 0.5);
    }

    #[test]
    fn natural_rounding_hits_neighbouring_powers() {
        assert_eq!(natural_round(4.0, 0.99), 4.0);
        assert_eq!(natural_round(-3.0, 0.1), -4.0);
        assert_eq!(natural_round(-3.0, 0.9), -2.0);
        assert_eq!(natural_round(0.0, 0.5), 0.0);
        let sub = f64::from_bits(5);
        let r = natural_round(sub, 0.99);
        assert!(r == f64::from_bits(4) || r == f64::from_bits(8));
    }

    #[test]
    fn natural_rounding_is_unbiased() {
        // E[round(3)] = 3 exactly when p_up = 1/2: mean over a uniform grid of u.
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|j| natural_round(3.0, (j as f64 + 0.5) / n as f64))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rand_k_mean_contraction_at_ones() {
        // E‖Q(x) − x‖² = (1 − k/d)‖x‖² = 2 at x = (1,1,1,1), k = 2.
        let c = Compressor::RandK { k: 2 };
        let x = [1.0; 4];
        let mut rng = stream(11, "randk", &[]);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sq_dist(&c.compress(&x, &mut rng).unwrap(), &x))
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(mean <= 2.0 + 3.0 * se, "mean {mean} se {se}");
        // both selected coordinates always hit, so the error is exactly 2
        assert_eq!(mean, 2.0);
    }

    #[test]
    fn natural_contraction_matches_coefficient() {
        let c = Compressor::ScaledNatural;
        let mut rng = stream(5, "nat", &[]);
        let x: Vec<f64> = (0..5).map(|_| standard_normal(&mut rng)).collect();
        let norm: f64 = x.iter().map(|v| v * v).sum();
        let n = 20_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sq_dist(&c.compress(&x, &mut rng).unwrap(), &x))
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean <= (1.0 - 8.0 / 9.0) * norm + 3.0 * (var / n as f64).sqrt());
    }

    proptest! {
        #[test]
        fn top_k_support_is_k_largest(v in prop::collection::vec(-100.0f64..100.0, 1..40), k_seed in 0usize..1000) {
            let k = 1 + k_seed % v.len();
            let mut rng = stream(0, "p", &[]);
            let out = Compressor::TopK { k }.compress(&v, &mut rng).unwrap();
            prop_assert_eq!(out.len(), v.len());
            let support: Vec<usize> = (0..v.len()).filter(|&i| out[i] != 0.0 || top_k_indices(&v, k).contains(&i)).collect();
            prop_assert_eq!(support.len(), k);
            let min_kept = support.iter().map(|&i| v[i].abs()).fold(f64::INFINITY, f64::min);
            for i in 0..v.len() {
                if !support.contains(&i) {
                    prop_assert!(v[i].abs() <= min_kept);
                }
            }
            // pointwise contraction for the deterministic kind
            let alpha = k as f64 / v.len() as f64;
            let norm: f64 = v.iter().map(|x| x * x).sum();
            prop_assert!(sq_dist(&out, &v) <= (1.0 - alpha) * norm * (1.0 + 1e-12));
        }

        #[test]
        fn selections_keep_length_and_values(v in prop::collection::vec(-10.0f64..10.0, 1..30), seed in any::<u64>()) {
            let d = v.len();
            let mut rng = stream(seed, "p", &[]);
            for c in [Compressor::RandK { k: 1 + (seed as usize) % d }, Compressor::ScaledUnbiasedWrapper { omega: 1.5 }] {
                let out = c.compress(&v, &mut rng).unwrap();
                prop_assert_eq!(out.len(), d);
                for (o, x) in out.iter().zip(&v) {
                    prop_assert!(*o == 0.0 || o == x);
                }
            }
        }
    }
}
