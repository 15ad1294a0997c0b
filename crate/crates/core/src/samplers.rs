//! Chain-update rules: plain LMC and its error-feedback variants.
//!
//! Every round first draws `Z_k` from the chain's noise source, then moves
//! `x_{k+1} = x_k − γ g_k + √(2γ) Z_k`, and only afterwards touches any
//! compressor randomness. Compressor streams are keyed by
//! `(master, "client", chain, i, k)` and `(master, "server", chain, k)`.
//!
//! Error-feedback updates `e ← e + Q(t − e)` are applied in a form that is
//! algebraically identical but exact on transmitted coordinates: when `Q` is
//! a selection, coordinate `j` with `Q(t − e)_j ≠ 0` is set to `t_j` and the
//! wire carries `t_j`. With identity compressors the estimators therefore
//! equal their targets bitwise and every variant reproduces LMC exactly.

use serde::{Deserialize, Serialize};

use crate::compressors::Compressor;
use crate::error::{ElfError, Result};
use crate::federation::{Message, MessageKind};
use crate::linalg::dist_sq;
use crate::metrics::GaussianLaw;
use crate::potentials::{average_into, FederatedPotential};
use crate::streams::{standard_normal, ChainSeeds, NoiseSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Lmc,
    Delf,
    Pelf,
    Belf,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Lmc, Algorithm::Delf, Algorithm::Pelf, Algorithm::Belf];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Lmc => "lmc",
            Algorithm::Delf => "delf",
            Algorithm::Pelf => "pelf",
            Algorithm::Belf => "belf",
        }
    }

    pub fn needs_uplink(self) -> bool {
        matches!(self, Algorithm::Delf | Algorithm::Belf)
    }

    pub fn needs_downlink(self) -> bool {
        matches!(self, Algorithm::Pelf | Algorithm::Belf)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = ElfError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ElfError::InvalidArgument(format!("unknown algorithm `{s}`")))
    }
}

/// Uplink (`Q^D`, client → server) and downlink (`Q^P`, server → client)
/// compressors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressorPair {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uplink: Option<Compressor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downlink: Option<Compressor>,
}

impl CompressorPair {
    pub fn identity() -> Self {
        Self {
            uplink: Some(Compressor::Identity),
            downlink: Some(Compressor::Identity),
        }
    }

    fn require_uplink(&self) -> Result<&Compressor> {
        self.uplink.as_ref().ok_or(ElfError::MissingState("an uplink compressor"))
    }

    fn require_downlink(&self) -> Result<&Compressor> {
        self.downlink.as_ref().ok_or(ElfError::MissingState("a downlink compressor"))
    }

    /// Checks the compressors the algorithm needs are present and valid.
    pub fn validate(&self, algorithm: Algorithm, d: usize) -> Result<()> {
        if algorithm.needs_uplink() {
            self.require_uplink()?.validate(d)?;
        }
        if algorithm.needs_downlink() {
            self.require_downlink()?.validate(d)?;
        }
        Ok(())
    }
}

/// Initial law `ρ_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    #[default]
    StandardNormal,
    Point {
        x: Vec<f64>,
    },
    Gaussian {
        mean: Vec<f64>,
        std: f64,
    },
}

impl InitSpec {
    pub fn sample<R: rand::Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            InitSpec::StandardNormal => Ok((0..d).map(|_| standard_normal(rng)).collect()),
            InitSpec::Point { x } => {
                if x.len() != d {
                    return Err(ElfError::DimensionMismatch {
                        expected: d,
                        got: x.len(),
                    });
                }
                Ok(x.clone())
            }
            InitSpec::Gaussian { mean, std } => {
                if mean.len() != d {
                    return Err(ElfError::DimensionMismatch {
                        expected: d,
                        got: mean.len(),
                    });
                }
                Ok(mean.iter().map(|m| m + std * standard_normal(rng)).collect())
            }
        }
    }

    /// The law of `x_0`, when it has a density.
    pub fn law(&self, d: usize) -> Option<GaussianLaw> {
        match self {
            InitSpec::StandardNormal => Some(GaussianLaw::standard(d)),
            InitSpec::Point { .. } => None,
            InitSpec::Gaussian { mean, std } if *std > 0.0 && mean.len() == d => Some(GaussianLaw {
                mean: nalgebra::DVector::from_column_slice(mean),
                covariance: nalgebra::DMatrix::identity(d, d) * (std * std),
            }),
            InitSpec::Gaussian { .. } => None,
        }
    }
}

/// Per-round state of one chain.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub algorithm: Algorithm,
    /// Index `k` of the next round to execute.
    pub round: usize,
    pub x: Vec<f64>,
    /// Aggregated estimator `g_k`; for LMC the last drift used.
    pub g: Vec<f64>,
    /// Per-client estimators `g^i_k` (for P-ELF: `∇F_i(w_k)`). Empty for LMC.
    pub g_clients: Vec<Vec<f64>>,
    /// Server's shadow model `w_k` (P-ELF, B-ELF).
    pub w: Option<Vec<f64>>,
    /// Devices' copy of `w_k`, updated independently from the broadcast.
    pub w_devices: Option<Vec<f64>>,
    pub gamma: f64,
    pub noise: NoiseSource,
    z: Vec<f64>,
    scratch: Vec<f64>,
    x_prev: Vec<f64>,
}

impl SamplerState {
    /// `g^i_0 = ∇F_i(x_0)`, `g_0 = ∇F(x_0)`, `w_0 = x_0`.
    pub fn new(
        algorithm: Algorithm,
        potential: &FederatedPotential,
        x0: Vec<f64>,
        gamma: f64,
        noise: NoiseSource,
    ) -> Result<Self> {
        let d = potential.dim();
        if x0.len() != d {
            return Err(ElfError::DimensionMismatch {
                expected: d,
                got: x0.len(),
            });
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(ElfError::InvalidArgument(format!("step size {gamma} must be >= 0")));
        }
        let g_clients = match algorithm {
            Algorithm::Lmc => Vec::new(),
            _ => (0..potential.n())
                .map(|i| potential.grad_component(i, &x0))
                .collect::<Result<Vec<_>>>()?,
        };
        let mut g = vec![0.0; d];
        if algorithm == Algorithm::Lmc {
            let mut scratch = vec![0.0; d];
            potential.grad_full_into(&x0, &mut g, &mut scratch)?;
        } else {
            average_into(&g_clients, &mut g);
        }
        let shadow = algorithm.needs_downlink().then(|| x0.clone());
        Ok(Self {
            algorithm,
            round: 0,
            g,
            g_clients,
            w: shadow.clone(),
            w_devices: shadow,
            gamma,
            noise,
            z: vec![0.0; d],
            scratch: vec![0.0; d],
            x_prev: x0.clone(),
            x: x0,
        })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// `(G^D_k, G^P_k)` for the current state; zero where the algorithm
    /// has no such estimator.
    pub fn lyapunov(&mut self, potential: &FederatedPotential) -> Result<(f64, f64)> {
        let dual = if self.g_clients.is_empty() {
            0.0
        } else {
            let mut acc = 0.0;
            for (i, gi) in self.g_clients.iter().enumerate() {
                potential.grad_component_into(i, &self.x, &mut self.scratch)?;
                acc += dist_sq(gi, &self.scratch);
            }
            acc / self.g_clients.len() as f64
        };
        let primal = match &self.w {
            Some(w) => potential.l_bar() * dist_sq(w, &self.x),
            None => 0.0,
        };
        Ok((dual, primal))
    }

    /// `x ← x − γ g + √(2γ) Z`.
    fn langevin_move(&mut self) -> Result<()> {
        let k = self.round;
        self.noise.fill(&mut self.z, k)?;
        self.x_prev.copy_from_slice(&self.x);
        let scale = (2.0 * self.gamma).sqrt();
        for ((x, g), z) in self.x.iter_mut().zip(&self.g).zip(&self.z) {
            *x = *x - self.gamma * *g + scale * *z;
        }
        check_finite(&self.x, k, "iterate")
    }

    fn expect(&self, algorithm: Algorithm) -> Result<()> {
        if self.algorithm != algorithm {
            return Err(ElfError::InvalidArgument(format!(
                "state was initialised for {} but a {} round was requested",
                self.algorithm, algorithm
            )));
        }
        Ok(())
    }

    fn finish(
        &mut self,
        potential: &FederatedPotential,
        uplink: u64,
        downlink: u64,
    ) -> Result<RoundDiagnostics> {
        let (dual, primal) = self.lyapunov(potential)?;
        let diag = RoundDiagnostics {
            round: self.round,
            lyapunov_dual: dual,
            lyapunov_primal: primal,
            step_sq: dist_sq(&self.x, &self.x_prev),
            uplink_floats: uplink,
            downlink_floats: downlink,
        };
        self.round += 1;
        Ok(diag)
    }
}

fn check_finite(v: &[f64], round: usize, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ElfError::Divergence { round, what })
    }
}

/// Diagnostics of one executed round `k` (state after the round is `k+1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundDiagnostics {
    pub round: usize,
    /// `G^D_{k+1} = (1/n) Σ ‖g^i_{k+1} − ∇F_i(x_{k+1})‖²` for this chain.
    pub lyapunov_dual: f64,
    /// `G^P_{k+1} = L̄ ‖w_{k+1} − x_{k+1}‖²`.
    pub lyapunov_primal: f64,
    /// `‖x_{k+1} − x_k‖²`.
    pub step_sq: f64,
    pub uplink_floats: u64,
    pub downlink_floats: u64,
}

/// A wire update for an error-feedback estimator.
#[derive(Debug, Clone, PartialEq)]
pub enum Update {
    /// Selected coordinates carry their new values.
    Overwrite { indices: Vec<usize>, values: Vec<f64> },
    /// Dense additive correction.
    Add(Vec<f64>),
}

impl Update {
    pub fn apply(&self, target: &mut [f64]) {
        match self {
            Update::Overwrite { indices, values } => {
                for (&i, &v) in indices.iter().zip(values) {
                    target[i] = v;
                }
            }
            Update::Add(delta) => {
                for (t, d) in target.iter_mut().zip(delta) {
                    *t += *d;
                }
            }
        }
    }
}

/// Builds the update realising `estimate + Q(target − estimate)` and its
/// payload size in floats.
pub fn error_feedback_update(
    compressor: &Compressor,
    estimate: &[f64],
    target: &[f64],
    rng: &mut crate::streams::Stream,
) -> Result<(Update, usize)> {
    let delta: Vec<f64> = target.iter().zip(estimate).map(|(t, e)| t - e).collect();
    let compressed = compressor.compress(&delta, rng)?;
    let floats = compressor.payload_floats(&compressed);
    let update = if compressor.is_selection() {
        let indices: Vec<usize> = (0..compressed.len()).filter(|&j| compressed[j] != 0.0).collect();
        let values = indices.iter().map(|&j| target[j]).collect();
        Update::Overwrite { indices, values }
    } else {
        Update::Add(compressed)
    };
    Ok((update, floats))
}

/// Plain LMC: `x_{k+1} = x_k − γ ∇F(x_k) + √(2γ) Z_k`. Traffic: one dense
/// model broadcast down, `n` dense gradients up.
pub fn lmc_round(
    state: &mut SamplerState,
    potential: &FederatedPotential,
    outbox: &mut Vec<Message>,
) -> Result<RoundDiagnostics> {
    state.expect(Algorithm::Lmc)?;
    let (d, n, k) = (state.dim(), potential.n(), state.round);
    potential.grad_full_into(&state.x, &mut state.g, &mut state.scratch)?;
    check_finite(&state.g, k, "gradient")?;
    state.langevin_move()?;
    outbox.push(Message::broadcast(k, MessageKind::ModelBroadcast, d));
    for i in 0..n {
        outbox.push(Message::upload(k, i, MessageKind::DenseGradient, d));
    }
    state.finish(potential, (n * d) as u64, d as u64)
}

/// D-ELF: EF21 on the uplink. The server broadcasts `x_{k+1}` densely; each
/// client sends `c_i = Q^D(∇F_i(x_{k+1}) − g^i_k)`.
pub fn delf_round(
    state: &mut SamplerState,
    potential: &FederatedPotential,
    uplink: &Compressor,
    seeds: &ChainSeeds,
    outbox: &mut Vec<Message>,
) -> Result<RoundDiagnostics> {
    state.expect(Algorithm::Delf)?;
    let (d, k) = (state.dim(), state.round);
    state.langevin_move()?;
    outbox.push(Message::broadcast(k, MessageKind::ModelBroadcast, d));
    let up = uplink_exchange(state, potential, uplink, seeds, ExchangePoint::Iterate, outbox)?;
    state.finish(potential, up, d as u64)
}

/// P-ELF: EF21-P on the downlink. The server broadcasts
/// `v_k = Q^P(x_{k+1} − w_k)`; clients reply with dense `∇F_i(w_{k+1})`.
pub fn pelf_round(
    state: &mut SamplerState,
    potential: &FederatedPotential,
    downlink: &Compressor,
    seeds: &ChainSeeds,
    outbox: &mut Vec<Message>,
) -> Result<RoundDiagnostics> {
    state.expect(Algorithm::Pelf)?;
    let (d, n, k) = (state.dim(), potential.n(), state.round);
    state.langevin_move()?;
    let down = downlink_exchange(state, downlink, seeds, outbox)?;
    let w = state.w_devices.as_ref().ok_or(ElfError::MissingState("shadow model w"))?;
    for (i, gi) in state.g_clients.iter_mut().enumerate() {
        potential.grad_component_into(i, w, gi)?;
        check_finite(gi, k, "gradient")?;
        outbox.push(Message::upload(k, i, MessageKind::DenseGradient, d));
    }
    average_into(&state.g_clients, &mut state.g);
    state.finish(potential, (n * d) as u64, down)
}

/// B-ELF: EF21-P down, EF21 up, with client gradients taken at `w_{k+1}`.
pub fn belf_round(
    state: &mut SamplerState,
    potential: &FederatedPotential,
    downlink: &Compressor,
    uplink: &Compressor,
    seeds: &ChainSeeds,
    outbox: &mut Vec<Message>,
) -> Result<RoundDiagnostics> {
    state.expect(Algorithm::Belf)?;
    state.langevin_move()?;
    let down = downlink_exchange(state, downlink, seeds, outbox)?;
    let up = uplink_exchange(state, potential, uplink, seeds, ExchangePoint::DeviceShadow, outbox)?;
    state.finish(potential, up, down)
}

/// Runs one round of whatever algorithm `state` was built for.
pub fn step(
    state: &mut SamplerState,
    potential: &FederatedPotential,
    compressors: &CompressorPair,
    seeds: &ChainSeeds,
    outbox: &mut Vec<Message>,
) -> Result<RoundDiagnostics> {
    match state.algorithm {
        Algorithm::Lmc => lmc_round(state, potential, outbox),
        Algorithm::Delf => delf_round(state, potential, compressors.require_uplink()?, seeds, outbox),
        Algorithm::Pelf => pelf_round(state, potential, compressors.require_downlink()?, seeds, outbox),
        Algorithm::Belf => belf_round(
            state,
            potential,
            compressors.require_downlink()?,
            compressors.require_uplink()?,
            seeds,
            outbox,
        ),
    }
}

#[derive(Clone, Copy)]
enum ExchangePoint {
    Iterate,
    DeviceShadow,
}

fn uplink_exchange(
    state: &mut SamplerState,
    potential: &FederatedPotential,
    uplink: &Compressor,
    seeds: &ChainSeeds,
    at: ExchangePoint,
    outbox: &mut Vec<Message>,
) -> Result<u64> {
    let k = state.round;
    let point = match at {
        ExchangePoint::Iterate => &state.x,
        ExchangePoint::DeviceShadow => state
            .w_devices
            .as_ref()
            .ok_or(ElfError::MissingState("shadow model w"))?,
    };
    let mut total = 0u64;
    for (i, gi) in state.g_clients.iter_mut().enumerate() {
        potential.grad_component_into(i, point, &mut state.scratch)?;
        check_finite(&state.scratch, k, "gradient")?;
        let mut rng = seeds.client(i, k);
        let (update, floats) = error_feedback_update(uplink, gi, &state.scratch, &mut rng)?;
        update.apply(gi);
        outbox.push(Message::upload(k, i, MessageKind::GradientDelta, floats));
        total += floats as u64;
    }
    average_into(&state.g_clients, &mut state.g);
    Ok(total)
}

fn downlink_exchange(
    state: &mut SamplerState,
    downlink: &Compressor,
    seeds: &ChainSeeds,
    outbox: &mut Vec<Message>,
) -> Result<u64> {
    let k = state.round;
    let w = state.w.as_mut().ok_or(ElfError::MissingState("shadow model w"))?;
    let mut rng = seeds.server(k);
    let (update, floats) = error_feedback_update(downlink, w, &state.x, &mut rng)?;
    update.apply(w);
    let devices = state
        .w_devices
        .as_mut()
        .ok_or(ElfError::MissingState("device shadow model"))?;
    update.apply(devices);
    outbox.push(Message::broadcast(k, MessageKind::ModelDelta, floats));
    Ok(floats as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub compressors: CompressorPair,
    pub gamma: f64,
    pub rounds: usize,
    #[serde(default)]
    pub init: InitSpec,
}

#[derive(Debug, Clone)]
pub struct ChainRun {
    pub records: Vec<RoundDiagnostics>,
    pub x_final: Vec<f64>,
}

/// Builds the initial state of chain `seeds.chain` with its Gaussian noise.
pub fn init_state(
    config: &ChainConfig,
    potential: &FederatedPotential,
    seeds: &ChainSeeds,
) -> Result<SamplerState> {
    let d = potential.dim();
    config.compressors.validate(config.algorithm, d)?;
    let x0 = config.init.sample(d, &mut seeds.init())?;
    SamplerState::new(config.algorithm, potential, x0, config.gamma, NoiseSource::gaussian(seeds))
}

/// Runs `config.rounds` rounds of a single chain and returns every round's
/// diagnostics and the final sample `x_K`.
pub fn run_chain(
    config: &ChainConfig,
    potential: &FederatedPotential,
    seeds: &ChainSeeds,
) -> Result<ChainRun> {
    if config.rounds == 0 {
        return Err(ElfError::InvalidArgument("rounds must be >= 1".into()));
    }
    let mut state = init_state(config, potential, seeds)?;
    let mut outbox = Vec::new();
    let mut records = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        outbox.clear();
        records.push(step(&mut state, potential, &config.compressors, seeds, &mut outbox)?);
    }
    Ok(ChainRun {
        records,
        x_final: state.x,
    })
}

/// Squared distance of `x` to a point, e.g. the minimiser in the noiseless
/// limit.
pub fn distance_sq_to(state: &SamplerState, point: &[f64]) -> f64 {
    dist_sq(&state.x, point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::{CommLedger, Direction};
    use crate::potentials::QuadraticClient;
    use nalgebra::{DMatrix, DVector};

    fn quad(d: usize) -> FederatedPotential {
        FederatedPotential::standard_gaussian(d, 1).unwrap()
    }

    fn three_clients() -> FederatedPotential {
        let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        FederatedPotential::gaussian(vec![
            QuadraticClient::new(vec![1.0, 0.0, -1.0], &diag(&[2.0, 0.5, 1.0])).unwrap(),
            QuadraticClient::new(vec![0.0, 2.0, 0.0], &diag(&[0.5, 1.5, 1.0])).unwrap(),
            QuadraticClient::new(vec![-1.0, 0.0, 1.0], &diag(&[1.0, 1.0, 3.0])).unwrap(),
        ])
        .unwrap()
    }

    fn state(alg: Algorithm, p: &FederatedPotential, x0: Vec<f64>, gamma: f64, noise: NoiseSource) -> SamplerState {
        SamplerState::new(alg, p, x0, gamma, noise).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-14)
    }

    #[test]
    fn zero_step_leaves_iterate() {
        let p = quad(2);
        let mut s = state(Algorithm::Lmc, &p, vec![0.3, -1.2], 0.0, NoiseSource::scripted(vec![vec![5.0, -7.0]]));
        lmc_round(&mut s, &p, &mut Vec::new()).unwrap();
        assert_eq!(s.x, vec![0.3, -1.2]);
    }

    #[test]
    fn lmc_hand_evaluation() {
        let p = quad(1);
        let mut s = state(Algorithm::Lmc, &p, vec![1.0], 0.1, NoiseSource::scripted(vec![vec![0.5]]));
        lmc_round(&mut s, &p, &mut Vec::new()).unwrap();
        assert!((s.x[0] - (0.9 + 0.2f64.sqrt() * 0.5)).abs() < 1e-15);
        assert!((s.x[0] - 1.12361).abs() < 1e-5);
    }

    #[test]
    fn delf_hand_trace() {
        let p = quad(2);
        let mut s = state(Algorithm::Delf, &p, vec![1.0, 2.0], 0.1, NoiseSource::Zero);
        assert_eq!(s.g, vec![1.0, 2.0]);
        let seeds = ChainSeeds::new(0, 0);
        let diag = delf_round(&mut s, &p, &Compressor::TopK { k: 1 }, &seeds, &mut Vec::new()).unwrap();
        assert!(close(&s.x, &[0.9, 1.8]));
        assert!(close(&s.g_clients[0], &[1.0, 1.8]));
        assert!(close(&s.g, &[1.0, 1.8]));
        assert_eq!((diag.uplink_floats, diag.downlink_floats), (2, 2));
        assert!((diag.lyapunov_dual - 0.01).abs() < 1e-14);
    }

    #[test]
    fn pelf_hand_trace() {
        let p = quad(2);
        let mut s = state(Algorithm::Pelf, &p, vec![1.0, 2.0], 0.1, NoiseSource::Zero);
        let seeds = ChainSeeds::new(0, 0);
        pelf_round(&mut s, &p, &Compressor::TopK { k: 1 }, &seeds, &mut Vec::new()).unwrap();
        assert!(close(&s.x, &[0.9, 1.8]));
        assert!(close(s.w.as_ref().unwrap(), &[1.0, 1.8]));
        // next drift is ∇F(w_1)
        assert!(close(&s.g, &[1.0, 1.8]));
    }

    #[test]
    fn belf_hand_trace() {
        let p = quad(2);
        let mut s = state(Algorithm::Belf, &p, vec![1.0, 2.0], 0.1, NoiseSource::Zero);
        let seeds = ChainSeeds::new(0, 0);
        let top1 = Compressor::TopK { k: 1 };
        let mut outbox = Vec::new();
        belf_round(&mut s, &p, &top1, &top1, &seeds, &mut outbox).unwrap();
        assert!(close(&s.x, &[0.9, 1.8]));
        assert!(close(s.w.as_ref().unwrap(), &[1.0, 1.8]));
        assert!(close(&s.g_clients[0], &[1.0, 1.8]));
        assert!(close(&s.g, &[1.0, 1.8]));
        assert_eq!(outbox.len(), 2);
    }

    #[test]
    fn server_aggregation_matches_client_deltas() {
        let p = three_clients();
        let seeds = ChainSeeds::new(17, 0);
        let mut s = state(Algorithm::Delf, &p, vec![0.5, -0.5, 2.0], 0.05, NoiseSource::gaussian(&seeds));
        let q = Compressor::RandK { k: 1 };
        for _ in 0..50 {
            let before_g = s.g.clone();
            let before_gi = s.g_clients.clone();
            delf_round(&mut s, &p, &q, &seeds, &mut Vec::new()).unwrap();
            let mut mean_delta = vec![0.0; 3];
            for (new, old) in s.g_clients.iter().zip(&before_gi) {
                for j in 0..3 {
                    mean_delta[j] += (new[j] - old[j]) / 3.0;
                }
            }
            for j in 0..3 {
                let lhs = s.g[j] - before_g[j];
                assert!((lhs - mean_delta[j]).abs() <= 1e-12 * (1.0 + s.g[j].abs()));
            }
            let mut avg = vec![0.0; 3];
            average_into(&s.g_clients, &mut avg);
            assert_eq!(avg, s.g);
        }
    }

    #[test]
    fn pelf_dual_is_below_primal() {
        let p = three_clients();
        let seeds = ChainSeeds::new(3, 1);
        let mut s = state(Algorithm::Pelf, &p, vec![0.0; 3], 0.05, NoiseSource::gaussian(&seeds));
        for _ in 0..200 {
            let d = pelf_round(&mut s, &p, &Compressor::RandK { k: 1 }, &seeds, &mut Vec::new()).unwrap();
            assert!(d.lyapunov_dual <= d.lyapunov_primal * (1.0 + 1e-12) + 1e-300);
        }
    }

    #[test]
    fn belf_server_and_device_shadows_agree() {
        let p = three_clients();
        let seeds = ChainSeeds::new(5, 2);
        let mut s = state(Algorithm::Belf, &p, vec![0.1; 3], 0.02, NoiseSource::gaussian(&seeds));
        for _ in 0..100 {
            belf_round(&mut s, &p, &Compressor::ScaledNatural, &Compressor::RandK { k: 2 }, &seeds, &mut Vec::new())
                .unwrap();
            assert_eq!(s.w, s.w_devices);
        }
    }

    #[test]
    fn identity_compressors_reproduce_lmc() {
        let p = three_clients();
        let cfg = |alg| ChainConfig {
            algorithm: alg,
            compressors: CompressorPair::identity(),
            gamma: 0.05,
            rounds: 200,
            init: InitSpec::StandardNormal,
        };
        let seeds = ChainSeeds::new(99, 4);
        let reference = run_chain(&cfg(Algorithm::Lmc), &p, &seeds).unwrap();
        for alg in [Algorithm::Delf, Algorithm::Pelf, Algorithm::Belf] {
            let mut st = init_state(&cfg(alg), &p, &seeds).unwrap();
            let mut lmc = init_state(&cfg(Algorithm::Lmc), &p, &seeds).unwrap();
            for _ in 0..200 {
                step(&mut st, &p, &CompressorPair::identity(), &seeds, &mut Vec::new()).unwrap();
                step(&mut lmc, &p, &CompressorPair::identity(), &seeds, &mut Vec::new()).unwrap();
                assert_eq!(st.x, lmc.x, "{alg}");
                if let Some(w) = &st.w {
                    assert_eq!(w, &st.x);
                }
                for (i, gi) in st.g_clients.iter().enumerate() {
                    assert_eq!(gi, &p.grad_component(i, &st.x).unwrap());
                }
            }
            assert_eq!(st.x, reference.x_final);
        }
    }

    #[test]
    fn identity_downlink_reduces_belf_to_delf() {
        let p = three_clients();
        let seeds = ChainSeeds::new(8, 0);
        let pair = CompressorPair {
            uplink: Some(Compressor::TopK { k: 1 }),
            downlink: Some(Compressor::Identity),
        };
        let cfg = |alg| ChainConfig {
            algorithm: alg,
            compressors: pair,
            gamma: 0.05,
            rounds: 100,
            init: InitSpec::StandardNormal,
        };
        let a = run_chain(&cfg(Algorithm::Belf), &p, &seeds).unwrap();
        let b = run_chain(&cfg(Algorithm::Delf), &p, &seeds).unwrap();
        assert_eq!(a.x_final, b.x_final);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.lyapunov_dual, rb.lyapunov_dual);
            assert_eq!(ra.uplink_floats, rb.uplink_floats);
        }
    }

    #[test]
    fn run_chain_is_deterministic_and_counts_rounds() {
        let p = three_clients();
        let cfg = ChainConfig {
            algorithm: Algorithm::Belf,
            compressors: CompressorPair {
                uplink: Some(Compressor::RandK { k: 1 }),
                downlink: Some(Compressor::ScaledNatural),
            },
            gamma: 0.01,
            rounds: 1,
            init: InitSpec::StandardNormal,
        };
        let seeds = ChainSeeds::new(1, 0);
        let one = run_chain(&cfg, &p, &seeds).unwrap();
        assert_eq!(one.records.len(), 1);
        let cfg = ChainConfig { rounds: 64, ..cfg };
        let a = run_chain(&cfg, &p, &seeds).unwrap();
        let b = run_chain(&cfg, &p, &seeds).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.x_final, b.x_final);
        assert!(run_chain(&ChainConfig { rounds: 0, ..cfg }, &p, &seeds).is_err());
    }

    #[test]
    fn missing_compressor_is_rejected() {
        let p = quad(2);
        let cfg = ChainConfig {
            algorithm: Algorithm::Belf,
            compressors: CompressorPair {
                uplink: Some(Compressor::Identity),
                downlink: None,
            },
            gamma: 0.1,
            rounds: 3,
            init: InitSpec::StandardNormal,
        };
        assert!(matches!(
            run_chain(&cfg, &p, &ChainSeeds::new(0, 0)),
            Err(ElfError::MissingState(_))
        ));
    }

    #[test]
    fn divergence_is_reported_with_round() {
        let p = quad(1);
        let cfg = ChainConfig {
            algorithm: Algorithm::Lmc,
            compressors: CompressorPair::default(),
            gamma: 3.0,
            rounds: 5000,
            init: InitSpec::Point { x: vec![1.0] },
        };
        match run_chain(&cfg, &p, &ChainSeeds::new(0, 0)) {
            Err(ElfError::Divergence { round, .. }) => assert!(round > 10),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn per_round_traffic_matches_formulas() {
        let p = three_clients();
        let (n, d) = (3u64, 3u64);
        let seeds = ChainSeeds::new(2, 0);
        let pair = CompressorPair {
            uplink: Some(Compressor::TopK { k: 1 }),
            downlink: Some(Compressor::RandK { k: 2 }),
        };
        for alg in Algorithm::ALL {
            let cfg = ChainConfig {
                algorithm: alg,
                compressors: pair,
                gamma: 0.02,
                rounds: 1,
                init: InitSpec::StandardNormal,
            };
            let mut s = init_state(&cfg, &p, &seeds).unwrap();
            let mut ledger = CommLedger::with_history();
            for _ in 0..10 {
                let mut outbox = Vec::new();
                let diag = step(&mut s, &p, &pair, &seeds, &mut outbox).unwrap();
                ledger.record_all(&outbox).unwrap();
                let (up, down) = match alg {
                    Algorithm::Lmc => (n * d, d),
                    Algorithm::Delf => (n * 2, d),
                    Algorithm::Pelf => (n * d, 4),
                    Algorithm::Belf => (n * 2, 4),
                };
                assert_eq!((diag.uplink_floats, diag.downlink_floats), (up, down), "{alg}");
                let h = ledger.history().last().unwrap();
                assert_eq!((h.uplink_floats, h.downlink_floats), (up, down));
                let ups = outbox.iter().filter(|m| m.direction == Direction::Uplink).count();
                assert_eq!(ups as u64, n);
            }
        }
    }
}
