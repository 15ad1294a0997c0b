//! Multi-chain runs, pooled traces, sweeps and their on-disk formats.
//!
//! Chains advance in parallel between event rounds (logged rounds and
//! plateau samples); every reduction walks the chains in index order, so
//! outputs do not depend on the number of worker threads.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::config::{set_path, GammaSpec, RunConfig, SweepAxis};
use crate::error::{ElfError, Result};
use crate::federation::{cost_to_reach, CostPoint, CostToReach, Message};
use crate::metrics::{
    divergence_report, gaussian_fisher, gaussian_kl, gaussian_w2, jackknife, lmc_propagate, Estimate,
    GaussianLaw, MomentAccumulator,
};
use crate::potentials::{make_builtin, FederatedPotential};
use crate::samplers::{init_state, step, Algorithm, ChainConfig, CompressorPair, SamplerState};
use crate::streams::ChainSeeds;
use crate::theory::{self, TheoryConstants, TAU_NOTE};

/// Upper bound on jackknife groups.
pub const MAX_GROUPS: usize = 20;

pub const PROXY_NOTE: &str = "kl_proxy, w2_proxy and fisher_proxy compare the moment-matched Gaussian \
of the pooled chains with the target; they are proxies, not the divergence of the sampler's law";

/// Column order of `trace.csv`.
pub const TRACE_COLUMNS: [&str; 12] = [
    "round",
    "kl_proxy",
    "kl_proxy_se",
    "kl_exact",
    "w2_proxy",
    "fisher_proxy",
    "lyapunov_dual_mean",
    "lyapunov_primal_mean",
    "step_sq_mean",
    "uplink_floats_cum",
    "downlink_floats_cum",
    "theory_bound",
];

/// Column order of `sweep.csv`.
pub const SWEEP_COLUMNS: [&str; 21] = [
    "point",
    "axis",
    "value",
    "algorithm",
    "gamma",
    "status",
    "rounds_completed",
    "final_kl_proxy",
    "final_kl_proxy_se",
    "final_kl_exact",
    "plateau_kl_proxy",
    "plateau_kl_proxy_se",
    "uplink_floats_total",
    "downlink_floats_total",
    "uplink_floats_per_round",
    "downlink_floats_per_round",
    "threshold",
    "cost_reached",
    "cost_round",
    "cost_uplink_floats",
    "cost_downlink_floats",
];

/// One logged round, pooled over chains.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub round: usize,
    pub kl_proxy: Option<f64>,
    pub kl_proxy_se: Option<f64>,
    /// Exact KL of the LMC law, for LMC on a Gaussian target from a
    /// Gaussian start.
    pub kl_exact: Option<f64>,
    pub w2_proxy: Option<f64>,
    pub fisher_proxy: Option<f64>,
    pub lyapunov_dual_mean: f64,
    pub lyapunov_primal_mean: f64,
    pub step_sq_mean: Option<f64>,
    pub uplink_floats_cum: f64,
    pub downlink_floats_cum: f64,
    pub theory_bound: Option<f64>,
}

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

impl TraceRecord {
    fn fields(&self) -> [String; 12] {
        [
            self.round.to_string(),
            opt(self.kl_proxy),
            opt(self.kl_proxy_se),
            opt(self.kl_exact),
            opt(self.w2_proxy),
            opt(self.fisher_proxy),
            format_float(self.lyapunov_dual_mean),
            format_float(self.lyapunov_primal_mean),
            opt(self.step_sq_mean),
            format_float(self.uplink_floats_cum),
            format_float(self.downlink_floats_cum),
            opt(self.theory_bound),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialInfo {
    pub clients: usize,
    pub dim: usize,
    pub lipschitz: f64,
    pub l_bar: f64,
    pub lipschitz_clients: Vec<f64>,
    pub mu: Option<f64>,
    pub gaussian_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalMetrics {
    pub round: usize,
    pub kl_proxy: Option<f64>,
    pub kl_proxy_se: Option<f64>,
    pub w2_proxy: Option<f64>,
    pub fisher_proxy: Option<f64>,
    pub tv_upper: Option<f64>,
    pub w2_upper: Option<f64>,
    pub kl_exact: Option<f64>,
    pub theory_bound: Option<f64>,
    pub singular_covariance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlateauSummary {
    pub from_round: usize,
    pub to_round: usize,
    pub stride: usize,
    pub samples: usize,
    pub kl_proxy: Option<f64>,
    pub kl_proxy_se: Option<f64>,
    pub w2_proxy: Option<f64>,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Communication {
    /// Per-chain means.
    pub uplink_floats_total: f64,
    pub downlink_floats_total: f64,
    pub uplink_floats_per_round: f64,
    pub downlink_floats_per_round: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceInfo {
    pub round: usize,
    pub chain: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence: Option<DivergenceInfo>,
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub gamma_auto: bool,
    pub rounds: usize,
    pub rounds_completed: usize,
    pub chains: usize,
    pub master_seed: u64,
    pub potential: PotentialInfo,
    pub compressors: CompressorPair,
    pub alpha_uplink: Option<f64>,
    pub alpha_downlink: Option<f64>,
    pub theory: Option<TheoryConstants>,
    pub theory_unavailable: Option<String>,
    pub tau_note: &'static str,
    pub kl0: Option<f64>,
    pub psi: Option<f64>,
    pub final_metrics: Option<FinalMetrics>,
    pub plateau: Option<PlateauSummary>,
    pub communication: Communication,
    pub proxy_note: &'static str,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub summary: Summary,
}

/// A validated config with its potential, step size and theory constants.
#[derive(Debug)]
pub struct Prepared {
    pub config: RunConfig,
    pub potential: FederatedPotential,
    pub gamma: f64,
    pub mu: Option<f64>,
    pub theory: std::result::Result<TheoryConstants, String>,
    pub target_law: Option<GaussianLaw>,
    pub init_law: Option<GaussianLaw>,
    pub kl0: Option<f64>,
}

/// `γ_max` of the theorem covering `algorithm`.
pub fn theory_gamma_max(
    algorithm: Algorithm,
    compressors: &CompressorPair,
    potential: &FederatedPotential,
    mu: f64,
) -> Result<f64> {
    let d = potential.dim();
    let (l, l_bar) = (potential.lipschitz(), potential.l_bar());
    let alpha = |c: Option<crate::compressors::Compressor>, which: &'static str| {
        c.map(|c| c.alpha(d)).ok_or(ElfError::MissingState(which))
    };
    match algorithm {
        Algorithm::Lmc => theory::delf_max_stepsize(1.0, l_bar, l, mu),
        Algorithm::Delf => theory::delf_max_stepsize(alpha(compressors.uplink, "an uplink compressor")?, l_bar, l, mu),
        Algorithm::Pelf => {
            theory::delf_max_stepsize(alpha(compressors.downlink, "a downlink compressor")?, l_bar, l, mu)
        }
        Algorithm::Belf => theory::belf_max_stepsize(
            alpha(compressors.uplink, "an uplink compressor")?,
            alpha(compressors.downlink, "a downlink compressor")?,
            l_bar,
            mu,
        ),
    }
}

/// Constants of the theorem covering `algorithm` at step size `gamma`.
pub fn theory_constants(
    algorithm: Algorithm,
    compressors: &CompressorPair,
    potential: &FederatedPotential,
    mu: f64,
    gamma: f64,
) -> Result<TheoryConstants> {
    let d = potential.dim();
    let (l, l_bar) = (potential.lipschitz(), potential.l_bar());
    let single = |alpha: f64| {
        theory::delf_constants(alpha, l_bar, l, mu, gamma, d, None).map(TheoryConstants::SingleDirection)
    };
    match algorithm {
        Algorithm::Lmc => single(1.0),
        Algorithm::Delf => single(
            compressors
                .uplink
                .ok_or(ElfError::MissingState("an uplink compressor"))?
                .alpha(d),
        ),
        Algorithm::Pelf => single(
            compressors
                .downlink
                .ok_or(ElfError::MissingState("a downlink compressor"))?
                .alpha(d),
        ),
        Algorithm::Belf => {
            let up = compressors.uplink.ok_or(ElfError::MissingState("an uplink compressor"))?;
            let down = compressors.downlink.ok_or(ElfError::MissingState("a downlink compressor"))?;
            theory::belf_constants(up.alpha(d), down.alpha(d), l_bar, mu, gamma, d, l)
                .map(TheoryConstants::Bidirectional)
        }
    }
}

/// Builds the potential and resolves `gamma`. Relative paths in the
/// potential resolve against `base_dir`.
pub fn prepare(config: &RunConfig, base_dir: Option<&Path>) -> Result<Prepared> {
    config.validate()?;
    let potential = make_builtin(&config.potential, base_dir)?;
    prepare_with_potential(config, potential)
}

pub fn prepare_with_potential(config: &RunConfig, potential: FederatedPotential) -> Result<Prepared> {
    config.validate()?;
    let d = potential.dim();
    config
        .compressors()
        .validate(config.algorithm, d)
        .map_err(|e| ElfError::config("uplink/downlink", e.to_string()))?;
    let mu = config.mu.or(potential.mu());
    let gamma = match config.gamma {
        GammaSpec::Fixed(g) => g,
        GammaSpec::Auto(_) => {
            let mu = mu.ok_or_else(|| {
                ElfError::MissingLsiConstant(
                    "gamma = \"auto\" needs a log-Sobolev constant; this potential has none. \
                     Set `mu` in the config or give a numeric gamma"
                        .into(),
                )
            })?;
            config.gamma_safety * theory_gamma_max(config.algorithm, &config.compressors(), &potential, mu)?
        }
    };
    let theory = match mu {
        Some(m) => theory_constants(config.algorithm, &config.compressors(), &potential, m, gamma)
            .map_err(|e| e.to_string()),
        None => Err("no log-Sobolev constant for this potential".to_string()),
    };
    let target_law = potential.gaussian_target().map(GaussianLaw::from_target);
    let init_law = config.init.law(d);
    let kl0 = match (&init_law, &target_law) {
        (Some(a), Some(b)) => Some(gaussian_kl(a, b)?),
        _ => None,
    };
    Ok(Prepared {
        config: config.clone(),
        potential,
        gamma,
        mu,
        theory,
        target_law,
        init_law,
        kl0,
    })
}

struct Chain {
    state: SamplerState,
    seeds: ChainSeeds,
    outbox: Vec<Message>,
    uplink: u64,
    downlink: u64,
    dual: f64,
    primal: f64,
    step_sq: Option<f64>,
    failure: Option<ElfError>,
}

impl Chain {
    fn advance(&mut self, potential: &FederatedPotential, compressors: &CompressorPair, until: usize) {
        while self.failure.is_none() && self.state.round < until {
            self.outbox.clear();
            match step(&mut self.state, potential, compressors, &self.seeds, &mut self.outbox) {
                Ok(d) => {
                    self.uplink += d.uplink_floats;
                    self.downlink += d.downlink_floats;
                    self.dual = d.lyapunov_dual;
                    self.primal = d.lyapunov_primal;
                    self.step_sq = Some(d.step_sq);
                }
                Err(e) => self.failure = Some(e),
            }
        }
    }
}

/// Runs `f` on a pool capped by `ELF_THREADS` when set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let cap = std::env::var("ELF_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    match cap.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

fn group_of(chain: usize, chains: usize, groups: usize) -> usize {
    chain * groups / chains
}

struct Pooled {
    kl: Option<Estimate>,
    w2: Option<f64>,
    fisher: Option<f64>,
    law: Option<GaussianLaw>,
    singular: bool,
}

fn pooled_metrics(groups: &[MomentAccumulator], target: Option<&GaussianLaw>) -> Pooled {
    let empty = Pooled {
        kl: None,
        w2: None,
        fisher: None,
        law: None,
        singular: false,
    };
    let mut total = groups[0].clone();
    for g in &groups[1..] {
        total.merge(g);
    }
    let Ok(est) = total.estimate() else {
        return empty;
    };
    let law = est.law_for_divergence();
    let Some(target) = target else {
        return Pooled {
            law: Some(est.law),
            singular: est.singular,
            ..empty
        };
    };
    let kl_value = gaussian_kl(&law, target).ok();
    let se = if groups.len() >= 2 {
        jackknife(groups, |e| gaussian_kl(&e.law_for_divergence(), target))
            .ok()
            .map(|e| e.se)
            .filter(|s| s.is_finite())
    } else {
        None
    };
    Pooled {
        kl: kl_value.map(|value| Estimate {
            value,
            se: se.unwrap_or(f64::NAN),
        }),
        w2: gaussian_w2(&law, target).ok(),
        fisher: gaussian_fisher(&law, target).ok(),
        law: Some(est.law),
        singular: est.singular,
    }
}

fn event_rounds(config: &RunConfig) -> (Vec<usize>, Vec<bool>, Vec<bool>, usize) {
    let k = config.rounds;
    let cadence = config.log_cadence();
    let stride = config.plateau_cadence();
    let from = k - ((config.plateau_fraction * k as f64).floor() as usize).min(k);
    let mut events = Vec::new();
    let mut logged = Vec::new();
    let mut plateau = Vec::new();
    for r in 0..=k {
        let is_log = r % cadence == 0 || r == k;
        let is_plateau = r >= from && (k - r) % stride == 0;
        if is_log || is_plateau {
            events.push(r);
            logged.push(is_log);
            plateau.push(is_plateau);
        }
    }
    (events, logged, plateau, from)
}

/// Runs every chain of a prepared config and pools the results.
pub fn execute(prep: &Prepared) -> Result<RunOutput> {
    with_thread_cap(|| execute_inner(prep))
}

fn execute_inner(prep: &Prepared) -> Result<RunOutput> {
    let config = &prep.config;
    let potential = &prep.potential;
    let compressors = config.compressors();
    let chain_cfg: ChainConfig = config.chain_config(prep.gamma);
    let n_chains = config.chains;
    let d = potential.dim();
    let n_groups = n_chains.min(MAX_GROUPS);
    let shift = prep
        .target_law
        .as_ref()
        .map(|t| t.mean.as_slice().to_vec())
        .unwrap_or_else(|| vec![0.0; d]);

    let mut chains: Vec<Chain> = (0..n_chains)
        .into_par_iter()
        .map(|c| {
            let seeds = ChainSeeds::new(config.master_seed, c as u64);
            let mut state = init_state(&chain_cfg, potential, &seeds)?;
            let (dual, primal) = state.lyapunov(potential)?;
            Ok(Chain {
                state,
                seeds,
                outbox: Vec::new(),
                uplink: 0,
                downlink: 0,
                dual,
                primal,
                step_sq: None,
                failure: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let exact_enabled = config.algorithm == Algorithm::Lmc && prep.init_law.is_some();
    let gaussian_target = potential.gaussian_target();
    let mut exact_law = if exact_enabled { prep.init_law.clone() } else { None };
    let mut exact_round = 0usize;

    let theory = prep.theory.as_ref().ok().filter(|t| t.admissible());
    let g0 = (
        chains.iter().map(|c| c.dual).sum::<f64>() / n_chains as f64,
        chains.iter().map(|c| c.primal).sum::<f64>() / n_chains as f64,
    );
    let psi = match (theory, prep.kl0) {
        (Some(t), Some(kl0)) => Some(t.psi(kl0, g0.0, g0.1)),
        _ => None,
    };

    let (events, logged, plateau_flags, plateau_from) = event_rounds(config);
    let mut plateau_groups: Vec<MomentAccumulator> =
        (0..n_groups).map(|_| MomentAccumulator::with_shift(shift.clone())).collect();
    let mut trace = Vec::new();
    let mut divergence = None;
    let mut completed = 0usize;
    let mut last_pooled = None;

    for (e, &round) in events.iter().enumerate() {
        if round > 0 {
            chains
                .par_iter_mut()
                .for_each(|c| c.advance(potential, &compressors, round));
            if let Some((idx, chain)) = chains.iter().enumerate().find(|(_, c)| c.failure.is_some()) {
                let err = chain.failure.as_ref().unwrap();
                let at = match err {
                    ElfError::Divergence { round, .. } => *round,
                    _ => chain.state.round,
                };
                divergence = Some(DivergenceInfo {
                    round: at,
                    chain: idx,
                    message: err.to_string(),
                });
                break;
            }
        }
        completed = round;
        if let (Some(law), Some(target)) = (exact_law.as_mut(), gaussian_target) {
            while exact_round < round {
                *law = lmc_propagate(law, target, prep.gamma);
                exact_round += 1;
            }
        }
        if plateau_flags[e] {
            for (c, chain) in chains.iter().enumerate() {
                plateau_groups[group_of(c, n_chains, n_groups)].push(&chain.state.x);
            }
        }
        if !logged[e] {
            continue;
        }
        let mut groups: Vec<MomentAccumulator> =
            (0..n_groups).map(|_| MomentAccumulator::with_shift(shift.clone())).collect();
        let (mut dual, mut primal, mut step_sq, mut up, mut down) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (c, chain) in chains.iter().enumerate() {
            groups[group_of(c, n_chains, n_groups)].push(&chain.state.x);
            dual += chain.dual;
            primal += chain.primal;
            step_sq += chain.step_sq.unwrap_or(0.0);
            up += chain.uplink as f64;
            down += chain.downlink as f64;
        }
        let m = n_chains as f64;
        let pooled = pooled_metrics(&groups, prep.target_law.as_ref());
        let kl_exact = match (&exact_law, &prep.target_law) {
            (Some(law), Some(t)) => gaussian_kl(law, t).ok(),
            _ => None,
        };
        trace.push(TraceRecord {
            round,
            kl_proxy: pooled.kl.map(|k| k.value),
            kl_proxy_se: pooled.kl.map(|k| k.se).filter(|s| s.is_finite()),
            kl_exact,
            w2_proxy: pooled.w2,
            fisher_proxy: pooled.fisher,
            lyapunov_dual_mean: dual / m,
            lyapunov_primal_mean: primal / m,
            step_sq_mean: (round > 0).then_some(step_sq / m),
            uplink_floats_cum: up / m,
            downlink_floats_cum: down / m,
            theory_bound: match (theory, psi) {
                (Some(t), Some(p)) => Some(t.bound(round, p)),
                _ => None,
            },
        });
        last_pooled = Some(pooled);
    }

    let m = n_chains as f64;
    let up_total = chains.iter().map(|c| c.uplink as f64).sum::<f64>() / m;
    let down_total = chains.iter().map(|c| c.downlink as f64).sum::<f64>() / m;
    let executed = chains.iter().map(|c| c.state.round).min().unwrap_or(0).max(1);

    let final_metrics = trace.last().map(|row| {
        let pooled = last_pooled.as_ref().unwrap();
        let report = match (&pooled.law, &prep.target_law) {
            (Some(law), Some(t)) => {
                let jitter = crate::metrics::MomentEstimate {
                    law: law.clone(),
                    singular: pooled.singular,
                    samples: n_chains,
                };
                divergence_report(&jitter.law_for_divergence(), t, prep.mu).ok()
            }
            _ => None,
        };
        FinalMetrics {
            round: row.round,
            kl_proxy: row.kl_proxy,
            kl_proxy_se: row.kl_proxy_se,
            w2_proxy: row.w2_proxy,
            fisher_proxy: row.fisher_proxy,
            tv_upper: report.map(|r| r.tv_upper),
            w2_upper: report.and_then(|r| r.w2_upper),
            kl_exact: row.kl_exact,
            theory_bound: row.theory_bound,
            singular_covariance: pooled.singular,
        }
    });

    let plateau = if divergence.is_none() {
        let samples: usize = plateau_groups.iter().map(|g| g.count()).sum();
        let pooled = pooled_metrics(&plateau_groups, prep.target_law.as_ref());
        pooled.law.as_ref().map(|law| PlateauSummary {
            from_round: plateau_from,
            to_round: config.rounds,
            stride: config.plateau_cadence(),
            samples,
            kl_proxy: pooled.kl.map(|k| k.value),
            kl_proxy_se: pooled.kl.map(|k| k.se).filter(|s| s.is_finite()),
            w2_proxy: pooled.w2,
            mean: law.mean.iter().copied().collect(),
            covariance: (0..d).map(|i| (0..d).map(|j| law.covariance[(i, j)]).collect()).collect(),
        })
    } else {
        None
    };

    let summary = Summary {
        status: if divergence.is_some() {
            RunStatus::Diverged
        } else {
            RunStatus::Completed
        },
        divergence,
        algorithm: config.algorithm,
        gamma: prep.gamma,
        gamma_auto: matches!(config.gamma, GammaSpec::Auto(_)),
        rounds: config.rounds,
        rounds_completed: completed,
        chains: n_chains,
        master_seed: config.master_seed,
        potential: PotentialInfo {
            clients: potential.n(),
            dim: d,
            lipschitz: potential.lipschitz(),
            l_bar: potential.l_bar(),
            lipschitz_clients: potential.lipschitz_clients().to_vec(),
            mu: prep.mu,
            gaussian_target: gaussian_target.is_some(),
        },
        compressors,
        alpha_uplink: compressors.uplink.map(|c| c.alpha(d)),
        alpha_downlink: compressors.downlink.map(|c| c.alpha(d)),
        theory: prep.theory.as_ref().ok().copied(),
        theory_unavailable: match &prep.theory {
            Err(e) => Some(e.clone()),
            Ok(t) if !t.admissible() => Some(format!(
                "gamma = {} exceeds the theorem step-size bound {}",
                prep.gamma,
                t.gamma_max()
            )),
            Ok(_) if prep.kl0.is_none() => Some("KL(rho_0) is not available for this init/target".into()),
            Ok(_) => None,
        },
        tau_note: TAU_NOTE,
        kl0: prep.kl0,
        psi,
        final_metrics,
        plateau,
        communication: Communication {
            uplink_floats_total: up_total,
            downlink_floats_total: down_total,
            uplink_floats_per_round: up_total / executed as f64,
            downlink_floats_per_round: down_total / executed as f64,
        },
        proxy_note: PROXY_NOTE,
        config: config.clone(),
    };
    Ok(RunOutput { trace, summary })
}

pub fn run(config: &RunConfig, base_dir: Option<&Path>) -> Result<RunOutput> {
    execute(&prepare(config, base_dir)?)
}

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_COLUMNS)?;
    for row in trace {
        w.write_record(row.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `trace.csv` and `summary.json` under `dir`.
pub fn write_run(dir: &Path, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_trace(&dir.join("trace.csv"), &output.trace)?;
    write_json(&dir.join("summary.json"), &output.summary)
}

/// Expands a config's sweep into one config per axis value.
pub fn sweep_configs(base: &RunConfig) -> Result<Vec<(Value, RunConfig)>> {
    let spec = base
        .sweep
        .as_ref()
        .ok_or_else(|| ElfError::config("sweep", "no sweep section in the config"))?;
    if spec.values.is_empty() {
        return Err(ElfError::config("sweep.values", "axis is empty"));
    }
    let mut template = base.to_value();
    template.as_object_mut().unwrap().remove("sweep");
    spec.values
        .iter()
        .map(|v| {
            let mut point = template.clone();
            match spec.axis {
                SweepAxis::Gamma => set_path(&mut point, "gamma", v.clone())?,
                SweepAxis::Algorithm => set_path(&mut point, "algorithm", v.clone())?,
                SweepAxis::K | SweepAxis::Omega => {
                    let (kinds, field): (&[&str], &str) = match spec.axis {
                        SweepAxis::K => (&["top_k", "rand_k"], "k"),
                        _ => (&["scaled_unbiased_wrapper"], "omega"),
                    };
                    let mut hit = false;
                    for side in ["uplink", "downlink"] {
                        let kind = point
                            .get(side)
                            .and_then(|c| c.get("kind"))
                            .and_then(Value::as_str)
                            .map(str::to_owned);
                        if kind.is_some_and(|k| kinds.contains(&k.as_str())) {
                            set_path(&mut point, &format!("{side}.{field}"), v.clone())?;
                            hit = true;
                        }
                    }
                    if !hit {
                        return Err(ElfError::config(
                            "sweep.axis",
                            format!("no compressor in the config has a `{field}` parameter"),
                        ));
                    }
                }
            }
            Ok((v.clone(), RunConfig::from_value(point)?))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: Value,
    pub output: RunOutput,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub axis: SweepAxis,
    pub threshold: Option<f64>,
    pub points: Vec<SweepPoint>,
}

pub fn sweep(base: &RunConfig, base_dir: Option<&Path>) -> Result<SweepOutput> {
    let spec = base.sweep.clone().ok_or_else(|| ElfError::config("sweep", "no sweep section in the config"))?;
    let points = sweep_configs(base)?
        .into_iter()
        .map(|(value, cfg)| Ok(SweepPoint { value, output: run(&cfg, base_dir)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepOutput {
        axis: spec.axis,
        threshold: spec.threshold,
        points,
    })
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Cost to bring the KL proxy to `threshold`, from a trace.
pub fn trace_cost(trace: &[TraceRecord], threshold: f64) -> Option<CostToReach> {
    let points: Vec<CostPoint> = trace
        .iter()
        .filter_map(|r| {
            r.kl_proxy.map(|metric| CostPoint {
                round: r.round,
                metric,
                uplink_floats: r.uplink_floats_cum,
                downlink_floats: r.downlink_floats_cum,
            })
        })
        .collect();
    cost_to_reach(&points, threshold).ok()
}

impl SweepOutput {
    pub fn rows(&self) -> Vec<[String; 21]> {
        self.points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let s = &p.output.summary;
                let fm = s.final_metrics.as_ref();
                let cost = self.threshold.and_then(|t| trace_cost(&p.output.trace, t));
                let (reached, cr, cu, cd) = match cost {
                    Some(CostToReach::Reached {
                        round,
                        uplink_floats,
                        downlink_floats,
                    }) => (
                        "true".to_string(),
                        round.to_string(),
                        format_float(uplink_floats),
                        format_float(downlink_floats),
                    ),
                    Some(CostToReach::NotReached) => ("false".into(), String::new(), String::new(), String::new()),
                    None => (String::new(), String::new(), String::new(), String::new()),
                };
                [
                    i.to_string(),
                    self.axis.name().to_string(),
                    value_label(&p.value),
                    s.algorithm.to_string(),
                    format_float(s.gamma),
                    match s.status {
                        RunStatus::Completed => "completed".into(),
                        RunStatus::Diverged => "diverged".into(),
                    },
                    s.rounds_completed.to_string(),
                    opt(fm.and_then(|f| f.kl_proxy)),
                    opt(fm.and_then(|f| f.kl_proxy_se)),
                    opt(fm.and_then(|f| f.kl_exact)),
                    opt(s.plateau.as_ref().and_then(|p| p.kl_proxy)),
                    opt(s.plateau.as_ref().and_then(|p| p.kl_proxy_se)),
                    format_float(s.communication.uplink_floats_total),
                    format_float(s.communication.downlink_floats_total),
                    format_float(s.communication.uplink_floats_per_round),
                    format_float(s.communication.downlink_floats_per_round),
                    opt(self.threshold),
                    reached,
                    cr,
                    cu,
                    cd,
                ]
            })
            .collect()
    }
}

/// Writes `sweep.csv` plus `point_NNN/{trace.csv,summary.json}` under `dir`.
pub fn write_sweep(dir: &Path, output: &SweepOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut dirs = Vec::new();
    for (i, p) in output.points.iter().enumerate() {
        let sub = dir.join(format!("point_{i:03}"));
        write_run(&sub, &p.output)?;
        dirs.push(sub);
    }
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    w.write_record(SWEEP_COLUMNS)?;
    for row in output.rows() {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(extra: &[&str]) -> RunConfig {
        let base = r#"{
            "algorithm": "lmc",
            "potential": {"kind": "standard_gaussian", "dim": 2, "clients": 2},
            "gamma": 0.1,
            "rounds": 50,
            "chains": 40
        }"#;
        RunConfig::from_json_with_overrides(base, extra).unwrap()
    }

    #[test]
    fn event_schedule() {
        let c = config(&["rounds=2500", "plateau_fraction=0.002"]);
        let (events, logged, plateau, from) = event_rounds(&c);
        assert_eq!(from, 2495);
        assert_eq!(events.first(), Some(&0));
        assert_eq!(events.last(), Some(&2500));
        assert_eq!(logged.iter().filter(|l| **l).count(), 835);
        assert!(plateau.iter().filter(|p| **p).count() >= 1);
    }

    #[test]
    fn trace_shape_and_monotone_counters() {
        let out = run(&config(&[]), None).unwrap();
        assert_eq!(out.trace.len(), 51);
        for w in out.trace.windows(2) {
            assert!(w[1].round > w[0].round);
            assert!(w[1].uplink_floats_cum >= w[0].uplink_floats_cum);
        }
        let last = out.trace.last().unwrap();
        assert_eq!(last.uplink_floats_cum, 50.0 * 2.0 * 2.0);
        assert_eq!(last.downlink_floats_cum, 50.0 * 2.0);
        assert_eq!(out.trace[0].kl_exact, Some(0.0));
        let s2 = 1.0 / (1.0 - 0.05);
        let stationary = 2.0 * 0.5 * (s2 - 1.0 - f64::ln(s2));
        assert!((last.kl_exact.unwrap() - stationary).abs() < 1e-3 * stationary);
        assert!(out.trace[0].theory_bound.is_none());
        assert!(out.summary.theory_unavailable.is_some());
        assert_eq!(out.summary.status, RunStatus::Completed);
        let small = run(&config(&["gamma=0.05"]), None).unwrap();
        for row in &small.trace {
            assert!(row.theory_bound.unwrap() >= row.kl_exact.unwrap());
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let c = config(&[
            "algorithm=belf",
            "uplink={\"kind\":\"rand_k\",\"k\":1}",
            "downlink={\"kind\":\"scaled_natural\"}",
            "gamma=0.01",
        ]);
        let prep = prepare(&c, None).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| execute_inner(&prep)).unwrap();
        let b = four.install(|| execute_inner(&prep)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn auto_gamma_needs_mu() {
        let mix = r#"{
            "algorithm": "lmc",
            "potential": {"kind": "gaussian_mixture", "clients": [
                {"weights": [0.5, 0.5], "means": [[-1.0], [1.0]], "sigma": 1.0}
            ]},
            "gamma": "auto",
            "rounds": 5
        }"#;
        let c = RunConfig::from_json(mix).unwrap();
        let err = prepare(&c, None).unwrap_err();
        assert!(matches!(err, ElfError::MissingLsiConstant(_)));
        assert!(err.to_string().contains("mu"));
        let c = RunConfig::from_json_with_overrides(mix, &["mu=0.5"]).unwrap();
        let p = prepare(&c, None).unwrap();
        assert!(p.gamma > 0.0);
    }

    #[test]
    fn divergence_is_recorded() {
        let out = run(&config(&["gamma=3.0", "rounds=2000", "chains=3", "init={\"kind\":\"point\",\"x\":[1.0,1.0]}"]), None)
            .unwrap();
        assert_eq!(out.summary.status, RunStatus::Diverged);
        assert!(out.summary.divergence.as_ref().unwrap().round > 10);
    }

    #[test]
    fn sweep_axes() {
        let mut c = config(&["algorithm=delf", "uplink={\"kind\":\"top_k\",\"k\":1}", "rounds=5"]);
        c.sweep = Some(crate::config::SweepSpec {
            axis: SweepAxis::K,
            values: vec![Value::from(1), Value::from(2)],
            threshold: Some(10.0),
        });
        let out = sweep(&c, None).unwrap();
        let rows = out.rows();
        assert_eq!(rows.len(), 2);
        assert_eq!(out.points[1].output.summary.communication.uplink_floats_per_round, 2.0 * 2.0 * 2.0);
        assert_eq!(rows[0][17], "true");
        c.sweep.as_mut().unwrap().axis = SweepAxis::Omega;
        assert!(sweep_configs(&c).is_err());
        c.sweep.as_mut().unwrap().values.clear();
        assert!(sweep_configs(&c).is_err());
    }
}
