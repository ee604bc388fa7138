//! Metropolis Monte Carlo over trajectories.
//!
//! A chain state is one trajectory `z -> x` with its generalized work. A
//! trial move resamples `k` coordinates of `z` (and of the forward noise
//! `eps`, for the perturbed flow) and is accepted with probability
//! `min(1, e^{-(W' - W)})`, evaluated in log space. Partial updates keep
//! acceptance usable in high dimension; they are valid because the prior
//! coordinates are independent.
//!
//! Deterministic-flow baselines run the same chain with `z`-only updates
//! and a Jacobian entropy supplied by the divergence integral (exact), the
//! Hutchinson estimator, or the exact affine log-determinant. The `direct`
//! method draws fresh `z` each step with no accept/reject and reproduces
//! the raw (biased) flow output.

use crate::affine::AffineFlow;
use crate::flow::FlowMap;
use crate::gmm::GmmSpec;
use crate::ode::{DivergenceMode, OdeFlow, ProbeMode};
use crate::perturb::{BackwardScale, PerturbedFlow, TrajectoryRecord};
use crate::prior::GaussianPrior;
use crate::{CoreError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Sampling method tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Method {
    Fp,
    BfJacob,
    Hutch(usize),
    Direct,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Fp => write!(f, "fp"),
            Method::BfJacob => write!(f, "bfjacob"),
            Method::Hutch(n) => write!(f, "hutch{n}"),
            Method::Direct => write!(f, "direct"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp" => Ok(Method::Fp),
            "bfjacob" => Ok(Method::BfJacob),
            "direct" => Ok(Method::Direct),
            other => {
                if let Some(n) = other.strip_prefix("hutch") {
                    let count: usize = n
                        .parse()
                        .map_err(|_| CoreError::invalid(format!("bad method tag {other}")))?;
                    if count == 0 {
                        return Err(CoreError::invalid("hutch needs at least one probe"));
                    }
                    Ok(Method::Hutch(count))
                } else {
                    Err(CoreError::invalid(format!("unknown method {other}")))
                }
            }
        }
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Method {
    type Error = CoreError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Chain configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    /// Coordinates of `z` (and of `eps`) resampled per trial move.
    pub k_update: usize,
    pub n_steps: usize,
    /// Steps discarded before statistics; `None` means 10% of `n_steps`.
    pub burn_in: Option<usize>,
    /// Keep every `thin`-th post-burn-in trajectory (0 keeps none).
    pub thin: usize,
    /// Resample the same coordinate indices for `z` and `eps`.
    pub shared_indices: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            k_update: 5,
            n_steps: 10_000,
            burn_in: None,
            thin: 10,
            shared_indices: false,
        }
    }
}

impl McConfig {
    pub fn resolved_burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.n_steps / 10)
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.k_update < 1 || self.k_update > dim {
            return Err(CoreError::invalid(format!(
                "k_update must be in [1, {dim}], got {}",
                self.k_update
            )));
        }
        Ok(())
    }
}

/// Resample `k` coordinates of `z` from the prior marginal and, when
/// present, `k` coordinates of `eps` from the standard normal. Index sets
/// are drawn independently unless `shared_indices` is set.
pub fn propose_partial(
    z: &[f64],
    eps: Option<&[f64]>,
    k: usize,
    shared_indices: bool,
    prior: &GaussianPrior,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let dim = z.len();
    if k < 1 || k > dim {
        return Err(CoreError::invalid(format!(
            "k must be in [1, {dim}], got {k}"
        )));
    }
    let mut z_new = z.to_vec();
    let z_idx = rand::seq::index::sample(rng, dim, k);
    for i in z_idx.iter() {
        z_new[i] = prior.sample_coord(rng);
    }
    let eps_new = match eps {
        None => None,
        Some(eps) => {
            let mut e = eps.to_vec();
            let idx = if shared_indices {
                z_idx
            } else {
                rand::seq::index::sample(rng, dim, k)
            };
            for i in idx.iter() {
                e[i] = rng.sample(rand_distr::StandardNormal);
            }
            Some(e)
        }
    };
    Ok((z_new, eps_new))
}

/// Outcome of one acceptance test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
    /// Non-finite trial work, treated as an infinite-energy proposal.
    RejectNonFinite,
}

/// Metropolis test in log space: draw `u ~ U(0,1)` and accept iff
/// `log u < W(current) - W(trial)`; a non-positive work difference always
/// accepts. The uniform draw happens unconditionally so that the RNG
/// stream advances identically whatever the works are.
pub fn accept(current_w: f64, trial_w: f64, rng: &mut impl Rng) -> Decision {
    let u: f64 = rng.random();
    if !trial_w.is_finite() {
        return Decision::RejectNonFinite;
    }
    let dw = trial_w - current_w;
    if dw <= 0.0 || u.ln() < -dw {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

/// Builds trial trajectories for one sampling method.
pub trait TrajectoryEngine: Send + Sync {
    fn dim(&self) -> usize;
    fn method(&self) -> Method;
    fn target(&self) -> &GmmSpec;
    fn prior(&self) -> &GaussianPrior;
    /// Whether trajectories carry a forward noise vector to update.
    fn uses_forward_noise(&self) -> bool;
    fn build(
        &self,
        z: &[f64],
        eps: Option<&[f64]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrajectoryRecord>;
}

/// Perturbed-flow engine: trial = forward perturbation + backward-noise
/// recovery, two flow solves and two energies per step.
pub struct FpEngine<'a> {
    pf: PerturbedFlow<&'a dyn FlowMap, &'a dyn BackwardScale>,
    target: &'a GmmSpec,
    prior: &'a GaussianPrior,
}

impl<'a> FpEngine<'a> {
    pub fn new(
        base: &'a dyn FlowMap,
        sigma_f: f64,
        sigma_b: &'a dyn BackwardScale,
        target: &'a GmmSpec,
        prior: &'a GaussianPrior,
    ) -> Result<Self> {
        crate::error::check_dim(base.dim(), target.dim())?;
        crate::error::check_dim(base.dim(), prior.dim())?;
        Ok(FpEngine {
            pf: PerturbedFlow::new(base, sigma_f, sigma_b)?,
            target,
            prior,
        })
    }

    pub fn perturbed_flow(&self) -> &PerturbedFlow<&'a dyn FlowMap, &'a dyn BackwardScale> {
        &self.pf
    }
}

impl TrajectoryEngine for FpEngine<'_> {
    fn dim(&self) -> usize {
        self.pf.base().dim()
    }

    fn method(&self) -> Method {
        Method::Fp
    }

    fn target(&self) -> &GmmSpec {
        self.target
    }

    fn prior(&self) -> &GaussianPrior {
        self.prior
    }

    fn uses_forward_noise(&self) -> bool {
        true
    }

    fn build(
        &self,
        z: &[f64],
        eps: Option<&[f64]>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<TrajectoryRecord> {
        let eps = eps.ok_or_else(|| CoreError::invalid("fp trajectories need forward noise"))?;
        self.pf.make_trajectory(self.target, self.prior, z, eps)
    }
}

/// Where a deterministic baseline gets its Jacobian entropy.
pub enum LogDetSource<'a> {
    /// Exact affine log-determinant.
    AffineExact(&'a AffineFlow),
    /// Divergence integral along the ODE trajectory.
    Divergence {
        flow: &'a OdeFlow,
        mode: DivergenceMode,
    },
    /// Hutchinson probe estimate along the ODE trajectory.
    Hutchinson {
        flow: &'a OdeFlow,
        probes: usize,
        probe_mode: ProbeMode,
    },
}

impl LogDetSource<'_> {
    fn dim(&self) -> usize {
        match self {
            LogDetSource::AffineExact(f) => f.dim(),
            LogDetSource::Divergence { flow, .. } => flow.dim(),
            LogDetSource::Hutchinson { flow, .. } => flow.dim(),
        }
    }

    fn method(&self) -> Method {
        match self {
            LogDetSource::AffineExact(_) | LogDetSource::Divergence { .. } => Method::BfJacob,
            LogDetSource::Hutchinson { probes, .. } => Method::Hutch(*probes),
        }
    }

    fn forward_with_logdet(&self, z: &[f64], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64)> {
        match self {
            LogDetSource::AffineExact(f) => Ok((f.forward(z)?, f.log_det())),
            LogDetSource::Divergence { flow, mode } => flow.integrate_with_divergence(z, *mode),
            LogDetSource::Hutchinson {
                flow,
                probes,
                probe_mode,
            } => flow.integrate_with_hutchinson(z, *probes, *probe_mode, rng),
        }
    }
}

/// Deterministic-flow engine: `z`-only updates, `x = f(z)`, work from the
/// supplied Jacobian entropy.
pub struct DetEngine<'a> {
    source: LogDetSource<'a>,
    target: &'a GmmSpec,
    prior: &'a GaussianPrior,
}

impl<'a> DetEngine<'a> {
    pub fn new(
        source: LogDetSource<'a>,
        target: &'a GmmSpec,
        prior: &'a GaussianPrior,
    ) -> Result<Self> {
        crate::error::check_dim(source.dim(), target.dim())?;
        crate::error::check_dim(source.dim(), prior.dim())?;
        Ok(DetEngine {
            source,
            target,
            prior,
        })
    }
}

impl TrajectoryEngine for DetEngine<'_> {
    fn dim(&self) -> usize {
        self.source.dim()
    }

    fn method(&self) -> Method {
        self.source.method()
    }

    fn target(&self) -> &GmmSpec {
        self.target
    }

    fn prior(&self) -> &GaussianPrior {
        self.prior
    }

    fn uses_forward_noise(&self) -> bool {
        false
    }

    fn build(
        &self,
        z: &[f64],
        _eps: Option<&[f64]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrajectoryRecord> {
        let (x, delta_s) = self.source.forward_with_logdet(z, rng)?;
        let u_x = self.target.energy(&x)?;
        let u_z = self.prior.energy(z)?;
        let work = u_x - u_z - delta_s;
        if !work.is_finite() {
            return Err(CoreError::non_finite("deterministic trajectory work", None));
        }
        Ok(TrajectoryRecord {
            z: z.to_vec(),
            eps: Vec::new(),
            x,
            eps_back: Vec::new(),
            delta_s,
            u_x,
            u_z,
            work,
        })
    }
}

/// One Metropolis chain: the current trajectory, its RNG stream and the
/// acceptance counters.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub method: Method,
    pub current: TrajectoryRecord,
    pub step: u64,
    pub accepts: u64,
    pub rejects: u64,
    pub flagged: u64,
    pub rng: ChaCha8Rng,
}

impl ChainState {
    pub fn acceptance_rate(&self) -> f64 {
        if self.step == 0 {
            0.0
        } else {
            self.accepts as f64 / self.step as f64
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let seed = self.rng.get_seed();
        let word_pos = self.rng.get_word_pos();
        Checkpoint {
            method: self.method.to_string(),
            step: self.step,
            z: self.current.z.clone(),
            eps: self.current.eps.clone(),
            x: self.current.x.clone(),
            eps_back: self.current.eps_back.clone(),
            delta_s: self.current.delta_s,
            u_x: self.current.u_x,
            u_z: self.current.u_z,
            work: self.current.work,
            rng_seed: seed.iter().map(|b| format!("{b:02x}")).collect(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos_hi: (word_pos >> 64) as u64,
            rng_word_pos_lo: word_pos as u64,
            accepts: self.accepts,
            rejects: self.rejects,
            flagged: self.flagged,
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        let method: Method = cp.method.parse()?;
        if cp.rng_seed.len() != 64 {
            return Err(CoreError::invalid("rng seed must be 32 hex bytes"));
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&cp.rng_seed[2 * i..2 * i + 2], 16)
                .map_err(|_| CoreError::invalid("bad hex in rng seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(cp.rng_stream);
        rng.set_word_pos(((cp.rng_word_pos_hi as u128) << 64) | cp.rng_word_pos_lo as u128);
        let current = TrajectoryRecord {
            z: cp.z.clone(),
            eps: cp.eps.clone(),
            x: cp.x.clone(),
            eps_back: cp.eps_back.clone(),
            delta_s: cp.delta_s,
            u_x: cp.u_x,
            u_z: cp.u_z,
            work: cp.work,
        };
        if current.work_residual() > 1e-9 {
            return Err(CoreError::invalid(format!(
                "checkpoint work is inconsistent with its parts (residual {})",
                current.work_residual()
            )));
        }
        Ok(ChainState {
            method,
            current,
            step: cp.step,
            accepts: cp.accepts,
            rejects: cp.rejects,
            flagged: cp.flagged,
            rng,
        })
    }
}

/// Serializable chain snapshot; resuming from it continues the identical
/// step/accept/RNG sequence of an uninterrupted run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub method: String,
    pub step: u64,
    pub z: Vec<f64>,
    #[serde(default)]
    pub eps: Vec<f64>,
    pub x: Vec<f64>,
    #[serde(default)]
    pub eps_back: Vec<f64>,
    pub delta_s: f64,
    pub u_x: f64,
    pub u_z: f64,
    pub work: f64,
    pub rng_seed: String,
    pub rng_stream: u64,
    pub rng_word_pos_hi: u64,
    pub rng_word_pos_lo: u64,
    pub accepts: u64,
    pub rejects: u64,
    pub flagged: u64,
}

/// Build the initial chain state: `z` from the prior, `eps` standard
/// normal where the method uses it, one trajectory construction.
pub fn init_chain(engine: &dyn TrajectoryEngine, mut rng: ChaCha8Rng) -> Result<ChainState> {
    let z = engine.prior().sample(&mut rng);
    let eps = engine
        .uses_forward_noise()
        .then(|| crate::rng::standard_normal_vec(&mut rng, engine.dim()));
    let current = engine.build(&z, eps.as_deref(), &mut rng)?;
    Ok(ChainState {
        method: engine.method(),
        current,
        step: 0,
        accepts: 0,
        rejects: 0,
        flagged: 0,
        rng,
    })
}

/// Build a chain state around a given starting trajectory.
pub fn init_chain_from(
    engine: &dyn TrajectoryEngine,
    current: TrajectoryRecord,
    rng: ChaCha8Rng,
) -> ChainState {
    ChainState {
        method: engine.method(),
        current,
        step: 0,
        accepts: 0,
        rejects: 0,
        flagged: 0,
        rng,
    }
}

/// One Metropolis step: partial proposal, trial construction, acceptance.
/// Numeric failures in the trial count as flagged rejections; other errors
/// propagate. Returns whether the move was accepted.
pub fn mc_step(
    engine: &dyn TrajectoryEngine,
    state: &mut ChainState,
    config: &McConfig,
) -> Result<bool> {
    let eps_ref = engine.uses_forward_noise().then_some(&state.current.eps[..]);
    let (z_new, eps_new) = propose_partial(
        &state.current.z,
        eps_ref,
        config.k_update,
        config.shared_indices,
        engine.prior(),
        &mut state.rng,
    )?;
    let trial = match engine.build(&z_new, eps_new.as_deref(), &mut state.rng) {
        Ok(t) => Some(t),
        Err(e) if e.is_numeric() => None,
        Err(e) => return Err(e),
    };
    let trial_w = trial.as_ref().map(|t| t.work).unwrap_or(f64::INFINITY);
    let decision = accept(state.current.work, trial_w, &mut state.rng);
    state.step += 1;
    match decision {
        Decision::Accept => {
            state.current = trial.expect("accepted trials are finite");
            state.accepts += 1;
            Ok(true)
        }
        Decision::Reject => {
            state.rejects += 1;
            Ok(false)
        }
        Decision::RejectNonFinite => {
            state.rejects += 1;
            state.flagged += 1;
            Ok(false)
        }
    }
}

/// One emitted trace row: the state of the chain after a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub work: f64,
    pub energy: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSummary {
    pub method: String,
    pub steps: u64,
    pub accepts: u64,
    pub rejects: u64,
    pub flagged: u64,
    pub acceptance_rate: f64,
    /// Post-burn-in statistics of the energy series.
    pub mean_energy: f64,
    pub energy_sd: f64,
    pub ess: Option<f64>,
    pub iact: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainTrace {
    pub rows: Vec<StepRow>,
    /// Thinned post-burn-in trajectories.
    pub samples: Vec<(u64, TrajectoryRecord)>,
    pub burn_in: usize,
    pub summary: ChainSummary,
}

/// Run `burn_in + n_steps` Metropolis steps, emitting one row per step
/// (plus the initial state for a fresh chain) and thinned trajectories
/// after burn-in. Resumed chains (`state.step > 0`) treat burn-in as
/// already spent.
pub fn run_chain(
    engine: &dyn TrajectoryEngine,
    config: &McConfig,
    state: &mut ChainState,
) -> Result<ChainTrace> {
    config.validate(engine.dim())?;
    let fresh = state.step == 0;
    let burn_in = if fresh { config.resolved_burn_in() } else { 0 };
    let total = burn_in + config.n_steps;
    let mut rows = Vec::with_capacity(total + 1);
    let mut samples = Vec::new();

    fn row_of(state: &ChainState, accepted: bool) -> StepRow {
        StepRow {
            step: state.step,
            work: state.current.work,
            energy: state.current.u_x,
            accepted,
        }
    }

    if fresh {
        rows.push(row_of(state, true));
    }
    let mut post_burn_energy: Vec<f64> = Vec::with_capacity(config.n_steps + 1);
    if burn_in == 0 {
        post_burn_energy.push(state.current.u_x);
        if config.thin > 0 {
            samples.push((state.step, state.current.clone()));
        }
    }
    for i in 0..total {
        let accepted = mc_step(engine, state, config)?;
        rows.push(row_of(state, accepted));
        if i >= burn_in {
            post_burn_energy.push(state.current.u_x);
            let since_burn = i - burn_in;
            if config.thin > 0 && (since_burn + 1) % config.thin == 0 {
                samples.push((state.step, state.current.clone()));
            }
        }
    }

    let n = post_burn_energy.len();
    let mean_energy = if n > 0 {
        post_burn_energy.iter().sum::<f64>() / n as f64
    } else {
        f64::NAN
    };
    let energy_sd = if n > 1 {
        (post_burn_energy
            .iter()
            .map(|e| (e - mean_energy) * (e - mean_energy))
            .sum::<f64>()
            / (n - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    let ess = crate::diagnostics::ess(&post_burn_energy).ok();
    let iact = ess.map(|e| n as f64 / e);
    let summary = ChainSummary {
        method: state.method.to_string(),
        steps: state.step,
        accepts: state.accepts,
        rejects: state.rejects,
        flagged: state.flagged,
        acceptance_rate: state.acceptance_rate(),
        mean_energy,
        energy_sd,
        ess,
        iact,
    };
    Ok(ChainTrace {
        rows,
        samples,
        burn_in,
        summary,
    })
}

/// Raw flow output with no accept/reject: fresh `z` each step,
/// `x = f(z)`. This is the biased distribution the reweighting corrects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectTrace {
    /// (step, energy) rows; direct sampling has no work or acceptance.
    pub rows: Vec<(u64, f64)>,
    pub samples: Vec<(u64, Vec<f64>)>,
    pub mean_energy: f64,
    pub energy_sd: f64,
}

pub fn run_direct(
    flow: &dyn FlowMap,
    target: &GmmSpec,
    prior: &GaussianPrior,
    n_steps: usize,
    thin: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DirectTrace> {
    if n_steps == 0 {
        return Err(CoreError::invalid("direct sampling needs n_steps >= 1"));
    }
    let mut rows = Vec::with_capacity(n_steps);
    let mut samples = Vec::new();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for step in 0..n_steps {
        let z = prior.sample(rng);
        let x = flow.forward(&z)?;
        let e = target.energy(&x)?;
        sum += e;
        sum_sq += e * e;
        rows.push((step as u64, e));
        if thin > 0 && (step + 1) % thin == 0 {
            samples.push((step as u64, x));
        }
    }
    let mean = sum / n_steps as f64;
    let var = (sum_sq / n_steps as f64 - mean * mean).max(0.0);
    Ok(DirectTrace {
        rows,
        samples,
        mean_energy: mean,
        energy_sd: var.sqrt(),
    })
}
