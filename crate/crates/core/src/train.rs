//! Training the learned mechanisms.
//!
//! The empirical problem is
//!
//! ```text
//! max_theta  mean_s logNSW(f_theta(s))   s.t.  mean_s gain_i(s) <= eps  for every agent i
//! ```
//!
//! handled with a Lagrangian and gradient descent-ascent: Adam on the network
//! parameters, projected ascent on one multiplier per agent. In alpha mode the
//! multipliers are replaced by the constant `alpha` and never updated.
//!
//! `gain_i(s)` is the best misreport the training attack finds. Its gradient
//! is taken at that misreport with the misreport held fixed, so one step needs
//! the truthful pass plus one extra pass per agent with a positive gain and a
//! positive multiplier.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_batch, DataSpec};
use crate::error::{Error, Result};
use crate::exploit::{best_misreport_from, exploitability_vector, AttackConfig};
use crate::mechanisms::{exs_backward, exs_forward, expf_backward, expf_forward, ExpfOutput, ExsCache, Mechanism};
use crate::metrics::{agent_utility_grad, efficiency, floored_log_nsw, utility, weighted_utility_grad};
use crate::mlp::{adam_step, AdamState, MlpGrads, MlpParams};
use crate::pfsolve::SolverConfig;
use crate::profile::{AgentMatrix, Allocation, ProblemDims, RequestProfile};

/// Largest fraction of samples allowed to fail in one pass.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnedKind {
    ExsNet,
    ExpfNet,
}

impl LearnedKind {
    pub fn output_len(self, dims: ProblemDims) -> usize {
        match self {
            LearnedKind::ExsNet => crate::mechanisms::exs_output_len(dims),
            LearnedKind::ExpfNet => crate::mechanisms::expf_output_len(dims),
        }
    }

    /// Wraps parameters into a mechanism; ExPF-Net takes its ridge from `solver`.
    pub fn mechanism(self, params: MlpParams, solver: &SolverConfig) -> Mechanism {
        match self {
            LearnedKind::ExsNet => Mechanism::ExsNet(params),
            LearnedKind::ExpfNet => Mechanism::ExpfNet { params, cfg: *solver },
        }
    }

    pub fn of(mech: &Mechanism) -> Option<Self> {
        match mech {
            Mechanism::ExsNet(_) => Some(LearnedKind::ExsNet),
            Mechanism::ExpfNet { .. } => Some(LearnedKind::ExpfNet),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Per-agent exploitability tolerance; set exactly one of `epsilon` and `alpha`.
    pub epsilon: Option<f64>,
    /// Weight of the summed exploitability in the unconstrained variant.
    pub alpha: Option<f64>,
    /// Size of the fixed training pool.
    pub samples: usize,
    /// Samples per step, taken cyclically from the pool; 0 uses the whole pool.
    pub batch_size: usize,
    pub outer_iters: usize,
    pub lr_primal: f64,
    pub lr_dual: f64,
    /// Attack used inside training.
    pub attack: AttackConfig,
    /// Start each sample's first attack restart from the misreport found for it last time.
    pub warm_start: bool,
    /// Draw a fresh batch every step instead of cycling through a fixed pool.
    pub resample: bool,
    /// Log, checkpoint and flush the history every this many steps; 0 only at the end.
    pub eval_every: usize,
    pub seed: u64,
    /// Hidden width `K`.
    pub width: usize,
    /// Number of hidden layers `R`.
    pub hidden: usize,
    /// Factor applied to the output layer after initialization.
    pub init_output_scale: f64,
    /// Solver settings for ExPF-Net, including its ridge.
    pub solver: SolverConfig,
    /// Training distribution; `None` means the default spec for the dimensions.
    pub data: Option<DataSpec>,
    /// Directory for the config snapshot, history and checkpoints.
    #[serde(skip)]
    pub run_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epsilon: Some(1e-3),
            alpha: None,
            samples: 1024,
            batch_size: 64,
            outer_iters: 5000,
            lr_primal: 1e-3,
            lr_dual: 1.0,
            attack: AttackConfig {
                restarts: 2,
                steps: 50,
                ..AttackConfig::default()
            },
            warm_start: true,
            resample: false,
            eval_every: 500,
            seed: 0,
            width: 64,
            hidden: 2,
            init_output_scale: 1.0,
            solver: SolverConfig::default(),
            data: None,
            run_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Epsilon(f64),
    Alpha(f64),
}

impl TrainConfig {
    fn mode(&self) -> Result<Mode> {
        match (self.epsilon, self.alpha) {
            (Some(e), None) if e >= 0.0 => Ok(Mode::Epsilon(e)),
            (None, Some(a)) if a > 0.0 && a.is_finite() => Ok(Mode::Alpha(a)),
            (Some(_), Some(_)) | (None, None) => Err(Error::InvalidConfig(
                "exactly one of epsilon and alpha must be set".into(),
            )),
            _ => Err(Error::InvalidConfig("epsilon must be >= 0 and alpha > 0".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mode()?;
        if self.samples == 0 {
            return Err(Error::InvalidConfig("at least one training sample is required".into()));
        }
        if self.resample && self.batch_size == 0 {
            return Err(Error::InvalidConfig("resampling needs a positive batch size".into()));
        }
        for (name, v) in [("lr_primal", self.lr_primal), ("lr_dual", self.lr_dual)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if self.width == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        self.attack.validate()?;
        self.solver.validate()
    }

    pub fn data_spec(&self, dims: ProblemDims) -> Result<DataSpec> {
        let spec = self.data.clone().unwrap_or_else(|| DataSpec::new(dims));
        if spec.dims != dims {
            return Err(Error::InvalidConfig(format!(
                "data spec is {} but training is {}",
                spec.dims, dims
            )));
        }
        Ok(spec)
    }
}

/// One row of the metric history, measured on the batch of that step
/// before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub log_nsw: f64,
    /// The Lagrangian (or alpha-penalized objective) being ascended.
    pub objective: f64,
    pub exploitability: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: MlpParams,
    /// One nonnegative dual per agent; stays zero in alpha mode.
    pub multipliers: Vec<f64>,
    pub adam: AdamState,
    pub iteration: usize,
    pub history: Vec<HistoryRow>,
    warm: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl TrainState {
    pub fn new(params: MlpParams, n_agents: usize) -> Self {
        Self {
            adam: AdamState::new(&params),
            params,
            multipliers: vec![0.0; n_agents],
            iteration: 0,
            history: Vec::new(),
            warm: Vec::new(),
        }
    }
}

enum Pass {
    Exs(Allocation, ExsCache),
    Expf(ExpfOutput),
}

impl Pass {
    fn run(kind: LearnedKind, params: &MlpParams, profile: &RequestProfile, solver: &SolverConfig) -> Result<Self> {
        match kind {
            LearnedKind::ExsNet => exs_forward(params, profile).map(|(a, c)| Pass::Exs(a, c)),
            LearnedKind::ExpfNet => expf_forward(params, profile, solver).map(Pass::Expf),
        }
    }

    fn allocation(&self) -> &Allocation {
        match self {
            Pass::Exs(a, _) => a,
            Pass::Expf(out) => &out.allocation,
        }
    }

    fn param_grads(&self, params: &MlpParams, profile: &RequestProfile, grad_a: &AgentMatrix) -> Result<MlpGrads> {
        match self {
            Pass::Exs(_, cache) => Ok(exs_backward(params, cache, grad_a)?.0),
            Pass::Expf(out) => Ok(expf_backward(params, profile, out, grad_a)?.params),
        }
    }
}

/// Gradient of one sample's contribution and its measurements.
struct SampleTerm {
    grads: MlpGrads,
    log_nsw: f64,
    gains: Vec<f64>,
    best: Vec<(Vec<f64>, Vec<f64>)>,
}

fn sample_term<R: Rng + ?Sized>(
    kind: LearnedKind,
    params: &MlpParams,
    mech: &Mechanism,
    truth: &RequestProfile,
    penalty: &[f64],
    warm: &[Option<(Vec<f64>, Vec<f64>)>],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SampleTerm> {
    let n = truth.n_agents();
    let mut gains = Vec::with_capacity(n);
    let mut best = Vec::with_capacity(n);
    for i in 0..n {
        let start = warm
            .get(i)
            .and_then(|w| w.as_ref())
            .map(|(v, x)| (v.as_slice(), x.as_slice()));
        let res = best_misreport_from(mech, truth, i, &cfg.attack, start, rng)?;
        gains.push(res.gain.max(0.0));
        best.push((res.best_v, res.best_x));
    }

    let truthful = Pass::run(kind, params, truth, &cfg.solver)?;
    let u = utility(truthful.allocation(), truth)?;
    let (log_nsw, mut coef) = floored_log_nsw(&u, &truth.weights);
    for i in 0..n {
        if gains[i] > 0.0 {
            coef[i] += penalty[i];
        }
    }
    let mut g_truth = weighted_utility_grad(truthful.allocation(), truth, &coef);
    g_truth.as_mut_slice().iter_mut().for_each(|g| *g = -*g);
    let mut grads = truthful.param_grads(params, truth, &g_truth)?;

    for i in 0..n {
        if gains[i] <= 0.0 || penalty[i] == 0.0 {
            continue;
        }
        let reported = truth.with_report(i, &best[i].0, &best[i].1);
        let pass = Pass::run(kind, params, &reported, &cfg.solver)?;
        let a = pass.allocation();
        let gi = agent_utility_grad(a.matrix().row(i), truth.values.row(i), truth.demands.row(i));
        let mut g = AgentMatrix::zeros(n, truth.n_resources());
        for (r, v) in gi.into_iter().enumerate() {
            g.set(i, r, penalty[i] * v);
        }
        let extra = pass.param_grads(params, &reported, &g)?;
        grads.add_scaled(&extra, 1.0)?;
    }
    Ok(SampleTerm {
        grads,
        log_nsw,
        gains,
        best,
    })
}

fn check_failures(failed: usize, total: usize) -> Result<()> {
    if total == 0 || (failed as f64) > MAX_FAILURE_FRACTION * total as f64 || failed == total {
        return Err(Error::TooManyFailures { failed, total });
    }
    Ok(())
}

/// One descent-ascent step on the samples `pool[batch]`. Appends the
/// measurements taken before the update to `state.history` and returns them.
pub fn gda_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    kind: LearnedKind,
    pool: &[RequestProfile],
    batch: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<HistoryRow> {
    let mode = cfg.mode()?;
    let n = state.multipliers.len();
    let penalty = match mode {
        Mode::Epsilon(_) => state.multipliers.clone(),
        Mode::Alpha(a) => vec![a; n],
    };
    if cfg.warm_start && state.warm.len() != pool.len() * n {
        state.warm = vec![None; pool.len() * n];
    }
    let mech = kind.mechanism(state.params.clone(), &cfg.solver);
    let mut total = state.params.zeros_like();
    let mut log_nsw = 0.0;
    let mut gains = vec![0.0; n];
    let (mut used, mut failed) = (0usize, 0usize);
    for &s in batch {
        let truth = pool
            .get(s)
            .ok_or_else(|| Error::InvalidInput(format!("batch index {s} outside the pool")))?;
        if truth.n_agents() != n {
            return Err(Error::DimensionMismatch("pool profile has a different agent count".into()));
        }
        let warm = if cfg.warm_start { &state.warm[s * n..(s + 1) * n] } else { &[][..] };
        match sample_term(kind, &state.params, &mech, truth, &penalty, warm, cfg, rng) {
            Ok(term) => {
                total.add_scaled(&term.grads, 1.0)?;
                log_nsw += term.log_nsw;
                for (acc, g) in gains.iter_mut().zip(&term.gains) {
                    *acc += g;
                }
                if cfg.warm_start {
                    for (slot, b) in state.warm[s * n..(s + 1) * n].iter_mut().zip(term.best) {
                        *slot = Some(b);
                    }
                }
                used += 1;
            }
            Err(e) => {
                log::warn!("step {}: sample {s} skipped: {e}", state.iteration);
                failed += 1;
            }
        }
    }
    check_failures(failed, batch.len())?;
    let inv = 1.0 / used as f64;
    total.scale(inv);
    log_nsw *= inv;
    gains.iter_mut().for_each(|g| *g *= inv);

    let objective = log_nsw
        - match mode {
            Mode::Epsilon(eps) => penalty
                .iter()
                .zip(&gains)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, g)| p * (g - eps))
                .sum::<f64>(),
            Mode::Alpha(a) => a * gains.iter().sum::<f64>(),
        };
    if !objective.is_finite() || !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "step {}: objective {objective}, logNSW {log_nsw}, gains {gains:?}, multipliers {:?}",
            state.iteration, state.multipliers
        )));
    }
    let row = HistoryRow {
        iteration: state.iteration,
        log_nsw,
        objective,
        exploitability: gains.clone(),
        multipliers: state.multipliers.clone(),
        failed,
    };

    if cfg.lr_primal > 0.0 {
        adam_step(&mut state.params, &mut state.adam, &total, cfg.lr_primal)?;
    }
    if let Mode::Epsilon(eps) = mode {
        for (lam, g) in state.multipliers.iter_mut().zip(&gains) {
            *lam = (*lam + cfg.lr_dual * (g - eps)).max(0.0);
        }
    }
    state.iteration += 1;
    state.history.push(row.clone());
    Ok(row)
}

/// Network sizes and initial parameters for a learned mechanism.
pub fn init_params<R: Rng + ?Sized>(
    kind: LearnedKind,
    dims: ProblemDims,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<MlpParams> {
    let sizes = MlpParams::architecture(dims.input_len(), cfg.width, cfg.hidden, kind.output_len(dims));
    let mut params = MlpParams::init(&sizes, rng)?;
    params.scale_layer(params.n_layers() - 1, cfg.init_output_scale);
    Ok(params)
}

/// Full training run: draws the pool, runs `outer_iters` steps and returns
/// the trained mechanism with the final state.
pub fn train<R: Rng + ?Sized>(
    kind: LearnedKind,
    dims: ProblemDims,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Mechanism, TrainState)> {
    cfg.validate()?;
    let data = cfg.data_spec(dims)?;
    let params = init_params(kind, dims, cfg, rng)?;
    train_from(kind, params, &data, cfg, rng)
}

/// [`train`] starting from given parameters.
pub fn train_from<R: Rng + ?Sized>(
    kind: LearnedKind,
    params: MlpParams,
    data: &DataSpec,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Mechanism, TrainState)> {
    cfg.validate()?;
    let mut state = TrainState::new(params, data.dims.n_agents);
    if let Some(dir) = &cfg.run_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    }
    let mut pool = if cfg.resample {
        Vec::new()
    } else {
        sample_batch(data, cfg.samples, rng)?
    };
    let start = Instant::now();
    for it in 0..cfg.outer_iters {
        let batch: Vec<usize> = if cfg.resample {
            pool = sample_batch(data, cfg.batch_size, rng)?;
            state.warm.clear();
            (0..pool.len()).collect()
        } else if cfg.batch_size == 0 || cfg.batch_size >= pool.len() {
            (0..pool.len()).collect()
        } else {
            let b = cfg.batch_size;
            (0..b).map(|k| (it * b + k) % pool.len()).collect()
        };
        let row = gda_step(&mut state, kind, &pool, &batch, cfg, rng)?;
        if cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0 {
            log::info!(
                "step {:>6}  logNSW {:.5}  gains {:?}  multipliers {:?}  {:.1}s",
                row.iteration,
                row.log_nsw,
                row.exploitability,
                row.multipliers,
                start.elapsed().as_secs_f64()
            );
            if let Some(dir) = &cfg.run_dir {
                kind.mechanism(state.params.clone(), &cfg.solver)
                    .checkpoint()?
                    .save(&dir.join("checkpoints").join(format!("step_{:06}.json", it + 1)))?;
                write_history(&dir.join("history.csv"), &state.history)?;
            }
        }
    }
    let mech = kind.mechanism(state.params.clone(), &cfg.solver);
    if let Some(dir) = &cfg.run_dir {
        mech.checkpoint()?.save(&dir.join("final.json"))?;
        write_history(&dir.join("history.csv"), &state.history)?;
    }
    Ok((mech, state))
}

/// Writes `iteration, log_nsw, objective, expl_i..., multiplier_i..., failed`.
pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = rows.first().map_or(0, |r| r.exploitability.len());
    let mut header = vec!["iteration".to_string(), "log_nsw".into(), "objective".into()];
    header.extend((0..n).map(|i| format!("exploitability_{i}")));
    header.extend((0..n).map(|i| format!("multiplier_{i}")));
    header.push("failed".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.iteration.to_string(), r.log_nsw.to_string(), r.objective.to_string()];
        rec.extend(r.exploitability.iter().map(|v| v.to_string()));
        rec.extend(r.multipliers.iter().map(|v| v.to_string()));
        rec.push(r.failed.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Held-out metrics of a mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mechanism: String,
    /// Mean of the per-sample Nash social welfare `prod_i u_i^{w_i}`.
    pub mean_nsw: f64,
    /// Mean logNSW with utilities floored at [`crate::metrics::TRAIN_UTILITY_FLOOR`].
    pub mean_log_nsw: f64,
    /// Per-agent mean exploitability estimate.
    pub exploitability: Vec<f64>,
    /// Mean over agents of `exploitability`.
    pub mean_exploitability: f64,
    pub mean_efficiency: f64,
    pub samples: usize,
    pub failed: usize,
    pub singular_events: usize,
    /// Wall time of the truthful allocations alone.
    pub allocate_seconds: f64,
    pub seconds: f64,
}

/// Metrics of `mech` on `samples`, with exploitability from `attack`.
/// Samples the mechanism can not allocate are skipped and counted.
pub fn evaluate<R: Rng + ?Sized>(
    mech: &Mechanism,
    samples: &[RequestProfile],
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<Evaluation> {
    let start = Instant::now();
    let n = samples.first().map_or(0, |p| p.n_agents());
    let mut ev = Evaluation {
        mechanism: mech.name().to_string(),
        mean_nsw: 0.0,
        mean_log_nsw: 0.0,
        exploitability: vec![0.0; n],
        mean_exploitability: 0.0,
        mean_efficiency: 0.0,
        samples: 0,
        failed: 0,
        singular_events: 0,
        allocate_seconds: 0.0,
        seconds: 0.0,
    };
    for (s, truth) in samples.iter().enumerate() {
        let t0 = Instant::now();
        let outcomes = mech.outcomes(truth);
        ev.allocate_seconds += t0.elapsed().as_secs_f64();
        // Welfare is averaged over a randomized mechanism's outcomes.
        let measured = outcomes.and_then(|outs| {
            let (mut nsw, mut log_nsw, mut eff) = (0.0, 0.0, 0.0);
            for (prob, a) in &outs {
                let u = utility(a, truth)?;
                nsw += prob * u.iter().zip(&truth.weights).map(|(u, w)| u.max(0.0).powf(*w)).product::<f64>();
                log_nsw += prob * floored_log_nsw(&u, &truth.weights).0;
                eff += prob * efficiency(a, truth)?;
            }
            let attacks = exploitability_vector(mech, truth, attack, rng)?;
            Ok((nsw, log_nsw, eff, attacks))
        });
        match measured {
            Ok((nsw, log_nsw, eff, attacks)) => {
                ev.mean_nsw += nsw;
                ev.mean_log_nsw += log_nsw;
                ev.mean_efficiency += eff;
                for (acc, r) in ev.exploitability.iter_mut().zip(&attacks) {
                    *acc += r.gain;
                    ev.singular_events += r.singular_events;
                }
                ev.samples += 1;
            }
            Err(e) => {
                log::warn!("{}: evaluation sample {s} skipped: {e}", mech.name());
                ev.failed += 1;
            }
        }
    }
    if !samples.is_empty() {
        check_failures(ev.failed, samples.len())?;
        let inv = 1.0 / ev.samples as f64;
        ev.mean_nsw *= inv;
        ev.mean_log_nsw *= inv;
        ev.mean_efficiency *= inv;
        ev.exploitability.iter_mut().for_each(|g| *g *= inv);
        ev.mean_exploitability = ev.exploitability.iter().sum::<f64>() / n as f64;
    }
    ev.seconds = start.elapsed().as_secs_f64();
    Ok(ev)
}

/// Mean logNSW and per-agent mean exploitability of a learned mechanism on
/// `samples`, measured with the training attack.
pub fn empirical_objective<R: Rng + ?Sized>(
    kind: LearnedKind,
    params: &MlpParams,
    samples: &[RequestProfile],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let mech = kind.mechanism(params.clone(), &cfg.solver);
    let ev = evaluate(&mech, samples, &cfg.attack, rng)?;
    Ok((ev.mean_log_nsw, ev.exploitability))
}
