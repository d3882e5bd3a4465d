//! Desk-scale experiments producing plot-ready tables.
//!
//! Each `run_*` function returns typed results; [`run`] dispatches on the
//! experiment kind, converts the results to [`Table`]s and records a
//! [`Manifest`] with wall times. [`write_outputs`] puts one CSV per table and
//! `manifest.json` into the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_batch, DataSpec};
use crate::error::{Error, Result};
use crate::exploit::AttackConfig;
use crate::mechanisms::Mechanism;
use crate::metrics::agent_utility;
use crate::mlp::Checkpoint;
use crate::pfsolve::SolverConfig;
use crate::profile::{AgentMatrix, ProblemDims, RequestProfile};
use crate::train::{evaluate, train, Evaluation, LearnedKind, TrainConfig};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    GamingCurve,
    #[default]
    Compare,
    Frontier,
    BudgetSweep,
    Mismatch,
    Heatmap,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::GamingCurve => "gaming-curve",
            ExperimentKind::Compare => "compare",
            ExperimentKind::Frontier => "frontier",
            ExperimentKind::BudgetSweep => "budget-sweep",
            ExperimentKind::Mismatch => "mismatch",
            ExperimentKind::Heatmap => "heatmap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismKind {
    Pf,
    Pa,
    Mixture,
    ExsNet,
    ExpfNet,
}

/// The report agent 2 keeps fixed in the heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedReport {
    pub values: Vec<f64>,
    pub demands: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub dims: ProblemDims,
    pub mechanisms: Vec<MechanismKind>,
    /// Evaluation (and training) distribution; `None` is the default spec for `dims`.
    pub data: Option<DataSpec>,
    /// Training settings for ExS-Net.
    pub train: TrainConfig,
    /// Training settings for ExPF-Net.
    pub expf_train: TrainConfig,
    pub eval_samples: usize,
    pub eval_attack: AttackConfig,
    pub solver: SolverConfig,
    pub mixture_rho: f64,
    /// Learned mechanism to load instead of training one.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    /// Reported `v_12 / v_11` ratios of the gaming curve.
    pub ratios: Vec<f64>,
    pub alphas: Vec<f64>,
    pub budgets: Vec<f64>,
    /// Shared `alpha = beta` values of the mismatch test sets.
    pub beta_params: Vec<f64>,
    pub heatmap_points: usize,
    pub heatmap_other: FixedReport,
}

/// `count` points from `lo` to `hi`, both included.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

pub fn logspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    linspace(lo.log10(), hi.log10(), count)
        .into_iter()
        .map(|e| 10f64.powf(e))
        .collect()
}

/// Training settings sized for a laptop: warm-started single-restart
/// training attacks and 3000 steps. ExPF-Net starts near plain PF.
pub fn desk_scale_train(kind: LearnedKind) -> TrainConfig {
    let base = TrainConfig {
        outer_iters: 3000,
        attack: AttackConfig {
            restarts: 1,
            steps: 10,
            ..AttackConfig::default()
        },
        ..TrainConfig::default()
    };
    match kind {
        LearnedKind::ExsNet => base,
        LearnedKind::ExpfNet => TrainConfig {
            outer_iters: 1000,
            batch_size: 32,
            init_output_scale: 0.1,
            ..base
        },
    }
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Compare,
            dims: ProblemDims {
                n_agents: 2,
                n_resources: 2,
            },
            mechanisms: vec![
                MechanismKind::Pf,
                MechanismKind::Pa,
                MechanismKind::Mixture,
                MechanismKind::ExsNet,
            ],
            data: None,
            train: desk_scale_train(LearnedKind::ExsNet),
            expf_train: desk_scale_train(LearnedKind::ExpfNet),
            eval_samples: 200,
            eval_attack: AttackConfig::default(),
            solver: SolverConfig::default(),
            mixture_rho: 0.5,
            checkpoint: None,
            out_dir: None,
            seed: 0,
            ratios: linspace(0.1, 3.0, 291),
            alphas: logspace(1.0, 1e5, 8),
            budgets: linspace(0.25, 1.5, 6),
            beta_params: linspace(0.5, 5.0, 10),
            heatmap_points: 21,
            heatmap_other: FixedReport {
                values: vec![0.5, 0.5],
                demands: vec![1.0, 1.0],
            },
        }
    }
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind) -> Self {
        let mut spec = Self {
            kind,
            ..Self::default()
        };
        match kind {
            ExperimentKind::GamingCurve => {
                spec.mechanisms = vec![MechanismKind::Pf];
            }
            ExperimentKind::Heatmap => {
                spec.mechanisms = vec![MechanismKind::Pf];
                // Ridge 0.5 makes ExPF-Net's allocation 1-Lipschitz in z.
                spec.expf_train.solver.ridge = 0.5;
            }
            ExperimentKind::Frontier => {
                spec.mechanisms = vec![MechanismKind::Pf, MechanismKind::Pa, MechanismKind::ExsNet];
                spec.train.epsilon = None;
                spec.train.alpha = Some(1.0);
                spec.train.outer_iters = 2000;
                spec.eval_samples = 100;
            }
            ExperimentKind::BudgetSweep => {
                spec.mechanisms = vec![MechanismKind::Pf, MechanismKind::Pa, MechanismKind::ExsNet];
            }
            ExperimentKind::Mismatch => {
                spec.mechanisms = vec![MechanismKind::ExsNet];
                spec.train.outer_iters = 5000;
            }
            ExperimentKind::Compare => {}
        }
        spec
    }

    /// `ExperimentSpec::new(kind)` with the fields present in `overrides`
    /// replaced. Nested objects merge field by field, so
    /// `{"train": {"outer_iters": 10}}` keeps the other training settings.
    pub fn with_overrides(kind: ExperimentKind, overrides: &serde_json::Value) -> Result<Self> {
        fn merge(base: &mut serde_json::Value, over: &serde_json::Value) {
            match (base, over) {
                (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
                    for (k, v) in o {
                        match b.get_mut(k) {
                            Some(slot) => merge(slot, v),
                            None => {
                                b.insert(k.clone(), v.clone());
                            }
                        }
                    }
                }
                (slot, v) => *slot = v.clone(),
            }
        }
        let mut base = serde_json::to_value(Self::new(kind))?;
        merge(&mut base, overrides);
        base["kind"] = serde_json::to_value(kind)?;
        Ok(serde_json::from_value(base)?)
    }

    fn data_spec(&self) -> DataSpec {
        self.data.clone().unwrap_or_else(|| DataSpec::new(self.dims))
    }

    fn wants(&self, m: MechanismKind) -> bool {
        self.mechanisms.contains(&m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("{}: {msg}", self.kind.name())));
        ProblemDims::new(self.dims.n_agents, self.dims.n_resources)?;
        self.eval_attack.validate()?;
        self.solver.validate()?;
        if let Some(d) = &self.data {
            d.validate()?;
            if d.dims != self.dims {
                return bad("data spec dimensions differ from dims");
            }
        }
        let two_by_two = self.dims.n_agents == 2 && self.dims.n_resources == 2;
        let evaluates = !matches!(self.kind, ExperimentKind::GamingCurve | ExperimentKind::Heatmap);
        if evaluates && self.eval_samples == 0 {
            return bad("eval_samples must be positive");
        }
        if !(0.0..=1.0).contains(&self.mixture_rho) {
            return bad("mixture_rho must lie in [0, 1]");
        }
        match self.kind {
            ExperimentKind::GamingCurve => {
                if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                    return bad("ratios must be positive");
                }
                if self.wants(MechanismKind::ExpfNet) && self.checkpoint.is_none() {
                    return bad("ExPF-Net column requested without a checkpoint");
                }
            }
            ExperimentKind::Frontier => {
                if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                    return bad("alphas must be positive");
                }
            }
            ExperimentKind::BudgetSweep => {
                if !two_by_two {
                    return bad("the budget sweep runs on 2x2 systems");
                }
                if self.budgets.is_empty() || self.budgets.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
                    return bad("budgets must be positive");
                }
            }
            ExperimentKind::Mismatch => {
                if self.beta_params.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
                    return bad("beta parameters must be positive");
                }
            }
            ExperimentKind::Heatmap => {
                if !two_by_two {
                    return bad("the heatmap runs on 2x2 systems");
                }
                if self.heatmap_points < 2 {
                    return bad("heatmap needs at least two points per axis");
                }
                let o = &self.heatmap_other;
                if o.values.len() != 2 || o.demands.len() != 2 {
                    return bad("agent-2 report must have two values and two demands");
                }
            }
            ExperimentKind::Compare => {
                if self.mechanisms.is_empty() {
                    return bad("no mechanisms requested");
                }
            }
        }
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir)?;
            let probe = dir.join(".write-test");
            std::fs::write(&probe, b"")?;
            std::fs::remove_file(probe)?;
        }
        Ok(())
    }
}

/// Independent rng per purpose, all derived from the experiment seed.
pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

const TRAIN_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const ATTACK_STREAM: u64 = 3;

/// Loads the checkpoint when it holds `kind`, otherwise trains on `data`.
/// Returns the mechanism and the training wall time (0 when loaded).
pub fn learned_mechanism(
    spec: &ExperimentSpec,
    kind: LearnedKind,
    data: &DataSpec,
    cfg: &TrainConfig,
    stream_id: u64,
) -> Result<(Mechanism, f64)> {
    if let Some(path) = &spec.checkpoint {
        let ck = Checkpoint::load(path)?;
        let mech = Mechanism::from_checkpoint(&ck, spec.solver)?;
        if LearnedKind::of(&mech) == Some(kind) {
            return Ok((mech, 0.0));
        }
    }
    let mut cfg = cfg.clone();
    cfg.data = Some(data.clone());
    let mut rng = stream(spec.seed ^ cfg.seed, TRAIN_STREAM + (stream_id << 8));
    let t = Instant::now();
    let (mech, _) = train(kind, data.dims, &cfg, &mut rng)?;
    Ok((mech, t.elapsed().as_secs_f64()))
}

/// A CSV-ready table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push<I: IntoIterator<Item = String>>(&mut self, row: I) {
        self.rows.push(row.into_iter().collect());
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn num(x: f64) -> String {
    x.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub git_describe: String,
    pub spec: ExperimentSpec,
    /// Wall seconds per phase, keyed by phase name.
    pub wall_seconds: BTreeMap<String, f64>,
    pub files: Vec<String>,
}

/// `git describe --always --dirty` of the working directory, or `"unknown"`.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamingRow {
    pub ratio: f64,
    pub u1_pf: f64,
    pub u1_expf: Option<f64>,
    pub u1_truthful: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamingCurve {
    pub rows: Vec<GamingRow>,
}

impl GamingCurve {
    /// `(ratio, relative gain)` at the largest PF utility on the curve.
    pub fn peak(&self) -> (f64, f64) {
        let best = self
            .rows
            .iter()
            .max_by(|a, b| a.u1_pf.total_cmp(&b.u1_pf))
            .expect("curve is not empty");
        (best.ratio, best.u1_pf / best.u1_truthful - 1.0)
    }

    /// Number of strict local maxima of the PF column, plateaus counted once.
    pub fn local_maxima(&self) -> usize {
        let u: Vec<f64> = self.rows.iter().map(|r| r.u1_pf).collect();
        let tol = 1e-9;
        let mut count = 0;
        let mut k = 0;
        while k < u.len() {
            let mut end = k;
            while end + 1 < u.len() && (u[end + 1] - u[k]).abs() <= tol {
                end += 1;
            }
            let left_lower = k == 0 || u[k - 1] < u[k] - tol;
            let right_lower = end + 1 == u.len() || u[end + 1] < u[k] - tol;
            if left_lower && right_lower && k > 0 && end + 1 < u.len() {
                count += 1;
            }
            k = end + 1;
        }
        count
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new("gaming_curve", &["ratio", "u1_pf", "u1_expf_net", "u1_truthful"]);
        for r in &self.rows {
            t.push([num(r.ratio), num(r.u1_pf), opt(r.u1_expf), num(r.u1_truthful)]);
        }
        t
    }
}

/// Agent 1's report for a given `v_12 / v_11`, scaled into `(0, 1]`.
fn ratio_report(ratio: f64) -> Vec<f64> {
    if ratio <= 1.0 {
        vec![1.0, ratio]
    } else {
        vec![1.0 / ratio, 1.0]
    }
}

pub fn run_gaming_curve(spec: &ExperimentSpec) -> Result<GamingCurve> {
    let truth = RequestProfile::gaming_example();
    let pf = Mechanism::Pf(spec.solver);
    let expf = match (&spec.checkpoint, spec.wants(MechanismKind::ExpfNet)) {
        (Some(path), true) => {
            let m = Mechanism::from_checkpoint(&Checkpoint::load(path)?, spec.solver)?;
            if LearnedKind::of(&m) != Some(LearnedKind::ExpfNet) {
                return Err(Error::InvalidConfig("gaming curve checkpoint is not an ExPF-Net".into()));
            }
            Some(m)
        }
        (None, true) => {
            return Err(Error::InvalidConfig("ExPF-Net column requested without a checkpoint".into()))
        }
        _ => None,
    };
    let x = truth.demands.row(0).to_vec();
    let truthful = pf.agent_value(&truth, 0, truth.values.row(0), &x)?;
    let mut rows = Vec::with_capacity(spec.ratios.len());
    for &ratio in &spec.ratios {
        let v = ratio_report(ratio);
        let u1_expf = match &expf {
            Some(m) => Some(m.agent_value(&truth, 0, &v, &x)?),
            None => None,
        };
        rows.push(GamingRow {
            ratio,
            u1_pf: pf.agent_value(&truth, 0, &v, &x)?,
            u1_expf,
            u1_truthful: truthful,
        });
    }
    Ok(GamingCurve { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<Evaluation>,
    pub train_seconds: BTreeMap<String, f64>,
}

impl Comparison {
    pub fn row(&self, name: &str) -> Option<&Evaluation> {
        self.rows.iter().find(|r| r.mechanism == name)
    }

    pub fn table(&self) -> Table {
        evaluation_table("compare", &self.rows, |_| Vec::new(), &[])
    }
}

fn evaluation_table<F: Fn(usize) -> Vec<String>>(
    name: &str,
    rows: &[Evaluation],
    prefix: F,
    prefix_cols: &[&str],
) -> Table {
    let mut header: Vec<&str> = prefix_cols.to_vec();
    header.extend([
        "mechanism",
        "mean_nsw",
        "mean_log_nsw",
        "mean_exploitability",
        "mean_efficiency",
        "samples",
        "failed",
        "allocate_seconds",
    ]);
    let mut t = Table::new(name, &header);
    for (k, r) in rows.iter().enumerate() {
        let mut row = prefix(k);
        row.extend([
            r.mechanism.clone(),
            num(r.mean_nsw),
            num(r.mean_log_nsw),
            num(r.mean_exploitability),
            num(r.mean_efficiency),
            r.samples.to_string(),
            r.failed.to_string(),
            num(r.allocate_seconds),
        ]);
        t.push(row);
    }
    t
}

fn eval_batch(spec: &ExperimentSpec, data: &DataSpec, purpose: u64) -> Result<Vec<RequestProfile>> {
    let mut rng = stream(spec.seed, DATA_STREAM + (purpose << 8));
    sample_batch(data, spec.eval_samples, &mut rng)
}

fn eval_on(spec: &ExperimentSpec, mech: &Mechanism, batch: &[RequestProfile], purpose: u64) -> Result<Evaluation> {
    let mut rng = stream(spec.seed, ATTACK_STREAM + (purpose << 8));
    evaluate(mech, batch, &spec.eval_attack, &mut rng)
}

pub fn run_compare(spec: &ExperimentSpec) -> Result<Comparison> {
    let data = spec.data_spec();
    let batch = eval_batch(spec, &data, 0)?;
    let mut rows = Vec::new();
    let mut train_seconds = BTreeMap::new();
    for (k, m) in spec.mechanisms.iter().enumerate() {
        let mech = match m {
            MechanismKind::Pf => Mechanism::Pf(spec.solver),
            MechanismKind::Pa => Mechanism::Pa(spec.solver),
            MechanismKind::Mixture => Mechanism::mixture(spec.mixture_rho, spec.solver)?,
            MechanismKind::ExsNet | MechanismKind::ExpfNet => {
                let kind = if *m == MechanismKind::ExsNet {
                    LearnedKind::ExsNet
                } else {
                    LearnedKind::ExpfNet
                };
                let cfg = if kind == LearnedKind::ExsNet { &spec.train } else { &spec.expf_train };
                let (mech, secs) = learned_mechanism(spec, kind, &data, cfg, k as u64)?;
                train_seconds.insert(mech.name().to_string(), secs);
                mech
            }
        };
        rows.push(eval_on(spec, &mech, &batch, 0)?);
    }
    Ok(Comparison { rows, train_seconds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub alpha: f64,
    pub nsw: f64,
    pub exploitability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub points: Vec<FrontierPoint>,
    pub pf: Evaluation,
    pub pa: Evaluation,
    /// `(rho, nsw, exploitability)` of the PF/PA interpolation.
    pub mixture_line: Vec<(f64, f64, f64)>,
}

impl Frontier {
    /// Adjacent pairs (in increasing alpha) whose exploitability goes up.
    pub fn inversions(&self) -> usize {
        self.points
            .windows(2)
            .filter(|w| w[1].exploitability > w[0].exploitability)
            .count()
    }

    /// Best NSW the PF/PA interpolation reaches at exploitability at most
    /// `e`; `None` when no interpolation point is that unexploitable.
    pub fn mixture_nsw_at(&self, e: f64) -> Option<f64> {
        let (n_pf, e_pf) = (self.pf.mean_nsw, self.pf.mean_exploitability);
        let (n_pa, e_pa) = (self.pa.mean_nsw, self.pa.mean_exploitability);
        let at = |rho: f64| (rho * n_pf + (1.0 - rho) * n_pa, rho * e_pf + (1.0 - rho) * e_pa);
        // NSW and exploitability are both affine in rho, so the best feasible
        // rho is an endpoint of the feasible interval.
        let mut best: Option<f64> = None;
        let mut consider = |rho: f64| {
            let (n, ex) = at(rho.clamp(0.0, 1.0));
            if ex <= e + 1e-15 {
                best = Some(best.map_or(n, |b: f64| b.max(n)));
            }
        };
        consider(0.0);
        consider(1.0);
        if (e_pf - e_pa).abs() > 0.0 {
            consider((e - e_pa) / (e_pf - e_pa));
        }
        best
    }

    /// Points whose NSW is at least the mixture's at the same exploitability, within `tol`.
    pub fn dominating_points(&self, tol: f64) -> usize {
        self.points
            .iter()
            .filter(|p| self.mixture_nsw_at(p.exploitability).is_none_or(|m| m <= p.nsw + tol))
            .count()
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new("frontier", &["series", "alpha", "rho", "mean_nsw", "mean_exploitability"]);
        for p in &self.points {
            t.push(["exs-net".into(), num(p.alpha), String::new(), num(p.nsw), num(p.exploitability)]);
        }
        for (name, e) in [("pf", &self.pf), ("pa", &self.pa)] {
            t.push([
                name.into(),
                String::new(),
                String::new(),
                num(e.mean_nsw),
                num(e.mean_exploitability),
            ]);
        }
        for (rho, n, e) in &self.mixture_line {
            t.push(["mixture".into(), String::new(), num(*rho), num(*n), num(*e)]);
        }
        t
    }
}

pub fn run_frontier(spec: &ExperimentSpec) -> Result<Frontier> {
    let data = spec.data_spec();
    let batch = eval_batch(spec, &data, 0)?;
    let pf = eval_on(spec, &Mechanism::Pf(spec.solver), &batch, 0)?;
    let pa = eval_on(spec, &Mechanism::Pa(spec.solver), &batch, 0)?;
    let mut points = Vec::new();
    for &alpha in &spec.alphas {
        let cfg = TrainConfig {
            epsilon: None,
            alpha: Some(alpha),
            ..spec.train.clone()
        };
        let (mech, secs) = learned_mechanism(
            &ExperimentSpec {
                checkpoint: None,
                ..spec.clone()
            },
            LearnedKind::ExsNet,
            &data,
            &cfg,
            // One stream for every alpha: same init, pool and minibatches,
            // so points differ only through alpha.
            0,
        )?;
        let ev = eval_on(spec, &mech, &batch, 0)?;
        log::info!(
            "alpha {alpha:.3e}: NSW {:.5} exploitability {:.5} ({secs:.0}s training)",
            ev.mean_nsw,
            ev.mean_exploitability
        );
        points.push(FrontierPoint {
            alpha,
            nsw: ev.mean_nsw,
            exploitability: ev.mean_exploitability,
        });
    }
    let mixture_line = linspace(0.0, 1.0, 11)
        .into_iter()
        .map(|rho| {
            (
                rho,
                rho * pf.mean_nsw + (1.0 - rho) * pa.mean_nsw,
                rho * pf.mean_exploitability + (1.0 - rho) * pa.mean_exploitability,
            )
        })
        .collect();
    Ok(Frontier {
        points,
        pf,
        pa,
        mixture_line,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub budget: f64,
    pub eval: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSweep {
    pub rows: Vec<BudgetRow>,
}

impl BudgetSweep {
    pub fn series(&self, mechanism: &str) -> Vec<&BudgetRow> {
        self.rows.iter().filter(|r| r.eval.mechanism == mechanism).collect()
    }

    pub fn table(&self) -> Table {
        let evals: Vec<Evaluation> = self.rows.iter().map(|r| r.eval.clone()).collect();
        evaluation_table("budget_sweep", &evals, |k| vec![num(self.rows[k].budget)], &["budget"])
    }
}

pub fn run_budget_sweep(spec: &ExperimentSpec) -> Result<BudgetSweep> {
    let mut rows = Vec::new();
    for (k, &budget) in spec.budgets.iter().enumerate() {
        let data = spec.data_spec().with_budget(budget);
        // The budget does not enter sampling, so purpose 0 gives every budget
        // the same values and demands.
        let batch = eval_batch(spec, &data, 0)?;
        for m in &spec.mechanisms {
            let mech = match m {
                MechanismKind::Pf => Mechanism::Pf(spec.solver),
                MechanismKind::Pa => Mechanism::Pa(spec.solver),
                MechanismKind::Mixture => Mechanism::mixture(spec.mixture_rho, spec.solver)?,
                MechanismKind::ExsNet => {
                    let s = ExperimentSpec {
                        checkpoint: None,
                        ..spec.clone()
                    };
                    learned_mechanism(&s, LearnedKind::ExsNet, &data, &spec.train, k as u64)?.0
                }
                MechanismKind::ExpfNet => {
                    let s = ExperimentSpec {
                        checkpoint: None,
                        ..spec.clone()
                    };
                    learned_mechanism(&s, LearnedKind::ExpfNet, &data, &spec.expf_train, k as u64)?.0
                }
            };
            rows.push(BudgetRow {
                budget,
                eval: eval_on(spec, &mech, &batch, 0)?,
            });
        }
    }
    Ok(BudgetSweep { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    /// `None` for the in-distribution (uniform) test set.
    pub beta_param: Option<f64>,
    pub eval: Evaluation,
    /// Every allocation of the truthful test batch was feasible.
    pub all_feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub rows: Vec<MismatchRow>,
}

impl Mismatch {
    pub fn in_distribution(&self) -> Option<&MismatchRow> {
        self.rows.iter().find(|r| r.beta_param.is_none())
    }

    /// Largest exploitability change between adjacent beta grid points.
    pub fn max_adjacent_jump(&self) -> f64 {
        let shifted: Vec<&MismatchRow> = self.rows.iter().filter(|r| r.beta_param.is_some()).collect();
        shifted
            .windows(2)
            .map(|w| (w[1].eval.mean_exploitability - w[0].eval.mean_exploitability).abs())
            .fold(0.0, f64::max)
    }

    pub fn table(&self) -> Table {
        let evals: Vec<Evaluation> = self.rows.iter().map(|r| r.eval.clone()).collect();
        evaluation_table(
            "mismatch",
            &evals,
            |k| {
                vec![
                    self.rows[k].beta_param.map(num).unwrap_or_else(|| "uniform".into()),
                    self.rows[k].all_feasible.to_string(),
                ]
            },
            &["alpha_beta", "all_feasible"],
        )
    }
}

pub fn run_mismatch(spec: &ExperimentSpec) -> Result<Mismatch> {
    let uniform = spec.data_spec();
    let mut mechs = Vec::new();
    for m in &spec.mechanisms {
        mechs.push(match m {
            MechanismKind::Pf => Mechanism::Pf(spec.solver),
            MechanismKind::Pa => Mechanism::Pa(spec.solver),
            MechanismKind::Mixture => Mechanism::mixture(spec.mixture_rho, spec.solver)?,
            MechanismKind::ExsNet => learned_mechanism(spec, LearnedKind::ExsNet, &uniform, &spec.train, 0)?.0,
            MechanismKind::ExpfNet => learned_mechanism(spec, LearnedKind::ExpfNet, &uniform, &spec.expf_train, 0)?.0,
        });
    }
    let mut sets: Vec<(Option<f64>, DataSpec)> = vec![(None, uniform.clone())];
    for &ab in &spec.beta_params {
        let mut d = DataSpec::scaled_beta(spec.dims, ab, ab);
        d.budget_mode = uniform.budget_mode.clone();
        d.weights = uniform.weights.clone();
        sets.push((Some(ab), d));
    }
    let mut rows = Vec::new();
    for (k, (param, data)) in sets.iter().enumerate() {
        let batch = eval_batch(spec, data, k as u64)?;
        for mech in &mechs {
            let mut all_feasible = true;
            for p in &batch {
                let a = mech.expected_allocation(p)?;
                all_feasible &= a.is_feasible(p, 1e-6);
            }
            rows.push(MismatchRow {
                beta_param: *param,
                eval: eval_on(spec, mech, &batch, k as u64)?,
                all_feasible,
            });
        }
    }
    Ok(Mismatch { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Grid of `v_11` (rows) and `v_12` (columns).
    pub axis: Vec<f64>,
    pub pf_a11: Vec<Vec<f64>>,
    pub pf_a12: Vec<Vec<f64>>,
    pub expf_a11: Option<Vec<Vec<f64>>>,
    pub expf_a12: Option<Vec<Vec<f64>>>,
}

/// Largest absolute difference between horizontally or vertically adjacent cells.
pub fn max_adjacent_jump(grid: &[Vec<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (r, row) in grid.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if c + 1 < row.len() {
                best = best.max((row[c + 1] - v).abs());
            }
            if r + 1 < grid.len() {
                best = best.max((grid[r + 1][c] - v).abs());
            }
        }
    }
    best
}

impl Heatmap {
    pub fn pf_jump(&self) -> f64 {
        max_adjacent_jump(&self.pf_a11).max(max_adjacent_jump(&self.pf_a12))
    }

    pub fn expf_jump(&self) -> Option<f64> {
        match (&self.expf_a11, &self.expf_a12) {
            (Some(a), Some(b)) => Some(max_adjacent_jump(a).max(max_adjacent_jump(b))),
            _ => None,
        }
    }

    fn grid_table(&self, name: &str, grid: &[Vec<f64>]) -> Table {
        let mut header = vec!["v11".to_string()];
        header.extend(self.axis.iter().map(|v| format!("v12={v}")));
        let mut t = Table {
            name: name.into(),
            header,
            rows: Vec::new(),
        };
        for (v, row) in self.axis.iter().zip(grid) {
            let mut cells = vec![num(*v)];
            cells.extend(row.iter().map(|x| num(*x)));
            t.push(cells);
        }
        t
    }

    pub fn tables(&self) -> Vec<Table> {
        let mut out = vec![
            self.grid_table("heatmap_pf_a11", &self.pf_a11),
            self.grid_table("heatmap_pf_a12", &self.pf_a12),
        ];
        if let (Some(a), Some(b)) = (&self.expf_a11, &self.expf_a12) {
            out.push(self.grid_table("heatmap_expf_a11", a));
            out.push(self.grid_table("heatmap_expf_a12", b));
        }
        out
    }
}

fn heatmap_profile(spec: &ExperimentSpec, v11: f64, v12: f64) -> Result<RequestProfile> {
    let o = &spec.heatmap_other;
    RequestProfile::new(
        AgentMatrix::from_rows(&[vec![v11, v12], o.values.clone()])?,
        AgentMatrix::from_rows(&[vec![1.0, 1.0], o.demands.clone()])?,
        vec![1.0, 1.0],
        vec![1.0, 1.0],
    )
}

fn allocation_grid(spec: &ExperimentSpec, mech: &Mechanism, axis: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut g11 = Vec::with_capacity(axis.len());
    let mut g12 = Vec::with_capacity(axis.len());
    for &v11 in axis {
        let mut r11 = Vec::with_capacity(axis.len());
        let mut r12 = Vec::with_capacity(axis.len());
        for &v12 in axis {
            let p = heatmap_profile(spec, v11, v12)?;
            let a = mech.expected_allocation(&p)?;
            a.check_feasible(&p, 1e-6)?;
            r11.push(a.get(0, 0));
            r12.push(a.get(0, 1));
        }
        g11.push(r11);
        g12.push(r12);
    }
    Ok((g11, g12))
}

pub fn run_heatmap(spec: &ExperimentSpec) -> Result<Heatmap> {
    let axis = linspace(0.1, 1.0, spec.heatmap_points);
    let (pf_a11, pf_a12) = allocation_grid(spec, &Mechanism::Pf(spec.solver), &axis)?;
    let (expf_a11, expf_a12) = if spec.wants(MechanismKind::ExpfNet) {
        let (mech, _) = learned_mechanism(spec, LearnedKind::ExpfNet, &spec.data_spec(), &spec.expf_train, 0)?;
        let (a, b) = allocation_grid(spec, &mech, &axis)?;
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    Ok(Heatmap {
        axis,
        pf_a11,
        pf_a12,
        expf_a11,
        expf_a12,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub tables: Vec<Table>,
    pub manifest: Manifest,
}

/// Runs the experiment named by `spec.kind`.
pub fn run(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let mut wall = BTreeMap::new();
    let t = Instant::now();
    let tables = match spec.kind {
        ExperimentKind::GamingCurve => {
            let c = run_gaming_curve(spec)?;
            let (ratio, gain) = c.peak();
            log::info!("PF gaming peak at ratio {ratio:.3}: relative gain {:.2}%", 100.0 * gain);
            vec![c.table()]
        }
        ExperimentKind::Compare => {
            let c = run_compare(spec)?;
            for r in &c.rows {
                wall.insert(format!("evaluate/{}", r.mechanism), r.seconds);
                wall.insert(format!("allocate/{}", r.mechanism), r.allocate_seconds);
            }
            for (name, s) in &c.train_seconds {
                wall.insert(format!("train/{name}"), *s);
            }
            vec![c.table()]
        }
        ExperimentKind::Frontier => vec![run_frontier(spec)?.table()],
        ExperimentKind::BudgetSweep => vec![run_budget_sweep(spec)?.table()],
        ExperimentKind::Mismatch => vec![run_mismatch(spec)?.table()],
        ExperimentKind::Heatmap => run_heatmap(spec)?.tables(),
    };
    wall.insert("total".into(), t.elapsed().as_secs_f64());
    let files = tables.iter().map(|t| format!("{}.csv", t.name)).collect();
    Ok(ExperimentOutput {
        tables,
        manifest: Manifest {
            version: MANIFEST_VERSION,
            kind: spec.kind,
            seed: spec.seed,
            git_describe: git_describe(),
            spec: spec.clone(),
            wall_seconds: wall,
            files,
        },
    })
}

pub fn write_outputs(dir: &Path, out: &ExperimentOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in &out.tables {
        t.write_csv(&dir.join(format!("{}.csv", t.name)))?;
    }
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&out.manifest)?)?;
    Ok(())
}

/// Agent 1's true utility in the gaming example under PF when it reports `ratio`.
pub fn gaming_utility(ratio: f64, cfg: &SolverConfig) -> Result<f64> {
    let truth = RequestProfile::gaming_example();
    let reported = truth.with_report(0, &ratio_report(ratio), truth.demands.row(0));
    let a = crate::pfsolve::solve_pf(&reported, cfg)?.a_star;
    Ok(agent_utility(a.matrix().row(0), truth.values.row(0), truth.demands.row(0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spaced_grids() {
        assert_eq!(linspace(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
        let a = logspace(1.0, 1e5, 8);
        assert_eq!(a.len(), 8);
        assert!((a[0] - 1.0).abs() < 1e-12 && (a[7] - 1e5).abs() < 1e-6);
        let r = linspace(0.1, 3.0, 291);
        assert!((r[40] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adjacent_jump() {
        let g = vec![vec![0.0, 0.1], vec![0.5, 0.1]];
        assert!((max_adjacent_jump(&g) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaming_curve_requires_checkpoint_for_expf() {
        let mut s = ExperimentSpec::new(ExperimentKind::GamingCurve);
        s.mechanisms.push(MechanismKind::ExpfNet);
        assert!(s.validate().is_err());
    }

    #[test]
    fn overrides_merge_into_the_kind_defaults() {
        let over = serde_json::json!({"kind": "compare", "eval_samples": 7, "expf_train": {"outer_iters": 3}});
        let s = ExperimentSpec::with_overrides(ExperimentKind::Heatmap, &over).unwrap();
        assert_eq!(s.kind, ExperimentKind::Heatmap);
        assert_eq!(s.eval_samples, 7);
        assert_eq!(s.expf_train.outer_iters, 3);
        assert_eq!(s.expf_train.solver.ridge, 0.5);
        assert_eq!(s.expf_train.batch_size, 32);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let s = ExperimentSpec::new(ExperimentKind::Frontier);
        let text = serde_json::to_string(&s).unwrap();
        let back: ExperimentSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let partial: ExperimentSpec = serde_json::from_str(r#"{"kind":"heatmap","seed":3}"#).unwrap();
        assert_eq!(partial.kind, ExperimentKind::Heatmap);
        assert_eq!(partial.seed, 3);
    }

    #[test]
    fn mixture_line_lookup() {
        let ev = |nsw: f64, e: f64| Evaluation {
            mechanism: String::new(),
            mean_nsw: nsw,
            mean_log_nsw: 0.0,
            exploitability: vec![e],
            mean_exploitability: e,
            mean_efficiency: 0.0,
            samples: 1,
            failed: 0,
            singular_events: 0,
            allocate_seconds: 0.0,
            seconds: 0.0,
        };
        let f = Frontier {
            points: vec![],
            pf: ev(1.0, 0.01),
            pa: ev(0.5, 0.0),
            mixture_line: vec![],
        };
        assert!((f.mixture_nsw_at(0.005).unwrap() - 0.75).abs() < 1e-12);
        assert!((f.mixture_nsw_at(1.0).unwrap() - 1.0).abs() < 1e-12);
        let g = Frontier {
            pa: ev(0.5, 0.002),
            ..f
        };
        assert!(g.mixture_nsw_at(0.001).is_none());
    }
}
