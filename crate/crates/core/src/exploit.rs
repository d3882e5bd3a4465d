//! Exploitability estimation: how much one agent gains by misreporting its
//! values and demands while everyone else reports truthfully.
//!
//! Both estimators return the best report they evaluated, so they are lower
//! bounds on the true exploitability. The truthful report is always among the
//! evaluated points, which makes every reported gain nonnegative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::Mechanism;
use crate::profile::{Bounds, RequestProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    Gradient,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Gradient restarts; the first starts at the truthful report.
    pub restarts: usize,
    pub steps: usize,
    /// Step at iteration `t` (1-based) is `step_size / sqrt(t)`.
    pub step_size: f64,
    /// Points per coordinate in grid mode.
    pub grid_points: usize,
    /// Upper limit on coordinate sweeps before the grid search stops.
    pub grid_sweeps: usize,
    /// Number of zoom refinements around the grid optimum.
    pub grid_refinements: usize,
    /// Evaluation budget of the coarse full-product grid that seeds a second
    /// sweep next to the truthful one; 0 or 1 disables it.
    pub grid_coarse_budget: usize,
    pub bounds: Bounds,
    pub mode: AttackMode,
    /// When false the attacker keeps its true demands and only misreports values.
    pub misreport_demands: bool,
    /// Divide each ascent direction by its max-norm, so `step_size / sqrt(t)`
    /// is the largest coordinate move of step `t`.
    pub normalize: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            restarts: 32,
            steps: 150,
            step_size: 0.2,
            grid_points: 25,
            grid_sweeps: 10,
            grid_refinements: 2,
            grid_coarse_budget: 4096,
            bounds: Bounds::default(),
            mode: AttackMode::Gradient,
            misreport_demands: true,
            normalize: true,
        }
    }
}

impl AttackConfig {
    pub fn grid() -> Self {
        Self {
            mode: AttackMode::Grid,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("at least one restart is required".into()));
        }
        if self.grid_points < 2 {
            return Err(Error::InvalidConfig("grid needs at least two points".into()));
        }
        if !(self.step_size >= 0.0) {
            return Err(Error::InvalidConfig("step size must be nonnegative".into()));
        }
        self.bounds.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub agent: usize,
    pub best_v: Vec<f64>,
    pub best_x: Vec<f64>,
    pub truthful_utility: f64,
    pub attacked_utility: f64,
    /// `attacked_utility - truthful_utility`, the exploitability estimate.
    pub gain: f64,
    /// Mechanism evaluations at misreports.
    pub evaluations: usize,
    /// Evaluations where a least-norm subgradient was used.
    pub singular_events: usize,
    /// Misreports the mechanism could not evaluate; they end their trajectory.
    pub failed_evaluations: usize,
}

impl AttackResult {
    fn truthful(agent: usize, truth: &RequestProfile, utility: f64) -> Self {
        Self {
            agent,
            best_v: truth.values.row(agent).to_vec(),
            best_x: truth.demands.row(agent).to_vec(),
            truthful_utility: utility,
            attacked_utility: utility,
            gain: 0.0,
            evaluations: 0,
            singular_events: 0,
            failed_evaluations: 0,
        }
    }

    fn offer(&mut self, v: &[f64], x: &[f64], utility: f64) -> bool {
        if utility > self.attacked_utility {
            self.attacked_utility = utility;
            self.gain = utility - self.truthful_utility;
            self.best_v = v.to_vec();
            self.best_x = x.to_vec();
            true
        } else {
            false
        }
    }
}

fn project(cfg: &AttackConfig, v: &mut [f64], x: &mut [f64]) {
    v.iter_mut().for_each(|e| *e = cfg.bounds.clamp_value(*e));
    x.iter_mut().for_each(|e| *e = cfg.bounds.clamp_demand(*e));
}

/// Projected gradient ascent on the agent's true utility over its report.
pub fn best_misreport<R: Rng + ?Sized>(
    mech: &Mechanism,
    truth: &RequestProfile,
    agent: usize,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult> {
    best_misreport_from(mech, truth, agent, cfg, None, rng)
}

/// [`best_misreport`] whose first restart begins at `start` instead of the
/// truthful report. The truthful utility is still the baseline of the gain.
pub fn best_misreport_from<R: Rng + ?Sized>(
    mech: &Mechanism,
    truth: &RequestProfile,
    agent: usize,
    cfg: &AttackConfig,
    start: Option<(&[f64], &[f64])>,
    rng: &mut R,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_agent(truth, agent)?;
    let tv = truth.values.row(agent).to_vec();
    let tx = truth.demands.row(agent).to_vec();
    let base = mech.agent_value(truth, agent, &tv, &tx)?;
    let mut result = AttackResult::truthful(agent, truth, base);
    if truth.max_utility(agent) == 0.0 {
        return Ok(result);
    }
    let m = truth.n_resources();
    for restart in 0..cfg.restarts {
        let (mut v, mut x) = if restart == 0 {
            match start {
                Some((sv, sx)) if sv.len() == m && sx.len() == m => (sv.to_vec(), sx.to_vec()),
                _ => (tv.clone(), tx.clone()),
            }
        } else {
            let b = &cfg.bounds;
            let v: Vec<f64> = (0..m).map(|_| rng.random_range(b.v_lo..=b.v_hi)).collect();
            let x: Vec<f64> = (0..m).map(|_| rng.random_range(b.d_lo..=b.d_hi)).collect();
            (v, if cfg.misreport_demands { x } else { tx.clone() })
        };
        project(cfg, &mut v, &mut x);
        if !cfg.misreport_demands {
            x.copy_from_slice(&tx);
        }
        for t in 0..=cfg.steps {
            result.evaluations += 1;
            let resp = match mech.respond(truth, agent, &v, &x) {
                Ok(r) => r,
                Err(e) => {
                    log::debug!("misreport evaluation failed for agent {agent}: {e}");
                    result.failed_evaluations += 1;
                    break;
                }
            };
            if resp.singular {
                result.singular_events += 1;
            }
            result.offer(&v, &x, resp.utility);
            if t == cfg.steps {
                break;
            }
            let finite = resp.grad_v.iter().chain(&resp.grad_x).all(|g| g.is_finite());
            if !finite {
                result.failed_evaluations += 1;
                break;
            }
            let scale = if cfg.normalize {
                let gmax = resp
                    .grad_v
                    .iter()
                    .chain(if cfg.misreport_demands { &resp.grad_x[..] } else { &[][..] })
                    .fold(0.0f64, |acc, g| acc.max(g.abs()));
                if gmax == 0.0 {
                    break;
                }
                1.0 / gmax
            } else {
                1.0
            };
            let eta = scale * cfg.step_size / ((t + 1) as f64).sqrt();
            for r in 0..m {
                v[r] += eta * resp.grad_v[r];
                if cfg.misreport_demands {
                    x[r] += eta * resp.grad_x[r];
                }
            }
            project(cfg, &mut v, &mut x);
            if !cfg.misreport_demands {
                x.copy_from_slice(&tx);
            }
        }
    }
    Ok(result)
}

fn check_agent(truth: &RequestProfile, agent: usize) -> Result<()> {
    if agent >= truth.n_agents() {
        return Err(Error::InvalidInput(format!(
            "agent {agent} out of range for {} agents",
            truth.n_agents()
        )));
    }
    Ok(())
}

/// Largest resource count the grid oracle accepts.
pub const GRID_MAX_RESOURCES: usize = 3;

/// Coordinate sweeps over a uniform grid of each report coordinate, iterated
/// to a fixed point, then repeated on shrinking windows around the optimum.
/// Sweeps start from the truthful report and from the best point of a coarse
/// full-product grid.
pub fn grid_misreport(mech: &Mechanism, truth: &RequestProfile, agent: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_agent(truth, agent)?;
    let m = truth.n_resources();
    if m > GRID_MAX_RESOURCES {
        return Err(Error::DimensionTooLarge {
            size: m,
            limit: GRID_MAX_RESOURCES,
        });
    }
    let tv = truth.values.row(agent).to_vec();
    let tx = truth.demands.row(agent).to_vec();
    let base = mech.agent_value(truth, agent, &tv, &tx)?;
    let mut result = AttackResult::truthful(agent, truth, base);
    if truth.max_utility(agent) == 0.0 {
        return Ok(result);
    }
    let b = cfg.bounds;
    let dim = 2 * m;
    let full: Vec<(f64, f64)> = (0..dim)
        .map(|c| {
            if c < m {
                (b.v_lo, b.v_hi)
            } else if cfg.misreport_demands {
                (b.d_lo, b.d_hi)
            } else {
                (tx[c - m], tx[c - m])
            }
        })
        .collect();
    let free = if cfg.misreport_demands { dim } else { m };
    // Coordinates 0..m are values, m..2m demands.
    let mut truthful: Vec<f64> = tv.iter().chain(&tx).copied().collect();
    for c in 0..dim {
        truthful[c] = truthful[c].clamp(full[c].0, full[c].1);
    }
    let mut starts = vec![truthful];
    if cfg.grid_coarse_budget > 1 {
        let per = ((cfg.grid_coarse_budget as f64).powf(1.0 / free as f64).floor() as usize).max(2);
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut idx = vec![0usize; free];
        loop {
            let point: Vec<f64> = (0..dim)
                .map(|c| {
                    let k = if c < free { idx[c] } else { 0 };
                    full[c].0 + (full[c].1 - full[c].0) * k as f64 / (per - 1) as f64
                })
                .collect();
            let u = eval_point(mech, truth, agent, &point, &mut result);
            if best.as_ref().is_none_or(|(bu, _)| u > *bu) {
                best = Some((u, point));
            }
            let mut c = 0;
            while c < free {
                idx[c] += 1;
                if idx[c] < per {
                    break;
                }
                idx[c] = 0;
                c += 1;
            }
            if c == free {
                break;
            }
        }
        if let Some((_, p)) = best {
            starts.push(p);
        }
    }
    for start in starts {
        sweep_from(mech, truth, agent, cfg, &full, start, &mut result);
    }
    Ok(result)
}

fn sweep_from(
    mech: &Mechanism,
    truth: &RequestProfile,
    agent: usize,
    cfg: &AttackConfig,
    full: &[(f64, f64)],
    mut cur: Vec<f64>,
    result: &mut AttackResult,
) {
    let m = truth.n_resources();
    let dim = if cfg.misreport_demands { 2 * m } else { m };
    let mut cur_u = eval_point(mech, truth, agent, &cur, result);
    result.offer(&cur[..m], &cur[m..], cur_u);
    let mut windows = full.to_vec();
    for level in 0..=cfg.grid_refinements {
        for _ in 0..cfg.grid_sweeps {
            let mut changed = false;
            for c in 0..dim {
                let (lo, hi) = windows[c];
                let mut best_c = cur[c];
                for k in 0..cfg.grid_points {
                    let val = lo + (hi - lo) * k as f64 / (cfg.grid_points - 1) as f64;
                    let mut probe = cur.clone();
                    probe[c] = val;
                    let u = eval_point(mech, truth, agent, &probe, result);
                    if u > cur_u {
                        cur_u = u;
                        best_c = val;
                        changed = true;
                    }
                }
                cur[c] = best_c;
                result.offer(&cur[..m], &cur[m..], cur_u);
            }
            if !changed {
                break;
            }
        }
        if level < cfg.grid_refinements {
            for c in 0..dim {
                let (lo, hi) = windows[c];
                let half = (hi - lo) / (cfg.grid_points - 1) as f64;
                windows[c] = ((cur[c] - half).max(full[c].0), (cur[c] + half).min(full[c].1));
            }
        }
    }
}

fn eval_point(mech: &Mechanism, truth: &RequestProfile, agent: usize, point: &[f64], result: &mut AttackResult) -> f64 {
    let m = truth.n_resources();
    result.evaluations += 1;
    match mech.agent_value(truth, agent, &point[..m], &point[m..]) {
        Ok(u) => u,
        Err(e) => {
            log::debug!("grid evaluation failed for agent {agent}: {e}");
            result.failed_evaluations += 1;
            f64::NEG_INFINITY
        }
    }
}

/// Runs the configured attack against one agent.
pub fn attack<R: Rng + ?Sized>(
    mech: &Mechanism,
    truth: &RequestProfile,
    agent: usize,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult> {
    match cfg.mode {
        AttackMode::Gradient => best_misreport(mech, truth, agent, cfg, rng),
        AttackMode::Grid => grid_misreport(mech, truth, agent, cfg),
    }
}

/// Attack every agent with its own rng stream derived from `rng`.
pub fn exploitability_vector<R: Rng + ?Sized>(
    mech: &Mechanism,
    truth: &RequestProfile,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Vec<AttackResult>> {
    let seed: u64 = rng.random();
    (0..truth.n_agents())
        .map(|i| {
            let mut stream = ChaCha8Rng::seed_from_u64(seed);
            stream.set_stream(i as u64);
            attack(mech, truth, i, cfg, &mut stream)
        })
        .collect()
}

/// Just the gains of [`exploitability_vector`].
pub fn exploitability<R: Rng + ?Sized>(
    mech: &Mechanism,
    truth: &RequestProfile,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(exploitability_vector(mech, truth, cfg, rng)?
        .into_iter()
        .map(|r| r.gain)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pfsolve::SolverConfig;

    #[test]
    fn single_agent_cannot_gain_under_pf() {
        let p = RequestProfile::from_rows(&[vec![0.6, 0.3]], &[vec![0.5, 0.8]], &[1.0, 1.0]).unwrap();
        let mech = Mechanism::Pf(SolverConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AttackConfig {
            restarts: 2,
            steps: 20,
            ..AttackConfig::default()
        };
        assert_eq!(best_misreport(&mech, &p, 0, &cfg, &mut rng).unwrap().gain, 0.0);
        assert_eq!(grid_misreport(&mech, &p, 0, &AttackConfig::grid()).unwrap().gain, 0.0);
    }

    #[test]
    fn zero_demand_agent_has_zero_gain() {
        let p = RequestProfile::from_rows(
            &[vec![0.6, 0.3], vec![0.5, 0.5]],
            &[vec![0.0, 0.0], vec![0.5, 0.8]],
            &[1.0, 1.0],
        )
        .unwrap();
        let mech = Mechanism::ExsNet(
            crate::mlp::MlpParams::zeros(&[p.dims().input_len(), crate::mechanisms::exs_output_len(p.dims())])
                .unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = best_misreport(&mech, &p, 0, &AttackConfig::default(), &mut rng).unwrap();
        assert_eq!(r.gain, 0.0);
    }

    #[test]
    fn grid_rejects_many_resources() {
        let p = RequestProfile::from_rows(&[vec![0.5; 4]], &[vec![0.5; 4]], &[1.0; 4]).unwrap();
        let mech = Mechanism::Pf(SolverConfig::default());
        assert!(matches!(
            grid_misreport(&mech, &p, 0, &AttackConfig::grid()),
            Err(Error::DimensionTooLarge { .. })
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = AttackConfig {
            restarts: 0,
            ..AttackConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
