//! Allocation mechanisms behind one interface.
//!
//! Besides plain allocation every mechanism can answer the question an
//! attacker asks: given the true profile and a report for one agent, what is
//! that agent's true (expected) utility and how does it change with the
//! reported values and demands.

use rand::Rng;

use crate::diffpf::backprop_pf;
use crate::error::{Error, Result};
use crate::metrics::{agent_utility, agent_utility_grad};
use crate::mlp::{self, Checkpoint, MlpCache, MlpGrads, MlpParams};
use crate::pfsolve::{solve_pf, solve_regularized_pf, KktSolution, SolverConfig};
use crate::profile::{AgentMatrix, Allocation, ProblemDims, RequestProfile};

#[derive(Debug, Clone, PartialEq)]
pub enum Mechanism {
    Pf(SolverConfig),
    Pa(SolverConfig),
    /// PF with probability `rho`, PA otherwise.
    Mixture { rho: f64, cfg: SolverConfig },
    ExsNet(MlpParams),
    /// Regularized PF with `z = mlp(v, x, b)`; `cfg.ridge` is the strong-convexity weight.
    ExpfNet { params: MlpParams, cfg: SolverConfig },
}

/// Agent's true utility under a report and its gradient with respect to the report.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub utility: f64,
    pub grad_v: Vec<f64>,
    pub grad_x: Vec<f64>,
    /// A differential system on the path needed the least-norm fallback.
    pub singular: bool,
}

impl Mechanism {
    pub fn mixture(rho: f64, cfg: SolverConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidConfig(format!("mixture weight {rho} outside [0, 1]")));
        }
        Ok(Mechanism::Mixture { rho, cfg })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::Pf(_) => "PF",
            Mechanism::Pa(_) => "PA",
            Mechanism::Mixture { .. } => "Mixture",
            Mechanism::ExsNet(_) => "ExS-Net",
            Mechanism::ExpfNet { .. } => "ExPF-Net",
        }
    }

    pub fn is_randomized(&self) -> bool {
        matches!(self, Mechanism::Mixture { .. })
    }

    pub fn allocate<R: Rng + ?Sized>(&self, profile: &RequestProfile, rng: &mut R) -> Result<Allocation> {
        match self {
            Mechanism::Pf(cfg) => Ok(solve_pf(profile, cfg)?.a_star),
            Mechanism::Pa(cfg) => pa_allocate(profile, cfg),
            Mechanism::Mixture { rho, cfg } => mixture_allocate(*rho, profile, rng, cfg),
            Mechanism::ExsNet(params) => Ok(exs_forward(params, profile)?.0),
            Mechanism::ExpfNet { params, cfg } => Ok(expf_forward(params, profile, cfg)?.allocation),
        }
    }

    /// Expected utilities under truthful reports. Deterministic for every arm.
    pub fn expected_utilities(&self, profile: &RequestProfile) -> Result<Vec<f64>> {
        let util = |a: &Allocation| crate::metrics::utility(a, profile);
        match self {
            Mechanism::Mixture { rho, cfg } => {
                let pf = util(&solve_pf(profile, cfg)?.a_star)?;
                let pa = util(&pa_allocate(profile, cfg)?)?;
                Ok(pf.iter().zip(&pa).map(|(f, a)| rho * f + (1.0 - rho) * a).collect())
            }
            other => util(&other.allocate(profile, &mut NoRng)?),
        }
    }

    /// Truthful allocation in expectation; a mixture interpolates its two arms.
    pub fn expected_allocation(&self, profile: &RequestProfile) -> Result<Allocation> {
        match self {
            Mechanism::Mixture { rho, cfg } => {
                let mut a = solve_pf(profile, cfg)?.a_star.0;
                let pa = pa_allocate(profile, cfg)?;
                for (x, y) in a.as_mut_slice().iter_mut().zip(pa.0.as_slice()) {
                    *x = rho * *x + (1.0 - rho) * y;
                }
                Ok(Allocation(a))
            }
            other => other.allocate(profile, &mut NoRng),
        }
    }

    /// Possible truthful outcomes with their probabilities.
    pub fn outcomes(&self, profile: &RequestProfile) -> Result<Vec<(f64, Allocation)>> {
        match self {
            Mechanism::Mixture { rho, cfg } => Ok(vec![
                (*rho, solve_pf(profile, cfg)?.a_star),
                (1.0 - rho, pa_allocate(profile, cfg)?),
            ]),
            other => Ok(vec![(1.0, other.allocate(profile, &mut NoRng)?)]),
        }
    }

    /// True utility of `agent` when it reports `(v_rep, x_rep)` and everyone else is truthful.
    pub fn agent_value(&self, truth: &RequestProfile, agent: usize, v_rep: &[f64], x_rep: &[f64]) -> Result<f64> {
        let reported = truth.with_report(agent, v_rep, x_rep);
        let tv = truth.values.row(agent);
        let tx = truth.demands.row(agent);
        let on = |a: &Allocation| agent_utility(a.matrix().row(agent), tv, tx);
        match self {
            Mechanism::Pf(cfg) => Ok(on(&solve_pf(&reported, cfg)?.a_star)),
            Mechanism::Pa(cfg) => Ok(pa_agent_response(&reported, agent, tv, tx, cfg, false)?.utility),
            Mechanism::Mixture { rho, cfg } => {
                let pf = on(&solve_pf(&reported, cfg)?.a_star);
                let pa = pa_agent_response(&reported, agent, tv, tx, cfg, false)?.utility;
                Ok(rho * pf + (1.0 - rho) * pa)
            }
            Mechanism::ExsNet(params) => Ok(on(&exs_forward(params, &reported)?.0)),
            Mechanism::ExpfNet { params, cfg } => Ok(on(&expf_forward(params, &reported, cfg)?.allocation)),
        }
    }

    /// [`Self::agent_value`] together with its gradient with respect to the report.
    pub fn respond(&self, truth: &RequestProfile, agent: usize, v_rep: &[f64], x_rep: &[f64]) -> Result<Response> {
        let reported = truth.with_report(agent, v_rep, x_rep);
        let tv = truth.values.row(agent);
        let tx = truth.demands.row(agent);
        match self {
            Mechanism::Pf(cfg) => pf_response(&reported, agent, tv, tx, cfg),
            Mechanism::Pa(cfg) => pa_agent_response(&reported, agent, tv, tx, cfg, true),
            Mechanism::Mixture { rho, cfg } => {
                let pf = pf_response(&reported, agent, tv, tx, cfg)?;
                let pa = pa_agent_response(&reported, agent, tv, tx, cfg, true)?;
                let mix = |p: &[f64], q: &[f64]| -> Vec<f64> {
                    p.iter().zip(q).map(|(a, b)| rho * a + (1.0 - rho) * b).collect()
                };
                Ok(Response {
                    utility: rho * pf.utility + (1.0 - rho) * pa.utility,
                    grad_v: mix(&pf.grad_v, &pa.grad_v),
                    grad_x: mix(&pf.grad_x, &pa.grad_x),
                    singular: pf.singular || pa.singular,
                })
            }
            Mechanism::ExsNet(params) => {
                let (a, cache) = exs_forward(params, &reported)?;
                let grad_a = row_grad(&a, agent, tv, tx);
                let (_, gv, gx) = exs_backward(params, &cache, &grad_a)?;
                Ok(Response {
                    utility: agent_utility(a.matrix().row(agent), tv, tx),
                    grad_v: gv.row(agent).to_vec(),
                    grad_x: gx.row(agent).to_vec(),
                    singular: false,
                })
            }
            Mechanism::ExpfNet { params, cfg } => {
                let out = expf_forward(params, &reported, cfg)?;
                let grad_a = row_grad(&out.allocation, agent, tv, tx);
                let back = expf_backward(params, &reported, &out, &grad_a)?;
                Ok(Response {
                    utility: agent_utility(out.allocation.matrix().row(agent), tv, tx),
                    grad_v: back.grad_v.row(agent).to_vec(),
                    grad_x: back.grad_x.row(agent).to_vec(),
                    singular: back.singular,
                })
            }
        }
    }

    /// Parameters of the learned arms.
    pub fn params(&self) -> Option<&MlpParams> {
        match self {
            Mechanism::ExsNet(p) | Mechanism::ExpfNet { params: p, .. } => Some(p),
            _ => None,
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        match self {
            Mechanism::ExsNet(p) => Ok(Checkpoint::new("exs-net", p)),
            Mechanism::ExpfNet { params, cfg } => {
                let mut c = Checkpoint::new("expf-net", params);
                c.meta.insert("ridge".into(), cfg.ridge);
                Ok(c)
            }
            other => Err(Error::UnsupportedMechanism(format!("{} has no parameters", other.name()))),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: SolverConfig) -> Result<Self> {
        let params = ck.params()?;
        match ck.kind.as_str() {
            "exs-net" => Ok(Mechanism::ExsNet(params)),
            "expf-net" => Ok(Mechanism::ExpfNet {
                params,
                cfg: cfg.with_ridge(ck.meta.get("ridge").copied().unwrap_or(0.0)),
            }),
            other => Err(Error::Parse(format!("unknown checkpoint kind {other}"))),
        }
    }
}

/// Rng for deterministic arms; never consulted.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("deterministic mechanism drew randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("deterministic mechanism drew randomness")
    }
    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("deterministic mechanism drew randomness")
    }
}

/// Upstream gradient of agent `i`'s true utility with respect to the allocation.
fn row_grad(a: &Allocation, agent: usize, tv: &[f64], tx: &[f64]) -> AgentMatrix {
    let (n, m) = a.matrix().dims();
    let mut g = AgentMatrix::zeros(n, m);
    g.row_mut(agent)
        .copy_from_slice(&agent_utility_grad(a.matrix().row(agent), tv, tx));
    g
}

fn pf_response(reported: &RequestProfile, agent: usize, tv: &[f64], tx: &[f64], cfg: &SolverConfig) -> Result<Response> {
    let kkt = solve_pf(reported, cfg)?;
    let grad_a = row_grad(&kkt.a_star, agent, tv, tx);
    let g = backprop_pf(&kkt, reported, &grad_a)?;
    Ok(Response {
        utility: agent_utility(kkt.a_star.matrix().row(agent), tv, tx),
        grad_v: g.d_v.row(agent).to_vec(),
        grad_x: g.d_x.row(agent).to_vec(),
        singular: g.least_squares,
    })
}

/// Reported utility `v_j . a_j` under a PF allocation (PF never exceeds demands).
fn linear_utility(profile: &RequestProfile, a: &Allocation, j: usize) -> f64 {
    profile.values.row(j).iter().zip(a.matrix().row(j)).map(|(v, x)| v * x).sum()
}

/// `sum_{j != i} w_j log u_j` for the PF allocation of the profile without agent `i`.
fn leave_one_out_log_welfare(profile: &RequestProfile, i: usize, cfg: &SolverConfig) -> Result<f64> {
    if profile.n_agents() == 1 {
        return Ok(0.0);
    }
    let rest = profile.without_agent(i);
    let a = solve_pf(&rest, cfg)?.a_star;
    let mut total = 0.0;
    for j in 0..rest.n_agents() {
        if rest.weights[j] > 0.0 {
            total += rest.weights[j] * linear_utility(&rest, &a, j).ln();
        }
    }
    Ok(total)
}

/// Fraction of its PF bundle agent `i` keeps, before clamping, as a log.
fn pa_log_fraction(profile: &RequestProfile, kkt: &KktSolution, i: usize, loo: f64) -> f64 {
    let mut with = 0.0;
    for j in 0..profile.n_agents() {
        if j != i && profile.weights[j] > 0.0 {
            with += profile.weights[j] * linear_utility(profile, &kkt.a_star, j).ln();
        }
    }
    (with - loo) / profile.weights[i]
}

fn check_pa_weights(profile: &RequestProfile) -> Result<()> {
    match profile.weights.iter().position(|w| *w <= 0.0) {
        Some(agent) => Err(Error::DegenerateWeights { agent }),
        None => Ok(()),
    }
}

/// Per-agent fractions `f_i` and the PF solution they scale.
pub fn pa_fractions(profile: &RequestProfile, cfg: &SolverConfig) -> Result<(Vec<f64>, KktSolution)> {
    check_pa_weights(profile)?;
    let kkt = solve_pf(profile, cfg)?;
    let mut f = Vec::with_capacity(profile.n_agents());
    for i in 0..profile.n_agents() {
        let loo = leave_one_out_log_welfare(profile, i, cfg)?;
        f.push(pa_log_fraction(profile, &kkt, i, loo).exp().clamp(0.0, 1.0));
    }
    Ok((f, kkt))
}

/// Each agent receives the fraction `f_i` of its PF bundle; the rest is withheld.
pub fn pa_allocate(profile: &RequestProfile, cfg: &SolverConfig) -> Result<Allocation> {
    let (f, kkt) = pa_fractions(profile, cfg)?;
    let mut a = kkt.a_star.0;
    for (i, fi) in f.iter().enumerate() {
        a.row_mut(i).iter_mut().for_each(|v| *v *= fi);
    }
    Ok(Allocation(a))
}

fn pa_agent_response(
    reported: &RequestProfile,
    agent: usize,
    tv: &[f64],
    tx: &[f64],
    cfg: &SolverConfig,
    with_grad: bool,
) -> Result<Response> {
    check_pa_weights(reported)?;
    let (n, m) = reported.values.dims();
    let kkt = solve_pf(reported, cfg)?;
    let loo = leave_one_out_log_welfare(reported, agent, cfg)?;
    let log_f = pa_log_fraction(reported, &kkt, agent, loo);
    let clamped = log_f >= 0.0;
    let f = log_f.exp().min(1.0);
    let bundle: Vec<f64> = kkt.a_star.matrix().row(agent).iter().map(|a| f * a).collect();
    let utility = agent_utility(&bundle, tv, tx);
    if !with_grad {
        return Ok(Response {
            utility,
            grad_v: vec![0.0; m],
            grad_x: vec![0.0; m],
            singular: false,
        });
    }
    let active = agent_utility_grad(&bundle, tv, tx);
    let mut grad_a = AgentMatrix::zeros(n, m);
    let mut d_f = 0.0;
    for r in 0..m {
        grad_a.set(agent, r, active[r] * f);
        d_f += active[r] * kkt.a_star.get(agent, r);
    }
    if !clamped && d_f != 0.0 {
        let wi = reported.weights[agent];
        for j in (0..n).filter(|&j| j != agent) {
            let uj = linear_utility(reported, &kkt.a_star, j);
            for r in 0..m {
                let df_da = f * reported.weights[j] * reported.values.get(j, r) / (wi * uj);
                grad_a.set(j, r, d_f * df_da);
            }
        }
    }
    let g = backprop_pf(&kkt, reported, &grad_a)?;
    Ok(Response {
        utility,
        grad_v: g.d_v.row(agent).to_vec(),
        grad_x: g.d_x.row(agent).to_vec(),
        singular: g.least_squares,
    })
}

pub fn mixture_allocate<R: Rng + ?Sized>(
    rho: f64,
    profile: &RequestProfile,
    rng: &mut R,
    cfg: &SolverConfig,
) -> Result<Allocation> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("mixture weight {rho} outside [0, 1]")));
    }
    if rng.random_bool(rho) {
        Ok(solve_pf(profile, cfg)?.a_star)
    } else {
        pa_allocate(profile, cfg)
    }
}

/// Network output width for ExS-Net: one softmax slot per agent plus the waste agent.
pub fn exs_output_len(dims: ProblemDims) -> usize {
    (dims.n_agents + 1) * dims.n_resources
}

pub fn expf_output_len(dims: ProblemDims) -> usize {
    dims.n_agents * dims.n_resources
}

#[derive(Debug, Clone)]
pub struct ExsCache {
    mlp: MlpCache,
    /// Softmax shares, `(N + 1) x M`, waste agent last.
    pub shares: AgentMatrix,
    budgets: Vec<f64>,
    demands: AgentMatrix,
}

fn check_output(params: &MlpParams, dims: ProblemDims, expected: usize) -> Result<()> {
    if params.input_len() != dims.input_len() || params.output_len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "network maps {} -> {} but a {} system needs {} -> {}",
            params.input_len(),
            params.output_len(),
            dims,
            dims.input_len(),
            expected
        )));
    }
    Ok(())
}

/// Per-resource softmax over agents and the waste slot, scaled by budget and capped at demand.
pub fn exs_forward(params: &MlpParams, profile: &RequestProfile) -> Result<(Allocation, ExsCache)> {
    let dims = profile.dims();
    check_output(params, dims, exs_output_len(dims))?;
    let (n, m) = (dims.n_agents, dims.n_resources);
    let cache = mlp::forward(params, &profile.network_input())?;
    let logits = cache.output();
    let mut shares = AgentMatrix::zeros(n + 1, m);
    for r in 0..m {
        let top = (0..=n).map(|i| logits[i * m + r]).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..=n).map(|i| (logits[i * m + r] - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (i, e) in exps.iter().enumerate() {
            shares.set(i, r, e / total);
        }
    }
    let mut a = AgentMatrix::zeros(n, m);
    for i in 0..n {
        for r in 0..m {
            a.set(i, r, (shares.get(i, r) * profile.budgets[r]).min(profile.demands.get(i, r)));
        }
    }
    Ok((
        Allocation(a),
        ExsCache {
            mlp: cache,
            shares,
            budgets: profile.budgets.clone(),
            demands: profile.demands.clone(),
        },
    ))
}

/// Gradients of `<grad_a, a>` with respect to the parameters and to `v` and `x`.
pub fn exs_backward(
    params: &MlpParams,
    cache: &ExsCache,
    grad_a: &AgentMatrix,
) -> Result<(MlpGrads, AgentMatrix, AgentMatrix)> {
    let (n, m) = cache.demands.dims();
    if grad_a.dims() != (n, m) {
        return Err(Error::DimensionMismatch("upstream gradient shape".into()));
    }
    let mut g_share = AgentMatrix::zeros(n + 1, m);
    let mut grad_x = AgentMatrix::zeros(n, m);
    for i in 0..n {
        for r in 0..m {
            let g = grad_a.get(i, r);
            if cache.shares.get(i, r) * cache.budgets[r] <= cache.demands.get(i, r) {
                g_share.set(i, r, g * cache.budgets[r]);
            } else {
                grad_x.set(i, r, g);
            }
        }
    }
    let mut g_logit = vec![0.0; (n + 1) * m];
    for r in 0..m {
        let dot: f64 = (0..=n).map(|i| cache.shares.get(i, r) * g_share.get(i, r)).sum();
        for i in 0..=n {
            g_logit[i * m + r] = cache.shares.get(i, r) * (g_share.get(i, r) - dot);
        }
    }
    let (grads, g_in) = mlp::backward(params, &cache.mlp, &g_logit)?;
    let nm = n * m;
    let mut grad_v = AgentMatrix::zeros(n, m);
    grad_v.as_mut_slice().copy_from_slice(&g_in[..nm]);
    for (gx, gi) in grad_x.as_mut_slice().iter_mut().zip(&g_in[nm..2 * nm]) {
        *gx += gi;
    }
    Ok((grads, grad_v, grad_x))
}

#[derive(Debug, Clone)]
pub struct ExpfOutput {
    pub allocation: Allocation,
    pub kkt: KktSolution,
    pub z: AgentMatrix,
    pub cache: MlpCache,
}

pub fn expf_forward(params: &MlpParams, profile: &RequestProfile, cfg: &SolverConfig) -> Result<ExpfOutput> {
    let dims = profile.dims();
    check_output(params, dims, expf_output_len(dims))?;
    let cache = mlp::forward(params, &profile.network_input())?;
    let z = AgentMatrix::from_flat(dims.n_agents, dims.n_resources, cache.output().to_vec())?;
    if !z.is_finite() {
        return Err(Error::NonFinite("regularizer output".into()));
    }
    let kkt = solve_regularized_pf(profile, &z, cfg)?;
    Ok(ExpfOutput {
        allocation: kkt.a_star.clone(),
        kkt,
        z,
        cache,
    })
}

#[derive(Debug, Clone)]
pub struct ExpfGradients {
    pub params: MlpGrads,
    pub grad_v: AgentMatrix,
    pub grad_x: AgentMatrix,
    /// Gradient with respect to `z`, before it enters the network.
    pub grad_z: AgentMatrix,
    pub singular: bool,
}

/// Chains the program's `dl/dz` into the network and adds the network-input
/// terms to the program's own `dl/dv` and `dl/dx`.
pub fn expf_backward(
    params: &MlpParams,
    profile: &RequestProfile,
    out: &ExpfOutput,
    grad_a: &AgentMatrix,
) -> Result<ExpfGradients> {
    let pg = backprop_pf(&out.kkt, profile, grad_a)?;
    if !pg.is_finite() {
        return Err(Error::NumericalFailure("non-finite program gradient".into()));
    }
    let (grads, g_in) = mlp::backward(params, &out.cache, pg.d_z.as_slice())?;
    let nm = pg.d_v.as_slice().len();
    let mut grad_v = pg.d_v.clone();
    let mut grad_x = pg.d_x.clone();
    for (g, e) in grad_v.as_mut_slice().iter_mut().zip(&g_in[..nm]) {
        *g += e;
    }
    for (g, e) in grad_x.as_mut_slice().iter_mut().zip(&g_in[nm..2 * nm]) {
        *g += e;
    }
    Ok(ExpfGradients {
        params: grads,
        grad_v,
        grad_x,
        grad_z: pg.d_z,
        singular: pg.least_squares,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    #[test]
    fn pa_on_gaming_example() {
        let p = RequestProfile::gaming_example();
        let (f, _) = pa_fractions(&p, &cfg()).unwrap();
        assert!((f[0] - 0.6).abs() < 1e-8, "{f:?}");
        assert!((f[1] - 0.5).abs() < 1e-8, "{f:?}");
        let u = crate::metrics::utility(&pa_allocate(&p, &cfg()).unwrap(), &p).unwrap();
        assert!((u[0] - 0.45).abs() < 1e-8 && (u[1] - 0.375).abs() < 1e-8);
    }

    #[test]
    fn pa_single_agent_is_pf() {
        let p = RequestProfile::from_rows(&[vec![0.5, 0.2]], &[vec![0.3, 1.0]], &[1.0, 0.5]).unwrap();
        let pa = pa_allocate(&p, &cfg()).unwrap();
        let pf = solve_pf(&p, &cfg()).unwrap().a_star;
        assert!(pa.matrix().max_abs_diff(pf.matrix()) < 1e-12);
    }

    #[test]
    fn pa_rejects_zero_weight() {
        let mut p = RequestProfile::gaming_example();
        p.weights[1] = 0.0;
        assert_eq!(pa_allocate(&p, &cfg()).unwrap_err(), Error::DegenerateWeights { agent: 1 });
    }

    #[test]
    fn pa_without_externality_is_pf() {
        let p = RequestProfile::from_rows(
            &[vec![1.0, 0.1], vec![0.1, 1.0]],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[5.0, 5.0],
        )
        .unwrap();
        let (f, _) = pa_fractions(&p, &cfg()).unwrap();
        assert!(f.iter().all(|v| (v - 1.0).abs() < 1e-9), "{f:?}");
    }

    #[test]
    fn mixture_endpoints() {
        let p = RequestProfile::gaming_example();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pa = pa_allocate(&p, &cfg()).unwrap();
        let pf = solve_pf(&p, &cfg()).unwrap().a_star;
        assert_eq!(mixture_allocate(0.0, &p, &mut rng, &cfg()).unwrap(), pa);
        assert_eq!(mixture_allocate(1.0, &p, &mut rng, &cfg()).unwrap(), pf);
        assert!(Mechanism::mixture(1.5, cfg()).is_err());
    }

    #[test]
    fn exs_zero_params_single_agent() {
        let p = RequestProfile::from_rows(&[vec![0.5, 0.5]], &[vec![0.2, 1.0]], &[1.0, 1.0]).unwrap();
        let params = MlpParams::zeros(&[p.dims().input_len(), 8, exs_output_len(p.dims())]).unwrap();
        let (a, _) = exs_forward(&params, &p).unwrap();
        assert_eq!(a.get(0, 0), 0.2);
        assert_eq!(a.get(0, 1), 0.5);
    }

    #[test]
    fn exs_zero_params_two_agents_one_resource() {
        let p = RequestProfile::from_rows(&[vec![0.5], vec![0.7]], &[vec![1.0], vec![1.0]], &[1.0]).unwrap();
        let params = MlpParams::zeros(&[p.dims().input_len(), exs_output_len(p.dims())]).unwrap();
        let (a, c) = exs_forward(&params, &p).unwrap();
        assert!((a.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((a.get(1, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((c.shares.get(2, 0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn exs_large_waste_logit_withholds_everything() {
        let p = RequestProfile::gaming_example();
        let mut params = MlpParams::zeros(&[p.dims().input_len(), exs_output_len(p.dims())]).unwrap();
        let (_, b) = params.layer_mut(0);
        b[4] = 50.0;
        b[5] = 50.0;
        let (a, _) = exs_forward(&params, &p).unwrap();
        assert!(a.matrix().as_slice().iter().all(|v| *v < 1e-20));
    }

    #[test]
    fn exs_capped_allocation_blocks_parameter_path() {
        let p = RequestProfile::from_rows(&[vec![0.5], vec![0.7]], &[vec![0.1], vec![0.1]], &[3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = MlpParams::init(&[p.dims().input_len(), 4, exs_output_len(p.dims())], &mut rng).unwrap();
        let (a, cache) = exs_forward(&params, &p).unwrap();
        assert_eq!(a.matrix().as_slice(), &[0.1, 0.1]);
        let g = AgentMatrix::from_flat(2, 1, vec![1.0, -2.0]).unwrap();
        let (gp, _, gx) = exs_backward(&params, &cache, &g).unwrap();
        assert!(gp.as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(gx, g);
    }

    #[test]
    fn expf_zero_params_is_pf() {
        let p = RequestProfile::gaming_example();
        let params = MlpParams::zeros(&[p.dims().input_len(), 8, expf_output_len(p.dims())]).unwrap();
        let out = expf_forward(&params, &p, &cfg()).unwrap();
        let pf = solve_pf(&p, &cfg()).unwrap();
        assert!(out.allocation.matrix().max_abs_diff(pf.a_star.matrix()) < 2e-9);
    }

    #[test]
    fn checkpoint_tags_kind() {
        let params = MlpParams::zeros(&[6, 4]).unwrap();
        let m = Mechanism::ExpfNet {
            params,
            cfg: cfg().with_ridge(0.5),
        };
        let ck = m.checkpoint().unwrap();
        assert_eq!(ck.kind, "expf-net");
        assert_eq!(Mechanism::from_checkpoint(&ck, cfg()).unwrap(), m);
        assert!(Mechanism::Pf(cfg()).checkpoint().is_err());
    }
}
