//! Proportional-fairness program and its regularized variant.
//!
//! Solves
//!
//! ```text
//! min_a  -sum_i w_i log(v_i . a_i) + <a, z> + ridge * |a|^2
//! s.t.   0 <= a <= x,   sum_i a_im <= b_m
//! ```
//!
//! with a primal-dual interior-point method and returns the primal solution
//! together with the dual certificate `(mu, nu, lambda)` for `-a <= 0`,
//! `a <= x` and `Da <= b`. Once the path-following phase has converged, the
//! active set is read off the duals and the equality-constrained optimality
//! system is solved by Newton's method, which makes complementarity exact
//! whenever the optimum is nondegenerate enough for that system to be regular.
//!
//! Coordinates with zero demand or zero budget are fixed at zero and removed
//! from the interior-point phase.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{AgentMatrix, Allocation, RequestProfile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Target for the max-norm KKT residual.
    pub kkt_tol: f64,
    pub max_iters: usize,
    /// Coefficient of the `ridge * |a|^2` strong-convexity term.
    pub ridge: f64,
    pub feas_tol: f64,
    /// Slack/dual threshold used to call a constraint tight.
    pub act_tol: f64,
    /// Multiplier applied to the surrogate gap when choosing the next barrier weight.
    pub barrier_growth: f64,
    /// Backtracking ratio of the line search.
    pub backtrack: f64,
    /// Armijo constant of the residual-decrease test.
    pub armijo: f64,
    /// Run the active-set Newton polish after the interior-point phase.
    pub polish: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-9,
            max_iters: 200,
            ridge: 0.0,
            feas_tol: 1e-7,
            act_tol: 1e-6,
            barrier_growth: 10.0,
            backtrack: 0.5,
            armijo: 0.01,
            polish: true,
        }
    }
}

impl SolverConfig {
    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kkt_tol > 0.0) {
            return Err(Error::InvalidConfig("kkt_tol must be positive".into()));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::InvalidConfig("ridge must be finite and nonnegative".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidConfig("backtrack must lie in (0, 1)".into()));
        }
        if !(self.barrier_growth > 1.0) {
            return Err(Error::InvalidConfig("barrier_growth must exceed 1".into()));
        }
        Ok(())
    }
}

/// Primal solution and dual certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktSolution {
    pub a_star: Allocation,
    /// Duals of `-a <= 0`.
    pub mu: AgentMatrix,
    /// Duals of `a <= x`.
    pub nu: AgentMatrix,
    /// Duals of the per-resource budget rows.
    pub lambda: Vec<f64>,
    /// Max-norm KKT residual at the returned point.
    pub residual: f64,
    /// Linear regularizer the program was solved with, `None` for plain PF.
    pub z_used: Option<AgentMatrix>,
    pub ridge: f64,
    pub iterations: usize,
    /// Whether the active-set polish succeeded.
    pub polished: bool,
}

impl KktSolution {
    /// Agent utilities `v_i . a_i` under the profile the program was solved for.
    pub fn utilities(&self, profile: &RequestProfile) -> Vec<f64> {
        crate::metrics::utility(&self.a_star, profile).expect("solution matches profile")
    }
}

/// Plain proportional fairness.
pub fn solve_pf(profile: &RequestProfile, cfg: &SolverConfig) -> Result<KktSolution> {
    solve_inner(profile, None, cfg)
}

/// Proportional fairness with the linear term `<a, z>` (and `cfg.ridge * |a|^2`).
pub fn solve_regularized_pf(
    profile: &RequestProfile,
    z: &AgentMatrix,
    cfg: &SolverConfig,
) -> Result<KktSolution> {
    if z.dims() != profile.values.dims() {
        return Err(Error::DimensionMismatch(format!(
            "regularizer is {}x{} but profile is {}",
            z.n_agents(),
            z.n_resources(),
            profile.dims()
        )));
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("regularizer".into()));
    }
    solve_inner(profile, Some(z), cfg)
}

/// Per-agent objective data shared by the solver phases.
struct Objective<'a> {
    profile: &'a RequestProfile,
    z: Option<&'a AgentMatrix>,
    ridge: f64,
}

impl Objective<'_> {
    fn z(&self, i: usize, m: usize) -> f64 {
        self.z.map_or(0.0, |z| z.get(i, m))
    }

    /// `s_i = v_i . a_i` for a full allocation.
    fn shares(&self, a: &AgentMatrix) -> Vec<f64> {
        (0..self.profile.n_agents())
            .map(|i| {
                self.profile
                    .values
                    .row(i)
                    .iter()
                    .zip(a.row(i))
                    .map(|(v, x)| v * x)
                    .sum()
            })
            .collect()
    }

    /// Objective gradient at entry `(i, m)` given shares.
    fn grad(&self, a: &AgentMatrix, s: &[f64], i: usize, m: usize) -> f64 {
        let w = self.profile.weights[i];
        let log_term = if w == 0.0 {
            0.0
        } else {
            -w * self.profile.values.get(i, m) / s[i]
        };
        log_term + self.z(i, m) + 2.0 * self.ridge * a.get(i, m)
    }
}

/// Index bookkeeping for the coordinates the interior-point phase works on.
struct Layout {
    n_res: usize,
    /// `(agent, resource)` of each free variable.
    coords: Vec<(usize, usize)>,
    /// Budget rows that contain at least one variable.
    rows: Vec<usize>,
    /// Position of each resource in `rows`.
    row_of: Vec<Option<usize>>,
}

impl Layout {
    fn new(profile: &RequestProfile) -> Self {
        let (n, m) = profile.values.dims();
        let mut coords = Vec::new();
        for i in 0..n {
            for r in 0..m {
                if profile.demands.get(i, r) > 0.0 && profile.budgets[r] > 0.0 {
                    coords.push((i, r));
                }
            }
        }
        let mut row_of = vec![None; m];
        let mut rows = Vec::new();
        for r in 0..m {
            if coords.iter().any(|&(_, c)| c == r) {
                row_of[r] = Some(rows.len());
                rows.push(r);
            }
        }
        Self {
            n_res: m,
            coords,
            rows,
            row_of,
        }
    }

    fn scatter(&self, dims: (usize, usize), a: &[f64]) -> AgentMatrix {
        let mut full = AgentMatrix::zeros(dims.0, dims.1);
        for (k, &(i, r)) in self.coords.iter().enumerate() {
            full.set(i, r, a[k]);
        }
        full
    }
}

fn check_solvable(profile: &RequestProfile, layout: &Layout) -> Result<()> {
    for i in 0..profile.n_agents() {
        if profile.weights[i] == 0.0 {
            continue;
        }
        let reachable = layout
            .coords
            .iter()
            .any(|&(j, r)| j == i && profile.values.get(i, r) > 0.0);
        if !reachable {
            return Err(Error::Infeasible { agent: i });
        }
    }
    Ok(())
}

/// Interior-point iterate over the reduced coordinates.
#[derive(Clone)]
struct Iterate {
    a: Vec<f64>,
    mu: Vec<f64>,
    nu: Vec<f64>,
    lam: Vec<f64>,
}

struct Residuals {
    dual: Vec<f64>,
    /// Complementarity products for lower, upper and budget constraints.
    comp_lo: Vec<f64>,
    comp_hi: Vec<f64>,
    comp_b: Vec<f64>,
}

impl Residuals {
    fn norm_with_target(&self, inv_t: f64) -> f64 {
        let mut s: f64 = self.dual.iter().map(|r| r * r).sum();
        for c in self.comp_lo.iter().chain(&self.comp_hi).chain(&self.comp_b) {
            s += (c - inv_t).powi(2);
        }
        s.sqrt()
    }

    fn gap(&self) -> f64 {
        self.comp_lo.iter().chain(&self.comp_hi).chain(&self.comp_b).sum()
    }

    fn max_dual(&self) -> f64 {
        self.dual.iter().fold(0.0, |acc, r| acc.max(r.abs()))
    }

    fn max_comp(&self) -> f64 {
        self.comp_lo
            .iter()
            .chain(&self.comp_hi)
            .chain(&self.comp_b)
            .fold(0.0, |acc, c| acc.max(c.abs()))
    }
}

struct Ipm<'a> {
    obj: Objective<'a>,
    layout: Layout,
    dims: (usize, usize),
}

impl Ipm<'_> {
    fn x(&self, k: usize) -> f64 {
        let (i, r) = self.layout.coords[k];
        self.obj.profile.demands.get(i, r)
    }

    fn budget_slacks(&self, a: &[f64]) -> Vec<f64> {
        let mut used = vec![0.0; self.layout.rows.len()];
        for (k, &(_, r)) in self.layout.coords.iter().enumerate() {
            used[self.layout.row_of[r].expect("row exists")] += a[k];
        }
        self.layout
            .rows
            .iter()
            .zip(used)
            .map(|(&r, u)| self.obj.profile.budgets[r] - u)
            .collect()
    }

    fn strictly_feasible(&self, a: &[f64]) -> bool {
        a.iter().enumerate().all(|(k, &ak)| ak > 0.0 && ak < self.x(k))
            && self.budget_slacks(a).iter().all(|s| *s > 0.0)
            && {
                let full = self.layout.scatter(self.dims, a);
                let s = self.obj.shares(&full);
                (0..self.dims.0).all(|i| self.obj.profile.weights[i] == 0.0 || s[i] > 0.0)
            }
    }

    fn gradient(&self, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let full = self.layout.scatter(self.dims, a);
        let s = self.obj.shares(&full);
        let g = self
            .layout
            .coords
            .iter()
            .map(|&(i, r)| self.obj.grad(&full, &s, i, r))
            .collect();
        (g, s)
    }

    fn residuals(&self, it: &Iterate) -> Residuals {
        let (g, _) = self.gradient(&it.a);
        let sb = self.budget_slacks(&it.a);
        let dual = self
            .layout
            .coords
            .iter()
            .enumerate()
            .map(|(k, &(_, r))| {
                g[k] - it.mu[k] + it.nu[k] + it.lam[self.layout.row_of[r].expect("row exists")]
            })
            .collect();
        Residuals {
            dual,
            comp_lo: it.a.iter().zip(&it.mu).map(|(a, m)| a * m).collect(),
            comp_hi: it
                .a
                .iter()
                .enumerate()
                .map(|(k, a)| (self.x(k) - a) * it.nu[k])
                .collect(),
            comp_b: sb.iter().zip(&it.lam).map(|(s, l)| s * l).collect(),
        }
    }

    fn hessian(&self, a: &[f64], s: &[f64]) -> DMatrix<f64> {
        let nk = a.len();
        let p = self.obj.profile;
        let mut h = DMatrix::zeros(nk, nk);
        for (k, &(i, r)) in self.layout.coords.iter().enumerate() {
            for (l, &(j, q)) in self.layout.coords.iter().enumerate() {
                if i == j && p.weights[i] != 0.0 {
                    h[(k, l)] = p.weights[i] * p.values.get(i, r) * p.values.get(j, q) / (s[i] * s[i]);
                }
            }
            h[(k, k)] += 2.0 * self.obj.ridge;
        }
        h
    }

    fn start(&self) -> Iterate {
        let p = self.obj.profile;
        let mut count = vec![0usize; self.layout.n_res];
        for &(_, r) in &self.layout.coords {
            count[r] += 1;
        }
        let a: Vec<f64> = self
            .layout
            .coords
            .iter()
            .enumerate()
            .map(|(k, &(_, r))| 0.5 * self.x(k).min(p.budgets[r] / count[r] as f64))
            .collect();
        let nk = a.len();
        Iterate {
            a,
            mu: vec![1.0; nk],
            nu: vec![1.0; nk],
            lam: vec![1.0; self.layout.rows.len()],
        }
    }

    fn run(&self, cfg: &SolverConfig) -> Result<(Iterate, usize)> {
        let mut it = self.start();
        let n_cons = (2 * it.a.len() + it.lam.len()) as f64;
        let stop_tol = 0.1 * cfg.kkt_tol;
        for iter in 0..cfg.max_iters {
            let res = self.residuals(&it);
            if res.max_dual() <= stop_tol && res.max_comp() <= stop_tol {
                return Ok((it, iter));
            }
            let inv_t = res.gap() / (cfg.barrier_growth * n_cons);
            let (g, s) = self.gradient(&it.a);
            let sb = self.budget_slacks(&it.a);
            let nk = it.a.len();

            let mut h = self.hessian(&it.a, &s);
            let mut rhs = DVector::zeros(nk);
            for k in 0..nk {
                let sx = self.x(k) - it.a[k];
                h[(k, k)] += it.mu[k] / it.a[k] + it.nu[k] / sx;
                rhs[k] = -g[k] + inv_t / it.a[k] - inv_t / sx;
            }
            for (k, &(_, r)) in self.layout.coords.iter().enumerate() {
                let ri = self.layout.row_of[r].expect("row exists");
                rhs[k] -= inv_t / sb[ri];
                for (l, &(_, q)) in self.layout.coords.iter().enumerate() {
                    if q == r {
                        h[(k, l)] += it.lam[ri] / sb[ri];
                    }
                }
            }
            let da = match h.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => h
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::NumericalFailure("singular Newton system".into()))?,
            };
            let mut dsum = vec![0.0; sb.len()];
            for (k, &(_, r)) in self.layout.coords.iter().enumerate() {
                dsum[self.layout.row_of[r].expect("row exists")] += da[k];
            }
            let dmu: Vec<f64> = (0..nk)
                .map(|k| inv_t / it.a[k] - it.mu[k] - it.mu[k] * da[k] / it.a[k])
                .collect();
            let dnu: Vec<f64> = (0..nk)
                .map(|k| {
                    let sx = self.x(k) - it.a[k];
                    inv_t / sx - it.nu[k] + it.nu[k] * da[k] / sx
                })
                .collect();
            let dlam: Vec<f64> = (0..sb.len())
                .map(|ri| inv_t / sb[ri] - it.lam[ri] + it.lam[ri] * dsum[ri] / sb[ri])
                .collect();

            // Largest step keeping duals positive, then backtrack into the primal interior.
            let mut step: f64 = 1.0;
            for (d, v) in dmu
                .iter()
                .zip(&it.mu)
                .chain(dnu.iter().zip(&it.nu))
                .chain(dlam.iter().zip(&it.lam))
            {
                if *d < 0.0 {
                    step = step.min(-v / d);
                }
            }
            step *= 0.99;
            let make = |t: f64| Iterate {
                a: (0..nk).map(|k| it.a[k] + t * da[k]).collect(),
                mu: (0..nk).map(|k| it.mu[k] + t * dmu[k]).collect(),
                nu: (0..nk).map(|k| it.nu[k] + t * dnu[k]).collect(),
                lam: (0..sb.len()).map(|r| it.lam[r] + t * dlam[r]).collect(),
            };
            let mut trial = make(step);
            let mut guard = 0;
            while !self.strictly_feasible(&trial.a) {
                step *= cfg.backtrack;
                trial = make(step);
                guard += 1;
                if guard > 200 {
                    return Err(Error::NumericalFailure("line search lost feasibility".into()));
                }
            }
            let base = res.norm_with_target(inv_t);
            loop {
                let r_new = self.residuals(&trial).norm_with_target(inv_t);
                if r_new <= (1.0 - cfg.armijo * step) * base || step < 1e-14 {
                    break;
                }
                step *= cfg.backtrack;
                trial = make(step);
            }
            it = trial;
        }
        Ok((it, cfg.max_iters))
    }
}

fn solve_inner(
    profile: &RequestProfile,
    z: Option<&AgentMatrix>,
    cfg: &SolverConfig,
) -> Result<KktSolution> {
    profile.validate()?;
    cfg.validate()?;
    let layout = Layout::new(profile);
    check_solvable(profile, &layout)?;
    let dims = profile.values.dims();
    let ipm = Ipm {
        obj: Objective {
            profile,
            z,
            ridge: cfg.ridge,
        },
        layout,
        dims,
    };
    let (it, iters) = ipm.run(cfg)?;
    let mut sol = ipm.assemble(&it, iters, z);
    if cfg.polish {
        if let Some(p) = ipm.polish(&it, cfg, iters, z) {
            if p.residual <= sol.residual {
                sol = p;
            }
        }
    }
    if !(sol.residual <= cfg.kkt_tol) {
        return Err(Error::NoConvergence {
            iters: sol.iterations,
            residual: sol.residual,
        });
    }
    Ok(sol)
}

impl Ipm<'_> {
    /// Full-size certificate from reduced primal values and row duals.
    fn complete(
        &self,
        a: &[f64],
        lam_rows: &[f64],
        mu_red: &[f64],
        nu_red: &[f64],
        iters: usize,
        z: Option<&AgentMatrix>,
        polished: bool,
    ) -> KktSolution {
        let p = self.obj.profile;
        let (n, m) = self.dims;
        let a_full = self.layout.scatter(self.dims, a);
        let s = self.obj.shares(&a_full);
        let mut mu = self.layout.scatter(self.dims, mu_red);
        let mut nu = self.layout.scatter(self.dims, nu_red);
        let mut lambda = vec![0.0; m];
        for (ri, &r) in self.layout.rows.iter().enumerate() {
            lambda[r] = lam_rows[ri].max(0.0);
        }
        // Empty-budget columns: the price must make every positive-demand entry sit at zero.
        for r in 0..m {
            if self.layout.row_of[r].is_none() && p.budgets[r] == 0.0 {
                let mut price: f64 = 0.0;
                for i in 0..n {
                    if p.demands.get(i, r) > 0.0 {
                        price = price.max(-self.obj.grad(&a_full, &s, i, r));
                    }
                }
                lambda[r] = price;
            }
        }
        let is_var = |i: usize, r: usize| p.demands.get(i, r) > 0.0 && p.budgets[r] > 0.0;
        for i in 0..n {
            for r in 0..m {
                if is_var(i, r) {
                    continue;
                }
                let st = self.obj.grad(&a_full, &s, i, r) + lambda[r];
                if p.demands.get(i, r) > 0.0 {
                    mu.set(i, r, st.max(0.0));
                    nu.set(i, r, 0.0);
                } else {
                    mu.set(i, r, st.max(0.0));
                    nu.set(i, r, (-st).max(0.0));
                }
            }
        }
        let mut sol = KktSolution {
            a_star: Allocation(a_full),
            mu,
            nu,
            lambda,
            residual: 0.0,
            z_used: z.cloned(),
            ridge: self.obj.ridge,
            iterations: iters,
            polished,
        };
        sol.residual = kkt_residual(p, &sol);
        sol
    }

    fn assemble(&self, it: &Iterate, iters: usize, z: Option<&AgentMatrix>) -> KktSolution {
        self.complete(&it.a, &it.lam, &it.mu, &it.nu, iters, z, false)
    }

    /// Active-set Newton polish. Returns `None` when the guessed active set
    /// does not yield a regular system or a valid certificate.
    fn polish(
        &self,
        it: &Iterate,
        cfg: &SolverConfig,
        iters: usize,
        z: Option<&AgentMatrix>,
    ) -> Option<KktSolution> {
        #[derive(Clone, Copy, PartialEq)]
        enum State {
            Free,
            Lower,
            Upper,
        }
        let nk = it.a.len();
        let sb = self.budget_slacks(&it.a);
        let state: Vec<State> = (0..nk)
            .map(|k| {
                let lo = it.mu[k] / it.a[k].max(f64::MIN_POSITIVE);
                let hi = it.nu[k] / (self.x(k) - it.a[k]).max(f64::MIN_POSITIVE);
                if lo > 1.0 && lo >= hi {
                    State::Lower
                } else if hi > 1.0 {
                    State::Upper
                } else {
                    State::Free
                }
            })
            .collect();
        let row_active: Vec<bool> = (0..sb.len()).map(|ri| it.lam[ri] > sb[ri]).collect();

        let mut a = it.a.clone();
        for k in 0..nk {
            match state[k] {
                State::Lower => a[k] = 0.0,
                State::Upper => a[k] = self.x(k),
                State::Free => {}
            }
        }
        let free: Vec<usize> = (0..nk).filter(|&k| state[k] == State::Free).collect();
        let row_of_k = |k: usize| self.layout.row_of[self.layout.coords[k].1].expect("row exists");
        // Active rows that still carry a free coordinate get a Newton-determined price.
        let newton_rows: Vec<usize> = (0..sb.len())
            .filter(|&ri| row_active[ri] && free.iter().any(|&k| row_of_k(k) == ri))
            .collect();
        for ri in 0..sb.len() {
            if row_active[ri] && !newton_rows.contains(&ri) {
                let used: f64 = (0..nk).filter(|&k| row_of_k(k) == ri).map(|k| a[k]).sum();
                let b = self.obj.profile.budgets[self.layout.rows[ri]];
                if (used - b).abs() > cfg.feas_tol {
                    return None;
                }
            }
        }
        let mut lam: Vec<f64> = (0..sb.len())
            .map(|ri| if row_active[ri] { it.lam[ri] } else { 0.0 })
            .collect();

        let nf = free.len();
        let nr = newton_rows.len();
        let dim = nf + nr;
        if dim > 0 {
            let mut converged = false;
            for _ in 0..50 {
                let (g, s) = self.gradient(&a);
                let mut f = DVector::zeros(dim);
                for (p, &k) in free.iter().enumerate() {
                    f[p] = g[k] + lam[row_of_k(k)];
                }
                for (q, &ri) in newton_rows.iter().enumerate() {
                    let used: f64 = (0..nk).filter(|&k| row_of_k(k) == ri).map(|k| a[k]).sum();
                    f[nf + q] = used - self.obj.profile.budgets[self.layout.rows[ri]];
                }
                let fnorm = f.amax();
                if fnorm <= 1e-14 {
                    converged = true;
                    break;
                }
                let h = self.hessian(&a, &s);
                let mut jac = DMatrix::zeros(dim, dim);
                for (p, &k) in free.iter().enumerate() {
                    for (q, &l) in free.iter().enumerate() {
                        jac[(p, q)] = h[(k, l)];
                    }
                    if let Some(q) = newton_rows.iter().position(|&ri| ri == row_of_k(k)) {
                        jac[(p, nf + q)] = 1.0;
                        jac[(nf + q, p)] = 1.0;
                    }
                }
                let sv = jac.clone().singular_values();
                let smax = sv.max();
                if !(sv.min() > 1e-11 * smax) {
                    return None;
                }
                let step = jac.lu().solve(&(-f))?;
                for (p, &k) in free.iter().enumerate() {
                    a[k] += step[p];
                }
                for (q, &ri) in newton_rows.iter().enumerate() {
                    lam[ri] += step[nf + q];
                }
                if !a.iter().all(|v| v.is_finite()) {
                    return None;
                }
                if fnorm < 1e-13 {
                    converged = true;
                }
            }
            if !converged {
                let (g, _) = self.gradient(&a);
                let worst = free
                    .iter()
                    .map(|&k| (g[k] + lam[row_of_k(k)]).abs())
                    .fold(0.0, f64::max);
                if worst > 1e-12 {
                    return None;
                }
            }
        }

        // The polished point must stay where the path-following phase ended up.
        let moved = a
            .iter()
            .zip(&it.a)
            .fold(0.0f64, |acc, (p, q)| acc.max((p - q).abs()));
        if moved > 1e-5 {
            return None;
        }
        for &k in &free {
            if !(a[k] > 0.0 && a[k] < self.x(k)) {
                return None;
            }
        }
        let sb_new = self.budget_slacks(&a);
        for ri in 0..sb.len() {
            if !row_active[ri] && sb_new[ri] < 0.0 {
                return None;
            }
            if lam[ri] < 0.0 {
                return None;
            }
        }
        let (g, _) = self.gradient(&a);
        let mut mu = vec![0.0; nk];
        let mut nu = vec![0.0; nk];
        for k in 0..nk {
            let st = g[k] + lam[row_of_k(k)];
            match state[k] {
                State::Lower => {
                    if st < 0.0 {
                        return None;
                    }
                    mu[k] = st;
                }
                State::Upper => {
                    if st > 0.0 {
                        return None;
                    }
                    nu[k] = -st;
                }
                State::Free => {}
            }
        }
        Some(self.complete(&a, &lam, &mu, &nu, iters, z, true))
    }
}

/// Max-norm violation of stationarity, primal and dual feasibility and complementarity.
pub fn kkt_residual(profile: &RequestProfile, sol: &KktSolution) -> f64 {
    let obj = Objective {
        profile,
        z: sol.z_used.as_ref(),
        ridge: sol.ridge,
    };
    let a = sol.a_star.matrix();
    let s = obj.shares(a);
    let (n, m) = a.dims();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        if profile.weights[i] != 0.0 && !(s[i] > 0.0) {
            return f64::INFINITY;
        }
        for r in 0..m {
            let ak = a.get(i, r);
            let x = profile.demands.get(i, r);
            let (mu, nu) = (sol.mu.get(i, r), sol.nu.get(i, r));
            let st = obj.grad(a, &s, i, r) - mu + nu + sol.lambda[r];
            worst = worst
                .max(st.abs())
                .max(-ak)
                .max(ak - x)
                .max(-mu)
                .max(-nu)
                .max((mu * ak).abs())
                .max((nu * (ak - x)).abs());
        }
    }
    for r in 0..m {
        let slack = a.column_sum(r) - profile.budgets[r];
        worst = worst
            .max(slack)
            .max(-sol.lambda[r])
            .max((sol.lambda[r] * slack).abs());
    }
    worst
}

/// Tight-constraint classification of a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveSetSummary {
    /// Constraints whose slack is below `act_tol`.
    pub tight: usize,
    /// Constraints where slack and dual are both below `act_tol` or both above it.
    pub non_strict: usize,
}

/// Counts tight constraints and strict-complementarity violations.
pub fn active_set_summary(profile: &RequestProfile, sol: &KktSolution, act_tol: f64) -> ActiveSetSummary {
    let a = sol.a_star.matrix();
    let (n, m) = a.dims();
    let mut tight = 0;
    let mut non_strict = 0;
    let mut classify = |slack: f64, dual: f64| {
        let is_tight = slack < act_tol;
        let has_dual = dual > act_tol;
        if is_tight {
            tight += 1;
        }
        if is_tight != has_dual {
            non_strict += 1;
        }
    };
    for i in 0..n {
        for r in 0..m {
            let ak = a.get(i, r);
            classify(ak, sol.mu.get(i, r));
            classify(profile.demands.get(i, r) - ak, sol.nu.get(i, r));
        }
    }
    for r in 0..m {
        classify(profile.budgets[r] - a.column_sum(r), sol.lambda[r]);
    }
    ActiveSetSummary { tight, non_strict }
}

/// Largest `N * M` the brute-force oracle accepts.
pub const ORACLE_MAX_ENTRIES: usize = 12;

/// Slow reference solver: many-restart projected gradient ascent with
/// backtracking, followed by a pattern search over single-entry moves and
/// pairwise transfers. Shares no code with the interior-point path.
pub fn pf_oracle<R: Rng + ?Sized>(
    profile: &RequestProfile,
    z: Option<&AgentMatrix>,
    ridge: f64,
    restarts: usize,
    rng: &mut R,
) -> Result<Allocation> {
    profile.validate()?;
    let (n, m) = profile.values.dims();
    if n * m > ORACLE_MAX_ENTRIES {
        return Err(Error::DimensionTooLarge {
            size: n * m,
            limit: ORACLE_MAX_ENTRIES,
        });
    }
    let zero = AgentMatrix::zeros(n, m);
    let z = z.unwrap_or(&zero);
    let objective = |a: &AgentMatrix| -> f64 {
        let mut f = 0.0;
        for i in 0..n {
            let s: f64 = (0..m).map(|r| profile.values.get(i, r) * a.get(i, r)).sum();
            let w = profile.weights[i];
            if w > 0.0 {
                if s <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                f += w * s.ln();
            }
            for r in 0..m {
                let x = a.get(i, r);
                f -= z.get(i, r) * x + ridge * x * x;
            }
        }
        f
    };
    let gradient = |a: &AgentMatrix| -> AgentMatrix {
        let mut g = AgentMatrix::zeros(n, m);
        for i in 0..n {
            let s: f64 = (0..m).map(|r| profile.values.get(i, r) * a.get(i, r)).sum();
            for r in 0..m {
                let log_term = if profile.weights[i] > 0.0 {
                    profile.weights[i] * profile.values.get(i, r) / s
                } else {
                    0.0
                };
                g.set(i, r, log_term - z.get(i, r) - 2.0 * ridge * a.get(i, r));
            }
        }
        g
    };
    let project = |y: &AgentMatrix| -> AgentMatrix {
        let mut out = AgentMatrix::zeros(n, m);
        for r in 0..m {
            let xs: Vec<f64> = (0..n).map(|i| profile.demands.get(i, r)).collect();
            let ys: Vec<f64> = (0..n).map(|i| y.get(i, r)).collect();
            let col = project_capped_simplex(&ys, &xs, profile.budgets[r]);
            for i in 0..n {
                out.set(i, r, col[i]);
            }
        }
        out
    };

    let mut best: Option<(f64, AgentMatrix)> = None;
    for _ in 0..restarts.max(1) {
        let mut start = AgentMatrix::zeros(n, m);
        for i in 0..n {
            for r in 0..m {
                start.set(i, r, rng.random_range(0.05..1.0) * profile.demands.get(i, r));
            }
        }
        let mut a = project(&start);
        let mut fa = objective(&a);
        if !fa.is_finite() {
            continue;
        }
        let mut step = 0.1;
        for _ in 0..20_000 {
            let g = gradient(&a);
            let mut accepted = false;
            while step > 1e-16 {
                let mut y = a.clone();
                for (yv, gv) in y.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *yv += step * gv;
                }
                let cand = project(&y);
                let fc = objective(&cand);
                let lin: f64 = g
                    .as_slice()
                    .iter()
                    .zip(cand.as_slice().iter().zip(a.as_slice()))
                    .map(|(gv, (c, o))| gv * (c - o))
                    .sum();
                if fc.is_finite() && fc >= fa + 1e-4 * lin {
                    // The pattern search below finishes once progress stalls.
                    accepted = cand.max_abs_diff(&a) > 1e-15 && fc - fa > 1e-14;
                    a = cand;
                    fa = fc;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            step *= 2.0;
        }
        pattern_search(&mut a, &mut fa, profile, &objective);
        if best.as_ref().is_none_or(|(fb, _)| fa > *fb) {
            best = Some((fa, a));
        }
    }
    best.map(|(_, a)| Allocation(a))
        .ok_or_else(|| Error::NumericalFailure("oracle found no finite starting point".into()))
}

fn pattern_search(
    a: &mut AgentMatrix,
    fa: &mut f64,
    profile: &RequestProfile,
    objective: &dyn Fn(&AgentMatrix) -> f64,
) {
    let (n, m) = a.dims();
    let feasible = |c: &AgentMatrix| {
        (0..n).all(|i| (0..m).all(|r| c.get(i, r) >= 0.0 && c.get(i, r) <= profile.demands.get(i, r)))
            && (0..m).all(|r| c.column_sum(r) <= profile.budgets[r] + 1e-15)
    };
    let mut delta = 1e-3;
    while delta > 1e-11 {
        let mut improved = true;
        let mut rounds = 0;
        while improved && rounds < 200 {
            improved = false;
            rounds += 1;
            for r in 0..m {
                for i in 0..n {
                    for sign in [1.0, -1.0] {
                        let mut c = a.clone();
                        c.set(i, r, a.get(i, r) + sign * delta);
                        if feasible(&c) {
                            let fc = objective(&c);
                            if fc > *fa {
                                *a = c;
                                *fa = fc;
                                improved = true;
                            }
                        }
                    }
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let mut c = a.clone();
                        c.set(i, r, a.get(i, r) + delta);
                        c.set(j, r, a.get(j, r) - delta);
                        if feasible(&c) {
                            let fc = objective(&c);
                            if fc > *fa {
                                *a = c;
                                *fa = fc;
                                improved = true;
                            }
                        }
                    }
                }
            }
        }
        delta *= 0.1;
    }
}

/// Euclidean projection of `y` onto `{0 <= a <= cap, sum a <= budget}`.
pub fn project_capped_simplex(y: &[f64], cap: &[f64], budget: f64) -> Vec<f64> {
    let clip = |theta: f64| -> Vec<f64> {
        y.iter()
            .zip(cap)
            .map(|(v, c)| (v - theta).clamp(0.0, *c))
            .collect()
    };
    let direct = clip(0.0);
    if direct.iter().sum::<f64>() <= budget {
        return direct;
    }
    let mut lo = 0.0;
    let mut hi = y.iter().fold(0.0f64, |acc, v| acc.max(*v));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if clip(mid).iter().sum::<f64>() > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    clip(hi)
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
    fn single_agent_takes_everything() {
        let p = RequestProfile::from_rows(&[vec![1.0]], &[vec![1.0]], &[1.0]).unwrap();
        let sol = solve_pf(&p, &cfg()).unwrap();
        assert!((sol.a_star.get(0, 0) - 1.0).abs() < 1e-9);
        assert!(sol.residual <= 1e-9);
    }

    #[test]
    fn identical_agents_split_evenly() {
        let p = RequestProfile::from_rows(
            &[vec![1.0, 1.0], vec![1.0, 1.0]],
            &[vec![1.0, 1.0], vec![1.0, 1.0]],
            &[1.0, 1.0],
        )
        .unwrap();
        let sol = solve_pf(&p, &cfg()).unwrap();
        for i in 0..2 {
            for m in 0..2 {
                assert!((sol.a_star.get(i, m) - 0.5).abs() < 1e-6, "{:?}", sol.a_star);
            }
        }
    }

    #[test]
    fn gaming_example_allocation() {
        let p = RequestProfile::gaming_example();
        let sol = solve_pf(&p, &cfg()).unwrap();
        let expect = [[0.25, 1.0], [0.75, 0.0]];
        for i in 0..2 {
            for m in 0..2 {
                assert!((sol.a_star.get(i, m) - expect[i][m]).abs() < 1e-9);
            }
        }
        assert!(sol.polished);
        assert!(sol.mu.as_slice().iter().all(|v| *v >= 0.0));
        assert!(sol.nu.as_slice().iter().all(|v| *v >= 0.0));
        assert!(sol.lambda.iter().all(|v| *v >= 0.0));
        // Resource 1 is shared at price 1 / u = 4/3.
        assert!((sol.lambda[0] - 4.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_agent_is_infeasible() {
        let p = RequestProfile::from_rows(
            &[vec![1.0, 1.0], vec![1.0, 1.0]],
            &[vec![1.0, 1.0], vec![0.0, 0.0]],
            &[1.0, 1.0],
        )
        .unwrap();
        assert_eq!(solve_pf(&p, &cfg()).unwrap_err(), Error::Infeasible { agent: 1 });
    }

    #[test]
    fn zero_budget_column_is_priced() {
        let p = RequestProfile::from_rows(
            &[vec![1.0, 1.0], vec![0.5, 1.0]],
            &[vec![1.0, 1.0], vec![1.0, 1.0]],
            &[0.0, 1.0],
        )
        .unwrap();
        let sol = solve_pf(&p, &cfg()).unwrap();
        assert_eq!(sol.a_star.get(0, 0), 0.0);
        assert!(sol.residual <= 1e-9);
    }

    #[test]
    fn zero_regularizer_matches_plain() {
        let p = RequestProfile::gaming_example();
        let a = solve_pf(&p, &cfg()).unwrap();
        let b = solve_regularized_pf(&p, &AgentMatrix::zeros(2, 2), &cfg()).unwrap();
        assert!(a.a_star.matrix().max_abs_diff(b.a_star.matrix()) <= 2e-9);
    }

    #[test]
    fn large_regularizer_starves_agent() {
        let p = RequestProfile::gaming_example();
        let mut z = AgentMatrix::zeros(2, 2);
        z.set(0, 0, 50.0);
        z.set(0, 1, 50.0);
        let plain = solve_pf(&p, &cfg()).unwrap().utilities(&p);
        let reg = solve_regularized_pf(&p, &z, &cfg()).unwrap().utilities(&p);
        assert!(reg[0] < plain[0]);
        assert!(reg[0] < 0.05);
        assert!(reg[1] > plain[1]);
    }

    #[test]
    fn projection_respects_caps_and_budget() {
        let out = project_capped_simplex(&[2.0, 0.3, -1.0], &[1.0, 1.0, 1.0], 1.0);
        assert!(out.iter().sum::<f64>() <= 1.0 + 1e-12);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn oracle_single_agent_takes_min_of_demand_and_budget() {
        let p = RequestProfile::from_rows(&[vec![1.0, 0.5, 0.0]], &[vec![0.4, 2.0, 1.0]], &[1.0, 1.0, 1.0])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = pf_oracle(&p, None, 0.0, 4, &mut rng).unwrap();
        assert!((a.get(0, 0) - 0.4).abs() < 1e-6);
        assert!((a.get(0, 1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn oracle_rejects_large_problems() {
        let p = RequestProfile::from_rows(&vec![vec![1.0; 4]; 4], &vec![vec![1.0; 4]; 4], &[1.0; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            pf_oracle(&p, None, 0.0, 1, &mut rng),
            Err(Error::DimensionTooLarge { .. })
        ));
    }

    #[test]
    fn oracle_symmetric_case() {
        let p = RequestProfile::from_rows(
            &[vec![1.0, 1.0], vec![1.0, 1.0]],
            &[vec![1.0, 1.0], vec![1.0, 1.0]],
            &[1.0, 1.0],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = pf_oracle(&p, None, 0.0, 4, &mut rng).unwrap();
        let u = crate::metrics::utility(&a, &p).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-6 && (u[1] - 1.0).abs() < 1e-6);
    }
}
