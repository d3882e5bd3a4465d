//! Implicit differentiation of the (regularized) PF program.
//!
//! The unknown vector is ordered `[da; dmu; dnu; dlambda]` with `da`, `dmu`
//! and `dnu` flattened agent-major. Stationarity is used in its scaled form
//!
//! ```text
//! w_i v_i + s_i * r_i = 0,   s_i = v_i . a_i,
//! r_i = mu_i - nu_i - lambda - z_i - 2 ridge a_i
//! ```
//!
//! so the row blocks read `[M1 | M2 | -M2 | -M3]`, `[diag mu | diag a | 0 | 0]`,
//! `[diag nu | 0 | diag(a - x) | 0]` and `[diag(lambda) D | 0 | 0 | diag(Da - b)]`
//! with `M1` block `i` equal to `r_i v_i^T - 2 ridge s_i I`.
//!
//! Backpropagation solves `M^T g = [dl/da; 0; 0; 0]` and contracts `g` with
//! the parameter derivatives of the residual map. The system is solved by LU
//! when it is well conditioned and by minimum-norm least squares otherwise.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::pfsolve::{active_set_summary, KktSolution};
use crate::profile::{AgentMatrix, RequestProfile};

/// Slack/dual threshold used to decide which constraints are tight.
pub const ACT_TOL: f64 = 1e-6;
/// Condition estimate above which the least-squares path is taken.
pub const COND_LIMIT: f64 = 1e12;

/// Assembled differential KKT system together with the cleaned point it was built at.
#[derive(Debug, Clone)]
pub struct DiffSystem {
    pub matrix: DMatrix<f64>,
    pub n_agents: usize,
    pub n_resources: usize,
    pub a: AgentMatrix,
    pub mu: AgentMatrix,
    pub nu: AgentMatrix,
    pub lambda: Vec<f64>,
    /// `v_i . a_i`.
    pub shares: Vec<f64>,
    /// `mu_i - nu_i - lambda - z_i - 2 ridge a_i`.
    pub r: AgentMatrix,
}

impl DiffSystem {
    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    fn nm(&self) -> usize {
        self.n_agents * self.n_resources
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Differentiability {
    pub differentiable: bool,
    pub tight: usize,
    /// `NM - N`.
    pub required: usize,
}

/// Gradients of a downstream scalar loss with respect to the program inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PfGradients {
    pub d_v: AgentMatrix,
    pub d_x: AgentMatrix,
    pub d_w: Vec<f64>,
    pub d_z: AgentMatrix,
    pub d_b: Vec<f64>,
    /// The minimum-norm least-squares path was used.
    pub least_squares: bool,
    /// 1-norm condition estimate of the factorized system (infinite if LU broke down).
    pub condition: f64,
}

impl PfGradients {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            d_v: AgentMatrix::zeros(n, m),
            d_x: AgentMatrix::zeros(n, m),
            d_w: vec![0.0; n],
            d_z: AgentMatrix::zeros(n, m),
            d_b: vec![0.0; m],
            least_squares: false,
            condition: 1.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_v.is_finite()
            && self.d_x.is_finite()
            && self.d_z.is_finite()
            && self.d_w.iter().all(|v| v.is_finite())
            && self.d_b.iter().all(|v| v.is_finite())
    }
}

/// Snaps complementarity pairs: a pair with slack below `act_tol` and a
/// positive dual becomes exactly tight, a pair with dual below `act_tol`
/// and a clear slack gets a zero dual, and negative duals are clamped.
fn clean_pair(slack: f64, dual: f64, act_tol: f64) -> (f64, f64) {
    let dual = dual.max(0.0);
    if slack < act_tol && dual > act_tol {
        (0.0, dual)
    } else if dual <= act_tol && slack >= act_tol {
        (slack, 0.0)
    } else {
        (slack, dual)
    }
}

pub fn assemble_diff_system(kkt: &KktSolution, profile: &RequestProfile) -> DiffSystem {
    assemble_with_tol(kkt, profile, ACT_TOL)
}

pub fn assemble_with_tol(kkt: &KktSolution, profile: &RequestProfile, act_tol: f64) -> DiffSystem {
    let (n, m) = profile.values.dims();
    let nm = n * m;
    let size = 3 * nm + m;
    let a = kkt.a_star.matrix().clone();
    let ridge = kkt.ridge;
    let idx = |i: usize, r: usize| i * m + r;

    let mut mu = AgentMatrix::zeros(n, m);
    let mut nu = AgentMatrix::zeros(n, m);
    let mut slack_lo = AgentMatrix::zeros(n, m);
    let mut slack_hi = AgentMatrix::zeros(n, m);
    for i in 0..n {
        for r in 0..m {
            let (sl, d) = clean_pair(a.get(i, r), kkt.mu.get(i, r), act_tol);
            slack_lo.set(i, r, sl);
            mu.set(i, r, d);
            let (sh, d) = clean_pair(profile.demands.get(i, r) - a.get(i, r), kkt.nu.get(i, r), act_tol);
            slack_hi.set(i, r, sh);
            nu.set(i, r, d);
        }
    }
    let mut lambda = vec![0.0; m];
    let mut slack_b = vec![0.0; m];
    for r in 0..m {
        let (s, d) = clean_pair(profile.budgets[r] - a.column_sum(r), kkt.lambda[r], act_tol);
        slack_b[r] = s;
        lambda[r] = d;
    }

    let shares: Vec<f64> = (0..n)
        .map(|i| (0..m).map(|r| profile.values.get(i, r) * a.get(i, r)).sum())
        .collect();
    let mut rv = AgentMatrix::zeros(n, m);
    for i in 0..n {
        for r in 0..m {
            let z = kkt.z_used.as_ref().map_or(0.0, |z| z.get(i, r));
            rv.set(
                i,
                r,
                mu.get(i, r) - nu.get(i, r) - lambda[r] - z - 2.0 * ridge * a.get(i, r),
            );
        }
    }

    let mut mat = DMatrix::zeros(size, size);
    for i in 0..n {
        for r in 0..m {
            let row = idx(i, r);
            for q in 0..m {
                mat[(row, idx(i, q))] = rv.get(i, r) * profile.values.get(i, q);
            }
            mat[(row, row)] -= 2.0 * ridge * shares[i];
            mat[(row, nm + row)] = shares[i];
            mat[(row, 2 * nm + row)] = -shares[i];
            mat[(row, 3 * nm + r)] = -shares[i];

            let lo = nm + row;
            mat[(lo, row)] = mu.get(i, r);
            mat[(lo, nm + row)] = slack_lo.get(i, r);

            let hi = 2 * nm + row;
            mat[(hi, row)] = nu.get(i, r);
            mat[(hi, 2 * nm + row)] = -slack_hi.get(i, r);
        }
    }
    for r in 0..m {
        let row = 3 * nm + r;
        for i in 0..n {
            mat[(row, idx(i, r))] = lambda[r];
        }
        mat[(row, row)] = -slack_b[r];
    }

    DiffSystem {
        matrix: mat,
        n_agents: n,
        n_resources: m,
        a,
        mu,
        nu,
        lambda,
        shares,
        r: rv,
    }
}

/// Tight-constraint count and strict-complementarity test at `ACT_TOL`.
pub fn is_differentiable(kkt: &KktSolution, profile: &RequestProfile) -> Differentiability {
    let (n, m) = profile.values.dims();
    let summary = active_set_summary(profile, kkt, ACT_TOL);
    let required = n * m - n;
    Differentiability {
        differentiable: summary.tight >= required && summary.non_strict == 0,
        tight: summary.tight,
        required,
    }
}

fn one_norm(mat: &DMatrix<f64>) -> f64 {
    (0..mat.ncols())
        .map(|j| mat.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Hager's estimate of `|A^{-1}|_1` from solves with `A` and `A^T`.
fn inverse_norm_estimate(
    solve: impl Fn(&DVector<f64>) -> Option<DVector<f64>>,
    solve_t: impl Fn(&DVector<f64>) -> Option<DVector<f64>>,
    n: usize,
) -> Option<f64> {
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut est = 0.0;
    for _ in 0..5 {
        let y = solve(&x)?;
        est = y.iter().map(|v| v.abs()).sum();
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let z = solve_t(&xi)?;
        let (j, zmax) = z
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bj, bv), (k, v)| if v.abs() > bv { (k, v.abs()) } else { (bj, bv) });
        if zmax <= z.dot(&x) {
            break;
        }
        x = DVector::zeros(n);
        x[j] = 1.0;
    }
    Some(est)
}

/// Solves `M^T g = rhs`. Returns the solution, whether least squares was used,
/// and the condition estimate.
pub fn solve_adjoint(
    sys: &DiffSystem,
    rhs: &DVector<f64>,
    force_least_squares: bool,
) -> Result<(DVector<f64>, bool, f64)> {
    let mt = sys.matrix.transpose();
    let n = mt.nrows();
    let mut condition = f64::INFINITY;
    if !force_least_squares {
        let lu_t = mt.clone().lu();
        let lu = sys.matrix.clone().lu();
        if let Some(inv) = inverse_norm_estimate(|b| lu_t.solve(b), |b| lu.solve(b), n) {
            condition = one_norm(&mt) * inv;
            if condition.is_finite() && condition <= COND_LIMIT {
                if let Some(g) = lu_t.solve(rhs) {
                    if g.iter().all(|v| v.is_finite()) {
                        return Ok((g, false, condition));
                    }
                }
            }
        }
    }
    let g = least_norm_solve(&mt, rhs)?;
    Ok((g, true, condition))
}

/// Minimum-norm least-squares solution of `A g = rhs` via SVD.
pub fn least_norm_solve(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10;
    let g = svd
        .solve(rhs, tol)
        .map_err(|e| Error::NumericalFailure(format!("least-squares solve failed: {e}")))?;
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite least-squares solution".into()));
    }
    Ok(g)
}

/// Gradients of `l(a*)` with respect to `v`, `x`, `w`, `z` and `b` given `dl/da*`.
pub fn backprop_pf(kkt: &KktSolution, profile: &RequestProfile, grad_a: &AgentMatrix) -> Result<PfGradients> {
    let (n, m) = profile.values.dims();
    if grad_a.dims() != (n, m) {
        return Err(Error::DimensionMismatch("upstream gradient shape".into()));
    }
    if grad_a.as_slice().iter().all(|v| *v == 0.0) {
        return Ok(PfGradients::zeros(n, m));
    }
    let sys = assemble_diff_system(kkt, profile);
    let diff = is_differentiable(kkt, profile);
    let mut rhs = DVector::zeros(sys.size());
    for (k, g) in grad_a.as_slice().iter().enumerate() {
        rhs[k] = *g;
    }
    let (g, least_squares, condition) = solve_adjoint(&sys, &rhs, !diff.differentiable)?;
    Ok(contract(&sys, profile, &g, least_squares, condition))
}

/// Maps the adjoint vector to parameter gradients.
pub fn contract(
    sys: &DiffSystem,
    profile: &RequestProfile,
    g: &DVector<f64>,
    least_squares: bool,
    condition: f64,
) -> PfGradients {
    let (n, m) = (sys.n_agents, sys.n_resources);
    let nm = sys.nm();
    let mut out = PfGradients::zeros(n, m);
    out.least_squares = least_squares;
    out.condition = condition;
    for i in 0..n {
        let ga = |r: usize| g[i * m + r];
        let r_dot_g: f64 = (0..m).map(|r| sys.r.get(i, r) * ga(r)).sum();
        let v_dot_g: f64 = (0..m).map(|r| profile.values.get(i, r) * ga(r)).sum();
        out.d_w[i] = -v_dot_g;
        for r in 0..m {
            let k = i * m + r;
            out.d_v.set(i, r, -profile.weights[i] * ga(r) - sys.a.get(i, r) * r_dot_g);
            out.d_x.set(i, r, sys.nu.get(i, r) * g[2 * nm + k]);
            out.d_z.set(i, r, sys.shares[i] * ga(r));
        }
    }
    for r in 0..m {
        out.d_b[r] = sys.lambda[r] * g[3 * nm + r];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pfsolve::{solve_pf, solve_regularized_pf, SolverConfig};

    #[test]
    fn single_saturated_agent_structure() {
        let p = RequestProfile::from_rows(&[vec![1.0]], &[vec![1.0]], &[1.0]).unwrap();
        let kkt = solve_pf(&p, &SolverConfig::default()).unwrap();
        let sys = assemble_diff_system(&kkt, &p);
        assert_eq!(sys.size(), 4);
        assert!((sys.matrix[(0, 1)] - 1.0).abs() < 1e-9);
        assert!((sys.matrix[(0, 2)] + 1.0).abs() < 1e-9);
        assert_eq!(sys.mu.get(0, 0), 0.0);
    }

    #[test]
    fn zero_regularizer_assembles_identically() {
        let p = RequestProfile::gaming_example();
        let cfg = SolverConfig::default();
        let plain = solve_pf(&p, &cfg).unwrap();
        let mut reg = solve_regularized_pf(&p, &AgentMatrix::zeros(2, 2), &cfg).unwrap();
        reg.a_star = plain.a_star.clone();
        reg.mu = plain.mu.clone();
        reg.nu = plain.nu.clone();
        reg.lambda = plain.lambda.clone();
        let a = assemble_diff_system(&plain, &p);
        let b = assemble_diff_system(&reg, &p);
        assert_eq!(a.matrix, b.matrix);
    }

    #[test]
    fn gaming_example_is_differentiable() {
        let p = RequestProfile::gaming_example();
        let kkt = solve_pf(&p, &SolverConfig::default()).unwrap();
        let d = is_differentiable(&kkt, &p);
        assert_eq!(d.tight, 4);
        assert_eq!(d.required, 2);
        assert!(d.differentiable);
    }

    #[test]
    fn zero_upstream_gradient() {
        let p = RequestProfile::gaming_example();
        let kkt = solve_pf(&p, &SolverConfig::default()).unwrap();
        let g = backprop_pf(&kkt, &p, &AgentMatrix::zeros(2, 2)).unwrap();
        assert_eq!(g, PfGradients::zeros(2, 2));
    }

    #[test]
    fn saturated_agent_has_no_value_sensitivity() {
        let p = RequestProfile::from_rows(&[vec![0.7, 0.4]], &[vec![1.0, 1.0]], &[5.0, 5.0]).unwrap();
        let kkt = solve_pf(&p, &SolverConfig::default()).unwrap();
        let g = backprop_pf(&kkt, &p, &AgentMatrix::filled(1, 2, 1.0)).unwrap();
        assert!(g.d_v.as_slice().iter().all(|v| v.abs() < 1e-9), "{:?}", g.d_v);
        assert!(g.d_x.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-9), "{:?}", g.d_x);
    }

    #[test]
    fn least_norm_on_rank_deficient_consistent_system() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 1.0, 0.0, 1.0]);
        let rhs = DVector::from_vec(vec![1.0, 2.0, 0.5]);
        let g = least_norm_solve(&a, &rhs).unwrap();
        assert!((&a * &g - &rhs).norm() < 1e-10);
    }
}
