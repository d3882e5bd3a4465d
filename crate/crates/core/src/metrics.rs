//! Welfare and efficiency metrics.

use crate::error::{Error, Result};
use crate::profile::{Allocation, AgentMatrix, RequestProfile};

/// Floor applied to utilities before taking logs inside training losses only.
pub const TRAIN_UTILITY_FLOOR: f64 = 1e-12;

fn check_dims(a: &Allocation, profile: &RequestProfile) -> Result<()> {
    if a.matrix().dims() != profile.values.dims() {
        return Err(Error::DimensionMismatch(format!(
            "allocation is {} but profile is {}",
            a.dims(),
            profile.dims()
        )));
    }
    Ok(())
}

/// `u_i = sum_m v_im * min(a_im, x_im)`.
pub fn utility(a: &Allocation, profile: &RequestProfile) -> Result<Vec<f64>> {
    check_dims(a, profile)?;
    Ok((0..profile.n_agents())
        .map(|i| agent_utility(a.matrix().row(i), profile.values.row(i), profile.demands.row(i)))
        .collect())
}

/// Utility of one agent's bundle under the given values and demands.
pub fn agent_utility(bundle: &[f64], values: &[f64], demands: &[f64]) -> f64 {
    bundle
        .iter()
        .zip(values)
        .zip(demands)
        .map(|((a, v), x)| v * a.min(*x).max(0.0))
        .sum()
}

/// Gradient of [`agent_utility`] with respect to the bundle.
///
/// At the cap `a = x` the one-sided derivative for increases (zero) is used.
pub fn agent_utility_grad(bundle: &[f64], values: &[f64], demands: &[f64]) -> Vec<f64> {
    bundle
        .iter()
        .zip(values)
        .zip(demands)
        .map(|((a, v), x)| if a < x { *v } else { 0.0 })
        .collect()
}

/// `sum_i w_i log u_i`. Fails if a positively weighted agent has zero utility.
pub fn log_nsw(a: &Allocation, profile: &RequestProfile) -> Result<f64> {
    let u = utility(a, profile)?;
    log_nsw_of_utilities(&u, &profile.weights)
}

pub fn log_nsw_of_utilities(u: &[f64], weights: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (ui, wi)) in u.iter().zip(weights).enumerate() {
        if *wi == 0.0 {
            continue;
        }
        if *ui <= 0.0 {
            return Err(Error::NonpositiveUtility {
                agent: i,
                utility: *ui,
            });
        }
        total += wi * ui.ln();
    }
    Ok(total)
}

/// Product of utilities raised to the agent weights.
pub fn nsw(a: &Allocation, profile: &RequestProfile) -> Result<f64> {
    log_nsw(a, profile).map(f64::exp)
}

/// NSW that reports zero instead of failing when some agent gets nothing.
pub fn nsw_or_zero(a: &Allocation, profile: &RequestProfile) -> Result<f64> {
    match nsw(a, profile) {
        Ok(v) => Ok(v),
        Err(Error::NonpositiveUtility { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Floored log NSW used by training losses, with its gradient with respect to `u`.
pub fn floored_log_nsw(u: &[f64], weights: &[f64]) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(u.len());
    for (ui, wi) in u.iter().zip(weights) {
        let uc = ui.max(TRAIN_UTILITY_FLOOR);
        total += wi * uc.ln();
        grad.push(if *ui > TRAIN_UTILITY_FLOOR { wi / uc } else { 0.0 });
    }
    (total, grad)
}

/// Fraction of the total budget that was handed out.
pub fn efficiency(a: &Allocation, profile: &RequestProfile) -> Result<f64> {
    check_dims(a, profile)?;
    let total_budget: f64 = profile.budgets.iter().sum();
    if total_budget <= 0.0 {
        return Err(Error::ZeroBudget);
    }
    let used: f64 = a.matrix().as_slice().iter().sum();
    Ok(used / total_budget)
}

/// Gradient of `sum_i coef_i * u_i(a)` with respect to `a`.
pub fn weighted_utility_grad(a: &Allocation, profile: &RequestProfile, coef: &[f64]) -> AgentMatrix {
    let (n, m) = profile.values.dims();
    let mut g = AgentMatrix::zeros(n, m);
    for i in 0..n {
        if coef[i] == 0.0 {
            continue;
        }
        let gi = agent_utility_grad(a.matrix().row(i), profile.values.row(i), profile.demands.row(i));
        for (r, gv) in gi.into_iter().enumerate() {
            g.set(i, r, coef[i] * gv);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alloc(rows: &[Vec<f64>]) -> Allocation {
        Allocation(AgentMatrix::from_rows(rows).unwrap())
    }

    #[test]
    fn zero_allocation_gives_zero_utility() {
        let p = RequestProfile::gaming_example();
        let u = utility(&Allocation::zeros(p.dims()), &p).unwrap();
        assert_eq!(u, vec![0.0, 0.0]);
        assert_eq!(efficiency(&Allocation::zeros(p.dims()), &p).unwrap(), 0.0);
    }

    #[test]
    fn single_agent_identity() {
        let p = RequestProfile::from_rows(&[vec![1.0]], &[vec![1.0]], &[1.0]).unwrap();
        assert_eq!(utility(&alloc(&[vec![1.0]]), &p).unwrap(), vec![1.0]);
    }

    #[test]
    fn gaming_example_metrics() {
        let p = RequestProfile::gaming_example();
        let a = alloc(&[vec![0.25, 1.0], vec![0.75, 0.0]]);
        let u = utility(&a, &p).unwrap();
        assert!((u[0] - 0.75).abs() < 1e-15 && (u[1] - 0.75).abs() < 1e-15);
        assert!((nsw(&a, &p).unwrap() - 0.5625).abs() < 1e-12);
        assert!((efficiency(&a, &p).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_nsw_analytic() {
        assert_eq!(log_nsw_of_utilities(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        let v = log_nsw_of_utilities(&[std::f64::consts::E, 1.0], &[2.0, 1.0]).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_utility_is_an_error_unless_weight_is_zero() {
        assert!(matches!(
            log_nsw_of_utilities(&[0.0, 1.0], &[1.0, 1.0]),
            Err(Error::NonpositiveUtility { agent: 0, .. })
        ));
        assert_eq!(log_nsw_of_utilities(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn utility_saturates_at_demand() {
        let p = RequestProfile::from_rows(&[vec![2.0]], &[vec![0.5]], &[1.0]).unwrap();
        let u1 = utility(&alloc(&[vec![0.5]]), &p).unwrap()[0];
        let u2 = utility(&alloc(&[vec![0.9]]), &p).unwrap()[0];
        assert_eq!(u1, 1.0);
        assert_eq!(u1, u2);
    }

    #[test]
    fn zero_budget_is_rejected() {
        let p = RequestProfile::from_rows(&[vec![1.0]], &[vec![1.0]], &[0.0]).unwrap();
        assert_eq!(
            efficiency(&alloc(&[vec![0.0]]), &p),
            Err(Error::ZeroBudget)
        );
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = RequestProfile::gaming_example();
        assert!(matches!(
            utility(&alloc(&[vec![0.0]]), &p),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn profile_json_round_trip() {
        let p = RequestProfile::gaming_example();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"values\":[[1.0,0.5],[1.0,0.25]]"));
        let q: RequestProfile = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
    }
}
