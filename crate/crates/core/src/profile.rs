//! Domain types: problem dimensions, report bounds, request profiles and allocations.
//!
//! Every per-agent, per-resource quantity is stored agent-major, so the flat
//! index of `(i, m)` is `i * n_resources + m`. That is the stacking
//! `a = [a_1; ...; a_N]` used by the differential KKT system.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemDims {
    pub n_agents: usize,
    pub n_resources: usize,
}

impl ProblemDims {
    pub fn new(n_agents: usize, n_resources: usize) -> Result<Self> {
        if n_agents == 0 || n_resources == 0 {
            return Err(Error::InvalidInput(format!(
                "dimensions must be positive, got {n_agents}x{n_resources}"
            )));
        }
        Ok(Self {
            n_agents,
            n_resources,
        })
    }

    /// Number of allocation entries, `N * M`.
    pub fn len(&self) -> usize {
        self.n_agents * self.n_resources
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Length of the flat `(v, x, b)` network input.
    pub fn input_len(&self) -> usize {
        2 * self.len() + self.n_resources
    }
}

impl std::fmt::Display for ProblemDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.n_agents, self.n_resources)
    }
}

/// Box of admissible reports: values in `[v_lo, v_hi]`, demands in `[d_lo, d_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub v_lo: f64,
    pub v_hi: f64,
    pub d_lo: f64,
    pub d_hi: f64,
}

impl Bounds {
    pub fn new(v_lo: f64, v_hi: f64, d_lo: f64, d_hi: f64) -> Result<Self> {
        let b = Self {
            v_lo,
            v_hi,
            d_lo,
            d_hi,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.v_lo, self.v_hi, self.d_lo, self.d_hi];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("bounds must be finite".into()));
        }
        if !(self.v_lo > 0.0 && self.v_lo <= self.v_hi) {
            return Err(Error::InvalidInput(format!(
                "value bounds need 0 < v_lo <= v_hi, got [{}, {}]",
                self.v_lo, self.v_hi
            )));
        }
        if !(self.d_lo >= 0.0 && self.d_lo <= self.d_hi) {
            return Err(Error::InvalidInput(format!(
                "demand bounds need 0 <= d_lo <= d_hi, got [{}, {}]",
                self.d_lo, self.d_hi
            )));
        }
        Ok(())
    }

    pub fn clamp_value(&self, v: f64) -> f64 {
        v.clamp(self.v_lo, self.v_hi)
    }

    pub fn clamp_demand(&self, x: f64) -> f64 {
        x.clamp(self.d_lo, self.d_hi)
    }
}

impl Default for Bounds {
    /// The synthetic data range: values in `[0.1, 1]`, demands in `[0, 1]`.
    fn default() -> Self {
        Self {
            v_lo: 0.1,
            v_hi: 1.0,
            d_lo: 0.0,
            d_hi: 1.0,
        }
    }
}

/// Dense `N x M` matrix stored agent-major. Serializes as nested arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentMatrix {
    n_agents: usize,
    n_resources: usize,
    data: Vec<f64>,
}

impl AgentMatrix {
    pub fn zeros(n_agents: usize, n_resources: usize) -> Self {
        Self::filled(n_agents, n_resources, 0.0)
    }

    pub fn filled(n_agents: usize, n_resources: usize, value: f64) -> Self {
        Self {
            n_agents,
            n_resources,
            data: vec![value; n_agents * n_resources],
        }
    }

    pub fn from_flat(n_agents: usize, n_resources: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_agents * n_resources {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries for {}x{}, got {}",
                n_agents * n_resources,
                n_agents,
                n_resources,
                data.len()
            )));
        }
        Ok(Self {
            n_agents,
            n_resources,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Ok(Self {
            n_agents: n,
            n_resources: m,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_resources(&self) -> usize {
        self.n_resources
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_agents, self.n_resources)
    }

    #[inline]
    pub fn get(&self, i: usize, m: usize) -> f64 {
        self.data[i * self.n_resources + m]
    }

    #[inline]
    pub fn set(&mut self, i: usize, m: usize, value: f64) {
        self.data[i * self.n_resources + m] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_resources..(i + 1) * self.n_resources]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_resources..(i + 1) * self.n_resources]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column_sum(&self, m: usize) -> f64 {
        (0..self.n_agents).map(|i| self.get(i, m)).sum()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_agents).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn max_abs_diff(&self, other: &AgentMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Serialize for AgentMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AgentMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        AgentMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// One allocation instance: what every agent reports plus the supplier's budgets and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestProfile {
    pub values: AgentMatrix,
    pub demands: AgentMatrix,
    pub budgets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RequestProfile {
    pub fn new(
        values: AgentMatrix,
        demands: AgentMatrix,
        budgets: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let p = Self {
            values,
            demands,
            budgets,
            weights,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds a profile from nested rows with unit weights.
    pub fn from_rows(values: &[Vec<f64>], demands: &[Vec<f64>], budgets: &[f64]) -> Result<Self> {
        let values = AgentMatrix::from_rows(values)?;
        let n = values.n_agents();
        Self::new(
            values,
            AgentMatrix::from_rows(demands)?,
            budgets.to_vec(),
            vec![1.0; n],
        )
    }

    /// Two agents competing for two unit resources, both preferring the first:
    /// `v1 = (1, 1/2)`, `v2 = (1, 1/4)`, unit demands, budgets and weights.
    pub fn gaming_example() -> Self {
        Self::from_rows(
            &[vec![1.0, 0.5], vec![1.0, 0.25]],
            &[vec![1.0, 1.0], vec![1.0, 1.0]],
            &[1.0, 1.0],
        )
        .expect("static profile is valid")
    }

    pub fn dims(&self) -> ProblemDims {
        ProblemDims {
            n_agents: self.values.n_agents(),
            n_resources: self.values.n_resources(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.values.n_agents()
    }

    pub fn n_resources(&self) -> usize {
        self.values.n_resources()
    }

    /// Shape and sign checks. Bounds membership is checked separately by [`Self::within`].
    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.values.dims();
        if n == 0 || m == 0 {
            return Err(Error::InvalidInput("profile has no agents or no resources".into()));
        }
        if self.demands.dims() != (n, m) {
            return Err(Error::DimensionMismatch(format!(
                "values are {}x{} but demands are {}x{}",
                n,
                m,
                self.demands.n_agents(),
                self.demands.n_resources()
            )));
        }
        if self.budgets.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "{} resources but {} budgets",
                m,
                self.budgets.len()
            )));
        }
        if self.weights.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} agents but {} weights",
                n,
                self.weights.len()
            )));
        }
        let finite_nonneg = |xs: &[f64]| xs.iter().all(|x| x.is_finite() && *x >= 0.0);
        if !finite_nonneg(self.values.as_slice()) {
            return Err(Error::InvalidInput("values must be finite and nonnegative".into()));
        }
        if !finite_nonneg(self.demands.as_slice()) {
            return Err(Error::InvalidInput("demands must be finite and nonnegative".into()));
        }
        if !finite_nonneg(&self.budgets) {
            return Err(Error::InvalidInput("budgets must be finite and nonnegative".into()));
        }
        if !finite_nonneg(&self.weights) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// True when every value and demand lies inside `bounds`.
    pub fn within(&self, bounds: &Bounds) -> bool {
        self.values
            .as_slice()
            .iter()
            .all(|v| *v >= bounds.v_lo && *v <= bounds.v_hi)
            && self
                .demands
                .as_slice()
                .iter()
                .all(|x| *x >= bounds.d_lo && *x <= bounds.d_hi)
    }

    /// Largest utility agent `i` could ever get: `sum_m v_im * x_im`.
    pub fn max_utility(&self, i: usize) -> f64 {
        self.values
            .row(i)
            .iter()
            .zip(self.demands.row(i))
            .map(|(v, x)| v * x)
            .sum()
    }

    /// Copy of this profile with agent `i`'s report replaced.
    pub fn with_report(&self, i: usize, values: &[f64], demands: &[f64]) -> Self {
        let mut p = self.clone();
        p.values.row_mut(i).copy_from_slice(values);
        p.demands.row_mut(i).copy_from_slice(demands);
        p
    }

    /// Profile restricted to every agent except `i`.
    pub fn without_agent(&self, i: usize) -> Self {
        let keep: Vec<usize> = (0..self.n_agents()).filter(|&j| j != i).collect();
        let pick = |mat: &AgentMatrix| {
            let rows: Vec<Vec<f64>> = keep.iter().map(|&j| mat.row(j).to_vec()).collect();
            AgentMatrix::from_rows(&rows).expect("rows share a length")
        };
        Self {
            values: pick(&self.values),
            demands: pick(&self.demands),
            budgets: self.budgets.clone(),
            weights: keep.iter().map(|&j| self.weights[j]).collect(),
        }
    }

    /// Network input `(v, x, b)` flattened.
    pub fn network_input(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.dims().input_len());
        s.extend_from_slice(self.values.as_slice());
        s.extend_from_slice(self.demands.as_slice());
        s.extend_from_slice(&self.budgets);
        s
    }
}

/// Allocated units per agent and resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Allocation(pub AgentMatrix);

impl Allocation {
    pub fn zeros(dims: ProblemDims) -> Self {
        Allocation(AgentMatrix::zeros(dims.n_agents, dims.n_resources))
    }

    pub fn matrix(&self) -> &AgentMatrix {
        &self.0
    }

    pub fn get(&self, i: usize, m: usize) -> f64 {
        self.0.get(i, m)
    }

    pub fn dims(&self) -> ProblemDims {
        ProblemDims {
            n_agents: self.0.n_agents(),
            n_resources: self.0.n_resources(),
        }
    }

    /// Checks `0 <= a <= x` and `sum_i a_im <= b_m + feas_tol`.
    pub fn check_feasible(&self, profile: &RequestProfile, feas_tol: f64) -> Result<()> {
        if self.0.dims() != profile.values.dims() {
            return Err(Error::DimensionMismatch("allocation and profile shapes differ".into()));
        }
        for i in 0..profile.n_agents() {
            for m in 0..profile.n_resources() {
                let a = self.get(i, m);
                let x = profile.demands.get(i, m);
                if !a.is_finite() || a < -feas_tol || a > x + feas_tol {
                    return Err(Error::InvalidInput(format!(
                        "a[{i},{m}] = {a} outside [0, {x}]"
                    )));
                }
            }
        }
        for (m, b) in profile.budgets.iter().enumerate() {
            let used = self.0.column_sum(m);
            if used > b + feas_tol {
                return Err(Error::InvalidInput(format!(
                    "resource {m} over-allocated: {used} > {b}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_feasible(&self, profile: &RequestProfile, feas_tol: f64) -> bool {
        self.check_feasible(profile, feas_tol).is_ok()
    }

    /// Clips tiny solver overshoots back into `[0, x]` and scales columns onto the budget.
    pub fn clipped_to(mut self, profile: &RequestProfile) -> Self {
        let (n, m) = self.0.dims();
        for i in 0..n {
            for r in 0..m {
                let v = self.0.get(i, r).clamp(0.0, profile.demands.get(i, r));
                self.0.set(i, r, v);
            }
        }
        for r in 0..m {
            let used = self.0.column_sum(r);
            let b = profile.budgets[r];
            if used > b && used > 0.0 {
                let s = b / used;
                for i in 0..n {
                    let v = self.0.get(i, r) * s;
                    self.0.set(i, r, v);
                }
            }
        }
        self
    }
}
