//! Synthetic request profiles.
//!
//! Values are drawn independently per entry. A demand is the product of a
//! magnitude draw and a Bernoulli mask, so roughly half the entries are zero
//! under the default mask probability. The budget of every resource defaults
//! to `N / 2`.

use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{AgentMatrix, ProblemDims, RequestProfile};

/// Rejected draws allowed per profile before giving up.
pub const MAX_RESAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ValueDist {
    /// `Unif(lo, hi)`.
    Uniform { lo: f64, hi: f64 },
    /// `0.9 * Beta(alpha, beta) + 0.1`, supported on `[0.1, 1]`.
    ScaledBeta { alpha: f64, beta: f64 },
}

impl Default for ValueDist {
    fn default() -> Self {
        ValueDist::Uniform { lo: 0.1, hi: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DemandDist {
    /// `Unif(lo, hi) * Bernoulli(p)`.
    BernoulliUniform { p: f64, lo: f64, hi: f64 },
    /// `(0.9 * Beta(alpha, beta) + 0.1) * Bernoulli(p)`.
    ScaledBetaMasked { alpha: f64, beta: f64, p: f64 },
}

impl Default for DemandDist {
    fn default() -> Self {
        DemandDist::BernoulliUniform {
            p: 0.5,
            lo: 0.1,
            hi: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BudgetMode {
    /// The same budget for every resource. `None` means `N / 2`.
    PerResource { value: Option<f64> },
    Fixed { budgets: Vec<f64> },
}

impl Default for BudgetMode {
    fn default() -> Self {
        BudgetMode::PerResource { value: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub dims: ProblemDims,
    #[serde(default)]
    pub budget_mode: BudgetMode,
    #[serde(default)]
    pub value_dist: ValueDist,
    #[serde(default)]
    pub demand_dist: DemandDist,
    /// `None` means unit weights.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

impl DataSpec {
    pub fn new(dims: ProblemDims) -> Self {
        Self {
            dims,
            budget_mode: BudgetMode::default(),
            value_dist: ValueDist::default(),
            demand_dist: DemandDist::default(),
            weights: None,
            seed: 0,
        }
    }

    /// Uniform spec with both value and demand magnitudes replaced by the scaled beta family.
    pub fn scaled_beta(dims: ProblemDims, alpha: f64, beta: f64) -> Self {
        Self {
            value_dist: ValueDist::ScaledBeta { alpha, beta },
            demand_dist: DemandDist::ScaledBetaMasked { alpha, beta, p: 0.5 },
            ..Self::new(dims)
        }
    }

    pub fn with_budget(mut self, budget: f64) -> Self {
        self.budget_mode = BudgetMode::PerResource { value: Some(budget) };
        self
    }

    pub fn budgets(&self) -> Vec<f64> {
        let m = self.dims.n_resources;
        match &self.budget_mode {
            BudgetMode::PerResource { value } => {
                vec![value.unwrap_or(self.dims.n_agents as f64 / 2.0); m]
            }
            BudgetMode::Fixed { budgets } => budgets.clone(),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.weights
            .clone()
            .unwrap_or_else(|| vec![1.0; self.dims.n_agents])
    }

    pub fn validate(&self) -> Result<()> {
        ProblemDims::new(self.dims.n_agents, self.dims.n_resources)?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match self.value_dist {
            ValueDist::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi) {
                    return bad(format!("uniform value range [{lo}, {hi}] is invalid"));
                }
            }
            ValueDist::ScaledBeta { alpha, beta } => {
                if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
                    return bad(format!("beta parameters ({alpha}, {beta}) must be positive"));
                }
            }
        }
        let p = match self.demand_dist {
            DemandDist::BernoulliUniform { p, lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi) {
                    return bad(format!("uniform demand range [{lo}, {hi}] is invalid"));
                }
                p
            }
            DemandDist::ScaledBetaMasked { alpha, beta, p } => {
                if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
                    return bad(format!("beta parameters ({alpha}, {beta}) must be positive"));
                }
                p
            }
        };
        if !(0.0..=1.0).contains(&p) {
            return bad(format!("mask probability {p} is outside [0, 1]"));
        }
        if p == 0.0 {
            return bad("mask probability 0 makes every demand zero".into());
        }
        let budgets = self.budgets();
        if budgets.len() != self.dims.n_resources {
            return bad(format!(
                "{} budgets for {} resources",
                budgets.len(),
                self.dims.n_resources
            ));
        }
        if budgets.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return bad("budgets must be finite and nonnegative".into());
        }
        if budgets.iter().all(|b| *b == 0.0) {
            return Err(Error::ZeroBudget);
        }
        let w = self.weights();
        if w.len() != self.dims.n_agents || w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("weights must be finite, nonnegative and one per agent".into());
        }
        Ok(())
    }
}

struct Samplers {
    value: Sampler,
    magnitude: Sampler,
    p: f64,
}

enum Sampler {
    Uniform(f64, f64),
    ScaledBeta(Beta<f64>),
}

impl Sampler {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Sampler::Uniform(lo, hi) => rng.random_range(*lo..*hi),
            Sampler::ScaledBeta(b) => 0.9 * b.sample(rng) + 0.1,
        }
    }

    fn beta(alpha: f64, beta: f64) -> Result<Self> {
        Beta::new(alpha, beta)
            .map(Sampler::ScaledBeta)
            .map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

impl Samplers {
    fn new(spec: &DataSpec) -> Result<Self> {
        let value = match spec.value_dist {
            ValueDist::Uniform { lo, hi } => Sampler::Uniform(lo, hi),
            ValueDist::ScaledBeta { alpha, beta } => Sampler::beta(alpha, beta)?,
        };
        let (magnitude, p) = match spec.demand_dist {
            DemandDist::BernoulliUniform { p, lo, hi } => (Sampler::Uniform(lo, hi), p),
            DemandDist::ScaledBetaMasked { alpha, beta, p } => (Sampler::beta(alpha, beta)?, p),
        };
        Ok(Self { value, magnitude, p })
    }

    fn draw_row<R: Rng + ?Sized>(&self, m: usize, rng: &mut R, v: &mut [f64], x: &mut [f64]) {
        for k in 0..m {
            v[k] = self.value.draw(rng);
            let mag = self.magnitude.draw(rng);
            x[k] = if rng.random_bool(self.p) { mag } else { 0.0 };
        }
    }
}

fn reachable(v: &[f64], x: &[f64], budgets: &[f64]) -> bool {
    v.iter()
        .zip(x)
        .zip(budgets)
        .any(|((v, x), b)| *v > 0.0 && *x > 0.0 && *b > 0.0)
}

/// One profile together with the number of rejected agent rows it took.
pub fn sample_profile_counted<R: Rng + ?Sized>(spec: &DataSpec, rng: &mut R) -> Result<(RequestProfile, usize)> {
    spec.validate()?;
    let samplers = Samplers::new(spec)?;
    let ProblemDims {
        n_agents: n,
        n_resources: m,
    } = spec.dims;
    let budgets = spec.budgets();
    let weights = spec.weights();
    let mut values = AgentMatrix::zeros(n, m);
    let mut demands = AgentMatrix::zeros(n, m);
    let mut rejected = 0;
    for i in 0..n {
        loop {
            samplers.draw_row(m, rng, values.row_mut(i), demands.row_mut(i));
            // Zero-weight agents do not enter the log objective, so they need no positive utility.
            if weights[i] == 0.0 || reachable(values.row(i), demands.row(i), &budgets) {
                break;
            }
            rejected += 1;
            if rejected >= MAX_RESAMPLES {
                return Err(Error::ResampleLimitExceeded { attempts: rejected });
            }
        }
    }
    if rejected > 0 {
        log::debug!("resampled {rejected} degenerate agent rows");
    }
    let p = RequestProfile::new(values, demands, budgets, weights)?;
    Ok((p, rejected))
}

pub fn sample_profile<R: Rng + ?Sized>(spec: &DataSpec, rng: &mut R) -> Result<RequestProfile> {
    sample_profile_counted(spec, rng).map(|(p, _)| p)
}

/// `count` independent profiles drawn sequentially from `rng`.
pub fn sample_batch<R: Rng + ?Sized>(spec: &DataSpec, count: usize, rng: &mut R) -> Result<Vec<RequestProfile>> {
    let mut total_rejected = 0;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (p, r) = sample_profile_counted(spec, rng)?;
        total_rejected += r;
        out.push(p);
    }
    if total_rejected > 0 {
        log::info!("batch of {count}: {total_rejected} agent rows resampled");
    }
    Ok(out)
}

/// A batch on disk, carrying the spec and seed it was drawn with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFile {
    pub spec: DataSpec,
    pub seed: u64,
    pub profiles: Vec<RequestProfile>,
}

impl BatchFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let batch: BatchFile = serde_json::from_str(&text)?;
        for p in &batch.profiles {
            p.validate()?;
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec22() -> DataSpec {
        DataSpec::new(ProblemDims::new(2, 2).unwrap())
    }

    #[test]
    fn default_budget_is_half_the_agent_count() {
        let spec = DataSpec::new(ProblemDims::new(5, 3).unwrap());
        assert_eq!(spec.budgets(), vec![2.5; 3]);
        assert_eq!(spec.clone().with_budget(0.75).budgets(), vec![0.75; 3]);
    }

    #[test]
    fn every_agent_can_reach_positive_utility() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = DataSpec::new(ProblemDims::new(3, 1).unwrap());
        for _ in 0..500 {
            let p = sample_profile(&spec, &mut rng).unwrap();
            for i in 0..3 {
                assert!(p.max_utility(i) > 0.0);
            }
        }
    }

    #[test]
    fn single_resource_rejection_is_counted() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = DataSpec::new(ProblemDims::new(4, 1).unwrap());
        let total: usize = (0..200)
            .map(|_| sample_profile_counted(&spec, &mut rng).unwrap().1)
            .sum();
        // Each row is rejected with probability 1/2, so about N rejections per profile.
        assert!(total > 400 && total < 1200, "{total}");
    }

    #[test]
    fn gives_up_when_no_row_is_acceptable() {
        let mut spec = spec22();
        spec.budget_mode = BudgetMode::Fixed {
            budgets: vec![1.0, 0.0],
        };
        spec.demand_dist = DemandDist::BernoulliUniform {
            p: 1e-9,
            lo: 0.1,
            hi: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_profile(&spec, &mut rng).unwrap_err(),
            Error::ResampleLimitExceeded {
                attempts: MAX_RESAMPLES
            }
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec22();
        s.demand_dist = DemandDist::BernoulliUniform {
            p: 1.5,
            lo: 0.1,
            hi: 1.0,
        };
        assert!(s.validate().is_err());
        let s = DataSpec::scaled_beta(ProblemDims::new(2, 2).unwrap(), 0.0, 1.0);
        assert!(s.validate().is_err());
        let s = spec22().with_budget(0.0);
        assert_eq!(s.validate().unwrap_err(), Error::ZeroBudget);
    }

    #[test]
    fn empty_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(&spec22(), 0, &mut rng).unwrap().is_empty());
    }
}
