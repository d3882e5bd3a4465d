#![allow(dead_code)]

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use fairmech::datagen::{sample_profile, DataSpec};
use fairmech::pfsolve::{solve_regularized_pf, SolverConfig};
use fairmech::{AgentMatrix, ProblemDims, RequestProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dims(n: usize, m: usize) -> ProblemDims {
    ProblemDims::new(n, m).unwrap()
}

/// Profile from the default training distribution.
pub fn draw(n: usize, m: usize, rng: &mut ChaCha8Rng) -> RequestProfile {
    sample_profile(&DataSpec::new(dims(n, m)), rng).unwrap()
}

/// Profile with strictly positive demands, random budgets and random weights.
pub fn draw_dense(n: usize, m: usize, rng: &mut ChaCha8Rng, random_weights: bool) -> RequestProfile {
    let mat = |rng: &mut ChaCha8Rng| {
        AgentMatrix::from_flat(n, m, (0..n * m).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap()
    };
    let values = mat(rng);
    let demands = mat(rng);
    let budgets = (0..m).map(|_| rng.random_range(0.3..1.5)).collect();
    let weights = if random_weights {
        (0..n).map(|_| rng.random_range(0.5..2.0)).collect()
    } else {
        vec![1.0; n]
    };
    RequestProfile::new(values, demands, budgets, weights).unwrap()
}

pub fn random_z(n: usize, m: usize, scale: f64, rng: &mut ChaCha8Rng) -> AgentMatrix {
    AgentMatrix::from_flat(n, m, (0..n * m).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    if xs.is_empty() {
        return 0.0;
    }
    xs[xs.len() / 2]
}

/// Central difference of `f` at `x` along coordinate perturbation `h`.
pub fn central<F: FnMut(f64) -> f64>(mut f: F, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// `<g, a*(profile, z)>` for the (regularized) PF program.
pub fn pf_loss(profile: &RequestProfile, z: &AgentMatrix, g: &AgentMatrix, cfg: &SolverConfig) -> f64 {
    let a = solve_regularized_pf(profile, z, cfg).unwrap().a_star;
    a.matrix().as_slice().iter().zip(g.as_slice()).map(|(x, y)| x * y).sum()
}

static SERIAL: Mutex<()> = Mutex::new(());

/// Holds other timed tests off the (single) core until dropped.
pub fn exclusive() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn report(criterion: &str, pass: bool, detail: &str, start: Instant, limit_s: f64) -> bool {
    let secs = start.elapsed().as_secs_f64();
    let in_time = secs <= limit_s;
    let ok = pass && in_time;
    // Written to the process stdout so the line shows even when the test
    // harness captures output of passing tests.
    let line = format!(
        "[acceptance {criterion}] {}  {detail}; runtime {secs:.1}s (limit {limit_s:.0}s{})\n",
        if ok { "PASS" } else { "FAIL" },
        if in_time { "" } else { ", exceeded" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    ok
}
