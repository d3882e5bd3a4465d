//! Allocations frozen from the brute-force oracle (16 restarts, seed 0).
//! Both the oracle and the interior-point solver must keep reproducing them.

mod common;

use common::rng;
use fairmech::pfsolve::{pf_oracle, solve_pf, solve_regularized_pf, SolverConfig};
use fairmech::{AgentMatrix, RequestProfile};

struct Case {
    profile: RequestProfile,
    plain: Vec<Vec<f64>>,
    ridge: Vec<Vec<f64>>,
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            profile: RequestProfile::from_rows(
                &[vec![0.9, 0.2], vec![0.3, 0.7]],
                &[vec![0.8, 0.6], vec![0.5, 0.9]],
                &[1.0, 1.0],
            )
            .unwrap(),
            plain: vec![vec![0.8, 0.1], vec![0.2, 0.9]],
            ridge: vec![vec![0.7698685703749956, 0.08197721830876394], vec![0.23013142962500455, 0.9]],
        },
        Case {
            profile: RequestProfile::from_rows(
                &[vec![0.5, 0.4, 0.9], vec![0.6, 0.8, 0.1]],
                &[vec![1.0, 0.3, 0.7], vec![0.4, 0.9, 0.0]],
                &[0.8, 1.0, 0.5],
            )
            .unwrap(),
            plain: vec![vec![0.51, 0.1, 0.5], vec![0.29, 0.9, 0.0]],
            ridge: vec![vec![0.4, 0.1803735028695218, 0.5], vec![0.4, 0.8196264971304783, 0.0]],
        },
        Case {
            profile: RequestProfile::new(
                AgentMatrix::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.6]]).unwrap(),
                AgentMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.5]]).unwrap(),
                vec![1.0, 0.6],
                vec![2.0, 1.0],
            )
            .unwrap(),
            plain: vec![vec![1.0, 0.1], vec![0.0, 0.5]],
            ridge: vec![vec![0.9886385028282385, 0.1], vec![0.0113614971717616, 0.5]],
        },
    ]
}

fn z_for(p: &RequestProfile) -> AgentMatrix {
    let m = p.n_resources();
    AgentMatrix::from_rows(&[vec![0.2; m], vec![-0.1; m]]).unwrap()
}

#[test]
fn oracle_reproduces_frozen_allocations() {
    for (k, c) in cases().iter().enumerate() {
        let mut r = rng(0);
        let plain = pf_oracle(&c.profile, None, 0.0, 16, &mut r).unwrap();
        let ridge = pf_oracle(&c.profile, Some(&z_for(&c.profile)), 0.5, 16, &mut r).unwrap();
        assert!(plain.matrix().max_abs_diff(&AgentMatrix::from_rows(&c.plain).unwrap()) < 1e-6, "case {k}");
        assert!(ridge.matrix().max_abs_diff(&AgentMatrix::from_rows(&c.ridge).unwrap()) < 1e-6, "case {k}");
    }
}

#[test]
fn solver_matches_frozen_allocations() {
    let cfg = SolverConfig::default();
    let ridge_cfg = cfg.with_ridge(0.5);
    for (k, c) in cases().iter().enumerate() {
        let plain = solve_pf(&c.profile, &cfg).unwrap().a_star;
        let ridge = solve_regularized_pf(&c.profile, &z_for(&c.profile), &ridge_cfg).unwrap().a_star;
        let d1 = plain.matrix().max_abs_diff(&AgentMatrix::from_rows(&c.plain).unwrap());
        let d2 = ridge.matrix().max_abs_diff(&AgentMatrix::from_rows(&c.ridge).unwrap());
        assert!(d1 < 1e-6, "case {k} plain off by {d1}");
        assert!(d2 < 1e-6, "case {k} ridge off by {d2}");
    }
}
