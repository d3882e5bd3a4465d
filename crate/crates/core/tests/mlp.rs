mod common;

use common::{central, rel_err, rng};
use fairmech::mlp::{backward, forward, predict, MlpParams};
use proptest::prelude::*;
use rand::Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn backward_matches_central_differences(
        hidden in 1usize..=3,
        width in prop::sample::select(vec![8usize, 16, 32]),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let sizes = MlpParams::architecture(6, width, hidden, 4);
        let params = MlpParams::init(&sizes, &mut r).unwrap();
        let input: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let cache = forward(&params, &input).unwrap();
        let (pg, ig) = backward(&params, &cache, &g).unwrap();
        let h = 1e-5;
        for k in (0..params.len()).step_by(7) {
            let fd = central(|d| {
                let mut q = params.clone();
                q.as_mut_slice()[k] += d;
                dot(&predict(&q, &input).unwrap(), &g)
            }, h);
            prop_assert!(rel_err(fd, pg.as_slice()[k], 1e-3) < 1e-5, "param {k}: fd {fd} vs {}", pg.as_slice()[k]);
        }
        for k in 0..input.len() {
            let fd = central(|d| {
                let mut s = input.clone();
                s[k] += d;
                dot(&predict(&params, &s).unwrap(), &g)
            }, h);
            prop_assert!(rel_err(fd, ig[k], 1e-3) < 1e-5, "input {k}: fd {fd} vs {}", ig[k]);
        }
    }

    #[test]
    fn l1_lipschitz_bound_holds(seed in any::<u64>(), hidden in 1usize..=3, scale in 0.1f64..4.0) {
        let mut r = rng(seed);
        let sizes = MlpParams::architecture(5, 16, hidden, 3);
        let mut params = MlpParams::init(&sizes, &mut r).unwrap();
        params.scale(scale);
        let bound = params.l1_lipschitz_bound();
        for _ in 0..10 {
            let s: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
            let t: Vec<f64> = s.iter().map(|x| x + r.random_range(-0.5..0.5)).collect();
            let a = predict(&params, &s).unwrap();
            let b = predict(&params, &t).unwrap();
            let out: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
            let inp: f64 = s.iter().zip(&t).map(|(x, y)| (x - y).abs()).sum();
            prop_assert!(out <= bound * inp * (1.0 + 1e-12) + 1e-15);
        }
    }
}
