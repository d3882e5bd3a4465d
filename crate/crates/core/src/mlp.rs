//! Small fully connected network with tanh hidden layers and a linear output,
//! hand-written reverse mode, and SGD/Adam updates.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters stored as one flat vector; layer `l` holds an `out x in`
/// row-major weight matrix followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    sizes: Vec<usize>,
    data: Vec<f64>,
}

/// Gradient with the same layout as [`MlpParams`].
pub type MlpGrads = MlpParams;

fn layer_len(n_in: usize, n_out: usize) -> usize {
    n_in * n_out + n_out
}

impl MlpParams {
    /// `sizes = [in, hidden..., out]`; every entry must be positive.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {sizes:?}")));
        }
        let total = sizes.windows(2).map(|w| layer_len(w[0], w[1])).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            data: vec![0.0; total],
        })
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization of weights and biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for v in &mut p.data[off..off + layer_len(w[0], w[1])] {
                *v = rng.random_range(-bound..=bound);
            }
            off += layer_len(w[0], w[1]);
        }
        Ok(p)
    }

    /// `[in, K, ..., K, out]` with `hidden` copies of `width`.
    pub fn architecture(n_in: usize, width: usize, hidden: usize, n_out: usize) -> Vec<usize> {
        let mut s = vec![n_in];
        s.extend(std::iter::repeat_n(width, hidden));
        s.push(n_out);
        s
    }

    pub fn from_flat(sizes: &[usize], data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(sizes)?;
        if data.len() != p.data.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            sizes: self.sizes.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .map(|w| layer_len(w[0], w[1]))
            .sum()
    }

    /// Weight matrix (row-major, `out x in`) and bias of one layer.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.offset(layer);
        let (w, rest) = self.data[off..off + layer_len(n_in, n_out)].split_at(n_in * n_out);
        (w, rest)
    }

    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.offset(layer);
        self.data[off..off + layer_len(n_in, n_out)].split_at_mut(n_in * n_out)
    }

    /// Multiplies one layer's weights and bias by `factor`.
    pub fn scale_layer(&mut self, layer: usize, factor: f64) {
        let (w, b) = self.layer_mut(layer);
        w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.sizes != other.sizes {
            return Err(Error::DimensionMismatch(format!(
                "parameter shapes {:?} and {:?} differ",
                self.sizes, other.sizes
            )));
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Cheap content hash used to detect caches produced by different parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.sizes.iter().map(|s| *s as u64).chain(self.data.iter().map(|v| v.to_bits())) {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    /// Product of the layer weight-matrix 1-norms, a Lipschitz constant of the
    /// network in the 1-norm since tanh is 1-Lipschitz.
    pub fn l1_lipschitz_bound(&self) -> f64 {
        (0..self.n_layers())
            .map(|l| {
                let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
                let (w, _) = self.layer(l);
                (0..n_in)
                    .map(|j| (0..n_out).map(|i| w[i * n_in + j].abs()).sum::<f64>())
                    .fold(0.0, f64::max)
            })
            .product()
    }
}

/// Activations recorded by [`forward`]; `acts[0]` is the input, the last entry the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
    fingerprint: u64,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds the output")
    }

    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }
}

pub fn forward(params: &MlpParams, input: &[f64]) -> Result<MlpCache> {
    if input.len() != params.input_len() {
        return Err(Error::DimensionMismatch(format!(
            "network expects {} inputs, got {}",
            params.input_len(),
            input.len()
        )));
    }
    let n_layers = params.n_layers();
    let mut acts = Vec::with_capacity(n_layers + 1);
    acts.push(input.to_vec());
    for l in 0..n_layers {
        let (n_in, n_out) = (params.sizes[l], params.sizes[l + 1]);
        let (w, b) = params.layer(l);
        let h = &acts[l];
        let mut out = b.to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &w[i * n_in..(i + 1) * n_in];
            *o += row.iter().zip(h).map(|(a, x)| a * x).sum::<f64>();
        }
        if l + 1 < n_layers {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        debug_assert_eq!(out.len(), n_out);
        acts.push(out);
    }
    Ok(MlpCache {
        acts,
        fingerprint: params.fingerprint(),
    })
}

/// Output only.
pub fn predict(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>> {
    forward(params, input).map(|mut c| c.acts.pop().expect("output present"))
}

/// Gradients with respect to the parameters and the input.
pub fn backward(params: &MlpParams, cache: &MlpCache, grad_out: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
    if cache.fingerprint != params.fingerprint() || cache.acts.len() != params.n_layers() + 1 {
        return Err(Error::StaleCache);
    }
    if grad_out.len() != params.output_len() {
        return Err(Error::DimensionMismatch("output gradient length".into()));
    }
    let mut grads = params.zeros_like();
    let mut delta = grad_out.to_vec();
    for l in (0..params.n_layers()).rev() {
        let (n_in, n_out) = (params.sizes[l], params.sizes[l + 1]);
        let h = &cache.acts[l];
        let (w, _) = params.layer(l);
        {
            let (gw, gb) = grads.layer_mut(l);
            for i in 0..n_out {
                let d = delta[i];
                gb[i] = d;
                if d != 0.0 {
                    for (g, x) in gw[i * n_in..(i + 1) * n_in].iter_mut().zip(h) {
                        *g = d * x;
                    }
                }
            }
        }
        let mut dh = vec![0.0; n_in];
        for (i, d) in delta.iter().enumerate() {
            if *d != 0.0 {
                for (acc, wv) in dh.iter_mut().zip(&w[i * n_in..(i + 1) * n_in]) {
                    *acc += d * wv;
                }
            }
        }
        if l > 0 {
            for (g, a) in dh.iter_mut().zip(h) {
                *g *= 1.0 - a * a;
            }
        }
        delta = dh;
    }
    Ok((grads, delta))
}

/// `params -= lr * grads`.
pub fn sgd_step(params: &mut MlpParams, grads: &MlpGrads, lr: f64) -> Result<()> {
    params.add_scaled(grads, -lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam descent step on `params`.
pub fn adam_step(params: &mut MlpParams, state: &mut AdamState, grads: &MlpGrads, lr: f64) -> Result<()> {
    params.check_shape(grads)?;
    if state.m.len() != params.len() {
        return Err(Error::DimensionMismatch("optimizer state does not match parameters".into()));
    }
    state.t += 1;
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    for k in 0..params.len() {
        let g = grads.data[k];
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let mh = state.m[k] / c1;
        let vh = state.v[k] / c2;
        params.data[k] -= lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Structured-text checkpoint: layer sizes, flattened weights and a kind tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<f64>,
    /// Mechanism-specific scalars such as the ridge coefficient.
    #[serde(default)]
    pub meta: std::collections::BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn new(kind: &str, params: &MlpParams) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            layer_sizes: params.sizes.clone(),
            weights: params.data.clone(),
            meta: Default::default(),
        }
    }

    pub fn params(&self) -> Result<MlpParams> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        MlpParams::from_flat(&self.layer_sizes, self.weights.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&[5, 8, 8, 3]).unwrap();
        assert_eq!(predict(&p, &[1.0; 5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn linear_layer_extracts_inputs() {
        let mut p = MlpParams::zeros(&[3, 2]).unwrap();
        {
            let (w, _) = p.layer_mut(0);
            w[0] = 1.0; // out0 <- in0
            w[3 + 2] = 1.0; // out1 <- in2
        }
        assert_eq!(predict(&p, &[0.3, -1.0, 0.7]).unwrap(), vec![0.3, 0.7]);
    }

    #[test]
    fn linear_input_gradient_is_transpose_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MlpParams::init(&[3, 2], &mut rng).unwrap();
        let cache = forward(&p, &[0.1, 0.2, 0.3]).unwrap();
        let (_, gi) = backward(&p, &cache, &[1.0, -2.0]).unwrap();
        let (w, _) = p.layer(0);
        for j in 0..3 {
            assert!((gi[j] - (w[j] - 2.0 * w[3 + j])).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MlpParams::init(&[4, 16, 16, 2], &mut rng).unwrap();
        let x = [0.3, 0.1, -0.5, 2.0];
        let a = predict(&p, &x).unwrap();
        let b = predict(&p, &x).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MlpParams::init(&[4, 8, 2], &mut rng).unwrap();
        let cache = forward(&p, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let (g, gi) = backward(&p, &cache, &[0.0, 0.0]).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
        assert!(gi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = MlpParams::init(&[2, 4, 1], &mut rng).unwrap();
        let cache = forward(&p, &[1.0, 2.0]).unwrap();
        p.as_mut_slice()[0] += 1.0;
        assert_eq!(backward(&p, &cache, &[1.0]).unwrap_err(), Error::StaleCache);
    }

    #[test]
    fn sgd_and_adam_basics() {
        let mut p = MlpParams::from_flat(&[1, 1], vec![0.5, 0.0]).unwrap();
        let g = MlpParams::from_flat(&[1, 1], vec![2.0, 0.0]).unwrap();
        let before = p.clone();
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!((p.as_slice()[0] - 0.3).abs() < 1e-15);

        for scale in [1e-4, 1.0, 1e4] {
            let mut q = MlpParams::from_flat(&[1, 1], vec![0.0, 0.0]).unwrap();
            let mut st = AdamState::new(&q);
            let g = MlpParams::from_flat(&[1, 1], vec![scale, 0.0]).unwrap();
            adam_step(&mut q, &mut st, &g, 0.01).unwrap();
            let expected = -0.01 * scale / (scale + 1e-8);
            assert!((q.as_slice()[0] - expected).abs() < 1e-12);
            assert!((q.as_slice()[0] + 0.01).abs() < 0.01 * 1e-3);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = MlpParams::zeros(&[2, 3]).unwrap();
        let g = MlpParams::zeros(&[3, 2]).unwrap();
        assert!(matches!(sgd_step(&mut p, &g, 0.1), Err(Error::DimensionMismatch(_))));
    }
}
