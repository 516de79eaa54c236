//! Dense tanh networks with batched backprop over a flat parameter layout.
//!
//! Batches are column-major: one sample per column.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `outputs x inputs`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weights: DMatrix::zeros(outputs, inputs), bias: DVector::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Largest singular value of the weight matrix.
    pub fn spectral_norm(&self) -> f64 {
        if self.weights.is_empty() {
            return 0.0;
        }
        self.weights.clone().svd(false, false).singular_values.max()
    }
}

/// Multilayer perceptron: tanh on every hidden layer, identity on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer activations from a batched forward pass; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub activations: Vec<DMatrix<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("cache holds the input at least")
    }
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`, all parameters zero.
    pub fn zeros(sizes: &[usize]) -> Self {
        Self { layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect() }
    }

    /// Gaussian weights with std `1/sqrt(fan_in)`; the output layer is scaled
    /// by `output_gain`. Biases start at zero.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], output_gain: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        let n = net.layers.len();
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let gain = if l + 1 == n { output_gain } else { 1.0 };
            let std = gain / (layer.inputs() as f64).sqrt();
            if std > 0.0 {
                let dist = Normal::new(0.0, std).expect("finite std");
                layer.weights.iter_mut().for_each(|w| *w = dist.sample(rng));
            }
        }
        net
    }

    pub fn shapes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.layers.iter().map(Layer::inputs).collect();
        if let Some(last) = self.layers.last() {
            s.push(last.outputs());
        }
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::outputs)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Weights (column-major) then bias, layer by layer.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
    }

    /// Reads parameters in [`Mlp::write_params`] order; returns the count consumed.
    pub fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let need = self.num_params();
        if src.len() < need {
            return Err(Error::DimensionMismatch { expected: need, got: src.len() });
        }
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.as_mut_slice().copy_from_slice(&src[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&src[k..k + nb]);
            k += nb;
        }
        Ok(k)
    }

    pub fn forward_batch(&self, input: &DMatrix<f64>) -> Result<MlpCache> {
        if input.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: input.nrows() });
        }
        let n = self.layers.len();
        let mut activations = Vec::with_capacity(n + 1);
        activations.push(input.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weights * &activations[l];
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if l + 1 < n {
                z.apply(|x| *x = x.tanh());
            }
            activations.push(z);
        }
        Ok(MlpCache { activations })
    }

    pub fn forward(&self, input: &[f64]) -> Result<DVector<f64>> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.forward_batch(&x)?.output().column(0).into_owned())
    }

    /// Backpropagates `d_output` (gradient of a scalar loss with respect to
    /// the outputs, summed over the batch). Accumulates parameter gradients
    /// into `grad` in [`Mlp::write_params`] order and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, cache: &MlpCache, d_output: &DMatrix<f64>, grad: &mut [f64]) -> DMatrix<f64> {
        debug_assert_eq!(grad.len(), self.num_params());
        let n = self.layers.len();
        let mut offsets = Vec::with_capacity(n);
        let mut k = 0;
        for l in &self.layers {
            offsets.push(k);
            k += l.num_params();
        }
        let mut dz = d_output.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let a_prev = &cache.activations[l];
            let dw = &dz * a_prev.transpose();
            let nw = dw.len();
            let off = offsets[l];
            for (g, d) in grad[off..off + nw].iter_mut().zip(dw.iter()) {
                *g += d;
            }
            for (i, g) in grad[off + nw..off + nw + layer.outputs()].iter_mut().enumerate() {
                *g += dz.row(i).sum();
            }
            let mut da = layer.weights.transpose() * &dz;
            if l > 0 {
                da.zip_apply(a_prev, |d, a| *d *= 1.0 - a * a);
            }
            dz = da;
        }
        dz
    }

    /// Product of layer spectral norms: an upper bound on the Lipschitz
    /// constant in the Euclidean norm, since tanh is 1-Lipschitz.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers.iter().map(Layer::spectral_norm).product()
    }
}

/// Output of a single policy evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    /// Squashed into `(-1, 1)`.
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
    pub value: f64,
}

/// Separate actor and critic MLPs plus a state-independent log std.
///
/// The action distribution is `N(tanh(actor(x)), diag(exp(log_std))^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub actor: Mlp,
    pub critic: Mlp,
    pub log_std: DVector<f64>,
}

impl ActorCritic {
    pub fn zeros(obs_dim: usize, hidden: &[usize], action_dim: usize) -> Self {
        let (a, c) = Self::sizes(obs_dim, hidden, action_dim);
        Self { actor: Mlp::zeros(&a), critic: Mlp::zeros(&c), log_std: DVector::zeros(action_dim) }
    }

    pub fn random<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], action_dim: usize, init_std: f64, rng: &mut R) -> Self {
        let (a, c) = Self::sizes(obs_dim, hidden, action_dim);
        Self {
            actor: Mlp::random(&a, 0.01, rng),
            critic: Mlp::random(&c, 1.0, rng),
            log_std: DVector::repeat(action_dim, init_std.ln()),
        }
    }

    fn sizes(obs_dim: usize, hidden: &[usize], action_dim: usize) -> (Vec<usize>, Vec<usize>) {
        let mut a = vec![obs_dim];
        a.extend_from_slice(hidden);
        let mut c = a.clone();
        a.push(action_dim);
        c.push(1);
        (a, c)
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn num_params(&self) -> usize {
        self.actor.num_params() + self.critic.num_params() + self.log_std.len()
    }

    /// Actor, then critic, then log std.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.actor.write_params(&mut v);
        self.critic.write_params(&mut v);
        v.extend_from_slice(self.log_std.as_slice());
        v
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: p.len() });
        }
        let k = self.actor.read_params(p)?;
        let k = k + self.critic.read_params(&p[k..])?;
        self.log_std.as_mut_slice().copy_from_slice(&p[k..]);
        Ok(())
    }

    /// Index ranges of the actor, critic and log-std blocks in [`ActorCritic::params`].
    pub fn param_blocks(&self) -> [std::ops::Range<usize>; 3] {
        let a = self.actor.num_params();
        let c = self.critic.num_params();
        [0..a, a..a + c, a + c..a + c + self.log_std.len()]
    }

    pub fn forward(&self, obs: &[f64]) -> Result<PolicyOutput> {
        if obs.len() != self.obs_dim() {
            return Err(Error::DimensionMismatch { expected: self.obs_dim(), got: obs.len() });
        }
        let mean = self.actor.forward(obs)?.map(f64::tanh);
        let value = self.critic.forward(obs)?[0];
        Ok(PolicyOutput { mean, std: self.log_std.map(f64::exp), value })
    }

    /// Lipschitz bound of the squashed mean with respect to the (normalized) input.
    pub fn actor_lipschitz_bound(&self) -> f64 {
        self.actor.lipschitz_bound()
    }

    pub fn critic_lipschitz_bound(&self) -> f64 {
        self.critic.lipschitz_bound()
    }
}

/// Log density of `x` under a diagonal Gaussian.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs() {
        let net = ActorCritic::zeros(7, &[4, 4], 3);
        let out = net.forward(&[1.0, -2.0, 3.0, 0.0, 0.5, 9.0, -1.0]).unwrap();
        assert!(out.mean.iter().all(|m| *m == 0.0));
        assert_eq!(out.value, 0.0);
        assert!(out.std.iter().all(|s| *s == 1.0));
        assert!(net.forward(&[0.0; 6]).is_err());
    }

    #[test]
    fn param_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = ActorCritic::random(6, &[5, 4], 2, 0.5, &mut rng);
        let mut b = ActorCritic::zeros(6, &[5, 4], 2);
        b.set_params(&a.params()).unwrap();
        assert_eq!(a, b);
        assert!(b.set_params(&[0.0; 3]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::random(&[4, 6, 5, 3], 1.0, &mut rng);
        let x = DMatrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let w = DMatrix::from_fn(3, 3, |i, j| ((i + 2 * j) as f64 * 0.71).cos());
        let loss = |n: &Mlp| n.forward_batch(&x).unwrap().output().component_mul(&w).sum();
        let cache = net.forward_batch(&x).unwrap();
        let mut grad = vec![0.0; net.num_params()];
        let dx = net.backward(&cache, &w, &mut grad);
        let mut p = Vec::new();
        net.write_params(&mut p);
        let h = 1e-6;
        for k in 0..p.len() {
            let mut n2 = net.clone();
            let mut q = p.clone();
            q[k] += h;
            n2.read_params(&q).unwrap();
            let up = loss(&n2);
            q[k] -= 2.0 * h;
            n2.read_params(&q).unwrap();
            let fd = (up - loss(&n2)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
        for i in 0..4 {
            let mut xp = x.clone();
            xp[(i, 1)] += h;
            let mut xm = x.clone();
            xm[(i, 1)] -= h;
            let f = |xx: &DMatrix<f64>| net.forward_batch(xx).unwrap().output().component_mul(&w).sum();
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - dx[(i, 1)]).abs() < 1e-7);
        }
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ActorCritic::random(10, &[16, 16], 5, 0.5, &mut rng);
        let obs: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let first = net.forward(&obs).unwrap();
        for _ in 0..100 {
            assert_eq!(net.forward(&obs).unwrap(), first);
        }
    }

    #[test]
    fn lipschitz_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::random(&[8, 12, 12, 3], 1.0, &mut rng);
        let l = net.lipschitz_bound();
        for trial in 0..200 {
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut y = x.clone();
            let i = trial % 8;
            let eps = rng.random_range(1e-4..1e-1);
            y[i] += eps;
            let d = (net.forward(&x).unwrap() - net.forward(&y).unwrap()).norm();
            assert!(d <= l * eps * (1.0 + 1e-12), "{d} > {}", l * eps);
        }
    }

    #[test]
    fn gaussian_log_prob_matches_closed_form() {
        let lp = gaussian_log_prob(&[0.0], &[0.0], &[0.0]);
        assert!((lp + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        let lp = gaussian_log_prob(&[1.0, 2.0], &[0.0, 2.0], &[2f64.ln(), 0.0]);
        let expect = -0.125 - 2f64.ln() - (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expect).abs() < 1e-14);
    }
}
