//! Feed-forward ReLU network predicting `z = [y; lambda; mu]`, with Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{all_finite, Dims, Matrix, PrimalDualPoint, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub w: Matrix,
    pub b: Vector,
}

/// Network parameters. Inputs are normalized as `(x - shift) * scale`
/// before the first layer; the `mu` head passes through `max(0, .)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub out_dims: Dims,
    pub input_shift: Vector,
    pub input_scale: Vector,
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of every layer; `inputs[0]` is the normalized `x`.
    inputs: Vec<Vector>,
    /// Raw output of the last layer, before the `mu` head.
    raw_out: Vector,
}

impl MlpParams {
    /// He-uniform weights and zero biases. `hidden` may be empty.
    pub fn init(out_dims: Dims, hidden: &[usize], seed: u64) -> Result<Self> {
        if out_dims.n_params == 0 || out_dims.n_vars == 0 {
            return Err(Error::InvalidConfig("network needs n_params >= 1 and n_vars >= 1".into()));
        }
        if hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        let mut sizes = vec![out_dims.n_params];
        sizes.extend_from_slice(hidden);
        sizes.push(out_dims.z_len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Layer {
                    w: Matrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..bound)),
                    b: Vector::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self {
            sizes,
            layers,
            activation: Activation::Relu,
            out_dims,
            input_shift: Vector::zeros(out_dims.n_params),
            input_scale: Vector::from_element(out_dims.n_params, 1.0),
        })
    }

    /// Maps the box `[lo, hi]` onto `[-1, 1]` before the first layer.
    pub fn with_input_box(mut self, lo: &Vector, hi: &Vector) -> Self {
        self.input_shift = (lo + hi) * 0.5;
        self.input_scale = Vector::from_fn(lo.len(), |j, _| {
            let half = 0.5 * (hi[j] - lo[j]);
            if half > 0.0 {
                1.0 / half
            } else {
                1.0
            }
        });
        self
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for l in &mut z.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        z
    }

    pub fn n_weights(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn check(&self) -> Result<()> {
        if self.sizes.len() != self.layers.len() + 1 || self.sizes.last() != Some(&self.out_dims.z_len()) {
            return Err(Error::DimensionMismatch {
                context: "MlpParams: output size",
                expected: self.out_dims.z_len(),
                got: self.sizes.last().copied().unwrap_or(0),
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.w.ncols() != self.sizes[i] || l.w.nrows() != self.sizes[i + 1] || l.b.len() != self.sizes[i + 1] {
                return Err(Error::DimensionMismatch {
                    context: "MlpParams: layer shape",
                    expected: self.sizes[i + 1],
                    got: l.w.nrows(),
                });
            }
            if l.w.iter().any(|v| !v.is_finite()) || !all_finite(&l.b) {
                return Err(Error::NonFinite("MlpParams"));
            }
        }
        Ok(())
    }

    /// Flat view in layer order: each weight matrix column-major, then its bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_weights());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_weights() {
            return Err(Error::DimensionMismatch {
                context: "MlpParams::set_flat",
                expected: self.n_weights(),
                got: flat.len(),
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    fn mu_range(&self) -> std::ops::Range<usize> {
        let d = self.out_dims;
        d.n_vars + d.n_eq..d.z_len()
    }

    pub fn forward_cached(&self, x: &Vector) -> Result<(Vector, ForwardCache)> {
        if x.len() != self.sizes[0] {
            return Err(Error::DimensionMismatch {
                context: "mlp_forward: x",
                expected: self.sizes[0],
                got: x.len(),
            });
        }
        let mut h = (x - &self.input_shift).component_mul(&self.input_scale);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let a = &l.w * &h + &l.b;
            inputs.push(h);
            h = if i < last { a.map(|v| v.max(0.0)) } else { a };
        }
        let raw_out = h.clone();
        for i in self.mu_range() {
            h[i] = h[i].max(0.0);
        }
        if !all_finite(&h) {
            return Err(Error::NonFinite("mlp_forward"));
        }
        Ok((h, ForwardCache { inputs, raw_out }))
    }

    /// Gradient of `g_out^T Phi(x)` with respect to every weight, in the
    /// same shape as `self`.
    pub fn backward(&self, cache: &ForwardCache, g_out: &Vector) -> Self {
        let mut grads = self.zeros_like();
        let mut delta = g_out.clone();
        for i in self.mu_range() {
            if cache.raw_out[i] <= 0.0 {
                delta[i] = 0.0;
            }
        }
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            grads.layers[i].w = &delta * input.transpose();
            grads.layers[i].b = delta.clone();
            if i > 0 {
                let mut up = self.layers[i].w.tr_mul(&delta);
                // input of layer i is relu of layer i-1's pre-activation
                for (u, a) in up.iter_mut().zip(input.iter()) {
                    if *a <= 0.0 {
                        *u = 0.0;
                    }
                }
                delta = up;
            }
        }
        grads
    }
}

/// `Phi(x)` split into primal and dual heads.
pub fn mlp_forward(params: &MlpParams, x: &Vector) -> Result<PrimalDualPoint> {
    let (z, _) = params.forward_cached(x)?;
    let d = params.out_dims;
    PrimalDualPoint::from_slice(z.as_slice(), d.n_vars, d.n_eq, d.n_ineq)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Self {
            cfg,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One bias-corrected step on `theta` in place.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Checkpoint layout: row-major weight arrays per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub n_vars: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
}

impl From<&MlpParams> for MlpCheckpoint {
    fn from(p: &MlpParams) -> Self {
        Self {
            sizes: p.sizes.clone(),
            activation: p.activation,
            n_vars: p.out_dims.n_vars,
            n_eq: p.out_dims.n_eq,
            n_ineq: p.out_dims.n_ineq,
            weights: p
                .layers
                .iter()
                .map(|l| l.w.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            biases: p.layers.iter().map(|l| l.b.iter().copied().collect()).collect(),
            input_shift: p.input_shift.iter().copied().collect(),
            input_scale: p.input_scale.iter().copied().collect(),
        }
    }
}

impl TryFrom<MlpCheckpoint> for MlpParams {
    type Error = Error;
    fn try_from(c: MlpCheckpoint) -> Result<Self> {
        if c.sizes.len() < 2 || c.weights.len() != c.sizes.len() - 1 || c.biases.len() != c.weights.len() {
            return Err(Error::Parse("checkpoint: layer count does not match sizes".into()));
        }
        let mut layers = Vec::with_capacity(c.weights.len());
        for (i, (w, b)) in c.weights.iter().zip(&c.biases).enumerate() {
            let (rows, cols) = (c.sizes[i + 1], c.sizes[i]);
            if w.len() != rows || w.iter().any(|r| r.len() != cols) || b.len() != rows {
                return Err(Error::Parse(format!("checkpoint: layer {i} has the wrong shape")));
            }
            layers.push(Layer {
                w: Matrix::from_fn(rows, cols, |r, k| w[r][k]),
                b: Vector::from_column_slice(b),
            });
        }
        let n_params = c.sizes[0];
        if c.input_shift.len() != n_params || c.input_scale.len() != n_params {
            return Err(Error::Parse("checkpoint: input normalization has the wrong length".into()));
        }
        let p = MlpParams {
            sizes: c.sizes,
            layers,
            activation: c.activation,
            out_dims: Dims {
                n_vars: c.n_vars,
                n_eq: c.n_eq,
                n_ineq: c.n_ineq,
                n_params,
            },
            input_shift: Vector::from_vec(c.input_shift),
            input_scale: Vector::from_vec(c.input_scale),
        };
        p.check()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(n: usize, me: usize, mi: usize, p: usize) -> Dims {
        Dims {
            n_vars: n,
            n_eq: me,
            n_ineq: mi,
            n_params: p,
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let p = MlpParams::init(dims(2, 1, 2, 3), &[4, 4], 0).unwrap();
        let z = p.zeros_like();
        let out = mlp_forward(&z, &Vector::from_element(3, 1.5)).unwrap();
        assert!(out.to_vector().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_linear_layer_identity() {
        let mut p = MlpParams::init(dims(2, 0, 0, 2), &[], 0).unwrap();
        p.layers[0].w = Matrix::identity(2, 2);
        p.layers[0].b.fill(0.0);
        let x = Vector::from_column_slice(&[0.3, -0.7]);
        assert_eq!(mlp_forward(&p, &x).unwrap().y, x);
    }

    #[test]
    fn random_outputs_finite_and_mu_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in 0..20 {
            let p = MlpParams::init(dims(3, 1, 4, 2), &[8], s).unwrap();
            let x = Vector::from_fn(2, |_, _| rng.random_range(-5.0..5.0));
            let z = mlp_forward(&p, &x).unwrap();
            assert!(z.is_finite());
            assert!(z.mu.iter().all(|m| *m >= 0.0));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = MlpParams::init(dims(2, 1, 2, 3), &[5, 4], 7).unwrap();
        let x = Vector::from_column_slice(&[0.4, -0.2, 0.9]);
        let g = Vector::from_column_slice(&[1.0, -0.5, 0.3, 2.0, -1.0]);
        let (_, cache) = p.forward_cached(&x).unwrap();
        let grad = p.backward(&cache, &g).to_flat();
        let theta = p.to_flat();
        let f = |t: &[f64]| {
            let mut q = p.clone();
            q.set_flat(t).unwrap();
            q.forward_cached(&x).unwrap().0.dot(&g)
        };
        for i in 0..theta.len() {
            let h = 1e-6;
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (f(&tp) - f(&tm)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "weight {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn adam_zero_lr_is_noop_and_first_step_is_lr_sized() {
        let mut theta = vec![1.0, -2.0];
        let mut a = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            2,
        );
        a.step(&mut theta, &[3.0, -4.0]);
        assert_eq!(theta, vec![1.0, -2.0]);
        let mut b = Adam::new(AdamConfig::default(), 2);
        b.step(&mut theta, &[3.0, -4.0]);
        assert!((theta[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((theta[1] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = MlpParams::init(dims(3, 1, 2, 2), &[6], 4)
            .unwrap()
            .with_input_box(&Vector::from_element(2, -10.0), &Vector::from_element(2, 10.0));
        let c = MlpCheckpoint::from(&p);
        assert_eq!(c.weights[0].len(), 6);
        let back = MlpParams::try_from(c).unwrap();
        assert_eq!(back, p);
    }
}
