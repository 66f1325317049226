//! Small dense network for barrier candidates, with hand-rolled
//! differentiation.
//!
//! Three derivative flavors are needed: the input gradient (reverse mode),
//! the directional derivative of the output along a vector (forward tangent),
//! and the parameter gradient of `w_h * h(x) + w_v * <grad_x h(x), c>`
//! (reverse over the forward tangent). All are exact up to floating point;
//! no finite differencing outside tests.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer activation. The derivative-condition loss differentiates
/// through the input gradient, so twice-differentiable choices only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    fn phi(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    fn phi_prime(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(z),
        }
    }

    fn phi_double_prime(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Softplus => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Scalar-output dense network h(x). Weight k maps layer k to layer k+1;
/// the output layer is affine.
#[derive(Debug, Clone)]
pub struct BarrierNet {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub activation: Activation,
}

/// Per-parameter gradient accumulator shaped like a [`BarrierNet`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &BarrierNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            *w *= s;
        }
        for b in &mut self.biases {
            *b *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl BarrierNet {
    /// Fresh network with uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` init.
    pub fn new(input_dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidInput("input_dim must be at least 1".into()));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidInput("hidden layer sizes must be positive".into()));
        }
        let mut layer_sizes = Vec::with_capacity(hidden.len() + 2);
        layer_sizes.push(input_dim);
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(1);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 0..layer_sizes.len() - 1 {
            let fan_in = layer_sizes[k];
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let w = DMatrix::from_fn(layer_sizes[k + 1], fan_in, |_, _| dist.sample(&mut rng));
            let b = DVector::from_fn(layer_sizes[k + 1], |_, _| dist.sample(&mut rng));
            weights.push(w);
            biases.push(b);
        }
        Ok(Self { layer_sizes, weights, biases, activation })
    }

    /// Assemble from explicit parameters, validating shapes.
    pub fn from_parts(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidInput("need matching non-empty weight and bias lists".into()));
        }
        let mut layer_sizes = vec![weights[0].ncols()];
        for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != layer_sizes[k] {
                return Err(Error::ShapeMismatch { expected: layer_sizes[k], got: w.ncols() });
            }
            if b.len() != w.nrows() {
                return Err(Error::ShapeMismatch { expected: w.nrows(), got: b.len() });
            }
            layer_sizes.push(w.nrows());
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(Error::ShapeMismatch { expected: 1, got: *layer_sizes.last().unwrap() });
        }
        Ok(Self { layer_sizes, weights, biases, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    /// h(x).
    pub fn forward(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        for k in 0..last {
            let z = &self.weights[k] * &a + &self.biases[k];
            a = z.map(|v| self.activation.phi(v));
        }
        let out = &self.weights[last] * &a + &self.biases[last];
        Ok(out[0])
    }

    /// h(x) and its gradient in x, one reverse sweep.
    pub fn value_and_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        let mut zs = Vec::with_capacity(last);
        for k in 0..last {
            let z = &self.weights[k] * &a + &self.biases[k];
            a = z.map(|v| self.activation.phi(v));
            zs.push(z);
        }
        let h = (&self.weights[last] * &a + &self.biases[last])[0];

        let mut abar: DVector<f64> = self.weights[last].row(0).transpose();
        for k in (0..last).rev() {
            let zbar = zs[k].map(|v| self.activation.phi_prime(v)).component_mul(&abar);
            abar = self.weights[k].transpose() * zbar;
        }
        Ok((h, abar))
    }

    /// Gradient of h in x.
    pub fn grad_input(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.value_and_grad(x)?.1)
    }

    /// h(x) and the directional derivative `<grad_x h(x), c>` by forward
    /// tangent propagation.
    pub fn forward_with_tangent(&self, x: &DVector<f64>, c: &DVector<f64>) -> Result<(f64, f64)> {
        self.check_input(x)?;
        self.check_input(c)?;
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        let mut v = c.clone();
        for k in 0..last {
            let z = &self.weights[k] * &a + &self.biases[k];
            let t = &self.weights[k] * &v;
            a = z.map(|zz| self.activation.phi(zz));
            v = z.map(|zz| self.activation.phi_prime(zz)).component_mul(&t);
        }
        let h = (&self.weights[last] * &a + &self.biases[last])[0];
        let s = (&self.weights[last] * &v)[0];
        Ok((h, s))
    }

    /// Accumulate the parameter gradient of `w_h * h(x)` into `grads`.
    /// Returns h(x).
    pub fn accumulate_value_grad(
        &self,
        x: &DVector<f64>,
        w_h: f64,
        grads: &mut ParamGrads,
    ) -> Result<f64> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut acts = vec![x.clone()];
        let mut zs = Vec::with_capacity(last);
        for k in 0..last {
            let z = &self.weights[k] * &acts[k] + &self.biases[k];
            acts.push(z.map(|v| self.activation.phi(v)));
            zs.push(z);
        }
        let h = (&self.weights[last] * &acts[last] + &self.biases[last])[0];

        for (g, a) in grads.weights[last].iter_mut().zip(acts[last].iter()) {
            *g += w_h * a;
        }
        grads.biases[last][0] += w_h;
        let mut abar: DVector<f64> = self.weights[last].row(0).transpose() * w_h;
        for k in (0..last).rev() {
            let zbar = zs[k].map(|v| self.activation.phi_prime(v)).component_mul(&abar);
            grads.weights[k].ger(1.0, &zbar, &acts[k], 1.0);
            grads.biases[k] += &zbar;
            abar = self.weights[k].transpose() * zbar;
        }
        Ok(h)
    }

    /// Accumulate the parameter gradient of
    /// `w_h * h(x) + w_v * <grad_x h(x), c>` into `grads`; reverse pass over
    /// the forward tangent recursion. Returns `(h, <grad_x h, c>)`.
    pub fn accumulate_mixed_grad(
        &self,
        x: &DVector<f64>,
        c: &DVector<f64>,
        w_h: f64,
        w_v: f64,
        grads: &mut ParamGrads,
    ) -> Result<(f64, f64)> {
        self.check_input(x)?;
        self.check_input(c)?;
        let last = self.weights.len() - 1;

        // Forward: activations a, tangents v, pre-activations z, raw tangents t.
        let mut acts = vec![x.clone()];
        let mut tangents = vec![c.clone()];
        let mut zs = Vec::with_capacity(last);
        let mut ts = Vec::with_capacity(last);
        for k in 0..last {
            let z = &self.weights[k] * &acts[k] + &self.biases[k];
            let t = &self.weights[k] * &tangents[k];
            acts.push(z.map(|v| self.activation.phi(v)));
            tangents.push(z.map(|v| self.activation.phi_prime(v)).component_mul(&t));
            zs.push(z);
            ts.push(t);
        }
        let h = (&self.weights[last] * &acts[last] + &self.biases[last])[0];
        let s = (&self.weights[last] * &tangents[last])[0];

        // Output layer: J = w_h (W a + b) + w_v (W v).
        for (g, (a, v)) in grads.weights[last]
            .iter_mut()
            .zip(acts[last].iter().zip(tangents[last].iter()))
        {
            *g += w_h * a + w_v * v;
        }
        grads.biases[last][0] += w_h;
        let mut abar: DVector<f64> = self.weights[last].row(0).transpose() * w_h;
        let mut vbar: DVector<f64> = self.weights[last].row(0).transpose() * w_v;

        // Hidden layers: a = phi(z), v = phi'(z) * t with z = W a_in + b,
        // t = W v_in. Adjoints follow by the product rule; phi'' enters
        // through z's effect on the tangent path.
        for k in (0..last).rev() {
            let phi_p = zs[k].map(|v| self.activation.phi_prime(v));
            let phi_pp = zs[k].map(|v| self.activation.phi_double_prime(v));
            let tbar = phi_p.component_mul(&vbar);
            let zbar = phi_p.component_mul(&abar)
                + phi_pp.component_mul(&ts[k]).component_mul(&vbar);
            grads.weights[k].ger(1.0, &zbar, &acts[k], 1.0);
            grads.weights[k].ger(1.0, &tbar, &tangents[k], 1.0);
            grads.biases[k] += &zbar;
            abar = self.weights[k].transpose() * &zbar;
            vbar = self.weights[k].transpose() * &tbar;
        }
        Ok((h, s))
    }

    /// Apply a scaled parameter update in place.
    pub fn apply_update(&mut self, delta: &ParamGrads, scale: f64) {
        for (w, d) in self.weights.iter_mut().zip(&delta.weights) {
            w.zip_apply(d, |wv, dv| *wv += scale * dv);
        }
        for (b, d) in self.biases.iter_mut().zip(&delta.biases) {
            b.zip_apply(d, |bv, dv| *bv += scale * dv);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = CheckpointDoc::from(self);
        let text = serde_json::to_string_pretty(&doc)?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let doc: CheckpointDoc = serde_json::from_str(&text)?;
        doc.into_net()
    }
}

/// On-disk checkpoint layout. Weights are stored per layer as rows.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointDoc {
    pub format_version: u32,
    pub activation: Activation,
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<&BarrierNet> for CheckpointDoc {
    fn from(net: &BarrierNet) -> Self {
        Self {
            format_version: 1,
            activation: net.activation,
            layer_sizes: net.layer_sizes.clone(),
            weights: net
                .weights
                .iter()
                .map(|w| (0..w.nrows()).map(|r| w.row(r).iter().copied().collect()).collect())
                .collect(),
            biases: net.biases.iter().map(|b| b.iter().copied().collect()).collect(),
        }
    }
}

impl CheckpointDoc {
    fn into_net(self) -> Result<BarrierNet> {
        if self.format_version != 1 {
            return Err(Error::Serialization(format!(
                "unsupported checkpoint format_version {}",
                self.format_version
            )));
        }
        let mut weights = Vec::with_capacity(self.weights.len());
        for rows in &self.weights {
            let nrows = rows.len();
            if nrows == 0 {
                return Err(Error::Serialization("empty weight matrix in checkpoint".into()));
            }
            let ncols = rows[0].len();
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(Error::Serialization("ragged weight matrix in checkpoint".into()));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            weights.push(DMatrix::from_row_slice(nrows, ncols, &flat));
        }
        let biases = self.biases.iter().map(|b| DVector::from_row_slice(b)).collect();
        let net = BarrierNet::from_parts(weights, biases, self.activation)?;
        if net.layer_sizes != self.layer_sizes {
            return Err(Error::Serialization("checkpoint layer_sizes disagree with tensors".into()));
        }
        Ok(net)
    }
}

/// Gradient-descent variants over [`BarrierNet`] parameters.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        learning_rate: f64,
        momentum: f64,
        velocity: Option<ParamGrads>,
    },
    Adam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        step_count: u64,
        first_moment: Option<ParamGrads>,
        second_moment: Option<ParamGrads>,
    },
}

impl Optimizer {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Optimizer::Sgd { learning_rate, momentum, velocity: None }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Optimizer::Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: None,
            second_moment: None,
        }
    }

    /// One descent step. Rejects non-finite gradients or parameters.
    pub fn step(&mut self, net: &mut BarrierNet, grads: &ParamGrads) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::TrainingDiverged("non-finite gradient".into()));
        }
        match self {
            Optimizer::Sgd { learning_rate, momentum, velocity } => {
                let vel = velocity.get_or_insert_with(|| ParamGrads::zeros_like(net));
                for (v, g) in vel.weights.iter_mut().zip(&grads.weights) {
                    *v *= *momentum;
                    v.zip_apply(g, |vv, gv| *vv += gv);
                }
                for (v, g) in vel.biases.iter_mut().zip(&grads.biases) {
                    *v *= *momentum;
                    v.zip_apply(g, |vv, gv| *vv += gv);
                }
                let vel = velocity.as_ref().unwrap();
                net.apply_update(vel, -*learning_rate);
            }
            Optimizer::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
                step_count,
                first_moment,
                second_moment,
            } => {
                *step_count += 1;
                let m = first_moment.get_or_insert_with(|| ParamGrads::zeros_like(net));
                let b1 = *beta1;
                for (mw, g) in m.weights.iter_mut().zip(&grads.weights) {
                    *mw *= b1;
                    mw.zip_apply(g, |mv, gv| *mv += (1.0 - b1) * gv);
                }
                for (mb, g) in m.biases.iter_mut().zip(&grads.biases) {
                    *mb *= b1;
                    mb.zip_apply(g, |mv, gv| *mv += (1.0 - b1) * gv);
                }
                let v = second_moment.get_or_insert_with(|| ParamGrads::zeros_like(net));
                let b2 = *beta2;
                for (vw, g) in v.weights.iter_mut().zip(&grads.weights) {
                    *vw *= b2;
                    vw.zip_apply(g, |vv, gg| *vv += (1.0 - b2) * gg * gg);
                }
                for (vb, g) in v.biases.iter_mut().zip(&grads.biases) {
                    *vb *= b2;
                    vb.zip_apply(g, |vv, gg| *vv += (1.0 - b2) * gg * gg);
                }
                let m = first_moment.as_ref().unwrap();
                let v = second_moment.as_ref().unwrap();
                let bc1 = 1.0 - beta1.powi(*step_count as i32);
                let bc2 = 1.0 - beta2.powi(*step_count as i32);
                for ((w, mw), vw) in net.weights.iter_mut().zip(&m.weights).zip(&v.weights) {
                    for ((wv, mv), vv) in w.iter_mut().zip(mw.iter()).zip(vw.iter()) {
                        *wv -= *learning_rate * (mv / bc1) / ((vv / bc2).sqrt() + *epsilon);
                    }
                }
                for ((b, mb), vb) in net.biases.iter_mut().zip(&m.biases).zip(&v.biases) {
                    for ((bv, mv), vv) in b.iter_mut().zip(mb.iter()).zip(vb.iter()) {
                        *bv -= *learning_rate * (mv / bc1) / ((vv / bc2).sqrt() + *epsilon);
                    }
                }
            }
        }
        let finite = net.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && net.biases.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::TrainingDiverged("non-finite parameters after update".into()));
        }
        Ok(())
    }
}
