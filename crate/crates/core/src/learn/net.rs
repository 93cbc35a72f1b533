//! Fully connected networks with hand-written reverse-mode gradients.
//!
//! Parameters are one flat vector: per layer the weight matrix (row-major,
//! `out × in`) followed by the bias.

use serde::{Deserialize, Serialize};

use super::LearnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
    /// Softmax output; only valid on the last layer, paired with cross-entropy.
    SoftmaxOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    CrossEntropy,
    /// Σ (ŷ − y)², no ½ factor.
    SquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Target>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, y: Target) {
        self.x.push(x);
        self.y.push(y);
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { x: idx.iter().map(|&i| self.x[i].clone()).collect(), y: idx.iter().map(|&i| self.y[i].clone()).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<f64>,
}

pub fn param_count(input_dim: usize, layers: &[LayerSpec]) -> usize {
    let mut n = 0;
    let mut d = input_dim;
    for l in layers {
        n += l.width * d + l.width;
        d = l.width;
    }
    n
}

/// Multiply-add count of one forward pass.
pub fn mac_count(input_dim: usize, widths: &[usize]) -> usize {
    let mut d = input_dim;
    let mut n = 0;
    for &w in widths {
        n += w * d;
        d = w;
    }
    n
}

pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Loss of one output and its gradient w.r.t. the pre-activation of the
/// last layer.
pub(crate) fn loss_and_delta(out_pre: &[f64], act: Activation, loss: Loss, target: &Target) -> Result<(f64, Vec<f64>), LearnError> {
    match (loss, target) {
        (Loss::CrossEntropy, Target::Class(c)) => {
            if act != Activation::SoftmaxOut {
                return Err(LearnError::ShapeMismatch("cross-entropy needs a softmax output layer".into()));
            }
            if *c >= out_pre.len() {
                return Err(LearnError::ShapeMismatch(format!("class {c} out of {} outputs", out_pre.len())));
            }
            let p = softmax(out_pre);
            let l = -(p[*c].max(1e-300)).ln();
            let mut d = p;
            d[*c] -= 1.0;
            Ok((l, d))
        }
        (Loss::SquaredError, Target::Values(y)) => {
            if y.len() != out_pre.len() {
                return Err(LearnError::ShapeMismatch(format!("target width {} != output width {}", y.len(), out_pre.len())));
            }
            if act != Activation::Identity {
                return Err(LearnError::ShapeMismatch("squared error needs a linear output layer".into()));
            }
            let yhat = out_pre;
            let l = yhat.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
            let d = yhat.iter().zip(y).map(|(a, b)| 2.0 * (a - b)).collect();
            Ok((l, d))
        }
        _ => Err(LearnError::ShapeMismatch("target kind does not match loss".into())),
    }
}

impl Mlp {
    pub fn zeros(input_dim: usize, layers: Vec<LayerSpec>) -> Self {
        let n = param_count(input_dim, &layers);
        Mlp { input_dim, layers, params: vec![0.0; n] }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.width)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Offset of layer `l`'s parameters and its input width.
    pub fn layer_offset(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        let mut d = self.input_dim;
        for spec in &self.layers[..l] {
            off += spec.width * d + spec.width;
            d = spec.width;
        }
        (off, d)
    }

    /// Mask with `false` on every parameter of the first `frozen` layers.
    pub fn trainable_mask(&self, frozen: usize) -> Vec<bool> {
        let (off, _) = self.layer_offset(frozen.min(self.layers.len()));
        (0..self.params.len()).map(|i| i >= off).collect()
    }

    fn forward_trace(&self, x: &[f64]) -> Result<Vec<(Vec<f64>, Vec<f64>)>, LearnError> {
        if x.len() != self.input_dim {
            return Err(LearnError::ShapeMismatch(format!("input width {} != {}", x.len(), self.input_dim)));
        }
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let mut off = 0;
        for spec in &self.layers {
            let d = h.len();
            let w = &self.params[off..off + spec.width * d];
            let b = &self.params[off + spec.width * d..off + spec.width * d + spec.width];
            let z: Vec<f64> = (0..spec.width).map(|r| b[r] + w[r * d..(r + 1) * d].iter().zip(&h).map(|(a, v)| a * v).sum::<f64>()).collect();
            let a: Vec<f64> = match spec.activation {
                Activation::Relu => z.iter().map(|v| relu(*v)).collect(),
                Activation::Identity => z.clone(),
                Activation::SoftmaxOut => softmax(&z),
            };
            off += spec.width * d + spec.width;
            trace.push((z, std::mem::replace(&mut h, a)));
        }
        trace.push((Vec::new(), h));
        Ok(trace)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, LearnError> {
        Ok(self.forward_trace(x)?.pop().expect("nonempty").1)
    }

    /// Loss and gradient for one example.
    pub fn example_grad(&self, x: &[f64], target: &Target, loss: Loss) -> Result<(f64, Vec<f64>), LearnError> {
        let trace = self.forward_trace(x)?;
        let last = self.layers.last().ok_or_else(|| LearnError::ShapeMismatch("network has no layers".into()))?;
        let (l, mut delta) = loss_and_delta(&trace[self.layers.len() - 1].0, last.activation, loss, target)?;
        let mut grad = vec![0.0; self.params.len()];
        for li in (0..self.layers.len()).rev() {
            let (off, d) = self.layer_offset(li);
            let width = self.layers[li].width;
            let input = &trace[li].1;
            if li + 1 < self.layers.len() {
                // delta holds dL/da for hidden layers; convert to dL/dz
                let z = &trace[li].0;
                match self.layers[li].activation {
                    Activation::Relu => delta.iter_mut().zip(z).for_each(|(g, zv)| {
                        if *zv <= 0.0 {
                            *g = 0.0
                        }
                    }),
                    Activation::Identity => {}
                    Activation::SoftmaxOut => {
                        return Err(LearnError::ShapeMismatch("softmax is only allowed on the output layer".into()))
                    }
                }
            }
            for r in 0..width {
                let g = delta[r];
                if g != 0.0 {
                    for c in 0..d {
                        grad[off + r * d + c] = g * input[c];
                    }
                }
                grad[off + width * d + r] = g;
            }
            if li > 0 {
                let mut prev = vec![0.0; d];
                for r in 0..width {
                    let g = delta[r];
                    if g != 0.0 {
                        let row = &self.params[off + r * d..off + (r + 1) * d];
                        prev.iter_mut().zip(row).for_each(|(p, w)| *p += g * w);
                    }
                }
                delta = prev;
            }
        }
        Ok((l, grad))
    }

    /// Mean loss and per-example gradients over a batch.
    pub fn forward_backward(&self, batch: &Dataset, loss: Loss) -> Result<(f64, Vec<Vec<f64>>), LearnError> {
        if batch.is_empty() {
            return Err(LearnError::EmptyData);
        }
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(batch.len());
        for (x, y) in batch.x.iter().zip(&batch.y) {
            let (l, g) = self.example_grad(x, y, loss)?;
            total += l;
            grads.push(g);
        }
        Ok((total / batch.len() as f64, grads))
    }

    pub fn mean_loss(&self, data: &Dataset, loss: Loss) -> Result<f64, LearnError> {
        let mut total = 0.0;
        for (x, y) in data.x.iter().zip(&data.y) {
            let trace = self.forward_trace(x)?;
            let last = self.layers.last().expect("layers");
            total += loss_and_delta(&trace[self.layers.len() - 1].0, last.activation, loss, y)?.0;
        }
        Ok(total / data.len().max(1) as f64)
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<usize, LearnError> {
        let out = self.forward(x)?;
        Ok(argmax(&out))
    }

    /// Fraction of examples whose argmax output equals the class target.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64, LearnError> {
        if data.is_empty() {
            return Err(LearnError::EmptyData);
        }
        let mut hit = 0;
        for (x, y) in data.x.iter().zip(&data.y) {
            if let Target::Class(c) = y {
                if self.predict_class(x)? == *c {
                    hit += 1;
                }
            }
        }
        Ok(hit as f64 / data.len() as f64)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::NoiseRng;

    #[test]
    fn one_parameter_squared_error() {
        let mut m = Mlp::zeros(1, vec![LayerSpec { width: 1, activation: Activation::Identity }]);
        m.params = vec![1.0, 0.0];
        let (l, g) = m.example_grad(&[1.0], &Target::Values(vec![0.0]), Loss::SquaredError).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, vec![2.0, 2.0]);
    }

    #[test]
    fn zero_weights_cross_entropy_is_ln2() {
        let m = Mlp::zeros(3, vec![LayerSpec { width: 2, activation: Activation::SoftmaxOut }]);
        let data = Dataset { x: vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]], y: vec![Target::Class(0), Target::Class(1)] };
        let (l, _) = m.forward_backward(&data, Loss::CrossEntropy).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = NoiseRng::new(11);
        for trial in 0..20 {
            let hidden = 2 + trial % 4;
            let classification = trial % 2 == 0;
            let out = if classification {
                LayerSpec { width: 3, activation: Activation::SoftmaxOut }
            } else {
                LayerSpec { width: 2, activation: Activation::Identity }
            };
            let mut m = Mlp::zeros(
                4,
                vec![
                    LayerSpec { width: hidden, activation: Activation::Relu },
                    LayerSpec { width: 3, activation: Activation::Identity },
                    out,
                ],
            );
            m.params.iter_mut().for_each(|p| *p = rng.normal(0.7));
            let x: Vec<f64> = (0..4).map(|_| rng.normal(1.0)).collect();
            let (loss, target) = if classification {
                (Loss::CrossEntropy, Target::Class(trial % 3))
            } else {
                (Loss::SquaredError, Target::Values(vec![0.3, -0.2]))
            };
            let (_, g) = m.example_grad(&x, &target, loss).unwrap();
            for i in 0..m.params.len() {
                let h = 1e-6;
                let mut p = m.clone();
                p.params[i] += h;
                let lp = p.example_grad(&x, &target, loss).unwrap().0;
                p.params[i] -= 2.0 * h;
                let lm = p.example_grad(&x, &target, loss).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
                assert!(err < 1e-4, "trial {trial} param {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let m = Mlp::zeros(2, vec![LayerSpec { width: 2, activation: Activation::SoftmaxOut }]);
        assert!(matches!(m.forward(&[1.0]), Err(LearnError::ShapeMismatch(_))));
    }
}
