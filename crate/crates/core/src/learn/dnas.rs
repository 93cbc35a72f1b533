//! Differentiable architecture search over per-block layer widths.
//!
//! Block `b` mixes its candidate operations with weights `softmax(θ_b)`.
//! A candidate of width `w > 0` is `relu(W x + b)`; width 0 is a skip. All
//! candidate outputs are zero-padded to `D_b = max(D_{b-1}, max_j w_j)` so
//! they can be summed. A linear head maps `D_B` to the task output.

use serde::{Deserialize, Serialize};

use super::net::{loss_and_delta, relu, softmax, Activation, Dataset, LayerSpec, Loss, Mlp};
use super::train::{init_layer, train_dpsgd, TrainReport};
use super::LearnError;
use crate::dp::DpSgdConfig;

pub(crate) const HEAD_TAG: u64 = 0xFFFF;

pub const DEFAULT_WIDTHS: [usize; 5] = [0, 8, 16, 32, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub input_dim: usize,
    pub output_dim: usize,
    pub output_activation: Activation,
    /// Candidate widths per block, 0 meaning skip.
    pub blocks: Vec<Vec<usize>>,
    /// Softmax temperature on θ.
    pub temperature: f64,
}

/// Per-block chosen width (0 = skip).
pub type Architecture = Vec<usize>;

impl SearchSpace {
    pub fn new(input_dim: usize, output_dim: usize, output_activation: Activation, blocks: usize) -> Self {
        SearchSpace { input_dim, output_dim, output_activation, blocks: vec![DEFAULT_WIDTHS.to_vec(); blocks], temperature: 1.0 }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        if self.blocks.iter().any(|b| b.is_empty()) {
            return Err(LearnError::InvalidSpace("every block needs a candidate".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(LearnError::InvalidSpace("temperature must be positive".into()));
        }
        Ok(())
    }

    /// `D_0 = input_dim`, `D_b = max(D_{b-1}, max width of block b)`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        for b in &self.blocks {
            let prev = *d.last().expect("nonempty");
            d.push(prev.max(b.iter().copied().max().unwrap_or(0)));
        }
        d
    }

    /// Multiply-adds of candidate `j` of block `b` inside the supernet.
    pub fn cost(&self, b: usize, j: usize) -> f64 {
        (self.dims()[b] * self.blocks[b][j]) as f64
    }

    pub fn contains(&self, arch: &Architecture) -> bool {
        arch.len() == self.blocks.len() && arch.iter().zip(&self.blocks).all(|(w, c)| c.contains(w))
    }

    pub fn layers(&self, arch: &Architecture) -> Vec<LayerSpec> {
        let mut l: Vec<LayerSpec> =
            arch.iter().filter(|w| **w > 0).map(|&w| LayerSpec { width: w, activation: Activation::Relu }).collect();
        l.push(LayerSpec { width: self.output_dim, activation: self.output_activation });
        l
    }

    /// Multiply-adds of the derived network, head included.
    pub fn macs(&self, arch: &Architecture) -> usize {
        let widths: Vec<usize> = self.layers(arch).iter().map(|l| l.width).collect();
        super::net::mac_count(self.input_dim, &widths)
    }

    /// Seeded initial weights of a derived architecture: each layer is the
    /// slice of the corresponding supernet candidate's initial weights that
    /// the narrower input touches.
    pub fn initial_model(&self, arch: &Architecture, seed: u64) -> Result<Mlp, LearnError> {
        if !self.contains(arch) {
            return Err(LearnError::InvalidSpace(format!("architecture {arch:?} not in space")));
        }
        let dims = self.dims();
        let mut params = Vec::new();
        let mut d = self.input_dim;
        for (b, &w) in arch.iter().enumerate() {
            if w > 0 {
                params.extend(init_layer(seed, b as u64, w, dims[b], d));
                d = w;
            }
        }
        params.extend(init_layer(seed, HEAD_TAG, self.output_dim, dims[self.blocks.len()], d));
        Ok(Mlp { input_dim: self.input_dim, layers: self.layers(arch), params })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supernet {
    pub space: SearchSpace,
    pub theta: Vec<Vec<f64>>,
    pub params: Vec<f64>,
    /// Offset of each (block, candidate) weight matrix; head last.
    offsets: Vec<Vec<usize>>,
    head_offset: usize,
}

struct Trace {
    /// Block inputs h_0..h_B (h_b has width D_b).
    h: Vec<Vec<f64>>,
    /// Pre-activations per (block, candidate).
    z: Vec<Vec<Vec<f64>>>,
    probs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupernetGrad {
    pub loss: f64,
    pub params: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
}

impl Supernet {
    pub fn new(space: SearchSpace, seed: u64) -> Result<Self, LearnError> {
        space.validate()?;
        let dims = space.dims();
        let mut params = Vec::new();
        let mut offsets = Vec::new();
        for (b, cands) in space.blocks.iter().enumerate() {
            let mut o = Vec::new();
            for &w in cands {
                o.push(params.len());
                if w > 0 {
                    params.extend(init_layer(seed, b as u64, w, dims[b], dims[b]));
                }
            }
            offsets.push(o);
        }
        let head_offset = params.len();
        let d = dims[space.blocks.len()];
        params.extend(init_layer(seed, HEAD_TAG, space.output_dim, d, d));
        let theta = space.blocks.iter().map(|c| vec![0.0; c.len()]).collect();
        Ok(Supernet { space, theta, params, offsets, head_offset })
    }

    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.theta
            .iter()
            .map(|t| softmax(&t.iter().map(|v| v / self.space.temperature).collect::<Vec<_>>()))
            .collect()
    }

    /// Supernet weights of the derived architecture's layers, sliced as in
    /// [`SearchSpace::initial_model`].
    pub fn slice_for(&self, arch: &Architecture) -> Vec<f64> {
        let dims = self.space.dims();
        let mut out = Vec::new();
        let mut d = self.space.input_dim;
        for (b, &w) in arch.iter().enumerate() {
            if w == 0 {
                continue;
            }
            let j = self.space.blocks[b].iter().position(|x| *x == w).expect("in space");
            let off = self.offsets[b][j];
            let full = dims[b];
            for r in 0..w {
                out.extend_from_slice(&self.params[off + r * full..off + r * full + d]);
            }
            out.extend_from_slice(&self.params[off + w * full..off + w * full + w]);
            d = w;
        }
        let full = dims[self.space.blocks.len()];
        let o = self.space.output_dim;
        for r in 0..o {
            out.extend_from_slice(&self.params[self.head_offset + r * full..self.head_offset + r * full + d]);
        }
        out.extend_from_slice(&self.params[self.head_offset + o * full..self.head_offset + o * full + o]);
        out
    }

    fn forward(&self, x: &[f64]) -> Result<Trace, LearnError> {
        if x.len() != self.space.input_dim {
            return Err(LearnError::ShapeMismatch(format!("input width {} != {}", x.len(), self.space.input_dim)));
        }
        let dims = self.space.dims();
        let probs = self.probabilities();
        let mut h = vec![x.to_vec()];
        let mut zs = Vec::new();
        for (b, cands) in self.space.blocks.iter().enumerate() {
            let (din, dout) = (dims[b], dims[b + 1]);
            let input = &h[b];
            let mut y = vec![0.0; dout];
            let mut zb = Vec::new();
            for (j, &w) in cands.iter().enumerate() {
                let p = probs[b][j];
                if w == 0 {
                    y.iter_mut().zip(input).for_each(|(yv, xv)| *yv += p * xv);
                    zb.push(Vec::new());
                    continue;
                }
                let off = self.offsets[b][j];
                let mut z = vec![0.0; w];
                for r in 0..w {
                    let row = &self.params[off + r * din..off + (r + 1) * din];
                    z[r] = self.params[off + w * din + r] + row.iter().zip(input).map(|(a, v)| a * v).sum::<f64>();
                    y[r] += p * relu(z[r]);
                }
                zb.push(z);
            }
            zs.push(zb);
            h.push(y);
        }
        let d = dims[self.space.blocks.len()];
        let last = &h[self.space.blocks.len()];
        let o = self.space.output_dim;
        let logits = (0..o)
            .map(|r| {
                self.params[self.head_offset + o * d + r]
                    + self.params[self.head_offset + r * d..self.head_offset + (r + 1) * d].iter().zip(last).map(|(a, v)| a * v).sum::<f64>()
            })
            .collect();
        Ok(Trace { h, z: zs, probs, logits })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, LearnError> {
        let t = self.forward(x)?;
        Ok(match self.space.output_activation {
            Activation::SoftmaxOut => softmax(&t.logits),
            _ => t.logits,
        })
    }

    fn cost_ref(&self) -> f64 {
        let r: f64 = (0..self.space.blocks.len())
            .map(|b| (0..self.space.blocks[b].len()).map(|j| self.space.cost(b, j)).fold(0.0, f64::max))
            .sum();
        if r > 0.0 {
            r
        } else {
            1.0
        }
    }

    /// Expected normalized cost `Σ_b Σ_j p_bj c_bj / C_ref`.
    pub fn expected_cost(&self) -> f64 {
        let probs = self.probabilities();
        let c: f64 = probs
            .iter()
            .enumerate()
            .map(|(b, p)| p.iter().enumerate().map(|(j, pj)| pj * self.space.cost(b, j)).sum::<f64>())
            .sum();
        c / self.cost_ref()
    }

    /// Mean task loss over `data` plus `lambda_cost · expected_cost`, with
    /// gradients w.r.t. the weights and θ.
    pub fn loss_and_grad(&self, data: &Dataset, loss: Loss, lambda_cost: f64) -> Result<SupernetGrad, LearnError> {
        if data.is_empty() {
            return Err(LearnError::EmptyData);
        }
        let dims = self.space.dims();
        let nb = self.space.blocks.len();
        let n = data.len() as f64;
        let mut gp = vec![0.0; self.params.len()];
        // dL/dp per block candidate, summed over examples
        let mut gprob: Vec<Vec<f64>> = self.space.blocks.iter().map(|c| vec![0.0; c.len()]).collect();
        let mut total = 0.0;
        for (x, y) in data.x.iter().zip(&data.y) {
            let t = self.forward(x)?;
            let (l, delta) = loss_and_delta(&t.logits, self.space.output_activation, loss, y)?;
            total += l;
            let d = dims[nb];
            let o = self.space.output_dim;
            let mut dh = vec![0.0; d];
            for r in 0..o {
                let g = delta[r] / n;
                let row = self.head_offset + r * d;
                for c in 0..d {
                    gp[row + c] += g * t.h[nb][c];
                    dh[c] += delta[r] * self.params[row + c];
                }
                gp[self.head_offset + o * d + r] += g;
            }
            for b in (0..nb).rev() {
                let din = dims[b];
                let input = &t.h[b];
                let mut dprev = vec![0.0; din];
                for (j, &w) in self.space.blocks[b].iter().enumerate() {
                    let p = t.probs[b][j];
                    if w == 0 {
                        let dot: f64 = dh[..din].iter().zip(input).map(|(a, v)| a * v).sum();
                        gprob[b][j] += dot / n;
                        dprev.iter_mut().zip(&dh[..din]).for_each(|(a, g)| *a += p * g);
                        continue;
                    }
                    let off = self.offsets[b][j];
                    let z = &t.z[b][j];
                    let mut dot = 0.0;
                    for r in 0..w {
                        dot += dh[r] * relu(z[r]);
                        if z[r] <= 0.0 {
                            continue;
                        }
                        let dz = p * dh[r];
                        let row = off + r * din;
                        for c in 0..din {
                            gp[row + c] += dz * input[c] / n;
                            dprev[c] += dz * self.params[row + c];
                        }
                        gp[off + w * din + r] += dz / n;
                    }
                    gprob[b][j] += dot / n;
                }
                dh = dprev;
            }
        }
        let cref = self.cost_ref();
        let probs = self.probabilities();
        let mut gtheta = Vec::with_capacity(nb);
        for b in 0..nb {
            let g: Vec<f64> = (0..probs[b].len())
                .map(|j| gprob[b][j] + lambda_cost * self.space.cost(b, j) / cref)
                .collect();
            let mean: f64 = probs[b].iter().zip(&g).map(|(p, gv)| p * gv).sum();
            gtheta.push(
                probs[b].iter().zip(&g).map(|(p, gv)| p * (gv - mean) / self.space.temperature).collect(),
            );
        }
        Ok(SupernetGrad { loss: total / n + lambda_cost * self.expected_cost(), params: gp, theta: gtheta })
    }

    /// Per-block argmax of θ; ties go to the cheaper candidate.
    pub fn derive(&self) -> Architecture {
        self.theta
            .iter()
            .enumerate()
            .map(|(b, t)| {
                let mut best = 0;
                for j in 1..t.len() {
                    let better = t[j] > t[best] || (t[j] == t[best] && self.space.cost(b, j) < self.space.cost(b, best));
                    if better {
                        best = j;
                    }
                }
                self.space.blocks[b][best]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub theta_learning_rate: f64,
    pub lambda_cost: f64,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { steps: 200, learning_rate: 0.1, theta_learning_rate: 0.5, lambda_cost: 0.0, seed: 0, loss: Loss::CrossEntropy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub architecture: Architecture,
    pub probabilities: Vec<Vec<f64>>,
    pub macs: usize,
    /// Supernet weights before any training step.
    pub initial_params: Vec<f64>,
    pub final_val_loss: f64,
}

/// Alternates a weight step on `train` with a θ step on `val`.
/// Search touches the data but releases neither the supernet weights nor
/// θ beyond the chosen architecture.
pub fn dnas_search(space: &SearchSpace, train: &Dataset, val: &Dataset, options: &SearchOptions) -> Result<SearchResult, LearnError> {
    if train.is_empty() || val.is_empty() {
        return Err(LearnError::EmptyData);
    }
    let mut net = Supernet::new(space.clone(), options.seed)?;
    let initial_params = net.params.clone();
    let mut val_loss = f64::NAN;
    for _ in 0..options.steps {
        let g = net.loss_and_grad(train, options.loss, 0.0)?;
        net.params.iter_mut().zip(&g.params).for_each(|(p, d)| *p -= options.learning_rate * d);
        let gv = net.loss_and_grad(val, options.loss, options.lambda_cost)?;
        val_loss = gv.loss;
        for (t, d) in net.theta.iter_mut().zip(&gv.theta) {
            t.iter_mut().zip(d).for_each(|(a, b)| *a -= options.theta_learning_rate * b);
        }
    }
    let architecture = net.derive();
    Ok(SearchResult {
        macs: space.macs(&architecture),
        architecture,
        probabilities: net.probabilities(),
        initial_params,
        final_val_loss: val_loss,
    })
}

/// Re-initializes the derived architecture from the seeded initializer and
/// trains it with DP-SGD. The initializer seed is `config.seed`.
pub fn finalize_with_dpsgd(space: &SearchSpace, arch: &Architecture, config: &DpSgdConfig, data: &Dataset, loss: Loss) -> Result<(Mlp, TrainReport), LearnError> {
    let mut model = space.initial_model(arch, config.seed)?;
    let report = train_dpsgd(&mut model, data, loss, config, None)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::NoiseRng;
    use crate::learn::net::Target;

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = NoiseRng::new(seed);
        let mut d = Dataset::default();
        for i in 0..n {
            let c = i % 2;
            let cx = if c == 0 { -1.0 } else { 1.0 };
            d.push(vec![cx + rng.normal(0.5), rng.normal(0.5)], Target::Class(c));
        }
        d
    }

    fn small_space() -> SearchSpace {
        SearchSpace { input_dim: 2, output_dim: 2, output_activation: Activation::SoftmaxOut, blocks: vec![vec![0, 3, 5], vec![0, 4]], temperature: 1.0 }
    }

    #[test]
    fn supernet_gradients_match_finite_differences() {
        let mut net = Supernet::new(small_space(), 3).unwrap();
        let mut rng = NoiseRng::new(9);
        net.theta.iter_mut().flatten().for_each(|t| *t = rng.normal(0.5));
        let data = blobs(6, 1);
        let lambda = 0.3;
        let g = net.loss_and_grad(&data, Loss::CrossEntropy, lambda).unwrap();
        let h = 1e-6;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
        for i in 0..net.params.len() {
            let mut p = net.clone();
            p.params[i] += h;
            let lp = p.loss_and_grad(&data, Loss::CrossEntropy, lambda).unwrap().loss;
            p.params[i] -= 2.0 * h;
            let lm = p.loss_and_grad(&data, Loss::CrossEntropy, lambda).unwrap().loss;
            assert!(rel((lp - lm) / (2.0 * h), g.params[i]) < 1e-4, "param {i}");
        }
        for b in 0..net.theta.len() {
            for j in 0..net.theta[b].len() {
                let mut p = net.clone();
                p.theta[b][j] += h;
                let lp = p.loss_and_grad(&data, Loss::CrossEntropy, lambda).unwrap().loss;
                p.theta[b][j] -= 2.0 * h;
                let lm = p.loss_and_grad(&data, Loss::CrossEntropy, lambda).unwrap().loss;
                assert!(rel((lp - lm) / (2.0 * h), g.theta[b][j]) < 1e-4, "theta {b},{j}");
            }
        }
    }

    #[test]
    fn single_candidate_space() {
        let space = SearchSpace { input_dim: 2, output_dim: 2, output_activation: Activation::SoftmaxOut, blocks: vec![vec![8], vec![0]], temperature: 1.0 };
        let d = blobs(20, 2);
        let r = dnas_search(&space, &d, &d, &SearchOptions { steps: 3, ..Default::default() }).unwrap();
        assert_eq!(r.architecture, vec![8, 0]);
    }

    #[test]
    fn huge_cost_weight_picks_skips() {
        let d = blobs(20, 2);
        let r = dnas_search(&small_space(), &d, &d, &SearchOptions { steps: 20, lambda_cost: 1e6, ..Default::default() }).unwrap();
        assert_eq!(r.architecture, vec![0, 0]);
    }

    #[test]
    fn derived_init_is_supernet_slice() {
        let space = SearchSpace::new(2, 2, Activation::SoftmaxOut, 2);
        let net = Supernet::new(space.clone(), 5).unwrap();
        for arch in [vec![0, 0], vec![8, 0], vec![0, 64], vec![16, 32], vec![64, 8]] {
            let m = space.initial_model(&arch, 5).unwrap();
            let bytes = |v: &[f64]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
            assert_eq!(bytes(&m.params), bytes(&net.slice_for(&arch)), "{arch:?}");
        }
    }

    #[test]
    fn zero_steps_finalize_is_fresh_init() {
        let space = small_space();
        let arch = vec![3, 4];
        let cfg = DpSgdConfig { steps: 0, seed: 17, ..Default::default() };
        let (m, _) = finalize_with_dpsgd(&space, &arch, &cfg, &blobs(4, 0), Loss::CrossEntropy).unwrap();
        assert_eq!(m, space.initial_model(&arch, 17).unwrap());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut net = Supernet::new(small_space(), 0).unwrap();
        net.theta = vec![vec![30.0, -4.0, 1e-3], vec![-700.0, 2.0]];
        for p in net.probabilities() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
