//! Training loops: plain full-batch gradient descent and DP-SGD.

use serde::{Deserialize, Serialize};

use super::net::{Dataset, Loss, Mlp};
use super::LearnError;
use crate::dp::{AccountingReceipt, ClippedSum, DpSgdConfig, NoiseRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub final_loss: f64,
    /// Infinite when no noise was added.
    pub epsilon: f64,
    pub receipt: AccountingReceipt,
    pub clipped_fraction: f64,
}

/// Seeded He-uniform initialization of one `width × in_dim` layer.
///
/// The stream is laid out for a `width × fan_in` matrix and the first
/// `in_dim ≤ fan_in` columns of every row are kept, so a narrower layer is
/// an exact slice of a wider one drawn with the same `(seed, tag, width)`.
pub fn init_layer(seed: u64, tag: u64, width: usize, fan_in: usize, in_dim: usize) -> Vec<f64> {
    let mut rng = NoiseRng::with_stream(seed, tag.wrapping_mul(0x1_0000).wrapping_add(width as u64));
    let a = (6.0 / fan_in.max(1) as f64).sqrt();
    let mut out = Vec::with_capacity(width * in_dim + width);
    for _ in 0..width {
        for c in 0..fan_in {
            let u = rng.uniform() * 2.0 - 1.0;
            if c < in_dim {
                out.push(u * a);
            }
        }
    }
    out.extend(std::iter::repeat(0.0).take(width));
    out
}

/// Full-batch gradient descent without privacy; `trainable` masks frozen
/// coordinates.
pub fn train_sgd(model: &mut Mlp, data: &Dataset, loss: Loss, learning_rate: f64, steps: u64, trainable: Option<&[bool]>) -> Result<f64, LearnError> {
    if data.is_empty() {
        return Err(LearnError::EmptyData);
    }
    let n = data.len() as f64;
    for _ in 0..steps {
        let mut sum = vec![0.0; model.params.len()];
        for (x, y) in data.x.iter().zip(&data.y) {
            let (_, g) = model.example_grad(x, y, loss)?;
            sum.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
        }
        for (i, (p, s)) in model.params.iter_mut().zip(&sum).enumerate() {
            if trainable.map_or(true, |t| t[i]) {
                *p -= learning_rate * (s / n);
            }
        }
    }
    model.mean_loss(data, loss)
}

/// DP-SGD with per-example clipping over all trainable parameters. Batches
/// are drawn with rate `q` from a generator seeded by `config.seed`.
pub fn train_dpsgd(model: &mut Mlp, data: &Dataset, loss: Loss, config: &DpSgdConfig, trainable: Option<&[bool]>) -> Result<TrainReport, LearnError> {
    config.validate()?;
    if data.is_empty() {
        return Err(LearnError::EmptyData);
    }
    let mut rng = NoiseRng::new(config.seed);
    let b = config.batch_size(data.len());
    let (mut clipped, mut seen) = (0usize, 0usize);
    for _ in 0..config.steps {
        let idx: Vec<usize> = if b == data.len() { (0..b).collect() } else { rng.sample_indices(data.len(), b) };
        let mut acc = ClippedSum::new(model.params.len(), config.clip_norm);
        for &i in &idx {
            let (_, mut g) = model.example_grad(&data.x[i], &data.y[i], loss)?;
            if let Some(t) = trainable {
                g.iter_mut().zip(t).for_each(|(v, on)| if !on { *v = 0.0 });
            }
            acc.add(&mut g)?;
        }
        let report = acc.apply(&mut model.params, trainable, config, &mut rng)?;
        clipped += report.clipped;
        seen += report.batch_size;
    }
    Ok(TrainReport {
        steps: config.steps,
        final_loss: model.mean_loss(data, loss)?,
        epsilon: config.epsilon(),
        receipt: config.receipt(),
        clipped_fraction: if seen > 0 { clipped as f64 / seen as f64 } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::net::{Activation, LayerSpec, Target};

    #[test]
    fn narrow_layer_is_slice_of_wide() {
        let wide = init_layer(7, 3, 4, 10, 10);
        let narrow = init_layer(7, 3, 4, 10, 6);
        for r in 0..4 {
            assert_eq!(&wide[r * 10..r * 10 + 6], &narrow[r * 6..r * 6 + 6]);
        }
    }

    #[test]
    fn frozen_layers_do_not_move() {
        let mut m = Mlp::zeros(
            2,
            vec![LayerSpec { width: 3, activation: Activation::Relu }, LayerSpec { width: 2, activation: Activation::SoftmaxOut }],
        );
        m.params = (0..m.params.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let before = m.params.clone();
        let mask = m.trainable_mask(1);
        let data = Dataset { x: vec![vec![1.0, -1.0], vec![0.5, 2.0]], y: vec![Target::Class(0), Target::Class(1)] };
        let cfg = DpSgdConfig { steps: 5, ..Default::default() };
        train_dpsgd(&mut m, &data, Loss::CrossEntropy, &cfg, Some(&mask)).unwrap();
        let (off, _) = m.layer_offset(1);
        assert_eq!(&m.params[..off], &before[..off]);
        assert_ne!(&m.params[off..], &before[off..]);
    }
}
