use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;

/// Inverted-dropout multipliers for one forward pass over a sequence of a
/// given length: each entry is 0 or `1 / keep`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub embedding: Array2<f64>,
    /// `(attention output, feed-forward output)` for each layer.
    pub layers: Vec<(Array2<f64>, Array2<f64>)>,
    pub head: Array2<f64>,
}

impl DropoutMask {
    /// Mask for a sequence of `seq_len` real tokens. The same
    /// `(seed, pass_index)` always yields the same mask.
    pub fn sample(config: &EncoderConfig, seq_len: usize, seed: u64, pass_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pass_index);
        let keep = 1.0 - config.dropout_rate;
        let d = config.d_model;
        let mut draw = |rows: usize| {
            Array2::from_shape_fn((rows, d), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        };
        let embedding = draw(seq_len);
        let layers = (0..config.n_layers)
            .map(|l| {
                let rows = if l + 1 == config.n_layers { 1 } else { seq_len };
                (draw(rows), draw(rows))
            })
            .collect();
        let head = draw(1);
        Self { embedding, layers, head }
    }

    pub fn keep_fraction(&self) -> f64 {
        let mut kept = 0usize;
        let mut total = 0usize;
        let mut count = |a: &Array2<f64>| {
            kept += a.iter().filter(|&&v| v != 0.0).count();
            total += a.len();
        };
        count(&self.embedding);
        for (a, f) in &self.layers {
            count(a);
            count(f);
        }
        count(&self.head);
        kept as f64 / total as f64
    }
}
