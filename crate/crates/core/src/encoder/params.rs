use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EncoderConfig;
use crate::error::{Error, Result};

/// Weights of one encoder block. Vectors are stored as `1 × n` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    pub w_query: Array2<f64>,
    pub b_query: Array2<f64>,
    pub w_key: Array2<f64>,
    pub b_key: Array2<f64>,
    pub w_value: Array2<f64>,
    pub b_value: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array2<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub segment_embedding: Array2<f64>,
    pub match_embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_gain: Array2<f64>,
    pub final_bias: Array2<f64>,
    /// `d_model × 2` classifier weights.
    pub head_weight: Array2<f64>,
    pub head_bias: Array2<f64>,
}

fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl LayerParams {
    fn init<R: Rng>(rng: &mut R, d: usize, ff: usize) -> Self {
        let bd = 1.0 / (d as f64).sqrt();
        let bf = 1.0 / (ff as f64).sqrt();
        Self {
            ln1_gain: Array2::ones((1, d)),
            ln1_bias: Array2::zeros((1, d)),
            w_query: uniform(rng, d, d, bd),
            b_query: Array2::zeros((1, d)),
            w_key: uniform(rng, d, d, bd),
            b_key: Array2::zeros((1, d)),
            w_value: uniform(rng, d, d, bd),
            b_value: Array2::zeros((1, d)),
            w_out: uniform(rng, d, d, bd),
            b_out: Array2::zeros((1, d)),
            ln2_gain: Array2::ones((1, d)),
            ln2_bias: Array2::zeros((1, d)),
            w_ff1: uniform(rng, d, ff, bd),
            b_ff1: Array2::zeros((1, ff)),
            w_ff2: uniform(rng, ff, d, bf),
            b_ff2: Array2::zeros((1, d)),
        }
    }

    fn tensors(&self) -> [(&'static str, &Array2<f64>); 16] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_query", &self.w_query),
            ("b_query", &self.b_query),
            ("w_key", &self.w_key),
            ("b_key", &self.b_key),
            ("w_value", &self.w_value),
            ("b_value", &self.b_value),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_ff1", &self.w_ff1),
            ("b_ff1", &self.b_ff1),
            ("w_ff2", &self.w_ff2),
            ("b_ff2", &self.b_ff2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_query,
            &mut self.b_query,
            &mut self.w_key,
            &mut self.b_key,
            &mut self.w_value,
            &mut self.b_value,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }
}

impl EncoderParams {
    /// Seeded initialization: weights uniform in `±1/√fan_in`, biases zero,
    /// layer-norm gains one.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let bd = 1.0 / (d as f64).sqrt();
        let token_embedding = uniform(&mut rng, config.vocab_size, d, bd);
        let position_embedding = uniform(&mut rng, config.max_len, d, bd);
        let segment_embedding = uniform(&mut rng, 2, d, bd);
        let match_embedding = uniform(&mut rng, 2, d, bd);
        let layers = (0..config.n_layers).map(|_| LayerParams::init(&mut rng, d, config.d_ff)).collect();
        let head_weight = uniform(&mut rng, d, 2, bd);
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            segment_embedding,
            match_embedding,
            layers,
            final_gain: Array2::ones((1, d)),
            final_bias: Array2::zeros((1, d)),
            head_weight,
            head_bias: Array2::zeros((1, 2)),
        })
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|t| t.fill(0.0));
        z
    }

    /// Visits every tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
            ("segment_embedding".into(), &self.segment_embedding),
            ("match_embedding".into(), &self.match_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out.push(("head_weight".into(), &self.head_weight));
        out.push(("head_bias".into(), &self.head_bias));
        out
    }

    /// Mutable tensors in the same order as [`EncoderParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.segment_embedding,
            &mut self.match_embedding,
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut Array2<f64>)) {
        for t in self.tensors_mut() {
            f(t);
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.scaled_add(scale, src);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let (d, f) = (c.d_model, c.d_ff);
        let expect = |name: &str, t: &Array2<f64>, shape: (usize, usize)| {
            if t.dim() == shape {
                Ok(())
            } else {
                Err(Error::Shape(format!("{name} is {:?}, expected {shape:?}", t.dim())))
            }
        };
        expect("token_embedding", &self.token_embedding, (c.vocab_size, d))?;
        expect("position_embedding", &self.position_embedding, (c.max_len, d))?;
        expect("segment_embedding", &self.segment_embedding, (2, d))?;
        expect("match_embedding", &self.match_embedding, (2, d))?;
        if self.layers.len() != c.n_layers {
            return Err(Error::Shape(format!("{} layers, config says {}", self.layers.len(), c.n_layers)));
        }
        for l in &self.layers {
            for (name, t) in l.tensors() {
                let shape = match name {
                    "w_query" | "w_key" | "w_value" | "w_out" => (d, d),
                    "w_ff1" => (d, f),
                    "b_ff1" => (1, f),
                    "w_ff2" => (f, d),
                    _ => (1, d),
                };
                expect(name, t, shape)?;
            }
        }
        expect("final_gain", &self.final_gain, (1, d))?;
        expect("final_bias", &self.final_bias, (1, d))?;
        expect("head_weight", &self.head_weight, (d, 2))?;
        expect("head_bias", &self.head_bias, (1, 2))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(&Checkpoint::new(self.clone()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_slice(&bytes)
    }
}

pub const CHECKPOINT_FORMAT: &str = "dedup-encoder";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON container for the encoder configuration and every tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub params: EncoderParams,
}

impl Checkpoint {
    pub fn new(params: EncoderParams) -> Self {
        Self { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, params }
    }

    pub fn from_slice(bytes: &[u8]) -> Result<EncoderParams> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        ck.params.check_shapes()?;
        if let Some(name) = ck.params.first_non_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(ck.params)
    }
}
