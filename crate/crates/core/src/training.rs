//! R-Drop fine-tuning: every example goes through the encoder twice with
//! independent dropout masks; the loss adds a symmetric KL term between the
//! two predicted distributions to the two negative log-likelihoods.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{backward_logits, forward, forward_with_cache, DropoutMask, EncoderParams};
use crate::error::{Error, Result};
use crate::preprocess::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs_per_round: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Probabilities are floored at this value before taking logs.
    pub kl_epsilon: f64,
    /// Positives are repeated until they make up at least this many per
    /// negative (1:3 by default).
    pub positive_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            batch_size: 34,
            epochs_per_round: 20,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            kl_epsilon: 1e-12,
            positive_ratio: 1.0 / 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::config("train.alpha", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "moment decay rates must lie in [0, 1)"));
        }
        if !(self.kl_epsilon > 0.0) || !(self.positive_ratio >= 0.0) {
            return Err(Error::config("train.kl_epsilon", "kl_epsilon must be positive and positive_ratio non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub pair_id: String,
    pub seq: TokenSequence,
    /// 1 = duplicate.
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
}

fn check_probability(p: [f64; 2]) -> Result<()> {
    let ok = p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && (p[0] + p[1] - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(Error::NotProbability(p.to_vec()))
    }
}

fn clamp(p: [f64; 2], eps: f64) -> [f64; 2] {
    [p[0].max(eps), p[1].max(eps)]
}

/// Two-pass NLL plus `alpha` times the symmetric KL divergence.
///
/// The symmetric KL is evaluated as `½ Σ (p1 − p2)(ln p1 − ln p2)`, which
/// equals `½ (KL(p1‖p2) + KL(p2‖p1))` and is exactly symmetric in its
/// arguments.
pub fn rdrop_loss(p1: [f64; 2], p2: [f64; 2], y: u8, alpha: f64, kl_epsilon: f64) -> Result<LossBreakdown> {
    check_probability(p1)?;
    check_probability(p2)?;
    let y = usize::from(y.min(1));
    let (c1, c2) = (clamp(p1, kl_epsilon), clamp(p2, kl_epsilon));
    let nll = -c1[y].ln() - c2[y].ln();
    let kl = 0.5 * (0..2).map(|k| (c1[k] - c2[k]) * (c1[k].ln() - c2[k].ln())).sum::<f64>();
    Ok(LossBreakdown { nll, kl, total: nll + alpha * kl })
}

/// Gradients of the R-Drop total with respect to the logits of each pass.
pub fn rdrop_logit_grads(p1: [f64; 2], p2: [f64; 2], y: u8, alpha: f64, kl_epsilon: f64) -> ([f64; 2], [f64; 2]) {
    let y = usize::from(y.min(1));
    let (c1, c2) = (clamp(p1, kl_epsilon), clamp(p2, kl_epsilon));
    let mut dp1 = [0.0; 2];
    let mut dp2 = [0.0; 2];
    for k in 0..2 {
        let log_ratio = c1[k].ln() - c2[k].ln();
        dp1[k] = 0.5 * alpha * (log_ratio + (c1[k] - c2[k]) / c1[k]);
        dp2[k] = 0.5 * alpha * (-log_ratio + (c2[k] - c1[k]) / c2[k]);
    }
    dp1[y] -= 1.0 / c1[y];
    dp2[y] -= 1.0 / c2[y];
    // Clamped components do not depend on the logits.
    for k in 0..2 {
        if p1[k] < kl_epsilon {
            dp1[k] = 0.0;
        }
        if p2[k] < kl_epsilon {
            dp2[k] = 0.0;
        }
    }
    (softmax_backward(p1, dp1), softmax_backward(p2, dp2))
}

fn softmax_backward(p: [f64; 2], dp: [f64; 2]) -> [f64; 2] {
    let dot = p[0] * dp[0] + p[1] * dp[1];
    [p[0] * (dp[0] - dot), p[1] * (dp[1] - dot)]
}

/// Adaptive-moment optimizer state for one training round.
pub struct Adam {
    m: EncoderParams,
    v: EncoderParams,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &EncoderParams, config: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_epsilon,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        let grads = grads.tensors();
        for (((p, m), v), (_, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads)
        {
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
    /// Accuracy with dropout disabled on the distinct training examples,
    /// measured after the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n").map_err(|e| Error::io("<training log>", e))?;
        }
        Ok(())
    }
}

/// R-Drop loss and its gradient for one example, with fixed masks.
pub fn example_loss_and_grad(
    params: &EncoderParams,
    seq: &TokenSequence,
    label: u8,
    masks: (Option<&DropoutMask>, Option<&DropoutMask>),
    config: &TrainConfig,
    grads: &mut EncoderParams,
) -> Result<LossBreakdown> {
    let first = forward_with_cache(params, seq, masks.0)?;
    let second = forward_with_cache(params, seq, masks.1)?;
    let loss = rdrop_loss(first.probs, second.probs, label, config.alpha, config.kl_epsilon)?;
    let (d1, d2) = rdrop_logit_grads(first.probs, second.probs, label, config.alpha, config.kl_epsilon);
    backward_logits(params, &first, d1, grads);
    backward_logits(params, &second, d2, grads);
    Ok(loss)
}

/// Index list for one round: every example once, plus repeated positives
/// when they are scarcer than `positive_ratio` per negative.
fn oversampled(examples: &[LabeledExample], ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut positives: Vec<usize> = order.iter().copied().filter(|&i| examples[i].label == 1).collect();
    let negatives = examples.len() - positives.len();
    let target = (negatives as f64 * ratio).ceil() as usize;
    if !positives.is_empty() && positives.len() < target {
        positives.shuffle(rng);
        let extra = target - positives.len();
        order.extend(positives.iter().cycle().take(extra).copied());
    }
    order
}

/// Trains for `epochs_per_round` epochs starting from `params`.
pub fn train_round(
    params: &EncoderParams,
    examples: &[LabeledExample],
    config: &TrainConfig,
) -> Result<(EncoderParams, TrainingLog)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::config("examples", "training needs at least one labeled example"));
    }
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = oversampled(examples, config.positive_ratio, &mut rng);
    let mut adam = Adam::new(&params, config);
    let dropout = params.config.dropout_rate > 0.0;
    let mask_seed = config.seed ^ 0x0d0d_f00d;
    let mut pass: u64 = 0;
    let mut log = TrainingLog::default();

    for epoch in 0..config.epochs_per_round {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = params.zeros_like();
            let mut batch_total = 0.0;
            for &i in batch {
                let ex = &examples[i];
                let n = ex.seq.len();
                let (m1, m2) = if dropout {
                    let m1 = DropoutMask::sample(&params.config, n, mask_seed, pass);
                    let m2 = DropoutMask::sample(&params.config, n, mask_seed, pass + 1);
                    (Some(m1), Some(m2))
                } else {
                    (None, None)
                };
                pass += 2;
                let loss = example_loss_and_grad(&params, &ex.seq, ex.label, (m1.as_ref(), m2.as_ref()), config, &mut grads)?;
                sum.nll += loss.nll;
                sum.kl += loss.kl;
                sum.total += loss.total;
                batch_total += loss.total;
            }
            if !batch_total.is_finite() || grads.first_non_finite().is_some() {
                let ids: Vec<&str> = batch.iter().map(|&i| examples[i].pair_id.as_str()).collect();
                log::error!("training diverged at epoch {epoch}, batch {b}: {ids:?}");
                return Err(Error::Diverged { epoch, batch: b, loss: batch_total });
            }
            grads.for_each_mut(|t| *t /= batch.len() as f64);
            adam.step(&mut params, &grads);
        }
        let count = order.len() as f64;
        let correct = examples
            .iter()
            .map(|ex| forward(&params, &ex.seq, None).map(|p| u8::from(p.p >= 0.5) == ex.label))
            .collect::<Result<Vec<bool>>>()?
            .into_iter()
            .filter(|&c| c)
            .count();
        log.epochs.push(EpochLog {
            epoch,
            nll: sum.nll / count,
            kl: sum.kl / count,
            total: sum.total / count,
            accuracy: correct as f64 / examples.len() as f64,
        });
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_distributions() {
        let l = rdrop_loss([0.5, 0.5], [0.5, 0.5], 1, 0.8, 1e-12).unwrap();
        assert_eq!(l.kl, 0.0);
        assert!((l.nll - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.total, l.nll);
    }

    #[test]
    fn hand_evaluated_case() {
        let l = rdrop_loss([0.9, 0.1], [0.6, 0.4], 0, 0.8, 1e-12).unwrap();
        let kl = 0.5 * (0.9 * (0.9f64 / 0.6).ln() + 0.1 * (0.1f64 / 0.4).ln() + 0.6 * (0.6f64 / 0.9).ln() + 0.4 * (0.4f64 / 0.1).ln());
        assert!((l.kl - kl).abs() < 1e-12);
        assert!((l.nll - 0.6162).abs() < 1e-4);
        assert!((l.kl - 0.2688).abs() < 1e-4);
        assert!((l.total - 0.8312).abs() < 1e-4);
    }

    #[test]
    fn alpha_zero_is_nll() {
        let l = rdrop_loss([0.7, 0.3], [0.2, 0.8], 1, 0.0, 1e-12).unwrap();
        assert_eq!(l.total, l.nll);
    }

    #[test]
    fn rejects_non_probabilities() {
        assert!(rdrop_loss([0.7, 0.4], [0.5, 0.5], 1, 0.8, 1e-12).is_err());
        assert!(rdrop_loss([f64::NAN, 0.5], [0.5, 0.5], 1, 0.8, 1e-12).is_err());
        assert!(rdrop_loss([1.2, -0.2], [0.5, 0.5], 1, 0.8, 1e-12).is_err());
    }

    #[test]
    fn clamped_extremes_stay_finite() {
        let l = rdrop_loss([1.0, 0.0], [0.0, 1.0], 0, 0.8, 1e-12).unwrap();
        assert!(l.total.is_finite() && l.kl > 0.0);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let softmax = |z: [f64; 2]| crate::encoder::softmax2(z);
        let z1 = [0.3, -1.2];
        let z2 = [-0.4, 0.9];
        for y in [0u8, 1] {
            let (g1, g2) = rdrop_logit_grads(softmax(z1), softmax(z2), y, 0.8, 1e-12);
            let f = |a: [f64; 2], b: [f64; 2]| rdrop_loss(softmax(a), softmax(b), y, 0.8, 1e-12).unwrap().total;
            let h = 1e-6;
            for k in 0..2 {
                let (mut up, mut dn) = (z1, z1);
                up[k] += h;
                dn[k] -= h;
                let fd = (f(up, z2) - f(dn, z2)) / (2.0 * h);
                assert!((fd - g1[k]).abs() < 1e-7, "pass 1, k={k}: {fd} vs {}", g1[k]);
                let (mut up, mut dn) = (z2, z2);
                up[k] += h;
                dn[k] -= h;
                let fd = (f(z1, up) - f(z1, dn)) / (2.0 * h);
                assert!((fd - g2[k]).abs() < 1e-7, "pass 2, k={k}: {fd} vs {}", g2[k]);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig { alpha: -0.1, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "train.alpha"));
        c.alpha = 0.8;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
