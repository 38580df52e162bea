use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::dropout_seed;
use super::ClassifierModel;
use crate::error::{PulseError, Result};
use crate::scalar::Scalar;
use crate::tokenizer::TokenSequence;
use crate::trace::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 3,
            batch_size: 16,
            lr: 3e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: default_clip(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochReport>,
    pub n_train: usize,
    pub n_val: usize,
}

/// Adam with bias correction.
struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [T], grad: &[T], s: &TrainSettings) {
        self.t += 1;
        let (b1, b2) = (T::of(s.beta1), T::of(s.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let lr = T::of(s.lr);
        let eps = T::of(s.eps);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

fn evaluate<T: Scalar>(model: &ClassifierModel<T>, set: &[(TokenSequence, Label)]) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let refs: Vec<(&TokenSequence, Label)> = set.iter().map(|(s, y)| (s, *y)).collect();
    let loss = model.batch_loss(&refs).to_f64_lossy();
    let seqs: Vec<TokenSequence> = set.iter().map(|(s, _)| s.clone()).collect();
    let verdicts = model.classify_batch(&seqs)?;
    let correct = verdicts.iter().zip(set).filter(|(v, (_, y))| v.label == *y).count();
    Ok((loss, correct as f64 / set.len() as f64))
}

/// Mini-batch training on mean cross-entropy. Deterministic in `settings.seed`.
pub fn train<T: Scalar>(
    model: &mut ClassifierModel<T>,
    train_set: &[(TokenSequence, Label)],
    val_set: &[(TokenSequence, Label)],
    settings: &TrainSettings,
) -> Result<TrainingReport> {
    if train_set.is_empty() {
        return Err(PulseError::InsufficientData("training set is empty".into()));
    }
    let has = |l: Label| train_set.iter().any(|(_, y)| *y == l);
    if !has(Label::Benign) || !has(Label::Malicious) {
        return Err(PulseError::InsufficientData(
            "training set must contain both benign and malicious examples".into(),
        ));
    }
    if settings.batch_size == 0 {
        return Err(PulseError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut adam = Adam::new(model.n_params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainingReport {
        epochs: Vec::with_capacity(settings.epochs),
        n_train: train_set.len(),
        n_val: val_set.len(),
    };
    let p_drop = model.config().dropout;
    let mut step = 0u64;
    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<(&TokenSequence, Label)> = chunk.iter().map(|&i| (&train_set[i].0, train_set[i].1)).collect();
            let drop = dropout_seed(p_drop, settings.seed, epoch as u64, step);
            let (loss, mut grad) = model.batch_loss_and_grad(&batch, Some(drop))?;
            if let Some(max) = settings.clip_norm {
                let norm = grad.norm();
                if norm > T::of(max) {
                    grad.scale(T::of(max) / norm);
                }
            }
            adam.step(&mut model.params, &grad.data, settings);
            loss_sum += loss.to_f64_lossy() * chunk.len() as f64;
            step += 1;
        }
        if !model.all_finite() {
            return Err(PulseError::Contract(format!("non-finite parameters after epoch {}", epoch + 1)));
        }
        let (val_loss, val_accuracy) = evaluate(model, val_set)?;
        let train_loss = loss_sum / train_set.len() as f64;
        log::info!(
            "epoch {}: train loss {train_loss:.4}, val loss {val_loss:.4}, val acc {val_accuracy:.4}",
            epoch + 1
        );
        report.epochs.push(EpochReport {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            val_accuracy,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use rand::Rng;

    fn seq(ids: &[u32], max_len: usize) -> TokenSequence {
        let mut v = vec![2u32];
        v.extend_from_slice(ids);
        v.push(3);
        let n_real = v.len();
        v.resize(max_len, 0);
        TokenSequence {
            attention_mask: (0..max_len).map(|i| u8::from(i < n_real)).collect(),
            ids: v,
            n_real,
        }
    }

    /// Class 0 draws tokens 4..14, class 1 draws 14..24.
    fn separable(n: usize, seed: u64) -> Vec<(TokenSequence, Label)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = Label::from_index(i % 2);
                let base = if label == Label::Benign { 4 } else { 14 };
                let len = rng.gen_range(3..10);
                let ids: Vec<u32> = (0..len).map(|_| base + rng.gen_range(0..10)).collect();
                (seq(&ids, 16), label)
            })
            .collect()
    }

    fn config() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            hidden: 16,
            n_heads: 2,
            ffn: 32,
            max_len: 16,
            vocab_size: 24,
            dropout: 0.0,
            ..ModelConfig::tiny(24)
        }
    }

    fn settings() -> TrainSettings {
        TrainSettings {
            lr: 3e-3,
            seed: 1,
            ..TrainSettings::default()
        }
    }

    #[test]
    fn learns_separable_data() {
        let data = separable(200, 3);
        let (tr, va) = data.split_at(160);
        let mut m = Model::new(config()).unwrap();
        let report = train(&mut m, tr, va, &settings()).unwrap();
        let last = report.epochs.last().unwrap();
        assert_eq!(last.val_accuracy, 1.0, "{report:?}");
        for w in report.epochs.windows(2) {
            assert!(w[1].train_loss < w[0].train_loss, "{report:?}");
        }
    }

    #[test]
    fn random_labels_stay_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<(TokenSequence, Label)> = separable(200, 4)
            .into_iter()
            .map(|(s, _)| (s, Label::from_index(rng.gen_range(0..2))))
            .collect();
        let (tr, va) = data.split_at(160);
        let mut m = Model::new(config()).unwrap();
        let s = TrainSettings {
            epochs: 1,
            ..TrainSettings::default()
        };
        let report = train(&mut m, tr, va, &s).unwrap();
        let v = report.epochs[0].val_loss;
        assert!((v - std::f64::consts::LN_2).abs() < 0.1, "{v}");
    }

    #[test]
    fn single_class_is_rejected() {
        let data: Vec<_> = separable(10, 1).into_iter().filter(|(_, y)| *y == Label::Benign).collect();
        let mut m = Model::new(config()).unwrap();
        assert!(matches!(
            train(&mut m, &data, &[], &settings()),
            Err(PulseError::InsufficientData(_))
        ));
    }

    #[test]
    fn training_is_deterministic_with_dropout() {
        let data = separable(64, 5);
        let mut c = config();
        c.dropout = 0.2;
        let run = || {
            let mut m = Model::new(c.clone()).unwrap();
            let s = TrainSettings {
                epochs: 2,
                ..settings()
            };
            let r = train(&mut m, &data, &data[..8], &s).unwrap();
            (m, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a.params(), b.params());
        assert_eq!(ra, rb);
    }
}
