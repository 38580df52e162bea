//! Analytic gradients against central finite differences, in `f64`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{loss, loss_and_grad};
use super::{ClassifierModel, WideModel};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tokenizer::TokenSequence;
use crate::trace::Label;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub checked: usize,
    pub all_finite: bool,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Check up to `per_tensor` randomly chosen entries of every tensor.
/// The model is widened to `f64` first; dropout is never applied.
pub fn gradient_check<T: Scalar>(
    model: &ClassifierModel<T>,
    batch: &[(TokenSequence, Label)],
    per_tensor: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut wide: WideModel = model.cast();
    let (_, grad) = loss_and_grad(&wide, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        checked: 0,
        all_finite: grad.data.iter().all(|g| g.is_finite()),
    };
    let layout = wide.layout().to_vec();
    for spec in &layout {
        let mut idx: Vec<usize> = (0..spec.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_tensor);
        idx.sort_unstable();
        for i in idx {
            let at = spec.offset + i;
            let orig = wide.params[at];
            wide.params[at] = orig + step;
            let plus = loss(&wide, batch);
            wide.params[at] = orig - step;
            let minus = loss(&wide, batch);
            wide.params[at] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.data[at], numeric);
            report.checked += 1;
            if !err.is_finite() || err > report.max_relative_error {
                report.max_relative_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst_parameter = format!("{}[{i}]", spec.name);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Attention, ModelConfig, Pooling};

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

    fn tiny(attention: Attention, pooling: Pooling) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            hidden: 8,
            n_heads: 1,
            ffn: 16,
            max_len: 8,
            vocab_size: 12,
            attention,
            pooling,
            dropout: 0.1,
            seed: 42,
        }
    }

    fn batch() -> Vec<(TokenSequence, Label)> {
        vec![
            (seq(&[4, 5, 6], 8), Label::Malicious),
            (seq(&[7, 8], 8), Label::Benign),
            (seq(&[9, 10, 11, 4, 5, 6], 8), Label::Malicious),
        ]
    }

    #[test]
    fn encoder_gradients_agree() {
        let m = WideModel::new(tiny(Attention::Bidirectional, Pooling::FirstToken)).unwrap();
        let r = gradient_check(&m, &batch(), 40, DEFAULT_STEP, 1).unwrap();
        assert!(r.all_finite);
        assert!(r.max_relative_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn causal_gradients_agree_with_two_heads() {
        let mut c = tiny(Attention::Causal, Pooling::LastToken);
        c.n_heads = 2;
        c.n_layers = 2;
        let m = WideModel::new(c).unwrap();
        let r = gradient_check(&m, &batch(), 40, DEFAULT_STEP, 2).unwrap();
        assert!(r.max_relative_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn only_cls_and_sep() {
        let m = WideModel::new(tiny(Attention::Bidirectional, Pooling::FirstToken)).unwrap();
        let b = vec![(seq(&[], 8), Label::Benign)];
        let r = gradient_check(&m, &b, 10, DEFAULT_STEP, 3).unwrap();
        assert!(r.all_finite);
        assert!(r.max_relative_error.is_finite());
    }

    #[test]
    fn reproducible() {
        let m = WideModel::new(tiny(Attention::Bidirectional, Pooling::FirstToken)).unwrap();
        let a = gradient_check(&m, &batch(), 10, DEFAULT_STEP, 9).unwrap();
        let b = gradient_check(&m, &batch(), 10, DEFAULT_STEP, 9).unwrap();
        assert_eq!(a.max_relative_error, b.max_relative_error);
        assert_eq!(a.worst_parameter, b.worst_parameter);
    }
}
