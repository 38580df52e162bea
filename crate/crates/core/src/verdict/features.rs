use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::FunctionVerdict;
use crate::scalar::Scalar;
use crate::trace::Label;

/// Bubble-size bucket by surviving function count. C1 also takes the
/// 1 and 2 function samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    C1,
    C2,
    C3,
    C4,
}

impl SizeClass {
    pub fn of(n_functions: usize) -> SizeClass {
        match n_functions {
            0..=10 => SizeClass::C1,
            11..=100 => SizeClass::C2,
            101..=1000 => SizeClass::C3,
            _ => SizeClass::C4,
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFeatures {
    pub sample_id: String,
    pub n_functions: usize,
    pub malicious_count: usize,
    pub malicious_pct: f64,
    pub size_class: SizeClass,
    /// No functions survived leakage removal.
    pub degenerate: bool,
}

impl SampleFeatures {
    pub fn from_counts(sample_id: impl Into<String>, n_functions: usize, malicious_count: usize) -> Self {
        assert!(malicious_count <= n_functions, "malicious_count exceeds n_functions");
        let malicious_pct = if n_functions == 0 {
            0.0
        } else {
            100.0 * malicious_count as f64 / n_functions as f64
        };
        SampleFeatures {
            sample_id: sample_id.into(),
            n_functions,
            malicious_count,
            malicious_pct,
            size_class: SizeClass::of(n_functions),
            degenerate: n_functions == 0,
        }
    }

    /// `(malicious_pct, log10 n_functions)`; `None` for degenerate samples.
    pub fn vector<T: Scalar>(&self) -> Option<[T; 2]> {
        (!self.degenerate).then(|| [T::of(self.malicious_pct), T::of(self.n_functions as f64).log10()])
    }
}

pub fn aggregate_sample(sample_id: &str, verdicts: &[FunctionVerdict]) -> SampleFeatures {
    let malicious = verdicts.iter().filter(|v| v.label == Label::Malicious).count();
    SampleFeatures::from_counts(sample_id, verdicts.len(), malicious)
}
