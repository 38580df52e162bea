//! Sample-level decisions: aggregate function verdicts, fit a linear SVM over
//! (malicious percentage, log10 function count), and score the result.

mod features;
mod metrics;
mod svm;

pub use features::{aggregate_sample, SampleFeatures, SizeClass};
pub use metrics::{compute_metrics, Metrics};
pub use svm::{fit_svm, Decision, Hyperplane, RawHyperplane, SvmSettings};
