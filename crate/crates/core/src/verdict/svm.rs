use serde::{Deserialize, Serialize};

use super::features::SampleFeatures;
use crate::error::{PulseError, Result};
use crate::scalar::Scalar;
use crate::trace::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmSettings {
    /// Hinge-loss weight against `0.5 * |w|^2`.
    pub c: f64,
    pub epochs: usize,
    /// Initial step; step `t` uses `lr / sqrt(t + 1)` scaled by the data size.
    pub lr: f64,
}

impl Default for SvmSettings {
    fn default() -> Self {
        SvmSettings {
            c: 1.0,
            epochs: 2000,
            lr: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Malicious,
    Benign,
    Indeterminate,
}

impl Decision {
    pub fn label(self) -> Option<Label> {
        match self {
            Decision::Malicious => Some(Label::Malicious),
            Decision::Benign => Some(Label::Benign),
            Decision::Indeterminate => None,
        }
    }
}

/// Linear boundary over standardized `(malicious_pct, log10 n_functions)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane<T> {
    pub weights: [T; 2],
    pub bias: T,
    pub feature_means: [T; 2],
    pub feature_stds: [T; 2],
}

/// The same boundary expressed over raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHyperplane<T> {
    pub weights: [T; 2],
    pub bias: T,
}

impl<T: Scalar> RawHyperplane<T> {
    pub fn decision_value(&self, x: [T; 2]) -> T {
        self.weights[0] * x[0] + self.weights[1] * x[1] + self.bias
    }

    /// Malicious percentage on the boundary at `n_functions`, if the
    /// boundary is not parallel to the percentage axis.
    pub fn threshold_pct(&self, n_functions: f64) -> Option<T> {
        (self.weights[0] != T::zero())
            .then(|| -(self.weights[1] * T::of(n_functions).log10() + self.bias) / self.weights[0])
    }
}

impl<T: Scalar> Hyperplane<T> {
    pub fn standardize(&self, x: [T; 2]) -> [T; 2] {
        [
            (x[0] - self.feature_means[0]) / self.feature_stds[0],
            (x[1] - self.feature_means[1]) / self.feature_stds[1],
        ]
    }

    /// `w . z + b` with `z` the standardized feature vector.
    pub fn decision_value(&self, x: [T; 2]) -> T {
        let z = self.standardize(x);
        self.weights[0] * z[0] + self.weights[1] * z[1] + self.bias
    }

    /// Verdict and signed margin; degenerate samples are indeterminate.
    pub fn classify(&self, f: &SampleFeatures) -> (Decision, Option<T>) {
        match f.vector::<T>() {
            None => (Decision::Indeterminate, None),
            Some(x) => {
                let m = self.decision_value(x);
                let d = if m > T::zero() { Decision::Malicious } else { Decision::Benign };
                (d, Some(m))
            }
        }
    }

    pub fn to_raw(&self) -> RawHyperplane<T> {
        let w0 = self.weights[0] / self.feature_stds[0];
        let w1 = self.weights[1] / self.feature_stds[1];
        RawHyperplane {
            weights: [w0, w1],
            bias: self.bias - w0 * self.feature_means[0] - w1 * self.feature_means[1],
        }
    }

    /// Jointly rescale weights and bias.
    pub fn scaled(&self, s: T) -> Self {
        Hyperplane {
            weights: [self.weights[0] * s, self.weights[1] * s],
            bias: self.bias * s,
            ..self.clone()
        }
    }

    pub fn cast<U: Scalar>(&self) -> Hyperplane<U> {
        let c = |v: T| U::of(v.to_f64_lossy());
        Hyperplane {
            weights: self.weights.map(c),
            bias: c(self.bias),
            feature_means: self.feature_means.map(c),
            feature_stds: self.feature_stds.map(c),
        }
    }
}

fn objective<T: Scalar>(w: [T; 2], b: T, z: &[[T; 2]], y: &[T], c: T) -> T {
    let hinge: T = z
        .iter()
        .zip(y)
        .map(|(zi, &yi)| (T::one() - yi * (w[0] * zi[0] + w[1] * zi[1] + b)).max(T::zero()))
        .sum();
    T::of(0.5) * (w[0] * w[0] + w[1] * w[1]) + c * hinge
}

/// Soft-margin linear SVM by full-batch sub-gradient descent on
/// `0.5 |w|^2 + C * sum(hinge)`, returning the best iterate seen.
/// Deterministic: no sampling is involved.
pub fn fit_svm<T: Scalar>(features: &[SampleFeatures], labels: &[Label], settings: &SvmSettings) -> Result<Hyperplane<T>> {
    if features.len() != labels.len() {
        return Err(PulseError::Contract(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if !labels.contains(&Label::Benign) || !labels.contains(&Label::Malicious) {
        return Err(PulseError::InsufficientData("SVM needs both benign and malicious samples".into()));
    }
    if settings.c <= 0.0 || settings.lr <= 0.0 {
        return Err(PulseError::Config("SVM c and lr must be positive".into()));
    }
    let mut xs = Vec::with_capacity(features.len());
    for f in features {
        xs.push(f.vector::<T>().ok_or_else(|| {
            PulseError::InsufficientData(format!("sample {} has no functions", f.sample_id))
        })?);
    }
    let n = T::of(xs.len() as f64);
    let mut means = [T::zero(); 2];
    let mut stds = [T::zero(); 2];
    for k in 0..2 {
        means[k] = xs.iter().map(|x| x[k]).sum::<T>() / n;
        let var = xs.iter().map(|x| (x[k] - means[k]).powi(2)).sum::<T>() / n;
        stds[k] = if var > T::zero() { var.sqrt() } else { T::one() };
    }
    let z: Vec<[T; 2]> = xs
        .iter()
        .map(|x| [(x[0] - means[0]) / stds[0], (x[1] - means[1]) / stds[1]])
        .collect();
    let y: Vec<T> = labels
        .iter()
        .map(|l| if *l == Label::Malicious { T::one() } else { -T::one() })
        .collect();

    let c = T::of(settings.c);
    let scale = T::one() / (T::one() + c * n);
    let mut w = [T::zero(); 2];
    let mut b = T::zero();
    let mut best = (objective(w, b, &z, &y, c), w, b);
    for t in 0..settings.epochs {
        let mut gw = w;
        let mut gb = T::zero();
        for (zi, &yi) in z.iter().zip(&y) {
            if yi * (w[0] * zi[0] + w[1] * zi[1] + b) < T::one() {
                gw[0] -= c * yi * zi[0];
                gw[1] -= c * yi * zi[1];
                gb -= c * yi;
            }
        }
        let eta = T::of(settings.lr) * scale / T::of((t + 1) as f64).sqrt();
        w[0] -= eta * gw[0];
        w[1] -= eta * gw[1];
        b -= eta * gb;
        let obj = objective(w, b, &z, &y, c);
        if obj < best.0 {
            best = (obj, w, b);
        }
    }
    let (_, w, b) = best;
    if w[0] == T::zero() && w[1] == T::zero() {
        return Err(PulseError::Data("SVM converged to a zero weight vector".into()));
    }
    Ok(Hyperplane {
        weights: w,
        bias: b,
        feature_means: means,
        feature_stds: stds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feat(pct_of_100: usize, n: usize) -> SampleFeatures {
        SampleFeatures::from_counts("s", n, n * pct_of_100 / 100)
    }

    #[test]
    fn symmetric_pair_splits_at_fifty() {
        let f = [feat(0, 10), feat(100, 10)];
        let h: Hyperplane<f64> = fit_svm(&f, &[Label::Benign, Label::Malicious], &SvmSettings::default()).unwrap();
        let t = h.to_raw().threshold_pct(10.0).unwrap();
        assert!((t - 50.0).abs() <= 1.0, "{t}");
    }

    #[test]
    fn separable_features_fit_perfectly() {
        let mut f = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let n = 5 + i * 37;
            f.push(SampleFeatures::from_counts(format!("b{i}"), n, n * (i % 4) / 10));
            y.push(Label::Benign);
            f.push(SampleFeatures::from_counts(format!("m{i}"), n, n * (6 + i % 4) / 10));
            y.push(Label::Malicious);
        }
        let h: Hyperplane<f64> = fit_svm(&f, &y, &SvmSettings::default()).unwrap();
        for (fi, yi) in f.iter().zip(&y) {
            let (d, m) = h.classify(fi);
            assert_eq!(d.label(), Some(*yi), "{fi:?}");
            assert!(m.unwrap().abs() > 0.0);
        }
        assert!(h.weights[0] > 0.0);
    }

    #[test]
    fn errors() {
        let s = SvmSettings::default();
        assert!(matches!(
            fit_svm::<f64>(&[feat(0, 10)], &[Label::Benign], &s),
            Err(PulseError::InsufficientData(_))
        ));
        let f = [feat(0, 10), SampleFeatures::from_counts("e", 0, 0)];
        assert!(fit_svm::<f64>(&f, &[Label::Benign, Label::Malicious], &s).is_err());
    }

    #[test]
    fn degenerate_is_indeterminate() {
        let h: Hyperplane<f64> =
            fit_svm(&[feat(0, 10), feat(100, 10)], &[Label::Benign, Label::Malicious], &SvmSettings::default()).unwrap();
        let (d, m) = h.classify(&SampleFeatures::from_counts("e", 0, 0));
        assert_eq!(d, Decision::Indeterminate);
        assert!(m.is_none());
    }

    fn plane() -> impl Strategy<Value = Hyperplane<f64>> {
        (
            -5.0..5.0f64,
            -5.0..5.0f64,
            -3.0..3.0f64,
            0.0..100.0f64,
            0.0..3.0f64,
            0.1..40.0f64,
            0.1..2.0f64,
        )
            .prop_map(|(w0, w1, b, m0, m1, s0, s1)| Hyperplane {
                weights: [w0, w1],
                bias: b,
                feature_means: [m0, m1],
                feature_stds: [s0, s1],
            })
    }

    fn sample() -> impl Strategy<Value = SampleFeatures> {
        (1usize..5000).prop_flat_map(|n| (Just(n), 0..=n)).prop_map(|(n, k)| SampleFeatures::from_counts("p", n, k))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn positive_rescaling_keeps_decisions(h in plane(), s in 1e-3..1e3f64, f in sample()) {
            let a = h.classify(&f);
            let b = h.scaled(s).classify(&f);
            prop_assume!(a.1.unwrap().abs() > 1e-9);
            prop_assert_eq!(a.0, b.0);
        }

        #[test]
        fn raw_and_standardized_agree(h in plane(), f in sample()) {
            let x: [f64; 2] = f.vector().unwrap();
            let s = h.decision_value(x);
            let r = h.to_raw().decision_value(x);
            prop_assert!((s - r).abs() <= 1e-9 * (1.0 + s.abs()), "{} vs {}", s, r);
        }

        #[test]
        fn more_malicious_never_flips_to_benign(n in 1usize..2000, k in 0usize..2000, extra in 0usize..2000) {
            let k = k.min(n);
            let mut f = Vec::new();
            let mut y = Vec::new();
            for i in 0..10 {
                f.push(feat(i * 4, 20 + i * 30));
                y.push(Label::Benign);
                f.push(feat(60 + i * 4, 20 + i * 30));
                y.push(Label::Malicious);
            }
            let h: Hyperplane<f64> = fit_svm(&f, &y, &SvmSettings { epochs: 300, ..SvmSettings::default() }).unwrap();
            let lo = SampleFeatures::from_counts("a", n, k);
            let hi = SampleFeatures::from_counts("b", n, (k + extra).min(n));
            if h.classify(&lo).0 == Decision::Malicious {
                prop_assert_eq!(h.classify(&hi).0, Decision::Malicious);
            }
        }
    }
}
