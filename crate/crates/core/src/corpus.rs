//! Function-level corpus bookkeeping: global deduplication, cross-label
//! filtering, test-time leakage removal and instruction frequency counts.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::normalize::NormalizedFunction;
use crate::trace::{Label, RawSample};

/// Distinct function texts.
pub fn deduplicate<'a, I>(functions: I) -> BTreeSet<String>
where
    I: IntoIterator<Item = &'a str>,
{
    functions.into_iter().map(str::to_string).collect()
}

/// `malicious \ benign`.
pub fn cross_label_filter(malicious: &BTreeSet<String>, benign: &BTreeSet<String>) -> BTreeSet<String> {
    malicious.difference(benign).cloned().collect()
}

/// Drop every function already seen in training, preserving order.
pub fn remove_leakage<S: AsRef<str>>(test_functions: &[S], training_union: &HashSet<String>) -> Vec<String> {
    test_functions
        .iter()
        .map(AsRef::as_ref)
        .filter(|f| !training_union.contains(*f))
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    #[serde(rename = "binaries")]
    pub n_binaries: usize,
    #[serde(rename = "initial")]
    pub n_initial: usize,
    #[serde(rename = "deduplicated")]
    pub n_deduplicated: usize,
    #[serde(rename = "filtered")]
    pub n_filtered: usize,
    /// Percentage of filtered functions longer than the token budget.
    #[serde(rename = "pct_over_256")]
    pub pct_over_max_len: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    pub benign: BTreeSet<String>,
    pub malicious: BTreeSet<String>,
    /// Per-sample function texts, minus malicious functions that were filtered.
    pub per_sample: BTreeMap<String, Vec<String>>,
    pub stats: CorpusStats,
}

impl LabeledCorpus {
    /// Build a training corpus from segmented, length-filtered functions.
    /// `length_of` measures a function for the over-budget percentage.
    pub fn build<F>(functions: &[NormalizedFunction], n_binaries: usize, budget: usize, length_of: F) -> Self
    where
        F: Fn(&str) -> usize,
    {
        let by_label = |label: Label| {
            deduplicate(
                functions
                    .iter()
                    .filter(|f| f.label == label)
                    .map(|f| f.text.as_str()),
            )
        };
        let benign = by_label(Label::Benign);
        let malicious_all = by_label(Label::Malicious);
        let malicious = cross_label_filter(&malicious_all, &benign);

        let mut per_sample: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for f in functions {
            let keep = match f.label {
                Label::Benign => true,
                Label::Malicious => malicious.contains(&f.text),
            };
            let entry = per_sample.entry(f.sample_id.clone()).or_default();
            if keep {
                entry.push(f.text.clone());
            }
        }

        let n_filtered = benign.len() + malicious.len();
        let over = benign
            .iter()
            .chain(malicious.iter())
            .filter(|t| length_of(t) > budget)
            .count();
        let stats = CorpusStats {
            n_binaries,
            n_initial: functions.len(),
            n_deduplicated: benign.len() + malicious_all.len(),
            n_filtered,
            pct_over_max_len: if n_filtered == 0 {
                0.0
            } else {
                100.0 * over as f64 / n_filtered as f64
            },
        };
        LabeledCorpus {
            benign,
            malicious,
            per_sample,
            stats,
        }
    }

    pub fn training_union(&self) -> HashSet<String> {
        self.benign.iter().chain(self.malicious.iter()).cloned().collect()
    }

    /// Iterate labelled training examples in deterministic order.
    pub fn examples(&self) -> impl Iterator<Item = (&str, Label)> {
        self.benign
            .iter()
            .map(|t| (t.as_str(), Label::Benign))
            .chain(self.malicious.iter().map(|t| (t.as_str(), Label::Malicious)))
    }

    /// Recompute the over-budget percentage with a different length measure.
    pub fn restat<F: Fn(&str) -> usize>(&mut self, budget: usize, length_of: F) {
        let n = self.stats.n_filtered;
        let over = self.examples().filter(|(t, _)| length_of(t) > budget).count();
        self.stats.pct_over_max_len = if n == 0 { 0.0 } else { 100.0 * over as f64 / n as f64 };
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionFrequencies {
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
    /// Number of distinct instructions seen more than 10 times.
    pub over_ten: usize,
}

/// Counts of distinct rendered instructions across the samples.
pub fn instruction_frequencies<'a, I>(samples: I) -> InstructionFrequencies
where
    I: IntoIterator<Item = &'a RawSample>,
{
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut total = 0;
    for s in samples {
        for i in &s.instructions {
            *counts.entry(i.render()).or_default() += 1;
            total += 1;
        }
    }
    let over_ten = counts.values().filter(|&&c| c > 10).count();
    InstructionFrequencies {
        counts,
        total,
        over_ten,
    }
}

/// Occurrence counts of function texts.
pub fn function_frequencies<'a, I>(functions: I) -> BTreeMap<String, u64>
where
    I: IntoIterator<Item = &'a NormalizedFunction>,
{
    let mut counts = BTreeMap::new();
    for f in functions {
        *counts.entry(f.text.clone()).or_default() += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn func(text: &str, sample: &str, label: Label) -> NormalizedFunction {
        NormalizedFunction {
            words: text.split(' ').map(str::to_string).collect(),
            text: text.into(),
            sample_id: sample.into(),
            label,
            index_in_sample: 0,
            first_instruction: 0,
            n_instructions: 6,
        }
    }

    #[test]
    fn dedup_examples() {
        assert_eq!(deduplicate(["a b c", "a b c", "d e f"]), set(&["a b c", "d e f"]));

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let templates: Vec<String> = (0..100).map(|i| format!("tmpl{i} ret")).collect();
        let mut draws: Vec<&str> = templates.iter().map(String::as_str).collect();
        while draws.len() < 1000 {
            draws.push(&templates[rng.gen_range(0..100)]);
        }
        assert_eq!(deduplicate(draws).len(), 100);
    }

    #[test]
    fn cross_label_examples() {
        assert_eq!(cross_label_filter(&set(&["m1", "s1"]), &set(&["b1", "s1"])), set(&["m1"]));
        assert_eq!(cross_label_filter(&set(&["m1", "m2"]), &set(&["b1"])), set(&["m1", "m2"]));
    }

    #[test]
    fn leakage_examples() {
        let test: Vec<String> = (0..10).map(|i| format!("f{i}")).collect();
        let union: HashSet<String> = ["f1", "f4", "f5", "f9"].iter().map(|s| s.to_string()).collect();
        assert_eq!(remove_leakage(&test, &union), ["f0", "f2", "f3", "f6", "f7", "f8"]);

        let all: HashSet<String> = test.iter().cloned().collect();
        assert!(remove_leakage(&test, &all).is_empty());
    }

    #[test]
    fn build_filters_shared_functions() {
        let fns = vec![
            func("shared", "b1", Label::Benign),
            func("benign only", "b1", Label::Benign),
            func("shared", "m1", Label::Malicious),
            func("evil", "m1", Label::Malicious),
            func("evil", "m2", Label::Malicious),
        ];
        let c = LabeledCorpus::build(&fns, 3, 1, |t| t.split(' ').count());
        assert_eq!(c.benign, set(&["benign only", "shared"]));
        assert_eq!(c.malicious, set(&["evil"]));
        assert_eq!(c.per_sample["m1"], ["evil"]);
        assert_eq!(c.per_sample["b1"], ["shared", "benign only"]);
        assert_eq!(
            c.stats,
            CorpusStats {
                n_binaries: 3,
                n_initial: 5,
                n_deduplicated: 4,
                n_filtered: 3,
                pct_over_max_len: 100.0 / 3.0,
            }
        );
        assert!(c.benign.is_disjoint(&c.malicious));
    }

    #[test]
    fn stats_json_keys() {
        let v = serde_json::to_value(CorpusStats::default()).unwrap();
        for k in ["binaries", "initial", "deduplicated", "filtered", "pct_over_256"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn texts() -> impl Strategy<Value = Vec<String>> {
            proptest::collection::vec("[a-e]{1,2}", 0..40)
        }

        proptest! {
            #[test]
            fn set_algebra(m in texts(), b in texts()) {
                let m = deduplicate(m.iter().map(String::as_str));
                let b = deduplicate(b.iter().map(String::as_str));
                let filtered = cross_label_filter(&m, &b);
                prop_assert_eq!(filtered.len() + m.intersection(&b).count(), m.len());
                prop_assert!(filtered.is_disjoint(&b));
            }

            #[test]
            fn leakage_free_and_ordered(test in texts(), train in texts()) {
                let union: HashSet<String> = train.into_iter().collect();
                let kept = remove_leakage(&test, &union);
                prop_assert!(kept.iter().all(|f| !union.contains(f)));
                let expected: Vec<String> = test.iter().filter(|f| !union.contains(*f)).cloned().collect();
                prop_assert_eq!(kept, expected);
            }

            #[test]
            fn stats_are_monotone(
                rows in proptest::collection::vec(("[a-d]{1,2}", any::<bool>(), 0usize..4), 0..50)
            ) {
                let fns: Vec<NormalizedFunction> = rows
                    .iter()
                    .map(|(t, m, s)| func(t, &format!("s{s}"), if *m { Label::Malicious } else { Label::Benign }))
                    .collect();
                let c = LabeledCorpus::build(&fns, 4, 1, |t| t.len());
                prop_assert!(c.stats.n_initial >= c.stats.n_deduplicated);
                prop_assert!(c.stats.n_deduplicated >= c.stats.n_filtered);
                prop_assert!((0.0..=100.0).contains(&c.stats.pct_over_max_len));
                prop_assert!(c.benign.is_disjoint(&c.malicious));
            }
        }
    }
}
