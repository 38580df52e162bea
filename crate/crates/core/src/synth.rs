//! Synthetic trace corpora with known ground truth.
//!
//! Each class owns a pool of function templates; a configurable fraction of
//! each pool is shared between the classes. Every template is a complete
//! function (`push ebp`, `mov ebp, esp`, body, then `ret` or `call`), so
//! segmentation recovers template instances exactly. Within a class,
//! template usage counts follow `count(rank) ~ rank^a` via largest-remainder
//! quotas, and a fraction of instances can be mutated with class-specific
//! instructions to produce functions never seen anywhere else.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PulseError, Result};
use crate::normalize::{normalize_instruction, NormalizationMode, Style};
use crate::trace::{parse_trace_line, CorpusManifest, Label, ManifestEntry, ParsedLine, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_benign: usize,
    pub n_malicious: usize,
    /// Inclusive range of functions per sample.
    pub functions_per_sample: [usize; 2],
    /// Templates available to each class, shared ones included.
    pub pool_size: usize,
    /// Fraction of each pool shared with the other class, in `[0, 1)`.
    pub overlap: f64,
    /// Exponent `a` of the template rank-frequency law.
    pub zipf_exponent: f64,
    /// Fraction of function instances rewritten with class-specific instructions.
    pub mutation_rate: f64,
    pub test_fraction: f64,
    /// Fraction of the non-test samples held out for validation.
    pub validation_fraction: f64,
    pub families: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_benign: 120,
            n_malicious: 120,
            functions_per_sample: [20, 40],
            pool_size: 150,
            overlap: 0.3,
            zipf_exponent: -1.0,
            mutation_rate: 0.3,
            test_fraction: 1.0 / 6.0,
            validation_fraction: 0.2,
            families: ["WannaCry", "LockBit", "Ryuk", "Conti", "REvil"]
                .map(String::from)
                .to_vec(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PulseError::Config(format!("synthetic spec: {m}")));
        if !(0.0..1.0).contains(&self.overlap) {
            return bad("overlap must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("mutation_rate must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("test_fraction and validation_fraction must lie in [0, 1)");
        }
        let [lo, hi] = self.functions_per_sample;
        if lo == 0 || lo > hi {
            return bad("functions_per_sample must be a non-empty positive range");
        }
        if self.pool_size < 2 {
            return bad("pool_size must be at least 2");
        }
        if self.families.is_empty() {
            return bad("at least one malicious family is required");
        }
        if !self.zipf_exponent.is_finite() {
            return bad("zipf_exponent must be finite");
        }
        Ok(())
    }

    pub fn n_shared(&self) -> usize {
        (self.overlap * self.pool_size as f64).round() as usize
    }
}

/// What the generator knows about the corpus it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLog {
    pub spec: SyntheticSpec,
    pub shared_templates: Vec<String>,
    pub benign_templates: Vec<String>,
    pub malicious_templates: Vec<String>,
    pub splits: BTreeMap<Split, SplitLog>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitLog {
    pub n_benign_samples: usize,
    pub n_malicious_samples: usize,
    pub n_functions: usize,
    pub n_mutated: usize,
    /// Normalized (concatenated) function texts emitted by both classes in
    /// this split: exactly what cross-label filtering of the split removes.
    pub shared_in_both: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub manifest_path: PathBuf,
    pub manifest: CorpusManifest,
    pub log: GeneratorLog,
}

const REGS: [&str; 6] = ["eax", "ebx", "ecx", "edx", "esi", "edi"];
const XMM: [&str; 4] = ["xmm0", "xmm1", "xmm2", "xmm3"];

fn reg(rng: &mut ChaCha8Rng) -> &'static str {
    REGS[rng.gen_range(0..REGS.len())]
}

fn slot(rng: &mut ChaCha8Rng) -> String {
    format!("0x{:x}", 4 * rng.gen_range(1..16))
}

fn common(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..8) {
        0 => format!("mov {}, {}", reg(rng), reg(rng)),
        1 => format!("mov {}, dword ptr [ebp-{}]", reg(rng), slot(rng)),
        2 => format!("mov dword ptr [ebp-{}], {}", slot(rng), reg(rng)),
        3 => format!("push {}", reg(rng)),
        4 => format!("pop {}", reg(rng)),
        5 => format!("add {}, 0x{:x}", reg(rng), rng.gen_range(1..32)),
        6 => format!("sub esp, {}", slot(rng)),
        _ => {
            let r = reg(rng);
            format!("test {r}, {r}")
        }
    }
}

fn malicious_specific(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..10) {
        0 => format!("xor {}, {}", reg(rng), reg(rng)),
        1 => format!("rol {}, 0x{:x}", reg(rng), rng.gen_range(1..8)),
        2 => format!("ror {}, 0x{:x}", reg(rng), rng.gen_range(1..8)),
        3 => format!("shl {}, 0x{:x}", reg(rng), rng.gen_range(1..8)),
        4 => format!("shr {}, 0x{:x}", reg(rng), rng.gen_range(1..8)),
        5 => format!("not {}", reg(rng)),
        6 => format!("bswap {}", reg(rng)),
        7 => format!("pxor {}, {}", XMM[rng.gen_range(0..4)], XMM[rng.gen_range(0..4)]),
        8 => format!("aesenc {}, {}", XMM[rng.gen_range(0..4)], XMM[rng.gen_range(0..4)]),
        _ => format!("movzx {}, byte ptr [{}+0x{:x}]", reg(rng), reg(rng), rng.gen_range(0..16)),
    }
}

fn benign_specific(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..10) {
        0 => format!("lea {}, [ebp-{}]", reg(rng), slot(rng)),
        1 => format!("cmp {}, 0x{:x}", reg(rng), rng.gen_range(0..64)),
        2 => format!("imul {}, {}, 0x{:x}", reg(rng), reg(rng), rng.gen_range(2..16)),
        3 => format!("movsx {}, word ptr [ebp-{}]", reg(rng), slot(rng)),
        4 => format!("inc {}", reg(rng)),
        5 => format!("dec {}", reg(rng)),
        6 => format!("and {}, 0xff", reg(rng)),
        7 => format!("or {}, {}", reg(rng), reg(rng)),
        8 => format!("sbb {}, {}", reg(rng), reg(rng)),
        _ => format!("adc {}, 0x{:x}", reg(rng), rng.gen_range(0..8)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Shared,
    Only(Label),
}

fn specific(label: Label, rng: &mut ChaCha8Rng) -> String {
    match label {
        Label::Benign => benign_specific(rng),
        Label::Malicious => malicious_specific(rng),
    }
}

#[derive(Debug, Clone)]
enum Ending {
    Ret(Option<u32>),
    Call,
}

#[derive(Debug, Clone)]
struct Template {
    body: Vec<String>,
    ending: Ending,
}

impl Template {
    fn random(origin: Origin, rng: &mut ChaCha8Rng) -> Template {
        let n_body = rng.gen_range(3..=11);
        let mut body: Vec<String> = (0..n_body).map(|_| common(rng)).collect();
        if let Origin::Only(label) = origin {
            let k = rng.gen_range(1..=n_body.min(4));
            let mut idx: Vec<usize> = (0..n_body).collect();
            idx.shuffle(rng);
            for &i in &idx[..k] {
                body[i] = specific(label, rng);
            }
        }
        let ending = match rng.gen_range(0..3) {
            0 => Ending::Ret(None),
            1 => Ending::Ret(Some(4 * rng.gen_range(1..6))),
            _ => Ending::Call,
        };
        Template { body, ending }
    }

    /// Trace lines of one instance; call targets are redrawn each time.
    fn lines(&self, body: &[String], rng: &mut ChaCha8Rng) -> Vec<String> {
        let mut out = Vec::with_capacity(body.len() + 3);
        out.push("push ebp".to_string());
        out.push("mov ebp, esp".to_string());
        out.extend(body.iter().cloned());
        out.push(match self.ending {
            Ending::Ret(None) => "ret".to_string(),
            Ending::Ret(Some(n)) => format!("ret 0x{n:x}"),
            Ending::Call => format!("call 0x{:x}", rng.gen_range(0x10000u32..0x7fff_ffff)),
        });
        out
    }
}

/// Normalized concatenated text of a run of trace lines.
fn normalized_text(lines: &[String]) -> String {
    let mode = NormalizationMode::new(Style::Concatenated);
    lines
        .iter()
        .flat_map(|l| match parse_trace_line(l) {
            Ok(ParsedLine::Instruction(i)) => normalize_instruction(&i, &mode),
            _ => unreachable!("generator emitted an unparseable line: {l}"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Largest-remainder integer quotas proportional to `rank^a`, summing to `total`.
pub fn zipf_quotas(n: usize, a: f64, total: usize) -> Vec<usize> {
    let weights: Vec<f64> = (1..=n).map(|r| (r as f64).powf(a)).collect();
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n).collect();
    // larger remainder first, lower rank on ties
    order.sort_by(|&i, &j| {
        let (ri, rj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        quotas[i] += 1;
        rest -= 1;
    }
    quotas
}

struct PlannedSample {
    label: Label,
    family: String,
    split: Split,
    functions: Vec<(usize, bool)>,
}

fn assign_splits(n: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Split> {
    let n_test = (spec.test_fraction * n as f64).round() as usize;
    let n_val = (spec.validation_fraction * (n - n_test) as f64).round() as usize;
    let mut splits: Vec<Split> = (0..n)
        .map(|i| {
            if i < n_test {
                Split::Test
            } else if i < n_test + n_val {
                Split::Validation
            } else {
                Split::Train
            }
        })
        .collect();
    splits.shuffle(rng);
    splits
}

/// Write trace files, `manifest.json` and `generator_log.json` under `out_dir`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, out_dir: &Path) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // templates, unique by normalized text across all pools
    let n_shared = spec.n_shared();
    let n_only = spec.pool_size - n_shared;
    let mut seen = BTreeSet::new();
    let mut draw = |origin: Origin, count: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0;
        while out.len() < count {
            attempts += 1;
            assert!(attempts < 1000 * (count + 1), "template space exhausted");
            let t = Template::random(origin, rng);
            let text = normalized_text(&t.lines(&t.body, rng));
            if seen.insert(text.clone()) {
                out.push((t, text));
            }
        }
        out
    };
    let shared = draw(Origin::Shared, n_shared, &mut rng);
    let benign_only = draw(Origin::Only(Label::Benign), n_only, &mut rng);
    let malicious_only = draw(Origin::Only(Label::Malicious), n_only, &mut rng);

    let mut templates: Vec<(Template, String)> = Vec::new();
    templates.extend(shared.iter().cloned());
    templates.extend(benign_only.iter().cloned());
    templates.extend(malicious_only.iter().cloned());
    let shared_ids: Vec<usize> = (0..n_shared).collect();
    let benign_pool: Vec<usize> = shared_ids.iter().copied().chain(n_shared..n_shared + n_only).collect();
    let malicious_pool: Vec<usize> = shared_ids
        .iter()
        .copied()
        .chain(n_shared + n_only..n_shared + 2 * n_only)
        .collect();

    let [lo, hi] = spec.functions_per_sample;
    let mut planned = Vec::new();
    for (label, count, pool) in [
        (Label::Benign, spec.n_benign, &benign_pool),
        (Label::Malicious, spec.n_malicious, &malicious_pool),
    ] {
        let sizes: Vec<usize> = (0..count).map(|_| rng.gen_range(lo..=hi)).collect();
        let total: usize = sizes.iter().sum();
        let mut ranked = pool.clone();
        ranked.shuffle(&mut rng);
        let quotas = zipf_quotas(ranked.len(), spec.zipf_exponent, total);
        let mut instances: Vec<usize> = ranked
            .iter()
            .zip(&quotas)
            .flat_map(|(&t, &q)| std::iter::repeat_n(t, q))
            .collect();
        instances.shuffle(&mut rng);
        let splits = assign_splits(count, spec, &mut rng);
        let mut cursor = 0;
        for (i, &size) in sizes.iter().enumerate() {
            let functions = instances[cursor..cursor + size]
                .iter()
                .map(|&t| (t, rng.gen_bool(spec.mutation_rate)))
                .collect();
            cursor += size;
            let family = match label {
                Label::Benign => "Benign".to_string(),
                Label::Malicious => spec.families[i % spec.families.len()].clone(),
            };
            planned.push(PlannedSample {
                label,
                family,
                split: splits[i],
                functions,
            });
        }
    }

    fs::create_dir_all(out_dir).map_err(|e| PulseError::io(out_dir, e))?;
    let traces = out_dir.join("traces");
    fs::create_dir_all(&traces).map_err(|e| PulseError::io(&traces, e))?;

    let mut entries = Vec::with_capacity(planned.len());
    let mut splits: BTreeMap<Split, SplitLog> = BTreeMap::new();
    let mut emitted: BTreeMap<(Split, Label), BTreeSet<String>> = BTreeMap::new();
    for (n, p) in planned.iter().enumerate() {
        let mut text = String::new();
        let log = splits.entry(p.split).or_default();
        match p.label {
            Label::Benign => log.n_benign_samples += 1,
            Label::Malicious => log.n_malicious_samples += 1,
        }
        for &(t, mutate) in &p.functions {
            let template = &templates[t].0;
            let mut body = template.body.clone();
            if mutate {
                let k = rng.gen_range(1..=2.min(body.len()));
                let mut idx: Vec<usize> = (0..body.len()).collect();
                idx.shuffle(&mut rng);
                for &i in &idx[..k] {
                    body[i] = specific(p.label, &mut rng);
                }
                log.n_mutated += 1;
            }
            let lines = template.lines(&body, &mut rng);
            emitted.entry((p.split, p.label)).or_default().insert(normalized_text(&lines));
            log.n_functions += 1;
            for l in lines {
                text.push_str(&l);
                text.push('\n');
            }
        }
        let digest = Sha256::digest(format!("{n}\n{text}").as_bytes());
        let kind = match p.label {
            Label::Benign => "Benign",
            Label::Malicious => "Ransomware",
        };
        let sample_id = format!("{kind}-{}-{}", p.family, &hex::encode(digest)[..16]);
        let rel = PathBuf::from("traces").join(format!("{sample_id}.txt"));
        let path = out_dir.join(&rel);
        fs::write(&path, text).map_err(|e| PulseError::io(&path, e))?;
        entries.push(ManifestEntry {
            path: rel,
            sample_id,
            label: p.label,
            family: p.family.clone(),
            split: p.split,
        });
    }
    for (split, log) in splits.iter_mut() {
        let empty = BTreeSet::new();
        let b = emitted.get(&(*split, Label::Benign)).unwrap_or(&empty);
        let m = emitted.get(&(*split, Label::Malicious)).unwrap_or(&empty);
        log.shared_in_both = b.intersection(m).cloned().collect();
    }

    let manifest = CorpusManifest::new(entries, out_dir)?;
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    let texts = |v: &[(Template, String)]| v.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>();
    let log = GeneratorLog {
        spec: spec.clone(),
        shared_templates: texts(&shared),
        benign_templates: texts(&benign_only),
        malicious_templates: texts(&malicious_only),
        splits,
    };
    let log_path = out_dir.join("generator_log.json");
    fs::write(&log_path, serde_json::to_string_pretty(&log)? + "\n").map_err(|e| PulseError::io(&log_path, e))?;
    Ok(SyntheticCorpus {
        manifest_path,
        manifest,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{function_frequencies, LabeledCorpus};
    use crate::normalize::{filter_short, segment_functions, DEFAULT_MIN_FUNCTION_LEN};
    use crate::trace::load_corpus;
    use crate::zipf::{fit_power_law, zipf_rank_frequency};

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_benign: 12,
            n_malicious: 12,
            functions_per_sample: [5, 10],
            pool_size: 30,
            seed,
            ..SyntheticSpec::default()
        }
    }

    fn functions(c: &SyntheticCorpus, split: Split) -> Vec<crate::normalize::NormalizedFunction> {
        let mode = NormalizationMode::default();
        load_corpus(&c.manifest)
            .unwrap()
            .iter()
            .filter(|s| s.split == split)
            .flat_map(|s| filter_short(segment_functions(&s.sample, &mode), DEFAULT_MIN_FUNCTION_LEN))
            .collect()
    }

    #[test]
    fn quotas_sum_and_decay() {
        let q = zipf_quotas(50, -1.0, 1000);
        assert_eq!(q.iter().sum::<usize>(), 1000);
        assert!(q.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(zipf_quotas(3, 0.0, 7), vec![3, 2, 2]);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = generate_synthetic_corpus(&small(4), a.path()).unwrap();
        let cb = generate_synthetic_corpus(&small(4), b.path()).unwrap();
        assert_eq!(ca.log, cb.log);
        for (x, y) in ca.manifest.entries.iter().zip(&cb.manifest.entries) {
            assert_eq!(x, y);
            assert_eq!(fs::read(a.path().join(&x.path)).unwrap(), fs::read(b.path().join(&y.path)).unwrap());
        }
    }

    #[test]
    fn every_instance_survives_segmentation() {
        let d = tempfile::tempdir().unwrap();
        let c = generate_synthetic_corpus(&small(1), d.path()).unwrap();
        let n: usize = [Split::Train, Split::Validation, Split::Test]
            .iter()
            .map(|&s| functions(&c, s).len())
            .sum();
        let logged: usize = c.log.splits.values().map(|l| l.n_functions).sum();
        assert_eq!(n, logged);
    }

    #[test]
    fn zero_overlap_filters_nothing() {
        let d = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            overlap: 0.0,
            ..small(2)
        };
        let c = generate_synthetic_corpus(&spec, d.path()).unwrap();
        let train = functions(&c, Split::Train);
        let corpus = LabeledCorpus::build(&train, 0, 256, |t| t.split(' ').count());
        let all_malicious: BTreeSet<&str> = train
            .iter()
            .filter(|f| f.label == Label::Malicious)
            .map(|f| f.text.as_str())
            .collect();
        assert_eq!(corpus.malicious.len(), all_malicious.len());
        assert!(c.log.splits[&Split::Train].shared_in_both.is_empty());
    }

    #[test]
    fn half_overlap_removal_matches_log() {
        let d = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            overlap: 0.5,
            ..small(3)
        };
        let c = generate_synthetic_corpus(&spec, d.path()).unwrap();
        let train = functions(&c, Split::Train);
        let corpus = LabeledCorpus::build(&train, 0, 256, |t| t.split(' ').count());
        let all_malicious: BTreeSet<&str> = train
            .iter()
            .filter(|f| f.label == Label::Malicious)
            .map(|f| f.text.as_str())
            .collect();
        let removed: Vec<&str> = all_malicious
            .iter()
            .copied()
            .filter(|t| !corpus.malicious.contains(*t))
            .collect();
        let logged = &c.log.splits[&Split::Train].shared_in_both;
        assert!(!logged.is_empty());
        assert_eq!(removed, logged.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn per_class_usage_follows_the_law() {
        let d = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_benign: 40,
            n_malicious: 40,
            functions_per_sample: [40, 60],
            pool_size: 60,
            mutation_rate: 0.0,
            overlap: 0.0,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic_corpus(&spec, d.path()).unwrap();
        let all: Vec<_> = [Split::Train, Split::Validation, Split::Test]
            .iter()
            .flat_map(|&s| functions(&c, s))
            .filter(|f| f.label == Label::Malicious)
            .collect();
        let fit = fit_power_law::<f64>(&zipf_rank_frequency(&function_frequencies(&all))).unwrap();
        assert!((fit.exponent + 1.0).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn bad_specs() {
        let d = tempfile::tempdir().unwrap();
        for spec in [
            SyntheticSpec { overlap: 1.0, ..small(0) },
            SyntheticSpec { functions_per_sample: [5, 2], ..small(0) },
            SyntheticSpec { families: vec![], ..small(0) },
        ] {
            assert!(matches!(generate_synthetic_corpus(&spec, d.path()), Err(PulseError::Config(_))));
        }
    }
}
