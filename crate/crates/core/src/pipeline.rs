//! Staged pipeline. Each stage writes into its own directory under the output
//! directory, together with `stage.json` recording the hash of its inputs and
//! of every file it produced. A stage whose input hash is unchanged and whose
//! outputs are intact is skipped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::corpus::{function_frequencies, instruction_frequencies, remove_leakage, LabeledCorpus};
use crate::error::{PulseError, Result};
use crate::model::{checkpoint, train, Model};
use crate::normalize::{filter_short, read_functions, segment_functions, write_functions, NormalizedFunction};
use crate::synth::generate_synthetic_corpus;
use crate::tokenizer::{encode, fragmentation_rate, train_tokenizer, TokenSequence, TokenizerModel};
use crate::trace::{load_corpus, CorpusManifest, Label, Split};
use crate::verdict::{aggregate_sample, compute_metrics, fit_svm, Decision, Hyperplane, Metrics, SampleFeatures, SizeClass};
use crate::zipf::{fit_power_law, zipf_rank_frequency, PowerLawFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Normalize,
    Corpus,
    Tokenizer,
    Model,
    Classify,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Normalize,
        Stage::Corpus,
        Stage::Tokenizer,
        Stage::Model,
        Stage::Classify,
        Stage::Evaluate,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Synth => "00_synth",
            Stage::Normalize => "01_normalize",
            Stage::Corpus => "02_corpus",
            Stage::Tokenizer => "03_tokenizer",
            Stage::Model => "04_model",
            Stage::Classify => "05_classify",
            Stage::Evaluate => "06_evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

pub const STAGE_MANIFEST: &str = "stage.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub input_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub dir: PathBuf,
    pub skipped: bool,
    pub input_hash: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PulseError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| PulseError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PulseError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| PulseError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| PulseError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| PulseError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_lines<'a>(path: &Path, lines: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| PulseError::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| PulseError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Validation or test sample after leakage removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub sample_id: String,
    pub label: Label,
    pub family: String,
    pub n_functions_before: usize,
    pub functions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    #[serde(flatten)]
    pub features: SampleFeatures,
    pub family: String,
    pub truth: Label,
}

/// One line of `verdicts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub sample_id: String,
    pub family: String,
    pub n_functions: usize,
    pub malicious_pct: f64,
    pub size_class: SizeClass,
    pub margin: Option<f64>,
    pub verdict: Decision,
    pub truth: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Test samples with a determinate verdict.
    pub metrics: Metrics,
    pub n_test_samples: usize,
    pub indeterminate: Vec<String>,
    pub svm_validation_accuracy: f64,
    /// Function-level scores on surviving test functions, using sample labels.
    pub function_metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub train_functions: usize,
    pub test_functions: usize,
    pub validation_functions: usize,
    pub test_intersection: usize,
    pub validation_intersection: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZipfReport {
    pub instructions: Option<PowerLawFit<f64>>,
    pub functions: Option<PowerLawFit<f64>>,
    pub functions_benign: Option<PowerLawFit<f64>>,
    pub functions_malicious: Option<PowerLawFit<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub vocab_len: usize,
    pub n_merges: usize,
    pub fragmentation_rate: f64,
    /// Training functions whose encoding exceeds the token budget, in percent.
    pub pct_over_budget: f64,
    pub length_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub n_samples: usize,
    pub n_instructions: usize,
    pub parse_errors: Vec<ParseErrorRow>,
    pub functions_per_split: BTreeMap<Split, usize>,
    pub distinct_instructions: usize,
    pub instructions_over_ten: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseErrorRow {
    pub sample_id: String,
    pub line: usize,
    pub message: String,
}

pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let out = config.paths.output_dir.clone();
        Ok(Pipeline { config, out })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.dir_name())
    }

    fn manifest_path(&self) -> PathBuf {
        match (&self.config.synthetic, &self.config.paths.manifest) {
            (Some(_), _) => self.stage_dir(Stage::Synth).join("manifest.json"),
            (None, Some(p)) => p.clone(),
            (None, None) => unreachable!("validated config"),
        }
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.out)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// Run one stage unless its recorded input hash and outputs still match.
    fn stage<F>(&self, stage: Stage, params: serde_json::Value, inputs: &[PathBuf], body: F) -> Result<StageOutcome>
    where
        F: FnOnce(&Path) -> Result<()>,
    {
        let mut hashed = BTreeMap::new();
        for p in inputs {
            hashed.insert(self.rel(p), sha256_file(p)?);
        }
        let input_hash = hex::encode(Sha256::digest(
            serde_json::to_vec(&json!({"stage": stage.dir_name(), "params": params, "inputs": hashed}))?,
        ));
        let dir = self.stage_dir(stage);
        let manifest_file = dir.join(STAGE_MANIFEST);
        if let Ok(previous) = read_json::<StageManifest>(&manifest_file) {
            let intact = previous.input_hash == input_hash
                && previous
                    .outputs
                    .iter()
                    .all(|(name, hash)| sha256_file(&dir.join(name)).is_ok_and(|h| &h == hash));
            if intact {
                log::info!("{stage}: inputs unchanged, skipping");
                return Ok(StageOutcome {
                    stage,
                    dir,
                    skipped: true,
                    input_hash,
                });
            }
        }
        let wrap = |e: PulseError| PulseError::Stage {
            stage: stage.dir_name().to_string(),
            input_hash: input_hash.clone(),
            source: Box::new(e),
        };
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| wrap(PulseError::io(&dir, e)))?;
        }
        fs::create_dir_all(&dir).map_err(|e| wrap(PulseError::io(&dir, e)))?;
        log::info!("{stage}: running");
        body(&dir).map_err(wrap)?;
        let mut outputs = BTreeMap::new();
        for path in files_under(&dir).map_err(wrap)? {
            let name = path
                .strip_prefix(&dir)
                .expect("under stage dir")
                .to_string_lossy()
                .replace('\\', "/");
            outputs.insert(name, sha256_file(&path).map_err(wrap)?);
        }
        let manifest = StageManifest {
            stage: stage.dir_name().to_string(),
            input_hash: input_hash.clone(),
            inputs: hashed,
            outputs,
        };
        write_json(&manifest_file, &manifest).map_err(wrap)?;
        Ok(StageOutcome {
            stage,
            dir,
            skipped: false,
            input_hash,
        })
    }

    /// Run every stage up to and including `last`.
    pub fn run_until(&self, last: Stage) -> Result<Vec<StageOutcome>> {
        fs::create_dir_all(&self.out).map_err(|e| PulseError::io(&self.out, e))?;
        let mut done = Vec::new();
        for stage in Stage::ALL {
            if stage > last {
                break;
            }
            let outcome = match stage {
                Stage::Synth => match &self.config.synthetic {
                    Some(_) => self.synth()?,
                    None => continue,
                },
                Stage::Normalize => self.normalize()?,
                Stage::Corpus => self.corpus()?,
                Stage::Tokenizer => self.tokenizer()?,
                Stage::Model => self.model()?,
                Stage::Classify => self.classify()?,
                Stage::Evaluate => self.evaluate()?,
            };
            done.push(outcome);
        }
        Ok(done)
    }

    fn synth(&self) -> Result<StageOutcome> {
        let mut spec = self.config.synthetic.clone().expect("checked by caller");
        spec.seed = self.config.stage_seed("synth");
        self.stage(Stage::Synth, serde_json::to_value(&spec)?, &[], |dir| {
            generate_synthetic_corpus(&spec, dir).map(|_| ())
        })
    }

    fn normalize(&self) -> Result<StageOutcome> {
        let manifest_path = self.manifest_path();
        let manifest = CorpusManifest::load(&manifest_path)?;
        let mut inputs = vec![manifest_path.clone()];
        inputs.extend(manifest.entries.iter().map(|e| manifest.resolve(e)));
        let params = serde_json::to_value(&self.config.normalize)?;
        self.stage(Stage::Normalize, params, &inputs, |dir| {
            let mode = self.config.normalize.mode();
            let samples = load_corpus(&manifest)?;
            let mut per_split: BTreeMap<Split, Vec<NormalizedFunction>> = BTreeMap::new();
            let mut parse_errors = Vec::new();
            for s in &samples {
                let fns = filter_short(segment_functions(&s.sample, &mode), self.config.normalize.min_function_len);
                per_split.entry(s.split).or_default().extend(fns);
                parse_errors.extend(s.sample.parse_errors.iter().map(|e| ParseErrorRow {
                    sample_id: s.sample.sample_id.clone(),
                    line: e.line,
                    message: e.message.clone(),
                }));
            }
            for split in [Split::Train, Split::Validation, Split::Test] {
                let fns = per_split.entry(split).or_default();
                write_functions(
                    &dir.join(format!("functions.{split}.txt")),
                    &dir.join(format!("functions.{split}.jsonl")),
                    fns,
                )?;
            }
            let freqs = instruction_frequencies(samples.iter().map(|s| &s.sample));
            write_json(&dir.join("instruction_frequencies.json"), &freqs.counts)?;
            let report = IngestReport {
                n_samples: samples.len(),
                n_instructions: freqs.total as usize,
                parse_errors,
                functions_per_split: per_split.iter().map(|(k, v)| (*k, v.len())).collect(),
                distinct_instructions: freqs.counts.len(),
                instructions_over_ten: freqs.over_ten,
            };
            write_json(&dir.join("ingest.json"), &report)
        })
    }

    fn functions_paths(&self, split: Split) -> (PathBuf, PathBuf) {
        let d = self.stage_dir(Stage::Normalize);
        (
            d.join(format!("functions.{split}.txt")),
            d.join(format!("functions.{split}.jsonl")),
        )
    }

    fn corpus(&self) -> Result<StageOutcome> {
        let manifest_path = self.manifest_path();
        let mut inputs = vec![manifest_path.clone()];
        for split in [Split::Train, Split::Validation, Split::Test] {
            let (t, s) = self.functions_paths(split);
            inputs.push(t);
            inputs.push(s);
        }
        let freq_path = self.stage_dir(Stage::Normalize).join("instruction_frequencies.json");
        inputs.push(freq_path.clone());
        let params = json!({"length_budget": self.config.tokenizer.length_budget});
        self.stage(Stage::Corpus, params, &inputs, |dir| {
            let manifest = CorpusManifest::load(&manifest_path)?;
            let (t, s) = self.functions_paths(Split::Train);
            let train_fns = read_functions(&t, &s)?;
            let n_train = manifest.entries.iter().filter(|e| e.split == Split::Train).count();
            let budget = self.config.tokenizer.length_budget;
            let corpus = LabeledCorpus::build(&train_fns, n_train, budget, |t| t.split(' ').count());
            write_json(&dir.join("stats.json"), &corpus.stats)?;
            write_lines(&dir.join("train_benign.txt"), corpus.benign.iter().map(String::as_str))?;
            write_lines(&dir.join("train_malicious.txt"), corpus.malicious.iter().map(String::as_str))?;

            // rank-frequency analysis
            let instr: BTreeMap<String, u64> = read_json(&freq_path)?;
            let instr_series = zipf_rank_frequency(&instr);
            let fn_series = zipf_rank_frequency(&function_frequencies(&train_fns));
            fs::write(dir.join("zipf_instructions.csv"), instr_series.to_csv())
                .map_err(|e| PulseError::io(dir.join("zipf_instructions.csv"), e))?;
            fs::write(dir.join("zipf_functions.csv"), fn_series.to_csv())
                .map_err(|e| PulseError::io(dir.join("zipf_functions.csv"), e))?;
            let by_label = |l: Label| {
                let fns: Vec<&NormalizedFunction> = train_fns.iter().filter(|f| f.label == l).collect();
                fit_power_law(&zipf_rank_frequency(&function_frequencies(fns))).ok()
            };
            let zipf = ZipfReport {
                instructions: fit_power_law(&instr_series).ok(),
                functions: fit_power_law(&fn_series).ok(),
                functions_benign: by_label(Label::Benign),
                functions_malicious: by_label(Label::Malicious),
            };
            write_json(&dir.join("zipf_fit.json"), &zipf)?;

            // leakage removal for the held-out splits
            let union: HashSet<String> = corpus.training_union();
            for split in [Split::Validation, Split::Test] {
                let (t, s) = self.functions_paths(split);
                let mut by_sample: HashMap<String, Vec<String>> = HashMap::new();
                for f in read_functions(&t, &s)? {
                    by_sample.entry(f.sample_id).or_default().push(f.text);
                }
                let rows: Vec<EvalSample> = manifest
                    .entries
                    .iter()
                    .filter(|e| e.split == split)
                    .map(|e| {
                        let before = by_sample.remove(&e.sample_id).unwrap_or_default();
                        EvalSample {
                            sample_id: e.sample_id.clone(),
                            label: e.label,
                            family: e.family.clone(),
                            n_functions_before: before.len(),
                            functions: remove_leakage(&before, &union),
                        }
                    })
                    .collect();
                write_jsonl(&dir.join(format!("eval_{split}.jsonl")), &rows)?;
            }
            Ok(())
        })
    }

    fn train_texts(&self) -> Result<Vec<(String, Label)>> {
        let d = self.stage_dir(Stage::Corpus);
        let mut out: Vec<(String, Label)> = read_lines(&d.join("train_benign.txt"))?
            .into_iter()
            .map(|t| (t, Label::Benign))
            .collect();
        out.extend(
            read_lines(&d.join("train_malicious.txt"))?
                .into_iter()
                .map(|t| (t, Label::Malicious)),
        );
        Ok(out)
    }

    fn tokenizer(&self) -> Result<StageOutcome> {
        let d = self.stage_dir(Stage::Corpus);
        let inputs = [d.join("train_benign.txt"), d.join("train_malicious.txt")];
        let params = serde_json::to_value(&self.config.tokenizer)?;
        self.stage(Stage::Tokenizer, params, &inputs, |dir| {
            let texts = self.train_texts()?;
            let tc = &self.config.tokenizer;
            let model = train_tokenizer(texts.iter().map(|(t, _)| t.as_str()), tc.vocab_size, tc.punctuation_split)?;
            model.save(&dir.join("tokenizer.json"))?;
            let over = texts
                .iter()
                .filter(|(t, _)| model.tokenize(t).len() + 2 > tc.length_budget)
                .count();
            let stats = TokenStats {
                vocab_len: model.vocab_len(),
                n_merges: model.merges().len(),
                fragmentation_rate: fragmentation_rate(&model, texts.iter().map(|(t, _)| t)),
                pct_over_budget: if texts.is_empty() {
                    0.0
                } else {
                    100.0 * over as f64 / texts.len() as f64
                },
                length_budget: tc.length_budget,
            };
            write_json(&dir.join("token_stats.json"), &stats)
        })
    }

    fn eval_path(&self, split: Split) -> PathBuf {
        self.stage_dir(Stage::Corpus).join(format!("eval_{split}.jsonl"))
    }

    fn tokenizer_path(&self) -> PathBuf {
        self.stage_dir(Stage::Tokenizer).join("tokenizer.json")
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.stage_dir(Stage::Model).join("checkpoint.bin")
    }

    fn model(&self) -> Result<StageOutcome> {
        let d = self.stage_dir(Stage::Corpus);
        let inputs = [
            self.tokenizer_path(),
            d.join("train_benign.txt"),
            d.join("train_malicious.txt"),
            self.eval_path(Split::Validation),
        ];
        let model_seed = self.config.stage_seed("model");
        let train_seed = self.config.stage_seed("training");
        let params = json!({
            "model": self.config.model,
            "training": self.config.training,
            "model_seed": model_seed,
            "train_seed": train_seed,
        });
        self.stage(Stage::Model, params, &inputs, |dir| {
            let tok = TokenizerModel::load(&self.tokenizer_path())?;
            let max_len = self.config.model.max_len;
            let enc = |t: &str| encode(&tok, t, max_len);
            let train_set: Vec<(TokenSequence, Label)> =
                self.train_texts()?.iter().map(|(t, l)| (enc(t), *l)).collect();
            let val_set: Vec<(TokenSequence, Label)> = read_jsonl::<EvalSample>(&self.eval_path(Split::Validation))?
                .iter()
                .flat_map(|s| s.functions.iter().map(|f| (enc(f), s.label)).collect::<Vec<_>>())
                .collect();
            let mut model = Model::new(self.config.model.config(tok.vocab_len(), model_seed))?;
            let report = train(&mut model, &train_set, &val_set, &self.config.training.settings(train_seed))?;
            checkpoint::save(&model, &dir.join("checkpoint.bin"))?;
            write_json(&dir.join("training_report.json"), &report)
        })
    }

    fn features_path(&self, split: Split) -> PathBuf {
        self.stage_dir(Stage::Classify).join(format!("features.{split}.jsonl"))
    }

    fn classify(&self) -> Result<StageOutcome> {
        let inputs = [
            self.tokenizer_path(),
            self.checkpoint_path(),
            self.eval_path(Split::Validation),
            self.eval_path(Split::Test),
        ];
        self.stage(Stage::Classify, json!({}), &inputs, |dir| {
            let tok = TokenizerModel::load(&self.tokenizer_path())?;
            let model: Model = checkpoint::load(&self.checkpoint_path())?;
            let max_len = model.config().max_len;
            for split in [Split::Validation, Split::Test] {
                let mut rows = Vec::new();
                let mut fn_rows = Vec::new();
                for s in read_jsonl::<EvalSample>(&self.eval_path(split))? {
                    let seqs: Vec<TokenSequence> = s.functions.iter().map(|f| encode(&tok, f, max_len)).collect();
                    let verdicts = model.classify_batch(&seqs)?;
                    fn_rows.push(json!({
                        "sample_id": s.sample_id,
                        "truth": s.label,
                        "verdicts": verdicts,
                    }));
                    rows.push(FeatureRow {
                        features: aggregate_sample(&s.sample_id, &verdicts),
                        family: s.family,
                        truth: s.label,
                    });
                }
                write_jsonl(&dir.join(format!("features.{split}.jsonl")), &rows)?;
                write_jsonl(&dir.join(format!("function_verdicts.{split}.jsonl")), &fn_rows)?;
            }
            Ok(())
        })
    }

    fn evaluate(&self) -> Result<StageOutcome> {
        let (train_txt, _) = self.functions_paths(Split::Train);
        let inputs = [
            self.features_path(Split::Validation),
            self.features_path(Split::Test),
            self.stage_dir(Stage::Classify).join("function_verdicts.test.jsonl"),
            self.eval_path(Split::Validation),
            self.eval_path(Split::Test),
            train_txt.clone(),
        ];
        let params = serde_json::to_value(&self.config.svm)?;
        self.stage(Stage::Evaluate, params, &inputs, |dir| {
            // leakage audit straight from the normalized training functions
            let train: HashSet<String> = read_lines(&train_txt)?.into_iter().collect();
            let count = |split: Split| -> Result<(usize, usize)> {
                let rows = read_jsonl::<EvalSample>(&self.eval_path(split))?;
                let all: Vec<&String> = rows.iter().flat_map(|r| &r.functions).collect();
                Ok((all.len(), all.iter().filter(|f| train.contains(f.as_str())).count()))
            };
            let (n_test, test_hits) = count(Split::Test)?;
            let (n_val, val_hits) = count(Split::Validation)?;
            let audit = AuditReport {
                train_functions: train.len(),
                test_functions: n_test,
                validation_functions: n_val,
                test_intersection: test_hits,
                validation_intersection: val_hits,
                passed: test_hits == 0 && val_hits == 0,
            };
            write_json(&dir.join("audit.json"), &audit)?;
            if !audit.passed {
                return Err(PulseError::Contract(format!(
                    "leakage audit failed: {test_hits} test and {val_hits} validation functions occur in training"
                )));
            }

            let val: Vec<FeatureRow> = read_jsonl(&self.features_path(Split::Validation))?;
            let fit_rows: Vec<&FeatureRow> = val.iter().filter(|r| !r.features.degenerate).collect();
            let feats: Vec<SampleFeatures> = fit_rows.iter().map(|r| r.features.clone()).collect();
            let labels: Vec<Label> = fit_rows.iter().map(|r| r.truth).collect();
            let h: Hyperplane<f64> = fit_svm(&feats, &labels, &self.config.svm)?;
            let svm_ok = feats
                .iter()
                .zip(&labels)
                .filter(|(f, y)| h.classify(f).0.label() == Some(**y))
                .count();
            let raw = h.to_raw();
            write_json(&dir.join("hyperplane.json"), &json!({"standardized": h, "raw": raw}))?;
            let boundary: Vec<serde_json::Value> = [1.0, 3.0, 10.0, 100.0, 1000.0, 10000.0]
                .iter()
                .map(|&n| json!({"n_functions": n, "malicious_pct": raw.threshold_pct(n)}))
                .collect();
            write_json(&dir.join("boundary.json"), &json!({"raw": raw, "points": boundary}))?;

            let test: Vec<FeatureRow> = read_jsonl(&self.features_path(Split::Test))?;
            let mut verdicts = Vec::with_capacity(test.len());
            let mut plot = String::from("split,sample_id,malicious_pct,n_functions,size_class,truth,verdict\n");
            for (split, rows) in [(Split::Validation, &val), (Split::Test, &test)] {
                for r in rows.iter() {
                    let (d, margin) = h.classify(&r.features);
                    let f = &r.features;
                    plot.push_str(&format!(
                        "{split},{},{},{},{},{},{}\n",
                        f.sample_id,
                        f.malicious_pct,
                        f.n_functions,
                        f.size_class,
                        r.truth,
                        serde_json::to_value(d)?.as_str().unwrap_or_default()
                    ));
                    if split == Split::Test {
                        verdicts.push(VerdictRow {
                            sample_id: f.sample_id.clone(),
                            family: r.family.clone(),
                            n_functions: f.n_functions,
                            malicious_pct: f.malicious_pct,
                            size_class: f.size_class,
                            margin,
                            verdict: d,
                            truth: r.truth,
                        });
                    }
                }
            }
            write_jsonl(&dir.join("verdicts.jsonl"), &verdicts)?;
            fs::write(dir.join("plot.csv"), plot).map_err(|e| PulseError::io(dir.join("plot.csv"), e))?;

            let determinate: Vec<&VerdictRow> = verdicts.iter().filter(|v| v.verdict != Decision::Indeterminate).collect();
            let pred: Vec<Label> = determinate.iter().filter_map(|v| v.verdict.label()).collect();
            let truth: Vec<Label> = determinate.iter().map(|v| v.truth).collect();
            let fn_rows: Vec<serde_json::Value> =
                read_jsonl(&self.stage_dir(Stage::Classify).join("function_verdicts.test.jsonl"))?;
            let (mut fp, mut ft) = (Vec::new(), Vec::new());
            for row in &fn_rows {
                let t: Label = serde_json::from_value(row["truth"].clone())?;
                let vs: Vec<crate::model::FunctionVerdict> = serde_json::from_value(row["verdicts"].clone())?;
                for v in vs {
                    fp.push(v.label);
                    ft.push(t);
                }
            }
            let report = EvaluationReport {
                metrics: compute_metrics(&pred, &truth)?,
                n_test_samples: verdicts.len(),
                indeterminate: verdicts
                    .iter()
                    .filter(|v| v.verdict == Decision::Indeterminate)
                    .map(|v| v.sample_id.clone())
                    .collect(),
                svm_validation_accuracy: svm_ok as f64 / feats.len() as f64,
                function_metrics: compute_metrics(&fp, &ft)?,
            };
            write_json(&dir.join("metrics.json"), &report)
        })
    }
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| PulseError::io(&d, e))? {
            let path = entry.map_err(|e| PulseError::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != STAGE_MANIFEST) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Everything a full run produced.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub output_dir: PathBuf,
    pub stages: Vec<StageOutcome>,
    pub report: EvaluationReport,
    pub audit: AuditReport,
}

impl PipelineRun {
    pub fn verdicts_path(&self) -> PathBuf {
        self.output_dir.join(Stage::Evaluate.dir_name()).join("verdicts.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join(Stage::Model.dir_name()).join("checkpoint.bin")
    }
}

/// Run all stages and collect the evaluation and audit reports.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun> {
    let p = Pipeline::new(config.clone())?;
    let stages = p.run_until(Stage::Evaluate)?;
    let eval = p.stage_dir(Stage::Evaluate);
    Ok(PipelineRun {
        output_dir: p.output_dir().to_path_buf(),
        stages,
        report: read_json(&eval.join("metrics.json"))?,
        audit: read_json(&eval.join("audit.json"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelShape, TrainingConfig};
    use crate::synth::SyntheticSpec;

    fn config(out: &Path, seed: u64) -> PipelineConfig {
        PipelineConfig {
            synthetic: Some(SyntheticSpec {
                n_benign: 18,
                n_malicious: 18,
                functions_per_sample: [8, 14],
                pool_size: 40,
                ..SyntheticSpec::default()
            }),
            model: ModelShape {
                n_layers: 1,
                hidden: 16,
                n_heads: 2,
                ffn: 32,
                max_len: 32,
                ..ModelShape::default()
            },
            training: TrainingConfig {
                epochs: 2,
                lr: 3e-3,
                ..TrainingConfig::default()
            },
            seed,
            paths: crate::config::PathsConfig {
                output_dir: out.to_path_buf(),
                manifest: None,
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn full_run_then_noop_rerun() {
        let d = tempfile::tempdir().unwrap();
        let c = config(d.path(), 1);
        let run = run_pipeline(&c).unwrap();
        assert!(run.audit.passed);
        assert_eq!(run.stages.len(), 7);
        assert!(run.stages.iter().all(|s| !s.skipped));
        for s in Stage::ALL {
            let m: StageManifest = read_json(&d.path().join(s.dir_name()).join(STAGE_MANIFEST)).unwrap();
            assert_eq!(m.stage, s.dir_name());
        }
        let again = run_pipeline(&c).unwrap();
        assert!(again.stages.iter().all(|s| s.skipped));
        assert_eq!(again.report, run.report);
    }

    #[test]
    fn changed_setting_reruns_from_that_stage() {
        let d = tempfile::tempdir().unwrap();
        let mut c = config(d.path(), 2);
        run_pipeline(&c).unwrap();
        c.svm.c = 0.5;
        let run = run_pipeline(&c).unwrap();
        let skipped: Vec<bool> = run.stages.iter().map(|s| s.skipped).collect();
        assert_eq!(skipped, [true, true, true, true, true, true, false]);
    }

    #[test]
    fn tampered_output_is_regenerated() {
        let d = tempfile::tempdir().unwrap();
        let c = config(d.path(), 3);
        let first = run_pipeline(&c).unwrap();
        let before = fs::read(first.verdicts_path()).unwrap();
        fs::write(first.verdicts_path(), "tampered\n").unwrap();
        let run = run_pipeline(&c).unwrap();
        assert!(!run.stages.last().unwrap().skipped);
        assert_eq!(fs::read(run.verdicts_path()).unwrap(), before);
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let d = tempfile::tempdir().unwrap();
        let mut c = config(d.path(), 4);
        c.synthetic = None;
        c.paths.manifest = Some(d.path().join("missing.json"));
        let p = Pipeline::new(c).unwrap();
        let err = p.run_until(Stage::Normalize).unwrap_err();
        assert_eq!(err.exit_code(), 3);

        let mut c = config(d.path(), 4);
        c.synthetic.as_mut().unwrap().n_benign = 0;
        let err = Pipeline::new(c).unwrap().run_until(Stage::Model).unwrap_err();
        match err {
            PulseError::Stage { stage, .. } => assert_eq!(stage, "04_model"),
            other => panic!("{other}"),
        }
    }
}
