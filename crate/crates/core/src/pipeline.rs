//! End-to-end orchestration: ingest, forge, filter, SFT, preference
//! training, evaluation and reports, with every artifact written under one
//! work directory and digested into a run manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{load_corpus, Corpus};
use crate::hashing::sub_seed;
use crate::io::{file_digest, sha256_hex, write_json, write_jsonl, ArtifactError};
use crate::metrics::{evaluate, EvalReport};
use crate::model_forge::{collect_incorrect, filter_by_f1, split_half_predict, write_predictions, FilterConfig};
use crate::pairs::{dedup_pairs, sort_pairs, write_pairs, PreferencePair};
use crate::policy::{predict_corpus, sft_train, PolicyParams, SftConfig};
use crate::pref_opt::{dpo_train, LossConfig};
use crate::rule_forge::{forge_rules, RuleConfig};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage { stage: &'static str, source: BoxError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Toy,
    PaperParity,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Paths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub thresholds: Vec<f64>,
    /// Training-pair counts; a threshold with fewer pairs uses all it has.
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Model,
    Rule,
    Combined,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Model => "model",
            Variant::Rule => "rule",
            Variant::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub seed: u64,
    pub paths: Paths,
    /// Rule forging settings; its seed is replaced by the pipeline seed.
    pub rules: RuleConfig,
    /// F1 thresholds tabulated for both forged datasets.
    pub thresholds: Vec<f64>,
    /// Threshold of the datasets used for preference training.
    pub train_threshold: f64,
    pub variants: Vec<Variant>,
    pub sft: SftConfig,
    pub dpo: LossConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let (sft, dpo) = match preset {
            Preset::Toy => (SftConfig::toy(), LossConfig::toy()),
            Preset::PaperParity => (SftConfig::paper_parity(), LossConfig::paper_parity()),
        };
        PipelineConfig {
            preset,
            seed: 0,
            paths: Paths::default(),
            rules: RuleConfig::default(),
            thresholds: vec![0.9, 0.7, 0.5],
            train_threshold: 0.9,
            variants: vec![Variant::Model, Variant::Rule, Variant::Combined],
            sft,
            dpo,
            sweep: None,
        }
    }

    /// Parse a TOML config. Keys that are absent take the chosen preset's values.
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let user: toml::Table = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let user = serde_json::to_value(user).map_err(|e| PipelineError::Config(e.to_string()))?;
        let preset = match user.get("preset") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| PipelineError::Config(format!("preset: {e}")))?,
            None => Preset::Toy,
        };
        let mut merged = serde_json::to_value(PipelineConfig::preset(preset)).expect("config serializes");
        merge(&mut merged, user);
        serde_json::from_value(merged).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        PipelineConfig::from_toml_str(&text)
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        for (name, path) in [("train", &self.paths.train), ("dev", &self.paths.dev), ("test", &self.paths.test)] {
            if !path.is_file() {
                return bad(format!("{name} corpus {} does not exist", path.display()));
            }
        }
        if self.paths.workdir.as_os_str().is_empty() {
            return bad("paths.workdir is required".into());
        }
        let thresholds = self.thresholds.iter().chain([&self.train_threshold]);
        let sweep = self.sweep.iter().flat_map(|s| &s.thresholds);
        for &t in thresholds.chain(sweep) {
            FilterConfig::new(t).map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if self.variants.is_empty() {
            return bad("at least one preference-training variant is required".into());
        }
        if let Some(s) = &self.sweep {
            if s.thresholds.is_empty() || s.sizes.is_empty() || s.sizes.contains(&0) {
                return bad("sweep needs thresholds and positive sizes".into());
            }
        }
        self.rules.validate().map_err(PipelineError::Config)?;
        self.sft.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.dpo.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sidecar written next to every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub seed: u64,
    pub config_digest: String,
    pub stage: String,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    pub metrics: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Value,
    pub config_digest: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    /// Artifact path relative to the work directory, mapped to its SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub wall_clock_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub dataset: String,
    pub threshold: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub pairs: usize,
    pub best_epoch: usize,
    pub dev_em: f64,
    pub dev_f1: f64,
    pub test_em: f64,
    pub test_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub available: usize,
    pub size: usize,
    pub used: usize,
    pub test_em: f64,
    pub test_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Test F1 of `threshold` at the largest requested size.
    pub fn final_f1(&self, threshold: f64) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.threshold == threshold)
            .max_by_key(|r| r.size)
            .map(|r| r.test_f1)
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<(), ArtifactError> {
        write_csv(csv_path, &self.rows)?;
        write_json(json_path, self)
    }

    pub fn read_csv(path: &Path) -> Result<Self, ArtifactError> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let rows = reader
            .deserialize()
            .collect::<Result<Vec<SweepRow>, _>>()
            .map_err(|e| csv_error(path, e))?;
        Ok(SweepReport { rows })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> ArtifactError {
    ArtifactError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ArtifactError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| ArtifactError::io(path, e))
}

/// One sweep cell: the evaluated threshold, pairs available at it, the
/// requested size and the test report of the model trained on the prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub threshold: f64,
    pub size: usize,
    pub used: usize,
    pub report: EvalReport,
}

/// Tabulate test scores per (threshold, pair count), thresholds descending
/// then sizes ascending.
pub fn report_threshold_sweep(
    pairs_by_threshold: &[(f64, Vec<PreferencePair>)],
    sizes: &[usize],
    results: &[SweepResult],
) -> SweepReport {
    let available: Vec<(f64, usize)> = pairs_by_threshold.iter().map(|(t, p)| (*t, p.len())).collect();
    let mut rows: Vec<SweepRow> = results
        .iter()
        .filter(|r| sizes.contains(&r.size))
        .map(|r| SweepRow {
            threshold: r.threshold,
            available: available
                .iter()
                .find(|(t, _)| *t == r.threshold)
                .map_or(r.used, |&(_, n)| n),
            size: r.size,
            used: r.used,
            test_em: r.report.em,
            test_f1: r.report.f1,
        })
        .collect();
    rows.sort_by(|a, b| b.threshold.total_cmp(&a.threshold).then(a.size.cmp(&b.size)));
    SweepReport { rows }
}

/// Train preference models on nested prefixes of each threshold's pairs.
/// All thresholds filter one shared seeded permutation of `pairs`, so a
/// smaller threshold's prefix is drawn from the same ordering.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    sft: &PolicyParams,
    pairs: &[PreferencePair],
    sweep: &SweepConfig,
    dev: &Corpus,
    test: &Corpus,
    config: &LossConfig,
    seed: u64,
) -> Result<(Vec<(f64, Vec<PreferencePair>)>, Vec<SweepResult>), BoxError> {
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, "sweep-order")));
    let mut by_threshold = Vec::new();
    let mut results = Vec::new();
    for &t in &sweep.thresholds {
        let kept = filter_by_f1(&shuffled, FilterConfig::new(t)?);
        for &size in &sweep.sizes {
            let used = size.min(kept.len());
            let outcome = dpo_train(sft, &kept[..used], dev, config, seed)?;
            results.push(SweepResult {
                threshold: t,
                size,
                used,
                report: score(&outcome.params, test)?,
            });
        }
        by_threshold.push((t, kept));
    }
    Ok((by_threshold, results))
}

fn score(params: &PolicyParams, corpus: &Corpus) -> Result<EvalReport, BoxError> {
    let predictions: HashMap<String, String> = predict_corpus(params, corpus).into_iter().collect();
    Ok(evaluate(&predictions, corpus)?)
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    prediction: &'a str,
}

struct Run<'a> {
    config: &'a PipelineConfig,
    workdir: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Run<'_> {
    fn meta(&self, stage: &str) -> ArtifactMeta {
        ArtifactMeta {
            seed: self.config.seed,
            config_digest: self.manifest.config_digest.clone(),
            stage: stage.to_string(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    /// Record an artifact written by `stage`, with its sidecar.
    fn record(&mut self, stage: &str, name: &str) -> Result<(), ArtifactError> {
        let path = self.path(name);
        write_json(&meta_path(&path), &self.meta(stage))?;
        self.manifest.outputs.insert(name.to_string(), file_digest(&path)?);
        Ok(())
    }

    /// Parameters carry seed and config digest in their own sidecar.
    fn save_params(&mut self, name: &str, params: &PolicyParams) -> Result<(), BoxError> {
        let mut params = params.clone();
        params.meta.seed = self.config.seed;
        params.meta.config_digest = Some(self.manifest.config_digest.clone());
        let path = self.path(name);
        params.save(&path)?;
        let sidecar = PolicyParams::sidecar_path(&path);
        self.manifest.outputs.insert(name.to_string(), file_digest(&path)?);
        self.manifest
            .outputs
            .insert(format!("{name}.json"), file_digest(&sidecar)?);
        Ok(())
    }

    fn save_pairs(&mut self, stage: &str, name: &str, pairs: &[PreferencePair]) -> Result<(), BoxError> {
        write_pairs(&self.path(name), pairs)?;
        self.record(stage, name)?;
        Ok(())
    }

    fn save_jsonl<T: Serialize>(&mut self, stage: &str, name: &str, rows: &[T]) -> Result<(), BoxError> {
        write_jsonl(&self.path(name), rows)?;
        self.record(stage, name)?;
        Ok(())
    }

    fn save_json<T: Serialize>(&mut self, stage: &str, name: &str, value: &T) -> Result<(), BoxError> {
        write_json(&self.path(name), value)?;
        self.record(stage, name)?;
        Ok(())
    }

    fn save_csv<T: Serialize>(&mut self, stage: &str, name: &str, rows: &[T]) -> Result<(), BoxError> {
        write_csv(&self.path(name), rows)?;
        self.record(stage, name)?;
        Ok(())
    }

    fn save_predictions(&mut self, stage: &str, name: &str, params: &PolicyParams, corpus: &Corpus) -> Result<EvalReport, BoxError> {
        let predictions = predict_corpus(params, corpus);
        let rows: Vec<PredictionRow> = predictions
            .iter()
            .map(|(id, p)| PredictionRow { id, prediction: p })
            .collect();
        self.save_jsonl(stage, name, &rows)?;
        Ok(evaluate(&predictions.into_iter().collect(), corpus)?)
    }

    fn write_manifest(&mut self) -> Result<(), ArtifactError> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        write_json(&self.path("manifest.json"), &self.manifest)
    }

    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<(T, Value), BoxError>) -> Result<T, PipelineError> {
        log::info!("stage {name}");
        let t = Instant::now();
        match f(self) {
            Ok((value, metrics)) => {
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    seconds: t.elapsed().as_secs_f64(),
                    metrics,
                });
                Ok(value)
            }
            Err(source) => {
                self.manifest.failed_stage = Some(name.to_string());
                if let Err(e) = self.write_manifest() {
                    log::error!("could not write partial manifest: {e}");
                }
                Err(PipelineError::Stage { stage: name, source })
            }
        }
    }
}

/// What a pipeline run produced, besides the files on disk.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: RunManifest,
    pub counts: Vec<CountRow>,
    pub report: Vec<ReportRow>,
    pub sweep: Option<SweepReport>,
}

impl PipelineOutcome {
    pub fn row(&self, model: &str) -> Option<&ReportRow> {
        self.report.iter().find(|r| r.model == model)
    }
}

fn to_metrics<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("metrics serialize")
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    config.validate()?;
    let workdir = config.paths.workdir.clone();
    fs::create_dir_all(&workdir).map_err(|e| PipelineError::Config(format!("{}: {e}", workdir.display())))?;
    let mut run = Run {
        config,
        workdir,
        manifest: RunManifest {
            config: to_metrics(config),
            config_digest: config.digest(),
            seed: config.seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            stages: Vec::new(),
            wall_clock_seconds: 0.0,
            failed_stage: None,
        },
        started: Instant::now(),
    };
    let seed = config.seed;

    let (train, dev, test) = run.stage("ingest", |run| {
        let mut load = |name: &str, path: &Path| -> Result<Corpus, BoxError> {
            run.manifest.inputs.insert(name.to_string(), file_digest(path)?);
            Ok(load_corpus(path)?)
        };
        let train = load("train", &config.paths.train)?;
        let dev = load("dev", &config.paths.dev)?;
        let test = load("test", &config.paths.test)?;
        let metrics = serde_json::json!({
            "train": train.len(), "dev": dev.len(), "test": test.len(),
            "train_unanswerable": train.unanswerable_fraction(),
        });
        Ok(((train, dev, test), metrics))
    })?;

    let rule_pairs = run.stage("forge-rules", |run| {
        let rules = RuleConfig {
            seed,
            ..config.rules.clone()
        };
        let pairs = forge_rules(&train, &rules);
        run.save_pairs("forge-rules", "pairs_rule.jsonl", &pairs)?;
        let mut per_rule: BTreeMap<String, usize> = BTreeMap::new();
        for p in &pairs {
            *per_rule.entry(p.source.to_string()).or_default() += 1;
        }
        let metrics = serde_json::json!({ "pairs": pairs.len(), "by_source": per_rule });
        Ok((pairs, metrics))
    })?;

    let model_pairs = run.stage("forge-model", |run| {
        let predictions = split_half_predict(&train, Some(&dev), &config.sft, sub_seed(seed, "forge-model"))?;
        write_predictions(&run.path("forge_predictions.jsonl"), &predictions)?;
        run.record("forge-model", "forge_predictions.jsonl")?;
        let pairs = collect_incorrect(&predictions, &train)?;
        run.save_pairs("forge-model", "pairs_model.jsonl", &pairs)?;
        let metrics = serde_json::json!({ "predictions": predictions.len(), "pairs": pairs.len() });
        Ok((pairs, metrics))
    })?;

    let (counts, training_sets) = run.stage("filter", |run| {
        let mut counts = Vec::new();
        let mut thresholds = config.thresholds.clone();
        if !thresholds.contains(&config.train_threshold) {
            thresholds.push(config.train_threshold);
        }
        let mut kept_at_train = HashMap::new();
        for (dataset, pairs) in [("rule", &rule_pairs), ("model", &model_pairs)] {
            for &t in &thresholds {
                let kept = filter_by_f1(pairs, FilterConfig::new(t)?);
                run.save_pairs("filter", &format!("pairs_{dataset}_tau{t}.jsonl"), &kept)?;
                if config.thresholds.contains(&t) {
                    counts.push(CountRow {
                        dataset: dataset.to_string(),
                        threshold: t,
                        pairs: kept.len(),
                    });
                }
                if t == config.train_threshold {
                    kept_at_train.insert(dataset, kept);
                }
            }
        }
        run.save_csv("filter", "counts.csv", &counts)?;
        let model = kept_at_train.remove("model").unwrap_or_default();
        let rule = kept_at_train.remove("rule").unwrap_or_default();
        let mut combined = dedup_pairs(model.iter().chain(&rule).cloned().collect());
        sort_pairs(&mut combined);
        let sets: BTreeMap<Variant, Vec<PreferencePair>> = config
            .variants
            .iter()
            .map(|&v| {
                let pairs = match v {
                    Variant::Model => model.clone(),
                    Variant::Rule => rule.clone(),
                    Variant::Combined => combined.clone(),
                };
                (v, pairs)
            })
            .collect();
        let metrics = to_metrics(&counts);
        Ok(((counts, sets), metrics))
    })?;

    let sft = run.stage("sft", |run| {
        let outcome = sft_train(&train, &dev, &config.sft, sub_seed(seed, "sft"))?;
        run.save_params("sft.params", &outcome.params)?;
        run.save_jsonl("sft", "sft_log.jsonl", &outcome.history)?;
        let metrics = serde_json::json!({ "best_epoch": outcome.best_epoch, "epochs": outcome.history.len() - 1 });
        Ok((outcome, metrics))
    })?;

    let mut trained = Vec::new();
    for (&variant, pairs) in &training_sets {
        let outcome = run.stage("dpo", |run| {
            let outcome = dpo_train(&sft.params, pairs, &dev, &config.dpo, sub_seed(seed, "dpo"))?;
            if !outcome.reference.bit_identical(&sft.params) {
                return Err("reference policy changed during preference training".into());
            }
            let name = variant.name();
            run.save_params(&format!("dpo_{name}.params"), &outcome.params)?;
            run.save_jsonl("dpo", &format!("dpo_{name}_log.jsonl"), &outcome.history)?;
            let metrics = serde_json::json!({
                "variant": name, "pairs": pairs.len(), "best_epoch": outcome.best_epoch,
            });
            Ok((outcome, metrics))
        })?;
        trained.push((variant, pairs.len(), outcome));
    }

    let report = run.stage("evaluate", |run| {
        let mut models: Vec<(String, &PolicyParams, usize, usize)> = vec![("sft".into(), &sft.params, 0, sft.best_epoch)];
        for (variant, n, outcome) in &trained {
            models.push((format!("dpo-{}", variant.name()), &outcome.params, *n, outcome.best_epoch));
        }
        let mut rows = Vec::new();
        for (model, params, pairs, best_epoch) in models {
            let d = run.save_predictions("evaluate", &format!("predictions_{model}_dev.jsonl"), params, &dev)?;
            let t = run.save_predictions("evaluate", &format!("predictions_{model}_test.jsonl"), params, &test)?;
            rows.push(ReportRow {
                model,
                pairs,
                best_epoch,
                dev_em: d.em,
                dev_f1: d.f1,
                test_em: t.em,
                test_f1: t.f1,
            });
        }
        run.save_csv("evaluate", "report.csv", &rows)?;
        run.save_json("evaluate", "report.json", &rows)?;
        let metrics = to_metrics(&rows);
        Ok((rows, metrics))
    })?;

    let sweep = match &config.sweep {
        None => None,
        Some(sweep) => Some(run.stage("sweep", |run| {
            let (by_threshold, results) =
                run_sweep(&sft.params, &model_pairs, sweep, &dev, &test, &config.dpo, sub_seed(seed, "dpo"))?;
            let report = report_threshold_sweep(&by_threshold, &sweep.sizes, &results);
            report.write(&run.path("sweep.csv"), &run.path("sweep.json"))?;
            run.record("sweep", "sweep.csv")?;
            run.record("sweep", "sweep.json")?;
            let metrics = to_metrics(&report.rows);
            Ok((report, metrics))
        })?),
    };

    run.write_manifest()
        .map_err(|e| PipelineError::Stage { stage: "manifest", source: e.into() })?;
    Ok(PipelineOutcome {
        manifest: run.manifest,
        counts,
        report,
        sweep,
    })
}
