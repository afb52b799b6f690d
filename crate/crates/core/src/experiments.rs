//! Named experiment presets, run directories and multi-run suites.

use crate::amnesic::run_amnesic;
use crate::analysis::correlation_report;
use crate::error::{ArithError, Result};
use crate::model::{Family, Model, ModelConfig, PositionalEncoding};
use crate::rng::RngState;
use crate::tasks::{generate_all, make_split, random_output_dataset, DigitOrder, Operation, Sample, SplitKind, TaskSpec};
use crate::train::{epochs_to_threshold, estimate_flops, train, FlopEstimate, MetricsRow, RunOutputs, Threshold, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

const MODEL_STREAM: u64 = 1;
pub const THRESHOLD: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Ground-truth completions for every operand pair.
    Exact,
    /// Same prompts, completions drawn uniformly at random.
    RandomOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Correlation,
    Amnesic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub name: String,
    pub description: String,
    pub task: TaskSpec,
    pub dataset: DatasetKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitKind,
    #[serde(default)]
    pub analyses: Vec<Analysis>,
}

impl ExperimentPreset {
    fn base(name: &str, description: &str, task: TaskSpec, epochs: usize) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            task,
            dataset: DatasetKind::Exact,
            model: ModelConfig::encoder_decoder(),
            train: TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
            split: SplitKind::Random,
            analyses: Vec::new(),
        }
    }

    fn split(mut self, split: SplitKind) -> Self {
        self.split = split;
        self
    }

    fn model(mut self, f: impl FnOnce(&mut ModelConfig)) -> Self {
        f(&mut self.model);
        self
    }

    fn decoder_only(mut self) -> Self {
        self.model = ModelConfig::decoder_only();
        self.train = TrainConfig {
            epochs: self.train.epochs,
            ..TrainConfig::decoder_only()
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.dataset == DatasetKind::RandomOutput && self.task.operation != Operation::Add {
            return Err(ArithError::Config("random-output datasets are defined for addition".into()));
        }
        if self.task.operand_bits != 7 && self.split != SplitKind::Random {
            return Err(ArithError::Config("VS_t and VS_v splits need 7-bit operands".into()));
        }
        let longest = self.task.prompt_length() + self.task.output_length();
        if self.model.family == Family::DecoderOnly && self.model.max_positions < longest {
            return Err(ArithError::Config(format!("max_positions {} < sequence length {longest}", self.model.max_positions)));
        }
        Ok(())
    }

    /// Git-style blob hash of the parameters that determine the dataset and split.
    pub fn dataset_hash(&self, seed: u64) -> String {
        let random_seed = matches!(self.dataset, DatasetKind::RandomOutput).then_some(seed);
        let split_seed = (self.split == SplitKind::Random).then_some(seed);
        let params = serde_json::json!({
            "task": self.task,
            "dataset": self.dataset,
            "dataset_seed": random_seed,
            "split": self.split,
            "split_seed": split_seed,
        });
        let body = params.to_string();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Every named preset.
pub fn presets() -> Vec<ExperimentPreset> {
    let add = TaskSpec::addition();
    let mul = TaskSpec::multiplication();
    let plain = |t: TaskSpec| t.with_order(DigitOrder::Plain, DigitOrder::Plain);
    let ablation = |name: &str, what: &str, f: fn(&mut ModelConfig)| {
        let mut p = ExperimentPreset::base(name, what, add, 1000).model(f);
        p.train.stop_at_val_seq_acc = None;
        p
    };
    let mut add_random = ExperimentPreset::base("add-random", "addition, random split", add, 100);
    add_random.analyses = vec![Analysis::Correlation, Analysis::Amnesic];
    let mut rand_output = ExperimentPreset::base("rand-output", "addition prompts with random completions", add, 1000);
    rand_output.dataset = DatasetKind::RandomOutput;
    let mut smoke = ExperimentPreset::base("add-smoke", "5-bit addition smoke run", TaskSpec::new(Operation::Add, 5), 20);
    smoke.model.encoder_layers = 1;
    smoke.model.decoder_layers = 1;
    smoke.train.learning_rate = 2e-4;
    smoke.train.batch_size = 1;
    vec![
        add_random,
        ExperimentPreset::base("mul-random", "multiplication, random split", mul, 400),
        ExperimentPreset::base("add-vst", "addition, token-space validation square", add, 100).split(SplitKind::VsT),
        ExperimentPreset::base("add-vsv", "addition, value-space validation square", add, 100).split(SplitKind::VsV),
        ExperimentPreset::base("mul-vst", "multiplication, token-space validation", mul, 400).split(SplitKind::VsT),
        ExperimentPreset::base("mul-vsv", "multiplication, value-space validation", mul, 400).split(SplitKind::VsV),
        rand_output,
        ExperimentPreset::base("plain-order-add", "addition, MSB-first input and output", plain(add), 1000),
        ExperimentPreset::base("plain-order-mul", "multiplication, MSB-first input and output", plain(mul), 1000),
        ablation("ablation-squeeze", "encoder reduced to embedding plus positions", |m| m.ablations.squeeze_encoder = true),
        ablation("ablation-h1", "single attention head", |m| m.num_heads = 1),
        ablation("ablation-d32", "d_model 32", |m| *m = m.clone().with_d_model(32)),
        ablation("ablation-nope", "no positional encoding", |m| m.positional_encoding = PositionalEncoding::None),
        ablation("ablation-noattn", "no attention sublayers", |m| m.ablations.no_attention = true),
        ablation("ablation-noffn", "no feed-forward sublayers", |m| m.ablations.no_ffn = true),
        ExperimentPreset::base("nanogpt-add", "decoder-only, addition", add, 100).decoder_only(),
        ExperimentPreset::base("nanogpt-mul", "decoder-only, multiplication", mul, 400).decoder_only(),
        ExperimentPreset::base("nanogpt-vst", "decoder-only, addition, VS_t", add, 100).decoder_only().split(SplitKind::VsT),
        ExperimentPreset::base("nanogpt-vsv", "decoder-only, addition, VS_v", add, 100).decoder_only().split(SplitKind::VsV),
        smoke,
    ]
}

pub fn preset(name: &str) -> Result<ExperimentPreset> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| ArithError::Config(format!("unknown preset {name:?}")))
}

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value, path: &str) -> Result<()> {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| ArithError::Config(format!("unknown configuration key {key:?}")))?;
                if v.is_object() && slot.is_object() {
                    merge(slot, v, &key)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        _ => Err(ArithError::Config(format!("{path} must be a table"))),
    }
}

/// Applies a TOML document of dotted keys (`train.epochs = 20`,
/// `[model] d_model = 32`) on top of `preset`.
pub fn apply_config(preset: &ExperimentPreset, toml_text: &str) -> Result<ExperimentPreset> {
    let table: toml::Table = toml_text.parse().map_err(|e| ArithError::Config(format!("config parse error: {e}")))?;
    let patch = serde_json::to_value(table)?;
    let mut value = serde_json::to_value(preset)?;
    merge(&mut value, &patch, "")?;
    let out: ExperimentPreset = serde_json::from_value(value).map_err(|e| ArithError::Config(format!("config value error: {e}")))?;
    out.validate()?;
    Ok(out)
}

/// Dataset and split exactly as a preset run builds them.
pub fn build_dataset(preset: &ExperimentPreset, seed: u64) -> Result<(Vec<Sample>, crate::tasks::SplitSpec)> {
    let samples = match preset.dataset {
        DatasetKind::Exact => generate_all(&preset.task)?,
        DatasetKind::RandomOutput => random_output_dataset(&preset.task, seed)?,
    };
    let split = make_split(preset.split, &preset.task, &samples, seed)?;
    Ok((samples, split))
}

pub fn build_model(preset: &ExperimentPreset, seed: u64) -> Result<Model> {
    Model::build(preset.model.clone(), &mut RngState::new(seed).fork(MODEL_STREAM))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub preset: ExperimentPreset,
    pub seed: u64,
    pub rng: String,
    pub init: String,
    pub dataset_hash: String,
    pub train_size: usize,
    pub validation_size: usize,
    pub parameter_count: usize,
    pub estimated_flops: f64,
    pub training_tokens: u64,
    pub outputs: RunPaths,
    pub wall_clock_seconds: Option<f64>,
    pub epochs_run: Option<usize>,
    pub epochs_to_threshold: Option<Threshold>,
    pub final_metrics: Option<MetricsRow>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunPaths {
    pub manifest: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl RunPaths {
    pub fn under(dir: &Path) -> Self {
        Self {
            manifest: dir.join("manifest.json"),
            metrics: dir.join("metrics.csv"),
            checkpoints: dir.join("checkpoints"),
            reports: dir.join("reports"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub metrics: Vec<MetricsRow>,
    pub threshold: Threshold,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?;
    Ok(())
}

/// Trains `preset` under `dir` and runs its analyses.
///
/// `dir` ends up holding `manifest.json`, `metrics.csv`, `checkpoints/`
/// and `reports/`.
pub fn run_preset(preset: &ExperimentPreset, seed: u64, dir: &Path, on_epoch: &mut dyn FnMut(&MetricsRow)) -> Result<RunSummary> {
    let mut preset = preset.clone();
    preset.train.seed = seed;
    preset.validate()?;
    let paths = RunPaths::under(dir);
    std::fs::create_dir_all(&paths.checkpoints)?;
    std::fs::create_dir_all(&paths.reports)?;
    let (samples, split) = build_dataset(&preset, seed)?;
    let model = build_model(&preset, seed)?;
    let seq_len = (preset.task.prompt_length() + preset.task.output_length()) as u64;
    let flops = estimate_flops(model.parameter_count() as u64, split.train.len() as u64, seq_len, preset.train.epochs as u64);
    let mut manifest = RunManifest {
        tool: "arithlm".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        preset: preset.clone(),
        seed,
        rng: RngState::new(seed).algorithm().into(),
        init: crate::model::init_scheme(preset.model.family).into(),
        dataset_hash: preset.dataset_hash(seed),
        train_size: split.train.len(),
        validation_size: split.validation.len(),
        parameter_count: model.parameter_count(),
        estimated_flops: flops.flops_f64(),
        training_tokens: flops.tokens,
        outputs: paths.clone(),
        wall_clock_seconds: None,
        epochs_run: None,
        epochs_to_threshold: None,
        final_metrics: None,
    };
    write_json(&paths.manifest, &manifest)?;
    split.write_json(&paths.reports.join("split.json"))?;
    let started = Instant::now();
    let outputs = RunOutputs {
        checkpoint_dir: Some(paths.checkpoints.clone()),
        metrics_path: Some(paths.metrics.clone()),
        meta: serde_json::json!({ "preset": preset.name, "dataset_hash": manifest.dataset_hash }),
    };
    let outcome = train(model, &preset.task, &samples, &split, &preset.train, &outputs, on_epoch)?;
    let threshold = epochs_to_threshold(&outcome.metrics, THRESHOLD);
    run_analyses(&preset, &outcome.model, &samples, &split, seed, &paths.reports)?;
    manifest.wall_clock_seconds = Some(started.elapsed().as_secs_f64());
    manifest.epochs_run = Some(outcome.metrics.len());
    manifest.epochs_to_threshold = Some(threshold);
    manifest.final_metrics = outcome.metrics.last().cloned();
    write_json(&paths.manifest, &manifest)?;
    Ok(RunSummary {
        manifest,
        metrics: outcome.metrics,
        threshold,
    })
}

/// Re-runs the preset and seed recorded in a manifest into `dir`.
pub fn rerun_manifest(manifest: &Path, dir: &Path, on_epoch: &mut dyn FnMut(&MetricsRow)) -> Result<RunSummary> {
    let m = RunManifest::load(manifest)?;
    run_preset(&m.preset, m.seed, dir, on_epoch)
}

fn run_analyses(
    preset: &ExperimentPreset,
    model: &Model,
    samples: &[Sample],
    split: &crate::tasks::SplitSpec,
    seed: u64,
    reports: &Path,
) -> Result<()> {
    for analysis in &preset.analyses {
        match analysis {
            Analysis::Correlation => {
                let report = correlation_report(model, &preset.task)?;
                report.write_json(BufWriter::new(File::create(reports.join("correlation.json"))?))?;
                report.write_csv(BufWriter::new(File::create(reports.join("correlation.csv"))?))?;
                report.write_svg(BufWriter::new(File::create(reports.join("correlation.svg"))?))?;
            }
            Analysis::Amnesic => {
                let fit: Vec<&Sample> = samples.iter().collect();
                let eval: Vec<&Sample> = split.validation.iter().map(|&i| &samples[i]).collect();
                match run_amnesic(model, &fit, &eval, 3, 2, seed) {
                    Ok(out) => {
                        write_json(&reports.join("amnesic.json"), &out.report)?;
                        out.projector.save(&reports.join("amnesic_directions.bin"), serde_json::json!({ "layer": 3 }))?;
                    }
                    Err(ArithError::Precondition(msg)) => {
                        write_json(&reports.join("amnesic.json"), &serde_json::json!({ "skipped": msg }))?;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(())
}

/// Mean of several equally long curves, epoch by epoch.
pub fn average_curves(curves: &[Vec<MetricsRow>]) -> Result<Vec<MetricsRow>> {
    let first = curves.first().ok_or_else(|| ArithError::Contract("no curves to average".into()))?;
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(ArithError::Contract("curves differ in length".into()));
    }
    let k = curves.len() as f64;
    let mean = |f: &dyn Fn(&MetricsRow) -> f64, i: usize| curves.iter().map(|c| f(&c[i])).sum::<f64>() / k;
    Ok((0..first.len())
        .map(|i| MetricsRow {
            epoch: first[i].epoch,
            loss: mean(&|r| r.loss, i),
            train_token_acc: mean(&|r| r.train_token_acc, i),
            val_token_acc: mean(&|r| r.val_token_acc, i),
            train_seq_acc: mean(&|r| r.train_seq_acc, i),
            val_seq_acc: mean(&|r| r.val_seq_acc, i),
            mae: curves.iter().map(|c| c[i].mae).sum::<Option<f64>>().map(|s| s / k),
        })
        .collect())
}

/// One row of a suite table.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub variant: String,
    pub preset: String,
    pub parameter_count: usize,
    pub threshold: Threshold,
    pub final_val_seq_acc: Option<f64>,
}

impl SuiteRow {
    fn from_summary(variant: &str, s: &RunSummary) -> Self {
        Self {
            variant: variant.into(),
            preset: s.manifest.preset.name.clone(),
            parameter_count: s.manifest.parameter_count,
            threshold: s.threshold,
            final_val_seq_acc: s.metrics.last().map(|r| r.val_seq_acc),
        }
    }
}

pub fn write_suite_table(rows: &[SuiteRow], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "variant,preset,parameters,epochs_to_95,final_val_seq_acc")?;
    for r in rows {
        let fin = r.final_val_seq_acc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{}", r.variant, r.preset, r.parameter_count, r.threshold, fin)?;
    }
    Ok(())
}

/// Runs `(variant, preset)` jobs, up to `jobs` at a time, each in its own
/// subdirectory of `out`.
pub fn run_many(variants: &[(String, ExperimentPreset)], seed: u64, out: &Path, jobs: usize) -> Result<Vec<SuiteRow>> {
    let jobs = jobs.max(1);
    let mut rows: Vec<Option<Result<SuiteRow>>> = (0..variants.len()).map(|_| None).collect();
    for (batch, slots) in variants.chunks(jobs).zip(rows.chunks_mut(jobs)) {
        std::thread::scope(|scope| {
            for ((variant, preset), slot) in batch.iter().zip(slots.iter_mut()) {
                let dir = out.join(variant);
                scope.spawn(move || {
                    *slot = Some(run_preset(preset, seed, &dir, &mut |_| {}).map(|s| SuiteRow::from_summary(variant, &s)));
                });
            }
        });
    }
    rows.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Table-3 style sweep over architectural variants for addition.
pub fn ablation_suite(seed: u64, out: &Path, jobs: usize, stop_at_threshold: bool) -> Result<Vec<SuiteRow>> {
    let mut full = preset("add-random")?;
    full.name = "ablation-full".into();
    full.train.epochs = 1000;
    full.analyses.clear();
    let mut variants = vec![("full".to_string(), full)];
    for v in ["squeeze", "h1", "d32", "nope", "noattn", "noffn"] {
        variants.push((v.to_string(), preset(&format!("ablation-{v}"))?));
    }
    if stop_at_threshold {
        for (_, p) in &mut variants {
            p.train.stop_at_val_seq_acc = Some(THRESHOLD);
        }
    }
    let rows = run_many(&variants, seed, out, jobs)?;
    write_suite_table(&rows, &out.join("ablation_table.csv"))?;
    Ok(rows)
}

/// Reverse order against plain output order and plain input order.
pub fn order_experiment(operation: Operation, seed: u64, out: &Path, jobs: usize, epochs: usize) -> Result<Vec<SuiteRow>> {
    let base = TaskSpec::new(operation, 7);
    let make = |name: &str, input: DigitOrder, output: DigitOrder| {
        let mut p = ExperimentPreset::base(name, "digit order study", base.with_order(input, output), epochs);
        p.train.stop_at_val_seq_acc = Some(THRESHOLD);
        (name.to_string(), p)
    };
    let variants = vec![
        make("reverse", DigitOrder::Reverse, DigitOrder::Reverse),
        make("plain-output", DigitOrder::Reverse, DigitOrder::Plain),
        make("plain-input", DigitOrder::Plain, DigitOrder::Reverse),
    ];
    let rows = run_many(&variants, seed, out, jobs)?;
    write_suite_table(&rows, &out.join("order_table.csv"))?;
    Ok(rows)
}

/// Decoder-only replication on the random, VS_t and VS_v splits.
pub fn nanogpt_suite(seed: u64, out: &Path, jobs: usize) -> Result<Vec<SuiteRow>> {
    let variants = ["nanogpt-add", "nanogpt-mul", "nanogpt-vst", "nanogpt-vsv"]
        .iter()
        .map(|n| Ok((n.to_string(), preset(n)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = run_many(&variants, seed, out, jobs)?;
    write_suite_table(&rows, &out.join("nanogpt_table.csv"))?;
    Ok(rows)
}

/// FLOP estimate for a preset without building its dataset.
pub fn preset_flops(preset: &ExperimentPreset) -> Result<FlopEstimate> {
    let model = build_model(preset, 0)?;
    let n = preset.task.pair_count() as u64;
    let train = match preset.split {
        SplitKind::Random => n - n / 4,
        _ => n - 4096,
    };
    let seq = (preset.task.prompt_length() + preset.task.output_length()) as u64;
    Ok(estimate_flops(model.parameter_count() as u64, train, seq, preset.train.epochs as u64))
}
