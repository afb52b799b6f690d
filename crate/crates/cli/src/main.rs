use anyhow::{bail, Context, Result};
use arithlm::amnesic::run_amnesic;
use arithlm::analysis::correlation_report;
use arithlm::experiments::{
    ablation_suite, apply_config, average_curves, build_dataset, nanogpt_suite, order_experiment, preset, preset_flops, presets,
    rerun_manifest, run_preset, ExperimentPreset, RunSummary, SuiteRow,
};
use arithlm::tasks::{discontinuity_matrix, export_dataset, Operation};
use arithlm::train::{evaluate, write_metrics_csv, MetricsRow};
use arithlm::{Model, SplitKind};
use clap::{Parser, Subcommand, ValueEnum};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "arithlm", version, about = "Train and analyse small Transformers on binary arithmetic")]
struct Cli {
    /// Run seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML file of dotted overrides applied to the selected preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Op {
    Add,
    Mul,
}

impl From<Op> for Operation {
    fn from(op: Op) -> Self {
        match op {
            Op::Add => Operation::Add,
            Op::Mul => Operation::Mul,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Random,
    Vst,
    Vsv,
}

impl From<Split> for SplitKind {
    fn from(s: Split) -> Self {
        match s {
            Split::Random => SplitKind::Random,
            Split::Vst => SplitKind::VsT,
            Split::Vsv => SplitKind::VsV,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteKind {
    Ablation,
    Order,
    Nanogpt,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the exhaustive dataset and its split.
    GenData {
        #[arg(long, value_enum, default_value = "add")]
        op: Op,
        #[arg(long, default_value_t = 7)]
        bits: u32,
        #[arg(long, value_enum, default_value = "random")]
        split: Split,
        /// Replace completions with uniformly random bits.
        #[arg(long)]
        random_output: bool,
    },
    /// Train a preset without running its analyses.
    Train {
        #[arg(long, default_value = "add-random")]
        preset: String,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a preset's train and validation splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "add-random")]
        preset: String,
    },
    /// Distance correlation report for a checkpoint.
    AnalyzeCorrelation {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "add")]
        op: Op,
    },
    /// Value probe, nullspace removal and random control for a checkpoint.
    Amnesic {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "add-random")]
        preset: String,
        #[arg(long, default_value_t = 3)]
        layer: usize,
        #[arg(long, default_value_t = 2)]
        iterations: usize,
    },
    /// Input/output bit-flip table for addition.
    Discontinuity {
        #[arg(long, default_value_t = 7)]
        bits: u32,
    },
    /// Train a named preset and run its analyses.
    RunPreset {
        /// Preset name; omit with --from-manifest.
        name: Option<String>,
        /// Comma-separated seeds; overrides --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Re-run the preset and seed recorded in a manifest.
        #[arg(long, conflicts_with = "name")]
        from_manifest: Option<PathBuf>,
    },
    /// Print every preset with its estimated training cost.
    ListPresets,
    /// Multi-run studies.
    Suite {
        #[arg(value_enum)]
        kind: SuiteKind,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_enum, default_value = "add")]
        op: Op,
        /// Epoch cap for the order study.
        #[arg(long, default_value_t = 1000)]
        epochs: usize,
        /// Stop ablation runs once they reach the threshold.
        #[arg(long)]
        stop_at_threshold: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn out_dir(cli_out: &Option<PathBuf>, default: &str) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
}

fn load_preset(name: &str, config: &Option<PathBuf>) -> Result<ExperimentPreset> {
    let p = preset(name)?;
    match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(apply_config(&p, &text)?)
        }
        None => Ok(p),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let (model, _) = Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

fn progress(name: &str) -> impl FnMut(&MetricsRow) + '_ {
    move |r: &MetricsRow| {
        eprintln!(
            "{name} epoch {:>4} loss {:.4} train_seq {:.4} val_seq {:.4}",
            r.epoch, r.loss, r.train_seq_acc, r.val_seq_acc
        )
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?;
    Ok(())
}

fn print_summary(s: &RunSummary) {
    let last = s.metrics.last();
    println!(
        "{}: seed {} epochs {} val_seq_acc {:.4} epochs_to_95 {}",
        s.manifest.preset.name,
        s.manifest.seed,
        s.metrics.len(),
        last.map_or(0.0, |r| r.val_seq_acc),
        s.threshold
    );
}

fn print_suite(rows: &[SuiteRow]) {
    for r in rows {
        let fin = r.final_val_seq_acc.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{:<14} {:<18} {:>8} {:>14} {}", r.variant, r.preset, r.parameter_count, r.threshold.to_string(), fin);
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { op, bits, split, random_output } => {
            let mut p = load_preset("add-random", &cli.config)?;
            p.name = "gen-data".into();
            p.task = arithlm::TaskSpec::new(op.into(), bits).with_order(p.task.input_order, p.task.output_order);
            p.split = split.into();
            p.dataset = if random_output {
                arithlm::experiments::DatasetKind::RandomOutput
            } else {
                arithlm::experiments::DatasetKind::Exact
            };
            p.validate()?;
            let (samples, spec) = build_dataset(&p, seed)?;
            let dir = out_dir(&cli.out, "data");
            std::fs::create_dir_all(&dir)?;
            let mut w = BufWriter::new(File::create(dir.join("dataset.txt"))?);
            export_dataset(&samples, p.task.operation, &mut w)?;
            w.flush()?;
            spec.write_json(&dir.join("split.json"))?;
            write_json(&dir.join("task.json"), &serde_json::json!({ "task": p.task, "dataset": p.dataset, "seed": seed, "dataset_hash": p.dataset_hash(seed) }))?;
            println!("{} samples, {} train, {} validation -> {}", samples.len(), spec.train.len(), spec.validation.len(), dir.display());
        }
        Command::Train { preset: name, epochs } => {
            let mut p = load_preset(&name, &cli.config)?;
            p.analyses.clear();
            if let Some(e) = epochs {
                p.train.epochs = e;
            }
            let dir = out_dir(&cli.out, &name);
            let s = run_preset(&p, seed, &dir, &mut progress(&name))?;
            print_summary(&s);
        }
        Command::Eval { checkpoint, preset: name } => {
            let p = load_preset(&name, &cli.config)?;
            let model = load_model(&checkpoint)?;
            let (samples, split) = build_dataset(&p, seed)?;
            let pick = |ids: &[usize]| ids.iter().map(|&i| &samples[i]).collect::<Vec<_>>();
            let train = evaluate(&model, &p.task, &pick(&split.train))?;
            let val = evaluate(&model, &p.task, &pick(&split.validation))?;
            let report = serde_json::json!({
                "checkpoint": checkpoint,
                "preset": p.name,
                "split": split.name,
                "seed": seed,
                "train": train,
                "validation": val,
            });
            let dir = out_dir(&cli.out, "eval");
            write_json(&dir.join("reports/eval.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::AnalyzeCorrelation { checkpoint, op } => {
            let model = load_model(&checkpoint)?;
            let task = match Operation::from(op) {
                Operation::Add => arithlm::TaskSpec::addition(),
                Operation::Mul => arithlm::TaskSpec::multiplication(),
            };
            let report = correlation_report(&model, &task)?;
            let dir = out_dir(&cli.out, "correlation").join("reports");
            std::fs::create_dir_all(&dir)?;
            report.write_json(BufWriter::new(File::create(dir.join("correlation.json"))?))?;
            report.write_csv(BufWriter::new(File::create(dir.join("correlation.csv"))?))?;
            report.write_svg(BufWriter::new(File::create(dir.join("correlation.svg"))?))?;
            println!(
                "pairs {} encoder spread {:.4} decoder spread {:.4} -> {}",
                report.pairs,
                report.encoder_spread(),
                report.decoder_spread(),
                dir.display()
            );
        }
        Command::Amnesic { checkpoint, preset: name, layer, iterations } => {
            let p = load_preset(&name, &cli.config)?;
            if p.task.operation != Operation::Add {
                bail!("amnesic probing is defined for addition presets");
            }
            let model = load_model(&checkpoint)?;
            let (samples, split) = build_dataset(&p, seed)?;
            let fit: Vec<_> = samples.iter().collect();
            let eval: Vec<_> = split.validation.iter().map(|&i| &samples[i]).collect();
            let out = run_amnesic(&model, &fit, &eval, layer, iterations, seed)?;
            let dir = out_dir(&cli.out, "amnesic").join("reports");
            write_json(&dir.join("amnesic.json"), &serde_json::to_value(&out.report)?)?;
            out.projector.save(&dir.join("amnesic_directions.bin"), serde_json::json!({ "layer": layer }))?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
        }
        Command::Discontinuity { bits } => {
            let m = discontinuity_matrix(bits, seed)?;
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir)?;
                m.write_csv(BufWriter::new(File::create(dir.join("discontinuity.csv"))?))?;
            }
            let stdout = std::io::stdout();
            m.write_csv(stdout.lock())?;
        }
        Command::RunPreset { name, seeds, from_manifest } => {
            if let Some(manifest) = from_manifest {
                let dir = out_dir(&cli.out, "rerun");
                let s = rerun_manifest(&manifest, &dir, &mut progress("rerun"))?;
                print_summary(&s);
                return Ok(());
            }
            let Some(name) = name else {
                bail!("run-preset needs a preset name or --from-manifest");
            };
            let p = load_preset(&name, &cli.config)?;
            let seeds = if seeds.is_empty() { vec![seed] } else { seeds };
            let base = out_dir(&cli.out, &name);
            let mut curves = Vec::new();
            for &s in &seeds {
                let dir = if seeds.len() == 1 { base.clone() } else { base.join(format!("seed-{s}")) };
                let summary = run_preset(&p, s, &dir, &mut progress(&name))?;
                print_summary(&summary);
                curves.push(summary.metrics);
            }
            if curves.len() > 1 {
                let mean = average_curves(&curves).context("seeds stopped at different epochs; no mean curve written")?;
                write_metrics_csv(&mean, BufWriter::new(File::create(base.join("mean_metrics.csv"))?))?;
            }
        }
        Command::ListPresets => {
            for p in presets() {
                let flops = preset_flops(&p)?;
                println!("{:<18} {:>5} epochs {:>9.2e} FLOPs  {}", p.name, p.train.epochs, flops.flops_f64(), p.description);
            }
        }
        Command::Suite { kind, jobs, op, epochs, stop_at_threshold } => {
            let rows = match kind {
                SuiteKind::Ablation => ablation_suite(seed, &out_dir(&cli.out, "ablation"), jobs, stop_at_threshold)?,
                SuiteKind::Order => order_experiment(op.into(), seed, &out_dir(&cli.out, "order"), jobs, epochs)?,
                SuiteKind::Nanogpt => nanogpt_suite(seed, &out_dir(&cli.out, "nanogpt"), jobs)?,
            };
            print_suite(&rows);
        }
    }
    Ok(())
}
