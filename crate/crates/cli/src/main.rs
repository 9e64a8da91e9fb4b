//! `afm`: generate data, pretrain, run active-learning loops, fine-tune,
//! evaluate and report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use afm_core::checkpoint::{load_checkpoint, save_checkpoint};
use afm_core::config::RunConfig;
use afm_core::error::{Error, Result};
use afm_core::eval::{
    append_result, build_task, emit_report, evaluate, load_results, synthetic_tasks, task_by_name,
    ReportFormat, TaskSpec,
};
use afm_core::signal::{
    dataset_from_recordings, load_manifest, split_dataset, synth_generate, write_dataset,
    LabeledDataset,
};
use afm_core::train::{
    al_training_loop, curve_to_jsonl, finetune_for_task, pretrain_backbone, ModelCheckpoint,
    Splits, Strategy,
};
use clap::{Args, Parser, Subcommand};

const BACKBONE: &str = "backbone.ckpt";
const RESULTS: &str = "results.jsonl";

#[derive(Parser)]
#[command(name = "afm", version, about = "Contrastive pretraining and active learning for vibration fault diagnosis")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// INI-style run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (AFM_OUT_DIR takes precedence).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as a manifest plus binary recordings.
    Synth {
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Contrastive pretraining of the backbone.
    Pretrain,
    /// Seed phase plus active-learning (or random) rounds.
    AlTrain {
        #[arg(long, default_value = "al")]
        strategy: Strategy,
    },
    /// Fine-tune a head for one task on a labeled fraction and evaluate it.
    Finetune {
        #[arg(long)]
        task: String,
        #[arg(long)]
        fraction: f64,
    },
    /// Fine-tune and evaluate every task (or one) at every configured fraction.
    Eval {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Summarize stored results as a table.
    Report {
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
    },
    /// Print the effective configuration with all defaults.
    PrintConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if matches!(
        e,
        Error::Config { .. } | Error::InvalidArgument(_) | Error::UnknownTask { .. }
    ) {
        1
    } else {
        2
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(o) = std::env::var_os("AFM_OUT_DIR").filter(|o| !o.is_empty()) {
        cfg.out_dir = PathBuf::from(o);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.common)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::PrintConfig => {
            print!("{}", cfg.to_ini());
            Ok(())
        }
        Command::Synth { classes } => {
            if let Some(c) = classes {
                if c < 2 {
                    return Err(Error::InvalidArgument(format!("--classes {c} must be at least 2")));
                }
                cfg.synth.classes = afm_core::signal::SyntheticSpec::with_classes(c).classes;
            }
            cmd_synth(&cfg)
        }
        Command::Pretrain => cmd_pretrain(&cfg).map(|_| ()),
        Command::AlTrain { strategy } => cmd_al_train(&cfg, strategy),
        Command::Finetune { task, fraction } => {
            let task = task_by_name(&task)?;
            cmd_finetune(&cfg, &[task], &[fraction])
        }
        Command::Eval { task, fraction } => {
            let tasks = match task {
                Some(t) => vec![task_by_name(&t)?],
                None => synthetic_tasks(),
            };
            let fractions = fraction.map_or_else(|| cfg.fractions.clone(), |f| vec![f]);
            cmd_finetune(&cfg, &tasks, &fractions)
        }
        Command::Report { format } => cmd_report(&cfg, format),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.out_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| io_err(format!("creating {}", dir.display()), e))?;
    Ok(dir)
}

fn io_err(context: String, e: std::io::Error) -> Error {
    Error::Io { context, source: e }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(format!("writing {}", path.display()), e))
}

fn dataset(cfg: &RunConfig) -> Result<LabeledDataset> {
    match &cfg.manifest {
        Some(m) => {
            let recordings = load_manifest(m)?;
            dataset_from_recordings(&recordings, cfg.encoder.window_len, cfg.stride, None)
        }
        None => synth_generate(&cfg.synth_spec(), cfg.seed),
    }
}

fn splits(cfg: &RunConfig) -> Result<Splits> {
    let (train, val, test) = split_dataset(&dataset(cfg)?, cfg.split, cfg.seed)?;
    Ok(Splits { train, val, test })
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let ds = synth_generate(&cfg.synth_spec(), cfg.seed)?;
    let manifest = write_dataset(&ds, &out_dir(cfg)?.join("data"), cfg.synth.sample_rate)?;
    println!("{} windows, {} classes -> {}", ds.len(), ds.num_classes, manifest.display());
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<ModelCheckpoint> {
    let dir = out_dir(cfg)?;
    let s = splits(cfg)?;
    let ckpt = pretrain_backbone(&s.train.windows, &cfg.encoder, &cfg.train_config())?;
    save_checkpoint(&ckpt, &dir.join(BACKBONE))?;
    let mut losses = String::new();
    for m in &ckpt.metrics {
        losses.push_str(&serde_json::to_string(m).expect("metric serializes"));
        losses.push('\n');
    }
    write(&dir.join("pretrain_losses.jsonl"), &losses)?;
    if let Some(last) = ckpt.losses("pretrain").last() {
        println!("pretrained {} epochs, final loss {last:.4}", cfg.train.pretrain_epochs);
    }
    Ok(ckpt)
}

/// The stored backbone, or a freshly pretrained one when none exists yet.
fn backbone(cfg: &RunConfig) -> Result<ModelCheckpoint> {
    let path = out_dir(cfg)?.join(BACKBONE);
    if path.exists() {
        load_checkpoint(&path)
    } else {
        cmd_pretrain(cfg)
    }
}

fn cmd_al_train(cfg: &RunConfig, strategy: Strategy) -> Result<()> {
    let ckpt = backbone(cfg)?;
    let dir = out_dir(cfg)?;
    let run = al_training_loop(&ckpt, &splits(cfg)?, &cfg.al_config(), &cfg.train_config(), strategy)?;
    save_checkpoint(&run.checkpoint, &dir.join(format!("al-{strategy}.ckpt")))?;
    write(&dir.join(format!("curve-{strategy}.jsonl")), &curve_to_jsonl(&run.curve))?;
    let rounds: String = run.rounds.iter().map(|r| r.to_json_line() + "\n").collect();
    write(&dir.join(format!("rounds-{strategy}.jsonl")), &rounds)?;
    let timing: String = run.wall_seconds.iter().map(|t| format!("{t:.3}\n")).collect();
    write(&dir.join(format!("curve-{strategy}.timing")), &timing)?;
    for p in &run.curve {
        println!(
            "round {} labels {:.1}% oracle {} test {:.2}%",
            p.round,
            100.0 * p.label_fraction,
            p.oracle_count,
            100.0 * p.test_accuracy
        );
    }
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, tasks: &[TaskSpec], fractions: &[f64]) -> Result<()> {
    let ckpt = backbone(cfg)?;
    let dir = out_dir(cfg)?;
    let s = splits(cfg)?;
    let tcfg = cfg.train_config();
    for task in tasks {
        let train = build_task(&s.train, task)?;
        let test = build_task(&s.test, task)?;
        for &f in fractions {
            let tuned = finetune_for_task(&ckpt, &train, f, &tcfg)?;
            save_checkpoint(&tuned, &dir.join(format!("finetune-{}-{f}.ckpt", task.name)))?;
            let mut result = evaluate(&tuned.model, &test, &task.name, f, cfg.seed)?;
            result.condition = cfg.condition.clone();
            append_result(&dir.join(RESULTS), &result)?;
            println!("{} @ {:.0}%: {:.2}%", task.name, 100.0 * f, 100.0 * result.accuracy);
        }
    }
    Ok(())
}

fn cmd_report(cfg: &RunConfig, format: ReportFormat) -> Result<()> {
    let dir = out_dir(cfg)?;
    let results = load_results(&dir.join(RESULTS))?;
    if results.is_empty() {
        return Err(Error::InsufficientData("no stored results; run finetune or eval first".into()));
    }
    let doc = emit_report(&results, format)?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let ext = match format {
        ReportFormat::Csv => "csv",
        ReportFormat::Markdown => "md",
    };
    write(&dir.join(format!("report-all-{stamp}.{ext}")), &doc)?;
    print!("{doc}");
    Ok(())
}
