use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use vitprune::experiment::{cell_name, Experiment, ExperimentConfig, BASELINE};
use vitprune::importance::Criterion;
use vitprune::Error;

#[derive(Parser)]
#[command(name = "vitprune", version, about = "Structural pruning and domain-generalisation experiments for small ViTs")]
struct Cli {
    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted override, e.g. `--set train.max_epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset and splits.
    GenData {
        /// Also write every image under OUT/data/DOMAIN/CLASS/.
        #[arg(long)]
        export: bool,
    },
    /// Train the baseline model.
    Train,
    /// Prune the baseline for one criterion and ratio.
    Prune {
        #[arg(long)]
        criterion: Criterion,
        #[arg(long)]
        ratio: f64,
    },
    /// Fine-tune a pruned model.
    Finetune {
        #[arg(long)]
        criterion: Criterion,
        #[arg(long)]
        ratio: f64,
    },
    /// Evaluate a checkpoint on every split.
    Eval {
        /// Checkpoint name under OUT/checkpoints, e.g. `hessian_r50_ft`.
        #[arg(long, default_value = BASELINE)]
        model: String,
    },
    /// Attention-distance table and heatmaps for a checkpoint.
    AnalyzeAttn {
        #[arg(long, default_value = BASELINE)]
        model: String,
    },
    /// Merge every report into reports/summary.{json,csv}.
    Report,
    /// Baseline plus the full criteria x ratios grid.
    Sweep,
    /// Print the resolved config and exit.
    ShowConfig,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train => "train",
            Command::Prune { .. } => "prune",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::AnalyzeAttn { .. } => "analyze-attn",
            Command::Report => "report",
            Command::Sweep => "sweep",
            Command::ShowConfig => "show-config",
        }
    }
}

fn resolve(cli: &Cli) -> vitprune::Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.1}%", v * 100.0)).unwrap_or_else(|| "-".into())
}

fn run(cli: &Cli, exp: &Experiment) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData { export } => {
            let s = exp.gen_data(*export)?;
            println!(
                "{} samples, {} classes, {} domains; train/valid/test = {}/{}/{}",
                s.samples,
                s.classes.len(),
                s.domains.len(),
                s.train,
                s.valid,
                s.test
            );
        }
        Command::Train => {
            let r = exp.train_baseline()?;
            println!(
                "baseline: valid top-1 {}, test top-1 {}, gap {}",
                pct(r.valid.as_ref().map(|m| m.top1)),
                pct(r.test.as_ref().map(|m| m.top1)),
                pct(r.gap())
            );
        }
        Command::Prune { criterion, ratio } => {
            let r = exp.prune(*criterion, *ratio)?;
            println!(
                "{}: removed {:.1}% of prunable params, {} -> {} params, {} -> {} heads, speedup {:.2}x (MACs)",
                cell_name(*criterion, *ratio),
                r.removed_fraction * 100.0,
                r.params_before,
                r.params_after,
                r.heads_before,
                r.heads_after,
                r.theoretical_speedup
            );
        }
        Command::Finetune { criterion, ratio } => {
            let r = exp.finetune(*criterion, *ratio)?;
            println!(
                "{}: test top-1 {}, delta {}",
                r.model,
                pct(r.test.as_ref().map(|m| m.top1)),
                pct(r.delta_acc())
            );
        }
        Command::Eval { model } => {
            let r = exp.evaluate(model)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::AnalyzeAttn { model } => {
            let t = exp.analyze_attention(model)?;
            print!("{}", t.to_csv());
        }
        Command::Report => {
            exp.report()?;
            print!("{}", std::fs::read_to_string(exp.layout.report("summary.csv"))?);
        }
        Command::Sweep => {
            let reports = exp.sweep()?;
            println!("{} pruned variants", reports.len());
            print!("{}", std::fs::read_to_string(exp.layout.report("summary.csv"))?);
        }
        Command::ShowConfig => println!("{}", exp.config.to_json()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let exp = match resolve(&cli).and_then(Experiment::new) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let stage = cli.command.stage();
    match run(&cli, &exp).with_context(|| format!("stage `{stage}` failed")) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invalid = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::InvalidExperiment(_))));
            ExitCode::from(if invalid { 1 } else { 2 })
        }
    }
}
