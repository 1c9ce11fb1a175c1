use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use osr_core::decision::SweepRule;
use osr_core::experiment::{run_experiment, run_stage, ExperimentConfig, Stage, SweepSettings};

/// Open-set recognition experiments on tabular data.
#[derive(Parser)]
#[command(name = "osr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset, or copy the configured CSV in.
    Synth(Common),
    /// Impute missing values and split the dataset.
    Impute(Common),
    /// Pretrain the encoder and train the GMVAE.
    TrainGmvae(Common),
    /// Train the ii-loss network.
    TrainIiloss(Common),
    /// Select τ* from the validation saturation curve.
    SelectThreshold(Common),
    /// Fit the outlier-score threshold at contamination ratio α.
    FitThreshold {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Score both pipelines over the novel test sets.
    Evaluate(Common),
    /// Re-threshold around a center value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `uncertainty` or `outlier_score`; replaces the configured sweeps.
        #[arg(long)]
        rule: Option<SweepRule>,
        #[arg(long)]
        center: Option<f64>,
        #[arg(long)]
        halfwidth: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Every stage in order.
    Run(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading config `{}`", common.config.display()))?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn apply_sweep_overrides(
    config: &mut ExperimentConfig,
    rule: Option<SweepRule>,
    center: Option<f64>,
    halfwidth: Option<f64>,
    step: Option<f64>,
) {
    if let Some(rule) = rule {
        let template = config
            .sweeps
            .iter()
            .find(|s| s.rule == rule)
            .cloned()
            .unwrap_or(SweepSettings {
                rule,
                center: None,
                halfwidth: 0.05,
                step: 0.01,
            });
        config.sweeps = vec![template];
    }
    for s in &mut config.sweeps {
        if center.is_some() {
            s.center = center;
        }
        if let Some(h) = halfwidth {
            s.halfwidth = h;
        }
        if let Some(st) = step {
            s.step = st;
        }
    }
}

fn execute(command: Command) -> Result<()> {
    let (stage, config, common) = match command {
        Command::Run(common) => {
            let config = load(&common)?;
            let report = run_experiment(&config, &common.out)?;
            for c in &report.curves {
                if let Some(last) = c.points.last() {
                    println!(
                        "{}: open-set macro-F1 with {} novel classes {:.4} (min {:.4}, max {:.4})",
                        c.name, last.novel_classes, last.f1_mean, last.f1_min, last.f1_max
                    );
                }
            }
            return Ok(());
        }
        Command::Synth(c) => (Stage::Synth, load(&c)?, c),
        Command::Impute(c) => (Stage::Impute, load(&c)?, c),
        Command::TrainGmvae(c) => (Stage::TrainGmvae, load(&c)?, c),
        Command::TrainIiloss(c) => (Stage::TrainIiloss, load(&c)?, c),
        Command::SelectThreshold(c) => (Stage::SelectThreshold, load(&c)?, c),
        Command::FitThreshold { common, alpha } => {
            let mut config = load(&common)?;
            if let Some(a) = alpha {
                config.contamination = a;
            }
            (Stage::FitThreshold, config, common)
        }
        Command::Evaluate(c) => (Stage::Evaluate, load(&c)?, c),
        Command::Sweep {
            common,
            rule,
            center,
            halfwidth,
            step,
        } => {
            let mut config = load(&common)?;
            apply_sweep_overrides(&mut config, rule, center, halfwidth, step);
            (Stage::Sweep, config, common)
        }
    };
    run_stage(stage, &config, &common.out)?;
    if stage == Stage::Sweep {
        let report: osr_core::eval::EvalReport =
            serde_json::from_str(&std::fs::read_to_string(common.out.join(osr_core::experiment::REPORT_JSON))?)?;
        for t in &report.sweeps {
            if t.clipped {
                eprintln!("note: {:?} sweep interval clipped to the valid range", t.rule);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
