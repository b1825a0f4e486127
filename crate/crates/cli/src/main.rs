use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use creu::backbone::BackboneKind;
use creu::data_pipeline::export_split;
use creu::trainer::{self, DatasetKind, ExperimentConfig, Variant};

#[derive(Parser)]
#[command(name = "creu", version, about = "Cold-start CTR experiments with warm-model ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one variant through the cold and warm phases.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        variant: Option<Variant>,
        /// Also write model checkpoints under OUT/checkpoints.
        #[arg(long)]
        checkpoints: bool,
    },
    /// Run all four variants on the same split and seed.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write the cold-start split as CSV files plus a manifest.
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k_shot: Option<usize>,
        #[arg(long)]
        old_fraction: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CommonArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    backbone: Option<BackboneKind>,
    #[arg(long)]
    n_components: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    sinkhorn_iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda_eu: Option<f64>,
    #[arg(long)]
    old_fraction: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    warm_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    eu_repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn base_config(data: &DataArgs) -> anyhow::Result<ExperimentConfig> {
    let mut c = match &data.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|_| creu::Error::MissingFile(path.clone()))?;
            serde_json::from_str(&text)
                .map_err(creu::Error::from)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(d) = data.dataset {
        c.dataset = d;
    }
    if let Some(d) = &data.data_dir {
        c.data_dir = Some(d.clone());
    }
    Ok(c)
}

macro_rules! apply {
    ($cfg:ident, $args:ident, $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

fn experiment_config(args: &CommonArgs) -> anyhow::Result<ExperimentConfig> {
    let mut c = base_config(&args.data)?;
    apply!(
        c, args, backbone, n_components, epsilon, sinkhorn_iters, lr, embed_dim, k_shot, alpha, lambda_eu,
        old_fraction, batch_size, pretrain_epochs, warm_epochs, finetune_epochs, eu_repeats, seed, out
    );
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            common,
            variant,
            checkpoints,
        } => {
            let mut config = experiment_config(&common)?;
            if let Some(v) = variant {
                config.variant = v;
            }
            let artifacts = trainer::run_experiment(&config)?;
            trainer::emit_report(&artifacts.report, &config.out)?;
            if checkpoints {
                artifacts.save_checkpoints(&config.out.join("checkpoints"))?;
            }
            for p in &artifacts.report.phases {
                println!("{:<7} acc {:>7.3}  auc {:>7.3}  n={}", p.phase.name(), p.acc, p.auc, p.samples);
            }
            if let (Some(a), Some(b)) = (artifacts.report.eu_trace.first(), artifacts.report.eu_trace.last()) {
                println!("eu      first {a:.6}  last {b:.6}");
            }
            println!("wrote {}", config.out.display());
        }
        Command::Ablate { common } => {
            let config = experiment_config(&common)?;
            let report = trainer::ablation_suite(&config)?;
            trainer::emit_ablation(&report, &config.out)?;
            for run in &report.runs {
                let cold = run.phase(trainer::Phase::Cold);
                let warm_c = run.phase(trainer::Phase::WarmC);
                println!(
                    "{:<15} cold auc {:>7.3}  warm_c auc {:>7.3}  final eu {}",
                    run.config.variant.name(),
                    cold.auc,
                    warm_c.auc,
                    run.eu_trace.last().map_or("-".to_string(), |v| format!("{v:.6}"))
                );
            }
            println!("wrote {}", config.out.display());
        }
        Command::Split {
            data,
            k_shot,
            old_fraction,
            out,
        } => {
            let mut config = base_config(&data)?;
            if let Some(k) = k_shot {
                config.k_shot = k;
            }
            if let Some(f) = old_fraction {
                config.old_fraction = f;
            }
            if let Some(o) = out {
                config.out = o;
            }
            config.validate()?;
            let prepared = trainer::prepare(&config)?;
            let manifest = export_split(&prepared.split, &prepared.schema, &config.out)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<creu::Error>() {
                Some(err) if err.is_numerical() => ExitCode::from(3),
                Some(creu::Error::Io { .. }) => ExitCode::from(1),
                Some(_) => ExitCode::from(2),
                None => ExitCode::from(1),
            }
        }
    }
}
