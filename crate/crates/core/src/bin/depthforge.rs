use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depthforge::run::{self, Overrides, RunConfig, GRADCHECK_TOLERANCE};
use depthforge::{Error, Result, Variant};

#[derive(Parser)]
#[command(name = "depthforge", version, about = "Depth-aware token adapters on frozen encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Adapter variant tag.
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the training and evaluation datasets.
    Generate(Common),
    /// Train and write checkpoints, a CSV log and a run manifest.
    Train(Common),
    /// Evaluate a checkpoint; without --checkpoint, evaluates the run's final
    /// checkpoint on every configured evaluation domain.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory to evaluate on.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck(Common),
    /// Train every variant of the sweep list and tabulate mIoU.
    Ablate(Common),
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let base = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = base.apply(&Overrides {
        output_dir: c.out.clone(),
        seed: c.seed,
        steps: c.steps,
        variant: c.variant,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(label: &str, r: &depthforge::synthbench::EvalReport) {
    println!(
        "{label}: mIoU {:.4}  pixel acc {:.4}  chance {:.4}  ({} samples)",
        r.miou, r.pixel_accuracy, r.chance_miou, r.samples
    );
}

fn eval_all(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let out = cfg.output_dir.join("eval");
    for spec in &cfg.eval_data {
        let report = run::cmd_eval(checkpoint, &cfg.dataset_dir(spec, false), &out)?;
        print_report(&spec.domain.name, &report);
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            for (dir, n) in run::cmd_generate(&resolve(&c)?)? {
                println!("{}: {n} samples", dir.display());
            }
        }
        Command::Train(c) => {
            let path = run::cmd_train(&resolve(&c)?)?;
            println!("checkpoint: {}", path.display());
        }
        Command::Eval { common, checkpoint, data } => match (checkpoint, data) {
            (Some(ckpt), Some(data)) => {
                let out = common.out.clone().unwrap_or_else(|| PathBuf::from("eval"));
                let report = run::cmd_eval(&ckpt, &data, &out)?;
                print_report(&data.display().to_string(), &report);
            }
            (ckpt, None) => {
                let cfg = resolve(&common)?;
                let ckpt = ckpt.unwrap_or_else(|| cfg.output_dir.join("checkpoints").join("final.ckpt"));
                eval_all(&cfg, &ckpt)?;
            }
            (None, Some(_)) => return Err(Error::Config("--data requires --checkpoint".into())),
        },
        Command::Gradcheck(c) => {
            let report = run::cmd_gradcheck(&resolve(&c)?)?;
            for (group, err) in report.by_group() {
                println!("{group:>10}  max rel error {err:.3e}");
            }
            println!("worst: {:.3e}", report.max_rel_error);
            if report.max_rel_error > GRADCHECK_TOLERANCE {
                return Err(Error::Numeric(format!(
                    "gradient check error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
                    report.max_rel_error
                )));
            }
        }
        Command::Ablate(c) => {
            let cfg = resolve(&c)?;
            let rows = run::cmd_ablate(&cfg)?;
            print!("{}", run::ablation_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(run::exit_code(&e) as u8)
        }
    }
}
