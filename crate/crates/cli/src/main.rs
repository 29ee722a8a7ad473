use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ibtl_cli::commands::{self, FinetuneArgs, LooTarget};
use ibtl_cli::config::{IhvpChoice, Overrides, PipelineConfig};
use ibtl_cli::{CliError, CliResult};
use ibtl_core::influence::ReferenceMode;

#[derive(Parser)]
#[command(name = "ibtl", version, about = "Influence-based instance transfer learning")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    ihvp: Option<IhvpChoice>,
    #[arg(long, global = true)]
    damping: Option<f64>,
    /// `all` or `class:<k>`.
    #[arg(long, global = true, value_parser = parse_ref_mode)]
    ref_mode: Option<ReferenceMode>,
    #[arg(long, global = true)]
    max_drop_fraction: Option<f64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

fn parse_ref_mode(s: &str) -> Result<ReferenceMode, String> {
    s.parse().map_err(|e: ibtl_core::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Write the prepared datasets as CSV.
    Generate,
    /// Train the source-domain model.
    Pretrain,
    /// Score the target training set and drop harmful samples.
    Dropout {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune on the target domain.
    Finetune {
        #[arg(long, conflicts_with = "from_scratch")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        from_scratch: bool,
        /// Training CSV (e.g. the dropout output).
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value = "finetuned")]
        name: String,
    },
    /// Print test metrics of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV to evaluate on instead of the configured test set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Exact leave-one-out retraining (convex models only).
    Loo {
        #[arg(long = "id", required_unless_present = "all")]
        ids: Vec<u64>,
        #[arg(long, conflicts_with = "ids")]
        all: bool,
        /// Warm start for Newton.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pre-train, drop, and compare the three training arms.
    Pipeline,
}

fn load_config(g: &Global) -> CliResult<PipelineConfig> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config <path> is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    cfg.apply(&Overrides {
        seed: g.seed,
        ihvp: g.ihvp,
        damping: g.damping,
        ref_mode: g.ref_mode,
        max_drop_fraction: g.max_drop_fraction,
        out_dir: g.out_dir.clone(),
    });
    cfg.validate(path)?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Generate => {
            for p in commands::cmd_generate(&cfg)? {
                log::info!("wrote {}", p.display());
            }
        }
        Command::Pretrain => {
            let (ck, _) = commands::cmd_pretrain(&cfg)?;
            println!("{}", ck.digest());
        }
        Command::Dropout { checkpoint } => {
            let (_, report) = commands::cmd_dropout(&cfg, checkpoint.as_deref())?;
            println!(
                "{}",
                serde_json::to_string(&report.summary).expect("summary serializes")
            );
        }
        Command::Finetune {
            checkpoint,
            from_scratch,
            train,
            name,
        } => {
            let args = FinetuneArgs {
                checkpoint,
                from_scratch,
                train,
                name,
            };
            let (ck, _) = commands::cmd_finetune(&cfg, &args)?;
            println!("{}", ck.digest());
        }
        Command::Eval { checkpoint, data } => {
            let m = commands::cmd_eval(&cfg, &checkpoint, data.as_deref())?;
            print!("{}", m.to_json());
        }
        Command::Loo { ids, all, checkpoint } => {
            let target = if all { LooTarget::All } else { LooTarget::Ids(ids) };
            for r in commands::cmd_loo_oracle(&cfg, &target, checkpoint.as_deref())? {
                println!("{}", serde_json::to_string(&r).expect("record serializes"));
            }
        }
        Command::Pipeline => {
            let c = commands::cmd_pipeline(&cfg)?;
            print!("{}", c.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
