use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use forge::cli::{self, CampaignConfig, CliError};

#[derive(Parser)]
#[command(name = "forge", version, about = "Impedance controller synthesis, simulation and self-sensing")]
struct Args {
    /// Override a config leaf, e.g. `--set synthesis.lambda=0.5` (repeatable).
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the gridded LMI problem and write the gain.
    Synth { config: PathBuf },
    /// Simulate the closed loop with a stored gain.
    Sim {
        config: PathBuf,
        #[arg(long)]
        result: PathBuf,
    },
    /// Run the self-sensing estimator (and paired closed-loop runs if enabled).
    Sense {
        config: PathBuf,
        #[arg(long)]
        result: Option<PathBuf>,
    },
    /// Re-check the original bilinear conditions for a stored gain.
    Verify {
        config: PathBuf,
        #[arg(long)]
        result: PathBuf,
    },
    /// synth, verify, sim and sense for one or more campaigns.
    All {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
}

fn run(args: Args) -> Result<(), CliError> {
    let load = |p: &PathBuf| CampaignConfig::load(p, &args.overrides);
    match &args.cmd {
        Cmd::Synth { config } => {
            let cfg = load(config)?;
            let (res, _) = cli::cmd_synth(&cfg)?;
            println!("{}: gamma = {:e}, K = {:?} -> {}", cfg.name, res.gamma, res.k, cfg.out_dir().display());
        }
        Cmd::Sim { config, result } => {
            let cfg = load(config)?;
            cli::cmd_sim(&cfg, &cli::load_result(result)?)?;
            println!("{}: simulation written to {}", cfg.name, cfg.out_dir().display());
        }
        Cmd::Sense { config, result } => {
            let cfg = load(config)?;
            let res = result.as_deref().map(cli::load_result).transpose()?;
            cli::cmd_sense(&cfg, res.as_ref())?;
            println!("{}: self-sensing written to {}", cfg.name, cfg.out_dir().display());
        }
        Cmd::Verify { config, result } => {
            let cfg = load(config)?;
            cli::cmd_verify(&cfg, &cli::load_result(result)?)?;
            println!("{}: BMI check passed", cfg.name);
        }
        Cmd::All { configs } => {
            let cfgs = configs.iter().map(load).collect::<Result<Vec<_>, _>>()?;
            let mut worst: Option<CliError> = None;
            for (cfg, out) in cfgs.iter().zip(cli::run_campaigns(&cfgs)) {
                match out {
                    Ok(arts) => println!("{}: {} artifacts in {}", cfg.name, arts.len(), cfg.out_dir().display()),
                    Err(e) => {
                        eprintln!("{}: {e}", cfg.name);
                        if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                            worst = Some(e);
                        }
                    }
                }
            }
            if let Some(e) = worst {
                return Err(e);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { cli::EXIT_INPUT as u8 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
