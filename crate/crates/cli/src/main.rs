//! `avmc train | eval | sweep | compare`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime fault.

use std::path::PathBuf;
use std::process::ExitCode;

use adaptive_vmc::env::VmcConfiguration;
use adaptive_vmc::harness::{self, ExperimentConfig, LabelerKind, Overrides};
use adaptive_vmc::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "avmc", version, about = "Adaptive virtual model control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy per seed.
    Train(Common),
    /// Evaluate a checkpoint, or the config's fixed-gain baseline.
    Eval(WithCheckpoint),
    /// Evaluate over a grid of forced coordination weights.
    Sweep(WithCheckpoint),
    /// Train and evaluate several VMC configurations under the same seeds.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Run a single master seed instead of the configured list.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides `paths.out_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Disable semantic reward shaping.
    #[arg(long)]
    no_llm: bool,
    /// Disable the Lyapunov critic and descent penalty.
    #[arg(long)]
    no_lyapunov: bool,
    #[arg(long, value_enum)]
    labeler: Option<LabelerArg>,
    #[arg(long = "vmc-config", value_enum)]
    vmc_config: Option<VmcArg>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Policy checkpoint; without it the `[baseline]` gains are used.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelerArg {
    Rules,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum VmcArg {
    #[value(name = "E")]
    E,
    #[value(name = "6-E")]
    SixE,
    #[value(name = "4-6-E")]
    FourSixE,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::load(&self.config).map_err(|e| match e {
            Error::Io { .. } => Error::config("--config", e.to_string()),
            other => other,
        })?;
        let o = Overrides {
            seed: self.seed,
            out_dir: self.out.clone(),
            no_llm: self.no_llm,
            no_lyapunov: self.no_lyapunov,
            labeler: self.labeler.map(|l| match l {
                LabelerArg::Rules => LabelerKind::Rules,
                LabelerArg::Remote => LabelerKind::Remote,
            }),
            vmc_configuration: self.vmc_config.map(|v| match v {
                VmcArg::E => VmcConfiguration::E,
                VmcArg::SixE => VmcConfiguration::SixE,
                VmcArg::FourSixE => VmcConfiguration::FourSixE,
            }),
        };
        let cfg = o.apply(cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load()?;
            for r in harness::cmd_train(&cfg)? {
                let last = r.metrics.last().ok_or(Error::Empty("training produced no iterations"))?;
                println!(
                    "seed {}: {} iterations, final error {:.4} m, success {:.2}",
                    r.seed,
                    r.metrics.len(),
                    last.mean_final_error,
                    last.success_rate
                );
            }
        }
        Command::Eval(c) => {
            let cfg = c.common.load()?;
            let r = harness::cmd_eval(&cfg, c.checkpoint.as_deref())?;
            println!("seed  final_error_m      reach_time_s     peak_f_rep_n     mean_f_rep_n     success");
            let rows = r.per_seed.iter().map(|(s, x)| (s.to_string(), x)).chain([("all".to_string(), &r.overall)]);
            for (s, x) in rows {
                println!(
                    "{s:<5} {:.4} ± {:.4}  {:.3} ± {:.3}  {:.2} ± {:.2}  {:.2} ± {:.2}  {:.2}",
                    x.final_error.mean,
                    x.final_error.std,
                    x.reach_time.mean,
                    x.reach_time.std,
                    x.peak_f_rep.mean,
                    x.peak_f_rep.std,
                    x.mean_f_rep.mean,
                    x.mean_f_rep.std,
                    x.success_rate
                );
            }
        }
        Command::Sweep(c) => {
            let cfg = c.common.load()?;
            let s = harness::cmd_sweep(&cfg, c.checkpoint.as_deref())?;
            let alphas: Vec<f64> = s.cells.iter().map(|c| c.alpha).collect();
            let f: Vec<f64> = s.cells.iter().map(|c| c.mean_peak_f_rep).collect();
            let e: Vec<f64> = s.cells.iter().map(|c| c.mean_final_error).collect();
            println!(
                "{} cells; spearman(peak F, alpha) {:.3}, spearman(final error, alpha) {:.3}",
                s.cells.len(),
                harness::spearman(&f, &alphas),
                harness::spearman(&e, &alphas)
            );
        }
        Command::Compare(c) => {
            let cfg = c.load()?;
            let r = harness::cmd_compare(&cfg)?;
            for s in &r.summary {
                println!(
                    "{:<6} seeds {}  final error {:.4} m  peak F {:.2} N  success {:.2}",
                    s.config, s.seeds, s.final_error_mean, s.peak_f_rep_mean, s.success_rate_mean
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
