use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use wsc_core::config::load_config;
use wsc_core::pipeline::{run_stages, Stage};

#[derive(Parser)]
#[command(name = "wsc", version, about = "Within-study comparison pipeline on synthetic school populations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic population.
    Generate(Common),
    /// Build the school-level matching design.
    Prepare(Common),
    /// Draw trial groups, select propensity models and match.
    Match(Common),
    /// Naive and matched bias estimates plus the recovery table.
    Estimate(Common),
    /// Placebo reference distributions and placebo tests.
    Nullsim(Common),
    /// Random-effects meta-analysis and bias-magnitude regressions.
    Meta(Common),
    /// Assemble report.json from existing stage outputs.
    Report(Common),
    /// Run every stage in order.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed (overrides scenario.rng_seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Placebo replicates (overrides nullsim.replicates).
    #[arg(long)]
    replicates: Option<usize>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, env = "WSC_THREADS", default_value_t = 0)]
    threads: usize,
    /// Fail an intervention when a CT school has no match.
    #[arg(long)]
    strict_matching: Option<bool>,
    /// Absolute caliper in logit units.
    #[arg(long)]
    caliper: Option<f64>,
    /// Extra `section.key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("scenario.rng_seed={s}"));
        }
        if let Some(r) = self.replicates {
            o.push(format!("nullsim.replicates={r}"));
        }
        if let Some(b) = self.strict_matching {
            o.push(format!("analysis.strict_matching={b}"));
        }
        if let Some(c) = self.caliper {
            o.push(format!("analysis.caliper={c:e}"));
        }
        o
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, stages): (&Common, Vec<Stage>) = match &cli.command {
        Command::Generate(c) => (c, vec![Stage::Generate]),
        Command::Prepare(c) => (c, vec![Stage::Prepare]),
        Command::Match(c) => (c, vec![Stage::Match]),
        Command::Estimate(c) => (c, vec![Stage::Estimate]),
        Command::Nullsim(c) => (c, vec![Stage::Nullsim]),
        Command::Meta(c) => (c, vec![Stage::Meta]),
        Command::Report(c) => (c, vec![Stage::Report]),
        Command::Pipeline(c) => (c, Stage::ALL.to_vec()),
    };
    if common.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global() {
            error!("thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let cfg = match load_config(&common.config, &common.overrides()) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(2);
        }
    };
    match run_stages(&cfg, &common.out, &stages) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
