//! Command-line front end. Parses arguments, builds the run configuration,
//! dispatches to a pipeline command and maps failures to exit codes.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::experiment;
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "dataselect", version, about = "Cluster-bandit data selection with factored influence scores")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Key-value config file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable); wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for --set output_dir=DIR.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Shorthand for --set workers=N.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// k-means over the embeddings; writes clusters.bin.
    Cluster(Common),
    /// Influence scores for an id list (or every candidate); writes influence.csv.
    Score(Common),
    /// Bandit selection up to the budget; writes selection.txt and ledger.jsonl.
    Select(Common),
    /// Kronecker identity, gradient and method-correlation oracles.
    OracleCheck(Common),
    /// Regret curves for UCB, top-k-clusters and random policies.
    SimulateBandit(Common),
    /// Composition, reward trajectories and a fine-tuning loss table.
    Report(Common),
    /// Writes a synthetic planted-structure corpus and a matching config.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Output directory for embeddings.bin, tokens.tsv, reference.tsv and run.cfg.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl Common {
    pub fn run_config(&self) -> CliResult<RunConfig> {
        let mut overrides = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(d) = &self.output_dir {
            overrides.push(("output_dir".into(), d.display().to_string()));
        }
        if let Some(w) = self.workers {
            overrides.push(("workers".into(), w.to_string()));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

pub fn run(cli: Cli) -> CliResult<String> {
    let (common, f): (&Common, fn(&RunConfig) -> CliResult<String>) = match &cli.command {
        Command::Cluster(c) => (c, pipeline::cmd_cluster),
        Command::Score(c) => (c, pipeline::cmd_score),
        Command::Select(c) => (c, pipeline::cmd_select),
        Command::OracleCheck(c) => (c, pipeline::cmd_oracle_check),
        Command::SimulateBandit(c) => (c, pipeline::cmd_simulate_bandit),
        Command::Report(c) => (c, pipeline::cmd_report),
        Command::Generate(g) => return experiment::write_synthetic(&g.dir, g.count, g.seed),
    };
    let cfg = common.run_config()?;
    pipeline::with_workers(cfg.workers, || f(&cfg))?
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
