//! `asvlab` command-line pipeline: dataset generation, VAE training and
//! evaluation, PPO training and evaluation, and CSV export.
//!
//! Every subcommand resolves its configuration (defaults, `--config` file,
//! then flags), writes it to `<out>/config.json`, and finishes with
//! `<out>/manifest.json` listing the config digest, seed, and the SHA-256 of
//! every input and output file. Running the same subcommand with
//! `--config <out>/config.json` reproduces the outputs byte for byte.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use asvlab::dynamics::ShipModel;
use asvlab::metrics::smooth;
use clap::{Args, Parser, Subcommand};

pub mod config;
pub mod manifest;

mod agent_cmd;
mod data_cmd;
mod vae_cmd;

use manifest::{collect_outputs, digest, write_config, write_manifest, Manifest};

pub const THREADS_ENV: &str = "ASVLAB_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "asvlab",
    version,
    about = "Vessel collision-avoidance lab: scan VAE pretraining and PPO training"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON document overriding the subcommand defaults (a previous run's config.json works).
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the range-scan dataset.
    GenData(data_cmd::GenDataArgs),
    /// Train VAEs for every (beta, seed) pair.
    TrainVae(vae_cmd::TrainVaeArgs),
    /// Test-split losses and latent diagnostics of VAE checkpoints.
    EvalVae(vae_cmd::EvalVaeArgs),
    /// Train PPO agents.
    TrainAgent(agent_cmd::TrainAgentArgs),
    /// Evaluate a policy on fresh test scenarios.
    EvalAgent(agent_cmd::EvalAgentArgs),
    /// Convert datasets, latents and episode logs to CSV.
    Export(data_cmd::ExportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainVae(_) => "train-vae",
            Command::EvalVae(_) => "eval-vae",
            Command::TrainAgent(_) => "train-agent",
            Command::EvalAgent(_) => "eval-agent",
            Command::Export(_) => "export",
        }
    }
}

/// Parses `argv` and runs the subcommand. Returns the process exit code:
/// 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    init_threads();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn init_threads() {
    let Ok(v) = std::env::var(THREADS_ENV) else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            // Fails only when the pool already exists (repeated in-process runs).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        _ => log::warn!("ignoring {THREADS_ENV}={v:?}: expected a positive integer"),
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::GenData(a) => data_cmd::gen_data(c, a),
        Command::TrainVae(a) => vae_cmd::train_vae(c, a),
        Command::EvalVae(a) => vae_cmd::eval_vae(c, a),
        Command::TrainAgent(a) => agent_cmd::train_agent(c, a),
        Command::EvalAgent(a) => agent_cmd::eval_agent(c, a),
        Command::Export(a) => data_cmd::export(c, a),
    }
}

/// Output directory of a run: `--out`, else `runs/<subcommand>`.
pub(crate) fn out_dir(common: &Common, subcommand: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| Path::new("runs").join(subcommand))
}

/// Resolved-config bookkeeping shared by all subcommands.
pub(crate) struct RunRecord {
    pub subcommand: &'static str,
    pub out: PathBuf,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<PathBuf>,
    pub extra_outputs: Vec<PathBuf>,
}

impl RunRecord {
    pub fn start<T: serde::Serialize>(subcommand: &'static str, out: PathBuf, seed: u64, cfg: &T) -> Result<Self> {
        let config_sha256 = write_config(&out, cfg)?;
        log::info!(
            "{subcommand}: seed={seed} out={} config_sha256={config_sha256}",
            out.display()
        );
        Ok(Self {
            subcommand,
            out,
            seed,
            config_sha256,
            inputs: Vec::new(),
            extra_outputs: Vec::new(),
        })
    }

    pub fn finish(self) -> Result<Manifest> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| digest(p, p.display().to_string()))
            .collect::<Result<Vec<_>>>()?;
        let m = Manifest {
            tool: "asvlab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: self.subcommand.into(),
            seed: self.seed,
            config: manifest::CONFIG_FILE.into(),
            config_sha256: self.config_sha256,
            inputs,
            outputs: collect_outputs(&self.out, &self.extra_outputs)?,
        };
        write_manifest(&self.out, &m)?;
        log::info!(
            "{}: wrote {} output files to {}",
            m.subcommand,
            m.outputs.len(),
            self.out.display()
        );
        Ok(m)
    }
}

pub(crate) fn load_ship_model(path: Option<&Path>, record: &mut RunRecord) -> Result<ShipModel> {
    match path {
        Some(p) => {
            record.inputs.push(p.to_path_buf());
            ShipModel::load(p).with_context(|| format!("loading ship model {}", p.display()))
        }
        None => Ok(ShipModel::cybership2_like()),
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Per-episode series with Gaussian-smoothed mean and rolling std columns:
/// `episode,<name>,<name>_smooth,<name>_std,...`.
pub fn curves_csv(series: &[(&str, Vec<f64>)], window: usize) -> Result<String> {
    use std::fmt::Write as _;
    let n = series.first().map_or(0, |s| s.1.len());
    let mut header = vec!["episode".to_string()];
    for (name, _) in series {
        header.extend([name.to_string(), format!("{name}_smooth"), format!("{name}_std")]);
    }
    let mut out = header.join(",");
    out.push('\n');
    if n == 0 {
        return Ok(out);
    }
    let smoothed = series
        .iter()
        .map(|(_, v)| smooth(v, window))
        .collect::<asvlab::Result<Vec<_>>>()?;
    for i in 0..n {
        let _ = write!(out, "{i}");
        for s in &smoothed {
            let _ = write!(out, ",{},{},{}", s.raw[i], s.smoothed[i], s.rolling_std[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_have_three_columns_per_series() {
        let csv = curves_csv(&[("a", vec![1.0, 2.0, 3.0]), ("b", vec![0.0; 3])], 100).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "episode,a,a_smooth,a_std,b,b_smooth,b_std");
        assert_eq!(lines.len(), 4);
        assert_eq!(curves_csv(&[("a", vec![])], 100).unwrap().lines().count(), 1);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["asvlab", "gen-data", "--no-such-flag"]), 2);
        assert_eq!(run(["asvlab", "frobnicate"]), 2);
        assert_eq!(run(["asvlab"]), 2);
        assert_eq!(run(["asvlab", "--help"]), 0);
    }
}
