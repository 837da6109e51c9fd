use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use asvlab::dataset::{build_dataset, CategoryCounts, DatasetConfig, ScanDataset, Split};
use asvlab::vae::{export_latents, VaeModel};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::layered;
use crate::{curves_csv, load_ship_model, out_dir, write_text, Common, RunRecord};

pub const DATASET_FILE: &str = "dataset.bin";

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Start from the 6000-row desk preset instead of the 60000-row default.
    #[arg(long)]
    pub desk: bool,
    /// Ship model JSON (defaults to the built-in model).
    #[arg(long, value_name = "JSON")]
    pub ship_model: Option<PathBuf>,
    /// Also write the scans as CSV.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub seed: u64,
    pub ship_model: Option<PathBuf>,
    pub export_csv: bool,
    pub dataset: DatasetConfig,
}

#[derive(Debug, Serialize)]
struct DatasetSummary {
    rows: usize,
    cols: usize,
    train: usize,
    val: usize,
    test: usize,
    counts: CategoryCounts,
    noise_std: Option<f64>,
}

pub fn gen_data(common: &Common, args: &GenDataArgs) -> Result<()> {
    let defaults = GenDataConfig {
        seed: 0,
        ship_model: None,
        export_csv: false,
        dataset: if args.desk {
            DatasetConfig::desk()
        } else {
            DatasetConfig::default()
        },
    };
    let mut cfg = layered(&defaults, common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if args.ship_model.is_some() {
        cfg.ship_model = args.ship_model.clone();
    }
    cfg.export_csv |= args.csv;
    cfg.dataset.seed = cfg.seed;
    cfg.dataset.validate()?;

    let out = out_dir(common, "gen-data");
    let mut rec = RunRecord::start("gen-data", out.clone(), cfg.seed, &cfg)?;
    let model = load_ship_model(cfg.ship_model.as_deref(), &mut rec)?;
    log::info!("gen-data: building {} rows", cfg.dataset.total_rows());
    let data = build_dataset(&cfg.dataset, &model)?;
    data.save(out.join(DATASET_FILE))?;
    if cfg.export_csv {
        data.export_csv(out.join("dataset.csv"))?;
    }
    let summary = DatasetSummary {
        rows: data.rows(),
        cols: data.cols(),
        train: data.indices(Split::Train).len(),
        val: data.indices(Split::Val).len(),
        test: data.indices(Split::Test).len(),
        counts: data.meta.counts,
        noise_std: data.meta.noise.map(|n| n.std),
    };
    log::info!(
        "gen-data: {} rows (train {}, val {}, test {})",
        summary.rows,
        summary.train,
        summary.val,
        summary.test
    );
    write_text(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    rec.finish()?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    /// Dataset file to convert to CSV.
    #[arg(long, value_name = "BIN")]
    pub dataset: Option<PathBuf>,
    /// VAE checkpoint whose test-split latents are exported (needs --data).
    #[arg(long, value_name = "CKPT")]
    pub vae: Option<PathBuf>,
    /// Dataset used with --vae.
    #[arg(long, value_name = "BIN")]
    pub data: Option<PathBuf>,
    /// Episode log (episodes.csv) to turn into smoothed curves.
    #[arg(long, value_name = "CSV")]
    pub episodes: Option<PathBuf>,
    /// Smoothing window in episodes.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub vae: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub episodes: Option<PathBuf>,
    pub window: usize,
}

pub fn export(common: &Common, args: &ExportArgs) -> Result<()> {
    let defaults = ExportConfig {
        seed: 0,
        dataset: None,
        vae: None,
        data: None,
        episodes: None,
        window: 100,
    };
    let mut cfg = layered(&defaults, common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    for (slot, flag) in [
        (&mut cfg.dataset, &args.dataset),
        (&mut cfg.vae, &args.vae),
        (&mut cfg.data, &args.data),
        (&mut cfg.episodes, &args.episodes),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(w) = args.window {
        cfg.window = w;
    }
    if cfg.dataset.is_none() && cfg.vae.is_none() && cfg.episodes.is_none() {
        bail!("export needs at least one of --dataset, --vae, --episodes");
    }
    if cfg.vae.is_some() && cfg.data.is_none() {
        bail!("--vae needs --data");
    }

    let out = out_dir(common, "export");
    let mut rec = RunRecord::start("export", out.clone(), cfg.seed, &cfg)?;
    if let Some(p) = &cfg.dataset {
        rec.inputs.push(p.clone());
        ScanDataset::load(p)?.export_csv(out.join("dataset.csv"))?;
    }
    if let (Some(ckpt), Some(data)) = (&cfg.vae, &cfg.data) {
        rec.inputs.extend([ckpt.clone(), data.clone()]);
        let vae = VaeModel::load(ckpt)?;
        let data = ScanDataset::load(data)?;
        let idx = data.indices(Split::Test);
        export_latents(&vae, &data.gather(&idx), idx.len(), &out.join("latents.csv"))?;
    }
    if let Some(p) = &cfg.episodes {
        rec.inputs.push(p.clone());
        let series = read_episode_series(p)?;
        let refs: Vec<(&str, Vec<f64>)> = series.iter().map(|(n, v)| (n.as_str(), v.clone())).collect();
        write_text(&out.join("curves.csv"), &curves_csv(&refs, cfg.window)?)?;
    }
    rec.finish()?;
    Ok(())
}

const CURVE_COLUMNS: [&str; 4] = ["progress", "mean_cte", "cumulative_reward", "collision"];

/// The plotted columns of an episodes.csv file.
pub(crate) fn read_episode_series(path: &std::path::Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().context("empty episode log")?.split(',').collect();
    let cols = CURVE_COLUMNS
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == c)
                .with_context(|| format!("{} lacks column '{c}'", path.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut series: Vec<(String, Vec<f64>)> = CURVE_COLUMNS.iter().map(|c| (c.to_string(), Vec::new())).collect();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        for (k, &c) in cols.iter().enumerate() {
            let v: f64 = fields.get(c).and_then(|f| f.parse().ok()).with_context(|| {
                format!(
                    "{} line {}: bad value in column {}",
                    path.display(),
                    lineno + 2,
                    header[c]
                )
            })?;
            series[k].1.push(v);
        }
    }
    Ok(series)
}
