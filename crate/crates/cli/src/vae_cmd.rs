use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use asvlab::dataset::{ScanDataset, Split};
use asvlab::neural::PadMode;
use asvlab::vae::{self, export_latents, latent_diagnostics, Arch, ElboLoss, VaeModel, VaeTrainConfig};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::layered;
use crate::{out_dir, write_text, Common, RunRecord};

#[derive(Debug, Clone, Args)]
pub struct TrainVaeArgs {
    /// Encoder/decoder architecture: shallow or deep.
    #[arg(long)]
    pub arch: Option<Arch>,
    /// KL weight(s); one model per value.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub beta: Option<Vec<f64>>,
    /// Training seeds; one model per seed (default: --seed).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seeds: Option<Vec<u64>>,
    /// Dataset produced by gen-data.
    #[arg(long, value_name = "BIN")]
    pub data: Option<PathBuf>,
    /// Latent dimension (default 12).
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Training epochs (default 25).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Convolution padding: circular or zeros.
    #[arg(long, value_parser = parse_pad)]
    pub padding: Option<PadMode>,
}

fn parse_pad(s: &str) -> Result<PadMode, String> {
    match s {
        "circular" => Ok(PadMode::Circular),
        "zeros" => Ok(PadMode::Zeros),
        _ => Err(format!("unknown padding '{s}' (expected circular or zeros)")),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainVaeConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub betas: Vec<f64>,
    /// Empty means `[seed]`.
    pub seeds: Vec<u64>,
    pub train: VaeTrainConfig,
}

pub fn checkpoint_name(arch: Arch, beta: f64, seed: u64) -> String {
    format!("vae_{}_beta{beta}_seed{seed}.ckpt", arch.as_str())
}

fn loss_fields(l: &ElboLoss) -> String {
    format!("{},{},{}", l.bce, l.kl, l.total)
}

pub fn train_vae(common: &Common, args: &TrainVaeArgs) -> Result<()> {
    let defaults = TrainVaeConfig {
        seed: 0,
        data: None,
        betas: vec![1.0],
        seeds: Vec::new(),
        train: VaeTrainConfig::default(),
    };
    let mut cfg = layered(&defaults, common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if args.data.is_some() {
        cfg.data.clone_from(&args.data);
    }
    if let Some(b) = &args.beta {
        cfg.betas.clone_from(b);
    }
    if let Some(s) = &args.seeds {
        cfg.seeds.clone_from(s);
    }
    if let Some(a) = args.arch {
        cfg.train.arch = a;
    }
    if let Some(l) = args.latent_dim {
        cfg.train.latent_dim = l;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(p) = args.padding {
        cfg.train.padding_mode = p;
    }
    if cfg.seeds.is_empty() {
        cfg.seeds = vec![cfg.seed];
    }
    if cfg.betas.is_empty() || cfg.betas.iter().any(|b| !(*b >= 0.0)) {
        bail!("betas must be a non-empty list of non-negative numbers");
    }
    cfg.train.validate()?;
    let Some(data_path) = cfg.data.clone() else {
        bail!("train-vae needs --data <dataset.bin>");
    };

    let out = out_dir(common, "train-vae");
    let mut rec = RunRecord::start("train-vae", out.clone(), cfg.seed, &cfg)?;
    rec.inputs.push(data_path.clone());
    let data = ScanDataset::load(&data_path)?;
    let test_idx = data.indices(Split::Test);
    let test_rows = data.gather(&test_idx);

    let jobs: Vec<VaeTrainConfig> = cfg
        .betas
        .iter()
        .flat_map(|&beta| cfg.seeds.iter().map(move |&seed| (beta, seed)))
        .map(|(beta, seed)| VaeTrainConfig {
            beta,
            seed,
            ..cfg.train
        })
        .collect();
    log::info!("train-vae: {} model(s) on {} rows", jobs.len(), data.rows());
    let results = jobs
        .par_iter()
        .map(|job| -> Result<_> {
            let (model, report) = vae::train_vae(&data, job)?;
            let test = model.evaluate(&test_rows, test_idx.len())?;
            let diag = latent_diagnostics(&model, &test_rows, test_idx.len())?;
            log::info!(
                "train-vae: beta={} seed={} best_epoch={} test_total={:.4} test_kl={:.4} active={}",
                job.beta,
                job.seed,
                report.best_epoch,
                test.total,
                test.kl,
                diag.active_dims
            );
            Ok((model, report, test, diag))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut runs =
        String::from("arch,latent_dim,beta,seed,best_epoch,best_val,test_bce,test_kl,test_total,active_dims\n");
    for (job, (model, report, test, diag)) in jobs.iter().zip(&results) {
        let name = checkpoint_name(job.arch, job.beta, job.seed);
        model.save(
            &out.join(&name),
            serde_json::json!({"config": job, "best_epoch": report.best_epoch, "best_val": report.best_val}),
        )?;
        let mut curve = String::from("epoch,train_bce,train_kl,train_total,val_bce,val_kl,val_total\n");
        for e in &report.curve {
            let _ = writeln!(curve, "{},{},{}", e.epoch, loss_fields(&e.train), loss_fields(&e.val));
        }
        write_text(&out.join(name.replace(".ckpt", "_curve.csv")), &curve)?;
        let _ = writeln!(
            runs,
            "{},{},{},{},{},{},{},{}",
            job.arch.as_str(),
            job.latent_dim,
            job.beta,
            job.seed,
            report.best_epoch,
            report.best_val,
            loss_fields(test),
            diag.active_dims
        );
    }
    write_text(&out.join("runs.csv"), &runs)?;

    let mut summary =
        String::from("arch,beta,n,test_total_mean,test_total_std,ci_lo,ci_hi,test_kl_mean,active_dims_mean\n");
    for &beta in &cfg.betas {
        let group: Vec<_> = jobs
            .iter()
            .zip(&results)
            .filter(|(j, _)| j.beta == beta)
            .map(|(_, r)| r)
            .collect();
        let totals: Vec<f64> = group.iter().map(|r| r.2.total).collect();
        let n = totals.len() as f64;
        let kl = group.iter().map(|r| r.2.kl).sum::<f64>() / n;
        let active = group.iter().map(|r| r.3.active_dims as f64).sum::<f64>() / n;
        let stats = match vae::evaluate_vae(&totals) {
            Ok(s) => format!("{},{},{},{}", s.mean, s.std, s.ci_lo, s.ci_hi),
            Err(_) => format!("{},,,", totals[0]),
        };
        let _ = writeln!(
            summary,
            "{},{beta},{},{stats},{kl},{active}",
            cfg.train.arch.as_str(),
            totals.len()
        );
    }
    write_text(&out.join("summary.csv"), &summary)?;
    rec.finish()?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct EvalVaeArgs {
    /// One or more VAE checkpoints.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub ckpt: Option<Vec<PathBuf>>,
    /// Dataset produced by gen-data; the test split is evaluated.
    #[arg(long, value_name = "BIN")]
    pub data: Option<PathBuf>,
    /// Report CSV path (default <out>/report.csv).
    #[arg(long, value_name = "CSV")]
    pub report: Option<PathBuf>,
    /// Also export test-split latents per checkpoint.
    #[arg(long)]
    pub latents: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalVaeConfig {
    pub seed: u64,
    pub ckpts: Vec<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: Split,
    pub export_latents: bool,
    pub report: Option<PathBuf>,
}

pub fn eval_vae(common: &Common, args: &EvalVaeArgs) -> Result<()> {
    let defaults = EvalVaeConfig {
        seed: 0,
        ckpts: Vec::new(),
        data: None,
        split: Split::Test,
        export_latents: false,
        report: None,
    };
    let mut cfg = layered(&defaults, common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(c) = &args.ckpt {
        cfg.ckpts.clone_from(c);
    }
    if args.data.is_some() {
        cfg.data.clone_from(&args.data);
    }
    if args.report.is_some() {
        cfg.report.clone_from(&args.report);
    }
    cfg.export_latents |= args.latents;
    if cfg.ckpts.is_empty() {
        bail!("eval-vae needs --ckpt <file>[,<file>...]");
    }
    let Some(data_path) = cfg.data.clone() else {
        bail!("eval-vae needs --data <dataset.bin>");
    };

    let out = out_dir(common, "eval-vae");
    let mut rec = RunRecord::start("eval-vae", out.clone(), cfg.seed, &cfg)?;
    rec.inputs.push(data_path.clone());
    rec.inputs.extend(cfg.ckpts.iter().cloned());
    let data = ScanDataset::load(&data_path)?;
    let idx = data.indices(cfg.split);
    let rows = data.gather(&idx);

    let mut report = String::from("ckpt,arch,latent_dim,beta,bce,kl,total,active_dims,per_dim_kl\n");
    let mut totals = Vec::new();
    for (i, path) in cfg.ckpts.iter().enumerate() {
        let model = VaeModel::load(path)?;
        let loss = model.evaluate(&rows, idx.len())?;
        let diag = latent_diagnostics(&model, &rows, idx.len())?;
        let per_dim: Vec<String> = diag.per_dim_kl.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(
            report,
            "{},{},{},{},{},{},{}",
            file_label(path),
            model.spec.arch.as_str(),
            model.spec.latent_dim,
            model.beta,
            loss_fields(&loss),
            diag.active_dims,
            per_dim.join(";")
        );
        totals.push(loss.total);
        if cfg.export_latents {
            export_latents(&model, &rows, idx.len(), &out.join(format!("latents_{i:03}.csv")))?;
        }
    }
    let report_path = cfg.report.clone().unwrap_or_else(|| out.join("report.csv"));
    write_text(&report_path, &report)?;
    rec.extra_outputs.push(report_path);
    if let Ok(s) = vae::evaluate_vae(&totals) {
        let text = format!(
            "n,mean,std,ci_lo,ci_hi\n{},{},{},{},{}\n",
            s.n, s.mean, s.std, s.ci_lo, s.ci_hi
        );
        write_text(&out.join("summary.csv"), &text)?;
    }
    rec.finish()?;
    Ok(())
}

fn file_label(p: &Path) -> String {
    p.file_name()
        .map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned())
}
