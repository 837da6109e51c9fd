use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asvlab::agent::{
    self, agent_scenario, collision_quartiles, episodes_csv, evaluate_agent, final_mean_progress, run_episode,
    trajectory_csv, ActorCritic, AgentTrainConfig, EpisodeRecord, FeatureMode, PpoConfig, UpdateRecord,
};
use asvlab::dynamics::ShipModel;
use asvlab::env::{Env, EnvConfig};
use asvlab::rng::derive_seed;
use asvlab::vae::VaeModel;
use asvlab::world::{ScenarioConfig, ScenarioKind};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::layered;
use crate::{curves_csv, load_ship_model, out_dir, write_text, Common, RunRecord};

#[derive(Debug, Clone, Args)]
pub struct ObstacleArgs {
    /// Static obstacles per scenario.
    #[arg(long = "static", value_name = "N")]
    pub n_static: Option<usize>,
    /// Dynamic obstacles per scenario.
    #[arg(long = "dynamic", value_name = "N")]
    pub n_dynamic: Option<usize>,
    /// Shorthand for --static 0 --dynamic 0.
    #[arg(long)]
    pub obstacle_free: bool,
}

impl ObstacleArgs {
    fn apply(&self, s: &mut ScenarioConfig) {
        if self.obstacle_free {
            s.n_static = 0;
            s.n_dynamic = 0;
        }
        if let Some(n) = self.n_static {
            s.n_static = n;
        }
        if let Some(n) = self.n_dynamic {
            s.n_dynamic = n;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainAgentArgs {
    /// shallow_locked, shallow_unlocked, deep_locked, deep_unlocked or baseline.
    #[arg(long)]
    pub mode: Option<FeatureMode>,
    /// Pretrained VAE checkpoint supplying the encoder.
    #[arg(long, value_name = "CKPT")]
    pub encoder: Option<PathBuf>,
    /// Several VAE checkpoints (e.g. one per beta); one agent per checkpoint.
    #[arg(long, value_delimiter = ',', num_args = 1.., value_name = "CKPT")]
    pub beta_sweep: Option<Vec<PathBuf>>,
    /// Total environment steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub obstacles: ObstacleArgs,
    /// Evaluation episodes after training (0 skips evaluation).
    #[arg(long)]
    pub eval_episodes: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainAgentConfig {
    pub seed: u64,
    pub mode: FeatureMode,
    pub encoder: Option<PathBuf>,
    pub beta_sweep: Vec<PathBuf>,
    pub ship_model: Option<PathBuf>,
    pub smooth_window: usize,
    pub eval_episodes: usize,
    pub ppo: PpoConfig,
    pub env: EnvConfig,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    mode: FeatureMode,
    encoder: Option<String>,
    encoder_beta: Option<f64>,
    timesteps: usize,
    episodes: usize,
    final100_progress: f64,
    collision_rate_first_quartile: f64,
    collision_rate_last_quartile: f64,
    encoder_hash_start: String,
    encoder_hash_end: String,
}

pub fn train_agent(common: &Common, args: &TrainAgentArgs) -> Result<()> {
    let defaults = TrainAgentConfig {
        seed: 0,
        mode: FeatureMode::ShallowLocked,
        encoder: None,
        beta_sweep: Vec::new(),
        ship_model: None,
        smooth_window: 100,
        eval_episodes: 0,
        ppo: PpoConfig::default(),
        env: EnvConfig::default(),
    };
    let mut cfg = layered(&defaults, common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if args.encoder.is_some() {
        cfg.encoder.clone_from(&args.encoder);
    }
    if let Some(b) = &args.beta_sweep {
        cfg.beta_sweep.clone_from(b);
    }
    if let Some(s) = args.steps {
        cfg.ppo.total_timesteps = s;
    }
    if let Some(e) = args.eval_episodes {
        cfg.eval_episodes = e;
    }
    args.obstacles.apply(&mut cfg.env.scenario);
    cfg.ppo.validate()?;
    cfg.env.validate()?;
    if cfg.mode.needs_checkpoint() && cfg.encoder.is_none() && cfg.beta_sweep.is_empty() {
        bail!("mode {} needs --encoder <vae.ckpt> or --beta-sweep", cfg.mode.as_str());
    }
    if cfg.eval_episodes == 1 {
        bail!("--eval-episodes must be 0 or at least 2");
    }

    let out = out_dir(common, "train-agent");
    let mut rec = RunRecord::start("train-agent", out.clone(), cfg.seed, &cfg)?;
    let model = load_ship_model(cfg.ship_model.as_deref(), &mut rec)?;
    if cfg.beta_sweep.is_empty() {
        let enc = cfg.encoder.clone();
        if let Some(p) = &enc {
            rec.inputs.push(p.clone());
        }
        train_one(&cfg, enc.as_deref(), &model, &out)?;
    } else {
        let mut used = Vec::new();
        for p in &cfg.beta_sweep {
            rec.inputs.push(p.clone());
            let beta = VaeModel::load(p)?.beta;
            let mut name = format!("beta{beta}");
            if used.contains(&name) {
                name = format!("{name}_{}", used.len());
            }
            used.push(name.clone());
            train_one(&cfg, Some(p), &model, &out.join(name))?;
        }
    }
    rec.finish()?;
    Ok(())
}

fn updates_csv(updates: &[UpdateRecord]) -> String {
    let mut out = String::from(
        "update,timesteps,policy_loss,value_loss,entropy,clip_fraction,approx_kl,grad_norm,log_std0,log_std1,encoder_hash\n",
    );
    for u in updates {
        let s = &u.stats;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            u.update,
            u.timesteps,
            s.policy_loss,
            s.value_loss,
            s.entropy,
            s.clip_fraction,
            s.approx_kl,
            s.grad_norm,
            u.log_std[0],
            u.log_std[1],
            u.encoder_hash
        );
    }
    out
}

fn episode_curves(episodes: &[EpisodeRecord], window: usize) -> Result<String> {
    curves_csv(
        &[
            ("progress", episodes.iter().map(|e| e.progress).collect()),
            ("mean_cte", episodes.iter().map(|e| e.mean_cte).collect()),
            (
                "cumulative_reward",
                episodes.iter().map(|e| e.cumulative_reward).collect(),
            ),
            (
                "collision",
                episodes.iter().map(|e| f64::from(u8::from(e.collision))).collect(),
            ),
        ],
        window,
    )
}

fn train_one(cfg: &TrainAgentConfig, encoder: Option<&Path>, model: &ShipModel, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let vae = match encoder {
        Some(p) if cfg.mode.needs_checkpoint() => Some(VaeModel::load(p)?),
        Some(p) => {
            log::warn!("baseline mode ignores encoder {}", p.display());
            None
        }
        None => None,
    };
    let tcfg = AgentTrainConfig {
        mode: cfg.mode,
        ppo: cfg.ppo,
        env: cfg.env,
        seed: cfg.seed,
    };
    let n_updates = cfg.ppo.total_timesteps.div_ceil(cfg.ppo.n_steps);
    let every = (n_updates / 20).max(1);
    let outcome = agent::train_agent(&tcfg, vae.as_ref(), model, |u, eps| {
        if (u.update + 1) % every == 0 || u.update + 1 == n_updates {
            log::info!(
                "train-agent: update {}/{} timesteps={} episodes={} progress100={:.3} value_loss={:.4} kl={:.4}",
                u.update + 1,
                n_updates,
                u.timesteps,
                eps.len(),
                final_mean_progress(eps, 100),
                u.stats.value_loss,
                u.stats.approx_kl
            );
        }
    })?;
    let (q1, q4) = collision_quartiles(&outcome.episodes);
    let summary = TrainSummary {
        mode: cfg.mode,
        encoder: encoder.map(|p| p.display().to_string()),
        encoder_beta: vae.as_ref().map(|v| v.beta),
        timesteps: outcome.updates.last().map_or(0, |u| u.timesteps),
        episodes: outcome.episodes.len(),
        final100_progress: final_mean_progress(&outcome.episodes, 100),
        collision_rate_first_quartile: q1,
        collision_rate_last_quartile: q4,
        encoder_hash_start: outcome.encoder_hash_start.clone(),
        encoder_hash_end: outcome.encoder_hash_end.clone(),
    };
    outcome.agent.save(
        &out.join("policy.ckpt"),
        serde_json::json!({"env": cfg.env, "ppo": cfg.ppo, "seed": cfg.seed, "timesteps": summary.timesteps}),
    )?;
    write_text(&out.join("episodes.csv"), &episodes_csv(&outcome.episodes))?;
    write_text(&out.join("updates.csv"), &updates_csv(&outcome.updates))?;
    write_text(
        &out.join("curves.csv"),
        &episode_curves(&outcome.episodes, cfg.smooth_window)?,
    )?;
    write_text(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    if cfg.eval_episodes >= 2 {
        let report = evaluate_agent(
            &outcome.agent,
            model,
            &cfg.env,
            cfg.eval_episodes,
            derive_seed(cfg.seed, "eval", 0),
        )?;
        write_text(&out.join("report.csv"), &report.to_csv())?;
    }
    log::info!(
        "train-agent: {} episodes, final-100 progress {:.3}, collision rate {:.3} -> {:.3}",
        summary.episodes,
        summary.final100_progress,
        q1,
        q4
    );
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct EvalAgentArgs {
    /// Policy checkpoint written by train-agent.
    #[arg(long, value_name = "CKPT")]
    pub policy: Option<PathBuf>,
    /// Number of test scenarios (default 100).
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Report CSV path (default <out>/report.csv).
    #[arg(long, value_name = "CSV")]
    pub report: Option<PathBuf>,
    /// Number of trajectory dumps (first N test scenarios).
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[command(flatten)]
    pub obstacles: ObstacleArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalAgentConfig {
    /// Seed of the test-scenario stream.
    pub seed: u64,
    pub policy: Option<PathBuf>,
    pub episodes: usize,
    pub trajectories: usize,
    pub report: Option<PathBuf>,
    pub ship_model: Option<PathBuf>,
    /// Defaults to the environment the policy was trained in.
    pub env: Option<EnvConfig>,
}

pub fn eval_agent(common: &Common, args: &EvalAgentArgs) -> Result<()> {
    let defaults = EvalAgentConfig {
        seed: 0,
        policy: None,
        episodes: 100,
        trajectories: 1,
        report: None,
        ship_model: None,
        env: None,
    };
    let mut cfg = layered(&defaults, common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if args.policy.is_some() {
        cfg.policy.clone_from(&args.policy);
    }
    if let Some(n) = args.episodes {
        cfg.episodes = n;
    }
    if let Some(n) = args.trajectories {
        cfg.trajectories = n;
    }
    if args.report.is_some() {
        cfg.report.clone_from(&args.report);
    }
    let Some(policy_path) = cfg.policy.clone() else {
        bail!("eval-agent needs --policy <policy.ckpt>");
    };
    if cfg.episodes < 2 {
        bail!("--episodes must be at least 2");
    }
    let (policy, meta) = ActorCritic::load_with_meta(&policy_path)?;
    let mut env_cfg = match cfg.env {
        Some(e) => e,
        None => match meta.get("train").and_then(|t| t.get("env")) {
            Some(v) => serde_json::from_value(v.clone())
                .with_context(|| format!("environment recorded in {} is malformed", policy_path.display()))?,
            None => EnvConfig::default(),
        },
    };
    args.obstacles.apply(&mut env_cfg.scenario);
    env_cfg.validate()?;
    cfg.env = Some(env_cfg);

    let out = out_dir(common, "eval-agent");
    let mut rec = RunRecord::start("eval-agent", out.clone(), cfg.seed, &cfg)?;
    rec.inputs.push(policy_path.clone());
    let model = load_ship_model(cfg.ship_model.as_deref(), &mut rec)?;
    let report = evaluate_agent(&policy, &model, &env_cfg, cfg.episodes, cfg.seed)?;
    let report_path = cfg.report.clone().unwrap_or_else(|| out.join("report.csv"));
    write_text(&report_path, &report.to_csv())?;
    rec.extra_outputs.push(report_path);

    let mut eps = String::from("episode,steps,progress,mean_cte,collision,termination_reason\n");
    for (i, e) in report.episodes.iter().enumerate() {
        let _ = writeln!(
            eps,
            "{i},{},{},{},{},{}",
            e.duration,
            e.progress,
            e.mean_cte,
            u8::from(e.collision),
            e.termination.as_str()
        );
    }
    write_text(&out.join("episodes.csv"), &eps)?;

    let mut env = Env::new(model.clone(), env_cfg)?;
    for i in 0..cfg.trajectories {
        let s = agent_scenario(cfg.seed, ScenarioKind::Test, i as u64, &env_cfg)?;
        let mut rows = Vec::new();
        run_episode(&policy, &mut env, &s, Some(&mut rows))?;
        write_text(&out.join(format!("trajectory_{i:03}.csv")), &trajectory_csv(&rows))?;
    }
    log::info!(
        "eval-agent: progress {:.1}% [{:.1}, {:.1}], cte {:.1} m, duration {:.1}, collisions {:.1}%",
        report.progress.mean,
        report.progress.lo,
        report.progress.hi,
        report.cte.mean,
        report.duration.mean,
        report.collision_rate.mean
    );
    rec.finish()?;
    Ok(())
}
