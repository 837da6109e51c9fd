//! PPO agent on top of the path-following environment.
//!
//! Observations are six normalised navigation features followed by the
//! encoder mean of the current scan. Policy and value are separate 64-64 tanh
//! MLPs; the policy is a diagonal Gaussian with a state-independent log-std.
//! The encoder lives in the same parameter store under `encoder.` and is
//! frozen in the locked modes.

use std::fmt::Write as _;
use std::path::Path as FsPath;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::ShipModel;
use crate::env::{Env, EnvConfig, StepInfo, Termination};
use crate::error::{Error, Result};
use crate::guidance::NavFeatures;
use crate::metrics::{confidence_interval, Interval};
use crate::neural::{orthogonal, AdamConfig, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng;
use crate::vae::{Arch, Encoder, VaeModel, VaeSpec, FEATURE_WIDTH, SCAN_LEN};
use crate::world::{generate_scenario, Scenario, ScenarioKind};

pub const NAV_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    ShallowLocked,
    ShallowUnlocked,
    DeepLocked,
    DeepUnlocked,
    Baseline,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 5] = [
        FeatureMode::ShallowLocked,
        FeatureMode::ShallowUnlocked,
        FeatureMode::DeepLocked,
        FeatureMode::DeepUnlocked,
        FeatureMode::Baseline,
    ];

    pub fn arch(self) -> Arch {
        match self {
            FeatureMode::DeepLocked | FeatureMode::DeepUnlocked => Arch::Deep,
            _ => Arch::Shallow,
        }
    }

    pub fn is_locked(self) -> bool {
        matches!(self, FeatureMode::ShallowLocked | FeatureMode::DeepLocked)
    }

    pub fn needs_checkpoint(self) -> bool {
        self != FeatureMode::Baseline
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::ShallowLocked => "shallow_locked",
            FeatureMode::ShallowUnlocked => "shallow_unlocked",
            FeatureMode::DeepLocked => "deep_locked",
            FeatureMode::DeepUnlocked => "deep_unlocked",
            FeatureMode::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature-extractor mode '{s}'")))
    }
}

/// Divisors for the navigation features, and the bound the scaled values
/// are clipped to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavScale {
    pub velocity: f64,
    pub yaw_rate: f64,
    pub cte: f64,
    pub angle: f64,
    pub clip: f64,
}

impl NavScale {
    pub fn for_model(model: &ShipModel) -> Self {
        Self {
            velocity: model.u_max,
            yaw_rate: model.r_max,
            cte: 100.0,
            angle: std::f64::consts::PI,
            clip: 1.0,
        }
    }

    pub fn apply(&self, nav: &NavFeatures) -> [f64; NAV_DIM] {
        [
            nav.u / self.velocity,
            nav.v / self.velocity,
            nav.r / self.yaw_rate,
            nav.cte / self.cte,
            nav.heading_error / self.angle,
            nav.lookahead_heading_error / self.angle,
        ]
        .map(|x| x.clamp(-self.clip, self.clip))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub n_steps: usize,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_range: f64,
    pub normalize_advantage: bool,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub total_timesteps: usize,
    pub hidden: usize,
    pub log_std_init: f64,
    pub adam_eps: f64,
    /// Divide rewards by the running std of the discounted return.
    pub normalize_reward: bool,
    pub reward_clip: f64,
    /// Treat timeouts as truncation and bootstrap from the value of the final state.
    pub bootstrap_timeout: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            n_steps: 1024,
            batch_size: 32,
            n_epochs: 4,
            gamma: 0.999,
            gae_lambda: 0.98,
            clip_range: 0.2,
            normalize_advantage: true,
            ent_coef: 0.01,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            total_timesteps: 3_000_000,
            hidden: 64,
            log_std_init: 0.0,
            adam_eps: 1e-5,
            normalize_reward: true,
            reward_clip: 10.0,
            bootstrap_timeout: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.n_steps > 0
            && self.batch_size > 0
            && self.n_epochs > 0
            && self.hidden > 0
            && self.clip_range > 0.0
            && self.max_grad_norm > 0.0;
        if !positive {
            return Err(Error::Config(
                "PPO sizes, learning rate, clip range and grad norm must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gamma and gae_lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    fn init(store: &mut ParamStore, prefix: &str, sizes: &[usize], out_gain: f64, rng: &mut rng::Rng) -> Result<Self> {
        let n = sizes.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let gain = if i + 1 == n { out_gain } else { 2f64.sqrt() };
            let w = store.add(
                format!("{prefix}.l{i}.weight"),
                orthogonal(rng, sizes[i + 1], sizes[i], gain),
            )?;
            let b = store.add(format!("{prefix}.l{i}.bias"), Tensor::zeros(&[sizes[i + 1]]))?;
            layers.push((w, b));
        }
        Ok(Self { layers })
    }

    fn bind(store: &ParamStore, prefix: &str, n: usize) -> Result<Self> {
        let find = |name: String| {
            store
                .find(&name)
                .ok_or_else(|| Error::Config(format!("parameter '{name}' missing from store")))
        };
        let layers = (0..n)
            .map(|i| {
                Ok((
                    find(format!("{prefix}.l{i}.weight"))?,
                    find(format!("{prefix}.l{i}.bias"))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (g.param(store, *w), g.param(store, *b));
            h = g.linear(h, wv, bv)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Graph outputs for a batch of observations.
pub struct Heads {
    pub mean: Var,
    pub value: Var,
    pub log_std: Var,
}

#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub mode: FeatureMode,
    pub encoder_spec: VaeSpec,
    pub nav_scale: NavScale,
    pub hidden: usize,
    pub store: ParamStore,
    encoder: Encoder,
    policy: Mlp,
    value: Mlp,
    log_std: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSample {
    /// Raw Gaussian sample (what the log-probability refers to).
    pub action: [f64; ACTION_DIM],
    pub log_prob: f64,
    pub value: f64,
}

impl ActorCritic {
    /// Builds the networks; for non-baseline modes the encoder weights are
    /// copied from `encoder` and frozen when the mode is locked.
    pub fn new(
        mode: FeatureMode,
        encoder: Option<&VaeModel>,
        nav_scale: NavScale,
        cfg: &PpoConfig,
        seed: u64,
    ) -> Result<Self> {
        let spec = match (mode.needs_checkpoint(), encoder) {
            (true, None) => {
                return Err(Error::Config(format!(
                    "mode {} requires an encoder checkpoint",
                    mode.as_str()
                )));
            }
            (true, Some(vae)) => {
                if vae.spec.arch != mode.arch() {
                    return Err(Error::Config(format!(
                        "mode {} needs a {} encoder, checkpoint is {}",
                        mode.as_str(),
                        mode.arch().as_str(),
                        vae.spec.arch.as_str()
                    )));
                }
                vae.spec
            }
            (false, _) => VaeSpec::new(Arch::Shallow, FEATURE_WIDTH),
        };
        let mut rng = rng::substream(seed, "agent/init", 0);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, spec, &mut rng)?;
        if let Some(vae) = encoder.filter(|_| mode.needs_checkpoint()) {
            store.copy_from(&vae.store, Encoder::PREFIX)?;
        }
        let obs_dim = NAV_DIM + spec.latent_dim;
        let h = cfg.hidden;
        let policy = Mlp::init(&mut store, "policy", &[obs_dim, h, h, ACTION_DIM], 0.01, &mut rng)?;
        let value = Mlp::init(&mut store, "value", &[obs_dim, h, h, 1], 1.0, &mut rng)?;
        let log_std = store.add("policy.log_std", Tensor::full(&[1, ACTION_DIM], cfg.log_std_init))?;
        store.set_frozen(Encoder::PREFIX, mode.is_locked());
        Ok(Self {
            mode,
            encoder_spec: spec,
            nav_scale,
            hidden: h,
            store,
            encoder: enc,
            policy,
            value,
            log_std,
        })
    }

    pub fn obs_dim(&self) -> usize {
        NAV_DIM + self.encoder_spec.latent_dim
    }

    pub fn encoder_hash(&self) -> String {
        self.store.hash_prefix(Encoder::PREFIX)
    }

    pub fn log_std(&self) -> &[f64] {
        self.store.value(self.log_std).data()
    }

    /// Policy mean, value and log-std for `(B, 6)` normalised nav features
    /// and `(B, 180)` scans.
    pub fn heads(&self, g: &mut Graph, nav: &Tensor, scans: &Tensor) -> Result<Heads> {
        let batch = nav.rows();
        let x = g.input(scans.clone().reshape(&[batch, 1, SCAN_LEN])?);
        let (mu, _) = self.encoder.forward(g, &self.store, x)?;
        let n = g.input(nav.clone());
        let obs = g.concat_cols(n, mu)?;
        let mean = self.policy.forward(g, &self.store, obs)?;
        let value = self.value.forward(g, &self.store, obs)?;
        let log_std = g.param(&self.store, self.log_std);
        Ok(Heads { mean, value, log_std })
    }

    /// Full observation vector (nav then latent mean).
    pub fn observation(&self, nav: &NavFeatures, scan: &[f64]) -> Result<Vec<f64>> {
        let mut obs = self.nav_scale.apply(nav).to_vec();
        obs.extend_from_slice(self.encoder.mu(&self.store, scan, 1)?.data());
        Ok(obs)
    }

    /// Samples an action (or takes the mean when `deterministic`).
    pub fn act<R: Rng + ?Sized>(
        &self,
        nav: &NavFeatures,
        scan: &[f64],
        rng: &mut R,
        deterministic: bool,
    ) -> Result<ActionSample> {
        let navt = Tensor::new(&[1, NAV_DIM], self.nav_scale.apply(nav).to_vec())?;
        let scant = Tensor::new(&[1, SCAN_LEN], scan.to_vec())?;
        let mut g = Graph::new();
        let h = self.heads(&mut g, &navt, &scant)?;
        let mean = g.value(h.mean).data();
        let log_std = g.value(h.log_std).data();
        let mut action = [0.0; ACTION_DIM];
        let mut log_prob = 0.0;
        for k in 0..ACTION_DIM {
            let e: f64 = if deterministic { 0.0 } else { rng.sample(StandardNormal) };
            action[k] = mean[k] + log_std[k].exp() * e;
            log_prob += -0.5 * e * e - log_std[k] - 0.5 * LN_2PI;
        }
        Ok(ActionSample {
            action,
            log_prob,
            value: g.value(h.value).item(),
        })
    }

    pub fn checkpoint_meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "agent",
            "mode": self.mode,
            "encoder_spec": self.encoder_spec,
            "nav_scale": self.nav_scale,
            "hidden": self.hidden,
        })
    }

    pub fn save(&self, path: &FsPath, extra: serde_json::Value) -> Result<()> {
        let mut meta = self.checkpoint_meta();
        meta["train"] = extra;
        self.store.save_checkpoint(path, &meta)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        Ok(Self::load_with_meta(path)?.0)
    }

    /// The policy plus its checkpoint metadata (including the `train` entry).
    pub fn load_with_meta(path: &FsPath) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = ParamStore::load_checkpoint(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("agent") {
            return Err(Error::format(path, "checkpoint is not an agent policy"));
        }
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::format(path, format!("meta lacks '{k}'")))
        };
        let parse_err = |e| Error::json(path, e);
        let mode: FeatureMode = serde_json::from_value(field("mode")?).map_err(parse_err)?;
        let encoder_spec: VaeSpec = serde_json::from_value(field("encoder_spec")?).map_err(parse_err)?;
        let nav_scale: NavScale = serde_json::from_value(field("nav_scale")?).map_err(parse_err)?;
        let hidden = field("hidden")?
            .as_u64()
            .ok_or_else(|| Error::format(path, "bad 'hidden'"))? as usize;
        let encoder = Encoder::bind(&store, encoder_spec)?;
        let policy = Mlp::bind(&store, "policy", 3)?;
        let value = Mlp::bind(&store, "value", 3)?;
        let log_std = store
            .find("policy.log_std")
            .ok_or_else(|| Error::format(path, "missing policy.log_std"))?;
        let mut agent = Self {
            mode,
            encoder_spec,
            nav_scale,
            hidden,
            store,
            encoder,
            policy,
            value,
            log_std,
        };
        agent.store.set_frozen(Encoder::PREFIX, mode.is_locked());
        Ok((agent, meta))
    }
}

/// GAE(lambda) with episode-boundary masking. `dones[t]` marks that the
/// episode ended after step `t`; `last_value` bootstraps the final step.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::shape(
            "gae",
            format!("rewards {n}, values {}, dones {}", values.len(), dones.len()),
        ));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let mask = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 == n { last_value } else { values[t + 1] };
        let delta = rewards[t] + gamma * next_value * mask - values[t];
        next_adv = delta + gamma * lambda * mask * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Running variance of the discounted return, used to scale rewards for
/// the value and advantage targets (episode statistics stay unscaled).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScaler {
    gamma: f64,
    ret: f64,
    count: f64,
    mean: f64,
    m2: f64,
}

impl RewardScaler {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            ret: 0.0,
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    pub fn std(&self) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            (self.m2 / self.count).sqrt()
        }
    }

    /// Updates the statistics with `reward` and returns its scaled value.
    pub fn scale(&mut self, reward: f64, done: bool, clip: f64) -> f64 {
        self.ret = self.ret * self.gamma + reward;
        self.count += 1.0;
        let d = self.ret - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (self.ret - self.mean);
        if done {
            self.ret = 0.0;
        }
        (reward / (self.std() + 1e-8)).clamp(-clip, clip)
    }
}

/// One PPO rollout of fixed capacity.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub capacity: usize,
    pub nav: Vec<f64>,
    pub scans: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() >= self.capacity
    }

    pub fn clear(&mut self) {
        *self = Self::new(self.capacity);
    }

    pub fn push(
        &mut self,
        nav: &[f64; NAV_DIM],
        scan: &[f64],
        sample: &ActionSample,
        reward: f64,
        done: bool,
    ) -> Result<()> {
        if self.is_full() {
            return Err(Error::Usage("rollout buffer is full".into()));
        }
        self.nav.extend_from_slice(nav);
        self.scans.extend_from_slice(scan);
        self.actions.extend_from_slice(&sample.action);
        self.log_probs.push(sample.log_prob);
        self.values.push(sample.value);
        self.rewards.push(reward);
        self.dones.push(done);
        Ok(())
    }

    pub fn finish(&mut self, last_value: f64, gamma: f64, lambda: f64) -> Result<()> {
        if !self.is_full() {
            return Err(Error::Usage(format!(
                "advantages need a full buffer ({} of {})",
                self.len(),
                self.capacity
            )));
        }
        let (a, r) = gae(&self.rewards, &self.values, &self.dones, last_value, gamma, lambda)?;
        self.advantages = a;
        self.returns = r;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
}

/// Minibatch inputs of the PPO objective.
pub struct Minibatch {
    pub nav: Tensor,
    pub scans: Tensor,
    pub actions: Tensor,
    pub old_log_probs: Tensor,
    pub advantages: Tensor,
    pub returns: Tensor,
}

impl Minibatch {
    pub fn gather(buf: &RolloutBuffer, idx: &[usize], normalize: bool) -> Result<Self> {
        let b = idx.len();
        let pick = |src: &[f64], w: usize| -> Vec<f64> {
            idx.iter()
                .flat_map(|&i| src[i * w..(i + 1) * w].iter().copied())
                .collect()
        };
        let mut adv: Vec<f64> = idx.iter().map(|&i| buf.advantages[i]).collect();
        if normalize && b > 1 {
            let mean = adv.iter().sum::<f64>() / b as f64;
            let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (b - 1) as f64).sqrt();
            adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
        }
        Ok(Self {
            nav: Tensor::new(&[b, NAV_DIM], pick(&buf.nav, NAV_DIM))?,
            scans: Tensor::new(&[b, SCAN_LEN], pick(&buf.scans, SCAN_LEN))?,
            actions: Tensor::new(&[b, ACTION_DIM], pick(&buf.actions, ACTION_DIM))?,
            old_log_probs: Tensor::new(&[b, 1], pick(&buf.log_probs, 1))?,
            advantages: Tensor::new(&[b, 1], adv)?,
            returns: Tensor::new(&[b, 1], pick(&buf.returns, 1))?,
        })
    }
}

/// Loss nodes of the clipped PPO objective.
pub struct PpoLoss {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    pub ratio: Var,
}

pub fn ppo_loss(g: &mut Graph, agent: &ActorCritic, mb: &Minibatch, cfg: &PpoConfig) -> Result<PpoLoss> {
    let h = agent.heads(g, &mb.nav, &mb.scans)?;
    let actions = g.input(mb.actions.clone());
    let logp = g.gaussian_log_prob(h.mean, h.log_std, actions)?;
    let old = g.input(mb.old_log_probs.clone());
    let diff = g.sub(logp, old)?;
    let ratio = g.exp(diff);
    let adv = g.input(mb.advantages.clone());
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range);
    let s2 = g.mul(clipped, adv)?;
    let surr = g.minimum(s1, s2)?;
    let surr = g.mean(surr);
    let policy = g.scale(surr, -1.0);

    let ret = g.input(mb.returns.clone());
    let err = g.sub(h.value, ret)?;
    let sq = g.square(err);
    let value = g.mean(sq);

    let ent = g.sum(h.log_std);
    let entropy = g.add_scalar(ent, ACTION_DIM as f64 * 0.5 * (1.0 + LN_2PI));

    let v = g.scale(value, cfg.vf_coef);
    let e = g.scale(entropy, -cfg.ent_coef);
    let total = g.add(policy, v)?;
    let total = g.add(total, e)?;
    Ok(PpoLoss {
        total,
        policy,
        value,
        entropy,
        ratio,
    })
}

/// `n_epochs` passes of shuffled minibatches over a finished buffer.
pub fn ppo_update(
    agent: &mut ActorCritic,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut rng::Rng,
) -> Result<UpdateStats> {
    if buf.advantages.len() != buf.len() || buf.is_empty() {
        return Err(Error::Usage("ppo_update needs a finished buffer".into()));
    }
    let adam = AdamConfig {
        eps: cfg.adam_eps,
        ..AdamConfig::with_lr(cfg.learning_rate)
    };
    let mut order: Vec<usize> = (0..buf.len()).collect();
    let mut acc = UpdateStats::default();
    let mut count = 0usize;
    for _ in 0..cfg.n_epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.batch_size) {
            let mb = Minibatch::gather(buf, idx, cfg.normalize_advantage)?;
            let mut g = Graph::new();
            let loss = ppo_loss(&mut g, agent, &mb, cfg)?;
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!(
                        "PPO loss (policy {}, value {})",
                        g.value(loss.policy).item(),
                        g.value(loss.value).item()
                    ),
                });
            }
            agent.store.zero_grad();
            g.backward(loss.total, &mut agent.store)?;
            let norm = agent.store.clip_grad_norm(cfg.max_grad_norm);
            agent.store.adam_step(&adam);

            let ratios = g.value(loss.ratio).data();
            let clipped = ratios.iter().filter(|r| (*r - 1.0).abs() > cfg.clip_range).count();
            let kl = ratios.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / ratios.len() as f64;
            acc.policy_loss += g.value(loss.policy).item();
            acc.value_loss += g.value(loss.value).item();
            acc.entropy += g.value(loss.entropy).item();
            acc.clip_fraction += clipped as f64 / ratios.len() as f64;
            acc.approx_kl += kl;
            acc.grad_norm += norm;
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    Ok(UpdateStats {
        policy_loss: acc.policy_loss / n,
        value_loss: acc.value_loss / n,
        entropy: acc.entropy / n,
        clip_fraction: acc.clip_fraction / n,
        approx_kl: acc.approx_kl / n,
        grad_norm: acc.grad_norm / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub steps: usize,
    pub progress: f64,
    pub mean_cte: f64,
    pub cumulative_reward: f64,
    pub collision: bool,
    pub termination_reason: Termination,
    /// Environment steps taken in training when the episode ended.
    pub timesteps: usize,
}

impl EpisodeRecord {
    fn from_env(episode: usize, env: &Env, info: &StepInfo, timesteps: usize) -> Self {
        Self {
            episode,
            steps: info.t,
            progress: info.progress,
            mean_cte: env.mean_cte(),
            cumulative_reward: info.cumulative_reward,
            collision: info.collided,
            termination_reason: info.termination.expect("finished episode has a termination"),
            timesteps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub timesteps: usize,
    pub stats: UpdateStats,
    pub log_std: Vec<f64>,
    pub encoder_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentTrainConfig {
    pub mode: FeatureMode,
    pub ppo: PpoConfig,
    pub env: EnvConfig,
    pub seed: u64,
}

impl AgentTrainConfig {
    pub fn new(mode: FeatureMode) -> Self {
        Self {
            mode,
            ppo: PpoConfig::default(),
            env: EnvConfig::default(),
            seed: 0,
        }
    }
}

pub struct TrainOutcome {
    pub agent: ActorCritic,
    pub episodes: Vec<EpisodeRecord>,
    pub updates: Vec<UpdateRecord>,
    pub encoder_hash_start: String,
    pub encoder_hash_end: String,
}

/// Scenario `index` of the training or evaluation stream derived from `seed`.
pub fn agent_scenario(seed: u64, kind: ScenarioKind, index: u64, env: &EnvConfig) -> Result<Scenario> {
    let tag = match kind {
        ScenarioKind::Train => "agent/train-scenario",
        ScenarioKind::Test => "agent/test-scenario",
    };
    generate_scenario(rng::derive_seed(seed, tag, index), kind, &env.scenario)
}

/// Resets onto the next scenario that does not terminate immediately.
fn reset_next(env: &mut Env, seed: u64, kind: ScenarioKind, counter: &mut u64) -> Result<()> {
    loop {
        let s = agent_scenario(seed, kind, *counter, env.config())?;
        *counter += 1;
        if env.reset(&s)?.termination.is_none() {
            return Ok(());
        }
    }
}

fn clip_action(a: [f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
    a.map(|v| v.clamp(-1.0, 1.0))
}

/// PPO training loop. `on_update` sees every update record as it is made.
pub fn train_agent(
    cfg: &AgentTrainConfig,
    encoder: Option<&VaeModel>,
    model: &ShipModel,
    mut on_update: impl FnMut(&UpdateRecord, &[EpisodeRecord]),
) -> Result<TrainOutcome> {
    cfg.ppo.validate()?;
    let mut agent = ActorCritic::new(cfg.mode, encoder, NavScale::for_model(model), &cfg.ppo, cfg.seed)?;
    let encoder_hash_start = agent.encoder_hash();
    let mut env = Env::new(model.clone(), cfg.env)?;
    let mut scenario_counter = 0u64;
    reset_next(&mut env, cfg.seed, ScenarioKind::Train, &mut scenario_counter)?;
    let mut buf = RolloutBuffer::new(cfg.ppo.n_steps);
    let mut episodes = Vec::new();
    let mut updates = Vec::new();
    let mut timesteps = 0usize;
    let mut scaler = RewardScaler::new(cfg.ppo.gamma);
    let n_updates = cfg.ppo.total_timesteps.div_ceil(cfg.ppo.n_steps);
    for update in 0..n_updates {
        let mut act_rng = rng::substream(cfg.seed, "agent/action", update as u64);
        buf.clear();
        while !buf.is_full() {
            let nav = *env.nav().expect("env was reset");
            let scan = env.scan().values().to_vec();
            let sample = agent.act(&nav, &scan, &mut act_rng, false)?;
            let tr = env.step(clip_action(sample.action))?;
            timesteps += 1;
            let mut r = if cfg.ppo.normalize_reward {
                scaler.scale(tr.reward, tr.done, cfg.ppo.reward_clip)
            } else {
                tr.reward
            };
            if cfg.ppo.bootstrap_timeout && tr.info.termination == Some(Termination::Timeout) {
                let end = *env.nav().expect("env was stepped");
                r += cfg.ppo.gamma * agent.act(&end, env.scan().values(), &mut act_rng, true)?.value;
            }
            buf.push(&agent.nav_scale.apply(&nav), &scan, &sample, r, tr.done)?;
            if tr.done {
                episodes.push(EpisodeRecord::from_env(episodes.len(), &env, &tr.info, timesteps));
                reset_next(&mut env, cfg.seed, ScenarioKind::Train, &mut scenario_counter)?;
            }
        }
        let nav = *env.nav().expect("env was reset");
        let last = agent.act(&nav, env.scan().values(), &mut act_rng, true)?.value;
        buf.finish(last, cfg.ppo.gamma, cfg.ppo.gae_lambda)?;
        let mut mb_rng = rng::substream(cfg.seed, "agent/minibatch", update as u64);
        let stats = ppo_update(&mut agent, &buf, &cfg.ppo, &mut mb_rng)?;
        let rec = UpdateRecord {
            update,
            timesteps,
            stats,
            log_std: agent.log_std().to_vec(),
            encoder_hash: agent.encoder_hash(),
        };
        on_update(&rec, &episodes);
        updates.push(rec);
    }
    let encoder_hash_end = agent.encoder_hash();
    Ok(TrainOutcome {
        agent,
        episodes,
        updates,
        encoder_hash_start,
        encoder_hash_end,
    })
}

/// Mean progress of the last `n` episodes (all of them if fewer).
pub fn final_mean_progress(episodes: &[EpisodeRecord], n: usize) -> f64 {
    let tail = &episodes[episodes.len().saturating_sub(n)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(|e| e.progress).sum::<f64>() / tail.len() as f64
}

/// Collision rates of the first and last quarter of the episodes.
pub fn collision_quartiles(episodes: &[EpisodeRecord]) -> (f64, f64) {
    let q = (episodes.len() / 4).max(1).min(episodes.len());
    let rate = |s: &[EpisodeRecord]| {
        if s.is_empty() {
            0.0
        } else {
            s.iter().filter(|e| e.collision).count() as f64 / s.len() as f64
        }
    };
    (rate(&episodes[..q]), rate(&episodes[episodes.len() - q..]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub x_n: f64,
    pub y_n: f64,
    pub psi: f64,
    pub u: f64,
    pub v: f64,
    pub r: f64,
    pub reward: f64,
}

/// Runs one episode with deterministic (mean) actions.
pub fn run_episode(
    agent: &ActorCritic,
    env: &mut Env,
    scenario: &Scenario,
    trajectory: Option<&mut Vec<TrajectoryRow>>,
) -> Result<StepInfo> {
    let mut info = env.reset(scenario)?;
    let mut rows = Vec::new();
    let mut record = |t: usize, env: &Env, reward: f64| {
        let s = env.state();
        rows.push(TrajectoryRow {
            t,
            x_n: s.eta[0],
            y_n: s.eta[1],
            psi: s.eta[2],
            u: s.nu[0],
            v: s.nu[1],
            r: s.nu[2],
            reward,
        });
    };
    record(0, env, 0.0);
    let mut unused = rng::from_seed(0);
    while !env.is_done() {
        let nav = *env.nav().expect("env was reset");
        let a = agent.act(&nav, env.scan().values(), &mut unused, true)?;
        let tr = env.step(clip_action(a.action))?;
        record(tr.info.t, env, tr.reward);
        info = tr.info;
    }
    if let Some(out) = trajectory {
        *out = rows;
    }
    Ok(info)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub progress: f64,
    pub mean_cte: f64,
    pub duration: usize,
    pub collision: bool,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: Vec<EvalEpisode>,
    /// Percent.
    pub progress: Interval,
    /// Metres.
    pub cte: Interval,
    /// Environment steps.
    pub duration: Interval,
    /// Percent.
    pub collision_rate: Interval,
}

impl EvalReport {
    /// Four rows `metric,mean,ci_lo,ci_hi,std,n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,ci_lo,ci_hi,std,n\n");
        for (name, iv) in [
            ("progress_pct", &self.progress),
            ("cte_m", &self.cte),
            ("duration_steps", &self.duration),
            ("collision_rate_pct", &self.collision_rate),
        ] {
            let _ = writeln!(out, "{name},{},{},{},{},{}", iv.mean, iv.lo, iv.hi, iv.std, iv.n);
        }
        out
    }
}

/// Runs `n_episodes` fresh test scenarios from `seed_stream`; one episode
/// per scenario, mean actions.
pub fn evaluate_agent(
    agent: &ActorCritic,
    model: &ShipModel,
    env_cfg: &EnvConfig,
    n_episodes: usize,
    seed_stream: u64,
) -> Result<EvalReport> {
    if n_episodes < 2 {
        return Err(Error::Config("evaluation needs at least 2 episodes".into()));
    }
    let mut env = Env::new(model.clone(), *env_cfg)?;
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut counter = 0u64;
    while episodes.len() < n_episodes {
        let s = agent_scenario(seed_stream, ScenarioKind::Test, counter, env_cfg)?;
        counter += 1;
        let info = run_episode(agent, &mut env, &s, None)?;
        if info.t == 0 {
            continue;
        }
        episodes.push(EvalEpisode {
            progress: info.progress,
            mean_cte: env.mean_cte(),
            duration: info.t,
            collision: info.collided,
            termination: info.termination.expect("episode finished"),
        });
    }
    let col = |f: &dyn Fn(&EvalEpisode) -> f64| -> Result<Interval> {
        confidence_interval(&episodes.iter().map(f).collect::<Vec<_>>())
    };
    Ok(EvalReport {
        progress: col(&|e| 100.0 * e.progress)?,
        cte: col(&|e| e.mean_cte)?,
        duration: col(&|e| e.duration as f64)?,
        collision_rate: col(&|e| if e.collision { 100.0 } else { 0.0 })?,
        episodes,
    })
}

pub fn episodes_csv(episodes: &[EpisodeRecord]) -> String {
    let mut out = String::from("episode,steps,progress,mean_cte,cumulative_reward,collision,termination_reason\n");
    for e in episodes {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.episode,
            e.steps,
            e.progress,
            e.mean_cte,
            e.cumulative_reward,
            u8::from(e.collision),
            e.termination_reason.as_str()
        );
    }
    out
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from("t,x_n,y_n,psi,u,v,r,reward\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.t, r.x_n, r.y_n, r.psi, r.u, r.v, r.r, r.reward
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::max_param_fd_error;
    use crate::world::ScenarioConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_gae(r: &[f64], v: &[f64], d: &[bool], last: f64, gamma: f64, lambda: f64) -> Vec<f64> {
        let n = r.len();
        let delta: Vec<f64> = (0..n)
            .map(|t| {
                let next = if t + 1 == n { last } else { v[t + 1] };
                r[t] + if d[t] { 0.0 } else { gamma * next } - v[t]
            })
            .collect();
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                let mut w = 1.0;
                for k in t..n {
                    sum += w * delta[k];
                    if d[k] {
                        break;
                    }
                    w *= gamma * lambda;
                }
                sum
            })
            .collect()
    }

    #[test]
    fn gae_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = [0.0, 0.5, 0.98, 1.0];
        for &gamma in &grid {
            for &lambda in &grid {
                for _ in 0..50 {
                    let n = 10;
                    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
                    let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
                    let last = rng.random_range(-5.0..5.0);
                    let (a, ret) = gae(&r, &v, &d, last, gamma, lambda).unwrap();
                    let b = brute_gae(&r, &v, &d, last, gamma, lambda);
                    for t in 0..n {
                        assert!((a[t] - b[t]).abs() <= 1e-10);
                        assert!((ret[t] - a[t] - v[t]).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn reward_scaler_tracks_return_std() {
        let mut sc = RewardScaler::new(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20000 {
            sc.scale(rng.random_range(-1.0..1.0) * 50.0, false, 10.0);
        }
        // gamma 0 makes the return the reward itself: U(-50, 50) has std 50/sqrt(3).
        assert!((sc.std() - 50.0 / 3f64.sqrt()).abs() < 1.0);
        assert_eq!(sc.scale(1e9, true, 10.0), 10.0);
    }

    #[test]
    fn gae_limits() {
        let r = [1.0, 2.0, 3.0, 4.0];
        let v = [0.5, -0.2, 0.1, 0.3];
        let d = [false; 4];
        let (a, _) = gae(&r, &v, &d, 0.7, 0.9, 0.0).unwrap();
        for t in 0..4 {
            let next = if t == 3 { 0.7 } else { v[t + 1] };
            assert!((a[t] - (r[t] + 0.9 * next - v[t])).abs() < 1e-12);
        }
        let (a, _) = gae(&r, &[0.0; 4], &d, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(a, vec![10.0, 9.0, 7.0, 4.0]);
        assert!(gae(&r, &v[..3], &d, 0.0, 1.0, 1.0).is_err());
    }

    fn tiny_agent(mode: FeatureMode) -> ActorCritic {
        let cfg = PpoConfig {
            hidden: 8,
            ..PpoConfig::default()
        };
        let vae = VaeModel::new(VaeSpec::new(mode.arch(), 12), 1.0, 3).unwrap();
        let enc = mode.needs_checkpoint().then_some(&vae);
        ActorCritic::new(mode, enc, NavScale::for_model(&ShipModel::cybership2_like()), &cfg, 5).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> RolloutBuffer {
        let mut buf = RolloutBuffer::new(n);
        for _ in 0..n {
            let nav: [f64; NAV_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let scan: Vec<f64> = (0..SCAN_LEN).map(|_| rng.random_range(0.0..1.0)).collect();
            let s = ActionSample {
                action: [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
                log_prob: rng.random_range(-3.0..-1.0),
                value: rng.random_range(-1.0..1.0),
            };
            buf.push(&nav, &scan, &s, rng.random_range(-1.0..1.0), rng.random_bool(0.1))
                .unwrap();
        }
        buf.finish(0.3, 0.99, 0.95).unwrap();
        buf
    }

    #[test]
    fn ppo_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in [FeatureMode::ShallowUnlocked, FeatureMode::DeepLocked] {
            let agent = tiny_agent(mode);
            let buf = random_batch(&mut rng, 6);
            let mb = Minibatch::gather(&buf, &[0, 1, 2, 3, 4, 5], true).unwrap();
            let cfg = PpoConfig::default();
            let mut store = agent.store.clone();
            // Frozen parameters get no gradient; check the full graph anyway.
            store.set_frozen(Encoder::PREFIX, false);
            // Small random biases keep every ReLU and clamp away from its kink.
            for id in store.ids().collect::<Vec<_>>() {
                if store.name(id).ends_with(".bias") {
                    store
                        .value_mut(id)
                        .data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.random_range(-0.2..0.2));
                }
            }
            let build = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
                let mut shadow = agent.clone();
                shadow.store = s.clone();
                Ok(ppo_loss(g, &shadow, &mb, &cfg)?.total)
            };
            let err = max_param_fd_error(&mut store, &build).unwrap();
            assert!(err <= 1e-5, "{mode:?}: {err}");
        }
    }

    #[test]
    fn clipped_ratios_give_zero_policy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut agent = tiny_agent(FeatureMode::ShallowLocked);
        let mut buf = random_batch(&mut rng, 4);
        // Old log-probs far below the current ones: ratio >> 1.2 with positive advantages.
        buf.log_probs.iter_mut().for_each(|l| *l = -50.0);
        buf.advantages
            .iter_mut()
            .for_each(|a| *a = 1.0 + rng.random_range(0.0..1.0));
        let mb = Minibatch::gather(&buf, &[0, 1, 2, 3], false).unwrap();
        let cfg = PpoConfig::default();
        let mut g = Graph::new();
        let loss = ppo_loss(&mut g, &agent, &mb, &cfg).unwrap();
        assert!(g.value(loss.ratio).data().iter().all(|&r| r > 1.2));
        agent.store.zero_grad();
        g.backward(loss.policy, &mut agent.store).unwrap();
        assert!(agent.store.grad_norm() == 0.0);
    }

    #[test]
    fn identical_policies_have_unit_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let agent = tiny_agent(FeatureMode::Baseline);
        let mut buf = RolloutBuffer::new(5);
        for _ in 0..5 {
            let nav = NavFeatures {
                u: 1.0,
                v: 0.1,
                r: 0.01,
                cte: 3.0,
                heading_error: 0.2,
                lookahead_heading_error: -0.1,
            };
            let scan: Vec<f64> = (0..SCAN_LEN).map(|_| rng.random_range(0.0..1.0)).collect();
            let s = agent.act(&nav, &scan, &mut rng, false).unwrap();
            buf.push(&agent.nav_scale.apply(&nav), &scan, &s, 0.5, false).unwrap();
        }
        buf.finish(0.0, 0.99, 0.95).unwrap();
        let mb = Minibatch::gather(&buf, &[0, 1, 2, 3, 4], true).unwrap();
        let mut g = Graph::new();
        let loss = ppo_loss(&mut g, &agent, &mb, &PpoConfig::default()).unwrap();
        assert!(g.value(loss.ratio).data().iter().all(|r| (r - 1.0).abs() < 1e-12));
        let a = mb.advantages.data();
        let mean = a.iter().sum::<f64>() / 5.0;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_advantage_without_entropy_leaves_policy_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut agent = tiny_agent(FeatureMode::ShallowLocked);
        let mut buf = random_batch(&mut rng, 8);
        buf.advantages.iter_mut().for_each(|a| *a = 0.0);
        let cfg = PpoConfig {
            ent_coef: 0.0,
            batch_size: 4,
            ..PpoConfig::default()
        };
        let before = agent.store.hash_prefix("policy.");
        let value_before = agent.store.hash_prefix("value.");
        let enc_before = agent.encoder_hash();
        ppo_update(&mut agent, &buf, &cfg, &mut rng::from_seed(1)).unwrap();
        assert_eq!(agent.store.hash_prefix("policy."), before);
        assert_ne!(agent.store.hash_prefix("value."), value_before);
        assert_eq!(agent.encoder_hash(), enc_before);
    }

    #[test]
    fn unlocked_encoder_moves_locked_does_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let buf = random_batch(&mut rng, 16);
        for (mode, changes) in [
            (FeatureMode::ShallowLocked, false),
            (FeatureMode::ShallowUnlocked, true),
            (FeatureMode::Baseline, true),
        ] {
            let mut agent = tiny_agent(mode);
            let h = agent.encoder_hash();
            ppo_update(&mut agent, &buf, &PpoConfig::default(), &mut rng::from_seed(2)).unwrap();
            assert_eq!(agent.encoder_hash() != h, changes, "{mode:?}");
        }
    }

    #[test]
    fn observation_is_nav_then_latent() {
        let agent = tiny_agent(FeatureMode::ShallowLocked);
        let nav = NavFeatures {
            u: 0.0,
            v: 0.0,
            r: 0.0,
            cte: 0.0,
            heading_error: 0.0,
            lookahead_heading_error: 0.0,
        };
        let zero = vec![0.0; SCAN_LEN];
        let obs = agent.observation(&nav, &zero).unwrap();
        assert_eq!(obs.len(), 18);
        assert!(obs[..6].iter().all(|&v| v == 0.0));
        let mu = agent.encoder.mu(&agent.store, &zero, 1).unwrap();
        assert_eq!(&obs[6..], mu.data());
        assert_eq!(agent.observation(&nav, &zero).unwrap(), obs);
    }

    #[test]
    fn modes_and_checkpoints() {
        let scale = NavScale::for_model(&ShipModel::cybership2_like());
        let cfg = PpoConfig::default();
        assert!(ActorCritic::new(FeatureMode::ShallowLocked, None, scale, &cfg, 0).is_err());
        let deep = VaeModel::new(VaeSpec::new(Arch::Deep, 12), 1.0, 0).unwrap();
        assert!(ActorCritic::new(FeatureMode::ShallowLocked, Some(&deep), scale, &cfg, 0).is_err());
        let agent = ActorCritic::new(FeatureMode::DeepLocked, Some(&deep), scale, &cfg, 0).unwrap();
        assert_eq!(agent.encoder_hash(), deep.store.hash_prefix("encoder."));
        for m in FeatureMode::ALL {
            assert_eq!(m.as_str().parse::<FeatureMode>().unwrap(), m);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("policy.ckpt");
        agent.save(&p, serde_json::json!({})).unwrap();
        let back = ActorCritic::load(&p).unwrap();
        assert_eq!(back.store.hash(), agent.store.hash());
        assert_eq!(back.mode, FeatureMode::DeepLocked);
    }

    fn quick_cfg(mode: FeatureMode) -> AgentTrainConfig {
        let mut cfg = AgentTrainConfig::new(mode);
        cfg.ppo.n_steps = 128;
        cfg.ppo.total_timesteps = 384;
        cfg.ppo.hidden = 16;
        cfg.env.max_steps = 60;
        cfg.env.scenario = ScenarioConfig {
            n_static: 2,
            n_dynamic: 2,
            ..ScenarioConfig::default()
        };
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn training_is_deterministic_and_locked_hash_is_invariant() {
        let model = ShipModel::cybership2_like();
        let vae = VaeModel::new(VaeSpec::new(Arch::Shallow, 12), 1.0, 1).unwrap();
        let cfg = quick_cfg(FeatureMode::ShallowLocked);
        let mut seen = 0;
        let a = train_agent(&cfg, Some(&vae), &model, |_, _| seen += 1).unwrap();
        let b = train_agent(&cfg, Some(&vae), &model, |_, _| {}).unwrap();
        assert_eq!(seen, 3);
        assert_eq!(a.episodes, b.episodes);
        assert_eq!(a.updates, b.updates);
        assert!(!a.episodes.is_empty());
        assert_eq!(a.encoder_hash_start, a.encoder_hash_end);
        assert!(a.updates.iter().all(|u| u.encoder_hash == a.encoder_hash_start));
        assert_eq!(a.encoder_hash_start, vae.store.hash_prefix("encoder."));

        let u = train_agent(&quick_cfg(FeatureMode::ShallowUnlocked), Some(&vae), &model, |_, _| {}).unwrap();
        assert_ne!(u.encoder_hash_start, u.encoder_hash_end);

        let csv = episodes_csv(&a.episodes);
        assert!(csv.starts_with("episode,steps,progress,mean_cte,cumulative_reward,collision,termination_reason\n"));
        assert_eq!(csv.lines().count(), a.episodes.len() + 1);
    }

    #[test]
    fn evaluation_report_and_degenerate_policy() {
        let model = ShipModel::cybership2_like();
        let mut agent = tiny_agent(FeatureMode::Baseline);
        let mut env_cfg = EnvConfig::default();
        env_cfg.max_steps = 50;
        let r1 = evaluate_agent(&agent, &model, &env_cfg, 6, 3).unwrap();
        let r2 = evaluate_agent(&agent, &model, &env_cfg, 6, 3).unwrap();
        assert_eq!(r1, r2);
        let csv = r1.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("progress_pct,"));

        // A policy whose mean action is saturated but never reaches the end
        // within a tiny horizon: every episode times out, none collides.
        let last_bias = agent.store.find("policy.l2.bias").unwrap();
        *agent.store.value_mut(last_bias) = Tensor::new(&[2], vec![-5.0, 0.0]).unwrap();
        env_cfg.max_steps = 5;
        env_cfg.scenario = ScenarioConfig::obstacle_free();
        let r = evaluate_agent(&agent, &model, &env_cfg, 4, 1).unwrap();
        assert!(r.episodes.iter().all(|e| e.termination == Termination::Timeout));
        assert_eq!(r.collision_rate.mean, 0.0);
        assert!(r.progress.mean < 5.0);
    }

    #[test]
    fn trajectory_dump() {
        let model = ShipModel::cybership2_like();
        let agent = tiny_agent(FeatureMode::Baseline);
        let mut env_cfg = EnvConfig::default();
        env_cfg.max_steps = 20;
        let mut env = Env::new(model, env_cfg).unwrap();
        let s = generate_scenario(3, ScenarioKind::Test, &ScenarioConfig::obstacle_free()).unwrap();
        let mut rows = Vec::new();
        let info = run_episode(&agent, &mut env, &s, Some(&mut rows)).unwrap();
        assert_eq!(rows.len(), info.t + 1);
        let csv = trajectory_csv(&rows);
        assert!(csv.starts_with("t,x_n,y_n,psi,u,v,r,reward\n"));
    }
}
