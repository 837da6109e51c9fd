//! Convolutional variational autoencoders over range scans.
//!
//! The encoder is a stack of circular 1-D convolutions (ReLU between layers)
//! followed by a linear head that yields `(mu, log_var)`. The decoder mirrors
//! it: a linear head back to the conv output width, then the transposed
//! convolutions of the encoder specs in reverse order, ending in a sigmoid.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{ScanDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{confidence_interval, Interval};
use crate::neural::{kaiming_uniform, AdamConfig, ConvSpec, Graph, PadMode, ParamId, ParamStore, Tensor, Var};
use crate::rng;

pub const SCAN_LEN: usize = 180;
/// Width of the final convolution output for a 180-ray scan.
pub const FEATURE_WIDTH: usize = 12;
/// Mean per-dimension KL (nats) above which a latent dimension counts as active.
pub const ACTIVE_KL_THRESHOLD: f64 = 0.01;

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Shallow,
    Deep,
}

impl Arch {
    pub fn conv_specs(self, mode: PadMode) -> Vec<ConvSpec> {
        let specs = match self {
            Arch::Shallow => vec![ConvSpec::circular(1, 1, 45, 15, 15)],
            Arch::Deep => vec![
                ConvSpec::circular(1, 3, 45, 15, 15),
                ConvSpec::circular(3, 2, 3, 1, 1),
                ConvSpec::circular(2, 1, 3, 1, 1),
            ],
        };
        specs.into_iter().map(|s| s.with_mode(mode)).collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Shallow => "shallow",
            Arch::Deep => "deep",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(Arch::Shallow),
            "deep" => Ok(Arch::Deep),
            other => Err(Error::Config(format!(
                "unknown architecture '{other}' (expected shallow or deep)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeSpec {
    pub arch: Arch,
    pub latent_dim: usize,
    pub padding_mode: PadMode,
}

impl VaeSpec {
    pub fn new(arch: Arch, latent_dim: usize) -> Self {
        Self {
            arch,
            latent_dim,
            padding_mode: PadMode::Circular,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }
}

fn conv_params(
    store: &mut ParamStore,
    prefix: &str,
    specs: &[ConvSpec],
    rng: &mut rng::Rng,
    transposed: bool,
) -> Result<Vec<(ParamId, ParamId)>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (fan_in, bias_len) = if transposed {
                (s.out_channels * s.kernel.div_ceil(s.stride), s.in_channels)
            } else {
                (s.in_channels * s.kernel, s.out_channels)
            };
            let w = store.add(
                format!("{prefix}conv{i}.weight"),
                kaiming_uniform(rng, &s.weight_shape(), fan_in),
            )?;
            let b = store.add(format!("{prefix}conv{i}.bias"), Tensor::zeros(&[bias_len]))?;
            Ok((w, b))
        })
        .collect()
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| Error::Config(format!("parameter '{name}' missing from store")))
}

fn bind_convs(store: &ParamStore, prefix: &str, n: usize) -> Result<Vec<(ParamId, ParamId)>> {
    (0..n)
        .map(|i| {
            Ok((
                lookup(store, &format!("{prefix}conv{i}.weight"))?,
                lookup(store, &format!("{prefix}conv{i}.bias"))?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Encoder {
    spec: VaeSpec,
    convs: Vec<(ParamId, ParamId, ConvSpec)>,
    head: (ParamId, ParamId),
}

impl Encoder {
    pub const PREFIX: &'static str = "encoder.";

    pub fn init(store: &mut ParamStore, spec: VaeSpec, rng: &mut rng::Rng) -> Result<Self> {
        spec.validate()?;
        let specs = spec.arch.conv_specs(spec.padding_mode);
        let ids = conv_params(store, Self::PREFIX, &specs, rng, false)?;
        let hw = store.add(
            format!("{}head.weight", Self::PREFIX),
            kaiming_uniform(rng, &[2 * spec.latent_dim, FEATURE_WIDTH], FEATURE_WIDTH),
        )?;
        let hb = store.add(
            format!("{}head.bias", Self::PREFIX),
            Tensor::zeros(&[2 * spec.latent_dim]),
        )?;
        Ok(Self::assemble(spec, specs, ids, (hw, hb)))
    }

    /// Re-attaches to parameters already present in `store`.
    pub fn bind(store: &ParamStore, spec: VaeSpec) -> Result<Self> {
        let specs = spec.arch.conv_specs(spec.padding_mode);
        let ids = bind_convs(store, Self::PREFIX, specs.len())?;
        let head = (
            lookup(store, &format!("{}head.weight", Self::PREFIX))?,
            lookup(store, &format!("{}head.bias", Self::PREFIX))?,
        );
        Ok(Self::assemble(spec, specs, ids, head))
    }

    fn assemble(spec: VaeSpec, specs: Vec<ConvSpec>, ids: Vec<(ParamId, ParamId)>, head: (ParamId, ParamId)) -> Self {
        let convs = ids.into_iter().zip(specs).map(|((w, b), s)| (w, b, s)).collect();
        Self { spec, convs, head }
    }

    pub fn spec(&self) -> VaeSpec {
        self.spec
    }

    /// Flattened conv features: `(B, 1, 180) -> (B, 12)`.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (w, b, s)) in self.convs.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            let (wv, bv) = (g.param(store, *w), g.param(store, *b));
            h = g.conv1d(h, wv, Some(bv), *s)?;
        }
        let batch = g.value(h).shape()[0];
        g.reshape(h, &[batch, FEATURE_WIDTH])
    }

    /// `(mu, log_var)`, each `(B, latent_dim)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let f = self.features(g, store, x)?;
        let (w, b) = (g.param(store, self.head.0), g.param(store, self.head.1));
        let out = g.linear(f, w, b)?;
        let l = self.spec.latent_dim;
        Ok((g.slice_cols(out, 0, l)?, g.slice_cols(out, l, 2 * l)?))
    }

    /// Encoder means for `batch` flattened scans.
    pub fn mu(&self, store: &ParamStore, scans: &[f64], batch: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(scan_tensor(scans, batch)?);
        let (mu, _) = self.forward(&mut g, store, x)?;
        Ok(g.value(mu).clone())
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    head: (ParamId, ParamId),
    convs: Vec<(ParamId, ParamId, ConvSpec)>,
}

impl Decoder {
    pub const PREFIX: &'static str = "decoder.";

    pub fn init(store: &mut ParamStore, spec: VaeSpec, rng: &mut rng::Rng) -> Result<Self> {
        spec.validate()?;
        let hw = store.add(
            format!("{}head.weight", Self::PREFIX),
            kaiming_uniform(rng, &[FEATURE_WIDTH, spec.latent_dim], spec.latent_dim),
        )?;
        let hb = store.add(format!("{}head.bias", Self::PREFIX), Tensor::zeros(&[FEATURE_WIDTH]))?;
        let specs = spec.arch.conv_specs(spec.padding_mode);
        let ids = conv_params(store, Self::PREFIX, &specs, rng, true)?;
        Ok(Self::assemble(specs, ids, (hw, hb)))
    }

    pub fn bind(store: &ParamStore, spec: VaeSpec) -> Result<Self> {
        let specs = spec.arch.conv_specs(spec.padding_mode);
        let head = (
            lookup(store, &format!("{}head.weight", Self::PREFIX))?,
            lookup(store, &format!("{}head.bias", Self::PREFIX))?,
        );
        let ids = bind_convs(store, Self::PREFIX, specs.len())?;
        Ok(Self::assemble(specs, ids, head))
    }

    fn assemble(specs: Vec<ConvSpec>, ids: Vec<(ParamId, ParamId)>, head: (ParamId, ParamId)) -> Self {
        let convs = ids.into_iter().zip(specs).map(|((w, b), s)| (w, b, s)).collect();
        Self { head, convs }
    }

    /// `(B, latent_dim) -> (B, 180)` with values in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let logits = self.logits(g, store, z)?;
        Ok(g.sigmoid(logits))
    }

    /// Pre-sigmoid decoder output.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.head.0), g.param(store, self.head.1));
        let h = g.linear(z, w, b)?;
        let batch = g.value(h).rows();
        let mut h = g.reshape(h, &[batch, 1, FEATURE_WIDTH])?;
        for (i, (w, b, s)) in self.convs.iter().enumerate().rev() {
            let (wv, bv) = (g.param(store, *w), g.param(store, *b));
            h = g.conv_transpose1d(h, wv, Some(bv), *s)?;
            if i > 0 {
                h = g.relu(h);
            }
        }
        let len = g.value(h).shape()[2];
        g.reshape(h, &[batch, len])
    }
}

fn scan_tensor(scans: &[f64], batch: usize) -> Result<Tensor> {
    if batch == 0 || scans.len() != batch * SCAN_LEN {
        return Err(Error::shape(
            "encode",
            format!("expected {batch} x {SCAN_LEN} values, got {}", scans.len()),
        ));
    }
    Tensor::new(&[batch, 1, SCAN_LEN], scans.to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentDist {
    pub mu: Tensor,
    pub log_var: Tensor,
}

/// `z = mu + exp(log_var / 2) * eps` with `eps ~ N(0, I)`.
pub fn reparameterize<R: Rng + ?Sized>(dist: &LatentDist, rng: &mut R) -> Tensor {
    let data = dist
        .mu
        .data()
        .iter()
        .zip(dist.log_var.data())
        .map(|(&m, &lv)| {
            let e: f64 = rng.sample(StandardNormal);
            m + (0.5 * lv).exp() * e
        })
        .collect();
    Tensor::new(dist.mu.shape(), data).expect("same shape as mu")
}

/// Batch-mean reconstruction and KL terms plus `total = bce + beta * kl`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboLoss {
    pub bce: f64,
    pub kl: f64,
    pub total: f64,
}

pub fn elbo_loss(x: &Tensor, x_hat: &Tensor, dist: &LatentDist, beta: f64) -> Result<ElboLoss> {
    let mut g = Graph::new();
    let (xv, xh) = (g.input(x.clone()), g.input(x_hat.clone()));
    let (m, lv) = (g.input(dist.mu.clone()), g.input(dist.log_var.clone()));
    let bce = g.bce(xh, xv)?;
    let kl = g.gaussian_kl(m, lv)?;
    let (bce, kl) = (g.mean(bce), g.mean(kl));
    let (bce, kl) = (g.value(bce).item(), g.value(kl).item());
    Ok(ElboLoss {
        bce,
        kl,
        total: bce + beta * kl,
    })
}

/// Graph nodes of one loss evaluation.
pub struct LossNodes {
    pub total: Var,
    pub bce: Var,
    pub kl: Var,
    pub mu: Var,
    pub log_var: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    pub spec: VaeSpec,
    pub beta: f64,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl VaeModel {
    pub fn new(spec: VaeSpec, beta: f64, seed: u64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be finite and non-negative, got {beta}"
            )));
        }
        let mut rng = rng::substream(seed, "vae/init", 0);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, spec, &mut rng)?;
        let decoder = Decoder::init(&mut store, spec, &mut rng)?;
        Ok(Self {
            spec,
            beta,
            store,
            encoder,
            decoder,
        })
    }

    /// Builds the loss on `x (B, 180)`. With `eps` the latent is sampled
    /// through the reparameterisation, otherwise `z = mu`. The KL node only
    /// joins the total when `beta > 0`.
    pub fn loss_graph(&self, g: &mut Graph, x: &Tensor, eps: Option<&Tensor>) -> Result<LossNodes> {
        let batch = x.rows();
        let xin = g.input(x.clone().reshape(&[batch, 1, SCAN_LEN])?);
        let (mu, log_var) = self.encoder.forward(g, &self.store, xin)?;
        let z = match eps {
            Some(e) => {
                let ev = g.input(e.clone());
                let half = g.scale(log_var, 0.5);
                let std = g.exp(half);
                let noise = g.mul(std, ev)?;
                g.add(mu, noise)?
            }
            None => mu,
        };
        let logits = self.decoder.logits(g, &self.store, z)?;
        let target = g.input(x.clone());
        let bce = g.bce_with_logits(logits, target)?;
        let bce = g.mean(bce);
        let kl = g.gaussian_kl(mu, log_var)?;
        let kl = g.mean(kl);
        let total = if self.beta > 0.0 {
            let weighted = g.scale(kl, self.beta);
            g.add(bce, weighted)?
        } else {
            bce
        };
        Ok(LossNodes {
            total,
            bce,
            kl,
            mu,
            log_var,
            logits,
        })
    }

    pub fn encode(&self, scans: &[f64], batch: usize) -> Result<LatentDist> {
        let mut g = Graph::new();
        let x = g.input(scan_tensor(scans, batch)?);
        let (mu, log_var) = self.encoder.forward(&mut g, &self.store, x)?;
        Ok(LatentDist {
            mu: g.value(mu).clone(),
            log_var: g.value(log_var).clone(),
        })
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.cols() != self.spec.latent_dim {
            return Err(Error::shape(
                "decode",
                format!("expected (B, {}), got {:?}", self.spec.latent_dim, z.shape()),
            ));
        }
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let out = self.decoder.forward(&mut g, &self.store, zv)?;
        Ok(g.value(out).clone())
    }

    /// Deterministic loss (`z = mu`) averaged over `n` flattened scans.
    pub fn evaluate(&self, scans: &[f64], n: usize) -> Result<ElboLoss> {
        let mut acc = ElboLoss::default();
        if n == 0 {
            return Ok(acc);
        }
        for start in (0..n).step_by(EVAL_CHUNK) {
            let b = EVAL_CHUNK.min(n - start);
            let x = Tensor::new(&[b, SCAN_LEN], scans[start * SCAN_LEN..(start + b) * SCAN_LEN].to_vec())?;
            let mut g = Graph::new();
            let nodes = self.loss_graph(&mut g, &x, None)?;
            let w = b as f64 / n as f64;
            acc.bce += w * g.value(nodes.bce).item();
            acc.kl += w * g.value(nodes.kl).item();
        }
        acc.total = acc.bce + self.beta * acc.kl;
        Ok(acc)
    }

    pub fn checkpoint_meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "vae",
            "spec": self.spec,
            "beta": self.beta,
        })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let mut meta = self.checkpoint_meta();
        meta["train"] = extra;
        self.store.save_checkpoint(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = ParamStore::load_checkpoint(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("vae") {
            return Err(Error::format(path, "checkpoint is not a VAE"));
        }
        let spec: VaeSpec = serde_json::from_value(meta["spec"].clone()).map_err(|e| Error::json(path, e))?;
        let beta = meta["beta"]
            .as_f64()
            .ok_or_else(|| Error::format(path, "checkpoint meta lacks beta"))?;
        let encoder = Encoder::bind(&store, spec)?;
        let decoder = Decoder::bind(&store, spec)?;
        Ok(Self {
            spec,
            beta,
            store,
            encoder,
            decoder,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub arch: Arch,
    pub latent_dim: usize,
    pub padding_mode: PadMode,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Shallow,
            latent_dim: FEATURE_WIDTH,
            padding_mode: PadMode::Circular,
            beta: 1.0,
            lr: 1e-3,
            batch_size: 64,
            epochs: 25,
            seed: 0,
        }
    }
}

impl VaeTrainConfig {
    pub fn spec(&self) -> VaeSpec {
        VaeSpec {
            arch: self.arch,
            latent_dim: self.latent_dim,
            padding_mode: self.padding_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec().validate()?;
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("lr, batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch (sampled latents); epoch 0 is the
    /// untrained model evaluated with `z = mu`.
    pub train: ElboLoss,
    pub val: ElboLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: VaeTrainConfig,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Trains on the training split and keeps the parameters with the lowest
/// validation loss.
pub fn train_vae(data: &ScanDataset, cfg: &VaeTrainConfig) -> Result<(VaeModel, TrainReport)> {
    cfg.validate()?;
    if data.cols() != SCAN_LEN {
        return Err(Error::shape(
            "train_vae",
            format!("dataset has {} columns, expected {SCAN_LEN}", data.cols()),
        ));
    }
    let train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    if train_idx.is_empty() {
        return Err(Error::Config("dataset has no training rows".into()));
    }
    let train = data.gather(&train_idx);
    let val = data.gather(&val_idx);
    let mut model = VaeModel::new(cfg.spec(), cfg.beta, cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);

    let score = |m: &VaeModel| -> Result<ElboLoss> {
        if val_idx.is_empty() {
            m.evaluate(&train, train_idx.len())
        } else {
            m.evaluate(&val, val_idx.len())
        }
    };
    let init_val = score(&model)?;
    let mut curve = vec![EpochRecord {
        epoch: 0,
        train: model.evaluate(&train, train_idx.len())?,
        val: init_val,
    }];
    let mut best = (0, init_val.total, model.store.clone());
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = rng::substream(cfg.seed, "vae/shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut acc = ElboLoss::default();
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let rows: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| train[i * SCAN_LEN..(i + 1) * SCAN_LEN].iter().copied())
                .collect();
            let x = Tensor::new(&[b, SCAN_LEN], rows)?;
            let mut eps_rng = rng::substream(cfg.seed, "vae/eps", step);
            let eps = Tensor::new(
                &[b, cfg.latent_dim],
                (0..b * cfg.latent_dim)
                    .map(|_| eps_rng.sample(StandardNormal))
                    .collect(),
            )?;
            let mut g = Graph::new();
            let nodes = model.loss_graph(&mut g, &x, Some(&eps))?;
            let total = g.value(nodes.total).item();
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("VAE epoch {epoch}, step {step}"),
                });
            }
            model.store.zero_grad();
            g.backward(nodes.total, &mut model.store)?;
            model.store.adam_step(&adam);
            let w = b as f64 / order.len() as f64;
            acc.bce += w * g.value(nodes.bce).item();
            acc.kl += w * g.value(nodes.kl).item();
            acc.total += w * total;
            step += 1;
        }
        let val = score(&model)?;
        log::debug!("vae epoch {epoch}: train {:.4} val {:.4}", acc.total, val.total);
        if val.total < best.1 {
            best = (epoch, val.total, model.store.clone());
        }
        curve.push(EpochRecord { epoch, train: acc, val });
    }
    model.store = best.2;
    let report = TrainReport {
        config: *cfg,
        curve,
        best_epoch: best.0,
        best_val: best.1,
    };
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Aggregates per-seed test losses: mean, sample std and 95% normal CI.
pub fn evaluate_vae(per_seed_loss: &[f64]) -> Result<SeedSummary> {
    let Interval { n, mean, std, lo, hi } = confidence_interval(per_seed_loss)?;
    Ok(SeedSummary {
        n,
        mean,
        std,
        ci_lo: lo,
        ci_hi: hi,
    })
}

/// Test-split loss of each model.
pub fn test_losses(models: &[VaeModel], data: &ScanDataset) -> Result<Vec<ElboLoss>> {
    let idx = data.indices(Split::Test);
    let rows = data.gather(&idx);
    models.iter().map(|m| m.evaluate(&rows, idx.len())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDiagnostics {
    pub per_dim_kl: Vec<f64>,
    pub mu_variance: Vec<f64>,
    pub active_dims: usize,
}

pub fn latent_diagnostics(model: &VaeModel, scans: &[f64], n: usize) -> Result<LatentDiagnostics> {
    let l = model.spec.latent_dim;
    let mut kl = vec![0.0; l];
    let mut mus: Vec<Vec<f64>> = vec![Vec::with_capacity(n); l];
    for start in (0..n).step_by(EVAL_CHUNK) {
        let b = EVAL_CHUNK.min(n - start);
        let d = model.encode(&scans[start * SCAN_LEN..(start + b) * SCAN_LEN], b)?;
        for i in 0..b {
            for j in 0..l {
                let (m, lv) = (d.mu.row(i)[j], d.log_var.row(i)[j]);
                kl[j] += 0.5 * (m * m + lv.exp() - 1.0 - lv);
                mus[j].push(m);
            }
        }
    }
    let per_dim_kl: Vec<f64> = kl.iter().map(|k| k / n.max(1) as f64).collect();
    let mu_variance = mus
        .iter()
        .map(|v| {
            let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len().max(1) as f64
        })
        .collect();
    let active_dims = per_dim_kl.iter().filter(|&&k| k > ACTIVE_KL_THRESHOLD).count();
    Ok(LatentDiagnostics {
        per_dim_kl,
        mu_variance,
        active_dims,
    })
}

/// CSV with one `(mu, log_var)` row per input scan.
pub fn export_latents(model: &VaeModel, scans: &[f64], n: usize, out: &Path) -> Result<()> {
    let l = model.spec.latent_dim;
    let mut text = String::new();
    let header: Vec<String> = (0..l)
        .map(|j| format!("mu{j}"))
        .chain((0..l).map(|j| format!("log_var{j}")))
        .collect();
    text.push_str(&header.join(","));
    text.push('\n');
    for start in (0..n).step_by(EVAL_CHUNK) {
        let b = EVAL_CHUNK.min(n - start);
        let d = model.encode(&scans[start * SCAN_LEN..(start + b) * SCAN_LEN], b)?;
        for i in 0..b {
            let vals: Vec<String> =
                d.mu.row(i)
                    .iter()
                    .chain(d.log_var.row(i))
                    .map(|v| v.to_string())
                    .collect();
            let _ = writeln!(text, "{}", vals.join(","));
        }
    }
    std::fs::write(out, text).map_err(|e| Error::io(out, e))
}
