//! Scan dataset: pilot recordings, synthetic scenes, rotation augmentation,
//! splits and training noise.
//!
//! File layout: 8-byte magic, `u32` version, `u32` rows, `u32` cols, then
//! `rows * cols` little-endian `f32` values. Metadata, splits and per-row
//! source categories live in a JSON sidecar at `<path>.json`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path as FsPath, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ShipModel, VesselState};
use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::guidance::Point;
use crate::rng;
use crate::world::{
    generate_scenario, positive_poisson, scan, Kinematics, Obstacle, ScenarioConfig, ScenarioKind, SensorConfig,
};

pub const DATASET_MAGIC: &[u8; 8] = b"ASVLSCAN";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Pilot,
    Mixed,
    DynamicOnly,
    StaticOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Mixed,
    DynamicOnly,
    StaticOnly,
}

impl SceneKind {
    fn counts(self) -> (usize, usize) {
        match self {
            SceneKind::Mixed => (3, 2),
            SceneKind::DynamicOnly => (0, 5),
            SceneKind::StaticOnly => (5, 0),
        }
    }

    fn category(self) -> Category {
        match self {
            SceneKind::Mixed => Category::Mixed,
            SceneKind::DynamicOnly => Category::DynamicOnly,
            SceneKind::StaticOnly => Category::StaticOnly,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            SceneKind::Mixed => "synth/mixed",
            SceneKind::DynamicOnly => "synth/dynamic",
            SceneKind::StaticOnly => "synth/static",
        }
    }
}

/// Procedural stand-in for manual navigation: constant thrust plus a
/// proportional controller on the heading error toward the look-ahead point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    pub surge: f64,
    pub heading_gain: f64,
    pub max_scans_per_scenario: usize,
    pub scenario: ScenarioConfig,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            surge: 0.8,
            heading_gain: 2.0,
            max_scans_per_scenario: 500,
            scenario: ScenarioConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_pilot: usize,
    pub n_synth_mixed: usize,
    pub n_synth_dyn: usize,
    pub n_synth_stat: usize,
    pub rotation_copies: usize,
    pub noise_var: f64,
    pub clip_noise: bool,
    pub poisson_mean_static: f64,
    pub poisson_mean_dynamic: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub sensor: SensorConfig,
    pub pilot: PilotConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_pilot: 10_000,
            n_synth_mixed: 5_000,
            n_synth_dyn: 2_500,
            n_synth_stat: 2_500,
            rotation_copies: 2,
            noise_var: 0.007,
            clip_noise: true,
            poisson_mean_static: 25.0,
            poisson_mean_dynamic: 10.0,
            test_fraction: 0.3,
            val_fraction: 0.2,
            seed: 0,
            sensor: SensorConfig::default(),
            pilot: PilotConfig::default(),
        }
    }
}

impl DatasetConfig {
    /// Same proportions at one tenth of the default size.
    pub fn desk() -> Self {
        Self {
            n_pilot: 1_000,
            n_synth_mixed: 500,
            n_synth_dyn: 250,
            n_synth_stat: 250,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        if !(self.noise_var >= 0.0) {
            return Err(Error::Config(format!(
                "noise_var must be non-negative, got {}",
                self.noise_var
            )));
        }
        if !(self.poisson_mean_static > 0.0 && self.poisson_mean_dynamic > 0.0) {
            return Err(Error::Config("Poisson means must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("split fractions must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn total_rows(&self) -> usize {
        (self.n_pilot + self.n_synth_mixed + self.n_synth_dyn + self.n_synth_stat) * (1 + self.rotation_copies)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub config: DatasetConfig,
    pub counts: CategoryCounts,
    pub pilot_scenarios: usize,
    /// Statistics of the added noise before clipping.
    pub noise: Option<NoiseStats>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub pilot: usize,
    pub mixed: usize,
    pub dynamic_only: usize,
    pub static_only: usize,
}

impl CategoryCounts {
    pub fn of(categories: &[Category]) -> Self {
        let mut c = Self::default();
        for cat in categories {
            match cat {
                Category::Pilot => c.pilot += 1,
                Category::Mixed => c.mixed += 1,
                Category::DynamicOnly => c.dynamic_only += 1,
                Category::StaticOnly => c.static_only += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    rows: usize,
    cols: usize,
    meta: DatasetMeta,
    split: Vec<Split>,
    category: Vec<Category>,
}

/// `rows x cols` scan matrix stored at single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanDataset {
    cols: usize,
    samples: Vec<f32>,
    pub split: Vec<Split>,
    pub category: Vec<Category>,
    pub meta: DatasetMeta,
}

impl ScanDataset {
    pub fn rows(&self) -> usize {
        self.split.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.samples[i * self.cols..(i + 1) * self.cols]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.rows()).filter(|&i| self.split[i] == split).collect()
    }

    /// Rows as `f64`, flattened.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .flat_map(|&i| self.row(i).iter().map(|&v| v as f64))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(20 + self.samples.len() * 4);
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.samples {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))?;
        let side = Sidecar {
            rows: self.rows(),
            cols: self.cols,
            meta: self.meta.clone(),
            split: self.split.clone(),
            category: self.category.clone(),
        };
        let side_path = sidecar_path(path);
        let text = serde_json::to_string(&side).map_err(|e| Error::json(&side_path, e))?;
        std::fs::write(&side_path, text).map_err(|e| Error::io(&side_path, e))
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 {
            return Err(Error::format(path, "file is truncated (header incomplete)"));
        }
        if &bytes[..8] != DATASET_MAGIC {
            return Err(Error::format(path, "bad magic; not a scan dataset"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(8);
        if version != DATASET_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let (rows, cols) = (word(12) as usize, word(16) as usize);
        let expected = 20 + rows * cols * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!("expected {expected} bytes for {rows}x{cols}, found {}", bytes.len()),
            ));
        }
        let samples = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let side_path = sidecar_path(path);
        let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&side_path, e))?;
        if side.rows != rows || side.cols != cols || side.split.len() != rows || side.category.len() != rows {
            return Err(Error::format(&side_path, "sidecar does not match the binary shape"));
        }
        Ok(Self {
            cols,
            samples,
            split: side.split,
            category: side.category,
            meta: side.meta,
        })
    }

    /// Plain CSV of the scan values, one row per sample.
    pub fn export_csv(&self, path: impl AsRef<FsPath>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str("split,category");
        for k in 0..self.cols {
            out.push_str(&format!(",x{k}"));
        }
        out.push('\n');
        for i in 0..self.rows() {
            out.push_str(&format!("{:?},{:?}", self.split[i], self.category[i]).to_lowercase());
            for v in self.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn sidecar_path(path: &FsPath) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Records one scan per environment step while the pilot drives random
/// scenarios; returns the scans and the number of scenarios used.
pub fn generate_pilot_scans(
    seed: u64,
    n: usize,
    pilot: &PilotConfig,
    sensor: &SensorConfig,
    model: &ShipModel,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let env_cfg = EnvConfig {
        sensor: *sensor,
        scenario: pilot.scenario,
        ..EnvConfig::default()
    };
    let run = |i: usize| -> Result<Vec<Vec<f64>>> {
        let scenario = generate_scenario(
            rng::derive_seed(seed, "pilot", i as u64),
            ScenarioKind::Train,
            &pilot.scenario,
        )?;
        let mut env = Env::new(model.clone(), env_cfg)?;
        env.reset(&scenario)?;
        let mut scans = vec![env.scan().values().to_vec()];
        while !env.is_done() && scans.len() < pilot.max_scans_per_scenario {
            let psi = env.nav().expect("nav after reset").heading_error;
            env.step([pilot.surge, (pilot.heading_gain * psi).clamp(-1.0, 1.0)])?;
            scans.push(env.scan().values().to_vec());
        }
        Ok(scans)
    };
    let batch = rayon::current_num_threads().max(1) * 2;
    let mut out = Vec::with_capacity(n);
    let mut scenarios = 0;
    while out.len() < n {
        let chunk: Vec<Vec<Vec<f64>>> = (scenarios..scenarios + batch)
            .into_par_iter()
            .map(run)
            .collect::<Result<_>>()?;
        for scans in chunk {
            if out.len() >= n {
                break;
            }
            scenarios += 1;
            let take = (n - out.len()).min(scans.len());
            out.extend(scans.into_iter().take(take));
        }
    }
    Ok((out, scenarios))
}

/// Frozen scene around a vessel at the origin heading north; positions are
/// uniform over the square of side `2 * x_max`. Obstacles that would contain
/// the vessel are redrawn.
pub fn synthetic_obstacles<R: Rng + ?Sized>(
    rng: &mut R,
    kind: SceneKind,
    sensor: &SensorConfig,
    mean_static: f64,
    mean_dynamic: f64,
) -> Result<Vec<Obstacle>> {
    let (n_static, n_dynamic) = kind.counts();
    let half = sensor.x_max;
    let origin = Point::zeros();
    let mut obstacles = Vec::with_capacity(n_static + n_dynamic);
    for _ in 0..n_static {
        let radius = positive_poisson(rng, mean_static);
        loop {
            let c = Point::new(rng.random_range(-half..half), rng.random_range(-half..half));
            let o = Obstacle::circle(c, radius)?;
            if !o.contains(&origin) {
                obstacles.push(o);
                break;
            }
        }
    }
    for _ in 0..n_dynamic {
        let size = positive_poisson(rng, mean_dynamic);
        let heading = rng.random_range(0.0..2.0 * PI);
        loop {
            let c = Point::new(rng.random_range(-half..half), rng.random_range(-half..half));
            let o = Obstacle::rectangle(
                c,
                size,
                size / 2.0,
                heading,
                Kinematics::Dynamic { speed: 0.0, heading },
            )?;
            if !o.contains(&origin) {
                obstacles.push(o);
                break;
            }
        }
    }
    Ok(obstacles)
}

pub fn generate_synthetic_scene<R: Rng + ?Sized>(
    rng: &mut R,
    kind: SceneKind,
    sensor: &SensorConfig,
    mean_static: f64,
    mean_dynamic: f64,
) -> Result<Vec<f64>> {
    let obstacles = synthetic_obstacles(rng, kind, sensor, mean_static, mean_dynamic)?;
    Ok(scan(&VesselState::at_rest(0.0, 0.0, 0.0), &obstacles, sensor).into_values())
}

fn synthetic_block(cfg: &DatasetConfig, kind: SceneKind, n: usize) -> Result<Vec<Vec<f64>>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::substream(cfg.seed, kind.tag(), i as u64);
            generate_synthetic_scene(
                &mut r,
                kind,
                &cfg.sensor,
                cfg.poisson_mean_static,
                cfg.poisson_mean_dynamic,
            )
        })
        .collect()
}

/// Keeps the originals and appends `copies` blocks of circularly shifted
/// duplicates, each shift uniform in `1..len`.
pub fn augment_rotations<R: Rng + ?Sized, T: Clone>(rows: &[Vec<T>], copies: usize, rng: &mut R) -> Vec<Vec<T>> {
    let mut out = rows.to_vec();
    for _ in 0..copies {
        for r in rows {
            let len = r.len();
            let mut shifted = r.clone();
            if len > 1 {
                shifted.rotate_right(rng.random_range(1..len));
            }
            out.push(shifted);
        }
    }
    out
}

/// Random split: `round(test_fraction * n)` test rows, then
/// `round(val_fraction * rest)` validation rows, the remainder training.
pub fn split_dataset<R: Rng + ?Sized>(n: usize, test_fraction: f64, val_fraction: f64, rng: &mut R) -> Vec<Split> {
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_val = (val_fraction * (n - n_test) as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut split = vec![Split::Train; n];
    for (k, &i) in order.iter().enumerate() {
        if k < n_test {
            split[i] = Split::Test;
        } else if k < n_test + n_val {
            split[i] = Split::Val;
        }
    }
    split
}

/// Adds i.i.d. `N(0, noise_var)` to every element of the selected rows,
/// optionally clipping to `[0, 1]`. Returns pre-clip noise statistics.
pub fn add_noise(
    samples: &mut [f32],
    cols: usize,
    rows: &[usize],
    noise_var: f64,
    clip: bool,
    seed: u64,
) -> NoiseStats {
    if noise_var == 0.0 || rows.is_empty() {
        return NoiseStats {
            count: 0,
            mean: 0.0,
            std: 0.0,
        };
    }
    let normal = Normal::new(0.0, noise_var.sqrt()).expect("finite std");
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for &i in rows {
        let mut r = rng::substream(seed, "noise", i as u64);
        for v in &mut samples[i * cols..(i + 1) * cols] {
            let e: f64 = normal.sample(&mut r);
            sum += e;
            sum_sq += e * e;
            let noisy = *v as f64 + e;
            *v = if clip { noisy.clamp(0.0, 1.0) } else { noisy } as f32;
        }
    }
    let count = rows.len() * cols;
    let mean = sum / count as f64;
    let var = (sum_sq - count as f64 * mean * mean) / (count as f64 - 1.0).max(1.0);
    NoiseStats {
        count,
        mean,
        std: var.max(0.0).sqrt(),
    }
}

/// Full pipeline: generation, augmentation, split and training noise.
pub fn build_dataset(cfg: &DatasetConfig, model: &ShipModel) -> Result<ScanDataset> {
    cfg.validate()?;
    let (pilot, pilot_scenarios) = if cfg.n_pilot > 0 {
        generate_pilot_scans(cfg.seed, cfg.n_pilot, &cfg.pilot, &cfg.sensor, model)?
    } else {
        (Vec::new(), 0)
    };
    let mut originals = pilot;
    let mut categories = vec![Category::Pilot; originals.len()];
    for (kind, n) in [
        (SceneKind::Mixed, cfg.n_synth_mixed),
        (SceneKind::DynamicOnly, cfg.n_synth_dyn),
        (SceneKind::StaticOnly, cfg.n_synth_stat),
    ] {
        originals.extend(synthetic_block(cfg, kind, n)?);
        categories.extend(std::iter::repeat_n(kind.category(), n));
    }
    let mut rot_rng = rng::substream(cfg.seed, "rotation", 0);
    let rows = augment_rotations(&originals, cfg.rotation_copies, &mut rot_rng);
    let base = categories.clone();
    for _ in 0..cfg.rotation_copies {
        categories.extend_from_slice(&base);
    }
    let cols = cfg.sensor.n_rays;
    let mut samples: Vec<f32> = rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
    let n = rows.len();
    let mut split_rng = rng::substream(cfg.seed, "split", 0);
    let split = split_dataset(n, cfg.test_fraction, cfg.val_fraction, &mut split_rng);
    let train: Vec<usize> = (0..n).filter(|&i| split[i] == Split::Train).collect();
    let noise = add_noise(&mut samples, cols, &train, cfg.noise_var, cfg.clip_noise, cfg.seed);
    let meta = DatasetMeta {
        seed: cfg.seed,
        config: *cfg,
        counts: CategoryCounts::of(&categories),
        pilot_scenarios,
        noise: (noise.count > 0).then_some(noise),
    };
    Ok(ScanDataset {
        cols,
        samples,
        split,
        category: categories,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DatasetConfig {
        DatasetConfig {
            n_pilot: 300,
            n_synth_mixed: 40,
            n_synth_dyn: 20,
            n_synth_stat: 20,
            seed: 9,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn pilot_scans_are_deterministic_and_informative() {
        let m = ShipModel::cybership2_like();
        let cfg = PilotConfig::default();
        let s = SensorConfig::default();
        let (a, na) = generate_pilot_scans(4, 1200, &cfg, &s, &m).unwrap();
        let (b, _) = generate_pilot_scans(4, 1200, &cfg, &s, &m).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1200);
        assert!(na >= 1200 / 500);
        assert!(a.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        let zero = a.iter().filter(|r| r.iter().all(|&v| v == 0.0)).count();
        assert!((zero as f64) < 0.5 * a.len() as f64, "{zero} all-zero scans");
    }

    #[test]
    fn synthetic_scene_contents() {
        let s = SensorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = synthetic_obstacles(&mut rng, SceneKind::StaticOnly, &s, 25.0, 10.0).unwrap();
        assert_eq!(obs.len(), 5);
        assert!(obs.iter().all(|o| !o.is_dynamic()));
        let obs = synthetic_obstacles(&mut rng, SceneKind::DynamicOnly, &s, 25.0, 10.0).unwrap();
        assert_eq!(obs.iter().filter(|o| o.is_dynamic()).count(), 5);
        let obs = synthetic_obstacles(&mut rng, SceneKind::Mixed, &s, 25.0, 10.0).unwrap();
        assert_eq!(obs.iter().filter(|o| o.is_dynamic()).count(), 2);
        assert_eq!(obs.len(), 5);
    }

    #[test]
    fn static_radius_mean_matches_poisson() {
        let s = SensorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut radii = Vec::new();
        for _ in 0..10_000 {
            for o in synthetic_obstacles(&mut rng, SceneKind::Mixed, &s, 25.0, 10.0).unwrap() {
                if let crate::world::Shape::Circle { radius, .. } = o.shape {
                    radii.push(radius);
                }
            }
        }
        let mean = radii.iter().sum::<f64>() / radii.len() as f64;
        assert!((24.0..=26.0).contains(&mean), "{mean}");
    }

    #[test]
    fn distant_obstacles_give_zero_scan() {
        let s = SensorConfig::default();
        let far = vec![Obstacle::circle(Point::new(400.0, 0.0), 20.0).unwrap()];
        let v = scan(&VesselState::at_rest(0.0, 0.0, 0.0), &far, &s);
        assert!(v.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rotations_are_circular_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| (0..180).map(|k| ((i * 7 + k * 13) % 97) as f64).collect())
            .collect();
        assert_eq!(augment_rotations(&rows, 0, &mut rng), rows);
        let out = augment_rotations(&rows, 2, &mut rng);
        assert_eq!(out.len(), 150);
        assert_eq!(&out[..50], &rows[..]);
        for (k, r) in out[50..].iter().enumerate() {
            let src = &rows[k % 50];
            let shift = (1..180).find(|&s| {
                let mut c = src.clone();
                c.rotate_right(s);
                &c == r
            });
            assert!(shift.is_some());
        }
    }

    #[test]
    fn split_sizes_and_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = split_dataset(60_000, 0.3, 0.2, &mut rng);
        let count = |k| s.iter().filter(|&&x| x == k).count();
        assert_eq!(
            (count(Split::Test), count(Split::Val), count(Split::Train)),
            (18_000, 8_400, 33_600)
        );
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(split_dataset(60_000, 0.3, 0.2, &mut rng2), s);
    }

    #[test]
    fn noise_statistics_and_clipping() {
        let cols = 180;
        let mut x = vec![0.5f32; 2000 * cols];
        let rows: Vec<usize> = (0..1000).collect();
        let stats = add_noise(&mut x, cols, &rows, 0.007, true, 1);
        assert!((stats.std / 0.007f64.sqrt() - 1.0).abs() < 0.02);
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(x[1000 * cols..].iter().all(|&v| v == 0.5));
        let mut y = vec![0.5f32; 10];
        add_noise(&mut y, 5, &[0, 1], 0.0, true, 1);
        assert!(y.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn build_and_round_trip() {
        let cfg = tiny();
        let m = ShipModel::cybership2_like();
        let d = build_dataset(&cfg, &m).unwrap();
        assert_eq!(d.rows(), cfg.total_rows());
        assert_eq!(d.meta.counts.pilot, 900);
        assert_eq!(d.meta.counts.mixed, 120);
        // Validation and test rows are noise-free copies of the clean generation.
        let mut clean_cfg = cfg;
        clean_cfg.noise_var = 0.0;
        let clean = build_dataset(&clean_cfg, &m).unwrap();
        for i in 0..d.rows() {
            if d.split[i] != Split::Train {
                assert_eq!(d.row(i), clean.row(i));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        d.save(&p).unwrap();
        let back = ScanDataset::load(&p).unwrap();
        assert_eq!(back, d);

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(ScanDataset::load(&p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[3] ^= 0xff;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(ScanDataset::load(&p), Err(Error::Format { .. })));
    }
}
