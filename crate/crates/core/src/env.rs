//! Path-following environment with obstacles.
//!
//! One environment step holds the commanded forces for `substeps` integrator
//! steps, then moves the obstacles, scans and scores the new state.

use serde::{Deserialize, Serialize};

use crate::dynamics::{step as integrate, ControlInput, ShipModel, SimConfig, VesselState};
use crate::error::{Error, Result};
use crate::guidance::{closest_param, nav_features, progress, GuidanceConfig, NavFeatures, Path};
use crate::world::{advance_obstacles, collision_check, scan, Obstacle, Scan, Scenario, ScenarioConfig, SensorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub r_collision: f64,
    pub r_exists: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            r_collision: -1000.0,
            r_exists: 1.0,
        }
    }
}

/// Path-following reward term in `[0, 2]`. Reverse speed scores zero and
/// speeds above `u_max` score as `u_max`.
pub fn path_reward(nav: &NavFeatures, u_max: f64) -> f64 {
    let speed = (nav.u / u_max).clamp(0.0, 1.0);
    speed * (1.0 + nav.heading_error.cos()) / (1.0 + nav.cte.abs())
}

pub fn reward(nav: &NavFeatures, collided: bool, u_max: f64, cfg: &RewardConfig) -> f64 {
    if collided {
        cfg.r_collision
    } else {
        path_reward(nav, u_max) - cfg.r_exists
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub sim: SimConfig,
    /// Integrator steps per environment step.
    pub substeps: usize,
    pub sensor: SensorConfig,
    pub guidance: GuidanceConfig,
    pub reward: RewardConfig,
    pub max_steps: usize,
    /// Episode ends once progress exceeds this fraction.
    pub progress_done: f64,
    /// Episode ends once the cumulative reward drops below this value.
    pub min_cumulative_reward: f64,
    pub scenario: ScenarioConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            substeps: 10,
            sensor: SensorConfig::default(),
            guidance: GuidanceConfig::default(),
            reward: RewardConfig::default(),
            max_steps: 2000,
            progress_done: 0.99,
            min_cumulative_reward: -2000.0,
            scenario: ScenarioConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.sensor.validate()?;
        self.guidance.validate()?;
        if self.substeps == 0 || self.max_steps == 0 {
            return Err(Error::Config("substeps and max_steps must be positive".into()));
        }
        if !(self.reward.r_collision < 0.0 && self.reward.r_exists >= 0.0) {
            return Err(Error::Config(
                "r_collision must be negative and r_exists non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Seconds of simulated time per environment step.
    pub fn step_seconds(&self) -> f64 {
        self.sim.dt * self.substeps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Collision,
    ReachedEnd,
    Progress,
    Timeout,
    Divergence,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Collision => "collision",
            Termination::ReachedEnd => "reached_end",
            Termination::Progress => "progress",
            Termination::Timeout => "timeout",
            Termination::Divergence => "divergence",
        }
    }

    pub fn is_success(self) -> bool {
        matches!(self, Termination::ReachedEnd | Termination::Progress)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub progress: f64,
    pub cte: f64,
    pub collided: bool,
    pub t: usize,
    pub cumulative_reward: f64,
    pub termination: Option<Termination>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

pub struct Env {
    model: ShipModel,
    cfg: EnvConfig,
    path: Option<Path>,
    obstacles: Vec<Obstacle>,
    state: VesselState,
    omega: f64,
    t: usize,
    cumulative: f64,
    cte_sum: f64,
    done: bool,
    scan: Scan,
    nav: Option<NavFeatures>,
    info: Option<StepInfo>,
}

impl Env {
    pub fn new(model: ShipModel, cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.sensor.n_rays;
        Ok(Self {
            model,
            cfg,
            path: None,
            obstacles: Vec::new(),
            state: VesselState::at_rest(0.0, 0.0, 0.0),
            omega: 0.0,
            t: 0,
            cumulative: 0.0,
            cte_sum: 0.0,
            done: true,
            scan: Scan::zeros(n),
            nav: None,
            info: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ShipModel {
        &self.model
    }

    /// Starts an episode. The returned info carries a termination if the
    /// start state already satisfies one.
    pub fn reset(&mut self, scenario: &Scenario) -> Result<StepInfo> {
        let path = scenario.path.clone();
        self.state = scenario.vessel_start;
        self.obstacles = scenario.obstacles.clone();
        self.omega = closest_param(&path, &self.state.position(), None);
        self.path = Some(path);
        self.t = 0;
        self.cumulative = 0.0;
        self.cte_sum = 0.0;
        self.done = false;
        self.observe();
        let collided = collision_check(&self.state, &self.obstacles, self.model.hull_radius);
        let info = self.finish_info(collided);
        self.done = info.termination.is_some();
        Ok(info)
    }

    pub fn step(&mut self, action: [f64; 2]) -> Result<Transition> {
        if self.done {
            return Err(Error::Usage(
                "step called on a finished episode; call reset first".into(),
            ));
        }
        let f = ControlInput::from_action(action, &self.model);
        for _ in 0..self.cfg.substeps {
            self.state = integrate(&self.state, f, &self.model, &self.cfg.sim)?;
        }
        advance_obstacles(&mut self.obstacles, self.cfg.step_seconds());
        let path = self.path.as_ref().expect("reset sets the path");
        self.omega = closest_param(path, &self.state.position(), Some(self.omega));
        self.t += 1;
        self.observe();
        let nav = self.nav.expect("observe sets nav");
        let collided = collision_check(&self.state, &self.obstacles, self.model.hull_radius);
        let r = reward(&nav, collided, self.model.u_max, &self.cfg.reward);
        self.cumulative += r;
        self.cte_sum += nav.cte.abs();
        let info = self.finish_info(collided);
        self.done = info.termination.is_some();
        Ok(Transition {
            reward: r,
            done: self.done,
            info,
        })
    }

    fn observe(&mut self) {
        let path = self.path.as_ref().expect("reset sets the path");
        self.scan = scan(&self.state, &self.obstacles, &self.cfg.sensor);
        self.nav = Some(nav_features(path, &self.state, self.omega, &self.cfg.guidance));
    }

    fn finish_info(&mut self, collided: bool) -> StepInfo {
        let path = self.path.as_ref().expect("reset sets the path");
        let prog = progress(path, self.omega);
        let at_end = (self.state.position() - path.point(path.length())).norm() <= self.cfg.guidance.end_radius;
        let termination = if collided {
            Some(Termination::Collision)
        } else if at_end {
            Some(Termination::ReachedEnd)
        } else if prog > self.cfg.progress_done {
            Some(Termination::Progress)
        } else if self.t >= self.cfg.max_steps {
            Some(Termination::Timeout)
        } else if self.cumulative < self.cfg.min_cumulative_reward {
            Some(Termination::Divergence)
        } else {
            None
        };
        let info = StepInfo {
            progress: prog,
            cte: self.nav.map_or(0.0, |n| n.cte),
            collided,
            t: self.t,
            cumulative_reward: self.cumulative,
            termination,
        };
        self.info = Some(info);
        info
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn state(&self) -> &VesselState {
        &self.state
    }

    pub fn scan(&self) -> &Scan {
        &self.scan
    }

    pub fn nav(&self) -> Option<&NavFeatures> {
        self.nav.as_ref()
    }

    pub fn info(&self) -> Option<&StepInfo> {
        self.info.as_ref()
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_ref()
    }

    /// Mean cross-track error over the steps taken so far.
    pub fn mean_cte(&self) -> f64 {
        if self.t == 0 {
            self.nav.map_or(0.0, |n| n.cte.abs())
        } else {
            self.cte_sum / self.t as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{build_path, Point};
    use crate::world::{generate_scenario, Obstacle, ScenarioKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nav(u: f64, psi_err: f64, cte: f64) -> NavFeatures {
        NavFeatures {
            u,
            v: 0.0,
            r: 0.0,
            cte,
            heading_error: psi_err,
            lookahead_heading_error: 0.0,
        }
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(reward(&nav(2.0, 0.0, 0.0), true, 2.0, &cfg), -1000.0);
        assert!((reward(&nav(2.0, 0.0, 0.0), false, 2.0, &cfg) - 1.0).abs() < 1e-15);
        assert_eq!(reward(&nav(0.0, 0.3, 7.0), false, 2.0, &cfg), -1.0);
    }

    #[test]
    fn path_reward_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1_000_000 {
            let n = nav(
                rng.random_range(-3.0..3.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-500.0..500.0),
            );
            let r = path_reward(&n, 2.0);
            assert!((0.0..=2.0).contains(&r));
        }
    }

    fn straight_scenario(start: Point, obstacles: Vec<Obstacle>) -> Scenario {
        Scenario {
            path: build_path(&[Point::new(0.0, 0.0), Point::new(300.0, 0.0)]).unwrap(),
            obstacles,
            vessel_start: VesselState::at_rest(start.x, start.y, 0.0),
            seed: 0,
        }
    }

    fn env() -> Env {
        Env::new(ShipModel::cybership2_like(), EnvConfig::default()).unwrap()
    }

    #[test]
    fn start_near_end_terminates_at_reset() {
        let mut e = env();
        let info = e.reset(&straight_scenario(Point::new(296.0, 0.0), vec![])).unwrap();
        assert_eq!(info.termination, Some(Termination::ReachedEnd));
        assert!(matches!(e.step([1.0, 0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn collision_takes_priority() {
        let mut e = env();
        let o = Obstacle::circle(Point::new(296.0, 0.0), 3.0).unwrap();
        let info = e.reset(&straight_scenario(Point::new(296.0, 0.0), vec![o])).unwrap();
        assert_eq!(info.termination, Some(Termination::Collision));
    }

    #[test]
    fn timeout_and_divergence() {
        let mut cfg = EnvConfig::default();
        cfg.max_steps = 5;
        let mut e = Env::new(ShipModel::cybership2_like(), cfg).unwrap();
        e.reset(&straight_scenario(Point::new(0.0, 0.0), vec![])).unwrap();
        let mut last = None;
        while !e.is_done() {
            last = Some(e.step([0.0, 0.0]).unwrap());
        }
        let last = last.unwrap();
        assert_eq!(last.info.termination, Some(Termination::Timeout));
        assert_eq!(last.info.t, 5);

        let mut cfg = EnvConfig::default();
        cfg.min_cumulative_reward = -3.5;
        let mut e = Env::new(ShipModel::cybership2_like(), cfg).unwrap();
        e.reset(&straight_scenario(Point::new(0.0, 0.0), vec![])).unwrap();
        let mut steps = 0;
        let term = loop {
            let tr = e.step([0.0, 0.0]).unwrap();
            steps += 1;
            if tr.done {
                break tr.info.termination;
            }
        };
        assert_eq!(term, Some(Termination::Divergence));
        assert_eq!(steps, 4);
    }

    #[test]
    fn line_of_sight_pilot_finishes_paths() {
        let cfg = EnvConfig {
            scenario: ScenarioConfig::obstacle_free(),
            ..EnvConfig::default()
        };
        let mut e = Env::new(ShipModel::cybership2_like(), cfg).unwrap();
        for seed in 0..20 {
            let s = generate_scenario(seed, ScenarioKind::Train, &cfg.scenario).unwrap();
            e.reset(&s).unwrap();
            let info = loop {
                let psi = e.nav().unwrap().heading_error;
                let tr = e.step([1.0, (2.0 * psi).clamp(-1.0, 1.0)]).unwrap();
                if tr.done {
                    break tr.info;
                }
            };
            assert!(info.termination.unwrap().is_success(), "seed {seed}: {info:?}");
            assert!(e.mean_cte() < 5.0, "seed {seed}: mean cte {}", e.mean_cte());
        }
    }
}
