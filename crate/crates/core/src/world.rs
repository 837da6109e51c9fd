//! Obstacles, range sensing, collision checks and scenario generation.
//!
//! Sensor convention: ray 0 points along the bow and ray `k` sits at body
//! angle `k * 2pi / n_rays`, increasing clockwise seen from above (from
//! north toward east, the same sense as heading). Readings are normalized as
//! `1 - d / x_max`, so 0 means nothing in range and 1 means contact.

use std::f64::consts::PI;
use std::path::Path as FsPath;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::dynamics::VesselState;
use crate::error::{Error, Result};
use crate::guidance::{generate_path, Path, PathGenConfig, Point};
use crate::rng;

fn cross(a: &Point, b: &Point) -> f64 {
    a.x * b.y - a.y * b.x
}

fn rotate(v: &Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    Point::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Circle {
        center: Point,
        radius: f64,
    },
    /// Convex polygon, vertices ordered with positive signed area in `(x_n, y_n)`.
    Polygon {
        vertices: Vec<Point>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kinematics {
    Static,
    /// Constant velocity along a fixed heading.
    Dynamic {
        speed: f64,
        heading: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub shape: Shape,
    pub kinematics: Kinematics,
}

impl Obstacle {
    pub fn circle(center: Point, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Config(format!("circle radius must be positive, got {radius}")));
        }
        Ok(Self {
            shape: Shape::Circle { center, radius },
            kinematics: Kinematics::Static,
        })
    }

    pub fn polygon(vertices: Vec<Point>, kinematics: Kinematics) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::Config("polygon needs at least 3 vertices".into()));
        }
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if cross(&(b - a), &(c - b)) <= 0.0 {
                return Err(Error::Config(
                    "polygon must be convex with counterclockwise vertices".into(),
                ));
            }
        }
        Ok(Self {
            shape: Shape::Polygon { vertices },
            kinematics,
        })
    }

    /// Rectangle of `length` along `orientation` and `width` across it.
    pub fn rectangle(center: Point, length: f64, width: f64, orientation: f64, kinematics: Kinematics) -> Result<Self> {
        if !(length > 0.0 && width > 0.0) {
            return Err(Error::Config("rectangle sides must be positive".into()));
        }
        let (hl, hw) = (length / 2.0, width / 2.0);
        let corners = [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)];
        let vertices = corners
            .iter()
            .map(|&(x, y)| center + rotate(&Point::new(x, y), orientation))
            .collect();
        Self::polygon(vertices, kinematics)
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self.kinematics, Kinematics::Dynamic { .. })
    }

    /// Center and radius of a circle enclosing the shape.
    pub fn bounding_circle(&self) -> (Point, f64) {
        match &self.shape {
            Shape::Circle { center, radius } => (*center, *radius),
            Shape::Polygon { vertices } => {
                let c = vertices.iter().fold(Point::zeros(), |acc, v| acc + v) / vertices.len() as f64;
                let r = vertices.iter().map(|v| (v - c).norm()).fold(0.0, f64::max);
                (c, r)
            }
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        match &self.shape {
            Shape::Circle { center, radius } => (p - center).norm() <= *radius,
            Shape::Polygon { vertices } => {
                let n = vertices.len();
                (0..n).all(|i| cross(&(vertices[(i + 1) % n] - vertices[i]), &(p - vertices[i])) >= 0.0)
            }
        }
    }

    /// Distance from `p` to the obstacle, zero inside.
    pub fn distance(&self, p: &Point) -> f64 {
        match &self.shape {
            Shape::Circle { center, radius } => ((p - center).norm() - radius).max(0.0),
            Shape::Polygon { vertices } => {
                if self.contains(p) {
                    return 0.0;
                }
                let n = vertices.len();
                (0..n)
                    .map(|i| segment_distance(p, &vertices[i], &vertices[(i + 1) % n]))
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }

    pub fn ray(&self, origin: &Point, direction: &Point) -> Option<f64> {
        match &self.shape {
            Shape::Circle { center, radius } => ray_circle(origin, direction, center, *radius),
            Shape::Polygon { vertices } => ray_polygon(origin, direction, vertices),
        }
    }

    /// Rigid rotation about `pivot`; headings rotate along.
    pub fn rotated_about(&self, pivot: &Point, angle: f64) -> Obstacle {
        let map = |v: &Point| pivot + rotate(&(v - pivot), angle);
        let shape = match &self.shape {
            Shape::Circle { center, radius } => Shape::Circle {
                center: map(center),
                radius: *radius,
            },
            Shape::Polygon { vertices } => Shape::Polygon {
                vertices: vertices.iter().map(map).collect(),
            },
        };
        let kinematics = match self.kinematics {
            Kinematics::Static => Kinematics::Static,
            Kinematics::Dynamic { speed, heading } => Kinematics::Dynamic {
                speed,
                heading: heading + angle,
            },
        };
        Obstacle { shape, kinematics }
    }

    fn translate(&mut self, delta: &Point) {
        match &mut self.shape {
            Shape::Circle { center, .. } => *center += delta,
            Shape::Polygon { vertices } => vertices.iter_mut().for_each(|v| *v += delta),
        }
    }
}

fn segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let e = b - a;
    let t = ((p - a).dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
    (p - (a + e * t)).norm()
}

/// Smallest `t >= 0` with `origin + t * direction` on the circle.
pub fn ray_circle(origin: &Point, direction: &Point, center: &Point, radius: f64) -> Option<f64> {
    let m = origin - center;
    let b = m.dot(direction);
    let c = m.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let (t0, t1) = (-b - s, -b + s);
    if t1 < 0.0 {
        None
    } else if t0 >= 0.0 {
        t0.is_finite().then_some(t0)
    } else {
        t1.is_finite().then_some(t1)
    }
}

/// Smallest non-negative hit parameter over all polygon edges.
pub fn ray_polygon(origin: &Point, direction: &Point, vertices: &[Point]) -> Option<f64> {
    let n = vertices.len();
    let mut best: Option<f64> = None;
    for i in 0..n {
        let a = vertices[i];
        let e = vertices[(i + 1) % n] - a;
        let denom = cross(direction, &e);
        if denom.abs() < 1e-12 * e.norm() {
            continue;
        }
        let ao = a - origin;
        let t = cross(&ao, &e) / denom;
        let s = cross(&ao, direction) / denom;
        if t >= 0.0 && (-1e-12..=1.0 + 1e-12).contains(&s) {
            best = Some(best.map_or(t, |b: f64| b.min(t)));
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub n_rays: usize,
    /// Maximum measurable range (m).
    pub x_max: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            n_rays: 180,
            x_max: 150.0,
        }
    }
}

impl SensorConfig {
    /// Angle between neighbouring rays; `n_rays * spacing == 2 pi`.
    pub fn angular_spacing(&self) -> f64 {
        2.0 * PI / self.n_rays as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rays == 0 || !(self.x_max > 0.0) {
            return Err(Error::Config(format!("invalid sensor config {self:?}")));
        }
        Ok(())
    }
}

/// Normalized, ring-ordered range readings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scan(Vec<f64>);

impl Scan {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("scan values must lie in [0, 1]".into()));
        }
        Ok(Scan(values))
    }

    pub fn zeros(n: usize) -> Self {
        Scan(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Raw ranges in metres, `x_max` where nothing is hit and 0 when the
/// sensor origin lies inside an obstacle.
pub fn ranges(state: &VesselState, obstacles: &[Obstacle], cfg: &SensorConfig) -> Vec<f64> {
    let origin = state.position();
    let mut out = vec![cfg.x_max; cfg.n_rays];
    let near: Vec<&Obstacle> = obstacles
        .iter()
        .filter(|o| {
            let (c, r) = o.bounding_circle();
            (c - origin).norm() - r <= cfg.x_max
        })
        .collect();
    if near.iter().any(|o| o.contains(&origin)) {
        out.iter_mut().for_each(|d| *d = 0.0);
        return out;
    }
    let psi = state.heading();
    let step = cfg.angular_spacing();
    for (k, d) in out.iter_mut().enumerate() {
        let angle = psi + k as f64 * step;
        let dir = Point::new(angle.cos(), angle.sin());
        for o in &near {
            if let Some(t) = o.ray(&origin, &dir) {
                if t < *d {
                    *d = t;
                }
            }
        }
    }
    out
}

pub fn scan(state: &VesselState, obstacles: &[Obstacle], cfg: &SensorConfig) -> Scan {
    let values = ranges(state, obstacles, cfg)
        .into_iter()
        .map(|d| 1.0 - d.min(cfg.x_max) / cfg.x_max)
        .collect();
    Scan(values)
}

/// Moves dynamic obstacles by `dt` seconds along their headings.
pub fn step_obstacles(obstacles: &[Obstacle], dt: f64) -> Vec<Obstacle> {
    let mut out = obstacles.to_vec();
    advance_obstacles(&mut out, dt);
    out
}

pub fn advance_obstacles(obstacles: &mut [Obstacle], dt: f64) {
    for o in obstacles.iter_mut() {
        if let Kinematics::Dynamic { speed, heading } = o.kinematics {
            let delta = Point::new(heading.cos(), heading.sin()) * (speed * dt);
            o.translate(&delta);
        }
    }
}

/// True iff some obstacle lies within `hull_radius` of the vessel origin
/// (boundary included).
pub fn collision_check(state: &VesselState, obstacles: &[Obstacle], hull_radius: f64) -> bool {
    let p = state.position();
    obstacles.iter().any(|o| o.distance(&p) <= hull_radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Train,
    Test,
}

impl ScenarioKind {
    fn stream(self) -> &'static str {
        match self {
            ScenarioKind::Train => "scenario/train",
            ScenarioKind::Test => "scenario/test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub path: PathGenConfig,
    pub n_static: usize,
    pub n_dynamic: usize,
    /// Poisson mean of static circle radii (m).
    pub static_radius_mean: f64,
    /// Poisson mean of dynamic obstacle lengths (m); width is half the length.
    pub dynamic_size_mean: f64,
    /// Largest lateral offset of obstacle centers from the path (m).
    pub lateral_offset: f64,
    pub dynamic_speed: (f64, f64),
    /// Minimum free distance around the start position (m).
    pub start_clearance: f64,
    /// Initial heading is the path angle plus `U(-noise, noise)` (rad).
    pub start_heading_noise: f64,
    /// Collision envelope used to validate the start state (m).
    pub hull_radius: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            path: PathGenConfig::default(),
            n_static: 11,
            n_dynamic: 17,
            static_radius_mean: 25.0,
            dynamic_size_mean: 10.0,
            lateral_offset: 60.0,
            dynamic_speed: (0.1, 0.2),
            start_clearance: 40.0,
            start_heading_noise: 0.25,
            hull_radius: 5.0,
        }
    }
}

impl ScenarioConfig {
    pub fn obstacle_free() -> Self {
        Self {
            n_static: 0,
            n_dynamic: 0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub path: Path,
    pub obstacles: Vec<Obstacle>,
    pub vessel_start: VesselState,
    pub seed: u64,
}

impl Scenario {
    pub fn save_json(&self, out: impl AsRef<FsPath>) -> Result<()> {
        let out = out.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(out, e))?;
        std::fs::write(out, text).map_err(|e| Error::io(out, e))
    }

    pub fn load_json(input: impl AsRef<FsPath>) -> Result<Self> {
        let input = input.as_ref();
        let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(input, e))
    }
}

/// Poisson draw with zero outcomes resampled.
pub(crate) fn positive_poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    let dist = Poisson::new(mean).expect("Poisson mean must be positive");
    loop {
        let x: f64 = dist.sample(rng);
        if x > 0.0 {
            return x;
        }
    }
}

const MAX_ATTEMPTS: usize = 100;

/// Random scenario for `seed`; train and test kinds draw from independent streams.
pub fn generate_scenario(seed: u64, kind: ScenarioKind, cfg: &ScenarioConfig) -> Result<Scenario> {
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng::substream(seed, kind.stream(), attempt as u64);
        if let Some(s) = try_scenario(&mut rng, seed, cfg)? {
            return Ok(s);
        }
    }
    Err(Error::ScenarioGeneration { attempts: MAX_ATTEMPTS })
}

fn try_scenario<R: Rng + ?Sized>(rng: &mut R, seed: u64, cfg: &ScenarioConfig) -> Result<Option<Scenario>> {
    let path = generate_path(rng, &cfg.path)?;
    let start = path.point(0.0);
    let heading = path.angle(0.0)
        + if cfg.start_heading_noise > 0.0 {
            rng.random_range(-cfg.start_heading_noise..=cfg.start_heading_noise)
        } else {
            0.0
        };
    let vessel_start = VesselState::at_rest(start.x, start.y, heading);

    let place = |rng: &mut R| {
        let omega = rng.random_range(0.0..=path.length());
        let gamma = path.angle(omega);
        let normal = Point::new(-gamma.sin(), gamma.cos());
        let offset = if cfg.lateral_offset > 0.0 {
            rng.random_range(-cfg.lateral_offset..=cfg.lateral_offset)
        } else {
            0.0
        };
        path.point(omega) + normal * offset
    };
    let clear = |o: &Obstacle| o.distance(&start) > cfg.start_clearance;

    let mut obstacles = Vec::with_capacity(cfg.n_static + cfg.n_dynamic);
    for _ in 0..cfg.n_static {
        let radius = positive_poisson(rng, cfg.static_radius_mean);
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let o = Obstacle::circle(place(rng), radius)?;
            if clear(&o) {
                placed = Some(o);
                break;
            }
        }
        match placed {
            Some(o) => obstacles.push(o),
            None => return Ok(None),
        }
    }
    for _ in 0..cfg.n_dynamic {
        let size = positive_poisson(rng, cfg.dynamic_size_mean);
        let heading = rng.random_range(-PI..PI);
        let (lo, hi) = cfg.dynamic_speed;
        let speed = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let o = Obstacle::rectangle(
                place(rng),
                size,
                size / 2.0,
                heading,
                Kinematics::Dynamic { speed, heading },
            )?;
            if clear(&o) {
                placed = Some(o);
                break;
            }
        }
        match placed {
            Some(o) => obstacles.push(o),
            None => return Ok(None),
        }
    }
    if collision_check(&vessel_start, &obstacles, cfg.hull_radius) {
        return Ok(None);
    }
    Ok(Some(Scenario {
        path,
        obstacles,
        vessel_start,
        seed,
    }))
}
