//! Desired-path representation and line-of-sight guidance features.
//!
//! Paths are piecewise linear through their waypoints with circular fillets
//! at interior waypoints, parameterized by arc length `omega` in `[0, L]`.
//! Angles follow the NED convention: `atan2(east, north)`, zero pointing
//! north and increasing clockwise seen from above.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path as FsPath;

use nalgebra::Vector2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, VesselState};
use crate::error::{Error, Result};

pub type Point = Vector2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    /// Fillet radius at interior waypoints (m).
    pub fillet_radius: f64,
    /// Spacing of the dense lookup table (m).
    pub table_spacing: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            fillet_radius: 20.0,
            table_spacing: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Primitive {
    Line {
        start: Point,
        dir: Point,
        len: f64,
    },
    Arc {
        center: Point,
        radius: f64,
        start_angle: f64,
        /// Signed swept angle; positive sweeps from north toward east.
        sweep: f64,
    },
}

impl Primitive {
    fn length(&self) -> f64 {
        match *self {
            Primitive::Line { len, .. } => len,
            Primitive::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    fn point(&self, s: f64) -> Point {
        match *self {
            Primitive::Line { start, dir, .. } => start + dir * s,
            Primitive::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let theta = start_angle + sweep.signum() * s / radius;
                center + Point::new(theta.cos(), theta.sin()) * radius
            }
        }
    }

    /// Local arc length of the point on this primitive closest to `p`.
    fn project(&self, p: &Point) -> f64 {
        match *self {
            Primitive::Line { start, dir, len } => (p - start).dot(&dir).clamp(0.0, len),
            Primitive::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let rel = p - center;
                let phi = rel.y.atan2(rel.x);
                let along = wrap_angle(sweep.signum() * (phi - start_angle));
                // Angles outside the arc snap to the nearer end.
                let total = sweep.abs();
                let local = if along >= 0.0 && along <= total {
                    along
                } else {
                    let end_gap = wrap_angle(along - total).abs();
                    if along.abs() <= end_gap {
                        0.0
                    } else {
                        total
                    }
                };
                local * radius
            }
        }
    }

    fn angle(&self, s: f64) -> f64 {
        match *self {
            Primitive::Line { dir, .. } => dir.y.atan2(dir.x),
            Primitive::Arc {
                radius,
                start_angle,
                sweep,
                ..
            } => {
                let sign = sweep.signum();
                let theta = start_angle + sign * s / radius;
                wrap_angle(theta + sign * PI / 2.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub omega: f64,
    pub point: Point,
    /// Path angle at `omega`.
    pub angle: f64,
}

/// Serialized form of a path: the waypoints plus construction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub waypoints: Vec<[f64; 2]>,
    pub config: PathConfig,
}

/// Arc-length parameterized planar curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "PathSpec", try_from = "PathSpec")]
pub struct Path {
    waypoints: Vec<Point>,
    config: PathConfig,
    primitives: Vec<Primitive>,
    offsets: Vec<f64>,
    length: f64,
    samples: Vec<PathSample>,
}

impl From<Path> for PathSpec {
    fn from(p: Path) -> Self {
        PathSpec {
            waypoints: p.waypoints.iter().map(|w| [w.x, w.y]).collect(),
            config: p.config,
        }
    }
}

impl TryFrom<PathSpec> for Path {
    type Error = Error;
    fn try_from(spec: PathSpec) -> Result<Self> {
        let pts: Vec<Point> = spec.waypoints.iter().map(|w| Point::new(w[0], w[1])).collect();
        Path::with_config(&pts, spec.config)
    }
}

impl PartialEq for Path {
    fn eq(&self, other: &Self) -> bool {
        self.waypoints == other.waypoints && self.config == other.config
    }
}

/// Builds a path through `waypoints` with the default fillet radius.
pub fn build_path(waypoints: &[Point]) -> Result<Path> {
    Path::with_config(waypoints, PathConfig::default())
}

fn cross(a: &Point, b: &Point) -> f64 {
    a.x * b.y - a.y * b.x
}

impl Path {
    pub fn with_config(waypoints: &[Point], config: PathConfig) -> Result<Path> {
        if waypoints.len() < 2 {
            return Err(Error::PathConstruction(format!(
                "need at least 2 waypoints, got {}",
                waypoints.len()
            )));
        }
        if !(config.table_spacing > 0.0) || config.fillet_radius < 0.0 {
            return Err(Error::Config(format!("invalid path config {config:?}")));
        }
        if waypoints.iter().any(|w| !w.x.is_finite() || !w.y.is_finite()) {
            return Err(Error::PathConstruction("non-finite waypoint".into()));
        }
        let n_seg = waypoints.len() - 1;
        let mut dirs = Vec::with_capacity(n_seg);
        let mut seg_len = Vec::with_capacity(n_seg);
        for (i, w) in waypoints.windows(2).enumerate() {
            let d = w[1] - w[0];
            let len = d.norm();
            if len < 1e-9 {
                return Err(Error::PathConstruction(format!("waypoints {i} and {} coincide", i + 1)));
            }
            dirs.push(d / len);
            seg_len.push(len);
        }

        // Signed turn and desired tangent length at each interior waypoint.
        let mut turn = vec![0.0; waypoints.len()];
        let mut tangent = vec![0.0; waypoints.len()];
        for i in 1..waypoints.len() - 1 {
            let (a, b) = (dirs[i - 1], dirs[i]);
            let phi = cross(&a, &b).atan2(a.dot(&b));
            if phi.abs() > PI - 1e-9 {
                return Err(Error::PathConstruction(format!(
                    "path reverses direction at waypoint {i}"
                )));
            }
            turn[i] = phi;
            tangent[i] = config.fillet_radius * (phi.abs() / 2.0).tan();
        }
        // Shrink fillets that do not fit on their adjacent segments.
        let mut scale = vec![1.0_f64; waypoints.len()];
        for s in 0..n_seg {
            let need = tangent[s] + tangent[s + 1];
            if need > seg_len[s] {
                let f = seg_len[s] / need;
                scale[s] = scale[s].min(f);
                scale[s + 1] = scale[s + 1].min(f);
            }
        }
        for i in 0..waypoints.len() {
            tangent[i] *= scale[i];
        }

        let mut primitives = Vec::new();
        let mut cursor = waypoints[0];
        for s in 0..n_seg {
            let end_line = waypoints[s + 1] - dirs[s] * tangent[s + 1];
            let len = (end_line - cursor).dot(&dirs[s]);
            if len > 1e-12 {
                primitives.push(Primitive::Line {
                    start: cursor,
                    dir: dirs[s],
                    len,
                });
            }
            cursor = end_line;
            let i = s + 1;
            if i < waypoints.len() - 1 && tangent[i] > 1e-12 {
                let phi = turn[i];
                let radius = tangent[i] / (phi.abs() / 2.0).tan();
                let d = dirs[s];
                let normal = if phi > 0.0 {
                    Point::new(-d.y, d.x)
                } else {
                    Point::new(d.y, -d.x)
                };
                let center = cursor + normal * radius;
                let rel = cursor - center;
                primitives.push(Primitive::Arc {
                    center,
                    radius,
                    start_angle: rel.y.atan2(rel.x),
                    sweep: phi,
                });
                cursor = waypoints[i] + dirs[i] * tangent[i];
            }
        }

        let mut offsets = Vec::with_capacity(primitives.len());
        let mut length = 0.0;
        for p in &primitives {
            offsets.push(length);
            length += p.length();
        }

        let mut path = Path {
            waypoints: waypoints.to_vec(),
            config,
            primitives,
            offsets,
            length,
            samples: Vec::new(),
        };
        let n = (length / config.table_spacing).floor() as usize;
        let mut samples = Vec::with_capacity(n + 2);
        for k in 0..=n {
            let omega = k as f64 * config.table_spacing;
            samples.push(path.sample(omega));
        }
        if length - n as f64 * config.table_spacing > 1e-9 {
            samples.push(path.sample(length));
        }
        path.samples = samples;
        Ok(path)
    }

    pub fn waypoints(&self) -> &[Point] {
        &self.waypoints
    }

    pub fn config(&self) -> PathConfig {
        self.config
    }

    /// Total arc length `L`.
    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn samples(&self) -> &[PathSample] {
        &self.samples
    }

    fn locate(&self, omega: f64) -> (usize, f64) {
        let omega = omega.clamp(0.0, self.length);
        let idx = self.offsets.partition_point(|&o| o <= omega).saturating_sub(1);
        let s = (omega - self.offsets[idx]).min(self.primitives[idx].length());
        (idx, s)
    }

    fn sample(&self, omega: f64) -> PathSample {
        let (i, s) = self.locate(omega);
        PathSample {
            omega,
            point: self.primitives[i].point(s),
            angle: self.primitives[i].angle(s),
        }
    }

    /// `p_d(omega)`, with `omega` clamped to `[0, L]`.
    pub fn point(&self, omega: f64) -> Point {
        let (i, s) = self.locate(omega);
        self.primitives[i].point(s)
    }

    /// Path angle `gamma_p(omega)`, with `omega` clamped to `[0, L]`.
    pub fn angle(&self, omega: f64) -> f64 {
        let (i, s) = self.locate(omega);
        self.primitives[i].angle(s)
    }

    fn dist2(&self, omega: f64, position: &Point) -> f64 {
        (self.point(omega) - position).norm_squared()
    }

    fn refine(&self, omega: f64, position: &Point) -> f64 {
        let h = self.config.table_spacing;
        let (lo, hi) = ((omega - h).max(0.0), (omega + h).min(self.length));
        let (first, _) = self.locate(lo);
        let (last, _) = self.locate(hi);
        let mut best = (self.dist2(omega, position), omega);
        for i in first..=last {
            let cand = (self.offsets[i] + self.primitives[i].project(position)).clamp(lo, hi);
            let d = self.dist2(cand, position);
            if d < best.0 {
                best = (d, cand);
            }
        }
        best.1
    }

    fn best_sample(&self, position: &Point, lo: f64, hi: f64) -> f64 {
        let h = self.config.table_spacing;
        let start = ((lo / h).floor().max(0.0) as usize).min(self.samples.len() - 1);
        let mut best = (f64::INFINITY, self.samples[start].omega);
        for s in &self.samples[start..] {
            if s.omega > hi {
                break;
            }
            if s.omega < lo {
                continue;
            }
            let d = (s.point - position).norm_squared();
            if d < best.0 {
                best = (d, s.omega);
            }
        }
        best.1
    }
}

/// Window searched around a hint, behind and ahead of it (m).
pub const HINT_WINDOW_BEHIND: f64 = 10.0;
pub const HINT_WINDOW_AHEAD: f64 = 100.0;

/// Path parameter closest to `position`.
///
/// Without a hint the whole table is scanned. With a hint the search is
/// restricted to a window around it and the result never goes below the
/// hint, which keeps progress monotone within an episode.
pub fn closest_param(path: &Path, position: &Point, hint: Option<f64>) -> f64 {
    match hint {
        None => {
            let coarse = path.best_sample(position, 0.0, path.length);
            path.refine(coarse, position)
        }
        Some(h) => {
            let h = h.clamp(0.0, path.length);
            let coarse = path.best_sample(
                position,
                (h - HINT_WINDOW_BEHIND).max(0.0),
                (h + HINT_WINDOW_AHEAD).min(path.length),
            );
            path.refine(coarse, position).max(h)
        }
    }
}

/// Cross-track error: distance to the closest path point.
pub fn cross_track_error(path: &Path, position: &Point) -> f64 {
    let omega = closest_param(path, position, None);
    (position - path.point(omega)).norm()
}

/// Fraction of the path covered at parameter `omega`.
pub fn progress(path: &Path, omega: f64) -> f64 {
    if path.length <= 0.0 {
        return 1.0;
    }
    (omega / path.length).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Look-ahead distance along the path (m).
    pub lookahead: f64,
    /// Distance to the path end counted as arrival (m).
    pub end_radius: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lookahead: 50.0,
            end_radius: 5.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lookahead > 0.0) {
            return Err(Error::Config("look-ahead distance must be positive".into()));
        }
        if !(self.end_radius >= 0.0) {
            return Err(Error::Config("end radius must be non-negative".into()));
        }
        Ok(())
    }
}

/// Navigation part of the observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavFeatures {
    pub u: f64,
    pub v: f64,
    pub r: f64,
    /// Cross-track error (m).
    pub cte: f64,
    /// Heading error toward the look-ahead point (rad).
    pub heading_error: f64,
    /// Path angle at the look-ahead point minus heading (rad).
    pub lookahead_heading_error: f64,
}

fn lookahead_param(path: &Path, omega_bar: f64, cfg: &GuidanceConfig) -> f64 {
    (omega_bar + cfg.lookahead).min(path.length)
}

pub fn heading_error_at(path: &Path, state: &VesselState, omega_bar: f64, cfg: &GuidanceConfig) -> f64 {
    let target = path.point(lookahead_param(path, omega_bar, cfg));
    let d = target - state.position();
    wrap_angle(d.y.atan2(d.x) - state.heading())
}

pub fn lookahead_heading_error_at(path: &Path, state: &VesselState, omega_bar: f64, cfg: &GuidanceConfig) -> f64 {
    wrap_angle(path.angle(lookahead_param(path, omega_bar, cfg)) - state.heading())
}

pub fn heading_error(path: &Path, state: &VesselState, cfg: &GuidanceConfig) -> f64 {
    let omega = closest_param(path, &state.position(), None);
    heading_error_at(path, state, omega, cfg)
}

pub fn lookahead_heading_error(path: &Path, state: &VesselState, cfg: &GuidanceConfig) -> f64 {
    let omega = closest_param(path, &state.position(), None);
    lookahead_heading_error_at(path, state, omega, cfg)
}

/// Guidance features given an already computed closest parameter.
pub fn nav_features(path: &Path, state: &VesselState, omega_bar: f64, cfg: &GuidanceConfig) -> NavFeatures {
    NavFeatures {
        u: state.nu[0],
        v: state.nu[1],
        r: state.nu[2],
        cte: (state.position() - path.point(omega_bar)).norm(),
        heading_error: heading_error_at(path, state, omega_bar, cfg),
        lookahead_heading_error: lookahead_heading_error_at(path, state, omega_bar, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathGenConfig {
    pub min_intermediate: usize,
    pub max_intermediate: usize,
    pub segment_length: (f64, f64),
    /// Largest heading change between consecutive segments (rad).
    pub max_turn: f64,
    pub path: PathConfig,
}

impl Default for PathGenConfig {
    fn default() -> Self {
        Self {
            min_intermediate: 2,
            max_intermediate: 6,
            segment_length: (80.0, 160.0),
            max_turn: PI / 3.0,
            path: PathConfig::default(),
        }
    }
}

/// Random path starting at the origin.
pub fn generate_path<R: Rng + ?Sized>(rng: &mut R, cfg: &PathGenConfig) -> Result<Path> {
    let (lo, hi) = cfg.segment_length;
    if cfg.min_intermediate > cfg.max_intermediate || !(lo > 0.0 && hi >= lo) {
        return Err(Error::Config(format!("invalid path generator config {cfg:?}")));
    }
    let n_intermediate = rng.random_range(cfg.min_intermediate..=cfg.max_intermediate);
    let mut heading: f64 = rng.random_range(-PI..PI);
    let mut pts = vec![Point::zeros()];
    for seg in 0..=n_intermediate {
        if seg > 0 && cfg.max_turn > 0.0 {
            heading += rng.random_range(-cfg.max_turn..=cfg.max_turn);
        }
        let len = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let last = *pts.last().expect("non-empty");
        pts.push(last + Point::new(heading.cos(), heading.sin()) * len);
    }
    Path::with_config(&pts, cfg.path)
}

/// Writes the waypoints as `x_n,y_n` rows.
pub fn write_waypoints_csv(path: &Path, out: impl AsRef<FsPath>) -> Result<()> {
    let out = out.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(out).map_err(|e| Error::io(out, e))?);
    let mut body = String::from("x_n,y_n\n");
    for w in path.waypoints() {
        body.push_str(&format!("{},{}\n", w.x, w.y));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(out, e))?;
    Ok(())
}

pub fn read_waypoints_csv(input: impl AsRef<FsPath>) -> Result<Vec<Point>> {
    let input = input.as_ref();
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let mut pts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with('x')) {
            continue;
        }
        let mut it = line.split(',').map(|s| s.trim().parse::<f64>());
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) => pts.push(Point::new(x, y)),
            _ => return Err(Error::format(input, format!("line {}: expected `x_n,y_n`", lineno + 1))),
        }
    }
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn straight() -> Path {
        build_path(&[Point::new(0.0, 0.0), Point::new(100.0, 0.0)]).unwrap()
    }

    fn corner(radius: f64) -> Path {
        Path::with_config(
            &[Point::new(0.0, 0.0), Point::new(100.0, 0.0), Point::new(100.0, 100.0)],
            PathConfig {
                fillet_radius: radius,
                table_spacing: 0.5,
            },
        )
        .unwrap()
    }

    #[test]
    fn straight_path_north() {
        let p = straight();
        assert_abs_diff_eq!(p.length(), 100.0, epsilon = 1e-12);
        for s in p.samples() {
            assert_eq!(s.angle, 0.0);
        }
    }

    #[test]
    fn collinear_waypoints_match_two_point_path() {
        let a = straight();
        let b = build_path(&[Point::new(0.0, 0.0), Point::new(40.0, 0.0), Point::new(100.0, 0.0)]).unwrap();
        assert_abs_diff_eq!(a.length(), b.length(), epsilon = 1e-12);
        for w in [0.0, 12.3, 40.0, 77.7, 100.0] {
            assert_abs_diff_eq!(a.point(w), b.point(w), epsilon = 1e-12);
            assert_abs_diff_eq!(a.angle(w), b.angle(w), epsilon = 1e-12);
        }
    }

    #[test]
    fn fillet_arc_length() {
        let rho = 20.0;
        let p = corner(rho);
        let expected = 200.0 - 2.0 * rho + PI / 2.0 * rho;
        assert_abs_diff_eq!(p.length(), expected, epsilon = 1e-9);
        // Tangent turns from north to east across the arc.
        assert_abs_diff_eq!(p.angle(0.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.angle(p.length()), PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn duplicate_waypoints_rejected() {
        let err = build_path(&[Point::new(0.0, 0.0), Point::new(0.0, 0.0)]);
        assert!(matches!(err, Err(Error::PathConstruction(_))));
        assert!(build_path(&[Point::new(0.0, 0.0)]).is_err());
        let reversal = build_path(&[Point::new(0.0, 0.0), Point::new(10.0, 0.0), Point::new(0.0, 0.0)]);
        assert!(reversal.is_err());
    }

    #[test]
    fn short_segments_shrink_the_fillet() {
        let p = Path::with_config(
            &[Point::new(0.0, 0.0), Point::new(10.0, 0.0), Point::new(10.0, 10.0)],
            PathConfig::default(),
        )
        .unwrap();
        // Radius shrinks to 10 m: 20 - 2*10 + pi/2*10.
        assert_abs_diff_eq!(p.length(), PI / 2.0 * 10.0, epsilon = 1e-9);
    }

    #[test]
    fn closest_param_examples() {
        let p = straight();
        let w = closest_param(&p, &Point::new(30.0, 0.0), None);
        assert_abs_diff_eq!(w, 30.0, epsilon = 1e-9);
        let w = closest_param(&p, &Point::new(50.0, 10.0), None);
        assert_abs_diff_eq!(w, 50.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cross_track_error(&p, &Point::new(50.0, 10.0)), 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cross_track_error(&p, &Point::new(70.0, 0.0)), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn hinted_search_is_monotone() {
        let p = corner(20.0);
        let mut hint = 0.0;
        let mut last = 0.0;
        // Walk forward then backward; the parameter never decreases.
        for k in 0..200 {
            let x = if k < 100 { k as f64 } else { 200.0 - k as f64 };
            let w = closest_param(&p, &Point::new(x, 3.0), Some(hint));
            assert!(w >= last);
            last = w;
            hint = w;
        }
    }

    #[test]
    fn heading_error_examples() {
        let p = straight();
        let cfg = GuidanceConfig::default();
        let s = VesselState::at_rest(0.0, 0.0, 0.0);
        assert_abs_diff_eq!(heading_error(&p, &s, &cfg), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lookahead_heading_error(&p, &s, &cfg), 0.0, epsilon = 1e-12);

        let east = build_path(&[Point::new(0.0, 0.0), Point::new(0.0, 100.0)]).unwrap();
        assert_abs_diff_eq!(heading_error(&east, &s, &cfg), PI / 2.0, epsilon = 1e-12);

        let tilted = VesselState::at_rest(0.0, 0.0, PI / 4.0);
        assert_abs_diff_eq!(lookahead_heading_error(&p, &tilted, &cfg), -PI / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn lookahead_clamps_at_path_end() {
        let p = straight();
        let cfg = GuidanceConfig::default();
        // 90 m along, 5 m east: look-ahead would be 140 m unclamped.
        let s = VesselState::at_rest(90.0, 5.0, 0.0);
        let e = heading_error(&p, &s, &cfg);
        let toward_end = (-5.0_f64).atan2(10.0);
        assert_abs_diff_eq!(e, toward_end, epsilon = 1e-9);
        let extrapolated = (-5.0_f64).atan2(50.0);
        assert!((e - extrapolated).abs() > 0.1);
    }

    #[test]
    fn tangent_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = generate_path(&mut rng, &PathGenConfig::default()).unwrap();
            let h = 1e-4;
            let n = 200;
            for k in 1..n {
                let w = p.length() * k as f64 / n as f64;
                let d = p.point(w + h) - p.point(w - h);
                let fd = d.y.atan2(d.x);
                assert!(wrap_angle(fd - p.angle(w)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn table_is_dense_and_continuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = generate_path(&mut rng, &PathGenConfig::default()).unwrap();
        for w in p.samples().windows(2) {
            assert!((w[1].point - w[0].point).norm() <= p.config().table_spacing + 1e-9);
            assert!(wrap_angle(w[1].angle - w[0].angle).abs() < 0.05);
        }
        assert_abs_diff_eq!(p.samples().last().unwrap().omega, p.length(), epsilon = 1e-12);
    }

    #[test]
    fn progress_examples() {
        let p = straight();
        assert_eq!(progress(&p, 0.0), 0.0);
        assert_eq!(progress(&p, 100.0), 1.0);
        assert_eq!(progress(&p, 50.0), 0.5);
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = PathGenConfig::default();
        let a = generate_path(&mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
        let b = generate_path(&mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn waypoint_count_is_uniform() {
        let cfg = PathGenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 10_000;
        let mut counts = [0usize; 5];
        let mut angles = Vec::with_capacity(n);
        for _ in 0..n {
            let p = generate_path(&mut rng, &cfg).unwrap();
            counts[p.waypoints().len() - 4] += 1;
            angles.push(p.angle(0.0));
        }
        // 3-sigma multinomial bounds around n/5.
        let pk = 0.2;
        let sigma = (n as f64 * pk * (1.0 - pk)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * pk).abs() < 3.0 * sigma, "{counts:?}");
        }
        // One-sample KS test against U(-pi, pi), 5% critical value.
        angles.sort_by(f64::total_cmp);
        let mut d: f64 = 0.0;
        for (i, a) in angles.iter().enumerate() {
            let cdf = (a + PI) / (2.0 * PI);
            d = d
                .max((cdf - i as f64 / n as f64).abs())
                .max(((i + 1) as f64 / n as f64 - cdf).abs());
        }
        assert!(d < 1.36 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = generate_path(&mut rng, &PathGenConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("path.csv");
        write_waypoints_csv(&p, &file).unwrap();
        let pts = read_waypoints_csv(&file).unwrap();
        assert_eq!(pts, p.waypoints());
    }

    #[test]
    fn json_round_trip() {
        let p = corner(15.0);
        let text = serde_json::to_string(&p).unwrap();
        let q: Path = serde_json::from_str(&text).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.length(), q.length());
    }

    proptest! {
        #[test]
        fn rigid_rotation_invariance(
            seed in 0u64..1000,
            alpha in -PI..PI,
            px in -100.0f64..300.0,
            py in -100.0f64..300.0,
            psi in -PI..PI,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = generate_path(&mut rng, &PathGenConfig::default()).unwrap();
            let rot = |v: &Point| {
                let (s, c) = alpha.sin_cos();
                Point::new(c * v.x - s * v.y, s * v.x + c * v.y)
            };
            let q = Path::with_config(
                &p.waypoints().iter().map(rot).collect::<Vec<_>>(),
                p.config(),
            )
            .unwrap();
            let pos = Point::new(px, py);
            let s1 = VesselState::at_rest(px, py, psi);
            let rp = rot(&pos);
            let s2 = VesselState::at_rest(rp.x, rp.y, psi + alpha);
            let cfg = GuidanceConfig::default();
            let e1 = cross_track_error(&p, &pos);
            let e2 = cross_track_error(&q, &rp);
            prop_assert!((e1 - e2).abs() < 1e-6);
            let w1 = closest_param(&p, &pos, None);
            let w2 = closest_param(&q, &rp, None);
            // Near-ties between distant path parts may flip the argmin.
            if (w1 - w2).abs() < 1e-3 {
                let h1 = heading_error_at(&p, &s1, w1, &cfg);
                let h2 = heading_error_at(&q, &s2, w2, &cfg);
                prop_assert!(wrap_angle(h1 - h2).abs() < 1e-6);
                let l1 = lookahead_heading_error_at(&p, &s1, w1, &cfg);
                let l2 = lookahead_heading_error_at(&q, &s2, w2, &cfg);
                prop_assert!(wrap_angle(l1 - l2).abs() < 1e-6);
                prop_assert!(h1 > -PI && h1 <= PI && l1 > -PI && l1 <= PI);
            }
        }
    }
}
