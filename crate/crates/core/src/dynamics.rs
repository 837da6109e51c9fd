//! 3-DOF surge/sway/yaw vessel model.
//!
//! ```text
//! eta_dot = R(psi) * nu
//! M * nu_dot + C(nu) * nu + D(nu) * nu = B * f
//! ```
//!
//! with `eta = [x_n, y_n, psi]`, `nu = [u, v, r]` and `f = [T_u, T_r]`.
//! `C(nu)` is the skew-symmetric Coriolis/centripetal matrix derived from the
//! total (rigid-body + added) mass matrix, so it never does work on the hull.
//! `D(nu)` is linear with an optional diagonal quadratic term.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_MODEL: &str = include_str!("../models/cybership2_like.json");

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Rotation about the z-axis from body-fixed velocities to NED rates.
pub fn rotation_matrix(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesselState {
    /// `[x_n, y_n, psi]` in metres and radians.
    pub eta: Vector3<f64>,
    /// `[u, v, r]` in m/s and rad/s.
    pub nu: Vector3<f64>,
}

impl VesselState {
    pub fn new(x_n: f64, y_n: f64, psi: f64, u: f64, v: f64, r: f64) -> Self {
        Self {
            eta: Vector3::new(x_n, y_n, wrap_angle(psi)),
            nu: Vector3::new(u, v, r),
        }
    }

    pub fn at_rest(x_n: f64, y_n: f64, psi: f64) -> Self {
        Self::new(x_n, y_n, psi, 0.0, 0.0, 0.0)
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.eta[0], self.eta[1])
    }

    pub fn heading(&self) -> f64 {
        self.eta[2]
    }

    pub fn is_finite(&self) -> bool {
        self.eta.iter().chain(self.nu.iter()).all(|x| x.is_finite())
    }
}

/// Surge force and yaw moment.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub surge_force: f64,
    pub yaw_moment: f64,
}

impl ControlInput {
    pub fn new(surge_force: f64, yaw_moment: f64) -> Self {
        Self {
            surge_force,
            yaw_moment,
        }
    }

    /// Maps a normalized action in `[-1, 1]^2` onto the actuator limits.
    /// Components outside the box are clamped first.
    pub fn from_action(action: [f64; 2], model: &ShipModel) -> Self {
        Self {
            surge_force: action[0].clamp(-1.0, 1.0) * model.surge_force_max,
            yaw_moment: action[1].clamp(-1.0, 1.0) * model.yaw_moment_max,
        }
    }

    pub fn saturate(self, model: &ShipModel) -> Self {
        Self {
            surge_force: self.surge_force.clamp(-model.surge_force_max, model.surge_force_max),
            yaw_moment: self.yaw_moment.clamp(-model.yaw_moment_max, model.yaw_moment_max),
        }
    }

    fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.surge_force, self.yaw_moment)
    }
}

/// On-disk ship model. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShipModelFile {
    pub name: String,
    /// Total mass matrix (rigid body plus added mass).
    pub mass: [[f64; 3]; 3],
    pub damping_linear: [[f64; 3]; 3],
    /// Optional diagonal quadratic damping, `D_q = diag(d) * |nu|`.
    #[serde(default)]
    pub damping_quadratic: Option<[f64; 3]>,
    pub actuation: [[f64; 2]; 3],
    pub surge_force_max: f64,
    pub yaw_moment_max: f64,
    pub hull_radius: f64,
    /// Overrides the steady-state surge speed computed at load.
    #[serde(default)]
    pub u_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShipModel {
    pub name: String,
    pub mass: Matrix3<f64>,
    mass_inv: Matrix3<f64>,
    pub damping_linear: Matrix3<f64>,
    pub damping_quadratic: Vector3<f64>,
    pub actuation: Matrix3x2<f64>,
    pub surge_force_max: f64,
    pub yaw_moment_max: f64,
    pub hull_radius: f64,
    /// Steady-state surge speed under full forward thrust.
    pub u_max: f64,
    /// Steady-state yaw rate under full yaw moment from rest.
    pub r_max: f64,
    file: ShipModelFile,
}

fn mat3(rows: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| rows[i][j])
}

impl ShipModel {
    /// The bundled "CyberShip-II-like" parameter set.
    pub fn cybership2_like() -> Self {
        let file: ShipModelFile = serde_json::from_str(DEFAULT_MODEL).expect("bundled ship model is valid JSON");
        Self::from_file(file).expect("bundled ship model is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ShipModelFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_file(file)
    }

    pub fn to_file(&self) -> ShipModelFile {
        self.file.clone()
    }

    pub fn from_file(file: ShipModelFile) -> Result<Self> {
        let mass = mat3(&file.mass);
        if (mass - mass.transpose()).abs().max() > 1e-12 * mass.abs().max().max(1.0) {
            return Err(Error::Config("mass matrix is not symmetric".into()));
        }
        if mass.cholesky().is_none() {
            return Err(Error::Config("mass matrix is not positive definite".into()));
        }
        let mass_inv = mass
            .try_inverse()
            .ok_or_else(|| Error::Config("mass matrix is singular".into()))?;

        let damping_linear = mat3(&file.damping_linear);
        let sym = (damping_linear + damping_linear.transpose()) * 0.5;
        let min_eig = sym.symmetric_eigenvalues().min();
        if min_eig < -1e-12 {
            return Err(Error::Config(format!(
                "linear damping is not dissipative (min eigenvalue of symmetric part {min_eig})"
            )));
        }
        let damping_quadratic = Vector3::from(file.damping_quadratic.unwrap_or([0.0; 3]));
        if damping_quadratic.iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::Config(
                "quadratic damping coefficients must be finite and non-negative".into(),
            ));
        }
        let actuation = Matrix3x2::from_fn(|i, j| file.actuation[i][j]);
        for (name, v) in [
            ("surge_force_max", file.surge_force_max),
            ("yaw_moment_max", file.yaw_moment_max),
            ("hull_radius", file.hull_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }

        let mut model = Self {
            name: file.name.clone(),
            mass,
            mass_inv,
            damping_linear,
            damping_quadratic,
            actuation,
            surge_force_max: file.surge_force_max,
            yaw_moment_max: file.yaw_moment_max,
            hull_radius: file.hull_radius,
            u_max: 1.0,
            r_max: 1.0,
            file,
        };
        let u_ss = model.steady_state(ControlInput::new(model.surge_force_max, 0.0))?;
        let r_ss = model.steady_state(ControlInput::new(0.0, model.yaw_moment_max))?;
        model.u_max = match model.file.u_max {
            Some(u) if u > 0.0 => u,
            Some(u) => return Err(Error::Config(format!("u_max must be positive, got {u}"))),
            None => u_ss[0],
        };
        if !(model.u_max > 0.0) {
            return Err(Error::Config(
                "full surge thrust does not produce forward motion".into(),
            ));
        }
        model.r_max = r_ss[2].abs().max(1e-6);
        Ok(model)
    }

    /// Velocity reached from rest under a constant input.
    fn steady_state(&self, f: ControlInput) -> Result<Vector3<f64>> {
        let cfg = SimConfig::default();
        let mut state = VesselState::at_rest(0.0, 0.0, 0.0);
        for _ in 0..200_000 {
            let next = step(&state, f, self, &cfg)?;
            let delta = (next.nu - state.nu).abs().max();
            state = next;
            if delta < 1e-12 {
                break;
            }
        }
        Ok(state.nu)
    }

    /// Skew-symmetric Coriolis/centripetal matrix derived from `M`.
    pub fn coriolis(&self, nu: &Vector3<f64>) -> Matrix3<f64> {
        let m = &self.mass;
        let a = m[(1, 0)] * nu[0] + m[(1, 1)] * nu[1] + m[(1, 2)] * nu[2];
        let b = m[(0, 0)] * nu[0] + m[(0, 1)] * nu[1] + m[(0, 2)] * nu[2];
        Matrix3::new(0.0, 0.0, -a, 0.0, 0.0, b, a, -b, 0.0)
    }

    pub fn damping(&self, nu: &Vector3<f64>) -> Matrix3<f64> {
        let mut d = self.damping_linear;
        for i in 0..3 {
            d[(i, i)] += self.damping_quadratic[i] * nu[i].abs();
        }
        d
    }

    pub fn kinetic_energy(&self, nu: &Vector3<f64>) -> f64 {
        0.5 * nu.dot(&(self.mass * nu))
    }

    pub fn generalized_force(&self, f: ControlInput) -> Vector3<f64> {
        self.actuation * f.as_vector()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    #[default]
    Rk4,
    SemiImplicitEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub integrator: Integrator,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            integrator: Integrator::Rk4,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// Returns `(eta_dot, nu_dot)`.
pub fn derivatives(state: &VesselState, f: ControlInput, model: &ShipModel) -> (Vector3<f64>, Vector3<f64>) {
    let nu = &state.nu;
    let eta_dot = rotation_matrix(state.eta[2]) * nu;
    let tau = model.generalized_force(f);
    let nu_dot = model.mass_inv * (tau - model.coriolis(nu) * nu - model.damping(nu) * nu);
    (eta_dot, nu_dot)
}

/// Advances the state by one `dt`. The input is saturated to the model limits.
pub fn step(state: &VesselState, f: ControlInput, model: &ShipModel, cfg: &SimConfig) -> Result<VesselState> {
    let f = f.saturate(model);
    let dt = cfg.dt;
    let mut next = match cfg.integrator {
        Integrator::Rk4 => {
            let offset = |s: &VesselState, k: &(Vector3<f64>, Vector3<f64>), h: f64| VesselState {
                eta: s.eta + k.0 * h,
                nu: s.nu + k.1 * h,
            };
            let k1 = derivatives(state, f, model);
            let k2 = derivatives(&offset(state, &k1, 0.5 * dt), f, model);
            let k3 = derivatives(&offset(state, &k2, 0.5 * dt), f, model);
            let k4 = derivatives(&offset(state, &k3, dt), f, model);
            VesselState {
                eta: state.eta + (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0) * (dt / 6.0),
                nu: state.nu + (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1) * (dt / 6.0),
            }
        }
        Integrator::SemiImplicitEuler => {
            let (_, nu_dot) = derivatives(state, f, model);
            let nu = state.nu + nu_dot * dt;
            let eta = state.eta + rotation_matrix(state.eta[2]) * nu * dt;
            VesselState { eta, nu }
        }
    };
    next.eta[2] = wrap_angle(next.eta[2]);
    if !next.is_finite() {
        return Err(Error::SimulationFault(format!(
            "non-finite state after step from {:?}",
            state
        )));
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ShipModel {
        ShipModel::cybership2_like()
    }

    #[test]
    fn rotation_identity_and_quarter_turn() {
        assert_eq!(rotation_matrix(0.0), Matrix3::identity());
        let r = rotation_matrix(PI / 2.0);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(r, expected, epsilon = 1e-15);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let psi = rng.random_range(-10.0..10.0);
            let r = rotation_matrix(psi);
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() <= 1e-12);
            assert!((r.determinant() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-7.0), -7.0 + 2.0 * PI, epsilon = 1e-12);
    }

    #[test]
    fn equilibrium_has_zero_derivatives() {
        let m = model();
        let s = VesselState::at_rest(3.0, -2.0, 0.4);
        let (eta_dot, nu_dot) = derivatives(&s, ControlInput::default(), &m);
        assert_eq!(eta_dot, Vector3::zeros());
        assert_eq!(nu_dot, Vector3::zeros());
        let next = step(&s, ControlInput::default(), &m, &SimConfig::default()).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn pure_surge_heading_north() {
        let s = VesselState::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        let (eta_dot, _) = derivatives(&s, ControlInput::default(), &model());
        assert_abs_diff_eq!(eta_dot, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn coriolis_does_no_work() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let nu = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            let work = nu.dot(&(m.coriolis(&nu) * nu));
            assert!(work.abs() <= 1e-10 * nu.norm_squared());
        }
    }

    #[test]
    fn energy_balance_identity() {
        // d/dt(0.5 nu^T M nu) = nu^T M nu_dot must equal nu^T (B f - D nu).
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = VesselState::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-2.0..3.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.3..0.3),
            );
            let f = ControlInput::new(
                rng.random_range(-m.surge_force_max..m.surge_force_max),
                rng.random_range(-m.yaw_moment_max..m.yaw_moment_max),
            );
            let (_, nu_dot) = derivatives(&s, f, &m);
            let lhs = s.nu.dot(&(m.mass * nu_dot));
            let rhs = s.nu.dot(&(m.generalized_force(f) - m.damping(&s.nu) * s.nu));
            assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn rk4_step_halving_converges_at_fourth_order() {
        let m = model();
        let start = VesselState::new(0.0, 0.0, 0.3, 1.0, 0.2, 0.05);
        let f = ControlInput::new(0.7 * m.surge_force_max, -0.6 * m.yaw_moment_max);
        let horizon = 20.0;
        let run = |dt: f64| {
            let cfg = SimConfig {
                dt,
                integrator: Integrator::Rk4,
            };
            let n = (horizon / dt).round() as usize;
            let mut s = start;
            for _ in 0..n {
                s = step(&s, f, &m, &cfg).unwrap();
            }
            s
        };
        let err = |a: &VesselState, b: &VesselState| (a.eta - b.eta).abs().max().max((a.nu - b.nu).abs().max());
        let (s1, s2, s4) = (run(0.2), run(0.1), run(0.05));
        let ratio = err(&s1, &s2) / err(&s2, &s4);
        // Richardson ratio for a fourth-order method is 2^4 = 16.
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn zero_control_dissipates_energy() {
        let m = model();
        let cfg = SimConfig::default();
        let mut s = VesselState::new(0.0, 0.0, 0.0, 2.0, -0.5, 0.2);
        let mut e = m.kinetic_energy(&s.nu);
        for _ in 0..10_000 {
            s = step(&s, ControlInput::default(), &m, &cfg).unwrap();
            let e_next = m.kinetic_energy(&s.nu);
            assert!(e_next <= e + 1e-15, "{e_next} > {e}");
            e = e_next;
        }
    }

    #[test]
    fn step_is_bitwise_deterministic() {
        let m = model();
        let s = VesselState::new(1.0, 2.0, 0.3, 1.2, 0.1, -0.02);
        let f = ControlInput::new(3.0, 0.05);
        for integrator in [Integrator::Rk4, Integrator::SemiImplicitEuler] {
            let cfg = SimConfig { dt: 0.1, integrator };
            let a = step(&s, f, &m, &cfg).unwrap();
            let b = step(&s, f, &m, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn input_is_saturated() {
        let m = model();
        let cfg = SimConfig::default();
        let s = VesselState::at_rest(0.0, 0.0, 0.0);
        let big = step(&s, ControlInput::new(1e9, 1e9), &m, &cfg).unwrap();
        let max = step(&s, ControlInput::new(m.surge_force_max, m.yaw_moment_max), &m, &cfg).unwrap();
        assert_eq!(big, max);
        let f = ControlInput::from_action([2.0, -0.5], &m);
        assert_eq!(f.surge_force, m.surge_force_max);
        assert_eq!(f.yaw_moment, -0.5 * m.yaw_moment_max);
    }

    #[test]
    fn u_max_is_steady_state_speed() {
        let m = model();
        assert!(m.u_max > 0.0);
        let s = VesselState::new(0.0, 0.0, 0.0, m.u_max, 0.0, 0.0);
        let (_, nu_dot) = derivatives(&s, ControlInput::new(m.surge_force_max, 0.0), &m);
        assert!(nu_dot.abs().max() < 1e-9);
    }

    #[test]
    fn rejects_invalid_models() {
        let mut file = model().to_file();
        file.mass[0][1] = 3.0;
        assert!(ShipModel::from_file(file).is_err());

        let mut file = model().to_file();
        file.mass = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(ShipModel::from_file(file).is_err());

        let mut file = model().to_file();
        file.damping_linear[0][0] = -1.0;
        assert!(ShipModel::from_file(file).is_err());
    }

    #[test]
    fn quadratic_damping_model_loads() {
        let mut file = model().to_file();
        file.damping_quadratic = Some([1.0, 2.0, 0.5]);
        let m = ShipModel::from_file(file).unwrap();
        let base = model();
        assert!(m.u_max < base.u_max);
    }
}
