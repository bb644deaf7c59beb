//! Longitudinal vehicle physics.
//!
//! Kinematics follow the point-mass model `ḋ = v_prev − v`, `v̇ = u` with a
//! hard feasibility box on velocity and acceleration. Traction power comes
//! from the flat-road force balance
//!
//! ```text
//! F = m·u + m·g·f + ½·ρ·A_f·C_d·v²
//! ```
//!
//! and a constant motor efficiency that divides in traction and multiplies
//! in regeneration. [`fit_energy_poly`] fits the bivariate quartic surrogate
//! `P(v, u) = Σ p_kj v^k u^j` used by the reward.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum admissible spacing; reaching it counts as a collision.
pub const MIN_SPACING_M: f64 = 1.0;
pub const V_MIN_MPS: f64 = 0.0;
pub const V_MAX_MPS: f64 = 30.0;
pub const U_MAX_MPS2: f64 = 2.5;

/// Degree + 1 of the energy surrogate along each axis.
pub const POLY_ORDER: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    /// kg
    pub mass: f64,
    pub rolling_coeff: f64,
    /// kg/m³
    pub air_density: f64,
    pub drag_coeff: f64,
    /// m²
    pub frontal_area: f64,
    /// m/s²
    pub gravity: f64,
    /// m
    pub wheel_radius: f64,
    /// Final drive × gearbox. Kept for completeness; power does not depend on it.
    pub gear_ratio: f64,
    pub motor_efficiency: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1718.4,
            rolling_coeff: 0.011,
            air_density: 1.206,
            drag_coeff: 0.32,
            frontal_area: 2.455,
            gravity: 9.8,
            wheel_radius: 0.337,
            gear_ratio: 3.91 * 4.14,
            motor_efficiency: 0.9,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vehicle.mass", self.mass),
            ("vehicle.rolling_coeff", self.rolling_coeff),
            ("vehicle.air_density", self.air_density),
            ("vehicle.drag_coeff", self.drag_coeff),
            ("vehicle.frontal_area", self.frontal_area),
            ("vehicle.gravity", self.gravity),
            ("vehicle.wheel_radius", self.wheel_radius),
            ("vehicle.gear_ratio", self.gear_ratio),
            ("vehicle.motor_efficiency", self.motor_efficiency),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(name, format!("must be > 0, got {value}")));
            }
        }
        if self.motor_efficiency > 1.0 {
            return Err(Error::config(
                "vehicle.motor_efficiency",
                format!("must be <= 1, got {}", self.motor_efficiency),
            ));
        }
        Ok(())
    }
}

/// Dynamic state of one vehicle: gap to its predecessor, speed and the
/// acceleration applied during the last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub spacing: f64,
    pub velocity: f64,
    pub accel: f64,
}

pub fn clip_accel(u: f64) -> f64 {
    u.clamp(-U_MAX_MPS2, U_MAX_MPS2)
}

/// Distance covered in `dt` starting at `v` under constant `u`, with the
/// velocity saturating at the `[0, 30]` box once it reaches a bound.
pub fn displacement(v: f64, u: f64, dt: f64) -> f64 {
    let v = v.clamp(V_MIN_MPS, V_MAX_MPS);
    let v_end = v + u * dt;
    if u > 0.0 && v_end > V_MAX_MPS {
        let t_hit = (V_MAX_MPS - v) / u;
        v * t_hit + 0.5 * u * t_hit * t_hit + V_MAX_MPS * (dt - t_hit)
    } else if u < 0.0 && v_end < V_MIN_MPS {
        let t_hit = v / -u;
        v * t_hit + 0.5 * u * t_hit * t_hit
    } else {
        v * dt + 0.5 * u * dt * dt
    }
}

/// Advances one vehicle by `dt` given its predecessor's speed and
/// acceleration at the start of the step.
///
/// The spacing update is the exact integral of `v_prev − v` over the step for
/// piecewise-constant accelerations, including the saturated portion when
/// either vehicle hits a velocity bound.
pub fn step_kinematics(
    state: VehicleState,
    v_prev: f64,
    u_prev: f64,
    u_cmd: f64,
    dt: f64,
) -> Result<VehicleState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let inputs = [state.spacing, state.velocity, v_prev, u_prev, u_cmd];
    if inputs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite kinematic input {inputs:?}"
        )));
    }
    let pred_disp = displacement(v_prev, u_prev, dt);
    Ok(advance(state, pred_disp, u_cmd, dt))
}

/// Same as [`step_kinematics`] with the predecessor's displacement over the
/// step supplied directly (used for replayed traces that may leave the box).
pub(crate) fn advance(state: VehicleState, pred_disp: f64, u_cmd: f64, dt: f64) -> VehicleState {
    let u = clip_accel(u_cmd);
    let own_disp = displacement(state.velocity, u, dt);
    VehicleState {
        spacing: state.spacing + pred_disp - own_disp,
        velocity: (state.velocity + u * dt).clamp(V_MIN_MPS, V_MAX_MPS),
        accel: u,
    }
}

/// Tractive force at the wheel in newtons.
pub fn driving_force(params: &VehicleParams, v: f64, u: f64) -> f64 {
    let inertial = params.mass * u;
    let rolling = params.mass * params.gravity * params.rolling_coeff;
    let aero = 0.5 * params.air_density * params.frontal_area * params.drag_coeff * v * v;
    inertial + rolling + aero
}

/// Mechanical power at the wheel in watts.
pub fn wheel_power(params: &VehicleParams, v: f64, u: f64) -> f64 {
    driving_force(params, v, u) * v
}

/// Electrical power drawn from (positive) or returned to (negative) the
/// battery, in kW.
pub fn electric_power(params: &VehicleParams, v: f64, u: f64) -> f64 {
    let p_wheel = wheel_power(params, v, u);
    let eta = params.motor_efficiency;
    let p = if p_wheel >= 0.0 {
        p_wheel / eta
    } else {
        p_wheel * eta
    };
    p / 1000.0
}

/// Coefficients `p_kj` of `P(v, u) = Σ_k Σ_j p_kj v^k u^j`, indexed
/// `coeffs[k][j]` (k: velocity power, j: acceleration power).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyPoly {
    pub coeffs: [[f64; POLY_ORDER]; POLY_ORDER],
}

impl EnergyPoly {
    pub fn eval(&self, v: f64, u: f64) -> f64 {
        eval_energy_poly(self, v, u)
    }

    /// Row-major (k outer, j inner) view of the 25 coefficients.
    pub fn to_flat(&self) -> Vec<f64> {
        self.coeffs.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != POLY_ORDER * POLY_ORDER {
            return Err(Error::Usage(format!(
                "energy polynomial needs {} coefficients, got {}",
                POLY_ORDER * POLY_ORDER,
                values.len()
            )));
        }
        let mut coeffs = [[0.0; POLY_ORDER]; POLY_ORDER];
        for (idx, &c) in values.iter().enumerate() {
            coeffs[idx / POLY_ORDER][idx % POLY_ORDER] = c;
        }
        Ok(Self { coeffs })
    }
}

/// Nested Horner evaluation, kW.
pub fn eval_energy_poly(poly: &EnergyPoly, v: f64, u: f64) -> f64 {
    poly.coeffs.iter().rev().fold(0.0, |acc, row| {
        let inner = row.iter().rev().fold(0.0, |a, &c| a * u + c);
        acc * v + inner
    })
}

/// Uniform sample counts over `v ∈ [0, 30]` and `u ∈ [−2.5, 2.5]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub v_samples: usize,
    pub u_samples: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            v_samples: 61,
            u_samples: 51,
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn midpoints(xs: &[f64]) -> Vec<f64> {
    xs.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

impl GridSpec {
    pub fn points(&self) -> Vec<(f64, f64)> {
        let vs = linspace(V_MIN_MPS, V_MAX_MPS, self.v_samples);
        let us = linspace(-U_MAX_MPS2, U_MAX_MPS2, self.u_samples);
        cartesian(&vs, &us)
    }

    /// Cell centres of the fit grid, offset half a cell along both axes.
    pub fn offset_points(&self) -> Vec<(f64, f64)> {
        let vs = midpoints(&linspace(V_MIN_MPS, V_MAX_MPS, self.v_samples));
        let us = midpoints(&linspace(-U_MAX_MPS2, U_MAX_MPS2, self.u_samples));
        cartesian(&vs, &us)
    }
}

fn cartesian(vs: &[f64], us: &[f64]) -> Vec<(f64, f64)> {
    vs.iter()
        .flat_map(|&v| us.iter().map(move |&u| (v, u)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyFit {
    pub poly: EnergyPoly,
    /// Root-mean-square residual on the fit grid, kW.
    pub rmse_kw: f64,
}

/// Least-squares fit of the quartic surrogate against [`electric_power`].
///
/// The regression runs on `v/30` and `u/2.5` so that the design matrix stays
/// well conditioned; the coefficients are rescaled afterwards.
pub fn fit_energy_poly(params: &VehicleParams, grid: GridSpec) -> Result<EnergyFit> {
    let n_terms = POLY_ORDER * POLY_ORDER;
    let points = grid.points();
    if points.len() < n_terms {
        return Err(Error::Fit(format!(
            "grid {}x{} has {} points, need at least {n_terms}",
            grid.v_samples,
            grid.u_samples,
            points.len()
        )));
    }
    let v_scale = V_MAX_MPS;
    let u_scale = U_MAX_MPS2;
    let design = DMatrix::from_fn(points.len(), n_terms, |row, col| {
        let (v, u) = points[row];
        let (k, j) = (col / POLY_ORDER, col % POLY_ORDER);
        (v / v_scale).powi(k as i32) * (u / u_scale).powi(j as i32)
    });
    let target = DVector::from_iterator(
        points.len(),
        points.iter().map(|&(v, u)| electric_power(params, v, u)),
    );

    let svd = design.svd(true, true);
    let s_max = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * s_max)
        .count();
    if rank < n_terms {
        return Err(Error::Fit(format!(
            "design matrix is rank deficient ({rank} of {n_terms}); grid {}x{} does not span both axes",
            grid.v_samples, grid.u_samples
        )));
    }
    let scaled = svd
        .solve(&target, 0.0)
        .map_err(|e| Error::Fit(e.to_string()))?;

    let mut coeffs = [[0.0; POLY_ORDER]; POLY_ORDER];
    for (k, row) in coeffs.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = scaled[k * POLY_ORDER + j] / (v_scale.powi(k as i32) * u_scale.powi(j as i32));
        }
    }
    let poly = EnergyPoly { coeffs };
    let rmse_kw = rmse_against_physics(&poly, params, &points);
    Ok(EnergyFit { poly, rmse_kw })
}

/// RMSE (kW) between the surrogate and the physics model on `points`.
pub fn rmse_against_physics(poly: &EnergyPoly, params: &VehicleParams, points: &[(f64, f64)]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let sse: f64 = points
        .iter()
        .map(|&(v, u)| (poly.eval(v, u) - electric_power(params, v, u)).powi(2))
        .sum();
    (sse / points.len() as f64).sqrt()
}

/// Source of per-step electrical power used by the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnergyModel {
    Physics(VehicleParams),
    Poly(EnergyPoly),
}

impl EnergyModel {
    pub fn power_kw(&self, v: f64, u: f64) -> f64 {
        match self {
            EnergyModel::Physics(p) => electric_power(p, v, u),
            EnergyModel::Poly(poly) => poly.eval(v, u),
        }
    }
}
