//! Ready-to-simulate loops: the car-following scenario and scalar LTI
//! reductions used for validation.

use nalgebra::{DMatrix, DVector};

use crate::attack::AttackConfig;
use crate::detector::NormalizationSchedule;
use crate::error::{Error, Result};
use crate::linalg::psd_sqrt;
use crate::synthesis::{
    change_coordinates, discretize_zoh, linearize_unicycle, lqr_gains_with_cost, observer_gains,
    stationary_lqr_cost, stationary_lqr_gain, stationary_observer_gain,
    stationary_prediction_covariance, weaving_trajectory, ReferenceTrajectory, TrajectoryParams,
    CAR_INPUT_DIM, CAR_STATE_DIM,
};
use crate::system::{simulate, DetectionTrace, GainSchedule, NoiseSchedule, StateSpaceSchedule};

/// Plant, noise, gains and the analytic normalization derived from them.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub system: StateSpaceSchedule,
    pub noise: NoiseSchedule,
    pub gains: GainSchedule,
    pub normalization: NormalizationSchedule,
}

impl Scenario {
    pub fn new(system: StateSpaceSchedule, noise: NoiseSchedule, gains: GainSchedule) -> Result<Self> {
        noise.check_against(&system)?;
        gains.check_against(&system)?;
        noise.require_positive_definite(system.horizon())?;
        let normalization = NormalizationSchedule::analytic(&system, &gains, &noise)?;
        Ok(Self {
            system,
            noise,
            gains,
            normalization,
        })
    }

    pub fn horizon(&self) -> usize {
        self.system.horizon()
    }

    pub fn dt(&self) -> f64 {
        self.system.dt()
    }

    pub fn simulate(&self, attack: Option<&AttackConfig>, seed: u64) -> Result<DetectionTrace> {
        simulate(&self.system, &self.noise, &self.gains, attack, self.horizon(), seed)
    }

    /// Scalar time-invariant loop with stationary LQR and filter gains.
    pub fn scalar_lti(params: &ScalarParams, horizon: usize) -> Result<Self> {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        let (a, b, c) = (m(params.a), m(params.b), m(params.c));
        let (sw, sz, se) = (m(params.process), m(params.measurement), m(params.watermark));
        let k = stationary_lqr_gain(&a, &b, &m(params.lqr_q), &m(params.lqr_r))?;
        let l = stationary_observer_gain(&a, &c, &sw, &sz)?;
        let system = StateSpaceSchedule::time_invariant(params.dt, horizon, a, b, c)?;
        let noise = NoiseSchedule::time_invariant(horizon, sw, sz, se)?;
        let gains = GainSchedule::new(vec![k; horizon.max(1)], vec![l; horizon.max(1)]);
        Self::new(system, noise, gains)
    }
}

/// Scalar plant `x+ = a x + b u`, `y = c x` with scalar covariances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub process: f64,
    pub measurement: f64,
    pub watermark: f64,
    pub lqr_q: f64,
    pub lqr_r: f64,
    pub dt: f64,
}

impl Default for ScalarParams {
    fn default() -> Self {
        Self {
            a: 0.9,
            b: 1.0,
            c: 1.0,
            process: 0.1,
            measurement: 0.1,
            watermark: 1.0,
            lqr_q: 1.0,
            lqr_r: 1.0,
            dt: 0.05,
        }
    }
}

/// State realization of the car loop.
///
/// In physical coordinates `(x, y, ψ, v, ψ̇)` no controller can make
/// `‖A + BK‖ < 1`: position and heading are only reached through integrators.
/// `CostBalanced` uses `x'[n] = P[n]^{1/2} x[n]` with `P[n]` the LQR
/// cost-to-go, in which the closed loop is a strict contraction at every
/// step. Residuals and the detector are identical in both realizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CarCoordinates {
    Physical,
    #[default]
    CostBalanced,
}

/// Car scenario settings. Covariances are the values at the reference speed;
/// per-step covariances scale with `max(|v[n]| / v_ref, noise_floor)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CarParams {
    pub dt: f64,
    pub trajectory: TrajectoryParams,
    pub lqr_q: DVector<f64>,
    pub lqr_r: DVector<f64>,
    pub process_base: DMatrix<f64>,
    pub measurement_base: DMatrix<f64>,
    pub watermark: DMatrix<f64>,
    pub noise_floor: f64,
    pub coordinates: CarCoordinates,
}

impl Default for CarParams {
    fn default() -> Self {
        Self {
            dt: 0.05,
            trajectory: TrajectoryParams::default(),
            lqr_q: DVector::from_element(CAR_STATE_DIM, 1.0),
            lqr_r: DVector::from_element(CAR_INPUT_DIM, 1.0),
            process_base: DMatrix::from_diagonal(&DVector::from_vec(vec![
                1e-4, 1e-4, 1e-5, 1e-4, 1e-5,
            ])),
            measurement_base: DMatrix::from_diagonal(&DVector::from_vec(vec![
                1e-4, 1e-4, 1e-5, 1e-4, 1e-5,
            ])),
            watermark: DMatrix::from_diagonal(&DVector::from_vec(vec![0.04, 0.01])),
            noise_floor: 0.1,
            coordinates: CarCoordinates::default(),
        }
    }
}

/// The car loop: linearized, discretized, stabilized and observed.
#[derive(Debug, Clone)]
pub struct CarScenario {
    pub trajectory: ReferenceTrajectory,
    pub speed_scale: Vec<f64>,
    /// `T[0..=N]` mapping physical states to the realized ones, if any.
    pub transforms: Option<Vec<DMatrix<f64>>>,
    pub scenario: Scenario,
}

impl CarScenario {
    /// Maps a physical-coordinate state covariance onto the realized state at
    /// each step `n + 1`, for false-state noise of custom attacks.
    pub fn realized_state_covariance(&self, physical: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let h = self.scenario.horizon();
        match &self.transforms {
            None => vec![physical.clone(); h],
            Some(t) => (0..h)
                .map(|n| {
                    let m = &t[n + 1] * physical * t[n + 1].transpose();
                    (&m + m.transpose()) * 0.5
                })
                .collect(),
        }
    }
}

pub fn build_car_scenario(params: &CarParams) -> Result<CarScenario> {
    if !(params.noise_floor > 0.0) {
        return Err(Error::InvalidParameter("noise floor must be positive".into()));
    }
    if params.lqr_q.len() != CAR_STATE_DIM || params.lqr_r.len() != CAR_INPUT_DIM {
        return Err(Error::InvalidParameter(format!(
            "LQR diagonals must have {CAR_STATE_DIM} and {CAR_INPUT_DIM} entries"
        )));
    }
    let trajectory = weaving_trajectory(params.dt, &params.trajectory)?;
    let horizon = trajectory.len();
    let jac = linearize_unicycle(&trajectory)?;
    let mut a = Vec::with_capacity(horizon);
    let mut b = Vec::with_capacity(horizon);
    for (a_c, b_c) in &jac {
        let (ad, bd) = discretize_zoh(a_c, b_c, params.dt)?;
        a.push(ad);
        b.push(bd);
    }
    let c = vec![DMatrix::identity(CAR_STATE_DIM, CAR_STATE_DIM); horizon];
    let system = StateSpaceSchedule::new(params.dt, horizon, a, b, c)?;

    let v_ref = trajectory.mean_speed();
    let speed_scale: Vec<f64> = trajectory
        .samples()
        .iter()
        .map(|s| (s.speed.abs() / v_ref).max(params.noise_floor))
        .collect();
    let noise = NoiseSchedule::new(
        speed_scale.iter().map(|k| &params.process_base * *k).collect(),
        speed_scale.iter().map(|k| &params.measurement_base * *k).collect(),
        params.watermark.clone(),
    )?;

    let q = DMatrix::from_diagonal(&params.lqr_q);
    let r = DMatrix::from_diagonal(&params.lqr_r);
    let last = horizon - 1;
    let terminal = stationary_lqr_cost(system.a(last), system.b(last), &q, &r)?;
    let (k, costs) = lqr_gains_with_cost(&system, &q, &r, &terminal)?;
    let p0 = stationary_prediction_covariance(
        system.a(0),
        system.c(0),
        noise.process(0),
        noise.measurement(0),
    )?;
    let l = observer_gains(&system, &noise, &p0)?;
    let gains = GainSchedule::new(k, l);
    let (scenario, transforms) = match params.coordinates {
        CarCoordinates::Physical => (Scenario::new(system, noise, gains)?, None),
        CarCoordinates::CostBalanced => {
            let t = costs
                .iter()
                .map(|p| psd_sqrt(p, "LQR cost-to-go"))
                .collect::<Result<Vec<_>>>()?;
            let (system, noise, gains) = change_coordinates(&system, &noise, &gains, &t)?;
            (Scenario::new(system, noise, gains)?, Some(t))
        }
    };
    Ok(CarScenario {
        trajectory,
        speed_scale,
        transforms,
        scenario,
    })
}
