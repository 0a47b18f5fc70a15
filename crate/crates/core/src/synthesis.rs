//! Plant construction and gain synthesis.
//!
//! The car model has state `(x, y, ψ, v, ψ̇)` and inputs `(a, ψ̈)`:
//!
//! ```text
//! ẋ = v cos ψ,  ẏ = v sin ψ,  ψ̇ = ψ̇,  v̇ = a,  ψ̈ = ψ̈
//! ```
//!
//! It is linearized about a reference trajectory, discretized with a zero-order
//! hold, and stabilized with a time-varying LQR controller and a Kalman-style
//! observer. Observer gains follow the `x̂[n+1] = … - L[n] y[n]` convention, so
//! `L` is the negative of the textbook Kalman predictor gain.

use std::f64::consts::TAU;

use nalgebra::DMatrix;

use crate::detector::NormalizationSchedule;
use crate::error::{Error, Result};
use crate::linalg::{max_abs, require_shape, require_square, spectral_norm, try_inverse};
use crate::system::{GainSchedule, NoiseSchedule, StateSpaceSchedule};

pub const CAR_STATE_DIM: usize = 5;
pub const CAR_INPUT_DIM: usize = 2;

/// Reference car state and inputs at one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub yaw_rate: f64,
    pub accel: f64,
    pub yaw_accel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    dt: f64,
    samples: Vec<TrajectorySample>,
}

impl ReferenceTrajectory {
    /// Rejects trajectories whose speed magnitude drops to `speed_floor` or below.
    pub fn new(dt: f64, samples: Vec<TrajectorySample>, speed_floor: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if let Some((n, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.speed.abs() > speed_floor))
        {
            return Err(Error::InvalidParameter(format!(
                "reference speed {} at sample {n} is not above the floor {speed_floor}",
                s.speed
            )));
        }
        Ok(Self { dt, samples })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_speed(&self) -> f64 {
        self.samples.iter().map(|s| s.speed.abs()).sum::<f64>() / self.samples.len().max(1) as f64
    }
}

/// Weaving path with periodic speed and heading profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryParams {
    pub duration: f64,
    pub mean_speed: f64,
    pub speed_amplitude: f64,
    pub speed_period: f64,
    pub heading_amplitude: f64,
    pub heading_period: f64,
    pub speed_floor: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            duration: 60.0,
            mean_speed: 10.0,
            speed_amplitude: 5.0,
            speed_period: 20.0,
            heading_amplitude: 0.3,
            heading_period: 10.0,
            speed_floor: 1.0,
        }
    }
}

/// `v(t) = v̄ + A_v sin(2πt/T_v)`, `ψ(t) = A_ψ sin(2πt/T_ψ)`; position is
/// integrated with the trapezoid rule.
pub fn weaving_trajectory(dt: f64, params: &TrajectoryParams) -> Result<ReferenceTrajectory> {
    if !(params.duration > 0.0) || !(params.speed_period > 0.0) || !(params.heading_period > 0.0) {
        return Err(Error::InvalidParameter(
            "trajectory duration and periods must be positive".into(),
        ));
    }
    let steps = (params.duration / dt).round() as usize;
    let wv = TAU / params.speed_period;
    let wh = TAU / params.heading_period;
    let mut samples: Vec<TrajectorySample> = Vec::with_capacity(steps);
    for n in 0..steps {
        let t = n as f64 * dt;
        let speed = params.mean_speed + params.speed_amplitude * (wv * t).sin();
        let accel = params.speed_amplitude * wv * (wv * t).cos();
        let heading = params.heading_amplitude * (wh * t).sin();
        let yaw_rate = params.heading_amplitude * wh * (wh * t).cos();
        let yaw_accel = -params.heading_amplitude * wh * wh * (wh * t).sin();
        let (x, y) = match samples.last() {
            None => (0.0, 0.0),
            Some(prev) => (
                prev.x + 0.5 * dt * (prev.speed * prev.heading.cos() + speed * heading.cos()),
                prev.y + 0.5 * dt * (prev.speed * prev.heading.sin() + speed * heading.sin()),
            ),
        };
        samples.push(TrajectorySample {
            x,
            y,
            heading,
            speed,
            yaw_rate,
            accel,
            yaw_accel,
        });
    }
    ReferenceTrajectory::new(dt, samples, params.speed_floor)
}

/// Continuous-time Jacobians `(A_c, B_c)` of the car model at one sample.
pub fn car_jacobians(sample: &TrajectorySample) -> (DMatrix<f64>, DMatrix<f64>) {
    let (s, c) = sample.heading.sin_cos();
    let v = sample.speed;
    let mut a = DMatrix::zeros(CAR_STATE_DIM, CAR_STATE_DIM);
    a[(0, 2)] = -v * s;
    a[(0, 3)] = c;
    a[(1, 2)] = v * c;
    a[(1, 3)] = s;
    a[(2, 4)] = 1.0;
    let mut b = DMatrix::zeros(CAR_STATE_DIM, CAR_INPUT_DIM);
    b[(3, 0)] = 1.0;
    b[(4, 1)] = 1.0;
    (a, b)
}

pub fn linearize_unicycle(traj: &ReferenceTrajectory) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    if traj.is_empty() {
        return Err(Error::InvalidParameter("empty reference trajectory".into()));
    }
    Ok(traj.samples().iter().map(car_jacobians).collect())
}

/// Exact zero-order-hold discretization through the augmented exponential
/// `exp(dt [[A_c, B_c], [0, 0]])`.
pub fn discretize_zoh(
    a_c: &DMatrix<f64>,
    b_c: &DMatrix<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let p = require_square(a_c, "A_c")?;
    if b_c.nrows() != p {
        return Err(Error::dims("B_c", (p, b_c.ncols()), b_c.shape()));
    }
    let q = b_c.ncols();
    let mut aug = DMatrix::zeros(p + q, p + q);
    aug.view_mut((0, 0), (p, p)).copy_from(&(a_c * dt));
    aug.view_mut((0, p), (p, q)).copy_from(&(b_c * dt));
    let e = aug.exp();
    if !e.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            what: "matrix exponential".into(),
        });
    }
    Ok((
        e.view((0, 0), (p, p)).into_owned(),
        e.view((0, p), (p, q)).into_owned(),
    ))
}

/// One backward Riccati step: returns `(K, P_prev)` given `P_next`.
fn lqr_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p_next: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let bt_p = b.transpose() * p_next;
    let gram = r + &bt_p * b;
    let gram_inv = try_inverse(&gram, "R + B^T P B")?;
    let k = -(&gram_inv * &bt_p * a);
    let closed = a + b * &k;
    // Joseph-like form keeps P symmetric positive semidefinite.
    let p = closed.transpose() * p_next * &closed + q + k.transpose() * r * &k;
    Ok((k, (&p + p.transpose()) * 0.5))
}

/// Backward Riccati recursion over the schedule's horizon, `u = K x̂`.
pub fn lqr_gains(
    system: &StateSpaceSchedule,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    terminal: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    let (k, _) = lqr_gains_with_cost(system, q, r, terminal)?;
    Ok(k)
}

/// Like [`lqr_gains`] but also returns the cost-to-go matrices `P[0..=N]`.
pub fn lqr_gains_with_cost(
    system: &StateSpaceSchedule,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    terminal: &DMatrix<f64>,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let p_dim = system.state_dim();
    let q_dim = system.input_dim();
    require_shape(q, p_dim, p_dim, "Q")?;
    require_shape(r, q_dim, q_dim, "R")?;
    require_shape(terminal, p_dim, p_dim, "P_N")?;
    let h = system.horizon();
    let mut gains = vec![DMatrix::zeros(q_dim, p_dim); h];
    let mut costs = vec![DMatrix::zeros(p_dim, p_dim); h + 1];
    costs[h] = terminal.clone();
    for n in (0..h).rev() {
        let (k, p) = lqr_step(system.a(n), system.b(n), q, r, &costs[n + 1])?;
        gains[n] = k;
        costs[n] = p;
    }
    Ok((gains, costs))
}

/// Stationary LQR cost for a single `(A, B)` by iterating the Riccati map.
pub fn stationary_lqr_cost(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    for _ in 0..200_000 {
        let (_, next) = lqr_step(a, b, q, r, &p)?;
        let change = max_abs(&(&next - &p));
        p = next;
        if change <= 1e-13 * max_abs(&p).max(1.0) {
            return Ok(p);
        }
    }
    Err(Error::NonFinite {
        what: "stationary LQR iteration (no convergence)".into(),
    })
}

pub fn stationary_lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = stationary_lqr_cost(a, b, q, r)?;
    Ok(lqr_step(a, b, q, r, &p)?.0)
}

/// Re-expresses a loop in the state coordinates `x'[n] = T[n] x[n]`.
///
/// `transforms` holds `T[0..=N]`. Outputs, inputs, residuals and the
/// normalization are unchanged; only the state realization moves.
pub fn change_coordinates(
    system: &StateSpaceSchedule,
    noise: &NoiseSchedule,
    gains: &GainSchedule,
    transforms: &[DMatrix<f64>],
) -> Result<(StateSpaceSchedule, NoiseSchedule, GainSchedule)> {
    let h = system.horizon();
    let p = system.state_dim();
    noise.check_against(system)?;
    gains.check_against(system)?;
    if transforms.len() < h + 1 {
        return Err(Error::InvalidParameter(format!(
            "need {} coordinate transforms, got {}",
            h + 1,
            transforms.len()
        )));
    }
    let inverses = transforms[..=h]
        .iter()
        .enumerate()
        .map(|(n, t)| {
            require_shape(t, p, p, &format!("T[{n}]"))?;
            try_inverse(t, "coordinate transform")
        })
        .collect::<Result<Vec<_>>>()?;
    let t = transforms;
    let mut a = Vec::with_capacity(h);
    let mut b = Vec::with_capacity(h);
    let mut c = Vec::with_capacity(h);
    let mut sw = Vec::with_capacity(h);
    let mut k = Vec::with_capacity(h);
    let mut l = Vec::with_capacity(h);
    for n in 0..h {
        a.push(&t[n + 1] * system.a(n) * &inverses[n]);
        b.push(&t[n + 1] * system.b(n));
        c.push(system.c(n) * &inverses[n]);
        let w = &t[n + 1] * noise.process(n) * t[n + 1].transpose();
        sw.push((&w + w.transpose()) * 0.5);
        k.push(&gains.controller[n] * &inverses[n]);
        l.push(&t[n + 1] * &gains.observer[n]);
    }
    let sz = (0..h).map(|n| noise.measurement(n).clone()).collect();
    Ok((
        StateSpaceSchedule::new(system.dt(), h, a, b, c)?,
        NoiseSchedule::new(sw, sz, noise.watermark().clone())?,
        GainSchedule::new(k, l),
    ))
}

/// One forward filter step: returns `(L, P_next)` given the prediction covariance `P`.
fn observer_step(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    sigma_w: &DMatrix<f64>,
    sigma_z: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let innovation = c * p * c.transpose() + sigma_z;
    let inv = try_inverse(&innovation, "innovation covariance")?;
    let l = -(a * p * c.transpose() * inv);
    let obs = a + &l * c;
    let next = &obs * p * obs.transpose() + sigma_w + &l * sigma_z * l.transpose();
    Ok((l, (&next + next.transpose()) * 0.5))
}

/// Forward Riccati (Kalman predictor) recursion from the prediction
/// covariance `initial` at step 0.
///
/// `L[n] = -A P Cᵀ (C P Cᵀ + Σz)⁻¹`, making `A + L C` the error dynamics.
pub fn observer_gains(
    system: &StateSpaceSchedule,
    noise: &NoiseSchedule,
    initial: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    Ok(observer_gains_with_covariance(system, noise, initial)?.0)
}

pub fn observer_gains_with_covariance(
    system: &StateSpaceSchedule,
    noise: &NoiseSchedule,
    initial: &DMatrix<f64>,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    noise.check_against(system)?;
    let p_dim = system.state_dim();
    require_shape(initial, p_dim, p_dim, "initial prediction covariance")?;
    let h = system.horizon();
    let mut gains = Vec::with_capacity(h);
    let mut covs = Vec::with_capacity(h + 1);
    let mut p = initial.clone();
    for n in 0..h {
        let (l, next) = observer_step(
            system.a(n),
            system.c(n),
            noise.process(n),
            noise.measurement(n),
            &p,
        )?;
        gains.push(l);
        covs.push(std::mem::replace(&mut p, next));
    }
    covs.push(p);
    Ok((gains, covs))
}

/// Stationary prediction covariance for a single `(A, C, Σw, Σz)`.
pub fn stationary_prediction_covariance(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    sigma_w: &DMatrix<f64>,
    sigma_z: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut p = sigma_w.clone();
    for _ in 0..200_000 {
        let (_, next) = observer_step(a, c, sigma_w, sigma_z, &p)?;
        let change = max_abs(&(&next - &p));
        p = next;
        if change <= 1e-13 * max_abs(&p).max(1.0) {
            return Ok(p);
        }
    }
    Err(Error::NonFinite {
        what: "stationary filter iteration (no convergence)".into(),
    })
}

pub fn stationary_observer_gain(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    sigma_w: &DMatrix<f64>,
    sigma_z: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = stationary_prediction_covariance(a, c, sigma_w, sigma_z)?;
    Ok(observer_step(a, c, sigma_w, sigma_z, &p)?.0)
}

/// Norm bounds and the watermark-visibility average of a synthesized loop.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub eta_a_bar: f64,
    pub eta_a_under: f64,
    pub eta_b: f64,
    pub eta_c: f64,
    pub eta_l: f64,
    pub eta_w: f64,
    pub eta_z: f64,
    pub eta_v: f64,
    pub eta_delta: f64,
    /// `(1/N) Σ_{n=1}^{N-1} C[n] B[n-1]`.
    pub watermark_corr_avg: DMatrix<f64>,
    /// Steps where `‖A[n] + B[n] K[n]‖ ≥ 1`.
    pub closed_loop_violations: Vec<usize>,
    /// Steps where `‖A[n] + L[n] C[n]‖ ≥ 1`.
    pub observer_violations: Vec<usize>,
    pub pass: bool,
}

/// Finite-horizon average below this is treated as zero.
pub const WATERMARK_CORR_TOL: f64 = 1e-6;

pub fn verify_assumptions(
    system: &StateSpaceSchedule,
    gains: &GainSchedule,
    noise: &NoiseSchedule,
    normalization: &NormalizationSchedule,
) -> Result<AssumptionReport> {
    let h = system.horizon();
    gains.check_against(system)?;
    noise.check_against(system)?;
    let max_over = |f: &dyn Fn(usize) -> f64| (0..h).map(f).fold(0.0_f64, f64::max);

    let mut closed_loop_violations = Vec::new();
    let mut observer_violations = Vec::new();
    let mut eta_a_bar = 0.0_f64;
    let mut eta_a_under = 0.0_f64;
    for n in 0..h {
        let cl = spectral_norm(&system.closed_loop(gains, n));
        if !(cl < 1.0) {
            closed_loop_violations.push(n);
        }
        eta_a_bar = eta_a_bar.max(cl);
        let ol = spectral_norm(&system.observer_loop(gains, n));
        if !(ol < 1.0) {
            observer_violations.push(n);
        }
        eta_a_under = eta_a_under.max(ol);
    }
    let eta_b = max_over(&|n| spectral_norm(system.b(n)));
    let eta_c = max_over(&|n| spectral_norm(system.c(n)));
    let eta_l = max_over(&|n| spectral_norm(&gains.observer[n]));
    let eta_w = max_over(&|n| spectral_norm(noise.process(n)));
    let eta_z = max_over(&|n| spectral_norm(noise.measurement(n)));
    let hv = h.min(normalization.len());
    let eta_v = (0..hv)
        .map(|n| spectral_norm(normalization.v(n)))
        .fold(0.0, f64::max);
    let eta_delta = normalization
        .sigma_delta()
        .map(|s| s.iter().take(h).map(spectral_norm).fold(0.0, f64::max))
        .unwrap_or(f64::NAN);

    let r = system.output_dim();
    let q = system.input_dim();
    let mut corr = DMatrix::zeros(r, q);
    for n in 1..h {
        corr += system.c(n) * system.b(n - 1);
    }
    if h > 0 {
        corr /= h as f64;
    }

    let finite = [eta_b, eta_c, eta_l, eta_w, eta_z, eta_v]
        .iter()
        .all(|v| v.is_finite())
        && (eta_delta.is_finite() || normalization.sigma_delta().is_none());
    let pass = h > 0
        && eta_a_bar < 1.0
        && eta_a_under < 1.0
        && finite
        && max_abs(&corr) > WATERMARK_CORR_TOL;

    Ok(AssumptionReport {
        eta_a_bar,
        eta_a_under,
        eta_b,
        eta_c,
        eta_l,
        eta_w,
        eta_z,
        eta_v,
        eta_delta,
        watermark_corr_avg: corr,
        closed_loop_violations,
        observer_violations,
        pass,
    })
}

impl AssumptionReport {
    /// `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let fmt_steps = |v: &[usize]| step_ranges(v).join(" ");
        for (k, v) in [
            ("eta_A_bar", self.eta_a_bar),
            ("eta_A_under", self.eta_a_under),
            ("eta_B", self.eta_b),
            ("eta_C", self.eta_c),
            ("eta_L", self.eta_l),
            ("eta_w", self.eta_w),
            ("eta_z", self.eta_z),
            ("eta_V", self.eta_v),
            ("eta_delta", self.eta_delta),
            ("watermark_corr_max_abs", max_abs(&self.watermark_corr_avg)),
        ] {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str(&format!(
            "closed_loop_violations = [{}]\n",
            fmt_steps(&self.closed_loop_violations)
        ));
        s.push_str(&format!(
            "observer_violations = [{}]\n",
            fmt_steps(&self.observer_violations)
        ));
        s.push_str(&format!("pass = {}\n", self.pass));
        s
    }
}

/// Collapses sorted step indices into `a-b` runs.
fn step_ranges(steps: &[usize]) -> Vec<String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < steps.len() {
        let mut j = i;
        while j + 1 < steps.len() && steps[j + 1] == steps[j] + 1 {
            j += 1;
        }
        out.push(if i == j {
            steps[i].to_string()
        } else {
            format!("{}-{}", steps[i], steps[j])
        });
        i = j + 1;
    }
    out
}

/// Norm below which `C (A+BK)^k B` counts as zero.
pub const KPRIME_TOL: f64 = 1e-10;

/// Smallest `k ≤ max_k` with `‖C (A+BK)^k B‖ > 1e-10`.
pub fn compute_kprime(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    k: &DMatrix<f64>,
    max_k: usize,
) -> Option<usize> {
    let closed = a + b * k;
    let mut prop = b.clone();
    for step in 0..=max_k {
        if spectral_norm(&(c * &prop)) > KPRIME_TOL {
            return Some(step);
        }
        prop = &closed * prop;
    }
    None
}
