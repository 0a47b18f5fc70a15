//! Watermarked LTV closed loop: schedules, one-step dynamics and forward
//! simulation with process noise, measurement noise and optional attacks.
//!
//! The loop is
//!
//! ```text
//! x[n+1]    = A[n] x[n] + B[n] K[n] x̂[n] + B[n] e[n] + w[n]
//! y[n]      = C[n] x[n] + z[n] + v[n]
//! x̂[n+1]    = (A[n] + B[n] K[n] + L[n] C[n]) x̂[n] + B[n] e[n] - L[n] y[n]
//! ```
//!
//! and the observer error `x̂ - x` is tracked as the sum of a nominal part
//! driven by `w`, `z` and an attack part driven only by `v`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::attack::{self, AttackConfig};
use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, require_shape, require_spd};
use crate::rng::{rng_from_seed, standard_normal_vector, SimRng};

/// Time-indexed plant matrices `(A[n], B[n], C[n])`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceSchedule {
    dt: f64,
    horizon: usize,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
}

impl StateSpaceSchedule {
    pub fn new(
        dt: f64,
        horizon: usize,
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        c: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dt must be positive and finite, got {dt}"
            )));
        }
        for (name, len) in [("A", a.len()), ("B", b.len()), ("C", c.len())] {
            if len < horizon {
                return Err(Error::InvalidParameter(format!(
                    "{name} schedule has {len} entries, horizon is {horizon}"
                )));
            }
        }
        if horizon > 0 {
            let p = a[0].nrows();
            let q = b[0].ncols();
            let r = c[0].nrows();
            for n in 0..horizon {
                require_shape(&a[n], p, p, &format!("A[{n}]"))?;
                require_shape(&b[n], p, q, &format!("B[{n}]"))?;
                require_shape(&c[n], r, p, &format!("C[{n}]"))?;
            }
        }
        Ok(Self {
            dt,
            horizon,
            a,
            b,
            c,
        })
    }

    /// The same `(A, B, C)` at every step.
    pub fn time_invariant(
        dt: f64,
        horizon: usize,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
    ) -> Result<Self> {
        Self::new(
            dt,
            horizon,
            vec![a; horizon.max(1)],
            vec![b; horizon.max(1)],
            vec![c; horizon.max(1)],
        )
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c[0].nrows()
    }

    pub fn a(&self, n: usize) -> &DMatrix<f64> {
        &self.a[n]
    }

    pub fn b(&self, n: usize) -> &DMatrix<f64> {
        &self.b[n]
    }

    pub fn c(&self, n: usize) -> &DMatrix<f64> {
        &self.c[n]
    }

    /// `A[n] + B[n] K[n]`.
    pub fn closed_loop(&self, gains: &GainSchedule, n: usize) -> DMatrix<f64> {
        &self.a[n] + &self.b[n] * &gains.controller[n]
    }

    /// `A[n] + L[n] C[n]`.
    pub fn observer_loop(&self, gains: &GainSchedule, n: usize) -> DMatrix<f64> {
        &self.a[n] + &gains.observer[n] * &self.c[n]
    }
}

/// Covariance factor cached for repeated Gaussian draws.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFactor {
    factor: DMatrix<f64>,
}

impl GaussianFactor {
    pub fn new(cov: &DMatrix<f64>, name: &str) -> Result<Self> {
        Ok(Self {
            factor: psd_sqrt(cov, name)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample(&self, rng: &mut SimRng) -> DVector<f64> {
        &self.factor * standard_normal_vector(self.factor.nrows(), rng)
    }
}

/// One draw from `N(0, cov)` using the principal square root of `cov`.
pub fn draw_gaussian(cov: &DMatrix<f64>, rng: &mut SimRng) -> Result<DVector<f64>> {
    Ok(GaussianFactor::new(cov, "covariance")?.sample(rng))
}

/// Process, measurement and watermark covariances.
///
/// Construction accepts positive semidefinite covariances so degenerate
/// (noise-free) loops can be simulated; [`NoiseSchedule::require_positive_definite`]
/// enforces the full-rank requirement the detector relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    process: Vec<DMatrix<f64>>,
    measurement: Vec<DMatrix<f64>>,
    watermark: DMatrix<f64>,
    process_factor: Vec<GaussianFactor>,
    measurement_factor: Vec<GaussianFactor>,
    watermark_factor: GaussianFactor,
}

impl NoiseSchedule {
    pub fn new(
        process: Vec<DMatrix<f64>>,
        measurement: Vec<DMatrix<f64>>,
        watermark: DMatrix<f64>,
    ) -> Result<Self> {
        let process_factor = process
            .iter()
            .enumerate()
            .map(|(n, m)| GaussianFactor::new(m, &format!("Sigma_w[{n}]")))
            .collect::<Result<Vec<_>>>()?;
        let measurement_factor = measurement
            .iter()
            .enumerate()
            .map(|(n, m)| GaussianFactor::new(m, &format!("Sigma_z[{n}]")))
            .collect::<Result<Vec<_>>>()?;
        let watermark_factor = GaussianFactor::new(&watermark, "Sigma_e")?;
        Ok(Self {
            process,
            measurement,
            watermark,
            process_factor,
            measurement_factor,
            watermark_factor,
        })
    }

    pub fn time_invariant(
        horizon: usize,
        process: DMatrix<f64>,
        measurement: DMatrix<f64>,
        watermark: DMatrix<f64>,
    ) -> Result<Self> {
        Self::new(
            vec![process; horizon.max(1)],
            vec![measurement; horizon.max(1)],
            watermark,
        )
    }

    pub fn len(&self) -> usize {
        self.process.len().min(self.measurement.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn process(&self, n: usize) -> &DMatrix<f64> {
        &self.process[n]
    }

    pub fn measurement(&self, n: usize) -> &DMatrix<f64> {
        &self.measurement[n]
    }

    pub fn watermark(&self) -> &DMatrix<f64> {
        &self.watermark
    }

    pub(crate) fn process_factor(&self, n: usize) -> &GaussianFactor {
        &self.process_factor[n]
    }

    pub(crate) fn measurement_factor(&self, n: usize) -> &GaussianFactor {
        &self.measurement_factor[n]
    }

    pub(crate) fn watermark_factor(&self) -> &GaussianFactor {
        &self.watermark_factor
    }

    pub fn require_positive_definite(&self, horizon: usize) -> Result<()> {
        for n in 0..horizon {
            require_spd(&self.process[n], &format!("Sigma_w[{n}]"))?;
            require_spd(&self.measurement[n], &format!("Sigma_z[{n}]"))?;
        }
        require_spd(&self.watermark, "Sigma_e")
    }

    pub fn check_against(&self, system: &StateSpaceSchedule) -> Result<()> {
        let h = system.horizon();
        if self.len() < h {
            return Err(Error::InvalidParameter(format!(
                "noise schedule has {} entries, horizon is {h}",
                self.len()
            )));
        }
        let (p, q, r) = (system.state_dim(), system.input_dim(), system.output_dim());
        for n in 0..h {
            require_shape(&self.process[n], p, p, &format!("Sigma_w[{n}]"))?;
            require_shape(&self.measurement[n], r, r, &format!("Sigma_z[{n}]"))?;
        }
        require_shape(&self.watermark, q, q, "Sigma_e")
    }
}

/// Controller gains `K[n]` (q×p, `u = K x̂`) and observer gains `L[n]` (p×r).
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub controller: Vec<DMatrix<f64>>,
    pub observer: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn new(controller: Vec<DMatrix<f64>>, observer: Vec<DMatrix<f64>>) -> Self {
        Self {
            controller,
            observer,
        }
    }

    pub fn check_against(&self, system: &StateSpaceSchedule) -> Result<()> {
        let h = system.horizon();
        if self.controller.len() < h || self.observer.len() < h {
            return Err(Error::InvalidParameter(format!(
                "gain schedule shorter than horizon {h}"
            )));
        }
        let (p, q, r) = (system.state_dim(), system.input_dim(), system.output_dim());
        for n in 0..h {
            require_shape(&self.controller[n], q, p, &format!("K[{n}]"))?;
            require_shape(&self.observer[n], p, r, &format!("L[{n}]"))?;
        }
        Ok(())
    }
}

/// Loop state at step `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationState {
    pub n: usize,
    pub x: DVector<f64>,
    pub x_hat: DVector<f64>,
    /// Observer error due to process and measurement noise.
    pub delta_bar: DVector<f64>,
    /// Observer error due to the attack.
    pub delta_hat: DVector<f64>,
}

impl SimulationState {
    pub fn zero(state_dim: usize) -> Self {
        Self {
            n: 0,
            x: DVector::zeros(state_dim),
            x_hat: DVector::zeros(state_dim),
            delta_bar: DVector::zeros(state_dim),
            delta_hat: DVector::zeros(state_dim),
        }
    }

    /// `(x̂ - x) - (δ̄ + δ̂)`.
    pub fn decomposition_error(&self) -> f64 {
        ((&self.x_hat - &self.x) - (&self.delta_bar + &self.delta_hat)).amax()
    }
}

/// Quantities recorded while taking one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub y: DVector<f64>,
    pub residual: DVector<f64>,
}

fn check_vec(v: &DVector<f64>, len: usize, what: &str) -> Result<()> {
    if v.len() != len {
        return Err(Error::dims(what, (len, 1), (v.len(), 1)));
    }
    Ok(())
}

/// Deterministic one-step update given every exogenous signal.
#[allow(clippy::too_many_arguments)]
pub fn advance(
    system: &StateSpaceSchedule,
    gains: &GainSchedule,
    state: &SimulationState,
    e: &DVector<f64>,
    w: &DVector<f64>,
    z: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<(SimulationState, StepOutput)> {
    let n = state.n;
    if n >= system.horizon() {
        return Err(Error::HorizonExceeded {
            step: n,
            horizon: system.horizon(),
        });
    }
    let (p, q, r) = (system.state_dim(), system.input_dim(), system.output_dim());
    check_vec(&state.x, p, "x")?;
    check_vec(&state.x_hat, p, "x_hat")?;
    check_vec(e, q, "e")?;
    check_vec(w, p, "w")?;
    check_vec(z, r, "z")?;
    check_vec(v, r, "v")?;
    if gains.controller.len() <= n || gains.observer.len() <= n {
        return Err(Error::HorizonExceeded {
            step: n,
            horizon: gains.controller.len().min(gains.observer.len()),
        });
    }

    let a = system.a(n);
    let b = system.b(n);
    let c = system.c(n);
    let k = &gains.controller[n];
    let l = &gains.observer[n];

    let y = c * &state.x + z + v;
    let residual = c * &state.x_hat - &y;
    let input = k * &state.x_hat + e;
    let x = a * &state.x + b * &input + w;
    let x_hat = a * &state.x_hat + b * &input + l * &residual;
    let delta_bar = a * &state.delta_bar + l * (c * &state.delta_bar - z) - w;
    let delta_hat = a * &state.delta_hat + l * (c * &state.delta_hat - v);

    Ok((
        SimulationState {
            n: n + 1,
            x,
            x_hat,
            delta_bar,
            delta_hat,
        },
        StepOutput { y, residual },
    ))
}

/// Draws `w[n]` then `z[n]` from `rng` and advances one step.
///
/// Returns the next state and the measurement taken at step `n`.
pub fn step(
    system: &StateSpaceSchedule,
    noise: &NoiseSchedule,
    gains: &GainSchedule,
    state: &SimulationState,
    e: &DVector<f64>,
    v: &DVector<f64>,
    rng: &mut SimRng,
) -> Result<(SimulationState, DVector<f64>)> {
    let n = state.n;
    if n >= system.horizon() || n >= noise.len() {
        return Err(Error::HorizonExceeded {
            step: n,
            horizon: system.horizon().min(noise.len()),
        });
    }
    let w = noise.process_factor(n).sample(rng);
    let z = noise.measurement_factor(n).sample(rng);
    let (next, out) = advance(system, gains, state, e, &w, &z, v)?;
    Ok((next, out.y))
}

/// Per-step record of a simulated run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionTrace {
    pub dt: f64,
    pub x: Vec<DVector<f64>>,
    pub x_hat: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub e: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub residual: Vec<DVector<f64>>,
    pub delta_bar: Vec<DVector<f64>>,
    pub delta_hat: Vec<DVector<f64>>,
    /// Detection metric, `None` until the window is full.
    pub metric: Vec<Option<f64>>,
    pub alarm: Vec<bool>,
}

impl DetectionTrace {
    fn with_capacity(dt: f64, n: usize) -> Self {
        Self {
            dt,
            x: Vec::with_capacity(n),
            x_hat: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            e: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            residual: Vec::with_capacity(n),
            delta_bar: Vec::with_capacity(n),
            delta_hat: Vec::with_capacity(n),
            metric: Vec::with_capacity(n),
            alarm: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// One CSV row per step: `n, t, x…, x_hat…, y…, e…, v…, residual…, metric, alarm`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let p = self.x.first().map_or(0, |v| v.len());
        let r = self.y.first().map_or(0, |v| v.len());
        let q = self.e.first().map_or(0, |v| v.len());
        let mut header = vec!["n".to_string(), "t".to_string()];
        for (name, dim) in [
            ("x", p),
            ("x_hat", p),
            ("y", r),
            ("e", q),
            ("v", r),
            ("residual", r),
        ] {
            header.extend((0..dim).map(|i| format!("{name}_{i}")));
        }
        header.push("metric".into());
        header.push("alarm".into());
        w.write_record(&header)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for n in 0..self.len() {
            row.clear();
            row.push(n.to_string());
            row.push((n as f64 * self.dt).to_string());
            for series in [
                &self.x,
                &self.x_hat,
                &self.y,
                &self.e,
                &self.v,
                &self.residual,
            ] {
                row.extend(series[n].iter().map(|v| v.to_string()));
            }
            row.push(self.metric[n].map(|m| m.to_string()).unwrap_or_default());
            row.push(if self.alarm[n] { "1" } else { "0" }.into());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulates the watermarked loop for `horizon` steps from the zero state.
///
/// Per step the generator is consumed in a fixed order: watermark `e[n]`,
/// process noise `w[n]`, measurement noise `z[n]`, then (while an attack is
/// active) the false measurement noise `ζ[n]` and false process noise `ω[n]`.
pub fn simulate(
    system: &StateSpaceSchedule,
    noise: &NoiseSchedule,
    gains: &GainSchedule,
    attack: Option<&AttackConfig>,
    horizon: usize,
    seed: u64,
) -> Result<DetectionTrace> {
    if horizon > system.horizon() {
        return Err(Error::HorizonExceeded {
            step: horizon,
            horizon: system.horizon(),
        });
    }
    let mut trace = DetectionTrace::with_capacity(system.dt(), horizon);
    if horizon == 0 {
        return Ok(trace);
    }
    noise.check_against(system)?;
    gains.check_against(system)?;
    if let Some(cfg) = attack {
        cfg.check_against(system, horizon)?;
    }

    let p = system.state_dim();
    let r = system.output_dim();
    let mut rng = rng_from_seed(seed);
    let mut state = SimulationState::zero(p);
    let mut xi = DVector::zeros(p);

    for n in 0..horizon {
        let e = noise.watermark_factor().sample(&mut rng);
        let w = noise.process_factor(n).sample(&mut rng);
        let z = noise.measurement_factor(n).sample(&mut rng);
        let v = match attack {
            Some(cfg) => {
                let (v, xi_next) =
                    attack::attack_signal(cfg, system, gains, &state.x, &z, &xi, &mut rng, n)?;
                xi = xi_next;
                v
            }
            None => DVector::zeros(r),
        };
        let (next, out) = advance(system, gains, &state, &e, &w, &z, &v)?;
        trace.x.push(state.x);
        trace.x_hat.push(state.x_hat);
        trace.delta_bar.push(state.delta_bar);
        trace.delta_hat.push(state.delta_hat);
        trace.y.push(out.y);
        trace.residual.push(out.residual);
        trace.e.push(e);
        trace.v.push(v);
        trace.z.push(z);
        trace.metric.push(None);
        trace.alarm.push(false);
        state = next;
    }
    Ok(trace)
}
