//! Generalized replay attacks on the measurement channel.
//!
//! While active the attacker substitutes
//!
//! ```text
//! v[n]    = α (C[n] x[n] + z[n]) + C[n] ξ[n] + ζ[n]
//! ξ[n+1]  = (A[n] + B[n] K[n]) ξ[n] + ω[n]
//! ```
//!
//! so the received measurement is `(1 + α)(C x + z) + C ξ + ζ`. With
//! `α = -1` the true state drops out entirely and the plant sees a recording
//! of a fictitious closed loop.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{require_shape, spectral_norm};
use crate::rng::SimRng;
use crate::system::{
    DetectionTrace, GainSchedule, GaussianFactor, NoiseSchedule, StateSpaceSchedule,
};

/// Parameters of a generalized replay attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    alpha: f64,
    false_process: Vec<DMatrix<f64>>,
    false_measurement: Vec<DMatrix<f64>>,
    start_step: usize,
    false_process_factor: Vec<GaussianFactor>,
    false_measurement_factor: Vec<GaussianFactor>,
}

impl AttackConfig {
    /// `false_process[n]` is `Σω[n]` (p×p), `false_measurement[n]` is `Σζ[n]` (r×r).
    pub fn new(
        alpha: f64,
        false_process: Vec<DMatrix<f64>>,
        false_measurement: Vec<DMatrix<f64>>,
        start_step: usize,
    ) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "attack scaling factor must be finite, got {alpha}"
            )));
        }
        let false_process_factor = false_process
            .iter()
            .enumerate()
            .map(|(n, m)| GaussianFactor::new(m, &format!("Sigma_omega[{n}]")))
            .collect::<Result<Vec<_>>>()?;
        let false_measurement_factor = false_measurement
            .iter()
            .enumerate()
            .map(|(n, m)| GaussianFactor::new(m, &format!("Sigma_zeta[{n}]")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            alpha,
            false_process,
            false_measurement,
            start_step,
            false_process_factor,
            false_measurement_factor,
        })
    }

    /// The null attack: `α = 0`, zero false-state and false-noise covariances.
    pub fn null(system: &StateSpaceSchedule) -> Result<Self> {
        let h = system.horizon().max(1);
        let p = system.state_dim();
        let r = system.output_dim();
        Self::new(0.0, vec![DMatrix::zeros(p, p); h], vec![DMatrix::zeros(r, r); h], 0)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn start_step(&self) -> usize {
        self.start_step
    }

    pub fn false_process(&self, n: usize) -> &DMatrix<f64> {
        &self.false_process[n]
    }

    pub fn false_measurement(&self, n: usize) -> &DMatrix<f64> {
        &self.false_measurement[n]
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "attack scaling factor must be finite, got {alpha}"
            )));
        }
        self.alpha = alpha;
        Ok(self)
    }

    pub fn with_start_step(mut self, start_step: usize) -> Self {
        self.start_step = start_step;
        self
    }

    /// Multiplies every `Σζ[n]` by `factor`.
    pub fn scale_false_measurement(self, factor: f64) -> Result<Self> {
        let zeta = self.false_measurement.iter().map(|m| m * factor).collect();
        Self::new(self.alpha, self.false_process, zeta, self.start_step)
    }

    /// Largest `‖Σω[n]‖` and `‖Σζ[n]‖` over the first `horizon` steps.
    pub fn covariance_bounds(&self, horizon: usize) -> (f64, f64) {
        let h = horizon.min(self.false_process.len());
        let omega = self.false_process[..h]
            .iter()
            .map(spectral_norm)
            .fold(0.0, f64::max);
        let h = horizon.min(self.false_measurement.len());
        let zeta = self.false_measurement[..h]
            .iter()
            .map(spectral_norm)
            .fold(0.0, f64::max);
        (omega, zeta)
    }

    pub fn check_against(&self, system: &StateSpaceSchedule, horizon: usize) -> Result<()> {
        let active = horizon.saturating_sub(self.start_step);
        if active == 0 {
            return Ok(());
        }
        if self.false_process.len() < horizon || self.false_measurement.len() < horizon {
            return Err(Error::InvalidParameter(format!(
                "attack covariance schedules shorter than horizon {horizon}"
            )));
        }
        let p = system.state_dim();
        let r = system.output_dim();
        for n in self.start_step..horizon {
            require_shape(&self.false_process[n], p, p, &format!("Sigma_omega[{n}]"))?;
            require_shape(&self.false_measurement[n], r, r, &format!("Sigma_zeta[{n}]"))?;
        }
        Ok(())
    }
}

/// Attack value at step `n` and the next false state.
///
/// Before `start_step` the attack is silent and draws nothing from `rng`.
/// Afterwards `ζ[n]` is drawn before `ω[n]`.
#[allow(clippy::too_many_arguments)]
pub fn attack_signal(
    config: &AttackConfig,
    system: &StateSpaceSchedule,
    gains: &GainSchedule,
    x: &DVector<f64>,
    z: &DVector<f64>,
    xi: &DVector<f64>,
    rng: &mut SimRng,
    n: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let p = system.state_dim();
    let r = system.output_dim();
    if x.len() != p || xi.len() != p {
        return Err(Error::dims("attack state", (p, 1), (x.len().max(xi.len()), 1)));
    }
    if z.len() != r {
        return Err(Error::dims("attack z", (r, 1), (z.len(), 1)));
    }
    if n < config.start_step {
        return Ok((DVector::zeros(r), xi.clone()));
    }
    if n >= system.horizon() || n >= config.false_process.len() || n >= config.false_measurement.len()
    {
        return Err(Error::HorizonExceeded {
            step: n,
            horizon: system.horizon(),
        });
    }
    let c = system.c(n);
    let zeta_factor = &config.false_measurement_factor[n];
    if zeta_factor.dim() != r {
        return Err(Error::dims(format!("Sigma_zeta[{n}]"), (r, r), (zeta_factor.dim(), zeta_factor.dim())));
    }
    let omega_factor = &config.false_process_factor[n];
    if omega_factor.dim() != p {
        return Err(Error::dims(format!("Sigma_omega[{n}]"), (p, p), (omega_factor.dim(), omega_factor.dim())));
    }
    let zeta = zeta_factor.sample(rng);
    let omega = omega_factor.sample(rng);
    let v = (c * x + z) * config.alpha + c * xi + zeta;
    let xi_next = system.closed_loop(gains, n) * xi + omega;
    Ok((v, xi_next))
}

/// Pure replay: `α = -1`, `Σω[n] = B[n] Σe B[n]ᵀ + Σw[n]`, `Σζ[n] = Σz[n]`.
///
/// The false state then evolves like a legitimate watermarked loop, including
/// the watermark's contribution to its process noise.
pub fn replay_preset(
    system: &StateSpaceSchedule,
    noise: &NoiseSchedule,
    _gains: &GainSchedule,
    start_step: usize,
) -> Result<AttackConfig> {
    let h = system.horizon();
    let sigma_e = noise.watermark();
    let omega = (0..h)
        .map(|n| {
            let b = system.b(n);
            let m = b * sigma_e * b.transpose() + noise.process(n);
            (&m + m.transpose()) * 0.5
        })
        .collect();
    let zeta = (0..h).map(|n| noise.measurement(n).clone()).collect();
    AttackConfig::new(-1.0, omega, zeta, start_step)
}

/// `(1/i) Σ vᵀv` over the whole trace, or over its trailing `window` steps.
pub fn attack_power(trace: &DetectionTrace, window: Option<usize>) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::InsufficientSamples {
            what: "attack power".into(),
            needed: 1,
            got: 0,
        });
    }
    let len = trace.len();
    let start = match window {
        Some(w) if w == 0 => {
            return Err(Error::InvalidParameter("attack power window must be positive".into()))
        }
        Some(w) => len.saturating_sub(w),
        None => 0,
    };
    let total: f64 = trace.v[start..].iter().map(|v| v.norm_squared()).sum();
    Ok(total / (len - start) as f64)
}

/// Running average of `vᵀv` from step 0 through each step.
pub fn running_attack_power(trace: &DetectionTrace) -> Vec<f64> {
    let mut acc = 0.0;
    trace
        .v
        .iter()
        .enumerate()
        .map(|(i, v)| {
            acc += v.norm_squared();
            acc / (i + 1) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::system::simulate;

    fn scalar_setup(h: usize) -> (StateSpaceSchedule, NoiseSchedule, GainSchedule) {
        let sys = StateSpaceSchedule::time_invariant(
            0.05,
            h,
            DMatrix::from_element(1, 1, 0.9),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let noise = NoiseSchedule::time_invariant(
            h,
            DMatrix::from_element(1, 1, 0.2),
            DMatrix::from_element(1, 1, 0.1),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let gains = GainSchedule::new(
            vec![DMatrix::from_element(1, 1, -0.5); h],
            vec![DMatrix::from_element(1, 1, -0.6); h],
        );
        (sys, noise, gains)
    }

    #[test]
    fn null_attack_is_silent() {
        let (sys, noise, gains) = scalar_setup(200);
        let null = AttackConfig::null(&sys).unwrap();
        let trace = simulate(&sys, &noise, &gains, Some(&null), 200, 4).unwrap();
        assert!(trace.v.iter().all(|v| v[0] == 0.0));
        assert_eq!(attack_power(&trace, None).unwrap(), 0.0);
    }

    #[test]
    fn silent_before_start() {
        let (sys, noise, gains) = scalar_setup(10);
        let cfg = replay_preset(&sys, &noise, &gains, 5).unwrap();
        let mut rng = rng_from_seed(1);
        let x = DVector::from_element(1, 3.0);
        let z = DVector::from_element(1, 0.5);
        let xi = DVector::zeros(1);
        let (v, xi_next) = attack_signal(&cfg, &sys, &gains, &x, &z, &xi, &mut rng, 4).unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(xi_next[0], 0.0);
    }

    #[test]
    fn doubling_attack() {
        let (sys, _, gains) = scalar_setup(10);
        let cfg = AttackConfig::new(1.0, vec![DMatrix::zeros(1, 1); 10], vec![DMatrix::zeros(1, 1); 10], 0)
            .unwrap();
        let mut rng = rng_from_seed(1);
        let x = DVector::from_element(1, 3.0);
        let z = DVector::from_element(1, 0.5);
        let xi = DVector::zeros(1);
        let (v, _) = attack_signal(&cfg, &sys, &gains, &x, &z, &xi, &mut rng, 0).unwrap();
        // y = C x + z + v = 2 (C x + z)
        assert_eq!(3.0 + 0.5 + v[0], 7.0);
    }

    #[test]
    fn replay_cancels_true_measurement() {
        let h = 300;
        let (sys, noise, gains) = scalar_setup(h);
        let cfg = replay_preset(&sys, &noise, &gains, 0).unwrap();
        assert_eq!(cfg.alpha(), -1.0);
        let trace = simulate(&sys, &noise, &gains, Some(&cfg), h, 8).unwrap();
        // y = C ξ + ζ: recompute from v, which contains -(C x + z)
        for n in 0..h {
            let fake = trace.v[n][0] + trace.x[n][0] + trace.z[n][0];
            assert!((trace.y[n][0] - fake).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_preset_without_actuation_copies_process_noise() {
        let h = 5;
        let sys = StateSpaceSchedule::time_invariant(
            0.05,
            h,
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let sw = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let noise = NoiseSchedule::time_invariant(h, sw.clone(), DMatrix::identity(2, 2), DMatrix::identity(1, 1))
            .unwrap();
        let gains = GainSchedule::new(vec![DMatrix::zeros(1, 2); h], vec![DMatrix::zeros(2, 2); h]);
        let cfg = replay_preset(&sys, &noise, &gains, 0).unwrap();
        for n in 0..h {
            assert_eq!(cfg.false_process(n), &sw);
            assert_eq!(cfg.false_measurement(n), noise.measurement(n));
        }
    }

    #[test]
    fn power_of_unit_attack() {
        let trace = DetectionTrace {
            v: vec![DVector::from_vec(vec![1.0, 0.0]); 7],
            x: vec![DVector::zeros(1); 7],
            ..Default::default()
        };
        assert_eq!(attack_power(&trace, None).unwrap(), 1.0);
        assert_eq!(attack_power(&trace, Some(3)).unwrap(), 1.0);
        assert_eq!(running_attack_power(&trace), vec![1.0; 7]);
        assert!(attack_power(&DetectionTrace::default(), None).is_err());
    }
}
