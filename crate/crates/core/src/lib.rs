//! Dynamic watermarking for linear time-varying control loops.
//!
//! A private Gaussian watermark is added to the control input; the detector
//! checks that measurement residuals, normalized per step by the exact
//! observer-error covariance, stay white and correlated with the watermark
//! exactly as they would without an attacker. Generalized replay attacks
//! break at least one of those two properties.
//!
//! * [`system`] simulates the watermarked loop.
//! * [`synthesis`] builds the car model and its controller/observer gains.
//! * [`attack`] models generalized replay attacks.
//! * [`detector`] normalizes residuals and scores sliding windows.
//! * [`validation`] checks the asymptotic claims by Monte Carlo.

pub mod attack;
pub mod detector;
pub mod error;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod scenario;
pub mod synthesis;
pub mod system;
pub mod validation;

pub use attack::{attack_power, attack_signal, replay_preset, AttackConfig};
pub use detector::{
    asymptotic_statistics, calibrate_threshold, coefficient_of_variation, ensemble_mean_metric,
    estimate_normalization_ensemble, first_alarm_from,
    lti_baseline_normalization, normalization_factor, propagate_error_covariance,
    push_and_score, score_trace, DetectorConfig, NormalizationSchedule, WindowStatistic,
};
pub use error::{Error, Result};
pub use scenario::{build_car_scenario, CarCoordinates, CarParams, CarScenario, ScalarParams, Scenario};
pub use synthesis::{
    compute_kprime, discretize_zoh, linearize_unicycle, lqr_gains, observer_gains,
    verify_assumptions, AssumptionReport, ReferenceTrajectory,
};
pub use system::{
    draw_gaussian, simulate, step, DetectionTrace, GainSchedule, NoiseSchedule,
    SimulationState, StateSpaceSchedule,
};
