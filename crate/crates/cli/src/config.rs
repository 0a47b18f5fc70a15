//! TOML run configuration.
//!
//! Times are in seconds and matrices are row-major nested arrays. Every key
//! has a default, so an empty file describes the car scenario.

use std::path::Path;

use ltv_watermark::synthesis::TrajectoryParams;
use ltv_watermark::{CarCoordinates, CarParams, ScalarParams};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub scenario: ScenarioSection,
    pub trajectory: TrajectorySection,
    pub noise: NoiseSection,
    pub detector: DetectorSection,
    pub attack: AttackSection,
    pub run: RunSection,
    pub validation: ValidationSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Car,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coordinates {
    CostBalanced,
    Physical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    pub dt: f64,
    pub coordinates: Coordinates,
    /// Diagonal of the LQR state weight; defaults to ones.
    pub lqr_q: Option<Vec<f64>>,
    /// Diagonal of the LQR input weight; defaults to ones.
    pub lqr_r: Option<Vec<f64>>,
    /// Scalar plant coefficients, used when `kind = "scalar"`.
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let s = ScalarParams::default();
        Self {
            kind: ScenarioKind::Car,
            dt: 0.05,
            coordinates: Coordinates::CostBalanced,
            lqr_q: None,
            lqr_r: None,
            a: s.a,
            b: s.b,
            c: s.c,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySection {
    pub duration: f64,
    pub mean_speed: f64,
    pub speed_amplitude: f64,
    pub speed_period: f64,
    pub heading_amplitude: f64,
    pub heading_period: f64,
    pub speed_floor: f64,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        let t = TrajectoryParams::default();
        Self {
            duration: t.duration,
            mean_speed: t.mean_speed,
            speed_amplitude: t.speed_amplitude,
            speed_period: t.speed_period,
            heading_amplitude: t.heading_amplitude,
            heading_period: t.heading_period,
            speed_floor: t.speed_floor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    /// Process noise covariance at the mean speed (car) or constant (scalar).
    pub process: Option<Matrix>,
    pub measurement: Option<Matrix>,
    pub watermark: Option<Matrix>,
    /// Lower bound on the speed ratio that scales the car's noise.
    pub scale_floor: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            process: None,
            measurement: None,
            watermark: None,
            scale_floor: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationKind {
    Analytic,
    Ensemble,
    Lti,
}

impl NormalizationKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Analytic => "analytic",
            Self::Ensemble => "ensemble",
            Self::Lti => "lti",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    /// Window length `ℓ + 1` in steps.
    pub window: usize,
    /// Target mean time between false alarms; `0` disables alarms.
    pub false_alarm_interval: f64,
    pub normalization: NormalizationKind,
    /// Steps between a watermark sample and the residual it is paired with.
    /// Defaults to 1 for the car and `k' + 1` for the scalar loop.
    pub watermark_delay: Option<usize>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            window: 20,
            false_alarm_interval: 50.0,
            normalization: NormalizationKind::Analytic,
            watermark_delay: None,
        }
    }
}

impl DetectorSection {
    pub fn target_rate(&self) -> f64 {
        if self.false_alarm_interval > 0.0 {
            1.0 / self.false_alarm_interval
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    None,
    Replay,
    Custom,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Replay => "replay",
            Self::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub start: f64,
    pub alpha: f64,
    /// `Σω` in physical state coordinates (custom attacks).
    pub false_process: Option<Matrix>,
    /// `Σζ` (custom attacks).
    pub false_measurement: Option<Matrix>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            start: 30.0,
            alpha: -1.0,
            false_process: None,
            false_measurement: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub runs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, runs: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationSection {
    pub sizes: Vec<usize>,
    pub replications: usize,
    pub alphas: Vec<f64>,
    pub alpha_replications: usize,
    pub false_process: f64,
    pub false_measurement: f64,
    pub wishart_windows: usize,
    pub wishart_burn_in: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub process: f64,
    pub measurement: f64,
    pub watermark: f64,
}

impl Default for ValidationSection {
    fn default() -> Self {
        let s = ScalarParams::default();
        Self {
            sizes: vec![1_000, 10_000, 100_000],
            replications: 20,
            alphas: vec![0.0, -1.0, 0.5],
            alpha_replications: 10,
            false_process: 0.3,
            false_measurement: 0.2,
            wishart_windows: 10_000,
            wishart_burn_in: 400,
            a: s.a,
            b: s.b,
            c: s.c,
            process: s.process,
            measurement: s.measurement,
            watermark: s.watermark,
        }
    }
}

impl ValidationSection {
    pub fn scalar_params(&self, dt: f64) -> ScalarParams {
        ScalarParams {
            a: self.a,
            b: self.b,
            c: self.c,
            process: self.process,
            measurement: self.measurement,
            watermark: self.watermark,
            dt,
            ..ScalarParams::default()
        }
    }
}

pub fn load(path: &Path) -> Result<Config, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse(text: &str) -> Result<Config, CliError> {
    let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn matrix(rows: &Matrix, name: &str) -> Result<DMatrix<f64>, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Config(format!(
            "{name} must be a non-empty rectangular array of rows"
        )));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

impl Config {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if !(self.scenario.dt > 0.0) {
            return bad(format!("scenario.dt must be positive, got {}", self.scenario.dt));
        }
        if !(self.trajectory.duration >= self.scenario.dt) {
            return bad("trajectory.duration must cover at least one step".into());
        }
        if self.detector.window == 0 {
            return bad("detector.window must be positive".into());
        }
        if !(self.detector.false_alarm_interval >= 0.0) {
            return bad("detector.false_alarm_interval must be non-negative".into());
        }
        if self.detector.watermark_delay == Some(0) {
            return bad("detector.watermark_delay must be at least 1".into());
        }
        if !(self.attack.start >= 0.0) {
            return bad("attack.start must be non-negative".into());
        }
        if self.run.runs == 0 {
            return bad("run.runs must be positive".into());
        }
        if self.validation.sizes.is_empty() || self.validation.sizes.contains(&0) {
            return bad("validation.sizes must be non-empty and positive".into());
        }
        for (name, m) in [
            ("noise.process", &self.noise.process),
            ("noise.measurement", &self.noise.measurement),
            ("noise.watermark", &self.noise.watermark),
            ("attack.false_process", &self.attack.false_process),
            ("attack.false_measurement", &self.attack.false_measurement),
        ] {
            if let Some(m) = m {
                matrix(m, name)?;
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        (self.trajectory.duration / self.scenario.dt).round() as usize
    }

    pub fn trajectory_params(&self) -> TrajectoryParams {
        let t = &self.trajectory;
        TrajectoryParams {
            duration: t.duration,
            mean_speed: t.mean_speed,
            speed_amplitude: t.speed_amplitude,
            speed_period: t.speed_period,
            heading_amplitude: t.heading_amplitude,
            heading_period: t.heading_period,
            speed_floor: t.speed_floor,
        }
    }

    pub fn car_params(&self) -> Result<CarParams, CliError> {
        let d = CarParams::default();
        let opt = |m: &Option<Matrix>, name: &str, fallback: DMatrix<f64>| match m {
            Some(m) => matrix(m, name),
            None => Ok(fallback),
        };
        Ok(CarParams {
            dt: self.scenario.dt,
            trajectory: self.trajectory_params(),
            lqr_q: self
                .scenario
                .lqr_q
                .as_ref()
                .map_or(d.lqr_q.clone(), |v| DVector::from_column_slice(v)),
            lqr_r: self
                .scenario
                .lqr_r
                .as_ref()
                .map_or(d.lqr_r.clone(), |v| DVector::from_column_slice(v)),
            process_base: opt(&self.noise.process, "noise.process", d.process_base)?,
            measurement_base: opt(&self.noise.measurement, "noise.measurement", d.measurement_base)?,
            watermark: opt(&self.noise.watermark, "noise.watermark", d.watermark)?,
            noise_floor: self.noise.scale_floor,
            coordinates: match self.scenario.coordinates {
                Coordinates::CostBalanced => CarCoordinates::CostBalanced,
                Coordinates::Physical => CarCoordinates::Physical,
            },
        })
    }

    pub fn scalar_params(&self) -> Result<ScalarParams, CliError> {
        let d = ScalarParams::default();
        let scalar = |m: &Option<Matrix>, name: &str, fallback: f64| -> Result<f64, CliError> {
            match m {
                None => Ok(fallback),
                Some(m) => {
                    let m = matrix(m, name)?;
                    if m.shape() != (1, 1) {
                        return Err(CliError::Config(format!("{name} must be 1x1 for a scalar scenario")));
                    }
                    Ok(m[(0, 0)])
                }
            }
        };
        let weight = |v: &Option<Vec<f64>>, name: &str, fallback: f64| match v {
            None => Ok(fallback),
            Some(v) if v.len() == 1 => Ok(v[0]),
            Some(_) => Err(CliError::Config(format!("{name} must have one entry for a scalar scenario"))),
        };
        Ok(ScalarParams {
            a: self.scenario.a,
            b: self.scenario.b,
            c: self.scenario.c,
            process: scalar(&self.noise.process, "noise.process", d.process)?,
            measurement: scalar(&self.noise.measurement, "noise.measurement", d.measurement)?,
            watermark: scalar(&self.noise.watermark, "noise.watermark", d.watermark)?,
            lqr_q: weight(&self.scenario.lqr_q, "scenario.lqr_q", d.lqr_q)?,
            lqr_r: weight(&self.scenario.lqr_r, "scenario.lqr_r", d.lqr_r)?,
            dt: self.scenario.dt,
        })
    }

    pub fn false_process(&self) -> Result<Option<DMatrix<f64>>, CliError> {
        self.attack
            .false_process
            .as_ref()
            .map(|m| matrix(m, "attack.false_process"))
            .transpose()
    }

    pub fn false_measurement(&self) -> Result<Option<DMatrix<f64>>, CliError> {
        self.attack
            .false_measurement
            .as_ref()
            .map(|m| matrix(m, "attack.false_measurement"))
            .transpose()
    }

    /// Copy with every defaulted matrix and weight written out, so explicit
    /// defaults and omitted keys describe (and hash to) the same model.
    pub fn resolved(&self) -> Config {
        let rows = |m: &DMatrix<f64>| -> Matrix {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        let mut out = self.clone();
        match self.scenario.kind {
            ScenarioKind::Car => {
                if let Ok(p) = self.car_params() {
                    out.scenario.lqr_q = Some(p.lqr_q.iter().copied().collect());
                    out.scenario.lqr_r = Some(p.lqr_r.iter().copied().collect());
                    out.noise.process = Some(rows(&p.process_base));
                    out.noise.measurement = Some(rows(&p.measurement_base));
                    out.noise.watermark = Some(rows(&p.watermark));
                }
            }
            ScenarioKind::Scalar => {
                if let Ok(p) = self.scalar_params() {
                    out.scenario.lqr_q = Some(vec![p.lqr_q]);
                    out.scenario.lqr_r = Some(vec![p.lqr_r]);
                    out.noise.process = Some(vec![vec![p.process]]);
                    out.noise.measurement = Some(vec![vec![p.measurement]]);
                    out.noise.watermark = Some(vec![vec![p.watermark]]);
                }
            }
        }
        out
    }

    /// SHA-256 over the sections that determine the plant, noise and detector.
    ///
    /// Attack, run and validation settings are excluded so one synthesized
    /// loop can be calibrated and attacked with varying seeds and attacks.
    pub fn model_hash(&self) -> String {
        #[derive(Serialize)]
        struct Model<'a> {
            scenario: &'a ScenarioSection,
            trajectory: &'a TrajectorySection,
            noise: &'a NoiseSection,
            detector: &'a DetectorSection,
        }
        let resolved = self.resolved();
        // The normalization choice is a calibration flag, not part of the model.
        let detector = DetectorSection {
            normalization: NormalizationKind::Analytic,
            ..resolved.detector.clone()
        };
        let text = toml::to_string(&Model {
            scenario: &resolved.scenario,
            trajectory: &resolved.trajectory,
            noise: &resolved.noise,
            detector: &detector,
        })
        .expect("config sections serialize");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
