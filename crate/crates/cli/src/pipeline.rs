//! The synth → calibrate → detect stages and the LTI/LTV comparison.
//!
//! Replication `j` of each stage simulates with `derive_seed(seed, base + j)`
//! where `base` is 0 for calibration, `1 << 20` for detection and `2 << 20`
//! for comparison, so calibration and evaluation never share noise.

use std::io::Write;

use ltv_watermark::detector::{count_alarm_events, write_metric_csv};
use ltv_watermark::io::{write_matrix_csv, MatrixRecord};
use ltv_watermark::rng::derive_seed;
use ltv_watermark::{
    build_car_scenario, calibrate_threshold, coefficient_of_variation, compute_kprime,
    ensemble_mean_metric, estimate_normalization_ensemble, first_alarm_from,
    lti_baseline_normalization, replay_preset, score_trace, verify_assumptions, AttackConfig,
    CarScenario, DetectionTrace, DetectorConfig, NormalizationSchedule, Scenario,
};
use nalgebra::DMatrix;

use crate::artifacts::{key_values, OutDir, MANIFEST, NORMALIZATION, THRESHOLD};
use crate::config::{AttackKind, Config, NormalizationKind, ScenarioKind};
use crate::error::CliError;

pub const DETECT_STREAM: u64 = 1 << 20;
pub const COMPARE_STREAM: u64 = 2 << 20;

/// Steps searched for the scalar loop's watermark delay.
const KPRIME_SEARCH: usize = 64;

pub enum Plant {
    Car(CarScenario),
    Scalar(Scenario),
}

pub struct Model {
    pub plant: Plant,
    pub watermark_delay: usize,
    pub kprime: Option<usize>,
}

impl Model {
    pub fn build(cfg: &Config) -> Result<Self, CliError> {
        let plant = match cfg.scenario.kind {
            ScenarioKind::Car => Plant::Car(build_car_scenario(&cfg.car_params()?)?),
            ScenarioKind::Scalar => {
                Plant::Scalar(Scenario::scalar_lti(&cfg.scalar_params()?, cfg.horizon())?)
            }
        };
        let kprime = match &plant {
            Plant::Car(_) => Some(0),
            Plant::Scalar(s) => compute_kprime(
                s.system.a(0),
                s.system.b(0),
                s.system.c(0),
                &s.gains.controller[0],
                KPRIME_SEARCH,
            ),
        };
        let watermark_delay = match (cfg.detector.watermark_delay, kprime) {
            (Some(d), _) => d,
            (None, Some(k)) => k + 1,
            (None, None) => {
                return Err(CliError::Config(
                    "the watermark never reaches the output; set detector.watermark_delay".into(),
                ))
            }
        };
        Ok(Self {
            plant,
            watermark_delay,
            kprime,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        match &self.plant {
            Plant::Car(c) => &c.scenario,
            Plant::Scalar(s) => s,
        }
    }

    pub fn detector(&self, cfg: &Config, threshold: f64) -> Result<DetectorConfig, CliError> {
        let s = self.scenario();
        Ok(DetectorConfig::new(
            cfg.detector.window,
            s.system.output_dim(),
            s.noise.watermark(),
            threshold,
            self.watermark_delay,
        )?)
    }

    fn seconds_to_step(&self, seconds: f64) -> usize {
        (seconds / self.scenario().dt()).round() as usize
    }

    pub fn attack(&self, cfg: &Config) -> Result<Option<AttackConfig>, CliError> {
        let s = self.scenario();
        let start = self.seconds_to_step(cfg.attack.start);
        if cfg.attack.kind != AttackKind::None && start >= s.horizon() {
            return Err(CliError::Config(format!(
                "attack start {} s is beyond the {} s horizon",
                cfg.attack.start,
                s.horizon() as f64 * s.dt()
            )));
        }
        let h = s.horizon();
        match cfg.attack.kind {
            AttackKind::None => Ok(None),
            AttackKind::Replay => Ok(Some(replay_preset(&s.system, &s.noise, &s.gains, start)?)),
            AttackKind::Custom => {
                let p = s.system.state_dim();
                let r = s.system.output_dim();
                let omega = cfg.false_process()?.unwrap_or_else(|| DMatrix::zeros(p, p));
                let zeta = cfg.false_measurement()?.unwrap_or_else(|| DMatrix::zeros(r, r));
                if omega.shape() != (p, p) || zeta.shape() != (r, r) {
                    return Err(CliError::Config(format!(
                        "custom attack needs a {p}x{p} false_process and {r}x{r} false_measurement"
                    )));
                }
                let omega = match &self.plant {
                    Plant::Car(car) => car.realized_state_covariance(&omega),
                    Plant::Scalar(_) => vec![omega; h],
                };
                Ok(Some(AttackConfig::new(
                    cfg.attack.alpha,
                    omega,
                    vec![zeta; h],
                    start,
                )?))
            }
        }
    }

    pub fn simulate_runs(
        &self,
        attack: Option<&AttackConfig>,
        seed: u64,
        base: u64,
        runs: usize,
    ) -> Result<Vec<DetectionTrace>, CliError> {
        (0..runs)
            .map(|j| Ok(self.scenario().simulate(attack, derive_seed(seed, base + j as u64))?))
            .collect()
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Core(e.into())
}

pub fn synth(cfg: &Config, out: &OutDir) -> Result<String, CliError> {
    let model = Model::build(cfg)?;
    let s = model.scenario();
    let h = s.horizon();

    out.write_with("schedule.csv", |w| {
        let mut recs = Vec::with_capacity(5 * h + 1);
        for n in 0..h {
            recs.push(MatrixRecord::borrowed(n, "A", s.system.a(n)));
            recs.push(MatrixRecord::borrowed(n, "B", s.system.b(n)));
            recs.push(MatrixRecord::borrowed(n, "C", s.system.c(n)));
            recs.push(MatrixRecord::borrowed(n, "Sigma_w", s.noise.process(n)));
            recs.push(MatrixRecord::borrowed(n, "Sigma_z", s.noise.measurement(n)));
        }
        recs.push(MatrixRecord::borrowed(0, "Sigma_e", s.noise.watermark()));
        if let Plant::Car(CarScenario {
            transforms: Some(t), ..
        }) = &model.plant
        {
            recs.extend(t.iter().enumerate().map(|(n, m)| MatrixRecord::borrowed(n, "T", m)));
        }
        Ok(write_matrix_csv(w, &recs)?)
    })?;
    out.write_with("gains.csv", |w| {
        let mut recs = Vec::with_capacity(2 * h);
        for n in 0..h {
            recs.push(MatrixRecord::borrowed(n, "K", &s.gains.controller[n]));
            recs.push(MatrixRecord::borrowed(n, "L", &s.gains.observer[n]));
        }
        Ok(write_matrix_csv(w, &recs)?)
    })?;
    if let Plant::Car(car) = &model.plant {
        out.write_with("reference.csv", |w| write_reference(w, car))?;
    }

    let report = verify_assumptions(&s.system, &s.gains, &s.noise, &s.normalization)?;
    let identity = s.normalization.identity_error(&s.system, &s.noise).unwrap_or(f64::NAN);
    let mut text = report.to_key_values();
    text.push_str(&key_values(&[
        ("normalization_identity_error", identity.to_string()),
        (
            "kprime",
            model.kprime.map_or("none".into(), |k| k.to_string()),
        ),
        ("watermark_delay", model.watermark_delay.to_string()),
    ]));
    out.write_text("assumptions.txt", &text)?;
    out.write_text(
        MANIFEST,
        &key_values(&[
            ("config_hash", cfg.model_hash()),
            ("horizon", h.to_string()),
            ("dt", s.dt().to_string()),
            ("state_dim", s.system.state_dim().to_string()),
            ("input_dim", s.system.input_dim().to_string()),
            ("output_dim", s.system.output_dim().to_string()),
            ("assumptions_pass", report.pass.to_string()),
        ]),
    )?;
    if !report.pass {
        return Err(CliError::Assumptions(text));
    }
    Ok(text)
}

fn write_reference(w: &mut dyn Write, car: &CarScenario) -> Result<(), CliError> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "n", "t", "x", "y", "heading", "speed", "yaw_rate", "accel", "yaw_accel", "noise_scale",
    ])
    .map_err(csv_err)?;
    let dt = car.trajectory.dt();
    for (n, (s, k)) in car.trajectory.samples().iter().zip(&car.speed_scale).enumerate() {
        csv.write_record(
            [n as f64, n as f64 * dt, s.x, s.y, s.heading, s.speed, s.yaw_rate, s.accel, s.yaw_accel, *k]
                .iter()
                .enumerate()
                .map(|(i, v)| if i == 0 { n.to_string() } else { v.to_string() }),
        )
        .map_err(csv_err)?;
    }
    csv.flush().map_err(|e| CliError::Core(e.into()))?;
    Ok(())
}

pub fn calibrate(cfg: &Config, out: &OutDir) -> Result<String, CliError> {
    let hash = cfg.model_hash();
    out.require_hash(MANIFEST, &hash)?;
    let model = Model::build(cfg)?;
    let s = model.scenario();
    let runs = cfg.run.runs;
    let mut traces = model.simulate_runs(None, cfg.run.seed, 0, runs)?;
    let kind = cfg.detector.normalization;
    let norm = match kind {
        NormalizationKind::Analytic => s.normalization.clone(),
        NormalizationKind::Ensemble => estimate_normalization_ensemble(&traces)?,
        NormalizationKind::Lti => {
            NormalizationSchedule::constant(lti_baseline_normalization(&traces)?, s.horizon())
        }
    };
    let det = model.detector(cfg, f64::INFINITY)?;
    let mut samples = Vec::new();
    for t in &mut traces {
        score_trace(t, &norm, &det)?;
        samples.extend(t.metric.iter().flatten().copied());
    }
    let rate = cfg.detector.target_rate();
    let threshold = calibrate_threshold(&samples, s.dt(), rate)?;

    out.write_with(NORMALIZATION, |w| Ok(norm.write_csv(w)?))?;
    out.write_with("calibration_metric.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["run", "n", "t", "metric"]).map_err(csv_err)?;
        for (j, t) in traces.iter().enumerate() {
            for (n, m) in t.metric.iter().enumerate() {
                if let Some(m) = m {
                    csv.write_record([
                        j.to_string(),
                        n.to_string(),
                        (n as f64 * s.dt()).to_string(),
                        m.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        csv.flush().map_err(|e| CliError::Core(e.into()))?;
        Ok(())
    })?;
    let text = key_values(&[
        ("config_hash", hash),
        ("normalization", kind.name().into()),
        ("window", cfg.detector.window.to_string()),
        ("watermark_delay", model.watermark_delay.to_string()),
        ("target_rate", rate.to_string()),
        ("runs", runs.to_string()),
        ("seed", cfg.run.seed.to_string()),
        ("samples", samples.len().to_string()),
        ("threshold", threshold.to_string()),
    ]);
    out.write_text(THRESHOLD, &text)?;
    Ok(text)
}

fn median(sorted: &[usize]) -> Option<f64> {
    match sorted.len() {
        0 => None,
        n if n % 2 == 1 => Some(sorted[n / 2] as f64),
        n => Some((sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0),
    }
}

pub fn detect(cfg: &Config, out: &OutDir) -> Result<String, CliError> {
    let hash = cfg.model_hash();
    out.require_hash(MANIFEST, &hash)?;
    let cal = out.require_hash(THRESHOLD, &hash)?;
    let threshold: f64 = cal
        .get("threshold")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| CliError::Config(format!("{THRESHOLD} has no valid threshold")))?;
    let norm_path = out.path(NORMALIZATION);
    let file = std::fs::File::open(&norm_path).map_err(|e| {
        CliError::Config(format!("missing artifact {} ({e})", norm_path.display()))
    })?;
    let norm = NormalizationSchedule::read_csv(std::io::BufReader::new(file))?;

    let model = Model::build(cfg)?;
    let s = model.scenario();
    let attack = model.attack(cfg)?;
    let det = model.detector(cfg, threshold)?;
    let window = cfg.detector.window;
    let start = attack.as_ref().map(|a| a.start_step());
    let dt = s.dt();

    let mut first_alarms = Vec::with_capacity(cfg.run.runs);
    let mut pre_attack_events = 0usize;
    let mut rows = Vec::with_capacity(cfg.run.runs);
    for j in 0..cfg.run.runs {
        let mut trace =
            s.simulate(attack.as_ref(), derive_seed(cfg.run.seed, DETECT_STREAM + j as u64))?;
        score_trace(&mut trace, &norm, &det)?;
        let clean_len = start.unwrap_or(trace.len());
        let events = count_alarm_events(&trace.alarm, window);
        let clean_events = count_alarm_events(&trace.alarm[..clean_len], window);
        pre_attack_events += clean_events;
        let first = start.and_then(|st| first_alarm_from(&trace.alarm, st));
        if let (Some(f), Some(st)) = (first, start) {
            first_alarms.push(f - st);
        }
        rows.push((j, first, events, clean_events));
        if j == 0 {
            out.write_with("trace.csv", |w| Ok(trace.write_csv(w)?))?;
            out.write_with("metric.csv", |w| {
                Ok(write_metric_csv(w, dt, &trace.metric, &trace.alarm, threshold, window)?)
            })?;
        }
    }
    out.write_with("detections.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["run", "first_alarm_step", "delay_steps", "delay_s", "alarm_events", "pre_attack_events"])
            .map_err(csv_err)?;
        for (j, first, events, clean) in &rows {
            let delay = first.zip(start).map(|(f, st)| f - st);
            csv.write_record([
                j.to_string(),
                first.map(|f| f.to_string()).unwrap_or_default(),
                delay.map(|d| d.to_string()).unwrap_or_default(),
                delay.map(|d| (d as f64 * dt).to_string()).unwrap_or_default(),
                events.to_string(),
                clean.to_string(),
            ])
            .map_err(csv_err)?;
        }
        csv.flush().map_err(|e| CliError::Core(e.into()))?;
        Ok(())
    })?;

    first_alarms.sort_unstable();
    let clean_seconds = cfg.run.runs as f64 * start.unwrap_or(s.horizon()) as f64 * dt;
    let med = median(&first_alarms);
    let mut pairs = vec![
        ("attack", cfg.attack.kind.name().to_string()),
        ("runs", cfg.run.runs.to_string()),
        ("seed", cfg.run.seed.to_string()),
        ("normalization", cal.get("normalization").cloned().unwrap_or_default()),
        ("threshold", threshold.to_string()),
    ];
    if let Some(st) = start {
        pairs.extend([
            ("attack_start_step", st.to_string()),
            ("attack_start_s", (st as f64 * dt).to_string()),
            ("detected_runs", first_alarms.len().to_string()),
            ("median_delay_steps", med.map_or("none".into(), |m| m.to_string())),
            ("median_delay_s", med.map_or("none".into(), |m| (m * dt).to_string())),
        ]);
    }
    pairs.extend([
        ("false_alarm_events", pre_attack_events.to_string()),
        ("false_alarm_observed_s", clean_seconds.to_string()),
        (
            "false_alarm_events_per_50s",
            if clean_seconds > 0.0 {
                (pre_attack_events as f64 / clean_seconds * 50.0).to_string()
            } else {
                "none".into()
            },
        ),
    ]);
    let text = key_values(&pairs);
    out.write_text("summary.txt", &text)?;
    Ok(text)
}

/// Steps discarded before computing the temporal variation of the mean metric.
pub fn comparison_burn_in(window: usize, delay: usize) -> usize {
    delay + 2 * window
}

pub fn compare(cfg: &Config, out: &OutDir) -> Result<String, CliError> {
    let hash = cfg.model_hash();
    out.require_hash(MANIFEST, &hash)?;
    let model = Model::build(cfg)?;
    let s = model.scenario();
    let traces = model.simulate_runs(None, cfg.run.seed, COMPARE_STREAM, cfg.run.runs)?;
    let ltv = match cfg.detector.normalization {
        NormalizationKind::Ensemble => estimate_normalization_ensemble(&traces)?,
        _ => s.normalization.clone(),
    };
    let lti = NormalizationSchedule::constant(lti_baseline_normalization(&traces)?, s.horizon());
    let det = model.detector(cfg, f64::INFINITY)?;
    let score_all = |norm: &NormalizationSchedule| -> Result<Vec<Option<f64>>, CliError> {
        let mut scored = traces.clone();
        for t in &mut scored {
            score_trace(t, norm, &det)?;
        }
        Ok(ensemble_mean_metric(&scored))
    };
    let ltv_mean = score_all(&ltv)?;
    let lti_mean = score_all(&lti)?;
    let burn = comparison_burn_in(cfg.detector.window, model.watermark_delay);
    let tail = |m: &[Option<f64>]| -> Vec<f64> { m.iter().skip(burn).flatten().copied().collect() };
    let cov_ltv = coefficient_of_variation(&tail(&ltv_mean));
    let cov_lti = coefficient_of_variation(&tail(&lti_mean));

    out.write_with("compare.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["n", "t", "ltv_mean_metric", "lti_mean_metric"]).map_err(csv_err)?;
        for n in 0..ltv_mean.len() {
            let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            csv.write_record([
                n.to_string(),
                (n as f64 * s.dt()).to_string(),
                f(ltv_mean[n]),
                f(lti_mean[n]),
            ])
            .map_err(csv_err)?;
        }
        csv.flush().map_err(|e| CliError::Core(e.into()))?;
        Ok(())
    })?;
    let text = key_values(&[
        ("runs", cfg.run.runs.to_string()),
        ("seed", cfg.run.seed.to_string()),
        ("ltv_normalization", if cfg.detector.normalization == NormalizationKind::Ensemble { "ensemble" } else { "analytic" }.into()),
        ("burn_in_steps", burn.to_string()),
        ("ltv_cov", cov_ltv.to_string()),
        ("lti_cov", cov_lti.to_string()),
        ("ltv_more_consistent", (cov_ltv < cov_lti).to_string()),
    ]);
    out.write_text("compare.txt", &text)?;
    Ok(text)
}
