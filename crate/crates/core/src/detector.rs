//! Time-varying residual normalization and the sliding-window Wishart test.
//!
//! Under no attack the normalized residual `V[n] (C[n] x̂[n] - y[n])` has
//! identity covariance at every step, so stacking it with the delayed
//! watermark gives vectors `ψ[n] ~ N(0, S)` with `S = diag(I_r, Σe)`. The
//! window sum `Q[n] = Σ ψψᵀ` over the last `ℓ+1` steps is then approximately
//! Wishart with scale `S`, and the detector scores each window by the
//! negative log-likelihood of `S`:
//!
//! ```text
//! L(Q) = (q + r - ℓ) log|Q| + tr(S⁻¹ Q)
//! ```

use std::collections::VecDeque;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::io::{read_matrix_csv, write_matrix_csv, MatrixRecord};
use crate::linalg::{
    block_diag, log_det_floored, max_abs, require_spd, spd_inv_sqrt, spectral_norm, try_inverse,
};
use crate::system::{DetectionTrace, GainSchedule, NoiseSchedule, StateSpaceSchedule};

/// Full recomputation period of the incrementally maintained window sum.
pub const RECOMPUTE_PERIOD: usize = 1024;

/// Observer-error covariance `Σδ[n]` for `n < horizon`, starting from zero.
///
/// Uses `Σδ[n+1] = A̲ Σδ[n] A̲ᵀ + Σw[n] + L Σz[n] Lᵀ` with `A̲ = A + L C`.
pub fn propagate_error_covariance(
    system: &StateSpaceSchedule,
    gains: &GainSchedule,
    noise: &NoiseSchedule,
    horizon: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if horizon > system.horizon() {
        return Err(Error::HorizonExceeded {
            step: horizon,
            horizon: system.horizon(),
        });
    }
    noise.check_against(system)?;
    gains.check_against(system)?;
    let p = system.state_dim();
    let mut out = Vec::with_capacity(horizon);
    if horizon == 0 {
        return Ok(out);
    }
    let mut sigma = DMatrix::zeros(p, p);
    for n in 0..horizon {
        out.push(sigma.clone());
        if n + 1 == horizon {
            break;
        }
        let obs = system.observer_loop(gains, n);
        let l = &gains.observer[n];
        let next = &obs * &sigma * obs.transpose()
            + noise.process(n)
            + l * noise.measurement(n) * l.transpose();
        sigma = (&next + next.transpose()) * 0.5;
    }
    Ok(out)
}

/// `V = (C Σδ Cᵀ + Σz)^(-1/2)`, principal inverse square root.
pub fn normalization_factor(
    sigma_delta: &DMatrix<f64>,
    c: &DMatrix<f64>,
    sigma_z: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let m = c * sigma_delta * c.transpose() + sigma_z;
    spd_inv_sqrt(&m, "C Sigma_delta C^T + Sigma_z")
}

/// Per-step normalization factors, optionally with the `Σδ[n]` they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationSchedule {
    sigma_delta: Option<Vec<DMatrix<f64>>>,
    v: Vec<DMatrix<f64>>,
}

impl NormalizationSchedule {
    pub fn analytic(
        system: &StateSpaceSchedule,
        gains: &GainSchedule,
        noise: &NoiseSchedule,
    ) -> Result<Self> {
        let h = system.horizon();
        let sigma_delta = propagate_error_covariance(system, gains, noise, h)?;
        let v = sigma_delta
            .iter()
            .enumerate()
            .map(|(n, s)| normalization_factor(s, system.c(n), noise.measurement(n)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sigma_delta: Some(sigma_delta),
            v,
        })
    }

    pub fn from_factors(v: Vec<DMatrix<f64>>) -> Self {
        Self {
            sigma_delta: None,
            v,
        }
    }

    pub fn constant(v: DMatrix<f64>, horizon: usize) -> Self {
        Self::from_factors(vec![v; horizon])
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn v(&self, n: usize) -> &DMatrix<f64> {
        &self.v[n]
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.v
    }

    pub fn sigma_delta(&self) -> Option<&[DMatrix<f64>]> {
        self.sigma_delta.as_deref()
    }

    /// `max_n ‖V[n] (C[n] Σδ[n] C[n]ᵀ + Σz[n]) V[n]ᵀ - I‖`; `None` without `Σδ`.
    pub fn identity_error(
        &self,
        system: &StateSpaceSchedule,
        noise: &NoiseSchedule,
    ) -> Option<f64> {
        let sigma = self.sigma_delta.as_ref()?;
        let r = system.output_dim();
        let eye = DMatrix::<f64>::identity(r, r);
        Some(
            sigma
                .iter()
                .zip(&self.v)
                .enumerate()
                .map(|(n, (s, v))| {
                    let c = system.c(n);
                    let m = c * s * c.transpose() + noise.measurement(n);
                    spectral_norm(&(v * m * v.transpose() - &eye))
                })
                .fold(0.0, f64::max),
        )
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut records = Vec::new();
        if let Some(sigma) = &self.sigma_delta {
            records.extend(sigma.iter().enumerate().map(|(n, m)| MatrixRecord::borrowed(n, "Sigma_delta", m)));
        }
        records.extend(self.v.iter().enumerate().map(|(n, m)| MatrixRecord::borrowed(n, "V", m)));
        write_matrix_csv(out, &records)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let records = read_matrix_csv(input)?;
        let mut sigma = Vec::new();
        let mut v = Vec::new();
        for rec in records {
            let target = match rec.name.as_str() {
                "Sigma_delta" => &mut sigma,
                "V" => &mut v,
                other => return Err(Error::Parse(format!("unexpected matrix '{other}'"))),
            };
            if rec.n != target.len() {
                return Err(Error::Parse(format!(
                    "{} entries out of order at step {}",
                    rec.name, rec.n
                )));
            }
            target.push(rec.matrix.into_owned());
        }
        if !sigma.is_empty() && sigma.len() != v.len() {
            return Err(Error::Parse("Sigma_delta and V lengths differ".into()));
        }
        Ok(Self {
            sigma_delta: if sigma.is_empty() { None } else { Some(sigma) },
            v,
        })
    }
}

fn residual_dim(traces: &[DetectionTrace]) -> Result<(usize, usize)> {
    let first = traces.first().ok_or_else(|| Error::InsufficientSamples {
        what: "normalization ensemble".into(),
        needed: 1,
        got: 0,
    })?;
    let len = first.len();
    if len == 0 {
        return Err(Error::InsufficientSamples {
            what: "trace length".into(),
            needed: 1,
            got: 0,
        });
    }
    let r = first.residual[0].len();
    for t in traces {
        if t.len() != len {
            return Err(Error::InvalidParameter(
                "ensemble traces have different lengths".into(),
            ));
        }
    }
    Ok((len, r))
}

fn ridged_inv_sqrt(mut m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let r = m.nrows();
    let scale = m.trace() / r as f64;
    if !(scale > 0.0) {
        return Err(Error::NotPositiveDefinite {
            name: what.to_string(),
            min_eigenvalue: 0.0,
        });
    }
    for i in 0..r {
        m[(i, i)] += 1e-9 * scale;
    }
    spd_inv_sqrt(&m, what)
}

/// Ensemble estimate `V[n] = ((1/i) Σ_j r[n]⁽ʲ⁾ r[n]⁽ʲ⁾ᵀ)^(-1/2)` from unattacked runs.
///
/// A ridge of `1e-9 · tr(M)/r` is added before inversion. Fewer traces than
/// the residual dimension is an error.
pub fn estimate_normalization_ensemble(traces: &[DetectionTrace]) -> Result<NormalizationSchedule> {
    let (len, r) = residual_dim(traces)?;
    if traces.len() < r {
        return Err(Error::InsufficientSamples {
            what: "normalization ensemble (sample covariance rank)".into(),
            needed: r,
            got: traces.len(),
        });
    }
    let inv_i = 1.0 / traces.len() as f64;
    let v = (0..len)
        .map(|n| {
            let mut m = DMatrix::zeros(r, r);
            for t in traces {
                let res = &t.residual[n];
                m.ger(inv_i, res, res, 1.0);
            }
            ridged_inv_sqrt(m, &format!("ensemble residual covariance[{n}]"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NormalizationSchedule::from_factors(v))
}

/// Single time-invariant `V` from the residual covariance averaged over time and ensemble.
pub fn lti_baseline_normalization(traces: &[DetectionTrace]) -> Result<DMatrix<f64>> {
    let (len, r) = residual_dim(traces)?;
    let total = (len * traces.len()) as f64;
    if (total as usize) < r {
        return Err(Error::InsufficientSamples {
            what: "time-averaged residual covariance".into(),
            needed: r,
            got: total as usize,
        });
    }
    let mut m = DMatrix::zeros(r, r);
    for t in traces {
        for res in &t.residual {
            m.ger(1.0 / total, res, res, 1.0);
        }
    }
    ridged_inv_sqrt(m, "time-averaged residual covariance")
}

/// Window length, scale matrix, threshold and watermark delay.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    window: usize,
    scale: DMatrix<f64>,
    scale_inv: DMatrix<f64>,
    threshold: f64,
    watermark_delay: usize,
    output_dim: usize,
}

impl DetectorConfig {
    /// `window` is `ℓ+1` and must be at least `q + r`.
    pub fn new(
        window: usize,
        output_dim: usize,
        sigma_e: &DMatrix<f64>,
        threshold: f64,
        watermark_delay: usize,
    ) -> Result<Self> {
        let q = sigma_e.nrows();
        if window < q + output_dim {
            return Err(Error::InvalidParameter(format!(
                "window {window} is smaller than q + r = {}",
                q + output_dim
            )));
        }
        if watermark_delay == 0 {
            return Err(Error::InvalidParameter(
                "watermark delay must be at least one step".into(),
            ));
        }
        require_spd(sigma_e, "Sigma_e")?;
        let scale = block_diag(&DMatrix::identity(output_dim, output_dim), sigma_e);
        let scale_inv = try_inverse(&scale, "detector scale matrix")?;
        Ok(Self {
            window,
            scale,
            scale_inv,
            threshold,
            watermark_delay,
            output_dim,
        })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn scale(&self) -> &DMatrix<f64> {
        &self.scale
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn watermark_delay(&self) -> usize {
        self.watermark_delay
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }
}

/// `(q + r - ℓ) log|Q| + tr(S⁻¹ Q)` with `ℓ + 1 = window`.
///
/// Returns the metric and whether `|Q|` had to be floored.
pub fn wishart_nll(q: &DMatrix<f64>, scale_inv: &DMatrix<f64>, window: usize) -> (f64, bool) {
    let dim = q.nrows() as f64;
    let coef = dim + 1.0 - window as f64;
    let (log_det, clamped) = log_det_floored(q);
    let trace = scale_inv.component_mul(q).sum();
    (coef * log_det + trace, clamped)
}

/// Sliding sum of `ψψᵀ` over the last `window` vectors.
#[derive(Debug, Clone)]
pub struct WindowStatistic {
    window: usize,
    buffer: VecDeque<DVector<f64>>,
    q: DMatrix<f64>,
    since_recompute: usize,
}

impl WindowStatistic {
    pub fn new(window: usize, dim: usize) -> Self {
        Self {
            window,
            buffer: VecDeque::with_capacity(window + 1),
            q: DMatrix::zeros(dim, dim),
            since_recompute: 0,
        }
    }

    pub fn is_full(&self) -> bool {
        self.buffer.len() == self.window
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn buffer(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.buffer.iter()
    }

    pub fn push(&mut self, psi: DVector<f64>) {
        self.q.ger(1.0, &psi, &psi, 1.0);
        self.buffer.push_back(psi);
        if self.buffer.len() > self.window {
            let old = self.buffer.pop_front().expect("non-empty buffer");
            self.q.ger(-1.0, &old, &old, 1.0);
        }
        self.since_recompute += 1;
        if self.since_recompute >= RECOMPUTE_PERIOD {
            self.q = self.recompute();
            self.since_recompute = 0;
        }
    }

    /// Window sum computed from scratch.
    pub fn recompute(&self) -> DMatrix<f64> {
        let d = self.q.nrows();
        let mut q = DMatrix::zeros(d, d);
        for psi in &self.buffer {
            q.ger(1.0, psi, psi, 1.0);
        }
        q
    }

    pub fn clear(&mut self) {
        self.buffer.clear();
        self.q.fill(0.0);
        self.since_recompute = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    /// `None` while the window is still filling.
    pub metric: Option<f64>,
    pub alarm: bool,
    /// `|Q|` was non-positive and the log-determinant was floored.
    pub degenerate: bool,
}

/// `ψ = [V r; e_delayed]`.
pub fn stack_psi(v: &DMatrix<f64>, residual: &DVector<f64>, e_delayed: &DVector<f64>) -> DVector<f64> {
    let top = v * residual;
    let mut psi = DVector::zeros(top.len() + e_delayed.len());
    psi.rows_mut(0, top.len()).copy_from(&top);
    psi.rows_mut(top.len(), e_delayed.len()).copy_from(e_delayed);
    psi
}

pub fn push_and_score(
    stat: &mut WindowStatistic,
    residual: &DVector<f64>,
    v: &DMatrix<f64>,
    e_delayed: &DVector<f64>,
    config: &DetectorConfig,
) -> Result<Score> {
    let r = config.output_dim;
    if residual.len() != r || v.shape() != (r, r) {
        return Err(Error::dims("normalized residual", (r, r), v.shape()));
    }
    if e_delayed.len() + r != config.dim() {
        return Err(Error::dims(
            "delayed watermark",
            (config.dim() - r, 1),
            (e_delayed.len(), 1),
        ));
    }
    stat.push(stack_psi(v, residual, e_delayed));
    if !stat.is_full() {
        return Ok(Score {
            metric: None,
            alarm: false,
            degenerate: false,
        });
    }
    let (metric, degenerate) = wishart_nll(stat.q(), &config.scale_inv, config.window);
    Ok(Score {
        metric: Some(metric),
        alarm: metric > config.threshold,
        degenerate,
    })
}

/// Scores every step of `trace` in place and returns the steps whose window
/// determinant was degenerate.
///
/// Steps before the watermark delay have no `ψ` and stay pending.
pub fn score_trace(
    trace: &mut DetectionTrace,
    normalization: &NormalizationSchedule,
    config: &DetectorConfig,
) -> Result<Vec<usize>> {
    if normalization.len() < trace.len() {
        return Err(Error::InvalidParameter(format!(
            "normalization covers {} steps, trace has {}",
            normalization.len(),
            trace.len()
        )));
    }
    let mut stat = WindowStatistic::new(config.window, config.dim());
    let mut degenerate = Vec::new();
    let delay = config.watermark_delay;
    for n in 0..trace.len() {
        if n < delay {
            trace.metric[n] = None;
            trace.alarm[n] = false;
            continue;
        }
        let score = push_and_score(
            &mut stat,
            &trace.residual[n],
            normalization.v(n),
            &trace.e[n - delay],
            config,
        )?;
        trace.metric[n] = score.metric;
        trace.alarm[n] = score.alarm;
        if score.degenerate {
            degenerate.push(n);
        }
    }
    Ok(degenerate)
}

/// Empirical `(1 - dt·rate)` quantile of pooled no-attack metric samples.
///
/// A zero rate yields `+∞`. At least `10 / (dt·rate)` samples are required.
pub fn calibrate_threshold(samples: &[f64], dt: f64, target_rate: f64) -> Result<f64> {
    if !(target_rate >= 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rate {target_rate} and dt {dt} must be non-negative and positive"
        )));
    }
    if target_rate == 0.0 {
        return Ok(f64::INFINITY);
    }
    let tail = dt * target_rate;
    if tail >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "target rate {target_rate}/s exceeds one alarm per step"
        )));
    }
    let needed = (10.0 / tail).ceil() as usize;
    if samples.len() < needed {
        return Err(Error::InsufficientSamples {
            what: "threshold quantile".into(),
            needed,
            got: samples.len(),
        });
    }
    let mut sorted: Vec<f64> = samples.to_vec();
    if sorted.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            what: "metric samples".into(),
        });
    }
    sorted.sort_by(f64::total_cmp);
    let q = 1.0 - tail;
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    Ok(sorted[idx])
}

/// Groups alarms into events: an alarm less than `window` steps after the
/// previous alarm belongs to the same event.
pub fn alarm_events(alarms: &[bool], window: usize) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(alarms.len());
    let mut last: Option<usize> = None;
    let mut next_id = 0usize;
    for (n, &a) in alarms.iter().enumerate() {
        if !a {
            out.push(None);
            continue;
        }
        match last {
            Some(prev) if n - prev < window => {}
            _ => next_id += 1,
        }
        last = Some(n);
        out.push(Some(next_id - 1));
    }
    out
}

pub fn count_alarm_events(alarms: &[bool], window: usize) -> usize {
    alarm_events(alarms, window)
        .iter()
        .flatten()
        .max()
        .map_or(0, |m| m + 1)
}

/// First alarm at or after step `start`.
pub fn first_alarm_from(alarms: &[bool], start: usize) -> Option<usize> {
    alarms.iter().skip(start).position(|&a| a).map(|k| k + start)
}

/// Per-step mean of the metric across scored traces; `None` where any trace
/// has no metric yet.
pub fn ensemble_mean_metric(traces: &[DetectionTrace]) -> Vec<Option<f64>> {
    let len = traces.iter().map(DetectionTrace::len).min().unwrap_or(0);
    (0..len)
        .map(|n| {
            let mut sum = 0.0;
            for t in traces {
                sum += t.metric[n]?;
            }
            Some(sum / traces.len() as f64)
        })
        .collect()
}

/// Sample standard deviation over the absolute mean.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() / mean.abs()
}

/// Sample averages of the two asymptotic tests over the first `i` steps:
///
/// ```text
/// C1 = (1/i) Σ V[n] r[n] e[n-1]ᵀ
/// C2 = (1/i) Σ V[n] r[n] r[n]ᵀ V[n]ᵀ
/// ```
///
/// with `e[-1] = 0`. One `(C1, C2)` pair is returned per requested prefix
/// length in `sizes`.
pub fn asymptotic_statistics_prefixes(
    trace: &DetectionTrace,
    normalization: &NormalizationSchedule,
    sizes: &[usize],
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let max = sizes.iter().copied().max().unwrap_or(0);
    if max > trace.len() || max > normalization.len() {
        return Err(Error::InsufficientSamples {
            what: "asymptotic statistics".into(),
            needed: max,
            got: trace.len().min(normalization.len()),
        });
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidParameter("sample size must be positive".into()));
    }
    let r = trace.residual.first().map_or(0, |v| v.len());
    let q = trace.e.first().map_or(0, |v| v.len());
    let mut c1 = DMatrix::zeros(r, q);
    let mut c2 = DMatrix::zeros(r, r);
    let mut out = vec![(DMatrix::zeros(r, q), DMatrix::zeros(r, r)); sizes.len()];
    for n in 0..max {
        let nr = normalization.v(n) * &trace.residual[n];
        if n > 0 {
            c1.ger(1.0, &nr, &trace.e[n - 1], 1.0);
        }
        c2.ger(1.0, &nr, &nr, 1.0);
        for (k, &i) in sizes.iter().enumerate() {
            if i == n + 1 {
                out[k] = (&c1 / i as f64, &c2 / i as f64);
            }
        }
    }
    Ok(out)
}

pub fn asymptotic_statistics(
    trace: &DetectionTrace,
    normalization: &NormalizationSchedule,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut v = asymptotic_statistics_prefixes(trace, normalization, &[trace.len()])?;
    Ok(v.remove(0))
}

/// `‖C2 - I‖` in the spectral norm.
pub fn covariance_deviation(c2: &DMatrix<f64>) -> f64 {
    let r = c2.nrows();
    spectral_norm(&(c2 - DMatrix::identity(r, r)))
}

/// Tidy CSV of a scored run: `n, t, metric, threshold, alarm, alarm_event_id`.
pub fn write_metric_csv<W: Write>(
    out: W,
    dt: f64,
    metric: &[Option<f64>],
    alarm: &[bool],
    threshold: f64,
    window: usize,
) -> Result<()> {
    let events = alarm_events(alarm, window);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "t", "metric", "threshold", "alarm", "alarm_event_id"])?;
    for n in 0..metric.len() {
        w.write_record([
            n.to_string(),
            (n as f64 * dt).to_string(),
            metric[n].map(|m| m.to_string()).unwrap_or_default(),
            threshold.to_string(),
            if alarm[n] { "1".into() } else { "0".into() },
            events[n].map(|e| e.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Max-abs entrywise gap between the incremental and recomputed window sums.
pub fn window_drift(stat: &WindowStatistic) -> f64 {
    max_abs(&(stat.q() - stat.recompute()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_schedule(a: f64, h: usize) -> (StateSpaceSchedule, NoiseSchedule, GainSchedule) {
        let sys = StateSpaceSchedule::time_invariant(
            0.1,
            h,
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let noise = NoiseSchedule::time_invariant(
            h,
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        (sys, noise, GainSchedule::new(vec![DMatrix::zeros(1, 1); h], vec![DMatrix::zeros(1, 1); h]))
    }

    #[test]
    fn error_covariance_initial_steps() {
        let h = 4;
        let (sys, _, _) = scalar_schedule(0.7, h);
        let noise = NoiseSchedule::time_invariant(
            h,
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 3.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let gains = GainSchedule::new(
            vec![DMatrix::zeros(1, 1); h],
            vec![DMatrix::from_element(1, 1, -0.5); h],
        );
        let s = propagate_error_covariance(&sys, &gains, &noise, h).unwrap();
        assert_eq!(s[0][(0, 0)], 0.0);
        // Σw + L Σz Lᵀ = 2 + 0.25 * 3
        assert!((s[1][(0, 0)] - 2.75).abs() < 1e-15);
    }

    #[test]
    fn scalar_fixed_point() {
        // A̲ = a + l c = 0.5 with Σw = 1 and L Σz Lᵀ = 0.25.
        let h = 200;
        let (sys, _, _) = scalar_schedule(1.0, h);
        let noise = NoiseSchedule::time_invariant(
            h,
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let gains = GainSchedule::new(
            vec![DMatrix::zeros(1, 1); h],
            vec![DMatrix::from_element(1, 1, -0.5); h],
        );
        let s = propagate_error_covariance(&sys, &gains, &noise, h).unwrap();
        assert!((s[h - 1][(0, 0)] - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_factor_closed_forms() {
        let v = normalization_factor(
            &DMatrix::zeros(2, 2),
            &DMatrix::identity(2, 2),
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!(max_abs(&(v - DMatrix::identity(2, 2))) < 1e-15);
        let v = normalization_factor(
            &DMatrix::from_element(1, 1, 3.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!((v[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn normalization_rejects_indefinite() {
        let err = normalization_factor(
            &DMatrix::zeros(1, 1),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, -1.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn nll_at_scale_matrix() {
        // Q = S = I₂, q = r = 1, ℓ = 20 → (2 - 20)·0 + 2.
        let s = DMatrix::identity(2, 2);
        let (m, degenerate) = wishart_nll(&s, &s, 21);
        assert!((m - 2.0).abs() < 1e-14);
        assert!(!degenerate);
        // General S: (2 - 20) log|S| + tr(S⁻¹ S)
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let (m, _) = wishart_nll(&s, &s.clone().try_inverse().unwrap(), 21);
        assert!((m - (-18.0 * 4.0_f64.ln() + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn pending_until_full() {
        let cfg = DetectorConfig::new(3, 1, &DMatrix::identity(1, 1), 1e9, 1).unwrap();
        let mut stat = WindowStatistic::new(3, 2);
        let v = DMatrix::identity(1, 1);
        for k in 0..3 {
            let score = push_and_score(
                &mut stat,
                &DVector::from_element(1, 1.0 + k as f64),
                &v,
                &DVector::from_element(1, (k as f64) - 1.0),
                &cfg,
            )
            .unwrap();
            assert_eq!(score.metric.is_some(), k == 2);
            assert!(!score.alarm);
        }
    }

    #[test]
    fn degenerate_window_is_flagged() {
        let cfg = DetectorConfig::new(2, 1, &DMatrix::identity(1, 1), 0.0, 1).unwrap();
        let mut stat = WindowStatistic::new(2, 2);
        let v = DMatrix::identity(1, 1);
        let zero = DVector::zeros(1);
        push_and_score(&mut stat, &zero, &v, &zero, &cfg).unwrap();
        let score = push_and_score(&mut stat, &zero, &v, &zero, &cfg).unwrap();
        assert!(score.degenerate);
        assert!(score.metric.unwrap().is_finite());
    }

    #[test]
    fn window_must_cover_dimensions() {
        assert!(DetectorConfig::new(1, 1, &DMatrix::identity(1, 1), 0.0, 1).is_err());
        assert!(DetectorConfig::new(2, 1, &DMatrix::identity(1, 1), 0.0, 1).is_ok());
        let cfg = DetectorConfig::new(7, 5, &DMatrix::identity(2, 2), 0.0, 1).unwrap();
        let s = cfg.scale();
        assert_eq!(s.view((0, 5), (5, 2)).amax(), 0.0);
        assert_eq!(s.view((5, 0), (2, 5)).amax(), 0.0);
    }

    #[test]
    fn zero_rate_never_alarms() {
        assert_eq!(calibrate_threshold(&[1.0, 2.0], 0.05, 0.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn insufficient_samples_reports_count() {
        let err = calibrate_threshold(&vec![0.0; 50], 0.05, 1.0 / 50.0).unwrap_err();
        match err {
            Error::InsufficientSamples { needed, got, .. } => {
                assert_eq!(needed, 10_000);
                assert_eq!(got, 50);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn events_merge_within_window() {
        let alarms = [false, true, true, false, false, true, false, false, false, false, true];
        let ev = alarm_events(&alarms, 5);
        assert_eq!(
            ev,
            vec![None, Some(0), Some(0), None, None, Some(0), None, None, None, None, Some(1)]
        );
        assert_eq!(count_alarm_events(&alarms, 5), 2);
        assert_eq!(count_alarm_events(&[false; 4], 5), 0);
    }

    #[test]
    fn ensemble_needs_rank() {
        let trace = DetectionTrace {
            residual: vec![DVector::from_element(3, 1.0); 4],
            x: vec![DVector::zeros(1); 4],
            ..Default::default()
        };
        let err = estimate_normalization_ensemble(&[trace.clone(), trace]).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { needed: 3, got: 2, .. }));
    }

    #[test]
    fn identical_residuals_take_ridge_path() {
        let trace = DetectionTrace {
            residual: vec![DVector::from_vec(vec![1.0, 2.0]); 3],
            x: vec![DVector::zeros(1); 3],
            ..Default::default()
        };
        let est = estimate_normalization_ensemble(&[trace.clone(), trace.clone(), trace]).unwrap();
        assert!(est.v(0).iter().all(|v| v.is_finite()));
        let zero = DetectionTrace {
            residual: vec![DVector::zeros(2); 3],
            x: vec![DVector::zeros(1); 3],
            ..Default::default()
        };
        assert!(estimate_normalization_ensemble(&[zero.clone(), zero]).is_err());
    }

    #[test]
    fn normalization_csv_round_trip() {
        let h = 6;
        let (sys, noise, _) = scalar_schedule(0.8, h);
        let gains = GainSchedule::new(
            vec![DMatrix::zeros(1, 1); h],
            vec![DMatrix::from_element(1, 1, -0.3); h],
        );
        let norm = NormalizationSchedule::analytic(&sys, &gains, &noise).unwrap();
        let mut buf = Vec::new();
        norm.write_csv(&mut buf).unwrap();
        let back = NormalizationSchedule::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, norm);
    }
}
