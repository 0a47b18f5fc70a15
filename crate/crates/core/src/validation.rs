//! Monte Carlo checks of the asymptotic detection claims.
//!
//! Convergence in probability is operationalized as replicated-average norms
//! that decay along a ladder of sample sizes. The verdict thresholds below
//! are repository constants, not derived quantities.
//!
//! Replication `j` of a check seeded with `root` simulates with
//! `derive_seed(root, j)`; synthetic oracle draws use stream `1 << 32`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};

use crate::attack::AttackConfig;
use crate::detector::{
    asymptotic_statistics_prefixes, covariance_deviation, stack_psi, wishart_nll,
};
use crate::error::{Error, Result};
use crate::linalg::{max_abs, spectral_norm, try_inverse};
use crate::rng::{derive_seed, rng_from_seed, SimRng};
use crate::scenario::Scenario;

/// Largest fitted decay exponent still counted as converging.
pub const DECAY_EXPONENT_MAX: f64 = -0.3;
/// Absolute bound on `‖C1‖` at the largest sample size.
pub const C1_TOL: f64 = 0.02;
/// Absolute bound on `‖C2 - I‖` at the largest sample size.
pub const C2_TOL: f64 = 0.05;
/// Required ratio between an attacked plateau and the unattacked norm.
pub const SEPARATION: f64 = 10.0;

const ORACLE_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Converging,
    NonConverging,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Converging => "converging",
            Verdict::NonConverging => "non-converging",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub statistic: String,
    pub sample_sizes: Vec<usize>,
    pub values: Vec<f64>,
    pub exponent: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
}

impl ConvergenceReport {
    pub fn new(statistic: &str, sample_sizes: Vec<usize>, values: Vec<f64>, tolerance: f64) -> Self {
        let exponent = fit_decay_exponent(&sample_sizes, &values);
        let last = values.last().copied().unwrap_or(f64::INFINITY);
        let verdict = if last < tolerance && exponent <= DECAY_EXPONENT_MAX {
            Verdict::Converging
        } else {
            Verdict::NonConverging
        };
        Self {
            statistic: statistic.to_string(),
            sample_sizes,
            values,
            exponent,
            tolerance,
            verdict,
        }
    }

    pub fn final_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(f64::NAN)
    }

    pub fn to_key_values(&self) -> String {
        let join = |v: Vec<String>| v.join(" ");
        format!(
            "statistic = {}\nsizes = [{}]\nnorms = [{}]\nexponent = {}\ntolerance = {}\nverdict = {}\n",
            self.statistic,
            join(self.sample_sizes.iter().map(|s| s.to_string()).collect()),
            join(self.values.iter().map(|s| s.to_string()).collect()),
            self.exponent,
            self.tolerance,
            self.verdict
        )
    }
}

impl fmt::Display for ConvergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}: {} (exponent {:.3})", self.statistic, self.verdict, self.exponent)?;
        for (i, v) in self.sample_sizes.iter().zip(&self.values) {
            writeln!(f, "  i = {i:>8}  norm = {v:.6}")?;
        }
        Ok(())
    }
}

/// Least-squares slope of `ln(value)` against `ln(size)`.
pub fn fit_decay_exponent(sizes: &[usize], values: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = sizes
        .iter()
        .zip(values)
        .filter(|(_, v)| **v > 0.0)
        .map(|(s, v)| ((*s as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

fn check_ladder(scenario: &Scenario, sizes: &[usize], replications: usize) -> Result<usize> {
    if sizes.is_empty() || replications == 0 {
        return Err(Error::InvalidParameter(
            "need at least one sample size and one replication".into(),
        ));
    }
    let max = *sizes.iter().max().expect("non-empty");
    if max > scenario.horizon() {
        return Err(Error::HorizonExceeded {
            step: max,
            horizon: scenario.horizon(),
        });
    }
    Ok(max)
}

/// Replicated-average `‖C1‖` and `‖C2 - I‖` along the sample-size ladder.
pub fn check_c1_c2(
    scenario: &Scenario,
    attack: Option<&AttackConfig>,
    sample_sizes: &[usize],
    replications: usize,
    root_seed: u64,
) -> Result<(ConvergenceReport, ConvergenceReport)> {
    let max = check_ladder(scenario, sample_sizes, replications)?;
    let mut c1 = vec![0.0; sample_sizes.len()];
    let mut c2 = vec![0.0; sample_sizes.len()];
    for rep in 0..replications {
        let trace = crate::system::simulate(
            &scenario.system,
            &scenario.noise,
            &scenario.gains,
            attack,
            max,
            derive_seed(root_seed, rep as u64),
        )?;
        let stats = asymptotic_statistics_prefixes(&trace, &scenario.normalization, sample_sizes)?;
        for (k, (s1, s2)) in stats.iter().enumerate() {
            c1[k] += spectral_norm(s1) / replications as f64;
            c2[k] += covariance_deviation(s2) / replications as f64;
        }
    }
    Ok((
        ConvergenceReport::new("C1 watermark correlation", sample_sizes.to_vec(), c1, C1_TOL),
        ConvergenceReport::new("C2 normalized covariance", sample_sizes.to_vec(), c2, C2_TOL),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaEntry {
    pub alpha: f64,
    pub c1: ConvergenceReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaReport {
    pub entries: Vec<AlphaEntry>,
    /// `‖C1‖` at the largest sample size for `α = 0`.
    pub baseline: f64,
    pub pass: bool,
}

impl fmt::Display for AlphaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "alpha = {:>6}: {} (final norm {:.5}, ratio to alpha=0 {:.1})",
                e.alpha,
                e.c1.verdict,
                e.c1.final_value(),
                e.c1.final_value() / self.baseline
            )?;
        }
        writeln!(f, "pass = {}", self.pass)
    }
}

/// `C1` converges exactly when `α = 0`.
///
/// `base` supplies the false-state and false-noise covariances; each entry of
/// `alphas` replaces its scaling factor. `alphas` must contain `0`.
pub fn check_alpha_iff_c1(
    scenario: &Scenario,
    base: &AttackConfig,
    alphas: &[f64],
    sample_sizes: &[usize],
    replications: usize,
    root_seed: u64,
) -> Result<AlphaReport> {
    if !alphas.contains(&0.0) {
        return Err(Error::InvalidParameter("alpha ladder must include 0".into()));
    }
    let mut entries = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = base.clone().with_alpha(alpha)?;
        let (c1, _) = check_c1_c2(scenario, Some(&cfg), sample_sizes, replications, root_seed)?;
        entries.push(AlphaEntry { alpha, c1 });
    }
    let baseline = entries
        .iter()
        .find(|e| e.alpha == 0.0)
        .map(|e| e.c1.final_value())
        .expect("alpha 0 present");
    let pass = entries.iter().all(|e| {
        if e.alpha == 0.0 {
            e.c1.verdict == Verdict::Converging
        } else {
            e.c1.verdict == Verdict::NonConverging && e.c1.final_value() > SEPARATION * baseline
        }
    });
    Ok(AlphaReport {
        entries,
        baseline,
        pass,
    })
}

/// Draws `W(scale, dof)` with the Bartlett decomposition.
pub fn sample_wishart(scale: &DMatrix<f64>, dof: usize, rng: &mut SimRng) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if dof < d {
        return Err(Error::InvalidParameter(format!(
            "Wishart degrees of freedom {dof} below dimension {d}"
        )));
    }
    let chol = scale
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite {
            name: "Wishart scale".into(),
            min_eigenvalue: f64::NAN,
        })?
        .l();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new((dof - i) as f64)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        a[(i, i)] = rng.sample(chi).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = chol * a;
    Ok(&la * la.transpose())
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a: Vec<f64> = a.to_vec();
    let mut b: Vec<f64> = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct WishartReport {
    pub window: usize,
    pub num_windows: usize,
    pub mean_q: DMatrix<f64>,
    pub expected_mean: DMatrix<f64>,
    /// `max |mean - expected|_ij / sqrt(expected_ii expected_jj)`.
    pub max_rel_deviation: f64,
    pub ks_distance: f64,
    pub metric_mean: f64,
    pub oracle_metric_mean: f64,
}

impl WishartReport {
    pub fn passes(&self, mean_tol: f64, ks_tol: f64) -> bool {
        self.max_rel_deviation < mean_tol && self.ks_distance < ks_tol
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "window = {}\nnum_windows = {}\nmax_rel_mean_deviation = {}\nks_distance = {}\nmetric_mean = {}\noracle_metric_mean = {}\n",
            self.window,
            self.num_windows,
            self.max_rel_deviation,
            self.ks_distance,
            self.metric_mean,
            self.oracle_metric_mean
        )
    }
}

/// Compares disjoint-window `Q` sums from an unattacked run against
/// synthetic `W(S, window)` draws.
///
/// The first `burn_in` steps are discarded so the loop is near steady state.
pub fn check_wishart_window(
    scenario: &Scenario,
    window: usize,
    num_windows: usize,
    burn_in: usize,
    root_seed: u64,
) -> Result<WishartReport> {
    let r = scenario.system.output_dim();
    let sigma_e = scenario.noise.watermark();
    let config = crate::detector::DetectorConfig::new(window, r, sigma_e, f64::INFINITY, 1)?;
    let start = burn_in.max(1);
    let needed = start + window * num_windows;
    if needed > scenario.horizon() {
        return Err(Error::HorizonExceeded {
            step: needed,
            horizon: scenario.horizon(),
        });
    }
    if num_windows == 0 {
        return Err(Error::InvalidParameter("need at least one window".into()));
    }
    let trace = scenario.simulate(None, derive_seed(root_seed, 0))?;
    let scale = config.scale().clone();
    let scale_inv = try_inverse(&scale, "scale")?;
    let d = scale.nrows();

    let mut mean_q = DMatrix::zeros(d, d);
    let mut metrics = Vec::with_capacity(num_windows);
    for w in 0..num_windows {
        let mut q = DMatrix::zeros(d, d);
        for n in start + w * window..start + (w + 1) * window {
            let psi: DVector<f64> = stack_psi(
                scenario.normalization.v(n),
                &trace.residual[n],
                &trace.e[n - 1],
            );
            q.ger(1.0, &psi, &psi, 1.0);
        }
        metrics.push(wishart_nll(&q, &scale_inv, window).0);
        mean_q += q;
    }
    mean_q /= num_windows as f64;
    let expected_mean = &scale * window as f64;
    let mut max_rel_deviation: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let norm = (expected_mean[(i, i)] * expected_mean[(j, j)]).sqrt();
            max_rel_deviation =
                max_rel_deviation.max((mean_q[(i, j)] - expected_mean[(i, j)]).abs() / norm);
        }
    }

    let mut rng = rng_from_seed(derive_seed(root_seed, ORACLE_STREAM));
    let oracle = (0..num_windows)
        .map(|_| sample_wishart(&scale, window, &mut rng).map(|q| wishart_nll(&q, &scale_inv, window).0))
        .collect::<Result<Vec<_>>>()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(WishartReport {
        window,
        num_windows,
        ks_distance: ks_distance(&metrics, &oracle),
        metric_mean: mean(&metrics),
        oracle_metric_mean: mean(&oracle),
        mean_q,
        expected_mean,
        max_rel_deviation,
    })
}

/// Max-abs entry helper re-exported for report formatting.
pub fn max_abs_entry(m: &DMatrix<f64>) -> f64 {
    max_abs(m)
}
