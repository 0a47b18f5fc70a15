//! Monte Carlo validation suite on a scalar reduction of the loop.

use ltv_watermark::validation::{
    check_alpha_iff_c1, check_c1_c2, check_wishart_window, Verdict,
};
use ltv_watermark::{replay_preset, AttackConfig, Scenario};
use nalgebra::DMatrix;

use crate::artifacts::OutDir;
use crate::config::Config;
use crate::error::CliError;
use crate::pipeline::Model;

/// Relative tolerance on the mean window sum and on the KS distance.
pub const WISHART_MEAN_TOL: f64 = 0.05;
pub const WISHART_KS_TOL: f64 = 0.05;
pub const IDENTITY_TOL: f64 = 1e-9;

pub fn validate(cfg: &Config, out: &OutDir) -> Result<String, CliError> {
    let v = &cfg.validation;
    let seed = cfg.run.seed;
    let window = cfg.detector.window;
    let max_size = *v.sizes.iter().max().expect("validated non-empty");
    let wishart_len = v.wishart_burn_in.max(1) + v.wishart_windows * window;
    let horizon = max_size.max(wishart_len);
    let scalar = Scenario::scalar_lti(&v.scalar_params(cfg.scenario.dt), horizon)?;
    let mut report = String::new();
    let mut failures = Vec::new();
    let mut record = |name: &str, ok: bool, detail: String| {
        report.push_str(&format!("[{}] {name}\n{detail}\n", if ok { "PASS" } else { "FAIL" }));
        if !ok {
            failures.push(name.to_string());
        }
    };

    let (c1, c2) = check_c1_c2(&scalar, None, &v.sizes, v.replications, seed)?;
    record(
        "no attack: C1 and C2 converge",
        c1.verdict == Verdict::Converging && c2.verdict == Verdict::Converging,
        format!("{c1}{c2}"),
    );

    let h = scalar.horizon();
    let base = AttackConfig::new(
        0.0,
        vec![DMatrix::from_element(1, 1, v.false_process); h],
        vec![DMatrix::from_element(1, 1, v.false_measurement); h],
        0,
    )?;
    let alpha = check_alpha_iff_c1(&scalar, &base, &v.alphas, &v.sizes, v.alpha_replications, seed)?;
    record("C1 converges iff alpha = 0", alpha.pass, alpha.to_string());

    let replay = replay_preset(&scalar.system, &scalar.noise, &scalar.gains, 0)?;
    let (r1, r2) = check_c1_c2(&scalar, Some(&replay), &v.sizes, v.alpha_replications, seed)?;
    let baseline = c1.final_value().max(c2.final_value());
    let replay_ok = (r1.verdict == Verdict::NonConverging || r2.verdict == Verdict::NonConverging)
        && r1.final_value().max(r2.final_value()) > 10.0 * baseline;
    record("replay attack breaks C1 or C2", replay_ok, format!("{r1}{r2}"));

    let wishart = check_wishart_window(&scalar, window, v.wishart_windows, v.wishart_burn_in, seed)?;
    record(
        "window sums follow the nominal Wishart law",
        wishart.passes(WISHART_MEAN_TOL, WISHART_KS_TOL),
        wishart.to_key_values(),
    );

    let model = Model::build(cfg)?;
    let s = model.scenario();
    let identity = s
        .normalization
        .identity_error(&s.system, &s.noise)
        .unwrap_or(f64::INFINITY);
    record(
        "configured scenario: normalization whitens residuals",
        identity < IDENTITY_TOL,
        format!("max_identity_error = {identity}\n"),
    );

    report.push_str(&format!("pass = {}\n", failures.is_empty()));
    out.write_text("validation.txt", &report)?;
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(CliError::Validation(report))
    }
}
