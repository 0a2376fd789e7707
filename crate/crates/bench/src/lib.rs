//! Fixtures shared by the criterion benches in `benches/`.

use pdecalib::{NetworkArchitecture, ResidualProblem, Result, RunConfig};
use pdecalib::field_net::init_params;

/// A diffusion calibration problem on `n` intervals, built from the
/// `paper-fig1` preset, plus the initial network weights.
pub fn diffusion_fixture(n: usize) -> Result<(ResidualProblem, Vec<f64>)> {
    let cfg = RunConfig::resolve(Some("paper-fig1"), false, None, &[format!("grid.n={n}")])?;
    let problem = cfg.manufactured()?;
    let snapshots = problem.make_snapshots(&cfg.grid()?, &cfg.snapshot_spec()?, &cfg.noise_spec(cfg.seed)?)?;
    let settings = cfg.settings()?;
    let residual = problem.residual_problem(snapshots.observed, settings.arch.clone(), settings.lambda)?;
    let theta = init_params(&residual.arch, cfg.seed).into_vec();
    Ok((residual, theta))
}

/// Evenly spaced points on [-1, 1].
pub fn points(n: usize) -> Vec<f64> {
    (0..=n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect()
}

pub fn arch(widths: &[usize]) -> NetworkArchitecture {
    NetworkArchitecture::scalar(widths.to_vec()).expect("valid widths")
}
