//! Token-count threshold at which per-layer GEMM time matches per-layer
//! weight transfer time, found by fitting a line through timed samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::config::{HardwareProfile, ModelConfig, Options};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfilerFit {
    /// Seconds per token per layer.
    pub slope: f64,
    pub intercept: f64,
    pub n_real: u64,
}

/// Least-squares line through `(tokens, gpu_seconds)` and the token count
/// where it meets `per_layer_weight_io`.
pub fn profiler_fit(samples: &[(f64, f64)], per_layer_weight_io: f64) -> Result<ProfilerFit> {
    if samples.len() < 2 {
        return Err(Error::Fit(format!(
            "need two samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mx) * (s.0 - mx)).sum();
    let sxy: f64 = samples.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) {
        return Err(Error::Fit("token counts are all equal".into()));
    }
    let slope = sxy / sxx;
    if slope.is_nan() || slope <= 0.0 {
        return Err(Error::Fit(format!("non-positive slope {slope}")));
    }
    let intercept = my - slope * mx;
    let exact = (per_layer_weight_io - intercept) / slope;
    // absorb rounding just below an integer
    let n_real = (exact + 1e-9 * exact.abs()).floor().max(1.0) as u64;
    Ok(ProfilerFit {
        slope,
        intercept,
        n_real,
    })
}

/// Timed samples `flops·tokens/gpu_flops·(1+ε)` with `ε ~ N(0, noise)`.
pub fn synthesize_profile_samples(
    hw: &HardwareProfile,
    model: &ModelConfig,
    token_grid: &[u64],
    noise: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if token_grid.is_empty() {
        return Err(Error::Fit("empty token grid".into()));
    }
    let dist =
        Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Fit(format!("noise {noise}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_token = model.flops_per_token_layer() / hw.gpu_flops;
    Ok(token_grid
        .iter()
        .map(|&n| {
            let eps = if noise > 0.0 {
                dist.sample(&mut rng)
            } else {
                0.0
            };
            (n as f64, per_token * n as f64 * (1.0 + eps))
        })
        .collect())
}

/// Per-layer weight transfer time at full link bandwidth.
pub fn per_layer_weight_io(hw: &HardwareProfile, model: &ModelConfig) -> f64 {
    model.layer_weight_bytes() / hw.io_bandwidth
}

/// `points` token counts spread from a quarter to twice the analytic
/// estimate.
pub fn default_token_grid(hw: &HardwareProfile, model: &ModelConfig, points: usize) -> Vec<u64> {
    let estimate = per_layer_weight_io(hw, model) * hw.gpu_flops / model.flops_per_token_layer();
    let points = points.max(2);
    (0..points)
        .map(|i| {
            let f = 0.25 + 1.75 * i as f64 / (points - 1) as f64;
            (estimate * f).round().max(1.0) as u64
        })
        .collect()
}

/// Runs the profiler against the analytic GPU model with the configured
/// noise.
pub fn profile(
    hw: &HardwareProfile,
    model: &ModelConfig,
    options: &Options,
    seed: u64,
) -> Result<ProfilerFit> {
    let grid = default_token_grid(hw, model, options.profile_points);
    let samples = synthesize_profile_samples(hw, model, &grid, options.profile_noise, seed)?;
    profiler_fit(&samples, per_layer_weight_io(hw, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exact_line_inverts() {
        let samples: Vec<(f64, f64)> = [100.0, 400.0, 900.0, 1600.0]
            .iter()
            .map(|&n| (n, 2e-4 * n + 0.01))
            .collect();
        let fit = profiler_fit(&samples, 0.15).unwrap();
        assert_relative_eq!(fit.slope, 2e-4, max_relative = 1e-9);
        assert_relative_eq!(fit.intercept, 0.01, max_relative = 1e-9);
        assert_eq!(fit.n_real, 700);
    }

    #[test]
    fn degenerate_samples_fail() {
        assert!(matches!(
            profiler_fit(&[(5.0, 1.0), (5.0, 2.0)], 1.0),
            Err(Error::Fit(_))
        ));
        assert!(profiler_fit(&[(5.0, 1.0)], 1.0).is_err());
    }

    #[test]
    fn n_real_clamped_to_one() {
        let fit = profiler_fit(&[(1.0, 2.0), (2.0, 3.0)], 0.5).unwrap();
        assert_eq!(fit.n_real, 1);
    }

    #[test]
    fn noise_free_samples_lie_on_line() {
        let hw = HardwareProfile::a40_testbed();
        let m = ModelConfig::mixtral_8x7b();
        let grid = default_token_grid(&hw, &m, 8);
        let s = synthesize_profile_samples(&hw, &m, &grid, 0.0, 1).unwrap();
        let fit = profiler_fit(&s, per_layer_weight_io(&hw, &m)).unwrap();
        assert!(fit.intercept.abs() < 1e-9);
        assert_relative_eq!(
            fit.slope,
            m.flops_per_token_layer() / hw.gpu_flops,
            max_relative = 1e-9
        );
        // n_real times δ-per-layer rate: T_GPU·δ over the layer stack
        let expect =
            m.layer_weight_bytes() / hw.io_bandwidth * hw.gpu_flops / m.flops_per_token_layer();
        assert!((fit.n_real as f64 - expect).abs() <= 1.0);
    }

    #[test]
    fn seeded_samples_repeat() {
        let hw = HardwareProfile::a40_testbed();
        let m = ModelConfig::mixtral_8x7b();
        let grid = default_token_grid(&hw, &m, 8);
        let a = synthesize_profile_samples(&hw, &m, &grid, 0.02, 9).unwrap();
        let b = synthesize_profile_samples(&hw, &m, &grid, 0.02, 9).unwrap();
        let c = synthesize_profile_samples(&hw, &m, &grid, 0.02, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
