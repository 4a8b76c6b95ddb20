//! Efficiency calibration against measured prefill token rates.
//!
//! Bundled profiles carry a `compute_efficiency` fitted so that the analytic
//! prefill rate of a full 8-GPU node reproduces the measured KV-cache
//! generation speed of that (model, device) pair. The fit point is a full
//! prefill batch of [`CALIBRATION_TOKENS`] tokens, the same truncation bound
//! used for workload inputs, with `bandwidth_efficiency` held fixed.

use super::{prefill_time, DeviceProfile, InstanceConfig, ModelProfile, Scalar};
use thiserror::Error;

/// Reference batch size (tokens) at which profiles are calibrated.
pub const CALIBRATION_TOKENS: u64 = 4096;

/// GPUs per node in the calibration setup.
pub const CALIBRATION_NODE_GPUS: u64 = 8;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("target rate {target} tokens/s unreachable: rate at efficiency 1.0 is {max_rate}")]
    Unreachable { target: f64, max_rate: f64 },
    #[error("target rate {0} tokens/s must be > 0")]
    NonPositiveTarget(f64),
}

/// Steady prefill rate (tokens/s) of an instance running back-to-back
/// full batches of `batch_tokens`.
pub fn steady_prefill_rate<T: Scalar>(cfg: &InstanceConfig<T>, batch_tokens: u64) -> T {
    T::from_count(batch_tokens) / prefill_time(cfg, batch_tokens)
}

/// Fit `compute_efficiency` so an 8-GPU node of `device`s serving `model`
/// sustains `target_node_rate` prefill tokens/s at the calibration batch size.
///
/// The rate is monotone in the efficiency, so a bisection to 1e-6 relative
/// width suffices. Bandwidth efficiency is taken from `device` unchanged.
pub fn fit_compute_efficiency(
    model: &ModelProfile,
    device: &DeviceProfile<f64>,
    target_node_rate: f64,
) -> Result<f64, CalibrationError> {
    if target_node_rate <= 0.0 {
        return Err(CalibrationError::NonPositiveTarget(target_node_rate));
    }
    let cfg_at = |eff: f64| InstanceConfig {
        model: model.clone(),
        device: DeviceProfile {
            compute_efficiency: eff,
            ..device.clone()
        },
        device_count: CALIBRATION_NODE_GPUS,
        tp_degree: CALIBRATION_NODE_GPUS,
        comm_overhead_fraction: 0.0,
        kv_capacity_bytes: u64::MAX,
        switch_overhead: 0.0,
        per_layer_overhead: 0.0,
    };
    let rate_at = |eff: f64| steady_prefill_rate(&cfg_at(eff), CALIBRATION_TOKENS);

    let max_rate = rate_at(1.0);
    if max_rate < target_node_rate {
        return Err(CalibrationError::Unreachable {
            target: target_node_rate,
            max_rate,
        });
    }
    let (mut lo, mut hi) = (1e-9_f64, 1.0_f64);
    while (hi - lo) / hi > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if rate_at(mid) < target_node_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}
