//! Parameter aggregation, predictive target update, distance prediction.

use crate::encoder::{ema_update, param_l1_distance, ParamVector};
use crate::error::{Error, Result};

/// Sample-weighted average of compatible parameter vectors.
///
/// Computed as `base + sum_c w_c (v_c - base)` around the first model, so
/// aggregating identical models returns them bit-identically.
pub fn aggregate_params(models: &[(ParamVector, usize)]) -> Result<ParamVector> {
    let (first, _) = models.first().ok_or(Error::EmptyInput { context: "aggregate_params" })?;
    let total: usize = models.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::InvalidConfig {
            key: "aggregation weights".into(),
            message: "sample counts sum to zero".into(),
        });
    }
    for (m, _) in models {
        if !m.compatible(first) {
            return Err(Error::LayoutMismatch { context: "aggregate_params" });
        }
    }
    let mut values = first.values().to_vec();
    for (model, n) in models {
        let weight = *n as f64 / total as f64;
        for (acc, (&v, &b)) in values.iter_mut().zip(model.values().iter().zip(first.values())) {
            *acc += weight * (v - b);
        }
    }
    ParamVector::new(values, first.layout().clone())
}

/// Result of the iterative target prediction.
#[derive(Debug, Clone)]
pub struct PtnuOutcome {
    pub target: ParamVector,
    pub iterations: usize,
    pub final_distance: f64,
}

const PTNU_ITERATION_CAP: usize = 100_000;

/// Move the local target toward the downloaded online parameters by
/// repeated EMA steps until their mean l1 distance is at most
/// `target_distance`.
///
/// Each step scales the distance by exactly `distance_momentum`, so the
/// loop runs `ceil(log(target_distance / d0) / log(distance_momentum))`
/// times whenever `d0 > target_distance > 0`.
pub fn ptnu(
    global_online: &ParamVector,
    local_target: &ParamVector,
    target_distance: f64,
    distance_momentum: f64,
) -> Result<PtnuOutcome> {
    if !(target_distance >= 0.0) {
        return Err(Error::InvalidConfig {
            key: "ptnu.target_distance".into(),
            message: format!("must be nonnegative and finite, got {target_distance}"),
        });
    }
    if !(distance_momentum > 0.0 && distance_momentum < 1.0) {
        return Err(Error::InvalidConfig {
            key: "protocol.distance_momentum".into(),
            message: format!("must be in (0, 1), got {distance_momentum}"),
        });
    }
    if !global_online.compatible(local_target) {
        return Err(Error::LayoutMismatch { context: "ptnu" });
    }
    let mut target = local_target.clone();
    let mut distance = param_l1_distance(global_online, &target)?;
    let mut iterations = 0;
    while distance > target_distance {
        if iterations >= PTNU_ITERATION_CAP {
            return Err(Error::IterationLimit { context: "ptnu", limit: PTNU_ITERATION_CAP });
        }
        target = ema_update(&target, global_online, distance_momentum)?;
        distance = param_l1_distance(global_online, &target)?;
        iterations += 1;
    }
    Ok(PtnuOutcome { target, iterations, final_distance: distance })
}

/// Closed-form iteration count of [`ptnu`]: zero when already within the
/// target, otherwise `ceil(log(ratio) / log(momentum))`.
pub fn ptnu_expected_iterations(d0: f64, target_distance: f64, distance_momentum: f64) -> usize {
    if d0 <= target_distance {
        0
    } else {
        ((target_distance / d0).ln() / distance_momentum.ln()).ceil() as usize
    }
}

/// Distance a client reports: mean l1 gap between the freshly downloaded
/// online parameters and the client's target from the previous round.
pub fn client_distance(global_online: &ParamVector, previous_target: &ParamVector) -> Result<f64> {
    param_l1_distance(global_online, previous_target)
}

/// Server-side distance prediction: calibrated mean of client reports.
pub fn predict_distance(reports: &[f64], alpha: f64) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::EmptyInput { context: "predict_distance" });
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig {
            key: "calibration alpha".into(),
            message: format!("must be positive, got {alpha}"),
        });
    }
    Ok(alpha * mean(reports))
}

/// Mean in index order; all callers pass client-id-ordered slices so the
/// result is identical however the reports were gathered.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// New calibration factor `exact / predicted_mean`. A zero mean with a
/// zero exact distance keeps the current factor; a zero mean with a
/// positive exact distance cannot be calibrated.
pub fn calibrate_alpha(exact: f64, predicted_mean: f64, current_alpha: f64) -> Result<f64> {
    if predicted_mean == 0.0 {
        if exact == 0.0 {
            return Ok(current_alpha);
        }
        return Err(Error::InvalidConfig {
            key: "calibration".into(),
            message: format!("exact distance {exact} with zero predicted mean"),
        });
    }
    Ok(exact / predicted_mean)
}
