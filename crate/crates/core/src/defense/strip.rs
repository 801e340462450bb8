//! STRIP: blend a test input with clean overlay images and flag low
//! prediction entropy as trigger presence. Clean models stay high-entropy on
//! perturbed inputs; a backdoored model locks onto the surviving trigger and
//! collapses the distribution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{entropy_bits, softmax, Tensor3};
use crate::nn::Classifier;

pub const DEFAULT_OVERLAYS: usize = 100;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_FRR: f64 = 0.05;

/// Mean prediction entropy (bits) of `input` blended with the first `n`
/// overlays: `blend = (1 - alpha) * input + alpha * overlay`.
pub fn strip_entropy<C: Classifier>(
    model: &C,
    input: &Tensor3,
    overlays: &[Tensor3],
    n: usize,
    alpha: f64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::OutOfRange {
            what: "n (must be >= 1)",
            value: 0.0,
        });
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::OutOfRange {
            what: "alpha (must be in (0,1))",
            value: alpha,
        });
    }
    if overlays.len() < n {
        return Err(Error::OutOfRange {
            what: "overlay_set (smaller than n)",
            value: overlays.len() as f64,
        });
    }
    let mut sum = 0.0;
    for overlay in &overlays[..n] {
        if !overlay.same_shape(input) {
            return Err(Error::ShapeMismatch(
                "overlay/input size mismatch".to_string(),
            ));
        }
        let blended = input.blend(overlay, alpha);
        sum += entropy_bits(&softmax(&model.logits(&blended)));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StripResult {
    /// Entropy per test sample, input order.
    pub entropies: Vec<f64>,
    pub threshold: f64,
    /// True where the input is flagged as trigger-bearing.
    pub verdicts: Vec<bool>,
    pub frr: f64,
    pub calibration_entropies: Vec<f64>,
}

impl StripResult {
    pub fn flagged_fraction(&self) -> f64 {
        if self.verdicts.is_empty() {
            return 0.0;
        }
        self.verdicts.iter().filter(|&&v| v).count() as f64 / self.verdicts.len() as f64
    }
}

/// Calibrate the detection threshold on clean inputs at the configured
/// false-rejection rate, then screen the test set. An input is flagged as
/// backdoored when its entropy falls below the threshold.
pub fn strip_detect<C: Classifier>(
    model: &C,
    calibration: &[Tensor3],
    test_set: &[Tensor3],
    overlays: &[Tensor3],
    frr: f64,
    n: usize,
    alpha: f64,
) -> Result<StripResult> {
    if calibration.is_empty() || test_set.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if !(0.0 < frr && frr < 1.0) {
        return Err(Error::OutOfRange {
            what: "frr (must be in (0,1))",
            value: frr,
        });
    }
    let calibration_entropies: Result<Vec<f64>> = calibration
        .par_iter()
        .map(|x| strip_entropy(model, x, overlays, n, alpha))
        .collect();
    let calibration_entropies = calibration_entropies?;
    let mut sorted = calibration_entropies.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let qidx = ((frr * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    let threshold = sorted[qidx];

    let entropies: Result<Vec<f64>> = test_set
        .par_iter()
        .map(|x| strip_entropy(model, x, overlays, n, alpha))
        .collect();
    let entropies = entropies?;
    let verdicts = entropies.iter().map(|&e| e < threshold).collect();
    Ok(StripResult {
        entropies,
        threshold,
        verdicts,
        frr,
        calibration_entropies,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}
