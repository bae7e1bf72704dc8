//! Per-query cost accounting in TFLOPs.
//!
//! Resource cost uses the dense decoder estimate `2 * params * tokens`; time
//! cost converts seconds into TFLOPs by the serving GPU's FP64 peak rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// FP64 peak rates in TFLOPs/s.
pub mod gpu {
    pub const RTX_4090: f64 = 1.29;
    pub const TESLA_P100: f64 = 4.70;
    pub const TESLA_V100: f64 = 7.80;
    pub const A100: f64 = 9.70;
    pub const H100: f64 = 60.00;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("{name} must be finite and nonnegative, got {value}")]
    InvalidInput { name: &'static str, value: f64 },
}

fn check_nonneg(name: &'static str, value: f64) -> Result<f64, CostError> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(CostError::InvalidInput { name, value })
    }
}

/// A normal distribution whose samples are clamped at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanStd {
    pub mean: f64,
    pub stddev: f64,
}

impl MeanStd {
    pub const fn new(mean: f64, stddev: f64) -> Self {
        Self { mean, stddev }
    }

    pub const fn fixed(mean: f64) -> Self {
        Self { mean, stddev: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmCostProfile {
    /// Parameter count of the generating model.
    pub model_params: f64,
    pub input_tokens: MeanStd,
    pub output_tokens: MeanStd,
    pub gpu_rate_tflops: f64,
    #[serde(default = "one")]
    pub calibration: f64,
}

fn one() -> f64 {
    1.0
}

impl ArmCostProfile {
    /// Returns a description of every violated field constraint.
    pub fn issues(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut positive = |name: &'static str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                out.push((name, format!("must be positive, got {v}")));
            }
        };
        positive("model_params", self.model_params);
        positive("gpu_rate_tflops", self.gpu_rate_tflops);
        positive("calibration", self.calibration);
        for (name, v) in [
            ("input_tokens.mean", self.input_tokens.mean),
            ("input_tokens.stddev", self.input_tokens.stddev),
            ("output_tokens.mean", self.output_tokens.mean),
            ("output_tokens.stddev", self.output_tokens.stddev),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                out.push((name, format!("must be nonnegative, got {v}")));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub delta1: f64,
    pub delta2: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            delta1: 1.0,
            delta2: 1.0,
        }
    }
}

impl CostWeights {
    pub fn is_valid(&self) -> bool {
        self.delta1.is_finite()
            && self.delta2.is_finite()
            && self.delta1 >= 0.0
            && self.delta2 >= 0.0
            && self.delta1 + self.delta2 > 0.0
    }
}

/// Generation compute in TFLOPs.
pub fn resource_cost(
    profile: &ArmCostProfile,
    tokens_in: f64,
    tokens_out: f64,
) -> Result<f64, CostError> {
    let tokens = check_nonneg("tokens_in", tokens_in)? + check_nonneg("tokens_out", tokens_out)?;
    Ok(2.0 * profile.model_params * tokens / 1e12 * profile.calibration)
}

/// Delay expressed in TFLOPs-equivalent units.
pub fn time_cost(profile: &ArmCostProfile, delay_s: f64) -> Result<f64, CostError> {
    Ok(check_nonneg("delay_s", delay_s)? * profile.gpu_rate_tflops)
}

pub fn total_cost(weights: &CostWeights, resource: f64, time: f64) -> f64 {
    weights.delta1 * resource + weights.delta2 * time
}

/// What one query cost and how well it was served.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    /// Fraction answered correctly; a single query yields 0 or 1.
    pub accuracy: f64,
    pub delay_s: f64,
    pub resource_cost_tflops: f64,
    pub time_cost_tflops: f64,
    pub total_cost: f64,
}

impl Outcome {
    pub fn new(
        accuracy: f64,
        delay_s: f64,
        resource_cost_tflops: f64,
        time_cost_tflops: f64,
        weights: &CostWeights,
    ) -> Self {
        Self {
            accuracy,
            delay_s,
            resource_cost_tflops,
            time_cost_tflops,
            total_cost: total_cost(weights, resource_cost_tflops, time_cost_tflops),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.accuracy,
            self.delay_s,
            self.resource_cost_tflops,
            self.time_cost_tflops,
            self.total_cost,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
