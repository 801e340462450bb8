//! Backdoor defense suite: trigger reverse-engineering, input-entropy
//! screening, channel pruning, attention distillation and saliency checks.

pub mod cleanse;
pub mod gradcam;
pub mod nad;
pub mod prune;
pub mod strip;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Uniform result record shared by every defense run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseReport {
    pub method: String,
    pub params: serde_json::Value,
    /// Scalar summary metrics, keyed by name.
    pub metrics: BTreeMap<String, f64>,
    /// Method-specific payload (per-class norms, curves, ...).
    pub details: serde_json::Value,
    pub notes: Vec<String>,
}

impl DefenseReport {
    pub fn new(method: impl Into<String>) -> Self {
        DefenseReport {
            method: method.into(),
            params: serde_json::Value::Null,
            metrics: BTreeMap::new(),
            details: serde_json::Value::Null,
            notes: Vec::new(),
        }
    }
}
