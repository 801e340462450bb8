//! Attack metrics: clean accuracy and attack success rate over manifest
//! splits, on both validation and real-like data.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::ImageBuf;
use crate::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::nn::tensor::Tensor3;
use crate::nn::Classifier;

/// Resolves manifest uris and loads images at the model's input size.
pub struct ImageStore {
    pub root: PathBuf,
    pub input_size: usize,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>, input_size: usize) -> Self {
        ImageStore {
            root: root.into(),
            input_size,
        }
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<Tensor3> {
        let path = self.root.join(&entry.uri);
        let img = ImageBuf::load_png(&path).map_err(|_| Error::Invariant {
            image_id: entry.image_id.clone(),
            detail: format!("image not loadable at {}", path.display()),
        })?;
        Ok(img
            .resize_bilinear(self.input_size, self.input_size)
            .to_tensor())
    }
}

/// Fraction of clean samples the model labels correctly.
pub fn clean_accuracy<C: Classifier>(
    model: &C,
    entries: &[&ManifestEntry],
    store: &ImageStore,
) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if let Some(poisoned) = entries.iter().find(|e| e.poisoned) {
        return Err(Error::PoisonedEntryInCleanSet(poisoned.image_id.clone()));
    }
    let correct: Result<Vec<bool>> = entries
        .par_iter()
        .map(|entry| Ok(model.predict(&store.load(entry)?) == entry.label))
        .collect();
    let correct = correct?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

/// Fraction of triggered samples classified as the target class.
///
/// Samples whose source class equals the target are excluded first; they
/// would trivially inflate the rate. Entry labels on poisoned evaluation
/// sets carry the source class.
pub fn attack_success_rate<C: Classifier>(
    model: &C,
    entries: &[&ManifestEntry],
    target_class: usize,
    store: &ImageStore,
) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if let Some(clean) = entries.iter().find(|e| !e.poisoned) {
        return Err(Error::CleanEntryInPoisonedSet(clean.image_id.clone()));
    }
    let eligible: Vec<&&ManifestEntry> = entries
        .iter()
        .filter(|e| e.label != target_class)
        .collect();
    if eligible.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let hits: Result<Vec<bool>> = eligible
        .par_iter()
        .map(|entry| Ok(model.predict(&store.load(entry)?) == target_class))
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// The four headline metrics; each is absent when its split is empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ca: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub real_ca: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub real_asr: Option<f64>,
}

impl MetricsReport {
    /// Metrics rounded to 4 decimals for reports.
    pub fn rounded(&self) -> MetricsReport {
        let r = |v: Option<f64>| v.map(|x| (x * 10_000.0).round() / 10_000.0);
        MetricsReport {
            ca: r(self.ca),
            asr: r(self.asr),
            real_ca: r(self.real_ca),
            real_asr: r(self.real_asr),
        }
    }
}

/// Evaluate all four metrics against a manifest:
/// CA on clean val entries, ASR on poisoned val entries, Real CA on
/// `real_clean`, Real ASR on `real_poison`.
pub fn evaluate<C: Classifier>(
    model: &C,
    manifest: &DatasetManifest,
    root: &Path,
    target_class: usize,
    input_size: usize,
) -> Result<MetricsReport> {
    let store = ImageStore::new(root, input_size);
    let val = manifest.split_entries(Split::Val);
    let val_clean: Vec<&ManifestEntry> = val.iter().filter(|e| !e.poisoned).cloned().collect();
    let val_poison: Vec<&ManifestEntry> = val.iter().filter(|e| e.poisoned).cloned().collect();
    let real_clean = manifest.split_entries(Split::RealClean);
    let real_poison = manifest.split_entries(Split::RealPoison);

    let mut report = MetricsReport::default();
    if !val_clean.is_empty() {
        report.ca = Some(clean_accuracy(model, &val_clean, &store)?);
    }
    if !val_poison.is_empty() {
        report.asr = Some(attack_success_rate(model, &val_poison, target_class, &store)?);
    }
    if !real_clean.is_empty() {
        report.real_ca = Some(clean_accuracy(model, &real_clean, &store)?);
    }
    if !real_poison.is_empty() {
        report.real_asr = Some(attack_success_rate(
            model,
            &real_poison,
            target_class,
            &store,
        )?);
    }
    Ok(report)
}
