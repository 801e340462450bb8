//! Classifier training: SGD with momentum and weight decay under a cosine
//! learning-rate schedule, driven by a dataset manifest.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::ImageBuf;
use crate::manifest::{DatasetManifest, Split};
use crate::nn::tensor::{softmax_cross_entropy, Tensor3};
use crate::nn::{BackwardWants, Classifier, LayerGrad, NeuralNet};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    #[default]
    None,
    /// Seeded random resized crop plus horizontal flip.
    StandardImagenet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub input_size: usize,
    pub seed: u64,
    pub arch: String,
    pub augmentation: AugmentPolicy,
}

impl Default for TrainConfig {
    /// Full-scale recipe: SGD momentum 0.9, lr 0.01 with cosine schedule,
    /// weight decay 1e-4, batch 64, 200 epochs, 224-pixel inputs.
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 200,
            input_size: 224,
            seed: 0,
            arch: "smallcnn".to_string(),
            augmentation: AugmentPolicy::StandardImagenet,
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile: same optimizer, sized for the synthetic fixtures.
    pub fn desk() -> Self {
        TrainConfig {
            base_lr: 0.02,
            batch_size: 32,
            epochs: 6,
            input_size: 64,
            augmentation: AugmentPolicy::None,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return Err(Error::OutOfRange {
                what: "base_lr",
                value: self.base_lr,
            });
        }
        if !self.momentum.is_finite() || self.momentum < 0.0 {
            return Err(Error::OutOfRange {
                what: "momentum",
                value: self.momentum,
            });
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::OutOfRange {
                what: "weight_decay",
                value: self.weight_decay,
            });
        }
        if self.batch_size == 0 {
            return Err(Error::OutOfRange {
                what: "batch_size",
                value: 0.0,
            });
        }
        if self.input_size == 0 {
            return Err(Error::OutOfRange {
                what: "input_size",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// Cosine learning-rate schedule value at `step` of `total_steps`:
/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::OutOfRange {
            what: "total_steps (must be >= 1)",
            value: 0.0,
        });
    }
    if step > total_steps {
        return Err(Error::OutOfRange {
            what: "step (must be <= total_steps)",
            value: step as f64,
        });
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NeuralNet,
    pub history: Vec<EpochStats>,
}

struct Sample {
    image: ImageBuf,
    label: usize,
}

fn load_split(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
    input_size: usize,
    resize_now: bool,
) -> Result<Vec<Sample>> {
    let entries: Vec<_> = manifest
        .split_entries(split)
        .into_iter()
        // train uses everything; the in-loop val readout is clean-only
        .filter(|e| split == Split::Train || !e.poisoned)
        .collect();
    let samples: Vec<Result<Sample>> = entries
        .par_iter()
        .map(|entry| {
            let path = root.join(&entry.uri);
            let image = ImageBuf::load_png(&path).map_err(|_| Error::Invariant {
                image_id: entry.image_id.clone(),
                detail: format!("image not loadable at {}", path.display()),
            })?;
            let image = if resize_now {
                image.resize_bilinear(input_size, input_size)
            } else {
                image
            };
            Ok(Sample {
                image,
                label: entry.label,
            })
        })
        .collect();
    samples.into_iter().collect()
}

fn augment(sample: &Sample, policy: AugmentPolicy, input_size: usize, rng: &mut ChaCha8Rng) -> Tensor3 {
    match policy {
        AugmentPolicy::None => sample
            .image
            .resize_bilinear(input_size, input_size)
            .to_tensor(),
        AugmentPolicy::StandardImagenet => {
            let (w, h) = (sample.image.width, sample.image.height);
            let scale = rng.random_range(0.7..1.0_f64);
            let cw = ((w as f64 * scale).round() as usize).max(1);
            let ch = ((h as f64 * scale).round() as usize).max(1);
            let x0 = rng.random_range(0..=(w - cw));
            let y0 = rng.random_range(0..=(h - ch));
            let mut img = sample.image.crop_resize(x0, y0, cw, ch, input_size);
            if rng.random_range(0.0..1.0) < 0.5 {
                img = img.flip_horizontal();
            }
            img.to_tensor()
        }
    }
}

/// Train a classifier on the manifest's train split.
///
/// The run is seed-deterministic: initialization, shuffling and augmentation
/// all derive from `cfg.seed`. History records per-epoch train loss, lr and
/// val accuracy (when a val split exists).
pub fn train(manifest: &DatasetManifest, root: &Path, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let num_classes = manifest.class_names.len();
    let model = NeuralNet::build(&cfg.arch, cfg.input_size, num_classes, derive_seed(cfg.seed, "init"))?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history: Vec::new(),
        });
    }
    let train_set = load_split(manifest, root, Split::Train, cfg.input_size, false)?;
    if train_set.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let val_tensors: Vec<(Tensor3, usize)> =
        load_split(manifest, root, Split::Val, cfg.input_size, true)?
            .into_iter()
            .map(|s| (s.image.to_tensor(), s.label))
            .collect();

    let mut model = model;
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut momentum: Vec<LayerGrad> = Vec::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle-{epoch}")));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_lr = cfg.base_lr;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cosine_lr(global_step, total_steps, cfg.base_lr)?;
            epoch_lr = lr;
            let aug_base = derive_seed(cfg.seed, &format!("aug-{epoch}-{step}"));
            let per_sample: Vec<(f64, Vec<LayerGrad>)> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(aug_base.wrapping_add(j as u64));
                    let x = augment(&train_set[idx], cfg.augmentation, cfg.input_size, &mut rng);
                    let trace = model.trace(&x);
                    let (loss, grad_logits) =
                        softmax_cross_entropy(&trace.last().unwrap().data, train_set[idx].label);
                    let pass = model
                        .backward(
                            &trace,
                            &grad_logits,
                            &BackwardWants {
                                param_grads: true,
                                ..Default::default()
                            },
                        )
                        .expect("backward on own trace");
                    (loss, pass.param_grads)
                })
                .collect();

            let batch_len = batch.len() as f64;
            let mut batch_loss = 0.0;
            let mut grads: Vec<LayerGrad> = Vec::new();
            for (loss, g) in per_sample {
                batch_loss += loss;
                if grads.is_empty() {
                    grads = g;
                } else {
                    for (acc, item) in grads.iter_mut().zip(&g) {
                        for (a, b) in acc.weight.iter_mut().zip(&item.weight) {
                            *a += b;
                        }
                        for (a, b) in acc.bias.iter_mut().zip(&item.bias) {
                            *a += b;
                        }
                    }
                }
            }
            batch_loss /= batch_len;
            if !batch_loss.is_finite() {
                return Err(Error::NanLoss { epoch, step });
            }
            epoch_loss += batch_loss * batch_len;

            if momentum.is_empty() {
                momentum = grads
                    .iter()
                    .map(|g| LayerGrad {
                        weight: vec![0.0; g.weight.len()],
                        bias: vec![0.0; g.bias.len()],
                    })
                    .collect();
            }
            for (layer_idx, weight, bias) in model.params_mut() {
                let g = &grads[layer_idx];
                let m = &mut momentum[layer_idx];
                for ((w, mw), gw) in weight.iter_mut().zip(&mut m.weight).zip(&g.weight) {
                    let grad = gw / batch_len + cfg.weight_decay * *w;
                    *mw = cfg.momentum * *mw + grad;
                    *w -= lr * *mw;
                }
                for ((b, mb), gb) in bias.iter_mut().zip(&mut m.bias).zip(&g.bias) {
                    let grad = gb / batch_len + cfg.weight_decay * *b;
                    *mb = cfg.momentum * *mb + grad;
                    *b -= lr * *mb;
                }
            }
            global_step += 1;
        }

        let val_accuracy = if val_tensors.is_empty() {
            None
        } else {
            let correct: usize = val_tensors
                .par_iter()
                .map(|(x, label)| usize::from(model.predict(x) == *label))
                .sum();
            Some(correct as f64 / val_tensors.len() as f64)
        };
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / n as f64,
            lr: epoch_lr,
            val_accuracy,
        });
    }
    Ok(TrainOutcome { model, history })
}

/// Fine-tune an existing model in place on a fixed set of (tensor, label)
/// pairs; shared by the defense suite. Returns per-epoch mean losses.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    model: &mut NeuralNet,
    samples: &[(Tensor3, usize)],
    epochs: usize,
    base_lr: f64,
    momentum_coef: f64,
    weight_decay: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples.is_empty() || epochs == 0 {
        return Ok(Vec::new());
    }
    let n = samples.len();
    let steps_per_epoch = n.div_ceil(batch_size);
    let total_steps = epochs * steps_per_epoch;
    let mut momentum: Vec<LayerGrad> = Vec::new();
    let mut losses = Vec::with_capacity(epochs);
    let mut global_step = 0usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("ft-{epoch}")));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            let lr = cosine_lr(global_step, total_steps, base_lr)?;
            let per_sample: Vec<(f64, Vec<LayerGrad>)> = batch
                .par_iter()
                .map(|&idx| {
                    let (x, label) = &samples[idx];
                    let trace = model.trace(x);
                    let (loss, grad_logits) =
                        softmax_cross_entropy(&trace.last().unwrap().data, *label);
                    let pass = model
                        .backward(
                            &trace,
                            &grad_logits,
                            &BackwardWants {
                                param_grads: true,
                                ..Default::default()
                            },
                        )
                        .expect("backward on own trace");
                    (loss, pass.param_grads)
                })
                .collect();
            let batch_len = batch.len() as f64;
            let mut grads: Vec<LayerGrad> = Vec::new();
            for (loss, g) in per_sample {
                epoch_loss += loss;
                if grads.is_empty() {
                    grads = g;
                } else {
                    for (acc, item) in grads.iter_mut().zip(&g) {
                        for (a, b) in acc.weight.iter_mut().zip(&item.weight) {
                            *a += b;
                        }
                        for (a, b) in acc.bias.iter_mut().zip(&item.bias) {
                            *a += b;
                        }
                    }
                }
            }
            if momentum.is_empty() {
                momentum = grads
                    .iter()
                    .map(|g| LayerGrad {
                        weight: vec![0.0; g.weight.len()],
                        bias: vec![0.0; g.bias.len()],
                    })
                    .collect();
            }
            for (layer_idx, weight, bias) in model.params_mut() {
                let g = &grads[layer_idx];
                let m = &mut momentum[layer_idx];
                for ((w, mw), gw) in weight.iter_mut().zip(&mut m.weight).zip(&g.weight) {
                    let grad = gw / batch_len + weight_decay * *w;
                    *mw = momentum_coef * *mw + grad;
                    *w -= lr * *mw;
                }
                for ((b, mb), gb) in bias.iter_mut().zip(&mut m.bias).zip(&g.bias) {
                    let grad = gb / batch_len + weight_decay * *b;
                    *mb = momentum_coef * *mb + grad;
                    *b -= lr * *mb;
                }
            }
            global_step += 1;
        }
        losses.push(epoch_loss / n as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{ManifestEntry, Provenance};

    #[test]
    fn cosine_endpoints_and_midpoint_are_exact() {
        assert_eq!(cosine_lr(0, 100, 0.01).unwrap(), 0.01);
        assert!(cosine_lr(100, 100, 0.01).unwrap().abs() < 1e-12);
        assert!((cosine_lr(50, 100, 0.01).unwrap() - 0.005).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_monotone_non_increasing() {
        let total = 10_000;
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let lr = cosine_lr(step, total, 0.01).unwrap();
            assert!(lr <= prev + 1e-15, "lr increased at step {step}");
            prev = lr;
        }
    }

    #[test]
    fn cosine_rejects_out_of_range_steps() {
        assert!(cosine_lr(11, 10, 0.1).is_err());
        assert!(cosine_lr(0, 0, 0.1).is_err());
    }

    /// Two classes rendered as solid dark/bright images: linearly separable.
    fn separable_dataset(dir: &Path, per_class: usize) -> DatasetManifest {
        let mut manifest = DatasetManifest::new(vec!["dark".into(), "bright".into()], 0);
        for class in 0..2usize {
            for i in 0..per_class {
                let level = if class == 0 { 40 + i as u8 } else { 200 + i as u8 };
                let img = ImageBuf::filled(16, 16, [level, level, level]);
                let image_id = format!("train-c{class}-{i:03}");
                let uri = format!("images/{image_id}.png");
                img.save_png(&dir.join(&uri)).unwrap();
                manifest.entries.push(ManifestEntry {
                    image_id,
                    uri,
                    label: class,
                    split: Split::Train,
                    provenance: Provenance::SyntheticFixture,
                    poisoned: false,
                    trigger: None,
                    score: None,
                    source_image_id: None,
                });
            }
        }
        manifest.sort_canonical();
        manifest
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            base_lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs,
            input_size: 16,
            seed: 3,
            arch: "linear".to_string(),
            augmentation: AugmentPolicy::None,
        }
    }

    #[test]
    fn separable_fixture_reaches_full_train_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = separable_dataset(dir.path(), 10);
        let out = train(&manifest, dir.path(), &tiny_cfg(20)).unwrap();
        let correct = manifest
            .split_entries(Split::Train)
            .iter()
            .filter(|e| {
                let img = ImageBuf::load_png(&dir.path().join(&e.uri)).unwrap();
                out.model.predict(&img.to_tensor()) == e.label
            })
            .count();
        assert_eq!(correct, 20, "separable data must be fit exactly");
        assert_eq!(out.history.len(), 20);
        // first epoch already reduces loss vs. the last epoch staying low
        assert!(out.history.last().unwrap().train_loss < out.history[0].train_loss);
    }

    #[test]
    fn zero_epochs_returns_untrained_model_and_empty_history() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = separable_dataset(dir.path(), 3);
        let out = train(&manifest, dir.path(), &tiny_cfg(0)).unwrap();
        assert!(out.history.is_empty());
        let fresh = NeuralNet::build("linear", 16, 2, derive_seed(3, "init")).unwrap();
        assert_eq!(out.model.params_flat(), fresh.params_flat());
    }

    #[test]
    fn same_seed_reproduces_history_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = separable_dataset(dir.path(), 6);
        let a = train(&manifest, dir.path(), &tiny_cfg(4)).unwrap();
        let b = train(&manifest, dir.path(), &tiny_cfg(4)).unwrap();
        for (ea, eb) in a.history.iter().zip(&b.history) {
            assert_eq!(ea.train_loss, eb.train_loss);
            assert_eq!(ea.lr, eb.lr);
        }
        assert_eq!(a.model.params_flat(), b.model.params_flat());
    }

    #[test]
    fn unloadable_image_reports_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = separable_dataset(dir.path(), 3);
        manifest.entries[0].uri = "images/missing.png".into();
        match train(&manifest, dir.path(), &tiny_cfg(1)) {
            Err(Error::Invariant { image_id, .. }) => {
                assert_eq!(image_id, manifest.entries[0].image_id)
            }
            other => panic!("expected unloadable-image error, got {other:?}"),
        }
    }

    #[test]
    fn augmentation_policy_is_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = separable_dataset(dir.path(), 6);
        let cfg = TrainConfig {
            augmentation: AugmentPolicy::StandardImagenet,
            ..tiny_cfg(2)
        };
        let a = train(&manifest, dir.path(), &cfg).unwrap();
        let b = train(&manifest, dir.path(), &cfg).unwrap();
        assert_eq!(a.model.params_flat(), b.model.params_flat());
    }
}
