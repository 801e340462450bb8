//! Neural attention distillation: fine-tune a teacher copy of the
//! backdoored model on clean data, then retrain a student copy with a loss
//! that pulls its attention maps toward the teacher's. The attention
//! alignment steers feature responses back to clean evidence and starves
//! the backdoor circuit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{softmax_cross_entropy, Tensor3};
use crate::nn::{BackwardWants, LayerGrad, NeuralNet};
use crate::trainer::{cosine_lr, fine_tune};
use crate::util::derive_seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NadConfig {
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    /// Weight on each layer's attention alignment term.
    pub distill_weight: f64,
    /// Conv layers whose attention maps are aligned; empty means every conv
    /// layer of the model.
    pub attention_layers: Vec<String>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for NadConfig {
    fn default() -> Self {
        NadConfig {
            teacher_epochs: 20,
            student_epochs: 20,
            distill_weight: 1000.0,
            attention_layers: Vec::new(),
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Spatial attention of a feature stack: per-cell sum of squared channel
/// responses, normalized to unit L2 norm (an all-zero input stays zero).
pub fn attention_map(features: &Tensor3) -> Tensor3 {
    let mut map = Tensor3::zeros(1, features.h, features.w);
    for c in 0..features.c {
        for (m, v) in map.data.iter_mut().zip(features.channel(c)) {
            *m += v * v;
        }
    }
    let norm = map.l2_norm();
    if norm > 0.0 {
        map.scale(1.0 / norm);
    }
    map
}

/// L2 distance between the attention maps of student and teacher features.
pub fn attention_distill_loss(student: &Tensor3, teacher: &Tensor3) -> f64 {
    let a_s = attention_map(student);
    let a_t = attention_map(teacher);
    a_s.data
        .iter()
        .zip(&a_t.data)
        .map(|(s, t)| (s - t) * (s - t))
        .sum::<f64>()
        .sqrt()
}

/// Gradient of `attention_distill_loss` with respect to the student
/// features, times `weight`.
fn attention_grad(student: &Tensor3, teacher: &Tensor3, weight: f64) -> Tensor3 {
    let plane = student.h * student.w;
    // a = sum_c f_c^2, A = a / ||a||, d = A_s - A_t, L = ||d||
    let mut a = vec![0.0; plane];
    for c in 0..student.c {
        for (acc, v) in a.iter_mut().zip(student.channel(c)) {
            *acc += v * v;
        }
    }
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let a_t = attention_map(teacher);
    let mut grad = Tensor3::zeros(student.c, student.h, student.w);
    if norm == 0.0 {
        return grad; // subgradient 0 at the degenerate point
    }
    let a_s: Vec<f64> = a.iter().map(|v| v / norm).collect();
    let d: Vec<f64> = a_s.iter().zip(&a_t.data).map(|(s, t)| s - t).collect();
    let loss = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if loss == 0.0 {
        return grad;
    }
    // dL/dA = d / L; dL/da = (dL/dA - A (A . dL/dA)) / ||a||
    let dl_da_hat: Vec<f64> = d.iter().map(|v| v / loss).collect();
    let dot: f64 = a_s.iter().zip(&dl_da_hat).map(|(a, g)| a * g).sum();
    let dl_da: Vec<f64> = dl_da_hat
        .iter()
        .zip(&a_s)
        .map(|(g, a)| (g - a * dot) / norm)
        .collect();
    for c in 0..student.c {
        let ch = student.channel(c);
        let out = grad.channel_mut(c);
        for i in 0..plane {
            out[i] = weight * 2.0 * ch[i] * dl_da[i];
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NadSnapshot {
    pub ca: f64,
    pub asr: f64,
}

#[derive(Debug, Clone)]
pub struct NadOutcome {
    pub student: NeuralNet,
    pub teacher: NeuralNet,
    /// Mean (cross-entropy, distillation) losses per student epoch.
    pub student_losses: Vec<(f64, f64)>,
}

/// Purify a backdoored model.
///
/// The teacher is a copy fine-tuned on the clean subset for
/// `teacher_epochs`; the student is a copy trained for `student_epochs`
/// with `CE + distill_weight * sum_layers ||A(student_l) - A(teacher_l)||`.
/// With zero epochs and zero weight the student is returned unchanged.
pub fn nad(
    backdoored: &NeuralNet,
    clean_subset: &[(Tensor3, usize)],
    cfg: &NadConfig,
) -> Result<NadOutcome> {
    if clean_subset.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let layers = if cfg.attention_layers.is_empty() {
        backdoored.conv_layer_names()
    } else {
        for name in &cfg.attention_layers {
            if !backdoored.layer_names().iter().any(|n| n == name) {
                return Err(Error::UnknownLayer(name.clone()));
            }
        }
        cfg.attention_layers.clone()
    };

    let mut teacher = backdoored.clone();
    fine_tune(
        &mut teacher,
        clean_subset,
        cfg.teacher_epochs,
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
        cfg.batch_size,
        derive_seed(cfg.seed, "nad-teacher"),
    )?;

    let layer_slots: Vec<(String, usize)> = {
        let names = backdoored.layer_names();
        layers
            .iter()
            .map(|layer| {
                let idx = names.iter().position(|n| n == layer).expect("validated");
                (layer.clone(), idx + 1) // trace[0] is the input
            })
            .collect()
    };
    // teacher activations are fixed; compute them once per sample
    let teacher_acts: Vec<Vec<Tensor3>> = clean_subset
        .par_iter()
        .map(|(x, _)| {
            let trace = teacher.trace(x);
            layer_slots
                .iter()
                .map(|(_, slot)| trace[*slot].clone())
                .collect()
        })
        .collect();

    let mut student = backdoored.clone();
    let mut student_losses = Vec::with_capacity(cfg.student_epochs);
    if cfg.student_epochs > 0 {
        let n = clean_subset.len();
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let total_steps = cfg.student_epochs * steps_per_epoch;
        let mut momentum: Vec<LayerGrad> = Vec::new();
        let mut global_step = 0usize;
        for epoch in 0..cfg.student_epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                &format!("nad-student-{epoch}"),
            ));
            order.shuffle(&mut rng);
            let mut epoch_ce = 0.0;
            let mut epoch_distill = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let lr = cosine_lr(global_step, total_steps, cfg.lr)?;
                let per_sample: Vec<(f64, f64, Vec<LayerGrad>)> = batch
                    .par_iter()
                    .map(|&idx| {
                        let (x, label) = &clean_subset[idx];
                        let trace = student.trace(x);
                        let (ce, grad_logits) =
                            softmax_cross_entropy(&trace.last().unwrap().data, *label);
                        let mut inject = Vec::with_capacity(layer_slots.len());
                        let mut distill = 0.0;
                        for (li, (layer, slot)) in layer_slots.iter().enumerate() {
                            let s_act = &trace[*slot];
                            let t_act = &teacher_acts[idx][li];
                            distill += attention_distill_loss(s_act, t_act);
                            inject.push((
                                layer.clone(),
                                attention_grad(s_act, t_act, cfg.distill_weight),
                            ));
                        }
                        let pass = student
                            .backward(
                                &trace,
                                &grad_logits,
                                &BackwardWants {
                                    param_grads: true,
                                    inject,
                                    ..Default::default()
                                },
                            )
                            .expect("backward on own trace");
                        (ce, distill, pass.param_grads)
                    })
                    .collect();

                let batch_len = batch.len() as f64;
                let mut grads: Vec<LayerGrad> = Vec::new();
                for (ce, distill, g) in per_sample {
                    epoch_ce += ce;
                    epoch_distill += distill;
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
                for (layer_idx, weight, bias) in student.params_mut() {
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
            student_losses.push((epoch_ce / n as f64, epoch_distill / n as f64));
        }
    }
    Ok(NadOutcome {
        student,
        teacher,
        student_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_features(seed: u64, c: usize, h: usize, w: usize) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor3::from_vec(c, h, w, data)
    }

    #[test]
    fn all_ones_features_give_uniform_unit_map() {
        let features = Tensor3::from_vec(4, 3, 3, vec![1.0; 36]);
        let map = attention_map(&features);
        let expected = 1.0 / 9.0_f64.sqrt();
        for v in &map.data {
            assert!((v - expected).abs() < 1e-12);
        }
        assert!((map.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_features_give_zero_map() {
        let map = attention_map(&Tensor3::zeros(4, 3, 3));
        assert!(map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_channel_equals_channel_sum_property() {
        let f = random_features(3, 1, 4, 4);
        let mut stacked = Tensor3::zeros(3, 4, 4);
        stacked.channel_mut(1).copy_from_slice(&f.data);
        assert_eq!(attention_map(&stacked).data, attention_map(&f).data);
    }

    #[test]
    fn map_is_unit_norm_or_zero_on_random_tensors() {
        for seed in 0..200 {
            let f = random_features(seed, 3, 5, 5);
            let norm = attention_map(&f).l2_norm();
            assert!((norm - 1.0).abs() < 1e-9 || norm == 0.0);
        }
    }

    #[test]
    fn distill_loss_is_zero_for_equal_activations() {
        let f = random_features(9, 4, 6, 6);
        assert_eq!(attention_distill_loss(&f, &f.clone()), 0.0);
        let g = random_features(10, 4, 6, 6);
        assert!(attention_distill_loss(&f, &g) > 0.0);
    }

    #[test]
    fn attention_grad_matches_finite_differences() {
        let teacher = random_features(21, 2, 3, 3);
        let student = random_features(22, 2, 3, 3);
        let grad = attention_grad(&student, &teacher, 1.0);
        let h = 1e-6;
        for &i in &[0usize, 5, 9, 17] {
            let mut plus = student.clone();
            plus.data[i] += h;
            let mut minus = student.clone();
            minus.data[i] -= h;
            let numeric = (attention_distill_loss(&plus, &teacher)
                - attention_distill_loss(&minus, &teacher))
                / (2.0 * h);
            assert!(
                (grad.data[i] - numeric).abs() < 1e-5,
                "grad mismatch at {i}: {} vs {numeric}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn zero_epochs_zero_weight_is_identity() {
        let model = NeuralNet::build("smallcnn", 16, 5, 5).unwrap();
        let clean: Vec<(Tensor3, usize)> = (0..4)
            .map(|i| (random_features(i, 3, 16, 16), (i % 5) as usize))
            .collect();
        let cfg = NadConfig {
            teacher_epochs: 0,
            student_epochs: 0,
            distill_weight: 0.0,
            ..NadConfig::default()
        };
        let out = nad(&model, &clean, &cfg).unwrap();
        assert_eq!(out.student.params_flat(), model.params_flat());
        assert_eq!(out.teacher.params_flat(), model.params_flat());
    }

    #[test]
    fn unknown_attention_layer_is_an_error() {
        let model = NeuralNet::build("smallcnn", 16, 5, 5).unwrap();
        let clean = vec![(Tensor3::zeros(3, 16, 16), 0usize)];
        let cfg = NadConfig {
            attention_layers: vec!["conv77".into()],
            ..NadConfig::default()
        };
        assert!(matches!(
            nad(&model, &clean, &cfg),
            Err(Error::UnknownLayer(_))
        ));
    }
}
