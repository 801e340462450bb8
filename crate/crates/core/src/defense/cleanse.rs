//! Trigger reverse-engineering: for every class, optimize a minimal input
//! mask and pattern that flips clean samples into that class, then flag
//! classes whose mask norm is an outlier under a MAD-based anomaly index.
//! A backdoored class admits a much smaller mask than the rest.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{argmax, softmax_cross_entropy, Tensor3};
use crate::nn::{BackwardWants, NeuralNet};
use crate::util::derive_seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanseConfig {
    pub steps: usize,
    /// Adam step size for mask and pattern.
    pub lr: f64,
    pub lambda_init: f64,
    /// Multiplicative adaptation: lambda grows by this factor while the
    /// reversed trigger succeeds, shrinks by it otherwise.
    pub lambda_factor: f64,
    pub asr_threshold: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CleanseConfig {
    fn default() -> Self {
        CleanseConfig {
            steps: 300,
            lr: 0.1,
            lambda_init: 1e-3,
            lambda_factor: 1.5,
            asr_threshold: 0.99,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassCleanse {
    pub class: usize,
    /// Optimized mask in [0,1], one spatial plane broadcast over channels.
    pub mask: Tensor3,
    pub pattern: Tensor3,
    pub mask_l1: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuralCleanseResult {
    pub per_class: Vec<ClassCleanse>,
    pub norms: Vec<f64>,
    pub anomaly_indices: Vec<f64>,
    /// Classes flagged as backdoored: below-median norm with index > 2.
    pub flagged: Vec<usize>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Reverse-engineer a trigger for one target class.
///
/// Minimizes `CE(model((1-m) * x + m * p), class) + lambda * ||m||_1` over a
/// spatial mask m in [0,1] and pattern p, Adam steps from a fixed 0.5 /
/// mid-gray initialization. Mask and pattern are clamped back into [0,1]
/// after every step.
pub fn reverse_engineer_class(
    model: &NeuralNet,
    samples: &[Tensor3],
    class: usize,
    cfg: &CleanseConfig,
) -> Result<ClassCleanse> {
    if samples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let (c, h, w) = (samples[0].c, samples[0].h, samples[0].w);
    let plane = h * w;
    let mut mask = Tensor3::from_vec(1, h, w, vec![0.5; plane]);
    let mut pattern = Tensor3::from_vec(c, h, w, vec![0.5; c * plane]);
    let mut mask_opt = Adam::new(plane);
    let mut pattern_opt = Adam::new(c * plane);
    let mut lambda = cfg.lambda_init;
    let mut diverged = false;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("nc-{class}")));
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    'steps: for _ in 0..cfg.steps {
        let mut mask_grad = vec![0.0; plane];
        let mut pattern_grad = vec![0.0; c * plane];
        let mut hits = 0usize;
        let batch = cfg.batch_size.min(samples.len());
        for _ in 0..batch {
            let x = &samples[order[cursor]];
            cursor = (cursor + 1) % order.len();
            let mut blended = Tensor3::zeros(c, h, w);
            for ch in 0..c {
                for i in 0..plane {
                    let m = mask.data[i];
                    blended.data[ch * plane + i] =
                        (1.0 - m) * x.data[ch * plane + i] + m * pattern.data[ch * plane + i];
                }
            }
            let trace = model.trace(&blended);
            let logits = &trace.last().unwrap().data;
            if argmax(logits) == class {
                hits += 1;
            }
            let (loss, grad_logits) = softmax_cross_entropy(logits, class);
            if !loss.is_finite() {
                diverged = true;
                break 'steps;
            }
            let pass = model.backward(
                &trace,
                &grad_logits,
                &BackwardWants {
                    input_grad: true,
                    ..Default::default()
                },
            )?;
            let g = pass.input_grad.expect("input gradient requested");
            for ch in 0..c {
                for i in 0..plane {
                    let gv = g.data[ch * plane + i];
                    mask_grad[i] +=
                        (pattern.data[ch * plane + i] - x.data[ch * plane + i]) * gv;
                    pattern_grad[ch * plane + i] += mask.data[i] * gv;
                }
            }
        }
        let scale = 1.0 / batch as f64;
        for g in &mut pattern_grad {
            *g *= scale;
        }
        for (i, g) in mask_grad.iter_mut().enumerate() {
            *g *= scale;
            if mask.data[i] > 0.0 {
                *g += lambda;
            }
        }
        mask_opt.step(&mut mask.data, &mask_grad, cfg.lr);
        pattern_opt.step(&mut pattern.data, &pattern_grad, cfg.lr);
        // projection keeps both in valid pixel range after every step
        mask.clamp_in_place(0.0, 1.0);
        pattern.clamp_in_place(0.0, 1.0);

        let batch_asr = hits as f64 / batch as f64;
        if batch_asr > cfg.asr_threshold {
            lambda *= cfg.lambda_factor;
        } else {
            lambda /= cfg.lambda_factor;
        }
        lambda = lambda.clamp(1e-7, 10.0);
    }

    let mask_l1 = mask.l1_norm();
    Ok(ClassCleanse {
        class,
        mask,
        pattern,
        mask_l1,
        diverged,
    })
}

/// MAD-based anomaly index:
/// `index_c = |norm_c - median| / (1.4826 * MAD)`.
///
/// When MAD is zero the index is 0 for values equal to the median and
/// +inf otherwise.
pub fn anomaly_index(norms: &[f64]) -> Result<Vec<f64>> {
    if norms.len() < 3 {
        return Err(Error::OutOfRange {
            what: "anomaly_index needs >= 3 classes",
            value: norms.len() as f64,
        });
    }
    let med = super::strip::median(norms);
    let deviations: Vec<f64> = norms.iter().map(|n| (n - med).abs()).collect();
    let mad = super::strip::median(&deviations);
    Ok(norms
        .iter()
        .map(|n| {
            if mad == 0.0 {
                if *n == med {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (n - med).abs() / (1.4826 * mad)
            }
        })
        .collect())
}

/// A class is flagged when its mask norm is a low outlier: below the median
/// with anomaly index above 2.
pub fn flag_classes(norms: &[f64], indices: &[f64]) -> Vec<usize> {
    let med = super::strip::median(norms);
    norms
        .iter()
        .zip(indices)
        .enumerate()
        .filter(|(_, (n, i))| **n < med && **i > 2.0)
        .map(|(c, _)| c)
        .collect()
}

/// Run trigger reverse-engineering for every class and score the outcome.
pub fn neural_cleanse(
    model: &NeuralNet,
    samples: &[Tensor3],
    num_classes: usize,
    cfg: &CleanseConfig,
) -> Result<NeuralCleanseResult> {
    if samples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let per_class: Result<Vec<ClassCleanse>> = (0..num_classes)
        .into_par_iter()
        .map(|class| reverse_engineer_class(model, samples, class, cfg))
        .collect();
    let per_class = per_class?;
    let norms: Vec<f64> = per_class.iter().map(|c| c.mask_l1).collect();
    let anomaly_indices = anomaly_index(&norms)?;
    let flagged = flag_classes(&norms, &anomaly_indices);
    Ok(NeuralCleanseResult {
        per_class,
        norms,
        anomaly_indices,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_logit_model() -> NeuralNet {
        let mut net = NeuralNet::build("linear", 8, 3, 0).unwrap();
        let params = vec![0.0; net.param_count()];
        net.set_params_flat(&params);
        net
    }

    fn noise_samples(n: usize) -> Vec<Tensor3> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..n)
            .map(|_| {
                let data = (0..3 * 8 * 8).map(|_| rng.random_range(0.0..1.0)).collect();
                Tensor3::from_vec(3, 8, 8, data)
            })
            .collect()
    }

    #[test]
    fn constant_model_masks_shrink_toward_zero() {
        // loss is independent of the mask except for the sparsity term,
        // so lambda pressure pulls every mask down from its 0.5 init
        let model = constant_logit_model();
        let cfg = CleanseConfig {
            steps: 120,
            ..CleanseConfig::default()
        };
        let samples = noise_samples(8);
        let result = neural_cleanse(&model, &samples, 3, &cfg).unwrap();
        let init_l1 = 0.5 * 64.0;
        for class in &result.per_class {
            assert!(
                class.mask_l1 < init_l1 * 0.25,
                "class {} mask_l1 {} did not shrink",
                class.class,
                class.mask_l1
            );
        }
    }

    #[test]
    fn masks_stay_in_unit_range_after_every_step() {
        let model = constant_logit_model();
        let samples = noise_samples(4);
        // aggressive lr to push against the bounds; check after each of the
        // first several steps
        for steps in 1..=6 {
            let cfg = CleanseConfig {
                steps,
                lr: 5.0,
                ..CleanseConfig::default()
            };
            let out = reverse_engineer_class(&model, &samples, 0, &cfg).unwrap();
            for &v in &out.mask.data {
                assert!((0.0..=1.0).contains(&v));
            }
            for &v in &out.pattern.data {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn same_seed_reproduces_norms() {
        let model = constant_logit_model();
        let samples = noise_samples(6);
        let cfg = CleanseConfig {
            steps: 30,
            ..CleanseConfig::default()
        };
        let a = neural_cleanse(&model, &samples, 3, &cfg).unwrap();
        let b = neural_cleanse(&model, &samples, 3, &cfg).unwrap();
        assert_eq!(a.norms, b.norms);
    }

    #[test]
    fn anomaly_index_matches_hand_mad_computation() {
        let norms = [2.0, 4.0, 6.0, 8.0, 100.0];
        let indices = anomaly_index(&norms).unwrap();
        // median 6, deviations [4,2,0,2,94], MAD 2
        let expected = 94.0 / (1.4826 * 2.0);
        assert!((indices[4] - expected).abs() < 1e-12);
        assert!((indices[0] - 4.0 / (1.4826 * 2.0)).abs() < 1e-12);
        assert_eq!(indices[2], 0.0);
    }

    #[test]
    fn anomaly_index_zero_spread_cases() {
        let indices = anomaly_index(&[5.0, 5.0, 5.0, 5.0]).unwrap();
        assert!(indices.iter().all(|&i| i == 0.0));
        // MAD = 0 with one deviant value -> infinity sentinel
        let indices = anomaly_index(&[5.0, 5.0, 5.0, 9.0]).unwrap();
        assert_eq!(indices[3], f64::INFINITY);
        assert_eq!(indices[0], 0.0);
    }

    #[test]
    fn anomaly_index_is_scale_invariant() {
        let norms = [2.0, 4.0, 6.0, 8.0, 100.0];
        let base = anomaly_index(&norms).unwrap();
        for scale in [0.1, 3.0, 100.0] {
            let scaled: Vec<f64> = norms.iter().map(|n| n * scale).collect();
            let indices = anomaly_index(&scaled).unwrap();
            for (a, b) in base.iter().zip(&indices) {
                assert!((a - b).abs() < 1e-9, "scale {scale}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn fewer_than_three_classes_is_an_error() {
        assert!(anomaly_index(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn flagging_requires_low_norm_and_high_index() {
        let norms = [1.0, 50.0, 52.0, 54.0, 56.0];
        let indices = anomaly_index(&norms).unwrap();
        assert_eq!(flag_classes(&norms, &indices), vec![0]);
        // the high outlier is not flagged even though its index is large
        let norms = [50.0, 52.0, 54.0, 56.0, 300.0];
        let indices = anomaly_index(&norms).unwrap();
        assert!(flag_classes(&norms, &indices).is_empty());
    }
}
