//! Fine pruning: rank a layer's channels by their mean activation on clean
//! data and zero the most dormant ones, recording CA/ASR along the way.
//! Backdoor circuits often ride on neurons that clean data barely touches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{attack_success_rate, clean_accuracy, ImageStore};
use crate::manifest::ManifestEntry;
use crate::nn::tensor::Tensor3;
use crate::nn::NeuralNet;

/// Mean absolute activation per channel of `layer`, over the clean set.
pub fn channel_activity(
    model: &NeuralNet,
    layer: &str,
    images: &[Tensor3],
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let channels = model.layer_channels(layer)?;
    let per_image: Result<Vec<Vec<f64>>> = images
        .par_iter()
        .map(|x| {
            let act = model.activations(layer, x)?;
            Ok((0..channels)
                .map(|c| {
                    let plane = act.channel(c);
                    plane.iter().map(|v| v.abs()).sum::<f64>() / plane.len() as f64
                })
                .collect())
        })
        .collect();
    let per_image = per_image?;
    let mut activity = vec![0.0; channels];
    for image_acts in &per_image {
        for (a, v) in activity.iter_mut().zip(image_acts) {
            *a += v;
        }
    }
    for a in &mut activity {
        *a /= per_image.len() as f64;
    }
    Ok(activity)
}

/// Channels in pruning order: ascending activity, ties by channel index.
pub fn prune_order(activity: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..activity.len()).collect();
    order.sort_by(|&a, &b| {
        activity[a]
            .partial_cmp(&activity[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrunePoint {
    pub fraction: f64,
    pub pruned_channels: usize,
    pub ca: f64,
    pub asr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinePruneCurve {
    pub layer: String,
    /// Full channel ordering, most dormant first.
    pub channel_order: Vec<usize>,
    pub points: Vec<PrunePoint>,
}

/// Evaluation material for the pruning curve.
pub struct PruneEvalSets<'a> {
    pub clean: Vec<&'a ManifestEntry>,
    pub poisoned: Vec<&'a ManifestEntry>,
    pub target_class: usize,
    pub store: &'a ImageStore,
}

/// Prune `layer` cumulatively at each fraction and record CA/ASR.
///
/// For fraction f, the `floor(f * channels)` least-active channels are
/// zeroed; sets are nested by construction. Fraction 0 evaluates the
/// unpruned model.
pub fn fine_prune(
    model: &NeuralNet,
    clean_activation_set: &[Tensor3],
    layer: &str,
    fractions: &[f64],
    eval_sets: &PruneEvalSets<'_>,
) -> Result<FinePruneCurve> {
    for window in fractions.windows(2) {
        if window[1] < window[0] {
            return Err(Error::OutOfRange {
                what: "fractions (must be sorted ascending)",
                value: window[1],
            });
        }
    }
    if let Some(&f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::OutOfRange {
            what: "fraction (must be in [0,1])",
            value: f,
        });
    }
    let activity = channel_activity(model, layer, clean_activation_set)?;
    let channel_order = prune_order(&activity);
    let channels = channel_order.len();

    let mut points = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let k = (fraction * channels as f64).floor() as usize;
        let mut pruned = model.clone();
        if k > 0 {
            pruned.prune_channels(layer, &channel_order[..k])?;
        }
        let ca = clean_accuracy(&pruned, &eval_sets.clean, eval_sets.store)?;
        let asr = attack_success_rate(
            &pruned,
            &eval_sets.poisoned,
            eval_sets.target_class,
            eval_sets.store,
        )?;
        points.push(PrunePoint {
            fraction,
            pruned_channels: k,
            ca,
            asr,
        });
    }
    Ok(FinePruneCurve {
        layer: layer.to_string(),
        channel_order,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_ascending_activity_with_index_ties() {
        let activity = vec![0.5, 0.1, 0.5, 0.0];
        assert_eq!(prune_order(&activity), vec![3, 1, 0, 2]);
    }

    #[test]
    fn order_matches_brute_force_argsort_on_random_activities() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let activity: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let order = prune_order(&activity);
        // brute force: repeatedly take the smallest remaining
        let mut remaining: Vec<usize> = (0..64).collect();
        let mut brute = Vec::new();
        while !remaining.is_empty() {
            let (pos, &idx) = remaining
                .iter()
                .enumerate()
                .min_by(|(_, &a), (_, &b)| {
                    activity[a].partial_cmp(&activity[b]).unwrap().then(a.cmp(&b))
                })
                .unwrap();
            brute.push(idx);
            remaining.remove(pos);
        }
        assert_eq!(order, brute);
    }

    #[test]
    fn activity_measures_mean_abs_activation() {
        let model = NeuralNet::build("smallcnn", 16, 5, 3).unwrap();
        let images: Vec<Tensor3> = (0..4)
            .map(|i| {
                let mut t = Tensor3::zeros(3, 16, 16);
                for v in &mut t.data {
                    *v = (i as f64 + 1.0) / 5.0;
                }
                t
            })
            .collect();
        let activity = channel_activity(&model, "conv2", &images).unwrap();
        assert_eq!(activity.len(), 16);
        // brute-force re-computation for one channel
        let mut expected = 0.0;
        for img in &images {
            let act = model.activations("conv2", img).unwrap();
            let plane = act.channel(7);
            expected += plane.iter().map(|v| v.abs()).sum::<f64>() / plane.len() as f64;
        }
        expected /= images.len() as f64;
        assert!((activity[7] - expected).abs() < 1e-12);
    }

    #[test]
    fn unknown_layer_is_an_error() {
        let model = NeuralNet::build("smallcnn", 16, 5, 3).unwrap();
        let images = vec![Tensor3::zeros(3, 16, 16)];
        assert!(matches!(
            channel_activity(&model, "conv99", &images),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn unsorted_fractions_are_rejected() {
        let model = NeuralNet::build("smallcnn", 16, 5, 3).unwrap();
        let images = vec![Tensor3::zeros(3, 16, 16)];
        let store = ImageStore::new(".", 16);
        let sets = PruneEvalSets {
            clean: vec![],
            poisoned: vec![],
            target_class: 0,
            store: &store,
        };
        let err = fine_prune(&model, &images, "conv3", &[0.5, 0.25], &sets);
        assert!(matches!(err, Err(Error::OutOfRange { .. })));
    }
}
