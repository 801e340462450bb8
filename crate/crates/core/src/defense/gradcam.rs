//! Grad-CAM saliency: channel-weighted activation maps, where the weights
//! are spatial means of the class logit's gradient at a conv layer.

use crate::error::Result;
use crate::nn::tensor::Tensor3;
use crate::nn::{BackwardWants, NeuralNet};

/// Saliency heatmap for `class_index` at `layer`:
/// `ReLU(sum_c w_c * features_c)` with `w_c` the spatial mean of
/// `d logit / d features_c`, max-normalized into [0,1] (an all-zero map
/// stays zero).
pub fn grad_cam(
    model: &NeuralNet,
    input: &Tensor3,
    class_index: usize,
    layer: &str,
) -> Result<Tensor3> {
    let trace = model.trace(input);
    let logits = trace.last().unwrap();
    let mut grad_logits = vec![0.0; logits.len()];
    grad_logits[class_index] = 1.0;
    let pass = model.backward(
        &trace,
        &grad_logits,
        &BackwardWants {
            record_layers: vec![layer.to_string()],
            ..Default::default()
        },
    )?;
    let grad = &pass.layer_grads[layer];
    let features = model.activations(layer, input)?;

    let (c, h, w) = (features.c, features.h, features.w);
    let plane = h * w;
    let mut heat = Tensor3::zeros(1, h, w);
    for ch in 0..c {
        let weight: f64 = grad.channel(ch).iter().sum::<f64>() / plane as f64;
        for i in 0..plane {
            heat.data[i] += weight * features.data[ch * plane + i];
        }
    }
    let mut max = 0.0_f64;
    for v in &mut heat.data {
        if *v < 0.0 {
            *v = 0.0;
        }
        max = max.max(*v);
    }
    if max > 0.0 {
        for v in &mut heat.data {
            *v /= max;
        }
    }
    Ok(heat)
}

/// Nearest-neighbor upsample of a 1-channel map to the given size; handy for
/// comparing heat against input-space regions.
pub fn upsample_map(map: &Tensor3, height: usize, width: usize) -> Tensor3 {
    let mut out = Tensor3::zeros(1, height, width);
    for y in 0..height {
        let sy = y * map.h / height;
        for x in 0..width {
            let sx = x * map.w / width;
            out.data[y * width + x] = map.get(0, sy, sx);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Classifier;
    use rand::Rng;
    use rand::SeedableRng;

    fn random_input(seed: u64, size: usize) -> Tensor3 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * size * size)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        Tensor3::from_vec(3, size, size, data)
    }

    /// Identity conv + gap + dense selecting channel 0 gives a model whose
    /// logit is exactly the spatial mean of input channel 0.
    fn spatial_mean_model(size: usize) -> NeuralNet {
        let mut net = NeuralNet::build("micro", size, 2, 0).unwrap();
        // conv weights: channel 0 of the conv copies input channel 0
        // (1x1-like: center tap of the 3x3 kernel), channel 1 silent
        let mut params = vec![0.0; net.param_count()];
        // conv layout: [out=2][in=3][3][3] then bias[2];
        // center tap of out 0, in 0 is index (0*3+0)*9 + 4
        params[4] = 1.0;
        // dense layout after conv+gap: weight [out=2][in=2], bias[2]
        let conv_params = 2 * 3 * 9 + 2;
        params[conv_params] = 1.0; // logit 0 <- pooled channel 0
        net.set_params_flat(&params);
        net
    }

    #[test]
    fn heatmap_values_stay_in_unit_range() {
        let net = NeuralNet::build("smallcnn", 16, 5, 7).unwrap();
        let x = random_input(3, 16);
        let heat = grad_cam(&net, &x, 2, "conv3").unwrap();
        assert!(heat.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn spatial_mean_model_matches_closed_form() {
        // stride-2 conv with padding: the "spatial mean of channel 0"
        // model has d logit / d feature = 1/(H*W) everywhere, so the
        // heatmap is the max-normalized feature plane itself.
        let net = spatial_mean_model(8);
        let x = random_input(9, 8);
        let heat = grad_cam(&net, &x, 0, "conv1").unwrap();
        let features = net.activations("conv1", &x).unwrap();
        let plane = features.channel(0);
        let max = plane.iter().cloned().fold(0.0_f64, f64::max);
        for (h, f) in heat.data.iter().zip(plane) {
            assert!((h - f / max).abs() < 1e-5);
        }
        // sanity: the logit really is the pooled channel
        let logits = net.logits(&x);
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        assert!((logits[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn uniform_features_give_uniform_heatmap() {
        let net = spatial_mean_model(8);
        // constant input -> interior feature cells equal; compare those
        let x = Tensor3::from_vec(3, 8, 8, vec![0.6; 192]);
        let heat = grad_cam(&net, &x, 0, "conv1").unwrap();
        // interior of the stride-2 map (padding makes the border differ)
        let interior: Vec<f64> = (1..3)
            .flat_map(|y| (1..3).map(move |x| (y, x)))
            .map(|(y, x)| heat.get(0, y, x))
            .collect();
        for v in &interior {
            assert!((v - interior[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_map_stays_zero() {
        let net = spatial_mean_model(8);
        let x = Tensor3::zeros(3, 8, 8);
        let heat = grad_cam(&net, &x, 0, "conv1").unwrap();
        assert!(heat.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_preserves_values() {
        let map = Tensor3::from_vec(1, 2, 2, vec![0.0, 1.0, 0.5, 0.25]);
        let up = upsample_map(&map, 4, 4);
        assert_eq!(up.get(0, 0, 3), 1.0);
        assert_eq!(up.get(0, 3, 0), 0.5);
        assert_eq!(up.get(0, 3, 3), 0.25);
    }
}
