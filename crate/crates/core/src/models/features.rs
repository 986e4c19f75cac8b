//! Frozen random 3D feature extractor shared by the perceptual loss, the
//! perceptual-distance metric and FID.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Conv3d, Layer, Sequential, Tensor};

/// Seed used when no other seed is configured.
pub const FEATURE_SEED: u64 = 0x5EED_F00D;

/// Indices of the tapped activations inside the chain.
const TAPS: [usize; 4] = [1, 3, 5, 7];

/// Four conv + leaky-ReLU layers, the second and fourth with stride 2.
/// Weights are drawn once from the seed and never trained.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    net: Sequential,
    seed: u64,
}

impl FeatureStack {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [(1, 8, 1), (8, 8, 2), (8, 16, 1), (16, 16, 2)];
        let mut layers = Vec::new();
        for (cin, cout, stride) in widths {
            layers.push(Layer::Conv(Conv3d::new(cin, cout, 3, stride, &mut rng)));
            layers.push(Layer::leaky_relu());
        }
        FeatureStack {
            net: Sequential::new(layers),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_layers(&self) -> usize {
        TAPS.len()
    }

    /// Width of the deepest activation, i.e. the FID feature dimension.
    pub fn feature_dim(&self) -> usize {
        16
    }

    /// Activations of the four layers for a single-channel input.
    pub fn activations(&self, x: &Tensor) -> Vec<Tensor> {
        self.net.clone().forward_taps(x, &TAPS, false)
    }

    /// Activations plus a closure-free handle for the backward pass: the
    /// returned network holds the caches needed by [`FeatureStack::backward`].
    pub fn activations_cached(&self, x: &Tensor) -> (Vec<Tensor>, Sequential) {
        let mut net = self.net.clone();
        let acts = net.forward_taps(x, &TAPS, true);
        (acts, net)
    }

    /// Input gradient given per-layer activation gradients.
    pub fn backward(net: &mut Sequential, grads: &[Tensor]) -> Tensor {
        net.backward_taps(&TAPS, grads, false)
    }

    /// Deepest-layer activation vectors, one per spatial location.
    pub fn feature_vectors(&self, x: &Tensor) -> Vec<Vec<f64>> {
        let acts = self.activations(x);
        let last = acts.last().expect("four taps");
        let c = last.channels();
        let n = last.voxels();
        (0..n)
            .map(|i| (0..c).map(|k| last.channel(k)[i] as f64).collect())
            .collect()
    }

    pub fn weights_fingerprint(&self) -> Vec<f32> {
        self.net
            .params()
            .iter()
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_frozen() {
        assert_eq!(
            FeatureStack::new(3).weights_fingerprint(),
            FeatureStack::new(3).weights_fingerprint()
        );
        assert_ne!(
            FeatureStack::new(3).weights_fingerprint(),
            FeatureStack::new(4).weights_fingerprint()
        );
    }

    #[test]
    fn shapes() {
        let f = FeatureStack::new(1);
        let acts = f.activations(&Tensor::zeros([1, 8, 8, 8]));
        let shapes: Vec<_> = acts.iter().map(|a| a.shape()).collect();
        assert_eq!(shapes, vec![[8, 8, 8, 8], [8, 4, 4, 4], [16, 4, 4, 4], [16, 2, 2, 2]]);
    }
}
