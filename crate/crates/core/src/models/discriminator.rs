use rand::Rng;

use crate::nn::{avg_pool2, Conv3d, Layer, Param, Sequential, Tensor};

/// Multi-scale 3D patch discriminator: scale `s` sees the input average-
/// pooled `s` times; each scale has its own small conv stack ending in a
/// one-channel patch score map.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    scales: Vec<Sequential>,
}

impl PatchDiscriminator {
    pub fn new<R: Rng>(levels: usize, base: usize, rng: &mut R) -> Self {
        let scales = (0..levels)
            .map(|_| {
                Sequential::new(vec![
                    Layer::Conv(Conv3d::new(1, base, 3, 2, rng)),
                    Layer::leaky_relu(),
                    Layer::Conv(Conv3d::new(base, 2 * base, 3, 2, rng)),
                    Layer::leaky_relu(),
                    Layer::Conv(Conv3d::new(2 * base, 1, 3, 1, rng)),
                ])
            })
            .collect();
        PatchDiscriminator { scales }
    }

    pub fn levels(&self) -> usize {
        self.scales.len()
    }

    fn pyramid(&self, x: &Tensor) -> Vec<Tensor> {
        let mut out = vec![x.clone()];
        for _ in 1..self.scales.len() {
            let next = avg_pool2(out.last().expect("non-empty"));
            out.push(next);
        }
        out
    }

    /// Patch scores per scale; caches activations when `cache` is set.
    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Vec<Vec<f32>> {
        let inputs = self.pyramid(x);
        self.scales
            .iter_mut()
            .zip(&inputs)
            .map(|(net, xi)| net.forward(xi, cache).into_vec())
            .collect()
    }

    /// Back-propagates score gradients of the last cached forward. Returns
    /// the gradient with respect to the input image.
    pub fn backward(&mut self, d_scores: &[Vec<f32>], input_shape: [usize; 4], accumulate_params: bool) -> Tensor {
        let mut shapes = vec![input_shape];
        for _ in 1..self.scales.len() {
            let [c, d, h, w] = *shapes.last().expect("non-empty");
            shapes.push([c, d / 2, h / 2, w / 2]);
        }
        // gradient w.r.t. each pyramid level, then folded back through pooling
        let mut level_grads: Vec<Tensor> = Vec::with_capacity(self.scales.len());
        for (net, (g, sh)) in self.scales.iter_mut().zip(d_scores.iter().zip(&shapes)) {
            let out_sp = score_shape(*sh);
            let gt = Tensor::from_vec([1, out_sp[0], out_sp[1], out_sp[2]], g.clone());
            level_grads.push(net.backward(&gt, accumulate_params));
        }
        let mut acc = level_grads.pop().expect("at least one scale");
        while let Some(mut finer) = level_grads.pop() {
            let up = pool_backward(&acc, finer.shape());
            finer.add_assign(&up);
            acc = finer;
        }
        acc
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.scales.iter_mut().flat_map(|s| s.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.scales.iter().flat_map(|s| s.params()).collect()
    }
}

fn score_shape(sh: [usize; 4]) -> [usize; 3] {
    let half = |n: usize| (n + 2 - 3) / 2 + 1;
    [half(half(sh[1])), half(half(sh[2])), half(half(sh[3]))]
}

/// Adjoint of 2x average pooling onto a grid of shape `fine`.
fn pool_backward(g: &Tensor, fine: [usize; 4]) -> Tensor {
    let [c, d, h, w] = fine;
    let [_, cd, ch, cw] = g.shape();
    let mut out = Tensor::zeros(fine);
    for k in 0..c {
        let src = g.channel(k);
        let dst = out.channel_mut(k);
        for z in 0..d.min(2 * cd) {
            for y in 0..h.min(2 * ch) {
                for x in 0..w.min(2 * cw) {
                    dst[(z * h + y) * w + x] = src[((z / 2) * ch + y / 2) * cw + x / 2] / 8.0;
                }
            }
        }
    }
    out
}
