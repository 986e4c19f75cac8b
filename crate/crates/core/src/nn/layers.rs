use super::conv::Conv3d;
use super::param::Param;
use super::tensor::Tensor;

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv3d),
    LeakyRelu { input: Option<Tensor> },
    /// Nearest-neighbour 2x upsampling.
    Upsample2,
    /// 2x2x2 mean pooling.
    AvgPool2,
}

impl Layer {
    pub fn leaky_relu() -> Self {
        Layer::LeakyRelu { input: None }
    }

    fn forward(&mut self, x: Tensor, cache: bool) -> Tensor {
        match self {
            Layer::Conv(c) => c.forward(&x, cache),
            Layer::LeakyRelu { input } => {
                let mut y = x.clone();
                y.map_inplace(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
                *input = cache.then_some(x);
                y
            }
            Layer::Upsample2 => upsample2(&x),
            Layer::AvgPool2 => avg_pool2(&x),
        }
    }

    fn backward(&mut self, grad: Tensor, accumulate_params: bool) -> Tensor {
        match self {
            Layer::Conv(c) => c.backward(&grad, accumulate_params),
            Layer::LeakyRelu { input } => {
                let x = input.take().expect("leaky relu backward without forward");
                let mut g = grad;
                for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *gv *= LEAKY_SLOPE;
                    }
                }
                g
            }
            Layer::Upsample2 => upsample2_backward(&grad),
            Layer::AvgPool2 => avg_pool2_backward(&grad),
        }
    }
}

/// Feed-forward chain of layers with manual reverse-mode differentiation.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    /// Runs the chain; with `cache` set, activations are kept for `backward`.
    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(h, cache);
        }
        h
    }

    /// Like [`Sequential::forward`] but also returns the output of every
    /// layer whose index is listed in `taps`.
    pub fn forward_taps(&mut self, x: &Tensor, taps: &[usize], cache: bool) -> Vec<Tensor> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(taps.len());
        for (i, l) in self.layers.iter_mut().enumerate() {
            h = l.forward(h, cache);
            if taps.contains(&i) {
                out.push(h.clone());
            }
        }
        out
    }

    pub fn backward(&mut self, grad: &Tensor, accumulate_params: bool) -> Tensor {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(g, accumulate_params);
        }
        g
    }

    /// Reverse pass for a loss that reads several intermediate outputs.
    /// `tap_grads[i]` is added when passing back through layer `taps[i]`.
    pub fn backward_taps(
        &mut self,
        taps: &[usize],
        tap_grads: &[Tensor],
        accumulate_params: bool,
    ) -> Tensor {
        let last = *taps.iter().max().expect("at least one tap");
        // Layers after the last tap never contributed; drop their caches.
        for l in self.layers.iter_mut().skip(last + 1) {
            l.clear_cache();
        }
        let mut g: Option<Tensor> = None;
        for i in (0..=last).rev() {
            if let Some(k) = taps.iter().position(|&t| t == i) {
                match g.as_mut() {
                    Some(acc) => acc.add_assign(&tap_grads[k]),
                    None => g = Some(tap_grads[k].clone()),
                }
            }
            let cur = g.take().expect("gradient seeded at the last tap");
            g = Some(self.layers[i].backward(cur, accumulate_params));
        }
        g.expect("non-empty chain")
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c.params_mut()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c.params()),
                _ => None,
            })
            .flatten()
            .collect()
    }
}

impl Layer {
    fn clear_cache(&mut self) {
        match self {
            Layer::Conv(c) => {
                c.clear_cache();
            }
            Layer::LeakyRelu { input } => *input = None,
            _ => {}
        }
    }
}

pub fn upsample2(x: &Tensor) -> Tensor {
    let [c, d, h, w] = x.shape();
    let mut out = Tensor::zeros([c, 2 * d, 2 * h, 2 * w]);
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for z in 0..2 * d {
            for y in 0..oh {
                let s = ((ci * d + z / 2) * h + y / 2) * w;
                let o = ((ci * 2 * d + z) * oh + y) * ow;
                for xx in 0..ow {
                    dst[o + xx] = src[s + xx / 2];
                }
            }
        }
    }
    out
}

fn upsample2_backward(g: &Tensor) -> Tensor {
    let [c, d2, h2, w2] = g.shape();
    let (d, h, w) = (d2 / 2, h2 / 2, w2 / 2);
    let mut out = Tensor::zeros([c, d, h, w]);
    let src = g.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for z in 0..d2 {
            for y in 0..h2 {
                let s = ((ci * d2 + z) * h2 + y) * w2;
                let o = ((ci * d + z / 2) * h + y / 2) * w;
                for xx in 0..w2 {
                    dst[o + xx / 2] += src[s + xx];
                }
            }
        }
    }
    out
}

pub fn avg_pool2(x: &Tensor) -> Tensor {
    let [c, d, h, w] = x.shape();
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor::zeros([c, od, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for z in 0..2 * od {
            for y in 0..2 * oh {
                let s = ((ci * d + z) * h + y) * w;
                let o = ((ci * od + z / 2) * oh + y / 2) * ow;
                for xx in 0..2 * ow {
                    dst[o + xx / 2] += 0.125 * src[s + xx];
                }
            }
        }
    }
    out
}

fn avg_pool2_backward(g: &Tensor) -> Tensor {
    let [c, od, oh, ow] = g.shape();
    let (d, h, w) = (2 * od, 2 * oh, 2 * ow);
    let mut out = Tensor::zeros([c, d, h, w]);
    let src = g.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let s = ((ci * od + z / 2) * oh + y / 2) * ow;
                let o = ((ci * d + z) * h + y) * w;
                for xx in 0..w {
                    dst[o + xx] = 0.125 * src[s + xx / 2];
                }
            }
        }
    }
    out
}
