/// Dense channel-first feature map `[channels, depth, height, width]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor payload does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    /// Number of voxels per channel.
    pub fn voxels(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stacks tensors with identical spatial extent along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let spatial = parts[0].spatial();
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut channels = 0;
        for p in parts {
            assert_eq!(p.spatial(), spatial, "concat over mismatched grids");
            data.extend_from_slice(&p.data);
            channels += p.channels();
        }
        Tensor::from_vec([channels, spatial[0], spatial[1], spatial[2]], data)
    }

    /// Splits off channel ranges; inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, counts: &[usize]) -> Vec<Tensor> {
        assert_eq!(counts.iter().sum::<usize>(), self.channels());
        let n = self.voxels();
        let s = self.spatial();
        let mut start = 0;
        counts
            .iter()
            .map(|&c| {
                let t = Tensor::from_vec(
                    [c, s[0], s[1], s[2]],
                    self.data[start * n..(start + c) * n].to_vec(),
                );
                start += c;
                t
            })
            .collect()
    }

    /// Extracts the sub-block starting at `origin` with spatial size `size`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Tensor {
        let [_, d, h, w] = self.shape;
        assert!(origin[0] + size[0] <= d && origin[1] + size[1] <= h && origin[2] + size[2] <= w);
        let mut out = Tensor::zeros([self.channels(), size[0], size[1], size[2]]);
        let mut k = 0;
        for c in 0..self.channels() {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let src = ((c * d + origin[0] + z) * h + origin[1] + y) * w + origin[2];
                    out.data[k..k + size[2]].copy_from_slice(&self.data[src..src + size[2]]);
                    k += size[2];
                }
            }
        }
        out
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
