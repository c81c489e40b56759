//! Convolutional feature extractor (VGG-16 blocks 1–2, truncated at pool2).
//!
//! Convolutions run as im2col followed by a single-precision GEMM.

mod store;

pub use store::{load_tensor_store, save_tensor_store, Tensor, TensorStore, NTS_MAGIC};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::img::Patch;

/// Seed of the shipped fixture weights (see [`fixture_weights`]).
pub const FIXTURE_SEED: u64 = 0x0F16_2024;

/// `C × H × W` activation tensor, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map {channels}x{height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite activation".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_patch(patch: &Patch, scale: f64) -> Self {
        let px = patch.pixels();
        Self {
            channels: 1,
            height: px.height(),
            width: px.width(),
            data: px.data().iter().map(|v| (v * scale) as f32).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Stacks `self` and `other` along the channel axis.
    pub fn concat(&self, other: &FeatureMap) -> Result<FeatureMap> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(FeatureMap {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }
}

/// Unfolds a zero-padded 3×3 neighborhood into a `(C·9) × (H·W)` matrix.
pub(crate) fn im2col3x3<T: Copy + Default>(input: &[T], channels: usize, height: usize, width: usize) -> Vec<T> {
    let hw = height * width;
    let mut col = vec![T::default(); channels * 9 * hw];
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..height {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * width..][..width];
                    let dst = &mut row[y * width..][..width];
                    // dst[x] = src[x + kx - 1]
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..width - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..width - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    col
}

/// 3×3, stride 1, pad 1 cross-correlation with flat `[out, in, 3, 3]` kernels.
pub(crate) fn conv3x3_raw(input: &FeatureMap, out_channels: usize, kernels: &[f32], bias: &[f32]) -> FeatureMap {
    let (cin, h, w) = (input.channels, input.height, input.width);
    debug_assert_eq!(kernels.len(), out_channels * cin * 9);
    debug_assert_eq!(bias.len(), out_channels);
    let hw = h * w;
    let k = cin * 9;
    let col = im2col3x3(&input.data, cin, h, w);
    let mut out = vec![0.0f32; out_channels * hw];
    for (o, b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(*b);
    }
    // SAFETY: the slices have exactly m*k, k*n and m*n elements with the
    // row-major strides passed below.
    unsafe {
        matrixmultiply::sgemm(
            out_channels,
            k,
            hw,
            1.0,
            kernels.as_ptr(),
            k as isize,
            1,
            col.as_ptr(),
            hw as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    FeatureMap {
        channels: out_channels,
        height: h,
        width: w,
        data: out,
    }
}

/// Standard 3×3 convolution; `weight` is `[out, in, 3, 3]`, `bias` is `[out]`.
pub fn conv2d(input: &FeatureMap, weight: &Tensor, bias: &Tensor) -> Result<FeatureMap> {
    let shape = weight.shape();
    if shape.len() != 4 || shape[2] != 3 || shape[3] != 3 {
        return Err(Error::Shape(format!(
            "`{}` must be [out, in, 3, 3], got {shape:?}",
            weight.name()
        )));
    }
    if shape[1] != input.channels {
        return Err(Error::Shape(format!(
            "`{}` expects {} input channels, feature map has {}",
            weight.name(),
            shape[1],
            input.channels
        )));
    }
    if bias.shape() != [shape[0]] {
        return Err(Error::Shape(format!(
            "`{}` must be [{}], got {:?}",
            bias.name(),
            shape[0],
            bias.shape()
        )));
    }
    Ok(conv3x3_raw(input, shape[0], weight.values(), bias.values()))
}

pub fn relu(mut input: FeatureMap) -> FeatureMap {
    relu_in_place(&mut input);
    input
}

pub(crate) fn relu_in_place(input: &mut FeatureMap) {
    input.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// 2×2 stride-2 max pooling; odd sizes are replicate-padded right/bottom.
pub fn maxpool2(input: &FeatureMap) -> FeatureMap {
    let (c, h, w) = (input.channels, input.height, input.width);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut data = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = input.channel(ch);
        for oy in 0..oh {
            let y0 = 2 * oy;
            let y1 = (y0 + 1).min(h - 1);
            for ox in 0..ow {
                let x0 = 2 * ox;
                let x1 = (x0 + 1).min(w - 1);
                let m = plane[y0 * w + x0]
                    .max(plane[y0 * w + x1])
                    .max(plane[y1 * w + x0])
                    .max(plane[y1 * w + x1]);
                data.push(m);
            }
        }
    }
    FeatureMap {
        channels: c,
        height: oh,
        width: ow,
        data,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    /// 3×3 conv, pad 1, stride 1; weights `<name>.w` `[out, in, 3, 3]` and `<name>.b` `[out]`.
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    MaxPool2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvStackSpec {
    layers: Vec<Layer>,
}

impl ConvStackSpec {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let mut channels: Option<usize> = None;
        for layer in &layers {
            if let Layer::Conv {
                name,
                in_channels,
                out_channels,
            } = layer
            {
                if let Some(c) = channels {
                    if c != *in_channels {
                        return Err(Error::Shape(format!(
                            "layer `{name}` expects {in_channels} channels but receives {c}"
                        )));
                    }
                }
                channels = Some(*out_channels);
            }
        }
        if channels.is_none() {
            return Err(Error::Shape("stack has no convolution".into()));
        }
        Ok(Self { layers })
    }

    /// conv1_1, conv1_2, pool1, conv2_1, conv2_2, pool2 with ReLUs after every conv.
    pub fn vgg16_pool2() -> Self {
        Self::vgg_like(&[64, 128])
    }

    /// Two-conv blocks with the given widths, for small test stacks.
    pub fn vgg_like(block_widths: &[usize]) -> Self {
        let mut layers = Vec::new();
        let mut cin = 3;
        for (b, &width) in block_widths.iter().enumerate() {
            for i in 0..2 {
                layers.push(Layer::Conv {
                    name: format!("conv{}_{}", b + 1, i + 1),
                    in_channels: if i == 0 { cin } else { width },
                    out_channels: width,
                });
                layers.push(Layer::Relu);
            }
            layers.push(Layer::MaxPool2);
            cin = width;
        }
        Self::new(layers).expect("vgg-like stacks are consistent")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_channels(&self) -> usize {
        self.convs().next().map(|(_, i, _)| i).unwrap_or(1)
    }

    pub fn output_channels(&self) -> usize {
        self.convs().last().map(|(_, _, o)| o).unwrap_or(1)
    }

    /// Spatial downsampling factor of the stack.
    pub fn stride(&self) -> usize {
        1 << self.layers.iter().filter(|l| matches!(l, Layer::MaxPool2)).count()
    }

    fn convs(&self) -> impl Iterator<Item = (&str, usize, usize)> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv {
                name,
                in_channels,
                out_channels,
            } => Some((name.as_str(), *in_channels, *out_channels)),
            _ => None,
        })
    }
}

/// He-normal weights and zero biases drawn from a seeded ChaCha8 stream,
/// in layer order (weight then bias).
pub fn fixture_weights(spec: &ConvStackSpec, seed: u64) -> TensorStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = TensorStore::new();
    for (name, cin, cout) in spec.convs() {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w: Vec<f32> = (0..cout * cin * 9).map(|_| normal.sample(&mut rng) as f32).collect();
        store
            .insert(Tensor::new(format!("{name}.w"), vec![cout, cin, 3, 3], w).expect("finite"))
            .expect("unique names");
        store
            .insert(Tensor::new(format!("{name}.b"), vec![cout], vec![0.0; cout]).expect("finite"))
            .expect("unique names");
    }
    store
}

/// Collapses `[out, in, 3, 3]` kernels to `[out, 1, 3, 3]` by summing over the
/// input channels; equivalent to feeding the gray channel replicated `in` times.
pub fn fold_gray_kernels(kernels: &[f32], out_channels: usize, in_channels: usize) -> Vec<f32> {
    let mut folded = vec![0.0f32; out_channels * 9];
    for o in 0..out_channels {
        for i in 0..in_channels {
            for k in 0..9 {
                folded[o * 9 + k] += kernels[(o * in_channels + i) * 9 + k];
            }
        }
    }
    folded
}

#[derive(Debug, Clone)]
enum Prepared {
    Conv {
        out_channels: usize,
        kernels: Vec<f32>,
        bias: Vec<f32>,
    },
    Relu,
    MaxPool2,
}

/// A [`ConvStackSpec`] bound to its weights, ready for single-channel patches.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    layers: Vec<Prepared>,
    stride: usize,
    output_channels: usize,
}

impl FeatureExtractor {
    pub fn new(spec: &ConvStackSpec, weights: &TensorStore) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut first = true;
        for layer in &spec.layers {
            layers.push(match layer {
                Layer::Conv {
                    name,
                    in_channels,
                    out_channels,
                } => {
                    let w = weights.require(&format!("{name}.w"), &[*out_channels, *in_channels, 3, 3])?;
                    let b = weights.require(&format!("{name}.b"), &[*out_channels])?;
                    let kernels = if first && *in_channels != 1 {
                        fold_gray_kernels(w.values(), *out_channels, *in_channels)
                    } else {
                        w.values().to_vec()
                    };
                    first = false;
                    Prepared::Conv {
                        out_channels: *out_channels,
                        kernels,
                        bias: b.values().to_vec(),
                    }
                }
                Layer::Relu => Prepared::Relu,
                Layer::MaxPool2 => Prepared::MaxPool2,
            });
        }
        Ok(Self {
            layers,
            stride: spec.stride(),
            output_channels: spec.output_channels(),
        })
    }

    /// The fixture-weight VGG stack.
    pub fn fixture() -> Self {
        let spec = ConvStackSpec::vgg16_pool2();
        Self::new(&spec, &fixture_weights(&spec, FIXTURE_SEED)).expect("fixture weights match their spec")
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn output_channels(&self) -> usize {
        self.output_channels
    }

    /// Runs the stack on intensities scaled into `[0, 1]`.
    pub fn extract(&self, patch: &Patch) -> Result<FeatureMap> {
        let mut x = FeatureMap::from_patch(patch, 1.0 / 255.0);
        for layer in &self.layers {
            x = match layer {
                Prepared::Conv {
                    out_channels,
                    kernels,
                    bias,
                } => conv3x3_raw(&x, *out_channels, kernels, bias),
                Prepared::Relu => {
                    relu_in_place(&mut x);
                    x
                }
                Prepared::MaxPool2 => maxpool2(&x),
            };
        }
        Ok(x)
    }
}

/// One-shot form of [`FeatureExtractor::extract`].
pub fn extract_features(patch: &Patch, spec: &ConvStackSpec, weights: &TensorStore) -> Result<FeatureMap> {
    FeatureExtractor::new(spec, weights)?.extract(patch)
}
