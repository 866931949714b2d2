//! A small strided convolutional feature extractor with a hand-written
//! backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const KERNEL: usize = 3;
const PAD: usize = 1;

/// An RGB image of shape `[H, W, 3]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
}

impl Image {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let [_, _, c] = pixels.dims3()?;
        if c != 3 {
            return Err(Error::arg(format!("images need 3 channels, got {c}")));
        }
        if let Some(bad) = pixels.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::arg(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Image { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    /// Multiplies every channel by a per-pixel mask in `[0, 1]`.
    pub fn masked(&self, mask: &Tensor) -> Result<Image> {
        let [h, w] = mask.dims2()?;
        if h != self.height() || w != self.width() {
            return Err(Error::shape(&[self.height(), self.width()], mask.shape()));
        }
        let mut out = self.pixels.clone();
        for (px, &m) in out.data_mut().chunks_mut(3).zip(mask.data()) {
            let m = m.clamp(0.0, 1.0);
            px.iter_mut().for_each(|v| *v *= m);
        }
        Ok(Image { pixels: out })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Input size plus a stack of 3x3, padding-1 convolutions, each followed by
/// a ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<ConvSpec>,
}

impl Default for Architecture {
    /// 32x32x3 -> 16x16x8 -> 8x8x16 -> 8x8x32.
    fn default() -> Self {
        Architecture {
            input_height: 32,
            input_width: 32,
            layers: vec![
                ConvSpec { in_channels: 3, out_channels: 8, stride: 2 },
                ConvSpec { in_channels: 8, out_channels: 16, stride: 2 },
                ConvSpec { in_channels: 16, out_channels: 32, stride: 1 },
            ],
        }
    }
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 * PAD - KERNEL) / stride + 1
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::arg("architecture has no layers"));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::arg("architecture input size is zero"));
        }
        let mut channels = 3;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != channels || l.out_channels == 0 || l.stride == 0 {
                return Err(Error::arg(format!("layer {i} is inconsistent: {l:?}")));
            }
            channels = l.out_channels;
        }
        Ok(())
    }

    /// `[H, W, K]` of the feature tensor.
    pub fn output_shape(&self) -> [usize; 3] {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for l in &self.layers {
            h = conv_out(h, l.stride);
            w = conv_out(w, l.stride);
        }
        [h, w, self.layers.last().map_or(3, |l| l.out_channels)]
    }

    pub fn feature_channels(&self) -> usize {
        self.output_shape()[2]
    }
}

/// Weight `[3, 3, in, out]` and bias `[out]` of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn zeros(spec: &ConvSpec) -> Self {
        ConvLayer {
            weight: Tensor::zeros(&[KERNEL, KERNEL, spec.in_channels, spec.out_channels]),
            bias: Tensor::zeros(&[spec.out_channels]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub arch: Architecture,
    pub layers: Vec<ConvLayer>,
    pub trainable: bool,
}

impl BackboneParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layers
            .iter()
            .map(|spec| {
                let fan_in = KERNEL * KERNEL * spec.in_channels;
                let fan_out = KERNEL * KERNEL * spec.out_channels;
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut layer = ConvLayer::zeros(spec);
                layer
                    .weight
                    .data_mut()
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-a..a));
                layer
            })
            .collect();
        Ok(BackboneParams {
            arch: arch.clone(),
            layers,
            trainable: true,
        })
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(BackboneParams {
            arch: arch.clone(),
            layers: arch.layers.iter().map(ConvLayer::zeros).collect(),
            trainable: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layers.len() != self.arch.layers.len() {
            return Err(Error::arg(format!(
                "{} layer tensors for {} declared layers",
                self.layers.len(),
                self.arch.layers.len()
            )));
        }
        for (layer, spec) in self.layers.iter().zip(&self.arch.layers) {
            layer
                .weight
                .expect_shape(&[KERNEL, KERNEL, spec.in_channels, spec.out_channels])?;
            layer.bias.expect_shape(&[spec.out_channels])?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

/// Deterministic frozen backbone used as a stand-in for a pretrained one.
pub fn fixed_random_backbone(seed: u64, arch: &Architecture) -> Result<BackboneParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BackboneParams::init(arch, &mut rng)?;
    params.trainable = false;
    Ok(params)
}

/// Activations cached by [`backbone_forward`]. Passed by value to
/// [`backbone_backward`], so each tape backs exactly one backward pass.
#[derive(Debug)]
pub struct BackboneTape {
    /// Input of each layer (the image, then post-ReLU activations).
    inputs: Vec<Tensor>,
    /// Post-ReLU output of each layer; zero entries mark inactive units.
    outputs: Vec<Tensor>,
}

impl BackboneTape {
    /// ReLU on/off pattern over every unit, used to detect finite-difference
    /// steps that cross a kink.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.outputs
            .iter()
            .flat_map(|t| t.data().iter().map(|&x| x > 0.0))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneGradients {
    /// One entry per layer; empty when the backbone is frozen.
    pub layers: Vec<ConvLayer>,
    pub input: Tensor,
}

fn conv_forward(input: &Tensor, layer: &ConvLayer, spec: &ConvSpec) -> Tensor {
    let [h, w, cin] = input.dims3().expect("3-D input");
    let cout = spec.out_channels;
    let (oh, ow) = (conv_out(h, spec.stride), conv_out(w, spec.stride));
    let x = input.data();
    let wt = layer.weight.data();
    let mut out = Tensor::zeros(&[oh, ow, cout]);
    let y = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut y[(oy * ow + ox) * cout..][..cout];
            acc.copy_from_slice(layer.bias.data());
            for ky in 0..KERNEL {
                let Some(iy) = (oy * spec.stride + ky).checked_sub(PAD).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..KERNEL {
                    let Some(ix) = (ox * spec.stride + kx).checked_sub(PAD).filter(|&v| v < w) else {
                        continue;
                    };
                    let xin = &x[(iy * w + ix) * cin..][..cin];
                    let wk = &wt[(ky * KERNEL + kx) * cin * cout..][..cin * cout];
                    for (i, &a) in xin.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        for (acc_o, &w_o) in acc.iter_mut().zip(&wk[i * cout..][..cout]) {
                            *acc_o += a * w_o;
                        }
                    }
                }
            }
            acc.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    out
}

/// Backward through `relu(conv(input))`. `d_out` is overwritten with the
/// pre-activation gradient.
fn conv_backward(
    input: &Tensor,
    output: &Tensor,
    d_out: &mut Tensor,
    layer: &ConvLayer,
    spec: &ConvSpec,
    grads: Option<&mut ConvLayer>,
) -> Tensor {
    let [h, w, cin] = input.dims3().expect("3-D input");
    let [oh, ow, cout] = output.dims3().expect("3-D output");
    for (d, &o) in d_out.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    let x = input.data();
    let wt = layer.weight.data();
    let dy = d_out.data();
    let mut d_in = Tensor::zeros(input.shape());
    let mut grads = grads;
    for oy in 0..oh {
        for ox in 0..ow {
            let g = &dy[(oy * ow + ox) * cout..][..cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            if let Some(gr) = grads.as_deref_mut() {
                for (b, &v) in gr.bias.data_mut().iter_mut().zip(g) {
                    *b += v;
                }
            }
            for ky in 0..KERNEL {
                let Some(iy) = (oy * spec.stride + ky).checked_sub(PAD).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..KERNEL {
                    let Some(ix) = (ox * spec.stride + kx).checked_sub(PAD).filter(|&v| v < w) else {
                        continue;
                    };
                    let base = (ky * KERNEL + kx) * cin * cout;
                    let pix = (iy * w + ix) * cin;
                    for i in 0..cin {
                        let wrow = &wt[base + i * cout..][..cout];
                        let dot: f64 = wrow.iter().zip(g).map(|(a, b)| a * b).sum();
                        d_in.data_mut()[pix + i] += dot;
                        if let Some(gr) = grads.as_deref_mut() {
                            let a = x[pix + i];
                            if a != 0.0 {
                                let dw = &mut gr.weight.data_mut()[base + i * cout..][..cout];
                                for (d, &v) in dw.iter_mut().zip(g) {
                                    *d += a * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    d_in
}

/// Features `[H, W, K]` of one image plus the tape for a backward pass.
pub fn backbone_forward(x: &Image, params: &BackboneParams) -> Result<(Tensor, BackboneTape)> {
    let arch = &params.arch;
    if x.height() != arch.input_height || x.width() != arch.input_width {
        return Err(Error::shape(
            &[arch.input_height, arch.input_width, 3],
            x.tensor().shape(),
        ));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut outputs = Vec::with_capacity(params.layers.len());
    let mut current = x.tensor().clone();
    for (layer, spec) in params.layers.iter().zip(&arch.layers) {
        let next = conv_forward(&current, layer, spec);
        inputs.push(current);
        outputs.push(next.clone());
        current = next;
    }
    Ok((current, BackboneTape { inputs, outputs }))
}

/// Features only, without keeping a tape.
pub fn backbone_features(x: &Image, params: &BackboneParams) -> Result<Tensor> {
    backbone_forward(x, params).map(|(f, _)| f)
}

pub fn backbone_backward(
    tape: BackboneTape,
    params: &BackboneParams,
    d_features: &Tensor,
) -> Result<BackboneGradients> {
    let last = tape
        .outputs
        .last()
        .ok_or_else(|| Error::Invariant("empty backbone tape".into()))?;
    d_features.expect_shape(last.shape())?;
    let mut layer_grads: Vec<ConvLayer> = if params.trainable {
        params.arch.layers.iter().map(ConvLayer::zeros).collect()
    } else {
        Vec::new()
    };
    let mut grad = d_features.clone();
    for l in (0..params.layers.len()).rev() {
        grad = conv_backward(
            &tape.inputs[l],
            &tape.outputs[l],
            &mut grad,
            &params.layers[l],
            &params.arch.layers[l],
            layer_grads.get_mut(l),
        );
    }
    Ok(BackboneGradients {
        layers: layer_grads,
        input: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize) -> Image {
        Image::new(Tensor::from_fn(&[h, w, 3], |i| {
            ((i[0] * 3 + i[1] * 5 + i[2] * 7) % 11) as f64 / 10.0
        }))
        .unwrap()
    }

    #[test]
    fn default_architecture_shape() {
        // 32 -(s2)-> 16 -(s2)-> 8 -(s1)-> 8
        let arch = Architecture::default();
        assert_eq!(arch.output_shape(), [8, 8, 32]);
        let params = fixed_random_backbone(0, &arch).unwrap();
        let (f, _) = backbone_forward(&test_image(32, 32), &params).unwrap();
        assert_eq!(f.shape(), &[8, 8, 32]);
        assert!(f.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_input_and_weights_propagate_bias() {
        let arch = Architecture::default();
        let mut params = BackboneParams::zeros(&arch).unwrap();
        params.layers[2].bias = Tensor::from_fn(&[32], |i| i[0] as f64 * 0.1 - 1.0);
        let zero = Image::new(Tensor::zeros(&[32, 32, 3])).unwrap();
        let f = backbone_features(&zero, &params).unwrap();
        for px in f.data().chunks(32) {
            for (k, &v) in px.iter().enumerate() {
                assert_eq!(v, (k as f64 * 0.1 - 1.0).max(0.0));
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = fixed_random_backbone(3, &Architecture::default()).unwrap();
        let x = test_image(32, 32);
        let a = backbone_features(&x, &params).unwrap();
        let b = backbone_features(&x, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_control_parameters() {
        let arch = Architecture::default();
        assert_eq!(fixed_random_backbone(1, &arch).unwrap(), fixed_random_backbone(1, &arch).unwrap());
        assert_ne!(fixed_random_backbone(1, &arch).unwrap(), fixed_random_backbone(2, &arch).unwrap());
        assert!(!fixed_random_backbone(1, &arch).unwrap().trainable);
    }

    #[test]
    fn rejects_wrong_image_size() {
        let params = fixed_random_backbone(0, &Architecture::default()).unwrap();
        assert!(backbone_forward(&test_image(16, 32), &params).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut params = fixed_random_backbone(0, &Architecture::default()).unwrap();
        params.trainable = true;
        let (f, tape) = backbone_forward(&test_image(32, 32), &params).unwrap();
        let g = backbone_backward(tape, &params, &Tensor::zeros(f.shape())).unwrap();
        assert_eq!(g.layers.len(), 3);
        for l in &g.layers {
            assert!(l.weight.data().iter().all(|&v| v == 0.0));
            assert!(l.bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn frozen_backbone_returns_no_parameter_gradients() {
        let params = fixed_random_backbone(0, &Architecture::default()).unwrap();
        let (f, tape) = backbone_forward(&test_image(32, 32), &params).unwrap();
        let g = backbone_backward(tape, &params, &Tensor::full(f.shape(), 1.0)).unwrap();
        assert!(g.layers.is_empty());
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let params = fixed_random_backbone(0, &Architecture::default()).unwrap();
        let (_, tape) = backbone_forward(&test_image(32, 32), &params).unwrap();
        assert!(backbone_backward(tape, &params, &Tensor::zeros(&[4, 4, 32])).is_err());
    }

    #[test]
    fn masking_scales_channels() {
        let x = test_image(2, 2);
        let m = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 1.0]).unwrap();
        let y = x.masked(&m).unwrap();
        assert_eq!(y.tensor().get(&[0, 1, 2]), 0.0);
        assert_eq!(y.tensor().get(&[1, 0, 1]), x.tensor().get(&[1, 0, 1]) * 0.5);
        assert!(x.masked(&Tensor::zeros(&[3, 2])).is_err());
    }
}
