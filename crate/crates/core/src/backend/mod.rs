//! Fully convolutional feature extractors.
//!
//! Three architectures are supported, each truncated to its convolutional
//! part: AlexNet (`A`), ResNet18 (`R`) and VGG16 (`V`). Parameters use the
//! torchvision naming scheme so that exported pretrained weights load
//! directly from safetensors files. Batch norms are folded into the preceding
//! convolution at load time.
//!
//! When no pretrained file is available, [`Architecture::random_parameters`]
//! produces a He-initialised network with optionally reduced widths, which is
//! what the desk-scale experiments run on.

mod layers;
mod weights;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::tensor::ActivationTensor;
use layers::{BasicBlock, FeatureMap, Layer, LayerTrace, MaxPool2d};
pub use weights::{ParameterMap, ParameterTensor};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "A")]
    AlexNet,
    #[serde(rename = "R")]
    ResNet18,
    #[serde(rename = "V")]
    Vgg16,
}

impl Architecture {
    pub fn letter(self) -> &'static str {
        match self {
            Architecture::AlexNet => "A",
            Architecture::ResNet18 => "R",
            Architecture::Vgg16 => "V",
        }
    }

    /// File stem used for pretrained weights, e.g. `alexnet.safetensors`.
    pub fn weights_stem(self) -> &'static str {
        match self {
            Architecture::AlexNet => "alexnet",
            Architecture::ResNet18 => "resnet18",
            Architecture::Vgg16 => "vgg16",
        }
    }

    /// He-initialised parameters with every channel count scaled by `width`
    /// (at least one channel per layer). Biases are zero; batch norms are
    /// identities.
    pub fn random_parameters(self, width: f64, seed: u64) -> Result<ParameterMap> {
        if !(width > 0.0) || !width.is_finite() {
            return Err(Error::Config(format!("width multiplier must be positive, got {width}")));
        }
        let ch = |c: usize| ((c as f64 * width).round() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = ParameterMap::default();
        let mut conv = |map: &mut ParameterMap, name: &str, out_c: usize, in_c: usize, k: usize, bias: bool| {
            let fan_in = (in_c * k * k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let w: Vec<f64> = (0..out_c * in_c * k * k).map(|_| normal.sample(&mut rng)).collect();
            map.insert(format!("{name}.weight"), ParameterTensor::new(vec![out_c, in_c, k, k], w));
            if bias {
                map.insert(format!("{name}.bias"), ParameterTensor::new(vec![out_c], vec![0.0; out_c]));
            }
        };
        let bn = |map: &mut ParameterMap, name: &str, c: usize| {
            map.insert(format!("{name}.weight"), ParameterTensor::new(vec![c], vec![1.0; c]));
            map.insert(format!("{name}.bias"), ParameterTensor::new(vec![c], vec![0.0; c]));
            map.insert(format!("{name}.running_mean"), ParameterTensor::new(vec![c], vec![0.0; c]));
            map.insert(format!("{name}.running_var"), ParameterTensor::new(vec![c], vec![1.0; c]));
        };
        match self {
            Architecture::AlexNet => {
                let mut in_c = CHANNELS;
                for (idx, c, k) in [(0, 64, 11), (3, 192, 5), (6, 384, 3), (8, 256, 3), (10, 256, 3)] {
                    conv(&mut map, &format!("features.{idx}"), ch(c), in_c, k, true);
                    in_c = ch(c);
                }
            }
            Architecture::Vgg16 => {
                let mut in_c = CHANNELS;
                for (idx, c) in vgg_convs() {
                    conv(&mut map, &format!("features.{idx}"), ch(c), in_c, 3, true);
                    in_c = ch(c);
                }
            }
            Architecture::ResNet18 => {
                conv(&mut map, "conv1", ch(64), CHANNELS, 7, false);
                bn(&mut map, "bn1", ch(64));
                let mut in_c = ch(64);
                for (li, c) in [64usize, 128, 256, 512].iter().enumerate() {
                    let c = ch(*c);
                    for bi in 0..2 {
                        let p = format!("layer{}.{bi}", li + 1);
                        conv(&mut map, &format!("{p}.conv1"), c, in_c, 3, false);
                        bn(&mut map, &format!("{p}.bn1"), c);
                        conv(&mut map, &format!("{p}.conv2"), c, c, 3, false);
                        bn(&mut map, &format!("{p}.bn2"), c);
                        if bi == 0 && li > 0 {
                            conv(&mut map, &format!("{p}.downsample.0"), c, in_c, 1, false);
                            bn(&mut map, &format!("{p}.downsample.1"), c);
                        }
                        in_c = c;
                    }
                }
            }
        }
        Ok(map)
    }
}

/// `(torchvision index, channels)` of the VGG16 convolutions.
fn vgg_convs() -> Vec<(usize, usize)> {
    let cfg: [i32; 17] = [64, 64, -1, 128, 128, -1, 256, 256, 256, -1, 512, 512, 512, -1, 512, 512, 512];
    let mut idx = 0;
    let mut out = vec![];
    for c in cfg {
        if c < 0 {
            idx += 1;
        } else {
            out.push((idx, c as usize));
            idx += 2;
        }
    }
    out
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "alexnet" => Ok(Architecture::AlexNet),
            "r" | "resnet18" => Ok(Architecture::ResNet18),
            "v" | "vgg16" => Ok(Architecture::Vgg16),
            other => Err(Error::Config(format!("unknown backend '{other}' (expected A, R or V)"))),
        }
    }
}

/// One convolution or pooling window in the chain, for receptive-field
/// bookkeeping: `(kernel, stride, padding)`.
pub type WindowGeometry = (usize, usize, usize);

/// Record of a forward pass, sufficient to propagate gradients back to the
/// input pixels.
#[derive(Debug)]
pub struct ForwardTrace {
    width: usize,
    height: usize,
    layers: Vec<LayerTrace>,
}

/// A loaded, read-only feature extractor.
#[derive(Debug, Clone)]
pub struct FeatureBackend {
    architecture: Architecture,
    label: String,
    layers: Vec<Layer>,
    out_channels: usize,
}

impl FeatureBackend {
    pub fn from_parameters(architecture: Architecture, params: &ParameterMap, label: impl Into<String>) -> Result<Self> {
        let layers = match architecture {
            Architecture::AlexNet => {
                let c = |i: usize, stride, pad| params.conv(&format!("features.{i}"), None, stride, pad);
                vec![
                    Layer::Conv(c(0, 4, 2)?),
                    Layer::Relu,
                    Layer::MaxPool(MaxPool2d { k: 3, stride: 2, pad: 0 }),
                    Layer::Conv(c(3, 1, 2)?),
                    Layer::Relu,
                    Layer::MaxPool(MaxPool2d { k: 3, stride: 2, pad: 0 }),
                    Layer::Conv(c(6, 1, 1)?),
                    Layer::Relu,
                    Layer::Conv(c(8, 1, 1)?),
                    Layer::Relu,
                    Layer::Conv(c(10, 1, 1)?),
                    Layer::Relu,
                ]
            }
            Architecture::Vgg16 => {
                let mut layers = vec![];
                let mut prev = None;
                for (idx, _) in vgg_convs() {
                    if let Some(p) = prev {
                        if idx != p + 2 {
                            layers.push(Layer::MaxPool(MaxPool2d { k: 2, stride: 2, pad: 0 }));
                        }
                    }
                    layers.push(Layer::Conv(params.conv(&format!("features.{idx}"), None, 1, 1)?));
                    layers.push(Layer::Relu);
                    prev = Some(idx);
                }
                layers
            }
            Architecture::ResNet18 => {
                let mut layers = vec![
                    Layer::Conv(params.conv("conv1", Some("bn1"), 2, 3)?),
                    Layer::Relu,
                    Layer::MaxPool(MaxPool2d { k: 3, stride: 2, pad: 1 }),
                ];
                for li in 1..=4 {
                    for bi in 0..2 {
                        let p = format!("layer{li}.{bi}");
                        let stride = if bi == 0 && li > 1 { 2 } else { 1 };
                        let downsample = if params.contains(&format!("{p}.downsample.0.weight")) {
                            Some(params.conv(&format!("{p}.downsample.0"), Some(&format!("{p}.downsample.1")), stride, 0)?)
                        } else {
                            None
                        };
                        layers.push(Layer::Block(BasicBlock {
                            conv1: params.conv(&format!("{p}.conv1"), Some(&format!("{p}.bn1")), stride, 1)?,
                            conv2: params.conv(&format!("{p}.conv2"), Some(&format!("{p}.bn2")), 1, 1)?,
                            downsample,
                        }));
                    }
                }
                layers
            }
        };
        let mut in_c = CHANNELS;
        let mut out_channels = CHANNELS;
        for layer in &layers {
            let (i, o) = match layer {
                Layer::Conv(c) => (c.in_c, c.out_c),
                Layer::Block(b) => {
                    if b.downsample.is_none() && b.conv1.in_c != b.conv2.out_c {
                        return Err(Error::Config("residual block without downsample changes width".into()));
                    }
                    (b.conv1.in_c, b.conv2.out_c)
                }
                _ => continue,
            };
            if i != in_c {
                return Err(Error::Config(format!(
                    "{architecture} parameters do not chain: layer expects {i} input channels, previous layer gives {in_c}"
                )));
            }
            in_c = o;
            out_channels = o;
        }
        Ok(Self {
            architecture,
            label: label.into(),
            layers,
            out_channels,
        })
    }

    /// Randomly initialised backend; see [`Architecture::random_parameters`].
    pub fn random(architecture: Architecture, width: f64, seed: u64) -> Result<Self> {
        let params = architecture.random_parameters(width, seed)?;
        Self::from_parameters(architecture, &params, format!("{architecture}-random-w{width}-s{seed}"))
    }

    /// Load torchvision-named weights from a safetensors file.
    pub fn load(architecture: Architecture, path: &Path) -> Result<Self> {
        let params = ParameterMap::read_safetensors(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("weights");
        Self::from_parameters(architecture, &params, format!("{architecture}-{stem}-{}", &params.digest()[..12]))
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    /// Stable identifier: architecture plus weight provenance.
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Window chain from input pixels to output cells, in order. Residual
    /// blocks contribute their two main-path convolutions, which dominate the
    /// shortcut's footprint.
    pub fn geometry(&self) -> Vec<WindowGeometry> {
        let mut g = vec![];
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => g.push((c.k, c.stride, c.pad)),
                Layer::MaxPool(p) => g.push((p.k, p.stride, p.pad)),
                Layer::Block(b) => {
                    g.push((b.conv1.k, b.conv1.stride, b.conv1.pad));
                    g.push((b.conv2.k, b.conv2.stride, b.conv2.pad));
                }
                Layer::Relu => {}
            }
        }
        g
    }

    /// Output spatial size `(height, width)` for an input of the given size,
    /// or `None` when the image is too small to produce any output cell.
    pub fn output_dims(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        let (mut h, mut w) = (height, width);
        for layer in &self.layers {
            (h, w) = layer.out_dims(h, w);
            if h == 0 || w == 0 {
                return None;
            }
        }
        Some((h, w))
    }

    fn normalized_input(&self, image: &Image) -> Result<FeatureMap> {
        if self.output_dims(image.width(), image.height()).is_none() {
            return Err(Error::InvalidInput(format!(
                "{}x{} image is smaller than the receptive field of backend {}",
                image.width(),
                image.height(),
                self.label
            )));
        }
        let plane = image.plane_len();
        let mut x = FeatureMap {
            c: CHANNELS,
            h: image.height(),
            w: image.width(),
            data: image.data().to_vec(),
        };
        for c in 0..CHANNELS {
            x.data[c * plane..(c + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
        }
        Ok(x)
    }

    fn run(&self, image: &Image, keep_trace: bool) -> Result<(ActivationTensor, Vec<LayerTrace>)> {
        let mut x = self.normalized_input(image)?;
        let mut traces = Vec::with_capacity(if keep_trace { self.layers.len() } else { 0 });
        for layer in &self.layers {
            let (y, t) = layer.forward(x, keep_trace);
            x = y;
            traces.extend(t);
        }
        Ok((ActivationTensor::new(x.c, x.h, x.w, x.data)?, traces))
    }

    /// Activation tensor of an image. Deterministic.
    pub fn forward(&self, image: &Image) -> Result<ActivationTensor> {
        Ok(self.run(image, false)?.0)
    }

    /// Forward pass that also records what [`backward`](Self::backward) needs.
    pub fn forward_traced(&self, image: &Image) -> Result<(ActivationTensor, ForwardTrace)> {
        let (t, layers) = self.run(image, true)?;
        Ok((
            t,
            ForwardTrace {
                width: image.width(),
                height: image.height(),
                layers,
            },
        ))
    }

    /// Gradient with respect to the input pixels (planar layout) of a scalar
    /// whose gradient with respect to the output tensor is `grad`.
    pub fn backward(&self, trace: &ForwardTrace, grad: &[f64]) -> Result<Vec<f64>> {
        let (mut h, mut w) = (trace.height, trace.width);
        for layer in &self.layers {
            (h, w) = layer.out_dims(h, w);
        }
        if grad.len() != self.out_channels * h * w {
            return Err(Error::ShapeMismatch(format!(
                "gradient has {} entries, tensor has {}",
                grad.len(),
                self.out_channels * h * w
            )));
        }
        let mut g = FeatureMap {
            c: self.out_channels,
            h,
            w,
            data: grad.to_vec(),
        };
        for (layer, t) in self.layers.iter().zip(&trace.layers).rev() {
            g = layer.backward(g, t);
        }
        let plane = trace.width * trace.height;
        for c in 0..CHANNELS {
            g.data[c * plane..(c + 1) * plane]
                .iter_mut()
                .for_each(|v| *v /= IMAGENET_STD[c]);
        }
        Ok(g.data)
    }
}
