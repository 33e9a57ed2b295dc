//! Image encoding (VGG-style up to relu3_1), mirrored decoding with bilinear
//! upsampling, and the frozen multi-layer loss network.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::config::{ArchConfig, Mode};
use crate::error::{Error, Result};
use crate::params::{ModelParameters, ParamScope};
use crate::rng::{named_rng, uniform};
use crate::tensor::{FeatureMap, ImageTensor, ShapeFmt, Tensor};

/// Encoder inputs must be at least this large on both sides.
pub const MIN_INPUT_SIDE: usize = 16;

/// Layer tags of the loss network, shallow to deep.
pub const LOSS_TAGS: [&str; 4] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1"];

/// Layer compared by the content loss.
pub const CONTENT_TAG: &str = "relu4_1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    /// Convolution followed by ReLU. `name` is e.g. `conv2_1`; its ReLU is `relu2_1`.
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    Pool,
}

/// Layer sequence of a VGG-style stack ending at relu4_1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VggSpec {
    pub layers: Vec<Layer>,
}

fn conv(name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Layer {
    Layer::Conv {
        name: name.to_string(),
        in_ch,
        out_ch,
        kernel,
    }
}

impl VggSpec {
    /// VGG-19 through relu4_1.
    pub fn vgg19() -> Self {
        Self {
            layers: alloc::vec![
                conv("conv1_1", 3, 64, 3),
                conv("conv1_2", 64, 64, 3),
                Layer::Pool,
                conv("conv2_1", 64, 128, 3),
                conv("conv2_2", 128, 128, 3),
                Layer::Pool,
                conv("conv3_1", 128, 256, 3),
                conv("conv3_2", 256, 256, 3),
                conv("conv3_3", 256, 256, 3),
                conv("conv3_4", 256, 256, 3),
                Layer::Pool,
                conv("conv4_1", 256, 512, 3),
            ],
        }
    }

    /// Narrow stack with the VGG downsampling structure; `c` channels at relu3_1.
    pub fn tiny(c: usize, kernel: usize) -> Self {
        let (a, b) = (c / 4, c / 2);
        Self {
            layers: alloc::vec![
                conv("conv1_1", 3, a, kernel),
                conv("conv1_2", a, a, kernel),
                Layer::Pool,
                conv("conv2_1", a, b, kernel),
                conv("conv2_2", b, b, kernel),
                Layer::Pool,
                conv("conv3_1", b, c, kernel),
                Layer::Pool,
                conv("conv4_1", c, 2 * c, kernel),
            ],
        }
    }

    pub fn for_arch(arch: &ArchConfig) -> Self {
        match arch.mode {
            Mode::Full => Self::vgg19(),
            Mode::Tiny => Self::tiny(arch.tiny_channels, 3),
        }
    }

    /// Prefix of the stack up to and including conv3_1.
    pub fn encoder(&self) -> Vec<Layer> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.clone());
            if matches!(l, Layer::Conv { name, .. } if name == "conv3_1") {
                break;
            }
        }
        out
    }

    /// Mirrored decoder: each encoder conv `a -> b` becomes `b -> a` in reverse
    /// order and every pooling becomes a 2× bilinear upsample.
    pub fn decoder(&self) -> Vec<Layer> {
        let mut idx = 0;
        self.encoder()
            .into_iter()
            .rev()
            .map(|l| match l {
                Layer::Conv {
                    in_ch, out_ch, kernel, ..
                } => {
                    idx += 1;
                    conv(&format!("conv{idx}"), out_ch, in_ch, kernel)
                }
                Layer::Pool => Layer::Pool,
            })
            .collect()
    }

    pub fn conv_shapes(layers: &[Layer]) -> Vec<(String, [usize; 4])> {
        layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv {
                    name,
                    in_ch,
                    out_ch,
                    kernel,
                } => Some((name.clone(), [*out_ch, *in_ch, *kernel, *kernel])),
                Layer::Pool => None,
            })
            .collect()
    }
}

/// Frozen feature extractor used by the losses. Its weights never enter the
/// optimizer: they are always placed on a tape as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct LossNetwork {
    spec: VggSpec,
    weights: BTreeMap<String, Tensor>,
}

/// Loss-network activations keyed by layer tag.
#[derive(Clone, Debug, PartialEq)]
pub struct LossFeatures {
    pub per_layer: BTreeMap<String, FeatureMap>,
}

impl LossFeatures {
    pub fn get(&self, tag: &str) -> Option<&FeatureMap> {
        self.per_layer.get(tag)
    }
}

impl LossNetwork {
    /// Randomly initialized (He-uniform, zero bias) network, deterministic in `seed`.
    pub fn random(spec: VggSpec, seed: u64) -> Self {
        let mut weights = BTreeMap::new();
        for (name, shape) in VggSpec::conv_shapes(&spec.layers) {
            let fan_in = shape[1] * shape[2] * shape[3];
            let bound = libm::sqrt(6.0 / fan_in as f64);
            let wname = format!("vgg.{name}.weight");
            let mut rng = named_rng(seed, &wname);
            weights.insert(wname, uniform(&mut rng, &shape, bound));
            weights.insert(format!("vgg.{name}.bias"), Tensor::zeros(&[shape[0]]));
        }
        Self { spec, weights }
    }

    /// The tiny-mode loss network: fixed seed, `c` channels at relu3_1.
    pub fn tiny(c: usize, seed: u64) -> Self {
        Self::random(VggSpec::tiny(c, 3), seed)
    }

    /// Builds a network from named arrays (`vgg.conv1_1.weight`, ...),
    /// checking that every layer of `spec` is present with the right shape.
    pub fn from_arrays(spec: VggSpec, arrays: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for (name, shape) in VggSpec::conv_shapes(&spec.layers) {
            for (suffix, want) in [("weight", &shape[..]), ("bias", &shape[..1])] {
                let key = format!("vgg.{name}.{suffix}");
                let t = arrays
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("loss network weights lack `{key}`")))?;
                if t.shape() != want {
                    return Err(Error::Incompatible(format!(
                        "`{key}` has shape {} but the architecture needs {}",
                        ShapeFmt(t.shape()),
                        ShapeFmt(want)
                    )));
                }
                weights.insert(key, t.clone());
            }
        }
        Ok(Self { spec, weights })
    }

    /// Loss network for `arch`: regenerated from the fixed seed in tiny mode,
    /// taken from `pretrained` in full mode.
    pub fn for_arch(arch: &ArchConfig, pretrained: Option<&BTreeMap<String, Tensor>>) -> Result<Self> {
        match (arch.mode, pretrained) {
            (Mode::Tiny, _) => Ok(Self::tiny(arch.tiny_channels, arch.loss_seed)),
            (Mode::Full, Some(arrays)) => Self::from_arrays(VggSpec::vgg19(), arrays),
            (Mode::Full, None) => Err(Error::Config(String::from(
                "full mode needs pretrained VGG-19 weights (set `loss_network.weights_path`), \
                 or switch to `mode = \"tiny\"`",
            ))),
        }
    }

    pub fn spec(&self) -> &VggSpec {
        &self.spec
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    fn weight(&self, key: &str) -> Result<&Tensor> {
        self.weights
            .get(key)
            .ok_or_else(|| Error::MissingParameter(key.to_string()))
    }

    /// Runs the network on `image` (a `[3, h, w]` tape value) and returns the
    /// relu activations at the four loss tags.
    pub fn features_var(&self, tape: &mut Tape, image: Var) -> Result<BTreeMap<String, Var>> {
        let mut x = image;
        let mut out = BTreeMap::new();
        for layer in &self.spec.layers {
            match layer {
                Layer::Conv { name, .. } => {
                    let w = tape.constant(self.weight(&format!("vgg.{name}.weight"))?.clone());
                    let b = tape.constant(self.weight(&format!("vgg.{name}.bias"))?.clone());
                    x = tape.conv2d(x, w, b)?;
                    x = tape.relu(x);
                    let tag = name.replacen("conv", "relu", 1);
                    if LOSS_TAGS.contains(&tag.as_str()) {
                        out.insert(tag, x);
                    }
                }
                Layer::Pool => x = tape.max_pool2(x)?,
            }
        }
        Ok(out)
    }
}

/// Loss-network features of `image` at relu1_1 through relu4_1.
pub fn extract_loss_features(image: &ImageTensor, net: &LossNetwork) -> Result<LossFeatures> {
    let mut tape = Tape::new();
    let x = tape.constant(image.tensor().clone());
    let vars = net.features_var(&mut tape, x)?;
    let mut per_layer = BTreeMap::new();
    for (tag, v) in vars {
        let fm = FeatureMap::new(tape.value(v).clone(), tag.clone())?;
        per_layer.insert(tag, fm);
    }
    Ok(LossFeatures { per_layer })
}

fn check_input(h: usize, w: usize) -> Result<()> {
    if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
        return Err(Error::InputTooSmall {
            height: h,
            width: w,
            min: MIN_INPUT_SIDE,
        });
    }
    if !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(Error::Parameter(format!(
            "image sides must be multiples of 4, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Encoder forward on a tape: `[3, H, W] -> [c, H/4, W/4]`.
pub fn encode_var(tape: &mut Tape, scope: &mut ParamScope<'_>, image: Var) -> Result<Var> {
    let (_, h, w) = tape.value(image).dims3()?;
    check_input(h, w)?;
    let spec = VggSpec::for_arch(scope.arch());
    let mut x = image;
    for layer in spec.encoder() {
        match layer {
            Layer::Conv { name, .. } => {
                let wt = scope.var(tape, &format!("enc.{name}.weight"))?;
                let b = scope.var(tape, &format!("enc.{name}.bias"))?;
                x = tape.conv2d(x, wt, b)?;
                x = tape.relu(x);
            }
            Layer::Pool => x = tape.max_pool2(x)?,
        }
    }
    Ok(x)
}

/// Decoder forward on a tape: `[c, h, w] -> [3, 4h, 4w]`, clamped to `[0, 1]`.
pub fn decode_var(tape: &mut Tape, scope: &mut ParamScope<'_>, features: Var) -> Result<Var> {
    let spec = VggSpec::for_arch(scope.arch());
    let layers = spec.decoder();
    let (c, _, _) = tape.value(features).dims3()?;
    let want = scope.arch().feature_channels();
    if c != want {
        return Err(Error::shape("decoder input channels", want, c));
    }
    let last = layers
        .iter()
        .rposition(|l| matches!(l, Layer::Conv { .. }))
        .expect("decoder has convolutions");
    let mut x = features;
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            Layer::Conv { name, .. } => {
                let wt = scope.var(tape, &format!("dec.{name}.weight"))?;
                let b = scope.var(tape, &format!("dec.{name}.bias"))?;
                x = tape.conv2d(x, wt, b)?;
                if i != last {
                    x = tape.relu(x);
                }
            }
            Layer::Pool => x = tape.upsample2(x)?,
        }
    }
    Ok(tape.clamp(x, 0.0, 1.0))
}

/// relu3_1-level features of `image`.
pub fn encode(image: &ImageTensor, params: &ModelParameters) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let mut scope = ParamScope::frozen(params);
    let x = tape.constant(image.tensor().clone());
    let y = encode_var(&mut tape, &mut scope, x)?;
    FeatureMap::new(tape.value(y).clone(), "relu3_1")
}

/// Image with four times the spatial size of `features`, values in `[0, 1]`.
pub fn decode(features: &FeatureMap, params: &ModelParameters) -> Result<ImageTensor> {
    let mut tape = Tape::new();
    let mut scope = ParamScope::frozen(params);
    let x = tape.constant(features.tensor().clone());
    let y = decode_var(&mut tape, &mut scope, x)?;
    ImageTensor::clamped(tape.value(y).clone())
}

/// Deterministic pseudo-random image for tests, smoke runs and benchmarks.
pub fn random_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = named_rng(seed, "image");
    let t = uniform(&mut rng, &[3, height, width], 0.5).map(|v| v + 0.5);
    ImageTensor::new(t).expect("values in [0, 1]")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(c: usize) -> (LossNetwork, ModelParameters) {
        let arch = ArchConfig::tiny(c);
        let net = LossNetwork::tiny(c, arch.loss_seed);
        let params = ModelParameters::init(&arch, &net, 7).unwrap();
        (net, params)
    }

    #[test]
    fn tiny_encode_decode_shapes() {
        let (_, params) = tiny_params(32);
        let img = random_image(64, 64, 1);
        let f = encode(&img, &params).unwrap();
        assert_eq!(f.dims(), (32, 16, 16));
        assert_eq!(f.layer_tag(), "relu3_1");
        let out = decode(&f, &params).unwrap();
        assert_eq!(out.tensor().shape(), &[3, 64, 64]);
        assert!(out.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_image_with_zero_bias_encodes_to_zero() {
        let (_, params) = tiny_params(8);
        // all encoder biases are zero at initialization (copied from the loss network)
        let img = ImageTensor::new(Tensor::zeros(&[3, 32, 32])).unwrap();
        let f = encode(&img, &params).unwrap();
        assert!(f.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_or_ragged_inputs_are_rejected() {
        let (_, params) = tiny_params(8);
        let err = encode(&random_image(12, 32, 0), &params).unwrap_err();
        assert!(matches!(err, Error::InputTooSmall { .. }));
        assert!(encode(&random_image(18, 32, 0), &params).is_err());
    }

    #[test]
    fn decoder_rejects_channel_mismatch() {
        let (_, params) = tiny_params(8);
        let f = FeatureMap::from_vec(4, 4, 4, alloc::vec![0.5; 64]).unwrap();
        assert!(matches!(decode(&f, &params).unwrap_err(), Error::Shape { .. }));
    }

    #[test]
    fn tiny_loss_features_halve_per_level() {
        let net = LossNetwork::tiny(16, 3);
        let img = random_image(64, 64, 2);
        let a = extract_loss_features(&img, &net).unwrap();
        let b = extract_loss_features(&img, &net).unwrap();
        assert_eq!(a, b);
        let dims: Vec<_> = LOSS_TAGS.iter().map(|t| a.get(t).unwrap().dims()).collect();
        assert_eq!(dims, [(4, 64, 64), (8, 32, 32), (16, 16, 16), (32, 8, 8)]);
    }

    #[test]
    fn full_mode_without_weights_points_to_tiny_mode() {
        let err = LossNetwork::for_arch(&ArchConfig::full(), None).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("tiny")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decoder_mirrors_encoder() {
        let spec = VggSpec::vgg19();
        let dec = VggSpec::conv_shapes(&spec.decoder());
        let chans: Vec<_> = dec.iter().map(|(_, s)| (s[1], s[0])).collect();
        assert_eq!(chans, [(256, 128), (128, 128), (128, 64), (64, 64), (64, 3)]);
        assert_eq!(spec.decoder().iter().filter(|l| **l == Layer::Pool).count(), 2);
    }
}
