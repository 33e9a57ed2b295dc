//! Named, shaped parameter collection of the stylization model.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::feature_codec::{LossNetwork, VggSpec};
use crate::rng::{named_rng, uniform};
use crate::tensor::{ShapeFmt, Tensor};

/// Bumped whenever names or shapes of the layout change.
pub const PARAMETER_VERSION: u32 = 1;

/// The two message-passing stages, each with its own parameters.
pub const STAGES: [&str; 2] = ["s2c", "c2c"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    ScalePredictor,
    /// `W_b` and `W_a` of the attention aggregators.
    Attention,
    /// Output transforms and the ablation aggregators.
    MessagePassing,
    Decoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        if name.starts_with("enc.") {
            Some(ParamGroup::Encoder)
        } else if name.starts_with("prec.") {
            Some(ParamGroup::ScalePredictor)
        } else if name.starts_with("dec.") {
            Some(ParamGroup::Decoder)
        } else if name.starts_with("gnn.") {
            let attn = [".gat.wb", ".gat.att_left", ".gat.att_right"];
            if attn.iter().any(|s| name.ends_with(s)) {
                Some(ParamGroup::Attention)
            } else {
                Some(ParamGroup::MessagePassing)
            }
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Copied from the loss network's layer of the same name.
    FromLossNet,
    Uniform(f64),
    Const(f64),
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn slot(name: String, shape: &[usize], init: Init) -> Slot {
    Slot {
        name,
        shape: shape.to_vec(),
        init,
    }
}

fn he(fan_in: usize) -> Init {
    Init::Uniform(libm::sqrt(6.0 / fan_in as f64))
}

fn unit(fan_in: usize) -> Init {
    Init::Uniform(libm::sqrt(3.0 / fan_in as f64))
}

/// Keeps the untrained decoder output near mid-gray, inside the clamp.
fn output(fan_in: usize) -> Init {
    Init::Uniform(0.1 * libm::sqrt(3.0 / fan_in as f64))
}

fn layout(arch: &ArchConfig) -> Vec<Slot> {
    let spec = VggSpec::for_arch(arch);
    let c = arch.feature_channels();
    let (heads, dh, hid, ns) = (arch.heads, arch.head_dim, arch.predictor_hidden, arch.scales.len());
    let mut out = Vec::new();
    for (name, s) in VggSpec::conv_shapes(&spec.encoder()) {
        out.push(slot(format!("enc.{name}.weight"), &s, Init::FromLossNet));
        out.push(slot(format!("enc.{name}.bias"), &s[..1], Init::FromLossNet));
    }
    let dec = VggSpec::conv_shapes(&spec.decoder());
    for (i, (name, s)) in dec.iter().enumerate() {
        let fan_in = s[1] * s[2] * s[3];
        let last = i + 1 == dec.len();
        let w_init = if last { output(fan_in) } else { he(fan_in) };
        out.push(slot(format!("dec.{name}.weight"), s, w_init));
        out.push(slot(
            format!("dec.{name}.bias"),
            &s[..1],
            Init::Const(if last { 0.5 } else { 0.0 }),
        ));
    }
    out.push(slot("prec.fc1.weight".into(), &[hid, 2 * c], he(2 * c)));
    out.push(slot("prec.fc1.bias".into(), &[hid], Init::Const(0.0)));
    out.push(slot("prec.fc2.weight".into(), &[hid, hid], he(hid)));
    out.push(slot("prec.fc2.bias".into(), &[hid], Init::Const(0.0)));
    out.push(slot("prec.out.weight".into(), &[ns, hid], unit(hid)));
    out.push(slot("prec.out.bias".into(), &[ns], Init::Const(0.0)));
    for stage in STAGES {
        let p = |s: &str| format!("gnn.{stage}.{s}");
        out.push(slot(p("gat.wb"), &[heads * dh, c], unit(c)));
        out.push(slot(p("gat.att_left"), &[heads, dh], unit(dh)));
        out.push(slot(p("gat.att_right"), &[heads, dh], unit(dh)));
        out.push(slot(p("gat.out.weight"), &[c, dh], unit(dh)));
        out.push(slot(p("gat.out.bias"), &[c], Init::Const(0.0)));
        out.push(slot(p("gcn.weight"), &[c, c], unit(c)));
        out.push(slot(p("gcn.bias"), &[c], Init::Const(0.0)));
        out.push(slot(p("gin.eps"), &[1], Init::Const(0.0)));
        out.push(slot(p("gin.mlp1.weight"), &[c, c], he(c)));
        out.push(slot(p("gin.mlp1.bias"), &[c], Init::Const(0.0)));
        out.push(slot(p("gin.mlp2.weight"), &[c, c], unit(c)));
        out.push(slot(p("gin.mlp2.bias"), &[c], Init::Const(0.0)));
        out.push(slot(p("sage.weight"), &[c, 2 * c], unit(2 * c)));
        out.push(slot(p("sage.bias"), &[c], Init::Const(0.0)));
        out.push(slot(p("edgeconv.mlp1.weight"), &[c, 2 * c], he(2 * c)));
        out.push(slot(p("edgeconv.mlp1.bias"), &[c], Init::Const(0.0)));
        out.push(slot(p("edgeconv.mlp2.weight"), &[c, c], unit(c)));
        out.push(slot(p("edgeconv.mlp2.bias"), &[c], Init::Const(0.0)));
    }
    out
}

/// Learnable arrays of encoder, scale predictor, both message-passing stages
/// and decoder, plus the architecture that fixes their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    arch: ArchConfig,
    version: u32,
    arrays: BTreeMap<String, Tensor>,
}

impl ModelParameters {
    /// Fresh parameters. Encoder layers start from the loss network's first
    /// layers; everything else is drawn from per-name seeded streams.
    pub fn init(arch: &ArchConfig, loss_net: &LossNetwork, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut arrays = BTreeMap::new();
        for s in layout(arch) {
            let t = match s.init {
                Init::FromLossNet => {
                    let key = s.name.replacen("enc.", "vgg.", 1);
                    let t = loss_net
                        .weights()
                        .get(&key)
                        .ok_or_else(|| Error::MissingParameter(key.clone()))?;
                    if t.shape() != &s.shape[..] {
                        return Err(Error::Incompatible(format!(
                            "loss network `{key}` is {} but the encoder needs {}",
                            ShapeFmt(t.shape()),
                            ShapeFmt(&s.shape)
                        )));
                    }
                    t.clone()
                }
                Init::Uniform(bound) => uniform(&mut named_rng(seed, &s.name), &s.shape, bound),
                Init::Const(v) => Tensor::full(&s.shape, v),
            };
            arrays.insert(s.name, t);
        }
        Ok(Self {
            arch: arch.clone(),
            version: PARAMETER_VERSION,
            arrays,
        })
    }

    /// Reassembles parameters (e.g. from a checkpoint), checking the version
    /// tag and that names and shapes match the layout `arch` implies.
    pub fn from_arrays(arch: ArchConfig, version: u32, arrays: BTreeMap<String, Tensor>) -> Result<Self> {
        if version != PARAMETER_VERSION {
            return Err(Error::Incompatible(format!(
                "parameter version {version} is not supported (expected {PARAMETER_VERSION})"
            )));
        }
        arch.validate()?;
        let params = Self { arch, version, arrays };
        params.check_layout(&params.arch)?;
        Ok(params)
    }

    /// Errors naming every array whose presence or shape disagrees with `arch`.
    pub fn check_layout(&self, arch: &ArchConfig) -> Result<()> {
        let mut problems = Vec::new();
        let expected = layout(arch);
        for s in &expected {
            match self.arrays.get(&s.name) {
                None => problems.push(format!("`{}` missing", s.name)),
                Some(t) if t.shape() != &s.shape[..] => problems.push(format!(
                    "`{}` is {} but {} is required",
                    s.name,
                    ShapeFmt(t.shape()),
                    ShapeFmt(&s.shape)
                )),
                Some(_) => {}
            }
        }
        for name in self.arrays.keys() {
            if !expected.iter().any(|s| &s.name == name) {
                problems.push(format!("unexpected `{name}`"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(problems.join("; ")))
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Replaces an array of the same shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "parameter update",
                ShapeFmt(slot.shape()),
                ShapeFmt(value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn arrays(&self) -> &BTreeMap<String, Tensor> {
        &self.arrays
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.arrays.values().map(Tensor::len).sum()
    }
}

/// Lazily places parameters on a tape the first time a stage asks for them,
/// so only the parameters a forward pass actually touches get gradients.
pub struct ParamScope<'a> {
    params: &'a ModelParameters,
    trainable: bool,
    vars: BTreeMap<String, Var>,
}

impl<'a> ParamScope<'a> {
    /// Parameters enter the tape as differentiable leaves.
    pub fn trainable(params: &'a ModelParameters) -> Self {
        Self {
            params,
            trainable: true,
            vars: BTreeMap::new(),
        }
    }

    /// Parameters enter the tape as constants (inference).
    pub fn frozen(params: &'a ModelParameters) -> Self {
        Self {
            params,
            trainable: false,
            vars: BTreeMap::new(),
        }
    }

    pub fn arch(&self) -> &'a ArchConfig {
        &self.params.arch
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.trainable {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Every parameter bound so far.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
