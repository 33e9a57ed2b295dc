//! Perceptual content loss, feature-statistics style loss and their sum.
//!
//! Every norm is mean-reduced: `‖x‖ = sqrt(mean(x²))` over the compared
//! elements.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::feature_codec::{extract_loss_features, LossNetwork, CONTENT_TAG, LOSS_TAGS};
use crate::global_refine::{channel_stats, stats_var, ChannelStats};
use crate::tensor::{ImageTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub content: f64,
    pub style: f64,
    /// `content + lambda · style`.
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(content: f64, style: f64, lambda: f64) -> Self {
        Self {
            content,
            style,
            total: content + lambda * style,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.content.is_finite() && self.style.is_finite() && self.total.is_finite()
    }
}

/// Precomputed loss-network targets of one content/style pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    /// relu4_1 activations of the content image.
    pub content: Tensor,
    /// Channel statistics of the style image at every loss layer.
    pub style: BTreeMap<String, ChannelStats>,
}

impl LossTargets {
    pub fn new(content: &ImageTensor, style: &ImageTensor, net: &LossNetwork) -> Result<Self> {
        let cf = extract_loss_features(content, net)?;
        let sf = extract_loss_features(style, net)?;
        let content = cf
            .get(CONTENT_TAG)
            .ok_or_else(|| Error::MissingParameter(CONTENT_TAG.into()))?
            .tensor()
            .clone();
        let style = sf
            .per_layer
            .iter()
            .map(|(k, v)| (k.clone(), channel_stats(v)))
            .collect();
        Ok(Self { content, style })
    }
}

/// `sqrt(mean((a − b)²))`.
fn rms_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    let m = tape.mean_all(sq);
    Ok(tape.sqrt(m))
}

/// Content and style loss of `output` (`[3, h, w]`) against `targets`.
pub fn loss_terms_var(tape: &mut Tape, net: &LossNetwork, output: Var, targets: &LossTargets) -> Result<(Var, Var)> {
    let feats = net.features_var(tape, output)?;
    let get = |tag: &str| {
        feats
            .get(tag)
            .copied()
            .ok_or_else(|| Error::MissingParameter(tag.into()))
    };
    let out_content = get(CONTENT_TAG)?;
    if tape.value(out_content).shape() != targets.content.shape() {
        return Err(Error::shape(
            "content loss features",
            crate::tensor::ShapeFmt(targets.content.shape()),
            crate::tensor::ShapeFmt(tape.value(out_content).shape()),
        ));
    }
    let target = tape.constant(targets.content.clone());
    let content = rms_diff(tape, out_content, target)?;
    let mut style: Option<Var> = None;
    for tag in LOSS_TAGS {
        let stats = targets
            .style
            .get(tag)
            .ok_or_else(|| Error::MissingParameter(tag.into()))?;
        let (_, mean, std) = stats_var(tape, get(tag)?)?;
        if tape.value(mean).len() != stats.channels() {
            return Err(Error::shape(
                "style statistics",
                stats.channels(),
                tape.value(mean).len(),
            ));
        }
        let (tm, ts) = stats.as_tensors();
        let tm = tape.constant(tm);
        let ts = tape.constant(ts);
        let lm = rms_diff(tape, mean, tm)?;
        let ls = rms_diff(tape, std, ts)?;
        let layer = tape.add(lm, ls)?;
        style = Some(match style {
            Some(acc) => tape.add(acc, layer)?,
            None => layer,
        });
    }
    Ok((content, style.expect("four loss layers")))
}

/// `content + λ·style`. At `λ = 0` the style term is left out of the graph.
pub fn total_var(tape: &mut Tape, content: Var, style: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(content);
    }
    let weighted = tape.scale(style, lambda);
    tape.add(content, weighted)
}

fn evaluate(output: &ImageTensor, targets: &LossTargets, net: &LossNetwork) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let x = tape.constant(output.tensor().clone());
    let (c, s) = loss_terms_var(&mut tape, net, x, targets)?;
    Ok((tape.value(c).data()[0], tape.value(s).data()[0]))
}

/// Mean-reduced L2 distance of relu4_1 features.
pub fn content_loss(output: &ImageTensor, content: &ImageTensor, net: &LossNetwork) -> Result<f64> {
    let a = extract_loss_features(output, net)?;
    let b = extract_loss_features(content, net)?;
    let (fa, fb) = (a.get(CONTENT_TAG), b.get(CONTENT_TAG));
    let (fa, fb) = fa.zip(fb).ok_or_else(|| Error::MissingParameter(CONTENT_TAG.into()))?;
    if fa.dims() != fb.dims() {
        return Err(Error::shape(
            "content loss features",
            format_dims(fb.dims()),
            format_dims(fa.dims()),
        ));
    }
    Ok(rms(fa.tensor().data(), fb.tensor().data()))
}

fn format_dims((c, h, w): (usize, usize, usize)) -> String {
    alloc::format!("({c}, {h}, {w})")
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Sum over the four loss layers of the mean-reduced L2 distances between
/// channel means and between channel standard deviations.
pub fn style_loss(output: &ImageTensor, style: &ImageTensor, net: &LossNetwork) -> Result<f64> {
    let a = extract_loss_features(output, net)?;
    let b = extract_loss_features(style, net)?;
    let mut total = 0.0;
    for tag in LOSS_TAGS {
        let fa = a.get(tag).ok_or_else(|| Error::MissingParameter(tag.into()))?;
        let fb = b.get(tag).ok_or_else(|| Error::MissingParameter(tag.into()))?;
        let (sa, sb) = (channel_stats(fa), channel_stats(fb));
        total += rms(&sa.mean, &sb.mean) + rms(&sa.std, &sb.std);
    }
    Ok(total)
}

pub fn total_loss(
    output: &ImageTensor,
    content: &ImageTensor,
    style: &ImageTensor,
    lambda: f64,
    net: &LossNetwork,
) -> Result<LossBreakdown> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Parameter(alloc::format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let targets = LossTargets::new(content, style, net)?;
    let (c, s) = evaluate(output, &targets, net)?;
    Ok(LossBreakdown::new(c, s, lambda))
}
