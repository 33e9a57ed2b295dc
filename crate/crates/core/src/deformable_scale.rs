//! Learned per-location style patch scales and multi-scale style nodes.
//!
//! Style locations are the origins of the `p`-window grid with stride `s`.
//! A window of side `scale` is centered on the same location (shifted inward
//! at the borders) and bilinearly resized to `p × p`.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::config::Selection;
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ModelParameters, ParamScope};
use crate::patch_ops::{NodeFeature, Patch};
use crate::tensor::{FeatureMap, Tensor};

/// Scale distribution of every style location.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleAssignment {
    /// `[N_loc, |S|]`, rows sum to 1.
    pub probs: Tensor,
    pub scale_set: Vec<usize>,
}

impl ScaleAssignment {
    pub fn new(probs: Tensor, scale_set: Vec<usize>) -> Result<Self> {
        let (_, ns) = probs.dims2()?;
        if scale_set.is_empty() || ns != scale_set.len() {
            return Err(Error::shape("scale assignment", scale_set.len(), ns));
        }
        for (i, row) in probs.data().chunks_exact(ns).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| v.is_nan() || v < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "row {i} of the scale assignment is not a distribution"
                )));
            }
        }
        Ok(Self { probs, scale_set })
    }

    /// Every location fixed to `scale`.
    pub fn fixed(locations: usize, scale: usize) -> Self {
        Self {
            probs: Tensor::full(&[locations, 1], 1.0),
            scale_set: alloc::vec![scale],
        }
    }

    pub fn locations(&self) -> usize {
        self.probs.shape()[0]
    }

    /// Index into `scale_set` of the most probable scale per location, ties to
    /// the smaller scale.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .data()
            .chunks_exact(self.scale_set.len())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0
            })
            .collect()
    }

    /// Chosen side length per location.
    pub fn hard_scales(&self) -> Vec<usize> {
        self.argmax().into_iter().map(|i| self.scale_set[i]).collect()
    }

    /// One-hot rows at the argmax.
    pub fn hardened(&self) -> Self {
        let ns = self.scale_set.len();
        let mut probs = Tensor::zeros(self.probs.shape());
        for (r, i) in self.argmax().into_iter().enumerate() {
            probs.data_mut()[r * ns + i] = 1.0;
        }
        Self {
            probs,
            scale_set: self.scale_set.clone(),
        }
    }
}

fn check_scales(scales: &[usize], h: usize, w: usize) -> Result<()> {
    match scales.iter().find(|&&sc| sc == 0 || sc > h || sc > w) {
        Some(&sc) => Err(Error::PatchTooLarge {
            patch: sc,
            height: h,
            width: w,
        }),
        None => Ok(()),
    }
}

/// Per-channel mean of `[c, h, w]` as `[c]`.
fn channel_mean(tape: &mut Tape, x: Var) -> Result<Var> {
    let (c, h, w) = tape.value(x).dims3()?;
    let flat = tape.reshape(x, &[c, h * w])?;
    tape.row_mean(flat)
}

/// Scale logits' softmax `[N_loc, |S|]` for the style locations on the
/// `p`-grid with stride `s`.
///
/// Each location is described by the global average of the content features
/// concatenated with the channel means of its style window.
pub fn scale_probs_var(
    tape: &mut Tape,
    scope: &mut ParamScope<'_>,
    content: Var,
    style: Var,
    p: usize,
    s: usize,
) -> Result<Var> {
    let (cc, _, _) = tape.value(content).dims3()?;
    let (c, _, _) = tape.value(style).dims3()?;
    let want = scope.arch().feature_channels();
    if cc != want || c != want {
        return Err(Error::shape(
            "scale predictor input channels",
            want,
            format!("{cc} / {c}"),
        ));
    }
    let windows = tape.unfold(style, p, s)?;
    let n = tape.value(windows).shape()[0];
    let per_channel = tape.reshape(windows, &[n * c, p * p])?;
    let local = tape.row_mean(per_channel)?;
    let local = tape.reshape(local, &[n, c])?;
    let global = channel_mean(tape, content)?;
    let global = tape.broadcast_rows(global, n)?;
    let x = tape.concat_cols(global, local)?;
    let mut hidden = x;
    for layer in ["prec.fc1", "prec.fc2"] {
        let w = scope.var(tape, &format!("{layer}.weight"))?;
        let b = scope.var(tape, &format!("{layer}.bias"))?;
        hidden = tape.linear(hidden, w, Some(b))?;
        hidden = tape.relu(hidden);
    }
    let w = scope.var(tape, "prec.out.weight")?;
    let b = scope.var(tape, "prec.out.bias")?;
    let logits = tape.linear(hidden, w, Some(b))?;
    tape.softmax(logits)
}

/// Style node features `[N_loc, c·p·p]`: the probability-weighted sum over
/// scales of resized windows. With [`Selection::Hard`] the weights are the
/// one-hot argmax of `probs`.
pub fn multiscale_nodes_var(
    tape: &mut Tape,
    style: Var,
    probs: Var,
    scales: &[usize],
    p: usize,
    s: usize,
    selection: Selection,
) -> Result<Var> {
    let (_, h, w) = tape.value(style).dims3()?;
    check_scales(scales, h, w)?;
    let (n, ns) = tape.value(probs).dims2()?;
    if ns != scales.len() {
        return Err(Error::shape("scale probabilities", scales.len(), ns));
    }
    let weights = match selection {
        Selection::Soft => probs,
        Selection::Hard => {
            let a = ScaleAssignment {
                probs: tape.value(probs).clone(),
                scale_set: scales.to_vec(),
            };
            tape.constant(a.hardened().probs)
        }
    };
    let mut total: Option<Var> = None;
    for (si, &scale) in scales.iter().enumerate() {
        let col = tape.column(weights, si)?;
        if selection == Selection::Hard && tape.value(col).data().iter().all(|&v| v == 0.0) {
            continue;
        }
        let patches = tape.window_patches(style, p, s, scale)?;
        if tape.value(patches).shape()[0] != n {
            return Err(Error::shape("style locations", n, tape.value(patches).shape()[0]));
        }
        let term = tape.mul_col(patches, col)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Contract("no scale carries weight".into()))
}

/// Scale distribution per style location from the trained predictor.
pub fn predict_scales(
    content: &FeatureMap,
    style: &FeatureMap,
    params: &ModelParameters,
    p: usize,
    s: usize,
) -> Result<ScaleAssignment> {
    let mut tape = Tape::new();
    let mut scope = ParamScope::frozen(params);
    let cv = tape.constant(content.tensor().clone());
    let sv = tape.constant(style.tensor().clone());
    let probs = scale_probs_var(&mut tape, &mut scope, cv, sv, p, s)?;
    Ok(ScaleAssignment {
        probs: tape.value(probs).clone(),
        scale_set: params.arch().scales.clone(),
    })
}

/// Style node features at the assignment's scales, resized to `p × p`.
pub fn extract_multiscale_style_nodes(
    style: &FeatureMap,
    assignment: &ScaleAssignment,
    p: usize,
    s: usize,
    selection: Selection,
) -> Result<Vec<NodeFeature>> {
    let (_, h, w) = style.dims();
    if p == 0 || s == 0 {
        return Err(Error::Parameter(format!(
            "patch side {p} and stride {s} must be positive"
        )));
    }
    if p > h || p > w {
        return Err(Error::PatchTooLarge {
            patch: p,
            height: h,
            width: w,
        });
    }
    let n = kernels::grid_len(h, p, s) * kernels::grid_len(w, p, s);
    if assignment.locations() != n {
        return Err(Error::shape("scale assignment locations", n, assignment.locations()));
    }
    let mut tape = Tape::new();
    let sv = tape.constant(style.tensor().clone());
    let pv = tape.constant(assignment.probs.clone());
    let nodes = multiscale_nodes_var(&mut tape, sv, pv, &assignment.scale_set, p, s, selection)?;
    let d = tape.value(nodes).shape()[1];
    Ok(tape
        .value(nodes)
        .data()
        .chunks_exact(d)
        .map(|r| NodeFeature(r.to_vec()))
        .collect())
}

/// Corner-aligned bilinear resize of a square patch.
pub fn resize_patch(patch: &Patch, target_side: usize) -> Result<Patch> {
    let (_, ph, pw) = patch.data.dims3()?;
    if ph != pw || ph == 0 {
        return Err(Error::shape(
            "resize_patch",
            "non-empty square patch",
            format!("{ph}x{pw}"),
        ));
    }
    if target_side == 0 {
        return Err(Error::Parameter("resize target side must be at least 1".into()));
    }
    let out = resize_square(&patch.data, target_side)?;
    Ok(Patch {
        data: out,
        origin: patch.origin,
        native_scale: patch.native_scale,
    })
}

fn resize_square(src: &Tensor, t: usize) -> Result<Tensor> {
    let (c, side, _) = src.dims3()?;
    let taps = kernels::resize_taps(0, side, t);
    let mut out = Vec::with_capacity(c * t * t);
    let x = src.data();
    for ch in 0..c {
        let plane = &x[ch * side * side..(ch + 1) * side * side];
        for &(y0, y1, fy) in &taps {
            for &(x0, x1, fx) in &taps {
                let top = (1.0 - fx) * plane[y0 * side + x0] + fx * plane[y0 * side + x1];
                let bot = (1.0 - fx) * plane[y1 * side + x0] + fx * plane[y1 * side + x1];
                out.push((1.0 - fy) * top + fy * bot);
            }
        }
    }
    Tensor::new(&[c, t, t], out)
}
