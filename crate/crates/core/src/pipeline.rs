//! Full stylization pass: encode, build and run the patch graph, compose,
//! refine, decode.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Csr, Tape, Var};
use crate::config::PipelineConfig;
use crate::deformable_scale::{multiscale_nodes_var, scale_probs_var, ScaleAssignment};
use crate::error::{Error, Result, StageExt};
use crate::feature_codec::{decode_var, encode_var};
use crate::global_refine::adain_var;
use crate::graph_builder::{knn_edges, Edge};
use crate::kernels;
use crate::message_passing::stage_pass_var;
use crate::params::{ModelParameters, ParamScope};
use crate::tensor::{ImageTensor, Tensor};

/// Tape handles and graph of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[3, H, W]` in `[0, 1]`.
    pub output: Var,
    pub inter_edges: Vec<Edge>,
    pub intra_edges: Vec<Edge>,
    /// `None` when deformable scales are disabled.
    pub scales: Option<ScaleAssignment>,
}

#[derive(Clone, Debug)]
pub struct Stylized {
    pub image: ImageTensor,
    pub inter_edges: Vec<Edge>,
    pub intra_edges: Vec<Edge>,
    pub scales: Option<ScaleAssignment>,
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    let d = t.shape()[1];
    t.data().chunks_exact(d).collect()
}

fn csr(edges: &[Edge], centers: usize) -> Csr {
    let mut lists = vec![Vec::new(); centers];
    for e in edges {
        lists[e.target].push(e.source);
    }
    Csr::from_lists(&lists)
}

/// Stylization on a tape. Parameters come from `scope`, so the same code
/// serves inference (frozen) and training (trainable, soft selection).
pub fn forward_var(
    tape: &mut Tape,
    scope: &mut ParamScope<'_>,
    content: Var,
    style: Var,
    cfg: &PipelineConfig,
) -> Result<ForwardTrace> {
    cfg.validate()?;
    let arch = scope.arch();
    let (p, s) = (cfg.patch_side, cfg.stride);

    let fc = encode_var(tape, scope, content).stage("encode content")?;
    let fs = encode_var(tape, scope, style).stage("encode style")?;
    let (c, h, w) = tape.value(fc).dims3()?;

    let xc = tape.unfold(fc, p, s).stage("content patches")?;
    let (xs, scales) = if cfg.deformable_enabled {
        let probs = scale_probs_var(tape, scope, fc, fs, p, s).stage("scale prediction")?;
        let nodes = multiscale_nodes_var(tape, fs, probs, &arch.scales, p, s, cfg.selection)
            .stage("multi-scale style nodes")?;
        let assignment = ScaleAssignment {
            probs: tape.value(probs).clone(),
            scale_set: arch.scales.clone(),
        };
        (nodes, Some(assignment))
    } else {
        (tape.unfold(fs, p, s).stage("style patches")?, None)
    };

    let nc = tape.value(xc).shape()[0];
    let (inter_edges, intra_edges) = {
        let content_rows = rows(tape.value(xc));
        let style_rows = rows(tape.value(xs));
        let inter = knn_edges(&content_rows, &style_rows, cfg.k, cfg.metric, false).stage("graph construction")?;
        let intra = if cfg.intra_enabled {
            if nc < 2 {
                return Err(Error::NeighborCount { k: cfg.k, available: 0 }).stage("graph construction");
            }
            knn_edges(&content_rows, &content_rows, cfg.k.min(nc - 1), cfg.metric, true).stage("graph construction")?
        } else {
            Vec::new()
        };
        (inter, intra)
    };

    let slope = arch.negative_slope;
    let mut h1 = {
        let mut bind = |t: &mut Tape, n: &str| scope.var(t, &format!("gnn.s2c.{n}"));
        stage_pass_var(
            tape,
            &mut bind,
            cfg.aggregator,
            xc,
            xs,
            &csr(&inter_edges, nc),
            c,
            slope,
        )
        .stage("style-to-content message passing")?
    };
    if cfg.intra_enabled {
        let mut bind = |t: &mut Tape, n: &str| scope.var(t, &format!("gnn.c2c.{n}"));
        h1 = stage_pass_var(
            tape,
            &mut bind,
            cfg.aggregator,
            h1,
            h1,
            &csr(&intra_edges, nc),
            c,
            slope,
        )
        .stage("content-to-content message passing")?;
    }

    let mut fo = tape.fold_mean(h1, (c, h, w), p, s).stage("compose patches")?;
    let uncovered: Vec<f64> = kernels::coverage(h, w, p, s)
        .into_iter()
        .map(|n| if n == 0.0 { 1.0 } else { 0.0 })
        .collect();
    if uncovered.iter().any(|&v| v > 0.0) {
        // Border positions no patch reaches keep their encoded features.
        let mask: Vec<f64> = (0..c).flat_map(|_| uncovered.iter().copied()).collect();
        let mask = tape.constant(Tensor::new(&[c, h, w], mask)?);
        let keep = tape.mul(mask, fc)?;
        fo = tape.add(fo, keep)?;
    }
    if cfg.refine_enabled {
        fo = adain_var(tape, fo, fs).stage("global refinement")?;
    }
    let output = decode_var(tape, scope, fo).stage("decode")?;
    Ok(ForwardTrace {
        output,
        inter_edges,
        intra_edges,
        scales,
    })
}

/// Stylizes `content` with `style` under frozen parameters.
pub fn stylize(
    content: &ImageTensor,
    style: &ImageTensor,
    params: &ModelParameters,
    cfg: &PipelineConfig,
) -> Result<Stylized> {
    let mut tape = Tape::new();
    let mut scope = ParamScope::frozen(params);
    let cv = tape.constant(content.tensor().clone());
    let sv = tape.constant(style.tensor().clone());
    let trace = forward_var(&mut tape, &mut scope, cv, sv, cfg)?;
    let image = ImageTensor::clamped(tape.value(trace.output).clone())?;
    Ok(Stylized {
        image,
        inter_edges: trace.inter_edges,
        intra_edges: trace.intra_edges,
        scales: trace.scales,
    })
}

/// Stylized image only; see [`stylize`].
pub fn forward(
    content: &ImageTensor,
    style: &ImageTensor,
    params: &ModelParameters,
    cfg: &PipelineConfig,
) -> Result<ImageTensor> {
    stylize(content, style, params, cfg).map(|s| s.image)
}
