//! Sliding-window patch extraction, patch/vector conversion and
//! overlap-averaged recomposition.
//!
//! Node features flatten a `(c, p, p)` patch channel-major, then by row, then
//! by column. Patch index `i` of a collection has origin
//! `((i / W_p) * s, (i % W_p) * s)` with `W_p = (w - p) / s + 1`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{FeatureMap, ShapeFmt, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// `(c, p, p)` values.
    pub data: Tensor,
    /// `(row, col)` of the top-left corner in the source map.
    pub origin: (usize, usize),
    /// Side length before any resizing.
    pub native_scale: usize,
}

impl Patch {
    pub fn side(&self) -> usize {
        self.data.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchCollection {
    pub patches: Vec<Patch>,
    pub source_shape: (usize, usize, usize),
    pub stride: usize,
    pub patch_side: usize,
}

impl PatchCollection {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Patch-grid dimensions `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.source_shape;
        (
            kernels::grid_len(h, self.patch_side, self.stride),
            kernels::grid_len(w, self.patch_side, self.stride),
        )
    }

    pub fn node_features(&self) -> Vec<NodeFeature> {
        self.patches.iter().map(patch2feat).collect()
    }
}

/// Flattened patch used as a graph vertex feature.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeature(pub Vec<f64>);

impl NodeFeature {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for NodeFeature {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Number of patches uniform extraction yields.
pub fn patch_count(h: usize, w: usize, p: usize, s: usize) -> usize {
    kernels::grid_len(h, p, s) * kernels::grid_len(w, p, s)
}

pub fn extract_patches(features: &FeatureMap, p: usize, s: usize) -> Result<PatchCollection> {
    let (c, h, w) = features.dims();
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
    let rows = kernels::unfold(features.tensor().data(), (c, h, w), p, s);
    let gw = kernels::grid_len(w, p, s);
    let d = c * p * p;
    let patches = rows
        .chunks_exact(d)
        .enumerate()
        .map(|(i, row)| Patch {
            data: Tensor::new(&[c, p, p], row.to_vec()).expect("patch size"),
            origin: ((i / gw) * s, (i % gw) * s),
            native_scale: p,
        })
        .collect();
    Ok(PatchCollection {
        patches,
        source_shape: (c, h, w),
        stride: s,
        patch_side: p,
    })
}

pub fn patch2feat(patch: &Patch) -> NodeFeature {
    NodeFeature(patch.data.data().to_vec())
}

/// Inverse of [`patch2feat`]; the origin is unknown and set to `(0, 0)`.
pub fn feat2patch(feature: &NodeFeature, (c, p, q): (usize, usize, usize)) -> Result<Patch> {
    if p != q {
        return Err(Error::shape("feat2patch", "square patch", ShapeFmt(&[c, p, q])));
    }
    if feature.len() != c * p * p {
        return Err(Error::shape(
            "feat2patch",
            format!("{} values for {}", c * p * p, ShapeFmt(&[c, p, p])),
            feature.len(),
        ));
    }
    Ok(Patch {
        data: Tensor::new(&[c, p, p], feature.0.clone())?,
        origin: (0, 0),
        native_scale: p,
    })
}

/// Reassembles a feature map; every position becomes the mean of all patch
/// values that cover it.
pub fn compose_overlapping(patches: &PatchCollection) -> Result<FeatureMap> {
    let (c, h, w) = patches.source_shape;
    let (p, s) = (patches.patch_side, patches.stride);
    if p == 0 || s == 0 || p > h || p > w {
        return Err(Error::Composition(format!(
            "patch side {p} / stride {s} invalid for a {h}x{w} source"
        )));
    }
    let expected = patch_count(h, w, p, s);
    if patches.len() != expected {
        return Err(Error::Composition(format!(
            "{} patches given, the grid needs {expected}",
            patches.len()
        )));
    }
    let gw = kernels::grid_len(w, p, s);
    let d = c * p * p;
    let mut rows = Vec::with_capacity(expected * d);
    for (i, patch) in patches.patches.iter().enumerate() {
        if patch.data.shape() != [c, p, p] {
            return Err(Error::Composition(format!(
                "patch {i} has shape {}, expected {}",
                ShapeFmt(patch.data.shape()),
                ShapeFmt(&[c, p, p])
            )));
        }
        let origin = ((i / gw) * s, (i % gw) * s);
        if patch.origin != origin {
            return Err(Error::Composition(format!(
                "patch {i} has origin {:?}, row-major order requires {origin:?}",
                patch.origin
            )));
        }
        rows.extend_from_slice(patch.data.data());
    }
    let data = kernels::fold_mean(&rows, (c, h, w), p, s);
    FeatureMap::new(Tensor::new(&[c, h, w], data)?, "composed")
}
