//! Heterogeneous stylization graph: style→content and content→content
//! nearest-neighbor edges.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::autodiff::Csr;
use crate::config::Metric;
use crate::error::{Error, Result};
use crate::kernels;
use crate::patch_ops::{NodeFeature, PatchCollection};

/// Lower bound of the NCC denominator, so flat patches compare as 0.
pub const NCC_EPS: f64 = 1e-12;

/// Cosine of the two vectors, clamped to `[-1, 1]`.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(kernels::dot(a, a));
    let nb = libm::sqrt(kernels::dot(b, b));
    ncc_with_norms(a, b, na, nb)
}

fn ncc_with_norms(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    (kernels::dot(a, b) / (na * nb).max(NCC_EPS)).clamp(-1.0, 1.0)
}

/// Negated Euclidean distance, so larger means more similar.
pub fn euclidean_similarity(a: &[f64], b: &[f64]) -> f64 {
    -libm::sqrt(kernels::squared_distance(a, b))
}

pub fn similarity(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Ncc => ncc(a, b),
        Metric::Euclidean => euclidean_similarity(a, b),
    }
}

/// Directed edge from neighbor `source` into center `target`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub similarity: f64,
}

/// `true` when `(sa, ja)` ranks strictly before `(sb, jb)`.
fn ranks_before(sa: f64, ja: usize, sb: f64, jb: usize) -> bool {
    sa > sb || (sa == sb && ja < jb)
}

/// The `k` most similar keys of every query, best first, ties to the lower
/// key index. Edges are grouped by query in query order.
pub fn knn_edges<F: AsRef<[f64]>, G: AsRef<[f64]>>(
    queries: &[F],
    keys: &[G],
    k: usize,
    metric: Metric,
    exclude_self: bool,
) -> Result<Vec<Edge>> {
    let usable = if exclude_self {
        keys.len().saturating_sub(1)
    } else {
        keys.len()
    };
    if k == 0 || k > usable {
        return Err(Error::NeighborCount { k, available: usable });
    }
    if let (Some(q), Some(key)) = (queries.first(), keys.first()) {
        let (dq, dk) = (q.as_ref().len(), key.as_ref().len());
        let bad_q = queries.iter().position(|v| v.as_ref().len() != dk);
        let bad_k = keys.iter().position(|v| v.as_ref().len() != dq);
        if let Some(i) = bad_q.or(bad_k) {
            return Err(Error::shape(
                "knn feature length",
                dk,
                format!("{} (node {i})", dq.max(dk)),
            ));
        }
    }
    let key_norms: Vec<f64> = match metric {
        Metric::Ncc => keys
            .iter()
            .map(|v| libm::sqrt(kernels::dot(v.as_ref(), v.as_ref())))
            .collect(),
        Metric::Euclidean => Vec::new(),
    };
    let mut edges = Vec::with_capacity(queries.len() * k);
    let mut top: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, q) in queries.iter().enumerate() {
        let q = q.as_ref();
        let qn = libm::sqrt(kernels::dot(q, q));
        top.clear();
        for (j, key) in keys.iter().enumerate() {
            if exclude_self && i == j {
                continue;
            }
            let s = match metric {
                Metric::Ncc => ncc_with_norms(q, key.as_ref(), qn, key_norms[j]),
                Metric::Euclidean => euclidean_similarity(q, key.as_ref()),
            };
            if top.len() == k {
                let (ws, wj) = top[k - 1];
                if !ranks_before(s, j, ws, wj) {
                    continue;
                }
                top.pop();
            }
            let pos = top
                .iter()
                .position(|&(ts, tj)| ranks_before(s, j, ts, tj))
                .unwrap_or(top.len());
            top.insert(pos, (s, j));
        }
        edges.extend(top.iter().map(|&(similarity, source)| Edge {
            source,
            target: i,
            similarity,
        }));
    }
    Ok(edges)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeteroStyleGraph {
    pub content_nodes: Vec<NodeFeature>,
    pub style_nodes: Vec<NodeFeature>,
    /// Style node `source` into content node `target`.
    pub inter_edges: Vec<Edge>,
    /// Content node `source` into content node `target`, never a self-loop.
    pub intra_edges: Vec<Edge>,
    pub k: usize,
}

fn neighborhoods(edges: &[Edge], centers: usize) -> Csr {
    let mut lists = alloc::vec![Vec::new(); centers];
    for e in edges {
        lists[e.target].push(e.source);
    }
    Csr::from_lists(&lists)
}

impl HeteroStyleGraph {
    pub fn content_count(&self) -> usize {
        self.content_nodes.len()
    }

    pub fn style_count(&self) -> usize {
        self.style_nodes.len()
    }

    /// Style neighbors of every content node, in rank order.
    pub fn inter_neighbors(&self) -> Csr {
        neighborhoods(&self.inter_edges, self.content_nodes.len())
    }

    /// Content neighbors of every content node, in rank order.
    pub fn intra_neighbors(&self) -> Csr {
        neighborhoods(&self.intra_edges, self.content_nodes.len())
    }

    /// Checks the degree and index invariants.
    pub fn validate(&self) -> Result<()> {
        let (nc, ns) = (self.content_nodes.len(), self.style_nodes.len());
        let mut inter = alloc::vec![0usize; nc];
        let mut intra = alloc::vec![0usize; nc];
        for e in &self.inter_edges {
            if e.target >= nc || e.source >= ns {
                return Err(Error::Contract(format!(
                    "inter edge {} -> {} out of range",
                    e.source, e.target
                )));
            }
            inter[e.target] += 1;
        }
        for e in &self.intra_edges {
            if e.target >= nc || e.source >= nc || e.source == e.target {
                return Err(Error::Contract(format!(
                    "invalid intra edge {} -> {}",
                    e.source, e.target
                )));
            }
            intra[e.target] += 1;
        }
        let want_intra = self.k.min(nc.saturating_sub(1));
        if let Some(i) = (0..nc).find(|&i| inter[i] != self.k || intra[i] != want_intra) {
            return Err(Error::Contract(format!(
                "content node {i} has {} inter / {} intra edges, expected {} / {want_intra}",
                inter[i], intra[i], self.k
            )));
        }
        Ok(())
    }

    /// Text edge list, one `inter j i sim` or `intra j i sim` line per edge.
    pub fn edge_dump(&self) -> String {
        let mut out = String::new();
        for (tag, edges) in [("inter", &self.inter_edges), ("intra", &self.intra_edges)] {
            for e in edges {
                let _ = writeln!(out, "{tag} {} {} {:.9}", e.source, e.target, e.similarity);
            }
        }
        out
    }
}

/// Links every content node to its `k` most similar style nodes and its
/// `min(k, N_c - 1)` most similar other content nodes.
pub fn build_graph(
    content: &PatchCollection,
    style_nodes: Vec<NodeFeature>,
    k: usize,
    metric: Metric,
) -> Result<HeteroStyleGraph> {
    build_graph_from_nodes(content.node_features(), style_nodes, k, metric)
}

pub fn build_graph_from_nodes(
    content_nodes: Vec<NodeFeature>,
    style_nodes: Vec<NodeFeature>,
    k: usize,
    metric: Metric,
) -> Result<HeteroStyleGraph> {
    if content_nodes.len() < 2 {
        return Err(Error::NeighborCount {
            k,
            available: content_nodes.len().saturating_sub(1),
        });
    }
    let inter_edges = knn_edges(&content_nodes, &style_nodes, k, metric, false)?;
    let intra_k = k.min(content_nodes.len() - 1);
    let intra_edges = knn_edges(&content_nodes, &content_nodes, intra_k, metric, true)?;
    Ok(HeteroStyleGraph {
        content_nodes,
        style_nodes,
        inter_edges,
        intra_edges,
        k,
    })
}
