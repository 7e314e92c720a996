//! Similarity-pyramid graph construction.
//!
//! One node per same-scale window pair `(l, i, j)`, ordered by ascending `l`,
//! then query window `i`, then gallery window `j`. Node 0 is the global pair
//! when the first scale is `1x1`. Its vector is
//! `normalize(P · (x_l^i - y_l^j)²)`. Edges carry softmax-normalized weights
//! `exp((T_out·v_t)ᵀ(T_in·v_s))` over the enabled sources `s` of each target
//! `t`, the target itself included.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::pyramid::{PyramidConfig, PyramidFeatures};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard of the similarity-vector normalization; a zero difference maps to
/// the zero vector.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeIndex {
    /// 0-based scale.
    pub scale: usize,
    pub query: usize,
    pub gallery: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityNode<T> {
    pub index: NodeIndex,
    pub vector: Vec<T>,
}

/// Node enumeration for one pyramid config.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphLayout {
    nodes: Vec<NodeIndex>,
    query_rows: Vec<usize>,
    gallery_rows: Vec<usize>,
}

impl GraphLayout {
    pub fn new(cfg: &PyramidConfig) -> Self {
        let offsets = cfg.offsets();
        let mut nodes = Vec::with_capacity(cfg.node_count());
        let mut query_rows = Vec::with_capacity(cfg.node_count());
        let mut gallery_rows = Vec::with_capacity(cfg.node_count());
        for (l, s) in cfg.scales().iter().enumerate() {
            for i in 0..s.windows() {
                for j in 0..s.windows() {
                    nodes.push(NodeIndex {
                        scale: l,
                        query: i,
                        gallery: j,
                    });
                    query_rows.push(offsets[l] + i);
                    gallery_rows.push(offsets[l] + j);
                }
            }
        }
        GraphLayout {
            nodes,
            query_rows,
            gallery_rows,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeIndex] {
        &self.nodes
    }
}

/// Which `(target, source)` pairs take part in each softmax row.
///
/// A pair is enabled when it is a self-loop (`self_loops`), a same-scale pair
/// (`intra_scale`), a cross-scale pair (`inter_scale`), or a cross-scale pair
/// touching node 0 (`global_links`). `source_scales`, when set, further
/// restricts non-self sources to the listed 0-based scales.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeMaskConfig {
    pub intra_scale: bool,
    pub inter_scale: bool,
    pub global_links: bool,
    pub self_loops: bool,
    pub source_scales: Option<Vec<usize>>,
}

impl Default for EdgeMaskConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl EdgeMaskConfig {
    pub fn full() -> Self {
        EdgeMaskConfig {
            intra_scale: true,
            inter_scale: true,
            global_links: false,
            self_loops: true,
            source_scales: None,
        }
    }

    /// Same-scale edges only.
    pub fn intra_only() -> Self {
        EdgeMaskConfig {
            inter_scale: false,
            ..Self::full()
        }
    }

    /// Cross-scale edges plus self-loops.
    pub fn inter_only() -> Self {
        EdgeMaskConfig {
            intra_scale: false,
            ..Self::full()
        }
    }

    pub fn with_global_links(mut self, on: bool) -> Self {
        self.global_links = on;
        self
    }

    pub fn enabled(&self, layout: &GraphLayout, target: usize, source: usize) -> bool {
        if target == source {
            return self.self_loops;
        }
        let (ts, ss) = (layout.nodes[target].scale, layout.nodes[source].scale);
        if let Some(allowed) = &self.source_scales {
            if !allowed.contains(&ss) {
                return false;
            }
        }
        if ts == ss {
            self.intra_scale
        } else {
            self.inter_scale || (self.global_links && (target == 0 || source == 0))
        }
    }

    /// Dense `N×N` flags; errors if some row has no enabled source.
    pub fn matrix(&self, layout: &GraphLayout) -> Result<Vec<bool>> {
        let n = layout.len();
        let mut out = Vec::with_capacity(n * n);
        for t in 0..n {
            let start = out.len();
            out.extend((0..n).map(|s| self.enabled(layout, t, s)));
            if !out[start..].iter().any(|&e| e) {
                return Err(Error::Config(format!(
                    "edge mask leaves node {t} without any source"
                )));
            }
        }
        Ok(out)
    }
}

/// Records `normalize(P · (q_i - g_j)²)` for every node; returns `[N, D]`.
pub fn similarity_nodes_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    query: Var,
    gallery: Var,
    projection: Var,
    layout: &GraphLayout,
) -> Result<Var> {
    let q = tape.gather_rows(query, &layout.query_rows)?;
    let g = tape.gather_rows(gallery, &layout.gallery_rows)?;
    let sq = tape.sq_diff(q, g)?;
    let projected = tape.matmul_t(sq, projection)?;
    Ok(tape.l2_normalize_rows(projected, T::lit(NORMALIZE_EPS)))
}

/// Records the `[N, N]` row-stochastic edge-weight matrix for `nodes`.
pub fn edge_weights_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    nodes: Var,
    t_in: Var,
    t_out: Var,
    mask: &[bool],
) -> Result<Var> {
    let outgoing = tape.matmul_t(nodes, t_out)?;
    let incoming = tape.matmul_t(nodes, t_in)?;
    let logits = tape.matmul_t(outgoing, incoming)?;
    tape.softmax_rows(logits, Some(mask))
}

/// Similarity vector of one window pair under projection `P` (`[D, C]`).
pub fn similarity_vector<T: Scalar>(x: &[T], y: &[T], projection: &Tensor<T>) -> Result<Vec<T>> {
    if x.len() != y.len() {
        return Err(Error::dimension("similarity_vector", &[x.len()], &[y.len()]));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::matrix(1, x.len(), x.to_vec())?);
    let yv = tape.leaf(Tensor::matrix(1, y.len(), y.to_vec())?);
    let p = tape.leaf(projection.clone());
    let sq = tape.sq_diff(xv, yv)?;
    let projected = tape.matmul_t(sq, p)?;
    let out = tape.l2_normalize_rows(projected, T::lit(NORMALIZE_EPS));
    Ok(tape.value(out).data().to_vec())
}

/// All same-scale pair nodes of a query/gallery pyramid pair.
pub fn build_nodes<T: Scalar>(
    query: &PyramidFeatures<T>,
    gallery: &PyramidFeatures<T>,
    projection: &Tensor<T>,
) -> Result<Vec<SimilarityNode<T>>> {
    if query.config() != gallery.config() {
        return Err(Error::Logic(format!(
            "query pyramid {} differs from gallery pyramid {}",
            query.config(),
            gallery.config()
        )));
    }
    let layout = GraphLayout::new(query.config());
    let mut tape = Tape::new();
    let q = tape.leaf(query.matrix().clone());
    let g = tape.leaf(gallery.matrix().clone());
    let p = tape.leaf(projection.clone());
    let v = similarity_nodes_on_tape(&mut tape, q, g, p, &layout)?;
    let m = tape.value(v);
    Ok(layout
        .nodes()
        .iter()
        .enumerate()
        .map(|(k, &index)| SimilarityNode {
            index,
            vector: m.row(k).to_vec(),
        })
        .collect())
}

/// Row-stochastic weights plus the mask that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeights<T> {
    pub matrix: Tensor<T>,
    pub mask: Vec<bool>,
}

/// Edge weights for an `[N, d]` node-vector matrix.
pub fn edge_weights<T: Scalar>(
    nodes: &Tensor<T>,
    t_in: &Tensor<T>,
    t_out: &Tensor<T>,
    layout: &GraphLayout,
    mask: &EdgeMaskConfig,
) -> Result<EdgeWeights<T>> {
    if nodes.rows() != layout.len() {
        return Err(Error::dimension("edge_weights", nodes.shape(), &[layout.len()]));
    }
    if t_in.shape() != t_out.shape() {
        return Err(Error::dimension("edge_weights", t_in.shape(), t_out.shape()));
    }
    let flags = mask.matrix(layout)?;
    let mut tape = Tape::new();
    let v = tape.leaf(nodes.clone());
    let ti = tape.leaf(t_in.clone());
    let to = tape.leaf(t_out.clone());
    let w = edge_weights_on_tape(&mut tape, v, ti, to, &flags)?;
    Ok(EdgeWeights {
        matrix: tape.value(w).clone(),
        mask: flags,
    })
}
