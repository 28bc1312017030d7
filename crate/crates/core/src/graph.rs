//! Layout graph construction: alignment, proximity and hierarchy relations
//! between page elements, plus node and edge featurization.

use std::path::Path;

use layoutgen_numeric::Tensor;
use serde::{Deserialize, Serialize};

use crate::layout::{canonical_reading_order, ElementType, LayoutDocument, LayoutElement};
use crate::{io, Error, Result};

/// type one-hot (8) + bbox (4) + width, height (2) + font size (1) + order fraction (1)
pub const NODE_FEATURES: usize = 16;
/// kind one-hot (8) + center offset (2)
pub const EDGE_FEATURES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    AlignLeft,
    AlignRight,
    AlignCenterX,
    AlignTop,
    AlignBottom,
    AlignCenterY,
    Proximity,
    Hierarchy,
}

impl RelationKind {
    pub const COUNT: usize = 8;

    pub const ALL: [RelationKind; 8] = [
        RelationKind::AlignLeft,
        RelationKind::AlignRight,
        RelationKind::AlignCenterX,
        RelationKind::AlignTop,
        RelationKind::AlignBottom,
        RelationKind::AlignCenterY,
        RelationKind::Proximity,
        RelationKind::Hierarchy,
    ];

    pub const ALIGNMENTS: [RelationKind; 6] = [
        RelationKind::AlignLeft,
        RelationKind::AlignRight,
        RelationKind::AlignCenterX,
        RelationKind::AlignTop,
        RelationKind::AlignBottom,
        RelationKind::AlignCenterY,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_directed(self) -> bool {
        self == RelationKind::Hierarchy
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::AlignLeft => "align_left",
            RelationKind::AlignRight => "align_right",
            RelationKind::AlignCenterX => "align_center_x",
            RelationKind::AlignTop => "align_top",
            RelationKind::AlignBottom => "align_bottom",
            RelationKind::AlignCenterY => "align_center_y",
            RelationKind::Proximity => "proximity",
            RelationKind::Hierarchy => "hierarchy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: RelationKind,
    /// Center of `dst` minus center of `src`.
    pub offset: [f64; 2],
}

impl Edge {
    pub fn is_self_loop(&self) -> bool {
        self.src == self.dst
    }

    pub fn features(&self) -> [f64; EDGE_FEATURES] {
        let mut f = [0.0; EDGE_FEATURES];
        f[self.kind.index()] = 1.0;
        f[8] = self.offset[0];
        f[9] = self.offset[1];
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub tau_align: f64,
    pub tau_prox: f64,
    pub k_nn: usize,
    pub tau_cap: f64,
    pub self_loop: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            tau_align: 0.01,
            tau_prox: 0.05,
            k_nn: 4,
            tau_cap: 0.10,
            self_loop: true,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_align", self.tau_align),
            ("tau_prox", self.tau_prox),
            ("tau_cap", self.tau_cap),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("graph.{name} must be > 0, got {v}")));
            }
        }
        if self.k_nn == 0 {
            return Err(Error::Config("graph.k_nn must be at least 1".into()));
        }
        Ok(())
    }
}

/// One message direction derived from an [`Edge`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Message {
    pub sender: usize,
    pub receiver: usize,
    /// Edge features with the offset oriented receiver minus sender.
    pub features: [f64; EDGE_FEATURES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutGraph {
    pub doc_id: String,
    /// `n × NODE_FEATURES`, row `i` is the `i`-th element in reading order.
    pub node_features: Tensor,
    pub edges: Vec<Edge>,
    pub edge_features: Vec<[f64; EDGE_FEATURES]>,
    /// `order[i]` is the document element index of node `i`.
    pub order: Vec<usize>,
}

impl LayoutGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn node_type(&self, i: usize) -> Option<ElementType> {
        let row = self.node_features.row(i);
        (0..ElementType::COUNT)
            .find(|&k| row[k] == 1.0)
            .and_then(ElementType::from_index)
    }

    pub fn node_bbox(&self, i: usize) -> [f64; 4] {
        let row = self.node_features.row(i);
        [row[8], row[9], row[10], row[11]]
    }

    /// Directed messages: undirected edges yield both directions, hierarchy
    /// edges only `src → dst`, self-loops a single message.
    pub fn messages(&self) -> Vec<Message> {
        let mut out = Vec::with_capacity(2 * self.edges.len());
        for (e, f) in self.edges.iter().zip(&self.edge_features) {
            out.push(Message {
                sender: e.src,
                receiver: e.dst,
                features: *f,
            });
            if !e.kind.is_directed() && !e.is_self_loop() {
                let mut rev = *f;
                rev[8] = -rev[8];
                rev[9] = -rev[9];
                out.push(Message {
                    sender: e.dst,
                    receiver: e.src,
                    features: rev,
                });
            }
        }
        out
    }

    /// Whether any non-self-loop edge joins `a` and `b`, in either direction.
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        let n = self.num_nodes();
        let mut adj = vec![vec![false; n]; n];
        for e in self.edges.iter().filter(|e| !e.is_self_loop()) {
            adj[e.src][e.dst] = true;
            adj[e.dst][e.src] = true;
        }
        adj
    }
}

pub fn detect_alignment(a: &LayoutElement, b: &LayoutElement, cfg: &GraphConfig) -> Vec<RelationKind> {
    let (p, q) = (&a.bbox, &b.bbox);
    let pairs = [
        (RelationKind::AlignLeft, p.x0, q.x0),
        (RelationKind::AlignRight, p.x1, q.x1),
        (RelationKind::AlignCenterX, p.cx(), q.cx()),
        (RelationKind::AlignTop, p.y0, q.y0),
        (RelationKind::AlignBottom, p.y1, q.y1),
        (RelationKind::AlignCenterY, p.cy(), q.cy()),
    ];
    pairs
        .into_iter()
        .filter(|(_, u, v)| (u - v).abs() <= cfg.tau_align)
        .map(|(k, _, _)| k)
        .collect()
}

pub fn detect_proximity(a: &LayoutElement, b: &LayoutElement, cfg: &GraphConfig) -> bool {
    a.bbox.gap_distance(&b.bbox) <= cfg.tau_prox
}

fn offset(doc: &LayoutDocument, order: &[usize], src: usize, dst: usize) -> [f64; 2] {
    let (s, d) = (&doc.elements[order[src]].bbox, &doc.elements[order[dst]].bbox);
    [d.cx() - s.cx(), d.cy() - s.cy()]
}

/// Directed hierarchy edges over node indices (positions in `order`).
///
/// A title or heading points at its reading-order successor; a caption is
/// pointed at by the nearest image within `tau_cap`.
pub fn infer_hierarchy(doc: &LayoutDocument, order: &[usize], cfg: &GraphConfig) -> Vec<Edge> {
    let node = |k: usize| &doc.elements[order[k]];
    let n = order.len();
    let mut edges = Vec::new();
    for k in 0..n.saturating_sub(1) {
        if node(k).element_type.is_heading_like() {
            edges.push(Edge {
                src: k,
                dst: k + 1,
                kind: RelationKind::Hierarchy,
                offset: offset(doc, order, k, k + 1),
            });
        }
    }
    for c in (0..n).filter(|&k| node(k).element_type == ElementType::Caption) {
        let nearest = (0..n)
            .filter(|&k| node(k).element_type == ElementType::Image)
            .map(|k| (node(k).bbox.gap_distance(&node(c).bbox), k))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((dist, img)) = nearest {
            if dist <= cfg.tau_cap {
                edges.push(Edge {
                    src: img,
                    dst: c,
                    kind: RelationKind::Hierarchy,
                    offset: offset(doc, order, img, c),
                });
            }
        }
    }
    edges
}

pub fn node_features(doc: &LayoutDocument, order: &[usize]) -> Tensor {
    let n = order.len();
    let mut data = Vec::with_capacity(n * NODE_FEATURES);
    for (i, &e) in order.iter().enumerate() {
        let el = &doc.elements[e];
        let mut row = [0.0; NODE_FEATURES];
        row[el.element_type.index()] = 1.0;
        row[8..12].copy_from_slice(&el.bbox.to_array());
        row[12] = el.bbox.width();
        row[13] = el.bbox.height();
        row[14] = el.font_size.unwrap_or(0.0);
        row[15] = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        data.extend_from_slice(&row);
    }
    Tensor::new(vec![n, NODE_FEATURES], data).expect("non-empty document")
}

pub fn build_graph(doc: &LayoutDocument, cfg: &GraphConfig) -> Result<LayoutGraph> {
    if doc.elements.is_empty() {
        return Err(Error::EmptyDocument(doc.id.clone()));
    }
    let order = canonical_reading_order(doc);
    let n = order.len();
    let node = |k: usize| &doc.elements[order[k]];

    // Proximity candidates, pruned to each node's k nearest; a pair survives
    // if either endpoint keeps it.
    let mut keep_prox = vec![vec![false; n]; n];
    for i in 0..n {
        let mut cands: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i && detect_proximity(node(i), node(j), cfg))
            .map(|j| (node(i).bbox.gap_distance(&node(j).bbox), j))
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in cands.iter().take(cfg.k_nn) {
            keep_prox[i][j] = true;
            keep_prox[j][i] = true;
        }
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for kind in detect_alignment(node(i), node(j), cfg) {
                edges.push(Edge {
                    src: i,
                    dst: j,
                    kind,
                    offset: offset(doc, &order, i, j),
                });
            }
            if keep_prox[i][j] {
                edges.push(Edge {
                    src: i,
                    dst: j,
                    kind: RelationKind::Proximity,
                    offset: offset(doc, &order, i, j),
                });
            }
        }
    }
    edges.extend(infer_hierarchy(doc, &order, cfg));
    if cfg.self_loop {
        edges.extend((0..n).map(|i| Edge {
            src: i,
            dst: i,
            kind: RelationKind::Proximity,
            offset: [0.0, 0.0],
        }));
    }
    let edge_features = edges.iter().map(Edge::features).collect();
    Ok(LayoutGraph {
        doc_id: doc.id.clone(),
        node_features: node_features(doc, &order),
        edges,
        edge_features,
        order,
    })
}

/// Names of every violated [`LayoutGraph`] invariant; empty when the graph is sound.
pub fn check_graph(g: &LayoutGraph) -> Vec<&'static str> {
    let mut v = Vec::new();
    let n = g.num_nodes();
    if g.node_features.cols() != NODE_FEATURES {
        v.push("node feature dimension");
    }
    if !g.node_features.all_finite() {
        v.push("non-finite node feature");
    }
    let mut sorted = g.order.clone();
    sorted.sort_unstable();
    if sorted != (0..n).collect::<Vec<_>>() {
        v.push("order is not a permutation");
    }
    if g.edge_features.len() != g.edges.len() {
        v.push("edge feature count");
    }
    for (e, f) in g.edges.iter().zip(&g.edge_features) {
        if e.src >= n || e.dst >= n {
            v.push("endpoint out of range");
        }
        if !e.kind.is_directed() && e.src > e.dst {
            v.push("canonical endpoint order");
        }
        if e.is_self_loop() && (e.kind != RelationKind::Proximity || e.offset != [0.0, 0.0]) {
            v.push("self-loop kind");
        }
        if *f != e.features() {
            v.push("edge feature mismatch");
        }
    }
    v.dedup();
    v
}

#[derive(Serialize)]
struct DumpEdge {
    src: usize,
    dst: usize,
    kind: &'static str,
    offset: [f64; 2],
}

#[derive(Serialize)]
struct GraphDump<'a> {
    doc_id: &'a str,
    node_features: Vec<&'a [f64]>,
    edges: Vec<DumpEdge>,
    order: &'a [usize],
}

/// Debug dump: one JSON object per graph per line.
pub fn graphs_to_jsonl(graphs: &[LayoutGraph]) -> String {
    let mut out = String::new();
    for g in graphs {
        let dump = GraphDump {
            doc_id: &g.doc_id,
            node_features: (0..g.num_nodes()).map(|i| g.node_features.row(i)).collect(),
            edges: g
                .edges
                .iter()
                .map(|e| DumpEdge {
                    src: e.src,
                    dst: e.dst,
                    kind: e.kind.name(),
                    offset: e.offset,
                })
                .collect(),
            order: &g.order,
        };
        out.push_str(&serde_json::to_string(&dump).expect("graph dump serializes"));
        out.push('\n');
    }
    out
}

pub fn write_graph_dump(graphs: &[LayoutGraph], path: &Path) -> Result<()> {
    io::write_atomic(path, graphs_to_jsonl(graphs).as_bytes())
}
