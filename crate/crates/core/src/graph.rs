//! Undirected spatial graphs built by distance thresholding.
//!
//! Nodes `i != j` are adjacent iff their Euclidean distance is strictly below
//! the threshold `k`. Self-loops are never created. Edges are stored once as
//! `(i, j)` with `i < j`, sorted lexicographically, each with a weight in
//! `[0, 1]` (1.0 at construction).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Phenotype;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    pub coords: Vec<[f64; 2]>,
    pub feature_dim: usize,
    /// Row-major `n x feature_dim`.
    pub features: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
    pub edge_weights: Vec<f64>,
    pub labels: Option<Vec<Phenotype>>,
}

impl SpatialGraph {
    pub fn empty(feature_dim: usize) -> Self {
        SpatialGraph {
            coords: Vec::new(),
            feature_dim,
            features: Vec::new(),
            edges: Vec::new(),
            edge_weights: Vec::new(),
            labels: None,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_features(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> Option<Phenotype> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn with_labels(mut self, labels: Vec<Phenotype>) -> Result<Self> {
        if labels.len() != self.n_nodes() {
            return Err(Error::Shape(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.n_nodes()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes()];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes()];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    /// Replace the edge set with the one implied by threshold `k` over the
    /// current coordinates. Weights reset to 1.
    pub fn rethreshold(&mut self, k: f64) -> Result<()> {
        self.edges = radius_edges(&self.coords, k)?;
        self.edge_weights = vec![1.0; self.edges.len()];
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        let n = self.n_nodes();
        if self.features.len() != n * self.feature_dim {
            return Err(Error::Shape(format!(
                "feature buffer has {} values for {n} nodes of dim {}",
                self.features.len(),
                self.feature_dim
            )));
        }
        if self.edge_weights.len() != self.edges.len() {
            return Err(Error::Shape("edge weight count differs from edge count".into()));
        }
        for (&(i, j), &w) in self.edges.iter().zip(&self.edge_weights) {
            if i >= j || j >= n {
                return Err(Error::Validation(format!("invalid edge ({i}, {j}) for {n} nodes")));
            }
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Validation(format!("edge weight {w} outside [0,1]")));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::Shape("label count differs from node count".into()));
            }
        }
        Ok(())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// All pairs `i < j` with distance strictly below `k`, found through a uniform
/// bucket grid of cell size `k`.
pub fn radius_edges(points: &[[f64; 2]], k: f64) -> Result<Vec<(usize, usize)>> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::Validation(format!("threshold must be positive and finite, got {k}")));
    }
    if let Some(i) = points.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Validation(format!("non-finite coordinate at node {i}")));
    }
    let key = |p: [f64; 2]| ((p[0] / k).floor() as i64, (p[1] / k).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, &p) in points.iter().enumerate() {
        buckets.entry(key(p)).or_default().push(i);
    }
    let mut edges = Vec::new();
    for (i, &p) in points.iter().enumerate() {
        let (bx, by) = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = buckets.get(&(bx + dx, by + dy)) {
                    for &j in bucket {
                        if j > i && dist(p, points[j]) < k {
                            edges.push((i, j));
                        }
                    }
                }
            }
        }
    }
    edges.sort_unstable();
    Ok(edges)
}

/// Build a graph over `points` with node features `features` (row-major,
/// `points.len() x feature_dim`) and adjacency by distance threshold `k`.
pub fn build_graph(points: &[[f64; 2]], features: Vec<f64>, feature_dim: usize, k: f64) -> Result<SpatialGraph> {
    if features.len() != points.len() * feature_dim {
        return Err(Error::Shape(format!(
            "{} feature values for {} points of dim {feature_dim}",
            features.len(),
            points.len()
        )));
    }
    let edges = radius_edges(points, k)?;
    let edge_weights = vec![1.0; edges.len()];
    Ok(SpatialGraph {
        coords: points.to_vec(),
        feature_dim,
        features,
        edges,
        edge_weights,
        labels: None,
    })
}

/// Subgraph over the nodes selected by `keep`, in original order.
pub fn induced_subgraph(g: &SpatialGraph, keep: impl Fn(usize) -> bool) -> SpatialGraph {
    let n = g.n_nodes();
    let mut remap = vec![usize::MAX; n];
    let mut coords = Vec::new();
    let mut features = Vec::new();
    let mut labels = g.labels.as_ref().map(|_| Vec::new());
    for i in 0..n {
        if keep(i) {
            remap[i] = coords.len();
            coords.push(g.coords[i]);
            features.extend_from_slice(g.node_features(i));
            if let (Some(out), Some(src)) = (labels.as_mut(), g.labels.as_ref()) {
                out.push(src[i]);
            }
        }
    }
    let mut edges = Vec::new();
    let mut edge_weights = Vec::new();
    for (&(i, j), &w) in g.edges.iter().zip(&g.edge_weights) {
        if remap[i] != usize::MAX && remap[j] != usize::MAX {
            edges.push((remap[i], remap[j]));
            edge_weights.push(w);
        }
    }
    SpatialGraph {
        coords,
        feature_dim: g.feature_dim,
        features,
        edges,
        edge_weights,
        labels,
    }
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: usize,
    x: f64,
    y: f64,
    features: Vec<f64>,
    label: Option<Phenotype>,
}

#[derive(Serialize, Deserialize)]
struct EdgeDoc {
    u: usize,
    v: usize,
    w: f64,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labelled: Option<bool>,
    nodes: Vec<NodeDoc>,
    edges: Vec<EdgeDoc>,
}

impl Serialize for SpatialGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let doc = GraphDoc {
            feature_dim: self.feature_dim,
            labelled: Some(self.labels.is_some()),
            nodes: (0..self.n_nodes())
                .map(|i| NodeDoc {
                    id: i,
                    x: self.coords[i][0],
                    y: self.coords[i][1],
                    features: self.node_features(i).to_vec(),
                    label: self.label(i),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .zip(&self.edge_weights)
                .map(|(&(u, v), &w)| EdgeDoc { u, v, w })
                .collect(),
        };
        doc.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SpatialGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = GraphDoc::deserialize(d)?;
        let n = doc.nodes.len();
        let mut coords = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n * doc.feature_dim);
        let mut labels = Vec::with_capacity(n);
        for (i, node) in doc.nodes.into_iter().enumerate() {
            if node.id != i {
                return Err(D::Error::custom(format!("node ids must be 0..n in order, found {} at {i}", node.id)));
            }
            if node.features.len() != doc.feature_dim {
                return Err(D::Error::custom(format!(
                    "node {i} has {} features, expected {}",
                    node.features.len(),
                    doc.feature_dim
                )));
            }
            coords.push([node.x, node.y]);
            features.extend(node.features);
            labels.push(node.label);
        }
        let labelled = doc.labelled.unwrap_or(n > 0 && labels.iter().all(Option::is_some));
        let labels = if labelled && labels.iter().all(Option::is_some) {
            Some(labels.into_iter().flatten().collect())
        } else if !labelled && labels.iter().all(Option::is_none) {
            None
        } else {
            return Err(D::Error::custom("labels must be present on all nodes or none"));
        };
        let g = SpatialGraph {
            coords,
            feature_dim: doc.feature_dim,
            features,
            edges: doc.edges.iter().map(|e| (e.u, e.v)).collect(),
            edge_weights: doc.edges.iter().map(|e| e.w).collect(),
            labels,
        };
        g.check().map_err(|e| D::Error::custom(e.to_string()))?;
        Ok(g)
    }
}

/// Byte offset of a 1-based (line, column) position.
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len();
    }
    text.len()
}

pub(crate) fn json_error(text: &str, e: serde_json::Error) -> Error {
    Error::Malformed {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

pub fn serialize_graph(g: &SpatialGraph) -> Result<String> {
    Ok(serde_json::to_string(g)?)
}

pub fn deserialize_graph(text: &str) -> Result<SpatialGraph> {
    serde_json::from_str(text).map_err(|e| json_error(text, e))
}
