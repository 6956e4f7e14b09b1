//! Handcrafted immune-interaction metrics of a labelled cell graph.
//!
//! The catalog (version [`CATALOG_VERSION`]) has 68 entries in this order:
//!
//! | block | count | entries |
//! |-------|-------|---------|
//! | structural | 42 | the 7 [`StructuralMetrics`] for the whole graph, then for the subgraph induced by each phenotype (cd4, cd8, cd20, foxp3, ck) |
//! | density ratios | 12 | `frac(a) / frac(b)` for every ordered pair of distinct immune types |
//! | interaction | 1 | immune–tumour edges / immune–immune edges |
//! | fractions | 5 | node fraction of each phenotype |
//! | expression | 5 | mean own-marker expression over the cells of each phenotype |
//! | global | 3 | components per node, isolated-node fraction, mean degree |
//!
//! Undefined quantities (empty graphs, zero denominators, zero degree variance)
//! are reported as 0.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{induced_subgraph, SpatialGraph};
use crate::ingest::{Phenotype, MARKERS};

pub const CATALOG_VERSION: &str = "tme68-v1";
pub const N_METRICS: usize = 68;
pub const STRUCTURAL_NAMES: [&str; 7] = [
    "avg_clustering",
    "square_clustering",
    "assortativity",
    "radius",
    "density",
    "transitivity",
    "closeness",
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StructuralMetrics {
    pub avg_clustering: f64,
    pub square_clustering: f64,
    pub assortativity: f64,
    pub radius: f64,
    pub density: f64,
    pub transitivity: f64,
    pub closeness: f64,
}

impl StructuralMetrics {
    pub fn to_array(self) -> [f64; 7] {
        [
            self.avg_clustering,
            self.square_clustering,
            self.assortativity,
            self.radius,
            self.density,
            self.transitivity,
            self.closeness,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub values: Vec<f64>,
    pub catalog_version: String,
}

impl MetricVector {
    pub fn zeros() -> Self {
        MetricVector {
            values: vec![0.0; N_METRICS],
            catalog_version: CATALOG_VERSION.to_string(),
        }
    }
}

fn scope_tags() -> [&'static str; 6] {
    ["all", "cd4", "cd8", "cd20", "foxp3", "ck"]
}

/// Column names in catalog order.
pub fn metric_names() -> Vec<String> {
    let mut names = Vec::with_capacity(N_METRICS);
    for scope in scope_tags() {
        for m in STRUCTURAL_NAMES {
            names.push(format!("{scope}_{m}"));
        }
    }
    for a in Phenotype::IMMUNE {
        for b in Phenotype::IMMUNE {
            if a != b {
                names.push(format!("ratio_{}_{}", a.tag(), b.tag()));
            }
        }
    }
    names.push("immune_tumour_ratio".to_string());
    for p in Phenotype::ALL {
        names.push(format!("frac_{}", p.tag()));
    }
    for p in Phenotype::ALL {
        names.push(format!("mean_expr_{}", p.tag()));
    }
    names.push("components_per_node".to_string());
    names.push("isolated_fraction".to_string());
    names.push("mean_degree".to_string());
    names
}

fn sorted_intersection(a: &[usize], b: &[usize], keep: impl Fn(usize) -> bool) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                if keep(a[i]) {
                    n += 1;
                }
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Triangles through each node.
fn local_triangles(adj: &[Vec<usize>]) -> Vec<usize> {
    let mut t = vec![0; adj.len()];
    for (v, nv) in adj.iter().enumerate() {
        for &u in nv.iter().filter(|&&u| u > v) {
            for &w in adj[u].iter().filter(|&&w| w > u) {
                if nv.binary_search(&w).is_ok() {
                    t[v] += 1;
                    t[u] += 1;
                    t[w] += 1;
                }
            }
        }
    }
    t
}

fn average_clustering(adj: &[Vec<usize>], tri: &[usize]) -> f64 {
    if adj.is_empty() {
        return 0.0;
    }
    let total: f64 = adj
        .iter()
        .zip(tri)
        .map(|(nv, &t)| {
            let d = nv.len();
            if d < 2 {
                0.0
            } else {
                2.0 * t as f64 / (d * (d - 1)) as f64
            }
        })
        .sum();
    total / adj.len() as f64
}

fn transitivity(adj: &[Vec<usize>], tri: &[usize]) -> f64 {
    let closed: usize = tri.iter().sum();
    let triads: usize = adj.iter().map(|nv| nv.len() * nv.len().saturating_sub(1) / 2).sum();
    if triads == 0 {
        0.0
    } else {
        closed as f64 / triads as f64
    }
}

/// Mean square clustering (Lind, González and Herrmann), computed as in
/// NetworkX: for each pair of neighbours `u, w` of `v`, squares are common
/// neighbours of `u` and `w` other than `v`.
fn square_clustering(adj: &[Vec<usize>]) -> f64 {
    let n = adj.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for v in 0..n {
        let nv = &adj[v];
        let mut squares_sum = 0usize;
        let mut potential = 0usize;
        for a in 0..nv.len() {
            for b in a + 1..nv.len() {
                let (u, w) = (nv[a], nv[b]);
                let squares = sorted_intersection(&adj[u], &adj[w], |x| x != v);
                squares_sum += squares;
                let mut degm = squares + 1;
                if adj[u].binary_search(&w).is_ok() {
                    degm += 1;
                }
                potential += (adj[u].len() - degm) + (adj[w].len() - degm) + squares;
            }
        }
        if potential > 0 {
            total += squares_sum as f64 / potential as f64;
        }
    }
    total / n as f64
}

/// Pearson correlation of endpoint degrees over both orientations of every edge.
fn degree_assortativity(adj: &[Vec<usize>]) -> f64 {
    let mut n = 0.0;
    let (mut sx, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
    for nv in adj {
        let dv = nv.len() as f64;
        for &u in nv {
            let du = adj[u].len() as f64;
            n += 1.0;
            sx += dv;
            sxx += dv * dv;
            sxy += dv * du;
        }
    }
    if n == 0.0 {
        return 0.0;
    }
    // Both orientations make the x and y marginals identical.
    let mean = sx / n;
    let var = sxx / n - mean * mean;
    if var <= 1e-12 * (sxx / n).max(1.0) {
        return 0.0;
    }
    (sxy / n - mean * mean) / var
}

fn bfs(adj: &[Vec<usize>], src: usize, dist: &mut [usize], queue: &mut VecDeque<usize>) {
    dist.fill(usize::MAX);
    dist[src] = 0;
    queue.clear();
    queue.push_back(src);
    while let Some(x) = queue.pop_front() {
        for &y in &adj[x] {
            if dist[y] == usize::MAX {
                dist[y] = dist[x] + 1;
                queue.push_back(y);
            }
        }
    }
}

/// Connected components as node lists, each sorted, ordered by smallest node.
pub fn components(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = vec![s];
        seen[s] = true;
        let mut head = 0;
        while head < comp.len() {
            let x = comp[head];
            head += 1;
            for &y in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    comp.push(y);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Returns (radius of the largest component, mean Wasserman–Faust closeness).
fn radius_and_closeness(adj: &[Vec<usize>]) -> (f64, f64) {
    let n = adj.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let comps = components(adj);
    // Largest component; ties go to the one holding the smallest node index,
    // which is the earliest in `comps`.
    let mut largest = 0;
    for (i, c) in comps.iter().enumerate() {
        if c.len() > comps[largest].len() {
            largest = i;
        }
    }
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    let mut radius = usize::MAX;
    let mut closeness_sum = 0.0;
    for (ci, comp) in comps.iter().enumerate() {
        let reach = comp.len();
        for &v in comp {
            bfs(adj, v, &mut dist, &mut queue);
            let mut total = 0usize;
            let mut ecc = 0usize;
            for &u in comp {
                total += dist[u];
                ecc = ecc.max(dist[u]);
            }
            if ci == largest {
                radius = radius.min(ecc);
            }
            if total > 0 && n > 1 {
                let r = (reach - 1) as f64;
                closeness_sum += (r / total as f64) * (r / (n - 1) as f64);
            }
        }
    }
    (radius as f64, closeness_sum / n as f64)
}

/// The seven structural metrics of `g` (edge weights ignored).
pub fn structural_metrics(g: &SpatialGraph) -> StructuralMetrics {
    let adj = g.adjacency_lists();
    structural_from_adjacency(&adj)
}

pub fn structural_from_adjacency(adj: &[Vec<usize>]) -> StructuralMetrics {
    let n = adj.len();
    let m: usize = adj.iter().map(Vec::len).sum::<usize>() / 2;
    let tri = local_triangles(adj);
    let (radius, closeness) = radius_and_closeness(adj);
    StructuralMetrics {
        avg_clustering: average_clustering(adj, &tri),
        square_clustering: square_clustering(adj),
        assortativity: degree_assortativity(adj),
        radius,
        density: if n < 2 { 0.0 } else { 2.0 * m as f64 / (n * (n - 1)) as f64 },
        transitivity: transitivity(adj, &tri),
        closeness,
    }
}

fn require_labels(g: &SpatialGraph) -> Result<&[Phenotype]> {
    g.labels
        .as_deref()
        .ok_or_else(|| Error::Validation("metric computation needs phenotype labels on every node".into()))
}

/// Immune–epithelial edges divided by immune–immune edges (0 when there are
/// no immune–immune edges).
pub fn interaction_ratio(g: &SpatialGraph) -> Result<f64> {
    let labels = require_labels(g)?;
    let (mut mixed, mut immune) = (0usize, 0usize);
    for &(i, j) in &g.edges {
        match (labels[i].is_immune(), labels[j].is_immune()) {
            (true, true) => immune += 1,
            (true, false) | (false, true) => mixed += 1,
            (false, false) => {}
        }
    }
    Ok(if immune == 0 { 0.0 } else { mixed as f64 / immune as f64 })
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Full 68-entry catalog for one labelled cell graph. Node features, when
/// present with at least five columns, are read as marker expressions in
/// [`MARKERS`] order.
pub fn metric_vector(g: &SpatialGraph) -> Result<MetricVector> {
    let labels = require_labels(g)?;
    let n = g.n_nodes();
    let mut values = Vec::with_capacity(N_METRICS);

    values.extend(structural_metrics(g).to_array());
    for p in Phenotype::ALL {
        let sub = induced_subgraph(g, |i| labels[i] == p);
        values.extend(structural_metrics(&sub).to_array());
    }

    let mut counts = [0usize; 5];
    for l in labels {
        counts[l.marker()] += 1;
    }
    let frac: Vec<f64> = counts.iter().map(|&c| ratio(c as f64, n as f64)).collect();
    for a in Phenotype::IMMUNE {
        for b in Phenotype::IMMUNE {
            if a != b {
                values.push(ratio(frac[a.marker()], frac[b.marker()]));
            }
        }
    }
    values.push(interaction_ratio(g)?);
    values.extend(&frac);

    let has_expr = g.feature_dim >= MARKERS.len();
    for p in Phenotype::ALL {
        let m = p.marker();
        let (mut sum, mut count) = (0.0, 0usize);
        if has_expr {
            for i in (0..n).filter(|&i| labels[i] == p) {
                sum += g.node_features(i)[m];
                count += 1;
            }
        }
        values.push(ratio(sum, count as f64));
    }

    let adj = g.adjacency_lists();
    let n_comp = components(&adj).len();
    let isolated = adj.iter().filter(|a| a.is_empty()).count();
    values.push(ratio(n_comp as f64, n as f64));
    values.push(ratio(isolated as f64, n as f64));
    values.push(ratio(2.0 * g.n_edges() as f64, n as f64));

    debug_assert_eq!(values.len(), N_METRICS);
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("metric {} is not finite", metric_names()[i])));
    }
    Ok(MetricVector {
        values,
        catalog_version: CATALOG_VERSION.to_string(),
    })
}
