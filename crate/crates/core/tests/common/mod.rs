//! Shared oracles for the integration suites.
#![allow(dead_code)]

use std::collections::BTreeSet;

/// Undirected simple graph as a dense adjacency matrix.
#[derive(Debug, Clone)]
pub struct Dense {
    pub n: usize,
    pub a: Vec<Vec<bool>>,
}

impl Dense {
    pub fn from_mask(n: usize, mask: u32) -> Self {
        let mut a = vec![vec![false; n]; n];
        let mut bit = 0;
        for i in 0..n {
            for j in i + 1..n {
                if mask >> bit & 1 == 1 {
                    a[i][j] = true;
                    a[j][i] = true;
                }
                bit += 1;
            }
        }
        Dense { n, a }
    }

    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        (0..self.n)
            .map(|i| (0..self.n).filter(|&j| self.a[i][j]).collect())
            .collect()
    }

    fn degree(&self, v: usize) -> usize {
        self.a[v].iter().filter(|&&x| x).count()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.a[i][j] {
                    e.push((i, j));
                }
            }
        }
        e
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..n {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

fn relabel(n: usize, mask: u32, perm: &[usize]) -> u32 {
    let g = Dense::from_mask(n, mask);
    let mut out = 0u32;
    let mut bit = 0;
    for i in 0..n {
        for j in i + 1..n {
            if g.a[perm[i]][perm[j]] {
                out |= 1 << bit;
            }
            bit += 1;
        }
    }
    out
}

/// One representative per isomorphism class of graphs on `n` nodes, found
/// by taking the smallest edge mask over all relabelings.
pub fn nonisomorphic_graphs(n: usize) -> Vec<Dense> {
    let pairs = n * n.saturating_sub(1) / 2;
    let perms = permutations(n);
    let mut seen = BTreeSet::new();
    for mask in 0..(1u32 << pairs) {
        let canon = perms.iter().map(|p| relabel(n, mask, p)).min().unwrap();
        seen.insert(canon);
    }
    seen.into_iter().map(|m| Dense::from_mask(n, m)).collect()
}

/// All-pairs hop distances by Floyd–Warshall; `usize::MAX` when unreachable.
fn distances(g: &Dense) -> Vec<Vec<usize>> {
    let n = g.n;
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for i in 0..n {
        d[i][i] = 0;
        for j in 0..n {
            if g.a[i][j] {
                d[i][j] = 1;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d.into_iter()
        .map(|row| row.into_iter().map(|x| if x >= inf { usize::MAX } else { x }).collect())
        .collect()
}

fn choose2(k: usize) -> f64 {
    (k * k.saturating_sub(1) / 2) as f64
}

pub fn avg_clustering(g: &Dense) -> f64 {
    if g.n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for v in 0..g.n {
        let nb: Vec<usize> = (0..g.n).filter(|&u| g.a[v][u]).collect();
        if nb.len() < 2 {
            continue;
        }
        let mut links = 0;
        for (i, &u) in nb.iter().enumerate() {
            for &w in &nb[i + 1..] {
                if g.a[u][w] {
                    links += 1;
                }
            }
        }
        total += links as f64 / choose2(nb.len());
    }
    total / g.n as f64
}

/// Square clustering from explicit enumeration of quadrilaterals
/// `v - u - x - w - v` with `u < w`, `x` distinct from `v`.
pub fn square_clustering(g: &Dense) -> f64 {
    if g.n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for v in 0..g.n {
        let (mut num, mut den) = (0.0, 0.0);
        for u in 0..g.n {
            for w in u + 1..g.n {
                if !(g.a[v][u] && g.a[v][w]) {
                    continue;
                }
                let q = (0..g.n).filter(|&x| x != v && g.a[u][x] && g.a[w][x]).count();
                let theta = usize::from(g.a[u][w]);
                let free_u = g.degree(u) - (1 + q + theta);
                let free_w = g.degree(w) - (1 + q + theta);
                num += q as f64;
                den += (free_u + free_w + q) as f64;
            }
        }
        if den > 0.0 {
            total += num / den;
        }
    }
    total / g.n as f64
}

/// Pearson correlation of the degree pairs `(deg u, deg v)` listed for both
/// orientations of every edge, by the two-pass formula.
pub fn assortativity(g: &Dense) -> f64 {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (u, v) in g.edges() {
        let (du, dv) = (g.degree(u) as f64, g.degree(v) as f64);
        xs.extend([du, dv]);
        ys.extend([dv, du]);
    }
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if vx < 1e-12 || vy < 1e-12 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Components as sorted node lists, ordered by smallest member.
fn components(g: &Dense, d: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut done = vec![false; g.n];
    let mut out = Vec::new();
    for s in 0..g.n {
        if done[s] {
            continue;
        }
        let comp: Vec<usize> = (0..g.n).filter(|&t| d[s][t] != usize::MAX).collect();
        for &t in &comp {
            done[t] = true;
        }
        out.push(comp);
    }
    out
}

/// Radius of the largest component; ties go to the component holding the
/// smallest node index.
pub fn radius(g: &Dense) -> f64 {
    if g.n == 0 {
        return 0.0;
    }
    let d = distances(g);
    let comps = components(g, &d);
    let big = comps.iter().map(Vec::len).max().unwrap();
    let comp = comps.iter().find(|c| c.len() == big).unwrap();
    comp.iter()
        .map(|&v| comp.iter().map(|&u| d[v][u]).max().unwrap())
        .min()
        .unwrap() as f64
}

pub fn density(g: &Dense) -> f64 {
    if g.n < 2 {
        return 0.0;
    }
    g.edges().len() as f64 / choose2(g.n)
}

pub fn transitivity(g: &Dense) -> f64 {
    let mut triangles = 0;
    for i in 0..g.n {
        for j in i + 1..g.n {
            for k in j + 1..g.n {
                if g.a[i][j] && g.a[j][k] && g.a[i][k] {
                    triangles += 1;
                }
            }
        }
    }
    let triads: f64 = (0..g.n).map(|v| choose2(g.degree(v))).sum();
    if triads == 0.0 {
        0.0
    } else {
        3.0 * triangles as f64 / triads
    }
}

/// Mean closeness with the reachable-set scaling
/// `(r / Σd) · (r / (n − 1))`, `r` = nodes reachable besides the source.
pub fn closeness(g: &Dense) -> f64 {
    if g.n < 2 {
        return 0.0;
    }
    let d = distances(g);
    let mut total = 0.0;
    for v in 0..g.n {
        let reach: Vec<usize> = (0..g.n).filter(|&u| u != v && d[v][u] != usize::MAX).collect();
        let sum: usize = reach.iter().map(|&u| d[v][u]).sum();
        if sum > 0 {
            let r = reach.len() as f64;
            total += (r / sum as f64) * (r / (g.n - 1) as f64);
        }
    }
    total / g.n as f64
}

/// The seven structural metrics in catalog order.
pub fn structural(g: &Dense) -> [f64; 7] {
    [
        avg_clustering(g),
        square_clustering(g),
        assortativity(g),
        radius(g),
        density(g),
        transitivity(g),
        closeness(g),
    ]
}

/// Compare library and oracle on every graph with at most `max_n` nodes.
/// Returns (graphs checked, worst absolute error, first mismatch).
pub fn metric_oracle_sweep(max_n: usize) -> (usize, f64, Option<String>) {
    let mut count = 0;
    let mut worst = 0.0f64;
    let mut first = None;
    for n in 0..=max_n {
        for g in nonisomorphic_graphs(n) {
            count += 1;
            let lib = tmegraph::metrics::structural_from_adjacency(&g.adjacency_lists()).to_array();
            let want = structural(&g);
            for (k, (a, b)) in lib.iter().zip(&want).enumerate() {
                let err = (a - b).abs();
                if !(err <= 1e-9) && first.is_none() {
                    first = Some(format!(
                        "{} on {:?}: library {a}, oracle {b}",
                        tmegraph::metrics::STRUCTURAL_NAMES[k],
                        g.edges()
                    ));
                }
                worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            }
        }
    }
    (count, worst, first)
}
