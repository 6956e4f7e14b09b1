//! Post-hoc attribution for tile-graph models.
//!
//! Integrated gradients treat the tile-graph edge weights as the input: the
//! path runs from all weights at zero to all weights at one, and the path
//! integral is evaluated with Gauss–Legendre quadrature. The mask explainer
//! learns a soft edge mask and a soft feature mask that keep the model's
//! prediction while staying small and near binary.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::ad::{Adam, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::metric_names;
use crate::model::{argmax, Model, ModelKind, RoISample};
use crate::quadrature::GaussLegendre;

/// Scalar explained by integrated gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgOutput {
    /// Pre-softmax score of the target class.
    #[default]
    Logit,
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IgConfig {
    pub n_points: usize,
    /// Class to explain; the predicted class when absent.
    pub target_class: Option<usize>,
    pub output: IgOutput,
}

impl Default for IgConfig {
    fn default() -> Self {
        IgConfig {
            n_points: 50,
            target_class: None,
            output: IgOutput::Logit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub roi_id: String,
    pub target_class: usize,
    /// Tile ids in node order.
    pub tile_ids: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub edge_ig: Vec<f64>,
    /// Sum of the attributions of incident edges.
    pub node_ig: Vec<f64>,
    /// Explained output at edge weights one and zero.
    pub f_input: f64,
    pub f_baseline: f64,
    pub completeness_gap: f64,
}

/// Prepared inputs of the tile-graph head, shared across path points.
struct Path<'a> {
    model: &'a Model,
    x: Tensor,
    edges: Rc<[(usize, usize)]>,
    target: usize,
    output: IgOutput,
}

impl<'a> Path<'a> {
    fn new(model: &'a Model, s: &RoISample, target: Option<usize>, output: IgOutput) -> Result<Self> {
        if model.choice.kind != ModelKind::Gcn {
            return Err(Error::ModelMismatch(format!(
                "edge attributions need a tile-graph model, got {}",
                model.choice
            )));
        }
        if s.tile_graph.edge_weights.iter().any(|&w| w != 1.0) {
            return Err(Error::Validation(format!("roi {}: edge weights must all be one", s.roi_id)));
        }
        let x = model.tile_features(s)?;
        let mut path = Path {
            model,
            x,
            edges: s.tile_graph.edges.clone().into(),
            target: 0,
            output,
        };
        path.target = match target {
            Some(t) if t < model.n_classes() => t,
            Some(t) => {
                return Err(Error::Validation(format!(
                    "target class {t} outside 0..{}",
                    model.n_classes()
                )))
            }
            None => argmax(&path.logits_at(1.0)?),
        };
        Ok(path)
    }

    fn explained(&self, tape: &mut Tape, alpha_weights: Var) -> Result<Var> {
        let p = self.model.store.bind(tape, false);
        let x = tape.constant(self.x.clone());
        let z = self.model.gcn_head(tape, &p, x, alpha_weights, &self.edges, None)?;
        Ok(match self.output {
            IgOutput::Logit => tape.pick(z, self.target),
            IgOutput::Probability => {
                let zt = tape.transpose(z);
                let prob = tape.softmax_cols(zt);
                tape.pick(prob, self.target)
            }
        })
    }

    fn logits_at(&self, alpha: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.model.store.bind(&mut tape, false);
        let x = tape.constant(self.x.clone());
        let w = tape.constant(Tensor::filled(1, self.edges.len(), alpha));
        let z = self.model.gcn_head(&mut tape, &p, x, w, &self.edges, None)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Explained output and its gradient with every edge weight at `alpha`.
    fn at(&self, alpha: f64) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::filled(1, self.edges.len(), alpha));
        let f = self.explained(&mut tape, w)?;
        let value = tape.value(f).item();
        let grads = tape.backward(f);
        let g = grads
            .get(w)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; self.edges.len()]);
        if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("attribution path at alpha {alpha}")));
        }
        Ok((value, g))
    }

    fn integrate(&self, nodes: impl Iterator<Item = (f64, f64)>) -> Result<Vec<f64>> {
        let mut ig = vec![0.0; self.edges.len()];
        for (alpha, weight) in nodes {
            let (_, g) = self.at(alpha)?;
            for (a, gi) in ig.iter_mut().zip(g) {
                *a += weight * gi;
            }
        }
        Ok(ig)
    }
}

fn node_scores(n: usize, edges: &[(usize, usize)], edge_ig: &[f64]) -> Vec<f64> {
    let mut node = vec![0.0; n];
    for (&(u, v), &a) in edges.iter().zip(edge_ig) {
        node[u] += a;
        node[v] += a;
    }
    node
}

/// Edge and node attributions of one sample.
pub fn integrated_gradients(model: &Model, s: &RoISample, cfg: &IgConfig) -> Result<Attribution> {
    if cfg.n_points == 0 {
        return Err(Error::Config("quadrature order must be positive".into()));
    }
    let path = Path::new(model, s, cfg.target_class, cfg.output)?;
    let rule = GaussLegendre::new(cfg.n_points);
    let edge_ig = path.integrate(rule.on_interval(0.0, 1.0))?;
    let (f_input, _) = path.at(1.0)?;
    let (f_baseline, _) = path.at(0.0)?;
    let total: f64 = edge_ig.iter().sum();
    Ok(Attribution {
        roi_id: s.roi_id.clone(),
        target_class: path.target,
        tile_ids: s.tiles.iter().map(|t| t.tile_id).collect(),
        node_ig: node_scores(s.n_tiles(), &s.tile_graph.edges, &edge_ig),
        edges: s.tile_graph.edges.clone(),
        edge_ig,
        f_input,
        f_baseline,
        completeness_gap: (total - (f_input - f_baseline)).abs(),
    })
}

/// Midpoint-rule edge attributions with `n` points, as an independent check
/// of the quadrature.
pub fn integrated_gradients_midpoint(model: &Model, s: &RoISample, target: usize, output: IgOutput, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("point count must be positive".into()));
    }
    let path = Path::new(model, s, Some(target), output)?;
    let h = 1.0 / n as f64;
    path.integrate((0..n).map(|i| ((i as f64 + 0.5) * h, h)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTile {
    pub rank: usize,
    pub tile_id: usize,
    pub node_ig: f64,
}

/// Tiles by decreasing node attribution, ties by tile id. Scores closer
/// than one part in 1e9 of the largest magnitude count as ties, so rounding
/// noise from node order cannot reorder equal tiles.
pub fn rank_tiles(attr: &Attribution, top_k: usize) -> Vec<RankedTile> {
    let n = attr.node_ig.len();
    if top_k > n {
        log::warn!("roi {}: top_k {top_k} exceeds {n} tiles; listing all", attr.roi_id);
    }
    let scale = attr.node_ig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let key: Vec<f64> = attr
        .node_ig
        .iter()
        .map(|v| if scale > 0.0 { (v / scale * 1e9).round() } else { 0.0 })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(attr.tile_ids[a].cmp(&attr.tile_ids[b])));
    order
        .into_iter()
        .take(top_k.min(n))
        .enumerate()
        .map(|(r, i)| RankedTile {
            rank: r + 1,
            tile_id: attr.tile_ids[i],
            node_ig: attr.node_ig[i],
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOptimizer {
    Adam,
    /// Plain gradient descent. Keeps gradient magnitudes, so features the
    /// prediction depends on move furthest from the initial mask value.
    #[default]
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_size: f64,
    pub lambda_entropy: f64,
    /// Pre-sigmoid starting value of every mask entry.
    pub init_logit: f64,
    pub optimizer: MaskOptimizer,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            epochs: 200,
            lr: 0.01,
            lambda_size: 0.005,
            lambda_entropy: 0.1,
            init_logit: 0.0,
            optimizer: MaskOptimizer::Sgd,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("explainer needs positive epochs and lr".into()));
        }
        if !(self.lambda_size >= 0.0 && self.lambda_entropy >= 0.0) || !self.init_logit.is_finite() {
            return Err(Error::Config("explainer penalties must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerMasks {
    pub roi_id: String,
    pub target_class: usize,
    pub edge_mask: Vec<f64>,
    pub feature_mask: Vec<f64>,
    pub objective_trace: Vec<f64>,
}

/// Mean over entries of the binary entropy of `m`.
fn mean_entropy(tape: &mut Tape, m: Var) -> Var {
    const EPS: f64 = 1e-12;
    let lm = tape.add_scalar(m, EPS);
    let lm = tape.ln(lm);
    let t1 = tape.mul(m, lm);
    let neg = tape.scale(m, -1.0);
    let rest = tape.add_scalar(neg, 1.0);
    let lr = tape.add_scalar(rest, EPS);
    let lr = tape.ln(lr);
    let t2 = tape.mul(rest, lr);
    let s = tape.add(t1, t2);
    let s = tape.mean_all(s);
    tape.scale(s, -1.0)
}

/// Learn edge and feature masks for one sample.
pub fn gnn_explain(model: &Model, s: &RoISample, cfg: &ExplainerConfig) -> Result<ExplainerMasks> {
    cfg.validate()?;
    let path = Path::new(model, s, None, IgOutput::Logit)?;
    let n_edges = path.edges.len();
    let dim = path.x.cols();
    let mut masks = ParamStore::new();
    let em = masks.add("edge_mask", Tensor::filled(1, n_edges, cfg.init_logit), true);
    let fm = masks.add("feature_mask", Tensor::filled(1, dim, cfg.init_logit), true);
    let mut adam = Adam::new(&masks, cfg.lr, 0.0);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let ids = [em, fm];
    let ones = vec![1.0; model.n_classes()];
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let b = masks.bind(&mut tape, true);
        let p = model.store.bind(&mut tape, false);
        let e = tape.sigmoid(b.var(em));
        let f = tape.sigmoid(b.var(fm));
        let x = tape.constant(path.x.clone());
        let xm = tape.mul_row(x, f);
        let z = model.gcn_head(&mut tape, &p, xm, e, &path.edges, None)?;
        let mut loss = tape.weighted_cross_entropy(z, &[path.target], &ones);
        for m in [e, f] {
            if tape.shape(m)[1] == 0 {
                continue;
            }
            let size = tape.mean_all(m);
            let size = tape.scale(size, cfg.lambda_size);
            let ent = mean_entropy(&mut tape, m);
            let ent = tape.scale(ent, cfg.lambda_entropy);
            loss = tape.add(loss, size);
            loss = tape.add(loss, ent);
        }
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "explainer objective for roi {} at iteration {epoch}",
                s.roi_id
            )));
        }
        trace.push(value);
        let grads = tape.backward(loss);
        let g: Vec<Option<Tensor>> = ids.iter().map(|&id| grads.get(b.var(id)).cloned()).collect();
        match cfg.optimizer {
            MaskOptimizer::Adam => adam.step(&mut masks, |id| g[if id == em { 0 } else { 1 }].as_ref()),
            MaskOptimizer::Sgd => {
                for (k, &id) in ids.iter().enumerate() {
                    if let Some(g) = &g[k] {
                        for (v, gi) in masks.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                            *v -= cfg.lr * gi;
                        }
                    }
                }
            }
        }
        if !masks.is_finite() {
            return Err(Error::NonFinite(format!("explainer masks for roi {} at iteration {epoch}", s.roi_id)));
        }
    }
    let sig = |t: &Tensor| t.data().iter().map(|&v| crate::ad::sigmoid(v)).collect::<Vec<f64>>();
    Ok(ExplainerMasks {
        roi_id: s.roi_id.clone(),
        target_class: path.target,
        edge_mask: sig(masks.get(em)),
        feature_mask: sig(masks.get(fm)),
        objective_trace: trace,
    })
}

/// Names of the tile feature columns: the metric catalog, then one slot per
/// embedding entry.
pub fn tile_feature_names(embed_dim: usize) -> Vec<String> {
    let mut names = metric_names();
    names.extend((0..embed_dim).map(|i| format!("embedding_{i}")));
    names
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub rank: usize,
    pub feature_name: String,
    pub mean_mask: f64,
}

/// Mean feature mask over samples, sorted descending; ties keep column order.
pub fn feature_importance_report(masks: &[ExplainerMasks], names: &[String]) -> Result<Vec<FeatureImportance>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Empty("no explainer masks to summarise".into()))?;
    let d = first.feature_mask.len();
    if names.len() != d || masks.iter().any(|m| m.feature_mask.len() != d) {
        return Err(Error::Shape(format!(
            "feature masks and {} names disagree in length",
            names.len()
        )));
    }
    let mut mean = vec![0.0; d];
    for m in masks {
        for (a, v) in mean.iter_mut().zip(&m.feature_mask) {
            *a += v;
        }
    }
    let n = masks.len() as f64;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(r, j)| FeatureImportance {
            rank: r + 1,
            feature_name: names[j].clone(),
            mean_mask: mean[j] / n,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::tiny_samples;
    use crate::model::{make_test_graph, HierModelConfig};

    fn setup(readout: &str, seed: u64) -> (Model, RoISample) {
        let cfg = HierModelConfig::default();
        let samples = tiny_samples(1, 40, seed);
        let s = make_test_graph(&samples[0], &cfg).unwrap();
        let mut m = Model::new(readout.parse().unwrap(), &cfg, seed).unwrap();
        m.fit_normalization(std::slice::from_ref(&s)).unwrap();
        (m, s)
    }

    /// A single GraphConv layer whose only nonzero weights read the
    /// neighbour sum linearly, so the logit is linear in the edge weights.
    fn linear_model() -> (Model, RoISample, Vec<f64>) {
        let cfg = HierModelConfig {
            tile_layers: 1,
            hidden_dim: 1,
            ..HierModelConfig::default()
        };
        let samples = tiny_samples(1, 30, 5);
        let s = make_test_graph(&samples[0], &cfg).unwrap();
        let mut m = Model::new("gcn-add".parse().unwrap(), &cfg, 1).unwrap();
        m.fit_normalization(std::slice::from_ref(&s)).unwrap();
        let names: Vec<String> = m.store.ids().map(|id| m.store.name(id).to_string()).collect();
        for (id, name) in m.store.ids().collect::<Vec<_>>().into_iter().zip(names) {
            let [r, c] = m.store.get(id).shape();
            let t = m.store.get_mut(id);
            if name == "tile.conv0.w2" {
                *t = Tensor::filled(r, c, 0.0);
                t.data_mut()[0] = 1.0;
            } else if name == "tile.out.weight" {
                *t = Tensor::filled(r, c, 1.0);
            } else if name.starts_with("tile.") {
                *t = Tensor::zeros(r, c);
            }
        }
        // With bias zero, h_v = relu(sum_u w_uv x_u0); keep that positive by
        // shifting column 0 of the standardized input to be positive.
        let shift = m.store.find("norm.tile_shift").unwrap();
        let scale = m.store.find("norm.tile_scale").unwrap();
        m.store.get_mut(shift).data_mut()[0] = 0.0;
        m.store.get_mut(scale).data_mut()[0] = 1.0;
        let x = m.tile_features(&s).unwrap();
        assert!((0..x.rows()).all(|r| x.get(r, 0) >= 0.0));
        // F = sum_v sum_{u~v} w_uv x_u0, so c_e = x_u0 + x_v0.
        let c = s.tile_graph.edges.iter().map(|&(u, v)| x.get(u, 0) + x.get(v, 0)).collect();
        (m, s, c)
    }

    #[test]
    fn linear_model_attribution_is_exact() {
        let (m, s, c) = linear_model();
        assert!(!c.is_empty());
        for n in [1, 2, 7, 50] {
            let a = integrated_gradients(
                &m,
                &s,
                &IgConfig {
                    n_points: n,
                    target_class: Some(0),
                    ..IgConfig::default()
                },
            )
            .unwrap();
            for (got, want) in a.edge_ig.iter().zip(&c) {
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "n={n}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn node_scores_count_each_edge_twice() {
        let (m, s) = setup("gcn-mean", 2);
        let a = integrated_gradients(&m, &s, &IgConfig::default()).unwrap();
        assert_eq!(a.edge_ig.len(), s.tile_graph.n_edges());
        let e: f64 = a.edge_ig.iter().sum();
        let n: f64 = a.node_ig.iter().sum();
        assert!((n - 2.0 * e).abs() < 1e-9);
        assert!(a.completeness_gap.is_finite());
    }

    #[test]
    fn deleted_edge_has_no_entry() {
        let (m, mut s) = setup("gcn-mean", 3);
        let before = s.tile_graph.n_edges();
        s.tile_graph.edges.pop();
        s.tile_graph.edge_weights.pop();
        let a = integrated_gradients(&m, &s, &IgConfig::default()).unwrap();
        assert_eq!(a.edge_ig.len(), before - 1);
        assert_eq!(a.edges, s.tile_graph.edges);
    }

    #[test]
    fn baselines_are_rejected() {
        let (_, s) = setup("gcn-mean", 4);
        let mil = Model::new("mil-att".parse().unwrap(), &HierModelConfig::default(), 1).unwrap();
        assert!(matches!(
            integrated_gradients(&mil, &s, &IgConfig::default()),
            Err(Error::ModelMismatch(_))
        ));
    }

    #[test]
    fn midpoint_rule_matches_linear_closed_form() {
        let (m, s, c) = linear_model();
        let r = integrated_gradients_midpoint(&m, &s, 0, IgOutput::Logit, 3).unwrap();
        for (got, want) in r.iter().zip(&c) {
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn ranking_ties_follow_tile_id() {
        let attr = Attribution {
            roi_id: "r".into(),
            target_class: 0,
            tile_ids: vec![5, 3, 9, 1],
            edges: vec![],
            edge_ig: vec![],
            node_ig: vec![0.0; 4],
            f_input: 0.0,
            f_baseline: 0.0,
            completeness_gap: 0.0,
        };
        let ids: Vec<usize> = rank_tiles(&attr, 10).iter().map(|t| t.tile_id).collect();
        assert_eq!(ids, vec![1, 3, 5, 9]);
        let attr = Attribution {
            node_ig: vec![0.5, 2.0, 0.5, -1.0],
            ..attr
        };
        let ranked = rank_tiles(&attr, 2);
        assert_eq!(ranked.iter().map(|t| t.tile_id).collect::<Vec<_>>(), vec![3, 5]);
        assert_eq!(ranked[1].rank, 2);
    }

    #[test]
    fn ranking_ignores_node_order() {
        let (m, s) = setup("gcn-mean", 7);
        let a = integrated_gradients(&m, &s, &IgConfig::default()).unwrap();
        let mut order: Vec<usize> = (0..s.n_tiles()).collect();
        order.reverse();
        let mut p = s.clone();
        p.tiles = order.iter().map(|&t| s.tiles[t]).collect();
        p.cell_graphs = order.iter().map(|&t| s.cell_graphs[t].clone()).collect();
        let coords: Vec<[f64; 2]> = order.iter().map(|&t| s.tile_graph.coords[t]).collect();
        let feats: Vec<f64> = order.iter().flat_map(|&t| s.metrics_row(t).to_vec()).collect();
        p.tile_graph = crate::graph::build_graph(&coords, feats, crate::metrics::N_METRICS, 200.0).unwrap();
        let b = integrated_gradients(&m, &p, &IgConfig::default()).unwrap();
        let ids = |a: &Attribution| rank_tiles(a, 10).iter().map(|t| t.tile_id).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn explainer_shapes_and_bounds() {
        let (m, s) = setup("gcn-mean", 8);
        let cfg = ExplainerConfig {
            epochs: 20,
            ..ExplainerConfig::default()
        };
        let r = gnn_explain(&m, &s, &cfg).unwrap();
        assert_eq!(r.edge_mask.len(), s.tile_graph.n_edges());
        assert_eq!(r.feature_mask.len(), 84);
        assert_eq!(r.objective_trace.len(), 20);
        assert!(r.edge_mask.iter().chain(&r.feature_mask).all(|&v| v > 0.0 && v < 1.0));
        assert!(r.objective_trace.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn unregularised_objective_does_not_increase() {
        let (m, s) = setup("gcn-mean", 9);
        let cfg = ExplainerConfig {
            epochs: 50,
            lambda_size: 0.0,
            lambda_entropy: 0.0,
            init_logit: 6.0,
            ..ExplainerConfig::default()
        };
        let r = gnn_explain(&m, &s, &cfg).unwrap();
        assert!(r.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn report_orders_by_mean_mask() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mk = |f: Vec<f64>| ExplainerMasks {
            roi_id: "r".into(),
            target_class: 0,
            edge_mask: vec![],
            feature_mask: f,
            objective_trace: vec![],
        };
        let one = feature_importance_report(&[mk(vec![0.2, 0.9, 0.5])], &names).unwrap();
        assert_eq!(one.iter().map(|f| f.feature_name.as_str()).collect::<Vec<_>>(), ["b", "c", "a"]);
        let flat = feature_importance_report(&[mk(vec![0.5; 3]), mk(vec![0.5; 3])], &names).unwrap();
        assert_eq!(flat.iter().map(|f| f.feature_name.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert!(feature_importance_report(&[], &names).is_err());
        assert_eq!(tile_feature_names(16).len(), 84);
    }
}

