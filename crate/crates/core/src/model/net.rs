use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::rc::Rc;
use std::sync::Arc;

use super::{EncoderMode, HierModelConfig, ModelChoice, ModelKind, RoISample, CELL_FEATURE_DIM};
use crate::ad::{dropout, glorot, readout, Bound, GraphConv, Linear, ParamId, ParamStore, Readout, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::metrics::N_METRICS;
use crate::seed::{self, stream, Rng};

#[derive(Debug, Clone)]
struct Norm {
    cell_shift: ParamId,
    cell_scale: ParamId,
    tile_shift: ParamId,
    tile_scale: ParamId,
}

#[derive(Debug, Clone)]
struct Encoder {
    convs: Vec<GraphConv>,
    out: Linear,
}

#[derive(Debug, Clone)]
enum Head {
    Gcn { convs: Vec<GraphConv>, out: Linear },
    Mil { u: ParamId, v: ParamId, fc1: Linear, fc2: Linear },
    Mlp { layers: Vec<Linear> },
}

/// Options of one forward pass.
pub struct ForwardOpts<'a> {
    /// Tile-graph edge weights (`1 x E`); all ones when absent.
    pub edge_weights: Option<Var>,
    /// Multiplies every standardized tile feature row (`1 x D`).
    pub feature_mask: Option<Var>,
    /// Dropout randomness; `None` means evaluation mode.
    pub dropout_rng: Option<&'a mut Rng>,
}

impl ForwardOpts<'_> {
    pub fn eval() -> Self {
        ForwardOpts {
            edge_weights: None,
            feature_mask: None,
            dropout_rng: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub choice: ModelChoice,
    pub cfg: HierModelConfig,
    pub store: ParamStore,
    norm: Norm,
    encoder: Option<Encoder>,
    head: Head,
}

impl Model {
    /// Fresh model with Glorot weights drawn from `init_seed`.
    pub fn new(choice: ModelChoice, cfg: &HierModelConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::child_rng(init_seed, &[stream::INIT]);
        let mut store = ParamStore::new();
        let tile_dim = cfg.tile_feature_dim();
        let norm = Norm {
            cell_shift: store.add("norm.cell_shift", Tensor::zeros(1, CELL_FEATURE_DIM), false),
            cell_scale: store.add("norm.cell_scale", Tensor::filled(1, CELL_FEATURE_DIM, 1.0), false),
            tile_shift: store.add("norm.tile_shift", Tensor::zeros(1, tile_dim), false),
            tile_scale: store.add("norm.tile_scale", Tensor::filled(1, tile_dim, 1.0), false),
        };
        let h = cfg.hidden_dim;
        let encoder = if choice.kind.uses_tiles() {
            let mut convs = Vec::new();
            let mut d = CELL_FEATURE_DIM;
            for l in 0..cfg.cell_mp_steps {
                convs.push(GraphConv::new(&mut store, &format!("encoder.conv{l}"), d, h, &mut rng));
                d = h;
            }
            let out = Linear::new(&mut store, "encoder.out", d, cfg.cell_embed_dim, &mut rng);
            Some(Encoder { convs, out })
        } else {
            None
        };
        let head = match choice.kind {
            ModelKind::Gcn => {
                let mut convs = Vec::new();
                let mut d = tile_dim;
                for l in 0..cfg.tile_layers {
                    convs.push(GraphConv::new(&mut store, &format!("tile.conv{l}"), d, h, &mut rng));
                    d = h;
                }
                let out = Linear::new(&mut store, "tile.out", d, cfg.n_classes, &mut rng);
                Head::Gcn { convs, out }
            }
            ModelKind::MilAttention | ModelKind::MilMean => {
                let u = store.add("mil.u", glorot(tile_dim, h, &mut rng), true);
                let v = store.add("mil.v", glorot(h, 1, &mut rng), true);
                let fc1 = Linear::new(&mut store, "mil.fc1", tile_dim, h, &mut rng);
                let fc2 = Linear::new(&mut store, "mil.fc2", h, cfg.n_classes, &mut rng);
                Head::Mil { u, v, fc1, fc2 }
            }
            ModelKind::Mlp => {
                let layers = vec![
                    Linear::new(&mut store, "mlp.fc0", CELL_FEATURE_DIM, h, &mut rng),
                    Linear::new(&mut store, "mlp.fc1", h, h, &mut rng),
                    Linear::new(&mut store, "mlp.fc2", h, cfg.n_classes, &mut rng),
                ];
                Head::Mlp { layers }
            }
        };
        let mut model = Model {
            choice,
            cfg: cfg.clone(),
            store,
            norm,
            encoder,
            head,
        };
        if cfg.encoder_mode == EncoderMode::Frozen {
            model.freeze_encoder();
        }
        Ok(model)
    }

    fn freeze_encoder(&mut self) {
        let ids: Vec<ParamId> = self
            .store
            .ids()
            .filter(|&id| self.store.name(id).starts_with("encoder."))
            .collect();
        let mut frozen = ParamStore::new();
        for id in self.store.ids() {
            let trainable = self.store.is_trainable(id) && !ids.contains(&id);
            frozen.add(self.store.name(id), self.store.get(id).clone(), trainable);
        }
        self.store = frozen;
    }

    pub fn n_classes(&self) -> usize {
        self.cfg.n_classes
    }

    pub fn tile_feature_dim(&self) -> usize {
        self.cfg.tile_feature_dim()
    }

    /// Standardization statistics from training samples. Cell features use
    /// every cell of the samples; tile features use every tile, all 84 columns
    /// when the encoder is frozen and the 68 metric columns otherwise.
    pub fn fit_normalization(&mut self, samples: &[RoISample]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Empty("no samples to fit normalization".into()));
        }
        let (shift, scale) = match self.choice.kind {
            ModelKind::Mlp => column_stats(samples.iter().map(|s| s.cell_mean.to_vec()), CELL_FEATURE_DIM),
            _ => column_stats(
                samples
                    .iter()
                    .flat_map(|s| s.cell_graphs.iter())
                    .flat_map(|g| (0..g.n_nodes()).map(move |i| g.node_features(i).to_vec())),
                CELL_FEATURE_DIM,
            ),
        };
        *self.store.get_mut(self.norm.cell_shift) = Tensor::row_vector(shift);
        *self.store.get_mut(self.norm.cell_scale) = Tensor::row_vector(scale);
        if !self.choice.kind.uses_tiles() {
            return Ok(());
        }
        let dim = self.tile_feature_dim();
        let frozen = self.cfg.encoder_mode == EncoderMode::Frozen;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for s in samples {
            let emb = if frozen { Some(self.tile_embeddings(s)?) } else { None };
            for t in 0..s.n_tiles() {
                let mut r = s.metrics_row(t).to_vec();
                match &emb {
                    Some(e) => r.extend_from_slice(&e[t * self.cfg.cell_embed_dim..(t + 1) * self.cfg.cell_embed_dim]),
                    None => r.extend(std::iter::repeat_n(0.0, self.cfg.cell_embed_dim)),
                }
                rows.push(r);
            }
        }
        let (mut shift, mut scale) = column_stats(rows.into_iter(), dim);
        if !frozen {
            for j in N_METRICS..dim {
                shift[j] = 0.0;
                scale[j] = 1.0;
            }
        }
        *self.store.get_mut(self.norm.tile_shift) = Tensor::row_vector(shift);
        *self.store.get_mut(self.norm.tile_scale) = Tensor::row_vector(scale);
        Ok(())
    }

    /// Hash of everything the tile embeddings depend on.
    pub fn encoder_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for id in self.store.ids() {
            let name = self.store.name(id);
            if name.starts_with("encoder.") || name.starts_with("norm.cell") {
                name.hash(&mut h);
                for v in self.store.get(id).data() {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Run the cell encoder over a batch of tiles: `tiles x embed_dim`.
    /// Empty tiles map to zero rows.
    fn encode_batch(&self, tape: &mut Tape, p: &Bound, graphs: &[&SpatialGraph]) -> Result<Var> {
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::ModelMismatch("model has no cell encoder".into()))?;
        let mut offsets = Vec::with_capacity(graphs.len() + 1);
        offsets.push(0usize);
        let mut feats = Vec::new();
        let mut edges = Vec::new();
        for g in graphs {
            if g.feature_dim != CELL_FEATURE_DIM {
                return Err(Error::Shape(format!(
                    "cell graph has {} features, expected {CELL_FEATURE_DIM}",
                    g.feature_dim
                )));
            }
            let base = *offsets.last().unwrap();
            feats.extend_from_slice(&g.features);
            edges.extend(g.edges.iter().map(|&(i, j)| (i + base, j + base)));
            offsets.push(base + g.n_nodes());
        }
        let n = *offsets.last().unwrap();
        let d = self.cfg.cell_embed_dim;
        if n == 0 {
            return Ok(tape.constant(Tensor::zeros(graphs.len(), d)));
        }
        let x = tape.constant(Tensor::new(n, CELL_FEATURE_DIM, feats)?);
        let x = tape.add_row(x, p.var(self.norm.cell_shift));
        let mut h = tape.mul_row(x, p.var(self.norm.cell_scale));
        let w = tape.constant(Tensor::filled(1, edges.len(), 1.0));
        let edges: Rc<[(usize, usize)]> = edges.into();
        for conv in &enc.convs {
            let z = conv.forward(tape, p, h, w, &edges)?;
            h = tape.relu(z);
        }
        let pooled = tape.segment_mean(h, offsets.clone().into());
        let e = enc.out.forward(tape, p, pooled)?;
        if offsets.windows(2).all(|w| w[1] > w[0]) {
            return Ok(e);
        }
        let mask: Rc<[f64]> = offsets
            .windows(2)
            .flat_map(|w| std::iter::repeat_n(if w[1] > w[0] { 1.0 } else { 0.0 }, d))
            .collect();
        Ok(tape.mask_mul(e, mask))
    }

    /// Embedding of one cell graph. Zero for an empty graph.
    pub fn encode_tile(&self, g: &SpatialGraph) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let e = self.encode_batch(&mut tape, &p, &[g])?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Embeddings of every tile of `s` (row-major), from the cache when it
    /// was filled by this encoder.
    pub fn tile_embeddings(&self, s: &RoISample) -> Result<Arc<Vec<f64>>> {
        let fp = self.encoder_fingerprint();
        if let Some((cached, e)) = &s.embeddings {
            if *cached == fp {
                return Ok(e.clone());
            }
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let graphs: Vec<&SpatialGraph> = s.cell_graphs.iter().map(|g| g.as_ref()).collect();
        let e = self.encode_batch(&mut tape, &p, &graphs)?;
        Ok(Arc::new(tape.value(e).data().to_vec()))
    }

    /// Cache tile embeddings in `s`. Only meaningful for a frozen encoder.
    pub fn prepare(&self, s: &mut RoISample) -> Result<()> {
        if self.choice.kind.uses_tiles() && self.cfg.encoder_mode == EncoderMode::Frozen {
            let e = self.tile_embeddings(s)?;
            s.embeddings = Some((self.encoder_fingerprint(), e));
        }
        Ok(())
    }

    /// Standardized tile features `tiles x 84`, optionally masked.
    pub fn tile_input(&self, tape: &mut Tape, p: &Bound, s: &RoISample, feature_mask: Option<Var>) -> Result<Var> {
        let t = s.n_tiles();
        if t == 0 {
            return Err(Error::Empty(format!("roi {} has an empty tile graph", s.roi_id)));
        }
        if s.tile_graph.feature_dim != N_METRICS || s.tile_graph.n_nodes() != t {
            return Err(Error::Shape(format!("roi {}: malformed tile graph", s.roi_id)));
        }
        let metrics = tape.constant(Tensor::new(t, N_METRICS, s.tile_graph.features.clone())?);
        let frozen = self.cfg.encoder_mode == EncoderMode::Frozen;
        let emb = if frozen {
            let e = self.tile_embeddings(s)?;
            tape.constant(Tensor::new(t, self.cfg.cell_embed_dim, e.to_vec())?)
        } else {
            let graphs: Vec<&SpatialGraph> = s.cell_graphs.iter().map(|g| g.as_ref()).collect();
            self.encode_batch(tape, p, &graphs)?
        };
        let x = tape.concat_cols(&[metrics, emb]);
        let x = tape.add_row(x, p.var(self.norm.tile_shift));
        let x = tape.mul_row(x, p.var(self.norm.tile_scale));
        Ok(match feature_mask {
            Some(m) => tape.mul_row(x, m),
            None => x,
        })
    }

    /// Class logits (`1 x C`) of one sample.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, s: &RoISample, opts: ForwardOpts<'_>) -> Result<Var> {
        let ForwardOpts {
            edge_weights,
            feature_mask,
            mut dropout_rng,
        } = opts;
        let rate = self.cfg.dropout;
        let mut drop = |tape: &mut Tape, x: Var| match dropout_rng.as_deref_mut() {
            Some(rng) => dropout(tape, x, rate, true, rng),
            None => x,
        };
        match &self.head {
            Head::Gcn { .. } => {
                let x = self.tile_input(tape, p, s, feature_mask)?;
                let edges: Rc<[(usize, usize)]> = s.tile_graph.edges.clone().into();
                let w = match edge_weights {
                    Some(w) => w,
                    None => tape.constant(Tensor::row_vector(s.tile_graph.edge_weights.clone())),
                };
                self.gcn_head(tape, p, x, w, &edges, dropout_rng)
            }
            Head::Mil { u, v, fc1, fc2 } => {
                let x = self.tile_input(tape, p, s, feature_mask)?;
                let pooled = if self.choice.kind == ModelKind::MilAttention {
                    let a = self.attention_weights(tape, p, x, *u, *v);
                    let at = tape.transpose(a);
                    tape.matmul(at, x)
                } else {
                    readout(tape, x, Readout::Mean)?
                };
                let pooled = drop(tape, pooled);
                let h = fc1.forward(tape, p, pooled)?;
                let h = tape.relu(h);
                fc2.forward(tape, p, h)
            }
            Head::Mlp { layers } => {
                let x = tape.constant(Tensor::row_vector(s.cell_mean.to_vec()));
                let x = tape.add_row(x, p.var(self.norm.cell_shift));
                let mut h = tape.mul_row(x, p.var(self.norm.cell_scale));
                for (l, layer) in layers.iter().enumerate() {
                    h = layer.forward(tape, p, h)?;
                    if l + 1 < layers.len() {
                        h = tape.relu(h);
                        h = drop(tape, h);
                    }
                }
                Ok(h)
            }
        }
    }

    /// Tile-graph layers, readout and classifier applied to prepared tile
    /// features `x` with edge weights `w`.
    pub fn gcn_head(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        w: Var,
        edges: &Rc<[(usize, usize)]>,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let Head::Gcn { convs, out } = &self.head else {
            return Err(Error::ModelMismatch(format!("{} has no tile-graph layers", self.choice)));
        };
        let mut h = x;
        for conv in convs {
            let z = conv.forward(tape, p, h, w, edges)?;
            h = tape.relu(z);
        }
        let mut g = readout(tape, h, self.choice.readout)?;
        if let Some(rng) = dropout_rng {
            g = dropout(tape, g, self.cfg.dropout, true, rng);
        }
        out.forward(tape, p, g)
    }

    /// Standardized tile features of `s` as a plain tensor.
    pub fn tile_features(&self, s: &RoISample) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = self.tile_input(&mut tape, &p, s, None)?;
        Ok(tape.value(x).clone())
    }

    fn attention_weights(&self, tape: &mut Tape, p: &Bound, x: Var, u: ParamId, v: ParamId) -> Var {
        let hu = tape.matmul(x, p.var(u));
        let th = tape.tanh(hu);
        let scores = tape.matmul(th, p.var(v));
        tape.softmax_cols(scores)
    }

    /// Attention weight of each tile (MIL attention models only).
    pub fn attention(&self, s: &RoISample) -> Result<Vec<f64>> {
        let Head::Mil { u, v, .. } = &self.head else {
            return Err(Error::ModelMismatch("model has no attention pooling".into()));
        };
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = self.tile_input(&mut tape, &p, s, None)?;
        let a = if self.choice.kind == ModelKind::MilAttention {
            self.attention_weights(&mut tape, &p, x, *u, *v)
        } else {
            let n = s.n_tiles();
            tape.constant(Tensor::filled(n, 1, 1.0 / n as f64))
        };
        Ok(tape.value(a).data().to_vec())
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, s: &RoISample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let z = self.forward(&mut tape, &p, s, ForwardOpts::eval())?;
        let out = tape.value(z).data().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("non-finite logits for roi {}", s.roi_id)));
        }
        Ok(out)
    }

    pub fn label(&self, s: &RoISample) -> usize {
        self.cfg.class_of(s.stage)
    }
}

/// Per-column mean and reciprocal standard deviation, returned as the shift
/// (`-mean`) and scale applied by the model. Constant columns keep scale 1.
fn column_stats(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for r in rows {
        n += 1;
        for j in 0..dim {
            let d = r[j] - mean[j];
            mean[j] += d / n as f64;
            m2[j] += d * (r[j] - mean[j]);
        }
    }
    let scale = m2
        .iter()
        .map(|&s| {
            let sd = if n > 1 { (s / n as f64).sqrt() } else { 0.0 };
            if sd > 1e-12 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    (mean.iter().map(|m| -m).collect(), scale)
}

/// Softmax of a logit vector.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::tiny_samples;
    use crate::model::{make_test_graph, ModelChoice};
    use rand::seq::SliceRandom;

    fn permuted_cells(g: &SpatialGraph, rng: &mut Rng) -> SpatialGraph {
        let n = g.n_nodes();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let pts: Vec<[f64; 2]> = order.iter().map(|&i| g.coords[i]).collect();
        let feats: Vec<f64> = order.iter().flat_map(|&i| g.node_features(i).to_vec()).collect();
        let labels: Vec<_> = order.iter().map(|&i| g.labels.as_ref().unwrap()[i]).collect();
        crate::graph::build_graph(&pts, feats, g.feature_dim, 30.0)
            .unwrap()
            .with_labels(labels)
            .unwrap()
    }

    #[test]
    fn logits_have_class_count() {
        let samples = tiny_samples(1, 20, 1);
        for name in ModelChoice::NAMES {
            let m = Model::new(name.parse().unwrap(), &HierModelConfig::default(), 3).unwrap();
            assert_eq!(m.logits(&samples[0]).unwrap().len(), 3, "{name}");
        }
    }

    #[test]
    fn embedding_has_16_entries_and_empty_tile_is_zero() {
        let samples = tiny_samples(1, 30, 2);
        let m = Model::new("gcn-mean".parse().unwrap(), &HierModelConfig::default(), 1).unwrap();
        let g = samples[0].cell_graphs.iter().find(|g| g.n_nodes() > 0).unwrap();
        let e = m.encode_tile(g).unwrap();
        assert_eq!(e.len(), 16);
        assert!(e.iter().any(|v| *v != 0.0));
        let empty = SpatialGraph::empty(7);
        assert_eq!(m.encode_tile(&empty).unwrap(), vec![0.0; 16]);
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let samples = tiny_samples(1, 20, 3);
        let mut m = Model::new("gcn-max".parse().unwrap(), &HierModelConfig::default(), 1).unwrap();
        let ids: Vec<ParamId> = m.store.ids().filter(|&id| m.store.is_trainable(id)).collect();
        for id in ids {
            let [r, c] = m.store.get(id).shape();
            *m.store.get_mut(id) = Tensor::zeros(r, c);
        }
        assert_eq!(m.logits(&samples[0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn invariant_to_tile_and_cell_order() {
        let cfg = HierModelConfig::default();
        let samples = tiny_samples(1, 40, 4);
        let s = make_test_graph(&samples[0], &cfg).unwrap();
        let mut rng = seed::rng(7);
        for name in ["gcn-mean", "gcn-add", "gcn-max", "mil-att"] {
            let mut m = Model::new(name.parse().unwrap(), &cfg, 5).unwrap();
            m.fit_normalization(std::slice::from_ref(&s)).unwrap();
            let base = m.logits(&s).unwrap();
            let mut order: Vec<usize> = (0..s.n_tiles()).collect();
            order.shuffle(&mut rng);
            let mut p = s.clone();
            p.tiles = order.iter().map(|&t| s.tiles[t]).collect();
            p.cell_graphs = order
                .iter()
                .map(|&t| Arc::new(permuted_cells(&s.cell_graphs[t], &mut rng)))
                .collect();
            let coords: Vec<[f64; 2]> = order.iter().map(|&t| s.tile_graph.coords[t]).collect();
            let feats: Vec<f64> = order.iter().flat_map(|&t| s.metrics_row(t).to_vec()).collect();
            p.tile_graph = crate::graph::build_graph(&coords, feats, N_METRICS, 200.0).unwrap();
            let got = m.logits(&p).unwrap();
            for (a, b) in base.iter().zip(&got) {
                assert!((a - b).abs() <= 1e-9, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mil_attention_weights_sum_to_one() {
        let samples = tiny_samples(1, 25, 5);
        let m = Model::new("mil-att".parse().unwrap(), &HierModelConfig::default(), 2).unwrap();
        let a = m.attention(&samples[0]).unwrap();
        assert_eq!(a.len(), 25);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mil_mean_equals_attention_with_constant_scores() {
        let cfg = HierModelConfig::default();
        let samples = tiny_samples(1, 25, 6);
        let mut att = Model::new("mil-att".parse().unwrap(), &cfg, 2).unwrap();
        let v = att.store.find("mil.v").unwrap();
        *att.store.get_mut(v) = Tensor::zeros(cfg.hidden_dim, 1);
        let mut mean = Model::new("mil-mean".parse().unwrap(), &cfg, 2).unwrap();
        mean.store = att.store.clone();
        let (a, b) = (att.logits(&samples[0]).unwrap(), mean.logits(&samples[0]).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_tile_pooling_modes_agree() {
        let cfg = HierModelConfig::default();
        let samples = tiny_samples(1, 1, 7);
        let att = Model::new("mil-att".parse().unwrap(), &cfg, 4).unwrap();
        let mut mean = Model::new("mil-mean".parse().unwrap(), &cfg, 4).unwrap();
        mean.store = att.store.clone();
        assert_eq!(att.logits(&samples[0]).unwrap(), mean.logits(&samples[0]).unwrap());
    }

    #[test]
    fn mlp_ignores_cell_order() {
        let samples = tiny_samples(1, 5, 8);
        let m = Model::new("mlp".parse().unwrap(), &HierModelConfig::default(), 4).unwrap();
        let mut s = samples[0].clone();
        s.tiles.clear();
        s.cell_graphs.clear();
        assert_eq!(m.logits(&s).unwrap(), m.logits(&samples[0]).unwrap());
    }

    #[test]
    fn frozen_cache_matches_live_embeddings() {
        let cfg = HierModelConfig {
            encoder_mode: EncoderMode::Frozen,
            ..HierModelConfig::default()
        };
        let samples = tiny_samples(1, 30, 9);
        let mut m = Model::new("gcn-mean".parse().unwrap(), &cfg, 4).unwrap();
        m.fit_normalization(&samples).unwrap();
        let live = m.logits(&samples[0]).unwrap();
        let mut cached = samples[0].clone();
        m.prepare(&mut cached).unwrap();
        assert!(cached.embeddings.is_some());
        assert_eq!(m.logits(&cached).unwrap(), live);
        assert!(m.store.ids().filter(|&id| m.store.name(id).starts_with("encoder.")).all(|id| !m.store.is_trainable(id)));
    }

    #[test]
    fn empty_tile_graph_is_an_error() {
        let samples = tiny_samples(1, 3, 10);
        let m = Model::new("gcn-add".parse().unwrap(), &HierModelConfig::default(), 4).unwrap();
        let mut s = samples[0].clone();
        s.tiles.clear();
        s.cell_graphs.clear();
        s.tile_graph = SpatialGraph::empty(N_METRICS);
        assert!(m.logits(&s).is_err());
    }
}
