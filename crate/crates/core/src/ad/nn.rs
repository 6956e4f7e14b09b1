use std::rc::Rc;

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named tensors owned by a model. Frozen entries are carried along in
/// checkpoints but never touched by the optimizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

/// Parameters placed on a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Bind parameters to vars already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        self.trainable.push(trainable);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Push every parameter onto `tape`. With `track` false nothing is
    /// differentiated, which is what inference and attribution want.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| {
                if track && tr {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Replace values from `named` tensors, checking names and shapes.
    pub fn load(&mut self, named: &[NamedTensor]) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::ModelMismatch(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.tensors.len()
            )));
        }
        for nt in named {
            let id = self
                .find(&nt.name)
                .ok_or_else(|| Error::ModelMismatch(format!("unexpected tensor {}", nt.name)))?;
            let want = self.tensors[id.0].shape();
            if nt.shape != want {
                return Err(Error::ModelMismatch(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    nt.name, nt.shape, want
                )));
            }
            self.tensors[id.0] = Tensor::new(want[0], want[1], nt.data.clone())
                .map_err(|e| Error::ModelMismatch(e.to_string()))?;
        }
        Ok(())
    }

    pub fn export(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| NamedTensor {
                name: n.clone(),
                shape: t.shape(),
                data: t.data().to_vec(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Glorot-uniform matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

/// Uniform on `±1/sqrt(rows)`, the usual default for dense layers.
pub fn fan_in_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let a = 1.0 / (rows.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.weight"), fan_in_uniform(d_in, d_out, rng), true);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(1, d_out), true);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let [_, c] = tape.shape(x);
        if c != self.d_in {
            return Err(Error::Shape(format!("linear expects {} inputs, got {c}", self.d_in)));
        }
        let xw = tape.matmul(x, p.var(self.w));
        Ok(tape.add_row(xw, p.var(self.b)))
    }
}

/// `out_v = h_v W1 + (sum_u w_uv h_u) W2 + b`.
#[derive(Debug, Clone, Copy)]
pub struct GraphConv {
    pub w1: ParamId,
    pub w2: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl GraphConv {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let w1 = store.add(format!("{name}.w1"), fan_in_uniform(d_in, d_out, rng), true);
        let w2 = store.add(format!("{name}.w2"), fan_in_uniform(d_in, d_out, rng), true);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(1, d_out), true);
        GraphConv { w1, w2, b, d_in, d_out }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h: Var,
        edge_weights: Var,
        edges: &Rc<[(usize, usize)]>,
    ) -> Result<Var> {
        let [n, c] = tape.shape(h);
        if c != self.d_in {
            return Err(Error::Shape(format!("graph conv expects {} features, got {c}", self.d_in)));
        }
        if tape.value(edge_weights).len() != edges.len() {
            return Err(Error::Shape(format!(
                "{} edge weights for {} edges",
                tape.value(edge_weights).len(),
                edges.len()
            )));
        }
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(Error::Shape(format!("edge ({i}, {j}) out of range for {n} nodes")));
        }
        let own = tape.matmul(h, p.var(self.w1));
        let agg = tape.neighbor_sum(h, edge_weights, edges.clone());
        let msg = tape.matmul(agg, p.var(self.w2));
        let s = tape.add(own, msg);
        Ok(tape.add_row(s, p.var(self.b)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    #[default]
    Mean,
    Add,
    Max,
}

impl Readout {
    pub fn name(self) -> &'static str {
        match self {
            Readout::Mean => "mean",
            Readout::Add => "add",
            Readout::Max => "max",
        }
    }
}

pub fn readout(tape: &mut Tape, h: Var, mode: Readout) -> Result<Var> {
    if tape.shape(h)[0] == 0 {
        return Err(Error::Empty("readout over zero nodes".into()));
    }
    Ok(match mode {
        Readout::Mean => tape.mean_rows(h),
        Readout::Add => tape.sum_rows(h),
        Readout::Max => tape.max_rows(h),
    })
}

/// Inverted dropout. Identity when `p` is 0 or outside training.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, training: bool, rng: &mut Rng) -> Var {
    if !training || p == 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Rc<[f64]> = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mask_mul(x, mask)
}
