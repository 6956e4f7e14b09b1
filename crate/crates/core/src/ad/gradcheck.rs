//! Central finite-difference checks for every differentiable op.
//!
//! Each case draws its differentiable inputs plus any fixed structure
//! (edges, labels, masks), reduces the op output to a scalar through a
//! random projection, and compares every input partial with
//! `(f(x + h) - f(x - h)) / 2h`.

use std::rc::Rc;

use rand::Rng as _;

use super::nn::{Bound, GraphConv, Linear, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::seed::{self, Rng};

pub const STEP: f64 = 1e-5;
/// Partials smaller than this are compared on an absolute scale.
const FLOOR: f64 = 1e-3;
const GRAPH_N: usize = 8;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Default)]
struct Aux {
    edges: Option<Rc<[(usize, usize)]>>,
    labels: Vec<usize>,
    class_weights: Vec<f64>,
    mask: Option<Rc<[f64]>>,
    index: usize,
}

struct Case {
    op: &'static str,
    inputs: fn(&mut Rng) -> (Vec<Tensor>, Aux),
    build: fn(&mut Tape, &[Var], &Aux) -> Var,
}

fn rand_t(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero so the ReLU kink is never straddled.
fn away_from_zero(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    rand_t(rng, r, c).map(|x| if x >= 0.0 { x + 0.05 } else { x - 0.05 })
}

fn positive(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    rand_t(rng, r, c).map(|x| x.abs() + 0.2)
}

/// Distinct entries per column, spaced well beyond the step.
fn distinct(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    let mut t = Tensor::zeros(r, c);
    for col in 0..c {
        let mut order: Vec<usize> = (0..r).collect();
        for i in (1..r).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for (rank, &row) in order.iter().enumerate() {
            t.data_mut()[row * c + col] = rank as f64 * 0.1 + rng.random_range(0.0..0.05);
        }
    }
    t
}

fn random_edges(n: usize, rng: &mut Rng) -> Rc<[(usize, usize)]> {
    let mut e = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < 0.4 {
                e.push((i, j));
            }
        }
    }
    if e.is_empty() {
        e.push((0, n - 1));
    }
    e.into()
}

fn plain(v: Vec<Tensor>) -> (Vec<Tensor>, Aux) {
    (v, Aux::default())
}

fn graph_inputs(rng: &mut Rng, extra: Vec<Tensor>) -> (Vec<Tensor>, Aux) {
    let edges = random_edges(GRAPH_N, rng);
    let mut v = vec![rand_t(rng, GRAPH_N, 3), rand_t(rng, 1, edges.len())];
    v.extend(extra);
    (
        v,
        Aux {
            edges: Some(edges),
            ..Aux::default()
        },
    )
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            op: "matmul",
            inputs: |r| plain(vec![rand_t(r, 3, 4), rand_t(r, 4, 2)]),
            build: |t, v, _| t.matmul(v[0], v[1]),
        },
        Case {
            op: "add",
            inputs: |r| plain(vec![rand_t(r, 3, 2), rand_t(r, 3, 2)]),
            build: |t, v, _| t.add(v[0], v[1]),
        },
        Case {
            op: "sub",
            inputs: |r| plain(vec![rand_t(r, 3, 2), rand_t(r, 3, 2)]),
            build: |t, v, _| t.sub(v[0], v[1]),
        },
        Case {
            op: "mul",
            inputs: |r| plain(vec![rand_t(r, 3, 2), rand_t(r, 3, 2)]),
            build: |t, v, _| t.mul(v[0], v[1]),
        },
        Case {
            op: "add_row",
            inputs: |r| plain(vec![rand_t(r, 4, 3), rand_t(r, 1, 3)]),
            build: |t, v, _| t.add_row(v[0], v[1]),
        },
        Case {
            op: "mul_row",
            inputs: |r| plain(vec![rand_t(r, 4, 3), rand_t(r, 1, 3)]),
            build: |t, v, _| t.mul_row(v[0], v[1]),
        },
        Case {
            op: "scale",
            inputs: |r| plain(vec![rand_t(r, 2, 3)]),
            build: |t, v, _| t.scale(v[0], -1.7),
        },
        Case {
            op: "add_scalar",
            inputs: |r| plain(vec![rand_t(r, 2, 3)]),
            build: |t, v, _| t.add_scalar(v[0], 0.3),
        },
        Case {
            op: "relu",
            inputs: |r| plain(vec![away_from_zero(r, 3, 3)]),
            build: |t, v, _| t.relu(v[0]),
        },
        Case {
            op: "sigmoid",
            inputs: |r| plain(vec![rand_t(r, 3, 3).map(|x| 4.0 * x)]),
            build: |t, v, _| t.sigmoid(v[0]),
        },
        Case {
            op: "tanh",
            inputs: |r| plain(vec![rand_t(r, 3, 3).map(|x| 2.0 * x)]),
            build: |t, v, _| t.tanh(v[0]),
        },
        Case {
            op: "ln",
            inputs: |r| plain(vec![positive(r, 3, 3)]),
            build: |t, v, _| t.ln(v[0]),
        },
        Case {
            op: "transpose",
            inputs: |r| plain(vec![rand_t(r, 2, 5)]),
            build: |t, v, _| t.transpose(v[0]),
        },
        Case {
            op: "neighbor_sum",
            inputs: |r| graph_inputs(r, vec![]),
            build: |t, v, a| t.neighbor_sum(v[0], v[1], a.edges.clone().unwrap()),
        },
        Case {
            op: "mean_rows",
            inputs: |r| plain(vec![rand_t(r, 5, 3)]),
            build: |t, v, _| t.mean_rows(v[0]),
        },
        Case {
            op: "sum_rows",
            inputs: |r| plain(vec![rand_t(r, 5, 3)]),
            build: |t, v, _| t.sum_rows(v[0]),
        },
        Case {
            op: "segment_mean",
            inputs: |r| plain(vec![rand_t(r, 7, 3)]),
            build: |t, v, _| t.segment_mean(v[0], vec![0, 2, 2, 6, 7].into()),
        },
        Case {
            op: "max_rows",
            inputs: |r| plain(vec![distinct(r, 5, 3)]),
            build: |t, v, _| t.max_rows(v[0]),
        },
        Case {
            op: "sum_all",
            inputs: |r| plain(vec![rand_t(r, 3, 4)]),
            build: |t, v, _| t.sum_all(v[0]),
        },
        Case {
            op: "mean_all",
            inputs: |r| plain(vec![rand_t(r, 3, 4)]),
            build: |t, v, _| t.mean_all(v[0]),
        },
        Case {
            op: "concat_cols",
            inputs: |r| plain(vec![rand_t(r, 3, 2), rand_t(r, 3, 4)]),
            build: |t, v, _| t.concat_cols(&[v[0], v[1]]),
        },
        Case {
            op: "concat_rows",
            inputs: |r| plain(vec![rand_t(r, 2, 3), rand_t(r, 4, 3)]),
            build: |t, v, _| t.concat_rows(&[v[0], v[1]]),
        },
        Case {
            op: "mask_mul",
            inputs: |r| {
                let mask: Rc<[f64]> = (0..9).map(|_| if r.random::<bool>() { 2.0 } else { 0.0 }).collect();
                (
                    vec![rand_t(r, 3, 3)],
                    Aux {
                        mask: Some(mask),
                        ..Aux::default()
                    },
                )
            },
            build: |t, v, a| t.mask_mul(v[0], a.mask.clone().unwrap()),
        },
        Case {
            op: "softmax_cols",
            inputs: |r| plain(vec![rand_t(r, 5, 2).map(|x| 3.0 * x)]),
            build: |t, v, _| t.softmax_cols(v[0]),
        },
        Case {
            op: "pick",
            inputs: |r| {
                let index = r.random_range(0..9);
                (
                    vec![rand_t(r, 3, 3)],
                    Aux {
                        index,
                        ..Aux::default()
                    },
                )
            },
            build: |t, v, a| t.pick(v[0], a.index),
        },
        Case {
            op: "weighted_cross_entropy",
            inputs: |r| {
                let labels = (0..6).map(|_| r.random_range(0..3)).collect();
                let class_weights = (0..3).map(|_| r.random_range(0.2..3.0)).collect();
                (
                    vec![rand_t(r, 6, 3).map(|x| 3.0 * x)],
                    Aux {
                        labels,
                        class_weights,
                        ..Aux::default()
                    },
                )
            },
            build: |t, v, a| t.weighted_cross_entropy(v[0], &a.labels, &a.class_weights),
        },
        Case {
            op: "linear",
            inputs: |r| plain(vec![rand_t(r, 4, 3), rand_t(r, 3, 2), rand_t(r, 1, 2)]),
            build: |t, v, _| {
                let mut s = ParamStore::new();
                let l = Linear::new(&mut s, "l", 3, 2, &mut seed::rng(0));
                l.forward(t, &Bound::from_vars(v[1..].to_vec()), v[0]).unwrap()
            },
        },
        Case {
            op: "graph_conv",
            inputs: |r| {
                let p = vec![rand_t(r, 3, 2), rand_t(r, 3, 2), rand_t(r, 1, 2)];
                graph_inputs(r, p)
            },
            build: |t, v, a| {
                let mut s = ParamStore::new();
                let l = GraphConv::new(&mut s, "g", 3, 2, &mut seed::rng(0));
                let p = Bound::from_vars(v[2..].to_vec());
                l.forward(t, &p, v[0], v[1], a.edges.as_ref().unwrap()).unwrap()
            },
        },
    ]
}

fn projection(seed: u64, shape: [usize; 2]) -> Tensor {
    rand_t(&mut seed::rng(seed), shape[0], shape[1])
}

/// `sum(op(inputs) * R)` and, when asked, its gradient per input.
fn eval(case: &Case, inputs: &[Tensor], aux: &Aux, proj_seed: u64, grad: bool) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = (case.build)(&mut tape, &vars, aux);
    let proj = tape.constant(projection(proj_seed, tape.shape(out)));
    let prod = tape.mul(out, proj);
    let loss = tape.sum_all(prod);
    let value = tape.value(loss).item();
    if !grad {
        return (value, Vec::new());
    }
    let g = tape.backward(loss);
    let grads = vars
        .iter()
        .map(|&v| {
            g.get(v).cloned().unwrap_or_else(|| {
                let [r, c] = tape.shape(v);
                Tensor::zeros(r, c)
            })
        })
        .collect();
    (value, grads)
}

fn check_case(case: &Case, instances: usize, root: u64) -> CheckResult {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let s = seed::derive(root, &[inst as u64]);
        let (inputs, aux) = (case.inputs)(&mut seed::rng(s));
        let (_, grads) = eval(case, &inputs, &aux, s, true);
        for (which, g) in grads.iter().enumerate() {
            for k in 0..g.len() {
                let mut shifted = inputs.clone();
                shifted[which].data_mut()[k] += STEP;
                let (fp, _) = eval(case, &shifted, &aux, s, false);
                shifted[which].data_mut()[k] -= 2.0 * STEP;
                let (fm, _) = eval(case, &shifted, &aux, s, false);
                let num = (fp - fm) / (2.0 * STEP);
                let ana = g.data()[k];
                let err = (num - ana).abs() / ana.abs().max(num.abs()).max(FLOOR);
                worst = worst.max(err);
            }
        }
    }
    CheckResult {
        op: case.op,
        instances,
        max_rel_err: worst,
    }
}

/// Run every op check on `instances` random instances.
pub fn run_all(instances: usize, root: u64) -> Vec<CheckResult> {
    cases().iter().map(|c| check_case(c, instances, root)).collect()
}
