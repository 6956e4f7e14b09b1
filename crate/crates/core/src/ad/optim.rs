use super::nn::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Adam with weight decay folded into the gradient (`g + wd * p`).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = |id| {
            let [r, c] = store.get(id).shape();
            Tensor::zeros(r, c)
        };
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grad(id)` yields the gradient of a trainable parameter,
    /// or `None` when it did not take part in the loss.
    pub fn step<'a>(&mut self, store: &mut ParamStore, grad: impl Fn(ParamId) -> Option<&'a Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            let g = grad(id);
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]) + self.weight_decay * p.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::tape::Tape;

    fn scalar_store(x: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(x), true);
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Adam::new(&s, 0.01, 0.0);
        let g = Tensor::scalar(3.7);
        opt.step(&mut s, |_| Some(&g));
        let moved = 1.0 - s.get(id).item();
        assert!((moved - 0.01).abs() < 1e-8, "moved {moved}");
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = scalar_store(0.3);
        let mut opt = Adam::new(&s, 0.1, 0.0);
        let g = Tensor::scalar(0.0);
        for _ in 0..5 {
            opt.step(&mut s, |_| Some(&g));
        }
        assert_eq!(s.get(id).item(), 0.3);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut s = ParamStore::new();
        let id = s.add("frozen", Tensor::scalar(2.0), false);
        let mut opt = Adam::new(&s, 0.1, 0.5);
        let g = Tensor::scalar(1.0);
        opt.step(&mut s, |_| Some(&g));
        assert_eq!(s.get(id).item(), 2.0);
    }

    #[test]
    fn quadratic_decreases_monotonically() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Adam::new(&s, 0.01, 0.0);
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let mut tape = Tape::new();
            let b = s.bind(&mut tape, true);
            let x = b.var(id);
            let f = tape.mul(x, x);
            let fv = tape.value(f).item();
            assert!(fv < last, "{fv} !< {last}");
            last = fv;
            let grads = tape.backward(f);
            opt.step(&mut s, |pid| grads.get(b.var(pid)));
        }
        assert!(last < 0.2);
    }
}
