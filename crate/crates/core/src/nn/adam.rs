use ndarray::Array2;

use super::graph::Gradients;
use super::params::ParamStore;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = |id| Array2::zeros(params.get(id).dim());
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.ids().map(zeros).collect(),
            v: params.ids().map(zeros).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::default();
        let w = store.add("w", Array2::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let p = g.param(w);
                let s = g.square(p);
                let l = g.sum_all(s);
                g.backward(l)
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(w).iter().all(|v| v.abs() < 1e-2));
    }
}
