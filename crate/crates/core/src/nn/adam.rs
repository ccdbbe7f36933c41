use ndarray::{ArrayD, Zip};

use super::params::{Grads, ParamStore};
use crate::real::Real;

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>, lr: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect::<Vec<_>>();
        Adam {
            lr: F::lit(lr),
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            eps: F::lit(1e-8),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &Grads<F>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, (id, g)) in params.ids().collect::<Vec<_>>().into_iter().zip(grads.iter()).enumerate() {
            let p = params.get_mut(id);
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }

    /// First and second moments as named tensors, for checkpointing.
    pub fn state(&self, params: &ParamStore<F>) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for ((name, _), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            out.add(format!("adam.m.{name}"), m.clone());
            out.add(format!("adam.v.{name}"), v.clone());
        }
        out
    }

    pub fn load_state(&mut self, params: &ParamStore<F>, state: &ParamStore<F>, step: u64) -> Result<(), String> {
        for (i, (name, t)) in params.iter().enumerate() {
            for (slot, kind) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                let key = format!("adam.{kind}.{name}");
                let id = state.find(&key).ok_or_else(|| format!("missing optimizer tensor {key}"))?;
                let src = state.get(id);
                if src.shape() != t.shape() {
                    return Err(format!("optimizer tensor {key} has shape {:?}", src.shape()));
                }
                *slot = src.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}
