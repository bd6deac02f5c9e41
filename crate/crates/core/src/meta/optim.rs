use crate::model::NamedArrays;
use crate::real::Real;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<R: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: NamedArrays<R>,
    pub v: NamedArrays<R>,
}

impl<R: Real> AdamW<R> {
    pub fn new(layout: &NamedArrays<R>, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: layout.zeros_like(),
            v: layout.zeros_like(),
        }
    }

    pub fn apply(&mut self, params: &mut NamedArrays<R>, grads: &NamedArrays<R>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (R::of(self.beta1), R::of(self.beta2));
        let decay = R::of(1.0 - self.lr * self.weight_decay);
        let lr = R::of(self.lr);
        let eps = R::of(self.eps);
        for (name, p) in params.0.iter_mut() {
            let g = &grads.0[name].data;
            let m = &mut self.m.0.get_mut(name).expect("moment layout").data;
            let v = &mut self.v.0.get_mut(name).expect("moment layout").data;
            for i in 0..p.data.len() {
                m[i] = b1 * m[i] + (R::one() - b1) * g[i];
                v[i] = b2 * v[i] + (R::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / R::of(bc1);
                let v_hat = v[i] / R::of(bc2);
                p.data[i] = p.data[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
