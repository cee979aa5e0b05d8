use crate::model::Real;

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u32,
}

/// Hyper-parameters of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// One update. `decay[i]` marks parameters that receive weight decay;
    /// an empty slice means none do.
    pub fn step(&mut self, params: &mut [T], grads: &[T], decay: &[bool], hp: &AdamParams) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), params.len());
        assert!(decay.is_empty() || decay.len() == params.len());
        self.t += 1;
        let lr = T::lit(hp.lr);
        let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
        let eps = T::lit(hp.eps);
        let shrink = T::one() - lr * T::lit(hp.weight_decay);
        let c1 = T::one() - T::lit(hp.beta1.powi(self.t as i32));
        let c2 = T::one() - T::lit(hp.beta2.powi(self.t as i32));
        for i in 0..params.len() {
            let g = grads[i];
            if decay.get(i).copied().unwrap_or(false) {
                params[i] = params[i] * shrink;
            }
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] = params[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
