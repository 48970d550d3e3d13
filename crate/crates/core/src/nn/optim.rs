use super::{Gradients, NnError, ParameterStore, Tensor};

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(store: &ParameterStore, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: store.zero_gradients(),
            v: store.zero_gradients(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &Gradients {
        &self.m
    }

    pub fn second_moments(&self) -> &Gradients {
        &self.v
    }

    /// Reinstates saved optimizer state; moment tensors must match the store.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<(), NnError> {
        let same = |ts: &[Tensor]| {
            ts.len() == self.m.len()
                && ts
                    .iter()
                    .zip(self.m.iter())
                    .all(|(a, (_, b))| a.shape() == b.shape())
        };
        if !same(&m) || !same(&v) {
            return Err(NnError::LayoutMismatch(
                "optimizer moments do not match the parameter layout".into(),
            ));
        }
        self.step = step;
        self.m = Gradients::from_tensors(m);
        self.v = Gradients::from_tensors(v);
        Ok(())
    }

    pub fn update(&mut self, store: &mut ParameterStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}
