use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily to match
/// the store they first step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let grad = p.grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        store.scale_grads(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::Array;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = ParamStore::new();
        s.add("x", Array::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let before = s.value(crate::ParamId(0)).clone();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut s);
        }
        assert_eq!(s.value(crate::ParamId(0)), &before);
    }

    #[test]
    fn one_step_on_square_descends() {
        let mut s = ParamStore::new();
        let id = s.add("x", Array::new(vec![1], vec![1.0]).unwrap()).unwrap();
        s.get_mut(id).grad.data_mut()[0] = 2.0; // d/dx x^2 at 1
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        adam.step(&mut s);
        assert!(s.value(id).data()[0] < 1.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x, y) = (x - 3)^2 + 10 (y + 1)^2, minimum at (3, -1)
        let mut s = ParamStore::new();
        let id = s.add("p", Array::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        let grad = |p: &[f64]| [2.0 * (p[0] - 3.0), 20.0 * (p[1] + 1.0)];
        for _ in 0..200 {
            let g = grad(s.value(id).data());
            s.get_mut(id).grad.data_mut().copy_from_slice(&g);
            adam.step(&mut s);
        }
        let g = grad(s.value(id).data());
        assert!((g[0] * g[0] + g[1] * g[1]).sqrt() < 1e-3, "grad {g:?}");
    }
}
