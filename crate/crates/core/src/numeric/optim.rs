use super::params::{Grads, ParamStore};

/// Adam with per-parameter learning rates and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: Grads::zeros_like(store),
            v: Grads::zeros_like(store),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `lr` maps a parameter name to its learning rate.
    pub fn step<F>(&mut self, store: &mut ParamStore, grads: &Grads, lr: F)
    where
        F: Fn(&str) -> f64,
    {
        self.step += 1;
        let clip = match self.clip_norm {
            Some(max) => {
                let n = grads.norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let rate = lr(store.name(id));
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi * clip;
            }
            let v = self.v.get_mut(id).data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * (gi * clip) * (gi * clip);
            }
            if rate == 0.0 {
                continue;
            }
            let (m, v) = (self.m.get(id).data(), self.v.get(id).data());
            let p = store.get_mut(id).data_mut();
            for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
                *pi -= rate * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![5.0, -3.0])).unwrap();
        let mut opt = Adam::new(&s);
        for _ in 0..2000 {
            let mut g = Grads::zeros_like(&s);
            let w = s.get(id).data().to_vec();
            g.get_mut(id)
                .data_mut()
                .copy_from_slice(&[2.0 * w[0], 2.0 * w[1]]);
            opt.step(&mut s, &g, |_| 0.05);
        }
        assert!(s.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_rate_leaves_parameters_bit_identical() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![0.1, 0.2])).unwrap();
        let before = s.clone();
        let mut opt = Adam::new(&s);
        let mut g = Grads::zeros_like(&s);
        g.get_mut(id).data_mut().copy_from_slice(&[1.0, -1.0]);
        opt.step(&mut s, &g, |_| 0.0);
        assert_eq!(s, before);
    }
}
