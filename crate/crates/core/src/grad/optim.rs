use super::param::ParamStore;
use super::tensor::Tensor;

/// Cosine decay from `start` to `end` over `steps` updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.start;
        }
        let p = (step.min(self.steps - 1)) as f64 / (self.steps - 1) as f64;
        self.end + 0.5 * (self.start - self.end) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Adam with decoupled weight decay. Frozen parameters are never touched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grads[i].data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule { start: 1e-4, end: 2e-5, steps: 100 };
        assert_eq!(s.at(0), 1e-4);
        assert!((s.at(99) - 2e-5).abs() < 1e-18);
        assert!((1..100).all(|i| s.at(i) <= s.at(i - 1)));
    }

    #[test]
    fn adamw_minimizes_quadratic_and_skips_frozen() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::scalar(3.0)).unwrap();
        let b = store.insert("b", Tensor::scalar(3.0)).unwrap();
        store.param_mut(b).trainable = false;
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..2000 {
            let x = store.param(a).tensor.item();
            let g = vec![Tensor::scalar(2.0 * x), Tensor::scalar(1.0)];
            opt.step(&mut store, &g, 0.01);
        }
        assert!(store.param(a).tensor.item().abs() < 1e-2);
        assert_eq!(store.param(b).tensor.item(), 3.0);
    }
}
