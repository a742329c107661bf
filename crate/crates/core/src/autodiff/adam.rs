use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update. Every parameter must carry a gradient;
    /// gradients are consumed.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "optimizer tracks {} tensors, parameter set has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(id) = params.ids().find(|&id| params.grad(id).is_none()) {
            return Err(Error::MissingGrad(params.name(id).to_string()));
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let one = T::one();
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let grad = params.grad(id).cloned().expect("checked above");
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let w = params.value_mut(id).data_mut();
            for k in 0..w.len() {
                let g = grad.data()[k];
                m[k] = b1 * m[k] + (one - b1) * g;
                v[k] = b2 * v[k] + (one - b2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::tensor::Shape;

    fn scalar_set(w: f64) -> (ParamSet<f64>, super::super::ParamId) {
        let mut p = ParamSet::new();
        let id = p.add("w", Tensor::scalar(w));
        (p, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, id) = scalar_set(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        p.set_grad(id, Tensor::scalar(1.0));
        adam.step(&mut p).unwrap();
        assert!((p.value(id).item() - 0.998).abs() < 1e-9);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let (mut p, id) = scalar_set(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        p.set_grad(id, Tensor::scalar(0.0));
        adam.step(&mut p).unwrap();
        assert_eq!(p.value(id).item(), 1.0);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let (mut p, _) = scalar_set(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        match adam.step(&mut p) {
            Err(Error::MissingGrad(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn quadratic_decreases_monotonically() {
        let (mut p, id) = scalar_set(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let mut g = Graph::new();
            let b = p.bind(&mut g, true);
            let sq = g.square(b.get(id));
            let loss = g.sum(sq);
            let f = g.value(loss).item();
            assert!(f < prev, "f(w) did not decrease: {f} ≥ {prev}");
            prev = f;
            g.backward(loss).unwrap();
            p.collect_grads(&mut g, &b);
            adam.step(&mut p).unwrap();
        }
        assert_eq!(p.value(id).shape(), Shape::scalar());
    }
}
