use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named learnable tensors of one network plus their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph handles of a [`ParamSet`] bound for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles already in a graph, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.grads.push(None);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn grads(&self) -> &[Option<Tensor<T>>] {
        &self.grads
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads[id.0] = Some(grad);
    }

    /// Euclidean norm over every stored gradient.
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their joint norm is at most `max` (no-op
    /// when `max` is 0). Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max: f64) -> f64 {
        let norm = self.grad_norm();
        if max > 0.0 && norm > max {
            let k = T::of(max / norm);
            for g in self.grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        norm
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Inserts every parameter into `graph`, tracked when `trainable`.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    graph.param(v.clone())
                } else {
                    graph.input(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Copies gradients from `graph` back onto the set. Parameters that did
    /// not influence the loss receive an explicit zero gradient.
    pub fn collect_grads(&mut self, graph: &mut Graph<T>, bound: &Bound) {
        for (i, &v) in bound.vars.iter().enumerate() {
            let g = graph
                .take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(self.values[i].shape()));
            match &mut self.grads[i] {
                Some(acc) => acc.accumulate(&g),
                slot => *slot = Some(g),
            }
        }
    }

    /// Replaces all values; shapes and names must match.
    pub fn load_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Incompatible(format!(
                "expected {} tensors, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::Incompatible(format!(
                    "parameter `{}`: expected shape {}, got {}",
                    self.names[i],
                    self.values[i].shape(),
                    v.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: vec![None; self.values.len()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn clipping_rescales_to_the_cap_and_reports_the_old_norm() {
        let mut p = ParamSet::<f64>::new();
        let a = p.add("a", Tensor::zeros(Shape::new(1, 1, 1, 2)));
        let b = p.add("b", Tensor::zeros(Shape::new(1, 1, 1, 1)));
        p.set_grad(a, Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3.0, 0.0]).unwrap());
        p.set_grad(b, Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![4.0]).unwrap());
        assert_eq!(p.clip_grad_norm(0.0), 5.0);
        assert_eq!(p.grad_norm(), 5.0);
        assert_eq!(p.clip_grad_norm(10.0), 5.0);
        assert_eq!(p.grad_norm(), 5.0);
        assert_eq!(p.clip_grad_norm(1.0), 5.0);
        assert!((p.grad_norm() - 1.0).abs() < 1e-12);
        assert!((p.grad(a).unwrap().data()[0] - 0.6).abs() < 1e-12);
    }
}
