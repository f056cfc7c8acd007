//! Named parameter store.
//!
//! Parameters live outside any tape as plain tensors keyed by a stable
//! dotted-path name ("encoder.block0.attn.q.weight"). Each optimization step
//! binds the current values onto a fresh graph as leaves; after backward the
//! leaf gradients are read back by name. Iteration order is the BTreeMap's
//! sorted order everywhere, which keeps checkpoints and updates byte-stable.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies (false for layer-norm gains,
    /// biases of norms, and embedding-like tables).
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Scalar> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>, decay: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract {
                op: "params.register",
                detail: format!("duplicate parameter {name:?}"),
            });
        }
        self.params.insert(name.to_string(), Parameter { value, decay });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params.get(name).ok_or_else(|| Error::Contract {
            op: "params.get",
            detail: format!("unknown parameter {name:?}"),
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| Error::Contract {
            op: "params.set_value",
            detail: format!("unknown parameter {name:?}"),
        })?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "params.set_value",
                detail: format!(
                    "{name:?}: stored {:?} vs incoming {:?}",
                    p.value.shape(),
                    value.shape()
                ),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sorted-name iteration; the one canonical order for updates,
    /// checkpoints and comparisons.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast::<U>(),
                            decay: p.decay,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Put every parameter's current value on the tape as a leaf and return
    /// the name → Var mapping for this step.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<TapeBinding> {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.params {
            vars.insert(name.clone(), g.leaf(p.value.clone())?);
        }
        Ok(TapeBinding { vars })
    }
}

/// Per-step mapping from parameter names to tape leaves.
pub struct TapeBinding {
    vars: BTreeMap<String, Var>,
}

impl TapeBinding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Contract {
            op: "binding.var",
            detail: format!("parameter {name:?} not bound to this tape"),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Sample a tensor from N(0, std²). Draws happen in f64, so f32 and f64
/// parameter sets built from the same seed hold the same values (up to the
/// cast) and checkpoints stay comparable across precisions.
pub fn normal_init<T: Scalar>(
    rng: &mut impl rand::Rng,
    shape: Vec<usize>,
    std: f64,
) -> Result<Tensor<T>> {
    let dist = rand_distr::Normal::new(0.0f64, std).map_err(|e| Error::InvalidArg {
        op: "normal_init",
        detail: e.to_string(),
    })?;
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| T::from_f64(rng.sample(dist))).collect();
    Tensor::new(shape, data)
}

/// Constant-filled tensor (0 for biases, 1 for norm gains).
pub fn const_init<T: Scalar>(shape: Vec<usize>, v: f64) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    Tensor::new(shape, vec![T::from_f64(v); numel])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_get_and_duplicate() {
        let mut ps = ParamSet::<f32>::new();
        ps.register("a.w", Tensor::zeros(vec![2, 2]).unwrap(), true).unwrap();
        assert!(ps.register("a.w", Tensor::zeros(vec![2, 2]).unwrap(), true).is_err());
        assert_eq!(ps.get("a.w").unwrap().value.shape(), &[2, 2]);
        assert!(ps.get("missing").is_err());
    }

    #[test]
    fn set_value_enforces_shape() {
        let mut ps = ParamSet::<f32>::new();
        ps.register("a.w", Tensor::zeros(vec![2, 2]).unwrap(), true).unwrap();
        assert!(ps.set_value("a.w", Tensor::zeros(vec![3]).unwrap()).is_err());
        ps.set_value("a.w", Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap()).unwrap();
        assert_eq!(ps.tensor("a.w").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn iteration_is_name_sorted() {
        let mut ps = ParamSet::<f32>::new();
        ps.register("b", Tensor::scalar(1.0), true).unwrap();
        ps.register("a", Tensor::scalar(2.0), false).unwrap();
        ps.register("a.z", Tensor::scalar(3.0), true).unwrap();
        let names: Vec<_> = ps.names().cloned().collect();
        assert_eq!(names, vec!["a", "a.z", "b"]);
    }

    #[test]
    fn bind_exposes_gradients_by_name() {
        let mut ps = ParamSet::<f64>::new();
        ps.register("x", Tensor::scalar(3.0), true).unwrap();
        let mut g = Graph::new();
        let binding = ps.bind(&mut g).unwrap();
        let x = binding.var("x").unwrap();
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        assert!(binding.var("y").is_err());
    }
}
