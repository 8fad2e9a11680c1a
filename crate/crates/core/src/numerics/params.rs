use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{Graph, Scalar, Tensor, Var};

/// A named parameter and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Vec<S>,
}

/// Named parameters, iterated in sorted name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let grad = vec![S::zero(); value.len()];
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Adds `grads` (as produced by [`Session::gradients`]) into the accumulators.
    pub fn accumulate(&mut self, grads: &[(String, Vec<S>)]) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.grad.len() != g.len() {
                return Err(Error::shape("accumulate", format!("`{name}`: {} vs {}", p.grad.len(), g.len())));
            }
            for (a, &b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.iter().map(|g| T::of(g.f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// A graph plus the binding of store parameters to graph leaves.
///
/// Each parameter is bound at most once per session, so every use of a
/// shared parameter refers to the same leaf.
pub struct Session<'a, S> {
    pub graph: Graph<S>,
    store: &'a ParamStore<S>,
    bound: BTreeMap<String, Var>,
}

impl<'a, S: Scalar> Session<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    /// Leaf for the named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.value(name)?.clone();
        let v = self.graph.leaf(t)?;
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    /// Parameters bound so far, in name order.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Per-parameter gradients after `graph.backward`.
    pub fn gradients(&self) -> Vec<(String, Vec<S>)> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .graph
                    .grad(v)
                    .map(<[S]>::to_vec)
                    .unwrap_or_else(|| vec![S::zero(); self.graph.value(v).len()]);
                (name.clone(), g)
            })
            .collect()
    }
}
