//! Reverse-mode autodiff engine, parameter storage, layers, and optimizers.
//!
//! Everything runs on `f64` ndarrays on a single thread. That costs raw
//! speed but buys exact reproducibility and tight finite-difference
//! agreement, which the verification suite depends on.

pub mod adam;
pub mod check;
pub mod graph;
pub mod init;
pub mod layers;

pub use adam::{clip_global_norm, global_grad_norm, Adam, AdamConfig, Ema};
pub use graph::{Gradients, Graph, Var};

use indexmap::IndexMap;
use ndarray::ArrayD;
use std::cell::RefCell;

/// Named parameter tensors. Insertion order is the registration order of the
/// owning model, which keeps optimizer state and checkpoints aligned.
#[derive(Default, Clone)]
pub struct ParamStore {
    map: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics if the name is already taken, since two
    /// layers sharing a name is always a wiring bug.
    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        let prev = self.map.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }
}

/// Binds a [`ParamStore`] to a [`Graph`] for one forward pass.
///
/// Each parameter is placed on the tape at most once per session, so a tensor
/// used in several places accumulates its gradient automatically.
pub struct Session<'g, 'p> {
    pub g: &'g Graph,
    params: &'p ParamStore,
    trainable: bool,
    bound: RefCell<IndexMap<String, Var>>,
}

impl<'g, 'p> Session<'g, 'p> {
    pub fn new(g: &'g Graph, params: &'p ParamStore, trainable: bool) -> Self {
        Self {
            g,
            params,
            trainable,
            bound: RefCell::new(IndexMap::new()),
        }
    }

    /// Places the named parameter on the tape (cached per session).
    pub fn param(&self, name: &str) -> Var {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self.params.get(name).clone();
        let var = if self.trainable {
            self.g.leaf(value)
        } else {
            self.g.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Pulls gradients for every bound parameter that received one.
    pub fn collect_grads(&self, grads: &Gradients) -> IndexMap<String, ArrayD<f64>> {
        let mut out = IndexMap::new();
        for (name, var) in self.bound.borrow().iter() {
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}
