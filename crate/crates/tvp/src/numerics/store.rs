//! Named-parameter collection with frozen/trainable flags.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::tensor::{real, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// One named parameter. The tensor is a leaf snapshot; optimizer steps
/// swap in a fresh snapshot, so frozen parameters are bit-identical across
/// any number of steps by construction.
pub struct Parameter<S: Scalar> {
    tensor: RefCell<Tensor<S>>,
    frozen: Cell<bool>,
}

impl<S: Scalar> Parameter<S> {
    fn new(tensor: Tensor<S>, frozen: bool) -> Self {
        Parameter { tensor: RefCell::new(tensor), frozen: Cell::new(frozen) }
    }

    pub fn tensor(&self) -> Tensor<S> {
        self.tensor.borrow().clone()
    }

    pub fn frozen(&self) -> bool {
        self.frozen.get()
    }
}

/// Ordered name -> parameter map for a whole model.
#[derive(Default)]
pub struct ParamStore<S: Scalar> {
    params: BTreeMap<String, Parameter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: Vec<S>) {
        debug_assert!(!self.params.contains_key(name), "duplicate parameter {name}");
        self.params
            .insert(name.to_string(), Parameter::new(Tensor::leaf(dims, data), false));
    }

    pub fn insert_zeros(&mut self, name: &str, dims: Vec<usize>) {
        let n = dims.iter().product();
        self.insert(name, dims, vec![S::zero(); n]);
    }

    pub fn insert_full(&mut self, name: &str, dims: Vec<usize>, v: f64) {
        let n = dims.iter().product();
        self.insert(name, dims, vec![real::<S>(v); n]);
    }

    pub fn insert_normal(&mut self, name: &str, dims: Vec<usize>, std: f64, rng: &mut Rng) {
        let n: usize = dims.iter().product();
        let mut buf = vec![0.0f64; n];
        rng.fill_normal(&mut buf, std);
        self.insert(name, dims, buf.into_iter().map(real::<S>).collect());
    }

    /// Fetch a parameter tensor for use in a forward pass.
    pub fn get(&self, name: &str) -> Result<Tensor<S>> {
        self.params
            .get(name)
            .map(|p| p.tensor())
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<S>> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count across all parameters.
    pub fn element_count(&self) -> usize {
        self.params.values().map(|p| p.tensor().len()).sum()
    }

    /// Replace a parameter's data (optimizer step). Panics on frozen
    /// parameters: freezing is a contract, not a suggestion.
    pub fn update(&self, name: &str, dims: Vec<usize>, data: Vec<S>) {
        let p = self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert!(!p.frozen(), "attempted to update frozen parameter {name}");
        *p.tensor.borrow_mut() = Tensor::leaf(dims, data);
    }

    /// Set the frozen flag; frozen parameters leave the tape entirely.
    pub fn set_frozen(&self, name: &str, frozen: bool) {
        let p = self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        if p.frozen.get() == frozen {
            return;
        }
        p.frozen.set(frozen);
        let old = p.tensor.borrow().clone();
        let t = if frozen {
            Tensor::from_vec(old.dims().to_vec(), old.data().to_vec())
        } else {
            Tensor::leaf(old.dims().to_vec(), old.data().to_vec())
        };
        *p.tensor.borrow_mut() = t;
    }

    /// Apply `frozen = !predicate(name)` across the store.
    pub fn freeze_except(&self, trainable: impl Fn(&str) -> bool) {
        for name in self.params.keys() {
            self.set_frozen(name, !trainable(name));
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.frozen())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn clear_grads(&self) {
        for p in self.params.values() {
            p.tensor.borrow().clear_grad();
        }
    }

    /// Deep copy (fresh leaves, same values and flags).
    pub fn clone_store(&self) -> ParamStore<S> {
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            let t = p.tensor();
            out.params.insert(
                name.clone(),
                Parameter::new(
                    if p.frozen() {
                        Tensor::from_vec(t.dims().to_vec(), t.data().to_vec())
                    } else {
                        Tensor::leaf(t.dims().to_vec(), t.data().to_vec())
                    },
                    p.frozen(),
                ),
            );
        }
        out
    }
}

/// SHA-256 digest over the named subset of parameters (sorted order,
/// little-endian f64 of every element). Used to verify frozen sets.
pub fn digest_params<S: Scalar>(store: &ParamStore<S>, names: &[String]) -> [u8; 32] {
    let mut sorted: Vec<&String> = names.iter().collect();
    sorted.sort();
    let mut hasher = Sha256::new();
    for name in sorted {
        hasher.update(name.as_bytes());
        if let Some(p) = store.param(name) {
            let t = p.tensor();
            for &v in t.data() {
                let as_f64: f64 = num_traits::ToPrimitive::to_f64(&v).unwrap_or(f64::NAN);
                hasher.update(as_f64.to_le_bytes());
            }
        }
    }
    hasher.finalize().into()
}
