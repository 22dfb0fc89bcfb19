//! Trainable parameters and the named-parameter builder models use at
//! construction time.

use std::sync::{Arc, RwLock};

use crate::array::Array;
use crate::scalar::Scalar;

struct ParamInner<T: Scalar> {
    name: String,
    value: Array<T>,
    grad: Option<Array<T>>,
}

/// A named, trainable tensor. Clones share storage; a frozen model is safe
/// to share across threads for inference.
#[derive(Clone)]
pub struct Param<T: Scalar>(Arc<RwLock<ParamInner<T>>>);

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Array<T>) -> Self {
        Self(Arc::new(RwLock::new(ParamInner { name: name.into(), value, grad: None })))
    }

    pub fn name(&self) -> String {
        self.0.read().unwrap().name.clone()
    }

    pub fn value(&self) -> Array<T> {
        self.0.read().unwrap().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.read().unwrap().value.shape().to_vec()
    }

    pub fn set_value(&self, value: Array<T>) {
        let mut inner = self.0.write().unwrap();
        assert_eq!(
            inner.value.shape(),
            value.shape(),
            "set_value shape mismatch for {}",
            inner.name
        );
        inner.value = value;
    }

    pub fn accumulate_grad(&self, g: &Array<T>) {
        let mut inner = self.0.write().unwrap();
        match &mut inner.grad {
            Some(acc) => acc.add_assign(g),
            None => inner.grad = Some(g.clone()),
        }
    }

    pub fn grad(&self) -> Option<Array<T>> {
        self.0.read().unwrap().grad.clone()
    }

    pub fn take_grad(&self) -> Option<Array<T>> {
        self.0.write().unwrap().grad.take()
    }

    pub fn zero_grad(&self) {
        self.0.write().unwrap().grad = None;
    }

    /// Identity for optimizer state and deduplication.
    pub fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }
}

/// Collects every parameter a model creates, with slash-separated names
/// mirroring the module tree (`encoder/conv1/weight`).
#[derive(Clone)]
pub struct ParamBuilder<T: Scalar> {
    prefix: String,
    store: Arc<RwLock<Vec<Param<T>>>>,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn root() -> Self {
        Self { prefix: String::new(), store: Arc::new(RwLock::new(Vec::new())) }
    }

    /// Sub-builder with `name` appended to the prefix.
    pub fn pp(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        };
        Self { prefix, store: Arc::clone(&self.store) }
    }

    pub fn param(&self, name: &str, value: Array<T>) -> Param<T> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        };
        let mut store = self.store.write().unwrap();
        assert!(
            !store.iter().any(|p| p.name() == full),
            "duplicate parameter name {full}"
        );
        let p = Param::new(full, value);
        store.push(p.clone());
        p
    }

    /// All parameters registered so far (creation order).
    pub fn all(&self) -> Vec<Param<T>> {
        self.store.read().unwrap().clone()
    }

    pub fn num_elements(&self) -> usize {
        self.store.read().unwrap().iter().map(|p| p.value().len()).sum()
    }
}
