use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

/// A trainable tensor. Each instance (including clones) has its own identity, which
/// is what graphs and optimizers key on.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    value: Arc<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self {
            id: ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
            value: Arc::new(value),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared(&self) -> Arc<Tensor> {
        self.value.clone()
    }

    pub fn set(&mut self, value: Tensor) {
        assert_eq!(value.shape(), self.value.shape(), "parameter shape change");
        self.value = Arc::new(value);
    }

    /// Mutable access; copies the buffer if a graph still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Self::new((*self.value).clone())
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.collect_params_mut("", &mut out);
        out
    }

    fn params(&self) -> Vec<&Param> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value().numel()).sum()
    }
}

/// Join a parameter path.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<M: Module> Module for Vec<M> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, m) in self.iter().enumerate() {
            m.collect_params(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, m) in self.iter_mut().enumerate() {
            m.collect_params_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

impl<M: Module> Module for Option<M> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        if let Some(m) = self {
            m.collect_params(prefix, out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        if let Some(m) = self {
            m.collect_params_mut(prefix, out);
        }
    }
}
