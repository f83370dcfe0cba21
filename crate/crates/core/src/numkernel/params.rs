use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, NodeId, Tape};
use super::{KernelError, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named parameters with per-name freezing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

/// Shell-style name pattern (`*` matches any run of characters).
pub fn name_matches(pattern: &str, name: &str) -> bool {
    match glob::Pattern::new(pattern) {
        Ok(p) => p.matches(name),
        Err(_) => pattern == name,
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), KernelError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(KernelError::DuplicateParam(name));
        }
        self.params.insert(name, Param { tensor, frozen: false });
        Ok(())
    }

    /// Inserts or overwrites, keeping an existing frozen flag.
    pub fn set(&mut self, name: &str, tensor: Tensor) {
        match self.params.get_mut(name) {
            Some(p) => p.tensor = tensor,
            None => {
                self.params.insert(name.to_string(), Param { tensor, frozen: false });
            }
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, KernelError> {
        self.get(name).ok_or_else(|| KernelError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<(), KernelError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| KernelError::UnknownParam(name.to_string()))?;
        p.frozen = frozen;
        Ok(())
    }

    /// Freezes every parameter, then unfreezes those matching any pattern.
    pub fn train_only(&mut self, patterns: &[String]) {
        for (name, p) in self.params.iter_mut() {
            p.frozen = !patterns.iter().any(|pat| name_matches(pat, name));
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    /// Byte image of the named parameters, for freezing checks.
    pub fn snapshot<'s>(&self, names: impl IntoIterator<Item = &'s str>) -> BTreeMap<String, Vec<u8>> {
        names
            .into_iter()
            .filter_map(|n| self.params.get(n).map(|p| (n.to_string(), p.tensor.to_le_bytes())))
            .collect()
    }

    pub fn snapshot_all(&self) -> BTreeMap<String, Vec<u8>> {
        self.params
            .iter()
            .map(|(n, p)| (n.clone(), p.tensor.to_le_bytes()))
            .collect()
    }
}

/// Parameter name to tape node map for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    /// Records every parameter as a borrowed leaf; frozen ones do not require
    /// gradients.
    pub fn bind<'a>(tape: &mut Tape<'a>, params: &'a ParamSet) -> Self {
        let ids = params
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf_ref(&p.tensor, !p.frozen)))
            .collect();
        Self { ids }
    }

    pub fn get(&self, name: &str) -> Result<NodeId, KernelError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| KernelError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    /// Gradients for every trainable parameter; parameters the loss never
    /// touched get an explicit zero gradient.
    pub fn collect(&self, grads: &Gradients, params: &ParamSet) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, p) in params.iter() {
            if p.frozen {
                continue;
            }
            let g = self
                .ids
                .get(name)
                .and_then(|id| grads.get(*id))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
            out.insert(name.to_string(), g);
        }
        out
    }
}
