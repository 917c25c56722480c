//! Named, stage-tagged parameter storage.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Which training phase owns a parameter.
///
/// `Base` marks the pretrained text-to-video backbone; it is frozen in every
/// phase except base pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Base,
    Stage1,
    Stage2,
    Refiner,
}

impl StageTag {
    pub const ALL: [StageTag; 4] = [StageTag::Base, StageTag::Stage1, StageTag::Stage2, StageTag::Refiner];

    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Base => "base",
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
            StageTag::Refiner => "refiner",
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" | "frozen" => Ok(StageTag::Base),
            "stage1" => Ok(StageTag::Stage1),
            "stage2" => Ok(StageTag::Stage2),
            "refiner" => Ok(StageTag::Refiner),
            other => Err(Error::Plan(format!("unknown stage tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Real> {
    pub value: Tensor<T>,
    pub tag: StageTag,
    pub grad: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T: Real = f32> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, tag: StageTag) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, ParamEntry { value, tag, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn tag(&self, name: &str) -> Option<StageTag> {
        self.entries.get(name).map(|e| e.tag)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces a value in place, keeping the tag. Shapes must agree.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))?;
        e.value.expect_same_shape(&value)?;
        e.value = value;
        Ok(())
    }

    pub fn set_grad(&mut self, name: &str, grad: Option<Tensor<T>>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))?;
        if let Some(g) = &grad {
            e.value.expect_same_shape(g)?;
        }
        e.grad = grad;
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn names_with_tag(&self, tag: StageTag) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.tag == tag)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tags(&self) -> BTreeSet<StageTag> {
        self.entries.values().map(|e| e.tag).collect()
    }

    pub fn count_values(&self, tag: Option<StageTag>) -> usize {
        self.entries
            .values()
            .filter(|e| tag.is_none_or(|t| e.tag == t))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            tag: e.tag,
                            grad: e.grad.as_ref().map(Tensor::cast),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Per-entry content hashes.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.value.content_hash()))
            .collect()
    }

    /// One hash over every name, tag and value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, e) in &self.entries {
            h.update(k.as_bytes());
            h.update(e.tag.as_str().as_bytes());
            h.update(e.value.to_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Lazily binds store entries onto a graph: trainable entries become
/// tracked leaves, everything else becomes a constant.
pub struct Binding<'a, T: Real> {
    pub graph: &'a Graph<T>,
    store: &'a ParameterStore<T>,
    trainable: BTreeSet<String>,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a, T: Real> Binding<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a ParameterStore<T>, trainable: BTreeSet<String>) -> Self {
        Binding {
            graph,
            store,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Binds every entry as a constant.
    pub fn frozen(graph: &'a Graph<T>, store: &'a ParameterStore<T>) -> Self {
        Binding::new(graph, store, BTreeSet::new())
    }

    /// Binds every entry as trainable.
    pub fn all_trainable(graph: &'a Graph<T>, store: &'a ParameterStore<T>) -> Self {
        let names = store.names().map(str::to_string).collect();
        Binding::new(graph, store, names)
    }

    pub fn store(&self) -> &'a ParameterStore<T> {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = if self.trainable.contains(name) {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every trainable entry; entries the loss never touched get zeros.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let bound = self.bound.borrow();
        self.trainable
            .iter()
            .filter_map(|name| {
                let value = self.store.get(name).ok()?;
                let g = bound
                    .get(name)
                    .and_then(|&v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
                Some((name.clone(), g))
            })
            .collect()
    }
}
