use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub id: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters of one model. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter id {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { id: name, tensor, trainable: true });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.id);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Overwrites values from `(name, tensor)` records. Every stored
    /// parameter must be present with a matching shape.
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let t = by_name
                .get(p.id.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {:?}", p.id)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::dim(format!(
                    "parameter {:?}: checkpoint {:?} vs model {:?}",
                    p.id,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = (*t).clone();
        }
        Ok(())
    }

    pub fn records(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.id.clone(), p.tensor.clone())).collect()
    }
}
