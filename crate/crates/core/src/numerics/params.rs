use indexmap::IndexMap;

use super::{NumericsError, Result, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub trainable: bool,
}

/// Named parameters in insertion order. Names are unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    params: IndexMap<String, Parameter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        self.params.insert(
            name.clone(),
            Parameter {
                name,
                tensor,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<S>> {
        self.params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name).map(|p| &p.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    /// Marks exactly the parameters accepted by `keep` as trainable.
    pub fn set_trainable(&mut self, keep: impl Fn(&str) -> bool) {
        for p in self.params.values_mut() {
            p.trainable = keep(&p.name);
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            name: p.name.clone(),
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}
