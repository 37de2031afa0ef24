use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named, optionally frozen, trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub frozen: bool,
}

/// Owns every parameter of a model. Graphs borrow it read-only during a
/// forward/backward pass; optimizers mutate it in between.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            frozen: false,
        });
        id
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let id = self.add(name, tensor);
        self.params[id.0].frozen = true;
        id
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::of(normal.sample(rng))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    /// Linear-layer weight `[out, in]`, uniform in ±1/sqrt(in).
    pub fn add_linear<R: Rng>(
        &mut self,
        name: impl Into<String>,
        out_dim: usize,
        in_dim: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| F::of(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::new(vec![out_dim, in_dim], data).expect("shape"))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, F::of(value)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<F>> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    /// Overwrites a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{}: {:?} vs {:?}", p.name, p.tensor.shape(), tensor.shape()),
            ));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Copy in the same layout at another precision.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
