//! Named, grouped parameter tensors and their initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Tokenizer,
    Spatial,
    Temporal,
    NetVlad,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Tokenizer,
        ParamGroup::Spatial,
        ParamGroup::Temporal,
        ParamGroup::NetVlad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Tokenizer => "tokenizer",
            ParamGroup::Spatial => "spatial",
            ParamGroup::Temporal => "temporal",
            ParamGroup::NetVlad => "netvlad",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let mut tensor = tensor;
        tensor.set_requires_grad(true);
        self.tensors.push(tensor);
        self.names.push(name.into());
        self.groups.push(group);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Binds a parameter onto `g` (once per graph).
    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id.0, &self.tensors[id.0])
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites the value of a parameter, keeping its shape.
    pub fn assign(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.len() != data.len() {
            return Err(Error::shape(format!(
                "assign to {}: {} values for shape {:?}",
                self.names[id.0],
                data.len(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }
}

/// Normal(0, std) samples redrawn until they fall inside two standard deviations.
pub fn trunc_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// Uniform(-b, b) with `b = sqrt(6 / fan_in)` (He init for ReLU).
pub fn kaiming_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}
