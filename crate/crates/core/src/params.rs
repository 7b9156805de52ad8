//! Named parameter storage shared by models and the optimizer.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Gradients, Graph, Tensor, Var};

/// How a parameter is filled at construction time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    FanIn(usize),
    Ones,
    Zeros,
}

/// Name, shape and initializer of one parameter; a model's layout is an
/// ordered list of these.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDef {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<T: Element, R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        match self.init {
            Init::FanIn(fan_in) => Tensor::uniform(&self.shape, 1.0 / (fan_in as f64).sqrt(), rng),
            Init::Ones => Tensor::full(&self.shape, T::one()),
            Init::Zeros => Tensor::zeros(&self.shape),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Element = f64> {
    pub name: String,
    pub value: Tensor<T>,
    /// Accumulated gradient; `None` until the first accumulation.
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

/// Ordered, uniquely named parameters. Insertion order is the stable
/// serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element = f64> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            requires_grad: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.id(name).map(move |i| &mut self.params[i])
    }

    pub fn by_id(&self, id: usize) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.params.iter_mut().for_each(|p| p.requires_grad = on);
    }

    /// Registers `name` on `g`: a trainable leaf when the parameter requires
    /// gradients, a constant otherwise.
    pub fn var(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        let p = &self.params[id];
        Ok(if p.requires_grad {
            g.param(id, &p.value)
        } else {
            g.constant(p.value.clone())
        })
    }

    /// Adds gradients from one backward pass onto the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            self.accumulate_one(id, g.data(), T::one());
        }
    }

    pub(crate) fn accumulate_one(&mut self, id: usize, g: &[T], scale: T) {
        let p = &mut self.params[id];
        if !p.requires_grad {
            return;
        }
        let acc = p
            .grad
            .get_or_insert_with(|| Tensor::zeros(p.value.shape()))
            .data_mut();
        acc.iter_mut()
            .zip(g)
            .for_each(|(a, &v)| *a = *a + v * scale);
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn remove_where(&mut self, mut pred: impl FnMut(&str) -> bool) {
        self.params.retain(|p| !pred(&p.name));
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    requires_grad: p.requires_grad,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
