//! Named parameters with an explicit trainable/frozen partition.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HstError, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter; drives the weight-decay policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// LayerNorm scale or shift.
    Norm,
    /// Free token vectors (meta tokens, class token) and positional tables.
    Token,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Element> {
    name: String,
    value: Tensor<T>,
    kind: ParamKind,
    trainable: bool,
    grad: Option<Tensor<T>>,
}

impl<T: Element> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Owns every parameter of a model. Modules refer to entries by [`ParamId`],
/// so two modules holding the same id share one tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Parameter<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        kind: ParamKind,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(HstError::config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            kind,
            trainable,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    /// Mutable access to a parameter's data. Intended for optimizers,
    /// checkpoint loading and test fixtures.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids in lexicographic name order.
    pub fn sorted_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.index.values().copied()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        if !trainable {
            p.grad = None;
        }
    }

    /// Sorted names of every trainable parameter.
    pub fn trainable_names(&self) -> Vec<String> {
        self.index
            .iter()
            .filter(|(_, id)| self.params[id.0].trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.params.iter().filter(|p| !p.trainable).map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Err(HstError::Contract(format!(
                "gradient offered for frozen parameter `{}`",
                p.name
            )));
        }
        if grad.shape() != p.value.shape() {
            return Err(HstError::dimension(format!(
                "gradient shape {:?} does not match parameter `{}` {:?}",
                grad.shape(),
                p.name,
                p.value.shape()
            )));
        }
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += *b;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Converts every tensor to another element type, keeping names, kinds and
    /// the freeze partition.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                    trainable: p.trainable,
                    grad: None,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// How a declared parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
}

/// A parameter declaration: everything about a leaf except its values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub trainable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        kind: ParamKind,
        trainable: bool,
        init: Init,
    ) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            kind,
            trainable,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Receives parameter declarations while a model is being assembled.
pub trait ParamSink {
    fn declare(&mut self, spec: ParamSpec) -> Result<ParamId>;
}

/// Allocates and initialises declared parameters into a store. Values are
/// drawn in `f64` and rounded, so models of either precision built from the
/// same seed agree.
pub struct Initializer<'a, T: Element, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Element, R: Rng> ParamSink for Initializer<'_, T, R> {
    fn declare(&mut self, spec: ParamSpec) -> Result<ParamId> {
        let value = match spec.init {
            Init::TruncNormal(std) => trunc_normal(self.rng, spec.shape.clone(), std),
            Init::Zeros => Tensor::zeros(spec.shape.clone()),
            Init::Ones => Tensor::full(spec.shape.clone(), T::one()),
        };
        self.store.add(spec.name, value, spec.kind, spec.trainable)
    }
}

/// Records declarations without allocating any tensor data.
#[derive(Clone, Debug, Default)]
pub struct SpecList {
    pub specs: Vec<ParamSpec>,
}

impl ParamSink for SpecList {
    fn declare(&mut self, spec: ParamSpec) -> Result<ParamId> {
        if self.specs.iter().any(|s| s.name == spec.name) {
            return Err(HstError::config(format!("duplicate parameter name `{}`", spec.name)));
        }
        self.specs.push(spec);
        Ok(ParamId(self.specs.len() - 1))
    }
}

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<T: Element, R: Rng + ?Sized>(rng: &mut R, shape: impl Into<Vec<usize>>, std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::cast(z * std);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros([2]), ParamKind::Weight, true).unwrap();
        assert!(store.add("a", Tensor::zeros([2]), ParamKind::Weight, true).is_err());
    }

    #[test]
    fn frozen_parameters_refuse_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros([3]), ParamKind::Weight, false).unwrap();
        assert!(store.accumulate_grad(id, &Tensor::zeros([3])).is_err());
        assert!(store.get(id).grad().is_none());
    }

    #[test]
    fn trunc_normal_is_bounded() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = trunc_normal(&mut rng, [4096], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }
}
