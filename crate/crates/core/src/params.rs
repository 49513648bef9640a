//! Named parameter tensors with trainable groups, plus a graph binder.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Grads, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Base,
    Lora,
    Dem,
    SStar,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Base, Group::Lora, Group::Dem, Group::SStar];

    pub fn code(self) -> u8 {
        match self {
            Group::Base => 0,
            Group::Lora => 1,
            Group::Dem => 2,
            Group::SStar => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Base => "base",
            Group::Lora => "lora",
            Group::Dem => "dem",
            Group::SStar => "s_star",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adapt,
}

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub group: Group,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, dims: &[usize], group: Group, init: Init) -> Self {
        Self { name: name.into(), dims: dims.to_vec(), group, init }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<F: Real> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub group: Group,
    pub trainable: bool,
}

impl<F: Real> ParamEntry<F> {
    /// Decoupled weight decay applies to matrices only; norms, biases and
    /// the learnable token are exempt.
    pub fn decays(&self) -> bool {
        self.tensor.rank() == 2 && self.group != Group::SStar
    }
}

/// Ordered collection of named tensors. Order is the insertion order and is
/// what checkpoints and optimizers iterate over.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Real> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Result<Self> {
        let mut store = Self::new();
        for s in specs {
            let n: usize = s.dims.iter().product();
            let data = match s.init {
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
                Init::Normal(std) => (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        F::of(z * std)
                    })
                    .collect(),
            };
            store.insert(&s.name, Tensor::new(s.dims.clone(), data)?, s.group)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<F>, group: Group) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), tensor, group, trainable: true });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.position(name)
            .map(|i| &self.entries[i].tensor)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::Checkpoint(format!("missing parameter {name:?}"))),
        }
    }

    /// Replaces a tensor, keeping its dims.
    pub fn set(&mut self, name: &str, t: Tensor<F>) -> Result<()> {
        let cur = self.get_mut(name)?;
        if cur.dims() != t.dims() {
            return Err(Error::Checkpoint(format!("{name}: dims {:?} != {:?}", t.dims(), cur.dims())));
        }
        *cur = t;
        Ok(())
    }

    /// Trainable set: pretraining trains only the base group, adaptation
    /// everything but the base group.
    pub fn set_phase(&mut self, phase: Phase) {
        for e in &mut self.entries {
            e.trainable = match phase {
                Phase::Pretrain => e.group == Group::Base,
                Phase::Adapt => e.group != Group::Base,
            };
        }
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        for e in &mut self.entries {
            e.trainable = on;
        }
    }

    pub fn set_group_trainable(&mut self, group: Group, on: bool) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.trainable = on;
        }
    }

    pub fn group_numel(&self, group: Group) -> usize {
        self.entries.iter().filter(|e| e.group == group).map(|e| e.tensor.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    group: e.group,
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Bitwise equality of every tensor in `group`.
    pub fn group_bit_eq(&self, other: &Self, group: Group) -> bool {
        let a = self.entries.iter().filter(|e| e.group == group);
        let b = other.entries.iter().filter(|e| e.group == group);
        a.zip(b).all(|(x, y)| x.name == y.name && x.tensor.bit_eq(&y.tensor))
            && self.entries.iter().filter(|e| e.group == group).count()
                == other.entries.iter().filter(|e| e.group == group).count()
    }
}

/// A graph plus lazily bound parameters of a store.
///
/// With `track` set, trainable parameters become gradient-requiring leaves;
/// otherwise every parameter is a constant.
pub struct Ctx<'a, F: Real> {
    pub g: Graph<F>,
    store: &'a ParamStore<F>,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'a, F: Real> Ctx<'a, F> {
    pub fn new(store: &'a ParamStore<F>, track: bool) -> Self {
        Self { g: Graph::new(), store, bound: vec![None; store.len()], track }
    }

    /// Binds into an existing graph (used by gradcheck closures).
    pub fn with_graph(g: Graph<F>, store: &'a ParamStore<F>, track: bool) -> Self {
        Self { g, store, bound: vec![None; store.len()], track }
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    /// Pre-binds a parameter to an existing node.
    pub fn bind(&mut self, name: &str, v: Var) -> Result<()> {
        let i = self.store.position(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
        self.bound[i] = Some(v);
        Ok(())
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let i = self.store.position(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let e = &self.store.entries[i];
        let v = self.g.input(e.tensor.clone(), self.track && e.trainable);
        self.bound[i] = Some(v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.position(name).is_some()
    }

    /// `x · W + b` for parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add_bias(y, b)?)
    }

    /// Gradients aligned with the store's entries; `None` where a parameter
    /// was not bound, not trainable, or unreachable from the loss.
    pub fn grads(&self, loss: Var) -> Result<Vec<Option<Tensor<F>>>> {
        let grads: Grads<F> = self.g.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .zip(&self.store.entries)
            .map(|(b, e)| match b {
                Some(v) if e.trainable && self.track => grads.get(*v),
                _ => None,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("w", &[3, 2], Group::Base, Init::Normal(1.0)),
            ParamSpec::new("n.g", &[2], Group::Base, Init::Ones),
            ParamSpec::new("lora.a", &[3, 1], Group::Lora, Init::Normal(0.1)),
            ParamSpec::new("lora.b", &[1, 2], Group::Lora, Init::Zeros),
            ParamSpec::new("dem.w", &[2, 2], Group::Dem, Init::Zeros),
            ParamSpec::new("s_star", &[1, 2], Group::SStar, Init::Normal(1.0)),
        ]
    }

    #[test]
    fn phases_partition_trainable_set() {
        let mut s = ParamStore::<f32>::init(&specs(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        s.set_phase(Phase::Pretrain);
        assert!(s.entries().iter().all(|e| e.trainable == (e.group == Group::Base)));
        s.set_phase(Phase::Adapt);
        assert!(s.entries().iter().all(|e| e.trainable == (e.group != Group::Base)));
    }

    #[test]
    fn decay_only_on_matrices_outside_s_star() {
        let s = ParamStore::<f32>::init(&specs(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let decays: Vec<_> = s.entries().iter().map(|e| (e.name.as_str(), e.decays())).collect();
        assert_eq!(
            decays,
            vec![("w", true), ("n.g", false), ("lora.a", true), ("lora.b", true), ("dem.w", true), ("s_star", false)]
        );
    }

    #[test]
    fn init_is_seeded_and_cast_preserves_values() {
        let a = ParamStore::<f32>::init(&specs(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = ParamStore::<f32>::init(&specs(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(Group::ALL.iter().all(|&g| a.group_bit_eq(&b, g)));
        let c = a.cast::<f64>().cast::<f32>();
        assert!(Group::ALL.iter().all(|&g| a.group_bit_eq(&c, g)));
        assert!(a.get("lora.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ctx_only_tracks_trainable() {
        let mut s = ParamStore::<f64>::init(&specs(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        s.set_phase(Phase::Adapt);
        let mut ctx = Ctx::new(&s, true);
        let x = ctx.g.constant(Tensor::full([1, 3], 1.0));
        let w = ctx.p("w").unwrap();
        let a = ctx.p("lora.a").unwrap();
        let y = ctx.g.matmul(x, w).unwrap();
        let z = ctx.g.matmul(x, a).unwrap();
        let (sy, sz) = (ctx.g.sum(y).unwrap(), ctx.g.sum(z).unwrap());
        let loss = ctx.g.add(sy, sz).unwrap();
        let grads = ctx.grads(loss).unwrap();
        assert!(grads[0].is_none());
        assert_eq!(grads[2].as_ref().unwrap().data(), &[1.0, 1.0, 1.0]);
    }
}
