//! Named parameter storage, trainability masks and the per-tape binder.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// Model components addressed by freeze masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    VisionEmbed,
    VlmBlocks,
    LmHead,
    Mcp,
    Dit,
    Codec,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::VisionEmbed,
        Component::VlmBlocks,
        Component::LmHead,
        Component::Mcp,
        Component::Dit,
        Component::Codec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::VisionEmbed => "vision-embed",
            Component::VlmBlocks => "vlm-blocks",
            Component::LmHead => "lm-head",
            Component::Mcp => "mcp",
            Component::Dit => "dit",
            Component::Codec => "codec",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown component `{s}`")))
    }
}

/// Set of components whose parameters receive updates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainableMask(BTreeSet<Component>);

impl TrainableMask {
    pub fn none() -> Self {
        TrainableMask(BTreeSet::new())
    }

    pub fn of(components: &[Component]) -> Self {
        TrainableMask(components.iter().copied().collect())
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        names
            .iter()
            .map(|n| n.as_ref().parse())
            .collect::<Result<BTreeSet<_>>>()
            .map(TrainableMask)
    }

    pub fn contains(&self, c: Component) -> bool {
        self.0.contains(&c)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.0.iter().map(|c| c.name()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub component: Component,
    /// Set on dense weights wrapped by a low-rank adapter.
    pub base_frozen: bool,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, component: Component) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            component,
            base_frozen: false,
            trainable: false,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Applies a freeze mask: a parameter trains iff its component is in the
    /// mask and it is not an adapter-wrapped base weight.
    pub fn set_trainable(&mut self, mask: &TrainableMask) {
        for e in &mut self.entries {
            e.trainable = mask.contains(e.component) && !e.base_frozen;
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn component_scalar_count(&self, c: Component) -> usize {
        self.entries
            .iter()
            .filter(|e| e.component == c)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Bit-level snapshot of every parameter of a component.
    pub fn component_bits(&self, c: Component) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|e| e.component == c)
            .flat_map(|e| e.value.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}

/// Parameter initializers. All draws come from the caller's generator so a
/// model is a pure function of its seed.
pub mod init {
    use super::*;

    /// Uniform on ±1/√fan_in.
    pub fn scaled_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    /// Depthwise kernels with a unit tap at the center (identity filter).
    pub fn delta_kernels(channels: usize, k: usize) -> Tensor {
        let mut t = Tensor::zeros(&[channels, k]);
        for c in 0..channels {
            t.data_mut()[c * k + (k - 1) / 2] = 1.0;
        }
        t
    }
}

/// Binds store parameters onto a tape on first use. Leaves borrow the
/// stored tensors; trainable ones are registered with `requires_grad`.
pub struct Graph<'a> {
    pub tape: Tape<'a>,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = self.tape.leaf_ref(&e.value, e.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Moves the gradients of every bound trainable parameter out of `grads`.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_parsing_rejects_unknown_names() {
        let m = TrainableMask::from_names(&["dit", "mcp"]).unwrap();
        assert!(m.contains(Component::Dit) && !m.contains(Component::LmHead));
        assert!(matches!(
            TrainableMask::from_names(&["dit", "unet"]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1]), Component::Dit).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1]), Component::Dit).is_err());
    }

    #[test]
    fn graph_binds_once_and_respects_trainability() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0, 2.0]), Component::Dit).unwrap();
        let b = s.add("b", Tensor::vector(vec![3.0, 4.0]), Component::Mcp).unwrap();
        s.set_trainable(&TrainableMask::of(&[Component::Dit]));
        let mut g = Graph::new(&s);
        let av = g.param(a);
        assert_eq!(g.param(a), av);
        let bv = g.param(b);
        let p = g.tape.mul(av, bv).unwrap();
        let loss = g.tape.sum(p);
        let mut grads = g.tape.backward(loss).unwrap();
        let pg = g.param_grads(&mut grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, a);
        assert_eq!(pg[0].1.data(), &[3.0, 4.0]);
    }
}
