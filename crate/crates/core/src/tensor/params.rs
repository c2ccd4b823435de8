use std::cell::RefCell;
use std::collections::BTreeMap;

use super::{Grads, Graph, SeedStream, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `1/sqrt(fan_in)`, fan-in being the
    /// second-to-last dimension (or the only one for vectors).
    FanIn,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), init }
    }
}

/// Named parameter tensors. Names are `/`-separated paths; iteration order is
/// lexicographic, which fixes the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Initializes each spec from a child stream named after the parameter,
    /// so adding a parameter never changes the values of the others.
    pub fn init(specs: &[ParamSpec], seed: &SeedStream) -> Result<Self> {
        let mut store = ParamStore::new();
        for spec in specs {
            if store.tensors.contains_key(&spec.name) {
                return Err(Error::invalid(format!("duplicate parameter {}", spec.name)));
            }
            let mut s = seed.child(&spec.name);
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
                Init::Normal(std) => s.normal_tensor(&spec.shape).map(|x| x * std),
                Init::FanIn => {
                    let r = spec.shape.len();
                    let fan_in = if r >= 2 { spec.shape[r - 2] } else { spec.shape.first().copied().unwrap_or(1) };
                    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
                    s.normal_tensor(&spec.shape).map(|x| x * std)
                }
            };
            store.tensors.insert(spec.name.clone(), t);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// True when both stores hold the same names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }
}

/// Binds parameters onto a graph on first use.
pub struct Binder<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g> Binder<'g> {
    /// Parameters become differentiable leaves.
    pub fn new(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Binder { graph, store, trainable: true, vars: RefCell::default() }
    }

    /// Parameters become constants; for inference.
    pub fn frozen(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Binder { graph, store, trainable: false, vars: RefCell::default() }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore {
        self.store
    }

    pub fn p(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.require(name)?.clone();
        let v = if self.trainable { self.graph.leaf(t) } else { self.graph.constant(t) };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Adjoints of every parameter bound so far.
    pub fn collect(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.vars.borrow().iter().map(|(k, v)| (k.clone(), grads.get(*v))).collect()
    }

    pub fn bound(&self) -> Vec<(String, Var<'g>)> {
        self.vars.borrow().iter().map(|(k, v)| (k.clone(), *v)).collect()
    }
}
