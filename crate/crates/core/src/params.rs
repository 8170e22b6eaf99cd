//! Named parameter storage shared by the surrogate encoders and the
//! keypoint transformer.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Array2<T>,
}

impl<T> Param<T> {
    /// Parameter group: `blockN`, `head.<name>` or the first name segment
    /// (with `stage1.<encoder>` kept together).
    pub fn group(&self) -> String {
        group_of(&self.name)
    }
}

pub fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    match first {
        "head" | "stage1" => match parts.next() {
            Some(second) => format!("{first}.{second}"),
            None => first.to_string(),
        },
        _ => first.to_string(),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_weight<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let w = Array2::from_shape_fn((rows, cols), |_| T::lit(rng.gen_range(-bound..bound)));
        self.insert(name, w)
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Array2::zeros((rows, cols)))
    }

    pub fn insert_ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Array2::ones((rows, cols)))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count per group, in first-appearance order of groups.
    pub fn group_counts(&self) -> Vec<(String, usize)> {
        let mut order: Vec<String> = Vec::new();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for p in &self.params {
            let g = p.group();
            if !counts.contains_key(&g) {
                order.push(g.clone());
            }
            *counts.entry(g).or_default() += p.value.len();
        }
        order.into_iter().map(|g| {
            let c = counts[&g];
            (g, c)
        }).collect()
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.mapv(|v| U::lit(v.to_f64_lossy())));
        }
        out
    }
}

/// Parameters placed on a graph for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Puts every parameter on `graph`; those rejected by `trainable`
    /// become constants.
    pub fn new<T: Real>(graph: &mut Graph<T>, store: &ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = store
            .params
            .iter()
            .map(|p| {
                if trainable(&p.name) {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Two-layer perceptron `gelu(x·w1 + b1)·w2 + b2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            w1: store.insert_weight(&format!("{prefix}.w1"), input, hidden, rng),
            b1: store.insert_zeros(&format!("{prefix}.b1"), 1, hidden),
            w2: store.insert_weight(&format!("{prefix}.w2"), hidden, output, rng),
            b2: store.insert_zeros(&format!("{prefix}.b2"), 1, output),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let h = g.linear(x, p.var(self.w1), p.var(self.b1));
        let h = g.gelu(h);
        g.linear(h, p.var(self.w2), p.var(self.b2))
    }
}
