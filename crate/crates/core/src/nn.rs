//! Parameter storage, dense layers, the Adam optimizer, and the on-disk
//! parameter format shared by every checkpoint in the crate.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
struct ParamEntry {
    name: String,
    value: Tensor,
    /// Only rows that received a nonzero gradient are touched by the optimizer.
    sparse_rows: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Graph handles for every parameter of one store, created per step.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: bool,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    pub fn add_sparse(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    fn push(&mut self, name: String, value: Tensor, sparse_rows: bool) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            sparse_rows,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.data().len()).sum()
    }

    /// Put every parameter on the graph, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    g.param(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars, trainable }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// First parameter holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries.iter().find(|e| !e.value.is_finite()).map(|e| e.name.as_str())
    }

    /// Binary layout: magic, count, then per entry
    /// `name_len:u32 name rows:u64 cols:u64 sparse:u8 data:f64*` (little endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.value.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(e.value.cols() as u64).to_le_bytes());
            out.push(e.sparse_rows as u8);
            for x in e.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Schema("not a parameter file".into()));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Schema("parameter name is not utf-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let sparse = r.take(1)?[0] != 0;
            let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            store.push(name, Tensor::new(rows, cols, data), sparse);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ParamStore::from_bytes(&bytes)
    }
}

const MAGIC: &[u8; 8] = b"CREUPRM1";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Schema("truncated parameter file".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Uniform draws in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, fan_in, fan_out, bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, 1, fan_out, bound));
        Dense {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = g.matmul(x, p.var(self.weight));
        g.add(h, p.var(self.bias))
    }
}

/// Stack of dense layers; `hidden` activation between layers, none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], hidden: Activation, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, hidden }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i < last {
                h = self.hidden.apply(g, h);
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-row step counts (a single row for dense parameters).
    steps: Vec<u64>,
}

/// Adam with lazy per-row updates for parameters added via
/// [`ParamStore::add_sparse`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: Vec::new(),
        }
    }

    /// Apply gradients for the parameters in `ids`; others are left alone.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients, ids: impl IntoIterator<Item = ParamId>) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for id in ids {
            let Some(grad) = grads.get(bound.var(id)) else {
                continue;
            };
            let entry = &mut store.entries[id.0];
            let (rows, cols) = entry.value.shape();
            let sparse = entry.sparse_rows;
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                m: vec![0.0; rows * cols],
                v: vec![0.0; rows * cols],
                steps: vec![0; if sparse { rows } else { 1 }],
            });
            let value = entry.value.data_mut();
            let gd = grad.data();
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                if sparse && gd[span.clone()].iter().all(|&x| x == 0.0) {
                    continue;
                }
                let t = if sparse {
                    st.steps[r] += 1;
                    st.steps[r]
                } else {
                    if r == 0 {
                        st.steps[0] += 1;
                    }
                    st.steps[0]
                };
                let bc1 = 1.0 - self.beta1.powi(t as i32);
                let bc2 = 1.0 - self.beta2.powi(t as i32);
                for k in span {
                    st.m[k] = self.beta1 * st.m[k] + (1.0 - self.beta1) * gd[k];
                    st.v[k] = self.beta2 * st.v[k] + (1.0 - self.beta2) * gd[k] * gd[k];
                    let mh = st.m[k] / bc1;
                    let vh = st.v[k] / bc2;
                    value[k] -= self.lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }
}
