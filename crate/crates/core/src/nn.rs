//! Parameter storage, deterministic initialisation, and optimisation
//! primitives shared by the encoder, heads, and probes.

use std::collections::{BTreeMap, HashMap};

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};

/// Named parameter tensors with a stable (insertion) iteration order.
///
/// Iteration order is part of the crate's determinism contract: optimiser
/// steps, EMA updates and fingerprints all walk parameters in this order.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &self.values[idx]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &mut self.values[idx]
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        let slot = self.get_mut(name);
        assert_eq!(slot.shape(), value.shape(), "shape change for '{name}'");
        *slot = value;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// SHA-256 over names, shapes and little-endian payloads, in iteration
    /// order. Changes iff any parameter value, name or shape changes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((value.ndim() as u64).to_le_bytes());
            for &d in value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in value.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Export as name -> tensor map for serialisation.
    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Rebuild with the given insertion order; every name must be present in
    /// `blobs`.
    pub fn from_map(order: &[String], mut blobs: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut store = ParamStore::new();
        for name in order {
            let t = blobs
                .remove(name)
                .ok_or_else(|| Error::data(format!("missing parameter blob '{name}'")))?;
            store.insert(name.clone(), t)?;
        }
        if !blobs.is_empty() {
            let extra: Vec<_> = blobs.keys().cloned().collect();
            return Err(Error::data(format!("unexpected parameter blobs: {extra:?}")));
        }
        Ok(store)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

// ---- initialisation ----

/// Normal(0, std) truncated to [-2 std, 2 std] by rejection.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::from_shape_fn(IxDyn(shape), |_| loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    })
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(lo..hi))
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Tensor {
    Tensor::from_elem(IxDyn(shape), 1.0)
}

// ---- graph binding ----

/// Per-forward-pass mapping from parameter names to graph leaves.
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    /// Clone every parameter into `g` as a leaf.
    pub fn bind_all(g: &mut Graph, params: &ParamStore) -> Self {
        let mut vars = HashMap::new();
        for (name, value) in params.iter() {
            vars.insert(name.to_string(), g.var(value.clone()));
        }
        Binding { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    /// Drain this binding's leaf gradients into `acc`.
    pub fn collect_grads(&self, grads: &mut crate::graph::Gradients, acc: &mut GradMap) {
        for (name, &var) in &self.vars {
            if let Some(g) = grads.take(var) {
                acc.add(name, g);
            }
        }
    }
}

/// Accumulating gradient map keyed by parameter name. `BTreeMap` keeps
/// iteration deterministic.
#[derive(Default)]
pub struct GradMap {
    map: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, g: Tensor) {
        match self.map.get_mut(name) {
            None => {
                self.map.insert(name.to_string(), g);
            }
            Some(acc) => *acc += &g,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.map.values_mut() {
            *g *= c;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Largest absolute entry; `None` if any entry is non-finite.
    pub fn max_abs_checked(&self) -> Option<f64> {
        let mut max = 0.0f64;
        for g in self.map.values() {
            for &x in g.iter() {
                if !x.is_finite() {
                    return None;
                }
                max = max.max(x.abs());
            }
        }
        Some(max)
    }
}

// ---- optimiser ----

/// AdamW with decoupled weight decay.
///
/// Decay applies only to parameters the `decay_mask` admitted at
/// construction; bias-corrected first and second moments otherwise follow
/// the standard update.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, MomentPair>,
    decayed: BTreeMap<String, bool>,
    t: u64,
}

#[derive(Clone)]
struct MomentPair {
    m: Tensor,
    v: Tensor,
}

impl AdamW {
    pub fn new(
        params: &ParamStore,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
        decay_mask: impl Fn(&str) -> bool,
    ) -> Self {
        let mut state = BTreeMap::new();
        let mut decayed = BTreeMap::new();
        for (name, value) in params.iter() {
            state.insert(
                name.to_string(),
                MomentPair {
                    m: Tensor::zeros(value.raw_dim()),
                    v: Tensor::zeros(value.raw_dim()),
                },
            );
            decayed.insert(name.to_string(), decay_mask(name));
        }
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            state,
            decayed,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let pair = self.state.get_mut(&name).expect("optimiser state missing");
            let p = params.get_mut(&name);
            let decay = if *self.decayed.get(&name).unwrap() {
                self.weight_decay
            } else {
                0.0
            };
            for (((pv, gv), mv), vv) in p
                .iter_mut()
                .zip(g.iter())
                .zip(pair.m.iter_mut())
                .zip(pair.v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *pv);
            }
        }
    }

    /// Serialise moments and step for checkpointing.
    pub fn to_blobs(&self) -> (u64, BTreeMap<String, Tensor>) {
        let mut blobs = BTreeMap::new();
        for (name, pair) in &self.state {
            blobs.insert(format!("{name}.m"), pair.m.clone());
            blobs.insert(format!("{name}.v"), pair.v.clone());
        }
        (self.t, blobs)
    }

    pub fn restore_blobs(&mut self, t: u64, blobs: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, pair) in self.state.iter_mut() {
            let m = blobs
                .get(&format!("{name}.m"))
                .ok_or_else(|| Error::data(format!("missing optimiser blob '{name}.m'")))?;
            let v = blobs
                .get(&format!("{name}.v"))
                .ok_or_else(|| Error::data(format!("missing optimiser blob '{name}.v'")))?;
            pair.m = m.clone();
            pair.v = v.clone();
        }
        self.t = t;
        Ok(())
    }
}

/// In-place exponential moving average: `target = momentum * target +
/// (1 - momentum) * source`, matched by name.
pub fn ema_update(target: &mut ParamStore, source: &ParamStore, momentum: f64) {
    let names: Vec<String> = target.names().map(str::to_string).collect();
    for name in names {
        let src = source.get(&name).clone();
        let dst = target.get_mut(&name);
        dst.zip_mut_with(&src, |t, &s| *t = momentum * *t + (1.0 - momentum) * s);
    }
}
