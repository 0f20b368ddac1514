//! Named parameter storage, binding into a [`Graph`], Adam, and the on-disk
//! checkpoint container.
//!
//! Checkpoints are safetensors files: a JSON header mapping every parameter
//! name to its shape and byte range, followed by raw little-endian `f32`
//! data. Free-form metadata (model config, preset, modality, seed) lives in
//! the header's `__metadata__` string map.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::autograd::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered map from parameter name to value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`, with the prefix kept.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Rounds every value through `f32`, so the store equals what a
    /// checkpoint round trip would return.
    pub fn quantized(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| x as f32 as f64)))
                .collect(),
        }
    }

    /// He-style normal init scaled by `fan_in`.
    pub fn init_normal<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.data().iter().all(|x| x.is_finite()))
    }
}

/// Lazily binds named parameters into a graph so that every name maps to a
/// single leaf. Reusing a name reuses the leaf, which is what makes weight
/// sharing accumulate gradients into one storage.
#[derive(Debug, Default)]
pub struct Binder {
    vars: HashMap<String, Var>,
    frozen: bool,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// A binder whose leaves never require gradients.
    pub fn frozen() -> Self {
        Self {
            vars: HashMap::new(),
            frozen: true,
        }
    }

    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let value = store.require(name)?.clone();
        let v = if self.frozen { g.constant(value) } else { g.param(value) };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients for every bound name.
    pub fn collect(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.wrt(g, *v)))
            .collect()
    }
}

/// Adds `src` into `dst`, creating missing entries.
pub fn accumulate(dst: &mut BTreeMap<String, Tensor>, src: &BTreeMap<String, Tensor>, scale: f64) {
    for (k, g) in src {
        let e = dst
            .entry(k.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (a, b) in e.data_mut().iter_mut().zip(g.data()) {
            *a += scale * b;
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// without a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Writes `params` (as `f32`) plus string metadata to a safetensors file.
pub fn save_checkpoint(path: &Path, params: &ParamStore, metadata: &BTreeMap<String, String>) -> Result<()> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .iter()
        .map(|(k, t)| {
            let raw = t.data().iter().flat_map(|x| (*x as f32).to_le_bytes()).collect();
            (k.clone(), t.shape().to_vec(), raw)
        })
        .collect();
    let mut views = Vec::with_capacity(bytes.len());
    for (k, shape, raw) in &bytes {
        let view = TensorView::new(Dtype::F32, shape.clone(), raw)
            .map_err(|e| Error::Checkpoint(format!("{k}: {e}")))?;
        views.push((k.clone(), view));
    }
    let meta: HashMap<String, String> = metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let buf = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) =
        SafeTensors::read_metadata(&buf).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let metadata: BTreeMap<String, String> = header
        .metadata()
        .as_ref()
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        .unwrap_or_default();
    let st = SafeTensors::deserialize(&buf).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut store = ParamStore::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected F32, found {:?}", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(name, Tensor::new(view.shape().to_vec(), data)?);
    }
    Ok((store, metadata))
}

/// Errors unless `actual` has exactly the names and shapes of `expected`.
pub fn check_same_layout(expected: &ParamStore, actual: &ParamStore) -> Result<()> {
    for (name, t) in expected.iter() {
        let a = actual.require(name)?;
        if a.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?} does not match model shape {:?}",
                a.shape(),
                t.shape()
            )));
        }
    }
    if let Some(extra) = actual.names().find(|n| expected.get(n).is_none()) {
        return Err(Error::Checkpoint(format!("unexpected parameter {extra:?}")));
    }
    Ok(())
}

/// Copies values from `src` into `dst` by name, checking shapes.
pub fn load_by_name(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    let names: Vec<String> = dst.names().cloned().collect();
    for name in names {
        let s = src.require(&name)?;
        let d = dst.get_mut(&name).expect("name from dst");
        if s.shape() != d.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?} does not match model shape {:?}",
                s.shape(),
                d.shape()
            )));
        }
        *d = s.clone();
    }
    Ok(())
}
