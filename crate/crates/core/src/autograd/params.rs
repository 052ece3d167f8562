use std::collections::BTreeMap;
use std::sync::Arc;

use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in insertion order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable (or frozen) weight with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    shape: Vec<usize>,
    value: Arc<Vec<f32>>,
    grad: Vec<f32>,
    trainable: bool,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[f32] {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.value)
    }

    pub fn grad(&self) -> &[f32] {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Owns every weight of a model. Names are unique and dot-separated
/// (`enc.conv1.w`), which is what checkpoint files key on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let shape = t.shape().to_vec();
        let data = t.into_data();
        self.params.push(Param {
            name: name.clone(),
            shape,
            grad: vec![0.0; data.len()],
            value: Arc::new(data),
            trainable: true,
        });
        self.by_name.insert(name, id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids whose name starts with `prefix`, in insertion order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Param::numel).sum()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Overwrites a value, keeping the shape.
    pub fn set_value(&mut self, id: ParamId, data: Vec<f32>) -> Result<()> {
        let p = &mut self.params[id.0];
        if data.len() != p.value.len() {
            return Err(Error::shape("set_value", &p.shape, &[data.len()]));
        }
        p.value = Arc::new(data);
        Ok(())
    }

    /// Mutable access for optimizers; refuses frozen weights.
    pub fn value_mut(&mut self, id: ParamId) -> Result<&mut [f32]> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Err(Error::Frozen(p.name.clone()));
        }
        Ok(Arc::make_mut(&mut p.value).as_mut_slice())
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> Result<(&mut [f32], &[f32])> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Err(Error::Frozen(p.name.clone()));
        }
        Ok((Arc::make_mut(&mut p.value).as_mut_slice(), &p.grad))
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds the gradients the graph computed for bound parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (id, var) in graph.bound_params() {
            if let Some(g) = graph.grad(var) {
                let p = &mut self.params[id.0];
                if p.trainable {
                    p.grad.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
        }
    }

    /// Global L2 norm over trainable gradients (accumulated in f64).
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f32) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            p.grad.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// FNV-1a over names, shapes and raw value bits of the matching parameters.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            eat(p.name.as_bytes());
            for d in &p.shape {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copies every parameter of `other` whose name exists here with the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &other.params {
            if let Some(id) = self.id(&p.name) {
                let dst = &mut self.params[id.0];
                if dst.shape != p.shape {
                    return Err(Error::shape("load_from", &dst.shape, &p.shape));
                }
                dst.value = Arc::clone(&p.value);
                n += 1;
            }
        }
        Ok(n)
    }

    /// Appends all parameters of `other`, keeping names and trainability.
    pub fn merge(&mut self, other: &ParamStore) {
        for p in &other.params {
            let t = Tensor::new(p.shape.clone(), p.value.to_vec()).expect("valid param");
            let id = self.add(p.name.clone(), t);
            self.params[id.0].trainable = p.trainable;
        }
    }
}
