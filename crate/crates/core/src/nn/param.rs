use std::collections::HashMap;

use ndarray::{Array1, ArrayD, IxDyn, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::float::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named array. Non-trainable entries are batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: ArrayD<F>,
    pub trainable: bool,
}

/// Flat, insertion-ordered parameter table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: String, value: ArrayD<F>, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Overwrites an entry by name, checking the shape.
    pub fn set(&mut self, name: &str, value: ArrayD<F>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::ParamMismatch {
            name: name.to_string(),
            detail: "unknown parameter".into(),
        })?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::ParamMismatch {
                name: name.to_string(),
                detail: format!("shape {:?} vs {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Converts every entry to another scalar type.
    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.mapv(|v| G::of(v.as_f64())), p.trainable);
        }
        out
    }

    /// Folds batch statistics into running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[BnStat<F>], momentum: f64) {
        let m = F::of(momentum);
        let keep = F::one() - m;
        for st in stats {
            for (id, batch) in [(st.mean_id, &st.mean), (st.var_id, &st.var)] {
                let run = &mut self.params[id.0].value;
                Zip::from(run).and(batch.view().into_dyn()).for_each(|r, &b| *r = keep * *r + m * b);
            }
        }
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnStat<F> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Array1<F>,
    pub var: Array1<F>,
}

/// Scoped parameter factory. Names are joined with `.`.
pub struct Init<'a, F> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, F: Float> Init<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_, F> {
        Init { prefix: self.full(name), store: self.store, rng: self.rng }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n).map(|_| F::of(self.rng.random_range(-bound..bound))).collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape");
        let full = self.full(name);
        self.store.insert(full, value, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let full = self.full(name);
        self.store.insert(full, ArrayD::from_elem(IxDyn(shape), F::of(v)), true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let full = self.full(name);
        self.store.insert(full, ArrayD::from_elem(IxDyn(shape), F::of(v)), false)
    }

    pub fn store(&mut self) -> &mut ParamStore<F> {
        self.store
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<F> {
    slots: Vec<Option<ArrayD<F>>>,
}

impl<F: Float> Grads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self { slots: vec![None; store.len()] }
    }

    pub(crate) fn from_slots(slots: Vec<Option<ArrayD<F>>>) -> Self {
        Self { slots }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<F>> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ArrayD<F>)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn accumulate(&mut self, other: &Grads<F>) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        let s = F::of(s);
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
