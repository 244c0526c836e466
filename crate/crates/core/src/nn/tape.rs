//! Reverse-mode tape. Each op records its output value and a one-shot
//! closure mapping the output gradient to input gradients. Ops are coarse
//! (a whole LSTM, a whole convolution) and carry hand-derived backward passes.

use ndarray::{ArrayD, IxDyn};

use crate::float::Float;
use crate::nn::param::{BnStat, Grads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn<F> = Box<dyn FnOnce(&Ctx<'_, F>, &mut Sink<'_, F>)>;

/// Read access to the recorded values during the backward sweep.
pub struct Ctx<'t, F> {
    pub grad: &'t ArrayD<F>,
    values: &'t [ArrayD<F>],
    out: usize,
}

impl<F> Ctx<'_, F> {
    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.values[v.0]
    }

    pub fn output(&self) -> &ArrayD<F> {
        &self.values[self.out]
    }
}

/// Gradient accumulator handed to backward closures.
pub struct Sink<'g, F> {
    grads: &'g mut [Option<ArrayD<F>>],
    needs: &'g [bool],
}

impl<F: Float> Sink<'_, F> {
    pub fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    pub fn add(&mut self, v: Var, g: ArrayD<F>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

pub struct Tape<'p, F: Float> {
    store: &'p ParamStore<F>,
    training: bool,
    values: Vec<ArrayD<F>>,
    backs: Vec<Option<BackFn<F>>>,
    needs: Vec<bool>,
    param_of: Vec<Option<ParamId>>,
    bn_stats: Vec<BnStat<F>>,
}

/// Result of a backward sweep.
pub struct Backward<F> {
    pub grads: Grads<F>,
    /// Gradients of the leaves passed in `keep`, in order.
    pub kept: Vec<Option<ArrayD<F>>>,
}

impl<'p, F: Float> Tape<'p, F> {
    pub fn new(store: &'p ParamStore<F>, training: bool) -> Self {
        Self {
            store,
            training,
            values: Vec::new(),
            backs: Vec::new(),
            needs: Vec::new(),
            param_of: Vec::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn leaf(&mut self, value: ArrayD<F>, needs: bool, param: Option<ParamId>) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.backs.push(None);
        self.needs.push(needs);
        self.param_of.push(param);
        Var(id)
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.leaf(value, false, None)
    }

    /// A leaf whose gradient can be requested through `keep`.
    pub fn input(&mut self, value: ArrayD<F>) -> Var {
        self.leaf(value, true, None)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        let needs = p.trainable;
        self.leaf(p.value.clone(), needs, Some(id))
    }

    pub fn param_value(&self, id: ParamId) -> &'p ArrayD<F> {
        self.store.value(id)
    }

    /// Records an op. The closure is dropped when no input needs a gradient.
    pub fn push(
        &mut self,
        value: ArrayD<F>,
        inputs: &[Var],
        back: impl FnOnce(&Ctx<'_, F>, &mut Sink<'_, F>) + 'static,
    ) -> Var {
        let needs = inputs.iter().any(|v| self.needs[v.0]);
        let id = self.values.len();
        self.values.push(value);
        self.backs.push(if needs { Some(Box::new(back)) } else { None });
        self.needs.push(needs);
        self.param_of.push(None);
        Var(id)
    }

    pub(crate) fn record_bn(&mut self, stat: BnStat<F>) {
        self.bn_stats.push(stat);
    }

    pub fn bn_stats(&self) -> &[BnStat<F>] {
        &self.bn_stats
    }

    pub fn take_bn_stats(&mut self) -> Vec<BnStat<F>> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Backpropagates from a scalar.
    pub fn backward(self, root: Var) -> Grads<F> {
        let seed = ArrayD::from_elem(self.values[root.0].raw_dim(), F::one());
        self.backward_seeded(root, seed, &[]).grads
    }

    pub fn backward_seeded(mut self, root: Var, seed: ArrayD<F>, keep: &[Var]) -> Backward<F> {
        assert_eq!(seed.shape(), self.values[root.0].shape(), "seed shape");
        let n = self.values.len();
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; n];
        let mut param_grads: Vec<Option<ArrayD<F>>> = vec![None; self.store.len()];
        let mut kept: Vec<Option<ArrayD<F>>> = vec![None; keep.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(pid) = self.param_of[i] {
                match &mut param_grads[pid.0] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
            for (k, v) in keep.iter().enumerate() {
                if v.0 == i {
                    kept[k] = Some(g.clone());
                }
            }
            if let Some(back) = self.backs[i].take() {
                let ctx = Ctx { grad: &g, values: &self.values, out: i };
                let mut sink = Sink { grads: &mut grads[..i], needs: &self.needs };
                back(&ctx, &mut sink);
            }
        }
        Backward { grads: Grads::from_slots(param_grads), kept }
    }
}

pub(crate) fn scalar<F: Float>(v: F) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[]), v)
}
