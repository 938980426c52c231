use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamGroup, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn = Box<dyn Fn(&[Tensor], &[f64], &mut Grads)>;

/// Gradient buffers during a backward pass, allocated lazily.
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    needs: Vec<bool>,
}

impl Grads {
    /// Accumulator for `v`, or `None` when `v` does not require a gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.needs[v.0] {
            return None;
        }
        let len = self.lens[v.0];
        Some(self.bufs[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub(crate) fn add(&mut self, v: Var, g: &[f64]) {
        if let Some(s) = self.slot(v) {
            s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    /// Gradient of node `v`, zero-filled if nothing flowed into it.
    pub fn get(&self, v: Var) -> Vec<f64> {
        self.bufs[v.0].clone().unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

/// Gradients for every store parameter reached by a backward pass.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Adds `other` into `self` elementwise.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Tape of tensor operations over a borrowed parameter store. Values are kept
/// for every node; backward closures only when recording.
pub struct Graph<'a> {
    params: &'a ParamStore,
    pub(crate) values: Vec<Tensor>,
    needs: Vec<bool>,
    backs: Vec<Option<BackFn>>,
    param_vars: Vec<Option<Var>>,
    frozen: Vec<ParamGroup>,
    /// Training mode: batch statistics in batch norm, dropout active.
    pub training: bool,
    record: bool,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) buffer_updates: Vec<(ParamId, Tensor)>,
    nonfinite: Option<&'static str>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore, training: bool, seed: u64) -> Self {
        Self {
            params,
            values: Vec::new(),
            needs: Vec::new(),
            backs: Vec::new(),
            param_vars: vec![None; params.len()],
            frozen: vec![ParamGroup::Buffer],
            training,
            record: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
            nonfinite: None,
        }
    }

    /// Forward-only graph: no backward closures are kept.
    pub fn inference(params: &'a ParamStore, seed: u64) -> Self {
        let mut g = Self::new(params, false, seed);
        g.record = false;
        g
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    /// Parameters of `group` enter as constants and receive no gradient.
    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.push(group);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Name of the first operation that produced a non-finite value.
    pub fn nonfinite(&self) -> Option<&'static str> {
        self.nonfinite
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some(op) => Err(Error::Divergence(format!("non-finite values produced by {op}"))),
            None => Ok(()),
        }
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn next_id(&self) -> usize {
        self.values.len()
    }

    pub(crate) fn push(&mut self, op: &'static str, value: Tensor, parents: &[Var], back: BackFn) -> Var {
        let needs = self.record && parents.iter().any(|p| self.needs[p.0]);
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(op);
        }
        self.values.push(value);
        self.needs.push(needs);
        self.backs.push(if needs { Some(back) } else { None });
        Var(self.values.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, needs: bool) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some("input");
        }
        self.values.push(value);
        self.needs.push(needs && self.record);
        self.backs.push(None);
        Var(self.values.len() - 1)
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Input whose gradient is tracked (read it back with [`Grads::get`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let trainable = !self.frozen.contains(&self.params.group(id));
        let v = self.leaf(self.params.get(id).clone(), trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Reverse pass from scalar `loss`; returns all node gradients.
    pub fn backward_all(&self, loss: Var) -> Grads {
        let n = self.values.len();
        let mut grads = Grads {
            bufs: vec![None; n],
            lens: self.values.iter().map(|t| t.len()).collect(),
            needs: self.needs.clone(),
        };
        if !self.needs[loss.0] {
            return grads;
        }
        grads.bufs[loss.0] = Some(vec![1.0; self.values[loss.0].len()]);
        for i in (0..=loss.0).rev() {
            let Some(back) = &self.backs[i] else { continue };
            if let Some(g) = grads.bufs[i].take() {
                back(&self.values, &g, &mut grads);
            }
        }
        grads
    }

    /// Reverse pass from `loss`, collecting gradients of the store parameters.
    pub fn backward(&self, loss: Var) -> ParamGrads {
        let grads = self.backward_all(loss);
        let mut out = vec![None; self.params.len()];
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if self.needs[v.0] {
                    out[pid] = Some(grads.get(*v));
                }
            }
        }
        ParamGrads { grads: out }
    }
}
