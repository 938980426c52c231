use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{orthogonal, xavier_uniform};
use super::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Fully connected layer, `y = x·W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, din: usize, dout: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), group, xavier_uniform(rng, &[din, dout], din, dout));
        let b = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(vec![dout])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        padding: usize,
        dilation: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            group,
            xavier_uniform(rng, &[kernel, cin, cout], kernel * cin, kernel * cout),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(vec![cout])));
        Self { w, b, padding, dilation }
    }

    /// "Same" padding for odd kernels.
    pub fn same<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, cin: usize, cout: usize, kernel: usize, dilation: usize, rng: &mut R) -> Self {
        Self::new(store, name, group, cin, cout, kernel, dilation * (kernel - 1) / 2, dilation, true, rng)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv1d(x, w, b, self.padding, self.dilation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(vec![channels], 1.0)),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(vec![channels])),
            running_mean: store.add(format!("{name}.running_mean"), ParamGroup::Buffer, Tensor::zeros(vec![channels])),
            running_var: store.add(format!("{name}.running_var"), ParamGroup::Buffer, Tensor::full(vec![channels], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&[f64]>) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(x, gamma, beta, mask, Some((self.running_mean, self.running_var)), self.momentum, self.eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.weight"), group, xavier_uniform(rng, &[vocab, dim], vocab, dim));
        Self { table, vocab }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.embedding(t, ids, shape)
    }
}

/// LSTM with gate order input, forget, cell, output. Input weights are Xavier,
/// recurrent weights orthogonal per gate, and the forget bias starts at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, din: usize, hidden: usize, rng: &mut R) -> Self {
        let wx = store.add(format!("{name}.weight_ih"), group, xavier_uniform(rng, &[din, 4 * hidden], din, 4 * hidden));
        let mut wh = vec![0.0; hidden * 4 * hidden];
        for gate in 0..4 {
            let q = orthogonal(rng, hidden, hidden);
            for r in 0..hidden {
                for c in 0..hidden {
                    wh[r * 4 * hidden + gate * hidden + c] = q.data()[r * hidden + c];
                }
            }
        }
        let wh = store.add(format!("{name}.weight_hh"), group, Tensor::new(vec![hidden, 4 * hidden], wh).unwrap());
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{name}.bias"), group, Tensor::new(vec![4 * hidden], b).unwrap());
        Self { wx, wh, b, hidden }
    }

    /// Zero `(h, c)` for a batch.
    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> (Var, Var) {
        let h = g.constant(Tensor::zeros(vec![batch, self.hidden]));
        let c = g.constant(Tensor::zeros(vec![batch, self.hidden]));
        (h, c)
    }

    /// One step from precomputed input projection `xw` (`[B, 4H]`, bias included).
    pub fn step_projected(&self, g: &mut Graph, xw: Var, state: (Var, Var)) -> Result<(Var, Var)> {
        let wh = g.param(self.wh);
        let hw = g.linear(state.0, wh, None)?;
        let gates = g.add(xw, hw)?;
        let hc = g.lstm_cell(gates, state.1)?;
        let h = g.slice_last(hc, 0, self.hidden)?;
        let c = g.slice_last(hc, self.hidden, self.hidden)?;
        Ok((h, c))
    }

    pub fn step(&self, g: &mut Graph, x: Var, state: (Var, Var)) -> Result<(Var, Var)> {
        let wx = g.param(self.wx);
        let b = g.param(self.b);
        let xw = g.linear(x, wx, Some(b))?;
        self.step_projected(g, xw, state)
    }

    /// Runs over `[B, T, in]`. `mask` (`[B·T]`) freezes the state on padded
    /// steps, so a reversed pass starts each sequence at its true end.
    pub fn run(&self, g: &mut Graph, x: Var, mask: Option<&[f64]>, reverse: bool) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape { op: "lstm", lhs: s, rhs: vec![] });
        }
        let (b, t) = (s[0], s[1]);
        let wx = g.param(self.wx);
        let bias = g.param(self.b);
        let xw = g.linear(x, wx, Some(bias))?;
        let mut state = self.zero_state(g, b);
        let mut outs = vec![state.0; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for ti in order {
            let xt = g.select_time(xw, ti)?;
            let (h, c) = self.step_projected(g, xt, state)?;
            state = match mask {
                Some(m) => {
                    let mt: Vec<f64> = (0..b).map(|bi| m[bi * t + ti]).collect();
                    if mt.iter().all(|&v| v == 1.0) {
                        (h, c)
                    } else {
                        (g.blend(h, state.0, &mt)?, g.blend(c, state.1, &mt)?)
                    }
                }
                None => (h, c),
            };
            outs[ti] = state.0;
        }
        g.stack_time(&outs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, din: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fwd: Lstm::new(store, &format!("{name}.fwd"), group, din, hidden, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), group, din, hidden, rng),
        }
    }

    /// `[B, T, in]` to `[B, T, 2H]`: forward states then backward states.
    pub fn run(&self, g: &mut Graph, x: Var, mask: Option<&[f64]>) -> Result<Var> {
        let f = self.fwd.run(g, x, mask, false)?;
        let b = self.bwd.run(g, x, mask, true)?;
        g.concat_last(&[f, b])
    }
}

/// Declarative description of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv1d { in_channels: usize, out_channels: usize, kernel: usize, padding: usize, dilation: usize },
    Fc { in_dim: usize, out_dim: usize },
    BatchNorm { channels: usize },
    Relu,
    Tanh,
    Softmax,
    Lstm { in_dim: usize, hidden: usize },
    BiLstm { in_dim: usize, hidden: usize },
    Embedding { vocab: usize, dim: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |vals: &[usize]| vals.iter().all(|&v| v > 0);
        let ok = match *self {
            LayerSpec::Conv1d { in_channels, out_channels, kernel, dilation, .. } => positive(&[in_channels, out_channels, kernel, dilation]),
            LayerSpec::Fc { in_dim, out_dim } => positive(&[in_dim, out_dim]),
            LayerSpec::BatchNorm { channels } => channels > 0,
            LayerSpec::Lstm { in_dim, hidden } | LayerSpec::BiLstm { in_dim, hidden } => positive(&[in_dim, hidden]),
            LayerSpec::Embedding { vocab, dim } => positive(&[vocab, dim]),
            LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Softmax => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Param(format!("non-positive hyperparameter in {self:?}")))
        }
    }
}

/// A [`LayerSpec`] instantiated with parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv1d(Conv1d),
    Fc(Linear),
    BatchNorm(BatchNorm),
    Relu,
    Tanh,
    Softmax,
    Lstm(Lstm),
    BiLstm(BiLstm),
    Embedding(Embedding),
}

impl Layer {
    pub fn build<R: Rng>(spec: &LayerSpec, store: &mut ParamStore, name: &str, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let grp = ParamGroup::Main;
        Ok(match *spec {
            LayerSpec::Conv1d { in_channels, out_channels, kernel, padding, dilation } => {
                Layer::Conv1d(Conv1d::new(store, name, grp, in_channels, out_channels, kernel, padding, dilation, true, rng))
            }
            LayerSpec::Fc { in_dim, out_dim } => Layer::Fc(Linear::new(store, name, grp, in_dim, out_dim, true, rng)),
            LayerSpec::BatchNorm { channels } => Layer::BatchNorm(BatchNorm::new(store, name, grp, channels)),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Tanh => Layer::Tanh,
            LayerSpec::Softmax => Layer::Softmax,
            LayerSpec::Lstm { in_dim, hidden } => Layer::Lstm(Lstm::new(store, name, grp, in_dim, hidden, rng)),
            LayerSpec::BiLstm { in_dim, hidden } => Layer::BiLstm(BiLstm::new(store, name, grp, in_dim, hidden, rng)),
            LayerSpec::Embedding { vocab, dim } => Layer::Embedding(Embedding::new(store, name, grp, vocab, dim, rng)),
        })
    }

    /// Applies the layer. Sequence layers take `[B, T, C]`; `Embedding` takes
    /// integer-valued indices of any shape.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = match self {
            Layer::Conv1d(l) => l.forward(g, x)?,
            Layer::Fc(l) => l.forward(g, x)?,
            Layer::BatchNorm(l) => l.forward(g, x, None)?,
            Layer::Relu => g.relu(x),
            Layer::Tanh => g.tanh(x),
            Layer::Softmax => g.softmax_last(x, None)?,
            Layer::Lstm(l) => l.run(g, x, None, false)?,
            Layer::BiLstm(l) => l.run(g, x, None)?,
            Layer::Embedding(l) => {
                let t = g.value(x).clone();
                let ids = t
                    .data()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(Error::Data(format!("embedding index {v} is not a non-negative integer")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                l.forward(g, &ids, t.shape())?
            }
        };
        g.check_finite()?;
        Ok(y)
    }
}

/// Builds `spec` with parameters drawn from `seed` and applies it in eval
/// mode (batch norm uses its running statistics).
pub fn forward(spec: &LayerSpec, input: &Tensor, seed: u64) -> Result<Tensor> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = Layer::build(spec, &mut store, "layer", &mut rng)?;
    let mut g = Graph::inference(&store, seed);
    let x = g.constant(input.clone());
    let y = layer.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}
