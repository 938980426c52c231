use rand::Rng;

use super::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Graph, Linear, Lstm, ParamGroup, ParamStore, Tensor, Var};

const GROUP: ParamGroup = ParamGroup::Main;

/// Location-aware additive attention.
#[derive(Debug, Clone)]
pub struct LocationAttention {
    pub query: Linear,
    pub memory: Linear,
    pub location_conv: Conv1d,
    pub location_dense: Linear,
    pub v: Linear,
}

impl LocationAttention {
    fn new<R: Rng>(store: &mut ParamStore, cfg: &DecoderConfig, memory_dim: usize, rng: &mut R) -> Self {
        let a = cfg.attention_dim;
        let f = cfg.location_filters;
        Self {
            query: Linear::new(store, "decoder.attention.query", GROUP, cfg.attention_rnn_dim, a, false, rng),
            memory: Linear::new(store, "decoder.attention.memory", GROUP, memory_dim, a, false, rng),
            location_conv: Conv1d::new(
                store,
                "decoder.attention.location_conv",
                GROUP,
                2,
                f,
                cfg.location_kernel,
                (cfg.location_kernel - 1) / 2,
                1,
                false,
                rng,
            ),
            location_dense: Linear::new(store, "decoder.attention.location_dense", GROUP, f, a, false, rng),
            v: Linear::new(store, "decoder.attention.v", GROUP, a, 1, false, rng),
        }
    }

    /// Unnormalized energies `[B, L]`.
    pub fn energies(&self, g: &mut Graph, query: Var, processed_memory: Var, prev: Var, cum: Var) -> Result<Var> {
        let s = g.shape(prev).to_vec();
        let (b, l) = (s[0], s[1]);
        let p = g.reshape(prev, &[b, l, 1])?;
        let c = g.reshape(cum, &[b, l, 1])?;
        let loc_in = g.concat_last(&[p, c])?;
        let loc = self.location_conv.forward(g, loc_in)?;
        let loc = self.location_dense.forward(g, loc)?;
        let q = self.query.forward(g, query)?;
        let e = g.add(processed_memory, loc)?;
        let e = g.add_rows(e, q)?;
        let e = g.tanh(e);
        let e = self.v.forward(g, e)?;
        g.reshape(e, &[b, l])
    }
}

/// Recurrent state carried between decoder steps.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub attention: (Var, Var),
    pub decoder: (Var, Var),
    pub alignment: Var,
    pub cumulative: Var,
    pub context: Var,
}

/// Memory after conditioning with its projection for the attention energies.
#[derive(Debug, Clone)]
pub struct PreparedMemory {
    pub memory: Var,
    pub processed: Var,
    /// `[B·L]`, 1 for real rows.
    pub mask: Vec<f64>,
    pub batch: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub frame: Var,
    pub gate: Var,
    pub alignment: Var,
}

/// Autoregressive mel decoder: prenet, attention LSTM, location-aware
/// attention, decoder LSTM and linear frame and gate projections.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub prenet: Vec<Linear>,
    pub attention_rnn: Lstm,
    pub attention: LocationAttention,
    pub decoder_rnn: Lstm,
    pub frame_proj: Linear,
    pub gate_proj: Linear,
    pub cfg: DecoderConfig,
    pub n_mels: usize,
    pub memory_dim: usize,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &DecoderConfig, n_mels: usize, memory_dim: usize, rng: &mut R) -> Self {
        let p = cfg.prenet_dim;
        let prenet = vec![
            Linear::new(store, "decoder.prenet0", GROUP, n_mels, p, true, rng),
            Linear::new(store, "decoder.prenet1", GROUP, p, p, true, rng),
        ];
        let attention_rnn = Lstm::new(store, "decoder.attention_rnn", GROUP, p + memory_dim, cfg.attention_rnn_dim, rng);
        let attention = LocationAttention::new(store, cfg, memory_dim, rng);
        let decoder_rnn = Lstm::new(store, "decoder.decoder_rnn", GROUP, cfg.attention_rnn_dim + memory_dim, cfg.decoder_rnn_dim, rng);
        let frame_proj = Linear::new(store, "decoder.frame_proj", GROUP, cfg.decoder_rnn_dim + memory_dim, n_mels, true, rng);
        let gate_proj = Linear::new(store, "decoder.gate_proj", GROUP, cfg.decoder_rnn_dim + memory_dim, 1, true, rng);
        Self {
            prenet,
            attention_rnn,
            attention,
            decoder_rnn,
            frame_proj,
            gate_proj,
            cfg: cfg.clone(),
            n_mels,
            memory_dim,
        }
    }

    /// `memory` is `[B, L, memory_dim]`; `mask` marks real rows.
    pub fn prepare(&self, g: &mut Graph, memory: Var, mask: Vec<f64>) -> Result<PreparedMemory> {
        let s = g.shape(memory).to_vec();
        if s.len() != 3 || s[2] != self.memory_dim {
            return Err(Error::Shape { op: "decoder memory", lhs: s, rhs: vec![self.memory_dim] });
        }
        if mask.len() != s[0] * s[1] {
            return Err(Error::Shape { op: "decoder memory mask", lhs: s, rhs: vec![mask.len()] });
        }
        let processed = self.attention.memory.forward(g, memory)?;
        Ok(PreparedMemory { memory, processed, mask, batch: s[0], len: s[1] })
    }

    /// Zero recurrent state; alignment starts at zero so the first step's
    /// location features are empty.
    pub fn initial_state(&self, g: &mut Graph, mem: &PreparedMemory) -> DecoderState {
        let b = mem.batch;
        DecoderState {
            attention: self.attention_rnn.zero_state(g, b),
            decoder: self.decoder_rnn.zero_state(g, b),
            alignment: g.constant(Tensor::zeros(vec![b, mem.len])),
            cumulative: g.constant(Tensor::zeros(vec![b, mem.len])),
            context: g.constant(Tensor::zeros(vec![b, self.memory_dim])),
        }
    }

    /// Alignment over memory rows and the resulting context vector.
    pub fn attend(&self, g: &mut Graph, query: Var, state: &DecoderState, mem: &PreparedMemory) -> Result<(Var, Var)> {
        let e = self.attention.energies(g, query, mem.processed, state.alignment, state.cumulative)?;
        let a = g.softmax_last(e, Some(&mem.mask))?;
        let ctx = g.weighted_sum(a, mem.memory)?;
        Ok((a, ctx))
    }

    pub fn prenet(&self, g: &mut Graph, prev_frame: Var) -> Result<Var> {
        let mut x = prev_frame;
        for l in &self.prenet {
            x = l.forward(g, x)?;
            x = g.relu(x);
            x = g.dropout(x, self.cfg.prenet_dropout, true);
        }
        Ok(x)
    }

    /// One decoder step from the previous frame `[B, M]`.
    pub fn step(&self, g: &mut Graph, state: &DecoderState, prev_frame: Var, mem: &PreparedMemory) -> Result<(StepOutput, DecoderState)> {
        let p = self.prenet(g, prev_frame)?;
        let att_in = g.concat_last(&[p, state.context])?;
        let att = self.attention_rnn.step(g, att_in, state.attention)?;
        let (a, ctx) = self.attend(g, att.0, state, mem)?;
        let dec_in = g.concat_last(&[att.0, ctx])?;
        let dec = self.decoder_rnn.step(g, dec_in, state.decoder)?;
        let out_in = g.concat_last(&[dec.0, ctx])?;
        let frame = self.frame_proj.forward(g, out_in)?;
        let gate = self.gate_proj.forward(g, out_in)?;
        let cumulative = g.add(state.cumulative, a)?;
        let next = DecoderState { attention: att, decoder: dec, alignment: a, cumulative, context: ctx };
        Ok((StepOutput { frame, gate, alignment: a }, next))
    }

    /// Teacher-forced pass over `target` (`[B, T, M]`). With probability
    /// `sample_prob` per row and step the previous input frame is the model's
    /// own detached prediction instead of the ground truth.
    pub fn teacher_forced(&self, g: &mut Graph, mem: &PreparedMemory, target: &Tensor, sample_prob: f64) -> Result<TeacherForced> {
        let s = target.shape().to_vec();
        if s.len() != 3 || s[0] != mem.batch || s[2] != self.n_mels {
            return Err(Error::Shape { op: "teacher_forced target", lhs: s, rhs: vec![mem.batch, self.n_mels] });
        }
        let (b, t, m) = (s[0], s[1], s[2]);
        let mut state = self.initial_state(g, mem);
        let mut prev = g.constant(Tensor::zeros(vec![b, m]));
        let mut frames = Vec::with_capacity(t);
        let mut gates = Vec::with_capacity(t);
        let mut alignments = Vec::with_capacity(t);
        for ti in 0..t {
            let (out, next) = self.step(g, &state, prev, mem)?;
            state = next;
            frames.push(out.frame);
            gates.push(out.gate);
            alignments.push(out.alignment);
            if ti + 1 < t {
                let mut truth = Vec::with_capacity(b * m);
                for bi in 0..b {
                    truth.extend_from_slice(&target.data()[(bi * t + ti) * m..(bi * t + ti + 1) * m]);
                }
                let truth = g.constant(Tensor::new(vec![b, m], truth)?);
                prev = if sample_prob > 0.0 {
                    let pick: Vec<f64> = (0..b).map(|_| f64::from(u8::from(g.rng.gen::<f64>() < sample_prob))).collect();
                    if pick.iter().any(|&v| v == 1.0) {
                        let own = g.constant(g.value(out.frame).clone());
                        g.blend(own, truth, &pick)?
                    } else {
                        truth
                    }
                } else {
                    truth
                };
            }
        }
        let mel = g.stack_time(&frames)?;
        let gate = g.stack_time(&gates)?;
        let gate = g.reshape(gate, &[b, t])?;
        Ok(TeacherForced { mel, gate, alignments })
    }

    /// Free-running decode of a single utterance (`B = 1`).
    pub fn free_running(&self, g: &mut Graph, mem: &PreparedMemory, max_frames: usize) -> Result<FreeRunning> {
        if mem.batch != 1 {
            return Err(Error::Contract("free-running decode expects a single utterance".into()));
        }
        let m = self.n_mels;
        let mut state = self.initial_state(g, mem);
        let mut prev = g.constant(Tensor::zeros(vec![1, m]));
        let mut frames = Vec::new();
        let mut alignments = Vec::new();
        let mut truncated = true;
        for _ in 0..max_frames {
            let (out, next) = self.step(g, &state, prev, mem)?;
            g.check_finite()?;
            state = next;
            frames.extend_from_slice(g.value(out.frame).data());
            alignments.extend_from_slice(g.value(out.alignment).data());
            prev = out.frame;
            let gate = g.value(out.gate).item();
            if 1.0 / (1.0 + (-gate).exp()) > self.cfg.stop_threshold {
                truncated = false;
                break;
            }
        }
        let n_frames = frames.len() / m;
        Ok(FreeRunning { frames, alignments, n_frames, truncated })
    }
}

pub struct TeacherForced {
    /// `[B, T, M]`.
    pub mel: Var,
    /// `[B, T]` stop logits.
    pub gate: Var,
    pub alignments: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct FreeRunning {
    /// `n_frames × M` row-major.
    pub frames: Vec<f64>,
    /// `n_frames × L` row-major.
    pub alignments: Vec<f64>,
    pub n_frames: usize,
    pub truncated: bool,
}
