use rand::Rng;

use super::config::StyleConfig;
use crate::error::Result;
use crate::nn::{BatchNorm, Conv1d, Graph, Linear, ParamGroup, ParamStore, Tensor, Var};

const GROUP: ParamGroup = ParamGroup::Paralinguistic;

/// Conv, ReLU, batch norm.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv1d,
    bn: BatchNorm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, dilation: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv1d::same(store, &format!("{name}.conv"), GROUP, cin, cout, kernel, dilation, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), GROUP, cout),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, mask: &[f64]) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = g.relu(y);
        self.bn.forward(g, y, Some(mask))
    }
}

/// Squeeze-excitation Res2Net block with a residual connection.
#[derive(Debug, Clone)]
pub struct SeRes2Block {
    pre: ConvBlock,
    res2: Vec<ConvBlock>,
    post: ConvBlock,
    se_down: Linear,
    se_up: Linear,
    width: usize,
    scale: usize,
}

impl SeRes2Block {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &StyleConfig, dilation: usize, rng: &mut R) -> Self {
        let c = cfg.channels;
        let width = c / cfg.scale;
        Self {
            pre: ConvBlock::new(store, &format!("{name}.pre"), c, c, 1, 1, rng),
            res2: (1..cfg.scale)
                .map(|i| ConvBlock::new(store, &format!("{name}.res2.{i}"), width, width, cfg.kernel, dilation, rng))
                .collect(),
            post: ConvBlock::new(store, &format!("{name}.post"), c, c, 1, 1, rng),
            se_down: Linear::new(store, &format!("{name}.se.down"), GROUP, c, cfg.se_dim, true, rng),
            se_up: Linear::new(store, &format!("{name}.se.up"), GROUP, cfg.se_dim, c, true, rng),
            width,
            scale: cfg.scale,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, mask: &[f64]) -> Result<Var> {
        let h = self.pre.forward(g, x, mask)?;
        // The first group passes through; group i sees its input plus the
        // previous group's output.
        let mut parts = Vec::with_capacity(self.scale);
        parts.push(g.slice_last(h, 0, self.width)?);
        let mut prev: Option<Var> = None;
        for (i, block) in self.res2.iter().enumerate() {
            let xi = g.slice_last(h, (i + 1) * self.width, self.width)?;
            let inp = match prev {
                Some(p) => g.add(xi, p)?,
                None => xi,
            };
            let y = block.forward(g, inp, mask)?;
            parts.push(y);
            prev = Some(y);
        }
        let h = g.concat_last(&parts)?;
        let h = self.post.forward(g, h, mask)?;
        let s = g.mean_time(h, Some(mask))?;
        let s = self.se_down.forward(g, s)?;
        let s = g.relu(s);
        let s = self.se_up.forward(g, s)?;
        let s = g.sigmoid(s);
        let h = g.scale_channels(h, s)?;
        g.add(h, x)
    }
}

/// Convolutional front end, SE-Res2 blocks, multi-layer aggregation and
/// attentive statistics pooling, mapped to a fixed-size style vector.
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    first: ConvBlock,
    blocks: Vec<SeRes2Block>,
    aggregate: Conv1d,
    attn_hidden: Conv1d,
    attn_out: Conv1d,
    pool_bn: BatchNorm,
    fc: Linear,
    pub out_dim: usize,
}

impl StyleEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &StyleConfig, n_mels: usize, rng: &mut R) -> Self {
        let c = cfg.channels;
        let agg = c * cfg.dilations.len();
        Self {
            first: ConvBlock::new(store, "style.front", n_mels, c, cfg.first_kernel, 1, rng),
            blocks: cfg
                .dilations
                .iter()
                .enumerate()
                .map(|(i, &d)| SeRes2Block::new(store, &format!("style.block{i}"), cfg, d, rng))
                .collect(),
            aggregate: Conv1d::same(store, "style.aggregate", GROUP, agg, agg, 1, 1, rng),
            attn_hidden: Conv1d::same(store, "style.pool.hidden", GROUP, agg, cfg.attention_dim, 1, 1, rng),
            attn_out: Conv1d::same(store, "style.pool.out", GROUP, cfg.attention_dim, agg, 1, 1, rng),
            pool_bn: BatchNorm::new(store, "style.pool.bn", GROUP, 2 * agg),
            fc: Linear::new(store, "style.fc", GROUP, 2 * agg, cfg.embedding_dim, true, rng),
            out_dim: cfg.embedding_dim,
        }
    }

    /// Frame-level features entering the pooling layer, `[B, T, 3C]`.
    pub fn frame_features(&self, g: &mut Graph, mel: Var, mask: &[f64]) -> Result<Var> {
        let mut x = mel;
        if mask.iter().any(|&m| m == 0.0) {
            let zero = g.constant(Tensor::zeros(g.shape(x).to_vec()));
            x = g.blend(x, zero, mask)?;
        }
        let mut h = self.first.forward(g, x, mask)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.forward(g, h, mask)?;
            outs.push(h);
        }
        let cat = g.concat_last(&outs)?;
        let a = self.aggregate.forward(g, cat)?;
        Ok(g.relu(a))
    }

    /// Attention logits over time for every channel of `h`.
    pub fn attention_logits(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let e = self.attn_hidden.forward(g, h)?;
        let e = g.tanh(e);
        self.attn_out.forward(g, e)
    }

    /// `mel` is `[B, T, M]` with frame `mask` (`[B·T]`); returns `[B, D]`.
    pub fn forward(&self, g: &mut Graph, mel: Var, mask: &[f64]) -> Result<Var> {
        let h = self.frame_features(g, mel, mask)?;
        let e = self.attention_logits(g, h)?;
        let stats = g.attentive_stats(h, e, Some(mask))?;
        let stats = self.pool_bn.forward(g, stats, None)?;
        self.fc.forward(g, stats)
    }
}
