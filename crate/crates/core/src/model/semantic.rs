use rand::Rng;

use super::config::SemanticConfig;
use crate::error::Result;
use crate::nn::{BatchNorm, BiLstm, Conv1d, Embedding, Graph, ParamGroup, ParamStore, Tensor, Var};

/// Unit embedding, a stack of conv/batch-norm/ReLU layers and a BiLSTM.
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    pub embedding: Embedding,
    pub convs: Vec<(Conv1d, BatchNorm)>,
    pub lstm: BiLstm,
    pub dropout: f64,
    pub out_dim: usize,
}

impl SemanticEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &SemanticConfig, vocab: usize, rng: &mut R) -> Self {
        let grp = ParamGroup::Main;
        let embedding = Embedding::new(store, "semantic.embedding", grp, vocab, cfg.embed_dim, rng);
        let mut convs = Vec::new();
        let mut cin = cfg.embed_dim;
        for i in 0..cfg.conv_layers {
            let conv = Conv1d::same(store, &format!("semantic.conv{i}"), grp, cin, cfg.conv_channels, cfg.kernel, 1, rng);
            let bn = BatchNorm::new(store, &format!("semantic.bn{i}"), grp, cfg.conv_channels);
            convs.push((conv, bn));
            cin = cfg.conv_channels;
        }
        let lstm = BiLstm::new(store, "semantic.lstm", grp, cin, cfg.lstm_hidden, rng);
        Self {
            embedding,
            convs,
            lstm,
            dropout: cfg.dropout,
            out_dim: 2 * cfg.lstm_hidden,
        }
    }

    /// `ids` is `[B, L]` row-major with `mask` marking real units. Padded rows
    /// are held at zero before every convolution so that results do not depend
    /// on how a sequence was batched.
    pub fn forward(&self, g: &mut Graph, ids: &[usize], batch: usize, len: usize, mask: &[f64]) -> Result<Var> {
        let mut x = self.embedding.forward(g, ids, &[batch, len])?;
        if mask.iter().any(|&m| m == 0.0) {
            let zero = g.constant(Tensor::zeros(g.shape(x).to_vec()));
            x = g.blend(x, zero, mask)?;
        }
        for (conv, bn) in &self.convs {
            x = conv.forward(g, x)?;
            x = bn.forward(g, x, Some(mask))?;
            x = g.relu(x);
            x = g.dropout(x, self.dropout, false);
        }
        self.lstm.run(g, x, Some(mask))
    }
}
