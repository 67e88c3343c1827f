//! Small autoregressive Transformer decoder with cross-attention.

use super::{init_attention, init_ffn, init_layer_norm, init_linear, sinusoidal_positions, Binder, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, ParamStore, Segment, Tensor};
use crate::rng;

/// Special token ids are `n_units + offset`.
pub const BOS_OFFSET: usize = 0;
pub const EOS_OFFSET: usize = 1;
pub const PAD_OFFSET: usize = 2;

pub(super) fn init_decoder(ps: &mut ParamStore, r: &mut rng::Rng, config: &ModelConfig) {
    let dc = config.embed_dim;
    ps.insert("decoder.token_embedding", Tensor::randn(&[config.vocab_size(), dc], 1.0, r));
    for i in 0..config.decoder_layers {
        let p = format!("decoder.block.{i}");
        init_layer_norm(ps, &format!("{p}.ln1"), dc);
        init_attention(ps, r, &format!("{p}.self_attn"), dc);
        init_layer_norm(ps, &format!("{p}.ln2"), dc);
        init_attention(ps, r, &format!("{p}.cross_attn"), dc);
        init_layer_norm(ps, &format!("{p}.ln3"), dc);
        init_ffn(ps, r, &format!("{p}.ffn"), dc, config.ffn_dim);
    }
    init_layer_norm(ps, "decoder.final_ln", dc);
    init_linear(ps, r, "decoder.out", dc, config.vocab_size());
}

impl Model {
    pub fn bos(&self) -> usize {
        self.config.n_units + BOS_OFFSET
    }

    pub fn eos(&self) -> usize {
        self.config.n_units + EOS_OFFSET
    }

    pub fn pad(&self) -> usize {
        self.config.n_units + PAD_OFFSET
    }

    /// Next-token log-probabilities for every position of every sequence.
    ///
    /// `encoder` holds stacked encoder features, `memory[i]` the row range of
    /// the features sequence `i` attends to. Each sequence must start with the
    /// begin token. Rows of the result are stacked in sequence order.
    pub fn decoder_log_probs_node(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        encoder: NodeId,
        memory: &[(usize, usize)],
        sequences: &[&[usize]],
    ) -> Result<NodeId> {
        if memory.len() != sequences.len() {
            return Err(Error::InvalidArgument("one memory range per sequence is required".into()));
        }
        let vocab = self.config.vocab_size();
        let dc = self.config.embed_dim;
        let mut ids = Vec::new();
        let mut self_segs = Vec::new();
        let mut cross_segs = Vec::new();
        for (seq, &(start, len)) in sequences.iter().zip(memory) {
            if seq.first() != Some(&self.bos()) {
                return Err(Error::InvalidArgument("decoder input must start with the begin token".into()));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= vocab) {
                return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary of {vocab}")));
            }
            self_segs.push(Segment::square(ids.len(), seq.len()));
            cross_segs.push(Segment { q_start: ids.len(), q_len: seq.len(), kv_start: start, kv_len: len });
            ids.extend_from_slice(seq);
        }
        let table = b.get(g, "decoder.token_embedding")?;
        let mut x = g.embedding(table, &ids)?;
        let longest = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        let pos = sinusoidal_positions(longest, dc);
        let mut pe = Vec::with_capacity(ids.len() * dc);
        for s in sequences {
            pe.extend_from_slice(&pos.data()[..s.len() * dc]);
        }
        let pe = g.constant(Tensor::new(vec![ids.len(), dc], pe)?);
        x = g.add(x, pe)?;
        let heads = self.config.heads;
        for i in 0..self.config.decoder_layers {
            let p = format!("decoder.block.{i}");
            let h = b.layer_norm(g, &format!("{p}.ln1"), x)?;
            let q = b.linear(g, &format!("{p}.self_attn.q"), h)?;
            let k = b.linear(g, &format!("{p}.self_attn.k"), h)?;
            let v = b.linear(g, &format!("{p}.self_attn.v"), h)?;
            let a = g.attention(q, k, v, heads, &self_segs, true)?;
            let o = b.linear(g, &format!("{p}.self_attn.o"), a)?;
            x = g.add(x, o)?;
            let h = b.layer_norm(g, &format!("{p}.ln2"), x)?;
            let q = b.linear(g, &format!("{p}.cross_attn.q"), h)?;
            let k = b.linear(g, &format!("{p}.cross_attn.k"), encoder)?;
            let v = b.linear(g, &format!("{p}.cross_attn.v"), encoder)?;
            let a = g.attention(q, k, v, heads, &cross_segs, false)?;
            let o = b.linear(g, &format!("{p}.cross_attn.o"), a)?;
            x = g.add(x, o)?;
            let h = b.layer_norm(g, &format!("{p}.ln3"), x)?;
            let f = b.linear(g, &format!("{p}.ffn.fc1"), h)?;
            let f = g.gelu(f);
            let f = b.linear(g, &format!("{p}.ffn.fc2"), f)?;
            x = g.add(x, f)?;
        }
        let h = b.layer_norm(g, "decoder.final_ln", x)?;
        let logits = b.linear(g, "decoder.out", h)?;
        Ok(g.log_softmax(logits))
    }

    /// Log-probabilities (`len x vocab`) after each prefix of `tokens`, given
    /// one utterance's final encoder features.
    pub fn decoder_step(&self, encoder: &Tensor, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, &[]);
        let enc = g.constant(encoder.clone());
        let y = self.decoder_log_probs_node(&mut g, &mut b, enc, &[(0, encoder.rows())], &[tokens])?;
        Ok(g.value(y).clone())
    }

    /// Next-token log-probabilities after each of several prefixes that share
    /// the same encoder features.
    pub fn next_token_log_probs(&self, encoder: &Tensor, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, &[]);
        let enc = g.constant(encoder.clone());
        let memory = vec![(0, encoder.rows()); prefixes.len()];
        let y = self.decoder_log_probs_node(&mut g, &mut b, enc, &memory, prefixes)?;
        let out = g.value(y);
        let mut row = 0;
        Ok(prefixes
            .iter()
            .map(|p| {
                row += p.len();
                out.row(row - 1).to_vec()
            })
            .collect())
    }
}
