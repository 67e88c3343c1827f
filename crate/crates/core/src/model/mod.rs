//! Per-modality frontends, frame-wise fusion with zero-fill for absent
//! streams, a shared pre-norm Transformer encoder, and the prediction heads.

mod config;
mod decoder;

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

pub use config::{ModelConfig, Task};
pub use decoder::{BOS_OFFSET, EOS_OFFSET, PAD_OFFSET};

use crate::error::{Error, Result};
use crate::numcore::{grad_check, GradCheckReport, Graph, NodeId, ParamId, ParamStore, Segment, Tensor};
use crate::rng;

/// Input modalities of one utterance. At least one must be present and
/// present streams share the same frame count.
#[derive(Clone, Copy, Debug)]
pub struct ModalityInput<'a> {
    pub features_a: Option<&'a Tensor>,
    pub features_b: Option<&'a Tensor>,
}

impl<'a> ModalityInput<'a> {
    pub fn new(features_a: Option<&'a Tensor>, features_b: Option<&'a Tensor>) -> Result<Self> {
        let input = ModalityInput { features_a, features_b };
        input.frames()?;
        Ok(input)
    }

    pub fn frames(&self) -> Result<usize> {
        match (self.features_a, self.features_b) {
            (None, None) => Err(Error::InvalidArgument("at least one modality must be present".into())),
            (Some(a), None) => Ok(a.rows()),
            (None, Some(b)) => Ok(b.rows()),
            (Some(a), Some(b)) if a.rows() == b.rows() => Ok(a.rows()),
            (Some(a), Some(b)) => {
                Err(Error::shape("modality_input", format!("A has {} frames, B has {}", a.rows(), b.rows())))
            }
        }
    }
}

/// Model configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Per-layer encoder outputs for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `layers[0]` is the encoder input (fused, masked, with positions);
    /// `layers[l]` the residual stream after block `l`.
    pub layers: Vec<Tensor>,
    /// Final layer-normed features.
    pub final_features: Tensor,
}

impl EncoderOutput {
    /// Features at depth `l` in `0..=L`, where depth `L` is the normalized
    /// final output.
    pub fn depth(&self, l: usize) -> &Tensor {
        if l + 1 == self.layers.len() {
            &self.final_features
        } else {
            &self.layers[l]
        }
    }
}

/// Graph nodes of a batched encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderNodes {
    pub layers: Vec<NodeId>,
    pub final_features: NodeId,
    /// Row range of each batch item inside the stacked frames.
    pub segments: Vec<Segment>,
}

/// One batch element for [`Model::encode_batch`].
#[derive(Clone, Debug)]
pub struct BatchItem<'a> {
    pub input: ModalityInput<'a>,
    /// Frame indices to replace with the mask embedding.
    pub mask: &'a [usize],
}

/// Creates parameter nodes on demand, once per graph.
pub struct Binder<'m> {
    params: &'m ParamStore,
    trainable: &'m [bool],
    bound: HashMap<ParamId, NodeId>,
}

impl<'m> Binder<'m> {
    /// `trainable[i]` marks parameter `i` as receiving gradients; an empty
    /// slice freezes everything.
    pub fn new(params: &'m ParamStore, trainable: &'m [bool]) -> Self {
        Binder { params, trainable, bound: HashMap::new() }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        let id = self.params.id(name).ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))?;
        if let Some(&n) = self.bound.get(&id) {
            return Ok(n);
        }
        let trainable = self.trainable.get(id.0).copied().unwrap_or(false);
        let n = g.param(id, self.params.tensor(id), trainable);
        self.bound.insert(id, n);
        Ok(n)
    }

    pub fn linear(&mut self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = self.get(g, &format!("{prefix}.weight"))?;
        let b = self.get(g, &format!("{prefix}.bias"))?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn layer_norm(&mut self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.get(g, &format!("{prefix}.gamma"))?;
        let beta = self.get(g, &format!("{prefix}.beta"))?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Fixed sinusoidal position table, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("extents")
}

fn init_linear(ps: &mut ParamStore, r: &mut rng::Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    let std = 1.0 / (fan_in as f64).sqrt();
    ps.insert(format!("{prefix}.weight"), Tensor::randn(&[fan_in, fan_out], std, r));
    ps.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

fn init_layer_norm(ps: &mut ParamStore, prefix: &str, dim: usize) {
    ps.insert(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0));
    ps.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
}

fn init_attention(ps: &mut ParamStore, r: &mut rng::Rng, prefix: &str, dim: usize) {
    for p in ["q", "k", "v", "o"] {
        init_linear(ps, r, &format!("{prefix}.{p}"), dim, dim);
    }
}

fn init_ffn(ps: &mut ParamStore, r: &mut rng::Rng, prefix: &str, dim: usize, hidden: usize) {
    init_linear(ps, r, &format!("{prefix}.fc1"), dim, hidden);
    init_linear(ps, r, &format!("{prefix}.fc2"), hidden, dim);
}

/// Name prefix of encoder block `i`; stable, used by freeze lists.
pub fn block_path(i: usize) -> String {
    format!("encoder.block.{i}")
}

/// Which part of the encoder stack a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Frontends, fusion projection and mask embedding.
    Input,
    Block(usize),
    FinalNorm,
    /// Cluster head, frame head, decoder.
    Head,
}

pub fn stage_of(name: &str) -> Stage {
    if name.starts_with("frontend_") || name.starts_with("fusion.") || name == "mask_embedding" {
        Stage::Input
    } else if let Some(rest) = name.strip_prefix("encoder.block.") {
        let idx = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
        Stage::Block(idx)
    } else if name.starts_with("encoder.final_ln") {
        Stage::FinalNorm
    } else {
        Stage::Head
    }
}

impl Model {
    /// Fresh pre-training model: encoder stack plus cluster head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "model/init");
        let mut ps = ParamStore::new();
        let (dh, dc) = (config.frontend_dim, config.embed_dim);
        for (name, dim) in [("frontend_a", config.dim_a), ("frontend_b", config.dim_b)] {
            if dim > 0 {
                init_linear(&mut ps, &mut r, &format!("{name}.fc1"), dim, dh);
                init_linear(&mut ps, &mut r, &format!("{name}.fc2"), dh, dh);
            }
        }
        init_linear(&mut ps, &mut r, "fusion", 2 * dh, dc);
        ps.insert("mask_embedding", Tensor::randn(&[dc], 1.0, &mut r));
        for i in 0..config.layers {
            let p = block_path(i);
            init_layer_norm(&mut ps, &format!("{p}.ln1"), dc);
            init_attention(&mut ps, &mut r, &format!("{p}.attn"), dc);
            init_layer_norm(&mut ps, &format!("{p}.ln2"), dc);
            init_ffn(&mut ps, &mut r, &format!("{p}.ffn"), dc, config.ffn_dim);
        }
        init_layer_norm(&mut ps, "encoder.final_ln", dc);
        init_linear(&mut ps, &mut r, "cluster_head", dc, config.n_clusters);
        Ok(Model { config, params: ps })
    }

    /// Drop the cluster head and attach a freshly initialized task head.
    pub fn with_task_head(&self, task: Task, seed: u64) -> Result<Model> {
        let mut ps = self.params.filtered(|n| stage_of(n) != Stage::Head);
        let mut r = rng::stream(seed, "model/task-head");
        let dc = self.config.embed_dim;
        match task {
            Task::FrameTranscription => init_linear(&mut ps, &mut r, "frame_head", dc, self.config.n_units),
            Task::Seq2Seq => decoder::init_decoder(&mut ps, &mut r, &self.config),
        }
        Ok(Model { config: self.config.clone(), params: ps })
    }

    pub fn has_frontend_a(&self) -> bool {
        self.params.id("frontend_a.fc1.weight").is_some()
    }

    pub fn has_frontend_b(&self) -> bool {
        self.params.id("frontend_b.fc1.weight").is_some()
    }

    pub fn has_cluster_head(&self) -> bool {
        self.params.id("cluster_head.weight").is_some()
    }

    pub fn has_frame_head(&self) -> bool {
        self.params.id("frame_head.weight").is_some()
    }

    pub fn has_decoder(&self) -> bool {
        self.params.id("decoder.out.weight").is_some()
    }

    /// Per-frame two-layer perceptron of one modality.
    pub fn frontend(&self, g: &mut Graph, b: &mut Binder, name: &str, x: NodeId) -> Result<NodeId> {
        let h = b.linear(g, &format!("{name}.fc1"), x)?;
        let h = g.gelu(h);
        b.linear(g, &format!("{name}.fc2"), h)
    }

    /// Frame-wise concatenation and projection. An absent stream is replaced
    /// by zeros of the same shape as the present one.
    pub fn fuse(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        h_a: Option<NodeId>,
        h_b: Option<NodeId>,
    ) -> Result<NodeId> {
        let rows = match (h_a, h_b) {
            (None, None) => return Err(Error::InvalidArgument("fuse: both streams are absent".into())),
            (Some(x), _) | (None, Some(x)) => g.value(x).rows(),
        };
        let dh = self.config.frontend_dim;
        let h_a = match h_a {
            Some(h) => h,
            None => g.constant(Tensor::zeros(&[rows, dh])),
        };
        let h_b = match h_b {
            Some(h) => h,
            None => g.constant(Tensor::zeros(&[rows, dh])),
        };
        let cat = g.concat_lastdim(h_a, h_b)?;
        b.linear(g, "fusion", cat)
    }

    /// Frontends and fusion for a batch of utterances stacked along frames.
    fn fused_batch(&self, g: &mut Graph, b: &mut Binder, items: &[BatchItem]) -> Result<(NodeId, Vec<usize>)> {
        let mut lengths = Vec::with_capacity(items.len());
        for it in items {
            lengths.push(it.input.frames()?);
        }
        let total: usize = lengths.iter().sum();
        let mut streams = [None, None];
        for (slot, name, dim) in [(0, "frontend_a", self.config.dim_a), (1, "frontend_b", self.config.dim_b)] {
            let mut rows = Vec::new();
            let mut parts = Vec::new();
            let mut offset = 0;
            for (it, &len) in items.iter().zip(&lengths) {
                let x = if slot == 0 { it.input.features_a } else { it.input.features_b };
                if let Some(x) = x {
                    if dim == 0 {
                        return Err(Error::InvalidArgument(format!("model has no {name}")));
                    }
                    if x.last_dim() != dim {
                        return Err(Error::shape(
                            "frontend",
                            format!("{name} expects width {dim}, got {}", x.last_dim()),
                        ));
                    }
                    parts.push(x);
                    rows.extend(offset..offset + len);
                }
                offset += len;
            }
            if parts.is_empty() {
                continue;
            }
            let x = g.constant(Tensor::vstack(&parts)?);
            let h = self.frontend(g, b, name, x)?;
            streams[slot] = Some(if rows.len() == total { h } else { g.scatter_rows(h, &rows, total)? });
        }
        if streams.iter().all(Option::is_none) {
            let dh = self.config.frontend_dim;
            let z = g.constant(Tensor::zeros(&[total, dh]));
            streams[0] = Some(z);
        }
        Ok((self.fuse(g, b, streams[0], streams[1])?, lengths))
    }

    /// Shared encoder on already-fused frames. `mask_rows` index the stacked
    /// frames.
    pub fn encode_fused(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        fused: NodeId,
        lengths: &[usize],
        mask_rows: &[usize],
    ) -> Result<EncoderNodes> {
        let dc = self.config.embed_dim;
        let mut x = fused;
        if !mask_rows.is_empty() {
            let m = b.get(g, "mask_embedding")?;
            x = g.replace_rows(x, m, mask_rows)?;
        }
        let mut segments = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            segments.push(Segment::square(start, len));
            start += len;
        }
        if self.config.positional_encoding {
            let longest = lengths.iter().copied().max().unwrap_or(0);
            let table = sinusoidal_positions(longest, dc);
            let mut pe = Vec::with_capacity(start * dc);
            for &len in lengths {
                pe.extend_from_slice(&table.data()[..len * dc]);
            }
            let pe = g.constant(Tensor::new(vec![start, dc], pe)?);
            x = g.add(x, pe)?;
        }
        let mut layers = vec![x];
        for i in 0..self.config.layers {
            let p = block_path(i);
            let h = b.layer_norm(g, &format!("{p}.ln1"), x)?;
            let q = b.linear(g, &format!("{p}.attn.q"), h)?;
            let k = b.linear(g, &format!("{p}.attn.k"), h)?;
            let v = b.linear(g, &format!("{p}.attn.v"), h)?;
            let a = g.attention(q, k, v, self.config.heads, &segments, false)?;
            let o = b.linear(g, &format!("{p}.attn.o"), a)?;
            x = g.add(x, o)?;
            let h = b.layer_norm(g, &format!("{p}.ln2"), x)?;
            let f = b.linear(g, &format!("{p}.ffn.fc1"), h)?;
            let f = g.gelu(f);
            let f = b.linear(g, &format!("{p}.ffn.fc2"), f)?;
            x = g.add(x, f)?;
            layers.push(x);
        }
        let final_features = b.layer_norm(g, "encoder.final_ln", x)?;
        Ok(EncoderNodes { layers, final_features, segments })
    }

    /// Batched encoder pass; utterances never attend to each other.
    pub fn encode_batch(&self, g: &mut Graph, b: &mut Binder, items: &[BatchItem]) -> Result<EncoderNodes> {
        let (fused, lengths) = self.fused_batch(g, b, items)?;
        let mut mask_rows = Vec::new();
        let mut offset = 0;
        for (it, &len) in items.iter().zip(&lengths) {
            for &m in it.mask {
                if m >= len {
                    return Err(Error::InvalidArgument(format!("mask index {m} >= frame count {len}")));
                }
                mask_rows.push(offset + m);
            }
            offset += len;
        }
        self.encode_fused(g, b, fused, &lengths, &mask_rows)
    }

    /// Linear cluster prediction head on encoder features.
    pub fn cluster_logits_node(&self, g: &mut Graph, b: &mut Binder, features: NodeId) -> Result<NodeId> {
        b.linear(g, "cluster_head", features)
    }

    pub fn frame_logits_node(&self, g: &mut Graph, b: &mut Binder, features: NodeId) -> Result<NodeId> {
        b.linear(g, "frame_head", features)
    }

    /// Inference-mode encoder pass for one utterance.
    pub fn encode(&self, input: ModalityInput, mask: Option<&[usize]>) -> Result<EncoderOutput> {
        let mut out = self.encode_many(&[BatchItem { input, mask: mask.unwrap_or(&[]) }])?;
        Ok(out.remove(0))
    }

    /// Inference-mode encoder pass over several utterances at once.
    pub fn encode_many(&self, items: &[BatchItem]) -> Result<Vec<EncoderOutput>> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, &[]);
        let nodes = self.encode_batch(&mut g, &mut b, items)?;
        Ok(nodes
            .segments
            .iter()
            .map(|s| EncoderOutput {
                layers: nodes.layers.iter().map(|&l| g.value(l).slice_rows(s.q_start, s.q_start + s.q_len)).collect(),
                final_features: g.value(nodes.final_features).slice_rows(s.q_start, s.q_start + s.q_len),
            })
            .collect())
    }

    /// Encode many utterances without masking, in chunks of roughly
    /// `frames_per_chunk` frames, evaluated in parallel.
    pub fn encode_all(&self, inputs: &[ModalityInput], frames_per_chunk: usize) -> Result<Vec<EncoderOutput>> {
        let mut chunks: Vec<Vec<BatchItem>> = Vec::new();
        let mut current = Vec::new();
        let mut frames = 0;
        for &input in inputs {
            let n = input.frames()?;
            if !current.is_empty() && frames + n > frames_per_chunk {
                chunks.push(std::mem::take(&mut current));
                frames = 0;
            }
            current.push(BatchItem { input, mask: &[] });
            frames += n;
        }
        if !current.is_empty() {
            chunks.push(current);
        }
        let results: Vec<Result<Vec<EncoderOutput>>> = chunks.par_iter().map(|c| self.encode_many(c)).collect();
        let mut out = Vec::with_capacity(inputs.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    /// Cluster logits for already-computed features (`T x embed_dim`).
    pub fn cluster_logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, &[]);
        let x = g.constant(features.clone());
        let y = self.cluster_logits_node(&mut g, &mut b, x)?;
        Ok(g.value(y).clone())
    }

    pub fn frame_logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, &[]);
        let x = g.constant(features.clone());
        let y = self.frame_logits_node(&mut g, &mut b, x)?;
        Ok(g.value(y).clone())
    }

    /// Compare analytic and central-difference gradients of a masked
    /// cluster-prediction loss over the full encoder and cluster head, on
    /// random inputs of `frames` frames carrying every stream the model has.
    pub fn grad_check(&self, frames: usize, n_coords: usize, eps: f64, seed: u64) -> Result<GradCheckReport> {
        if !self.has_cluster_head() || frames == 0 {
            return Err(Error::InvalidArgument("gradient check needs a cluster head and at least one frame".into()));
        }
        let mut r = rng::stream(seed, "grad-check/inputs");
        let xa = self.has_frontend_a().then(|| Tensor::randn(&[frames, self.config.dim_a], 1.0, &mut r));
        let xb = self.has_frontend_b().then(|| Tensor::randn(&[frames, self.config.dim_b], 1.0, &mut r));
        let targets: Vec<usize> = (0..frames).map(|_| r.random_range(0..self.config.n_clusters)).collect();
        let mask: Vec<usize> = (0..frames).filter(|t| t % 3 == 1).collect();
        let weights: Vec<f64> = (0..frames).map(|t| if t % 3 == 1 { 1.0 } else { 0.1 }).collect();
        let trainable = vec![true; self.params.len()];
        grad_check(
            &self.params,
            |g, ps| {
                let mut b = Binder::new(ps, &trainable);
                let input = ModalityInput::new(xa.as_ref(), xb.as_ref())?;
                let nodes = self.encode_batch(g, &mut b, &[BatchItem { input, mask: &mask }])?;
                let logits = self.cluster_logits_node(g, &mut b, nodes.final_features)?;
                g.cross_entropy(logits, &targets, &weights)
            },
            eps,
            n_coords,
            seed,
        )
    }

    /// Randomly perturb all parameters; handy for tests needing a non-trivial model.
    #[doc(hidden)]
    pub fn jitter(&mut self, std: f64, seed: u64) {
        let mut r = rng::stream(seed, "model/jitter");
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            for v in self.params.tensor_mut(id).data_mut() {
                *v += std * (r.random::<f64>() * 2.0 - 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests;
