//! Unified channel decoder, query-driven semantic decoder with per-task exit
//! depths, and the task heads.

use std::collections::BTreeMap;

use candle::{Tensor, D};

use crate::encoders::FeatureMatrix;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{DecoderLayer, Init, LayerNorm, Linear, ParamStore};
use crate::task::{ExitTable, Modality, TaskId};

/// Spread of the learned memory and reconstruction position embeddings.
/// Reconstruction queries rely on these alone to tell positions apart.
const POSITION_INIT: f64 = 0.5;

/// Inverts the channel encoder: `k` complex symbols per row back to `d`
/// features. Shared by both modalities.
#[derive(Debug, Clone)]
pub struct ChannelDecoder {
    hidden: Linear,
    out: Linear,
    k: usize,
}

impl ChannelDecoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(ChannelDecoder {
            hidden: Linear::new(ps, "chan_dec.hidden", 2 * cfg.symbols_per_row, cfg.channel_hidden)?,
            out: Linear::new(ps, "chan_dec.out", cfg.channel_hidden, cfg.d_model)?,
            k: cfg.symbols_per_row,
        })
    }

    /// `received` is `(batch, rows * k, 2)`; returns `(batch, rows, d)`.
    pub fn decode(&self, received: &Tensor, rows: usize) -> Result<FeatureMatrix> {
        let (b, n, two) = received.dims3()?;
        if two != 2 || n != rows * self.k {
            return Err(Error::ShapeMismatch(format!(
                "{n} symbols for {rows} rows of {} symbols",
                self.k
            )));
        }
        let z = received.reshape((b, rows, 2 * self.k))?;
        FeatureMatrix::new(self.out.forward(&self.hidden.forward(&z)?.relu()?)?)
    }
}

/// Decoder states of one forward pass.
#[derive(Debug, Clone)]
pub struct ExitBundle {
    pub task: TaskId,
    /// Query states after each executed layer.
    pub states: Vec<Tensor>,
    pub executed_layer_count: usize,
}

impl ExitBundle {
    pub fn output(&self) -> &Tensor {
        self.states.last().expect("at least one executed layer")
    }
}

#[derive(Debug, Clone)]
pub struct SemanticDecoder {
    modality: BTreeMap<Modality, Tensor>,
    mem_pos: BTreeMap<Modality, Tensor>,
    queries: BTreeMap<TaskId, Tensor>,
    recon_pos: BTreeMap<Modality, Tensor>,
    layers: Vec<DecoderLayer>,
    exits: ExitTable,
}

fn modality_rows(cfg: &ModelConfig, m: Modality) -> usize {
    match m {
        Modality::Image => cfg.image_rows(),
        Modality::Text => cfg.max_len,
    }
}

fn index_tensor(rows: &[usize], like: &Tensor) -> Result<Tensor> {
    let idx: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    Ok(Tensor::new(idx.as_slice(), like.device())?)
}

impl SemanticDecoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, exits: ExitTable) -> Result<Self> {
        exits.validate(cfg.decoder_layers)?;
        let d = cfg.d_model;
        let mut modality = BTreeMap::new();
        let mut mem_pos = BTreeMap::new();
        let mut recon_pos = BTreeMap::new();
        for m in [Modality::Image, Modality::Text] {
            let n = modality_rows(cfg, m);
            modality.insert(m, ps.create(&format!("dec.modality.{}", m.short()), &[1, 1, d], Init::Normal(0.02))?);
            mem_pos.insert(m, ps.create(&format!("dec.mem_pos.{}", m.short()), &[n, d], Init::Normal(POSITION_INIT))?);
            recon_pos.insert(m, ps.create(&format!("dec.recon_pos.{}", m.short()), &[1, n, d], Init::Normal(POSITION_INIT))?);
        }
        let queries = TaskId::ALL
            .iter()
            .map(|&t| Ok((t, ps.create(&format!("dec.query.{t}"), &[1, 1, d], Init::Normal(0.02))?)))
            .collect::<Result<_>>()?;
        let layers = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(ps, &format!("dec.layer.{i}"), d, cfg.heads, cfg.ffn_hidden))
            .collect::<Result<_>>()?;
        Ok(SemanticDecoder {
            modality,
            mem_pos,
            queries,
            recon_pos,
            layers,
            exits,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn exit_layer_for(&self, task: TaskId) -> Result<usize> {
        self.exits.exit_layer_for(task)
    }

    /// Concatenates decoded rows, image before text, adding the modality
    /// type embedding and the embedding of each row's original position.
    pub fn assemble_decoder_input(
        &self,
        image: Option<(&FeatureMatrix, &[usize])>,
        text: Option<(&FeatureMatrix, &[usize])>,
    ) -> Result<FeatureMatrix> {
        let mut parts = Vec::new();
        for (m, part) in [(Modality::Image, image), (Modality::Text, text)] {
            let Some((u, rows)) = part else { continue };
            if rows.len() != u.rows() {
                return Err(Error::ShapeMismatch(format!("{} positions for {} rows", rows.len(), u.rows())));
            }
            let pos = self.mem_pos[&m].index_select(&index_tensor(rows, &u.values)?, 0)?;
            parts.push(u.values.broadcast_add(&self.modality[&m])?.broadcast_add(&pos)?);
        }
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("decoder input needs at least one modality".into()));
        }
        FeatureMatrix::new(Tensor::cat(&parts, 1)?)
    }

    fn initial_queries(&self, task: TaskId, batch: usize) -> Result<Tensor> {
        let q = self.queries.get(&task).ok_or(Error::UnknownTask(task))?;
        let d = q.dim(2)?;
        let q = q.broadcast_as((batch, 1, d))?.contiguous()?;
        let recon = match task {
            TaskId::ImageRecon => Some(Modality::Image),
            TaskId::TextRecon => Some(Modality::Text),
            _ => None,
        };
        match recon {
            None => Ok(q),
            // one query per reconstructed patch or token
            Some(m) => Ok(self.recon_pos[&m].broadcast_add(&q)?),
        }
    }

    /// Runs the first `exit_layer` decoder layers.
    pub fn semantic_decode(&self, memory: &FeatureMatrix, task: TaskId, exit_layer: usize) -> Result<ExitBundle> {
        if exit_layer == 0 || exit_layer > self.layers.len() {
            return Err(Error::Config(format!(
                "exit layer {exit_layer} outside 1..={}",
                self.layers.len()
            )));
        }
        let mut h = self.initial_queries(task, memory.batch())?;
        let mut states = Vec::with_capacity(exit_layer);
        for layer in &self.layers[..exit_layer] {
            h = layer.forward(&h, &memory.values)?;
            states.push(h.clone());
        }
        Ok(ExitBundle {
            task,
            states,
            executed_layer_count: exit_layer,
        })
    }
}

/// Head output per task family.
#[derive(Debug, Clone)]
pub enum TaskOutput {
    /// `(batch, classes)`
    Logits(Tensor),
    /// `(batch, dim)`, unit norm rows
    Embedding(Tensor),
    /// `(batch, L, patch_dim)` in [0, 1]
    Patches(Tensor),
    /// `(batch, S, vocab)`
    TokenLogits(Tensor),
}

impl TaskOutput {
    pub fn tensor(&self) -> &Tensor {
        match self {
            TaskOutput::Logits(t) | TaskOutput::Embedding(t) | TaskOutput::Patches(t) | TaskOutput::TokenLogits(t) => t,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskHead {
    task: TaskId,
    norm: LayerNorm,
    out: Linear,
}

pub fn head_width(task: TaskId, cfg: &ModelConfig) -> usize {
    match task {
        TaskId::Sentiment => 2,
        TaskId::Vqa => cfg.vqa_answers,
        TaskId::Retrieval => cfg.retrieval_dim,
        TaskId::ImageRecon => cfg.patch_dim(),
        TaskId::TextRecon => cfg.vocab_size,
    }
}

impl TaskHead {
    pub fn new(ps: &mut ParamStore, task: TaskId, cfg: &ModelConfig) -> Result<Self> {
        Ok(TaskHead {
            task,
            norm: LayerNorm::new(ps, &format!("head.{task}.norm"), cfg.d_model)?,
            out: Linear::new(ps, &format!("head.{task}.out"), cfg.d_model, head_width(task, cfg))?,
        })
    }

    pub fn forward(&self, bundle: &ExitBundle) -> Result<TaskOutput> {
        if bundle.task != self.task {
            return Err(Error::UnknownTask(bundle.task));
        }
        let h = self.norm.forward(bundle.output())?;
        match self.task {
            TaskId::Sentiment | TaskId::Vqa => Ok(TaskOutput::Logits(self.out.forward(&h.squeeze(1)?)?)),
            TaskId::Retrieval => {
                let e = self.out.forward(&h.squeeze(1)?)?;
                let norm = (e.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
                Ok(TaskOutput::Embedding(e.broadcast_div(&norm)?))
            }
            TaskId::ImageRecon => Ok(TaskOutput::Patches(candle_nn::ops::sigmoid(&self.out.forward(&h)?)?)),
            TaskId::TextRecon => Ok(TaskOutput::TokenLogits(self.out.forward(&h)?)),
        }
    }
}
