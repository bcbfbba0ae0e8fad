//! The unified model: encoders, channel codec, decoder and heads wired
//! together into one forward pass per task.

use std::collections::BTreeMap;

use candle::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{select_transmit, PartitionMap, TransmitRecord};
use crate::channel::{equalize_tensor, transmit_tensor, ChannelConfig, TensorReceived};
use crate::datasets::image::patchify_image;
use crate::datasets::Sample;
use crate::decoder::{ChannelDecoder, SemanticDecoder, TaskHead, TaskOutput};
use crate::encoders::{ChannelEncoder, FeatureMatrix, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::task::{ExitTable, Modality, TaskId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    /// Complex channel symbols per transmitted feature row.
    pub symbols_per_row: usize,
    pub channel_hidden: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub vqa_answers: usize,
    pub retrieval_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            heads: 4,
            encoder_layers: 8,
            decoder_layers: 8,
            ffn_hidden: 512,
            symbols_per_row: 8,
            channel_hidden: 128,
            image_size: 32,
            channels: 3,
            patch: 8,
            max_len: 16,
            vocab_size: 10000,
            vqa_answers: 12,
            retrieval_dim: 64,
        }
    }
}

impl ModelConfig {
    /// Small enough to train in minutes on one CPU core.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 64,
            encoder_layers: 2,
            ffn_hidden: 128,
            channel_hidden: 64,
            ..ModelConfig::default()
        }
    }

    /// Minimal dimensions for gradient checks and unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 8,
            ffn_hidden: 16,
            symbols_per_row: 2,
            channel_hidden: 8,
            image_size: 16,
            channels: 3,
            patch: 4,
            max_len: 8,
            vocab_size: 20,
            vqa_answers: 12,
            retrieval_dim: 4,
        }
    }

    pub fn image_rows(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn rows(&self, m: Modality) -> usize {
        match m {
            Modality::Image => self.image_rows(),
            Modality::Text => self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.decoder_layers == 0 || self.symbols_per_row == 0 || self.max_len == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }
}

/// Model-ready tensors of one batch.
#[derive(Debug, Clone)]
pub struct Inputs {
    /// `(batch, L, patch_dim)`
    pub image: Option<Tensor>,
    /// `(batch, S)` u32
    pub text: Option<Tensor>,
}

impl Inputs {
    pub fn from_samples(samples: &[&Sample], cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        let b = samples.len();
        let image = if samples.iter().all(|s| s.image.is_some()) && b > 0 {
            let mut flat = Vec::with_capacity(b * cfg.image_rows() * cfg.patch_dim());
            for s in samples {
                for p in patchify_image(s.image.as_ref().unwrap(), cfg.patch)? {
                    flat.extend(p);
                }
            }
            if flat.len() != b * cfg.image_rows() * cfg.patch_dim() {
                return Err(Error::DimensionMismatch("image size differs from the model".into()));
            }
            Some(Tensor::from_vec(flat, (b, cfg.image_rows(), cfg.patch_dim()), device)?.to_dtype(dtype)?)
        } else {
            None
        };
        let text = if samples.iter().all(|s| s.text.is_some()) && b > 0 {
            let mut flat = Vec::with_capacity(b * cfg.max_len);
            for s in samples {
                let t = s.text.as_ref().unwrap();
                if t.len() != cfg.max_len {
                    return Err(Error::DimensionMismatch(format!("{} tokens, model expects {}", t.len(), cfg.max_len)));
                }
                flat.extend_from_slice(t);
            }
            Some(Tensor::from_vec(flat, (b, cfg.max_len), device)?)
        } else {
            None
        };
        Ok(Inputs { image, text })
    }

    pub fn get(&self, m: Modality) -> Option<&Tensor> {
        match m {
            Modality::Image => self.image.as_ref(),
            Modality::Text => self.text.as_ref(),
        }
    }
}

/// Result of one task forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: TaskOutput,
    /// Full semantic-encoder outputs before selection and channel coding.
    pub features: BTreeMap<Modality, FeatureMatrix>,
    pub record: TransmitRecord,
    pub executed_layers: usize,
    pub degenerate: usize,
}

pub struct UnifiedModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub partition: PartitionMap,
    image_encoder: ImageEncoder,
    text_encoder: TextEncoder,
    channel_encoders: BTreeMap<Modality, ChannelEncoder>,
    channel_decoder: ChannelDecoder,
    decoder: SemanticDecoder,
    heads: BTreeMap<TaskId, TaskHead>,
}

impl UnifiedModel {
    pub fn new(
        cfg: ModelConfig,
        partition: PartitionMap,
        exits: ExitTable,
        seed: u64,
        dtype: DType,
        device: Device,
    ) -> Result<Self> {
        cfg.validate()?;
        partition.validate(&TaskId::ALL, |m| cfg.rows(m))?;
        let mut ps = ParamStore::new(seed, dtype, device);
        let image_encoder = ImageEncoder::new(&mut ps, &cfg)?;
        let text_encoder = TextEncoder::new(&mut ps, &cfg)?;
        let mut channel_encoders = BTreeMap::new();
        for m in [Modality::Image, Modality::Text] {
            channel_encoders.insert(m, ChannelEncoder::new(&mut ps, m, &cfg)?);
        }
        let channel_decoder = ChannelDecoder::new(&mut ps, &cfg)?;
        let decoder = SemanticDecoder::new(&mut ps, &cfg, exits)?;
        let heads = TaskId::ALL
            .iter()
            .map(|&t| Ok((t, TaskHead::new(&mut ps, t, &cfg)?)))
            .collect::<Result<_>>()?;
        Ok(UnifiedModel {
            cfg,
            store: ps,
            partition,
            image_encoder,
            text_encoder,
            channel_encoders,
            channel_decoder,
            decoder,
            heads,
        })
    }

    pub fn decoder(&self) -> &SemanticDecoder {
        &self.decoder
    }

    pub fn exit_layer_for(&self, task: TaskId) -> Result<usize> {
        self.decoder.exit_layer_for(task)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn inputs(&self, samples: &[&Sample]) -> Result<Inputs> {
        Inputs::from_samples(samples, &self.cfg, self.dtype(), self.device())
    }

    pub fn encode(&self, task: TaskId, inputs: &Inputs) -> Result<BTreeMap<Modality, FeatureMatrix>> {
        let mut out = BTreeMap::new();
        for &m in task.modalities() {
            let x = inputs
                .get(m)
                .ok_or_else(|| Error::ShapeMismatch(format!("{task} batch lacks {m} input")))?;
            let u = match m {
                Modality::Image => self.image_encoder.encode(x, task)?,
                Modality::Text => self.text_encoder.encode(x, task)?,
            };
            out.insert(m, u);
        }
        Ok(out)
    }

    /// Full chain for one task. `channel = None` delivers the symbols
    /// without noise or fading.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        task: TaskId,
        inputs: &Inputs,
        channel: Option<&ChannelConfig>,
        rng: &mut R,
    ) -> Result<Forward> {
        let features = self.encode(task, inputs)?;
        let (selected, record) = select_transmit(&features, task, &self.partition, self.cfg.symbols_per_row)?;

        let mut streams = Vec::new();
        let mut lengths = Vec::new();
        let mut degenerate = 0;
        for (m, sel) in &selected {
            let sym = self.channel_encoders[m].encode(&sel.features, sel.rows.clone())?;
            degenerate += sym.degenerate.iter().filter(|&&d| d).count();
            lengths.push(sym.len());
            streams.push(sym.symbols);
        }
        let x = Tensor::cat(&streams, 1)?;
        let rx = match channel {
            None => TensorReceived::bypass(&x),
            Some(cfg) => transmit_tensor(&x, cfg, rng)?,
        };
        let y = equalize_tensor(&rx)?;

        let mut decoded: BTreeMap<Modality, FeatureMatrix> = BTreeMap::new();
        let mut offset = 0;
        for ((m, sel), n) in selected.iter().zip(&lengths) {
            let part = y.narrow(1, offset, *n)?;
            offset += n;
            decoded.insert(*m, self.channel_decoder.decode(&part, sel.rows.len())?);
        }
        let rows = |m: Modality| selected.get(&m).map(|s| s.rows.as_slice());
        let memory = self.decoder.assemble_decoder_input(
            decoded.get(&Modality::Image).zip(rows(Modality::Image)),
            decoded.get(&Modality::Text).zip(rows(Modality::Text)),
        )?;
        let exit = self.decoder.exit_layer_for(task)?;
        let bundle = self.decoder.semantic_decode(&memory, task, exit)?;
        let output = self.heads[&task].forward(&bundle)?;
        Ok(Forward {
            output,
            features,
            record,
            executed_layers: bundle.executed_layer_count,
            degenerate,
        })
    }

    /// Replaces every parameter value; names and shapes must match.
    pub fn load_values(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        for (name, var) in self.store.vars() {
            let (shape, data) = values
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Format(format!("parameter {name}: shape {shape:?} vs {:?}", var.dims())));
            }
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        if values.len() != self.store.vars().len() {
            return Err(Error::Format("checkpoint has unknown parameters".into()));
        }
        Ok(())
    }

    /// Sets only the parameters present in `values`; the rest keep their
    /// initial values.
    pub fn load_subset(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        for (name, (shape, data)) in values {
            let var = self
                .store
                .get(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Format(format!("parameter {name}: shape {shape:?} vs {:?}", var.dims())));
            }
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn values(&self)-> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
        self.store
            .vars()
            .iter()
            .map(|(n, v)| {
                let data = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Ok((n.clone(), (v.dims().to_vec(), data)))
            })
            .collect()
    }
}

/// Whether a parameter takes part in `task` when decoding stops at `exit`.
/// Selects the parameters a stand-alone single-task model would store.
pub fn used_by_task(name: &str, task: TaskId, exit: usize) -> bool {
    let parts: Vec<&str> = name.split('.').collect();
    let modality = |s: &str| match s {
        "img" => Some(Modality::Image),
        "txt" => Some(Modality::Text),
        _ => None,
    };
    match parts[0] {
        "img" | "txt" => {
            let m = modality(parts[0]).unwrap();
            task.uses(m) && (parts.get(1) != Some(&"task") || parts.get(2) == Some(&task.as_str()))
        }
        "chan_dec" => true,
        "dec" => match parts.get(1).copied() {
            Some("modality") | Some("mem_pos") => parts.get(2).and_then(|s| modality(s)).is_some_and(|m| task.uses(m)),
            Some("recon_pos") => matches!(
                (parts.get(2).copied(), task),
                (Some("img"), TaskId::ImageRecon) | (Some("txt"), TaskId::TextRecon)
            ),
            Some("query") => parts.get(2) == Some(&task.as_str()),
            Some("layer") => parts.get(2).and_then(|s| s.parse::<usize>().ok()).is_some_and(|i| i < exit),
            _ => true,
        },
        "head" => parts.get(1) == Some(&task.as_str()),
        _ => true,
    }
}
