//! Semantic encoders for each modality and the per-modality channel
//! encoders that map feature rows to unit-power complex symbols.

use std::collections::BTreeMap;

use candle::{DType, Tensor};

use crate::channel::power_normalize_tensor;
use crate::datasets::vocab::PAD;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{EncoderLayer, Init, LayerNorm, Linear, ParamStore};
use crate::task::{Modality, TaskId};

/// Batched feature matrices, `(batch, rows, dim)`.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub values: Tensor,
}

impl FeatureMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims3()?;
        Ok(FeatureMatrix { values })
    }

    /// A single unbatched `rows x dim` matrix.
    pub fn from_rows(rows: &[Vec<f64>], dtype: DType, device: &candle::Device) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch("ragged feature rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (1, rows.len(), dim), device)?.to_dtype(dtype)?;
        Ok(FeatureMatrix { values: t })
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn rows(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[2]
    }
}

fn task_table(ps: &mut ParamStore, prefix: &str, modality: Modality, d: usize) -> Result<BTreeMap<TaskId, Tensor>> {
    TaskId::ALL
        .iter()
        .filter(|t| t.uses(modality))
        .map(|&t| Ok((t, ps.create(&format!("{prefix}.task.{t}"), &[1, 1, d], Init::Normal(0.02))?)))
        .collect()
}

fn prepend(table: &BTreeMap<TaskId, Tensor>, task: TaskId, x: &Tensor) -> Result<Tensor> {
    let w = table.get(&task).ok_or(Error::UnknownTask(task))?;
    let (b, _, d) = x.dims3()?;
    let w = w.broadcast_as((b, 1, d))?;
    Ok(Tensor::cat(&[&w, x], 1)?)
}

fn drop_first(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(1)?;
    Ok(x.narrow(1, 1, n - 1)?)
}

/// Transformer over image patches with a prepended task embedding.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    patch_embed: Linear,
    pos: Tensor,
    task: BTreeMap<TaskId, Tensor>,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl ImageEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let patch_embed = Linear::new(ps, "img.patch_embed", cfg.patch_dim(), d)?;
        let pos = ps.create("img.pos", &[1, cfg.image_rows(), d], Init::Normal(0.02))?;
        let task = task_table(ps, "img", Modality::Image, d)?;
        let layers = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(ps, &format!("img.enc.{i}"), d, cfg.heads, cfg.ffn_hidden))
            .collect::<Result<_>>()?;
        Ok(ImageEncoder {
            patch_embed,
            pos,
            task,
            layers,
            norm: LayerNorm::plain(),
        })
    }

    /// `patches` is `(batch, L, patch_dim)`; returns `(batch, L, d)`.
    pub fn encode(&self, patches: &Tensor, task: TaskId) -> Result<FeatureMatrix> {
        if !task.uses(Modality::Image) {
            return Err(Error::UnknownTask(task));
        }
        let (_, l, _) = patches.dims3()?;
        let pos = self.pos.narrow(1, 0, l)?;
        // Pixels in [0, 1] are centred to roughly zero mean, unit spread.
        let centred = patches.affine(PIXEL_SCALE, -0.5 * PIXEL_SCALE)?;
        let x = self.patch_embed.forward(&centred)?.broadcast_add(&pos)?;
        let mut h = prepend(&self.task, task, &x)?;
        for layer in &self.layers {
            h = layer.forward(&h, None)?;
        }
        FeatureMatrix::new(drop_first(&self.norm.forward(&h)?)?)
    }
}

/// Pixel units the model works in: `PIXEL_SCALE * (x - 0.5)`.
pub const PIXEL_SCALE: f64 = 4.0;

/// Transformer over token ids with a prepended task embedding. Padding
/// positions are masked as attention keys.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    tok_embed: Tensor,
    pos: Tensor,
    task: BTreeMap<TaskId, Tensor>,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl TextEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let tok_embed = ps.create("txt.tok_embed", &[cfg.vocab_size, d], Init::Normal(0.1))?;
        let pos = ps.create("txt.pos", &[1, cfg.max_len, d], Init::Normal(0.02))?;
        let task = task_table(ps, "txt", Modality::Text, d)?;
        let layers = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(ps, &format!("txt.enc.{i}"), d, cfg.heads, cfg.ffn_hidden))
            .collect::<Result<_>>()?;
        Ok(TextEncoder {
            tok_embed,
            pos,
            task,
            layers,
            norm: LayerNorm::plain(),
        })
    }

    /// `ids` is a `(batch, S)` u32 tensor; returns `(batch, S, d)`.
    pub fn encode(&self, ids: &Tensor, task: TaskId) -> Result<FeatureMatrix> {
        if !task.uses(Modality::Text) {
            return Err(Error::UnknownTask(task));
        }
        let (b, s) = ids.dims2()?;
        let d = self.tok_embed.dim(1)?;
        let emb = self
            .tok_embed
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, s, d))?
            .broadcast_add(&self.pos.narrow(1, 0, s)?)?;
        let mut h = prepend(&self.task, task, &emb)?;
        let dtype = h.dtype();
        // key mask: the task slot is always visible, pads never are
        let pad = ids.eq(PAD)?.to_dtype(dtype)?;
        let visible = Tensor::zeros((b, 1), dtype, ids.device())?;
        let bias = (Tensor::cat(&[&visible, &pad], 1)? * -1e9)?.reshape((b, 1, 1, s + 1))?;
        for layer in &self.layers {
            h = layer.forward(&h, Some(&bias))?;
        }
        FeatureMatrix::new(drop_first(&self.norm.forward(&h)?)?)
    }
}

/// Complex symbols of one modality, `(batch, rows * k, 2)`, with the feature
/// row that produced each group of `k` symbols.
#[derive(Debug, Clone)]
pub struct ChannelSymbols {
    pub symbols: Tensor,
    pub rows: Vec<usize>,
    pub per_row: usize,
    /// Samples whose symbols were all zero, left unnormalized.
    pub degenerate: Vec<bool>,
}

impl ChannelSymbols {
    pub fn len(&self) -> usize {
        self.rows.len() * self.per_row
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Source feature row of every symbol.
    pub fn symbol_rows(&self) -> Vec<usize> {
        self.rows
            .iter()
            .flat_map(|&r| std::iter::repeat_n(r, self.per_row))
            .collect()
    }
}

/// Row-wise fully-connected compressor to `2k` reals per feature row.
#[derive(Debug, Clone)]
pub struct ChannelEncoder {
    hidden: Linear,
    out: Linear,
    k: usize,
}

impl ChannelEncoder {
    pub fn new(ps: &mut ParamStore, modality: Modality, cfg: &ModelConfig) -> Result<Self> {
        let prefix = format!("{}.chan_enc", modality.short());
        Ok(ChannelEncoder {
            hidden: Linear::new(ps, &format!("{prefix}.hidden"), cfg.d_model, cfg.channel_hidden)?,
            out: Linear::new(ps, &format!("{prefix}.out"), cfg.channel_hidden, 2 * cfg.symbols_per_row)?,
            k: cfg.symbols_per_row,
        })
    }

    pub fn symbols_per_row(&self) -> usize {
        self.k
    }

    /// Encodes the given feature rows; `rows` names their original indices.
    pub fn encode(&self, u: &FeatureMatrix, rows: Vec<usize>) -> Result<ChannelSymbols> {
        if rows.len() != u.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} row indices for {} feature rows",
                rows.len(),
                u.rows()
            )));
        }
        let b = u.batch();
        let z = self.out.forward(&self.hidden.forward(&u.values)?.relu()?)?;
        let z = z.reshape((b, rows.len() * self.k, 2))?;
        let (symbols, degenerate) = power_normalize_tensor(&z)?;
        Ok(ChannelSymbols {
            symbols,
            rows,
            per_row: self.k,
            degenerate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle::Device;

    fn tiny() -> (ParamStore, ModelConfig) {
        (ParamStore::new(1, DType::F64, Device::Cpu), ModelConfig::tiny())
    }

    fn mean_power(t: &Tensor) -> f64 {
        let v = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        v.iter().map(|x| x * x).sum::<f64>() / (v.len() / 2) as f64
    }

    #[test]
    fn image_rows_match_patches() {
        let (mut ps, cfg) = tiny();
        let enc = ImageEncoder::new(&mut ps, &cfg).unwrap();
        let x = Tensor::ones((2, 4, cfg.patch_dim()), DType::F64, &Device::Cpu).unwrap();
        let u = enc.encode(&x, TaskId::Retrieval).unwrap();
        assert_eq!((u.batch(), u.rows(), u.dim()), (2, 4, cfg.d_model));
        assert!(matches!(enc.encode(&x, TaskId::Sentiment), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn all_pad_text_is_finite_and_deterministic() {
        let (mut ps, cfg) = tiny();
        let enc = TextEncoder::new(&mut ps, &cfg).unwrap();
        let ids = Tensor::zeros((1, cfg.max_len), DType::U32, &Device::Cpu).unwrap();
        let a = enc.encode(&ids, TaskId::Sentiment).unwrap().values.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = enc.encode(&ids, TaskId::Sentiment).unwrap().values.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a.len(), cfg.max_len * cfg.d_model);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn task_embedding_changes_output() {
        let (mut ps, cfg) = tiny();
        let enc = TextEncoder::new(&mut ps, &cfg).unwrap();
        let ids = Tensor::new(&[[5u32, 6, 7, 0]], &Device::Cpu).unwrap();
        let a = enc.encode(&ids, TaskId::Sentiment).unwrap().values;
        let b = enc.encode(&ids, TaskId::TextRecon).unwrap().values;
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn symbols_have_unit_power_and_cover_rows() {
        let (mut ps, cfg) = tiny();
        let ce = ChannelEncoder::new(&mut ps, Modality::Image, &cfg).unwrap();
        let u = FeatureMatrix::new(
            Tensor::randn(0.0f64, 1.0, (3, 4, cfg.d_model), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let s = ce.encode(&u, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(s.symbols.dims(), &[3, 4 * cfg.symbols_per_row, 2]);
        for i in 0..3 {
            assert!((mean_power(&s.symbols.get(i).unwrap()) - 1.0).abs() < 1e-6);
        }
        let map = s.symbol_rows();
        assert_eq!(map.len(), s.len());
        for r in 0..4 {
            assert_eq!(map.iter().filter(|&&x| x == r).count(), cfg.symbols_per_row);
        }
    }

    #[test]
    fn zero_features_use_bias_path() {
        let (mut ps, cfg) = tiny();
        let ce = ChannelEncoder::new(&mut ps, Modality::Text, &cfg).unwrap();
        let u = FeatureMatrix::new(Tensor::zeros((1, 2, cfg.d_model), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let s = ce.encode(&u, vec![0, 5]).unwrap();
        assert_eq!(s.degenerate, vec![false]);
        assert!((mean_power(&s.symbols) - 1.0).abs() < 1e-6);
        assert_eq!(s.symbol_rows()[s.len() - 1], 5);
    }
}
