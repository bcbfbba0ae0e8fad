#![allow(dead_code)]

use candle::{DType, Device};
use semcom::adaptation::PartitionMap;
use semcom::datasets::{Corpus, DataConfig};
use semcom::model::{ModelConfig, UnifiedModel};
use semcom::task::{ExitTable, TaskId};

pub fn tiny_data(per_split: usize) -> DataConfig {
    DataConfig {
        image_train: per_split,
        image_test: per_split,
        vqa_train: per_split,
        vqa_test: per_split,
        sentiment_train: per_split,
        sentiment_test: per_split,
        text_train: per_split,
        text_test: per_split,
        max_len: 8,
        ..DataConfig::default()
    }
}

/// Small corpus plus a tiny model shape sized to its vocabulary.
pub fn tiny_corpus(per_split: usize) -> (Corpus, ModelConfig) {
    let corpus = Corpus::load(&tiny_data(per_split), &TaskId::ALL).unwrap();
    let cfg = ModelConfig {
        image_size: 32,
        patch: 8,
        vocab_size: corpus.vocab.len(),
        ..ModelConfig::tiny()
    };
    (corpus, cfg)
}

pub fn model(cfg: &ModelConfig, seed: u64, dtype: DType) -> UnifiedModel {
    UnifiedModel::new(
        cfg.clone(),
        PartitionMap::default_for(cfg.image_rows(), cfg.max_len),
        ExitTable::default(),
        seed,
        dtype,
        Device::Cpu,
    )
    .unwrap()
}

/// Relative error of two gradient vectors: `|a - n| / max(|a|, |n|)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-300)
}
