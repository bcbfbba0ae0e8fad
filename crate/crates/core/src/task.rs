//! Task identifiers and per-task metadata shared by every stage of the system.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Sentiment,
    Vqa,
    Retrieval,
    ImageRecon,
    TextRecon,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::Sentiment,
        TaskId::Vqa,
        TaskId::Retrieval,
        TaskId::ImageRecon,
        TaskId::TextRecon,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Sentiment => "sentiment",
            TaskId::Vqa => "vqa",
            TaskId::Retrieval => "retrieval",
            TaskId::ImageRecon => "image_recon",
            TaskId::TextRecon => "text_recon",
        }
    }

    pub fn modalities(self) -> &'static [Modality] {
        match self {
            TaskId::Sentiment | TaskId::TextRecon => &[Modality::Text],
            TaskId::Vqa => &[Modality::Image, Modality::Text],
            TaskId::Retrieval | TaskId::ImageRecon => &[Modality::Image],
        }
    }

    pub fn uses(self, modality: Modality) -> bool {
        self.modalities().contains(&modality)
    }

    pub fn is_reconstruction(self) -> bool {
        matches!(self, TaskId::ImageRecon | TaskId::TextRecon)
    }

    pub fn metric(self) -> MetricKind {
        match self {
            TaskId::Sentiment | TaskId::Vqa => MetricKind::Accuracy,
            TaskId::Retrieval => MetricKind::RecallAt1,
            TaskId::ImageRecon => MetricKind::Psnr,
            TaskId::TextRecon => MetricKind::Bleu,
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            TaskId::Sentiment | TaskId::Vqa | TaskId::TextRecon => LossKind::CrossEntropy,
            TaskId::Retrieval => LossKind::Triplet,
            TaskId::ImageRecon => LossKind::Mse,
        }
    }

    /// Decoder depth at which this task's head is attached.
    pub fn default_exit_layer(self) -> usize {
        match self {
            TaskId::Vqa => 8,
            TaskId::Retrieval => 6,
            TaskId::ImageRecon => 4,
            TaskId::TextRecon => 3,
            TaskId::Sentiment => 2,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTaskName(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }

    /// Prefix used in parameter names.
    pub fn short(self) -> &'static str {
        match self {
            Modality::Image => "img",
            Modality::Text => "txt",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    #[serde(rename = "recall_at_1")]
    RecallAt1,
    #[serde(rename = "psnr_db")]
    Psnr,
    Bleu,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::RecallAt1 => "recall_at_1",
            MetricKind::Psnr => "psnr_db",
            MetricKind::Bleu => "bleu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Triplet,
    Mse,
}

/// Which system produced a result row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Udeepsc,
    Tdeepsc,
    Conventional,
    UpperBound,
}

impl System {
    pub fn as_str(self) -> &'static str {
        match self {
            System::Udeepsc => "udeepsc",
            System::Tdeepsc => "tdeepsc",
            System::Conventional => "conventional",
            System::UpperBound => "upper_bound",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "udeepsc" => Ok(System::Udeepsc),
            "tdeepsc" => Ok(System::Tdeepsc),
            "conventional" => Ok(System::Conventional),
            "upper_bound" => Ok(System::UpperBound),
            other => Err(Error::Malformed(format!("unknown system `{other}`"))),
        }
    }
}

/// Per-task decoder exit depths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitTable(pub BTreeMap<TaskId, usize>);

impl Default for ExitTable {
    fn default() -> Self {
        ExitTable(
            TaskId::ALL
                .into_iter()
                .map(|t| (t, t.default_exit_layer()))
                .collect(),
        )
    }
}

impl ExitTable {
    pub fn exit_layer_for(&self, task: TaskId) -> Result<usize> {
        self.0.get(&task).copied().ok_or(Error::UnknownTask(task))
    }

    pub fn validate(&self, decoder_layers: usize) -> Result<()> {
        for (task, &layer) in &self.0 {
            if layer == 0 || layer > decoder_layers {
                return Err(Error::Config(format!(
                    "exit layer {layer} for {task} outside 1..={decoder_layers}"
                )));
            }
        }
        Ok(())
    }

    pub fn with_override(mut self, task: TaskId, layer: usize) -> Self {
        self.0.insert(task, layer);
        self
    }
}

/// Resolved metadata for one task under a given model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task: TaskId,
    pub modalities: Vec<Modality>,
    pub loss: LossKind,
    pub metric: MetricKind,
    pub exit_layer: usize,
    /// Output width of the head: class count, answer count, embedding size,
    /// patch width or vocabulary size.
    pub head_width: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_table_defaults() {
        let t = ExitTable::default();
        assert_eq!(t.exit_layer_for(TaskId::Vqa).unwrap(), 8);
        assert_eq!(t.exit_layer_for(TaskId::Retrieval).unwrap(), 6);
        assert_eq!(t.exit_layer_for(TaskId::ImageRecon).unwrap(), 4);
        assert_eq!(t.exit_layer_for(TaskId::TextRecon).unwrap(), 3);
        assert_eq!(t.exit_layer_for(TaskId::Sentiment).unwrap(), 2);
    }

    #[test]
    fn exit_table_rejects_out_of_range() {
        let t = ExitTable::default().with_override(TaskId::Vqa, 9);
        assert!(t.validate(8).is_err());
        let t = ExitTable::default().with_override(TaskId::Vqa, 0);
        assert!(t.validate(8).is_err());
        assert!(ExitTable::default().validate(8).is_ok());
    }

    #[test]
    fn missing_task_is_unknown() {
        let mut t = ExitTable::default();
        t.0.remove(&TaskId::Vqa);
        assert!(matches!(
            t.exit_layer_for(TaskId::Vqa),
            Err(Error::UnknownTask(TaskId::Vqa))
        ));
    }

    #[test]
    fn task_names_round_trip() {
        for t in TaskId::ALL {
            assert_eq!(t.as_str().parse::<TaskId>().unwrap(), t);
        }
        assert!("ocr".parse::<TaskId>().is_err());
    }
}
