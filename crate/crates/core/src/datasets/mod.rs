//! Desk-scale datasets for the five tasks.
//!
//! Raw records (images plus untokenized text) come either from the synthetic
//! generators or from a data root on disk; they are tokenized against one
//! shared vocabulary into [`Dataset`]s.

pub mod files;
pub mod image;
pub mod synthetic;
pub mod vocab;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use self::image::{patchify_image, unpatchify_image, Image};
pub use self::synthetic::{make_toy_vqa, VQA_ANSWERS};
pub use self::vocab::{tokenize_text, Vocabulary};
use crate::error::{Error, Result};
use crate::task::{Modality, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    /// Sentiment polarity or retrieval class.
    Class(u32),
    /// Index into the VQA answer set.
    Answer(u32),
    /// The input itself is the target.
    Reconstruct,
}

impl Label {
    pub fn id(self) -> Option<u32> {
        match self {
            Label::Class(c) | Label::Answer(c) => Some(c),
            Label::Reconstruct => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub image: Option<Image>,
    pub text: Option<String>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDataset {
    pub task: TaskId,
    pub split: Split,
    pub samples: Vec<RawSample>,
}

impl RawDataset {
    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().filter_map(|s| s.text.as_deref())
    }

    pub fn tokenize(&self, vocab: &Vocabulary, max_len: usize) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    image: s.image.clone(),
                    text: match &s.text {
                        Some(t) => Some(tokenize_text(t, vocab, max_len)?),
                        None => None,
                    },
                    label: s.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.task, self.split, samples, vocab.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Option<Image>,
    pub text: Option<Vec<u32>>,
    pub label: Label,
}

impl Sample {
    pub fn has(&self, modality: Modality) -> bool {
        match modality {
            Modality::Image => self.image.is_some(),
            Modality::Text => self.text.is_some(),
        }
    }
}

/// Immutable tokenized dataset for one task and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: TaskId,
    pub split: Split,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(task: TaskId, split: Split, samples: Vec<Sample>, vocab_size: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Malformed(format!("empty {task} {} dataset", split.as_str())));
        }
        for (i, s) in samples.iter().enumerate() {
            for m in [Modality::Image, Modality::Text] {
                if s.has(m) != task.uses(m) {
                    return Err(Error::Malformed(format!(
                        "sample {i} of {task}: {m} presence does not match the task"
                    )));
                }
            }
            if let Some(t) = &s.text {
                if let Some(&bad) = t.iter().find(|&&id| id as usize >= vocab_size) {
                    return Err(Error::Malformed(format!("token id {bad} >= vocabulary {vocab_size}")));
                }
            }
        }
        Ok(Dataset { task, split, samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn size(&self) -> usize {
        self.samples.len()
    }

    /// The samples at `indices`, in order.
    pub fn batch(&self, indices: &[usize]) -> Vec<&Sample> {
        indices.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.samples
            .iter()
            .map(|s| s.label.id().unwrap_or(0))
            .collect()
    }
}

/// Per-class sample lists for triplet sampling.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    by_class: BTreeMap<u32, Vec<usize>>,
    labels: Vec<u32>,
    anchors: Vec<usize>,
}

impl ClassIndex {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut labels = Vec::with_capacity(dataset.size());
        for (i, s) in dataset.samples().iter().enumerate() {
            let Label::Class(c) = s.label else {
                return Err(Error::InsufficientClasses);
            };
            by_class.entry(c).or_default().push(i);
            labels.push(c);
        }
        let anchors: Vec<usize> = by_class
            .values()
            .filter(|v| v.len() >= 2)
            .flatten()
            .copied()
            .collect();
        if by_class.len() < 2 || anchors.is_empty() {
            return Err(Error::InsufficientClasses);
        }
        Ok(ClassIndex {
            by_class,
            labels,
            anchors,
        })
    }

    /// Indices of (anchor, positive, negative).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize, usize) {
        let a = self.anchors[rng.random_range(0..self.anchors.len())];
        let class = self.labels[a];
        let same = &self.by_class[&class];
        let p = loop {
            let p = same[rng.random_range(0..same.len())];
            if p != a {
                break p;
            }
        };
        let others = self.labels.len() - same.len();
        let mut k = rng.random_range(0..others);
        let mut n = 0;
        for (&c, members) in &self.by_class {
            if c == class {
                continue;
            }
            if k < members.len() {
                n = members[k];
                break;
            }
            k -= members.len();
        }
        (a, p, n)
    }
}

/// Draws an anchor, a positive of the same class and a negative of another
/// class.
pub fn triplet_sample<'a, R: Rng + ?Sized>(
    dataset: &'a Dataset,
    rng: &mut R,
) -> Result<(&'a Sample, &'a Sample, &'a Sample)> {
    let (a, p, n) = ClassIndex::new(dataset)?.sample(rng);
    let s = dataset.samples();
    Ok((&s[a], &s[p], &s[n]))
}

/// Where data comes from and how much of it to use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding CIFAR-10 and text corpora. `None` selects the
    /// synthetic generators for every task.
    pub root: Option<PathBuf>,
    pub seed: u64,
    pub image_train: usize,
    pub image_test: usize,
    pub vqa_train: usize,
    pub vqa_test: usize,
    pub sentiment_train: usize,
    pub sentiment_test: usize,
    pub text_train: usize,
    pub text_test: usize,
    pub max_len: usize,
    pub max_vocab: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            seed: 0,
            image_train: 5000,
            image_test: 1000,
            vqa_train: 5000,
            vqa_test: 1000,
            sentiment_train: 5000,
            sentiment_test: 1000,
            text_train: 5000,
            text_test: 1000,
            max_len: 16,
            max_vocab: 10_000,
        }
    }
}

impl DataConfig {
    pub fn size(&self, task: TaskId, split: Split) -> usize {
        match (task, split) {
            (TaskId::Retrieval | TaskId::ImageRecon, Split::Train) => self.image_train,
            (TaskId::Retrieval | TaskId::ImageRecon, Split::Test) => self.image_test,
            (TaskId::Vqa, Split::Train) => self.vqa_train,
            (TaskId::Vqa, Split::Test) => self.vqa_test,
            (TaskId::Sentiment, Split::Train) => self.sentiment_train,
            (TaskId::Sentiment, Split::Test) => self.sentiment_test,
            (TaskId::TextRecon, Split::Train) => self.text_train,
            (TaskId::TextRecon, Split::Test) => self.text_test,
        }
    }

    fn split_seed(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.seed,
            Split::Test => self.seed.wrapping_add(1_000_003),
        }
    }
}

/// Raw records for one task and split.
pub fn load_raw(task: TaskId, split: Split, cfg: &DataConfig) -> Result<RawDataset> {
    let n = cfg.size(task, split);
    if n == 0 {
        return Err(Error::MissingSplit(format!("{task} {}", split.as_str())));
    }
    let seed = cfg.split_seed(split);
    let raw = match (task, &cfg.root) {
        (TaskId::Vqa, _) => make_toy_vqa(n, seed),
        (_, None) => match task {
            TaskId::Retrieval | TaskId::ImageRecon => synthetic::make_toy_images(task, n, seed),
            TaskId::Sentiment => synthetic::make_toy_sentiment(n, seed),
            TaskId::TextRecon => synthetic::make_toy_sentences(n, seed),
            TaskId::Vqa => unreachable!(),
        },
        (_, Some(root)) => files::load_cached(task, split, root, n)?,
    };
    Ok(raw.with_split(split))
}

/// Builds the shared vocabulary from the training text of every text task.
pub fn build_vocabulary(cfg: &DataConfig) -> Result<Vocabulary> {
    let mut texts = Vec::new();
    for task in [TaskId::Sentiment, TaskId::Vqa, TaskId::TextRecon] {
        let raw = load_raw(task, Split::Train, cfg)?;
        texts.extend(raw.texts().map(str::to_string));
    }
    Ok(Vocabulary::build(texts.iter().map(String::as_str), cfg.max_vocab))
}

pub fn load_task_dataset(task: TaskId, split: Split, cfg: &DataConfig, vocab: &Vocabulary) -> Result<Dataset> {
    load_raw(task, split, cfg)?.tokenize(vocab, cfg.max_len)
}

/// Train and test datasets for a set of tasks plus their shared vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: BTreeMap<TaskId, Dataset>,
    pub test: BTreeMap<TaskId, Dataset>,
}

impl Corpus {
    /// Loads every split of `tasks`, one worker thread per task.
    pub fn load(cfg: &DataConfig, tasks: &[TaskId]) -> Result<Corpus> {
        let vocab = build_vocabulary(cfg)?;
        let loaded: Vec<Result<(TaskId, Dataset, Dataset)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .iter()
                .map(|&task| {
                    let vocab = &vocab;
                    scope.spawn(move || {
                        Ok((
                            task,
                            load_task_dataset(task, Split::Train, cfg, vocab)?,
                            load_task_dataset(task, Split::Test, cfg, vocab)?,
                        ))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("loader panicked")).collect()
        });
        let mut train = BTreeMap::new();
        let mut test = BTreeMap::new();
        for r in loaded {
            let (task, tr, te) = r?;
            train.insert(task, tr);
            test.insert(task, te);
        }
        Ok(Corpus { vocab, train, test })
    }

    pub fn dataset(&self, task: TaskId, split: Split) -> Result<&Dataset> {
        let map = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        map.get(&task)
            .ok_or_else(|| Error::MissingSplit(format!("{task} {}", split.as_str())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> DataConfig {
        DataConfig {
            image_train: 40,
            image_test: 20,
            vqa_train: 30,
            vqa_test: 10,
            sentiment_train: 30,
            sentiment_test: 10,
            text_train: 30,
            text_test: 10,
            ..Default::default()
        }
    }

    fn retrieval(classes: usize, per_class: usize) -> Dataset {
        let samples = (0..classes * per_class)
            .map(|i| Sample {
                image: Some(Image::filled(4, 4, 3, 0.0)),
                text: None,
                label: Label::Class((i % classes) as u32),
            })
            .collect();
        Dataset::new(TaskId::Retrieval, Split::Train, samples, 4).unwrap()
    }

    #[test]
    fn toy_vqa_is_deterministic() {
        let a = bincode::serialize(&make_toy_vqa(100, 7)).unwrap();
        let b = bincode::serialize(&make_toy_vqa(100, 7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, bincode::serialize(&make_toy_vqa(100, 8)).unwrap());
    }

    #[test]
    fn triplet_contract() {
        let d = retrieval(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let (a, p, n) = triplet_sample(&d, &mut rng).unwrap();
            assert_eq!(p.label, a.label);
            assert_ne!(n.label, a.label);
        }
    }

    #[test]
    fn triplet_anchor_classes_are_balanced() {
        let d = retrieval(5, 20);
        let idx = ClassIndex::new(&d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            let (a, p, n) = idx.sample(&mut rng);
            assert_ne!(a, p);
            counts[(a % 5) as usize] += 1;
            assert_eq!(a % 5, p % 5);
            assert_ne!(a % 5, n % 5);
        }
        let expected = draws as f64 / 5.0;
        for c in counts {
            assert!((c as f64 - expected).abs() <= 0.2 * expected, "{counts:?}");
        }
    }

    #[test]
    fn triplet_needs_two_classes() {
        assert!(matches!(
            triplet_sample(&retrieval(1, 4), &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::InsufficientClasses)
        ));
        assert!(matches!(ClassIndex::new(&retrieval(3, 1)), Err(Error::InsufficientClasses)));
    }

    #[test]
    fn corpus_loads_every_task_synthetically() {
        let cfg = small_cfg();
        let corpus = Corpus::load(&cfg, &TaskId::ALL).unwrap();
        for task in TaskId::ALL {
            let d = corpus.dataset(task, Split::Test).unwrap();
            assert_eq!(d.task, task);
            assert!(d.size() > 0);
        }
        let sentiment = corpus.dataset(TaskId::Sentiment, Split::Train).unwrap();
        assert!(sentiment.labels().iter().all(|&l| l <= 1));
        let recon = corpus.dataset(TaskId::ImageRecon, Split::Test).unwrap();
        for s in recon.samples() {
            assert!(s.text.is_none());
            assert!(s.image.as_ref().unwrap().data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dataset_rejects_wrong_modalities() {
        let s = Sample {
            image: None,
            text: Some(vec![4]),
            label: Label::Reconstruct,
        };
        assert!(Dataset::new(TaskId::ImageRecon, Split::Train, vec![s.clone()], 10).is_err());
        assert!(Dataset::new(TaskId::TextRecon, Split::Train, vec![s.clone()], 4).is_err());
        assert!(Dataset::new(TaskId::TextRecon, Split::Train, vec![s], 10).is_ok());
        assert!(Dataset::new(TaskId::TextRecon, Split::Train, vec![], 10).is_err());
    }

    #[test]
    fn root_without_files_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig {
            root: Some(dir.path().to_path_buf()),
            ..small_cfg()
        };
        match load_raw(TaskId::Sentiment, Split::Train, &cfg) {
            Err(Error::MissingFile(p)) => assert!(p.starts_with(dir.path())),
            other => panic!("unexpected {other:?}"),
        }
        // VQA is always generated.
        assert!(load_raw(TaskId::Vqa, Split::Train, &cfg).is_ok());
    }
}
