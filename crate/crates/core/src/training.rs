//! Joint two-task training, single-task training, evaluation over SNR
//! grids, checkpoints and parameter accounting.

use std::collections::BTreeMap;
use std::path::Path;

use candle::backprop::GradStore;
use candle::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adaptation_loss_with, task_partition, LossBundle, PartitionMap};
use crate::channel::ChannelConfig;
use crate::container;
use crate::datasets::vocab::PAD;
use crate::datasets::{ClassIndex, Corpus, Dataset, Sample, Split};
use crate::decoder::TaskOutput;
use crate::encoders::{FeatureMatrix, PIXEL_SCALE};
use crate::error::{Error, Result};
use crate::model::{used_by_task, Inputs, ModelConfig, UnifiedModel};
use crate::objectives::{
    accuracy, argmax_rows, bleu, cross_entropy, mean_std, mse_tensor, psnr_from_mse, recall_at_1,
    triplet_loss_tensor, MetricReport, DEFAULT_MARGIN,
};
use crate::task::{ExitTable, Modality, System, TaskId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub train_snr_db: f64,
    pub seed: u64,
    /// Task A is drawn with probability proportional to size^exponent.
    pub sampling_exponent: f64,
    pub adaptation: bool,
    pub adaptation_normalize: bool,
    pub margin: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Linear learning-rate ramp length in steps; 0 starts at full rate.
    pub warmup_steps: usize,
    /// Cosine decay from the full rate to zero over the iterations after
    /// warmup.
    pub cosine_decay: bool,
    pub tasks: Vec<TaskId>,
    /// Steps between evaluations and checkpoints; 0 disables both.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20000,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            train_snr_db: 0.0,
            seed: 0,
            sampling_exponent: 1.0,
            adaptation: true,
            adaptation_normalize: false,
            margin: DEFAULT_MARGIN,
            grad_clip: 0.0,
            warmup_steps: 0,
            cosine_decay: false,
            tasks: TaskId::ALL.to_vec(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks enabled".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// Draws two distinct tasks. The first is drawn with probability
/// proportional to `size^exponent`, the second the same way from the rest.
pub fn sample_task_pair<R: Rng + ?Sized>(
    sizes: &[(TaskId, usize)],
    exponent: f64,
    rng: &mut R,
) -> Result<(TaskId, TaskId)> {
    if sizes.len() < 2 {
        return Err(Error::TooFewTasks(sizes.len()));
    }
    let weights: Vec<f64> = sizes.iter().map(|&(_, n)| (n as f64).powf(exponent)).collect();
    let draw = |rng: &mut R, skip: Option<usize>| -> usize {
        let total: f64 = weights.iter().enumerate().filter(|&(i, _)| Some(i) != skip).map(|(_, w)| w).sum();
        let mut u = rng.random::<f64>() * total;
        let mut last = 0;
        for (i, w) in weights.iter().enumerate() {
            if Some(i) == skip {
                continue;
            }
            last = i;
            if u < *w {
                return i;
            }
            u -= w;
        }
        last
    };
    let a = draw(rng, None);
    let b = draw(rng, Some(a));
    Ok((sizes[a].0, sizes[b].0))
}

/// What a batch is scored against.
#[derive(Debug, Clone)]
pub enum Target {
    Classes(Vec<u32>),
    /// Inputs hold anchors, positives and negatives, `n` of each, in that
    /// order.
    Triplets(usize),
    Patches(Tensor),
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub task: TaskId,
    pub inputs: Inputs,
    pub target: Target,
}

impl Batch {
    /// Number of examples, counting each triplet once.
    pub fn size(&self) -> usize {
        match &self.target {
            Target::Classes(c) => c.len(),
            Target::Triplets(n) => *n,
            Target::Patches(p) => p.dims()[0],
            Target::Tokens(t) => t.len() / self.inputs.text.as_ref().map_or(1, |x| x.dims()[1]),
        }
    }
}

pub fn make_batch(model: &UnifiedModel, task: TaskId, samples: &[&Sample]) -> Result<Batch> {
    let inputs = model.inputs(samples)?;
    let target = match task {
        TaskId::Sentiment | TaskId::Vqa => Target::Classes(
            samples
                .iter()
                .map(|s| s.label.id().ok_or_else(|| Error::Malformed(format!("{task} sample without label"))))
                .collect::<Result<_>>()?,
        ),
        TaskId::Retrieval => {
            if samples.len() % 3 != 0 {
                return Err(Error::ShapeMismatch("retrieval batch must hold whole triplets".into()));
            }
            Target::Triplets(samples.len() / 3)
        }
        TaskId::ImageRecon => Target::Patches(inputs.image.clone().ok_or_else(|| Error::Malformed("no images".into()))?),
        TaskId::TextRecon => Target::Tokens(samples.iter().flat_map(|s| s.text.clone().unwrap_or_default()).collect()),
    };
    Ok(Batch { task, inputs, target })
}

/// Draws a random training batch; retrieval batches are triplets.
pub fn sample_batch<R: Rng + ?Sized>(
    model: &UnifiedModel,
    dataset: &Dataset,
    classes: Option<&ClassIndex>,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    let s = dataset.samples();
    let picked: Vec<&Sample> = if dataset.task == TaskId::Retrieval {
        let index = classes.ok_or(Error::InsufficientClasses)?;
        let triples: Vec<(usize, usize, usize)> = (0..batch_size).map(|_| index.sample(rng)).collect();
        let mut v: Vec<&Sample> = triples.iter().map(|t| &s[t.0]).collect();
        v.extend(triples.iter().map(|t| &s[t.1]));
        v.extend(triples.iter().map(|t| &s[t.2]));
        v
    } else {
        (0..batch_size).map(|_| &s[rng.random_range(0..s.len())]).collect()
    };
    make_batch(model, dataset.task, &picked)
}

pub fn task_loss(output: &TaskOutput, target: &Target, margin: f64) -> Result<Tensor> {
    match (output, target) {
        (TaskOutput::Logits(l), Target::Classes(c)) => cross_entropy(l, c),
        (TaskOutput::TokenLogits(l), Target::Tokens(t)) => cross_entropy(l, t),
        // measured in the encoder's centred pixel units
        (TaskOutput::Patches(p), Target::Patches(x)) => Ok((mse_tensor(p, x)? * (PIXEL_SCALE * PIXEL_SCALE))?),
        (TaskOutput::Embedding(e), Target::Triplets(n)) => triplet_loss_tensor(
            &e.narrow(0, 0, *n)?,
            &e.narrow(0, *n, *n)?,
            &e.narrow(0, 2 * *n, *n)?,
            margin,
        ),
        _ => Err(Error::ShapeMismatch("head output does not match the batch target".into())),
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// First `n` samples of every modality's features.
fn leading(features: &BTreeMap<Modality, FeatureMatrix>, n: usize) -> Result<BTreeMap<Modality, FeatureMatrix>> {
    features
        .iter()
        .map(|(m, u)| Ok((*m, FeatureMatrix::new(u.values.narrow(0, 0, n)?)?)))
        .collect()
}

/// One row of the training loss CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub task_a: TaskId,
    pub task_b: Option<TaskId>,
    pub task_loss_a: f64,
    pub task_loss_b: f64,
    pub adaptation: f64,
    pub total: f64,
}

/// Model plus optimizer and the random streams driving training.
/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.get(v) {
                let g = g.affine(scale, 0.0)?;
                grads.insert(v, g);
            }
        }
    }
    Ok(norm)
}

pub struct Trainer {
    pub model: UnifiedModel,
    pub cfg: TrainConfig,
    pub channel: ChannelConfig,
    opt: AdamW,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    pub step: usize,
    pub history: Vec<LossRecord>,
}

impl Trainer {
    /// `channel` gives mode and antennas; its SNR is replaced by the
    /// training SNR.
    pub fn new(model: UnifiedModel, cfg: TrainConfig, channel: ChannelConfig) -> Result<Self> {
        cfg.validate()?;
        let channel = ChannelConfig {
            snr_db: cfg.train_snr_db,
            ..channel
        };
        channel.validate()?;
        let opt = AdamW::new(
            model.store.all_vars(),
            ParamsAdamW {
                lr: cfg.learning_rate,
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.eps,
                weight_decay: cfg.weight_decay,
            },
        )?;
        Ok(Trainer {
            data_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            noise_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c4a7),
            model,
            cfg,
            channel,
            opt,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Learning rate used for the next optimizer step.
    pub fn current_lr(&self) -> f64 {
        let (w, lr) = (self.cfg.warmup_steps, self.cfg.learning_rate);
        if self.step < w {
            return lr * (self.step + 1) as f64 / w as f64;
        }
        if !self.cfg.cosine_decay {
            return lr;
        }
        let span = self.cfg.iterations.saturating_sub(w).max(1) as f64;
        let t = ((self.step - w) as f64 / span).min(1.0);
        0.5 * lr * (1.0 + (std::f64::consts::PI * t).cos())
    }

    fn apply(&mut self, loss: &Tensor) -> Result<()> {
        let mut grads = loss.backward()?;
        self.opt.set_learning_rate(self.current_lr());
        if self.cfg.grad_clip > 0.0 {
            clip_gradients(&mut grads, &self.model.store.all_vars(), self.cfg.grad_clip)?;
        }
        self.opt.step(&grads)?;
        Ok(())
    }

    fn check(&self, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteLoss { iteration: self.step + 1 })
        }
    }

    /// Forward both tasks, add the adaptation loss and take one optimizer
    /// step on `L_A + L_B + L_a`.
    pub fn train_step(&mut self, a: &Batch, b: &Batch) -> Result<LossBundle> {
        let fa = self.model.forward(a.task, &a.inputs, Some(&self.channel), &mut self.noise_rng)?;
        let fb = self.model.forward(b.task, &b.inputs, Some(&self.channel), &mut self.noise_rng)?;
        let la = task_loss(&fa.output, &a.target, self.cfg.margin)?;
        let lb = task_loss(&fb.output, &b.target, self.cfg.margin)?;
        let adapt = if self.cfg.adaptation {
            let n = a.size().min(b.size());
            let pa = task_partition(&leading(&fa.features, n)?, a.task, &self.model.partition)?;
            let pb = task_partition(&leading(&fb.features, n)?, b.task, &self.model.partition)?;
            Some(adaptation_loss_with(&pa, &pb, self.cfg.adaptation_normalize)?)
        } else {
            None
        };
        let mut total = (&la + &lb)?;
        if let Some(l) = &adapt {
            total = (total + l)?;
        }
        let bundle = LossBundle::new(
            self.check(scalar(&la)?)?,
            self.check(scalar(&lb)?)?,
            match &adapt {
                Some(l) => self.check(scalar(l)?)?,
                None => 0.0,
            },
        );
        self.check(scalar(&total)?)?;
        self.apply(&total)?;
        self.step += 1;
        self.history.push(LossRecord {
            step: self.step,
            task_a: a.task,
            task_b: Some(b.task),
            task_loss_a: bundle.task_loss_a,
            task_loss_b: bundle.task_loss_b,
            adaptation: bundle.adaptation,
            total: bundle.total,
        });
        Ok(bundle)
    }

    /// Single-task step; there is no partner so the adaptation term is 0.
    pub fn single_step(&mut self, batch: &Batch) -> Result<LossBundle> {
        let f = self.model.forward(batch.task, &batch.inputs, Some(&self.channel), &mut self.noise_rng)?;
        let l = task_loss(&f.output, &batch.target, self.cfg.margin)?;
        let bundle = LossBundle::new(self.check(scalar(&l)?)?, 0.0, 0.0);
        self.apply(&l)?;
        self.step += 1;
        self.history.push(LossRecord {
            step: self.step,
            task_a: batch.task,
            task_b: None,
            task_loss_a: bundle.task_loss_a,
            task_loss_b: 0.0,
            adaptation: 0.0,
            total: bundle.total,
        });
        Ok(bundle)
    }

    fn class_indices(&self, corpus: &Corpus) -> Result<BTreeMap<TaskId, ClassIndex>> {
        let mut out = BTreeMap::new();
        if self.cfg.tasks.contains(&TaskId::Retrieval) {
            out.insert(TaskId::Retrieval, ClassIndex::new(corpus.dataset(TaskId::Retrieval, Split::Train)?)?);
        }
        Ok(out)
    }

    /// Runs `cfg.iterations` joint steps. `on_step` sees every bundle and
    /// may return an error to stop early.
    pub fn train(
        &mut self,
        corpus: &Corpus,
        mut on_step: impl FnMut(&Trainer, (TaskId, TaskId), &LossBundle) -> Result<()>,
    ) -> Result<()> {
        let sizes: Vec<(TaskId, usize)> = self
            .cfg
            .tasks
            .iter()
            .map(|&t| Ok((t, corpus.dataset(t, Split::Train)?.size())))
            .collect::<Result<_>>()?;
        let classes = self.class_indices(corpus)?;
        for _ in 0..self.cfg.iterations {
            let pair = sample_task_pair(&sizes, self.cfg.sampling_exponent, &mut self.data_rng)?;
            let a = sample_batch(
                &self.model,
                corpus.dataset(pair.0, Split::Train)?,
                classes.get(&pair.0),
                self.cfg.batch_size,
                &mut self.data_rng,
            )?;
            let b = sample_batch(
                &self.model,
                corpus.dataset(pair.1, Split::Train)?,
                classes.get(&pair.1),
                self.cfg.batch_size,
                &mut self.data_rng,
            )?;
            let bundle = self.train_step(&a, &b)?;
            on_step(self, pair, &bundle)?;
        }
        Ok(())
    }

    /// Trains on `task` alone for `cfg.iterations` steps.
    pub fn train_single_task(
        &mut self,
        corpus: &Corpus,
        task: TaskId,
        mut on_step: impl FnMut(&Trainer, &LossBundle) -> Result<()>,
    ) -> Result<()> {
        let dataset = corpus.dataset(task, Split::Train)?;
        let classes = if task == TaskId::Retrieval {
            Some(ClassIndex::new(dataset)?)
        } else {
            None
        };
        for _ in 0..self.cfg.iterations {
            let batch = sample_batch(&self.model, dataset, classes.as_ref(), self.cfg.batch_size, &mut self.data_rng)?;
            let bundle = self.single_step(&batch)?;
            on_step(self, &bundle)?;
        }
        Ok(())
    }
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "task_a", "task_b", "task_loss_a", "task_loss_b", "adaptation", "total"])?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            r.task_a.to_string(),
            r.task_b.map(|t| t.to_string()).unwrap_or_default(),
            r.task_loss_a.to_string(),
            r.task_loss_b.to_string(),
            r.adaptation.to_string(),
            r.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluation settings shared by every SNR point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    /// Evaluate at most this many test samples; 0 means all.
    pub max_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: vec![0, 1, 2],
            batch_size: 128,
            max_samples: 0,
        }
    }
}

fn strip_pad(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&t| t != PAD).collect()
}

/// Task metric of one pass over `samples`.
pub fn metric_once(
    model: &UnifiedModel,
    task: TaskId,
    samples: &[&Sample],
    channel: Option<&ChannelConfig>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut embeddings: Vec<Vec<f32>> = Vec::new();
    let mut scores = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let inputs = model.inputs(chunk)?;
        let f = model.forward(task, &inputs, channel, rng)?;
        match (&f.output, task) {
            (TaskOutput::Logits(l), _) => {
                preds.extend(argmax_rows(l)?);
                labels.extend(chunk.iter().map(|s| s.label.id().unwrap_or(u32::MAX)));
            }
            (TaskOutput::Embedding(e), _) => {
                embeddings.extend(e.to_dtype(DType::F32)?.to_vec2::<f32>()?);
                labels.extend(chunk.iter().map(|s| s.label.id().unwrap_or(u32::MAX)));
            }
            (TaskOutput::Patches(p), _) => {
                let x = inputs.image.as_ref().unwrap();
                let per = (p - x)?.sqr()?.flatten_from(1)?.mean(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                scores.extend(per.into_iter().map(|m| psnr_from_mse(m, 1.0)));
            }
            (TaskOutput::TokenLogits(l), _) => {
                let hyp = l.argmax(candle::D::Minus1)?.to_dtype(DType::U32)?.to_vec2::<u32>()?;
                for (s, h) in chunk.iter().zip(hyp) {
                    let reference = strip_pad(s.text.as_ref().unwrap());
                    if reference.is_empty() {
                        continue;
                    }
                    scores.push(bleu(&reference, &strip_pad(&h))?);
                }
            }
        }
    }
    match task {
        TaskId::Sentiment | TaskId::Vqa => accuracy(&preds, &labels),
        TaskId::Retrieval => {
            let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
            recall_at_1(&embeddings, &embeddings, &labels)
        }
        TaskId::ImageRecon | TaskId::TextRecon => Ok(mean_std(&scores).0),
    }
}

/// Runs the test split through the full chain at every SNR of `snr_grid`
/// (or once with the channel bypassed when `noiseless`), averaging over
/// the eval seeds. Each seed drives the same noise at every SNR.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &UnifiedModel,
    dataset: &Dataset,
    task: TaskId,
    snr_grid: &[f64],
    noiseless: bool,
    channel: &ChannelConfig,
    eval: &EvalConfig,
    system: System,
    model_tag: &str,
) -> Result<Vec<MetricReport>> {
    if dataset.task != task || dataset.split != Split::Test {
        return Err(Error::MissingSplit(format!("{task} test")));
    }
    let all: Vec<&Sample> = dataset.samples().iter().collect();
    let samples = if eval.max_samples > 0 && eval.max_samples < all.len() {
        &all[..eval.max_samples]
    } else {
        &all[..]
    };
    let points: Vec<Option<f64>> = if noiseless {
        vec![None]
    } else {
        snr_grid.iter().copied().map(Some).collect()
    };
    let probe = model.forward(task, &model.inputs(&samples[..1])?, None, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut out = Vec::new();
    for snr in points {
        let cfg = snr.map(|s| ChannelConfig { snr_db: s, ..channel.clone() });
        let values = eval
            .seeds
            .iter()
            .map(|&seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                metric_once(model, task, samples, cfg.as_ref(), eval.batch_size, &mut rng)
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean, std) = mean_std(&values);
        let mut r = MetricReport::new(system, task, snr.unwrap_or(f64::INFINITY), mean);
        r.std = std;
        r.sample_count = samples.len();
        r.seed = eval.seeds.first().copied().unwrap_or(0);
        r.model_tag = model_tag.to_string();
        r.exit_layer = Some(probe.executed_layers);
        r.rows_selected = Some(probe.record.rows_selected);
        r.rows_total = Some(probe.record.rows_total);
        r.symbols_sent = Some(probe.record.symbols_sent);
        out.push(r);
    }
    Ok(out)
}

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub system: System,
    /// Set for single-task models, which store only that task's parameters.
    pub task: Option<TaskId>,
    pub iteration: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub partition: PartitionMap,
    pub exits: ExitTable,
    pub best_metrics: BTreeMap<String, f64>,
    /// Full experiment configuration the model was trained under.
    pub config: serde_json::Value,
}

type ParamValues = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

pub fn save_checkpoint(path: &Path, model: &UnifiedModel, meta: &CheckpointMeta) -> Result<()> {
    let mut values = model.values()?;
    if let Some(task) = meta.task {
        let exit = model.exit_layer_for(task)?;
        values.retain(|name, _| used_by_task(name, task, exit));
    }
    let body = bincode::serialize(&values).map_err(|e| Error::Format(e.to_string()))?;
    container::write(path, CHECKPOINT_KIND, CHECKPOINT_VERSION, meta, &body)
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(UnifiedModel, CheckpointMeta)> {
    let c: container::Container<CheckpointMeta> = container::read(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
    let values: ParamValues = bincode::deserialize(&c.body).map_err(|e| Error::Format(e.to_string()))?;
    let meta = c.header;
    let model = UnifiedModel::new(
        meta.model.clone(),
        meta.partition.clone(),
        meta.exits.clone(),
        meta.seed,
        DType::F32,
        device.clone(),
    )?;
    match meta.task {
        None => model.load_values(&values)?,
        Some(_) => model.load_subset(&values)?,
    }
    Ok((model, meta))
}

/// Stored counts of one checkpoint file.
pub fn stored_parameters(path: &Path) -> Result<(CheckpointMeta, usize)> {
    let c: container::Container<CheckpointMeta> = container::read(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
    let values: ParamValues = bincode::deserialize(&c.body).map_err(|e| Error::Format(e.to_string()))?;
    Ok((c.header, values.values().map(|(_, v)| v.len()).sum()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub unified: usize,
    /// Shared trunk plus the task's own embeddings, query, layers and head.
    pub per_task: BTreeMap<TaskId, usize>,
    /// Sum of the single-task models with unused parts stripped.
    pub single_task_sum: usize,
}

impl ParamCounts {
    pub fn reduction(&self) -> f64 {
        1.0 - self.unified as f64 / self.single_task_sum as f64
    }
}

pub fn count_parameters(model: &UnifiedModel, tasks: &[TaskId]) -> Result<ParamCounts> {
    let unified = model.store.count_where(|_| true);
    let mut per_task = BTreeMap::new();
    for &t in tasks {
        let exit = model.exit_layer_for(t)?;
        per_task.insert(t, model.store.count_where(|n| used_by_task(n, t, exit)));
    }
    Ok(ParamCounts {
        unified,
        single_task_sum: per_task.values().sum(),
        per_task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::DataConfig;

    fn tiny_corpus() -> (Corpus, ModelConfig) {
        let data = DataConfig {
            image_train: 40,
            image_test: 12,
            vqa_train: 40,
            vqa_test: 12,
            sentiment_train: 40,
            sentiment_test: 12,
            text_train: 40,
            text_test: 12,
            max_len: 8,
            ..DataConfig::default()
        };
        let corpus = Corpus::load(&data, &TaskId::ALL).unwrap();
        let cfg = ModelConfig {
            image_size: 32,
            patch: 8,
            vocab_size: corpus.vocab.len(),
            ..ModelConfig::tiny()
        };
        (corpus, cfg)
    }

    fn trainer(cfg: &ModelConfig, tc: TrainConfig) -> Trainer {
        let model = UnifiedModel::new(
            cfg.clone(),
            PartitionMap::default_for(cfg.image_rows(), cfg.max_len),
            ExitTable::default(),
            tc.seed,
            DType::F32,
            Device::Cpu,
        )
        .unwrap();
        Trainer::new(model, tc, ChannelConfig::awgn(0.0)).unwrap()
    }

    #[test]
    fn pair_sampling_is_distinct_and_weighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sizes = [(TaskId::Sentiment, 100), (TaskId::Vqa, 300)];
        let mut second = 0;
        for _ in 0..20000 {
            let (a, b) = sample_task_pair(&sizes, 1.0, &mut rng).unwrap();
            assert_ne!(a, b);
            if a == TaskId::Vqa {
                second += 1;
            }
        }
        assert!((second as f64 / 20000.0 - 0.75).abs() < 0.02);
        assert!(matches!(
            sample_task_pair(&sizes[..1], 1.0, &mut rng),
            Err(Error::TooFewTasks(1))
        ));
    }

    #[test]
    fn one_iteration_is_one_step_and_deterministic() {
        let (corpus, cfg) = tiny_corpus();
        let tc = TrainConfig {
            iterations: 3,
            batch_size: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut a = trainer(&cfg, tc.clone());
        a.train(&corpus, |_, _, _| Ok(())).unwrap();
        assert_eq!(a.step, 3);
        let mut b = trainer(&cfg, tc);
        b.train(&corpus, |_, _, _| Ok(())).unwrap();
        assert_eq!(a.history, b.history);
        for r in &a.history {
            assert_eq!(r.total, r.task_loss_a + r.task_loss_b + r.adaptation);
        }
    }

    #[test]
    fn disabled_tasks_never_sampled_and_ablation_zeroes_term() {
        let (corpus, cfg) = tiny_corpus();
        let tc = TrainConfig {
            iterations: 4,
            batch_size: 3,
            tasks: vec![TaskId::Sentiment, TaskId::TextRecon],
            adaptation: false,
            ..TrainConfig::default()
        };
        let mut t = trainer(&cfg, tc);
        t.train(&corpus, |_, _, b| {
            assert_eq!(b.adaptation, 0.0);
            Ok(())
        })
        .unwrap();
        for r in &t.history {
            assert!(matches!(r.task_a, TaskId::Sentiment | TaskId::TextRecon));
        }
    }

    #[test]
    fn single_task_run_logs_one_task() {
        let (corpus, cfg) = tiny_corpus();
        let tc = TrainConfig {
            iterations: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut t = trainer(&cfg, tc);
        t.train_single_task(&corpus, TaskId::Retrieval, |_, b| {
            assert_eq!(b.adaptation, 0.0);
            Ok(())
        })
        .unwrap();
        assert!(t.history.iter().all(|r| r.task_a == TaskId::Retrieval && r.task_b.is_none()));
    }

    #[test]
    fn checkpoint_round_trip_reproduces_eval() {
        let (corpus, cfg) = tiny_corpus();
        let t = trainer(&cfg, TrainConfig { iterations: 1, ..TrainConfig::default() });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            system: System::Udeepsc,
            task: None,
            iteration: 0,
            seed: 0,
            model: cfg.clone(),
            partition: t.model.partition.clone(),
            exits: ExitTable::default(),
            best_metrics: BTreeMap::new(),
            config: serde_json::Value::Null,
        };
        save_checkpoint(&path, &t.model, &meta).unwrap();
        let (loaded, m2) = load_checkpoint(&path, &Device::Cpu).unwrap();
        assert_eq!(m2, meta);
        let ds = corpus.dataset(TaskId::Sentiment, Split::Test).unwrap();
        let ev = EvalConfig { seeds: vec![4], ..EvalConfig::default() };
        let ch = ChannelConfig::awgn(0.0);
        let x = evaluate(&t.model, ds, TaskId::Sentiment, &[0.0, 6.0], false, &ch, &ev, System::Udeepsc, "a").unwrap();
        let y = evaluate(&loaded, ds, TaskId::Sentiment, &[0.0, 6.0], false, &ch, &ev, System::Udeepsc, "a").unwrap();
        assert_eq!(x, y);
        assert_eq!(x.len(), 2);
        let up = evaluate(&loaded, ds, TaskId::Sentiment, &[0.0], true, &ch, &ev, System::UpperBound, "a").unwrap();
        assert_eq!(up.len(), 1);
        assert!(up[0].snr_db.is_infinite());
    }

    #[test]
    fn stripped_single_task_checkpoint_is_smaller() {
        let (_, cfg) = tiny_corpus();
        let t = trainer(&cfg, TrainConfig { iterations: 1, ..TrainConfig::default() });
        let dir = tempfile::tempdir().unwrap();
        let mut meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            system: System::Udeepsc,
            task: None,
            iteration: 0,
            seed: 0,
            model: cfg.clone(),
            partition: t.model.partition.clone(),
            exits: ExitTable::default(),
            best_metrics: BTreeMap::new(),
            config: serde_json::Value::Null,
        };
        save_checkpoint(&dir.path().join("u"), &t.model, &meta).unwrap();
        meta.system = System::Tdeepsc;
        meta.task = Some(TaskId::Sentiment);
        save_checkpoint(&dir.path().join("s"), &t.model, &meta).unwrap();
        let (_, u) = stored_parameters(&dir.path().join("u")).unwrap();
        let (_, s) = stored_parameters(&dir.path().join("s")).unwrap();
        assert!(s < u);
        load_checkpoint(&dir.path().join("s"), &Device::Cpu).unwrap();
        let counts = count_parameters(&t.model, &TaskId::ALL).unwrap();
        assert_eq!(counts.per_task[&TaskId::Sentiment], s);
        assert!(counts.per_task.values().all(|&c| c <= counts.unified));
        assert!(counts.unified < counts.single_task_sum);
    }

    #[test]
    fn learning_rate_schedule() {
        let (_, cfg) = tiny_corpus();
        let tc = TrainConfig {
            iterations: 10,
            learning_rate: 1.0,
            warmup_steps: 2,
            cosine_decay: true,
            ..TrainConfig::default()
        };
        let mut t = trainer(&cfg, tc);
        let mut lrs = Vec::new();
        for step in 0..10 {
            t.step = step;
            lrs.push(t.current_lr());
        }
        assert_eq!(&lrs[..3], &[0.5, 1.0, 1.0]);
        assert!((lrs[6] - 0.5).abs() < 1e-12);
        assert!(lrs[2..].windows(2).all(|w| w[1] < w[0]));
        t.cfg.cosine_decay = false;
        t.step = 9;
        assert_eq!(t.current_lr(), 1.0);
    }

    #[test]
    fn image_loss_is_mse_in_model_pixel_units() {
        let x = Tensor::from_vec(vec![0.25f64, 0.5, 0.75, 1.0], (1, 2, 2), &Device::Cpu).unwrap();
        let y = Tensor::from_vec(vec![0.5f64, 0.5, 0.5, 0.5], (1, 2, 2), &Device::Cpu).unwrap();
        let l = task_loss(&TaskOutput::Patches(x), &Target::Patches(y), 0.2).unwrap();
        let want = PIXEL_SCALE * PIXEL_SCALE * (0.0625 + 0.0 + 0.0625 + 0.25) / 4.0;
        assert!((l.to_scalar::<f64>().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let a = Var::new(&[3.0f64, 0.0], &Device::Cpu).unwrap();
        let b = Var::new(&[0.0f64, 4.0], &Device::Cpu).unwrap();
        let loss = (a.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let loss = (loss + (b.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap()).unwrap();
        let mut g = loss.backward().unwrap();
        let vars = [a.clone(), b.clone()];
        assert!((clip_gradients(&mut g, &vars, 1.0).unwrap() - 5.0).abs() < 1e-12);
        let ga = g.get(&a).unwrap().to_vec1::<f64>().unwrap();
        let gb = g.get(&b).unwrap().to_vec1::<f64>().unwrap();
        assert!((ga[0] - 0.6).abs() < 1e-12 && (gb[1] - 0.8).abs() < 1e-12);
        let mut g = loss.backward().unwrap();
        clip_gradients(&mut g, &vars, 10.0).unwrap();
        assert_eq!(g.get(&a).unwrap().to_vec1::<f64>().unwrap(), vec![3.0, 0.0]);
    }
}
