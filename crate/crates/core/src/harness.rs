//! Experiment orchestration: config loading, training runs, SNR sweeps,
//! the adaptation ablation, parameter tables and plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle::{DType, Device};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::PartitionMap;
use crate::baselines::{conventional_image_pipeline, conventional_text_pipeline, CodecConfig};
use crate::channel::ChannelConfig;
use crate::datasets::{Corpus, DataConfig, Split};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, UnifiedModel};
use crate::objectives::MetricReport;
use crate::task::{ExitTable, MetricKind, System, TaskId};
use crate::training::{
    count_parameters, evaluate, load_checkpoint, save_checkpoint, stored_parameters, write_loss_csv,
    CheckpointMeta, EvalConfig, TrainConfig, Trainer, CHECKPOINT_VERSION,
};

/// Version of the results CSV layout.
pub const SCHEMA_VERSION: u32 = 1;

pub const RESULT_COLUMNS: [&str; 16] = [
    "schema_version",
    "system",
    "task",
    "snr_db",
    "metric",
    "value",
    "std",
    "n",
    "seed",
    "model_tag",
    "exit_layer",
    "rows_selected",
    "rows_total",
    "symbols_sent",
    "decode_failures",
    "codec_deviation",
];

/// Reference numbers from the original large-scale experiments, kept as
/// annotations only: (without L_a, with L_a).
pub const PAPER_ABLATION: [(TaskId, f64, f64); 5] = [
    (TaskId::Retrieval, 70.0, 73.9),
    (TaskId::Vqa, 57.8, 60.9),
    (TaskId::TextRecon, 0.94, 0.96),
    (TaskId::ImageRecon, 31.9, 32.0),
    (TaskId::Sentiment, 80.1, 84.2),
];

/// Paper-scale parameter counts in millions: per task, then unified.
pub const PAPER_PARAMS_M: [(TaskId, f64); 5] = [
    (TaskId::Retrieval, 46.9),
    (TaskId::Vqa, 92.3),
    (TaskId::Sentiment, 52.9),
    (TaskId::TextRecon, 42.5),
    (TaskId::ImageRecon, 55.6),
];
pub const PAPER_UNIFIED_M: f64 = 95.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub snr_min: f64,
    pub snr_max: f64,
    pub snr_step: f64,
    /// Test SNR used by the ablation table.
    pub ablation_snr_db: f64,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub max_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            snr_min: -6.0,
            snr_max: 18.0,
            snr_step: 3.0,
            ablation_snr_db: 12.0,
            seeds: vec![0, 1, 2],
            batch_size: 128,
            max_samples: 0,
        }
    }
}

impl SweepConfig {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seeds: self.seeds.clone(),
            batch_size: self.batch_size,
            max_samples: self.max_samples,
        }
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        snr_grid(self.snr_min, self.snr_max, self.snr_step)
    }
}

/// Inclusive SNR grid from `min` to `max`.
pub fn snr_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !min.is_finite() || !max.is_finite() || max < min {
        return Err(Error::Config(format!("bad snr range {min}..{max} step {step}")));
    }
    let n = ((max - min) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| min + i as f64 * step).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub channel: ChannelConfig,
    pub data: DataConfig,
    pub eval: SweepConfig,
    pub codec: CodecConfig,
    pub exits: ExitTable,
    /// Row partition; derived from the model shape when absent.
    pub partition: Option<PartitionMap>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            channel: ChannelConfig::awgn(0.0),
            data: DataConfig::default(),
            eval: SweepConfig::default(),
            codec: CodecConfig::default(),
            exits: ExitTable::default(),
            partition: None,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn toml_error(text: &str, origin: &str, e: toml::de::Error) -> Error {
    match e.span() {
        Some(span) => Error::Config(format!("{origin} line {}: {}", line_of(text, span.start), e.message())),
        None => Error::Config(format!("{origin}: {}", e.message())),
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| toml_error(text, origin, e))?;
        // Typed parse of the file alone so errors point at a line.
        let _: ExperimentConfig = toml::from_str(text).map_err(|e| toml_error(text, origin, e))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, &path.display().to_string(), overrides)
    }

    /// Built-in configuration with overrides applied.
    pub fn with_overrides(base: &ExperimentConfig, overrides: &[String]) -> Result<Self> {
        let text = toml::to_string(base).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text, "defaults", overrides)
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.train.tasks
    }

    pub fn partition_map(&self) -> PartitionMap {
        self.partition
            .clone()
            .unwrap_or_else(|| PartitionMap::default_for(self.model.image_rows(), self.model.max_len))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.channel.validate()?;
        self.codec.validate()?;
        self.exits.validate(self.model.decoder_layers)?;
        self.eval.grid()?;
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds is empty".into()));
        }
        if self.data.max_len != self.model.max_len {
            return Err(Error::Config(format!(
                "data.max_len {} differs from model.max_len {}",
                self.data.max_len, self.model.max_len
            )));
        }
        let mut seen = Vec::new();
        for &t in self.tasks() {
            if seen.contains(&t) {
                return Err(Error::Config(format!("task {t} enabled twice")));
            }
            seen.push(t);
            self.exits.exit_layer_for(t)?;
            for split in [Split::Train, Split::Test] {
                if self.data.size(t, split) == 0 {
                    return Err(Error::Config(format!("no {} data for {t}", split.as_str())));
                }
            }
        }
        let cfg = &self.model;
        self.partition_map().validate(self.tasks(), |m| cfg.rows(m))?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON form; object keys are sorted so the
    /// hash does not depend on the order keys appear in the file.
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let canonical = serde_json::to_string(&value)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub config: ExperimentConfig,
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    fn start(command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        let hash = cfg.hash()?;
        let now = chrono::Utc::now();
        Ok(RunManifest {
            run_id: format!("{}-{}", now.format("%Y%m%dT%H%M%S"), &hash[..8]),
            command: command.to_string(),
            config_hash: hash,
            seed: cfg.train.seed,
            version: version_string(),
            started: now.to_rfc3339(),
            finished: String::new(),
            config: cfg.clone(),
            artifacts: BTreeMap::new(),
        })
    }

    fn finish(&mut self, path: &Path) -> Result<()> {
        self.finished = chrono::Utc::now().to_rfc3339();
        self.artifacts.insert("manifest".into(), path.to_path_buf());
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Checks that the embedded config still hashes to the recorded value.
    pub fn verify(&self) -> Result<()> {
        let h = self.config.hash()?;
        if h != self.config_hash {
            return Err(Error::Config(format!(
                "manifest config hash {} does not match {h}",
                self.config_hash
            )));
        }
        Ok(())
    }
}

/// `git describe` output when available, else the package version.
pub fn version_string() -> String {
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match git {
        Some(g) => format!("{}+{g}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Refuses to touch an existing output unless `force` is set.
pub fn guard_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// One line of the shared results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub system: System,
    pub task: TaskId,
    /// `inf` for noiseless rows.
    pub snr_db: f64,
    pub metric: MetricKind,
    pub value: f64,
    pub std: f64,
    pub n: usize,
    pub seed: u64,
    pub model_tag: String,
    pub exit_layer: Option<usize>,
    pub rows_selected: Option<usize>,
    pub rows_total: Option<usize>,
    pub symbols_sent: Option<usize>,
    pub decode_failures: Option<usize>,
    pub codec_deviation: Option<String>,
}

impl From<&MetricReport> for ResultRow {
    fn from(r: &MetricReport) -> Self {
        ResultRow {
            schema_version: SCHEMA_VERSION,
            system: r.system,
            task: r.task,
            snr_db: r.snr_db,
            metric: r.metric,
            value: r.value,
            std: r.std,
            n: r.sample_count,
            seed: r.seed,
            model_tag: r.model_tag.clone(),
            exit_layer: r.exit_layer,
            rows_selected: r.rows_selected,
            rows_total: r.rows_total,
            symbols_sent: r.symbols_sent,
            decode_failures: r.decode_failures,
            codec_deviation: r.codec_deviation.clone(),
        }
    }
}

impl ResultRow {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "results schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.metric != self.task.metric() {
            return Err(Error::Malformed(format!("{} reported for {}", self.metric.as_str(), self.task)));
        }
        if !self.value.is_finite() || self.snr_db.is_nan() {
            return Err(Error::Malformed(format!("non-finite value in {} row", self.task)));
        }
        Ok(())
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(RESULT_COLUMNS)?;
    }
    for r in rows {
        r.validate()?;
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a results CSV, checking the header and every row.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    for col in RESULT_COLUMNS {
        if !header.iter().any(|h| h == col) {
            return Err(Error::Malformed(format!("{}: missing column `{col}`", path.display())));
        }
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: ResultRow = rec?;
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

fn build_model(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<(UnifiedModel, ModelConfig)> {
    let model_cfg = ModelConfig {
        vocab_size: corpus.vocab.len(),
        ..cfg.model.clone()
    };
    let model = UnifiedModel::new(
        model_cfg.clone(),
        cfg.partition_map(),
        cfg.exits.clone(),
        cfg.train.seed,
        DType::F32,
        Device::Cpu,
    )?;
    Ok((model, model_cfg))
}

/// Trains a model and keeps it in memory.
pub fn train_model(cfg: &ExperimentConfig, task: Option<TaskId>, corpus: &Corpus) -> Result<Trainer> {
    let (model, _) = build_model(cfg, corpus)?;
    let mut train = cfg.train.clone();
    if let Some(t) = task {
        train.tasks = vec![t];
    }
    let mut trainer = Trainer::new(model, train, cfg.channel.clone())?;
    let every = (cfg.train.iterations / 20).max(1);
    match task {
        None => trainer.train(corpus, |t, pair, b| {
            if t.step % every == 0 {
                log::info!("step {} {}+{} total {:.4}", t.step, pair.0, pair.1, b.total);
            }
            Ok(())
        })?,
        Some(task) => trainer.train_single_task(corpus, task, |t, b| {
            if t.step % every == 0 {
                log::info!("step {} {task} loss {:.4}", t.step, b.total);
            }
            Ok(())
        })?,
    }
    Ok(trainer)
}

fn checkpoint_meta(cfg: &ExperimentConfig, model: &UnifiedModel, task: Option<TaskId>, iteration: usize) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        system: if task.is_some() { System::Tdeepsc } else { System::Udeepsc },
        task,
        iteration,
        seed: cfg.train.seed,
        model: model.cfg.clone(),
        partition: model.partition.clone(),
        exits: cfg.exits.clone(),
        best_metrics: BTreeMap::new(),
        config: serde_json::to_value(cfg)?,
    })
}

/// Trains the unified model, or a single-task model when `task` is set,
/// and writes the checkpoint, loss curve and manifest into `out_dir`.
pub fn cmd_train(cfg: &ExperimentConfig, task: Option<TaskId>, force: bool) -> Result<RunManifest> {
    cfg.validate()?;
    let name = match task {
        Some(t) => format!("tdeepsc_{t}"),
        None => "udeepsc".to_string(),
    };
    let dir = &cfg.out_dir;
    let ckpt = dir.join(format!("{name}.ckpt"));
    let losses = dir.join(format!("{name}_loss.csv"));
    let manifest_path = dir.join(format!("{name}_manifest.json"));
    for p in [&ckpt, &losses, &manifest_path] {
        guard_output(p, force)?;
    }
    let mut manifest = RunManifest::start(if task.is_some() { "train --task" } else { "train" }, cfg)?;
    let tasks: Vec<TaskId> = match task {
        Some(t) => vec![t],
        None => cfg.tasks().to_vec(),
    };
    let corpus = Corpus::load(&cfg.data, &tasks)?;
    let trainer = train_model(cfg, task, &corpus)?;
    let meta = checkpoint_meta(cfg, &trainer.model, task, trainer.step)?;
    save_checkpoint(&ckpt, &trainer.model, &meta)?;
    write_loss_csv(&losses, &trainer.history)?;
    manifest.artifacts.insert("checkpoint".into(), ckpt);
    manifest.artifacts.insert("loss_csv".into(), losses);
    manifest.finish(&manifest_path)?;
    Ok(manifest)
}

/// Options of one sweep invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRequest {
    pub tasks: Vec<TaskId>,
    pub snr_min: f64,
    pub snr_max: f64,
    pub snr_step: f64,
    pub noiseless: bool,
    pub conventional: bool,
}

/// Metric reports of the conventional pipeline on `task`'s test split.
pub fn conventional_reports(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    task: TaskId,
    grid: &[f64],
) -> Result<Vec<MetricReport>> {
    let dataset = corpus.dataset(task, Split::Test)?;
    let mut samples: Vec<_> = dataset.samples().iter().collect();
    if cfg.eval.max_samples > 0 {
        samples.truncate(cfg.eval.max_samples);
    }
    let mut out = Vec::new();
    for &snr in grid {
        let channel = ChannelConfig { snr_db: snr, ..cfg.channel.clone() };
        let mut per_seed = Vec::new();
        for &seed in &cfg.eval.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = match task {
                TaskId::ImageRecon => {
                    let images: Vec<_> = samples
                        .iter()
                        .map(|s| s.image.clone().ok_or_else(|| Error::Malformed("sample without image".into())))
                        .collect::<Result<_>>()?;
                    conventional_image_pipeline(&images, Some(&channel), &cfg.codec, seed, &mut rng)?.1
                }
                TaskId::TextRecon => {
                    let texts: Vec<String> = samples
                        .iter()
                        .map(|s| {
                            s.text
                                .as_ref()
                                .map(|ids| corpus.vocab.detokenize(ids).join(" "))
                                .ok_or_else(|| Error::Malformed("sample without text".into()))
                        })
                        .collect::<Result<_>>()?;
                    conventional_text_pipeline(&texts, Some(&channel), &cfg.codec, seed, &mut rng)?.1
                }
                other => return Err(Error::UnknownTask(other)),
            };
            per_seed.push(report);
        }
        let values: Vec<f64> = per_seed.iter().map(|r| r.value).collect();
        let (mean, std) = crate::objectives::mean_std(&values);
        let mut r = per_seed.swap_remove(0);
        r.value = mean;
        r.std = std;
        r.decode_failures = Some(per_seed.iter().map(|r| r.decode_failures.unwrap_or(0)).sum::<usize>() + r.decode_failures.unwrap_or(0));
        out.push(r);
    }
    Ok(out)
}

/// Evaluates a checkpoint over an SNR grid and writes a results CSV.
pub fn cmd_sweep(checkpoint: &Path, req: &SweepRequest, out: &Path, force: bool) -> Result<Vec<ResultRow>> {
    guard_output(out, force)?;
    let (model, meta) = load_checkpoint(checkpoint, &Device::Cpu)?;
    let cfg: ExperimentConfig = serde_json::from_value(meta.config.clone())?;
    let grid = snr_grid(req.snr_min, req.snr_max, req.snr_step)?;
    let tasks: Vec<TaskId> = if req.tasks.is_empty() {
        match meta.task {
            Some(t) => vec![t],
            None => cfg.tasks().to_vec(),
        }
    } else {
        req.tasks.clone()
    };
    if let Some(t) = meta.task {
        if tasks.iter().any(|&x| x != t) {
            return Err(Error::UnknownTask(*tasks.iter().find(|&&x| x != t).unwrap()));
        }
    }
    let corpus = Corpus::load(&cfg.data, &tasks)?;
    let eval = cfg.eval.eval_config();
    let tag = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut rows = Vec::new();
    for &task in &tasks {
        let dataset = corpus.dataset(task, Split::Test)?;
        for r in evaluate(&model, dataset, task, &grid, false, &cfg.channel, &eval, meta.system, &tag)? {
            rows.push(ResultRow::from(&r));
        }
        if req.noiseless {
            for r in evaluate(&model, dataset, task, &grid, true, &cfg.channel, &eval, System::UpperBound, &tag)? {
                rows.push(ResultRow::from(&r));
            }
        }
        if req.conventional && task.is_reconstruction() {
            for r in conventional_reports(&cfg, &corpus, task, &grid)? {
                rows.push(ResultRow::from(&r));
            }
        }
    }
    write_results(out, &rows)?;
    Ok(rows)
}

/// One line of the paired ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: TaskId,
    pub metric: MetricKind,
    pub snr_db: f64,
    pub without_adaptation: f64,
    pub with_adaptation: f64,
    pub delta: f64,
    pub paper_without: f64,
    pub paper_with: f64,
}

pub fn paper_ablation(task: TaskId) -> (f64, f64) {
    PAPER_ABLATION
        .iter()
        .find(|(t, ..)| *t == task)
        .map(|&(_, a, b)| (a, b))
        .expect("every task has a reference entry")
}

/// Trains twin models that differ only in the adaptation flag and tables
/// their test metrics at `eval.ablation_snr_db`.
pub fn ablation_table(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<(Vec<AblationRow>, Trainer, Trainer)> {
    let with_cfg = ExperimentConfig {
        train: TrainConfig { adaptation: true, ..cfg.train.clone() },
        ..cfg.clone()
    };
    let without_cfg = ExperimentConfig {
        train: TrainConfig { adaptation: false, ..cfg.train.clone() },
        ..cfg.clone()
    };
    let with = train_model(&with_cfg, None, corpus)?;
    let without = train_model(&without_cfg, None, corpus)?;
    let eval = cfg.eval.eval_config();
    let snr = cfg.eval.ablation_snr_db;
    let mut rows = Vec::new();
    for &task in cfg.tasks() {
        let dataset = corpus.dataset(task, Split::Test)?;
        let a = evaluate(&with.model, dataset, task, &[snr], false, &cfg.channel, &eval, System::Udeepsc, "with")?;
        let b = evaluate(&without.model, dataset, task, &[snr], false, &cfg.channel, &eval, System::Udeepsc, "without")?;
        let (pw, pa) = paper_ablation(task);
        rows.push(AblationRow {
            task,
            metric: task.metric(),
            snr_db: snr,
            without_adaptation: b[0].value,
            with_adaptation: a[0].value,
            delta: a[0].value - b[0].value,
            paper_without: pw,
            paper_with: pa,
        });
    }
    Ok((rows, with, without))
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_ablate_adaptation(cfg: &ExperimentConfig, force: bool) -> Result<(RunManifest, Vec<AblationRow>)> {
    cfg.validate()?;
    let out = cfg.out_dir.join("ablation_adaptation.csv");
    let manifest_path = cfg.out_dir.join("ablation_manifest.json");
    guard_output(&out, force)?;
    guard_output(&manifest_path, force)?;
    let mut manifest = RunManifest::start("ablate-adaptation", cfg)?;
    let corpus = Corpus::load(&cfg.data, cfg.tasks())?;
    let (rows, ..) = ablation_table(cfg, &corpus)?;
    write_ablation(&out, &rows)?;
    let better = rows.iter().filter(|r| r.delta >= 0.0).count();
    log::info!("adaptation loss helps or ties on {better} of {} tasks", rows.len());
    manifest.artifacts.insert("ablation_csv".into(), out);
    manifest.finish(&manifest_path)?;
    Ok((manifest, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsRow {
    pub model: String,
    pub parameters: f64,
    pub unit: String,
}

/// Parameter table: per-task single-task counts, their sum, the unified
/// count and the reduction, followed by the reference annotation rows.
/// Single-task counts come from T-DeepSC checkpoints when given, else from
/// stripping the unified model.
pub fn params_table(checkpoints: &[PathBuf]) -> Result<Vec<ParamsRow>> {
    let mut unified: Option<(UnifiedModel, CheckpointMeta)> = None;
    let mut stored: BTreeMap<TaskId, usize> = BTreeMap::new();
    for p in checkpoints {
        let (meta, count) = stored_parameters(p)?;
        match meta.task {
            Some(t) => {
                stored.insert(t, count);
            }
            None if unified.is_none() => unified = Some(load_checkpoint(p, &Device::Cpu)?),
            None => return Err(Error::Config("more than one unified checkpoint".into())),
        }
    }
    let (model, meta) = unified.ok_or_else(|| Error::Config("a unified checkpoint is required".into()))?;
    let cfg: ExperimentConfig = serde_json::from_value(meta.config)?;
    let counts = count_parameters(&model, cfg.tasks())?;
    let mut per_task = counts.per_task.clone();
    per_task.extend(stored);
    let sum: usize = per_task.values().sum();
    let row = |model: String, parameters: f64, unit: &str| ParamsRow {
        model,
        parameters,
        unit: unit.into(),
    };
    let mut rows: Vec<ParamsRow> = per_task
        .iter()
        .map(|(t, &n)| row(format!("tdeepsc_{t}"), n as f64, "count"))
        .collect();
    rows.push(row("tdeepsc_sum".into(), sum as f64, "count"));
    rows.push(row("udeepsc".into(), counts.unified as f64, "count"));
    rows.push(row("reduction".into(), 100.0 * (1.0 - counts.unified as f64 / sum as f64), "percent"));
    for (t, m) in PAPER_PARAMS_M {
        rows.push(row(format!("paper_tdeepsc_{t}"), m, "millions"));
    }
    let paper_sum: f64 = PAPER_PARAMS_M.iter().map(|p| p.1).sum();
    rows.push(row("paper_tdeepsc_sum".into(), paper_sum, "millions"));
    rows.push(row("paper_udeepsc".into(), PAPER_UNIFIED_M, "millions"));
    rows.push(row("paper_reduction".into(), 100.0 * (1.0 - PAPER_UNIFIED_M / paper_sum), "percent"));
    Ok(rows)
}

pub fn cmd_params(checkpoints: &[PathBuf], out: &Path, force: bool) -> Result<Vec<ParamsRow>> {
    guard_output(out, force)?;
    let rows = params_table(checkpoints)?;
    let mut w = csv::Writer::from_path(out)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Renders one metric-vs-SNR chart as SVG. Noiseless rows become dashed
/// horizontal lines.
pub fn render_plot(task: TaskId, rows: &[&ResultRow]) -> Result<String> {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 70.0, 160.0, 40.0, 50.0);
    let finite: Vec<&&ResultRow> = rows.iter().filter(|r| r.snr_db.is_finite()).collect();
    if rows.is_empty() {
        return Err(Error::Malformed(format!("no rows for {task}")));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &finite {
        x0 = x0.min(r.snr_db);
        x1 = x1.max(r.snr_db);
    }
    if finite.is_empty() {
        x0 = 0.0;
        x1 = 1.0;
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        y0 = y0.min(r.value);
        y1 = y1.max(r.value);
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{task}</text>"#, (w - right + left) / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        l = left,
        t = top,
        b = h - bottom,
        r = w - right
    );
    for i in 0..=4 {
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{x:.1}</text>"#, px(x), h - bottom + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{y:.3}</text>"#, left - 6.0, py(y) + 4.0);
    }
    let metric = rows[0].metric.as_str();
    let _ = writeln!(s, r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">SNR (dB)</text>"#, (w - right + left) / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="16" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{metric}</text>"#, h / 2.0, h / 2.0);

    let mut series: BTreeMap<(String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        series.entry((r.system.as_str().to_string(), r.model_tag.clone())).or_default().push(r);
    }
    for (i, ((system, tag), mut pts)) in series.into_iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        pts.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
        let label = if tag.is_empty() { system.clone() } else { format!("{system} ({tag})") };
        let flat: Vec<&ResultRow> = pts.iter().copied().filter(|r| !r.snr_db.is_finite()).collect();
        let curve: Vec<&ResultRow> = pts.iter().copied().filter(|r| r.snr_db.is_finite()).collect();
        if !curve.is_empty() {
            let d: Vec<String> = curve
                .iter()
                .enumerate()
                .map(|(k, r)| format!("{}{:.2} {:.2}", if k == 0 { "M" } else { "L" }, px(r.snr_db), py(r.value)))
                .collect();
            let _ = writeln!(s, r#"<path d="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, d.join(" "));
            for r in &curve {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(r.snr_db), py(r.value));
            }
        }
        for r in flat {
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-dasharray="6 4"/>"#,
                left,
                w - right,
                y = py(r.value)
            );
        }
        let ly = top + 16.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, w - right + 10.0, w - right + 30.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11">{label}</text>"#, w - right + 34.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes one SVG per task found in the CSVs.
pub fn cmd_plot(csvs: &[PathBuf], out_dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let mut rows = Vec::new();
    for p in csvs {
        rows.extend(read_results(p)?);
    }
    let mut by_task: BTreeMap<TaskId, Vec<&ResultRow>> = BTreeMap::new();
    for r in &rows {
        by_task.entry(r.task).or_default().push(r);
    }
    let mut written = Vec::new();
    for (task, rs) in by_task {
        let path = out_dir.join(format!("{task}.svg"));
        guard_output(&path, force)?;
        std::fs::write(&path, render_plot(task, &rs)?)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_nine_points() {
        let g = snr_grid(-6.0, 18.0, 3.0).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], -6.0);
        assert_eq!(g[8], 18.0);
        assert!(snr_grid(0.0, 1.0, 0.0).is_err());
        assert!(snr_grid(2.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn overrides_set_nested_values() {
        let cfg = ExperimentConfig::with_overrides(
            &ExperimentConfig::default(),
            &["train.iterations=7".into(), "channel.snr_db=3.5".into(), "out_dir=runs/x".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.channel.snr_db, 3.5);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/x"));
        assert!(ExperimentConfig::with_overrides(&ExperimentConfig::default(), &["nokey".into()]).is_err());
    }

    #[test]
    fn exit_layer_nine_is_rejected() {
        let e = ExperimentConfig::with_overrides(&ExperimentConfig::default(), &["exits.vqa=9".into()]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn config_errors_name_the_line() {
        let text = "out_dir = \"a\"\n[train]\niterations = \"many\"\n";
        let e = ExperimentConfig::from_toml(text, "cfg.toml", &[]).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        let e = ExperimentConfig::from_toml("[train]\nbogus = 1\n", "cfg.toml", &[]).unwrap_err();
        assert!(e.to_string().contains("line"), "{e}");
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = "out_dir = \"r\"\n[train]\niterations = 5\nbatch_size = 4\n[channel]\nsnr_db = 1.0\n";
        let b = "[channel]\nsnr_db = 1.0\n[train]\nbatch_size = 4\niterations = 5\n\nout_dir = \"r\"\n";
        // `out_dir` after a table header belongs to that table; keep it top-level.
        let b = b.replace("\n\nout_dir = \"r\"\n", "\n").replacen("[channel]", "out_dir = \"r\"\n[channel]", 1);
        let ca = ExperimentConfig::from_toml(a, "a", &[]).unwrap();
        let cb = ExperimentConfig::from_toml(&b, "b", &[]).unwrap();
        assert_eq!(ca.hash().unwrap(), cb.hash().unwrap());
        let cc = ExperimentConfig::with_overrides(&ca, &["train.iterations=6".into()]).unwrap();
        assert_ne!(ca.hash().unwrap(), cc.hash().unwrap());
    }

    #[test]
    fn guard_refuses_existing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        guard_output(&p, false).unwrap();
        std::fs::write(&p, "x").unwrap();
        assert!(matches!(guard_output(&p, false), Err(Error::OutputExists(_))));
        guard_output(&p, true).unwrap();
    }

    fn row(task: TaskId, snr: f64, value: f64) -> ResultRow {
        let mut r = MetricReport::new(System::Udeepsc, task, snr, value);
        r.exit_layer = Some(task.default_exit_layer());
        ResultRow::from(&r)
    }

    #[test]
    fn results_round_trip_and_schema_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let mut rows: Vec<ResultRow> = TaskId::ALL.iter().map(|&t| row(t, 3.0, 0.5)).collect();
        let mut ub = row(TaskId::Vqa, f64::INFINITY, 0.7);
        ub.system = System::UpperBound;
        rows.push(ub);
        write_results(&p, &rows).unwrap();
        assert_eq!(read_results(&p).unwrap(), rows);

        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().next().unwrap().split(',').eq(RESULT_COLUMNS));
        std::fs::write(&p, text.replace("schema_version", "version")).unwrap();
        assert!(read_results(&p).is_err());
        std::fs::write(&p, text.replace(",metric,", ",measure,")).unwrap();
        assert!(read_results(&p).is_err());
        let bumped: String = text
            .lines()
            .enumerate()
            .map(|(i, l)| if i == 1 { l.replacen('1', "9", 1) } else { l.to_string() })
            .collect::<Vec<_>>()
            .join("\n");
        std::fs::write(&p, bumped).unwrap();
        assert!(read_results(&p).is_err());
    }

    #[test]
    fn plots_one_file_per_task_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let mut rows = Vec::new();
        for t in TaskId::ALL {
            for snr in [-6.0, 0.0, 6.0] {
                rows.push(row(t, snr, 0.1 + snr / 100.0));
            }
        }
        write_results(&p, &rows).unwrap();
        let out = dir.path().join("plots");
        let files = cmd_plot(std::slice::from_ref(&p), &out, false).unwrap();
        assert_eq!(files.len(), 5);
        let first = std::fs::read_to_string(&files[0]).unwrap();
        assert!(cmd_plot(std::slice::from_ref(&p), &out, false).is_err());
        cmd_plot(std::slice::from_ref(&p), &out, true).unwrap();
        assert_eq!(std::fs::read_to_string(&files[0]).unwrap(), first);
    }

    #[test]
    fn paper_annotations() {
        assert_eq!(paper_ablation(TaskId::Sentiment), (80.1, 84.2));
        let sum: f64 = PAPER_PARAMS_M.iter().map(|p| p.1).sum();
        assert!((sum - 290.2).abs() < 1e-9);
        assert!((100.0 * (1.0 - PAPER_UNIFIED_M / sum) - 67.1).abs() < 0.05);
    }
}
