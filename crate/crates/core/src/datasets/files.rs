//! On-disk datasets and their preprocessing cache.
//!
//! Expected layout under the data root:
//!
//! ```text
//! cifar-10-batches-bin/data_batch_{1..5}.bin, test_batch.bin
//! sentiment/{train,test}.tsv     label<TAB>sentence, label in {0, 1}
//! text/{train,test}.txt          one sentence per line
//! .semcom-cache/                 written by this module
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image::Image;
use super::{Label, RawDataset, RawSample, Split};
use crate::container;
use crate::error::{Error, Result};
use crate::task::TaskId;

pub const CACHE_DIR: &str = ".semcom-cache";
pub const CACHE_SCHEMA_VERSION: u32 = 1;
const CACHE_KIND: &str = "dataset-cache";
const CIFAR_RECORD: usize = 1 + 32 * 32 * 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub task: TaskId,
    pub split: Split,
    pub size: usize,
    pub source_sha256: String,
    pub cache_file: String,
}

/// Per-dataset sizes and source checksums, stored as TOML next to the cache.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    #[serde(default)]
    pub datasets: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn path(root: &Path) -> PathBuf {
        root.join(CACHE_DIR).join("manifest.toml")
    }

    pub fn load(root: &Path) -> Result<Manifest> {
        let path = Manifest::path(root);
        if !path.exists() {
            return Ok(Manifest {
                schema_version: CACHE_SCHEMA_VERSION,
                datasets: Vec::new(),
            });
        }
        toml::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = Manifest::path(root);
        fs::create_dir_all(path.parent().unwrap())?;
        let text = toml::to_string_pretty(self).map_err(|e| Error::Malformed(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn entry(&self, task: TaskId, split: Split) -> Option<&ManifestEntry> {
        self.datasets.iter().find(|e| e.task == task && e.split == split)
    }

    fn upsert(&mut self, entry: ManifestEntry) {
        self.datasets.retain(|e| !(e.task == entry.task && e.split == entry.split));
        self.datasets.push(entry);
    }
}

pub fn source_files(task: TaskId, split: Split, root: &Path) -> Vec<PathBuf> {
    match task {
        TaskId::Retrieval | TaskId::ImageRecon => {
            let dir = root.join("cifar-10-batches-bin");
            match split {
                Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            }
        }
        TaskId::Sentiment => vec![root.join("sentiment").join(format!("{}.tsv", split.as_str()))],
        TaskId::TextRecon => vec![root.join("text").join(format!("{}.txt", split.as_str()))],
        TaskId::Vqa => Vec::new(),
    }
}

fn checksum(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
        h.update(fs::read(p)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// First `limit` records of the CIFAR-10 binary batches.
pub fn read_cifar(paths: &[PathBuf], limit: usize) -> Result<Vec<(Image, u32)>> {
    let mut out = Vec::with_capacity(limit);
    for p in paths {
        if out.len() >= limit {
            break;
        }
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
        let bytes = fs::read(p)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Malformed(format!("{} is not a CIFAR-10 batch", p.display())));
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            if out.len() >= limit {
                break;
            }
            let label = rec[0] as u32;
            let planes = &rec[1..];
            let mut hwc = Vec::with_capacity(32 * 32 * 3);
            for i in 0..32 * 32 {
                for c in 0..3 {
                    hwc.push(planes[c * 1024 + i]);
                }
            }
            out.push((Image::from_u8(32, 32, 3, &hwc)?, label));
        }
    }
    Ok(out)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn parse_source(task: TaskId, split: Split, root: &Path, limit: usize) -> Result<RawDataset> {
    let files = source_files(task, split, root);
    let samples: Vec<RawSample> = match task {
        TaskId::Retrieval | TaskId::ImageRecon => read_cifar(&files, limit)?
            .into_iter()
            .map(|(img, class)| RawSample {
                image: Some(img),
                text: None,
                label: if task == TaskId::Retrieval {
                    Label::Class(class)
                } else {
                    Label::Reconstruct
                },
            })
            .collect(),
        TaskId::Sentiment => read_lines(&files[0])?
            .into_iter()
            .take(limit)
            .map(|line| {
                let (label, text) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::Malformed(format!("no tab in `{line}`")))?;
                let label: u32 = label
                    .trim()
                    .parse()
                    .ok()
                    .filter(|&l| l <= 1)
                    .ok_or_else(|| Error::Malformed(format!("sentiment label `{label}`")))?;
                Ok(RawSample {
                    image: None,
                    text: Some(text.to_string()),
                    label: Label::Class(label),
                })
            })
            .collect::<Result<_>>()?,
        TaskId::TextRecon => read_lines(&files[0])?
            .into_iter()
            .take(limit)
            .map(|text| RawSample {
                image: None,
                text: Some(text),
                label: Label::Reconstruct,
            })
            .collect(),
        TaskId::Vqa => return Err(Error::Config("vqa has no on-disk source".into())),
    };
    if samples.is_empty() {
        return Err(Error::MissingSplit(format!("{task} {}", split.as_str())));
    }
    Ok(RawDataset { task, split, samples })
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    schema_version: u32,
    task: TaskId,
    split: Split,
    size: usize,
    source_sha256: String,
}

/// Parses the on-disk source, reusing the cache when its recorded source
/// checksum still matches. A mismatch logs a warning and rebuilds.
pub fn load_cached(task: TaskId, split: Split, root: &Path, limit: usize) -> Result<RawDataset> {
    let files = source_files(task, split, root);
    let sha = checksum(&files)?;
    let mut manifest = Manifest::load(root)?;
    let cache_file = format!("{task}-{}.bin", split.as_str());
    let cache_path = root.join(CACHE_DIR).join(&cache_file);
    if let Some(entry) = manifest.entry(task, split) {
        if entry.source_sha256 != sha {
            log::warn!(
                "checksum mismatch for {task} {}: manifest {} vs source {}; rebuilding cache",
                split.as_str(),
                entry.source_sha256,
                sha
            );
        } else if entry.size == limit && cache_path.exists() {
            let c: container::Container<CacheHeader> =
                container::read(&cache_path, CACHE_KIND, CACHE_SCHEMA_VERSION)?;
            if c.header.source_sha256 == sha {
                let samples: Vec<RawSample> =
                    bincode::deserialize(&c.body).map_err(|e| Error::Format(e.to_string()))?;
                return Ok(RawDataset { task, split, samples });
            }
        }
    }
    let raw = parse_source(task, split, root, limit)?;
    let header = CacheHeader {
        schema_version: CACHE_SCHEMA_VERSION,
        task,
        split,
        size: raw.samples.len(),
        source_sha256: sha.clone(),
    };
    let body = bincode::serialize(&raw.samples).map_err(|e| Error::Format(e.to_string()))?;
    container::write(&cache_path, CACHE_KIND, CACHE_SCHEMA_VERSION, &header, &body)?;
    manifest.schema_version = CACHE_SCHEMA_VERSION;
    manifest.upsert(ManifestEntry {
        task,
        split,
        size: limit,
        source_sha256: sha,
        cache_file,
    });
    manifest.save(root)?;
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_text_root(dir: &Path) {
        fs::create_dir_all(dir.join("sentiment")).unwrap();
        fs::write(dir.join("sentiment/train.tsv"), "1\tgreat film\n0\tdull plot\n").unwrap();
        fs::create_dir_all(dir.join("text")).unwrap();
        fs::write(dir.join("text/train.txt"), "the council adopts the budget\n\nthe union\n").unwrap();
    }

    #[test]
    fn text_sources_parse_and_cache() {
        let dir = tempfile::tempdir().unwrap();
        write_text_root(dir.path());
        let d = load_cached(TaskId::Sentiment, Split::Train, dir.path(), 10).unwrap();
        assert_eq!(d.samples.len(), 2);
        assert_eq!(d.samples[0].label, Label::Class(1));
        let t = load_cached(TaskId::TextRecon, Split::Train, dir.path(), 10).unwrap();
        assert_eq!(t.samples.len(), 2);
        let m = Manifest::load(dir.path()).unwrap();
        assert_eq!(m.datasets.len(), 2);
        assert_eq!(m.entry(TaskId::Sentiment, Split::Train).unwrap().source_sha256.len(), 64);
        // second load served from cache
        let again = load_cached(TaskId::Sentiment, Split::Train, dir.path(), 10).unwrap();
        assert_eq!(again, d);
    }

    #[test]
    fn changed_source_rebuilds_cache() {
        let dir = tempfile::tempdir().unwrap();
        write_text_root(dir.path());
        load_cached(TaskId::Sentiment, Split::Train, dir.path(), 10).unwrap();
        fs::write(dir.path().join("sentiment/train.tsv"), "0\tpoor\n").unwrap();
        let d = load_cached(TaskId::Sentiment, Split::Train, dir.path(), 10).unwrap();
        assert_eq!(d.samples.len(), 1);
    }

    #[test]
    fn bad_sentiment_label_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sentiment")).unwrap();
        fs::write(dir.path().join("sentiment/test.tsv"), "2\toops\n").unwrap();
        assert!(matches!(
            load_cached(TaskId::Sentiment, Split::Test, dir.path(), 5),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn cifar_records_decode_to_hwc() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat(255u8).take(1024)); // red plane
        rec.extend(std::iter::repeat(0u8).take(2048));
        let p = dir.path().join("test_batch.bin");
        fs::write(&p, &rec).unwrap();
        let out = read_cifar(&[p], 10).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].1, 7);
        assert_eq!(out[0].0.pixel(5, 5), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_cifar_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        match load_cached(TaskId::ImageRecon, Split::Test, dir.path(), 5) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("test_batch.bin")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
