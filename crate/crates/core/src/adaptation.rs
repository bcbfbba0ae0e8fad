//! Private/shared feature partitions, transmission selection and the
//! domain adaptation loss.

use std::collections::{BTreeMap, BTreeSet};

use candle::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoders::FeatureMatrix;
use crate::error::{Error, Result};
use crate::task::{Modality, TaskId};

/// Feature rows owned by one task within one modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionEntry {
    pub private: Vec<usize>,
    #[serde(default)]
    pub shared: Vec<usize>,
}

impl PartitionEntry {
    /// Private and shared rows merged in ascending order.
    pub fn selected(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.private.iter().chain(&self.shared).copied().collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionMap(pub BTreeMap<TaskId, BTreeMap<Modality, PartitionEntry>>);

impl PartitionMap {
    /// Two shared rows per modality, two private rows per non-reconstruction
    /// task, every row for reconstruction tasks.
    pub fn default_for(image_rows: usize, text_rows: usize) -> Self {
        let all = |n: usize| PartitionEntry {
            private: (0..n).collect(),
            shared: Vec::new(),
        };
        let part = |p: [usize; 2]| PartitionEntry {
            private: p.to_vec(),
            shared: vec![0, 1],
        };
        let mut m: BTreeMap<TaskId, BTreeMap<Modality, PartitionEntry>> = BTreeMap::new();
        m.entry(TaskId::ImageRecon).or_default().insert(Modality::Image, all(image_rows));
        m.entry(TaskId::TextRecon).or_default().insert(Modality::Text, all(text_rows));
        m.entry(TaskId::Vqa).or_default().insert(Modality::Image, part([2, 3]));
        m.entry(TaskId::Vqa).or_default().insert(Modality::Text, part([4, 5]));
        m.entry(TaskId::Retrieval).or_default().insert(Modality::Image, part([4, 5]));
        m.entry(TaskId::Sentiment).or_default().insert(Modality::Text, part([2, 3]));
        PartitionMap(m)
    }

    pub fn entry(&self, task: TaskId, modality: Modality) -> Result<&PartitionEntry> {
        self.0
            .get(&task)
            .and_then(|m| m.get(&modality))
            .ok_or(Error::UnknownTask(task))
    }

    /// Checks coverage of `tasks`, disjointness and row bounds.
    pub fn validate(&self, tasks: &[TaskId], rows: impl Fn(Modality) -> usize) -> Result<()> {
        for &task in tasks {
            for &m in task.modalities() {
                let e = self
                    .entry(task, m)
                    .map_err(|_| Error::Config(format!("no partition for {task} {m}")))?;
                let n = rows(m);
                let private: BTreeSet<_> = e.private.iter().collect();
                if private.len() != e.private.len() || e.shared.iter().collect::<BTreeSet<_>>().len() != e.shared.len() {
                    return Err(Error::Config(format!("repeated row in {task} {m} partition")));
                }
                if e.shared.iter().any(|r| private.contains(r)) {
                    return Err(Error::Config(format!("{task} {m}: private and shared rows overlap")));
                }
                if let Some(&bad) = e.private.iter().chain(&e.shared).find(|&&r| r >= n) {
                    return Err(Error::IndexOutOfRange { index: bad, rows: n });
                }
                if e.private.is_empty() && e.shared.is_empty() {
                    return Err(Error::Config(format!("{task} {m}: empty partition")));
                }
            }
        }
        Ok(())
    }
}

/// Private and shared rows of one task, `(batch, rows, dim)` each.
#[derive(Debug, Clone)]
pub struct FeaturePartition {
    pub private: FeatureMatrix,
    pub shared: FeatureMatrix,
}

pub fn gather_rows(u: &FeatureMatrix, rows: &[usize]) -> Result<FeatureMatrix> {
    if let Some(&bad) = rows.iter().find(|&&r| r >= u.rows()) {
        return Err(Error::IndexOutOfRange { index: bad, rows: u.rows() });
    }
    if rows.is_empty() {
        let t = Tensor::zeros((u.batch(), 0, u.dim()), u.values.dtype(), u.values.device())?;
        return FeatureMatrix::new(t);
    }
    let idx: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    let idx = Tensor::new(idx.as_slice(), u.values.device())?;
    FeatureMatrix::new(u.values.contiguous()?.index_select(&idx, 1)?)
}

/// Places `part` at `rows` of a zero matrix with `total` rows.
pub fn scatter_rows(part: &FeatureMatrix, rows: &[usize], total: usize) -> Result<FeatureMatrix> {
    if rows.len() != part.rows() {
        return Err(Error::ShapeMismatch(format!("{} indices for {} rows", rows.len(), part.rows())));
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
        return Err(Error::IndexOutOfRange { index: bad, rows: total });
    }
    let base = Tensor::zeros((part.batch(), total, part.dim()), part.values.dtype(), part.values.device())?;
    if rows.is_empty() {
        return FeatureMatrix::new(base);
    }
    let idx: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    let idx = Tensor::new(idx.as_slice(), part.values.device())?;
    FeatureMatrix::new(base.index_add(&idx, &part.values.contiguous()?, 1)?)
}

pub fn partition_features(
    u: &FeatureMatrix,
    task: TaskId,
    modality: Modality,
    map: &PartitionMap,
) -> Result<FeaturePartition> {
    let e = map.entry(task, modality)?;
    Ok(FeaturePartition {
        private: gather_rows(u, &e.private)?,
        shared: gather_rows(u, &e.shared)?,
    })
}

fn cat_rows(parts: Vec<FeatureMatrix>) -> Result<FeatureMatrix> {
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().unwrap());
    }
    let non_empty: Vec<&Tensor> = parts.iter().filter(|p| p.rows() > 0).map(|p| &p.values).collect();
    if non_empty.is_empty() {
        return Ok(parts.into_iter().next().unwrap());
    }
    FeatureMatrix::new(Tensor::cat(&non_empty, 1)?)
}

/// Partition of a task over all of its modalities, rows concatenated image
/// first.
pub fn task_partition(
    features: &BTreeMap<Modality, FeatureMatrix>,
    task: TaskId,
    map: &PartitionMap,
) -> Result<FeaturePartition> {
    let mut private = Vec::new();
    let mut shared = Vec::new();
    for &m in task.modalities() {
        let u = features
            .get(&m)
            .ok_or_else(|| Error::ShapeMismatch(format!("{task} needs {m} features")))?;
        let p = partition_features(u, task, m, map)?;
        private.push(p.private);
        shared.push(p.shared);
    }
    Ok(FeaturePartition {
        private: cat_rows(private)?,
        shared: cat_rows(shared)?,
    })
}

// Keeps the norm differentiable at zero without visibly moving its value.
const NORM_EPS: f64 = 1e-24;

/// Batch mean of the per-sample Frobenius norm of `E1 E2^T`, where both are
/// `rows x dim`. Row counts may differ; widths must agree.
pub fn similarity(e1: &FeatureMatrix, e2: &FeatureMatrix) -> Result<Tensor> {
    if e1.dim() != e2.dim() {
        return Err(Error::WidthMismatch { left: e1.dim(), right: e2.dim() });
    }
    if e1.batch() != e2.batch() {
        return Err(Error::ShapeMismatch(format!("batch {} vs {}", e1.batch(), e2.batch())));
    }
    let dev = e1.values.device();
    if e1.rows() == 0 || e2.rows() == 0 {
        return Ok(Tensor::zeros((), e1.values.dtype(), dev)?);
    }
    // ||E1 E2^T||^2 = <E1^T E1, E2^T E2>, which is exactly symmetric in
    // floating point
    let g1 = e1.values.t()?.matmul(&e1.values)?;
    let g2 = e2.values.t()?.matmul(&e2.values)?;
    let sq = (g1 * g2)?.sum(D::Minus1)?.sum(D::Minus1)?.relu()?;
    let norm = ((sq + NORM_EPS)?.sqrt()? - NORM_EPS.sqrt())?;
    Ok(norm.mean_all()?)
}

/// Private similarity minus shared similarity between two tasks.
/// `normalize` divides each term by `sqrt(r1 r2) * dim`.
pub fn adaptation_loss_with(a: &FeaturePartition, b: &FeaturePartition, normalize: bool) -> Result<Tensor> {
    let widths = [a.private.dim(), a.shared.dim(), b.private.dim(), b.shared.dim()];
    if let Some(&w) = widths.iter().find(|&&w| w != widths[0]) {
        return Err(Error::WidthMismatch { left: widths[0], right: w });
    }
    let term = |x: &FeatureMatrix, y: &FeatureMatrix| -> Result<Tensor> {
        let s = similarity(x, y)?;
        if normalize && x.rows() > 0 && y.rows() > 0 {
            let scale = ((x.rows() * y.rows()) as f64).sqrt() * x.dim() as f64;
            Ok((s / scale)?)
        } else {
            Ok(s)
        }
    };
    Ok((term(&a.private, &b.private)? - term(&a.shared, &b.shared)?)?)
}

pub fn adaptation_loss(a: &FeaturePartition, b: &FeaturePartition) -> Result<Tensor> {
    adaptation_loss_with(a, b, false)
}

/// What one task put on the air.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmitRecord {
    pub task: TaskId,
    pub rows_selected: usize,
    pub rows_total: usize,
    pub symbols_sent: usize,
}

impl TransmitRecord {
    pub fn ratio(&self) -> f64 {
        self.rows_selected as f64 / self.rows_total as f64
    }
}

/// Rows of one modality chosen for transmission.
#[derive(Debug, Clone)]
pub struct Selected {
    pub features: FeatureMatrix,
    pub rows: Vec<usize>,
    pub total: usize,
}

/// Keeps only the task's private and shared rows of each present modality.
pub fn select_transmit(
    features: &BTreeMap<Modality, FeatureMatrix>,
    task: TaskId,
    map: &PartitionMap,
    symbols_per_row: usize,
) -> Result<(BTreeMap<Modality, Selected>, TransmitRecord)> {
    let mut out = BTreeMap::new();
    let mut selected = 0;
    let mut total = 0;
    for &m in task.modalities() {
        let u = features
            .get(&m)
            .ok_or_else(|| Error::ShapeMismatch(format!("{task} needs {m} features")))?;
        let rows = map.entry(task, m)?.selected();
        selected += rows.len();
        total += u.rows();
        out.insert(
            m,
            Selected {
                features: gather_rows(u, &rows)?,
                rows,
                total: u.rows(),
            },
        );
    }
    let record = TransmitRecord {
        task,
        rows_selected: selected,
        rows_total: total,
        symbols_sent: selected * symbols_per_row,
    };
    Ok((out, record))
}

/// Loss terms of one joint training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub task_loss_a: f64,
    pub task_loss_b: f64,
    pub adaptation: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(task_loss_a: f64, task_loss_b: f64, adaptation: f64) -> Self {
        LossBundle {
            task_loss_a,
            task_loss_b,
            adaptation,
            total: task_loss_a + task_loss_b + adaptation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle::{DType, Device};
    use proptest::prelude::*;

    fn fm(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows, DType::F64, &Device::Cpu).unwrap()
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    fn rows_of(u: &FeatureMatrix) -> Vec<Vec<f64>> {
        u.values.get(0).unwrap().to_vec2::<f64>().unwrap()
    }

    #[test]
    fn gather_and_scatter() {
        let u = fm(&(0..8).map(|i| vec![i as f64, -(i as f64)]).collect::<Vec<_>>());
        let mut map = PartitionMap::default_for(8, 8);
        map.0.get_mut(&TaskId::Retrieval).unwrap().insert(
            Modality::Image,
            PartitionEntry { private: vec![0, 1], shared: vec![2, 3] },
        );
        let p = partition_features(&u, TaskId::Retrieval, Modality::Image, &map).unwrap();
        assert_eq!(p.private.rows(), 2);
        assert_eq!(p.shared.rows(), 2);
        assert_eq!(rows_of(&p.shared)[1], vec![3.0, -3.0]);
        let back = scatter_rows(&p.shared, &[2, 3], 8).unwrap();
        let full = rows_of(&u);
        let b = rows_of(&back);
        assert_eq!(b[2], full[2]);
        assert_eq!(b[3], full[3]);
        assert_eq!(b[0], vec![0.0, 0.0]);
        let r = partition_features(&u, TaskId::ImageRecon, Modality::Image, &map).unwrap();
        assert_eq!(r.shared.rows(), 0);
    }

    #[test]
    fn out_of_range_rows_rejected() {
        let u = fm(&[vec![1.0], vec![2.0]]);
        assert!(matches!(gather_rows(&u, &[2]), Err(Error::IndexOutOfRange { index: 2, rows: 2 })));
    }

    #[test]
    fn similarity_examples() {
        let i2 = fm(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((scalar(similarity(&i2, &i2).unwrap()) - 2f64.sqrt()).abs() < 1e-9);
        let a = fm(&[vec![1.0, 0.0, 0.0]]);
        let b = fm(&[vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]);
        assert_eq!(scalar(similarity(&a, &b).unwrap()), 0.0);
        // hand product: [[1,2],[3,4]] times [[0,1],[1,0]]^T = [[2,1],[4,3]]
        let e1 = fm(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let e2 = fm(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let want = (4.0f64 + 1.0 + 16.0 + 9.0).sqrt();
        assert!((scalar(similarity(&e1, &e2).unwrap()) - want).abs() < 1e-9);
        let narrow = fm(&[vec![1.0]]);
        assert!(matches!(similarity(&e1, &narrow), Err(Error::WidthMismatch { .. })));
    }

    #[test]
    fn loss_zero_and_shared_only_cases() {
        let z = fm(&vec![vec![0.0; 3]; 2]);
        let p = FeaturePartition { private: z.clone(), shared: z.clone() };
        assert_eq!(scalar(adaptation_loss(&p, &p).unwrap()), 0.0);

        let s = fm(&[vec![1.0, 2.0, 0.0], vec![0.0, 1.0, 1.0]]);
        let pa = FeaturePartition { private: fm(&[vec![1.0, 0.0, 0.0]]), shared: s.clone() };
        let pb = FeaturePartition { private: fm(&[vec![0.0, 0.0, 5.0]]), shared: s.clone() };
        let got = scalar(adaptation_loss(&pa, &pb).unwrap());
        let want = -scalar(similarity(&s, &s).unwrap());
        assert!((got - want).abs() < 1e-12);

        let empty = gather_rows(&s, &[]).unwrap();
        let pc = FeaturePartition { private: s.clone(), shared: empty };
        let got = scalar(adaptation_loss(&pa, &pc).unwrap());
        assert!((got - scalar(similarity(&pa.private, &s).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn select_counts_rows() {
        let mut map = PartitionMap::default_for(16, 16);
        map.0.get_mut(&TaskId::Sentiment).unwrap().insert(
            Modality::Text,
            PartitionEntry { private: vec![0, 1], shared: vec![2] },
        );
        let u = FeatureMatrix::new(Tensor::zeros((2, 16, 4), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let feats = BTreeMap::from([(Modality::Text, u.clone())]);
        let (sel, rec) = select_transmit(&feats, TaskId::Sentiment, &map, 8).unwrap();
        assert_eq!(rec.rows_selected, 3);
        assert_eq!(rec.ratio(), 3.0 / 16.0);
        assert_eq!(rec.symbols_sent, 24);
        assert_eq!(sel[&Modality::Text].features.rows(), 3);
        let (_, rec) = select_transmit(&feats, TaskId::TextRecon, &map, 8).unwrap();
        assert_eq!(rec.rows_selected, 16);
    }

    #[test]
    fn default_map_validates() {
        let map = PartitionMap::default_for(16, 16);
        map.validate(&TaskId::ALL, |_| 16).unwrap();
        assert!(map.validate(&TaskId::ALL, |_| 4).is_err());
        let mut bad = map.clone();
        bad.0.get_mut(&TaskId::Vqa).unwrap().get_mut(&Modality::Text).unwrap().shared.push(4);
        assert!(bad.validate(&TaskId::ALL, |_| 16).is_err());
    }

    #[test]
    fn bundle_total_is_sum() {
        let b = LossBundle::new(0.5, 1.25, -0.125);
        assert_eq!(b.total, 0.5 + 1.25 + -0.125);
    }

    fn mat(r: usize, c: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, c), r)
    }

    proptest! {
        #[test]
        fn loss_is_symmetric(a in mat(2, 3), b in mat(3, 3), c in mat(1, 3), d in mat(2, 3)) {
            let pa = FeaturePartition { private: fm(&a), shared: fm(&b) };
            let pb = FeaturePartition { private: fm(&c), shared: fm(&d) };
            let x = scalar(adaptation_loss(&pa, &pb).unwrap());
            let y = scalar(adaptation_loss(&pb, &pa).unwrap());
            prop_assert_eq!(x, y);
        }

        #[test]
        fn similarity_scales_quadratically(a in mat(2, 3), b in mat(3, 3), c in 0.1f64..4.0) {
            let s = scalar(similarity(&fm(&a), &fm(&b)).unwrap());
            let scale = |m: &Vec<Vec<f64>>| m.iter().map(|r| r.iter().map(|v| v * c).collect()).collect::<Vec<Vec<f64>>>();
            let sc = scalar(similarity(&fm(&scale(&a)), &fm(&scale(&b))).unwrap());
            prop_assert!((sc - c * c * s).abs() <= 1e-9 * (1.0 + sc.abs()));
        }
    }
}
