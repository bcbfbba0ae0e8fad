//! Training losses and evaluation metrics.
//!
//! Losses that drive training take candle tensors so they participate in
//! backprop. Metrics are plain functions over host slices.

use std::collections::HashMap;
use std::hash::Hash;

use candle::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{MetricKind, System, TaskId};

/// PSNR reported when the reconstruction is numerically exact.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Triplet margin used when a config does not set one.
pub const DEFAULT_MARGIN: f64 = 0.2;
const MAX_NGRAM: usize = 4;

/// Mean negative log-likelihood of `labels` under `logits` of shape
/// `(n, classes)`. Higher-rank logits are flattened over leading dims.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let classes = logits.dim(D::Minus1)?;
    let logits = logits.reshape(((), classes))?;
    let n = logits.dim(0)?;
    if n != labels.len() {
        return Err(Error::LengthMismatch {
            left: n,
            right: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidLabel {
            label: bad as usize,
            classes,
        });
    }
    let log_probs = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let idx = Tensor::from_slice(labels, (n, 1), logits.device())?;
    let picked = log_probs.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// One anchor/positive/negative triple of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub margin: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(d(a, p) - d(a, n) + m, 0)` with `d` the squared Euclidean distance.
pub fn triplet_loss(batch: &TripletBatch) -> Result<f64> {
    let dim = batch.anchor.len();
    for other in [&batch.positive, &batch.negative] {
        if other.len() != dim {
            return Err(Error::LengthMismatch {
                left: dim,
                right: other.len(),
            });
        }
    }
    let d_ap = squared_distance(&batch.anchor, &batch.positive);
    let d_an = squared_distance(&batch.anchor, &batch.negative);
    Ok((d_ap - d_an + batch.margin).max(0.0))
}

/// Batched triplet hinge over `(batch, dim)` embeddings, averaged.
pub fn triplet_loss_tensor(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    margin: f64,
) -> Result<Tensor> {
    let d_ap = (anchor - positive)?.sqr()?.sum(D::Minus1)?;
    let d_an = (anchor - negative)?.sqr()?.sum(D::Minus1)?;
    let hinge = ((d_ap - d_an)? + margin)?.relu()?;
    Ok(hinge.mean_all()?)
}

pub fn mse(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "mse over {} vs {} elements",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / x.len() as f64)
}

pub fn mse_tensor(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mse over {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    Ok((x - y)?.sqr()?.mean_all()?)
}

/// `10 log10(max^2 / mse)`, or [`PSNR_CAP_DB`] when `mse < 1e-12`.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse < 1e-12 {
        PSNR_CAP_DB
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr(x: &[f32], y: &[f32], max_val: f64) -> Result<f64> {
    if max_val <= 0.0 {
        return Err(Error::Config(format!("psnr max value {max_val} <= 0")));
    }
    Ok(psnr_from_mse(mse(x, y)?, max_val))
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU with uniform 1..4-gram weights, brevity penalty and add-one
/// smoothing of the 2..4-gram precisions.
///
/// A zero unigram precision (or an empty hypothesis) scores 0.
pub fn bleu<T: Eq + Hash>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_NGRAM {
        let hyp = ngram_counts(hypothesis, n);
        let refc = ngram_counts(reference, n);
        let total: usize = hyp.values().sum();
        let matched: usize = hyp
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let precision = if n == 1 {
            if matched == 0 {
                return Ok(0.0);
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += precision.ln() / MAX_NGRAM as f64;
    }
    let (c, r) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok((bp * log_sum.exp()).min(1.0))
}

/// Fraction of queries whose nearest gallery neighbour (Euclidean) shares
/// the query's class. Query `i` is the gallery item `i` and is excluded from
/// its own candidate set. Ties resolve to the lowest gallery index.
pub fn recall_at_1(queries: &[Vec<f32>], gallery: &[Vec<f32>], labels: &[usize]) -> Result<f64> {
    if gallery.len() < 2 {
        return Err(Error::DegenerateGallery(format!(
            "{} gallery items",
            gallery.len()
        )));
    }
    if labels.len() != gallery.len() {
        return Err(Error::LengthMismatch {
            left: gallery.len(),
            right: labels.len(),
        });
    }
    if queries.len() > gallery.len() || queries.is_empty() {
        return Err(Error::DegenerateGallery(format!(
            "{} queries for {} gallery items",
            queries.len(),
            gallery.len()
        )));
    }
    let mut hits = 0usize;
    for (qi, q) in queries.iter().enumerate() {
        let mut best = (f64::INFINITY, usize::MAX);
        for (gi, g) in gallery.iter().enumerate() {
            if gi == qi {
                continue;
            }
            if g.len() != q.len() {
                return Err(Error::LengthMismatch {
                    left: q.len(),
                    right: g.len(),
                });
            }
            let d: f64 = q
                .iter()
                .zip(g)
                .map(|(&a, &b)| {
                    let t = a as f64 - b as f64;
                    t * t
                })
                .sum();
            if d < best.0 {
                best = (d, gi);
            }
        }
        if labels[best.1] == labels[qi] {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

pub fn accuracy<T: PartialEq>(preds: &[T], labels: &[T]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Row-wise argmax of a `(n, classes)` tensor.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<u32>> {
    Ok(logits
        .argmax(D::Minus1)?
        .to_dtype(DType::U32)?
        .flatten_all()?
        .to_vec1::<u32>()?)
}

/// One evaluated point: a metric for one task at one SNR.
///
/// This is also the row type of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub system: System,
    pub task: TaskId,
    /// `f64::INFINITY` for noiseless (upper-bound) evaluation.
    pub snr_db: f64,
    pub metric: MetricKind,
    pub value: f64,
    pub std: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub model_tag: String,
    pub exit_layer: Option<usize>,
    pub rows_selected: Option<usize>,
    pub rows_total: Option<usize>,
    pub symbols_sent: Option<usize>,
    pub decode_failures: Option<usize>,
    pub codec_deviation: Option<String>,
}

impl MetricReport {
    pub fn new(system: System, task: TaskId, snr_db: f64, value: f64) -> Self {
        MetricReport {
            system,
            task,
            snr_db,
            metric: task.metric(),
            value,
            std: 0.0,
            sample_count: 0,
            seed: 0,
            model_tag: String::new(),
            exit_layer: None,
            rows_selected: None,
            rows_total: None,
            symbols_sent: None,
            decode_failures: None,
            codec_deviation: None,
        }
    }

    /// Checks the value lies within its metric's range.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.metric {
            MetricKind::Accuracy | MetricKind::RecallAt1 | MetricKind::Bleu => {
                (0.0..=1.0).contains(&self.value)
            }
            MetricKind::Psnr => !self.value.is_nan() && self.value <= PSNR_CAP_DB,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Malformed(format!(
                "{} value {} out of range",
                self.metric.as_str(),
                self.value
            )))
        }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle::Device;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let logits = Tensor::zeros((3, 5), DType::F64, &Device::Cpu).unwrap();
        let l = cross_entropy(&logits, &[0, 2, 4]).unwrap();
        assert!(close(l.to_scalar::<f64>().unwrap(), 5f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_confident_goes_to_zero() {
        let logits = Tensor::new(&[[50.0f64, -50.0]], &Device::Cpu).unwrap();
        let l = cross_entropy(&logits, &[0]).unwrap().to_scalar::<f64>().unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn cross_entropy_hand_softmax() {
        // softmax([0, ln 3]) = [1/4, 3/4]
        let logits = Tensor::new(&[[0.0f64, 3f64.ln()]], &Device::Cpu).unwrap();
        let l = cross_entropy(&logits, &[1]).unwrap().to_scalar::<f64>().unwrap();
        assert!(close(l, -(0.75f64).ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            cross_entropy(&logits, &[2]),
            Err(Error::InvalidLabel { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn triplet_examples() {
        let m = 0.5;
        // a = p, d(a, n) = 2m
        let b = TripletBatch {
            anchor: vec![0.0, 0.0],
            positive: vec![0.0, 0.0],
            negative: vec![1.0, 0.0],
            margin: 0.5,
        };
        assert_eq!(triplet_loss(&b).unwrap(), 0.0);
        // a = n, d(a, p) = 1
        let b = TripletBatch {
            anchor: vec![0.0, 0.0],
            positive: vec![1.0, 0.0],
            negative: vec![0.0, 0.0],
            margin: m,
        };
        assert!(close(triplet_loss(&b).unwrap(), 1.5, 1e-15));
    }

    #[test]
    fn triplet_tensor_matches_scalar() {
        let dev = Device::Cpu;
        let a = [[0.6f64, 0.8], [1.0, 0.0]];
        let p = [[0.0f64, 1.0], [0.0, 1.0]];
        let n = [[1.0f64, 0.0], [1.0, 0.0]];
        let t = triplet_loss_tensor(
            &Tensor::new(&a, &dev).unwrap(),
            &Tensor::new(&p, &dev).unwrap(),
            &Tensor::new(&n, &dev).unwrap(),
            0.2,
        )
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
        let expected: f64 = (0..2)
            .map(|i| {
                triplet_loss(&TripletBatch {
                    anchor: a[i].to_vec(),
                    positive: p[i].to_vec(),
                    negative: n[i].to_vec(),
                    margin: 0.2,
                })
                .unwrap()
            })
            .sum::<f64>()
            / 2.0;
        assert!(close(t, expected, 1e-12));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0; 6], &[1.0; 6]).unwrap(), 1.0);
        assert!(mse(&[0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn psnr_examples() {
        assert!(close(psnr_from_mse(0.01, 1.0), 20.0, 1e-12));
        assert_eq!(psnr(&[0.5; 4], &[0.5; 4], 1.0).unwrap(), PSNR_CAP_DB);
        assert!(close(psnr_from_mse(255.0 * 255.0, 255.0), 0.0, 1e-12));
    }

    #[test]
    fn bleu_examples() {
        let r = ["a", "b", "c", "d", "e"];
        assert_eq!(bleu(&r, &r).unwrap(), 1.0);
        assert_eq!(bleu(&r, &["x", "y", "z"]).unwrap(), 0.0);
        assert!(matches!(bleu::<&str>(&[], &["a"]), Err(Error::EmptyReference)));
    }

    #[test]
    fn bleu_short_exact_match_is_one() {
        assert_eq!(bleu(&[1, 2], &[1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn recall_examples() {
        let g = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.1, 5.0]];
        let labels = [0, 0, 1, 1];
        assert_eq!(recall_at_1(&g, &g, &labels).unwrap(), 1.0);
        assert!(recall_at_1(&g[..1], &g[..1], &labels[..1]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0, 1, 0], &[1, 1, 1, 1]).unwrap(), 0.5);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn report_range_validation() {
        let mut r = MetricReport::new(System::Udeepsc, TaskId::Sentiment, 0.0, 0.5);
        assert!(r.validate().is_ok());
        r.value = 1.5;
        assert!(r.validate().is_err());
        let r = MetricReport::new(System::Udeepsc, TaskId::ImageRecon, 0.0, -3.0);
        assert!(r.validate().is_ok());
    }

    proptest! {
        #[test]
        fn psnr_decreases_with_mse(a in 1e-9f64..10.0, b in 1e-9f64..10.0) {
            prop_assume!((a - b).abs() > 1e-12);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(psnr_from_mse(lo, 1.0) > psnr_from_mse(hi, 1.0));
        }

        #[test]
        fn triplet_nonnegative_and_zero_when_satisfied(
            a in prop::collection::vec(-1.0f64..1.0, 4),
            p in prop::collection::vec(-1.0f64..1.0, 4),
            n in prop::collection::vec(-1.0f64..1.0, 4),
            m in 0.0f64..1.0,
        ) {
            let b = TripletBatch { anchor: a.clone(), positive: p.clone(), negative: n.clone(), margin: m };
            let l = triplet_loss(&b).unwrap();
            prop_assert!(l >= 0.0);
            if squared_distance(&a, &n) >= squared_distance(&a, &p) + m {
                prop_assert_eq!(l, 0.0);
            }
        }

        #[test]
        fn bleu_in_unit_interval_and_one_on_identity(
            r in prop::collection::vec(0u8..20, 1..20),
            h in prop::collection::vec(0u8..20, 0..20),
        ) {
            let v = bleu(&r, &h).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(bleu(&r, &r).unwrap(), 1.0);
        }

        #[test]
        fn bleu_below_one_when_hypothesis_differs(
            r in prop::collection::vec(0u16..1000, 4..16),
            h in prop::collection::vec(0u16..1000, 4..16),
        ) {
            prop_assume!(r != h);
            prop_assert!(bleu(&r, &h).unwrap() < 1.0);
        }
    }
}
