//! Simulated wireless channel `Y = Hx + n`.
//!
//! Two routes share the same random draws: a host route over
//! `Complex64` slices (used by the classical baselines and the statistics
//! checks) and a tensor route over `(batch, symbols, 2)` real pairs that the
//! learned codec trains through. Noise is additive and the fading matrix
//! acts linearly, so the tensor route is differentiable in `x`.

use candle::{DType, Device, Tensor, D};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Complex noise variance for unit-power symbols at `snr_db`.
pub fn snr_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Awgn,
    Rayleigh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub snr_db: f64,
    pub n_t: usize,
    pub n_r: usize,
    pub mode: ChannelMode,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            snr_db: 0.0,
            n_t: 1,
            n_r: 1,
            mode: ChannelMode::Awgn,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64) -> Self {
        ChannelConfig {
            snr_db,
            ..Default::default()
        }
    }

    pub fn rayleigh(snr_db: f64, antennas: usize) -> Self {
        ChannelConfig {
            snr_db,
            n_t: antennas,
            n_r: antennas,
            mode: ChannelMode::Rayleigh,
            seed: 0,
        }
    }

    pub fn sigma2(&self) -> f64 {
        snr_to_sigma2(self.snr_db)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::Config(format!("snr_db {} is not finite", self.snr_db)));
        }
        if self.n_t == 0 || self.n_r == 0 {
            return Err(Error::Config("antenna counts must be positive".into()));
        }
        if self.mode == ChannelMode::Rayleigh && self.n_t != self.n_r {
            return Err(Error::Config(format!(
                "rayleigh mode needs n_t == n_r, got {}x{}",
                self.n_r, self.n_t
            )));
        }
        Ok(())
    }

    /// Symbols per channel use.
    fn block(&self) -> usize {
        match self.mode {
            ChannelMode::Awgn => 1,
            ChannelMode::Rayleigh => self.n_t,
        }
    }
}

/// Scales `x` to unit mean squared magnitude. All-zero input is returned
/// unchanged with the degenerate flag set.
pub fn power_normalize(x: &[Complex64]) -> (Vec<Complex64>, bool) {
    if x.is_empty() {
        return (Vec::new(), true);
    }
    let power = x.iter().map(|c| c.norm_sqr()).sum::<f64>() / x.len() as f64;
    if power == 0.0 {
        return (x.to_vec(), true);
    }
    let scale = power.sqrt().recip();
    (x.iter().map(|c| c * scale).collect(), false)
}

/// `n` draws of CN(0, sigma2).
pub fn draw_noise<R: Rng + ?Sized>(n: usize, sigma2: f64, rng: &mut R) -> Vec<Complex64> {
    let std = (sigma2 / 2.0).sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * std, im * std)
        })
        .collect()
}

/// Square fading matrix with iid CN(0, 1) entries, redrawn until invertible.
pub fn draw_rayleigh<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
    loop {
        let h = DMatrix::from_fn(n, n, |_, _| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
        });
        if let Some(inv) = h.clone().try_inverse() {
            if inv.iter().all(|c| c.is_finite()) {
                return (h, inv);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReceivedSignal {
    pub y: Vec<Complex64>,
    /// Realized fading matrix, `None` in AWGN mode.
    pub h: Option<DMatrix<Complex64>>,
    pub sigma2: f64,
}

fn apply_blocks(m: &DMatrix<Complex64>, x: &[Complex64]) -> Vec<Complex64> {
    let n = m.ncols();
    let mut out = Vec::with_capacity(x.len());
    for block in x.chunks(n) {
        for r in 0..m.nrows() {
            out.push((0..n).map(|c| m[(r, c)] * block[c]).sum());
        }
    }
    out
}

fn check_block_len(len: usize, cfg: &ChannelConfig) -> Result<()> {
    if len % cfg.block() != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{len} symbols do not split into blocks of {}",
            cfg.block()
        )));
    }
    Ok(())
}

/// One transmission of `x` through the configured channel.
pub fn transmit<R: Rng + ?Sized>(x: &[Complex64], cfg: &ChannelConfig, rng: &mut R) -> Result<ReceivedSignal> {
    cfg.validate()?;
    check_block_len(x.len(), cfg)?;
    let sigma2 = cfg.sigma2();
    let h = match cfg.mode {
        ChannelMode::Awgn => None,
        ChannelMode::Rayleigh => Some(draw_rayleigh(cfg.n_t, rng).0),
    };
    let noise = draw_noise(x.len(), sigma2, rng);
    let faded = match &h {
        None => x.to_vec(),
        Some(h) => apply_blocks(h, x),
    };
    let y = faded.iter().zip(&noise).map(|(a, b)| a + b).collect();
    Ok(ReceivedSignal { y, h, sigma2 })
}

/// Zero-forcing with perfect CSI: `H^-1 Y`. Identity in AWGN mode.
pub fn equalize(rx: &ReceivedSignal) -> Result<Vec<Complex64>> {
    match &rx.h {
        None => Ok(rx.y.clone()),
        Some(h) => {
            let inv = h.clone().try_inverse().ok_or(Error::SingularChannel)?;
            Ok(apply_blocks(&inv, &rx.y))
        }
    }
}

/// Interleaved real equivalent of a complex matrix acting on
/// `[re0, im0, re1, im1, ...]`.
fn real_equivalent(m: &DMatrix<Complex64>) -> Vec<f64> {
    let (r, c) = (m.nrows(), m.ncols());
    let w = 2 * c;
    let mut out = vec![0.0; 2 * r * w];
    for i in 0..r {
        for j in 0..c {
            let z = m[(i, j)];
            out[(2 * i) * w + 2 * j] = z.re;
            out[(2 * i) * w + 2 * j + 1] = -z.im;
            out[(2 * i + 1) * w + 2 * j] = z.im;
            out[(2 * i + 1) * w + 2 * j + 1] = z.re;
        }
    }
    out
}

fn transposed(m: &[f64], w: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for i in 0..w {
        for j in 0..w {
            out[j * w + i] = m[i * w + j];
        }
    }
    out
}

/// Per-sample unit power normalization of `(batch, symbols, 2)`.
/// Returns the degenerate flag of every sample.
pub fn power_normalize_tensor(x: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    let (b, n, two) = x.dims3()?;
    if two != 2 {
        return Err(Error::ShapeMismatch(format!("expected (b, n, 2), got {:?}", x.dims())));
    }
    let power = (x.sqr()?.sum_keepdim(D::Minus1)?.sum_keepdim(1)? / n as f64)?;
    let zero = power.eq(0.0)?.to_dtype(x.dtype())?;
    let flags: Vec<bool> = zero
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .into_iter()
        .map(|v| v != 0.0)
        .collect();
    debug_assert_eq!(flags.len(), b);
    let safe = (power + zero)?;
    Ok((x.broadcast_div(&safe.sqrt()?)?, flags))
}

/// Channel state of one batched transmission.
#[derive(Debug, Clone)]
pub struct TensorReceived {
    pub y: Tensor,
    /// Per-sample real-equivalent inverse of H, `(batch, 2n, 2n)`.
    equalizer: Option<Tensor>,
    pub sigma2: f64,
}

impl TensorReceived {
    /// Noiseless pass-through used for upper-bound evaluation.
    pub fn bypass(x: &Tensor) -> Self {
        TensorReceived {
            y: x.clone(),
            equalizer: None,
            sigma2: 0.0,
        }
    }
}

fn to_blocks(x: &Tensor, block: usize) -> Result<Tensor> {
    let (b, n, _) = x.dims3()?;
    Ok(x.reshape((b, n / block, 2 * block))?)
}

/// Batched transmission of `(batch, symbols, 2)`. Each sample gets its own
/// fading matrix and noise, drawn in sample order exactly as [`transmit`]
/// would draw them for that sample.
pub fn transmit_tensor<R: Rng + ?Sized>(x: &Tensor, cfg: &ChannelConfig, rng: &mut R) -> Result<TensorReceived> {
    cfg.validate()?;
    let (b, n, _) = x.dims3()?;
    check_block_len(n, cfg)?;
    let sigma2 = cfg.sigma2();
    let dev = x.device();
    let mut noise = Vec::with_capacity(b * n * 2);
    let mut fading = Vec::new();
    let mut inverse = Vec::new();
    for _ in 0..b {
        if cfg.mode == ChannelMode::Rayleigh {
            let (h, inv) = draw_rayleigh(cfg.n_t, rng);
            fading.extend(transposed(&real_equivalent(&h), 2 * cfg.n_t));
            inverse.extend(transposed(&real_equivalent(&inv), 2 * cfg.n_t));
        }
        for z in draw_noise(n, sigma2, rng) {
            noise.push(z.re);
            noise.push(z.im);
        }
    }
    let noise = Tensor::from_vec(noise, (b, n, 2), dev)?.to_dtype(x.dtype())?;
    let (faded, equalizer) = match cfg.mode {
        ChannelMode::Awgn => (x.clone(), None),
        ChannelMode::Rayleigh => {
            let w = 2 * cfg.n_t;
            let ht = Tensor::from_vec(fading, (b, w, w), dev)?.to_dtype(x.dtype())?;
            let inv_t = Tensor::from_vec(inverse, (b, w, w), dev)?.to_dtype(x.dtype())?;
            let faded = to_blocks(x, cfg.n_t)?.matmul(&ht)?.reshape((b, n, 2))?;
            (faded, Some(inv_t))
        }
    };
    Ok(TensorReceived {
        y: (faded + noise)?,
        equalizer,
        sigma2,
    })
}

pub fn equalize_tensor(rx: &TensorReceived) -> Result<Tensor> {
    match &rx.equalizer {
        None => Ok(rx.y.clone()),
        Some(inv_t) => {
            let (b, n, _) = rx.y.dims3()?;
            let block = inv_t.dim(1)? / 2;
            Ok(to_blocks(&rx.y, block)?.matmul(inv_t)?.reshape((b, n, 2))?)
        }
    }
}

/// Packs complex symbols into a `(1, n, 2)` tensor.
pub fn complex_to_tensor(x: &[Complex64], dtype: DType, device: &Device) -> Result<Tensor> {
    let flat: Vec<f64> = x.iter().flat_map(|c| [c.re, c.im]).collect();
    Ok(Tensor::from_vec(flat, (1, x.len(), 2), device)?.to_dtype(dtype)?)
}

/// Unpacks a `(n, 2)` or `(1, n, 2)` tensor into complex symbols.
pub fn tensor_to_complex(t: &Tensor) -> Result<Vec<Complex64>> {
    let flat = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(flat.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect())
}
