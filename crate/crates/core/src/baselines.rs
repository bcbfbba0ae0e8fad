//! Conventional separate source and channel coding: JPEG or UTF-8, a rate
//! 1/2 convolutional code with soft Viterbi decoding, and BPSK over the
//! simulated channel.

use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{equalize, transmit, ChannelConfig};
use crate::datasets::image::Image;
use crate::datasets::vocab::words;
use crate::error::{Error, Result};
use crate::objectives::{bleu, mean_std, psnr, MetricReport};
use crate::task::{System, TaskId};

/// Recorded in every baseline report.
pub const CODEC_DEVIATION: &str =
    "rate-1/2 K=7 convolutional code with soft Viterbi decoding in place of LDPC/Turbo";

/// Pixel value used for images whose stream fails to decode.
pub const FALLBACK_GRAY: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub jpeg_quality: u8,
    pub constraint_length: usize,
    /// Generator polynomials in octal notation.
    pub generators: [u32; 2],
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            jpeg_quality: 75,
            constraint_length: 7,
            generators: [0o171, 0o133],
        }
    }
}

impl CodecConfig {
    pub fn rate(&self) -> f64 {
        1.0 / self.generators.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(Error::Config(format!("jpeg quality {} outside 1..=100", self.jpeg_quality)));
        }
        if !(2..=16).contains(&self.constraint_length) {
            return Err(Error::Config(format!("constraint length {}", self.constraint_length)));
        }
        if self.generators.iter().any(|&g| g == 0 || g >> self.constraint_length != 0) {
            return Err(Error::Config("generator wider than the constraint length".into()));
        }
        Ok(())
    }
}

/// Bits with the payload length recorded before any padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitStream {
    pub bits: Vec<u8>,
    pub source: String,
    pub payload_len: usize,
}

impl BitStream {
    /// Most significant bit first.
    pub fn from_bytes(bytes: &[u8], source: &str) -> Self {
        let bits: Vec<u8> = bytes
            .iter()
            .flat_map(|&b| (0..8).rev().map(move |i| (b >> i) & 1))
            .collect();
        BitStream {
            payload_len: bits.len(),
            bits,
            source: source.to_string(),
        }
    }

    /// Packs the payload bits; a trailing partial byte is dropped.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits[..self.payload_len.min(self.bits.len())]
            .chunks_exact(8)
            .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | (b & 1)))
            .collect()
    }
}

pub fn jpeg_encode(image: &Image, quality: u8) -> Result<BitStream> {
    if image.channels != 3 {
        return Err(Error::DimensionMismatch(format!("jpeg needs 3 channels, got {}", image.channels)));
    }
    let mut buf = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality)
        .encode(
            &image.quantize_u8(),
            image.width as u32,
            image.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(BitStream::from_bytes(&buf, "jpeg"))
}

/// Decodes a JPEG stream that must describe a `height x width` RGB image.
pub fn jpeg_decode(stream: &BitStream, height: usize, width: usize) -> Result<Image> {
    let bytes = stream.to_bytes();
    let decoded = catch_unwind(AssertUnwindSafe(|| {
        let mut reader = image::ImageReader::new(Cursor::new(bytes));
        reader.set_format(image::ImageFormat::Jpeg);
        let mut limits = image::Limits::default();
        limits.max_image_width = Some(4096);
        limits.max_image_height = Some(4096);
        limits.max_alloc = Some(64 << 20);
        reader.limits(limits);
        reader.decode()
    }));
    let img = match decoded {
        Ok(Ok(img)) => img.into_rgb8(),
        Ok(Err(e)) => return Err(Error::CorruptedStream(e.to_string())),
        Err(_) => return Err(Error::CorruptedStream("decoder panicked".into())),
    };
    if img.width() as usize != width || img.height() as usize != height {
        return Err(Error::CorruptedStream(format!(
            "decoded {}x{}, expected {width}x{height}",
            img.width(),
            img.height()
        )));
    }
    Image::from_u8(height, width, 3, img.as_raw())
}

pub fn utf8_encode(text: &str) -> BitStream {
    BitStream::from_bytes(text.as_bytes(), "utf8")
}

/// Invalid sequences become U+FFFD.
pub fn utf8_decode(stream: &BitStream) -> String {
    String::from_utf8_lossy(&stream.to_bytes()).into_owned()
}

fn parity(x: u32) -> u8 {
    (x.count_ones() & 1) as u8
}

/// Zero-tailed feedforward convolutional encoding; output length is
/// `2 * (bits + K - 1)`.
pub fn conv_encode(bits: &[u8], cfg: &CodecConfig) -> Vec<u8> {
    let m = cfg.constraint_length - 1;
    let mut state: u32 = 0;
    let mut out = Vec::with_capacity(2 * (bits.len() + m));
    for &u in bits.iter().chain(std::iter::repeat_n(&0u8, m)) {
        let reg = ((u as u32 & 1) << m) | state;
        for &g in &cfg.generators {
            out.push(parity(reg & g));
        }
        state = reg >> 1;
    }
    out
}

/// Maximum-likelihood decoding of soft values (positive favours bit 0)
/// produced by [`conv_encode`] with zero-tail termination.
pub fn viterbi_decode(soft: &[f64], cfg: &CodecConfig) -> Result<Vec<u8>> {
    let m = cfg.constraint_length - 1;
    let n_out = cfg.generators.len();
    if soft.len() % n_out != 0 || soft.len() / n_out < m {
        return Err(Error::LengthMismatch {
            left: soft.len(),
            right: n_out * m,
        });
    }
    if m > 6 {
        return Err(Error::Config("viterbi supports constraint length up to 7".into()));
    }
    let steps = soft.len() / n_out;
    let states = 1usize << m;
    // expected sign of every output for (state, input)
    let mut outputs = vec![[0u8; 2]; states * 2];
    for s in 0..states {
        for u in 0..2 {
            let reg = ((u as u32) << m) | s as u32;
            for (j, &g) in cfg.generators.iter().enumerate() {
                outputs[s * 2 + u][j] = parity(reg & g);
            }
        }
    }
    let mut metric = vec![f64::NEG_INFINITY; states];
    metric[0] = 0.0;
    let mut next = vec![0.0; states];
    let mut decisions: Vec<u64> = Vec::with_capacity(steps);
    for t in 0..steps {
        let y = &soft[t * n_out..(t + 1) * n_out];
        let mut dec = 0u64;
        for ns in 0..states {
            let u = ns >> (m - 1);
            let base = (ns & ((1 << (m - 1)) - 1)) << 1;
            let mut best = f64::NEG_INFINITY;
            let mut pick = 0;
            for b in 0..2 {
                let s = base | b;
                let o = &outputs[s * 2 + u];
                let bm: f64 = y.iter().zip(o).map(|(&v, &c)| if c == 0 { v } else { -v }).sum();
                let cand = metric[s] + bm;
                if cand > best {
                    best = cand;
                    pick = b;
                }
            }
            next[ns] = best;
            dec |= (pick as u64) << ns;
        }
        std::mem::swap(&mut metric, &mut next);
        decisions.push(dec);
    }
    let mut state = 0usize;
    let mut bits = vec![0u8; steps];
    for t in (0..steps).rev() {
        bits[t] = (state >> (m - 1)) as u8;
        let b = ((decisions[t] >> state) & 1) as usize;
        state = ((state & ((1 << (m - 1)) - 1)) << 1) | b;
    }
    bits.truncate(steps - m);
    Ok(bits)
}

/// 0 maps to +1 and 1 to -1 on the real axis.
pub fn bpsk_modulate(bits: &[u8]) -> Vec<Complex64> {
    bits.iter()
        .map(|&b| Complex64::new(if b == 0 { 1.0 } else { -1.0 }, 0.0))
        .collect()
}

/// Log-likelihood ratios `2 Re(y) / sigma^2`; the real parts themselves
/// when there is no noise.
pub fn bpsk_demodulate_soft(y: &[Complex64], sigma2: f64) -> Vec<f64> {
    let scale = if sigma2 > 0.0 { 2.0 / sigma2 } else { 1.0 };
    y.iter().map(|z| z.re * scale).collect()
}

fn hard(soft: &[f64]) -> Vec<u8> {
    soft.iter().map(|&v| (v < 0.0) as u8).collect()
}

/// Sends `bits` through channel coding, BPSK and the channel; `None`
/// skips the channel.
pub fn transmit_bits<R: Rng + ?Sized>(
    bits: &[u8],
    channel: Option<&ChannelConfig>,
    cfg: &CodecConfig,
    rng: &mut R,
) -> Result<Vec<u8>> {
    let coded = conv_encode(bits, cfg);
    let mut x = bpsk_modulate(&coded);
    let Some(ch) = channel else {
        return viterbi_decode(&bpsk_demodulate_soft(&x, 0.0), cfg);
    };
    // pad to whole fading blocks
    let pad = (ch.n_t - x.len() % ch.n_t) % ch.n_t;
    x.extend(std::iter::repeat_n(Complex64::new(1.0, 0.0), pad));
    let rx = transmit(&x, ch, rng)?;
    let mut y = equalize(&rx)?;
    y.truncate(coded.len());
    viterbi_decode(&bpsk_demodulate_soft(&y, rx.sigma2), cfg)
}

/// Uncoded hard decisions, for BER reference curves.
pub fn transmit_bits_uncoded<R: Rng + ?Sized>(bits: &[u8], channel: &ChannelConfig, rng: &mut R) -> Result<Vec<u8>> {
    let rx = transmit(&bpsk_modulate(bits), channel, rng)?;
    Ok(hard(&bpsk_demodulate_soft(&equalize(&rx)?, rx.sigma2)))
}

/// Result of one sample through a conventional pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivered<T> {
    pub value: T,
    pub failed: bool,
    pub bits_sent: usize,
}

pub fn conventional_image<R: Rng + ?Sized>(
    image: &Image,
    channel: Option<&ChannelConfig>,
    cfg: &CodecConfig,
    rng: &mut R,
) -> Result<Delivered<Image>> {
    let stream = jpeg_encode(image, cfg.jpeg_quality)?;
    let bits = transmit_bits(&stream.bits, channel, cfg, rng)?;
    let received = BitStream {
        payload_len: bits.len(),
        bits,
        source: stream.source.clone(),
    };
    let (value, failed) = match jpeg_decode(&received, image.height, image.width) {
        Ok(img) => (img, false),
        Err(Error::CorruptedStream(_)) => (Image::filled(image.height, image.width, image.channels, FALLBACK_GRAY), true),
        Err(e) => return Err(e),
    };
    Ok(Delivered {
        value,
        failed,
        bits_sent: stream.bits.len(),
    })
}

pub fn conventional_text<R: Rng + ?Sized>(
    text: &str,
    channel: Option<&ChannelConfig>,
    cfg: &CodecConfig,
    rng: &mut R,
) -> Result<Delivered<String>> {
    let stream = utf8_encode(text);
    let bits = transmit_bits(&stream.bits, channel, cfg, rng)?;
    let value = utf8_decode(&BitStream {
        payload_len: bits.len(),
        bits,
        source: stream.source,
    });
    Ok(Delivered {
        failed: value.contains('\u{FFFD}'),
        value,
        bits_sent: stream.payload_len,
    })
}

fn report(task: TaskId, snr_db: f64, values: &[f64], failures: usize, seed: u64, bits: usize) -> MetricReport {
    let (mean, std) = mean_std(values);
    let mut r = MetricReport::new(System::Conventional, task, snr_db, mean);
    r.std = std;
    r.sample_count = values.len();
    r.seed = seed;
    r.model_tag = "conventional".into();
    r.decode_failures = Some(failures);
    r.symbols_sent = Some(bits);
    r.codec_deviation = Some(CODEC_DEVIATION.into());
    r
}

/// JPEG, channel code, BPSK and the channel for every image; PSNR against
/// the originals. Failed decodes are scored with a flat gray image.
pub fn conventional_image_pipeline<R: Rng + ?Sized>(
    images: &[Image],
    channel: Option<&ChannelConfig>,
    cfg: &CodecConfig,
    seed: u64,
    rng: &mut R,
) -> Result<(Vec<Image>, MetricReport)> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(images.len());
    let mut scores = Vec::with_capacity(images.len());
    let mut failures = 0;
    let mut coded_symbols = 0;
    for img in images {
        let d = conventional_image(img, channel, cfg, rng)?;
        scores.push(psnr(&img.data, &d.value.data, 1.0)?);
        failures += d.failed as usize;
        coded_symbols += 2 * (d.bits_sent + cfg.constraint_length - 1);
        out.push(d.value);
    }
    let snr = channel.map_or(f64::INFINITY, |c| c.snr_db);
    let per = coded_symbols / images.len().max(1);
    Ok((out, report(TaskId::ImageRecon, snr, &scores, failures, seed, per)))
}

/// UTF-8, channel code, BPSK and the channel for every sentence; word BLEU
/// against the source.
pub fn conventional_text_pipeline<R: Rng + ?Sized>(
    texts: &[String],
    channel: Option<&ChannelConfig>,
    cfg: &CodecConfig,
    seed: u64,
    rng: &mut R,
) -> Result<(Vec<String>, MetricReport)> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(texts.len());
    let mut scores = Vec::with_capacity(texts.len());
    let mut failures = 0;
    let mut coded_symbols = 0;
    for t in texts {
        let d = conventional_text(t, channel, cfg, rng)?;
        let reference: Vec<String> = words(t).collect();
        let hypothesis: Vec<String> = words(&d.value).collect();
        scores.push(bleu(&reference, &hypothesis)?);
        failures += d.failed as usize;
        coded_symbols += 2 * (d.bits_sent + cfg.constraint_length - 1);
        out.push(d.value);
    }
    let snr = channel.map_or(f64::INFINITY, |c| c.snr_db);
    let per = coded_symbols / texts.len().max(1);
    Ok((out, report(TaskId::TextRecon, snr, &scores, failures, seed, per)))
}
