use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semcom::baselines::{transmit_bits, transmit_bits_uncoded, CodecConfig};
use semcom::channel::{equalize, power_normalize, transmit, ChannelConfig};

/// Gaussian tail probability by Simpson integration of the density.
fn q(x: f64) -> f64 {
    let (a, b, n) = (x, x + 12.0, 20_000);
    let h = (b - a) / n as f64;
    let f = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn random_bits(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..2u8)).collect()
}

fn errors(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

#[test]
fn uncoded_ber_matches_theory() {
    let bits = random_bits(200_000, 1);
    let ch = ChannelConfig::awgn(2.0);
    let rx = transmit_bits_uncoded(&bits, &ch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let ber = errors(&bits, &rx) as f64 / bits.len() as f64;
    // real BPSK sees half of the complex noise power
    let theory = q((2.0 / ch.sigma2()).sqrt());
    assert!((ber - theory).abs() / theory < 0.05, "ber {ber} theory {theory}");
}

#[test]
fn coding_gain_at_five_db_eb_n0() {
    // rate 1/2: Es/N0 is 3 dB below Eb/N0
    let bits = random_bits(100_000, 3);
    let ch = ChannelConfig::awgn(5.0 - 10.0 * 2f64.log10());
    let cfg = CodecConfig::default();
    let coded = transmit_bits(&bits, Some(&ch), &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let uncoded = transmit_bits_uncoded(&bits, &ch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (ec, eu) = (errors(&bits, &coded), errors(&bits, &uncoded));
    assert!((ec as f64) < 1e-3 * bits.len() as f64, "coded errors {ec}");
    assert!(ec * 20 < eu, "coded {ec} vs uncoded {eu}");
}

#[test]
fn rayleigh_with_perfect_csi_recovers_symbols_at_high_snr() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<Complex64> = (0..400).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let ch = ChannelConfig::rayleigh(80.0, 2);
    let rx = transmit(&x, &ch, &mut rng).unwrap();
    let y = equalize(&rx).unwrap();
    let worst = x.iter().zip(&y).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    assert!(worst < 1e-2, "worst {worst}");
}

#[test]
fn awgn_sample_variance_tracks_snr() {
    for snr in [-6.0, 0.0, 10.0, 18.0] {
        let ch = ChannelConfig::awgn(snr);
        let x = vec![Complex64::new(0.0, 0.0); 200_000];
        let rx = transmit(&x, &ch, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let p = rx.y.iter().map(|z| z.norm_sqr()).sum::<f64>() / x.len() as f64;
        assert!((p / ch.sigma2() - 1.0).abs() < 0.02, "snr {snr}: {p}");
    }
}

proptest! {
    #[test]
    fn normalized_power_is_one(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..64)) {
        let x: Vec<Complex64> = v.iter().map(|&(a, b)| Complex64::new(a, b)).collect();
        let (y, degenerate) = power_normalize(&x);
        if !degenerate {
            let p = y.iter().map(|z| z.norm_sqr()).sum::<f64>() / y.len() as f64;
            prop_assert!((p - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_coded_round_trip(bits in prop::collection::vec(0u8..2, 0..300)) {
        let cfg = CodecConfig::default();
        let out = transmit_bits(&bits, None, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(out, bits);
    }
}
