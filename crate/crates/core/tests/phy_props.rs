use mpota::phy::{
    ChannelEstimate, ChannelState, NoiseReference, NoiseSpec, PilotSequence, ReceivedSignal,
    complex_noise, downlink_recover, estimate_channel, exhaustive_code_pairs, modulate_amplitude,
    ota_superpose, precode, qam_superposition_demo, sample_channel,
};
use mpota::quant::{QuantSpec, QuantizedTensor, quantize_tensor};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn channel_has_unit_average_power() {
    let mut r = rng(100);
    let n = 10_000;
    let mean = (0..n).map(|_| sample_channel(&mut r).h.norm_sqr()).sum::<f64>() / n as f64;
    assert!((0.95..=1.05).contains(&mean), "{mean}");
}

#[test]
fn channel_magnitude_is_rayleigh() {
    // Kolmogorov-Smirnov against F(r) = 1 - exp(-r²), alpha = 0.01.
    let mut r = rng(101);
    let n = 10_000;
    let mut mags: Vec<f64> = (0..n).map(|_| sample_channel(&mut r).h.norm()).collect();
    mags.sort_by(f64::total_cmp);
    let d = mags
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let f = 1.0 - (-m * m).exp();
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    let critical = 1.628 / (n as f64).sqrt();
    assert!(d < critical, "KS statistic {d} >= {critical}");
}

fn estimate_mse(snr_db: f64, pilot_len: usize, trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let noise = NoiseSpec::new(snr_db, NoiseReference::UnitSignal).unwrap();
    let pilot = PilotSequence::unit(pilot_len).unwrap();
    let (mut err, mut power) = (0.0, 0.0);
    for _ in 0..trials {
        let ch = sample_channel(&mut r);
        let est = estimate_channel(&ch, &pilot, &noise, &mut r);
        err += (est.h_hat - ch.h).norm_sqr();
        power += ch.h.norm_sqr();
    }
    err / power
}

#[test]
fn estimator_error_matches_variance_bound() {
    // Estimator variance is σ²/(L·P) = 1e-3 / 8 at 30 dB; allow a factor of 3.
    let nmse = estimate_mse(30.0, 8, 10_000, 7);
    assert!(nmse <= 1e-3 / 8.0 * 3.0, "{nmse}");
}

#[test]
fn estimator_error_falls_with_snr() {
    let mses: Vec<f64> = [5.0, 10.0, 20.0, 30.0]
        .iter()
        .map(|&snr| estimate_mse(snr, 8, 10_000, 8))
        .collect();
    for w in mses.windows(2) {
        assert!(w[1] < w[0], "{mses:?}");
    }
}

#[test]
fn generated_noise_power_matches_variance() {
    let mut r = rng(9);
    for variance in [0.01, 0.3, 2.0] {
        let n = 100_000;
        let p = (0..n).map(|_| complex_noise(&mut r, variance).norm_sqr()).sum::<f64>() / n as f64;
        assert!((p / variance - 1.0).abs() < 0.05, "{p} vs {variance}");
    }
}

#[test]
fn measured_reference_scales_with_signal() {
    let mut r = rng(10);
    let noise = NoiseSpec::new(10.0, NoiseReference::MeasuredSignal).unwrap();
    let x = vec![Complex64::new(3.0, 0.0); 100_000];
    let out = ota_superpose(std::slice::from_ref(&x), &[ChannelState::identity()], &noise, &mut r).unwrap();
    let p = out
        .samples
        .iter()
        .zip(&x)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        / x.len() as f64;
    assert!((p / 0.9 - 1.0).abs() < 0.05, "{p}");
}

#[test]
fn modulation_examples() {
    let fx4 = QuantSpec::fixed(4).unwrap();
    let zero = quantize_tensor(&[0.0; 3], &fx4).unwrap();
    assert_eq!(modulate_amplitude(&zero), vec![0.0; 3]);
    let t = QuantizedTensor::from_parts(vec![7, -7], 1.0 / 7.0, fx4, vec![2]).unwrap();
    let a = modulate_amplitude(&t);
    assert!((a[0] - 1.0).abs() < 1e-15 && (a[1] + 1.0).abs() < 1e-15);
}

fn perfect_uplink(thetas: &[Vec<f64>], r: &mut ChaCha8Rng) -> (ReceivedSignal, Vec<ChannelState>) {
    let channels: Vec<ChannelState> = thetas.iter().map(|_| sample_channel(r)).collect();
    let precoded: Vec<Vec<Complex64>> = thetas
        .iter()
        .zip(&channels)
        .map(|(t, ch)| precode(t, &ChannelEstimate::exact(ch), f64::INFINITY).unwrap().samples)
        .collect();
    let rx = ota_superpose(&precoded, &channels, &NoiseSpec::noiseless(), r).unwrap();
    (rx, channels)
}

#[test]
fn fifteen_clients_sum_digitally() {
    let mut r = rng(11);
    let thetas: Vec<Vec<f64>> = (0..15)
        .map(|_| (0..200).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let (rx, _) = perfect_uplink(&thetas, &mut r);
    for (j, s) in rx.samples.iter().enumerate() {
        let digital: f64 = thetas.iter().map(|t| t[j]).sum();
        assert!((s.re - digital).abs() <= 1e-6 * digital.abs().max(1.0));
        assert!(s.im.abs() <= 1e-9);
    }
}

#[test]
fn uplink_downlink_round_trip_is_mean() {
    let mut r = rng(12);
    let n = 5;
    let thetas: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..64).map(|_| r.gen_range(-0.5..0.5)).collect())
        .collect();
    let (rx, channels) = perfect_uplink(&thetas, &mut r);
    for ch in &channels {
        let out = downlink_recover(
            &rx,
            n,
            ch,
            &ChannelEstimate::exact(ch),
            &NoiseSpec::noiseless(),
            f64::INFINITY,
            &mut r,
        )
        .unwrap();
        for (j, v) in out.values.iter().enumerate() {
            let mean = thetas.iter().map(|t| t[j]).sum::<f64>() / n as f64;
            assert!((v - mean).abs() <= 1e-6 * mean.abs().max(1e-3));
        }
    }
}

proptest! {
    #[test]
    fn superposition_is_linear(seed in 0u64..10_000, alpha in -3.0f64..3.0, n in 1usize..6) {
        let mut r = rng(seed);
        let len = 16;
        let gen_signal = |r: &mut ChaCha8Rng| -> Vec<Complex64> {
            (0..len).map(|_| Complex64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))).collect()
        };
        let xs: Vec<Vec<Complex64>> = (0..n).map(|_| gen_signal(&mut r)).collect();
        let ys: Vec<Vec<Complex64>> = (0..n).map(|_| gen_signal(&mut r)).collect();
        let channels: Vec<ChannelState> = (0..n).map(|_| sample_channel(&mut r)).collect();
        let combined: Vec<Vec<Complex64>> = xs.iter().zip(&ys)
            .map(|(x, y)| x.iter().zip(y).map(|(a, b)| a * alpha + b).collect())
            .collect();
        let quiet = NoiseSpec::noiseless();
        let rx = ota_superpose(&xs, &channels, &quiet, &mut r).unwrap();
        let ry = ota_superpose(&ys, &channels, &quiet, &mut r).unwrap();
        let rc = ota_superpose(&combined, &channels, &quiet, &mut r).unwrap();
        for j in 0..len {
            let expected = rx.samples[j] * alpha + ry.samples[j];
            prop_assert!((rc.samples[j] - expected).norm() <= 1e-9 * expected.norm().max(1.0));
        }
    }
}

#[test]
fn exhaustive_four_by_eight_qam_mismatch() {
    let (a, b) = exhaustive_code_pairs(4, 8).unwrap();
    assert_eq!(a.len(), 16 * 256);
    let report = qam_superposition_demo(&a, &b).unwrap();
    // 4064 of 4096 pairs decode wrongly; frozen from an independent
    // brute-force slicer over the 256-point constellation.
    assert_eq!(report.mismatch_fraction, 4064.0 / 4096.0);
    assert_eq!(report.analog_mismatch_fraction, 0.0);
    assert!(report.mismatch_fraction > report.analog_mismatch_fraction);
    assert!(report.zero_off_origin);
}

#[test]
fn random_mixed_precision_qam_mostly_wrong() {
    let mut r = rng(13);
    let xa: Vec<f64> = (0..2000).map(|_| r.gen_range(-1.0..1.0)).collect();
    let xb: Vec<f64> = (0..2000).map(|_| r.gen_range(-1.0..1.0)).collect();
    let a = quantize_tensor(&xa, &QuantSpec::fixed(4).unwrap()).unwrap();
    let b = quantize_tensor(&xb, &QuantSpec::fixed(8).unwrap()).unwrap();
    let report = qam_superposition_demo(&a, &b).unwrap();
    assert!(report.mismatch_fraction > 0.5, "{}", report.mismatch_fraction);
    assert_eq!(report.analog_mismatch_fraction, 0.0);
}

#[test]
fn qam_demo_zero_tensors() {
    let a = quantize_tensor(&[0.0; 8], &QuantSpec::fixed(4).unwrap()).unwrap();
    let b = quantize_tensor(&[0.0; 8], &QuantSpec::fixed(8).unwrap()).unwrap();
    let report = qam_superposition_demo(&a, &b).unwrap();
    assert_eq!(report.mismatch_fraction, 0.0);
    assert_eq!(report.analog_mismatch_fraction, 0.0);
    assert!(report.zero_off_origin);
}
