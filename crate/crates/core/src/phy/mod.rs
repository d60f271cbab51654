//! Complex-baseband physical layer.
//!
//! One baseband sample carries one model parameter. The passband carrier of
//! amplitude modulation cancels under coherent demodulation, so it is never
//! sampled. Channels are Rayleigh block fading: one complex coefficient per
//! client per round, shared by uplink and downlink.

mod qam;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::quant::{QuantizedTensor, dequantize};

pub use qam::{QamReport, exhaustive_code_pairs, qam_superposition_demo};

/// Default cap on the magnitude of the channel-inversion gain.
pub const DEFAULT_GAIN_CAP: f64 = 10.0;
/// Default pilot length.
pub const DEFAULT_PILOT_LEN: usize = 8;

/// Block-fading coefficient of one client-server link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelState {
    pub h: Complex64,
}

impl ChannelState {
    pub fn new(h: Complex64) -> Self {
        Self { h }
    }

    pub fn identity() -> Self {
        Self::new(Complex64::new(1.0, 0.0))
    }
}

/// Draws `h = (a + ib)/√2` with `a, b ~ N(0, 1)`, so `E|h|² = 1`.
pub fn sample_channel<R: Rng + ?Sized>(rng: &mut R) -> ChannelState {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    ChannelState::new(Complex64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2)
}

/// Circularly-symmetric complex Gaussian sample with total variance `variance`.
pub fn complex_noise<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    if variance == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let sd = (variance / 2.0).sqrt();
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    Complex64::new(a * sd, b * sd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotSequence {
    symbols: Vec<Complex64>,
}

impl PilotSequence {
    pub fn new(symbols: Vec<Complex64>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Protocol("pilot sequence is empty".into()));
        }
        let pilot = Self { symbols };
        if pilot.energy() == 0.0 {
            return Err(Error::Protocol("pilot sequence has zero energy".into()));
        }
        Ok(pilot)
    }

    /// `len` unit-power symbols `1 + 0i`.
    pub fn unit(len: usize) -> Result<Self> {
        Self::new(vec![Complex64::new(1.0, 0.0); len])
    }

    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// `Σ |u_l|²`.
    pub fn energy(&self) -> f64 {
        self.symbols.iter().map(|u| u.norm_sqr()).sum()
    }

    pub fn symbol_power(&self) -> f64 {
        self.energy() / self.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelEstimate {
    pub h_hat: Complex64,
}

impl ChannelEstimate {
    /// Perfect channel knowledge.
    pub fn exact(channel: &ChannelState) -> Self {
        Self { h_hat: channel.h }
    }
}

/// Power that an SNR is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseReference {
    /// Unit reference power: `σ² = 10^(-snr/10)`.
    UnitSignal,
    /// Reference is the mean power of the noise-free samples being received.
    MeasuredSignal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    snr_db: f64,
    reference: NoiseReference,
}

impl NoiseSpec {
    pub fn new(snr_db: f64, reference: NoiseReference) -> Result<Self> {
        if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!("invalid SNR {snr_db} dB")));
        }
        Ok(Self { snr_db, reference })
    }

    pub fn noiseless() -> Self {
        Self {
            snr_db: f64::INFINITY,
            reference: NoiseReference::UnitSignal,
        }
    }

    pub fn snr_db(&self) -> f64 {
        self.snr_db
    }

    pub fn reference(&self) -> NoiseReference {
        self.reference
    }

    pub fn is_noiseless(&self) -> bool {
        self.snr_db == f64::INFINITY
    }

    /// `σ² = P_ref · 10^(-snr/10)`, where `P_ref` is 1 or `measured_power`.
    pub fn variance(&self, measured_power: f64) -> f64 {
        if self.is_noiseless() {
            return 0.0;
        }
        let p_ref = match self.reference {
            NoiseReference::UnitSignal => 1.0,
            NoiseReference::MeasuredSignal => measured_power,
        };
        p_ref * 10f64.powf(-self.snr_db / 10.0)
    }
}

/// Least-squares pilot estimate `ĥ = Σ y_l u_l* / Σ |u_l|²` with
/// `y_l = h u_l + n_l`. Pilot noise is referenced to the pilot symbol power.
pub fn estimate_channel<R: Rng + ?Sized>(
    channel: &ChannelState,
    pilot: &PilotSequence,
    noise: &NoiseSpec,
    rng: &mut R,
) -> ChannelEstimate {
    let variance = noise.variance(pilot.symbol_power());
    let correlation: Complex64 = pilot
        .symbols()
        .iter()
        .map(|u| {
            let y = channel.h * u + complex_noise(rng, variance);
            y * u.conj()
        })
        .sum();
    ChannelEstimate {
        h_hat: correlation / pilot.energy(),
    }
}

/// Channel-inversion gain after truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionGain {
    pub gain: Complex64,
    /// The cap was hit (including the `ĥ = 0` deep fade).
    pub clipped: bool,
}

/// `ĥ⁻¹`, or `cap · ĥ⁻¹/|ĥ⁻¹|` when `|ĥ⁻¹| > cap`. A zero estimate gets the
/// capped gain at phase 0.
pub fn inversion_gain(est: &ChannelEstimate, gain_cap: f64) -> InversionGain {
    if est.h_hat.norm_sqr() == 0.0 {
        return InversionGain {
            gain: Complex64::new(gain_cap, 0.0),
            clipped: true,
        };
    }
    let inv = est.h_hat.inv();
    let magnitude = inv.norm();
    if magnitude <= gain_cap {
        InversionGain {
            gain: inv,
            clipped: false,
        }
    } else {
        InversionGain {
            gain: inv * (gain_cap / magnitude),
            clipped: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Precoded {
    pub samples: Vec<Complex64>,
    pub clipped: bool,
}

/// Scales real amplitudes by the truncated inverse channel estimate.
pub fn precode(theta: &[f64], est: &ChannelEstimate, gain_cap: f64) -> Result<Precoded> {
    if !(est.h_hat.re.is_finite() && est.h_hat.im.is_finite()) {
        return Err(Error::Protocol("channel estimate is not finite".into()));
    }
    let g = inversion_gain(est, gain_cap);
    Ok(Precoded {
        samples: theta.iter().map(|&v| g.gain * v).collect(),
        clipped: g.clipped,
    })
}

/// Baseband amplitudes of a quantized tensor: its real values.
pub fn modulate_amplitude(t: &QuantizedTensor) -> Vec<f64> {
    dequantize(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedSignal {
    pub samples: Vec<Complex64>,
}

impl ReceivedSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn real(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.re).collect()
    }
}

fn mean_power(samples: &[Complex64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64
}

/// `r[j] = Σ_i h_i x_i[j] + n[j]`, summed in ascending client order.
pub fn ota_superpose<R: Rng + ?Sized>(
    precoded: &[Vec<Complex64>],
    channels: &[ChannelState],
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<ReceivedSignal> {
    if precoded.is_empty() {
        return Err(Error::Protocol("no transmitters".into()));
    }
    if precoded.len() != channels.len() {
        return Err(Error::Protocol(format!(
            "{} transmissions but {} channels",
            precoded.len(),
            channels.len()
        )));
    }
    let len = precoded[0].len();
    if let Some(i) = precoded.iter().position(|x| x.len() != len) {
        return Err(Error::Protocol(format!(
            "client {i} sent {} samples, expected {len}",
            precoded[i].len()
        )));
    }
    let mut samples = vec![Complex64::new(0.0, 0.0); len];
    for (x, ch) in precoded.iter().zip(channels) {
        for (acc, v) in samples.iter_mut().zip(x) {
            *acc += ch.h * v;
        }
    }
    let variance = noise.variance(mean_power(&samples));
    if variance > 0.0 {
        for s in &mut samples {
            *s += complex_noise(rng, variance);
        }
    }
    Ok(ReceivedSignal { samples })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovered {
    pub values: Vec<f64>,
    pub clipped: bool,
}

/// Client side of the broadcast: receives `r_i = h r_s / N + n_i` and
/// returns `Re(g · r_i)`, `g` being the truncated inverse of the client's
/// channel estimate.
pub fn downlink_recover<R: Rng + ?Sized>(
    broadcast: &ReceivedSignal,
    n_clients: usize,
    channel: &ChannelState,
    est: &ChannelEstimate,
    noise: &NoiseSpec,
    gain_cap: f64,
    rng: &mut R,
) -> Result<Recovered> {
    if n_clients == 0 {
        return Err(Error::Protocol("downlink needs at least one client".into()));
    }
    let g = inversion_gain(est, gain_cap);
    let scale = channel.h / n_clients as f64;
    let received: Vec<Complex64> = broadcast.samples.iter().map(|s| scale * s).collect();
    let variance = noise.variance(mean_power(&received));
    let values = received
        .into_iter()
        .map(|r| (g.gain * (r + complex_noise(rng, variance))).re)
        .collect();
    Ok(Recovered {
        values,
        clipped: g.clipped,
    })
}
