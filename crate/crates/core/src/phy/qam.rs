//! Digital square-QAM superposition versus analog amplitude superposition.
//!
//! A `b`-bit fixed-point code is offset to `u = code + 2^(b-1)`; the upper
//! `b/2` bits label the in-phase level and the lower `b/2` bits the
//! quadrature level. Labels are Gray codes of the level index `m`, and the
//! level amplitude is `2m - (M - 1)` for `M = 2^(b/2)` levels per axis.
//!
//! Two transmitters superpose their constellation points; the receiver
//! slices the sum against the wider constellation and reads back a code.
//! The reference is the true sum `dequantize(a) + dequantize(b)` quantized
//! at the wider width over the combined range `range(a) + range(b)`.
//! The analog path adds the amplitudes themselves, so it reproduces the
//! reference exactly when noiseless.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::quant::{QuantSpec, QuantizedTensor, dequantize, quantize_tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct QamReport {
    /// Spec the sums are expressed in.
    pub sum_spec: QuantSpec,
    /// Digitally superposed points, sliced and decoded to values.
    pub digital_sum_decoded: Vec<f64>,
    /// Reference: the quantized true sum.
    pub true_sum: Vec<f64>,
    /// Share of samples where the digital decode disagrees with the reference.
    pub mismatch_fraction: f64,
    /// Same share for the analog amplitude path.
    pub analog_mismatch_fraction: f64,
    /// Code 0 does not sit at the constellation origin (offset QAM), so
    /// even zero tensors do not superpose to zero.
    pub zero_off_origin: bool,
}

fn gray(m: u64) -> u64 {
    m ^ (m >> 1)
}

fn gray_inverse(mut g: u64) -> u64 {
    let mut m = g;
    while g > 0 {
        g >>= 1;
        m ^= g;
    }
    m
}

#[derive(Debug, Clone, Copy)]
struct Constellation {
    bits: u32,
    axis_bits: u32,
}

impl Constellation {
    fn for_spec(spec: &QuantSpec) -> Result<Self> {
        let bits = spec.bits();
        if !spec.is_fixed() || !bits.is_multiple_of(2) || bits > 16 {
            return Err(Error::Config(format!(
                "QAM demo needs an even fixed-point width of at most 16 bits, got {spec}"
            )));
        }
        Ok(Self {
            bits,
            axis_bits: bits / 2,
        })
    }

    fn levels(&self) -> u64 {
        1 << self.axis_bits
    }

    fn offset(&self) -> i64 {
        1 << (self.bits - 1)
    }

    fn amplitude(&self, label: u64) -> f64 {
        2.0 * gray_inverse(label) as f64 - (self.levels() - 1) as f64
    }

    fn map(&self, code: i64) -> Complex64 {
        let u = (code + self.offset()) as u64;
        let mask = self.levels() - 1;
        Complex64::new(
            self.amplitude(u >> self.axis_bits),
            self.amplitude(u & mask),
        )
    }

    fn slice_axis(&self, v: f64) -> u64 {
        let top = (self.levels() - 1) as f64;
        let idx = ((v + top) / 2.0).round().clamp(0.0, top) as u64;
        gray(idx)
    }

    fn slice(&self, point: Complex64) -> i64 {
        let u = (self.slice_axis(point.re) << self.axis_bits) | self.slice_axis(point.im);
        u as i64 - self.offset()
    }
}

/// Superposes `a` and `b` once as QAM symbols and once as analog amplitudes
/// and reports how often each path recovers the quantized true sum.
pub fn qam_superposition_demo(a: &QuantizedTensor, b: &QuantizedTensor) -> Result<QamReport> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let ca = Constellation::for_spec(a.spec())?;
    let cb = Constellation::for_spec(b.spec())?;
    let wide = if ca.bits >= cb.bits { ca } else { cb };

    let range = |t: &QuantizedTensor| t.spec().code_max() as f64 * t.scale();
    let sum_spec = QuantSpec::fixed(wide.bits)?.with_range(range(a) + range(b))?;

    let true_values: Vec<f64> = dequantize(a)
        .iter()
        .zip(dequantize(b))
        .map(|(x, y)| x + y)
        .collect();
    let reference = quantize_tensor(&true_values, &sum_spec)?;

    let digital_codes: Vec<i64> = a
        .codes()
        .iter()
        .zip(b.codes())
        .map(|(&x, &y)| wide.slice(ca.map(x) + cb.map(y)))
        .collect();
    let digital = QuantizedTensor::from_parts(
        digital_codes,
        reference.scale(),
        sum_spec,
        vec![a.len()],
    )?;

    // The analog path superposes real amplitudes over a unit channel.
    let analog_values: Vec<f64> = super::modulate_amplitude(a)
        .iter()
        .zip(super::modulate_amplitude(b))
        .map(|(x, y)| x + y)
        .collect();
    let analog = quantize_tensor(&analog_values, &sum_spec)?;

    let fraction = |t: &QuantizedTensor| {
        let wrong = t
            .codes()
            .iter()
            .zip(reference.codes())
            .filter(|(x, y)| x != y)
            .count();
        wrong as f64 / a.len() as f64
    };

    Ok(QamReport {
        sum_spec,
        digital_sum_decoded: dequantize(&digital),
        true_sum: dequantize(&reference),
        mismatch_fraction: fraction(&digital),
        analog_mismatch_fraction: fraction(&analog),
        zero_off_origin: ca.map(0) != Complex64::new(0.0, 0.0)
            || cb.map(0) != Complex64::new(0.0, 0.0),
    })
}

/// Every pair of codes of two fixed-point widths, both spanning `[-1, 1]`.
/// Element `i * 2^bits_b + j` pairs code `i` of `a` with code `j` of `b`.
pub fn exhaustive_code_pairs(bits_a: u32, bits_b: u32) -> Result<(QuantizedTensor, QuantizedTensor)> {
    let spec_a = QuantSpec::fixed(bits_a)?.with_range(1.0)?;
    let spec_b = QuantSpec::fixed(bits_b)?.with_range(1.0)?;
    let codes_a: Vec<i64> = (spec_a.code_min()..=spec_a.code_max()).collect();
    let codes_b: Vec<i64> = (spec_b.code_min()..=spec_b.code_max()).collect();
    let n = codes_a.len() * codes_b.len();
    let (mut left, mut right) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for &x in &codes_a {
        for &y in &codes_b {
            left.push(x);
            right.push(y);
        }
    }
    let scale = |s: &QuantSpec| 1.0 / s.code_max() as f64;
    Ok((
        QuantizedTensor::from_parts(left, scale(&spec_a), spec_a, vec![n])?,
        QuantizedTensor::from_parts(right, scale(&spec_b), spec_b, vec![n])?,
    ))
}
