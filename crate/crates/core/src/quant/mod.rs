//! Mixed-precision quantization.
//!
//! Two formats share one tensor type:
//!
//! * fixed point: signed integer codes in `[-2^(b-1), 2^(b-1)-1]` times a
//!   per-tensor scale, rounded to nearest with ties to even;
//! * minifloat: sign/exponent/mantissa bit patterns (see [`minifloat`]),
//!   scale fixed at 1.
//!
//! Widths are restricted to the level list `{4, 6, 8, 12, 16, 24, 32}` and
//! minifloat needs at least 8 bits.

pub mod minifloat;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
pub use minifloat::MiniFloatLayout;

/// Bit widths a client may run at.
pub const LEVELS: [u32; 7] = [32, 24, 16, 12, 8, 6, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    FixedPoint,
    MiniFloat { exp_bits: u32, mant_bits: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scaling {
    /// `scale = max|x| / (2^(b-1) - 1)`, recomputed for every tensor.
    PerTensorDynamic,
    /// `scale = bound / (2^(b-1) - 1)`; values beyond the bound clamp.
    FixedRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    bits: u32,
    format: Format,
    scaling: Scaling,
}

fn check_level(bits: u32) -> Result<()> {
    if LEVELS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "unsupported bit width {bits}; allowed levels are {LEVELS:?}"
        )))
    }
}

/// Minifloat layout used for a width when float format is requested.
pub fn default_layout(bits: u32) -> Option<(u32, u32)> {
    match bits {
        8 => Some((4, 3)),
        12 => Some((5, 6)),
        16 => Some((5, 10)),
        24 => Some((8, 15)),
        32 => Some((8, 23)),
        _ => None,
    }
}

/// Picks the format for a width: fixed point below 8 bits, otherwise the
/// designated minifloat layout when `prefer_float` is set.
pub fn make_spec(bits: u32, prefer_float: bool) -> Result<QuantSpec> {
    check_level(bits)?;
    match default_layout(bits) {
        Some((exp_bits, mant_bits)) if prefer_float => QuantSpec::mini_float(exp_bits, mant_bits),
        _ => QuantSpec::fixed(bits),
    }
}

impl QuantSpec {
    pub fn fixed(bits: u32) -> Result<Self> {
        check_level(bits)?;
        Ok(Self {
            bits,
            format: Format::FixedPoint,
            scaling: Scaling::PerTensorDynamic,
        })
    }

    pub fn mini_float(exp_bits: u32, mant_bits: u32) -> Result<Self> {
        let bits = 1 + exp_bits + mant_bits;
        check_level(bits)?;
        if bits < 8 {
            return Err(Error::Config(format!(
                "minifloat needs at least 8 bits, got {bits}"
            )));
        }
        if !(2..=8).contains(&exp_bits) || !(1..=23).contains(&mant_bits) {
            return Err(Error::Config(format!(
                "unsupported minifloat layout e{exp_bits}m{mant_bits}"
            )));
        }
        Ok(Self {
            bits,
            format: Format::MiniFloat {
                exp_bits,
                mant_bits,
            },
            scaling: Scaling::PerTensorDynamic,
        })
    }

    /// Same format with a fixed quantization range. Only meaningful for
    /// fixed point; minifloat ignores scaling.
    pub fn with_range(mut self, bound: f64) -> Result<Self> {
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::Config(format!(
                "fixed range bound must be positive and finite, got {bound}"
            )));
        }
        self.scaling = Scaling::FixedRange(bound);
        Ok(self)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn format(&self) -> Format {
        self.format
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self.format, Format::FixedPoint)
    }

    pub fn layout(&self) -> Option<MiniFloatLayout> {
        match self.format {
            Format::MiniFloat {
                exp_bits,
                mant_bits,
            } => Some(MiniFloatLayout::new(exp_bits, mant_bits)),
            Format::FixedPoint => None,
        }
    }

    /// Largest positive fixed-point code.
    pub fn code_max(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    /// Smallest fixed-point code.
    pub fn code_min(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    /// Whether `code` is a valid finite code under this spec.
    pub fn is_valid_code(&self, code: i64) -> bool {
        match self.layout() {
            None => (self.code_min()..=self.code_max()).contains(&code),
            Some(layout) => code >= 0 && layout.decode(code as u64).is_some(),
        }
    }
}

impl fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.format {
            Format::FixedPoint => write!(f, "fx{}", self.bits)?,
            Format::MiniFloat {
                exp_bits,
                mant_bits,
            } => write!(f, "mf{}e{}m{}", self.bits, exp_bits, mant_bits)?,
        }
        if let Scaling::FixedRange(bound) = self.scaling {
            write!(f, "@{bound:?}")?;
        }
        Ok(())
    }
}

impl FromStr for QuantSpec {
    type Err = Error;

    /// Grammar: `fx<bits>` or `mf<bits>e<exp>m<mant>`, optionally followed
    /// by `@<bound>` for a fixed range. Case-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse quantization spec {s:?}"));
        let lower = s.trim().to_ascii_lowercase();
        let (body, range) = match lower.split_once('@') {
            Some((b, r)) => (b, Some(r.parse::<f64>().map_err(|_| bad())?)),
            None => (lower.as_str(), None),
        };
        let spec = if let Some(rest) = body.strip_prefix("fx") {
            QuantSpec::fixed(rest.parse().map_err(|_| bad())?)?
        } else if let Some(rest) = body.strip_prefix("mf") {
            let (bits, rest) = rest.split_once('e').ok_or_else(bad)?;
            let (exp_bits, mant_bits) = rest.split_once('m').ok_or_else(bad)?;
            let bits: u32 = bits.parse().map_err(|_| bad())?;
            let spec = QuantSpec::mini_float(
                exp_bits.parse().map_err(|_| bad())?,
                mant_bits.parse().map_err(|_| bad())?,
            )?;
            if spec.bits != bits {
                return Err(Error::Config(format!(
                    "minifloat layout in {s:?} does not add up to {bits} bits"
                )));
            }
            spec
        } else {
            return Err(bad());
        };
        match range {
            Some(bound) => spec.with_range(bound),
            None => Ok(spec),
        }
    }
}

/// A parameter tensor held as integer codes plus a dequantization scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<i64>,
    scale: f64,
    spec: QuantSpec,
    shape: Vec<usize>,
}

impl QuantizedTensor {
    /// Builds a tensor from raw parts, checking every invariant.
    pub fn from_parts(codes: Vec<i64>, scale: f64, spec: QuantSpec, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != codes.len() {
            return Err(Error::Dimension {
                expected: shape.iter().product(),
                actual: codes.len(),
            });
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Validation(format!("scale must be positive, got {scale}")));
        }
        if !spec.is_fixed() && scale != 1.0 {
            return Err(Error::Validation("minifloat tensors carry scale 1".into()));
        }
        if let Some(i) = codes.iter().position(|&c| !spec.is_valid_code(c)) {
            return Err(Error::Validation(format!(
                "code {} at index {i} is not representable as {spec}",
                codes[i]
            )));
        }
        Ok(Self {
            codes,
            scale,
            spec,
            shape,
        })
    }

    pub fn codes(&self) -> &[i64] {
        &self.codes
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.codes.len() {
            return Err(Error::Dimension {
                expected: self.codes.len(),
                actual: shape.iter().product(),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Round-to-nearest quantization of `x` under `spec`.
pub fn quantize_tensor(x: &[f64], spec: &QuantSpec) -> Result<QuantizedTensor> {
    if x.is_empty() {
        return Err(Error::Validation("cannot quantize an empty tensor".into()));
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericInput { index });
    }
    let (codes, scale) = match spec.layout() {
        Some(layout) => (x.iter().map(|&v| layout.encode(v) as i64).collect(), 1.0),
        None => {
            let qmax = spec.code_max();
            let scale = match spec.scaling {
                Scaling::FixedRange(bound) => bound / qmax as f64,
                Scaling::PerTensorDynamic => {
                    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    if peak == 0.0 { 1.0 } else { peak / qmax as f64 }
                }
            };
            let (lo, hi) = (spec.code_min() as f64, qmax as f64);
            let codes = x
                .iter()
                .map(|&v| (v / scale).round_ties_even().clamp(lo, hi) as i64)
                .collect();
            (codes, scale)
        }
    };
    Ok(QuantizedTensor {
        shape: vec![x.len()],
        codes,
        scale,
        spec: *spec,
    })
}

/// Real values represented by `t`.
pub fn dequantize(t: &QuantizedTensor) -> Vec<f64> {
    match t.spec.layout() {
        None => t.codes.iter().map(|&c| c as f64 * t.scale).collect(),
        Some(layout) => t
            .codes
            .iter()
            .map(|&c| layout.decode(c as u64).expect("validated minifloat code"))
            .collect(),
    }
}

/// Converts `t` to another spec through its real values; keeps the shape.
pub fn requantize(t: &QuantizedTensor, target: &QuantSpec) -> Result<QuantizedTensor> {
    let out = quantize_tensor(&dequantize(t), target)?;
    out.reshape(t.shape.clone())
}
