//! Software minifloat codec.
//!
//! A layout is `1 sign + exp_bits + mant_bits`, exponent bias
//! `2^(exp_bits-1) - 1`, with gradual underflow. Two conventions exist:
//!
//! * IEEE-style: the all-ones exponent is reserved for Inf/NaN.
//! * Finite-only (`E4M3`): the all-ones exponent holds normal values and only
//!   the all-ones mantissa in it is NaN, giving a max of 448.
//!
//! Encoding is round-to-nearest, ties-to-even, and saturates at the largest
//! finite magnitude. No encoding ever produces Inf or NaN.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MiniFloatLayout {
    exp_bits: u32,
    mant_bits: u32,
    finite_only: bool,
}

/// Exponent of the leading bit of a positive, normal f64.
fn exponent_of(a: f64) -> i32 {
    ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

impl MiniFloatLayout {
    /// Layout for the given field widths. `E4M3` uses the finite-only
    /// convention; everything else is IEEE-style.
    pub fn new(exp_bits: u32, mant_bits: u32) -> Self {
        Self {
            exp_bits,
            mant_bits,
            finite_only: exp_bits == 4 && mant_bits == 3,
        }
    }

    pub fn exp_bits(&self) -> u32 {
        self.exp_bits
    }

    pub fn mant_bits(&self) -> u32 {
        self.mant_bits
    }

    pub fn bits(&self) -> u32 {
        1 + self.exp_bits + self.mant_bits
    }

    pub fn is_finite_only(&self) -> bool {
        self.finite_only
    }

    fn bias(&self) -> i32 {
        (1 << (self.exp_bits - 1)) - 1
    }

    fn min_normal_exp(&self) -> i32 {
        1 - self.bias()
    }

    fn max_exp_field(&self) -> u64 {
        let all_ones = (1u64 << self.exp_bits) - 1;
        if self.finite_only {
            all_ones
        } else {
            all_ones - 1
        }
    }

    fn max_mant_field(&self) -> u64 {
        let all_ones = (1u64 << self.mant_bits) - 1;
        if self.finite_only {
            all_ones - 1
        } else {
            all_ones
        }
    }

    /// Largest finite magnitude.
    pub fn max_finite(&self) -> f64 {
        let e = self.max_exp_field() as i32 - self.bias();
        let m = self.max_mant_field() as f64 / (1u64 << self.mant_bits) as f64;
        (1.0 + m) * 2f64.powi(e)
    }

    /// Smallest positive subnormal.
    pub fn min_positive(&self) -> f64 {
        2f64.powi(self.min_normal_exp() - self.mant_bits as i32)
    }

    /// Encodes a finite value. The caller guarantees `x.is_finite()`.
    pub fn encode(&self, x: f64) -> u64 {
        debug_assert!(x.is_finite());
        let sign = if x.is_sign_negative() && x != 0.0 {
            1u64 << (self.exp_bits + self.mant_bits)
        } else {
            0
        };
        let a = x.abs();
        if a == 0.0 {
            return 0;
        }
        let emin = self.min_normal_exp();
        let m = self.mant_bits as i32;
        let e = if a < 2f64.powi(emin) {
            emin
        } else {
            exponent_of(a)
        };
        let step = 2f64.powi(e - m);
        let q = ((a / step).round_ties_even() * step).min(self.max_finite());
        // Underflow to zero yields +0 so that zero has a single code.
        if q == 0.0 {
            return 0;
        }
        sign | self.pack_magnitude(q)
    }

    /// Packs a non-negative value already on the grid.
    fn pack_magnitude(&self, q: f64) -> u64 {
        if q == 0.0 {
            return 0;
        }
        let emin = self.min_normal_exp();
        let m = self.mant_bits as i32;
        if q < 2f64.powi(emin) {
            return (q / 2f64.powi(emin - m)) as u64;
        }
        let e = exponent_of(q);
        let mant = (q / 2f64.powi(e - m)) as u64 - (1u64 << self.mant_bits);
        let exp_field = (e + self.bias()) as u64;
        (exp_field << self.mant_bits) | mant
    }

    /// Decodes a code; `None` for Inf/NaN patterns or out-of-width codes.
    pub fn decode(&self, code: u64) -> Option<f64> {
        if code >> self.bits() != 0 {
            return None;
        }
        let mant_mask = (1u64 << self.mant_bits) - 1;
        let exp_mask = (1u64 << self.exp_bits) - 1;
        let mant = code & mant_mask;
        let exp_field = (code >> self.mant_bits) & exp_mask;
        let negative = (code >> (self.exp_bits + self.mant_bits)) & 1 == 1;

        if exp_field == exp_mask
            && (!self.finite_only || mant == mant_mask) {
                return None;
            }
        let m = self.mant_bits as i32;
        let magnitude = if exp_field == 0 {
            mant as f64 * 2f64.powi(self.min_normal_exp() - m)
        } else {
            let e = exp_field as i32 - self.bias();
            (1.0 + mant as f64 / (1u64 << self.mant_bits) as f64) * 2f64.powi(e)
        };
        Some(if negative { -magnitude } else { magnitude })
    }
}
