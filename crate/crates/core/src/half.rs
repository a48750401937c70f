//! Software IEEE 754 binary16 ("half") emulation.
//!
//! Conversions are bit-exact: `f32 -> f16` rounds to nearest-even with
//! overflow going to a signed infinity, and `f16 -> f32` widens losslessly
//! (binary16 is a subset of binary32). The F16 tensor path and the AMP
//! cast policy both reduce to these two functions, so they carry the
//! whole precision contract of the half-precision mode.

use std::fmt;

/// A binary16 value stored as its raw bit pattern
/// (1 sign, 5 exponent, 10 mantissa).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Half(u16);

impl Half {
    pub const ZERO: Half = Half(0x0000);
    pub const ONE: Half = Half(0x3C00);
    pub const INFINITY: Half = Half(0x7C00);
    pub const NEG_INFINITY: Half = Half(0xFC00);
    pub const NAN: Half = Half(0x7E00);
    /// Largest finite value, 65504.0.
    pub const MAX: Half = Half(0x7BFF);
    /// Smallest positive subnormal, 2^-24.
    pub const MIN_POSITIVE_SUBNORMAL: Half = Half(0x0001);

    #[inline]
    pub const fn from_bits(bits: u16) -> Half {
        Half(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    #[inline]
    pub fn from_f32(x: f32) -> Half {
        Half(f32_to_f16_bits(x))
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        f16_bits_to_f32(self.0)
    }

    #[inline]
    pub const fn is_nan(self) -> bool {
        self.0 & 0x7FFF > 0x7C00
    }

    #[inline]
    pub const fn is_infinite(self) -> bool {
        self.0 & 0x7FFF == 0x7C00
    }
}

impl fmt::Debug for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half(0x{:04X} = {})", self.0, self.to_f32())
    }
}

/// Converts an `f32` to the nearest binary16 bit pattern, rounding ties
/// to even. Values past the last rounding boundary (>= 65520) become a
/// signed infinity; NaN becomes a quiet NaN preserving the payload top
/// bits; f32 subnormals are far below the subnormal range of binary16
/// and flush to signed zero.
pub fn f32_to_f16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let mut man = bits & 0x007F_FFFF;

    if exp == 0xFF {
        return if man == 0 {
            sign | 0x7C00 // infinity
        } else {
            // quiet NaN; keep the top payload bits, force a nonzero mantissa
            sign | 0x7C00 | 0x0200 | ((man >> 13) as u16 & 0x03FF)
        };
    }

    if exp == 0 {
        // f32 subnormal: magnitude < 2^-126, below half the smallest
        // binary16 subnormal (2^-25), so it rounds to zero.
        return sign;
    }
    man |= 0x0080_0000; // implicit leading one

    // biased binary16 exponent for the normalized significand
    let half_exp = exp - 127 + 15;

    if half_exp >= 31 {
        return sign | 0x7C00;
    }

    if half_exp <= 0 {
        // subnormal target: shift the 24-bit significand down so the value
        // becomes m * 2^-24, rounding the dropped bits to nearest-even
        if half_exp < -10 {
            return sign; // below half of the smallest subnormal
        }
        let shift = (14 - half_exp) as u32;
        let m = man >> shift;
        let rem = man & ((1u32 << shift) - 1);
        let halfway = 1u32 << (shift - 1);
        let mut m = m as u16;
        if rem > halfway || (rem == halfway && (m & 1) == 1) {
            // may carry into the exponent field; that is exactly the
            // smallest normal, which is the correct rounding
            m += 1;
        }
        return sign | m;
    }

    // normal target: drop 13 mantissa bits with round-to-nearest-even
    let mut half = ((half_exp as u16) << 10) | ((man >> 13) as u16 & 0x03FF);
    let rem = man & 0x1FFF;
    if rem > 0x1000 || (rem == 0x1000 && (half & 1) == 1) {
        // carry may ripple into the exponent; if it reaches 0x7C00 the
        // value overflowed to infinity, which is the correct result
        half += 1;
    }
    sign | half
}

/// Widens a binary16 bit pattern to `f32` exactly.
pub fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h as u32) & 0x8000) << 16;
    let exp = ((h >> 10) & 0x1F) as u32;
    let man = (h & 0x03FF) as u32;

    let bits = if exp == 0 {
        if man == 0 {
            sign // signed zero
        } else {
            // subnormal: renormalize into an f32 normal
            let mut e = -1i32;
            let mut m = man;
            while m & 0x0400 == 0 {
                m <<= 1;
                e -= 1;
            }
            m &= 0x03FF;
            let f32_exp = (127 - 15 + e + 1) as u32;
            sign | (f32_exp << 23) | (m << 13)
        }
    } else if exp == 0x1F {
        if man == 0 {
            sign | 0x7F80_0000 // infinity
        } else {
            sign | 0x7F80_0000 | (man << 13) // NaN, payload preserved
        }
    } else {
        sign | ((exp + 127 - 15) << 23) | (man << 13)
    };
    f32::from_bits(bits)
}

/// Projects an `f32` onto the binary16 grid (narrow then widen).
///
/// This is the elementwise kernel of the F16 tensor cast and the AMP
/// input/weight round-trip.
#[inline]
pub fn round_to_f16(x: f32) -> f32 {
    f16_bits_to_f32(f32_to_f16_bits(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent widening built only from the binary16 field layout,
    /// evaluated in f64. Used to cross-check `f16_bits_to_f32`.
    fn widen_oracle(h: u16) -> f32 {
        let sign = if h & 0x8000 != 0 { -1.0f64 } else { 1.0 };
        let e = ((h >> 10) & 0x1F) as i32;
        let m = (h & 0x03FF) as f64;
        let v = if e == 0 {
            m * 2f64.powi(-24)
        } else if e == 0x1F {
            if m == 0.0 {
                f64::INFINITY
            } else {
                f64::NAN
            }
        } else {
            (1024.0 + m) * 2f64.powi(e - 25)
        };
        (sign * v) as f32
    }

    #[test]
    fn known_patterns() {
        assert_eq!(f32_to_f16_bits(0.0), 0x0000);
        assert_eq!(f32_to_f16_bits(-0.0), 0x8000);
        assert_eq!(f32_to_f16_bits(1.0), 0x3C00);
        assert_eq!(f32_to_f16_bits(-2.0), 0xC000);
        assert_eq!(f32_to_f16_bits(65504.0), 0x7BFF);
        assert_eq!(f32_to_f16_bits(f32::INFINITY), 0x7C00);
        assert_eq!(f32_to_f16_bits(f32::NEG_INFINITY), 0xFC00);
        assert!(Half::from_f32(f32::NAN).is_nan());
    }

    #[test]
    fn overflow_boundary() {
        // 65520 is exactly halfway between 65504 and the (virtual) 65536;
        // ties-to-even picks the even mantissa, i.e. infinity.
        assert_eq!(f32_to_f16_bits(65520.0), 0x7C00);
        assert_eq!(f32_to_f16_bits(65519.996), 0x7BFF);
        assert_eq!(f32_to_f16_bits(-65520.0), 0xFC00);
    }

    #[test]
    fn tenth_rounds_to_2e66() {
        assert_eq!(f32_to_f16_bits(0.1), 0x2E66);
        assert_eq!(f16_bits_to_f32(0x2E66), 0.099_975_586);
        assert_eq!(f16_bits_to_f32(0x2E66) as f64, 0.0999755859375);
    }

    #[test]
    fn subnormals() {
        assert_eq!(f16_bits_to_f32(0x0001), 2f32.powi(-24));
        assert_eq!(f32_to_f16_bits(2f32.powi(-24)), 0x0001);
        // exactly half of the smallest subnormal rounds to even (zero)
        assert_eq!(f32_to_f16_bits(2f32.powi(-25)), 0x0000);
        // just above half rounds up
        assert_eq!(f32_to_f16_bits(2f32.powi(-25) * 1.0001), 0x0001);
        // max subnormal and the carry into the smallest normal
        assert_eq!(f16_bits_to_f32(0x03FF), 1023.0 * 2f32.powi(-24));
        assert_eq!(f32_to_f16_bits(2f32.powi(-14)), 0x0400);
    }

    #[test]
    fn infinities_widen_with_sign() {
        assert_eq!(f16_bits_to_f32(0x7C00), f32::INFINITY);
        assert_eq!(f16_bits_to_f32(0xFC00), f32::NEG_INFINITY);
    }

    #[test]
    fn exhaustive_round_trip_and_widen_oracle() {
        for bits in 0..=u16::MAX {
            let h = Half::from_bits(bits);
            if h.is_nan() {
                assert!(h.to_f32().is_nan());
                continue;
            }
            let widened = h.to_f32();
            assert_eq!(
                widened.to_bits(),
                widen_oracle(bits).to_bits(),
                "widen disagrees with field-layout oracle at 0x{bits:04X}"
            );
            assert_eq!(
                f32_to_f16_bits(widened),
                bits,
                "round trip not identity at 0x{bits:04X}"
            );
        }
    }

    #[test]
    fn rounding_is_monotone() {
        let mut prev = f32::NEG_INFINITY;
        let mut x = -70000.0f32;
        while x < 70000.0 {
            let r = round_to_f16(x);
            assert!(r >= prev, "monotonicity violated at {x}");
            prev = r;
            x += 1.377;
        }
    }
}
