//! Affine int8 quantization primitives.
//!
//! The mapping is `real ≈ scale * (q - zero_point)` with either one scale
//! per tensor or one per output channel. Rounding is half-to-even, the
//! same mode as the binary16 path, so a single rounding oracle covers
//! both precision-reduction routes.

use serde::{Deserialize, Serialize};

use crate::error::{EmberError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    PerTensor,
    PerChannel,
}

/// Scale/zero-point parameter set for an int8 tensor.
///
/// Symmetric params use the negation-closed range [-127, 127] with
/// zero_point = 0; asymmetric params use [-128, 127].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    /// One entry for per-tensor granularity, one per output channel
    /// (dimension 0 of the owning tensor) for per-channel.
    pub scales: Vec<f32>,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
    pub granularity: Granularity,
    pub symmetric: bool,
}

impl QuantParams {
    pub fn symmetric_per_tensor(scale: f32) -> QuantParams {
        QuantParams {
            scales: vec![scale],
            zero_point: 0,
            qmin: -127,
            qmax: 127,
            granularity: Granularity::PerTensor,
            symmetric: true,
        }
    }

    pub fn symmetric_per_channel(scales: Vec<f32>) -> QuantParams {
        QuantParams {
            scales,
            zero_point: 0,
            qmin: -127,
            qmax: 127,
            granularity: Granularity::PerChannel,
            symmetric: true,
        }
    }

    pub fn asymmetric_per_tensor(scale: f32, zero_point: i32) -> QuantParams {
        QuantParams {
            scales: vec![scale],
            zero_point,
            qmin: -128,
            qmax: 127,
            granularity: Granularity::PerTensor,
            symmetric: false,
        }
    }

    /// Scale for `channel`, which is only meaningful for per-channel
    /// granularity; per-tensor params ignore the index.
    #[inline]
    pub fn scale_for(&self, channel: usize) -> f32 {
        match self.granularity {
            Granularity::PerTensor => self.scales[0],
            Granularity::PerChannel => self.scales[channel],
        }
    }

    /// The real-valued clip range [s*(qmin-z), s*(qmax-z)] for `channel`.
    #[inline]
    pub fn clip_range(&self, channel: usize) -> (f32, f32) {
        let s = self.scale_for(channel);
        (
            s * (self.qmin - self.zero_point) as f32,
            s * (self.qmax - self.zero_point) as f32,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(EmberError::InvalidQuantParams("no scales".into()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(EmberError::InvalidQuantParams(
                "every scale must be positive and finite".into(),
            ));
        }
        if self.qmin >= self.qmax {
            return Err(EmberError::InvalidQuantParams(format!(
                "qmin {} must be below qmax {}",
                self.qmin, self.qmax
            )));
        }
        if self.zero_point < self.qmin || self.zero_point > self.qmax {
            return Err(EmberError::InvalidQuantParams(format!(
                "zero_point {} outside [{}, {}]",
                self.zero_point, self.qmin, self.qmax
            )));
        }
        if self.symmetric && self.zero_point != 0 {
            return Err(EmberError::InvalidQuantParams(
                "symmetric params require zero_point = 0".into(),
            ));
        }
        if self.granularity == Granularity::PerTensor && self.scales.len() != 1 {
            return Err(EmberError::InvalidQuantParams(
                "per-tensor params carry exactly one scale".into(),
            ));
        }
        Ok(())
    }
}

/// Counters for the lossy events of a quantizing cast.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SaturationCounter {
    /// Values clamped at qmin or qmax.
    pub clamped: usize,
    /// NaN inputs mapped to the zero point.
    pub nan_to_zero_point: usize,
}

/// Quantizes one scalar: clamp(round_half_even(x / s) + z, qmin, qmax).
///
/// Total by construction: NaN maps to the zero point (recorded in
/// `counter`), infinities clamp.
#[inline]
pub fn quantize(x: f32, p: &QuantParams, channel: usize, counter: &mut SaturationCounter) -> i8 {
    if x.is_nan() {
        counter.nan_to_zero_point += 1;
        return p.zero_point as i8;
    }
    let s = p.scale_for(channel);
    // f32 -> i64 `as` saturates, so infinities survive until the clamp
    let q = (x / s).round_ties_even() as i64 + p.zero_point as i64;
    let clamped = q.clamp(p.qmin as i64, p.qmax as i64);
    if clamped != q {
        counter.clamped += 1;
    }
    clamped as i8
}

/// Dequantizes one scalar: (q - z) * s.
#[inline]
pub fn dequantize(q: i8, p: &QuantParams, channel: usize) -> f32 {
    (q as i32 - p.zero_point) as f32 * p.scale_for(channel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count() -> SaturationCounter {
        SaturationCounter::default()
    }

    #[test]
    fn zero_maps_to_zero_point() {
        let p = QuantParams::symmetric_per_tensor(0.5);
        assert_eq!(quantize(0.0, &p, 0, &mut count()), 0);
        let p = QuantParams::asymmetric_per_tensor(0.5, 10);
        assert_eq!(quantize(0.0, &p, 0, &mut count()), 10);
        assert_eq!(dequantize(10, &p, 0), 0.0);
    }

    #[test]
    fn half_even_rounding() {
        // 1.25 / 0.1 = 12.5 rounds to the even 12
        let p = QuantParams::symmetric_per_tensor(0.1);
        assert_eq!(quantize(1.25, &p, 0, &mut count()), 12);
        // 1.35 / 0.1 = 13.5 rounds to 14
        assert_eq!(quantize(1.35, &p, 0, &mut count()), 14);
    }

    #[test]
    fn clamps_at_range_ends() {
        let p = QuantParams::symmetric_per_tensor(0.1);
        let mut c = count();
        assert_eq!(quantize(100.0, &p, 0, &mut c), 127);
        assert_eq!(quantize(-100.0, &p, 0, &mut c), -127);
        assert_eq!(quantize(f32::INFINITY, &p, 0, &mut c), 127);
        assert_eq!(c.clamped, 3);
    }

    #[test]
    fn nan_goes_to_zero_point_and_counts() {
        let p = QuantParams::asymmetric_per_tensor(0.1, -3);
        let mut c = count();
        assert_eq!(quantize(f32::NAN, &p, 0, &mut c), -3);
        assert_eq!(c.nan_to_zero_point, 1);
        assert_eq!(c.clamped, 0);
    }

    #[test]
    fn dequantize_examples() {
        let p = QuantParams::symmetric_per_tensor(0.1);
        assert!((dequantize(12, &p, 0) - 1.2).abs() < 1e-7);
    }

    #[test]
    fn round_trip_error_bound() {
        let p = QuantParams::symmetric_per_tensor(0.07);
        let (lo, hi) = p.clip_range(0);
        let mut x = lo;
        while x <= hi {
            let q = quantize(x, &p, 0, &mut count());
            let back = dequantize(q, &p, 0);
            assert!(
                (back - x).abs() <= 0.07 / 2.0 + 1e-6,
                "round-trip error above s/2 at {x}"
            );
            x += 0.013;
        }
    }

    #[test]
    fn per_channel_scale_lookup() {
        let p = QuantParams::symmetric_per_channel(vec![0.1, 1.0]);
        assert_eq!(quantize(1.0, &p, 0, &mut count()), 10);
        assert_eq!(quantize(1.0, &p, 1, &mut count()), 1);
    }

    #[test]
    fn validation_rejects_bad_params() {
        let mut p = QuantParams::symmetric_per_tensor(1.0);
        p.scales[0] = 0.0;
        assert!(p.validate().is_err());
        let mut p = QuantParams::symmetric_per_tensor(1.0);
        p.zero_point = 5;
        assert!(p.validate().is_err());
        let mut p = QuantParams::asymmetric_per_tensor(1.0, 0);
        p.qmin = 127;
        assert!(p.validate().is_err());
    }
}
