//! Render-target storage formats and gradient error metrics.

use core::fmt;
use core::str::FromStr;

use half::f16;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageFormat {
    Float32,
    Float16,
    Unorm16,
    Unorm8,
}

impl StorageFormat {
    pub const ALL: [StorageFormat; 4] = [Self::Float32, Self::Float16, Self::Unorm16, Self::Unorm8];

    pub fn is_unorm(self) -> bool {
        matches!(self, Self::Unorm16 | Self::Unorm8)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Float32 => "float32",
            Self::Float16 => "float16",
            Self::Unorm16 => "unorm16",
            Self::Unorm8 => "unorm8",
        }
    }

    /// Largest representable unorm code, `2^N - 1`.
    pub fn unorm_max(self) -> Option<f64> {
        match self {
            Self::Unorm16 => Some(65535.0),
            Self::Unorm8 => Some(255.0),
            _ => None,
        }
    }

    /// Round-trips `value` through the storage format.
    ///
    /// Float formats let NaN through; unorm formats saturate to `[0, 1]` and
    /// map NaN to 0.
    pub fn quantize(self, value: f64) -> f64 {
        self.quantize_flagged(value).0
    }

    /// Like [`StorageFormat::quantize`], also reporting whether a NaN was
    /// replaced.
    pub fn quantize_flagged(self, value: f64) -> (f64, bool) {
        match self {
            Self::Float32 => (value, false),
            Self::Float16 => (f64_to_f16(value).to_f64(), false),
            Self::Unorm16 | Self::Unorm8 => {
                if value.is_nan() {
                    return (0.0, true);
                }
                let n = self.unorm_max().unwrap_or(1.0);
                (libm::round(value.clamp(0.0, 1.0) * n) / n, false)
            }
        }
    }
}

/// Correctly rounded f64 -> f16.
///
/// `f16::from_f64` discards the low mantissa word before its sticky test, so
/// values just above a tie round down. Rounding to odd into f32 keeps the
/// sticky information (24 >= 11 + 2 bits) and the final f32 -> f16 step is
/// then exact round-to-nearest-even.
pub fn f64_to_f16(value: f64) -> f16 {
    let r = value as f32;
    let r = if r.is_finite() && r as f64 != value && r.to_bits() & 1 == 0 {
        let bits = r.to_bits();
        f32::from_bits(if value.abs() > (r as f64).abs() { bits + 1 } else { bits - 1 })
    } else {
        r
    };
    f16::from_f32(r)
}

impl fmt::Display for StorageFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFormatError;

impl fmt::Display for ParseFormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("expected one of f32, f16, unorm16, unorm8")
    }
}

impl FromStr for StorageFormat {
    type Err = ParseFormatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "float32" => Ok(Self::Float32),
            "f16" | "float16" => Ok(Self::Float16),
            "unorm16" => Ok(Self::Unorm16),
            "unorm8" => Ok(Self::Unorm8),
            _ => Err(ParseFormatError),
        }
    }
}

/// Magnitude bins of the mean relative error, by reference magnitude:
/// `[10, inf)`, `[0.1, 10)`, `[1e-3, 0.1)`.
pub const MRE_BINS: [(f64, f64); 3] = [(10.0, f64::INFINITY), (0.1, 10.0), (1e-3, 0.1)];

pub const MRE_BIN_LABELS: [&str; 3] = ["[10, inf)", "[0.1, 10)", "[1e-3, 0.1)"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorReport {
    pub rmse: f64,
    /// `None` marks an empty bin.
    pub mre: [Option<f64>; 3],
    pub bin_counts: [usize; 3],
    pub scalars: usize,
}

/// RMSE over all scalars and binned mean relative error of `test` against
/// `reference`.
pub fn gradient_error_report(reference: &[f64], test: &[f64]) -> ErrorReport {
    assert_eq!(reference.len(), test.len(), "buffers must have the same layout");
    let mut sq = 0.0;
    let mut rel = [0.0; 3];
    let mut counts = [0usize; 3];
    for (&r, &t) in reference.iter().zip(test) {
        let diff = t - r;
        sq += diff * diff;
        let mag = r.abs();
        if let Some(bin) = MRE_BINS.iter().position(|&(lo, hi)| mag >= lo && mag < hi) {
            rel[bin] += diff.abs() / mag;
            counts[bin] += 1;
        }
    }
    let n = reference.len();
    let rmse = if n == 0 { 0.0 } else { libm::sqrt(sq / n as f64) };
    let mut mre = [None; 3];
    for b in 0..3 {
        if counts[b] > 0 {
            mre[b] = Some(rel[b] / counts[b] as f64);
        }
    }
    ErrorReport { rmse, mre, bin_counts: counts, scalars: n }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unorm8_steps() {
        assert_eq!(StorageFormat::Unorm8.quantize(0.4), 102.0 / 255.0);
        assert_eq!(StorageFormat::Unorm8.quantize(0.5), 128.0 / 255.0);
        assert_eq!(StorageFormat::Unorm8.quantize(1.7), 1.0);
        assert_eq!(StorageFormat::Unorm8.quantize(-0.2), 0.0);
        assert_eq!(StorageFormat::Unorm8.quantize_flagged(f64::NAN), (0.0, true));
    }

    #[test]
    fn float16_known_value() {
        assert_eq!(StorageFormat::Float16.quantize(0.1), 0.0999755859375);
        assert!(StorageFormat::Float16.quantize(f64::NAN).is_nan());
    }

    #[test]
    fn float32_is_identity() {
        assert_eq!(StorageFormat::Float32.quantize(0.1), 0.1);
        assert_eq!(StorageFormat::Float32.quantize(-3.5), -3.5);
    }

    #[test]
    fn parse_names() {
        assert_eq!("f16".parse(), Ok(StorageFormat::Float16));
        assert_eq!("unorm8".parse(), Ok(StorageFormat::Unorm8));
        assert!("bf16".parse::<StorageFormat>().is_err());
    }

    #[test]
    fn identical_buffers_have_zero_error() {
        let r = [100.0, 1.0, 0.01, 0.0];
        let e = gradient_error_report(&r, &r);
        assert_eq!(e.rmse, 0.0);
        assert_eq!(e.mre, [Some(0.0); 3]);
    }

    #[test]
    fn binned_relative_error() {
        let e = gradient_error_report(&[100.0, 1.0, 0.01], &[90.0, 1.1, 0.02]);
        let m = e.mre.map(|v| v.unwrap());
        assert!((m[0] - 0.1).abs() < 1e-12);
        assert!((m[1] - 0.1).abs() < 1e-12);
        assert!((m[2] - 1.0).abs() < 1e-12);
        let expect = libm::sqrt((100.0 + 0.01 + 0.0001) / 3.0);
        assert!((e.rmse - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_bin_is_absent() {
        let e = gradient_error_report(&[1.0, 1e-5], &[1.5, 0.0]);
        assert_eq!(e.mre[0], None);
        assert_eq!(e.mre[2], None);
        assert_eq!(e.bin_counts, [0, 1, 0]);
    }
}
