//! Signed power-of-two snapping.

use crate::quant::Pow2Code;

/// Default exponent field width; with the reserved zero code this gives 15 exponent levels.
pub const DEFAULT_EXPONENT_BITS: u8 = 4;

/// Largest exponent whose power is a finite f32.
const MAX_EXPONENT: i32 = 127;

/// `round(log2(mag))` with ties away from zero, computed exactly.
///
/// Writing `mag = m * 2^e` with `m` in `[1, 2)`, the rounded logarithm is `e + 1`
/// iff `m >= sqrt(2)`, i.e. `m * m >= 2`. `m` has at most 24 significant bits so
/// the square is exact in f64, and an f32 is never exactly `sqrt(2) * 2^e`.
pub fn round_log2(mag: f32) -> i32 {
    debug_assert!(mag > 0.0 && mag.is_finite());
    let wide = mag as f64;
    let bits = wide.to_bits();
    let e = ((bits >> 52) & 0x7ff) as i32 - 1023;
    let m = f64::from_bits((bits & ((1u64 << 52) - 1)) | (1023u64 << 52));
    if m * m >= 2.0 {
        e + 1
    } else {
        e
    }
}

/// Exponent window `(exp_min, exp_max)` for a set of values, with at most
/// `2^exponent_bits - 1` levels. The window is anchored at the largest
/// magnitude so the range of the tensor is kept. All-zero input gives `(0, 0)`.
pub fn exponent_window(values: &[f32], exponent_bits: u8) -> (i32, i32) {
    let mut lo = f32::INFINITY;
    let mut hi = 0.0f32;
    for v in values {
        let a = v.abs();
        if a > 0.0 {
            lo = lo.min(a);
            hi = hi.max(a);
        }
    }
    if hi == 0.0 {
        return (0, 0);
    }
    let exp_max = round_log2(hi).min(MAX_EXPONENT);
    let levels = exponent_levels(exponent_bits);
    let exp_min = round_log2(lo).max(exp_max - levels + 1);
    (exp_min, exp_max)
}

/// Exponent levels addressable by the field: one code is reserved for zero.
pub fn exponent_levels(exponent_bits: u8) -> i32 {
    (1i32 << exponent_bits) - 1
}

/// Snap one value into the window. Values whose rounded exponent falls below
/// the window go to zero when `|x| < 2^(exp_min - 1)` and to `±2^exp_min` otherwise
/// (whichever of the two is nearer).
pub fn pow2_code(x: f32, exp_min: i32, exp_max: i32) -> Pow2Code {
    if x == 0.0 {
        return Pow2Code::ZERO;
    }
    let sign = if x < 0.0 { -1 } else { 1 };
    let e = round_log2(x.abs());
    let exponent = if e > exp_max {
        exp_max
    } else if e < exp_min {
        if (x.abs() as f64) < pow2_f64(exp_min - 1) {
            return Pow2Code::ZERO;
        }
        exp_min
    } else {
        e
    };
    Pow2Code { sign, exponent }
}

pub fn pow2_value(code: Pow2Code) -> f32 {
    if code.sign == 0 {
        0.0
    } else {
        (code.sign as f64 * pow2_f64(code.exponent)) as f32
    }
}

fn pow2_f64(e: i32) -> f64 {
    2f64.powi(e)
}
