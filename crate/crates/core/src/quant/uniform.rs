//! Uniform affine level mappings.
//!
//! Arithmetic runs in f64 on f32 inputs. Rounding is half away from zero
//! (`f64::round`), so an exact midpoint such as 127.5 becomes 128.

/// Number of steps above the lowest asymmetric code: `2^n - 1`.
pub fn asymm_steps(bits: u8) -> i32 {
    (1i32 << bits) - 1
}

/// Largest symmetric code magnitude: `2^(n-1) - 1`.
pub fn symm_steps(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// `round((x - min) * (2^n - 1) / (max - min))`, clamped to the code range.
/// A degenerate range (`max == min`) yields code 0.
pub fn asymm_code(x: f32, min: f32, max: f32, bits: u8) -> i32 {
    let steps = asymm_steps(bits);
    let span = max as f64 - min as f64;
    if span <= 0.0 {
        return 0;
    }
    let t = (x as f64 - min as f64) * steps as f64 / span;
    (t.round() as i64).clamp(0, steps as i64) as i32
}

pub fn asymm_value(code: i32, min: f32, max: f32, bits: u8) -> f32 {
    let span = max as f64 - min as f64;
    if span <= 0.0 {
        return min;
    }
    (min as f64 + code as f64 * span / asymm_steps(bits) as f64) as f32
}

/// `(max - min) / (2^n - 1)`; zero for a degenerate range.
pub fn asymm_step_size(min: f32, max: f32, bits: u8) -> f64 {
    (max as f64 - min as f64).max(0.0) / asymm_steps(bits) as f64
}

/// `round(x * (2^(n-1) - 1) / max_abs)`, clamped. `max_abs == 0` yields code 0.
pub fn symm_code(x: f32, max_abs: f32, bits: u8) -> i32 {
    let steps = symm_steps(bits);
    if max_abs <= 0.0 {
        return 0;
    }
    let t = x as f64 * steps as f64 / max_abs as f64;
    (t.round() as i64).clamp(-(steps as i64), steps as i64) as i32
}

pub fn symm_value(code: i32, max_abs: f32, bits: u8) -> f32 {
    if max_abs <= 0.0 {
        return 0.0;
    }
    (code as f64 * max_abs as f64 / symm_steps(bits) as f64) as f32
}

pub fn symm_step_size(max_abs: f32, bits: u8) -> f64 {
    max_abs.max(0.0) as f64 / symm_steps(bits) as f64
}
