//! Multiply-free dense kernel for power-of-two weights.
//!
//! Each weight `±2^e` becomes a sign and a left shift `e - global_exponent`,
//! with `global_exponent` the smallest exponent of the tensor, so the inner
//! loop only shifts and adds. Activations are fixed point in `i32`, and
//! accumulation is in `i64` after a width check that rules out overflow.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::quant::{dequantize, quantize_pow2, Codes, QuantParams, QuantScheme, QuantizedTensor};
use crate::tensor::Tensor;

pub const DEFAULT_FRACTIONAL_BITS: u32 = 16;
pub const MIN_BENCH_REPETITIONS: usize = 30;
pub const BENCH_CSV_HEADER: &str = "path,layer_shape,median_ns,iqr_ns";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftElem {
    /// -1, +1, or 0 for a zero weight.
    pub sign: i8,
    pub shift: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftWeights {
    pub shape: Vec<usize>,
    pub elems: Vec<ShiftElem>,
    pub global_exponent: i32,
}

impl ShiftWeights {
    pub fn max_shift(&self) -> u32 {
        self.elems
            .iter()
            .filter(|e| e.sign != 0)
            .map(|e| e.shift as u32)
            .max()
            .unwrap_or(0)
    }

    /// `sign * 2^(shift + global_exponent)` per element.
    pub fn reconstruct(&self) -> Tensor {
        let data = self
            .elems
            .iter()
            .map(|e| match e.sign {
                0 => 0.0,
                s => (s as f64 * 2f64.powi(e.shift as i32 + self.global_exponent)) as f32,
            })
            .collect();
        Tensor {
            name: "reconstructed".into(),
            shape: self.shape.clone(),
            data,
        }
    }

    fn dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [rows, cols] => Ok((*rows, *cols)),
            other => Err(Error::Argument(format!(
                "shift dense kernel needs [out, in] weights, got {other:?}"
            ))),
        }
    }
}

/// Lossless conversion of a power-of-two tensor.
pub fn to_shift_weights(q: &QuantizedTensor) -> Result<ShiftWeights> {
    let Codes::Pow2(codes) = &q.codes else {
        return Err(Error::Argument(format!(
            "tensor '{}' is {}, shift weights need pow2",
            q.name, q.scheme
        )));
    };
    debug_assert_eq!(q.scheme, QuantScheme::PowerOfTwo);
    let global_exponent = q
        .params
        .iter()
        .map(|p| match p {
            QuantParams::Pow2 { exp_min, .. } => *exp_min,
            _ => 0,
        })
        .min()
        .unwrap_or(0);
    let elems = codes
        .iter()
        .map(|c| {
            if c.is_zero() {
                return Ok(ShiftElem { sign: 0, shift: 0 });
            }
            let shift = u8::try_from(c.exponent - global_exponent).map_err(|_| {
                Error::Argument(format!("exponent {} out of shift range", c.exponent))
            })?;
            Ok(ShiftElem {
                sign: c.sign,
                shift,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShiftWeights {
        shape: q.shape.clone(),
        elems,
        global_exponent,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedPointActivations {
    /// Each value represents `v / 2^fractional_bits`.
    pub values: Vec<i32>,
    pub fractional_bits: u32,
}

impl FixedPointActivations {
    /// Rounds half away from zero and saturates to the `i32` range.
    pub fn from_f32(values: &[f32], fractional_bits: u32) -> Self {
        let scale = 2f64.powi(fractional_bits as i32);
        FixedPointActivations {
            values: values
                .iter()
                .map(|&v| {
                    (v as f64 * scale)
                        .round()
                        .clamp(i32::MIN as f64, i32::MAX as f64) as i32
                })
                .collect(),
            fractional_bits,
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        let scale = 2f64.powi(-(self.fractional_bits as i32));
        self.values
            .iter()
            .map(|&v| (v as f64 * scale) as f32)
            .collect()
    }
}

/// Declared widths the overflow analysis works against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelWidths {
    /// Signed width activations are promised to fit in (at most 32).
    pub activation_bits: u32,
    /// Signed accumulator width (at most 64).
    pub accumulator_bits: u32,
}

impl Default for KernelWidths {
    fn default() -> Self {
        KernelWidths {
            activation_bits: 32,
            accumulator_bits: 64,
        }
    }
}

impl KernelWidths {
    /// Worst case `|acc| <= inputs * 2^(activation_bits - 1) * 2^max_shift`
    /// must stay below `2^(accumulator_bits - 1)`.
    pub fn check(&self, inputs: usize, max_shift: u32) -> Result<()> {
        if !(2..=32).contains(&self.activation_bits) || !(2..=64).contains(&self.accumulator_bits) {
            return Err(Error::Argument(format!("unsupported widths {self:?}")));
        }
        let exp = self.activation_bits - 1 + max_shift;
        let bound = (inputs as u128).checked_shl(exp).filter(|_| exp < 120);
        let limit = 1u128 << (self.accumulator_bits - 1);
        match bound {
            Some(b) if b < limit => Ok(()),
            _ => Err(Error::Overflow(format!(
                "{inputs} inputs of {} bits shifted by up to {max_shift} can exceed a {}-bit accumulator",
                self.activation_bits, self.accumulator_bits
            ))),
        }
    }

    fn check_activations(&self, acts: &FixedPointActivations) -> Result<()> {
        let hi = (1i64 << (self.activation_bits - 1)) - 1;
        let lo = -(1i64 << (self.activation_bits - 1));
        match acts
            .values
            .iter()
            .find(|&&v| (v as i64) < lo || v as i64 > hi)
        {
            Some(v) => Err(Error::Argument(format!(
                "activation {v} outside declared {}-bit range",
                self.activation_bits
            ))),
            None => Ok(()),
        }
    }
}

fn prepare(
    acts: &FixedPointActivations,
    w: &ShiftWeights,
    widths: &KernelWidths,
) -> Result<(usize, usize)> {
    let (rows, cols) = w.dims()?;
    if acts.values.len() != cols {
        return Err(Error::Argument(format!(
            "{} activations for weights with {cols} inputs",
            acts.values.len()
        )));
    }
    widths.check_activations(acts)?;
    widths.check(cols, w.max_shift())?;
    Ok((rows, cols))
}

/// Per-output `sum(sign * (act << shift))`, no multiplications.
pub fn shift_accumulate(
    acts: &FixedPointActivations,
    w: &ShiftWeights,
    widths: &KernelWidths,
) -> Result<Vec<i64>> {
    let (rows, cols) = prepare(acts, w, widths)?;
    Ok(ShiftLanes::new(&w.elems).accumulate(&acts.values, rows, cols))
}

/// Structure-of-arrays form of the weights: the inner loop is shift, mask,
/// xor and subtract, with no data-dependent branches.
struct ShiftLanes {
    shift: Vec<u64>,
    /// All ones for a nonzero weight.
    keep: Vec<i64>,
    /// All ones for a negative weight.
    negate: Vec<i64>,
}

impl ShiftLanes {
    fn new(elems: &[ShiftElem]) -> Self {
        ShiftLanes {
            shift: elems.iter().map(|e| e.shift as u64).collect(),
            keep: elems.iter().map(|e| -((e.sign != 0) as i64)).collect(),
            negate: elems.iter().map(|e| -((e.sign < 0) as i64)).collect(),
        }
    }

    fn accumulate(&self, acts: &[i32], rows: usize, cols: usize) -> Vec<i64> {
        (0..rows)
            .map(|r| {
                let span = r * cols..(r + 1) * cols;
                let mut acc = 0i64;
                for (((&a, &s), &k), &n) in acts
                    .iter()
                    .zip(&self.shift[span.clone()])
                    .zip(&self.keep[span.clone()])
                    .zip(&self.negate[span])
                {
                    let term = ((a as i64) << s) & k;
                    acc += (term ^ n) - n;
                }
                acc
            })
            .collect()
    }
}

/// Reference: the same sums with integer multiplies by `sign * 2^shift`.
pub fn multiply_accumulate(
    acts: &FixedPointActivations,
    w: &ShiftWeights,
    widths: &KernelWidths,
) -> Result<Vec<i64>> {
    let (rows, cols) = prepare(acts, w, widths)?;
    Ok(multiply_accumulate_unchecked(
        &acts.values,
        &w.elems,
        rows,
        cols,
    ))
}

fn multiply_accumulate_unchecked(
    acts: &[i32],
    elems: &[ShiftElem],
    rows: usize,
    cols: usize,
) -> Vec<i64> {
    (0..rows)
        .map(|r| {
            elems[r * cols..(r + 1) * cols]
                .iter()
                .zip(acts)
                .map(|(e, &a)| a as i64 * (e.sign as i64 * (1i64 << e.shift)))
                .sum()
        })
        .collect()
}

/// Applies `2^global_exponent` to accumulators (floor on right shifts) and
/// narrows to `i32` at the activations' fractional bits.
pub fn normalize(
    acc: &[i64],
    global_exponent: i32,
    fractional_bits: u32,
) -> Result<FixedPointActivations> {
    let values = acc
        .iter()
        .map(|&a| {
            let scaled: i128 = if global_exponent >= 0 {
                (a as i128) << global_exponent.min(64)
            } else {
                (a as i128) >> (-global_exponent).min(127)
            };
            i32::try_from(scaled).map_err(|_| {
                Error::Overflow(format!("output {scaled} does not fit a 32-bit activation"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FixedPointActivations {
        values,
        fractional_bits,
    })
}

/// Shift-based dense layer: accumulate, then rescale by the global exponent.
pub fn shift_dense(
    acts: &FixedPointActivations,
    w: &ShiftWeights,
    widths: &KernelWidths,
) -> Result<FixedPointActivations> {
    let acc = shift_accumulate(acts, w, widths)?;
    normalize(&acc, w.global_exponent, acts.fractional_bits)
}

fn fp32_dense(acts: &[f32], weights: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    (0..rows)
        .map(|r| {
            weights[r * cols..(r + 1) * cols]
                .iter()
                .zip(acts)
                .fold(0.0f32, |acc, (w, a)| acc + w * a)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub path: String,
    pub rows: usize,
    pub cols: usize,
    pub median_ns: f64,
    pub iqr_ns: f64,
}

impl BenchRow {
    pub fn layer_shape(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub seed: u64,
    pub repetitions: usize,
    pub rows: Vec<BenchRow>,
}

pub const PATH_FP32: &str = "fp32_mul";
pub const PATH_SHIFT: &str = "int_shift";
pub const PATH_INT_MUL: &str = "int_mul";

impl BenchReport {
    pub fn median(&self, path: &str, rows: usize, cols: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.path == path && r.rows == rows && r.cols == cols)
            .map(|r| r.median_ns)
    }

    /// Median shift time over median f32 time, per layer shape.
    pub fn ratios(&self) -> Vec<((usize, usize), f64)> {
        let mut shapes: Vec<(usize, usize)> = self.rows.iter().map(|r| (r.rows, r.cols)).collect();
        shapes.dedup();
        shapes
            .into_iter()
            .filter_map(|(r, c)| {
                let f = self.median(PATH_FP32, r, c)?;
                let s = self.median(PATH_SHIFT, r, c)?;
                Some(((r, c), s / f))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{BENCH_CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.1},{:.1}",
                r.path,
                r.layer_shape(),
                r.median_ns,
                r.iqr_ns
            )
            .unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>12} {:>14} {:>12}\n",
            "path", "layer", "median ns", "iqr ns"
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<10} {:>12} {:>14.1} {:>12.1}",
                r.path,
                r.layer_shape(),
                r.median_ns,
                r.iqr_ns
            )
            .unwrap();
        }
        for ((r, c), ratio) in self.ratios() {
            writeln!(
                out,
                "{r}x{c}: shift/fp32 median ratio {ratio:.3} ({:+.1}% latency)",
                (ratio - 1.0) * 100.0
            )
            .unwrap();
        }
        out
    }
}

/// Times f32 multiply, integer shift and integer multiply dense layers on the
/// same random power-of-two weights. Reports medians and interquartile ranges only.
pub fn bench_latency(
    shapes: &[(usize, usize)],
    repetitions: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repetitions < MIN_BENCH_REPETITIONS {
        return Err(Error::Argument(format!(
            "need at least {MIN_BENCH_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = KernelWidths::default();
    let mut out = Vec::new();
    for &(rows, cols) in shapes {
        if rows == 0 || cols == 0 {
            return Err(Error::Argument(format!("empty layer shape {rows}x{cols}")));
        }
        let std = (1.0 / cols as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let w: Vec<f32> = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        let q = quantize_pow2(&Tensor::new("w", vec![rows, cols], w)?)?;
        let sw = to_shift_weights(&q)?;
        let wf = dequantize(&q).data;
        let act_f: Vec<f32> = (0..cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let acts = FixedPointActivations::from_f32(&act_f, DEFAULT_FRACTIONAL_BITS);
        widths.check(cols, sw.max_shift())?;
        let act_f = acts.to_f32();

        let fp = time_reps(repetitions, || {
            black_box(fp32_dense(black_box(&act_f), black_box(&wf), rows, cols));
        });
        let lanes = ShiftLanes::new(&sw.elems);
        let sh = time_reps(repetitions, || {
            let acc = black_box(&lanes).accumulate(black_box(&acts.values), rows, cols);
            black_box(normalize(&acc, sw.global_exponent, acts.fractional_bits).ok());
        });
        let im = time_reps(repetitions, || {
            let acc = multiply_accumulate_unchecked(
                black_box(&acts.values),
                black_box(&sw.elems),
                rows,
                cols,
            );
            black_box(normalize(&acc, sw.global_exponent, acts.fractional_bits).ok());
        });
        for (path, samples) in [(PATH_FP32, fp), (PATH_SHIFT, sh), (PATH_INT_MUL, im)] {
            let (median_ns, iqr_ns) = median_iqr(samples);
            out.push(BenchRow {
                path: path.to_string(),
                rows,
                cols,
                median_ns,
                iqr_ns,
            });
        }
    }
    Ok(BenchReport {
        seed,
        repetitions,
        rows: out,
    })
}

fn time_reps(reps: usize, mut f: impl FnMut()) -> Vec<f64> {
    f();
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos() as f64
        })
        .collect()
}

fn median_iqr(mut samples: Vec<f64>) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (samples.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(samples.len() - 1);
        samples[lo] + (h - lo as f64) * (samples[hi] - samples[lo])
    };
    (q(0.5), q(0.75) - q(0.25))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize, quantize_asymm, QuantConfig};

    fn weights(shape: Vec<usize>, data: Vec<f32>) -> ShiftWeights {
        let q = quantize_pow2(&Tensor::new("w", shape, data).unwrap()).unwrap();
        to_shift_weights(&q).unwrap()
    }

    #[test]
    fn global_exponent_and_shifts() {
        let w = weights(vec![1, 3], vec![0.25, 1.0, 8.0]);
        assert_eq!(w.global_exponent, -2);
        let shifts: Vec<u8> = w.elems.iter().map(|e| e.shift).collect();
        assert_eq!(shifts, vec![0, 2, 5]);
    }

    #[test]
    fn all_zero_tensor_flags() {
        let w = weights(vec![2, 2], vec![0.0; 4]);
        assert!(w.elems.iter().all(|e| e.sign == 0));
        assert_eq!(w.reconstruct().data, vec![0.0; 4]);
    }

    #[test]
    fn single_weight_shift() {
        let w = weights(vec![1, 1], vec![8.0]);
        let acts = FixedPointActivations {
            values: vec![5],
            fractional_bits: 0,
        };
        let acc = shift_accumulate(&acts, &w, &KernelWidths::default()).unwrap();
        // global exponent 3, shift 0: 5 << 0 then scaled by 2^3 on normalize
        assert_eq!(
            normalize(&acc, w.global_exponent, 0).unwrap().values,
            vec![40]
        );
        let zero = weights(vec![1, 2], vec![8.0, 0.0]);
        let acts = FixedPointActivations {
            values: vec![0, 1000],
            fractional_bits: 0,
        };
        assert_eq!(
            shift_dense(&acts, &zero, &KernelWidths::default())
                .unwrap()
                .values,
            vec![0]
        );
    }

    #[test]
    fn reconstruct_equals_dequantize() {
        let x = Tensor::new("w", vec![2, 3], vec![0.3, -1.7, 0.0, 5.0, -0.01, 0.126]).unwrap();
        let q = quantize(&x, &QuantConfig::new(QuantScheme::PowerOfTwo, 5)).unwrap();
        assert_eq!(
            to_shift_weights(&q).unwrap().reconstruct().data,
            dequantize(&q).data
        );
    }

    #[test]
    fn non_pow2_rejected() {
        let q = quantize_asymm(&Tensor::from_vec("w", vec![1.0, 2.0]).unwrap(), 4).unwrap();
        assert!(matches!(to_shift_weights(&q), Err(Error::Argument(_))));
    }

    #[test]
    fn width_analysis() {
        let w = KernelWidths::default();
        assert!(w.check(1024, 21).is_ok());
        assert!(matches!(w.check(1024, 22), Err(Error::Overflow(_))));
        let narrow = KernelWidths {
            activation_bits: 8,
            accumulator_bits: 16,
        };
        assert!(narrow.check(2, 6).is_ok());
        assert!(narrow.check(2, 7).is_err());
        let w8 = weights(vec![1, 1], vec![1.0]);
        let acts = FixedPointActivations {
            values: vec![200],
            fractional_bits: 0,
        };
        assert!(matches!(
            shift_accumulate(&acts, &w8, &narrow),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn fixed_point_conversion() {
        let a = FixedPointActivations::from_f32(&[0.5, -1.25], 4);
        assert_eq!(a.values, vec![8, -20]);
        assert_eq!(a.to_f32(), vec![0.5, -1.25]);
    }

    #[test]
    fn bench_requires_repetitions() {
        assert!(matches!(
            bench_latency(&[(4, 4)], 10, 1),
            Err(Error::Argument(_))
        ));
        let r = bench_latency(&[(4, 8)], 30, 1).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.ratios().len(), 1);
        assert!(r.to_csv().starts_with(BENCH_CSV_HEADER));
    }
}
