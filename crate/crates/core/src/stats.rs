//! Weight distribution analysis: per-channel quartiles, histograms and a
//! two-part bit-efficiency measure (range coverage, density divergence).

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{min_max, Tensor};

/// Bins used by [`bit_efficiency`].
pub const BE_BINS: usize = 64;

pub const QUARTILES_CSV_HEADER: &str = "tensor,variant,channel,min,q1,median,q3,max";
pub const HISTOGRAM_CSV_HEADER: &str = "tensor,variant,bin,lower,upper,count";
pub const BE_CSV_HEADER: &str =
    "tensor,scheme,bits,range_coverage,density_divergence,levels_used,levels_available";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiveNumber {
    pub min: f32,
    pub q1: f32,
    pub median: f32,
    pub q3: f32,
    pub max: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelQuartiles {
    pub axis: usize,
    pub channels: Vec<FiveNumber>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightHistogram {
    pub bin_edges: Vec<f32>,
    pub counts: Vec<u64>,
}

impl WeightHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitEfficiencyReport {
    pub range_coverage: f64,
    pub density_divergence: f64,
    pub levels_used: usize,
    pub levels_available: u64,
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    (sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)) as f32
}

fn five_number(mut values: Vec<f32>) -> FiveNumber {
    values.sort_by(f32::total_cmp);
    FiveNumber {
        min: values[0],
        q1: quantile_sorted(&values, 0.25),
        median: quantile_sorted(&values, 0.5),
        q3: quantile_sorted(&values, 0.75),
        max: values[values.len() - 1],
    }
}

/// Min, quartiles and max of every slice along `axis`.
pub fn channel_quartiles(x: &Tensor, axis: usize) -> Result<ChannelQuartiles> {
    if axis >= x.rank() {
        return Err(Error::Argument(format!(
            "axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    if x.is_empty() {
        return Err(Error::Argument(format!("tensor '{}' is empty", x.name)));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let dim = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let channels = (0..dim)
        .map(|c| {
            let slice: Vec<f32> = (0..outer)
                .flat_map(|o| {
                    let start = (o * dim + c) * inner;
                    x.data[start..start + inner].iter().copied()
                })
                .collect();
            five_number(slice)
        })
        .collect();
    Ok(ChannelQuartiles { axis, channels })
}

/// Equal-width bins over `[min, max]` with the last bin closed. A constant
/// tensor gets bins spanning `[c - 0.5, c + 0.5]`.
pub fn weight_histogram(x: &Tensor, bins: usize) -> Result<WeightHistogram> {
    let (lo, hi) =
        min_max(&x.data).ok_or_else(|| Error::Argument(format!("tensor '{}' is empty", x.name)))?;
    let (lo, hi) = if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    histogram_in_range(&x.data, lo, hi, bins)
}

/// Equal-width histogram over `[lo, hi]`; values outside are clamped into the end bins.
pub fn histogram_in_range(
    values: &[f32],
    lo: f32,
    hi: f32,
    bins: usize,
) -> Result<WeightHistogram> {
    if bins == 0 {
        return Err(Error::Argument("histogram needs at least one bin".into()));
    }
    if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err(Error::Argument(format!(
            "empty histogram range [{lo}, {hi}]"
        )));
    }
    let (lo64, hi64) = (lo as f64, hi as f64);
    let width = (hi64 - lo64) / bins as f64;
    let bin_edges = (0..=bins)
        .map(|i| {
            if i == bins {
                hi
            } else {
                (lo64 + i as f64 * width) as f32
            }
        })
        .collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = ((v as f64 - lo64) / width).floor();
        let idx = if idx < 0.0 {
            0
        } else {
            (idx as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    Ok(WeightHistogram { bin_edges, counts })
}

/// Range coverage and density divergence of `dequantized` against `original`,
/// for a single parameter group at `bits` bits.
pub fn bit_efficiency(
    original: &Tensor,
    dequantized: &Tensor,
    bits: u8,
) -> Result<BitEfficiencyReport> {
    bit_efficiency_grouped(original, dequantized, bits, 1)
}

/// As [`bit_efficiency`], with `groups` independent parameter sets (per-channel),
/// each able to address `2^bits` levels.
pub fn bit_efficiency_grouped(
    original: &Tensor,
    dequantized: &Tensor,
    bits: u8,
    groups: usize,
) -> Result<BitEfficiencyReport> {
    if original.shape != dequantized.shape {
        return Err(Error::Argument(format!(
            "shapes differ: {:?} vs {:?}",
            original.shape, dequantized.shape
        )));
    }
    let (lo, hi) = min_max(&original.data)
        .ok_or_else(|| Error::Argument(format!("tensor '{}' is empty", original.name)))?;
    let (qlo, qhi) = min_max(&dequantized.data).expect("same shape");
    let range_coverage = if hi > lo {
        ((qhi as f64 - qlo as f64) / (hi as f64 - lo as f64)).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let (slo, shi) = (lo.min(qlo), hi.max(qhi));
    let (slo, shi) = if slo == shi {
        (slo - 0.5, shi + 0.5)
    } else {
        (slo, shi)
    };
    let a = histogram_in_range(&original.data, slo, shi, BE_BINS)?;
    let b = histogram_in_range(&dequantized.data, slo, shi, BE_BINS)?;
    let overlap: u64 = a.counts.iter().zip(&b.counts).map(|(x, y)| *x.min(y)).sum();
    let density_divergence = 1.0 - overlap as f64 / original.len() as f64;
    let levels_used = dequantized
        .data
        .iter()
        .map(|v| if *v == 0.0 { 0u32 } else { v.to_bits() })
        .collect::<HashSet<_>>()
        .len();
    Ok(BitEfficiencyReport {
        range_coverage,
        density_divergence,
        levels_used,
        levels_available: (1u64 << bits) * groups.max(1) as u64,
    })
}

pub fn quartiles_csv_rows(out: &mut String, tensor: &str, variant: &str, q: &ChannelQuartiles) {
    for (c, f) in q.channels.iter().enumerate() {
        writeln!(
            out,
            "{tensor},{variant},{c},{},{},{},{},{}",
            f.min, f.q1, f.median, f.q3, f.max
        )
        .unwrap();
    }
}

pub fn histogram_csv_rows(out: &mut String, tensor: &str, variant: &str, h: &WeightHistogram) {
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(
            out,
            "{tensor},{variant},{i},{},{},{c}",
            h.bin_edges[i],
            h.bin_edges[i + 1]
        )
        .unwrap();
    }
}

pub fn be_csv_row(
    out: &mut String,
    tensor: &str,
    scheme: &str,
    bits: u8,
    be: &BitEfficiencyReport,
) {
    writeln!(
        out,
        "{tensor},{scheme},{bits},{:.6},{:.6},{},{}",
        be.range_coverage, be.density_divergence, be.levels_used, be.levels_available
    )
    .unwrap();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, quantize_asymm, quantize_symm};

    fn t(data: &[f32]) -> Tensor {
        Tensor::from_vec("x", data.to_vec()).unwrap()
    }

    #[test]
    fn symmetric_order_statistics() {
        let q = channel_quartiles(
            &Tensor::new("x", vec![1, 5], vec![1., 2., 3., 4., 5.]).unwrap(),
            0,
        )
        .unwrap();
        assert_eq!(
            q.channels[0],
            FiveNumber {
                min: 1.0,
                q1: 2.0,
                median: 3.0,
                q3: 4.0,
                max: 5.0
            }
        );
        let q = channel_quartiles(&t(&[2.5; 3]), 0).unwrap();
        assert_eq!(q.channels.len(), 3);
        assert!(q.channels.iter().all(|f| f.min == 2.5 && f.max == 2.5));
    }

    #[test]
    fn non_leading_axis() {
        // shape [2, 2]: column 1 holds 2 and 4
        let x = Tensor::new("x", vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let q = channel_quartiles(&x, 1).unwrap();
        assert_eq!(q.channels[1].min, 2.0);
        assert_eq!(q.channels[1].median, 3.0);
        assert!(matches!(channel_quartiles(&x, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn histogram_examples() {
        let h = weight_histogram(&t(&[0., 1., 2., 3.]), 2).unwrap();
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!(h.bin_edges, vec![0.0, 1.5, 3.0]);
        let h = weight_histogram(&t(&[4.0; 7]), 5).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.total(), 7);
        assert!(h.bin_edges.windows(2).all(|w| w[0] < w[1]));
        assert!(weight_histogram(&t(&[1.0]), 0).is_err());
    }

    #[test]
    fn identity_has_full_coverage() {
        let x = t(&[-1.0, 0.3, 0.7, 2.0]);
        let be = bit_efficiency(&x, &x, 8).unwrap();
        assert_eq!(be.range_coverage, 1.0);
        assert_eq!(be.density_divergence, 0.0);
        assert_eq!(be.levels_used, 4);
        assert_eq!(be.levels_available, 256);
    }

    #[test]
    fn asymm_preserves_range() {
        let x = t(&[-1.3, 0.2, 0.25, 5.5, 3.1]);
        for bits in 2..=8 {
            let d = dequantize(&quantize_asymm(&x, bits).unwrap());
            assert_eq!(bit_efficiency(&x, &d, bits).unwrap().range_coverage, 1.0);
        }
    }

    #[test]
    fn symm_coverage_at_most_one() {
        let x = t(&[-1.0, 0.2, 3.0]);
        let d = dequantize(&quantize_symm(&x, 3).unwrap());
        let be = bit_efficiency(&x, &d, 3).unwrap();
        assert!(be.range_coverage <= 1.0);
        let c = t(&[2.0, 2.0]);
        assert_eq!(bit_efficiency(&c, &c, 4).unwrap().range_coverage, 1.0);
    }

    #[test]
    fn csv_rows() {
        let mut s = String::new();
        histogram_csv_rows(
            &mut s,
            "w",
            "fp32",
            &weight_histogram(&t(&[0., 1.]), 1).unwrap(),
        );
        assert_eq!(s, "w,fp32,0,0,1,2\n");
    }
}
