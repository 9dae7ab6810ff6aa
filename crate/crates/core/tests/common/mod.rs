//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;

use bitquant::infer::{GraphSpec, Layer, Padding};
use bitquant::store::ModelFile;
use bitquant::Tensor;
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A finite f32 as `mantissa * 2^exponent` with an integer mantissa.
fn dyadic(x: f32) -> (i64, i32) {
    let bits = x.to_bits();
    let sign = if bits >> 31 == 1 { -1 } else { 1 };
    let exp_field = ((bits >> 23) & 0xff) as i32;
    let frac = (bits & 0x7f_ffff) as i64;
    if exp_field == 0 {
        (sign * frac, -149)
    } else {
        (sign * (frac | 0x80_0000), exp_field - 150)
    }
}

/// Values scaled to integers on a common power-of-two grid, if that fits
/// comfortably in i128 after multiplying by up to 2^9.
fn common_grid(values: &[f32]) -> Option<Vec<i128>> {
    let parts: Vec<(i64, i32)> = values.iter().map(|&v| dyadic(v)).collect();
    let lo = parts
        .iter()
        .filter(|p| p.0 != 0)
        .map(|p| p.1)
        .min()
        .unwrap_or(0);
    let hi = parts
        .iter()
        .filter(|p| p.0 != 0)
        .map(|p| p.1)
        .max()
        .unwrap_or(0);
    if hi - lo > 80 {
        return None;
    }
    Some(
        parts
            .iter()
            .map(|&(m, e)| (m as i128) << (e - lo).max(0))
            .collect(),
    )
}

fn abs(x: BigRational) -> BigRational {
    if x < BigRational::from_integer(BigInt::from(0)) {
        -x
    } else {
        x
    }
}

fn ratio(x: f32) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

/// Brute-force asymmetric code: the level `min + k (max - min) / (2^n - 1)`
/// nearest to `x`, larger `k` on an exact tie.
pub fn nearest_asymm_codes(x: &[f32], bits: u8) -> Vec<i32> {
    let min = x.iter().copied().fold(f32::INFINITY, f32::min);
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if min == max {
        return vec![0; x.len()];
    }
    let steps = (1i64 << bits) - 1;
    let mut all = x.to_vec();
    all.push(min);
    all.push(max);
    if let Some(grid) = common_grid(&all) {
        let (gmin, gmax) = (grid[x.len()], grid[x.len() + 1]);
        let span = gmax - gmin;
        return grid[..x.len()]
            .iter()
            .map(|&v| {
                // |x - L_k| scaled by steps: |steps (x - min) - k span|
                let scaled = steps as i128 * (v - gmin);
                let mut best = (0i64, i128::MAX);
                for k in 0..=steps {
                    let d = (scaled - k as i128 * span).abs();
                    if d <= best.1 {
                        best = (k, d);
                    }
                }
                best.0 as i32
            })
            .collect();
    }
    let (rmin, rmax) = (ratio(min), ratio(max));
    let span = &rmax - &rmin;
    let steps_r = BigRational::from_integer(BigInt::from(steps));
    x.iter()
        .map(|&v| {
            let scaled = &steps_r * (ratio(v) - &rmin);
            let mut best: (i64, Option<BigRational>) = (0, None);
            for k in 0..=steps {
                let d = abs(&scaled - &span * BigRational::from_integer(BigInt::from(k)));
                if best.1.as_ref().is_none_or(|b| d <= *b) {
                    best = (k, Some(d));
                }
            }
            best.0 as i32
        })
        .collect()
}

/// Brute-force symmetric code over `k max_abs / (2^(n-1) - 1)`, `|k| <= 2^(n-1) - 1`;
/// the larger `|k|` on an exact tie.
pub fn nearest_symm_codes(x: &[f32], bits: u8) -> Vec<i32> {
    let max_abs = x.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
    if max_abs == 0.0 {
        return vec![0; x.len()];
    }
    let steps = (1i64 << (bits - 1)) - 1;
    let better = |k: i64, d: Ordering, best_k: i64| match d {
        Ordering::Less => true,
        Ordering::Equal => k.abs() > best_k.abs(),
        Ordering::Greater => false,
    };
    let mut all = x.to_vec();
    all.push(max_abs);
    if let Some(grid) = common_grid(&all) {
        let m = grid[x.len()];
        return grid[..x.len()]
            .iter()
            .map(|&v| {
                let scaled = steps as i128 * v;
                let mut best = (0i64, i128::MAX);
                for k in -steps..=steps {
                    let d = (scaled - k as i128 * m).abs();
                    if best.1 == i128::MAX || better(k, d.cmp(&best.1), best.0) {
                        best = (k, d);
                    }
                }
                best.0 as i32
            })
            .collect();
    }
    let m = ratio(max_abs);
    let steps_r = BigRational::from_integer(BigInt::from(steps));
    x.iter()
        .map(|&v| {
            let scaled = &steps_r * ratio(v);
            let mut best: (i64, Option<BigRational>) = (0, None);
            for k in -steps..=steps {
                let d = abs(&scaled - &m * BigRational::from_integer(BigInt::from(k)));
                let take = match &best.1 {
                    None => true,
                    Some(b) => better(k, d.cmp(b), best.0),
                };
                if take {
                    best = (k, Some(d));
                }
            }
            best.0 as i32
        })
        .collect()
}

/// The random tensor suite: `count` tensors of 1..=4096 values uniform in
/// [-10, 10], each with a bit width in 2..=8.
pub fn random_suite(seed: u64, count: usize) -> Vec<(Tensor, u8)> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| {
            let n = r.random_range(1..=4096usize);
            let data: Vec<f32> = (0..n).map(|_| r.random_range(-10.0f32..=10.0)).collect();
            let bits = r.random_range(2..=8u8);
            (Tensor::from_vec(format!("t{i}"), data).unwrap(), bits)
        })
        .collect()
}

pub fn ulp(x: f32) -> f64 {
    let a = x.abs();
    if a == f32::MAX {
        return (a - f32::from_bits(a.to_bits() - 1)) as f64;
    }
    (f32::from_bits(a.to_bits() + 1) - a) as f64
}

fn tensor<'a>(model: &'a ModelFile, name: &str) -> &'a [f32] {
    &model
        .tensor(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .data
}

/// Straightforward forward pass: explicit bounds checks instead of a padded
/// buffer, f64 accumulation, one output element at a time.
pub fn naive_forward(model: &ModelFile, input: &[f32]) -> Vec<f64> {
    let graph = GraphSpec::parse(&model.graph).unwrap();
    let mut shape = graph.input_shape.clone();
    let mut x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
    for layer in &graph.layers {
        match layer {
            Layer::Dense { weight, bias } => {
                let w = tensor(model, weight);
                let inputs = x.len();
                let outputs = w.len() / inputs;
                let mut y = vec![0.0; outputs];
                for o in 0..outputs {
                    for i in 0..inputs {
                        y[o] += w[o * inputs + i] as f64 * x[i];
                    }
                    if let Some(b) = bias {
                        y[o] += tensor(model, b)[o] as f64;
                    }
                }
                x = y;
                shape = vec![outputs];
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                pad,
            } => {
                let wt = model.tensor(weight).unwrap();
                let (oc, ic, kh, kw) = (wt.shape[0], wt.shape[1], wt.shape[2], wt.shape[3]);
                let pad = match pad {
                    Padding::Explicit(p) => *p as isize,
                    other => panic!("unresolved padding {other:?}"),
                };
                let (h, w) = (shape[1] as isize, shape[2] as isize);
                let oh = ((h + 2 * pad - kh as isize) / *stride as isize + 1) as usize;
                let ow = ((w + 2 * pad - kw as isize) / *stride as isize + 1) as usize;
                let mut y = vec![0.0; oc * oh * ow];
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for c in 0..ic {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = (oy * stride) as isize + ky as isize - pad;
                                        let ix = (ox * stride) as isize + kx as isize - pad;
                                        if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                            continue;
                                        }
                                        let xi = (c as isize * h + iy) * w + ix;
                                        let wi = ((o * ic + c) * kh + ky) * kw + kx;
                                        acc += wt.data[wi] as f64 * x[xi as usize];
                                    }
                                }
                            }
                            if let Some(b) = bias {
                                acc += tensor(model, b)[o] as f64;
                            }
                            y[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                x = y;
                shape = vec![oc, oh, ow];
            }
            Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let c = shape[0];
                let per = x.len() / c;
                let (g, b, m, v) = (
                    tensor(model, gamma),
                    tensor(model, beta),
                    tensor(model, mean),
                    tensor(model, var),
                );
                for ch in 0..c {
                    let scale = g[ch] as f64 / (v[ch] as f64 + *eps as f64).sqrt();
                    for v in &mut x[ch * per..(ch + 1) * per] {
                        *v = (*v - m[ch] as f64) * scale + b[ch] as f64;
                    }
                }
            }
            Layer::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Layer::Softmax => {
                let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = x.iter().map(|v| (v - m).exp()).sum();
                x.iter_mut().for_each(|v| *v = (*v - m).exp() / s);
            }
            Layer::Flatten => shape = vec![x.len()],
            Layer::MaxPool { size, stride } | Layer::AvgPool { size, stride } => {
                let is_max = matches!(layer, Layer::MaxPool { .. });
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let oh = (h - size) / stride + 1;
                let ow = (w - size) / stride + 1;
                let mut y = Vec::new();
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let window = (0..*size).flat_map(|ky| {
                                (0..*size).map(move |kx| (oy * stride + ky, ox * stride + kx))
                            });
                            let vals: Vec<f64> =
                                window.map(|(iy, ix)| x[(ch * h + iy) * w + ix]).collect();
                            y.push(if is_max {
                                vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                vals.iter().sum::<f64>() / vals.len() as f64
                            });
                        }
                    }
                }
                x = y;
                shape = vec![c, oh, ow];
            }
            Layer::Other { kind, .. } => panic!("oracle cannot run '{kind}'"),
        }
    }
    x
}

fn gaussian(r: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    // Irwin-Hall approximation keeps the oracle free of library samplers.
    (0..n)
        .map(|_| ((0..12).map(|_| r.random::<f32>()).sum::<f32>() - 6.0) * std)
        .collect()
}

/// A random chain of at most four layers with matching tensors, plus an input.
pub fn random_network(r: &mut ChaCha8Rng) -> (ModelFile, Vec<f32>) {
    let mut shape = vec![
        r.random_range(1..=3usize),
        r.random_range(3..=8usize),
        r.random_range(3..=8usize),
    ];
    let input = gaussian(r, shape.iter().product(), 1.0);
    let mut tensors = Vec::new();
    let mut lines = vec![format!(
        "input shape={}",
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",")
    )];
    let depth = r.random_range(1..=4usize);
    for li in 0..depth {
        let spatial = shape.len() == 3;
        let choice = if spatial {
            r.random_range(0..8u8)
        } else {
            [0u8, 5, 6][r.random_range(0..3usize)]
        };
        match choice {
            // dense (flattening implicitly is not allowed: flatten first)
            0 if !spatial => {
                let inputs = shape[0];
                let outputs = r.random_range(1..=12usize);
                tensors.push(
                    Tensor::new(
                        format!("d{li}.w"),
                        vec![outputs, inputs],
                        gaussian(r, outputs * inputs, (1.0 / inputs as f32).sqrt()),
                    )
                    .unwrap(),
                );
                let with_bias = r.random_bool(0.5);
                if with_bias {
                    tensors.push(
                        Tensor::from_vec(format!("d{li}.b"), gaussian(r, outputs, 0.1)).unwrap(),
                    );
                    lines.push(format!("dense weight=d{li}.w bias=d{li}.b"));
                } else {
                    lines.push(format!("dense weight=d{li}.w"));
                }
                shape = vec![outputs];
            }
            0 | 1 => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let k = r.random_range(1..=3usize.min(h).min(w));
                let stride = r.random_range(1..=2usize);
                let pad = r.random_range(0..=1usize);
                let oc = r.random_range(1..=4usize);
                tensors.push(
                    Tensor::new(
                        format!("c{li}.w"),
                        vec![oc, c, k, k],
                        gaussian(r, oc * c * k * k, (1.0 / (c * k * k) as f32).sqrt()),
                    )
                    .unwrap(),
                );
                tensors.push(Tensor::from_vec(format!("c{li}.b"), gaussian(r, oc, 0.1)).unwrap());
                lines.push(format!(
                    "conv2d weight=c{li}.w bias=c{li}.b stride={stride} pad={pad}"
                ));
                shape = vec![
                    oc,
                    (h + 2 * pad - k) / stride + 1,
                    (w + 2 * pad - k) / stride + 1,
                ];
            }
            2 => {
                let c = shape[0];
                tensors.push(
                    Tensor::from_vec(
                        format!("bn{li}.g"),
                        gaussian(r, c, 0.3).iter().map(|v| v + 1.0).collect(),
                    )
                    .unwrap(),
                );
                tensors.push(Tensor::from_vec(format!("bn{li}.b"), gaussian(r, c, 0.2)).unwrap());
                tensors.push(Tensor::from_vec(format!("bn{li}.m"), gaussian(r, c, 0.2)).unwrap());
                tensors.push(
                    Tensor::from_vec(
                        format!("bn{li}.v"),
                        (0..c).map(|_| r.random_range(0.5f32..2.0)).collect(),
                    )
                    .unwrap(),
                );
                lines.push(format!(
                    "batchnorm gamma=bn{li}.g beta=bn{li}.b mean=bn{li}.m var=bn{li}.v"
                ));
            }
            3 => lines.push("relu".into()),
            4 if shape[1] >= 2 && shape[2] >= 2 => {
                let size = 2;
                let stride = r.random_range(1..=2usize);
                let kind = if r.random_bool(0.5) {
                    "maxpool"
                } else {
                    "avgpool"
                };
                lines.push(format!("{kind} size={size} stride={stride}"));
                shape = vec![
                    shape[0],
                    (shape[1] - size) / stride + 1,
                    (shape[2] - size) / stride + 1,
                ];
            }
            5 => lines.push("relu".into()),
            6 => lines.push("softmax".into()),
            _ => {
                lines.push("flatten".into());
                shape = vec![shape.iter().product()];
            }
        }
    }
    lines.push(String::new());
    (ModelFile::new(tensors, lines.join("\n")).unwrap(), input)
}

/// `|a - b| / max(|b|, 1)` over all outputs.
pub fn max_rel_error(engine: &[f32], oracle: &[f64]) -> f64 {
    assert_eq!(engine.len(), oracle.len());
    engine
        .iter()
        .zip(oracle)
        .map(|(&a, &b)| (a as f64 - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Group confusion by explicit matrix products `P C P^T`.
pub fn group_confusion_matmul(counts: &[Vec<u64>], groups: &[Vec<usize>]) -> Vec<Vec<u64>> {
    let k = counts.len();
    let g = groups.len();
    let mut p = vec![vec![0u64; k]; g];
    for (gi, members) in groups.iter().enumerate() {
        for &c in members {
            p[gi][c] = 1;
        }
    }
    let mut pc = vec![vec![0u64; k]; g];
    for a in 0..g {
        for j in 0..k {
            pc[a][j] = (0..k).map(|i| p[a][i] * counts[i][j]).sum();
        }
    }
    (0..g)
        .map(|a| {
            (0..g)
                .map(|b| (0..k).map(|j| pc[a][j] * p[b][j]).sum())
                .collect()
        })
        .collect()
}
