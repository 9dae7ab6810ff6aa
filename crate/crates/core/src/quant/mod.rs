//! Data-free weight quantization: uniform asymmetric, uniform symmetric and
//! power-of-two, plus exact dequantization.
//!
//! Each scheme only looks at the tensor being quantized. Codes keep enough
//! parameters alongside them to reproduce the dequantized values exactly.

mod model;
pub mod pow2;
pub mod uniform;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use model::{
    fold_batchnorm, quantize_model, select_tensors, QuantizeOptions, QuantizedModel, FP32_BITS,
};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuantScheme {
    UniformAsymm,
    UniformSymm,
    PowerOfTwo,
}

impl QuantScheme {
    pub const ALL: [QuantScheme; 3] = [
        QuantScheme::UniformAsymm,
        QuantScheme::UniformSymm,
        QuantScheme::PowerOfTwo,
    ];

    pub fn tag(self) -> u8 {
        match self {
            QuantScheme::UniformAsymm => 0,
            QuantScheme::UniformSymm => 1,
            QuantScheme::PowerOfTwo => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<QuantScheme> {
        QuantScheme::ALL.into_iter().find(|s| s.tag() == tag)
    }

    pub fn is_uniform(self) -> bool {
        !matches!(self, QuantScheme::PowerOfTwo)
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantScheme::UniformAsymm => "asymm",
            QuantScheme::UniformSymm => "symm",
            QuantScheme::PowerOfTwo => "pow2",
        })
    }
}

impl FromStr for QuantScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asymm" => Ok(QuantScheme::UniformAsymm),
            "symm" => Ok(QuantScheme::UniformSymm),
            "pow2" => Ok(QuantScheme::PowerOfTwo),
            other => Err(Error::Argument(format!(
                "unknown scheme '{other}' (expected asymm, symm or pow2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Granularity {
    #[default]
    PerTensor,
    /// One parameter set per slice along axis 0. Applied to tensors of rank >= 2.
    PerChannel,
}

/// Parameters of one quantization group (the whole tensor or one channel).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantParams {
    Asymm { min: f32, max: f32 },
    Symm { max_abs: f32 },
    Pow2 { exp_min: i32, exp_max: i32 },
}

impl QuantParams {
    pub fn scheme(&self) -> QuantScheme {
        match self {
            QuantParams::Asymm { .. } => QuantScheme::UniformAsymm,
            QuantParams::Symm { .. } => QuantScheme::UniformSymm,
            QuantParams::Pow2 { .. } => QuantScheme::PowerOfTwo,
        }
    }

    /// Uniform level spacing. `None` for power-of-two.
    pub fn step_size(&self, bits: u8) -> Option<f64> {
        match *self {
            QuantParams::Asymm { min, max } => Some(uniform::asymm_step_size(min, max, bits)),
            QuantParams::Symm { max_abs } => Some(uniform::symm_step_size(max_abs, bits)),
            QuantParams::Pow2 { .. } => None,
        }
    }
}

/// Sign and exponent of a power-of-two level. `sign == 0` encodes exact zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pow2Code {
    pub sign: i8,
    pub exponent: i32,
}

impl Pow2Code {
    pub const ZERO: Pow2Code = Pow2Code {
        sign: 0,
        exponent: 0,
    };

    pub fn is_zero(&self) -> bool {
        self.sign == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Codes {
    /// Unsigned codes for asymmetric, signed for symmetric.
    Uniform(Vec<i32>),
    Pow2(Vec<Pow2Code>),
}

impl Codes {
    pub fn len(&self) -> usize {
        match self {
            Codes::Uniform(c) => c.len(),
            Codes::Pow2(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub scheme: QuantScheme,
    pub bit_width: u8,
    pub granularity: Granularity,
    /// One entry per tensor (per-tensor) or per axis-0 slice (per-channel).
    pub params: Vec<QuantParams>,
    pub codes: Codes,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Elements covered by each parameter group.
    pub fn group_len(&self) -> usize {
        self.len() / self.params.len().max(1)
    }

    /// Checks parameter counts, scheme consistency and that every code fits its range.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Internal(format!("quantized tensor '{}': {msg}", self.name));
        if !(MIN_BITS..=MAX_BITS).contains(&self.bit_width) {
            return Err(bad(format!("bit width {} outside [2, 8]", self.bit_width)));
        }
        let count: usize = self.shape.iter().product();
        if count != self.codes.len() {
            return Err(bad(format!(
                "{} codes for shape {:?}",
                self.codes.len(),
                self.shape
            )));
        }
        let groups = match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => self.shape.first().copied().unwrap_or(1),
        };
        if self.params.len() != groups {
            return Err(bad(format!(
                "{} parameter sets, expected {groups}",
                self.params.len()
            )));
        }
        if self.params.iter().any(|p| p.scheme() != self.scheme) {
            return Err(bad("parameters from a different scheme".into()));
        }
        match (&self.codes, self.scheme) {
            (Codes::Uniform(codes), QuantScheme::UniformAsymm) => {
                let hi = uniform::asymm_steps(self.bit_width);
                if let Some(c) = codes.iter().find(|c| !(0..=hi).contains(*c)) {
                    return Err(bad(format!("code {c} outside [0, {hi}]")));
                }
            }
            (Codes::Uniform(codes), QuantScheme::UniformSymm) => {
                let hi = uniform::symm_steps(self.bit_width);
                if let Some(c) = codes.iter().find(|c| !(-hi..=hi).contains(*c)) {
                    return Err(bad(format!("code {c} outside [-{hi}, {hi}]")));
                }
            }
            (Codes::Pow2(codes), QuantScheme::PowerOfTwo) => {
                let field = pow2::exponent_levels(self.bit_width - 1);
                let group = self.group_len();
                for (i, c) in codes.iter().enumerate() {
                    let QuantParams::Pow2 { exp_min, exp_max } = self.params[i / group] else {
                        unreachable!()
                    };
                    if exp_max < exp_min || exp_max - exp_min + 1 > field {
                        return Err(bad(format!(
                            "exponent window [{exp_min}, {exp_max}] does not fit {} bits",
                            self.bit_width
                        )));
                    }
                    if !c.is_zero()
                        && (c.sign.abs() != 1 || c.exponent < exp_min || c.exponent > exp_max)
                    {
                        return Err(bad(format!("pow2 code {c:?} outside window")));
                    }
                }
            }
            _ => return Err(bad("code kind does not match scheme".into())),
        }
        Ok(())
    }

    /// Distinct nonzero exponents used; zero for uniform schemes.
    pub fn distinct_exponents(&self) -> usize {
        match &self.codes {
            Codes::Pow2(codes) => {
                let mut exps: Vec<i32> = codes
                    .iter()
                    .filter(|c| !c.is_zero())
                    .map(|c| c.exponent)
                    .collect();
                exps.sort_unstable();
                exps.dedup();
                exps.len()
            }
            Codes::Uniform(_) => 0,
        }
    }

    /// Bits actually needed per element for a power-of-two tensor: one sign bit
    /// plus enough exponent bits to index the used exponents and the zero code.
    pub fn pow2_bit_levels(&self) -> Option<u32> {
        match self.codes {
            Codes::Pow2(_) => {
                let symbols = self.distinct_exponents() as u32 + 1;
                Some(1 + u32::BITS - (symbols - 1).leading_zeros())
            }
            Codes::Uniform(_) => None,
        }
    }
}

/// Scheme, bit width and granularity for a tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub scheme: QuantScheme,
    pub bits: u8,
    pub granularity: Granularity,
    /// Upper bound on the power-of-two exponent field; the field actually used
    /// is `min(pow2_exponent_bits, bits - 1)`.
    pub pow2_exponent_bits: u8,
}

impl QuantConfig {
    pub fn new(scheme: QuantScheme, bits: u8) -> Self {
        QuantConfig {
            scheme,
            bits,
            granularity: Granularity::PerTensor,
            pow2_exponent_bits: pow2::DEFAULT_EXPONENT_BITS,
        }
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    fn exponent_bits(&self) -> u8 {
        self.pow2_exponent_bits.clamp(1, self.bits - 1)
    }
}

pub fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )))
    }
}

pub fn quantize_asymm(x: &Tensor, bits: u8) -> Result<QuantizedTensor> {
    quantize(x, &QuantConfig::new(QuantScheme::UniformAsymm, bits))
}

pub fn quantize_symm(x: &Tensor, bits: u8) -> Result<QuantizedTensor> {
    quantize(x, &QuantConfig::new(QuantScheme::UniformSymm, bits))
}

/// Power-of-two with the default budget: 1 sign bit + 4 exponent bits.
pub fn quantize_pow2(x: &Tensor) -> Result<QuantizedTensor> {
    quantize(
        x,
        &QuantConfig::new(QuantScheme::PowerOfTwo, 1 + pow2::DEFAULT_EXPONENT_BITS),
    )
}

pub fn quantize(x: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    check_bits(cfg.bits)?;
    if x.is_empty() {
        return Err(Error::Argument(format!("tensor '{}' is empty", x.name)));
    }
    x.check_finite()?;
    let granularity = effective_granularity(x, cfg.granularity);
    let groups = groups(&x.data, &x.shape, granularity);
    let params: Vec<QuantParams> = groups
        .iter()
        .map(|g| derive_params(g, cfg.scheme, cfg.exponent_bits()))
        .collect();
    let codes = encode(&groups, &params, cfg.bits);
    let q = QuantizedTensor {
        name: x.name.clone(),
        shape: x.shape.clone(),
        scheme: cfg.scheme,
        bit_width: cfg.bits,
        granularity,
        params,
        codes,
    };
    debug_assert!(q.validate().is_ok());
    Ok(q)
}

/// Re-quantizes `x` with the scheme, width and parameters of `template`.
/// Applied to `dequantize(template)` this reproduces the template's codes.
pub fn quantize_with_params(x: &Tensor, template: &QuantizedTensor) -> Result<QuantizedTensor> {
    if x.shape != template.shape {
        return Err(Error::Argument(format!(
            "shape {:?} does not match template {:?}",
            x.shape, template.shape
        )));
    }
    x.check_finite()?;
    let groups = groups(&x.data, &x.shape, template.granularity);
    let codes = encode(&groups, &template.params, template.bit_width);
    Ok(QuantizedTensor {
        name: x.name.clone(),
        codes,
        ..template.clone()
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let group = q.group_len().max(1);
    let bits = q.bit_width;
    let data = match &q.codes {
        Codes::Uniform(codes) => codes
            .iter()
            .enumerate()
            .map(|(i, &c)| match q.params[i / group] {
                QuantParams::Asymm { min, max } => uniform::asymm_value(c, min, max, bits),
                QuantParams::Symm { max_abs } => uniform::symm_value(c, max_abs, bits),
                QuantParams::Pow2 { .. } => unreachable!("validated scheme"),
            })
            .collect(),
        Codes::Pow2(codes) => codes.iter().map(|&c| pow2::pow2_value(c)).collect(),
    };
    Tensor {
        name: q.name.clone(),
        shape: q.shape.clone(),
        data,
    }
}

fn effective_granularity(x: &Tensor, requested: Granularity) -> Granularity {
    match requested {
        Granularity::PerChannel if x.rank() >= 2 => Granularity::PerChannel,
        _ => Granularity::PerTensor,
    }
}

fn groups<'a>(data: &'a [f32], shape: &[usize], granularity: Granularity) -> Vec<&'a [f32]> {
    match granularity {
        Granularity::PerTensor => vec![data],
        Granularity::PerChannel => {
            let channels = shape.first().copied().unwrap_or(1).max(1);
            data.chunks(data.len() / channels).collect()
        }
    }
}

fn derive_params(values: &[f32], scheme: QuantScheme, exponent_bits: u8) -> QuantParams {
    match scheme {
        QuantScheme::UniformAsymm => {
            let (min, max) = crate::tensor::min_max(values).unwrap_or((0.0, 0.0));
            QuantParams::Asymm { min, max }
        }
        QuantScheme::UniformSymm => QuantParams::Symm {
            max_abs: values.iter().fold(0.0f32, |m, v| m.max(v.abs())),
        },
        QuantScheme::PowerOfTwo => {
            let (exp_min, exp_max) = pow2::exponent_window(values, exponent_bits);
            QuantParams::Pow2 { exp_min, exp_max }
        }
    }
}

fn encode(groups: &[&[f32]], params: &[QuantParams], bits: u8) -> Codes {
    match params.first().map(QuantParams::scheme) {
        Some(QuantScheme::PowerOfTwo) => Codes::Pow2(
            groups
                .iter()
                .zip(params)
                .flat_map(|(g, p)| {
                    let QuantParams::Pow2 { exp_min, exp_max } = *p else {
                        unreachable!()
                    };
                    g.iter().map(move |&x| pow2::pow2_code(x, exp_min, exp_max))
                })
                .collect(),
        ),
        _ => Codes::Uniform(
            groups
                .iter()
                .zip(params)
                .flat_map(|(g, p)| {
                    let p = *p;
                    g.iter().map(move |&x| match p {
                        QuantParams::Asymm { min, max } => uniform::asymm_code(x, min, max, bits),
                        QuantParams::Symm { max_abs } => uniform::symm_code(x, max_abs, bits),
                        QuantParams::Pow2 { .. } => unreachable!(),
                    })
                })
                .collect(),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f32]) -> Tensor {
        Tensor::from_vec("x", data.to_vec()).unwrap()
    }

    fn uniform_codes(q: &QuantizedTensor) -> &[i32] {
        match &q.codes {
            Codes::Uniform(c) => c,
            _ => panic!("expected uniform codes"),
        }
    }

    #[test]
    fn asymm_examples() {
        let q = quantize_asymm(&t(&[-1.0, 1.0]), 8).unwrap();
        assert_eq!(uniform_codes(&q), &[0, 255]);
        let q = quantize_asymm(&t(&[-1.0, 0.0, 1.0]), 8).unwrap();
        assert_eq!(uniform_codes(&q), &[0, 128, 255]);
        assert_eq!(dequantize(&q).data[0], -1.0);
    }

    #[test]
    fn symm_examples() {
        let q = quantize_symm(&t(&[-2.0, 0.0, 2.0]), 8).unwrap();
        assert_eq!(uniform_codes(&q), &[-127, 0, 127]);
        let q = quantize_symm(&t(&[1.0, 2.0]), 4).unwrap();
        assert_eq!(uniform_codes(&q), &[4, 7]);
        assert!((dequantize(&q).data[0] - 4.0 * 2.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn pow2_examples() {
        let d = |v: &[f32]| dequantize(&quantize_pow2(&t(v)).unwrap()).data;
        assert_eq!(d(&[2.0, -0.5]), vec![2.0, -0.5]);
        assert_eq!(d(&[3.0]), vec![4.0]);
        assert_eq!(d(&[0.7]), vec![0.5]);
        assert_eq!(d(&[0.0]), vec![0.0]);
    }

    #[test]
    fn degenerate_inputs() {
        let q = quantize_asymm(&t(&[3.0, 3.0, 3.0]), 4).unwrap();
        assert_eq!(uniform_codes(&q), &[0, 0, 0]);
        assert_eq!(dequantize(&q).data, vec![3.0; 3]);
        let q = quantize_symm(&t(&[0.0, 0.0]), 4).unwrap();
        assert_eq!(q.params, vec![QuantParams::Symm { max_abs: 0.0 }]);
        assert_eq!(dequantize(&q).data, vec![0.0, 0.0]);
        let q = quantize_pow2(&t(&[0.0, 0.0])).unwrap();
        assert_eq!(dequantize(&q).data, vec![0.0, 0.0]);
    }

    #[test]
    fn argument_errors() {
        let empty = Tensor {
            name: "e".into(),
            shape: vec![0],
            data: vec![],
        };
        assert!(matches!(quantize_asymm(&empty, 4), Err(Error::Argument(_))));
        assert!(matches!(
            quantize_asymm(&t(&[1.0]), 9),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            quantize_symm(&t(&[1.0]), 1),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            quantize_asymm(&t(&[f32::NAN]), 4),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn per_channel_uses_axis_zero() {
        let x = Tensor::new("k", vec![2, 2], vec![-1.0, 1.0, 0.0, 10.0]).unwrap();
        let cfg = QuantConfig::new(QuantScheme::UniformAsymm, 2)
            .with_granularity(Granularity::PerChannel);
        let q = quantize(&x, &cfg).unwrap();
        assert_eq!(q.params.len(), 2);
        assert_eq!(uniform_codes(&q), &[0, 3, 0, 3]);
        assert_eq!(dequantize(&q).data, x.data);
        // rank-1 tensors fall back to a single group
        let q = quantize(&t(&[1.0, 2.0]), &cfg).unwrap();
        assert_eq!(q.granularity, Granularity::PerTensor);
    }

    #[test]
    fn pow2_window_respects_budget() {
        let x = t(&[1.0, 2f32.powi(-20), -0.25]);
        let q = quantize(&x, &QuantConfig::new(QuantScheme::PowerOfTwo, 3)).unwrap();
        // 2 exponent bits -> 3 levels: [-2, 0]
        assert_eq!(
            q.params,
            vec![QuantParams::Pow2 {
                exp_min: -2,
                exp_max: 0
            }]
        );
        assert_eq!(dequantize(&q).data, vec![1.0, 0.0, -0.25]);
        q.validate().unwrap();
    }

    #[test]
    fn bit_levels_counts_used_exponents() {
        let q = quantize_pow2(&t(&[1.0, 2.0, 4.0, 0.0])).unwrap();
        // 3 exponents + zero code = 4 symbols -> 2 bits, plus sign
        assert_eq!(q.pow2_bit_levels(), Some(3));
        let q = quantize_pow2(&t(&[1.0])).unwrap();
        assert_eq!(q.pow2_bit_levels(), Some(2));
    }

    #[test]
    fn validate_catches_out_of_range_codes() {
        let mut q = quantize_asymm(&t(&[0.0, 1.0]), 2).unwrap();
        q.codes = Codes::Uniform(vec![0, 4]);
        assert!(matches!(q.validate(), Err(Error::Internal(_))));
    }
}
