//! `BQPK` bit-packed quantized model.
//!
//! ```text
//! "BQPK" | u8 scheme tag | u8 bit width | u32 tensor_count
//! per tensor:
//!   u32 name_len | name | u8 rank | u32 dims[rank] | u8 granularity (0 tensor, 1 channel)
//!   u32 param_count | params   (asymm: f32 min, f32 max; symm: f32 max_abs; pow2: i32 exp_min, i32 exp_max)
//!   u64 payload_len | payload  (codes packed LSB-first at bit width, zero-padded to a byte)
//! ```
//!
//! Code words: asymmetric codes are stored as-is; symmetric codes are offset by
//! `2^(n-1) - 1`; power-of-two words hold the sign in the top bit and the
//! exponent field below it, where field value 0 is zero and `k > 0` is
//! `exp_min + k - 1`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::{
    uniform, Codes, Granularity, Pow2Code, QuantParams, QuantScheme, QuantizedTensor,
};
use crate::store::bitpack;
use crate::store::reader::Reader;

pub const PACKED_MAGIC: &[u8; 4] = b"BQPK";

#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub granularity: Granularity,
    pub params: Vec<QuantParams>,
    pub payload: Vec<u8>,
}

impl PackedTensor {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Bytes of header and parameters preceding the payload in the file.
    pub fn header_bytes(&self) -> usize {
        let params: usize = self
            .params
            .iter()
            .map(|p| match p {
                QuantParams::Symm { .. } => 4,
                _ => 8,
            })
            .sum();
        4 + self.name.len() + 1 + 4 * self.shape.len() + 1 + 4 + params + 8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedQuantModel {
    pub scheme: QuantScheme,
    pub bit_width: u8,
    pub tensors: Vec<PackedTensor>,
}

/// Packs tensors quantized with one scheme and bit width.
pub fn pack_quantized(
    tensors: &[QuantizedTensor],
    scheme: QuantScheme,
    bit_width: u8,
) -> Result<PackedQuantModel> {
    crate::quant::check_bits(bit_width)?;
    let mut packed = Vec::with_capacity(tensors.len());
    for q in tensors {
        if q.scheme != scheme || q.bit_width != bit_width {
            return Err(Error::Argument(format!(
                "tensor '{}' is {} at {} bits, expected {scheme} at {bit_width} bits",
                q.name, q.scheme, q.bit_width
            )));
        }
        q.validate()?;
        let words = code_words(q);
        packed.push(PackedTensor {
            name: q.name.clone(),
            shape: q.shape.clone(),
            granularity: q.granularity,
            params: q.params.clone(),
            payload: bitpack::pack(&words, bit_width),
        });
    }
    Ok(PackedQuantModel {
        scheme,
        bit_width,
        tensors: packed,
    })
}

fn code_words(q: &QuantizedTensor) -> Vec<u32> {
    let n = q.bit_width;
    match &q.codes {
        Codes::Uniform(codes) => match q.scheme {
            QuantScheme::UniformSymm => {
                let off = uniform::symm_steps(n);
                codes.iter().map(|&c| (c + off) as u32).collect()
            }
            _ => codes.iter().map(|&c| c as u32).collect(),
        },
        Codes::Pow2(codes) => {
            let group = q.group_len();
            codes
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if c.is_zero() {
                        return 0;
                    }
                    let QuantParams::Pow2 { exp_min, .. } = q.params[i / group] else {
                        unreachable!("validated")
                    };
                    let field = (c.exponent - exp_min + 1) as u32;
                    let sign = u32::from(c.sign < 0) << (n - 1);
                    sign | field
                })
                .collect()
        }
    }
}

impl PackedQuantModel {
    /// Recovers the quantized tensors exactly.
    pub fn unpack(&self) -> Result<Vec<QuantizedTensor>> {
        self.tensors.iter().map(|t| self.unpack_tensor(t)).collect()
    }

    fn unpack_tensor(&self, t: &PackedTensor) -> Result<QuantizedTensor> {
        let n = self.bit_width;
        let count = t.element_count();
        let words = bitpack::unpack(&t.payload, count, n)
            .ok_or_else(|| Error::Corruption(format!("tensor '{}': malformed payload", t.name)))?;
        let corrupt = |msg: &str| Error::Corruption(format!("tensor '{}': {msg}", t.name));
        let codes = match self.scheme {
            QuantScheme::UniformAsymm => Codes::Uniform(words.iter().map(|&w| w as i32).collect()),
            QuantScheme::UniformSymm => {
                let off = uniform::symm_steps(n);
                if words.iter().any(|&w| w as i32 > 2 * off) {
                    return Err(corrupt("symmetric code out of range"));
                }
                Codes::Uniform(words.iter().map(|&w| w as i32 - off).collect())
            }
            QuantScheme::PowerOfTwo => {
                let group = count / t.params.len().max(1);
                let field_mask = (1u32 << (n - 1)) - 1;
                let mut codes = Vec::with_capacity(count);
                for (i, &w) in words.iter().enumerate() {
                    let field = w & field_mask;
                    let negative = w >> (n - 1) == 1;
                    if field == 0 {
                        if negative {
                            return Err(corrupt("negative zero code"));
                        }
                        codes.push(Pow2Code::ZERO);
                        continue;
                    }
                    let Some(QuantParams::Pow2 { exp_min, .. }) = t.params.get(i / group.max(1))
                    else {
                        return Err(corrupt("parameter count does not cover codes"));
                    };
                    codes.push(Pow2Code {
                        sign: if negative { -1 } else { 1 },
                        exponent: exp_min + field as i32 - 1,
                    });
                }
                Codes::Pow2(codes)
            }
        };
        let q = QuantizedTensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            scheme: self.scheme,
            bit_width: n,
            granularity: t.granularity,
            params: t.params.clone(),
            codes,
        };
        q.validate()
            .map_err(|e| Error::Corruption(format!("tensor '{}': {e}", t.name)))?;
        Ok(q)
    }

    /// Sum of code payloads, headers excluded.
    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|t| t.payload.len()).sum()
    }

    /// All payloads concatenated in tensor order.
    pub fn payload_stream(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.payload.iter().copied())
            .collect()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(PackedTensor::element_count).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PACKED_MAGIC);
        out.push(self.scheme.tag());
        out.push(self.bit_width);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(match t.granularity {
                Granularity::PerTensor => 0,
                Granularity::PerChannel => 1,
            });
            out.extend_from_slice(&(t.params.len() as u32).to_le_bytes());
            for p in &t.params {
                match *p {
                    QuantParams::Asymm { min, max } => {
                        out.extend_from_slice(&min.to_le_bytes());
                        out.extend_from_slice(&max.to_le_bytes());
                    }
                    QuantParams::Symm { max_abs } => out.extend_from_slice(&max_abs.to_le_bytes()),
                    QuantParams::Pow2 { exp_min, exp_max } => {
                        out.extend_from_slice(&exp_min.to_le_bytes());
                        out.extend_from_slice(&exp_max.to_le_bytes());
                    }
                }
            }
            out.extend_from_slice(&(t.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&t.payload);
        }
        out
    }

    /// Parses and fully validates, including every code.
    pub fn from_bytes(bytes: &[u8]) -> Result<PackedQuantModel> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != PACKED_MAGIC {
            return Err(Error::Format("bad magic, expected BQPK".into()));
        }
        let tag = r.u8()?;
        let scheme = QuantScheme::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("unknown scheme tag {tag}")))?;
        let bit_width = r.u8()?;
        crate::quant::check_bits(bit_width).map_err(|e| Error::Format(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let granularity = match r.u8()? {
                0 => Granularity::PerTensor,
                1 => Granularity::PerChannel,
                g => return Err(Error::Format(format!("unknown granularity tag {g}"))),
            };
            let n_params = r.u32()? as usize;
            let mut params = Vec::with_capacity(n_params.min(1 << 16));
            for _ in 0..n_params {
                params.push(match scheme {
                    QuantScheme::UniformAsymm => QuantParams::Asymm {
                        min: r.f32()?,
                        max: r.f32()?,
                    },
                    QuantScheme::UniformSymm => QuantParams::Symm { max_abs: r.f32()? },
                    QuantScheme::PowerOfTwo => QuantParams::Pow2 {
                        exp_min: r.i32()?,
                        exp_max: r.i32()?,
                    },
                });
            }
            let payload_len = usize::try_from(r.u64()?)
                .map_err(|_| Error::Corruption("payload length overflows".into()))?;
            let payload = r.take(payload_len)?.to_vec();
            tensors.push(PackedTensor {
                name,
                shape,
                granularity,
                params,
                payload,
            });
        }
        if !r.is_empty() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        let model = PackedQuantModel {
            scheme,
            bit_width,
            tensors,
        };
        model.unpack()?;
        Ok(model)
    }
}

pub fn save_packed(model: &PackedQuantModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_packed(path: impl AsRef<Path>) -> Result<PackedQuantModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    PackedQuantModel::from_bytes(&bytes)
}
