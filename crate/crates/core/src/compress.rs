//! Deflate size report for packed quantized models.
//!
//! The compressed stream is the concatenation of the packed code payloads;
//! headers and parameters are excluded so the ratio reflects the parameters only.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;

use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::quant::{quantize_model, select_tensors, QuantScheme, QuantizeOptions, FP32_BITS};
use crate::store::{bitpack, ModelFile, PackedQuantModel};

/// Upper bound on how much raw deflate can add to an incompressible input of
/// the sizes handled here (stored-block headers).
pub const CODEC_OVERHEAD_BOUND: usize = 64;

pub const SIZE_CSV_HEADER: &str =
    "scheme,bits,raw_fp32_bytes,packed_bytes,compressed_bytes,packed_ratio,compression_ratio,alphabet";

#[derive(Debug, Clone, PartialEq)]
pub struct SizeRow {
    pub scheme: QuantScheme,
    /// [`FP32_BITS`] for the unquantized f32 stream.
    pub bit_width: u8,
    pub raw_fp32_bytes: usize,
    pub packed_bytes: usize,
    pub compressed_bytes: usize,
    /// Distinct symbols in the stream (code words, or f32 bit patterns).
    pub alphabet: usize,
}

impl SizeRow {
    pub fn packed_ratio(&self) -> f64 {
        self.raw_fp32_bytes as f64 / self.packed_bytes.max(1) as f64
    }

    /// `raw_fp32_bytes / compressed_bytes`.
    pub fn compression_ratio(&self) -> f64 {
        self.raw_fp32_bytes as f64 / self.compressed_bytes.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SizeReport {
    pub rows: Vec<SizeRow>,
}

impl SizeReport {
    pub fn find(&self, scheme: QuantScheme, bits: u8) -> Option<&SizeRow> {
        self.rows
            .iter()
            .find(|r| r.scheme == scheme && r.bit_width == bits)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SIZE_CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{:.4},{:.4},{}",
                r.scheme,
                r.bit_width,
                r.raw_fp32_bytes,
                r.packed_bytes,
                r.compressed_bytes,
                r.packed_ratio(),
                r.compression_ratio(),
                r.alphabet
            )
            .unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<7} {:>4} {:>12} {:>12} {:>12} {:>8} {:>8} {:>8}\n",
            "scheme", "bits", "fp32 B", "packed B", "deflate B", "raw/pk", "raw/cmp", "symbols"
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<7} {:>4} {:>12} {:>12} {:>12} {:>8.2} {:>8.2} {:>8}",
                r.scheme.to_string(),
                r.bit_width,
                r.raw_fp32_bytes,
                r.packed_bytes,
                r.compressed_bytes,
                r.packed_ratio(),
                r.compression_ratio(),
                r.alphabet
            )
            .unwrap();
        }
        out
    }
}

/// Raw deflate at the maximum level.
pub fn deflate_len(bytes: &[u8]) -> Result<usize> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
    enc.write_all(bytes)
        .and_then(|_| enc.finish())
        .map(|v| v.len())
        .map_err(|e| Error::Internal(format!("deflate failed: {e}")))
}

/// Distinct code words across all tensors of a packed model.
pub fn alphabet_size(packed: &PackedQuantModel) -> usize {
    let mut seen = HashSet::new();
    for t in &packed.tensors {
        if let Some(words) = bitpack::unpack(&t.payload, t.element_count(), packed.bit_width) {
            seen.extend(words);
        }
    }
    seen.len()
}

/// One row per `(scheme, bits)`. `options` supplies granularity and tensor
/// selection; its scheme and bit width are overridden per cell.
pub fn measure_sizes(
    model: &ModelFile,
    schemes: &[QuantScheme],
    bit_widths: &[u8],
    options: &QuantizeOptions,
) -> Result<SizeReport> {
    let mut rows = Vec::with_capacity(schemes.len() * bit_widths.len());
    for &scheme in schemes {
        for &bits in bit_widths {
            let opts = QuantizeOptions {
                scheme,
                bits,
                ..*options
            };
            let row = if bits == FP32_BITS {
                fp32_row(model, &opts)?
            } else {
                let q = quantize_model(model, &opts)?;
                let packed = q.packed.expect("quantized mode packs");
                let raw = q.quantized.iter().map(|t| t.len() * 4).sum();
                SizeRow {
                    scheme,
                    bit_width: bits,
                    raw_fp32_bytes: raw,
                    packed_bytes: packed.payload_bytes(),
                    compressed_bytes: deflate_len(&packed.payload_stream())?,
                    alphabet: alphabet_size(&packed),
                }
            };
            rows.push(row);
        }
    }
    Ok(SizeReport { rows })
}

fn fp32_row(model: &ModelFile, opts: &QuantizeOptions) -> Result<SizeRow> {
    let model = if opts.fold_bn {
        crate::quant::fold_batchnorm(model)?
    } else {
        model.clone()
    };
    let (names, _) = select_tensors(&model, opts)?;
    let mut stream = Vec::new();
    let mut symbols = HashSet::new();
    for t in names.iter().filter_map(|n| model.tensor(n)) {
        for v in &t.data {
            stream.extend_from_slice(&v.to_le_bytes());
            symbols.insert(v.to_bits());
        }
    }
    Ok(SizeRow {
        scheme: opts.scheme,
        bit_width: FP32_BITS,
        raw_fp32_bytes: stream.len(),
        packed_bytes: stream.len(),
        compressed_bytes: deflate_len(&stream)?,
        alphabet: symbols.len(),
    })
}
