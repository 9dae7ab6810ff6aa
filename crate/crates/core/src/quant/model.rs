//! Whole-model simulated quantization.

use std::collections::{HashMap, HashSet};

use log::warn;

use crate::error::{Error, Result};
use crate::infer::graph::{GraphSpec, Layer, TensorRole};
use crate::quant::{dequantize, quantize, Granularity, QuantConfig, QuantScheme, QuantizedTensor};
use crate::store::packed::{pack_quantized, PackedQuantModel};
use crate::store::ModelFile;

/// Bit width meaning "leave every tensor in f32".
pub const FP32_BITS: u8 = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizeOptions {
    pub scheme: QuantScheme,
    /// 2..=8, or [`FP32_BITS`] for a no-op pass.
    pub bits: u8,
    pub granularity: Granularity,
    pub quantize_bias: bool,
    /// Batch-norm scale and shift.
    pub quantize_bn_affine: bool,
    /// Batch-norm moving mean and variance.
    pub quantize_bn_stats: bool,
    pub fold_bn: bool,
    pub pow2_exponent_bits: u8,
}

impl QuantizeOptions {
    pub fn new(scheme: QuantScheme, bits: u8) -> Self {
        QuantizeOptions {
            scheme,
            bits,
            granularity: Granularity::PerTensor,
            quantize_bias: false,
            quantize_bn_affine: true,
            quantize_bn_stats: true,
            fold_bn: false,
            pow2_exponent_bits: super::pow2::DEFAULT_EXPONENT_BITS,
        }
    }

    fn selects(&self, role: TensorRole) -> bool {
        match role {
            TensorRole::DenseWeight | TensorRole::ConvWeight => true,
            TensorRole::Bias => self.quantize_bias,
            TensorRole::BnScale | TensorRole::BnShift => self.quantize_bn_affine,
            TensorRole::BnMean | TensorRole::BnVar => self.quantize_bn_stats,
            TensorRole::Unknown => false,
        }
    }

    pub fn tensor_config(&self) -> QuantConfig {
        QuantConfig {
            scheme: self.scheme,
            bits: self.bits,
            granularity: self.granularity,
            pow2_exponent_bits: self.pow2_exponent_bits,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantizedModel {
    /// The input model with selected tensors replaced by their dequantized images.
    pub model: ModelFile,
    /// Codes of the replaced tensors, in model order.
    pub quantized: Vec<QuantizedTensor>,
    /// `None` in f32 passthrough mode.
    pub packed: Option<PackedQuantModel>,
    pub warnings: Vec<String>,
}

impl QuantizedModel {
    /// Names of tensors that were quantized.
    pub fn quantized_names(&self) -> impl Iterator<Item = &str> {
        self.quantized.iter().map(|q| q.name.as_str())
    }
}

/// Names of the tensors `options` would quantize, in model order, plus warnings
/// for tensors bound only by layers the engine does not know.
pub fn select_tensors(
    model: &ModelFile,
    options: &QuantizeOptions,
) -> Result<(Vec<String>, Vec<String>)> {
    let graph = model.graph_spec()?;
    let mut role_of: HashMap<&str, TensorRole> = HashMap::new();
    let mut warnings = Vec::new();
    for (layer, name, role) in graph.tensor_refs() {
        if role == TensorRole::Unknown {
            warnings.push(format!(
                "layer {layer} ({}): tensor '{name}' skipped, layer kind not quantizable",
                graph.layers[layer].kind()
            ));
        }
        role_of.entry(name).or_insert(role);
    }
    let names = model
        .tensors
        .iter()
        .filter(|t| {
            role_of
                .get(t.name.as_str())
                .is_some_and(|r| options.selects(*r))
        })
        .map(|t| t.name.clone())
        .collect();
    Ok((names, warnings))
}

/// Replaces every selected parameter tensor by `dequantize(quantize(t))` and packs the codes.
pub fn quantize_model(model: &ModelFile, options: &QuantizeOptions) -> Result<QuantizedModel> {
    model.validate()?;
    if options.bits != FP32_BITS {
        super::check_bits(options.bits)?;
    }
    let mut out = if options.fold_bn {
        fold_batchnorm(model)?
    } else {
        model.clone()
    };
    if options.bits == FP32_BITS {
        return Ok(QuantizedModel {
            model: out,
            quantized: Vec::new(),
            packed: None,
            warnings: Vec::new(),
        });
    }
    let (names, warnings) = select_tensors(&out, options)?;
    for w in &warnings {
        warn!("{w}");
    }
    let cfg = options.tensor_config();
    let selected: HashSet<&str> = names.iter().map(String::as_str).collect();
    let quantized = out
        .tensors
        .iter()
        .filter(|t| selected.contains(t.name.as_str()))
        .map(|t| quantize(t, &cfg))
        .collect::<Result<Vec<_>>>()?;
    for q in &quantized {
        let deq = dequantize(q);
        let slot = out
            .tensor_mut(&q.name)
            .ok_or_else(|| Error::Internal(format!("tensor '{}' vanished", q.name)))?;
        slot.data = deq.data;
    }
    let packed = pack_quantized(&quantized, options.scheme, options.bits)?;
    Ok(QuantizedModel {
        model: out,
        quantized,
        packed: Some(packed),
        warnings,
    })
}

/// Folds every batch-norm layer that directly follows a conv2d or dense layer
/// into that layer's weight and bias. Other batch-norm layers are left alone.
pub fn fold_batchnorm(model: &ModelFile) -> Result<ModelFile> {
    let graph = model.graph_spec()?;
    let mut use_count: HashMap<&str, usize> = HashMap::new();
    for (_, name, _) in graph.tensor_refs() {
        *use_count.entry(name).or_default() += 1;
    }
    let mut tensors = model.tensors.clone();
    let mut names: HashSet<String> = tensors.iter().map(|t| t.name.clone()).collect();
    let mut layers: Vec<Layer> = Vec::with_capacity(graph.layers.len());
    let mut i = 0;
    while i < graph.layers.len() {
        let layer = &graph.layers[i];
        let next = graph.layers.get(i + 1);
        let (weight, bias) = match layer {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => (weight, bias),
            _ => {
                layers.push(layer.clone());
                i += 1;
                continue;
            }
        };
        let Some(Layer::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            eps,
        }) = next
        else {
            layers.push(layer.clone());
            i += 1;
            continue;
        };
        for shared in std::iter::once(weight).chain(bias.iter()) {
            if use_count[shared.as_str()] > 1 {
                return Err(Error::Argument(format!(
                    "cannot fold batchnorm into layer {i}: tensor '{shared}' is shared"
                )));
            }
        }
        let get = |n: &str| {
            model
                .tensor(n)
                .map(|t| t.data.clone())
                .ok_or_else(|| Error::Validation(format!("missing tensor '{n}'")))
        };
        let (g, b, m, v) = (get(gamma)?, get(beta)?, get(mean)?, get(var)?);
        let w = model.tensor(weight).expect("validated");
        let out_ch = w.shape[0];
        if [&g, &b, &m, &v].iter().any(|p| p.len() != out_ch) {
            return Err(Error::Shape {
                index: i + 1,
                kind: "batchnorm".into(),
                message: format!("parameters do not match {out_ch} output channels"),
            });
        }
        let scale: Vec<f64> = (0..out_ch)
            .map(|o| g[o] as f64 / (v[o] as f64 + *eps as f64).sqrt())
            .collect();
        let per_out = w.len() / out_ch;
        let folded_w: Vec<f32> = w
            .data
            .iter()
            .enumerate()
            .map(|(k, &x)| (x as f64 * scale[k / per_out]) as f32)
            .collect();
        let old_bias = match bias {
            Some(bn) => get(bn)?,
            None => vec![0.0; out_ch],
        };
        let folded_b: Vec<f32> = (0..out_ch)
            .map(|o| ((old_bias[o] as f64 - m[o] as f64) * scale[o] + b[o] as f64) as f32)
            .collect();
        let bias_name = match bias {
            Some(bn) => bn.clone(),
            None => {
                let mut candidate = format!("{weight}.folded_bias");
                while names.contains(&candidate) {
                    candidate.push('_');
                }
                names.insert(candidate.clone());
                tensors.push(crate::tensor::Tensor::new(
                    candidate.clone(),
                    vec![out_ch],
                    folded_b.clone(),
                )?);
                candidate
            }
        };
        for t in tensors.iter_mut() {
            if &t.name == weight {
                t.data = folded_w.clone();
            } else if t.name == bias_name {
                t.data = folded_b.clone();
            }
        }
        layers.push(match layer {
            Layer::Conv2d { stride, pad, .. } => Layer::Conv2d {
                weight: weight.clone(),
                bias: Some(bias_name),
                stride: *stride,
                pad: *pad,
            },
            _ => Layer::Dense {
                weight: weight.clone(),
                bias: Some(bias_name),
            },
        });
        i += 2;
    }
    let folded = GraphSpec {
        input_shape: graph.input_shape.clone(),
        layers,
    };
    let still_used: HashSet<&str> = folded.tensor_refs().map(|(_, n, _)| n).collect();
    let referenced_before: HashSet<&str> = graph.tensor_refs().map(|(_, n, _)| n).collect();
    // Drop batch-norm tensors that no layer uses anymore; keep unrelated extras.
    tensors.retain(|t| {
        still_used.contains(t.name.as_str()) || !referenced_before.contains(t.name.as_str())
    });
    ModelFile::new(tensors, folded.to_text())
}
