//! Textual layer description.
//!
//! One layer per line, `kind key=value key=value ...`. The first non-blank
//! line declares the input shape:
//!
//! ```text
//! input shape=1,8,8
//! conv2d weight=conv1.w bias=conv1.b stride=1 pad=1
//! batchnorm gamma=bn1.g beta=bn1.b mean=bn1.m var=bn1.v eps=0.00001
//! relu
//! maxpool size=2 stride=2
//! flatten
//! dense weight=fc.w bias=fc.b
//! softmax
//! ```
//!
//! Lines starting with `#` are comments. Conv padding is an explicit integer;
//! `pad=same` / `pad=valid` are accepted only by [`GraphSpec::parse_with_shorthand`].

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Keys whose values name tensors, for any layer kind.
pub const BINDING_KEYS: [&str; 6] = ["weight", "bias", "gamma", "beta", "mean", "var"];

pub const DEFAULT_BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Explicit(usize),
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense {
        weight: String,
        bias: Option<String>,
    },
    Conv2d {
        weight: String,
        bias: Option<String>,
        stride: usize,
        pad: Padding,
    },
    BatchNorm {
        gamma: String,
        beta: String,
        mean: String,
        var: String,
        eps: f32,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    AvgPool {
        size: usize,
        stride: usize,
    },
    Softmax,
    Flatten,
    /// A kind the engine cannot execute. Kept so that files produced by other
    /// tools still load; quantization skips its tensors and forward rejects it.
    Other {
        kind: String,
        params: BTreeMap<String, String>,
    },
}

/// Role of a tensor inside the layer that binds it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    DenseWeight,
    ConvWeight,
    Bias,
    BnScale,
    BnShift,
    BnMean,
    BnVar,
    Unknown,
}

impl Layer {
    pub fn kind(&self) -> &str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Softmax => "softmax",
            Layer::Flatten => "flatten",
            Layer::Other { kind, .. } => kind,
        }
    }

    /// Tensor names referenced by this layer with their roles, in declaration order.
    pub fn bindings(&self) -> Vec<(&str, TensorRole)> {
        match self {
            Layer::Dense { weight, bias } => {
                let mut out = vec![(weight.as_str(), TensorRole::DenseWeight)];
                out.extend(bias.as_deref().map(|b| (b, TensorRole::Bias)));
                out
            }
            Layer::Conv2d { weight, bias, .. } => {
                let mut out = vec![(weight.as_str(), TensorRole::ConvWeight)];
                out.extend(bias.as_deref().map(|b| (b, TensorRole::Bias)));
                out
            }
            Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                ..
            } => vec![
                (gamma.as_str(), TensorRole::BnScale),
                (beta.as_str(), TensorRole::BnShift),
                (mean.as_str(), TensorRole::BnMean),
                (var.as_str(), TensorRole::BnVar),
            ],
            Layer::Other { params, .. } => BINDING_KEYS
                .iter()
                .filter_map(|k| params.get(*k))
                .map(|v| (v.as_str(), TensorRole::Unknown))
                .collect(),
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Dense { weight, bias } => {
                write!(f, "dense weight={weight}")?;
                if let Some(b) = bias {
                    write!(f, " bias={b}")?;
                }
                Ok(())
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                pad,
            } => {
                write!(f, "conv2d weight={weight}")?;
                if let Some(b) = bias {
                    write!(f, " bias={b}")?;
                }
                let pad = match pad {
                    Padding::Explicit(p) => p.to_string(),
                    Padding::Same => "same".into(),
                    Padding::Valid => "valid".into(),
                };
                write!(f, " stride={stride} pad={pad}")
            }
            Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps,
            } => write!(
                f,
                "batchnorm gamma={gamma} beta={beta} mean={mean} var={var} eps={eps:?}"
            ),
            Layer::Relu => f.write_str("relu"),
            Layer::MaxPool { size, stride } => write!(f, "maxpool size={size} stride={stride}"),
            Layer::AvgPool { size, stride } => write!(f, "avgpool size={size} stride={stride}"),
            Layer::Softmax => f.write_str("softmax"),
            Layer::Flatten => f.write_str("flatten"),
            Layer::Other { kind, params } => {
                f.write_str(kind)?;
                for (k, v) in params {
                    write!(f, " {k}={v}")?;
                }
                Ok(())
            }
        }
    }
}

/// Input shape plus ordered layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl GraphSpec {
    /// Strict parse: explicit integer padding only. This is what the container loader uses.
    pub fn parse(text: &str) -> Result<GraphSpec> {
        let spec = Self::parse_inner(text)?;
        for (i, layer) in spec.layers.iter().enumerate() {
            if let Layer::Conv2d { pad, .. } = layer {
                if !matches!(pad, Padding::Explicit(_)) {
                    return Err(Error::Format(format!(
                        "layer {i}: padding shorthand is not allowed in stored graphs"
                    )));
                }
            }
        }
        Ok(spec)
    }

    /// Parse accepting `pad=same|valid`. Resolve with [`GraphSpec::resolve_padding`]
    /// before storing or executing.
    pub fn parse_with_shorthand(text: &str) -> Result<GraphSpec> {
        Self::parse_inner(text)
    }

    /// Replaces padding shorthand by explicit values given a kernel-size lookup
    /// (`same` requires an odd kernel and stride 1).
    pub fn resolve_padding(&mut self, kernel_size: impl Fn(&str) -> Option<usize>) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::Conv2d {
                weight,
                stride,
                pad,
                ..
            } = layer
            {
                let resolved = match *pad {
                    Padding::Explicit(p) => p,
                    Padding::Valid => 0,
                    Padding::Same => {
                        let k = kernel_size(weight).ok_or_else(|| {
                            Error::Validation(format!("layer {i}: unknown tensor '{weight}'"))
                        })?;
                        if k % 2 == 0 || *stride != 1 {
                            return Err(Error::Argument(format!(
                                "layer {i}: pad=same needs an odd kernel and stride 1 (kernel {k}, stride {stride})"
                            )));
                        }
                        k / 2
                    }
                };
                *pad = Padding::Explicit(resolved);
            }
        }
        Ok(())
    }

    fn parse_inner(text: &str) -> Result<GraphSpec> {
        let mut input_shape = None;
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut words = line.split_whitespace();
            let kind = words.next().expect("non-empty line");
            let mut params = BTreeMap::new();
            for word in words {
                let (k, v) = word.split_once('=').ok_or_else(|| {
                    Error::Format(format!(
                        "line {}: expected key=value, got '{word}'",
                        lineno + 1
                    ))
                })?;
                if k.is_empty() || v.is_empty() {
                    return Err(Error::Format(format!(
                        "line {}: empty key or value",
                        lineno + 1
                    )));
                }
                if params.insert(k.to_string(), v.to_string()).is_some() {
                    return Err(Error::Format(format!(
                        "line {}: duplicate key '{k}'",
                        lineno + 1
                    )));
                }
            }
            let mut fields = Fields {
                line: lineno + 1,
                params,
            };
            if input_shape.is_none() {
                if kind != "input" {
                    return Err(Error::Format(format!(
                        "line {}: graph must start with an 'input' line",
                        lineno + 1
                    )));
                }
                let shape = fields.required("shape")?;
                let dims = shape
                    .split(',')
                    .map(|d| d.trim().parse::<usize>().ok().filter(|&d| d > 0))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| {
                        Error::Format(format!("line {}: bad input shape '{shape}'", lineno + 1))
                    })?;
                fields.finish()?;
                input_shape = Some(dims);
                continue;
            }
            let layer = match kind {
                "input" => {
                    return Err(Error::Format(format!(
                        "line {}: duplicate 'input' line",
                        lineno + 1
                    )))
                }
                "dense" => Layer::Dense {
                    weight: fields.required("weight")?,
                    bias: fields.optional("bias"),
                },
                "conv2d" => {
                    let weight = fields.required("weight")?;
                    let bias = fields.optional("bias");
                    let stride = fields.usize_or("stride", 1)?;
                    let pad = match fields.optional("pad").as_deref() {
                        None => Padding::Explicit(0),
                        Some("same") => Padding::Same,
                        Some("valid") => Padding::Valid,
                        Some(p) => Padding::Explicit(p.parse().map_err(|_| {
                            Error::Format(format!("line {}: bad pad '{p}'", lineno + 1))
                        })?),
                    };
                    Layer::Conv2d {
                        weight,
                        bias,
                        stride,
                        pad,
                    }
                }
                "batchnorm" => Layer::BatchNorm {
                    gamma: fields.required("gamma")?,
                    beta: fields.required("beta")?,
                    mean: fields.required("mean")?,
                    var: fields.required("var")?,
                    eps: match fields.optional("eps") {
                        None => DEFAULT_BN_EPS,
                        Some(e) => e
                            .parse::<f32>()
                            .ok()
                            .filter(|e| e.is_finite() && *e >= 0.0)
                            .ok_or_else(|| {
                                Error::Format(format!("line {}: bad eps '{e}'", lineno + 1))
                            })?,
                    },
                },
                "relu" => Layer::Relu,
                "softmax" => Layer::Softmax,
                "flatten" => Layer::Flatten,
                "maxpool" | "avgpool" => {
                    let size = fields.usize_or("size", 2)?;
                    let stride = fields.usize_or("stride", size)?;
                    if kind == "maxpool" {
                        Layer::MaxPool { size, stride }
                    } else {
                        Layer::AvgPool { size, stride }
                    }
                }
                other => {
                    let params = std::mem::take(&mut fields.params);
                    Layer::Other {
                        kind: other.to_string(),
                        params,
                    }
                }
            };
            fields.finish()?;
            layers.push(layer);
        }
        let input_shape =
            input_shape.ok_or_else(|| Error::Format("graph has no 'input' line".into()))?;
        Ok(GraphSpec {
            input_shape,
            layers,
        })
    }

    /// Canonical text form; `parse(to_text(g)) == g`.
    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        let mut out = format!("input shape={}\n", dims.join(","));
        for layer in &self.layers {
            out.push_str(&layer.to_string());
            out.push('\n');
        }
        out
    }

    /// Every tensor reference in layer order, with the layer index.
    pub fn tensor_refs(&self) -> impl Iterator<Item = (usize, &str, TensorRole)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.bindings().into_iter().map(move |(n, r)| (i, n, r)))
    }
}

struct Fields {
    line: usize,
    params: BTreeMap<String, String>,
}

impl Fields {
    fn required(&mut self, key: &str) -> Result<String> {
        self.params
            .remove(key)
            .ok_or_else(|| Error::Format(format!("line {}: missing '{key}'", self.line)))
    }

    fn optional(&mut self, key: &str) -> Option<String> {
        self.params.remove(key)
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.params.remove(key) {
            None => Ok(default),
            Some(v) => v.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| {
                Error::Format(format!(
                    "line {}: '{key}' must be a positive integer",
                    self.line
                ))
            }),
        }
    }

    fn finish(self) -> Result<()> {
        match self.params.keys().next() {
            Some(k) => Err(Error::Format(format!(
                "line {}: unknown key '{k}'",
                self.line
            ))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# tiny net
input shape=1,4,4
conv2d weight=c.w bias=c.b stride=1 pad=1
batchnorm gamma=g beta=b mean=m var=v eps=0.001
relu
maxpool size=2 stride=2
flatten
dense weight=fc.w
softmax
";

    #[test]
    fn parses_and_round_trips() {
        let g = GraphSpec::parse(SAMPLE).unwrap();
        assert_eq!(g.input_shape, vec![1, 4, 4]);
        assert_eq!(g.layers.len(), 7);
        assert_eq!(GraphSpec::parse(&g.to_text()).unwrap(), g);
        let refs: Vec<_> = g.tensor_refs().map(|(_, n, _)| n).collect();
        assert_eq!(refs, ["c.w", "c.b", "g", "b", "m", "v", "fc.w"]);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(GraphSpec::parse("relu\n").is_err());
        assert!(GraphSpec::parse("input shape=1,0\n").is_err());
        assert!(GraphSpec::parse("input shape=4\ndense\n").is_err());
        assert!(GraphSpec::parse("input shape=4\ndense weight=w color=red\n").is_err());
        assert!(GraphSpec::parse("input shape=4\nmaxpool size=0\n").is_err());
    }

    #[test]
    fn shorthand_only_in_lenient_mode() {
        let text = "input shape=1,5,5\nconv2d weight=k pad=same\n";
        assert!(GraphSpec::parse(text).is_err());
        let mut g = GraphSpec::parse_with_shorthand(text).unwrap();
        g.resolve_padding(|_| Some(3)).unwrap();
        assert_eq!(
            g.layers[0],
            Layer::Conv2d {
                weight: "k".into(),
                bias: None,
                stride: 1,
                pad: Padding::Explicit(1)
            }
        );
        let mut g = GraphSpec::parse_with_shorthand(text).unwrap();
        assert!(g.resolve_padding(|_| Some(2)).is_err());
    }

    #[test]
    fn unknown_kinds_keep_bindings() {
        let g = GraphSpec::parse("input shape=4\nlstm weight=r.w units=3\n").unwrap();
        let refs: Vec<_> = g.tensor_refs().collect();
        assert_eq!(refs, vec![(0, "r.w", TensorRole::Unknown)]);
        assert_eq!(g.layers[0].kind(), "lstm");
    }
}
