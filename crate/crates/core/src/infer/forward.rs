//! Forward pass over a bound graph.
//!
//! Activations are `[C, H, W]` for spatial layers and `[N]` for dense layers.
//! Weights: dense `[out, in]`, conv2d `[out_c, in_c, kh, kw]`. Everything is f32
//! with f32 accumulation, evaluated in a fixed order so runs are bit-identical.

use crate::error::{Error, Result};
use crate::infer::graph::{GraphSpec, Layer, Padding};
use crate::store::ModelFile;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Dense {
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
        in_c: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
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
}

#[derive(Debug, Clone)]
struct Step {
    op: Op,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

/// A graph with its tensors resolved and every layer's shapes checked.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    steps: Vec<Step>,
}

impl Network {
    pub fn from_model(model: &ModelFile) -> Result<Network> {
        let graph = model.graph_spec()?;
        Network::bind(&graph, model)
    }

    pub fn bind(graph: &GraphSpec, model: &ModelFile) -> Result<Network> {
        let mut shape = graph.input_shape.clone();
        let mut steps = Vec::with_capacity(graph.layers.len());
        for (index, layer) in graph.layers.iter().enumerate() {
            let err = |message: String| Error::Shape {
                index,
                kind: layer.kind().to_string(),
                message,
            };
            let fetch = |name: &str| -> Result<&Tensor> {
                model
                    .tensor(name)
                    .ok_or_else(|| err(format!("tensor '{name}' not found")))
            };
            let (op, out_shape) = match layer {
                Layer::Dense { weight, bias } => {
                    let w = fetch(weight)?;
                    if shape.len() != 1 {
                        return Err(err(format!("expects a flat input, got {shape:?}")));
                    }
                    if w.rank() != 2 || w.shape[1] != shape[0] {
                        return Err(err(format!(
                            "weight '{weight}' shape {:?} does not accept input {shape:?}",
                            w.shape
                        )));
                    }
                    let outputs = w.shape[0];
                    let bias = bias
                        .as_deref()
                        .map(|b| vector(fetch(b)?, outputs, &err))
                        .transpose()?;
                    (
                        Op::Dense {
                            weight: w.data.clone(),
                            bias,
                            inputs: shape[0],
                            outputs,
                        },
                        vec![outputs],
                    )
                }
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let w = fetch(weight)?;
                    let Padding::Explicit(pad) = *pad else {
                        return Err(err(
                            "padding shorthand must be resolved before binding".into()
                        ));
                    };
                    if shape.len() != 3 {
                        return Err(err(format!("expects [C, H, W] input, got {shape:?}")));
                    }
                    if w.rank() != 4 || w.shape[1] != shape[0] {
                        return Err(err(format!(
                            "kernel '{weight}' shape {:?} does not accept input {shape:?}",
                            w.shape
                        )));
                    }
                    let (out_c, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
                    let oh = conv_out(shape[1], kh, *stride, pad).ok_or_else(|| {
                        err(format!(
                            "kernel {kh}x{kw} larger than padded input {shape:?}"
                        ))
                    })?;
                    let ow = conv_out(shape[2], kw, *stride, pad).ok_or_else(|| {
                        err(format!(
                            "kernel {kh}x{kw} larger than padded input {shape:?}"
                        ))
                    })?;
                    let bias = bias
                        .as_deref()
                        .map(|b| vector(fetch(b)?, out_c, &err))
                        .transpose()?;
                    (
                        Op::Conv2d {
                            weight: w.data.clone(),
                            bias,
                            in_c: shape[0],
                            out_c,
                            kh,
                            kw,
                            stride: *stride,
                            pad,
                        },
                        vec![out_c, oh, ow],
                    )
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    if shape.len() != 1 && shape.len() != 3 {
                        return Err(err(format!("expects [N] or [C, H, W], got {shape:?}")));
                    }
                    let c = shape[0];
                    (
                        Op::BatchNorm {
                            gamma: vector(fetch(gamma)?, c, &err)?,
                            beta: vector(fetch(beta)?, c, &err)?,
                            mean: vector(fetch(mean)?, c, &err)?,
                            var: vector(fetch(var)?, c, &err)?,
                            eps: *eps,
                        },
                        shape.clone(),
                    )
                }
                Layer::Relu => (Op::Relu, shape.clone()),
                Layer::Softmax => (Op::Softmax, shape.clone()),
                Layer::Flatten => (Op::Flatten, vec![shape.iter().product()]),
                Layer::MaxPool { size, stride } | Layer::AvgPool { size, stride } => {
                    if shape.len() != 3 {
                        return Err(err(format!("expects [C, H, W] input, got {shape:?}")));
                    }
                    let oh = conv_out(shape[1], *size, *stride, 0);
                    let ow = conv_out(shape[2], *size, *stride, 0);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(err(format!("window {size} larger than input {shape:?}")));
                    };
                    let op = if matches!(layer, Layer::MaxPool { .. }) {
                        Op::MaxPool {
                            size: *size,
                            stride: *stride,
                        }
                    } else {
                        Op::AvgPool {
                            size: *size,
                            stride: *stride,
                        }
                    };
                    (op, vec![shape[0], oh, ow])
                }
                Layer::Other { kind, .. } => {
                    return Err(err(format!("unsupported layer kind '{kind}'")));
                }
            };
            steps.push(Step {
                op,
                in_shape: shape,
                out_shape: out_shape.clone(),
            });
            shape = out_shape;
        }
        Ok(Network {
            input_shape: graph.input_shape.clone(),
            steps,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.steps
            .last()
            .map(|s| s.out_shape.as_slice())
            .unwrap_or(&self.input_shape)
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape != self.input_shape {
            return Err(Error::Argument(format!(
                "input shape {:?} does not match graph input {:?}",
                input.shape, self.input_shape
            )));
        }
        let data = self.forward_slice(&input.data)?;
        Ok(Tensor {
            name: "output".into(),
            shape: self.output_shape().to_vec(),
            data,
        })
    }

    /// Forward over a flat row-major sample of length [`Network::input_len`].
    pub fn forward_slice(&self, input: &[f32]) -> Result<Vec<f32>> {
        if input.len() != self.input_len() {
            return Err(Error::Argument(format!(
                "input has {} values, graph expects {}",
                input.len(),
                self.input_len()
            )));
        }
        let mut x = input.to_vec();
        for step in &self.steps {
            x = step.run(x);
        }
        Ok(x)
    }
}

/// `floor((input + 2 pad - k) / stride) + 1`, or `None` if the window does not fit.
pub fn conv_out(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

fn vector(t: &Tensor, len: usize, err: &dyn Fn(String) -> Error) -> Result<Vec<f32>> {
    if t.shape != [len] {
        return Err(err(format!(
            "tensor '{}' has shape {:?}, expected [{len}]",
            t.name, t.shape
        )));
    }
    Ok(t.data.clone())
}

impl Step {
    fn run(&self, x: Vec<f32>) -> Vec<f32> {
        match &self.op {
            Op::Dense {
                weight,
                bias,
                inputs,
                outputs,
            } => (0..*outputs)
                .map(|o| {
                    let row = &weight[o * inputs..(o + 1) * inputs];
                    let dot = row.iter().zip(&x).fold(0.0f32, |acc, (w, v)| acc + w * v);
                    dot + bias.as_ref().map_or(0.0, |b| b[o])
                })
                .collect(),
            Op::Conv2d {
                weight,
                bias,
                in_c,
                out_c,
                kh,
                kw,
                stride,
                pad,
            } => {
                let (h, w) = (self.in_shape[1], self.in_shape[2]);
                let (oh, ow) = (self.out_shape[1], self.out_shape[2]);
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut padded = vec![0.0f32; in_c * ph * pw];
                for c in 0..*in_c {
                    for y in 0..h {
                        let src = &x[(c * h + y) * w..(c * h + y + 1) * w];
                        let at = (c * ph + y + pad) * pw + pad;
                        padded[at..at + w].copy_from_slice(src);
                    }
                }
                let mut out = vec![0.0f32; out_c * oh * ow];
                for o in 0..*out_c {
                    let kbase = o * in_c * kh * kw;
                    let b = bias.as_ref().map_or(0.0, |b| b[o]);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0f32;
                            for c in 0..*in_c {
                                for ky in 0..*kh {
                                    let row = (c * ph + oy * stride + ky) * pw + ox * stride;
                                    let krow = kbase + (c * kh + ky) * kw;
                                    for kx in 0..*kw {
                                        acc += weight[krow + kx] * padded[row + kx];
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = acc + b;
                        }
                    }
                }
                out
            }
            Op::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let c = gamma.len();
                let per = x.len() / c;
                x.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = i / per;
                        (v - mean[ch]) / (var[ch] + eps).sqrt() * gamma[ch] + beta[ch]
                    })
                    .collect()
            }
            Op::Relu => x.into_iter().map(|v| v.max(0.0)).collect(),
            Op::Softmax => {
                let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = x.iter().map(|v| (v - m).exp()).collect();
                let sum: f32 = exps.iter().sum();
                exps.into_iter().map(|e| e / sum).collect()
            }
            Op::Flatten => x,
            Op::MaxPool { size, stride } | Op::AvgPool { size, stride } => {
                let is_max = matches!(self.op, Op::MaxPool { .. });
                let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (oh, ow) = (self.out_shape[1], self.out_shape[2]);
                let mut out = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = if is_max { f32::NEG_INFINITY } else { 0.0 };
                            for ky in 0..*size {
                                for kx in 0..*size {
                                    let v = x[(ch * h + oy * stride + ky) * w + ox * stride + kx];
                                    acc = if is_max { acc.max(v) } else { acc + v };
                                }
                            }
                            out.push(if is_max {
                                acc
                            } else {
                                acc / (size * size) as f32
                            });
                        }
                    }
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(tensors: Vec<Tensor>, graph: &str) -> Network {
        Network::from_model(&ModelFile::new(tensors, graph).unwrap()).unwrap()
    }

    #[test]
    fn identity_dense() {
        let net = model(
            vec![
                Tensor::new("w", vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
                Tensor::from_vec("b", vec![0.0; 3]).unwrap(),
            ],
            "input shape=3\ndense weight=w bias=b\n",
        );
        let x = Tensor::from_vec("x", vec![0.5, -2.0, 7.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data, x.data);
    }

    #[test]
    fn scalar_conv() {
        let net = model(
            vec![Tensor::new("k", vec![1, 1, 1, 1], vec![2.0]).unwrap()],
            "input shape=1,1,1\nconv2d weight=k stride=1 pad=0\n",
        );
        let x = Tensor::new("x", vec![1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data, vec![6.0]);
    }

    #[test]
    fn padded_conv_and_pools() {
        let net = model(
            vec![Tensor::new("k", vec![1, 1, 3, 3], vec![1.0; 9]).unwrap()],
            "input shape=1,2,2\nconv2d weight=k stride=1 pad=1\nmaxpool size=2 stride=2\n",
        );
        let x = Tensor::new("x", vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // every output of the padded 3x3 box filter sums the whole 2x2 input
        assert_eq!(net.forward(&x).unwrap().data, vec![10.0]);
        let net = model(
            vec![],
            "input shape=1,2,2\navgpool size=2\nflatten\nsoftmax\n",
        );
        assert_eq!(net.forward(&x).unwrap().data, vec![1.0]);
    }

    #[test]
    fn batchnorm_formula() {
        let net = model(
            vec![
                Tensor::from_vec("g", vec![2.0]).unwrap(),
                Tensor::from_vec("b", vec![1.0]).unwrap(),
                Tensor::from_vec("m", vec![3.0]).unwrap(),
                Tensor::from_vec("v", vec![4.0]).unwrap(),
            ],
            "input shape=1\nbatchnorm gamma=g beta=b mean=m var=v eps=0.0\n",
        );
        let x = Tensor::from_vec("x", vec![7.0]).unwrap();
        // (7 - 3) / 2 * 2 + 1
        assert_eq!(net.forward(&x).unwrap().data, vec![5.0]);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let m = ModelFile::new(
            vec![Tensor::new("w", vec![2, 5], vec![0.0; 10]).unwrap()],
            "input shape=4\nrelu\ndense weight=w\n",
        )
        .unwrap();
        let err = Network::from_model(&m).unwrap_err();
        match err {
            Error::Shape { index, kind, .. } => {
                assert_eq!(index, 1);
                assert_eq!(kind, "dense");
            }
            other => panic!("unexpected {other}"),
        }
        let net = model(vec![], "input shape=2\nrelu\n");
        assert!(net
            .forward(&Tensor::from_vec("x", vec![1.0; 3]).unwrap())
            .is_err());
    }

    #[test]
    fn output_dims_formula() {
        assert_eq!(conv_out(8, 3, 1, 1), Some(8));
        assert_eq!(conv_out(7, 3, 2, 0), Some(3));
        assert_eq!(conv_out(2, 5, 1, 1), None);
    }
}
