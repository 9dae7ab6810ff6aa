//! Accuracy evaluation and bit-width sweeps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::infer::confusion::ConfusionMatrix;
use crate::infer::dataset::Dataset;
use crate::infer::forward::Network;
use crate::quant::{quantize_model, select_tensors, QuantizeOptions, FP32_BITS};
use crate::store::ModelFile;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub sample_count: usize,
    /// Predicted class (or group) per sample, in dataset order.
    pub predictions: Vec<usize>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<EvalResult> {
    evaluate_mapped(
        net,
        dataset,
        dataset.class_names(),
        &|label| label as usize,
        &|out: &[f32]| argmax(out),
    )
}

/// Scores every sample with `predict` on the network output and `map_label` on the
/// ground truth; both land in `0..class_names.len()`.
pub fn evaluate_mapped(
    net: &Network,
    dataset: &Dataset,
    class_names: Vec<String>,
    map_label: &(dyn Fn(u32) -> usize + Sync),
    predict: &(dyn Fn(&[f32]) -> usize + Sync),
) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    if dataset.feature_len != net.input_len() {
        return Err(Error::Argument(format!(
            "dataset features have length {}, graph input {:?} needs {}",
            dataset.feature_len,
            net.input_shape(),
            net.input_len()
        )));
    }
    if net.output_len() != dataset.num_classes {
        return Err(Error::Argument(format!(
            "graph produces {} outputs for {} classes",
            net.output_len(),
            dataset.num_classes
        )));
    }
    let predictions = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            net.forward_slice(dataset.sample(i))
                .map(|out| predict(&out))
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut confusion = ConfusionMatrix::new(class_names);
    let k = confusion.num_classes();
    for (&p, &label) in predictions.iter().zip(&dataset.labels) {
        let truth = map_label(label);
        if p >= k || truth >= k {
            return Err(Error::Internal(format!(
                "class index out of range ({p}, {truth})"
            )));
        }
        confusion.record(truth, p);
    }
    Ok(EvalResult {
        accuracy: confusion.accuracy(),
        sample_count: dataset.len(),
        confusion,
        predictions,
    })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    /// [`FP32_BITS`] for the baseline row.
    pub bits: u8,
    pub result: EvalResult,
    /// Packed code payload of the quantized tensors; their f32 size for the baseline.
    pub packed_bytes: usize,
    /// Mean power-of-two bit levels over quantized tensors (power-of-two rows only).
    pub avg_bit_levels: Option<f64>,
}

/// FP32 baseline row followed by one row per requested bit width.
pub fn bit_sweep(
    model: &ModelFile,
    dataset: &Dataset,
    options: &QuantizeOptions,
    bit_widths: &[u8],
) -> Result<Vec<SweepRow>> {
    for &b in bit_widths {
        crate::quant::check_bits(b)?;
    }
    let base_net = Network::from_model(model)?;
    let (selected, _) = select_tensors(model, options)?;
    let raw_bytes = selected
        .iter()
        .filter_map(|n| model.tensor(n))
        .map(|t| t.len() * 4)
        .sum();
    let mut rows = vec![SweepRow {
        bits: FP32_BITS,
        result: evaluate(&base_net, dataset)?,
        packed_bytes: raw_bytes,
        avg_bit_levels: None,
    }];
    for &bits in bit_widths {
        let opts = QuantizeOptions { bits, ..*options };
        let q = quantize_model(model, &opts)?;
        let net = Network::from_model(&q.model)?;
        let levels: Vec<u32> = q
            .quantized
            .iter()
            .filter_map(|t| t.pow2_bit_levels())
            .collect();
        rows.push(SweepRow {
            bits,
            result: evaluate(&net, dataset)?,
            packed_bytes: q.packed.as_ref().map_or(0, |p| p.payload_bytes()),
            avg_bit_levels: (!levels.is_empty())
                .then(|| levels.iter().sum::<u32>() as f64 / levels.len() as f64),
        });
    }
    Ok(rows)
}
