//! Seeded synthetic classification tasks.
//!
//! A random small CNN plays the role of a trained model and labels its own
//! inputs: each sample is Gaussian noise, labelled by the network's argmax,
//! and kept only when the winning logit clears the runner-up by a margin.
//! The overlap variant makes two output rows nearly identical so those
//! classes are the first to blur under coarse quantization.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::infer::{argmax, save_dataset, Dataset, Network};
use crate::store::{save_model, ModelFile};
use crate::tensor::Tensor;

pub const DEFAULT_SEED: u64 = 7;
const SIDE: usize = 8;
const PILOT_SAMPLES: usize = 512;
const MAX_ATTEMPTS_PER_SAMPLE: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub samples: usize,
    pub conv_channels: usize,
    pub hidden: usize,
    /// Output rows made nearly identical.
    pub overlap_pair: Option<(usize, usize)>,
    /// Required top-1 lead, in units of the pilot logit standard deviation.
    pub min_margin: f32,
}

impl FixtureSpec {
    pub fn standard(seed: u64) -> Self {
        FixtureSpec {
            seed,
            num_classes: 10,
            samples: 2000,
            conv_channels: 8,
            hidden: 32,
            overlap_pair: None,
            min_margin: 0.25,
        }
    }

    pub fn overlap(seed: u64) -> Self {
        FixtureSpec {
            overlap_pair: Some((0, 1)),
            ..FixtureSpec::standard(seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub model: ModelFile,
    pub dataset: Dataset,
}

impl Fixture {
    /// Writes `<stem>.bqnt` and `<stem>.bqds` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let model = dir.join(format!("{stem}.bqnt"));
        let data = dir.join(format!("{stem}.bqds"));
        save_model(&self.model, &model)?;
        save_dataset(&self.dataset, &data)?;
        Ok((model, data))
    }
}

pub const GRAPH: &str = "input shape=1,8,8
conv2d weight=conv.w bias=conv.b pad=1
batchnorm gamma=bn.gamma beta=bn.beta mean=bn.mean var=bn.var
relu
maxpool size=2
flatten
dense weight=fc1.w bias=fc1.b
relu
dense weight=fc2.w bias=fc2.b
";

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let d = Normal::new(0.0f32, std).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn noise_input(rng: &mut ChaCha8Rng) -> Vec<f32> {
    normal_vec(rng, SIDE * SIDE, 1.0)
}

fn tensor(name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
    Tensor::new(name, shape, data)
}

/// Top-1 class and its lead over the best class outside its overlap pair.
fn margin(logits: &[f32], pair: Option<(usize, usize)>) -> (usize, f32) {
    let top = argmax(logits);
    let partner = pair.and_then(|(a, b)| match top {
        t if t == a => Some(b),
        t if t == b => Some(a),
        _ => None,
    });
    let runner_up = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top && Some(i) != partner)
        .map(|(_, &v)| v)
        .fold(f32::NEG_INFINITY, f32::max);
    (top, logits[top] - runner_up)
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    let k = spec.num_classes;
    if k < 3 || spec.samples < k || spec.conv_channels == 0 || spec.hidden == 0 {
        return Err(Error::Argument(format!("degenerate fixture spec {spec:?}")));
    }
    if let Some((a, b)) = spec.overlap_pair {
        if a == b || a >= k || b >= k {
            return Err(Error::Argument(format!("bad overlap pair ({a}, {b})")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.conv_channels;
    let h = spec.hidden;
    let flat = c * (SIDE / 2) * (SIDE / 2);

    let conv_w = tensor(
        "conv.w",
        vec![c, 1, 3, 3],
        normal_vec(&mut rng, c * 9, (2.0f32 / 9.0).sqrt()),
    )?;
    let conv_b = tensor("conv.b", vec![c], normal_vec(&mut rng, c, 0.05))?;

    // Batch-norm statistics come from the conv output on pilot inputs.
    let conv_only = ModelFile::new(
        vec![conv_w.clone(), conv_b.clone()],
        "input shape=1,8,8\nconv2d weight=conv.w bias=conv.b pad=1\n",
    )?;
    let conv_net = Network::from_model(&conv_only)?;
    let plane = SIDE * SIDE;
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for _ in 0..PILOT_SAMPLES {
        let out = conv_net.forward_slice(&noise_input(&mut rng))?;
        for ch in 0..c {
            for &v in &out[ch * plane..(ch + 1) * plane] {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
    }
    let n = (PILOT_SAMPLES * plane) as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let var: Vec<f32> = sq
        .iter()
        .zip(&sum)
        .map(|(q, s)| ((q / n) - (s / n) * (s / n)).max(1e-3) as f32)
        .collect();
    let gamma: Vec<f32> = (0..c).map(|_| rng.random_range(0.6f32..1.4)).collect();
    let beta = normal_vec(&mut rng, c, 0.1);

    let fc1_w = normal_vec(&mut rng, h * flat, (2.0 / flat as f32).sqrt());
    let fc1_b = normal_vec(&mut rng, h, 0.05);
    let mut fc2_w = normal_vec(&mut rng, k * h, (1.0 / h as f32).sqrt());
    if let Some((a, b)) = spec.overlap_pair {
        let jitter = normal_vec(&mut rng, h, 0.05 * (1.0 / h as f32).sqrt());
        for i in 0..h {
            fc2_w[b * h + i] = fc2_w[a * h + i] + jitter[i];
        }
    }

    let build = |fc2_b: Vec<f32>| -> Result<ModelFile> {
        ModelFile::new(
            vec![
                conv_w.clone(),
                conv_b.clone(),
                tensor("bn.gamma", vec![c], gamma.clone())?,
                tensor("bn.beta", vec![c], beta.clone())?,
                tensor("bn.mean", vec![c], mean.clone())?,
                tensor("bn.var", vec![c], var.clone())?,
                tensor("fc1.w", vec![h, flat], fc1_w.clone())?,
                tensor("fc1.b", vec![h], fc1_b.clone())?,
                tensor("fc2.w", vec![k, h], fc2_w.clone())?,
                tensor("fc2.b", vec![k], fc2_b)?,
            ],
            GRAPH,
        )
    };

    // Centre each logit over pilot inputs so no class dominates the argmax.
    let pilot_net = Network::from_model(&build(vec![0.0; k])?)?;
    let mut logit_sum = vec![0f64; k];
    let mut all = Vec::with_capacity(PILOT_SAMPLES * k);
    for _ in 0..PILOT_SAMPLES {
        let out = pilot_net.forward_slice(&noise_input(&mut rng))?;
        for (s, v) in logit_sum.iter_mut().zip(&out) {
            *s += *v as f64;
        }
        all.extend(out);
    }
    let centre: Vec<f32> = logit_sum
        .iter()
        .map(|s| (-s / PILOT_SAMPLES as f64) as f32)
        .collect();
    let logit_mean = all.iter().map(|&v| v as f64).sum::<f64>() / all.len() as f64;
    let logit_std = (all
        .iter()
        .map(|&v| (v as f64 - logit_mean).powi(2))
        .sum::<f64>()
        / all.len() as f64)
        .sqrt() as f32;
    let model = build(centre)?;
    let net = Network::from_model(&model)?;

    let quota = spec.samples / k;
    let mut filled = vec![0usize; k];
    let mut features = Vec::with_capacity(spec.samples * SIDE * SIDE);
    let mut labels = Vec::with_capacity(spec.samples);
    let threshold = spec.min_margin * logit_std;
    for _ in 0..spec.samples * MAX_ATTEMPTS_PER_SAMPLE {
        if labels.len() == quota * k {
            break;
        }
        let x = noise_input(&mut rng);
        let out = net.forward_slice(&x)?;
        let (top, lead) = margin(&out, spec.overlap_pair);
        if lead < threshold || filled[top] == quota {
            continue;
        }
        filled[top] += 1;
        features.extend(x);
        labels.push(top as u32);
    }
    if labels.len() < quota * k {
        log::warn!("fixture classes under-filled: {filled:?}");
    }
    let dataset = Dataset::new(SIDE * SIDE, k, features, labels)?;
    Ok(Fixture { model, dataset })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::evaluate;

    fn small(seed: u64) -> FixtureSpec {
        FixtureSpec {
            samples: 60,
            ..FixtureSpec::standard(seed)
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(a.model.to_bytes().unwrap(), b.model.to_bytes().unwrap());
        assert_eq!(a.dataset.to_bytes(), b.dataset.to_bytes());
        let c = generate(&small(4)).unwrap();
        assert_ne!(a.dataset.to_bytes(), c.dataset.to_bytes());
    }

    #[test]
    fn labels_are_model_predictions() {
        let f = generate(&small(5)).unwrap();
        assert_eq!(f.dataset.len(), 60);
        let r = evaluate(&Network::from_model(&f.model).unwrap(), &f.dataset).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn margin_skips_partner() {
        assert_eq!(margin(&[3.0, 2.9, 1.0], Some((0, 1))), (0, 2.0));
        let (top, lead) = margin(&[3.0, 2.9, 1.0], None);
        assert_eq!(top, 0);
        assert!((lead - 0.1).abs() < 1e-6);
    }
}
