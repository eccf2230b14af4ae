//! Finite-difference gradient oracle shared by the integration tests.
#![allow(dead_code)]

pub mod gradients;

use fewshot_core::tensor::no_grad;
use fewshot_core::{Parameter, Tensor};
use rand::Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients
/// from dominating through cancellation noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + STEP;
            let up = f(&probe);
            probe[i] = x[i] - STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Worst relative error between backward and central differences for a
/// scalar function of several input tensors.
pub fn check_op(
    inputs: &[(Vec<f64>, Vec<usize>)],
    f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>,
) -> f64 {
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(d, s)| Tensor::parameter(d.clone(), s).unwrap())
        .collect();
    f(&leaves).backward().unwrap();
    let mut worst: f64 = 0.0;
    for (k, (data, _)) in inputs.iter().enumerate() {
        let analytic = leaves[k].grad().unwrap_or_else(|| vec![0.0; data.len()]);
        let eval = |x: &[f64]| {
            no_grad(|| {
                let ts: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (d, s))| {
                        Tensor::from_vec(if j == k { x.to_vec() } else { d.clone() }, s).unwrap()
                    })
                    .collect();
                f(&ts).item()
            })
        };
        for (a, n) in analytic.iter().zip(numeric_grad(data, &eval)) {
            worst = worst.max(rel_err(*a, n));
        }
    }
    worst
}

/// Worst relative error over every coordinate of `params` for a loss that
/// reads them in place.
pub fn check_params(params: &[&Parameter<f64>], loss: &dyn Fn() -> Tensor<f64>) -> f64 {
    params.iter().for_each(|p| p.value.zero_grad());
    loss().backward().unwrap();
    let mut worst: f64 = 0.0;
    for p in params {
        let analytic = p.value.grad().unwrap_or_else(|| vec![0.0; p.value.numel()]);
        let base = p.value.to_vec();
        let eval = |x: &[f64]| {
            p.value.data_mut().copy_from_slice(x);
            no_grad(|| loss().item())
        };
        let numeric = numeric_grad(&base, &eval);
        p.value.data_mut().copy_from_slice(&base);
        for (a, n) in analytic.iter().zip(numeric) {
            worst = worst.max(rel_err(*a, n));
        }
    }
    worst
}

pub fn tiny_model_config(symmetric_byol: bool) -> fewshot_core::model::ModelConfig {
    use fewshot_core::model::{HeadsConfig, ModelConfig};
    use fewshot_core::nn::{BlockKind, EncoderConfig};
    ModelConfig {
        encoder: EncoderConfig {
            input_channels: 3,
            input_size: 16,
            stage_widths: vec![4, 6],
            block_kind: BlockKind::PlainConv,
            embedding_dim: 6,
        },
        heads: HeadsConfig {
            projector_hidden: 8,
            projection_dim: 5,
            predictor_hidden: 8,
            symmetric_byol,
        },
        num_classes: 3,
        tau: 0.99,
    }
}

pub fn random_images(seed: u64, n: usize, size: usize) -> Vec<fewshot_core::augment::Image> {
    let mut r = fewshot_core::rng::stream_rng(seed, &[0xabc]);
    (0..n)
        .map(|_| {
            fewshot_core::augment::Image::new(
                3,
                size,
                size,
                (0..3 * size * size).map(|_| r.gen::<f32>()).collect(),
            )
        })
        .collect()
}

/// In-memory dataset of rendered toy classes `0..classes`.
pub fn toy_dataset(
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> fewshot_core::data::LabeledDataset {
    use fewshot_core::io::{class_name, render};
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for i in 0..per_class {
            let mut r = fewshot_core::rng::stream_rng(seed, &[c as u64, i as u64]);
            images.extend(render(c, size, &mut r).data);
            labels.push(c);
        }
    }
    let names = (0..classes).map(class_name).collect();
    fewshot_core::data::LabeledDataset::new("train", 3, size, images, labels, names).unwrap()
}
