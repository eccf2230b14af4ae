//! Gradient-check cases shared by the gradcheck tests and the acceptance runner.

use fewshot_core::augment::{stack, Image, RotationLabel};
use fewshot_core::model::{HeadsConfig, ModelConfig, MultiTaskModel};
use fewshot_core::nn::{BlockKind, EncoderConfig};
use fewshot_core::rng::{stream_rng, StreamRng};
use fewshot_core::tensor::{self, forward_op, BatchNormMode, Op};
use fewshot_core::{Parameter, Tensor};
use rand::Rng;

use super::{check_op, check_params, random_vec};

/// Named worst relative errors.
pub type Cases = Vec<(String, f64)>;

fn rng(tag: u64) -> StreamRng {
    stream_rng(2024, &[tag])
}

fn input(r: &mut impl Rng, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    (random_vec(r, shape.iter().product()), shape.to_vec())
}

/// Reduces an arbitrary tensor to a scalar with fixed random weights so every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(t: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let w = random_vec(&mut rng(seed), t.numel());
    let w = Tensor::from_vec(w, t.shape()).unwrap();
    tensor::sum(&tensor::mul(t, &w).unwrap())
}

pub fn elementwise_and_linear_algebra() -> Cases {
    let mut r = rng(1);
    let a = input(&mut r, &[4, 5]);
    let b = input(&mut r, &[5, 3]);
    let c = input(&mut r, &[4, 5]);
    let bias = input(&mut r, &[5]);
    vec![
        (
            "matmul".into(),
            check_op(&[a.clone(), b], &|t| {
                weighted_sum(&forward_op(&Op::Matmul, &[&t[0], &t[1]]).unwrap(), 10)
            }),
        ),
        (
            "add".into(),
            check_op(&[a.clone(), c.clone()], &|t| {
                weighted_sum(&tensor::add(&t[0], &t[1]).unwrap(), 11)
            }),
        ),
        (
            "add broadcast".into(),
            check_op(&[a.clone(), bias], &|t| {
                weighted_sum(&tensor::add(&t[0], &t[1]).unwrap(), 12)
            }),
        ),
        (
            "mul".into(),
            check_op(&[a.clone(), c.clone()], &|t| {
                weighted_sum(&tensor::mul(&t[0], &t[1]).unwrap(), 13)
            }),
        ),
        (
            "scale".into(),
            check_op(std::slice::from_ref(&a), &|t| {
                weighted_sum(&tensor::scale(&t[0], -1.7), 14)
            }),
        ),
        (
            "relu".into(),
            check_op(std::slice::from_ref(&a), &|t| {
                weighted_sum(&tensor::relu(&t[0]), 15)
            }),
        ),
        (
            "reshape".into(),
            check_op(std::slice::from_ref(&a), &|t| {
                weighted_sum(&tensor::reshape(&t[0], &[2, 10]).unwrap(), 16)
            }),
        ),
        (
            "concat".into(),
            check_op(&[a.clone(), c], &|t| {
                weighted_sum(&tensor::concat(&[&t[0], &t[1]], 1).unwrap(), 17)
            }),
        ),
        (
            "mean".into(),
            check_op(std::slice::from_ref(&a), &|t| {
                tensor::mean(&tensor::mul(&t[0], &t[0]).unwrap())
            }),
        ),
        (
            "sum".into(),
            check_op(&[a], &|t| tensor::sum(&tensor::relu(&t[0]))),
        ),
    ]
}

pub fn losses_and_normalization() -> Cases {
    let mut r = rng(2);
    let logits = input(&mut r, &[6, 4]);
    let labels = vec![0, 3, 1, 1, 2, 0];
    let x = input(&mut r, &[5, 7]);
    let y = input(&mut r, &[5, 7]);
    vec![
        (
            "softmax_cross_entropy".into(),
            check_op(&[logits], &|t| {
                tensor::softmax_cross_entropy(&t[0], &labels).unwrap()
            }),
        ),
        (
            "l2_normalize".into(),
            check_op(std::slice::from_ref(&x), &|t| {
                weighted_sum(&tensor::l2_normalize(&t[0], 1).unwrap(), 20)
            }),
        ),
        (
            "mse".into(),
            check_op(&[x, y], &|t| tensor::mse(&t[0], &t[1]).unwrap()),
        ),
    ]
}

pub fn convolution_pooling_and_batch_norm() -> Cases {
    let mut r = rng(3);
    let x = input(&mut r, &[2, 3, 6, 6]);
    let w = input(&mut r, &[4, 3, 3, 3]);
    let mut out = Cases::new();
    for (stride, padding) in [(1, 1), (2, 0), (2, 1)] {
        let op = Op::Conv2d { stride, padding };
        let worst = check_op(&[x.clone(), w.clone()], &|t| {
            weighted_sum(&forward_op(&op, &[&t[0], &t[1]]).unwrap(), 30)
        });
        out.push((format!("conv2d stride {stride} pad {padding}"), worst));
    }
    out.push((
        "max_pool2d".into(),
        check_op(std::slice::from_ref(&x), &|t| {
            weighted_sum(&tensor::max_pool2d(&t[0], 2, 2).unwrap(), 31)
        }),
    ));
    out.push((
        "avg_pool2d".into(),
        check_op(std::slice::from_ref(&x), &|t| {
            weighted_sum(&tensor::avg_pool2d(&t[0], (3, 2), (1, 2)).unwrap(), 32)
        }),
    ));
    out.push((
        "global_avg_pool".into(),
        check_op(std::slice::from_ref(&x), &|t| {
            weighted_sum(&tensor::global_avg_pool(&t[0]).unwrap(), 33)
        }),
    ));

    let gamma = input(&mut r, &[3]);
    let beta = input(&mut r, &[3]);
    let train = |t: &[Tensor<f64>]| {
        let (y, _) =
            tensor::batch_norm(&t[0], &t[1], &t[2], BatchNormMode::Train { eps: 1e-5 }).unwrap();
        weighted_sum(&y, 34)
    };
    out.push((
        "batch_norm train 4d".into(),
        check_op(&[x.clone(), gamma.clone(), beta.clone()], &train),
    ));
    let flat = input(&mut r, &[8, 3]);
    out.push((
        "batch_norm train 2d".into(),
        check_op(&[flat, gamma.clone(), beta.clone()], &train),
    ));
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    let eval = |t: &[Tensor<f64>]| {
        let mode = BatchNormMode::Eval {
            mean: &mean,
            var: &var,
            eps: 1e-5,
        };
        weighted_sum(
            &tensor::batch_norm(&t[0], &t[1], &t[2], mode).unwrap().0,
            35,
        )
    };
    out.push(("batch_norm eval".into(), check_op(&[x, gamma, beta], &eval)));
    out
}

fn small_model(kind: BlockKind) -> MultiTaskModel<f64> {
    let config = ModelConfig {
        encoder: EncoderConfig {
            input_channels: 3,
            input_size: 8,
            stage_widths: vec![3, 4],
            block_kind: kind,
            embedding_dim: 4,
        },
        heads: HeadsConfig {
            projector_hidden: 6,
            projection_dim: 3,
            predictor_hidden: 5,
            symmetric_byol: true,
        },
        num_classes: 3,
        tau: 0.99,
    };
    MultiTaskModel::new(&config, &mut rng(4)).unwrap()
}

fn images(seed: u64, n: usize) -> Vec<Image> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| Image::new(3, 8, 8, (0..192).map(|_| r.gen::<f32>()).collect()))
        .collect()
}

fn online(model: &MultiTaskModel<f64>) -> Vec<&Parameter<f64>> {
    model
        .online_parameters()
        .into_iter()
        .filter(|p| p.value.requires_grad())
        .collect()
}

/// Supervised, rotation and BYOL losses through encoder and heads, checked
/// against every online parameter.
pub fn composed_losses() -> Cases {
    let mut out = Cases::new();
    for (kind, tag) in [
        (BlockKind::PlainConv, "plain"),
        (BlockKind::Residual, "residual"),
    ] {
        let model = small_model(kind);
        let x = stack::<f64>(&images(5, 4));
        let labels = [0, 2, 1, 2];
        let params = online(&model);
        out.push((
            format!("supervised ({tag})"),
            check_params(&params, &|| model.supervised_loss(&x, &labels).unwrap()),
        ));

        let imgs = images(6, 4);
        let rot: Vec<RotationLabel> = (0..4).map(|i| RotationLabel::new(i).unwrap()).collect();
        out.push((
            format!("rotation ({tag})"),
            check_params(&params, &|| {
                model.rotation_loss_with_labels(&imgs, &rot).unwrap()
            }),
        ));

        let a = stack::<f64>(&images(7, 4));
        let b = stack::<f64>(&images(8, 4));
        out.push((
            format!("byol ({tag})"),
            check_params(&params, &|| model.byol_loss(&a, &b).unwrap()),
        ));
    }
    out
}
