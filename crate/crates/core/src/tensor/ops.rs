use super::{
    conv, gemm, is_grad_enabled, numel, BatchNormMode, Element, Result, Tensor, TensorError,
};

/// Norms below this are clamped when normalizing.
pub const L2_EPSILON: f64 = 1e-12;

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// Elementwise sum. `b` may also be a suffix-shaped tensor broadcast over
/// the leading dimensions of `a` (bias addition).
pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        return Ok(Tensor::from_op(data, sa.to_vec(), "add", &[a, b], |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }));
    }
    if sb.len() < sa.len() && sa.ends_with(sb) {
        let inner = b.numel();
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % inner])
            .collect();
        return Ok(Tensor::from_op(
            data,
            sa.to_vec(),
            "add",
            &[a, b],
            move |g| {
                let mut gb = vec![E::zero(); inner];
                for row in g.chunks_exact(inner) {
                    gb.iter_mut().zip(row).for_each(|(acc, &v)| *acc = *acc + v);
                }
                vec![Some(g.to_vec()), Some(gb)]
            },
        ));
    }
    Err(mismatch("add", format!("{sa:?} vs {sb:?}")))
}

pub fn mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(mismatch(
            "mul",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (av, bv) = (a.to_vec(), b.to_vec());
    let data = av.iter().zip(&bv).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        "mul",
        &[a, b],
        move |g| {
            let ga = g.iter().zip(&bv).map(|(&g, &y)| g * y).collect();
            let gb = g.iter().zip(&av).map(|(&g, &x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        },
    ))
}

pub fn scale<E: Element>(a: &Tensor<E>, s: E) -> Tensor<E> {
    let data = a.data().iter().map(|&x| x * s).collect();
    Tensor::from_op(data, a.shape().to_vec(), "scale", &[a], move |g| {
        vec![Some(g.iter().map(|&v| v * s).collect())]
    })
}

pub fn relu<E: Element>(a: &Tensor<E>) -> Tensor<E> {
    let data: Vec<E> = a
        .data()
        .iter()
        .map(|&x| if x > E::zero() { x } else { E::zero() })
        .collect();
    let track = is_grad_enabled() && a.requires_grad();
    let mask: Vec<bool> = if track {
        data.iter().map(|&y| y > E::zero()).collect()
    } else {
        Vec::new()
    };
    Tensor::from_op(data, a.shape().to_vec(), "relu", &[a], move |g| {
        vec![Some(
            g.iter()
                .zip(&mask)
                .map(|(&g, &m)| if m { g } else { E::zero() })
                .collect(),
        )]
    })
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let (av, bv) = (a.to_vec(), b.to_vec());
    let mut out = vec![E::zero(); m * n];
    gemm(m, k, n, &av, false, &bv, false, &mut out, false);
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(
        out,
        vec![m, n],
        "matmul",
        &[a, b],
        move |g| {
            let ga = need_a.then(|| {
                let mut ga = vec![E::zero(); m * k];
                gemm(m, n, k, g, false, &bv, true, &mut ga, false);
                ga
            });
            let gb = need_b.then(|| {
                let mut gb = vec![E::zero(); k * n];
                gemm(k, m, n, &av, true, g, false, &mut gb, false);
                gb
            });
            vec![ga, gb]
        },
    ))
}

pub fn reshape<E: Element>(a: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    if numel(shape) != a.numel() {
        return Err(mismatch("reshape", format!("{:?} -> {shape:?}", a.shape())));
    }
    Ok(Tensor::from_op(
        a.to_vec(),
        shape.to_vec(),
        "reshape",
        &[a],
        |g| vec![Some(g.to_vec())],
    ))
}

/// Joins tensors along `axis`; all other dimensions must agree.
pub fn concat<E: Element>(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = parts
        .first()
        .ok_or_else(|| mismatch("concat", "no inputs".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(mismatch("concat", format!("axis {axis} for rank {rank}")));
    }
    for p in parts {
        let ok = p.rank() == rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !ok {
            return Err(mismatch(
                "concat",
                format!("{:?} vs {:?} on axis {axis}", first.shape(), p.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total);
    let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
    for o in 0..outer {
        for (d, &w) in datas.iter().zip(&widths) {
            out.extend_from_slice(&d[o * w..(o + 1) * w]);
        }
    }
    drop(datas);
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    Ok(Tensor::from_op(out, shape, "concat", parts, move |g| {
        let mut grads: Vec<Vec<E>> = widths
            .iter()
            .map(|&w| Vec::with_capacity(w * outer))
            .collect();
        for o in 0..outer {
            let mut off = o * total;
            for (gi, &w) in grads.iter_mut().zip(&widths) {
                gi.extend_from_slice(&g[off..off + w]);
                off += w;
            }
        }
        grads.into_iter().map(Some).collect()
    }))
}

pub fn sum<E: Element>(a: &Tensor<E>) -> Tensor<E> {
    let n = a.numel();
    let s = a.data().iter().fold(E::zero(), |acc, &x| acc + x);
    Tensor::from_op(vec![s], vec![1], "sum", &[a], move |g| {
        vec![Some(vec![g[0]; n])]
    })
}

pub fn mean<E: Element>(a: &Tensor<E>) -> Tensor<E> {
    let n = a.numel();
    let inv = E::one() / E::from_usize(n).unwrap();
    let s = a.data().iter().fold(E::zero(), |acc, &x| acc + x);
    Tensor::from_op(vec![s * inv], vec![1], "mean", &[a], move |g| {
        vec![Some(vec![g[0] * inv; n])]
    })
}

/// Mean cross-entropy of `logits [batch, classes]` against integer labels.
pub fn softmax_cross_entropy<E: Element>(
    logits: &Tensor<E>,
    labels: &[usize],
) -> Result<Tensor<E>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(mismatch(
            "softmax_cross_entropy",
            format!("logits {s:?} with {} labels", labels.len()),
        ));
    }
    let (b, c) = (s[0], s[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(TensorError::LabelOutOfRange {
            op: "softmax_cross_entropy",
            label,
            classes: c,
        });
    }
    let x = logits.data();
    let mut probs = vec![E::zero(); b * c];
    let mut total = E::zero();
    for (i, row) in x.chunks_exact(c).enumerate() {
        let max = row.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
        let p = &mut probs[i * c..(i + 1) * c];
        let mut z = E::zero();
        for (pj, &v) in p.iter_mut().zip(row) {
            *pj = (v - max).exp();
            z = z + *pj;
        }
        p.iter_mut().for_each(|v| *v = *v / z);
        total = total + (max + z.ln() - row[labels[i]]);
    }
    drop(x);
    let inv_b = E::one() / E::from_usize(b).unwrap();
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![total * inv_b],
        vec![1],
        "softmax_cross_entropy",
        &[logits],
        move |g| {
            let k = g[0] * inv_b;
            let mut gl = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                gl[i * c + l] = gl[i * c + l] - E::one();
            }
            gl.iter_mut().for_each(|v| *v = *v * k);
            vec![Some(gl)]
        },
    ))
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn l2_normalize_impl<E: Element>(x: &Tensor<E>, axis: usize, strict: bool) -> Result<Tensor<E>> {
    if axis >= x.rank() {
        return Err(mismatch(
            "l2_normalize",
            format!("axis {axis} for shape {:?}", x.shape()),
        ));
    }
    let (outer, len, inner) = axis_layout(x.shape(), axis);
    let eps = E::from_f64_lossy(L2_EPSILON);
    let xv = x.data();
    let mut out = vec![E::zero(); xv.len()];
    let mut norms = vec![E::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let n = (0..len)
                .fold(E::zero(), |acc, j| acc + xv[idx(j)] * xv[idx(j)])
                .sqrt();
            if strict && n == E::zero() {
                return Err(TensorError::ZeroNorm(o * inner + i));
            }
            let n = n.max(eps);
            norms[o * inner + i] = n;
            for j in 0..len {
                out[idx(j)] = xv[idx(j)] / n;
            }
        }
    }
    drop(xv);
    let y = out.clone();
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        "l2_normalize",
        &[x],
        move |g| {
            let mut gx = vec![E::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let n = norms[o * inner + i];
                    if n > eps {
                        let dot = (0..len).fold(E::zero(), |acc, j| acc + y[idx(j)] * g[idx(j)]);
                        for j in 0..len {
                            gx[idx(j)] = (g[idx(j)] - y[idx(j)] * dot) / n;
                        }
                    } else {
                        for j in 0..len {
                            gx[idx(j)] = g[idx(j)] / n;
                        }
                    }
                }
            }
            vec![Some(gx)]
        },
    ))
}

/// Scales each vector along `axis` to unit Euclidean norm, dividing by
/// `max(norm, 1e-12)`.
pub fn l2_normalize<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    l2_normalize_impl(x, axis, false)
}

/// Like [`l2_normalize`] but an exactly-zero vector is an error.
pub fn l2_normalize_strict<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    l2_normalize_impl(x, axis, true)
}

/// Mean over all elements of `(a - b)^2`.
pub fn mse<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(mismatch(
            "mse",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let n = a.numel();
    let inv = E::one() / E::from_usize(n).unwrap();
    let diff: Vec<E> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x - y)
        .collect();
    let loss = diff.iter().fold(E::zero(), |acc, &d| acc + d * d) * inv;
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        "mse",
        &[a, b],
        move |g| {
            let k = (E::one() + E::one()) * inv * g[0];
            let ga: Vec<E> = diff.iter().map(|&d| d * k).collect();
            let gb = need_b.then(|| ga.iter().map(|&v| -v).collect());
            vec![need_a.then_some(ga), gb]
        },
    ))
}

/// Operation kinds addressable through [`forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Matmul,
    Conv2d {
        stride: usize,
        padding: usize,
    },
    Add,
    Mul,
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    /// Inputs `[x, gamma, beta]`, batch statistics.
    BatchNorm {
        eps: f64,
    },
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
    },
    L2Normalize {
        axis: usize,
    },
    Mse,
    Reshape {
        shape: Vec<usize>,
    },
    Concat {
        axis: usize,
    },
    Mean,
    Sum,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Mse => "mse",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Mean => "mean",
            Op::Sum => "sum",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Matmul | Op::Conv2d { .. } | Op::Add | Op::Mul | Op::Mse => Some(2),
            Op::BatchNorm { .. } => Some(3),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Uniform entry point over every differentiable operation.
pub fn forward_op<E: Element>(op: &Op, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(mismatch(
                op.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
    }
    match op {
        Op::Matmul => matmul(inputs[0], inputs[1]),
        Op::Conv2d { stride, padding } => conv::conv2d(inputs[0], inputs[1], *stride, *padding),
        Op::Add => add(inputs[0], inputs[1]),
        Op::Mul => mul(inputs[0], inputs[1]),
        Op::Relu => Ok(relu(inputs[0])),
        Op::MaxPool2d { kernel, stride } => conv::max_pool2d(inputs[0], *kernel, *stride),
        Op::AvgPool2d { kernel, stride } => {
            conv::avg_pool2d(inputs[0], (*kernel, *kernel), (*stride, *stride))
        }
        Op::BatchNorm { eps } => conv::batch_norm(
            inputs[0],
            inputs[1],
            inputs[2],
            BatchNormMode::Train {
                eps: E::from_f64_lossy(*eps),
            },
        )
        .map(|(y, _)| y),
        Op::SoftmaxCrossEntropy { labels } => softmax_cross_entropy(inputs[0], labels),
        Op::L2Normalize { axis } => l2_normalize(inputs[0], *axis),
        Op::Mse => mse(inputs[0], inputs[1]),
        Op::Reshape { shape } => reshape(inputs[0], shape),
        Op::Concat { axis } => concat(inputs, *axis),
        Op::Mean => Ok(mean(inputs[0])),
        Op::Sum => Ok(sum(inputs[0])),
    }
}
