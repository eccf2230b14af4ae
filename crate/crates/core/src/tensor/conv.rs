//! Spatial operations on `[batch, channels, height, width]` tensors.

use super::{gemm, is_grad_enabled, ops::reshape, Element, Result, Tensor, TensorError};

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn dims4<E: Element>(op: &'static str, x: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(mismatch(
            op,
            format!("expected [batch, channels, height, width], got {s:?}"),
        )),
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pad > kj {
            (self.pad - kj).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Visits every in-bounds run of the patch matrix: `f(dst, src, len)`
    /// pairs `len` consecutive columns starting at flat patch index `dst`
    /// with input elements `src, src + stride, ...`.
    fn for_each_run(&self, batch: usize, mut f: impl FnMut(usize, usize, usize)) {
        let l = self.oh * self.ow;
        let cols = batch * l;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let (lo, hi) = self.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    for b in 0..batch {
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy as usize >= self.h {
                                continue;
                            }
                            let src_row = ((b * self.c + c) * self.h + iy as usize) * self.w;
                            let src = src_row + lo * self.stride + kj - self.pad;
                            f(row * cols + b * l + oy * self.ow + lo, src, hi - lo);
                        }
                    }
                }
            }
        }
    }

    fn im2col<E: Element>(&self, batch: usize, x: &[E], cols: &mut [E]) {
        let s = self.stride;
        self.for_each_run(batch, |dst, src, len| {
            if s == 1 {
                cols[dst..dst + len].copy_from_slice(&x[src..src + len]);
            } else {
                for (j, d) in cols[dst..dst + len].iter_mut().enumerate() {
                    *d = x[src + j * s];
                }
            }
        });
    }

    fn col2im<E: Element>(&self, batch: usize, cols: &[E], x: &mut [E]) {
        let s = self.stride;
        self.for_each_run(batch, |dst, src, len| {
            for (j, &v) in cols[dst..dst + len].iter().enumerate() {
                let t = &mut x[src + j * s];
                *t = *t + v;
            }
        });
    }
}

/// 2-D cross-correlation of `x [B,C,H,W]` with `weight [OC,C,KH,KW]`, no bias.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let (b, c, h, w) = dims4("conv2d", x)?;
    let (oc, wc, kh, kw) = dims4("conv2d", weight)?;
    if wc != c {
        return Err(mismatch(
            "conv2d",
            format!("input channels {c} vs weight channels {wc}"),
        ));
    }
    if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(mismatch(
            "conv2d",
            format!("kernel {kh}x{kw} stride {stride} padding {padding} on {h}x{w} input"),
        ));
    }
    let geom = ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (w + 2 * padding - kw) / stride + 1,
        stride,
        pad: padding,
    };
    let l = geom.oh * geom.ow;
    let rows = c * kh * kw;
    let cols_n = b * l;

    let mut cols = vec![E::zero(); rows * cols_n];
    geom.im2col(b, &x.data(), &mut cols);
    let wv = weight.to_vec();
    let mut ym = vec![E::zero(); oc * cols_n];
    gemm(oc, rows, cols_n, &wv, false, &cols, false, &mut ym, false);

    // [OC, B*L] -> [B, OC, L]
    let mut out = vec![E::zero(); b * oc * l];
    for o in 0..oc {
        for bi in 0..b {
            out[(bi * oc + o) * l..(bi * oc + o + 1) * l]
                .copy_from_slice(&ym[o * cols_n + bi * l..o * cols_n + (bi + 1) * l]);
        }
    }
    drop(ym);

    let (need_x, need_w) = (x.requires_grad(), weight.requires_grad());
    let shape = vec![b, oc, geom.oh, geom.ow];
    Ok(Tensor::from_op(
        out,
        shape,
        "conv2d",
        &[x, weight],
        move |g| {
            let mut gm = vec![E::zero(); oc * cols_n];
            for o in 0..oc {
                for bi in 0..b {
                    gm[o * cols_n + bi * l..o * cols_n + (bi + 1) * l]
                        .copy_from_slice(&g[(bi * oc + o) * l..(bi * oc + o + 1) * l]);
                }
            }
            let gw = need_w.then(|| {
                let mut gw = vec![E::zero(); oc * rows];
                gemm(oc, cols_n, rows, &gm, false, &cols, true, &mut gw, false);
                gw
            });
            let gx = need_x.then(|| {
                let mut gcols = vec![E::zero(); rows * cols_n];
                gemm(rows, oc, cols_n, &wv, true, &gm, false, &mut gcols, false);
                let mut gx = vec![E::zero(); b * c * geom.h * geom.w];
                geom.col2im(b, &gcols, &mut gx);
                gx
            });
            vec![gx, gw]
        },
    ))
}

fn pool_out(op: &'static str, size: usize, k: usize, s: usize) -> Result<usize> {
    if k == 0 || s == 0 || k > size {
        return Err(mismatch(
            op,
            format!("kernel {k} stride {s} on extent {size}"),
        ));
    }
    Ok((size - k) / s + 1)
}

/// Max pooling without padding; ties resolve to the first maximum.
pub fn max_pool2d<E: Element>(x: &Tensor<E>, kernel: usize, stride: usize) -> Result<Tensor<E>> {
    let (b, c, h, w) = dims4("max_pool2d", x)?;
    let oh = pool_out("max_pool2d", h, kernel, stride)?;
    let ow = pool_out("max_pool2d", w, kernel, stride)?;
    let xv = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    if kernel == 2 && stride == 2 {
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let r0 = base + 2 * oy * w;
                let (top, bot) = (&xv[r0..r0 + w], &xv[r0 + w..r0 + 2 * w]);
                for ox in 0..ow {
                    let cand = [top[2 * ox], top[2 * ox + 1], bot[2 * ox], bot[2 * ox + 1]];
                    let offs = [
                        r0 + 2 * ox,
                        r0 + 2 * ox + 1,
                        r0 + w + 2 * ox,
                        r0 + w + 2 * ox + 1,
                    ];
                    let mut k = 0;
                    for j in 1..4 {
                        if cand[j] > cand[k] {
                            k = j;
                        }
                    }
                    out.push(cand[k]);
                    argmax.push(offs[k]);
                }
            }
        }
    } else {
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let corner = base + oy * stride * w + ox * stride;
                    let mut best = corner;
                    let mut best_v = xv[corner];
                    for ky in 0..kernel {
                        let row = &xv[corner + ky * w..corner + ky * w + kernel];
                        for (kx, &v) in row.iter().enumerate() {
                            if v > best_v {
                                best_v = v;
                                best = corner + ky * w + kx;
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
    }
    drop(xv);
    let n = b * c * h * w;
    Ok(Tensor::from_op(
        out,
        vec![b, c, oh, ow],
        "max_pool2d",
        &[x],
        move |g| {
            let mut gx = vec![E::zero(); n];
            for (&i, &gv) in argmax.iter().zip(g) {
                gx[i] = gx[i] + gv;
            }
            vec![Some(gx)]
        },
    ))
}

/// Average pooling without padding over a `(kh, kw)` window.
pub fn avg_pool2d<E: Element>(
    x: &Tensor<E>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<E>> {
    let (b, c, h, w) = dims4("avg_pool2d", x)?;
    let oh = pool_out("avg_pool2d", h, kernel.0, stride.0)?;
    let ow = pool_out("avg_pool2d", w, kernel.1, stride.1)?;
    let inv = E::one() / E::from_usize(kernel.0 * kernel.1).unwrap();
    let xv = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = E::zero();
                for ky in 0..kernel.0 {
                    let row = base + (oy * stride.0 + ky) * w + ox * stride.1;
                    for kx in 0..kernel.1 {
                        s = s + xv[row + kx];
                    }
                }
                out.push(s * inv);
            }
        }
    }
    drop(xv);
    Ok(Tensor::from_op(
        out,
        vec![b, c, oh, ow],
        "avg_pool2d",
        &[x],
        move |g| {
            let mut gx = vec![E::zero(); b * c * h * w];
            for plane in 0..b * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(plane * oh + oy) * ow + ox] * inv;
                        for ky in 0..kernel.0 {
                            let row = base + (oy * stride.0 + ky) * w + ox * stride.1;
                            for kx in 0..kernel.1 {
                                gx[row + kx] = gx[row + kx] + gv;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        },
    ))
}

/// Sum of `f` over `xs` with eight independent accumulators so the loop vectorizes.
fn lane_sum<E: Element>(xs: &[E], f: impl Fn(E) -> E) -> E {
    let mut acc = [E::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder().iter().fold(E::zero(), |a, &v| a + f(v));
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a = *a + f(v);
        }
    }
    acc.iter().fold(tail, |a, &v| a + v)
}

/// `[B,C,H,W] -> [B,C]` spatial mean.
pub fn global_avg_pool<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (b, c, h, w) = dims4("global_avg_pool", x)?;
    let pooled = avg_pool2d(x, (h, w), (h, w))?;
    reshape(&pooled, &[b, c])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchNormMode<'a, E: Element> {
    /// Normalize with statistics of the current batch.
    Train { eps: E },
    /// Normalize with stored running statistics.
    Eval { mean: &'a [E], var: &'a [E], eps: E },
}

/// Per-channel statistics of a training-mode batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    /// Unbiased variance, as used for running estimates.
    pub var_unbiased: Vec<E>,
}

/// Batch normalization over axis 1 of a `[B,C]` or `[B,C,H,W]` tensor.
///
/// Returns batch statistics in train mode so the caller can update its
/// running estimates.
pub fn batch_norm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    mode: BatchNormMode<'_, E>,
) -> Result<(Tensor<E>, Option<BatchStats<E>>)> {
    let (b, c, inner) = match *x.shape() {
        [b, c] => (b, c, 1),
        [b, c, h, w] => (b, c, h * w),
        ref s => {
            return Err(mismatch(
                "batch_norm",
                format!("expected rank 2 or 4, got {s:?}"),
            ))
        }
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(mismatch(
            "batch_norm",
            format!(
                "{c} channels vs gamma {:?} beta {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let m = b * inner;
    let m_e = E::from_usize(m).unwrap();
    let xv = x.data();
    let gv = gamma.to_vec();
    let bv = beta.to_vec();

    let mut mean = vec![E::zero(); c];
    let mut invstd = vec![E::zero(); c];
    let mut stats = None;
    match mode {
        BatchNormMode::Train { eps } => {
            let mut var = vec![E::zero(); c];
            let plane =
                |bi: usize, ch: usize| &xv[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
            for ch in 0..c {
                let s = (0..b).fold(E::zero(), |acc, bi| acc + lane_sum(plane(bi, ch), |v| v));
                let mu = s / m_e;
                let v = (0..b).fold(E::zero(), |acc, bi| {
                    acc + lane_sum(plane(bi, ch), |v| {
                        let d = v - mu;
                        d * d
                    })
                });
                mean[ch] = mu;
                var[ch] = v / m_e;
                invstd[ch] = E::one() / (var[ch] + eps).sqrt();
            }
            let unbias = if m > 1 {
                m_e / E::from_usize(m - 1).unwrap()
            } else {
                E::one()
            };
            stats = Some(BatchStats {
                mean: mean.clone(),
                var_unbiased: var.iter().map(|&v| v * unbias).collect(),
            });
        }
        BatchNormMode::Eval {
            mean: rm,
            var: rv,
            eps,
        } => {
            if rm.len() != c || rv.len() != c {
                return Err(mismatch(
                    "batch_norm",
                    format!("running stats for {} channels, input has {c}", rm.len()),
                ));
            }
            mean.copy_from_slice(rm);
            for ch in 0..c {
                invstd[ch] = E::one() / (rv[ch] + eps).sqrt();
            }
        }
    }

    let track = is_grad_enabled() && [x, gamma, beta].iter().any(|t| t.requires_grad());
    let mut xhat = if track {
        vec![E::zero(); xv.len()]
    } else {
        Vec::new()
    };
    let mut out = vec![E::zero(); xv.len()];
    for (p, chunk) in out.chunks_mut(inner).enumerate() {
        let ch = p % c;
        let (mu, is, g, bb) = (mean[ch], invstd[ch], gv[ch], bv[ch]);
        let src = &xv[p * inner..(p + 1) * inner];
        if track {
            let xh = &mut xhat[p * inner..(p + 1) * inner];
            for ((o, h), &v) in chunk.iter_mut().zip(xh.iter_mut()).zip(src) {
                *h = (v - mu) * is;
                *o = g * *h + bb;
            }
        } else {
            for (o, &v) in chunk.iter_mut().zip(src) {
                *o = g * ((v - mu) * is) + bb;
            }
        }
    }
    drop(xv);

    let train = matches!(mode, BatchNormMode::Train { .. });
    let y = Tensor::from_op(
        out,
        x.shape().to_vec(),
        "batch_norm",
        &[x, gamma, beta],
        move |g| {
            let mut dgamma = vec![E::zero(); c];
            let mut dbeta = vec![E::zero(); c];
            for (p, (gs, hs)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                let ch = p % c;
                for (&gk, &hk) in gs.iter().zip(hs) {
                    dgamma[ch] = dgamma[ch] + gk * hk;
                    dbeta[ch] = dbeta[ch] + gk;
                }
            }
            let mut dx = vec![E::zero(); g.len()];
            for (p, ((d, gs), hs)) in dx
                .chunks_mut(inner)
                .zip(g.chunks(inner))
                .zip(xhat.chunks(inner))
                .enumerate()
            {
                let ch = p % c;
                let scale = gv[ch] * invstd[ch];
                let (mb, mg) = (dbeta[ch] / m_e, dgamma[ch] / m_e);
                for ((dk, &gk), &hk) in d.iter_mut().zip(gs).zip(hs) {
                    *dk = if train {
                        scale * (gk - mb - hk * mg)
                    } else {
                        scale * gk
                    };
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        },
    );
    Ok((y, stats))
}
