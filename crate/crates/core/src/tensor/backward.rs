use super::kernels::{self, ConvDims};
use super::tape::{conv_dims, matmul_dims, sigmoid, softmax_along, Op, Tape, Var};
use super::{ParamId, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Gradients of a scalar loss with respect to every gradient-tracking value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Flat gradient of `v`; leaves off the loss path hold zeros.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

impl Tape {
    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Operations are visited once each, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, op: &Op, y: &Tensor, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        // Each arm adds its contribution to the gradient slots of its inputs.
        let mut add_to = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if rg(v) {
                let len = val(v).numel();
                accumulate(&mut grads[v.0], len, f);
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                add_to(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                add_to(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                add_to(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                add_to(*a, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(vb) {
                        *g += d * x;
                    }
                });
                add_to(*b, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(va) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale(a, c) => add_to(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d)),
            Op::Relu(a) => {
                let x = val(*a).data();
                add_to(*a, &mut |g| {
                    for ((g, d), &x) in g.iter_mut().zip(dy).zip(x) {
                        if x > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a).data();
                add_to(*a, &mut |g| {
                    for ((g, d), &x) in g.iter_mut().zip(dy).zip(x) {
                        *g += if x > 0.0 { *d } else { slope * d };
                    }
                });
            }
            Op::Log(a) => {
                let x = val(*a).data();
                add_to(*a, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(x) {
                        *g += d / x;
                    }
                });
            }
            Op::Exp(a) => add_to(*a, &mut |g| {
                for ((g, d), y) in g.iter_mut().zip(dy).zip(y.data()) {
                    *g += d * y;
                }
            }),
            Op::Sigmoid(a) => add_to(*a, &mut |g| {
                for ((g, d), y) in g.iter_mut().zip(dy).zip(y.data()) {
                    *g += d * y * (1.0 - y);
                }
            }),
            Op::SumAll(a) => add_to(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::MeanAll(a) => {
                let n = val(*a).numel() as f64;
                add_to(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::Reshape(a) => add_to(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d)),
            Op::Permute(a, perm) => {
                let back = kernels::permute(dy, y.shape(), &kernels::inverse_perm(perm));
                add_to(*a, &mut |g| g.iter_mut().zip(&back).for_each(|(g, d)| *g += d));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = kernels::split_axis(y.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).dim(*axis);
                    add_to(*p, &mut |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                g[dst + j] += dy[src + j];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let (outer, n, inner) = kernels::split_axis(val(*input).shape(), *axis);
                let len = y.dim(*axis);
                add_to(*input, &mut |g| {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        for j in 0..len * inner {
                            g[dst + j] += dy[o * len * inner + j];
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = kernels::split_axis(y.shape(), *axis);
                let yv = y.data();
                add_to(*a, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| dy[idx(k)] * yv[idx(k)]).sum();
                            for k in 0..len {
                                g[idx(k)] += yv[idx(k)] * (dy[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let dims = matmul_dims(val(*a).shape(), val(*b).shape())?;
                let (m, k, n) = (dims.m, dims.k, dims.n);
                let (va, vb) = (val(*a).data(), val(*b).data());
                add_to(*a, &mut |g| {
                    for bi in 0..dims.batch {
                        let b_off = if dims.b_batched { bi * k * n } else { 0 };
                        // dA = dY @ B^T
                        kernels::gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &dy[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            &vb[b_off..b_off + k * n],
                            (1, n),
                            1.0,
                            &mut g[bi * m * k..(bi + 1) * m * k],
                            (k, 1),
                        );
                    }
                });
                add_to(*b, &mut |g| {
                    for bi in 0..dims.batch {
                        let b_off = if dims.b_batched { bi * k * n } else { 0 };
                        // dB = A^T @ dY
                        kernels::gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &va[bi * m * k..(bi + 1) * m * k],
                            (1, k),
                            &dy[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            1.0,
                            &mut g[b_off..b_off + k * n],
                            (n, 1),
                        );
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let xs = val(*input).shape().to_vec();
                let ws = val(*weight).shape().to_vec();
                let d: ConvDims = conv_dims(&xs, &ws, geom)?;
                let (nb, cout) = (xs[0], ws[0]);
                let p = d.oh * d.ow;
                let kdim = d.cin * d.kh * d.kw;
                let img = d.cin * d.h * d.w;
                let x = val(*input).data();
                let w = val(*weight).data();
                let pointwise = geom.is_pointwise(d.kh, d.kw);
                if let Some(b) = bias {
                    add_to(*b, &mut |g| {
                        for s in 0..nb {
                            for (c, gc) in g.iter_mut().enumerate() {
                                let base = (s * cout + c) * p;
                                *gc += dy[base..base + p].iter().sum::<f64>();
                            }
                        }
                    });
                }
                let mut cols = vec![0.0; if pointwise { 0 } else { kdim * p }];
                add_to(*weight, &mut |g| {
                    for s in 0..nb {
                        let xs_n = &x[s * img..(s + 1) * img];
                        let cols_ref: &[f64] = if pointwise {
                            xs_n
                        } else {
                            kernels::im2col(xs_n, &d, geom, &mut cols);
                            &cols
                        };
                        // dW += dY_s @ cols^T
                        kernels::gemm(
                            cout,
                            p,
                            kdim,
                            1.0,
                            &dy[s * cout * p..(s + 1) * cout * p],
                            (p, 1),
                            cols_ref,
                            (1, p),
                            1.0,
                            g,
                            (kdim, 1),
                        );
                    }
                });
                add_to(*input, &mut |g| {
                    let mut dcols = vec![0.0; kdim * p];
                    for s in 0..nb {
                        // dcols = W^T @ dY_s
                        kernels::gemm(
                            kdim,
                            cout,
                            p,
                            1.0,
                            w,
                            (1, kdim),
                            &dy[s * cout * p..(s + 1) * cout * p],
                            (p, 1),
                            0.0,
                            &mut dcols,
                            (p, 1),
                        );
                        let gx = &mut g[s * img..(s + 1) * img];
                        if pointwise {
                            gx.iter_mut().zip(&dcols).for_each(|(g, d)| *g += d);
                        } else {
                            kernels::col2im(&dcols, &d, geom, gx);
                        }
                    }
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            } => {
                let s = val(*input).shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let count = (n * plane) as f64;
                let x = val(*input).data();
                let gv = val(*gamma).data();
                let xhat = |i: usize, ch: usize| (x[i] - mean[ch]) * invstd[ch];
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xhat(i, ch);
                        }
                    }
                }
                add_to(*beta, &mut |g| g.iter_mut().zip(&sum_dy).for_each(|(g, d)| *g += d));
                add_to(*gamma, &mut |g| g.iter_mut().zip(&sum_dy_xhat).for_each(|(g, d)| *g += d));
                add_to(*input, &mut |g| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let k = gv[ch] * invstd[ch];
                            for i in base..base + plane {
                                g[i] += if *batch_stats {
                                    k / count * (count * dy[i] - sum_dy[ch] - xhat(i, ch) * sum_dy_xhat[ch])
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::Resample { input, rows, cols } => {
                let s = val(*input).shape();
                let r = s.len();
                let planes: usize = s[..r - 2].iter().product();
                let hw = (s[r - 2], s[r - 1]);
                add_to(*input, &mut |g| kernels::resample_planes_adjoint(dy, planes, hw, rows, cols, g));
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let s = val(*logits).shape().to_vec();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let x = val(*logits).data();
                let scale = dy[0] / *count as f64;
                add_to(*logits, &mut |g| {
                    let mut probs = vec![0.0; c];
                    for b in 0..n {
                        for i in 0..plane {
                            let t = targets[b * plane + i];
                            if t == *ignore {
                                continue;
                            }
                            let logit: Vec<f64> = (0..c).map(|k| x[(b * c + k) * plane + i]).collect();
                            probs.copy_from_slice(&softmax_along(&logit, &[c], 0));
                            for k in 0..c {
                                let onehot = if k == t as usize { 1.0 } else { 0.0 };
                                g[(b * c + k) * plane + i] += scale * (probs[k] - onehot);
                            }
                        }
                    }
                });
            }
            Op::BceWithLogits { input, target } => {
                let x = val(*input).data();
                let scale = dy[0] / x.len() as f64;
                add_to(*input, &mut |g| {
                    for (g, &xi) in g.iter_mut().zip(x) {
                        *g += scale * (sigmoid(xi) - target);
                    }
                });
            }
        }
        Ok(())
    }
}
