use super::kernels::{self, Conv2dGeom, ConvDims, Taps};
use super::{Param, ParamId, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Which statistics a batch-norm layer normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Per-batch statistics; the observed statistics are recorded on the tape
    /// under `key` so the owning layer can fold them into its running averages.
    Train { key: ParamId },
    /// Fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed by a training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub key: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var, usize),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv2dGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        batch_stats: bool,
    },
    Resample {
        input: Var,
        rows: Vec<Taps>,
        cols: Vec<Taps>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u8>,
        ignore: u8,
        count: usize,
    },
    BceWithLogits {
        input: Var,
        target: f64,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sigmoid(_) => "sigmoid",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Softmax(..) => "softmax",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Resample { .. } => "resample",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Records operations in execution order for later reverse-mode replay.
///
/// A tape is owned by a single thread; it is cheap to create one per step.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) params: HashMap<ParamId, Var>,
    bn_stats: Vec<BatchStats>,
    no_grad: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose parameters are bound without gradient tracking.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.bn_stats
    }

    /// Name of the first recorded operation whose output is not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| !n.value.is_finite())
            .map(|n| n.op.name())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient on [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        let rg = !self.no_grad;
        self.push(value, Op::Leaf, rg)
    }

    /// Binds a parameter as a leaf; repeated binds return the same handle.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.variable(p.value.clone());
        self.params.insert(p.id(), v);
        v
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.any_grad(&[a]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape).map_err(|_| {
            Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(a)),
            )
        })?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let data = kernels::permute(self.value(a).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("operand {s:?} incompatible with {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Narrow { input: a, axis, start }, rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let out = Tensor::new(&shape, softmax_along(self.value(a).data(), &shape, axis))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    /// `[m,k] @ [k,n]`, `[b,m,k] @ [k,n]` or `[b,m,k] @ [b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb)?;
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..dims.batch {
            let a_off = bi * dims.m * dims.k;
            let b_off = if dims.b_batched { bi * dims.k * dims.n } else { 0 };
            kernels::gemm(
                dims.m,
                dims.k,
                dims.n,
                1.0,
                &ta[a_off..a_off + dims.m * dims.k],
                (dims.k, 1),
                &tb[b_off..b_off + dims.k * dims.n],
                (dims.n, 1),
                0.0,
                &mut out[bi * dims.m * dims.n..(bi + 1) * dims.m * dims.n],
                (dims.n, 1),
            );
        }
        let shape = if sa.len() == 3 {
            vec![dims.batch, dims.m, dims.n]
        } else {
            vec![dims.m, dims.n]
        };
        let out = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// 2-D convolution of `[N, Cin, H, W]` by `[Cout, Cin, kh, kw]` with optional `[Cout]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: Conv2dGeom) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected rank-4 input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels (axis 1) {} != weight input channels (axis 1) {}", xs[1], ws[1]),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} does not match {} output channels", self.shape(b), ws[0]),
                ));
            }
        }
        let d = conv_dims(&xs, &ws, &geom)?;
        let (n, cout) = (xs[0], ws[0]);
        let p = d.oh * d.ow;
        let kdim = d.cin * d.kh * d.kw;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; n * cout * p];
        let pointwise = geom.is_pointwise(d.kh, d.kw);
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; kdim * p] };
        for s in 0..n {
            let xs_n = &x[s * d.cin * d.h * d.w..(s + 1) * d.cin * d.h * d.w];
            let cols_ref: &[f64] = if pointwise {
                xs_n
            } else {
                kernels::im2col(xs_n, &d, &geom, &mut cols);
                &cols
            };
            kernels::gemm(
                cout,
                kdim,
                p,
                1.0,
                w,
                (kdim, 1),
                cols_ref,
                (p, 1),
                0.0,
                &mut out[s * cout * p..(s + 1) * cout * p],
                (p, 1),
            );
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for s in 0..n {
                for (c, &bc) in bv.iter().enumerate() {
                    let base = (s * cout + c) * p;
                    out[base..base + p].iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let out = Tensor::new(&[n, cout, d.oh, d.ow], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel batch normalization of `[N, C, H, W]` with affine `gamma`, `beta`.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm", format!("expected rank-4 input, got {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "affine params {:?}/{:?} do not match {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (n, plane) = (xs[0], xs[2] * xs[3]);
        let count = n * plane;
        let x = self.value(input).data();
        let mut pending = None;
        let (mean, invstd, batch_stats) = match mode {
            BnMode::Train { key } => {
                if count < 2 {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("batch statistics need at least 2 values per channel, got {count}"),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        s += x[base..base + plane].iter().sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut ss = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        ss += x[base..base + plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / count as f64;
                }
                let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let unbiased = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
                pending = Some(BatchStats {
                    key,
                    mean: mean.clone(),
                    var: unbiased,
                });
                (mean, invstd, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length mismatch"));
                }
                let invstd = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean.to_vec(), invstd, false)
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (mu, is, gg, bb) = (mean[ch], invstd[ch], g[ch], bt[ch]);
                for i in base..base + plane {
                    out[i] = gg * (x[i] - mu) * is + bb;
                }
            }
        }
        let out = Tensor::new(&xs, out)?;
        self.bn_stats.extend(pending);
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            },
            rg,
        ))
    }

    /// Bilinear resize of the two trailing axes (half-pixel centers, edge clamp).
    pub fn upsample_bilinear(&mut self, a: Var, size: (usize, usize)) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(Error::shape("upsample_bilinear", format!("rank too small: {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let rows = kernels::bilinear_taps(h, size.0);
        let cols = kernels::bilinear_taps(w, size.1);
        self.resample(a, rows, cols)
    }

    /// Nearest-neighbor resize of the two trailing axes.
    pub fn upsample_nearest(&mut self, a: Var, size: (usize, usize)) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(Error::shape("upsample_nearest", format!("rank too small: {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let rows = kernels::nearest_taps(h, size.0);
        let cols = kernels::nearest_taps(w, size.1);
        self.resample(a, rows, cols)
    }

    fn resample(&mut self, a: Var, rows: Vec<Taps>, cols: Vec<Taps>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let r = s.len();
        let planes: usize = s[..r - 2].iter().product();
        let data = kernels::resample_planes(self.value(a).data(), planes, (s[r - 2], s[r - 1]), &rows, &cols);
        let mut shape = s;
        shape[r - 2] = rows.len();
        shape[r - 1] = cols.len();
        let out = Tensor::new(&shape, data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Resample { input: a, rows, cols }, rg))
    }

    /// Mean softmax cross-entropy of `[N, C, H, W]` logits against per-pixel
    /// class targets (`N*H*W`, row-major), skipping pixels equal to `ignore`.
    ///
    /// With no countable pixel the loss is 0 and carries no gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8], ignore: u8) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("cross_entropy", format!("expected [N,C,H,W] logits, got {s:?}")));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        if targets.len() != n * plane {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {} pixels", targets.len(), n * plane),
            ));
        }
        let x = self.value(logits).data();
        let mut total = 0.0;
        let mut count = 0usize;
        for b in 0..n {
            for i in 0..plane {
                let t = targets[b * plane + i];
                if t == ignore {
                    continue;
                }
                if t as usize >= c {
                    return Err(Error::Invalid(format!("target class {t} with only {c} classes")));
                }
                let at = |k: usize| x[(b * c + k) * plane + i];
                let mx = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..c).map(|k| (at(k) - mx).exp()).sum::<f64>().ln();
                total += lse - at(t as usize);
                count += 1;
            }
        }
        let loss = if count == 0 {
            log::warn!("cross_entropy: every pixel is ignored; loss is 0");
            0.0
        } else {
            total / count as f64
        };
        let rg = count > 0 && self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                count,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(input)` against a constant label.
    pub fn bce_with_logits(&mut self, input: Var, target: f64) -> Var {
        let t = self.value(input);
        let s: f64 = t
            .data()
            .iter()
            .map(|&x| x.max(0.0) - x * target + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = s / t.numel() as f64;
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(loss), Op::BceWithLogits { input, target }, rg)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_along(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = kernels::split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mx = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (x[idx(k)] - mx).exp();
                out[idx(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[idx(k)] /= z;
            }
        }
    }
    out
}

pub(crate) struct MatMulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub b_batched: bool,
}

pub(crate) fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<MatMulDims> {
    let bad = || Error::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
    let (batch, m, k) = match sa.len() {
        2 => (1, sa[0], sa[1]),
        3 => (sa[0], sa[1], sa[2]),
        _ => return Err(bad()),
    };
    let (kb, n, b_batched) = match sb.len() {
        2 => (sb[0], sb[1], false),
        3 if sa.len() == 3 && sb[0] == batch => (sb[1], sb[2], true),
        _ => return Err(bad()),
    };
    if k != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner axes differ: {sa:?} (last) vs {sb:?} (second to last)"),
        ));
    }
    Ok(MatMulDims {
        batch,
        m,
        k,
        n,
        b_batched,
    })
}

pub(crate) fn conv_dims(xs: &[usize], ws: &[usize], geom: &Conv2dGeom) -> Result<ConvDims> {
    Ok(ConvDims {
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        kh: ws[2],
        kw: ws[3],
        oh: geom.out_extent(xs[2], ws[2])?,
        ow: geom.out_extent(xs[3], ws[3])?,
    })
}
