// Forward and backward rules for the closed operator set.

use std::sync::Arc;

use super::kernels::{gemm, row_major_strides, split_axis, strided_walk, MatMut, MatRef};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Recorded operator. Parameters needed to replay the forward pass live in
/// the variant; tensor inputs are referenced by the tape entry.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Input or parameter; no computation.
    Leaf,
    /// `[m,k] x [k,n] -> [m,n]`.
    MatMul,
    /// `[b,m,k] x [b,k,n] -> [b,m,n]`.
    BatchedMatMul,
    /// 1x1 channel map: `w [co,ci]` applied to `x [b,ci,...]` giving `[b,co,...]`.
    ChannelMap,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Tanh,
    Sigmoid,
    Relu,
    /// `1 / sqrt(x + eps)`.
    Rsqrt { eps: f64 },
    /// Softmax over the last axis.
    Softmax,
    /// Log-softmax over the last axis.
    LogSoftmax,
    /// Sum over the listed axes (removed from the shape).
    Sum { axes: Vec<usize> },
    Mean { axes: Vec<usize> },
    /// Inserts a new axis of extent `size` at `axis`, repeating the input.
    Expand { axis: usize, size: usize },
    /// `x * scale[c] + shift[c]` with `c` indexing `axis`.
    ChannelAffine { axis: usize },
    /// `x [b,ci,t,n]`, `w [co,ci,k]`, odd `k`, zero padding `(k-1)/2`.
    TemporalConv { stride: usize },
    /// Non-overlapping mean of element pairs along `axis`; an unpaired
    /// trailing element passes through.
    PairAverage { axis: usize },
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    /// Output axis `d` is input axis `perm[d]`.
    Permute { perm: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::BatchedMatMul => "batched_matmul",
            Op::ChannelMap => "channel_map",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Rsqrt { .. } => "rsqrt",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Expand { .. } => "expand",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::TemporalConv { .. } => "temporal_conv",
            Op::PairAverage { .. } => "pair_average",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
        }
    }

    /// Number of tensor inputs, `None` for variadic operators.
    pub fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::MatMul | Op::BatchedMatMul | Op::ChannelMap | Op::Add | Op::Sub | Op::Mul => Some(2),
            Op::TemporalConv { .. } => Some(2),
            Op::ChannelAffine { .. } => Some(3),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

fn make<T>(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    debug_assert_eq!(numel(&shape), data.len());
    Tensor { shape, data: Arc::new(data) }
}

fn same_shape<T: Scalar>(op: &Op, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("{}: operand shapes {:?} and {:?} differ", op.name(), a.shape, b.shape)));
    }
    Ok(())
}

fn reduced_shape(op: &Op, shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if axes.windows(2).any(|w| w[0] >= w[1]) || axes.iter().any(|&a| a >= shape.len()) {
        return Err(Error::shape(format!("{}: invalid axes {:?} for shape {:?}", op.name(), axes, shape)));
    }
    let out: Vec<usize> =
        shape.iter().enumerate().filter(|(d, _)| !axes.contains(d)).map(|(_, &s)| s).collect();
    let out_strides = row_major_strides(&out);
    let mut strides = Vec::with_capacity(shape.len());
    let mut k = 0;
    for d in 0..shape.len() {
        if axes.contains(&d) {
            strides.push(0);
        } else {
            strides.push(out_strides[k]);
            k += 1;
        }
    }
    Ok((out, strides))
}

fn validate_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::shape(format!("permute: {perm:?} is not a permutation of rank {rank}")));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::shape(format!("permute: {perm:?} is not a permutation of rank {rank}")));
        }
        seen[p] = true;
    }
    Ok(())
}

fn temporal_conv_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Result<[usize; 7]> {
    if x.rank() != 4 || w.rank() != 3 {
        return Err(Error::shape(format!(
            "temporal_conv: expected x [b,ci,t,n] and w [co,ci,k], got {:?} and {:?}",
            x.shape, w.shape
        )));
    }
    let (b, ci, t, n) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, wci, k) = (w.shape[0], w.shape[1], w.shape[2]);
    if wci != ci {
        return Err(Error::shape(format!("temporal_conv: weight expects {wci} input channels, x has {ci}")));
    }
    if k % 2 == 0 {
        return Err(Error::shape(format!("temporal_conv: kernel size {k} must be odd")));
    }
    if stride == 0 {
        return Err(Error::shape("temporal_conv: stride must be positive"));
    }
    let t_out = if t == 0 { 0 } else { (t - 1) / stride + 1 };
    Ok([b, ci, t, n, co, k, t_out])
}

/// Output frame range `[lo, hi)` whose input frame `t_out * stride + d` is in range.
fn tap_range(t: usize, t_out: usize, stride: usize, d: isize) -> (usize, usize) {
    let mut lo = 0usize;
    while lo < t_out && (lo as isize * stride as isize + d) < 0 {
        lo += 1;
    }
    let mut hi = t_out;
    while hi > lo && ((hi - 1) as isize * stride as isize + d) >= t as isize {
        hi -= 1;
    }
    (lo, hi)
}

pub(crate) fn forward<T: Scalar>(op: &Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if let Some(arity) = op.arity() {
        if inputs.len() != arity {
            return Err(Error::InvalidArgument(format!(
                "{} takes {} inputs, got {}",
                op.name(),
                arity,
                inputs.len()
            )));
        }
    }
    match op {
        Op::Leaf => Err(Error::InvalidArgument("leaf has no forward rule".into())),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::shape(format!("matmul: incompatible {:?} x {:?}", a.shape, b.shape)));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut c = vec![T::zero(); m * n];
            gemm(MatRef::dense(&a.data, 0, m, k), MatRef::dense(&b.data, 0, k, n), T::zero(), MatMut::dense(&mut c, 0, m, n));
            Ok(make(vec![m, n], c))
        }
        Op::BatchedMatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
                return Err(Error::shape(format!("batched_matmul: incompatible {:?} x {:?}", a.shape, b.shape)));
            }
            let (bt, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
            let mut c = vec![T::zero(); bt * m * n];
            for i in 0..bt {
                gemm(
                    MatRef::dense(&a.data, i * m * k, m, k),
                    MatRef::dense(&b.data, i * k * n, k, n),
                    T::zero(),
                    MatMut::dense(&mut c, i * m * n, m, n),
                );
            }
            Ok(make(vec![bt, m, n], c))
        }
        Op::ChannelMap => {
            let (w, x) = (inputs[0], inputs[1]);
            if w.rank() != 2 || x.rank() < 2 || w.shape[1] != x.shape[1] {
                return Err(Error::shape(format!("channel_map: weight {:?} cannot map input {:?}", w.shape, x.shape)));
            }
            let (co, ci, b) = (w.shape[0], w.shape[1], x.shape[0]);
            let s: usize = x.shape[2..].iter().product();
            let mut y = vec![T::zero(); b * co * s];
            for i in 0..b {
                gemm(
                    MatRef::dense(&w.data, 0, co, ci),
                    MatRef::dense(&x.data, i * ci * s, ci, s),
                    T::zero(),
                    MatMut::dense(&mut y, i * co * s, co, s),
                );
            }
            let mut shape = x.shape.clone();
            shape[1] = co;
            Ok(make(shape, y))
        }
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(op, a, b)?;
            let f: fn(T, T) -> T = match op {
                Op::Add => |p, q| p + q,
                Op::Sub => |p, q| p - q,
                _ => |p, q| p * q,
            };
            Ok(make(a.shape.clone(), a.data.iter().zip(b.data.iter()).map(|(&p, &q)| f(p, q)).collect()))
        }
        Op::Scale(c) => {
            let c = T::lit(*c);
            Ok(inputs[0].map(|v| v * c))
        }
        Op::Tanh => Ok(inputs[0].map(|v| v.tanh())),
        Op::Sigmoid => Ok(inputs[0].map(|v| T::one() / (T::one() + (-v).exp()))),
        Op::Relu => Ok(inputs[0].map(|v| if v > T::zero() { v } else { T::zero() })),
        Op::Rsqrt { eps } => {
            let eps = T::lit(*eps);
            Ok(inputs[0].map(|v| T::one() / (v + eps).sqrt()))
        }
        Op::Softmax | Op::LogSoftmax => {
            let x = inputs[0];
            if x.rank() == 0 {
                return Err(Error::shape(format!("{}: needs rank >= 1", op.name())));
            }
            let l = x.shape[x.rank() - 1];
            let mut y = vec![T::zero(); x.len()];
            if l > 0 {
                for (row, out) in x.data.chunks(l).zip(y.chunks_mut(l)) {
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for &v in row {
                        z += (v - max).exp();
                    }
                    if matches!(op, Op::Softmax) {
                        for (o, &v) in out.iter_mut().zip(row) {
                            *o = (v - max).exp() / z;
                        }
                    } else {
                        let lz = z.ln();
                        for (o, &v) in out.iter_mut().zip(row) {
                            *o = v - max - lz;
                        }
                    }
                }
            }
            Ok(make(x.shape.clone(), y))
        }
        Op::Sum { axes } | Op::Mean { axes } => {
            let x = inputs[0];
            let (out_shape, strides) = reduced_shape(op, &x.shape, axes)?;
            let mut y = vec![T::zero(); numel(&out_shape)];
            strided_walk(&x.shape, &strides, |lin, off| y[off] += x.data[lin]);
            if matches!(op, Op::Mean { .. }) {
                let count: usize = axes.iter().map(|&a| x.shape[a]).product();
                if count == 0 {
                    return Err(Error::shape("mean: reduction over an empty axis"));
                }
                let inv = T::one() / T::lit(count as f64);
                y.iter_mut().for_each(|v| *v *= inv);
            }
            Ok(make(out_shape, y))
        }
        Op::Expand { axis, size } => {
            let x = inputs[0];
            if *axis > x.rank() {
                return Err(Error::shape(format!("expand: axis {axis} out of range for {:?}", x.shape)));
            }
            let outer: usize = x.shape[..*axis].iter().product();
            let inner: usize = x.shape[*axis..].iter().product();
            let mut y = Vec::with_capacity(outer * size * inner);
            for o in 0..outer {
                let row = &x.data[o * inner..(o + 1) * inner];
                for _ in 0..*size {
                    y.extend_from_slice(row);
                }
            }
            let mut shape = x.shape.clone();
            shape.insert(*axis, *size);
            Ok(make(shape, y))
        }
        Op::ChannelAffine { axis } => {
            let (x, scale, shift) = (inputs[0], inputs[1], inputs[2]);
            if *axis >= x.rank() {
                return Err(Error::shape(format!("channel_affine: axis {axis} out of range for {:?}", x.shape)));
            }
            let (outer, c, inner) = split_axis(&x.shape, *axis);
            if scale.shape != [c] || shift.shape != [c] {
                return Err(Error::shape(format!(
                    "channel_affine: scale {:?} / shift {:?} must both be [{c}]",
                    scale.shape, shift.shape
                )));
            }
            let mut y = vec![T::zero(); x.len()];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    let (g, b) = (scale.data[ch], shift.data[ch]);
                    for i in base..base + inner {
                        y[i] = x.data[i] * g + b;
                    }
                }
            }
            Ok(make(x.shape.clone(), y))
        }
        Op::TemporalConv { stride } => {
            let (x, w) = (inputs[0], inputs[1]);
            let [b, ci, t, n, co, k, t_out] = temporal_conv_dims(x, w, *stride)?;
            let pad = (k - 1) / 2;
            let mut y = vec![T::zero(); b * co * t_out * n];
            for bi in 0..b {
                let x_off = bi * ci * t * n;
                let y_off = bi * co * t_out * n;
                for tap in 0..k {
                    let d = tap as isize - pad as isize;
                    let (lo, hi) = tap_range(t, t_out, *stride, d);
                    if lo >= hi {
                        continue;
                    }
                    let wk = MatRef { data: &w.data[..], offset: tap, rows: co, cols: ci, rs: ci * k, cs: k };
                    if *stride == 1 {
                        let src = (lo as isize + d) as usize;
                        let cols = (hi - lo) * n;
                        gemm(
                            wk,
                            MatRef { data: &x.data[..], offset: x_off + src * n, rows: ci, cols, rs: t * n, cs: 1 },
                            T::one(),
                            MatMut::with_row_stride(&mut y, y_off + lo * n, co, cols, t_out * n),
                        );
                    } else {
                        for to in lo..hi {
                            let src = (to as isize * *stride as isize + d) as usize;
                            gemm(
                                wk,
                                MatRef { data: &x.data[..], offset: x_off + src * n, rows: ci, cols: n, rs: t * n, cs: 1 },
                                T::one(),
                                MatMut::with_row_stride(&mut y, y_off + to * n, co, n, t_out * n),
                            );
                        }
                    }
                }
            }
            Ok(make(vec![b, co, t_out, n], y))
        }
        Op::PairAverage { axis } => {
            let x = inputs[0];
            if *axis >= x.rank() {
                return Err(Error::shape(format!("pair_average: axis {axis} out of range for {:?}", x.shape)));
            }
            let (outer, l, inner) = split_axis(&x.shape, *axis);
            let lo = l.div_ceil(2);
            let half = T::lit(0.5);
            let mut y = vec![T::zero(); outer * lo * inner];
            for o in 0..outer {
                for j in 0..lo {
                    let src0 = (o * l + 2 * j) * inner;
                    let dst = (o * lo + j) * inner;
                    if 2 * j + 1 < l {
                        let src1 = src0 + inner;
                        for i in 0..inner {
                            y[dst + i] = (x.data[src0 + i] + x.data[src1 + i]) * half;
                        }
                    } else {
                        y[dst..dst + inner].copy_from_slice(&x.data[src0..src0 + inner]);
                    }
                }
            }
            let mut shape = x.shape.clone();
            shape[*axis] = lo;
            Ok(make(shape, y))
        }
        Op::Concat { axis } => {
            let first = inputs.first().ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
            if *axis >= first.rank() {
                return Err(Error::shape(format!("concat: axis {axis} out of range for {:?}", first.shape)));
            }
            for x in inputs {
                let agree = x.rank() == first.rank()
                    && x.shape.iter().zip(&first.shape).enumerate().all(|(d, (p, q))| d == *axis || p == q);
                if !agree {
                    return Err(Error::shape(format!(
                        "concat: {:?} and {:?} differ outside axis {axis}",
                        first.shape, x.shape
                    )));
                }
            }
            let (outer, _, inner) = split_axis(&first.shape, *axis);
            let total: usize = inputs.iter().map(|x| x.shape[*axis]).sum();
            let mut y = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for x in inputs {
                    let chunk = x.shape[*axis] * inner;
                    y.extend_from_slice(&x.data[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.shape.clone();
            shape[*axis] = total;
            Ok(make(shape, y))
        }
        Op::Reshape { shape } => inputs[0].reshape(shape),
        Op::Permute { perm } => {
            let x = inputs[0];
            validate_perm(perm, x.rank())?;
            let in_strides = row_major_strides(&x.shape);
            let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
            let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let mut y = vec![T::zero(); x.len()];
            strided_walk(&out_shape, &strides, |lin, off| y[lin] = x.data[off]);
            Ok(make(out_shape, y))
        }
    }
}

/// Vector-Jacobian products for each input. `needs[i] == false` skips input `i`.
pub(crate) fn backward<T: Scalar>(
    op: &Op,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    grad: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let mut out: Vec<Option<Tensor<T>>> = vec![None; inputs.len()];
    let g = &grad.data;
    match op {
        Op::Leaf => {}
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let gm = MatRef::dense(&g[..], 0, m, n);
            if needs[0] {
                let mut da = vec![T::zero(); m * k];
                gemm(gm, MatRef::dense(&b.data, 0, k, n).t(), T::zero(), MatMut::dense(&mut da, 0, m, k));
                out[0] = Some(make(a.shape.clone(), da));
            }
            if needs[1] {
                let mut db = vec![T::zero(); k * n];
                gemm(MatRef::dense(&a.data, 0, m, k).t(), gm, T::zero(), MatMut::dense(&mut db, 0, k, n));
                out[1] = Some(make(b.shape.clone(), db));
            }
        }
        Op::BatchedMatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (bt, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
            if needs[0] {
                let mut da = vec![T::zero(); bt * m * k];
                for i in 0..bt {
                    gemm(
                        MatRef::dense(&g[..], i * m * n, m, n),
                        MatRef::dense(&b.data, i * k * n, k, n).t(),
                        T::zero(),
                        MatMut::dense(&mut da, i * m * k, m, k),
                    );
                }
                out[0] = Some(make(a.shape.clone(), da));
            }
            if needs[1] {
                let mut db = vec![T::zero(); bt * k * n];
                for i in 0..bt {
                    gemm(
                        MatRef::dense(&a.data, i * m * k, m, k).t(),
                        MatRef::dense(&g[..], i * m * n, m, n),
                        T::zero(),
                        MatMut::dense(&mut db, i * k * n, k, n),
                    );
                }
                out[1] = Some(make(b.shape.clone(), db));
            }
        }
        Op::ChannelMap => {
            let (w, x) = (inputs[0], inputs[1]);
            let (co, ci, b) = (w.shape[0], w.shape[1], x.shape[0]);
            let s: usize = x.shape[2..].iter().product();
            if needs[0] {
                let mut dw = vec![T::zero(); co * ci];
                for i in 0..b {
                    gemm(
                        MatRef::dense(&g[..], i * co * s, co, s),
                        MatRef::dense(&x.data, i * ci * s, ci, s).t(),
                        T::one(),
                        MatMut::dense(&mut dw, 0, co, ci),
                    );
                }
                out[0] = Some(make(w.shape.clone(), dw));
            }
            if needs[1] {
                let mut dx = vec![T::zero(); x.len()];
                for i in 0..b {
                    gemm(
                        MatRef::dense(&w.data, 0, co, ci).t(),
                        MatRef::dense(&g[..], i * co * s, co, s),
                        T::zero(),
                        MatMut::dense(&mut dx, i * ci * s, ci, s),
                    );
                }
                out[1] = Some(make(x.shape.clone(), dx));
            }
        }
        Op::Add => {
            if needs[0] {
                out[0] = Some(grad.clone());
            }
            if needs[1] {
                out[1] = Some(grad.clone());
            }
        }
        Op::Sub => {
            if needs[0] {
                out[0] = Some(grad.clone());
            }
            if needs[1] {
                out[1] = Some(grad.map(|v| -v));
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if needs[0] {
                out[0] = Some(make(a.shape.clone(), g.iter().zip(b.data.iter()).map(|(&p, &q)| p * q).collect()));
            }
            if needs[1] {
                out[1] = Some(make(b.shape.clone(), g.iter().zip(a.data.iter()).map(|(&p, &q)| p * q).collect()));
            }
        }
        Op::Scale(c) => {
            let c = T::lit(*c);
            out[0] = Some(grad.map(|v| v * c));
        }
        Op::Tanh => {
            out[0] = Some(zip_map(grad, output, |dy, y| dy * (T::one() - y * y)));
        }
        Op::Sigmoid => {
            out[0] = Some(zip_map(grad, output, |dy, y| dy * y * (T::one() - y)));
        }
        Op::Relu => {
            out[0] = Some(zip_map(grad, inputs[0], |dy, x| if x > T::zero() { dy } else { T::zero() }));
        }
        Op::Rsqrt { .. } => {
            let m_half = T::lit(-0.5);
            out[0] = Some(zip_map(grad, output, |dy, y| dy * m_half * y * y * y));
        }
        Op::Softmax | Op::LogSoftmax => {
            let x = inputs[0];
            let l = x.shape[x.rank() - 1];
            let mut dx = vec![T::zero(); x.len()];
            if l > 0 {
                for ((dxr, gr), yr) in dx.chunks_mut(l).zip(g.chunks(l)).zip(output.data.chunks(l)) {
                    if matches!(op, Op::Softmax) {
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for ((d, &gy), &y) in dxr.iter_mut().zip(gr).zip(yr) {
                            *d = y * (gy - dot);
                        }
                    } else {
                        let total: T = gr.iter().copied().sum();
                        for ((d, &gy), &y) in dxr.iter_mut().zip(gr).zip(yr) {
                            *d = gy - y.exp() * total;
                        }
                    }
                }
            }
            out[0] = Some(make(x.shape.clone(), dx));
        }
        Op::Sum { axes } | Op::Mean { axes } => {
            let x = inputs[0];
            let (_, strides) = reduced_shape(op, &x.shape, axes).expect("validated in forward");
            let scale = if matches!(op, Op::Mean { .. }) {
                let count: usize = axes.iter().map(|&a| x.shape[a]).product();
                T::one() / T::lit(count as f64)
            } else {
                T::one()
            };
            let mut dx = vec![T::zero(); x.len()];
            strided_walk(&x.shape, &strides, |lin, off| dx[lin] = g[off] * scale);
            out[0] = Some(make(x.shape.clone(), dx));
        }
        Op::Expand { axis, size } => {
            let x = inputs[0];
            let outer: usize = x.shape[..*axis].iter().product();
            let inner: usize = x.shape[*axis..].iter().product();
            let mut dx = vec![T::zero(); x.len()];
            for o in 0..outer {
                let dst = &mut dx[o * inner..(o + 1) * inner];
                for s in 0..*size {
                    let src = &g[(o * size + s) * inner..(o * size + s + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            out[0] = Some(make(x.shape.clone(), dx));
        }
        Op::ChannelAffine { axis } => {
            let (x, scale) = (inputs[0], inputs[1]);
            let (outer, c, inner) = split_axis(&x.shape, *axis);
            let mut dx = if needs[0] { vec![T::zero(); x.len()] } else { Vec::new() };
            let mut dscale = vec![T::zero(); c];
            let mut dshift = vec![T::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    let s = scale.data[ch];
                    let (mut acc_s, mut acc_b) = (T::zero(), T::zero());
                    for i in base..base + inner {
                        acc_s += g[i] * x.data[i];
                        acc_b += g[i];
                        if needs[0] {
                            dx[i] = g[i] * s;
                        }
                    }
                    dscale[ch] += acc_s;
                    dshift[ch] += acc_b;
                }
            }
            if needs[0] {
                out[0] = Some(make(x.shape.clone(), dx));
            }
            if needs[1] {
                out[1] = Some(make(vec![c], dscale));
            }
            if needs[2] {
                out[2] = Some(make(vec![c], dshift));
            }
        }
        Op::TemporalConv { stride } => {
            let (x, w) = (inputs[0], inputs[1]);
            let [b, ci, t, n, co, k, t_out] = temporal_conv_dims(x, w, *stride).expect("validated in forward");
            let pad = (k - 1) / 2;
            let mut dx = if needs[0] { vec![T::zero(); x.len()] } else { Vec::new() };
            let mut dw = if needs[1] { vec![T::zero(); w.len()] } else { Vec::new() };
            for bi in 0..b {
                let x_off = bi * ci * t * n;
                let y_off = bi * co * t_out * n;
                for tap in 0..k {
                    let d = tap as isize - pad as isize;
                    let (lo, hi) = tap_range(t, t_out, *stride, d);
                    if lo >= hi {
                        continue;
                    }
                    let wk = MatRef { data: &w.data[..], offset: tap, rows: co, cols: ci, rs: ci * k, cs: k };
                    // (first output frame, input frame, frame count) blocks
                    let blocks: Vec<(usize, usize, usize)> = if *stride == 1 {
                        vec![(lo, (lo as isize + d) as usize, hi - lo)]
                    } else {
                        (lo..hi).map(|to| (to, (to as isize * *stride as isize + d) as usize, 1)).collect()
                    };
                    for (to, src, len) in blocks {
                        let cols = len * n;
                        let gy = MatRef { data: &g[..], offset: y_off + to * n, rows: co, cols, rs: t_out * n, cs: 1 };
                        if needs[0] {
                            gemm(
                                wk.t(),
                                gy,
                                T::one(),
                                MatMut::with_row_stride(&mut dx, x_off + src * n, ci, cols, t * n),
                            );
                        }
                        if needs[1] {
                            let xb = MatRef { data: &x.data[..], offset: x_off + src * n, rows: ci, cols, rs: t * n, cs: 1 };
                            gemm(
                                gy,
                                xb.t(),
                                T::one(),
                                MatMut { data: &mut dw, offset: tap, rows: co, cols: ci, rs: ci * k, cs: k },
                            );
                        }
                    }
                }
            }
            if needs[0] {
                out[0] = Some(make(x.shape.clone(), dx));
            }
            if needs[1] {
                out[1] = Some(make(w.shape.clone(), dw));
            }
        }
        Op::PairAverage { axis } => {
            let x = inputs[0];
            let (outer, l, inner) = split_axis(&x.shape, *axis);
            let lo = l.div_ceil(2);
            let half = T::lit(0.5);
            let mut dx = vec![T::zero(); x.len()];
            for o in 0..outer {
                for j in 0..lo {
                    let dst0 = (o * l + 2 * j) * inner;
                    let src = (o * lo + j) * inner;
                    if 2 * j + 1 < l {
                        for i in 0..inner {
                            let v = g[src + i] * half;
                            dx[dst0 + i] = v;
                            dx[dst0 + inner + i] = v;
                        }
                    } else {
                        dx[dst0..dst0 + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
            }
            out[0] = Some(make(x.shape.clone(), dx));
        }
        Op::Concat { axis } => {
            let (outer, _, inner) = split_axis(&output.shape, *axis);
            let total = output.shape[*axis];
            let mut start = 0;
            for (idx, x) in inputs.iter().enumerate() {
                let len = x.shape[*axis];
                if needs[idx] {
                    let mut dx = Vec::with_capacity(x.len());
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        dx.extend_from_slice(&g[base..base + len * inner]);
                    }
                    out[idx] = Some(make(x.shape.clone(), dx));
                }
                start += len;
            }
        }
        Op::Reshape { .. } => {
            out[0] = Some(make(inputs[0].shape.clone(), g.to_vec()));
        }
        Op::Permute { perm } => {
            let x = inputs[0];
            let in_strides = row_major_strides(&x.shape);
            let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let mut dx = vec![T::zero(); x.len()];
            strided_walk(&output.shape, &strides, |lin, off| dx[off] = g[lin]);
            out[0] = Some(make(x.shape.clone(), dx));
        }
    }
    out
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    make(a.shape.clone(), a.data.iter().zip(b.data.iter()).map(|(&p, &q)| f(p, q)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn temporal_conv_impulse() {
        let x = t(&[1, 1, 4, 1], &[0.0, 1.0, 0.0, 0.0]);
        let w = t(&[1, 1, 3], &[0.25, 0.5, 0.25]);
        let y = forward(&Op::TemporalConv { stride: 1 }, &[&x, &w]).unwrap();
        assert_eq!(y.data(), &[0.25, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn temporal_conv_stride_two_matches_subsampled_stride_one() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 7, 3], |i| ((i * 37) % 11) as f64 - 5.0);
        let w = Tensor::<f64>::from_fn(&[3, 2, 5], |i| ((i * 13) % 7) as f64 * 0.1 - 0.3);
        let full = forward(&Op::TemporalConv { stride: 1 }, &[&x, &w]).unwrap();
        let strided = forward(&Op::TemporalConv { stride: 2 }, &[&x, &w]).unwrap();
        assert_eq!(strided.shape(), &[2, 3, 4, 3]);
        for b in 0..2 {
            for c in 0..3 {
                for to in 0..4 {
                    for n in 0..3 {
                        assert_eq!(strided.at(&[b, c, to, n]), full.at(&[b, c, 2 * to, n]));
                    }
                }
            }
        }
    }

    #[test]
    fn pair_average_odd_tail_passes_through() {
        let x = t(&[5], &[1.0, 3.0, 5.0, 7.0, 9.0]);
        let y = forward(&Op::PairAverage { axis: 0 }, &[&x]).unwrap();
        assert_eq!(y.data(), &[2.0, 6.0, 9.0]);
    }

    #[test]
    fn reductions_drop_axes() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let s = forward(&Op::Sum { axes: vec![0, 2] }, &[&x]).unwrap();
        assert_eq!(s.shape(), &[3]);
        assert_eq!(s.data(), &[60.0, 92.0, 124.0]);
        let m = forward(&Op::Mean { axes: vec![0, 1, 2] }, &[&x]).unwrap();
        assert_eq!(m.shape(), &[] as &[usize]);
        assert_eq!(m.item(), 11.5);
        assert!(forward(&Op::Sum { axes: vec![2, 1] }, &[&x]).is_err());
    }

    #[test]
    fn permute_and_expand() {
        let x = t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let p = forward(&Op::Permute { perm: vec![1, 0] }, &[&x]).unwrap();
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let e = forward(&Op::Expand { axis: 1, size: 2 }, &[&x]).unwrap();
        assert_eq!(e.shape(), &[2, 2, 3]);
        assert_eq!(e.data(), &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let a = Tensor::<f64>::zeros(&[1, 2, 3]);
        let b = Tensor::<f64>::zeros(&[1, 2, 4]);
        assert!(forward(&Op::Concat { axis: 1 }, &[&a, &b]).is_err());
        let c = forward(&Op::Concat { axis: 2 }, &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 2, 7]);
    }
}
