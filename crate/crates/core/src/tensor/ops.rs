use rand::Rng;

use super::gemm::{sgemm, Layout};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Recorded primitive together with whatever its backward rule needs.
pub(crate) enum Op {
    /// `rhs` is either the same shape or a trailing-suffix broadcast.
    Add {
        broadcast: bool,
    },
    Sub {
        broadcast: bool,
    },
    Mul {
        broadcast: bool,
    },
    Scale(f32),
    MatMul {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape,
    Permute(Vec<usize>),
    Concat {
        axis: usize,
    },
    GatherRows(Vec<usize>),
    MaskFill(Vec<bool>),
    Sum,
    Mean,
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    LayerNorm {
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Relu,
    ClampMin(f32),
    Dropout(Vec<f32>),
    LinearCombination(Vec<f64>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Concat { .. } => "concat",
            Op::GatherRows(_) => "gather_rows",
            Op::MaskFill(_) => "mask_fill",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu => "relu",
            Op::ClampMin(_) => "clamp_min",
            Op::Dropout(_) => "dropout",
            Op::LinearCombination(_) => "linear_combination",
        }
    }
}

fn broadcast_kind(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<bool> {
    if lhs.shape() == rhs.shape() {
        return Ok(false);
    }
    let (l, r) = (lhs.shape(), rhs.shape());
    if r.len() <= l.len() && l[l.len() - r.len()..] == *r && rhs.numel() > 0 {
        return Ok(true);
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: l.to_vec(),
        rhs: r.to_vec(),
    })
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::InvalidAxis {
            op,
            axis,
            rank: t.rank(),
        });
    }
    Ok(())
}

fn elementwise(
    op_name: &'static str,
    lhs: &Tensor,
    rhs: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<(Vec<f32>, bool)> {
    let broadcast = broadcast_kind(op_name, lhs, rhs)?;
    let r = rhs.data();
    let data = if broadcast {
        let width = r.len();
        lhs.data()
            .chunks(width)
            .flat_map(|row| row.iter().zip(r).map(|(&a, &b)| f(a, b)))
            .collect()
    } else {
        lhs.data().iter().zip(r).map(|(&a, &b)| f(a, b)).collect()
    };
    Ok((data, broadcast))
}

impl Tensor {
    /// Elementwise sum. `rhs` may match `self` or a trailing suffix of its shape.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (data, broadcast) = elementwise("add", self, rhs, |a, b| a + b)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add { broadcast },
            vec![self.clone(), rhs.clone()],
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (data, broadcast) = elementwise("sub", self, rhs, |a, b| a - b)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Sub { broadcast },
            vec![self.clone(), rhs.clone()],
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (data, broadcast) = elementwise("mul", self, rhs, |a, b| a * b)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul { broadcast },
            vec![self.clone(), rhs.clone()],
        ))
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Scale(factor),
            vec![self.clone()],
        )
    }

    /// Matrix product of `[m, k]·[k, n]`, or batched `[b, m, k]·[b, k, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        let (batch, m, k, n) = match (self.shape(), rhs.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n),
            (&[b, m, k], &[b2, k2, n]) if b == b2 && k == k2 => (b, m, k, n),
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0f32; batch * m * n];
        for bi in 0..batch {
            sgemm(
                m,
                k,
                n,
                &self.data()[bi * m * k..(bi + 1) * m * k],
                Layout::row_major(k),
                &rhs.data()[bi * k * n..(bi + 1) * k * n],
                Layout::row_major(n),
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if self.rank() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(Tensor::from_op(
            shape,
            out,
            Op::MatMul { batch, m, k, n },
            vec![self.clone(), rhs.clone()],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape,
            vec![self.clone()],
        ))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidArgument(format!(
                "permute: {perm:?} is not a permutation of rank {rank}"
            )));
        }
        let (shape, data) = permute_data(self.shape(), self.data(), perm);
        Ok(Tensor::from_op(
            shape,
            data,
            Op::Permute(perm.to_vec()),
            vec![self.clone()],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        check_axis("concat", first, axis)?;
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            shape[axis] += p.shape()[axis];
        }
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_op(
            shape,
            data,
            Op::Concat { axis },
            parts.to_vec(),
        ))
    }

    /// Selects rows (first-axis slices) by index; rows may repeat.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(Error::InvalidAxis {
                op: "gather_rows",
                axis: 0,
                rank: 0,
            });
        }
        let rows = self.shape()[0];
        let width = if rows == 0 { 0 } else { self.numel() / rows };
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(&self.data()[id * width..(id + 1) * width]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = ids.len();
        Ok(Tensor::from_op(
            shape,
            data,
            Op::GatherRows(ids.to_vec()),
            vec![self.clone()],
        ))
    }

    /// Replaces every element whose mask entry is set with `value`.
    pub fn mask_fill(&self, mask: &[bool], value: f32) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "mask_fill",
                lhs: self.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = self
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::MaskFill(mask.to_vec()),
            vec![self.clone()],
        ))
    }

    /// Sum of all elements as a scalar; accumulated in `f64` in storage order.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        Tensor::from_op(vec![], vec![s as f32], Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::Empty("mean"));
        }
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        Ok(Tensor::from_op(
            vec![],
            vec![(s / self.numel() as f64) as f32],
            Op::Mean,
            vec![self.clone()],
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self, axis)?;
        let data = softmax_data(self.shape(), self.data(), axis, false);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Softmax { axis },
            vec![self.clone()],
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("log_softmax", self, axis)?;
        let data = softmax_data(self.shape(), self.data(), axis, true);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::LogSoftmax { axis },
            vec![self.clone()],
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        let width = *self.shape().last().ok_or(Error::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        for p in [gain, bias] {
            if p.shape() != [width] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "layer_norm: eps must be positive, got {eps}"
            )));
        }
        let rows = if width == 0 { 0 } else { self.numel() / width };
        let mut xhat = vec![0.0f32; self.numel()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; self.numel()];
        for r in 0..rows {
            let x = &self.data()[r * width..(r + 1) * width];
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / width as f64;
            let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for c in 0..width {
                let h = ((x[c] as f64 - mean) * rs) as f32;
                xhat[r * width + c] = h;
                out[r * width + c] = h * gain.data()[c] + bias.data()[c];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LayerNorm { xhat, rstd },
            vec![self.clone(), gain.clone(), bias.clone()],
        ))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Relu, vec![self.clone()])
    }

    /// `max(x, floor)` elementwise; the gradient is zero where the floor binds.
    pub fn clamp_min(&self, floor: f32) -> Tensor {
        let data = self.data().iter().map(|&v| v.max(floor)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::ClampMin(floor),
            vec![self.clone()],
        )
    }

    /// Inverted dropout. With `train == false` or `rate == 0` this is the identity.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f32, train: bool, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.numel())
            .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Dropout(mask),
            vec![self.clone()],
        ))
    }

    /// `Σ coeffs[i]·terms[i]` over one-element tensors, evaluated in `f64`
    /// and rounded once.
    pub fn linear_combination(terms: &[Tensor], coeffs: &[f64]) -> Result<Tensor> {
        if terms.len() != coeffs.len() || terms.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "linear_combination: {} terms, {} coefficients",
                terms.len(),
                coeffs.len()
            )));
        }
        let mut acc = 0.0f64;
        for (t, &c) in terms.iter().zip(coeffs) {
            if t.numel() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "linear_combination",
                    lhs: vec![],
                    rhs: t.shape().to_vec(),
                });
            }
            acc += c * t.data()[0] as f64;
        }
        Ok(Tensor::from_op(
            vec![],
            vec![acc as f32],
            Op::LinearCombination(coeffs.to_vec()),
            terms.to_vec(),
        ))
    }
}

fn permute_data(shape: &[usize], data: &[f32], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn softmax_data(shape: &[usize], data: &[f32], axis: usize, log: bool) -> Vec<f32> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0f32; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * len * inner + a * inner + i;
            let max = (0..len)
                .map(|a| data[at(a)])
                .fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = (0..len).map(|a| ((data[at(a)] - max) as f64).exp()).sum();
            if log {
                let lse = sum.ln();
                for a in 0..len {
                    out[at(a)] = ((data[at(a)] - max) as f64 - lse) as f32;
                }
            } else {
                for a in 0..len {
                    out[at(a)] = (((data[at(a)] - max) as f64).exp() / sum) as f32;
                }
            }
        }
    }
    out
}

/// Sums a suffix-broadcast gradient back down to the rhs extent.
fn reduce_broadcast(grad: &[f32], width: usize) -> Vec<f32> {
    let mut acc = vec![0.0f32; width];
    for row in grad.chunks(width) {
        for (a, g) in acc.iter_mut().zip(row) {
            *a += g;
        }
    }
    acc
}

impl Op {
    /// Gradients with respect to each input, given the output and its gradient.
    /// `None` entries belong to inputs that do not require gradients.
    pub(crate) fn backward(
        &self,
        out: &Tensor,
        grad: &[f32],
        inputs: &[Tensor],
    ) -> Vec<Option<Vec<f32>>> {
        let need = |i: usize| inputs[i].requires_grad();
        let when = |i: usize, f: &dyn Fn() -> Vec<f32>| if need(i) { Some(f()) } else { None };
        match self {
            Op::Add { broadcast } | Op::Sub { broadcast } => {
                let sign = if matches!(self, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                let width = inputs[1].numel();
                vec![
                    when(0, &|| grad.to_vec()),
                    when(1, &|| {
                        let g = if *broadcast {
                            reduce_broadcast(grad, width)
                        } else {
                            grad.to_vec()
                        };
                        g.into_iter().map(|v| v * sign).collect()
                    }),
                ]
            }
            Op::Mul { broadcast } => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let width = b.len();
                vec![
                    when(0, &|| {
                        grad.iter()
                            .enumerate()
                            .map(|(i, g)| g * b[if *broadcast { i % width } else { i }])
                            .collect()
                    }),
                    when(1, &|| {
                        let prod: Vec<f32> = grad.iter().zip(a).map(|(g, x)| g * x).collect();
                        if *broadcast {
                            reduce_broadcast(&prod, width)
                        } else {
                            prod
                        }
                    }),
                ]
            }
            Op::Scale(f) => vec![Some(grad.iter().map(|g| g * f).collect())],
            Op::MatMul { batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    when(0, &|| {
                        let mut da = vec![0.0f32; batch * m * k];
                        for bi in 0..batch {
                            sgemm(
                                m,
                                n,
                                k,
                                &grad[bi * m * n..(bi + 1) * m * n],
                                Layout::row_major(n),
                                &b[bi * k * n..(bi + 1) * k * n],
                                Layout::transposed(n),
                                0.0,
                                &mut da[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                        da
                    }),
                    when(1, &|| {
                        let mut db = vec![0.0f32; batch * k * n];
                        for bi in 0..batch {
                            sgemm(
                                k,
                                m,
                                n,
                                &a[bi * m * k..(bi + 1) * m * k],
                                Layout::transposed(k),
                                &grad[bi * m * n..(bi + 1) * m * n],
                                Layout::row_major(n),
                                0.0,
                                &mut db[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                        db
                    }),
                ]
            }
            Op::Reshape => vec![Some(grad.to_vec())],
            Op::Permute(perm) => {
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![Some(permute_data(out.shape(), grad, &inverse).1)]
            }
            Op::Concat { axis } => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let mut grads: Vec<Vec<f32>> = inputs
                    .iter()
                    .map(|t| Vec::with_capacity(t.numel()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (g, t) in grads.iter_mut().zip(inputs) {
                        let chunk = t.shape()[*axis] * inner;
                        g.extend_from_slice(&grad[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                grads
                    .into_iter()
                    .enumerate()
                    .map(|(i, g)| need(i).then_some(g))
                    .collect()
            }
            Op::GatherRows(ids) => {
                let input = &inputs[0];
                let rows = input.shape()[0];
                let width = if rows == 0 { 0 } else { input.numel() / rows };
                let mut g = vec![0.0f32; input.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &grad[r * width..(r + 1) * width];
                    for (d, s) in g[id * width..(id + 1) * width].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![Some(g)]
            }
            Op::MaskFill(mask) => vec![Some(
                grad.iter()
                    .zip(mask)
                    .map(|(&g, &m)| if m { 0.0 } else { g })
                    .collect(),
            )],
            Op::Sum => vec![Some(vec![grad[0]; inputs[0].numel()])],
            Op::Mean => {
                let n = inputs[0].numel();
                vec![Some(vec![grad[0] / n as f32; n])]
            }
            Op::Softmax { axis } => {
                let y = out.data();
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let mut g = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * len * inner + a * inner + i;
                        let dot: f64 = (0..len).map(|a| (grad[at(a)] * y[at(a)]) as f64).sum();
                        for a in 0..len {
                            g[at(a)] = y[at(a)] * (grad[at(a)] - dot as f32);
                        }
                    }
                }
                vec![Some(g)]
            }
            Op::LogSoftmax { axis } => {
                let y = out.data();
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let mut g = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * len * inner + a * inner + i;
                        let total: f64 = (0..len).map(|a| grad[at(a)] as f64).sum();
                        for a in 0..len {
                            g[at(a)] = grad[at(a)] - y[at(a)].exp() * total as f32;
                        }
                    }
                }
                vec![Some(g)]
            }
            Op::LayerNorm { xhat, rstd } => {
                let gain = inputs[1].data();
                let width = gain.len();
                let rows = rstd.len();
                vec![
                    when(0, &|| {
                        let mut dx = vec![0.0f32; xhat.len()];
                        for r in 0..rows {
                            let span = r * width..(r + 1) * width;
                            let (h, dy) = (&xhat[span.clone()], &grad[span.clone()]);
                            let mut mean_d = 0.0f64;
                            let mut mean_dh = 0.0f64;
                            for c in 0..width {
                                let d = (dy[c] * gain[c]) as f64;
                                mean_d += d;
                                mean_dh += d * h[c] as f64;
                            }
                            mean_d /= width as f64;
                            mean_dh /= width as f64;
                            for c in 0..width {
                                let d = (dy[c] * gain[c]) as f64;
                                dx[r * width + c] =
                                    (rstd[r] as f64 * (d - mean_d - h[c] as f64 * mean_dh)) as f32;
                            }
                        }
                        dx
                    }),
                    when(1, &|| {
                        let mut dg = vec![0.0f32; width];
                        for (i, (g, h)) in grad.iter().zip(xhat).enumerate() {
                            dg[i % width] += g * h;
                        }
                        dg
                    }),
                    when(2, &|| reduce_broadcast(grad, width)),
                ]
            }
            Op::Relu => vec![Some(
                grad.iter()
                    .zip(inputs[0].data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
            )],
            Op::ClampMin(floor) => vec![Some(
                grad.iter()
                    .zip(inputs[0].data())
                    .map(|(&g, &x)| if x > *floor { g } else { 0.0 })
                    .collect(),
            )],
            Op::Dropout(mask) => vec![Some(grad.iter().zip(mask).map(|(g, m)| g * m).collect())],
            Op::LinearCombination(coeffs) => coeffs
                .iter()
                .enumerate()
                .map(|(i, &c)| when(i, &|| vec![(grad[0] as f64 * c) as f32]))
                .collect(),
        }
    }
}
