use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tape::{Op, SparseRows, Tape, Var};

/// Norm floor used by [`Tape::l2_normalize`].
pub const L2_EPS: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tape {
    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        nodes[a.index()]
            .value
            .iter()
            .zip(&nodes[b.index()].value)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value_ref(a).iter().map(|&x| f(x)).collect()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            kernels::matmul_acc(&nodes[a.index()].value, &nodes[b.index()].value, &mut out, m, n, k, false, false);
        }
        Ok(self.push_raw(vec![m, n], out, self.any_grad(&[a, b]), Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected rank 2, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value_ref(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        drop(v);
        Ok(self.push_raw(vec![c, r], out, self.any_grad(&[a]), Op::Transpose(a)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push_raw(s, out, self.any_grad(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push_raw(s, out, self.any_grad(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push_raw(s, out, self.any_grad(&[a, b]), Op::Mul(a, b)))
    }

    /// Adds `b` (shape `[n]`) to every length-`n` slice along the last axis of `x`.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let n = sb[0];
        let out = {
            let nodes = self.nodes.borrow();
            let bv = &nodes[b.index()].value;
            nodes[x.index()]
                .value
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bv[i % n])
                .collect()
        };
        Ok(self.push_raw(sx, out, self.any_grad(&[x, b]), Op::AddBias(x, b)))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let out = self.map(x, |v| v * s);
        self.push_raw(self.shape(x), out, self.any_grad(&[x]), Op::Scale(x, s))
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        self.push_raw(self.shape(x), out, self.any_grad(&[x]), Op::Relu(x))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = *s.last().unwrap();
        let out = {
            let v = self.value_ref(x);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite { op: "softmax" });
            }
            let mut out = Vec::with_capacity(v.len());
            for row in v.chunks(n) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let start = out.len();
                let mut z = 0.0;
                for &r in row {
                    let e = (r - mx).exp();
                    z += e;
                    out.push(e);
                }
                out[start..].iter_mut().for_each(|e| *e /= z);
            }
            out
        };
        Ok(self.push_raw(s, out, self.any_grad(&[x]), Op::Softmax(x)))
    }

    /// Divides each slice along `axis` by `max(‖slice‖₂, 1e-12)`.
    pub fn l2_normalize(&self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        let (outer, len, inner) = split_axis(&s, axis, "l2_normalize")?;
        let out = {
            let v = self.value_ref(x);
            let mut out = vec![0.0; v.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let norm = (0..len).map(|k| v[idx(k)].powi(2)).sum::<f64>().sqrt().max(L2_EPS);
                    for k in 0..len {
                        out[idx(k)] = v[idx(k)] / norm;
                    }
                }
            }
            out
        };
        Ok(self.push_raw(
            s,
            out,
            self.any_grad(&[x]),
            Op::L2Normalize {
                x,
                outer,
                len,
                inner,
                eps: L2_EPS,
            },
        ))
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&self, x: Var) -> Var {
        let s = self.shape(x);
        let n = *s.last().unwrap();
        let (out, inv_std) = {
            let v = self.value_ref(x);
            let mut out = Vec::with_capacity(v.len());
            let mut inv_std = Vec::with_capacity(v.len() / n);
            for row in v.chunks(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std.push(is);
                out.extend(row.iter().map(|r| (r - mean) * is));
            }
            (out, inv_std)
        };
        self.push_raw(s, out, self.any_grad(&[x]), Op::LayerNorm { x, inv_std })
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let s0 = self.shape(*first);
        let (outer, _, inner) = split_axis(&s0, axis, "concat")?;
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: s0,
                    rhs: s,
                });
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for (&x, &l) in xs.iter().zip(&lens) {
                    let v = &nodes[x.index()].value;
                    out.extend_from_slice(&v[o * l * inner..(o + 1) * l * inner]);
                }
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        Ok(self.push_raw(
            shape,
            out,
            self.any_grad(xs),
            Op::Concat {
                inputs: xs.to_vec(),
                outer,
                lens,
                inner,
            },
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.iter().product::<usize>() != shape.iter().product::<usize>() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: s,
                rhs: shape.to_vec(),
            });
        }
        Ok(self.push_raw(shape.to_vec(), self.value(x), self.any_grad(&[x]), Op::Reshape(x)))
    }

    pub fn sum(&self, x: Var) -> Var {
        let total = self.value_ref(x).iter().sum();
        self.push_raw(vec![1], vec![total], self.any_grad(&[x]), Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let total = {
            let v = self.value_ref(x);
            v.iter().sum::<f64>() / v.len() as f64
        };
        self.push_raw(vec![1], vec![total], self.any_grad(&[x]), Op::Mean(x))
    }

    /// Sums over the last axis; a rank-1 input reduces to shape `[1]`.
    pub fn sum_last(&self, x: Var) -> Var {
        let s = self.shape(x);
        let n = *s.last().unwrap();
        let out: Vec<f64> = self.value_ref(x).chunks(n).map(|c| c.iter().sum()).collect();
        let shape = if s.len() == 1 { vec![1] } else { s[..s.len() - 1].to_vec() };
        self.push_raw(shape, out, self.any_grad(&[x]), Op::SumLast(x))
    }

    /// Cross-correlation of `x: [c_in, H, W]` with `w: [c_out, c_in, k, k]`
    /// plus optional per-channel bias.
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let k = sw[2];
        if k % 2 == 0 || stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel must be odd and stride positive (k={k}, stride={stride})"),
            });
        }
        let (h, wd) = (sx[1] as isize, sx[2] as isize);
        let span_h = h + 2 * pad as isize - k as isize;
        let span_w = wd + 2 * pad as isize - k as isize;
        if span_h < 0 || span_w < 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("non-positive output extent for input {sx:?}, kernel {k}, pad {pad}"),
            });
        }
        let geom = ConvGeom {
            c_in: sx[0],
            h: sx[1],
            w: sx[2],
            c_out: sw[0],
            k,
            stride,
            pad,
            h_out: span_h as usize / stride + 1,
            w_out: span_w as usize / stride + 1,
        };
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [geom.c_out] {
                return Err(TensorError::Shape {
                    op: "conv2d bias",
                    lhs: sw,
                    rhs: sb,
                });
            }
        }
        let hw = geom.h_out * geom.w_out;
        let (cols, out) = {
            let nodes = self.nodes.borrow();
            let cols = kernels::im2col(&nodes[x.index()].value, &geom);
            let mut out = vec![0.0; geom.c_out * hw];
            if let Some(b) = bias {
                let bv = &nodes[b.index()].value;
                for (c, chunk) in out.chunks_mut(hw).enumerate() {
                    chunk.iter_mut().for_each(|o| *o = bv[c]);
                }
            }
            kernels::matmul_acc(&nodes[w.index()].value, &cols, &mut out, geom.c_out, hw, geom.c_in * k * k, false, false);
            (cols, out)
        };
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push_raw(
            vec![geom.c_out, geom.h_out, geom.w_out],
            out,
            self.any_grad(&inputs),
            Op::Conv2d {
                x,
                w,
                b: bias,
                geom,
                cols,
            },
        ))
    }

    /// Fixed linear map given by sparse rows; output reshaped to `shape`.
    pub fn sparse_map(&self, x: Var, map: SparseRows, shape: &[usize]) -> Result<Var> {
        let n_in = self.value_ref(x).len();
        if map.rows() != shape.iter().product::<usize>() || map.cols.iter().any(|&c| c >= n_in) {
            return Err(TensorError::Shape {
                op: "sparse_map",
                lhs: self.shape(x),
                rhs: shape.to_vec(),
            });
        }
        let out = {
            let v = self.value_ref(x);
            (0..map.rows())
                .map(|i| (map.offsets[i]..map.offsets[i + 1]).map(|k| map.weights[k] * v[map.cols[k]]).sum())
                .collect()
        };
        Ok(self.push_raw(shape.to_vec(), out, self.any_grad(&[x]), Op::Sparse { x, map }))
    }

    /// Element gather; `None` entries yield zero.
    pub fn gather(&self, x: Var, indices: impl IntoIterator<Item = Option<usize>>, shape: &[usize]) -> Result<Var> {
        self.sparse_map(x, SparseRows::gather(indices), shape)
    }

    /// Rows of a 2D tensor, in the given order.
    pub fn select_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let n = s[1];
        let idx = rows.iter().flat_map(|&r| (0..n).map(move |j| Some(r * n + j)));
        self.gather(x, idx, &[rows.len(), n])
    }

    /// Columns `start..end` of a 2D tensor.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{end} of {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let idx = (0..m).flat_map(move |i| (start..end).map(move |j| Some(i * n + j)));
        self.gather(x, idx, &[m, end - start])
    }

    /// Clamp-to-border bilinear sample of `fmap: [c, h, w]` at `(u, v)`
    /// (column, row). Differentiable in `fmap` only.
    pub fn bilinear_sample(&self, fmap: Var, u: f64, v: f64) -> Result<Var> {
        let out = self.bilinear_sample_many(fmap, &[(u, v)])?;
        let c = self.shape(out)[1];
        self.reshape(out, &[c])
    }

    /// Samples several points at once; output `[points, c]`.
    pub fn bilinear_sample_many(&self, fmap: Var, points: &[(f64, f64)]) -> Result<Var> {
        let s = self.shape(fmap);
        if s.len() != 3 || points.is_empty() {
            return Err(TensorError::Invalid {
                op: "bilinear_sample",
                msg: format!("expected [c,h,w] map and at least one point, got {s:?}"),
            });
        }
        if points.iter().any(|(u, v)| !u.is_finite() || !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "bilinear_sample" });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut map = SparseRows::new();
        for &(u, v) in points {
            let taps = kernels::bilinear_taps(h, w, u, v);
            for ch in 0..c {
                map.push_row(taps.iter().map(|&(i, wt)| (ch * h * w + i, wt)));
            }
        }
        self.sparse_map(fmap, map, &[points.len(), c])
    }

    /// Identity in value; blocks every gradient path through it.
    pub fn stopgrad(&self, x: Var) -> Var {
        self.push_raw(self.shape(x), self.value(x), false, Op::StopGrad)
    }

    /// `sum_i w_i · BCE(sigmoid(x_i), t_i)` evaluated stably from logits.
    pub fn bce_with_logits(&self, x: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value_ref(x).len();
        if targets.len() != n || weights.len() != n {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                lhs: self.shape(x),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let total = {
            let v = self.value_ref(x);
            v.iter()
                .zip(targets)
                .zip(weights)
                .map(|((&z, &t), &w)| w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
                .sum()
        };
        Ok(self.push_raw(
            vec![1],
            vec![total],
            self.any_grad(&[x]),
            Op::BceLogits {
                x,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// `sum_r w_r · (−log softmax(x_r)[label_r])` for `x: [rows, classes]`.
    pub fn cross_entropy(&self, x: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || labels.len() != s[0] || weights.len() != s[0] || labels.iter().any(|&l| l >= s[1]) {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len(), weights.len()],
            });
        }
        let c = s[1];
        let (total, probs) = {
            let v = self.value_ref(x);
            let mut probs = Vec::with_capacity(v.len());
            let mut total = 0.0;
            for ((row, &lab), &w) in v.chunks(c).zip(labels).zip(weights) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|r| (r - mx).exp()).sum::<f64>().ln();
                total += w * (lse - row[lab]);
                probs.extend(row.iter().map(|r| (r - lse).exp()));
            }
            (total, probs)
        };
        Ok(self.push_raw(
            vec![1],
            vec![total],
            self.any_grad(&[x]),
            Op::CrossEntropy {
                x,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// `sum_i w_i · smoothL1(x_i − t_i)` with unit transition point.
    pub fn smooth_l1(&self, x: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value_ref(x).len();
        if targets.len() != n || weights.len() != n {
            return Err(TensorError::Shape {
                op: "smooth_l1",
                lhs: self.shape(x),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let total = {
            let v = self.value_ref(x);
            v.iter()
                .zip(targets)
                .zip(weights)
                .map(|((&p, &t), &w)| w * smooth_l1_value(p - t))
                .sum()
        };
        Ok(self.push_raw(
            vec![1],
            vec![total],
            self.any_grad(&[x]),
            Op::SmoothL1 {
                x,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Sum of scalar vars (an empty list gives a constant zero).
    pub fn add_all(&self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter();
        let Some(&first) = it.next() else {
            return self.constant(&[1], vec![0.0]);
        };
        it.try_fold(first, |acc, &x| self.add(acc, x))
    }
}

pub fn smooth_l1_value(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}
