use std::cell::{Cell, Ref, RefCell};

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed sparse rows: output element `i` is
/// `sum(weight[k] * input[col[k]])` for `k in offsets[i]..offsets[i + 1]`.
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SparseRows {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            cols: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (c, w) in entries {
            self.cols.push(c);
            self.weights.push(w);
        }
        self.offsets.push(self.cols.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    /// One entry per output element; `None` produces a zero.
    pub fn gather(indices: impl IntoIterator<Item = Option<usize>>) -> Self {
        let mut s = Self::new();
        for i in indices {
            s.push_row(i.map(|c| (c, 1.0)));
        }
        s
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    L2Normalize {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        eps: f64,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: kernels::ConvGeom,
        cols: Vec<f64>,
    },
    Sparse {
        x: Var,
        map: SparseRows,
    },
    StopGrad,
    BceLogits {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    CrossEntropy {
        x: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub needs_grad: bool,
    pub op: Op,
}

/// Flat record of one forward pass. Reverse replay in [`Tape::backward`]
/// accumulates adjoints; a tape is reused across steps via [`Tape::reset`].
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    backward_done: Cell<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a tensor as an input. It is differentiable iff
    /// `t.requires_grad` is set.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.push_raw(t.shape().to_vec(), t.into_data(), false, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Borrowed view of a recorded value. Do not record new ops while the
    /// borrow is alive.
    pub fn value_ref(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::new(&nodes[v.0].shape, nodes[v.0].value.clone()).expect("recorded shapes are valid")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub(crate) fn push_raw(&self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Gradient of the last `backward` loss with respect to `v`. `None` when
    /// `v` is not on a differentiable path to the loss.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        self.grads.borrow().get(v.0).and_then(|g| g.clone())
    }

    /// Copies the gradient of `v` into `t.grad` (zeros if `v` was unreachable
    /// but `t` requires grad).
    pub fn write_grad(&self, v: Var, t: &mut Tensor) {
        if !t.requires_grad {
            t.grad = None;
            return;
        }
        t.grad = Some(self.grad(v).unwrap_or_else(|| vec![0.0; t.len()]));
    }

    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root.needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.needs_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let n = nodes[v.0].value.len();
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    let shp = |v: Var| nodes[v.0].shape.as_slice();
    match &node.op {
        Op::Leaf | Op::StopGrad => {}
        Op::MatMul(a, b) => {
            let (m, k) = (shp(*a)[0], shp(*a)[1]);
            let n = shp(*b)[1];
            accumulate(nodes, grads, *a, |ga| kernels::matmul_acc(g, val(*b), ga, m, k, n, false, true));
            accumulate(nodes, grads, *b, |gb| kernels::matmul_acc(val(*a), g, gb, k, n, m, true, false));
        }
        Op::Transpose(a) => {
            let (r, c) = (shp(*a)[0], shp(*a)[1]);
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| {
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * vb[i];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * va[i];
                }
            });
        }
        Op::AddBias(x, b) => {
            accumulate(nodes, grads, *x, |gx| add_into(gx, g));
            accumulate(nodes, grads, *b, |gb| {
                let n = gb.len();
                for (i, gi) in g.iter().enumerate() {
                    gb[i % n] += gi;
                }
            });
        }
        Op::Scale(x, s) => accumulate(nodes, grads, *x, |gx| {
            for (d, gi) in gx.iter_mut().zip(g) {
                *d += s * gi;
            }
        }),
        Op::Relu(x) => {
            let vx = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    if vx[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            });
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let n = *node.shape.last().unwrap();
            accumulate(nodes, grads, *x, |gx| {
                for (row, (gy, yy)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                    let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[row * n + j] += yy[j] * (gy[j] - dot);
                    }
                }
            });
        }
        Op::L2Normalize {
            x,
            outer,
            len,
            inner,
            eps,
        } => {
            let vx = val(*x);
            let y = &node.value;
            accumulate(nodes, grads, *x, |gx| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let norm = (0..*len).map(|k| vx[idx(k)].powi(2)).sum::<f64>().sqrt();
                        let denom = norm.max(*eps);
                        if norm > *eps {
                            let dot: f64 = (0..*len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..*len {
                                gx[idx(k)] += (g[idx(k)] - y[idx(k)] * dot) / denom;
                            }
                        } else {
                            for k in 0..*len {
                                gx[idx(k)] += g[idx(k)] / denom;
                            }
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, inv_std } => {
            let y = &node.value;
            let n = *node.shape.last().unwrap();
            accumulate(nodes, grads, *x, |gx| {
                for (r, (gy, yy)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                    let mg = gy.iter().sum::<f64>() / n as f64;
                    let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[r * n + j] += inv_std[r] * (gy[j] - mg - yy[j] * mgy);
                    }
                }
            });
        }
        Op::Concat {
            inputs,
            outer,
            lens,
            inner,
        } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (v, &l) in inputs.iter().zip(lens) {
                accumulate(nodes, grads, *v, |gv| {
                    for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * l * inner;
                        add_into(&mut gv[dst..dst + l * inner], &g[src..src + l * inner]);
                    }
                });
                offset += l;
            }
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, |gx| add_into(gx, g)),
        Op::Sum(x) => accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
        }
        Op::SumLast(x) => {
            let n = *shp(*x).last().unwrap();
            accumulate(nodes, grads, *x, |gx| {
                for (i, d) in gx.iter_mut().enumerate() {
                    *d += g[i / n];
                }
            });
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let ckk = geom.c_in * geom.k * geom.k;
            let hw = geom.h_out * geom.w_out;
            accumulate(nodes, grads, *w, |gw| kernels::matmul_acc(g, cols, gw, geom.c_out, ckk, hw, false, true));
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |gb| {
                    for (c, d) in gb.iter_mut().enumerate() {
                        *d += g[c * hw..(c + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            if nodes[x.0].needs_grad {
                let mut dcols = vec![0.0; ckk * hw];
                kernels::matmul_acc(val(*w), g, &mut dcols, ckk, hw, geom.c_out, true, false);
                accumulate(nodes, grads, *x, |gx| kernels::col2im_acc(&dcols, gx, geom));
            }
        }
        Op::Sparse { x, map } => accumulate(nodes, grads, *x, |gx| {
            for (i, gi) in g.iter().enumerate() {
                for k in map.offsets[i]..map.offsets[i + 1] {
                    gx[map.cols[k]] += map.weights[k] * gi;
                }
            }
        }),
        Op::BceLogits { x, targets, weights } => {
            let vx = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[0] * weights[i] * (kernels::sigmoid(vx[i]) - targets[i]);
                }
            });
        }
        Op::CrossEntropy {
            x,
            labels,
            weights,
            probs,
        } => {
            let c = *shp(*x).last().unwrap();
            accumulate(nodes, grads, *x, |gx| {
                for (r, (&lab, &wt)) in labels.iter().zip(weights).enumerate() {
                    for j in 0..c {
                        let onehot = if j == lab { 1.0 } else { 0.0 };
                        gx[r * c + j] += g[0] * wt * (probs[r * c + j] - onehot);
                    }
                }
            });
        }
        Op::SmoothL1 { x, targets, weights } => {
            let vx = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    let d = vx[i] - targets[i];
                    let dd = if d.abs() < 1.0 { d } else { d.signum() };
                    gx[i] += g[0] * weights[i] * dd;
                }
            });
        }
    }
}
