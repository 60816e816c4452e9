//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A `Graph` is an append-only tape of nodes; every op pushes the node it
//! produced, so node ids are already a topological order and `backward`
//! walks them in reverse exactly once. Graphs are rebuilt per forward pass.

use std::cell::RefCell;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Zero padding policy for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// Zero padding of (k-1)/2 per axis; odd kernels keep spatial size at stride 1.
    Same,
}

enum Op<E: Scalar> {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Div {
        a: usize,
        b: usize,
    },
    Affine {
        x: usize,
        mul: E,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        stride: usize,
        pad: (usize, usize),
        cols: Vec<E>,
    },
    Conv3d {
        x: usize,
        k: usize,
        pad: (usize, usize, usize),
        cols: Vec<E>,
    },
    Relu {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Sqrt {
        x: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    Reduce {
        x: usize,
        axes: Vec<usize>,
        mean: bool,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    ResizeNearest2d {
        x: usize,
    },
    AvgPool2 {
        x: usize,
    },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    requires_grad: bool,
    grad: Option<Tensor<E>>,
    op: Op<E>,
}

pub struct Graph<E: Scalar> {
    nodes: RefCell<Vec<Node<E>>>,
}

/// Handle to a node of one graph. Copyable; all tensor ops live here.
pub struct Var<'g, E: Scalar> {
    graph: &'g Graph<E>,
    id: usize,
}

impl<E: Scalar> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl<E: Scalar> Clone for Var<'_, E> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<E: Scalar> Copy for Var<'_, E> {}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------- helpers

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::DimMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Row-major strides of `shape` right-aligned into `rank` dims, with 0 on
/// broadcast (size-1 or padded) axes.
fn padded_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    // padded leading dims keep stride 0
    for (d, s) in strides.iter_mut().enumerate() {
        if out_shape[d] == 1 {
            *s = 0;
        }
    }
    strides
}

/// Walks every flat index of `shape` in row-major order, handing the visitor
/// the flat offsets induced by each stride set.
fn for_each_offset<const N: usize>(
    shape: &[usize],
    strides: [&[usize]; N],
    mut visit: impl FnMut(usize, [usize; N]),
) {
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    let mut offs = [0usize; N];
    if rank == 0 {
        if numel > 0 {
            visit(0, offs);
        }
        return;
    }
    let mut coords = vec![0usize; rank];
    for i in 0..numel {
        visit(i, offs);
        for d in (0..rank).rev() {
            coords[d] += 1;
            for s in 0..N {
                offs[s] += strides[s][d];
            }
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
            for s in 0..N {
                offs[s] -= strides[s][d] * shape[d];
            }
        }
    }
}

/// Walks all but the last axis of `shape` with an odometer, handing the
/// visitor the base offset per stride set and the run length of the last
/// axis. On the last axis every right-aligned stride is 0 or 1, so call
/// sites run contiguous (or constant) inner loops.
fn for_each_run<const N: usize>(
    shape: &[usize],
    strides: [&[usize]; N],
    mut visit: impl FnMut([usize; N], usize),
) {
    let rank = shape.len();
    if rank == 0 {
        visit([0; N], 1);
        return;
    }
    let inner = shape[rank - 1];
    let outer_shape = &shape[..rank - 1];
    let outer_numel: usize = outer_shape.iter().product();
    let mut offs = [0usize; N];
    let mut coords = vec![0usize; rank.saturating_sub(1)];
    for _ in 0..outer_numel {
        visit(offs, inner);
        for d in (0..rank - 1).rev() {
            coords[d] += 1;
            for s in 0..N {
                offs[s] += strides[s][d];
            }
            if coords[d] < outer_shape[d] {
                break;
            }
            coords[d] = 0;
            for s in 0..N {
                offs[s] -= strides[s][d] * outer_shape[d];
            }
        }
    }
}

fn reduced_out_shape(shape: &[usize], axes: &[usize], keepdims: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for (d, &s) in shape.iter().enumerate() {
        if axes.contains(&d) {
            if keepdims {
                out.push(1);
            }
        } else {
            out.push(s);
        }
    }
    out
}

/// Strides mapping a source coordinate to the flat offset of the reduced
/// output (0 on reduced axes).
fn reduction_strides(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        if !axes.contains(&d) {
            strides[d] = acc;
            acc *= shape[d];
        }
    }
    strides
}

fn natural_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn same_pad(op: &'static str, k: usize) -> Result<usize> {
    if k % 2 == 0 {
        return Err(TensorError::InvalidShape {
            op,
            detail: format!("same padding requires an odd kernel, got {k}"),
        });
    }
    Ok((k - 1) / 2)
}

fn gelu_value<E: Scalar>(x: E) -> E {
    // tanh form of GELU
    let c = E::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = E::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    E::from_f64(0.5) * x * (E::ONE + u.tanh())
}

fn gelu_grad<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654);
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (E::ONE + E::from_f64(3.0) * a * x * x);
    half * (E::ONE + t) + half * x * (E::ONE - t * t) * du
}

fn sigmoid_value<E: Scalar>(x: E) -> E {
    if x >= E::ZERO {
        let e = (-x).exp();
        E::ONE / (E::ONE + e)
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

// ---------------------------------------------------------------- graph

impl<E: Scalar> Graph<E> {
    pub fn new() -> Graph<E> {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts a differentiable leaf (a parameter or checked input).
    pub fn leaf(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, true, Op::Leaf)
    }

    /// Inserts a non-differentiable input.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&self, v: E) -> Var<'_, E> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var { graph: self, id }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat<'g>(&'g self, vars: &[Var<'g, E>], axis: usize) -> Result<Var<'g, E>> {
        if vars.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        for v in vars {
            if !std::ptr::eq(v.graph, self) {
                return Err(TensorError::GraphMismatch);
            }
        }
        let first = vars[0].shape();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total_len = 0usize;
        {
            let nodes = self.nodes.borrow();
            for v in vars {
                let s = nodes[v.id].value.shape();
                if s.len() != first.len()
                    || s.iter()
                        .zip(first.iter())
                        .enumerate()
                        .any(|(d, (a, b))| d != axis && a != b)
                {
                    return Err(TensorError::DimMismatch {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total_len += s[axis];
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_len;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![E::ZERO; out_shape.iter().product()];
        {
            let nodes = self.nodes.borrow();
            let mut base = 0usize;
            for v in vars {
                let val = &nodes[v.id].value;
                let len_i = val.shape()[axis];
                let block = len_i * inner;
                for o in 0..outer {
                    let src = &val.data()[o * block..(o + 1) * block];
                    let dst_off = o * total_len * inner + base * inner;
                    data[dst_off..dst_off + block].copy_from_slice(src);
                }
                base += len_i;
            }
        }
        let req = self.needs(&vars.iter().map(|v| v.id).collect::<Vec<_>>());
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(
            value,
            req,
            Op::Concat {
                xs: vars.iter().map(|v| v.id).collect(),
                axis,
            },
        ))
    }

    pub fn value(&self, v: Var<'_, E>) -> Tensor<E> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn grad(&self, v: Var<'_, E>) -> Option<Tensor<E>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every node that
    /// requires gradients and is reachable from the loss; accumulates if
    /// called more than once.
    pub fn backward(&self, loss: Var<'_, E>) -> Result<()> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(TensorError::GraphMismatch);
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: nodes[loss.id].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<E>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), E::ONE));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn acc_slot<'s, E: Scalar>(
    grads: &'s mut [Option<Tensor<E>>],
    target: usize,
    shape: &[usize],
) -> &'s mut Tensor<E> {
    if grads[target].is_none() {
        grads[target] = Some(Tensor::zeros(shape));
    }
    grads[target].as_mut().unwrap()
}

/// Sends `g` (the gradient of node `id`) to the node's inputs. Reads node
/// values immutably; writes only into `grads`.
fn propagate<E: Scalar>(
    nodes: &[Node<E>],
    id: usize,
    g: &Tensor<E>,
    grads: &mut [Option<Tensor<E>>],
) {
    let needs = |i: usize| nodes[i].requires_grad;

    match &nodes[id].op {
        Op::Leaf => {}
        op @ (Op::Add { a, b } | Op::Sub { a, b }) => {
            let negate_b = matches!(op, Op::Sub { .. });
            let out_shape = nodes[id].value.shape();
            for (t, flip) in [(*a, false), (*b, negate_b)] {
                if !needs(t) {
                    continue;
                }
                let t_shape = nodes[t].value.shape().to_vec();
                let gd = g.data();
                let sd = acc_slot(grads, t, &t_shape).data_mut();
                if t_shape == out_shape {
                    if flip {
                        for (s, &gv) in sd.iter_mut().zip(gd) {
                            *s += -gv;
                        }
                    } else {
                        for (s, &gv) in sd.iter_mut().zip(gd) {
                            *s += gv;
                        }
                    }
                } else {
                    let strides = padded_strides(&t_shape, out_shape);
                    let step = strides[out_shape.len() - 1];
                    let mut base = 0usize;
                    for_each_run(out_shape, [&strides], |[o], len| {
                        let gs = &gd[base..base + len];
                        if step == 1 {
                            for (s, &gv) in sd[o..o + len].iter_mut().zip(gs) {
                                *s += if flip { -gv } else { gv };
                            }
                        } else {
                            let mut acc = E::ZERO;
                            for &gv in gs {
                                acc += gv;
                            }
                            sd[o] += if flip { -acc } else { acc };
                        }
                        base += len;
                    });
                }
            }
        }
        op @ (Op::Mul { a, b } | Op::Div { a, b }) => {
            let (a, b) = (*a, *b);
            let is_div = matches!(op, Op::Div { .. });
            let out_shape = nodes[id].value.shape();
            let a_shape = nodes[a].value.shape().to_vec();
            let b_shape = nodes[b].value.shape().to_vec();
            let same = a_shape == out_shape && b_shape == out_shape;
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            let gd = g.data();
            if needs(a) {
                let sd = acc_slot(grads, a, &a_shape).data_mut();
                if same {
                    if is_div {
                        for ((s, &gv), &b_v) in sd.iter_mut().zip(gd).zip(bv) {
                            *s += gv / b_v;
                        }
                    } else {
                        for ((s, &gv), &b_v) in sd.iter_mut().zip(gd).zip(bv) {
                            *s += gv * b_v;
                        }
                    }
                } else {
                    let a_str = padded_strides(&a_shape, out_shape);
                    let b_str = padded_strides(&b_shape, out_shape);
                    let rank = out_shape.len();
                    let (a_step, b_step) = (a_str[rank - 1], b_str[rank - 1]);
                    let mut base = 0usize;
                    for_each_run(out_shape, [&a_str, &b_str], |[ao, bo], len| {
                        let gs = &gd[base..base + len];
                        match (a_step, b_step) {
                            (1, 1) => {
                                for ((s, &gv), &b_v) in
                                    sd[ao..ao + len].iter_mut().zip(gs).zip(&bv[bo..bo + len])
                                {
                                    *s += if is_div { gv / b_v } else { gv * b_v };
                                }
                            }
                            (1, 0) => {
                                let b_v = bv[bo];
                                for (s, &gv) in sd[ao..ao + len].iter_mut().zip(gs) {
                                    *s += if is_div { gv / b_v } else { gv * b_v };
                                }
                            }
                            (0, 1) => {
                                let mut acc = E::ZERO;
                                for (&gv, &b_v) in gs.iter().zip(&bv[bo..bo + len]) {
                                    acc += if is_div { gv / b_v } else { gv * b_v };
                                }
                                sd[ao] += acc;
                            }
                            _ => {
                                let mut acc = E::ZERO;
                                for &gv in gs {
                                    acc += gv;
                                }
                                let b_v = bv[bo];
                                sd[ao] += if is_div { acc / b_v } else { acc * b_v };
                            }
                        }
                        base += len;
                    });
                }
            }
            if needs(b) {
                let sd = acc_slot(grads, b, &b_shape).data_mut();
                if same {
                    if is_div {
                        for (((s, &gv), &a_v), &b_v) in sd.iter_mut().zip(gd).zip(av).zip(bv) {
                            *s += -gv * a_v / (b_v * b_v);
                        }
                    } else {
                        for ((s, &gv), &a_v) in sd.iter_mut().zip(gd).zip(av) {
                            *s += gv * a_v;
                        }
                    }
                } else {
                    let a_str = padded_strides(&a_shape, out_shape);
                    let b_str = padded_strides(&b_shape, out_shape);
                    let rank = out_shape.len();
                    let (a_step, b_step) = (a_str[rank - 1], b_str[rank - 1]);
                    let mut base = 0usize;
                    for_each_run(out_shape, [&a_str, &b_str], |[ao, bo], len| {
                        let gs = &gd[base..base + len];
                        match (b_step, a_step) {
                            (1, 1) => {
                                for (((s, &gv), &a_v), &b_v) in sd[bo..bo + len]
                                    .iter_mut()
                                    .zip(gs)
                                    .zip(&av[ao..ao + len])
                                    .zip(&bv[bo..bo + len])
                                {
                                    *s += if is_div {
                                        -gv * a_v / (b_v * b_v)
                                    } else {
                                        gv * a_v
                                    };
                                }
                            }
                            (1, 0) => {
                                let a_v = av[ao];
                                for ((s, &gv), &b_v) in
                                    sd[bo..bo + len].iter_mut().zip(gs).zip(&bv[bo..bo + len])
                                {
                                    *s += if is_div {
                                        -gv * a_v / (b_v * b_v)
                                    } else {
                                        gv * a_v
                                    };
                                }
                            }
                            (0, 1) => {
                                let mut acc = E::ZERO;
                                let b_v = bv[bo];
                                for (&gv, &a_v) in gs.iter().zip(&av[ao..ao + len]) {
                                    acc += if is_div {
                                        -gv * a_v / (b_v * b_v)
                                    } else {
                                        gv * a_v
                                    };
                                }
                                sd[bo] += acc;
                            }
                            _ => {
                                let mut acc = E::ZERO;
                                for &gv in gs {
                                    acc += gv;
                                }
                                let a_v = av[ao];
                                let b_v = bv[bo];
                                sd[bo] += if is_div {
                                    -acc * a_v / (b_v * b_v)
                                } else {
                                    acc * a_v
                                };
                            }
                        }
                        base += len;
                    });
                }
            }
        }
        Op::Affine { x, mul } => {
            let (x, mul) = (*x, *mul);
            if needs(x) {
                let shape = nodes[x].value.shape().to_vec();
                let sd = acc_slot(grads, x, &shape).data_mut();
                for (s, &gv) in sd.iter_mut().zip(g.data()) {
                    *s += mul * gv;
                }
            }
        }
        Op::Matmul { a, b } => {
            let (a, b) = (*a, *b);
            let a_shape = nodes[a].value.shape().to_vec();
            let b_shape = nodes[b].value.shape().to_vec();
            let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
            let n = b_shape[b_shape.len() - 1];
            let batch = broadcast_shapes(
                "matmul",
                &a_shape[..a_shape.len() - 2],
                &b_shape[..b_shape.len() - 2],
            )
            .expect("validated in forward");
            let a_str = padded_strides(&a_shape[..a_shape.len() - 2], &batch);
            let b_str = padded_strides(&b_shape[..b_shape.len() - 2], &batch);
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            let gd = g.data();
            if needs(a) {
                let sd = acc_slot(grads, a, &a_shape).data_mut();
                for_each_offset(&batch, [&a_str, &b_str], |i, [ao, bo]| {
                    kernels::matmul_nt_acc(
                        &gd[i * m * n..(i + 1) * m * n],
                        &bv[bo * k * n..bo * k * n + k * n],
                        m,
                        n,
                        k,
                        &mut sd[ao * m * k..ao * m * k + m * k],
                    );
                });
            }
            if needs(b) {
                let sd = acc_slot(grads, b, &b_shape).data_mut();
                for_each_offset(&batch, [&a_str, &b_str], |i, [ao, bo]| {
                    kernels::matmul_tn_acc(
                        &av[ao * m * k..ao * m * k + m * k],
                        &gd[i * m * n..(i + 1) * m * n],
                        k,
                        m,
                        n,
                        &mut sd[bo * k * n..bo * k * n + k * n],
                    );
                });
            }
        }
        Op::Conv2d {
            x,
            k,
            stride,
            pad,
            cols,
        } => {
            let (x, kid, stride, pad) = (*x, *k, *stride, *pad);
            let x_shape = nodes[x].value.shape().to_vec();
            let k_shape = nodes[kid].value.shape().to_vec();
            let (c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
            let (c_out, kh, kw) = (k_shape[0], k_shape[2], k_shape[3]);
            let out_shape = nodes[id].value.shape();
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let p = oh * ow;
            let q = c_in * kh * kw;
            if needs(kid) {
                let sd = acc_slot(grads, kid, &k_shape).data_mut();
                kernels::matmul_nt_acc(g.data(), cols, c_out, p, q, sd);
            }
            if needs(x) {
                let kv = nodes[kid].value.data();
                let mut dcols = vec![E::ZERO; p * q];
                kernels::matmul_tn_acc(kv, g.data(), q, c_out, p, &mut dcols);
                let sd = acc_slot(grads, x, &x_shape).data_mut();
                kernels::col2im_2d(&dcols, c_in, h, w, kh, kw, pad.0, pad.1, stride, oh, ow, sd);
            }
        }
        Op::Conv3d { x, k, pad, cols } => {
            let (x, kid, pad) = (*x, *k, *pad);
            let x_shape = nodes[x].value.shape().to_vec();
            let k_shape = nodes[kid].value.shape().to_vec();
            let (c_in, t, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
            let (c_out, kt, kh, kw) = (k_shape[0], k_shape[2], k_shape[3], k_shape[4]);
            let out_shape = nodes[id].value.shape();
            let (ot, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
            let p = ot * oh * ow;
            let q = c_in * kt * kh * kw;
            if needs(kid) {
                let sd = acc_slot(grads, kid, &k_shape).data_mut();
                kernels::matmul_nt_acc(g.data(), cols, c_out, p, q, sd);
            }
            if needs(x) {
                let kv = nodes[kid].value.data();
                let mut dcols = vec![E::ZERO; p * q];
                kernels::matmul_tn_acc(kv, g.data(), q, c_out, p, &mut dcols);
                let sd = acc_slot(grads, x, &x_shape).data_mut();
                kernels::col2im_3d(&dcols, c_in, t, h, w, kt, kh, kw, pad, (ot, oh, ow), sd);
            }
        }
        Op::Relu { x } => {
            let x = *x;
            if needs(x) {
                let xv = nodes[x].value.data();
                let shape = nodes[x].value.shape().to_vec();
                let sd = acc_slot(grads, x, &shape).data_mut();
                for ((s, &gv), &xval) in sd.iter_mut().zip(g.data()).zip(xv) {
                    if xval > E::ZERO {
                        *s += gv;
                    }
                }
            }
        }
        Op::Gelu { x } => {
            let x = *x;
            if needs(x) {
                let xv = nodes[x].value.data();
                let shape = nodes[x].value.shape().to_vec();
                let sd = acc_slot(grads, x, &shape).data_mut();
                for ((s, &gv), &xval) in sd.iter_mut().zip(g.data()).zip(xv) {
                    *s += gv * gelu_grad(xval);
                }
            }
        }
        Op::Sigmoid { x } => {
            let x = *x;
            if needs(x) {
                let yv = nodes[id].value.data();
                let shape = nodes[x].value.shape().to_vec();
                let sd = acc_slot(grads, x, &shape).data_mut();
                for ((s, &gv), &y) in sd.iter_mut().zip(g.data()).zip(yv) {
                    *s += gv * y * (E::ONE - y);
                }
            }
        }
        Op::Sqrt { x } => {
            let x = *x;
            if needs(x) {
                let yv = nodes[id].value.data();
                let shape = nodes[x].value.shape().to_vec();
                let sd = acc_slot(grads, x, &shape).data_mut();
                let half = E::from_f64(0.5);
                for ((s, &gv), &y) in sd.iter_mut().zip(g.data()).zip(yv) {
                    *s += gv * half / y;
                }
            }
        }
        op @ (Op::Softmax { x, axis } | Op::LogSoftmax { x, axis }) => {
            let (x, axis) = (*x, *axis);
            let is_log = matches!(op, Op::LogSoftmax { .. });
            if needs(x) {
                let yv = nodes[id].value.data();
                let shape = nodes[x].value.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let sd = acc_slot(grads, x, &shape).data_mut();
                let gd = g.data();
                for o in 0..outer {
                    for r in 0..inner {
                        let base = o * len * inner + r;
                        if is_log {
                            let mut sum_g = E::ZERO;
                            for i in 0..len {
                                sum_g += gd[base + i * inner];
                            }
                            for i in 0..len {
                                let off = base + i * inner;
                                sd[off] += gd[off] - yv[off].exp() * sum_g;
                            }
                        } else {
                            let mut dot = E::ZERO;
                            for i in 0..len {
                                let off = base + i * inner;
                                dot += gd[off] * yv[off];
                            }
                            for i in 0..len {
                                let off = base + i * inner;
                                sd[off] += yv[off] * (gd[off] - dot);
                            }
                        }
                    }
                }
            }
        }
        Op::Reduce { x, axes, mean } => {
            let (x, mean) = (*x, *mean);
            if needs(x) {
                let shape = nodes[x].value.shape().to_vec();
                let strides = reduction_strides(&shape, axes);
                let count: usize = axes.iter().map(|&d| shape[d]).product();
                let scale = if mean {
                    E::ONE / E::from_f64(count as f64)
                } else {
                    E::ONE
                };
                let sd = acc_slot(grads, x, &shape).data_mut();
                let gd = g.data();
                let step = if shape.is_empty() {
                    1
                } else {
                    strides[shape.len() - 1]
                };
                let mut base = 0usize;
                for_each_run(&shape, [&strides], |[o], len| {
                    if step == 1 {
                        for (s, &gv) in sd[base..base + len].iter_mut().zip(&gd[o..o + len]) {
                            *s += gv * scale;
                        }
                    } else {
                        let gv = gd[o] * scale;
                        for s in &mut sd[base..base + len] {
                            *s += gv;
                        }
                    }
                    base += len;
                });
            }
        }
        Op::Concat { xs, axis } => {
            let axis = *axis;
            let out_shape = nodes[id].value.shape();
            let (outer, total, inner) = axis_split(out_shape, axis);
            let mut base = 0usize;
            for &t in xs {
                let t_shape = nodes[t].value.shape().to_vec();
                let len_i = t_shape[axis];
                if needs(t) {
                    let sd = acc_slot(grads, t, &t_shape).data_mut();
                    let gd = g.data();
                    let block = len_i * inner;
                    for o in 0..outer {
                        let src_off = o * total * inner + base * inner;
                        let dst_off = o * block;
                        for j in 0..block {
                            sd[dst_off + j] += gd[src_off + j];
                        }
                    }
                }
                base += len_i;
            }
        }
        Op::Narrow { x, axis, start } => {
            let (x, axis, start) = (*x, *axis, *start);
            let x_shape = nodes[x].value.shape().to_vec();
            let len = nodes[id].value.shape()[axis];
            let (outer, full, inner) = axis_split(&x_shape, axis);
            if needs(x) {
                let sd = acc_slot(grads, x, &x_shape).data_mut();
                let gd = g.data();
                let block = len * inner;
                for o in 0..outer {
                    let dst_off = o * full * inner + start * inner;
                    let src_off = o * block;
                    for j in 0..block {
                        sd[dst_off + j] += gd[src_off + j];
                    }
                }
            }
        }
        Op::Reshape { x } => {
            let x = *x;
            if needs(x) {
                let shape = nodes[x].value.shape().to_vec();
                let sd = acc_slot(grads, x, &shape).data_mut();
                for (s, &gv) in sd.iter_mut().zip(g.data()) {
                    *s += gv;
                }
            }
        }
        Op::Permute { x, perm } => {
            let x = *x;
            if needs(x) {
                let x_shape = nodes[x].value.shape().to_vec();
                let out_shape = nodes[id].value.shape();
                let x_strides = natural_strides(&x_shape);
                // out dim d corresponds to src dim perm[d]
                let mapped: Vec<usize> = perm.iter().map(|&p| x_strides[p]).collect();
                let sd = acc_slot(grads, x, &x_shape).data_mut();
                let gd = g.data();
                for_each_offset(out_shape, [&mapped], |i, [o]| {
                    sd[o] += gd[i];
                });
            }
        }
        Op::ResizeNearest2d { x } => {
            let x = *x;
            if needs(x) {
                let x_shape = nodes[x].value.shape().to_vec();
                let out_shape = nodes[id].value.shape();
                let rank = x_shape.len();
                let (h, w) = (x_shape[rank - 2], x_shape[rank - 1]);
                let (oh, ow) = (out_shape[rank - 2], out_shape[rank - 1]);
                let lead: usize = x_shape[..rank - 2].iter().product();
                let sd = acc_slot(grads, x, &x_shape).data_mut();
                let gd = g.data();
                for l in 0..lead {
                    for oy in 0..oh {
                        let sy = oy * h / oh;
                        for ox in 0..ow {
                            let sx = ox * w / ow;
                            sd[(l * h + sy) * w + sx] += gd[(l * oh + oy) * ow + ox];
                        }
                    }
                }
            }
        }
        Op::AvgPool2 { x } => {
            let x = *x;
            if needs(x) {
                let x_shape = nodes[x].value.shape().to_vec();
                let rank = x_shape.len();
                let (h, w) = (x_shape[rank - 2], x_shape[rank - 1]);
                let (oh, ow) = (h / 2, w / 2);
                let lead: usize = x_shape[..rank - 2].iter().product();
                let quarter = E::from_f64(0.25);
                let sd = acc_slot(grads, x, &x_shape).data_mut();
                let gd = g.data();
                for l in 0..lead {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[(l * oh + oy) * ow + ox] * quarter;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    sd[(l * h + oy * 2 + dy) * w + ox * 2 + dx] += gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------- var ops

impl<'g, E: Scalar> Var<'g, E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<E> {
        self.graph
    }

    pub fn value(&self) -> Tensor<E> {
        self.graph.value(*self)
    }

    pub fn grad(&self) -> Option<Tensor<E>> {
        self.graph.grad(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    fn same_graph(&self, other: &Var<'g, E>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(TensorError::GraphMismatch)
        }
    }

    fn binary(
        self,
        other: Var<'g, E>,
        op: &'static str,
    ) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>, bool)> {
        self.same_graph(&other)?;
        let nodes = self.graph.nodes.borrow();
        let a_shape = nodes[self.id].value.shape().to_vec();
        let b_shape = nodes[other.id].value.shape().to_vec();
        let out = broadcast_shapes(op, &a_shape, &b_shape)?;
        let req = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        Ok((a_shape, b_shape, out, req))
    }

    fn elementwise(
        self,
        other: Var<'g, E>,
        name: &'static str,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> Result<Var<'g, E>> {
        let (a_shape, b_shape, out_shape, req) = self.binary(other, name)?;
        let data = {
            let nodes = self.graph.nodes.borrow();
            let av = nodes[self.id].value.data();
            let bv = nodes[other.id].value.data();
            if a_shape == b_shape {
                av.iter().zip(bv).map(|(&a, &b)| f(a, b)).collect()
            } else {
                let a_str = padded_strides(&a_shape, &out_shape);
                let b_str = padded_strides(&b_shape, &out_shape);
                let rank = out_shape.len();
                let (a_step, b_step) = (a_str[rank - 1], b_str[rank - 1]);
                let mut data = vec![E::ZERO; out_shape.iter().product()];
                let mut base = 0usize;
                for_each_run(&out_shape, [&a_str, &b_str], |[ao, bo], len| {
                    let out = &mut data[base..base + len];
                    match (a_step, b_step) {
                        (1, 1) => {
                            for ((o, &a), &b) in
                                out.iter_mut().zip(&av[ao..ao + len]).zip(&bv[bo..bo + len])
                            {
                                *o = f(a, b);
                            }
                        }
                        (1, 0) => {
                            let b = bv[bo];
                            for (o, &a) in out.iter_mut().zip(&av[ao..ao + len]) {
                                *o = f(a, b);
                            }
                        }
                        (0, 1) => {
                            let a = av[ao];
                            for (o, &b) in out.iter_mut().zip(&bv[bo..bo + len]) {
                                *o = f(a, b);
                            }
                        }
                        _ => {
                            let v = f(av[ao], bv[bo]);
                            for o in out.iter_mut() {
                                *o = v;
                            }
                        }
                    }
                    base += len;
                });
                data
            }
        };
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.graph.push(value, req, op))
    }

    pub fn add(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        self.elementwise(
            other,
            "add",
            |a, b| a + b,
            Op::Add {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn sub(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        self.elementwise(
            other,
            "sub",
            |a, b| a - b,
            Op::Sub {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn mul(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        self.elementwise(
            other,
            "mul",
            |a, b| a * b,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn div(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        self.elementwise(
            other,
            "div",
            |a, b| a / b,
            Op::Div {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// y = mul * x + add, with scalar constants.
    pub fn affine(self, mul: f64, add: f64) -> Result<Var<'g, E>> {
        let m = E::from_f64(mul);
        let a = E::from_f64(add);
        let (value, req) = {
            let nodes = self.graph.nodes.borrow();
            (
                nodes[self.id].value.map(|v| m * v + a),
                nodes[self.id].requires_grad,
            )
        };
        Ok(self
            .graph
            .push(value, req, Op::Affine { x: self.id, mul: m }))
    }

    pub fn scale(self, factor: f64) -> Result<Var<'g, E>> {
        self.affine(factor, 0.0)
    }

    pub fn neg(self) -> Result<Var<'g, E>> {
        self.affine(-1.0, 0.0)
    }

    /// Matrix product over the trailing two axes; leading axes broadcast.
    pub fn matmul(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        self.same_graph(&other)?;
        let nodes = self.graph.nodes.borrow();
        let a_shape = nodes[self.id].value.shape().to_vec();
        let b_shape = nodes[other.id].value.shape().to_vec();
        if a_shape.len() < 2
            || b_shape.len() < 2
            || a_shape[a_shape.len() - 1] != b_shape[b_shape.len() - 2]
        {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let n = b_shape[b_shape.len() - 1];
        let batch = broadcast_shapes(
            "matmul",
            &a_shape[..a_shape.len() - 2],
            &b_shape[..b_shape.len() - 2],
        )?;
        let a_str = padded_strides(&a_shape[..a_shape.len() - 2], &batch);
        let b_str = padded_strides(&b_shape[..b_shape.len() - 2], &batch);
        let batch_n: usize = batch.iter().product();
        let mut data = vec![E::ZERO; batch_n * m * n];
        {
            let av = nodes[self.id].value.data();
            let bv = nodes[other.id].value.data();
            for_each_offset(&batch, [&a_str, &b_str], |i, [ao, bo]| {
                kernels::matmul_nn_acc(
                    &av[ao * m * k..ao * m * k + m * k],
                    &bv[bo * k * n..bo * k * n + k * n],
                    m,
                    k,
                    n,
                    &mut data[i * m * n..(i + 1) * m * n],
                );
            });
        }
        let req = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.graph.push(
            value,
            req,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Cross-correlation of `x[c_in,h,w]` with `kernel[c_out,c_in,kh,kw]`.
    pub fn conv2d(self, kernel: Var<'g, E>, padding: Padding, stride: usize) -> Result<Var<'g, E>> {
        self.same_graph(&kernel)?;
        let nodes = self.graph.nodes.borrow();
        let x_shape = nodes[self.id].value.shape().to_vec();
        let k_shape = nodes[kernel.id].value.shape().to_vec();
        if x_shape.len() != 3 || k_shape.len() != 4 || k_shape[1] != x_shape[0] {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                lhs: x_shape,
                rhs: k_shape,
            });
        }
        let (c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
        let (c_out, kh, kw) = (k_shape[0], k_shape[2], k_shape[3]);
        let (ph, pw) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => (same_pad("conv2d", kh)?, same_pad("conv2d", kw)?),
        };
        let oh = kernels::conv_out_len(h, kh, ph, stride).ok_or(TensorError::DimMismatch {
            op: "conv2d",
            lhs: x_shape.clone(),
            rhs: k_shape.clone(),
        })?;
        let ow = kernels::conv_out_len(w, kw, pw, stride).ok_or(TensorError::DimMismatch {
            op: "conv2d",
            lhs: x_shape.clone(),
            rhs: k_shape.clone(),
        })?;
        let p = oh * ow;
        let q = c_in * kh * kw;
        let mut cols = vec![E::ZERO; p * q];
        kernels::im2col_2d(
            nodes[self.id].value.data(),
            c_in,
            h,
            w,
            kh,
            kw,
            ph,
            pw,
            stride,
            oh,
            ow,
            &mut cols,
        );
        let mut data = vec![E::ZERO; c_out * p];
        kernels::matmul_nn_acc(nodes[kernel.id].value.data(), &cols, c_out, q, p, &mut data);
        let req = nodes[self.id].requires_grad || nodes[kernel.id].requires_grad;
        drop(nodes);
        let value = Tensor::from_vec(vec![c_out, oh, ow], data)?;
        Ok(self.graph.push(
            value,
            req,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                stride,
                pad: (ph, pw),
                cols,
            },
        ))
    }

    /// Cross-correlation of `x[c_in,t,h,w]` with `kernel[c_out,c_in,kt,kh,kw]`, stride 1.
    pub fn conv3d(self, kernel: Var<'g, E>, padding: Padding) -> Result<Var<'g, E>> {
        self.same_graph(&kernel)?;
        let nodes = self.graph.nodes.borrow();
        let x_shape = nodes[self.id].value.shape().to_vec();
        let k_shape = nodes[kernel.id].value.shape().to_vec();
        if x_shape.len() != 4 || k_shape.len() != 5 || k_shape[1] != x_shape[0] {
            return Err(TensorError::DimMismatch {
                op: "conv3d",
                lhs: x_shape,
                rhs: k_shape,
            });
        }
        let (c_in, t, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, kt, kh, kw) = (k_shape[0], k_shape[2], k_shape[3], k_shape[4]);
        let pad = match padding {
            Padding::Valid => (0, 0, 0),
            Padding::Same => (
                same_pad("conv3d", kt)?,
                same_pad("conv3d", kh)?,
                same_pad("conv3d", kw)?,
            ),
        };
        let ot = kernels::conv_out_len(t, kt, pad.0, 1).ok_or(TensorError::DimMismatch {
            op: "conv3d",
            lhs: x_shape.clone(),
            rhs: k_shape.clone(),
        })?;
        let oh = kernels::conv_out_len(h, kh, pad.1, 1).ok_or(TensorError::DimMismatch {
            op: "conv3d",
            lhs: x_shape.clone(),
            rhs: k_shape.clone(),
        })?;
        let ow = kernels::conv_out_len(w, kw, pad.2, 1).ok_or(TensorError::DimMismatch {
            op: "conv3d",
            lhs: x_shape.clone(),
            rhs: k_shape.clone(),
        })?;
        let p = ot * oh * ow;
        let q = c_in * kt * kh * kw;
        let mut cols = vec![E::ZERO; p * q];
        kernels::im2col_3d(
            nodes[self.id].value.data(),
            c_in,
            t,
            h,
            w,
            kt,
            kh,
            kw,
            pad,
            (ot, oh, ow),
            &mut cols,
        );
        let mut data = vec![E::ZERO; c_out * p];
        kernels::matmul_nn_acc(nodes[kernel.id].value.data(), &cols, c_out, q, p, &mut data);
        let req = nodes[self.id].requires_grad || nodes[kernel.id].requires_grad;
        drop(nodes);
        let value = Tensor::from_vec(vec![c_out, ot, oh, ow], data)?;
        Ok(self.graph.push(
            value,
            req,
            Op::Conv3d {
                x: self.id,
                k: kernel.id,
                pad,
                cols,
            },
        ))
    }

    fn unary(self, f: impl Fn(E) -> E, op: Op<E>) -> Var<'g, E> {
        let (value, req) = {
            let nodes = self.graph.nodes.borrow();
            (nodes[self.id].value.map(f), nodes[self.id].requires_grad)
        };
        self.graph.push(value, req, op)
    }

    pub fn relu(self) -> Var<'g, E> {
        self.unary(|v| v.maximum(E::ZERO), Op::Relu { x: self.id })
    }

    pub fn gelu(self) -> Var<'g, E> {
        self.unary(gelu_value, Op::Gelu { x: self.id })
    }

    pub fn sigmoid(self) -> Var<'g, E> {
        self.unary(sigmoid_value, Op::Sigmoid { x: self.id })
    }

    pub fn sqrt(self) -> Var<'g, E> {
        self.unary(|v| v.sqrt(), Op::Sqrt { x: self.id })
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, E>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'g, E>> {
        self.softmax_impl(axis, true)
    }

    fn softmax_impl(self, axis: usize, log: bool) -> Result<Var<'g, E>> {
        let nodes = self.graph.nodes.borrow();
        let shape = nodes[self.id].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = nodes[self.id].value.data();
        let mut data = vec![E::ZERO; xv.len()];
        for o in 0..outer {
            for r in 0..inner {
                let base = o * len * inner + r;
                let mut max = xv[base];
                for i in 1..len {
                    max = max.maximum(xv[base + i * inner]);
                }
                let mut sum = E::ZERO;
                for i in 0..len {
                    let e = (xv[base + i * inner] - max).exp();
                    data[base + i * inner] = e;
                    sum += e;
                }
                if log {
                    let lse = sum.ln();
                    for i in 0..len {
                        data[base + i * inner] = xv[base + i * inner] - max - lse;
                    }
                } else {
                    for i in 0..len {
                        data[base + i * inner] = data[base + i * inner] / sum;
                    }
                }
            }
        }
        let req = nodes[self.id].requires_grad;
        drop(nodes);
        let value = Tensor::from_vec(shape, data)?;
        let op = if log {
            Op::LogSoftmax { x: self.id, axis }
        } else {
            Op::Softmax { x: self.id, axis }
        };
        Ok(self.graph.push(value, req, op))
    }

    fn reduce(
        self,
        axes: &[usize],
        keepdims: bool,
        mean: bool,
        name: &'static str,
    ) -> Result<Var<'g, E>> {
        let nodes = self.graph.nodes.borrow();
        let shape = nodes[self.id].value.shape().to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        for &a in &axes {
            if a >= shape.len() {
                return Err(TensorError::InvalidAxis {
                    op: name,
                    axis: a,
                    rank: shape.len(),
                });
            }
        }
        if axes.is_empty() {
            axes = (0..shape.len()).collect();
        }
        let out_shape = reduced_out_shape(&shape, &axes, keepdims);
        let strides = reduction_strides(&shape, &axes);
        let mut data = vec![E::ZERO; out_shape.iter().product()];
        {
            let xv = nodes[self.id].value.data();
            let step = if shape.is_empty() {
                1
            } else {
                strides[shape.len() - 1]
            };
            let mut base = 0usize;
            for_each_run(&shape, [&strides], |[o], len| {
                let xs = &xv[base..base + len];
                if step == 1 {
                    for (d, &x) in data[o..o + len].iter_mut().zip(xs) {
                        *d += x;
                    }
                } else {
                    let mut acc = E::ZERO;
                    for &x in xs {
                        acc += x;
                    }
                    data[o] += acc;
                }
                base += len;
            });
        }
        if mean {
            let count: usize = axes.iter().map(|&d| shape[d]).product();
            let inv = E::ONE / E::from_f64(count as f64);
            for v in &mut data {
                *v = *v * inv;
            }
        }
        let req = nodes[self.id].requires_grad;
        drop(nodes);
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.graph.push(
            value,
            req,
            Op::Reduce {
                x: self.id,
                axes,
                mean,
            },
        ))
    }

    pub fn sum(self, axes: &[usize], keepdims: bool) -> Result<Var<'g, E>> {
        self.reduce(axes, keepdims, false, "sum")
    }

    pub fn mean(self, axes: &[usize], keepdims: bool) -> Result<Var<'g, E>> {
        self.reduce(axes, keepdims, true, "mean")
    }

    pub fn sum_all(self) -> Result<Var<'g, E>> {
        self.reduce(&[], false, false, "sum")
    }

    pub fn mean_all(self) -> Result<Var<'g, E>> {
        self.reduce(&[], false, true, "mean")
    }

    /// Variance along `axes` (population), keepdims.
    pub fn variance(self, axes: &[usize]) -> Result<Var<'g, E>> {
        let mu = self.mean(axes, true)?;
        let centered = self.sub(mu)?;
        centered.mul(centered)?.mean(axes, true)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, E>> {
        let (value, req) = {
            let nodes = self.graph.nodes.borrow();
            (
                nodes[self.id].value.clone().reshape(shape)?,
                nodes[self.id].requires_grad,
            )
        };
        Ok(self.graph.push(value, req, Op::Reshape { x: self.id }))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, E>> {
        let nodes = self.graph.nodes.borrow();
        let shape = nodes[self.id].value.shape().to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::InvalidShape {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of rank {rank}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let x_strides = natural_strides(&shape);
        let mapped: Vec<usize> = perm.iter().map(|&p| x_strides[p]).collect();
        let mut data = vec![E::ZERO; nodes[self.id].value.numel()];
        {
            let xv = nodes[self.id].value.data();
            for_each_offset(&out_shape, [&mapped], |i, [o]| {
                data[i] = xv[o];
            });
        }
        let req = nodes[self.id].requires_grad;
        drop(nodes);
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.graph.push(
            value,
            req,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(self, d0: usize, d1: usize) -> Result<Var<'g, E>> {
        let rank = self.shape().len();
        if d0 >= rank || d1 >= rank {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: d0.max(d1),
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(&perm)
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, E>> {
        let nodes = self.graph.nodes.borrow();
        let shape = nodes[self.id].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                detail: format!(
                    "range {start}..{} exceeds axis {axis} of {shape:?}",
                    start + len
                ),
            });
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![E::ZERO; outer * len * inner];
        {
            let xv = nodes[self.id].value.data();
            let block = len * inner;
            for o in 0..outer {
                let src = o * full * inner + start * inner;
                data[o * block..(o + 1) * block].copy_from_slice(&xv[src..src + block]);
            }
        }
        let req = nodes[self.id].requires_grad;
        drop(nodes);
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.graph.push(
            value,
            req,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Nearest-neighbour resize over the trailing two axes; identity when
    /// sizes already match. Source index is `floor(dst * src / out)`.
    pub fn resize_nearest(self, oh: usize, ow: usize) -> Result<Var<'g, E>> {
        let nodes = self.graph.nodes.borrow();
        let shape = nodes[self.id].value.shape().to_vec();
        let rank = shape.len();
        if rank < 2 || oh == 0 || ow == 0 {
            return Err(TensorError::InvalidShape {
                op: "resize_nearest",
                detail: format!("need rank >= 2 and positive target, got {shape:?} -> ({oh},{ow})"),
            });
        }
        let (h, w) = (shape[rank - 2], shape[rank - 1]);
        let lead: usize = shape[..rank - 2].iter().product();
        let mut out_shape = shape.clone();
        out_shape[rank - 2] = oh;
        out_shape[rank - 1] = ow;
        let mut data = vec![E::ZERO; lead * oh * ow];
        {
            let xv = nodes[self.id].value.data();
            for l in 0..lead {
                for oy in 0..oh {
                    let sy = oy * h / oh;
                    for ox in 0..ow {
                        let sx = ox * w / ow;
                        data[(l * oh + oy) * ow + ox] = xv[(l * h + sy) * w + sx];
                    }
                }
            }
        }
        let req = nodes[self.id].requires_grad;
        drop(nodes);
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self
            .graph
            .push(value, req, Op::ResizeNearest2d { x: self.id }))
    }

    /// 2x2 stride-2 average pool over the trailing two axes (floor semantics;
    /// a trailing odd row/column is dropped).
    pub fn avg_pool2(self) -> Result<Var<'g, E>> {
        let nodes = self.graph.nodes.borrow();
        let shape = nodes[self.id].value.shape().to_vec();
        let rank = shape.len();
        if rank < 2 || shape[rank - 2] < 2 || shape[rank - 1] < 2 {
            return Err(TensorError::InvalidShape {
                op: "avg_pool2",
                detail: format!("trailing axes must be >= 2, got {shape:?}"),
            });
        }
        let (h, w) = (shape[rank - 2], shape[rank - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let lead: usize = shape[..rank - 2].iter().product();
        let mut out_shape = shape.clone();
        out_shape[rank - 2] = oh;
        out_shape[rank - 1] = ow;
        let quarter = E::from_f64(0.25);
        let mut data = vec![E::ZERO; lead * oh * ow];
        {
            let xv = nodes[self.id].value.data();
            for l in 0..lead {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = (l * h + oy * 2) * w + ox * 2;
                        data[(l * oh + oy) * ow + ox] =
                            (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]) * quarter;
                    }
                }
            }
        }
        let req = nodes[self.id].requires_grad;
        drop(nodes);
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.graph.push(value, req, Op::AvgPool2 { x: self.id }))
    }

    /// (x - mean) / sqrt(var + eps) * gain + bias over `axes`.
    /// `gain`/`bias` must broadcast against x.
    pub fn layer_norm(
        self,
        axes: &[usize],
        gain: Var<'g, E>,
        bias: Var<'g, E>,
        eps: f64,
    ) -> Result<Var<'g, E>> {
        let mu = self.mean(axes, true)?;
        let centered = self.sub(mu)?;
        let var = centered.mul(centered)?.mean(axes, true)?;
        let denom = var.affine(1.0, eps)?.sqrt();
        centered.div(denom)?.mul(gain)?.add(bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = x.mul(x).unwrap();
        let loss = sq.sum_all().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]));
        let loss = x.sum_all().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }

    #[test]
    fn matmul_identity() {
        let g: Graph<f64> = Graph::new();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.set(&[i, i], 1.0);
        }
        let m = Tensor::from_vec(vec![3, 2], (0..6).map(|v| v as f64).collect()).unwrap();
        let a = g.constant(eye);
        let b = g.constant(m.clone());
        let out = a.matmul(b).unwrap();
        assert_eq!(out.value().data(), m.data());
    }

    #[test]
    fn matmul_hand_sum() {
        let g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let out = a.matmul(b).unwrap();
        assert_eq!(out.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = a.matmul(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap());
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let big = g.constant(Tensor::from_vec(vec![2], vec![1000.0, 1000.0]).unwrap());
        let y = big.softmax(0).unwrap().value();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = x.softmax(0).unwrap().value();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (got, v) in y.data().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((got - v.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_and_concat_basics() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![2], vec![-1.0, 2.0]).unwrap());
        assert_eq!(x.relu().value().data(), &[0.0, 2.0]);
        let a = g.constant(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::from_vec(vec![1], vec![3.0]).unwrap());
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::full(&[4], 3.0));
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = x.layer_norm(&[0], gain, bias, 1e-5).unwrap().value();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn reshape_transpose_roundtrip_bitwise() {
        let g: Graph<f64> = Graph::new();
        let t = Tensor::from_vec(vec![3, 4], (0..12).map(|v| v as f64 * 0.37).collect()).unwrap();
        let x = g.constant(t.clone());
        let r = x.reshape(&[4, 3]).unwrap().reshape(&[3, 4]).unwrap();
        assert_eq!(r.value().data(), t.data());
        let p = x.transpose(0, 1).unwrap().transpose(0, 1).unwrap();
        assert_eq!(p.value().data(), t.data());
    }

    #[test]
    fn conv2d_identity_and_constant_field() {
        let g: Graph<f64> = Graph::new();
        let x = g
            .constant(Tensor::from_vec(vec![1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap());
        let k = g.constant(Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = x.conv2d(k, Padding::Same, 1).unwrap();
        assert_eq!(y.value().data(), x.value().data());

        let c = g.constant(Tensor::full(&[1, 5, 5], 2.0));
        let ones = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = c.conv2d(ones, Padding::Same, 1).unwrap().value();
        // interior of a same-padded all-ones 3x3 kernel on constant 2 is 18
        assert_eq!(y.at(&[0, 2, 2]), 18.0);
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2]));
        let k = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(x.conv2d(k, Padding::Valid, 1).is_err());
    }

    #[test]
    fn conv3d_identity_and_temporal_sum() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(
            Tensor::from_vec(vec![1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap(),
        );
        let k = g.constant(Tensor::from_vec(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap());
        let y = x.conv3d(k, Padding::Same).unwrap();
        assert_eq!(y.value().data(), x.value().data());

        let c = g.constant(Tensor::full(&[1, 5, 2, 2], 3.0));
        let ones = g.constant(Tensor::full(&[1, 1, 3, 1, 1], 1.0));
        let y = c.conv3d(ones, Padding::Same).unwrap().value();
        // interior along time: 3 frames of 3s
        assert_eq!(y.at(&[0, 2, 0, 0]), 9.0);
    }

    #[test]
    fn narrow_selects_range() {
        let g: Graph<f64> = Graph::new();
        let x =
            g.constant(Tensor::from_vec(vec![2, 4], (0..8).map(|v| v as f64).collect()).unwrap());
        let y = x.narrow(1, 1, 2).unwrap().value();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn resize_nearest_identity_and_upsample() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let same = x.resize_nearest(2, 2).unwrap();
        assert_eq!(same.value().data(), x.value().data());
        let up = x.resize_nearest(4, 4).unwrap().value();
        assert_eq!(up.at(&[0, 0, 0]), 1.0);
        assert_eq!(up.at(&[0, 1, 1]), 1.0);
        assert_eq!(up.at(&[0, 2, 2]), 4.0);
        assert_eq!(up.at(&[0, 3, 0]), 3.0);
    }

    #[test]
    fn broadcast_add_bias_per_channel() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2, 2]));
        let b = g.constant(Tensor::from_vec(vec![2, 1, 1], vec![1.0, 2.0]).unwrap());
        let y = x.add(b).unwrap().value();
        assert_eq!(y.at(&[0, 1, 1]), 1.0);
        assert_eq!(y.at(&[1, 0, 0]), 2.0);
    }

    #[test]
    fn backward_deterministic_repeat() {
        let run = || {
            let g: Graph<f32> = Graph::new();
            let mut rng = crate::rng::Rng::new(9);
            let x = g.leaf(Tensor::rand_uniform(&[4, 4], -1.0, 1.0, &mut rng));
            let w = g.leaf(Tensor::rand_uniform(&[4, 4], -1.0, 1.0, &mut rng));
            let y = x.matmul(w).unwrap().relu().softmax(1).unwrap();
            let loss = y.mul(y).unwrap().sum_all().unwrap();
            g.backward(loss).unwrap();
            (x.grad().unwrap(), w.grad().unwrap())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }
}
