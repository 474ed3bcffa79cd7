//! Recorded computation graph for reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its output buffer and a
//! record of how it was produced. `backward` walks the nodes in reverse
//! creation order (a topological order by construction), accumulating
//! gradients into input nodes in a fixed, deterministic order.

use crate::error::{Error, Result};

use super::kernels;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, g: usize, m: usize, k: usize, n: usize },
    Permute { x: usize, axes: Vec<usize> },
    Reshape { x: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    StackDepth { xs: Vec<usize> },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Gelu { x: usize },
    Elu { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    CrossEntropy { logits: usize, targets: Vec<i64>, count: usize },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Op,
}

#[derive(Debug, Default)]
pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
}

impl TapeInner {
    pub fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    fn grad_or_zeros(&mut self, id: usize) -> &mut Vec<f64> {
        let len = self.nodes[id].data.len();
        self.nodes[id].grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn backward(&mut self, loss_id: usize) -> Result<()> {
        if self.nodes[loss_id].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss_id].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss_id].grad = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let g = self.nodes[id].grad.clone().unwrap();
            self.apply_backward(id, &op, &g);
        }
        Ok(())
    }

    fn wants_grad(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn apply_backward(&mut self, out: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.wants_grad(*a) {
                    let ga = self.grad_or_zeros(*a);
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.wants_grad(*b) {
                    let gb = self.grad_or_zeros(*b);
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.wants_grad(*a) {
                    let ga = self.grad_or_zeros(*a);
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.wants_grad(*b) {
                    let gb = self.grad_or_zeros(*b);
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants_grad(*a) {
                    let bv = self.nodes[*b].data.clone();
                    let ga = self.grad_or_zeros(*a);
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.wants_grad(*b) {
                    let av = self.nodes[*a].data.clone();
                    let gb = self.grad_or_zeros(*b);
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddBias { x, b } => {
                let d = self.nodes[*b].data.len();
                if self.wants_grad(*x) {
                    let gx = self.grad_or_zeros(*x);
                    for (dst, s) in gx.iter_mut().zip(g) {
                        *dst += s;
                    }
                }
                if self.wants_grad(*b) {
                    let gb = self.grad_or_zeros(*b);
                    for row in g.chunks_exact(d) {
                        for (dst, s) in gb.iter_mut().zip(row) {
                            *dst += s;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.wants_grad(*x) {
                    let gx = self.grad_or_zeros(*x);
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += c * s;
                    }
                }
            }
            Op::AddScalar { x } => {
                if self.wants_grad(*x) {
                    let gx = self.grad_or_zeros(*x);
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.wants_grad(*a) {
                    let bv = self.nodes[*b].data.clone();
                    let ga = self.grad_or_zeros(*a);
                    kernels::gemm_nt(g, &bv, ga, *m, *n, *k);
                }
                if self.wants_grad(*b) {
                    let av = self.nodes[*a].data.clone();
                    let gb = self.grad_or_zeros(*b);
                    kernels::gemm_tn(&av, g, gb, *m, *k, *n);
                }
            }
            Op::Bmm {
                a,
                b,
                g: groups,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants_grad(*a) {
                    let bv = self.nodes[*b].data.clone();
                    let ga = self.grad_or_zeros(*a);
                    for gi in 0..*groups {
                        kernels::gemm_nt(
                            &g[gi * m * n..(gi + 1) * m * n],
                            &bv[gi * k * n..(gi + 1) * k * n],
                            &mut ga[gi * m * k..(gi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.wants_grad(*b) {
                    let av = self.nodes[*a].data.clone();
                    let gb = self.grad_or_zeros(*b);
                    for gi in 0..*groups {
                        kernels::gemm_tn(
                            &av[gi * m * k..(gi + 1) * m * k],
                            &g[gi * m * n..(gi + 1) * m * n],
                            &mut gb[gi * k * n..(gi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Permute { x, axes } => {
                if self.wants_grad(*x) {
                    let in_shape = self.nodes[*x].shape.clone();
                    let out_shape = self.nodes[out].shape.clone();
                    let gx = self.grad_or_zeros(*x);
                    permute_accumulate(g, &out_shape, gx, &in_shape, axes);
                }
            }
            Op::Reshape { x } => {
                if self.wants_grad(*x) {
                    let gx = self.grad_or_zeros(*x);
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.wants_grad(*x) {
                    let cols = self.nodes[out].shape[1];
                    let gx = self.grad_or_zeros(*x);
                    for (i, &row) in idx.iter().enumerate() {
                        let src = &g[i * cols..(i + 1) * cols];
                        let dst = &mut gx[row * cols..(row + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::StackDepth { xs } => {
                let rows = self.nodes[out].shape[0];
                let depth = self.nodes[out].shape[1];
                let cols = self.nodes[out].shape[2];
                for (l, &x) in xs.iter().enumerate() {
                    if !self.wants_grad(x) {
                        continue;
                    }
                    let gx = self.grad_or_zeros(x);
                    for nrow in 0..rows {
                        let src = &g[(nrow * depth + l) * cols..(nrow * depth + l + 1) * cols];
                        let dst = &mut gx[nrow * cols..(nrow + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants_grad(*x) {
                    let y = self.nodes[out].data.clone();
                    let shape = self.nodes[out].shape.clone();
                    let gx = self.grad_or_zeros(*x);
                    let (outer, d, inner) = lane_dims(&shape, *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * d * inner + i;
                            let mut dot = 0.0;
                            for j in 0..d {
                                let off = base + j * inner;
                                dot += g[off] * y[off];
                            }
                            for j in 0..d {
                                let off = base + j * inner;
                                gx[off] += y[off] * (g[off] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.nodes[*x].data.clone();
                let gv = self.nodes[*gain].data.clone();
                let d = gv.len();
                let rows = xv.len() / d;

                if self.wants_grad(*bias) {
                    let gb = self.grad_or_zeros(*bias);
                    for row in g.chunks_exact(d) {
                        for (dst, s) in gb.iter_mut().zip(row) {
                            *dst += s;
                        }
                    }
                }
                // gain and x both need normalized inputs; recompute per row
                let needs_gain = self.wants_grad(*gain);
                let needs_x = self.wants_grad(*x);
                if needs_gain || needs_x {
                    let mut ggain = vec![0.0; if needs_gain { d } else { 0 }];
                    let mut gx_acc = vec![0.0; if needs_x { xv.len() } else { 0 }];
                    let mut xhat = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mu = xr.iter().sum::<f64>() / d as f64;
                        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for j in 0..d {
                            xhat[j] = (xr[j] - mu) * inv;
                        }
                        if needs_gain {
                            for j in 0..d {
                                ggain[j] += gr[j] * xhat[j];
                            }
                        }
                        if needs_x {
                            for j in 0..d {
                                dxhat[j] = gr[j] * gv[j];
                            }
                            let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dxhat_xhat =
                                dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            let dst = &mut gx_acc[r * d..(r + 1) * d];
                            for j in 0..d {
                                dst[j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                            }
                        }
                    }
                    if needs_gain {
                        let gg = self.grad_or_zeros(*gain);
                        for (dst, s) in gg.iter_mut().zip(&ggain) {
                            *dst += s;
                        }
                    }
                    if needs_x {
                        let gx = self.grad_or_zeros(*x);
                        for (dst, s) in gx.iter_mut().zip(&gx_acc) {
                            *dst += s;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.wants_grad(*x) {
                    let xv = self.nodes[*x].data.clone();
                    let gx = self.grad_or_zeros(*x);
                    for i in 0..gx.len() {
                        gx[i] += g[i] * kernels::gelu_grad_scalar(xv[i]);
                    }
                }
            }
            Op::Elu { x } => {
                if self.wants_grad(*x) {
                    let xv = self.nodes[*x].data.clone();
                    let gx = self.grad_or_zeros(*x);
                    for i in 0..gx.len() {
                        gx[i] += g[i] * kernels::elu_grad_scalar(xv[i]);
                    }
                }
            }
            Op::Sum { x } => {
                if self.wants_grad(*x) {
                    let gx = self.grad_or_zeros(*x);
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if self.wants_grad(*x) {
                    let gx = self.grad_or_zeros(*x);
                    let n = gx.len() as f64;
                    for d in gx.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                count,
            } => {
                if self.wants_grad(*logits) {
                    let lv = self.nodes[*logits].data.clone();
                    let vocab = self.nodes[*logits].shape[1];
                    let coef = g[0] / *count as f64;
                    let gl = self.grad_or_zeros(*logits);
                    let mut probs = vec![0.0; vocab];
                    for (r, &t) in targets.iter().enumerate() {
                        if t < 0 {
                            continue;
                        }
                        probs.copy_from_slice(&lv[r * vocab..(r + 1) * vocab]);
                        kernels::softmax_lane(&mut probs);
                        let dst = &mut gl[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            dst[j] += coef * (probs[j] - if j as i64 == t { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
        }
    }
}

/// Decompose `shape` around `axis` into (outer, lane length, inner).
pub(crate) fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let d = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, d, inner)
}

/// Map each element of the permuted output back onto the input layout.
/// `forward` fills `dst` (output layout) from `src` (input layout); the
/// backward pass calls this with gradients and accumulate = true.
pub(crate) fn permute_forward(
    src: &[f64],
    in_shape: &[usize],
    dst: &mut [f64],
    axes: &[usize],
) {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut coord = vec![0usize; rank];
    for (flat, val) in dst.iter_mut().enumerate() {
        let mut rem = flat;
        for i in (0..rank).rev() {
            coord[i] = rem % out_shape[i];
            rem /= out_shape[i];
        }
        let mut src_flat = 0;
        for i in 0..rank {
            src_flat += coord[i] * in_strides[axes[i]];
        }
        *val = src[src_flat];
    }
}

fn permute_accumulate(
    g_out: &[f64],
    out_shape: &[usize],
    g_in: &mut [f64],
    in_shape: &[usize],
    axes: &[usize],
) {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let mut coord = vec![0usize; rank];
    for (flat, val) in g_out.iter().enumerate() {
        let mut rem = flat;
        for i in (0..rank).rev() {
            coord[i] = rem % out_shape[i];
            rem /= out_shape[i];
        }
        let mut src_flat = 0;
        for i in 0..rank {
            src_flat += coord[i] * in_strides[axes[i]];
        }
        g_in[src_flat] += val;
    }
}
