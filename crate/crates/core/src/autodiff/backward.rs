use std::collections::{HashMap, HashSet};

use super::ops::{axis_extents, matmul_raw, row_norm, transpose_raw, ReduceOp, NORM_EPS};
use super::{Op, Result, Tensor, TensorError};

const SQRT_GRAD_EPS: f64 = 1e-12;

impl Tensor {
    /// Back-propagates from this rank-0 loss into every reachable gradient
    /// leaf. Leaf gradients accumulate across calls until
    /// [`Tensor::zero_grad`] is called.
    pub fn backward(&self) -> Result<()> {
        if self.rank() != 0 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = topological_order(self);
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match node.op() {
                None => node.accumulate_grad(&g),
                Some(op) => {
                    for (input, gi) in input_grads(op, node, &g) {
                        if !input.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.id(), gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order over gradient-carrying nodes reachable from `root`; each node
/// appears once, after all of its inputs.
pub(crate) fn topological_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.op() {
            for input in op.inputs() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

/// Reduces a broadcast gradient back onto a rank-0 operand.
fn unbroadcast(operand: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if operand.rank() == 0 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

/// Value of `t` at flat output position `i`, honouring rank-0 broadcast.
fn bval(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn input_grads<'a>(op: &'a Op, out: &Tensor, g: &[f64]) -> Vec<(&'a Tensor, Vec<f64>)> {
    let y = out.data();
    match op {
        Op::MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut res = Vec::with_capacity(2);
            if a.requires_grad() {
                let bt = transpose_raw(b.data(), k, n);
                res.push((a, matmul_raw(g, &bt, m, n, k)));
            }
            if b.requires_grad() {
                let at = transpose_raw(a.data(), m, k);
                res.push((b, matmul_raw(&at, g, k, m, n)));
            }
            res
        }
        Op::Transpose(a) => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            vec![(a, transpose_raw(g, c, r))]
        }
        Op::Add(a, b) => vec![(a, unbroadcast(a, g.to_vec())), (b, unbroadcast(b, g.to_vec()))],
        Op::Sub(a, b) => vec![
            (a, unbroadcast(a, g.to_vec())),
            (b, unbroadcast(b, g.iter().map(|v| -v).collect())),
        ],
        Op::Mul(a, b) => {
            let ga = g.iter().enumerate().map(|(i, gi)| gi * bval(b, i)).collect();
            let gb = g.iter().enumerate().map(|(i, gi)| gi * bval(a, i)).collect();
            vec![(a, unbroadcast(a, ga)), (b, unbroadcast(b, gb))]
        }
        Op::Div(a, b) => {
            let ga = g.iter().enumerate().map(|(i, gi)| gi / bval(b, i)).collect();
            let gb = g.iter().enumerate().map(|(i, gi)| -gi * y[i] / bval(b, i)).collect();
            vec![(a, unbroadcast(a, ga)), (b, unbroadcast(b, gb))]
        }
        Op::Exp(a) => vec![(a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect())],
        Op::Log(a) => vec![(a, g.iter().zip(a.data()).map(|(gi, x)| gi / x).collect())],
        Op::Neg(a) => vec![(a, g.iter().map(|v| -v).collect())],
        Op::Sqrt(a) => vec![(
            a,
            g.iter()
                .zip(a.data())
                .map(|(gi, x)| gi * 0.5 / (x + SQRT_GRAD_EPS).sqrt())
                .collect(),
        )],
        Op::Relu(a) => vec![(
            a,
            g.iter()
                .zip(a.data())
                .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                .collect(),
        )],
        Op::MaxScalar(a, floor) => vec![(
            a,
            g.iter()
                .zip(a.data())
                .map(|(gi, &x)| if x > *floor { *gi } else { 0.0 })
                .collect(),
        )],
        Op::Scale(a, c) => vec![(a, g.iter().map(|v| v * c).collect())],
        Op::Reduce {
            input,
            op,
            axis,
            argmax,
        } => {
            let mut gi = vec![0.0; input.numel()];
            let (outer, len, inner) = match axis {
                None => (1, input.numel(), 1),
                Some(ax) => axis_extents(input.shape(), *ax),
            };
            match op {
                ReduceOp::Max => {
                    for (&src, gv) in argmax.iter().zip(g) {
                        gi[src] += gv;
                    }
                }
                ReduceOp::Sum | ReduceOp::Mean => {
                    let f = if *op == ReduceOp::Mean { 1.0 / len as f64 } else { 1.0 };
                    for o in 0..outer {
                        for i in 0..inner {
                            let gv = g[o * inner + i] * f;
                            for k in 0..len {
                                gi[o * len * inner + k * inner + i] = gv;
                            }
                        }
                    }
                }
            }
            vec![(input, gi)]
        }
        Op::SoftmaxRows(a, t) => {
            let cols = a.shape()[1];
            let mut gi = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
                let dot: f64 = gr.iter().zip(yr).map(|(x, z)| x * z).sum();
                gi.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot) / t));
            }
            vec![(a, gi)]
        }
        Op::LogSoftmaxRows(a, t) => {
            let cols = a.shape()[1];
            let mut gi = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
                let total: f64 = gr.iter().sum();
                gi.extend(gr.iter().zip(yr).map(|(gv, lp)| (gv - lp.exp() * total) / t));
            }
            vec![(a, gi)]
        }
        Op::NarrowCols(a, start) => {
            let cols = a.shape()[1];
            let len = out.shape()[1];
            let mut gi = vec![0.0; a.numel()];
            for (r, gr) in g.chunks(len).enumerate() {
                gi[r * cols + start..r * cols + start + len].copy_from_slice(gr);
            }
            vec![(a, gi)]
        }
        Op::NormalizeRows(a) => {
            let cols = a.shape()[1];
            let mut gi = Vec::with_capacity(g.len());
            for ((gr, yr), xr) in g.chunks(cols).zip(y.chunks(cols)).zip(a.data().chunks(cols)) {
                let n = row_norm(xr);
                if n > NORM_EPS {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    gi.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * dot) / n));
                } else {
                    gi.extend(gr.iter().map(|gv| gv / NORM_EPS));
                }
            }
            vec![(a, gi)]
        }
        Op::PairwiseSqDist(x, z) => {
            let d = x.shape()[1];
            let m = z.shape()[0];
            let mut gx = vec![0.0; x.numel()];
            let mut gz = vec![0.0; z.numel()];
            for (i, xr) in x.data().chunks(d).enumerate() {
                for (j, zr) in z.data().chunks(d).enumerate() {
                    let w = 2.0 * g[i * m + j];
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let diff = w * (xr[k] - zr[k]);
                        gx[i * d + k] += diff;
                        gz[j * d + k] -= diff;
                    }
                }
            }
            vec![(x, gx), (z, gz)]
        }
    }
}
