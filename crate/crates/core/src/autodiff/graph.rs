//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Every builder method evaluates its node immediately and records the
//! operation, so the node list is already in topological order. `backward`
//! walks it once in reverse. Gradients are only propagated into nodes that
//! depend on a parameter; constant subgraphs (frozen networks, cached
//! prefix states, shocks) cost nothing on the way back.

use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Powf(NodeId, f64),
    Square(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    ClampMin(NodeId, f64),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MatMul(NodeId, NodeId),
    SumCols(NodeId),
    MeanRows(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    BroadcastRows(NodeId),
    GroupedSoftmax {
        raw: NodeId,
        scales: NodeId,
        groups: Arc<[Vec<usize>]>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Powf(..) => "powf",
            Op::Square(..) => "square",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::ClampMin(..) => "clamp_min",
            Op::Linear { .. } => "linear",
            Op::MatMul(..) => "matmul",
            Op::SumCols(..) => "sum_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::GroupedSoftmax { .. } => "grouped_softmax",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Probability mass mixed uniformly into every softmax group so outputs
/// stay strictly positive even when `exp` underflows.
pub const SOFTMAX_FLOOR: f64 = 1e-15;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Reverse-mode result: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn broadcast(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn bidx(dims: (usize, usize), i: usize, j: usize) -> usize {
    let r = if dims.0 == 1 { 0 } else { i };
    let c = if dims.1 == 1 { 0 } else { j };
    r * dims.1 + c
}

fn binary_map(a: &Tensor, b: &Tensor, out: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor {
    let ad = a.dims().unwrap();
    let bd = b.dims().unwrap();
    let mut data = Vec::with_capacity(out.0 * out.1);
    if ad == out && bd == out {
        data.extend(a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
    } else {
        let (av, bv) = (a.data(), b.data());
        for i in 0..out.0 {
            for j in 0..out.1 {
                data.push(f(av[bidx(ad, i, j)], bv[bidx(bd, i, j)]));
            }
        }
    }
    Tensor::matrix(out.0, out.1, data).unwrap()
}

/// Sum a broadcast gradient back down to `target` dims.
fn reduce_to(grad: Tensor, target: (usize, usize)) -> Tensor {
    let gd = grad.dims().unwrap();
    if gd == target {
        return grad;
    }
    let mut out = Tensor::zeros(target.0, target.1);
    let gv = grad.data();
    let ov = out.data_mut();
    for i in 0..gd.0 {
        for j in 0..gd.1 {
            ov[bidx(target, i, j)] += gv[i * gd.1 + j];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes. Ids issued before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn label(&self, id: NodeId) -> String {
        format!("node #{} ({})", id.0, self.nodes[id.0].op.name())
    }

    fn dims(&self, id: NodeId) -> Result<(usize, usize), AutodiffError> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| AutodiffError::Usage(format!("unknown node #{}", id.0)))?
            .value
            .dims()
            .ok_or_else(|| AutodiffError::Dimension {
                node: self.label(id),
                detail: "rank > 2 is not supported".into(),
            })
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, false)
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        self.input(Tensor::scalar(v))
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, value, true)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        make: fn(NodeId, NodeId) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, AutodiffError> {
        let (ad, bd) = (self.dims(a)?, self.dims(b)?);
        let out = broadcast(ad, bd).ok_or_else(|| AutodiffError::Dimension {
            node: format!("{} with {}", self.label(a), self.label(b)),
            detail: format!("cannot broadcast {ad:?} against {bd:?}"),
        })?;
        let value = binary_map(self.value(a), self.value(b), out, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(make(a, b), value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Op::Div, |x, y| x / y)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(op, value, rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn offset(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, Op::Offset(a), |x| x + k)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        self.unary(a, Op::ClampMin(a, lo), |x| if x > lo { x } else { lo })
    }

    /// `x * w^T + b` for `x: [r, in]`, `w: [out, in]`, `b: [1, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (xr, xc) = self.dims(x)?;
        let (wr, wc) = self.dims(w)?;
        let bd = self.dims(b)?;
        if xc != wc {
            return Err(AutodiffError::Dimension {
                node: self.label(x),
                detail: format!("input width {xc} does not match layer input {wc}"),
            });
        }
        if bd != (1, wr) {
            return Err(AutodiffError::Dimension {
                node: self.label(b),
                detail: format!("bias shape {bd:?} does not match layer output {wr}"),
            });
        }
        let mut out = Vec::with_capacity(xr * wr);
        let bias = self.value(b).data();
        for _ in 0..xr {
            out.extend_from_slice(bias);
        }
        gemm(
            xr,
            xc,
            wr,
            self.value(x).data(),
            (xc as isize, 1),
            self.value(w).data(),
            (1, wc as isize),
            &mut out,
            true,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Linear { x, w, b }, Tensor::matrix(xr, wr, out).unwrap(), rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(AutodiffError::Dimension {
                node: format!("{} with {}", self.label(a), self.label(b)),
                detail: format!("inner dimensions {k} and {k2} differ"),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out).unwrap(), rg))
    }

    /// Row-wise sum: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.dims(a)?;
        let v = self.value(a).data();
        let data = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::SumCols(a), Tensor::matrix(r, 1, data).unwrap(), rg))
    }

    /// Column-wise mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.dims(a)?;
        let v = self.value(a).data();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += v[i * c + j];
            }
        }
        data.iter_mut().for_each(|x| *x /= r as f64);
        let rg = self.rg(a);
        Ok(self.push(Op::MeanRows(a), Tensor::matrix(1, c, data).unwrap(), rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.dims(a)?;
        if start + len > c {
            return Err(AutodiffError::Dimension {
                node: self.label(a),
                detail: format!("column slice {start}..{} out of {c}", start + len),
            });
        }
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols(a, start), Tensor::matrix(r, len, data).unwrap(), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let first = *parts
            .first()
            .ok_or_else(|| AutodiffError::Usage("concat of zero tensors".into()))?;
        let r = self.dims(first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pr != r {
                return Err(AutodiffError::Dimension {
                    node: self.label(p),
                    detail: format!("row count {pr} differs from {r}"),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::matrix(r, total, data).unwrap(),
            rg,
        ))
    }

    /// Repeat a `[1, c]` row `rows` times.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.dims(a)?;
        if r != 1 {
            return Err(AutodiffError::Dimension {
                node: self.label(a),
                detail: format!("broadcast_rows expects one row, got {r}"),
            });
        }
        let v = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(&v);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::BroadcastRows(a), Tensor::matrix(rows, c, data).unwrap(), rg))
    }

    /// Per-group softmax scaled by a per-group factor.
    ///
    /// `groups` must partition the columns of `raw`; `scales` is `[r, G]`
    /// or `[1, G]`. Each group of each row sums to its scale. A floor of
    /// [`SOFTMAX_FLOOR`] keeps every share strictly positive.
    pub fn grouped_softmax(
        &mut self,
        raw: NodeId,
        scales: NodeId,
        groups: Arc<[Vec<usize>]>,
    ) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.dims(raw)?;
        validate_groups(&groups, c)?;
        let sd = self.dims(scales)?;
        if sd.1 != groups.len() || (sd.0 != r && sd.0 != 1) {
            return Err(AutodiffError::Dimension {
                node: self.label(scales),
                detail: format!("scales {sd:?} incompatible with {r} rows x {} groups", groups.len()),
            });
        }
        let rv = self.value(raw).data();
        let sv = self.value(scales).data();
        let mut out = vec![0.0; r * c];
        let mut soft = Vec::new();
        for i in 0..r {
            let row = &rv[i * c..(i + 1) * c];
            for (gi, g) in groups.iter().enumerate() {
                let s = sv[bidx(sd, i, gi)];
                softmax_into(row, g, &mut soft);
                let floor = SOFTMAX_FLOOR / g.len() as f64;
                for (k, &col) in g.iter().enumerate() {
                    out[i * c + col] = s * ((1.0 - SOFTMAX_FLOOR) * soft[k] + floor);
                }
            }
        }
        let rg = self.rg(raw) || self.rg(scales);
        Ok(self.push(
            Op::GroupedSoftmax { raw, scales, groups },
            Tensor::matrix(r, c, out).unwrap(),
            rg,
        ))
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape).
    pub fn backward(&self, output: NodeId, seed: Tensor) -> Result<Gradients, AutodiffError> {
        let node = self.nodes.get(output.0).ok_or_else(|| {
            AutodiffError::Usage(format!(
                "backward from node #{} which has no recorded forward pass",
                output.0
            ))
        })?;
        if node.value.shape() != seed.shape() && node.value.dims() != seed.dims() {
            return Err(AutodiffError::Dimension {
                node: self.label(output),
                detail: format!(
                    "seed shape {:?} differs from output shape {:?}",
                    seed.shape(),
                    node.value.shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        let (sr, sc) = node.value.dims().unwrap();
        grads[output.0] = Some(Tensor::matrix(sr, sc, seed.into_data()).unwrap());

        for idx in (0..=output.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let od = out.dims().unwrap();
        let send = |id: NodeId, g: Tensor, grads: &mut [Option<Tensor>]| {
            if self.rg(id) {
                accumulate(&mut grads[id.0], g);
            }
        };
        match op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                for &x in [a, b] {
                    if self.rg(x) {
                        let d = self.value(x).dims().unwrap();
                        send(x, reduce_to(gout.clone(), d), grads);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let d = self.value(*a).dims().unwrap();
                    send(*a, reduce_to(gout.clone(), d), grads);
                }
                if self.rg(*b) {
                    let d = self.value(*b).dims().unwrap();
                    send(*b, reduce_to(gout.map(|v| -v), d), grads);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let g = binary_map(gout, bv, od, |g, y| g * y);
                    send(*a, reduce_to(g, av.dims().unwrap()), grads);
                }
                if self.rg(*b) {
                    let g = binary_map(gout, av, od, |g, x| g * x);
                    send(*b, reduce_to(g, bv.dims().unwrap()), grads);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let g = binary_map(gout, bv, od, |g, y| g / y);
                    send(*a, reduce_to(g, av.dims().unwrap()), grads);
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out / b
                    let q = binary_map(gout, out, od, |g, o| -g * o);
                    let g = binary_map(&q, bv, od, |x, y| x / y);
                    send(*b, reduce_to(g, bv.dims().unwrap()), grads);
                }
            }
            Op::Neg(a) => send(*a, gout.map(|v| -v), grads),
            Op::Scale(a, k) => {
                let k = *k;
                send(*a, gout.map(|v| v * k), grads)
            }
            Op::Offset(a) => send(*a, gout.clone(), grads),
            Op::Exp(a) => send(*a, zip(gout, out, |g, o| g * o), grads),
            Op::Ln(a) => send(*a, zip(gout, self.value(*a), |g, x| g / x), grads),
            Op::Sqrt(a) => send(*a, zip(gout, out, |g, o| 0.5 * g / o), grads),
            Op::Powf(a, p) => {
                let p = *p;
                send(*a, zip(gout, self.value(*a), |g, x| g * p * x.powf(p - 1.0)), grads)
            }
            Op::Square(a) => send(*a, zip(gout, self.value(*a), |g, x| 2.0 * g * x), grads),
            Op::Relu(a) => send(
                *a,
                zip(gout, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
                grads,
            ),
            Op::Sigmoid(a) => send(*a, zip(gout, out, |g, o| g * o * (1.0 - o)), grads),
            Op::ClampMin(a, lo) => {
                let lo = *lo;
                send(
                    *a,
                    zip(gout, self.value(*a), |g, x| if x > lo { g } else { 0.0 }),
                    grads,
                )
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (r, inw) = xv.dims().unwrap();
                let outw = wv.rows();
                if self.rg(*x) {
                    let mut dx = vec![0.0; r * inw];
                    gemm(
                        r,
                        outw,
                        inw,
                        gout.data(),
                        (outw as isize, 1),
                        wv.data(),
                        (inw as isize, 1),
                        &mut dx,
                        false,
                    );
                    send(*x, Tensor::matrix(r, inw, dx).unwrap(), grads);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; outw * inw];
                    gemm(
                        outw,
                        r,
                        inw,
                        gout.data(),
                        (1, outw as isize),
                        xv.data(),
                        (inw as isize, 1),
                        &mut dw,
                        false,
                    );
                    send(*w, Tensor::matrix(outw, inw, dw).unwrap(), grads);
                }
                if self.rg(*b) {
                    send(*b, reduce_to(gout.clone(), (1, outw)), grads);
                }
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims().unwrap();
                let n = bv.cols();
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        gout.data(),
                        (n as isize, 1),
                        bv.data(),
                        (1, n as isize),
                        &mut da,
                        false,
                    );
                    send(*a, Tensor::matrix(m, k, da).unwrap(), grads);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        (1, k as isize),
                        gout.data(),
                        (n as isize, 1),
                        &mut db,
                        false,
                    );
                    send(*b, Tensor::matrix(k, n, db).unwrap(), grads);
                }
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(*a).dims().unwrap();
                let gv = gout.data();
                let mut d = Vec::with_capacity(r * c);
                for &gi in gv.iter().take(r) {
                    d.extend(std::iter::repeat_n(gi, c));
                }
                send(*a, Tensor::matrix(r, c, d).unwrap(), grads);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).dims().unwrap();
                let gv = gout.data();
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend(gv.iter().map(|g| g / r as f64));
                }
                send(*a, Tensor::matrix(r, c, d).unwrap(), grads);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).dims().unwrap();
                let len = od.1;
                let mut d = Tensor::zeros(r, c);
                let dv = d.data_mut();
                let gv = gout.data();
                for i in 0..r {
                    dv[i * c + start..i * c + start + len].copy_from_slice(&gv[i * len..(i + 1) * len]);
                }
                send(*a, d, grads);
            }
            Op::ConcatCols(parts) => {
                let r = od.0;
                let gv = gout.data();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&gv[i * od.1 + offset..i * od.1 + offset + w]);
                        }
                        send(p, Tensor::matrix(r, w, d).unwrap(), grads);
                    }
                    offset += w;
                }
            }
            Op::BroadcastRows(a) => send(*a, reduce_to(gout.clone(), (1, od.1)), grads),
            Op::GroupedSoftmax { raw, scales, groups } => {
                let rv = self.value(*raw).data();
                let sdims = self.value(*scales).dims().unwrap();
                let sv = self.value(*scales).data();
                let (r, c) = od;
                let gv = gout.data();
                let mut draw = vec![0.0; r * c];
                let mut dscale = Tensor::zeros(sdims.0, sdims.1);
                let mut soft = Vec::new();
                for i in 0..r {
                    let row = &rv[i * c..(i + 1) * c];
                    for (gi, g) in groups.iter().enumerate() {
                        let s = sv[bidx(sdims, i, gi)];
                        softmax_into(row, g, &mut soft);
                        let dot: f64 = g.iter().zip(&soft).map(|(&col, &p)| p * gv[i * c + col]).sum();
                        let floor = SOFTMAX_FLOOR / g.len() as f64;
                        let mut ds = 0.0;
                        for (k, &col) in g.iter().enumerate() {
                            let go = gv[i * c + col];
                            draw[i * c + col] = s * (1.0 - SOFTMAX_FLOOR) * soft[k] * (go - dot);
                            ds += go * ((1.0 - SOFTMAX_FLOOR) * soft[k] + floor);
                        }
                        dscale.data_mut()[bidx(sdims, i, gi)] += ds;
                    }
                }
                if self.rg(*raw) {
                    send(*raw, Tensor::matrix(r, c, draw).unwrap(), grads);
                }
                if self.rg(*scales) {
                    send(*scales, dscale, grads);
                }
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = a.dims().unwrap();
    Tensor::matrix(r, c, a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(row: &[f64], group: &[usize], out: &mut Vec<f64>) {
    out.clear();
    let m = group.iter().map(|&c| row[c]).fold(f64::NEG_INFINITY, f64::max);
    out.extend(group.iter().map(|&c| (row[c] - m).exp()));
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
}

/// Checks that `groups` is a partition of `0..width` into non-empty sets.
pub fn validate_groups(groups: &[Vec<usize>], width: usize) -> Result<(), AutodiffError> {
    let mut seen = vec![false; width];
    for (gi, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(AutodiffError::Config(format!("softmax group {gi} is empty")));
        }
        for &c in g {
            if c >= width || seen[c] {
                return Err(AutodiffError::Config(format!(
                    "softmax groups do not partition 0..{width} (column {c})"
                )));
            }
            seen[c] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(AutodiffError::Config(format!(
            "softmax groups leave column {missing} uncovered"
        )));
    }
    Ok(())
}

/// Pairwise sum of equally sized vectors. The tree shape depends only on
/// the number of parts, so the result is independent of how they were
/// produced.
pub fn tree_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    if parts.is_empty() {
        return Vec::new();
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += *y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient_of_scalar_product() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(2.0));
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(w, x).unwrap();
        let grads = g.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[0.0, -1.0, 2.0]));
        let y = g.relu(x);
        let grads = g.backward(y, Tensor::row(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_on_missing_node_is_a_usage_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let y = g.square(x);
        g.reset();
        assert!(matches!(
            g.backward(y, Tensor::scalar(1.0)),
            Err(AutodiffError::Usage(_))
        ));
    }

    #[test]
    fn broadcast_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(2, 3));
        let b = g.input(Tensor::zeros(3, 2));
        match g.add(a, b) {
            Err(AutodiffError::Dimension { node, .. }) => assert!(node.contains("#0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grouped_softmax_examples() {
        let groups: Arc<[Vec<usize>]> = vec![vec![0, 1, 2]].into();
        let mut g = Graph::new();
        let raw = g.input(Tensor::row(&[0.0, 0.0, 0.0]));
        let s = g.input(Tensor::row(&[1.0]));
        let y = g.grouped_softmax(raw, s, groups).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let groups: Arc<[Vec<usize>]> = vec![vec![0, 1], vec![2]].into();
        let raw = g.input(Tensor::row(&[0.0, 0.0, 7.0]));
        let s = g.input(Tensor::row(&[2.0, 5.0]));
        let y = g.grouped_softmax(raw, s, groups).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-14 && (v[1] - 1.0).abs() < 1e-14);
        assert!((v[2] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn empty_group_is_rejected() {
        assert!(matches!(
            validate_groups(&[vec![0], vec![]], 1),
            Err(AutodiffError::Config(_))
        ));
        assert!(validate_groups(&[vec![0, 2], vec![1]], 3).is_ok());
        assert!(validate_groups(&[vec![0, 1]], 3).is_err());
    }

    #[test]
    fn tree_sum_is_order_fixed() {
        let parts: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64 * 0.1, 1.0]).collect();
        let a = tree_sum(parts.clone());
        let b = tree_sum(parts);
        assert_eq!(a, b);
        assert!((a[0] - 2.1).abs() < 1e-12);
        assert_eq!(a[1], 7.0);
    }
}
