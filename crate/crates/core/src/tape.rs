//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations are recorded in execution order during the forward pass and
//! replayed in reverse to accumulate adjoints. The op set is exactly what the
//! perception networks need: linear layers, valid strided convolutions and
//! their adjoints, a handful of activations, and the elementwise plumbing the
//! loss terms are assembled from.
//!
//! Per-call adjoints are scratch; persistent gradient accumulation lives in
//! [`crate::params::ParameterSet`] and is cleared only by the optimizer step,
//! so separate loss terms may each run their own backward pass.

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{fmt_shape, numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) u32);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// y = x Wᵀ + b with x:[n,i], w:[o,i], b:[o]
    Linear,
    /// valid cross-correlation, x:[n,ci,h,w], k:[co,ci,kh,kw]
    Conv2d { stride: usize },
    /// exact adjoint of `Conv2d` with the same kernel and stride
    ConvTranspose2d { stride: usize },
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    SoftmaxLast,
    LogSoftmaxLast,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(#[allow(dead_code)] f64),
    Sum,
    Reshape,
    /// 1-d inputs concatenated in order
    ConcatLast,
    /// picks one element of a 1-d vector
    SelectLast { index: usize },
    /// forward: one-hot of argmax; backward: identity (straight-through)
    StraightThroughHard,
    /// pass-through gradient inside [lo, hi], zero outside
    Clamp { lo: f64, hi: f64 },
}

struct Node {
    op: Op,
    inputs: Vec<ValueId>,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    /// parameter path when this node leases a named parameter
    param: Option<String>,
}

/// Recorded forward computation. Single-threaded by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Scratch adjoints produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of `id`, zeros if the value was never reached.
    pub fn wrt(&self, tape: &Tape, id: ValueId) -> Vec<f64> {
        match &self.grads[id.0 as usize] {
            Some(g) => g.clone(),
            None => vec![0.0; tape.nodes[id.0 as usize].values.len()],
        }
    }

    /// Accumulate parameter adjoints into the set, in tape order.
    pub fn apply_to(&self, tape: &Tape, params: &mut ParameterSet) -> Result<()> {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param, &self.grads[i]) {
                params.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Extract (name, adjoint) pairs for every leased parameter, in tape
    /// order. Parameters never reached by the loss get explicit zeros so the
    /// optimizer still sees them.
    pub fn into_param_grads(mut self, tape: &Tape) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = self.grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.values.len()]);
                out.push((name.clone(), g));
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0 as usize].shape
    }

    pub fn values(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0 as usize].values
    }

    pub fn value_scalar(&self, id: ValueId) -> f64 {
        self.nodes[id.0 as usize].values[0]
    }

    fn push(&mut self, op: Op, inputs: Vec<ValueId>, shape: Vec<usize>, values: Vec<f64>) -> ValueId {
        debug_assert_eq!(numel(&shape), values.len());
        let requires_grad = inputs
            .iter()
            .any(|id| self.nodes[id.0 as usize].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            values,
            requires_grad,
            param: None,
        });
        ValueId(self.nodes.len() as u32 - 1)
    }

    /// Record a tensor as a leaf honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: t.shape.clone(),
            values: t.values.clone(),
            requires_grad: t.requires_grad,
            param: None,
        });
        ValueId(self.nodes.len() as u32 - 1)
    }

    /// Record a constant (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> ValueId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape,
            values,
            requires_grad: false,
            param: None,
        });
        ValueId(self.nodes.len() as u32 - 1)
    }

    pub fn constant_scalar(&mut self, v: f64) -> ValueId {
        self.constant(vec![1], vec![v])
    }

    /// Lease a named parameter onto the tape. Backward passes route this
    /// node's adjoint into the parameter's persistent gradient.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<ValueId> {
        let t = params.tensor(name)?;
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: t.shape.clone(),
            values: t.values.clone(),
            requires_grad: true,
            param: Some(name.to_string()),
        });
        Ok(ValueId(self.nodes.len() as u32 - 1))
    }

    fn check_finite(&self, op: &'static str, id: ValueId) -> Result<()> {
        if self.nodes[id.0 as usize].values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    // ---- layers ---------------------------------------------------------

    /// y = x Wᵀ + b.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_finite("linear", x)?;
        self.check_finite("linear", w)?;
        self.check_finite("linear", b)?;
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::dim(
                "linear",
                "x:[n,i] w:[o,i] b:[o]",
                format!("x:{} w:{} b:{}", fmt_shape(xs), fmt_shape(ws), fmt_shape(bs)),
            ));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let xv = self.values(x);
        let wv = self.values(w);
        let bv = self.values(b);
        let mut y = vec![0.0; n * o];
        for r in 0..n {
            let xrow = &xv[r * i..(r + 1) * i];
            let yrow = &mut y[r * o..(r + 1) * o];
            for c in 0..o {
                let wrow = &wv[c * i..(c + 1) * i];
                let mut acc = bv[c];
                for k in 0..i {
                    acc += xrow[k] * wrow[k];
                }
                yrow[c] = acc;
            }
        }
        Ok(self.push(Op::Linear, vec![x, w, b], vec![n, o], y))
    }

    /// Valid (no padding) strided cross-correlation.
    pub fn conv2d(&mut self, x: ValueId, k: ValueId, stride: usize) -> Result<ValueId> {
        self.check_finite("conv2d", x)?;
        self.check_finite("conv2d", k)?;
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be >= 1"));
        }
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::dim(
                "conv2d",
                "x:[n,ci,h,w] k:[co,ci,kh,kw]",
                format!("x:{} k:{}", fmt_shape(&xs), fmt_shape(&ks)),
            ));
        }
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kh > h || kw > w {
            return Err(Error::dim(
                "conv2d",
                format!("kernel within input {}x{}", h, w),
                format!("kernel {}x{}", kh, kw),
            ));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let xv = self.values(x);
        let kv = self.values(k);
        let geo = ConvGeometry {
            ci,
            h,
            w,
            co,
            kh,
            kw,
            oh,
            ow,
            stride,
        };
        let mut y = vec![0.0; n * co * oh * ow];
        let mut patches = vec![0.0; geo.positions() * geo.patch_len()];
        for bi in 0..n {
            im2col(&xv[bi * ci * h * w..], &geo, &mut patches);
            kernel_apply(kv, &patches, &geo, &mut y[bi * co * oh * ow..]);
        }
        Ok(self.push(Op::Conv2d { stride }, vec![x, k], vec![n, co, oh, ow], y))
    }

    /// Exact adjoint of [`Tape::conv2d`]: maps [n,co,oh,ow] back to the
    /// minimal compatible input extent (oh-1)*stride + kh.
    pub fn conv_transpose2d(&mut self, y: ValueId, k: ValueId, stride: usize) -> Result<ValueId> {
        self.check_finite("conv_transpose2d", y)?;
        self.check_finite("conv_transpose2d", k)?;
        if stride == 0 {
            return Err(Error::contract("conv_transpose2d: stride must be >= 1"));
        }
        let (ys, ks) = (self.shape(y).to_vec(), self.shape(k).to_vec());
        if ys.len() != 4 || ks.len() != 4 || ys[1] != ks[0] {
            return Err(Error::dim(
                "conv_transpose2d",
                "y:[n,co,oh,ow] k:[co,ci,kh,kw]",
                format!("y:{} k:{}", fmt_shape(&ys), fmt_shape(&ks)),
            ));
        }
        let (n, co, oh, ow) = (ys[0], ys[1], ys[2], ys[3]);
        let (_, ci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        let h = (oh - 1) * stride + kh;
        let w = (ow - 1) * stride + kw;
        let geo = ConvGeometry {
            ci,
            h,
            w,
            co,
            kh,
            kw,
            oh,
            ow,
            stride,
        };
        let yv = self.values(y);
        let kv = self.values(k);
        let mut x = vec![0.0; n * ci * h * w];
        let mut gpatches = vec![0.0; geo.positions() * geo.patch_len()];
        for bi in 0..n {
            kernel_transpose_apply(kv, &yv[bi * co * oh * ow..], &geo, &mut gpatches);
            col2im_add(&gpatches, &geo, &mut x[bi * ci * h * w..(bi + 1) * ci * h * w]);
        }
        Ok(self.push(
            Op::ConvTranspose2d { stride },
            vec![y, k],
            vec![n, ci, h, w],
            x,
        ))
    }

    // ---- activations ----------------------------------------------------

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_finite("relu", x)?;
        let shape = self.shape(x).to_vec();
        let y: Vec<f64> = self.values(x).iter().map(|&v| v.max(0.0)).collect();
        Ok(self.push(Op::Relu, vec![x], shape, y))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_finite("sigmoid", x)?;
        let shape = self.shape(x).to_vec();
        let y: Vec<f64> = self.values(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        Ok(self.push(Op::Sigmoid, vec![x], shape, y))
    }

    pub fn softplus(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_finite("softplus", x)?;
        let shape = self.shape(x).to_vec();
        // log(1+e^x), stabilized for large |x|
        let y: Vec<f64> = self
            .values(x)
            .iter()
            .map(|&v| if v > 30.0 { v } else { (1.0 + v.exp()).ln() })
            .collect();
        Ok(self.push(Op::Softplus, vec![x], shape, y))
    }

    pub fn exp(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_finite("exp", x)?;
        let shape = self.shape(x).to_vec();
        let y: Vec<f64> = self.values(x).iter().map(|&v| v.exp()).collect();
        Ok(self.push(Op::Exp, vec![x], shape, y))
    }

    pub fn log(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_finite("log", x)?;
        let shape = self.shape(x).to_vec();
        let y: Vec<f64> = self.values(x).iter().map(|&v| v.ln()).collect();
        Ok(self.push(Op::Log, vec![x], shape, y))
    }

    /// Softmax over the last dimension; rows sum to 1.
    pub fn softmax_last(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_finite("softmax", x)?;
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| Error::contract("softmax: rank 0"))?;
        let mut y = self.values(x).to_vec();
        for row in y.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Ok(self.push(Op::SoftmaxLast, vec![x], shape, y))
    }

    /// Numerically stable log-softmax over the last dimension.
    pub fn log_softmax_last(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_finite("log_softmax", x)?;
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| Error::contract("log_softmax: rank 0"))?;
        let mut y = self.values(x).to_vec();
        for row in y.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(self.push(Op::LogSoftmaxLast, vec![x], shape, y))
    }

    // ---- elementwise plumbing --------------------------------------------

    fn binary(&mut self, op: Op, name: &'static str, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                name,
                fmt_shape(self.shape(a)),
                fmt_shape(self.shape(b)),
            ));
        }
        let shape = self.shape(a).to_vec();
        let av = self.values(a);
        let bv = self.values(b);
        let y: Vec<f64> = match op {
            Op::Add => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            Op::Sub => av.iter().zip(bv).map(|(x, y)| x - y).collect(),
            Op::Mul => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        Ok(self.push(op, vec![a, b], shape, y))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Op::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Op::Mul, "mul", a, b)
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let shape = self.shape(x).to_vec();
        let y: Vec<f64> = self.values(x).iter().map(|v| v * c).collect();
        self.push(Op::Scale(c), vec![x], shape, y)
    }

    pub fn add_scalar(&mut self, x: ValueId, c: f64) -> ValueId {
        let shape = self.shape(x).to_vec();
        let y: Vec<f64> = self.values(x).iter().map(|v| v + c).collect();
        self.push(Op::AddScalar(c), vec![x], shape, y)
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let s: f64 = self.values(x).iter().sum();
        self.push(Op::Sum, vec![x], vec![1], vec![s])
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        if numel(&shape) != self.values(x).len() {
            return Err(Error::dim(
                "reshape",
                format!("{} elements", self.values(x).len()),
                fmt_shape(&shape),
            ));
        }
        let y = self.values(x).to_vec();
        Ok(self.push(Op::Reshape, vec![x], shape, y))
    }

    /// Concatenate 1-d vectors in order.
    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::contract("concat: empty input list"));
        }
        let mut y = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::dim("concat", "rank-1 inputs", fmt_shape(self.shape(p))));
            }
            y.extend_from_slice(self.values(p));
        }
        let n = y.len();
        Ok(self.push(Op::ConcatLast, parts.to_vec(), vec![n], y))
    }

    /// Pick element `index` of a 1-d vector.
    pub fn select(&mut self, x: ValueId, index: usize) -> Result<ValueId> {
        let n = self.values(x).len();
        if self.shape(x).len() != 1 || index >= n {
            return Err(Error::contract(format!(
                "select: index {} out of range for vector of length {}",
                index, n
            )));
        }
        let v = self.values(x)[index];
        Ok(self.push(Op::SelectLast { index }, vec![x], vec![1], vec![v]))
    }

    /// One-hot of the argmax on the forward path; identity on the backward
    /// path (straight-through estimator). Input must be 1-d.
    pub fn straight_through_hard(&mut self, x: ValueId) -> Result<ValueId> {
        if self.shape(x).len() != 1 {
            return Err(Error::dim("straight_through", "rank-1 input", fmt_shape(self.shape(x))));
        }
        let xv = self.values(x);
        let arg = argmax(xv);
        let mut y = vec![0.0; xv.len()];
        y[arg] = 1.0;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::StraightThroughHard, vec![x], shape, y))
    }

    pub fn clamp(&mut self, x: ValueId, lo: f64, hi: f64) -> ValueId {
        let shape = self.shape(x).to_vec();
        let y: Vec<f64> = self.values(x).iter().map(|v| v.clamp(lo, hi)).collect();
        self.push(Op::Clamp { lo, hi }, vec![x], shape, y)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns fresh adjoints for every
    /// reachable value; persistent accumulation is the caller's business.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        let ln = &self.nodes[loss.0 as usize];
        if ln.values.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {}",
                fmt_shape(&ln.shape)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0 as usize] = Some(vec![1.0]);

        for idx in (0..=loss.0 as usize).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out_grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &out_grad, &mut grads);
            grads[idx] = Some(out_grad);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that accumulates parameter gradients into `params`.
    pub fn backward_into(&self, loss: ValueId, params: &mut ParameterSet) -> Result<()> {
        let g = self.backward(loss)?;
        g.apply_to(self, params)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let needs: Vec<bool> = node
            .inputs
            .iter()
            .map(|id| self.nodes[id.0 as usize].requires_grad)
            .collect();
        if !needs.iter().any(|&b| b) {
            return;
        }
        let mut acc = |slot: usize, contrib: Vec<f64>| {
            let id = node.inputs[slot].0 as usize;
            match &mut grads[id] {
                Some(g0) => {
                    for (a, b) in g0.iter_mut().zip(&contrib) {
                        *a += b;
                    }
                }
                None => grads[id] = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear => {
                let x = &self.nodes[node.inputs[0].0 as usize];
                let w = &self.nodes[node.inputs[1].0 as usize];
                let (n, i, o) = (x.shape[0], x.shape[1], w.shape[0]);
                if needs[0] {
                    let mut gx = vec![0.0; n * i];
                    for r in 0..n {
                        for c in 0..o {
                            let gv = g[r * o + c];
                            if gv == 0.0 {
                                continue;
                            }
                            let wrow = &w.values[c * i..(c + 1) * i];
                            let gxrow = &mut gx[r * i..(r + 1) * i];
                            for k in 0..i {
                                gxrow[k] += gv * wrow[k];
                            }
                        }
                    }
                    acc(0, gx);
                }
                if needs[1] {
                    let mut gw = vec![0.0; o * i];
                    for r in 0..n {
                        let xrow = &x.values[r * i..(r + 1) * i];
                        for c in 0..o {
                            let gv = g[r * o + c];
                            if gv == 0.0 {
                                continue;
                            }
                            let gwrow = &mut gw[c * i..(c + 1) * i];
                            for k in 0..i {
                                gwrow[k] += gv * xrow[k];
                            }
                        }
                    }
                    acc(1, gw);
                }
                if needs[2] {
                    let mut gb = vec![0.0; o];
                    for r in 0..n {
                        for c in 0..o {
                            gb[c] += g[r * o + c];
                        }
                    }
                    acc(2, gb);
                }
            }
            Op::Conv2d { stride } => {
                let x = &self.nodes[node.inputs[0].0 as usize];
                let k = &self.nodes[node.inputs[1].0 as usize];
                let (n, ci, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (co, kh, kw) = (k.shape[0], k.shape[2], k.shape[3]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let geo = ConvGeometry {
                    ci,
                    h,
                    w,
                    co,
                    kh,
                    kw,
                    oh,
                    ow,
                    stride: *stride,
                };
                if needs[0] {
                    let mut gx = vec![0.0; x.values.len()];
                    let mut gpatches = vec![0.0; geo.positions() * geo.patch_len()];
                    for bi in 0..n {
                        kernel_transpose_apply(&k.values, &g[bi * co * oh * ow..], &geo, &mut gpatches);
                        col2im_add(
                            &gpatches,
                            &geo,
                            &mut gx[bi * ci * h * w..(bi + 1) * ci * h * w],
                        );
                    }
                    acc(0, gx);
                }
                if needs[1] {
                    let mut gk = vec![0.0; k.values.len()];
                    let mut patches = vec![0.0; geo.positions() * geo.patch_len()];
                    for bi in 0..n {
                        im2col(&x.values[bi * ci * h * w..], &geo, &mut patches);
                        kernel_grad_accumulate(&patches, &g[bi * co * oh * ow..], &geo, &mut gk);
                    }
                    acc(1, gk);
                }
            }
            Op::ConvTranspose2d { stride } => {
                // forward scatters y through k into x'; the adjoint gathers
                let y = &self.nodes[node.inputs[0].0 as usize];
                let k = &self.nodes[node.inputs[1].0 as usize];
                let (n, co, oh, ow) = (y.shape[0], y.shape[1], y.shape[2], y.shape[3]);
                let (ci, kh, kw) = (k.shape[1], k.shape[2], k.shape[3]);
                let (h, w) = (node.shape[2], node.shape[3]);
                let geo = ConvGeometry {
                    ci,
                    h,
                    w,
                    co,
                    kh,
                    kw,
                    oh,
                    ow,
                    stride: *stride,
                };
                let mut patches = vec![0.0; geo.positions() * geo.patch_len()];
                if needs[0] {
                    let mut gy = vec![0.0; y.values.len()];
                    for bi in 0..n {
                        im2col(&g[bi * ci * h * w..], &geo, &mut patches);
                        kernel_apply(&k.values, &patches, &geo, &mut gy[bi * co * oh * ow..]);
                    }
                    acc(0, gy);
                }
                if needs[1] {
                    let mut gk = vec![0.0; k.values.len()];
                    for bi in 0..n {
                        im2col(&g[bi * ci * h * w..], &geo, &mut patches);
                        kernel_grad_accumulate(&patches, &y.values[bi * co * oh * ow..], &geo, &mut gk);
                    }
                    acc(1, gk);
                }
            }
            Op::Relu => {
                let x = &self.nodes[node.inputs[0].0 as usize];
                let gx: Vec<f64> = x
                    .values
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(0, gx);
            }
            Op::Sigmoid => {
                let y = &node.values;
                let gx: Vec<f64> = y.iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                acc(0, gx);
            }
            Op::Softplus => {
                let x = &self.nodes[node.inputs[0].0 as usize];
                let gx: Vec<f64> = x
                    .values
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * sigmoid_scalar(v))
                    .collect();
                acc(0, gx);
            }
            Op::Exp => {
                let y = &node.values;
                let gx: Vec<f64> = y.iter().zip(g).map(|(&e, &gv)| gv * e).collect();
                acc(0, gx);
            }
            Op::Log => {
                let x = &self.nodes[node.inputs[0].0 as usize];
                let gx: Vec<f64> = x.values.iter().zip(g).map(|(&v, &gv)| gv / v).collect();
                acc(0, gx);
            }
            Op::SoftmaxLast => {
                let k = *node.shape.last().unwrap();
                let y = &node.values;
                let mut gx = vec![0.0; y.len()];
                for (row, (yrow, grow)) in y.chunks(k).zip(g.chunks(k)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    let out = &mut gx[row * k..(row + 1) * k];
                    for i in 0..k {
                        out[i] = yrow[i] * (grow[i] - dot);
                    }
                }
                acc(0, gx);
            }
            Op::LogSoftmaxLast => {
                let k = *node.shape.last().unwrap();
                let y = &node.values;
                let mut gx = vec![0.0; y.len()];
                for (row, (yrow, grow)) in y.chunks(k).zip(g.chunks(k)).enumerate() {
                    let gsum: f64 = grow.iter().sum();
                    let out = &mut gx[row * k..(row + 1) * k];
                    for i in 0..k {
                        out[i] = grow[i] - yrow[i].exp() * gsum;
                    }
                }
                acc(0, gx);
            }
            Op::Add => {
                if needs[0] {
                    acc(0, g.to_vec());
                }
                if needs[1] {
                    acc(1, g.to_vec());
                }
            }
            Op::Sub => {
                if needs[0] {
                    acc(0, g.to_vec());
                }
                if needs[1] {
                    acc(1, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul => {
                let a = &self.nodes[node.inputs[0].0 as usize];
                let b = &self.nodes[node.inputs[1].0 as usize];
                if needs[0] {
                    acc(0, b.values.iter().zip(g).map(|(&bv, &gv)| bv * gv).collect());
                }
                if needs[1] {
                    acc(1, a.values.iter().zip(g).map(|(&av, &gv)| av * gv).collect());
                }
            }
            Op::Scale(c) => {
                acc(0, g.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(_) => {
                acc(0, g.to_vec());
            }
            Op::Sum => {
                let x = &self.nodes[node.inputs[0].0 as usize];
                acc(0, vec![g[0]; x.values.len()]);
            }
            Op::Reshape => {
                acc(0, g.to_vec());
            }
            Op::ConcatLast => {
                let mut off = 0;
                for (slot, id) in node.inputs.iter().enumerate() {
                    let len = self.nodes[id.0 as usize].values.len();
                    if needs[slot] {
                        acc(slot, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::SelectLast { index } => {
                let x = &self.nodes[node.inputs[0].0 as usize];
                let mut gx = vec![0.0; x.values.len()];
                gx[*index] = g[0];
                acc(0, gx);
            }
            Op::StraightThroughHard => {
                acc(0, g.to_vec());
            }
            Op::Clamp { lo, hi } => {
                let x = &self.nodes[node.inputs[0].0 as usize];
                let gx: Vec<f64> = x
                    .values
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { 0.0 })
                    .collect();
                acc(0, gx);
            }
        }
    }
}

/// Shared geometry of one convolution instance (single batch element).
struct ConvGeometry {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

impl ConvGeometry {
    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn patch_len(&self) -> usize {
        self.ci * self.kh * self.kw
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Extract the receptive-field patch of every output position: row p holds
/// the (ci, kh, kw) window in kernel layout order, so each (ci, u) segment
/// is a contiguous copy from the image row.
fn im2col(x: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let k = g.patch_len();
    for i in 0..g.oh {
        for j in 0..g.ow {
            let p = i * g.ow + j;
            let row = &mut out[p * k..(p + 1) * k];
            for c_in in 0..g.ci {
                let xbase = c_in * g.h * g.w;
                for u in 0..g.kh {
                    let src = xbase + (i * g.stride + u) * g.w + j * g.stride;
                    let dst = (c_in * g.kh + u) * g.kw;
                    row[dst..dst + g.kw].copy_from_slice(&x[src..src + g.kw]);
                }
            }
        }
    }
}

/// Scatter-add each patch row back into the image — the adjoint of
/// [`im2col`].
fn col2im_add(patches: &[f64], g: &ConvGeometry, x: &mut [f64]) {
    let k = g.patch_len();
    for i in 0..g.oh {
        for j in 0..g.ow {
            let p = i * g.ow + j;
            let row = &patches[p * k..(p + 1) * k];
            for c_in in 0..g.ci {
                let xbase = c_in * g.h * g.w;
                for u in 0..g.kh {
                    let dst = xbase + (i * g.stride + u) * g.w + j * g.stride;
                    let src = (c_in * g.kh + u) * g.kw;
                    for v in 0..g.kw {
                        x[dst + v] += row[src + v];
                    }
                }
            }
        }
    }
}

/// y[co][p] = ⟨kernel row co, patch row p⟩ (overwrites `y`).
fn kernel_apply(kernel: &[f64], patches: &[f64], g: &ConvGeometry, y: &mut [f64]) {
    let k = g.patch_len();
    for c_out in 0..g.co {
        let krow = &kernel[c_out * k..(c_out + 1) * k];
        let yrow = &mut y[c_out * g.positions()..(c_out + 1) * g.positions()];
        for (p, out) in yrow.iter_mut().enumerate() {
            *out = dot(krow, &patches[p * k..(p + 1) * k]);
        }
    }
}

/// gk[co] += Σ_p coeff[co][p] · patch[p].
fn kernel_grad_accumulate(patches: &[f64], coeff: &[f64], g: &ConvGeometry, gk: &mut [f64]) {
    let k = g.patch_len();
    for c_out in 0..g.co {
        let crow = &coeff[c_out * g.positions()..(c_out + 1) * g.positions()];
        let gkrow = &mut gk[c_out * k..(c_out + 1) * k];
        for (p, &c) in crow.iter().enumerate() {
            if c != 0.0 {
                axpy(c, &patches[p * k..(p + 1) * k], gkrow);
            }
        }
    }
}

/// gpatches[p] = Σ_co coeff[co][p] · kernel[co] (overwrites `gpatches`).
fn kernel_transpose_apply(kernel: &[f64], coeff: &[f64], g: &ConvGeometry, gpatches: &mut [f64]) {
    gpatches.fill(0.0);
    let k = g.patch_len();
    for c_out in 0..g.co {
        let krow = &kernel[c_out * k..(c_out + 1) * k];
        let crow = &coeff[c_out * g.positions()..(c_out + 1) * g.positions()];
        for (p, &c) in crow.iter().enumerate() {
            if c != 0.0 {
                axpy(c, krow, &mut gpatches[p * k..(p + 1) * k]);
            }
        }
    }
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_case() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 2], vec![1.0, 2.0]);
        let w = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t.constant(vec![2], vec![0.0, 0.0]);
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.values(y), &[1.0, 2.0]);
    }

    #[test]
    fn linear_zero_weights_pass_bias() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 2], vec![1.0, 2.0]);
        let w = t.constant(vec![2, 2], vec![0.0; 4]);
        let b = t.constant(vec![2], vec![3.0, 4.0]);
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.values(y), &[3.0, 4.0]);
    }

    #[test]
    fn linear_shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 3], vec![0.0; 3]);
        let w = t.constant(vec![2, 2], vec![0.0; 4]);
        let b = t.constant(vec![2], vec![0.0; 2]);
        let err = t.linear(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv2d_ones_stride2() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 1, 4, 4], vec![1.0; 16]);
        let k = t.constant(vec![1, 1, 1, 1], vec![1.0]);
        let y = t.conv2d(x, k, 2).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2, 2]);
        assert_eq!(t.values(y), &[1.0; 4]);
    }

    #[test]
    fn conv2d_full_overlap_sums() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 1, 3, 3], vec![1.0; 9]);
        let k = t.constant(vec![1, 1, 3, 3], vec![1.0; 9]);
        let y = t.conv2d(x, k, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.values(y), &[9.0]);
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 1, 2, 2], vec![1.0; 4]);
        let k = t.constant(vec![1, 1, 3, 3], vec![1.0; 9]);
        assert!(t.conv2d(x, k, 1).is_err());
    }

    #[test]
    fn conv_transpose_expands_block() {
        let mut t = Tape::new();
        let y = t.constant(vec![1, 1, 1, 1], vec![3.0]);
        let k = t.constant(vec![1, 1, 2, 2], vec![1.0; 4]);
        let x = t.conv_transpose2d(y, k, 2).unwrap();
        assert_eq!(t.shape(x), &[1, 1, 2, 2]);
        assert_eq!(t.values(x), &[3.0; 4]);
    }

    #[test]
    fn activations_basic_values() {
        let mut t = Tape::new();
        let x = t.constant(vec![3], vec![-1.0, 0.0, 2.0]);
        let r = t.relu(x).unwrap();
        assert_eq!(t.values(r), &[0.0, 0.0, 2.0]);
        let z = t.constant_scalar(0.0);
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.values(s), &[0.5]);
        let u = t.constant(vec![3], vec![1.5, 1.5, 1.5]);
        let sm = t.softmax_last(u).unwrap();
        for v in t.values(sm) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(vec![2, 3], vec![10.0, -4.0, 0.3, 2.0, 2.0, -50.0]);
        let y = t.softmax_last(x).unwrap();
        for row in t.values(y).chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.constant(vec![2], vec![1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn linear_grad_matches_analytic_outer_structure() {
        // loss = sum(x W^T), so dloss/dW[c][k] = sum_r x[r][k]
        let mut t = Tape::new();
        let xt = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = t.leaf(&xt);
        let wt = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap().with_grad();
        let w = t.leaf(&wt);
        let b = t.constant(vec![2], vec![0.0, 0.0]);
        let y = t.linear(x, w, b).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        let gw = g.wrt(&t, w);
        assert_eq!(gw, vec![5.0, 7.0, 9.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn straight_through_routes_identity_gradient() {
        let mut t = Tape::new();
        let xt = Tensor::new(vec![3], vec![0.2, 0.5, 0.3]).unwrap().with_grad();
        let x = t.leaf(&xt);
        let st = t.straight_through_hard(x).unwrap();
        assert_eq!(t.values(st), &[0.0, 1.0, 0.0]);
        let wv = t.constant(vec![3], vec![2.0, 3.0, 5.0]);
        let p = t.mul(st, wv).unwrap();
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(&t, x), vec![2.0, 3.0, 5.0]);
    }

    #[test]
    fn non_finite_input_rejected_at_layer_boundary() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 2], vec![f64::NAN, 1.0]);
        let w = t.constant(vec![1, 2], vec![1.0, 1.0]);
        let b = t.constant(vec![1], vec![0.0]);
        assert!(matches!(t.linear(x, w, b), Err(Error::NonFinite(_))));
    }
}
