//! Tape-based reverse-mode differentiation over layer-granular ops.
//!
//! A forward pass records one node per layer op; `backward` replays the tape
//! in reverse and returns exact gradients for every trainable leaf. Ops are
//! coarse (whole layers, not scalar arithmetic), which keeps tapes a handful
//! of nodes long even for convolutional nets.

use crate::error::{Error, Result};
use crate::tensor::{dgemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// y = x * w^T + b, x: [B,I], w: [O,I], b: [O]
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    /// Valid (no padding) cross-correlation, square kernels.
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        stride: usize,
    },
    Relu {
        x: NodeId,
    },
    /// Non-overlapping window max; ties resolve to the first element scanned.
    MaxPool2d {
        x: NodeId,
        argmax: Vec<u32>,
    },
    /// Mean over the batch of -log softmax(logits)[label]; probs saved forward.
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    /// (1/2B) * sum (pred - target)^2 over a [B,K] prediction.
    HalfMse {
        pred: NodeId,
        target: Tensor,
    },
    Reshape {
        x: NodeId,
    },
    /// a*x + b*y elementwise on same-shape tensors.
    LinComb {
        a: f64,
        x: NodeId,
        b: f64,
        y: NodeId,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Records a forward computation; consumed read-only by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward pass. Only leaves that require
/// gradients carry a value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Non-trainable input (data); no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable parameter leaf; `backward` reports its gradient.
    pub fn param(&mut self, value: &Tensor) -> NodeId {
        self.push(Op::Leaf, value.clone(), true)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "affine",
                format!("x {:?} vs w {:?} (want [B,I] and [O,I])", xs, ws),
            ));
        }
        let (batch, out_dim) = (xs[0], ws[0]);
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [out_dim] {
                return Err(Error::shape(
                    "affine",
                    format!("bias {:?} vs output dim {}", bs, out_dim),
                ));
            }
        }
        let mut y = Tensor::matmul(self.value(x), false, self.value(w), true)?;
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            for row in y.data_mut().chunks_mut(out_dim) {
                for (v, bv) in row.iter_mut().zip(&bias) {
                    *v += bv;
                }
            }
        }
        debug_assert_eq!(y.shape(), [batch, out_dim]);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Op::Affine { x, w, b }, y, needs))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        stride: usize,
    ) -> Result<NodeId> {
        let dims = conv_dims(self.value(x).shape(), self.value(k).shape(), stride)?;
        if let Some(b) = b {
            if self.value(b).shape() != [dims.filters] {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "bias {:?} vs {} filters",
                        self.value(b).shape(),
                        dims.filters
                    ),
                ));
            }
        }
        let mut out = Tensor::zeros(&[dims.batch, dims.filters, dims.out_h, dims.out_w]);
        let mut col = vec![0.0; dims.col_rows() * dims.col_cols()];
        let xt = self.value(x);
        let kt = self.value(k);
        let per_sample_in = dims.channels * dims.in_h * dims.in_w;
        let per_sample_out = dims.filters * dims.out_h * dims.out_w;
        for s in 0..dims.batch {
            let xin = &xt.data()[s * per_sample_in..(s + 1) * per_sample_in];
            im2col(xin, &dims, &mut col);
            let cout = &mut out.data_mut()[s * per_sample_out..(s + 1) * per_sample_out];
            dgemm(
                dims.filters,
                dims.col_rows(),
                dims.col_cols(),
                1.0,
                kt.data(),
                false,
                &col,
                false,
                0.0,
                cout,
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            let plane = dims.out_h * dims.out_w;
            for sample in out.data_mut().chunks_mut(per_sample_out) {
                for (f, fplane) in sample.chunks_mut(plane).enumerate() {
                    for v in fplane.iter_mut() {
                        *v += bias[f];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(k) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Op::Conv2d { x, k, b, stride }, out, needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(Op::Relu { x }, y, needs)
    }

    pub fn maxpool2d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(Error::shape(
                "maxpool2d",
                format!("input {:?}, want 4-D", xs),
            ));
        }
        let (batch, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!(
                    "window {} does not divide spatial extents {}x{}",
                    window, h, w
                ),
            ));
        }
        let (oh, ow) = (h / window, w / window);
        let mut out = Tensor::zeros(&[batch, ch, oh, ow]);
        let mut argmax = vec![0u32; batch * ch * oh * ow];
        let xd = self.value(x).data();
        let mut oi = 0;
        for bc in 0..batch * ch {
            let base = bc * h * w;
            for py in 0..oh {
                for px in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for dy in 0..window {
                        for dx in 0..window {
                            let at = base + (py * window + dy) * w + px * window + dx;
                            if xd[at] > best {
                                best = xd[at];
                                best_at = at;
                            }
                        }
                    }
                    out.data_mut()[oi] = best;
                    argmax[oi] = best_at as u32;
                    oi += 1;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::MaxPool2d { x, argmax }, out, needs))
    }

    /// Mean over the batch of the cross-entropy between softmax(logits) and
    /// the integer labels. Returns a scalar node.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.value(logits).shape();
        if ls.len() != 2 {
            return Err(Error::shape(
                "softmax_xent",
                format!("logits {:?}, want [B,C]", ls),
            ));
        }
        let (batch, classes) = (ls[0], ls[1]);
        if labels.len() != batch {
            return Err(Error::shape(
                "softmax_xent",
                format!("{} labels for batch {}", labels.len(), batch),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label {
                label: bad,
                classes,
            });
        }
        let mut probs = Tensor::zeros(&[batch, classes]);
        let mut loss = 0.0;
        let ld = self.value(logits).data();
        for b in 0..batch {
            let row = &ld[b * classes..(b + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs.data_mut()[b * classes + c] = e;
                z += e;
            }
            for c in 0..classes {
                probs.data_mut()[b * classes + c] /= z;
            }
            loss -= probs.data()[b * classes + labels[b]].ln();
        }
        loss /= batch as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// (1/2B) * squared error against a fixed target; the least-squares loss.
    pub fn half_mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let ps = self.value(pred).shape();
        if ps != target.shape() {
            return Err(Error::shape(
                "half_mse",
                format!("pred {:?} vs target {:?}", ps, target.shape()),
            ));
        }
        let batch = ps[0] as f64;
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / (2.0 * batch);
        let needs = self.needs(pred);
        Ok(self.push(
            Op::HalfMse {
                pred,
                target: target.clone(),
            },
            Tensor::scalar(loss),
            needs,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape { x }, y, needs))
    }

    /// Flatten trailing dimensions: [B, ...] -> [B, rest].
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape();
        let b = xs[0];
        let rest: usize = xs[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    /// a*x + b*y elementwise; shapes must agree.
    pub fn lincomb(&mut self, a: f64, x: NodeId, b: f64, y: NodeId) -> Result<NodeId> {
        if self.value(x).shape() != self.value(y).shape() {
            return Err(Error::shape(
                "lincomb",
                format!("{:?} vs {:?}", self.value(x).shape(), self.value(y).shape()),
            ));
        }
        let mut out = self.value(x).map(|v| a * v);
        out.axpy(b, self.value(y));
        let needs = self.needs(x) || self.needs(y);
        Ok(self.push(Op::LinComb { a, x, b, y }, out, needs))
    }

    /// Reverse pass from a scalar root. Gradients are exact; every node is
    /// visited at most once.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward on an empty tape".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "root node {} not on tape of length {}",
                root.0,
                self.nodes.len()
            )));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match &self.nodes[id].op {
                Op::Leaf => continue, // keep leaf gradients for the caller
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue, // not on a path to the root
                },
            };
            self.propagate(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => unreachable!("leaves have no inputs"),
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.needs(*x) {
                    let dx = Tensor::matmul(g, false, wv, false).expect("affine dx");
                    accumulate(grads, x.0, dx);
                }
                if self.needs(*w) {
                    let dw = Tensor::matmul(g, true, xv, false).expect("affine dw");
                    accumulate(grads, w.0, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let out_dim = wv.shape()[0];
                        let mut db = Tensor::zeros(&[out_dim]);
                        for row in g.data().chunks(out_dim) {
                            for (d, v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, b.0, db);
                    }
                }
            }
            Op::Conv2d { x, k, b, stride } => {
                self.conv2d_backward(*x, *k, *b, *stride, g, grads);
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.shape());
                    for ((d, &xi), &gi) in dx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                        if xi > 0.0 {
                            *d = gi;
                        }
                    }
                    accumulate(grads, x.0, dx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (&src, &gi) in argmax.iter().zip(g.data()) {
                        dx.data_mut()[src as usize] += gi;
                    }
                    accumulate(grads, x.0, dx);
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let scale = g.item() / labels.len() as f64;
                    let classes = probs.shape()[1];
                    let mut dl = probs.map(|p| p * scale);
                    for (b, &y) in labels.iter().enumerate() {
                        dl.data_mut()[b * classes + y] -= scale;
                    }
                    accumulate(grads, logits.0, dl);
                }
            }
            Op::HalfMse { pred, target } => {
                if self.needs(*pred) {
                    let batch = target.shape()[0] as f64;
                    let scale = g.item() / batch;
                    let pv = self.value(*pred);
                    let mut dp = Tensor::zeros(pv.shape());
                    for ((d, &p), &t) in dp.data_mut().iter_mut().zip(pv.data()).zip(target.data())
                    {
                        *d = scale * (p - t);
                    }
                    accumulate(grads, pred.0, dp);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let dx = g
                        .clone()
                        .reshaped(self.value(*x).shape())
                        .expect("reshape grad");
                    accumulate(grads, x.0, dx);
                }
            }
            Op::LinComb { a, x, b, y } => {
                if self.needs(*x) {
                    accumulate(grads, x.0, g.map(|v| a * v));
                }
                if self.needs(*y) {
                    accumulate(grads, y.0, g.map(|v| b * v));
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        stride: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let dims = conv_dims(self.value(x).shape(), self.value(k).shape(), stride)
            .expect("conv dims validated at forward");
        let xt = self.value(x);
        let kt = self.value(k);
        let per_sample_in = dims.channels * dims.in_h * dims.in_w;
        let per_sample_out = dims.filters * dims.out_h * dims.out_w;
        let mut col = vec![0.0; dims.col_rows() * dims.col_cols()];

        if self.needs(k) {
            let mut dk = Tensor::zeros(kt.shape());
            for s in 0..dims.batch {
                let xin = &xt.data()[s * per_sample_in..(s + 1) * per_sample_in];
                im2col(xin, &dims, &mut col);
                let gout = &g.data()[s * per_sample_out..(s + 1) * per_sample_out];
                // dK += gout [F x HW] * col^T [HW x CKK]
                dgemm(
                    dims.filters,
                    dims.col_cols(),
                    dims.col_rows(),
                    1.0,
                    gout,
                    false,
                    &col,
                    true,
                    1.0,
                    dk.data_mut(),
                );
            }
            accumulate(grads, k.0, dk);
        }
        if let Some(b) = b {
            if self.needs(b) {
                let mut db = Tensor::zeros(&[dims.filters]);
                let plane = dims.out_h * dims.out_w;
                for sample in g.data().chunks(per_sample_out) {
                    for (f, fplane) in sample.chunks(plane).enumerate() {
                        db.data_mut()[f] += fplane.iter().sum::<f64>();
                    }
                }
                accumulate(grads, b.0, db);
            }
        }
        if self.needs(x) {
            let mut dx = Tensor::zeros(xt.shape());
            let mut dcol = vec![0.0; dims.col_rows() * dims.col_cols()];
            for s in 0..dims.batch {
                let gout = &g.data()[s * per_sample_out..(s + 1) * per_sample_out];
                // dcol = K^T [CKK x F] * gout [F x HW]
                dgemm(
                    dims.col_rows(),
                    dims.filters,
                    dims.col_cols(),
                    1.0,
                    kt.data(),
                    true,
                    gout,
                    false,
                    0.0,
                    &mut dcol,
                );
                let dxs = &mut dx.data_mut()[s * per_sample_in..(s + 1) * per_sample_in];
                col2im(&dcol, &dims, dxs);
            }
            accumulate(grads, x.0, dx);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], at: usize, contribution: Tensor) {
    match &mut grads[at] {
        Some(g) => g.axpy(1.0, &contribution),
        slot @ None => *slot = Some(contribution),
    }
}

struct ConvDims {
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    filters: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvDims {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn conv_dims(xs: &[usize], ks: &[usize], stride: usize) -> Result<ConvDims> {
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("x {:?}, kernels {:?}; want 4-D each", xs, ks),
        ));
    }
    let (batch, channels, in_h, in_w) = (xs[0], xs[1], xs[2], xs[3]);
    let (filters, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != channels {
        return Err(Error::shape(
            "conv2d",
            format!("kernel channels {} vs input channels {}", kc, channels),
        ));
    }
    if kh != kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernels must be square, got {}x{}", kh, kw),
        ));
    }
    if in_h < kh || in_w < kw {
        return Err(Error::shape(
            "conv2d",
            format!("input {}x{} smaller than kernel {}", in_h, in_w, kh),
        ));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if (in_h - kh) % stride != 0 || (in_w - kw) % stride != 0 {
        return Err(Error::Config(format!(
            "conv2d output extent not integral: input {}x{}, kernel {}, stride {}",
            in_h, in_w, kh, stride
        )));
    }
    Ok(ConvDims {
        batch,
        channels,
        in_h,
        in_w,
        filters,
        kernel: kh,
        stride,
        out_h: (in_h - kh) / stride + 1,
        out_w: (in_w - kw) / stride + 1,
    })
}

/// Unfold one sample's [C,H,W] input into a [C*k*k, outH*outW] patch matrix.
fn im2col(x: &[f64], d: &ConvDims, col: &mut [f64]) {
    let mut r = 0;
    for c in 0..d.channels {
        let chan = &x[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
        for ky in 0..d.kernel {
            for kx in 0..d.kernel {
                for oy in 0..d.out_h {
                    let src = (oy * d.stride + ky) * d.in_w + kx;
                    for ox in 0..d.out_w {
                        col[r] = chan[src + ox * d.stride];
                        r += 1;
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-add patch gradients back onto the input.
fn col2im(col: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let mut r = 0;
    for c in 0..d.channels {
        let chan = &mut dx[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
        for ky in 0..d.kernel {
            for kx in 0..d.kernel {
                for oy in 0..d.out_h {
                    let dst = (oy * d.stride + ky) * d.in_w + kx;
                    for ox in 0..d.out_w {
                        chan[dst + ox * d.stride] += col[r];
                        r += 1;
                    }
                }
            }
        }
    }
}

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
///
/// `f` must evaluate the same scalar function the analytic gradients were
/// computed for; it is called 2 * (total parameter count) times.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    step: f64,
) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!(
            "finite difference step must be positive, got {}",
            step
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape(
            "finite_difference_check",
            format!("{} params vs {} gradients", params.len(), analytic.len()),
        ));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::shape(
                "finite_difference_check",
                format!(
                    "gradient {:?} vs parameter {:?}",
                    grad.shape(),
                    params[pi].shape()
                ),
            ));
        }
        for i in 0..grad.numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + step;
            let fp = f(&work)?;
            work[pi].data_mut()[i] = orig - step;
            let fm = f(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
