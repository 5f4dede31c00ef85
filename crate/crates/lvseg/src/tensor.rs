//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! The tape records exactly the operations the segmentation network and its
//! losses need: stride-1 cross-correlation, ReLU, 2x2 max pooling,
//! nearest-neighbor upsampling, channel concatenation, channel softmax and a
//! handful of elementwise/reduction ops. A tape is rebuilt for every forward
//! pass; there is no graph reuse.
//!
//! Image layout is canonical NCHW (batch, channels, height, width), row-major.

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Shape interpreted as NCHW; errors if the rank is not 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dimension(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        padding: usize,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        // flat input index of the max per output element
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    SoftmaxChannels {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Sum {
        input: NodeId,
    },
    /// Scalar whose gradient w.r.t. `input` was computed analytically at
    /// forward time (used by losses whose backward rule is a constant map).
    ScalarWithGrad {
        input: NodeId,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation. Nodes are appended in execution order, which is a
/// valid topological order by construction.
/// Output-index interval [lo, hi) for which `o + k - pad` lands inside the
/// input extent.
#[inline]
fn conv_valid_range(k: usize, pad: usize, out_len: usize, in_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = out_len.min((in_len + pad).saturating_sub(k));
    (lo, hi.max(lo))
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call w.r.t. the node, if populated.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Stride-1 cross-correlation with symmetric zero padding.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        padding: usize,
    ) -> Result<NodeId> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, kcin, kh, kw) = self.value(kernel).dims4()?;
        if kcin != cin {
            return Err(Error::dimension(format!(
                "conv2d: input has {} channels but kernel expects {}",
                cin, kcin
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dimension(format!(
                "conv2d: kernel extents must be odd, got {}x{}",
                kh, kw
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dimension(format!(
                "conv2d: padded input {}x{} smaller than kernel {}x{}",
                h + 2 * padding,
                w + 2 * padding,
                kh,
                kw
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::dimension(format!(
                "conv2d: bias shape {:?} does not match {} output channels",
                self.value(bias).shape(),
                cout
            )));
        }
        let oh = h + 2 * padding - kh + 1;
        let ow = w + 2 * padding - kw + 1;

        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        // kernel-position-outer formulation: each (ky, kx) contributes a
        // scaled, shifted copy of an input row to an output row, so the
        // inner loop is a contiguous slice operation
        let mut out = vec![0.0; n * cout * oh * ow];
        for bn in 0..n {
            for co in 0..cout {
                let o_base = (bn * cout + co) * oh * ow;
                out[o_base..o_base + oh * ow].fill(b[co]);
                for ci in 0..cin {
                    let x_base = (bn * cin + ci) * h * w;
                    let k_base = (co * cin + ci) * kh * kw;
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = conv_valid_range(ky, padding, oh, h);
                        for kx in 0..kw {
                            let kval = k[k_base + ky * kw + kx];
                            let (ox_lo, ox_hi) = conv_valid_range(kx, padding, ow, w);
                            if kval == 0.0 || ox_lo >= ox_hi {
                                continue;
                            }
                            let len = ox_hi - ox_lo;
                            for oy in oy_lo..oy_hi {
                                let o_row = o_base + oy * ow + ox_lo;
                                let x_row = x_base + (oy + ky - padding) * w + ox_lo + kx - padding;
                                let (dst, src) = (&mut out[o_row..o_row + len], &x[x_row..x_row + len]);
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += kval * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs_grad(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::from_vec(&[n, cout, oh, ow], out)?,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(input).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.nodes[input.0].requires_grad;
        self.push(
            Tensor::from_vec(&shape, out).expect("shape preserved"),
            rg,
            Op::Relu { input },
        )
    }

    /// 2x2 non-overlapping max pooling. Ties route the gradient to the first
    /// occurrence in row-major scan order.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dimension(format!(
                "maxpool2: spatial extents must be even, got {}x{}",
                h, w
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = nc * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::from_vec(&[n, c, oh, ow], out)?,
            rg,
            Op::MaxPool2 { input, argmax },
        ))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, input: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let x = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[nc * h * w + y * w + xx];
                    let base = nc * oh * ow;
                    out[base + (2 * y) * ow + 2 * xx] = v;
                    out[base + (2 * y) * ow + 2 * xx + 1] = v;
                    out[base + (2 * y + 1) * ow + 2 * xx] = v;
                    out[base + (2 * y + 1) * ow + 2 * xx + 1] = v;
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::from_vec(&[n, c, oh, ow], out)?,
            rg,
            Op::Upsample2 { input },
        ))
    }

    /// Channel-axis concatenation, `a` first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::dimension(format!(
                "concat_channels: shapes {:?} and {:?} differ outside the channel axis",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let co = ca + cb;
        let mut out = vec![0.0; na * co * ha * wa];
        let plane = ha * wa;
        for n in 0..na {
            for c in 0..ca {
                let src = (n * ca + c) * plane;
                let dst = (n * co + c) * plane;
                out[dst..dst + plane].copy_from_slice(&xa[src..src + plane]);
            }
            for c in 0..cb {
                let src = (n * cb + c) * plane;
                let dst = (n * co + ca + c) * plane;
                out[dst..dst + plane].copy_from_slice(&xb[src..src + plane]);
            }
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(&[na, co, ha, wa], out)?,
            rg,
            Op::ConcatChannels { a, b },
        ))
    }

    /// Per-pixel softmax over the channel axis, max-subtracted for stability.
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if c < 2 {
            return Err(Error::contract(format!(
                "softmax_channels: need at least 2 channels, got {}",
                c
            )));
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        let plane = h * w;
        for bn in 0..n {
            for p in 0..plane {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(x[(bn * c + ch) * plane + p]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (x[(bn * c + ch) * plane + p] - m).exp();
                    out[(bn * c + ch) * plane + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[(bn * c + ch) * plane + p] /= z;
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::from_vec(&[n, c, h, w], out)?,
            rg,
            Op::SoftmaxChannels { input },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dimension(format!(
                "add: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dimension(format!(
                "mul: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let out: Vec<f64> = self.value(input).data().iter().map(|v| v * factor).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.nodes[input.0].requires_grad;
        self.push(
            Tensor::from_vec(&shape, out).expect("shape preserved"),
            rg,
            Op::Scale { input, factor },
        )
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.value(input).data().iter().sum();
        let rg = self.nodes[input.0].requires_grad;
        self.push(Tensor::scalar(s), rg, Op::Sum { input })
    }

    /// Records a scalar whose backward rule is a precomputed constant
    /// gradient w.r.t. `input`. The loss functions use this for terms whose
    /// gradient is known analytically at forward time.
    pub fn scalar_with_grad(&mut self, input: NodeId, value: f64, grad: Vec<f64>) -> Result<NodeId> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::dimension(format!(
                "scalar_with_grad: gradient length {} does not match input numel {}",
                grad.len(),
                self.value(input).numel()
            )));
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(Tensor::scalar(value), rg, Op::ScalarWithGrad { input, grad }))
    }

    /// Reverse accumulation from a scalar loss node. Populates gradients on
    /// every node reachable from the loss whose subtree requires them;
    /// unreachable parameters keep a zero gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    Some(vec![0.0; n.value.numel()])
                } else {
                    None
                }
            })
            .collect();
        if let Some(g) = self.grads[loss.0].as_mut() {
            g[0] = 1.0;
        } else {
            // loss does not depend on any requires_grad leaf; nothing to do
            return Ok(());
        }

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let gout = self.grads[i].take().expect("checked above");
            self.accumulate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, node: usize, gout: &[f64]) {
        // Split borrows: read values immutably, write grads via raw index.
        macro_rules! gin {
            ($id:expr) => {
                self.grads[$id.0].as_mut()
            };
        }
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            } => {
                let (input, kernel, bias, padding) = (*input, *kernel, *bias, *padding);
                let (n, cin, h, w) = self.nodes[input.0].value.dims4().unwrap();
                let (cout, _, kh, kw) = self.nodes[kernel.0].value.dims4().unwrap();
                let oh = h + 2 * padding - kh + 1;
                let ow = w + 2 * padding - kw + 1;

                if self.grads[input.0].is_some() {
                    let k = self.nodes[kernel.0].value.data().to_vec();
                    let gi = self.grads[input.0].as_mut().unwrap();
                    for bn in 0..n {
                        for co in 0..cout {
                            let go_base = (bn * cout + co) * oh * ow;
                            for ci in 0..cin {
                                let gi_base = (bn * cin + ci) * h * w;
                                let k_base = (co * cin + ci) * kh * kw;
                                for ky in 0..kh {
                                    let (oy_lo, oy_hi) = conv_valid_range(ky, padding, oh, h);
                                    for kx in 0..kw {
                                        let kval = k[k_base + ky * kw + kx];
                                        let (ox_lo, ox_hi) = conv_valid_range(kx, padding, ow, w);
                                        if kval == 0.0 || ox_lo >= ox_hi {
                                            continue;
                                        }
                                        let len = ox_hi - ox_lo;
                                        for oy in oy_lo..oy_hi {
                                            let g_row = go_base + oy * ow + ox_lo;
                                            let i_row = gi_base
                                                + (oy + ky - padding) * w
                                                + ox_lo
                                                + kx
                                                - padding;
                                            let (dst, src) = (
                                                &mut gi[i_row..i_row + len],
                                                &gout[g_row..g_row + len],
                                            );
                                            for (d, s) in dst.iter_mut().zip(src) {
                                                *d += kval * s;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if self.grads[kernel.0].is_some() {
                    let x = self.nodes[input.0].value.data().to_vec();
                    let gk = self.grads[kernel.0].as_mut().unwrap();
                    for bn in 0..n {
                        for co in 0..cout {
                            let go_base = (bn * cout + co) * oh * ow;
                            for ci in 0..cin {
                                let x_base = (bn * cin + ci) * h * w;
                                let k_base = (co * cin + ci) * kh * kw;
                                for ky in 0..kh {
                                    let (oy_lo, oy_hi) = conv_valid_range(ky, padding, oh, h);
                                    for kx in 0..kw {
                                        let (ox_lo, ox_hi) = conv_valid_range(kx, padding, ow, w);
                                        if ox_lo >= ox_hi {
                                            continue;
                                        }
                                        let len = ox_hi - ox_lo;
                                        let mut acc = 0.0;
                                        for oy in oy_lo..oy_hi {
                                            let g_row = go_base + oy * ow + ox_lo;
                                            let x_row = x_base
                                                + (oy + ky - padding) * w
                                                + ox_lo
                                                + kx
                                                - padding;
                                            acc += gout[g_row..g_row + len]
                                                .iter()
                                                .zip(&x[x_row..x_row + len])
                                                .map(|(g, xv)| g * xv)
                                                .sum::<f64>();
                                        }
                                        gk[k_base + ky * kw + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = gin!(bias) {
                    for bn in 0..n {
                        for co in 0..cout {
                            let base = ((bn * cout + co) * oh) * ow;
                            gb[co] += gout[base..base + oh * ow].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let input = *input;
                let x = self.nodes[input.0].value.data().to_vec();
                if let Some(gi) = gin!(input) {
                    for (i, &g) in gout.iter().enumerate() {
                        if x[i] > 0.0 {
                            gi[i] += g;
                        }
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let input = *input;
                let argmax = argmax.clone();
                if let Some(gi) = gin!(input) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gi[src] += gout[o];
                    }
                }
            }
            Op::Upsample2 { input } => {
                let input = *input;
                let (n, c, h, w) = self.nodes[input.0].value.dims4().unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                if let Some(gi) = gin!(input) {
                    for nc in 0..n * c {
                        for y in 0..h {
                            for x in 0..w {
                                let base = nc * oh * ow;
                                gi[nc * h * w + y * w + x] += gout[base + (2 * y) * ow + 2 * x]
                                    + gout[base + (2 * y) * ow + 2 * x + 1]
                                    + gout[base + (2 * y + 1) * ow + 2 * x]
                                    + gout[base + (2 * y + 1) * ow + 2 * x + 1];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let (n, ca, h, w) = self.nodes[a.0].value.dims4().unwrap();
                let cb = self.nodes[b.0].value.shape()[1];
                let plane = h * w;
                let co = ca + cb;
                if let Some(ga) = gin!(a) {
                    for bn in 0..n {
                        for c in 0..ca {
                            let dst = (bn * ca + c) * plane;
                            let src = (bn * co + c) * plane;
                            for p in 0..plane {
                                ga[dst + p] += gout[src + p];
                            }
                        }
                    }
                }
                if let Some(gb) = gin!(b) {
                    for bn in 0..n {
                        for c in 0..cb {
                            let dst = (bn * cb + c) * plane;
                            let src = (bn * co + ca + c) * plane;
                            for p in 0..plane {
                                gb[dst + p] += gout[src + p];
                            }
                        }
                    }
                }
            }
            Op::SoftmaxChannels { input } => {
                let input = *input;
                let (n, c, h, w) = self.nodes[node].value.dims4().unwrap();
                let s = self.nodes[node].value.data().to_vec();
                let plane = h * w;
                if let Some(gi) = gin!(input) {
                    for bn in 0..n {
                        for p in 0..plane {
                            let mut dot = 0.0;
                            for ch in 0..c {
                                let i = (bn * c + ch) * plane + p;
                                dot += gout[i] * s[i];
                            }
                            for ch in 0..c {
                                let i = (bn * c + ch) * plane + p;
                                gi[i] += s[i] * (gout[i] - dot);
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if let Some(ga) = gin!(a) {
                    for (g, &o) in ga.iter_mut().zip(gout) {
                        *g += o;
                    }
                }
                if let Some(gb) = gin!(b) {
                    for (g, &o) in gb.iter_mut().zip(gout) {
                        *g += o;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let xa = self.nodes[a.0].value.data().to_vec();
                let xb = self.nodes[b.0].value.data().to_vec();
                if let Some(ga) = gin!(a) {
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * xb[i];
                    }
                }
                if let Some(gb) = gin!(b) {
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * xa[i];
                    }
                }
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                if let Some(gi) = gin!(input) {
                    for (g, &o) in gi.iter_mut().zip(gout) {
                        *g += factor * o;
                    }
                }
            }
            Op::Sum { input } => {
                let input = *input;
                if let Some(gi) = gin!(input) {
                    for g in gi.iter_mut() {
                        *g += gout[0];
                    }
                }
            }
            Op::ScalarWithGrad { input, grad } => {
                let input = *input;
                let grad = grad.clone();
                if let Some(gi) = gin!(input) {
                    for i in 0..grad.len() {
                        gi[i] += gout[0] * grad[i];
                    }
                }
            }
        }
    }
}

/// Central finite differences, (f(x + h e_i) - f(x - h e_i)) / 2h per element.
///
/// Test oracle; deliberately independent of the tape machinery.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite_diff_grad: step must be positive");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap(), false);
        let k = tape.leaf(Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap(), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv2d(x, k, b, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let xt = rand_tensor(&[1, 1, 5, 5], &mut rng);
        let x = tape.leaf(xt.clone(), false);
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0;
        let k = tape.leaf(Tensor::from_vec(&[1, 1, 3, 3], kdata).unwrap(), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), xt.data());
    }

    /// Naive quadruple-loop reference convolution.
    fn conv_reference(x: &Tensor, k: &Tensor, b: &[f64], pad: usize) -> Tensor {
        let (n, cin, h, w) = x.dims4().unwrap();
        let (cout, _, kh, kw) = k.dims4().unwrap();
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for bn in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((bn * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out.data_mut()[((bn * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xt = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let kt = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let bt = rand_tensor(&[3], &mut rng);
        for pad in [0, 1] {
            let mut tape = Tape::new();
            let x = tape.leaf(xt.clone(), false);
            let k = tape.leaf(kt.clone(), false);
            let b = tape.leaf(bt.clone(), false);
            let y = tape.conv2d(x, k, b, pad).unwrap();
            let reference = conv_reference(&xt, &kt, bt.data(), pad);
            for (a, e) in tape.value(y).data().iter().zip(reference.data()) {
                assert!((a - e).abs() < 1e-12, "got {} expected {}", a, e);
            }
        }
    }

    #[test]
    fn conv2d_channel_mismatch_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let k = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        assert!(matches!(tape.conv2d(x, k, b, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_basic_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-3.0, -1.0, -0.5]).unwrap(), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool2_basic_and_tie_break() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            false,
        );
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        // constant input: gradient concentrates on the first window element
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![5.0; 4]).unwrap(), true);
        let y = tape.maxpool2(x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool2_odd_extent_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 3, 4]), false);
        assert!(matches!(tape.maxpool2(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool2_matches_exhaustive_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xt = rand_tensor(&[1, 1, 6, 6], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), false);
        let y = tape.maxpool2(x).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(xt.data()[(2 * oy + dy) * 6 + 2 * ox + dx]);
                    }
                }
                assert_eq!(tape.value(y).data()[oy * 3 + ox], m);
            }
        }
    }

    #[test]
    fn upsample2_duplicates_and_composes_with_maxpool() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap(), false);
        let y = tape.upsample2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = rand_tensor(&[1, 2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), false);
        let up = tape.upsample2(x).unwrap();
        let down = tape.maxpool2(up).unwrap();
        assert_eq!(tape.value(down).data(), xt.data());
    }

    #[test]
    fn concat_channels_shapes_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let at = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let bt = rand_tensor(&[1, 3, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let a = tape.leaf(at.clone(), false);
        let b = tape.leaf(bt.clone(), false);
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 5, 4, 4]);
        // slicing the output channels recovers both inputs
        let out = tape.value(y).data();
        assert_eq!(&out[..32], at.data());
        assert_eq!(&out[32..], bt.data());
    }

    #[test]
    fn concat_channels_spatial_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let b = tape.leaf(Tensor::zeros(&[1, 2, 5, 4]), false);
        assert!(matches!(tape.concat_channels(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 4, 1, 1], vec![3.0; 4]).unwrap(), false);
        let y = tape.softmax_channels(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2, 1, 1], vec![1000.0, 0.0]).unwrap(), false);
        let y = tape.softmax_channels(x).unwrap();
        let out = tape.value(y).data();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12 && out[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xt = rand_tensor(&[2, 4, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(xt, false);
        let y = tape.softmax_channels(x).unwrap();
        let out = tape.value(y).data();
        for bn in 0..2 {
            for p in 0..9 {
                let s: f64 = (0..4).map(|c| out[(bn * 4 + c) * 9 + p]).sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let xt = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let x = tape.leaf(xt.clone(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let expected: Vec<f64> = xt.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_diff_oracle_sanity() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-9);

        let x = Tensor::from_vec(&[3], vec![0.3, -0.7, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-5);
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    fn check_grad_against_fd<F, G>(shape: &[usize], seed: u64, forward: F, loss_of: G)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
        G: Fn(&Tensor) -> f64,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = rand_tensor(shape, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), true);
        let y = forward(&mut tape, x);
        tape.backward(y).unwrap();
        let ad = tape.grad(x).unwrap().to_vec();
        let fd = finite_diff_grad(loss_of, &xt, 1e-5);
        for (i, (&a, &f)) in ad.iter().zip(fd.data()).enumerate() {
            let denom = f.abs().max(1e-8);
            assert!(
                (a - f).abs() / denom <= 1e-6 || (a - f).abs() <= 1e-8,
                "grad mismatch at {}: ad={} fd={}",
                i,
                a,
                f
            );
        }
    }

    #[test]
    fn gradcheck_relu_softmax_upsample() {
        // relu at clearly non-zero entries
        check_grad_against_fd(
            &[1, 2, 4, 4],
            13,
            |tape, x| {
                let r = tape.relu(x);
                let sq = tape.mul(r, r).unwrap();
                tape.sum(sq)
            },
            |t| t.data().iter().map(|&v| v.max(0.0).powi(2)).sum(),
        );

        // softmax composed with a fixed quadratic readout
        check_grad_against_fd(
            &[1, 4, 2, 2],
            17,
            |tape, x| {
                let s = tape.softmax_channels(x).unwrap();
                let sq = tape.mul(s, s).unwrap();
                tape.sum(sq)
            },
            |t| {
                let mut tape = Tape::new();
                let x = tape.leaf(t.clone(), false);
                let s = tape.softmax_channels(x).unwrap();
                tape.value(s).data().iter().map(|v| v * v).sum()
            },
        );

        check_grad_against_fd(
            &[1, 2, 3, 3],
            19,
            |tape, x| {
                let u = tape.upsample2(x).unwrap();
                let sq = tape.mul(u, u).unwrap();
                tape.sum(sq)
            },
            |t| t.data().iter().map(|v| 4.0 * v * v).sum(),
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let kt = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let bt = rand_tensor(&[3], &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(xt.clone(), false);
            let k = tape.leaf(kt.clone(), false);
            let b = tape.leaf(bt.clone(), false);
            let c = tape.conv2d(x, k, b, 1).unwrap();
            let r = tape.relu(c);
            let s = tape.softmax_channels(r).unwrap();
            tape.value(s).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
