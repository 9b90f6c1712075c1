//! Reverse-mode autodiff tape over dense `[C, H, W]` tensors.
//!
//! Nodes are appended in topological order during the forward pass; the
//! backward pass sweeps the tape in reverse and accumulates gradients
//! additively (repeated backward calls without zeroing sum their results).
//! Gradient buffers are only allocated for nodes on a differentiable path,
//! so frozen subgraphs (e.g. features of the ground-truth frame) cost no
//! backward work.

use std::sync::Arc;

use rayon::prelude::*;

use crate::flow::FlowField;
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// 3x3 convolution, padding 1, stride 1. Weight `[Cout, Cin, 3, 3]`.
    Conv3x3 { x: NodeId, w: NodeId, b: NodeId },
    /// Pointwise convolution. Weight `[Cout, Cin]`.
    Conv1x1 { x: NodeId, w: NodeId, b: NodeId },
    LeakyRelu { x: NodeId, slope: f32 },
    /// 2x2 average-pool downsample.
    DownAvg2 { x: NodeId },
    /// Bilinear x2 upsample.
    UpBilinear2 { x: NodeId },
    Concat { parts: Vec<NodeId> },
    SliceChannels { x: NodeId, start: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Abs { x: NodeId },
    MulScalar { x: NodeId, s: f32 },
    Sum { x: NodeId },
    Mean { x: NodeId },
    /// Smooth bounded map into (0,1): logistic with unit slope at x = 0.5.
    SmoothClamp01 { x: NodeId },
    /// Hard clamp to [0,1]; gradient passes on the closed interval.
    HardClamp01 { x: NodeId },
    /// Backward-warp by a constant flow field; zero-fill out of bounds.
    Warp { x: NodeId, flow: Arc<FlowField> },
    /// Per-pixel multiply by a constant single-channel mask.
    MulMask { x: NodeId, mask: Arc<Vec<f32>> },
    /// Per-pixel L2 normalization across channels.
    ChannelNorm { x: NodeId },
    /// Mean L1 difference over graph edges: mean over (edges x channels)
    /// of |x[:,p] - x[:,q]|.
    EdgeDiffL1 { x: NodeId, edges: Arc<Vec<(u32, u32)>> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Single-pass forward/backward recording tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const CHANNEL_NORM_EPS: f32 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Accumulated gradient of a node (empty slice if the node is not on a
    /// differentiable path).
    pub fn grad(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> NodeId {
        let grad = if needs_grad { vec![0.0; data.len()] } else { Vec::new() };
        self.nodes.push(Node {
            shape,
            data,
            grad,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts an input tensor. `needs_grad` marks trainable leaves.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch("leaf shape/data mismatch".into()));
        }
        Ok(self.push(shape, data, Op::Leaf, needs_grad))
    }

    pub fn scalar_leaf(&mut self, v: f32) -> NodeId {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    fn chw(&self, id: NodeId) -> Result<(usize, usize, usize)> {
        match self.nodes[id.0].shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(Error::ShapeMismatch(format!(
                "expected [C,H,W] tensor, found {s:?}"
            ))),
        }
    }

    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (cin, h, wd) = self.chw(x)?;
        let (cout, wcin) = match self.nodes[w.0].shape.as_slice() {
            &[cout, wcin, 3, 3] => (cout, wcin),
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "conv3x3 weight must be [Cout,Cin,3,3], found {s:?}"
                )))
            }
        };
        if wcin != cin || self.nodes[b.0].shape != vec![cout] {
            return Err(Error::ShapeMismatch("conv3x3 channel mismatch".into()));
        }
        let out = conv3x3_forward(
            &self.nodes[x.0].data,
            cin,
            h,
            wd,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            cout,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![cout, h, wd], out, Op::Conv3x3 { x, w, b }, needs))
    }

    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (cin, h, wd) = self.chw(x)?;
        let (cout, wcin) = match self.nodes[w.0].shape.as_slice() {
            &[cout, wcin] => (cout, wcin),
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "conv1x1 weight must be [Cout,Cin], found {s:?}"
                )))
            }
        };
        if wcin != cin || self.nodes[b.0].shape != vec![cout] {
            return Err(Error::ShapeMismatch("conv1x1 channel mismatch".into()));
        }
        let hw = h * wd;
        let xs = &self.nodes[x.0].data;
        let ws = &self.nodes[w.0].data;
        let bs = &self.nodes[b.0].data;
        let mut out = vec![0.0f32; cout * hw];
        out.par_chunks_mut(hw).enumerate().for_each(|(co, chunk)| {
            chunk.iter_mut().for_each(|v| *v = bs[co]);
            for ci in 0..cin {
                let wv = ws[co * cin + ci];
                let src = &xs[ci * hw..(ci + 1) * hw];
                for (o, &s) in chunk.iter_mut().zip(src) {
                    *o += wv * s;
                }
            }
        });
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![cout, h, wd], out, Op::Conv1x1 { x, w, b }, needs))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f32) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, data, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn downsample_avg2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "downsample needs even spatial dims, found {h}x{w}"
            )));
        }
        let (nh, nw) = (h / 2, w / 2);
        let xs = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; c * nh * nw];
        for ci in 0..c {
            for y in 0..nh {
                for xx in 0..nw {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += xs[ci * h * w + (2 * y + dy) * w + 2 * xx + dx];
                        }
                    }
                    out[ci * nh * nw + y * nw + xx] = s * 0.25;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![c, nh, nw], out, Op::DownAvg2 { x }, needs))
    }

    pub fn upsample_bilinear2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(x)?;
        let (nh, nw) = (h * 2, w * 2);
        let xs = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; c * nh * nw];
        for ci in 0..c {
            let src = &xs[ci * h * w..(ci + 1) * h * w];
            let dst = &mut out[ci * nh * nw..(ci + 1) * nh * nw];
            for y in 0..nh {
                for xx in 0..nw {
                    let mut acc = 0.0;
                    for (sy, sx, wt) in upsample_taps(y, xx, h, w) {
                        acc += wt * src[sy * w + sx];
                    }
                    dst[y * nw + xx] = acc;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![c, nh, nw], out, Op::UpBilinear2 { x }, needs))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat of zero tensors".into()));
        }
        let (_, h, w) = self.chw(parts[0])?;
        let mut total_c = 0;
        for &p in parts {
            let (pc, ph, pw) = self.chw(p)?;
            if ph != h || pw != w {
                return Err(Error::ShapeMismatch("concat spatial mismatch".into()));
            }
            total_c += pc;
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![total_c, h, w],
            data,
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let (c, h, w) = self.chw(x)?;
        if start + count > c {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{} out of {c} channels",
                start + count
            )));
        }
        let hw = h * w;
        let data = self.nodes[x.0].data[start * hw..(start + count) * hw].to_vec();
        let needs = self.needs(x);
        Ok(self.push(vec![count, h, w], data, Op::SliceChannels { x, start }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: fn(f32, f32) -> f32) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch("elementwise shape mismatch".into()));
        }
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, op, needs))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|v| v.abs()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, data, Op::Abs { x }, needs)
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: f32) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|v| v * s).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, data, Op::MulScalar { x, s }, needs)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].data.iter().map(|&v| v as f64).sum::<f64>() as f32;
        let needs = self.needs(x);
        self.push(vec![1], vec![s], Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].data.len() as f64;
        let s = (self.nodes[x.0].data.iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        let needs = self.needs(x);
        self.push(vec![1], vec![s], Op::Mean { x }, needs)
    }

    /// Smooth bounded squash into (0,1): the integrated logistic gate
    /// `y = (softplus(kx) - softplus(k(x-1))) / k` with `k = 10`. Its slope
    /// `sigma(kx) - sigma(k(x-1))` stays near 1 across the whole unit
    /// interval (a plain scaled logistic saturates for bright targets and
    /// kills the gradient) and never vanishes identically at the bounds.
    pub fn smooth_clamp01(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| (softplus(CLAMP_K * v) - softplus(CLAMP_K * (v - 1.0))) / CLAMP_K)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, data, Op::SmoothClamp01 { x }, needs)
    }

    pub fn hard_clamp01(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, data, Op::HardClamp01 { x }, needs)
    }

    /// Backward-warps the tensor by a constant flow (defined on the output
    /// grid, pointing into the input). Out-of-bounds samples are zero.
    pub fn warp(&mut self, x: NodeId, flow: Arc<FlowField>) -> Result<NodeId> {
        let (c, h, w) = self.chw(x)?;
        if flow.height() != h || flow.width() != w {
            return Err(Error::ShapeMismatch("warp flow grid mismatch".into()));
        }
        let xs = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; c * h * w];
        for_each_warp_tap(&flow, h, w, |p, taps| {
            for ci in 0..c {
                let mut acc = 0.0;
                for &(sp, wt) in taps {
                    acc += wt * xs[ci * h * w + sp];
                }
                out[ci * h * w + p] = acc;
            }
        });
        let needs = self.needs(x);
        Ok(self.push(vec![c, h, w], out, Op::Warp { x, flow }, needs))
    }

    /// Multiplies every channel by a constant per-pixel mask.
    pub fn mul_mask(&mut self, x: NodeId, mask: Arc<Vec<f32>>) -> Result<NodeId> {
        let (c, h, w) = self.chw(x)?;
        if mask.len() != h * w {
            return Err(Error::ShapeMismatch("mask size mismatch".into()));
        }
        let xs = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; c * h * w];
        for ci in 0..c {
            for p in 0..h * w {
                out[ci * h * w + p] = xs[ci * h * w + p] * mask[p];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![c, h, w], out, Op::MulMask { x, mask }, needs))
    }

    /// Per-pixel L2 normalization across channels:
    /// `y = x / sqrt(sum_c x^2 + eps^2)`.
    pub fn channel_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(x)?;
        let hw = h * w;
        let xs = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; c * hw];
        for p in 0..hw {
            let mut sq = CHANNEL_NORM_EPS * CHANNEL_NORM_EPS;
            for ci in 0..c {
                sq += xs[ci * hw + p] * xs[ci * hw + p];
            }
            let inv = 1.0 / sq.sqrt();
            for ci in 0..c {
                out[ci * hw + p] = xs[ci * hw + p] * inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![c, h, w], out, Op::ChannelNorm { x }, needs))
    }

    /// Mean L1 color difference over directed graph edges (pixel index
    /// pairs), normalized by edge count times channel count.
    pub fn edge_diff_l1(&mut self, x: NodeId, edges: Arc<Vec<(u32, u32)>>) -> Result<NodeId> {
        let (c, h, w) = self.chw(x)?;
        let hw = h * w;
        if edges.iter().any(|&(p, q)| p as usize >= hw || q as usize >= hw) {
            return Err(Error::ShapeMismatch("edge index out of bounds".into()));
        }
        if edges.is_empty() {
            return Err(Error::InvalidParameter("edge list is empty".into()));
        }
        let xs = &self.nodes[x.0].data;
        let mut total = 0.0f64;
        for &(p, q) in edges.iter() {
            for ci in 0..c {
                total +=
                    (xs[ci * hw + p as usize] - xs[ci * hw + q as usize]).abs() as f64;
            }
        }
        let v = (total / (edges.len() * c) as f64) as f32;
        let needs = self.needs(x);
        Ok(self.push(vec![1], vec![v], Op::EdgeDiffL1 { x, edges }, needs))
    }

    /// Reverse sweep from a scalar loss node. Each call seeds the loss with
    /// 1 and adds the resulting gradients into the persistent accumulators,
    /// so repeated backward calls without zeroing sum.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].shape != vec![1] {
            return Err(Error::ShapeMismatch("backward needs a scalar loss".into()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing on the tape is trainable
        }
        let mut scratch: Vec<Vec<f32>> = self
            .nodes
            .iter()
            .map(|n| if n.needs_grad { vec![0.0; n.data.len()] } else { Vec::new() })
            .collect();
        scratch[loss.0][0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &mut scratch)?;
        }
        for (node, s) in self.nodes.iter_mut().zip(&scratch) {
            if node.needs_grad {
                add_into(&mut node.grad, s);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, scratch: &mut [Vec<f32>]) -> Result<()> {
        let op = &self.nodes[i].op;
        // take the output gradient out of scratch, put it back afterwards
        let gy = std::mem::take(&mut scratch[i]);
        match op {
            Op::Leaf => {}
            Op::Conv3x3 { x, w, b } => {
                let (cin, h, wd) = self.chw(*x)?;
                let cout = self.nodes[w.0].shape[0];
                if self.needs(*x) {
                    let dx = conv3x3_backward_input(&gy, cout, h, wd, &self.nodes[w.0].data, cin);
                    add_into(&mut scratch[x.0], &dx);
                }
                if self.needs(*w) {
                    let dw =
                        conv3x3_backward_weight(&gy, cout, h, wd, &self.nodes[x.0].data, cin);
                    add_into(&mut scratch[w.0], &dw);
                }
                if self.needs(*b) {
                    let hw = h * wd;
                    for co in 0..cout {
                        let s: f64 = gy[co * hw..(co + 1) * hw].iter().map(|&v| v as f64).sum();
                        scratch[b.0][co] += s as f32;
                    }
                }
            }
            Op::Conv1x1 { x, w, b } => {
                let (cin, h, wd) = self.chw(*x)?;
                let cout = self.nodes[w.0].shape[0];
                let hw = h * wd;
                if self.needs(*x) {
                    let ws = &self.nodes[w.0].data;
                    let mut dx = vec![0.0f32; cin * hw];
                    dx.par_chunks_mut(hw).enumerate().for_each(|(ci, chunk)| {
                        for co in 0..cout {
                            let wv = ws[co * cin + ci];
                            let g = &gy[co * hw..(co + 1) * hw];
                            for (d, &gv) in chunk.iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    });
                    add_into(&mut scratch[x.0], &dx);
                }
                if self.needs(*w) {
                    let xs = &self.nodes[x.0].data;
                    let mut dw = vec![0.0f32; cout * cin];
                    dw.par_chunks_mut(cin).enumerate().for_each(|(co, chunk)| {
                        let g = &gy[co * hw..(co + 1) * hw];
                        for (ci, d) in chunk.iter_mut().enumerate() {
                            let src = &xs[ci * hw..(ci + 1) * hw];
                            let s: f64 =
                                g.iter().zip(src).map(|(&gv, &sv)| (gv * sv) as f64).sum();
                            *d = s as f32;
                        }
                    });
                    add_into(&mut scratch[w.0], &dw);
                }
                if self.needs(*b) {
                    for co in 0..cout {
                        let s: f64 = gy[co * hw..(co + 1) * hw].iter().map(|&v| v as f64).sum();
                        scratch[b.0][co] += s as f32;
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.needs(*x) {
                    let xs = &self.nodes[x.0].data;
                    let dx: Vec<f32> = gy
                        .iter()
                        .zip(xs)
                        .map(|(&g, &v)| if v >= 0.0 { g } else { g * slope })
                        .collect();
                    add_into(&mut scratch[x.0], &dx);
                }
            }
            Op::DownAvg2 { x } => {
                if self.needs(*x) {
                    let (c, h, w) = self.chw(*x)?;
                    let (nh, nw) = (h / 2, w / 2);
                    let mut dx = vec![0.0f32; c * h * w];
                    for ci in 0..c {
                        for y in 0..nh {
                            for xx in 0..nw {
                                let g = gy[ci * nh * nw + y * nw + xx] * 0.25;
                                for dy in 0..2 {
                                    for dxo in 0..2 {
                                        dx[ci * h * w + (2 * y + dy) * w + 2 * xx + dxo] += g;
                                    }
                                }
                            }
                        }
                    }
                    add_into(&mut scratch[x.0], &dx);
                }
            }
            Op::UpBilinear2 { x } => {
                if self.needs(*x) {
                    let (c, h, w) = self.chw(*x)?;
                    let (nh, nw) = (h * 2, w * 2);
                    let mut dx = vec![0.0f32; c * h * w];
                    for ci in 0..c {
                        let g = &gy[ci * nh * nw..(ci + 1) * nh * nw];
                        let d = &mut dx[ci * h * w..(ci + 1) * h * w];
                        for y in 0..nh {
                            for xx in 0..nw {
                                let gv = g[y * nw + xx];
                                for (sy, sx, wt) in upsample_taps(y, xx, h, w) {
                                    d[sy * w + sx] += wt * gv;
                                }
                            }
                        }
                    }
                    add_into(&mut scratch[x.0], &dx);
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].data.len();
                    if self.needs(p) {
                        let slice = gy[offset..offset + n].to_vec();
                        add_into(&mut scratch[p.0], &slice);
                    }
                    offset += n;
                }
            }
            Op::SliceChannels { x, start } => {
                if self.needs(*x) {
                    let (_, h, w) = self.chw(*x)?;
                    let hw = h * w;
                    let off = start * hw;
                    let g = &mut scratch[x.0];
                    for (k, &gv) in gy.iter().enumerate() {
                        g[off + k] += gv;
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_into(&mut scratch[a.0], &gy);
                }
                if self.needs(*b) {
                    add_into(&mut scratch[b.0], &gy);
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    add_into(&mut scratch[a.0], &gy);
                }
                if self.needs(*b) {
                    sub_into(&mut scratch[b.0], &gy);
                }
            }
            Op::Abs { x } => {
                if self.needs(*x) {
                    let xs = &self.nodes[x.0].data;
                    let dx: Vec<f32> = gy
                        .iter()
                        .zip(xs)
                        .map(|(&g, &v)| g * sign_subgradient(v))
                        .collect();
                    add_into(&mut scratch[x.0], &dx);
                }
            }
            Op::MulScalar { x, s } => {
                if self.needs(*x) {
                    let dx: Vec<f32> = gy.iter().map(|&g| g * s).collect();
                    add_into(&mut scratch[x.0], &dx);
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let g = gy[0];
                    for d in scratch[x.0].iter_mut() {
                        *d += g;
                    }
                }
            }
            Op::Mean { x } => {
                if self.needs(*x) {
                    let n = self.nodes[x.0].data.len() as f32;
                    let g = gy[0] / n;
                    for d in scratch[x.0].iter_mut() {
                        *d += g;
                    }
                }
            }
            Op::SmoothClamp01 { x } => {
                if self.needs(*x) {
                    // dy/dx = sigma(kx) - sigma(k(x-1))
                    let xs = &self.nodes[x.0].data;
                    let dx: Vec<f32> = gy
                        .iter()
                        .zip(xs)
                        .map(|(&g, &v)| {
                            g * (sigmoid(CLAMP_K * v) - sigmoid(CLAMP_K * (v - 1.0)))
                        })
                        .collect();
                    add_into(&mut scratch[x.0], &dx);
                }
            }
            Op::HardClamp01 { x } => {
                if self.needs(*x) {
                    let xs = &self.nodes[x.0].data;
                    let dx: Vec<f32> = gy
                        .iter()
                        .zip(xs)
                        .map(|(&g, &v)| if (0.0..=1.0).contains(&v) { g } else { 0.0 })
                        .collect();
                    add_into(&mut scratch[x.0], &dx);
                }
            }
            Op::Warp { x, flow } => {
                if self.needs(*x) {
                    let (c, h, w) = self.chw(*x)?;
                    let mut dx = vec![0.0f32; c * h * w];
                    for_each_warp_tap(flow, h, w, |p, taps| {
                        for ci in 0..c {
                            let gv = gy[ci * h * w + p];
                            for &(sp, wt) in taps {
                                dx[ci * h * w + sp] += wt * gv;
                            }
                        }
                    });
                    add_into(&mut scratch[x.0], &dx);
                }
            }
            Op::MulMask { x, mask } => {
                if self.needs(*x) {
                    let (c, h, w) = self.chw(*x)?;
                    let hw = h * w;
                    let mut dx = vec![0.0f32; c * hw];
                    for ci in 0..c {
                        for p in 0..hw {
                            dx[ci * hw + p] = gy[ci * hw + p] * mask[p];
                        }
                    }
                    add_into(&mut scratch[x.0], &dx);
                }
            }
            Op::ChannelNorm { x } => {
                if self.needs(*x) {
                    let (c, h, w) = self.chw(*x)?;
                    let hw = h * w;
                    let xs = &self.nodes[x.0].data;
                    let mut dx = vec![0.0f32; c * hw];
                    for p in 0..hw {
                        let mut sq = CHANNEL_NORM_EPS * CHANNEL_NORM_EPS;
                        for ci in 0..c {
                            sq += xs[ci * hw + p] * xs[ci * hw + p];
                        }
                        let n = sq.sqrt();
                        let mut dot = 0.0f32;
                        for ci in 0..c {
                            dot += gy[ci * hw + p] * xs[ci * hw + p];
                        }
                        let inv = 1.0 / n;
                        let inv3 = inv / sq;
                        for ci in 0..c {
                            dx[ci * hw + p] =
                                gy[ci * hw + p] * inv - xs[ci * hw + p] * dot * inv3;
                        }
                    }
                    add_into(&mut scratch[x.0], &dx);
                }
            }
            Op::EdgeDiffL1 { x, edges } => {
                if self.needs(*x) {
                    let (c, h, w) = self.chw(*x)?;
                    let hw = h * w;
                    let xs = &self.nodes[x.0].data;
                    let scale = gy[0] / (edges.len() * c) as f32;
                    let mut dx = vec![0.0f32; c * hw];
                    for &(p, q) in edges.iter() {
                        for ci in 0..c {
                            let s = sign_subgradient(
                                xs[ci * hw + p as usize] - xs[ci * hw + q as usize],
                            ) * scale;
                            dx[ci * hw + p as usize] += s;
                            dx[ci * hw + q as usize] -= s;
                        }
                    }
                    add_into(&mut scratch[x.0], &dx);
                }
            }
        }
        scratch[i] = gy;
        Ok(())
    }
}

fn sign_subgradient(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gate sharpness of [`Tape::smooth_clamp01`].
const CLAMP_K: f32 = 10.0;

/// Numerically stable `ln(1 + e^t)`.
fn softplus(t: f32) -> f32 {
    if t > 20.0 {
        t
    } else if t < -20.0 {
        t.exp()
    } else {
        (1.0 + t.exp()).ln()
    }
}

fn sigmoid(t: f32) -> f32 {
    1.0 / (1.0 + (-t).exp())
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

/// Bilinear taps for align-to-grid x2 upsampling: output pixel (y, x) samples
/// the input at ((y+0.5)/2 - 0.5, (x+0.5)/2 - 0.5), clamped to the border.
fn upsample_taps(y: usize, x: usize, h: usize, w: usize) -> Vec<(usize, usize, f32)> {
    let sy = ((y as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, (h - 1) as f32);
    let sx = ((x as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, (w - 1) as f32);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f32;
    let fx = sx - x0 as f32;
    vec![
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ]
}

/// Visits the bilinear taps of a backward warp. `taps` holds (source pixel
/// index, weight) pairs; out-of-bounds targets get no taps (zero fill).
fn for_each_warp_tap(
    flow: &FlowField,
    h: usize,
    w: usize,
    mut visit: impl FnMut(usize, &[(usize, f32)]),
) {
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.get(y, x);
            let sx = x as f32 + u;
            let sy = y as f32 + v;
            let p = y * w + x;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f32 || sy > (h - 1) as f32 {
                visit(p, &[]);
                continue;
            }
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f32;
            let fy = sy - y0 as f32;
            let taps = [
                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * w + x1, (1.0 - fy) * fx),
                (y1 * w + x0, fy * (1.0 - fx)),
                (y1 * w + x1, fy * fx),
            ];
            visit(p, &taps);
        }
    }
}

fn conv3x3_forward(
    xs: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    ws: &[f32],
    bs: &[f32],
    cout: usize,
) -> Vec<f32> {
    let hw = h * w;
    let mut out = vec![0.0f32; cout * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(co, chunk)| {
        chunk.iter_mut().for_each(|v| *v = bs[co]);
        for ci in 0..cin {
            let src = &xs[ci * hw..(ci + 1) * hw];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = ws[((co * cin + ci) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    accumulate_shifted(chunk, src, h, w, ky, kx, wv);
                }
            }
        }
    });
    out
}

/// `dst[y*w+x] += wv * src[(y+ky-1)*w + (x+kx-1)]` over the valid range.
fn accumulate_shifted(
    dst: &mut [f32],
    src: &[f32],
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    wv: f32,
) {
    let dy = ky as isize - 1;
    let dx = kx as isize - 1;
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (h as isize - dy).min(h as isize) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx).min(w as isize) as usize;
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x_lo..y * w + x_hi];
        let s = &src[sy * w + (x_lo as isize + dx) as usize..];
        for (dv, &sv) in d.iter_mut().zip(s) {
            *dv += wv * sv;
        }
    }
}

fn conv3x3_backward_input(
    gy: &[f32],
    cout: usize,
    h: usize,
    w: usize,
    ws: &[f32],
    cin: usize,
) -> Vec<f32> {
    let hw = h * w;
    let mut dx = vec![0.0f32; cin * hw];
    // dX[ci] = sum_co corr(gY[co], W[co,ci]) = conv with flipped kernel
    dx.par_chunks_mut(hw).enumerate().for_each(|(ci, chunk)| {
        for co in 0..cout {
            let g = &gy[co * hw..(co + 1) * hw];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = ws[((co * cin + ci) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    // output taps input at offset (ky-1, kx-1); the adjoint
                    // shifts the other way
                    accumulate_shifted(chunk, g, h, w, 2 - ky, 2 - kx, wv);
                }
            }
        }
    });
    dx
}

fn conv3x3_backward_weight(
    gy: &[f32],
    cout: usize,
    h: usize,
    w: usize,
    xs: &[f32],
    cin: usize,
) -> Vec<f32> {
    let hw = h * w;
    let mut dw = vec![0.0f32; cout * cin * 9];
    dw.par_chunks_mut(cin * 9).enumerate().for_each(|(co, chunk)| {
        let g = &gy[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let src = &xs[ci * hw..(ci + 1) * hw];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let dy = ky as isize - 1;
                    let dx_ = kx as isize - 1;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = (h as isize - dy).min(h as isize) as usize;
                    let x_lo = (-dx_).max(0) as usize;
                    let x_hi = (w as isize - dx_).min(w as isize) as usize;
                    let mut acc = 0.0f64;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let gr = &g[y * w + x_lo..y * w + x_hi];
                        let sr = &src[sy * w + (x_lo as isize + dx_) as usize..];
                        let mut row = 0.0f32;
                        for (&gv, &sv) in gr.iter().zip(sr) {
                            row += gv * sv;
                        }
                        acc += row as f64;
                    }
                    chunk[(ci * 3 + ky) * 3 + kx] = acc as f32;
                }
            }
        }
    });
    dw
}
