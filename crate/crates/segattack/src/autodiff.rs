//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Operations append nodes to a [`Tape`] and return [`NodeId`] handles;
//! [`Tape::backward`] walks the tape in reverse and produces exact
//! gradients for every node that requires them. The op set is exactly
//! what an encoder-decoder segmentation network and its losses need:
//! convolution, 2x2 max pooling, nearest-neighbor upsampling, channel
//! concatenation, pointwise functions and reductions.
//!
//! Graph construction is single-threaded; tensors recorded on the tape
//! are immutable. Heavy kernels (the im2col matmuls) parallelize over
//! disjoint output rows, so results are bit-identical regardless of
//! thread count.

use crate::tensor::{Tensor, TensorError};
use rayon::prelude::*;

/// Lower clamp applied to `log` inputs so losses stay finite.
pub const LOG_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        input: NodeId,
        /// Flat input index of the window maximum for each output element.
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Log {
        input: NodeId,
    },
    Clamp {
        input: NodeId,
        lo: f64,
        hi: f64,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    PowConst {
        input: NodeId,
        exponent: f64,
    },
    ScaleConst {
        input: NodeId,
        factor: f64,
    },
    AddConst {
        input: NodeId,
    },
    SumAll {
        input: NodeId,
    },
    MeanAll {
        input: NodeId,
    },
    SpatialSum {
        input: NodeId,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `id`, if tracked.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradients (targets, frozen parameters).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Convolution and spatial ops ─────────────────────────────────

    /// 2-D cross-correlation with per-channel bias.
    ///
    /// `input` is `[N, Cin, H, W]`, `weight` is `[Cout, Cin, k, k]`,
    /// `bias` is `[Cout]`. Output is `[N, Cout, H', W']` with
    /// `H' = (H + 2*padding - k)/stride + 1`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let (n, cin, h, w) = self.value(input).dims4("conv2d input")?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4("conv2d weight")?;
        if kh != kw {
            return Err(TensorError::BadDimension {
                op: "conv2d",
                dim: 3,
                shape: self.value(weight).shape().to_vec(),
                reason: "kernel must be square".into(),
            });
        }
        let k = kh;
        if k == 0 {
            return Err(TensorError::BadDimension {
                op: "conv2d",
                dim: 2,
                shape: self.value(weight).shape().to_vec(),
                reason: "kernel size must be positive".into(),
            });
        }
        if wcin != cin {
            return Err(TensorError::BadDimension {
                op: "conv2d",
                dim: 1,
                shape: self.value(weight).shape().to_vec(),
                reason: format!("weight expects {wcin} input channels, input has {cin}"),
            });
        }
        if self.value(bias).shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: self.value(bias).shape().to_vec(),
                rhs: vec![cout],
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let (oh, ow) = conv_out_dims(h, w, k, stride, padding)?;

        let cols_len = cin * k * k;
        let mut out = vec![0.0; n * cout * oh * ow];
        let w_mat = self.value(weight).data();
        let bias_data = self.value(bias).data().to_vec();
        let in_data = self.value(input).data();
        let mut cols = vec![0.0; cols_len * oh * ow];
        for s in 0..n {
            im2col(
                &in_data[s * cin * h * w..(s + 1) * cin * h * w],
                cin,
                h,
                w,
                k,
                stride,
                padding,
                oh,
                ow,
                &mut cols,
            );
            let out_s = &mut out[s * cout * oh * ow..(s + 1) * cout * oh * ow];
            matmul(w_mat, &cols, cout, cols_len, oh * ow, out_s);
            for (co, row) in out_s.chunks_exact_mut(oh * ow).enumerate() {
                let b = bias_data[co];
                for v in row {
                    *v += b;
                }
            }
        }

        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = self.value(input).dims4("max_pool2")?;
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(TensorError::BadDimension {
                op: "max_pool2",
                dim: if h.is_multiple_of(2) { 3 } else { 2 },
                shape: self.value(input).shape().to_vec(),
                reason: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = self.value(input).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        for nc in 0..n * c {
            let plane = &data[nc * h * w..(nc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (2 * oy) * w + 2 * ox;
                    let mut best = plane[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + (2 * ox + dx);
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                    let o = oy * ow + ox;
                    out[nc * oh * ow + o] = best;
                    argmax[nc * oh * ow + o] = (nc * h * w + best_idx) as u32;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::MaxPool2 { input, argmax }))
    }

    /// Nearest-neighbor 2x upsampling: every pixel becomes a 2x2 block.
    pub fn upsample_nearest2(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = self.value(input).dims4("upsample_nearest2")?;
        let data = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &data[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for y in 0..h {
                for x in 0..w {
                    let v = src[y * w + x];
                    dst[(2 * y) * ow + 2 * x] = v;
                    dst[(2 * y) * ow + 2 * x + 1] = v;
                    dst[(2 * y + 1) * ow + 2 * x] = v;
                    dst[(2 * y + 1) * ow + 2 * x + 1] = v;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::Upsample2 { input }))
    }

    /// Concatenate along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (na, ca, ha, wa) = self.value(a).dims4("concat_channels lhs")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels rhs")?;
        if na != nb || ha != hb || wa != wb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let plane = ha * wa;
        let a_data = self.value(a).data();
        let b_data = self.value(b).data();
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        for s in 0..na {
            out.extend_from_slice(&a_data[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&b_data[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::ConcatChannels { a, b }))
    }

    // ── Pointwise ops ───────────────────────────────────────────────

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(input).map(|v| v.max(0.0));
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::Relu { input }))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(input).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::Sigmoid { input }))
    }

    /// Natural log with the input clamped to `[LOG_CLAMP, inf)` first.
    pub fn log(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(input).map(|v| v.max(LOG_CLAMP).ln());
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::Log { input }))
    }

    /// Clamp to `[lo, hi]`; gradient passes through inside the interval.
    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> Result<NodeId, TensorError> {
        if !(lo <= hi) {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                reason: format!("invalid interval [{lo}, {hi}]"),
            });
        }
        let value = self.value(input).map(|v| v.clamp(lo, hi));
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::Clamp { input, lo, hi }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, TensorError> {
        // No implicit broadcasting: shapes must match exactly.
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, op(a, b)))
    }

    /// Elementwise `x^exponent`. For non-integral or negative exponents the
    /// input must be positive.
    pub fn pow_const(&mut self, input: NodeId, exponent: f64) -> Result<NodeId, TensorError> {
        let value = self.value(input).map(|v| v.powf(exponent));
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::PowConst { input, exponent }))
    }

    pub fn scale_const(&mut self, input: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::ScaleConst { input, factor }))
    }

    pub fn add_const(&mut self, input: NodeId, offset: f64) -> Result<NodeId, TensorError> {
        let value = self.value(input).map(|v| v + offset);
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::AddConst { input }))
    }

    // ── Reductions ──────────────────────────────────────────────────

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let s: f64 = self.value(input).data().iter().sum();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(Tensor::scalar(s), rg, Op::SumAll { input }))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let n = self.value(input).numel();
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                reason: "mean of an empty tensor".into(),
            });
        }
        let s: f64 = self.value(input).data().iter().sum();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(Tensor::scalar(s / n as f64), rg, Op::MeanAll { input }))
    }

    /// Per-sample, per-channel spatial sum: `[N, C, H, W] -> [N, C]`.
    pub fn spatial_sum(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = self.value(input).dims4("spatial_sum")?;
        let data = self.value(input).data();
        let out: Vec<f64> = (0..n * c)
            .map(|nc| data[nc * h * w..(nc + 1) * h * w].iter().sum())
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(value, rg, Op::SpatialSum { input }))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Returns gradients for every
    /// node with `requires_grad` reachable from the root; each tape node is
    /// visited exactly once, in reverse insertion order.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(
            self.value(root).shape().to_vec(),
            vec![1.0],
        )?);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.accumulate_inputs(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(
        &self,
        node: usize,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        let add_into = |id: NodeId, contribution: Vec<f64>, grads: &mut [Option<Tensor>]| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(g) => {
                    for (dst, src) in g.data_mut().iter_mut().zip(&contribution) {
                        *dst += src;
                    }
                }
                slot => {
                    *slot = Some(
                        Tensor::new(self.value(id).shape().to_vec(), contribution)
                            .expect("gradient matches input shape"),
                    );
                }
            }
        };

        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (n, cin, h, w) = self.value(*input).dims4("conv2d input")?;
                let (cout, _, k, _) = self.value(*weight).dims4("conv2d weight")?;
                let (oh, ow) = conv_out_dims(h, w, k, *stride, *padding)?;
                let plane = oh * ow;
                let cols_len = cin * k * k;
                let g = gout.data();
                let in_data = self.value(*input).data();
                let w_mat = self.value(*weight).data();

                let need_input = self.nodes[input.0].requires_grad;
                let need_weight = self.nodes[weight.0].requires_grad;
                let need_bias = self.nodes[bias.0].requires_grad;

                let mut d_input = vec![0.0; if need_input { n * cin * h * w } else { 0 }];
                let mut d_weight = vec![0.0; if need_weight { w_mat.len() } else { 0 }];
                let mut d_bias = vec![0.0; if need_bias { cout } else { 0 }];
                let mut cols = vec![0.0; cols_len * plane];
                let mut d_cols = vec![0.0; if need_input { cols_len * plane } else { 0 }];
                let mut dw_sample = vec![0.0; if need_weight { w_mat.len() } else { 0 }];

                for s in 0..n {
                    let g_s = &g[s * cout * plane..(s + 1) * cout * plane];
                    if need_bias {
                        for (co, row) in g_s.chunks_exact(plane).enumerate() {
                            d_bias[co] += row.iter().sum::<f64>();
                        }
                    }
                    if need_weight {
                        im2col(
                            &in_data[s * cin * h * w..(s + 1) * cin * h * w],
                            cin,
                            h,
                            w,
                            k,
                            *stride,
                            *padding,
                            oh,
                            ow,
                            &mut cols,
                        );
                        matmul_abt(g_s, &cols, cout, plane, cols_len, &mut dw_sample);
                        for (dst, src) in d_weight.iter_mut().zip(&dw_sample) {
                            *dst += src;
                        }
                    }
                    if need_input {
                        matmul_atb(w_mat, g_s, cout, cols_len, plane, &mut d_cols);
                        col2im(
                            &d_cols,
                            cin,
                            h,
                            w,
                            k,
                            *stride,
                            *padding,
                            oh,
                            ow,
                            &mut d_input[s * cin * h * w..(s + 1) * cin * h * w],
                        );
                    }
                }
                if need_input {
                    add_into(*input, d_input, grads);
                }
                if need_weight {
                    add_into(*weight, d_weight, grads);
                }
                if need_bias {
                    add_into(*bias, d_bias, grads);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    d[src as usize] += gout.data()[o];
                }
                add_into(*input, d, grads);
            }
            Op::Upsample2 { input } => {
                let (n, c, h, w) = self.value(*input).dims4("upsample_nearest2")?;
                let (oh, ow) = (2 * h, 2 * w);
                let g = gout.data();
                let mut d = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    let gsrc = &g[nc * oh * ow..(nc + 1) * oh * ow];
                    let dst = &mut d[nc * h * w..(nc + 1) * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            dst[y * w + x] = gsrc[(2 * y) * ow + 2 * x]
                                + gsrc[(2 * y) * ow + 2 * x + 1]
                                + gsrc[(2 * y + 1) * ow + 2 * x]
                                + gsrc[(2 * y + 1) * ow + 2 * x + 1];
                        }
                    }
                }
                add_into(*input, d, grads);
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4("concat lhs")?;
                let (_, cb, _, _) = self.value(*b).dims4("concat rhs")?;
                let plane = h * w;
                let g = gout.data();
                let mut da = vec![0.0; n * ca * plane];
                let mut db = vec![0.0; n * cb * plane];
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    da[s * ca * plane..(s + 1) * ca * plane]
                        .copy_from_slice(&g[base..base + ca * plane]);
                    db[s * cb * plane..(s + 1) * cb * plane]
                        .copy_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                add_into(*a, da, grads);
                add_into(*b, db, grads);
            }
            Op::Relu { input } => {
                let d = zip_grad(gout, self.value(*input), |g, x| if x > 0.0 { g } else { 0.0 });
                add_into(*input, d, grads);
            }
            Op::Sigmoid { input } => {
                let d = zip_grad(gout, &self.nodes[node].value, |g, s| g * s * (1.0 - s));
                add_into(*input, d, grads);
            }
            Op::Log { input } => {
                let d = zip_grad(gout, self.value(*input), |g, x| {
                    if x >= LOG_CLAMP {
                        g / x
                    } else {
                        0.0
                    }
                });
                add_into(*input, d, grads);
            }
            Op::Clamp { input, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let d = zip_grad(gout, self.value(*input), |g, x| {
                    if x >= lo && x <= hi {
                        g
                    } else {
                        0.0
                    }
                });
                add_into(*input, d, grads);
            }
            Op::Add { a, b } => {
                add_into(*a, gout.data().to_vec(), grads);
                add_into(*b, gout.data().to_vec(), grads);
            }
            Op::Sub { a, b } => {
                add_into(*a, gout.data().to_vec(), grads);
                add_into(*b, gout.data().iter().map(|g| -g).collect(), grads);
            }
            Op::Mul { a, b } => {
                let da = zip_grad(gout, self.value(*b), |g, y| g * y);
                let db = zip_grad(gout, self.value(*a), |g, x| g * x);
                add_into(*a, da, grads);
                add_into(*b, db, grads);
            }
            Op::PowConst { input, exponent } => {
                let e = *exponent;
                let d = zip_grad(gout, self.value(*input), |g, x| {
                    if e == 0.0 {
                        0.0
                    } else {
                        g * e * x.powf(e - 1.0)
                    }
                });
                add_into(*input, d, grads);
            }
            Op::ScaleConst { input, factor } => {
                let f = *factor;
                add_into(*input, gout.data().iter().map(|g| g * f).collect(), grads);
            }
            Op::AddConst { input } => {
                add_into(*input, gout.data().to_vec(), grads);
            }
            Op::SumAll { input } => {
                let g = gout.data()[0];
                add_into(*input, vec![g; self.value(*input).numel()], grads);
            }
            Op::MeanAll { input } => {
                let n = self.value(*input).numel();
                let g = gout.data()[0] / n as f64;
                add_into(*input, vec![g; n], grads);
            }
            Op::SpatialSum { input } => {
                let (n, c, h, w) = self.value(*input).dims4("spatial_sum")?;
                let g = gout.data();
                let mut d = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    d[nc * h * w..(nc + 1) * h * w].fill(g[nc]);
                }
                add_into(*input, d, grads);
            }
        }
        Ok(())
    }
}

fn zip_grad(gout: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    gout.data()
        .iter()
        .zip(other.data())
        .map(|(&g, &x)| f(g, x))
        .collect()
}

fn conv_out_dims(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize), TensorError> {
    let check = |dim: usize, name: usize| -> Result<usize, TensorError> {
        let padded = dim + 2 * padding;
        if padded < k || !(padded - k).is_multiple_of(stride) {
            return Err(TensorError::BadDimension {
                op: "conv2d",
                dim: name,
                shape: vec![h, w],
                reason: format!(
                    "({dim} + 2*{padding} - {k}) must be a nonnegative multiple of stride {stride}"
                ),
            });
        }
        Ok((padded - k) / stride + 1)
    };
    Ok((check(h, 2)?, check(w, 3)?))
}

/// Lower one sample into a `[cin*k*k, oh*ow]` patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let plane = oh * ow;
    for ci in 0..cin {
        let src = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[(ci * k * k + ky * k + kx) * plane..][..plane];
                if stride == 1 {
                    // Valid ox range maps to a contiguous source slice.
                    let lo = padding.saturating_sub(kx).min(ow);
                    let hi = (w + padding - kx).min(ow).max(lo);
                    for oy in 0..oh {
                        let iy = (oy + ky) as isize - padding as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        dst[..lo].fill(0.0);
                        dst[lo..hi].copy_from_slice(&src_row[lo + kx - padding..hi + kx - padding]);
                        dst[hi..].fill(0.0);
                    }
                } else {
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back into an input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let plane = oh * ow;
    for ci in 0..cin {
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[(ci * k * k + ky * k + kx) * plane..][..plane];
                if stride == 1 {
                    let lo = padding.saturating_sub(kx).min(ow);
                    let hi = (w + padding - kx).min(ow).max(lo);
                    for oy in 0..oh {
                        let iy = (oy + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let target = &mut dst_row[lo + kx - padding..hi + kx - padding];
                        for (o, &v) in target.iter_mut().zip(&row[oy * ow + lo..oy * ow + hi]) {
                            *o += v;
                        }
                    }
                } else {
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Work threshold below which the matmul kernels stay single-threaded.
const PAR_FLOPS: usize = 1 << 18;
/// Column tile width; 4 output rows x 512 columns stays inside L1.
const COL_TILE: usize = 512;

fn par_row_chunks(out: &mut [f64], n: usize, m: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    if work >= PAR_FLOPS && m > 1 {
        let rows = m.div_ceil(rayon::current_num_threads().max(1)).max(1);
        out.par_chunks_mut(rows * n)
            .enumerate()
            .for_each(|(ci, chunk)| f(ci * rows, chunk));
    } else {
        f(0, out);
    }
}

/// `out = a @ b` with `a: [m, k]`, `b: [k, n]`. Threads own disjoint row
/// chunks and each element accumulates in a fixed order, so the result
/// does not depend on thread count.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let chunk_fn = |i0: usize, chunk: &mut [f64]| {
        chunk.fill(0.0);
        let rows = chunk.len() / n;
        let mut j0 = 0;
        while j0 < n {
            let jt = COL_TILE.min(n - j0);
            let mut ib = 0;
            while ib < rows {
                let i = i0 + ib;
                if rows - ib >= 4 {
                    let (r0, rest) = chunk[ib * n..].split_at_mut(n);
                    let (r1, rest) = rest.split_at_mut(n);
                    let (r2, r3) = rest.split_at_mut(n);
                    let (t0, t1, t2, t3) = (
                        &mut r0[j0..j0 + jt],
                        &mut r1[j0..j0 + jt],
                        &mut r2[j0..j0 + jt],
                        &mut r3[j0..j0 + jt],
                    );
                    for p in 0..k {
                        let a0 = a[i * k + p];
                        let a1 = a[(i + 1) * k + p];
                        let a2 = a[(i + 2) * k + p];
                        let a3 = a[(i + 3) * k + p];
                        let br = &b[p * n + j0..p * n + j0 + jt];
                        for jj in 0..jt {
                            let bv = br[jj];
                            t0[jj] += a0 * bv;
                            t1[jj] += a1 * bv;
                            t2[jj] += a2 * bv;
                            t3[jj] += a3 * bv;
                        }
                    }
                    ib += 4;
                } else {
                    let row = &mut chunk[ib * n + j0..ib * n + j0 + jt];
                    for p in 0..k {
                        let av = a[i * k + p];
                        let br = &b[p * n + j0..p * n + j0 + jt];
                        for (o, &bv) in row.iter_mut().zip(br) {
                            *o += av * bv;
                        }
                    }
                    ib += 1;
                }
            }
            j0 += jt;
        }
    };
    par_row_chunks(out, n, m, m * k * n, chunk_fn);
}

/// `out = a @ b^T` with `a: [m, p]`, `b: [n, p]`, `out: [m, n]`.
pub(crate) fn matmul_abt(a: &[f64], b: &[f64], m: usize, p: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * n);
    let chunk_fn = |i0: usize, chunk: &mut [f64]| {
        let rows = chunk.len() / n;
        for ib in 0..rows {
            let i = i0 + ib;
            let a_row = &a[i * p..(i + 1) * p];
            let out_row = &mut chunk[ib * n..(ib + 1) * n];
            let mut j = 0;
            while j + 2 <= n {
                let b0 = &b[j * p..(j + 1) * p];
                let b1 = &b[(j + 1) * p..(j + 2) * p];
                let mut acc0 = 0.0;
                let mut acc1 = 0.0;
                for q in 0..p {
                    let av = a_row[q];
                    acc0 += av * b0[q];
                    acc1 += av * b1[q];
                }
                out_row[j] = acc0;
                out_row[j + 1] = acc1;
                j += 2;
            }
            if j < n {
                let bj = &b[j * p..(j + 1) * p];
                out_row[j] = a_row.iter().zip(bj).map(|(&x, &y)| x * y).sum();
            }
        }
    };
    par_row_chunks(out, n, m, m * p * n, chunk_fn);
}

/// `out = a^T @ b` with `a: [r, m]`, `b: [r, n]`, `out: [m, n]`.
pub(crate) fn matmul_atb(a: &[f64], b: &[f64], r: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(out.len(), m * n);
    let chunk_fn = |j0: usize, chunk: &mut [f64]| {
        chunk.fill(0.0);
        let rows = chunk.len() / n;
        let mut c0 = 0;
        while c0 < n {
            let ct = COL_TILE.min(n - c0);
            let mut jb = 0;
            while jb < rows {
                let j = j0 + jb;
                if rows - jb >= 4 {
                    let (r0, rest) = chunk[jb * n..].split_at_mut(n);
                    let (r1, rest) = rest.split_at_mut(n);
                    let (r2, r3) = rest.split_at_mut(n);
                    let (t0, t1, t2, t3) = (
                        &mut r0[c0..c0 + ct],
                        &mut r1[c0..c0 + ct],
                        &mut r2[c0..c0 + ct],
                        &mut r3[c0..c0 + ct],
                    );
                    for i in 0..r {
                        let a0 = a[i * m + j];
                        let a1 = a[i * m + j + 1];
                        let a2 = a[i * m + j + 2];
                        let a3 = a[i * m + j + 3];
                        let br = &b[i * n + c0..i * n + c0 + ct];
                        for cc in 0..ct {
                            let bv = br[cc];
                            t0[cc] += a0 * bv;
                            t1[cc] += a1 * bv;
                            t2[cc] += a2 * bv;
                            t3[cc] += a3 * bv;
                        }
                    }
                    jb += 4;
                } else {
                    let row = &mut chunk[jb * n + c0..jb * n + c0 + ct];
                    for i in 0..r {
                        let av = a[i * m + j];
                        let br = &b[i * n + c0..i * n + c0 + ct];
                        for (o, &bv) in row.iter_mut().zip(br) {
                            *o += av * bv;
                        }
                    }
                    jb += 1;
                }
            }
            c0 += ct;
        }
    };
    par_row_chunks(out, n, m, r * m * n, chunk_fn);
}
