//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and whatever it needs to
//! run its backward rule. Inputs always precede their consumers, so a single
//! reverse sweep over the node list visits each op exactly once.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;
/// Denominator guard of [`Tape::l2_normalize`].
pub const L2_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum Norm<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with frozen running statistics.
    Infer { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one train-mode batch-norm call. `var` is the
/// unbiased estimate used for the running average.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
        cols: Vec<f64>,
    },
    Depthwise {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Relu {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
        plane: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        plane: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    Concat {
        a: Var,
        b: Var,
        rows: usize,
        da: usize,
        db: usize,
    },
    L2Normalize {
        x: Var,
        dim: usize,
        norms: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        classes: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Square {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    RowDistance {
        z: Var,
        c: Var,
        dim: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    zero_norm_rows: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of all-zero rows seen by [`Tape::l2_normalize`].
    pub fn zero_norm_rows(&self) -> usize {
        self.zero_norm_rows
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor; it is differentiable iff the tensor requires gradients.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-formed")
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradient of `v` into the gradient slot of `t`.
    pub fn accumulate_grad_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if t.shape() != self.shape(v) {
            return Err(Error::dim(
                "accumulate_grad_into",
                "shape",
                format!("{:?} vs {:?}", t.shape(), self.shape(v)),
            ));
        }
        if let (Some(src), Some(dst)) = (self.grad(v), t.grad_mut()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        Ok(())
    }

    fn image_dims(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::dim(op, "rank", format!("expected NCHW input, got {s:?}"))),
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<[usize; 2]> {
        match *self.shape(v) {
            [n, d] => Ok([n, d]),
            ref s => Err(Error::dim(op, "rank", format!("expected a matrix, got {s:?}"))),
        }
    }

    /// Standard 2D convolution. `kernel: [O, C, K, K]`, `bias: [O]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.image_dims("conv2d", x)?;
        let (o, kc, k) = match *self.shape(kernel) {
            [o, kc, k1, k2] if k1 == k2 => (o, kc, k1),
            ref s => {
                return Err(Error::dim(
                    "conv2d",
                    "kernel",
                    format!("expected [O, C, K, K], got {s:?}"),
                ))
            }
        };
        if kc != c {
            return Err(Error::dim(
                "conv2d",
                "channels",
                format!("input has {c}, kernel expects {kc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride", "stride must be at least 1"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::dim(
                    "conv2d",
                    "bias",
                    format!("expected [{o}], got {:?}", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom::new(n, c, h, w, k, stride, pad).ok_or_else(|| {
            Error::dim(
                "conv2d",
                "height/width",
                format!("{h}x{w} with pad {pad} is smaller than kernel {k}"),
            )
        })?;
        let (out, cols) =
            kernels::conv2d_forward(&geom, self.value(x), self.value(kernel), bias.map(|b| self.value(b)), o);
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        Ok(self.push(
            vec![n, o, geom.oh, geom.ow],
            out,
            rg,
            Op::Conv2d {
                x,
                w: kernel,
                b: bias,
                geom,
                out_ch: o,
                cols: if rg { cols } else { Vec::new() },
            },
        ))
    }

    /// Channel-wise convolution. `kernel: [C, 1, K, K]`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.image_dims("depthwise_conv2d", x)?;
        let (kc, k) = match *self.shape(kernel) {
            [kc, 1, k1, k2] if k1 == k2 => (kc, k1),
            ref s => {
                return Err(Error::dim(
                    "depthwise_conv2d",
                    "kernel",
                    format!("expected [C, 1, K, K], got {s:?}"),
                ))
            }
        };
        if kc != c {
            return Err(Error::dim(
                "depthwise_conv2d",
                "channels",
                format!("input has {c}, kernel has {kc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("depthwise_conv2d", "stride", "stride must be at least 1"));
        }
        let geom = ConvGeom::new(n, c, h, w, k, stride, pad).ok_or_else(|| {
            Error::dim(
                "depthwise_conv2d",
                "height/width",
                format!("{h}x{w} smaller than kernel {k}"),
            )
        })?;
        let out = kernels::depthwise_forward(&geom, self.value(x), self.value(kernel));
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            vec![n, c, geom.oh, geom.ow],
            out,
            rg,
            Op::Depthwise { x, w: kernel, geom },
        ))
    }

    /// 1x1 channel-mixing convolution. `kernel: [O, C, 1, 1]`.
    pub fn pointwise_conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        match *self.shape(kernel) {
            [_, _, 1, 1] => self.conv2d(x, kernel, bias, 1, 0),
            ref s => Err(Error::dim(
                "pointwise_conv2d",
                "kernel",
                format!("expected [O, C, 1, 1], got {s:?}"),
            )),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Relu { x })
    }

    /// 2x2 max pooling with stride 2. Ties go to the first window element in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.image_dims("maxpool2", x)?;
        if h % 2 != 0 {
            return Err(Error::dim("maxpool2", "height", format!("odd extent {h}")));
        }
        if w % 2 != 0 {
            return Err(Error::dim("maxpool2", "width", format!("odd extent {w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n, c, oh, ow], out, rg, Op::MaxPool2 { x, argmax }))
    }

    /// Per-channel spatial mean, `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.image_dims("global_avg_pool", x)?;
        let plane = h * w;
        let out = self
            .value(x)
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n, c], out, rg, Op::GlobalAvgPool { x, plane }))
    }

    /// Batch normalization over `N x H x W` per channel, followed by the affine
    /// `gamma * xhat + beta`. Train mode also returns the batch statistics.
    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, norm: Norm<'_>) -> Result<(Var, Option<BatchStats>)> {
        let [n, c, h, w] = self.image_dims("batchnorm2d", x)?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [c] {
                return Err(Error::dim(
                    "batchnorm2d",
                    "channels",
                    format!("{name} has shape {:?}, input has {c} channels", self.shape(p)),
                ));
            }
        }
        let plane = h * w;
        let count = n * plane;
        let xv = self.value(x);
        let (mean, var_biased, stats) = match norm {
            Norm::Train => {
                if n < 2 {
                    return Err(Error::DegenerateBatch {
                        op: "batchnorm2d",
                        batch: n,
                    });
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xv[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().sum::<f64>();
                    }
                    let mut m = s / count as f64;
                    // second-pass correction keeps a constant channel's mean exact
                    let mut resid = 0.0;
                    for i in 0..n {
                        resid += xv[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                            .iter()
                            .map(|v| v - m)
                            .sum::<f64>();
                    }
                    m += resid / count as f64;
                    let mut ss = 0.0;
                    for i in 0..n {
                        ss += xv[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                let unbiased = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Norm::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("batchnorm2d", "channels", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                for ((xh, o), v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xv[r]) {
                    *xh = (v - mean[ch]) * inv_std[ch];
                    *o = g[ch] * *xh + b[ch];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let var = self.push(
            vec![n, c, h, w],
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels: c,
                plane,
                xhat,
                inv_std,
                train: matches!(norm, Norm::Train),
            },
        );
        Ok((var, stats))
    }

    /// `x: [N, D] @ weight: [D, E] + bias: [E]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [n, d] = self.matrix_dims("linear", x)?;
        let [wd, e] = self.matrix_dims("linear", weight)?;
        if wd != d {
            return Err(Error::dim(
                "linear",
                "inner",
                format!("input width {d}, weight rows {wd}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [e] {
                return Err(Error::dim(
                    "linear",
                    "bias",
                    format!("expected [{e}], got {:?}", self.shape(b)),
                ));
            }
        }
        let out = kernels::linear_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), n, d, e);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        Ok(self.push(
            vec![n, e],
            out,
            rg,
            Op::Linear {
                x,
                w: weight,
                b: bias,
                rows: n,
                d_in: d,
                d_out: e,
            },
        ))
    }

    /// Row-wise concatenation `[a | b]`.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, da] = self.matrix_dims("concat_features", a)?;
        let [nb, db] = self.matrix_dims("concat_features", b)?;
        if na != nb {
            return Err(Error::dim("concat_features", "batch", format!("{na} vs {nb}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(na * (da + db));
        for i in 0..na {
            out.extend_from_slice(&av[i * da..(i + 1) * da]);
            out.extend_from_slice(&bv[i * db..(i + 1) * db]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![na, da + db], out, rg, Op::Concat { a, b, rows: na, da, db }))
    }

    /// Rows scaled to unit length, `z / (|z| + eps)` with `eps` = [`L2_EPS`].
    /// All-zero rows stay zero and are counted in [`Tape::zero_norm_rows`].
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let [_, d] = self.matrix_dims("l2_normalize", x)?;
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.len() / d);
        let mut out = Vec::with_capacity(xv.len());
        let mut zero_rows = 0;
        for row in xv.chunks_exact(d) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm == 0.0 {
                zero_rows += 1;
            }
            let s = nrm + L2_EPS;
            out.extend(row.iter().map(|v| v / s));
            norms.push(nrm);
        }
        self.zero_norm_rows += zero_rows;
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, rg, Op::L2Normalize { x, dim: d, norms }))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.matrix_dims("softmax_cross_entropy", logits)?;
        if labels.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                "batch",
                format!("{n} logit rows, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Validation(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (row, &label) in lv.chunks_exact(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss / n as f64],
            rg,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
                classes: k,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                "shape",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_op(a, b, |x, y| x + y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_op(a, b, |x, y| x - y, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_op(a, b, |x, y| x * y, Op::Mul { a, b }))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|v| scale * v + shift).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Affine { x, scale })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v * v).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Square { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![m], rg, Op::Mean { x })
    }

    /// Selects entries of a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let len = match *self.shape(x) {
            [len] => len,
            ref s => return Err(Error::dim("gather", "rank", format!("expected a vector, got {s:?}"))),
        };
        if idx.is_empty() {
            return Err(Error::Validation("gather with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::dim(
                "gather",
                "index",
                format!("{bad} out of range for length {len}"),
            ));
        }
        let xv = self.value(x);
        let out = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![idx.len()], out, rg, Op::Gather { x, idx: idx.to_vec() }))
    }

    /// Euclidean distance of every row of `z: [N, D]` to `c: [D]`.
    pub fn row_distance(&mut self, z: Var, c: Var) -> Result<Var> {
        let [n, d] = self.matrix_dims("row_distance", z)?;
        if self.node(c).value.len() != d || self.shape(c).len() > 2 {
            return Err(Error::dim(
                "row_distance",
                "width",
                format!("rows have width {d}, center has shape {:?}", self.shape(c)),
            ));
        }
        let cv = self.value(c);
        let out = self
            .value(z)
            .chunks_exact(d)
            .map(|row| row.iter().zip(cv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[z, c]);
        Ok(self.push(vec![n], out, rg, Op::RowDistance { z, c, dim: d }))
    }

    /// Runs the reverse sweep from a scalar `loss`. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward called twice on the same tape".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            let contributions = self.vjp(i, &gout);
            self.grads[i] = Some(gout);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for every input.
    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let zeros_like = |v: Var| vec![0.0; self.nodes[v.0].value.len()];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch,
                cols,
            } => {
                let mut dx = want(*x).then(|| zeros_like(*x));
                let mut dw = want(*w).then(|| zeros_like(*w));
                let mut db = b.filter(|b| want(*b)).map(zeros_like);
                kernels::conv2d_backward(
                    geom,
                    self.value(*x),
                    cols,
                    self.value(*w),
                    *out_ch,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, db) {
                    out.push((*b, d));
                }
            }
            Op::Depthwise { x, w, geom } => {
                let mut dx = want(*x).then(|| zeros_like(*x));
                let mut dw = want(*w).then(|| zeros_like(*w));
                kernels::depthwise_backward(
                    geom,
                    self.value(*x),
                    self.value(*w),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
            }
            Op::Relu { x } => {
                let d = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = zeros_like(*x);
                for (&idx, &gv) in argmax.iter().zip(g) {
                    d[idx] += gv;
                }
                out.push((*x, d));
            }
            Op::GlobalAvgPool { x, plane } => {
                let inv = 1.0 / *plane as f64;
                let d = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, *plane)).collect();
                out.push((*x, d));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels,
                plane,
                xhat,
                inv_std,
                train,
            } => {
                let c = *channels;
                let n = xhat.len() / (c * plane);
                let gam = self.value(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                        for (gv, xh) in g[r.clone()].iter().zip(&xhat[r]) {
                            dgamma[ch] += gv * xh;
                            dbeta[ch] += gv;
                        }
                    }
                }
                if want(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    let m = (n * plane) as f64;
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch];
                        for i in 0..n {
                            let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                            for ((d, gv), xh) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *d = if *train {
                                    k * (gv - dbeta[ch] / m - xh * dgamma[ch] / m)
                                } else {
                                    k * gv
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                d_in,
                d_out,
            } => {
                let mut dx = want(*x).then(|| zeros_like(*x));
                let mut dw = want(*w).then(|| zeros_like(*w));
                let mut db = b.filter(|b| want(*b)).map(zeros_like);
                kernels::linear_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *rows,
                    *d_in,
                    *d_out,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, db) {
                    out.push((*b, d));
                }
            }
            Op::Concat { a, b, rows, da, db } => {
                let w = da + db;
                let mut ga = Vec::with_capacity(rows * da);
                let mut gb = Vec::with_capacity(rows * db);
                for r in 0..*rows {
                    ga.extend_from_slice(&g[r * w..r * w + da]);
                    gb.extend_from_slice(&g[r * w + da..(r + 1) * w]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::L2Normalize { x, dim, norms } => {
                let xv = self.value(*x);
                let mut d = vec![0.0; xv.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    if nrm == 0.0 {
                        continue;
                    }
                    let s = nrm + L2_EPS;
                    let span = r * dim..(r + 1) * dim;
                    let xg: f64 = xv[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                    let k = xg / (s * s * nrm);
                    for j in span {
                        d[j] = g[j] / s - xv[j] * k;
                    }
                }
                out.push((*x, d));
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
                classes,
            } => {
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * classes + l] -= scale;
                }
                out.push((*logits, d));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                out.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                out.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
            }
            Op::Affine { x, scale } => out.push((*x, g.iter().map(|v| v * scale).collect())),
            Op::Square { x } => {
                out.push((*x, self.value(*x).iter().zip(g).map(|(v, gv)| 2.0 * v * gv).collect()));
            }
            Op::Sum { x } => out.push((*x, vec![g[0]; self.nodes[x.0].value.len()])),
            Op::Mean { x } => {
                let len = self.nodes[x.0].value.len();
                out.push((*x, vec![g[0] / len as f64; len]));
            }
            Op::Gather { x, idx } => {
                let mut d = zeros_like(*x);
                for (&i, gv) in idx.iter().zip(g) {
                    d[i] += gv;
                }
                out.push((*x, d));
            }
            Op::RowDistance { z, c, dim } => {
                let (zv, cv) = (self.value(*z), self.value(*c));
                let mut dz = vec![0.0; zv.len()];
                let mut dc = vec![0.0; cv.len()];
                for (r, (&dist, &gv)) in node.value.iter().zip(g).enumerate() {
                    // Subgradient zero where the row coincides with the center.
                    if dist == 0.0 {
                        continue;
                    }
                    for j in 0..*dim {
                        let t = gv * (zv[r * dim + j] - cv[j]) / dist;
                        dz[r * dim + j] = t;
                        dc[j] -= t;
                    }
                }
                out.push((*z, dz));
                out.push((*c, dc));
            }
        }
        out
    }
}
