//! Recording tape for reverse-mode differentiation. Operations append
//! nodes in execution order; `backward` replays them in reverse, so the
//! topological order is the recording order and every node is visited
//! exactly once. Gradients of shared subexpressions accumulate by
//! summation.

use super::kernels::{self, ConvGeom};
use super::store::ParamStore;
use super::tensor::{shape_str, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(pub(crate) usize);

/// Per-channel running statistics for batch normalization.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<usize> },
    Add(Tid, Tid),
    Sub(Tid, Tid),
    Mul(Tid, Tid),
    Scale(Tid, f32),
    AddConst(Tid, f32),
    Abs(Tid),
    Relu(Tid),
    Sigmoid(Tid),
    Sum(Tid),
    Mean(Tid),
    L2Norm(Tid),
    SDiv(Tid, Tid),
    Matmul { a: Tid, b: Tid, m: usize, k: usize, n: usize },
    MatmulNT { a: Tid, b: Tid, m: usize, k: usize, n: usize },
    Conv2d { x: Tid, w: Tid, batch: usize, geom: ConvGeom, cols: Option<Vec<f32>> },
    AddChanBias { x: Tid, b: Tid },
    AddRowBias { x: Tid, b: Tid },
    BatchNorm { x: Tid, eps: f32, train: bool, mean: Vec<f32>, invstd: Vec<f32> },
    InstanceNorm { x: Tid, eps: f32, invstd: Vec<f32> },
    StandardizeRows { x: Tid, eps: f32, invstd: Vec<f32> },
    AdaptiveAvgPool { x: Tid, oh: usize, ow: usize },
    UpsampleNearest { x: Tid, sh: usize, sw: usize },
    GatherRows { x: Tid, idx: Vec<usize> },
    CosineRows { a: Tid, b: Tid },
    Reshape(Tid),
    /// Stack 4-d tensors along dim 0 (used to fuse same-geometry convs).
    ConcatDim0 { parts: Vec<Tid> },
    /// Channel slice of a [B,C,H,W] tensor.
    SliceChans { x: Tid, from: usize, to: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The recorded graph. Single writer: recording and backward take
/// `&mut self`; a finished tape may be read concurrently.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::Shape {
            op,
            expected: "4-d tensor".into(),
            got: shape_str(shape),
        });
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::Shape {
            op,
            expected: "2-d tensor".into(),
            got: shape_str(shape),
        });
    }
    Ok((shape[0], shape[1]))
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

    fn push(&mut self, value: Tensor, op: Op) -> Tid {
        self.nodes.push(Node { value, op });
        Tid(self.nodes.len() - 1)
    }

    fn requires(&self, t: Tid) -> bool {
        self.nodes[t.0].value.requires_grad
    }

    fn unary(&mut self, mut out: Tensor, x: Tid, op: Op) -> Tid {
        out.requires_grad = self.requires(x);
        self.push(out, op)
    }

    fn binary(&mut self, mut out: Tensor, a: Tid, b: Tid, op: Op) -> Tid {
        out.requires_grad = self.requires(a) || self.requires(b);
        self.push(out, op)
    }

    pub fn value(&self, t: Tid) -> &Tensor {
        &self.nodes[t.0].value
    }

    pub fn data(&self, t: Tid) -> &[f32] {
        &self.nodes[t.0].value.data
    }

    pub fn shape(&self, t: Tid) -> &[usize] {
        &self.nodes[t.0].value.shape
    }

    pub fn grad(&self, t: Tid) -> Option<&[f32]> {
        self.nodes[t.0].value.grad.as_deref()
    }

    pub fn scalar_value(&self, t: Tid) -> f32 {
        self.nodes[t.0].value.data[0]
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, t: Tensor) -> Tid {
        self.push(t, Op::Leaf { param: None })
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Tid> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn constant_scalar(&mut self, v: f32) -> Tid {
        self.leaf(Tensor::scalar(v))
    }

    pub fn variable(&mut self, mut t: Tensor) -> Tid {
        t.requires_grad = true;
        self.push(t, Op::Leaf { param: None })
    }

    /// Load a parameter from the store; gradients exported afterwards
    /// via [`Tape::export_param_grads`].
    pub fn param(&mut self, store: &ParamStore, pid: usize) -> Tid {
        let mut t = store.tensor(pid);
        t.requires_grad = store.is_trainable(pid);
        self.push(t, Op::Leaf { param: Some(pid) })
    }

    // ---- elementwise -------------------------------------------------

    fn same_shape(&self, a: Tid, b: Tid, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                expected: shape_str(self.shape(a)),
                got: shape_str(self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        self.same_shape(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.binary(out, a, b, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.binary(out, a, b, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.binary(out, a, b, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Tid, c: f32) -> Tid {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let out = Tensor {
            shape: self.shape(x).to_vec(),
            data,
            requires_grad: false,
            grad: None,
        };
        self.unary(out, x, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Tid, c: f32) -> Tid {
        let data = self.data(x).iter().map(|v| v + c).collect();
        let out = Tensor {
            shape: self.shape(x).to_vec(),
            data,
            requires_grad: false,
            grad: None,
        };
        self.unary(out, x, Op::AddConst(x, c))
    }

    pub fn abs(&mut self, x: Tid) -> Tid {
        let data = self.data(x).iter().map(|v| v.abs()).collect();
        let out = Tensor {
            shape: self.shape(x).to_vec(),
            data,
            requires_grad: false,
            grad: None,
        };
        self.unary(out, x, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Tid) -> Tid {
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let out = Tensor {
            shape: self.shape(x).to_vec(),
            data,
            requires_grad: false,
            grad: None,
        };
        self.unary(out, x, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Tid) -> Tid {
        let data = self
            .data(x)
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let out = Tensor {
            shape: self.shape(x).to_vec(),
            data,
            requires_grad: false,
            grad: None,
        };
        self.unary(out, x, Op::Sigmoid(x))
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Tid) -> Tid {
        let mut acc = 0.0f64;
        for &v in self.data(x) {
            acc += v as f64;
        }
        let out = Tensor::scalar(acc as f32);
        self.unary(out, x, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Tid) -> Tid {
        let n = self.data(x).len().max(1);
        let mut acc = 0.0f64;
        for &v in self.data(x) {
            acc += v as f64;
        }
        let out = Tensor::scalar((acc / n as f64) as f32);
        self.unary(out, x, Op::Mean(x))
    }

    pub fn l2_norm(&mut self, x: Tid) -> Tid {
        let mut acc = 0.0f64;
        for &v in self.data(x) {
            acc += (v as f64) * (v as f64);
        }
        let out = Tensor::scalar(acc.sqrt() as f32);
        self.unary(out, x, Op::L2Norm(x))
    }

    /// Scalar quotient a / b.
    pub fn sdiv(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        if !self.value(a).is_scalar() || !self.value(b).is_scalar() {
            return Err(Error::Shape {
                op: "sdiv",
                expected: "scalars".into(),
                got: format!("{} / {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            });
        }
        let out = Tensor::scalar(self.scalar_value(a) / self.scalar_value(b));
        Ok(self.binary(out, a, b, Op::SDiv(a, b)))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                expected: format!("inner dim {k}"),
                got: format!("{k2}"),
            });
        }
        let mut data = vec![0.0f32; m * n];
        kernels::matmul_acc(&mut data, self.data(a), self.data(b), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.binary(out, a, b, Op::Matmul { a, b, m, k, n }))
    }

    /// a · bᵀ with b stored row-major [n, k].
    pub fn matmul_nt(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        let (m, k) = dims2(self.shape(a), "matmul_nt")?;
        let (n, k2) = dims2(self.shape(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                expected: format!("inner dim {k}"),
                got: format!("{k2}"),
            });
        }
        let mut data = vec![0.0f32; m * n];
        kernels::matmul_nt_acc(&mut data, self.data(a), self.data(b), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.binary(out, a, b, Op::MatmulNT { a, b, m, k, n }))
    }

    pub fn conv2d(
        &mut self,
        x: Tid,
        w: Tid,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Tid> {
        let (batch, c_in, h, wd) = dims4(self.shape(x), "conv2d")?;
        let (c_out, c_in_w, kh, kw) = dims4(self.shape(w), "conv2d")?;
        if c_in != c_in_w {
            return Err(Error::Shape {
                op: "conv2d",
                expected: format!("weight with {c_in} input channels"),
                got: format!("{c_in_w}"),
            });
        }
        if h + 2 * padding.0 < kh || wd + 2 * padding.1 < kw {
            return Err(Error::Shape {
                op: "conv2d",
                expected: format!("padded input >= kernel {kh}x{kw}"),
                got: format!("{}x{}", h + 2 * padding.0, wd + 2 * padding.1),
            });
        }
        let oh = (h + 2 * padding.0 - kh) / stride.0 + 1;
        let ow = (wd + 2 * padding.1 - kw) / stride.1 + 1;
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            oh,
            ow,
        };
        // Patch matrices are kept only when the weight gradient will be
        // needed, trading memory for the backward-pass im2col.
        let keep = self.requires(w);
        let (data, cols) = kernels::conv2d_forward(self.data(x), self.data(w), batch, &geom, keep);
        let out = Tensor::new(vec![batch, c_out, oh, ow], data)?;
        Ok(self.binary(out, x, w, Op::Conv2d { x, w, batch, geom, cols }))
    }

    /// x[B,C,H,W] + bias[C], broadcast over batch and space.
    pub fn add_chan_bias(&mut self, x: Tid, b: Tid) -> Result<Tid> {
        let (_, c, _, _) = dims4(self.shape(x), "add_chan_bias")?;
        if self.shape(b) != [c] {
            return Err(Error::Shape {
                op: "add_chan_bias",
                expected: format!("[{c}]"),
                got: shape_str(self.shape(b)),
            });
        }
        let plane: usize = self.shape(x)[2] * self.shape(x)[3];
        let bias = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        for chunk in data.chunks_mut(c * plane) {
            for (ci, bc) in bias.iter().enumerate() {
                for v in chunk[ci * plane..(ci + 1) * plane].iter_mut() {
                    *v += bc;
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.binary(out, x, b, Op::AddChanBias { x, b }))
    }

    /// x[N,M] + bias[M], broadcast over rows.
    pub fn add_row_bias(&mut self, x: Tid, b: Tid) -> Result<Tid> {
        let (_, m) = dims2(self.shape(x), "add_row_bias")?;
        if self.shape(b) != [m] {
            return Err(Error::Shape {
                op: "add_row_bias",
                expected: format!("[{m}]"),
                got: shape_str(self.shape(b)),
            });
        }
        let bias = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(m) {
            for (v, bc) in row.iter_mut().zip(&bias) {
                *v += bc;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.binary(out, x, b, Op::AddRowBias { x, b }))
    }

    // ---- normalization -------------------------------------------------

    /// Per-channel batch normalization without affine parameters.
    /// Training mode uses batch statistics and updates `state`;
    /// evaluation mode uses the running averages.
    pub fn batch_norm(&mut self, x: Tid, state: &mut BnState, eps: f32, train: bool) -> Result<Tid> {
        let (b, c, h, w) = dims4(self.shape(x), "batch_norm")?;
        if state.running_mean.len() != c {
            return Err(Error::Shape {
                op: "batch_norm",
                expected: format!("{c} channels"),
                got: format!("{}", state.running_mean.len()),
            });
        }
        let plane = h * w;
        let n = (b * plane) as f64;
        let xd = self.data(x);
        let (mean, var) = if train {
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ci in 0..c {
                let mut s = 0.0f64;
                let mut s2 = 0.0f64;
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for &v in &xd[base..base + plane] {
                        s += v as f64;
                        s2 += (v as f64) * (v as f64);
                    }
                }
                let m = s / n;
                mean[ci] = m as f32;
                var[ci] = ((s2 / n - m * m).max(0.0)) as f32;
            }
            for ci in 0..c {
                state.running_mean[ci] =
                    (1.0 - state.momentum) * state.running_mean[ci] + state.momentum * mean[ci];
                state.running_var[ci] =
                    (1.0 - state.momentum) * state.running_var[ci] + state.momentum * var[ci];
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let invstd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = vec![0.0f32; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (m, is) = (mean[ci], invstd[ci]);
                for (o, &v) in data[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                    *o = (v - m) * is;
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.unary(out, x, Op::BatchNorm { x, eps, train, mean, invstd }))
    }

    /// Per-sample, per-channel normalization over the spatial extent.
    pub fn instance_norm(&mut self, x: Tid, eps: f32) -> Result<Tid> {
        let (b, c, h, w) = dims4(self.shape(x), "instance_norm")?;
        let plane = h * w;
        let xd = self.data(x);
        let groups = b * c;
        let mut invstd = vec![0.0f32; groups];
        let mut data = vec![0.0f32; xd.len()];
        for gi in 0..groups {
            let base = gi * plane;
            let g = &xd[base..base + plane];
            let m = g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let var = g
                .iter()
                .map(|&v| (v as f64 - m) * (v as f64 - m))
                .sum::<f64>()
                / plane as f64;
            let is = 1.0 / ((var as f32) + eps).sqrt();
            invstd[gi] = is;
            for (o, &v) in data[base..base + plane].iter_mut().zip(g) {
                *o = (v - m as f32) * is;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.unary(out, x, Op::InstanceNorm { x, eps, invstd }))
    }

    /// Standardize each row of an [N, L] tensor to zero mean and unit
    /// variance.
    pub fn standardize_rows(&mut self, x: Tid, eps: f32) -> Result<Tid> {
        let (n, l) = dims2(self.shape(x), "standardize_rows")?;
        let xd = self.data(x);
        let mut invstd = vec![0.0f32; n];
        let mut data = vec![0.0f32; xd.len()];
        for i in 0..n {
            let row = &xd[i * l..(i + 1) * l];
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / l as f64;
            let var = row
                .iter()
                .map(|&v| (v as f64 - m) * (v as f64 - m))
                .sum::<f64>()
                / l as f64;
            let is = 1.0 / ((var as f32) + eps).sqrt();
            invstd[i] = is;
            for (o, &v) in data[i * l..(i + 1) * l].iter_mut().zip(row) {
                *o = (v - m as f32) * is;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.unary(out, x, Op::StandardizeRows { x, eps, invstd }))
    }

    // ---- shape and pooling ---------------------------------------------

    pub fn adaptive_avg_pool(&mut self, x: Tid, oh: usize, ow: usize) -> Result<Tid> {
        let (b, c, h, w) = dims4(self.shape(x), "adaptive_avg_pool")?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::Shape {
                op: "adaptive_avg_pool",
                expected: format!("output within {h}x{w}"),
                got: format!("{oh}x{ow}"),
            });
        }
        let xd = self.data(x);
        let mut data = vec![0.0f32; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * oh * ow..(bc + 1) * oh * ow];
            for i in 0..oh {
                let y0 = i * h / oh;
                let y1 = ((i + 1) * h).div_ceil(oh);
                for j in 0..ow {
                    let x0 = j * w / ow;
                    let x1 = ((j + 1) * w).div_ceil(ow);
                    let mut s = 0.0f64;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += src[y * w + xx] as f64;
                        }
                    }
                    dst[i * ow + j] = (s / ((y1 - y0) * (x1 - x0)) as f64) as f32;
                }
            }
        }
        let out = Tensor::new(vec![b, c, oh, ow], data)?;
        Ok(self.unary(out, x, Op::AdaptiveAvgPool { x, oh, ow }))
    }

    pub fn upsample_nearest(&mut self, x: Tid, sh: usize, sw: usize) -> Result<Tid> {
        let (b, c, h, w) = dims4(self.shape(x), "upsample_nearest")?;
        let (nh, nw) = (h * sh, w * sw);
        let xd = self.data(x);
        let mut data = vec![0.0f32; b * c * nh * nw];
        for bc in 0..b * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * nh * nw..(bc + 1) * nh * nw];
            for y in 0..nh {
                let sy = y / sh;
                for xx in 0..nw {
                    dst[y * nw + xx] = src[sy * w + xx / sw];
                }
            }
        }
        let out = Tensor::new(vec![b, c, nh, nw], data)?;
        Ok(self.unary(out, x, Op::UpsampleNearest { x, sh, sw }))
    }

    pub fn gather_rows(&mut self, x: Tid, idx: Vec<usize>) -> Result<Tid> {
        let (n, l) = dims2(self.shape(x), "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape {
                op: "gather_rows",
                expected: format!("indices < {n}"),
                got: format!("{bad}"),
            });
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(idx.len() * l);
        for &i in &idx {
            data.extend_from_slice(&xd[i * l..(i + 1) * l]);
        }
        let out = Tensor::new(vec![idx.len(), l], data)?;
        Ok(self.unary(out, x, Op::GatherRows { x, idx }))
    }

    /// Row-wise cosine similarity between two [N, L] tensors → [N].
    /// Rows with (near-)zero norm yield 0 and propagate no gradient.
    pub fn cosine_rows(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        self.same_shape(a, b, "cosine_rows")?;
        let (n, l) = dims2(self.shape(a), "cosine_rows")?;
        let ad = self.data(a);
        let bd = self.data(b);
        let mut data = vec![0.0f32; n];
        for i in 0..n {
            let ra = &ad[i * l..(i + 1) * l];
            let rb = &bd[i * l..(i + 1) * l];
            let na = kernels::dot(ra, ra).sqrt();
            let nb = kernels::dot(rb, rb).sqrt();
            let denom = na * nb;
            data[i] = if denom > COS_GUARD {
                kernels::dot(ra, rb) / denom
            } else {
                0.0
            };
        }
        let out = Tensor::new(vec![n], data)?;
        Ok(self.binary(out, a, b, Op::CosineRows { a, b }))
    }

    pub fn reshape(&mut self, x: Tid, shape: Vec<usize>) -> Result<Tid> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                expected: format!("{} values", self.data(x).len()),
                got: shape_str(&shape),
            });
        }
        let out = Tensor::new(shape, self.data(x).to_vec())?;
        Ok(self.unary(out, x, Op::Reshape(x)))
    }

    /// Concatenate along the leading dimension; trailing dims must match.
    pub fn concat_dim0(&mut self, parts: &[Tid]) -> Result<Tid> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat_dim0",
                expected: "at least one part".into(),
                got: "0".into(),
            });
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat_dim0",
                    expected: shape_str(&tail),
                    got: shape_str(&self.shape(p)[1..]),
                });
            }
            lead += self.shape(p)[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let mut out = Tensor::new(shape, data)?;
        out.requires_grad = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::ConcatDim0 { parts: parts.to_vec() }))
    }

    /// x[:, from..to, :, :] of a [B,C,H,W] tensor.
    pub fn slice_chans(&mut self, x: Tid, from: usize, to: usize) -> Result<Tid> {
        let (b, c, h, w) = dims4(self.shape(x), "slice_chans")?;
        if from >= to || to > c {
            return Err(Error::Shape {
                op: "slice_chans",
                expected: format!("range within {c} channels"),
                got: format!("{from}..{to}"),
            });
        }
        let plane = h * w;
        let xd = self.data(x);
        let nc = to - from;
        let mut data = Vec::with_capacity(b * nc * plane);
        for bi in 0..b {
            let base = (bi * c + from) * plane;
            data.extend_from_slice(&xd[base..base + nc * plane]);
        }
        let out = Tensor::new(vec![b, nc, h, w], data)?;
        Ok(self.unary(out, x, Op::SliceChans { x, from, to }))
    }

    // ---- backward -------------------------------------------------------

    /// Populate gradients of every reachable requires-grad tensor with
    /// d(loss)/d(tensor). The loss must be scalar.
    pub fn backward(&mut self, loss: Tid) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Shape {
                op: "backward",
                expected: "scalar loss".into(),
                got: shape_str(self.shape(loss)),
            });
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.value.requires_grad {
                continue;
            }
            let Some(g) = node.value.grad.as_ref() else {
                continue;
            };
            // A node whose incoming gradient is identically zero cannot
            // contribute; skipping it prunes dead subgraphs.
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            backward_node(node, before);
        }
        Ok(())
    }

    /// Copy accumulated leaf gradients back into the parameter store.
    pub fn export_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = node.value.grad.as_deref() {
                    store.acc_grad(pid, g);
                }
            }
        }
    }
}

const COS_GUARD: f32 = 1e-12;

fn acc(nodes: &mut [Node], t: Tid, contribution: &[f32]) {
    let target = &mut nodes[t.0].value;
    if !target.requires_grad {
        return;
    }
    target.acc_grad(contribution);
}

/// Whether the input at `t` needs a gradient at all.
fn wants(nodes: &[Node], t: Tid) -> bool {
    nodes[t.0].value.requires_grad
}

#[allow(clippy::too_many_lines)]
fn backward_node(node: &Node, before: &mut [Node]) {
    let g = node.value.grad.as_deref().expect("checked");
    let y = &node.value.data;
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) => {
            acc(before, *a, &g);
            acc(before, *b, &g);
        }
        Op::Sub(a, b) => {
            acc(before, *a, &g);
            if wants(before, *b) {
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                acc(before, *b, &neg);
            }
        }
        Op::Mul(a, b) => {
            if wants(before, *a) {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&before[b.0].value.data)
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                acc(before, *a, &da);
            }
            if wants(before, *b) {
                let db: Vec<f32> = g
                    .iter()
                    .zip(&before[a.0].value.data)
                    .map(|(gv, av)| gv * av)
                    .collect();
                acc(before, *b, &db);
            }
        }
        Op::Scale(x, c) => {
            if wants(before, *x) {
                let d: Vec<f32> = g.iter().map(|v| v * c).collect();
                acc(before, *x, &d);
            }
        }
        Op::AddConst(x, _) => acc(before, *x, &g),
        Op::Abs(x) => {
            if wants(before, *x) {
                let d: Vec<f32> = g
                    .iter()
                    .zip(&before[x.0].value.data)
                    .map(|(gv, xv)| {
                        if *xv > 0.0 {
                            *gv
                        } else if *xv < 0.0 {
                            -*gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(before, *x, &d);
            }
        }
        Op::Relu(x) => {
            if wants(before, *x) {
                let d: Vec<f32> = g
                    .iter()
                    .zip(&before[x.0].value.data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(before, *x, &d);
            }
        }
        Op::Sigmoid(x) => {
            if wants(before, *x) {
                let d: Vec<f32> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                acc(before, *x, &d);
            }
        }
        Op::Sum(x) => {
            if wants(before, *x) {
                let d = vec![g[0]; before[x.0].value.data.len()];
                acc(before, *x, &d);
            }
        }
        Op::Mean(x) => {
            if wants(before, *x) {
                let n = before[x.0].value.data.len().max(1);
                let d = vec![g[0] / n as f32; before[x.0].value.data.len()];
                acc(before, *x, &d);
            }
        }
        Op::L2Norm(x) => {
            if wants(before, *x) {
                let norm = y[0];
                if norm > 0.0 {
                    let s = g[0] / norm;
                    let d: Vec<f32> =
                        before[x.0].value.data.iter().map(|v| v * s).collect();
                    acc(before, *x, &d);
                }
            }
        }
        Op::SDiv(a, b) => {
            let av = before[a.0].value.data[0];
            let bv = before[b.0].value.data[0];
            if wants(before, *a) {
                acc(before, *a, &[g[0] / bv]);
            }
            if wants(before, *b) {
                acc(before, *b, &[-g[0] * av / (bv * bv)]);
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            if wants(before, *a) {
                let mut da = vec![0.0f32; m * k];
                kernels::matmul_nt_acc(&mut da, &g, &before[b.0].value.data, *m, *n, *k);
                acc(before, *a, &da);
            }
            if wants(before, *b) {
                let mut db = vec![0.0f32; k * n];
                kernels::matmul_tn_acc(&mut db, &before[a.0].value.data, &g, *m, *k, *n);
                acc(before, *b, &db);
            }
        }
        Op::MatmulNT { a, b, m, k, n } => {
            if wants(before, *a) {
                let mut da = vec![0.0f32; m * k];
                kernels::matmul_acc(&mut da, &g, &before[b.0].value.data, *m, *n, *k);
                acc(before, *a, &da);
            }
            if wants(before, *b) {
                let mut db = vec![0.0f32; n * k];
                kernels::matmul_tn_acc(&mut db, &g, &before[a.0].value.data, *m, *n, *k);
                acc(before, *b, &db);
            }
        }
        Op::Conv2d { x, w, batch, geom, cols } => {
            if wants(before, *x) {
                let mut dx = vec![0.0f32; before[x.0].value.data.len()];
                kernels::conv2d_backward_input(&g, &before[w.0].value.data, *batch, geom, &mut dx);
                acc(before, *x, &dx);
            }
            if wants(before, *w) {
                let mut dw = vec![0.0f32; before[w.0].value.data.len()];
                kernels::conv2d_backward_weight(
                    &g,
                    &before[x.0].value.data,
                    cols.as_deref(),
                    *batch,
                    geom,
                    &mut dw,
                );
                acc(before, *w, &dw);
            }
        }
        Op::AddChanBias { x, b } => {
            acc(before, *x, &g);
            if wants(before, *b) {
                let c = before[b.0].value.data.len();
                let plane = node.value.shape[2] * node.value.shape[3];
                let mut db = vec![0.0f32; c];
                for chunk in g.chunks(c * plane) {
                    for (ci, dbv) in db.iter_mut().enumerate() {
                        for &gv in &chunk[ci * plane..(ci + 1) * plane] {
                            *dbv += gv;
                        }
                    }
                }
                acc(before, *b, &db);
            }
        }
        Op::AddRowBias { x, b } => {
            acc(before, *x, &g);
            if wants(before, *b) {
                let m = before[b.0].value.data.len();
                let mut db = vec![0.0f32; m];
                for row in g.chunks(m) {
                    for (dbv, gv) in db.iter_mut().zip(row) {
                        *dbv += gv;
                    }
                }
                acc(before, *b, &db);
            }
        }
        Op::BatchNorm { x, train, mean: _, invstd, .. } => {
            if wants(before, *x) {
                let shape = &node.value.shape;
                let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let plane = h * w;
                let mut dx = vec![0.0f32; g.len()];
                if *train {
                    // y = (x - mu) * istd with batch statistics:
                    // dx = istd * (g - mean(g) - y * mean(g*y)) per channel
                    let n = (b * plane) as f64;
                    for ci in 0..c {
                        let mut sg = 0.0f64;
                        let mut sgy = 0.0f64;
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for idx in base..base + plane {
                                sg += g[idx] as f64;
                                sgy += (g[idx] * y[idx]) as f64;
                            }
                        }
                        let mg = (sg / n) as f32;
                        let mgy = (sgy / n) as f32;
                        let is = invstd[ci];
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for idx in base..base + plane {
                                dx[idx] = is * (g[idx] - mg - y[idx] * mgy);
                            }
                        }
                    }
                } else {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let is = invstd[ci];
                            for idx in base..base + plane {
                                dx[idx] = g[idx] * is;
                            }
                        }
                    }
                }
                acc(before, *x, &dx);
            }
        }
        Op::InstanceNorm { x, invstd, .. } => {
            if wants(before, *x) {
                let shape = &node.value.shape;
                let plane = shape[2] * shape[3];
                let mut dx = vec![0.0f32; g.len()];
                norm_group_backward(&g, y, invstd, plane, &mut dx);
                acc(before, *x, &dx);
            }
        }
        Op::StandardizeRows { x, invstd, .. } => {
            if wants(before, *x) {
                let l = node.value.shape[1];
                let mut dx = vec![0.0f32; g.len()];
                norm_group_backward(&g, y, invstd, l, &mut dx);
                acc(before, *x, &dx);
            }
        }
        Op::AdaptiveAvgPool { x, oh, ow } => {
            if wants(before, *x) {
                let in_shape = before[x.0].value.shape.clone();
                let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let mut dx = vec![0.0f32; b * c * h * w];
                for bc in 0..b * c {
                    let gsrc = &g[bc * oh * ow..(bc + 1) * oh * ow];
                    let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for i in 0..*oh {
                        let y0 = i * h / oh;
                        let y1 = ((i + 1) * h).div_ceil(*oh);
                        for j in 0..*ow {
                            let x0 = j * w / ow;
                            let x1 = ((j + 1) * w).div_ceil(*ow);
                            let share = gsrc[i * ow + j] / ((y1 - y0) * (x1 - x0)) as f32;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dst[yy * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                acc(before, *x, &dx);
            }
        }
        Op::UpsampleNearest { x, sh, sw } => {
            if wants(before, *x) {
                let in_shape = before[x.0].value.shape.clone();
                let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let (nh, nw) = (h * sh, w * sw);
                let mut dx = vec![0.0f32; b * c * h * w];
                for bc in 0..b * c {
                    let gsrc = &g[bc * nh * nw..(bc + 1) * nh * nw];
                    let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for yy in 0..nh {
                        for xx in 0..nw {
                            dst[(yy / sh) * w + xx / sw] += gsrc[yy * nw + xx];
                        }
                    }
                }
                acc(before, *x, &dx);
            }
        }
        Op::GatherRows { x, idx } => {
            if wants(before, *x) {
                let l = node.value.shape[1];
                let mut dx = vec![0.0f32; before[x.0].value.data.len()];
                for (row, &i) in idx.iter().enumerate() {
                    for j in 0..l {
                        dx[i * l + j] += g[row * l + j];
                    }
                }
                acc(before, *x, &dx);
            }
        }
        Op::CosineRows { a, b } => {
            let l = before[a.0].value.shape[1];
            let ad = &before[a.0].value.data;
            let bd = &before[b.0].value.data;
            let n = y.len();
            let mut da = vec![0.0f32; ad.len()];
            let mut db = vec![0.0f32; bd.len()];
            for i in 0..n {
                let ra = &ad[i * l..(i + 1) * l];
                let rb = &bd[i * l..(i + 1) * l];
                let na2 = kernels::dot(ra, ra);
                let nb2 = kernels::dot(rb, rb);
                let denom = (na2.sqrt()) * (nb2.sqrt());
                if denom <= COS_GUARD {
                    continue;
                }
                let c = y[i];
                let gi = g[i];
                for j in 0..l {
                    da[i * l + j] = gi * (rb[j] / denom - c * ra[j] / na2);
                    db[i * l + j] = gi * (ra[j] / denom - c * rb[j] / nb2);
                }
            }
            if wants(before, *a) {
                acc(before, *a, &da);
            }
            if wants(before, *b) {
                acc(before, *b, &db);
            }
        }
        Op::Reshape(x) => acc(before, *x, g),
        Op::ConcatDim0 { parts } => {
            let mut offset = 0usize;
            for &p in parts {
                let n = before[p.0].value.data.len();
                if wants(before, p) {
                    acc(before, p, &g[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::SliceChans { x, from, to } => {
            if wants(before, *x) {
                let shape = before[x.0].value.shape.clone();
                let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let plane = h * w;
                let nc = to - from;
                let mut dx = vec![0.0f32; b * c * h * w];
                for bi in 0..b {
                    let dst = (bi * c + from) * plane;
                    let src = bi * nc * plane;
                    dx[dst..dst + nc * plane].copy_from_slice(&g[src..src + nc * plane]);
                }
                acc(before, *x, &dx);
            }
        }
    }
}

/// Shared backward for group normalizations: for each contiguous group
/// of length `len`, dx = istd * (g - mean(g) - y * mean(g*y)).
fn norm_group_backward(g: &[f32], y: &[f32], invstd: &[f32], len: usize, dx: &mut [f32]) {
    for (gi, is) in invstd.iter().enumerate() {
        let base = gi * len;
        let gr = &g[base..base + len];
        let yr = &y[base..base + len];
        let mut sg = 0.0f64;
        let mut sgy = 0.0f64;
        for (gv, yv) in gr.iter().zip(yr) {
            sg += *gv as f64;
            sgy += (*gv * *yv) as f64;
        }
        let mg = (sg / len as f64) as f32;
        let mgy = (sgy / len as f64) as f32;
        for j in 0..len {
            dx[base + j] = is * (gr[j] - mg - yr[j] * mgy);
        }
    }
}
