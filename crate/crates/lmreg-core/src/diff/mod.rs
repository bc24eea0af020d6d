//! Reverse-mode differentiable computation substrate.
//!
//! A [`Graph`] records operations in execution order; [`DiffValue`] handles
//! index into it. Backward walks the tape in reverse (parents always precede
//! children, so reverse index order is reverse topological order) and
//! accumulates analytic gradients into every reachable value that requires
//! them. Leaves created frozen never materialize a gradient.
//!
//! Volume-shaped values are `[channels, nz, ny, nx]` (x fastest); token
//! matrices are `[tokens, width]`. The primitive set is exactly what the
//! registration model needs — see [`kernels`] for the arithmetic and
//! [`gradcheck`] for the finite-difference verification of every primitive.

pub mod gradcheck;
pub mod kernels;

use kernels::{lit, Scalar};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch {
        op: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called twice without clearing gradients")]
    BackwardTwice,
}

type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffValue(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Concat { xs: Vec<usize>, axis: usize },
    Reshape(usize),
    SliceCols { x: usize, start: usize, len: usize },
    Matmul(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    LeakyRelu { x: usize, slope: f64 },
    Silu(usize),
    Softmax { x: usize, axis: usize },
    RmsNorm { x: usize, eps: f64 },
    ScaleCols { x: usize, gain: usize },
    Rotary { x: usize, base: f64 },
    Conv3d { x: usize, w: usize, b: usize, stride: usize },
    ConvTransposed3d { x: usize, w: usize, b: usize },
    Upsample2x(usize),
    Downsample2x(usize),
    Transpose2d(usize),
    VoxelShuffle { x: usize, r: usize },
    VolToTokens(usize),
    TokensToVol(usize),
    GatherTrilinear { image: usize, field: usize },
    ForwardDiff { x: usize, axis: usize },
}

struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation; single-threaded by contract (distinct graphs may
/// live on distinct threads).
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: DiffValue) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: DiffValue) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: DiffValue) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: DiffValue) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar_value(&self, v: DiffValue) -> S {
        self.nodes[v.0].data[0]
    }

    /// New leaf value. Frozen leaves (`requires_grad = false`) never
    /// accumulate gradient.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<S>, requires_grad: bool) -> Result<DiffValue> {
        if numel(shape) != data.len() {
            return Err(DiffError::Invalid {
                op: "leaf",
                msg: format!("shape {:?} does not cover {} elements", shape, data.len()),
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<DiffValue> {
        self.leaf(shape, data, false)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op) -> DiffValue {
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        DiffValue(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: DiffValue, b: DiffValue) -> Result<()> {
        if self.nodes[a.0].shape == self.nodes[b.0].shape {
            Ok(())
        } else {
            Err(DiffError::ShapeMismatch {
                op,
                a: self.nodes[a.0].shape.clone(),
                b: self.nodes[b.0].shape.clone(),
            })
        }
    }

    fn vol_shape(&self, op: &'static str, v: DiffValue) -> Result<(usize, usize, usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 4 {
            return Err(DiffError::Invalid {
                op,
                msg: format!("expected [c, d, h, w] volume, got {s:?}"),
            });
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x + *y)
            .collect();
        let rq = self.any_grad(&[a.0, b.0]);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rq, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x - *y)
            .collect();
        let rq = self.any_grad(&[a.0, b.0]);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rq, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x * *y)
            .collect();
        let rq = self.any_grad(&[a.0, b.0]);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rq, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: DiffValue, c: f64) -> Result<DiffValue> {
        let k = lit::<S>(c);
        let data = self.nodes[x.0].data.iter().map(|v| *v * k).collect();
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rq, Op::Scale(x.0, c)))
    }

    pub fn square(&mut self, x: DiffValue) -> Result<DiffValue> {
        let data = self.nodes[x.0].data.iter().map(|v| *v * *v).collect();
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rq, Op::Square(x.0)))
    }

    pub fn leaky_relu(&mut self, x: DiffValue, slope: f64) -> Result<DiffValue> {
        let k = lit::<S>(slope);
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|v| if *v >= S::zero() { *v } else { *v * k })
            .collect();
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            data,
            rq,
            Op::LeakyRelu { x: x.0, slope },
        ))
    }

    pub fn silu(&mut self, x: DiffValue) -> Result<DiffValue> {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|v| *v / (S::one() + (-*v).exp()))
            .collect();
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rq, Op::Silu(x.0)))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: DiffValue) -> Result<DiffValue> {
        let mut s = S::zero();
        for v in &self.nodes[x.0].data {
            s = s + *v;
        }
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![1], vec![s], rq, Op::Sum(x.0)))
    }

    pub fn mean(&mut self, x: DiffValue) -> Result<DiffValue> {
        let n = self.nodes[x.0].data.len();
        let mut s = S::zero();
        for v in &self.nodes[x.0].data {
            s = s + *v;
        }
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![1], vec![s / lit::<S>(n as f64)], rq, Op::Mean(x.0)))
    }

    // ---- structure ----

    pub fn concat(&mut self, xs: &[DiffValue], axis: usize) -> Result<DiffValue> {
        if xs.is_empty() {
            return Err(DiffError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let rank = self.nodes[xs[0].0].shape.len();
        if axis >= rank {
            return Err(DiffError::InvalidAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut out_shape = self.nodes[xs[0].0].shape.clone();
        let mut axis_total = 0;
        for v in xs {
            let s = &self.nodes[v.0].shape;
            if s.len() != rank
                || s[..axis] != out_shape[..axis]
                || s[axis + 1..] != out_shape[axis + 1..]
            {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    a: out_shape,
                    b: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        out_shape[axis] = axis_total;
        let inner: usize = out_shape[axis + 1..].iter().product();
        let outer: usize = out_shape[..axis].iter().product();
        let mut data = vec![S::zero(); numel(&out_shape)];
        let lane_out = axis_total * inner;
        for o in 0..outer {
            let mut off = 0;
            for v in xs {
                let len = self.nodes[v.0].shape[axis] * inner;
                let src = &self.nodes[v.0].data[o * len..(o + 1) * len];
                data[o * lane_out + off..o * lane_out + off + len].copy_from_slice(src);
                off += len;
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rq = self.any_grad(&ids);
        Ok(self.push(out_shape, data, rq, Op::Concat { xs: ids, axis }))
    }

    pub fn reshape(&mut self, x: DiffValue, shape: &[usize]) -> Result<DiffValue> {
        if numel(shape) != self.nodes[x.0].data.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                a: self.nodes[x.0].shape.clone(),
                b: shape.to_vec(),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(shape.to_vec(), data, rq, Op::Reshape(x.0)))
    }

    pub fn slice_cols(&mut self, x: DiffValue, start: usize, len: usize) -> Result<DiffValue> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 || start + len > s[1] {
            return Err(DiffError::Invalid {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of shape {s:?}", start + len),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let mut data = vec![S::zero(); rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&self.nodes[x.0].data[r * cols + start..r * cols + start + len]);
        }
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(
            vec![rows, len],
            data,
            rq,
            Op::SliceCols { x: x.0, start, len },
        ))
    }

    // ---- dense algebra ----

    pub fn matmul(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                a: sa.clone(),
                b: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![S::zero(); m * n];
        kernels::matmul_fwd(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut data);
        let rq = self.any_grad(&[a.0, b.0]);
        Ok(self.push(vec![m, n], data, rq, Op::Matmul(a.0, b.0)))
    }

    /// `y = x w^T + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: DiffValue, w: DiffValue, b: Option<DiffValue>) -> Result<DiffValue> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(DiffError::ShapeMismatch {
                op: "linear",
                a: sx.clone(),
                b: sw.clone(),
            });
        }
        let (t, n_in, n_out) = (sx[0], sx[1], sw[0]);
        if let Some(bias) = b {
            let sb = &self.nodes[bias.0].shape;
            if sb != &[n_out] {
                return Err(DiffError::ShapeMismatch {
                    op: "linear bias",
                    a: vec![n_out],
                    b: sb.clone(),
                });
            }
        }
        let mut data = vec![S::zero(); t * n_out];
        kernels::linear_fwd(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            b.map(|v| self.nodes[v.0].data.as_slice()),
            t,
            n_in,
            n_out,
            &mut data,
        );
        let mut ids = vec![x.0, w.0];
        if let Some(bias) = b {
            ids.push(bias.0);
        }
        let rq = self.any_grad(&ids);
        Ok(self.push(
            vec![t, n_out],
            data,
            rq,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
            },
        ))
    }

    // ---- normalization / attention pieces ----

    pub fn softmax(&mut self, x: DiffValue, axis: usize) -> Result<DiffValue> {
        let rank = self.nodes[x.0].shape.len();
        if axis >= rank {
            return Err(DiffError::InvalidAxis {
                op: "softmax",
                axis,
                rank,
            });
        }
        let shape = self.nodes[x.0].shape.clone();
        let mut data = vec![S::zero(); self.nodes[x.0].data.len()];
        kernels::softmax_fwd(&self.nodes[x.0].data, &shape, axis, &mut data);
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, data, rq, Op::Softmax { x: x.0, axis }))
    }

    /// Normalize the last axis by root-mean-square.
    pub fn rms_norm(&mut self, x: DiffValue, eps: f64) -> Result<DiffValue> {
        let shape = self.nodes[x.0].shape.clone();
        let n = *shape.last().ok_or(DiffError::Invalid {
            op: "rms_norm",
            msg: "rank 0 input".into(),
        })?;
        let mut data = vec![S::zero(); self.nodes[x.0].data.len()];
        kernels::rms_norm_fwd(&self.nodes[x.0].data, n, eps, &mut data);
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, data, rq, Op::RmsNorm { x: x.0, eps }))
    }

    /// Multiply each row of `x: [t, n]` by `gain: [n]`.
    pub fn scale_cols(&mut self, x: DiffValue, gain: DiffValue) -> Result<DiffValue> {
        let (sx, sg) = (&self.nodes[x.0].shape, &self.nodes[gain.0].shape);
        if sx.len() != 2 || sg.len() != 1 || sg[0] != sx[1] {
            return Err(DiffError::ShapeMismatch {
                op: "scale_cols",
                a: sx.clone(),
                b: sg.clone(),
            });
        }
        let (t, n) = (sx[0], sx[1]);
        let mut data = vec![S::zero(); t * n];
        for r in 0..t {
            for i in 0..n {
                data[r * n + i] = self.nodes[x.0].data[r * n + i] * self.nodes[gain.0].data[i];
            }
        }
        let rq = self.any_grad(&[x.0, gain.0]);
        Ok(self.push(
            vec![t, n],
            data,
            rq,
            Op::ScaleCols { x: x.0, gain: gain.0 },
        ))
    }

    /// Rotary position embedding over rows of `x: [tokens, head_dim]`; the
    /// row index is the position.
    pub fn rotary_embed(&mut self, x: DiffValue) -> Result<DiffValue> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 || s[1] % 2 != 0 {
            return Err(DiffError::Invalid {
                op: "rotary_embed",
                msg: format!("need [tokens, even head_dim], got {s:?}"),
            });
        }
        let (t, dim) = (s[0], s[1]);
        let base = 10000.0;
        let mut data = vec![S::zero(); t * dim];
        kernels::rotary_fwd(&self.nodes[x.0].data, t, dim, base, &mut data, false);
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![t, dim], data, rq, Op::Rotary { x: x.0, base }))
    }

    // ---- convolution / spatial ----

    pub fn conv3d(&mut self, x: DiffValue, w: DiffValue, b: DiffValue, stride: usize) -> Result<DiffValue> {
        let (ci, d, h, wd) = self.vol_shape("conv3d", x)?;
        let sw = &self.nodes[w.0].shape;
        if sw.len() != 5 || sw[1] != ci || sw[2] != 3 || sw[3] != 3 || sw[4] != 3 {
            return Err(DiffError::ShapeMismatch {
                op: "conv3d weight",
                a: vec![0, ci, 3, 3, 3],
                b: sw.clone(),
            });
        }
        if stride != 1 && stride != 2 {
            return Err(DiffError::Invalid {
                op: "conv3d",
                msg: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        let co = sw[0];
        if self.nodes[b.0].shape != [co] {
            return Err(DiffError::ShapeMismatch {
                op: "conv3d bias",
                a: vec![co],
                b: self.nodes[b.0].shape.clone(),
            });
        }
        let (od, oh, ow) = (
            kernels::conv_out_dim(d, stride),
            kernels::conv_out_dim(h, stride),
            kernels::conv_out_dim(wd, stride),
        );
        let mut data = vec![S::zero(); co * od * oh * ow];
        kernels::conv3d_fwd(
            &self.nodes[x.0].data,
            (ci, d, h, wd),
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            co,
            stride,
            &mut data,
        );
        let rq = self.any_grad(&[x.0, w.0, b.0]);
        Ok(self.push(
            vec![co, od, oh, ow],
            data,
            rq,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
            },
        ))
    }

    pub fn conv_transposed3d(&mut self, x: DiffValue, w: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let (ci, d, h, wd) = self.vol_shape("transposed_conv3d", x)?;
        let sw = &self.nodes[w.0].shape;
        if sw.len() != 5 || sw[0] != ci || sw[2] != 2 || sw[3] != 2 || sw[4] != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "transposed_conv3d weight",
                a: vec![ci, 0, 2, 2, 2],
                b: sw.clone(),
            });
        }
        let co = sw[1];
        if self.nodes[b.0].shape != [co] {
            return Err(DiffError::ShapeMismatch {
                op: "transposed_conv3d bias",
                a: vec![co],
                b: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = vec![S::zero(); co * 8 * d * h * wd];
        kernels::convt3d_fwd(
            &self.nodes[x.0].data,
            (ci, d, h, wd),
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            co,
            &mut data,
        );
        let rq = self.any_grad(&[x.0, w.0, b.0]);
        Ok(self.push(
            vec![co, 2 * d, 2 * h, 2 * wd],
            data,
            rq,
            Op::ConvTransposed3d {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        ))
    }

    /// Trilinear 2x spatial upsampling of `[c, d, h, w]`.
    pub fn upsample2x(&mut self, x: DiffValue) -> Result<DiffValue> {
        let dims = self.vol_shape("upsample2x", x)?;
        let (c, d, h, w) = dims;
        let mut data = vec![S::zero(); c * 8 * d * h * w];
        kernels::upsample2x_fwd(&self.nodes[x.0].data, dims, &mut data);
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![c, 2 * d, 2 * h, 2 * w], data, rq, Op::Upsample2x(x.0)))
    }

    /// 2x box-mean downsampling of `[c, d, h, w]` (even spatial dims).
    pub fn downsample2x(&mut self, x: DiffValue) -> Result<DiffValue> {
        let dims = self.vol_shape("downsample2x", x)?;
        let (c, d, h, w) = dims;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(DiffError::Invalid {
                op: "downsample2x",
                msg: format!("spatial dims must be even, got {:?}", [d, h, w]),
            });
        }
        let mut data = vec![S::zero(); c * d * h * w / 8];
        kernels::downsample2x_fwd(&self.nodes[x.0].data, dims, &mut data);
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(
            vec![c, d / 2, h / 2, w / 2],
            data,
            rq,
            Op::Downsample2x(x.0),
        ))
    }

    /// Transpose a `[rows, cols]` matrix.
    pub fn transpose2d(&mut self, x: DiffValue) -> Result<DiffValue> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(DiffError::Invalid {
                op: "transpose2d",
                msg: format!("expected rank 2, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let mut data = vec![S::zero(); r * c];
        let src = &self.nodes[x.0].data;
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![c, r], data, rq, Op::Transpose2d(x.0)))
    }

    /// Trade channel groups of size `r^3` for an `r`-fold spatial doubling:
    /// `out[c, z*r+dz, y*r+dy, x*r+dx] = in[c*r^3 + (dz*r + dy)*r + dx, z, y, x]`.
    pub fn voxel_shuffle(&mut self, x: DiffValue, r: usize) -> Result<DiffValue> {
        let (c, d, h, w) = self.vol_shape("voxel_shuffle", x)?;
        let r3 = r * r * r;
        if r == 0 || c % r3 != 0 {
            return Err(DiffError::Invalid {
                op: "voxel_shuffle",
                msg: format!("channels {c} not divisible by r^3 = {r3}"),
            });
        }
        let co = c / r3;
        let (od, oh, ow) = (d * r, h * r, w * r);
        let mut data = vec![S::zero(); co * od * oh * ow];
        let src = &self.nodes[x.0].data;
        for cc in 0..co {
            for z in 0..d {
                for dz in 0..r {
                    for y in 0..h {
                        for dy in 0..r {
                            for xx in 0..w {
                                for dx in 0..r {
                                    let ci = cc * r3 + (dz * r + dy) * r + dx;
                                    data[((cc * od + z * r + dz) * oh + y * r + dy) * ow
                                        + xx * r
                                        + dx] = src[((ci * d + z) * h + y) * w + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![co, od, oh, ow], data, rq, Op::VoxelShuffle { x: x.0, r }))
    }

    /// Flatten `[c, d, h, w]` into tokens `[d*h*w, c]` (spatial order, x fastest).
    pub fn vol_to_tokens(&mut self, x: DiffValue) -> Result<DiffValue> {
        let (c, d, h, w) = self.vol_shape("vol_to_tokens", x)?;
        let n = d * h * w;
        let mut data = vec![S::zero(); n * c];
        let src = &self.nodes[x.0].data;
        for cc in 0..c {
            for t in 0..n {
                data[t * c + cc] = src[cc * n + t];
            }
        }
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, c], data, rq, Op::VolToTokens(x.0)))
    }

    /// Inverse of [`Graph::vol_to_tokens`] onto the `[d, h, w]` grid.
    pub fn tokens_to_vol(&mut self, x: DiffValue, dims: [usize; 3]) -> Result<DiffValue> {
        let s = &self.nodes[x.0].shape;
        let n = dims[0] * dims[1] * dims[2];
        if s.len() != 2 || s[0] != n {
            return Err(DiffError::Invalid {
                op: "tokens_to_vol",
                msg: format!("token count {:?} does not match grid {dims:?}", s),
            });
        }
        let c = s[1];
        let mut data = vec![S::zero(); c * n];
        let src = &self.nodes[x.0].data;
        for t in 0..n {
            for cc in 0..c {
                data[cc * n + t] = src[t * c + cc];
            }
        }
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(
            vec![c, dims[0], dims[1], dims[2]],
            data,
            rq,
            Op::TokensToVol(x.0),
        ))
    }

    /// Differentiable warp: `out[c](p) = image[c](p + u(p))`, field
    /// channel-planar `[3, d, h, w]`, clamp-to-edge. Differentiable w.r.t.
    /// both image and field.
    pub fn gather_trilinear(&mut self, image: DiffValue, field: DiffValue) -> Result<DiffValue> {
        let (c, d, h, w) = self.vol_shape("gather_trilinear", image)?;
        let fs = &self.nodes[field.0].shape;
        if fs != &[3, d, h, w] {
            return Err(DiffError::ShapeMismatch {
                op: "gather_trilinear",
                a: vec![3, d, h, w],
                b: fs.clone(),
            });
        }
        let mut data = vec![S::zero(); c * d * h * w];
        kernels::gather_trilinear_fwd(
            &self.nodes[image.0].data,
            &self.nodes[field.0].data,
            (c, d, h, w),
            &mut data,
        );
        let rq = self.any_grad(&[image.0, field.0]);
        Ok(self.push(
            vec![c, d, h, w],
            data,
            rq,
            Op::GatherTrilinear {
                image: image.0,
                field: field.0,
            },
        ))
    }

    /// Forward difference along spatial axis 1..=3 of `[c, d, h, w]`.
    pub fn forward_diff(&mut self, x: DiffValue, axis: usize) -> Result<DiffValue> {
        let (c, d, h, w) = self.vol_shape("forward_diff", x)?;
        if !(1..=3).contains(&axis) {
            return Err(DiffError::InvalidAxis {
                op: "forward_diff",
                axis,
                rank: 4,
            });
        }
        let in_shape = [c, d, h, w];
        if in_shape[axis] < 2 {
            return Err(DiffError::Invalid {
                op: "forward_diff",
                msg: format!("axis {axis} too small: {in_shape:?}"),
            });
        }
        let mut out_shape = in_shape;
        out_shape[axis] -= 1;
        let stride: usize = in_shape[axis + 1..].iter().product();
        let outer: usize = in_shape[..axis].iter().product();
        let (n_in, n_out) = (in_shape[axis], out_shape[axis]);
        let mut data = vec![S::zero(); out_shape.iter().product()];
        let src = &self.nodes[x.0].data;
        for o in 0..outer {
            for j in 0..n_out {
                for i in 0..stride {
                    data[(o * n_out + j) * stride + i] =
                        src[(o * n_in + j + 1) * stride + i] - src[(o * n_in + j) * stride + i];
                }
            }
        }
        let rq = self.nodes[x.0].requires_grad;
        Ok(self.push(
            out_shape.to_vec(),
            data,
            rq,
            Op::ForwardDiff { x: x.0, axis },
        ))
    }

    // ---- backward ----

    /// Accumulate `dLoss/dLeaf` into every reachable value that requires
    /// gradient. `loss` must be scalar.
    pub fn backward(&mut self, loss: DiffValue) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(DiffError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if self.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let grad = self.nodes[id].grad.take().unwrap();
            let contribs = self.parent_contribs(id, &grad);
            self.nodes[id].grad = Some(grad);
            for (parent, contrib) in contribs {
                self.add_grad(parent, contrib);
            }
        }
        Ok(())
    }

    /// Drop all gradients so another backward pass may run.
    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn add_grad(&mut self, id: usize, contrib: Vec<S>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    /// Per-parent gradient contributions of node `id` given its output grad.
    fn parent_contribs(&self, id: usize, g: &[S]) -> Vec<(usize, Vec<S>)> {
        let rq = |i: usize| self.nodes[i].requires_grad;
        let data = |i: usize| self.nodes[i].data.as_slice();
        let mut out: Vec<(usize, Vec<S>)> = Vec::new();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rq(*a) {
                    out.push((*a, g.to_vec()));
                }
                if rq(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if rq(*a) {
                    out.push((*a, g.to_vec()));
                }
                if rq(*b) {
                    out.push((*b, g.iter().map(|v| -*v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if rq(*a) {
                    out.push((*a, g.iter().zip(data(*b)).map(|(g, v)| *g * *v).collect()));
                }
                if rq(*b) {
                    out.push((*b, g.iter().zip(data(*a)).map(|(g, v)| *g * *v).collect()));
                }
            }
            Op::Scale(x, c) => {
                if rq(*x) {
                    let k = lit::<S>(*c);
                    out.push((*x, g.iter().map(|v| *v * k).collect()));
                }
            }
            Op::Square(x) => {
                if rq(*x) {
                    let two = lit::<S>(2.0);
                    out.push((
                        *x,
                        g.iter().zip(data(*x)).map(|(g, v)| two * *g * *v).collect(),
                    ));
                }
            }
            Op::Sum(x) => {
                if rq(*x) {
                    out.push((*x, vec![g[0]; self.nodes[*x].data.len()]));
                }
            }
            Op::Mean(x) => {
                if rq(*x) {
                    let n = self.nodes[*x].data.len();
                    out.push((*x, vec![g[0] / lit::<S>(n as f64); n]));
                }
            }
            Op::Concat { xs, axis } => {
                let shape = &self.nodes[id].shape;
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let lane_out = shape[*axis] * inner;
                let mut off = 0;
                for x in xs {
                    let len = self.nodes[*x].shape[*axis] * inner;
                    if rq(*x) {
                        let mut gx = vec![S::zero(); self.nodes[*x].data.len()];
                        for o in 0..outer {
                            gx[o * len..(o + 1) * len].copy_from_slice(
                                &g[o * lane_out + off..o * lane_out + off + len],
                            );
                        }
                        out.push((*x, gx));
                    }
                    off += len;
                }
            }
            Op::Reshape(x) => {
                if rq(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::SliceCols { x, start, len } => {
                if rq(*x) {
                    let cols = self.nodes[*x].shape[1];
                    let rows = self.nodes[*x].shape[0];
                    let mut gx = vec![S::zero(); rows * cols];
                    for r in 0..rows {
                        gx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    out.push((*x, gx));
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if rq(*a) {
                    let mut ga = vec![S::zero(); m * k];
                    kernels::matmul_bwd_a(g, data(*b), m, k, n, &mut ga);
                    out.push((*a, ga));
                }
                if rq(*b) {
                    let mut gb = vec![S::zero(); k * n];
                    kernels::matmul_bwd_b(g, data(*a), m, k, n, &mut gb);
                    out.push((*b, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (t, n_in) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let n_out = self.nodes[*w].shape[0];
                if rq(*x) {
                    let mut gx = vec![S::zero(); t * n_in];
                    kernels::linear_bwd_x(g, data(*w), t, n_in, n_out, &mut gx);
                    out.push((*x, gx));
                }
                if rq(*w) {
                    let mut gw = vec![S::zero(); n_out * n_in];
                    kernels::linear_bwd_w(g, data(*x), t, n_in, n_out, &mut gw);
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if rq(*b) {
                        let mut gb = vec![S::zero(); n_out];
                        kernels::linear_bwd_b(g, t, n_out, &mut gb);
                        out.push((*b, gb));
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if rq(*x) {
                    let k = lit::<S>(*slope);
                    out.push((
                        *x,
                        g.iter()
                            .zip(data(*x))
                            .map(|(g, v)| if *v >= S::zero() { *g } else { *g * k })
                            .collect(),
                    ));
                }
            }
            Op::Silu(x) => {
                if rq(*x) {
                    out.push((
                        *x,
                        g.iter()
                            .zip(data(*x))
                            .map(|(g, v)| {
                                let s = S::one() / (S::one() + (-*v).exp());
                                *g * (s + *v * s * (S::one() - s))
                            })
                            .collect(),
                    ));
                }
            }
            Op::Softmax { x, axis } => {
                if rq(*x) {
                    let shape = self.nodes[id].shape.clone();
                    let mut gx = vec![S::zero(); g.len()];
                    kernels::softmax_bwd(&self.nodes[id].data, g, &shape, *axis, &mut gx);
                    out.push((*x, gx));
                }
            }
            Op::RmsNorm { x, eps } => {
                if rq(*x) {
                    let n = *self.nodes[*x].shape.last().unwrap();
                    let mut gx = vec![S::zero(); g.len()];
                    kernels::rms_norm_bwd(data(*x), g, n, *eps, &mut gx);
                    out.push((*x, gx));
                }
            }
            Op::ScaleCols { x, gain } => {
                let (t, n) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                if rq(*x) {
                    let gd = data(*gain);
                    let mut gx = vec![S::zero(); t * n];
                    for r in 0..t {
                        for i in 0..n {
                            gx[r * n + i] = g[r * n + i] * gd[i];
                        }
                    }
                    out.push((*x, gx));
                }
                if rq(*gain) {
                    let xd = data(*x);
                    let mut gg = vec![S::zero(); n];
                    for r in 0..t {
                        for i in 0..n {
                            gg[i] = gg[i] + g[r * n + i] * xd[r * n + i];
                        }
                    }
                    out.push((*gain, gg));
                }
            }
            Op::Rotary { x, base } => {
                if rq(*x) {
                    let (t, dim) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                    let mut gx = vec![S::zero(); t * dim];
                    kernels::rotary_fwd(g, t, dim, *base, &mut gx, true);
                    out.push((*x, gx));
                }
            }
            Op::Conv3d { x, w, b, stride } => {
                let s = &self.nodes[*x].shape;
                let dims = (s[0], s[1], s[2], s[3]);
                let co = self.nodes[*w].shape[0];
                if rq(*x) {
                    let mut gx = vec![S::zero(); self.nodes[*x].data.len()];
                    kernels::conv3d_bwd_input(g, dims, data(*w), co, *stride, &mut gx);
                    out.push((*x, gx));
                }
                if rq(*w) || rq(*b) {
                    let mut gw = vec![S::zero(); self.nodes[*w].data.len()];
                    let mut gb = vec![S::zero(); co];
                    kernels::conv3d_bwd_params(data(*x), dims, g, co, *stride, &mut gw, &mut gb);
                    if rq(*w) {
                        out.push((*w, gw));
                    }
                    if rq(*b) {
                        out.push((*b, gb));
                    }
                }
            }
            Op::ConvTransposed3d { x, w, b } => {
                let s = &self.nodes[*x].shape;
                let dims = (s[0], s[1], s[2], s[3]);
                let co = self.nodes[*w].shape[1];
                if rq(*x) {
                    let mut gx = vec![S::zero(); self.nodes[*x].data.len()];
                    kernels::convt3d_bwd_input(g, dims, data(*w), co, &mut gx);
                    out.push((*x, gx));
                }
                if rq(*w) || rq(*b) {
                    let mut gw = vec![S::zero(); self.nodes[*w].data.len()];
                    let mut gb = vec![S::zero(); co];
                    kernels::convt3d_bwd_params(data(*x), dims, g, co, &mut gw, &mut gb);
                    if rq(*w) {
                        out.push((*w, gw));
                    }
                    if rq(*b) {
                        out.push((*b, gb));
                    }
                }
            }
            Op::Upsample2x(x) => {
                if rq(*x) {
                    let s = &self.nodes[*x].shape;
                    let mut gx = vec![S::zero(); self.nodes[*x].data.len()];
                    kernels::upsample2x_bwd(g, (s[0], s[1], s[2], s[3]), &mut gx);
                    out.push((*x, gx));
                }
            }
            Op::Downsample2x(x) => {
                if rq(*x) {
                    let s = &self.nodes[*x].shape;
                    let mut gx = vec![S::zero(); self.nodes[*x].data.len()];
                    kernels::downsample2x_bwd(g, (s[0], s[1], s[2], s[3]), &mut gx);
                    out.push((*x, gx));
                }
            }
            Op::Transpose2d(x) => {
                if rq(*x) {
                    let (r, c) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                    let mut gx = vec![S::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = g[j * r + i];
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::VoxelShuffle { x, r } => {
                if rq(*x) {
                    let s = &self.nodes[*x].shape;
                    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
                    let r3 = r * r * r;
                    let co = c / r3;
                    let (od, oh, ow) = (d * r, h * r, w * r);
                    let mut gx = vec![S::zero(); c * d * h * w];
                    for cc in 0..co {
                        for z in 0..d {
                            for dz in 0..*r {
                                for y in 0..h {
                                    for dy in 0..*r {
                                        for xx in 0..w {
                                            for dx in 0..*r {
                                                let ci = cc * r3 + (dz * r + dy) * r + dx;
                                                gx[((ci * d + z) * h + y) * w + xx] = g[((cc * od
                                                    + z * r
                                                    + dz)
                                                    * oh
                                                    + y * r
                                                    + dy)
                                                    * ow
                                                    + xx * r
                                                    + dx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::VolToTokens(x) => {
                if rq(*x) {
                    let s = &self.nodes[*x].shape;
                    let (c, n) = (s[0], s[1] * s[2] * s[3]);
                    let mut gx = vec![S::zero(); c * n];
                    for t in 0..n {
                        for cc in 0..c {
                            gx[cc * n + t] = g[t * c + cc];
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::TokensToVol(x) => {
                if rq(*x) {
                    let s = &self.nodes[id].shape;
                    let (c, n) = (s[0], s[1] * s[2] * s[3]);
                    let mut gx = vec![S::zero(); n * c];
                    for cc in 0..c {
                        for t in 0..n {
                            gx[t * c + cc] = g[cc * n + t];
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::GatherTrilinear { image, field } => {
                let s = &self.nodes[*image].shape;
                let dims = (s[0], s[1], s[2], s[3]);
                let mut gimg = if rq(*image) {
                    Some(vec![S::zero(); self.nodes[*image].data.len()])
                } else {
                    None
                };
                let mut gfield = if rq(*field) {
                    Some(vec![S::zero(); self.nodes[*field].data.len()])
                } else {
                    None
                };
                kernels::gather_trilinear_bwd(
                    data(*image),
                    data(*field),
                    dims,
                    g,
                    gimg.as_deref_mut(),
                    gfield.as_deref_mut(),
                );
                if let Some(gi) = gimg {
                    out.push((*image, gi));
                }
                if let Some(gf) = gfield {
                    out.push((*field, gf));
                }
            }
            Op::ForwardDiff { x, axis } => {
                if rq(*x) {
                    let s = &self.nodes[*x].shape;
                    let in_shape = [s[0], s[1], s[2], s[3]];
                    let stride: usize = in_shape[axis + 1..].iter().product();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let n_in = in_shape[*axis];
                    let n_out = n_in - 1;
                    let mut gx = vec![S::zero(); self.nodes[*x].data.len()];
                    for o in 0..outer {
                        for j in 0..n_out {
                            for i in 0..stride {
                                let gv = g[(o * n_out + j) * stride + i];
                                gx[(o * n_in + j + 1) * stride + i] =
                                    gx[(o * n_in + j + 1) * stride + i] + gv;
                                gx[(o * n_in + j) * stride + i] =
                                    gx[(o * n_in + j) * stride + i] - gv;
                            }
                        }
                    }
                    out.push((*x, gx));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[5], vec![1.0, -2.0, 0.5, 3.0, 4.0], true).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn backward_of_mean_square_matches_closed_form() {
        // d/dx mean(x^2) = 2x/n, so for x = [1, 2] the gradient is [1, 2].
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let sq = g.square(x).unwrap();
        let loss = g.mean(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn frozen_leaf_never_materializes_grad() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let frozen = g.leaf(&[3], vec![4.0, 5.0, 6.0], false).unwrap();
        let y = g.mul(x, frozen).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(frozen).is_none());
        assert_eq!(g.grad(x).unwrap(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_an_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(g.backward(x), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_twice_without_clear_is_an_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(DiffError::BackwardTwice)));
        g.clear_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn add_shape_mismatch_is_an_error() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.leaf(&[2], vec![0.0; 2], false).unwrap();
        let b = g.leaf(&[3], vec![0.0; 3], false).unwrap();
        assert!(matches!(g.add(a, b), Err(DiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_invalid_axis_is_an_error() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.leaf(&[2, 2], vec![0.0; 4], false).unwrap();
        assert!(matches!(
            g.softmax(a, 2),
            Err(DiffError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn conv_identity_kernel_through_graph() {
        let mut g: Graph<f32> = Graph::new();
        let x = g
            .leaf(&[1, 3, 3, 3], (0..27).map(|i| i as f32).collect(), false)
            .unwrap();
        let mut wk = vec![0.0f32; 27];
        wk[13] = 1.0;
        let w = g.leaf(&[1, 1, 3, 3, 3], wk, false).unwrap();
        let b = g.leaf(&[1], vec![0.0], false).unwrap();
        let y = g.conv3d(x, w, b, 1).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn transposed_conv_shape_rule() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(&[2, 4, 4, 4], vec![0.0; 2 * 64], false).unwrap();
        let w = g.leaf(&[2, 3, 2, 2, 2], vec![0.0; 2 * 3 * 8], false).unwrap();
        let b = g.leaf(&[3], vec![0.0; 3], false).unwrap();
        let y = g.conv_transposed3d(x, w, b).unwrap();
        assert_eq!(g.shape(y), &[3, 8, 8, 8]);
    }

    #[test]
    fn voxel_shuffle_conserves_elements_and_inverts() {
        let mut g: Graph<f32> = Graph::new();
        let n = 16 * 2 * 2 * 2;
        let x = g
            .leaf(&[16, 2, 2, 2], (0..n).map(|i| i as f32).collect(), true)
            .unwrap();
        let y = g.voxel_shuffle(x, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4, 4]);
        assert_eq!(g.data(y).len(), n);
        let mut sorted_in: Vec<f32> = g.data(x).to_vec();
        let mut sorted_out: Vec<f32> = g.data(y).to_vec();
        sorted_in.sort_by(f32::total_cmp);
        sorted_out.sort_by(f32::total_cmp);
        assert_eq!(sorted_in, sorted_out);
    }

    #[test]
    fn tokens_round_trip() {
        let mut g: Graph<f32> = Graph::new();
        let x = g
            .leaf(&[3, 2, 2, 2], (0..24).map(|i| i as f32).collect(), false)
            .unwrap();
        let t = g.vol_to_tokens(x).unwrap();
        assert_eq!(g.shape(t), &[8, 3]);
        let back = g.tokens_to_vol(t, [2, 2, 2]).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn forward_results_are_deterministic() {
        let run = || {
            let mut g: Graph<f32> = Graph::new();
            let x = g
                .leaf(
                    &[2, 4, 4, 4],
                    (0..128).map(|i| (i as f32 * 0.37).sin()).collect(),
                    false,
                )
                .unwrap();
            let w = g
                .leaf(
                    &[3, 2, 3, 3, 3],
                    (0..162).map(|i| (i as f32 * 0.11).cos() * 0.2).collect(),
                    false,
                )
                .unwrap();
            let b = g.leaf(&[3], vec![0.1, -0.2, 0.3], false).unwrap();
            let y = g.conv3d(x, w, b, 1).unwrap();
            let z = g.leaky_relu(y, 0.2).unwrap();
            g.data(z).to_vec()
        };
        assert_eq!(run(), run());
    }
}
