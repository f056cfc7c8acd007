//! Reverse-mode autodiff on a Wengert tape.
//!
//! Every forward operation appends a node (value + op record) to an arena;
//! `backward` replays the arena in reverse, accumulating gradients into each
//! node. One tape is built per optimization step and dropped afterwards.
//!
//! Design rules:
//! * every op validates shapes and returns `Err` instead of panicking;
//! * every op checks its output for NaN/Inf and names itself in the error;
//! * ops that specialize a composite (fused losses, rotations, grid
//!   interpolation) exist so their backward passes stay exact and cheap.

use crate::error::{Error, Result};
use crate::tensor::{first_non_finite, mm, mm_at, mm_bt, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    // the source index is never read by backward (detach blocks gradient flow
    // by design) but keeps provenance visible in Debug dumps
    Detach {
        #[allow(dead_code)]
        x: usize,
    },
    Matmul { a: usize, b: usize },
    MatmulTransB { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    Gelu { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Softmax { x: usize, axis: usize, temp: T },
    CausalSoftmax { x: usize, temp: T },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: T },
    Mean { x: usize, axis: usize },
    Sum { x: usize, axis: usize },
    SumAll { x: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    Reshape { x: usize },
    ConcatRows { xs: Vec<usize> },
    SliceRows { x: usize, r0: usize },
    ConcatCols { xs: Vec<usize> },
    SliceCols { x: usize, c0: usize },
    Rope { x: usize, angles: Vec<T> },
    InterpGrid { table: usize, src: (usize, usize), dst: (usize, usize) },
    NllNextToken { logits: usize, targets: Vec<usize> },
    SoftCeCols { logits: usize, targets: Vec<T>, temp: T },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Map a source-axis coordinate onto a destination axis with align-corners
/// semantics. Returns `(lo, hi, frac)`; `hi == lo` and `frac == 0` whenever
/// the sample lands exactly on a source cell, which is what makes the
/// identity case bit-exact. Shared by image resizing and position-table
/// interpolation.
pub fn align_corners_split(src_len: usize, dst_len: usize, i: usize) -> (usize, usize, f64) {
    debug_assert!(src_len >= 1 && dst_len >= 1 && i < dst_len);
    if dst_len == 1 || src_len == 1 {
        return (0, 0, 0.0);
    }
    let u = i as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
    let lo = (u.floor() as usize).min(src_len - 1);
    let frac = u - lo as f64;
    if frac == 0.0 || lo == src_len - 1 {
        (lo, lo, 0.0)
    } else {
        (lo, lo + 1, frac)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(Error::Contract {
                op: "scalar_value",
                detail: format!("expected scalar, got shape {:?}", t.shape()),
            });
        }
        Ok(t.data()[0])
    }

    /// Gradient accumulated into `v` by the latest `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if first_non_finite(value.data()).is_some() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    /// Same value, but gradient flow stops here: `backward` never propagates
    /// past a detach node, so everything upstream sees exactly zero.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push("detach", value, Op::Detach { x: x.0 })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).as_2d()?;
        let (k2, n) = self.value(b).as_2d()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("[{m}x{k}] . [{k2}x{n}]: inner extents differ"),
            });
        }
        let data = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push("matmul", value, Op::Matmul { a: a.0, b: b.0 })
    }

    /// `a [m,k] . transpose(b [n,k]) -> [m,n]`. Used for attention scores
    /// and the weight-tied output head.
    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).as_2d()?;
        let (n, k2) = self.value(b).as_2d()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_transb",
                detail: format!("[{m}x{k}] . [{n}x{k2}]^T: inner extents differ"),
            });
        }
        let data = mm_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push("matmul_transb", value, Op::MatmulTransB { a: a.0, b: b.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "add",
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add", value, Op::Add { a: a.0, b: b.0 })
    }

    /// Broadcast a rank-1 bias over every row of a rank-2 tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(a).as_2d()?;
        if self.value(a).rank() != 2 || self.value(bias).shape() != [d] {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!(
                    "{:?} + row {:?}",
                    self.value(a).shape(),
                    self.value(bias).shape()
                ),
            });
        }
        let bv = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += bv[j];
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.push("add_row", value, Op::AddRow { a: a.0, bias: bias.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "mul",
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale { x: x.0, c })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu_f);
        self.push("gelu", value, Op::Gelu { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.exp());
        self.push("exp", value, Op::Exp { x: x.0 })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.ln());
        self.push("log", value, Op::Log { x: x.0 })
    }

    /// Temperature softmax along `axis`: `softmax(x / temperature)` with the
    /// usual max subtraction. Attention passes `sqrt(head_dim)` here.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidArg {
                op: "softmax",
                detail: format!("temperature must be positive and finite, got {temperature}"),
            });
        }
        let xs = self.value(x);
        if xs.rank() > 2 || axis > 1 || (xs.rank() == 1 && axis != 0) {
            return Err(Error::InvalidArg {
                op: "softmax",
                detail: format!("axis {axis} invalid for shape {:?}", xs.shape()),
            });
        }
        let temp = T::from_f64(temperature);
        let mut data = xs.data().to_vec();
        let shape = xs.shape().to_vec();
        let (rows, cols) = xs.as_2d()?;
        let row_major = xs.rank() == 1 || axis == 1;
        for_each_lane(&mut data, rows, cols, row_major, |lane| softmax_lane(lane, temp));
        let value = Tensor::new(shape, data)?;
        self.push(
            "softmax",
            value,
            Op::Softmax {
                x: x.0,
                axis: if row_major { 1 } else { 0 },
                temp,
            },
        )
    }

    /// Row softmax over a square score matrix where row `i` may only attend
    /// to columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidArg {
                op: "causal_softmax",
                detail: format!("temperature must be positive and finite, got {temperature}"),
            });
        }
        let (n, n2) = self.value(x).as_2d()?;
        if n != n2 || self.value(x).rank() != 2 {
            return Err(Error::Shape {
                op: "causal_softmax",
                detail: format!("square matrix required, got {:?}", self.value(x).shape()),
            });
        }
        let temp = T::from_f64(temperature);
        let xs = self.value(x).data();
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            let row = &xs[i * n..i * n + i + 1];
            let out = &mut data[i * n..i * n + i + 1];
            out.copy_from_slice(row);
            softmax_lane(out, temp);
        }
        let value = Tensor::new(vec![n, n], data)?;
        self.push("causal_softmax", value, Op::CausalSoftmax { x: x.0, temp })
    }

    /// Per-row layer normalization with learned gain/bias over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArg {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let (n, d) = self.value(x).as_2d()?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.value(x).shape(),
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            });
        }
        let eps = T::from_f64(eps);
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let xs = self.value(x).data();
        let mut data = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let (mu, inv_sigma) = moments(row, eps);
            for j in 0..d {
                data[i * d + j] = (row[j] - mu) * inv_sigma * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        )
    }

    /// Reduce one axis of a rank-2 tensor to its mean; output is rank-1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name: &'static str = if mean { "mean" } else { "sum" };
        let xs = self.value(x);
        if xs.rank() != 2 || axis > 1 {
            return Err(Error::InvalidArg {
                op: name,
                detail: format!("axis {axis} invalid for shape {:?}", xs.shape()),
            });
        }
        let (n, d) = xs.as_2d()?;
        let data = xs.data();
        let (out_len, lanes) = if axis == 0 { (d, n) } else { (n, d) };
        let mut out = vec![T::zero(); out_len];
        for i in 0..n {
            for j in 0..d {
                let o = if axis == 0 { j } else { i };
                out[o] += data[i * d + j];
            }
        }
        if mean {
            let inv = T::one() / T::from_f64(lanes as f64);
            for o in &mut out {
                *o *= inv;
            }
        }
        let value = Tensor::new(vec![out_len], out)?;
        let op = if mean {
            Op::Mean { x: x.0, axis }
        } else {
            Op::Sum { x: x.0, axis }
        };
        self.push(name, value, op)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push("sum_all", Tensor::scalar(acc), Op::SumAll { x: x.0 })
    }

    /// Select rows of a rank-2 tensor by index, with repetition allowed.
    /// Backward scatter-adds, so this doubles as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (n, d) = self.value(x).as_2d()?;
        if self.value(x).rank() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("rank-2 tensor required, got {:?}", self.value(x).shape()),
            });
        }
        if idx.is_empty() {
            return Err(Error::InvalidArg {
                op: "gather_rows",
                detail: "empty index list".into(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArg {
                op: "gather_rows",
                detail: format!("row index {bad} out of range for {n} rows"),
            });
        }
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(&xs[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![idx.len(), d], data)?;
        self.push("gather_rows", value, Op::GatherRows { x: x.0, idx })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || numel != self.value(x).numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.value(x).shape(), shape),
            });
        }
        let value = Tensor::new(shape, self.value(x).data().to_vec())?;
        self.push("reshape", value, Op::Reshape { x: x.0 })
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArg {
                op: "concat_rows",
                detail: "empty input list".into(),
            });
        }
        let (_, d) = self.value(xs[0]).as_2d()?;
        let mut rows = 0usize;
        for &v in xs {
            let (r, c) = self.value(v).as_2d()?;
            if c != d || self.value(v).rank() != 2 {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("column mismatch: {d} vs {c}"),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * d);
        for &v in xs {
            data.extend_from_slice(self.value(v).data());
        }
        let value = Tensor::new(vec![rows, d], data)?;
        self.push(
            "concat_rows",
            value,
            Op::ConcatRows {
                xs: xs.iter().map(|v| v.0).collect(),
            },
        )
    }

    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize) -> Result<Var> {
        let (n, d) = self.value(x).as_2d()?;
        if self.value(x).rank() != 2 || r0 >= r1 || r1 > n {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("rows {r0}..{r1} of {:?}", self.value(x).shape()),
            });
        }
        let data = self.value(x).data()[r0 * d..r1 * d].to_vec();
        let value = Tensor::new(vec![r1 - r0, d], data)?;
        self.push("slice_rows", value, Op::SliceRows { x: x.0, r0 })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArg {
                op: "concat_cols",
                detail: "empty input list".into(),
            });
        }
        let (n, _) = self.value(xs[0]).as_2d()?;
        let mut cols = 0usize;
        for &v in xs {
            let (r, c) = self.value(v).as_2d()?;
            if r != n || self.value(v).rank() != 2 {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row mismatch: {n} vs {r}"),
                });
            }
            cols += c;
        }
        let mut data = vec![T::zero(); n * cols];
        let mut c0 = 0usize;
        for &v in xs {
            let (_, c) = self.value(v).as_2d()?;
            let src = self.value(v).data();
            for i in 0..n {
                data[i * cols + c0..i * cols + c0 + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            c0 += c;
        }
        let value = Tensor::new(vec![n, cols], data)?;
        self.push(
            "concat_cols",
            value,
            Op::ConcatCols {
                xs: xs.iter().map(|v| v.0).collect(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, c0: usize, c1: usize) -> Result<Var> {
        let (n, d) = self.value(x).as_2d()?;
        if self.value(x).rank() != 2 || c0 >= c1 || c1 > d {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("cols {c0}..{c1} of {:?}", self.value(x).shape()),
            });
        }
        let src = self.value(x).data();
        let w = c1 - c0;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&src[i * d + c0..i * d + c1]);
        }
        let value = Tensor::new(vec![n, w], data)?;
        self.push("slice_cols", value, Op::SliceCols { x: x.0, c0 })
    }

    /// Rotate consecutive channel pairs `(2j, 2j+1)` of each row by the given
    /// angles (`angles[i * d/2 + j]` drives pair `j` of row `i`). The rotation
    /// is orthonormal, so norms are preserved and the backward pass is the
    /// rotation by the negated angles.
    pub fn rope(&mut self, x: Var, angles: &[f64]) -> Result<Var> {
        let (n, d) = self.value(x).as_2d()?;
        if self.value(x).rank() != 2 || d % 2 != 0 {
            return Err(Error::Shape {
                op: "rope",
                detail: format!("rank-2 with even columns required, got {:?}", self.value(x).shape()),
            });
        }
        if angles.len() != n * d / 2 {
            return Err(Error::Shape {
                op: "rope",
                detail: format!("{} angles for {n} rows of {} pairs", angles.len(), d / 2),
            });
        }
        let angles: Vec<T> = angles.iter().map(|&a| T::from_f64(a)).collect();
        let data = rope_apply(self.value(x).data(), &angles, n, d, false);
        let value = Tensor::new(vec![n, d], data)?;
        self.push("rope", value, Op::Rope { x: x.0, angles })
    }

    /// Bilinearly resample a `[src_h * src_w, d]` grid of rows onto a
    /// `[dst_h * dst_w, d]` grid (row-major, align-corners). Identity when
    /// shapes match. Differentiable in the table.
    pub fn interp_grid(
        &mut self,
        table: Var,
        src: (usize, usize),
        dst: (usize, usize),
    ) -> Result<Var> {
        let (n, d) = self.value(table).as_2d()?;
        if src.0 == 0 || src.1 == 0 || dst.0 == 0 || dst.1 == 0 {
            return Err(Error::InvalidArg {
                op: "interp_grid",
                detail: format!("grid extents must be positive: src {src:?}, dst {dst:?}"),
            });
        }
        if self.value(table).rank() != 2 || n != src.0 * src.1 {
            return Err(Error::Shape {
                op: "interp_grid",
                detail: format!("table {:?} does not cover src grid {src:?}", self.value(table).shape()),
            });
        }
        let tv = self.value(table).data();
        let mut data = vec![T::zero(); dst.0 * dst.1 * d];
        for (r, c, srow, w) in grid_taps(src, dst) {
            let out = &mut data[(r * dst.1 + c) * d..(r * dst.1 + c + 1) * d];
            let trow = &tv[srow * d..(srow + 1) * d];
            if w == 1.0 {
                out.copy_from_slice(trow);
            } else {
                let w = T::from_f64(w);
                for (o, &t) in out.iter_mut().zip(trow) {
                    *o += w * t;
                }
            }
        }
        let value = Tensor::new(vec![dst.0 * dst.1, d], data)?;
        self.push(
            "interp_grid",
            value,
            Op::InterpGrid {
                table: table.0,
                src,
                dst,
            },
        )
    }

    /// Summed next-token negative log-likelihood: row `i` of `logits` scores
    /// target id `targets[i]`. Returns a scalar SUM so callers own the
    /// normalization.
    pub fn nll_next_token(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).as_2d()?;
        if self.value(logits).rank() != 2 || targets.len() != n {
            return Err(Error::Shape {
                op: "nll_next_token",
                detail: format!("{} targets for {n} logit rows", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArg {
                op: "nll_next_token",
                detail: format!("target id {bad} out of range for {k} classes"),
            });
        }
        let xs = self.value(logits).data();
        let mut acc = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &xs[i * k..(i + 1) * k];
            acc += log_sum_exp(row) - row[t];
        }
        self.push(
            "nll_next_token",
            Tensor::scalar(acc),
            Op::NllNextToken {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        )
    }

    /// Soft cross-entropy between fixed column-stochastic targets and the
    /// column softmax of `logits / temperature`, averaged over columns:
    /// `-(1/B) * sum_b sum_k q[k,b] * log p[k,b]`.
    pub fn soft_cross_entropy_cols(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        temperature: f64,
    ) -> Result<Var> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidArg {
                op: "soft_cross_entropy_cols",
                detail: format!("temperature must be positive and finite, got {temperature}"),
            });
        }
        let (k, b) = self.value(logits).as_2d()?;
        if self.value(logits).rank() != 2 || targets.shape() != [k, b] {
            return Err(Error::Shape {
                op: "soft_cross_entropy_cols",
                detail: format!(
                    "logits {:?} vs targets {:?}",
                    self.value(logits).shape(),
                    targets.shape()
                ),
            });
        }
        if first_non_finite(targets.data()).is_some() {
            return Err(Error::NonFinite {
                op: "soft_cross_entropy_cols",
            });
        }
        for col in 0..b {
            let mut s = 0.0;
            for row in 0..k {
                s += targets.data()[row * b + col].to_f64();
            }
            if (s - 1.0).abs() > 1e-4 {
                return Err(Error::Contract {
                    op: "soft_cross_entropy_cols",
                    detail: format!("target column {col} sums to {s}, expected 1"),
                });
            }
        }
        let temp = T::from_f64(temperature);
        let xs = self.value(logits).data();
        let q = targets.data();
        // log p[k,b] computed directly as (x - max)/temp - log sum exp for
        // stability; never materializes p.
        let mut acc = T::zero();
        for col in 0..b {
            let mut m = T::neg_infinity();
            for row in 0..k {
                m = m.max(xs[row * b + col]);
            }
            let mut z = T::zero();
            for row in 0..k {
                z += ((xs[row * b + col] - m) / temp).exp();
            }
            let log_z = z.ln();
            for row in 0..k {
                let log_p = (xs[row * b + col] - m) / temp - log_z;
                acc -= q[row * b + col] * log_p;
            }
        }
        let value = Tensor::scalar(acc / T::from_f64(b as f64));
        self.push(
            "soft_cross_entropy_cols",
            value,
            Op::SoftCeCols {
                logits: logits.0,
                targets: q.to_vec(),
                temp,
            },
        )
    }

    /// Reverse pass from a scalar loss. Gradients of every node reached from
    /// `loss` are left on the tape for inspection; leaves of `detach` stay at
    /// `None` (exact zero) by construction.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            self.step_backward(id, &g);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, id: usize, contrib: Vec<T>) {
        debug_assert_eq!(contrib.len(), self.nodes[id].value.numel());
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi += *ci;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn val(&self, id: usize) -> &Tensor<T> {
        &self.nodes[id].value
    }

    #[allow(clippy::too_many_lines)]
    fn step_backward(&mut self, id: usize, g: &[T]) {
        // Each arm materializes the contribution(s) first (immutably reading
        // values), then feeds them to `accum`.
        match &self.nodes[id].op {
            Op::Leaf | Op::Detach { .. } => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.val(a).as_2d().unwrap();
                let (_, n) = self.val(b).as_2d().unwrap();
                let da = mm_bt(g, self.val(b).data(), m, n, k);
                let db = mm_at(self.val(a).data(), g, m, k, n);
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::MatmulTransB { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.val(a).as_2d().unwrap();
                let (n, _) = self.val(b).as_2d().unwrap();
                let da = mm(g, self.val(b).data(), m, n, k);
                let db = mm_at(g, self.val(a).data(), m, n, k);
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, g.to_vec());
                self.accum(b, g.to_vec());
            }
            Op::AddRow { a, bias } => {
                let (a, bias) = (*a, *bias);
                let (n, d) = self.val(a).as_2d().unwrap();
                let mut db = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += g[i * d + j];
                    }
                }
                self.accum(a, g.to_vec());
                self.accum(bias, db);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<T> = g.iter().zip(self.val(b).data()).map(|(&gi, &bi)| gi * bi).collect();
                let db: Vec<T> = g.iter().zip(self.val(a).data()).map(|(&gi, &ai)| gi * ai).collect();
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.accum(x, g.iter().map(|&gi| gi * c).collect());
            }
            Op::Gelu { x } => {
                let x = *x;
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.val(x).data())
                    .map(|(&gi, &xi)| gi * gelu_df(xi))
                    .collect();
                self.accum(x, dx);
            }
            Op::Exp { x } => {
                let x = *x;
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.nodes[id].value.data())
                    .map(|(&gi, &yi)| gi * yi)
                    .collect();
                self.accum(x, dx);
            }
            Op::Log { x } => {
                let x = *x;
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.val(x).data())
                    .map(|(&gi, &xi)| gi / xi)
                    .collect();
                self.accum(x, dx);
            }
            Op::Softmax { x, axis, temp } => {
                let (x, axis, temp) = (*x, *axis, *temp);
                let s = self.nodes[id].value.data();
                let (rows, cols) = self.nodes[id].value.as_2d().unwrap();
                let mut dx = vec![T::zero(); s.len()];
                // axis == 1: lanes are rows (stride 1); axis == 0: lanes are
                // columns (stride == cols).
                let (lanes, lane_len, step, base_mul) = if axis == 1 {
                    (rows, cols, 1, cols)
                } else {
                    (cols, rows, cols, 1)
                };
                for lane in 0..lanes {
                    let base = lane * base_mul;
                    let mut dot = T::zero();
                    for i in 0..lane_len {
                        let idx = base + i * step;
                        dot += g[idx] * s[idx];
                    }
                    for i in 0..lane_len {
                        let idx = base + i * step;
                        dx[idx] = s[idx] * (g[idx] - dot) / temp;
                    }
                }
                self.accum(x, dx);
            }
            Op::CausalSoftmax { x, temp } => {
                let (x, temp) = (*x, *temp);
                let s = self.nodes[id].value.data();
                let (n, _) = self.nodes[id].value.as_2d().unwrap();
                let mut dx = vec![T::zero(); n * n];
                for i in 0..n {
                    let mut dot = T::zero();
                    for j in 0..=i {
                        dot += g[i * n + j] * s[i * n + j];
                    }
                    for j in 0..=i {
                        dx[i * n + j] = s[i * n + j] * (g[i * n + j] - dot) / temp;
                    }
                }
                self.accum(x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let (n, d) = self.val(x).as_2d().unwrap();
                let xs = self.val(x).data();
                let gv = self.val(gain).data();
                let inv_d = T::one() / T::from_f64(d as f64);
                let mut dx = vec![T::zero(); n * d];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for i in 0..n {
                    let row = &xs[i * d..(i + 1) * d];
                    let (mu, inv_sigma) = moments(row, eps);
                    // xh = normalized row; gg = gain ⊙ upstream grad
                    let mut mean_gg = T::zero();
                    let mut mean_gg_xh = T::zero();
                    for j in 0..d {
                        let xh = (row[j] - mu) * inv_sigma;
                        let gi = g[i * d + j];
                        let gg = gv[j] * gi;
                        dgain[j] += gi * xh;
                        dbias[j] += gi;
                        mean_gg += gg;
                        mean_gg_xh += gg * xh;
                    }
                    mean_gg *= inv_d;
                    mean_gg_xh *= inv_d;
                    for j in 0..d {
                        let xh = (row[j] - mu) * inv_sigma;
                        let gg = gv[j] * g[i * d + j];
                        dx[i * d + j] = (gg - mean_gg - xh * mean_gg_xh) * inv_sigma;
                    }
                }
                self.accum(x, dx);
                self.accum(gain, dgain);
                self.accum(bias, dbias);
            }
            Op::Mean { x, axis } | Op::Sum { x, axis } => {
                let mean = matches!(self.nodes[id].op, Op::Mean { .. });
                let (x, axis) = (*x, *axis);
                let (n, d) = self.val(x).as_2d().unwrap();
                let lanes = if axis == 0 { n } else { d };
                let scale = if mean {
                    T::one() / T::from_f64(lanes as f64)
                } else {
                    T::one()
                };
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    for j in 0..d {
                        let o = if axis == 0 { j } else { i };
                        dx[i * d + j] = g[o] * scale;
                    }
                }
                self.accum(x, dx);
            }
            Op::SumAll { x } => {
                let x = *x;
                let dx = vec![g[0]; self.val(x).numel()];
                self.accum(x, dx);
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let (n, d) = self.val(x).as_2d().unwrap();
                let mut dx = vec![T::zero(); n * d];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[i * d + j] += g[r * d + j];
                    }
                }
                self.accum(x, dx);
            }
            Op::Reshape { x } => {
                let x = *x;
                self.accum(x, g.to_vec());
            }
            Op::ConcatRows { xs } => {
                let xs = xs.clone();
                let mut r0 = 0usize;
                for xv in xs {
                    let (r, d) = self.val(xv).as_2d().unwrap();
                    let part = g[r0 * d..(r0 + r) * d].to_vec();
                    self.accum(xv, part);
                    r0 += r;
                }
            }
            Op::SliceRows { x, r0 } => {
                let (x, r0) = (*x, *r0);
                let (n, d) = self.val(x).as_2d().unwrap();
                let rows = g.len() / d;
                let mut dx = vec![T::zero(); n * d];
                dx[r0 * d..(r0 + rows) * d].copy_from_slice(g);
                self.accum(x, dx);
            }
            Op::ConcatCols { xs } => {
                let xs = xs.clone();
                let (n, total) = self.nodes[id].value.as_2d().unwrap();
                let mut c0 = 0usize;
                for xv in xs {
                    let (_, c) = self.val(xv).as_2d().unwrap();
                    let mut part = vec![T::zero(); n * c];
                    for i in 0..n {
                        part[i * c..(i + 1) * c]
                            .copy_from_slice(&g[i * total + c0..i * total + c0 + c]);
                    }
                    self.accum(xv, part);
                    c0 += c;
                }
            }
            Op::SliceCols { x, c0 } => {
                let (x, c0) = (*x, *c0);
                let (n, d) = self.val(x).as_2d().unwrap();
                let w = g.len() / n;
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    dx[i * d + c0..i * d + c0 + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accum(x, dx);
            }
            Op::Rope { x, angles } => {
                let x = *x;
                let angles = angles.clone();
                let (n, d) = self.val(x).as_2d().unwrap();
                let dx = rope_apply(g, &angles, n, d, true);
                self.accum(x, dx);
            }
            Op::InterpGrid { table, src, dst } => {
                let (table, src, dst) = (*table, *src, *dst);
                let (_, d) = self.val(table).as_2d().unwrap();
                let mut dt = vec![T::zero(); self.val(table).numel()];
                for (r, c, srow, w) in grid_taps(src, dst) {
                    let w = T::from_f64(w);
                    let grow = &g[(r * dst.1 + c) * d..(r * dst.1 + c + 1) * d];
                    let trow = &mut dt[srow * d..(srow + 1) * d];
                    for (t, &gi) in trow.iter_mut().zip(grow) {
                        *t += w * gi;
                    }
                }
                self.accum(table, dt);
            }
            Op::NllNextToken { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let (n, k) = self.val(logits).as_2d().unwrap();
                let xs = self.val(logits).data();
                let mut dx = vec![T::zero(); n * k];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &xs[i * k..(i + 1) * k];
                    let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
                    let z: T = row.iter().map(|&v| (v - m).exp()).fold(T::zero(), |a, b| a + b);
                    for j in 0..k {
                        let p = (row[j] - m).exp() / z;
                        dx[i * k + j] = g[0] * (p - if j == t { T::one() } else { T::zero() });
                    }
                }
                self.accum(logits, dx);
            }
            Op::SoftCeCols { logits, targets, temp } => {
                let logits = *logits;
                let temp = *temp;
                let q = targets.clone();
                let (k, b) = self.val(logits).as_2d().unwrap();
                let xs = self.val(logits).data();
                let inv_b = T::one() / T::from_f64(b as f64);
                let mut dx = vec![T::zero(); k * b];
                for col in 0..b {
                    let mut m = T::neg_infinity();
                    for row in 0..k {
                        m = m.max(xs[row * b + col]);
                    }
                    let mut z = T::zero();
                    for row in 0..k {
                        z += ((xs[row * b + col] - m) / temp).exp();
                    }
                    let mut q_sum = T::zero();
                    for row in 0..k {
                        q_sum += q[row * b + col];
                    }
                    for row in 0..k {
                        let p = ((xs[row * b + col] - m) / temp).exp() / z;
                        dx[row * b + col] = g[0] * inv_b * (p * q_sum - q[row * b + col]) / temp;
                    }
                }
                self.accum(logits, dx);
            }
        }
    }
}

fn gelu_f<T: Scalar>(x: T) -> T {
    // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_df<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

/// In-place max-subtracted temperature softmax over one contiguous lane.
fn softmax_lane<T: Scalar>(lane: &mut [T], temp: T) {
    let m = lane.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in lane.iter_mut() {
        *v = ((*v - m) / temp).exp();
        z += *v;
    }
    for v in lane.iter_mut() {
        *v /= z;
    }
}

/// Apply `f` to every row (row_major) or column lane of a `[rows, cols]`
/// buffer; column lanes are staged through a scratch vector.
fn for_each_lane<T: Scalar>(
    data: &mut [T],
    rows: usize,
    cols: usize,
    row_major: bool,
    mut f: impl FnMut(&mut [T]),
) {
    if row_major {
        for i in 0..rows {
            f(&mut data[i * cols..(i + 1) * cols]);
        }
    } else {
        let mut lane = vec![T::zero(); rows];
        for c in 0..cols {
            for i in 0..rows {
                lane[i] = data[i * cols + c];
            }
            f(&mut lane);
            for i in 0..rows {
                data[i * cols + c] = lane[i];
            }
        }
    }
}

/// Population mean and 1/sqrt(var + eps) of one row.
fn moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mu = T::zero();
    for &v in row {
        mu += v;
    }
    mu /= n;
    let mut var = T::zero();
    for &v in row {
        let dv = v - mu;
        var += dv * dv;
    }
    var /= n;
    (mu, T::one() / (var + eps).sqrt())
}

/// Rotate channel pairs; `invert` applies the transpose (angle negation).
pub(crate) fn rope_apply<T: Scalar>(x: &[T], angles: &[T], n: usize, d: usize, invert: bool) -> Vec<T> {
    let half = d / 2;
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        for j in 0..half {
            let a = angles[i * half + j];
            let (sin, cos) = (a.sin(), a.cos());
            let sin = if invert { -sin } else { sin };
            let x0 = x[i * d + 2 * j];
            let x1 = x[i * d + 2 * j + 1];
            out[i * d + 2 * j] = x0 * cos - x1 * sin;
            out[i * d + 2 * j + 1] = x0 * sin + x1 * cos;
        }
    }
    out
}

/// Enumerate bilinear taps for resampling a source grid onto a destination
/// grid: yields `(dst_row, dst_col, src_flat_index, weight)` with weights
/// summing to 1 per destination cell, and a single weight-1 tap when the
/// sample coincides with a source cell (bit-exact identity).
fn grid_taps(src: (usize, usize), dst: (usize, usize)) -> Vec<(usize, usize, usize, f64)> {
    let mut taps = Vec::new();
    for r in 0..dst.0 {
        let (r0, r1, fr) = align_corners_split(src.0, dst.0, r);
        for c in 0..dst.1 {
            let (c0, c1, fc) = align_corners_split(src.1, dst.1, c);
            if fr == 0.0 && fc == 0.0 {
                taps.push((r, c, r0 * src.1 + c0, 1.0));
            } else if fr == 0.0 {
                taps.push((r, c, r0 * src.1 + c0, 1.0 - fc));
                taps.push((r, c, r0 * src.1 + c1, fc));
            } else if fc == 0.0 {
                taps.push((r, c, r0 * src.1 + c0, 1.0 - fr));
                taps.push((r, c, r1 * src.1 + c0, fr));
            } else {
                taps.push((r, c, r0 * src.1 + c0, (1.0 - fr) * (1.0 - fc)));
                taps.push((r, c, r0 * src.1 + c1, (1.0 - fr) * fc));
                taps.push((r, c, r1 * src.1 + c0, fr * (1.0 - fc)));
                taps.push((r, c, r1 * src.1 + c1, fr * fc));
            }
        }
    }
    taps
}

/// Numerically stable log(sum(exp(row))).
fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for &v in row {
        z += (v - m).exp();
    }
    m + z.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]).unwrap()).unwrap();
        let b = g.leaf(Tensor::zeros(vec![4, 5]).unwrap()).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x5"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_log_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let s = g.softmax(x, 0, 1.0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = g
            .leaf(Tensor::new(vec![3], vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()]).unwrap())
            .unwrap();
        let s = g.softmax(x, 0, 1.0).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (v, w) in g.value(s).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()).unwrap();
        assert!(g.softmax(x, 0, 0.0).is_err());
        assert!(g.softmax(x, 0, -1.0).is_err());
    }

    #[test]
    fn softmax_axis0_normalizes_columns() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t2(&[&[0.0, 1.0], &[0.0, 3.0]])).unwrap();
        let s = g.softmax(x, 0, 1.0).unwrap();
        let v = g.value(s);
        assert!((v.at(0, 0) + v.at(1, 0) - 1.0).abs() < 1e-12);
        assert!((v.at(0, 1) + v.at(1, 1) - 1.0).abs() < 1e-12);
        assert!((v.at(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        let gain = g.leaf(Tensor::new(vec![3], vec![1.0; 3]).unwrap()).unwrap();
        let bias = g.leaf(Tensor::new(vec![3], vec![0.0; 3]).unwrap()).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap()).unwrap();
        let gain = g.leaf(Tensor::new(vec![2], vec![1.0; 2]).unwrap()).unwrap();
        let bias = g.leaf(Tensor::new(vec![2], vec![0.0; 2]).unwrap()).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-3);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        // loss = sum(w_detached * v): d loss/d v = w, d loss/d w = None (zero)
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let v = g.leaf(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap()).unwrap();
        let wd = g.detach(w).unwrap();
        let p = g.mul(wd, v).unwrap();
        let p2 = g.reshape(p, vec![1, 3]).unwrap();
        let loss = g.sum_all(p2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[1.0, 2.0, 3.0]);
        assert!(g.grad(w).is_none());
        // detach of detach is still a full stop
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::scalar(2.0)).unwrap();
        let d1 = g.detach(w).unwrap();
        let d2 = g.detach(d1).unwrap();
        let loss = g.sum_all(d2).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.value(d2).data(), &[2.0]);
    }

    #[test]
    fn square_function_gradient() {
        // d/dx x^2 at 3 is 6
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert!((g.grad(x).unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_forward_is_detected_and_named() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![0.0, -1.0]).unwrap()).unwrap();
        let err = g.log(x).unwrap_err();
        match err {
            Error::NonFinite { op } => assert_eq!(op, "log"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn causal_softmax_masks_upper_triangle() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t2(&[&[5.0, 100.0, 100.0], &[1.0, 1.0, 100.0], &[0.0, 0.0, 0.0]])).unwrap();
        let s = g.causal_softmax(x, 1.0).unwrap();
        let v = g.value(s);
        assert_eq!(v.at(0, 0), 1.0);
        assert_eq!(v.at(0, 1), 0.0);
        assert_eq!(v.at(0, 2), 0.0);
        assert!((v.at(1, 0) - 0.5).abs() < 1e-12);
        assert_eq!(v.at(1, 2), 0.0);
        for j in 0..3 {
            assert!((v.at(2, j) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_zero_angles_is_identity_and_preserves_norm() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t2(&[&[1.0, 2.0, 3.0, 4.0]])).unwrap();
        let y = g.rope(x, &[0.0, 0.0]).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let y2 = g.rope(x, &[0.7, -1.3]).unwrap();
        let n0: f64 = g.value(x).data().iter().map(|v| v * v).sum();
        let n1: f64 = g.value(y2).data().iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-12);
    }

    #[test]
    fn interp_grid_identity_is_bit_exact() {
        let mut g = Graph::<f64>::new();
        let table = g
            .leaf(Tensor::new(vec![4, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, 0.8]).unwrap())
            .unwrap();
        let out = g.interp_grid(table, (2, 2), (2, 2)).unwrap();
        assert_eq!(g.value(out).data(), g.value(table).data());
    }

    #[test]
    fn interp_grid_2x2_to_3x3_center() {
        // per-channel values [[0,1],[2,3]] -> 3x3 center is the mean 1.5
        let mut g = Graph::<f64>::new();
        let table = g
            .leaf(Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let out = g.interp_grid(table, (2, 2), (3, 3)).unwrap();
        let v = g.value(out).data();
        assert_eq!(v.len(), 9);
        assert!((v[4] - 1.5).abs() < 1e-12);
        // corners are exact copies
        assert_eq!(v[0], 0.0);
        assert_eq!(v[2], 1.0);
        assert_eq!(v[6], 2.0);
        assert_eq!(v[8], 3.0);
        // mid edges
        assert!((v[1] - 0.5).abs() < 1e-12);
        assert!((v[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nll_uniform_logits_is_log_k() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::zeros(vec![2, 7]).unwrap()).unwrap();
        let loss = g.nll_next_token(logits, &[3, 0]).unwrap();
        let v = g.scalar_value(loss).unwrap();
        assert!((v - 2.0 * 7.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_cols_matches_entropy_when_targets_equal_probs() {
        // With q == p, the loss is the mean column entropy of p.
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(t2(&[&[0.0, 1.0], &[0.0, -1.0], &[0.0, 0.5]])).unwrap();
        let temp = 1.0;
        let s = g.softmax(logits, 0, temp).unwrap();
        let p = g.value(s).clone();
        let loss = g.soft_cross_entropy_cols(logits, &p, temp).unwrap();
        let mut want = 0.0;
        for col in 0..2 {
            for row in 0..3 {
                let pr = p.at(row, col);
                want -= pr * pr.ln();
            }
        }
        want /= 2.0;
        assert!((g.scalar_value(loss).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_cols_rejects_non_stochastic_targets() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(t2(&[&[0.0], &[0.0]])).unwrap();
        let bad = Tensor::new(vec![2, 1], vec![0.9, 0.4]).unwrap();
        match g.soft_cross_entropy_cols(logits, &bad, 1.0) {
            Err(Error::Contract { .. }) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]).unwrap()).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gather_rows_backward_scatter_adds_repeats() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let y = g.gather_rows(x, vec![0, 0, 1]).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 1.0, 1.0]);
    }
}
