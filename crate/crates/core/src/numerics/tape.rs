//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node; `backward` walks the nodes in reverse
//! insertion order, which is a topological order by construction. Parameters
//! bound through [`Tape::bind`] are borrowed, not copied, and occupy the first
//! node slots so that `ParamId(i)` maps to node `i`.

use std::borrow::Cow;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Silu,
    Exp,
    Abs,
    Square,
}

/// Temporal convolution geometry. `left_pad` may be negative, in which case
/// leading frames are skipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub left_pad: isize,
}

impl ConvGeometry {
    /// Causal geometry: `(k − 1)·d + (1 − s)` frames of left padding.
    pub fn causal(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation,
            left_pad: causal_padding(kernel, stride, dilation),
        }
    }

    fn span(&self) -> isize {
        ((self.kernel - 1) * self.dilation) as isize
    }

    pub fn output_len(&self, frames: usize) -> usize {
        let avail = frames as isize + self.left_pad - self.span();
        if avail <= 0 {
            0
        } else {
            ((avail - 1) / self.stride as isize + 1) as usize
        }
    }

    /// Latest input frame that output frame `t_out` reads.
    pub fn last_input_frame(&self, t_out: usize) -> isize {
        (t_out * self.stride) as isize + self.span() - self.left_pad
    }
}

/// Left padding that makes a strided, dilated convolution causal.
pub fn causal_padding(kernel: usize, stride: usize, dilation: usize) -> isize {
    (kernel as isize - 1) * dilation as isize + (1 - stride as isize)
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Im2col {
        x: Var,
        dims: [usize; 4],
        geom: ConvGeometry,
        t_out: usize,
    },
    Mix {
        x: Var,
        matrix: Arc<Tensor<T>>,
        outer: usize,
        inner: usize,
    },
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        idx: Vec<usize>,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    TakeEntries {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batches: usize,
        probs: Vec<T>,
    },
    Reshape(Var),
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    grad: bool,
}

/// A single-writer recording of one forward pass.
pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
    n_params: usize,
}

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            n_params: 0,
        }
    }

    /// Tape whose first nodes are the parameters of `store`, borrowed.
    pub fn bind(store: &'p ParamStore<T>, requires_grad: bool) -> Self {
        let nodes = store
            .tensors()
            .iter()
            .map(|t| Node {
                value: Cow::Borrowed(t),
                op: Op::Leaf,
                grad: requires_grad,
            })
            .collect::<Vec<_>>();
        Self {
            n_params: nodes.len(),
            nodes,
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(
            id.index() < self.n_params,
            "parameter {} not bound on this tape",
            id.index()
        );
        Var(id.index())
    }

    pub fn n_params(&self) -> usize {
        self.n_params
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- linear

    /// `a[..., k] · b[k, n] → [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.rows_cols();
        let (k2, n) = bv
            .dims2()
            .map_err(|_| shape_err("matmul", av.shape(), bv.shape()))?;
        if k != k2 || av.rank() == 0 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            av.data(),
            (k as isize, 1),
            bv.data(),
            (n as isize, 1),
            &mut out,
            (n as isize, 1),
            false,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let grad = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul(a, b), grad)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let grad = self.needs(a) || self.needs(b);
        self.push(name, out, op, grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[..., n] + bias[n]`, broadcast over leading dims.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (_, n) = av.rows_cols();
        if bv.numel() != n || av.rank() == 0 {
            return Err(shape_err("add_bias", av.shape(), bv.shape()));
        }
        let b = bv.data();
        let data = av
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let grad = self.needs(a) || self.needs(bias);
        self.push("add_bias", out, Op::AddBias(a, bias), grad)
    }

    /// `a[..., n] · row[n]`, broadcast over leading dims.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (_, n) = av.rows_cols();
        if rv.numel() != n || av.rank() == 0 {
            return Err(shape_err("mul_row", av.shape(), rv.shape()));
        }
        let r = rv.data();
        let data = av
            .data()
            .chunks(n)
            .flat_map(|x| x.iter().zip(r).map(|(&x, &y)| x * y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let grad = self.needs(a) || self.needs(row);
        self.push("mul_row", out, Op::MulRow(a, row), grad)
    }

    /// `a[r, c] · col[r]`, each row scaled by its own factor.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        let (r, c) = av.rows_cols();
        if cv.numel() != r {
            return Err(shape_err("mul_col", av.shape(), cv.shape()));
        }
        let s = cv.data();
        let data = av
            .data()
            .chunks(c.max(1))
            .zip(s)
            .flat_map(|(row, &f)| row.iter().map(move |&x| x * f))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let grad = self.needs(a) || self.needs(col);
        self.push("mul_col", out, Op::MulCol(a, col), grad)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let grad = self.needs(a);
        self.push("scale", out, Op::Scale(a, s), grad)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let grad = self.needs(a);
        self.push("add_scalar", out, Op::Shift(a), grad)
    }

    /// Adds a constant tensor of identical shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != c.shape() {
            return Err(shape_err("add_const", av.shape(), c.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let grad = self.needs(a);
        self.push("add_const", out, Op::Shift(a), grad)
    }

    // --------------------------------------------------------- nonlinearity

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let f: fn(T) -> T = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => |x: T| x.tanh(),
            Unary::Silu => |x: T| x * sigmoid(x),
            Unary::Exp => |x: T| x.exp(),
            Unary::Abs => |x: T| x.abs(),
            Unary::Square => |x: T| x * x,
        };
        let out = self.value(a).map(f);
        let grad = self.needs(a);
        self.push("unary", out, Op::Unary(a, kind), grad)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() == 0 {
            return Err(invalid("softmax_lastdim", "scalar input"));
        }
        let out = Tensor::new(av.shape().to_vec(), softmax_rows(av.data(), av.rows_cols().1))?;
        let grad = self.needs(a);
        self.push("softmax_lastdim", out, Op::Softmax(a), grad)
    }

    /// Layer normalization over the last axis, without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let av = self.value(a);
        let (rows, n) = av.rows_cols();
        if n == 0 || av.rank() == 0 {
            return Err(invalid("layer_norm", "empty normalized axis"));
        }
        let inv_n = T::one() / T::of(n as f64);
        let mut out = Vec::with_capacity(av.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in av.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|&x| (x - mean) * r));
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let grad = self.needs(a);
        self.push("layer_norm", out, Op::LayerNorm { x: a, rstd }, grad)
    }

    // --------------------------------------------------------- convolution

    /// Window extraction for temporal convolution over `[n, t, m, c]`:
    /// returns `[n, t_out, m, kernel·c]`; padded positions read zero.
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        let xv = self.value(x);
        let dims: [usize; 4] = xv
            .shape()
            .try_into()
            .map_err(|_| invalid("conv1d", format!("expected [n, t, m, c], got {:?}", xv.shape())))?;
        if geom.kernel == 0 || geom.stride == 0 || geom.dilation == 0 {
            return Err(invalid("conv1d", format!("degenerate geometry {geom:?}")));
        }
        let [n, t, m, c] = dims;
        let t_out = geom.output_len(t);
        let k = geom.kernel;
        let mut out = vec![T::zero(); n * t_out * m * k * c];
        let src = xv.data();
        for ni in 0..n {
            for to in 0..t_out {
                for ki in 0..k {
                    let ti = (to * geom.stride + ki * geom.dilation) as isize - geom.left_pad;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let ti = ti as usize;
                    for mi in 0..m {
                        let s = ((ni * t + ti) * m + mi) * c;
                        let d = (((ni * t_out + to) * m + mi) * k + ki) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, t_out, m, k * c], out)?;
        let grad = self.needs(x);
        self.push(
            "conv1d",
            out,
            Op::Im2col {
                x,
                dims,
                geom,
                t_out,
            },
            grad,
        )
    }

    /// Temporal convolution of `[n, t, m, c_in]` with `weight[kernel·c_in, c_out]`,
    /// shared across the `m` axis.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 2 || ws[0] != geom.kernel * xs[3] {
            return Err(shape_err("conv1d", &xs, &ws));
        }
        let cols = self.im2col(x, geom)?;
        let y = self.matmul(cols, weight)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Linear mixing along axis 1 of `[outer, l_in, inner]` with a constant
    /// `matrix[l_out, l_in]`. Realizes neighbour aggregation, pooling,
    /// unpooling and interpolation.
    pub fn mix(&mut self, x: Var, matrix: Arc<Tensor<T>>, outer: usize) -> Result<Var> {
        let xv = self.value(x);
        let (l_out, l_in) = matrix.dims2()?;
        if outer == 0 || xv.numel() % (outer * l_in.max(1)) != 0 {
            return Err(shape_err("mix", xv.shape(), matrix.shape()));
        }
        let inner = xv.numel() / (outer * l_in);
        let src = xv.data();
        let mut out = vec![T::zero(); outer * l_out * inner];
        let md = matrix.data();
        for o in 0..outer {
            for a in 0..l_out {
                let dst = &mut out[(o * l_out + a) * inner..(o * l_out + a + 1) * inner];
                for b in 0..l_in {
                    let w = md[a * l_in + b];
                    if w == T::zero() {
                        continue;
                    }
                    let s = &src[(o * l_in + b) * inner..(o * l_in + b + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d += w * v;
                    }
                }
            }
        }
        let out = Tensor::new(vec![outer, l_out, inner], out)?;
        let grad = self.needs(x);
        self.push(
            "mix",
            out,
            Op::Mix {
                x,
                matrix,
                outer,
                inner,
            },
            grad,
        )
    }

    /// Doubles the temporal length of `[n, t, c]` by linear interpolation.
    pub fn interpolate_linear(&mut self, x: Var, outer: usize, frames: usize) -> Result<Var> {
        let m = Arc::new(interpolation_matrix::<T>(frames));
        self.mix(x, m, outer)
    }

    // ----------------------------------------------------------- reduction

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let grad = self.needs(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), grad)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let grad = self.needs(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), grad)
    }

    // --------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let grad = self.needs(a);
        self.push("reshape", out, Op::Reshape(a), grad)
    }

    /// Concatenate along the last axis; all parts must share leading rows.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let rows = self.value(*first).rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).rows_cols();
            if r != rows {
                return Err(shape_err("concat", self.shape(*first), self.shape(*p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = self.shape(*first).to_vec();
        *shape.last_mut().unwrap() = total;
        let grad = parts.iter().any(|&p| self.needs(p));
        self.push("concat", Tensor::new(shape, out)?, Op::ConcatCols(parts.to_vec()), grad)
    }

    /// Concatenate `[r_i, c]` parts into `[Σ r_i, c]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let cols = self.value(*first).rows_cols().1;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.rows_cols().1 != cols {
                return Err(shape_err("concat", self.shape(*first), v.shape()));
            }
            rows += v.rows_cols().0;
            out.extend_from_slice(v.data());
        }
        let grad = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat",
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            grad,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let (rows, cols) = v.rows_cols();
        if start + len > cols {
            return Err(invalid("slice", format!("columns {start}..{} of {cols}", start + len)));
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in v.data().chunks(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let grad = self.needs(a);
        self.push("slice", Tensor::new(shape, out)?, Op::SliceCols { x: a, start }, grad)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let grad = self.needs(a);
        self.push("slice", out, Op::SliceRows { x: a, start }, grad)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (rows, cols) = v.rows_cols();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(invalid("gather_rows", format!("row {i} of {rows}")));
            }
            out.extend_from_slice(v.row(i));
        }
        let grad = self.needs(a);
        self.push(
            "gather_rows",
            Tensor::new(vec![idx.len(), cols], out)?,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            grad,
        )
    }

    /// Rows of `a` added into a zero `[n_rows, c]` tensor at `idx`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let v = self.value(a);
        let (rows, cols) = v.rows_cols();
        if rows != idx.len() {
            return Err(invalid("scatter_add_rows", format!("{rows} rows, {} indices", idx.len())));
        }
        let mut out = vec![T::zero(); n_rows * cols];
        for (r, &i) in idx.iter().enumerate() {
            if i >= n_rows {
                return Err(invalid("scatter_add_rows", format!("row {i} of {n_rows}")));
            }
            for (d, &s) in out[i * cols..(i + 1) * cols].iter_mut().zip(v.row(r)) {
                *d += s;
            }
        }
        let grad = self.needs(a);
        self.push(
            "scatter_add_rows",
            Tensor::new(vec![n_rows, cols], out)?,
            Op::ScatterAddRows {
                x: a,
                idx: idx.to_vec(),
            },
            grad,
        )
    }

    /// `[r, c] → [r·times, c]`, row `i` repeated `times` times in place.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let v = self.value(a);
        let (rows, cols) = v.rows_cols();
        let mut out = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(v.row(r));
            }
        }
        let grad = self.needs(a);
        self.push(
            "repeat_rows",
            Tensor::new(vec![rows * times, cols], out)?,
            Op::RepeatRows { x: a, times },
            grad,
        )
    }

    /// Picks `a[r, c]` for each `(r, c)` into a `[k, 1]` column.
    pub fn take_entries(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let v = self.value(a);
        let (rows, cols) = v.rows_cols();
        let mut out = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= rows || c >= cols {
                return Err(invalid("take_entries", format!("({r}, {c}) of [{rows}, {cols}]")));
            }
            out.push(v.data()[r * cols + c]);
        }
        let grad = self.needs(a);
        self.push(
            "take_entries",
            Tensor::new(vec![idx.len(), 1], out)?,
            Op::TakeEntries {
                x: a,
                idx: idx.to_vec(),
            },
            grad,
        )
    }

    // ------------------------------------------------------------ attention

    /// Multi-head scaled dot-product attention. `q` is `[batches·tq, d]`,
    /// `k` and `v` are `[batches·tk, d]`; each batch segment attends only
    /// within itself.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, batches: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rq, d) = qv.rows_cols();
        let (rk, dk) = kv.rows_cols();
        if dk != d || vv.shape() != kv.shape() || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        if batches == 0 || rq % batches != 0 || rk % batches != 0 {
            return Err(invalid("attention", format!("{rq}/{rk} rows not divisible into {batches} batches")));
        }
        let (tq, tk, dh) = (rq / batches, rk / batches, d / heads);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![T::zero(); batches * heads * tq * tk];
        let mut out = vec![T::zero(); rq * d];
        for b in 0..batches {
            for h in 0..heads {
                let base = (b * heads + h) * tq * tk;
                for i in 0..tq {
                    let qrow = &qd[(b * tq + i) * d + h * dh..(b * tq + i) * d + (h + 1) * dh];
                    let p = &mut probs[base + i * tk..base + (i + 1) * tk];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let krow = &kd[(b * tk + j) * d + h * dh..(b * tk + j) * d + (h + 1) * dh];
                        *pj = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(p);
                    let orow = &mut out[(b * tq + i) * d + h * dh..(b * tq + i) * d + (h + 1) * dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vrow = &vd[(b * tk + j) * d + h * dh..(b * tk + j) * d + (h + 1) * dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(qv.shape().to_vec(), out)?;
        let grad = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                batches,
                probs,
            },
            grad,
        )
    }

    // ------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &*self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.rows_cols();
                let n = bv.shape()[1];
                if let Some(da) = self.acc(grads, *a) {
                    T::gemm(m, n, k, g, (n as isize, 1), bv.data(), (1, n as isize), da, (k as isize, 1), true);
                }
                if let Some(db) = self.acc(grads, *b) {
                    T::gemm(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), db, (n as isize, 1), true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::AddBias(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    let n = d.len();
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let n = rv.numel();
                if let Some(d) = self.acc(grads, *a) {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(n)) {
                        for ((d, &g), &f) in drow.iter_mut().zip(grow).zip(rv.data()) {
                            *d += g * f;
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *row) {
                    for (grow, xrow) in g.chunks(n).zip(av.data().chunks(n)) {
                        for ((d, &g), &x) in d.iter_mut().zip(grow).zip(xrow) {
                            *d += g * x;
                        }
                    }
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let c = av.rows_cols().1.max(1);
                if let Some(d) = self.acc(grads, *a) {
                    for ((drow, grow), &f) in d.chunks_mut(c).zip(g.chunks(c)).zip(cv.data()) {
                        for (d, &g) in drow.iter_mut().zip(grow) {
                            *d += g * f;
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *col) {
                    for ((d, grow), xrow) in d.iter_mut().zip(g.chunks(c)).zip(av.data().chunks(c)) {
                        *d += dot(grow, xrow);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s);
                }
            }
            Op::Shift(a) | Op::Reshape(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, g);
                }
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = out.data();
                if let Some(d) = self.acc(grads, *a) {
                    for (idx, (d, &g)) in d.iter_mut().zip(g).enumerate() {
                        let local = match kind {
                            Unary::Sigmoid => y[idx] * (T::one() - y[idx]),
                            Unary::Tanh => T::one() - y[idx] * y[idx],
                            Unary::Silu => {
                                let s = sigmoid(x[idx]);
                                s * (T::one() + x[idx] * (T::one() - s))
                            }
                            Unary::Exp => y[idx],
                            Unary::Abs => {
                                if x[idx] > T::zero() {
                                    T::one()
                                } else if x[idx] < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Square => T::of(2.0) * x[idx],
                        };
                        *d += g * local;
                    }
                }
            }
            Op::Softmax(a) => {
                let n = out.rows_cols().1;
                if let Some(d) = self.acc(grads, *a) {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let s = dot(grow, yrow);
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let n = out.rows_cols().1;
                let inv_n = T::one() / T::of(n as f64);
                if let Some(d) = self.acc(grads, *x) {
                    for (((drow, grow), yrow), &r) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(out.data().chunks(n))
                        .zip(rstd)
                    {
                        let mg = grow.iter().copied().sum::<T>() * inv_n;
                        let mgy = dot(grow, yrow) * inv_n;
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += r * (g - mg - y * mgy);
                        }
                    }
                }
            }
            Op::Im2col { x, dims, geom, t_out } => {
                let [n, t, m, c] = *dims;
                let k = geom.kernel;
                if let Some(d) = self.acc(grads, *x) {
                    for ni in 0..n {
                        for to in 0..*t_out {
                            for ki in 0..k {
                                let ti = (to * geom.stride + ki * geom.dilation) as isize - geom.left_pad;
                                if ti < 0 || ti >= t as isize {
                                    continue;
                                }
                                let ti = ti as usize;
                                for mi in 0..m {
                                    let s = ((ni * t + ti) * m + mi) * c;
                                    let o = (((ni * t_out + to) * m + mi) * k + ki) * c;
                                    add_into(&mut d[s..s + c], &g[o..o + c]);
                                }
                            }
                        }
                    }
                }
            }
            Op::Mix { x, matrix, outer, inner } => {
                let (l_out, l_in) = (matrix.shape()[0], matrix.shape()[1]);
                let md = matrix.data();
                if let Some(d) = self.acc(grads, *x) {
                    for o in 0..*outer {
                        for a in 0..l_out {
                            let grow = &g[(o * l_out + a) * inner..(o * l_out + a + 1) * inner];
                            for b in 0..l_in {
                                let w = md[a * l_in + b];
                                if w == T::zero() {
                                    continue;
                                }
                                let drow = &mut d[(o * l_in + b) * inner..(o * l_in + b + 1) * inner];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += w * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    let s = g[0] / T::of(d.len() as f64);
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::ConcatCols(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).rows_cols().1).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if let Some(d) = self.acc(grads, *p) {
                        for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(drow, &grow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(d) = self.acc(grads, *p) {
                        add_into(d, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).rows_cols().1;
                let len = out.rows_cols().1;
                if let Some(d) = self.acc(grads, *x) {
                    for (drow, grow) in d.chunks_mut(cols).zip(g.chunks(len)) {
                        add_into(&mut drow[*start..*start + len], grow);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let cols = out.rows_cols().1;
                if let Some(d) = self.acc(grads, *x) {
                    add_into(&mut d[start * cols..start * cols + g.len()], g);
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = out.rows_cols().1;
                if let Some(d) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ScatterAddRows { x, idx } => {
                let cols = out.rows_cols().1;
                if let Some(d) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                }
            }
            Op::RepeatRows { x, times } => {
                let cols = out.rows_cols().1;
                if let Some(d) = self.acc(grads, *x) {
                    for (r, drow) in d.chunks_mut(cols.max(1)).enumerate() {
                        for t in 0..*times {
                            let row = r * times + t;
                            add_into(drow, &g[row * cols..(row + 1) * cols]);
                        }
                    }
                }
            }
            Op::TakeEntries { x, idx } => {
                let cols = self.value(*x).rows_cols().1;
                if let Some(d) = self.acc(grads, *x) {
                    for (&(r, c), &gv) in idx.iter().zip(g) {
                        d[r * cols + c] += gv;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                batches,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, *batches, probs, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batches: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rq, d) = qv.rows_cols();
        let rk = kv.rows_cols().0;
        let (tq, tk, dh) = (rq / batches, rk / batches, d / heads);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = vec![T::zero(); qv.numel()];
        let mut dk = vec![T::zero(); kv.numel()];
        let mut dv = vec![T::zero(); vv.numel()];
        let mut dp = vec![T::zero(); tk];
        for b in 0..batches {
            for h in 0..heads {
                let base = (b * heads + h) * tq * tk;
                let cols = h * dh..(h + 1) * dh;
                for i in 0..tq {
                    let qi = (b * tq + i) * d;
                    let grow = &g[qi + cols.start..qi + cols.end];
                    let p = &probs[base + i * tk..base + (i + 1) * tk];
                    for j in 0..tk {
                        let kj = (b * tk + j) * d;
                        dp[j] = dot(grow, &vv.data()[kj + cols.start..kj + cols.end]);
                        for (dvv, &gv) in dv[kj + cols.start..kj + cols.end].iter_mut().zip(grow) {
                            *dvv += p[j] * gv;
                        }
                    }
                    let s = dot(&dp, p);
                    for j in 0..tk {
                        let ds = p[j] * (dp[j] - s) * scale;
                        let kj = (b * tk + j) * d;
                        for c in cols.clone() {
                            dq[qi + c] += ds * kv.data()[kj + c];
                            dk[kj + c] += ds * qv.data()[qi + c];
                        }
                    }
                }
            }
        }
        for (var, src) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(d) = self.acc(grads, var) {
                add_into(d, &src);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; exact zeros when `v` did not influence
    /// the loss.
    pub fn wrt(&self, tape: &Tape<'_, T>, v: Var) -> Tensor<T> {
        let shape = tape.shape(v).to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients of the bound parameters, in store order.
    pub fn params(self, tape: &Tape<'_, T>) -> Vec<Tensor<T>> {
        let n = tape.n_params();
        self.grads
            .into_iter()
            .take(n)
            .enumerate()
            .map(|(i, g)| {
                let shape = tape.shape(Var(i)).to_vec();
                match g {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise softmax of a `[rows, n]` buffer.
pub fn softmax_rows<T: Real>(data: &[T], n: usize) -> Vec<T> {
    let mut out = data.to_vec();
    if n > 0 {
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
    }
    out
}

/// `[2t, t]` matrix that doubles a sequence by linear interpolation. Output
/// samples sit at the centres of the doubled frames; the two outermost samples
/// extrapolate the edge segment, so affine sequences are reproduced exactly.
pub fn interpolation_matrix<T: Real>(frames: usize) -> Tensor<T> {
    let out_len = 2 * frames;
    let mut m = vec![T::zero(); out_len * frames];
    for i in 0..out_len {
        if frames == 1 {
            m[i] = T::one();
            continue;
        }
        let pos = (i as f64 + 0.5) / 2.0 - 0.5;
        let lo = (pos.floor().max(0.0) as usize).min(frames - 2);
        let w = pos - lo as f64;
        m[i * frames + lo] += T::of(1.0 - w);
        m[i * frames + lo + 1] += T::of(w);
    }
    Tensor::new(vec![out_len, frames], m).expect("interpolation shape")
}
