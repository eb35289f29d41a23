use std::rc::Rc;

use super::conv::{self, Kernel2d};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    /// Hidden-layer outputs are kept for the backward sweep.
    Mlp { x: Var, layers: Vec<(Var, Var)>, hidden: Vec<Vec<f64>> },
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    Log10 { x: Var, eps: f64 },
    Conv2d { x: Var, kernel: Rc<Kernel2d> },
    ConvSeparable { x: Var, axial: Rc<[f64]>, lateral: Rc<[f64]> },
    GatherRows { table: Var, idx: Vec<usize> },
    Blend4 { corners: Var, weights: Vec<[f64; 4]> },
    GatherBlend { tables: Vec<Var>, lookup: Rc<dyn CornerLookup> },
    ConcatCols(Vec<Var>),
    AvgPool { x: Var, factor: usize },
    Diff { x: Var, axis: Axis },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Mlp { .. } => "mlp",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Log10 { .. } => "log10_guarded",
            Op::Conv2d { .. } => "conv2d_same",
            Op::ConvSeparable { .. } => "conv_separable",
            Op::GatherRows { .. } => "gather_rows",
            Op::Blend4 { .. } => "blend4",
            Op::GatherBlend { .. } => "gather_blend",
            Op::ConcatCols(_) => "concat_cols",
            Op::AvgPool { .. } => "avg_pool",
            Op::Diff { .. } => "diff",
            Op::Reshape(_) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Mlp { x, layers, .. } => std::iter::once(*x).chain(layers.iter().flat_map(|&(w, b)| [w, b])).collect(),
            Op::Relu(x)
            | Op::Softplus(x)
            | Op::Exp(x)
            | Op::Abs(x)
            | Op::Scale(x, _)
            | Op::Offset(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Clamp { x, .. }
            | Op::Log10 { x, .. }
            | Op::Conv2d { x, .. }
            | Op::ConvSeparable { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Diff { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::Blend4 { corners, .. } => vec![*corners],
            Op::GatherBlend { tables, .. } => tables.clone(),
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

/// Corner rows and bilinear weights for [`Tape::gather_blend`], computed
/// on demand in both the forward and the backward sweep.
pub trait CornerLookup: std::fmt::Debug {
    fn groups(&self) -> usize;
    fn samples(&self) -> usize;
    /// Four table rows of `sample` in `group` and their weights.
    fn corners(&self, group: usize, sample: usize) -> ([usize; 4], [f64; 4]);
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records a dynamic computation graph for one forward pass.
///
/// Nodes are appended in evaluation order, so every input id is smaller than
/// the id of the node consuming it. [`Tape::backward`] walks the nodes in
/// exact reverse order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` is untracked.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Removes and returns the gradient buffer for `v`.
    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        Shape::Matrix(r, c) => Ok((r, c)),
        s => Err(Error::shape(op, s, "a matrix")),
    }
}

/// `c = a * b + beta * c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (a_rs, a_cs): (usize, usize),
    b: &[f64],
    (b_rs, b_cs): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (c_rs, c_cs): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * a_rs + (k - 1) * a_cs);
        assert!(b.len() > (k - 1) * b_rs + (n - 1) * b_cs);
    }
    assert!(c.len() > (m - 1) * c_rs + (n - 1) * c_cs);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            c_cs as isize,
        );
    }
}

/// Rows per block in [`Tape::mlp`].
const MLP_BLOCK: usize = 1024;

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

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

    /// Drops every node recorded after the first `len`. Vars pointing past
    /// the new end become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Name of the recorded op and its input ids, for inspection.
    pub fn entry(&self, id: usize) -> (&'static str, Vec<usize>) {
        let op = &self.nodes[id].op;
        (op.name(), op.inputs().into_iter().map(Var::id).collect())
    }

    /// First node (in recording order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x), data).expect("shape preserved");
        self.push(value, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        check_same(name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, op))
    }

    /// `x W^T + b`. `x` is a single input vector `[n]` or a batch `[batch x n]`
    /// (one sample per row); `w` is `[m x n]` and `b` is `[m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, n) = as_matrix("affine", self.value(w))?;
        let xs = self.shape(x);
        if xs.cols() != n {
            return Err(Error::shape("affine", xs, self.shape(w)));
        }
        if self.shape(b) != Shape::Vector(m) {
            return Err(Error::shape("affine", self.shape(w), self.shape(b)));
        }
        let batch = xs.rows();
        let mut out = Vec::with_capacity(batch * m);
        let bias = self.value(b).data();
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        gemm(
            batch,
            n,
            m,
            self.value(x).data(),
            (n, 1),
            self.value(w).data(),
            (1, n),
            1.0,
            &mut out,
            (m, 1),
        );
        let shape = match xs {
            Shape::Vector(_) => Shape::Vector(m),
            Shape::Matrix(..) => Shape::Matrix(batch, m),
        };
        Ok(self.push(Tensor::new(shape, out)?, Op::Affine { x, w, b }))
    }

    /// Batched multilayer perceptron over the rows of `x`: `affine` layers
    /// with a ReLU after all but the last. Equivalent to chaining
    /// [`Tape::affine`] and [`Tape::relu`], but evaluated in row blocks that
    /// stay in cache.
    pub fn mlp(&mut self, x: Var, layers: &[(Var, Var)]) -> Result<Var> {
        let (n, d0) = as_matrix("mlp", self.value(x))?;
        if layers.is_empty() {
            return Err(Error::invalid("mlp needs at least one layer"));
        }
        let mut widths = Vec::with_capacity(layers.len());
        let mut k = d0;
        for &(w, b) in layers {
            let (m, kw) = as_matrix("mlp", self.value(w))?;
            if kw != k {
                return Err(Error::shape("mlp", format!("input width {k}"), self.shape(w)));
            }
            if self.shape(b) != Shape::Vector(m) {
                return Err(Error::shape("mlp", self.shape(w), self.shape(b)));
            }
            widths.push(m);
            k = m;
        }
        let last = layers.len() - 1;
        let mut hidden: Vec<Vec<f64>> = widths[..last].iter().map(|&m| vec![0.0; n * m]).collect();
        let mut out = vec![0.0; n * widths[last]];
        let xv = self.value(x).data();
        for start in (0..n).step_by(MLP_BLOCK) {
            let r = MLP_BLOCK.min(n - start);
            for (l, &(w, b)) in layers.iter().enumerate() {
                let (m, k) = (widths[l], if l == 0 { d0 } else { widths[l - 1] });
                let (done, rest) = hidden.split_at_mut(l);
                let input = if l == 0 { &xv[start * d0..(start + r) * d0] } else { &done[l - 1][start * k..(start + r) * k] };
                let dst = if l == last { &mut out[start * m..(start + r) * m] } else { &mut rest[0][start * m..(start + r) * m] };
                let bias = self.value(b).data();
                for row in dst.chunks_exact_mut(m) {
                    row.copy_from_slice(bias);
                }
                gemm(r, k, m, input, (k, 1), self.value(w).data(), (1, k), 1.0, dst, (m, 1));
                if l != last {
                    for v in dst.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
        }
        let op = Op::Mlp {
            x,
            layers: layers.to_vec(),
            hidden,
        };
        Ok(self.push(Tensor::new(Shape::Matrix(n, widths[last]), out)?, op))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Adds the constant `c` to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |p, q| p / q)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// `log10(x + eps)` for `x >= 0`.
    pub fn log10_guarded(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Domain {
                op: "log10_guarded",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        // NaN passes through so callers can locate it with first_non_finite
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain {
                op: "log10_guarded",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Log10 { x, eps }, |v| (v + eps).log10()))
    }

    /// 'Same'-size 2D convolution with replicate padding and a fixed kernel.
    pub fn conv2d_same(&mut self, x: Var, kernel: Rc<Kernel2d>) -> Result<Var> {
        let (rows, cols) = as_matrix("conv2d_same", self.value(x))?;
        kernel.check_fits(rows, cols)?;
        let y = conv::conv2d_same(self.value(x).data(), rows, cols, &kernel);
        Ok(self.push(Tensor::new(Shape::Matrix(rows, cols), y)?, Op::Conv2d { x, kernel }))
    }

    /// Same as [`Tape::conv2d_same`] for the kernel `outer(axial, lateral)`.
    pub fn conv_separable(&mut self, x: Var, axial: Rc<[f64]>, lateral: Rc<[f64]>) -> Result<Var> {
        let (rows, cols) = as_matrix("conv_separable", self.value(x))?;
        if axial.len().is_multiple_of(2) || lateral.len().is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "kernel dims must be odd, got {}x{}",
                axial.len(),
                lateral.len()
            )));
        }
        if axial.len() > rows || lateral.len() > cols {
            return Err(Error::shape(
                "conv_separable",
                format!("image {rows}x{cols}"),
                format!("kernel {}x{}", axial.len(), lateral.len()),
            ));
        }
        let y = conv::conv_separable(self.value(x).data(), rows, cols, &axial, &lateral);
        Ok(self.push(
            Tensor::new(Shape::Matrix(rows, cols), y)?,
            Op::ConvSeparable { x, axial, lateral },
        ))
    }

    /// Copies `table` rows `idx` into an `[idx.len() x F]` matrix.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let (trows, f) = as_matrix("gather_rows", self.value(table))?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * f);
        for &i in &idx {
            if i >= trows {
                return Err(Error::IndexOutOfBounds { index: i, len: trows });
            }
            out.extend_from_slice(&src[i * f..(i + 1) * f]);
        }
        let n = idx.len();
        Ok(self.push(Tensor::new(Shape::Matrix(n, f), out)?, Op::GatherRows { table, idx }))
    }

    /// Weighted sum of consecutive groups of four rows: row `s` of the output is
    /// `sum_c weights[s][c] * corners[4 s + c]`.
    pub fn blend4(&mut self, corners: Var, weights: Vec<[f64; 4]>) -> Result<Var> {
        let (r, f) = as_matrix("blend4", self.value(corners))?;
        if r != 4 * weights.len() {
            return Err(Error::shape(
                "blend4",
                self.shape(corners),
                format!("{} weight groups", weights.len()),
            ));
        }
        let src = self.value(corners).data();
        let mut out = vec![0.0; weights.len() * f];
        for (s, w) in weights.iter().enumerate() {
            let dst = &mut out[s * f..(s + 1) * f];
            for (c, wc) in w.iter().enumerate() {
                let row = &src[(4 * s + c) * f..(4 * s + c + 1) * f];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += wc * v;
                }
            }
        }
        let n = weights.len();
        Ok(self.push(Tensor::new(Shape::Matrix(n, f), out)?, Op::Blend4 { corners, weights }))
    }

    /// Fused `concat_cols` of `blend4(gather_rows(tables[g], ..))` over all
    /// groups `g`, with corner slots and weights supplied on demand by
    /// `lookup` instead of being stored.
    pub fn gather_blend(&mut self, tables: &[Var], lookup: Rc<dyn CornerLookup>) -> Result<Var> {
        if tables.len() != lookup.groups() {
            return Err(Error::shape(
                "gather_blend",
                format!("{} tables", tables.len()),
                format!("{} lookup groups", lookup.groups()),
            ));
        }
        let mut dims = Vec::with_capacity(tables.len());
        for &t in tables {
            dims.push(as_matrix("gather_blend", self.value(t))?);
        }
        let n = lookup.samples();
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (g, (&t, &(trows, f))) in tables.iter().zip(&dims).enumerate() {
            let src = self.value(t).data();
            for s in 0..n {
                let (idx, w) = lookup.corners(g, s);
                let dst = &mut out[s * total + offset..s * total + offset + f];
                for (&i, &wc) in idx.iter().zip(&w) {
                    if i >= trows {
                        return Err(Error::IndexOutOfBounds { index: i, len: trows });
                    }
                    for (d, v) in dst.iter_mut().zip(&src[i * f..(i + 1) * f]) {
                        *d += wc * v;
                    }
                }
            }
            offset += f;
        }
        Ok(self.push(
            Tensor::new(Shape::Matrix(n, total), out)?,
            Op::GatherBlend {
                tables: tables.to_vec(),
                lookup,
            },
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (rows, _) = as_matrix("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = as_matrix("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::new(Shape::Matrix(rows, total), out)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Mean over non-overlapping `factor` x `factor` blocks.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (rows, cols) = as_matrix("avg_pool", self.value(x))?;
        if factor == 0 || rows % factor != 0 || cols % factor != 0 {
            return Err(Error::shape("avg_pool", self.shape(x), format!("factor {factor}")));
        }
        let y = conv::avg_pool(self.value(x).data(), rows, cols, factor);
        let shape = Shape::Matrix(rows / factor, cols / factor);
        Ok(self.push(Tensor::new(shape, y)?, Op::AvgPool { x, factor }))
    }

    /// Forward differences along `axis`: `x[i+1, j] - x[i, j]` for rows,
    /// `x[i, j+1] - x[i, j]` for columns.
    pub fn diff(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (rows, cols) = as_matrix("diff", self.value(x))?;
        let d = self.value(x).data();
        let (shape, out) = match axis {
            Axis::Rows => {
                if rows < 2 {
                    return Err(Error::shape("diff", self.shape(x), "at least 2 rows"));
                }
                let out = (0..(rows - 1) * cols).map(|k| d[k + cols] - d[k]).collect();
                (Shape::Matrix(rows - 1, cols), out)
            }
            Axis::Cols => {
                if cols < 2 {
                    return Err(Error::shape("diff", self.shape(x), "at least 2 cols"));
                }
                let mut out = Vec::with_capacity(rows * (cols - 1));
                for i in 0..rows {
                    let r = &d[i * cols..(i + 1) * cols];
                    out.extend(r.windows(2).map(|w| w[1] - w[0]));
                }
                (Shape::Matrix(rows, cols - 1), out)
            }
        };
        Ok(self.push(Tensor::new(shape, out)?, Op::Diff { x, axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", self.shape(root), "a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.tracked {
                self.propagate(node, &g, &mut grads);
            }
            // Intermediate buffers are released as soon as they are consumed.
            if matches!(node.op, Op::Leaf) || id == root.0 {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (m, n) = match self.shape(*w) {
                    Shape::Matrix(m, n) => (m, n),
                    _ => unreachable!(),
                };
                let batch = self.shape(*x).rows();
                if let Some(dx) = self.slot(grads, *x) {
                    gemm(batch, m, n, g, (m, 1), val(*w), (n, 1), 1.0, dx, (n, 1));
                }
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(m, batch, n, g, (1, m), val(*x), (n, 1), 1.0, dw, (n, 1));
                }
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks_exact(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Mlp { x, layers, hidden } => {
                let (n, d0) = (self.shape(*x).rows(), self.shape(*x).cols());
                let widths: Vec<usize> = layers.iter().map(|&(w, _)| self.shape(w).rows()).collect();
                let m_out = *widths.last().expect("non-empty");
                let xv = val(*x);
                for start in (0..n).step_by(MLP_BLOCK) {
                    let r = MLP_BLOCK.min(n - start);
                    let mut delta = g[start * m_out..(start + r) * m_out].to_vec();
                    for (l, &(w, b)) in layers.iter().enumerate().rev() {
                        let m = widths[l];
                        let k = if l == 0 { d0 } else { widths[l - 1] };
                        let input = if l == 0 { &xv[start * d0..(start + r) * d0] } else { &hidden[l - 1][start * k..(start + r) * k] };
                        if let Some(dw) = self.slot(grads, w) {
                            gemm(m, r, k, &delta, (1, m), input, (k, 1), 1.0, dw, (k, 1));
                        }
                        if let Some(db) = self.slot(grads, b) {
                            for row in delta.chunks_exact(m) {
                                for (d, v) in db.iter_mut().zip(row) {
                                    *d += v;
                                }
                            }
                        }
                        if l == 0 {
                            if let Some(dx) = self.slot(grads, *x) {
                                let dst = &mut dx[start * d0..(start + r) * d0];
                                gemm(r, m, k, &delta, (m, 1), val(w), (k, 1), 1.0, dst, (k, 1));
                            }
                        } else {
                            let mut next = vec![0.0; r * k];
                            gemm(r, m, k, &delta, (m, 1), val(w), (k, 1), 0.0, &mut next, (k, 1));
                            // ReLU outputs are positive exactly where the slope is one
                            for (d, &h) in next.iter_mut().zip(input) {
                                if h <= 0.0 {
                                    *d = 0.0;
                                }
                            }
                            delta = next;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi * sigmoid(xi);
                    }
                }
            }
            Op::Exp(x) => {
                let yv = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(yv) {
                        *d += gi * yi;
                    }
                }
            }
            Op::Abs(x) => {
                let xv = val(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        } else if xi < 0.0 {
                            *d -= gi;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        for (di, gi) in d.iter_mut().zip(g) {
                            *di += gi;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di += gi;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(d) = self.slot(grads, *a) {
                    for ((di, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                        *di += gi * bi;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((di, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        *di += gi * ai;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(d) = self.slot(grads, *a) {
                    for ((di, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                        *di += gi / bi;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for (((di, gi), ai), bi) in d.iter_mut().zip(g).zip(av).zip(bv) {
                        *di -= gi * ai / (bi * bi);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = self.slot(grads, *x) {
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di += gi * c;
                    }
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di += gi;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                if let Some(d) = self.slot(grads, *x) {
                    for ((di, gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi >= *lo && xi <= *hi {
                            *di += gi;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    for di in d.iter_mut() {
                        *di += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    let s = g[0] / d.len() as f64;
                    for di in d.iter_mut() {
                        *di += s;
                    }
                }
            }
            Op::Log10 { x, eps } => {
                let xv = val(*x);
                let ln10 = std::f64::consts::LN_10;
                if let Some(d) = self.slot(grads, *x) {
                    for ((di, gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        *di += gi / ((xi + eps) * ln10);
                    }
                }
            }
            Op::Conv2d { x, kernel } => {
                let (rows, cols) = (self.shape(*x).rows(), self.shape(*x).cols());
                if let Some(d) = self.slot(grads, *x) {
                    conv::conv2d_same_adjoint(g, rows, cols, kernel, d);
                }
            }
            Op::ConvSeparable { x, axial, lateral } => {
                let (rows, cols) = (self.shape(*x).rows(), self.shape(*x).cols());
                if let Some(d) = self.slot(grads, *x) {
                    conv::conv_separable_adjoint(g, rows, cols, axial, lateral, d);
                }
            }
            Op::GatherRows { table, idx } => {
                let f = self.shape(*table).cols();
                if let Some(d) = self.slot(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut d[i * f..(i + 1) * f];
                        for (di, gi) in dst.iter_mut().zip(&g[r * f..(r + 1) * f]) {
                            *di += gi;
                        }
                    }
                }
            }
            Op::Blend4 { corners, weights } => {
                let f = self.shape(*corners).cols();
                if let Some(d) = self.slot(grads, *corners) {
                    for (s, w) in weights.iter().enumerate() {
                        let gs = &g[s * f..(s + 1) * f];
                        for (c, wc) in w.iter().enumerate() {
                            let dst = &mut d[(4 * s + c) * f..(4 * s + c + 1) * f];
                            for (di, gi) in dst.iter_mut().zip(gs) {
                                *di += wc * gi;
                            }
                        }
                    }
                }
            }
            Op::GatherBlend { tables, lookup } => {
                let total = node.value.shape().cols();
                let mut offset = 0;
                for (gi, &t) in tables.iter().enumerate() {
                    let f = self.shape(t).cols();
                    if let Some(d) = self.slot(grads, t) {
                        for s in 0..lookup.samples() {
                            let (idx, w) = lookup.corners(gi, s);
                            let gs = &g[s * total + offset..s * total + offset + f];
                            for (&i, &wc) in idx.iter().zip(&w) {
                                for (di, gk) in d[i * f..(i + 1) * f].iter_mut().zip(gs) {
                                    *di += wc * gk;
                                }
                            }
                        }
                    }
                    offset += f;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape().cols();
                let rows = node.value.shape().rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).cols();
                    if let Some(d) = self.slot(grads, p) {
                        for i in 0..rows {
                            let src = &g[i * total + offset..i * total + offset + w];
                            for (di, gi) in d[i * w..(i + 1) * w].iter_mut().zip(src) {
                                *di += gi;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::AvgPool { x, factor } => {
                let cols = self.shape(*x).cols();
                let ocols = cols / factor;
                let scale = 1.0 / (factor * factor) as f64;
                if let Some(d) = self.slot(grads, *x) {
                    for (k, di) in d.iter_mut().enumerate() {
                        let (i, j) = (k / cols, k % cols);
                        *di += g[(i / factor) * ocols + j / factor] * scale;
                    }
                }
            }
            Op::Diff { x, axis } => {
                let cols = self.shape(*x).cols();
                if let Some(d) = self.slot(grads, *x) {
                    match axis {
                        Axis::Rows => {
                            for (k, gi) in g.iter().enumerate() {
                                d[k + cols] += gi;
                                d[k] -= gi;
                            }
                        }
                        Axis::Cols => {
                            let oc = cols - 1;
                            for (k, gi) in g.iter().enumerate() {
                                let (i, j) = (k / oc, k % oc);
                                d[i * cols + j + 1] += gi;
                                d[i * cols + j] -= gi;
                            }
                        }
                    }
                }
            }
        }
    }
}
