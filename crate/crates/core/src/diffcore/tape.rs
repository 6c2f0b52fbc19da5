//! Wengert-list reverse-mode differentiation over dense tensors.
//!
//! Every forward operation is evaluated eagerly and appended to the tape
//! together with whatever it needs for its vector-Jacobian product.
//! [`Tape::backward`] replays the list in reverse order, accumulating
//! parameter gradients into a [`GradSink`] and returning gradients of
//! differentiable leaves.

use std::collections::HashMap;

use crate::diffcore::param::{GradSink, ParamId, ParamView};
use crate::diffcore::real::Real;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written backward pass, for fused kernels that
/// would be wasteful to express through the primitive vocabulary.
pub trait CustomOp<S: Real> {
    fn name(&self) -> &str;

    /// Returns one gradient per input (`None` where `needs[i]` is false).
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        grad_output: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Abs,
    Square,
    Ln,
}

enum Op<S: Real> {
    Leaf,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Option<Var> },
    Unary { x: Var, kind: Unary },
    Clamp { x: Var, lo: S, hi: S },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol { x: Var, col: Var },
    ScaleShift { x: Var, scale: S },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    Blend { rows: Var, weights: Var },
    RowSum(Var),
    RowNorm(Var),
    RowMax { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, w: Vec<S> },
    Combine(Vec<(Var, S)>),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<S>> },
}

enum Value<S> {
    Owned(Tensor<S>),
    Param(ParamId),
}

struct Node<S: Real> {
    value: Value<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of differentiable leaves, returned by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct LeafGrads<S> {
    grads: HashMap<Var, Tensor<S>>,
}

impl<S: Real> LeafGrads<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(&var)
    }
}

/// Recording of one forward computation.
pub struct Tape<'p, S: Real> {
    params: ParamView<'p, S>,
    nodes: Vec<Node<S>>,
}

fn check_finite<S: Real>(t: &Tensor<S>, op: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

impl<'p, S: Real> Tape<'p, S> {
    pub fn new(params: ParamView<'p, S>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    /// Tape without parameters.
    pub fn detached() -> Tape<'static, S> {
        Tape::new(ParamView::empty())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool, name: &str) -> Result<Var> {
        check_finite(&value, name)?;
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input leaf; `requires_grad` asks backward to report its gradient.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = self.params.is_trainable(id);
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · w + b` with `x: [n, k]`, `w: [k, m]`, `b: [m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.ndim() != 2 || xv.cols() != wv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (n, k, m) = (xv.rows(), xv.cols(), wv.shape()[1]);
        let mut out = vec![S::zero(); n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(Error::ShapeMismatch {
                    op: "affine bias",
                    lhs: wv.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv.data());
            }
        }
        S::gemm(n, k, m, S::one(), xv.data(), (k, 1), wv.data(), (m, 1), S::one(), &mut out, (m, 1));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        self.push(Tensor::new([n, m], out)?, Op::Affine { x, w, b }, rg, "affine")
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xv = self.value(x);
        let f: fn(S) -> S = match kind {
            Unary::Relu => |a| if a > S::zero() { a } else { S::zero() },
            Unary::Tanh => |a| a.tanh(),
            Unary::Sigmoid => |a| {
                if a >= S::zero() {
                    S::one() / (S::one() + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (S::one() + e)
                }
            },
            Unary::Abs => |a| a.abs(),
            Unary::Square => |a| a * a,
            Unary::Ln => |a| a.ln(),
        };
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&a| f(a)).collect())?;
        let rg = self.any_grad(&[x]);
        let name = match kind {
            Unary::Relu => "relu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Ln => "ln",
        };
        self.push(out, Op::Unary { x, kind }, rg, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Ln)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&a| a.max(lo).min(hi)).collect(),
        )?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg, "clamp")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    /// Scales every row of `x: [n, c]` by the matching entry of `col: [n, 1]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(col));
        let (n, c) = (xv.rows(), xv.cols());
        if cv.len() != n || xv.ndim() != 2 {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                lhs: xv.shape().to_vec(),
                rhs: cv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for (row, &s) in out.chunks_mut(c).zip(cv.data()) {
            row.iter_mut().for_each(|a| *a *= s);
        }
        let rg = self.any_grad(&[x, col]);
        self.push(Tensor::new([n, c], out)?, Op::MulCol { x, col }, rg, "mul_col")
    }

    /// `scale * x + shift`.
    pub fn scale_shift(&mut self, x: Var, scale: S, shift: S) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&a| scale * a + shift).collect(),
        )?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::ScaleShift { x, scale }, rg, "scale_shift")
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            total += pv.cols();
        }
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.any_grad(parts);
        self.push(Tensor::new([n, total], out)?, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            n += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let rg = self.any_grad(parts);
        self.push(Tensor::new([n, c], out)?, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new([n, len], out)?, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = xv.data()[start * c..(start + len) * c].to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new([len, c], out)?, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    /// Row gather `table[idx[i], :]`; backward scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let tv = self.value(table);
        let (t, f) = (tv.rows(), tv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= t) {
            return Err(Error::invalid(format!("gather_rows index {bad} out of {t} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * f);
        for &i in &idx {
            out.extend_from_slice(tv.row(i));
        }
        let n = idx.len();
        let rg = self.any_grad(&[table]);
        self.push(Tensor::new([n, f], out)?, Op::GatherRows { table, idx }, rg, "gather_rows")
    }

    /// Corner blend: `out[i] = sum_j weights[i, j] * rows[i * c + j]` with
    /// `rows: [n * c, f]` and `weights: [n, c]`. Bilinear blending uses
    /// `c = 4`, trilinear `c = 8`.
    pub fn blend(&mut self, rows: Var, weights: Var) -> Result<Var> {
        let (rv, wv) = (self.value(rows), self.value(weights));
        let (n, c, f) = (wv.rows(), wv.cols(), rv.cols());
        if rv.rows() != n * c {
            return Err(Error::ShapeMismatch {
                op: "blend",
                lhs: rv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let mut out = vec![S::zero(); n * f];
        for i in 0..n {
            let o = &mut out[i * f..(i + 1) * f];
            for j in 0..c {
                let w = wv.data()[i * c + j];
                for (a, &r) in o.iter_mut().zip(rv.row(i * c + j)) {
                    *a += w * r;
                }
            }
        }
        let rg = self.any_grad(&[rows, weights]);
        self.push(Tensor::new([n, f], out)?, Op::Blend { rows, weights }, rg, "blend")
    }

    /// Per-row sum, `[n, c] -> [n, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.rows();
        let out = (0..n).map(|i| xv.row(i).iter().copied().sum()).collect();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new([n, 1], out)?, Op::RowSum(x), rg, "row_sum")
    }

    /// Per-row Euclidean norm, `[n, c] -> [n, 1]`; the subgradient of a zero
    /// row is zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.rows();
        let out = (0..n)
            .map(|i| xv.row(i).iter().map(|&a| a * a).sum::<S>().sqrt())
            .collect();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new([n, 1], out)?, Op::RowNorm(x), rg, "row_norm")
    }

    /// Per-row maximum, `[n, c] -> [n, 1]` (first maximum wins ties).
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.rows();
        let mut argmax = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mut best = 0;
            for (j, &a) in row.iter().enumerate() {
                if a > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new([n, 1], out)?, Op::RowMax { x, argmax }, rg, "row_max")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = xv.data().iter().copied().sum::<S>() / S::from_usize(xv.len()).unwrap();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, "mean")
    }

    /// `sum_i w[i] * x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<S>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != w.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: xv.shape().to_vec(),
                rhs: vec![w.len()],
            });
        }
        let s = xv.data().iter().zip(&w).map(|(&a, &b)| a * b).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, w }, rg, "weighted_sum")
    }

    /// Linear combination of one-element tensors, `sum_i c_i * v_i`.
    pub fn combine(&mut self, terms: &[(Var, S)]) -> Result<Var> {
        let mut s = S::zero();
        for &(v, c) in terms {
            let vv = self.value(v);
            if vv.len() != 1 {
                return Err(Error::NotScalar(vv.shape().to_vec()));
            }
            s += c * vv.item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        self.push(Tensor::scalar(s), Op::Combine(terms.to_vec()), rg, "combine")
    }

    /// Records a fused operation whose forward value was computed by the
    /// caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<S>, op: Box<dyn CustomOp<S>>) -> Result<Var> {
        let rg = self.any_grad(inputs);
        let name = op.name().to_string();
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
            &name,
        )
    }

    /// Backward pass from a one-element output.
    ///
    /// Parameter gradients are added to `sink` (accumulation across calls is
    /// intentional); gradients of leaves created with `requires_grad` are
    /// returned.
    pub fn backward(&self, output: Var, sink: &mut GradSink<'_, S>) -> Result<LeafGrads<S>> {
        let out_value = self.value(output);
        if out_value.len() != 1 {
            return Err(Error::NotScalar(out_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(out_value.shape().to_vec(), S::one()));
        let mut leaves = LeafGrads::default();
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = Accumulator {
                tape: self,
                grads: &mut grads,
                sink,
            };
            match &node.op {
                Op::Leaf => {
                    check_finite(&g, "leaf gradient")?;
                    leaves.grads.insert(Var(i), g);
                }
                Op::Param(id) => acc.sink.grad_mut(*id).add_assign(&g)?,
                op => acc.apply(op, Var(i), &g)?,
            }
        }
        Ok(leaves)
    }

    /// Backward pass on a tape that holds no parameters.
    pub fn backward_leaves(&self, output: Var) -> Result<LeafGrads<S>> {
        let mut empty: [Tensor<S>; 0] = [];
        let mut sink = GradSink::from_slice(&mut empty);
        self.backward(output, &mut sink)
    }
}

struct Accumulator<'t, 'p, 'g, 's, S: Real> {
    tape: &'t Tape<'p, S>,
    grads: &'g mut Vec<Option<Tensor<S>>>,
    sink: &'g mut GradSink<'s, S>,
}

impl<S: Real> Accumulator<'_, '_, '_, '_, S> {
    fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }

    /// Runs `f` on the gradient buffer of `v`, allocating it if necessary.
    /// Parameter nodes write straight into the sink.
    fn with_buf(&mut self, v: Var, f: impl FnOnce(&mut Tensor<S>)) {
        if let Op::Param(id) = self.tape.nodes[v.0].op {
            f(self.sink.grad_mut(id));
            return;
        }
        let shape = self.tape.value(v).shape().to_vec();
        let buf = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
        f(buf);
    }

    fn add(&mut self, v: Var, g: &Tensor<S>) {
        if !self.wants(v) {
            return;
        }
        self.with_buf(v, |buf| {
            for (a, &b) in buf.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        });
    }

    fn add_map(&mut self, v: Var, len: usize, f: impl Fn(usize) -> S) {
        if !self.wants(v) {
            return;
        }
        self.with_buf(v, |buf| {
            debug_assert_eq!(buf.len(), len);
            for (k, a) in buf.data_mut().iter_mut().enumerate() {
                *a += f(k);
            }
        });
    }

    fn apply(&mut self, op: &Op<S>, out: Var, g: &Tensor<S>) -> Result<()> {
        let tape = self.tape;
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("handled by the caller"),
            Op::Affine { x, w, b } => {
                let (xv, wv) = (tape.value(*x), tape.value(*w));
                let (n, k, m) = (xv.rows(), xv.cols(), wv.shape()[1]);
                if self.wants(*x) {
                    self.with_buf(*x, |buf| {
                        S::gemm(n, m, k, S::one(), gd, (m, 1), wv.data(), (1, m), S::one(), buf.data_mut(), (k, 1));
                    });
                }
                if self.wants(*w) {
                    self.with_buf(*w, |buf| {
                        S::gemm(k, n, m, S::one(), xv.data(), (1, k), gd, (m, 1), S::one(), buf.data_mut(), (m, 1));
                    });
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.with_buf(*b, |buf| {
                            let bd = buf.data_mut();
                            for row in gd.chunks(m) {
                                for (a, &r) in bd.iter_mut().zip(row) {
                                    *a += r;
                                }
                            }
                        });
                    }
                }
            }
            Op::Unary { x, kind } => {
                let y = tape.value(out).data();
                let xv = tape.value(*x).data();
                let len = y.len();
                match kind {
                    Unary::Relu => self.add_map(*x, len, |k| if y[k] > S::zero() { gd[k] } else { S::zero() }),
                    Unary::Tanh => self.add_map(*x, len, |k| gd[k] * (S::one() - y[k] * y[k])),
                    Unary::Sigmoid => self.add_map(*x, len, |k| gd[k] * y[k] * (S::one() - y[k])),
                    Unary::Abs => self.add_map(*x, len, |k| {
                        if xv[k] > S::zero() {
                            gd[k]
                        } else if xv[k] < S::zero() {
                            -gd[k]
                        } else {
                            S::zero()
                        }
                    }),
                    Unary::Square => {
                        let two = S::one() + S::one();
                        self.add_map(*x, len, |k| gd[k] * two * xv[k])
                    }
                    Unary::Ln => self.add_map(*x, len, |k| gd[k] / xv[k]),
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = tape.value(*x).data();
                let (lo, hi) = (*lo, *hi);
                self.add_map(*x, xv.len(), |k| {
                    if xv[k] < lo || xv[k] > hi {
                        S::zero()
                    } else {
                        gd[k]
                    }
                });
            }
            Op::Add(a, b) => {
                self.add(*a, g);
                self.add(*b, g);
            }
            Op::Sub(a, b) => {
                self.add(*a, g);
                self.add_map(*b, gd.len(), |k| -gd[k]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (tape.value(*a).data(), tape.value(*b).data());
                self.add_map(*a, gd.len(), |k| gd[k] * bv[k]);
                self.add_map(*b, gd.len(), |k| gd[k] * av[k]);
            }
            Op::MulCol { x, col } => {
                let (xv, cv) = (tape.value(*x), tape.value(*col));
                let c = xv.cols();
                let cd = cv.data();
                self.add_map(*x, gd.len(), |k| gd[k] * cd[k / c]);
                let xd = xv.data();
                self.add_map(*col, cd.len(), |i| {
                    (0..c).map(|j| gd[i * c + j] * xd[i * c + j]).sum()
                });
            }
            Op::ScaleShift { x, scale } => {
                let s = *scale;
                self.add_map(*x, gd.len(), |k| gd[k] * s);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = tape.value(p).cols();
                    let off = offset;
                    self.add_map(p, tape.value(p).len(), |k| {
                        let (i, j) = (k / c, k % c);
                        gd[i * total + off + j]
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = tape.value(p).len();
                    let off = offset;
                    self.add_map(p, len, |k| gd[off + k]);
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let c = tape.value(*x).cols();
                let len = g.cols();
                let start = *start;
                self.add_map(*x, tape.value(*x).len(), |k| {
                    let (i, j) = (k / c, k % c);
                    if j >= start && j < start + len {
                        gd[i * len + j - start]
                    } else {
                        S::zero()
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = tape.value(*x).cols();
                let (lo, hi) = (start * c, start * c + gd.len());
                self.add_map(*x, tape.value(*x).len(), |k| {
                    if k >= lo && k < hi {
                        gd[k - lo]
                    } else {
                        S::zero()
                    }
                });
            }
            Op::Reshape(x) => self.add(*x, g),
            Op::GatherRows { table, idx } => {
                if self.wants(*table) {
                    let f = g.cols();
                    self.with_buf(*table, |buf| {
                        let bd = buf.data_mut();
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..f {
                                bd[i * f + j] += gd[r * f + j];
                            }
                        }
                    });
                }
            }
            Op::Blend { rows, weights } => {
                let (rv, wv) = (tape.value(*rows), tape.value(*weights));
                let (c, f) = (wv.cols(), rv.cols());
                let (rd, wd) = (rv.data(), wv.data());
                self.add_map(*rows, rd.len(), |k| {
                    let (r, j) = (k / f, k % f);
                    let i = r / c;
                    wd[r] * gd[i * f + j]
                });
                self.add_map(*weights, wd.len(), |k| {
                    let i = k / c;
                    (0..f).map(|j| rd[k * f + j] * gd[i * f + j]).sum()
                });
            }
            Op::RowSum(x) => {
                let c = tape.value(*x).cols();
                self.add_map(*x, tape.value(*x).len(), |k| gd[k / c]);
            }
            Op::RowNorm(x) => {
                let xv = tape.value(*x);
                let c = xv.cols();
                let (xd, nd) = (xv.data(), tape.value(out).data());
                self.add_map(*x, xd.len(), |k| {
                    let i = k / c;
                    if nd[i] > S::zero() {
                        gd[i] * xd[k] / nd[i]
                    } else {
                        S::zero()
                    }
                });
            }
            Op::RowMax { x, argmax } => {
                let c = tape.value(*x).cols();
                self.add_map(*x, tape.value(*x).len(), |k| {
                    let (i, j) = (k / c, k % c);
                    if argmax[i] == j {
                        gd[i]
                    } else {
                        S::zero()
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.add_map(*x, tape.value(*x).len(), |_| s);
            }
            Op::Mean(x) => {
                let len = tape.value(*x).len();
                let s = gd[0] / S::from_usize(len).unwrap();
                self.add_map(*x, len, |_| s);
            }
            Op::WeightedSum { x, w } => {
                let s = gd[0];
                self.add_map(*x, w.len(), |k| s * w[k]);
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    let s = gd[0] * c;
                    self.add_map(v, 1, |_| s);
                }
            }
            Op::Custom { inputs, op } => {
                let needs: Vec<bool> = inputs.iter().map(|&v| self.wants(v)).collect();
                if needs.iter().any(|&b| b) {
                    let values: Vec<&Tensor<S>> = inputs.iter().map(|&v| tape.value(v)).collect();
                    let results = op.backward(&values, tape.value(out), g, &needs)?;
                    for (&v, r) in inputs.iter().zip(results) {
                        if let Some(r) = r {
                            check_finite(&r, op.name())?;
                            self.add(v, &r);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
