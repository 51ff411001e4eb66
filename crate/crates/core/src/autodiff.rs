//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every forward operation builds a new [`Tensor`] that remembers its op tag
//! and input handles, so a scalar loss can later be differentiated exactly
//! with [`Tensor::backward`]. The op set is deliberately small: exactly what
//! a gated recurrent translation model needs and nothing more.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

/// Element type for all tensor values. 64-bit by default so gradient checks
/// are trustworthy; the `f32` feature switches training builds to 32-bit.
#[cfg(feature = "f32")]
pub type Scalar = f32;
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;

/// Operation tags. Each tag has one forward rule and one backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Matrix-matrix or matrix-vector product.
    MatMul,
    /// Elementwise addition.
    Add,
    /// Elementwise (Hadamard) product.
    Mul,
    /// Concatenation of vectors along the feature axis.
    Concat,
    /// Elementwise logistic sigmoid.
    Sigmoid,
    /// Elementwise hyperbolic tangent.
    Tanh,
    /// Softmax over a vector, computed with max subtraction.
    Softmax,
    /// Log-softmax over a vector, computed with max subtraction.
    LogSoftmax,
    /// Row lookup into an embedding matrix.
    EmbedRow,
    /// Select a single coordinate of a vector as a scalar.
    Pick,
    /// Multiply by a fixed constant (not a differentiable input).
    Scale,
    /// Matrix transpose.
    Transpose,
    /// Stack equal-length vectors into the rows of a matrix.
    StackRows,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Concat => "concat",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::EmbedRow => "embed_row",
            Op::Pick => "pick",
            Op::Scale => "scale",
            Op::Transpose => "transpose",
            Op::StackRows => "stack_rows",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: Op, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: row {row} out of range for {rows} rows")]
    RowOutOfRange { op: Op, row: usize, rows: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: Op, index: usize, len: usize },
    #[error("{op}: needs at least one input")]
    EmptyInput { op: Op },
    #[error("{op}: expected {expected} inputs, got {got}")]
    BadArity { op: Op, expected: usize, got: usize },
    #[error("unknown or data-carrying op tag {0} cannot be built through apply")]
    UnsupportedInApply(Op),
    #[error("tensor data length {got} does not match shape {shape:?}")]
    BadDataLength { shape: Vec<usize>, got: usize },
}

/// Op-specific immediate data kept alongside the input handles.
#[derive(Debug, Clone)]
enum Payload {
    None,
    Row(usize),
    Index(usize),
    Coeff(Scalar),
}

#[derive(Debug)]
struct Record {
    op: Op,
    inputs: Vec<Tensor>,
    payload: Payload,
}

#[derive(Debug)]
struct TensorData {
    shape: Vec<usize>,
    values: Vec<Scalar>,
    grad: Option<Vec<Scalar>>,
    record: Option<Record>,
}

/// A dense numeric array node. Cloning is cheap: clones share the same node.
///
/// Leaves are created with the constructors below; every op produces a new
/// tensor holding an op record. Graphs are acyclic by construction. One graph
/// belongs to one thread; extract raw values with [`Tensor::value`] to move
/// numbers across threads.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<TensorData>>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.0.borrow();
        let op = d.record.as_ref().map(|r| r.op);
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("op", &op)
            .finish()
    }
}

fn elem_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new(shape: Vec<usize>, values: Vec<Scalar>, record: Option<Record>) -> Tensor {
        debug_assert_eq!(elem_count(&shape), values.len());
        Tensor(Rc::new(RefCell::new(TensorData {
            shape,
            values,
            grad: None,
            record,
        })))
    }

    /// Leaf with an arbitrary shape. Fails if the data length does not match.
    pub fn from_shape(shape: Vec<usize>, values: Vec<Scalar>) -> Result<Tensor, AutodiffError> {
        if elem_count(&shape) != values.len() {
            return Err(AutodiffError::BadDataLength {
                shape,
                got: values.len(),
            });
        }
        Ok(Tensor::new(shape, values, None))
    }

    /// 1-D leaf.
    pub fn vector(values: Vec<Scalar>) -> Tensor {
        let n = values.len();
        Tensor::new(vec![n], values, None)
    }

    /// Row-major 2-D leaf.
    pub fn matrix(rows: usize, cols: usize, values: Vec<Scalar>) -> Result<Tensor, AutodiffError> {
        Tensor::from_shape(vec![rows, cols], values)
    }

    /// Scalar leaf of shape `[1]`.
    pub fn scalar(value: Scalar) -> Tensor {
        Tensor::new(vec![1], vec![value], None)
    }

    /// All-zero leaf.
    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = elem_count(&shape);
        Tensor::new(shape, vec![0.0; n], None)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.0.borrow().shape.len()
    }

    /// Number of stored elements.
    pub fn n_elems(&self) -> usize {
        self.0.borrow().values.len()
    }

    /// Copy of the stored values.
    pub fn value(&self) -> Vec<Scalar> {
        self.0.borrow().values.clone()
    }

    /// The single stored value. Panics when the tensor is not a scalar.
    pub fn item(&self) -> Scalar {
        let d = self.0.borrow();
        assert!(
            d.values.len() == 1,
            "item() on tensor of shape {:?}",
            d.shape
        );
        d.values[0]
    }

    /// Copy of the accumulated gradient, if any has been accumulated.
    pub fn grad(&self) -> Option<Vec<Scalar>> {
        self.0.borrow().grad.clone()
    }

    pub fn with_values<R>(&self, f: impl FnOnce(&[Scalar]) -> R) -> R {
        f(&self.0.borrow().values)
    }

    /// Mutate values in place (used by optimizers and finite differencing).
    pub fn with_values_mut<R>(&self, f: impl FnOnce(&mut [Scalar]) -> R) -> R {
        f(&mut self.0.borrow_mut().values)
    }

    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&[Scalar]>) -> R) -> R {
        f(self.0.borrow().grad.as_deref())
    }

    pub fn with_grad_mut<R>(&self, f: impl FnOnce(Option<&mut [Scalar]>) -> R) -> R {
        f(self.0.borrow_mut().grad.as_deref_mut())
    }

    /// Drop any accumulated gradient. Call once per batch before `backward`.
    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    pub fn is_leaf(&self) -> bool {
        self.0.borrow().record.is_none()
    }

    pub fn op(&self) -> Option<Op> {
        self.0.borrow().record.as_ref().map(|r| r.op)
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    // ---- forward ops ------------------------------------------------------

    /// `[r,c] x [c] -> [r]` or `[r,c] x [c,n] -> [r,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, AutodiffError> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let mismatch = || AutodiffError::ShapeMismatch {
            op: Op::MatMul,
            lhs: ls.clone(),
            rhs: rs.clone(),
        };
        if ls.len() != 2 {
            return Err(mismatch());
        }
        let (r, c) = (ls[0], ls[1]);
        let (out_shape, n) = match rs.len() {
            1 if rs[0] == c => (vec![r], 1),
            2 if rs[0] == c => (vec![r, rs[1]], rs[1]),
            _ => return Err(mismatch()),
        };
        let a = self.0.borrow();
        let b = rhs.0.borrow();
        let mut out = vec![0.0 as Scalar; r * n];
        for i in 0..r {
            let row = &a.values[i * c..(i + 1) * c];
            if n == 1 {
                out[i] = row.iter().zip(&b.values).map(|(x, y)| x * y).sum();
            } else {
                for (k, &x) in row.iter().enumerate() {
                    let brow = &b.values[k * n..(k + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &y) in orow.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        drop(a);
        drop(b);
        Ok(Tensor::new(
            out_shape,
            out,
            Some(Record {
                op: Op::MatMul,
                inputs: vec![self.clone(), rhs.clone()],
                payload: Payload::None,
            }),
        ))
    }

    fn elementwise_pair(&self, rhs: &Tensor, op: Op) -> Result<Tensor, AutodiffError> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls != rs {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: ls,
                rhs: rs,
            });
        }
        let a = self.0.borrow();
        let b = rhs.0.borrow();
        let out: Vec<Scalar> = match op {
            Op::Add => a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect(),
            Op::Mul => a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect(),
            _ => unreachable!("elementwise_pair only handles add/mul"),
        };
        drop(a);
        drop(b);
        Ok(Tensor::new(
            ls,
            out,
            Some(Record {
                op,
                inputs: vec![self.clone(), rhs.clone()],
                payload: Payload::None,
            }),
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, AutodiffError> {
        self.elementwise_pair(rhs, Op::Add)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, AutodiffError> {
        self.elementwise_pair(rhs, Op::Mul)
    }

    /// Concatenate 1-D tensors along the feature axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyInput { op: Op::Concat });
        }
        let mut out = Vec::new();
        for p in parts {
            let s = p.shape();
            if s.len() != 1 {
                return Err(AutodiffError::ShapeMismatch {
                    op: Op::Concat,
                    lhs: parts[0].shape(),
                    rhs: s,
                });
            }
            p.with_values(|v| out.extend_from_slice(v));
        }
        let n = out.len();
        Ok(Tensor::new(
            vec![n],
            out,
            Some(Record {
                op: Op::Concat,
                inputs: parts.iter().map(|p| (*p).clone()).collect(),
                payload: Payload::None,
            }),
        ))
    }

    fn unary(&self, op: Op, f: impl Fn(Scalar) -> Scalar) -> Tensor {
        let d = self.0.borrow();
        let out: Vec<Scalar> = d.values.iter().map(|&x| f(x)).collect();
        let shape = d.shape.clone();
        drop(d);
        Tensor::new(
            shape,
            out,
            Some(Record {
                op,
                inputs: vec![self.clone()],
                payload: Payload::None,
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh, |x| x.tanh())
    }

    fn softmax_parts(&self, op: Op) -> Result<(Vec<Scalar>, Vec<Scalar>), AutodiffError> {
        let d = self.0.borrow();
        if d.shape.len() != 1 || d.values.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: d.shape.clone(),
                rhs: vec![],
            });
        }
        // Max subtraction keeps exp() finite for any finite input.
        let m = d.values.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let exps: Vec<Scalar> = d.values.iter().map(|&x| (x - m).exp()).collect();
        let sum: Scalar = exps.iter().sum();
        Ok((vec![m, sum], exps))
    }

    /// Softmax over a vector.
    pub fn softmax(&self) -> Result<Tensor, AutodiffError> {
        let (ms, exps) = self.softmax_parts(Op::Softmax)?;
        let sum = ms[1];
        let out: Vec<Scalar> = exps.iter().map(|&e| e / sum).collect();
        let n = out.len();
        Ok(Tensor::new(
            vec![n],
            out,
            Some(Record {
                op: Op::Softmax,
                inputs: vec![self.clone()],
                payload: Payload::None,
            }),
        ))
    }

    /// Log-softmax over a vector.
    pub fn log_softmax(&self) -> Result<Tensor, AutodiffError> {
        let (ms, _) = self.softmax_parts(Op::LogSoftmax)?;
        let (m, sum) = (ms[0], ms[1]);
        let lse = m + sum.ln();
        let d = self.0.borrow();
        let out: Vec<Scalar> = d.values.iter().map(|&x| x - lse).collect();
        let n = out.len();
        drop(d);
        Ok(Tensor::new(
            vec![n],
            out,
            Some(Record {
                op: Op::LogSoftmax,
                inputs: vec![self.clone()],
                payload: Payload::None,
            }),
        ))
    }

    /// Row `row` of an embedding matrix. Gradient scatters into that row only.
    pub fn embed_row(&self, row: usize) -> Result<Tensor, AutodiffError> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: Op::EmbedRow,
                lhs: s,
                rhs: vec![],
            });
        }
        if row >= s[0] {
            return Err(AutodiffError::RowOutOfRange {
                op: Op::EmbedRow,
                row,
                rows: s[0],
            });
        }
        let cols = s[1];
        let out = self.with_values(|v| v[row * cols..(row + 1) * cols].to_vec());
        Ok(Tensor::new(
            vec![cols],
            out,
            Some(Record {
                op: Op::EmbedRow,
                inputs: vec![self.clone()],
                payload: Payload::Row(row),
            }),
        ))
    }

    /// Coordinate `index` of a vector, as a scalar.
    pub fn pick(&self, index: usize) -> Result<Tensor, AutodiffError> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: Op::Pick,
                lhs: s,
                rhs: vec![],
            });
        }
        if index >= s[0] {
            return Err(AutodiffError::IndexOutOfRange {
                op: Op::Pick,
                index,
                len: s[0],
            });
        }
        let v = self.with_values(|v| v[index]);
        Ok(Tensor::new(
            vec![1],
            vec![v],
            Some(Record {
                op: Op::Pick,
                inputs: vec![self.clone()],
                payload: Payload::Index(index),
            }),
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, coeff: Scalar) -> Tensor {
        let d = self.0.borrow();
        let out: Vec<Scalar> = d.values.iter().map(|&x| x * coeff).collect();
        let shape = d.shape.clone();
        drop(d);
        Tensor::new(
            shape,
            out,
            Some(Record {
                op: Op::Scale,
                inputs: vec![self.clone()],
                payload: Payload::Coeff(coeff),
            }),
        )
    }

    pub fn transpose(&self) -> Result<Tensor, AutodiffError> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: Op::Transpose,
                lhs: s,
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0 as Scalar; r * c];
        self.with_values(|v| {
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = v[i * c + j];
                }
            }
        });
        Ok(Tensor::new(
            vec![c, r],
            out,
            Some(Record {
                op: Op::Transpose,
                inputs: vec![self.clone()],
                payload: Payload::None,
            }),
        ))
    }

    /// Stack equal-length vectors as the rows of an `[n, d]` matrix.
    pub fn stack_rows(rows: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        if rows.is_empty() {
            return Err(AutodiffError::EmptyInput { op: Op::StackRows });
        }
        let d0 = rows[0].shape();
        let mut out = Vec::new();
        for t in rows {
            let s = t.shape();
            if s.len() != 1 || s != d0 {
                return Err(AutodiffError::ShapeMismatch {
                    op: Op::StackRows,
                    lhs: d0,
                    rhs: s,
                });
            }
            t.with_values(|v| out.extend_from_slice(v));
        }
        Ok(Tensor::new(
            vec![rows.len(), d0[0]],
            out,
            Some(Record {
                op: Op::StackRows,
                inputs: rows.iter().map(|t| (*t).clone()).collect(),
                payload: Payload::None,
            }),
        ))
    }

    /// Generic dispatcher over data-free op tags. Ops that carry immediate
    /// data (row ids, pick indices, scale coefficients) have to be built with
    /// their dedicated methods and are rejected here.
    pub fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        let want = |n: usize| {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::BadArity {
                    op,
                    expected: n,
                    got: inputs.len(),
                })
            }
        };
        match op {
            Op::MatMul => {
                want(2)?;
                inputs[0].matmul(inputs[1])
            }
            Op::Add => {
                want(2)?;
                inputs[0].add(inputs[1])
            }
            Op::Mul => {
                want(2)?;
                inputs[0].mul(inputs[1])
            }
            Op::Concat => Tensor::concat(inputs),
            Op::Sigmoid => {
                want(1)?;
                Ok(inputs[0].sigmoid())
            }
            Op::Tanh => {
                want(1)?;
                Ok(inputs[0].tanh())
            }
            Op::Softmax => {
                want(1)?;
                inputs[0].softmax()
            }
            Op::LogSoftmax => {
                want(1)?;
                inputs[0].log_softmax()
            }
            Op::Transpose => {
                want(1)?;
                inputs[0].transpose()
            }
            Op::StackRows => Tensor::stack_rows(inputs),
            Op::EmbedRow | Op::Pick | Op::Scale => Err(AutodiffError::UnsupportedInApply(op)),
        }
    }

    // ---- backward ---------------------------------------------------------

    /// Topological order, inputs before consumers. Iterative so deep graphs
    /// cannot overflow the stack.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        // (node, next input index to visit)
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr(), ());
        while let Some((node, idx)) = stack.pop() {
            let next = {
                let d = node.0.borrow();
                d.record
                    .as_ref()
                    .and_then(|r| r.inputs.get(idx).cloned())
            };
            match next {
                Some(child) => {
                    stack.push((node, idx + 1));
                    if !visited.contains_key(&child.ptr()) {
                        visited.insert(child.ptr(), ());
                        stack.push((child, 0));
                    }
                }
                None => order.push(node),
            }
        }
        order
    }

    /// Accumulate `d loss / d node` into every reachable node's grad field.
    ///
    /// Gradients add on top of whatever is already stored, so parameters
    /// accumulate across calls until [`Tensor::zero_grad`] resets them.
    pub fn backward(&self) -> Result<(), AutodiffError> {
        {
            let d = self.0.borrow();
            if d.values.len() != 1 {
                return Err(AutodiffError::NonScalarLoss {
                    shape: d.shape.clone(),
                });
            }
        }
        let order = self.topo_order();
        // Fresh buffers per call keep repeated backward passes exact.
        let mut buf: HashMap<usize, Vec<Scalar>> = HashMap::new();
        buf.insert(self.ptr(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = buf.get(&node.ptr()).cloned() else {
                continue;
            };
            let d = node.0.borrow();
            if let Some(rec) = &d.record {
                backprop_one(rec, &d.values, &g, &mut buf);
            }
        }
        for node in &order {
            if let Some(g) = buf.remove(&node.ptr()) {
                let mut d = node.0.borrow_mut();
                let grad = d.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (dst, src) in grad.iter_mut().zip(&g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(buf: &mut HashMap<usize, Vec<Scalar>>, node: &Tensor, delta: &[Scalar]) {
    let entry = buf
        .entry(node.ptr())
        .or_insert_with(|| vec![0.0; node.n_elems()]);
    for (dst, src) in entry.iter_mut().zip(delta) {
        *dst += src;
    }
}

/// Push the output gradient `g` of one op record into its inputs.
fn backprop_one(rec: &Record, out_values: &[Scalar], g: &[Scalar], buf: &mut HashMap<usize, Vec<Scalar>>) {
    match rec.op {
        Op::Add => {
            accumulate(buf, &rec.inputs[0], g);
            accumulate(buf, &rec.inputs[1], g);
        }
        Op::Mul => {
            let da: Vec<Scalar> = rec.inputs[1].with_values(|b| {
                g.iter().zip(b).map(|(gi, bi)| gi * bi).collect()
            });
            let db: Vec<Scalar> = rec.inputs[0].with_values(|a| {
                g.iter().zip(a).map(|(gi, ai)| gi * ai).collect()
            });
            accumulate(buf, &rec.inputs[0], &da);
            accumulate(buf, &rec.inputs[1], &db);
        }
        Op::MatMul => {
            let (a, b) = (&rec.inputs[0], &rec.inputs[1]);
            let ashape = a.shape();
            let bshape = b.shape();
            let (r, c) = (ashape[0], ashape[1]);
            let n = if bshape.len() == 1 { 1 } else { bshape[1] };
            // dA[i,k] = sum_j g[i,j] * b[k,j]; dB[k,j] = sum_i a[i,k] * g[i,j]
            let mut da = vec![0.0 as Scalar; r * c];
            let mut db = vec![0.0 as Scalar; c * n];
            a.with_values(|av| {
                b.with_values(|bv| {
                    for i in 0..r {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &av[i * c..(i + 1) * c];
                        let darow = &mut da[i * c..(i + 1) * c];
                        for k in 0..c {
                            let brow = &bv[k * n..(k + 1) * n];
                            darow[k] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<Scalar>();
                            let dbrow = &mut db[k * n..(k + 1) * n];
                            let aik = arow[k];
                            for (dst, &gj) in dbrow.iter_mut().zip(grow) {
                                *dst += aik * gj;
                            }
                        }
                    }
                })
            });
            accumulate(buf, a, &da);
            accumulate(buf, b, &db);
        }
        Op::Concat => {
            let mut offset = 0;
            for input in &rec.inputs {
                let n = input.n_elems();
                accumulate(buf, input, &g[offset..offset + n]);
                offset += n;
            }
        }
        Op::Sigmoid => {
            let dx: Vec<Scalar> = out_values
                .iter()
                .zip(g)
                .map(|(&y, &gi)| gi * y * (1.0 - y))
                .collect();
            accumulate(buf, &rec.inputs[0], &dx);
        }
        Op::Tanh => {
            let dx: Vec<Scalar> = out_values
                .iter()
                .zip(g)
                .map(|(&y, &gi)| gi * (1.0 - y * y))
                .collect();
            accumulate(buf, &rec.inputs[0], &dx);
        }
        Op::Softmax => {
            // dx_i = y_i * (g_i - sum_j g_j y_j)
            let dot: Scalar = g.iter().zip(out_values).map(|(gi, yi)| gi * yi).sum();
            let dx: Vec<Scalar> = out_values
                .iter()
                .zip(g)
                .map(|(&y, &gi)| y * (gi - dot))
                .collect();
            accumulate(buf, &rec.inputs[0], &dx);
        }
        Op::LogSoftmax => {
            // dx_i = g_i - exp(y_i) * sum_j g_j
            let gsum: Scalar = g.iter().sum();
            let dx: Vec<Scalar> = out_values
                .iter()
                .zip(g)
                .map(|(&y, &gi)| gi - y.exp() * gsum)
                .collect();
            accumulate(buf, &rec.inputs[0], &dx);
        }
        Op::EmbedRow => {
            let Payload::Row(row) = rec.payload else {
                unreachable!("embed_row payload");
            };
            let input = &rec.inputs[0];
            let cols = input.shape()[1];
            let entry = buf
                .entry(input.ptr())
                .or_insert_with(|| vec![0.0; input.n_elems()]);
            for (dst, src) in entry[row * cols..(row + 1) * cols].iter_mut().zip(g) {
                *dst += src;
            }
        }
        Op::Pick => {
            let Payload::Index(index) = rec.payload else {
                unreachable!("pick payload");
            };
            let input = &rec.inputs[0];
            let entry = buf
                .entry(input.ptr())
                .or_insert_with(|| vec![0.0; input.n_elems()]);
            entry[index] += g[0];
        }
        Op::Scale => {
            let Payload::Coeff(c) = rec.payload else {
                unreachable!("scale payload");
            };
            let dx: Vec<Scalar> = g.iter().map(|&gi| gi * c).collect();
            accumulate(buf, &rec.inputs[0], &dx);
        }
        Op::Transpose => {
            let input = &rec.inputs[0];
            let s = input.shape();
            let (r, c) = (s[0], s[1]);
            let mut dx = vec![0.0 as Scalar; r * c];
            for j in 0..c {
                for i in 0..r {
                    dx[i * c + j] = g[j * r + i];
                }
            }
            accumulate(buf, input, &dx);
        }
        Op::StackRows => {
            let d = rec.inputs[0].n_elems();
            for (i, input) in rec.inputs.iter().enumerate() {
                accumulate(buf, input, &g[i * d..(i + 1) * d]);
            }
        }
    }
}

/// Max relative error between analytic gradients and central differences.
///
/// `f` must be deterministic and rebuild its graph on every call; dropout has
/// to be disabled while checking. The error for each coordinate is
/// `|analytic - numeric| / max(1e-8, |analytic|)`.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[Tensor],
    eps: Scalar,
) -> Result<Scalar, AutodiffError>
where
    F: FnMut() -> Result<Tensor, AutodiffError>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<Scalar>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.n_elems()]))
        .collect();

    let mut max_rel = 0.0 as Scalar;
    for (p, pa) in params.iter().zip(&analytic) {
        for i in 0..p.n_elems() {
            let orig = p.with_values(|v| v[i]);
            p.with_values_mut(|v| v[i] = orig + eps);
            let plus = f()?.item();
            p.with_values_mut(|v| v[i] = orig - eps);
            let minus = f()?.item();
            p.with_values_mut(|v| v[i] = orig);
            let numeric = (plus - minus) / (2.0 * eps);
            let a = pa[i];
            let rel = (a - numeric).abs() / (1e-8 as Scalar).max(a.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
