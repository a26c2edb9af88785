//! Tape-based reverse-mode differentiation with second-order support.
//!
//! Every primitive records its inputs and value on a [`Tape`]. Backward
//! passes are written once, against the [`Builder`] abstraction, and can
//! either run numerically ([`Tape::grad_values`]) or append themselves to
//! the tape as ordinary primitives ([`Tape::grad`]). The second form is
//! what lets an outer loss differentiate through inner gradient steps.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{GapError, Result};
use crate::linalg::SvdResult;
use crate::preconditioners::{sigmoid2, sp};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Primitive operations. Shapes are explicit; the only broadcast is the
/// row/column repeat used for bias addition and row scaling.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddConst(f64),
    Relu,
    /// Heaviside step, `1` where the input is positive. Zero derivative.
    Step,
    /// `½·log(1 + exp(2x))`, elementwise.
    Softplus,
    /// `1 / (1 + exp(-2x))`, the derivative of [`Op::Softplus`].
    Sigmoid2,
    Sum,
    /// Broadcast a one-element tensor to the given shape.
    Expand(Vec<usize>),
    SumRows,
    RepeatRows(usize),
    SumCols,
    RepeatCols(usize),
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    /// `U·diag(s ∘ σ)·Vᵀ` for inputs `(g, s)`, with the saved SVD of `g`.
    /// Differentiable once, through the SVD; not recordable on a tape.
    SpectralScale(Arc<SvdResult>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Relu => "relu",
            Op::Step => "step",
            Op::Softplus => "softplus",
            Op::Sigmoid2 => "sigmoid2",
            Op::Sum => "sum",
            Op::Expand(_) => "expand",
            Op::SumRows => "sum_rows",
            Op::RepeatRows(_) => "repeat_rows",
            Op::SumCols => "sum_cols",
            Op::RepeatCols(_) => "repeat_cols",
            Op::Permute(_) => "permute",
            Op::Reshape(_) => "reshape",
            Op::SpectralScale(_) => "spectral_scale",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::SpectralScale(_) => 2,
            _ => 1,
        }
    }
}

/// Forward kernel of a primitive.
pub fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.len() != op.arity() {
        return Err(GapError::Contract(format!(
            "{} takes {} inputs, got {}",
            op.name(),
            op.arity(),
            inputs.len()
        )));
    }
    match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul => inputs[0].matmul(inputs[1]),
        Op::Transpose => inputs[0].transpose(),
        Op::Add => inputs[0].add(inputs[1]),
        Op::Sub => inputs[0].sub(inputs[1]),
        Op::Mul => inputs[0].mul(inputs[1]),
        Op::Scale(c) => Ok(inputs[0].scale(*c)),
        Op::AddConst(c) => Ok(inputs[0].map(|v| v + c)),
        Op::Relu => Ok(inputs[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        Op::Step => Ok(inputs[0].map(|v| if v > 0.0 { 1.0 } else { 0.0 })),
        Op::Softplus => Ok(inputs[0].map(sp)),
        Op::Sigmoid2 => Ok(inputs[0].map(sigmoid2)),
        Op::Sum => Ok(Tensor::scalar(inputs[0].sum())),
        Op::Expand(shape) => {
            if !inputs[0].is_scalar() {
                return Err(GapError::Dimension(format!(
                    "expand needs a one-element tensor, got {:?}",
                    inputs[0].shape()
                )));
            }
            Ok(Tensor::full(shape, inputs[0].item()))
        }
        Op::SumRows => inputs[0].sum_rows(),
        Op::RepeatRows(r) => inputs[0].repeat_rows(*r),
        Op::SumCols => inputs[0].sum_cols(),
        Op::RepeatCols(c) => inputs[0].repeat_cols(*c),
        Op::Permute(p) => inputs[0].permute(p),
        Op::Reshape(s) => inputs[0].reshaped(s),
        Op::SpectralScale(svd) => {
            let (g, s) = (inputs[0], inputs[1]);
            if g.shape() != [svd.u.rows(), svd.v.rows()] || s.len() != svd.sigma.len() {
                return Err(GapError::Dimension(format!(
                    "spectral_scale of {:?} with {} scales",
                    g.shape(),
                    s.len()
                )));
            }
            let scaled: Vec<f64> = svd
                .sigma
                .data()
                .iter()
                .zip(s.data())
                .map(|(a, b)| a * b)
                .collect();
            Ok(svd.reconstruct_with(&scaled))
        }
    }
}

/// Target of the generic backward pass: either numeric evaluation or
/// recording onto a tape.
trait Builder {
    type V: Clone;
    fn lift(&self, id: usize) -> Self::V;
    fn apply(&self, op: Op, inputs: &[&Self::V]) -> Result<Self::V>;
    fn constant(&self, t: Tensor) -> Self::V;
    fn value(&self, v: &Self::V) -> Arc<Tensor>;
    fn recording(&self) -> bool;
}

struct Numeric<'a> {
    nodes: &'a [Node],
}

impl Builder for Numeric<'_> {
    type V = Arc<Tensor>;

    fn lift(&self, id: usize) -> Arc<Tensor> {
        self.nodes[id].value.clone()
    }

    fn apply(&self, op: Op, inputs: &[&Arc<Tensor>]) -> Result<Arc<Tensor>> {
        let refs: Vec<&Tensor> = inputs.iter().map(|t| t.as_ref()).collect();
        eval(&op, &refs).map(Arc::new)
    }

    fn constant(&self, t: Tensor) -> Arc<Tensor> {
        Arc::new(t)
    }

    fn value(&self, v: &Arc<Tensor>) -> Arc<Tensor> {
        v.clone()
    }

    fn recording(&self) -> bool {
        false
    }
}

struct Recording<'a> {
    tape: &'a Tape,
}

impl Builder for Recording<'_> {
    type V = usize;

    fn lift(&self, id: usize) -> usize {
        id
    }

    fn apply(&self, op: Op, inputs: &[&usize]) -> Result<usize> {
        let ids: Vec<usize> = inputs.iter().map(|&&i| i).collect();
        self.tape.push_op(op, ids)
    }

    fn constant(&self, t: Tensor) -> usize {
        self.tape.push_leaf(t)
    }

    fn value(&self, v: &usize) -> Arc<Tensor> {
        self.tape.nodes.borrow()[*v].value.clone()
    }

    fn recording(&self) -> bool {
        true
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Arc<Tensor>,
}

/// Append-only record of primitive operations.
///
/// Nodes only reference earlier nodes, so the tape is acyclic by
/// construction. A tape is confined to one thread while it is being built;
/// finished tapes can be moved to other threads.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    outputs: RefCell<Vec<usize>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(tape {}, node {})", self.tape.id, self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            outputs: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Adds an input (parameter or constant) to the tape.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push_leaf(value);
        Var { tape: self, id }
    }

    /// Registers `var` as a tape output, returned by [`Tape::replay`].
    pub fn mark_output(&self, var: Var<'_>) -> Result<()> {
        self.check_owned(var)?;
        self.outputs.borrow_mut().push(var.id);
        Ok(())
    }

    pub fn value(&self, var: Var<'_>) -> Arc<Tensor> {
        self.nodes.borrow()[var.id].value.clone()
    }

    fn push_leaf(&self, value: Tensor) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: Arc::new(value),
        });
        nodes.len() - 1
    }

    fn push_op(&self, op: Op, inputs: Vec<usize>) -> Result<usize> {
        let value = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor> = inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            eval(&op, &values)?
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs,
            value: Arc::new(value),
        });
        Ok(nodes.len() - 1)
    }

    fn check_owned(&self, var: Var<'_>) -> Result<()> {
        if !std::ptr::eq(var.tape, self) {
            return Err(GapError::Lookup(format!(
                "node {} belongs to tape {}, not tape {}",
                var.id, var.tape.id, self.id
            )));
        }
        Ok(())
    }

    /// Applies a primitive to variables of this tape.
    pub fn apply<'t>(&'t self, op: Op, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        for v in inputs {
            self.check_owned(*v)?;
        }
        let id = self.push_op(op, inputs.iter().map(|v| v.id).collect())?;
        Ok(Var { tape: self, id })
    }

    /// Gradient of the scalar `output` with respect to each of `wrt`,
    /// recorded on the tape so it can be differentiated again.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let builder = Recording { tape: self };
        let grads = self.backward(&builder, output, wrt)?;
        Ok(grads.into_iter().map(|id| Var { tape: self, id }).collect())
    }

    /// Gradient of the scalar `output`, evaluated without recording.
    pub fn grad_values(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let builder = Numeric { nodes: &nodes };
        let grads = self.backward(&builder, output, wrt)?;
        Ok(grads
            .into_iter()
            .map(|t| Arc::try_unwrap(t).unwrap_or_else(|shared| (*shared).clone()))
            .collect())
    }

    fn backward<B: Builder>(&self, b: &B, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<B::V>> {
        self.check_owned(output)?;
        for v in wrt {
            self.check_owned(*v)?;
        }
        let out_id = output.id;
        let (out_shape, is_scalar) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[out_id].value;
            (v.shape().to_vec(), v.is_scalar())
        };
        if !is_scalar {
            return Err(GapError::Contract(format!(
                "gradient needs a scalar output, got shape {out_shape:?}"
            )));
        }

        // Nodes on some path from a `wrt` node; only these need gradients.
        let mut depends = vec![false; out_id + 1];
        {
            let nodes = self.nodes.borrow();
            for v in wrt {
                if v.id <= out_id {
                    depends[v.id] = true;
                }
            }
            for i in 0..=out_id {
                if !depends[i] && nodes[i].inputs.iter().any(|&j| depends[j]) {
                    depends[i] = true;
                }
            }
        }

        let mut grads: Vec<Option<B::V>> = vec![None; out_id + 1];
        grads[out_id] = Some(b.constant(Tensor::full(&out_shape, 1.0)));

        for i in (0..=out_id).rev() {
            if !depends[i] {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].inputs.clone())
            };
            if matches!(op, Op::Leaf) {
                continue;
            }
            let need: Vec<bool> = inputs.iter().map(|&j| depends[j]).collect();
            let contributions = vjp(b, &op, &inputs, i, &g, &need)?;
            for (j, c) in inputs.iter().zip(contributions) {
                let Some(c) = c else { continue };
                grads[*j] = Some(match grads[*j].take() {
                    None => c,
                    Some(prev) => b.apply(Op::Add, &[&prev, &c])?,
                });
            }
        }

        let nodes_len = out_id + 1;
        wrt.iter()
            .map(|v| {
                let existing = if v.id < nodes_len { grads[v.id].clone() } else { None };
                match existing {
                    Some(g) => Ok(g),
                    None => {
                        let shape = self.nodes.borrow()[v.id].value.shape().to_vec();
                        Ok(b.constant(Tensor::zeros(&shape)))
                    }
                }
            })
            .collect()
    }

    /// Re-executes every recorded primitive from the stored leaf values and
    /// returns the values of the marked outputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Arc<Tensor>> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                _ => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| values[i].as_ref()).collect();
                    Arc::new(eval(&node.op, &ins)?)
                }
            };
            values.push(value);
        }
        Ok(self
            .outputs
            .borrow()
            .iter()
            .map(|&i| (*values[i]).clone())
            .collect())
    }
}

/// Vector-Jacobian products of every primitive, expressed in primitives.
fn vjp<B: Builder>(
    b: &B,
    op: &Op,
    inputs: &[usize],
    out: usize,
    g: &B::V,
    need: &[bool],
) -> Result<Vec<Option<B::V>>> {
    let x = |k: usize| b.lift(inputs[k]);
    let mut result: Vec<Option<B::V>> = vec![None; inputs.len()];
    match op {
        Op::Leaf => {}
        Op::MatMul => {
            if need[0] {
                let bt = b.apply(Op::Transpose, &[&x(1)])?;
                result[0] = Some(b.apply(Op::MatMul, &[g, &bt])?);
            }
            if need[1] {
                let at = b.apply(Op::Transpose, &[&x(0)])?;
                result[1] = Some(b.apply(Op::MatMul, &[&at, g])?);
            }
        }
        Op::Transpose => result[0] = Some(b.apply(Op::Transpose, &[g])?),
        Op::Add => {
            result[0] = need[0].then(|| g.clone());
            result[1] = need[1].then(|| g.clone());
        }
        Op::Sub => {
            result[0] = need[0].then(|| g.clone());
            if need[1] {
                result[1] = Some(b.apply(Op::Scale(-1.0), &[g])?);
            }
        }
        Op::Mul => {
            if need[0] {
                result[0] = Some(b.apply(Op::Mul, &[g, &x(1)])?);
            }
            if need[1] {
                result[1] = Some(b.apply(Op::Mul, &[g, &x(0)])?);
            }
        }
        Op::Scale(c) => result[0] = Some(b.apply(Op::Scale(*c), &[g])?),
        Op::AddConst(_) => result[0] = Some(g.clone()),
        Op::Relu => {
            let mask = b.apply(Op::Step, &[&x(0)])?;
            result[0] = Some(b.apply(Op::Mul, &[g, &mask])?);
        }
        Op::Step => {}
        Op::Softplus => {
            let slope = b.apply(Op::Sigmoid2, &[&x(0)])?;
            result[0] = Some(b.apply(Op::Mul, &[g, &slope])?);
        }
        Op::Sigmoid2 => {
            // d/dx σ(2x) = 2·y·(1 - y)
            let y = b.lift(out);
            let neg = b.apply(Op::Scale(-1.0), &[&y])?;
            let one_minus = b.apply(Op::AddConst(1.0), &[&neg])?;
            let prod = b.apply(Op::Mul, &[&y, &one_minus])?;
            let slope = b.apply(Op::Scale(2.0), &[&prod])?;
            result[0] = Some(b.apply(Op::Mul, &[g, &slope])?);
        }
        Op::Sum => {
            let shape = b.value(&x(0)).shape().to_vec();
            result[0] = Some(b.apply(Op::Expand(shape), &[g])?);
        }
        Op::Expand(_) => {
            let summed = b.apply(Op::Sum, &[g])?;
            let shape = b.value(&x(0)).shape().to_vec();
            result[0] = Some(if shape.is_empty() {
                summed
            } else {
                b.apply(Op::Reshape(shape), &[&summed])?
            });
        }
        Op::SumRows => {
            let rows = b.value(&x(0)).rows();
            result[0] = Some(b.apply(Op::RepeatRows(rows), &[g])?);
        }
        Op::RepeatRows(_) => result[0] = Some(b.apply(Op::SumRows, &[g])?),
        Op::SumCols => {
            let cols = b.value(&x(0)).cols();
            result[0] = Some(b.apply(Op::RepeatCols(cols), &[g])?);
        }
        Op::RepeatCols(_) => result[0] = Some(b.apply(Op::SumCols, &[g])?),
        Op::Permute(perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            result[0] = Some(b.apply(Op::Permute(inverse), &[g])?);
        }
        Op::Reshape(_) => {
            let shape = b.value(&x(0)).shape().to_vec();
            result[0] = Some(b.apply(Op::Reshape(shape), &[g])?);
        }
        Op::SpectralScale(svd) => {
            if b.recording() {
                return Err(GapError::Contract(
                    "spectral_scale can only be differentiated once".into(),
                ));
            }
            let scales = b.value(&x(1));
            let upstream = b.value(g);
            let (dg, ds) = crate::linalg::spectral_scale_backward(svd, scales.data(), &upstream)?;
            result[0] = need[0].then(|| b.constant(dg));
            result[1] = need[1].then(|| b.constant(ds));
        }
    }
    Ok(result)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(self, op: Op) -> Result<Var<'t>> {
        self.tape.apply(op, &[self])
    }

    fn binary(self, op: Op, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(op, &[self, other])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::MatMul, other)
    }

    pub fn t(self) -> Result<Var<'t>> {
        self.unary(Op::Transpose)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Mul, other)
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(factor))
    }

    pub fn add_const(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::AddConst(c))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Op::Relu)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(Op::Softplus)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Op::Sum)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn sum_rows(self) -> Result<Var<'t>> {
        self.unary(Op::SumRows)
    }

    pub fn sum_cols(self) -> Result<Var<'t>> {
        self.unary(Op::SumCols)
    }

    pub fn repeat_rows(self, rows: usize) -> Result<Var<'t>> {
        self.unary(Op::RepeatRows(rows))
    }

    pub fn repeat_cols(self, cols: usize) -> Result<Var<'t>> {
        self.unary(Op::RepeatCols(cols))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Permute(perm.to_vec()))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Reshape(shape.to_vec()))
    }

    /// Scales row `i` of a matrix by `scales[i]`.
    pub fn scale_rows(self, scales: Var<'t>) -> Result<Var<'t>> {
        let cols = self.value().cols();
        self.mul(scales.repeat_cols(cols)?)
    }
}

/// Relative-error bound for [`primitive_gradcheck`].
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;

/// Worst relative error of one primitive's VJP over the checked seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
}

type Build = for<'a, 't> fn(&'a [Var<'t>]) -> Result<Var<'t>>;

fn spectral_scale<'t>(v: &[Var<'t>]) -> Result<Var<'t>> {
    let res = crate::linalg::svd(&v[0].value())?;
    v[0].tape().apply(Op::SpectralScale(Arc::new(res)), &[v[0], v[1]])
}

const PRIMITIVES: [(&str, Build, &[&[usize]]); 20] = [
    ("matmul", |v| v[0].matmul(v[1]), &[&[3, 4], &[4, 2]]),
    ("transpose", |v| v[0].t(), &[&[3, 4]]),
    ("add", |v| v[0].add(v[1]), &[&[2, 3], &[2, 3]]),
    ("sub", |v| v[0].sub(v[1]), &[&[2, 3], &[2, 3]]),
    ("mul", |v| v[0].mul(v[1]), &[&[2, 3], &[2, 3]]),
    ("scale", |v| v[0].scale(-2.5), &[&[4]]),
    ("add_const", |v| v[0].add_const(0.75), &[&[4]]),
    ("relu", |v| v[0].relu(), &[&[3, 3]]),
    ("softplus", |v| v[0].softplus(), &[&[5]]),
    ("sigmoid2", |v| v[0].unary(Op::Sigmoid2), &[&[5]]),
    ("sum", |v| v[0].sum(), &[&[2, 3]]),
    ("expand", |v| v[0].sum()?.unary(Op::Expand(vec![2, 2])), &[&[3]]),
    ("sum_rows", |v| v[0].sum_rows(), &[&[3, 4]]),
    ("sum_cols", |v| v[0].sum_cols(), &[&[3, 4]]),
    ("repeat_rows", |v| v[0].repeat_rows(3), &[&[4]]),
    ("repeat_cols", |v| v[0].repeat_cols(3), &[&[4]]),
    ("permute", |v| v[0].permute(&[2, 0, 1]), &[&[2, 3, 4]]),
    ("reshape", |v| v[0].reshape(&[6, 4]), &[&[2, 3, 4]]),
    ("scale_rows", |v| v[0].scale_rows(v[1]), &[&[3, 4], &[3]]),
    ("spectral_scale", spectral_scale, &[&[3, 5], &[3]]),
];

/// Compares one primitive's VJP with central differences of a random linear
/// functional of its output. The recorded backward pass must agree with the
/// numeric one bit for bit wherever it is recordable.
fn check_primitive(build: Build, shapes: &[&[usize]], seed: u64) -> Result<f64> {
    let mut rng = crate::rng::seeded(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::uniform(s, -1.5, 1.5, &mut rng)).collect();
    let objective = |ins: &[Tensor], probe: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        Ok(build(&vars)?.value().dot(probe))
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&vars)?;
    let probe = Tensor::uniform(&out.shape(), -1.0, 1.0, &mut rng);
    let loss = out.mul(tape.leaf(probe.clone()))?.sum()?;
    let numeric = tape.grad_values(loss, &vars)?;
    let recorded = match tape.grad(loss, &vars) {
        Ok(r) => Some(r),
        Err(GapError::Contract(_)) => None,
        Err(e) => return Err(e),
    };
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let fd = crate::mlp::finite_diff_grad(
            |x| {
                let mut ins = inputs.clone();
                ins[k] = x.clone();
                objective(&ins, &probe)
            },
            &inputs[k],
            1e-6,
        )?;
        worst = worst.max(crate::tensor::relative_error(numeric[k].data(), fd.data(), 1e-8));
        if let Some(r) = &recorded {
            if r[k].value().data() != numeric[k].data() {
                return Err(GapError::Contract(format!("recorded and numeric VJPs differ for input {k}")));
            }
        }
    }
    Ok(worst)
}

/// Finite-difference check of every primitive VJP, one entry per primitive.
pub fn primitive_gradcheck(seeds: std::ops::Range<u64>) -> Result<Vec<PrimitiveCheck>> {
    PRIMITIVES
        .iter()
        .map(|&(name, build, shapes)| {
            let mut max_rel_error: f64 = 0.0;
            for seed in seeds.clone() {
                max_rel_error = max_rel_error.max(check_primitive(build, shapes, seed)?);
            }
            Ok(PrimitiveCheck { name, max_rel_error })
        })
        .collect()
}
