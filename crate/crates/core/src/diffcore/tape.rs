use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::linalg::Lu;
use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw};
use super::Tensor;
use crate::error::{shape_err, LdmError, Result};

/// What a backward rule gets to see.
pub struct BackwardCtx<'a> {
    /// Upstream gradient, same shape as `output`.
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// `needs[i]` is false when input `i` does not require a gradient.
    pub needs: Vec<bool>,
}

/// Local gradient rule: one entry per input, `None` where not needed.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    leaf: bool,
}

#[derive(Default)]
struct Inner {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

/// Define-by-run gradient tape.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once. Cloning a `Tape` clones
/// the handle, not the recording.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<Inner>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.inner.borrow().nodes.len())
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.tape.inner.borrow();
        write!(f, "Var#{} {:?}", self.id, inner.values[self.id])
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, inputs: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| inner.nodes[i].requires_grad);
        let id = inner.nodes.len();
        inner.values.push(value);
        inner.nodes.push(Node {
            inputs,
            backward: if requires_grad { backward } else { None },
            requires_grad,
            leaf: false,
        });
        inner.leaf_grads.push(None);
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Records a gradient-requiring leaf (a parameter or an input we differentiate).
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.values.push(value);
        inner.nodes.push(Node {
            inputs: vec![],
            backward: None,
            requires_grad: true,
            leaf: true,
        });
        inner.leaf_grads.push(None);
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(&self, inputs: &[&Var], value: Tensor, backward: BackwardFn) -> Var {
        for v in inputs {
            self.check_same(v);
        }
        self.push(value, inputs.iter().map(|v| v.id).collect(), Some(backward))
    }

    fn check_same(&self, v: &Var) {
        assert!(
            Rc::ptr_eq(&self.inner, &v.tape.inner),
            "Var belongs to a different tape"
        );
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        self.check_same(loss);
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        let shape = inner.values[loss.id].shape().to_vec();
        if inner.values[loss.id].numel() != 1 {
            return Err(LdmError::NotScalar(shape));
        }
        if !inner.nodes[loss.id].requires_grad {
            return Err(LdmError::DisconnectedTape);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(&shape));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if node.leaf {
                match &mut inner.leaf_grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let Some(rule) = &node.backward else { continue };
            let ctx = BackwardCtx {
                grad: &g,
                inputs: node.inputs.iter().map(|&i| &inner.values[i]).collect(),
                output: &inner.values[id],
                needs: node
                    .inputs
                    .iter()
                    .map(|&i| inner.nodes[i].requires_grad)
                    .collect(),
            };
            let local = rule(&ctx);
            for (&inp, gi) in node.inputs.iter().zip(local) {
                let Some(gi) = gi else { continue };
                if !inner.nodes[inp].requires_grad {
                    continue;
                }
                debug_assert_eq!(gi.shape(), inner.values[inp].shape());
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, zeros if it was not reached.
    pub fn grad(&self, v: &Var) -> Option<Tensor> {
        let inner = self.inner.borrow();
        if !inner.nodes[v.id].leaf {
            return None;
        }
        Some(
            inner.leaf_grads[v.id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(inner.values[v.id].shape())),
        )
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn with_values<R>(&self, ids: &[usize], f: impl FnOnce(&[&Tensor]) -> R) -> R {
        let inner = self.inner.borrow();
        let vals: Vec<&Tensor> = ids.iter().map(|&i| &inner.values[i]).collect();
        f(&vals)
    }
}

enum Bcast {
    Same,
    /// rhs repeats over the leading dims of lhs
    Rhs,
    /// lhs repeats over the leading dims of rhs
    Lhs,
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count();
    &s[k..]
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    if a == b {
        return Ok((a.to_vec(), Bcast::Same));
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if nb <= na && a.ends_with(strip_leading_ones(b)) {
        return Ok((a.to_vec(), Bcast::Rhs));
    }
    if na < nb && b.ends_with(strip_leading_ones(a)) {
        return Ok((b.to_vec(), Bcast::Lhs));
    }
    Err(shape_err(op, a, b))
}

/// Sums a gradient of the broadcast output back onto an operand of `n` elements.
fn reduce_to(g: &[f64], n: usize, shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}

type BinFwd = fn(f64, f64) -> f64;
/// Partial derivative of the output w.r.t. one operand, given (a, b).
type BinDeriv = fn(f64, f64) -> f64;

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().values[self.id].clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().values[self.id].shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().values[self.id].data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(self)
    }

    fn binary(
        &self,
        other: &Var,
        op: &'static str,
        f: BinFwd,
        da: BinDeriv,
        db: BinDeriv,
    ) -> Result<Var> {
        self.tape.check_same(other);
        let (value, mode) = self.tape.with_values(&[self.id, other.id], |v| {
            let (a, b) = (v[0], v[1]);
            let (shape, mode) = broadcast(op, a.shape(), b.shape())?;
            let (ad, bd) = (a.data(), b.data());
            let (na, nb) = (ad.len(), bd.len());
            let n = na.max(nb);
            let data = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
            Ok::<_, LdmError>((Tensor::new(shape, data)?, mode))
        })?;
        let _ = mode;
        let bw: BackwardFn = Box::new(move |ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            let (ad, bd, g) = (a.data(), b.data(), ctx.grad.data());
            let (na, nb) = (ad.len(), bd.len());
            let ga = ctx.needs[0].then(|| {
                let full: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * da(ad[i % na], bd[i % nb]))
                    .collect();
                reduce_to(&full, na, a.shape())
            });
            let gb = ctx.needs[1].then(|| {
                let full: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * db(ad[i % na], bd[i % nb]))
                    .collect();
                reduce_to(&full, nb, b.shape())
            });
            vec![ga, gb]
        });
        Ok(self.tape.push(value, vec![self.id, other.id], Some(bw)))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        let zero = self
            .tape
            .with_values(&[other.id], |v| v[0].data().contains(&0.0));
        if zero {
            return Err(LdmError::DomainError {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    /// Elementwise map with derivative `d(x, y)` where `y = f(x)`.
    fn unary(&self, f: impl Fn(f64) -> f64, d: fn(f64, f64) -> f64) -> Var {
        let value = self.tape.with_values(&[self.id], |v| v[0].map(f));
        let bw: BackwardFn = Box::new(move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let data = g
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&gi, (&xi, &yi))| gi * d(xi, yi))
                .collect();
            vec![Some(
                Tensor::new(ctx.inputs[0].shape().to_vec(), data).expect("same shape"),
            )]
        });
        self.tape.push(value, vec![self.id], Some(bw))
    }

    fn require_positive(&self, op: &'static str) -> Result<()> {
        let bad = self
            .tape
            .with_values(&[self.id], |v| v[0].data().iter().any(|&x| !(x > 0.0)));
        if bad {
            return Err(LdmError::DomainError {
                op,
                msg: "argument must be strictly positive".into(),
            });
        }
        Ok(())
    }

    pub fn neg(&self) -> Var {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Var> {
        self.require_positive("log")?;
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    pub fn sqrt(&self) -> Result<Var> {
        self.require_positive("sqrt")?;
        Ok(self.unary(f64::sqrt, |_, y| 0.5 / y))
    }

    pub fn tanh(&self) -> Var {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn square(&self) -> Var {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Var {
        self.unary(f64::abs, |x, _| x.signum() * (x != 0.0) as i32 as f64)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    /// `log(1 + e^x)`, computed without overflow.
    pub fn softplus(&self) -> Var {
        self.unary(softplus, |x, _| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    /// `max(x, lo)`; the gradient is passed only where `x > lo`.
    pub fn clamp_min(&self, lo: f64) -> Var {
        let value = self.tape.with_values(&[self.id], |v| v[0].map(|x| x.max(lo)));
        let bw: BackwardFn = Box::new(move |ctx| {
            let x = ctx.inputs[0];
            let data = x
                .data()
                .iter()
                .zip(ctx.grad.data())
                .map(|(&xi, &g)| if xi > lo { g } else { 0.0 })
                .collect();
            vec![Some(Tensor::new(x.shape().to_vec(), data).expect("shape"))]
        });
        self.tape.push(value, vec![self.id], Some(bw))
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = self.tape.with_values(&[self.id], |v| v[0].scale(c));
        let bw: BackwardFn = Box::new(move |ctx| vec![Some(ctx.grad.scale(c))]);
        self.tape.push(value, vec![self.id], Some(bw))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = self.tape.with_values(&[self.id], |v| v[0].map(|x| x + c));
        let bw: BackwardFn = Box::new(|ctx| vec![Some(ctx.grad.clone())]);
        self.tape.push(value, vec![self.id], Some(bw))
    }

    /// Forward identity whose pullback is the zero map.
    pub fn stopgrad(&self) -> Var {
        let value = self.value();
        self.tape.constant(value)
    }

    pub fn sum(&self) -> Var {
        let (value, shape) = self
            .tape
            .with_values(&[self.id], |v| (v[0].sum(), v[0].shape().to_vec()));
        let bw: BackwardFn =
            Box::new(move |ctx| vec![Some(Tensor::full(&shape, ctx.grad.data()[0]))]);
        self.tape.push(Tensor::scalar(value), vec![self.id], Some(bw))
    }

    pub fn mean(&self) -> Var {
        let n = self.tape.with_values(&[self.id], |v| v[0].numel()) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums each row of a matrix: `[r, c] -> [r]`.
    pub fn sum_rows(&self) -> Result<Var> {
        let value = self.tape.with_values(&[self.id], |v| {
            let (r, c) = v[0].require_matrix("sum_rows")?;
            let d = v[0].data();
            Ok::<_, LdmError>(Tensor::vector(
                (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect(),
            ))
        })?;
        let bw: BackwardFn = Box::new(|ctx| {
            let (r, c) = (ctx.inputs[0].shape()[0], ctx.inputs[0].shape()[1]);
            let g = ctx.grad.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                out[i * c..(i + 1) * c].iter_mut().for_each(|x| *x = g[i]);
            }
            vec![Some(Tensor::matrix(r, c, out).expect("shape"))]
        });
        Ok(self.tape.push(value, vec![self.id], Some(bw)))
    }

    /// Sums each column of a matrix: `[r, c] -> [c]`.
    pub fn sum_cols(&self) -> Result<Var> {
        let value = self.tape.with_values(&[self.id], |v| {
            let (r, c) = v[0].require_matrix("sum_cols")?;
            let d = v[0].data();
            let mut s = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    s[j] += d[i * c + j];
                }
            }
            Ok::<_, LdmError>(Tensor::vector(s))
        })?;
        let bw: BackwardFn = Box::new(|ctx| {
            let (r, c) = (ctx.inputs[0].shape()[0], ctx.inputs[0].shape()[1]);
            let g = ctx.grad.data();
            let mut out = Vec::with_capacity(r * c);
            for _ in 0..r {
                out.extend_from_slice(g);
            }
            vec![Some(Tensor::matrix(r, c, out).expect("shape"))]
        });
        Ok(self.tape.push(value, vec![self.id], Some(bw)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        let bw: BackwardFn = Box::new(|ctx| {
            vec![Some(
                ctx.grad
                    .clone()
                    .reshape(ctx.inputs[0].shape())
                    .expect("same numel"),
            )]
        });
        Ok(self.tape.push(value, vec![self.id], Some(bw)))
    }

    pub fn transpose(&self) -> Result<Var> {
        let value = self.tape.with_values(&[self.id], |v| v[0].transpose())?;
        let bw: BackwardFn =
            Box::new(|ctx| vec![Some(ctx.grad.transpose().expect("matrix grad"))]);
        Ok(self.tape.push(value, vec![self.id], Some(bw)))
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.tape.check_same(other);
        let value = self
            .tape
            .with_values(&[self.id, other.id], |v| v[0].matmul(v[1]))?;
        let bw: BackwardFn = Box::new(|ctx| {
            let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = ctx.needs[0].then(|| {
                Tensor::matrix(m, k, matmul_nt_raw(g.data(), b.data(), m, n, k)).expect("ga")
            });
            let gb = ctx.needs[1].then(|| {
                Tensor::matrix(k, n, matmul_tn_raw(a.data(), g.data(), m, k, n)).expect("gb")
            });
            vec![ga, gb]
        });
        Ok(self.tape.push(value, vec![self.id, other.id], Some(bw)))
    }

    /// `self · otherᵀ`; the layout used by dense layers with `[out, in]` weights.
    pub fn matmul_t(&self, other: &Var) -> Result<Var> {
        self.tape.check_same(other);
        let value = self.tape.with_values(&[self.id, other.id], |v| {
            let (m, k) = v[0].require_matrix("matmul_t")?;
            let (n, k2) = v[1].require_matrix("matmul_t")?;
            if k != k2 {
                return Err(shape_err("matmul_t", v[0].shape(), v[1].shape()));
            }
            Tensor::matrix(m, n, matmul_nt_raw(v[0].data(), v[1].data(), m, k, n))
        })?;
        let bw: BackwardFn = Box::new(|ctx| {
            let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
            let ga = ctx.needs[0]
                .then(|| Tensor::matrix(m, k, matmul_raw(g.data(), b.data(), m, n, k)).expect("ga"));
            let gb = ctx.needs[1].then(|| {
                Tensor::matrix(n, k, matmul_tn_raw(g.data(), a.data(), m, n, k)).expect("gb")
            });
            vec![ga, gb]
        });
        Ok(self.tape.push(value, vec![self.id, other.id], Some(bw)))
    }

    /// Places a length-`n` vector on the diagonal of an `n x n` matrix.
    pub fn diag_embed(&self) -> Result<Var> {
        let value = self.tape.with_values(&[self.id], |v| match v[0].shape() {
            [_] => Ok(Tensor::diag(v[0].data())),
            s => Err(shape_err("diag_embed", s, &[0])),
        })?;
        let bw: BackwardFn = Box::new(|ctx| vec![Some(Tensor::vector(ctx.grad.diagonal()))]);
        Ok(self.tape.push(value, vec![self.id], Some(bw)))
    }

    /// Diagonal of a square matrix as a vector.
    pub fn diagonal(&self) -> Result<Var> {
        let value = self.tape.with_values(&[self.id], |v| {
            v[0].require_square("diagonal")?;
            Ok::<_, LdmError>(Tensor::vector(v[0].diagonal()))
        })?;
        let bw: BackwardFn = Box::new(|ctx| vec![Some(Tensor::diag(ctx.grad.data()))]);
        Ok(self.tape.push(value, vec![self.id], Some(bw)))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[&Var]) -> Result<Var> {
        let tape = parts
            .first()
            .ok_or_else(|| LdmError::DegenerateBatch("concat of nothing".into()))?
            .tape
            .clone();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = tape.with_values(&ids, Tensor::hcat)?;
        let bw: BackwardFn = Box::new(|ctx| {
            let r = ctx.grad.shape()[0];
            let total = ctx.grad.shape()[1];
            let g = ctx.grad.data();
            let mut off = 0;
            let mut out = Vec::with_capacity(ctx.inputs.len());
            for (k, inp) in ctx.inputs.iter().enumerate() {
                let c = inp.shape()[1];
                if ctx.needs[k] {
                    let mut d = Vec::with_capacity(r * c);
                    for i in 0..r {
                        d.extend_from_slice(&g[i * total + off..i * total + off + c]);
                    }
                    out.push(Some(Tensor::matrix(r, c, d).expect("slice")));
                } else {
                    out.push(None);
                }
                off += c;
            }
            out
        });
        for p in parts {
            tape.check_same(p);
        }
        Ok(tape.push(value, ids, Some(bw)))
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(parts: &[&Var]) -> Result<Var> {
        let tape = parts
            .first()
            .ok_or_else(|| LdmError::DegenerateBatch("concat of nothing".into()))?
            .tape
            .clone();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = tape.with_values(&ids, Tensor::vcat)?;
        let bw: BackwardFn = Box::new(|ctx| {
            let g = ctx.grad.data();
            let mut off = 0;
            let mut out = Vec::with_capacity(ctx.inputs.len());
            for (k, inp) in ctx.inputs.iter().enumerate() {
                let n = inp.numel();
                out.push(ctx.needs[k].then(|| {
                    Tensor::new(inp.shape().to_vec(), g[off..off + n].to_vec()).expect("slice")
                }));
                off += n;
            }
            out
        });
        for p in parts {
            tape.check_same(p);
        }
        Ok(tape.push(value, ids, Some(bw)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var> {
        let value = self.tape.with_values(&[self.id], |v| {
            let (r, c) = v[0].require_matrix("slice_cols")?;
            if start > end || end > c {
                return Err(shape_err("slice_cols", v[0].shape(), &[start, end]));
            }
            let w = end - start;
            let mut d = Vec::with_capacity(r * w);
            for i in 0..r {
                d.extend_from_slice(&v[0].row(i)[start..end]);
            }
            Tensor::matrix(r, w, d)
        })?;
        let bw: BackwardFn = Box::new(move |ctx| {
            let (r, c) = (ctx.inputs[0].shape()[0], ctx.inputs[0].shape()[1]);
            let w = end - start;
            let g = ctx.grad.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                out[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            vec![Some(Tensor::matrix(r, c, out).expect("shape"))]
        });
        Ok(self.tape.push(value, vec![self.id], Some(bw)))
    }

    /// Rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var> {
        let value = self.tape.with_values(&[self.id], |v| {
            let (r, _) = v[0].require_matrix("gather_rows")?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
                return Err(shape_err("gather_rows", v[0].shape(), &[bad]));
            }
            Ok(v[0].select_rows(idx))
        })?;
        let idx = idx.to_vec();
        let bw: BackwardFn = Box::new(move |ctx| {
            let c = ctx.inputs[0].shape()[1];
            let mut out = Tensor::zeros(ctx.inputs[0].shape());
            let g = ctx.grad.data();
            let od = out.data_mut();
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    od[i * c + j] += g[k * c + j];
                }
            }
            vec![Some(out)]
        });
        Ok(self.tape.push(value, vec![self.id], Some(bw)))
    }

    /// Sign and differentiable `log|det A|`; the pullback of the log-determinant is `A⁻ᵀ`.
    pub fn slogdet(&self) -> Result<(f64, Var)> {
        let lu = self.tape.with_values(&[self.id], |v| Lu::factor(v[0]))?;
        let (sign, logabs) = lu.slogdet();
        let inv_t = lu.inverse()?.transpose()?;
        let bw: BackwardFn = Box::new(move |ctx| vec![Some(inv_t.scale(ctx.grad.data()[0]))]);
        Ok((
            sign,
            self.tape.push(Tensor::scalar(logabs), vec![self.id], Some(bw)),
        ))
    }

    /// Solution `X` of `self · X = b`.
    pub fn solve(&self, b: &Var) -> Result<Var> {
        self.tape.check_same(b);
        let lu = self.tape.with_values(&[self.id], |v| Lu::factor(v[0]))?;
        let value = self.tape.with_values(&[b.id], |v| lu.solve(v[0]))?;
        let bw: BackwardFn = Box::new(move |ctx| {
            let gb = lu.solve_transpose(ctx.grad).expect("factored");
            let ga = ctx.needs[0].then(|| {
                // -gB Xᵀ
                let x = ctx.output;
                let (n, m) = (gb.shape()[0], if x.rank() == 2 { x.shape()[1] } else { 1 });
                let mut d = matmul_nt_raw(gb.data(), x.data(), n, m, n);
                d.iter_mut().for_each(|v| *v = -*v);
                Tensor::matrix(n, n, d).expect("ga")
            });
            vec![ga, ctx.needs[1].then_some(gb)]
        });
        Ok(self.tape.push(value, vec![self.id, b.id], Some(bw)))
    }

    /// Divides each row by its Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Var> {
        let (value, norms) = self.tape.with_values(&[self.id], |v| {
            let (r, c) = v[0].require_matrix("l2_normalize_rows")?;
            let mut out = v[0].clone();
            let mut norms = Vec::with_capacity(r);
            for i in 0..r {
                let row = &mut out.data_mut()[i * c..(i + 1) * c];
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(LdmError::DomainError {
                        op: "l2_normalize_rows",
                        msg: format!("row {i} has zero norm"),
                    });
                }
                row.iter_mut().for_each(|x| *x /= n);
                norms.push(n);
            }
            Ok((out, norms))
        })?;
        let bw: BackwardFn = Box::new(move |ctx| {
            let c = ctx.output.shape()[1];
            let (y, g) = (ctx.output.data(), ctx.grad.data());
            let mut out = vec![0.0; y.len()];
            for (i, n) in norms.iter().enumerate() {
                let s = i * c..(i + 1) * c;
                let dot: f64 = y[s.clone()].iter().zip(&g[s.clone()]).map(|(a, b)| a * b).sum();
                for j in s {
                    out[j] = (g[j] - y[j] * dot) / n;
                }
            }
            vec![Some(Tensor::new(ctx.output.shape().to_vec(), out).expect("shape"))]
        });
        Ok(self.tape.push(value, vec![self.id], Some(bw)))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self) -> Result<Var> {
        let value = self.tape.with_values(&[self.id], |v| {
            let (r, c) = v[0].require_matrix("softmax_rows")?;
            let mut out = v[0].clone();
            for i in 0..r {
                let row = &mut out.data_mut()[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|x| *x = (*x - m).exp());
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            Ok::<_, LdmError>(out)
        })?;
        let bw: BackwardFn = Box::new(|ctx| {
            let c = ctx.output.shape()[1];
            let (y, g) = (ctx.output.data(), ctx.grad.data());
            let mut out = vec![0.0; y.len()];
            for (yr, (gr, or)) in y
                .chunks(c)
                .zip(g.chunks(c).zip(out.chunks_mut(c)))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    or[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(Tensor::new(ctx.output.shape().to_vec(), out).expect("shape"))]
        });
        Ok(self.tape.push(value, vec![self.id], Some(bw)))
    }

    /// Row-wise `log Σ_j exp(x_ij)`: `[r, c] -> [r]`.
    pub fn logsumexp_rows(&self) -> Result<Var> {
        let (value, soft) = self.tape.with_values(&[self.id], |v| {
            let (r, c) = v[0].require_matrix("logsumexp_rows")?;
            let d = v[0].data();
            let mut lse = Vec::with_capacity(r);
            let mut soft = vec![0.0; r * c];
            for i in 0..r {
                let row = &d[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
                let l = m + s.ln();
                for j in 0..c {
                    soft[i * c + j] = (row[j] - l).exp();
                }
                lse.push(l);
            }
            Ok::<_, LdmError>((Tensor::vector(lse), soft))
        })?;
        let bw: BackwardFn = Box::new(move |ctx| {
            let c = ctx.inputs[0].shape()[1];
            let g = ctx.grad.data();
            let out: Vec<f64> = soft
                .iter()
                .enumerate()
                .map(|(k, s)| s * g[k / c])
                .collect();
            vec![Some(
                Tensor::new(ctx.inputs[0].shape().to_vec(), out).expect("shape"),
            )]
        });
        Ok(self.tape.push(value, vec![self.id], Some(bw)))
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
