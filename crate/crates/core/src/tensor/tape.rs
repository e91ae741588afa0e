//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, so the recorded graph is acyclic by construction. [`Tape::backward`]
//! walks it in reverse with freshly zeroed adjoints on every call.
//!
//! Constants take part in the forward computation but never receive or pass
//! on gradient; nodes whose ancestors are all constants are skipped entirely
//! during the backward sweep.

use std::cell::RefCell;
use std::rc::Rc;

use super::ops::{self, ConvGeometry};
use super::{check_clip, check_guard, guard_denominator, Result, Tensor, TensorError};

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div { num: usize, den: usize, guard: f64 },
    Scale(usize, f64),
    Abs(usize),
    Sign(usize),
    Relu(usize),
    Clip { x: usize, lo: f64, hi: f64 },
    MatMul(usize, usize),
    Conv2d { input: usize, kernel: usize, geometry: ConvGeometry },
    BiasAdd { x: usize, bias: usize },
    Reshape(usize),
    Sum(usize),
    L2NormSquared(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A value excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            index: nodes.len() - 1,
        }
    }

    fn value(&self, index: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[index].value)
    }

    fn requires_grad(&self, index: usize) -> bool {
        self.nodes.borrow()[index].requires_grad
    }

    fn owns(&self, var: &Var<'_>) -> bool {
        std::ptr::eq(self, var.tape)
    }

    /// Gradients of the scalar `output` with respect to each of `wanted`.
    ///
    /// Leaves that do not influence `output` get a zero tensor.
    pub fn backward(&self, output: Var<'_>, wanted: &[Var<'_>]) -> Result<Vec<Tensor>> {
        if !self.owns(&output) {
            return Err(TensorError::NotOnTape(output.index));
        }
        let nodes = self.nodes.borrow();
        for w in wanted {
            if !self.owns(w) || !matches!(nodes[w.index].op, Op::Leaf) {
                return Err(TensorError::NotOnTape(w.index));
            }
        }
        let out_value = &nodes[output.index].value;
        if !out_value.is_scalar() {
            return Err(TensorError::NonScalarOutput(out_value.shape().to_vec()));
        }

        let mut adjoints: Vec<Option<Tensor>> = vec![None; output.index + 1];
        adjoints[output.index] = Some(Tensor::full(out_value.shape(), 1.0));

        for i in (0..=output.index).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(grad) = adjoints[i].take() else {
                continue;
            };
            for (parent, contribution) in node_vjp(&nodes, node, &grad)? {
                if !nodes[parent].requires_grad {
                    continue;
                }
                adjoints[parent] = Some(match adjoints[parent].take() {
                    Some(acc) => acc.add(&contribution)?,
                    None => contribution,
                });
            }
        }

        Ok(wanted
            .iter()
            .map(|w| {
                adjoints
                    .get(w.index)
                    .and_then(|a| a.clone())
                    .unwrap_or_else(|| Tensor::zeros(nodes[w.index].value.shape()))
            })
            .collect())
    }
}

fn elementwise_grad(grad: &Tensor, x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = grad.data().iter().zip(x.data()).map(|(&g, &a)| g * f(a)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Vector-Jacobian products of one node, as (parent index, contribution) pairs.
fn node_vjp(nodes: &[Node], node: &Node, grad: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let wants = |i: usize| nodes[i].requires_grad;
    Ok(match node.op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::Add(a, b) => vec![(a, grad.clone()), (b, grad.clone())],
        Op::Sub(a, b) => vec![(a, grad.clone()), (b, grad.scale(-1.0)?)],
        Op::Mul(a, b) => {
            let mut out = Vec::with_capacity(2);
            if wants(a) {
                out.push((a, grad.mul(val(b))?));
            }
            if wants(b) {
                out.push((b, grad.mul(val(a))?));
            }
            out
        }
        Op::Div { num, den, guard } => {
            let (n, d) = (val(num), val(den));
            let mut out = Vec::with_capacity(2);
            if wants(num) {
                let data = grad
                    .data()
                    .iter()
                    .zip(d.data())
                    .map(|(&g, &b)| g / guard_denominator(b, guard))
                    .collect();
                out.push((num, Tensor::checked("div", n.shape().to_vec(), data)?));
            }
            if wants(den) {
                // The guarded region is flat in the denominator.
                let data = grad
                    .data()
                    .iter()
                    .zip(n.data().iter().zip(d.data()))
                    .map(|(&g, (&a, &b))| if b.abs() >= guard { -g * a / (b * b) } else { 0.0 })
                    .collect();
                out.push((den, Tensor::checked("div", d.shape().to_vec(), data)?));
            }
            out
        }
        Op::Scale(a, c) => vec![(a, grad.scale(c)?)],
        Op::Abs(a) => vec![(a, elementwise_grad(grad, val(a), super::sign))],
        Op::Sign(a) => vec![(a, Tensor::zeros(val(a).shape()))],
        Op::Relu(a) => vec![(a, elementwise_grad(grad, val(a), |v| if v > 0.0 { 1.0 } else { 0.0 }))],
        Op::Clip { x, lo, hi } => vec![(
            x,
            elementwise_grad(grad, val(x), |v| if v > lo && v < hi { 1.0 } else { 0.0 }),
        )],
        Op::MatMul(a, b) => {
            let mut out = Vec::with_capacity(2);
            if wants(a) {
                out.push((a, ops::matmul_rhs_transposed(grad, val(b))?));
            }
            if wants(b) {
                out.push((b, ops::matmul_lhs_transposed(val(a), grad)?));
            }
            out
        }
        Op::Conv2d { input, kernel, geometry } => {
            let mut out = Vec::with_capacity(2);
            if wants(input) {
                out.push((input, ops::conv2d_grad_input(grad, val(kernel), &geometry)?));
            }
            if wants(kernel) {
                out.push((kernel, ops::conv2d_grad_kernel(grad, val(input), &geometry)?));
            }
            out
        }
        Op::BiasAdd { x, bias } => {
            let mut out = vec![(x, grad.clone())];
            if wants(bias) {
                let channels = val(bias).len();
                let inner: usize = grad.shape()[2..].iter().product();
                let mut db = vec![0.0; channels];
                for (i, g) in grad.data().iter().enumerate() {
                    db[(i / inner) % channels] += g;
                }
                out.push((bias, Tensor::checked("bias_add", vec![channels], db)?));
            }
            out
        }
        Op::Reshape(a) => vec![(a, grad.reshape(val(a).shape())?)],
        Op::Sum(a) => {
            let g = grad.data()[0];
            vec![(a, Tensor::full(val(a).shape(), g))]
        }
        Op::L2NormSquared(a) => {
            let g = grad.data()[0];
            vec![(a, val(a).scale(2.0 * g)?)]
        }
        Op::SoftmaxCrossEntropy { logits, ref labels, ref probs } => {
            let g = grad.data()[0];
            let shape = val(logits).shape().to_vec();
            let classes = *shape.last().expect("logits have rank >= 1");
            let scale = g / labels.len() as f64;
            let mut data: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (row, &label) in labels.iter().enumerate() {
                data[row * classes + label] -= scale;
            }
            vec![(logits, Tensor::checked("softmax_cross_entropy", shape, data)?)]
        }
    })
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn value(&self) -> Tensor {
        (*self.tape.value(self.index)).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.index).shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if self.tape.owns(other) {
            Ok(())
        } else {
            Err(TensorError::NotOnTape(other.index))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires_grad(self.index);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'_>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires_grad(self.index) || self.tape.requires_grad(other.index);
        self.tape.push(value, op, rg)
    }

    pub fn add(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.tape.value(self.index).add(&self.tape.value(other.index))?;
        Ok(self.binary(other, v, Op::Add(self.index, other.index)))
    }

    pub fn sub(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.tape.value(self.index).sub(&self.tape.value(other.index))?;
        Ok(self.binary(other, v, Op::Sub(self.index, other.index)))
    }

    pub fn mul(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.tape.value(self.index).mul(&self.tape.value(other.index))?;
        Ok(self.binary(other, v, Op::Mul(self.index, other.index)))
    }

    /// `self / guard(other)`; see [`Tensor::div_guarded`].
    pub fn div_guarded(&self, other: &Var<'_>, guard: f64) -> Result<Var<'t>> {
        self.same_tape(other)?;
        check_guard("div", guard)?;
        let v = self
            .tape
            .value(self.index)
            .div_guarded(&self.tape.value(other.index), guard)?;
        Ok(self.binary(
            other,
            v,
            Op::Div {
                num: self.index,
                den: other.index,
                guard,
            },
        ))
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        let v = self.tape.value(self.index).scale(factor)?;
        Ok(self.unary(v, Op::Scale(self.index, factor)))
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        let v = self.tape.value(self.index).abs()?;
        Ok(self.unary(v, Op::Abs(self.index)))
    }

    /// Elementwise sign; its derivative is zero everywhere.
    pub fn sign(&self) -> Result<Var<'t>> {
        let v = self.tape.value(self.index).sign()?;
        Ok(self.unary(v, Op::Sign(self.index)))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let v = self.tape.value(self.index).relu()?;
        Ok(self.unary(v, Op::Relu(self.index)))
    }

    pub fn clip(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        check_clip(lo, hi)?;
        let v = self.tape.value(self.index).clip(lo, hi)?;
        Ok(self.unary(v, Op::Clip { x: self.index, lo, hi }))
    }

    pub fn matmul(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = ops::matmul(&self.tape.value(self.index), &self.tape.value(other.index))?;
        Ok(self.binary(other, v, Op::MatMul(self.index, other.index)))
    }

    /// Valid cross-correlation of this NCHW input with an OIHW `kernel`.
    pub fn conv2d(&self, kernel: &Var<'_>, stride: usize) -> Result<Var<'t>> {
        self.same_tape(kernel)?;
        let (x, k) = (self.tape.value(self.index), self.tape.value(kernel.index));
        let geometry = ConvGeometry::new(&x, &k, stride)?;
        let v = ops::conv2d(&x, &k, stride)?;
        Ok(self.binary(
            kernel,
            v,
            Op::Conv2d {
                input: self.index,
                kernel: kernel.index,
                geometry,
            },
        ))
    }

    /// Adds a bias along axis 1: one value per column of a `[rows, n]`
    /// matrix, or per channel of an NCHW tensor.
    pub fn bias_add(&self, bias: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        let (x, b) = (self.tape.value(self.index), self.tape.value(bias.index));
        if x.rank() < 2 || b.rank() != 1 || x.shape()[1] != b.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let inner: usize = x.shape()[2..].iter().product();
        let channels = b.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + b.data()[(i / inner) % channels])
            .collect();
        let v = Tensor::checked("bias_add", x.shape().to_vec(), data)?;
        Ok(self.binary(bias, v, Op::BiasAdd { x: self.index, bias: bias.index }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.tape.value(self.index).reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.index)))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let v = self.tape.value(self.index).sum(None)?;
        Ok(self.unary(v, Op::Sum(self.index)))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.tape.value(self.index).len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn l2_norm_squared(&self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.tape.value(self.index).l2_norm_squared()?)?;
        Ok(self.unary(v, Op::L2NormSquared(self.index)))
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits (or one logits
    /// vector) against one label per row.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let logits = self.tape.value(self.index);
        let (rows, classes) = match *logits.shape() {
            [k] => (1, k),
            [r, k] => (r, k),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "softmax_cross_entropy",
                    reason: format!("expected rank 1 or 2 logits, got {:?}", logits.shape()),
                })
            }
        };
        if labels.len() != rows {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                reason: format!("{} labels for {rows} rows", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                reason: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let mut probs = Vec::with_capacity(logits.len());
        let mut total = 0.0;
        for (row, &label) in logits.data().chunks(classes).zip(labels) {
            probs.extend(super::softmax(row));
            total += super::cross_entropy(row, label);
        }
        let v = Tensor::checked("softmax_cross_entropy", Vec::new(), vec![total / rows as f64])?;
        Ok(self.unary(
            v,
            Op::SoftmaxCrossEntropy {
                logits: self.index,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(vec1(&[1.0, -2.0]));
        let y = x.mul(&x).unwrap().sum().unwrap();
        let g = tape.backward(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, -4.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(vec1(&[1.0, 2.0]));
        let unused = tape.leaf(vec1(&[3.0, 4.0, 5.0]));
        let y = x.l2_norm_squared().unwrap();
        let g = tape.backward(y, &[unused]).unwrap();
        assert_eq!(g[0], Tensor::zeros(&[3]));
    }

    #[test]
    fn constants_block_gradient() {
        let tape = Tape::new();
        let c = tape.constant(vec1(&[3.0]));
        let x = tape.leaf(vec1(&[2.0]));
        let y = c.mul(&x).unwrap().sum().unwrap();
        assert_eq!(tape.backward(y, &[x]).unwrap()[0].data(), &[3.0]);
        assert!(matches!(tape.backward(y, &[c]), Err(TensorError::NotOnTape(_))));
    }

    #[test]
    fn non_scalar_output_and_foreign_leaf_are_errors() {
        let tape = Tape::new();
        let other = Tape::new();
        let x = tape.leaf(vec1(&[1.0, 2.0]));
        let z = other.leaf(vec1(&[1.0]));
        assert!(matches!(
            tape.backward(x, &[x]),
            Err(TensorError::NonScalarOutput(_))
        ));
        let y = x.sum().unwrap();
        assert!(matches!(tape.backward(y, &[z]), Err(TensorError::NotOnTape(_))));
        assert!(x.add(&z).is_err());
    }

    #[test]
    fn adjoints_reset_between_passes() {
        let tape = Tape::new();
        let x = tape.leaf(vec1(&[1.5]));
        let y = x.mul(&x).unwrap().sum().unwrap();
        let first = tape.backward(y, &[x]).unwrap();
        let second = tape.backward(y, &[x]).unwrap();
        assert_eq!(first, second);
        assert_eq!(first[0].data(), &[3.0]);
    }

    #[test]
    fn sign_and_guarded_region_are_flat() {
        let tape = Tape::new();
        let x = tape.leaf(vec1(&[0.3, 1e-12]));
        let one = tape.constant(vec1(&[1.0, 1.0]));
        let y = x.sign().unwrap().add(&one.div_guarded(&x, 1e-8).unwrap()).unwrap().sum().unwrap();
        let g = tape.backward(y, &[x]).unwrap();
        assert!((g[0].data()[0] + 1.0 / 0.09).abs() < 1e-9);
        assert_eq!(g[0].data()[1], 0.0);
    }

    #[test]
    fn batched_cross_entropy_gradient() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap());
        let loss = z.softmax_cross_entropy(&[0, 1]).unwrap();
        assert!((loss.value().item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let g = tape.backward(loss, &[z]).unwrap();
        assert_eq!(g[0].data(), &[-0.25, 0.25, 0.25, -0.25]);
    }
}
