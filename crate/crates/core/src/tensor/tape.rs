//! Reverse-mode differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so every node's inputs have
//! smaller indices than the node itself and a single reverse sweep is a
//! valid topological traversal.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeometry};
use super::{Element, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: T,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeometry,
    },
    ChannelBias(usize, usize),
    Bilinear(usize),
    ConcatRows(Vec<usize>),
    SliceAxis0 {
        src: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    Clamp {
        src: usize,
        lo: T,
        hi: T,
    },
    Ln(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Records tensor operations for a single forward pass.
///
/// A tape is confined to one thread. With recording disabled
/// ([`Tape::inference`]) the same forward code runs, but no backward
/// information is kept and [`Tape::gradients`] refuses to run.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    recording: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let op = if self.recording { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            param: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// A constant input; gradients can still be read for it via [`Gradients::wrt`].
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.push("constant", value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node, so gradients from every use accumulate.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Result<Var<'_, T>> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Ok(Var {
                tape: self,
                id: node,
            });
        }
        let var = self.push("param", store.value(id).clone(), Op::Leaf)?;
        self.nodes.borrow_mut()[var.id].param = Some(id);
        self.params.borrow_mut().insert(id, var.id);
        Ok(var)
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let values: Vec<_> = parts.iter().map(|p| self.value_of(p.id)).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat_rows(&refs)?;
        self.push(
            "concat_rows",
            out,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::contract("gradients requested from a non-recording tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape().to_vec()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| nodes[i].value.as_ref();
            let mut contributions: Vec<(usize, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    contributions.push((*a, kernels::matmul_t(&g, false, val(*b), true)?));
                    contributions.push((*b, kernels::matmul_t(val(*a), true, &g, false)?));
                }
                Op::Transpose(a) => contributions.push((*a, kernels::transpose(&g)?)),
                Op::Reshape(a) => contributions.push((*a, g.reshape(val(*a).shape().to_vec())?)),
                Op::Add(a, b) => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g.clone()));
                }
                Op::Sub(a, b) => {
                    contributions.push((*b, g.map(|v| -v)));
                    contributions.push((*a, g.clone()));
                }
                Op::Mul(a, b) => {
                    contributions.push((*a, kernels::zip_with("mul", &g, val(*b), |x, y| x * y)?));
                    contributions.push((*b, kernels::zip_with("mul", &g, val(*a), |x, y| x * y)?));
                }
                Op::Scale(a, s) => contributions.push((*a, g.map(|v| v * *s))),
                Op::AddScalar(a) => contributions.push((*a, g.clone())),
                Op::Relu(a) => contributions.push((
                    *a,
                    kernels::zip_with("relu", &g, val(*a), |d, x| {
                        if x > T::zero() {
                            d
                        } else {
                            T::zero()
                        }
                    })?,
                )),
                Op::SoftmaxRows(a) => {
                    contributions.push((*a, kernels::softmax_rows_backward(&node.value, &g)))
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let lg = kernels::layer_norm_backward(val(*x), val(*gamma), *eps, &g);
                    contributions.push((*x, lg.dx));
                    contributions.push((*gamma, lg.dgamma));
                    contributions.push((*beta, lg.dbeta));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    geom,
                } => {
                    let (dx, dk) = kernels::conv2d_backward(val(*input), val(*kernel), geom, &g);
                    contributions.push((*input, dx));
                    contributions.push((*kernel, dk));
                }
                Op::ChannelBias(x, b) => {
                    let plane = g.shape()[1] * g.shape()[2];
                    let db: Vec<T> = g.data().chunks(plane).map(|c| c.iter().copied().sum()).collect();
                    contributions.push((*b, Tensor::from_parts(val(*b).shape().to_vec(), db)));
                    contributions.push((*x, g.clone()));
                }
                Op::Bilinear(a) => contributions
                    .push((*a, kernels::bilinear_resize_backward(val(*a).shape(), &g))),
                Op::ConcatRows(parts) => {
                    let c = g.shape()[1];
                    let mut row = 0;
                    for &p in parts {
                        let rows = val(p).shape()[0];
                        let slice = g.data()[row * c..(row + rows) * c].to_vec();
                        contributions.push((p, Tensor::from_parts(vec![rows, c], slice)));
                        row += rows;
                    }
                }
                Op::SliceAxis0 { src, start } => {
                    let s = val(*src);
                    let inner: usize = s.shape()[1..].iter().product();
                    let mut full = vec![T::zero(); s.len()];
                    full[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                    contributions.push((*src, Tensor::from_parts(s.shape().to_vec(), full)));
                }
                Op::Sum(a) => {
                    let d = g.data()[0];
                    contributions.push((*a, Tensor::full(val(*a).shape().to_vec(), d)));
                }
                Op::Mean(a) => {
                    let n = T::from_f64(val(*a).len() as f64);
                    let d = g.data()[0] / n;
                    contributions.push((*a, Tensor::full(val(*a).shape().to_vec(), d)));
                }
                Op::Clamp { src, lo, hi } => contributions.push((
                    *src,
                    kernels::zip_with("clamp", &g, val(*src), |d, x| {
                        if x >= *lo && x <= *hi {
                            d
                        } else {
                            T::zero()
                        }
                    })?,
                )),
                Op::Ln(a) => {
                    contributions.push((*a, kernels::zip_with("ln", &g, val(*a), |d, x| d / x)?))
                }
            }
            for (target, delta) in contributions {
                match &mut grads[target] {
                    Some(acc) => {
                        for (x, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *x += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
            grads[id] = Some(g);
        }

        let params = self
            .params
            .borrow()
            .iter()
            .map(|(&pid, &node)| (pid, node))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Accumulates `∂loss/∂value` into every parameter reachable from `loss`.
pub fn backward<T: Element>(
    tape: &Tape<T>,
    loss: Var<'_, T>,
    store: &mut ParamStore<T>,
) -> Result<()> {
    tape.gradients(loss)?.accumulate_into(store)
}

/// Result of a reverse sweep: one optional gradient per tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .get(&id)
            .and_then(|&n| self.grads.get(n))
            .and_then(Option::as_ref)
    }

    /// Parameter gradients in ascending id order.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&pid, &node)| self.grads[node].take().map(|g| (pid, g)))
            .collect();
        out.sort_unstable_by_key(|(pid, _)| pid.index());
        out
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (&pid, &node) in &self.params {
            if let Some(Some(g)) = self.grads.get(node) {
                store.get_mut(pid).accumulate(g)?;
            }
        }
        Ok(())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(
        self,
        name: &'static str,
        f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
        op: Op<T>,
    ) -> Result<Self> {
        let out = f(&self.value())?;
        self.tape.push(name, out, op)
    }

    fn binary(
        self,
        other: Self,
        name: &'static str,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
        op: Op<T>,
    ) -> Result<Self> {
        let out = f(&self.value(), &other.value())?;
        self.tape.push(name, out, op)
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.binary(other, "matmul", kernels::matmul, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Result<Self> {
        self.unary("transpose", kernels::transpose, Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        self.unary("reshape", |x| x.reshape(shape), Op::Reshape(self.id))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(
            other,
            "add",
            |a, b| kernels::zip_with("add", a, b, |x, y| x + y),
            Op::Add(self.id, other.id),
        )
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(
            other,
            "sub",
            |a, b| kernels::zip_with("sub", a, b, |x, y| x - y),
            Op::Sub(self.id, other.id),
        )
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(
            other,
            "mul",
            |a, b| kernels::zip_with("mul", a, b, |x, y| x * y),
            Op::Mul(self.id, other.id),
        )
    }

    pub fn scale(self, s: T) -> Result<Self> {
        self.unary("scale", |x| Ok(x.map(|v| v * s)), Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: T) -> Result<Self> {
        self.unary("add_scalar", |x| Ok(x.map(|v| v + s)), Op::AddScalar(self.id))
    }

    pub fn relu(self) -> Result<Self> {
        self.unary(
            "relu",
            |x| Ok(x.map(|v| v.max(T::zero()))),
            Op::Relu(self.id),
        )
    }

    pub fn softmax_rows(self) -> Result<Self> {
        self.unary("softmax_rows", kernels::softmax_rows, Op::SoftmaxRows(self.id))
    }

    pub fn layer_norm(self, gamma: Self, beta: Self, eps: T) -> Result<Self> {
        let out = kernels::layer_norm(&self.value(), &gamma.value(), &beta.value(), eps)?;
        self.tape.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        )
    }

    pub fn conv2d(self, kernel: Self, stride: usize, padding: usize) -> Result<Self> {
        let (input, k) = (self.value(), kernel.value());
        let geom = ConvGeometry::new(&input, &k, stride, padding)?;
        let out = kernels::conv2d(&input, &k, stride, padding)?;
        self.tape.push(
            "conv2d",
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
        )
    }

    pub fn add_channel_bias(self, bias: Self) -> Result<Self> {
        self.binary(
            bias,
            "add_channel_bias",
            kernels::add_channel_bias,
            Op::ChannelBias(self.id, bias.id),
        )
    }

    pub fn bilinear_resize(self, out_h: usize, out_w: usize) -> Result<Self> {
        self.unary(
            "bilinear_resize",
            |x| kernels::bilinear_resize(x, out_h, out_w),
            Op::Bilinear(self.id),
        )
    }

    /// `len` consecutive entries along the leading axis, starting at `start`.
    pub fn slice_axis0(self, start: usize, len: usize) -> Result<Self> {
        self.unary(
            "slice_axis0",
            |x| {
                let lead = x.shape()[0];
                if len == 0 || start + len > lead {
                    return Err(Error::dim(
                        "slice_axis0",
                        format!("range {start}..{} out of 0..{lead}", start + len),
                    ));
                }
                let inner: usize = x.shape()[1..].iter().product();
                let mut shape = x.shape().to_vec();
                shape[0] = len;
                Ok(Tensor::from_parts(
                    shape,
                    x.data()[start * inner..(start + len) * inner].to_vec(),
                ))
            },
            Op::SliceAxis0 {
                src: self.id,
                start,
            },
        )
    }

    pub fn sum(self) -> Result<Self> {
        self.unary("sum", |x| Ok(Tensor::scalar(x.sum())), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Self> {
        self.unary(
            "mean",
            |x| Ok(Tensor::scalar(x.sum() / T::from_f64(x.len() as f64))),
            Op::Mean(self.id),
        )
    }

    pub fn clamp(self, lo: T, hi: T) -> Result<Self> {
        self.unary(
            "clamp",
            |x| Ok(x.map(|v| v.max(lo).min(hi))),
            Op::Clamp {
                src: self.id,
                lo,
                hi,
            },
        )
    }

    pub fn ln(self) -> Result<Self> {
        self.unary("ln", |x| Ok(x.map(|v| v.ln())), Op::Ln(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_grad, relative_error};

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("x", Tensor::from_fn([2, 3], |i| i as f64));
        let tape = Tape::new();
        let x = tape.param(&store, id).unwrap();
        let loss = x.sum().unwrap();
        backward(&tape, loss, &mut store).unwrap();
        assert_eq!(store.get(id).gradient(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn unreachable_param_gradient_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let used = store.register("used", Tensor::ones([2]));
        let unused = store.register("unused", Tensor::ones([2]));
        let tape = Tape::new();
        let u = tape.param(&store, used).unwrap();
        let _ = tape.param(&store, unused).unwrap();
        let loss = u.sum().unwrap();
        backward(&tape, loss, &mut store).unwrap();
        assert_eq!(store.get(unused).gradient(), &Tensor::zeros([2]));
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([2])).unwrap();
        assert!(matches!(tape.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([2])).unwrap();
        assert!(matches!(x.ln(), Err(Error::NonFinite { op: "ln" })));
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::ones([1])).unwrap();
        assert!(tape.gradients(x.sum().unwrap()).is_err());
    }

    #[test]
    fn softmax_matmul_gradient_matches_finite_differences() {
        let x0 = Tensor::<f64>::from_fn([3, 3], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);
        let w0 = Tensor::<f64>::from_fn([3, 3], |i| ((i * 17) % 7) as f64 / 3.0 - 1.0);
        let mut store = ParamStore::new();
        let xi = store.register("x", x0.clone());
        let wi = store.register("w", w0.clone());
        let tape = Tape::new();
        let x = tape.param(&store, xi).unwrap();
        let w = tape.param(&store, wi).unwrap();
        let loss = x.matmul(w).unwrap().softmax_rows().unwrap().scale(2.0).unwrap();
        // weight the rows so the loss is not constant (softmax rows sum to 1)
        let weights = tape
            .constant(Tensor::from_fn([3, 3], |i| i as f64 * 0.1 + 0.2))
            .unwrap();
        let loss = loss.mul(weights).unwrap().sum().unwrap();
        backward(&tape, loss, &mut store).unwrap();

        let f = |x: &Tensor<f64>| {
            let p = kernels::softmax_rows(&kernels::matmul(x, &w0).unwrap()).unwrap();
            p.data()
                .iter()
                .enumerate()
                .map(|(i, v)| 2.0 * v * (i as f64 * 0.1 + 0.2))
                .sum::<f64>()
        };
        let numeric = finite_diff_grad(f, &x0, 1e-5).unwrap();
        assert!(relative_error(store.get(xi).gradient(), &numeric) < 1e-6);
    }
}
