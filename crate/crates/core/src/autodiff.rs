//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s during a
//! forward evaluation. [`Tape::backward`] then walks the record once, in
//! reverse, and returns a [`Gradients`] table. Nodes that cannot influence a
//! trainable leaf are never visited, so inference on a tape built only from
//! constants costs nothing extra.
//!
//! Trainable values live outside the tape as [`Parameter`]s; one tape is one
//! forward/backward episode. Several tapes may run on different threads
//! against the same (read-only) parameters.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// A named trainable tensor plus its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.dims());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Adds the gradient recorded for `var` (which must be this parameter's
    /// leaf on that tape) into the accumulator.
    pub fn accumulate(&mut self, grads: &Gradients, var: Var<'_>) {
        if let Some(g) = grads.get(var) {
            // dims are guaranteed equal: the leaf was created from `self.value`
            for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Relu(usize),
    Exp(usize),
    Sum(usize),
    Mean(usize),
    Broadcast(usize),
    Conv2d(usize, usize, usize),
    AvgPool2(usize),
    Upsample2(usize),
    Concat(usize, usize),
    FrameSum(usize),
    FrameRepeat(usize),
    Gather(usize, Vec<usize>),
    Reshape(usize),
    Opaque(String, Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value().dims())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
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
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// A value no gradient flows into.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf holding a copy of `p.value`.
    pub fn param(&self, p: &Parameter) -> Var<'_> {
        self.push(p.value.clone(), Op::Leaf, true)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a non-differentiable computation. Backward fails with
    /// [`Error::UnsupportedOp`] if any gradient has to pass through it.
    pub fn opaque<'t>(&'t self, name: &str, value: Tensor, inputs: &[Var<'t>]) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.requires(&ids);
        self.push(value, Op::Opaque(name.to_owned(), ids), rg)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                root.value.dims()
            )));
        }
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::filled(root.value.dims(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &*nodes[i].value;
            let mut contributions: Vec<(usize, Tensor)> = Vec::new();
            let mut send = |i: usize, t: Tensor| -> Result<()> {
                if nodes[i].requires_grad {
                    contributions.push((i, t));
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf => {
                    // leaves keep their gradient
                    grads[id] = Some(g);
                    continue;
                }
                &Op::Add(a, b) => {
                    send(a, g.clone())?;
                    send(b, g)?;
                }
                &Op::Sub(a, b) => {
                    if needs(b) {
                        send(b, g.scale(-1.0))?;
                    }
                    send(a, g)?;
                }
                &Op::Mul(a, b) => {
                    if needs(a) {
                        send(a, g.mul(val(b))?)?;
                    }
                    if needs(b) {
                        send(b, g.mul(val(a))?)?;
                    }
                }
                &Op::Div(a, b) => {
                    let gb = g.div(val(b))?;
                    if needs(b) {
                        // d(a/b)/db = -(a/b)/b
                        send(b, gb.mul(&node.value)?.scale(-1.0))?;
                    }
                    send(a, gb)?;
                }
                &Op::Neg(a) => send(a, g.scale(-1.0))?,
                &Op::Scale(a, s) => send(a, g.scale(s))?,
                &Op::ScaleBy(t, s) => {
                    if needs(s) {
                        send(s, Tensor::scalar(g.dot(val(t))?))?;
                    }
                    if needs(t) {
                        send(t, g.scale(val(s).item()))?;
                    }
                }
                &Op::Relu(a) => {
                    send(a, g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 })?)?;
                }
                &Op::Exp(a) => send(a, g.mul(&node.value)?)?,
                &Op::Sum(a) => send(a, Tensor::filled(val(a).dims(), g.item()))?,
                &Op::Mean(a) => {
                    let n = val(a).len() as f64;
                    send(a, Tensor::filled(val(a).dims(), g.item() / n))?;
                }
                &Op::Broadcast(a) => send(a, Tensor::scalar(g.sum()))?,
                &Op::Conv2d(x, k, b) => {
                    if needs(x) {
                        send(x, tensor::conv2d_grad_input(&g, val(k))?)?;
                    }
                    if needs(k) || needs(b) {
                        let (gk, gb) = tensor::conv2d_grad_params(&g, val(x), val(k).dims())?;
                        send(k, gk)?;
                        send(b, gb.reshape(val(b).dims())?)?;
                    }
                }
                &Op::AvgPool2(a) => send(a, tensor::avg_pool2_grad(&g)?)?,
                &Op::Upsample2(a) => send(a, tensor::upsample2_grad(&g)?)?,
                &Op::Concat(a, b) => {
                    let c1 = val(a).frames();
                    if val(b).frames() == 0 {
                        send(a, g)?;
                    } else {
                        let (ga, gb) = tensor::split_channels(&g, c1)?;
                        send(a, ga)?;
                        send(b, gb)?;
                    }
                }
                &Op::FrameSum(a) => send(a, tensor::frame_repeat(&g, val(a).frames())?)?,
                &Op::FrameRepeat(a) => send(a, tensor::frame_sum(&g)?)?,
                Op::Gather(a, index) => {
                    let frames = val(*a).frames();
                    send(*a, tensor::gather_frames_grad(&g, index, frames)?)?;
                }
                &Op::Reshape(a) => send(a, g.reshape(val(a).dims())?)?,
                Op::Opaque(name, inputs) => {
                    if inputs.iter().any(|&i| needs(i)) {
                        return Err(Error::UnsupportedOp(name.clone()));
                    }
                }
            }
            for (i, t) in contributions {
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&t)?,
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`]: one optional gradient per tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a trainable leaf, `None` when the loss
    /// does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but materializes zeros for unreached leaves.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().dims()))
    }
}

macro_rules! binary {
    ($name:ident, $op:ident, $kernel:ident) => {
        pub fn $name(self, other: Var<'t>) -> Result<Var<'t>> {
            let v = self.value().$kernel(&other.value())?;
            Ok(self.push(v, Op::$op(self.id, other.id), &[self.id, other.id]))
        }
    };
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.value().dims().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(&[self.id])
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let rg = self.tape.requires(inputs);
        self.tape.push(value, op, rg)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.push(value, op, &[self.id])
    }

    /// Copy of this value with no gradient connection to its history.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    binary!(add, Add, add);
    binary!(sub, Sub, sub);
    binary!(mul, Mul, mul);
    binary!(div, Div, div);

    pub fn neg(self) -> Var<'t> {
        self.unary(self.value().scale(-1.0), Op::Neg(self.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(self.value().scale(s), Op::Scale(self.id, s))
    }

    /// Multiplies every element by the single-element `s`.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.len() != 1 {
            return Err(Error::shape(format!(
                "scale_by needs a scalar, got {:?}",
                sv.dims()
            )));
        }
        let v = self.value().scale(sv.item());
        Ok(self.push(v, Op::ScaleBy(self.id, s.id), &[self.id, s.id]))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(self.value().map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Tensor::scalar(self.value().sum()), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Tensor::scalar(self.value().mean()), Op::Mean(self.id))
    }

    /// Fills a tensor of `dims` with this single-element value.
    pub fn broadcast(self, dims: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.len() != 1 {
            return Err(Error::shape(format!(
                "broadcast needs a scalar, got {:?}",
                v.dims()
            )));
        }
        Ok(self.unary(Tensor::filled(dims, v.item()), Op::Broadcast(self.id)))
    }

    pub fn conv2d(self, kernel: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let v = tensor::conv2d(&self.value(), &kernel.value(), &bias.value())?;
        let ids = [self.id, kernel.id, bias.id];
        Ok(self.push(v, Op::Conv2d(self.id, kernel.id, bias.id), &ids))
    }

    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let v = tensor::avg_pool2(&self.value())?;
        Ok(self.unary(v, Op::AvgPool2(self.id)))
    }

    pub fn upsample2(self) -> Result<Var<'t>> {
        let v = tensor::upsample2(&self.value())?;
        Ok(self.unary(v, Op::Upsample2(self.id)))
    }

    pub fn concat(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = tensor::concat_channels(&self.value(), &other.value())?;
        Ok(self.push(v, Op::Concat(self.id, other.id), &[self.id, other.id]))
    }

    /// `[B, H, W] -> [H, W]`
    pub fn frame_sum(self) -> Result<Var<'t>> {
        let v = tensor::frame_sum(&self.value())?;
        Ok(self.unary(v, Op::FrameSum(self.id)))
    }

    /// `[H, W] -> [frames, H, W]`
    pub fn frame_repeat(self, frames: usize) -> Result<Var<'t>> {
        let v = tensor::frame_repeat(&self.value(), frames)?;
        Ok(self.unary(v, Op::FrameRepeat(self.id)))
    }

    pub fn gather_frames(self, index: &[usize]) -> Result<Var<'t>> {
        let v = tensor::gather_frames(&self.value(), index)?;
        Ok(self.unary(v, Op::Gather(self.id, index.to_vec())))
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(dims)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(dims: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.uniform() * 2.0 - 1.0)
    }

    #[test]
    fn quadratic_gradient() {
        let mut rng = Rng::new(1);
        let p = Parameter::new("p", random(&[3, 4], &mut rng));
        let tape = Tape::new();
        let v = tape.param(&p);
        let loss = v.mul(v).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(v), p.value.scale(2.0));
    }

    #[test]
    fn independent_parameter_gets_zero() {
        let tape = Tape::new();
        let p = Parameter::new("p", Tensor::filled(&[2], 1.0));
        let q = Parameter::new("q", Tensor::filled(&[2], 3.0));
        let (vp, vq) = (tape.param(&p), tape.param(&q));
        let loss = vq.exp().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(vp).is_none());
        assert_eq!(g.wrt(vp), Tensor::zeros(&[2]));
        assert!((g.wrt(vq).data()[0] - 3f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let p = Parameter::new("p", Tensor::filled(&[2], 1.0));
        let v = tape.param(&p);
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_and_exp_rules() {
        let tape = Tape::new();
        let p = Parameter::new("p", Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let v = tape.param(&p);
        let g = tape.backward(v.relu().sum()).unwrap();
        // subgradient at 0 is 0
        assert_eq!(g.wrt(v).data(), &[0.0, 0.0, 1.0]);

        let tape = Tape::new();
        let v = tape.param(&p);
        let g = tape.backward(v.exp().sum()).unwrap();
        let want: Vec<f64> = p.value.data().iter().map(|x| x.exp()).collect();
        assert_eq!(g.wrt(v).data(), want.as_slice());
    }

    #[test]
    fn concat_splits_gradient() {
        let mut rng = Rng::new(2);
        let a = Parameter::new("a", random(&[2, 2, 2], &mut rng));
        let b = Parameter::new("b", random(&[3, 2, 2], &mut rng));
        let w = random(&[5, 2, 2], &mut rng);
        let tape = Tape::new();
        let (va, vb) = (tape.param(&a), tape.param(&b));
        let loss = va.concat(vb).unwrap().mul(tape.constant(w.clone())).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        let (wa, wb) = tensor::split_channels(&w, 2).unwrap();
        assert_eq!(g.wrt(va), wa);
        assert_eq!(g.wrt(vb), wb);
    }

    #[test]
    fn opaque_op_fails_loudly() {
        let tape = Tape::new();
        let p = Parameter::new("p", Tensor::filled(&[2], 0.5));
        let v = tape.param(&p);
        let rounded = tape.opaque("round", v.value().map(f64::round), &[v]);
        let err = tape.backward(rounded.sum()).err().unwrap();
        assert!(matches!(err, Error::UnsupportedOp(ref n) if n == "round"));

        // but a constant-only opaque op is fine
        let c = tape.constant(Tensor::filled(&[2], 0.5));
        let r = tape.opaque("round", c.value().map(f64::round), &[c]);
        let loss = r.mul(v).unwrap().sum();
        assert!(tape.backward(loss).is_ok());
    }

    #[test]
    fn detached_path_carries_no_gradient() {
        let tape = Tape::new();
        let p = Parameter::new("p", Tensor::filled(&[2], 0.5));
        let v = tape.param(&p);
        let d = v.mul(v).unwrap().detach();
        let g = tape.backward(d.sum()).unwrap();
        assert!(g.get(v).is_none());
    }

    #[test]
    fn accumulation_is_additive() {
        let mut rng = Rng::new(3);
        let mut p = Parameter::new("p", random(&[4], &mut rng));
        for _ in 0..2 {
            let tape = Tape::new();
            let v = tape.param(&p);
            let g = tape.backward(v.mul(v).unwrap().sum()).unwrap();
            p.accumulate(&g, v);
        }
        assert_eq!(p.grad, p.value.scale(4.0));
    }

    #[test]
    fn conv_relu_mse_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let x = random(&[2, 5, 5], &mut rng);
        let target = random(&[3, 5, 5], &mut rng);
        let mut params = vec![
            Parameter::new("k", random(&[3, 2, 3, 3], &mut rng)),
            Parameter::new("b", random(&[3], &mut rng).scale(0.1)),
        ];
        let loss_of = |params: &[Parameter]| -> (f64, Vec<Tensor>) {
            let tape = Tape::new();
            let k = tape.param(&params[0]);
            let b = tape.param(&params[1]);
            let out = tape.constant(x.clone()).conv2d(k, b).unwrap().relu();
            let loss = out.sub(tape.constant(target.clone())).unwrap();
            let loss = loss.mul(loss).unwrap().mean();
            let g = tape.backward(loss).unwrap();
            (loss.value().item(), vec![g.wrt(k), g.wrt(b)])
        };
        let (_, analytic) = loss_of(&params);
        let h = 1e-5;
        for pi in 0..params.len() {
            for e in 0..params[pi].value.len() {
                let orig = params[pi].value.data()[e];
                params[pi].value.data_mut()[e] = orig + h;
                let (lp, _) = loss_of(&params);
                params[pi].value.data_mut()[e] = orig - h;
                let (lm, _) = loss_of(&params);
                params[pi].value.data_mut()[e] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a = analytic[pi].data()[e];
                let tol = (1e-4 * a.abs().max(fd.abs())).max(1e-7);
                assert!((a - fd).abs() <= tol, "{}[{e}]: {a} vs {fd}", params[pi].name);
            }
        }
    }
}
