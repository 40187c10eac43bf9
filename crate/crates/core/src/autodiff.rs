//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node whose
//! inputs already live on the tape, so reverse iteration over node ids is a
//! valid topological order for the backward pass. Graphs are cheap and meant
//! to be rebuilt for every forward evaluation.
//!
//! ```
//! use hqcnf::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(&Tensor::vector(vec![3.0]).requiring_grad());
//! let sq = g.square(x);
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor, optionally carrying an accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(vec![value])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the stored gradient (`+=` semantics).
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::dim(format!(
                "gradient of length {} for tensor of {} values",
                delta.len(),
                self.values.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Exp,
    Log,
    Neg,
    Square,
}

/// Backward rule for an operation implemented outside the graph.
///
/// Given the upstream gradient of the op's output, returns one gradient
/// vector per input, in input order.
pub trait CustomBackward {
    fn backward(&self, upstream: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Tanh(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Square(Var),
    Sum(Var),
    Scale(Var, f64),
    Offset(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Slice { x: Var, start: usize },
    Concat(Vec<Var>),
    Reshape(Var),
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t` as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), Op::Leaf, t.requires_grad)
    }

    /// A leaf that does not require gradients.
    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        self.push(vec![values.len()], values, Op::Leaf, false)
    }

    /// A 1-D leaf that requires gradients.
    pub fn parameter(&mut self, values: Vec<f64>) -> Var {
        self.push(vec![values.len()], values, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient held for `v` into `t.grad`. No-op when `v` was not
    /// reached by the backward pass.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    /// `y = W·x + b` with `W: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(Error::dim(format!("linear weight must be 2-D, got {ws:?}")));
        }
        let (m, n) = (ws[0], ws[1]);
        if self.value(x).len() != n || self.value(b).len() != m {
            return Err(Error::dim(format!(
                "linear: W is {m}x{n}, x has {}, b has {}",
                self.value(x).len(),
                self.value(b).len()
            )));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &wv[i * n..(i + 1) * n];
                row.iter().zip(xv).map(|(a, c)| a * c).sum::<f64>() + bv[i]
            })
            .collect();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![m], out, Op::Linear { x, w, b }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Tanh(x), rg)
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Add | Elementwise::Mul, None) => Err(Error::Contract(format!(
                "{kind:?} needs a second operand"
            ))),
            (Elementwise::Exp, None) => Ok(self.exp(a)),
            (Elementwise::Log, None) => self.log(a),
            (Elementwise::Neg, None) => Ok(self.neg(a)),
            (Elementwise::Square, None) => Ok(self.square(a)),
            (_, Some(_)) => Err(Error::Contract(format!("{kind:?} is unary"))),
        }
    }

    fn check_same(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    /// Hard clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Sum of all elements, as a `[1]` tensor. The empty sum is 0.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Contiguous 1-D slice `x[start..start + len]` of the flattened values.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(x).len();
        if start + len > n {
            return Err(Error::dim(format!("slice {start}..{} of length {n}", start + len)));
        }
        let out = self.value(x)[start..start + len].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len], out, Op::Slice { x, start }, rg))
    }

    /// Concatenates the flattened values of `parts` into one 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(vec![out.len()], out, Op::Concat(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    /// Records an externally computed op. `value` is its output; `rule`
    /// supplies input gradients during the backward pass.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Vec<f64>,
        rule: Box<dyn CustomBackward>,
    ) -> Var {
        let rg = inputs.iter().any(|p| self.rg(*p));
        self.push(
            vec![value.len()],
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients from earlier calls are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(up) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(up);
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, g: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let (m, n) = (nodes[w.0].shape[0], nodes[w.0].shape[1]);
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    if nodes[w.0].requires_grad {
                        let mut gw = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                gw[i * n + j] = up[i] * xv[j];
                            }
                        }
                        send(*w, gw);
                    }
                    send(*b, up.clone());
                    if nodes[x.0].requires_grad {
                        let mut gx = vec![0.0; n];
                        for i in 0..m {
                            let row = &wv[i * n..(i + 1) * n];
                            for j in 0..n {
                                gx[j] += up[i] * row[j];
                            }
                        }
                        send(*x, gx);
                    }
                }
                Op::Tanh(x) => {
                    let g = up.iter().zip(&node.value).map(|(u, t)| u * (1.0 - t * t)).collect();
                    send(*x, g);
                }
                Op::Add(a, b) => {
                    send(*a, up.clone());
                    send(*b, up.clone());
                }
                Op::Mul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    send(*a, up.iter().zip(bv).map(|(u, y)| u * y).collect());
                    send(*b, up.iter().zip(av).map(|(u, y)| u * y).collect());
                }
                Op::Exp(x) => {
                    send(*x, up.iter().zip(&node.value).map(|(u, e)| u * e).collect());
                }
                Op::Log(x) => {
                    let xv = &nodes[x.0].value;
                    send(*x, up.iter().zip(xv).map(|(u, v)| u / v).collect());
                }
                Op::Neg(x) => send(*x, up.iter().map(|u| -u).collect()),
                Op::Square(x) => {
                    let xv = &nodes[x.0].value;
                    send(*x, up.iter().zip(xv).map(|(u, v)| 2.0 * u * v).collect());
                }
                Op::Scale(x, c) => send(*x, up.iter().map(|u| u * c).collect()),
                Op::Offset(x) | Op::Reshape(x) => send(*x, up.clone()),
                Op::Clamp { x, lo, hi } => {
                    let xv = &nodes[x.0].value;
                    let g = up
                        .iter()
                        .zip(xv)
                        .map(|(u, v)| if v < lo || v > hi { 0.0 } else { *u })
                        .collect();
                    send(*x, g);
                }
                Op::Sum(x) => send(*x, vec![up[0]; nodes[x.0].value.len()]),
                Op::Slice { x, start } => {
                    let mut g = vec![0.0; nodes[x.0].value.len()];
                    g[*start..*start + up.len()].copy_from_slice(&up);
                    send(*x, g);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        send(*p, up[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::Custom { inputs, rule } => {
                    let gs = rule.backward(&up);
                    debug_assert_eq!(gs.len(), inputs.len());
                    for (v, g) in inputs.iter().zip(gs) {
                        send(*v, g);
                    }
                }
            }
            grads[id] = Some(up);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Compares autodiff gradients of `f` against central differences.
///
/// `f` builds a scalar on a fresh graph from a 1-D parameter leaf. Returns
/// `max_i |ad_i - fd_i| / max(1, |fd_i|)`.
pub fn grad_check<F>(f: F, params: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {step}")));
    }
    let eval = |p: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(p);
        let out = f(&mut g, v)?;
        Ok(g.value(out)[0])
    };

    let mut g = Graph::new();
    let p = g.parameter(params.to_vec());
    let out = f(&mut g, p)?;
    g.backward(out)?;
    let zeros = vec![0.0; params.len()];
    let ad = g.grad(p).unwrap_or(&zeros).to_vec();

    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut hi = params.to_vec();
        let mut lo = params.to_vec();
        hi[i] += step;
        lo[i] -= step;
        let fd = (eval(hi)? - eval(lo)?) / (2.0 * step);
        if !fd.is_finite() || !ad[i].is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at parameter {i}: ad={}, fd={fd}",
                ad[i]
            )));
        }
        worst = worst.max((ad[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn central(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += step;
                b[i] -= step;
                (f(&a) - f(&b)) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn linear_identity_and_row_sum() {
        let mut g = Graph::new();
        let x = g.constant(vec![3.0, 4.0]);
        let w = g.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(vec![0.0, 0.0]);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), &[3.0, 4.0]);

        let x = g.constant(vec![2.0, 5.0]);
        let w = g.leaf(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let b = g.constant(vec![0.0]);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), &[7.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0]);
        let w = g.leaf(&Tensor::zeros(vec![2, 2]));
        let b = g.constant(vec![0.0, 0.0]);
        assert!(matches!(g.linear(x, w, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_weight_grad_matches_finite_differences() {
        // d/dW sum(Wx) at x = [1, 2]; oracle: central differences.
        let x = [1.0, 2.0];
        let w0 = [0.3, -0.7];
        let f = |w: &[f64]| w[0] * x[0] + w[1] * x[1];
        let fd = central(&f, &w0, 1e-5);

        let mut g = Graph::new();
        let xv = g.constant(x.to_vec());
        let w = g.leaf(&Tensor::new(vec![1, 2], w0.to_vec()).unwrap().requiring_grad());
        let b = g.constant(vec![0.0]);
        let y = g.linear(xv, w, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let ad = g.grad(w).unwrap();
        assert_abs_diff_eq!(ad[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ad[1], 2.0, epsilon = 1e-12);
        for (a, f) in ad.iter().zip(&fd) {
            assert_abs_diff_eq!(a, f, epsilon = 1e-9);
        }
    }

    #[test]
    fn tanh_values_and_grads() {
        let mut g = Graph::new();
        let x = g.parameter(vec![0.0]);
        let y = g.tanh(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.value(y), &[0.0]);
        assert_eq!(g.grad(x).unwrap(), &[1.0]);

        let mut g = Graph::new();
        let x = g.parameter(vec![20.0]);
        let y = g.tanh(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.value(y)[0] <= 1.0 && g.value(y)[0] > 1.0 - 1e-15);
        assert!(g.grad(x).unwrap()[0].abs() < 1e-15);

        let err = grad_check(|g, p| Ok({ let t = g.tanh(p); g.sum(t) }), &[0.5], 1e-5).unwrap();
        assert!(err < 1e-8, "tanh grad err {err}");
    }

    #[test]
    fn elementwise_kinds() {
        let mut g = Graph::new();
        let a = g.constant(vec![2.0, 3.0]);
        let b = g.constant(vec![4.0, 5.0]);
        let m = g.elementwise(Elementwise::Mul, a, Some(b)).unwrap();
        assert_eq!(g.value(m), &[8.0, 15.0]);
        let z = g.constant(vec![0.0]);
        let e = g.elementwise(Elementwise::Exp, z, None).unwrap();
        assert_eq!(g.value(e), &[1.0]);

        let mut g = Graph::new();
        let x = g.parameter(vec![3.0]);
        let sq = g.elementwise(Elementwise::Square, x, None).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn elementwise_errors() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 0.0]);
        assert!(matches!(g.log(a), Err(Error::Domain(_))));
        let neg = g.constant(vec![-1.0]);
        assert!(matches!(g.log(neg), Err(Error::Domain(_))));
        let b = g.constant(vec![1.0]);
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
        assert!(matches!(g.mul(a, b), Err(Error::Dimension(_))));
        assert!(g.elementwise(Elementwise::Add, a, None).is_err());
    }

    #[test]
    fn reduce_sum_cases() {
        let mut g = Graph::new();
        let x = g.parameter(vec![1.0, 2.0, 3.0]);
        let s = g.sum(x);
        assert_eq!(g.value(s), &[6.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let e = g.constant(vec![]);
        let s = g.sum(e);
        assert_eq!(g.value(s), &[0.0]);
    }

    #[test]
    fn backward_fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.parameter(vec![1.0]);
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.parameter(vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn accumulate_into_adds() {
        let mut t = Tensor::vector(vec![3.0]).requiring_grad();
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.leaf(&t);
            let sq = g.square(x);
            let s = g.sum(sq);
            g.backward(s).unwrap();
            g.accumulate_into(x, &mut t).unwrap();
        }
        assert_eq!(t.grad().unwrap(), &[12.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    // Two-layer tanh MLP with all weights packed in one flat vector.
    fn mlp_loss(g: &mut Graph, p: Var, x: &[f64]) -> Result<Var> {
        let (n, h, m) = (3, 4, 2);
        let mut off = 0;
        let mut take = |g: &mut Graph, len: usize, shape: Vec<usize>| -> Result<Var> {
            let s = g.slice(p, off, len)?;
            off += len;
            g.reshape(s, shape)
        };
        let w1 = take(g, h * n, vec![h, n])?;
        let b1 = take(g, h, vec![h])?;
        let w2 = take(g, m * h, vec![m, h])?;
        let b2 = take(g, m, vec![m])?;
        let xv = g.constant(x.to_vec());
        let a = g.linear(xv, w1, b1)?;
        let a = g.tanh(a);
        let o = g.linear(a, w2, b2)?;
        let e = g.exp(o);
        let q = g.square(o);
        let t = g.mul(e, q)?;
        Ok(g.sum(t))
    }

    #[test]
    fn mlp_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let params: Vec<f64> = (0..3 * 4 + 4 + 4 * 2 + 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = grad_check(|g, p| mlp_loss(g, p, &x), &params, 1e-5).unwrap();
            assert!(err < 1e-6, "mlp grad err {err}");
        }
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let err = grad_check(
            |g, p| {
                let sq = g.square(p);
                let sc = g.scale(sq, 1.5);
                Ok(g.sum(sc))
            },
            &[0.2, -0.4, 1.3],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9);

        let err = grad_check(|g, p| Ok({ let t = g.tanh(p); g.sum(t) }), &[0.3], 1e-4).unwrap();
        assert!(err < 1e-7);

        // Constant function: the parameter never reaches the loss.
        let mut g = Graph::new();
        let p = g.parameter(vec![1.0, 2.0]);
        let c = g.constant(vec![5.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(p).is_none());
        let err = grad_check(|g, _| { let c = g.constant(vec![5.0]); Ok(g.sum(c)) }, &[1.0, 2.0], 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        assert!(grad_check(|g, p| Ok(g.sum(p)), &[1.0], 0.0).is_err());
    }

    #[test]
    fn clamp_and_slice_concat_grads() {
        let mut g = Graph::new();
        let x = g.parameter(vec![-2.0, 0.5, 3.0]);
        let c = g.clamp(x, -1.0, 1.0);
        let a = g.slice(c, 1, 2).unwrap();
        let b = g.slice(x, 0, 1).unwrap();
        let cat = g.concat(&[b, a]);
        let s = g.sum(cat);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn every_op_matches_finite_differences(vals in proptest::collection::vec(-1.0f64..1.0, 1..6)) {
            // exp(tanh(x)) * x^2 - x, plus log of a positive shift.
            let f = |g: &mut Graph, p: Var| -> Result<Var> {
                let t = g.tanh(p);
                let e = g.exp(t);
                let sq = g.square(p);
                let m = g.mul(e, sq)?;
                let d = g.sub(m, p)?;
                let pos = g.offset(sq, 1.5);
                let l = g.log(pos)?;
                let tot = g.add(d, l)?;
                Ok(g.sum(tot))
            };
            let err = grad_check(f, &vals, 1e-5).unwrap();
            prop_assert!(err < 1e-6, "err {}", err);
        }

        #[test]
        fn shared_subexpression_equals_expanded(v in -1.0f64..1.0) {
            // (t + t) * t with t = tanh(x)  vs  2 tanh(x)^2 written out.
            let mut g = Graph::new();
            let x = g.parameter(vec![v]);
            let t = g.tanh(x);
            let tt = g.add(t, t).unwrap();
            let y = g.mul(tt, t).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            let shared = g.grad(x).unwrap()[0];

            let mut g = Graph::new();
            let x = g.parameter(vec![v]);
            let t1 = g.tanh(x);
            let t2 = g.tanh(x);
            let sq = g.mul(t1, t2).unwrap();
            let y = g.scale(sq, 2.0);
            let s = g.sum(y);
            g.backward(s).unwrap();
            let expanded = g.grad(x).unwrap()[0];
            prop_assert!((shared - expanded).abs() < 1e-14);
        }

        #[test]
        fn forward_is_deterministic(vals in proptest::collection::vec(-1.0f64..1.0, 1..8)) {
            let run = || {
                let mut g = Graph::new();
                let x = g.constant(vals.clone());
                let t = g.tanh(x);
                let e = g.exp(t);
                let s = g.sum(e);
                g.value(s)[0]
            };
            prop_assert_eq!(run().to_bits(), run().to_bits());
        }
    }
}
