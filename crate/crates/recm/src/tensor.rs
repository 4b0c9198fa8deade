//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The graph doubles as the tape: every operation allocates a node that
//! records its parents, and [`Tensor::backward`] walks the nodes in
//! reverse topological order exactly once. Models here are tiny, so the
//! graph is rebuilt from scratch on every training step.
//!
//! Shapes are strict: elementwise operations require identical shapes and
//! nothing broadcasts except scalar-tensor products.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

/// Exact GeLU, x * Phi(x) with the Gaussian CDF via erf.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of the exact GeLU: Phi(x) + x * phi(x).
pub fn gelu_deriv_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Neg(Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    /// scalar tensor (length 1) times arbitrary tensor
    ScalarMul(Tensor, Tensor),
    MatMul(Tensor, Tensor),
    Dot(Tensor, Tensor),
    Gelu(Tensor),
    Tanh(Tensor),
    Sigmoid(Tensor),
    Exp(Tensor),
    Ln(Tensor),
    Sqrt(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    RowNorms(Tensor),
    ScaleRows(Tensor, Tensor),
    Concat(Vec<Tensor>),
    Reshape(Tensor),
}

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
}

/// Handle to a node in the computation graph. Cloning is cheap (Rc).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op: Op::Leaf,
            }),
        }
    }

    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor::new(shape, data, true)
    }

    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor::new(shape, data, false)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let n = numel(&shape);
        Tensor::new(shape, vec![0.0; n], requires_grad)
    }

    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScalarMul(a, b)
            | Op::MatMul(a, b)
            | Op::Dot(a, b)
            | Op::ScaleRows(a, b) => a.requires_grad() || b.requires_grad(),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowNorms(a)
            | Op::Reshape(a) => a.requires_grad(),
            Op::Concat(xs) => xs.iter().any(|x| x.requires_grad()),
        };
        Tensor {
            inner: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn value(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor with {} elements", self.len());
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place update of a leaf's values (optimizer steps, norm clamps).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        assert!(
            matches!(self.inner.op, Op::Leaf),
            "update_data is only valid on leaf tensors"
        );
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn set_data(&self, v: Vec<f64>) {
        assert_eq!(v.len(), self.len());
        self.update_data(|d| d.copy_from_slice(&v));
    }

    /// Same values, cut out of the differentiation graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.inner.shape.clone(), self.value())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    // ---- arithmetic ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_op(self.inner.shape.clone(), data, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_op(self.inner.shape.clone(), data, Op::Sub(self.clone(), other.clone()))
    }

    pub fn neg(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| -a).collect();
        Tensor::from_op(self.inner.shape.clone(), data, Op::Neg(self.clone()))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::from_op(self.inner.shape.clone(), data, Op::Mul(self.clone(), other.clone()))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a * c).collect();
        Tensor::from_op(self.inner.shape.clone(), data, Op::Scale(self.clone(), c))
    }

    /// Scalar tensor (length 1) times this tensor; the one permitted broadcast.
    pub fn scalar_mul(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.len(), 1, "scalar_mul: multiplier must be a scalar tensor");
        let sv = s.data()[0];
        let data: Vec<f64> = self.data().iter().map(|a| a * sv).collect();
        Tensor::from_op(self.inner.shape.clone(), data, Op::ScalarMul(s.clone(), self.clone()))
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "matmul: lhs must be 2-d");
        assert_eq!(other.shape().len(), 2, "matmul: rhs must be 2-d");
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dimensions {} vs {}", k, k2);
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * b[p * n + j];
                }
            }
        }
        drop(a);
        drop(b);
        Tensor::from_op(vec![m, n], out, Op::MatMul(self.clone(), other.clone()))
    }

    /// Inner product of two equal-length vectors; result is a scalar tensor.
    pub fn dot(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        let v = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .sum();
        Tensor::from_op(vec![1], vec![v], Op::Dot(self.clone(), other.clone()))
    }

    pub fn gelu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&a| gelu_scalar(a)).collect();
        Tensor::from_op(self.inner.shape.clone(), data, Op::Gelu(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a.tanh()).collect();
        Tensor::from_op(self.inner.shape.clone(), data, Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect();
        Tensor::from_op(self.inner.shape.clone(), data, Op::Sigmoid(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a.exp()).collect();
        Tensor::from_op(self.inner.shape.clone(), data, Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a.ln()).collect();
        Tensor::from_op(self.inner.shape.clone(), data, Op::Ln(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a.sqrt()).collect();
        Tensor::from_op(self.inner.shape.clone(), data, Op::Sqrt(self.clone()))
    }

    pub fn sum(&self) -> Tensor {
        let v: f64 = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![v], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let v: f64 = self.data().iter().sum::<f64>() / self.len() as f64;
        Tensor::from_op(vec![1], vec![v], Op::Mean(self.clone()))
    }

    /// Euclidean norm of each row of a 2-d tensor, as a length-r vector.
    pub fn row_norms(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "row_norms: expects a 2-d tensor");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let d = self.data();
        let out: Vec<f64> = (0..r)
            .map(|i| d[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        drop(d);
        Tensor::from_op(vec![r], out, Op::RowNorms(self.clone()))
    }

    /// Scales row i of a 2-d tensor by s[i].
    pub fn scale_rows(&self, s: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "scale_rows: expects a 2-d tensor");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert_eq!(s.len(), r, "scale_rows: scale vector length mismatch");
        let d = self.data();
        let sv = s.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = d[i * c + j] * sv[i];
            }
        }
        drop(d);
        drop(sv);
        Tensor::from_op(vec![r, c], out, Op::ScaleRows(self.clone(), s.clone()))
    }

    /// Flattens all inputs and concatenates them into one vector.
    pub fn concat(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat: no inputs");
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let n = data.len();
        Tensor::from_op(vec![n], data, Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(numel(&shape), self.len(), "reshape: element count mismatch");
        Tensor::from_op(shape, self.value(), Op::Reshape(self.clone()))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss; accumulates into every
    /// requires_grad tensor reachable from it.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward requires a scalar loss");
        let order = topo_order(self);
        self.accumulate(&[1.0]);
        for t in order.iter().rev() {
            if !t.requires_grad() {
                continue;
            }
            let g = match t.inner.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            t.propagate(&g);
        }
    }

    fn accumulate(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn propagate(&self, g: &[f64]) {
        match &self.inner.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if a.requires_grad() {
                    a.accumulate(g);
                }
                if b.requires_grad() {
                    b.accumulate(g);
                }
            }
            Op::Sub(a, b) => {
                if a.requires_grad() {
                    a.accumulate(g);
                }
                if b.requires_grad() {
                    let gb: Vec<f64> = g.iter().map(|v| -v).collect();
                    b.accumulate(&gb);
                }
            }
            Op::Neg(a) => {
                if a.requires_grad() {
                    let ga: Vec<f64> = g.iter().map(|v| -v).collect();
                    a.accumulate(&ga);
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let bd = b.data();
                    let ga: Vec<f64> = g.iter().zip(bd.iter()).map(|(v, w)| v * w).collect();
                    drop(bd);
                    a.accumulate(&ga);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let gb: Vec<f64> = g.iter().zip(ad.iter()).map(|(v, w)| v * w).collect();
                    drop(ad);
                    b.accumulate(&gb);
                }
            }
            Op::Scale(a, c) => {
                if a.requires_grad() {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    a.accumulate(&ga);
                }
            }
            Op::ScalarMul(s, a) => {
                if s.requires_grad() {
                    let ad = a.data();
                    let gs: f64 = g.iter().zip(ad.iter()).map(|(v, w)| v * w).sum();
                    drop(ad);
                    s.accumulate(&[gs]);
                }
                if a.requires_grad() {
                    let sv = s.data()[0];
                    let ga: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    a.accumulate(&ga);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    // dA = G * B^T
                    let bd = b.data();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] = acc;
                        }
                    }
                    drop(bd);
                    a.accumulate(&ga);
                }
                if b.requires_grad() {
                    // dB = A^T * G
                    let ad = a.data();
                    let mut gb = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    drop(ad);
                    b.accumulate(&gb);
                }
            }
            Op::Dot(a, b) => {
                let gs = g[0];
                if a.requires_grad() {
                    let bd = b.data();
                    let ga: Vec<f64> = bd.iter().map(|v| v * gs).collect();
                    drop(bd);
                    a.accumulate(&ga);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let gb: Vec<f64> = ad.iter().map(|v| v * gs).collect();
                    drop(ad);
                    b.accumulate(&gb);
                }
            }
            Op::Gelu(a) => {
                if a.requires_grad() {
                    let ad = a.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(ad.iter())
                        .map(|(v, &x)| v * gelu_deriv_scalar(x))
                        .collect();
                    drop(ad);
                    a.accumulate(&ga);
                }
            }
            Op::Tanh(a) => {
                if a.requires_grad() {
                    let od = self.data();
                    let ga: Vec<f64> = g.iter().zip(od.iter()).map(|(v, t)| v * (1.0 - t * t)).collect();
                    drop(od);
                    a.accumulate(&ga);
                }
            }
            Op::Sigmoid(a) => {
                if a.requires_grad() {
                    let od = self.data();
                    let ga: Vec<f64> = g.iter().zip(od.iter()).map(|(v, s)| v * s * (1.0 - s)).collect();
                    drop(od);
                    a.accumulate(&ga);
                }
            }
            Op::Exp(a) => {
                if a.requires_grad() {
                    let od = self.data();
                    let ga: Vec<f64> = g.iter().zip(od.iter()).map(|(v, e)| v * e).collect();
                    drop(od);
                    a.accumulate(&ga);
                }
            }
            Op::Ln(a) => {
                if a.requires_grad() {
                    let ad = a.data();
                    let ga: Vec<f64> = g.iter().zip(ad.iter()).map(|(v, x)| v / x).collect();
                    drop(ad);
                    a.accumulate(&ga);
                }
            }
            Op::Sqrt(a) => {
                if a.requires_grad() {
                    let od = self.data();
                    let ga: Vec<f64> = g.iter().zip(od.iter()).map(|(v, s)| v * 0.5 / s).collect();
                    drop(od);
                    a.accumulate(&ga);
                }
            }
            Op::Sum(a) => {
                if a.requires_grad() {
                    let ga = vec![g[0]; a.len()];
                    a.accumulate(&ga);
                }
            }
            Op::Mean(a) => {
                if a.requires_grad() {
                    let ga = vec![g[0] / a.len() as f64; a.len()];
                    a.accumulate(&ga);
                }
            }
            Op::RowNorms(a) => {
                if a.requires_grad() {
                    let (r, c) = (a.shape()[0], a.shape()[1]);
                    let ad = a.data();
                    let norms = self.data();
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        let n = norms[i].max(1e-300);
                        for j in 0..c {
                            ga[i * c + j] = g[i] * ad[i * c + j] / n;
                        }
                    }
                    drop(ad);
                    drop(norms);
                    a.accumulate(&ga);
                }
            }
            Op::ScaleRows(a, s) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                if a.requires_grad() {
                    let sv = s.data();
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g[i * c + j] * sv[i];
                        }
                    }
                    drop(sv);
                    a.accumulate(&ga);
                }
                if s.requires_grad() {
                    let ad = a.data();
                    let mut gs = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..c {
                            gs[i] += g[i * c + j] * ad[i * c + j];
                        }
                    }
                    drop(ad);
                    s.accumulate(&gs);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.len();
                    if p.requires_grad() {
                        p.accumulate(&g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                if a.requires_grad() {
                    a.accumulate(g);
                }
            }
        }
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    // Iterative post-order DFS; parents appear before children in the result.
    let mut order = Vec::new();
    let mut visited: HashSet<*const Node> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((t, child_idx)) = stack.pop() {
        let ptr = Rc::as_ptr(&t.inner);
        if child_idx == 0 {
            if visited.contains(&ptr) {
                continue;
            }
            visited.insert(ptr);
        }
        let parents = t.parents();
        if child_idx < parents.len() {
            let next = parents[child_idx].clone();
            stack.push((t, child_idx + 1));
            if !visited.contains(&Rc::as_ptr(&next.inner)) {
                stack.push((next, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

impl Tensor {
    fn parents(&self) -> Vec<&Tensor> {
        match &self.inner.op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScalarMul(a, b)
            | Op::MatMul(a, b)
            | Op::Dot(a, b)
            | Op::ScaleRows(a, b) => vec![a, b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowNorms(a)
            | Op::Reshape(a) => vec![a],
            Op::Concat(xs) => xs.iter().collect(),
        }
    }
}

/// Central finite-difference check of the reverse-mode gradients.
///
/// `f` rebuilds the scalar loss from scratch on every call; the leaves in
/// `params` are perturbed in place. Returns the maximum relative error
/// over all parameter components, with the autodiff value compared
/// against (f(x+h) - f(x-h)) / 2h at h = 1e-5.
pub fn gradcheck(params: &[Tensor], f: impl Fn() -> Tensor) -> f64 {
    let h = 1e-5;
    for p in params {
        p.zero_grad();
    }
    let loss = f();
    loss.backward();
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    let mut max_rel = 0.0_f64;
    for (p, g) in params.iter().zip(&grads) {
        for i in 0..p.len() {
            let orig = p.data()[i];
            p.update_data(|d| d[i] = orig + h);
            let fp = f().item();
            p.update_data(|d| d[i] = orig - h);
            let fm = f().item();
            p.update_data(|d| d[i] = orig);
            let fd = (fp - fm) / (2.0 * h);
            let rel = (g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
