//! Tape-style reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so inputs always precede their consumers and a reverse
//! sweep over the node list is a reverse topological traversal.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Softplus(Var),
    Relu(Var),
    Sum(Var),
    Nll {
        logits: Var,
        labels: Vec<usize>,
    },
    /// Gradient passes unchanged where `pass` is set and is zeroed elsewhere.
    /// Used for clamping and, with `straight_through`, for quantizers.
    Gate {
        input: Var,
        pass: Vec<bool>,
        straight_through: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
    /// Forward intermediates reused by the backward rule (softmax for NLL).
    saved: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// A trainable input; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true, None)
    }

    /// A fixed input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    /// True when the node was produced by a straight-through estimator.
    pub fn is_straight_through(&self, v: Var) -> bool {
        matches!(
            self.nodes[v.0].op,
            Op::Gate {
                straight_through: true,
                ..
            }
        )
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool, saved: Option<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(name.to_string()));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_node(value, op, needs_grad, None))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * k);
        self.push("scale", value, Op::Scale(a, k), &[a])
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + k);
        self.push("offset", value, Op::Offset(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push("ln", value, Op::Ln(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push("square", value, Op::Square(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(softplus);
        self.push("softplus", value, Op::Softplus(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    /// Sum of all elements as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn log_softmax_nll(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (m, classes) = z.shape();
        if labels.len() != m {
            return Err(Error::Shape {
                op: "log_softmax_nll",
                left: (m, classes),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index { label: bad, classes });
        }
        let mut probs = Tensor::zeros(m, classes);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = z.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[label];
            for (p, &v) in probs.values_mut()[i * classes..(i + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let value = Tensor::scalar(total / m as f64);
        let v = self.push(
            "log_softmax_nll",
            value,
            Op::Nll {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )?;
        self.nodes[v.0].saved = Some(probs);
        Ok(v)
    }

    /// Records a non-differentiable forward map whose backward rule is a
    /// gradient gate: identity where `pass[i]`, zero elsewhere.
    pub fn straight_through(&mut self, input: Var, forward: Tensor, pass: Vec<bool>) -> Result<Var> {
        self.gate(input, forward, pass, true)
    }

    pub(crate) fn gate(&mut self, input: Var, forward: Tensor, pass: Vec<bool>, straight_through: bool) -> Result<Var> {
        forward.expect_same_shape(self.value(input), "gate")?;
        debug_assert_eq!(pass.len(), forward.len());
        self.push(
            "gate",
            forward,
            Op::Gate {
                input,
                pass,
                straight_through,
            },
            &[input],
        )
    }

    /// Back-propagates from a 1×1 output, accumulating into every node that
    /// depends on a parameter.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: self.value(output).shape(),
                right: (1, 1),
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[output.0].grad = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&delta),
            None => node.grad = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) {
        for (v, delta) in self.input_grads(idx, g) {
            self.accumulate(v, delta);
        }
    }

    /// Vector-Jacobian products of node `idx` for each input that needs one.
    fn input_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    let bv = self.value(b);
                    let mut ga = Tensor::zeros(g.rows(), bv.rows());
                    gemm(g, false, bv, true, &mut ga, 0.0);
                    out.push((a, ga));
                }
                if self.wants(b) {
                    let av = self.value(a);
                    let mut gb = Tensor::zeros(av.cols(), g.cols());
                    gemm(av, true, g, false, &mut gb, 0.0);
                    out.push((b, gb));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.map(|x| -x)));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    out.push((a, zip(g, self.value(b), |gi, bi| gi * bi)));
                }
                if self.wants(b) {
                    out.push((b, zip(g, self.value(a), |gi, ai| gi * ai)));
                }
            }
            &Op::Scale(a, k) => out.push((a, g.map(|x| x * k))),
            &Op::Offset(a) => out.push((a, g.clone())),
            &Op::Exp(a) => out.push((a, zip(g, &node.value, |gi, yi| gi * yi))),
            &Op::Ln(a) => out.push((a, zip(g, self.value(a), |gi, xi| gi / xi))),
            &Op::Square(a) => out.push((a, zip(g, self.value(a), |gi, xi| 2.0 * gi * xi))),
            &Op::Softplus(a) => out.push((a, zip(g, self.value(a), |gi, xi| gi * sigmoid(xi)))),
            &Op::Relu(a) => out.push((a, zip(g, self.value(a), |gi, xi| if xi > 0.0 { gi } else { 0.0 }))),
            &Op::Sum(a) => {
                let (r, c) = self.value(a).shape();
                out.push((a, Tensor::full(r, c, g.item())));
            }
            Op::Nll { logits, labels } => {
                let probs = node.saved.as_ref().expect("nll saves its softmax");
                let (m, classes) = probs.shape();
                let k = g.item() / m as f64;
                let mut d = probs.map(|p| p * k);
                for (i, &l) in labels.iter().enumerate() {
                    d.values_mut()[i * classes + l] -= k;
                }
                out.push((*logits, d));
            }
            Op::Gate { input, pass, .. } => {
                let mut d = g.clone();
                for (v, &p) in d.values_mut().iter_mut().zip(pass) {
                    if !p {
                        *v = 0.0;
                    }
                }
                out.push((*input, d));
            }
        }
        out
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.zip_map(b, "backward", f).expect("backward shapes match forward")
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Compares the reverse-mode gradient of a scalar graph against central
/// differences at every coordinate of `theta`.
///
/// Returns the largest `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, theta: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Spec(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param(t.clone());
        let out = f(&mut g, x)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let x = g.param(theta.clone());
    let out = f(&mut g, x)?;
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(theta.rows(), theta.cols()));

    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.values_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.values()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::Numeric(format!("grad_check coordinate {i}")));
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = g.constant(t(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let p = g.matmul(i, b).unwrap();
        assert_eq!(g.value(p), &t(&[vec![3.0, 4.0], vec![5.0, 6.0]]));

        let a = g.param(t(&[vec![1.0, 2.0]]));
        let c = g.constant(t(&[vec![3.0], vec![4.0]]));
        let d = g.matmul(a, c).unwrap();
        assert_eq!(g.value(d).item(), 11.0);

        let s = g.sum(d).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &t(&[vec![3.0, 4.0]]));
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn matmul_gradient_matches_finite_difference() {
        let b = t(&[vec![3.0], vec![4.0]]);
        let fd = |a: &Tensor, i: usize| {
            let h = 1e-6;
            let mut up = a.clone();
            up.values_mut()[i] += h;
            let mut dn = a.clone();
            dn.values_mut()[i] -= h;
            (up.matmul(&b).unwrap().sum() - dn.matmul(&b).unwrap().sum()) / (2.0 * h)
        };
        let a = t(&[vec![1.0, 2.0]]);
        let oracle = [fd(&a, 0), fd(&a, 1)];
        assert!((oracle[0] - 3.0).abs() < 1e-6 && (oracle[1] - 4.0).abs() < 1e-6);

        let mut g = Graph::new();
        let av = g.param(a);
        let bv = g.constant(b.clone());
        let p = g.matmul(av, bv).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(av).unwrap().values();
        assert!((grad[0] - oracle[0]).abs() < 1e-6);
        assert!((grad[1] - oracle[1]).abs() < 1e-6);
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(800.0).is_finite());

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.softplus(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 0.5);
    }

    #[test]
    fn relu_values_and_gate() {
        let mut g = Graph::new();
        let x = g.param(t(&[vec![-1.0, 2.5, 3.0]]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).values(), &[0.0, 2.5, 3.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().values(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn nll_examples() {
        let cases = [
            (vec![0.0, 0.0], 0usize, std::f64::consts::LN_2),
            // ln(1 + e^-10) and 10 + ln(1 + e^-10)
            (vec![10.0, 0.0], 0, 4.539889921686465e-5),
            (vec![10.0, 0.0], 1, 10.000045398899218),
        ];
        for (logits, label, want) in cases {
            let mut g = Graph::new();
            let z = g.constant(t(&[logits]));
            let l = g.log_softmax_nll(z, &[label]).unwrap();
            let got = g.value(l).item();
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn nll_rejects_bad_label() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(1, 3));
        assert!(matches!(
            g.log_softmax_nll(z, &[3]),
            Err(Error::Index { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn nll_backward_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let z = g.param(t(&[vec![1.0, 2.0, 0.5], vec![0.0, -1.0, 3.0]]));
        let l = g.log_softmax_nll(z, &[1, 2]).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(z).unwrap();
        for (r, label) in [(0usize, 1usize), (1, 2)] {
            let row = g.value(z).row(r);
            let lse = log_sum_exp(row);
            for (c, &v) in row.iter().enumerate() {
                let p = (v - lse).exp();
                let want = (p - if c == label { 1.0 } else { 0.0 }) / 2.0;
                assert!((grad.get(r, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(-1.0));
        assert!(matches!(g.ln(x), Err(Error::Numeric(_))));
        let y = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(g.exp(y), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(2, 2));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn grad_check_of_linear_sum_is_exact() {
        let theta = t(&[vec![0.3, -1.2], vec![4.0, 0.0]]);
        let err = grad_check(|g, x| g.sum(x), &theta, 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn grad_check_softplus() {
        let theta = t(&[vec![-1.7, -0.4, 0.2, 1.3, 1.9]]);
        let err = grad_check(
            |g, x| {
                let y = g.softplus(x)?;
                g.sum(y)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        assert!(grad_check(|g, x| g.sum(x), &Tensor::zeros(1, 1), 0.0).is_err());
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = sum(x*x + x) → dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.param(t(&[vec![1.5, -2.0]]));
        let sq = g.mul(x, x).unwrap();
        let s = g.add(sq, x).unwrap();
        let y = g.sum(s).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().values(), &[4.0, -3.0]);
    }
}
