//! A tape-style reverse-mode differentiation graph over dense matrices.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological order for backpropagation. Values are
//! computed eagerly when a node is created.

use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Variable,
    Constant,
    /// Forward copy; no derivative flows through.
    StopGradient,
    /// `x · wᵀ + b` with `w` stored as (out × in) and `b` as (1 × out).
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    RepeatRows(Var, usize),
    Column(Var, usize),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Accumulated derivatives of one scalar output.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Derivative with respect to `v`, or `None` if `v` does not influence the
    /// output through differentiable paths.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::wrt`] but materializes zeros of the right shape.
    pub fn wrt_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Variable, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Same value as `v`, with its downstream derivative defined to be zero.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.cols(), wv.cols(), "linear: input width mismatch");
        assert_eq!(bv.shape(), (1, wv.rows()), "linear: bias shape mismatch");
        let mut out = matmul_nt(xv, wv);
        let bias = bv.as_slice();
        for i in 0..out.rows() {
            for (o, &bb) in out.row_mut(i).iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Leaky ReLU. At exactly zero the positive-side slope is used.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self
            .value(a)
            .map(|x| if x >= 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = (v.rows() * v.cols()).max(1) as f64;
        let out = Matrix::scalar(v.sum() / n);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let v = self.value(a);
        let mut out = Matrix::zeros(v.rows() * times, v.cols());
        for i in 0..v.rows() {
            for t in 0..times {
                out.row_mut(i * times + t).copy_from_slice(v.row(i));
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::RepeatRows(a, times), rg)
    }

    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let v = self.value(a);
        assert!(j < v.cols(), "column index out of range");
        let out = Matrix::column_vector(&v.column(j));
        let rg = self.rg(a);
        self.push(out, Op::Column(a, j), rg)
    }

    /// Mean softmax cross-entropy of row-wise logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "one label per row");
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[label];
            for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let out = Matrix::scalar(total / labels.len().max(1) as f64);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, up: &Matrix, grads: &mut [Option<Matrix>]) {
        let send = |grads: &mut [Option<Matrix>], v: Var, g: Matrix| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Variable | Op::Constant | Op::StopGradient => {}
            Op::Linear { x, w, b } => {
                if self.rg(*x) {
                    send(grads, *x, matmul(up, self.value(*w)));
                }
                if self.rg(*w) {
                    send(grads, *w, matmul_tn(up, self.value(*x)));
                }
                if self.rg(*b) {
                    let mut db = Matrix::zeros(1, up.cols());
                    for row in up.iter_rows() {
                        for (acc, &g) in db.as_mut_slice().iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    send(grads, *b, db);
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(grads, *a, matmul_nt(up, self.value(*b)));
                }
                if self.rg(*b) {
                    send(grads, *b, matmul_tn(self.value(*a), up));
                }
            }
            Op::Add(a, b) => {
                send(grads, *a, up.clone());
                send(grads, *b, up.clone());
            }
            Op::Sub(a, b) => {
                send(grads, *a, up.clone());
                send(grads, *b, up.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(grads, *a, up.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.rg(*b) {
                    send(grads, *b, up.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::Scale(a, c) => send(grads, *a, up.map(|g| g * c)),
            Op::LeakyRelu(a, slope) => {
                let g = up.zip_map(self.value(*a), |g, x| if x >= 0.0 { g } else { g * slope });
                send(grads, *a, g);
            }
            Op::Square(a) => send(grads, *a, up.zip_map(self.value(*a), |g, x| 2.0 * g * x)),
            Op::Abs(a) => {
                let g = up.zip_map(self.value(*a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                send(grads, *a, g);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                send(grads, *a, Matrix::filled(r, c, up.as_slice()[0]));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = (r * c).max(1) as f64;
                send(grads, *a, Matrix::filled(r, c, up.as_slice()[0] / n));
            }
            Op::RepeatRows(a, times) => {
                let (r, c) = self.value(*a).shape();
                let mut g = Matrix::zeros(r, c);
                for i in 0..r {
                    let dst = g.row_mut(i);
                    for t in 0..*times {
                        for (d, &u) in dst.iter_mut().zip(up.row(i * times + t)) {
                            *d += u;
                        }
                    }
                }
                send(grads, *a, g);
            }
            Op::Column(a, j) => {
                let (r, c) = self.value(*a).shape();
                let mut g = Matrix::zeros(r, c);
                for i in 0..r {
                    g[(i, *j)] = up[(i, 0)];
                }
                send(grads, *a, g);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len().max(1) as f64;
                let scale = up.as_slice()[0] / n;
                let mut g = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    g[(i, label)] -= 1.0;
                }
                send(grads, *logits, g.map(|v| v * scale));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Matrix) -> f64, at: &Matrix) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(at.rows(), at.cols());
        for k in 0..at.as_slice().len() {
            let mut p = at.clone();
            p.as_mut_slice()[k] += h;
            let mut q = at.clone();
            q.as_mut_slice()[k] -= h;
            out.as_mut_slice()[k] = (f(&p) - f(&q)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn linear_and_activation_backward() {
        let x0 = Matrix::from_rows(&[vec![0.3, -1.2], vec![0.8, 0.1], vec![-0.5, 0.9]]).unwrap();
        let w0 = Matrix::from_rows(&[vec![0.7, -0.2], vec![0.4, 1.1], vec![-0.9, 0.3]]).unwrap();
        let b0 = Matrix::row_vector(&[0.1, -0.2, 0.05]);
        let eval = |x: &Matrix, w: &Matrix| {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let wv = g.variable(w.clone());
            let bv = g.constant(b0.clone());
            let h = g.linear(xv, wv, bv);
            let a = g.leaky_relu(h, 0.1);
            let s = g.square(a);
            let out = g.mean(s);
            (g, xv, wv, out)
        };
        let (g, xv, wv, out) = eval(&x0, &w0);
        let grads = g.backward(out);
        let gx = numeric_grad(|x| {
            let (g, _, _, o) = eval(x, &w0);
            g.scalar(o)
        }, &x0);
        let gw = numeric_grad(|w| {
            let (g, _, _, o) = eval(&x0, w);
            g.scalar(o)
        }, &w0);
        assert_close(grads.wrt(xv).unwrap(), &gx, 1e-7);
        assert_close(grads.wrt(wv).unwrap(), &gw, 1e-7);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let a = g.variable(Matrix::scalar(3.0));
        let frozen = g.stop_gradient(a);
        let prod = g.mul(a, frozen);
        let grads = g.backward(prod);
        // d(a * const)/da = const = 3, not 2a = 6
        assert_eq!(grads.wrt(a).unwrap().as_slice(), &[3.0]);
        assert!(grads.wrt(frozen).is_none());
    }

    #[test]
    fn cross_entropy_and_repeat_backward() {
        let l0 = Matrix::from_rows(&[vec![0.2, -0.4], vec![1.5, 0.3]]).unwrap();
        let labels = [1usize, 0];
        let eval = |l: &Matrix| {
            let mut g = Graph::new();
            let lv = g.variable(l.clone());
            let rep = g.repeat_rows(lv, 3);
            let col = g.column(rep, 1);
            let sq = g.square(col);
            let s1 = g.sum(sq);
            let ce = g.softmax_cross_entropy(lv, &labels);
            let out = g.add(s1, ce);
            (g, lv, out)
        };
        let (g, lv, out) = eval(&l0);
        let grads = g.backward(out);
        let num = numeric_grad(|l| {
            let (g, _, o) = eval(l);
            g.scalar(o)
        }, &l0);
        assert_close(grads.wrt(lv).unwrap(), &num, 1e-7);
    }

    #[test]
    fn matmul_abs_sub_backward() {
        let a0 = Matrix::from_rows(&[vec![0.3, -1.2, 0.5], vec![0.8, 0.1, -0.7]]).unwrap();
        let b0 = Matrix::from_rows(&[vec![1.0], vec![-2.0], vec![0.4]]).unwrap();
        let eval = |a: &Matrix| {
            let mut g = Graph::new();
            let av = g.variable(a.clone());
            let bv = g.constant(b0.clone());
            let p = g.matmul(av, bv);
            let c = g.constant(Matrix::column_vector(&[0.1, 0.2]));
            let d = g.sub(p, c);
            let e = g.abs(d);
            let s = g.scale(e, 0.5);
            let out = g.sum(s);
            (g, av, out)
        };
        let (g, av, out) = eval(&a0);
        let grads = g.backward(out);
        let num = numeric_grad(|a| {
            let (g, _, o) = eval(a);
            g.scalar(o)
        }, &a0);
        assert_close(grads.wrt(av).unwrap(), &num, 1e-7);
    }
}
