//! A small reverse-mode tape over dense matrices.
//!
//! Every node holds a `DMatrix<f64>`; scalars are 1x1 matrices. Only the
//! operations the GP models need are provided, each with a hand-written
//! adjoint. Nodes that do not depend on a differentiable leaf are skipped
//! during the backward sweep.

use std::cell::{Ref, RefCell};

use nalgebra::DMatrix;

use crate::error::Result;
use crate::kernel::{self, KernelParams};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Mul(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Sqrt(usize),
    ClampMin0(usize),
    Sum(usize),
    SumSq(usize),
    ColSumSq(usize),
    BroadcastCols(usize),
    Fill(usize),
    /// x, z, log-lengthscales (D x 1), log-variance (1 x 1)
    Gram(usize, usize, usize, usize),
    Chol(usize),
    SolveLower(usize, usize),
    SolveLowerT(usize, usize),
    LogDiagSum(usize),
    TrilExpDiag(usize),
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation; values are evaluated eagerly.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
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

    /// Differentiable input.
    pub fn variable(&self, value: DMatrix<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: DMatrix<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_variable(&self, value: f64) -> Var<'_> {
        self.variable(DMatrix::from_element(1, 1, value))
    }

    pub fn scalar_constant(&self, value: f64) -> Var<'_> {
        self.constant(DMatrix::from_element(1, 1, value))
    }

    /// Leaf that is differentiable only when `grad` is set.
    pub fn input(&self, value: DMatrix<f64>, grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, grad)
    }

    fn push(&self, value: DMatrix<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Ref<'_, DMatrix<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    /// Inputs that do not influence the output get zero gradients.
    pub fn gradient(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Vec<DMatrix<f64>> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "gradient requires a scalar output"
        );
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(DMatrix::from_element(1, 1, 1.0));
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backward(&nodes, id, &g, &mut grads);
        }
        wrt.iter()
            .map(|v| {
                grads
                    .get(v.id)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| DMatrix::zeros(nodes[v.id].value.nrows(), nodes[v.id].value.ncols()))
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<DMatrix<f64>>], id: usize, g: DMatrix<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += g,
        slot => *slot = Some(g),
    }
}

fn backward(nodes: &[Node], id: usize, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
    let val = |i: usize| &nodes[i].value;
    let live = |i: usize| nodes[i].requires_grad;
    let out = &nodes[id].value;
    match nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if live(a) {
                accumulate(grads, a, g.clone());
            }
            if live(b) {
                accumulate(grads, b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if live(a) {
                accumulate(grads, a, g.clone());
            }
            if live(b) {
                accumulate(grads, b, -g);
            }
        }
        Op::Neg(a) => accumulate(grads, a, -g),
        Op::Mul(a, b) => {
            if live(a) {
                accumulate(grads, a, g.component_mul(val(b)));
            }
            if live(b) {
                accumulate(grads, b, g.component_mul(val(a)));
            }
        }
        Op::MulScalar(a, s) => {
            let sv = val(s)[0];
            if live(a) {
                accumulate(grads, a, g * sv);
            }
            if live(s) {
                accumulate(grads, s, DMatrix::from_element(1, 1, g.dot(val(a))));
            }
        }
        Op::Scale(a, c) => accumulate(grads, a, g * c),
        Op::MatMul(a, b) => {
            if live(a) {
                accumulate(grads, a, g * val(b).transpose());
            }
            if live(b) {
                accumulate(grads, b, val(a).transpose() * g);
            }
        }
        Op::Transpose(a) => accumulate(grads, a, g.transpose()),
        Op::Exp(a) => accumulate(grads, a, g.component_mul(out)),
        Op::Sqrt(a) => {
            let ga = g.zip_map(out, |gi, s| if s > 0.0 { 0.5 * gi / s } else { 0.0 });
            accumulate(grads, a, ga);
        }
        Op::ClampMin0(a) => {
            let ga = g.zip_map(val(a), |gi, x| if x > 0.0 { gi } else { 0.0 });
            accumulate(grads, a, ga);
        }
        Op::Sum(a) => {
            let v = val(a);
            accumulate(grads, a, DMatrix::from_element(v.nrows(), v.ncols(), g[0]));
        }
        Op::SumSq(a) => accumulate(grads, a, val(a) * (2.0 * g[0])),
        Op::ColSumSq(a) => {
            let v = val(a);
            let mut ga = v * 2.0;
            for (j, mut col) in ga.column_iter_mut().enumerate() {
                col *= g[j];
            }
            accumulate(grads, a, ga);
        }
        Op::BroadcastCols(a) => {
            let summed = DMatrix::from_iterator(g.nrows(), 1, g.row_iter().map(|r| r.sum()));
            accumulate(grads, a, summed);
        }
        Op::Fill(a) => accumulate(grads, a, DMatrix::from_element(1, 1, g.sum())),
        Op::Gram(x, z, ls, lv) => gram_backward(nodes, out, g, (x, z, ls, lv), grads),
        Op::Chol(a) => {
            // A_bar = L^-T sym(Phi(Lᵀ L_bar)) L^-1
            let l = out;
            let mut p = l.transpose() * g;
            phi_in_place(&mut p);
            let sym = (&p + p.transpose()) * 0.5;
            let left = kernel::solve_lower_transpose(l, &sym);
            let abar = kernel::solve_lower_transpose(l, &left.transpose()).transpose();
            accumulate(grads, a, abar);
        }
        Op::SolveLower(l, b) => {
            // X = L^-1 B
            let h = kernel::solve_lower_transpose(val(l), g);
            if live(l) {
                accumulate(grads, l, -(&h * out.transpose()).lower_triangle());
            }
            if live(b) {
                accumulate(grads, b, h);
            }
        }
        Op::SolveLowerT(l, b) => {
            // X = L^-T B
            let h = kernel::solve_lower(val(l), g);
            if live(l) {
                accumulate(grads, l, -(out * h.transpose()).lower_triangle());
            }
            if live(b) {
                accumulate(grads, b, h);
            }
        }
        Op::LogDiagSum(l) => {
            let lv = val(l);
            let mut gl = DMatrix::zeros(lv.nrows(), lv.ncols());
            for i in 0..lv.nrows() {
                gl[(i, i)] = g[0] / lv[(i, i)];
            }
            accumulate(grads, l, gl);
        }
        Op::TrilExpDiag(raw) => {
            let mut gr = g.lower_triangle();
            for i in 0..gr.nrows() {
                gr[(i, i)] *= out[(i, i)];
            }
            accumulate(grads, raw, gr);
        }
    }
}

/// Lower triangle with the diagonal halved.
fn phi_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..n {
            if i < j {
                m[(i, j)] = 0.0;
            } else if i == j {
                m[(i, j)] *= 0.5;
            }
        }
    }
}

fn gram_backward(
    nodes: &[Node],
    k: &DMatrix<f64>,
    g: &DMatrix<f64>,
    (x, z, ls, lv): (usize, usize, usize, usize),
    grads: &mut [Option<DMatrix<f64>>],
) {
    let xv = &nodes[x].value;
    let zv = &nodes[z].value;
    let inv_l2: Vec<f64> = nodes[ls].value.iter().map(|l| (-2.0 * l).exp()).collect();
    let w = g.component_mul(k);
    let (n, m) = (w.nrows(), w.ncols());
    let dim = xv.ncols();
    let mut gx = DMatrix::zeros(n, dim);
    let mut gz = DMatrix::zeros(m, dim);
    let mut gls = DMatrix::zeros(dim, 1);
    for d in 0..dim {
        let s = inv_l2[d];
        for j in 0..m {
            let zj = zv[(j, d)];
            for i in 0..n {
                let wij = w[(i, j)];
                if wij == 0.0 {
                    continue;
                }
                let diff = xv[(i, d)] - zj;
                let t = wij * diff * s;
                gx[(i, d)] -= t;
                gz[(j, d)] += t;
                gls[d] += t * diff;
            }
        }
    }
    if nodes[x].requires_grad {
        accumulate(grads, x, gx);
    }
    if nodes[z].requires_grad {
        accumulate(grads, z, gz);
    }
    if nodes[ls].requires_grad {
        accumulate(grads, ls, gls);
    }
    if nodes[lv].requires_grad {
        accumulate(grads, lv, DMatrix::from_element(1, 1, w.sum()));
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, DMatrix<f64>> {
        self.tape.value_of(self.id)
    }

    pub fn scalar(&self) -> f64 {
        self.value()[0]
    }

    pub fn shape(&self) -> (usize, usize) {
        let v = self.value();
        (v.nrows(), v.ncols())
    }

    fn unary(self, op: Op, value: DMatrix<f64>) -> Var<'t> {
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, op: Op, value: DMatrix<f64>) -> Var<'t> {
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*other.value();
        self.binary(other, Op::Add(self.id, other.id), v)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() - &*other.value();
        self.binary(other, Op::Sub(self.id, other.id), v)
    }

    pub fn neg(self) -> Var<'t> {
        let v = -&*self.value();
        self.unary(Op::Neg(self.id), v)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().component_mul(&*other.value());
        self.binary(other, Op::Mul(self.id, other.id), v)
    }

    /// Product with a 1x1 node.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        assert_eq!(s.shape(), (1, 1));
        let v = &*self.value() * s.scalar();
        self.binary(s, Op::MulScalar(self.id, s.id), v)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = &*self.value() * c;
        self.unary(Op::Scale(self.id, c), v)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() * &*other.value();
        self.binary(other, Op::MatMul(self.id, other.id), v)
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(Op::Transpose(self.id), v)
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(Op::Exp(self.id), v)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0).sqrt());
        self.unary(Op::Sqrt(self.id), v)
    }

    pub fn clamp_min0(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(Op::ClampMin0(self.id), v)
    }

    pub fn sum(self) -> Var<'t> {
        let v = DMatrix::from_element(1, 1, self.value().sum());
        self.unary(Op::Sum(self.id), v)
    }

    /// Squared Frobenius norm.
    pub fn sum_sq(self) -> Var<'t> {
        let v = DMatrix::from_element(1, 1, self.value().norm_squared());
        self.unary(Op::SumSq(self.id), v)
    }

    /// Column-wise sums of squares of an M x N matrix, returned as N x 1.
    pub fn col_sum_sq(self) -> Var<'t> {
        let v = {
            let a = self.value();
            DMatrix::from_iterator(a.ncols(), 1, a.column_iter().map(|c| c.norm_squared()))
        };
        self.unary(Op::ColSumSq(self.id), v)
    }

    /// Repeats an N x 1 column `cols` times.
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        let v = {
            let a = self.value();
            assert_eq!(a.ncols(), 1);
            DMatrix::from_fn(a.nrows(), cols, |i, _| a[(i, 0)])
        };
        self.unary(Op::BroadcastCols(self.id), v)
    }

    /// Matrix of the given shape filled with this 1x1 value.
    pub fn fill(self, rows: usize, cols: usize) -> Var<'t> {
        let v = DMatrix::from_element(rows, cols, self.scalar());
        self.unary(Op::Fill(self.id), v)
    }

    /// Squared-exponential ARD cross-covariance between the rows of `self`
    /// and the rows of `z`.
    pub fn gram(self, z: Var<'t>, log_ls: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let ls = log_ls.value();
            let params = KernelParams {
                log_lengthscales: nalgebra::DVector::from_iterator(ls.len(), ls.iter().copied()),
                log_signal_variance: log_var.scalar(),
            };
            kernel::gram(&self.value(), &z.value(), &params)?
        };
        let rg = self.tape.needs(&[self.id, z.id, log_ls.id, log_var.id]);
        Ok(self
            .tape
            .push(value, Op::Gram(self.id, z.id, log_ls.id, log_var.id), rg))
    }

    /// Lower Cholesky factor of `self + jitter I`; the jitter is chosen by
    /// [`kernel::chol_psd`] and treated as a constant.
    pub fn cholesky(self, base_jitter: f64) -> Result<(Var<'t>, f64)> {
        let factor = {
            let a = self.value();
            let sym = (&*a + a.transpose()) * 0.5;
            kernel::chol_psd(&sym, base_jitter)?
        };
        let jitter = factor.jitter_used;
        Ok((self.unary(Op::Chol(self.id), factor.lower), jitter))
    }

    /// `self⁻¹ b` for lower-triangular `self`.
    pub fn solve_lower(self, b: Var<'t>) -> Var<'t> {
        let v = kernel::solve_lower(&self.value(), &b.value());
        self.binary(b, Op::SolveLower(self.id, b.id), v)
    }

    /// `self⁻ᵀ b` for lower-triangular `self`.
    pub fn solve_lower_t(self, b: Var<'t>) -> Var<'t> {
        let v = kernel::solve_lower_transpose(&self.value(), &b.value());
        self.binary(b, Op::SolveLowerT(self.id, b.id), v)
    }

    pub fn log_diag_sum(self) -> Var<'t> {
        let v = {
            let a = self.value();
            DMatrix::from_element(1, 1, a.diagonal().iter().map(|d| d.ln()).sum())
        };
        self.unary(Op::LogDiagSum(self.id), v)
    }

    /// Lower triangle of `self` with the diagonal exponentiated.
    pub fn tril_exp_diag(self) -> Var<'t> {
        let v = {
            let mut l = self.value().lower_triangle();
            for i in 0..l.nrows() {
                l[(i, i)] = l[(i, i)].exp();
            }
            l
        };
        self.unary(Op::TrilExpDiag(self.id), v)
    }
}
