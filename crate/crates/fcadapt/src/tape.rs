//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! then propagates gradients to all leaves in one sweep. The op set is only
//! what the encoder and the losses need, which keeps every backward rule
//! small enough to verify by finite differences (see the tests at the bottom
//! of this file).
//!
//! Broadcast ops take their second operand as a `1 x C` row that is applied
//! to every row of the first operand; their gradients sum over the broadcast
//! axis.

use crate::mat::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivRow(Var, Var),
    MulScalar(Var, Var),
    Row(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    Sqrt(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m[(0, 0)]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_row(&mut self, row: Vec<f64>) -> Var {
        self.leaf(Mat::row_vector(row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.broadcast(a, row, |x, r| x + r);
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.broadcast(a, row, |x, r| x * r);
        self.push(v, Op::MulRow(a, row))
    }

    /// Divides every row of `a` elementwise by a `1 x C` row.
    pub fn div_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.broadcast(a, row, |x, r| x / r);
        self.push(v, Op::DivRow(a, row))
    }

    fn broadcast(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let m = self.value(a);
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "broadcast operand must be 1 x C");
        assert_eq!(r.cols(), m.cols(), "broadcast width mismatch");
        let mut out = Mat::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                out[(i, j)] = f(m[(i, j)], r[(0, j)]);
            }
        }
        out
    }

    /// Multiplies every entry of `a` by a `1 x 1` scalar node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).shape(), (1, 1), "mul_scalar needs a 1 x 1 node");
        let c = self.value(s)[(0, 0)];
        let v = self.value(a).scale(c);
        self.push(v, Op::MulScalar(a, s))
    }

    /// Extracts row `i` of `a` as a `1 x C` node.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let m = self.value(a);
        assert!(i < m.rows(), "row index out of range");
        let v = Mat::row_vector(m.row(i).to_vec());
        self.push(v, Op::Row(a, i))
    }

    /// Column means as a `1 x C` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = m.sum_rows().scale(1.0 / m.rows() as f64);
        self.push(v, Op::MeanRows(a))
    }

    /// Sum of all entries as a `1 x 1` scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            let row = m.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..m.cols() {
                let e = (row[j] - max).exp();
                out[(i, j)] = e;
                denom += e;
            }
            for j in 0..m.cols() {
                out[(i, j)] /= denom;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.rows(), mb.rows(), "concat_cols row mismatch");
        let mut out = Mat::zeros(ma.rows(), ma.cols() + mb.cols());
        for i in 0..ma.rows() {
            for j in 0..ma.cols() {
                out[(i, j)] = ma[(i, j)];
            }
            for j in 0..mb.cols() {
                out[(i, ma.cols() + j)] = mb[(i, j)];
            }
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    /// Stacks `1 x C` rows into an `R x C` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows on empty slice");
        let c = self.value(rows[0]).cols();
        let mut out = Mat::zeros(rows.len(), c);
        for (i, &v) in rows.iter().enumerate() {
            let m = self.value(v);
            assert_eq!(m.shape(), (1, c), "stack_rows operand must be 1 x C");
            for j in 0..c {
                out[(i, j)] = m[(0, j)];
            }
        }
        self.push(out, Op::StackRows(rows.to_vec()))
    }

    /// Backpropagates from a `1 x 1` loss node and returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward() needs a scalar loss node"
        );
        let mut grads: Vec<Mat> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[loss.0][(0, 0)] = 1.0;

        for idx in (0..=loss.0).rev() {
            if grads[idx].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[idx].clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate_scaled(&mut grads[b.0], &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let da = g.zip(&self.nodes[b.0].value, |gi, bi| gi * bi);
                    let db = g.zip(&self.nodes[a.0].value, |gi, ai| gi * ai);
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[b.0].value.transpose());
                    let db = self.nodes[a.0].value.transpose().matmul(&g);
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::Transpose(a) => {
                    let da = g.transpose();
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Scale(a, c) => {
                    accumulate_scaled(&mut grads[a.0], &g, *c);
                }
                Op::AddConst(a) => {
                    accumulate(&mut grads[a.0], &g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads[a.0], &g);
                    let dr = g.sum_rows();
                    accumulate(&mut grads[row.0], &dr);
                }
                Op::MulRow(a, row) => {
                    let r = &self.nodes[row.0].value;
                    let av = &self.nodes[a.0].value;
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    let mut dr = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            da[(i, j)] = g[(i, j)] * r[(0, j)];
                            dr[(0, j)] += g[(i, j)] * av[(i, j)];
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[row.0], &dr);
                }
                Op::DivRow(a, row) => {
                    let r = &self.nodes[row.0].value;
                    let y = &self.nodes[idx].value;
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    let mut dr = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            da[(i, j)] = g[(i, j)] / r[(0, j)];
                            dr[(0, j)] -= g[(i, j)] * y[(i, j)] / r[(0, j)];
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[row.0], &dr);
                }
                Op::MulScalar(a, s) => {
                    let c = self.nodes[s.0].value[(0, 0)];
                    accumulate_scaled(&mut grads[a.0], &g, c);
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(gi, ai)| gi * ai)
                        .sum();
                    grads[s.0][(0, 0)] += ds;
                }
                Op::Row(a, i) => {
                    let cols = g.cols();
                    let da = &mut grads[a.0];
                    for j in 0..cols {
                        da[(*i, j)] += g[(0, j)];
                    }
                }
                Op::MeanRows(a) => {
                    let rows = self.nodes[a.0].value.rows() as f64;
                    let mut da = Mat::zeros(self.nodes[a.0].value.rows(), g.cols());
                    for i in 0..da.rows() {
                        for j in 0..da.cols() {
                            da[(i, j)] = g[(0, j)] / rows;
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                Op::SumAll(a) => {
                    let s = g[(0, 0)];
                    let da = Mat::filled(
                        self.nodes[a.0].value.rows(),
                        self.nodes[a.0].value.cols(),
                        s,
                    );
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[idx].value;
                    let da = g.zip(y, |gi, yi| gi * 0.5 / yi);
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = g.zip(x, |gi, xi| gi * gelu_grad(xi));
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let da = g.zip(y, |gi, yi| gi * yi * (1.0 - yi));
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = g.zip(x, |gi, xi| gi * sigmoid(xi));
                    accumulate(&mut grads[a.0], &da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let dot: f64 =
                            (0..g.cols()).map(|j| g[(i, j)] * y[(i, j)]).sum();
                        for j in 0..g.cols() {
                            da[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].value.cols();
                    let mut da = Mat::zeros(g.rows(), ca);
                    let mut db = Mat::zeros(g.rows(), g.cols() - ca);
                    for i in 0..g.rows() {
                        for j in 0..ca {
                            da[(i, j)] = g[(i, j)];
                        }
                        for j in ca..g.cols() {
                            db[(i, j - ca)] = g[(i, j)];
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::StackRows(rows) => {
                    for (i, v) in rows.iter().enumerate() {
                        let mut dr = Mat::zeros(1, g.cols());
                        for j in 0..g.cols() {
                            dr[(0, j)] = g[(i, j)];
                        }
                        accumulate(&mut grads[v.0], &dr);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(dst: &mut Mat, src: &Mat) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn accumulate_scaled(dst: &mut Mat, src: &Mat, c: f64) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s * c;
    }
}

/// Gradients of a scalar loss with respect to every tape node.
pub struct Gradients {
    grads: Vec<Mat>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> &Mat {
        &self.grads[v.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Mat::from_vec(rows, cols, data)
    }

    /// Builds a scalar loss from two leaves and finite-difference checks both.
    fn check_grad(build: impl Fn(&mut Tape, Var, Var) -> Var, a0: Mat, b0: Mat) {
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let loss = build(&mut tape, a, b);
        let grads = tape.backward(loss);

        let eval = |am: &Mat, bm: &Mat| -> f64 {
            let mut t = Tape::new();
            let av = t.leaf(am.clone());
            let bv = t.leaf(bm.clone());
            let l = build(&mut t, av, bv);
            t.scalar(l)
        };

        let h = 1e-6;
        for (leaf, base, analytic) in [(0, &a0, grads.of(a)), (1, &b0, grads.of(b))] {
            for idx in 0..base.data().len() {
                let mut plus = base.clone();
                plus.data_mut()[idx] += h;
                let mut minus = base.clone();
                minus.data_mut()[idx] -= h;
                let (fp, fm) = if leaf == 0 {
                    (eval(&plus, &b0), eval(&minus, &b0))
                } else {
                    (eval(&a0, &plus), eval(&a0, &minus))
                };
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic.data()[idx];
                let denom = an.abs().max(fd.abs()).max(1e-3);
                assert!(
                    ((an - fd) / denom).abs() < 1e-5,
                    "leaf {leaf} idx {idx}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_mat(&mut rng, 3, 4);
        let b = random_mat(&mut rng, 4, 2);
        check_grad(
            |t, a, b| {
                let p = t.matmul(a, b);
                let q = t.gelu(p);
                t.sum_all(q)
            },
            a,
            b,
        );
    }

    #[test]
    fn grad_softmax_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_mat(&mut rng, 3, 3);
        let b = random_mat(&mut rng, 3, 3);
        check_grad(
            |t, a, b| {
                let s = t.softmax_rows(a);
                let m = t.mul(s, b);
                let g = t.sigmoid(m);
                t.sum_all(g)
            },
            a,
            b,
        );
    }

    #[test]
    fn grad_normalization_pattern() {
        // The composite used by the norm layers: center, rescale by the
        // per-column standard deviation, then affine.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_mat(&mut rng, 5, 3);
        let gamma = random_mat(&mut rng, 1, 3);
        check_grad(
            |t, a, gamma| {
                let mean = t.mean_rows(a);
                let neg = t.scale(mean, -1.0);
                let cent = t.add_row(a, neg);
                let sq = t.mul(cent, cent);
                let var = t.mean_rows(sq);
                let ve = t.add_const(var, 1e-5);
                let sd = t.sqrt(ve);
                let xhat = t.div_row(cent, sd);
                let y = t.mul_row(xhat, gamma);
                let g = t.gelu(y);
                t.sum_all(g)
            },
            a,
            gamma,
        );
    }

    #[test]
    fn grad_broadcast_stack_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_mat(&mut rng, 2, 3);
        let b = random_mat(&mut rng, 1, 3);
        check_grad(
            |t, a, b| {
                let shifted = t.add_row(a, b);
                let scaled = t.mul_row(a, b);
                let cat = t.concat_cols(shifted, scaled);
                let mean = t.mean_rows(cat);
                let sp = t.softplus(mean);
                t.sum_all(sp)
            },
            a,
            b,
        );
    }

    #[test]
    fn grad_stack_rows_routes_to_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_mat(&mut rng, 1, 4);
        let b = random_mat(&mut rng, 1, 4);
        check_grad(
            |t, a, b| {
                let stacked = t.stack_rows(&[a, b, a]);
                let s = t.sigmoid(stacked);
                t.sum_all(s)
            },
            a,
            b,
        );
    }

    #[test]
    fn grad_mul_scalar_and_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_mat(&mut rng, 3, 4);
        let s = random_mat(&mut rng, 1, 1);
        check_grad(
            |t, a, s| {
                let scaled = t.mul_scalar(a, s);
                let r1 = t.row(scaled, 1);
                let r2 = t.row(a, 2);
                let d = t.sub(r1, r2);
                let sq = t.mul(d, d);
                t.sum_all(sq)
            },
            a,
            s,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_mat(&mut rng, 4, 7);
        let mut t = Tape::new();
        let v = t.leaf(a);
        let s = t.softmax_rows(v);
        for i in 0..4 {
            let sum: f64 = t.value(s).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stable_scalar_helpers() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(800.0) <= 1.0);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(1000.0).is_finite());
        assert!((gelu(0.0)).abs() < 1e-15);
    }
}
