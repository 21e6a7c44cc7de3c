//! Reverse-mode autodiff over `ndarray` matrices.
//!
//! A flat Wengert list: forward calls append nodes, `backward` runs one
//! reverse sweep and returns the adjoint of every node. All values are
//! `Array2<f64>`; scalars are 1x1. Piecewise ops (max, clamp, leaky-relu
//! slope factors, gathers at fixed indices) differentiate the branch taken,
//! which is exact almost everywhere.
//!
//! Spatial derivatives of networks are expressed as explicit forward-mode
//! (JVP) chains built from these same ops, so losses that consume them stay
//! first-order on the tape while their parameter gradients pick up the
//! second-order terms.

use ndarray::{Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Recip(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    /// Value is the local slope of leaky-relu at the input; its own
    /// derivative is zero almost everywhere.
    LreluDeriv(NodeId),
    Clamp(NodeId, f64, f64),
    SumAll(NodeId),
    SumCols(NodeId),
    MeanCols(NodeId),
    MaxCols(NodeId, Vec<usize>),
    MaxRows(NodeId, Vec<usize>),
    GatherRows(NodeId, Vec<usize>),
    ConcatCols(NodeId, NodeId),
    BroadcastRow(NodeId),
    BroadcastCol(NodeId),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Adjoints per node after a backward sweep.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the swept scalar w.r.t. node `id` (zeros when the node
    /// does not influence it).
    pub fn get(&self, id: NodeId, tape: &Tape) -> Array2<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.nodes[id.0].value.raw_dim()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Leaf from a slice of 3D points, n x 3.
    pub fn leaf_points(&mut self, points: &[[f64; 3]]) -> NodeId {
        let mut a = Array2::zeros((points.len(), 3));
        for (i, p) in points.iter().enumerate() {
            for c in 0..3 {
                a[[i, c]] = p[c];
            }
        }
        self.leaf(a)
    }

    /// Leaf column vector, n x 1.
    pub fn leaf_col(&mut self, values: &[f64]) -> NodeId {
        let a = Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap();
        self.leaf(a)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::Matmul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    /// Matrix plus a broadcast 1 x n row (bias add).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row).row(0).to_owned();
        let v = self.value(a) + &r;
        self.push(Op::AddRow(a, row), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        self.push(Op::AddConst(a, c), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    /// Local slope of leaky-relu as a value (1 or `slope`); used in JVP
    /// chains. Differentiates to zero.
    pub fn lrelu_deriv(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { slope });
        self.push(Op::LreluDeriv(a), v)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Op::SumAll(a), Array2::from_elem((1, 1), s))
    }

    /// Row sums: m x n -> m x 1.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum_axis(Axis(1));
        let m = s.len();
        self.push(Op::SumCols(a), s.into_shape_with_order((m, 1)).unwrap())
    }

    /// Row means: m x n -> m x 1.
    pub fn mean_cols(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).ncols();
        let s = self.value(a).sum_axis(Axis(1)) / n as f64;
        let m = s.len();
        self.push(Op::MeanCols(a), s.into_shape_with_order((m, 1)).unwrap())
    }

    /// Row-wise max with ties to the smallest column index: m x n -> m x 1.
    /// Also returns the argmax per row.
    pub fn max_cols(&mut self, a: NodeId) -> (NodeId, Vec<usize>) {
        let v = self.value(a);
        let (m, n) = v.dim();
        assert!(n > 0);
        let mut arg = Vec::with_capacity(m);
        let mut out = Array2::zeros((m, 1));
        for r in 0..m {
            let mut best = 0usize;
            let mut bv = v[[r, 0]];
            for c in 1..n {
                if v[[r, c]] > bv {
                    bv = v[[r, c]];
                    best = c;
                }
            }
            arg.push(best);
            out[[r, 0]] = bv;
        }
        let id = self.push(Op::MaxCols(a, arg.clone()), out);
        (id, arg)
    }

    /// Column-wise max with ties to the smallest row index: m x n -> 1 x n.
    pub fn max_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (m, n) = v.dim();
        assert!(m > 0);
        let mut arg = Vec::with_capacity(n);
        let mut out = Array2::zeros((1, n));
        for c in 0..n {
            let mut best = 0usize;
            let mut bv = v[[0, c]];
            for r in 1..m {
                if v[[r, c]] > bv {
                    bv = v[[r, c]];
                    best = r;
                }
            }
            arg.push(best);
            out[[0, c]] = bv;
        }
        self.push(Op::MaxRows(a, arg), out)
    }

    /// Select rows by index (repeats allowed): len(idx) x n.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(a);
        let n = v.ncols();
        let mut out = Array2::zeros((idx.len(), n));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&v.row(i));
        }
        self.push(Op::GatherRows(a, idx.to_vec()), out)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.nrows(), vb.nrows());
        let mut out = Array2::zeros((va.nrows(), va.ncols() + vb.ncols()));
        out.slice_mut(ndarray::s![.., ..va.ncols()]).assign(va);
        out.slice_mut(ndarray::s![.., va.ncols()..]).assign(vb);
        self.push(Op::ConcatCols(a, b), out)
    }

    /// 1 x n -> m x n by row repetition.
    pub fn broadcast_row(&mut self, a: NodeId, m: usize) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.nrows(), 1);
        let out = Array2::from_shape_fn((m, v.ncols()), |(_, c)| v[[0, c]]);
        self.push(Op::BroadcastRow(a), out)
    }

    /// m x 1 -> m x n by column repetition.
    pub fn broadcast_col(&mut self, a: NodeId, n: usize) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.ncols(), 1);
        let out = Array2::from_shape_fn((v.nrows(), n), |(r, _)| v[[r, 0]]);
        self.push(Op::BroadcastCol(a), out)
    }

    /// x^2 via mul(x, x).
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    /// Row-wise squared L2 norm of an m x n matrix: m x 1.
    pub fn row_norm_sq(&mut self, a: NodeId) -> NodeId {
        let sq = self.square(a);
        self.sum_cols(sq)
    }

    /// Reverse sweep from a scalar node; returns adjoints for every node.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * self.value(*b));
                    accumulate(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0));
                    let n = gr.len();
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, gr.into_shape_with_order((1, n)).unwrap());
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::AddConst(a, _) => accumulate(&mut grads, *a, g.clone()),
                Op::Recip(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, *a, -(&g * y * y));
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &self.nodes[i].value),
                Op::Ln(a) => accumulate(&mut grads, *a, &g / self.value(*a)),
                Op::Sqrt(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, *a, &g * 0.5 / y);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, *a, &g * y * &(1.0 - y));
                }
                Op::LeakyRelu(a, s) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { *s });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::LreluDeriv(_) => {}
                Op::Clamp(a, lo, hi) => {
                    let mask = self
                        .value(*a)
                        .mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::SumAll(a) => {
                    let v = self.value(*a);
                    accumulate(&mut grads, *a, Array2::from_elem(v.raw_dim(), g[[0, 0]]));
                }
                Op::SumCols(a) => {
                    let v = self.value(*a);
                    let out = Array2::from_shape_fn(v.raw_dim(), |(r, _)| g[[r, 0]]);
                    accumulate(&mut grads, *a, out);
                }
                Op::MeanCols(a) => {
                    let v = self.value(*a);
                    let n = v.ncols() as f64;
                    let out = Array2::from_shape_fn(v.raw_dim(), |(r, _)| g[[r, 0]] / n);
                    accumulate(&mut grads, *a, out);
                }
                Op::MaxCols(a, arg) => {
                    let v = self.value(*a);
                    let mut out = Array2::zeros(v.raw_dim());
                    for (r, &c) in arg.iter().enumerate() {
                        out[[r, c]] = g[[r, 0]];
                    }
                    accumulate(&mut grads, *a, out);
                }
                Op::MaxRows(a, arg) => {
                    let v = self.value(*a);
                    let mut out = Array2::zeros(v.raw_dim());
                    for (c, &r) in arg.iter().enumerate() {
                        out[[r, c]] = g[[0, c]];
                    }
                    accumulate(&mut grads, *a, out);
                }
                Op::GatherRows(a, idx) => {
                    let v = self.value(*a);
                    let mut out = Array2::zeros(v.raw_dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = out.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *a, out);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    accumulate(&mut grads, *a, g.slice(ndarray::s![.., ..ca]).to_owned());
                    accumulate(&mut grads, *b, g.slice(ndarray::s![.., ca..]).to_owned());
                }
                Op::BroadcastRow(a) => {
                    let gr = g.sum_axis(Axis(0));
                    let n = gr.len();
                    accumulate(&mut grads, *a, gr.into_shape_with_order((1, n)).unwrap());
                }
                Op::BroadcastCol(a) => {
                    let gc = g.sum_axis(Axis(1));
                    let m = gc.len();
                    accumulate(&mut grads, *a, gc.into_shape_with_order((m, 1)).unwrap());
                }
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Maximum relative error between an analytic gradient and central finite
/// differences of `f` at `x`, perturbing every entry. The denominator is
/// guarded below by `floor` so near-zero gradients are compared absolutely.
pub fn finite_diff_rel_err<F>(f: F, x: &Array2<f64>, analytic: &Array2<f64>, floor: f64) -> f64
where
    F: Fn(&Array2<f64>) -> f64,
{
    assert_eq!(x.raw_dim(), analytic.raw_dim());
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let h = 1e-5 * x[idx].abs().max(1.0);
        let orig = xp[idx];
        xp[idx] = orig + h;
        let fp = f(&xp);
        xp[idx] = orig - h;
        let fm = f(&xp);
        xp[idx] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[idx];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((m, n), |_| rng.gen_range(-1.0..1.0))
    }

    /// FD-check the gradient of `build` w.r.t. its single input.
    fn check_unary<F>(build: F, x: Array2<f64>)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let out = build(&mut tape, xid);
        let grads = tape.backward(out);
        let analytic = grads.get(xid, &tape);
        let err = finite_diff_rel_err(
            |xv| {
                let mut t = Tape::new();
                let id = t.leaf(xv.clone());
                let o = build(&mut t, id);
                t.scalar(o)
            },
            &x,
            &analytic,
            1e-2,
        );
        assert!(err < 1e-7, "fd mismatch: {err:.3e}");
    }

    #[test]
    fn elementwise_ops_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 4, 3);
        check_unary(
            |t, x| {
                let s = t.sigmoid(x);
                t.sum_all(s)
            },
            x.clone(),
        );
        check_unary(
            |t, x| {
                let s = t.exp(x);
                t.sum_all(s)
            },
            x.clone(),
        );
        check_unary(
            |t, x| {
                let s = t.leaky_relu(x, 0.01);
                t.sum_all(s)
            },
            x.clone(),
        );
        check_unary(
            |t, x| {
                let s = t.square(x);
                t.sum_all(s)
            },
            x.clone(),
        );
        check_unary(
            |t, x| {
                let s = t.scale(x, 2.5);
                let s = t.add_const(s, 0.3);
                let s = t.square(s);
                t.sum_all(s)
            },
            x.clone(),
        );
        // strictly positive inputs for ln/sqrt/recip
        let xp = x.mapv(|v| v.abs() + 0.5);
        check_unary(
            |t, x| {
                let s = t.ln(x);
                t.sum_all(s)
            },
            xp.clone(),
        );
        check_unary(
            |t, x| {
                let s = t.sqrt(x);
                t.sum_all(s)
            },
            xp.clone(),
        );
        check_unary(
            |t, x| {
                let s = t.recip(x);
                t.sum_all(s)
            },
            xp,
        );
    }

    #[test]
    fn structural_ops_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 5, 4);
        check_unary(
            |t, x| {
                let s = t.sum_cols(x);
                let q = t.square(s);
                t.sum_all(q)
            },
            x.clone(),
        );
        check_unary(
            |t, x| {
                let s = t.mean_cols(x);
                let q = t.square(s);
                t.sum_all(q)
            },
            x.clone(),
        );
        check_unary(
            |t, x| {
                let (s, _) = t.max_cols(x);
                let q = t.square(s);
                t.sum_all(q)
            },
            x.clone(),
        );
        check_unary(
            |t, x| {
                let s = t.max_rows(x);
                let q = t.square(s);
                t.sum_all(q)
            },
            x.clone(),
        );
        check_unary(
            |t, x| {
                let s = t.gather_rows(x, &[0, 2, 2, 4]);
                let q = t.square(s);
                t.sum_all(q)
            },
            x.clone(),
        );
        check_unary(
            |t, x| {
                let s = t.transpose(x);
                let q = t.square(s);
                t.sum_all(q)
            },
            x.clone(),
        );
        check_unary(
            |t, x| {
                let s = t.clamp(x, -0.5, 0.5);
                let q = t.square(s);
                t.sum_all(q)
            },
            x.clone(),
        );
        let col = rand_mat(&mut rng, 5, 1);
        check_unary(
            |t, x| {
                let b = t.broadcast_col(x, 3);
                let q = t.square(b);
                t.sum_all(q)
            },
            col,
        );
        let row = rand_mat(&mut rng, 1, 4);
        check_unary(
            |t, x| {
                let b = t.broadcast_row(x, 6);
                let q = t.square(b);
                t.sum_all(q)
            },
            row,
        );
    }

    #[test]
    fn matmul_fd_both_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let mut tape = Tape::new();
        let aid = tape.leaf(a.clone());
        let bid = tape.leaf(b.clone());
        let m = tape.matmul(aid, bid);
        let sq = tape.square(m);
        let out = tape.sum_all(sq);
        let grads = tape.backward(out);
        for first in [true, false] {
            let (x, xid, other) = if first {
                (&a, aid, &b)
            } else {
                (&b, bid, &a)
            };
            let analytic = grads.get(xid, &tape);
            let err = finite_diff_rel_err(
                |xv| {
                    let mut t = Tape::new();
                    let (aa, bb) = if first {
                        let aa = t.leaf(xv.clone());
                        (aa, t.leaf(other.clone()))
                    } else {
                        let aa = t.leaf(other.clone());
                        (aa, t.leaf(xv.clone()))
                    };
                    let m = t.matmul(aa, bb);
                    let sq = t.square(m);
                    let o = t.sum_all(sq);
                    t.scalar(o)
                },
                x,
                &analytic,
                1e-2,
            );
            assert!(err < 1e-7, "matmul fd {err:.3e}");
        }
    }

    #[test]
    fn composite_fd_all_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_mat(&mut rng, 3, 3);
        let q = rand_mat(&mut rng, 3, 3);
        let r = rand_mat(&mut rng, 1, 6);
        let build = |t: &mut Tape, p: NodeId, q: NodeId, r: NodeId| {
            let s = t.mul(p, q);
            let d = t.sub(s, p);
            let e = t.add(d, q);
            let c = t.concat_cols(e, d);
            let f = t.add_row(c, r);
            let sq = t.square(f);
            t.sum_all(sq)
        };
        let mut tape = Tape::new();
        let pid = tape.leaf(p.clone());
        let qid = tape.leaf(q.clone());
        let rid = tape.leaf(r.clone());
        let out = build(&mut tape, pid, qid, rid);
        let grads = tape.backward(out);
        let all = [(&p, pid), (&q, qid), (&r, rid)];
        for (i, (x, xid)) in all.iter().enumerate() {
            let analytic = grads.get(*xid, &tape);
            let err = finite_diff_rel_err(
                |xv| {
                    let mut t = Tape::new();
                    let pv = if i == 0 { xv } else { &p };
                    let qv = if i == 1 { xv } else { &q };
                    let rv = if i == 2 { xv } else { &r };
                    let pid = t.leaf(pv.clone());
                    let qid = t.leaf(qv.clone());
                    let rid = t.leaf(rv.clone());
                    let o = build(&mut t, pid, qid, rid);
                    t.scalar(o)
                },
                x,
                &analytic,
                1e-2,
            );
            assert!(err < 1e-7, "composite slot {i} fd {err:.3e}");
        }
    }

    #[test]
    fn mlp_with_jvp_chain_fd() {
        // y = sigmoid(w2' lrelu(w1 x + b1)); the loss also consumes a JVP of
        // y w.r.t. x, so FD exercises the second-order path through the net.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w1 = rand_mat(&mut rng, 3, 8);
        let b1 = rand_mat(&mut rng, 1, 8);
        let w2 = rand_mat(&mut rng, 8, 1);
        let x = rand_mat(&mut rng, 5, 3);

        let build = |t: &mut Tape, w1: NodeId, b1: NodeId, w2: NodeId, x: NodeId| {
            let a1m = t.matmul(x, w1);
            let a1 = t.add_row(a1m, b1);
            let h1 = t.leaky_relu(a1, 0.01);
            let y = t.matmul(h1, w2);
            let ys = t.sigmoid(y);
            // JVP w.r.t. x in direction e0
            let m = t.value(x).nrows();
            let mut s = Array2::zeros((m, 3));
            for row in 0..m {
                s[[row, 0]] = 1.0;
            }
            let seed = t.leaf(s);
            let t_a1 = t.matmul(seed, w1);
            let phi = t.lrelu_deriv(a1, 0.01);
            let t_h1 = t.mul(phi, t_a1);
            let t_y = t.matmul(t_h1, w2);
            let neg = t.neg(ys);
            let one_minus = t.add_const(neg, 1.0);
            let sprime = t.mul(ys, one_minus);
            let t_ys = t.mul(sprime, t_y);
            let sq1 = t.square(ys);
            let sq2 = t.square(t_ys);
            let s1 = t.sum_all(sq1);
            let s2 = t.sum_all(sq2);
            t.add(s1, s2)
        };

        let mut tape = Tape::new();
        let w1id = tape.leaf(w1.clone());
        let b1id = tape.leaf(b1.clone());
        let w2id = tape.leaf(w2.clone());
        let xid = tape.leaf(x.clone());
        let out = build(&mut tape, w1id, b1id, w2id, xid);
        let grads = tape.backward(out);
        let all = [(&w1, w1id), (&b1, b1id), (&w2, w2id), (&x, xid)];
        for (i, (xv, xid)) in all.iter().enumerate() {
            let analytic = grads.get(*xid, &tape);
            let err = finite_diff_rel_err(
                |pert| {
                    let mut t = Tape::new();
                    let vals: Vec<&Array2<f64>> = all
                        .iter()
                        .enumerate()
                        .map(|(j, (orig, _))| if i == j { pert } else { *orig })
                        .collect();
                    let w1 = t.leaf(vals[0].clone());
                    let b1 = t.leaf(vals[1].clone());
                    let w2 = t.leaf(vals[2].clone());
                    let x = t.leaf(vals[3].clone());
                    let o = build(&mut t, w1, b1, w2, x);
                    t.scalar(o)
                },
                xv,
                &analytic,
                1e-2,
            );
            assert!(err < 1e-6, "jvp-chain slot {i} fd {err:.3e}");
        }
    }

    #[test]
    fn max_ties_take_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr2(&[[0.5, 0.5, 0.2]]));
        let (_, arg) = tape.max_cols(x);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn backward_root_must_be_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr2(&[[1.0, 2.0]]));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            tape.backward(x);
        }));
        assert!(result.is_err());
    }
}
