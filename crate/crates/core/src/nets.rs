//! The three learnable functions: set encoder E, deep branched probabilistic
//! implicit function f, and inverse implicit function g.
//!
//! Every forward exists twice: a plain `ndarray` path for inference and a
//! tape path for training. Both apply operations in the same order, so their
//! outputs are bit-identical.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SurfaceSamples;
use crate::tape::{NodeId, Tape};

/// Clamp range for the predicted log variance.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 4.0;

/// Gradient norms below this are treated as an undefined surface normal.
pub const NORMAL_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NetsError {
    #[error("empty input point set")]
    EmptyInput,
    #[error("undefined normal: spatial gradient norm {0:.3e}")]
    UndefinedNormal(f64),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Architecture hyperparameters. All widths are configurable; the defaults
/// are the smallest sizes that train on toy data at d=256, k=12.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Shape-code dimension.
    pub d: usize,
    /// Part-embedding dimension (branch count).
    pub k: usize,
    /// Per-point encoder stack widths.
    pub enc_widths: Vec<usize>,
    /// Number of parallel point-feature stacks in f.
    pub n_stacks: usize,
    /// Layer widths inside each parallel stack.
    pub stack_widths: Vec<usize>,
    /// Trunk widths after the stack concat.
    pub trunk_widths: Vec<usize>,
    /// Hidden widths of the inverse function g.
    pub inverse_widths: Vec<usize>,
    /// Negative slope of the leaky relu.
    pub lrelu_slope: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            d: 256,
            k: 12,
            enc_widths: vec![64, 128, 256],
            n_stacks: 4,
            stack_widths: vec![128, 128],
            trunk_widths: vec![256, 128],
            inverse_widths: vec![256, 256, 128],
            lrelu_slope: 0.01,
        }
    }
}

impl Hyper {
    /// Small architecture for desk-scale runs and tests.
    pub fn toy(d: usize, k: usize) -> Self {
        Hyper {
            d,
            k,
            enc_widths: vec![32, 64, 128],
            n_stacks: 4,
            stack_widths: vec![64, 64],
            trunk_widths: vec![128, 64],
            inverse_widths: vec![128, 128, 64],
            lrelu_slope: 0.01,
        }
    }
}

/// One fully connected layer; `w` is (in x out), `b` is (1 x out).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound));
        let b = Array2::from_shape_fn((1, fan_out), |_| rng.gen_range(-bound..bound));
        Dense { w, b }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b.row(0)
    }
}

/// All weights of E, f, g plus the hyperparameters and the init seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub seed: u64,
    pub encoder: Vec<Dense>,
    pub enc_proj: Dense,
    pub stacks: Vec<Vec<Dense>>,
    pub trunk: Vec<Dense>,
    pub head_mu: Dense,
    pub head_logvar: Dense,
    pub inverse: Vec<Dense>,
}

/// The d-dimensional global shape code, stored 1 x d.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCode(pub Array2<f64>);

impl ShapeCode {
    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_vec(&self) -> Vec<f64> {
        self.0.row(0).to_vec()
    }
}

/// Per-point Gaussian part embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PartEmbedding {
    /// Mean, entries in [0, 1].
    pub o_mu: Vec<f64>,
    /// Log variance, clamped to [LOG_VAR_MIN, LOG_VAR_MAX].
    pub o_log_var: Vec<f64>,
}

impl PartEmbedding {
    pub fn k(&self) -> usize {
        self.o_mu.len()
    }

    /// Per-dimension standard deviation exp(log_var / 2).
    pub fn o_sigma(&self) -> Vec<f64> {
        self.o_log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// Scalar variance: exp of the mean of the log variances.
    pub fn sigma_sq_scalar(&self) -> f64 {
        let mean = self.o_log_var.iter().sum::<f64>() / self.o_log_var.len() as f64;
        mean.exp()
    }

    /// Mean of the per-dimension variances (uncertainty statistic).
    pub fn mean_variance(&self) -> f64 {
        self.o_log_var.iter().map(|lv| lv.exp()).sum::<f64>() / self.o_log_var.len() as f64
    }
}

/// Batch of part embeddings, rows are points.
#[derive(Debug, Clone, PartialEq)]
pub struct PartEmbeddings {
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
}

impl PartEmbeddings {
    pub fn len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.nrows() == 0
    }

    pub fn k(&self) -> usize {
        self.mu.ncols()
    }

    pub fn get(&self, i: usize) -> PartEmbedding {
        PartEmbedding {
            o_mu: self.mu.row(i).to_vec(),
            o_log_var: self.log_var.row(i).to_vec(),
        }
    }

    /// Scalar sigma^2 per point: exp(mean over k of log variance).
    pub fn sigma_sq_scalar(&self) -> Vec<f64> {
        self.log_var
            .rows()
            .into_iter()
            .map(|r| (r.sum() / r.len() as f64).exp())
            .collect()
    }
}

/// Deterministic fan-in uniform initialization; defaults d=256, k=12.
pub fn init_params(d: usize, k: usize, seed: u64) -> ModelParams {
    init_with_hyper(Hyper { d, k, ..Hyper::default() }, seed)
}

pub fn init_with_hyper(hyper: Hyper, seed: u64) -> ModelParams {
    assert!(hyper.d >= 1 && hyper.k >= 1, "d and k must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut encoder = Vec::new();
    let mut fan = 3;
    for &w in &hyper.enc_widths {
        encoder.push(Dense::init(&mut rng, fan, w));
        fan = w;
    }
    let enc_proj = Dense::init(&mut rng, fan, hyper.d);

    let mut stacks = Vec::new();
    for _ in 0..hyper.n_stacks {
        let mut layers = Vec::new();
        let mut fan = 3 + hyper.d;
        for &w in &hyper.stack_widths {
            layers.push(Dense::init(&mut rng, fan, w));
            fan = w;
        }
        stacks.push(layers);
    }
    let concat_width = hyper.n_stacks * hyper.stack_widths.last().copied().unwrap_or(3 + hyper.d);

    let mut trunk = Vec::new();
    let mut fan = concat_width;
    for &w in &hyper.trunk_widths {
        trunk.push(Dense::init(&mut rng, fan, w));
        fan = w;
    }
    let head_mu = Dense::init(&mut rng, fan, hyper.k);
    let head_logvar = Dense::init(&mut rng, fan, hyper.k);

    let mut inverse = Vec::new();
    let mut fan = hyper.k + hyper.d;
    for &w in &hyper.inverse_widths {
        inverse.push(Dense::init(&mut rng, fan, w));
        fan = w;
    }
    inverse.push(Dense::init(&mut rng, fan, 3));

    ModelParams {
        hyper,
        seed,
        encoder,
        enc_proj,
        stacks,
        trunk,
        head_mu,
        head_logvar,
        inverse,
    }
}

impl ModelParams {
    /// Visit every parameter tensor with a stable name, in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &Array2<f64>)) {
        for (i, l) in self.encoder.iter().enumerate() {
            f(&format!("enc.{i}.w"), &l.w);
            f(&format!("enc.{i}.b"), &l.b);
        }
        f("enc_proj.w", &self.enc_proj.w);
        f("enc_proj.b", &self.enc_proj.b);
        for (s, stack) in self.stacks.iter().enumerate() {
            for (i, l) in stack.iter().enumerate() {
                f(&format!("stack.{s}.{i}.w"), &l.w);
                f(&format!("stack.{s}.{i}.b"), &l.b);
            }
        }
        for (i, l) in self.trunk.iter().enumerate() {
            f(&format!("trunk.{i}.w"), &l.w);
            f(&format!("trunk.{i}.b"), &l.b);
        }
        f("head_mu.w", &self.head_mu.w);
        f("head_mu.b", &self.head_mu.b);
        f("head_logvar.w", &self.head_logvar.w);
        f("head_logvar.b", &self.head_logvar.b);
        for (i, l) in self.inverse.iter().enumerate() {
            f(&format!("inv.{i}.w"), &l.w);
            f(&format!("inv.{i}.b"), &l.b);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        for (i, l) in self.encoder.iter_mut().enumerate() {
            f(&format!("enc.{i}.w"), &mut l.w);
            f(&format!("enc.{i}.b"), &mut l.b);
        }
        f("enc_proj.w", &mut self.enc_proj.w);
        f("enc_proj.b", &mut self.enc_proj.b);
        for (s, stack) in self.stacks.iter_mut().enumerate() {
            for (i, l) in stack.iter_mut().enumerate() {
                f(&format!("stack.{s}.{i}.w"), &mut l.w);
                f(&format!("stack.{s}.{i}.b"), &mut l.b);
            }
        }
        for (i, l) in self.trunk.iter_mut().enumerate() {
            f(&format!("trunk.{i}.w"), &mut l.w);
            f(&format!("trunk.{i}.b"), &mut l.b);
        }
        f("head_mu.w", &mut self.head_mu.w);
        f("head_mu.b", &mut self.head_mu.b);
        f("head_logvar.w", &mut self.head_logvar.w);
        f("head_logvar.b", &mut self.head_logvar.b);
        for (i, l) in self.inverse.iter_mut().enumerate() {
            f(&format!("inv.{i}.w"), &mut l.w);
            f(&format!("inv.{i}.b"), &mut l.b);
        }
    }

    /// Parameter names whose tensors belong to the inverse function g.
    pub fn is_inverse_param(name: &str) -> bool {
        name.starts_with("inv.")
    }
}

fn points_matrix(points: &[[f64; 3]]) -> Array2<f64> {
    let mut a = Array2::zeros((points.len(), 3));
    for (i, p) in points.iter().enumerate() {
        for c in 0..3 {
            a[[i, c]] = p[c];
        }
    }
    a
}

/// Global shape code: per-point features, column-wise max pool, projection.
/// Exactly permutation- and duplication-invariant.
pub fn encode(params: &ModelParams, surface: &SurfaceSamples) -> Result<ShapeCode, NetsError> {
    if surface.is_empty() {
        return Err(NetsError::EmptyInput);
    }
    encode_points(params, &surface.points)
}

pub fn encode_points(params: &ModelParams, points: &[[f64; 3]]) -> Result<ShapeCode, NetsError> {
    if points.is_empty() {
        return Err(NetsError::EmptyInput);
    }
    let slope = params.hyper.lrelu_slope;
    let mut h = points_matrix(points);
    for l in &params.encoder {
        h = l.forward(&h).mapv(|x| if x > 0.0 { x } else { slope * x });
    }
    // column-wise max over points -> 1 x w
    let w = h.ncols();
    let mut pooled = Array2::zeros((1, w));
    for c in 0..w {
        let mut best = h[[0, c]];
        for r in 1..h.nrows() {
            if h[[r, c]] > best {
                best = h[[r, c]];
            }
        }
        pooled[[0, c]] = best;
    }
    Ok(ShapeCode(params.enc_proj.forward(&pooled)))
}

/// Branched implicit function: four parallel stacks over (x, z), concat,
/// trunk, then sigmoid mean head and clamped log-variance head.
pub fn implicit_forward(
    params: &ModelParams,
    points: &[[f64; 3]],
    z: &ShapeCode,
) -> PartEmbeddings {
    let x = points_matrix(points);
    implicit_forward_mat(params, &x, z)
}

pub fn implicit_forward_mat(
    params: &ModelParams,
    x: &Array2<f64>,
    z: &ShapeCode,
) -> PartEmbeddings {
    let slope = params.hyper.lrelu_slope;
    let m = x.nrows();
    let zb = broadcast_rows(&z.0, m);
    let input = concat_cols_plain(x, &zb);

    let mut stack_outs = Vec::with_capacity(params.stacks.len());
    for stack in &params.stacks {
        let mut h = input.clone();
        for l in stack {
            h = l.forward(&h).mapv(|v| if v > 0.0 { v } else { slope * v });
        }
        stack_outs.push(h);
    }
    let mut zhat = stack_outs[0].clone();
    for s in &stack_outs[1..] {
        zhat = concat_cols_plain(&zhat, s);
    }
    let mut h = zhat;
    for l in &params.trunk {
        h = l.forward(&h).mapv(|v| if v > 0.0 { v } else { slope * v });
    }
    let mu = params
        .head_mu
        .forward(&h)
        .mapv(|v| 1.0 / (1.0 + (-v).exp()));
    let log_var = params
        .head_logvar
        .forward(&h)
        .mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
    PartEmbeddings { mu, log_var }
}

/// Max-pooled occupancy and the branch (part) index; ties take the smallest
/// index.
pub fn occupancy(pev: &PartEmbedding) -> (f64, usize) {
    let mut best = 0usize;
    let mut bv = pev.o_mu[0];
    for (i, &v) in pev.o_mu.iter().enumerate().skip(1) {
        if v > bv {
            bv = v;
            best = i;
        }
    }
    (bv, best)
}

/// Reparameterized sample o = mu + eps * sigma.
pub fn sample_embedding(pev: &PartEmbedding, eps: &[f64]) -> Vec<f64> {
    assert_eq!(eps.len(), pev.k());
    let sigma = pev.o_sigma();
    pev.o_mu
        .iter()
        .zip(eps)
        .zip(&sigma)
        .map(|((m, e), s)| m + e * s)
        .collect()
}

/// Inverse implicit function: (o, z) -> 3D point, feed-forward only.
pub fn inverse_forward(params: &ModelParams, o: &Array2<f64>, z: &ShapeCode) -> Array2<f64> {
    let slope = params.hyper.lrelu_slope;
    let m = o.nrows();
    let zb = broadcast_rows(&z.0, m);
    let mut h = concat_cols_plain(o, &zb);
    let last = params.inverse.len() - 1;
    for (i, l) in params.inverse.iter().enumerate() {
        h = l.forward(&h);
        if i != last {
            h = h.mapv(|v| if v > 0.0 { v } else { slope * v });
        }
    }
    h
}

/// Spatial gradient of the max-pooled occupancy at each point, computed by
/// three forward-mode passes through f. Rows are d(O)/d(x,y,z).
pub fn occupancy_spatial_gradient(
    params: &ModelParams,
    points: &[[f64; 3]],
    z: &ShapeCode,
) -> Array2<f64> {
    let slope = params.hyper.lrelu_slope;
    let x = points_matrix(points);
    let m = x.nrows();
    let zb = broadcast_rows(&z.0, m);
    let input = concat_cols_plain(&x, &zb);

    // forward, keeping pre-activations of every layer
    struct StackTrace {
        pre: Vec<Array2<f64>>,
    }
    let mut traces = Vec::new();
    let mut stack_outs = Vec::new();
    for stack in &params.stacks {
        let mut h = input.clone();
        let mut pre = Vec::new();
        for l in stack {
            let a = l.forward(&h);
            h = a.mapv(|v| if v > 0.0 { v } else { slope * v });
            pre.push(a);
        }
        traces.push(StackTrace { pre });
        stack_outs.push(h);
    }
    let mut zhat = stack_outs[0].clone();
    for s in &stack_outs[1..] {
        zhat = concat_cols_plain(&zhat, s);
    }
    let mut trunk_pre = Vec::new();
    let mut h = zhat;
    for l in &params.trunk {
        let a = l.forward(&h);
        h = a.mapv(|v| if v > 0.0 { v } else { slope * v });
        trunk_pre.push(a);
    }
    let a_mu = params.head_mu.forward(&h);
    let mu = a_mu.mapv(|v| 1.0 / (1.0 + (-v).exp()));
    // argmax per row
    let mut argmax = Vec::with_capacity(m);
    for r in 0..m {
        let mut best = 0usize;
        for c in 1..mu.ncols() {
            if mu[[r, c]] > mu[[r, best]] {
                best = c;
            }
        }
        argmax.push(best);
    }

    let lrelu_mask = |a: &Array2<f64>| a.mapv(|v| if v > 0.0 { 1.0 } else { slope });

    let mut grad = Array2::zeros((m, 3));
    for axis in 0..3 {
        // tangent through each stack; input tangent is e_axis on the x block
        let mut tangents = Vec::new();
        for (stack, trace) in params.stacks.iter().zip(&traces) {
            // first layer: tangent = row `axis` of w broadcast over points
            let w_row = stack[0].w.row(axis).to_owned();
            let mut t = Array2::from_shape_fn((m, w_row.len()), |(_, c)| w_row[c]);
            t = &t * &lrelu_mask(&trace.pre[0]);
            for (l, a) in stack.iter().zip(&trace.pre).skip(1) {
                t = t.dot(&l.w);
                t = &t * &lrelu_mask(a);
            }
            tangents.push(t);
        }
        let mut t = tangents[0].clone();
        for s in &tangents[1..] {
            t = concat_cols_plain(&t, s);
        }
        for (l, a) in params.trunk.iter().zip(&trunk_pre) {
            t = t.dot(&l.w);
            t = &t * &lrelu_mask(a);
        }
        let t_amu = t.dot(&params.head_mu.w);
        for r in 0..m {
            let c = argmax[r];
            let s = mu[[r, c]];
            grad[[r, axis]] = s * (1.0 - s) * t_amu[[r, c]];
        }
    }
    grad
}

/// Outward unit normal at `x`: the occupancy decreases outward, so this is
/// the negated, normalized spatial gradient.
pub fn spatial_normal(
    params: &ModelParams,
    x: [f64; 3],
    z: &ShapeCode,
) -> Result<[f64; 3], NetsError> {
    let g = occupancy_spatial_gradient(params, &[x], z);
    let n = (g[[0, 0]].powi(2) + g[[0, 1]].powi(2) + g[[0, 2]].powi(2)).sqrt();
    if n < NORMAL_EPS {
        return Err(NetsError::UndefinedNormal(n));
    }
    Ok([-g[[0, 0]] / n, -g[[0, 1]] / n, -g[[0, 2]] / n])
}

pub(crate) fn broadcast_rows(row: &Array2<f64>, m: usize) -> Array2<f64> {
    assert_eq!(row.nrows(), 1);
    Array2::from_shape_fn((m, row.ncols()), |(_, c)| row[[0, c]])
}

pub(crate) fn concat_cols_plain(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).unwrap()
}

// ---------------------------------------------------------------------------
// Tape forwards
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct DenseNode {
    pub w: NodeId,
    pub b: NodeId,
}

/// Parameter tensors registered as tape leaves, mirroring [`ModelParams`].
pub struct TapeParams {
    pub hyper: Hyper,
    pub encoder: Vec<DenseNode>,
    pub enc_proj: DenseNode,
    pub stacks: Vec<Vec<DenseNode>>,
    pub trunk: Vec<DenseNode>,
    pub head_mu: DenseNode,
    pub head_logvar: DenseNode,
    pub inverse: Vec<DenseNode>,
}

impl ModelParams {
    /// Register every parameter as a tape leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> TapeParams {
        let dense = |tape: &mut Tape, l: &Dense| DenseNode {
            w: tape.leaf(l.w.clone()),
            b: tape.leaf(l.b.clone()),
        };
        TapeParams {
            hyper: self.hyper.clone(),
            encoder: self.encoder.iter().map(|l| dense(tape, l)).collect(),
            enc_proj: dense(tape, &self.enc_proj),
            stacks: self
                .stacks
                .iter()
                .map(|s| s.iter().map(|l| dense(tape, l)).collect())
                .collect(),
            trunk: self.trunk.iter().map(|l| dense(tape, l)).collect(),
            head_mu: dense(tape, &self.head_mu),
            head_logvar: dense(tape, &self.head_logvar),
            inverse: self.inverse.iter().map(|l| dense(tape, l)).collect(),
        }
    }
}

impl TapeParams {
    /// Visit parameter nodes in the same order and with the same names as
    /// [`ModelParams::visit`].
    pub fn visit(&self, mut f: impl FnMut(&str, NodeId)) {
        for (i, l) in self.encoder.iter().enumerate() {
            f(&format!("enc.{i}.w"), l.w);
            f(&format!("enc.{i}.b"), l.b);
        }
        f("enc_proj.w", self.enc_proj.w);
        f("enc_proj.b", self.enc_proj.b);
        for (s, stack) in self.stacks.iter().enumerate() {
            for (i, l) in stack.iter().enumerate() {
                f(&format!("stack.{s}.{i}.w"), l.w);
                f(&format!("stack.{s}.{i}.b"), l.b);
            }
        }
        for (i, l) in self.trunk.iter().enumerate() {
            f(&format!("trunk.{i}.w"), l.w);
            f(&format!("trunk.{i}.b"), l.b);
        }
        f("head_mu.w", self.head_mu.w);
        f("head_mu.b", self.head_mu.b);
        f("head_logvar.w", self.head_logvar.w);
        f("head_logvar.b", self.head_logvar.b);
        for (i, l) in self.inverse.iter().enumerate() {
            f(&format!("inv.{i}.w"), l.w);
            f(&format!("inv.{i}.b"), l.b);
        }
    }
}

fn tape_dense(tape: &mut Tape, l: DenseNode, x: NodeId) -> NodeId {
    let a = tape.matmul(x, l.w);
    tape.add_row(a, l.b)
}

fn tape_lrelu_dense(tape: &mut Tape, l: DenseNode, x: NodeId, slope: f64) -> NodeId {
    let a = tape_dense(tape, l, x);
    tape.leaky_relu(a, slope)
}

/// Tape version of [`encode_points`]; returns the 1 x d shape code node.
pub fn tape_encode(tape: &mut Tape, tp: &TapeParams, points: NodeId) -> NodeId {
    let slope = tp.hyper.lrelu_slope;
    let mut h = points;
    for l in &tp.encoder {
        h = tape_lrelu_dense(tape, *l, h, slope);
    }
    let pooled = tape.max_rows(h);
    tape_dense(tape, tp.enc_proj, pooled)
}

/// Tape version of [`implicit_forward`]: (mu, log_var) nodes, both m x k.
pub fn tape_implicit(
    tape: &mut Tape,
    tp: &TapeParams,
    x: NodeId,
    z: NodeId,
) -> (NodeId, NodeId) {
    let (mu, logvar, _) = tape_implicit_inner(tape, tp, x, z, false);
    (mu, logvar)
}

/// Tape implicit forward that also builds the spatial gradient of the
/// max-pooled occupancy as a JVP chain: returns (mu, log_var, grad m x 3).
pub fn tape_implicit_with_grad(
    tape: &mut Tape,
    tp: &TapeParams,
    x: NodeId,
    z: NodeId,
) -> (NodeId, NodeId, NodeId) {
    let (mu, logvar, grad) = tape_implicit_inner(tape, tp, x, z, true);
    (mu, logvar, grad.expect("grad requested"))
}

fn tape_implicit_inner(
    tape: &mut Tape,
    tp: &TapeParams,
    x: NodeId,
    z: NodeId,
    want_grad: bool,
) -> (NodeId, NodeId, Option<NodeId>) {
    let slope = tp.hyper.lrelu_slope;
    let m = tape.value(x).nrows();
    let zb = tape.broadcast_row(z, m);
    let input = tape.concat_cols(x, zb);

    let mut stack_pre: Vec<Vec<NodeId>> = Vec::new();
    let mut stack_out = Vec::new();
    for stack in &tp.stacks {
        let mut h = input;
        let mut pres = Vec::new();
        for l in stack {
            let a = tape_dense(tape, *l, h);
            pres.push(a);
            h = tape.leaky_relu(a, slope);
        }
        stack_pre.push(pres);
        stack_out.push(h);
    }
    let mut zhat = stack_out[0];
    for s in &stack_out[1..] {
        zhat = tape.concat_cols(zhat, *s);
    }
    let mut trunk_pre = Vec::new();
    let mut h = zhat;
    for l in &tp.trunk {
        let a = tape_dense(tape, *l, h);
        trunk_pre.push(a);
        h = tape.leaky_relu(a, slope);
    }
    let a_mu = tape_dense(tape, tp.head_mu, h);
    let mu = tape.sigmoid(a_mu);
    let a_lv = tape_dense(tape, tp.head_logvar, h);
    let logvar = tape.clamp(a_lv, LOG_VAR_MIN, LOG_VAR_MAX);

    if !want_grad {
        return (mu, logvar, None);
    }

    // JVP chains for the three spatial seed directions. The max branch is
    // frozen at its forward value via a constant one-hot mask.
    let (_, argmax) = tape.max_cols(mu);
    let k = tp.hyper.k;
    let mut mask = Array2::zeros((m, k));
    for (r, &c) in argmax.iter().enumerate() {
        mask[[r, c]] = 1.0;
    }
    let mask = tape.leaf(mask);
    // sigmoid'(a) = mu (1 - mu)
    let neg_mu = tape.neg(mu);
    let one_minus = tape.add_const(neg_mu, 1.0);
    let sprime = tape.mul(mu, one_minus);

    let mut grad_cols = Vec::with_capacity(3);
    for axis in 0..3 {
        let mut tangents = Vec::new();
        for (stack, pres) in tp.stacks.iter().zip(&stack_pre) {
            // input tangent is e_axis on the x block, zero on z: the first
            // layer tangent is row `axis` of w broadcast over the batch
            let w_row = tape.gather_rows(stack[0].w, &[axis]);
            let t0 = tape.broadcast_row(w_row, m);
            let phi0 = tape.lrelu_deriv(pres[0], slope);
            let mut t = tape.mul(phi0, t0);
            for (l, a) in stack.iter().zip(pres).skip(1) {
                let tm = tape.matmul(t, l.w);
                let phi = tape.lrelu_deriv(*a, slope);
                t = tape.mul(phi, tm);
            }
            tangents.push(t);
        }
        let mut t = tangents[0];
        for s in &tangents[1..] {
            t = tape.concat_cols(t, *s);
        }
        for (l, a) in tp.trunk.iter().zip(&trunk_pre) {
            let tm = tape.matmul(t, l.w);
            let phi = tape.lrelu_deriv(*a, slope);
            t = tape.mul(phi, tm);
        }
        let t_amu = tape.matmul(t, tp.head_mu.w);
        let t_mu = tape.mul(sprime, t_amu);
        let sel = tape.mul(t_mu, mask);
        grad_cols.push(tape.sum_cols(sel));
    }
    let g01 = tape.concat_cols(grad_cols[0], grad_cols[1]);
    let grad = tape.concat_cols(g01, grad_cols[2]);
    (mu, logvar, Some(grad))
}

/// Tape version of [`inverse_forward`].
pub fn tape_inverse(tape: &mut Tape, tp: &TapeParams, o: NodeId, z: NodeId) -> NodeId {
    let slope = tp.hyper.lrelu_slope;
    let m = tape.value(o).nrows();
    let zb = tape.broadcast_row(z, m);
    let mut h = tape.concat_cols(o, zb);
    let last = tp.inverse.len() - 1;
    for (i, l) in tp.inverse.iter().enumerate() {
        h = tape_dense(tape, *l, h);
        if i != last {
            h = tape.leaky_relu(h, slope);
        }
    }
    h
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"SHCORRCK";
const CKPT_VERSION: u32 = 1;

/// Versioned binary container: magic, version, JSON header (hyperparameters
/// plus caller extras), then named little-endian f32 tensors.
pub fn save_checkpoint(
    params: &ModelParams,
    extra_header: &serde_json::Value,
    extra_tensors: &[(String, Array2<f64>)],
    path: &std::path::Path,
) -> Result<(), NetsError> {
    let mut tensors: Vec<(String, &Array2<f64>)> = Vec::new();
    let mut named: Vec<(String, Array2<f64>)> = Vec::new();
    params.visit(|name, t| named.push((name.to_string(), t.clone())));
    for (n, t) in &named {
        tensors.push((n.clone(), t));
    }
    for (n, t) in extra_tensors {
        tensors.push((n.clone(), t));
    }

    let header = serde_json::json!({
        "hyper": params.hyper,
        "seed": params.seed,
        "extra": extra_header,
    });
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        out.extend_from_slice(nb);
        out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a checkpoint; returns the params, the caller extras from the header,
/// and any extra tensors (optimizer state).
pub fn load_checkpoint(
    path: &std::path::Path,
) -> Result<(ModelParams, serde_json::Value, Vec<(String, Array2<f64>)>), NetsError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], NetsError> {
        if *pos + n > bytes.len() {
            return Err(NetsError::Corrupt("unexpected end of file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 8)? != CKPT_MAGIC {
        return Err(NetsError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(NetsError::Version(version));
    }
    let hlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(take(&mut pos, hlen)?)
        .map_err(|e| NetsError::Corrupt(format!("header json: {e}")))?;
    let hyper: Hyper = serde_json::from_value(header["hyper"].clone())
        .map_err(|e| NetsError::Corrupt(format!("hyper: {e}")))?;
    let seed = header["seed"].as_u64().unwrap_or(0);
    let extra = header.get("extra").cloned().unwrap_or(serde_json::Value::Null);

    let n_tensors = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors: Vec<(String, Array2<f64>)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
            .map_err(|_| NetsError::Corrupt("tensor name not utf8".into()))?;
        let rows = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let data = take(&mut pos, rows * cols * 4)?;
        let mut t = Array2::zeros((rows, cols));
        for (i, chunk) in data.chunks_exact(4).enumerate() {
            t[[i / cols.max(1), i % cols.max(1)]] =
                f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        tensors.push((name, t));
    }

    // rebuild params from the named tensors
    let mut params = init_with_hyper(hyper, seed);
    let mut consumed = std::collections::HashSet::new();
    let lookup: std::collections::HashMap<&str, &Array2<f64>> =
        tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut missing = Vec::new();
    params.visit_mut(|name, t| {
        match lookup.get(name) {
            Some(src) => {
                if src.raw_dim() != t.raw_dim() {
                    missing.push(format!("{name}: shape mismatch"));
                } else {
                    t.assign(src);
                    consumed.insert(name.to_string());
                }
            }
            None => missing.push(format!("{name}: absent")),
        }
    });
    if !missing.is_empty() {
        return Err(NetsError::Corrupt(format!(
            "parameter tensors unusable: {}",
            missing.join(", ")
        )));
    }
    let extras: Vec<(String, Array2<f64>)> = tensors
        .into_iter()
        .filter(|(n, _)| !consumed.contains(n))
        .collect();
    Ok((params, extra, extras))
}
