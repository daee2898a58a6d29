//! Spatiotemporal feature encoder and class predictor.
//!
//! Per window: two GIN layers aggregate node features over the binary
//! adjacency (`H^k = sigma((eps^k I + A) H^{k-1} W^k)` with one-hot layer-0
//! features), their outputs are concatenated to width `D`, and a
//! squeeze-excitation block turns the node matrix into a gated per-window
//! feature vector. Across windows, a single-head self-attention layer plus a
//! small MLP produce the spatiotemporal features; their window mean feeds a
//! scalar logit head.
//!
//! Matrices are oriented nodes-as-rows (`N x d`), so the aggregation reads
//! `(eps I + A) H W`. The GIN normalization takes statistics over the node
//! axis (permutation-invariant); the squeeze-excitation normalization runs
//! over the window axis (invariant to window order).
//!
//! Everything evaluates on a [`Tape`], so analytic training gradients come
//! from the same code path as inference values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::enrichment::WindowGraph;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::tape::{sigmoid, Gradients, Tape, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Feature width `D` used by the shipped configuration (two GIN layers of
/// `D/2` concatenated).
pub const DEFAULT_FEATURE_DIM: usize = 64;
/// Number of GIN layers `K`.
pub const GIN_LAYERS: usize = 2;

/// Architecture sizes: `n` ROIs, feature width `d` (must be even).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub n: usize,
    pub d: usize,
}

impl EncoderDims {
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Contract(format!("encoder needs n >= 2 ROIs, got {n}")));
        }
        if d < 2 || d % 2 != 0 {
            return Err(Error::Contract(format!(
                "feature dim must be even and >= 2, got {d}"
            )));
        }
        Ok(EncoderDims { n, d })
    }

    fn half(&self) -> usize {
        self.d / 2
    }
}

/// How normalization layers behave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics from the current activations (training).
    Batch,
    /// Stored running statistics (inference).
    Running,
    /// Normalization disabled; for analytic unit tests.
    Off,
}

/// Nonlinearity selector for [`gin_layer_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sigma {
    /// Normalization (per [`NormMode`]) followed by GELU.
    Standard(NormMode),
    /// Pass-through, for analytic unit tests.
    Identity,
}

/// Per-feature affine plus running statistics for one normalization site.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormParams {
    fn new(width: usize) -> Self {
        NormParams {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }
}

/// One GIN layer: bias-free weight, learnable self-loop `eps` (initialized
/// to 0), and the normalization half of its nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct GinLayer {
    /// `in_dim x out_dim`.
    pub w: Mat,
    pub eps: f64,
    pub norm: NormParams,
}

/// Linear map applied to feature rows as `x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `out_dim x in_dim`.
    pub w: Mat,
    pub b: Vec<f64>,
}

/// All learnable tensors of one encoder branch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub gin: Vec<GinLayer>,
    /// `d x d` squeeze map (bias-free).
    pub se_w1: Mat,
    pub se_norm: NormParams,
    /// `n x d` excitation map producing one gate per ROI (bias-free).
    pub se_w2: Mat,
    pub attn_phi1: LinearParams,
    pub attn_phi2: LinearParams,
    pub attn_phi3: LinearParams,
    pub post_mlp: LinearParams,
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Mat::from_vec(rows, cols, data)
}

impl EncoderParams {
    /// Fresh parameters: Glorot-uniform weights, zero biases, `eps = 0`,
    /// identity-like normalization state.
    pub fn init(dims: EncoderDims, rng: &mut ChaCha8Rng) -> Self {
        let h = dims.half();
        let gin = vec![
            GinLayer {
                w: glorot(rng, dims.n, h),
                eps: 0.0,
                norm: NormParams::new(h),
            },
            GinLayer {
                w: glorot(rng, h, h),
                eps: 0.0,
                norm: NormParams::new(h),
            },
        ];
        let linear = |rng: &mut ChaCha8Rng| LinearParams {
            w: glorot(rng, dims.d, dims.d),
            b: vec![0.0; dims.d],
        };
        EncoderParams {
            dims,
            gin,
            se_w1: glorot(rng, dims.d, dims.d),
            se_norm: NormParams::new(dims.d),
            se_w2: glorot(rng, dims.n, dims.d),
            attn_phi1: linear(rng),
            attn_phi2: linear(rng),
            attn_phi3: linear(rng),
            post_mlp: linear(rng),
            head_w: glorot(rng, 1, dims.d).data().to_vec(),
            head_b: 0.0,
        }
    }

    pub fn init_seeded(dims: EncoderDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(dims, &mut rng)
    }

    /// Number of normalization sites (two GIN layers plus the SE block).
    pub const NORM_SITES: usize = GIN_LAYERS + 1;

    fn norm_site_mut(&mut self, site: usize) -> &mut NormParams {
        match site {
            0 => &mut self.gin[0].norm,
            1 => &mut self.gin[1].norm,
            2 => &mut self.se_norm,
            _ => panic!("no such norm site"),
        }
    }

    /// Momentum update of one site's running statistics from observed
    /// batch statistics.
    pub fn update_running_stats(&mut self, site: usize, mean: &[f64], var: &[f64]) {
        let norm = self.norm_site_mut(site);
        for (r, &m) in norm.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * m;
        }
        for (r, &v) in norm.running_var.iter_mut().zip(var) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * v;
        }
    }

    /// Every tensor by canonical name, running statistics included.
    pub fn tensor_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (i, layer) in self.gin.iter().enumerate() {
            out.push((
                format!("gin.{i}.w"),
                vec![layer.w.rows(), layer.w.cols()],
                layer.w.data().to_vec(),
            ));
            out.push((format!("gin.{i}.eps"), vec![1], vec![layer.eps]));
            push_norm(&mut out, &format!("gin.{i}.norm"), &layer.norm);
        }
        out.push((
            "se.w1".to_string(),
            vec![self.se_w1.rows(), self.se_w1.cols()],
            self.se_w1.data().to_vec(),
        ));
        push_norm(&mut out, "se.norm", &self.se_norm);
        out.push((
            "se.w2".to_string(),
            vec![self.se_w2.rows(), self.se_w2.cols()],
            self.se_w2.data().to_vec(),
        ));
        for (name, lin) in [
            ("attn.phi1", &self.attn_phi1),
            ("attn.phi2", &self.attn_phi2),
            ("attn.phi3", &self.attn_phi3),
            ("post_mlp", &self.post_mlp),
        ] {
            out.push((
                format!("{name}.w"),
                vec![lin.w.rows(), lin.w.cols()],
                lin.w.data().to_vec(),
            ));
            out.push((format!("{name}.b"), vec![lin.b.len()], lin.b.clone()));
        }
        out.push(("head.w".to_string(), vec![self.head_w.len()], self.head_w.clone()));
        out.push(("head.b".to_string(), vec![1], vec![self.head_b]));
        out
    }

    /// Rebuilds parameters from [`tensor_entries`](Self::tensor_entries)
    /// output. Names and shapes must match exactly.
    pub fn from_tensor_entries(
        dims: EncoderDims,
        entries: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<Self> {
        let mut params = EncoderParams::init_seeded(dims, 0);
        let template = params.tensor_entries();
        if template.len() != entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.len(),
                entries.len()
            )));
        }
        for ((name, shape, data), (want_name, want_shape, _)) in entries.iter().zip(&template) {
            if name != want_name {
                return Err(Error::Checkpoint(format!(
                    "tensor name mismatch: expected '{want_name}', found '{name}'"
                )));
            }
            if shape != want_shape {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {shape:?}, expected {want_shape:?}"
                )));
            }
            let len: usize = shape.iter().product();
            if data.len() != len {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has {} values, shape says {len}",
                    data.len()
                )));
            }
        }
        let mut it = entries.iter().map(|(_, _, data)| data.clone());
        let mut next = move || it.next().expect("length checked above");
        for i in 0..GIN_LAYERS {
            let (r, c) = params.gin[i].w.shape();
            params.gin[i].w = Mat::from_vec(r, c, next());
            params.gin[i].eps = next()[0];
            read_norm(&mut params.gin[i].norm, &mut next);
        }
        params.se_w1 = Mat::from_vec(dims.d, dims.d, next());
        read_norm(&mut params.se_norm, &mut next);
        params.se_w2 = Mat::from_vec(dims.n, dims.d, next());
        for lin in [
            &mut params.attn_phi1,
            &mut params.attn_phi2,
            &mut params.attn_phi3,
            &mut params.post_mlp,
        ] {
            lin.w = Mat::from_vec(dims.d, dims.d, next());
            lin.b = next();
        }
        params.head_w = next();
        params.head_b = next()[0];
        Ok(params)
    }

    /// Flattened trainable parameters (weights, biases, eps, norm affine;
    /// running statistics excluded) in a fixed order matching
    /// [`ParamVars::grad_vec`].
    pub fn trainable_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for layer in &self.gin {
            out.extend_from_slice(layer.w.data());
            out.push(layer.eps);
            out.extend_from_slice(&layer.norm.gamma);
            out.extend_from_slice(&layer.norm.beta);
        }
        out.extend_from_slice(self.se_w1.data());
        out.extend_from_slice(&self.se_norm.gamma);
        out.extend_from_slice(&self.se_norm.beta);
        out.extend_from_slice(self.se_w2.data());
        for lin in [&self.attn_phi1, &self.attn_phi2, &self.attn_phi3, &self.post_mlp] {
            out.extend_from_slice(lin.w.data());
            out.extend_from_slice(&lin.b);
        }
        out.extend_from_slice(&self.head_w);
        out.push(self.head_b);
        out
    }

    pub fn trainable_len(&self) -> usize {
        let d = self.dims.d;
        let h = self.dims.half();
        let gin = (self.dims.n * h + 1 + 2 * h) + (h * h + 1 + 2 * h);
        gin + d * d + 2 * d + self.dims.n * d + 4 * (d * d + d) + d + 1
    }

    /// Writes a flattened trainable vector back into the parameters.
    pub fn set_trainable(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.trainable_len(), "trainable vector length mismatch");
        let mut pos = 0usize;
        let mut take = |n: usize| {
            let s = flat[pos..pos + n].to_vec();
            pos += n;
            s
        };
        for i in 0..GIN_LAYERS {
            let (r, c) = self.gin[i].w.shape();
            self.gin[i].w = Mat::from_vec(r, c, take(r * c));
            self.gin[i].eps = take(1)[0];
            let w = self.gin[i].norm.width();
            self.gin[i].norm.gamma = take(w);
            self.gin[i].norm.beta = take(w);
        }
        let (r, c) = self.se_w1.shape();
        self.se_w1 = Mat::from_vec(r, c, take(r * c));
        let w = self.se_norm.width();
        self.se_norm.gamma = take(w);
        self.se_norm.beta = take(w);
        let (r, c) = self.se_w2.shape();
        self.se_w2 = Mat::from_vec(r, c, take(r * c));
        for lin in [
            &mut self.attn_phi1,
            &mut self.attn_phi2,
            &mut self.attn_phi3,
            &mut self.post_mlp,
        ] {
            let (r, c) = lin.w.shape();
            lin.w = Mat::from_vec(r, c, take(r * c));
            let blen = lin.b.len();
            lin.b = take(blen);
        }
        let hlen = self.head_w.len();
        self.head_w = take(hlen);
        self.head_b = take(1)[0];
        debug_assert_eq!(pos, flat.len());
    }

    pub fn is_finite(&self) -> bool {
        self.tensor_entries()
            .iter()
            .all(|(_, _, data)| data.iter().all(|v| v.is_finite()))
    }
}

fn push_norm(out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, prefix: &str, norm: &NormParams) {
    let w = norm.width();
    out.push((format!("{prefix}.gamma"), vec![w], norm.gamma.clone()));
    out.push((format!("{prefix}.beta"), vec![w], norm.beta.clone()));
    out.push((format!("{prefix}.running_mean"), vec![w], norm.running_mean.clone()));
    out.push((format!("{prefix}.running_var"), vec![w], norm.running_var.clone()));
}

fn read_norm(norm: &mut NormParams, next: &mut impl FnMut() -> Vec<f64>) {
    norm.gamma = next();
    norm.beta = next();
    norm.running_mean = next();
    norm.running_var = next();
}

/// Per-branch encoder output for one subject.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// Window-averaged spatiotemporal feature vector (length `D`).
    pub features: Vec<f64>,
    pub logit: f64,
    /// Window-averaged ROI attention gates (length `N`, entries in (0, 1)).
    pub attention: Vec<f64>,
}

/// Batch statistics observed at one normalization site during a forward
/// pass in [`NormMode::Batch`]. Site 0 and 1 are the GIN layers (one
/// observation per window), site 2 is the squeeze-excitation block.
#[derive(Debug, Clone)]
pub struct NormObservation {
    pub site: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct NormVars {
    gamma: Var,
    beta: Var,
}

struct GinVars {
    w: Var,
    eps: Var,
    norm: NormVars,
}

struct LinearVars {
    w: Var,
    w_t: Var,
    b: Var,
}

/// Leaf handles for every trainable tensor of one branch on a tape.
pub struct ParamVars {
    gin: Vec<GinVars>,
    se_w1: Var,
    se_w1_t: Var,
    se_norm: NormVars,
    se_w2: Var,
    se_w2_t: Var,
    phi1: LinearVars,
    phi2: LinearVars,
    phi3: LinearVars,
    post: LinearVars,
    head_w: Var,
    head_b: Var,
}

impl ParamVars {
    /// Inserts all trainable tensors as leaves. Row-applied weights are
    /// transposed once here so the transpose node is shared by every
    /// window.
    pub fn insert(tape: &mut Tape, params: &EncoderParams) -> ParamVars {
        fn norm_vars(tape: &mut Tape, norm: &NormParams) -> NormVars {
            NormVars {
                gamma: tape.leaf_row(norm.gamma.clone()),
                beta: tape.leaf_row(norm.beta.clone()),
            }
        }
        fn linear_vars(tape: &mut Tape, lin: &LinearParams) -> LinearVars {
            let w = tape.leaf(lin.w.clone());
            LinearVars {
                w,
                w_t: tape.transpose(w),
                b: tape.leaf_row(lin.b.clone()),
            }
        }
        let gin = params
            .gin
            .iter()
            .map(|layer| GinVars {
                w: tape.leaf(layer.w.clone()),
                eps: tape.leaf(Mat::from_vec(1, 1, vec![layer.eps])),
                norm: norm_vars(tape, &layer.norm),
            })
            .collect();
        let se_w1 = tape.leaf(params.se_w1.clone());
        let se_w1_t = tape.transpose(se_w1);
        let se_norm = norm_vars(tape, &params.se_norm);
        let se_w2 = tape.leaf(params.se_w2.clone());
        let se_w2_t = tape.transpose(se_w2);
        ParamVars {
            gin,
            se_w1,
            se_w1_t,
            se_norm,
            se_w2,
            se_w2_t,
            phi1: linear_vars(tape, &params.attn_phi1),
            phi2: linear_vars(tape, &params.attn_phi2),
            phi3: linear_vars(tape, &params.attn_phi3),
            post: linear_vars(tape, &params.post_mlp),
            head_w: tape.leaf_row(params.head_w.clone()),
            head_b: tape.leaf(Mat::from_vec(1, 1, vec![params.head_b])),
        }
    }

    /// Gradients gathered in [`EncoderParams::trainable_vec`] order.
    pub fn grad_vec(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.gin {
            out.extend_from_slice(grads.of(g.w).data());
            out.push(grads.of(g.eps)[(0, 0)]);
            out.extend_from_slice(grads.of(g.norm.gamma).data());
            out.extend_from_slice(grads.of(g.norm.beta).data());
        }
        out.extend_from_slice(grads.of(self.se_w1).data());
        out.extend_from_slice(grads.of(self.se_norm.gamma).data());
        out.extend_from_slice(grads.of(self.se_norm.beta).data());
        out.extend_from_slice(grads.of(self.se_w2).data());
        for lin in [&self.phi1, &self.phi2, &self.phi3, &self.post] {
            out.extend_from_slice(grads.of(lin.w).data());
            out.extend_from_slice(grads.of(lin.b).data());
        }
        out.extend_from_slice(grads.of(self.head_w).data());
        out.push(grads.of(self.head_b)[(0, 0)]);
        out
    }
}

/// Normalization followed by GELU on a tape. In `Batch` mode the observed
/// statistics are appended to `obs`.
fn norm_gelu_on_tape(
    tape: &mut Tape,
    x: Var,
    vars: &NormVars,
    stored: &NormParams,
    mode: NormMode,
    site: usize,
    obs: Option<&mut Vec<NormObservation>>,
) -> Var {
    let y = match mode {
        NormMode::Off => x,
        NormMode::Batch => {
            let mean = tape.mean_rows(x);
            let neg_mean = tape.scale(mean, -1.0);
            let centered = tape.add_row(x, neg_mean);
            let sq = tape.mul(centered, centered);
            let var = tape.mean_rows(sq);
            if let Some(obs) = obs {
                obs.push(NormObservation {
                    site,
                    mean: tape.value(mean).data().to_vec(),
                    var: tape.value(var).data().to_vec(),
                });
            }
            let var_eps = tape.add_const(var, NORM_EPS);
            let sd = tape.sqrt(var_eps);
            let xhat = tape.div_row(centered, sd);
            let scaled = tape.mul_row(xhat, vars.gamma);
            tape.add_row(scaled, vars.beta)
        }
        NormMode::Running => {
            let neg_mean: Vec<f64> = stored.running_mean.iter().map(|m| -m).collect();
            let sd: Vec<f64> = stored
                .running_var
                .iter()
                .map(|v| (v + NORM_EPS).sqrt())
                .collect();
            let neg_mean = tape.leaf_row(neg_mean);
            let sd = tape.leaf_row(sd);
            let centered = tape.add_row(x, neg_mean);
            let xhat = tape.div_row(centered, sd);
            let scaled = tape.mul_row(xhat, vars.gamma);
            tape.add_row(scaled, vars.beta)
        }
    };
    tape.gelu(y)
}

fn gin_on_tape(
    tape: &mut Tape,
    h: Var,
    adjacency: Var,
    layer: &GinVars,
    stored: &GinLayer,
    mode: NormMode,
    site: usize,
    obs: Option<&mut Vec<NormObservation>>,
) -> Var {
    let hw = tape.matmul(h, layer.w);
    let neighbor = tape.matmul(adjacency, hw);
    let self_loop = tape.mul_scalar(hw, layer.eps);
    let pre = tape.add(neighbor, self_loop);
    norm_gelu_on_tape(tape, pre, &layer.norm, &stored.norm, mode, site, obs)
}

/// Tape handles for one encoded subject.
pub struct EncodedVars {
    /// `1 x D` window-averaged feature vector.
    pub features: Var,
    /// `1 x 1` logit.
    pub logit: Var,
    /// `1 x N` window-averaged attention gates.
    pub attention: Var,
    pub norm_obs: Vec<NormObservation>,
}

/// Runs the full encoder for one subject on an existing tape.
pub fn encode_subject_on_tape(
    tape: &mut Tape,
    params: &EncoderParams,
    vars: &ParamVars,
    graphs: &[WindowGraph],
    mode: NormMode,
) -> Result<EncodedVars> {
    if graphs.is_empty() {
        return Err(Error::Contract("encode_subject needs at least one graph".into()));
    }
    let n = params.dims.n;
    for g in graphs {
        if g.nodes() != n {
            return Err(Error::Contract(format!(
                "graph has {} nodes, encoder expects {n}",
                g.nodes()
            )));
        }
    }
    let mut obs = Vec::new();

    // Spatial aggregation per window.
    let mut node_feats = Vec::with_capacity(graphs.len());
    let mut pooled = Vec::with_capacity(graphs.len());
    for g in graphs {
        let a = tape.leaf(g.adjacency.clone());
        let h0 = tape.leaf(Mat::identity(n));
        let h1 = gin_on_tape(tape, h0, a, &vars.gin[0], &params.gin[0], mode, 0, Some(&mut obs));
        let h2 = gin_on_tape(tape, h1, a, &vars.gin[1], &params.gin[1], mode, 1, Some(&mut obs));
        let ht = tape.concat_cols(h1, h2); // n x d
        let mean_nodes = tape.mean_rows(ht); // 1 x d
        node_feats.push(ht);
        pooled.push(mean_nodes);
    }

    // Squeeze-excitation gates, batched over windows.
    let squeezed: Vec<Var> = pooled.iter().map(|&p| tape.matmul(p, vars.se_w1_t)).collect();
    let stacked = tape.stack_rows(&squeezed); // p x d
    let psi = norm_gelu_on_tape(
        tape,
        stacked,
        &vars.se_norm,
        &params.se_norm,
        mode,
        2,
        Some(&mut obs),
    );
    let gate_logits = tape.matmul(psi, vars.se_w2_t); // p x n
    let gates = tape.sigmoid(gate_logits);

    // Gated node mean per window.
    let inv_n = 1.0 / n as f64;
    let mut window_feats = Vec::with_capacity(graphs.len());
    for (t, &ht) in node_feats.iter().enumerate() {
        let m_t = tape.row(gates, t); // 1 x n
        let weighted = tape.matmul(m_t, ht); // 1 x d
        window_feats.push(tape.scale(weighted, inv_n));
    }
    let h_hat = tape.stack_rows(&window_feats); // p x d

    // Temporal self-attention across windows.
    let q = apply_linear(tape, h_hat, &vars.phi1);
    let k = apply_linear(tape, h_hat, &vars.phi2);
    let v = apply_linear(tape, h_hat, &vars.phi3);
    let k_t = tape.transpose(k);
    let raw = tape.matmul(q, k_t);
    let scores = tape.scale(raw, 1.0 / (params.dims.d as f64).sqrt());
    let z = tape.softmax_rows(scores);
    let mixed = tape.matmul(z, v);
    let post = apply_linear(tape, mixed, &vars.post);
    let spatiotemporal = tape.gelu(post); // p x d

    // Window mean, then the scalar head.
    let features = tape.mean_rows(spatiotemporal); // 1 x d
    let head_w_t = tape.transpose(vars.head_w);
    let projected = tape.matmul(features, head_w_t); // 1 x 1
    let logit = tape.add(projected, vars.head_b);
    let attention = tape.mean_rows(gates); // 1 x n

    Ok(EncodedVars {
        features,
        logit,
        attention,
        norm_obs: obs,
    })
}

fn apply_linear(tape: &mut Tape, x: Var, lin: &LinearVars) -> Var {
    let xw = tape.matmul(x, lin.w_t);
    tape.add_row(xw, lin.b)
}

/// Encodes one subject with stored running statistics (inference mode).
pub fn encode_subject(graphs: &[WindowGraph], params: &EncoderParams) -> Result<BranchOutput> {
    encode_subject_with(graphs, params, NormMode::Running)
}

/// Encodes one subject under an explicit normalization mode.
pub fn encode_subject_with(
    graphs: &[WindowGraph],
    params: &EncoderParams,
    mode: NormMode,
) -> Result<BranchOutput> {
    let mut tape = Tape::new();
    let vars = ParamVars::insert(&mut tape, params);
    let enc = encode_subject_on_tape(&mut tape, params, &vars, graphs, mode)?;
    let out = BranchOutput {
        features: tape.value(enc.features).data().to_vec(),
        logit: tape.scalar(enc.logit),
        attention: tape.value(enc.attention).data().to_vec(),
    };
    if !out.logit.is_finite() || out.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite encoder output for a {}-window subject",
            graphs.len()
        )));
    }
    Ok(out)
}

/// One GIN layer on plain matrices (nodes as rows):
/// `sigma((eps I + A) H W)`.
pub fn gin_layer_forward(
    h_prev: &Mat,
    adjacency: &Mat,
    layer: &GinLayer,
    sigma: Sigma,
) -> Result<Mat> {
    let n = adjacency.rows();
    if adjacency.cols() != n {
        return Err(Error::Contract("adjacency must be square".into()));
    }
    if h_prev.rows() != n {
        return Err(Error::Contract(format!(
            "node features have {} rows, adjacency has {n}",
            h_prev.rows()
        )));
    }
    if h_prev.cols() != layer.w.rows() {
        return Err(Error::Contract(format!(
            "feature width {} does not match weight input dim {}",
            h_prev.cols(),
            layer.w.rows()
        )));
    }
    let hw = h_prev.matmul(&layer.w);
    let pre = adjacency.matmul(&hw).add(&hw.scale(layer.eps));
    match sigma {
        Sigma::Identity => Ok(pre),
        Sigma::Standard(mode) => {
            let mut tape = Tape::new();
            let x = tape.leaf(pre);
            let vars = NormVars {
                gamma: tape.leaf_row(layer.norm.gamma.clone()),
                beta: tape.leaf_row(layer.norm.beta.clone()),
            };
            let y = norm_gelu_on_tape(&mut tape, x, &vars, &layer.norm, mode, 0, None);
            Ok(tape.value(y).clone())
        }
    }
}

/// Squeeze-excitation over one window's node features (`N x D`, nodes as
/// rows). Returns the per-ROI gates `M` and the gated node mean.
pub fn spatial_attention(
    h_t: &Mat,
    se_w1: &Mat,
    se_norm: &NormParams,
    se_w2: &Mat,
    mode: NormMode,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = h_t.shape();
    if se_w1.shape() != (d, d) || se_w2.shape() != (n, d) {
        return Err(Error::Contract(
            "squeeze-excitation weight shapes do not match input".into(),
        ));
    }
    let mut tape = Tape::new();
    let ht = tape.leaf(h_t.clone());
    let pooled = tape.mean_rows(ht);
    let w1 = tape.leaf(se_w1.clone());
    let w1t = tape.transpose(w1);
    let squeezed = tape.matmul(pooled, w1t);
    let vars = NormVars {
        gamma: tape.leaf_row(se_norm.gamma.clone()),
        beta: tape.leaf_row(se_norm.beta.clone()),
    };
    let psi = norm_gelu_on_tape(&mut tape, squeezed, &vars, se_norm, mode, 2, None);
    let w2 = tape.leaf(se_w2.clone());
    let w2t = tape.transpose(w2);
    let logits = tape.matmul(psi, w2t);
    let gates = tape.sigmoid(logits);
    let m = tape.value(gates).data().to_vec();
    let pooled = spatial_pool(h_t, &m);
    Ok((m, pooled))
}

/// Gated node mean: `(1/N) sum_i m_i H[i, :]`. With all-ones gates this is
/// the plain node mean (the saturated-sigmoid limit).
pub fn spatial_pool(h_t: &Mat, gates: &[f64]) -> Vec<f64> {
    let (n, d) = h_t.shape();
    assert_eq!(gates.len(), n, "one gate per node");
    let mut out = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            out[j] += gates[i] * h_t[(i, j)];
        }
    }
    for v in &mut out {
        *v /= n as f64;
    }
    out
}

/// Single-head self-attention over window features (`p x D` rows) followed
/// by the post-MLP.
pub fn temporal_attention(
    h_hat: &Mat,
    phi1: &LinearParams,
    phi2: &LinearParams,
    phi3: &LinearParams,
    post_mlp: &LinearParams,
) -> Result<Mat> {
    let (p, d) = h_hat.shape();
    if p == 0 {
        return Err(Error::Contract("temporal_attention needs at least one window".into()));
    }
    for lin in [phi1, phi2, phi3, post_mlp] {
        if lin.w.shape() != (d, d) || lin.b.len() != d {
            return Err(Error::Contract(
                "attention parameter shapes do not match input".into(),
            ));
        }
    }
    let mut tape = Tape::new();
    let x = tape.leaf(h_hat.clone());
    fn lin_vars(tape: &mut Tape, lin: &LinearParams) -> LinearVars {
        let w = tape.leaf(lin.w.clone());
        LinearVars {
            w,
            w_t: tape.transpose(w),
            b: tape.leaf_row(lin.b.clone()),
        }
    }
    let v1 = lin_vars(&mut tape, phi1);
    let v2 = lin_vars(&mut tape, phi2);
    let v3 = lin_vars(&mut tape, phi3);
    let vp = lin_vars(&mut tape, post_mlp);
    let q = apply_linear(&mut tape, x, &v1);
    let k = apply_linear(&mut tape, x, &v2);
    let v = apply_linear(&mut tape, x, &v3);
    let kt = tape.transpose(k);
    let raw = tape.matmul(q, kt);
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    let z = tape.softmax_rows(scores);
    let mixed = tape.matmul(z, v);
    let out = apply_linear(&mut tape, mixed, &vp);
    let out = tape.gelu(out);
    Ok(tape.value(out).clone())
}

/// The attention mixing matrix `Z = row_softmax(Q K^T / sqrt(d))` alone,
/// for tests that inspect the weights.
pub fn attention_matrix(h_hat: &Mat, phi1: &LinearParams, phi2: &LinearParams) -> Mat {
    let d = h_hat.cols();
    let mut q = h_hat.matmul(&phi1.w.transpose());
    let mut k = h_hat.matmul(&phi2.w.transpose());
    for r in 0..q.rows() {
        for c in 0..d {
            q[(r, c)] += phi1.b[c];
            k[(r, c)] += phi2.b[c];
        }
    }
    let scores = q.matmul(&k.transpose()).scale(1.0 / (d as f64).sqrt());
    let mut tape = Tape::new();
    let s = tape.leaf(scores);
    let z = tape.softmax_rows(s);
    tape.value(z).clone()
}

/// Numerically stable `sigmoid(logit)`.
pub fn predict_probability(logit: f64) -> f64 {
    sigmoid(logit)
}
