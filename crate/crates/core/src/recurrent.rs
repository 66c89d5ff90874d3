//! Recurrent cells: the ERNN cell and its inner network, a uni-directional
//! LSTM cell, a vanilla tanh cell, and state-Jacobian diagnostics.
//!
//! Every cell keeps its weights in a shared [`ParameterStore`] and offers
//! two evaluation paths: a plain forward step on slices (inference and
//! streaming) and a recorded step on a [`Graph`] (training, gradient
//! checks). Tests pin the two paths against each other.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::{
    matvec_add, sigmoid, Graph, NodeId, NumericsError, ParamId, ParameterStore, Real, Tensor,
};

/// Initial value of every ERNN step size η.
pub const ETA_INIT: f64 = 0.1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CellError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid cell configuration: {0}")]
    Config(String),
}

pub type Result<T, E = CellError> = std::result::Result<T, E>;

fn check_len(op: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(NumericsError::Dimension {
            op,
            left: vec![expected],
            right: vec![found],
        }
        .into());
    }
    Ok(())
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn xavier<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, n: usize) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n)
        .map(|_| T::of(rng.gen_range(-limit..=limit)))
        .collect()
}

/// Weight and bias of one fully-connected layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Tensor::new(
            vec![out_dim, in_dim],
            xavier(rng, in_dim, out_dim, in_dim * out_dim),
        )?;
        let w = store.add(format!("{name}.w"), w)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Affine {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    /// `W x + b`.
    pub fn forward<T: Real>(&self, store: &ParameterStore<T>, x: &[T]) -> Vec<T> {
        let mut out = store.value(self.b).data().to_vec();
        matvec_add(store.value(self.w).data(), x, &mut out);
        out
    }

    pub fn record<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        Ok(g.affine_params(x, self.w, self.b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErnnConfig {
    pub input_dim: usize,
    pub state_dim: usize,
    pub hidden_dim: usize,
    pub iterations: usize,
}

impl ErnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.state_dim == 0 || self.hidden_dim == 0 || self.iterations == 0 {
            return Err(CellError::Config(format!(
                "ERNN dimensions and K must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Scalars in the inner network plus the K step sizes.
    pub fn param_count(&self) -> usize {
        let (i, s, h) = (self.input_dim, self.state_dim, self.hidden_dim);
        Affine::param_count(i, s)
            + Affine::param_count(s, s)
            + Affine::param_count(s, h)
            + Affine::param_count(h, s)
            + self.iterations
    }
}

/// Equilibriated recurrent cell.
///
/// The inner network is
/// `F(ψ, z) = FC₃(ReLU(FC₂(ReLU(FC_ψ ψ + FC_z z))))` and one step runs
///
/// ```text
/// ξ⁰ = 0
/// ξᵏ⁺¹ = ξᵏ + ηᵏ · (F(ψ, ξᵏ + h) − (ξᵏ + h)),   k = 0..K−1
/// h' = ξᴷ
/// ```
///
/// `FC_ψ ψ` does not depend on `k` and is evaluated once per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ErnnCell {
    pub config: ErnnConfig,
    pub fc_psi: Affine,
    pub fc_z: Affine,
    pub fc_2: Affine,
    pub fc_3: Affine,
    pub eta: ParamId,
}

impl ErnnCell {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        config: ErnnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let ErnnConfig {
            input_dim: i,
            state_dim: s,
            hidden_dim: h,
            iterations: k,
        } = config;
        let fc_psi = Affine::register(store, &format!("{prefix}.fc_psi"), i, s, rng)?;
        let fc_z = Affine::register(store, &format!("{prefix}.fc_z"), s, s, rng)?;
        let fc_2 = Affine::register(store, &format!("{prefix}.fc_2"), s, h, rng)?;
        let fc_3 = Affine::register(store, &format!("{prefix}.fc_3"), h, s, rng)?;
        let eta = store.add(
            format!("{prefix}.eta"),
            Tensor::full(&[k], T::of(ETA_INIT)),
        )?;
        Ok(ErnnCell {
            config,
            fc_psi,
            fc_z,
            fc_2,
            fc_3,
            eta,
        })
    }

    fn inner_from_projection<T: Real>(&self, store: &ParameterStore<T>, proj: &[T], z: &[T]) -> Vec<T> {
        let mut a = self.fc_z.forward(store, z);
        for (ai, &p) in a.iter_mut().zip(proj) {
            *ai = (*ai + p).max(T::zero());
        }
        let mut b = self.fc_2.forward(store, &a);
        for v in &mut b {
            *v = v.max(T::zero());
        }
        self.fc_3.forward(store, &b)
    }

    /// The inner network `F(ψ, z)`.
    pub fn inner<T: Real>(&self, store: &ParameterStore<T>, psi: &[T], z: &[T]) -> Result<Vec<T>> {
        check_len("ernn input", self.config.input_dim, psi.len())?;
        check_len("ernn state", self.config.state_dim, z.len())?;
        let proj = self.fc_psi.forward(store, psi);
        Ok(self.inner_from_projection(store, &proj, z))
    }

    pub fn step<T: Real>(&self, store: &ParameterStore<T>, psi: &[T], h_prev: &[T]) -> Result<Vec<T>> {
        check_len("ernn input", self.config.input_dim, psi.len())?;
        check_len("ernn state", self.config.state_dim, h_prev.len())?;
        let proj = self.fc_psi.forward(store, psi);
        let eta = store.value(self.eta).data();
        let mut xi = vec![T::zero(); h_prev.len()];
        let mut z = vec![T::zero(); h_prev.len()];
        for &e in eta {
            for ((zi, &x), &h) in z.iter_mut().zip(&xi).zip(h_prev) {
                *zi = x + h;
            }
            let f = self.inner_from_projection(store, &proj, &z);
            for ((x, &fi), &zi) in xi.iter_mut().zip(&f).zip(&z) {
                *x = *x + e * (fi - zi);
            }
        }
        Ok(xi)
    }

    pub fn record_inner<T: Real>(&self, g: &mut Graph<'_, T>, proj: NodeId, z: NodeId) -> Result<NodeId> {
        let zz = self.fc_z.record(g, z)?;
        let a = g.add(proj, zz)?;
        let a = g.relu(a);
        let b = self.fc_2.record(g, a)?;
        let b = g.relu(b);
        self.fc_3.record(g, b)
    }

    pub fn record_step<T: Real>(&self, g: &mut Graph<'_, T>, psi: NodeId, h_prev: NodeId) -> Result<NodeId> {
        let proj = self.fc_psi.record(g, psi)?;
        let eta = g.param(self.eta);
        let mut xi: Option<NodeId> = None;
        for k in 0..self.config.iterations {
            let z = match xi {
                None => h_prev,
                Some(x) => g.add(x, h_prev)?,
            };
            let f = self.record_inner(g, proj, z)?;
            let d = g.sub(f, z)?;
            let upd = g.scale_elem(d, eta, k)?;
            xi = Some(match xi {
                None => upd,
                Some(x) => g.add(x, upd)?,
            });
        }
        Ok(xi.expect("K ≥ 1"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub input_dim: usize,
    pub state_dim: usize,
}

impl LstmConfig {
    pub fn param_count(&self) -> usize {
        4 * Affine::param_count(self.input_dim + self.state_dim, self.state_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(n: usize) -> Self {
        LstmState {
            h: vec![T::zero(); n],
            c: vec![T::zero(); n],
        }
    }
}

/// Standard LSTM cell; each gate is an affine map of `[x; h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub config: LstmConfig,
    pub input_gate: Affine,
    pub forget_gate: Affine,
    pub cell_gate: Affine,
    pub output_gate: Affine,
}

impl LstmCell {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        config: LstmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.input_dim == 0 || config.state_dim == 0 {
            return Err(CellError::Config(format!("LSTM dimensions must be positive: {config:?}")));
        }
        let n_in = config.input_dim + config.state_dim;
        let mut gate = |name: &str| {
            Affine::register(store, &format!("{prefix}.{name}"), n_in, config.state_dim, rng)
        };
        Ok(LstmCell {
            config,
            input_gate: gate("input")?,
            forget_gate: gate("forget")?,
            cell_gate: gate("cell")?,
            output_gate: gate("output")?,
        })
    }

    pub fn step<T: Real>(&self, store: &ParameterStore<T>, x: &[T], state: &LstmState<T>) -> Result<LstmState<T>> {
        check_len("lstm input", self.config.input_dim, x.len())?;
        check_len("lstm state", self.config.state_dim, state.h.len())?;
        check_len("lstm cell", self.config.state_dim, state.c.len())?;
        let mut xh = x.to_vec();
        xh.extend_from_slice(&state.h);
        let i = self.input_gate.forward(store, &xh);
        let f = self.forget_gate.forward(store, &xh);
        let g = self.cell_gate.forward(store, &xh);
        let o = self.output_gate.forward(store, &xh);
        let mut c = Vec::with_capacity(state.c.len());
        let mut h = Vec::with_capacity(state.c.len());
        for n in 0..state.c.len() {
            let cn = sigmoid(f[n]) * state.c[n] + sigmoid(i[n]) * g[n].tanh();
            c.push(cn);
            h.push(sigmoid(o[n]) * cn.tanh());
        }
        Ok(LstmState { h, c })
    }

    /// Returns `(h', c')`.
    pub fn record_step<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let xh = g.concat(x, h)?;
        let i = self.input_gate.record(g, xh)?;
        let i = g.sigmoid(i);
        let f = self.forget_gate.record(g, xh)?;
        let f = g.sigmoid(f);
        let cand = self.cell_gate.record(g, xh)?;
        let cand = g.tanh(cand);
        let o = self.output_gate.record(g, xh)?;
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let squashed = g.tanh(c_new);
        let h_new = g.mul(o, squashed)?;
        Ok((h_new, c_new))
    }
}

/// `h' = tanh(W_ψ ψ + W_h h + b)`; used only for gradient diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaCell {
    pub input: Affine,
    pub recurrent: ParamId,
    pub state_dim: usize,
}

impl VanillaCell {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        input_dim: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input = Affine::register(store, &format!("{prefix}.input"), input_dim, state_dim, rng)?;
        let w_h = Tensor::new(
            vec![state_dim, state_dim],
            xavier(rng, state_dim, state_dim, state_dim * state_dim),
        )?;
        let recurrent = store.add(format!("{prefix}.recurrent.w"), w_h)?;
        Ok(VanillaCell {
            input,
            recurrent,
            state_dim,
        })
    }

    pub fn step<T: Real>(&self, store: &ParameterStore<T>, psi: &[T], h: &[T]) -> Result<Vec<T>> {
        check_len("vanilla input", self.input.in_dim, psi.len())?;
        check_len("vanilla state", self.state_dim, h.len())?;
        let mut out = self.input.forward(store, psi);
        matvec_add(store.value(self.recurrent).data(), h, &mut out);
        Ok(out.into_iter().map(|v| v.tanh()).collect())
    }

    pub fn record_step<T: Real>(&self, g: &mut Graph<'_, T>, psi: NodeId, h: NodeId) -> Result<NodeId> {
        let a = self.input.record(g, psi)?;
        let w_h = g.param(self.recurrent);
        let zero = g.constant(Tensor::zeros(&[self.state_dim]));
        let r = g.affine(h, w_h, zero)?;
        let s = g.add(a, r)?;
        Ok(g.tanh(s))
    }
}

/// Which cell a gradient trace was measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Ernn,
    Lstm,
    Vanilla,
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Ernn => "ernn",
            CellKind::Lstm => "lstm",
            CellKind::Vanilla => "vanilla",
        })
    }
}

/// A cell whose state evolution can be recorded for Jacobian probes.
pub trait RecurrentCell {
    fn kind(&self) -> CellKind;

    fn state_dim(&self) -> usize;

    /// Records one step. `state[0]` is `h`; extra entries (the LSTM cell
    /// state) follow. Returns the new state in the same layout.
    fn record<T: Real>(&self, g: &mut Graph<'_, T>, psi: NodeId, state: &[NodeId]) -> Result<Vec<NodeId>>;

    fn state_vectors(&self) -> usize {
        1
    }
}

impl RecurrentCell for ErnnCell {
    fn kind(&self) -> CellKind {
        CellKind::Ernn
    }

    fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    fn record<T: Real>(&self, g: &mut Graph<'_, T>, psi: NodeId, state: &[NodeId]) -> Result<Vec<NodeId>> {
        Ok(vec![self.record_step(g, psi, state[0])?])
    }
}

impl RecurrentCell for LstmCell {
    fn kind(&self) -> CellKind {
        CellKind::Lstm
    }

    fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    fn state_vectors(&self) -> usize {
        2
    }

    fn record<T: Real>(&self, g: &mut Graph<'_, T>, psi: NodeId, state: &[NodeId]) -> Result<Vec<NodeId>> {
        let (h, c) = self.record_step(g, psi, state[0], state[1])?;
        Ok(vec![h, c])
    }
}

impl RecurrentCell for VanillaCell {
    fn kind(&self) -> CellKind {
        CellKind::Vanilla
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn record<T: Real>(&self, g: &mut Graph<'_, T>, psi: NodeId, state: &[NodeId]) -> Result<Vec<NodeId>> {
        Ok(vec![self.record_step(g, psi, state[0])?])
    }
}

/// Estimates `‖∂h_c/∂h_p‖` for `c = p, p+1, …, L−1` on a fixed input
/// sequence, where `h_p` is the state after frame `p`.
///
/// Each entry is the mean over `probes` random unit vectors `u` of
/// `‖uᵀ ∂h_c/∂h_p‖₂`, a lower estimate of the spectral norm. Entry 0 is the
/// identity Jacobian. Other state vectors (the LSTM cell state) are held
/// fixed at `p`.
pub fn measure_state_gradient_norms<T: Real, C: RecurrentCell, R: Rng>(
    cell: &C,
    store: &ParameterStore<T>,
    inputs: &[Vec<T>],
    probe_index: usize,
    probes: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if inputs.len() < 2 || probe_index >= inputs.len() {
        return Err(CellError::Config(format!(
            "need L ≥ 2 and p < L, got L = {}, p = {probe_index}",
            inputs.len()
        )));
    }
    if probes == 0 {
        return Err(CellError::Config("at least one probe is required".into()));
    }
    let n = cell.state_dim();
    let mut g = Graph::new(store);

    let mut state: Vec<NodeId> = (0..cell.state_vectors())
        .map(|_| g.constant(Tensor::zeros(&[n])))
        .collect();
    for psi in &inputs[..=probe_index] {
        let x = g.constant_vector(psi.clone());
        state = cell.record(&mut g, x, &state)?;
    }
    // Re-root the trace at a leaf holding h_p.
    let h_p = g.variable(Tensor::vector(g.value(state[0]).to_vec()));
    let mut carried = vec![h_p];
    for &s in &state[1..] {
        let v = g.value(s).to_vec();
        carried.push(g.constant_vector(v));
    }
    state = carried;

    let mut outputs = Vec::with_capacity(inputs.len() - probe_index - 1);
    for psi in &inputs[probe_index + 1..] {
        let x = g.constant_vector(psi.clone());
        state = cell.record(&mut g, x, &state)?;
        outputs.push(state[0]);
    }

    let mut norms = Vec::with_capacity(outputs.len() + 1);
    norms.push(1.0);
    for &h_c in &outputs {
        let mut acc = 0.0;
        for _ in 0..probes {
            let u = random_unit::<T, R>(rng, n);
            let back = g.backward_from(h_c, &u, false)?;
            let norm = back
                .node_grad(h_p)
                .map(|gp| gp.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
                .unwrap_or(0.0);
            acc += norm;
        }
        norms.push(acc / probes as f64);
    }
    Ok(norms)
}

fn random_unit<T: Real, R: Rng>(rng: &mut R, n: usize) -> Vec<T> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| T::of(x / norm)).collect();
        }
    }
}
