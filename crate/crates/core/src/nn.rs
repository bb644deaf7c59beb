//! Small actor-critic network with hand-written reverse-mode gradients.
//!
//! Architecture: `obs → tanh(FC) → LSTM → {softmax actor head, scalar critic head}`.
//! The recurrent carry is passed explicitly so [`AgentNet::forward`] is pure.
//!
//! # Parameter flattening order
//!
//! [`AgentNet::to_flat`] lays parameters out in this fixed order, every
//! matrix row-major (output index outer, input index inner):
//!
//! 1. `input_fc.weights` (`hidden × obs_dim`), `input_fc.biases` (`hidden`)
//! 2. `lstm.w_input` (`4·hidden × hidden`), `lstm.w_hidden` (`4·hidden × hidden`),
//!    `lstm.biases` (`4·hidden`); gate blocks are stacked input, forget, cell, output
//! 3. `actor_head.weights` (`n_actions × hidden`), `actor_head.biases` (`n_actions`)
//! 4. `critic_head.weights` (`1 × hidden`), `critic_head.biases` (`1`)
//!
//! Consensus protocols and checkpoints both rely on this order.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 64;
pub const HIDDEN_GAIN: f64 = 1.0;
pub const HEAD_GAIN: f64 = 0.01;

/// Matrix `Q` with orthonormal rows or columns (whichever is fewer) scaled
/// by `gain`.
pub fn orthogonal_init<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> DMatrix<f64> {
    assert!(rows > 0 && cols > 0, "orthogonal_init needs a positive shape");
    let (tall_rows, tall_cols) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::<f64>::from_fn(tall_rows, tall_cols, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    // Sign fix makes the result uniformly distributed over orthogonal matrices.
    for c in 0..tall_cols {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q *= gain;
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `fan_out × fan_in`.
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
}

impl LayerParams {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: DMatrix::zeros(fan_out, fan_in),
            biases: DVector::zeros(fan_out),
        }
    }

    fn orthogonal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weights: orthogonal_init(fan_out, fan_in, gain, rng),
            biases: DVector::zeros(fan_out),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weights * x + &self.biases
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4·hidden × input`.
    pub w_input: DMatrix<f64>,
    /// `4·hidden × hidden`.
    pub w_hidden: DMatrix<f64>,
    pub biases: DVector<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: DMatrix::zeros(4 * hidden, input),
            w_hidden: DMatrix::zeros(4 * hidden, hidden),
            biases: DVector::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub obs_dim: usize,
    pub hidden: usize,
    pub n_actions: usize,
}

impl NetShape {
    pub fn new(obs_dim: usize, hidden: usize, n_actions: usize) -> Self {
        Self {
            obs_dim,
            hidden,
            n_actions,
        }
    }

    pub fn n_params(&self) -> usize {
        let h = self.hidden;
        (h * self.obs_dim + h) + (4 * h * h * 2 + 4 * h) + (self.n_actions * h + self.n_actions) + (h + 1)
    }
}

/// Recurrent carry `(cell, hidden)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Carry {
    pub cell: DVector<f64>,
    pub hidden: DVector<f64>,
}

impl Carry {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            cell: DVector::zeros(hidden),
            hidden: DVector::zeros(hidden),
        }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub obs: DVector<f64>,
    fc_out: DVector<f64>,
    prev: Carry,
    /// Post-activation gates, stacked `[i, f, g, o]`.
    gates: DVector<f64>,
    tanh_cell: DVector<f64>,
    pub next: Carry,
    pub logits: Vec<f64>,
    pub policy: Vec<f64>,
    pub value: f64,
}

/// Upstream gradient of the loss for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub d_logits: Vec<f64>,
    pub d_value: f64,
}

impl LossGrad {
    pub fn zeros(n_actions: usize) -> Self {
        Self {
            d_logits: vec![0.0; n_actions],
            d_value: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentNet {
    pub input_fc: LayerParams,
    pub lstm: LstmParams,
    pub actor_head: LayerParams,
    pub critic_head: LayerParams,
}

/// Gradients, shape-congruent with the [`AgentNet`] they were computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle(pub AgentNet);

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
}

fn read_row_major(m: &mut DMatrix<f64>, src: &[f64]) -> usize {
    let cols = m.ncols();
    for r in 0..m.nrows() {
        for c in 0..cols {
            m[(r, c)] = src[r * cols + c];
        }
    }
    m.len()
}

fn read_vec(v: &mut DVector<f64>, src: &[f64]) -> usize {
    let n = v.len();
    v.as_mut_slice().copy_from_slice(&src[..n]);
    n
}

impl AgentNet {
    pub fn zeros(shape: NetShape) -> Self {
        let h = shape.hidden;
        Self {
            input_fc: LayerParams::zeros(shape.obs_dim, h),
            lstm: LstmParams::zeros(h, h),
            actor_head: LayerParams::zeros(h, shape.n_actions),
            critic_head: LayerParams::zeros(h, 1),
        }
    }

    /// Orthogonal weights (gain 1 for the trunk, 0.01 for both heads), zero biases.
    pub fn new<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Self {
        let h = shape.hidden;
        Self {
            input_fc: LayerParams::orthogonal(shape.obs_dim, h, HIDDEN_GAIN, rng),
            lstm: LstmParams {
                w_input: orthogonal_init(4 * h, h, HIDDEN_GAIN, rng),
                w_hidden: orthogonal_init(4 * h, h, HIDDEN_GAIN, rng),
                biases: DVector::zeros(4 * h),
            },
            actor_head: LayerParams::orthogonal(h, shape.n_actions, HEAD_GAIN, rng),
            critic_head: LayerParams::orthogonal(h, 1, HEAD_GAIN, rng),
        }
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            obs_dim: self.input_fc.weights.ncols(),
            hidden: self.lstm.hidden(),
            n_actions: self.actor_head.weights.nrows(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.shape().n_params()
    }

    pub fn initial_carry(&self) -> Carry {
        Carry::zeros(self.lstm.hidden())
    }

    /// Parameter storage in a fixed but layout-internal order; only for
    /// elementwise operations between shape-congruent nets.
    fn slices(&self) -> [&[f64]; 9] {
        [
            self.input_fc.weights.as_slice(),
            self.input_fc.biases.as_slice(),
            self.lstm.w_input.as_slice(),
            self.lstm.w_hidden.as_slice(),
            self.lstm.biases.as_slice(),
            self.actor_head.weights.as_slice(),
            self.actor_head.biases.as_slice(),
            self.critic_head.weights.as_slice(),
            self.critic_head.biases.as_slice(),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.input_fc.weights.as_mut_slice(),
            self.input_fc.biases.as_mut_slice(),
            self.lstm.w_input.as_mut_slice(),
            self.lstm.w_hidden.as_mut_slice(),
            self.lstm.biases.as_mut_slice(),
            self.actor_head.weights.as_mut_slice(),
            self.actor_head.biases.as_mut_slice(),
            self.critic_head.weights.as_mut_slice(),
            self.critic_head.biases.as_mut_slice(),
        ]
    }

    /// Flat parameter vector in the documented order (see module docs).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        push_row_major(&mut out, &self.input_fc.weights);
        out.extend(self.input_fc.biases.iter());
        push_row_major(&mut out, &self.lstm.w_input);
        push_row_major(&mut out, &self.lstm.w_hidden);
        out.extend(self.lstm.biases.iter());
        push_row_major(&mut out, &self.actor_head.weights);
        out.extend(self.actor_head.biases.iter());
        push_row_major(&mut out, &self.critic_head.weights);
        out.extend(self.critic_head.biases.iter());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Usage(format!(
                "flat parameter vector has {} entries, net needs {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut at = 0;
        at += read_row_major(&mut self.input_fc.weights, &flat[at..]);
        at += read_vec(&mut self.input_fc.biases, &flat[at..]);
        at += read_row_major(&mut self.lstm.w_input, &flat[at..]);
        at += read_row_major(&mut self.lstm.w_hidden, &flat[at..]);
        at += read_vec(&mut self.lstm.biases, &flat[at..]);
        at += read_row_major(&mut self.actor_head.weights, &flat[at..]);
        at += read_vec(&mut self.actor_head.biases, &flat[at..]);
        at += read_row_major(&mut self.critic_head.weights, &flat[at..]);
        at += read_vec(&mut self.critic_head.biases, &flat[at..]);
        debug_assert_eq!(at, flat.len());
        Ok(())
    }

    pub fn from_flat(shape: NetShape, flat: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(shape);
        net.set_flat(flat)?;
        Ok(net)
    }

    /// `self += scale · grads`.
    pub fn add_scaled(&mut self, grads: &GradBundle, scale: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(grads.0.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// One recurrent step. Returns the record (holding policy and value) and
    /// the advanced carry.
    pub fn forward(&self, obs: &[f64], carry: &Carry) -> Result<(StepRecord, Carry)> {
        let shape = self.shape();
        if obs.len() != shape.obs_dim {
            return Err(Error::Usage(format!(
                "observation has {} entries, net expects {}",
                obs.len(),
                shape.obs_dim
            )));
        }
        let h = shape.hidden;
        let obs = DVector::from_column_slice(obs);
        let fc_out = self.input_fc.apply(&obs).map(f64::tanh);

        let mut pre = &self.lstm.w_input * &fc_out + &self.lstm.biases;
        pre.gemv(1.0, &self.lstm.w_hidden, &carry.hidden, 1.0);
        let mut gates = pre;
        for (idx, g) in gates.iter_mut().enumerate() {
            *g = if (2 * h..3 * h).contains(&idx) {
                g.tanh()
            } else {
                sigmoid(*g)
            };
        }
        let (i, f, g, o) = (
            gates.rows(0, h),
            gates.rows(h, h),
            gates.rows(2 * h, h),
            gates.rows(3 * h, h),
        );
        let cell = f.component_mul(&carry.cell) + i.component_mul(&g);
        let tanh_cell = cell.map(f64::tanh);
        let hidden = o.component_mul(&tanh_cell);

        let logits: Vec<f64> = self.actor_head.apply(&hidden).iter().copied().collect();
        let policy = softmax(&logits);
        let value = self.critic_head.apply(&hidden)[0];
        if !value.is_finite() || policy.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        let next = Carry { cell, hidden };
        let record = StepRecord {
            obs,
            fc_out,
            prev: carry.clone(),
            gates,
            tanh_cell,
            next: next.clone(),
            logits,
            policy,
            value,
        };
        Ok((record, next))
    }

    /// Runs `forward` over a sequence from a zero carry.
    pub fn unroll(&self, observations: &[Vec<f64>]) -> Result<Vec<StepRecord>> {
        let mut carry = self.initial_carry();
        let mut records = Vec::with_capacity(observations.len());
        for obs in observations {
            let (rec, next) = self.forward(obs, &carry)?;
            carry = next;
            records.push(rec);
        }
        Ok(records)
    }

    /// Backpropagation through time over `records`, which must be the
    /// consecutive outputs of [`AgentNet::forward`] on this net.
    pub fn backward(&self, records: &[StepRecord], loss_grads: &[LossGrad]) -> Result<GradBundle> {
        if records.len() != loss_grads.len() {
            return Err(Error::Usage(format!(
                "{} records but {} loss gradients",
                records.len(),
                loss_grads.len()
            )));
        }
        let shape = self.shape();
        let h = shape.hidden;
        for (t, pair) in records.windows(2).enumerate() {
            if pair[1].prev != pair[0].next {
                return Err(Error::Usage(format!(
                    "record {} does not continue from record {t}",
                    t + 1
                )));
            }
        }
        if let Some(bad) = loss_grads.iter().position(|g| g.d_logits.len() != shape.n_actions) {
            return Err(Error::Usage(format!("loss gradient {bad} has wrong logit count")));
        }

        let mut grads = AgentNet::zeros(shape);
        let mut dh_next = DVector::<f64>::zeros(h);
        let mut dc_next = DVector::<f64>::zeros(h);
        let mut dpre = DVector::<f64>::zeros(4 * h);

        for (rec, lg) in records.iter().zip(loss_grads).rev() {
            let hidden = &rec.next.hidden;
            let dz = DVector::from_column_slice(&lg.d_logits);
            grads.actor_head.weights.ger(1.0, &dz, hidden, 1.0);
            grads.actor_head.biases += &dz;
            let mut critic_row = grads.critic_head.weights.row_mut(0);
            critic_row += lg.d_value * hidden.transpose();
            grads.critic_head.biases[0] += lg.d_value;

            let mut dh = dh_next.clone();
            dh.gemv_tr(1.0, &self.actor_head.weights, &dz, 1.0);
            dh.axpy(lg.d_value, &self.critic_head.weights.row(0).transpose(), 1.0);

            for k in 0..h {
                let (i, f, g, o) = (rec.gates[k], rec.gates[h + k], rec.gates[2 * h + k], rec.gates[3 * h + k]);
                let tc = rec.tanh_cell[k];
                let d_o = dh[k] * tc;
                let dc = dh[k] * o * (1.0 - tc * tc) + dc_next[k];
                let d_i = dc * g;
                let d_f = dc * rec.prev.cell[k];
                let d_g = dc * i;
                dc_next[k] = dc * f;
                dpre[k] = d_i * i * (1.0 - i);
                dpre[h + k] = d_f * f * (1.0 - f);
                dpre[2 * h + k] = d_g * (1.0 - g * g);
                dpre[3 * h + k] = d_o * o * (1.0 - o);
            }
            grads.lstm.w_input.ger(1.0, &dpre, &rec.fc_out, 1.0);
            grads.lstm.w_hidden.ger(1.0, &dpre, &rec.prev.hidden, 1.0);
            grads.lstm.biases += &dpre;

            dh_next.gemv_tr(1.0, &self.lstm.w_hidden, &dpre, 0.0);
            let mut dx = self.lstm.w_input.tr_mul(&dpre);
            dx.zip_apply(&rec.fc_out, |d, y| *d *= 1.0 - y * y);
            grads.input_fc.weights.ger(1.0, &dx, &rec.obs, 1.0);
            grads.input_fc.biases += &dx;
        }
        Ok(GradBundle(grads))
    }

    /// Plain-text checkpoint: a header with the layer sizes, then one value
    /// per line in the documented flattening order.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let shape = self.shape();
        let flat = self.to_flat();
        let mut text = String::with_capacity(flat.len() * 24 + 128);
        text.push_str("# cacc agent-net v1\n");
        let _ = writeln!(text, "obs_dim {}", shape.obs_dim);
        let _ = writeln!(text, "hidden {}", shape.hidden);
        let _ = writeln!(text, "n_actions {}", shape.n_actions);
        let _ = writeln!(text, "n_params {}", flat.len());
        for v in flat {
            let _ = writeln!(text, "{v:?}");
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fmt_err = |reason: String| Error::Format {
            source_name: path.display().to_string(),
            reason,
        };
        let mut lines = text.lines();
        if lines.next() != Some("# cacc agent-net v1") {
            return Err(fmt_err("missing checkpoint magic line".into()));
        }
        let mut header = |key: &str| -> Result<usize> {
            let line = lines.next().ok_or_else(|| fmt_err(format!("missing {key}")))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.trim().parse().ok())
                .ok_or_else(|| fmt_err(format!("bad header line {line:?}, expected {key}")))
        };
        let shape = NetShape::new(header("obs_dim")?, header("hidden")?, header("n_actions")?);
        let n_params = header("n_params")?;
        if n_params != shape.n_params() {
            return Err(fmt_err(format!(
                "n_params {n_params} inconsistent with layer sizes ({})",
                shape.n_params()
            )));
        }
        let flat = lines
            .enumerate()
            .map(|(i, l)| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|e| fmt_err(format!("value {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if flat.len() != n_params {
            return Err(fmt_err(format!("expected {n_params} values, found {}", flat.len())));
        }
        Self::from_flat(shape, &flat)
    }
}

impl GradBundle {
    pub fn zeros_like(net: &AgentNet) -> Self {
        GradBundle(AgentNet::zeros(net.shape()))
    }

    pub fn norm(&self) -> f64 {
        self.0
            .slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.0.slices_mut() {
            s.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Rescales to at most `max_norm`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.to_flat()
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

/// Per-parameter Adam moments for one net.
#[derive(Debug, Clone)]
pub struct Adam {
    m: AgentNet,
    v: AgentNet,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(shape: NetShape) -> Self {
        Self {
            m: AgentNet::zeros(shape),
            v: AgentNet::zeros(shape),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Descends along `grads` with step size `lr`.
    pub fn step(&mut self, net: &mut AgentNet, grads: &GradBundle, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let params = net.slices_mut();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grads.0.slices()) {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
            }
        }
    }
}
