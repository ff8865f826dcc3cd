//! Binary classifiers (ANN, four QNN variants, LSTM, QLSTM) over flat
//! parameter vectors, with a shared weighted-BCE training loop, early
//! stopping on a held-out AUC, and grid search over architectures.
//!
//! Every model exposes `forward_grad`, the output probability and its
//! gradient with respect to all parameters. Classical layers use ordinary
//! backpropagation; circuit blocks use the adjoint method or the parameter
//! shift rule.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, ensure_same_len, Error, Result};
use crate::metrics;
use crate::par;
use crate::qsim::{
    adjoint_vjp, expectations_z, push_ansatz_layer, run_circuit, Angle, CircuitSpec, Entangler, GateKind, StateVector,
    MAX_QUBITS,
};

/// Probability clamp used by the loss.
pub const PROB_CLAMP: f64 = 1e-7;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    /// One reverse sweep per circuit evaluation.
    #[default]
    Adjoint,
    /// Two shifted circuit evaluations per parameter.
    ParameterShift,
}

// ---------------------------------------------------------------------------
// ANN
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => f64::from(u8::from(z > 0.0)),
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

/// Fully connected network `[d, h_1, .., 1]` with a sigmoid output. Each
/// layer stores its weights row-major (`n_out x n_in`) followed by biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnSpec {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub hidden: Activation,
}

impl AnnSpec {
    pub fn new(layer_sizes: &[usize]) -> Self {
        Self {
            layer_sizes: layer_sizes.to_vec(),
            hidden: Activation::Tanh,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) || self.layer_sizes.last() != Some(&1) {
            return Err(Error::invalid(format!("bad ANN layer sizes {:?}", self.layer_sizes)));
        }
        Ok(())
    }
}

struct AnnCache {
    /// Layer inputs: `acts[0] = x`, `acts[l]` is the output of layer `l - 1`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn ann_run(spec: &AnnSpec, w: &[f64], x: &[f64]) -> AnnCache {
    let n_layers = spec.layer_sizes.len() - 1;
    let mut acts = vec![x.to_vec()];
    let mut pre = Vec::with_capacity(n_layers);
    let mut off = 0;
    for l in 0..n_layers {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let (wm, b) = (
            &w[off..off + n_in * n_out],
            &w[off + n_in * n_out..off + (n_in + 1) * n_out],
        );
        off += (n_in + 1) * n_out;
        let input = &acts[l];
        let z: Vec<f64> = (0..n_out)
            .map(|o| {
                b[o] + wm[o * n_in..(o + 1) * n_in]
                    .iter()
                    .zip(input)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect();
        let a = if l + 1 == n_layers {
            z.iter().map(|v| sigmoid(*v)).collect()
        } else {
            z.iter().map(|v| spec.hidden.apply(*v)).collect()
        };
        pre.push(z);
        acts.push(a);
    }
    AnnCache { acts, pre }
}

fn check_params(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::invalid(format!("expected {expected} parameters, got {got}")));
    }
    Ok(())
}

pub fn ann_forward(spec: &AnnSpec, weights: &[f64], x: &[f64]) -> Result<f64> {
    spec.validate()?;
    check_params(spec.n_params(), weights.len())?;
    ensure_same_len(spec.layer_sizes[0], x.len())?;
    Ok(ann_run(spec, weights, x).acts.last().expect("output layer")[0])
}

fn ann_forward_grad(spec: &AnnSpec, w: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
    let cache = ann_run(spec, w, x);
    let n_layers = spec.layer_sizes.len() - 1;
    let p = cache.acts[n_layers][0];
    let mut grad = vec![0.0; w.len()];
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for l in 0..n_layers {
        offsets.push(off);
        off += (spec.layer_sizes[l] + 1) * spec.layer_sizes[l + 1];
    }
    let mut delta = vec![p * (1.0 - p)];
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let off = offsets[l];
        let input = &cache.acts[l];
        for o in 0..n_out {
            for i in 0..n_in {
                grad[off + o * n_in + i] = delta[o] * input[i];
            }
            grad[off + n_in * n_out + o] = delta[o];
        }
        if l > 0 {
            let wm = &w[off..off + n_in * n_out];
            delta = (0..n_in)
                .map(|i| {
                    let back: f64 = (0..n_out).map(|o| wm[o * n_in + i] * delta[o]).sum();
                    back * spec.hidden.derivative(cache.pre[l - 1][i], input[i])
                })
                .collect();
        }
    }
    (p, grad)
}

// ---------------------------------------------------------------------------
// variational circuit block
// ---------------------------------------------------------------------------

/// Encoding followed by `layers` hardware-efficient layers, read out as
/// `<Z_k>` on every qubit. Angle blocks encode input `k` as `RY(scale x_k)`
/// on qubit `k`; the encoding angles are the leading circuit parameters so
/// that gradients with respect to the inputs come out of the same sweep.
#[derive(Debug, Clone)]
struct Vqc {
    n: usize,
    amplitude: bool,
    scale: f64,
    template: CircuitSpec,
}

impl Vqc {
    fn angle(n: usize, layers: usize, entangler: Entangler, scale: f64) -> Self {
        let mut template = CircuitSpec::new(n);
        for q in 0..n {
            template.push_param_rotation(GateKind::RY, q, 0.0);
        }
        for _ in 0..layers {
            push_ansatz_layer(&mut template, entangler, &[]);
        }
        Self {
            n,
            amplitude: false,
            scale,
            template,
        }
    }

    fn amplitude(n: usize, layers: usize, entangler: Entangler) -> Self {
        let mut template = CircuitSpec::new(n);
        for _ in 0..layers {
            push_ansatz_layer(&mut template, entangler, &[]);
        }
        Self {
            n,
            amplitude: true,
            scale: 1.0,
            template,
        }
    }

    fn n_inputs_params(&self) -> usize {
        if self.amplitude {
            0
        } else {
            self.n
        }
    }

    /// Circuit with bound parameters, input state, and the input norm
    /// (amplitude blocks only; 0 marks a zero input mapped to `|0..0>`).
    fn prepare(&self, theta: &[f64], input: &[f64]) -> Result<(CircuitSpec, StateVector, f64)> {
        let mut spec = self.template.clone();
        let k = self.n_inputs_params();
        for (p, v) in spec.params[..k].iter_mut().zip(input) {
            *p = self.scale * v;
        }
        spec.params[k..].copy_from_slice(theta);
        if !self.amplitude {
            return Ok((spec, StateVector::zero(self.n)?, 0.0));
        }
        let norm = input.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok((spec, StateVector::zero(self.n)?, 0.0));
        }
        let state = crate::qsim::amplitude_encode_on(input, self.n)?;
        Ok((spec, state, norm))
    }

    fn forward(&self, theta: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        let (spec, state, _) = self.prepare(theta, input)?;
        Ok(expectations_z(&run_circuit(&spec, &state)?))
    }

    /// Expectations plus `(dL/dθ, dL/dinput)` for `dL/d<Z_k> = cot[k]`.
    fn vjp(
        &self,
        theta: &[f64],
        input: &[f64],
        cot: &[f64],
        method: GradientMethod,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (spec, state, norm) = self.prepare(theta, input)?;
        let k = self.n_inputs_params();
        let (exps, all_grads, input_cot) = match method {
            GradientMethod::Adjoint => {
                let g = adjoint_vjp(&spec, &state, cot)?;
                (g.expectations, g.param_grads, Some(g.input_cotangent))
            }
            GradientMethod::ParameterShift => {
                let exps = expectations_z(&run_circuit(&spec, &state)?);
                let grads = shift_vjp(&spec, &state, cot)?;
                let input_cot = if self.amplitude {
                    Some(adjoint_vjp(&spec, &state, cot)?.input_cotangent)
                } else {
                    None
                };
                (exps, grads, input_cot)
            }
        };
        let dtheta = all_grads[k..].to_vec();
        let dinput = if self.amplitude {
            let lam = input_cot.expect("amplitude blocks carry an input cotangent");
            if norm == 0.0 {
                vec![0.0; input.len()]
            } else {
                // ψ = x/‖x‖, dL/dψ = 2 Re λ, dL/dx = (g - ψ (ψ·g)) / ‖x‖
                let g: Vec<f64> = lam.amplitudes()[..input.len()].iter().map(|a| 2.0 * a.re).collect();
                let psi: Vec<f64> = input.iter().map(|v| v / norm).collect();
                let proj: f64 = psi.iter().zip(&g).map(|(a, b)| a * b).sum();
                g.iter().zip(&psi).map(|(gi, pi)| (gi - pi * proj) / norm).collect()
            }
        } else {
            all_grads[..k].iter().map(|v| v * self.scale).collect()
        };
        Ok((exps, dtheta, dinput))
    }
}

/// Parameter-shift VJP of the Z expectations for every circuit parameter.
fn shift_vjp(spec: &CircuitSpec, state: &StateVector, cot: &[f64]) -> Result<Vec<f64>> {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut grads = vec![0.0; spec.params.len()];
    let mut shifted = spec.clone();
    for (k, g) in spec.ops.iter().enumerate() {
        let Some(Angle::Param(p)) = g.angle else {
            continue;
        };
        let theta = spec.params[p];
        shifted.ops[k].angle = Some(Angle::Fixed(theta + half_pi));
        let plus = expectations_z(&run_circuit(&shifted, state)?);
        shifted.ops[k].angle = Some(Angle::Fixed(theta - half_pi));
        let minus = expectations_z(&run_circuit(&shifted, state)?);
        shifted.ops[k].angle = g.angle;
        grads[p] += plus
            .iter()
            .zip(&minus)
            .zip(cot)
            .map(|((a, b), c)| c * (a - b) / 2.0)
            .sum::<f64>();
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// QNN
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QnnArch {
    #[serde(rename = "SQ")]
    Sq,
    #[serde(rename = "MQ")]
    Mq,
    #[serde(rename = "HybridSQ")]
    HybridSq,
    #[serde(rename = "HybridMQ")]
    HybridMq,
}

impl QnnArch {
    pub const ALL: [QnnArch; 4] = [QnnArch::Sq, QnnArch::Mq, QnnArch::HybridSq, QnnArch::HybridMq];

    pub fn is_hybrid(self) -> bool {
        matches!(self, QnnArch::HybridSq | QnnArch::HybridMq)
    }

    pub fn is_mq(self) -> bool {
        matches!(self, QnnArch::Mq | QnnArch::HybridMq)
    }
}

impl fmt::Display for QnnArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QnnArch::Sq => "SQ",
            QnnArch::Mq => "MQ",
            QnnArch::HybridSq => "HybridSQ",
            QnnArch::HybridMq => "HybridMQ",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Angle,
    Amplitude,
}

/// Parameter layout: hybrid projection (row-major `m x d`), then circuit
/// angles, then for MQ the readout weights and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QnnSpec {
    pub arch: QnnArch,
    pub encoding: Encoding,
    pub layers: usize,
    pub n_qubits: usize,
    pub input_dim: usize,
    #[serde(default)]
    pub entangler: Entangler,
}

impl QnnSpec {
    pub fn new(arch: QnnArch, encoding: Encoding, layers: usize, n_qubits: usize, input_dim: usize) -> Self {
        Self {
            arch,
            encoding,
            layers,
            n_qubits,
            input_dim,
            entangler: Entangler::Ring,
        }
    }

    /// Width of the vector handed to the encoder: `q` for angle encoding,
    /// `2^q` for a hybrid amplitude model, `d` otherwise.
    pub fn encoded_dim(&self) -> usize {
        match (self.encoding, self.arch.is_hybrid()) {
            (Encoding::Angle, _) => self.n_qubits,
            (Encoding::Amplitude, true) => 1 << self.n_qubits,
            (Encoding::Amplitude, false) => self.input_dim,
        }
    }

    fn projection_len(&self) -> usize {
        if self.arch.is_hybrid() {
            self.encoded_dim() * self.input_dim
        } else {
            0
        }
    }

    fn circuit_len(&self) -> usize {
        3 * self.n_qubits * self.layers
    }

    pub fn n_params(&self) -> usize {
        self.projection_len() + self.circuit_len() + if self.arch.is_mq() { self.n_qubits + 1 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 || self.n_qubits > MAX_QUBITS || self.input_dim == 0 || self.layers == 0 {
            return Err(Error::invalid(format!("bad QNN spec {self:?}")));
        }
        match self.encoding {
            Encoding::Angle if !self.arch.is_hybrid() && self.n_qubits != self.input_dim => {
                Err(Error::invalid(format!(
                    "angle encoding needs one qubit per feature ({} qubits, {} features)",
                    self.n_qubits, self.input_dim
                )))
            }
            Encoding::Amplitude if !self.arch.is_hybrid() && (1usize << self.n_qubits) < self.input_dim => {
                Err(Error::invalid(format!(
                    "{} features do not fit in {} qubits",
                    self.input_dim, self.n_qubits
                )))
            }
            _ => Ok(()),
        }
    }

    fn block(&self) -> Vqc {
        match self.encoding {
            Encoding::Angle => Vqc::angle(self.n_qubits, self.layers, self.entangler, std::f64::consts::PI),
            Encoding::Amplitude => Vqc::amplitude(self.n_qubits, self.layers, self.entangler),
        }
    }

    fn project(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        if !self.arch.is_hybrid() {
            return x.to_vec();
        }
        let d = self.input_dim;
        (0..self.encoded_dim())
            .map(|o| w[o * d..(o + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

fn qnn_forward_grad(
    spec: &QnnSpec,
    w: &[f64],
    x: &[f64],
    method: GradientMethod,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let block = spec.block();
    let (pl, cl) = (spec.projection_len(), spec.circuit_len());
    let z = spec.project(&w[..pl], x);
    let theta = &w[pl..pl + cl];
    let q = spec.n_qubits;
    let readout = &w[pl + cl..];
    let out_of = |exps: &[f64]| {
        if spec.arch.is_mq() {
            sigmoid(readout[q] + readout[..q].iter().zip(exps).map(|(a, b)| a * b).sum::<f64>())
        } else {
            (exps[0] + 1.0) / 2.0
        }
    };
    if !with_grad {
        let exps = block.forward(theta, &z)?;
        return Ok((out_of(&exps), Vec::new()));
    }
    // output derivative with respect to each expectation
    let exps = block.forward(theta, &z)?;
    let p = out_of(&exps);
    let mut grad = vec![0.0; w.len()];
    let cot: Vec<f64> = if spec.arch.is_mq() {
        let dz = p * (1.0 - p);
        for k in 0..q {
            grad[pl + cl + k] = dz * exps[k];
        }
        grad[pl + cl + q] = dz;
        readout[..q].iter().map(|r| dz * r).collect()
    } else {
        let mut c = vec![0.0; q];
        c[0] = 0.5;
        c
    };
    let (_, dtheta, dz_in) = block.vjp(theta, &z, &cot, method)?;
    grad[pl..pl + cl].copy_from_slice(&dtheta);
    if spec.arch.is_hybrid() {
        let d = spec.input_dim;
        for (o, g) in dz_in.iter().enumerate() {
            for i in 0..d {
                grad[o * d + i] = g * x[i];
            }
        }
    }
    Ok((p, grad))
}

pub fn qnn_forward(spec: &QnnSpec, params: &[f64], x: &[f64]) -> Result<f64> {
    spec.validate()?;
    check_params(spec.n_params(), params.len())?;
    ensure_same_len(spec.input_dim, x.len())?;
    Ok(qnn_forward_grad(spec, params, x, GradientMethod::Adjoint, false)?.0)
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

/// Stacked LSTM over a `window x input_dim` sequence with a sigmoid readout
/// of the last hidden state. Layer `l` stores `W` (`4h x (in_l + h)`, gate
/// rows ordered i, f, g, o) then `b` (`4h`); the readout is `h` weights and
/// a bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmSpec {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub window: usize,
}

impl LstmSpec {
    fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.hidden
        }
    }

    fn layer_len(&self, l: usize) -> usize {
        4 * self.hidden * (self.layer_in(l) + self.hidden) + 4 * self.hidden
    }

    fn layer_offset(&self, l: usize) -> usize {
        (0..l).map(|k| self.layer_len(k)).sum()
    }

    pub fn n_params(&self) -> usize {
        self.layer_offset(self.layers) + self.hidden + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 || self.window == 0 {
            return Err(Error::invalid(format!("bad LSTM spec {self:?}")));
        }
        Ok(())
    }
}

struct StepCache {
    input: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: [Vec<f64>; 4],
    tanh_c: Vec<f64>,
}

fn lstm_cell(
    w: &[f64],
    n_in: usize,
    h: usize,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> (Vec<f64>, Vec<f64>, StepCache) {
    let cols = n_in + h;
    let b = &w[4 * h * cols..];
    let mut gates: [Vec<f64>; 4] = Default::default();
    for (gi, gate) in gates.iter_mut().enumerate() {
        *gate = (0..h)
            .map(|u| {
                let row = &w[(gi * h + u) * cols..(gi * h + u + 1) * cols];
                let z = b[gi * h + u]
                    + row[..n_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                    + row[n_in..].iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
                if gi == 2 {
                    z.tanh()
                } else {
                    sigmoid(z)
                }
            })
            .collect();
    }
    let c: Vec<f64> = (0..h)
        .map(|u| gates[1][u] * c_prev[u] + gates[0][u] * gates[2][u])
        .collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h_t: Vec<f64> = (0..h).map(|u| gates[3][u] * tanh_c[u]).collect();
    let cache = StepCache {
        input: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        tanh_c,
    };
    (h_t, c, cache)
}

/// One cell update of layer `layer`: returns `(h_t, c_t)`.
pub fn lstm_step(
    spec: &LstmSpec,
    weights: &[f64],
    layer: usize,
    x_t: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    check_params(spec.n_params(), weights.len())?;
    if layer >= spec.layers {
        return Err(Error::invalid(format!("layer {layer} of {}", spec.layers)));
    }
    ensure_same_len(spec.layer_in(layer), x_t.len())?;
    ensure_same_len(spec.hidden, h_prev.len())?;
    ensure_same_len(spec.hidden, c_prev.len())?;
    let off = spec.layer_offset(layer);
    let (h, c, _) = lstm_cell(
        &weights[off..off + spec.layer_len(layer)],
        spec.layer_in(layer),
        spec.hidden,
        x_t,
        h_prev,
        c_prev,
    );
    Ok((h, c))
}

fn lstm_forward_grad(spec: &LstmSpec, w: &[f64], x: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
    let (h, t_len) = (spec.hidden, spec.window);
    let mut seq: Vec<Vec<f64>> = x.chunks(spec.input_dim).map(|c| c.to_vec()).collect();
    let mut caches: Vec<Vec<StepCache>> = Vec::with_capacity(spec.layers);
    for l in 0..spec.layers {
        let off = spec.layer_offset(l);
        let lw = &w[off..off + spec.layer_len(l)];
        let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
        let mut out = Vec::with_capacity(t_len);
        let mut lc = Vec::with_capacity(t_len);
        for xt in &seq {
            let (hn, cn, cache) = lstm_cell(lw, spec.layer_in(l), h, xt, &hs, &cs);
            hs = hn;
            cs = cn;
            out.push(hs.clone());
            lc.push(cache);
        }
        seq = out;
        caches.push(lc);
    }
    let ro = spec.layer_offset(spec.layers);
    let last = &seq[t_len - 1];
    let p = sigmoid(w[ro + h] + w[ro..ro + h].iter().zip(last).map(|(a, b)| a * b).sum::<f64>());
    if !with_grad {
        return (p, Vec::new());
    }

    let mut grad = vec![0.0; w.len()];
    let dz = p * (1.0 - p);
    for u in 0..h {
        grad[ro + u] = dz * last[u];
    }
    grad[ro + h] = dz;
    // dL/dh_t entering the current layer from above
    let mut dh_in: Vec<Vec<f64>> = vec![vec![0.0; h]; t_len];
    dh_in[t_len - 1] = w[ro..ro + h].iter().map(|v| dz * v).collect();
    for l in (0..spec.layers).rev() {
        let off = spec.layer_offset(l);
        let n_in = spec.layer_in(l);
        let cols = n_in + h;
        let lw = &w[off..off + spec.layer_len(l)];
        let mut dx_seq = vec![vec![0.0; n_in]; t_len];
        let (mut dh_next, mut dc_next) = (vec![0.0; h], vec![0.0; h]);
        for t in (0..t_len).rev() {
            let c = &caches[l][t];
            let [gi, gf, gg, go] = &c.gates;
            let mut da = vec![0.0; 4 * h];
            let mut dc_prev = vec![0.0; h];
            for u in 0..h {
                let dh = dh_in[t][u] + dh_next[u];
                let d_o = dh * c.tanh_c[u];
                let dc = dc_next[u] + dh * go[u] * (1.0 - c.tanh_c[u] * c.tanh_c[u]);
                da[u] = dc * gg[u] * gi[u] * (1.0 - gi[u]);
                da[h + u] = dc * c.c_prev[u] * gf[u] * (1.0 - gf[u]);
                da[2 * h + u] = dc * gi[u] * (1.0 - gg[u] * gg[u]);
                da[3 * h + u] = d_o * go[u] * (1.0 - go[u]);
                dc_prev[u] = dc * gf[u];
            }
            let mut dh_prev = vec![0.0; h];
            for (r, dar) in da.iter().enumerate() {
                let row = &lw[r * cols..(r + 1) * cols];
                let g = &mut grad[off + r * cols..off + (r + 1) * cols];
                for i in 0..n_in {
                    g[i] += dar * c.input[i];
                    dx_seq[t][i] += dar * row[i];
                }
                for u in 0..h {
                    g[n_in + u] += dar * c.h_prev[u];
                    dh_prev[u] += dar * row[n_in + u];
                }
                grad[off + 4 * h * cols + r] += dar;
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        dh_in = dx_seq;
    }
    (p, grad)
}

// ---------------------------------------------------------------------------
// QLSTM
// ---------------------------------------------------------------------------

/// LSTM cell whose gates are variational circuits on `hidden` qubits.
///
/// `v_t = W_e [h_{t-1}, x_t] + b_e` feeds four gate circuits
/// (`f, i, o` through a sigmoid, `g` through tanh). With
/// `m_t = o ⊙ tanh(c_t)`, a fifth circuit maps `m_t` to `h_t` and a sixth
/// maps the final `m_T` to the readout features. Parameter layout:
/// `W_e`, `b_e`, six circuit blocks (f, i, g, o, h, y), readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QlstmSpec {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub window: usize,
    #[serde(default)]
    pub entangler: Entangler,
}

impl QlstmSpec {
    pub fn new(input_dim: usize, hidden: usize, layers: usize, window: usize) -> Self {
        Self {
            input_dim,
            hidden,
            layers,
            window,
            entangler: Entangler::Ring,
        }
    }

    fn embed_len(&self) -> usize {
        self.hidden * (self.hidden + self.input_dim) + self.hidden
    }

    fn block_len(&self) -> usize {
        3 * self.hidden * self.layers
    }

    pub fn n_params(&self) -> usize {
        self.embed_len() + 6 * self.block_len() + self.hidden + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.hidden > MAX_QUBITS || self.layers == 0 || self.window == 0 {
            return Err(Error::invalid(format!("bad QLSTM spec {self:?}")));
        }
        Ok(())
    }

    fn block(&self) -> Vqc {
        Vqc::angle(self.hidden, self.layers, self.entangler, 1.0)
    }

    fn theta<'a>(&self, w: &'a [f64], k: usize) -> &'a [f64] {
        let off = self.embed_len() + k * self.block_len();
        &w[off..off + self.block_len()]
    }
}

struct QStep {
    hx: Vec<f64>,
    v: Vec<f64>,
    c_prev: Vec<f64>,
    gates: [Vec<f64>; 4],
    tanh_c: Vec<f64>,
    m: Vec<f64>,
}

fn qlstm_cell(
    spec: &QlstmSpec,
    block: &Vqc,
    w: &[f64],
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, QStep)> {
    let h = spec.hidden;
    let cols = h + spec.input_dim;
    let hx: Vec<f64> = h_prev.iter().chain(x).copied().collect();
    let v: Vec<f64> = (0..h)
        .map(|u| {
            w[h * cols + u]
                + w[u * cols..(u + 1) * cols]
                    .iter()
                    .zip(&hx)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    let mut gates: [Vec<f64>; 4] = Default::default();
    for (k, gate) in gates.iter_mut().enumerate() {
        let e = block.forward(spec.theta(w, k), &v)?;
        *gate = e.iter().map(|z| if k == 2 { z.tanh() } else { sigmoid(*z) }).collect();
    }
    let [gf, gi, gg, go] = &gates;
    let c: Vec<f64> = (0..h).map(|u| gf[u] * c_prev[u] + gi[u] * gg[u]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let m: Vec<f64> = (0..h).map(|u| go[u] * tanh_c[u]).collect();
    let h_t = block.forward(spec.theta(w, 4), &m)?;
    let step = QStep {
        hx,
        v,
        c_prev: c_prev.to_vec(),
        gates,
        tanh_c,
        m,
    };
    Ok((h_t, c, step))
}

/// One QLSTM cell update: returns `(h_t, c_t)`.
pub fn qlstm_step(
    spec: &QlstmSpec,
    weights: &[f64],
    x_t: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    check_params(spec.n_params(), weights.len())?;
    ensure_same_len(spec.input_dim, x_t.len())?;
    ensure_same_len(spec.hidden, h_prev.len())?;
    ensure_same_len(spec.hidden, c_prev.len())?;
    let (h, c, _) = qlstm_cell(spec, &spec.block(), weights, x_t, h_prev, c_prev)?;
    Ok((h, c))
}

/// Final hidden state after running the whole sequence.
pub fn qlstm_final_hidden(spec: &QlstmSpec, weights: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    check_params(spec.n_params(), weights.len())?;
    ensure_same_len(spec.window * spec.input_dim, x.len())?;
    let block = spec.block();
    let (mut hs, mut cs) = (vec![0.0; spec.hidden], vec![0.0; spec.hidden]);
    for xt in x.chunks(spec.input_dim) {
        let (hn, cn, _) = qlstm_cell(spec, &block, weights, xt, &hs, &cs)?;
        hs = hn;
        cs = cn;
    }
    Ok(hs)
}

fn qlstm_forward_grad(
    spec: &QlstmSpec,
    w: &[f64],
    x: &[f64],
    method: GradientMethod,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let h = spec.hidden;
    let block = spec.block();
    let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
    let mut steps = Vec::with_capacity(spec.window);
    for xt in x.chunks(spec.input_dim) {
        let (hn, cn, st) = qlstm_cell(spec, &block, w, xt, &hs, &cs)?;
        hs = hn;
        cs = cn;
        steps.push(st);
    }
    let m_last = &steps.last().expect("window >= 1").m;
    let ro = spec.embed_len() + 6 * spec.block_len();
    let y = block.forward(spec.theta(w, 5), m_last)?;
    let p = sigmoid(w[ro + h] + w[ro..ro + h].iter().zip(&y).map(|(a, b)| a * b).sum::<f64>());
    if !with_grad {
        return Ok((p, Vec::new()));
    }

    let mut grad = vec![0.0; w.len()];
    let dz = p * (1.0 - p);
    for u in 0..h {
        grad[ro + u] = dz * y[u];
    }
    grad[ro + h] = dz;
    let block_off = |k: usize| spec.embed_len() + k * spec.block_len();
    let bl = spec.block_len();
    let cot_y: Vec<f64> = w[ro..ro + h].iter().map(|v| dz * v).collect();
    let (_, dth, mut dm_extra) = block.vjp(spec.theta(w, 5), m_last, &cot_y, method)?;
    add_into(&mut grad[block_off(5)..block_off(5) + bl], &dth);

    let cols = h + spec.input_dim;
    let (mut dh_next, mut dc_next) = (vec![0.0; h], vec![0.0; h]);
    for st in steps.iter().rev() {
        // h_t = VQC_h(m_t)
        let (_, dth, mut dm) = block.vjp(spec.theta(w, 4), &st.m, &dh_next, method)?;
        add_into(&mut grad[block_off(4)..block_off(4) + bl], &dth);
        add_into(&mut dm, &dm_extra);
        dm_extra = vec![0.0; h];
        let [gf, gi, gg, go] = &st.gates;
        let mut de = [vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]];
        let mut dc_prev = vec![0.0; h];
        for u in 0..h {
            let d_o = dm[u] * st.tanh_c[u];
            let dc = dc_next[u] + dm[u] * go[u] * (1.0 - st.tanh_c[u] * st.tanh_c[u]);
            de[0][u] = dc * st.c_prev[u] * gf[u] * (1.0 - gf[u]);
            de[1][u] = dc * gg[u] * gi[u] * (1.0 - gi[u]);
            de[2][u] = dc * gi[u] * (1.0 - gg[u] * gg[u]);
            de[3][u] = d_o * go[u] * (1.0 - go[u]);
            dc_prev[u] = dc * gf[u];
        }
        let mut dv = vec![0.0; h];
        for (k, cot) in de.iter().enumerate() {
            let (_, dth, dvk) = block.vjp(spec.theta(w, k), &st.v, cot, method)?;
            add_into(&mut grad[block_off(k)..block_off(k) + bl], &dth);
            add_into(&mut dv, &dvk);
        }
        let mut dh_prev = vec![0.0; h];
        for u in 0..h {
            for j in 0..cols {
                grad[u * cols + j] += dv[u] * st.hx[j];
                if j < h {
                    dh_prev[j] += dv[u] * w[u * cols + j];
                }
            }
            grad[h * cols + u] += dv[u];
        }
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    Ok((p, grad))
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

// ---------------------------------------------------------------------------
// unified model interface
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    Ann(AnnSpec),
    Qnn(QnnSpec),
    Lstm(LstmSpec),
    Qlstm(QlstmSpec),
}

impl ModelSpec {
    pub fn n_params(&self) -> usize {
        match self {
            ModelSpec::Ann(s) => s.n_params(),
            ModelSpec::Qnn(s) => s.n_params(),
            ModelSpec::Lstm(s) => s.n_params(),
            ModelSpec::Qlstm(s) => s.n_params(),
        }
    }

    /// Length of one input sample (sequence models take flattened windows).
    pub fn input_len(&self) -> usize {
        match self {
            ModelSpec::Ann(s) => s.layer_sizes.first().copied().unwrap_or(0),
            ModelSpec::Qnn(s) => s.input_dim,
            ModelSpec::Lstm(s) => s.window * s.input_dim,
            ModelSpec::Qlstm(s) => s.window * s.input_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Ann(s) => s.validate(),
            ModelSpec::Qnn(s) => s.validate(),
            ModelSpec::Lstm(s) => s.validate(),
            ModelSpec::Qlstm(s) => s.validate(),
        }
    }

    pub fn is_quantum(&self) -> bool {
        matches!(self, ModelSpec::Qnn(_) | ModelSpec::Qlstm(_))
    }

    /// Short stable identifier, also used as the lexicographic tie-break.
    pub fn label(&self) -> String {
        match self {
            ModelSpec::Ann(s) => {
                let sizes: Vec<String> = s.layer_sizes.iter().map(|v| v.to_string()).collect();
                format!("ann[{}]", sizes.join("-"))
            }
            ModelSpec::Qnn(s) => format!(
                "qnn/{}/{}/q{}/L{}",
                match s.encoding {
                    Encoding::Angle => "angle",
                    Encoding::Amplitude => "amplitude",
                },
                s.arch,
                s.n_qubits,
                s.layers
            ),
            ModelSpec::Lstm(s) => format!("lstm/h{}/L{}", s.hidden, s.layers),
            ModelSpec::Qlstm(s) => format!("qlstm/h{}/L{}", s.hidden, s.layers),
        }
    }

    /// Seeded initial parameters: Glorot-uniform classical weights, zero
    /// biases (forget-gate bias 1), circuit angles uniform in `[-0.5, 0.5]`.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |n_in: usize, n_out: usize, count: usize| -> Vec<f64> {
            let a = (6.0 / (n_in + n_out) as f64).sqrt();
            (0..count).map(|_| rng.gen_range(-a..a)).collect::<Vec<f64>>()
        };
        let mut out = Vec::with_capacity(self.n_params());
        match self {
            ModelSpec::Ann(s) => {
                for w in s.layer_sizes.windows(2) {
                    out.extend(glorot(w[0], w[1], w[0] * w[1]));
                    out.extend(std::iter::repeat_n(0.0, w[1]));
                }
            }
            ModelSpec::Qnn(s) => {
                if s.arch.is_hybrid() {
                    out.extend(glorot(s.input_dim, s.encoded_dim(), s.projection_len()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
                out.extend((0..s.circuit_len()).map(|_| rng.gen_range(-0.5..0.5)));
                if s.arch.is_mq() {
                    out.extend(glorot(s.n_qubits, 1, s.n_qubits));
                    out.push(0.0);
                }
            }
            ModelSpec::Lstm(s) => {
                let h = s.hidden;
                for l in 0..s.layers {
                    let cols = s.layer_in(l) + h;
                    out.extend(glorot(cols, 4 * h, 4 * h * cols));
                    out.extend((0..4 * h).map(|r| if (h..2 * h).contains(&r) { 1.0 } else { 0.0 }));
                }
                out.extend(glorot(h, 1, h));
                out.push(0.0);
            }
            ModelSpec::Qlstm(s) => {
                let h = s.hidden;
                out.extend(glorot(h + s.input_dim, h, h * (h + s.input_dim)));
                out.extend(std::iter::repeat_n(0.0, h));
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
                out.extend((0..6 * s.block_len()).map(|_| rng.gen_range(-0.5..0.5)));
                out.extend(glorot(h, 1, h));
                out.push(0.0);
            }
        }
        out
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<f64> {
        self.check(params, x)?;
        self.forward_grad_unchecked(params, x, GradientMethod::Adjoint, false)
            .map(|(p, _)| p)
    }

    /// Output probability and its gradient with respect to every parameter.
    pub fn forward_grad(&self, params: &[f64], x: &[f64], method: GradientMethod) -> Result<(f64, Vec<f64>)> {
        self.check(params, x)?;
        self.forward_grad_unchecked(params, x, method, true)
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<()> {
        self.validate()?;
        check_params(self.n_params(), params.len())?;
        ensure_same_len(self.input_len(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite model input"));
        }
        Ok(())
    }

    fn forward_grad_unchecked(
        &self,
        w: &[f64],
        x: &[f64],
        method: GradientMethod,
        with_grad: bool,
    ) -> Result<(f64, Vec<f64>)> {
        match self {
            ModelSpec::Ann(s) => {
                if with_grad {
                    Ok(ann_forward_grad(s, w, x))
                } else {
                    Ok((ann_run(s, w, x).acts.last().expect("output")[0], Vec::new()))
                }
            }
            ModelSpec::Qnn(s) => qnn_forward_grad(s, w, x, method, with_grad),
            ModelSpec::Lstm(s) => Ok(lstm_forward_grad(s, w, x, with_grad)),
            ModelSpec::Qlstm(s) => qlstm_forward_grad(s, w, x, method, with_grad),
        }
    }

    pub fn predict(&self, params: &[f64], xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        par::map_indexed(xs.len(), |i| self.forward(params, &xs[i]))
            .into_iter()
            .collect()
    }
}

/// The three published ANN baselines for 3, 7 and 64 inputs.
pub fn ann_baseline(input_dim: usize) -> Result<AnnSpec> {
    match input_dim {
        3 => Ok(AnnSpec::new(&[3, 11, 1])),
        7 => Ok(AnnSpec::new(&[7, 32, 16, 1])),
        64 => Ok(AnnSpec::new(&[64, 32, 1])),
        d => Err(Error::invalid(format!("no ANN baseline for {d} inputs"))),
    }
}

// ---------------------------------------------------------------------------
// loss and training
// ---------------------------------------------------------------------------

/// Inverse-frequency weights `n / (2 n_c)`; a missing class gets weight 1.
pub fn class_weights(labels: &[f64]) -> [f64; 2] {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|y| **y > 0.5).count() as f64;
    let neg = n - pos;
    let w = |c: f64| if c > 0.0 { n / (2.0 * c) } else { 1.0 };
    [w(neg), w(pos)]
}

/// `-mean[w_y (y ln p + (1 - y) ln(1 - p))]` with `p` clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn weighted_bce(probs: &[f64], labels: &[f64], weights: [f64; 2]) -> Result<f64> {
    ensure_same_len(labels.len(), probs.len())?;
    ensure_len(1, labels.len())?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let w = weights[usize::from(*y > 0.5)];
            -w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    #[serde(default)]
    pub gradient: GradientMethod,
    /// Overrides the inverse-frequency weights `[negative, positive]`.
    #[serde(default)]
    pub class_weights: Option<[f64; 2]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            max_epochs: 300,
            patience: 30,
            seed: 0,
            gradient: GradientMethod::Adjoint,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0
            || self.max_epochs == 0
            || !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(Error::invalid(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training loss at the start of the epoch.
    pub loss: f64,
    /// Early-stop AUC after the update (`None` for a single-class slice).
    pub es_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_es_auc: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub weights: Vec<f64>,
    pub history: History,
}

impl TrainedModel {
    pub fn predict(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.spec.predict(&self.weights, xs)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: TrainedModel = serde_json::from_str(&text)?;
        m.spec.validate()?;
        check_params(m.spec.n_params(), m.weights.len())?;
        Ok(m)
    }
}

/// Labelled samples borrowed from a dataset slice.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [f64],
}

impl<'a> Samples<'a> {
    pub fn new(x: &'a [Vec<f64>], y: &'a [f64]) -> Result<Self> {
        ensure_same_len(x.len(), y.len())?;
        Ok(Self { x, y })
    }
}

/// Mean weighted BCE and its gradient over a full batch.
pub fn loss_and_grad(
    spec: &ModelSpec,
    w: &[f64],
    data: Samples<'_>,
    weights: [f64; 2],
    method: GradientMethod,
) -> Result<(f64, Vec<f64>)> {
    let n = data.x.len();
    ensure_len(1, n)?;
    let parts = par::map_indexed(n, |i| spec.forward_grad(w, &data.x[i], method));
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len()];
    for (i, part) in parts.into_iter().enumerate() {
        let (p, g) = part?;
        let y = data.y[i];
        let wy = weights[usize::from(y > 0.5)];
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= wy * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        let dl_dp = if p == pc {
            -wy * (y / pc - (1.0 - y) / (1.0 - pc))
        } else {
            0.0
        };
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += dl_dp * b;
        }
    }
    let nf = n as f64;
    grad.iter_mut().for_each(|g| *g /= nf);
    Ok((loss / nf, grad))
}

/// Full-batch gradient descent with momentum on weighted BCE. After each
/// update the early-stop AUC is measured (undefined AUC counts as 0.5);
/// training stops after `patience` epochs without strict improvement and
/// returns the weights of the best epoch.
pub fn train(
    spec: &ModelSpec,
    train_set: Samples<'_>,
    early_stop: Samples<'_>,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    spec.validate()?;
    cfg.validate()?;
    ensure_len(2, train_set.x.len())?;
    ensure_len(2, early_stop.x.len())?;
    let weights = cfg.class_weights.unwrap_or_else(|| class_weights(train_set.y));
    let mut w = spec.init_params(cfg.seed);
    let mut velocity = vec![0.0; w.len()];
    let mut history = History {
        best_es_auc: f64::NEG_INFINITY,
        ..History::default()
    };
    let mut best_w = w.clone();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let (loss, grad) = loss_and_grad(spec, &w, train_set, weights, cfg.gradient)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!("{} at epoch {epoch}", spec.label())));
        }
        for ((wi, vi), gi) in w.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
            *wi += *vi;
        }
        let es_probs = spec.predict(&w, early_stop.x)?;
        let es_auc = metrics::auc(&es_probs, early_stop.y)?;
        history.epochs.push(EpochRecord { epoch, loss, es_auc });
        let score = es_auc.unwrap_or(0.5);
        if score > history.best_es_auc {
            history.best_es_auc = score;
            history.best_epoch = epoch;
            best_w.clone_from(&w);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainedModel {
        spec: spec.clone(),
        weights: best_w,
        history,
    })
}

// ---------------------------------------------------------------------------
// architecture search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureChoice {
    pub best: ModelSpec,
    pub best_auc: f64,
    /// Mean validation AUC per grid point (`None` when evaluation failed).
    pub scores: Vec<Option<f64>>,
}

/// Index of the winner: highest score, then fewer parameters, then the
/// lexicographically smaller label.
pub fn select_best(grid: &[ModelSpec], scores: &[Option<f64>]) -> Result<usize> {
    ensure_same_len(grid.len(), scores.len())?;
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(s) = *s else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let bs = scores[b].expect("best has a score");
                s > bs || (s == bs && (grid[i].n_params(), grid[i].label()) < (grid[b].n_params(), grid[b].label()))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::NotConverged("no grid point could be evaluated".into()))
}

/// Scores every grid point with `evaluate` (mean validation AUC over folds)
/// and applies [`select_best`].
pub fn architecture_search<F>(grid: &[ModelSpec], evaluate: F) -> Result<ArchitectureChoice>
where
    F: Fn(&ModelSpec) -> Result<f64> + Sync + Send,
{
    if grid.is_empty() {
        return Err(Error::invalid("architecture grid is empty"));
    }
    let scores: Vec<Option<f64>> = par::map_indexed(grid.len(), |i| match evaluate(&grid[i]) {
        Ok(s) if s.is_finite() => Some(s),
        Ok(_) => None,
        Err(e) => {
            log::debug!("grid point {} failed: {e}", grid[i].label());
            None
        }
    });
    let i = select_best(grid, &scores)?;
    Ok(ArchitectureChoice {
        best: grid[i].clone(),
        best_auc: scores[i].expect("selected point has a score"),
        scores,
    })
}

/// QNN grid: every architecture and depth; amplitude grids also sweep the
/// qubit count. Angle models without a projection use one qubit per
/// feature, and hybrid angle models project onto the same count.
pub fn qnn_grid(encoding: Encoding, input_dim: usize, layers: &[usize], qubits: &[usize]) -> Vec<ModelSpec> {
    let mut out = Vec::new();
    for arch in QnnArch::ALL {
        for &l in layers {
            match encoding {
                Encoding::Angle => out.push(ModelSpec::Qnn(QnnSpec::new(arch, encoding, l, input_dim, input_dim))),
                Encoding::Amplitude => {
                    for &q in qubits {
                        out.push(ModelSpec::Qnn(QnnSpec::new(arch, encoding, l, q, input_dim)));
                    }
                }
            }
        }
    }
    out
}

pub fn lstm_grid(input_dim: usize, window: usize, hidden: &[usize], layers: &[usize]) -> Vec<ModelSpec> {
    hidden
        .iter()
        .flat_map(|&h| {
            layers.iter().map(move |&l| {
                ModelSpec::Lstm(LstmSpec {
                    input_dim,
                    hidden: h,
                    layers: l,
                    window,
                })
            })
        })
        .collect()
}

pub fn qlstm_grid(input_dim: usize, window: usize, hidden: &[usize], layers: &[usize]) -> Vec<ModelSpec> {
    hidden
        .iter()
        .flat_map(|&h| {
            layers
                .iter()
                .map(move |&l| ModelSpec::Qlstm(QlstmSpec::new(input_dim, h, l, window)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-a..a)).collect()
    }

    #[test]
    fn ann_examples() {
        let s = AnnSpec::new(&[3, 11, 1]);
        assert_eq!(s.n_params(), 56);
        assert_eq!(AnnSpec::new(&[7, 32, 16, 1]).n_params(), 801);
        assert_eq!(AnnSpec::new(&[64, 32, 1]).n_params(), 2113);
        assert_eq!(ann_forward(&s, &vec![0.0; 56], &[0.3, -1.0, 2.0]).unwrap(), 0.5);
        assert!(ann_forward(&s, &vec![0.0; 56], &[0.3]).is_err());
    }

    #[test]
    fn qnn_examples() {
        let sq = QnnSpec::new(QnnArch::Sq, Encoding::Angle, 1, 2, 2);
        assert_eq!(qnn_forward(&sq, &vec![0.0; sq.n_params()], &[0.0, 0.0]).unwrap(), 1.0);

        let mq = QnnSpec::new(QnnArch::Mq, Encoding::Angle, 2, 3, 3);
        let mut w = ModelSpec::Qnn(mq).init_params(3);
        let n = w.len();
        w[n - 4..].iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(qnn_forward(&mq, &w, &[0.1, 0.5, 0.9]).unwrap(), 0.5);

        let one = QnnSpec::new(QnnArch::Sq, Encoding::Angle, 1, 1, 1);
        let p = qnn_forward(&one, &[0.0, std::f64::consts::PI, 0.0], &[0.0]).unwrap();
        assert!(p.abs() < 1e-15);

        assert!(QnnSpec::new(QnnArch::Sq, Encoding::Angle, 1, 2, 3).validate().is_err());
        assert!(QnnSpec::new(QnnArch::Sq, Encoding::Amplitude, 1, 2, 5)
            .validate()
            .is_err());
        assert!(QnnSpec::new(QnnArch::HybridSq, Encoding::Amplitude, 1, 2, 5)
            .validate()
            .is_ok());
    }

    #[test]
    fn sq_readout_is_rescaled_z0() {
        let spec = QnnSpec::new(QnnArch::Sq, Encoding::Angle, 2, 3, 3);
        let w = ModelSpec::Qnn(spec).init_params(5);
        let x = [0.2, 0.7, 0.4];
        let block = spec.block();
        let z0 = block.forward(&w, &x).unwrap()[0];
        assert_eq!(qnn_forward(&spec, &w, &x).unwrap(), (z0 + 1.0) / 2.0);
    }

    #[test]
    fn lstm_examples() {
        let spec = LstmSpec {
            input_dim: 2,
            hidden: 3,
            layers: 1,
            window: 4,
        };
        let w = vec![0.0; spec.n_params()];
        let (h, c) = lstm_step(&spec, &w, 0, &[1.0, -1.0], &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(c, vec![0.0; 3]);

        // forget gate saturated open, input gate shut
        let mut w = vec![0.0; spec.n_params()];
        let bias = 4 * 3 * (2 + 3);
        for u in 0..3 {
            w[bias + u] = -50.0;
            w[bias + 3 + u] = 50.0;
        }
        let (_, c) = lstm_step(&spec, &w, 0, &[0.4, 0.9], &[0.1, 0.2, 0.3], &[0.5, -0.2, 0.7]).unwrap();
        for (a, b) in c.iter().zip([0.5, -0.2, 0.7]) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn qlstm_shapes_and_counts() {
        let spec = QlstmSpec::new(4, 4, 2, 10);
        let w = ModelSpec::Qlstm(spec).init_params(1);
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(qlstm_final_hidden(&spec, &w, &x).unwrap().len(), 4);
        for h in [3, 4, 5] {
            for l in 2..=6 {
                let n = QlstmSpec::new(4, h, l, 10).n_params();
                assert!((100..1000).contains(&n), "h={h} L={l}: {n}");
            }
        }
        let zeros = {
            let mut z = w.clone();
            let off = spec.embed_len();
            z[off..off + 6 * spec.block_len()].iter_mut().for_each(|v| *v = 0.0);
            z
        };
        let m = ModelSpec::Qlstm(spec);
        assert_eq!(
            m.forward(&zeros, &x).unwrap().to_bits(),
            m.forward(&zeros, &x).unwrap().to_bits()
        );
    }

    #[test]
    fn bce_examples() {
        let l = weighted_bce(&[1.0, 0.0], &[1.0, 0.0], [1.0, 1.0]).unwrap();
        assert!(l <= 1e-6);
        assert_relative_eq!(
            weighted_bce(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0], [1.0, 1.0]).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
        let base = weighted_bce(&[0.3], &[1.0], [1.0, 1.0]).unwrap();
        assert_relative_eq!(
            weighted_bce(&[0.3], &[1.0], [1.0, 2.0]).unwrap(),
            2.0 * base,
            epsilon = 1e-15
        );
        assert!(weighted_bce(&[0.3], &[1.0, 0.0], [1.0, 1.0]).is_err());
        assert_eq!(class_weights(&[1.0, 0.0, 0.0, 0.0]), [4.0 / 6.0, 2.0]);
    }

    fn fd_check(spec: &ModelSpec, method: GradientMethod, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = spec.init_params(seed);
        let xs: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                rand_vec(&mut rng, spec.input_len(), 1.0)
                    .iter()
                    .map(|v| v.abs())
                    .collect()
            })
            .collect();
        let ys: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
        let data = Samples::new(&xs, &ys).unwrap();
        let cw = [0.8, 1.3];
        let (_, g) = loss_and_grad(spec, &w, data, cw, method).unwrap();
        let h = 1e-6;
        for k in 0..w.len() {
            let mut wp = w.clone();
            wp[k] += h;
            let mut wm = w.clone();
            wm[k] -= h;
            let lp = loss_and_grad(spec, &wp, data, cw, method).unwrap().0;
            let lm = loss_and_grad(spec, &wm, data, cw, method).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let err = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-3);
            assert!(err < 1e-5, "{} param {k}: analytic {} vs fd {fd}", spec.label(), g[k]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(&ModelSpec::Ann(AnnSpec::new(&[3, 5, 4, 1])), GradientMethod::Adjoint, 1);
        for (i, arch) in QnnArch::ALL.into_iter().enumerate() {
            let angle = ModelSpec::Qnn(QnnSpec::new(arch, Encoding::Angle, 2, 3, 3));
            fd_check(&angle, GradientMethod::Adjoint, 10 + i as u64);
            fd_check(&angle, GradientMethod::ParameterShift, 20 + i as u64);
            let amp = ModelSpec::Qnn(QnnSpec::new(arch, Encoding::Amplitude, 2, 3, 5));
            fd_check(&amp, GradientMethod::Adjoint, 30 + i as u64);
            fd_check(&amp, GradientMethod::ParameterShift, 40 + i as u64);
        }
        fd_check(
            &ModelSpec::Lstm(LstmSpec {
                input_dim: 2,
                hidden: 3,
                layers: 2,
                window: 4,
            }),
            GradientMethod::Adjoint,
            2,
        );
        let q = ModelSpec::Qlstm(QlstmSpec::new(2, 3, 1, 3));
        fd_check(&q, GradientMethod::Adjoint, 3);
        fd_check(&q, GradientMethod::ParameterShift, 4);
    }

    #[test]
    fn ann_separates_linear_toy_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<Vec<f64>> = (0..60)
            .map(|_| rand_vec(&mut rng, 2, 1.0))
            .filter(|x| (x[0] + x[1]).abs() > 0.2)
            .collect();
        let ys: Vec<f64> = xs.iter().map(|x| f64::from(u8::from(x[0] + x[1] > 0.0))).collect();
        let spec = ModelSpec::Ann(AnnSpec::new(&[2, 4, 1]));
        let cfg = TrainConfig {
            max_epochs: 200,
            patience: 200,
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        let data = Samples::new(&xs, &ys).unwrap();
        let m = train(&spec, data, data, &cfg).unwrap();
        let pred = m.predict(&xs).unwrap();
        let acc = metrics::classification_metrics(&pred, &ys, 0.5).unwrap().accuracy;
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn flat_es_auc_stops_after_patience() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0]).collect();
        let ys: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let es_x = vec![vec![0.5]; 6];
        let es_y = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let cfg = TrainConfig {
            patience: 30,
            max_epochs: 500,
            ..TrainConfig::default()
        };
        let spec = ModelSpec::Ann(AnnSpec::new(&[1, 2, 1]));
        let m = train(
            &spec,
            Samples::new(&xs, &ys).unwrap(),
            Samples::new(&es_x, &es_y).unwrap(),
            &cfg,
        )
        .unwrap();
        assert!(m.history.stopped_early);
        assert!(m.history.epochs.len() <= 31);
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let xs: Vec<Vec<f64>> = (0..16)
            .map(|i| vec![(i as f64 * 0.3).sin().abs(), (i as f64 * 0.7).cos().abs()])
            .collect();
        let ys: Vec<f64> = xs.iter().map(|x| f64::from(u8::from(x[0] > x[1]))).collect();
        let spec = ModelSpec::Qnn(QnnSpec::new(QnnArch::HybridMq, Encoding::Angle, 1, 2, 2));
        let cfg = TrainConfig {
            max_epochs: 15,
            seed: 9,
            ..TrainConfig::default()
        };
        let data = Samples::new(&xs, &ys).unwrap();
        let a = train(&spec, data, data, &cfg).unwrap();
        let b = train(&spec, data, data, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        a.save_json(&path).unwrap();
        assert_eq!(TrainedModel::load_json(&path).unwrap(), a);
    }

    #[test]
    fn search_tie_break_and_grid_sizes() {
        let big = ModelSpec::Ann(AnnSpec::new(&[3, 11, 1]));
        let small = ModelSpec::Ann(AnnSpec::new(&[3, 2, 1]));
        let grid = vec![big.clone(), small.clone()];
        let r = architecture_search(&grid, |_| Ok(0.7)).unwrap();
        assert_eq!(r.best, small);
        let r = architecture_search(&grid[..1], |_| Ok(0.1)).unwrap();
        assert_eq!(r.best, big);
        assert!(architecture_search(&[], |_| Ok(0.1)).is_err());
        let layers: Vec<usize> = (1..=6).collect();
        assert_eq!(qnn_grid(Encoding::Angle, 3, &layers, &[]).len(), 24);
        assert_eq!(qnn_grid(Encoding::Amplitude, 3, &layers, &[2, 3, 4, 5, 6]).len(), 120);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn outputs_are_probabilities(seed in any::<u64>(), which in 0usize..5) {
            let spec = match which {
                0 => ModelSpec::Ann(AnnSpec::new(&[3, 11, 1])),
                1 => ModelSpec::Qnn(QnnSpec::new(QnnArch::Sq, Encoding::Angle, 2, 3, 3)),
                2 => ModelSpec::Qnn(QnnSpec::new(QnnArch::HybridMq, Encoding::Amplitude, 1, 2, 3)),
                3 => ModelSpec::Lstm(LstmSpec { input_dim: 3, hidden: 3, layers: 2, window: 1 }),
                _ => ModelSpec::Qlstm(QlstmSpec::new(3, 2, 1, 1)),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = rand_vec(&mut rng, spec.n_params(), 3.0);
            let x = rand_vec(&mut rng, spec.input_len(), 2.0);
            let p = spec.forward(&w, &x).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
