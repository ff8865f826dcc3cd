//! Dense statevector simulation of small parameterised circuits.
//!
//! Qubit `k` is bit `k` of the basis-state index (qubit 0 is the least
//! significant bit). Rotations follow `R_P(θ) = exp(-iθP/2)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest register the simulator accepts.
pub const MAX_QUBITS: usize = 14;

const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n: usize,
    amps: Vec<Complex64>,
}

impl StateVector {
    /// `|0...0>` on `n` qubits.
    pub fn zero(n: usize) -> Result<Self> {
        check_qubits(n)?;
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n];
        amps[0] = Complex64::new(1.0, 0.0);
        Ok(Self { n, amps })
    }

    pub fn basis(n: usize, index: usize) -> Result<Self> {
        let mut s = Self::zero(n)?;
        if index >= s.amps.len() {
            return Err(Error::invalid(format!(
                "basis index {index} out of range for {n} qubits"
            )));
        }
        s.amps[0] = Complex64::new(0.0, 0.0);
        s.amps[index] = Complex64::new(1.0, 0.0);
        Ok(s)
    }

    /// Wraps amplitudes that are already normalised.
    pub fn from_amplitudes(amps: Vec<Complex64>) -> Result<Self> {
        let len = amps.len();
        if len == 0 || !len.is_power_of_two() {
            return Err(Error::invalid(format!("amplitude count {len} is not a power of two")));
        }
        let n = len.trailing_zeros() as usize;
        check_qubits(n)?;
        let s = Self { n, amps };
        if (s.norm_sqr() - 1.0).abs() > NORM_TOL {
            return Err(Error::invalid(format!("state norm^2 {} is not 1", s.norm_sqr())));
        }
        Ok(s)
    }

    pub fn n_qubits(&self) -> usize {
        self.n
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn rotate(&mut self, kind: GateKind, q: usize, theta: f64) {
        let (s, c) = (theta / 2.0).sin_cos();
        let m = match kind {
            GateKind::RX => [
                [Complex64::new(c, 0.0), Complex64::new(0.0, -s)],
                [Complex64::new(0.0, -s), Complex64::new(c, 0.0)],
            ],
            GateKind::RY => [
                [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
                [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
            ],
            GateKind::RZ => [
                [Complex64::new(c, -s), Complex64::new(0.0, 0.0)],
                [Complex64::new(0.0, 0.0), Complex64::new(c, s)],
            ],
            GateKind::CZ | GateKind::CNOT => unreachable!("not a rotation"),
        };
        self.apply_1q(q, &m);
    }

    fn apply_1q(&mut self, q: usize, m: &[[Complex64; 2]; 2]) {
        let mask = 1usize << q;
        for i in 0..self.amps.len() {
            if i & mask == 0 {
                let j = i | mask;
                let (a0, a1) = (self.amps[i], self.amps[j]);
                self.amps[i] = m[0][0] * a0 + m[0][1] * a1;
                self.amps[j] = m[1][0] * a0 + m[1][1] * a1;
            }
        }
    }

    /// Multiplies by the Pauli generator of a rotation (no 1/2 factor).
    fn apply_pauli(&mut self, kind: GateKind, q: usize) {
        let mask = 1usize << q;
        let i_unit = Complex64::new(0.0, 1.0);
        for i in 0..self.amps.len() {
            if i & mask != 0 {
                continue;
            }
            let j = i | mask;
            let (a0, a1) = (self.amps[i], self.amps[j]);
            match kind {
                GateKind::RX => {
                    self.amps[i] = a1;
                    self.amps[j] = a0;
                }
                GateKind::RY => {
                    self.amps[i] = -i_unit * a1;
                    self.amps[j] = i_unit * a0;
                }
                GateKind::RZ => {
                    self.amps[j] = -a1;
                }
                _ => unreachable!("not a rotation"),
            }
        }
    }

    fn cz(&mut self, a: usize, b: usize) {
        let mask = (1usize << a) | (1usize << b);
        for (i, amp) in self.amps.iter_mut().enumerate() {
            if i & mask == mask {
                *amp = -*amp;
            }
        }
    }

    fn cnot(&mut self, control: usize, target: usize) {
        let (cm, tm) = (1usize << control, 1usize << target);
        for i in 0..self.amps.len() {
            if i & cm != 0 && i & tm == 0 {
                self.amps.swap(i, i | tm);
            }
        }
    }

    fn apply(&mut self, gate: &Gate, theta: f64) {
        match gate.kind {
            GateKind::CZ => self.cz(gate.control.expect("validated"), gate.target),
            GateKind::CNOT => self.cnot(gate.control.expect("validated"), gate.target),
            kind => self.rotate(kind, gate.target, theta),
        }
    }

    fn apply_inverse(&mut self, gate: &Gate, theta: f64) {
        match gate.kind {
            GateKind::CZ | GateKind::CNOT => self.apply(gate, 0.0),
            kind => self.rotate(kind, gate.target, -theta),
        }
    }

    fn dot(&self, other: &StateVector) -> Complex64 {
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }
}

fn check_qubits(n: usize) -> Result<()> {
    if n == 0 || n > MAX_QUBITS {
        return Err(Error::invalid(format!("qubit count {n} outside 1..={MAX_QUBITS}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateKind {
    RX,
    RY,
    RZ,
    CZ,
    CNOT,
}

impl GateKind {
    pub fn is_rotation(self) -> bool {
        matches!(self, GateKind::RX | GateKind::RY | GateKind::RZ)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Angle {
    Fixed(f64),
    Param(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub kind: GateKind,
    pub target: usize,
    pub control: Option<usize>,
    pub angle: Option<Angle>,
}

impl Gate {
    pub fn rotation(kind: GateKind, target: usize, angle: Angle) -> Self {
        Self {
            kind,
            target,
            control: None,
            angle: Some(angle),
        }
    }

    pub fn cz(a: usize, b: usize) -> Self {
        Self {
            kind: GateKind::CZ,
            target: b,
            control: Some(a),
            angle: None,
        }
    }

    pub fn cnot(control: usize, target: usize) -> Self {
        Self {
            kind: GateKind::CNOT,
            target,
            control: Some(control),
            angle: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Entangler {
    #[default]
    Ring,
    Line,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitSpec {
    pub n: usize,
    pub ops: Vec<Gate>,
    pub params: Vec<f64>,
}

impl CircuitSpec {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            ops: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn push(&mut self, gate: Gate) -> &mut Self {
        self.ops.push(gate);
        self
    }

    /// Appends a rotation driven by a fresh parameter and returns its index.
    pub fn push_param_rotation(&mut self, kind: GateKind, target: usize, value: f64) -> usize {
        let idx = self.params.len();
        self.params.push(value);
        self.ops.push(Gate::rotation(kind, target, Angle::Param(idx)));
        idx
    }

    pub fn push_entangler(&mut self, pattern: Entangler) -> &mut Self {
        for (a, b) in entangler_pairs(self.n, pattern) {
            self.ops.push(Gate::cz(a, b));
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_qubits(self.n)?;
        for (k, g) in self.ops.iter().enumerate() {
            if g.target >= self.n || g.control.is_some_and(|c| c >= self.n) {
                return Err(Error::invalid(format!(
                    "gate {k} addresses a qubit outside 0..{}",
                    self.n
                )));
            }
            match (g.kind.is_rotation(), g.control, g.angle) {
                (true, None, Some(Angle::Param(i))) if i >= self.params.len() => {
                    return Err(Error::invalid(format!(
                        "gate {k} uses parameter {i} of {}",
                        self.params.len()
                    )))
                }
                (true, None, Some(_)) => {}
                (false, Some(c), None) if c != g.target => {}
                _ => return Err(Error::invalid(format!("gate {k} is malformed: {g:?}"))),
            }
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite circuit parameter"));
        }
        Ok(())
    }

    fn theta(&self, gate: &Gate) -> f64 {
        match gate.angle {
            Some(Angle::Fixed(v)) => v,
            Some(Angle::Param(i)) => self.params[i],
            None => 0.0,
        }
    }

    /// Exact inverse with parameters bound to fixed angles.
    pub fn inverse(&self) -> CircuitSpec {
        let ops = self
            .ops
            .iter()
            .rev()
            .map(|g| match g.angle {
                Some(_) => Gate::rotation(g.kind, g.target, Angle::Fixed(-self.theta(g))),
                None => *g,
            })
            .collect();
        CircuitSpec {
            n: self.n,
            ops,
            params: Vec::new(),
        }
    }
}

/// CZ pairs of one entangling layer. A ring on two qubits is a single CZ.
pub fn entangler_pairs(n: usize, pattern: Entangler) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
    if pattern == Entangler::Ring && n > 2 {
        pairs.push((n - 1, 0));
    }
    pairs
}

/// One hardware-efficient layer: RX, RY, RZ on every qubit, then CZs.
/// Returns the index of the first new parameter.
pub fn push_ansatz_layer(spec: &mut CircuitSpec, pattern: Entangler, init: &[f64]) -> usize {
    let first = spec.params.len();
    let mut vals = init.iter().copied();
    for q in 0..spec.n {
        for kind in [GateKind::RX, GateKind::RY, GateKind::RZ] {
            spec.push_param_rotation(kind, q, vals.next().unwrap_or(0.0));
        }
    }
    spec.push_entangler(pattern);
    first
}

pub fn run_circuit(spec: &CircuitSpec, input: &StateVector) -> Result<StateVector> {
    spec.validate()?;
    if input.n != spec.n {
        return Err(Error::DimensionMismatch {
            expected: spec.n,
            got: input.n,
        });
    }
    Ok(run_unchecked(spec, input))
}

fn run_unchecked(spec: &CircuitSpec, input: &StateVector) -> StateVector {
    let mut s = input.clone();
    for g in &spec.ops {
        s.apply(g, spec.theta(g));
    }
    s
}

/// `⊗ RY(π x_i)|0>`.
pub fn angle_encode(x: &[f64]) -> Result<StateVector> {
    if x.is_empty() {
        return Err(Error::invalid("angle encoding needs at least one feature"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite feature"));
    }
    let mut s = StateVector::zero(x.len())?;
    for (q, v) in x.iter().enumerate() {
        s.rotate(GateKind::RY, q, std::f64::consts::PI * v);
    }
    Ok(s)
}

/// Number of qubits needed to amplitude-encode `d` features.
pub fn amplitude_qubits(d: usize) -> usize {
    (d.max(2)).next_power_of_two().trailing_zeros() as usize
}

/// `x / ‖x‖` zero-padded to `2^n`, with `n = max(1, ceil(log2 d))` unless a
/// larger register is requested.
pub fn amplitude_encode_on(x: &[f64], n: usize) -> Result<StateVector> {
    if x.len() > (1usize << n.min(63)) {
        return Err(Error::invalid(format!("{} features do not fit in {n} qubits", x.len())));
    }
    check_qubits(n)?;
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::invalid("amplitude encoding of a zero or non-finite vector"));
    }
    let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n];
    for (a, v) in amps.iter_mut().zip(x) {
        *a = Complex64::new(v / norm, 0.0);
    }
    Ok(StateVector { n, amps })
}

pub fn amplitude_encode(x: &[f64]) -> Result<StateVector> {
    amplitude_encode_on(x, amplitude_qubits(x.len()))
}

pub fn expectation_z(state: &StateVector, qubit: usize) -> Result<f64> {
    if qubit >= state.n {
        return Err(Error::invalid(format!(
            "qubit {qubit} out of range for {} qubits",
            state.n
        )));
    }
    let mask = 1usize << qubit;
    Ok(state
        .amps
        .iter()
        .enumerate()
        .map(|(i, a)| if i & mask == 0 { a.norm_sqr() } else { -a.norm_sqr() })
        .sum())
}

/// `<Z_k>` for every qubit in one pass.
pub fn expectations_z(state: &StateVector) -> Vec<f64> {
    let mut out = vec![0.0; state.n];
    for (i, a) in state.amps.iter().enumerate() {
        let p = a.norm_sqr();
        for (k, o) in out.iter_mut().enumerate() {
            if i >> k & 1 == 0 {
                *o += p;
            } else {
                *o -= p;
            }
        }
    }
    out
}

pub fn overlap(a: &StateVector, b: &StateVector) -> Result<Complex64> {
    if a.n != b.n {
        return Err(Error::DimensionMismatch {
            expected: a.n,
            got: b.n,
        });
    }
    Ok(a.dot(b))
}

fn sum_z(state: &StateVector, qubits: &[usize]) -> Result<f64> {
    qubits.iter().map(|&q| expectation_z(state, q)).sum()
}

/// Parameter-shift derivative of `Σ_{q in qubits} <Z_q>` with respect to
/// parameter `param_index`, summed over every gate that uses it.
pub fn parameter_shift_grad(
    spec: &CircuitSpec,
    input: &StateVector,
    qubits: &[usize],
    param_index: usize,
) -> Result<f64> {
    spec.validate()?;
    if input.n != spec.n {
        return Err(Error::DimensionMismatch {
            expected: spec.n,
            got: input.n,
        });
    }
    let users: Vec<usize> = spec
        .ops
        .iter()
        .enumerate()
        .filter(|(_, g)| g.angle == Some(Angle::Param(param_index)))
        .map(|(k, _)| k)
        .collect();
    if users.is_empty() {
        return Err(Error::invalid(format!(
            "parameter {param_index} drives no rotation gate"
        )));
    }
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut grad = 0.0;
    for &k in &users {
        let mut shifted = spec.clone();
        shifted.ops[k].angle = Some(Angle::Fixed(spec.params[param_index] + half_pi));
        let plus = sum_z(&run_unchecked(&shifted, input), qubits)?;
        shifted.ops[k].angle = Some(Angle::Fixed(spec.params[param_index] - half_pi));
        let minus = sum_z(&run_unchecked(&shifted, input), qubits)?;
        grad += (plus - minus) / 2.0;
    }
    Ok(grad)
}

/// Result of a reverse-mode pass through a circuit.
#[derive(Debug, Clone)]
pub struct AdjointGrad {
    /// `<Z_k>` on the output state.
    pub expectations: Vec<f64>,
    /// `dL/dθ_i` for every circuit parameter.
    pub param_grads: Vec<f64>,
    /// `U^† M U |ψ_in>` with `M = Σ c_k Z_k`; `2 Re` of this is the gradient of
    /// `L` with respect to a real input state.
    pub input_cotangent: StateVector,
}

/// Vector-Jacobian product of the per-qubit Z expectations: given
/// `c_k = dL/d<Z_k>`, returns `dL/dθ` for every parameter in one backward
/// sweep. Agrees with [`parameter_shift_grad`] to rounding.
pub fn adjoint_vjp(spec: &CircuitSpec, input: &StateVector, cotangent: &[f64]) -> Result<AdjointGrad> {
    spec.validate()?;
    if input.n != spec.n || cotangent.len() != spec.n {
        return Err(Error::DimensionMismatch {
            expected: spec.n,
            got: if input.n != spec.n { input.n } else { cotangent.len() },
        });
    }
    let mut phi = run_unchecked(spec, input);
    let expectations = expectations_z(&phi);
    let mut lambda = phi.clone();
    for (i, a) in lambda.amps.iter_mut().enumerate() {
        let w: f64 = cotangent
            .iter()
            .enumerate()
            .map(|(k, c)| if i >> k & 1 == 0 { *c } else { -*c })
            .sum();
        *a *= w;
    }
    let mut grads = vec![0.0; spec.params.len()];
    for g in spec.ops.iter().rev() {
        let theta = spec.theta(g);
        if let Some(Angle::Param(p)) = g.angle {
            let mut mu = phi.clone();
            mu.apply_pauli(g.kind, g.target);
            grads[p] += lambda.dot(&mu).im;
        }
        phi.apply_inverse(g, theta);
        lambda.apply_inverse(g, theta);
    }
    Ok(AdjointGrad {
        expectations,
        param_grads: grads,
        input_cotangent: lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    pub(crate) fn random_circuit(rng: &mut ChaCha8Rng, n: usize, depth: usize) -> CircuitSpec {
        let mut spec = CircuitSpec::new(n);
        for _ in 0..depth {
            for q in 0..n {
                let kind = [GateKind::RX, GateKind::RY, GateKind::RZ][rng.gen_range(0..3)];
                spec.push_param_rotation(kind, q, rng.gen_range(-PI..PI));
            }
            if n > 1 {
                let a = rng.gen_range(0..n);
                let b = (a + rng.gen_range(1..n)) % n;
                if rng.gen_bool(0.5) {
                    spec.push(Gate::cz(a, b));
                } else {
                    spec.push(Gate::cnot(a, b));
                }
            }
        }
        spec
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> StateVector {
        let mut amps: Vec<Complex64> = (0..1 << n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        amps.iter_mut().for_each(|a| *a /= norm);
        StateVector::from_amplitudes(amps).unwrap()
    }

    #[test]
    fn basic_gates() {
        let zero = StateVector::zero(1).unwrap();
        assert_eq!(run_circuit(&CircuitSpec::new(1), &zero).unwrap(), zero);

        let mut ry = CircuitSpec::new(1);
        ry.push(Gate::rotation(GateKind::RY, 0, Angle::Fixed(PI)));
        let out = run_circuit(&ry, &zero).unwrap();
        assert!(out.amplitudes()[0].norm() < 1e-15);
        assert_relative_eq!(out.amplitudes()[1].norm(), 1.0, epsilon = 1e-15);

        let mut cz = CircuitSpec::new(2);
        cz.push(Gate::cz(0, 1));
        let out = run_circuit(&cz, &StateVector::basis(2, 3).unwrap()).unwrap();
        assert_eq!(out.amplitudes()[3], Complex64::new(-1.0, 0.0));

        let mut cx = CircuitSpec::new(2);
        cx.push(Gate::cnot(0, 1));
        let out = run_circuit(&cx, &StateVector::basis(2, 1).unwrap()).unwrap();
        assert_eq!(out.amplitudes()[3], Complex64::new(1.0, 0.0));

        assert!(run_circuit(&cz, &zero).is_err());
    }

    #[test]
    fn encodings() {
        assert_eq!(angle_encode(&[0.0, 0.0]).unwrap(), StateVector::zero(2).unwrap());
        let one = angle_encode(&[1.0]).unwrap();
        assert_relative_eq!(one.amplitudes()[1].norm(), 1.0, epsilon = 1e-15);
        assert!(expectation_z(&angle_encode(&[0.5]).unwrap(), 0).unwrap().abs() < 1e-15);
        assert!(angle_encode(&[]).is_err());

        assert_eq!(
            amplitude_encode(&[1.0, 0.0, 0.0, 0.0]).unwrap(),
            StateVector::zero(2).unwrap()
        );
        let u = amplitude_encode(&[1.0; 4]).unwrap();
        assert!(u.amplitudes().iter().all(|a| (a.re - 0.5).abs() < 1e-15));
        let s = amplitude_encode(&[3.0, 4.0]).unwrap();
        assert_eq!(s.n_qubits(), 1);
        assert_relative_eq!(s.amplitudes()[0].re, 0.6, epsilon = 1e-15);
        assert_relative_eq!(s.amplitudes()[1].re, 0.8, epsilon = 1e-15);
        assert!(amplitude_encode(&[0.0, 0.0]).is_err());
        assert_eq!(amplitude_encode(&[1.0; 5]).unwrap().n_qubits(), 3);
    }

    #[test]
    fn expectations_and_overlaps() {
        let zero = StateVector::zero(1).unwrap();
        let one = StateVector::basis(1, 1).unwrap();
        assert_eq!(expectation_z(&zero, 0).unwrap(), 1.0);
        assert_eq!(expectation_z(&one, 0).unwrap(), -1.0);
        let mut ry = CircuitSpec::new(1);
        ry.push(Gate::rotation(GateKind::RY, 0, Angle::Fixed(1.0)));
        let s = run_circuit(&ry, &zero).unwrap();
        assert_relative_eq!(expectation_z(&s, 0).unwrap(), 1.0f64.cos(), epsilon = 1e-14);
        assert!(expectation_z(&s, 1).is_err());

        assert_relative_eq!(overlap(&s, &s).unwrap().re, 1.0, epsilon = 1e-14);
        assert_eq!(overlap(&zero, &one).unwrap().norm(), 0.0);
        assert_relative_eq!(overlap(&zero, &s).unwrap().re, 0.5f64.cos(), epsilon = 1e-14);
        assert!(overlap(&zero, &StateVector::zero(2).unwrap()).is_err());
    }

    #[test]
    fn parameter_shift_examples() {
        let zero = StateVector::zero(1).unwrap();
        let mut spec = CircuitSpec::new(1);
        spec.push_param_rotation(GateKind::RY, 0, 0.0);
        assert!(parameter_shift_grad(&spec, &zero, &[0], 0).unwrap().abs() < 1e-15);
        spec.params[0] = PI / 2.0;
        assert_relative_eq!(
            parameter_shift_grad(&spec, &zero, &[0], 0).unwrap(),
            -1.0,
            epsilon = 1e-14
        );
        assert!(parameter_shift_grad(&spec, &zero, &[0], 3).is_err());
    }

    #[test]
    fn malformed_gates_rejected() {
        let mut spec = CircuitSpec::new(2);
        spec.push(Gate {
            kind: GateKind::CZ,
            target: 0,
            control: Some(0),
            angle: None,
        });
        assert!(spec.validate().is_err());
        let mut spec = CircuitSpec::new(2);
        spec.push(Gate {
            kind: GateKind::CZ,
            target: 0,
            control: Some(1),
            angle: Some(Angle::Param(0)),
        });
        assert!(spec.validate().is_err());
        assert!(StateVector::zero(MAX_QUBITS + 1).is_err());
    }

    #[test]
    fn shift_matches_finite_difference_on_random_circuits() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        for _ in 0..100 {
            let n = rng.gen_range(1..=3);
            let spec = random_circuit(&mut rng, n, 3);
            let input = random_state(&mut rng, n);
            let p = rng.gen_range(0..spec.params.len());
            let qubits: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.7)).collect();
            let f = |theta: f64| {
                let mut s = spec.clone();
                s.params[p] = theta;
                sum_z(&run_circuit(&s, &input).unwrap(), &qubits).unwrap()
            };
            let fd = (f(spec.params[p] + h) - f(spec.params[p] - h)) / (2.0 * h);
            let ps = parameter_shift_grad(&spec, &input, &qubits, p).unwrap();
            assert!((fd - ps).abs() < 1e-6, "fd {fd} vs shift {ps}");
        }
    }

    #[test]
    fn adjoint_matches_parameter_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let n = rng.gen_range(1..=4);
            let mut spec = random_circuit(&mut rng, n, 4);
            // a shared parameter used twice
            spec.push(Gate::rotation(GateKind::RX, 0, Angle::Param(0)));
            let input = random_state(&mut rng, n);
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let adj = adjoint_vjp(&spec, &input, &c).unwrap();
            for p in 0..spec.params.len() {
                let ps: f64 = (0..n)
                    .map(|q| c[q] * parameter_shift_grad(&spec, &input, &[q], p).unwrap())
                    .sum();
                assert!((adj.param_grads[p] - ps).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adjoint_input_cotangent_gives_state_gradient() {
        // For a real input ψ, dL/dψ_i = 2 Re(U†MUψ)_i; compare with a
        // finite difference through the unnormalised quadratic form.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 2;
        let spec = random_circuit(&mut rng, n, 3);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..1.0)).collect();
        let c = vec![0.7, -0.3];
        let quad = |v: &[f64]| {
            let s = StateVector {
                n,
                amps: v.iter().map(|a| Complex64::new(*a, 0.0)).collect(),
            };
            let out = run_unchecked(&spec, &s);
            let e = expectations_z(&out);
            c[0] * e[0] + c[1] * e[1]
        };
        let s = StateVector {
            n,
            amps: x.iter().map(|a| Complex64::new(*a, 0.0)).collect(),
        };
        let adj = adjoint_vjp(&spec, &s, &c).unwrap();
        for i in 0..4 {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (quad(&up) - quad(&dn)) / 2e-6;
            assert!((fd - 2.0 * adj.input_cotangent.amplitudes()[i].re).abs() < 1e-8);
        }
    }

    #[test]
    fn ansatz_layer_layout() {
        let mut spec = CircuitSpec::new(3);
        assert_eq!(push_ansatz_layer(&mut spec, Entangler::Ring, &[]), 0);
        assert_eq!(spec.params.len(), 9);
        assert_eq!(spec.ops.iter().filter(|g| g.kind == GateKind::CZ).count(), 3);
        assert_eq!(entangler_pairs(2, Entangler::Ring), vec![(0, 1)]);
        assert!(entangler_pairs(1, Entangler::Ring).is_empty());
        assert_eq!(entangler_pairs(4, Entangler::Line).len(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn norm_preserved_and_inverse_restores(seed in any::<u64>(), n in 1usize..=12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_circuit(&mut rng, n, 6);
            let input = random_state(&mut rng, n);
            let out = run_circuit(&spec, &input).unwrap();
            prop_assert!((out.norm_sqr() - 1.0).abs() < 1e-9);
            let back = run_circuit(&spec.inverse(), &out).unwrap();
            let err = back.amplitudes().iter().zip(input.amplitudes()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            prop_assert!(err < 1e-9);
        }

        #[test]
        fn overlap_bounded(seed in any::<u64>(), n in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_state(&mut rng, n);
            let b = random_state(&mut rng, n);
            prop_assert!(overlap(&a, &b).unwrap().norm() <= 1.0 + 1e-12);
        }
    }
}
