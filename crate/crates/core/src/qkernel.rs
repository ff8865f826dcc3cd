//! Quantum feature maps and fidelity kernels `|<ψ(x_i)|ψ(x_j)>|^(2β)`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::qsim::{self, Angle, CircuitSpec, Entangler, Gate, GateKind, StateVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapVariant {
    Angle,
    Amplitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMapSpec {
    pub variant: MapVariant,
    pub n_qubits: usize,
    pub layers: usize,
    /// Fidelity exponent; always 1 for the angle map.
    pub beta: u32,
    pub seed: u64,
}

impl FeatureMapSpec {
    pub fn angle(n_qubits: usize, layers: usize, seed: u64) -> Self {
        Self {
            variant: MapVariant::Angle,
            n_qubits,
            layers,
            beta: 1,
            seed,
        }
    }

    pub fn amplitude(n_qubits: usize, layers: usize, beta: u32, seed: u64) -> Self {
        Self {
            variant: MapVariant::Amplitude,
            n_qubits,
            layers,
            beta,
            seed,
        }
    }

    /// Checks the spec against a feature dimension `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_qubits == 0 || self.n_qubits > qsim::MAX_QUBITS {
            return Err(Error::invalid(format!("qubit count {} out of range", self.n_qubits)));
        }
        match self.variant {
            MapVariant::Angle if d != self.n_qubits => Err(Error::DimensionMismatch {
                expected: self.n_qubits,
                got: d,
            }),
            MapVariant::Angle if self.beta != 1 => Err(Error::invalid("the angle map uses beta = 1")),
            MapVariant::Amplitude if d > (1 << self.n_qubits) => Err(Error::invalid(format!(
                "{d} features do not fit in {} qubits",
                self.n_qubits
            ))),
            _ if !(1..=3).contains(&self.beta) => Err(Error::invalid(format!("beta {} outside 1..=3", self.beta))),
            _ => Ok(()),
        }
    }

    /// Data-independent part of the map: one RY-RZ + CZ-ring block for the
    /// angle map (reused every repetition), or `layers` independent random
    /// blocks for the amplitude map.
    fn post_blocks(&self) -> Vec<CircuitSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut block = || {
            let mut c = CircuitSpec::new(self.n_qubits);
            for q in 0..self.n_qubits {
                let (a, b) = (
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                );
                c.push(Gate::rotation(GateKind::RY, q, Angle::Fixed(a)));
                c.push(Gate::rotation(GateKind::RZ, q, Angle::Fixed(b)));
            }
            c.push_entangler(Entangler::Ring);
            c
        };
        match self.variant {
            MapVariant::Angle => vec![block()],
            MapVariant::Amplitude => (0..self.layers).map(|_| block()).collect(),
        }
    }
}

/// Builds states for many inputs while generating the random blocks once.
pub struct FeatureMap {
    spec: FeatureMapSpec,
    blocks: Vec<CircuitSpec>,
}

impl FeatureMap {
    pub fn new(spec: FeatureMapSpec) -> Self {
        Self {
            blocks: spec.post_blocks(),
            spec,
        }
    }

    pub fn spec(&self) -> &FeatureMapSpec {
        &self.spec
    }

    pub fn state(&self, x: &[f64]) -> Result<StateVector> {
        self.spec.validate(x.len())?;
        match self.spec.variant {
            MapVariant::Angle => {
                let n = self.spec.n_qubits;
                let mut c = CircuitSpec::new(n);
                for _ in 0..self.spec.layers.max(1) {
                    for (q, v) in x.iter().enumerate() {
                        c.push(Gate::rotation(GateKind::RY, q, Angle::Fixed(std::f64::consts::PI * v)));
                    }
                    if self.spec.layers > 0 {
                        c.ops.extend_from_slice(&self.blocks[0].ops);
                    }
                }
                qsim::run_circuit(&c, &StateVector::zero(n)?)
            }
            MapVariant::Amplitude => {
                let mut s = qsim::amplitude_encode_on(x, self.spec.n_qubits)?;
                for b in &self.blocks {
                    s = qsim::run_circuit(b, &s)?;
                }
                Ok(s)
            }
        }
    }

    pub fn states(&self, xs: &[Vec<f64>]) -> Result<Vec<StateVector>> {
        par::map_indexed(xs.len(), |i| self.state(&xs[i])).into_iter().collect()
    }
}

pub fn feature_map_state(spec: &FeatureMapSpec, x: &[f64]) -> Result<StateVector> {
    FeatureMap::new(*spec).state(x)
}

fn fidelity(a: &StateVector, b: &StateVector, beta: u32) -> f64 {
    let f = qsim::overlap(a, b).expect("same register").norm_sqr().min(1.0);
    f.powi(beta as i32)
}

pub fn kernel_entry(spec: &FeatureMapSpec, xi: &[f64], xj: &[f64]) -> Result<f64> {
    let map = FeatureMap::new(*spec);
    Ok(fidelity(&map.state(xi)?, &map.state(xj)?, spec.beta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub entries: DMatrix<f64>,
    pub row_ids: Vec<usize>,
}

impl KernelMatrix {
    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.entries)
    }

    /// Elementwise power; `K^(β) = (K^(1))^∘β`.
    pub fn powi(&self, beta: u32) -> KernelMatrix {
        KernelMatrix {
            entries: self.entries.map(|v| v.powi(beta as i32)),
            row_ids: self.row_ids.clone(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(&self.entries, path)
    }

    pub fn read_csv(path: &Path) -> Result<KernelMatrix> {
        let entries = read_matrix_csv(path)?;
        if entries.nrows() != entries.ncols() {
            return Err(Error::data(format!(
                "kernel matrix in {} is {}x{}",
                path.display(),
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(KernelMatrix {
            row_ids: (0..entries.nrows()).collect(),
            entries,
        })
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric Gram matrix; each unordered pair is computed once.
pub fn gram_from_states(states: &[StateVector], beta: u32) -> DMatrix<f64> {
    let n = states.len();
    let rows = par::map_indexed(n, |i| {
        (i..n)
            .map(|j| fidelity(&states[i], &states[j], beta))
            .collect::<Vec<_>>()
    });
    let mut k = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            let j = i + off;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = 1.0;
    }
    k
}

/// Rectangular kernel with rows indexed by `rows` and columns by `cols`.
pub fn cross_from_states(rows: &[StateVector], cols: &[StateVector], beta: u32) -> DMatrix<f64> {
    let data = par::map_indexed(rows.len(), |i| {
        cols.iter().map(|c| fidelity(&rows[i], c, beta)).collect::<Vec<_>>()
    });
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| data[i][j])
}

pub fn kernel_matrix(spec: &FeatureMapSpec, xs: &[Vec<f64>]) -> Result<KernelMatrix> {
    if xs.is_empty() {
        return Err(Error::invalid("kernel matrix of an empty sample set"));
    }
    let states = FeatureMap::new(*spec).states(xs)?;
    Ok(KernelMatrix {
        entries: gram_from_states(&states, spec.beta),
        row_ids: (0..xs.len()).collect(),
    })
}

/// Kernel between test rows (matrix rows) and training rows (columns).
pub fn kernel_cross(spec: &FeatureMapSpec, train: &[Vec<f64>], test: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("kernel cross with an empty sample set"));
    }
    let map = FeatureMap::new(*spec);
    Ok(cross_from_states(&map.states(test)?, &map.states(train)?, spec.beta))
}

pub fn write_matrix_csv(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::data(format!("bad number `{s}` in {}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::data(format!("ragged matrix in {}", path.display())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data(format!("empty matrix in {}", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rand::Rng;

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn angle_layer_zero_is_bare_data_layer() {
        let spec = FeatureMapSpec::angle(2, 0, 1);
        let s = feature_map_state(&spec, &[0.3, 0.8]).unwrap();
        assert_eq!(s, qsim::angle_encode(&[0.3, 0.8]).unwrap());
    }

    #[test]
    fn amplitude_examples() {
        let spec = FeatureMapSpec::amplitude(2, 0, 1, 3);
        let s = feature_map_state(&spec, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s, StateVector::zero(2).unwrap());
        assert!(feature_map_state(&spec, &[0.0; 4]).is_err());
        let deep = FeatureMapSpec::amplitude(3, 2, 2, 3);
        let x = [0.2, 0.5, 0.1, 0.9, 0.4];
        assert_eq!(
            feature_map_state(&deep, &x).unwrap(),
            feature_map_state(&deep, &x).unwrap()
        );
    }

    #[test]
    fn spec_validation() {
        assert!(FeatureMapSpec::angle(3, 1, 0).validate(2).is_err());
        assert!(FeatureMapSpec::amplitude(2, 1, 1, 0).validate(5).is_err());
        assert!(FeatureMapSpec::amplitude(3, 1, 4, 0).validate(5).is_err());
        assert!(FeatureMapSpec::amplitude(3, 1, 3, 0).validate(5).is_ok());
    }

    #[test]
    fn entries_identical_and_orthogonal() {
        let spec = FeatureMapSpec::angle(3, 2, 4);
        assert!((kernel_entry(&spec, &[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]).unwrap() - 1.0).abs() < 1e-12);
        let bare = FeatureMapSpec::angle(1, 0, 0);
        assert!(kernel_entry(&bare, &[0.0], &[1.0]).unwrap() < 1e-30);
    }

    // Independent oracle: build the full 4x4 unitary for the 2-qubit angle
    // map by explicit Kronecker products and multiply it onto |00>.
    fn dense_two_qubit_state(spec: &FeatureMapSpec, x: &[f64]) -> Vec<Complex64> {
        type M = [[Complex64; 4]; 4];
        let c = |re: f64, im: f64| Complex64::new(re, im);
        let mul = |a: &M, b: &M| -> M {
            let mut out = [[c(0.0, 0.0); 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
                }
            }
            out
        };
        // qubit 0 is the low bit: U = U1 ⊗ U0 with index = 2*b1 + b0
        let kron = |u1: [[Complex64; 2]; 2], u0: [[Complex64; 2]; 2]| -> M {
            let mut out = [[c(0.0, 0.0); 4]; 4];
            for (i, row) in out.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = u1[i >> 1][j >> 1] * u0[i & 1][j & 1];
                }
            }
            out
        };
        let ry = |t: f64| {
            [
                [c((t / 2.0).cos(), 0.0), c(-(t / 2.0).sin(), 0.0)],
                [c((t / 2.0).sin(), 0.0), c((t / 2.0).cos(), 0.0)],
            ]
        };
        let rz = |t: f64| {
            [
                [c((t / 2.0).cos(), -(t / 2.0).sin()), c(0.0, 0.0)],
                [c(0.0, 0.0), c((t / 2.0).cos(), (t / 2.0).sin())],
            ]
        };
        let mut cz = [[c(0.0, 0.0); 4]; 4];
        for (i, row) in cz.iter_mut().enumerate() {
            row[i] = c(if i == 3 { -1.0 } else { 1.0 }, 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let angles: Vec<(f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let data = kron(ry(std::f64::consts::PI * x[1]), ry(std::f64::consts::PI * x[0]));
        let rot_y = kron(ry(angles[1].0), ry(angles[0].0));
        let rot_z = kron(rz(angles[1].1), rz(angles[0].1));
        let block = mul(&cz, &mul(&rot_z, &rot_y));
        let rep = mul(&block, &data);
        let mut u = rep;
        for _ in 1..spec.layers {
            u = mul(&rep, &u);
        }
        (0..4).map(|i| u[i][0]).collect()
    }

    #[test]
    fn two_qubit_entry_matches_dense_oracle() {
        let spec = FeatureMapSpec::angle(2, 2, 21);
        let (a, b) = ([0.15, 0.7], [0.6, 0.35]);
        let sa = dense_two_qubit_state(&spec, &a);
        let sb = dense_two_qubit_state(&spec, &b);
        let ov: Complex64 = sa.iter().zip(&sb).map(|(x, y)| x.conj() * y).sum();
        let expected = ov.norm_sqr();
        assert!((kernel_entry(&spec, &a, &b).unwrap() - expected).abs() < 1e-10);
        let st = feature_map_state(&spec, &a).unwrap();
        for (x, y) in st.amplitudes().iter().zip(&sa) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn matrix_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = FeatureMapSpec::angle(4, 2, 8);
        let xs = random_rows(&mut rng, 50, 4);
        let k = kernel_matrix(&spec, &xs).unwrap();
        assert_eq!(k.entries, k.entries.transpose());
        assert!((0..50).all(|i| (k.entries[(i, i)] - 1.0).abs() < 1e-9));
        assert!(k.entries.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(k.min_eigenvalue() >= -1e-8);

        let one = kernel_matrix(&spec, &xs[..1]).unwrap();
        assert_eq!(one.entries, DMatrix::from_element(1, 1, 1.0));
        let dup = kernel_matrix(&spec, &[xs[0].clone(), xs[0].clone()]).unwrap();
        assert!((dup.entries[(0, 1)] - 1.0).abs() < 1e-12);
        assert!(kernel_matrix(&spec, &[]).is_err());
    }

    #[test]
    fn beta_is_elementwise_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = random_rows(&mut rng, 12, 6);
        let k1 = kernel_matrix(&FeatureMapSpec::amplitude(3, 1, 1, 5), &xs).unwrap();
        for beta in [2, 3] {
            let kb = kernel_matrix(&FeatureMapSpec::amplitude(3, 1, beta, 5), &xs).unwrap();
            assert!((kb.entries.clone() - k1.powi(beta).entries).abs().max() < 1e-14);
        }
    }

    #[test]
    fn permutation_consistency_and_cross() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = FeatureMapSpec::angle(3, 1, 2);
        let xs = random_rows(&mut rng, 8, 3);
        let perm = [3, 1, 7, 0, 2, 6, 5, 4];
        let px: Vec<Vec<f64>> = perm.iter().map(|&i| xs[i].clone()).collect();
        let k = kernel_matrix(&spec, &xs).unwrap().entries;
        let pk = kernel_matrix(&spec, &px).unwrap().entries;
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(pk[(i, j)], k[(perm[i], perm[j])]);
            }
        }
        let cross = kernel_cross(&spec, &xs, &xs[..2]).unwrap();
        assert_eq!(cross.shape(), (2, 8));
        assert!((cross[(1, 3)] - k[(1, 3)]).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = random_rows(&mut rng, 5, 2);
        let k = kernel_matrix(&FeatureMapSpec::angle(2, 1, 0), &xs).unwrap();
        k.write_csv(&path).unwrap();
        assert_eq!(KernelMatrix::read_csv(&path).unwrap().entries, k.entries);
    }
}
