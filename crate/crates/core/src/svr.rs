//! ε-insensitive support vector regression solved in the dual with SMO
//! (second-order working-set selection), plus seeded random search.
//!
//! The dual is written over `2N` variables `(α, α*)` with labels `±1`, so a
//! single solver handles the equality constraint `Σ (α_i - α*_i) = 0`.

use std::borrow::Cow;
use std::cell::RefCell;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, ensure_same_len, Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma {
    /// `1 / (d · var(X_train))` over all training entries.
    Scale,
    /// `1 / d`.
    Auto,
    Value(f64),
}

impl Gamma {
    pub fn resolve(self, x_train: &[Vec<f64>]) -> f64 {
        let d = x_train.first().map_or(1, |r| r.len()).max(1) as f64;
        match self {
            Gamma::Auto => 1.0 / d,
            Gamma::Value(g) => g,
            Gamma::Scale => {
                let n = x_train.iter().map(|r| r.len()).sum::<usize>() as f64;
                let m = x_train.iter().flatten().sum::<f64>() / n;
                let var = x_train.iter().flatten().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    1.0 / (d * var)
                } else {
                    1.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelKind {
    Linear,
    Poly { degree: u32, gamma: Gamma, coef0: f64 },
    Rbf { gamma: Gamma },
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrSpec {
    pub kernel: KernelKind,
    pub c: f64,
    pub epsilon: f64,
}

impl SvrSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !(self.epsilon >= 0.0) {
            return Err(Error::invalid(format!(
                "need C > 0 and ε >= 0, got C={} ε={}",
                self.c, self.epsilon
            )));
        }
        if let KernelKind::Poly { degree, coef0, .. } = self.kernel {
            if degree == 0 || coef0 < 0.0 {
                return Err(Error::invalid("polynomial kernel needs degree >= 1 and r >= 0"));
            }
        }
        Ok(())
    }
}

/// Classical kernel with an already-resolved γ.
pub fn classical_kernel(kind: KernelKind, gamma: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    ensure_same_len(x.len(), y.len())?;
    let dot = || x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    match kind {
        KernelKind::Linear => Ok(dot()),
        KernelKind::Poly { degree, coef0, .. } => Ok((gamma * dot() + coef0).powi(degree as i32)),
        KernelKind::Rbf { .. } => Ok((-gamma * x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).exp()),
        KernelKind::Precomputed => Err(Error::invalid("precomputed kernels have no feature-space formula")),
    }
}

fn resolved_gamma(kind: KernelKind, x: &[Vec<f64>]) -> f64 {
    match kind {
        KernelKind::Poly { gamma, .. } | KernelKind::Rbf { gamma } => gamma.resolve(x),
        _ => 1.0,
    }
}

/// Row access to a symmetric training kernel.
pub trait KernelSource {
    fn len(&self) -> usize;
    fn row(&self, i: usize) -> Cow<'_, [f64]>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl KernelSource for DMatrix<f64> {
    fn len(&self) -> usize {
        self.nrows()
    }

    fn row(&self, i: usize) -> Cow<'_, [f64]> {
        // column-major storage; symmetric, so column i is row i
        let n = self.nrows();
        Cow::Borrowed(&self.as_slice()[i * n..(i + 1) * n])
    }
}

/// Kernel evaluated on demand from an index function, with rows cached as
/// they are first requested.
pub struct CallableKernel<F: Fn(usize, usize) -> f64> {
    n: usize,
    f: F,
    rows: RefCell<Vec<Option<Vec<f64>>>>,
}

impl<F: Fn(usize, usize) -> f64> CallableKernel<F> {
    pub fn new(n: usize, f: F) -> Self {
        Self {
            n,
            f,
            rows: RefCell::new(vec![None; n]),
        }
    }
}

impl<F: Fn(usize, usize) -> f64> KernelSource for CallableKernel<F> {
    fn len(&self) -> usize {
        self.n
    }

    fn row(&self, i: usize) -> Cow<'_, [f64]> {
        let mut rows = self.rows.borrow_mut();
        let r = rows[i].get_or_insert_with(|| (0..self.n).map(|j| (self.f)(i, j)).collect());
        Cow::Owned(r.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stopping tolerance on the maximal KKT violation.
    pub tol: f64,
    pub max_iter: usize,
    /// Eigen-check a precomputed kernel and clip negative eigenvalues.
    pub psd_check: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: 1_000_000,
            psd_check: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub spec: SvrSpec,
    /// `α_i - α*_i` for each support vector.
    pub dual_coef: Vec<f64>,
    /// Training-row index of each support vector.
    pub support: Vec<usize>,
    /// Feature rows of the support vectors (empty for precomputed kernels).
    pub support_vectors: Vec<Vec<f64>>,
    pub bias: f64,
    pub gamma: f64,
    pub n_train: usize,
    pub iterations: usize,
    pub converged: bool,
}

pub enum TrainInput<'a> {
    Features(&'a [Vec<f64>]),
    Gram(&'a DMatrix<f64>),
}

pub enum PredictInput<'a> {
    Features(&'a [Vec<f64>]),
    /// Rows = new samples, columns = all training samples.
    Cross(&'a DMatrix<f64>),
}

struct Solution {
    coef: Vec<f64>,
    bias: f64,
    iterations: usize,
    converged: bool,
}

/// SMO on the `2N` formulation following the LIBSVM update and bias rules.
fn smo<K: KernelSource + ?Sized>(k: &K, y: &[f64], c: f64, eps: f64, opts: &SolverOptions) -> Solution {
    const TAU: f64 = 1e-12;
    let n = y.len();
    let l = 2 * n;
    let sign = |t: usize| if t < n { 1.0 } else { -1.0 };
    let idx = |t: usize| if t < n { t } else { t - n };
    let diag: Vec<f64> = (0..n).map(|i| k.row(i)[i]).collect();
    let mut a = vec![0.0; l];
    let mut g: Vec<f64> = (0..l)
        .map(|t| if t < n { eps - y[t] } else { eps + y[t - n] })
        .collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        // i: maximal violator among "up" variables (y_t = +1 for the first
        // n, -1 for the mirrored half)
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            if a[t] < c && -g[t] >= gmax {
                gmax = -g[t];
                i_sel = t;
            }
        }
        for t in n..l {
            if a[t] > 0.0 && g[t] >= gmax {
                gmax = g[t];
                i_sel = t;
            }
        }
        let row_i = if i_sel != usize::MAX {
            Some(k.row(idx(i_sel)))
        } else {
            None
        };
        let d_i = if i_sel != usize::MAX { diag[idx(i_sel)] } else { 0.0 };
        // j: second-order choice among "low" variables; the curvature
        // K_ii + K_tt - 2 K_it does not depend on the signs
        let mut gmin = f64::INFINITY;
        let mut j_sel = usize::MAX;
        let mut best_obj = f64::INFINITY;
        let mut consider = |t: usize, v: f64| {
            gmin = gmin.min(v);
            if let Some(ri) = &row_i {
                let b = gmax - v;
                if b > 0.0 {
                    let r = idx(t);
                    let mut quad = d_i + diag[r] - 2.0 * ri[r];
                    if quad <= 0.0 {
                        quad = TAU;
                    }
                    let obj = -(b * b) / quad;
                    if obj <= best_obj {
                        best_obj = obj;
                        j_sel = t;
                    }
                }
            }
        };
        for t in 0..n {
            if a[t] > 0.0 {
                consider(t, -g[t]);
            }
        }
        for t in n..l {
            if a[t] < c {
                consider(t, g[t]);
            }
        }
        if gmax - gmin < opts.tol || j_sel == usize::MAX {
            converged = true;
            break;
        }
        iterations += 1;

        let (i, j) = (i_sel, j_sel);
        let ri = row_i.expect("selected i");
        let rj = k.row(idx(j));
        let (yi, yj) = (sign(i), sign(j));
        let q_ij = yi * yj * ri[idx(j)];
        let (q_ii, q_jj) = (diag[idx(i)], diag[idx(j)]);
        let (old_ai, old_aj) = (a[i], a[j]);
        if yi != yj {
            let quad = (q_ii + q_jj + 2.0 * q_ij).max(TAU);
            let delta = (-g[i] - g[j]) / quad;
            let diff = a[i] - a[j];
            a[i] += delta;
            a[j] += delta;
            if diff > 0.0 {
                if a[j] < 0.0 {
                    a[j] = 0.0;
                    a[i] = diff;
                }
            } else if a[i] < 0.0 {
                a[i] = 0.0;
                a[j] = -diff;
            }
            if diff > 0.0 {
                if a[i] > c {
                    a[i] = c;
                    a[j] = c - diff;
                }
            } else if a[j] > c {
                a[j] = c;
                a[i] = c + diff;
            }
        } else {
            let quad = (q_ii + q_jj - 2.0 * q_ij).max(TAU);
            let delta = (g[i] - g[j]) / quad;
            let sum = a[i] + a[j];
            a[i] -= delta;
            a[j] += delta;
            if sum > c {
                if a[i] > c {
                    a[i] = c;
                    a[j] = sum - c;
                }
            } else if a[j] < 0.0 {
                a[j] = 0.0;
                a[i] = sum;
            }
            if sum > c {
                if a[j] > c {
                    a[j] = c;
                    a[i] = sum - c;
                }
            } else if a[i] < 0.0 {
                a[i] = 0.0;
                a[j] = sum;
            }
        }
        let (dai, daj) = (a[i] - old_ai, a[j] - old_aj);
        let (ci, cj) = (yi * dai, yj * daj);
        let (g_pos, g_neg) = g.split_at_mut(n);
        for t in 0..n {
            let d = ci * ri[t] + cj * rj[t];
            g_pos[t] += d;
            g_neg[t] -= d;
        }
    }

    // bias: average over free variables, else midpoint of the feasible range
    let (mut ub, mut lb, mut sum_free, mut n_free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..l {
        let yg = sign(t) * g[t];
        let at_upper = a[t] >= c;
        let at_lower = a[t] <= 0.0;
        if at_upper {
            if sign(t) < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if at_lower {
            if sign(t) > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };
    Solution {
        coef: (0..n).map(|i| a[i] - a[i + n]).collect(),
        bias: -rho,
        iterations,
        converged,
    }
}

/// Clips negative eigenvalues of a symmetric matrix to zero.
pub fn clip_to_psd(k: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = k.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn finish(spec: SvrSpec, sol: Solution, x: Option<&[Vec<f64>]>, gamma: f64, n: usize) -> SvrModel {
    let support: Vec<usize> = (0..n).filter(|&i| sol.coef[i] != 0.0).collect();
    if !sol.converged {
        log::warn!("SVR solver hit its iteration cap after {} steps", sol.iterations);
    }
    SvrModel {
        spec,
        dual_coef: support.iter().map(|&i| sol.coef[i]).collect(),
        support_vectors: x
            .map(|x| support.iter().map(|&i| x[i].clone()).collect())
            .unwrap_or_default(),
        support,
        bias: sol.bias,
        gamma,
        n_train: n,
        iterations: sol.iterations,
        converged: sol.converged,
    }
}

pub fn svr_fit(spec: &SvrSpec, input: TrainInput<'_>, y: &[f64], opts: &SolverOptions) -> Result<SvrModel> {
    spec.validate()?;
    ensure_len(2, y.len())?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite regression target"));
    }
    match input {
        TrainInput::Features(x) => {
            if spec.kernel == KernelKind::Precomputed {
                return Err(Error::invalid("precomputed kernel spec given feature rows"));
            }
            ensure_same_len(y.len(), x.len())?;
            let gamma = resolved_gamma(spec.kernel, x);
            let n = x.len();
            let rows = par::map_indexed(n, |i| {
                (0..n)
                    .map(|j| classical_kernel(spec.kernel, gamma, &x[i], &x[j]))
                    .collect::<Result<Vec<_>>>()
            });
            let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
            let k = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
            let sol = smo(&k, y, spec.c, spec.epsilon, opts);
            Ok(finish(*spec, sol, Some(x), gamma, n))
        }
        TrainInput::Gram(k) => {
            if spec.kernel != KernelKind::Precomputed {
                return Err(Error::invalid("Gram matrix given for a non-precomputed kernel spec"));
            }
            if k.nrows() != k.ncols() {
                return Err(Error::invalid("precomputed kernel must be square"));
            }
            ensure_same_len(y.len(), k.nrows())?;
            let mut owned = None;
            if opts.psd_check {
                let min_eig = crate::qkernel::min_eigenvalue(k);
                if min_eig < -1e-6 {
                    log::warn!("precomputed kernel has eigenvalue {min_eig:.3e}; clipping to PSD");
                    owned = Some(clip_to_psd(k));
                }
            }
            let sol = smo(owned.as_ref().unwrap_or(k), y, spec.c, spec.epsilon, opts);
            Ok(finish(*spec, sol, None, 1.0, y.len()))
        }
    }
}

/// Fit against any kernel source (e.g. a callable kernel).
pub fn svr_fit_source<K: KernelSource>(spec: &SvrSpec, k: &K, y: &[f64], opts: &SolverOptions) -> Result<SvrModel> {
    spec.validate()?;
    ensure_len(2, y.len())?;
    ensure_same_len(y.len(), k.len())?;
    let sol = smo(k, y, spec.c, spec.epsilon, opts);
    Ok(finish(*spec, sol, None, 1.0, y.len()))
}

pub fn svr_predict(model: &SvrModel, input: PredictInput<'_>) -> Result<Vec<f64>> {
    match input {
        PredictInput::Features(x) => {
            if model.spec.kernel == KernelKind::Precomputed {
                return Err(Error::invalid(
                    "model was fitted on a precomputed kernel; pass a cross kernel",
                ));
            }
            x.iter()
                .map(|row| {
                    let mut s = model.bias;
                    for (c, sv) in model.dual_coef.iter().zip(&model.support_vectors) {
                        s += c * classical_kernel(model.spec.kernel, model.gamma, sv, row)?;
                    }
                    Ok(s)
                })
                .collect()
        }
        PredictInput::Cross(k) => {
            ensure_same_len(model.n_train, k.ncols())?;
            Ok((0..k.nrows())
                .map(|r| {
                    model.bias
                        + model
                            .dual_coef
                            .iter()
                            .zip(&model.support)
                            .map(|(c, &i)| c * k[(r, i)])
                            .sum::<f64>()
                })
                .collect())
        }
    }
}

// ---------------------------------------------------------------------------
// random search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvrFamily {
    Linear,
    Poly,
    Rbf,
    QuantumAngle,
    QuantumAmplitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub c: (f64, f64),
    pub epsilon: (f64, f64),
    pub degrees: Vec<u32>,
    pub gammas: Vec<Gamma>,
    pub qubits: Vec<usize>,
    pub layers: Vec<usize>,
    pub betas: Vec<u32>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            c: (1e-2, 1e2),
            epsilon: (1e-3, 1.0),
            degrees: vec![2, 3],
            gammas: vec![Gamma::Scale, Gamma::Auto],
            qubits: vec![6, 8, 10, 12],
            layers: vec![0, 1, 2, 3],
            betas: vec![1, 2, 3],
        }
    }
}

/// One sampled configuration. Quantum fields are `None` for classical
/// families; `kernel` is `Precomputed` for quantum ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub family: SvrFamily,
    pub spec: SvrSpec,
    pub qubits: Option<usize>,
    pub layers: Option<usize>,
    pub beta: Option<u32>,
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}

fn pick<R: Rng, T: Copy>(rng: &mut R, xs: &[T]) -> T {
    xs[rng.gen_range(0..xs.len())]
}

/// Deterministic trial sequence for a family.
pub fn sample_trials(family: SvrFamily, space: &SearchSpace, budget: usize, seed: u64) -> Result<Vec<Trial>> {
    if budget == 0 {
        return Err(Error::invalid("search budget must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..budget)
        .map(|_| {
            let c = log_uniform(&mut rng, space.c);
            let epsilon = log_uniform(&mut rng, space.epsilon);
            let (kernel, qubits, layers, beta) = match family {
                SvrFamily::Linear => (KernelKind::Linear, None, None, None),
                SvrFamily::Poly => {
                    let degree = pick(&mut rng, &space.degrees);
                    let gamma = pick(&mut rng, &space.gammas);
                    (
                        KernelKind::Poly {
                            degree,
                            gamma,
                            coef0: 0.0,
                        },
                        None,
                        None,
                        None,
                    )
                }
                SvrFamily::Rbf => (
                    KernelKind::Rbf {
                        gamma: pick(&mut rng, &space.gammas),
                    },
                    None,
                    None,
                    None,
                ),
                SvrFamily::QuantumAngle => {
                    let q = pick(&mut rng, &space.qubits);
                    let l = pick(&mut rng, &space.layers);
                    (KernelKind::Precomputed, Some(q), Some(l), Some(1))
                }
                SvrFamily::QuantumAmplitude => {
                    let l = pick(&mut rng, &space.layers);
                    let b = pick(&mut rng, &space.betas);
                    (KernelKind::Precomputed, None, Some(l), Some(b))
                }
            };
            if matches!(family, SvrFamily::Poly | SvrFamily::Rbf) && space.gammas.is_empty() {
                return Err(Error::invalid("empty gamma axis"));
            }
            Ok(Trial {
                family,
                spec: SvrSpec { kernel, c, epsilon },
                qubits,
                layers,
                beta,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: Trial,
    pub best_score: f64,
    /// Score of each trial in sampling order (`None` when it failed).
    pub scores: Vec<Option<f64>>,
}

/// Evaluates every trial and returns the lowest score; the first trial wins
/// exact ties.
pub fn hyper_search<F>(trials: &[Trial], evaluate: F) -> Result<SearchOutcome>
where
    F: Fn(&Trial) -> Result<f64> + Sync + Send,
{
    if trials.is_empty() {
        return Err(Error::invalid("no trials to evaluate"));
    }
    let scores: Vec<Option<f64>> = par::map_indexed(trials.len(), |i| match evaluate(&trials[i]) {
        Ok(s) if s.is_finite() => Some(s),
        Ok(_) => None,
        Err(e) => {
            log::debug!("trial {i} failed: {e}");
            None
        }
    });
    let (best_i, best_score) = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (i, s)))
        .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
            Some((_, bs)) if bs <= s => acc,
            _ => Some((i, s)),
        })
        .ok_or_else(|| Error::NotConverged("every search trial failed".into()))?;
    Ok(SearchOutcome {
        best: trials[best_i],
        best_score,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn line_data(n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / (n - 1) as f64]).collect();
        let y = x.iter().map(|r| 2.0 * r[0] + 1.0).collect();
        (x, y)
    }

    #[test]
    fn kernel_examples() {
        let rbf = KernelKind::Rbf {
            gamma: Gamma::Value(0.7),
        };
        assert_eq!(classical_kernel(rbf, 0.7, &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        let poly = KernelKind::Poly {
            degree: 2,
            gamma: Gamma::Value(1.0),
            coef0: 0.0,
        };
        assert_eq!(classical_kernel(poly, 1.0, &[1.0, 1.0], &[1.0, 1.0]).unwrap(), 4.0);
        assert_eq!(
            classical_kernel(KernelKind::Linear, 1.0, &[1.0, 0.0], &[0.0, 3.0]).unwrap(),
            0.0
        );
        assert!(classical_kernel(KernelKind::Linear, 1.0, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gamma_rules() {
        let x = vec![vec![0.0, 2.0], vec![2.0, 0.0]];
        assert_eq!(Gamma::Auto.resolve(&x), 0.5);
        assert_eq!(Gamma::Scale.resolve(&x), 0.5); // var = 1
    }

    #[test]
    fn fits_a_line() {
        let (x, y) = line_data(20);
        let spec = SvrSpec {
            kernel: KernelKind::Linear,
            c: 100.0,
            epsilon: 0.01,
        };
        let m = svr_fit(&spec, TrainInput::Features(&x), &y, &SolverOptions::default()).unwrap();
        assert!(m.converged);
        let test: Vec<Vec<f64>> = (0..15).map(|i| vec![0.03 + i as f64 / 15.0]).collect();
        let pred = svr_predict(&m, PredictInput::Features(&test)).unwrap();
        for (p, t) in pred.iter().zip(&test) {
            assert!((p - (2.0 * t[0] + 1.0)).abs() <= 0.01 + 1e-3);
        }
        assert!(m.dual_coef.iter().all(|c| c.abs() <= spec.c + 1e-12));
        assert!(m.dual_coef.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn constant_target_is_flat() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        let y = vec![3.5; 12];
        let spec = SvrSpec {
            kernel: KernelKind::Rbf { gamma: Gamma::Scale },
            c: 1.0,
            epsilon: 0.1,
        };
        let m = svr_fit(&spec, TrainInput::Features(&x), &y, &SolverOptions::default()).unwrap();
        assert!(m.dual_coef.is_empty());
        assert!((m.bias - 3.5).abs() <= 0.1);
        assert_eq!(
            svr_predict(&m, PredictInput::Features(&x[..2])).unwrap(),
            vec![m.bias; 2]
        );
    }

    #[test]
    fn conflicting_duplicates() {
        let x = vec![vec![1.0], vec![1.0], vec![0.0]];
        let y = vec![0.0, 1.0, 0.5];
        let spec = SvrSpec {
            kernel: KernelKind::Rbf {
                gamma: Gamma::Value(1.0),
            },
            c: 10.0,
            epsilon: 0.1,
        };
        let m = svr_fit(&spec, TrainInput::Features(&x), &y, &SolverOptions::default()).unwrap();
        let p = svr_predict(&m, PredictInput::Features(&x[..1])).unwrap()[0];
        let inside = |t: f64| (p - t).abs() <= 0.1 + 1e-9;
        assert!(!(inside(0.0) && inside(1.0)));
    }

    #[test]
    fn inside_tube_points_stay_inside() {
        let x: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 0.3).cos()])
            .collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] * r[1] + 0.2 * r[0]).collect();
        let spec = SvrSpec {
            kernel: KernelKind::Rbf {
                gamma: Gamma::Value(1.0),
            },
            c: 10.0,
            epsilon: 0.05,
        };
        let m = svr_fit(&spec, TrainInput::Features(&x), &y, &SolverOptions::default()).unwrap();
        let pred = svr_predict(&m, PredictInput::Features(&x)).unwrap();
        for i in 0..30 {
            if !m.support.contains(&i) {
                assert!((pred[i] - y[i]).abs() <= 0.05 + 1e-3);
            }
        }
    }

    #[test]
    fn precomputed_and_callable_paths_agree() {
        let x: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64 * 1.3).sin(), (i as f64 * 0.4).cos(), i as f64 / 30.0])
            .collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] - 0.5 * r[2] + r[1] * r[1]).collect();
        let kind = KernelKind::Rbf {
            gamma: Gamma::Value(0.8),
        };
        let explicit = SvrSpec {
            kernel: kind,
            c: 5.0,
            epsilon: 0.02,
        };
        let m1 = svr_fit(&explicit, TrainInput::Features(&x), &y, &SolverOptions::default()).unwrap();
        let gram = DMatrix::from_fn(30, 30, |i, j| classical_kernel(kind, 0.8, &x[i], &x[j]).unwrap());
        let pre = SvrSpec {
            kernel: KernelKind::Precomputed,
            ..explicit
        };
        let m2 = svr_fit(&pre, TrainInput::Gram(&gram), &y, &SolverOptions::default()).unwrap();
        let callable = CallableKernel::new(30, |i, j| classical_kernel(kind, 0.8, &x[i], &x[j]).unwrap());
        let m3 = svr_fit_source(&pre, &callable, &y, &SolverOptions::default()).unwrap();
        let test: Vec<Vec<f64>> = (0..10).map(|i| vec![(i as f64).cos(), 0.1 * i as f64, 0.5]).collect();
        let cross = DMatrix::from_fn(10, 30, |r, j| classical_kernel(kind, 0.8, &test[r], &x[j]).unwrap());
        let p1 = svr_predict(&m1, PredictInput::Features(&test)).unwrap();
        let p2 = svr_predict(&m2, PredictInput::Cross(&cross)).unwrap();
        let p3 = svr_predict(&m3, PredictInput::Cross(&cross)).unwrap();
        for ((a, b), c) in p1.iter().zip(&p2).zip(&p3) {
            assert!((a - b).abs() < 1e-8 && (a - c).abs() < 1e-8);
        }
        assert!(svr_predict(&m2, PredictInput::Features(&test)).is_err());
    }

    #[test]
    fn search_examples() {
        let space = SearchSpace::default();
        let t1 = sample_trials(SvrFamily::Poly, &space, 1, 9).unwrap();
        let out = hyper_search(&t1, |t| Ok(t.spec.c)).unwrap();
        assert_eq!(out.best, t1[0]);
        assert_eq!(
            sample_trials(SvrFamily::Rbf, &space, 20, 3).unwrap(),
            sample_trials(SvrFamily::Rbf, &space, 20, 3).unwrap()
        );
        for t in sample_trials(SvrFamily::QuantumAngle, &space, 200, 1).unwrap() {
            assert!((1e-2..=1e2).contains(&t.spec.c) && (1e-3..=1.0).contains(&t.spec.epsilon));
            assert!(space.qubits.contains(&t.qubits.unwrap()));
        }
        assert!(sample_trials(SvrFamily::Linear, &space, 0, 1).is_err());
        let all_fail = hyper_search(&t1, |_| Err(Error::invalid("x")));
        assert!(all_fail.is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn solution_satisfies_tube_conditions(seed in any::<u64>(), eps in 0.001f64..0.3, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<Vec<f64>> = (0..25).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
            let y: Vec<f64> = x.iter().map(|r| r[0].sin() + 0.3 * rng.gen_range(-1.0..1.0)).collect();
            let spec = SvrSpec { kernel: KernelKind::Rbf { gamma: Gamma::Value(2.0) }, c, epsilon: eps };
            let opts = SolverOptions { tol: 1e-8, ..SolverOptions::default() };
            let m = svr_fit(&spec, TrainInput::Features(&x), &y, &opts).unwrap();
            let pred = svr_predict(&m, PredictInput::Features(&x)).unwrap();
            let mut coef = vec![0.0; x.len()];
            for (&i, &a) in m.support.iter().zip(&m.dual_coef) {
                coef[i] = a;
            }
            for i in 0..x.len() {
                let r = y[i] - pred[i];
                prop_assert!(coef[i].abs() <= c + 1e-9);
                // inside the tube: no weight; outside: weight at the bound, on the residual's side
                if r.abs() < eps - 1e-5 {
                    prop_assert!(coef[i] == 0.0, "row {} r {} coef {}", i, r, coef[i]);
                }
                if r.abs() > eps + 1e-5 {
                    prop_assert!((coef[i] - c * r.signum()).abs() < 1e-6, "row {} r {} coef {}", i, r, coef[i]);
                }
            }
        }
    }
}
