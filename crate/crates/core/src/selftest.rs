//! Runtime property suite behind the `selftest` subcommand: seeded
//! randomized checks of the simulator, kernels, SVR, GARCH, backtester and
//! metrics, with pass/fail per check.

use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::backtest::{buy_and_hold, simulate, FeeMode};
use crate::error::Result;
use crate::garch::{garch_fit, garch_forecast, simulate_garch, GarchParams};
use crate::metrics::{self, DmLoss};
use crate::qkernel::{kernel_matrix, FeatureMapSpec};
use crate::qsim::{adjoint_vjp, run_circuit, CircuitSpec, Gate, GateKind, StateVector};
use crate::svr::{svr_fit, svr_predict, Gamma, KernelKind, PredictInput, SolverOptions, SvrSpec, TrainInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// Checks that finish in seconds.
    Quick,
    /// Adds the GARCH recovery and DM size Monte-Carlo runs.
    Full,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(u64) -> Result<(bool, String)>;

const QUICK: &[(&str, Check)] = &[
    ("formula_anchors", formula_anchors),
    ("statevector_norm", statevector_norm),
    ("circuit_inverse", circuit_inverse),
    ("gradient_vs_finite_difference", gradient_vs_fd),
    ("kernel_diag_and_psd", kernel_psd),
    ("svr_line_and_precomputed", svr_oracles),
    ("backtest_identities", backtest_identities),
    ("metric_properties", metric_properties),
];

const FULL: &[(&str, Check)] = &[("garch_recovery", garch_recovery), ("dm_size", dm_size)];

pub fn run(level: Level, seed: u64) -> Vec<CheckResult> {
    let extra: &[(&str, Check)] = if level == Level::Full { FULL } else { &[] };
    QUICK
        .iter()
        .chain(extra)
        .map(|(name, check)| {
            let t = Instant::now();
            let (passed, detail) = match check(seed) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name,
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn random_circuit(rng: &mut ChaCha8Rng, n: usize, depth: usize) -> CircuitSpec {
    let mut spec = CircuitSpec::new(n);
    for _ in 0..depth {
        for q in 0..n {
            let kind = [GateKind::RX, GateKind::RY, GateKind::RZ][rng.gen_range(0..3)];
            spec.push_param_rotation(kind, q, rng.gen_range(-3.2..3.2));
        }
        if n > 1 {
            let a = rng.gen_range(0..n);
            let b = (a + rng.gen_range(1..n)) % n;
            spec.push(if rng.gen_bool(0.5) {
                Gate::cz(a, b)
            } else {
                Gate::cnot(a, b)
            });
        }
    }
    spec
}

fn random_state(rng: &mut ChaCha8Rng, n: usize) -> Result<StateVector> {
    let mut amps: Vec<Complex64> = (0..1 << n)
        .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    amps.iter_mut().for_each(|a| *a /= norm);
    StateVector::from_amplitudes(amps)
}

fn formula_anchors(_: u64) -> Result<(bool, String)> {
    let sharpe = metrics::sharpe_ratio(0.1103, 0.0876, 0.0).unwrap_or(f64::NAN);
    let g = garch_forecast(&GarchParams::new(1e-6, 0.1, 0.8, 0.0)?, 0.01, 1e-4)?;
    let q = metrics::qlike(&[1.0], &[1.0])?;
    let ok = (1.255..=1.263).contains(&sharpe) && g == 9.1e-5 && q == 1.0;
    Ok((ok, format!("sharpe {sharpe:.4}, garch {g:e}, qlike {q}")))
}

fn statevector_norm(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=5);
        let c = random_circuit(&mut rng, n, 4);
        let out = run_circuit(&c, &random_state(&mut rng, n)?)?;
        worst = worst.max((out.norm_sqr() - 1.0).abs());
    }
    Ok((worst < 1e-9, format!("max |norm - 1| = {worst:.2e}")))
}

fn circuit_inverse(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=5);
        let c = random_circuit(&mut rng, n, 4);
        let psi = random_state(&mut rng, n)?;
        let back = run_circuit(&c.inverse(), &run_circuit(&c, &psi)?)?;
        let err = back
            .amplitudes()
            .iter()
            .zip(psi.amplitudes())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    Ok((worst < 1e-9, format!("max amplitude error {worst:.2e}")))
}

/// Adjoint gradients of a random weighted sum of `<Z_k>` against central
/// finite differences.
fn gradient_vs_fd(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=3);
        let c = random_circuit(&mut rng, n, 3);
        let psi = random_state(&mut rng, n)?;
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |spec: &CircuitSpec| -> Result<f64> {
            let out = run_circuit(spec, &psi)?;
            Ok(crate::qsim::expectations_z(&out)
                .iter()
                .zip(&w)
                .map(|(e, c)| e * c)
                .sum())
        };
        let g = adjoint_vjp(&c, &psi, &w)?;
        for p in 0..c.params.len() {
            let mut a = c.clone();
            a.params[p] += h;
            let mut b = c.clone();
            b.params[p] -= h;
            let fd = (loss(&a)? - loss(&b)?) / (2.0 * h);
            worst = worst.max((fd - g.param_grads[p]).abs());
        }
    }
    Ok((worst < 1e-6, format!("max |adjoint - fd| = {worst:.2e}")))
}

fn kernel_psd(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let xs: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..4).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let k = kernel_matrix(&FeatureMapSpec::angle(4, 2, seed), &xs)?;
    let diag = (0..50).map(|i| (k.entries[(i, i)] - 1.0).abs()).fold(0.0, f64::max);
    let min_eig = k.min_eigenvalue();
    Ok((
        diag < 1e-12 && min_eig >= -1e-8,
        format!("max |K_ii - 1| = {diag:.1e}, min eigenvalue {min_eig:.2e}"),
    ))
}

fn svr_oracles(seed: u64) -> Result<(bool, String)> {
    let spec = SvrSpec {
        kernel: KernelKind::Linear,
        c: 100.0,
        epsilon: 0.01,
    };
    let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 10.0]).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v[0] + 1.0).collect();
    let opts = SolverOptions::default();
    let m = svr_fit(&spec, TrainInput::Features(&x), &y, &opts)?;
    let pred = svr_predict(&m, PredictInput::Features(&x))?;
    let line_err = pred.iter().zip(&y).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
    let xs: Vec<Vec<f64>> = (0..30)
        .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|r| r[0].sin() + r[1] * r[2] + 0.1 * rng.gen_range(-1.0..1.0))
        .collect();
    let rbf = SvrSpec {
        kernel: KernelKind::Rbf {
            gamma: Gamma::Value(0.7),
        },
        c: 3.0,
        epsilon: 0.05,
    };
    let explicit = svr_fit(&rbf, TrainInput::Features(&xs), &ys, &opts)?;
    let p_explicit = svr_predict(&explicit, PredictInput::Features(&xs))?;
    let gram = DMatrix::from_fn(30, 30, |i, j| {
        (-0.7 * xs[i].iter().zip(&xs[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).exp()
    });
    let pre = SvrSpec {
        kernel: KernelKind::Precomputed,
        ..rbf
    };
    let precomputed = svr_fit(&pre, TrainInput::Gram(&gram), &ys, &opts)?;
    let p_pre = svr_predict(&precomputed, PredictInput::Cross(&gram))?;
    let path_err = p_explicit
        .iter()
        .zip(&p_pre)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((
        line_err <= spec.epsilon + 1e-3 && path_err < 1e-8,
        format!("line max error {line_err:.2e}, explicit vs precomputed {path_err:.2e}"),
    ))
}

fn backtest_identities(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
    let mut identity = true;
    let mut monotone = true;
    for _ in 0..100 {
        let n = rng.gen_range(1..200);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let s: Vec<i8> = (0..n).map(|_| rng.gen_range(-1..=1)).collect();
        identity &= simulate(&vec![1; n], &r, 0.0, FeeMode::PerUnit)?.equity == buy_and_hold(&r, 0.0)?.equity;
        let lo = simulate(&s, &r, 0.0005, FeeMode::PerUnit)?.final_equity();
        let hi = simulate(&s, &r, 0.002, FeeMode::PerUnit)?.final_equity();
        monotone &= hi <= lo;
    }
    Ok((
        identity && monotone,
        format!("all-long = buy-and-hold: {identity}, fee monotone: {monotone}"),
    ))
}

fn metric_properties(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(6));
    let mut auc_ok = true;
    for _ in 0..50 {
        let n = rng.gen_range(10..100);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let t: Vec<f64> = p.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        auc_ok &= metrics::auc(&p, &y)? == metrics::auc(&t, &y)?;
    }
    let mut qlike_ok = true;
    for truth in [1e-4, 0.3, 2.0] {
        let at = metrics::qlike(&[truth], &[truth])?;
        for k in 1..40 {
            let f = truth * k as f64 / 20.0;
            qlike_ok &= metrics::qlike(&[truth], &[f])? >= at;
        }
    }
    let a: Vec<f64> = (0..60).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let b: Vec<f64> = (0..60).map(|_| 1.2 * rng.sample::<f64, _>(StandardNormal)).collect();
    let ab = metrics::dm_test(&a, &b, DmLoss::Squared, 2)?;
    let ba = metrics::dm_test(&b, &a, DmLoss::Squared, 2)?;
    let dm_ok = match (ab, ba) {
        (Some(x), Some(y)) => (x.stat + y.stat).abs() < 1e-12 && (x.p - y.p).abs() < 1e-12,
        _ => false,
    };
    Ok((
        auc_ok && qlike_ok && dm_ok,
        format!("auc invariance {auc_ok}, qlike minimum {qlike_ok}, dm antisymmetry {dm_ok}"),
    ))
}

fn garch_recovery(seed: u64) -> Result<(bool, String)> {
    let truth = GarchParams::new(1e-6, 0.1, 0.8, 0.0)?;
    let fits: Vec<Result<(f64, f64)>> = crate::par::map_indexed(20, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100 + k as u64));
        let f = garch_fit(&simulate_garch(&truth, 5000, &mut rng))?;
        Ok((f.params.alpha, f.params.beta))
    });
    let (mut a, mut b): (Vec<f64>, Vec<f64>) = fits.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let med = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (v[9] + v[10]) / 2.0
    };
    let (ma, mb) = (med(&mut a), med(&mut b));
    Ok((
        (ma - 0.1).abs() <= 0.05 && (mb - 0.8).abs() <= 0.05,
        format!("median alpha {ma:.4}, beta {mb:.4}"),
    ))
}

/// Rejection rate at 5% of the DM test on two equally accurate forecasts.
fn dm_size(seed: u64) -> Result<(bool, String)> {
    let rejects: Vec<Result<bool>> = crate::par::map_indexed(1000, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(10_000 + k as u64));
        let a: Vec<f64> = (0..250).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..250).map(|_| rng.sample(StandardNormal)).collect();
        Ok(metrics::dm_test(&a, &b, DmLoss::Squared, 1)?.is_some_and(|d| d.p < 0.05))
    });
    let n = rejects
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .iter()
        .filter(|r| **r)
        .count();
    let rate = n as f64 / 1000.0;
    Ok(((rate - 0.05).abs() <= 0.02, format!("rejection rate {rate:.3}")))
}
