//! WebAssembly bindings for the static demo page in `www/`: a fidelity
//! kernel heatmap, a simulated GARCH(1,1) variance path, and a threshold
//! backtest equity curve. Every operation is seeded and deterministic.
//!
//! The `*_impl` functions hold the logic and return core errors so they can
//! be tested natively; the exported wrappers convert errors to `JsError`.

use qfin_core::backtest::{buy_and_hold, simulate, threshold_signals, FeeMode, ThresholdPair};
use qfin_core::garch::{garch_filter, simulate_garch, GarchParams};
use qfin_core::metrics::{trading_metrics, PERIODS_PER_YEAR};
use qfin_core::qkernel::{kernel_matrix, FeatureMapSpec};
use qfin_core::synth::{synth_returns, SynthConfig};
use qfin_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

const MAX_POINTS: usize = 80;
const MAX_QUBITS: usize = 8;
const MAX_DAYS: usize = 5000;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Inputs swept along a ray through `[0, 1]^q`; coordinate `d` moves at
/// rate `(d + 1) / q`, so fidelity decays away from the diagonal.
pub fn sweep_points(n_points: usize, n_qubits: usize) -> Vec<Vec<f64>> {
    (0..n_points)
        .map(|i| {
            let t = if n_points > 1 {
                i as f64 / (n_points - 1) as f64
            } else {
                0.0
            };
            (0..n_qubits).map(|d| t * (d + 1) as f64 / n_qubits as f64).collect()
        })
        .collect()
}

/// Row-major `n_points x n_points` angle-map kernel raised elementwise to `beta`.
pub fn kernel_heatmap_impl(n_points: usize, n_qubits: usize, layers: usize, beta: u32, seed: u64) -> Result<Vec<f64>> {
    if !(2..=MAX_POINTS).contains(&n_points) || !(1..=MAX_QUBITS).contains(&n_qubits) || layers == 0 || beta == 0 {
        return Err(Error::InvalidInput(format!(
            "need 2..={MAX_POINTS} points, 1..={MAX_QUBITS} qubits, layers >= 1, beta >= 1"
        )));
    }
    let k = kernel_matrix(
        &FeatureMapSpec::angle(n_qubits, layers, seed),
        &sweep_points(n_points, n_qubits),
    )?
    .powi(beta);
    // nalgebra is column-major; the matrix is symmetric but keep rows explicit
    Ok((0..n_points)
        .flat_map(|i| (0..n_points).map(move |j| (i, j)))
        .map(|(i, j)| k.entries[(i, j)])
        .collect())
}

#[wasm_bindgen]
pub fn kernel_heatmap(
    n_points: usize,
    n_qubits: usize,
    layers: usize,
    beta: u32,
    seed: u64,
) -> std::result::Result<Vec<f64>, JsError> {
    kernel_heatmap_impl(n_points, n_qubits, layers, beta, seed).map_err(js)
}

#[wasm_bindgen]
pub struct GarchPath {
    returns: Vec<f64>,
    variance: Vec<f64>,
    unconditional: f64,
}

#[wasm_bindgen]
impl GarchPath {
    /// Simulated daily returns.
    #[wasm_bindgen(getter)]
    pub fn returns(&self) -> Vec<f64> {
        self.returns.clone()
    }

    /// Filtered conditional variances, one longer than `returns`.
    #[wasm_bindgen(getter)]
    pub fn variance(&self) -> Vec<f64> {
        self.variance.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn unconditional(&self) -> f64 {
        self.unconditional
    }
}

pub fn garch_path_impl(omega: f64, alpha: f64, beta: f64, days: usize, seed: u64) -> Result<GarchPath> {
    if !(2..=MAX_DAYS).contains(&days) {
        return Err(Error::InvalidInput(format!("days must lie in 2..={MAX_DAYS}")));
    }
    let p = GarchParams::new(omega, alpha, beta, 0.0)?;
    let returns = simulate_garch(&p, days, &mut ChaCha8Rng::seed_from_u64(seed));
    let variance = garch_filter(&p, &returns)?;
    Ok(GarchPath {
        returns,
        variance,
        unconditional: p.unconditional_variance(),
    })
}

#[wasm_bindgen]
pub fn garch_path(
    omega: f64,
    alpha: f64,
    beta: f64,
    days: usize,
    seed: u64,
) -> std::result::Result<GarchPath, JsError> {
    garch_path_impl(omega, alpha, beta, days, seed).map_err(js)
}

#[wasm_bindgen]
pub struct Backtest {
    strategy: Vec<f64>,
    buy_hold: Vec<f64>,
    sharpe: f64,
    buy_hold_sharpe: f64,
    trades: usize,
}

#[wasm_bindgen]
impl Backtest {
    #[wasm_bindgen(getter)]
    pub fn strategy(&self) -> Vec<f64> {
        self.strategy.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn buy_hold(&self) -> Vec<f64> {
        self.buy_hold.clone()
    }

    /// NaN when undefined.
    #[wasm_bindgen(getter)]
    pub fn sharpe(&self) -> f64 {
        self.sharpe
    }

    #[wasm_bindgen(getter)]
    pub fn buy_hold_sharpe(&self) -> f64 {
        self.buy_hold_sharpe
    }

    #[wasm_bindgen(getter)]
    pub fn trades(&self) -> usize {
        self.trades
    }
}

/// Synthetic returns and "model" probabilities `σ(skill · z_t + noise)`,
/// where `z_t` is the standardized return the position at `t` earns.
/// `skill = 0` gives a coin flip.
pub fn synthetic_forecasts(days: usize, skill: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SynthConfig {
        phi: 0.0,
        ..SynthConfig::default()
    };
    let returns: Vec<f64> = synth_returns(&cfg, days, &mut rng)?
        .into_iter()
        .map(f64::exp_m1)
        .collect();
    let sd = (returns.iter().map(|r| r * r).sum::<f64>() / days as f64)
        .sqrt()
        .max(1e-12);
    let probs = returns
        .iter()
        .map(|r| {
            let noise: f64 = rng.sample(StandardNormal);
            1.0 / (1.0 + (-(skill * r / sd + noise)).exp())
        })
        .collect();
    Ok((returns, probs))
}

pub fn threshold_backtest_impl(
    tau_long: f64,
    tau_short: f64,
    fee: f64,
    skill: f64,
    days: usize,
    seed: u64,
) -> Result<Backtest> {
    if !(2..=MAX_DAYS).contains(&days) || !(0.0..=0.05).contains(&fee) || !skill.is_finite() {
        return Err(Error::InvalidInput(format!(
            "need 2..={MAX_DAYS} days, fee in [0, 0.05], finite skill"
        )));
    }
    let pair = ThresholdPair::new(tau_long, tau_short)?;
    let (returns, probs) = synthetic_forecasts(days, skill, seed)?;
    let curve = simulate(&threshold_signals(&probs, pair), &returns, fee, FeeMode::PerUnit)?;
    let bh = buy_and_hold(&returns, fee)?;
    let sharpe = trading_metrics(&curve.equity, PERIODS_PER_YEAR, 0.0)?.sharpe;
    let bh_sharpe = trading_metrics(&bh.equity, PERIODS_PER_YEAR, 0.0)?.sharpe;
    Ok(Backtest {
        trades: curve.trades(),
        strategy: curve.equity,
        buy_hold: bh.equity,
        sharpe: sharpe.unwrap_or(f64::NAN),
        buy_hold_sharpe: bh_sharpe.unwrap_or(f64::NAN),
    })
}

#[wasm_bindgen]
pub fn threshold_backtest(
    tau_long: f64,
    tau_short: f64,
    fee: f64,
    skill: f64,
    days: usize,
    seed: u64,
) -> std::result::Result<Backtest, JsError> {
    threshold_backtest_impl(tau_long, tau_short, fee, skill, days, seed).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_is_symmetric_with_unit_diagonal() {
        let n = 12;
        let k = kernel_heatmap_impl(n, 3, 2, 1, 5).unwrap();
        assert_eq!(k.len(), n * n);
        for i in 0..n {
            assert!((k[i * n + i] - 1.0).abs() < 1e-12);
            for j in 0..n {
                assert!((k[i * n + j] - k[j * n + i]).abs() < 1e-12);
                assert!((-1e-12..=1.0 + 1e-12).contains(&k[i * n + j]));
            }
        }
        assert_eq!(k, kernel_heatmap_impl(n, 3, 2, 1, 5).unwrap());
        assert!(kernel_heatmap_impl(1, 3, 2, 1, 5).is_err());
        assert!(kernel_heatmap_impl(10, 9, 2, 1, 5).is_err());
    }

    #[test]
    fn higher_beta_shrinks_off_diagonal() {
        let a = kernel_heatmap_impl(8, 2, 1, 1, 3).unwrap();
        let b = kernel_heatmap_impl(8, 2, 1, 3, 3).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| *y <= *x + 1e-12));
    }

    #[test]
    fn garch_path_shapes_and_bounds() {
        let g = garch_path_impl(1e-6, 0.1, 0.8, 500, 1).unwrap();
        assert_eq!(g.returns.len(), 500);
        assert_eq!(g.variance.len(), 501);
        assert!(g.variance.iter().all(|v| *v >= 1e-6));
        assert!((g.unconditional - 1e-5).abs() < 1e-15);
        assert!(garch_path_impl(1e-6, 0.5, 0.6, 500, 1).is_err());
    }

    #[test]
    fn backtest_is_deterministic_and_skill_helps() {
        let a = threshold_backtest_impl(0.55, 0.45, 0.0005, 2.0, 1000, 9).unwrap();
        let b = threshold_backtest_impl(0.55, 0.45, 0.0005, 2.0, 1000, 9).unwrap();
        assert_eq!(a.strategy, b.strategy);
        assert_eq!(a.strategy.len(), 1001);
        assert_eq!(a.buy_hold.len(), 1001);
        assert!(a.sharpe > a.buy_hold_sharpe);
        assert!(threshold_backtest_impl(0.4, 0.45, 0.0, 1.0, 100, 1).is_err());
    }
}
