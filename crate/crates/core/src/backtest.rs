//! Threshold trading rule, equity simulation with fees, and threshold
//! calibration.

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, ensure_same_len, Error, Result};
use crate::metrics;

pub const DEFAULT_FEE: f64 = 0.0005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub long: f64,
    pub short: f64,
}

impl ThresholdPair {
    pub fn new(long: f64, short: f64) -> Result<Self> {
        if !(short <= 0.5 && 0.5 <= long && short >= 0.0 && long <= 1.0) {
            return Err(Error::invalid(format!(
                "thresholds need short <= 0.5 <= long, got ({long}, {short})"
            )));
        }
        Ok(Self { long, short })
    }
}

/// `+1` above `τ_long`, `-1` below `τ_short`, otherwise flat.
pub fn threshold_signals(probs: &[f64], t: ThresholdPair) -> Vec<i8> {
    probs
        .iter()
        .map(|p| {
            if *p > t.long {
                1
            } else if *p < t.short {
                -1
            } else {
                0
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeeMode {
    /// Fee times `|s_t - s_{t-1}|`, so a long-short flip pays twice.
    #[default]
    PerUnit,
    /// One fee per change regardless of size.
    PerChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquityCurve {
    /// Dates of each period, possibly empty when simulated without dates.
    pub dates: Vec<NaiveDate>,
    /// `equity[0] = 1`; `equity[t + 1]` is the value after period `t`.
    pub equity: Vec<f64>,
    pub positions: Vec<i8>,
    pub costs: Vec<f64>,
}

impl EquityCurve {
    pub fn final_equity(&self) -> f64 {
        *self.equity.last().expect("equity starts at 1")
    }

    /// Number of periods in which the position changed.
    pub fn trades(&self) -> usize {
        let mut prev = 0i8;
        self.positions
            .iter()
            .filter(|&&s| {
                let changed = s != prev;
                prev = s;
                changed
            })
            .count()
    }

    pub fn with_dates(mut self, dates: &[NaiveDate]) -> Result<Self> {
        ensure_same_len(self.positions.len(), dates.len())?;
        self.dates = dates.to_vec();
        Ok(self)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["date", "position", "equity", "cost"])?;
        for i in 0..self.positions.len() {
            let date = self
                .dates
                .get(i)
                .map(|d| d.to_string())
                .unwrap_or_else(|| i.to_string());
            w.write_record([
                date,
                self.positions[i].to_string(),
                format!("{:.6}", self.equity[i + 1]),
                format!("{:.6}", self.costs[i]),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Equity recursion `E_{t+1} = E_t (1 + s_t r_t - cost_t)` with the prior
/// position taken as flat.
pub fn simulate(positions: &[i8], returns: &[f64], fee_rate: f64, mode: FeeMode) -> Result<EquityCurve> {
    ensure_same_len(returns.len(), positions.len())?;
    let mut equity = Vec::with_capacity(returns.len() + 1);
    let mut costs = Vec::with_capacity(returns.len());
    let mut e = 1.0;
    let mut prev = 0i8;
    equity.push(e);
    for (s, r) in positions.iter().zip(returns) {
        let delta = (s - prev).unsigned_abs() as f64;
        let cost = match mode {
            FeeMode::PerUnit => fee_rate * delta,
            FeeMode::PerChange if delta > 0.0 => fee_rate,
            FeeMode::PerChange => 0.0,
        };
        e *= 1.0 + *s as f64 * r - cost;
        equity.push(e);
        costs.push(cost);
        prev = *s;
    }
    Ok(EquityCurve {
        dates: Vec::new(),
        equity,
        positions: positions.to_vec(),
        costs,
    })
}

/// Long throughout, paying one entry fee at the start.
pub fn buy_and_hold(returns: &[f64], fee_rate: f64) -> Result<EquityCurve> {
    ensure_len(1, returns.len())?;
    simulate(&vec![1; returns.len()], returns, fee_rate, FeeMode::PerUnit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub thresholds: ThresholdPair,
    pub sharpe: Option<f64>,
    pub trades: usize,
    /// No grid pair produced a defined Sharpe; the strategy never trades.
    pub no_trade: bool,
}

/// Grid values from `lo` to `hi` inclusive in steps of `step`.
fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| ((lo + k as f64 * step) * 1e6).round() / 1e6).collect()
}

pub fn threshold_grid(step: f64) -> Vec<ThresholdPair> {
    let mut out = Vec::new();
    for long in grid(0.5, 0.9, step) {
        for short in grid(0.1, 0.5, step) {
            out.push(ThresholdPair { long, short });
        }
    }
    out
}

/// Picks the grid pair with the highest Sharpe on the slice; ties go to
/// fewer trades, then the smaller `τ_long`, then the smaller `τ_short`.
pub fn calibrate_thresholds(
    probs: &[f64],
    returns: &[f64],
    step: f64,
    fee_rate: f64,
    mode: FeeMode,
) -> Result<Calibration> {
    ensure_same_len(returns.len(), probs.len())?;
    ensure_len(2, probs.len())?;
    if !(step > 0.0) {
        return Err(Error::invalid("grid step must be positive"));
    }
    if probs.len() < 20 {
        log::warn!("calibrating thresholds on only {} observations", probs.len());
    }
    let mut best: Option<Calibration> = None;
    for pair in threshold_grid(step) {
        let curve = simulate(&threshold_signals(probs, pair), returns, fee_rate, mode)?;
        let Some(sharpe) = metrics::trading_metrics(&curve.equity, metrics::PERIODS_PER_YEAR, 0.0)?.sharpe else {
            continue;
        };
        let cand = Calibration {
            thresholds: pair,
            sharpe: Some(sharpe),
            trades: curve.trades(),
            no_trade: false,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                let bs = b.sharpe.expect("kept pairs have a Sharpe");
                sharpe > bs
                    || (sharpe == bs
                        && (cand.trades, pair.long, pair.short) < (b.trades, b.thresholds.long, b.thresholds.short))
            }
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(best.unwrap_or(Calibration {
        thresholds: ThresholdPair { long: 0.5, short: 0.5 },
        sharpe: None,
        trades: 0,
        no_trade: true,
    }))
}
