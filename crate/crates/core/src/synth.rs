//! Seeded synthetic daily prices with a planted predictable component.
//!
//! Log returns follow `r_t = μ + φ (r_{t-1} - μ) + ε_t` where `ε_t` has
//! GARCH(1,1) conditional variance, so the direction of tomorrow's return
//! is partly predictable from today's and volatility clusters.

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::garch::GarchParams;
use crate::marketdata::{PriceBar, PriceSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub tickers: Vec<String>,
    pub days: usize,
    pub start: NaiveDate,
    pub start_price: f64,
    /// AR(1) coefficient of log returns.
    pub phi: f64,
    /// Daily mean log return.
    pub mu: f64,
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tickers: vec!["SYNA".into(), "SYNB".into(), "SYNC".into()],
            days: 1500,
            start: NaiveDate::from_ymd_opt(2015, 1, 5).expect("valid date"),
            start_price: 100.0,
            phi: 0.4,
            mu: 2e-4,
            omega: 2e-6,
            alpha: 0.08,
            beta: 0.9,
            seed: 20240101,
        }
    }
}

/// Weekdays from `start` (inclusive, rolled forward off weekends).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Log returns of one synthetic path.
pub fn synth_returns<R: Rng + ?Sized>(cfg: &SynthConfig, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let g = GarchParams::new(cfg.omega, cfg.alpha, cfg.beta, 0.0)?;
    if !(cfg.phi.abs() < 1.0) {
        return Err(Error::invalid("AR coefficient must lie in (-1, 1)"));
    }
    let mut s2 = g.unconditional_variance();
    let mut prev = cfg.mu;
    Ok((0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let e = s2.sqrt() * z;
            s2 = g.omega + g.alpha * e * e + g.beta * s2;
            let r = cfg.mu + cfg.phi * (prev - cfg.mu) + e;
            prev = r;
            r
        })
        .collect())
}

/// One series per ticker; ticker `k` uses the stream seeded with
/// `seed + k`. Open is the previous close, high/low bracket both, and
/// `adj_close == close`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<PriceSeries>> {
    if cfg.days < 2 || cfg.tickers.is_empty() || !(cfg.start_price > 0.0) {
        return Err(Error::invalid(
            "synthetic config needs >= 2 days, >= 1 ticker, positive start price",
        ));
    }
    let dates = business_days(cfg.start, cfg.days);
    cfg.tickers
        .iter()
        .enumerate()
        .map(|(k, ticker)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
            let rets = synth_returns(cfg, cfg.days - 1, &mut rng)?;
            let mut close = cfg.start_price;
            let mut bars = Vec::with_capacity(cfg.days);
            for (i, date) in dates.iter().enumerate() {
                let open = close;
                if i > 0 {
                    close = open * rets[i - 1].exp();
                }
                let spread: f64 = rng.gen_range(0.0..0.005);
                let round = |v: f64| (v * 1e4).round() / 1e4;
                let (o, c) = (round(open), round(close));
                bars.push(PriceBar {
                    date: *date,
                    open: o,
                    high: round(o.max(c) * (1.0 + spread)),
                    low: round(o.min(c) * (1.0 - spread)),
                    close: c,
                    adj_close: c,
                    volume: rng.gen_range(1e5..1e6f64).round(),
                });
            }
            PriceSeries::new(ticker.clone(), bars)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::{returns_from_prices, PriceField, ReturnKind};

    #[test]
    fn shape_and_determinism() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|s| s.len() == 1500));
        assert_eq!(a, generate(&cfg).unwrap());
        assert!(a[0].bars().iter().all(|b| b.is_valid()));
        assert!(business_days(cfg.start, 10)
            .iter()
            .all(|d| d.weekday().number_from_monday() <= 5));
    }

    #[test]
    fn planted_autocorrelation_is_visible() {
        let s = &generate(&SynthConfig::default()).unwrap()[0];
        let r = returns_from_prices(&s.prices(PriceField::Close), ReturnKind::Log).unwrap();
        let m = r.iter().sum::<f64>() / r.len() as f64;
        let num: f64 = r.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
        let den: f64 = r.iter().map(|v| (v - m).powi(2)).sum();
        assert!(num / den > 0.25, "lag-1 autocorrelation {}", num / den);
    }
}
