//! GARCH(1,1) with Gaussian quasi-maximum-likelihood fitting.
//!
//! `σ²_{t+1} = ω + α (r_t - μ)² + β σ²_t`, recursion seeded at the sample
//! variance. `μ` is fixed at the sample mean; the remaining parameters are
//! fitted on `(ln ω, logit(α+β), logit(α/(α+β)))` so every trial point is
//! admissible.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
}

impl GarchParams {
    pub fn new(omega: f64, alpha: f64, beta: f64, mu: f64) -> Result<Self> {
        let ok = omega > 0.0 && alpha >= 0.0 && beta >= 0.0 && alpha + beta < 1.0 && mu.is_finite();
        if !ok {
            return Err(Error::invalid(format!(
                "GARCH parameters violate ω > 0, α, β >= 0, α + β < 1: ω={omega}, α={alpha}, β={beta}"
            )));
        }
        Ok(Self { omega, alpha, beta, mu })
    }

    pub fn unconditional_variance(&self) -> f64 {
        self.omega / (1.0 - self.alpha - self.beta)
    }

    pub fn persistence(&self) -> f64 {
        self.alpha + self.beta
    }
}

/// `ω + α (r_t - μ)² + β σ²_t`.
pub fn garch_forecast(p: &GarchParams, r_t: f64, sigma2_t: f64) -> Result<f64> {
    if !(sigma2_t > 0.0) {
        return Err(Error::invalid(format!("variance must be positive, got {sigma2_t}")));
    }
    let e = r_t - p.mu;
    Ok(p.omega + p.alpha * e * e + p.beta * sigma2_t)
}

/// Mean and `1/n` variance.
fn moments(r: &[f64]) -> (f64, f64) {
    let n = r.len() as f64;
    let m = r.iter().sum::<f64>() / n;
    (m, r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
}

/// Conditional variances `σ²_0 .. σ²_n`; the last entry is the forecast for
/// the day after the sample.
pub fn garch_filter(p: &GarchParams, returns: &[f64]) -> Result<Vec<f64>> {
    ensure_len(1, returns.len())?;
    let (_, s2) = moments(returns);
    if !(s2 > 0.0) {
        return Err(Error::data("returns have zero variance"));
    }
    let mut out = Vec::with_capacity(returns.len() + 1);
    let mut s = s2;
    out.push(s);
    for r in returns {
        let e = r - p.mu;
        s = p.omega + p.alpha * e * e + p.beta * s;
        out.push(s);
    }
    Ok(out)
}

fn nll_unchecked(p: &GarchParams, returns: &[f64], s2: f64) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut s = s2;
    let mut total = 0.0;
    for r in returns {
        let e = r - p.mu;
        total += ln2pi + s.ln() + e * e / s;
        s = p.omega + p.alpha * e * e + p.beta * s;
    }
    0.5 * total
}

/// Gaussian negative log-likelihood of the return sample.
pub fn garch_nll(p: &GarchParams, returns: &[f64]) -> Result<f64> {
    ensure_len(10, returns.len())?;
    GarchParams::new(p.omega, p.alpha, p.beta, p.mu)?;
    let (_, s2) = moments(returns);
    if !(s2 > 0.0) {
        return Err(Error::data("returns have zero variance"));
    }
    Ok(nll_unchecked(p, returns, s2))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn unpack(u: &[f64], mu: f64) -> GarchParams {
    let persistence = sigmoid(u[1]);
    let share = sigmoid(u[2]);
    GarchParams {
        omega: u[0].exp(),
        alpha: persistence * share,
        beta: persistence * (1.0 - share),
        mu,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchFit {
    pub params: GarchParams,
    pub nll: f64,
    pub converged: bool,
}

/// Multi-start Nelder-Mead QMLE from a fixed grid of persistence and
/// shock-share values (ω starts at the level matching the sample variance).
pub fn garch_fit(returns: &[f64]) -> Result<GarchFit> {
    ensure_len(10, returns.len())?;
    if returns.len() < 100 {
        log::warn!("fitting GARCH on only {} observations", returns.len());
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("non-finite return"));
    }
    let (mu, s2) = moments(returns);
    if !(s2 > 0.0) {
        return Err(Error::data("cannot fit GARCH to a constant return series"));
    }
    let objective = |u: &[f64]| {
        let p = unpack(u, mu);
        if p.alpha + p.beta >= 1.0 || !(p.omega > 0.0) {
            return f64::INFINITY;
        }
        nll_unchecked(&p, returns, s2)
    };
    let opts = NelderMeadOptions {
        max_iter: 3000,
        f_tol: 1e-12,
        step: 0.5,
    };
    let mut best: Option<GarchFit> = None;
    for persistence in [0.5, 0.9, 0.98] {
        for share in [0.05, 0.15, 0.4] {
            let u0 = [(s2 * (1.0 - persistence)).ln(), logit(persistence), logit(share)];
            let m = nelder_mead(objective, &u0, opts);
            if !m.f.is_finite() {
                continue;
            }
            let cand = GarchFit {
                params: unpack(&m.x, mu),
                nll: m.f,
                converged: m.converged,
            };
            if best.is_none_or(|b| cand.nll < b.nll) {
                best = Some(cand);
            }
        }
    }
    let fit = best.ok_or_else(|| Error::NotConverged("GARCH likelihood was non-finite from every start".into()))?;
    GarchParams::new(fit.params.omega, fit.params.alpha, fit.params.beta, mu)
        .map_err(|_| Error::NotConverged("GARCH fit reached the stationarity boundary".into()))?;
    Ok(fit)
}

/// Simulates `n` returns with Gaussian innovations, starting from the
/// unconditional variance.
pub fn simulate_garch<R: Rng + ?Sized>(p: &GarchParams, n: usize, rng: &mut R) -> Vec<f64> {
    let mut s = p.unconditional_variance();
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let r = p.mu + s.sqrt() * z;
            s = p.omega + p.alpha * (r - p.mu).powi(2) + p.beta * s;
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forecast_examples() {
        let p = GarchParams::new(1e-6, 0.1, 0.8, 0.0).unwrap();
        assert_relative_eq!(garch_forecast(&p, 0.01, 1e-4).unwrap(), 9.1e-5, max_relative = 1e-12);
        let flat = GarchParams::new(3e-5, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(garch_forecast(&flat, 0.3, 0.2).unwrap(), 3e-5);
        assert!(GarchParams::new(1e-6, 0.1, 0.9, 0.0).is_err());
        assert!(garch_forecast(&p, 0.0, 0.0).is_err());
    }

    #[test]
    fn nll_constant_variance_closed_form() {
        let r: Vec<f64> = (0..50).map(|i| ((i * 7919) % 13) as f64 * 0.001 - 0.006).collect();
        let (m, s2) = moments(&r);
        let p = GarchParams::new(s2, 0.0, 0.0, m).unwrap();
        let n = r.len() as f64;
        let closed = 0.5 * n * ((2.0 * std::f64::consts::PI).ln() + s2.ln() + 1.0);
        assert_relative_eq!(garch_nll(&p, &r).unwrap(), closed, max_relative = 1e-12);

        // moving ω towards the sample variance lowers the NLL
        let far = garch_nll(&GarchParams::new(100.0 * s2, 0.0, 0.0, m).unwrap(), &r).unwrap();
        let nearer = garch_nll(&GarchParams::new(10.0 * s2, 0.0, 0.0, m).unwrap(), &r).unwrap();
        assert!(nearer < far);
        assert!(garch_nll(&p, &r[..9]).is_err());
    }

    #[test]
    fn zero_returns_rejected() {
        assert!(garch_fit(&[0.0; 200]).is_err());
    }

    #[test]
    fn recovers_parameters_on_one_long_path() {
        let truth = GarchParams::new(1e-6, 0.1, 0.8, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = simulate_garch(&truth, 5000, &mut rng);
        let fit = garch_fit(&r).unwrap();
        assert!((fit.params.alpha - 0.1).abs() < 0.05, "{fit:?}");
        assert!((fit.params.beta - 0.8).abs() < 0.1, "{fit:?}");
    }

    #[test]
    fn unconditional_variance_matches_long_run_mean() {
        let p = GarchParams::new(2e-6, 0.08, 0.9, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = simulate_garch(&p, 100_000, &mut rng);
        let path = garch_filter(&p, &r).unwrap();
        let mean = path.iter().sum::<f64>() / path.len() as f64;
        assert!((mean / p.unconditional_variance() - 1.0).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn forecasts_positive(omega in 1e-9f64..1e-2, a in 0.0f64..0.5, b in 0.0f64..0.49, r in -1.0f64..1.0, s in 1e-9f64..1.0) {
            let p = GarchParams::new(omega, a, b, 0.0).unwrap();
            prop_assert!(garch_forecast(&p, r, s).unwrap() > 0.0);
        }
    }
}
