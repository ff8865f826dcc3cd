//! Classification, trading, forecasting, and regime statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal, StudentsT};

use crate::error::{ensure_len, ensure_same_len, Error, Result};

pub const PERIODS_PER_YEAR: f64 = 252.0;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance (n - 1 denominator).
fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

// ---------------------------------------------------------------------------
// classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    /// `None` when nothing was predicted positive.
    pub precision: Option<f64>,
    /// `None` when there are no positive labels.
    pub recall: Option<f64>,
    /// `None` when the labels contain a single class.
    pub auc: Option<f64>,
}

/// ROC AUC as the Mann-Whitney statistic with average ranks for ties.
pub fn auc(probs: &[f64], labels: &[f64]) -> Result<Option<f64>> {
    ensure_same_len(labels.len(), probs.len())?;
    let n_pos = labels.iter().filter(|y| **y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k] > 0.5).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n)))
}

pub fn classification_metrics(probs: &[f64], labels: &[f64], threshold: f64) -> Result<ClassificationReport> {
    ensure_same_len(labels.len(), probs.len())?;
    ensure_len(1, labels.len())?;
    if labels.iter().any(|y| *y != 0.0 && *y != 1.0) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (p, y) in probs.iter().zip(labels) {
        match (*p > threshold, *y == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| {
        if b == 0 {
            None
        } else {
            Some(a as f64 / b as f64)
        }
    };
    Ok(ClassificationReport {
        accuracy: (tp + tn) as f64 / labels.len() as f64,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        auc: auc(probs, labels)?,
    })
}

// ---------------------------------------------------------------------------
// trading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradingReport {
    pub arc: f64,
    pub asd: f64,
    /// `None` when ASD is zero.
    pub sharpe: Option<f64>,
    /// `None` when there are no losing periods.
    pub sortino: Option<f64>,
    pub max_drawdown: f64,
}

/// `(ARC - r_f) / ASD`, undefined for zero ASD.
pub fn sharpe_ratio(arc: f64, asd: f64, rf: f64) -> Option<f64> {
    (asd > 0.0).then(|| (arc - rf) / asd)
}

/// Most negative `equity_t / max_{s<=t} equity_s - 1`; zero for a
/// non-decreasing path.
pub fn max_drawdown(equity: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for e in equity {
        peak = peak.max(*e);
        worst = worst.min(e / peak - 1.0);
    }
    worst
}

pub fn trading_metrics(equity: &[f64], periods_per_year: f64, rf: f64) -> Result<TradingReport> {
    ensure_len(2, equity.len())?;
    if equity.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::invalid("equity must stay positive"));
    }
    let rets: Vec<f64> = equity.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    let t = rets.len() as f64;
    let total = equity[equity.len() - 1] / equity[0];
    let arc = total.powf(periods_per_year / t) - 1.0;
    let asd = if rets.len() > 1 {
        var(&rets).sqrt() * periods_per_year.sqrt()
    } else {
        0.0
    };
    let downside = (rets.iter().filter(|r| **r < 0.0).map(|r| r * r).sum::<f64>() / t).sqrt() * periods_per_year.sqrt();
    Ok(TradingReport {
        arc,
        asd,
        sharpe: sharpe_ratio(arc, asd, rf),
        sortino: (downside > 0.0).then(|| (arc - rf) / downside),
        max_drawdown: max_drawdown(equity),
    })
}

// ---------------------------------------------------------------------------
// forecasting
// ---------------------------------------------------------------------------

/// Per-period QLIKE terms `ln(p) + y / p`.
pub fn qlike_terms(rv_true: &[f64], rv_pred: &[f64]) -> Result<Vec<f64>> {
    ensure_same_len(rv_true.len(), rv_pred.len())?;
    ensure_len(1, rv_true.len())?;
    rv_true
        .iter()
        .zip(rv_pred)
        .map(|(y, p)| {
            if !(*p > 0.0) {
                Err(Error::invalid(format!("QLIKE needs positive forecasts, got {p}")))
            } else if *y < 0.0 {
                Err(Error::invalid(format!("negative realized variance {y}")))
            } else {
                Ok(p.ln() + y / p)
            }
        })
        .collect()
}

pub fn qlike(rv_true: &[f64], rv_pred: &[f64]) -> Result<f64> {
    Ok(mean(&qlike_terms(rv_true, rv_pred)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
    pub dir_acc: f64,
}

pub fn regression_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<RegressionReport> {
    ensure_same_len(y_true.len(), y_pred.len())?;
    ensure_len(2, y_true.len())?;
    let n = y_true.len() as f64;
    let mse = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let mae = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let m = mean(y_true);
    let ss_tot: f64 = y_true.iter().map(|v| (v - m).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - mse * n / ss_tot
    } else if mse == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    let hits = y_true
        .windows(2)
        .zip(y_pred.windows(2))
        .filter(|(a, b)| sign(a[1] - a[0]) == sign(b[1] - b[0]))
        .count();
    Ok(RegressionReport {
        mse,
        mae,
        r2,
        dir_acc: hits as f64 / (n - 1.0),
    })
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub qlike: f64,
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
    pub dir_acc: f64,
    pub dm_stat: Option<f64>,
    pub dm_p: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmLoss {
    /// Inputs are forecast errors; loss is their square.
    Squared,
    /// Inputs are already per-period losses (e.g. QLIKE terms).
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmResult {
    /// Positive when series `a` has lower loss.
    pub stat: f64,
    pub p: f64,
}

/// Diebold-Mariano test on `d_t = L(b_t) - L(a_t)` with a Bartlett
/// Newey-West long-run variance truncated at lag `horizon - 1`. Returns
/// `None` for an identically zero differential.
pub fn dm_test(a: &[f64], b: &[f64], loss: DmLoss, horizon: usize) -> Result<Option<DmResult>> {
    ensure_same_len(a.len(), b.len())?;
    ensure_len(10, a.len())?;
    if horizon == 0 {
        return Err(Error::invalid("DM horizon must be >= 1"));
    }
    let l = |v: f64| match loss {
        DmLoss::Squared => v * v,
        DmLoss::Precomputed => v,
    };
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| l(*y) - l(*x)).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let gamma = |k: usize| d[k..].iter().zip(&d).map(|(x, y)| (x - m) * (y - m)).sum::<f64>() / n;
    let mut lrv = gamma(0);
    for k in 1..horizon.min(d.len()) {
        lrv += 2.0 * (1.0 - k as f64 / horizon as f64) * gamma(k);
    }
    if lrv <= 0.0 || !lrv.is_finite() {
        if m == 0.0 {
            return Ok(None);
        }
        return Ok(Some(DmResult {
            stat: m.signum() * f64::INFINITY,
            p: 0.0,
        }));
    }
    let stat = m / (lrv / n).sqrt();
    let normal = Normal::standard();
    Ok(Some(DmResult {
        stat,
        p: 2.0 * normal.sf(stat.abs()),
    }))
}

// ---------------------------------------------------------------------------
// regime statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub stat: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeTests {
    /// Welch's t-test on means.
    pub t: TestResult,
    /// Brown-Forsythe (median-centred Levene) test on variances.
    pub brown_forsythe: TestResult,
    /// Two-sample Kolmogorov-Smirnov test (asymptotic p).
    pub ks: TestResult,
}

pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TestResult> {
    ensure_len(2, a.len())?;
    ensure_len(2, b.len())?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (var(a) / na, var(b) / nb);
    let se2 = va + vb;
    let diff = mean(a) - mean(b);
    if se2 == 0.0 {
        return Ok(if diff == 0.0 {
            TestResult { stat: 0.0, p: 1.0 }
        } else {
            TestResult {
                stat: diff.signum() * f64::INFINITY,
                p: 0.0,
            }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(TestResult {
        stat: t,
        p: 2.0 * dist.sf(t.abs()),
    })
}

pub fn brown_forsythe(a: &[f64], b: &[f64]) -> Result<TestResult> {
    ensure_len(2, a.len())?;
    ensure_len(2, b.len())?;
    let za: Vec<f64> = {
        let m = median(a);
        a.iter().map(|v| (v - m).abs()).collect()
    };
    let zb: Vec<f64> = {
        let m = median(b);
        b.iter().map(|v| (v - m).abs()).collect()
    };
    let (na, nb) = (za.len() as f64, zb.len() as f64);
    let n = na + nb;
    let (ma, mb) = (mean(&za), mean(&zb));
    let grand = (ma * na + mb * nb) / n;
    let between = na * (ma - grand).powi(2) + nb * (mb - grand).powi(2);
    let within: f64 =
        za.iter().map(|z| (z - ma).powi(2)).sum::<f64>() + zb.iter().map(|z| (z - mb).powi(2)).sum::<f64>();
    let (d1, d2) = (1.0, n - 2.0);
    if within == 0.0 {
        return Ok(TestResult {
            stat: if between == 0.0 { 0.0 } else { f64::INFINITY },
            p: if between == 0.0 { 1.0 } else { 0.0 },
        });
    }
    let f = (between / d1) / (within / d2);
    let dist = FisherSnedecor::new(d1, d2).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(TestResult { stat: f, p: dist.sf(f) })
}

/// Kolmogorov distribution tail `P(K > λ)`.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TestResult> {
    ensure_len(1, a.len())?;
    ensure_len(1, b.len())?;
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.total_cmp(y));
    sb.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < na && j < nb {
        let v = sa[i].min(sb[j]);
        while i < na && sa[i] == v {
            i += 1;
        }
        while j < nb && sb[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    Ok(TestResult {
        stat: d,
        p: kolmogorov_sf(ne.sqrt() * d),
    })
}

pub fn regime_tests(a: &[f64], b: &[f64]) -> Result<RegimeTests> {
    ensure_len(10, a.len())?;
    ensure_len(10, b.len())?;
    Ok(RegimeTests {
        t: welch_t(a, b)?,
        brown_forsythe: brown_forsythe(a, b)?,
        ks: ks_two_sample(a, b)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeStats {
    pub mu_ann: f64,
    pub sigma_ann: f64,
    pub skew: f64,
    /// Pearson (non-excess) kurtosis.
    pub kurtosis: f64,
    pub max_drawdown: f64,
    pub sharpe: Option<f64>,
}

/// Summary statistics of a daily log-return sample.
pub fn regime_stats(log_returns: &[f64]) -> Result<RegimeStats> {
    ensure_len(10, log_returns.len())?;
    let m = mean(log_returns);
    let n = log_returns.len() as f64;
    let m2 = log_returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n;
    let m3 = log_returns.iter().map(|r| (r - m).powi(3)).sum::<f64>() / n;
    let m4 = log_returns.iter().map(|r| (r - m).powi(4)).sum::<f64>() / n;
    let sigma_ann = var(log_returns).sqrt() * PERIODS_PER_YEAR.sqrt();
    let mu_ann = m * PERIODS_PER_YEAR;
    let mut equity = Vec::with_capacity(log_returns.len() + 1);
    let mut acc = 0.0;
    equity.push(1.0);
    for r in log_returns {
        acc += r;
        equity.push(acc.exp());
    }
    Ok(RegimeStats {
        mu_ann,
        sigma_ann,
        skew: if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 },
        kurtosis: if m2 > 0.0 { m4 / (m2 * m2) } else { 0.0 },
        max_drawdown: max_drawdown(&equity),
        sharpe: sharpe_ratio(mu_ann, sigma_ann, 0.0),
    })
}
