//! Technical indicators, feature regimes, labels, scaling, and split plans.
//!
//! Every dataset row carries two timestamps: the latest market close whose
//! information enters the features (`info_cutoff`) and the close at which
//! the label is realised (`label_time`). Timestamps are calendar date plus
//! the session's closing time in UTC, so same-day Asian and European closes
//! can legitimately feed a U.S. close-to-close label.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, ensure_same_len, Error, Result};
use crate::marketdata::{align_calendars, returns_from_prices, PriceField, PriceSeries, ReturnKind, ReturnSeries};

pub const RSI_PERIOD: usize = 14;
pub const STOCH_PERIOD: usize = 14;
pub const MACD_FAST: usize = 12;
pub const MACD_SLOW: usize = 26;
pub const MACD_SIGNAL: usize = 9;
pub const RV_WINDOW: usize = 5;
pub const TRADING_WINDOW: usize = 10;

/// Column order of the seven-index regime. DJI and NYA enter lagged by one
/// session; the others are same-day closes.
pub const MID7_INDICES: [&str; 7] = ["N225", "HSI", "AORD", "GDAXI", "FTSE", "DJI", "NYA"];

// ---------------------------------------------------------------------------
// indicators
// ---------------------------------------------------------------------------

/// Relative strength index with simple rolling means of gains and losses.
///
/// Output index `j` corresponds to price index `j + period`. A window with
/// neither gains nor losses yields 50.
pub fn rsi(prices: &[f64], period: usize) -> Result<Vec<f64>> {
    if period == 0 {
        return Err(Error::invalid("rsi period must be >= 1"));
    }
    ensure_len(period + 1, prices.len())?;
    let changes: Vec<f64> = prices.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(changes
        .windows(period)
        .map(|win| {
            let gain: f64 = win.iter().filter(|c| **c > 0.0).sum::<f64>() / period as f64;
            let loss: f64 = -win.iter().filter(|c| **c < 0.0).sum::<f64>() / period as f64;
            // 100 - 100 / (1 + RS) rewritten to stay inside [0, 100] in floating point
            if loss == 0.0 && gain == 0.0 {
                50.0
            } else {
                100.0 * gain / (gain + loss)
            }
        })
        .collect())
}

/// Raw stochastic %K on a close-only series: position of the latest close in
/// the trailing `period`-day high/low range. Flat windows give 50.
///
/// Output index `j` corresponds to price index `j + period - 1`.
pub fn stochastic_k(prices: &[f64], period: usize) -> Result<Vec<f64>> {
    if period == 0 {
        return Err(Error::invalid("%K period must be >= 1"));
    }
    ensure_len(period, prices.len())?;
    Ok(prices
        .windows(period)
        .map(|win| {
            let hi = win.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = win.iter().copied().fold(f64::INFINITY, f64::min);
            let last = win[period - 1];
            if hi == lo {
                50.0
            } else {
                (100.0 * (last - lo) / (hi - lo)).clamp(0.0, 100.0)
            }
        })
        .collect())
}

/// Trailing simple moving average; output index `j` covers inputs `j..j+window`.
pub fn sma(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("sma window must be >= 1"));
    }
    ensure_len(window, values.len())?;
    Ok(values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect())
}

/// Exponential moving average with smoothing `2 / (span + 1)`, seeded at the
/// first observation. Same length as the input.
pub fn ema(values: &[f64], span: usize) -> Result<Vec<f64>> {
    if span == 0 {
        return Err(Error::invalid("ema span must be >= 1"));
    }
    ensure_len(1, values.len())?;
    let k = 2.0 / (span as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = values[0];
    out.push(acc);
    for v in &values[1..] {
        acc += k * (v - acc);
        out.push(acc);
    }
    Ok(out)
}

/// MACD line (EMA12 - EMA26) and its 9-day EMA signal line.
pub fn macd(prices: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_len(MACD_SLOW, prices.len())?;
    let fast = ema(prices, MACD_FAST)?;
    let slow = ema(prices, MACD_SLOW)?;
    let line: Vec<f64> = fast.iter().zip(&slow).map(|(f, s)| f - s).collect();
    let signal = ema(&line, MACD_SIGNAL)?;
    Ok((line, signal))
}

/// Rolling mean of squared returns; output index `j` covers `j..j+window`.
pub fn realized_variance(returns: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("realized variance window must be >= 1"));
    }
    ensure_len(window, returns.len())?;
    Ok(returns
        .windows(window)
        .map(|w| w.iter().map(|r| r * r).sum::<f64>() / window as f64)
        .collect())
}

/// `1` when the price rose strictly, else `0`. Length `n - 1`.
pub fn label_direction(prices: &[f64]) -> Result<Vec<f64>> {
    ensure_len(2, prices.len())?;
    Ok(prices.windows(2).map(|w| if w[1] > w[0] { 1.0 } else { 0.0 }).collect())
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    /// Label date of each row.
    pub dates: Vec<NaiveDate>,
    pub x: Vec<Vec<f64>>,
    pub names: Vec<String>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.x.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Direction,
    RealizedVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: FeatureMatrix,
    pub y: Vec<f64>,
    pub target_kind: TargetKind,
    pub info_cutoff: Vec<NaiveDateTime>,
    pub label_time: Vec<NaiveDateTime>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.features.x
    }

    /// Fails on the first row whose features use information stamped at or
    /// after its label.
    pub fn audit_leakage(&self) -> Result<()> {
        audit_stamps(&self.info_cutoff, &self.label_time)
    }

    /// Copy with only the listed columns, in the listed order.
    pub fn select_columns(&self, cols: &[usize]) -> LabeledDataset {
        let mut out = self.clone();
        out.features.x = self
            .features
            .x
            .iter()
            .map(|r| cols.iter().map(|&c| r[c]).collect())
            .collect();
        out.features.names = cols.iter().map(|&c| self.features.names[c].clone()).collect();
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label_date".to_string()];
        header.extend(self.features.names.iter().cloned());
        header.push("y".to_string());
        w.write_record(&header)?;
        for ((date, row), y) in self.features.dates.iter().zip(&self.features.x).zip(&self.y) {
            let mut rec = vec![date.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Rolling `T x F` windows (flattened row-major) with next-day direction
/// labels and the next-day simple return used for backtesting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowTensor {
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub next_returns: Vec<f64>,
    pub label_dates: Vec<NaiveDate>,
    pub info_cutoff: Vec<NaiveDateTime>,
    pub label_time: Vec<NaiveDateTime>,
    pub window: usize,
    pub n_features: usize,
    pub names: Vec<String>,
}

impl WindowTensor {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn audit_leakage(&self) -> Result<()> {
        audit_stamps(&self.info_cutoff, &self.label_time)
    }

    /// Scaler fitted on every day-row of the samples in `range`.
    pub fn fit_scaler(&self, range: Range<usize>) -> Result<ScalerParams> {
        let rows: Vec<Vec<f64>> = self.samples[range]
            .iter()
            .flat_map(|s| s.chunks(self.n_features).map(|c| c.to_vec()))
            .collect();
        minmax_fit(&rows)
    }

    pub fn scaled(&self, params: &ScalerParams) -> WindowTensor {
        let mut out = self.clone();
        for s in &mut out.samples {
            for chunk in s.chunks_mut(self.n_features) {
                params.apply_in_place(chunk);
            }
        }
        out
    }

    /// Keeps samples whose label date lies in `[from, to]`.
    pub fn restrict_label_dates(&self, from: NaiveDate, to: NaiveDate) -> WindowTensor {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.label_dates[i] >= from && self.label_dates[i] <= to)
            .collect();
        let pick = |v: &Vec<f64>| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        WindowTensor {
            samples: keep.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: pick(&self.labels),
            next_returns: pick(&self.next_returns),
            label_dates: keep.iter().map(|&i| self.label_dates[i]).collect(),
            info_cutoff: keep.iter().map(|&i| self.info_cutoff[i]).collect(),
            label_time: keep.iter().map(|&i| self.label_time[i]).collect(),
            window: self.window,
            n_features: self.n_features,
            names: self.names.clone(),
        }
    }
}

fn audit_stamps(info: &[NaiveDateTime], label: &[NaiveDateTime]) -> Result<()> {
    ensure_same_len(label.len(), info.len())?;
    match info.iter().zip(label).position(|(i, l)| i >= l) {
        Some(row) => Err(Error::data(format!(
            "look-ahead at row {row}: features use {} but label is {}",
            info[row], label[row]
        ))),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// session close times
// ---------------------------------------------------------------------------

fn bare_ticker(t: &str) -> String {
    t.trim_start_matches('^').to_ascii_uppercase()
}

/// Indicative UTC closing time of a market, used to order information
/// within a calendar day.
pub fn session_close_utc(ticker: &str) -> NaiveTime {
    let t = bare_ticker(ticker);
    let hm = match t.as_str() {
        "N225" | "AORD" => (6, 0),
        "HSI" => (8, 0),
        "GDAXI" | "FTSE" => (16, 30),
        _ if t.ends_with(".IS") => (15, 0),
        _ => (21, 0),
    };
    NaiveTime::from_hms_opt(hm.0, hm.1, 0).expect("valid time")
}

fn stamp(date: NaiveDate, ticker: &str) -> NaiveDateTime {
    date.and_time(session_close_utc(ticker))
}

// ---------------------------------------------------------------------------
// regimes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureRegime {
    /// RSI-14, %K-14, SMA3 of %K-14 on the target.
    Low3,
    /// Seven index returns (five same-day, two lagged one session).
    Mid7,
    /// Eight own lags plus seven lags of each supplied index.
    High64,
    /// 10-day windows of [log return, MACD line, MACD signal, RSI-14].
    Trading10x4,
    /// `p` past returns and `q` past realized variances.
    Vol { p: usize, q: usize },
}

impl fmt::Display for FeatureRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureRegime::Low3 => write!(f, "low3"),
            FeatureRegime::Mid7 => write!(f, "mid7"),
            FeatureRegime::High64 => write!(f, "high64"),
            FeatureRegime::Trading10x4 => write!(f, "trading10x4"),
            FeatureRegime::Vol { p, q } => write!(f, "vol({p},{q})"),
        }
    }
}

impl FromStr for FeatureRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "low3" => Ok(FeatureRegime::Low3),
            "mid7" => Ok(FeatureRegime::Mid7),
            "high64" => Ok(FeatureRegime::High64),
            "trading10x4" => Ok(FeatureRegime::Trading10x4),
            _ => {
                let inner = s
                    .strip_prefix("vol(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::invalid(format!("unknown feature regime `{s}`")))?;
                let (p, q) = inner
                    .split_once(',')
                    .ok_or_else(|| Error::invalid(format!("bad vol regime `{s}`")))?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::invalid(format!("bad vol regime `{s}`")))
                };
                let (p, q) = (parse(p)?, parse(q)?);
                if p + q == 0 {
                    return Err(Error::invalid("vol regime needs p + q >= 1"));
                }
                Ok(FeatureRegime::Vol { p, q })
            }
        }
    }
}

/// Price series feeding a feature regime. `others` holds index series
/// looked up by ticker (a leading `^` is ignored).
#[derive(Debug, Clone)]
pub struct MarketInputs {
    pub target: PriceSeries,
    pub others: Vec<PriceSeries>,
    pub price_field: PriceField,
}

impl MarketInputs {
    pub fn single(target: PriceSeries, price_field: PriceField) -> Self {
        Self {
            target,
            others: Vec::new(),
            price_field,
        }
    }

    fn find(&self, name: &str) -> Result<&PriceSeries> {
        self.others
            .iter()
            .find(|s| bare_ticker(&s.ticker) == bare_ticker(name))
            .ok_or_else(|| Error::data(format!("missing ticker {name}")))
    }
}

#[derive(Debug, Clone)]
pub enum FeatureSet {
    Tabular(LabeledDataset),
    Windows(WindowTensor),
}

impl FeatureSet {
    pub fn audit_leakage(&self) -> Result<()> {
        match self {
            FeatureSet::Tabular(d) => d.audit_leakage(),
            FeatureSet::Windows(w) => w.audit_leakage(),
        }
    }
}

pub fn build_feature_set(regime: FeatureRegime, inputs: &MarketInputs) -> Result<FeatureSet> {
    match regime {
        FeatureRegime::Low3 => low3(inputs).map(FeatureSet::Tabular),
        FeatureRegime::Mid7 => mid7(inputs).map(FeatureSet::Tabular),
        FeatureRegime::High64 => high64(inputs).map(FeatureSet::Tabular),
        FeatureRegime::Trading10x4 => trading_windows(inputs, TRADING_WINDOW).map(FeatureSet::Windows),
        FeatureRegime::Vol { p, q } => vol_features(&inputs.target, inputs.price_field, p, q).map(FeatureSet::Tabular),
    }
}

fn low3(inputs: &MarketInputs) -> Result<LabeledDataset> {
    let s = &inputs.target;
    let prices = s.prices(inputs.price_field);
    let dates = s.dates();
    // %K at price index i is k[i - 13]; its SMA3 at i needs %K at i-2..i.
    let first_day = (RSI_PERIOD).max(STOCH_PERIOD - 1 + 2);
    ensure_len(first_day + 2, prices.len())?;
    let r = rsi(&prices, RSI_PERIOD)?;
    let k = stochastic_k(&prices, STOCH_PERIOD)?;
    let k_sma = sma(&k, 3)?;
    let labels = label_direction(&prices)?;

    let mut ds = empty_dataset(&["rsi14", "stoch_k14", "stoch_k14_sma3"], TargetKind::Direction);
    for t in (first_day + 1)..prices.len() {
        let d = t - 1;
        let row = vec![
            r[d - RSI_PERIOD],
            k[d + 1 - STOCH_PERIOD],
            k_sma[d + 1 - STOCH_PERIOD - 2],
        ];
        push_row(
            &mut ds,
            dates[t],
            row,
            labels[t - 1],
            stamp(dates[d], &s.ticker),
            stamp(dates[t], &s.ticker),
        );
    }
    Ok(ds)
}

fn mid7(inputs: &MarketInputs) -> Result<LabeledDataset> {
    let mut series = vec![inputs.target.clone()];
    for name in MID7_INDICES {
        series.push(inputs.find(name)?.clone());
    }
    let aligned = align_calendars(&series)?;
    let n = aligned[0].len();
    ensure_len(3, n)?;
    let target = &aligned[0];
    let dates = target.dates();
    let rets: Vec<Vec<f64>> = aligned
        .iter()
        .map(|s| returns_from_prices(&s.prices(inputs.price_field), ReturnKind::Log))
        .collect::<Result<_>>()?;
    let labels = label_direction(&target.prices(inputs.price_field))?;
    let names: Vec<String> = MID7_INDICES
        .iter()
        .enumerate()
        .map(|(i, n)| if i >= 5 { format!("{n}_lag1") } else { n.to_string() })
        .collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut ds = empty_dataset(&name_refs, TargetKind::Direction);
    // return index k is dated at price index k + 1
    for t in 2..n {
        let mut row = Vec::with_capacity(7);
        let mut cutoff = NaiveDateTime::MIN;
        for (j, name) in MID7_INDICES.iter().enumerate() {
            let day = if j >= 5 { t - 1 } else { t };
            row.push(rets[j + 1][day - 1]);
            cutoff = cutoff.max(stamp(dates[day], name));
        }
        push_row(
            &mut ds,
            dates[t],
            row,
            labels[t - 1],
            cutoff,
            stamp(dates[t], &target.ticker),
        );
    }
    Ok(ds)
}

fn high64(inputs: &MarketInputs) -> Result<LabeledDataset> {
    if inputs.others.len() != 8 {
        log::warn!("high-dimensional regime expects 8 indices, got {}", inputs.others.len());
    }
    let mut series = vec![inputs.target.clone()];
    series.extend(inputs.others.iter().cloned());
    let aligned = align_calendars(&series)?;
    let rets: Vec<ReturnSeries> = aligned
        .iter()
        .map(|s| crate::marketdata::compute_returns(s, ReturnKind::Log, inputs.price_field))
        .collect::<Result<_>>()?;
    let tickers: Vec<&str> = aligned.iter().map(|s| s.ticker.as_str()).collect();
    let indices: Vec<(&str, &ReturnSeries)> = tickers[1..].iter().copied().zip(rets[1..].iter()).collect();
    let fm = lag_matrix(&rets[0], &indices, 8, 7)?;

    let prices = aligned[0].prices(inputs.price_field);
    let labels = label_direction(&prices)?;
    let dates = aligned[0].dates();
    let lead = prices.len() - fm.n_rows();
    let mut ds = empty_dataset(&[], TargetKind::Direction);
    ds.features.names = fm.names.clone();
    for (i, row) in fm.x.into_iter().enumerate() {
        let t = lead + i;
        let cutoff = tickers
            .iter()
            .map(|tk| stamp(dates[t - 1], tk))
            .max()
            .expect("non-empty");
        push_row(
            &mut ds,
            dates[t],
            row,
            labels[t - 1],
            cutoff,
            stamp(dates[t], tickers[0]),
        );
    }
    Ok(ds)
}

/// Lag embedding: the target's returns at lags `1..=self_lags` followed by
/// each index's returns at lags `1..=cross_lags`. Row dates are the dates
/// of the return being predicted.
pub fn lag_matrix(
    target: &ReturnSeries,
    indices: &[(&str, &ReturnSeries)],
    self_lags: usize,
    cross_lags: usize,
) -> Result<FeatureMatrix> {
    for (name, s) in indices {
        if s.dates != target.dates {
            return Err(Error::data(format!("{name} is not calendar-aligned with the target")));
        }
    }
    let max_lag = self_lags.max(cross_lags);
    ensure_len(max_lag + 1, target.len())?;
    let mut names: Vec<String> = (1..=self_lags).map(|l| format!("self_lag{l}")).collect();
    for (name, _) in indices {
        names.extend((1..=cross_lags).map(|l| format!("{}_lag{l}", bare_ticker(name))));
    }
    let mut x = Vec::with_capacity(target.len() - max_lag);
    let mut dates = Vec::with_capacity(target.len() - max_lag);
    for t in max_lag..target.len() {
        let mut row: Vec<f64> = (1..=self_lags).map(|l| target.values[t - l]).collect();
        for (_, s) in indices {
            row.extend((1..=cross_lags).map(|l| s.values[t - l]));
        }
        x.push(row);
        dates.push(target.dates[t]);
    }
    Ok(FeatureMatrix { dates, x, names })
}

/// Per-day rows of [log return, MACD line, MACD signal, RSI-14], starting at
/// the first day every indicator is past its warm-up. Returns the price
/// index of the first row alongside the rows.
pub fn trading_day_features(prices: &[f64]) -> Result<(usize, Vec<Vec<f64>>)> {
    let warm = (MACD_SLOW - 1).max(RSI_PERIOD);
    ensure_len(warm + 1, prices.len())?;
    let logret = returns_from_prices(prices, ReturnKind::Log)?;
    let (line, signal) = macd(prices)?;
    let r = rsi(prices, RSI_PERIOD)?;
    let rows = (warm..prices.len())
        .map(|d| vec![logret[d - 1], line[d], signal[d], r[d - RSI_PERIOD]])
        .collect();
    Ok((warm, rows))
}

fn trading_windows(inputs: &MarketInputs, window: usize) -> Result<WindowTensor> {
    let s = &inputs.target;
    let prices = s.prices(inputs.price_field);
    let dates = s.dates();
    let (first, rows) = trading_day_features(&prices)?;
    ensure_len(first + window + 1, prices.len())?;
    let nf = 4;
    let mut wt = WindowTensor {
        samples: Vec::new(),
        labels: Vec::new(),
        next_returns: Vec::new(),
        label_dates: Vec::new(),
        info_cutoff: Vec::new(),
        label_time: Vec::new(),
        window,
        n_features: nf,
        names: ["log_return", "macd_line", "macd_signal", "rsi14"]
            .map(String::from)
            .to_vec(),
    };
    // window ends at price index e, label is the move from e to e + 1
    for e in (first + window - 1)..(prices.len() - 1) {
        let start = e + 1 - window - first;
        let sample: Vec<f64> = rows[start..start + window].iter().flatten().copied().collect();
        wt.samples.push(sample);
        wt.labels.push(if prices[e + 1] > prices[e] { 1.0 } else { 0.0 });
        wt.next_returns.push(prices[e + 1] / prices[e] - 1.0);
        wt.label_dates.push(dates[e + 1]);
        wt.info_cutoff.push(stamp(dates[e], &s.ticker));
        wt.label_time.push(stamp(dates[e + 1], &s.ticker));
    }
    Ok(wt)
}

/// Volatility features with the row bookkeeping needed by forecasting code.
#[derive(Debug, Clone)]
pub struct VolFeatures {
    pub dataset: LabeledDataset,
    /// Log returns of the whole series (return index `k` dated at price `k+1`).
    pub returns: ReturnSeries,
    /// Return index of the information day of each row.
    pub info_index: Vec<usize>,
    /// `RV_t` on each row's information day.
    pub rv_now: Vec<f64>,
}

/// Rows `[r_t .. r_{t-p+1}, RV_t .. RV_{t-q+1}]` labelled with `RV_{t+1}`.
pub fn vol_feature_rows(series: &PriceSeries, field: PriceField, p: usize, q: usize) -> Result<VolFeatures> {
    let returns = crate::marketdata::compute_returns(series, ReturnKind::Log, field)?;
    let r = &returns.values;
    let rv = realized_variance(r, RV_WINDOW)?; // rv[j] = RV at return index j + 4
    let rv_at = |k: usize| rv[k + 1 - RV_WINDOW];
    let first = (p.max(1) - 1).max(RV_WINDOW - 1 + q.max(1) - 1);
    ensure_len(first + 2, r.len())?;

    let mut names: Vec<String> = (0..p).map(|l| format!("ret_lag{l}")).collect();
    names.extend((0..q).map(|l| format!("rv_lag{l}")));
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut ds = empty_dataset(&name_refs, TargetKind::RealizedVariance);
    let mut info_index = Vec::new();
    let mut rv_now = Vec::new();
    for t in first..r.len() - 1 {
        let mut row: Vec<f64> = (0..p).map(|l| r[t - l]).collect();
        row.extend((0..q).map(|l| rv_at(t - l)));
        push_row(
            &mut ds,
            returns.dates[t + 1],
            row,
            rv_at(t + 1),
            stamp(returns.dates[t], &series.ticker),
            stamp(returns.dates[t + 1], &series.ticker),
        );
        info_index.push(t);
        rv_now.push(rv_at(t));
    }
    Ok(VolFeatures {
        dataset: ds,
        returns,
        info_index,
        rv_now,
    })
}

fn vol_features(series: &PriceSeries, field: PriceField, p: usize, q: usize) -> Result<LabeledDataset> {
    Ok(vol_feature_rows(series, field, p, q)?.dataset)
}

fn empty_dataset(names: &[&str], kind: TargetKind) -> LabeledDataset {
    LabeledDataset {
        features: FeatureMatrix {
            dates: Vec::new(),
            x: Vec::new(),
            names: names.iter().map(|s| s.to_string()).collect(),
        },
        y: Vec::new(),
        target_kind: kind,
        info_cutoff: Vec::new(),
        label_time: Vec::new(),
    }
}

fn push_row(
    ds: &mut LabeledDataset,
    date: NaiveDate,
    row: Vec<f64>,
    y: f64,
    cutoff: NaiveDateTime,
    label: NaiveDateTime,
) {
    ds.features.dates.push(date);
    ds.features.x.push(row);
    ds.y.push(y);
    ds.info_cutoff.push(cutoff);
    ds.label_time.push(label);
}

// ---------------------------------------------------------------------------
// scaling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalerParams {
    /// `(x - min) / (max - min)`, unclipped; constant columns map to 0.
    pub fn apply_in_place(&self, row: &mut [f64]) {
        for ((v, lo), hi) in row.iter_mut().zip(&self.min).zip(&self.max) {
            let span = hi - lo;
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        let mut out = row.to_vec();
        self.apply_in_place(&mut out);
        out
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply_row(r)).collect()
    }
}

pub fn minmax_fit(rows: &[Vec<f64>]) -> Result<ScalerParams> {
    let first = rows
        .first()
        .ok_or_else(|| Error::invalid("cannot fit a scaler on zero rows"))?;
    let d = first.len();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for r in rows {
        ensure_same_len(d, r.len())?;
        for (j, v) in r.iter().enumerate() {
            min[j] = min[j].min(*v);
            max[j] = max[j].max(*v);
        }
    }
    Ok(ScalerParams { min, max })
}

pub fn minmax_apply(params: &ScalerParams, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    params.apply(rows)
}

// ---------------------------------------------------------------------------
// split plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    ExpandingWalkforward,
    RegimePhases,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
    pub scheme: SplitScheme,
}

impl SplitPlan {
    pub fn is_chronological(&self) -> bool {
        self.folds
            .iter()
            .all(|f| f.train.end <= f.test.start && !f.train.is_empty() && !f.test.is_empty())
    }
}

/// Position of the final fold: training rows `[0, train_end)`, test rows
/// `[train_end, test_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FinalFold {
    pub train_end: usize,
    pub test_end: usize,
}

/// Expanding training windows followed by equal-length, back-to-back test
/// windows; the last fold ends at `anchor` (or uses the last `n/(k+1)` rows
/// when no anchor is given).
pub fn make_walkforward_splits(n_rows: usize, n_folds: usize, anchor: Option<FinalFold>) -> Result<SplitPlan> {
    if n_folds == 0 {
        return Err(Error::invalid("need at least one fold"));
    }
    let anchor = anchor.unwrap_or_else(|| {
        let test_len = n_rows / (n_folds + 1);
        FinalFold {
            train_end: n_rows - test_len,
            test_end: n_rows,
        }
    });
    if anchor.test_end > n_rows {
        return Err(Error::invalid(format!(
            "test end {} beyond {} rows",
            anchor.test_end, n_rows
        )));
    }
    if anchor.test_end <= anchor.train_end {
        return Err(Error::invalid("test range does not follow the training range"));
    }
    let test_len = anchor.test_end - anchor.train_end;
    let span = (n_folds - 1) * test_len;
    if span >= anchor.train_end {
        return Err(Error::invalid(format!(
            "{n_folds} folds of {test_len} rows do not fit before row {}",
            anchor.train_end
        )));
    }
    let folds = (0..n_folds)
        .map(|i| {
            let test_start = anchor.train_end - (n_folds - 1 - i) * test_len;
            Fold {
                train: 0..test_start,
                test: test_start..test_start + test_len,
            }
        })
        .collect();
    Ok(SplitPlan {
        folds,
        scheme: SplitScheme::ExpandingWalkforward,
    })
}

/// Date-anchored variant: the final fold trains on dates `<= final_train_end`
/// and tests on `(final_train_end, final_test_end]`.
pub fn walkforward_by_dates(
    dates: &[NaiveDate],
    n_folds: usize,
    final_train_end: NaiveDate,
    final_test_end: NaiveDate,
) -> Result<SplitPlan> {
    if final_test_end <= final_train_end {
        return Err(Error::invalid("test range predates training range"));
    }
    let train_end = dates.partition_point(|d| *d <= final_train_end);
    let test_end = dates.partition_point(|d| *d <= final_test_end);
    if train_end == 0 || train_end == dates.len() {
        return Err(Error::invalid("final training boundary outside the data"));
    }
    make_walkforward_splits(dates.len(), n_folds, Some(FinalFold { train_end, test_end }))
}

/// Train / early-stop / model-select / threshold-calibration slices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimePhases {
    pub train: Range<usize>,
    pub early_stop: Range<usize>,
    pub model_select: Range<usize>,
    pub calibrate: Range<usize>,
}

/// 70/10/10/10 contiguous split with floor rounding on the three 10% slices
/// and the remainder going to training.
pub fn make_regime_phase_splits(n_rows: usize) -> Result<RegimePhases> {
    ensure_len(10, n_rows)?;
    let tenth = n_rows / 10;
    let train_end = n_rows - 3 * tenth;
    Ok(RegimePhases {
        train: 0..train_end,
        early_stop: train_end..train_end + tenth,
        model_select: train_end + tenth..train_end + 2 * tenth,
        calibrate: train_end + 2 * tenth..n_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::PriceBar;
    use proptest::prelude::*;

    fn series(ticker: &str, prices: &[f64], start: NaiveDate) -> PriceSeries {
        let bars = prices
            .iter()
            .enumerate()
            .map(|(i, p)| PriceBar {
                date: start + chrono::Days::new(i as u64),
                open: *p,
                high: *p,
                low: *p,
                close: *p,
                adj_close: *p,
                volume: 0.0,
            })
            .collect();
        PriceSeries::new(ticker, bars).unwrap()
    }

    fn wiggle(n: usize, seed: u64) -> Vec<f64> {
        let mut p = 100.0;
        (0..n)
            .map(|i| {
                p *= 1.0 + 0.01 * (((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0);
                p
            })
            .collect()
    }

    fn day0() -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()
    }

    #[test]
    fn rsi_examples() {
        let up: Vec<f64> = (0..15).map(|i| 100.0 + i as f64).collect();
        assert_eq!(rsi(&up, 14).unwrap(), vec![100.0]);
        let down: Vec<f64> = up.iter().rev().copied().collect();
        assert_eq!(rsi(&down, 14).unwrap(), vec![0.0]);
        let alt: Vec<f64> = (0..15).map(|i| if i % 2 == 0 { 100.0 } else { 101.0 }).collect();
        assert!((rsi(&alt, 14).unwrap()[0] - 50.0).abs() < 1e-12);
        assert!(rsi(&up[..14], 14).is_err());
    }

    #[test]
    fn stochastic_examples() {
        assert_eq!(stochastic_k(&[1.0, 3.0, 2.0, 5.0], 4).unwrap(), vec![100.0]);
        assert_eq!(stochastic_k(&[5.0, 3.0, 2.0, 1.0], 4).unwrap(), vec![0.0]);
        assert_eq!(stochastic_k(&[1.0, 5.0, 3.0], 3).unwrap(), vec![50.0]);
        assert_eq!(stochastic_k(&[2.0, 2.0, 2.0], 3).unwrap(), vec![50.0]);
    }

    #[test]
    fn sma_ema_examples() {
        assert_eq!(sma(&[1.0, 2.0, 3.0], 3).unwrap(), vec![2.0]);
        assert_eq!(sma(&[4.0; 5], 2).unwrap(), vec![4.0; 4]);
        assert_eq!(sma(&[1.0, 7.0], 1).unwrap(), vec![1.0, 7.0]);
        assert!(sma(&[1.0], 0).is_err());
        assert_eq!(ema(&[3.0; 4], 5).unwrap(), vec![3.0; 4]);
        assert_eq!(ema(&[1.0, 9.0, -2.0], 1).unwrap(), vec![1.0, 9.0, -2.0]);
        assert_eq!(ema(&[0.0, 1.0], 3).unwrap(), vec![0.0, 0.5]);
        assert!(ema(&[1.0], 0).is_err());
    }

    #[test]
    fn macd_constant_and_short() {
        let (l, s) = macd(&[50.0; 40]).unwrap();
        assert!(l.iter().chain(&s).all(|v| *v == 0.0));
        assert!(macd(&[1.0; 25]).is_err());
    }

    #[test]
    fn macd_ramp_converges_to_closed_form() {
        // For x_t = a + b t, an EMA with smoothing k seeded at x_0 lags the
        // ramp by b (1 - k) / k = b (span - 1) / 2 in the limit, so the MACD
        // line tends to b ((26 - 1) - (12 - 1)) / 2 = 7 b.
        let b = 0.3;
        let prices: Vec<f64> = (0..600).map(|t| 10.0 + b * t as f64).collect();
        let (line, signal) = macd(&prices).unwrap();
        let limit = b * ((MACD_SLOW - 1) as f64 - (MACD_FAST - 1) as f64) / 2.0;
        assert!((line.last().unwrap() - limit).abs() < 1e-9);
        assert!((signal.last().unwrap() - limit).abs() < 1e-9);
        assert!(line.last().unwrap() > &0.0);
    }

    #[test]
    fn realized_variance_examples() {
        assert!(realized_variance(&[0.02; 5], 5)
            .unwrap()
            .iter()
            .all(|v| (v - 0.0004).abs() < 1e-18));
        assert_eq!(realized_variance(&[1.0, 0.0, 0.0, 0.0, 0.0], 5).unwrap(), vec![0.2]);
        assert_eq!(realized_variance(&[0.0; 7], 5).unwrap(), vec![0.0; 3]);
        assert!(realized_variance(&[0.0; 4], 5).is_err());
    }

    #[test]
    fn direction_labels() {
        assert_eq!(label_direction(&[100.0, 101.0]).unwrap(), vec![1.0]);
        assert_eq!(label_direction(&[100.0, 100.0]).unwrap(), vec![0.0]);
        assert_eq!(label_direction(&[100.0, 99.0]).unwrap(), vec![0.0]);
        assert!(label_direction(&[1.0]).is_err());
    }

    #[test]
    fn lag_matrix_shapes() {
        let mk = |name: &str, seed| {
            let s = series(name, &wiggle(40, seed), day0());
            crate::marketdata::compute_returns(&s, ReturnKind::Log, PriceField::Close).unwrap()
        };
        let target = mk("T", 1);
        let idx: Vec<ReturnSeries> = (0..8).map(|i| mk("I", 10 + i)).collect();
        let names = ["A", "B", "C", "D", "E", "F", "G", "H"];
        let pairs: Vec<(&str, &ReturnSeries)> = names.iter().copied().zip(idx.iter()).collect();
        let fm = lag_matrix(&target, &pairs, 8, 7).unwrap();
        assert_eq!(fm.n_cols(), 64);
        assert_eq!(fm.n_rows(), target.len() - 8);

        let one = lag_matrix(&target, &[], 1, 0).unwrap();
        assert_eq!(one.n_cols(), 1);
        for (i, row) in one.x.iter().enumerate() {
            assert_eq!(row[0], target.values[i]);
            assert_eq!(one.dates[i], target.dates[i + 1]);
        }
        let short = ReturnSeries {
            dates: target.dates[..8].to_vec(),
            values: target.values[..8].to_vec(),
            kind: ReturnKind::Log,
        };
        assert!(lag_matrix(&short, &[], 8, 7).is_err());
    }

    fn mid7_inputs(n: usize) -> MarketInputs {
        let mut others = Vec::new();
        for (i, name) in MID7_INDICES.iter().enumerate() {
            others.push(series(&format!("^{name}"), &wiggle(n, 7 + i as u64), day0()));
        }
        MarketInputs {
            target: series("^GSPC", &wiggle(n, 3), day0()),
            others,
            price_field: PriceField::AdjClose,
        }
    }

    #[test]
    fn regime_shapes_and_leakage() {
        let inputs = mid7_inputs(120);
        let FeatureSet::Tabular(m7) = build_feature_set(FeatureRegime::Mid7, &inputs).unwrap() else {
            panic!()
        };
        assert_eq!(m7.features.n_cols(), 7);
        m7.audit_leakage().unwrap();
        // same-day foreign close feeds a later U.S. close
        assert_eq!(m7.info_cutoff[0].date(), m7.label_time[0].date());

        let FeatureSet::Tabular(l3) = build_feature_set(FeatureRegime::Low3, &inputs).unwrap() else {
            panic!()
        };
        assert_eq!(l3.features.n_cols(), 3);
        l3.audit_leakage().unwrap();
        assert!(l3.rows().iter().flatten().all(|v| (0.0..=100.0).contains(v)));

        let FeatureSet::Windows(w) = build_feature_set(FeatureRegime::Trading10x4, &inputs).unwrap() else {
            panic!()
        };
        assert_eq!((w.window, w.n_features), (10, 4));
        assert!(w.samples.iter().all(|s| s.len() == 40));
        w.audit_leakage().unwrap();

        let FeatureSet::Tabular(v) = build_feature_set(FeatureRegime::Vol { p: 5, q: 5 }, &inputs).unwrap() else {
            panic!()
        };
        assert_eq!(v.features.n_cols(), 10);
        v.audit_leakage().unwrap();

        let mut hi = inputs.clone();
        hi.others.push(series("^EXTRA", &wiggle(120, 99), day0()));
        let FeatureSet::Tabular(h) = build_feature_set(FeatureRegime::High64, &hi).unwrap() else {
            panic!()
        };
        assert_eq!(h.features.n_cols(), 64);
        h.audit_leakage().unwrap();
    }

    #[test]
    fn low3_row_matches_indicators_of_previous_day() {
        let prices = wiggle(60, 5);
        let inputs = MarketInputs::single(series("X", &prices, day0()), PriceField::Close);
        let FeatureSet::Tabular(ds) = build_feature_set(FeatureRegime::Low3, &inputs).unwrap() else {
            panic!()
        };
        let last = ds.len() - 1;
        let t = prices.len() - 1;
        let history = &prices[..t];
        let r = *rsi(history, 14).unwrap().last().unwrap();
        let k = stochastic_k(history, 14).unwrap();
        let ks = *sma(&k, 3).unwrap().last().unwrap();
        assert_eq!(ds.rows()[last], vec![r, *k.last().unwrap(), ks]);
        assert_eq!(ds.y[last], if prices[t] > prices[t - 1] { 1.0 } else { 0.0 });
    }

    #[test]
    fn vol_rows_use_past_only() {
        let prices = wiggle(80, 11);
        let s = series("X", &prices, day0());
        let vf = vol_feature_rows(&s, PriceField::Close, 3, 2).unwrap();
        let r = &vf.returns.values;
        let i = 10;
        let t = vf.info_index[i];
        assert_eq!(vf.dataset.rows()[i][0], r[t]);
        assert_eq!(vf.dataset.rows()[i][2], r[t - 2]);
        let rv_next = (t - 3..=t + 1).map(|k| r[k] * r[k]).sum::<f64>() / 5.0;
        assert!((vf.dataset.y[i] - rv_next).abs() < 1e-18);
        vf.dataset.audit_leakage().unwrap();
    }

    #[test]
    fn missing_index_is_error() {
        let mut inputs = mid7_inputs(60);
        inputs.others.pop();
        assert!(build_feature_set(FeatureRegime::Mid7, &inputs).is_err());
    }

    #[test]
    fn regime_parsing() {
        assert_eq!(
            "vol(5,5)".parse::<FeatureRegime>().unwrap(),
            FeatureRegime::Vol { p: 5, q: 5 }
        );
        assert_eq!("LOW3".parse::<FeatureRegime>().unwrap(), FeatureRegime::Low3);
        assert!("mid8".parse::<FeatureRegime>().is_err());
        for r in [FeatureRegime::High64, FeatureRegime::Vol { p: 2, q: 7 }] {
            assert_eq!(r.to_string().parse::<FeatureRegime>().unwrap(), r);
        }
    }

    #[test]
    fn minmax_examples() {
        let p = minmax_fit(&[vec![0.0, 3.0], vec![10.0, 3.0]]).unwrap();
        assert_eq!(p.apply_row(&[5.0, 3.0]), vec![0.5, 0.0]);
        assert_eq!(p.apply_row(&[20.0, 7.0]), vec![2.0, 0.0]);
        assert!(minmax_fit(&[]).is_err());
    }

    #[test]
    fn walkforward_examples() {
        let plan = make_walkforward_splits(600, 5, None).unwrap();
        assert_eq!(plan.folds.len(), 5);
        assert!(plan.is_chronological());
        for w in plan.folds.windows(2) {
            assert_eq!(w[0].train.start, w[1].train.start);
            assert!(w[0].train.end < w[1].train.end);
            assert_eq!(w[0].test.len(), w[1].test.len());
        }
        let one = make_walkforward_splits(100, 1, None).unwrap();
        assert_eq!(
            one.folds,
            vec![Fold {
                train: 0..50,
                test: 50..100
            }]
        );
        assert!(make_walkforward_splits(
            100,
            2,
            Some(FinalFold {
                train_end: 60,
                test_end: 50
            })
        )
        .is_err());
        assert!(make_walkforward_splits(
            100,
            6,
            Some(FinalFold {
                train_end: 50,
                test_end: 60
            })
        )
        .is_err());
    }

    #[test]
    fn walkforward_date_anchor() {
        let start = NaiveDate::from_ymd_opt(2009, 1, 7).unwrap();
        let dates: Vec<NaiveDate> = (0..4800).map(|i| start + chrono::Days::new(i)).collect();
        let train_end = NaiveDate::from_ymd_opt(2019, 12, 31).unwrap();
        let test_end = NaiveDate::from_ymd_opt(2021, 12, 31).unwrap();
        let plan = walkforward_by_dates(&dates, 5, train_end, test_end).unwrap();
        let last = plan.folds.last().unwrap();
        assert_eq!(dates[last.train.end - 1], train_end);
        assert_eq!(dates[last.test.start], NaiveDate::from_ymd_opt(2020, 1, 1).unwrap());
        assert_eq!(dates[last.test.end - 1], test_end);
        assert!(walkforward_by_dates(&dates, 5, test_end, train_end).is_err());
    }

    #[test]
    fn regime_phase_examples() {
        let p = make_regime_phase_splits(100).unwrap();
        assert_eq!(
            (
                p.train.len(),
                p.early_stop.len(),
                p.model_select.len(),
                p.calibrate.len()
            ),
            (70, 10, 10, 10)
        );
        let p = make_regime_phase_splits(10).unwrap();
        assert_eq!(
            (
                p.train.len(),
                p.early_stop.len(),
                p.model_select.len(),
                p.calibrate.len()
            ),
            (7, 1, 1, 1)
        );
        assert_eq!(p.calibrate.end, 10);
        assert!(make_regime_phase_splits(9).is_err());
    }

    proptest! {
        #[test]
        fn bounded_oscillators(prices in prop::collection::vec(1.0f64..200.0, 16..80)) {
            for v in rsi(&prices, 14).unwrap().into_iter().chain(stochastic_k(&prices, 14).unwrap()) {
                prop_assert!((0.0..=100.0).contains(&v), "{v}");
            }
        }

        #[test]
        fn moving_averages_fix_constants(c in -50.0f64..50.0, n in 1usize..40, w in 1usize..10) {
            let v = vec![c; n.max(w)];
            prop_assert!(sma(&v, w).unwrap().iter().all(|x| (x - c).abs() < 1e-12));
            prop_assert!(ema(&v, w).unwrap().iter().all(|x| *x == c));
        }

        #[test]
        fn minmax_maps_train_to_unit_range(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..30)) {
            let p = minmax_fit(&rows).unwrap();
            let scaled = p.apply(&rows);
            for j in 0..3 {
                let col: Vec<f64> = scaled.iter().map(|r| r[j]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if p.max[j] > p.min[j] {
                    prop_assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
                } else {
                    prop_assert!(lo == 0.0 && hi == 0.0);
                }
            }
        }

        #[test]
        fn walkforward_is_chronological(n in 20usize..2000, k in 1usize..8) {
            if let Ok(plan) = make_walkforward_splits(n, k, None) {
                prop_assert!(plan.is_chronological());
                prop_assert_eq!(plan.folds.len(), k);
            }
        }
    }
}
