//! One-step-ahead realized-variance forecasting on an expanding (capped)
//! window: SVR variants and quantum-kernel SVR with periodic random-search
//! retraining, GARCH(1,1) with parameters frozen between refits, and a
//! persistence baseline.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::features::{realized_variance, session_close_utc, ScalerParams, RV_WINDOW};
use crate::garch::{garch_fit, GarchParams};
use crate::marketdata::{compute_returns, PriceField, PriceSeries, ReturnKind};
use crate::metrics::{self, DmLoss, ForecastReport};
use crate::qkernel::{cross_from_states, gram_from_states, FeatureMap, FeatureMapSpec};
use crate::svr::{
    hyper_search, sample_trials, svr_fit, svr_predict, PredictInput, SearchSpace, SolverOptions, SvrFamily, TrainInput,
    Trial,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandingPlan {
    pub initial_train: usize,
    pub retrain_every: usize,
    /// The window grows to this many rows and then slides.
    pub max_window: usize,
}

impl Default for ExpandingPlan {
    fn default() -> Self {
        Self {
            initial_train: 720,
            retrain_every: 120,
            max_window: 1000,
        }
    }
}

/// One refit: train on `train`, forecast the rows in `test`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub train: Range<usize>,
    pub test: Range<usize>,
}

impl ExpandingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.initial_train < 10 || self.retrain_every == 0 || self.initial_train > self.max_window {
            return Err(Error::invalid(format!("bad expanding plan {self:?}")));
        }
        Ok(())
    }

    pub fn segments(&self, n_rows: usize) -> Result<Vec<Segment>> {
        self.validate()?;
        ensure_len(self.initial_train + 2, n_rows)?;
        let mut out = Vec::new();
        let mut b = self.initial_train;
        while b < n_rows {
            let end = (b + self.retrain_every).min(n_rows);
            out.push(Segment {
                train: b.saturating_sub(self.max_window)..b,
                test: b..end,
            });
            b = end;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolModel {
    SvrLinear,
    SvrPoly,
    SvrRbf,
    QsvrAngle,
    QsvrAmplitude,
    Garch,
    Persistence,
}

impl VolModel {
    pub fn name(self) -> &'static str {
        match self {
            VolModel::SvrLinear => "svr_linear",
            VolModel::SvrPoly => "svr_poly",
            VolModel::SvrRbf => "svr_rbf",
            VolModel::QsvrAngle => "qsvr_angle",
            VolModel::QsvrAmplitude => "qsvr_amplitude",
            VolModel::Garch => "garch",
            VolModel::Persistence => "persistence",
        }
    }

    fn family(self) -> Option<SvrFamily> {
        match self {
            VolModel::SvrLinear => Some(SvrFamily::Linear),
            VolModel::SvrPoly => Some(SvrFamily::Poly),
            VolModel::SvrRbf => Some(SvrFamily::Rbf),
            VolModel::QsvrAngle => Some(SvrFamily::QuantumAngle),
            VolModel::QsvrAmplitude => Some(SvrFamily::QuantumAmplitude),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolConfig {
    pub plan: ExpandingPlan,
    pub models: Vec<VolModel>,
    /// `(p, q)` return and realized-variance lags for classical SVRs.
    pub classical_lags: (usize, usize),
    /// Amplitude-map feature count `d`, split evenly between the two lag
    /// blocks.
    pub amplitude_dim: usize,
    pub search_budget: usize,
    pub space: SearchSpace,
    /// Share of each in-sample window held out to score search trials.
    pub validation_frac: f64,
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl Default for VolConfig {
    fn default() -> Self {
        Self {
            plan: ExpandingPlan::default(),
            models: vec![
                VolModel::SvrLinear,
                VolModel::SvrPoly,
                VolModel::SvrRbf,
                VolModel::QsvrAngle,
                VolModel::Garch,
                VolModel::Persistence,
            ],
            classical_lags: (5, 5),
            amplitude_dim: 16,
            search_budget: 50,
            space: SearchSpace {
                qubits: vec![10],
                ..SearchSpace::default()
            },
            validation_frac: 0.2,
            seed: 0,
            solver: SolverOptions {
                psd_check: false,
                // validation QLIKE ranks candidates, so a capped fit of a badly
                // conditioned trial is acceptable
                max_iter: 200_000,
                ..SolverOptions::default()
            },
        }
    }
}

/// `(p, q)` for an angle map on `n` qubits: `p = ceil(n/2)`, `q = floor(n/2)`.
pub fn angle_lags(n_qubits: usize) -> (usize, usize) {
    (n_qubits.div_ceil(2), n_qubits / 2)
}

impl VolConfig {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.models.is_empty() || self.search_budget == 0 {
            return Err(Error::Config(
                "volatility study needs models and a search budget".into(),
            ));
        }
        if !(0.05..=0.5).contains(&self.validation_frac) {
            return Err(Error::Config("validation_frac must lie in [0.05, 0.5]".into()));
        }
        if ![16, 32, 64].contains(&self.amplitude_dim) {
            return Err(Error::Config("amplitude_dim must be 16, 32 or 64".into()));
        }
        let (p, q) = self.classical_lags;
        if p + q == 0 {
            return Err(Error::Config("classical_lags must use at least one lag".into()));
        }
        if self.models.contains(&VolModel::QsvrAngle)
            && (self.space.qubits.is_empty() || self.space.qubits.contains(&0))
        {
            return Err(Error::Config("angle QSVR needs positive qubit counts".into()));
        }
        Ok(())
    }

    pub fn max_lags(&self) -> (usize, usize) {
        let mut lags = vec![self.classical_lags, (self.amplitude_dim / 2, self.amplitude_dim / 2)];
        lags.extend(self.space.qubits.iter().map(|&n| angle_lags(n)));
        (
            lags.iter().map(|l| l.0).max().unwrap_or(1),
            lags.iter().map(|l| l.1).max().unwrap_or(1),
        )
    }
}

/// Rows shared by every model: row `i` is issued after the close of return
/// day `info[i]` and targets `RV` on the following day.
#[derive(Debug, Clone)]
pub struct VolDesign {
    pub ticker: String,
    /// Log returns; index `k` is dated `return_dates[k]`.
    pub returns: Vec<f64>,
    pub return_dates: Vec<NaiveDate>,
    /// `RV` at return index `k`, `None` during warm-up.
    pub rv: Vec<Option<f64>>,
    pub info: Vec<usize>,
    /// Date of each target.
    pub dates: Vec<NaiveDate>,
    pub rv_true: Vec<f64>,
    pub info_time: Vec<NaiveDateTime>,
    pub label_time: Vec<NaiveDateTime>,
}

impl VolDesign {
    /// Rows start late enough that `max_p` return lags and `max_q` RV lags
    /// exist for every row.
    pub fn new(series: &PriceSeries, field: PriceField, max_p: usize, max_q: usize) -> Result<Self> {
        let rs = compute_returns(series, ReturnKind::Log, field)?;
        let r = rs.values;
        let rv_tail = realized_variance(&r, RV_WINDOW)?;
        let mut rv = vec![None; RV_WINDOW - 1];
        rv.extend(rv_tail.into_iter().map(Some));
        let first = (max_p.max(1) - 1).max(RV_WINDOW - 1 + max_q.max(1) - 1);
        ensure_len(first + 2, r.len())?;
        let close = session_close_utc(&series.ticker);
        let info: Vec<usize> = (first..r.len() - 1).collect();
        Ok(Self {
            ticker: series.ticker.clone(),
            dates: info.iter().map(|t| rs.dates[t + 1]).collect(),
            rv_true: info.iter().map(|t| rv[t + 1].expect("past warm-up")).collect(),
            info_time: info.iter().map(|t| rs.dates[*t].and_time(close)).collect(),
            label_time: info.iter().map(|t| rs.dates[t + 1].and_time(close)).collect(),
            info,
            returns: r,
            return_dates: rs.dates,
            rv,
        })
    }

    pub fn len(&self) -> usize {
        self.info.len()
    }

    pub fn is_empty(&self) -> bool {
        self.info.is_empty()
    }

    /// `[r_t .. r_{t-p+1}, RV_t .. RV_{t-q+1}]` for row `i`.
    pub fn features(&self, i: usize, p: usize, q: usize) -> Vec<f64> {
        let t = self.info[i];
        let mut row: Vec<f64> = (0..p).map(|l| self.returns[t - l]).collect();
        row.extend((0..q).map(|l| self.rv[t - l].expect("lags within warm-up bound")));
        row
    }

    pub fn rv_now(&self, i: usize) -> f64 {
        self.rv[self.info[i]].expect("past warm-up")
    }

    /// Every row's features precede its target, and every segment trains
    /// only on rows whose targets were observed by the first forecast.
    pub fn audit(&self, segments: &[Segment]) -> Result<()> {
        if let Some(i) = (0..self.len()).find(|&i| self.info_time[i] >= self.label_time[i]) {
            return Err(Error::data(format!(
                "{}: row {i} uses data from its target day",
                self.ticker
            )));
        }
        for s in segments {
            if let Some(last) = s.train.end.checked_sub(1) {
                if self.label_time[last] > self.info_time[s.test.start] {
                    return Err(Error::data(format!(
                        "{}: training target {} is after forecast origin {}",
                        self.ticker, self.label_time[last], self.info_time[s.test.start]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub model: VolModel,
    pub boundary_row: usize,
    pub boundary_date: NaiveDate,
    pub trial: Option<Trial>,
    pub val_qlike: Option<f64>,
    pub garch: Option<GarchParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickerForecasts {
    pub ticker: String,
    pub dates: Vec<NaiveDate>,
    pub rv_true: Vec<f64>,
    pub predictions: BTreeMap<String, Vec<f64>>,
    pub selections: Vec<Selection>,
}

impl TickerForecasts {
    /// Columns `date, rv_true`, then one column per model in name order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["date".to_string(), "rv_true".to_string()];
        header.extend(self.predictions.keys().cloned());
        w.write_record(&header)?;
        for (i, d) in self.dates.iter().enumerate() {
            let mut rec = vec![d.to_string(), format!("{:.10e}", self.rv_true[i])];
            rec.extend(self.predictions.values().map(|v| format!("{:.10e}", v[i])));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

struct Fitted {
    preds: Vec<f64>,
}

/// Min-max target scaling fitted on a training window, with predictions
/// floored at a tenth of the smallest training target.
#[derive(Debug, Clone, Copy)]
struct TargetScale {
    lo: f64,
    span: f64,
    floor: f64,
}

impl TargetScale {
    fn fit(y: &[f64]) -> Self {
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_pos = y.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
        Self {
            lo,
            span: if hi > lo { hi - lo } else { 1.0 },
            floor: if min_pos.is_finite() { 0.1 * min_pos } else { 1e-12 },
        }
    }

    fn forward(&self, v: f64) -> f64 {
        (v - self.lo) / self.span
    }

    fn inverse(&self, v: f64) -> f64 {
        (v * self.span + self.lo).max(self.floor)
    }
}

fn minmax(rows: &[Vec<f64>]) -> ScalerParams {
    crate::features::minmax_fit(rows).expect("non-empty training rows")
}

fn trial_lags(trial: &Trial, cfg: &VolConfig) -> (usize, usize) {
    match trial.family {
        SvrFamily::QuantumAngle => angle_lags(trial.qubits.expect("angle trials carry a qubit count")),
        SvrFamily::QuantumAmplitude => (cfg.amplitude_dim / 2, cfg.amplitude_dim / 2),
        _ => cfg.classical_lags,
    }
}

fn map_spec(trial: &Trial, cfg: &VolConfig) -> Option<FeatureMapSpec> {
    let layers = trial.layers.unwrap_or(0);
    match trial.family {
        SvrFamily::QuantumAngle => Some(FeatureMapSpec::angle(trial.qubits.expect("qubits"), layers, cfg.seed)),
        SvrFamily::QuantumAmplitude => Some(FeatureMapSpec::amplitude(
            crate::qsim::amplitude_qubits(cfg.amplitude_dim),
            layers,
            trial.beta.unwrap_or(1),
            cfg.seed,
        )),
        _ => None,
    }
}

/// Fits `trial` on rows `fit` (features and targets scaled on those rows)
/// and forecasts rows `pred`.
fn fit_predict(
    design: &VolDesign,
    cfg: &VolConfig,
    trial: &Trial,
    fit: Range<usize>,
    pred: Range<usize>,
) -> Result<Fitted> {
    let (p, q) = trial_lags(trial, cfg);
    let raw_fit: Vec<Vec<f64>> = fit.clone().map(|i| design.features(i, p, q)).collect();
    let scaler = minmax(&raw_fit);
    let x_fit = scaler.apply(&raw_fit);
    let x_pred: Vec<Vec<f64>> = pred
        .clone()
        .map(|i| scaler.apply_row(&design.features(i, p, q)))
        .collect();
    let ts = TargetScale::fit(&design.rv_true[fit.clone()]);
    let y_fit: Vec<f64> = design.rv_true[fit].iter().map(|v| ts.forward(*v)).collect();
    let raw_preds = match map_spec(trial, cfg) {
        None => {
            let model = svr_fit(&trial.spec, TrainInput::Features(&x_fit), &y_fit, &cfg.solver)?;
            svr_predict(&model, PredictInput::Features(&x_pred))?
        }
        Some(ms) => {
            let fmap = FeatureMap::new(ms);
            let s_fit = fmap.states(&x_fit)?;
            let s_pred = fmap.states(&x_pred)?;
            let gram = gram_from_states(&s_fit, ms.beta);
            let cross: DMatrix<f64> = cross_from_states(&s_pred, &s_fit, ms.beta);
            let model = svr_fit(&trial.spec, TrainInput::Gram(&gram), &y_fit, &cfg.solver)?;
            svr_predict(&model, PredictInput::Cross(&cross))?
        }
    };
    Ok(Fitted {
        preds: raw_preds.into_iter().map(|v| ts.inverse(v)).collect(),
    })
}

fn svr_segment(
    design: &VolDesign,
    cfg: &VolConfig,
    model: VolModel,
    family: SvrFamily,
    seg: &Segment,
) -> Result<(Vec<f64>, Selection)> {
    let n_train = seg.train.len();
    let n_val = ((n_train as f64 * cfg.validation_frac).round() as usize).clamp(1, n_train - 2);
    let split = seg.train.end - n_val;
    let trials = sample_trials(
        family,
        &cfg.space,
        cfg.search_budget,
        cfg.seed.wrapping_add(seg.test.start as u64),
    )?;
    let outcome = hyper_search(&trials, |t| {
        let f = fit_predict(design, cfg, t, seg.train.start..split, split..seg.train.end)?;
        metrics::qlike(&design.rv_true[split..seg.train.end], &f.preds)
    })?;
    let f = fit_predict(design, cfg, &outcome.best, seg.train.clone(), seg.test.clone())?;
    Ok((
        f.preds,
        Selection {
            model,
            boundary_row: seg.test.start,
            boundary_date: design.dates[seg.test.start],
            trial: Some(outcome.best),
            val_qlike: Some(outcome.best_score),
            garch: None,
        },
    ))
}

/// GARCH fitted on the returns of the training rows' information days up
/// to the forecast origin, then run forward with frozen parameters. The
/// recursion starts at the variance of the fitting sample.
fn garch_segment(design: &VolDesign, seg: &Segment) -> Result<(Vec<f64>, Selection)> {
    let start = design.info[seg.train.start];
    let origin = design.info[seg.test.start];
    let sample = &design.returns[start..=origin];
    let fit = garch_fit(sample)?;
    let p = fit.params;
    let n = sample.len() as f64;
    let m = sample.iter().sum::<f64>() / n;
    let mut s2 = sample.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let last = design.info[seg.test.end - 1];
    // sigma2[k - start] is the variance for return day k
    let mut sigma2 = Vec::with_capacity(last + 2 - start);
    sigma2.push(s2);
    for k in start..=last {
        s2 = p.omega + p.alpha * (design.returns[k] - p.mu).powi(2) + p.beta * s2;
        sigma2.push(s2);
    }
    let preds = seg.test.clone().map(|i| sigma2[design.info[i] + 1 - start]).collect();
    Ok((
        preds,
        Selection {
            model: VolModel::Garch,
            boundary_row: seg.test.start,
            boundary_date: design.dates[seg.test.start],
            trial: None,
            val_qlike: None,
            garch: Some(p),
        },
    ))
}

/// Runs every configured model over the plan. Forecast `i` uses only data
/// dated at or before `info[i]`.
pub fn run_expanding_forecast(design: &VolDesign, cfg: &VolConfig) -> Result<TickerForecasts> {
    cfg.validate()?;
    let segments = cfg.plan.segments(design.len())?;
    design.audit(&segments)?;
    let first = segments[0].test.start;
    let mut predictions = BTreeMap::new();
    let mut selections = Vec::new();
    for &model in &cfg.models {
        let mut preds = Vec::with_capacity(design.len() - first);
        for seg in &segments {
            let (p, sel) = match model {
                VolModel::Persistence => (seg.test.clone().map(|i| design.rv_now(i)).collect(), None),
                VolModel::Garch => {
                    let (p, s) = garch_segment(design, seg)?;
                    (p, Some(s))
                }
                _ => {
                    let family = model.family().expect("SVR model");
                    let (p, s) = svr_segment(design, cfg, model, family, seg)?;
                    (p, Some(s))
                }
            };
            preds.extend(p);
            selections.extend(sel);
        }
        predictions.insert(model.name().to_string(), preds);
    }
    Ok(TickerForecasts {
        ticker: design.ticker.clone(),
        dates: design.dates[first..].to_vec(),
        rv_true: design.rv_true[first..].to_vec(),
        predictions,
        selections,
    })
}

/// Builds the design for `series` with lags sized for `cfg`, then runs the
/// plan.
pub fn run_ticker(series: &PriceSeries, field: PriceField, cfg: &VolConfig) -> Result<TickerForecasts> {
    cfg.validate()?;
    let (p, q) = cfg.max_lags();
    let design = VolDesign::new(series, field, p, q)?;
    run_expanding_forecast(&design, cfg)
}

/// Per-model metrics; DM tests compare each model with `baseline` on QLIKE
/// losses (positive statistic: the model beats the baseline).
pub fn summarize(f: &TickerForecasts, baseline: &str) -> Result<BTreeMap<String, ForecastReport>> {
    let base_terms = match f.predictions.get(baseline) {
        Some(b) => Some(metrics::qlike_terms(&f.rv_true, b)?),
        None => None,
    };
    let mut out = BTreeMap::new();
    for (name, pred) in &f.predictions {
        let terms = metrics::qlike_terms(&f.rv_true, pred)?;
        let reg = metrics::regression_metrics(&f.rv_true, pred)?;
        let dm = match &base_terms {
            Some(b) if name != baseline => metrics::dm_test(&terms, b, DmLoss::Precomputed, 1)?,
            _ => None,
        };
        out.insert(
            name.clone(),
            ForecastReport {
                qlike: terms.iter().sum::<f64>() / terms.len() as f64,
                mse: reg.mse,
                mae: reg.mae,
                r2: reg.r2,
                dir_acc: reg.dir_acc,
                dm_stat: dm.map(|d| d.stat),
                dm_p: dm.map(|d| d.p),
            },
        );
    }
    Ok(out)
}
