//! Study orchestration: TOML run configs, the classification, trading and
//! volatility studies, execution plans, and deterministic reports.
//!
//! Reports carry a SHA-256 hash of the normalized config and the seeds, and
//! contain no timestamps, so a rerun on the same data and config writes the
//! same bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::{self, FeeMode};
use crate::error::{Error, Result};
use crate::features::{
    build_feature_set, make_regime_phase_splits, make_walkforward_splits, minmax_fit, walkforward_by_dates,
    FeatureRegime, FeatureSet, LabeledDataset, MarketInputs, RegimePhases, SplitPlan, WindowTensor,
};
use crate::marketdata::{load_price_csv, PriceField, PriceSeries};
use crate::metrics::{self, PERIODS_PER_YEAR};
use crate::neural::{
    ann_baseline, architecture_search, lstm_grid, qlstm_grid, qnn_grid, train, AnnSpec, Encoding, GradientMethod,
    ModelSpec, Samples, TrainConfig, TrainedModel,
};
use crate::par;
use crate::svr::SearchSpace;
use crate::volstudy::{self, ExpandingPlan, VolConfig, VolDesign, VolModel};

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Classify,
    Trade,
    Volatility,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::Classify => "classify",
            Study::Trade => "trade",
            Study::Volatility => "volatility",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Study::Classify),
            "trade" => Ok(Study::Trade),
            "volatility" => Ok(Study::Volatility),
            _ => Err(Error::Config(format!("unknown study `{s}`"))),
        }
    }
}

/// Price files are read from `dir/<TICKER>.csv`; a leading `^` in a ticker
/// may be omitted from the file name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub tickers: Vec<String>,
    /// Index series used by the cross-market feature regimes.
    #[serde(default)]
    pub indices: Vec<String>,
    #[serde(default)]
    pub price_field: PriceField,
}

/// Optimizer settings shared by every neural model of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub gradient: GradientMethod,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            max_epochs: d.max_epochs,
            patience: d.patience,
            gradient: d.gradient,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            gradient: self.gradient,
            class_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    /// `low3`, `mid7` or `high64`.
    pub regime: String,
    /// Defaults to angle encoding up to 7 features and amplitude beyond.
    pub encoding: Option<Encoding>,
    pub folds: usize,
    pub layers: Vec<usize>,
    /// Qubit counts swept by amplitude-encoded grids.
    pub qubits: Vec<usize>,
    /// Hidden-layer layouts of the ANN grid; defaults to the published
    /// baseline for the feature dimension.
    pub ann_hidden: Option<Vec<Vec<usize>>>,
    /// Tail share of each training window used for early stopping.
    pub early_stop_frac: f64,
    /// Date anchors of the final fold; both or neither.
    pub final_train_end: Option<NaiveDate>,
    pub final_test_end: Option<NaiveDate>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            regime: "low3".into(),
            encoding: None,
            folds: 5,
            layers: (1..=6).collect(),
            qubits: (2..=6).collect(),
            ann_hidden: None,
            early_stop_frac: 0.15,
            final_train_end: None,
            final_test_end: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TradeModel {
    Lstm,
    Qlstm,
}

impl TradeModel {
    fn name(self) -> &'static str {
        match self {
            TradeModel::Lstm => "LSTM",
            TradeModel::Qlstm => "QLSTM",
        }
    }
}

/// Where the final backtest of a trading regime runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BacktestWindow {
    /// The `test_days` sessions that follow the regime end.
    #[default]
    After,
    /// The threshold-calibration slice itself (in-sample for the thresholds).
    Calibration,
}

/// Training, selection and calibration use the samples labelled in
/// `[start, end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeWindow {
    pub name: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TradeConfig {
    /// Traded series; defaults to the first data ticker.
    pub ticker: Option<String>,
    pub models: Vec<TradeModel>,
    pub hidden: Vec<usize>,
    pub layers: Vec<usize>,
    pub regimes: Vec<RegimeWindow>,
    pub backtest: BacktestWindow,
    pub test_days: usize,
    pub grid_step: f64,
    pub fee: f64,
    pub fee_mode: FeeMode,
    pub risk_free: f64,
}

impl Default for TradeConfig {
    fn default() -> Self {
        Self {
            ticker: None,
            models: vec![TradeModel::Lstm, TradeModel::Qlstm],
            hidden: vec![3, 4, 5],
            layers: (2..=6).collect(),
            regimes: Vec::new(),
            backtest: BacktestWindow::After,
            test_days: 252,
            grid_step: 0.05,
            fee: backtest::DEFAULT_FEE,
            fee_mode: FeeMode::PerUnit,
            risk_free: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolatilityConfig {
    pub models: Vec<VolModel>,
    pub initial_train: usize,
    pub retrain_every: usize,
    pub max_window: usize,
    pub search_budget: usize,
    pub qubits: Vec<usize>,
    pub layers: Vec<usize>,
    pub amplitude_dim: usize,
    pub classical_lags: [usize; 2],
    pub validation_frac: f64,
    /// Model every DM test compares against.
    pub baseline: String,
}

impl Default for VolatilityConfig {
    fn default() -> Self {
        let d = VolConfig::default();
        Self {
            models: d.models,
            initial_train: d.plan.initial_train,
            retrain_every: d.plan.retrain_every,
            max_window: d.plan.max_window,
            search_budget: d.search_budget,
            qubits: d.space.qubits,
            layers: d.space.layers,
            amplitude_dim: d.amplitude_dim,
            classical_lags: [d.classical_lags.0, d.classical_lags.1],
            validation_frac: d.validation_frac,
            baseline: VolModel::Garch.name().into(),
        }
    }
}

impl VolatilityConfig {
    pub fn to_vol_config(&self, seed: u64) -> VolConfig {
        VolConfig {
            plan: ExpandingPlan {
                initial_train: self.initial_train,
                retrain_every: self.retrain_every,
                max_window: self.max_window,
            },
            models: self.models.clone(),
            classical_lags: (self.classical_lags[0], self.classical_lags[1]),
            amplitude_dim: self.amplitude_dim,
            search_budget: self.search_budget,
            space: SearchSpace {
                qubits: self.qubits.clone(),
                layers: self.layers.clone(),
                ..SearchSpace::default()
            },
            validation_frac: self.validation_frac,
            seed,
            ..VolConfig::default()
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub study: Study,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub classify: ClassifyConfig,
    #[serde(default)]
    pub trade: TradeConfig,
    #[serde(default)]
    pub volatility: VolatilityConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    /// Parses TOML; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output)
    }

    /// Hex SHA-256 of the config as JSON with the output directory blanked,
    /// so redirecting the output keeps the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([("seed".to_string(), self.seed)])
    }

    pub fn regime(&self) -> Result<FeatureRegime> {
        let r: FeatureRegime = self
            .classify
            .regime
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))?;
        match r {
            FeatureRegime::Low3 | FeatureRegime::Mid7 | FeatureRegime::High64 => Ok(r),
            other => Err(Error::Config(format!("`{other}` is not a classification regime"))),
        }
    }

    fn trade_ticker(&self) -> Result<&str> {
        self.trade
            .ticker
            .as_deref()
            .or_else(|| self.data.tickers.first().map(String::as_str))
            .ok_or_else(|| Error::Config("no ticker to trade".into()))
    }

    /// Checks shapes and value ranges. File existence is a data check and
    /// happens when series are loaded.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.tickers.is_empty() {
            return bad("data.tickers is empty".into());
        }
        self.train
            .to_train_config(self.seed)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        match self.study {
            Study::Classify => {
                let c = &self.classify;
                self.regime()?;
                if c.folds < 2 {
                    return bad("classify.folds must be at least 2".into());
                }
                if c.layers.is_empty() {
                    return bad("classify.layers is empty".into());
                }
                if !(0.0 < c.early_stop_frac && c.early_stop_frac < 0.5) {
                    return bad("classify.early_stop_frac must lie in (0, 0.5)".into());
                }
                if c.final_train_end.is_some() != c.final_test_end.is_some() {
                    return bad("set both or neither of classify.final_train_end / final_test_end".into());
                }
                if let Some(h) = &c.ann_hidden {
                    if h.is_empty() || h.iter().any(|l| l.is_empty() || l.contains(&0)) {
                        return bad("classify.ann_hidden needs non-empty layouts of positive widths".into());
                    }
                }
            }
            Study::Trade => {
                let t = &self.trade;
                self.trade_ticker()?;
                if t.regimes.is_empty() {
                    return bad("trade.regimes is empty".into());
                }
                if t.models.is_empty() || t.hidden.is_empty() || t.layers.is_empty() {
                    return bad("trade.models, trade.hidden and trade.layers must be non-empty".into());
                }
                if t.regimes.iter().any(|r| r.end <= r.start) {
                    return bad("every trade regime needs start < end".into());
                }
                if t.test_days < 2 || !(t.grid_step > 0.0) || !(t.fee >= 0.0) {
                    return bad("trade needs test_days >= 2, grid_step > 0, fee >= 0".into());
                }
            }
            Study::Volatility => {
                let v = &self.volatility;
                v.to_vol_config(self.seed)
                    .validate()
                    .map_err(|e| Error::Config(e.to_string()))?;
                if !v.models.iter().any(|m| m.name() == v.baseline) {
                    log::warn!(
                        "volatility baseline `{}` is not among the models; DM tests are skipped",
                        v.baseline
                    );
                }
            }
        }
        Ok(())
    }

    fn series_path(&self, ticker: &str) -> PathBuf {
        let dir = self.resolve(&self.data.dir);
        let direct = dir.join(format!("{ticker}.csv"));
        if direct.exists() {
            return direct;
        }
        dir.join(format!("{}.csv", ticker.trim_start_matches('^')))
    }

    /// Loads one series; missing or unreadable files are data errors.
    pub fn load_series(&self, ticker: &str) -> Result<PriceSeries> {
        let path = self.series_path(ticker);
        if !path.exists() {
            return Err(Error::Data(format!("no price file for {ticker} at {}", path.display())));
        }
        let load = load_price_csv(&path, self.data.price_field).map_err(|e| match e {
            Error::Io { path, source } => Error::Data(format!("{}: {source}", path.display())),
            other => other,
        })?;
        if load.dropped > 0 {
            log::warn!("{ticker}: dropped {} malformed rows", load.dropped);
        }
        let mut s = load.series;
        s.ticker = ticker.to_string();
        Ok(s)
    }

    fn market_inputs(&self, ticker: &str) -> Result<MarketInputs> {
        let others = self
            .data
            .indices
            .iter()
            .map(|t| self.load_series(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(MarketInputs {
            target: self.load_series(ticker)?,
            others,
            price_field: self.data.price_field,
        })
    }
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Null => String::new(),
            Cell::Bool(b) => b.to_string(),
            Cell::Int(i) => i.to_string(),
            // variance-scale errors would round to zero at four decimals
            Cell::Float(v) if *v != 0.0 && v.abs() < 1e-3 => format!("{v:.4e}"),
            Cell::Float(v) => format!("{v:.4}"),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        if v.is_finite() {
            Cell::Float(v)
        } else {
            Cell::Null
        }
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Null, Cell::from)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub study: Study,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub table: Table,
    /// Study-specific selections, search scores and the full config.
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Writes `dir/<stem>.csv` (floats at 4 decimals, seeds and hash in leading
/// `#` comment lines) or `dir/<stem>.json` (full precision).
pub fn emit_report(report: &Report, dir: &Path, stem: &str, format: ReportFormat) -> Result<PathBuf> {
    if report.table.rows.is_empty() {
        return Err(Error::invalid("report has no rows"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = match format {
        ReportFormat::Csv => dir.join(format!("{stem}.csv")),
        ReportFormat::Json => dir.join(format!("{stem}.json")),
    };
    let bytes = match format {
        ReportFormat::Csv => report_csv(report)?,
        ReportFormat::Json => {
            let mut b = serde_json::to_vec_pretty(report)?;
            b.push(b'\n');
            b
        }
    };
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn report_csv(report: &Report) -> Result<Vec<u8>> {
    let mut out = format!("# study: {}\n# config_sha256: {}\n", report.study, report.config_hash);
    for (k, v) in &report.seeds {
        out.push_str(&format!("# {k}: {v}\n"));
    }
    let mut w = csv::Writer::from_writer(out.into_bytes());
    w.write_record(&report.table.columns)?;
    for row in &report.table.rows {
        w.write_record(row.iter().map(Cell::csv))?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv buffer: {e}")))
}

pub fn load_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// execution plan and audits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub study: Study,
    pub config_hash: String,
    pub seed: u64,
    pub output: PathBuf,
    pub steps: Vec<String>,
    /// Number of model fits the run will perform.
    pub fits: usize,
}

impl fmt::Display for ExecutionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "study:  {}", self.study)?;
        writeln!(f, "config: sha256 {}", self.config_hash)?;
        writeln!(f, "seed:   {}", self.seed)?;
        writeln!(f, "output: {}", self.output.display())?;
        for s in &self.steps {
            writeln!(f, "  - {s}")?;
        }
        write!(f, "model fits: {}", self.fits)
    }
}

/// Validates the config, loads the data, builds every dataset and split,
/// and runs the look-ahead audits without training anything.
pub fn plan(cfg: &RunConfig) -> Result<ExecutionPlan> {
    cfg.validate()?;
    let mut steps = Vec::new();
    let mut fits = 0;
    match cfg.study {
        Study::Classify => {
            for ticker in &cfg.data.tickers {
                let prep = ClassifyPrep::new(cfg, ticker)?;
                let (q, a) = (prep.qnn_grid.len(), prep.ann_grid.len());
                let k = cfg.classify.folds;
                fits += (q + a) * (k - 1) + 2;
                let last = prep.plan.folds.last().expect("at least two folds");
                steps.push(format!(
                    "{ticker}: {} rows x {} features ({}), {k} folds, final train {} / test {} rows, \
                     {q} QNN + {a} ANN candidates, audit ok",
                    prep.ds.len(),
                    prep.ds.features.n_cols(),
                    cfg.classify.regime,
                    last.train.len(),
                    last.test.len()
                ));
            }
        }
        Study::Trade => {
            let series = cfg.load_series(cfg.trade_ticker()?)?;
            let windows = trading_windows(&series, cfg.data.price_field)?;
            let per_regime: usize = cfg
                .trade
                .models
                .iter()
                .map(|_| cfg.trade.hidden.len() * cfg.trade.layers.len() + 1)
                .sum();
            for r in &cfg.trade.regimes {
                let prep = TradePrep::new(cfg, &windows, r)?;
                fits += per_regime;
                steps.push(format!(
                    "{} {}: regime {}..{} ({} samples: train {}, early-stop {}, select {}, calibrate {}), \
                     backtest {} sessions {}..{}, audit ok",
                    series.ticker,
                    r.name,
                    r.start,
                    r.end,
                    prep.regime.len(),
                    prep.phases.train.len(),
                    prep.phases.early_stop.len(),
                    prep.phases.model_select.len(),
                    prep.phases.calibrate.len(),
                    prep.test.len(),
                    prep.test.label_dates[0],
                    prep.test.label_dates[prep.test.len() - 1]
                ));
            }
        }
        Study::Volatility => {
            let vc = cfg.volatility.to_vol_config(cfg.seed);
            let n_svr = vc
                .models
                .iter()
                .filter(|m| !matches!(m, VolModel::Garch | VolModel::Persistence))
                .count();
            for ticker in &cfg.data.tickers {
                let series = cfg.load_series(ticker)?;
                let (p, q) = vc.max_lags();
                let design = VolDesign::new(&series, cfg.data.price_field, p, q)?;
                let segments = vc.plan.segments(design.len())?;
                design.audit(&segments)?;
                fits += segments.len() * (n_svr * (vc.search_budget + 1) + 1);
                steps.push(format!(
                    "{ticker}: {} forecast rows, {} refits, {} test rows, models [{}], audit ok",
                    design.len(),
                    segments.len(),
                    segments.iter().map(|s| s.test.len()).sum::<usize>(),
                    vc.models.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
                ));
            }
        }
    }
    Ok(ExecutionPlan {
        study: cfg.study,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        output: cfg.output_dir(),
        steps,
        fits,
    })
}

// ---------------------------------------------------------------------------
// running
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub report: Report,
    /// Every file written, report files first.
    pub files: Vec<PathBuf>,
}

/// Runs the configured study and writes `<study>.csv`, `<study>.json` and
/// the per-ticker or per-regime detail CSVs into the output directory.
pub fn run_study(cfg: &RunConfig) -> Result<StudyOutcome> {
    cfg.validate()?;
    let out = cfg.output_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let (table, details, extra) = match cfg.study {
        Study::Classify => run_classify(cfg)?,
        Study::Trade => run_trade(cfg, &out)?,
        Study::Volatility => run_volatility(cfg, &out)?,
    };
    let report = Report {
        study: cfg.study,
        config_hash: cfg.hash(),
        seeds: cfg.seeds(),
        table,
        details: serde_json::json!({
            "config": cfg,
            "results": details,
        }),
    };
    let mut files = vec![
        emit_report(&report, &out, cfg.study.name(), ReportFormat::Csv)?,
        emit_report(&report, &out, cfg.study.name(), ReportFormat::Json)?,
    ];
    files.extend(extra);
    Ok(StudyOutcome { report, files })
}

type StudyParts = (Table, serde_json::Value, Vec<PathBuf>);

fn auc_or_half(probs: &[f64], y: &[f64]) -> Result<f64> {
    Ok(metrics::auc(probs, y)?.unwrap_or(0.5))
}

fn fit(
    spec: &ModelSpec,
    x: &[Vec<f64>],
    y: &[f64],
    xe: &[Vec<f64>],
    ye: &[f64],
    tc: &TrainConfig,
) -> Result<TrainedModel> {
    train(spec, Samples::new(x, y)?, Samples::new(xe, ye)?, tc)
}

// --- classification --------------------------------------------------------

struct FoldData {
    x_fit: Vec<Vec<f64>>,
    y_fit: Vec<f64>,
    x_es: Vec<Vec<f64>>,
    y_es: Vec<f64>,
    x_test: Vec<Vec<f64>>,
    y_test: Vec<f64>,
}

struct ClassifyPrep {
    ds: LabeledDataset,
    plan: SplitPlan,
    folds: Vec<FoldData>,
    qnn_grid: Vec<ModelSpec>,
    ann_grid: Vec<ModelSpec>,
}

impl ClassifyPrep {
    fn new(cfg: &RunConfig, ticker: &str) -> Result<Self> {
        let c = &cfg.classify;
        let inputs = cfg.market_inputs(ticker)?;
        let FeatureSet::Tabular(ds) = build_feature_set(cfg.regime()?, &inputs)? else {
            return Err(Error::Config("classification needs a tabular regime".into()));
        };
        ds.audit_leakage()?;
        let plan = match (c.final_train_end, c.final_test_end) {
            (Some(a), Some(b)) => walkforward_by_dates(&ds.features.dates, c.folds, a, b)?,
            _ => make_walkforward_splits(ds.len(), c.folds, None)?,
        };
        if !plan.is_chronological() {
            return Err(Error::data("walk-forward folds are not chronological"));
        }
        let mut folds = Vec::with_capacity(plan.folds.len());
        for f in &plan.folds {
            let es_len = ((f.train.len() as f64 * c.early_stop_frac).floor() as usize).max(1);
            if f.train.len() < es_len + 10 {
                return Err(Error::data(format!(
                    "{ticker}: fold training window of {} rows is too short",
                    f.train.len()
                )));
            }
            let split = f.train.end - es_len;
            let scaler = minmax_fit(&ds.rows()[f.train.clone()])?;
            let x = |r: std::ops::Range<usize>| scaler.apply(&ds.rows()[r]);
            let y = |r: std::ops::Range<usize>| ds.y[r].to_vec();
            folds.push(FoldData {
                x_fit: x(f.train.start..split),
                y_fit: y(f.train.start..split),
                x_es: x(split..f.train.end),
                y_es: y(split..f.train.end),
                x_test: x(f.test.clone()),
                y_test: y(f.test.clone()),
            });
        }
        let d = ds.features.n_cols();
        let encoding = c
            .encoding
            .unwrap_or(if d <= 7 { Encoding::Angle } else { Encoding::Amplitude });
        let qnn_grid = qnn_grid(encoding, d, &c.layers, &c.qubits);
        let ann_grid = match &c.ann_hidden {
            Some(layouts) => layouts
                .iter()
                .map(|h| {
                    let mut sizes = vec![d];
                    sizes.extend(h);
                    sizes.push(1);
                    ModelSpec::Ann(AnnSpec::new(&sizes))
                })
                .collect(),
            None => vec![ModelSpec::Ann(
                ann_baseline(d).map_err(|e| Error::Config(e.to_string()))?,
            )],
        };
        for s in qnn_grid.iter().chain(&ann_grid) {
            s.validate().map_err(|e| Error::Config(format!("{}: {e}", s.label())))?;
        }
        Ok(Self {
            ds,
            plan,
            folds,
            qnn_grid,
            ann_grid,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
struct ClassifyPick {
    ticker: String,
    family: &'static str,
    model: ModelSpec,
    label: String,
    n_params: usize,
    mean_val_auc: f64,
    grid_scores: BTreeMap<String, Option<f64>>,
    final_epochs: usize,
    best_epoch: usize,
}

fn run_classify(cfg: &RunConfig) -> Result<StudyParts> {
    let tc = cfg.train.to_train_config(cfg.seed);
    let per_ticker = par::map_indexed(cfg.data.tickers.len(), |i| {
        classify_ticker(cfg, &cfg.data.tickers[i], &tc)
    });
    let mut table = Table::new(&[
        "Ticker",
        "Model",
        "Arch.",
        "Layers",
        "Hyb.",
        "MQR",
        "Accuracy",
        "AUC",
        "Precision",
        "Recall",
        "Qubits",
        "Params",
        "Val. AUC",
    ]);
    let mut details = Vec::new();
    for r in per_ticker {
        let (rows, picks) = r?;
        for row in rows {
            table.push(row);
        }
        details.extend(picks);
    }
    Ok((table, serde_json::to_value(details)?, Vec::new()))
}

fn classify_ticker(cfg: &RunConfig, ticker: &str, tc: &TrainConfig) -> Result<(Vec<Vec<Cell>>, Vec<ClassifyPick>)> {
    let prep = ClassifyPrep::new(cfg, ticker)?;
    let k = prep.folds.len();
    let evaluate = |spec: &ModelSpec| -> Result<f64> {
        let mut total = 0.0;
        for f in &prep.folds[..k - 1] {
            let m = fit(spec, &f.x_fit, &f.y_fit, &f.x_es, &f.y_es, tc)?;
            total += auc_or_half(&m.predict(&f.x_test)?, &f.y_test)?;
        }
        Ok(total / (k - 1) as f64)
    };
    let last = &prep.folds[k - 1];
    let mut rows = Vec::new();
    let mut picks = Vec::new();
    for (family, grid) in [("ANN", &prep.ann_grid), ("QNN", &prep.qnn_grid)] {
        let choice = architecture_search(grid, evaluate)?;
        let m = fit(&choice.best, &last.x_fit, &last.y_fit, &last.x_es, &last.y_es, tc)?;
        let probs = m.predict(&last.x_test)?;
        let rep = metrics::classification_metrics(&probs, &last.y_test, 0.5)?;
        let (arch, layers, hyb, mqr, qubits) = match &choice.best {
            ModelSpec::Qnn(s) => (
                Cell::from(s.arch.to_string()),
                Cell::from(s.layers),
                Cell::from(s.arch.is_hybrid()),
                Cell::from(s.arch.is_mq()),
                Cell::from(s.n_qubits),
            ),
            _ => (Cell::Null, Cell::Null, Cell::Null, Cell::Null, Cell::Null),
        };
        rows.push(vec![
            ticker.into(),
            family.into(),
            arch,
            layers,
            hyb,
            mqr,
            rep.accuracy.into(),
            rep.auc.into(),
            rep.precision.into(),
            rep.recall.into(),
            qubits,
            choice.best.n_params().into(),
            choice.best_auc.into(),
        ]);
        picks.push(ClassifyPick {
            ticker: ticker.to_string(),
            family,
            label: choice.best.label(),
            n_params: choice.best.n_params(),
            mean_val_auc: choice.best_auc,
            grid_scores: grid
                .iter()
                .map(|s| s.label())
                .zip(choice.scores.iter().copied())
                .collect(),
            model: choice.best,
            final_epochs: m.history.epochs.len(),
            best_epoch: m.history.best_epoch,
        });
    }
    log::info!("{ticker}: classification done");
    Ok((rows, picks))
}

// --- trading ---------------------------------------------------------------

fn trading_windows(series: &PriceSeries, field: PriceField) -> Result<WindowTensor> {
    match build_feature_set(FeatureRegime::Trading10x4, &MarketInputs::single(series.clone(), field))? {
        FeatureSet::Windows(w) => {
            w.audit_leakage()?;
            Ok(w)
        }
        FeatureSet::Tabular(_) => unreachable!("the trading regime yields windows"),
    }
}

struct TradePrep {
    regime: WindowTensor,
    test: WindowTensor,
    phases: RegimePhases,
}

impl TradePrep {
    fn new(cfg: &RunConfig, windows: &WindowTensor, r: &RegimeWindow) -> Result<Self> {
        let raw = windows.restrict_label_dates(r.start, r.end);
        let phases = make_regime_phase_splits(raw.len()).map_err(|e| Error::data(format!("regime {}: {e}", r.name)))?;
        let scaler = raw.fit_scaler(phases.train.clone())?;
        let regime = raw.scaled(&scaler);
        let test = match cfg.trade.backtest {
            BacktestWindow::Calibration => {
                let first = regime.label_dates[phases.calibrate.start];
                regime.restrict_label_dates(first, r.end)
            }
            BacktestWindow::After => {
                let after = windows.restrict_label_dates(r.end.succ_opt().expect("date in range"), NaiveDate::MAX);
                if after.len() < cfg.trade.test_days {
                    return Err(Error::data(format!(
                        "regime {}: {} sessions after {} but test_days = {}",
                        r.name,
                        after.len(),
                        r.end,
                        cfg.trade.test_days
                    )));
                }
                let last = after.label_dates[cfg.trade.test_days - 1];
                after.restrict_label_dates(after.label_dates[0], last).scaled(&scaler)
            }
        };
        Ok(Self { regime, test, phases })
    }
}

#[derive(Debug, Clone, Serialize)]
struct TradePick {
    regime: String,
    model: ModelSpec,
    label: String,
    select_auc: f64,
    grid_scores: BTreeMap<String, Option<f64>>,
    calibration: backtest::Calibration,
    trades: usize,
    final_equity: f64,
}

fn run_trade(cfg: &RunConfig, out: &Path) -> Result<StudyParts> {
    let t = &cfg.trade;
    let tc = cfg.train.to_train_config(cfg.seed);
    let series = cfg.load_series(cfg.trade_ticker()?)?;
    let windows = trading_windows(&series, cfg.data.price_field)?;
    let mut table = Table::new(&[
        "Regime",
        "Model",
        "Hidden",
        "Depth",
        "Params",
        "Test AUC",
        "ARC",
        "ASD",
        "Sharpe",
        "Sortino",
        "MaxDD",
        "Tau long",
        "Tau short",
        "Trades",
    ]);
    let mut details = Vec::new();
    let mut files = Vec::new();
    for r in &t.regimes {
        let prep = TradePrep::new(cfg, &windows, r)?;
        let (ph, reg) = (&prep.phases, &prep.regime);
        let xs = |rg: &std::ops::Range<usize>| reg.samples[rg.clone()].to_vec();
        let ys = |rg: &std::ops::Range<usize>| reg.labels[rg.clone()].to_vec();
        let (x_tr, y_tr) = (xs(&ph.train), ys(&ph.train));
        let (x_es, y_es) = (xs(&ph.early_stop), ys(&ph.early_stop));
        let (x_ms, y_ms) = (xs(&ph.model_select), ys(&ph.model_select));
        let x_cal = xs(&ph.calibrate);
        let r_cal = &reg.next_returns[ph.calibrate.clone()];
        let test = &prep.test;

        for &family in &t.models {
            let grid = match family {
                TradeModel::Lstm => lstm_grid(reg.n_features, reg.window, &t.hidden, &t.layers),
                TradeModel::Qlstm => qlstm_grid(reg.n_features, reg.window, &t.hidden, &t.layers),
            };
            for s in &grid {
                s.validate().map_err(|e| Error::Config(format!("{}: {e}", s.label())))?;
            }
            let choice = architecture_search(&grid, |spec| {
                let m = fit(spec, &x_tr, &y_tr, &x_es, &y_es, &tc)?;
                auc_or_half(&m.predict(&x_ms)?, &y_ms)
            })?;
            let m = fit(&choice.best, &x_tr, &y_tr, &x_es, &y_es, &tc)?;
            let cal = backtest::calibrate_thresholds(&m.predict(&x_cal)?, r_cal, t.grid_step, t.fee, t.fee_mode)?;
            let probs = m.predict(&test.samples)?;
            let signals = backtest::threshold_signals(&probs, cal.thresholds);
            let curve =
                backtest::simulate(&signals, &test.next_returns, t.fee, t.fee_mode)?.with_dates(&test.label_dates)?;
            let tm = metrics::trading_metrics(&curve.equity, PERIODS_PER_YEAR, t.risk_free)?;
            let (hidden, depth) = match &choice.best {
                ModelSpec::Lstm(s) => (s.hidden, s.layers),
                ModelSpec::Qlstm(s) => (s.hidden, s.layers),
                _ => unreachable!("trade grids hold sequence models"),
            };
            let path = out.join(format!("equity_{}_{}.csv", r.name, family.name().to_ascii_lowercase()));
            curve.write_csv(&path)?;
            files.push(path);
            table.push(vec![
                r.name.as_str().into(),
                family.name().into(),
                hidden.into(),
                depth.into(),
                choice.best.n_params().into(),
                metrics::auc(&probs, &test.labels)?.into(),
                tm.arc.into(),
                tm.asd.into(),
                tm.sharpe.into(),
                tm.sortino.into(),
                tm.max_drawdown.into(),
                cal.thresholds.long.into(),
                cal.thresholds.short.into(),
                curve.trades().into(),
            ]);
            details.push(TradePick {
                regime: r.name.clone(),
                label: choice.best.label(),
                select_auc: choice.best_auc,
                grid_scores: grid
                    .iter()
                    .map(|s| s.label())
                    .zip(choice.scores.iter().copied())
                    .collect(),
                model: choice.best,
                calibration: cal,
                trades: curve.trades(),
                final_equity: curve.final_equity(),
            });
        }

        let bh = backtest::buy_and_hold(&test.next_returns, t.fee)?.with_dates(&test.label_dates)?;
        let tm = metrics::trading_metrics(&bh.equity, PERIODS_PER_YEAR, t.risk_free)?;
        let path = out.join(format!("equity_{}_buy_and_hold.csv", r.name));
        bh.write_csv(&path)?;
        files.push(path);
        table.push(vec![
            r.name.as_str().into(),
            "Buy&Hold".into(),
            Cell::Null,
            Cell::Null,
            Cell::Null,
            Cell::Null,
            tm.arc.into(),
            tm.asd.into(),
            tm.sharpe.into(),
            tm.sortino.into(),
            tm.max_drawdown.into(),
            Cell::Null,
            Cell::Null,
            bh.trades().into(),
        ]);
        log::info!("regime {} done", r.name);
    }
    Ok((table, serde_json::to_value(details)?, files))
}

// --- volatility ------------------------------------------------------------

fn run_volatility(cfg: &RunConfig, out: &Path) -> Result<StudyParts> {
    let vc = cfg.volatility.to_vol_config(cfg.seed);
    let tickers = &cfg.data.tickers;
    let runs = par::map_indexed(tickers.len(), |i| {
        let series = cfg.load_series(&tickers[i])?;
        volstudy::run_ticker(&series, cfg.data.price_field, &vc)
    });
    let mut table = Table::new(&["Ticker", "Model", "QLIKE", "MSE", "MAE", "R2", "DirAcc", "DM", "DM-p"]);
    let mut details = serde_json::Map::new();
    let mut files = Vec::new();
    for (ticker, run) in tickers.iter().zip(runs) {
        let f = run?;
        let path = out.join(format!("forecasts_{ticker}.csv"));
        f.write_csv(&path)?;
        files.push(path);
        let summary = volstudy::summarize(&f, &cfg.volatility.baseline)?;
        // rows follow the configured model order
        for m in &vc.models {
            let Some(s) = summary.get(m.name()) else {
                continue;
            };
            table.push(vec![
                ticker.as_str().into(),
                m.name().into(),
                s.qlike.into(),
                s.mse.into(),
                s.mae.into(),
                s.r2.into(),
                s.dir_acc.into(),
                s.dm_stat.into(),
                s.dm_p.into(),
            ]);
        }
        details.insert(
            ticker.clone(),
            serde_json::json!({ "summary": summary, "selections": f.selections }),
        );
    }
    Ok((table, serde_json::Value::Object(details), files))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(rows: usize) -> Report {
        let mut table = Table::new(&["Ticker", "AUC", "Layers", "MQR", "Note"]);
        for i in 0..rows {
            table.push(vec![
                "SYNA".into(),
                (0.1 + i as f64 / 3.0).into(),
                Cell::Int(i as i64),
                Cell::Bool(i % 2 == 0),
                Cell::Null,
            ]);
        }
        Report {
            study: Study::Classify,
            config_hash: "ab".repeat(32),
            seeds: BTreeMap::from([("seed".into(), 7)]),
            table,
            details: serde_json::json!({"k": [1.0 / 3.0]}),
        }
    }

    #[test]
    fn one_row_csv_has_header_and_one_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = emit_report(&report(1), dir.path(), "r", ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data, vec!["Ticker,AUC,Layers,MQR,Note", "SYNA,0.1000,0,true,"]);
        assert!(text.contains("# seed: 7"));
    }

    #[test]
    fn emission_is_byte_stable_and_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(4);
        for fmt in [ReportFormat::Csv, ReportFormat::Json] {
            let a = std::fs::read(emit_report(&r, dir.path(), "a", fmt).unwrap()).unwrap();
            let b = std::fs::read(emit_report(&r, dir.path(), "b", fmt).unwrap()).unwrap();
            assert_eq!(a, b);
        }
        let back = load_report(&dir.path().join("a.json")).unwrap();
        assert_eq!(back, r);
        assert!(emit_report(&report(0), dir.path(), "e", ReportFormat::Csv).is_err());
    }

    #[test]
    fn config_parsing_and_hash() {
        let text = r#"
            study = "classify"
            seed = 3
            output = "out"
            [data]
            dir = "data"
            tickers = ["SYNA"]
            [classify]
            folds = 2
            layers = [1, 2]
        "#;
        let cfg = RunConfig::from_toml_str(text, Path::new("/tmp/x")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.output_dir(), PathBuf::from("/tmp/x/out"));
        let mut other = cfg.clone();
        other.output = PathBuf::from("/elsewhere");
        assert_eq!(cfg.hash(), other.hash());
        other.seed = 4;
        assert_ne!(cfg.hash(), other.hash());

        let typo = text.replace("folds", "fold");
        assert!(matches!(
            RunConfig::from_toml_str(&typo, Path::new(".")),
            Err(Error::Config(_))
        ));
        let mut bad = cfg.clone();
        bad.classify.folds = 1;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        bad = cfg.clone();
        bad.classify.regime = "trading10x4".into();
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let cfg = RunConfig::from_toml_str(
            "study = \"volatility\"\n[data]\ndir = \"nowhere\"\ntickers = [\"ZZZ\"]\n",
            Path::new("/nonexistent"),
        )
        .unwrap();
        assert!(matches!(plan(&cfg), Err(Error::Data(_))));
    }
}
