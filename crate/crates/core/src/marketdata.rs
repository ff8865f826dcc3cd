//! Daily price ingestion, calendar alignment, and return series.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// Column names of the price CSV schema, in file order.
pub const CSV_COLUMNS: [&str; 7] = ["date", "open", "high", "low", "close", "adj_close", "volume"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: f64,
}

impl PriceBar {
    /// `high >= max(open, close)`, `low <= min(open, close)`, all prices
    /// finite and positive, volume non-negative.
    pub fn is_valid(&self) -> bool {
        let prices = [self.open, self.high, self.low, self.close, self.adj_close];
        prices.iter().all(|p| p.is_finite() && *p > 0.0)
            && self.volume.is_finite()
            && self.volume >= 0.0
            && self.high >= self.open.max(self.close)
            && self.low <= self.open.min(self.close)
    }

    pub fn price(&self, field: PriceField) -> f64 {
        match field {
            PriceField::Close => self.close,
            PriceField::AdjClose => self.adj_close,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceField {
    Close,
    #[default]
    AdjClose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnKind {
    Log,
    Simple,
}

/// Date-ordered daily bars for one ticker. Dates are strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub ticker: String,
    bars: Vec<PriceBar>,
}

impl PriceSeries {
    /// Sorts the bars and rejects duplicate dates.
    pub fn new(ticker: impl Into<String>, mut bars: Vec<PriceBar>) -> Result<Self> {
        let ticker = ticker.into();
        if bars.is_empty() {
            return Err(Error::data(format!("{ticker}: no bars")));
        }
        bars.sort_by_key(|b| b.date);
        if let Some(w) = bars.windows(2).find(|w| w[0].date == w[1].date) {
            return Err(Error::data(format!("{ticker}: duplicate date {}", w[0].date)));
        }
        Ok(Self { ticker, bars })
    }

    pub fn bars(&self) -> &[PriceBar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.bars.iter().map(|b| b.date).collect()
    }

    pub fn prices(&self, field: PriceField) -> Vec<f64> {
        self.bars.iter().map(|b| b.price(field)).collect()
    }

    /// Restricts the series to bars whose date is in `keep`.
    pub fn restrict_to(&self, keep: &BTreeSet<NaiveDate>) -> PriceSeries {
        PriceSeries {
            ticker: self.ticker.clone(),
            bars: self.bars.iter().filter(|b| keep.contains(&b.date)).copied().collect(),
        }
    }

    /// Bars with `from <= date <= to`.
    pub fn between(&self, from: NaiveDate, to: NaiveDate) -> PriceSeries {
        PriceSeries {
            ticker: self.ticker.clone(),
            bars: self
                .bars
                .iter()
                .filter(|b| b.date >= from && b.date <= to)
                .copied()
                .collect(),
        }
    }
}

/// Result of reading a price CSV: the cleaned series plus the number of rows
/// that were discarded (missing, non-numeric, or invariant-violating).
#[derive(Debug, Clone)]
pub struct CsvLoad {
    pub series: PriceSeries,
    pub dropped: usize,
}

/// Loads a price CSV. The ticker is taken from the file stem.
///
/// `price_field` names the column the caller intends to model; rows where
/// it (or any other schema column) is missing are dropped and counted.
pub fn load_price_csv(path: &Path, price_field: PriceField) -> Result<CsvLoad> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ticker = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "UNKNOWN".to_string());
    read_price_csv(file, &ticker, price_field)
}

pub fn read_price_csv<R: Read>(reader: R, ticker: &str, price_field: PriceField) -> Result<CsvLoad> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::data(format!("{ticker}: missing column `{name}`")))?;
    }

    let mut bars = Vec::new();
    let mut dropped = 0usize;
    for record in rdr.records() {
        let record = record?;
        match parse_row(&record, &idx) {
            Some(bar) if bar.is_valid() && bar.price(price_field) > 0.0 => bars.push(bar),
            _ => dropped += 1,
        }
    }
    if bars.is_empty() {
        return Err(Error::data(format!("{ticker}: no valid rows after cleaning")));
    }
    if dropped > 0 {
        log::info!("{ticker}: dropped {dropped} incomplete rows");
    }
    Ok(CsvLoad {
        series: PriceSeries::new(ticker, bars)?,
        dropped,
    })
}

fn parse_row(record: &csv::StringRecord, idx: &[usize; 7]) -> Option<PriceBar> {
    let field = |i: usize| record.get(idx[i]).filter(|s| !s.is_empty());
    let num = |i: usize| field(i)?.parse::<f64>().ok().filter(|v| v.is_finite());
    Some(PriceBar {
        date: NaiveDate::parse_from_str(field(0)?, "%Y-%m-%d").ok()?,
        open: num(1)?,
        high: num(2)?,
        low: num(3)?,
        close: num(4)?,
        adj_close: num(5)?,
        volume: num(6)?,
    })
}

/// Writes bars in the canonical seven-column schema.
pub fn write_price_csv(path: &Path, series: &PriceSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_COLUMNS)?;
    for b in series.bars() {
        w.write_record([
            b.date.format("%Y-%m-%d").to_string(),
            b.open.to_string(),
            b.high.to_string(),
            b.low.to_string(),
            b.close.to_string(),
            b.adj_close.to_string(),
            b.volume.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Restricts every series to the intersection of all date sets.
pub fn align_calendars(series: &[PriceSeries]) -> Result<Vec<PriceSeries>> {
    let first = series
        .first()
        .ok_or_else(|| Error::invalid("align_calendars needs at least one series"))?;
    let mut common: BTreeSet<NaiveDate> = first.bars.iter().map(|b| b.date).collect();
    for s in &series[1..] {
        let dates: BTreeSet<NaiveDate> = s.bars.iter().map(|b| b.date).collect();
        common = common.intersection(&dates).copied().collect();
    }
    if common.is_empty() {
        return Err(Error::data("calendars have no common dates"));
    }
    Ok(series.iter().map(|s| s.restrict_to(&common)).collect())
}

/// Returns dated at the later of each pair of consecutive bars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
    pub kind: ReturnKind,
}

impl ReturnSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn compute_returns(series: &PriceSeries, kind: ReturnKind, field: PriceField) -> Result<ReturnSeries> {
    let prices = series.prices(field);
    let values = returns_from_prices(&prices, kind)?;
    Ok(ReturnSeries {
        dates: series.bars.iter().skip(1).map(|b| b.date).collect(),
        values,
        kind,
    })
}

/// `ln(P_t / P_{t-1})` or `P_t / P_{t-1} - 1` for consecutive prices.
pub fn returns_from_prices(prices: &[f64], kind: ReturnKind) -> Result<Vec<f64>> {
    ensure_len(2, prices.len())?;
    if let Some(p) = prices.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::invalid(format!("non-positive price {p}")));
    }
    Ok(prices
        .windows(2)
        .map(|w| match kind {
            ReturnKind::Log => (w[1] / w[0]).ln(),
            ReturnKind::Simple => w[1] / w[0] - 1.0,
        })
        .collect())
}
