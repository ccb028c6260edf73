//! Return panels: loading, alignment, sector grouping and sector correlation.
//!
//! A [`ReturnPanel`] is a `p × T` matrix of per-period returns. Missing
//! observations are stored as `NaN`; every other entry is finite.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Days, NaiveDate};
use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

const MODULE: &str = "panel";

/// Orientation of a return CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CsvLayout {
    /// Rows are assets, columns are dates (canonical).
    #[default]
    Wide,
    /// Rows are dates, columns are assets.
    Transposed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    assets: Vec<String>,
    times: Vec<NaiveDate>,
    values: DMatrix<f64>,
    sector_label: Option<String>,
}

impl ReturnPanel {
    pub fn new(
        assets: Vec<String>,
        times: Vec<NaiveDate>,
        values: DMatrix<f64>,
        sector_label: Option<String>,
    ) -> Result<Self> {
        if values.nrows() != assets.len() || values.ncols() != times.len() {
            return Err(Error::dimension(
                MODULE,
                format!(
                    "values are {}x{} but there are {} assets and {} dates",
                    values.nrows(),
                    values.ncols(),
                    assets.len(),
                    times.len()
                ),
            ));
        }
        let mut seen = HashSet::new();
        for a in &assets {
            if !seen.insert(a.as_str()) {
                return Err(Error::validation(MODULE, format!("duplicate asset id '{a}'")));
            }
        }
        for w in times.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::validation(
                    MODULE,
                    format!("dates must be strictly increasing ({} then {})", w[0], w[1]),
                ));
            }
        }
        if values.iter().any(|x| x.is_infinite()) {
            return Err(Error::validation(MODULE, "panel contains infinite values"));
        }
        Ok(Self {
            assets,
            times,
            values,
            sector_label,
        })
    }

    /// Panel with generated asset ids (`{prefix}0`, `{prefix}1`, ...) and
    /// consecutive calendar dates starting at 2000-01-03.
    pub fn synthetic(prefix: &str, values: DMatrix<f64>) -> Self {
        let start = NaiveDate::from_ymd_opt(2000, 1, 3).unwrap();
        let times = (0..values.ncols())
            .map(|t| start.checked_add_days(Days::new(t as u64)).unwrap())
            .collect();
        let assets = (0..values.nrows()).map(|i| format!("{prefix}{i}")).collect();
        Self::new(assets, times, values, None).expect("synthetic panel is valid")
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn times(&self) -> &[NaiveDate] {
        &self.times
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn sector_label(&self) -> Option<&str> {
        self.sector_label.as_deref()
    }

    pub fn with_sector_label(mut self, label: impl Into<String>) -> Self {
        self.sector_label = Some(label.into());
        self
    }

    pub fn num_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn num_periods(&self) -> usize {
        self.times.len()
    }

    pub fn is_missing(&self, asset: usize, t: usize) -> bool {
        self.values[(asset, t)].is_nan()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|x| x.is_nan()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.missing_count() == 0
    }

    /// Sub-panel restricted to the given asset rows (in the given order).
    pub fn select_assets(&self, rows: &[usize]) -> ReturnPanel {
        ReturnPanel {
            assets: rows.iter().map(|&i| self.assets[i].clone()).collect(),
            times: self.times.clone(),
            values: crate::linalg::select_rows(&self.values, rows),
            sector_label: self.sector_label.clone(),
        }
    }

    /// Sub-panel over periods `start..start + len`, keeping every asset.
    pub fn window(&self, start: usize, len: usize) -> Result<ReturnPanel> {
        if start + len > self.num_periods() {
            return Err(Error::validation(
                MODULE,
                format!(
                    "window {}..{} exceeds the {} available periods",
                    start,
                    start + len,
                    self.num_periods()
                ),
            ));
        }
        Ok(ReturnPanel {
            assets: self.assets.clone(),
            times: self.times[start..start + len].to_vec(),
            values: self.values.columns(start, len).clone_owned(),
            sector_label: self.sector_label.clone(),
        })
    }

    /// Cross-sectional mean return per period (the equal-weighted portfolio).
    pub fn equal_weight_series(&self) -> DVector<f64> {
        let p = self.num_assets() as f64;
        DVector::from_iterator(
            self.num_periods(),
            self.values.column_iter().map(|c| c.sum() / p),
        )
    }
}

/// Asset id → sector code.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SectorMap {
    codes: BTreeMap<String, String>,
}

impl SectorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, asset: impl Into<String>, sector: impl Into<String>) -> Result<()> {
        let asset = asset.into();
        if self.codes.contains_key(&asset) {
            return Err(Error::validation(
                MODULE,
                format!("asset '{asset}' appears twice in the sector map"),
            ));
        }
        self.codes.insert(asset, sector.into());
        Ok(())
    }

    pub fn sector_of(&self, asset: &str) -> Option<&str> {
        self.codes.get(asset).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// `(asset, sector)` pairs in asset order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.codes.iter().map(|(a, s)| (a.as_str(), s.as_str()))
    }
}

impl<A: Into<String>, S: Into<String>> FromIterator<(A, S)> for SectorMap {
    /// Later duplicates overwrite earlier ones; use [`SectorMap::insert`]
    /// when duplicates must be rejected.
    fn from_iter<I: IntoIterator<Item = (A, S)>>(iter: I) -> Self {
        let codes = iter.into_iter().map(|(a, s)| (a.into(), s.into())).collect();
        Self { codes }
    }
}

/// Per-period risk-free rate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RiskFreeSeries {
    rates: BTreeMap<NaiveDate, f64>,
}

impl RiskFreeSeries {
    pub fn get(&self, date: &NaiveDate) -> Option<f64> {
        self.rates.get(date).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NaiveDate, f64)> {
        self.rates.iter().map(|(d, r)| (d, *r))
    }
}

impl FromIterator<(NaiveDate, f64)> for RiskFreeSeries {
    fn from_iter<I: IntoIterator<Item = (NaiveDate, f64)>>(iter: I) -> Self {
        Self {
            rates: iter.into_iter().collect(),
        }
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        module: MODULE,
        path: path.display().to_string(),
        source,
    }
}

fn parse_error(row: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        module: MODULE,
        row,
        column,
        message: message.into(),
    }
}

fn csv_error(e: csv::Error) -> Error {
    let (row, column) = e
        .position()
        .map(|p| (p.line() as usize, 0))
        .unwrap_or((0, 0));
    parse_error(row, column, e.to_string())
}

fn parse_date(s: &str, row: usize, column: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|e| parse_error(row, column, format!("invalid date '{}': {e}", s.trim())))
}

/// Parse one return cell: empty or `NA` is missing, anything else must be a
/// finite decimal.
fn parse_cell(s: &str, row: usize, column: usize) -> Result<f64> {
    let s = s.trim();
    if s.is_empty() || s == "NA" {
        return Ok(f64::NAN);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(parse_error(row, column, format!("non-finite value '{s}'"))),
        Err(_) => Err(parse_error(row, column, format!("invalid number '{s}'"))),
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

/// Read a return panel from CSV text.
///
/// Wide layout: the header row is `<label>,<date>,<date>,...` and each
/// following row is `<asset id>,<return>,...`. The transposed layout swaps
/// the roles of rows and columns. Dates are ISO-8601 (`YYYY-MM-DD`).
pub fn read_panel<R: Read>(input: R, layout: CsvLayout) -> Result<ReturnPanel> {
    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for rec in reader(input).records() {
        rows.push(rec.map_err(csv_error)?);
    }
    let header = rows
        .first()
        .ok_or_else(|| parse_error(1, 1, "empty file"))?;
    let width = header.len();
    if width < 2 {
        return Err(parse_error(1, 1, "header needs at least one data column"));
    }
    for (r, rec) in rows.iter().enumerate().skip(1) {
        if rec.len() != width {
            return Err(parse_error(
                r + 1,
                rec.len().min(width) + 1,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
    }
    let body = &rows[1..];
    let mut cells = DMatrix::<f64>::zeros(body.len(), width - 1);
    let mut row_keys = Vec::with_capacity(body.len());
    for (r, rec) in body.iter().enumerate() {
        row_keys.push(rec[0].to_string());
        for c in 1..width {
            cells[(r, c - 1)] = parse_cell(&rec[c], r + 2, c + 1)?;
        }
    }
    let col_keys: Vec<String> = header.iter().skip(1).map(str::to_string).collect();

    let (assets, date_keys, values, date_is_row) = match layout {
        CsvLayout::Wide => (row_keys, col_keys, cells, false),
        CsvLayout::Transposed => (col_keys, row_keys, cells.transpose(), true),
    };
    let mut times = Vec::with_capacity(date_keys.len());
    for (k, d) in date_keys.iter().enumerate() {
        let (row, column) = if date_is_row { (k + 2, 1) } else { (1, k + 2) };
        times.push(parse_date(d, row, column)?);
    }
    ReturnPanel::new(assets, times, values, None)
}

pub fn load_panel(path: &Path, layout: CsvLayout) -> Result<ReturnPanel> {
    let f = File::open(path).map_err(|e| io_error(path, e))?;
    read_panel(f, layout)
}

/// Write a panel in the wide layout; missing entries become `NA`. Values
/// use the shortest representation that reads back exactly.
pub fn write_panel<W: Write>(panel: &ReturnPanel, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["asset".to_string()];
    header.extend(panel.times().iter().map(|d| d.to_string()));
    w.write_record(&header)?;
    for (i, a) in panel.assets().iter().enumerate() {
        let mut rec = vec![a.clone()];
        rec.extend(panel.values().row(i).iter().map(|x| {
            if x.is_nan() {
                "NA".to_string()
            } else {
                x.to_string()
            }
        }));
        w.write_record(&rec)?;
    }
    w.flush()
}

pub fn write_sector_map<W: Write>(map: &SectorMap, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["asset", "sector"])?;
    for (a, s) in map.iter() {
        w.write_record([a, s])?;
    }
    w.flush()
}

pub fn write_risk_free<W: Write>(rf: &RiskFreeSeries, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "rate"])?;
    for (d, r) in rf.iter() {
        w.write_record([d.to_string(), r.to_string()])?;
    }
    w.flush()
}

/// Read a two-column `asset,sector` CSV (with a header row).
pub fn read_sector_map<R: Read>(input: R) -> Result<SectorMap> {
    let mut map = SectorMap::new();
    for (r, rec) in reader(input).records().enumerate().skip(1) {
        let rec = rec.map_err(csv_error)?;
        if rec.len() != 2 {
            return Err(parse_error(r + 1, 1, "expected two fields: asset,sector"));
        }
        map.insert(&rec[0], &rec[1])
            .map_err(|_| parse_error(r + 1, 1, format!("duplicate asset id '{}'", &rec[0])))?;
    }
    Ok(map)
}

pub fn load_sector_map(path: &Path) -> Result<SectorMap> {
    let f = File::open(path).map_err(|e| io_error(path, e))?;
    read_sector_map(f)
}

/// Read a two-column `date,rate` CSV (with a header row).
pub fn read_risk_free<R: Read>(input: R) -> Result<RiskFreeSeries> {
    let mut rates = BTreeMap::new();
    for (r, rec) in reader(input).records().enumerate().skip(1) {
        let rec = rec.map_err(csv_error)?;
        if rec.len() != 2 {
            return Err(parse_error(r + 1, 1, "expected two fields: date,rate"));
        }
        let date = parse_date(&rec[0], r + 1, 1)?;
        let rate = parse_cell(&rec[1], r + 1, 2)?;
        if rate.is_nan() {
            return Err(parse_error(r + 1, 2, "risk-free rate may not be missing"));
        }
        if rates.insert(date, rate).is_some() {
            return Err(parse_error(r + 1, 1, format!("duplicate date {date}")));
        }
    }
    Ok(RiskFreeSeries { rates })
}

pub fn load_risk_free(path: &Path) -> Result<RiskFreeSeries> {
    let f = File::open(path).map_err(|e| io_error(path, e))?;
    read_risk_free(f)
}

/// Subtract the same-date risk-free rate from every return.
pub fn to_excess(panel: &ReturnPanel, rf: &RiskFreeSeries) -> Result<ReturnPanel> {
    let mut missing = Vec::new();
    let mut rates = Vec::with_capacity(panel.num_periods());
    for d in panel.times() {
        match rf.get(d) {
            Some(r) => rates.push(r),
            None => missing.push(d.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::validation(
            MODULE,
            format!("risk-free series has no rate for: {}", missing.join(", ")),
        ));
    }
    let mut out = panel.clone();
    for (t, r) in rates.into_iter().enumerate() {
        for x in out.values.column_mut(t).iter_mut() {
            *x -= r;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SectorGrouping {
    /// One panel per retained sector, ordered by sector code.
    pub panels: Vec<ReturnPanel>,
    /// Assets without a sector code.
    pub unmapped: usize,
    /// Sector codes dropped for having too few assets.
    pub dropped_sectors: Vec<String>,
}

/// Split a panel into per-sector panels; sectors with fewer than
/// `min_assets` assets are dropped.
pub fn group_by_sector(
    panel: &ReturnPanel,
    map: &SectorMap,
    min_assets: usize,
) -> SectorGrouping {
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut unmapped = 0;
    for (i, a) in panel.assets().iter().enumerate() {
        match map.sector_of(a) {
            Some(code) => members.entry(code).or_default().push(i),
            None => unmapped += 1,
        }
    }
    if unmapped > 0 {
        log::warn!("{unmapped} asset(s) have no sector code and were dropped");
    }
    let mut panels = Vec::new();
    let mut dropped_sectors = Vec::new();
    for (code, rows) in members {
        if rows.len() < min_assets {
            dropped_sectors.push(code.to_string());
            continue;
        }
        panels.push(panel.select_assets(&rows).with_sector_label(code));
    }
    SectorGrouping {
        panels,
        unmapped,
        dropped_sectors,
    }
}

/// The window `start..start + length`, restricted to assets with no missing
/// observation inside it.
pub fn complete_case_window(
    panel: &ReturnPanel,
    start: usize,
    length: usize,
) -> Result<ReturnPanel> {
    let w = panel.window(start, length)?;
    let keep: Vec<usize> = (0..w.num_assets())
        .filter(|&i| w.values.row(i).iter().all(|x| !x.is_nan()))
        .collect();
    Ok(w.select_assets(&keep))
}

/// Pearson correlation of two equally long series.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::dimension(
            MODULE,
            format!("correlation needs two series of equal length >= 2 ({} vs {})", x.len(), y.len()),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::numerical(MODULE, "correlation undefined for a constant series"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between the equal-weighted portfolio returns of two sectors.
pub fn equal_weight_correlation(a: &ReturnPanel, b: &ReturnPanel) -> Result<f64> {
    if a.times() != b.times() {
        return Err(Error::validation(MODULE, "panels do not share the same dates"));
    }
    if !a.is_complete() || !b.is_complete() {
        return Err(Error::validation(
            MODULE,
            "equal-weight correlation needs complete panels",
        ));
    }
    if a.num_assets() == 0 || b.num_assets() == 0 {
        return Err(Error::validation(MODULE, "panel has no assets"));
    }
    pearson(
        a.equal_weight_series().as_slice(),
        b.equal_weight_series().as_slice(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE_BY_FOUR: &str = "\
asset,2020-01-02,2020-01-03,2020-01-06,2020-01-07
A,0.01,0.02,-0.01,0.00
B,0.03,0.01,0.02,-0.02
C,-0.01,0.00,0.01,0.02
";

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn loads_complete_wide_csv() {
        let p = read_panel(THREE_BY_FOUR.as_bytes(), CsvLayout::Wide).unwrap();
        assert_eq!(p.num_assets(), 3);
        assert_eq!(p.num_periods(), 4);
        assert!(p.is_complete());
        assert_eq!(p.values()[(1, 0)], 0.03);
        assert_eq!(p.assets()[2], "C");
        assert_eq!(p.times()[2], date("2020-01-06"));
    }

    #[test]
    fn empty_and_na_cells_are_missing() {
        let csv = "id,2020-01-02,2020-01-03\nA,0.01,\nB,NA,0.02\n";
        let p = read_panel(csv.as_bytes(), CsvLayout::Wide).unwrap();
        assert!(p.is_missing(0, 1));
        assert!(p.is_missing(1, 0));
        assert_eq!(p.missing_count(), 2);
    }

    #[test]
    fn duplicate_asset_is_rejected() {
        let csv = "id,2020-01-02\nA,0.01\nA,0.02\n";
        let err = read_panel(csv.as_bytes(), CsvLayout::Wide).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
    }

    #[test]
    fn malformed_cell_reports_location() {
        let csv = "id,2020-01-02,2020-01-03\nA,0.01,0.02\nB,0.01,abc\n";
        match read_panel(csv.as_bytes(), CsvLayout::Wide).unwrap_err() {
            Error::Parse { row, column, .. } => assert_eq!((row, column), (3, 3)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn transposed_layout_matches_wide() {
        let wide = read_panel(THREE_BY_FOUR.as_bytes(), CsvLayout::Wide).unwrap();
        let tr = "date,A,B,C\n2020-01-02,0.01,0.03,-0.01\n2020-01-03,0.02,0.01,0.00\n\
                  2020-01-06,-0.01,0.02,0.01\n2020-01-07,0.00,-0.02,0.02\n";
        let t = read_panel(tr.as_bytes(), CsvLayout::Transposed).unwrap();
        assert_eq!(wide, t);
    }

    #[test]
    fn non_increasing_dates_rejected() {
        let csv = "id,2020-01-03,2020-01-02\nA,0.01,0.02\n";
        assert!(read_panel(csv.as_bytes(), CsvLayout::Wide).is_err());
    }

    #[test]
    fn excess_returns() {
        let p = read_panel(THREE_BY_FOUR.as_bytes(), CsvLayout::Wide).unwrap();
        let rf: RiskFreeSeries = p.times().iter().map(|d| (*d, 0.001)).collect();
        let x = to_excess(&p, &rf).unwrap();
        assert!((x.values()[(0, 0)] - 0.009).abs() < 1e-15);

        let zero: RiskFreeSeries = p.times().iter().map(|d| (*d, 0.0)).collect();
        assert_eq!(to_excess(&p, &zero).unwrap(), p);

        let partial: RiskFreeSeries = p.times()[1..].iter().map(|d| (*d, 0.0)).collect();
        let err = to_excess(&p, &partial).unwrap_err().to_string();
        assert!(err.contains("2020-01-02"), "{err}");
    }

    #[test]
    fn excess_then_add_back_roundtrips() {
        let p = read_panel(THREE_BY_FOUR.as_bytes(), CsvLayout::Wide).unwrap();
        let rf: RiskFreeSeries = p
            .times()
            .iter()
            .enumerate()
            .map(|(t, d)| (*d, 0.0003 * t as f64 - 0.0001))
            .collect();
        let x = to_excess(&p, &rf).unwrap();
        for t in 0..p.num_periods() {
            let r = rf.get(&p.times()[t]).unwrap();
            for i in 0..p.num_assets() {
                assert!((x.values()[(i, t)] + r - p.values()[(i, t)]).abs() <= 1e-15);
            }
        }
    }

    fn five_asset_panel() -> (ReturnPanel, SectorMap) {
        let p = ReturnPanel::synthetic("a", DMatrix::from_fn(5, 6, |i, t| (i * 6 + t) as f64 * 1e-3));
        let map: SectorMap = [("a0", "28"), ("a1", "28"), ("a2", "33"), ("a3", "33"), ("a4", "33")]
            .into_iter()
            .collect();
        (p, map)
    }

    #[test]
    fn grouping_partitions_assets() {
        let (p, map) = five_asset_panel();
        let g = group_by_sector(&p, &map, 2);
        assert_eq!(g.panels.len(), 2);
        assert_eq!(g.panels[0].num_assets(), 2);
        assert_eq!(g.panels[1].num_assets(), 3);
        assert_eq!(g.panels[0].sector_label(), Some("28"));
        let g3 = group_by_sector(&p, &map, 3);
        assert_eq!(g3.panels.len(), 1);
        assert_eq!(g3.panels[0].sector_label(), Some("33"));
        assert_eq!(g3.dropped_sectors, vec!["28".to_string()]);
    }

    #[test]
    fn unmapped_assets_are_counted() {
        let (p, _) = five_asset_panel();
        let map: SectorMap = [("a0", "28"), ("a1", "28"), ("a2", "33"), ("a3", "33")]
            .into_iter()
            .collect();
        let g = group_by_sector(&p, &map, 1);
        assert_eq!(g.unmapped, 1);
        let total: usize = g.panels.iter().map(|x| x.num_assets()).sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn complete_case_filters_inside_window_only() {
        let mut v = DMatrix::from_fn(3, 10, |i, t| (i + t) as f64 * 1e-3);
        v[(1, 4)] = f64::NAN; // inside window 2..7
        v[(2, 8)] = f64::NAN; // outside
        let p = ReturnPanel::synthetic("a", v);
        let w = complete_case_window(&p, 2, 5).unwrap();
        assert_eq!(w.assets(), &["a0".to_string(), "a2".to_string()]);
        assert!(w.is_complete());
        let all = complete_case_window(&p, 0, 4).unwrap();
        assert_eq!(all.num_assets(), 3);
        assert!(complete_case_window(&p, 8, 3).is_err());
    }

    #[test]
    fn correlation_extremes() {
        let p = ReturnPanel::synthetic("a", DMatrix::from_fn(3, 8, |i, t| ((i * 7 + t * 3) % 5) as f64));
        assert!((equal_weight_correlation(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        let neg = ReturnPanel::synthetic("a", -p.values().clone());
        assert!((equal_weight_correlation(&p, &neg).unwrap() + 1.0).abs() < 1e-12);
        let flat = ReturnPanel::synthetic("a", DMatrix::from_element(2, 8, 0.01));
        assert!(equal_weight_correlation(&p, &flat).is_err());
    }

    #[test]
    fn sector_map_and_rf_csv() {
        let m = read_sector_map("asset,sic\nA,28\nB,33\n".as_bytes()).unwrap();
        assert_eq!(m.sector_of("B"), Some("33"));
        assert!(read_sector_map("asset,sic\nA,28\nA,33\n".as_bytes()).is_err());
        let rf = read_risk_free("date,rf\n2020-01-02,0.0001\n".as_bytes()).unwrap();
        assert_eq!(rf.get(&date("2020-01-02")), Some(0.0001));
    }
}
