//! Event ingestion, weekly aggregation and the treated/control panel.
//!
//! Time indices are 0-based and half-open throughout the crate: the
//! pre-treatment block of a panel is `0..t0` and the post block `t0..T`, so
//! `t0` is both the number of pre-treatment periods and the 1-based index of
//! the last one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stats;

/// Column names of the raw event file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub date_col: String,
    pub unit_col: String,
    pub count_col: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            date_col: "date".into(),
            unit_col: "unit".into(),
            count_col: "count".into(),
        }
    }
}

/// Daily event counts keyed by `(date, unit)`. Duplicate keys are summed on
/// insertion.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawEventTable {
    counts: BTreeMap<(NaiveDate, String), u64>,
    rows_read: usize,
}

impl RawEventTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, date: NaiveDate, unit: impl Into<String>, count: u64) {
        *self.counts.entry((date, unit.into())).or_insert(0) += count;
        self.rows_read += 1;
    }

    pub fn get(&self, date: NaiveDate, unit: &str) -> u64 {
        self.counts
            .get(&(date, unit.to_string()))
            .copied()
            .unwrap_or(0)
    }

    /// Number of input rows consumed, before duplicate summation.
    pub fn rows_read(&self) -> usize {
        self.rows_read
    }

    /// Number of distinct `(date, unit)` keys.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn units(&self) -> BTreeSet<String> {
        self.counts.keys().map(|(_, u)| u.clone()).collect()
    }

    pub fn date_range(&self) -> Option<(NaiveDate, NaiveDate)> {
        let min = self.counts.keys().map(|(d, _)| *d).min()?;
        let max = self.counts.keys().map(|(d, _)| *d).max()?;
        Some((min, max))
    }

    pub fn iter(&self) -> impl Iterator<Item = (NaiveDate, &str, u64)> {
        self.counts.iter().map(|((d, u), c)| (*d, u.as_str(), *c))
    }
}

/// Reads a raw event CSV from disk.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<RawEventTable> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ingest_reader(file, schema)
}

/// Reads a raw event CSV from any reader. The first unparseable row aborts
/// the read with its line number.
pub fn ingest_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<RawEventTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(name.to_string()))
    };
    let date_idx = find(&schema.date_col)?;
    let unit_idx = find(&schema.unit_col)?;
    let count_idx = find(&schema.count_col)?;

    let mut table = RawEventTable::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |message: String| Error::Row { line, message };
        let field = |i: usize| record.get(i).unwrap_or("");

        let date = NaiveDate::parse_from_str(field(date_idx), "%Y-%m-%d")
            .map_err(|e| row_err(format!("bad date {:?}: {e}", field(date_idx))))?;
        let unit = field(unit_idx);
        if unit.is_empty() {
            return Err(row_err("empty unit identifier".into()));
        }
        let count: u64 = field(count_idx)
            .parse()
            .map_err(|_| row_err(format!("count {:?} is not a nonnegative integer", field(count_idx))))?;
        table.insert(date, unit, count);
    }
    Ok(table)
}

/// How a final week with fewer than seven observed days is handled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrailingWeek {
    #[default]
    Drop,
    Keep,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeeklyOptions {
    /// Anchor of week 1; defaults to the first date in the table.
    pub start: Option<NaiveDate>,
    /// Last observed calendar day (inclusive); defaults to the last date in the table.
    pub end: Option<NaiveDate>,
    /// Raw unit -> panel unit. Units mapped to the same target are summed.
    pub merge: BTreeMap<String, String>,
    pub trailing: TrailingWeek,
}

/// Aligned per-unit series on a shared week index.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSeries {
    pub week_starts: Vec<NaiveDate>,
    pub units: Vec<(String, Vec<f64>)>,
}

impl UnitSeries {
    pub fn len(&self) -> usize {
        self.week_starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.week_starts.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.units
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// Number of weeks starting strictly before `onset`; this is the `t0` of
    /// a treatment that takes effect on `onset`.
    pub fn onset_index(&self, onset: NaiveDate) -> usize {
        self.week_starts.iter().take_while(|w| **w < onset).count()
    }
}

/// Sums daily counts into 7-day blocks anchored at the start date. Days
/// without a record count as zero events.
pub fn aggregate_weekly(raw: &RawEventTable, opts: &WeeklyOptions) -> Result<UnitSeries> {
    let (min_date, max_date) = raw
        .date_range()
        .ok_or_else(|| invalid("event table is empty"))?;
    let start = opts.start.unwrap_or(min_date);
    let end = opts.end.unwrap_or(max_date);
    if start > min_date {
        return Err(invalid(format!(
            "start date {start} is after the first observation {min_date}"
        )));
    }
    if end < start {
        return Err(invalid(format!("end date {end} precedes start date {start}")));
    }
    let days = (end - start).num_days() + 1;
    let n_weeks = match opts.trailing {
        TrailingWeek::Drop => days / 7,
        TrailingWeek::Keep => (days + 6) / 7,
    } as usize;
    if n_weeks == 0 {
        return Err(invalid("fewer than seven days between start and end"));
    }

    let target = |unit: &str| -> String {
        opts.merge
            .get(unit)
            .cloned()
            .unwrap_or_else(|| unit.to_string())
    };
    let mut series: BTreeMap<String, Vec<f64>> = raw
        .units()
        .iter()
        .map(|u| (target(u), vec![0.0; n_weeks]))
        .collect();
    for (date, unit, count) in raw.iter() {
        let offset = (date - start).num_days();
        let week = (offset / 7) as usize;
        if date > end || week >= n_weeks {
            continue;
        }
        series.get_mut(&target(unit)).expect("unit registered")[week] += count as f64;
    }

    let week_starts = (0..n_weeks)
        .map(|w| start + Duration::days(7 * w as i64))
        .collect();
    Ok(UnitSeries {
        week_starts,
        units: series.into_iter().collect(),
    })
}

/// One treated outcome series, `N` control series and the onset index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    labels: Vec<NaiveDate>,
    treated_name: String,
    treated: Vec<f64>,
    control_names: Vec<String>,
    controls: Vec<Vec<f64>>,
    t0: usize,
}

impl Panel {
    pub fn new(
        labels: Vec<NaiveDate>,
        treated_name: impl Into<String>,
        treated: Vec<f64>,
        control_names: Vec<String>,
        controls: Vec<Vec<f64>>,
        t0: usize,
    ) -> Result<Self> {
        let treated_name = treated_name.into();
        let t = treated.len();
        if labels.len() != t {
            return Err(Error::Alignment(format!(
                "{} labels for {} periods",
                labels.len(),
                t
            )));
        }
        if control_names.len() != controls.len() {
            return Err(Error::Alignment(format!(
                "{} control names for {} control series",
                control_names.len(),
                controls.len()
            )));
        }
        if controls.is_empty() {
            return Err(invalid("panel needs at least one control unit"));
        }
        for (name, col) in control_names.iter().zip(&controls) {
            if col.len() != t {
                return Err(Error::Alignment(format!(
                    "control {name} has {} periods, treated has {t}",
                    col.len()
                )));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("control {name} has missing or non-finite values")));
            }
        }
        if treated.iter().any(|v| !v.is_finite()) {
            return Err(invalid("treated series has missing or non-finite values"));
        }
        if t0 < 1 || t0 >= t {
            return Err(invalid(format!("t0 = {t0} must satisfy 1 <= t0 < T = {t}")));
        }
        let mut seen = BTreeSet::new();
        for name in &control_names {
            if !seen.insert(name.as_str()) {
                return Err(invalid(format!("duplicate control name {name}")));
            }
        }
        if seen.contains(treated_name.as_str()) {
            return Err(invalid(format!("treated unit {treated_name} is also a control")));
        }
        Ok(Self {
            labels,
            treated_name,
            treated,
            control_names,
            controls,
            t0,
        })
    }

    /// Panel with synthetic weekly labels starting at 2000-01-03.
    pub fn from_columns(treated: Vec<f64>, controls: Vec<Vec<f64>>, t0: usize) -> Result<Self> {
        let origin = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
        let labels = (0..treated.len())
            .map(|w| origin + Duration::days(7 * w as i64))
            .collect();
        let names = (1..=controls.len()).map(|i| format!("control_{i}")).collect();
        Self::new(labels, "treated", treated, names, controls, t0)
    }

    pub fn t(&self) -> usize {
        self.treated.len()
    }

    pub fn n(&self) -> usize {
        self.controls.len()
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn labels(&self) -> &[NaiveDate] {
        &self.labels
    }

    pub fn treated_name(&self) -> &str {
        &self.treated_name
    }

    pub fn treated(&self) -> &[f64] {
        &self.treated
    }

    pub fn control_names(&self) -> &[String] {
        &self.control_names
    }

    pub fn controls(&self) -> &[Vec<f64>] {
        &self.controls
    }

    pub fn control(&self, i: usize) -> &[f64] {
        &self.controls[i]
    }

    pub fn pre_range(&self) -> Range<usize> {
        0..self.t0
    }

    pub fn post_range(&self) -> Range<usize> {
        self.t0..self.t()
    }

    /// Control outcomes at period `t`.
    pub fn x_row(&self, t: usize) -> Vec<f64> {
        self.controls.iter().map(|c| c[t]).collect()
    }

    /// Same controls and labels with a different treated series.
    pub fn with_treated(&self, treated: Vec<f64>) -> Result<Self> {
        Self::new(
            self.labels.clone(),
            self.treated_name.clone(),
            treated,
            self.control_names.clone(),
            self.controls.clone(),
            self.t0,
        )
    }

    /// Same data with a different onset index.
    pub fn with_t0(&self, t0: usize) -> Result<Self> {
        Self::new(
            self.labels.clone(),
            self.treated_name.clone(),
            self.treated.clone(),
            self.control_names.clone(),
            self.controls.clone(),
            t0,
        )
    }

    /// Keeps periods `0..end` and sets the onset to `t0`.
    pub fn truncated(&self, end: usize, t0: usize) -> Result<Self> {
        if end > self.t() {
            return Err(invalid(format!("cannot truncate {} periods to {end}", self.t())));
        }
        Self::new(
            self.labels[..end].to_vec(),
            self.treated_name.clone(),
            self.treated[..end].to_vec(),
            self.control_names.clone(),
            self.controls.iter().map(|c| c[..end].to_vec()).collect(),
            t0,
        )
    }

    /// Relabels control `j` as treated; the current treated unit takes its
    /// place in the donor pool.
    pub fn swap_treated(&self, j: usize) -> Result<Self> {
        if j >= self.n() {
            return Err(invalid(format!("control index {j} out of range")));
        }
        let mut names = self.control_names.clone();
        let mut controls = self.controls.clone();
        let name = std::mem::replace(&mut names[j], self.treated_name.clone());
        let series = std::mem::replace(&mut controls[j], self.treated.clone());
        Self::new(self.labels.clone(), name, series, names, controls, self.t0)
    }

    /// Same panel with the controls reordered by `order` (a permutation of
    /// `0..N`).
    pub fn reorder_controls(&self, order: &[usize]) -> Result<Self> {
        let mut check: Vec<usize> = order.to_vec();
        check.sort_unstable();
        if check != (0..self.n()).collect::<Vec<_>>() {
            return Err(invalid("control order is not a permutation"));
        }
        Self::new(
            self.labels.clone(),
            self.treated_name.clone(),
            self.treated.clone(),
            order.iter().map(|&i| self.control_names[i].clone()).collect(),
            order.iter().map(|&i| self.controls[i].clone()).collect(),
            self.t0,
        )
    }

    /// Treated first, then controls in panel order.
    pub fn to_series(&self) -> UnitSeries {
        let mut units = vec![(self.treated_name.clone(), self.treated.clone())];
        units.extend(
            self.control_names
                .iter()
                .cloned()
                .zip(self.controls.iter().cloned()),
        );
        UnitSeries {
            week_starts: self.labels.clone(),
            units,
        }
    }
}

/// Builds a panel with `treated_name` as the treated unit and every other
/// unit, in series order, as a control.
pub fn build_panel(series: &UnitSeries, treated_name: &str, t0: usize) -> Result<Panel> {
    let controls: Vec<String> = series
        .units
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n != treated_name)
        .collect();
    build_panel_with_controls(series, treated_name, &controls, t0)
}

/// Builds a panel using only the listed controls, in the listed order.
pub fn build_panel_with_controls(
    series: &UnitSeries,
    treated_name: &str,
    controls: &[String],
    t0: usize,
) -> Result<Panel> {
    let t = series.len();
    for (name, values) in &series.units {
        if values.len() != t {
            return Err(Error::Alignment(format!(
                "unit {name} has {} periods, expected {t}",
                values.len()
            )));
        }
    }
    let treated = series
        .get(treated_name)
        .ok_or_else(|| invalid(format!("treated unit {treated_name} not found")))?
        .to_vec();
    let columns = controls
        .iter()
        .map(|c| {
            series
                .get(c)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| invalid(format!("control unit {c} not found")))
        })
        .collect::<Result<Vec<_>>>()?;
    Panel::new(
        series.week_starts.clone(),
        treated_name,
        treated,
        controls.to_vec(),
        columns,
        t0,
    )
}

/// How the pre-treatment block is divided into estimation and validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitSpec {
    /// Estimation block is the nearest-integer share of `t0`.
    Estimation { fraction: f64 },
    /// Validation block is the last `ceil(fraction * t0)` periods.
    Holdout { fraction: f64 },
}

impl SplitSpec {
    pub fn estimation(fraction: f64) -> Self {
        Self::Estimation { fraction }
    }

    pub fn holdout(fraction: f64) -> Self {
        Self::Holdout { fraction }
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::Estimation { fraction: 0.8 }
    }
}

/// Splits `0..t0` into a leading estimation block and a trailing validation
/// block, both non-empty.
pub fn temporal_split(panel: &Panel, spec: SplitSpec) -> Result<(Range<usize>, Range<usize>)> {
    split_range(panel.t0(), spec)
}

pub fn split_range(t0: usize, spec: SplitSpec) -> Result<(Range<usize>, Range<usize>)> {
    if t0 < 2 {
        return Err(invalid(format!("need at least two pre-treatment periods, got {t0}")));
    }
    let est = match spec {
        SplitSpec::Estimation { fraction } => {
            check_fraction(fraction)?;
            (fraction * t0 as f64).round() as usize
        }
        SplitSpec::Holdout { fraction } => {
            check_fraction(fraction)?;
            t0.saturating_sub((fraction * t0 as f64).ceil() as usize)
        }
    };
    let est = est.clamp(1, t0 - 1);
    Ok((0..est, est..t0))
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("split fraction {f} must lie in (0, 1)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub unit: String,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn summarize(unit: &str, values: &[f64]) -> UnitSummary {
    let sorted = stats::sorted(values);
    UnitSummary {
        unit: unit.to_string(),
        mean: stats::mean(values),
        sd: stats::sample_sd(values),
        min: sorted.first().copied().unwrap_or(f64::NAN),
        q1: stats::quantile_sorted(&sorted, 0.25),
        median: stats::quantile_sorted(&sorted, 0.5),
        q3: stats::quantile_sorted(&sorted, 0.75),
        max: sorted.last().copied().unwrap_or(f64::NAN),
    }
}

/// Per-unit summary over the full sample, treated unit first.
pub fn summary_stats(panel: &Panel) -> Vec<UnitSummary> {
    panel
        .to_series()
        .units
        .iter()
        .map(|(name, values)| summarize(name, values))
        .collect()
}

/// Writes the canonical panel CSV: `week_start` then one column per unit.
pub fn write_series_csv<W: Write>(series: &UnitSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["week_start".to_string()];
    header.extend(series.units.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    for (t, week) in series.week_starts.iter().enumerate() {
        let mut row = vec![week.format("%Y-%m-%d").to_string()];
        row.extend(series.units.iter().map(|(_, v)| format!("{}", v[t])));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<panel csv>".into(),
        source,
    })?;
    Ok(())
}

pub fn read_series_csv<R: Read>(reader: R) -> Result<UnitSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("week_start") {
        return Err(Error::Schema("week_start".into()));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut week_starts = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d").map_err(|e| Error::Row {
            line,
            message: format!("bad week_start {:?}: {e}", &record[0]),
        })?;
        week_starts.push(date);
        for (j, col) in columns.iter_mut().enumerate() {
            let raw = record.get(j + 1).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::Row {
                line,
                message: format!("value {raw:?} for {} is not a number", names[j]),
            })?;
            col.push(v);
        }
    }
    Ok(UnitSeries {
        week_starts,
        units: names.into_iter().zip(columns).collect(),
    })
}

pub fn write_panel_csv(panel: &Panel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_series_csv(&panel.to_series(), file)
}

pub fn read_panel_csv(path: &Path) -> Result<UnitSeries> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_series_csv(file)
}
