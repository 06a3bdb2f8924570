//! Monthly unit-by-period panels and their CSV layouts.
//!
//! The canonical input is the wide layout used by public home-value indices:
//! one row per region, one column per month, plus arbitrary metadata columns
//! that are ignored. Month headers may be `YYYY-MM` or `YYYY-MM-DD`; the day
//! is discarded. A long `(unit, period, value)` layout is also accepted.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Period {
    year: i32,
    month: u8,
}

impl Period {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Parameter(format!("month {month} outside 1..=12")));
        }
        Ok(Period {
            year,
            month: month as u8,
        })
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn month(self) -> u32 {
        u32::from(self.month)
    }

    pub fn succ(self) -> Self {
        self.add_months(1)
    }

    pub fn pred(self) -> Self {
        self.add_months(-1)
    }

    fn ordinal(self) -> i64 {
        i64::from(self.year) * 12 + i64::from(self.month) - 1
    }

    fn from_ordinal(ord: i64) -> Self {
        Period {
            year: ord.div_euclid(12) as i32,
            month: (ord.rem_euclid(12) + 1) as u8,
        }
    }

    pub fn add_months(self, n: i64) -> Self {
        Self::from_ordinal(self.ordinal() + n)
    }

    /// Signed number of months from `other` to `self`.
    pub fn months_since(self, other: Period) -> i64 {
        self.ordinal() - other.ordinal()
    }

    /// Inclusive range of months `from..=to`; empty when `from > to`.
    pub fn range_inclusive(from: Period, to: Period) -> Vec<Period> {
        let n = to.months_since(from);
        (0..=n).map(|k| from.add_months(k)).collect()
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for Period {
    type Err = Error;

    /// Accepts `YYYY-MM` and `YYYY-MM-DD`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("{s:?} is not a YYYY-MM or YYYY-MM-DD date"));
        let parts: Vec<&str> = s.trim().split('-').collect();
        if !(parts.len() == 2 || parts.len() == 3) || parts[0].len() != 4 {
            return Err(bad());
        }
        let year: i32 = parts[0].parse().map_err(|_| bad())?;
        let month: u32 = parts[1].parse().map_err(|_| bad())?;
        if parts.len() == 3 {
            let day: u32 = parts[2].parse().map_err(|_| bad())?;
            if !(1..=31).contains(&day) {
                return Err(bad());
            }
        }
        Period::new(year, month).map_err(|_| bad())
    }
}

impl TryFrom<String> for Period {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Period> for String {
    fn from(p: Period) -> String {
        p.to_string()
    }
}

/// Heuristic used to classify header cells: anything starting with
/// `DDDD-` is meant to be a month and must parse as one.
fn looks_like_date(s: &str) -> bool {
    let b = s.trim().as_bytes();
    b.len() >= 5 && b[..4].iter().all(u8::is_ascii_digit) && b[4] == b'-'
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Wide,
    Long,
}

/// Column mapping for [`load_panel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub format: Format,
    /// Column holding the unit label (both layouts).
    pub region_column: String,
    /// Long layout only.
    pub period_column: String,
    /// Long layout only.
    pub value_column: String,
    /// Keep only rows where every `(column, value)` pair matches exactly.
    pub row_filters: Vec<(String, String)>,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            format: Format::Wide,
            region_column: "RegionName".to_string(),
            period_column: "date".to_string(),
            value_column: "value".to_string(),
            row_filters: Vec::new(),
        }
    }
}

impl Layout {
    pub fn wide(region_column: impl Into<String>) -> Self {
        Layout {
            region_column: region_column.into(),
            ..Layout::default()
        }
    }
}

/// Rectangular unit × month matrix of outcome levels with a missing mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    units: Vec<String>,
    periods: Vec<Period>,
    // unit-major, `None` = missing
    values: Vec<Option<f64>>,
}

impl Panel {
    /// Builds a panel from per-unit rows. Periods must be contiguous.
    pub fn new(units: Vec<String>, periods: Vec<Period>, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if rows.len() != units.len() {
            return Err(Error::Validation(format!(
                "{} value rows for {} units",
                rows.len(),
                units.len()
            )));
        }
        for w in periods.windows(2) {
            if w[1] != w[0].succ() {
                return Err(Error::Validation(format!(
                    "periods not contiguous: {} followed by {}",
                    w[0], w[1]
                )));
            }
        }
        let mut seen = HashMap::with_capacity(units.len());
        for (i, u) in units.iter().enumerate() {
            if let Some(prev) = seen.insert(u.as_str(), i) {
                return Err(Error::Validation(format!(
                    "duplicate unit label {u:?} (rows {} and {})",
                    prev + 1,
                    i + 1
                )));
            }
        }
        let mut values = Vec::with_capacity(units.len() * periods.len());
        for (u, row) in units.iter().zip(&rows) {
            if row.len() != periods.len() {
                return Err(Error::Validation(format!(
                    "unit {u:?} has {} values for {} periods",
                    row.len(),
                    periods.len()
                )));
            }
            values.extend_from_slice(row);
        }
        Ok(Panel {
            units,
            periods,
            values,
        })
    }

    /// Complete panel from dense rows.
    pub fn from_dense(units: Vec<String>, start: Period, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        let periods = (0..n as i64).map(|k| start.add_months(k)).collect();
        let rows = rows
            .into_iter()
            .map(|r| r.into_iter().map(Some).collect())
            .collect();
        Panel::new(units, periods, rows)
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn periods(&self) -> &[Period] {
        &self.periods
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn first_period(&self) -> Option<Period> {
        self.periods.first().copied()
    }

    pub fn last_period(&self) -> Option<Period> {
        self.periods.last().copied()
    }

    pub fn unit_index(&self, label: &str) -> Option<usize> {
        self.units.iter().position(|u| u == label)
    }

    pub fn period_index(&self, p: Period) -> Option<usize> {
        let first = self.first_period()?;
        let k = p.months_since(first);
        (k >= 0 && (k as usize) < self.periods.len()).then_some(k as usize)
    }

    pub fn row(&self, unit: usize) -> &[Option<f64>] {
        let n = self.periods.len();
        &self.values[unit * n..(unit + 1) * n]
    }

    pub fn value(&self, unit: usize, period: usize) -> Option<f64> {
        self.row(unit)[period]
    }

    pub fn is_missing(&self, unit: usize, period: usize) -> bool {
        self.value(unit, period).is_none()
    }

    /// Values of `unit` over `[from, to]` (inclusive indices).
    pub fn window(&self, unit: usize, from: usize, to: usize) -> &[Option<f64>] {
        &self.row(unit)[from..=to]
    }
}

/// Restricts a panel to the months `[from, to]`, preserving unit order.
pub fn slice_panel(p: &Panel, from: Period, to: Period) -> Result<Panel> {
    if from > to {
        return Err(Error::Range(format!("slice start {from} is after end {to}")));
    }
    let (Some(i), Some(j)) = (p.period_index(from), p.period_index(to)) else {
        return Err(Error::Range(format!(
            "slice {from}..{to} outside panel range {}..{}",
            p.first_period().map_or("?".into(), |x| x.to_string()),
            p.last_period().map_or("?".into(), |x| x.to_string()),
        )));
    };
    let rows = (0..p.n_units()).map(|u| p.window(u, i, j).to_vec()).collect();
    Panel::new(p.units.clone(), p.periods[i..=j].to_vec(), rows)
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::Cell {
            row,
            column: column.to_string(),
            message: format!("non-numeric value {s:?}"),
        }),
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| Error::Header {
        column: name.to_string(),
        message: "required column not found".to_string(),
    })
}

fn filter_indices(headers: &csv::StringRecord, layout: &Layout) -> Result<Vec<(usize, String)>> {
    layout
        .row_filters
        .iter()
        .map(|(c, v)| Ok((column_index(headers, c)?, v.clone())))
        .collect()
}

fn keep_row(record: &csv::StringRecord, filters: &[(usize, String)]) -> bool {
    filters
        .iter()
        .all(|(i, v)| record.get(*i).is_some_and(|x| x == v))
}

/// Parses a CSV byte stream into a [`Panel`] according to `layout`.
pub fn load_panel<R: Read>(source: R, layout: &Layout) -> Result<Panel> {
    match layout.format {
        Format::Wide => load_wide(source, layout),
        Format::Long => load_long(source, layout),
    }
}

fn load_wide<R: Read>(source: R, layout: &Layout) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(source);
    let headers = rdr.headers()?.clone();
    let region = column_index(&headers, &layout.region_column)?;
    let filters = filter_indices(&headers, layout)?;

    let mut month_cols: Vec<(usize, Period)> = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if i == region || !looks_like_date(h) {
            continue;
        }
        let p: Period = h.parse().map_err(|_| Error::Header {
            column: h.to_string(),
            message: "month header does not parse as YYYY-MM or YYYY-MM-DD".to_string(),
        })?;
        if let Some(&(_, prev)) = month_cols.last() {
            if p != prev.succ() {
                let message = if p <= prev {
                    format!("month {p} is not after preceding month column {prev}")
                } else {
                    format!("gap in month columns between {prev} and {p}")
                };
                return Err(Error::Header {
                    column: h.to_string(),
                    message,
                });
            }
        }
        month_cols.push((i, p));
    }
    if month_cols.is_empty() {
        return Err(Error::Header {
            column: String::new(),
            message: "no month columns found".to_string(),
        });
    }

    let mut units = Vec::new();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is row 1
        let row_no = k + 2;
        if !keep_row(&rec, &filters) {
            continue;
        }
        let label = rec.get(region).unwrap_or("").trim().to_string();
        if label.is_empty() {
            return Err(Error::Cell {
                row: row_no,
                column: layout.region_column.clone(),
                message: "empty unit label".to_string(),
            });
        }
        let vals = month_cols
            .iter()
            .map(|&(i, _)| parse_cell(rec.get(i).unwrap_or(""), row_no, &headers[i]))
            .collect::<Result<Vec<_>>>()?;
        units.push(label);
        rows.push(vals);
    }
    let periods = month_cols.into_iter().map(|(_, p)| p).collect();
    Panel::new(units, periods, rows)
}

fn load_long<R: Read>(source: R, layout: &Layout) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let headers = rdr.headers()?.clone();
    let ui = column_index(&headers, &layout.region_column)?;
    let pi = column_index(&headers, &layout.period_column)?;
    let vi = column_index(&headers, &layout.value_column)?;
    let filters = filter_indices(&headers, layout)?;

    let mut units: Vec<String> = Vec::new();
    let mut unit_pos: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, Period), Option<f64>> = HashMap::new();
    let mut span: Option<(Period, Period)> = None;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row_no = k + 2;
        if !keep_row(&rec, &filters) {
            continue;
        }
        let label = rec.get(ui).unwrap_or("").trim().to_string();
        if label.is_empty() {
            return Err(Error::Cell {
                row: row_no,
                column: layout.region_column.clone(),
                message: "empty unit label".to_string(),
            });
        }
        let p: Period = rec.get(pi).unwrap_or("").parse().map_err(|e: Error| Error::Cell {
            row: row_no,
            column: layout.period_column.clone(),
            message: e.to_string(),
        })?;
        let v = parse_cell(rec.get(vi).unwrap_or(""), row_no, &layout.value_column)?;
        let u = *unit_pos.entry(label.clone()).or_insert_with(|| {
            units.push(label.clone());
            units.len() - 1
        });
        if cells.insert((u, p), v).is_some() {
            return Err(Error::Validation(format!(
                "duplicate observation for unit {label:?} at {p} (row {row_no})"
            )));
        }
        span = Some(match span {
            None => (p, p),
            Some((a, b)) => (a.min(p), b.max(p)),
        });
    }
    let (first, last) = span.ok_or_else(|| Error::Validation("no observations".to_string()))?;
    let periods = Period::range_inclusive(first, last);
    let rows = (0..units.len())
        .map(|u| periods.iter().map(|&p| cells.get(&(u, p)).copied().flatten()).collect())
        .collect();
    Panel::new(units, periods, rows)
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes the panel in wide layout; month headers are `YYYY-MM`.
pub fn write_wide<W: Write>(p: &Panel, out: W, region_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![region_column.to_string()];
    header.extend(p.periods.iter().map(Period::to_string));
    w.write_record(&header)?;
    for (u, label) in p.units.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend(p.row(u).iter().map(|&v| fmt_cell(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the panel in long layout, one row per cell including missing ones.
pub fn write_long<W: Write>(p: &Panel, out: W, layout: &Layout) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([&layout.region_column, &layout.period_column, &layout.value_column])?;
    for (u, label) in p.units.iter().enumerate() {
        for (t, period) in p.periods.iter().enumerate() {
            w.write_record([label.clone(), period.to_string(), fmt_cell(p.value(u, t))])?;
        }
    }
    w.flush()?;
    Ok(())
}
