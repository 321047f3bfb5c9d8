//! Observation panels: one integer-timed series per unit.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// One unit's observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSeries {
    unit_id: String,
    times: Vec<i64>,
    values: Vec<f64>,
}

/// Borrowed times and values of a single series.
#[derive(Debug, Clone, Copy)]
pub struct SeriesView<'a> {
    pub times: &'a [i64],
    pub values: &'a [f64],
}

impl<'a> SeriesView<'a> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub(crate) fn check_times(times: &[i64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::invalid("empty time vector"));
    }
    if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!(
            "times must be strictly increasing (saw {} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

impl ObservedSeries {
    pub fn new(unit_id: impl Into<String>, times: Vec<i64>, values: Vec<f64>) -> Result<Self> {
        let unit_id = unit_id.into();
        if times.len() != values.len() {
            return Err(Error::invalid(format!(
                "unit {unit_id}: {} times but {} values",
                times.len(),
                values.len()
            )));
        }
        check_times(&times).map_err(|e| Error::invalid(format!("unit {unit_id}: {e}")))?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("unit {unit_id}: non-finite value {v}")));
        }
        Ok(Self {
            unit_id,
            times,
            values,
        })
    }

    /// Series observed at times `1..=values.len()`.
    pub fn contiguous(unit_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let times = (1..=values.len() as i64).collect();
        Self::new(unit_id, times, values)
    }

    pub fn unit_id(&self) -> &str {
        &self.unit_id
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn view(&self) -> SeriesView<'_> {
        SeriesView {
            times: &self.times,
            values: &self.values,
        }
    }

    /// Same unit and times, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.unit_id.clone(), self.times.clone(), values)
    }
}

/// An ordered collection of series with unique ids, each at least `min_length` long.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPanel {
    series: Vec<ObservedSeries>,
    min_length: usize,
}

impl SeriesPanel {
    pub fn new(series: Vec<ObservedSeries>, min_length: usize) -> Result<Self> {
        if min_length == 0 {
            return Err(Error::invalid("min_length must be positive"));
        }
        let mut seen = HashSet::with_capacity(series.len());
        for s in &series {
            if !seen.insert(s.unit_id()) {
                return Err(Error::invalid(format!("duplicate unit id {}", s.unit_id())));
            }
            if s.len() < min_length {
                return Err(Error::invalid(format!(
                    "unit {} has {} observations, fewer than the admission threshold {min_length}",
                    s.unit_id(),
                    s.len()
                )));
            }
        }
        Ok(Self { series, min_length })
    }

    /// Keep only series with at least `min_length` observations.
    pub fn admit(series: Vec<ObservedSeries>, min_length: usize) -> Result<Self> {
        let kept = series.into_iter().filter(|s| s.len() >= min_length).collect();
        Self::new(kept, min_length)
    }

    pub fn series(&self) -> &[ObservedSeries] {
        &self.series
    }

    pub fn min_length(&self) -> usize {
        self.min_length
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn views(&self) -> Vec<SeriesView<'_>> {
        self.series.iter().map(ObservedSeries::view).collect()
    }

    pub fn total_observations(&self) -> usize {
        self.series.iter().map(ObservedSeries::len).sum()
    }

    /// Contiguous integer grid spanning every observation time.
    pub fn grid(&self) -> Result<TimeGrid> {
        let lo = self.series.iter().filter_map(|s| s.times().first()).min();
        let hi = self.series.iter().filter_map(|s| s.times().last()).max();
        match (lo, hi) {
            (Some(&lo), Some(&hi)) => TimeGrid::new(lo, hi),
            _ => Err(Error::invalid("empty panel has no time grid")),
        }
    }

    /// Read `unit_id,time,value` rows (header required, `#` comment lines ignored).
    /// Rows may come in any order; each unit is sorted by time.
    pub fn read_csv<R: Read>(reader: R, min_length: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse(format!("panel header: {e}")))?
            .clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse(format!("panel header lacks column `{name}`")))
        };
        let (ci, ct, cv) = (col("unit_id")?, col("time")?, col("value")?);

        let mut order: Vec<String> = Vec::new();
        let mut rows: std::collections::HashMap<String, Vec<(i64, f64)>> = Default::default();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(format!("panel row {}: {e}", line + 2)))?;
            let id = rec.get(ci).unwrap_or_default().to_string();
            let t: i64 = rec
                .get(ct)
                .unwrap_or_default()
                .parse()
                .map_err(|e| Error::Parse(format!("panel row {}: bad time: {e}", line + 2)))?;
            let v: f64 = rec
                .get(cv)
                .unwrap_or_default()
                .parse()
                .map_err(|e| Error::Parse(format!("panel row {}: bad value: {e}", line + 2)))?;
            rows.entry(id.clone())
                .or_insert_with(|| {
                    order.push(id);
                    Vec::new()
                })
                .push((t, v));
        }
        let mut series = Vec::with_capacity(order.len());
        for id in order {
            let mut obs = rows.remove(&id).unwrap_or_default();
            obs.sort_by_key(|&(t, _)| t);
            let (times, values) = obs.into_iter().unzip();
            series.push(ObservedSeries::new(id, times, values)?);
        }
        Self::admit(series, min_length)
    }

    pub fn read_csv_path(path: impl AsRef<Path>, min_length: usize) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), min_length)
    }

    /// Write `unit_id,time,value` rows, optionally preceded by a `#` header line.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "unit_id,time,value")?;
        for s in &self.series {
            for (t, v) in s.times().iter().zip(s.values()) {
                writeln!(w, "{},{},{}", s.unit_id(), t, v)?;
            }
        }
        Ok(())
    }
}

/// Contiguous integer time grid `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    start: i64,
    len: usize,
}

impl TimeGrid {
    pub fn new(start: i64, end: i64) -> Result<Self> {
        if end < start {
            return Err(Error::invalid(format!("grid end {end} before start {start}")));
        }
        Ok(Self {
            start,
            len: (end - start + 1) as usize,
        })
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn times(&self) -> Vec<i64> {
        (self.start..self.start + self.len as i64).collect()
    }

    /// Grid positions of `times`; fails if any time falls off the grid.
    pub fn indices(&self, times: &[i64]) -> Result<Vec<usize>> {
        times
            .iter()
            .map(|&t| {
                let k = t - self.start;
                if k < 0 || k as usize >= self.len {
                    Err(Error::invalid(format!(
                        "time {t} outside grid {}..={}",
                        self.start,
                        self.start + self.len as i64 - 1
                    )))
                } else {
                    Ok(k as usize)
                }
            })
            .collect()
    }
}
