//! Aligned deaths/exposure panels and rolling train/evaluation windows.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmd::HmdTable;

/// Deaths and exposures indexed by age `0..n_ages` and year
/// `first_year..first_year + n_years`.
///
/// A cell with zero exposure is "excluded": it carries no likelihood or score
/// term anywhere in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MortalityPanel {
    first_year: i32,
    n_ages: usize,
    n_years: usize,
    /// Age-major: `deaths[a * n_years + t]`.
    deaths: Vec<f64>,
    exposures: Vec<f64>,
}

impl MortalityPanel {
    pub fn new(
        first_year: i32,
        n_ages: usize,
        n_years: usize,
        deaths: Vec<f64>,
        exposures: Vec<f64>,
    ) -> Result<Self> {
        let cells = n_ages * n_years;
        if deaths.len() != cells || exposures.len() != cells {
            return Err(Error::Shape(format!(
                "panel {n_ages}×{n_years} needs {cells} cells, got {} deaths and {} exposures",
                deaths.len(),
                exposures.len()
            )));
        }
        for (i, (&d, &e)) in deaths.iter().zip(&exposures).enumerate() {
            if !(d >= 0.0 && d.is_finite() && e >= 0.0 && e.is_finite()) {
                return Err(Error::Data(format!(
                    "cell (age {}, year {}) has deaths {d}, exposure {e}",
                    i / n_years.max(1),
                    first_year + (i % n_years.max(1)) as i32
                )));
            }
            if e == 0.0 && d > 0.0 {
                return Err(Error::Data(format!(
                    "cell (age {}, year {}) has {d} deaths but zero exposure",
                    i / n_years,
                    first_year + (i % n_years) as i32
                )));
            }
        }
        Ok(Self { first_year, n_ages, n_years, deaths, exposures })
    }

    pub fn first_year(&self) -> i32 {
        self.first_year
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.n_years as i32 - 1
    }

    pub fn n_ages(&self) -> usize {
        self.n_ages
    }

    pub fn n_years(&self) -> usize {
        self.n_years
    }

    pub fn deaths(&self, age: usize, t: usize) -> f64 {
        self.deaths[age * self.n_years + t]
    }

    pub fn exposure(&self, age: usize, t: usize) -> f64 {
        self.exposures[age * self.n_years + t]
    }

    pub fn is_observed(&self, age: usize, t: usize) -> bool {
        self.exposure(age, t) > 0.0
    }

    /// Deaths rounded to the nearest integer, as used by every Poisson term.
    pub fn death_count(&self, age: usize, t: usize) -> f64 {
        self.deaths(age, t).round()
    }

    /// Number of cells whose deaths are fractional and get rounded.
    pub fn fractional_cells(&self) -> usize {
        self.deaths.iter().filter(|d| d.fract() != 0.0).count()
    }

    pub fn exposure_row(&self, t: usize) -> Vec<f64> {
        (0..self.n_ages).map(|a| self.exposure(a, t)).collect()
    }

    /// Crude log-rate `ln((d + ½)/(E + ½))`, finite for every cell.
    pub fn smoothed_log_rate(&self, age: usize, t: usize) -> f64 {
        ((self.deaths(age, t) + 0.5) / (self.exposure(age, t) + 0.5)).ln()
    }

    pub fn total_deaths(&self) -> f64 {
        self.deaths.iter().sum()
    }

    pub fn total_exposure(&self) -> f64 {
        self.exposures.iter().sum()
    }

    /// Deaths summed over ages for each year.
    pub fn deaths_by_year(&self) -> Vec<f64> {
        (0..self.n_years).map(|t| (0..self.n_ages).map(|a| self.deaths(a, t)).sum()).collect()
    }

    /// Sub-panel of `len` years starting at calendar year `start`.
    pub fn years(&self, start: i32, len: usize) -> Result<Self> {
        let offset = start - self.first_year;
        if offset < 0 || offset as usize + len > self.n_years {
            return Err(Error::Range(format!(
                "years {start}..={} outside panel {}..={}",
                start + len as i32 - 1,
                self.first_year,
                self.last_year()
            )));
        }
        let offset = offset as usize;
        let pick = |src: &[f64]| -> Vec<f64> {
            (0..self.n_ages)
                .flat_map(|a| src[a * self.n_years + offset..a * self.n_years + offset + len].to_vec())
                .collect()
        };
        Ok(Self {
            first_year: start,
            n_ages: self.n_ages,
            n_years: len,
            deaths: pick(&self.deaths),
            exposures: pick(&self.exposures),
        })
    }

    /// Canonical CSV: header `year,age,deaths,exposure`, rows ordered by year
    /// then age.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for t in 0..self.n_years {
            for a in 0..self.n_ages {
                out.serialize(PanelRow {
                    year: self.first_year + t as i32,
                    age: a as u32,
                    deaths: self.deaths(a, t),
                    exposure: self.exposure(a, t),
                })?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rows = BTreeMap::new();
        for (i, row) in csv::Reader::from_reader(r).deserialize::<PanelRow>().enumerate() {
            let row = row?;
            if rows.insert((row.year, row.age), (row.deaths, row.exposure)).is_some() {
                return Err(Error::Data(format!(
                    "duplicate row for year {}, age {} (record {})",
                    row.year,
                    row.age,
                    i + 1
                )));
            }
        }
        let (&(first_year, _), _) =
            rows.iter().next().ok_or_else(|| Error::Data("empty panel file".into()))?;
        let last_year = rows.keys().map(|k| k.0).max().unwrap_or(first_year);
        let n_ages = rows.keys().map(|k| k.1).max().unwrap_or(0) as usize + 1;
        let n_years = (last_year - first_year + 1) as usize;
        let mut deaths = vec![0.0; n_ages * n_years];
        let mut exposures = vec![0.0; n_ages * n_years];
        let mut missing = Vec::new();
        for t in 0..n_years {
            for a in 0..n_ages {
                let year = first_year + t as i32;
                match rows.get(&(year, a as u32)) {
                    Some(&(d, e)) => {
                        deaths[a * n_years + t] = d;
                        exposures[a * n_years + t] = e;
                    }
                    None => missing.push((year, a as u32)),
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Data(format!("panel file is not rectangular; missing {}", list_pairs(&missing))));
        }
        Self::new(first_year, n_ages, n_years, deaths, exposures)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PanelRow {
    year: i32,
    age: u32,
    deaths: f64,
    exposure: f64,
}

fn list_pairs(pairs: &[(i32, u32)]) -> String {
    let shown: Vec<String> = pairs.iter().take(20).map(|(y, a)| format!("({y}, {a})")).collect();
    if pairs.len() > 20 {
        format!("{} and {} more", shown.join(", "), pairs.len() - 20)
    } else {
        shown.join(", ")
    }
}

/// Aligns HMD deaths and exposures into a panel over `years` and ages
/// `0..=age_cap`, summing every age above the cap into the cap row.
pub fn build_panel(
    deaths: &HmdTable,
    exposures: &HmdTable,
    age_cap: u32,
    years: RangeInclusive<i32>,
) -> Result<MortalityPanel> {
    let index = |t: &HmdTable| -> BTreeMap<(i32, u32), Option<f64>> {
        t.records.iter().filter(|r| years.contains(&r.year)).map(|r| ((r.year, r.age), r.value)).collect()
    };
    let d_index = index(deaths);
    let e_index = index(exposures);
    let n_ages = age_cap as usize + 1;
    let first_year = *years.start();
    let n_years = (years.end() - years.start() + 1).max(0) as usize;

    let mut missing = Vec::new();
    for year in years.clone() {
        for age in 0..=age_cap {
            if !d_index.contains_key(&(year, age)) || !e_index.contains_key(&(year, age)) {
                missing.push((year, age));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("coverage gap at (year, age) {}", list_pairs(&missing))));
    }

    let mut d_out = vec![0.0; n_ages * n_years];
    let mut e_out = vec![0.0; n_ages * n_years];
    let mut excluded = 0usize;
    for (&(year, age), &d) in &d_index {
        let e = e_index.get(&(year, age)).copied().flatten();
        let (d, e) = match (d, e) {
            (Some(d), Some(e)) => (d, e),
            (None, None) | (Some(0.0), None) => {
                excluded += 1;
                (0.0, 0.0)
            }
            (Some(d), None) => {
                return Err(Error::Data(format!(
                    "year {year}, age {age}: {d} deaths with missing exposure"
                )))
            }
            (None, Some(e)) if e == 0.0 => (0.0, 0.0),
            (None, Some(_)) => {
                return Err(Error::Data(format!("year {year}, age {age}: missing deaths with positive exposure")))
            }
        };
        let a = age.min(age_cap) as usize;
        let t = (year - first_year) as usize;
        d_out[a * n_years + t] += d;
        e_out[a * n_years + t] += e;
    }
    if excluded > 0 {
        log::info!("{excluded} cells with missing exposure and zero deaths treated as excluded");
    }
    let panel = MortalityPanel::new(first_year, n_ages, n_years, d_out, e_out)?;
    let fractional = panel.fractional_cells();
    if fractional > 0 {
        log::info!("{fractional} cells carry fractional deaths; Poisson terms use rounded counts");
    }
    Ok(panel)
}

/// A rolling split: `train_len` fitting years followed by `eval_len`
/// evaluation years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub first_train_year: i32,
    pub train_len: usize,
    pub eval_len: usize,
}

impl WindowSpec {
    pub fn new(first_train_year: i32, train_len: usize, eval_len: usize) -> Result<Self> {
        if train_len < 2 || eval_len < 1 {
            return Err(Error::Config(format!(
                "window needs train_len ≥ 2 and eval_len ≥ 1, got {train_len} and {eval_len}"
            )));
        }
        Ok(Self { first_train_year, train_len, eval_len })
    }

    pub fn first_eval_year(&self) -> i32 {
        self.first_train_year + self.train_len as i32
    }

    pub fn last_eval_year(&self) -> i32 {
        self.first_eval_year() + self.eval_len as i32 - 1
    }

    /// One window per first training year in `first_years`.
    pub fn sweep(first_years: RangeInclusive<i32>, train_len: usize, eval_len: usize) -> Result<Vec<Self>> {
        first_years.map(|y| Self::new(y, train_len, eval_len)).collect()
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { first_train_year: 1952, train_len: 60, eval_len: 10 }
    }
}

pub fn cut_window(panel: &MortalityPanel, spec: &WindowSpec) -> Result<(MortalityPanel, MortalityPanel)> {
    let spec = WindowSpec::new(spec.first_train_year, spec.train_len, spec.eval_len)?;
    if spec.first_train_year < panel.first_year() || spec.last_eval_year() > panel.last_year() {
        return Err(Error::Range(format!(
            "window {}..={} exceeds panel {}..={}",
            spec.first_train_year,
            spec.last_eval_year(),
            panel.first_year(),
            panel.last_year()
        )));
    }
    let train = panel.years(spec.first_train_year, spec.train_len)?;
    let eval = panel.years(spec.first_eval_year(), spec.eval_len)?;
    Ok((train, eval))
}
