//! Human Mortality Database 1×1 period tables ("Deaths_1x1.txt",
//! "Exposures_1x1.txt").
//!
//! The layout is a free-text title block followed by whitespace-separated
//! columns `Year Age Female Male Total`. Ages are integers except the open
//! interval `110+`; missing cells are written `.`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SexColumn {
    Female,
    Male,
    Total,
}

impl SexColumn {
    fn offset(self) -> usize {
        match self {
            SexColumn::Female => 2,
            SexColumn::Male => 3,
            SexColumn::Total => 4,
        }
    }
}

impl FromStr for SexColumn {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(SexColumn::Female),
            "male" | "m" => Ok(SexColumn::Male),
            "total" | "t" => Ok(SexColumn::Total),
            other => Err(Error::Config(format!("unknown sex column {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmdRecord {
    pub year: i32,
    pub age: u32,
    /// The row was the open age interval (`110+`).
    pub open_age: bool,
    /// `None` for a missing (`.`) cell.
    pub value: Option<f64>,
}

/// One column of an HMD table, one record per (year, age), in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HmdTable {
    pub records: Vec<HmdRecord>,
}

impl HmdTable {
    pub fn get(&self, year: i32, age: u32) -> Option<&HmdRecord> {
        self.records.iter().find(|r| r.year == year && r.age == age)
    }

    pub fn years(&self) -> Option<(i32, i32)> {
        let min = self.records.iter().map(|r| r.year).min()?;
        let max = self.records.iter().map(|r| r.year).max()?;
        Some((min, max))
    }

    pub fn max_age(&self) -> Option<u32> {
        self.records.iter().map(|r| r.age).max()
    }

    /// Writes the table back in HMD layout with the value repeated in all
    /// three sex columns.
    pub fn to_hmd_string(&self, title: &str) -> String {
        let mut out = format!("{title}\n\n  Year      Age       Female         Male        Total\n");
        for r in &self.records {
            let age = if r.open_age { format!("{}+", r.age) } else { r.age.to_string() };
            let value = match r.value {
                Some(v) => format!("{v}"),
                None => ".".to_string(),
            };
            let _ = writeln!(out, "  {:<8}  {:<6}  {value:>11}  {value:>11}  {value:>11}", r.year, age);
        }
        out
    }
}

fn parse_value(token: &str, line: usize) -> Result<Option<f64>> {
    if token == "." {
        return Ok(None);
    }
    token
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| Error::Parse { line, message: format!("unparsable number {token:?}") })
}

fn parse_age(token: &str, line: usize) -> Result<(u32, bool)> {
    let (digits, open) = match token.strip_suffix('+') {
        Some(d) => (d, true),
        None => (token, false),
    };
    digits
        .parse::<u32>()
        .map(|a| (a, open))
        .map_err(|_| Error::Parse { line, message: format!("unparsable age {token:?}") })
}

/// Parses an HMD 1×1 table, keeping the chosen sex column.
///
/// Lines before the first row that starts with a year are treated as header;
/// blank lines are ignored anywhere.
pub fn parse_hmd(text: &str, column: SexColumn) -> Result<HmdTable> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    let mut in_body = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if !in_body {
            if fields[0].parse::<i32>().is_err() {
                continue;
            }
            in_body = true;
        }
        if fields.len() != 5 {
            return Err(Error::Parse {
                line,
                message: format!("expected 5 columns, found {}", fields.len()),
            });
        }
        let year = fields[0]
            .parse::<i32>()
            .map_err(|_| Error::Parse { line, message: format!("unparsable year {:?}", fields[0]) })?;
        let (age, open_age) = parse_age(fields[1], line)?;
        // Validate every numeric column, not only the one kept.
        let mut value = None;
        for (j, token) in fields.iter().enumerate().skip(2) {
            let v = parse_value(token, line)?;
            if j == column.offset() {
                value = v;
            }
        }
        if !seen.insert((year, age)) {
            return Err(Error::Data(format!("duplicate row for year {year}, age {age} (line {line})")));
        }
        records.push(HmdRecord { year, age, open_age, value });
    }
    Ok(HmdTable { records })
}
