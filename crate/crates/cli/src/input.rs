//! CSV ingestion.

use std::fs::File;
use std::path::Path;

use zap_core::{TestingInput, UnitInterval};

use crate::error::CliError;

/// Parsed data plus the 1-based file lines whose u-value was clamped.
pub struct LoadedInput {
    pub data: TestingInput<f64>,
    pub clamped_lines: Vec<u64>,
}

enum Primary {
    Z(usize),
    U(usize),
}

pub fn read_csv(path: &Path) -> Result<LoadedInput, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_csv(file)
}

pub fn parse_csv<R: std::io::Read>(reader: R) -> Result<LoadedInput, CliError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
    let find = |name: &str| header.iter().position(|h| h == name);
    let primary = match (find("z"), find("u")) {
        (Some(_), Some(_)) => return Err(CliError::input(Some(1), "header has both `z` and `u`; keep one")),
        (Some(i), None) => Primary::Z(i),
        (None, Some(i)) => Primary::U(i),
        (None, None) => return Err(CliError::input(Some(1), "header needs a `z` or `u` column")),
    };
    let mut x_cols = Vec::new();
    while let Some(i) = find(&format!("x{}", x_cols.len() + 1)) {
        x_cols.push(i);
    }
    let stray = header.iter().find(|h| {
        h.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()).is_some_and(|d| d == 0 || d > x_cols.len())
    });
    if let Some(h) = stray {
        return Err(CliError::input(Some(1), format!("covariate column `{h}` breaks the sequence x1..x{}", x_cols.len())));
    }

    let width = header.len();
    let mut primary_vals = Vec::new();
    let mut covariates = Vec::new();
    let mut lines = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_error(e, line)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(CliError::input(Some(line), format!("expected {width} fields, found {}", record.len())));
        }
        let cell = |col: usize| -> Result<f64, CliError> {
            let raw = &record[col];
            raw.parse::<f64>()
                .ok()
                .filter(|v| !v.is_nan())
                .ok_or_else(|| CliError::input(Some(line), format!("column `{}`: {raw:?} is not a number", &header[col])))
        };
        let v = match primary {
            Primary::Z(c) => cell(c)?,
            Primary::U(c) => {
                let u = cell(c)?;
                if !(0.0..=1.0).contains(&u) {
                    return Err(CliError::input(Some(line), format!("u = {u} lies outside [0, 1]")));
                }
                u
            }
        };
        primary_vals.push(v);
        for &c in &x_cols {
            let x = cell(c)?;
            if !x.is_finite() {
                return Err(CliError::input(Some(line), format!("column `{}` is not finite", &header[c])));
            }
            covariates.push(x);
        }
        lines.push(line);
    }
    if primary_vals.is_empty() {
        return Err(CliError::input(None, "no data rows"));
    }

    let p = x_cols.len();
    let data = match primary {
        Primary::Z(_) => TestingInput::from_z(primary_vals.clone(), covariates, p),
        Primary::U(_) => TestingInput::from_u(primary_vals.clone(), covariates, p),
    }
    .map_err(|e| CliError::input(None, e.to_string()))?;
    let lo = UnitInterval::clamped(0.0f64).expect("in range").get();
    let hi = UnitInterval::clamped(1.0f64).expect("in range").get();
    let clamped_lines = data
        .u_values()
        .iter()
        .zip(&primary_vals)
        .zip(&lines)
        .filter(|((&u, &raw), _)| match primary {
            Primary::U(_) => u != raw,
            Primary::Z(_) => u == lo || u == hi,
        })
        .map(|(_, &line)| line)
        .collect();
    Ok(LoadedInput { data, clamped_lines })
}

fn csv_error(e: csv::Error, line: u64) -> CliError {
    CliError::input(Some(line), format!("malformed CSV: {e}"))
}
