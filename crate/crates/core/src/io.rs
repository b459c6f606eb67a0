//! Text formats.
//!
//! `.dmap`: first line `<rows> <cols>`, then `rows` lines of `cols`
//! whitespace-separated decimal floats. Rows must equal cols and be a power
//! of two. Values are written with 17 significant digits so a write/read
//! cycle reproduces every `f64` bit for bit.
//!
//! Point CSV: one `x,y` pair per line with an optional `x,y` header line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{PmlError, Result};
use crate::pyramid::{DensityMap, PointAnnotations, MAX_LEVEL};

pub fn parse_dmap(text: &str) -> Result<DensityMap> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (line_no, header) = lines
        .next()
        .ok_or_else(|| PmlError::parse(1, "missing `<rows> <cols>` header"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(PmlError::parse(line_no, "header must be `<rows> <cols>`"));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| PmlError::parse(line_no, format!("bad dimension {s:?}: {e}")))
    };
    let (rows, cols) = (parse_dim(dims[0])?, parse_dim(dims[1])?);
    if rows != cols {
        return Err(PmlError::parse(
            line_no,
            format!("map must be square, got {rows}x{cols}"),
        ));
    }
    if !rows.is_power_of_two() {
        return Err(PmlError::parse(
            line_no,
            format!("side {rows} is not a power of two"),
        ));
    }
    let level = rows.trailing_zeros() as usize;
    if level > MAX_LEVEL {
        return Err(PmlError::parse(
            line_no,
            format!("side {rows} exceeds the maximum 2^{MAX_LEVEL}"),
        ));
    }

    // bounded by the input, not the header
    let mut data = Vec::with_capacity((rows * cols).min(text.len() / 2 + 1));
    let mut last_line = line_no;
    for _ in 0..rows {
        let (n, line) = lines.next().ok_or_else(|| {
            PmlError::parse(last_line + 1, format!("expected {rows} data rows"))
        })?;
        last_line = n;
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|e| PmlError::parse(n, format!("bad value {tok:?}: {e}")))?;
            if !v.is_finite() {
                return Err(PmlError::parse(n, format!("non-finite value {tok:?}")));
            }
            data.push(v);
        }
        let found = data.len() - before;
        if found != cols {
            return Err(PmlError::parse(
                n,
                format!("expected {cols} values, found {found}"),
            ));
        }
    }
    if let Some((n, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(PmlError::parse(n, "unexpected content after the last row"));
    }
    DensityMap::new(level, data)
}

pub fn format_dmap(map: &DensityMap) -> String {
    let side = map.side();
    let mut out = String::with_capacity(map.data().len() * 24 + 16);
    let _ = writeln!(out, "{side} {side}");
    for row in map.data().chunks_exact(side) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn read_dmap(path: impl AsRef<Path>) -> Result<DensityMap> {
    parse_dmap(&fs::read_to_string(path)?)
}

pub fn write_dmap(path: impl AsRef<Path>, map: &DensityMap) -> Result<()> {
    fs::write(path, format_dmap(map))?;
    Ok(())
}

/// Parses point coordinates; bounds are checked once the scene size is known.
pub fn parse_points(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut points = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if i == 0 && record.len() == 2 && &record[0] == "x" && &record[1] == "y" {
            continue;
        }
        if record.len() != 2 {
            return Err(PmlError::parse(
                line,
                format!("expected `x,y`, found {} fields", record.len()),
            ));
        }
        let coord = |s: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|e| PmlError::parse(line, format!("bad coordinate {s:?}: {e}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(PmlError::parse(line, format!("non-finite coordinate {s:?}")))
            }
        };
        points.push((coord(&record[0])?, coord(&record[1])?));
    }
    Ok(points)
}

pub fn format_points(ann: &PointAnnotations) -> String {
    let mut out = String::from("x,y\n");
    for (x, y) in ann.points() {
        let _ = writeln!(out, "{x:.16e},{y:.16e}");
    }
    out
}

pub fn read_points(path: impl AsRef<Path>, scene_size: f64) -> Result<PointAnnotations> {
    PointAnnotations::new(parse_points(&fs::read_to_string(path)?)?, scene_size)
}
