//! On-disk dataset format: a metadata line plus a CSV matrix.
//!
//! ```text
//! # interval=5 start=34200 end=57600 levels=2 tickers=AAA,BBB
//! time,AAA.bid1.price,AAA.bid1.vol,...
//! 34200,585.9,60,...
//! ```
//!
//! The first line carries everything needed to rebuild the [`BookLayout`];
//! the CSV header is derived from it and written for human benefit. Values
//! are printed with Rust's shortest-round-trip float formatting, so a
//! write/read/write cycle is byte-identical and values survive exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::tensor::Array;

use super::{BookLayout, DataError, Dataset};

/// Serialize a gridded dataset. Ticker labels must be free of the
/// format's structural characters (commas, whitespace, `.`).
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let text = render_dataset(ds)?;
    std::fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// The exact file contents [`write_dataset`] would produce.
pub fn render_dataset(ds: &Dataset) -> Result<String, DataError> {
    for label in ds.layout.ticker_labels() {
        if label.is_empty()
            || label
                .chars()
                .any(|c| c == ',' || c == '.' || c.is_whitespace())
        {
            return Err(DataError::BadParams {
                detail: format!("ticker label {label:?} cannot be stored in a dataset file"),
            });
        }
    }
    assert_eq!(ds.times.len(), ds.matrix.rows(), "times/matrix misaligned");
    assert_eq!(
        ds.layout.n_variables(),
        ds.matrix.cols(),
        "layout/matrix misaligned"
    );

    let mut out = String::new();
    let (start, end) = (
        ds.times.first().copied().unwrap_or(0.0),
        ds.times.last().copied().unwrap_or(0.0),
    );
    let _ = writeln!(
        out,
        "# interval={} start={} end={} levels={} tickers={}",
        ds.interval,
        start,
        end,
        ds.layout.levels(),
        ds.layout.ticker_labels().join(",")
    );
    out.push_str("time");
    for c in 0..ds.layout.n_variables() {
        let _ = write!(out, ",{}", ds.layout.column_label(c));
    }
    out.push('\n');
    for (i, &t) in ds.times.iter().enumerate() {
        let _ = write!(out, "{t}");
        for &v in ds.matrix.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Read a dataset file written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: shown.clone(),
        source,
    })?;
    parse_dataset(&text, &shown)
}

fn parse_dataset(text: &str, path: &str) -> Result<Dataset, DataError> {
    let malformed = |detail: String| DataError::MalformedCache {
        path: path.to_string(),
        detail,
    };
    let mut lines = text.lines();
    let meta = lines
        .next()
        .ok_or_else(|| malformed("empty file".to_string()))?;
    let meta = meta
        .strip_prefix("# ")
        .ok_or_else(|| malformed("first line must start with \"# \"".to_string()))?;

    let mut interval = None;
    let mut start = None;
    let mut levels = None;
    let mut tickers: Option<Vec<String>> = None;
    for token in meta.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| malformed(format!("metadata token {token:?} is not key=value")))?;
        match key {
            "interval" => interval = Some(parse_meta_f64(value, key, path)?),
            "start" => start = Some(parse_meta_f64(value, key, path)?),
            "end" => {} // implied by start + interval and the row count
            "levels" => {
                levels = Some(value.parse::<usize>().map_err(|_| {
                    malformed(format!("levels {value:?} is not an integer"))
                })?)
            }
            "tickers" => tickers = Some(value.split(',').map(str::to_string).collect()),
            other => return Err(malformed(format!("unknown metadata key {other:?}"))),
        }
    }
    let interval = interval.ok_or_else(|| malformed("missing interval".to_string()))?;
    let start = start.ok_or_else(|| malformed("missing start".to_string()))?;
    let levels = levels.ok_or_else(|| malformed("missing levels".to_string()))?;
    let tickers = tickers.ok_or_else(|| malformed("missing tickers".to_string()))?;
    if levels == 0 || tickers.is_empty() || tickers.iter().any(String::is_empty) {
        return Err(malformed("empty layout".to_string()));
    }
    let layout = BookLayout::new(tickers, levels);
    let n = layout.n_variables();

    let header = lines
        .next()
        .ok_or_else(|| malformed("missing column header".to_string()))?;
    let expected_cols = n + 1;
    let found_cols = header.split(',').count();
    if found_cols != expected_cols {
        return Err(malformed(format!(
            "header has {found_cols} columns, metadata implies {expected_cols}"
        )));
    }

    let mut times = Vec::new();
    let mut data = Vec::new();
    for (idx, line) in lines.enumerate() {
        let row = idx + 3; // 1-based file line number
        let mut cells = line.split(',');
        let time_cell = cells.next().unwrap_or("");
        let t: f64 = time_cell.parse().map_err(|_| DataError::BadCell {
            path: path.to_string(),
            row,
            detail: format!("time {time_cell:?} is not a number"),
        })?;
        let expect_t = start + times.len() as f64 * interval;
        if (t - expect_t).abs() > interval * 1e-9 {
            return Err(malformed(format!(
                "line {row}: time {t} is off the grid (expected {expect_t})"
            )));
        }
        times.push(t);
        let mut count = 0;
        for cell in cells {
            let v: f64 = cell.parse().map_err(|_| DataError::BadCell {
                path: path.to_string(),
                row,
                detail: format!("value {cell:?} is not a number"),
            })?;
            data.push(v);
            count += 1;
        }
        if count != n {
            return Err(DataError::ColumnCountMismatch {
                path: path.to_string(),
                row,
                expected: expected_cols,
                found: count + 1,
            });
        }
    }
    if times.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let rows = times.len();
    Ok(Dataset {
        layout,
        interval,
        times,
        matrix: Array::new(vec![rows, n], data),
    })
}

fn parse_meta_f64(value: &str, key: &str, path: &str) -> Result<f64, DataError> {
    value.parse::<f64>().map_err(|_| DataError::MalformedCache {
        path: path.to_string(),
        detail: format!("{key} {value:?} is not a number"),
    })
}
