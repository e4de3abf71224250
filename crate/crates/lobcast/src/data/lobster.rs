//! Parser for LOBSTER-style order book exports.
//!
//! An export is a pair of headerless CSV files covering the same events in
//! the same order:
//!
//! - the *orderbook* file: one row per event, `4 * K` integer columns laid
//!   out `ask_p1, ask_v1, bid_p1, bid_v1, ask_p2, ...` with prices in
//!   units of 10^-4 dollars and volumes in shares;
//! - the *message* file: one row per event, `time, type, order_id, size,
//!   price, direction`; only the timestamp (seconds after midnight) is
//!   read — the book rows already carry the resulting state, so event
//!   types contribute nothing here.
//!
//! Rows whose book violates ordinal structure (crossed or non-monotone
//! levels, non-positive sizes) are treated as data corruption and rejected
//! with their 1-based row number rather than repaired.

use std::path::Path;

use super::{DataError, LobSnapshot};

/// Parse an orderbook/message file pair into event-time snapshots with
/// prices in dollars. Empty files yield an empty list.
pub fn parse_lobster(
    orderbook_path: &Path,
    message_path: &Path,
    levels: usize,
) -> Result<Vec<LobSnapshot>, DataError> {
    assert!(levels > 0, "levels must be positive");
    let book_rows = read_rows(orderbook_path)?;
    let msg_rows = read_rows(message_path)?;
    if book_rows.len() != msg_rows.len() {
        return Err(DataError::RowCountMismatch {
            orderbook_rows: book_rows.len(),
            message_rows: msg_rows.len(),
        });
    }

    let book_path = orderbook_path.display().to_string();
    let msg_path = message_path.display().to_string();
    let mut snapshots = Vec::with_capacity(book_rows.len());
    for (idx, (book, msg)) in book_rows.iter().zip(&msg_rows).enumerate() {
        let row = idx + 1;
        if book.len() != 4 * levels {
            return Err(DataError::ColumnCountMismatch {
                path: book_path.clone(),
                row,
                expected: 4 * levels,
                found: book.len(),
            });
        }
        if msg.is_empty() {
            return Err(DataError::ColumnCountMismatch {
                path: msg_path.clone(),
                row,
                expected: 6,
                found: 0,
            });
        }
        let timestamp = parse_f64(&msg[0], &msg_path, row)?;

        let mut snap = LobSnapshot {
            timestamp,
            bid_prices: Vec::with_capacity(levels),
            bid_volumes: Vec::with_capacity(levels),
            ask_prices: Vec::with_capacity(levels),
            ask_volumes: Vec::with_capacity(levels),
        };
        for k in 0..levels {
            let base = 4 * k;
            let ask_p = parse_i64(&book[base], &book_path, row)?;
            let ask_v = parse_i64(&book[base + 1], &book_path, row)?;
            let bid_p = parse_i64(&book[base + 2], &book_path, row)?;
            let bid_v = parse_i64(&book[base + 3], &book_path, row)?;
            snap.ask_prices.push(ask_p as f64 / 1e4);
            snap.ask_volumes.push(ask_v as f64);
            snap.bid_prices.push(bid_p as f64 / 1e4);
            snap.bid_volumes.push(bid_v as f64);
        }
        if let Err(detail) = snap.validate() {
            return Err(DataError::OrdinalViolation { row, detail });
        }
        snapshots.push(snap);
    }
    Ok(snapshots)
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>, DataError> {
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => DataError::Io {
                path: shown.clone(),
                source,
            },
            other => DataError::BadCell {
                path: shown.clone(),
                row: 0,
                detail: format!("{other:?}"),
            },
        })?;
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::BadCell {
            path: shown.clone(),
            row: idx + 1,
            detail: e.to_string(),
        })?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

fn parse_i64(cell: &str, path: &str, row: usize) -> Result<i64, DataError> {
    cell.parse::<i64>().map_err(|_| DataError::BadCell {
        path: path.to_string(),
        row,
        detail: format!("expected an integer, found {cell:?}"),
    })
}

fn parse_f64(cell: &str, path: &str, row: usize) -> Result<f64, DataError> {
    cell.parse::<f64>().map_err(|_| DataError::BadCell {
        path: path.to_string(),
        row,
        detail: format!("expected a number, found {cell:?}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn three_row_fixture_parses_exactly() {
        let dir = tempfile::tempdir().unwrap();
        // Two levels. Dollar values chosen so the 1e-4 conversion is exact.
        let book = write_file(
            dir.path(),
            "book.csv",
            "5859400,100,5859000,60,5859800,40,5858700,20\n\
             5859500,110,5859100,61,5859900,41,5858800,21\n\
             5859300,120,5858900,62,5859700,42,5858600,22\n",
        );
        let msg = write_file(
            dir.path(),
            "msg.csv",
            "34200.5,1,11,100,5859400,1\n\
             34201.25,4,12,50,5859000,-1\n\
             34202.0,1,13,10,5859300,1\n",
        );
        let snaps = parse_lobster(&book, &msg, 2).unwrap();
        assert_eq!(snaps.len(), 3);
        assert_eq!(snaps[0].timestamp, 34200.5);
        assert_eq!(snaps[0].ask_prices, vec![585.94, 585.98]);
        assert_eq!(snaps[0].ask_volumes, vec![100.0, 40.0]);
        assert_eq!(snaps[0].bid_prices, vec![585.90, 585.87]);
        assert_eq!(snaps[0].bid_volumes, vec![60.0, 20.0]);
        assert_eq!(snaps[2].timestamp, 34202.0);
        assert_eq!(snaps[2].bid_prices, vec![585.89, 585.86]);
    }

    #[test]
    fn empty_files_yield_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let book = write_file(dir.path(), "book.csv", "");
        let msg = write_file(dir.path(), "msg.csv", "");
        assert!(parse_lobster(&book, &msg, 5).unwrap().is_empty());
    }

    #[test]
    fn row_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let book = write_file(dir.path(), "book.csv", "1000000,1,990000,1\n");
        let msg = write_file(dir.path(), "msg.csv", "");
        match parse_lobster(&book, &msg, 1).unwrap_err() {
            DataError::RowCountMismatch { orderbook_rows, message_rows } => {
                assert_eq!((orderbook_rows, message_rows), (1, 0));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn wrong_column_count_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let book = write_file(
            dir.path(),
            "book.csv",
            "1000000,1,990000,1\n1000000,1,990000\n",
        );
        let msg = write_file(dir.path(), "msg.csv", "1.0,1,1,1,1,1\n2.0,1,1,1,1,1\n");
        match parse_lobster(&book, &msg, 1).unwrap_err() {
            DataError::ColumnCountMismatch { row, expected, found, .. } => {
                assert_eq!((row, expected, found), (2, 4, 3));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn crossed_book_is_rejected_with_row_number() {
        let dir = tempfile::tempdir().unwrap();
        // Row 2 has best bid above best ask.
        let book = write_file(
            dir.path(),
            "book.csv",
            "1000000,5,990000,5\n1000000,5,1010000,5\n",
        );
        let msg = write_file(dir.path(), "msg.csv", "1.0,1,1,1,1,1\n2.0,1,1,1,1,1\n");
        match parse_lobster(&book, &msg, 1).unwrap_err() {
            DataError::OrdinalViolation { row, detail } => {
                assert_eq!(row, 2);
                assert!(detail.contains("best bid"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn non_integer_price_is_a_bad_cell() {
        let dir = tempfile::tempdir().unwrap();
        let book = write_file(dir.path(), "book.csv", "100.5,1,99,1\n");
        let msg = write_file(dir.path(), "msg.csv", "1.0,1,1,1,1,1\n");
        assert!(matches!(
            parse_lobster(&book, &msg, 1).unwrap_err(),
            DataError::BadCell { row: 1, .. }
        ));
    }
}
