//! Order book data: parsing, resampling, flattening, and windowing.
//!
//! The flow from files to model input:
//!
//! 1. [`lobster::parse_lobster`] reads an orderbook/message file pair into
//!    event-time [`LobSnapshot`]s, validating book structure row by row.
//! 2. [`grid::resample`] samples those events onto a fixed time grid
//!    (last observation carried forward), giving a [`LobSeries`] per ticker.
//! 3. [`grid::concat_tickers`] flattens the series into one numeric matrix
//!    whose columns follow the [`BookLayout`] ordering.
//! 4. [`grid::split`] cuts the matrix chronologically into train /
//!    validation / test segments, and [`grid::make_windows`] slides
//!    context/target [`WindowPair`]s over each transformed segment.
//!
//! [`synth`] generates valid-by-construction synthetic event streams so the
//! whole pipeline can run without proprietary exchange data, and [`cache`]
//! persists gridded datasets as a self-describing text format.

pub mod cache;
pub mod grid;
pub mod lobster;
pub mod synth;

use std::fmt;

use crate::tensor::Array;

/// One side of the book.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Bid,
    Ask,
}

impl Side {
    pub fn label(self) -> &'static str {
        match self {
            Side::Bid => "bid",
            Side::Ask => "ask",
        }
    }

    fn rank(self) -> usize {
        match self {
            Side::Bid => 0,
            Side::Ask => 1,
        }
    }
}

/// What a column measures: quoted price or resting volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feature {
    Price,
    Volume,
}

impl Feature {
    pub fn label(self) -> &'static str {
        match self {
            Feature::Price => "price",
            Feature::Volume => "vol",
        }
    }

    fn rank(self) -> usize {
        match self {
            Feature::Price => 0,
            Feature::Volume => 1,
        }
    }
}

/// Identity of one flattened book variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VariableIndex {
    /// Position of the ticker in the dataset, 0-based.
    pub ticker: usize,
    pub side: Side,
    /// Depth level, 1-based: level 1 is the best quote on its side.
    pub level: usize,
    pub feature: Feature,
}

/// Fixed column ordering of the flattened book matrix.
///
/// Columns are laid out lexicographically by (ticker, side, level,
/// feature), with bid before ask, levels ascending, price before volume.
/// With `T` tickers and `K` levels that yields `N = T * 2 * K * 2` columns;
/// five tickers at five levels give the familiar 100-variable book.
#[derive(Debug, Clone, PartialEq)]
pub struct BookLayout {
    tickers: Vec<String>,
    levels: usize,
}

impl BookLayout {
    pub fn new(tickers: Vec<String>, levels: usize) -> Self {
        assert!(!tickers.is_empty() && levels > 0, "empty layout");
        BookLayout { tickers, levels }
    }

    pub fn ticker_count(&self) -> usize {
        self.tickers.len()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn ticker_label(&self, t: usize) -> &str {
        &self.tickers[t]
    }

    pub fn ticker_labels(&self) -> &[String] {
        &self.tickers
    }

    /// Total flattened variable count `N`.
    pub fn n_variables(&self) -> usize {
        self.tickers.len() * 2 * self.levels * 2
    }

    /// Flat column of a variable.
    pub fn column_of(&self, v: VariableIndex) -> usize {
        assert!(v.ticker < self.tickers.len(), "ticker out of range");
        assert!(v.level >= 1 && v.level <= self.levels, "level out of range");
        ((v.ticker * 2 + v.side.rank()) * self.levels + (v.level - 1)) * 2 + v.feature.rank()
    }

    /// Inverse of [`BookLayout::column_of`].
    pub fn variable_of(&self, column: usize) -> VariableIndex {
        assert!(column < self.n_variables(), "column out of range");
        let feature = if column % 2 == 0 { Feature::Price } else { Feature::Volume };
        let rest = column / 2;
        let level = rest % self.levels + 1;
        let rest = rest / self.levels;
        let side = if rest % 2 == 0 { Side::Bid } else { Side::Ask };
        let ticker = rest / 2;
        VariableIndex { ticker, side, level, feature }
    }

    pub fn is_price(&self, column: usize) -> bool {
        column % 2 == 0
    }

    /// Human/CSV-facing column name, e.g. `AAPL.bid1.price`.
    pub fn column_label(&self, column: usize) -> String {
        let v = self.variable_of(column);
        format!(
            "{}.{}{}.{}",
            self.tickers[v.ticker],
            v.side.label(),
            v.level,
            v.feature.label()
        )
    }

    pub fn variables(&self) -> impl Iterator<Item = VariableIndex> + '_ {
        (0..self.n_variables()).map(|c| self.variable_of(c))
    }
}

/// Full book state at one instant. Level arrays run from the touch
/// outward: index 0 is the best bid/ask.
#[derive(Debug, Clone, PartialEq)]
pub struct LobSnapshot {
    /// Seconds after midnight.
    pub timestamp: f64,
    pub bid_prices: Vec<f64>,
    pub bid_volumes: Vec<f64>,
    pub ask_prices: Vec<f64>,
    pub ask_volumes: Vec<f64>,
}

impl LobSnapshot {
    pub fn levels(&self) -> usize {
        self.bid_prices.len()
    }

    /// Check the ordinal structure of a healthy book: asks strictly
    /// ascending, bids strictly descending, best bid below best ask, and
    /// everything positive. Returns a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        let k = self.levels();
        if self.bid_volumes.len() != k || self.ask_prices.len() != k || self.ask_volumes.len() != k
        {
            return Err("level arrays disagree in length".to_string());
        }
        for i in 0..k {
            if !(self.bid_prices[i] > 0.0 && self.ask_prices[i] > 0.0) {
                return Err(format!("non-positive price at level {}", i + 1));
            }
            if !(self.bid_volumes[i] > 0.0 && self.ask_volumes[i] > 0.0) {
                return Err(format!("non-positive volume at level {}", i + 1));
            }
        }
        for i in 1..k {
            if self.ask_prices[i] <= self.ask_prices[i - 1] {
                return Err(format!(
                    "ask level {} ({}) not above level {} ({})",
                    i + 1,
                    self.ask_prices[i],
                    i,
                    self.ask_prices[i - 1]
                ));
            }
            if self.bid_prices[i] >= self.bid_prices[i - 1] {
                return Err(format!(
                    "bid level {} ({}) not below level {} ({})",
                    i + 1,
                    self.bid_prices[i],
                    i,
                    self.bid_prices[i - 1]
                ));
            }
        }
        if k > 0 && self.bid_prices[0] >= self.ask_prices[0] {
            return Err(format!(
                "best bid {} not below best ask {}",
                self.bid_prices[0], self.ask_prices[0]
            ));
        }
        Ok(())
    }
}

/// One ticker's book sampled on a uniform time grid.
#[derive(Debug, Clone)]
pub struct LobSeries {
    pub ticker: String,
    /// Grid spacing in seconds.
    pub interval: f64,
    /// Timestamp of the first grid point, seconds after midnight.
    pub start_time: f64,
    pub snapshots: Vec<LobSnapshot>,
}

impl LobSeries {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Grid timestamp of point `i`, computed (not accumulated) so spacing
    /// is exact in floating point.
    pub fn time_at(&self, i: usize) -> f64 {
        self.start_time + i as f64 * self.interval
    }
}

/// Gridded, flattened multi-ticker book: one row per grid point, one
/// column per [`VariableIndex`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub layout: BookLayout,
    pub interval: f64,
    /// Grid timestamps, one per matrix row.
    pub times: Vec<f64>,
    pub matrix: Array,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.times.len()
    }
}

/// Which chronological segment a window came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One training/evaluation example: a context block and the target block
/// that immediately follows it on the grid.
///
/// `context`/`target` are in model space (whatever the transform pipeline
/// produced); `raw_context`/`raw_target` hold the same rows in original
/// units, and `anchor` the raw row at the last context grid point —
/// together they let predictions be mapped back to dollars and shares per
/// window and let exports show the lead-in in original units.
#[derive(Debug, Clone)]
pub struct WindowPair {
    pub split: Split,
    /// `L_c x N`, model space.
    pub context: Array,
    /// `L_t x N`, model space.
    pub target: Array,
    /// `L_c x N`, original units.
    pub raw_context: Array,
    /// `L_t x N`, original units.
    pub raw_target: Array,
    /// Length `N`: raw values at the final context grid point.
    pub anchor: Vec<f64>,
    pub context_times: Vec<f64>,
    pub target_times: Vec<f64>,
}

impl WindowPair {
    pub fn context_len(&self) -> usize {
        self.context.rows()
    }

    pub fn target_len(&self) -> usize {
        self.target.rows()
    }

    pub fn n_variables(&self) -> usize {
        self.context.cols()
    }
}

/// Errors across parsing, gridding, and generation.
#[derive(Debug)]
pub enum DataError {
    Io {
        path: String,
        source: std::io::Error,
    },
    /// A CSV cell failed to parse as the expected number type.
    BadCell {
        path: String,
        row: usize,
        detail: String,
    },
    ColumnCountMismatch {
        path: String,
        row: usize,
        expected: usize,
        found: usize,
    },
    RowCountMismatch {
        orderbook_rows: usize,
        message_rows: usize,
    },
    OrdinalViolation {
        row: usize,
        detail: String,
    },
    EmptyInput,
    GridMismatch {
        detail: String,
    },
    TooShort {
        len: usize,
        needed: usize,
    },
    BadParams {
        detail: String,
    },
    MalformedCache {
        path: String,
        detail: String,
    },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{path}: {source}"),
            DataError::BadCell { path, row, detail } => {
                write!(f, "{path} row {row}: {detail}")
            }
            DataError::ColumnCountMismatch { path, row, expected, found } => {
                write!(f, "{path} row {row}: expected {expected} columns, found {found}")
            }
            DataError::RowCountMismatch { orderbook_rows, message_rows } => write!(
                f,
                "orderbook file has {orderbook_rows} rows but message file has {message_rows}"
            ),
            DataError::OrdinalViolation { row, detail } => {
                write!(f, "row {row}: invalid book: {detail}")
            }
            DataError::EmptyInput => write!(f, "no snapshots to work with"),
            DataError::GridMismatch { detail } => write!(f, "ticker grids disagree: {detail}"),
            DataError::TooShort { len, needed } => {
                write!(f, "segment of {len} rows is shorter than the required {needed}")
            }
            DataError::BadParams { detail } => write!(f, "bad generator parameters: {detail}"),
            DataError::MalformedCache { path, detail } => {
                write!(f, "{path}: malformed dataset file: {detail}")
            }
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(bids: &[(f64, f64)], asks: &[(f64, f64)]) -> LobSnapshot {
        LobSnapshot {
            timestamp: 0.0,
            bid_prices: bids.iter().map(|x| x.0).collect(),
            bid_volumes: bids.iter().map(|x| x.1).collect(),
            ask_prices: asks.iter().map(|x| x.0).collect(),
            ask_volumes: asks.iter().map(|x| x.1).collect(),
        }
    }

    #[test]
    fn layout_counts_and_round_trip() {
        let five = BookLayout::new(
            vec!["A".into(), "B".into(), "C".into(), "D".into(), "E".into()],
            5,
        );
        assert_eq!(five.n_variables(), 100);
        let one = BookLayout::new(vec!["A".into()], 5);
        assert_eq!(one.n_variables(), 20);
        for col in 0..five.n_variables() {
            assert_eq!(five.column_of(five.variable_of(col)), col);
        }
        // Spot-check the documented ordering against a hand computation:
        // ticker 0, ask side, level 1, price sits after all 10 bid columns.
        let v = VariableIndex {
            ticker: 0,
            side: Side::Ask,
            level: 1,
            feature: Feature::Price,
        };
        assert_eq!(five.column_of(v), 10);
        assert_eq!(five.column_label(10), "A.ask1.price");
    }

    #[test]
    fn snapshot_validation_catches_each_invariant() {
        let good = snap(
            &[(99.9, 10.0), (99.8, 5.0)],
            &[(100.0, 7.0), (100.1, 3.0)],
        );
        assert!(good.validate().is_ok());

        let crossed = snap(&[(100.2, 1.0), (99.8, 1.0)], &[(100.0, 1.0), (100.1, 1.0)]);
        assert!(crossed.validate().unwrap_err().contains("best bid"));

        let asks_flat = snap(&[(99.9, 1.0), (99.8, 1.0)], &[(100.0, 1.0), (100.0, 1.0)]);
        assert!(asks_flat.validate().unwrap_err().contains("ask level"));

        let bids_up = snap(&[(99.8, 1.0), (99.9, 1.0)], &[(100.0, 1.0), (100.1, 1.0)]);
        assert!(bids_up.validate().unwrap_err().contains("bid level"));

        let zero_vol = snap(&[(99.9, 0.0), (99.8, 1.0)], &[(100.0, 1.0), (100.1, 1.0)]);
        assert!(zero_vol.validate().unwrap_err().contains("volume"));

        let neg_price = snap(&[(-1.0, 1.0), (-2.0, 1.0)], &[(100.0, 1.0), (100.1, 1.0)]);
        assert!(neg_price.validate().unwrap_err().contains("price"));
    }
}
