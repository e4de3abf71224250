//! Stationarizing and scaling transforms with exact inverses.
//!
//! Prices are non-stationary levels; the model works better on relative
//! first differences. Volumes are already level-ish and stay raw until
//! scaling. The full pipeline (mode `Both`) is, per variable:
//!
//! ```text
//! price:   p -> c_i = (p_i - p_{i-1}) / p_{i-1}   -> min-max over train
//! volume:  v -> (unchanged, row-aligned)          -> min-max over train
//! ```
//!
//! Differencing consumes the first grid row of each segment, so the
//! stationarized matrix row `i` describes the step *into* raw row `i + 1`.
//! All downstream code works on row-aligned pairs of (stationarized, raw)
//! matrices produced here.
//!
//! Every step has an exact inverse. Multi-step price reconstruction is
//! anchored at the raw price of the window's last context row:
//! `p_h = anchor * prod_{j<=h} (1 + c_j)`. The same inverse exists twice —
//! once over plain arrays for evaluation, once over graph tensors so the
//! ordinal structure penalty can be differentiated in dollar space.

use std::fmt;

use crate::data::grid::make_windows;
use crate::data::{DataError, Dataset, Split, WindowPair};
use crate::tensor::{Array, Graph, Tensor, TensorError};

/// Which stationarizing/scaling steps run. Tags mirror the three
/// preprocessing columns of the transform comparison: relative differencing
/// alone, range scaling alone, or both in sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformMode {
    PercentOnly,
    MinMaxOnly,
    Both,
}

impl TransformMode {
    pub fn label(self) -> &'static str {
        match self {
            TransformMode::PercentOnly => "percent",
            TransformMode::MinMaxOnly => "minmax",
            TransformMode::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "percent" => Some(TransformMode::PercentOnly),
            "minmax" => Some(TransformMode::MinMaxOnly),
            "both" => Some(TransformMode::Both),
            _ => None,
        }
    }

    fn differences(self) -> bool {
        matches!(self, TransformMode::PercentOnly | TransformMode::Both)
    }

    fn scales(self) -> bool {
        matches!(self, TransformMode::MinMaxOnly | TransformMode::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransformError {
    NonPositivePrice { column: usize, row: usize, value: f64 },
    ChangeBelowMinusOne { index: usize, value: f64 },
}

impl fmt::Display for TransformError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformError::NonPositivePrice { column, row, value } => write!(
                f,
                "price column {column} row {row} is {value}; differencing needs positive prices"
            ),
            TransformError::ChangeBelowMinusOne { index, value } => write!(
                f,
                "change {value} at step {index} is not above -1; no positive price reproduces it"
            ),
        }
    }
}

impl std::error::Error for TransformError {}

/// Relative first difference of one positive series:
/// `out_i = (p_{i+1} - p_i) / p_i`, one element shorter than the input.
pub fn percent_change(series: &[f64]) -> Result<Vec<f64>, TransformError> {
    for (row, &p) in series.iter().enumerate() {
        if !(p > 0.0) {
            return Err(TransformError::NonPositivePrice { column: 0, row, value: p });
        }
    }
    Ok(series.windows(2).map(|w| (w[1] - w[0]) / w[0]).collect())
}

/// Exact inverse of [`percent_change`] given the price immediately before
/// the first change: `p_i = anchor * prod_{j<=i} (1 + change_j)`.
pub fn inverse_percent_change(changes: &[f64], anchor: f64) -> Result<Vec<f64>, TransformError> {
    assert!(anchor > 0.0, "anchor price must be positive");
    for (index, &c) in changes.iter().enumerate() {
        if !(c > -1.0) {
            return Err(TransformError::ChangeBelowMinusOne { index, value: c });
        }
    }
    Ok(reconstruct_prices(changes, anchor))
}

/// Total variant of [`inverse_percent_change`] for model predictions,
/// which are unconstrained: a predicted change at or below -1 simply
/// reconstructs a non-positive price and the error metrics see it.
pub fn reconstruct_prices(changes: &[f64], anchor: f64) -> Vec<f64> {
    let mut p = anchor;
    changes
        .iter()
        .map(|&c| {
            p *= 1.0 + c;
            p
        })
        .collect()
}

/// Fitted transform state: per-column training ranges plus the price/volume
/// discrimination. Windows carry their own reconstruction anchors.
#[derive(Debug, Clone)]
pub struct ScalerParams {
    pub mode: TransformMode,
    pub is_price: Vec<bool>,
    /// Per-column minimum of the stationarized training matrix.
    pub mins: Vec<f64>,
    /// Per-column maximum of the stationarized training matrix.
    pub maxs: Vec<f64>,
}

impl ScalerParams {
    pub fn n_variables(&self) -> usize {
        self.is_price.len()
    }

    /// Fit ranges on the stationarized training matrix only.
    pub fn fit(train_stationarized: &Array, is_price: &[bool], mode: TransformMode) -> Self {
        let n = train_stationarized.cols();
        assert_eq!(n, is_price.len(), "column flags misaligned");
        let mut mins = vec![f64::INFINITY; n];
        let mut maxs = vec![f64::NEG_INFINITY; n];
        for r in 0..train_stationarized.rows() {
            for (c, &v) in train_stationarized.row(r).iter().enumerate() {
                mins[c] = mins[c].min(v);
                maxs[c] = maxs[c].max(v);
            }
        }
        ScalerParams {
            mode,
            is_price: is_price.to_vec(),
            mins,
            maxs,
        }
    }

    /// Map one value of column `c` into model space. Degenerate columns
    /// (zero training range) map to 0.5 so the pipeline stays total.
    fn scale_cell(&self, c: usize, v: f64) -> f64 {
        if !self.mode.scales() {
            return v;
        }
        let range = self.maxs[c] - self.mins[c];
        if range == 0.0 {
            0.5
        } else {
            (v - self.mins[c]) / range
        }
    }

    /// Exact inverse of [`ScalerParams::scale_cell`]; degenerate columns
    /// return the constant they were trained on.
    fn unscale_cell(&self, c: usize, y: f64) -> f64 {
        if !self.mode.scales() {
            return y;
        }
        let range = self.maxs[c] - self.mins[c];
        if range == 0.0 {
            self.mins[c]
        } else {
            y * range + self.mins[c]
        }
    }

    /// Apply range scaling to a whole stationarized matrix.
    pub fn scale_matrix(&self, stationarized: &Array) -> Array {
        let (rows, cols) = (stationarized.rows(), stationarized.cols());
        assert_eq!(cols, self.n_variables(), "column count mismatch");
        let mut out = stationarized.clone();
        for r in 0..rows {
            for c in 0..cols {
                out.set(r, c, self.scale_cell(c, stationarized.at(r, c)));
            }
        }
        out
    }

    /// Map a model-space prediction block back to original units using the
    /// window's anchor row (raw values at the last context grid point).
    /// Total: wild predictions reconstruct wild (possibly non-positive)
    /// prices rather than erroring.
    pub fn invert_window(&self, prediction: &Array, anchor: &[f64]) -> Array {
        let (rows, cols) = (prediction.rows(), prediction.cols());
        assert_eq!(cols, self.n_variables(), "column count mismatch");
        assert_eq!(cols, anchor.len(), "anchor misaligned");
        let mut out = prediction.clone();
        for c in 0..cols {
            let differenced = self.mode.differences() && self.is_price[c];
            let mut price = anchor[c];
            for r in 0..rows {
                let stat = self.unscale_cell(c, prediction.at(r, c));
                let raw = if differenced {
                    price *= 1.0 + stat;
                    price
                } else {
                    stat
                };
                out.set(r, c, raw);
            }
        }
        out
    }

    /// Graph-space twin of [`ScalerParams::invert_window`], used to express
    /// the ordinal structure penalty on dollar prices while keeping it
    /// differentiable. Follows the same arithmetic column for column.
    pub fn invert_window_graph<'g>(
        &self,
        g: &'g Graph,
        prediction: Tensor<'g>,
        anchor: &[f64],
    ) -> Result<Tensor<'g>, TensorError> {
        let shape = prediction.shape();
        assert_eq!(shape.len(), 2, "prediction must be a matrix");
        let (rows, cols) = (shape[0], shape[1]);
        assert_eq!(cols, self.n_variables(), "column count mismatch");

        // Range scaling inverse: y * range + min, with degenerate columns
        // pinned to their constant (range row holds 0, min row the value).
        let stat = if self.mode.scales() {
            let mut range_row = vec![0.0; cols];
            let mut min_row = vec![0.0; cols];
            for c in 0..cols {
                range_row[c] = self.maxs[c] - self.mins[c];
                min_row[c] = self.mins[c];
            }
            let range = g.constant(Array::new(vec![1, cols], range_row));
            let min = g.constant(Array::new(vec![1, cols], min_row));
            prediction.mul(range)?.add(min)?
        } else {
            prediction
        };

        if !self.mode.differences() {
            return Ok(stat);
        }
        // Cumulative product over rows for price columns, pass-through for
        // volume columns, blended with 0/1 masks.
        let mut price_mask = vec![0.0; cols];
        let mut volume_mask = vec![0.0; cols];
        for c in 0..cols {
            if self.is_price[c] {
                price_mask[c] = 1.0;
            } else {
                volume_mask[c] = 1.0;
            }
        }
        let price_mask = g.constant(Array::new(vec![1, cols], price_mask));
        let volume_mask = g.constant(Array::new(vec![1, cols], volume_mask));
        let one = g.constant(Array::ones(&[1, cols]));
        let mut running = g.constant(Array::new(vec![1, cols], anchor.to_vec()));
        let mut out_rows = Vec::with_capacity(rows);
        for r in 0..rows {
            let stat_row = stat.narrow(0, r, 1);
            running = running.mul(one.add(stat_row)?)?;
            let blended = running
                .mul(price_mask)?
                .add(stat_row.mul(volume_mask)?)?;
            out_rows.push(blended);
        }
        crate::tensor::concat(&out_rows, 0)
    }
}

/// Stationarize a raw segment: difference price columns, shift volume
/// columns to stay row-aligned. Returns the stationarized matrix plus the
/// row-aligned raw matrix and timestamps (first row dropped when
/// differencing).
pub fn stationarize(
    raw: &Array,
    times: &[f64],
    is_price: &[bool],
    mode: TransformMode,
) -> Result<(Array, Array, Vec<f64>), TransformError> {
    let (rows, cols) = (raw.rows(), raw.cols());
    assert_eq!(cols, is_price.len(), "column flags misaligned");
    assert_eq!(rows, times.len(), "times misaligned");
    if !mode.differences() {
        return Ok((raw.clone(), raw.clone(), times.to_vec()));
    }
    assert!(rows >= 2, "differencing needs at least two rows");
    let mut out = Array::zeros(&[rows - 1, cols]);
    for c in 0..cols {
        if is_price[c] {
            for r in 0..rows {
                let p = raw.at(r, c);
                if !(p > 0.0) {
                    return Err(TransformError::NonPositivePrice {
                        column: c,
                        row: r,
                        value: p,
                    });
                }
            }
            for r in 0..rows - 1 {
                let prev = raw.at(r, c);
                out.set(r, c, (raw.at(r + 1, c) - prev) / prev);
            }
        } else {
            for r in 0..rows - 1 {
                out.set(r, c, raw.at(r + 1, c));
            }
        }
    }
    Ok((out, raw.row_slice(1, rows - 1), times[1..].to_vec()))
}

#[derive(Debug)]
pub enum PipelineError {
    Data(DataError),
    Transform(TransformError),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Data(e) => e.fmt(f),
            PipelineError::Transform(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        PipelineError::Data(e)
    }
}

impl From<TransformError> for PipelineError {
    fn from(e: TransformError) -> Self {
        PipelineError::Transform(e)
    }
}

/// Transformed windows for all three chronological segments plus the
/// fitted scaler state.
pub struct PreparedData {
    pub train: Vec<WindowPair>,
    pub val: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
    pub scalers: ScalerParams,
}

/// Run the full pipeline over pre-split segments: stationarize each
/// segment independently (no differencing across split boundaries), fit
/// ranges on the training segment only, scale everything, and slide
/// windows.
pub fn prepare_windows(
    segments: &[Dataset; 3],
    mode: TransformMode,
    l_c: usize,
    l_t: usize,
    stride: usize,
) -> Result<PreparedData, PipelineError> {
    let layout = &segments[0].layout;
    let is_price: Vec<bool> = (0..layout.n_variables())
        .map(|c| layout.is_price(c))
        .collect();

    let (train_stat, train_raw, train_times) =
        stationarize(&segments[0].matrix, &segments[0].times, &is_price, mode)?;
    let scalers = ScalerParams::fit(&train_stat, &is_price, mode);

    let mut per_split = Vec::with_capacity(3);
    per_split.push((Split::Train, train_stat, train_raw, train_times));
    for (ds, split) in [(&segments[1], Split::Val), (&segments[2], Split::Test)] {
        let (stat, raw, times) = stationarize(&ds.matrix, &ds.times, &is_price, mode)?;
        per_split.push((split, stat, raw, times));
    }

    let mut windows = Vec::with_capacity(3);
    for (split, stat, raw, times) in &per_split {
        let scaled = scalers.scale_matrix(stat);
        windows.push(make_windows(&scaled, raw, times, *split, l_c, l_t, stride)?);
    }
    let test = windows.pop().expect("three splits");
    let val = windows.pop().expect("three splits");
    let train = windows.pop().expect("three splits");
    Ok(PreparedData {
        train,
        val,
        test,
        scalers,
    })
}
