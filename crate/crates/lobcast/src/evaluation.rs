//! Metric reporting over trained models: per-model metric rows in scaled
//! or dollar space, side-by-side comparison with best-per-column flags,
//! and long-format forecast export for external plotting.
//!
//! Everything here is a pure function of (weights, windows, mode):
//! forward passes are deterministic, and metric accumulation runs in
//! fixed index order, so repeated calls agree bit for bit.

use crate::data::{BookLayout, Feature, Side, VariableIndex, WindowPair};
use crate::model::{Forecaster, ModelError};
use crate::objective::{loss_breakdown, structure_loss, structure_violations, LossBreakdown};
use crate::tensor::{Graph, ParamSet, TensorError};
use crate::transforms::ScalerParams;

/// Which units a metric row is measured in. `Scaled` compares model
/// outputs against scaled targets; `Dollars` pushes predictions through
/// the inverse transform chain first and compares against raw targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSpace {
    Scaled,
    Dollars,
}

impl MetricSpace {
    pub fn label(self) -> &'static str {
        match self {
            MetricSpace::Scaled => "scaled",
            MetricSpace::Dollars => "dollars",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scaled" => Some(MetricSpace::Scaled),
            "dollars" => Some(MetricSpace::Dollars),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub enum EvalError {
    Model(ModelError),
    Tensor(TensorError),
    NoWindows,
}

impl std::fmt::Display for EvalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalError::Model(e) => write!(f, "model error: {e}"),
            EvalError::Tensor(e) => write!(f, "tensor error: {e}"),
            EvalError::NoWindows => write!(f, "no windows to evaluate"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

impl From<TensorError> for EvalError {
    fn from(e: TensorError) -> Self {
        EvalError::Tensor(e)
    }
}

/// Mid-price of one snapshot: the average of the best bid and ask.
pub fn mid_price(best_bid: f64, best_ask: f64) -> f64 {
    0.5 * (best_bid + best_ask)
}

/// Mid-price of one ticker per row of a value matrix.
pub fn mid_prices(matrix: &crate::tensor::Array, layout: &BookLayout, ticker: usize) -> Vec<f64> {
    let col = |side| {
        layout.column_of(VariableIndex {
            ticker,
            side,
            level: 1,
            feature: Feature::Price,
        })
    };
    let (b, a) = (col(Side::Bid), col(Side::Ask));
    (0..matrix.rows())
        .map(|r| mid_price(matrix.at(r, b), matrix.at(r, a)))
        .collect()
}

/// One model's metric row.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub model: String,
    pub space: MetricSpace,
    pub metrics: LossBreakdown,
}

impl MetricRow {
    /// CSV header: identification plus every [`LossBreakdown`] column.
    pub fn csv_header() -> String {
        format!("model,space,{}", LossBreakdown::csv_header())
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.model, self.space.label(), self.metrics.csv_row())
    }

    /// Parse a row written by [`MetricRow::csv_row`]; `None` on any
    /// malformed field.
    pub fn parse_csv(line: &str) -> Option<MetricRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            return None;
        }
        let num = |i: usize| fields[i].parse::<f64>().ok();
        Some(MetricRow {
            model: fields[0].to_string(),
            space: MetricSpace::parse(fields[1])?,
            metrics: LossBreakdown {
                forecasting: num(2)?,
                structure: num(3)?,
                structure_per_snapshot: num(4)?,
                total: num(5)?,
                w_o: num(6)?,
                violations: fields[7].parse().ok()?,
                price_mse: num(8)?,
                price_mae: num(9)?,
                volume_mse: num(10)?,
                volume_mae: num(11)?,
                mid_mse: num(12)?,
                mid_mae: num(13)?,
            },
        })
    }
}

/// Metric columns used for comparison and CSV export, in order.
pub const METRIC_COLUMNS: [&str; 9] = [
    "mid_mse",
    "mid_mae",
    "price_mse",
    "price_mae",
    "volume_mse",
    "volume_mae",
    "forecasting",
    "structure",
    "total",
];

fn metric_value(b: &LossBreakdown, column: &str) -> f64 {
    match column {
        "mid_mse" => b.mid_mse,
        "mid_mae" => b.mid_mae,
        "price_mse" => b.price_mse,
        "price_mae" => b.price_mae,
        "volume_mse" => b.volume_mse,
        "volume_mae" => b.volume_mae,
        "forecasting" => b.forecasting,
        "structure" => b.structure,
        "total" => b.total,
        other => panic!("unknown metric column {other:?}"),
    }
}

/// Evaluate one model over a window set. Per window, the prediction and
/// truth are placed into `space`, a full [`LossBreakdown`] is computed,
/// and the rows are averaged (violations summed).
pub fn evaluate<M: Forecaster>(
    label: &str,
    model: &M,
    params: &ParamSet,
    windows: &[WindowPair],
    scalers: &ScalerParams,
    layout: &BookLayout,
    space: MetricSpace,
    w_o: f64,
) -> Result<MetricRow, EvalError> {
    if windows.is_empty() {
        return Err(EvalError::NoWindows);
    }
    let mut rows = Vec::with_capacity(windows.len());
    for w in windows {
        let g = Graph::new();
        let bound = params.bind(&g);
        let pred = model.predict(&g, &bound, w)?.value();
        let b = match space {
            MetricSpace::Scaled => loss_breakdown(&pred, &w.target, layout, w_o)?,
            MetricSpace::Dollars => {
                let dollars = scalers.invert_window(&pred, &w.anchor);
                loss_breakdown(&dollars, &w.raw_target, layout, w_o)?
            }
        };
        rows.push(b);
    }
    Ok(MetricRow {
        model: label.to_string(),
        space,
        metrics: LossBreakdown::mean_of(&rows),
    })
}

/// A metric table with per-column winners marked.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<MetricRow>,
    /// `flags[r][c]`: row `r` attains the column minimum of
    /// [`METRIC_COLUMNS`]`[c]` (ties flag every minimizer).
    pub flags: Vec<Vec<bool>>,
}

/// Mark, for each metric column, which rows attain the minimum.
pub fn compare(rows: Vec<MetricRow>) -> Comparison {
    let mut flags = vec![vec![false; METRIC_COLUMNS.len()]; rows.len()];
    for (c, col) in METRIC_COLUMNS.iter().enumerate() {
        let min = rows
            .iter()
            .map(|r| metric_value(&r.metrics, col))
            .fold(f64::INFINITY, f64::min);
        for (r, row) in rows.iter().enumerate() {
            flags[r][c] = metric_value(&row.metrics, col) == min;
        }
    }
    Comparison { rows, flags }
}

impl Comparison {
    /// CSV with one row per model: the full metric row, then `best_in` —
    /// a semicolon-separated list of the [`METRIC_COLUMNS`] this row wins.
    pub fn csv(&self) -> String {
        let mut out = MetricRow::csv_header();
        out.push_str(",best_in\n");
        for (r, row) in self.rows.iter().enumerate() {
            let best: Vec<&str> = METRIC_COLUMNS
                .iter()
                .enumerate()
                .filter(|(c, _)| self.flags[r][*c])
                .map(|(_, col)| *col)
                .collect();
            out.push_str(&format!("{},{}\n", row.csv_row(), best.join(";")));
        }
        out
    }
}

/// Export one window's forecast as a long-format CSV in original units:
/// one row per (grid point, variable), context rows tagged and carrying
/// the raw input as truth, target rows carrying both truth and the
/// model's dollar-space prediction. A comment block at the end counts
/// ordinal structure violations per predicted snapshot.
pub fn export_forecast<M: Forecaster>(
    model: &M,
    params: &ParamSet,
    window: &WindowPair,
    scalers: &ScalerParams,
    layout: &BookLayout,
) -> Result<String, EvalError> {
    let g = Graph::new();
    let bound = params.bind(&g);
    let pred = model.predict(&g, &bound, window)?.value();
    let dollars = scalers.invert_window(&pred, &window.anchor);

    let n = layout.n_variables();
    let mut out = String::from("time,kind,variable,truth,prediction\n");
    for r in 0..window.context_len() {
        let t = window.context_times[r];
        for c in 0..n {
            out.push_str(&format!(
                "{},context,{},{},\n",
                t,
                layout.column_label(c),
                window.raw_context.at(r, c)
            ));
        }
    }
    for r in 0..window.target_len() {
        let t = window.target_times[r];
        for c in 0..n {
            out.push_str(&format!(
                "{},target,{},{},{}\n",
                t,
                layout.column_label(c),
                window.raw_target.at(r, c),
                dollars.at(r, c)
            ));
        }
    }

    out.push_str("# structure violations per predicted snapshot\n");
    let mut total = 0;
    for r in 0..window.target_len() {
        let row = dollars.row_slice(r, 1);
        let v = structure_violations(&row, layout);
        total += v;
        out.push_str(&format!(
            "# step={} time={} violations={}\n",
            r + 1,
            window.target_times[r],
            v
        ));
    }
    out.push_str(&format!(
        "# total violations={} structure_loss={}\n",
        total,
        structure_loss(&dollars, layout)
    ));
    Ok(out)
}
