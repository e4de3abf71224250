//! Loss functions: forecasting error over every predicted cell, the
//! ordinal structure penalty on predicted price ladders, and their
//! weighted total.
//!
//! The structure penalty encodes three families of constraints a real
//! book satisfies by construction — ask prices ascend with depth, bid
//! prices descend, and the best bid sits below the best ask:
//!
//! ```text
//! sum over k < K:  relu(ask[k] - ask[k+1]) + relu(bid[k+1] - bid[k])
//! plus             relu(bid[1] - ask[1])
//! ```
//!
//! summed over predicted snapshots and tickers. A valid ladder scores an
//! exact zero; each strict violation contributes its dollar magnitude.
//! Equal adjacent prices are a tie, not a violation — the hinge is the
//! printed formula, with no added margin.
//!
//! Everything exists twice: as plain `f64` functions over arrays (used
//! for metrics and as the oracle in tests) and as graph ops (used in
//! training, differentiable end to end, including through the inverse
//! transform chain when the penalty is evaluated in dollars).

use crate::data::{BookLayout, Feature, Side, VariableIndex, WindowPair};
use crate::tensor::{Array, Graph, Tensor, TensorError};
use crate::transforms::ScalerParams;

/// Which price space the structure penalty sees. Ordinal constraints are
/// statements about actual prices, so `Dollars` (reconstructed through
/// the inverse transform, anchored at the last context price) is the
/// default; `Scaled` applies the hinge directly to model outputs for
/// comparison with scaled-space conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructureSpace {
    Dollars,
    Scaled,
}

impl StructureSpace {
    pub fn label(self) -> &'static str {
        match self {
            StructureSpace::Dollars => "dollars",
            StructureSpace::Scaled => "scaled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dollars" => Some(StructureSpace::Dollars),
            "scaled" => Some(StructureSpace::Scaled),
            _ => None,
        }
    }
}

/// Mean squared error over every cell — prices and volumes alike. Mean
/// (not sum) reduction, so magnitudes are comparable across window and
/// book geometries.
pub fn forecasting_loss(pred: &Array, truth: &Array) -> Result<f64, TensorError> {
    check_same_shape("forecasting_loss", pred, truth)?;
    let n = pred.numel() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

/// Mean absolute error over every cell. A reporting metric, never a
/// training term.
pub fn mae(pred: &Array, truth: &Array) -> Result<f64, TensorError> {
    check_same_shape("mae", pred, truth)?;
    let n = pred.numel() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / n)
}

fn check_same_shape(op: &'static str, a: &Array, b: &Array) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Structure penalty of one predicted snapshot, given its price ladders
/// ordered by depth (index 0 = level 1, the touch).
pub fn snapshot_structure_loss(bid_prices: &[f64], ask_prices: &[f64]) -> f64 {
    assert_eq!(bid_prices.len(), ask_prices.len(), "ladder depth mismatch");
    let k = bid_prices.len();
    let hinge = |x: f64| if x > 0.0 { x } else { 0.0 };
    let mut loss = 0.0;
    for i in 0..k.saturating_sub(1) {
        loss += hinge(ask_prices[i] - ask_prices[i + 1]);
        loss += hinge(bid_prices[i + 1] - bid_prices[i]);
    }
    loss + hinge(bid_prices[0] - ask_prices[0])
}

/// Number of strict ordinal violations in one snapshot: positive exactly
/// when [`snapshot_structure_loss`] is.
pub fn snapshot_structure_violations(bid_prices: &[f64], ask_prices: &[f64]) -> usize {
    assert_eq!(bid_prices.len(), ask_prices.len(), "ladder depth mismatch");
    let k = bid_prices.len();
    let mut count = 0;
    for i in 0..k.saturating_sub(1) {
        count += usize::from(ask_prices[i] > ask_prices[i + 1]);
        count += usize::from(bid_prices[i + 1] > bid_prices[i]);
    }
    count + usize::from(bid_prices[0] > ask_prices[0])
}

fn ladders_of_row(matrix: &Array, row: usize, layout: &BookLayout, t: usize) -> (Vec<f64>, Vec<f64>) {
    let k = layout.levels();
    let col = |side, level| {
        layout.column_of(VariableIndex {
            ticker: t,
            side,
            level,
            feature: Feature::Price,
        })
    };
    let bids = (1..=k).map(|l| matrix.at(row, col(Side::Bid, l))).collect();
    let asks = (1..=k).map(|l| matrix.at(row, col(Side::Ask, l))).collect();
    (bids, asks)
}

/// Structure penalty of a full predicted value matrix (rows = snapshots,
/// columns = the layout's variables; volume columns are ignored), summed
/// over rows and tickers.
pub fn structure_loss(matrix: &Array, layout: &BookLayout) -> f64 {
    assert_eq!(matrix.cols(), layout.n_variables(), "layout/matrix mismatch");
    let mut loss = 0.0;
    for row in 0..matrix.rows() {
        for t in 0..layout.ticker_count() {
            let (bids, asks) = ladders_of_row(matrix, row, layout, t);
            loss += snapshot_structure_loss(&bids, &asks);
        }
    }
    loss
}

/// Total strict violations across a predicted value matrix.
pub fn structure_violations(matrix: &Array, layout: &BookLayout) -> usize {
    assert_eq!(matrix.cols(), layout.n_variables(), "layout/matrix mismatch");
    let mut count = 0;
    for row in 0..matrix.rows() {
        for t in 0..layout.ticker_count() {
            let (bids, asks) = ladders_of_row(matrix, row, layout, t);
            count += snapshot_structure_violations(&bids, &asks);
        }
    }
    count
}

/// The weighted-total rule, in one place so every caller combines the
/// two terms identically.
pub fn combine(forecasting: f64, structure: f64, w_o: f64) -> f64 {
    forecasting + w_o * structure
}

/// Graph-side forecasting loss: mean over all cells of the squared
/// prediction error against a fixed truth matrix.
pub fn forecasting_loss_graph<'g>(
    g: &'g Graph,
    pred: Tensor<'g>,
    truth: &Array,
) -> Result<Tensor<'g>, TensorError> {
    if pred.shape() != truth.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "forecasting_loss",
            lhs: pred.shape(),
            rhs: truth.shape().to_vec(),
        });
    }
    let diff = pred.sub(g.constant(truth.clone()))?;
    Ok(diff.mul(diff)?.mean_all())
}

/// Graph-side structure penalty over a price-bearing value matrix:
/// differentiable, with the hinge's subgradient placing ±1 on each
/// strictly violating pair and nothing anywhere else.
pub fn structure_loss_graph<'g>(
    g: &'g Graph,
    matrix: Tensor<'g>,
    layout: &BookLayout,
) -> Result<Tensor<'g>, TensorError> {
    let shape = matrix.shape();
    assert_eq!(shape.len(), 2, "expected a (rows, variables) matrix");
    assert_eq!(shape[1], layout.n_variables(), "layout/matrix mismatch");
    let k = layout.levels();
    let price_col = |t, side, level| {
        matrix.narrow(
            1,
            layout.column_of(VariableIndex {
                ticker: t,
                side,
                level,
                feature: Feature::Price,
            }),
            1,
        )
    };
    let mut total = g.scalar(0.0);
    for t in 0..layout.ticker_count() {
        for level in 1..k {
            let ask_gap = price_col(t, Side::Ask, level)
                .sub(price_col(t, Side::Ask, level + 1))?
                .relu()
                .sum_all();
            let bid_gap = price_col(t, Side::Bid, level + 1)
                .sub(price_col(t, Side::Bid, level))?
                .relu()
                .sum_all();
            total = total.add(ask_gap)?.add(bid_gap)?;
        }
        let cross = price_col(t, Side::Bid, 1)
            .sub(price_col(t, Side::Ask, 1))?
            .relu()
            .sum_all();
        total = total.add(cross)?;
    }
    Ok(total)
}

/// The training objective's pieces, still attached to the graph.
pub struct LossTerms<'g> {
    pub forecasting: Tensor<'g>,
    pub structure: Tensor<'g>,
    pub total: Tensor<'g>,
}

/// Assemble the full training loss for one window: forecasting MSE in the
/// scaled space, plus the weighted structure penalty evaluated either on
/// reconstructed dollar prices (through the differentiable inverse
/// transform, anchored at the window's last context row) or directly on
/// the scaled outputs.
pub fn total_loss_graph<'g>(
    g: &'g Graph,
    pred: Tensor<'g>,
    window: &WindowPair,
    scalers: &ScalerParams,
    layout: &BookLayout,
    w_o: f64,
    space: StructureSpace,
) -> Result<LossTerms<'g>, TensorError> {
    let forecasting = forecasting_loss_graph(g, pred, &window.target)?;
    let price_view = match space {
        StructureSpace::Dollars => scalers.invert_window_graph(g, pred, &window.anchor)?,
        StructureSpace::Scaled => pred,
    };
    let structure = structure_loss_graph(g, price_view, layout)?;
    let total = forecasting.add(structure.scale(w_o))?;
    Ok(LossTerms {
        forecasting,
        structure,
        total,
    })
}

/// One evaluation's losses and component metrics, in whichever space the
/// caller prepared `pred` and `truth` (scaled, or dollars after
/// inversion).
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub forecasting: f64,
    /// Hinge penalty summed over snapshots (the training convention).
    pub structure: f64,
    /// The same penalty as a mean per predicted snapshot, for table-style
    /// reporting.
    pub structure_per_snapshot: f64,
    pub total: f64,
    pub w_o: f64,
    pub violations: usize,
    pub price_mse: f64,
    pub price_mae: f64,
    pub volume_mse: f64,
    pub volume_mae: f64,
    pub mid_mse: f64,
    pub mid_mae: f64,
}

impl LossBreakdown {
    /// Average a set of per-window breakdowns into one row. Error fields
    /// are means of means (windows share their geometry, so this is the
    /// overall mean), violations are summed — they are a count — and the
    /// total is recombined from the averaged terms so the identity
    /// `total = forecasting + w_o * structure` stays exact on the result.
    pub fn mean_of(items: &[LossBreakdown]) -> LossBreakdown {
        assert!(!items.is_empty(), "nothing to aggregate");
        let n = items.len() as f64;
        let w_o = items[0].w_o;
        let mean = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let forecasting = mean(|b| b.forecasting);
        let structure = mean(|b| b.structure);
        LossBreakdown {
            forecasting,
            structure,
            structure_per_snapshot: mean(|b| b.structure_per_snapshot),
            total: combine(forecasting, structure, w_o),
            w_o,
            violations: items.iter().map(|b| b.violations).sum(),
            price_mse: mean(|b| b.price_mse),
            price_mae: mean(|b| b.price_mae),
            volume_mse: mean(|b| b.volume_mse),
            volume_mae: mean(|b| b.volume_mae),
            mid_mse: mean(|b| b.mid_mse),
            mid_mae: mean(|b| b.mid_mae),
        }
    }

    /// Column order for CSV export; [`LossBreakdown::csv_row`] matches it.
    pub fn csv_header() -> &'static str {
        "forecasting,structure,structure_per_snapshot,total,w_o,violations,\
         price_mse,price_mae,volume_mse,volume_mae,mid_mse,mid_mae"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.forecasting,
            self.structure,
            self.structure_per_snapshot,
            self.total,
            self.w_o,
            self.violations,
            self.price_mse,
            self.price_mae,
            self.volume_mse,
            self.volume_mae,
            self.mid_mse,
            self.mid_mae
        )
    }
}

/// Compute the full breakdown for one (prediction, truth) pair. Both
/// matrices must share the layout's column order.
pub fn loss_breakdown(
    pred: &Array,
    truth: &Array,
    layout: &BookLayout,
    w_o: f64,
) -> Result<LossBreakdown, TensorError> {
    check_same_shape("loss_breakdown", pred, truth)?;
    assert_eq!(pred.cols(), layout.n_variables(), "layout/matrix mismatch");
    let forecasting = forecasting_loss(pred, truth)?;
    let structure = structure_loss(pred, layout);
    let violations = structure_violations(pred, layout);
    let snapshots = (pred.rows() * layout.ticker_count()) as f64;

    let mut price_se = 0.0;
    let mut price_ae = 0.0;
    let mut vol_se = 0.0;
    let mut vol_ae = 0.0;
    let mut price_cells = 0.0;
    let mut vol_cells = 0.0;
    for r in 0..pred.rows() {
        for c in 0..pred.cols() {
            let d = pred.at(r, c) - truth.at(r, c);
            if layout.is_price(c) {
                price_se += d * d;
                price_ae += d.abs();
                price_cells += 1.0;
            } else {
                vol_se += d * d;
                vol_ae += d.abs();
                vol_cells += 1.0;
            }
        }
    }

    let mut mid_se = 0.0;
    let mut mid_ae = 0.0;
    for r in 0..pred.rows() {
        for t in 0..layout.ticker_count() {
            let col = |m: &Array, side| {
                m.at(
                    r,
                    layout.column_of(VariableIndex {
                        ticker: t,
                        side,
                        level: 1,
                        feature: Feature::Price,
                    }),
                )
            };
            let mid_pred = 0.5 * (col(pred, Side::Bid) + col(pred, Side::Ask));
            let mid_truth = 0.5 * (col(truth, Side::Bid) + col(truth, Side::Ask));
            let d = mid_pred - mid_truth;
            mid_se += d * d;
            mid_ae += d.abs();
        }
    }

    Ok(LossBreakdown {
        forecasting,
        structure,
        structure_per_snapshot: structure / snapshots,
        total: combine(forecasting, structure, w_o),
        w_o,
        violations,
        price_mse: price_se / price_cells,
        price_mae: price_ae / price_cells,
        volume_mse: vol_se / vol_cells,
        volume_mae: vol_ae / vol_cells,
        mid_mse: mid_se / snapshots,
        mid_mae: mid_ae / snapshots,
    })
}
