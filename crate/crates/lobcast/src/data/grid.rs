//! Resampling onto a fixed grid, flattening, chronological splitting, and
//! window extraction.

use crate::tensor::Array;

use super::{BookLayout, DataError, Dataset, LobSeries, LobSnapshot, Split, WindowPair};

/// Trading session bounds in seconds after midnight: 9:30 am to 4:00 pm.
pub const DEFAULT_SESSION: (f64, f64) = (34_200.0, 57_600.0);

/// Default grid spacing in seconds.
pub const DEFAULT_INTERVAL: f64 = 5.0;

/// Sample event-time snapshots onto the uniform grid
/// `session.0, session.0 + interval, ...` up to and including the last
/// point not past `session.1`, carrying the last observation forward.
/// Grid points before the first event take the first event's state.
pub fn resample(
    snapshots: &[LobSnapshot],
    ticker: &str,
    interval: f64,
    session: (f64, f64),
) -> Result<LobSeries, DataError> {
    assert!(interval > 0.0, "interval must be positive");
    assert!(session.1 >= session.0, "session end before start");
    if snapshots.is_empty() {
        return Err(DataError::EmptyInput);
    }
    debug_assert!(
        snapshots.windows(2).all(|w| w[0].timestamp <= w[1].timestamp),
        "snapshots must be time-ordered"
    );
    let points = ((session.1 - session.0) / interval).floor() as usize + 1;
    let mut out = Vec::with_capacity(points);
    let mut j = 0;
    for i in 0..points {
        let t = session.0 + i as f64 * interval;
        while j + 1 < snapshots.len() && snapshots[j + 1].timestamp <= t {
            j += 1;
        }
        let mut state = snapshots[j].clone();
        state.timestamp = t;
        out.push(state);
    }
    Ok(LobSeries {
        ticker: ticker.to_string(),
        interval,
        start_time: session.0,
        snapshots: out,
    })
}

/// Flatten per-ticker series into one matrix with the [`BookLayout`]
/// column order. All series must share the same grid and depth.
pub fn concat_tickers(series: &[LobSeries]) -> Result<Dataset, DataError> {
    if series.is_empty() || series.iter().any(|s| s.is_empty()) {
        return Err(DataError::EmptyInput);
    }
    let first = &series[0];
    let levels = first.snapshots[0].levels();
    for s in series {
        if s.interval != first.interval || s.start_time != first.start_time {
            return Err(DataError::GridMismatch {
                detail: format!(
                    "{}: grid ({}, {}) vs {}: ({}, {})",
                    s.ticker, s.start_time, s.interval, first.ticker, first.start_time,
                    first.interval
                ),
            });
        }
        if s.len() != first.len() {
            return Err(DataError::GridMismatch {
                detail: format!(
                    "{} has {} grid points but {} has {}",
                    s.ticker,
                    s.len(),
                    first.ticker,
                    first.len()
                ),
            });
        }
        if s.snapshots.iter().any(|snap| snap.levels() != levels) {
            return Err(DataError::GridMismatch {
                detail: format!("{} does not have {levels} levels throughout", s.ticker),
            });
        }
    }

    let layout = BookLayout::new(series.iter().map(|s| s.ticker.clone()).collect(), levels);
    let n = layout.n_variables();
    let rows = first.len();
    let mut matrix = Array::zeros(&[rows, n]);
    for (t, s) in series.iter().enumerate() {
        for (i, snap) in s.snapshots.iter().enumerate() {
            for k in 1..=levels {
                use super::{Feature::*, Side::*, VariableIndex};
                let col = |side, feature| {
                    layout.column_of(VariableIndex { ticker: t, side, level: k, feature })
                };
                matrix.set(i, col(Bid, Price), snap.bid_prices[k - 1]);
                matrix.set(i, col(Bid, Volume), snap.bid_volumes[k - 1]);
                matrix.set(i, col(Ask, Price), snap.ask_prices[k - 1]);
                matrix.set(i, col(Ask, Volume), snap.ask_volumes[k - 1]);
            }
        }
    }
    Ok(Dataset {
        layout,
        interval: first.interval,
        times: (0..rows).map(|i| first.time_at(i)).collect(),
        matrix,
    })
}

/// Cut a dataset chronologically into train/validation/test segments of
/// `floor(0.6 I)`, `floor(0.2 I)`, and the remaining rows. `min_len` is
/// the shortest usable segment (context plus target length).
pub fn split(ds: &Dataset, min_len: usize) -> Result<[Dataset; 3], DataError> {
    let total = ds.rows();
    let n_train = total * 6 / 10;
    let n_val = total * 2 / 10;
    let n_test = total - n_train - n_val;
    for len in [n_train, n_val, n_test] {
        if len < min_len {
            return Err(DataError::TooShort { len, needed: min_len });
        }
    }
    let section = |start: usize, len: usize| Dataset {
        layout: ds.layout.clone(),
        interval: ds.interval,
        times: ds.times[start..start + len].to_vec(),
        matrix: ds.matrix.row_slice(start, len),
    };
    Ok([
        section(0, n_train),
        section(n_train, n_val),
        section(n_train + n_val, n_test),
    ])
}

/// Number of sliding windows over `len` rows.
pub fn window_count(len: usize, l_c: usize, l_t: usize, stride: usize) -> Option<usize> {
    if len < l_c + l_t {
        None
    } else {
        Some((len - l_c - l_t) / stride + 1)
    }
}

/// Slide context/target windows over a transformed segment.
///
/// `scaled` is the model-space matrix; `raw` holds the same rows in
/// original units (row-aligned with `scaled` — the transform pipeline
/// drops raw rows consumed by differencing before calling this). Each
/// window's `anchor` is the raw row at its final context grid point, which
/// the inverse transforms use to return predictions to original units.
pub fn make_windows(
    scaled: &Array,
    raw: &Array,
    times: &[f64],
    split: Split,
    l_c: usize,
    l_t: usize,
    stride: usize,
) -> Result<Vec<WindowPair>, DataError> {
    assert!(stride >= 1, "stride must be at least 1");
    assert!(l_c >= 1 && l_t >= 1, "window lengths must be positive");
    assert_eq!(scaled.rows(), raw.rows(), "scaled/raw rows misaligned");
    assert_eq!(scaled.rows(), times.len(), "times misaligned");
    assert_eq!(scaled.cols(), raw.cols(), "scaled/raw columns misaligned");
    let len = scaled.rows();
    let count = window_count(len, l_c, l_t, stride).ok_or(DataError::TooShort {
        len,
        needed: l_c + l_t,
    })?;
    let mut windows = Vec::with_capacity(count);
    for w in 0..count {
        let s = w * stride;
        windows.push(WindowPair {
            split,
            context: scaled.row_slice(s, l_c),
            target: scaled.row_slice(s + l_c, l_t),
            raw_context: raw.row_slice(s, l_c),
            raw_target: raw.row_slice(s + l_c, l_t),
            anchor: raw.row(s + l_c - 1).to_vec(),
            context_times: times[s..s + l_c].to_vec(),
            target_times: times[s + l_c..s + l_c + l_t].to_vec(),
        });
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap_at(t: f64, mid: f64) -> LobSnapshot {
        LobSnapshot {
            timestamp: t,
            bid_prices: vec![mid - 0.01, mid - 0.02],
            bid_volumes: vec![10.0, 20.0],
            ask_prices: vec![mid + 0.01, mid + 0.02],
            ask_volumes: vec![11.0, 21.0],
        }
    }

    #[test]
    fn locf_carries_earlier_state_past_later_events() {
        let events = vec![snap_at(0.1, 100.0), snap_at(7.0, 200.0)];
        let series = resample(&events, "X", 5.0, (0.0, 10.0)).unwrap();
        assert_eq!(series.len(), 3);
        // t = 0: before nothing (first event already happened at 0.1? no --
        // 0.1 > 0), so the first event's state is carried backwards.
        assert_eq!(series.snapshots[0].ask_prices[0], 100.01);
        // t = 5: the 7.0 event has not happened yet.
        assert_eq!(series.snapshots[1].ask_prices[0], 100.01);
        // t = 10: now it has.
        assert_eq!(series.snapshots[2].ask_prices[0], 200.01);
        assert_eq!(series.snapshots[1].timestamp, 5.0);
    }

    #[test]
    fn single_event_fills_every_grid_point() {
        let events = vec![snap_at(40_000.0, 50.0)];
        let series = resample(&events, "X", 5.0, DEFAULT_SESSION).unwrap();
        assert_eq!(series.len(), 4681);
        assert!(series
            .snapshots
            .iter()
            .all(|s| s.bid_prices[0] == 49.99));
        // Grid spacing is exact.
        for i in 0..series.len() {
            assert_eq!(series.snapshots[i].timestamp, 34_200.0 + 5.0 * i as f64);
        }
    }

    #[test]
    fn resample_rejects_empty() {
        assert!(matches!(
            resample(&[], "X", 5.0, (0.0, 10.0)),
            Err(DataError::EmptyInput)
        ));
    }

    #[test]
    fn concat_places_each_field_in_its_column() {
        use crate::data::{Feature::*, Side::*, VariableIndex};
        let a = resample(&[snap_at(0.0, 100.0)], "A", 5.0, (0.0, 10.0)).unwrap();
        let b = resample(&[snap_at(0.0, 50.0)], "B", 5.0, (0.0, 10.0)).unwrap();
        let ds = concat_tickers(&[a, b]).unwrap();
        assert_eq!(ds.layout.n_variables(), 16);
        assert_eq!(ds.rows(), 3);
        let col = |ticker, side, level, feature| {
            ds.layout.column_of(VariableIndex { ticker, side, level, feature })
        };
        assert_eq!(ds.matrix.at(0, col(0, Bid, 1, Price)), 99.99);
        assert_eq!(ds.matrix.at(0, col(0, Ask, 2, Volume)), 21.0);
        assert_eq!(ds.matrix.at(2, col(1, Ask, 1, Price)), 50.01);
        assert_eq!(ds.matrix.at(2, col(1, Bid, 2, Volume)), 20.0);
    }

    #[test]
    fn concat_rejects_mismatched_grids() {
        let a = resample(&[snap_at(0.0, 100.0)], "A", 5.0, (0.0, 10.0)).unwrap();
        let b = resample(&[snap_at(0.0, 50.0)], "B", 5.0, (0.0, 15.0)).unwrap();
        assert!(matches!(
            concat_tickers(&[a, b]),
            Err(DataError::GridMismatch { .. })
        ));
    }

    fn dataset_of_len(total: usize) -> Dataset {
        Dataset {
            layout: BookLayout::new(vec!["A".into()], 1),
            interval: 5.0,
            times: (0..total).map(|i| i as f64 * 5.0).collect(),
            matrix: Array::new(
                vec![total, 4],
                (0..total * 4).map(|v| v as f64).collect(),
            ),
        }
    }

    #[test]
    fn split_lengths_follow_floor_arithmetic() {
        let [tr, va, te] = split(&dataset_of_len(100), 1).unwrap();
        assert_eq!((tr.rows(), va.rows(), te.rows()), (60, 20, 20));
        let [tr, va, te] = split(&dataset_of_len(4681), 1).unwrap();
        assert_eq!((tr.rows(), va.rows(), te.rows()), (2808, 936, 937));
        // Segments are contiguous and chronological.
        assert_eq!(tr.times.last().copied().unwrap() + 5.0, va.times[0]);
        assert_eq!(va.times.last().copied().unwrap() + 5.0, te.times[0]);
        let original = dataset_of_len(4681);
        assert_eq!(va.matrix.row(0), original.matrix.row(2808));
        assert_eq!(te.matrix.row(0), original.matrix.row(2808 + 936));
    }

    #[test]
    fn split_too_short_guard() {
        assert!(matches!(
            split(&dataset_of_len(10), 5),
            Err(DataError::TooShort { len: 2, needed: 5 })
        ));
    }

    #[test]
    fn window_counts_match_formula() {
        assert_eq!(window_count(144, 120, 24, 1), Some(1));
        assert_eq!(window_count(145, 120, 24, 1), Some(2));
        assert_eq!(window_count(200, 120, 24, 10), Some(6));
        assert_eq!(window_count(143, 120, 24, 1), None);
    }

    #[test]
    fn windows_are_aligned_and_anchored() {
        let rows = 12;
        let scaled = Array::new(vec![rows, 2], (0..rows * 2).map(|v| v as f64 / 100.0).collect());
        let raw = Array::new(vec![rows, 2], (0..rows * 2).map(|v| v as f64).collect());
        let times: Vec<f64> = (0..rows).map(|i| i as f64).collect();
        let windows = make_windows(&scaled, &raw, &times, Split::Train, 4, 2, 3).unwrap();
        assert_eq!(windows.len(), 3);
        let w = &windows[1]; // starts at row 3
        assert_eq!(w.context_times, vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(w.target_times, vec![7.0, 8.0]);
        assert_eq!(w.context.row(0), scaled.row(3));
        assert_eq!(w.target.row(0), scaled.row(7));
        assert_eq!(w.raw_target.row(1), raw.row(8));
        // Anchor is the raw row at the last context time (row 6).
        assert_eq!(w.anchor, raw.row(6).to_vec());
    }

    #[test]
    fn windows_too_short() {
        let scaled = Array::zeros(&[5, 1]);
        let raw = Array::zeros(&[5, 1]);
        let times = vec![0.0; 5];
        assert!(matches!(
            make_windows(&scaled, &raw, &times, Split::Val, 4, 2, 1),
            Err(DataError::TooShort { len: 5, needed: 6 })
        ));
    }
}
