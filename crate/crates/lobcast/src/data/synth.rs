//! Seeded synthetic order book streams.
//!
//! Real LOBSTER exports are licensed and cannot ship with the repository,
//! so tests and demos run on generated books. The generator builds each
//! snapshot outward from a random-walk mid-price: a positive half-spread
//! places the best quotes on either side, and strictly positive level gaps
//! stack the remaining depth outward. Every ordinal invariant therefore
//! holds by construction — no rejection sampling, no repairs.
//!
//! All randomness comes from one `ChaCha8` generator per ticker (same seed,
//! per-ticker stream), so a given `(seed, params)` pair always produces the
//! same books, bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grid::{concat_tickers, resample, DEFAULT_SESSION};
use super::{DataError, Dataset, LobSeries, LobSnapshot};

/// Shape of the generated market. Spread and gap bounds are fractions of
/// the current mid-price, which keeps books valid at any price.
#[derive(Debug, Clone)]
pub struct SynthParams {
    /// Initial mid-price in dollars.
    pub start_mid: f64,
    /// Bound on the relative mid-price move per event; 0 freezes the mid.
    pub step_volatility: f64,
    /// Half-spread drawn uniformly from this range, as a fraction of mid.
    pub half_spread_frac: (f64, f64),
    /// Gap between adjacent depth levels, as a fraction of mid.
    pub level_gap_frac: (f64, f64),
    /// Resting volume per level, in shares.
    pub volume_range: (f64, f64),
    /// Book depth K.
    pub levels: usize,
    /// Event timestamps are drawn uniformly inside this window (seconds
    /// after midnight).
    pub session: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            start_mid: 100.0,
            step_volatility: 1e-3,
            half_spread_frac: (5e-5, 2e-4),
            level_gap_frac: (5e-5, 2e-4),
            volume_range: (50.0, 500.0),
            levels: 5,
            session: DEFAULT_SESSION,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |detail: String| Err(DataError::BadParams { detail });
        if !(self.start_mid > 0.0) {
            return bad(format!("start_mid {} must be positive", self.start_mid));
        }
        if !(0.0..1.0).contains(&self.step_volatility) {
            return bad(format!(
                "step_volatility {} must be in [0, 1)",
                self.step_volatility
            ));
        }
        for (name, (lo, hi)) in [
            ("half_spread_frac", self.half_spread_frac),
            ("level_gap_frac", self.level_gap_frac),
            ("volume_range", self.volume_range),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return bad(format!("{name} ({lo}, {hi}) must satisfy 0 < lo <= hi"));
            }
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".to_string());
        }
        // Worst-case book half-width as a fraction of mid; keep it well
        // under 1 so the deepest bid stays positive.
        let width = self.half_spread_frac.1
            + (self.levels - 1) as f64 * self.level_gap_frac.1;
        if width >= 0.5 {
            return bad(format!(
                "spread plus level gaps reach {width:.3} of mid; must stay below 0.5"
            ));
        }
        if self.session.1 <= self.session.0 {
            return bad(format!(
                "session ({}, {}) must have positive length",
                self.session.0, self.session.1
            ));
        }
        Ok(())
    }
}

/// One ticker's generated event stream (event time, not gridded).
#[derive(Debug, Clone)]
pub struct TickerEvents {
    pub ticker: String,
    pub events: Vec<LobSnapshot>,
}

/// Generate `n_events` event-time snapshots for each of `tickers` synthetic
/// symbols. Identical arguments produce identical output.
pub fn synth_generate(
    seed: u64,
    n_events: usize,
    tickers: usize,
    params: &SynthParams,
) -> Result<Vec<TickerEvents>, DataError> {
    params.validate()?;
    if tickers == 0 || n_events == 0 {
        return Err(DataError::BadParams {
            detail: "need at least one ticker and one event".to_string(),
        });
    }
    let mut out = Vec::with_capacity(tickers);
    for t in 0..tickers {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);

        let mut times: Vec<f64> = (0..n_events)
            .map(|_| rng.gen_range(params.session.0..params.session.1))
            .collect();
        times.sort_by(f64::total_cmp);

        let mut mid = params.start_mid;
        let mut events = Vec::with_capacity(n_events);
        for &timestamp in &times {
            mid *= 1.0 + params.step_volatility * rng.gen_range(-1.0..=1.0);
            let half_spread = mid
                * rng.gen_range(params.half_spread_frac.0..=params.half_spread_frac.1);
            let mut snap = LobSnapshot {
                timestamp,
                bid_prices: Vec::with_capacity(params.levels),
                bid_volumes: Vec::with_capacity(params.levels),
                ask_prices: Vec::with_capacity(params.levels),
                ask_volumes: Vec::with_capacity(params.levels),
            };
            let mut bid = mid - half_spread;
            let mut ask = mid + half_spread;
            for k in 0..params.levels {
                if k > 0 {
                    bid -= mid
                        * rng.gen_range(params.level_gap_frac.0..=params.level_gap_frac.1);
                    ask += mid
                        * rng.gen_range(params.level_gap_frac.0..=params.level_gap_frac.1);
                }
                snap.bid_prices.push(bid);
                snap.ask_prices.push(ask);
                snap.bid_volumes
                    .push(rng.gen_range(params.volume_range.0..=params.volume_range.1));
                snap.ask_volumes
                    .push(rng.gen_range(params.volume_range.0..=params.volume_range.1));
            }
            debug_assert!(snap.validate().is_ok(), "generator produced invalid book");
            events.push(snap);
        }
        out.push(TickerEvents {
            ticker: format!("SYN{t}"),
            events,
        });
    }
    Ok(out)
}

/// Generate and resample in one step: one gridded [`LobSeries`] per ticker.
pub fn synth_series(
    seed: u64,
    n_events: usize,
    tickers: usize,
    interval: f64,
    params: &SynthParams,
) -> Result<Vec<LobSeries>, DataError> {
    synth_generate(seed, n_events, tickers, params)?
        .iter()
        .map(|te| resample(&te.events, &te.ticker, interval, params.session))
        .collect()
}

/// Full synthetic dataset: generate, resample, and flatten.
pub fn synth_dataset(
    seed: u64,
    n_events: usize,
    tickers: usize,
    interval: f64,
    params: &SynthParams,
) -> Result<Dataset, DataError> {
    concat_tickers(&synth_series(seed, n_events, tickers, interval, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_thousand_snapshots_all_valid() {
        let streams = synth_generate(99, 5_000, 2, &SynthParams::default()).unwrap();
        let mut checked = 0;
        for stream in &streams {
            for snap in &stream.events {
                snap.validate().unwrap();
                checked += 1;
            }
        }
        assert_eq!(checked, 10_000);
    }

    #[test]
    fn same_seed_is_bit_identical_and_streams_differ() {
        let a = synth_generate(7, 100, 2, &SynthParams::default()).unwrap();
        let b = synth_generate(7, 100, 2, &SynthParams::default()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ticker, y.ticker);
            assert_eq!(x.events, y.events);
        }
        // Different tickers see different books.
        assert_ne!(a[0].events[0].bid_prices, a[1].events[0].bid_prices);
    }

    #[test]
    fn zero_volatility_freezes_the_mid() {
        let params = SynthParams {
            step_volatility: 0.0,
            ..SynthParams::default()
        };
        let streams = synth_generate(3, 500, 1, &params).unwrap();
        for snap in &streams[0].events {
            let mid = (snap.bid_prices[0] + snap.ask_prices[0]) / 2.0;
            assert!((mid - 100.0).abs() < 1e-9, "mid drifted to {mid}");
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let cases = [
            SynthParams { start_mid: 0.0, ..SynthParams::default() },
            SynthParams { step_volatility: 1.0, ..SynthParams::default() },
            SynthParams { half_spread_frac: (0.0, 1e-4), ..SynthParams::default() },
            SynthParams { level_gap_frac: (2e-4, 1e-4), ..SynthParams::default() },
            SynthParams { volume_range: (-5.0, 5.0), ..SynthParams::default() },
            SynthParams { levels: 0, ..SynthParams::default() },
            // Half-width 0.2 + 4 * 0.1 = 0.6 of mid: too wide.
            SynthParams {
                half_spread_frac: (0.1, 0.2),
                level_gap_frac: (0.05, 0.1),
                ..SynthParams::default()
            },
            SynthParams { session: (100.0, 100.0), ..SynthParams::default() },
        ];
        for params in cases {
            assert!(
                matches!(
                    synth_generate(1, 10, 1, &params),
                    Err(DataError::BadParams { .. })
                ),
                "params accepted: {params:?}"
            );
        }
    }

    #[test]
    fn full_session_resample_hits_4681_grid_points() {
        let series = synth_series(11, 2_000, 1, 5.0, &SynthParams::default()).unwrap();
        assert_eq!(series[0].len(), 4681);
        for (i, snap) in series[0].snapshots.iter().enumerate() {
            assert_eq!(snap.timestamp, 34_200.0 + 5.0 * i as f64);
        }
    }

    #[test]
    fn dataset_shape_matches_layout() {
        let ds = synth_dataset(5, 300, 3, 60.0, &SynthParams::default()).unwrap();
        assert_eq!(ds.layout.n_variables(), 60);
        assert_eq!(ds.matrix.cols(), 60);
        assert_eq!(ds.rows(), ds.matrix.rows());
        assert_eq!(ds.rows(), 391); // (57600 - 34200) / 60 + 1
    }
}
