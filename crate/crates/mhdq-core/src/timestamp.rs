//! Global 10 ns timebase: tick-count timestamps, imperfect-clock models, and
//! the per-front-end synchronization state that maps a local clock onto the
//! shared tick grid.
//!
//! The synchronization mechanism modeled here is a periodic broadcast pulse
//! carrying the true global time; each front-end applies a two-point linear
//! correction (offset plus rate) from the last two pulses it saw. This is a
//! stand-in for a hardware time-distribution system and is deliberately the
//! simplest model that keeps independently drifting front-ends aligned to
//! within one tick.

use std::fmt;

use thiserror::Error;

/// Picoseconds per timestamp tick (the 10 ns grid).
pub const TICK_PS: i64 = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum TimebaseError {
    /// `local_to_global` was called before any sync pulse arrived.
    #[error("front-end {0} has not received a sync pulse yet")]
    Unsynchronized(u16),
    /// A sync pulse arrived with a global or local time that did not advance.
    #[error("sync pulse out of order: {0}")]
    NonMonotonicSync(&'static str),
    /// Clock drift outside the simulation guardrail.
    #[error("clock drift {0} ppm exceeds the +/-100 ppm guardrail")]
    DriftOutOfRange(f64),
}

/// A count of 10 ns ticks since run start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TimeStamp {
    pub ticks: u64,
}

impl TimeStamp {
    pub const fn from_ticks(ticks: u64) -> Self {
        Self { ticks }
    }

    /// Round picoseconds to the nearest tick, ties toward the even tick.
    /// Negative times saturate to tick 0.
    pub fn from_ps(ps: i64) -> Self {
        let q = ps.div_euclid(TICK_PS);
        let r = ps.rem_euclid(TICK_PS);
        let half = TICK_PS / 2;
        let ticks = if r < half {
            q
        } else if r > half {
            q + 1
        } else if q % 2 == 0 {
            q
        } else {
            q + 1
        };
        Self {
            ticks: ticks.max(0) as u64,
        }
    }

    pub const fn as_ps(self) -> i64 {
        self.ticks as i64 * TICK_PS
    }

    pub fn as_secs_f64(self) -> f64 {
        self.ticks as f64 * 1e-8
    }

    pub const fn saturating_sub(self, other: TimeStamp) -> u64 {
        self.ticks.saturating_sub(other.ticks)
    }
}

impl fmt::Display for TimeStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.ticks)
    }
}

/// An imperfect front-end clock: `local(t) = offset + (1 + drift_ppm·1e-6)·t`
/// where `t` is the true global time in picoseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockModel {
    pub offset_ps: i64,
    pub drift_ppm: f64,
}

impl ClockModel {
    pub const IDEAL: ClockModel = ClockModel {
        offset_ps: 0,
        drift_ppm: 0.0,
    };

    pub fn new(offset_ps: i64, drift_ppm: f64) -> Result<Self, TimebaseError> {
        if !drift_ppm.is_finite() || drift_ppm.abs() > 100.0 {
            return Err(TimebaseError::DriftOutOfRange(drift_ppm));
        }
        Ok(Self {
            offset_ps,
            drift_ppm,
        })
    }

    /// Local ticks elapsed per global tick.
    pub fn rate(&self) -> f64 {
        1.0 + self.drift_ppm * 1e-6
    }

    /// What this clock reads at true global time `global_ps`.
    pub fn local_at(&self, global_ps: i64) -> i64 {
        self.offset_ps + (self.rate() * global_ps as f64).round() as i64
    }
}

/// Synchronization state of one front-end, rebuilt from broadcast sync pulses.
///
/// One pulse pins the offset (rate assumed 1); from the second pulse on, the
/// rate is the exact two-point slope of (local, global) over the last pulse
/// pair, which cancels linear drift to well below one tick per sync interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncState {
    frontend_id: u16,
    pulses: u64,
    last_local_ps: i64,
    last_global_ps: i64,
    rate: f64,
}

impl SyncState {
    pub fn new(frontend_id: u16) -> Self {
        Self {
            frontend_id,
            pulses: 0,
            last_local_ps: 0,
            last_global_ps: 0,
            rate: 1.0,
        }
    }

    pub fn frontend_id(&self) -> u16 {
        self.frontend_id
    }

    pub fn pulse_count(&self) -> u64 {
        self.pulses
    }

    pub fn last_sync_local_ps(&self) -> i64 {
        self.last_local_ps
    }

    pub fn last_sync_global_ps(&self) -> i64 {
        self.last_global_ps
    }

    /// Estimated local-per-global rate (1 until two pulses have been seen).
    pub fn estimated_rate(&self) -> f64 {
        self.rate
    }

    /// Estimated local clock reading at global time zero.
    pub fn estimated_offset_ps(&self) -> f64 {
        self.last_local_ps as f64 - self.rate * self.last_global_ps as f64
    }

    /// Fold in one broadcast pulse: the local clock read `local_ps` at true
    /// global time `global_ps`.
    pub fn apply_sync_pulse(&mut self, local_ps: i64, global_ps: i64) -> Result<(), TimebaseError> {
        if self.pulses > 0 {
            if global_ps <= self.last_global_ps {
                return Err(TimebaseError::NonMonotonicSync(
                    "global time did not advance",
                ));
            }
            if local_ps <= self.last_local_ps {
                return Err(TimebaseError::NonMonotonicSync(
                    "local clock did not advance",
                ));
            }
            self.rate = (local_ps - self.last_local_ps) as f64
                / (global_ps - self.last_global_ps) as f64;
        }
        self.last_local_ps = local_ps;
        self.last_global_ps = global_ps;
        self.pulses += 1;
        Ok(())
    }

    /// Map a local clock reading onto the global tick grid.
    pub fn local_to_global(&self, local_ps: i64) -> Result<TimeStamp, TimebaseError> {
        Ok(TimeStamp::from_ps(self.global_ps_of(local_ps)?))
    }

    /// Same mapping at picosecond resolution, before tick rounding.
    pub fn global_ps_of(&self, local_ps: i64) -> Result<i64, TimebaseError> {
        if self.pulses == 0 {
            return Err(TimebaseError::Unsynchronized(self.frontend_id));
        }
        let global = self.last_global_ps as f64
            + (local_ps - self.last_local_ps) as f64 / self.rate;
        Ok(global.round() as i64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_sync() -> SyncState {
        let mut s = SyncState::new(0);
        s.apply_sync_pulse(0, 0).unwrap();
        s
    }

    #[test]
    fn tick_rounding_nearest() {
        assert_eq!(TimeStamp::from_ps(0).ticks, 0);
        assert_eq!(TimeStamp::from_ps(4_999).ticks, 0);
        assert_eq!(TimeStamp::from_ps(10_000).ticks, 1);
        assert_eq!(TimeStamp::from_ps(14_999).ticks, 1);
        assert_eq!(TimeStamp::from_ps(19_999).ticks, 2);
    }

    #[test]
    fn tick_rounding_ties_to_even() {
        // 1.5 ticks rounds up to 2 (even); 2.5 ticks rounds down to 2.
        assert_eq!(TimeStamp::from_ps(15_000).ticks, 2);
        assert_eq!(TimeStamp::from_ps(25_000).ticks, 2);
        assert_eq!(TimeStamp::from_ps(45_000).ticks, 4);
        assert_eq!(TimeStamp::from_ps(5_000).ticks, 0);
    }

    #[test]
    fn negative_ps_saturates_to_zero() {
        assert_eq!(TimeStamp::from_ps(-1).ticks, 0);
        assert_eq!(TimeStamp::from_ps(-123_456).ticks, 0);
    }

    #[test]
    fn first_pulse_sets_offset_and_unit_rate() {
        let mut s = SyncState::new(1);
        s.apply_sync_pulse(0, 0).unwrap();
        assert_eq!(s.estimated_rate(), 1.0);
        assert_eq!(s.estimated_offset_ps(), 0.0);
        assert_eq!(s.local_to_global(10_000).unwrap().ticks, 1);
        assert_eq!(s.local_to_global(15_000).unwrap().ticks, 2);
    }

    #[test]
    fn unsynchronized_is_an_error() {
        let s = SyncState::new(7);
        assert_eq!(
            s.local_to_global(0).unwrap_err(),
            TimebaseError::Unsynchronized(7)
        );
    }

    #[test]
    fn two_point_rate_is_exact() {
        // Local clock 10 ppm fast, pulses 1 s apart.
        let mut s = SyncState::new(0);
        s.apply_sync_pulse(0, 0).unwrap();
        s.apply_sync_pulse(1_000_010_000_000, 1_000_000_000_000).unwrap();
        assert!((s.estimated_rate() - 1.00001).abs() < 1e-9);
    }

    #[test]
    fn out_of_order_pulse_rejected() {
        let mut s = SyncState::new(0);
        s.apply_sync_pulse(1_000, 1_000).unwrap();
        assert!(matches!(
            s.apply_sync_pulse(2_000, 500),
            Err(TimebaseError::NonMonotonicSync(_))
        ));
        assert!(matches!(
            s.apply_sync_pulse(500, 2_000),
            Err(TimebaseError::NonMonotonicSync(_))
        ));
    }

    #[test]
    fn drifting_clock_query_within_one_tick() {
        // +10 ppm drift, 1 s sync interval, query 0.5 s after the last pulse.
        let clock = ClockModel::new(12_345, 10.0).unwrap();
        let mut s = SyncState::new(0);
        for k in 0..2i64 {
            let g = k * 1_000_000_000_000;
            s.apply_sync_pulse(clock.local_at(g), g).unwrap();
        }
        let true_global = 1_500_000_000_000i64;
        let est = s.local_to_global(clock.local_at(true_global)).unwrap();
        let truth = TimeStamp::from_ps(true_global);
        assert!(est.ticks.abs_diff(truth.ticks) <= 1);
    }

    #[test]
    fn drift_guardrail() {
        assert!(ClockModel::new(0, 100.0).is_ok());
        assert!(matches!(
            ClockModel::new(0, 100.5),
            Err(TimebaseError::DriftOutOfRange(_))
        ));
    }

    proptest! {
        // Drift-free, offset-free sync is the identity on tick boundaries.
        #[test]
        fn identity_on_tick_boundaries(ticks in 0u64..1_000_000_000) {
            let s = identity_sync();
            let local = ticks as i64 * TICK_PS;
            prop_assert_eq!(s.local_to_global(local).unwrap().ticks, ticks);
        }

        // Two synced front-ends with arbitrary (bounded) clock imperfection
        // stamp the same physical instant within one tick of each other.
        #[test]
        fn pairwise_disagreement_at_most_one_tick(
            offset_a in -1_000_000_000i64..1_000_000_000,
            offset_b in -1_000_000_000i64..1_000_000_000,
            drift_a in -100.0f64..100.0,
            drift_b in -100.0f64..100.0,
            query_frac in 0.0f64..1.0,
        ) {
            let interval = 1_000_000_000_000i64; // 1 s
            let ca = ClockModel::new(offset_a, drift_a).unwrap();
            let cb = ClockModel::new(offset_b, drift_b).unwrap();
            let mut sa = SyncState::new(0);
            let mut sb = SyncState::new(1);
            for k in 0..2 {
                let g = k * interval;
                sa.apply_sync_pulse(ca.local_at(g), g).unwrap();
                sb.apply_sync_pulse(cb.local_at(g), g).unwrap();
            }
            let t = interval + (query_frac * interval as f64) as i64;
            let ta = sa.local_to_global(ca.local_at(t)).unwrap();
            let tb = sb.local_to_global(cb.local_at(t)).unwrap();
            prop_assert!(ta.ticks.abs_diff(tb.ticks) <= 1);
            // And each is within one tick of the true instant.
            let truth = TimeStamp::from_ps(t);
            prop_assert!(ta.ticks.abs_diff(truth.ticks) <= 1);
        }

        // Monotonicity of the local-to-global mapping.
        #[test]
        fn mapping_is_monotone(
            offset in -1_000_000i64..1_000_000,
            drift in -100.0f64..100.0,
            a in 0i64..10_000_000_000,
            b in 0i64..10_000_000_000,
        ) {
            let clock = ClockModel::new(offset, drift).unwrap();
            let mut s = SyncState::new(0);
            for k in 0..2 {
                let g = k * 1_000_000_000_000;
                s.apply_sync_pulse(clock.local_at(g), g).unwrap();
            }
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let tl = s.local_to_global(lo).unwrap();
            let th = s.local_to_global(hi).unwrap();
            prop_assert!(tl <= th);
        }
    }
}
