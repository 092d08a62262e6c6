//! RealTime-mode event builder: merges fragments carrying the same
//! (trigger source port, sequence number) key from all expected front-ends
//! into complete events. Matching on the integer key is exact because one
//! physical trigger pulse fans out to every front-end, which all count
//! per-port sequence numbers identically; timestamp matching is the offline
//! path's job.
//!
//! Liveness comes from a completion timeout (keys whose opening fragment is
//! older than the timeout close incomplete) and a bound on open keys (the
//! oldest key closes incomplete when the bound would be exceeded).

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use thiserror::Error;

use crate::frontend::Fragment;
use crate::timestamp::TimeStamp;

/// Default completion timeout: 10^7 ticks = 100 ms.
pub const DEFAULT_COMPLETION_TIMEOUT_TICKS: u64 = 10_000_000;
/// Default bound on simultaneously open keys.
pub const DEFAULT_MAX_OPEN_KEYS: usize = 65_536;

#[derive(Debug, Error, PartialEq)]
pub enum BuilderError {
    #[error("duplicate fragment: front-end {frontend_id} already filed (port {port_id}, seq {seq_no})")]
    DuplicateFragment {
        frontend_id: u16,
        port_id: u8,
        seq_no: u64,
    },
    #[error("fragment on port {0} does not belong to this builder")]
    ForeignSource(u8),
    #[error("advance_time went backwards: {later} after {earlier}")]
    NonMonotonicTime { earlier: u64, later: u64 },
}

/// Identity of one trigger occurrence: its source port and per-port sequence
/// number. Totally ordered by (port, seq).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventKey {
    pub port_id: u8,
    pub seq_no: u64,
}

/// Fragments from all contributing front-ends merged under one key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltEvent {
    pub key: EventKey,
    /// One fragment per contributing front-end, ascending front-end id.
    pub fragments: Vec<Fragment>,
    /// True iff every expected front-end contributed.
    pub complete: bool,
    /// Earliest fragment timestamp.
    pub build_timestamp: TimeStamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuilderConfig {
    /// Trigger ports this builder serves.
    pub source_ports: BTreeSet<u8>,
    /// Front-ends expected to contribute one fragment per trigger.
    pub expected_frontends: BTreeSet<u16>,
    pub completion_timeout_ticks: u64,
    pub max_open_keys: usize,
}

impl BuilderConfig {
    pub fn new(source_ports: BTreeSet<u8>, expected_frontends: BTreeSet<u16>) -> Self {
        Self {
            source_ports,
            expected_frontends,
            completion_timeout_ticks: DEFAULT_COMPLETION_TIMEOUT_TICKS,
            max_open_keys: DEFAULT_MAX_OPEN_KEYS,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.source_ports.is_empty() {
            return Err("builder needs at least one source port".into());
        }
        if self.expected_frontends.is_empty() {
            return Err("builder needs at least one expected front-end".into());
        }
        if self.completion_timeout_ticks == 0 {
            return Err("completion_timeout_ticks must be positive".into());
        }
        if self.max_open_keys == 0 {
            return Err("max_open_keys must be positive".into());
        }
        Ok(())
    }
}

/// Monotone counters over one builder's lifetime.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuilderStats {
    pub complete: u64,
    pub incomplete: u64,
    pub duplicates: u64,
    pub open: u64,
    pub fragments_accepted: u64,
}

#[derive(Debug, Clone)]
struct OpenEvent {
    fragments: BTreeMap<u16, Fragment>,
    opened_at: TimeStamp,
}

/// A single-consumer event builder for one trigger source.
pub struct EventBuilder {
    config: BuilderConfig,
    open: BTreeMap<EventKey, OpenEvent>,
    last_now: TimeStamp,
    stats: BuilderStats,
}

impl EventBuilder {
    pub fn new(config: BuilderConfig) -> Self {
        Self {
            config,
            open: BTreeMap::new(),
            last_now: TimeStamp::from_ticks(0),
            stats: BuilderStats::default(),
        }
    }

    pub fn config(&self) -> &BuilderConfig {
        &self.config
    }

    /// Snapshot of the builder counters.
    pub fn builder_stats(&self) -> BuilderStats {
        BuilderStats {
            open: self.open.len() as u64,
            ..self.stats
        }
    }

    /// File a fragment under its key. Emits the event as soon as every
    /// expected front-end has contributed; evicts the oldest open key
    /// (incomplete) when the open-key bound would be exceeded. Multiple
    /// emissions from one call come out in ascending key order.
    pub fn submit_fragment(&mut self, fragment: Fragment) -> Result<Vec<BuiltEvent>, BuilderError> {
        if !self.config.source_ports.contains(&fragment.port_id) {
            return Err(BuilderError::ForeignSource(fragment.port_id));
        }
        let key = EventKey {
            port_id: fragment.port_id,
            seq_no: fragment.seq_no,
        };
        let mut emitted = Vec::new();
        if !self.open.contains_key(&key) && self.open.len() >= self.config.max_open_keys {
            // Close the stalest key to bound memory.
            let oldest = self
                .open
                .iter()
                .min_by_key(|(k, v)| (v.opened_at, **k))
                .map(|(k, _)| *k)
                .expect("open map is non-empty");
            emitted.push(self.close(oldest, false));
        }
        let entry = self.open.entry(key).or_insert_with(|| OpenEvent {
            fragments: BTreeMap::new(),
            opened_at: fragment.timestamp,
        });
        if entry.fragments.contains_key(&fragment.frontend_id) {
            self.stats.duplicates += 1;
            return Err(BuilderError::DuplicateFragment {
                frontend_id: fragment.frontend_id,
                port_id: fragment.port_id,
                seq_no: fragment.seq_no,
            });
        }
        entry.fragments.insert(fragment.frontend_id, fragment);
        self.stats.fragments_accepted += 1;
        let covered = self
            .config
            .expected_frontends
            .iter()
            .all(|fe| entry.fragments.contains_key(fe));
        if covered {
            emitted.push(self.close(key, true));
        }
        emitted.sort_by_key(|e| e.key);
        Ok(emitted)
    }

    /// Advance the builder clock: every open key whose opening fragment is
    /// older than the completion timeout closes incomplete. Emission is in
    /// ascending key order.
    pub fn advance_time(&mut self, now: TimeStamp) -> Result<Vec<BuiltEvent>, BuilderError> {
        if now < self.last_now {
            return Err(BuilderError::NonMonotonicTime {
                earlier: self.last_now.ticks,
                later: now.ticks,
            });
        }
        self.last_now = now;
        let timeout = self.config.completion_timeout_ticks;
        let stale: Vec<EventKey> = self
            .open
            .iter()
            .filter(|(_, v)| now.saturating_sub(v.opened_at) > timeout)
            .map(|(k, _)| *k)
            .collect();
        Ok(stale.into_iter().map(|k| self.close(k, false)).collect())
    }

    /// Close every remaining open key (end of run). Complete events were
    /// already emitted, so everything here goes out incomplete, in key order.
    pub fn flush(&mut self) -> Vec<BuiltEvent> {
        let keys: Vec<EventKey> = self.open.keys().copied().collect();
        keys.into_iter().map(|k| self.close(k, false)).collect()
    }

    fn close(&mut self, key: EventKey, complete: bool) -> BuiltEvent {
        let open = self.open.remove(&key).expect("key is open");
        if complete {
            self.stats.complete += 1;
        } else {
            self.stats.incomplete += 1;
        }
        let fragments: Vec<Fragment> = open.fragments.into_values().collect();
        let build_timestamp = fragments
            .iter()
            .map(|f| f.timestamp)
            .min()
            .expect("events hold at least one fragment");
        BuiltEvent {
            key,
            fragments,
            complete,
            build_timestamp,
        }
    }
}
