//! Dead-time-free digitizer front-end: a continuously written per-channel
//! ring buffer with multiple trigger-input ports. Every trigger extracts a
//! pre/post window around its timestamp and emits a routed, sequence-numbered
//! fragment; ingest never blocks on trigger handling, and overlapping windows
//! simply duplicate the shared samples. A legacy single-trigger front-end
//! with non-paralyzable dead time is included for comparison.
//!
//! Triggers whose post-window data has not been digitized yet are deferred
//! and complete on a later `ingest` call, mirroring pipelined hardware where
//! a trigger naturally precedes the end of its own window.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::signal::Waveform;
use crate::timestamp::{SyncState, TimeStamp, TimebaseError};

/// Ring retention must cover the largest configured window this many times
/// over (checked at configuration time).
pub const RETENTION_SAFETY_FACTOR: u64 = 4;

/// Legacy front-end dead time per accepted event, microseconds.
pub const DEFAULT_DEAD_TIME_US: u64 = 200;

#[derive(Debug, Error, PartialEq)]
pub enum FrontendError {
    #[error("invalid front-end configuration: {0}")]
    InvalidConfig(String),
    #[error("sample block period {block_ps} ps does not match ring period {ring_ps} ps")]
    PeriodMismatch { block_ps: u64, ring_ps: u64 },
    #[error("sample block has {block} channels, ring has {ring}")]
    ChannelCountMismatch { block: usize, ring: usize },
    #[error("sample code {0} does not fit the 16-bit sample path")]
    CodeOverflow(u32),
    #[error("unknown trigger port {0}")]
    UnknownPort(u8),
    #[error("window data overwritten: {0}")]
    DataOverwritten(String),
    #[error("trigger timestamps must be nondecreasing ({later} ps after {earlier} ps)")]
    NonMonotonicTrigger { earlier: i64, later: i64 },
    #[error(transparent)]
    Timebase(#[from] TimebaseError),
}

/// A trigger input port and the back-end it routes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerPort {
    pub port_id: u8,
    pub destination_id: u16,
    pub pre_trigger_ns: u64,
    pub post_trigger_ns: u64,
}

impl TriggerPort {
    pub fn pre_ps(&self) -> i64 {
        self.pre_trigger_ns as i64 * 1_000
    }

    pub fn post_ps(&self) -> i64 {
        self.post_trigger_ns as i64 * 1_000
    }

    pub fn window_ps(&self) -> i64 {
        self.pre_ps() + self.post_ps()
    }

    /// Window length in samples, identical for every fragment of this port.
    pub fn window_samples(&self, sample_period_ps: u64) -> u64 {
        let w = (self.pre_trigger_ns + self.post_trigger_ns) * 1_000;
        (w + sample_period_ps / 2) / sample_period_ps
    }
}

/// A trigger edge on a named port at a global 10 ns-tick timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerPulse {
    pub port_id: u8,
    pub timestamp: TimeStamp,
}

/// One channel's windowed sample codes within a fragment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelWindow {
    pub channel_id: u16,
    pub samples: Vec<u16>,
}

/// One front-end's windowed data for one accepted trigger: the unit that is
/// routed, queued, and persisted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub frontend_id: u16,
    /// Trigger source port.
    pub port_id: u8,
    /// Per-(front-end, port) counter, starting at 0 with no gaps.
    pub seq_no: u64,
    /// Trigger time on the global tick grid.
    pub timestamp: TimeStamp,
    pub channels: Vec<ChannelWindow>,
}

impl Fragment {
    pub fn samples_per_channel(&self) -> usize {
        self.channels.first().map_or(0, |c| c.samples.len())
    }

    /// Window-uniformity invariant: all channels carry the same sample count.
    pub fn is_uniform(&self) -> bool {
        let n = self.samples_per_channel();
        self.channels.iter().all(|c| c.samples.len() == n)
    }
}

/// A block of contiguous samples for all channels of one front-end, appended
/// to the ring as one ingest call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleBlock {
    pub sample_period_ps: u64,
    pub channels: Vec<Vec<u16>>,
}

impl SampleBlock {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bundle per-channel digitized waveforms into one block.
    pub fn from_waveforms(waveforms: &[Waveform]) -> Result<Self, FrontendError> {
        let first = waveforms.first().ok_or_else(|| {
            FrontendError::InvalidConfig("a sample block needs at least one channel".into())
        })?;
        let mut channels = Vec::with_capacity(waveforms.len());
        for w in waveforms {
            if w.sample_period_ps != first.sample_period_ps {
                return Err(FrontendError::PeriodMismatch {
                    block_ps: w.sample_period_ps,
                    ring_ps: first.sample_period_ps,
                });
            }
            if w.len() != first.len() {
                return Err(FrontendError::InvalidConfig(
                    "all channels of a block must have the same length".into(),
                ));
            }
            let mut ch = Vec::with_capacity(w.len());
            for &code in &w.codes {
                if code > u16::MAX as u32 {
                    return Err(FrontendError::CodeOverflow(code));
                }
                ch.push(code as u16);
            }
            channels.push(ch);
        }
        Ok(Self {
            sample_period_ps: first.sample_period_ps,
            channels,
        })
    }
}

/// Per-channel circular sample store. Sample index `k` (a running count since
/// the front-end was armed) corresponds to local time `t0 + k·period`; once
/// full, the oldest retained sample is exactly `capacity` behind the write
/// cursor.
#[derive(Debug, Clone)]
pub struct RingBuffer {
    n_channels: usize,
    capacity: u64,
    sample_period_ps: u64,
    t0_local_ps: i64,
    /// Interleaved storage: slot `(k % capacity) * n_channels + ch`.
    data: Vec<u16>,
    written: u64,
}

impl RingBuffer {
    pub fn new(
        n_channels: usize,
        capacity_samples: u64,
        sample_period_ps: u64,
        t0_local_ps: i64,
    ) -> Result<Self, FrontendError> {
        if n_channels == 0 || capacity_samples == 0 || sample_period_ps == 0 {
            return Err(FrontendError::InvalidConfig(
                "ring buffer needs channels, capacity, and a sample period".into(),
            ));
        }
        Ok(Self {
            n_channels,
            capacity: capacity_samples,
            sample_period_ps,
            t0_local_ps,
            data: vec![0; n_channels * capacity_samples as usize],
            written: 0,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn capacity_samples(&self) -> u64 {
        self.capacity
    }

    pub fn sample_period_ps(&self) -> u64 {
        self.sample_period_ps
    }

    /// Running count of samples written per channel.
    pub fn written(&self) -> u64 {
        self.written
    }

    /// Index of the oldest sample still retained.
    pub fn oldest_retained(&self) -> u64 {
        self.written.saturating_sub(self.capacity)
    }

    pub fn retention_ps(&self) -> u64 {
        self.capacity * self.sample_period_ps
    }

    /// Local time of sample index `k`.
    pub fn local_time_of(&self, index: u64) -> i64 {
        self.t0_local_ps + index as i64 * self.sample_period_ps as i64
    }

    /// First sample index at or after a local time.
    pub fn index_at_or_after(&self, local_ps: i64) -> i64 {
        let rel = local_ps - self.t0_local_ps;
        let period = self.sample_period_ps as i64;
        rel.div_euclid(period) + i64::from(rel.rem_euclid(period) != 0)
    }

    /// Append a block at the write cursor, silently overwriting the oldest
    /// samples once full. Never blocks and never fails because of pending
    /// trigger extractions.
    pub fn ingest(&mut self, block: &SampleBlock) -> Result<(), FrontendError> {
        if block.sample_period_ps != self.sample_period_ps {
            return Err(FrontendError::PeriodMismatch {
                block_ps: block.sample_period_ps,
                ring_ps: self.sample_period_ps,
            });
        }
        if block.channels.len() != self.n_channels {
            return Err(FrontendError::ChannelCountMismatch {
                block: block.channels.len(),
                ring: self.n_channels,
            });
        }
        let n = block.len();
        if block.channels.iter().any(|c| c.len() != n) {
            return Err(FrontendError::InvalidConfig("ragged sample block".into()));
        }
        for i in 0..n {
            let slot = ((self.written % self.capacity) as usize) * self.n_channels;
            for (ch, samples) in block.channels.iter().enumerate() {
                self.data[slot + ch] = samples[i];
            }
            self.written += 1;
        }
        Ok(())
    }

    /// Copy `len` samples of one channel starting at absolute index `start`.
    pub fn copy_window(
        &self,
        channel: usize,
        start: u64,
        len: u64,
    ) -> Result<Vec<u16>, FrontendError> {
        if start < self.oldest_retained() {
            return Err(FrontendError::DataOverwritten(format!(
                "window start index {start} is older than retained index {}",
                self.oldest_retained()
            )));
        }
        if start + len > self.written {
            return Err(FrontendError::DataOverwritten(format!(
                "window end index {} is beyond written index {}",
                start + len,
                self.written
            )));
        }
        let mut out = Vec::with_capacity(len as usize);
        for k in start..start + len {
            let slot = ((k % self.capacity) as usize) * self.n_channels + channel;
            out.push(self.data[slot]);
        }
        Ok(out)
    }

    #[cfg(test)]
    fn raw_state(&self) -> (&[u16], u64) {
        (&self.data, self.written)
    }
}

/// What `accept_trigger` did with a pulse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TriggerDisposition {
    /// The full window was already digitized; here is the fragment.
    Complete(Fragment),
    /// The post-trigger part of the window is still in the future; the
    /// fragment will be emitted by a later `ingest` call.
    Deferred,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PortStats {
    pub triggers: u64,
    pub fragments: u64,
    pub next_seq: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrontendStats {
    pub triggers_accepted: u64,
    pub fragments_emitted: u64,
    pub deferred_completions: u64,
    /// Deferred triggers whose window had been evicted by completion time.
    /// Zero whenever the retention sizing rule holds.
    pub dropped_triggers: u64,
    pub per_port: BTreeMap<u8, PortStats>,
}

#[derive(Debug, Clone)]
struct PendingTrigger {
    local_ps: i64,
    start_index: u64,
    end_index: u64,
}

/// A multi-port, dead-time-free front-end.
pub struct Frontend {
    id: u16,
    ports: BTreeMap<u8, TriggerPort>,
    ring: RingBuffer,
    sync: SyncState,
    pending: BTreeMap<u8, VecDeque<PendingTrigger>>,
    stats: FrontendStats,
}

impl Frontend {
    /// Configure a front-end. Fails when port ids collide, the window sizing
    /// rule is violated, or the configuration is otherwise inconsistent.
    pub fn new(
        id: u16,
        n_channels: usize,
        sample_period_ps: u64,
        ring_capacity_samples: u64,
        t0_local_ps: i64,
        ports: Vec<TriggerPort>,
    ) -> Result<Self, FrontendError> {
        if ports.is_empty() {
            return Err(FrontendError::InvalidConfig(
                "a front-end needs at least one trigger port".into(),
            ));
        }
        let ring =
            RingBuffer::new(n_channels, ring_capacity_samples, sample_period_ps, t0_local_ps)?;
        let mut table = BTreeMap::new();
        for p in ports {
            if p.post_trigger_ns == 0 {
                return Err(FrontendError::InvalidConfig(format!(
                    "port {}: post_trigger_ns must be positive",
                    p.port_id
                )));
            }
            let window_ps = p.window_ps() as u64;
            if ring.retention_ps() < RETENTION_SAFETY_FACTOR * window_ps {
                return Err(FrontendError::InvalidConfig(format!(
                    "ring retention {} ps is less than {}x the {} ps window of port {}",
                    ring.retention_ps(),
                    RETENTION_SAFETY_FACTOR,
                    window_ps,
                    p.port_id
                )));
            }
            if table.insert(p.port_id, p).is_some() {
                return Err(FrontendError::InvalidConfig(format!(
                    "duplicate port id {}",
                    p.port_id
                )));
            }
        }
        Ok(Self {
            id,
            ports: table,
            ring,
            sync: SyncState::new(id),
            pending: BTreeMap::new(),
            stats: FrontendStats::default(),
        })
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn ring(&self) -> &RingBuffer {
        &self.ring
    }

    pub fn ports(&self) -> &BTreeMap<u8, TriggerPort> {
        &self.ports
    }

    pub fn stats(&self) -> &FrontendStats {
        &self.stats
    }

    pub fn sync_state(&self) -> &SyncState {
        &self.sync
    }

    pub fn apply_sync_pulse(&mut self, local_ps: i64, global_ps: i64) -> Result<(), FrontendError> {
        self.sync.apply_sync_pulse(local_ps, global_ps)?;
        Ok(())
    }

    /// Identity synchronization (local time equals global time), convenient
    /// for drift-free setups and tests.
    pub fn with_identity_sync(mut self) -> Self {
        self.sync
            .apply_sync_pulse(0, 0)
            .expect("identity pulse on fresh state");
        self
    }

    /// Destination bound to a trigger port: a pure table lookup.
    pub fn route(&self, port_id: u8) -> Result<u16, FrontendError> {
        self.ports
            .get(&port_id)
            .map(|p| p.destination_id)
            .ok_or(FrontendError::UnknownPort(port_id))
    }

    /// Append digitized samples and complete any deferred triggers whose
    /// windows the new data finishes. Returned fragments are in acceptance
    /// order per port, ports in ascending id order.
    pub fn ingest(&mut self, block: &SampleBlock) -> Result<Vec<Fragment>, FrontendError> {
        self.ring.ingest(block)?;
        Ok(self.drain_pending())
    }

    /// Present a trigger observed at `local_ps` on the front-end's clock.
    ///
    /// Succeeds for every trigger whose window is within retention, no
    /// matter how many triggers on any port were accepted recently. A window
    /// reaching past the ingested data defers and completes on a later
    /// `ingest`.
    pub fn accept_trigger(
        &mut self,
        port_id: u8,
        local_ps: i64,
    ) -> Result<TriggerDisposition, FrontendError> {
        let port = *self
            .ports
            .get(&port_id)
            .ok_or(FrontendError::UnknownPort(port_id))?;
        let start_local = local_ps - port.pre_ps();
        let start_index = self.ring.index_at_or_after(start_local);
        if start_index < 0 {
            return Err(FrontendError::DataOverwritten(format!(
                "window start {start_local} ps precedes the sampling start"
            )));
        }
        let start_index = start_index as u64;
        if start_index < self.ring.oldest_retained() {
            return Err(FrontendError::DataOverwritten(format!(
                "window start index {start_index} already evicted at trigger time"
            )));
        }
        let window = port.window_samples(self.ring.sample_period_ps());
        let end_index = start_index + window;

        self.stats.triggers_accepted += 1;
        self.stats.per_port.entry(port_id).or_default().triggers += 1;

        let queue = self.pending.entry(port_id).or_default();
        if !queue.is_empty() || end_index > self.ring.written() {
            queue.push_back(PendingTrigger {
                local_ps,
                start_index,
                end_index,
            });
            return Ok(TriggerDisposition::Deferred);
        }
        let fragment = self.extract(&port, local_ps, start_index, window)?;
        Ok(TriggerDisposition::Complete(fragment))
    }

    /// Convenience for identity-synced setups: trigger by global timestamp.
    pub fn accept_trigger_pulse(
        &mut self,
        pulse: &TriggerPulse,
    ) -> Result<TriggerDisposition, FrontendError> {
        self.accept_trigger(pulse.port_id, pulse.timestamp.as_ps())
    }

    fn drain_pending(&mut self) -> Vec<Fragment> {
        let mut out = Vec::new();
        let written = self.ring.written();
        let port_ids: Vec<u8> = self.pending.keys().copied().collect();
        for port_id in port_ids {
            let port = self.ports[&port_id];
            loop {
                let Some(head) = self.pending.get_mut(&port_id).and_then(|q| {
                    if q.front().is_some_and(|p| p.end_index <= written) {
                        q.pop_front()
                    } else {
                        None
                    }
                }) else {
                    break;
                };
                let window = head.end_index - head.start_index;
                match self.extract(&port, head.local_ps, head.start_index, window) {
                    Ok(fragment) => {
                        self.stats.deferred_completions += 1;
                        out.push(fragment);
                    }
                    Err(_) => {
                        // Window evicted while deferred: only possible when
                        // the retention sizing rule was violated.
                        self.stats.dropped_triggers += 1;
                    }
                }
            }
        }
        out
    }

    fn extract(
        &mut self,
        port: &TriggerPort,
        local_ps: i64,
        start_index: u64,
        window: u64,
    ) -> Result<Fragment, FrontendError> {
        let timestamp = self.sync.local_to_global(local_ps)?;
        let mut channels = Vec::with_capacity(self.ring.n_channels());
        for ch in 0..self.ring.n_channels() {
            channels.push(ChannelWindow {
                channel_id: ch as u16,
                samples: self.ring.copy_window(ch, start_index, window)?,
            });
        }
        let port_stats = self.stats.per_port.entry(port.port_id).or_default();
        let seq_no = port_stats.next_seq;
        port_stats.next_seq += 1;
        port_stats.fragments += 1;
        self.stats.fragments_emitted += 1;
        Ok(Fragment {
            frontend_id: self.id,
            port_id: port.port_id,
            seq_no,
            timestamp,
            channels,
        })
    }
}

/// Legacy single-trigger front-end: non-paralyzable dead time per accepted
/// event; a rejected trigger does not extend the busy window.
#[derive(Debug, Clone)]
pub struct LegacyFrontend {
    dead_time_ps: i64,
    busy_until_ps: i64,
    last_trigger_ps: i64,
    accepted: u64,
    rejected: u64,
}

impl LegacyFrontend {
    pub fn new(dead_time_us: u64) -> Self {
        Self {
            dead_time_ps: dead_time_us as i64 * 1_000_000,
            busy_until_ps: i64::MIN,
            last_trigger_ps: i64::MIN,
            accepted: 0,
            rejected: 0,
        }
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn offered(&self) -> u64 {
        self.accepted + self.rejected
    }

    pub fn live_fraction(&self) -> f64 {
        if self.offered() == 0 {
            return 1.0;
        }
        self.accepted as f64 / self.offered() as f64
    }

    /// Present one trigger; triggers must arrive in nondecreasing time order.
    pub fn legacy_accept(&mut self, t_ps: i64) -> Result<bool, FrontendError> {
        if t_ps < self.last_trigger_ps {
            return Err(FrontendError::NonMonotonicTrigger {
                earlier: self.last_trigger_ps,
                later: t_ps,
            });
        }
        self.last_trigger_ps = t_ps;
        if t_ps >= self.busy_until_ps {
            self.accepted += 1;
            self.busy_until_ps = t_ps + self.dead_time_ps;
            Ok(true)
        } else {
            self.rejected += 1;
            Ok(false)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp};

    const PERIOD_PS: u64 = 1_000_000; // 1 MHz sampling for compact tests

    fn block(values: &[u16]) -> SampleBlock {
        SampleBlock {
            sample_period_ps: PERIOD_PS,
            channels: vec![values.to_vec()],
        }
    }

    fn counting_block(start: u64, len: u64) -> SampleBlock {
        block(
            &(start..start + len)
                .map(|v| (v % 65536) as u16)
                .collect::<Vec<_>>(),
        )
    }

    fn test_frontend(capacity: u64, ports: Vec<TriggerPort>) -> Frontend {
        Frontend::new(9, 1, PERIOD_PS, capacity, 0, ports)
            .unwrap()
            .with_identity_sync()
    }

    fn port(id: u8, dest: u16) -> TriggerPort {
        TriggerPort {
            port_id: id,
            destination_id: dest,
            pre_trigger_ns: 2_000,
            post_trigger_ns: 8_000,
        }
    }

    #[test]
    fn ingest_tracks_retention() {
        let mut ring = RingBuffer::new(1, 1_000, PERIOD_PS, 0).unwrap();
        ring.ingest(&counting_block(0, 100)).unwrap();
        assert_eq!(ring.written(), 100);
        assert_eq!(ring.oldest_retained(), 0);
        ring.ingest(&counting_block(100, 1_400)).unwrap();
        assert_eq!(ring.written(), 1_500);
        assert_eq!(ring.oldest_retained(), 500);
        // Retained content is exactly the newest 1000 samples.
        assert_eq!(ring.copy_window(0, 500, 1).unwrap(), vec![500]);
        assert!(ring.copy_window(0, 499, 1).is_err());
    }

    #[test]
    fn period_mismatch_rejected() {
        let mut ring = RingBuffer::new(1, 100, PERIOD_PS, 0).unwrap();
        let bad = SampleBlock {
            sample_period_ps: PERIOD_PS + 1,
            channels: vec![vec![0; 4]],
        };
        assert!(matches!(
            ring.ingest(&bad),
            Err(FrontendError::PeriodMismatch { .. })
        ));
    }

    #[test]
    fn ingest_state_independent_of_pending_triggers() {
        // Differential test: the ring state after ingest is identical whether
        // or not triggers are pending.
        let mut with_pending = test_frontend(4_096, vec![port(1, 1)]);
        let mut without = test_frontend(4_096, vec![port(1, 1)]);
        with_pending.ingest(&counting_block(0, 64)).unwrap();
        without.ingest(&counting_block(0, 64)).unwrap();
        for k in 0..3 {
            let t = 60_000_000 + k * 1_000_000;
            assert_eq!(
                with_pending.accept_trigger(1, t).unwrap(),
                TriggerDisposition::Deferred
            );
        }
        with_pending.ingest(&counting_block(64, 64)).unwrap();
        without.ingest(&counting_block(64, 64)).unwrap();
        assert_eq!(with_pending.ring.raw_state(), without.ring.raw_state());
    }

    #[test]
    fn overlapping_windows_both_fragment() {
        let mut fe = test_frontend(4_096, vec![port(1, 1), port(2, 2)]);
        fe.ingest(&counting_block(0, 128)).unwrap();
        // Two triggers 1 us apart with 10 us windows: windows overlap, both
        // extract, zero rejections.
        let a = fe.accept_trigger(1, 50_000_000).unwrap();
        let b = fe.accept_trigger(2, 51_000_000).unwrap();
        let (fa, fb) = match (a, b) {
            (TriggerDisposition::Complete(x), TriggerDisposition::Complete(y)) => (x, y),
            other => panic!("expected two complete fragments, got {other:?}"),
        };
        assert_eq!(fa.samples_per_channel(), 10);
        assert_eq!(fb.samples_per_channel(), 10);
        assert_eq!(fa.seq_no, 0);
        assert_eq!(fb.seq_no, 0);
        // Overlap duplicates the shared samples into both fragments.
        assert_eq!(fa.channels[0].samples[1..], fb.channels[0].samples[..9]);
    }

    #[test]
    fn too_old_trigger_is_data_overwritten() {
        let mut fe = test_frontend(1_024, vec![port(1, 1)]);
        fe.ingest(&counting_block(0, 4_096)).unwrap();
        // Oldest retained index is 3072; a trigger at sample 100 is long gone.
        assert!(matches!(
            fe.accept_trigger(1, 100 * PERIOD_PS as i64),
            Err(FrontendError::DataOverwritten(_))
        ));
        assert!(matches!(
            fe.accept_trigger(1, -5_000_000),
            Err(FrontendError::DataOverwritten(_))
        ));
        assert_eq!(fe.stats().triggers_accepted, 0);
    }

    #[test]
    fn unknown_port_rejected() {
        let mut fe = test_frontend(1_024, vec![port(1, 1)]);
        assert_eq!(
            fe.accept_trigger(7, 0).unwrap_err(),
            FrontendError::UnknownPort(7)
        );
        assert_eq!(fe.route(7).unwrap_err(), FrontendError::UnknownPort(7));
        assert_eq!(fe.route(1).unwrap(), 1);
    }

    #[test]
    fn deferred_trigger_completes_on_ingest() {
        let mut fe = test_frontend(4_096, vec![port(1, 1)]);
        fe.ingest(&counting_block(0, 32)).unwrap();
        // Trigger after the ingested region: defer, then complete.
        let t = 40 * PERIOD_PS as i64;
        assert_eq!(
            fe.accept_trigger(1, t).unwrap(),
            TriggerDisposition::Deferred
        );
        assert!(fe.ingest(&counting_block(32, 10)).unwrap().is_empty());
        let done = fe.ingest(&counting_block(42, 10)).unwrap();
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].seq_no, 0);
        assert_eq!(done[0].samples_per_channel(), 10);
        // Window [t - 2 us, t + 8 us) covers samples 38..48.
        assert_eq!(done[0].channels[0].samples, (38u16..48).collect::<Vec<_>>());
    }

    #[test]
    fn sequence_numbers_are_gapless_per_port() {
        let mut fe = test_frontend(8_192, vec![port(1, 1), port(2, 2)]);
        fe.ingest(&counting_block(0, 8_000)).unwrap();
        let mut seqs: BTreeMap<u8, Vec<u64>> = BTreeMap::new();
        for k in 0..50i64 {
            let port_id = if k % 3 == 0 { 2 } else { 1 };
            let t = (100 + k * 30) * PERIOD_PS as i64;
            match fe.accept_trigger(port_id, t).unwrap() {
                TriggerDisposition::Complete(f) => {
                    seqs.entry(f.port_id).or_default().push(f.seq_no)
                }
                TriggerDisposition::Deferred => panic!("window should be available"),
            }
        }
        for (_, s) in seqs {
            let expect: Vec<u64> = (0..s.len() as u64).collect();
            assert_eq!(s, expect);
        }
    }

    #[test]
    fn poisson_burst_zero_losses() {
        // 1000 Poisson triggers across 2 ports at 10 kHz aggregate, retention
        // 1 ms, 10 us windows: every trigger fragments, nothing is lost.
        let mut fe = test_frontend(1_000, vec![port(1, 1), port(2, 2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let exp = Exp::new(10_000.0).unwrap();
        let mut t_s = 0.001f64;
        let mut triggers: Vec<(u8, i64)> = Vec::new();
        for _ in 0..1_000 {
            t_s += exp.sample(&mut rng);
            let port_id = if rng.gen_bool(0.5) { 1 } else { 2 };
            triggers.push((port_id, (t_s * 1e12) as i64));
        }
        let mut fragments = 0usize;
        let mut ingested: u64 = 0;
        for &(port_id, t) in &triggers {
            // Keep the ring just ahead of the trigger stream, block by block.
            let needed = (t / PERIOD_PS as i64) as u64 + 16;
            while ingested < needed {
                fragments += fe.ingest(&counting_block(ingested, 64)).unwrap().len();
                ingested += 64;
            }
            match fe.accept_trigger(port_id, t).unwrap() {
                TriggerDisposition::Complete(_) => fragments += 1,
                TriggerDisposition::Deferred => {}
            }
        }
        fragments += fe.ingest(&counting_block(ingested, 64)).unwrap().len();
        assert_eq!(fragments, 1_000);
        assert_eq!(fe.stats().dropped_triggers, 0);
        assert_eq!(fe.stats().fragments_emitted, 1_000);
    }

    #[test]
    fn routing_is_a_pure_port_partition() {
        let mut fe = test_frontend(8_192, vec![port(1, 10), port(2, 20)]);
        fe.ingest(&counting_block(0, 8_000)).unwrap();
        let mut by_dest: BTreeMap<u16, u32> = BTreeMap::new();
        for k in 0..100i64 {
            let port_id = if k % 2 == 0 { 1 } else { 2 };
            let t = (50 + k * 40) * PERIOD_PS as i64;
            if let TriggerDisposition::Complete(f) = fe.accept_trigger(port_id, t).unwrap() {
                let dest = fe.route(f.port_id).unwrap();
                assert_eq!(dest, if f.port_id == 1 { 10 } else { 20 });
                *by_dest.entry(dest).or_default() += 1;
            }
        }
        assert_eq!(by_dest[&10], 50);
        assert_eq!(by_dest[&20], 50);
    }

    #[test]
    fn legacy_dead_time_examples() {
        let mut fe = LegacyFrontend::new(DEFAULT_DEAD_TIME_US);
        // 100 us apart: second rejected.
        assert!(fe.legacy_accept(0).unwrap());
        assert!(!fe.legacy_accept(100_000_000).unwrap());
        // 300 us after the first: accepted (rejection did not extend busy).
        assert!(fe.legacy_accept(300_000_000).unwrap());
        assert_eq!(fe.accepted(), 2);
        assert_eq!(fe.rejected(), 1);
        assert!(matches!(
            fe.legacy_accept(100),
            Err(FrontendError::NonMonotonicTrigger { .. })
        ));
    }

    #[test]
    fn legacy_live_fraction_matches_analytic() {
        // Poisson at 3 kHz, tau 200 us: live fraction 1/(1 + r*tau) = 0.625.
        let mut fe = LegacyFrontend::new(DEFAULT_DEAD_TIME_US);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let exp = Exp::new(3_000.0).unwrap();
        let mut t_s = 0.0f64;
        for _ in 0..120_000 {
            t_s += exp.sample(&mut rng);
            fe.legacy_accept((t_s * 1e12) as i64).unwrap();
        }
        let analytic = 1.0 / (1.0 + 3_000.0 * 200e-6);
        assert!(
            (fe.live_fraction() - analytic).abs() <= 0.02,
            "live {} vs analytic {analytic}",
            fe.live_fraction()
        );
    }

    #[test]
    fn retention_sizing_rule_enforced() {
        // 10 us window needs 40 us retention = 40 samples at 1 MHz.
        assert!(Frontend::new(1, 1, PERIOD_PS, 39, 0, vec![port(1, 1)]).is_err());
        assert!(Frontend::new(1, 1, PERIOD_PS, 40, 0, vec![port(1, 1)]).is_ok());
    }

    proptest! {
        // Sample fidelity: fragments always carry exactly the samples an
        // unbounded shadow buffer holds at the same indices.
        #[test]
        fn fragment_samples_match_shadow(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut fe = test_frontend(256, vec![port(1, 1)]);
            let mut shadow: Vec<u16> = Vec::new();
            let mut fragments: Vec<Fragment> = Vec::new();
            for _ in 0..40 {
                let n = rng.gen_range(1..64u64);
                let start = shadow.len() as u64;
                let blk = counting_block(start, n);
                shadow.extend_from_slice(&blk.channels[0]);
                fragments.extend(fe.ingest(&blk).unwrap());
                if rng.gen_bool(0.7) && shadow.len() > 16 {
                    let idx = rng.gen_range(2..shadow.len() as i64);
                    let t = idx * PERIOD_PS as i64;
                    match fe.accept_trigger(1, t) {
                        Ok(TriggerDisposition::Complete(f)) => fragments.push(f),
                        Ok(TriggerDisposition::Deferred) => {}
                        Err(FrontendError::DataOverwritten(_)) => {}
                        Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
                    }
                }
            }
            for f in &fragments {
                // Identity sync: the fragment timestamp is the trigger time,
                // so the window start index is recomputable exactly.
                let t_ps = f.timestamp.as_ps();
                let rel = t_ps - 2_000_000;
                let start = rel.div_euclid(PERIOD_PS as i64)
                    + i64::from(rel.rem_euclid(PERIOD_PS as i64) != 0);
                let start = start as usize;
                let got = &f.channels[0].samples;
                prop_assert_eq!(got.as_slice(), &shadow[start..start + got.len()]);
            }
        }
    }
}
