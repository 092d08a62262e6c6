//! Framing of fragments and control records for delivery from front-ends to
//! event builders, plus the per-destination send queue whose overflow policy
//! is spill-to-disk: submission never drops data and never blocks the
//! front-end, whatever the consumer does.
//!
//! Wire frame (little-endian): record_type u8, flags u8, payload_length u32,
//! then the payload. Unknown record types are skippable via the length.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::frontend::{ChannelWindow, Fragment};
use crate::timestamp::TimeStamp;

pub const RECORD_FRAGMENT: u8 = 0x01;
pub const RECORD_RUN_HEADER: u8 = 0x02;
pub const RECORD_SYNC_MARKER: u8 = 0x03;
pub const RECORD_HELLO: u8 = 0x04;
pub const RECORD_END_OF_RUN: u8 = 0x05;
pub const RECORD_EVENT: u8 = 0x06;

/// Frame flag bit 0: this record was replayed from a spill store.
pub const FLAG_SPILLED_REPLAY: u8 = 0x01;

/// Bytes of the frame header preceding every payload.
pub const FRAME_HEADER_LEN: usize = 6;

pub const PROTOCOL_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("truncated record: {0}")]
    TruncatedRecord(String),
    #[error(
        "record type {record_type:#04x}: declared payload {declared} bytes, consumed {consumed}"
    )]
    LengthMismatch {
        record_type: u8,
        declared: u32,
        consumed: usize,
    },
    #[error("fragment violates its invariants: {0}")]
    MalformedFragment(String),
    #[error("protocol version {0} is not supported (expected {PROTOCOL_VERSION})")]
    VersionMismatch(u16),
    #[error("spill store failure: {0}")]
    SpillIo(#[source] io::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Run-level metadata stored first in every run file. `epoch_ns` anchors tick
/// 0 to a calendar date-time (informational; merging math is run-relative).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunHeader {
    pub run_id: u32,
    pub epoch_ns: u64,
    pub frontend_id: u16,
}

/// A synchronization pulse as persisted: the front-end's clock read
/// `local_ps` when the broadcast said the global time was `global_ps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncMarker {
    pub frontend_id: u16,
    pub local_ps: i64,
    pub global_ps: i64,
}

/// Connection greeting: who is sending and which port-to-destination
/// bindings the stream will carry. A version mismatch is connection-fatal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub version: u16,
    pub frontend_id: u16,
    pub bindings: Vec<(u8, u16)>,
}

/// A built event as persisted by an event builder; the nested fragments are
/// length-prefixed fragment payloads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub port_id: u8,
    pub seq_no: u64,
    pub complete: bool,
    pub fragments: Vec<Fragment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Fragment(Fragment),
    RunHeader(RunHeader),
    SyncMarker(SyncMarker),
    Hello(Hello),
    EndOfRun,
    Event(EventRecord),
    /// An unknown record type, consumed via its declared length.
    SkippedUnknown { record_type: u8, payload_len: u32 },
}

/// A decoded frame: the record plus its frame flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramedRecord {
    pub flags: u8,
    pub record: Record,
}

// ---------------------------------------------------------------- encoding

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_i64(out: &mut Vec<u8>, v: i64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Fragment payload: frontend_id u16, port_id u8, reserved u8 (=0), seq_no
/// u64, timestamp_ticks u64, n_channels u16, samples_per_channel u32, then
/// per channel: channel_id u16 followed by the u16 sample codes.
pub fn encode_fragment_payload(f: &Fragment) -> Result<Vec<u8>, TransportError> {
    if !f.is_uniform() {
        return Err(TransportError::MalformedFragment(
            "channels carry different sample counts".into(),
        ));
    }
    if f.channels.len() > u16::MAX as usize {
        return Err(TransportError::MalformedFragment("too many channels".into()));
    }
    let samples = f.samples_per_channel();
    let mut out = Vec::with_capacity(26 + f.channels.len() * (2 + 2 * samples));
    put_u16(&mut out, f.frontend_id);
    out.push(f.port_id);
    out.push(0); // reserved
    put_u64(&mut out, f.seq_no);
    put_u64(&mut out, f.timestamp.ticks);
    put_u16(&mut out, f.channels.len() as u16);
    put_u32(&mut out, samples as u32);
    for ch in &f.channels {
        put_u16(&mut out, ch.channel_id);
        for &s in &ch.samples {
            put_u16(&mut out, s);
        }
    }
    Ok(out)
}

fn encode_payload(record: &Record) -> Result<(u8, Vec<u8>), TransportError> {
    Ok(match record {
        Record::Fragment(f) => (RECORD_FRAGMENT, encode_fragment_payload(f)?),
        Record::RunHeader(h) => {
            let mut p = Vec::with_capacity(14);
            put_u32(&mut p, h.run_id);
            put_u64(&mut p, h.epoch_ns);
            put_u16(&mut p, h.frontend_id);
            (RECORD_RUN_HEADER, p)
        }
        Record::SyncMarker(s) => {
            let mut p = Vec::with_capacity(18);
            put_u16(&mut p, s.frontend_id);
            put_i64(&mut p, s.local_ps);
            put_i64(&mut p, s.global_ps);
            (RECORD_SYNC_MARKER, p)
        }
        Record::Hello(h) => {
            let mut p = Vec::with_capacity(6 + 3 * h.bindings.len());
            put_u16(&mut p, h.version);
            put_u16(&mut p, h.frontend_id);
            put_u16(&mut p, h.bindings.len() as u16);
            for &(port, dest) in &h.bindings {
                p.push(port);
                put_u16(&mut p, dest);
            }
            (RECORD_HELLO, p)
        }
        Record::EndOfRun => (RECORD_END_OF_RUN, Vec::new()),
        Record::Event(e) => {
            let mut p = Vec::new();
            p.push(e.port_id);
            p.push(0); // reserved
            put_u64(&mut p, e.seq_no);
            p.push(u8::from(e.complete));
            p.push(e.fragments.len() as u8);
            for f in &e.fragments {
                let fp = encode_fragment_payload(f)?;
                put_u32(&mut p, fp.len() as u32);
                p.extend_from_slice(&fp);
            }
            (RECORD_EVENT, p)
        }
        Record::SkippedUnknown {
            record_type,
            payload_len,
        } => (*record_type, vec![0; *payload_len as usize]),
    })
}

/// Frame a record: 6-byte header plus payload.
pub fn encode_record(record: &Record, flags: u8) -> Result<Vec<u8>, TransportError> {
    let (record_type, payload) = encode_payload(record)?;
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.push(record_type);
    out.push(flags);
    put_u32(&mut out, payload.len() as u32);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Frame a fragment with clear flags.
pub fn encode_fragment(f: &Fragment) -> Result<Vec<u8>, TransportError> {
    encode_record(&Record::Fragment(f.clone()), 0)
}

// ---------------------------------------------------------------- decoding

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        if self.pos + n > self.buf.len() {
            return Err(TransportError::TruncatedRecord(format!(
                "needed {n} bytes at offset {}, payload has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TransportError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TransportError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TransportError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TransportError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, TransportError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_fragment_payload(payload: &[u8]) -> Result<Fragment, TransportError> {
    let mut r = ByteReader::new(payload);
    let fragment = decode_fragment_fields(&mut r)?;
    if r.pos != payload.len() {
        return Err(TransportError::LengthMismatch {
            record_type: RECORD_FRAGMENT,
            declared: payload.len() as u32,
            consumed: r.pos,
        });
    }
    Ok(fragment)
}

fn decode_fragment_fields(r: &mut ByteReader<'_>) -> Result<Fragment, TransportError> {
    let frontend_id = r.u16()?;
    let port_id = r.u8()?;
    let _reserved = r.u8()?;
    let seq_no = r.u64()?;
    let timestamp = TimeStamp::from_ticks(r.u64()?);
    let n_channels = r.u16()? as usize;
    let samples = r.u32()? as usize;
    let mut channels = Vec::with_capacity(n_channels.min(1024));
    for _ in 0..n_channels {
        let channel_id = r.u16()?;
        let raw = r.take(2 * samples)?;
        let samples_vec = raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        channels.push(ChannelWindow {
            channel_id,
            samples: samples_vec,
        });
    }
    Ok(Fragment {
        frontend_id,
        port_id,
        seq_no,
        timestamp,
        channels,
    })
}

fn decode_payload(record_type: u8, payload: &[u8]) -> Result<Record, TransportError> {
    let mut r = ByteReader::new(payload);
    let record = match record_type {
        RECORD_FRAGMENT => Record::Fragment(decode_fragment_fields(&mut r)?),
        RECORD_RUN_HEADER => Record::RunHeader(RunHeader {
            run_id: r.u32()?,
            epoch_ns: r.u64()?,
            frontend_id: r.u16()?,
        }),
        RECORD_SYNC_MARKER => Record::SyncMarker(SyncMarker {
            frontend_id: r.u16()?,
            local_ps: r.i64()?,
            global_ps: r.i64()?,
        }),
        RECORD_HELLO => {
            let version = r.u16()?;
            let frontend_id = r.u16()?;
            let n = r.u16()? as usize;
            let mut bindings = Vec::with_capacity(n);
            for _ in 0..n {
                let port = r.u8()?;
                let dest = r.u16()?;
                bindings.push((port, dest));
            }
            Record::Hello(Hello {
                version,
                frontend_id,
                bindings,
            })
        }
        RECORD_END_OF_RUN => Record::EndOfRun,
        RECORD_EVENT => {
            let port_id = r.u8()?;
            let _reserved = r.u8()?;
            let seq_no = r.u64()?;
            let complete = r.u8()? != 0;
            let n = r.u8()? as usize;
            let mut fragments = Vec::with_capacity(n);
            for _ in 0..n {
                let len = r.u32()? as usize;
                let body = r.take(len)?;
                fragments.push(decode_fragment_payload(body)?);
            }
            Record::Event(EventRecord {
                port_id,
                seq_no,
                complete,
                fragments,
            })
        }
        other => {
            return Ok(Record::SkippedUnknown {
                record_type: other,
                payload_len: payload.len() as u32,
            })
        }
    };
    if r.pos != payload.len() {
        return Err(TransportError::LengthMismatch {
            record_type,
            declared: payload.len() as u32,
            consumed: r.pos,
        });
    }
    Ok(record)
}

/// Decode one frame from the start of a byte slice. Returns the record and
/// the total bytes consumed (header plus payload).
pub fn decode_record(buf: &[u8]) -> Result<(FramedRecord, usize), TransportError> {
    if buf.len() < FRAME_HEADER_LEN {
        return Err(TransportError::TruncatedRecord(format!(
            "frame header needs {FRAME_HEADER_LEN} bytes, got {}",
            buf.len()
        )));
    }
    let record_type = buf[0];
    let flags = buf[1];
    let payload_len = u32::from_le_bytes(buf[2..6].try_into().unwrap()) as usize;
    let total = FRAME_HEADER_LEN + payload_len;
    if buf.len() < total {
        return Err(TransportError::TruncatedRecord(format!(
            "declared payload {payload_len} bytes, only {} available",
            buf.len() - FRAME_HEADER_LEN
        )));
    }
    let record = decode_payload(record_type, &buf[FRAME_HEADER_LEN..total])?;
    Ok((FramedRecord { flags, record }, total))
}

/// Read one frame from a stream. `Ok(None)` on clean end-of-stream; a partial
/// frame is a `TruncatedRecord`.
pub fn read_record<R: Read>(reader: &mut R) -> Result<Option<FramedRecord>, TransportError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let mut got = 0;
    while got < header.len() {
        let n = reader.read(&mut header[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(TransportError::TruncatedRecord(format!(
                "end of stream inside a frame header ({got} of {FRAME_HEADER_LEN} bytes)"
            )));
        }
        got += n;
    }
    let record_type = header[0];
    let flags = header[1];
    let payload_len = u32::from_le_bytes(header[2..6].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; payload_len];
    reader.read_exact(&mut payload).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TransportError::TruncatedRecord(format!(
                "end of stream inside a {payload_len}-byte payload"
            ))
        } else {
            TransportError::Io(e)
        }
    })?;
    let record = decode_payload(record_type, &payload)?;
    Ok(Some(FramedRecord { flags, record }))
}

// ---------------------------------------------------------------- send queue

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitOutcome {
    Enqueued,
    Spilled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueStats {
    pub submitted: u64,
    pub delivered: u64,
    pub spilled: u64,
    pub replayed_from_spill: u64,
    pub spill_io_failures: u64,
}

/// Bounded in-memory fragment queue for one destination. Overflow spills to
/// an append-only disk store; nothing is dropped and `submit` returns
/// immediately regardless of consumer progress. FIFO order (and therefore
/// per-port sequence order) is preserved across the memory/spill boundary:
/// once anything sits in the spill, new fragments append behind it until the
/// spill has been fully replayed.
pub struct SendQueue {
    destination_id: u16,
    capacity: usize,
    mem: VecDeque<Fragment>,
    spill_path: PathBuf,
    spill: Option<File>,
    spill_write_pos: u64,
    spill_read_pos: u64,
    spill_pending: u64,
    stats: QueueStats,
}

impl SendQueue {
    pub fn new(
        destination_id: u16,
        capacity: usize,
        spill_path: impl AsRef<Path>,
    ) -> Result<Self, TransportError> {
        assert!(capacity > 0, "queue capacity must be positive");
        Ok(Self {
            destination_id,
            capacity,
            mem: VecDeque::with_capacity(capacity),
            spill_path: spill_path.as_ref().to_path_buf(),
            spill: None,
            spill_write_pos: 0,
            spill_read_pos: 0,
            spill_pending: 0,
            stats: QueueStats::default(),
        })
    }

    pub fn destination_id(&self) -> u16 {
        self.destination_id
    }

    pub fn stats(&self) -> QueueStats {
        self.stats
    }

    /// Fragments submitted but not yet delivered.
    pub fn pending(&self) -> u64 {
        self.mem.len() as u64 + self.spill_pending
    }

    fn spill_file(&mut self) -> Result<&mut File, io::Error> {
        if self.spill.is_none() {
            let f = OpenOptions::new()
                .create(true)
                .truncate(true)
                .read(true)
                .write(true)
                .open(&self.spill_path)?;
            self.spill = Some(f);
        }
        Ok(self.spill.as_mut().unwrap())
    }

    /// Accept a fragment for delivery. Never blocks and never drops: when the
    /// in-memory bound is reached (or the spill is already in use), the
    /// fragment goes to the spill store. A spill I/O failure is fatal for the
    /// fragment and counted.
    pub fn submit(&mut self, fragment: Fragment) -> Result<SubmitOutcome, TransportError> {
        self.stats.submitted += 1;
        if self.spill_pending == 0 && self.mem.len() < self.capacity {
            self.mem.push_back(fragment);
            return Ok(SubmitOutcome::Enqueued);
        }
        let frame = encode_record(&Record::Fragment(fragment), FLAG_SPILLED_REPLAY)?;
        let write_pos = self.spill_write_pos;
        let result: Result<(), io::Error> = (|| {
            let f = self.spill_file()?;
            f.seek(SeekFrom::Start(write_pos))?;
            f.write_all(&frame)?;
            Ok(())
        })();
        match result {
            Ok(()) => {
                self.spill_write_pos += frame.len() as u64;
                self.spill_pending += 1;
                self.stats.spilled += 1;
                Ok(SubmitOutcome::Spilled)
            }
            Err(e) => {
                self.stats.spill_io_failures += 1;
                Err(TransportError::SpillIo(e))
            }
        }
    }

    /// Deliver the next fragment in submission order, if any.
    pub fn next(&mut self) -> Result<Option<Fragment>, TransportError> {
        if let Some(f) = self.mem.pop_front() {
            self.stats.delivered += 1;
            return Ok(Some(f));
        }
        if self.spill_pending == 0 {
            return Ok(None);
        }
        let read_pos = self.spill_read_pos;
        let f = self.spill_file().map_err(TransportError::SpillIo)?;
        f.seek(SeekFrom::Start(read_pos))
            .map_err(TransportError::SpillIo)?;
        let framed = read_record(f)?.ok_or_else(|| {
            TransportError::TruncatedRecord("spill store ended before its pending count".into())
        })?;
        self.spill_read_pos = f.stream_position().map_err(TransportError::SpillIo)?;
        self.spill_pending -= 1;
        if self.spill_pending == 0 {
            // Spill fully replayed: reuse the file from the start.
            self.spill_write_pos = 0;
            self.spill_read_pos = 0;
        }
        match framed.record {
            Record::Fragment(fr) => {
                self.stats.delivered += 1;
                self.stats.replayed_from_spill += 1;
                Ok(Some(fr))
            }
            _ => Err(TransportError::TruncatedRecord(
                "spill store held a non-fragment record".into(),
            )),
        }
    }
}
