//! Multi-host data-acquisition front-end library.
//!
//! Models a dead-time-free digitizer front-end with multiple trigger-input
//! ports: a continuously written sample ring buffer from which every trigger
//! extracts a windowed, timestamped fragment routed to its own back-end event
//! builder (1-to-X). Fragments are framed for transport, persisted bit-exact
//! with 10 ns-tick timestamps, merged online by (port, sequence) or offline
//! by timestamp coincidence, and contrasted against a legacy single-trigger
//! front-end with per-event dead time. An ADC characterization toolchain
//! (quantizer models, four-parameter sine fit, SINAD/ENOB, noise calibration)
//! covers the digitizer side.

pub mod analysis;
pub mod event_builder;
pub mod frontend;
pub mod scenario;
pub mod signal;
pub mod storage;
pub mod timestamp;
pub mod transport;
