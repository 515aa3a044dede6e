//! Message delivery between server and clients, with a logging tap.
//!
//! Implementations move exactly two message types, model downloads and
//! gradient batches, and record every delivered message. The log is the
//! privacy audit surface: any value leaving a client must appear here as
//! one of those two types, and user factor rows have no message type at all.
//!
//! Payload accounting counts 8 bytes per real carried, the quantity the
//! per-round cost formulas describe; indices, tags, and length prefixes are
//! framing overhead, tracked separately.

use alloc::string::String;
use alloc::vec::Vec;

use super::{GradientBatch, ModelDownload};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    /// The peer is unreachable this round; treated as dropout, not failure.
    #[error("client {user} unreachable")]
    Disconnected { user: usize },
    /// Anything that genuinely broke (socket failure, codec mismatch).
    #[error("transport failure: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    ModelDownload,
    GradientBatch,
}

/// One delivered message, as the audit log sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageRecord {
    pub kind: MessageKind,
    /// The client this message was delivered to or received from.
    pub user: usize,
    pub round: u64,
    /// 8 bytes per 64-bit real in the message body.
    pub payload_bytes: u64,
    /// Everything else a concrete wire format added (frame, tag, indices).
    pub overhead_bytes: u64,
}

impl MessageRecord {
    pub fn for_download(user: usize, dl: &ModelDownload, overhead_bytes: u64) -> Self {
        let reals = dl.services.data().len() + dl.times.data().len();
        MessageRecord {
            kind: MessageKind::ModelDownload,
            user,
            round: dl.round,
            payload_bytes: 8 * reals as u64,
            overhead_bytes,
        }
    }

    pub fn for_batch(batch: &GradientBatch, overhead_bytes: u64) -> Self {
        let reals: usize = batch
            .items
            .iter()
            .map(|r| r.service_grad.len() + r.time_grad.len())
            .sum();
        MessageRecord {
            kind: MessageKind::GradientBatch,
            user: batch.user,
            round: batch.round,
            payload_bytes: 8 * reals as u64,
            overhead_bytes,
        }
    }
}

/// Delivery of the two protocol messages. `send_*` returns the message as
/// the receiving side sees it, so a lossy or re-encoding implementation is
/// observable to the caller. Implementations must tolerate concurrent sends.
pub trait Transport {
    fn send_download(&self, user: usize, dl: &ModelDownload) -> Result<ModelDownload, TransportError>;

    fn send_batch(&self, batch: GradientBatch) -> Result<GradientBatch, TransportError>;

    /// Snapshot of every message delivered so far. Order may reflect the
    /// execution schedule under concurrency; per-round aggregates do not.
    fn log(&self) -> Vec<MessageRecord>;

    /// Total payload bytes delivered during `round`, both directions.
    fn round_payload_bytes(&self, round: u64) -> u64 {
        self.log()
            .iter()
            .filter(|m| m.round == round)
            .map(|m| m.payload_bytes)
            .sum()
    }
}

/// Zero-copy in-memory transport with an optional dropout schedule. No
/// framing, so overhead is always zero and delivery is the identity.
#[cfg(feature = "std")]
#[derive(Debug, Default)]
pub struct InProcessTransport {
    log: std::sync::Mutex<Vec<MessageRecord>>,
    offline: alloc::collections::BTreeSet<(u64, usize)>,
    upload_drops: alloc::collections::BTreeSet<(u64, usize)>,
}

#[cfg(feature = "std")]
impl InProcessTransport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks (round, user) pairs whose download fails: the client misses
    /// the whole round.
    pub fn offline(mut self, pairs: impl IntoIterator<Item = (u64, usize)>) -> Self {
        self.offline.extend(pairs);
        self
    }

    /// Marks (round, user) pairs whose upload is lost after local training.
    pub fn drop_uploads(mut self, pairs: impl IntoIterator<Item = (u64, usize)>) -> Self {
        self.upload_drops.extend(pairs);
        self
    }

    fn push(&self, record: MessageRecord) {
        self.log.lock().expect("transport log poisoned").push(record);
    }
}

#[cfg(feature = "std")]
impl Transport for InProcessTransport {
    fn send_download(&self, user: usize, dl: &ModelDownload) -> Result<ModelDownload, TransportError> {
        if self.offline.contains(&(dl.round, user)) {
            return Err(TransportError::Disconnected { user });
        }
        self.push(MessageRecord::for_download(user, dl, 0));
        Ok(dl.clone())
    }

    fn send_batch(&self, batch: GradientBatch) -> Result<GradientBatch, TransportError> {
        if self.upload_drops.contains(&(batch.round, batch.user)) {
            return Err(TransportError::Disconnected { user: batch.user });
        }
        self.push(MessageRecord::for_batch(&batch, 0));
        Ok(batch)
    }

    fn log(&self) -> Vec<MessageRecord> {
        self.log.lock().expect("transport log poisoned").clone()
    }

    fn round_payload_bytes(&self, round: u64) -> u64 {
        self.log
            .lock()
            .expect("transport log poisoned")
            .iter()
            .filter(|m| m.round == round)
            .map(|m| m.payload_bytes)
            .sum()
    }
}
