//! Loopback TCP transport. Every message is encoded to the wire format,
//! framed, written to a relay on 127.0.0.1, read back, and decoded; what the
//! trainer consumes is what survived serialization. Payload bytes count the
//! 8-byte reals only, exactly as the in-process transport does; the frame
//! header and index fields land in `overhead_bytes`.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Mutex;
use std::thread::JoinHandle;

use fedlft_core::federation::wire::{
    decode_batch, decode_download, encode_batch, encode_download, TAG_GRADIENT_BATCH,
    TAG_MODEL_DOWNLOAD,
};
use fedlft_core::{GradientBatch, MessageRecord, ModelDownload, Transport, TransportError};

/// One echo relay plus one client connection, torn down on drop.
pub struct SocketTransport {
    stream: Mutex<TcpStream>,
    log: Mutex<Vec<MessageRecord>>,
    relay: Option<JoinHandle<()>>,
}

impl SocketTransport {
    /// Binds a relay on an ephemeral loopback port and connects to it.
    pub fn start() -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let relay = std::thread::spawn(move || {
            if let Ok((mut conn, _)) = listener.accept() {
                echo_frames(&mut conn);
            }
        });
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(SocketTransport {
            stream: Mutex::new(stream),
            log: Mutex::new(Vec::new()),
            relay: Some(relay),
        })
    }

    /// Writes one frame and reads the echoed frame back; returns the tag and
    /// payload that crossed the wire twice.
    fn round_trip(&self, tag: u8, payload: &[u8]) -> Result<Vec<u8>, TransportError> {
        let failed = |what: &str, e: std::io::Error| TransportError::Failed(format!("{what}: {e}"));
        let mut stream = self.stream.lock().expect("socket lock");
        let len = u32::try_from(payload.len())
            .map_err(|_| TransportError::Failed("payload exceeds frame limit".into()))?;
        stream
            .write_all(&len.to_le_bytes())
            .and_then(|_| stream.write_all(&[tag]))
            .and_then(|_| stream.write_all(payload))
            .map_err(|e| failed("send", e))?;

        let mut header = [0u8; 5];
        stream.read_exact(&mut header).map_err(|e| failed("receive header", e))?;
        let echoed_len = u32::from_le_bytes(header[..4].try_into().expect("sized")) as usize;
        let echoed_tag = header[4];
        if echoed_tag != tag || echoed_len != payload.len() {
            return Err(TransportError::Failed("relay returned a mismatched frame".into()));
        }
        let mut echoed = vec![0u8; echoed_len];
        stream.read_exact(&mut echoed).map_err(|e| failed("receive payload", e))?;
        Ok(echoed)
    }
}

impl Transport for SocketTransport {
    fn send_download(&self, user: usize, dl: &ModelDownload) -> Result<ModelDownload, TransportError> {
        let payload = encode_download(dl)
            .map_err(|e| TransportError::Failed(format!("encode download: {e}")))?;
        let echoed = self.round_trip(TAG_MODEL_DOWNLOAD, &payload)?;
        let received = decode_download(&echoed)
            .map_err(|e| TransportError::Failed(format!("decode download: {e}")))?;
        let frame_bytes = 5 + payload.len() as u64;
        let real_bytes = 8 * (dl.services.data().len() + dl.times.data().len()) as u64;
        self.log
            .lock()
            .expect("log lock")
            .push(MessageRecord::for_download(user, dl, frame_bytes - real_bytes));
        Ok(received)
    }

    fn send_batch(&self, batch: GradientBatch) -> Result<GradientBatch, TransportError> {
        let payload = encode_batch(&batch)
            .map_err(|e| TransportError::Failed(format!("encode batch: {e}")))?;
        let echoed = self.round_trip(TAG_GRADIENT_BATCH, &payload)?;
        let received = decode_batch(&echoed)
            .map_err(|e| TransportError::Failed(format!("decode batch: {e}")))?;
        let frame_bytes = 5 + payload.len() as u64;
        let real_bytes: u64 = batch
            .items
            .iter()
            .map(|r| 8 * (r.service_grad.len() + r.time_grad.len()) as u64)
            .sum();
        self.log
            .lock()
            .expect("log lock")
            .push(MessageRecord::for_batch(&batch, frame_bytes - real_bytes));
        Ok(received)
    }

    fn log(&self) -> Vec<MessageRecord> {
        self.log.lock().expect("log lock").clone()
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        // Closing the client side ends the relay's read loop.
        let _ = self
            .stream
            .lock()
            .map(|s| s.shutdown(std::net::Shutdown::Both));
        if let Some(handle) = self.relay.take() {
            let _ = handle.join();
        }
    }
}

fn echo_frames(conn: &mut TcpStream) {
    loop {
        let mut header = [0u8; 5];
        if conn.read_exact(&mut header).is_err() {
            return;
        }
        let len = u32::from_le_bytes(header[..4].try_into().expect("sized")) as usize;
        let mut payload = vec![0u8; len];
        if conn.read_exact(&mut payload).is_err() {
            return;
        }
        if conn
            .write_all(&header)
            .and_then(|_| conn.write_all(&payload))
            .is_err()
        {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedlft_core::{init_factors, GradientRecord, Hyperparams, MessageKind, Shape};

    fn sample_download() -> ModelDownload {
        let shape = Shape::new(1, 4, 3).unwrap();
        let hp = Hyperparams {
            rank: 2,
            seed: 5,
            ..Hyperparams::default()
        };
        let f = init_factors(&shape, &hp).unwrap();
        ModelDownload {
            services: f.services,
            times: f.times,
            round: 3,
        }
    }

    #[test]
    fn download_survives_the_wire_bit_for_bit() {
        let t = SocketTransport::start().unwrap();
        let dl = sample_download();
        let got = t.send_download(1, &dl).unwrap();
        assert_eq!(dl, got);
    }

    #[test]
    fn batch_survives_the_wire_bit_for_bit() {
        let t = SocketTransport::start().unwrap();
        let batch = GradientBatch {
            user: 2,
            round: 1,
            items: vec![
                GradientRecord {
                    service: 0,
                    time: 2,
                    service_grad: vec![0.1, -0.2],
                    time_grad: vec![0.3, 0.4],
                },
                GradientRecord {
                    service: 3,
                    time: 0,
                    service_grad: vec![-1.5, 2.5],
                    time_grad: vec![0.0, -0.125],
                },
            ],
        };
        let got = t.send_batch(batch.clone()).unwrap();
        assert_eq!(batch, got);
    }

    #[test]
    fn payload_bytes_count_reals_and_overhead_counts_the_rest() {
        let t = SocketTransport::start().unwrap();
        let dl = sample_download();
        t.send_download(0, &dl).unwrap();
        let batch = GradientBatch {
            user: 0,
            round: 3,
            items: vec![GradientRecord {
                service: 1,
                time: 1,
                service_grad: vec![1.0, 2.0],
                time_grad: vec![3.0, 4.0],
            }],
        };
        t.send_batch(batch).unwrap();

        let log = t.log();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].kind, MessageKind::ModelDownload);
        // 4 + 3 rows of rank 2: 14 reals.
        assert_eq!(log[0].payload_bytes, 8 * 14);
        // Frame header 5 + round/shape/rank header 16.
        assert_eq!(log[0].overhead_bytes, 21);
        assert_eq!(log[1].kind, MessageKind::GradientBatch);
        assert_eq!(log[1].payload_bytes, 8 * 4);
        // Frame 5 + user/round/rank/count 16 + per-record indices 8.
        assert_eq!(log[1].overhead_bytes, 29);
    }

    #[test]
    fn many_messages_in_sequence_stay_ordered() {
        let t = SocketTransport::start().unwrap();
        let dl = sample_download();
        for user in 0..20 {
            t.send_download(user, &dl).unwrap();
        }
        let log = t.log();
        assert_eq!(log.len(), 20);
        assert!(log.iter().enumerate().all(|(i, m)| m.user == i));
    }
}
