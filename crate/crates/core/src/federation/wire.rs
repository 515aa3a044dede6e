//! Binary wire format for the two protocol messages.
//!
//! A frame is `u32 payload length (LE) | u8 tag | payload`. Payloads carry
//! 64-bit little-endian reals and u32 little-endian indices in the orders
//! below; nothing else.
//!
//! Model download (tag 1):
//! `round u32 | num_services u32 | num_times u32 | rank u32 |`
//! `services row-major f64 x (num_services * rank) |`
//! `times row-major f64 x (num_times * rank)`
//!
//! Gradient batch (tag 2):
//! `user u32 | round u32 | rank u32 | item_count u32 |` then per item
//! `service u32 | time u32 | service_grad f64 x rank | time_grad f64 x rank`

use alloc::vec::Vec;

use super::{GradientBatch, GradientRecord, ModelDownload};
use crate::lft::Matrix;

pub const TAG_MODEL_DOWNLOAD: u8 = 1;
pub const TAG_GRADIENT_BATCH: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("message truncated")]
    Truncated,
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("{0} does not fit the wire field")]
    FieldOverflow(&'static str),
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
}

fn put_u32(buf: &mut Vec<u8>, value: usize, what: &'static str) -> Result<(), WireError> {
    let v = u32::try_from(value).map_err(|_| WireError::FieldOverflow(what))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_u32_from_u64(buf: &mut Vec<u8>, value: u64, what: &'static str) -> Result<(), WireError> {
    let v = u32::try_from(value).map_err(|_| WireError::FieldOverflow(what))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], WireError> {
    if buf.len() < n {
        return Err(WireError::Truncated);
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn read_u32(buf: &mut &[u8]) -> Result<u32, WireError> {
    let b = take(buf, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_f64s(buf: &mut &[u8], count: usize, out: &mut Vec<f64>) -> Result<(), WireError> {
    let b = take(buf, count * 8)?;
    for chunk in b.chunks_exact(8) {
        out.push(f64::from_le_bytes([
            chunk[0], chunk[1], chunk[2], chunk[3], chunk[4], chunk[5], chunk[6], chunk[7],
        ]));
    }
    Ok(())
}

pub fn encode_download(dl: &ModelDownload) -> Result<Vec<u8>, WireError> {
    let mut buf = Vec::with_capacity(16 + 8 * (dl.services.data().len() + dl.times.data().len()));
    put_u32_from_u64(&mut buf, dl.round, "round")?;
    put_u32(&mut buf, dl.services.rows(), "service count")?;
    put_u32(&mut buf, dl.times.rows(), "time count")?;
    if dl.times.cols() != dl.services.cols() {
        return Err(WireError::Malformed("matrices disagree on rank"));
    }
    put_u32(&mut buf, dl.services.cols(), "rank")?;
    put_f64s(&mut buf, dl.services.data());
    put_f64s(&mut buf, dl.times.data());
    Ok(buf)
}

pub fn decode_download(mut payload: &[u8]) -> Result<ModelDownload, WireError> {
    let buf = &mut payload;
    let round = read_u32(buf)? as u64;
    let num_services = read_u32(buf)? as usize;
    let num_times = read_u32(buf)? as usize;
    let rank = read_u32(buf)? as usize;
    // Dimensions must account for the remaining bytes exactly before any
    // allocation trusts them.
    let need = (num_services as u64 + num_times as u64) * rank as u64 * 8;
    if need != buf.len() as u64 {
        return Err(WireError::Malformed("dimensions disagree with payload size"));
    }
    let mut services = Vec::with_capacity(num_services * rank);
    read_f64s(buf, num_services * rank, &mut services)?;
    let mut times = Vec::with_capacity(num_times * rank);
    read_f64s(buf, num_times * rank, &mut times)?;
    Ok(ModelDownload {
        services: Matrix::from_vec(num_services, rank, services)
            .map_err(|_| WireError::Malformed("service matrix size"))?,
        times: Matrix::from_vec(num_times, rank, times)
            .map_err(|_| WireError::Malformed("time matrix size"))?,
        round,
    })
}

pub fn encode_batch(batch: &GradientBatch) -> Result<Vec<u8>, WireError> {
    let rank = batch.items.first().map_or(0, |r| r.service_grad.len());
    let mut buf = Vec::with_capacity(16 + batch.items.len() * (8 + 16 * rank));
    put_u32(&mut buf, batch.user, "user")?;
    put_u32_from_u64(&mut buf, batch.round, "round")?;
    put_u32(&mut buf, rank, "rank")?;
    put_u32(&mut buf, batch.items.len(), "item count")?;
    for rec in &batch.items {
        if rec.service_grad.len() != rank || rec.time_grad.len() != rank {
            return Err(WireError::Malformed("ragged gradient widths"));
        }
        put_u32(&mut buf, rec.service, "service index")?;
        put_u32(&mut buf, rec.time, "time index")?;
        put_f64s(&mut buf, &rec.service_grad);
        put_f64s(&mut buf, &rec.time_grad);
    }
    Ok(buf)
}

pub fn decode_batch(mut payload: &[u8]) -> Result<GradientBatch, WireError> {
    let buf = &mut payload;
    let user = read_u32(buf)? as usize;
    let round = read_u32(buf)? as u64;
    let rank = read_u32(buf)? as usize;
    let item_count = read_u32(buf)? as usize;
    // Each item occupies at least its two index fields; a count beyond that
    // is a forged length, rejected before any allocation trusts it.
    if item_count > buf.len() / 8 {
        return Err(WireError::Malformed("item count exceeds payload"));
    }
    let mut items = Vec::with_capacity(item_count);
    for _ in 0..item_count {
        let service = read_u32(buf)? as usize;
        let time = read_u32(buf)? as usize;
        let mut service_grad = Vec::with_capacity(rank);
        read_f64s(buf, rank, &mut service_grad)?;
        let mut time_grad = Vec::with_capacity(rank);
        read_f64s(buf, rank, &mut time_grad)?;
        items.push(GradientRecord {
            service,
            time,
            service_grad,
            time_grad,
        });
    }
    if !buf.is_empty() {
        return Err(WireError::Malformed("trailing bytes"));
    }
    Ok(GradientBatch { user, round, items })
}

/// Wraps an encoded payload into a full frame.
pub fn frame(tag: u8, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    let len = u32::try_from(payload.len()).map_err(|_| WireError::FieldOverflow("payload length"))?;
    let mut buf = Vec::with_capacity(5 + payload.len());
    buf.extend_from_slice(&len.to_le_bytes());
    buf.push(tag);
    buf.extend_from_slice(payload);
    Ok(buf)
}

/// Splits one frame off the front of `buf`. Returns `None` when more bytes
/// are needed; on success, the tag, payload, and total frame size consumed.
pub fn parse_frame(buf: &[u8]) -> Option<(u8, &[u8], usize)> {
    if buf.len() < 5 {
        return None;
    }
    let len = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if buf.len() < 5 + len {
        return None;
    }
    Some((buf[4], &buf[5..5 + len], 5 + len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample_download() -> ModelDownload {
        ModelDownload {
            services: Matrix::from_vec(2, 3, vec![0.5, -1.25, 3.0, 0.0, 1e-9, 7.5]).unwrap(),
            times: Matrix::from_vec(1, 3, vec![2.0, 4.0, -8.0]).unwrap(),
            round: 12,
        }
    }

    fn sample_batch() -> GradientBatch {
        GradientBatch {
            user: 3,
            round: 12,
            items: vec![
                GradientRecord {
                    service: 1,
                    time: 0,
                    service_grad: vec![0.125, -0.5],
                    time_grad: vec![1.5, 2.5],
                },
                GradientRecord {
                    service: 0,
                    time: 7,
                    service_grad: vec![-0.0625, 9.0],
                    time_grad: vec![0.0, -3.25],
                },
            ],
        }
    }

    #[test]
    fn download_roundtrips_bit_exactly() {
        let dl = sample_download();
        let bytes = encode_download(&dl).unwrap();
        assert_eq!(decode_download(&bytes).unwrap(), dl);
        // 4 header words + 9 reals.
        assert_eq!(bytes.len(), 16 + 9 * 8);
    }

    #[test]
    fn batch_roundtrips_bit_exactly() {
        let b = sample_batch();
        let bytes = encode_batch(&b).unwrap();
        assert_eq!(decode_batch(&bytes).unwrap(), b);

        let empty = GradientBatch { user: 0, round: 0, items: vec![] };
        let bytes = encode_batch(&empty).unwrap();
        assert_eq!(decode_batch(&bytes).unwrap(), empty);
        assert_eq!(bytes.len(), 16);
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let bytes = encode_download(&sample_download()).unwrap();
        for cut in [0, 3, 15, 17, bytes.len() - 1] {
            assert!(decode_download(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let bytes = encode_batch(&sample_batch()).unwrap();
        for cut in [0, 3, 15, 20, bytes.len() - 1] {
            assert!(decode_batch(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        // The download size check is exact, so any extra byte breaks it.
        let mut dl = encode_download(&sample_download()).unwrap();
        dl.push(0);
        assert_eq!(
            decode_download(&dl),
            Err(WireError::Malformed("dimensions disagree with payload size"))
        );
        // A batch stays self-consistent with bytes appended past the items.
        let mut batch = encode_batch(&sample_batch()).unwrap();
        batch.push(0);
        assert_eq!(decode_batch(&batch), Err(WireError::Malformed("trailing bytes")));
    }

    #[test]
    fn forged_item_count_is_rejected() {
        let mut bytes = encode_batch(&sample_batch()).unwrap();
        // Overwrite item_count (offset 12) with a huge value.
        bytes[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_batch(&bytes).is_err());
    }

    #[test]
    fn frames_carry_tag_and_length() {
        let payload = encode_batch(&sample_batch()).unwrap();
        let framed = frame(TAG_GRADIENT_BATCH, &payload).unwrap();
        let (tag, got, consumed) = parse_frame(&framed).unwrap();
        assert_eq!(tag, TAG_GRADIENT_BATCH);
        assert_eq!(got, payload.as_slice());
        assert_eq!(consumed, framed.len());
        // A partial frame asks for more bytes instead of failing.
        assert!(parse_frame(&framed[..4]).is_none());
        assert!(parse_frame(&framed[..framed.len() - 1]).is_none());
    }

    #[test]
    fn oversized_round_is_a_field_overflow() {
        let mut dl = sample_download();
        dl.round = u64::from(u32::MAX) + 1;
        assert_eq!(encode_download(&dl), Err(WireError::FieldOverflow("round")));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn arbitrary_batches_roundtrip(
                user in 0usize..10_000,
                round in 0u64..100_000,
                rank in 1usize..8,
                n in 0usize..20,
                raw in proptest::collection::vec(-1e12f64..1e12, 0..320),
            ) {
                prop_assume!(raw.len() >= n * rank * 2);
                let mut it = raw.into_iter();
                let items: alloc::vec::Vec<GradientRecord> = (0..n)
                    .map(|i| GradientRecord {
                        service: i * 3,
                        time: i % 5,
                        service_grad: (&mut it).take(rank).collect(),
                        time_grad: (&mut it).take(rank).collect(),
                    })
                    .collect();
                let batch = GradientBatch { user, round, items };
                let bytes = encode_batch(&batch).unwrap();
                prop_assert_eq!(decode_batch(&bytes).unwrap(), batch);
            }
        }
    }
}
