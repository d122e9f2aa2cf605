//! Per-flow feature rings and mirrored-packet assembly.
//!
//! Features are stored in their wire encoding: the raw length and a log2
//! bucket of the inter-packet delay. A mirrored packet on the wire is
//!
//! ```text
//! five_tuple (13 B, LE) | count (1 B) | count × { len: u16 LE, ipd_bucket: u16 LE }
//! ```
//!
//! so a message with `count` features is `8 × (14 + 4 × count)` bits.

use thiserror::Error;

use crate::trace::{FeatureVector, FiveTuple};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BufferError {
    #[error("buffer index {idx} outside 1..={ring_size}")]
    Index { idx: u16, ring_size: u16 },
    #[error("mirror packet truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("mirror packet carries no features")]
    Empty,
    #[error("{0} trailing bytes after mirror packet")]
    Trailing(usize),
    #[error("too many features for one message: {0}")]
    TooLong(usize),
}

/// `0` for a zero delay, otherwise `floor(log2(ipd_ns)) + 1` (at most 64).
pub fn ipd_bucket(ipd_ns: u64) -> u16 {
    (u64::BITS - ipd_ns.leading_zeros()) as u16
}

/// Fixed-width feature as stored in switch registers and sent on the wire.
/// `len == 0` marks padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, serde::Serialize, serde::Deserialize)]
pub struct WireFeature {
    pub len: u16,
    pub ipd_bucket: u16,
}

impl WireFeature {
    pub const PAD: WireFeature = WireFeature { len: 0, ipd_bucket: 0 };

    pub fn is_pad(&self) -> bool {
        self.len == 0
    }
}

impl From<&FeatureVector> for WireFeature {
    fn from(fv: &FeatureVector) -> Self {
        Self { len: fv.pkt_len, ipd_bucket: ipd_bucket(fv.ipd_ns) }
    }
}

impl From<FeatureVector> for WireFeature {
    fn from(fv: FeatureVector) -> Self {
        (&fv).into()
    }
}

/// Width in bits of a mirror message carrying `count` features.
pub fn message_bits(count: usize) -> u64 {
    8 * (14 + 4 * count as u64)
}

/// Ring of the most recent features of one flow. The write position is
/// the owning flow's `buff_idx`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowRing {
    slots: Vec<WireFeature>,
    filled: u16,
}

impl FlowRing {
    /// # Panics
    /// If `ring_size` is 0.
    pub fn new(ring_size: u16) -> Self {
        assert!(ring_size > 0, "ring size must be positive");
        Self { slots: vec![WireFeature::PAD; ring_size as usize], filled: 0 }
    }

    pub fn ring_size(&self) -> u16 {
        self.slots.len() as u16
    }

    pub fn filled(&self) -> u16 {
        self.filled
    }

    pub fn clear(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = WireFeature::PAD);
        self.filled = 0;
    }

    /// Writes `fv` at the 1-based position `buff_idx`, overwriting what was there.
    pub fn push_feature(&mut self, buff_idx: u16, fv: WireFeature) -> Result<(), BufferError> {
        let ring_size = self.ring_size();
        if buff_idx == 0 || buff_idx > ring_size {
            return Err(BufferError::Index { idx: buff_idx, ring_size });
        }
        self.slots[buff_idx as usize - 1] = fv;
        self.filled = (self.filled + 1).min(ring_size);
        Ok(())
    }

    /// Stored features oldest to newest, where `buff_idx` points at the newest.
    pub fn ordered(&self, buff_idx: u16) -> Result<Vec<WireFeature>, BufferError> {
        let n = self.slots.len();
        if self.filled == 0 {
            return Ok(Vec::new());
        }
        if buff_idx == 0 || buff_idx as usize > n {
            return Err(BufferError::Index { idx: buff_idx, ring_size: n as u16 });
        }
        let newest = buff_idx as usize - 1;
        let filled = self.filled as usize;
        // oldest surviving entry sits `filled - 1` slots behind the newest
        let oldest = (newest + n + 1 - filled) % n;
        Ok((0..filled).map(|k| self.slots[(oldest + k) % n]).collect())
    }

    /// Mirror packet for the current packet: ring contents in arrival order
    /// followed by `current`, which has not been pushed yet.
    pub fn assemble_mirror(
        &self,
        buff_idx: u16,
        current: WireFeature,
        five_tuple: FiveTuple,
        now_ns: u64,
    ) -> Result<MirrorPacket, BufferError> {
        let mut features = self.ordered(buff_idx)?;
        features.push(current);
        Ok(MirrorPacket { five_tuple, features, emit_ts_ns: now_ns })
    }
}

/// Flow identity plus its ordered feature sequence, sent to the inference engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MirrorPacket {
    pub five_tuple: FiveTuple,
    pub features: Vec<WireFeature>,
    /// Simulation time the packet left the switch; not part of the wire format.
    pub emit_ts_ns: u64,
}

impl MirrorPacket {
    pub fn wire_bits(&self) -> u64 {
        message_bits(self.features.len())
    }

    pub fn encode(&self) -> Result<Vec<u8>, BufferError> {
        let count = self.features.len();
        if count == 0 {
            return Err(BufferError::Empty);
        }
        if count > u8::MAX as usize {
            return Err(BufferError::TooLong(count));
        }
        let mut out = Vec::with_capacity(14 + 4 * count);
        out.extend_from_slice(&self.five_tuple.to_bytes());
        out.push(count as u8);
        for f in &self.features {
            out.extend_from_slice(&f.len.to_le_bytes());
            out.extend_from_slice(&f.ipd_bucket.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], emit_ts_ns: u64) -> Result<Self, BufferError> {
        if bytes.len() < 14 {
            return Err(BufferError::Truncated { need: 14, have: bytes.len() });
        }
        let mut ft = [0u8; FiveTuple::WIRE_LEN];
        ft.copy_from_slice(&bytes[..FiveTuple::WIRE_LEN]);
        let count = bytes[13] as usize;
        if count == 0 {
            return Err(BufferError::Empty);
        }
        let need = 14 + 4 * count;
        if bytes.len() < need {
            return Err(BufferError::Truncated { need, have: bytes.len() });
        }
        if bytes.len() > need {
            return Err(BufferError::Trailing(bytes.len() - need));
        }
        let features = bytes[14..]
            .chunks_exact(4)
            .map(|c| WireFeature { len: u16::from_le_bytes([c[0], c[1]]), ipd_bucket: u16::from_le_bytes([c[2], c[3]]) })
            .collect();
        Ok(Self { five_tuple: FiveTuple::from_bytes(&ft), features, emit_ts_ns })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowEntry;
    use crate::trace::synthetic_tuple;
    use proptest::prelude::*;

    fn f(k: u16) -> WireFeature {
        WireFeature { len: k, ipd_bucket: k % 7 }
    }

    #[test]
    fn bucket_of_delay() {
        assert_eq!(ipd_bucket(0), 0);
        assert_eq!(ipd_bucket(1), 1);
        assert_eq!(ipd_bucket(1023), 10);
        assert_eq!(ipd_bucket(1024), 11);
        assert_eq!(ipd_bucket(u64::MAX), 64);
    }

    #[test]
    fn first_write_fills_one() {
        let mut r = FlowRing::new(8);
        r.push_feature(1, f(1)).unwrap();
        assert_eq!(r.filled(), 1);
        assert!(matches!(r.push_feature(0, f(1)), Err(BufferError::Index { .. })));
        assert!(matches!(r.push_feature(9, f(1)), Err(BufferError::Index { .. })));
    }

    #[test]
    fn ninth_write_overwrites_oldest() {
        let mut r = FlowRing::new(8);
        for k in 1..=8 {
            r.push_feature(k, f(k)).unwrap();
        }
        r.push_feature(1, f(9)).unwrap();
        assert_eq!(r.filled(), 8);
        assert_eq!(r.ordered(1).unwrap(), (2..=9).map(f).collect::<Vec<_>>());
    }

    #[test]
    fn same_index_twice_second_wins() {
        let mut r = FlowRing::new(4);
        r.push_feature(2, f(1)).unwrap();
        r.push_feature(2, f(2)).unwrap();
        assert_eq!(r.ordered(2).unwrap().last(), Some(&f(2)));
    }

    #[test]
    fn mirror_of_first_packet_is_current_only() {
        let r = FlowRing::new(8);
        let m = r.assemble_mirror(0, f(5), synthetic_tuple(1), 10).unwrap();
        assert_eq!(m.features, vec![f(5)]);
    }

    #[test]
    fn full_ring_mirror_in_arrival_order() {
        let mut r = FlowRing::new(8);
        for k in 1..=8 {
            r.push_feature(k, f(k)).unwrap();
        }
        let m = r.assemble_mirror(8, f(9), synthetic_tuple(1), 10).unwrap();
        assert_eq!(m.features, (1..=9).map(f).collect::<Vec<_>>());
    }

    /// Replays packets through the flow entry and ring like the switch does,
    /// comparing against an unbounded shadow list.
    fn replay(ring_size: u16, n: usize) -> Result<(), TestCaseError> {
        let mut entry = FlowEntry::new(0, 0);
        let mut ring = FlowRing::new(ring_size);
        let mut shadow: Vec<WireFeature> = Vec::new();
        for k in 0..n {
            let cur = f(k as u16 + 1);
            let m = ring.assemble_mirror(entry.buff_idx, cur, synthetic_tuple(0), 0).unwrap();
            let keep = shadow.len().min(ring_size as usize);
            let mut expect = shadow[shadow.len() - keep..].to_vec();
            expect.push(cur);
            prop_assert_eq!(m.features, expect);
            entry.record_packet(ring_size);
            ring.push_feature(entry.buff_idx, cur).unwrap();
            shadow.push(cur);
            prop_assert_eq!(ring.filled() as u64, entry.pkt_cnt.min(ring_size as u64));
        }
        Ok(())
    }

    #[test]
    fn partial_ring_matches_arrival_order() {
        // three packets into a ring of eight, fourth assembles four features
        let mut entry = FlowEntry::new(0, 0);
        let mut ring = FlowRing::new(8);
        for k in 1..=3 {
            entry.record_packet(8);
            ring.push_feature(entry.buff_idx, f(k)).unwrap();
        }
        let m = ring.assemble_mirror(entry.buff_idx, f(4), synthetic_tuple(0), 0).unwrap();
        assert_eq!(m.features, vec![f(1), f(2), f(3), f(4)]);
    }

    proptest! {
        #[test]
        fn mirror_matches_shadow_list(ring_size in 1u16..16, n in 1usize..80) {
            replay(ring_size, n)?;
        }

        #[test]
        fn wire_round_trip(ft in any::<(u32, u32, u16, u16, u8)>(),
                           feats in proptest::collection::vec(any::<(u16, u16)>(), 1..=255)) {
            let m = MirrorPacket {
                five_tuple: FiveTuple { src_ip: ft.0, dst_ip: ft.1, src_port: ft.2, dst_port: ft.3, proto: ft.4 },
                features: feats.iter().map(|&(len, ipd_bucket)| WireFeature { len, ipd_bucket }).collect(),
                emit_ts_ns: 42,
            };
            let bytes = m.encode().unwrap();
            prop_assert_eq!(bytes.len() as u64 * 8, m.wire_bits());
            prop_assert_eq!(MirrorPacket::decode(&bytes, 42).unwrap(), m);
        }
    }

    #[test]
    fn decode_rejects_bad_lengths() {
        let m = MirrorPacket { five_tuple: synthetic_tuple(3), features: vec![f(1), f(2)], emit_ts_ns: 0 };
        let bytes = m.encode().unwrap();
        assert!(matches!(MirrorPacket::decode(&bytes[..bytes.len() - 1], 0), Err(BufferError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(MirrorPacket::decode(&long, 0), Err(BufferError::Trailing(1)));
        assert_eq!(message_bits(9), 400);
    }
}
