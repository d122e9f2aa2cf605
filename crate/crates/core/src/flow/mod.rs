//! Per-flow switch state: the flow info table, new-flow counting per timing
//! window, the wrap-around buffer index and stored inference results.

mod tree;

pub use tree::{Child, DecisionTree, TreeError, TreeFeature, TreeNode};

use crate::trace::{ClassId, FiveTuple};

/// One occupied slot of the flow table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowEntry {
    /// Full 32-bit flow hash; the slot index is its low bits.
    pub hash: u32,
    /// Packets since the last feature transmission (`C_i`).
    pub bklog_n: u32,
    /// Time of the last feature transmission, or of flow start before the
    /// first one (`T_i = now - bklog_t`).
    pub bklog_t: u64,
    pub class: Option<ClassId>,
    /// Ring position of the newest stored feature, `1..=ring_size`; 0 until
    /// the first packet is recorded.
    pub buff_idx: u16,
    pub pkt_cnt: u64,
    /// Timestamp of the flow's most recent packet.
    pub last_ts: u64,
}

impl FlowEntry {
    pub fn new(hash: u32, now_ns: u64) -> Self {
        Self { hash, bklog_n: 0, bklog_t: now_ns, class: None, buff_idx: 0, pkt_cnt: 0, last_ts: now_ns }
    }

    /// Counts one packet and advances the ring index, wrapping to 1 after
    /// `ring_size` without a modulo.
    pub fn record_packet(&mut self, ring_size: u16) {
        self.pkt_cnt += 1;
        self.bklog_n = self.bklog_n.saturating_add(1);
        self.buff_idx = if self.buff_idx >= ring_size { 1 } else { self.buff_idx + 1 };
    }

    pub fn on_feature_sent(&mut self, now_ns: u64) {
        self.bklog_n = 0;
        self.bklog_t = now_ns;
    }

    /// Time since the last transmission, in nanoseconds.
    pub fn backlog_age_ns(&self, now_ns: u64) -> u64 {
        now_ns.saturating_sub(self.bklog_t)
    }
}

/// Result of [`FlowTable::lookup_or_insert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lookup {
    pub slot: usize,
    pub is_new: bool,
    pub collided: bool,
}

/// Statistics of a closed timing window.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WindowStats {
    pub start_ns: u64,
    /// Flows counted in the window (`N`).
    pub flows: u64,
    /// Aggregate packet rate in packets per second (`Q`).
    pub pkt_rate: f64,
}

/// Fixed-capacity single-slot hash table with `2^bits` entries.
#[derive(Debug, Clone)]
pub struct FlowTable {
    bits: u32,
    slots: Vec<Option<FlowEntry>>,
    seen: Vec<bool>,
    window_ns: u64,
    window_start_ns: u64,
    window_new_flow_count: u64,
    window_pkt_count: u64,
}

impl FlowTable {
    pub const DEFAULT_BITS: u32 = 16;

    /// # Panics
    /// If `bits` is 0 or above 28, or `window_ns` is 0.
    pub fn new(bits: u32, window_ns: u64) -> Self {
        assert!((1..=28).contains(&bits), "table width out of range: {bits}");
        assert!(window_ns > 0, "timing window must be positive");
        let n = 1usize << bits;
        Self {
            bits,
            slots: vec![None; n],
            seen: vec![false; n],
            window_ns,
            window_start_ns: 0,
            window_new_flow_count: 0,
            window_pkt_count: 0,
        }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn window_ns(&self) -> u64 {
        self.window_ns
    }

    pub fn window_start_ns(&self) -> u64 {
        self.window_start_ns
    }

    pub fn window_new_flow_count(&self) -> u64 {
        self.window_new_flow_count
    }

    pub fn window_pkt_count(&self) -> u64 {
        self.window_pkt_count
    }

    pub fn slot_of(&self, hash: u32) -> usize {
        (hash & ((1u32 << self.bits) - 1)) as usize
    }

    /// Finds the entry for `ft`, creating it if the slot is empty or held by
    /// another flow (evict-and-replace). Each call accounts one packet to the
    /// current window.
    pub fn lookup_or_insert(&mut self, ft: &FiveTuple, now_ns: u64) -> Lookup {
        let hash = ft.hash32();
        let slot = self.slot_of(hash);
        let (is_new, collided) = match &self.slots[slot] {
            None => (true, false),
            Some(e) if e.hash != hash => (true, true),
            Some(_) => (false, false),
        };
        if is_new {
            self.slots[slot] = Some(FlowEntry::new(hash, now_ns));
        }
        if is_new || !self.seen[slot] {
            self.seen[slot] = true;
            self.window_new_flow_count += 1;
        }
        self.window_pkt_count += 1;
        Lookup { slot, is_new, collided }
    }

    pub fn entry(&self, slot: usize) -> Option<&FlowEntry> {
        self.slots.get(slot).and_then(Option::as_ref)
    }

    pub fn entry_mut(&mut self, slot: usize) -> Option<&mut FlowEntry> {
        self.slots.get_mut(slot).and_then(Option::as_mut)
    }

    /// Entry currently holding `ft`, if it has not been evicted.
    pub fn get(&self, ft: &FiveTuple) -> Option<&FlowEntry> {
        let hash = ft.hash32();
        self.entry(self.slot_of(hash)).filter(|e| e.hash == hash)
    }

    /// Stores a returned inference result. Returns `false` (and changes
    /// nothing) when the flow no longer owns its slot.
    pub fn apply_inference_result(&mut self, ft: &FiveTuple, class: ClassId) -> bool {
        let hash = ft.hash32();
        let slot = self.slot_of(hash);
        match self.slots[slot].as_mut() {
            Some(e) if e.hash == hash => {
                e.class = Some(class);
                true
            }
            _ => false,
        }
    }

    /// Whether the window containing `now_ns` has moved past the current one.
    pub fn window_elapsed(&self, now_ns: u64) -> bool {
        now_ns >= self.window_start_ns + self.window_ns
    }

    /// Closes the current window and resets the per-window counters and
    /// new-flow markers. The next window starts `window_ns` after this one.
    pub fn end_window(&mut self, now_ns: u64) -> WindowStats {
        debug_assert!(self.window_elapsed(now_ns));
        let stats = WindowStats {
            start_ns: self.window_start_ns,
            flows: self.window_new_flow_count,
            pkt_rate: self.window_pkt_count as f64 * 1e9 / self.window_ns as f64,
        };
        self.window_new_flow_count = 0;
        self.window_pkt_count = 0;
        self.seen.iter_mut().for_each(|s| *s = false);
        self.window_start_ns += self.window_ns;
        stats
    }

    /// Moves the current window to start at `start_ns`. Only meaningful
    /// while the window is empty, e.g. before the first packet or after an
    /// idle gap.
    pub fn restart_window(&mut self, start_ns: u64) {
        debug_assert_eq!(self.window_pkt_count, 0);
        self.window_start_ns = start_ns;
    }

    /// Occupied slots, in slot order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &FlowEntry)> {
        self.slots.iter().enumerate().filter_map(|(i, e)| e.as_ref().map(|e| (i, e)))
    }
}
