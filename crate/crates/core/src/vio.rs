//! Request/response queues of the inference engine. Flow identifiers wait in
//! their own FIFO while the features are inferred; responses are formed by
//! pairing the heads of the identifier and output FIFOs.

use std::collections::VecDeque;

use crate::buffer::WireFeature;
use crate::trace::{ClassId, FiveTuple};

pub const DEFAULT_DEPTH: usize = 64;

#[derive(Debug, Clone)]
pub struct IoState<R> {
    flow_ids: VecDeque<FiveTuple>,
    inputs: VecDeque<Vec<WireFeature>>,
    outputs: VecDeque<R>,
    in_flight: usize,
    depth: usize,
    drop_count: u64,
}

impl<R> IoState<R> {
    /// # Panics
    /// If `depth` is 0.
    pub fn new(depth: usize) -> Self {
        assert!(depth > 0, "queue depth must be positive");
        Self {
            flow_ids: VecDeque::with_capacity(depth),
            inputs: VecDeque::with_capacity(depth),
            outputs: VecDeque::with_capacity(depth),
            in_flight: 0,
            depth,
            drop_count: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn drop_count(&self) -> u64 {
        self.drop_count
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    pub fn pending_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn pending_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn pending_ids(&self) -> usize {
        self.flow_ids.len()
    }

    /// Identifier count equals queued inputs + in-flight + queued outputs.
    pub fn is_conserved(&self) -> bool {
        self.flow_ids.len() == self.inputs.len() + self.in_flight + self.outputs.len()
    }

    /// Pushes the identifier and features together, or drops the whole
    /// request if either queue is full.
    pub fn enqueue_request(&mut self, five_tuple: FiveTuple, features: Vec<WireFeature>) -> bool {
        if self.flow_ids.len() >= self.depth || self.inputs.len() >= self.depth {
            self.drop_count += 1;
            return false;
        }
        self.flow_ids.push_back(five_tuple);
        self.inputs.push_back(features);
        true
    }

    /// Hands the oldest queued input to the engine.
    pub fn start_inference(&mut self) -> Option<Vec<WireFeature>> {
        let x = self.inputs.pop_front()?;
        self.in_flight += 1;
        Some(x)
    }

    /// # Panics
    /// If no inference is in flight.
    pub fn complete_inference(&mut self, result: R) {
        assert!(self.in_flight > 0, "completion without an inference in flight");
        self.in_flight -= 1;
        self.outputs.push_back(result);
    }

    /// Pairs the head identifier with the head result.
    pub fn emit_response(&mut self) -> Option<(FiveTuple, R)> {
        if self.outputs.is_empty() {
            return None;
        }
        let id = self.flow_ids.pop_front()?;
        let r = self.outputs.pop_front()?;
        Some((id, r))
    }
}

pub type ClassIo = IoState<ClassId>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::synthetic_tuple;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn req(i: u32) -> (FiveTuple, Vec<WireFeature>) {
        (synthetic_tuple(i), vec![WireFeature { len: i as u16 + 1, ipd_bucket: 0 }])
    }

    #[test]
    fn empty_queues_accept() {
        let mut io = ClassIo::new(4);
        let (t, f) = req(0);
        assert!(io.enqueue_request(t, f));
        assert!(io.is_conserved());
        assert_eq!(io.emit_response(), None);
    }

    #[test]
    fn full_input_rejects_atomically() {
        let mut io = ClassIo::new(1);
        let (a, fa) = req(0);
        let (b, fb) = req(1);
        assert!(io.enqueue_request(a, fa));
        assert!(!io.enqueue_request(b, fb));
        assert_eq!(io.pending_ids(), 1);
        assert_eq!(io.drop_count(), 1);
        assert!(io.is_conserved());
    }

    #[test]
    fn id_queue_full_while_outputs_wait() {
        // inputs drained but identifiers still wait for emission
        let mut io = ClassIo::new(1);
        let (a, fa) = req(0);
        assert!(io.enqueue_request(a, fa));
        io.start_inference().unwrap();
        let (b, fb) = req(1);
        assert!(!io.enqueue_request(b, fb));
        assert_eq!(io.pending_inputs(), 0);
        assert!(io.is_conserved());
    }

    #[test]
    fn pairs_in_order() {
        let mut io = ClassIo::new(4);
        for i in 0..2 {
            let (t, f) = req(i);
            io.enqueue_request(t, f);
        }
        io.start_inference();
        io.start_inference();
        assert_eq!(io.start_inference(), None);
        io.complete_inference(10);
        io.complete_inference(20);
        assert_eq!(io.emit_response(), Some((synthetic_tuple(0), 10)));
        assert_eq!(io.emit_response(), Some((synthetic_tuple(1), 20)));
        assert_eq!(io.emit_response(), None);
        assert!(io.is_conserved());
    }

    #[test]
    fn random_interleavings_match_shadow_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut io: IoState<u32> = IoState::new(3);
        let mut accepted = VecDeque::new();
        let mut started = VecDeque::new();
        let mut next = 0u32;
        for _ in 0..20_000 {
            match rng.random_range(0..4) {
                0 => {
                    let (t, f) = req(next);
                    if io.enqueue_request(t, f) {
                        accepted.push_back(next);
                    }
                    next += 1;
                }
                1 => {
                    if let Some(f) = io.start_inference() {
                        started.push_back(f[0].len as u32 - 1);
                    }
                }
                2 => {
                    if let Some(i) = started.pop_front() {
                        io.complete_inference(i);
                    }
                }
                _ => {
                    if let Some((t, r)) = io.emit_response() {
                        let want = accepted.pop_front().unwrap();
                        assert_eq!(t, synthetic_tuple(want));
                        assert_eq!(r, want);
                    }
                }
            }
            assert!(io.is_conserved());
        }
    }
}
