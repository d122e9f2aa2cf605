//! Hand-built models for the synthetic length-band task: class `k` draws
//! packet lengths from band `k`. The length embedding is a one-hot indicator
//! of the band a length bucket falls in, so both models count band
//! occurrences over the sequence and pick the most frequent band.

use crate::flow::{Child, DecisionTree, TreeFeature, TreeNode};
use crate::quant::{FloatLayer, FloatModel, InputEncoding, LayerShape};
use crate::trace::{ClassId, LengthBand};

/// Ring of 8 plus the current packet.
pub const SEQ_LEN: u16 = 9;

/// Four well-separated bands, no two sharing a 64-byte bucket.
pub fn default_bands() -> Vec<LengthBand> {
    vec![
        LengthBand { min: 40, max: 200 },
        LengthBand { min: 300, max: 600 },
        LengthBand { min: 700, max: 1000 },
        LengthBand { min: 1100, max: 1500 },
    ]
}

pub fn encoding() -> InputEncoding {
    InputEncoding { seq_len: SEQ_LEN, len_bucket: 64, len_vocab: 32, ipd_vocab: 16, ipd_min_log2: 8 }
}

/// Band whose range overlaps bucket `[lo, hi]` the most, else the nearest one.
fn band_of_bucket(bands: &[LengthBand], lo: u32, hi: u32) -> usize {
    let overlap = |b: &LengthBand| (hi.min(b.max as u32) + 1).saturating_sub(lo.max(b.min as u32));
    let dist = |b: &LengthBand| {
        let c = (b.min as u32 + b.max as u32) / 2;
        c.abs_diff((lo + hi) / 2)
    };
    let best = bands.iter().map(overlap).max().unwrap_or(0);
    if best > 0 {
        bands.iter().position(|b| overlap(b) == best).unwrap()
    } else {
        (0..bands.len()).min_by_key(|&k| dist(&bands[k])).unwrap_or(0)
    }
}

/// Length table with one-hot band rows and a zero PAD row; delay table of
/// zeros (one column).
fn band_embedding(bands: &[LengthBand], enc: &InputEncoding) -> Vec<f64> {
    let k = bands.len();
    let mut w = vec![0.0; enc.len_vocab as usize * k];
    for idx in 1..enc.len_vocab as u32 {
        let lo = (idx - 1) * enc.len_bucket as u32;
        let hi = if idx == enc.len_vocab as u32 - 1 { u16::MAX as u32 } else { lo + enc.len_bucket as u32 - 1 };
        w[idx as usize * k + band_of_bucket(bands, lo, hi)] = 1.0;
    }
    w.extend(std::iter::repeat_n(0.0, enc.ipd_vocab as usize));
    w
}

fn embedding_layer(bands: &[LengthBand], enc: &InputEncoding) -> FloatLayer {
    FloatLayer {
        shape: LayerShape::Embedding { len_dim: bands.len() as u16, ipd_dim: 1 },
        relu: false,
        weights: band_embedding(bands, enc),
        bias: vec![],
    }
}

/// Conv weights `[out][k][in]` summing input channel `c` into output `c`
/// over the whole window.
fn window_sum(out_ch: usize, in_ch: usize, kernel: usize, pass: usize) -> Vec<f64> {
    let mut w = vec![0.0; out_ch * kernel * in_ch];
    for c in 0..pass {
        for k in 0..kernel {
            w[(c * kernel + k) * in_ch + c] = 1.0;
        }
    }
    w
}

/// Embedding, two width-3 convolutions of 8 filters, and a linear readout.
/// The first `num_classes` filters carry band counts; the rest are zero.
pub fn reference_cnn(bands: &[LengthBand]) -> FloatModel {
    let enc = encoding();
    let k = bands.len();
    let width = 8.max(k);
    let emb_dim = k + 1;
    let len1 = SEQ_LEN as usize - 2;
    let len2 = len1 - 2;
    let mut fc = vec![0.0; k * len2 * width];
    for c in 0..k {
        for t in 0..len2 {
            fc[c * len2 * width + t * width + c] = 1.0;
        }
    }
    FloatModel {
        input: enc,
        layers: vec![
            embedding_layer(bands, &enc),
            FloatLayer {
                shape: LayerShape::Conv1d { in_ch: emb_dim as u16, out_ch: width as u16, kernel: 3 },
                relu: true,
                weights: window_sum(width, emb_dim, 3, k),
                bias: vec![0.0; width],
            },
            FloatLayer {
                shape: LayerShape::Conv1d { in_ch: width as u16, out_ch: width as u16, kernel: 3 },
                relu: true,
                weights: window_sum(width, width, 3, k),
                bias: vec![0.0; width],
            },
            FloatLayer {
                shape: LayerShape::Fc { in_dim: (len2 * width) as u16, out_dim: k as u16 },
                relu: false,
                weights: fc,
                bias: vec![0.0; k],
            },
        ],
    }
}

/// Embedding, an identity-recurrent ReLU cell that counts bands, and an
/// identity readout.
pub fn reference_rnn(bands: &[LengthBand]) -> FloatModel {
    let enc = encoding();
    let k = bands.len();
    let emb_dim = k + 1;
    let mut w = vec![0.0; k * emb_dim + k * k];
    for c in 0..k {
        w[c * emb_dim + c] = 1.0;
        w[k * emb_dim + c * k + c] = 1.0;
    }
    let mut readout = vec![0.0; k * k];
    for c in 0..k {
        readout[c * k + c] = 1.0;
    }
    FloatModel {
        input: enc,
        layers: vec![
            embedding_layer(bands, &enc),
            FloatLayer { shape: LayerShape::Rnn { in_dim: emb_dim as u16, hidden: k as u16 }, relu: true, weights: w, bias: vec![0.0; k] },
            FloatLayer { shape: LayerShape::Fc { in_dim: k as u16, out_dim: k as u16 }, relu: false, weights: readout, bias: vec![0.0; k] },
        ],
    }
}

/// Single-band sequences of every length plus all-PAD, enough to observe
/// the largest activations of the reference models.
pub fn calibration_set(bands: &[LengthBand]) -> Vec<Vec<crate::buffer::WireFeature>> {
    let mut out = vec![vec![]];
    for b in bands {
        for n in 1..=SEQ_LEN as usize {
            out.push(vec![crate::buffer::WireFeature { len: b.min, ipd_bucket: 10 }; n]);
        }
    }
    out
}

/// Threshold tree on packet length splitting halfway between adjacent
/// bands. Bands must be sorted and disjoint.
pub fn band_tree(bands: &[LengthBand]) -> DecisionTree {
    fn build(t: &mut DecisionTree, bands: &[LengthBand], first: usize) -> Child {
        if bands.len() == 1 {
            t.leaves.push(first as ClassId);
            return Child::Leaf(t.leaves.len() - 1);
        }
        let mid = bands.len() / 2;
        let threshold = (bands[mid - 1].max as u64 + bands[mid].min as u64) / 2;
        let idx = t.nodes.len();
        t.nodes.push(TreeNode { feature: TreeFeature::PktLen, threshold, left: Child::Leaf(0), right: Child::Leaf(0) });
        let left = build(t, &bands[..mid], first);
        let right = build(t, &bands[mid..], first + mid);
        t.nodes[idx].left = left;
        t.nodes[idx].right = right;
        Child::Node(idx)
    }
    if bands.is_empty() {
        return DecisionTree::constant(0);
    }
    let mut t = DecisionTree { nodes: vec![], leaves: vec![], root: Child::Leaf(0), max_depth: 32 };
    t.root = build(&mut t, bands, 0);
    t
}
