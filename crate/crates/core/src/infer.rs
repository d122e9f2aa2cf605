//! Integer-only forward passes over quantized sequence models, a real-valued
//! reference path, and a systolic-array latency estimate.
//!
//! Every layer accumulates in int32 in ascending input order, then
//! requantizes by an arithmetic shift with round-half-away-from-zero,
//! optional ReLU and saturation to int8. The final fully connected layer is
//! not requantized: its accumulators are the logits.

use thiserror::Error;

use crate::buffer::WireFeature;
use crate::quant::{FloatLayer, FloatModel, InputEncoding, LayerShape, ModelError, QLayer, QuantizedModel};
use crate::trace::ClassId;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("embedding index {idx} outside vocabulary of {vocab}")]
    Index { idx: u16, vocab: u16 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("sequence of length {len} shorter than kernel {kernel}")]
    TooShort { len: usize, kernel: usize },
    #[error("layer kind mismatch: {0}")]
    Kind(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Embedding indices of one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EncodedInput {
    pub len_idx: u16,
    pub ipd_idx: u16,
}

/// Final-layer int32 accumulators; `values[k] / 2^frac_bits` is the real logit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Logits {
    pub values: Vec<i32>,
    pub frac_bits: u8,
}

pub fn encode_input(f: WireFeature, enc: &InputEncoding) -> EncodedInput {
    if f.is_pad() {
        return EncodedInput::default();
    }
    let len_idx = 1 + (f.len / enc.len_bucket).min(enc.len_vocab - 2);
    let ipd_idx = 1 + f.ipd_bucket.saturating_sub(enc.ipd_min_log2).min(enc.ipd_vocab - 2);
    EncodedInput { len_idx, ipd_idx }
}

/// Fits `features` (oldest first) to the model's sequence length: keeps the
/// newest entries and left-pads with PAD.
pub fn encode_sequence(features: &[WireFeature], enc: &InputEncoding) -> Vec<EncodedInput> {
    let n = enc.seq_len as usize;
    let tail = &features[features.len().saturating_sub(n)..];
    let mut out = vec![EncodedInput::default(); n - tail.len()];
    out.extend(tail.iter().map(|&f| encode_input(f, enc)));
    out
}

/// Row `idx` of a row-major table with rows of width `dim`.
pub fn embedding_lookup<T>(table: &[T], dim: usize, idx: u16) -> Result<&[T], InferError> {
    let vocab = table.len().checked_div(dim).unwrap_or(0);
    if dim > 0 && idx as usize >= vocab {
        return Err(InferError::Index { idx, vocab: vocab as u16 });
    }
    Ok(&table[idx as usize * dim..(idx as usize + 1) * dim])
}

/// `acc / 2^shift` rounded half away from zero; negative `shift` scales up.
pub fn shift_round(acc: i64, shift: i32) -> i64 {
    if shift <= 0 {
        return acc << (-shift);
    }
    let half = 1i64 << (shift - 1);
    if acc >= 0 {
        (acc + half) >> shift
    } else {
        -((-acc + half) >> shift)
    }
}

pub fn requantize(acc: i32, shift: i32, relu: bool) -> i8 {
    let mut v = shift_round(acc as i64, shift);
    if relu {
        v = v.max(0);
    }
    v.clamp(i8::MIN as i64, i8::MAX as i64) as i8
}

fn dot(w: &[i8], x: &[i8]) -> i32 {
    w.iter().zip(x).fold(0i32, |acc, (&w, &x)| acc + w as i32 * x as i32)
}

fn embedding_tables<'a, T>(l_weights: &'a [T], shape: LayerShape, enc: &InputEncoding) -> (&'a [T], &'a [T], usize, usize) {
    let LayerShape::Embedding { len_dim, ipd_dim } = shape else { unreachable!("not an embedding") };
    let (lt, it) = l_weights.split_at(enc.len_vocab as usize * len_dim as usize);
    (lt, it, len_dim as usize, ipd_dim as usize)
}

/// Concatenated length and delay embeddings for each position.
fn embed<T: Copy>(weights: &[T], shape: LayerShape, enc: &InputEncoding, xs: &[EncodedInput]) -> Result<Vec<Vec<T>>, InferError> {
    let (lt, it, ld, id) = embedding_tables(weights, shape, enc);
    xs.iter()
        .map(|e| {
            let mut row = embedding_lookup(lt, ld, e.len_idx)?.to_vec();
            row.extend_from_slice(embedding_lookup(it, id, e.ipd_idx)?);
            Ok(row)
        })
        .collect()
}

/// Raw int32 accumulators `W x + b` of a fully connected layer.
pub fn fc_accumulate(layer: &QLayer, x: &[i8]) -> Result<Vec<i32>, InferError> {
    let LayerShape::Fc { in_dim, .. } = layer.shape else {
        return Err(InferError::Kind(format!("fc_forward on {:?}", layer.shape)));
    };
    if x.len() != in_dim as usize {
        return Err(InferError::Dim { expected: in_dim as usize, got: x.len() });
    }
    Ok(layer.weights.chunks(in_dim as usize).zip(&layer.bias).map(|(row, &b)| dot(row, x) + b).collect())
}

pub fn fc_forward(layer: &QLayer, x: &[i8]) -> Result<Vec<i8>, InferError> {
    let shift = layer.acc_frac_bits() as i32 - layer.act_frac_bits as i32;
    Ok(fc_accumulate(layer, x)?.into_iter().map(|a| requantize(a, shift, layer.relu)).collect())
}

/// Valid-mode convolution along the sequence axis.
pub fn conv1d_forward(layer: &QLayer, x: &[Vec<i8>]) -> Result<Vec<Vec<i8>>, InferError> {
    let LayerShape::Conv1d { in_ch, kernel, .. } = layer.shape else {
        return Err(InferError::Kind(format!("conv1d_forward on {:?}", layer.shape)));
    };
    let (in_ch, kernel) = (in_ch as usize, kernel as usize);
    if x.len() < kernel {
        return Err(InferError::TooShort { len: x.len(), kernel });
    }
    if let Some(bad) = x.iter().find(|v| v.len() != in_ch) {
        return Err(InferError::Dim { expected: in_ch, got: bad.len() });
    }
    let shift = layer.acc_frac_bits() as i32 - layer.act_frac_bits as i32;
    Ok((0..=x.len() - kernel)
        .map(|t| {
            layer
                .weights
                .chunks(kernel * in_ch)
                .zip(&layer.bias)
                .map(|(filter, &b)| {
                    let acc = filter
                        .chunks(in_ch)
                        .zip(&x[t..t + kernel])
                        .fold(b, |acc, (w, xv)| acc + dot(w, xv));
                    requantize(acc, shift, layer.relu)
                })
                .collect()
        })
        .collect())
}

/// One Elman step `h' = act(W_x x + W_h h + b)`. The two products are
/// aligned to the common scale `w_f + max(x_f, h_f)` before summing.
pub fn rnn_step(layer: &QLayer, h: &[i8], x: &[i8]) -> Result<Vec<i8>, InferError> {
    let LayerShape::Rnn { in_dim, hidden } = layer.shape else {
        return Err(InferError::Kind(format!("rnn_step on {:?}", layer.shape)));
    };
    let (in_dim, hidden) = (in_dim as usize, hidden as usize);
    if x.len() != in_dim {
        return Err(InferError::Dim { expected: in_dim, got: x.len() });
    }
    if h.len() != hidden {
        return Err(InferError::Dim { expected: hidden, got: h.len() });
    }
    let s = layer.in_frac_bits.max(layer.act_frac_bits);
    let (sx, sh) = (s - layer.in_frac_bits, s - layer.act_frac_bits);
    let (wx, wh) = layer.weights.split_at(in_dim * hidden);
    let shift = layer.acc_frac_bits() as i32 - layer.act_frac_bits as i32;
    Ok(wx
        .chunks(in_dim)
        .zip(wh.chunks(hidden))
        .zip(&layer.bias)
        .map(|((rx, rh), &b)| requantize((dot(rx, x) << sx) + (dot(rh, h) << sh) + b, shift, layer.relu))
        .collect())
}

/// Runs the cell over `xs` from a zero state and returns the final state.
pub fn rnn_forward(layer: &QLayer, xs: &[Vec<i8>]) -> Result<Vec<i8>, InferError> {
    let LayerShape::Rnn { hidden, .. } = layer.shape else {
        return Err(InferError::Kind(format!("rnn_forward on {:?}", layer.shape)));
    };
    xs.iter().try_fold(vec![0i8; hidden as usize], |h, x| rnn_step(layer, &h, x))
}

enum Act<T> {
    Seq(Vec<Vec<T>>),
    Flat(Vec<T>),
}

impl<T: Copy> Act<T> {
    fn flatten(self) -> Vec<T> {
        match self {
            Act::Seq(s) => s.concat(),
            Act::Flat(v) => v,
        }
    }

    fn seq(self, what: &str) -> Result<Vec<Vec<T>>, InferError> {
        match self {
            Act::Seq(s) => Ok(s),
            Act::Flat(_) => Err(InferError::Kind(format!("{what} needs a sequence input"))),
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Integer inference on a feature sequence (oldest first).
pub fn infer(model: &QuantizedModel, features: &[WireFeature]) -> Result<(ClassId, Logits), InferError> {
    let xs = encode_sequence(features, &model.input);
    let (last, body) = model.layers.split_last().ok_or_else(|| InferError::Kind("empty model".into()))?;
    let mut act: Option<Act<i8>> = None;
    for l in body {
        act = Some(match (l.shape, act) {
            (LayerShape::Embedding { .. }, None) => Act::Seq(embed(&l.weights, l.shape, &model.input, &xs)?),
            (LayerShape::Fc { .. }, Some(a)) => Act::Flat(fc_forward(l, &a.flatten())?),
            (LayerShape::Conv1d { .. }, Some(a)) => Act::Seq(conv1d_forward(l, &a.seq("conv1d")?)?),
            (LayerShape::Rnn { .. }, Some(a)) => Act::Flat(rnn_forward(l, &a.seq("rnn")?)?),
            (s, _) => return Err(InferError::Kind(format!("unexpected layer {s:?}"))),
        });
    }
    let x = act.ok_or_else(|| InferError::Kind("model has no hidden layers".into()))?.flatten();
    let mut values = fc_accumulate(last, &x)?;
    if last.relu {
        values.iter_mut().for_each(|v| *v = (*v).max(0));
    }
    Ok((argmax(&values) as ClassId, Logits { values, frac_bits: last.acc_frac_bits() }))
}

fn fdot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(w, x)| w * x).sum()
}

fn frelu(v: f64, relu: bool) -> f64 {
    if relu {
        v.max(0.0)
    } else {
        v
    }
}

fn max_abs<'a>(vs: impl IntoIterator<Item = &'a f64>) -> f64 {
    vs.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Real-valued forward pass. Returns the logits and, per layer, the largest
/// absolute output (for the rnn, over every intermediate state).
fn float_forward(m: &FloatModel, features: &[WireFeature]) -> Result<(Vec<f64>, Vec<f64>), InferError> {
    m.validate()?;
    let xs = encode_sequence(features, &m.input);
    let mut act: Option<Act<f64>> = None;
    let mut maxes = Vec::with_capacity(m.layers.len());
    for l in &m.layers {
        let FloatLayer { shape, relu, weights, bias } = l;
        let relu = *relu;
        let next = match (*shape, act) {
            (LayerShape::Embedding { .. }, None) => Act::Seq(embed(weights, *shape, &m.input, &xs)?),
            (LayerShape::Fc { in_dim, .. }, Some(a)) => {
                let x = a.flatten();
                Act::Flat(weights.chunks(in_dim as usize).zip(bias).map(|(r, b)| frelu(fdot(r, &x) + b, relu)).collect())
            }
            (LayerShape::Conv1d { in_ch, kernel, .. }, Some(a)) => {
                let x = a.seq("conv1d")?;
                let (in_ch, kernel) = (in_ch as usize, kernel as usize);
                if x.len() < kernel {
                    return Err(InferError::TooShort { len: x.len(), kernel });
                }
                Act::Seq(
                    (0..=x.len() - kernel)
                        .map(|t| {
                            weights
                                .chunks(kernel * in_ch)
                                .zip(bias)
                                .map(|(f, b)| {
                                    let s: f64 = f.chunks(in_ch).zip(&x[t..t + kernel]).map(|(w, xv)| fdot(w, xv)).sum();
                                    frelu(s + b, relu)
                                })
                                .collect()
                        })
                        .collect(),
                )
            }
            (LayerShape::Rnn { in_dim, hidden }, Some(a)) => {
                let (in_dim, hidden) = (in_dim as usize, hidden as usize);
                let (wx, wh) = weights.split_at(in_dim * hidden);
                let mut h = vec![0.0; hidden];
                let mut m = 0.0f64;
                for x in a.seq("rnn")? {
                    h = wx
                        .chunks(in_dim)
                        .zip(wh.chunks(hidden))
                        .zip(bias)
                        .map(|((rx, rh), b)| frelu(fdot(rx, &x) + fdot(rh, &h) + b, relu))
                        .collect();
                    m = m.max(max_abs(&h));
                }
                maxes.push(m);
                act = Some(Act::Flat(h));
                continue;
            }
            (s, _) => return Err(InferError::Kind(format!("unexpected layer {s:?}"))),
        };
        maxes.push(match &next {
            Act::Seq(s) => max_abs(s.iter().flatten()),
            Act::Flat(v) => max_abs(v),
        });
        act = Some(next);
    }
    let logits = act.map(Act::flatten).unwrap_or_default();
    Ok((logits, maxes))
}

/// Per-layer max-abs activations, used to calibrate activation scales.
pub fn float_forward_trace(m: &FloatModel, features: &[WireFeature]) -> Result<Vec<f64>, ModelError> {
    float_forward(m, features).map(|(_, maxes)| maxes).map_err(|e| match e {
        InferError::Model(m) => m,
        other => ModelError::Input(other.to_string()),
    })
}

/// Same pipeline as [`infer`] in real arithmetic.
pub fn float_reference_infer(m: &FloatModel, features: &[WireFeature]) -> Result<(ClassId, Vec<f64>), InferError> {
    let (logits, _) = float_forward(m, features)?;
    Ok((argmax(&logits) as ClassId, logits))
}

/// Cycle estimate for a weight-stationary systolic array of
/// `array_width × array_width` INT8 MAC cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LatencyModel {
    pub array_width: u32,
    /// Fixed cycles for input parsing, embedding lookups, fill/drain and output.
    pub pipeline_cycles: u64,
}

impl Default for LatencyModel {
    /// Calibrated so the reference CNN takes 360 cycles (1.2 us at 300 MHz).
    fn default() -> Self {
        Self { array_width: 8, pipeline_cycles: 328 }
    }
}

impl LatencyModel {
    /// `sum ceil(batch * macs / width^2) + pipeline_cycles`.
    pub fn cycles(&self, layer_macs: &[u64], batch: u32) -> u64 {
        let cells = (self.array_width as u64).pow(2).max(1);
        layer_macs.iter().map(|&m| (m * batch.max(1) as u64).div_ceil(cells)).sum::<u64>() + self.pipeline_cycles
    }

    pub fn latency_ns_for_macs(&self, layer_macs: &[u64], f_hz: f64, batch: u32) -> f64 {
        self.cycles(layer_macs, batch) as f64 / f_hz * 1e9
    }

    pub fn latency_ns(&self, model: &QuantizedModel, f_hz: f64, batch: u32) -> f64 {
        self.latency_ns_for_macs(&model.layer_macs(), f_hz, batch)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::quant::quantize_model;
    use num_bigint::BigInt;
    use num_traits::{Signed, ToPrimitive, Zero};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn enc() -> InputEncoding {
        InputEncoding { seq_len: 4, len_bucket: 64, len_vocab: 32, ipd_vocab: 16, ipd_min_log2: 4 }
    }

    #[test]
    fn encode_examples() {
        let e = enc();
        assert_eq!(encode_input(WireFeature::PAD, &e), EncodedInput { len_idx: 0, ipd_idx: 0 });
        assert_eq!(encode_input(WireFeature { len: 64, ipd_bucket: 0 }, &e).len_idx, 2);
        assert_eq!(encode_input(WireFeature { len: 65535, ipd_bucket: 0 }, &e).len_idx, 31);
        assert_eq!(encode_input(WireFeature { len: 1, ipd_bucket: 3 }, &e).ipd_idx, 1);
        assert_eq!(encode_input(WireFeature { len: 1, ipd_bucket: 6 }, &e).ipd_idx, 3);
        assert_eq!(encode_input(WireFeature { len: 1, ipd_bucket: 64 }, &e).ipd_idx, 15);
    }

    #[test]
    fn sequence_pads_left_and_keeps_newest() {
        let e = enc();
        let f = |len| WireFeature { len, ipd_bucket: 0 };
        let s = encode_sequence(&[f(64)], &e);
        assert_eq!(s.iter().map(|x| x.len_idx).collect::<Vec<_>>(), vec![0, 0, 0, 2]);
        let s = encode_sequence(&[f(1), f(64), f(128), f(192), f(256)], &e);
        assert_eq!(s.iter().map(|x| x.len_idx).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
        assert_eq!(encode_sequence(&[], &e), vec![EncodedInput::default(); 4]);
    }

    #[test]
    fn lookup_rows() {
        let table: Vec<i8> = (0..12).collect();
        assert_eq!(embedding_lookup(&table, 3, 0).unwrap(), &[0, 1, 2]);
        assert_eq!(embedding_lookup(&table, 3, 2).unwrap(), &table[6..9]);
        assert_eq!(embedding_lookup(&table, 3, 2).unwrap(), embedding_lookup(&table, 3, 2).unwrap());
        assert!(matches!(embedding_lookup(&table, 3, 4), Err(InferError::Index { idx: 4, vocab: 4 })));
    }

    #[test]
    fn rounding_half_away_from_zero() {
        assert_eq!(shift_round(3, 1), 2);
        assert_eq!(shift_round(-3, 1), -2);
        assert_eq!(shift_round(5, 2), 1);
        assert_eq!(shift_round(6, 2), 2);
        assert_eq!(shift_round(-6, 2), -2);
        assert_eq!(shift_round(3, -2), 12);
        assert_eq!(requantize(1 << 20, 0, false), 127);
        assert_eq!(requantize(-(1 << 20), 0, false), -128);
        assert_eq!(requantize(-50, 0, true), 0);
    }

    pub(crate) fn layer(shape: LayerShape, frac_bits: u8, in_frac: u8, act_frac: u8, relu: bool, weights: Vec<i8>, bias: Vec<i32>) -> QLayer {
        QLayer { shape, relu, frac_bits, act_frac_bits: act_frac, in_frac_bits: in_frac, weights, bias }
    }

    #[test]
    fn fc_identity_example() {
        let l = layer(LayerShape::Fc { in_dim: 1, out_dim: 1 }, 6, 6, 6, false, vec![64], vec![0]);
        assert_eq!(fc_accumulate(&l, &[32]).unwrap(), vec![2048]);
        assert_eq!(fc_forward(&l, &[32]).unwrap(), vec![32]);
        assert!(matches!(fc_forward(&l, &[1, 2]), Err(InferError::Dim { expected: 1, got: 2 })));
    }

    #[test]
    fn fc_zero_weights_give_bias() {
        let l = layer(LayerShape::Fc { in_dim: 3, out_dim: 2 }, 4, 4, 4, false, vec![0; 6], vec![256, -300]);
        for x in [[1i8, 2, 3], [-128, 127, 0]] {
            assert_eq!(fc_forward(&l, &x).unwrap(), vec![16, -19]);
        }
    }

    #[test]
    fn conv_all_ones_kernel() {
        // weights 1.0 at f=4, inputs 1.0 at f=4, output at f=4: 3 + 0.5 = 3.5
        let l = layer(LayerShape::Conv1d { in_ch: 1, out_ch: 1, kernel: 3 }, 4, 4, 4, true, vec![16; 3], vec![128]);
        let x = vec![vec![16i8]; 5];
        assert_eq!(conv1d_forward(&l, &x).unwrap(), vec![vec![56i8]; 3]);
        assert!(matches!(conv1d_forward(&l, &x[..2]), Err(InferError::TooShort { len: 2, kernel: 3 })));
    }

    #[test]
    fn rnn_degenerate_cells() {
        let zero = layer(LayerShape::Rnn { in_dim: 2, hidden: 2 }, 5, 5, 5, true, vec![0; 8], vec![64, -64]);
        assert_eq!(rnn_step(&zero, &[10, 20], &[30, 40]).unwrap(), vec![2, 0]);
        assert_eq!(rnn_step(&zero, &[-1, 0], &[0, 0]).unwrap(), vec![2, 0]);
        let mut w = vec![3, -7, 11, 5];
        w.extend([0; 4]);
        let memoryless = layer(LayerShape::Rnn { in_dim: 2, hidden: 2 }, 3, 4, 5, true, w, vec![0, 0]);
        let a = rnn_step(&memoryless, &[1, 2], &[50, -20]).unwrap();
        let b = rnn_step(&memoryless, &[-100, 99], &[50, -20]).unwrap();
        assert_eq!(a, b);
    }

    // ---- arbitrary-precision oracles ----

    fn big_round_shift(acc: &BigInt, shift: i32) -> BigInt {
        if shift <= 0 {
            return acc * (BigInt::from(1) << (-shift) as usize);
        }
        let d = BigInt::from(1) << shift as usize;
        let half = &d / 2;
        let q: BigInt = (acc.abs() + half) / d;
        if acc.is_negative() {
            -q
        } else {
            q
        }
    }

    fn big_requant(acc: &BigInt, shift: i32, relu: bool) -> i8 {
        let mut v = big_round_shift(acc, shift);
        if relu && v.is_negative() {
            v = BigInt::zero();
        }
        v.clamp(BigInt::from(-128), BigInt::from(127)).to_i8().unwrap()
    }

    fn big_dot(w: &[i8], x: &[i8]) -> BigInt {
        w.iter().zip(x).map(|(&a, &b)| BigInt::from(a) * BigInt::from(b)).sum()
    }

    pub(crate) fn oracle_fc(l: &QLayer, x: &[i8]) -> Vec<i8> {
        let shift = l.frac_bits as i32 + l.in_frac_bits as i32 - l.act_frac_bits as i32;
        l.weights
            .chunks(x.len())
            .zip(&l.bias)
            .map(|(r, &b)| big_requant(&(big_dot(r, x) + BigInt::from(b)), shift, l.relu))
            .collect()
    }

    pub(crate) fn oracle_conv(l: &QLayer, x: &[Vec<i8>], kernel: usize) -> Vec<Vec<i8>> {
        let in_ch = x[0].len();
        let shift = l.frac_bits as i32 + l.in_frac_bits as i32 - l.act_frac_bits as i32;
        (0..=x.len() - kernel)
            .map(|t| {
                l.weights
                    .chunks(kernel * in_ch)
                    .zip(&l.bias)
                    .map(|(f, &b)| {
                        let mut acc = BigInt::from(b);
                        for k in 0..kernel {
                            acc += big_dot(&f[k * in_ch..(k + 1) * in_ch], &x[t + k]);
                        }
                        big_requant(&acc, shift, l.relu)
                    })
                    .collect()
            })
            .collect()
    }

    /// Unrolled rnn in exact rational arithmetic on the common scale.
    pub(crate) fn oracle_rnn(l: &QLayer, xs: &[Vec<i8>], hidden: usize) -> Vec<i8> {
        let in_dim = xs[0].len();
        let (wx, wh) = l.weights.split_at(in_dim * hidden);
        let s = l.in_frac_bits.max(l.act_frac_bits) as i32;
        let shift = l.frac_bits as i32 + s - l.act_frac_bits as i32;
        let mut h = vec![0i8; hidden];
        for x in xs {
            h = (0..hidden)
                .map(|o| {
                    let ax = big_dot(&wx[o * in_dim..(o + 1) * in_dim], x) << (s - l.in_frac_bits as i32) as usize;
                    let ah = big_dot(&wh[o * hidden..(o + 1) * hidden], &h) << (s - l.act_frac_bits as i32) as usize;
                    big_requant(&(ax + ah + BigInt::from(l.bias[o])), shift, l.relu)
                })
                .collect();
        }
        h
    }

    pub(crate) fn random_i8s(rng: &mut impl Rng, n: usize) -> Vec<i8> {
        (0..n).map(|_| rng.random()).collect()
    }

    /// Random layer; scales are small enough that dims up to 128 stay
    /// within the accumulator bound.
    pub(crate) fn random_layer(rng: &mut impl Rng, shape: LayerShape) -> QLayer {
        let enc = InputEncoding { seq_len: 1, len_bucket: 1, len_vocab: 2, ipd_vocab: 2, ipd_min_log2: 0 };
        let fb = rng.random_range(0..=7);
        let inf = rng.random_range(0..=7);
        let (fb, inf) = match shape {
            // the rnn may shift one product up by 7 bits; keep the worst case in range
            LayerShape::Rnn { .. } => (fb, inf.min(3)),
            _ => (fb, inf),
        };
        let af = match shape {
            LayerShape::Rnn { .. } => rng.random_range(0..=3),
            _ => rng.random_range(0..=7),
        };
        let n_out = shape.bias_count();
        QLayer {
            shape,
            relu: rng.random_bool(0.5),
            frac_bits: fb,
            act_frac_bits: af,
            in_frac_bits: inf,
            weights: random_i8s(rng, shape.weight_count(&enc)),
            bias: (0..n_out).map(|_| rng.random_range(-1_000_000..1_000_000)).collect(),
        }
    }

    #[test]
    fn fc_matches_bigint_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (i, o) = (rng.random_range(1..=128), rng.random_range(1..=128));
            let l = random_layer(&mut rng, LayerShape::Fc { in_dim: i, out_dim: o });
            let x = random_i8s(&mut rng, i as usize);
            assert_eq!(fc_forward(&l, &x).unwrap(), oracle_fc(&l, &x));
        }
    }

    #[test]
    fn conv_matches_bigint_oracle_and_kernel1_is_fc() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (c, o, k) = (rng.random_range(1..=32), rng.random_range(1..=32), rng.random_range(1..=5));
            let l = random_layer(&mut rng, LayerShape::Conv1d { in_ch: c, out_ch: o, kernel: k });
            let len = rng.random_range(k as usize..=12);
            let x: Vec<Vec<i8>> = (0..len).map(|_| random_i8s(&mut rng, c as usize)).collect();
            assert_eq!(conv1d_forward(&l, &x).unwrap(), oracle_conv(&l, &x, k as usize));
        }
        for _ in 0..50 {
            let (c, o) = (rng.random_range(1..=16), rng.random_range(1..=16));
            let conv = random_layer(&mut rng, LayerShape::Conv1d { in_ch: c, out_ch: o, kernel: 1 });
            let fc = QLayer { shape: LayerShape::Fc { in_dim: c, out_dim: o }, ..conv.clone() };
            let x: Vec<Vec<i8>> = (0..6).map(|_| random_i8s(&mut rng, c as usize)).collect();
            let per_pos: Vec<Vec<i8>> = x.iter().map(|v| fc_forward(&fc, v).unwrap()).collect();
            assert_eq!(conv1d_forward(&conv, &x).unwrap(), per_pos);
        }
    }

    #[test]
    fn rnn_matches_unrolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (i, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
            let l = random_layer(&mut rng, LayerShape::Rnn { in_dim: i, hidden: h });
            let xs: Vec<Vec<i8>> = (0..5).map(|_| random_i8s(&mut rng, i as usize)).collect();
            assert_eq!(rnn_forward(&l, &xs).unwrap(), oracle_rnn(&l, &xs, h as usize));
        }
    }

    fn zero_model(zero_pad_row: bool) -> QuantizedModel {
        let e = InputEncoding { seq_len: 3, len_bucket: 64, len_vocab: 4, ipd_vocab: 2, ipd_min_log2: 0 };
        let mut emb = vec![5i8; 4 * 2 + 2];
        if zero_pad_row {
            emb[0] = 0;
            emb[1] = 0;
            emb[8] = 0;
        }
        QuantizedModel::new(
            e,
            vec![
                layer(LayerShape::Embedding { len_dim: 2, ipd_dim: 1 }, 6, 0, 6, false, emb, vec![]),
                layer(LayerShape::Fc { in_dim: 9, out_dim: 3 }, 6, 0, 6, false, (0..27).map(|i| i as i8).collect(), vec![0; 3]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn all_pad_ties_to_class_zero() {
        let m = zero_model(true);
        let (class, logits) = infer(&m, &[]).unwrap();
        assert_eq!(logits.values, vec![0, 0, 0]);
        assert_eq!(class, 0);
        assert_eq!(argmax(&[1, 3, 3]), 1);
    }

    #[test]
    fn infer_is_deterministic() {
        let m = zero_model(false);
        let f = [WireFeature { len: 100, ipd_bucket: 3 }, WireFeature { len: 1500, ipd_bucket: 9 }];
        assert_eq!(infer(&m, &f).unwrap(), infer(&m, &f).unwrap());
    }

    /// Two classes; logit1 - logit0 grows with the summed length embedding
    /// and is zero exactly at the mean-length threshold of 512 bytes.
    #[test]
    fn handcrafted_mean_length_threshold() {
        let e = InputEncoding { seq_len: 4, len_bucket: 64, len_vocab: 32, ipd_vocab: 2, ipd_min_log2: 0 };
        // len embedding: (bucket - 8) / 32, i.e. signed distance from 512 bytes
        let mut emb: Vec<i8> = vec![0];
        emb.extend((1..32).map(|i| ((i - 1 - 8) * 4) as i8));
        emb.extend([0, 0]);
        let m = QuantizedModel::new(
            e,
            vec![
                layer(LayerShape::Embedding { len_dim: 1, ipd_dim: 1 }, 7, 0, 7, false, emb, vec![]),
                layer(LayerShape::Fc { in_dim: 8, out_dim: 2 }, 6, 7, 0, false, vec![0, 0, 0, 0, 0, 0, 0, 0, 64, 0, 64, 0, 64, 0, 64, 0], vec![0, 0]),
            ],
        )
        .unwrap();
        let f = |len| WireFeature { len, ipd_bucket: 1 };
        assert_eq!(infer(&m, &[f(1400), f(1300), f(1500)]).unwrap().0, 1);
        assert_eq!(infer(&m, &[f(100), f(60), f(200), f(90)]).unwrap().0, 0);
        assert_eq!(infer(&m, &[f(100), f(1400)]).unwrap().0, 1);
    }

    #[test]
    fn float_reference_trivial_cases() {
        let e = InputEncoding { seq_len: 2, len_bucket: 64, len_vocab: 4, ipd_vocab: 2, ipd_min_log2: 0 };
        let m = FloatModel {
            input: e,
            layers: vec![
                FloatLayer { shape: LayerShape::Embedding { len_dim: 1, ipd_dim: 0 }, relu: false, weights: vec![0.0; 4], bias: vec![] },
                FloatLayer { shape: LayerShape::Fc { in_dim: 2, out_dim: 3 }, relu: false, weights: vec![0.0; 6], bias: vec![0.0; 3] },
            ],
        };
        let f = [WireFeature { len: 70, ipd_bucket: 1 }];
        assert_eq!(float_reference_infer(&m, &f).unwrap(), (0, vec![0.0; 3]));
        assert_eq!(float_reference_infer(&m, &[]).unwrap(), (0, vec![0.0; 3]));
        assert_eq!(float_reference_infer(&m, &f).unwrap(), float_reference_infer(&m, &f).unwrap());
    }

    /// Gaussian-weight conv model for quantization agreement checks.
    fn gaussian_model(rng: &mut ChaCha8Rng) -> FloatModel {
        let e = InputEncoding { seq_len: 8, len_bucket: 64, len_vocab: 32, ipd_vocab: 24, ipd_min_log2: 4 };
        let mut g = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| s * Distribution::<f64>::sample(&StandardNormal, &mut *rng)).collect::<Vec<f64>>() };
        let mut emb = g(32 * 6 + 24 * 2, 0.5);
        emb[..6].iter_mut().for_each(|v| *v = 0.0);
        FloatModel {
            input: e,
            layers: vec![
                FloatLayer { shape: LayerShape::Embedding { len_dim: 6, ipd_dim: 2 }, relu: false, weights: emb, bias: vec![] },
                FloatLayer { shape: LayerShape::Conv1d { in_ch: 8, out_ch: 12, kernel: 3 }, relu: true, weights: g(12 * 3 * 8, 0.2), bias: g(12, 0.1) },
                FloatLayer { shape: LayerShape::Fc { in_dim: 72, out_dim: 4 }, relu: false, weights: g(72 * 4, 0.1), bias: g(4, 0.1) },
            ],
        }
    }

    pub(crate) fn random_features(rng: &mut impl Rng, max_len: usize) -> Vec<WireFeature> {
        let n = rng.random_range(1..=max_len);
        (0..n).map(|_| WireFeature { len: rng.random_range(40..=1500), ipd_bucket: rng.random_range(0..=30) }).collect()
    }

    #[test]
    fn gaussian_models_quantize_with_high_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let fm = gaussian_model(&mut rng);
            let calib: Vec<_> = (0..200).map(|_| random_features(&mut rng, 8)).collect();
            let qm = quantize_model(&fm, &calib).unwrap();
            let agree = (0..1000)
                .filter(|_| {
                    let f = random_features(&mut rng, 8);
                    infer(&qm, &f).unwrap().0 == float_reference_infer(&fm, &f).unwrap().0
                })
                .count();
            assert!(agree >= 950, "agreement {agree}/1000");
        }
    }

    #[test]
    fn latency_model_properties() {
        let lm = LatencyModel { array_width: 8, pipeline_cycles: 100 };
        assert_eq!(lm.cycles(&[], 1), 100);
        assert_eq!(lm.latency_ns_for_macs(&[], 1e9, 1), 100.0);
        assert_eq!(lm.cycles(&[64, 65, 1], 1), 100 + 1 + 2 + 1);
        assert_eq!(lm.cycles(&[64], 3), 103);
    }

    proptest! {
        #[test]
        fn latency_monotone_in_macs(macs in proptest::collection::vec(0u64..1_000_000, 0..6), w in 1u32..32) {
            let lm = LatencyModel { array_width: w, pipeline_cycles: 17 };
            let doubled: Vec<u64> = macs.iter().map(|m| m * 2).collect();
            prop_assert!(lm.cycles(&doubled, 1) >= lm.cycles(&macs, 1));
        }
    }
}
