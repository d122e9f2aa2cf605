//! Power-of-two INT8 quantization of sequence models and the binary model
//! file format.
//!
//! A value `q` stored with `f` fractional bits represents `q / 2^f`. Weights
//! of each layer share one `frac_bits`; each layer's output activations share
//! one `act_frac_bits`, chosen from calibration extrema. Biases are int32 at
//! the layer's accumulator scale.
//!
//! Model file (all integers little-endian):
//!
//! ```text
//! "FXQM" | version u16 | layer count u16
//! per layer: kind u8 | dims u16... | frac_bits u8 | act_frac_bits u8 | weights i8... | biases i32...
//!   kind 0 embedding: seq_len len_bucket len_vocab len_dim ipd_vocab ipd_dim ipd_min_log2
//!   kind 1 fc:        in_dim out_dim relu
//!   kind 2 conv1d:    in_ch out_ch kernel relu
//!   kind 3 rnn:       in_dim hidden relu
//! ```
//!
//! Embedding weights are the length table then the delay table (row per
//! index); conv weights are `[out][k][in]`; rnn weights are `W_x [hidden][in]`
//! then `W_h [hidden][hidden]`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::WireFeature;
use crate::infer::float_forward_trace;

pub const MAGIC: &[u8; 4] = b"FXQM";
pub const FORMAT_VERSION: u16 = 1;
pub const MAX_FRAC_BITS: u8 = 7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u16),
    #[error("model file truncated")]
    Truncated,
    #[error("model format error: {0}")]
    Format(String),
    #[error("accumulator bound exceeded: {0}")]
    Overflow(String),
    #[error("input incompatible with model: {0}")]
    Input(String),
    #[error("calibration error: {0}")]
    Calibration(String),
}

/// Mapping from wire features to embedding indices. Index 0 is PAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputEncoding {
    /// Sequence length fixed at synthesis time.
    pub seq_len: u16,
    /// Bytes per length bucket.
    pub len_bucket: u16,
    pub len_vocab: u16,
    pub ipd_vocab: u16,
    /// Delay buckets below this log2 value share index 1.
    #[serde(default)]
    pub ipd_min_log2: u16,
}

impl InputEncoding {
    fn validate(&self) -> Result<(), ModelError> {
        if self.seq_len == 0 || self.len_bucket == 0 || self.len_vocab < 2 || self.ipd_vocab < 2 {
            return Err(ModelError::Shape(format!("invalid input encoding {self:?}")));
        }
        Ok(())
    }
}

/// Layer geometry shared by float and quantized models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerShape {
    Embedding { len_dim: u16, ipd_dim: u16 },
    Fc { in_dim: u16, out_dim: u16 },
    Conv1d { in_ch: u16, out_ch: u16, kernel: u16 },
    Rnn { in_dim: u16, hidden: u16 },
}

/// Activation geometry between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Seq { len: usize, dim: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Seq { len, dim } => len * dim,
            ActShape::Flat(n) => n,
        }
    }
}

impl LayerShape {
    pub fn weight_count(&self, enc: &InputEncoding) -> usize {
        match *self {
            LayerShape::Embedding { len_dim, ipd_dim } => {
                enc.len_vocab as usize * len_dim as usize + enc.ipd_vocab as usize * ipd_dim as usize
            }
            LayerShape::Fc { in_dim, out_dim } => in_dim as usize * out_dim as usize,
            LayerShape::Conv1d { in_ch, out_ch, kernel } => out_ch as usize * kernel as usize * in_ch as usize,
            LayerShape::Rnn { in_dim, hidden } => hidden as usize * (in_dim as usize + hidden as usize),
        }
    }

    pub fn bias_count(&self) -> usize {
        match *self {
            LayerShape::Embedding { .. } => 0,
            LayerShape::Fc { out_dim, .. } => out_dim as usize,
            LayerShape::Conv1d { out_ch, .. } => out_ch as usize,
            LayerShape::Rnn { hidden, .. } => hidden as usize,
        }
    }

    /// Output geometry for input `x`, or a shape error.
    pub fn output(&self, x: Option<ActShape>, enc: &InputEncoding) -> Result<ActShape, ModelError> {
        match (*self, x) {
            (LayerShape::Embedding { len_dim, ipd_dim }, None) => {
                if len_dim as usize + ipd_dim as usize == 0 {
                    return Err(ModelError::Shape("embedding needs a non-zero width".into()));
                }
                Ok(ActShape::Seq { len: enc.seq_len as usize, dim: len_dim as usize + ipd_dim as usize })
            }
            (LayerShape::Embedding { .. }, Some(_)) => Err(ModelError::Shape("embedding must be the first layer".into())),
            (_, None) => Err(ModelError::Shape("first layer must be an embedding".into())),
            (LayerShape::Fc { in_dim, out_dim }, Some(x)) => {
                if x.numel() != in_dim as usize || out_dim == 0 {
                    return Err(ModelError::Shape(format!("fc expects {in_dim} inputs, got {x:?}")));
                }
                Ok(ActShape::Flat(out_dim as usize))
            }
            (LayerShape::Conv1d { in_ch, out_ch, kernel }, Some(ActShape::Seq { len, dim })) => {
                if dim != in_ch as usize || kernel == 0 || out_ch == 0 {
                    return Err(ModelError::Shape(format!("conv1d expects {in_ch} channels, got {dim}")));
                }
                if len < kernel as usize {
                    return Err(ModelError::Shape(format!("sequence length {len} shorter than kernel {kernel}")));
                }
                Ok(ActShape::Seq { len: len - kernel as usize + 1, dim: out_ch as usize })
            }
            (LayerShape::Rnn { in_dim, hidden }, Some(ActShape::Seq { dim, .. })) => {
                if dim != in_dim as usize || hidden == 0 {
                    return Err(ModelError::Shape(format!("rnn expects {in_dim} inputs per step, got {dim}")));
                }
                Ok(ActShape::Flat(hidden as usize))
            }
            (s, Some(x)) => Err(ModelError::Shape(format!("{s:?} cannot consume {x:?}"))),
        }
    }

    fn kind_byte(&self) -> u8 {
        match self {
            LayerShape::Embedding { .. } => 0,
            LayerShape::Fc { .. } => 1,
            LayerShape::Conv1d { .. } => 2,
            LayerShape::Rnn { .. } => 3,
        }
    }
}

/// Geometry of every activation: `shapes[k]` is layer `k`'s output.
fn check_shapes(enc: &InputEncoding, layers: &[LayerShape]) -> Result<Vec<ActShape>, ModelError> {
    enc.validate()?;
    if !matches!(layers.last(), Some(LayerShape::Fc { .. })) {
        return Err(ModelError::Shape("last layer must be fully connected".into()));
    }
    let mut out = Vec::with_capacity(layers.len());
    let mut cur = None;
    for l in layers {
        let next = l.output(cur, enc)?;
        out.push(next);
        cur = Some(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatLayer {
    pub shape: LayerShape,
    #[serde(default)]
    pub relu: bool,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub bias: Vec<f64>,
}

/// Real-valued model as exchanged in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatModel {
    pub input: InputEncoding,
    pub layers: Vec<FloatLayer>,
}

impl FloatModel {
    pub fn validate(&self) -> Result<Vec<ActShape>, ModelError> {
        let shapes: Vec<_> = self.layers.iter().map(|l| l.shape).collect();
        let acts = check_shapes(&self.input, &shapes)?;
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.shape.weight_count(&self.input) || l.bias.len() != l.shape.bias_count() {
                return Err(ModelError::Shape(format!(
                    "layer {i}: expected {} weights and {} biases, got {} and {}",
                    l.shape.weight_count(&self.input),
                    l.shape.bias_count(),
                    l.weights.len(),
                    l.bias.len()
                )));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(ModelError::Shape(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(acts)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last().map(|l| l.shape) {
            Some(LayerShape::Fc { out_dim, .. }) => out_dim as usize,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QLayer {
    pub shape: LayerShape,
    pub relu: bool,
    pub frac_bits: u8,
    pub act_frac_bits: u8,
    /// Fractional bits of this layer's input; derived from the previous
    /// layer when the model is assembled, not stored on disk.
    pub in_frac_bits: u8,
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
}

impl QLayer {
    /// Accumulator scale of the layer's output before requantization.
    pub fn acc_frac_bits(&self) -> u8 {
        match self.shape {
            LayerShape::Embedding { .. } => self.frac_bits,
            LayerShape::Rnn { .. } => self.frac_bits + self.in_frac_bits.max(self.act_frac_bits),
            _ => self.frac_bits + self.in_frac_bits,
        }
    }
}

/// INT8 model ready for integer inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedModel {
    pub input: InputEncoding,
    pub layers: Vec<QLayer>,
    acts: Vec<ActShape>,
}

impl QuantizedModel {
    /// Assembles and validates a model: shapes, parameter counts, scale
    /// ranges and the int32 accumulator bound. Fills in `in_frac_bits`.
    pub fn new(input: InputEncoding, mut layers: Vec<QLayer>) -> Result<Self, ModelError> {
        let shapes: Vec<_> = layers.iter().map(|l| l.shape).collect();
        let acts = check_shapes(&input, &shapes)?;
        let mut prev_frac = 0u8;
        for (i, l) in layers.iter_mut().enumerate() {
            if l.frac_bits > MAX_FRAC_BITS || l.act_frac_bits > MAX_FRAC_BITS {
                return Err(ModelError::Format(format!("layer {i}: frac bits above {MAX_FRAC_BITS}")));
            }
            if let LayerShape::Embedding { .. } = l.shape {
                l.act_frac_bits = l.frac_bits;
                l.relu = false;
            }
            l.in_frac_bits = prev_frac;
            prev_frac = l.act_frac_bits;
            if l.weights.len() != l.shape.weight_count(&input) || l.bias.len() != l.shape.bias_count() {
                return Err(ModelError::Shape(format!("layer {i}: parameter count mismatch")));
            }
            check_accumulator_bound(i, l)?;
        }
        Ok(Self { input, layers, acts })
    }

    /// Output geometry of each layer.
    pub fn activation_shapes(&self) -> &[ActShape] {
        &self.acts
    }

    pub fn num_classes(&self) -> usize {
        self.acts.last().map(ActShape::numel).unwrap_or(0)
    }

    /// Multiply-accumulates per layer for one inference.
    pub fn layer_macs(&self) -> Vec<u64> {
        let mut prev: Option<ActShape> = None;
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, act) in self.layers.iter().zip(&self.acts) {
            let macs = match (l.shape, prev) {
                (LayerShape::Embedding { .. }, _) => 0,
                (LayerShape::Fc { in_dim, out_dim }, _) => in_dim as u64 * out_dim as u64,
                (LayerShape::Conv1d { in_ch, out_ch, kernel }, _) => {
                    act.numel() as u64 / out_ch as u64 * out_ch as u64 * kernel as u64 * in_ch as u64
                }
                (LayerShape::Rnn { in_dim, hidden }, Some(ActShape::Seq { len, .. })) => {
                    len as u64 * hidden as u64 * (in_dim as u64 + hidden as u64)
                }
                _ => 0,
            };
            out.push(macs);
            prev = Some(*act);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        let enc = &self.input;
        for l in &self.layers {
            out.push(l.shape.kind_byte());
            let dims: Vec<u16> = match l.shape {
                LayerShape::Embedding { len_dim, ipd_dim } => vec![
                    enc.seq_len,
                    enc.len_bucket,
                    enc.len_vocab,
                    len_dim,
                    enc.ipd_vocab,
                    ipd_dim,
                    enc.ipd_min_log2,
                ],
                LayerShape::Fc { in_dim, out_dim } => vec![in_dim, out_dim, l.relu as u16],
                LayerShape::Conv1d { in_ch, out_ch, kernel } => vec![in_ch, out_ch, kernel, l.relu as u16],
                LayerShape::Rnn { in_dim, hidden } => vec![in_dim, hidden, l.relu as u16],
            };
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.push(l.frac_bits);
            out.push(l.act_frac_bits);
            out.extend(l.weights.iter().map(|&w| w as u8));
            for b in &l.bias {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        let count = r.u16()?;
        let mut input: Option<InputEncoding> = None;
        let mut layers = Vec::with_capacity(count as usize);
        for i in 0..count {
            let kind = r.u8()?;
            let (shape, relu) = match kind {
                0 => {
                    let d = r.u16s(7)?;
                    if i != 0 {
                        return Err(ModelError::Format("embedding layer must come first".into()));
                    }
                    input = Some(InputEncoding {
                        seq_len: d[0],
                        len_bucket: d[1],
                        len_vocab: d[2],
                        ipd_vocab: d[4],
                        ipd_min_log2: d[6],
                    });
                    (LayerShape::Embedding { len_dim: d[3], ipd_dim: d[5] }, false)
                }
                1 => {
                    let d = r.u16s(3)?;
                    (LayerShape::Fc { in_dim: d[0], out_dim: d[1] }, flag(d[2])?)
                }
                2 => {
                    let d = r.u16s(4)?;
                    (LayerShape::Conv1d { in_ch: d[0], out_ch: d[1], kernel: d[2] }, flag(d[3])?)
                }
                3 => {
                    let d = r.u16s(3)?;
                    (LayerShape::Rnn { in_dim: d[0], hidden: d[1] }, flag(d[2])?)
                }
                k => return Err(ModelError::Format(format!("unknown layer kind {k}"))),
            };
            let enc = input.ok_or_else(|| ModelError::Format("first layer must be an embedding".into()))?;
            enc.validate()?;
            let frac_bits = r.u8()?;
            let act_frac_bits = r.u8()?;
            let weights = r.take(shape.weight_count(&enc))?.iter().map(|&b| b as i8).collect();
            let bias = (0..shape.bias_count()).map(|_| r.i32()).collect::<Result<_, _>>()?;
            layers.push(QLayer { shape, relu, frac_bits, act_frac_bits, in_frac_bits: 0, weights, bias });
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let input = input.ok_or_else(|| ModelError::Format("model has no layers".into()))?;
        Self::new(input, layers)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn flag(v: u16) -> Result<bool, ModelError> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(ModelError::Format(format!("activation flag must be 0 or 1, got {v}"))),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).ok_or(ModelError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(ModelError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<u16>, ModelError> {
        (0..n).map(|_| self.u16()).collect()
    }

    fn i32(&mut self) -> Result<i32, ModelError> {
        let b = self.take(4)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Rejects layers whose worst-case accumulator could leave the int32 range.
fn check_accumulator_bound(idx: usize, l: &QLayer) -> Result<(), ModelError> {
    const MAX_ACT: i64 = 128;
    let row_bound = |row: &[i8], shift: u32| -> i64 {
        row.iter().map(|&w| (w as i64).abs() * MAX_ACT).sum::<i64>() << shift
    };
    let rows: Vec<i64> = match l.shape {
        LayerShape::Embedding { .. } => return Ok(()),
        LayerShape::Fc { in_dim, .. } => l.weights.chunks(in_dim as usize).map(|r| row_bound(r, 0)).collect(),
        LayerShape::Conv1d { in_ch, kernel, .. } => {
            l.weights.chunks(in_ch as usize * kernel as usize).map(|r| row_bound(r, 0)).collect()
        }
        LayerShape::Rnn { in_dim, hidden } => {
            let s = l.in_frac_bits.max(l.act_frac_bits);
            let (wx, wh) = l.weights.split_at(in_dim as usize * hidden as usize);
            wx.chunks(in_dim as usize)
                .zip(wh.chunks(hidden as usize))
                .map(|(x, h)| {
                    row_bound(x, (s - l.in_frac_bits) as u32) + row_bound(h, (s - l.act_frac_bits) as u32)
                })
                .collect()
        }
    };
    for (o, (r, b)) in rows.iter().zip(&l.bias).enumerate() {
        if r + (*b as i64).abs() > i32::MAX as i64 {
            return Err(ModelError::Overflow(format!("layer {idx}, output {o}: worst case {}", r + (*b as i64).abs())));
        }
    }
    Ok(())
}

/// Largest `f` in `0..=7` with `max|v| * 2^f <= 127`; 7 for an all-zero input.
pub fn choose_frac_bits(values: &[f64]) -> u8 {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (0..=MAX_FRAC_BITS).rev().find(|&f| max * f64::from(1u32 << f) <= 127.0).unwrap_or(0)
}

pub fn quantize_value(v: f64, frac_bits: u8) -> i8 {
    // f64::round rounds half away from zero
    (v * f64::from(1u32 << frac_bits)).round().clamp(-128.0, 127.0) as i8
}

pub fn quantize_tensor(values: &[f64], frac_bits: u8) -> Vec<i8> {
    values.iter().map(|&v| quantize_value(v, frac_bits)).collect()
}

pub fn dequantize(q: i8, frac_bits: u8) -> f64 {
    q as f64 / f64::from(1u32 << frac_bits)
}

fn quantize_bias(b: f64, frac_bits: u8) -> i32 {
    (b * 2f64.powi(frac_bits as i32)).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32
}

/// Quantizes `m`, choosing per-layer weight scales from the weights and
/// activation scales from the max-abs activations over `calibration`.
pub fn quantize_model(m: &FloatModel, calibration: &[Vec<WireFeature>]) -> Result<QuantizedModel, ModelError> {
    m.validate()?;
    if calibration.is_empty() {
        return Err(ModelError::Calibration("calibration batch is empty".into()));
    }
    let mut act_max = vec![0.0f64; m.layers.len()];
    for seq in calibration {
        let trace = float_forward_trace(m, seq)?;
        for (k, layer_max) in trace.iter().enumerate() {
            act_max[k] = act_max[k].max(*layer_max);
        }
    }
    let mut layers = Vec::with_capacity(m.layers.len());
    let mut in_frac = 0u8;
    for (l, amax) in m.layers.iter().zip(&act_max) {
        let frac_bits = choose_frac_bits(&l.weights);
        let act_frac_bits = match l.shape {
            LayerShape::Embedding { .. } => frac_bits,
            _ => choose_frac_bits(&[*amax]),
        };
        let acc_frac = match l.shape {
            LayerShape::Rnn { .. } => frac_bits + in_frac.max(act_frac_bits),
            _ => frac_bits + in_frac,
        };
        layers.push(QLayer {
            shape: l.shape,
            relu: l.relu,
            frac_bits,
            act_frac_bits,
            in_frac_bits: in_frac,
            weights: quantize_tensor(&l.weights, frac_bits),
            bias: l.bias.iter().map(|&b| quantize_bias(b, acc_frac)).collect(),
        });
        in_frac = act_frac_bits;
    }
    QuantizedModel::new(m.input, layers)
}
