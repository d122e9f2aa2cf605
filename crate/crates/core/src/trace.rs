//! Packet traces: JSON Lines loading/writing, synthetic traffic generation and
//! per-packet feature extraction.
//!
//! A trace line carries exactly the keys
//! `ts_ns, src_ip, dst_ip, src_port, dst_port, proto, len, label`, with IPs as
//! dotted quads and `label` either an integer class id or `null`.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Pareto};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Class identifier produced by classifiers and carried by trace labels.
pub type ClassId = u16;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: timestamp {ts_ns} precedes previous timestamp {prev_ns}")]
    Regression { line: usize, ts_ns: u64, prev_ns: u64 },
    #[error("invalid traffic spec: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("clock error: previous timestamp {prev_ns} is after packet timestamp {ts_ns}")]
pub struct ClockError {
    pub prev_ns: u64,
    pub ts_ns: u64,
}

/// Flow identity. Addresses are host-order `u32`s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src_ip: u32,
    pub dst_ip: u32,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: u8,
}

impl FiveTuple {
    pub const WIRE_LEN: usize = 13;

    /// Little-endian 13-byte encoding, also the input of the flow hash.
    pub fn to_bytes(&self) -> [u8; Self::WIRE_LEN] {
        let mut out = [0u8; Self::WIRE_LEN];
        out[0..4].copy_from_slice(&self.src_ip.to_le_bytes());
        out[4..8].copy_from_slice(&self.dst_ip.to_le_bytes());
        out[8..10].copy_from_slice(&self.src_port.to_le_bytes());
        out[10..12].copy_from_slice(&self.dst_port.to_le_bytes());
        out[12] = self.proto;
        out
    }

    pub fn from_bytes(b: &[u8; Self::WIRE_LEN]) -> Self {
        Self {
            src_ip: u32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            dst_ip: u32::from_le_bytes([b[4], b[5], b[6], b[7]]),
            src_port: u16::from_le_bytes([b[8], b[9]]),
            dst_port: u16::from_le_bytes([b[10], b[11]]),
            proto: b[12],
        }
    }

    /// CRC-32 of the wire encoding; the flow table truncates it to its width.
    pub fn hash32(&self) -> u32 {
        crc32fast::hash(&self.to_bytes())
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} /{}",
            Ipv4Addr::from(self.src_ip),
            self.src_port,
            Ipv4Addr::from(self.dst_ip),
            self.dst_port,
            self.proto
        )
    }
}

/// One trace event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketRecord {
    pub ts_ns: u64,
    pub five_tuple: FiveTuple,
    /// Bytes, never zero.
    pub length: u16,
    pub label: Option<ClassId>,
}

/// Raw packet length and inter-packet delay of one packet within its flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub pkt_len: u16,
    pub ipd_ns: u64,
}

/// Features of `pkt` given the timestamp of the previous packet of its flow.
pub fn extract_feature(pkt: &PacketRecord, prev_ts_ns: Option<u64>) -> Result<FeatureVector, ClockError> {
    let ipd_ns = match prev_ts_ns {
        None => 0,
        Some(prev) if prev > pkt.ts_ns => {
            return Err(ClockError { prev_ns: prev, ts_ns: pkt.ts_ns });
        }
        Some(prev) => pkt.ts_ns - prev,
    };
    Ok(FeatureVector { pkt_len: pkt.length, ipd_ns })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceLine {
    ts_ns: u64,
    src_ip: Ipv4Addr,
    dst_ip: Ipv4Addr,
    src_port: u16,
    dst_port: u16,
    proto: u8,
    len: u16,
    label: Option<ClassId>,
}

impl From<&PacketRecord> for TraceLine {
    fn from(p: &PacketRecord) -> Self {
        Self {
            ts_ns: p.ts_ns,
            src_ip: Ipv4Addr::from(p.five_tuple.src_ip),
            dst_ip: Ipv4Addr::from(p.five_tuple.dst_ip),
            src_port: p.five_tuple.src_port,
            dst_port: p.five_tuple.dst_port,
            proto: p.five_tuple.proto,
            len: p.length,
            label: p.label,
        }
    }
}

/// Parses one JSON line; `line_no` is 1-based and only used for errors.
fn parse_line(text: &str, line_no: usize) -> Result<PacketRecord, TraceError> {
    let raw: TraceLine = serde_json::from_str(text).map_err(|e| TraceError::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    if raw.len == 0 {
        return Err(TraceError::Parse { line: line_no, msg: "len must be at least 1".into() });
    }
    Ok(PacketRecord {
        ts_ns: raw.ts_ns,
        five_tuple: FiveTuple {
            src_ip: raw.src_ip.into(),
            dst_ip: raw.dst_ip.into(),
            src_port: raw.src_port,
            dst_port: raw.dst_port,
            proto: raw.proto,
        },
        length: raw.len,
        label: raw.label,
    })
}

/// Reads a JSON Lines trace from any reader. Blank lines are skipped.
pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<PacketRecord>, TraceError> {
    let mut out = Vec::new();
    let mut prev: Option<u64> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(&line, line_no)?;
        if let Some(p) = prev {
            if rec.ts_ns < p {
                return Err(TraceError::Regression { line: line_no, ts_ns: rec.ts_ns, prev_ns: p });
            }
        }
        prev = Some(rec.ts_ns);
        out.push(rec);
    }
    Ok(out)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<PacketRecord>, TraceError> {
    let file = File::open(path)?;
    read_trace(BufReader::new(file))
}

pub fn write_trace<W: Write>(writer: W, records: &[PacketRecord]) -> Result<(), TraceError> {
    let mut w = BufWriter::new(writer);
    for rec in records {
        serde_json::to_writer(&mut w, &TraceLine::from(rec)).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Per-flow packet-rate distribution, in packets per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateDistribution {
    Fixed { pps: f64 },
    Uniform { min_pps: f64, max_pps: f64 },
    Pareto { scale_pps: f64, shape: f64 },
}

/// How packets of one flow are spaced in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Constant inter-arrival `1/rate` with a random phase.
    #[default]
    Periodic,
    /// Exponential inter-arrivals.
    Poisson,
}

/// Inclusive packet-length band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBand {
    pub min: u16,
    pub max: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSpec {
    pub num_flows: u32,
    pub duration_ns: u64,
    /// Active span of each flow; `None` keeps every flow alive for the whole
    /// duration. Start offsets are drawn uniformly so the flow ends in time.
    #[serde(default)]
    pub flow_duration_ns: Option<u64>,
    pub rate: RateDistribution,
    #[serde(default)]
    pub arrival: ArrivalProcess,
    /// One band per class; class `k` draws lengths uniformly from `bands[k]`.
    pub length_bands: Vec<LengthBand>,
    /// Class proportions; must sum to 1.
    pub class_mix: Vec<f64>,
    pub seed: u64,
}

impl TrafficSpec {
    pub fn num_classes(&self) -> usize {
        self.length_bands.len()
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: &str| Err(TraceError::Config(m.to_string()));
        if self.num_flows == 0 {
            return bad("num_flows must be at least 1");
        }
        if self.duration_ns == 0 {
            return bad("duration_ns must be positive");
        }
        if let Some(d) = self.flow_duration_ns {
            if d == 0 || d > self.duration_ns {
                return bad("flow_duration_ns must be in 1..=duration_ns");
            }
        }
        if self.length_bands.is_empty() {
            return bad("at least one length band is required");
        }
        if self.class_mix.len() != self.length_bands.len() {
            return bad("class_mix and length_bands differ in length");
        }
        if self.class_mix.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return bad("class_mix entries must be finite and non-negative");
        }
        if (self.class_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("class_mix must sum to 1");
        }
        if self.length_bands.iter().any(|b| b.min == 0 || b.min > b.max) {
            return bad("length bands need 1 <= min <= max");
        }
        if self.num_flows as u64 > u32::MAX as u64 - 0x0A00_0000 {
            return bad("too many flows for the synthetic address space");
        }
        let ok = match &self.rate {
            RateDistribution::Fixed { pps } => *pps > 0.0,
            RateDistribution::Uniform { min_pps, max_pps } => *min_pps > 0.0 && max_pps >= min_pps,
            RateDistribution::Pareto { scale_pps, shape } => *scale_pps > 0.0 && *shape > 0.0,
        };
        if !ok {
            return bad("rate distribution parameters must be positive");
        }
        Ok(())
    }
}

/// Five-tuple of the `i`-th synthetic flow. Unique for every `i` by construction.
pub fn synthetic_tuple(i: u32) -> FiveTuple {
    FiveTuple {
        src_ip: 0x0A00_0000 + i,
        dst_ip: 0xC0A8_0001,
        src_port: 1024 + (i % 60_000) as u16,
        dst_port: 443,
        proto: 6,
    }
}

/// Per-flow attributes chosen by [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFlow {
    pub five_tuple: FiveTuple,
    pub class: ClassId,
    pub rate_pps: f64,
}

/// Generates a labeled trace; a pure function of `spec` (seed included).
pub fn generate_synthetic(spec: &TrafficSpec) -> Result<Vec<PacketRecord>, TraceError> {
    generate_synthetic_flows(spec).map(|(pkts, _)| pkts)
}

/// Like [`generate_synthetic`], also returning the per-flow ground truth.
pub fn generate_synthetic_flows(
    spec: &TrafficSpec,
) -> Result<(Vec<PacketRecord>, Vec<SyntheticFlow>), TraceError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cdf: Vec<f64> = spec
        .class_mix
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let pareto = match spec.rate {
        RateDistribution::Pareto { scale_pps, shape } => {
            Some(Pareto::new(scale_pps, shape).map_err(|e| TraceError::Config(e.to_string()))?)
        }
        _ => None,
    };

    let span = spec.flow_duration_ns.unwrap_or(spec.duration_ns);
    let mut flows = Vec::with_capacity(spec.num_flows as usize);
    let mut packets: Vec<(u64, u32, u16)> = Vec::new();
    for i in 0..spec.num_flows {
        let u: f64 = rng.random();
        let class = cdf.iter().position(|c| u < *c).unwrap_or(cdf.len() - 1) as ClassId;
        let rate_pps = match &spec.rate {
            RateDistribution::Fixed { pps } => *pps,
            RateDistribution::Uniform { min_pps, max_pps } => {
                if max_pps > min_pps {
                    rng.random_range(*min_pps..*max_pps)
                } else {
                    *min_pps
                }
            }
            RateDistribution::Pareto { .. } => pareto.as_ref().map(|d| d.sample(&mut rng)).unwrap_or(1.0),
        };
        let start = if span < spec.duration_ns {
            rng.random_range(0..=spec.duration_ns - span)
        } else {
            0
        };
        let end = start + span;
        let gap_ns = 1e9 / rate_pps;
        let band = spec.length_bands[class as usize];
        let mut t = start as f64
            + match spec.arrival {
                ArrivalProcess::Periodic => rng.random::<f64>() * gap_ns,
                ArrivalProcess::Poisson => {
                    let e: f64 = Exp1.sample(&mut rng);
                    e * gap_ns
                }
            };
        while (t as u64) < end {
            let len = rng.random_range(band.min..=band.max);
            packets.push((t as u64, i, len));
            t += match spec.arrival {
                ArrivalProcess::Periodic => gap_ns,
                ArrivalProcess::Poisson => {
                    let e: f64 = Exp1.sample(&mut rng);
                    e * gap_ns
                }
            };
        }
        flows.push(SyntheticFlow { five_tuple: synthetic_tuple(i), class, rate_pps });
    }
    // Stable: ties keep per-flow generation order, then flow index order.
    packets.sort_by_key(|&(ts, flow, _)| (ts, flow));
    let records = packets
        .into_iter()
        .map(|(ts_ns, flow, length)| PacketRecord {
            ts_ns,
            five_tuple: flows[flow as usize].five_tuple,
            length,
            label: Some(flows[flow as usize].class),
        })
        .collect();
    Ok((records, flows))
}
