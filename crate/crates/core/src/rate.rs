//! Probabilistic rate limiting of feature transmissions.
//!
//! Tokens are generated at `V = min(F, B/W)` grants per second. Each flow's
//! transmission probability depends on its backlog age `T_i` and backlog
//! count `C_i` relative to the global flow count `N` and packet rate `Q`:
//! the probability ramps linearly over `T_i` between `N/V` and `Q/(Q_i V)`
//! (with `Q_i = C_i / T_i`), which makes the expected grant interval of
//! flow `i` equal to `(Q_i N + Q) / (2 Q_i V)` and the rate-weighted mean
//! interval equal to `N/V`.
//!
//! The dataplane only sees a uniformly binned lookup table of that function,
//! see [`ProbabilityTable`].

use std::io::Write;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RateError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("outside the probability model's domain: {0}")]
    Domain(String),
    #[error("clock went backwards: {now_ns} < {last_ns}")]
    Clock { now_ns: u64, last_ns: u64 },
}

/// Token generation rate `min(F, B/W)` in grants per second.
///
/// `engine_rate` is the inference engine's rate in inferences per second,
/// `bandwidth_bps` the engine channel bandwidth and `message_bits` the width
/// of one feature message.
pub fn compute_rate(engine_rate: f64, bandwidth_bps: f64, message_bits: f64) -> Result<f64, RateError> {
    for (name, v) in [("F", engine_rate), ("B", bandwidth_bps), ("W", message_bits)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(RateError::Config(format!("{name} must be positive and finite, got {v}")));
        }
    }
    Ok(engine_rate.min(bandwidth_bps / message_bits))
}

/// Inputs of the probability model for one timing window.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RateParams {
    /// `V`, grants per second.
    pub token_rate: f64,
    /// `N`, flows seen in the last window.
    pub flows: f64,
    /// `Q`, aggregate packets per second in the last window.
    pub pkt_rate: f64,
}

impl RateParams {
    pub fn new(token_rate: f64, flows: f64, pkt_rate: f64) -> Self {
        Self { token_rate, flows, pkt_rate }
    }

    /// Parameters with `V` derived from the engine and channel budget.
    pub fn from_budget(
        engine_rate: f64,
        bandwidth_bps: f64,
        message_bits: f64,
        flows: f64,
        pkt_rate: f64,
    ) -> Result<Self, RateError> {
        Ok(Self::new(compute_rate(engine_rate, bandwidth_bps, message_bits)?, flows, pkt_rate))
    }

    /// Equal-share interval `N/V` in seconds.
    pub fn fair_interval(&self) -> f64 {
        self.flows / self.token_rate
    }

    fn check(&self) -> Result<(), RateError> {
        if !(self.flows >= 1.0 && self.pkt_rate > 0.0 && self.token_rate > 0.0)
            || !(self.flows.is_finite() && self.pkt_rate.is_finite() && self.token_rate.is_finite())
        {
            return Err(RateError::Domain(format!(
                "need N >= 1, Q > 0, V > 0; got N={}, Q={}, V={}",
                self.flows, self.pkt_rate, self.token_rate
            )));
        }
        Ok(())
    }
}

/// Transmission probability for a flow with backlog age `t_i` seconds and
/// backlog count `c_i` packets, clamped to `[0, 1]`.
pub fn evaluate_probability(t_i: f64, c_i: f64, p: &RateParams) -> Result<f64, RateError> {
    p.check()?;
    if !(t_i > 0.0 && t_i.is_finite() && c_i > 0.0 && c_i.is_finite()) {
        return Err(RateError::Domain(format!("need T_i > 0 and C_i > 0; got T_i={t_i}, C_i={c_i}")));
    }
    let (v, n, q) = (p.token_rate, p.flows, p.pkt_rate);
    let qt = q * t_i;
    let nc = n * c_i;
    let raw = if qt == nc {
        // ramp collapses to a step at N/V
        if v * t_i >= n {
            1.0
        } else {
            0.0
        }
    } else if nc < qt {
        // N/V < Q T_i / (C_i V): ramp from N/V up to Q/(Q_i V)
        c_i * v.mul_add(t_i, -n) / q.mul_add(t_i, -nc)
    } else {
        // Q/(Q_i V) < N/V
        t_i * v.mul_add(c_i, -q) / n.mul_add(c_i, -qt)
    };
    Ok(raw.clamp(0.0, 1.0))
}

/// Closed-form expected grant interval of a flow with rate `flow_rate`
/// (packets per second), in seconds.
pub fn expected_grant_interval(flow_rate: f64, p: &RateParams) -> Result<f64, RateError> {
    if !(flow_rate > 0.0 && flow_rate.is_finite()) {
        return Err(RateError::Domain(format!("flow rate must be positive, got {flow_rate}")));
    }
    Ok((flow_rate * p.flows + p.pkt_rate) / (2.0 * flow_rate * p.token_rate))
}

/// Uniform `t_bins × c_bins` discretization of [`evaluate_probability`].
///
/// Cell `(i, j)` holds the exact probability at the centre of time bin `i`
/// and count bin `j`; queries map to the bin that contains them, clamped at
/// the range edges.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ProbabilityTable {
    t_bins: usize,
    c_bins: usize,
    t_max: f64,
    c_max: f64,
    cells: Vec<f64>,
    params: RateParams,
}

impl ProbabilityTable {
    pub const DEFAULT_BINS: usize = 64;

    /// Default ranges: `t_max = 8 N/V` seconds and `c_max = 8 Q/V` packets,
    /// i.e. eight times the fair interval and the packets an average flow
    /// sends in it.
    pub fn default_ranges(p: &RateParams) -> (f64, f64) {
        (8.0 * p.flows / p.token_rate, 8.0 * p.pkt_rate / p.token_rate)
    }

    pub fn build(p: RateParams, t_bins: usize, c_bins: usize, t_max: f64, c_max: f64) -> Result<Self, RateError> {
        if t_bins == 0 || c_bins == 0 {
            return Err(RateError::Config("table needs at least one bin per axis".into()));
        }
        if !(t_max > 0.0 && t_max.is_finite() && c_max > 0.0 && c_max.is_finite()) {
            return Err(RateError::Config(format!("table ranges must be positive, got t_max={t_max}, c_max={c_max}")));
        }
        let mut table = Self { t_bins, c_bins, t_max, c_max, cells: Vec::with_capacity(t_bins * c_bins), params: p };
        for i in 0..t_bins {
            for j in 0..c_bins {
                let (t, c) = table.center(i, j);
                table.cells.push(evaluate_probability(t, c, &p)?);
            }
        }
        Ok(table)
    }

    /// Table with the default bin counts and ranges.
    pub fn with_defaults(p: RateParams) -> Result<Self, RateError> {
        let (t_max, c_max) = Self::default_ranges(&p);
        Self::build(p, Self::DEFAULT_BINS, Self::DEFAULT_BINS, t_max, c_max)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.t_bins, self.c_bins)
    }

    pub fn ranges(&self) -> (f64, f64) {
        (self.t_max, self.c_max)
    }

    pub fn params(&self) -> &RateParams {
        &self.params
    }

    /// `(T seconds, C packets)` at the centre of cell `(i, j)`.
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (i as f64 + 0.5) * self.t_max / self.t_bins as f64,
            (j as f64 + 0.5) * self.c_max / self.c_bins as f64,
        )
    }

    pub fn cell(&self, i: usize, j: usize) -> f64 {
        self.cells[i * self.c_bins + j]
    }

    fn bin(x: f64, max: f64, bins: usize) -> usize {
        let k = (x / max * bins as f64).floor();
        if k.is_nan() || k < 0.0 {
            0
        } else {
            (k as usize).min(bins - 1)
        }
    }

    /// Probability for backlog age `t_i` seconds and backlog count `c_i`.
    pub fn lookup(&self, t_i: f64, c_i: f64) -> f64 {
        let i = Self::bin(t_i, self.t_max, self.t_bins);
        let j = Self::bin(c_i, self.c_max, self.c_bins);
        self.cell(i, j)
    }

    /// CSV rows `t_bin_center_s,c_bin_center,probability`, time-major.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t_bin_center_s,c_bin_center,probability")?;
        for i in 0..self.t_bins {
            for j in 0..self.c_bins {
                let (t, c) = self.center(i, j);
                writeln!(w, "{t:e},{c:e},{}", self.cell(i, j))?;
            }
        }
        Ok(())
    }
}

/// Token bucket gating feature transmissions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBucket {
    /// Current tokens.
    pub bucket: f64,
    pub cap: f64,
    /// Tokens consumed per grant.
    pub cost: f64,
    /// Grants per second; refill is `gap_seconds * rate * cost` tokens.
    pub rate: f64,
    /// Arrival time of the previous packet; `None` before the first one.
    pub last_ns: Option<u64>,
}

impl TokenBucket {
    /// A full bucket holding `cap_grants` grants.
    pub fn new(rate: f64, cap_grants: f64, cost: f64) -> Result<Self, RateError> {
        if !(rate > 0.0 && cap_grants > 0.0 && cost > 0.0) {
            return Err(RateError::Config("token rate, capacity and cost must be positive".into()));
        }
        let cap = cap_grants * cost;
        Ok(Self { bucket: cap, cap, cost, rate, last_ns: None })
    }

    /// One packet arrival. Refills by the elapsed gap (none on the first
    /// packet), then grants if `rand_u < prob` and a full `cost` is available.
    pub fn step(&mut self, now_ns: u64, prob: f64, rand_u: f64) -> Result<bool, RateError> {
        let gap_ns = match self.last_ns {
            None => 0,
            Some(last) if now_ns < last => return Err(RateError::Clock { now_ns, last_ns: last }),
            Some(last) => now_ns - last,
        };
        self.last_ns = Some(now_ns);
        if gap_ns > 0 {
            let refill = gap_ns as f64 * 1e-9 * self.rate * self.cost;
            self.bucket = (self.bucket + refill).min(self.cap);
        }
        if rand_u < prob && self.bucket >= self.cost {
            self.bucket -= self.cost;
            return Ok(true);
        }
        Ok(false)
    }
}
