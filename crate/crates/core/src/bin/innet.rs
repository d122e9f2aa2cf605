use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use innet::buffer::WireFeature;
use innet::quant::{quantize_model, FloatModel, QuantizedModel};
use innet::rate::{ProbabilityTable, RateParams};
use innet::reference;
use innet::sim::{run, Metrics, Mode, Pipeline, SimConfig};
use innet::trace::{extract_feature, generate_synthetic, load_trace, write_trace, FiveTuple, TrafficSpec};

#[derive(Parser)]
#[command(name = "innet", version, about = "In-network inference pipeline simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fenix,
    ControlPlane,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReferenceArg {
    Cnn,
    Rnn,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a trace through the pipeline and write metrics JSON.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Quantized model file; defaults to the reference CNN.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Fallback tree JSON; defaults to the reference band tree.
        #[arg(long)]
        tree: Option<PathBuf>,
    },
    /// Generate a synthetic JSONL trace from a traffic spec.
    GenTrace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Quantize a float model to the binary model format.
    Quantize {
        /// Float model JSON.
        #[arg(long, conflicts_with = "reference", required_unless_present = "reference")]
        model: Option<PathBuf>,
        /// Use a built-in reference model instead of `--model`.
        #[arg(long, value_enum)]
        reference: Option<ReferenceArg>,
        /// JSONL trace whose per-flow feature windows calibrate activation
        /// scales; required with `--model`.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the probability lookup table as CSV.
    TableDump {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Flow count N; defaults to the config's initial window.
        #[arg(long)]
        flows: Option<f64>,
        /// Packet rate Q; defaults to the config's initial window.
        #[arg(long)]
        pkt_rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render per-class, latency, window and per-flow CSV tables from metrics JSON.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().with_context(|| format!("{} is not a file path", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<SimConfig> {
    match path {
        Some(p) => SimConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(SimConfig::default()),
    }
}

fn cmd_run(
    config: Option<PathBuf>,
    trace: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    mode: Option<ModeArg>,
    model: Option<PathBuf>,
    tree: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = match m {
            ModeArg::Fenix => Mode::Fenix,
            ModeArg::ControlPlane => Mode::ControlPlane,
        };
    }
    cfg.model = model.or(cfg.model);
    cfg.tree = tree.or(cfg.tree);
    let pipeline = Pipeline::load(&cfg)?;
    let packets = load_trace(&trace).with_context(|| format!("trace {}", trace.display()))?;
    let metrics = run(&cfg, &pipeline, &packets)?;
    let mut json = serde_json::to_vec_pretty(&metrics)?;
    json.push(b'\n');
    write_atomic(&out, &json)
}

fn cmd_gen_trace(config: PathBuf, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(&config).with_context(|| format!("spec {}", config.display()))?;
    let mut spec: TrafficSpec = serde_json::from_str(&text).with_context(|| format!("spec {}", config.display()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let records = generate_synthetic(&spec)?;
    let mut buf = Vec::new();
    write_trace(&mut buf, &records)?;
    write_atomic(&out, &buf)
}

/// Every packet's window of its flow's most recent `seq_len` features.
fn calibration_windows(path: &Path, seq_len: usize) -> Result<Vec<Vec<WireFeature>>> {
    let packets = load_trace(path).with_context(|| format!("calibration trace {}", path.display()))?;
    let mut flows: HashMap<FiveTuple, (u64, Vec<WireFeature>)> = HashMap::new();
    let mut out = Vec::with_capacity(packets.len());
    for p in &packets {
        let prev = flows.get(&p.five_tuple).map(|(ts, _)| *ts);
        let fv = extract_feature(p, prev)?;
        let (ts, hist) = flows.entry(p.five_tuple).or_insert((p.ts_ns, Vec::new()));
        *ts = p.ts_ns;
        hist.push(fv.into());
        out.push(hist[hist.len().saturating_sub(seq_len)..].to_vec());
    }
    if out.is_empty() {
        bail!("calibration trace {} is empty", path.display());
    }
    Ok(out)
}

fn cmd_quantize(model: Option<PathBuf>, reference_model: Option<ReferenceArg>, calib: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let bands = reference::default_bands();
    let float = match (&model, reference_model) {
        (Some(p), _) => FloatModel::load(p).with_context(|| format!("model {}", p.display()))?,
        (None, Some(ReferenceArg::Cnn)) => reference::reference_cnn(&bands),
        (None, Some(ReferenceArg::Rnn)) => reference::reference_rnn(&bands),
        (None, None) => bail!("one of --model or --reference is required"),
    };
    let windows = match (&calib, &model) {
        (Some(c), _) => calibration_windows(c, float.input.seq_len as usize)?,
        (None, None) => reference::calibration_set(&bands),
        (None, Some(_)) => bail!("--calib is required with --model"),
    };
    let q: QuantizedModel = quantize_model(&float, &windows)?;
    write_atomic(&out, &q.to_bytes())
}

fn cmd_table_dump(config: Option<PathBuf>, flows: Option<f64>, pkt_rate: Option<f64>, out: PathBuf) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let init = cfg.initial_window;
    let (Some(n), Some(q)) = (flows.or(init.map(|w| w.flows)), pkt_rate.or(init.map(|w| w.pkt_rate))) else {
        bail!("table-dump needs N and Q: pass --flows and --pkt-rate or set initial_window in the config");
    };
    let p = RateParams::new(cfg.token_rate()?, n, q);
    let (t_max, c_max) = ProbabilityTable::default_ranges(&p);
    let table = ProbabilityTable::build(p, cfg.table.t_bins, cfg.table.c_bins, t_max, c_max)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    write_atomic(&out, &buf)
}

fn cmd_report(metrics: PathBuf, out: PathBuf) -> Result<()> {
    let text = fs::read_to_string(&metrics).with_context(|| format!("metrics {}", metrics.display()))?;
    let m: Metrics = serde_json::from_str(&text).with_context(|| format!("metrics {}", metrics.display()))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut classes = Vec::new();
    m.write_class_csv(&mut classes)?;
    write_atomic(&out.join("classes.csv"), &classes)?;
    let mut latency = Vec::new();
    m.write_latency_csv(&mut latency)?;
    write_atomic(&out.join("latency.csv"), &latency)?;
    let mut windows = String::from("start_ns,flows,pkt_rate\n");
    for w in &m.windows {
        windows += &format!("{},{},{}\n", w.start_ns, w.flows, w.pkt_rate);
    }
    write_atomic(&out.join("windows.csv"), windows.as_bytes())?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut flows = String::from("five_tuple,label,predicted,packets,grants,mean_grant_interval_ns\n");
    for f in &m.flow_grants {
        flows += &format!(
            "{},{},{},{},{},{}\n",
            f.five_tuple,
            opt(f.label.map(|v| v.to_string())),
            opt(f.predicted.map(|v| v.to_string())),
            f.packets,
            f.grants,
            opt(f.mean_grant_interval_ns.map(|v| v.to_string()))
        );
    }
    write_atomic(&out.join("flows.csv"), flows.as_bytes())?;
    let summary = format!(
        "packets {}\nflows {}\ngrants {} ({:.4} of packets, {:.1}/s)\ndrops {}\npacket macro-F1 {}\nflow macro-F1 {}\n",
        m.packets,
        m.flows,
        m.grants,
        m.grant_fraction,
        m.grant_rate,
        m.drops,
        m.packet_macro_f1.map_or("n/a".into(), |f| format!("{f:.4}")),
        m.flow_macro_f1.map_or("n/a".into(), |f| format!("{f:.4}")),
    );
    print!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.cmd {
        Command::Run { config, trace, out, seed, mode, model, tree } => cmd_run(config, trace, out, seed, mode, model, tree),
        Command::GenTrace { config, out, seed } => cmd_gen_trace(config, out, seed),
        Command::Quantize { model, reference, calib, out } => cmd_quantize(model, reference, calib, out),
        Command::TableDump { config, flows, pkt_rate, out } => cmd_table_dump(config, flows, pkt_rate, out),
        Command::Report { metrics, out } => cmd_report(metrics, out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
