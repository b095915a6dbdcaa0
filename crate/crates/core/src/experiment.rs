//! Experiment execution: full runs, parameter sweeps and plot tables.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::data::DataError;
use crate::orchestrator::{MetricsRow, SimError, Simulation, Termination, METRICS_COLUMNS};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema: {0}")]
    Schema(String),
}

impl ExperimentError {
    /// Process exit code: 1 for configuration problems, 2 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } | Self::Csv(_) => 2,
            Self::Sim(SimError::Data(DataError::Io(_))) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// In-memory result of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub events: Vec<Value>,
    pub termination: Termination,
}

fn header_event(cfg: &ExperimentConfig, label: &str) -> Value {
    let defaults: BTreeMap<&str, &str> = cfg
        .defaults_applied
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .collect();
    json!({
        "type": "run_header",
        "round": 0,
        "run": label,
        "variant": cfg.run.variant.to_string(),
        "seed": cfg.run.seed,
        "defaults_applied": defaults,
        "config": cfg.to_text(),
    })
}

/// Runs a configuration to termination, keeping the simulation for
/// inspection.
pub fn simulate_with_state(
    cfg: &ExperimentConfig,
    label: &str,
) -> Result<(RunOutput, Simulation), ExperimentError> {
    let mut sim = Simulation::from_config(cfg)?;
    sim.run_label = label.to_string();
    let mut rows = Vec::new();
    let mut events = vec![header_event(cfg, label)];
    let termination = loop {
        if let Some(t) = sim.termination() {
            break t;
        }
        let out = sim.run_round()?;
        events.extend(out.events);
        rows.push(out.metrics);
    };
    events.push(json!({
        "type": "termination",
        "round": sim.round,
        "reason": termination.to_string(),
        "cum_time_s": sim.cum_time,
    }));
    info!("{label}: stopped after {} rounds ({termination})", sim.round);
    Ok((
        RunOutput {
            rows,
            events,
            termination,
        },
        sim,
    ))
}

pub fn simulate(cfg: &ExperimentConfig, label: &str) -> Result<RunOutput, ExperimentError> {
    simulate_with_state(cfg, label).map(|(out, _)| out)
}

/// Serializes metrics rows, optionally prefixed with sweep columns.
pub fn metrics_csv(rows: &[MetricsRow], axis: Option<(&str, &[String])>) -> Result<Vec<u8>, ExperimentError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let mut header: Vec<&str> = Vec::new();
    if axis.is_some() {
        header.extend(["axis", "axis_value"]);
    }
    header.extend(METRICS_COLUMNS);
    w.write_record(&header)?;
    for (i, row) in rows.iter().enumerate() {
        let mut rec = Vec::with_capacity(header.len());
        if let Some((name, values)) = axis {
            rec.push(name.to_string());
            rec.push(values[i].clone());
        }
        rec.extend(row_fields(row));
        w.write_record(&rec)?;
    }
    w.into_inner()
        .map_err(|e| ExperimentError::Schema(format!("flushing metrics: {e}")))
}

fn row_fields(r: &MetricsRow) -> Vec<String> {
    vec![
        r.run.clone(),
        r.variant.clone(),
        r.seed.to_string(),
        r.labeled_fraction.to_string(),
        r.phi.to_string(),
        r.round.to_string(),
        r.cum_time_s.to_string(),
        r.round_time_s.to_string(),
        r.test_acc_min.to_string(),
        r.test_acc_mean.to_string(),
        r.test_acc_max.to_string(),
        r.labeling_acc_mean.map(|v| v.to_string()).unwrap_or_default(),
        r.injected_fraction.to_string(),
        r.labeling_latency_mean.to_string(),
        r.clusters.to_string(),
        r.objective.to_string(),
        r.drops.to_string(),
        r.mean_loss.to_string(),
    ]
}

pub fn events_jsonl(events: &[Value]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&e.to_string());
        s.push('\n');
    }
    s
}

fn resolve(out_dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out_dir.join(p)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub metrics_path: PathBuf,
    pub events_path: PathBuf,
    pub rounds: usize,
    pub termination: Termination,
    pub rows: Vec<MetricsRow>,
}

/// Runs the configured variant and writes the metrics CSV and event log
/// under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, ExperimentError> {
    run_labeled(cfg, out_dir, &cfg.run.variant.to_string())
}

fn run_labeled(cfg: &ExperimentConfig, out_dir: &Path, label: &str) -> Result<RunSummary, ExperimentError> {
    let out = simulate(cfg, label)?;
    let metrics_path = resolve(out_dir, &cfg.run.metrics);
    let events_path = resolve(out_dir, &cfg.run.events);
    write_atomic(&metrics_path, &metrics_csv(&out.rows, None)?)?;
    write_atomic(&events_path, events_jsonl(&out.events).as_bytes())?;
    Ok(RunSummary {
        metrics_path,
        events_path,
        rounds: out.rows.len(),
        termination: out.termination,
        rows: out.rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LabeledFraction,
    Phi,
    Seed,
}

impl FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "labeled_fraction" => Ok(Self::LabeledFraction),
            "phi" => Ok(Self::Phi),
            "seed" => Ok(Self::Seed),
            o => Err(format!("unknown axis `{o}` (labeled_fraction | phi | seed)")),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LabeledFraction => "labeled_fraction",
            Self::Phi => "phi",
            Self::Seed => "seed",
        })
    }
}

/// 64-bit FNV-1a of a string.
pub fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed of one sweep run. Seed sweeps use `base + fnv1a64(value)`; other
/// axes keep the base seed so runs differ only in the swept parameter.
pub fn sweep_seed(base: u64, axis: SweepAxis, value: &str) -> u64 {
    match axis {
        SweepAxis::Seed => base.wrapping_add(fnv1a64(value)),
        _ => base,
    }
}

/// Configuration of one sweep point.
pub fn sweep_point(cfg: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut c = cfg.clone();
    let key = match axis {
        SweepAxis::LabeledFraction => "data.labeled_fraction",
        SweepAxis::Phi => "ssl.phi",
        SweepAxis::Seed => "run.seed",
    };
    let bad = |msg: &str| ConfigError::Domain {
        key: key.into(),
        msg: format!("sweep value `{value}`: {msg}"),
    };
    match axis {
        SweepAxis::LabeledFraction => {
            let v: f64 = value.trim().parse().map_err(|_| bad("not a number"))?;
            if !(v > 0.0 && v <= 1.0) {
                return Err(bad("must be in (0, 1]"));
            }
            c.data.labeled_fraction = v;
        }
        SweepAxis::Phi => {
            let v: f64 = value.trim().parse().map_err(|_| bad("not a number"))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(bad("must be in [0, 1]"));
            }
            c.ssl.phi = v;
        }
        SweepAxis::Seed => {}
    }
    c.run.seed = sweep_seed(cfg.run.seed, axis, value.trim());
    Ok(c)
}

#[derive(Debug)]
pub struct SweepSummary {
    pub combined_path: PathBuf,
    pub runs: Vec<(String, Result<usize, String>)>,
}

impl SweepSummary {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|(_, r)| r.is_err()).count()
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// One run per value; each run writes its own files under
/// `out_dir/<axis>=<value>/` and all rows are combined into
/// `out_dir/sweep_metrics.csv` with leading `axis,axis_value` columns.
/// A failing run is reported and the remaining values still run.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    out_dir: &Path,
) -> Result<SweepSummary, ExperimentError> {
    let mut rows = Vec::new();
    let mut axis_values = Vec::new();
    let mut runs = Vec::new();
    for value in values {
        let label = format!("{axis}={}", value.trim());
        let result = sweep_point(cfg, axis, value)
            .map_err(ExperimentError::from)
            .and_then(|c| run_labeled(&c, &out_dir.join(sanitize(&label)), &label));
        match result {
            Ok(summary) => {
                runs.push((value.clone(), Ok(summary.rows.len())));
                axis_values.extend(std::iter::repeat_n(value.trim().to_string(), summary.rows.len()));
                rows.extend(summary.rows);
            }
            Err(e) => {
                warn!("{label}: {e}");
                runs.push((value.clone(), Err(e.to_string())));
            }
        }
    }
    let combined_path = out_dir.join("sweep_metrics.csv");
    write_atomic(&combined_path, &metrics_csv(&rows, Some((&axis.to_string(), &axis_values)))?)?;
    Ok(SweepSummary { combined_path, runs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    /// Final min/mean/max test accuracy per labeled fraction.
    Accuracy,
    /// Final mean labeling accuracy per threshold and labeled fraction.
    LabelingAccuracy,
    /// Final mean labeling latency per threshold and labeled fraction.
    LabelingLatency,
}

impl FromStr for Figure {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy" => Ok(Self::Accuracy),
            "labeling-accuracy" => Ok(Self::LabelingAccuracy),
            "labeling-latency" => Ok(Self::LabelingLatency),
            o => Err(format!(
                "unknown figure `{o}` (accuracy | labeling-accuracy | labeling-latency)"
            )),
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Accuracy => "accuracy",
            Self::LabelingAccuracy => "labeling-accuracy",
            Self::LabelingLatency => "labeling-latency",
        })
    }
}

impl Figure {
    fn group_columns(self) -> &'static [&'static str] {
        match self {
            Self::Accuracy => &["variant", "labeled_fraction"],
            _ => &["variant", "phi", "labeled_fraction"],
        }
    }

    fn value_columns(self) -> &'static [&'static str] {
        match self {
            Self::Accuracy => &["test_acc_min", "test_acc_mean", "test_acc_max"],
            Self::LabelingAccuracy => &["labeling_acc_mean"],
            Self::LabelingLatency => &["labeling_latency_mean"],
        }
    }
}

/// A plot-ready table: header plus rows of formatted cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl PlotTable {
    pub fn to_csv(&self) -> Result<Vec<u8>, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner()
            .map_err(|e| ExperimentError::Schema(format!("flushing table: {e}")))
    }
}

/// Aggregates the final row of every run (keyed by run, variant, seed,
/// labeled fraction and threshold) into one table row per group. Values are
/// means over runs; empty cells are skipped and a group with no values
/// yields an empty cell.
pub fn plot_table<R: Read>(metrics: R, figure: Figure) -> Result<PlotTable, ExperimentError> {
    let mut rdr = csv::Reader::from_reader(metrics);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ExperimentError::Schema(format!("metrics file lacks column `{name}`")))
    };
    let run_key: Vec<usize> = ["run", "variant", "seed", "labeled_fraction", "phi"]
        .iter()
        .map(|c| col(c))
        .collect::<Result<_, _>>()?;
    let round_col = col("round")?;
    let groups: Vec<usize> = figure.group_columns().iter().map(|c| col(c)).collect::<Result<_, _>>()?;
    let values: Vec<usize> = figure.value_columns().iter().map(|c| col(c)).collect::<Result<_, _>>()?;

    // last row (highest round) of each run
    let mut last: BTreeMap<Vec<String>, (u64, csv::StringRecord)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let key: Vec<String> = run_key.iter().map(|&i| rec[i].to_string()).collect();
        let round: u64 = rec[round_col]
            .parse()
            .map_err(|_| ExperimentError::Schema(format!("bad round `{}`", &rec[round_col])))?;
        if last.get(&key).is_none_or(|(r, _)| round >= *r) {
            last.insert(key, (round, rec));
        }
    }
    let mut agg: BTreeMap<Vec<String>, (usize, Vec<(f64, usize)>)> = BTreeMap::new();
    for (_, rec) in last.values() {
        let key: Vec<String> = groups.iter().map(|&i| rec[i].to_string()).collect();
        let e = agg.entry(key).or_insert_with(|| (0, vec![(0.0, 0); values.len()]));
        e.0 += 1;
        for (slot, &i) in e.1.iter_mut().zip(&values) {
            if rec[i].is_empty() {
                continue;
            }
            let v: f64 = rec[i]
                .parse()
                .map_err(|_| ExperimentError::Schema(format!("bad number `{}`", &rec[i])))?;
            slot.0 += v;
            slot.1 += 1;
        }
    }
    let mut rows: Vec<(Vec<String>, Vec<String>)> = agg
        .into_iter()
        .map(|(key, (runs, sums))| {
            let mut cells = vec![runs.to_string()];
            cells.extend(sums.iter().map(|&(s, n)| if n == 0 { String::new() } else { (s / n as f64).to_string() }));
            (key, cells)
        })
        .collect();
    rows.sort_by(|a, b| {
        a.0.iter().zip(&b.0).fold(std::cmp::Ordering::Equal, |acc, (x, y)| {
            acc.then_with(|| match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(p), Ok(q)) => p.total_cmp(&q),
                _ => x.cmp(y),
            })
        })
    });
    let mut header: Vec<String> = figure.group_columns().iter().map(|s| s.to_string()).collect();
    header.push("runs".into());
    header.extend(figure.value_columns().iter().map(|s| s.to_string()));
    Ok(PlotTable {
        header,
        rows: rows
            .into_iter()
            .map(|(mut k, cells)| {
                k.extend(cells);
                k
            })
            .collect(),
    })
}

/// Reads a metrics file and writes `out_dir/plot_<figure>.csv`.
pub fn emit_plot_data(metrics: &Path, figure: Figure, out_dir: &Path) -> Result<PathBuf, ExperimentError> {
    let f = fs::File::open(metrics).map_err(io_err(metrics))?;
    let table = plot_table(f, figure)?;
    let path = out_dir.join(format!("plot_{figure}.csv"));
    write_atomic(&path, &table.to_csv()?)?;
    Ok(path)
}
