//! Run single scenarios and penetration × volume sweeps, writing CSV and
//! JSON results.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use merge_core::engine::{run, ConfigError, SimConfig, SimLog};
use merge_core::metrics::{safety_audit, RunMetrics, SafetyReport};
use merge_core::rng::{mix, Purpose};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("{path}: {source}")]
    Invalid { path: PathBuf, source: ConfigError },
    #[error("invalid `{field}`: {reason}")]
    Spec { field: &'static str, reason: String },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

impl CliError {
    /// Name of the offending configuration field, when there is one.
    pub fn field(&self) -> Option<&str> {
        match self {
            CliError::Parse { field, .. } => Some(field),
            CliError::Invalid { source, .. } => Some(&source.field),
            CliError::Spec { field, .. } => Some(field),
            _ => None,
        }
    }
}

/// Reads and validates a configuration document.
pub fn load_config(path: &Path) -> Result<SimConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let cfg: SimConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        CliError::Parse {
            path: path.to_path_buf(),
            field: if field == "." { "<root>".into() } else { field },
            message: e.into_inner().to_string(),
        }
    })?;
    cfg.validate().map_err(|source| CliError::Invalid {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(cfg)
}

/// Formats a float with 9 significant digits, dropping trailing zeros.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, e) = sci.split_once('e').expect("exponent form");
    let exp: i32 = e.parse().expect("integer exponent");
    if !(-5..15).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mantissa));
    }
    // the shortest representation of the rounded value has at most 9 digits
    let rounded: f64 = sci.parse().expect("float");
    rounded.to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    csv::Writer::from_path(path).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let wrap = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_trajectories(log: &SimLog, path: &Path) -> Result<(), CliError> {
    let header = ["t", "id", "class", "road", "p", "v", "u", "plan_epoch", "replanned"];
    let rows = log.records.iter().map(|r| {
        vec![
            fmt_sig(r.t),
            r.id.to_string(),
            r.class.as_str().into(),
            r.road.as_str().into(),
            fmt_sig(r.p),
            fmt_sig(r.v),
            fmt_sig(r.u),
            r.plan_epoch.to_string(),
            u8::from(r.replanned).to_string(),
        ]
    });
    write_rows(path, &header, rows)
}

/// Engine events and audited violations, ordered by time.
pub fn write_events(log: &SimLog, audit: &SafetyReport, path: &Path) -> Result<(), CliError> {
    let join = |ids: &mut dyn Iterator<Item = String>| ids.collect::<Vec<_>>().join(";");
    let mut rows: Vec<(f64, Vec<String>)> = log
        .events
        .iter()
        .map(|e| {
            let row = vec![
                fmt_sig(e.t),
                e.kind.as_str().into(),
                join(&mut e.ids.iter().map(|i| i.to_string())),
                fmt_sig(e.magnitude),
                String::new(),
            ];
            (e.t, row)
        })
        .chain(audit.violations.iter().map(|v| {
            let row = vec![
                fmt_sig(v.t),
                v.kind.as_str().into(),
                format!("{};{}", v.ids.0, v.ids.1),
                fmt_sig(v.magnitude),
                fmt_sig(v.value),
            ];
            (v.t, row)
        }))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    write_rows(path, &["t", "kind", "ids", "magnitude", "value"], rows.into_iter().map(|(_, r)| r))
}

/// Rounds every float of a JSON document to 9 significant digits.
fn round_json(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("float");
            let r: f64 = fmt_sig(x).parse().expect("formatted float");
            *v = serde_json::json!(r);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_json),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

pub fn metrics_json(m: &RunMetrics) -> String {
    let mut v = serde_json::to_value(m).expect("metrics serialize");
    round_json(&mut v);
    serde_json::to_string_pretty(&v).expect("json value serializes") + "\n"
}

pub fn summary(m: &RunMetrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "vehicles        {} ({} CAV), exited {}", m.vehicles, m.cavs, m.exited);
    let _ = writeln!(s, "avg travel time {} s", opt(m.avg_travel_time));
    let _ = writeln!(s, "output flux     {} veh/h", opt(m.output_flux));
    let _ = writeln!(s, "mean energy     {} m²/s²", opt(m.mean_energy));
    let _ = writeln!(
        s,
        "replans {}, infeasible plans {}, deferred arrivals {}",
        m.replans, m.infeasible_plans, m.deferred_arrivals
    );
    let counts: Vec<_> = m.violations.iter().map(|(k, n)| format!("{k}={n}")).collect();
    let _ = write!(s, "violations      {}", counts.join(" "));
    s
}

/// Runs one scenario and writes trajectories.csv, metrics.json and
/// events.csv into `out`.
pub fn cmd_run(cfg: SimConfig, out: &Path) -> Result<RunMetrics, CliError> {
    let limits = cfg.limits;
    let log = run(cfg).map_err(|source| CliError::Invalid {
        path: PathBuf::from("<config>"),
        source,
    })?;
    let audit = safety_audit(&log, &limits);
    let metrics = RunMetrics::with_audit(&log, &limits, &audit);
    create_dir(out)?;
    write_trajectories(&log, &out.join("trajectories.csv"))?;
    write_events(&log, &audit, &out.join("events.csv"))?;
    let path = out.join("metrics.json");
    fs::write(&path, metrics_json(&metrics)).map_err(|source| CliError::Write { path, source })?;
    Ok(metrics)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub penetrations: Vec<f64>,
    pub volumes: Vec<f64>,
    pub replications: usize,
    pub base: SimConfig,
    pub out: PathBuf,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let spec = |field, reason: &str| CliError::Spec {
            field,
            reason: reason.into(),
        };
        if self.penetrations.is_empty() {
            return Err(spec("penetrations", "must not be empty"));
        }
        if self.volumes.is_empty() {
            return Err(spec("volumes", "must not be empty"));
        }
        if self.replications == 0 {
            return Err(spec("replications", "must be at least 1"));
        }
        Ok(())
    }

    /// Runs in row order: volume, then penetration, then replication.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut cells = Vec::new();
        for &volume in &self.volumes {
            for &penetration in &self.penetrations {
                for replication in 0..self.replications {
                    cells.push(SweepCell {
                        penetration,
                        volume,
                        replication,
                        seed: run_seed(self.base.seed, volume, replication),
                    });
                }
            }
        }
        cells
    }
}

/// Seed of one sweep run. It does not depend on the penetration, so every
/// penetration level of a replication sees the same arrivals.
pub fn run_seed(base: u64, volume: f64, replication: usize) -> u64 {
    mix(&[base, Purpose::Sweep as u64, volume.to_bits(), replication as u64])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub penetration: f64,
    pub volume: f64,
    pub replication: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub result: Result<RunMetrics, String>,
}

const SWEEP_HEADER: [&str; 16] = [
    "penetration",
    "volume",
    "replication",
    "seed",
    "status",
    "vehicles",
    "exited",
    "avg_travel_time",
    "output_flux",
    "mean_energy",
    "rear_end",
    "rear_end_below_d_min",
    "crossing",
    "crossing_below_half_t_min",
    "replans",
    "infeasible_plans",
];

fn sweep_record(row: &SweepRow) -> Vec<String> {
    let c = &row.cell;
    let mut rec = vec![
        fmt_sig(c.penetration),
        fmt_sig(c.volume),
        c.replication.to_string(),
        c.seed.to_string(),
    ];
    match &row.result {
        Ok(m) => {
            let v = |k: &str| m.violations.get(k).copied().unwrap_or(0).to_string();
            rec.extend([
                "ok".to_string(),
                m.vehicles.to_string(),
                m.exited.to_string(),
                opt(m.avg_travel_time),
                opt(m.output_flux),
                opt(m.mean_energy),
                v("rear_end"),
                v("rear_end_below_d_min"),
                v("crossing"),
                v("crossing_below_half_t_min"),
                m.replans.to_string(),
                m.infeasible_plans.to_string(),
            ]);
        }
        Err(e) => {
            rec.push(format!("error: {e}"));
            rec.extend(std::iter::repeat_n(String::new(), SWEEP_HEADER.len() - rec.len()));
        }
    }
    rec
}

/// Per-cell means over the successful replications.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMean {
    pub penetration: f64,
    pub volume: f64,
    pub runs: usize,
    pub failed: usize,
    pub avg_travel_time: Option<f64>,
    pub output_flux: Option<f64>,
    pub mean_energy: Option<f64>,
    pub rear_end_below_d_min: f64,
    pub crossing_below_half_t_min: f64,
    pub replans: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

pub fn aggregate(rows: &[SweepRow]) -> Vec<CellMean> {
    let mut out: Vec<CellMean> = Vec::new();
    for chunk in rows.chunk_by(|a, b| a.cell.penetration == b.cell.penetration && a.cell.volume == b.cell.volume) {
        let ok: Vec<&RunMetrics> = chunk.iter().filter_map(|r| r.result.as_ref().ok()).collect();
        let count = |k: &str| mean(ok.iter().map(|m| m.violations.get(k).copied().unwrap_or(0) as f64)).unwrap_or(0.0);
        out.push(CellMean {
            penetration: chunk[0].cell.penetration,
            volume: chunk[0].cell.volume,
            runs: ok.len(),
            failed: chunk.len() - ok.len(),
            avg_travel_time: mean(ok.iter().filter_map(|m| m.avg_travel_time)),
            output_flux: mean(ok.iter().filter_map(|m| m.output_flux)),
            mean_energy: mean(ok.iter().filter_map(|m| m.mean_energy)),
            rear_end_below_d_min: count("rear_end_below_d_min"),
            crossing_below_half_t_min: count("crossing_below_half_t_min"),
            replans: mean(ok.iter().map(|m| m.replans as f64)).unwrap_or(0.0),
        });
    }
    out
}

fn run_cell(base: &SimConfig, cell: SweepCell) -> Result<RunMetrics, String> {
    let cfg = SimConfig {
        penetration: cell.penetration,
        volume: cell.volume,
        seed: cell.seed,
        ..base.clone()
    };
    let limits = cfg.limits;
    match catch_unwind(AssertUnwindSafe(|| run(cfg))) {
        Ok(Ok(log)) => Ok(RunMetrics::from_log(&log, &limits)),
        Ok(Err(e)) => Err(e.to_string()),
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "run aborted".into())),
    }
}

/// Runs every cell of the sweep on `jobs` worker threads (machine
/// parallelism when `None`). Rows come back in cell order whatever the
/// scheduling.
pub fn run_sweep(spec: &SweepSpec, jobs: Option<usize>) -> Result<Vec<SweepRow>, CliError> {
    spec.validate()?;
    let cells = spec.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Spec {
            field: "jobs",
            reason: e.to_string(),
        })?;
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| SweepRow {
                cell,
                result: run_cell(&spec.base, cell),
            })
            .collect()
    }))
}

/// Runs the sweep and writes sweep.csv and aggregate.csv into `spec.out`.
pub fn cmd_sweep(spec: &SweepSpec, jobs: Option<usize>) -> Result<Vec<SweepRow>, CliError> {
    let rows = run_sweep(spec, jobs)?;
    create_dir(&spec.out)?;
    write_rows(&spec.out.join("sweep.csv"), &SWEEP_HEADER, rows.iter().map(sweep_record))?;
    let agg = aggregate(&rows);
    let header = [
        "penetration",
        "volume",
        "runs",
        "failed",
        "avg_travel_time",
        "output_flux",
        "mean_energy",
        "rear_end_below_d_min",
        "crossing_below_half_t_min",
        "replans",
    ];
    let recs = agg.iter().map(|c| {
        vec![
            fmt_sig(c.penetration),
            fmt_sig(c.volume),
            c.runs.to_string(),
            c.failed.to_string(),
            opt(c.avg_travel_time),
            opt(c.output_flux),
            opt(c.mean_energy),
            fmt_sig(c.rear_end_below_d_min),
            fmt_sig(c.crossing_below_half_t_min),
            fmt_sig(c.replans),
        ]
    });
    write_rows(&spec.out.join("aggregate.csv"), &header, recs)?;
    Ok(rows)
}
