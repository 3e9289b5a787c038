use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::eval::SessionResult;
use crate::error::{FlowerError, Result};
use crate::session::Method;
use crate::ClassId;

/// Six-decimal rendering used by every output file. Non-finite values become empty.
pub fn fmt6(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

fn raw6(v: f64) -> Box<RawValue> {
    let text = if v.is_finite() { format!("{v:.6}") } else { "null".to_string() };
    RawValue::from_string(text).expect("a formatted float is valid JSON")
}

pub fn ser_fixed6<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    raw6(*v).serialize(s)
}

pub fn ser_fixed6_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    v.map(raw6).serialize(s)
}

pub fn ser_fixed6_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    v.iter().map(|x| raw6(*x)).collect::<Vec<_>>().serialize(s)
}

pub fn ser_fixed6_map<S: Serializer>(m: &BTreeMap<ClassId, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        map.serialize_entry(k, &raw6(*v))?;
    }
    map.end()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: Method,
    pub seed: u64,
    pub error: String,
}

/// Per-method aggregate over the seeds that completed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub seeds: Vec<u64>,
    /// Mean accuracy per task across seeds; index 0 is the base task.
    #[serde(serialize_with = "ser_fixed6_vec")]
    pub session_means: Vec<f64>,
    /// Mean of `session_means`.
    #[serde(serialize_with = "ser_fixed6_opt")]
    pub avg: Option<f64>,
    /// `avg` minus the flower row's `avg`.
    #[serde(serialize_with = "ser_fixed6_opt")]
    pub gap: Option<f64>,
    /// Mean over tasks for each seed, in `seeds` order.
    #[serde(serialize_with = "ser_fixed6_vec")]
    pub seed_avgs: Vec<f64>,
}

impl MethodSummary {
    /// Standard error of the per-seed averages.
    pub fn standard_error(&self) -> Option<f64> {
        standard_error(&self.seed_avgs)
    }
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation over `√n`; needs at least two values.
pub fn standard_error(xs: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let m = mean(xs)?;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((var / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub results: Vec<SessionResult>,
    pub failures: Vec<CellFailure>,
    pub summaries: Vec<MethodSummary>,
}

pub fn run_id(config: &ExperimentConfig, methods: &[Method], seeds: &[u64]) -> String {
    let mut h = Sha256::new();
    h.update(config.to_toml().as_bytes());
    for m in methods {
        h.update(m.name().as_bytes());
        h.update([0]);
    }
    for s in seeds {
        h.update(s.to_le_bytes());
    }
    hex::encode(h.finalize())[..12].to_string()
}

impl ExperimentReport {
    /// Aggregates finished cells. Cells are given per `(method, seed)` in any order.
    pub fn assemble(
        config: ExperimentConfig,
        methods: Vec<Method>,
        seeds: Vec<u64>,
        cells: Vec<(Method, u64, std::result::Result<Vec<SessionResult>, String>)>,
    ) -> Self {
        let mut cells = cells;
        cells.sort_by_key(|(m, s, _)| {
            (methods.iter().position(|x| x == m).unwrap_or(usize::MAX), seeds.iter().position(|x| x == s).unwrap_or(usize::MAX))
        });
        let mut results = Vec::new();
        let mut failures = Vec::new();
        let mut per_method: BTreeMap<Method, Vec<(u64, Vec<f64>)>> = BTreeMap::new();
        for (method, seed, outcome) in cells {
            match outcome {
                Ok(rows) => {
                    per_method.entry(method).or_default().push((seed, rows.iter().map(|r| r.accuracy).collect()));
                    results.extend(rows);
                }
                Err(error) => failures.push(CellFailure { method, seed, error }),
            }
        }
        let mut summaries: Vec<MethodSummary> = methods
            .iter()
            .map(|&method| {
                let runs = per_method.remove(&method).unwrap_or_default();
                let tasks = runs.iter().map(|(_, a)| a.len()).min().unwrap_or(0);
                let session_means: Vec<f64> = (0..tasks)
                    .map(|k| runs.iter().map(|(_, a)| a[k]).sum::<f64>() / runs.len() as f64)
                    .collect();
                MethodSummary {
                    method,
                    seeds: runs.iter().map(|(s, _)| *s).collect(),
                    avg: mean(&session_means),
                    gap: None,
                    seed_avgs: runs.iter().map(|(_, a)| mean(&a[..tasks]).unwrap_or(f64::NAN)).collect(),
                    session_means,
                }
            })
            .collect();
        let reference = summaries.iter().find(|s| s.method == Method::Flower).and_then(|s| s.avg);
        for s in &mut summaries {
            s.gap = reference.zip(s.avg).map(|(r, a)| a - r);
        }
        Self { run_id: run_id(&config, &methods, &seeds), config, methods, seeds, results, failures, summaries }
    }

    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    /// Number of task columns in `accuracy.csv`.
    pub fn task_count(&self) -> usize {
        self.summaries.iter().map(|s| s.session_means.len()).max().unwrap_or(0)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> FlowerError {
    FlowerError::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, mut text: String) -> Result<()> {
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn csv_text(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| FlowerError::Io(std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(r).map_err(wrap)?;
    }
    let bytes = w.into_inner().map_err(|e| FlowerError::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn results_jsonl(results: &[SessionResult]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn accuracy_csv(report: &ExperimentReport) -> Result<String> {
    let k = report.task_count();
    let mut header = vec!["method".to_string()];
    header.extend((1..=k).map(|i| format!("s{i}")));
    header.push("avg".into());
    header.push("gap".into());
    let rows: Vec<Vec<String>> = report
        .summaries
        .iter()
        .map(|s| {
            let mut row = vec![s.method.name().to_string()];
            row.extend((0..k).map(|i| s.session_means.get(i).map_or(String::new(), |v| fmt6(*v))));
            row.push(s.avg.map_or(String::new(), fmt6));
            row.push(s.gap.map_or(String::new(), fmt6));
            row
        })
        .collect();
    csv_text(&header, &rows)
}

pub fn curves_csv(results: &[SessionResult]) -> Result<String> {
    let header: Vec<String> = ["method", "seed", "session", "accuracy"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| vec![r.method.name().to_string(), r.seed.to_string(), r.session.to_string(), fmt6(r.accuracy)])
        .collect();
    csv_text(&header, &rows)
}

fn timings_csv(results: &[SessionResult]) -> Result<String> {
    let header: Vec<String> = ["method", "seed", "session", "wall_time_s"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| vec![r.method.name().to_string(), r.seed.to_string(), r.session.to_string(), fmt6(r.wall_time_s)])
        .collect();
    csv_text(&header, &rows)
}

fn failures_csv(failures: &[CellFailure]) -> Result<String> {
    let header: Vec<String> = ["method", "seed", "error"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = failures
        .iter()
        .map(|f| vec![f.method.name().to_string(), f.seed.to_string(), f.error.clone()])
        .collect();
    csv_text(&header, &rows)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    run_id: &'a str,
    methods: Vec<&'static str>,
    seeds: &'a [u64],
    summaries: &'a [MethodSummary],
    failures: &'a [CellFailure],
}

/// Writes `results.jsonl`, `accuracy.csv`, `curves.csv`, `summary.json`,
/// `config.toml`, `failures.csv` and `timings.csv` into `dir`.
///
/// Everything except `timings.csv` is a pure function of the report.
pub fn emit_outputs(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let summary = SummaryFile {
        run_id: &report.run_id,
        methods: report.methods.iter().map(|m| m.name()).collect(),
        seeds: &report.seeds,
        summaries: &report.summaries,
        failures: &report.failures,
    };
    let files = [
        ("results.jsonl", results_jsonl(&report.results)?),
        ("accuracy.csv", accuracy_csv(report)?),
        ("curves.csv", curves_csv(&report.results)?),
        ("summary.json", serde_json::to_string_pretty(&summary)?),
        ("config.toml", report.config.to_toml()),
        ("failures.csv", failures_csv(&report.failures)?),
        ("timings.csv", timings_csv(&report.results)?),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        write_file(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

/// One row of a sensitivity sweep: first-task, final-task and average accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub method: Method,
    pub first: Option<f64>,
    pub last: Option<f64>,
    pub avg: Option<f64>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let header: Vec<String> = ["parameter", "value", "method", "session_1", "final", "avg"].map(String::from).to_vec();
    let opt = |v: Option<f64>| v.map_or(String::new(), fmt6);
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.parameter.clone(),
                r.value.to_string(),
                r.method.name().to_string(),
                opt(r.first),
                opt(r.last),
                opt(r.avg),
            ]
        })
        .collect();
    csv_text(&header, &rows)
}

pub fn write_sweep(rows: &[SweepRow], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("sweep.csv");
    write_file(&path, sweep_csv(rows)?)?;
    Ok(path)
}
