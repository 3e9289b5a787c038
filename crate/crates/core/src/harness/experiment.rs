use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{evaluate, SessionResult};
use super::report::{ExperimentReport, SweepRow};
use crate::ball::TransformModule;
use crate::error::{FlowerError, Result};
use crate::protonet::ProtoNet;
use crate::session::{run_base, run_stream, ContinualState, Method, RunnerConfig};

pub const THREADS_ENV: &str = "FLOWER_THREADS";

/// Runs `f` on a pool capped by `FLOWER_THREADS` when it is set.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| FlowerError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| FlowerError::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

/// One `(method, seed)` stream.
pub fn run_cell(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<Vec<SessionResult>> {
    let stream = cfg.stream_for(seed)?;
    run_stream(&stream, &cfg.runner(method), seed)
}

/// Every method on every seed. A failing cell is recorded in the report and
/// does not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig, methods: &[Method], seeds: &[u64]) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(FlowerError::Config("at least one seed is required".into()));
    }
    if methods.is_empty() {
        return Err(FlowerError::Config("at least one method is required".into()));
    }
    for m in methods {
        cfg.runner(*m).validate().map_err(|e| FlowerError::Config(e.to_string()))?;
    }
    let jobs: Vec<(Method, u64)> = methods.iter().flat_map(|m| seeds.iter().map(move |s| (*m, *s))).collect();
    let cells = with_pool(|| {
        jobs.par_iter()
            .map(|&(m, s)| (m, s, run_cell(cfg, m, s).map_err(|e| e.to_string())))
            .collect::<Vec<_>>()
    })?;
    Ok(ExperimentReport::assemble(cfg.clone(), methods.to_vec(), seeds.to_vec(), cells))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Half-width of the base-phase noise box.
    Bound,
    /// Noise trials per update.
    Trials,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Bound => "bound",
            SweepParam::Trials => "trials",
        }
    }

    /// Copy of `cfg` with the swept value applied.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut out = cfg.clone();
        match self {
            SweepParam::Bound => out.noise.bound = value,
            SweepParam::Trials => {
                if !(value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64) {
                    return Err(FlowerError::Config(format!("trials must be a positive integer, got {value}")));
                }
                out.noise.trials = value as usize;
            }
        }
        out.validate()?;
        Ok(out)
    }
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<(f64, ExperimentReport)>,
}

/// One full experiment per value of `param`.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64], methods: &[Method], seeds: &[u64]) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(FlowerError::Config("a sweep needs at least one value".into()));
    }
    let configs = values.iter().map(|&v| param.apply(cfg, v)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (&value, c) in values.iter().zip(&configs) {
        let report = run_experiment(c, methods, seeds)?;
        for s in &report.summaries {
            rows.push(SweepRow {
                parameter: param.name().into(),
                value,
                method: s.method,
                first: s.session_means.first().copied(),
                last: s.session_means.last().copied(),
                avg: s.avg,
            });
        }
        reports.push((value, report));
    }
    Ok(SweepOutcome { rows, reports })
}

/// A trained state on disk, enough to evaluate it later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub method: Method,
    pub seed: u64,
    pub runner: RunnerConfig,
    pub state: ContinualState,
}

impl StateFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(FlowerError::Io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FlowerError::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Evaluates the state on the held-out samples of the seen classes.
    pub fn evaluate(&self, cfg: &ExperimentConfig) -> Result<SessionResult> {
        let stream = cfg.stream_for(self.seed)?;
        let net = ProtoNet::new(self.runner.model.clone())?;
        evaluate(&net, &self.state, &stream.test, self.method, self.seed)
    }
}

/// Base phase only, per seed.
pub fn train_base_states(cfg: &ExperimentConfig, method: Method, seeds: &[u64]) -> Result<Vec<(u64, Result<StateFile>)>> {
    let runner = cfg.runner(method);
    runner.validate().map_err(|e| FlowerError::Config(e.to_string()))?;
    with_pool(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let run = || -> Result<StateFile> {
                    let stream = cfg.stream_for(seed)?;
                    let net = ProtoNet::new(runner.model.clone())?;
                    let state = run_base(&net, &TransformModule::new(), &stream.base, &runner, seed)?;
                    Ok(StateFile { method, seed, runner: runner.clone(), state })
                };
                (seed, run())
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StreamSpec;
    use crate::harness::report::results_jsonl;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.stream = StreamSpec { base_classes: 3, base_samples_per_class: 20, sessions: 2, test_per_class: 10, ..StreamSpec::default() };
        cfg.model.hidden = vec![8, 8];
        cfg.base.epochs = 3;
        cfg.base.batch_size = 20;
        cfg.session.epochs = 2;
        cfg.ball.transform_hidden = vec![8, 8];
        cfg
    }

    #[test]
    fn one_seed_one_method_gives_one_row_per_task() {
        let r = run_experiment(&small(), &[Method::Flower], &[7]).unwrap();
        assert_eq!(r.results.len(), 3);
        assert_eq!(r.results.iter().map(|x| x.session).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(r.summary(Method::Flower).unwrap().gap, Some(0.0));
    }

    #[test]
    fn mean_over_seeds_is_arithmetic_mean() {
        let cfg = small();
        let r = run_experiment(&cfg, &[Method::Finetune], &[1, 2, 3]).unwrap();
        let s = r.summary(Method::Finetune).unwrap();
        for (k, m) in s.session_means.iter().enumerate() {
            let runs: Vec<f64> = [1, 2, 3].iter().map(|&seed| run_cell(&cfg, Method::Finetune, seed).unwrap()[k].accuracy).collect();
            assert!((m - runs.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn failing_cells_are_recorded() {
        let mut cfg = small();
        cfg.base.schedule.initial = 1e200;
        let r = run_experiment(&cfg, &[Method::Flower, Method::BaselineProtoOnly], &[1]).unwrap();
        assert!(!r.failures.is_empty());
        assert!(r.failures.iter().all(|f| f.seed == 1));
    }

    #[test]
    fn single_value_sweep_equals_experiment() {
        let cfg = small();
        let out = sweep(&cfg, SweepParam::Bound, &[0.05], &[Method::Flower], &[2]).unwrap();
        let mut direct = cfg.clone();
        direct.noise.bound = 0.05;
        let r = run_experiment(&direct, &[Method::Flower], &[2]).unwrap();
        assert_eq!(results_jsonl(&out.reports[0].1.results).unwrap(), results_jsonl(&r.results).unwrap());
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].avg, r.summary(Method::Flower).unwrap().avg);
    }

    #[test]
    fn trials_must_be_whole() {
        assert!(SweepParam::Trials.apply(&small(), 1.5).is_err());
        assert!(SweepParam::Trials.apply(&small(), 0.0).is_err());
        assert_eq!(SweepParam::Trials.apply(&small(), 3.0).unwrap().noise.trials, 3);
    }

    #[test]
    fn state_file_round_trip() {
        let cfg = small();
        let states = train_base_states(&cfg, Method::Flower, &[4]).unwrap();
        let sf = states.into_iter().next().unwrap().1.unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        sf.save(&p).unwrap();
        let back = StateFile::load(&p).unwrap();
        assert_eq!(back, sf);
        let r = back.evaluate(&cfg).unwrap();
        let first = run_cell(&cfg, Method::Flower, 4).unwrap()[0].clone();
        assert_eq!(r.accuracy, first.accuracy);
    }
}
