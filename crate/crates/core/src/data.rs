//! Synthetic few-shot streams and CSV feature ingestion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{FlowerError, Result};
use crate::rng::{substream, Module};
use crate::ClassId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub class: ClassId,
    pub split: Split,
}

/// Rows of `x` labelled by `labels`; never empty.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub labels: Vec<ClassId>,
}

impl LabeledBatch {
    pub fn new(x: Tensor, labels: Vec<ClassId>) -> Result<Self> {
        if x.rank() != 2 || x.rows() != labels.len() {
            return Err(FlowerError::Precondition(format!(
                "batch of shape {:?} with {} labels",
                x.shape(),
                labels.len()
            )));
        }
        Ok(Self { x, labels })
    }

    pub fn from_samples<'a, I: IntoIterator<Item = &'a LabeledSample>>(samples: I) -> Result<Self> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for s in samples {
            rows.push(s.features.as_slice());
            labels.push(s.class);
        }
        if rows.is_empty() {
            return Err(FlowerError::Precondition("empty batch".into()));
        }
        Self::new(Tensor::from_rows(&rows)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Distinct classes in ascending order.
    pub fn classes(&self) -> Vec<ClassId> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(self.x.select_rows(idx)?, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Rows whose label is in `classes`, or `None` if there are none.
    pub fn restrict(&self, classes: &[ClassId]) -> Result<Option<Self>> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        if idx.is_empty() {
            return Ok(None);
        }
        self.select(&idx).map(Some)
    }
}

/// A base task, the few-shot sessions that follow it and a held-out pool
/// covering every class.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub base: LabeledBatch,
    pub sessions: Vec<LabeledBatch>,
    pub test: LabeledBatch,
}

impl Stream {
    pub fn input_dim(&self) -> usize {
        self.base.dim()
    }

    pub fn total_classes(&self) -> usize {
        self.base.classes().len() + self.sessions.iter().map(|s| s.classes().len()).sum::<usize>()
    }

    /// Checks that no class appears in two tasks.
    pub fn validate_disjoint(&self) -> Result<()> {
        let mut seen: Vec<ClassId> = self.base.classes();
        for s in &self.sessions {
            let overlap: Vec<ClassId> = s.classes().into_iter().filter(|c| seen.contains(c)).collect();
            if !overlap.is_empty() {
                return Err(FlowerError::ClassOverlap(overlap));
            }
            seen.extend(s.classes());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub input_dim: usize,
    pub base_classes: usize,
    pub base_samples_per_class: usize,
    pub sessions: usize,
    pub ways: usize,
    pub shots: usize,
    pub test_per_class: usize,
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            base_classes: 10,
            base_samples_per_class: 100,
            sessions: 4,
            ways: 2,
            shots: 5,
            test_per_class: 50,
            cluster_spread: 0.25,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn total_classes(&self) -> usize {
        self.base_classes + self.ways * self.sessions
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlowerError::Precondition(m.into()));
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1");
        }
        if self.base_classes == 0 || self.base_samples_per_class == 0 {
            return bad("the base task needs at least one class with one sample");
        }
        if self.shots == 0 {
            return bad("shots must be at least 1");
        }
        if self.sessions > 0 && self.ways == 0 {
            return bad("ways must be at least 1");
        }
        if self.test_per_class == 0 {
            return bad("test_per_class must be at least 1");
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return bad("cluster_spread must be finite and non-negative");
        }
        Ok(())
    }
}

fn gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_sphere<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Class means on the unit sphere, samples Gaussian around them.
///
/// Each class draws from its own substream, so a class's samples do not
/// depend on how many classes precede it.
pub fn generate_stream(spec: &StreamSpec) -> Result<Stream> {
    spec.validate()?;
    let d = spec.input_dim;
    let draw = |class: usize, n: usize, which: u64| -> (Vec<f64>, Vec<Vec<f64>>) {
        let mean = unit_sphere(&mut substream(spec.seed, Module::Data, 0, class as u64), d);
        let mut rng = substream(spec.seed, Module::Data, which, class as u64);
        let rows = (0..n)
            .map(|_| {
                let noise = gaussian(&mut rng, d);
                mean.iter().zip(noise).map(|(m, e)| m + spec.cluster_spread * e).collect()
            })
            .collect();
        (mean, rows)
    };
    let build = |classes: std::ops::Range<usize>, n: usize, which: u64| -> Result<LabeledBatch> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in classes {
            let (_, r) = draw(c, n, which);
            labels.extend(std::iter::repeat_n(ClassId(c as u32), r.len()));
            rows.extend(r);
        }
        LabeledBatch::new(Tensor::from_rows(&rows)?, labels)
    };
    let b = spec.base_classes;
    let base = build(0..b, spec.base_samples_per_class, 1)?;
    let sessions = (0..spec.sessions)
        .map(|s| build(b + s * spec.ways..b + (s + 1) * spec.ways, spec.shots, 1))
        .collect::<Result<Vec<_>>>()?;
    let test = build(0..spec.total_classes(), spec.test_per_class, 2)?;
    Ok(Stream { base, sessions, test })
}

/// How a CSV of feature rows is split into tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    pub base_classes: usize,
    pub ways: usize,
    pub shots: usize,
    /// Share of each base class held out when the file has no `split` column.
    pub test_fraction: f64,
    /// File with one class id per line fixing the task order.
    pub class_order: Option<PathBuf>,
    pub seed: u64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { base_classes: 1, ways: 1, shots: 1, test_fraction: 0.2, class_order: None, seed: 0 }
    }
}

fn csv_err(line: u64, msg: impl Into<String>) -> FlowerError {
    FlowerError::Csv { line, msg: msg.into() }
}

/// Reads `f0,f1,...,label[,split]` rows. The header row is mandatory.
pub fn read_samples(path: &Path) -> Result<(Vec<LabeledSample>, bool)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_err(1, e.to_string()))?,
        None => return Err(csv_err(1, "empty file; a header row is required")),
    };
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let has_split = names.last() == Some(&"split");
    let n_feat = names.len() - 1 - has_split as usize;
    let header_ok = n_feat >= 1
        && names[n_feat] == "label"
        && names[..n_feat].iter().enumerate().all(|(i, n)| *n == format!("f{i}"));
    if !header_ok {
        return Err(csv_err(1, "header must be `f0,f1,...,label[,split]`"));
    }
    let mut samples = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() {
            return Err(csv_err(line, format!("expected {} fields, found {}", names.len(), rec.len())));
        }
        let mut features = Vec::with_capacity(n_feat);
        for (i, f) in rec.iter().take(n_feat).enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| csv_err(line, format!("feature f{i} is not numeric: `{f}`")))?;
            if !v.is_finite() {
                return Err(csv_err(line, format!("feature f{i} is not finite")));
            }
            features.push(v);
        }
        let label = rec[n_feat].trim();
        let class = label
            .parse::<u32>()
            .map_err(|_| csv_err(line, format!("label must be a non-negative integer, found `{label}`")))?;
        let split = if has_split {
            match rec[n_feat + 1].trim() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(csv_err(line, format!("split must be `train` or `test`, found `{other}`"))),
            }
        } else {
            Split::Train
        };
        samples.push(LabeledSample { features, class: ClassId(class), split });
    }
    if samples.is_empty() {
        return Err(csv_err(2, "no data rows"));
    }
    Ok((samples, has_split))
}

fn read_class_order(path: &Path) -> Result<Vec<ClassId>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<u32>()
                .map(ClassId)
                .map_err(|_| csv_err(i as u64 + 1, format!("class order entry `{}` is not a class id", l.trim())))
        })
        .collect()
}

/// Builds a stream from a CSV file of pre-extracted features.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Stream> {
    if schema.base_classes == 0 {
        return Err(FlowerError::Precondition("at least one base class is required".into()));
    }
    if schema.ways == 0 || schema.shots == 0 {
        return Err(FlowerError::Precondition("ways and shots must be at least 1".into()));
    }
    if !(schema.test_fraction > 0.0 && schema.test_fraction < 1.0) {
        return Err(FlowerError::Precondition("test_fraction must lie in (0, 1)".into()));
    }
    let (samples, has_split) = read_samples(path)?;
    let dim = samples[0].features.len();

    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.class).or_default().push(i);
    }
    let mut order: Vec<ClassId> = match &schema.class_order {
        Some(p) => {
            let order = read_class_order(p)?;
            let mut sorted = order.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != order.len() || sorted != by_class.keys().copied().collect::<Vec<_>>() {
                return Err(FlowerError::Precondition(
                    "class order file must list every class in the data exactly once".into(),
                ));
            }
            order
        }
        None => by_class.keys().copied().collect(),
    };
    let mut rng = substream(schema.seed, Module::Split, 0, 0);
    if schema.class_order.is_none() {
        order.shuffle(&mut rng);
    }
    let n = order.len();
    if n < schema.base_classes || (n - schema.base_classes) % schema.ways != 0 {
        return Err(FlowerError::Precondition(format!(
            "{n} classes cannot be split into {} base classes plus sessions of {} ways",
            schema.base_classes, schema.ways
        )));
    }
    for (c, idx) in &by_class {
        if idx.len() < schema.shots + 1 {
            return Err(FlowerError::Precondition(format!(
                "class {c} has {} samples; at least {} are needed",
                idx.len(),
                schema.shots + 1
            )));
        }
    }

    let mut train: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    let mut test: Vec<usize> = Vec::new();
    for (pos, c) in order.iter().enumerate() {
        let is_base = pos < schema.base_classes;
        let mut idx = by_class[c].clone();
        idx.shuffle(&mut rng);
        let (tr, te): (Vec<usize>, Vec<usize>) = if has_split {
            idx.iter().partition(|&&i| samples[i].split == Split::Train)
        } else {
            let n_test = if is_base {
                ((idx.len() as f64 * schema.test_fraction).round() as usize).clamp(1, idx.len() - 1)
            } else {
                idx.len() - schema.shots
            };
            let te = idx.split_off(idx.len() - n_test);
            (idx, te)
        };
        if te.is_empty() {
            return Err(FlowerError::Precondition(format!("class {c} has no test samples")));
        }
        let tr = if is_base { tr } else { tr.into_iter().take(schema.shots).collect() };
        if tr.is_empty() || (!is_base && tr.len() < schema.shots) {
            return Err(FlowerError::Precondition(format!("class {c} has too few training samples")));
        }
        train.insert(*c, tr);
        test.extend(te);
    }

    let batch = |classes: &[ClassId]| -> Result<LabeledBatch> {
        LabeledBatch::from_samples(classes.iter().flat_map(|c| train[c].iter().map(|&i| &samples[i])))
    };
    let base = batch(&order[..schema.base_classes])?;
    let sessions = order[schema.base_classes..]
        .chunks(schema.ways)
        .map(batch)
        .collect::<Result<Vec<_>>>()?;
    test.sort_unstable();
    let test = LabeledBatch::from_samples(test.iter().map(|&i| &samples[i]))?;
    debug_assert_eq!(test.dim(), dim);
    let stream = Stream { base, sessions, test };
    stream.validate_disjoint()?;
    Ok(stream)
}
