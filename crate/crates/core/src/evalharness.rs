//! ID / NOOD / FOOD evaluation, weight-distribution diagnostics and report
//! rendering.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::data::{load_task, DataConfig};
use crate::error::{Error, Result};
use crate::net;
use crate::sampler::condition_batchnorm;

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Id,
    Nood,
    Food,
}

impl Group {
    pub fn label(&self) -> &'static str {
        match self {
            Group::Id => "ID",
            Group::Nood => "NOOD",
            Group::Food => "FOOD",
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
pub struct TaskSuite {
    pub id_tasks: Vec<String>,
    pub nood_tasks: Vec<String>,
    pub food_tasks: Vec<String>,
}

fn tags(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl TaskSuite {
    /// Residual-network track.
    pub fn resnet_track() -> Self {
        TaskSuite {
            id_tasks: tags(&["CIFAR10", "CIFAR100"]),
            nood_tasks: tags(&["TIN"]),
            food_tasks: tags(&["SVHN", "EuroSAT"]),
        }
    }

    /// Small-CNN track.
    pub fn cnn_track() -> Self {
        TaskSuite {
            id_tasks: tags(&["MNIST", "SVHN"]),
            nood_tasks: tags(&["USPS"]),
            food_tasks: tags(&["FMNIST"]),
        }
    }

    /// Small-CNN track over the built-in procedural datasets.
    pub fn synthetic() -> Self {
        TaskSuite {
            id_tasks: tags(&["synth-mnist", "synth-svhn"]),
            nood_tasks: tags(&["synth-usps"]),
            food_tasks: tags(&["synth-fmnist"]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (t, g) in self.tasks() {
            if let Some(prev) = seen.insert(t.to_string(), g) {
                return Err(Error::Config(format!(
                    "task {t} listed under both {} and {}",
                    prev.label(),
                    g.label()
                )));
            }
        }
        Ok(())
    }

    /// Tasks in report order: ID, NOOD, FOOD.
    pub fn tasks(&self) -> impl Iterator<Item = (&str, Group)> {
        self.id_tasks
            .iter()
            .map(|t| (t.as_str(), Group::Id))
            .chain(self.nood_tasks.iter().map(|t| (t.as_str(), Group::Nood)))
            .chain(self.food_tasks.iter().map(|t| (t.as_str(), Group::Food)))
    }
}

/// Accuracy of one task in percent.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct TaskResult {
    pub tag: String,
    pub group: Group,
    pub mean: f64,
    pub std: f64,
    pub n_models: usize,
    /// Reason the task was not evaluated, if it was skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
pub struct EvalReport {
    pub tasks: Vec<TaskResult>,
    pub groups: BTreeMap<Group, MeanStd>,
    pub avg: Option<MeanStd>,
    pub provenance: BTreeMap<String, String>,
}

fn average(v: &[&TaskResult]) -> Option<MeanStd> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    Some(MeanStd {
        mean: v.iter().map(|t| t.mean).sum::<f64>() / n,
        std: v.iter().map(|t| t.std).sum::<f64>() / n,
    })
}

impl EvalReport {
    /// Builds a report from per-task results; group and overall averages are
    /// the arithmetic means of the evaluated tasks' means and stds.
    pub fn from_tasks(tasks: Vec<TaskResult>, provenance: BTreeMap<String, String>) -> Self {
        let mut r = EvalReport {
            tasks,
            groups: BTreeMap::new(),
            avg: None,
            provenance,
        };
        r.recompute();
        r
    }

    pub fn recompute(&mut self) {
        let live: Vec<&TaskResult> = self.tasks.iter().filter(|t| t.skipped.is_none()).collect();
        self.groups = [Group::Id, Group::Nood, Group::Food]
            .into_iter()
            .filter_map(|g| {
                let v: Vec<&TaskResult> = live.iter().copied().filter(|t| t.group == g).collect();
                average(&v).map(|a| (g, a))
            })
            .collect();
        self.avg = average(&live);
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default)]
pub struct EvalOptions {
    pub data: DataConfig,
    /// Batches of each task's training split used for batch-norm conditioning.
    pub condition_batches: usize,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            data: DataConfig::default(),
            condition_batches: 8,
            batch_size: 64,
        }
    }
}

fn pct_mean_std(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().map(|&x| f64::from(x) * 100.0).sum::<f64>() / n;
    let var = v.iter().map(|&x| (f64::from(x) * 100.0 - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Conditions and evaluates every model on every task of `suite`. Task
/// inputs are adapted to the models' input shape; tasks whose class count
/// differs from the models' head width are reported as skipped.
pub fn evaluate_models(
    models: &[ModelCheckpoint],
    suite: &TaskSuite,
    data_root: Option<&Path>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    suite.validate()?;
    let first = models
        .first()
        .ok_or_else(|| Error::Config("no models to evaluate".into()))?;
    if let Some(m) = models.iter().find(|m| m.arch.arch_id != first.arch.arch_id) {
        return Err(Error::Validation(format!(
            "models mix architectures {} and {}",
            first.arch.arch_id, m.arch.arch_id
        )));
    }
    let head = first.arch.output_dim();
    let mut tasks = Vec::new();
    for (tag, group) in suite.tasks() {
        let raw = load_task(data_root, tag, &opts.data)?;
        if head != Some(raw.classes()) {
            tasks.push(TaskResult {
                tag: tag.to_string(),
                group,
                mean: 0.0,
                std: 0.0,
                n_models: 0,
                skipped: Some(format!("task has {} classes, head has {:?}", raw.classes(), head)),
            });
            continue;
        }
        let data = raw.adapt(first.arch.input_shape)?;
        let mut accs = Vec::with_capacity(models.len());
        for m in models {
            let c = condition_batchnorm(m, &data.train, opts.condition_batches, opts.batch_size)?;
            accs.push(net::checkpoint_accuracy(&c, &data.test)?);
        }
        let (mean, std) = pct_mean_std(&accs);
        tasks.push(TaskResult {
            tag: tag.to_string(),
            group,
            mean,
            std,
            n_models: models.len(),
            skipped: None,
        });
    }
    Ok(EvalReport::from_tasks(tasks, BTreeMap::new()))
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Text,
    Json,
}

fn cell(m: f64, s: f64) -> String {
    format!("{m:.1}±{s:.1}")
}

/// Renders the report. Text: a header line, then one row of `mean±std`
/// cells in suite order followed by AVG; skipped tasks show `-`.
/// JSON: the full report, readable by [`parse_report`].
pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("serializable"),
        ReportFormat::Text => {
            let mut header: Vec<String> = report
                .tasks
                .iter()
                .map(|t| format!("{} ({})", t.tag, t.group.label()))
                .collect();
            header.push("AVG".into());
            let mut out = header.join(" | ");
            out.push('\n');
            if report.tasks.is_empty() {
                return out;
            }
            out.push_str(&render_row(report));
            out.push('\n');
            out
        }
    }
}

/// The value row of the text table.
pub fn render_row(report: &EvalReport) -> String {
    let mut cells: Vec<String> = report
        .tasks
        .iter()
        .map(|t| match t.skipped {
            Some(_) => "-".to_string(),
            None => cell(t.mean, t.std),
        })
        .collect();
    cells.push(report.avg.map_or("-".to_string(), |a| cell(a.mean, a.std)));
    cells.join(" | ")
}

pub fn parse_report(json: &str) -> Result<EvalReport> {
    let de = &mut serde_json::Deserializer::from_str(json);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f32], b: &[f32]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f32::total_cmp);
    y.sort_by(f32::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = if x[i] <= y[j] { x[i] } else { y[j] };
        while i < x.len() && x[i] == v {
            i += 1;
        }
        while j < y.len() && y[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f32,
    pub hi: f32,
    pub original: Vec<usize>,
    pub reconstructed: Vec<usize>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct LayerDiagnostic {
    pub layer: String,
    pub mean_diff: f64,
    pub std_ratio: f64,
    pub ks: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Histogram>,
}

fn moments(v: &[f32]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = v.iter().map(|&x| (f64::from(x) - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn histogram(a: &[f32], b: &[f32], bins: usize) -> Histogram {
    let lo = a.iter().chain(b).copied().fold(f32::INFINITY, f32::min);
    let hi = a.iter().chain(b).copied().fold(f32::NEG_INFINITY, f32::max);
    let count = |v: &[f32]| {
        let mut h = vec![0usize; bins];
        for &x in v {
            let t = if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
            h[((t * bins as f32) as usize).min(bins - 1)] += 1;
        }
        h
    };
    Histogram {
        lo,
        hi,
        original: count(a),
        reconstructed: count(b),
    }
}

/// Per-layer comparison of pooled weights across paired model lists.
pub fn distribution_diagnostics(
    originals: &[ModelCheckpoint],
    reconstructions: &[ModelCheckpoint],
    bins: Option<usize>,
) -> Result<Vec<LayerDiagnostic>> {
    if originals.len() != reconstructions.len() || originals.is_empty() {
        return Err(Error::Validation(format!(
            "need equally many originals and reconstructions, got {} and {}",
            originals.len(),
            reconstructions.len()
        )));
    }
    for (o, r) in originals.iter().zip(reconstructions) {
        if o.arch.arch_id != r.arch.arch_id || o.arch.arch_id != originals[0].arch.arch_id {
            return Err(Error::Validation("paired models must share one architecture".into()));
        }
    }
    let mut out = Vec::new();
    for spec in &originals[0].arch.layers {
        let pool = |ms: &[ModelCheckpoint]| -> Vec<f32> {
            ms.iter().flat_map(|m| m.tensors[&spec.name].iter().copied()).collect()
        };
        let a = pool(originals);
        let b = pool(reconstructions);
        let (ma, sa) = moments(&a);
        let (mb, sb) = moments(&b);
        let std_ratio = if sa == 0.0 && sb == 0.0 { 1.0 } else { sb / sa };
        out.push(LayerDiagnostic {
            layer: spec.name.clone(),
            mean_diff: (mb - ma).abs(),
            std_ratio,
            ks: ks_statistic(&a, &b),
            histogram: bins.filter(|&n| n > 0).map(|n| histogram(&a, &b, n)),
        });
    }
    Ok(out)
}

/// Mean over layers of `|ln(std_recon / std_orig)|`.
pub fn mean_abs_log_std_ratio(diags: &[LayerDiagnostic]) -> f64 {
    if diags.is_empty() {
        return 0.0;
    }
    diags.iter().map(|d| d.std_ratio.ln().abs()).sum::<f64>() / diags.len() as f64
}
