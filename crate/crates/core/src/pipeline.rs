//! Declarative experiment pipelines: zoogen, train, sample, eval, soup and
//! report stages over a shared output directory, with hash-based resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::baselines::{soup_curve, SoupOptions};
use crate::checkpoint::ModelCheckpoint;
use crate::data::{load_task, DataConfig};
use crate::error::{Error, Result};
use crate::evalharness::{evaluate_models, parse_report, render_report, EvalOptions, ReportFormat, TaskSuite};
use crate::sampler::{pick_anchors, sample_models, LatentNoise, SampleSpec, DEFAULT_ANCHORS, DEFAULT_CANDIDATES, DEFAULT_KEEP};
use crate::sane_model::{SaneConfig, SaneModel};
use crate::trainer::{build_token_dataset, train_sane, TrainError};
use crate::zoo_store::{read_zoo, write_zoo, Split, ZooManifest, ZooReader, MANIFEST_FILE};
use crate::zoogen::{train_population, PopulationSpec};

/// Stamp written into every completed stage directory.
pub const STAMP_FILE: &str = "stage.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const SOUP_FILE: &str = "soup.json";
pub const SELECTION_FILE: &str = "selection.json";

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// When set, every stochastic stage derives its seed from this value and
    /// the stage name, overriding per-stage seeds.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub data_root: Option<String>,
    pub out_dir: String,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub stages: Vec<Stage>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    Zoogen(ZoogenStage),
    Train(TrainStage),
    Sample(SampleStage),
    Eval(EvalStage),
    Soup(SoupStage),
    Report(ReportStage),
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ZoogenStage {
    pub name: String,
    pub population: PopulationSpec,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainStage {
    pub name: String,
    /// Zoo-producing stage names or zoo directories.
    pub zoos: Vec<String>,
    pub sane: SaneConfig,
    #[serde(default = "train_split")]
    pub split: Split,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SampleStage {
    pub name: String,
    pub sane: String,
    pub zoo: String,
    /// Task used for conditioning and selection; defaults to the zoo's dataset.
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub sample: SampleOptions,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalStage {
    pub name: String,
    pub models: String,
    pub suite: TaskSuite,
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default)]
    pub epoch: Option<u32>,
    #[serde(default)]
    pub options: EvalOptions,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SoupStage {
    pub name: String,
    pub zoo: String,
    #[serde(default)]
    pub task: Option<String>,
    /// Snapshot epoch to soup; defaults to the latest in the zoo.
    #[serde(default)]
    pub epoch: Option<u32>,
    #[serde(default)]
    pub options: SoupOptions,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReportStage {
    pub name: String,
    pub eval: String,
    #[serde(default = "text_format")]
    pub format: ReportFormat,
}

fn train_split() -> Split {
    Split::Train
}

fn text_format() -> ReportFormat {
    ReportFormat::Text
}

/// Sampling settings of a sample stage.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOptions {
    pub n_anchors: usize,
    /// Anchor snapshot epoch; defaults to the latest train-split epoch.
    pub anchor_epoch: Option<u32>,
    pub n_candidates: usize,
    pub n_keep: usize,
    pub latent_noise: LatentNoise,
    pub condition_batches: usize,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            n_anchors: DEFAULT_ANCHORS,
            anchor_epoch: None,
            n_candidates: DEFAULT_CANDIDATES,
            n_keep: DEFAULT_KEEP,
            latent_noise: LatentNoise::default(),
            condition_batches: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Produces {
    Zoo,
    Sane,
    Eval,
    Other,
}

impl Stage {
    pub fn name(&self) -> &str {
        match self {
            Stage::Zoogen(ZoogenStage { name, .. })
            | Stage::Train(TrainStage { name, .. })
            | Stage::Sample(SampleStage { name, .. })
            | Stage::Eval(EvalStage { name, .. })
            | Stage::Soup(SoupStage { name, .. })
            | Stage::Report(ReportStage { name, .. }) => name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Stage::Zoogen(ZoogenStage { .. }) => "zoogen",
            Stage::Train(TrainStage { .. }) => "train",
            Stage::Sample(SampleStage { .. }) => "sample",
            Stage::Eval(EvalStage { .. }) => "eval",
            Stage::Soup(SoupStage { .. }) => "soup",
            Stage::Report(ReportStage { .. }) => "report",
        }
    }

    fn produces(&self) -> Produces {
        match self {
            Stage::Zoogen(ZoogenStage { .. }) | Stage::Sample(SampleStage { .. }) => Produces::Zoo,
            Stage::Train(TrainStage { .. }) => Produces::Sane,
            Stage::Eval(EvalStage { .. }) => Produces::Eval,
            _ => Produces::Other,
        }
    }

    fn inputs(&self) -> Vec<(&str, Produces)> {
        match self {
            Stage::Zoogen(ZoogenStage { .. }) => vec![],
            Stage::Train(TrainStage { zoos, .. }) => zoos.iter().map(|z| (z.as_str(), Produces::Zoo)).collect(),
            Stage::Sample(SampleStage { sane, zoo, .. }) => vec![(sane, Produces::Sane), (zoo, Produces::Zoo)],
            Stage::Eval(EvalStage { models, .. }) => vec![(models, Produces::Zoo)],
            Stage::Soup(SoupStage { zoo, .. }) => vec![(zoo, Produces::Zoo)],
            Stage::Report(ReportStage { eval, .. }) => vec![(eval, Produces::Eval)],
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Stage::Zoogen(ZoogenStage { population, .. }) => population.validate(),
            Stage::Train(TrainStage { zoos, sane, .. }) => {
                if zoos.is_empty() {
                    return Err(Error::Config("zoos: at least one zoo is required".into()));
                }
                sane.validate()
            }
            Stage::Sample(SampleStage { sample, .. }) => {
                if sample.n_anchors == 0 || sample.n_keep == 0 || sample.n_keep > sample.n_candidates {
                    return Err(Error::Config(
                        "sample: need n_anchors >= 1 and 1 <= n_keep <= n_candidates".into(),
                    ));
                }
                Ok(())
            }
            Stage::Eval(EvalStage { suite, .. }) => suite.validate(),
            Stage::Soup(SoupStage { options, .. }) => {
                if options.ks.is_empty() || options.ks.contains(&0) || options.repeats == 0 {
                    return Err(Error::Config("options: ks must be nonempty and positive, repeats >= 1".into()));
                }
                Ok(())
            }
            Stage::Report(ReportStage { .. }) => Ok(()),
        }
    }

    fn apply_seed(&mut self, seed: u64) {
        let s = derive_seed(seed, self.name());
        match self {
            Stage::Zoogen(ZoogenStage { population, .. }) => population.seed_base = s,
            Stage::Train(TrainStage { sane, .. }) => sane.seed = s,
            Stage::Sample(SampleStage { sample, .. }) => sample.seed = s,
            Stage::Soup(SoupStage { options, .. }) => options.seed = s,
            Stage::Eval(EvalStage { .. }) | Stage::Report(ReportStage { .. }) => {}
        }
    }
}

/// Seed of stage `name` under global seed `seed`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Replaces `${VAR}` and `${VAR:-default}` using `env`.
pub fn interpolate(s: &str, env: &dyn Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find("${") {
        out.push_str(&rest[..i]);
        let after = &rest[i + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| Error::Config(format!("unterminated ${{ in {s:?}")))?;
        let expr = &after[..end];
        let (var, default) = match expr.split_once(":-") {
            Some((v, d)) => (v, Some(d)),
            None => (expr, None),
        };
        match env(var).filter(|v| !v.is_empty()).or(default.map(str::to_string)) {
            Some(v) => out.push_str(&v),
            None => return Err(Error::Config(format!("environment variable {var} is not set"))),
        }
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_value(v: &mut Value, env: &dyn Fn(&str) -> Option<String>) -> Result<()> {
    match v {
        Value::String(s) => *s = interpolate(s, env)?,
        Value::Array(a) => a.iter_mut().try_for_each(|x| interpolate_value(x, env))?,
        Value::Object(o) => o.values_mut().try_for_each(|x| interpolate_value(x, env))?,
        _ => {}
    }
    Ok(())
}

fn parse_at<T: serde::de::DeserializeOwned>(prefix: &str, v: Value) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let field = match (prefix.is_empty(), path.as_str()) {
            (true, _) => path.clone(),
            (false, ".") => prefix.to_string(),
            (false, _) => format!("{prefix}.{path}"),
        };
        Error::Parse {
            field,
            message: e.inner().to_string(),
        }
    })
}

fn parse_stage(i: usize, mut v: Value) -> Result<Stage> {
    let at = format!("stages[{i}]");
    let kind = v
        .as_object_mut()
        .and_then(|o| o.remove("stage"))
        .and_then(|k| k.as_str().map(str::to_string))
        .ok_or_else(|| Error::Parse {
            field: format!("{at}.stage"),
            message: "missing stage kind".into(),
        })?;
    Ok(match kind.as_str() {
        "zoogen" => Stage::Zoogen(parse_at(&at, v)?),
        "train" => Stage::Train(parse_at(&at, v)?),
        "sample" => Stage::Sample(parse_at(&at, v)?),
        "eval" => Stage::Eval(parse_at(&at, v)?),
        "soup" => Stage::Soup(parse_at(&at, v)?),
        "report" => Stage::Report(parse_at(&at, v)?),
        other => {
            return Err(Error::Parse {
                field: format!("{at}.stage"),
                message: format!("unknown stage kind {other:?}"),
            })
        }
    })
}

impl PipelineConfig {
    /// Parses JSON, interpolating environment references in string values.
    /// Schema violations name the offending field.
    pub fn from_json_with_env(text: &str, env: &dyn Fn(&str) -> Option<String>) -> Result<Self> {
        let mut raw: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            field: ".".into(),
            message: e.to_string(),
        })?;
        interpolate_value(&mut raw, env)?;
        let stages = match raw.as_object_mut().and_then(|o| o.remove("stages")) {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(a)) => a,
            Some(_) => {
                return Err(Error::Parse {
                    field: "stages".into(),
                    message: "expected an array of stages".into(),
                })
            }
        };
        let mut cfg: PipelineConfig = parse_at("", raw)?;
        cfg.stages = stages
            .into_iter()
            .enumerate()
            .map(|(i, v)| parse_stage(i, v))
            .collect::<Result<_>>()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_json_with_env(text, &|k| std::env::var(k).ok())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::from_json(&text)
    }

    pub fn data_root(&self) -> Option<PathBuf> {
        self.data_root.as_deref().filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    /// Checks every stage and reference without touching the filesystem
    /// beyond existence checks of external inputs.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Produces> = BTreeMap::new();
        for (i, st) in self.stages.iter().enumerate() {
            let name = st.name();
            let tag = |e: Error| Error::Parse {
                field: format!("stages[{i}] ({name})"),
                message: e.to_string(),
            };
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(tag(Error::Config(format!(
                    "name {name:?} must be nonempty and use only [A-Za-z0-9_-]"
                ))));
            }
            if seen.contains_key(name) {
                return Err(tag(Error::Config(format!("duplicate stage name {name}"))));
            }
            st.validate().map_err(tag)?;
            for (r, want) in st.inputs() {
                match seen.get(r) {
                    Some(&got) if got == want => {}
                    Some(_) => {
                        return Err(tag(Error::Config(format!("stage {r} does not produce the required input"))))
                    }
                    None if Path::new(r).exists() => {}
                    None => {
                        return Err(tag(Error::Config(format!(
                            "{r} is neither an earlier stage nor an existing path"
                        ))))
                    }
                }
            }
            seen.insert(name, st.produces());
        }
        Ok(())
    }

    /// Stages with the global seed applied.
    pub fn resolved_stages(&self) -> Vec<Stage> {
        let mut stages = self.stages.clone();
        if let Some(seed) = self.seed {
            for s in &mut stages {
                s.apply_seed(seed);
            }
        }
        stages
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub name: String,
    pub kind: String,
    pub status: StageStatus,
    pub seconds: f64,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
struct Stamp {
    stage: String,
    fingerprint: String,
    outputs: BTreeMap<String, String>,
}

fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::storage(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::storage(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != STAMP_FILE) {
                let bytes = fs::read(&p).map_err(|e| Error::storage(&p, e))?;
                let rel = p.strip_prefix(base).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                out.insert(rel, hex(&Sha256::digest(&bytes)));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    if dir.is_file() {
        let bytes = fs::read(dir).map_err(|e| Error::storage(dir, e))?;
        out.insert(String::new(), hex(&Sha256::digest(&bytes)));
    } else {
        walk(dir, dir, &mut out)?;
    }
    Ok(out)
}

fn read_stamp(dir: &Path) -> Option<Stamp> {
    let text = fs::read_to_string(dir.join(STAMP_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Parse {
        field: path.display().to_string(),
        message: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::storage(path, e))
}

/// Data settings and resolved input locations available to a stage.
#[derive(Clone, Debug, Default)]
pub struct StageEnv {
    pub data_root: Option<PathBuf>,
    pub data: DataConfig,
    /// Output directories of earlier stages by name. Unknown references are
    /// taken as paths.
    pub inputs: BTreeMap<String, PathBuf>,
}

impl StageEnv {
    fn input(&self, r: &str) -> PathBuf {
        self.inputs.get(r).cloned().unwrap_or_else(|| PathBuf::from(r))
    }

    fn fingerprint(&self, st: &Stage) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(st).expect("serializable"));
        h.update(serde_json::to_vec(&self.data).expect("serializable"));
        h.update(self.data_root.as_deref().unwrap_or(Path::new("")).to_string_lossy().as_bytes());
        for (r, _) in st.inputs() {
            h.update([0u8]);
            for (k, v) in file_hashes(&self.input(r))? {
                h.update(k.as_bytes());
                h.update(v.as_bytes());
            }
        }
        Ok(hex(&h.finalize()))
    }
}

/// Runs the configured stages in order, skipping any stage whose stamp still
/// matches.
pub fn run_pipeline(cfg: &PipelineConfig, log: &mut dyn Write) -> Result<Vec<StageRecord>> {
    cfg.validate()?;
    let stages = cfg.resolved_stages();
    let out = PathBuf::from(&cfg.out_dir);
    let mut ctx = StageEnv {
        data_root: cfg.data_root(),
        data: cfg.data,
        inputs: BTreeMap::new(),
    };
    let mut records = Vec::new();
    for st in &stages {
        let name = st.name().to_string();
        let tagged = |e: Error| Error::Stage {
            stage: name.clone(),
            source: Box::new(e),
        };
        let dir = out.join(&name);
        let fp = ctx.fingerprint(st).map_err(tagged)?;
        let t0 = Instant::now();
        let fresh = read_stamp(&dir).is_some_and(|s| {
            s.fingerprint == fp && file_hashes(&dir).is_ok_and(|h| h == s.outputs)
        });
        let status = if fresh {
            StageStatus::Skipped
        } else {
            let _ = writeln!(log, "[{name}] {}: running", st.kind());
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| tagged(Error::storage(&dir, e)))?;
            }
            fs::create_dir_all(&dir).map_err(|e| tagged(Error::storage(&dir, e)))?;
            execute_stage(&ctx, st, &dir).map_err(tagged)?;
            let stamp = Stamp {
                stage: st.kind().to_string(),
                fingerprint: fp,
                outputs: file_hashes(&dir).map_err(tagged)?,
            };
            write_json(&dir.join(STAMP_FILE), &stamp).map_err(tagged)?;
            StageStatus::Ran
        };
        let seconds = t0.elapsed().as_secs_f64();
        let _ = match status {
            StageStatus::Skipped => writeln!(log, "[{name}] {}: skipped (up to date)", st.kind()),
            StageStatus::Ran => writeln!(log, "[{name}] {}: done in {seconds:.1}s", st.kind()),
        };
        ctx.inputs.insert(name.clone(), dir);
        records.push(StageRecord {
            name,
            kind: st.kind().to_string(),
            status,
            seconds,
        });
    }
    Ok(records)
}

fn zoo_models(zoo: &ZooReader, split: Option<Split>, epoch: Option<u32>) -> Result<Vec<ModelCheckpoint>> {
    let entries: Vec<_> = zoo
        .manifest
        .checkpoints
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .collect();
    let epoch = epoch.or_else(|| entries.iter().map(|e| e.meta.epoch).max());
    let models = entries
        .iter()
        .filter(|e| epoch.is_none_or(|ep| e.meta.epoch == ep))
        .map(|e| zoo.load(&e.id))
        .collect::<Result<Vec<_>>>()?;
    if models.is_empty() {
        return Err(Error::Config(format!(
            "zoo {} has no checkpoints matching split {split:?}, epoch {epoch:?}",
            zoo.manifest.zoo_id
        )));
    }
    Ok(models)
}

#[derive(Serialize)]
struct Selected<'a> {
    rank: usize,
    candidate: usize,
    checkpoint_id: &'a str,
    val_accuracy: f32,
}

#[derive(Serialize)]
struct Selection<'a> {
    generated: usize,
    anchors: &'a [String],
    kept: Vec<Selected<'a>>,
}

/// Runs one stage, writing its outputs into `dir`.
pub fn execute_stage(ctx: &StageEnv, st: &Stage, dir: &Path) -> Result<()> {
    let root = ctx.data_root.as_deref();
    let data_cfg = &ctx.data;
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    match st {
        Stage::Zoogen(ZoogenStage { population, .. }) => {
            let data = load_task(root, &population.dataset_tag, data_cfg)?;
            let pop = train_population(population, &data)?;
            write_zoo(dir, &pop.manifest, &pop.checkpoints)?;
        }
        Stage::Train(TrainStage { zoos, sane, split, .. }) => {
            let readers = zoos.iter().map(|z| read_zoo(&ctx.input(z))).collect::<Result<Vec<_>>>()?;
            let ds = build_token_dataset(&readers, sane.d_t, sane.window_size, *split)?;
            let log_path = dir.join(TRAIN_LOG_FILE);
            let mut log = fs::File::create(&log_path).map_err(|e| Error::storage(&log_path, e))?;
            match train_sane(sane, &ds, Some(&mut log)) {
                Ok(out) => out.model.save(dir)?,
                Err(TrainError::Setup(e)) => return Err(e),
                Err(TrainError::Diverged { error, last_good, .. }) => {
                    last_good.save(&dir.join("last_good"))?;
                    return Err(error);
                }
            }
        }
        Stage::Sample(SampleStage {
            name,
            sane,
            zoo,
            task,
            sample,
        }) => {
            let model = SaneModel::load(&ctx.input(sane))?;
            let zoo = read_zoo(&ctx.input(zoo))?;
            let tag = task.clone().unwrap_or_else(|| zoo.manifest.dataset_tag.clone());
            let ids = pick_anchors(&zoo.manifest.checkpoints, sample.n_anchors, sample.anchor_epoch, sample.seed)?;
            let anchors = ids.iter().map(|id| zoo.load(id)).collect::<Result<Vec<_>>>()?;
            let arch = anchors[0].arch.clone();
            let data = load_task(root, &tag, data_cfg)?;
            if arch.output_dim() != Some(data.classes()) {
                return Err(Error::Config(format!(
                    "task {tag} has {} classes, anchors have {:?} outputs",
                    data.classes(),
                    arch.output_dim()
                )));
            }
            let data = data.adapt(arch.input_shape)?;
            let spec = SampleSpec {
                n_candidates: sample.n_candidates,
                n_keep: sample.n_keep,
                latent_noise: sample.latent_noise,
                ..SampleSpec::new(arch, anchors, sample.seed)
            };
            let outcome = sample_models(&model, &spec, &data.train, &data.val, sample.condition_batches)?;
            let mut manifest = ZooManifest::new(name.as_str(), tag.as_str(), sample.seed);
            manifest.token_size = Some(model.config().d_t);
            let mut ckpts = Vec::new();
            let mut ids_out = Vec::new();
            for r in &outcome.kept {
                let mut c = r.checkpoint.clone();
                c.meta.image_dataset = tag.clone();
                c.meta.test_accuracy = None;
                ids_out.push(manifest.add_checkpoint(&format!("{name}-c{:03}", r.index), &c)?);
                ckpts.push(c);
            }
            manifest.assign_splits();
            write_zoo(dir, &manifest, &ckpts)?;
            let selection = Selection {
                generated: outcome.generated,
                anchors: &ids,
                kept: outcome
                    .kept
                    .iter()
                    .zip(&ids_out)
                    .enumerate()
                    .map(|(rank, (r, id))| Selected {
                        rank,
                        candidate: r.index,
                        checkpoint_id: id,
                        val_accuracy: r.accuracy,
                    })
                    .collect(),
            };
            write_json(&dir.join(SELECTION_FILE), &selection)?;
        }
        Stage::Eval(EvalStage {
            models,
            suite,
            split,
            epoch,
            options,
            ..
        }) => {
            let zoo = read_zoo(&ctx.input(models))?;
            let ms = zoo_models(&zoo, *split, *epoch)?;
            let mut opts = options.clone();
            opts.data = *data_cfg;
            let mut report = evaluate_models(&ms, suite, root, &opts)?;
            report.provenance.insert("models".into(), zoo.manifest.zoo_id.clone());
            report.provenance.insert("n_models".into(), ms.len().to_string());
            report.provenance.insert("arch".into(), ms[0].arch.arch_id.clone());
            fs::write(dir.join(REPORT_JSON_FILE), render_report(&report, ReportFormat::Json))
                .map_err(|e| Error::storage(dir.join(REPORT_JSON_FILE), e))?;
        }
        Stage::Soup(SoupStage {
            zoo,
            task,
            epoch,
            options,
            ..
        }) => {
            let zoo = read_zoo(&ctx.input(zoo))?;
            let tag = task.clone().unwrap_or_else(|| zoo.manifest.dataset_tag.clone());
            let ms = zoo_models(&zoo, None, *epoch)?;
            let data = load_task(root, &tag, data_cfg)?.adapt(ms[0].arch.input_shape)?;
            let curve = soup_curve(&ms, &data, options)?;
            write_json(&dir.join(SOUP_FILE), &curve)?;
        }
        Stage::Report(ReportStage { eval, format, .. }) => {
            let src = ctx.input(eval);
            let src = if src.is_dir() { src.join(REPORT_JSON_FILE) } else { src };
            let text = fs::read_to_string(&src).map_err(|e| Error::storage(&src, e))?;
            let report = parse_report(&text)?;
            let (file, body) = match format {
                ReportFormat::Text => (REPORT_TEXT_FILE, render_report(&report, ReportFormat::Text)),
                ReportFormat::Json => (REPORT_JSON_FILE, render_report(&report, ReportFormat::Json)),
            };
            fs::write(dir.join(file), body).map_err(|e| Error::storage(dir.join(file), e))?;
        }
    }
    Ok(())
}

/// Small end-to-end configuration over the built-in digit datasets.
pub fn toy_config(out_dir: &str, seed: u64) -> PipelineConfig {
    let text = serde_json::json!({
        "seed": seed,
        "out_dir": out_dir,
        "data": {"n_train": 600, "n_val": 200, "n_test": 300, "seed": 0},
        "stages": [
            {"stage": "zoogen", "name": "zoo", "population": {
                "zoo_id": "toy", "arch": "small_cnn", "dataset_tag": "synth-mnist",
                "n_models": 10, "epochs": 3, "seed_base": 0}},
            {"stage": "train", "name": "sane", "zoos": ["zoo"], "sane": {
                "d_t": 289, "window_size": 16, "d_model": 64, "d_lat": 32, "d_proj": 16,
                "n_layers": 2, "n_heads": 4, "ffn_mult": 2, "max_layers": 16,
                "max_tokens_per_layer": 64, "lr": 1e-3, "weight_decay": 1e-5,
                "batch_size": 8, "epochs": 5}},
            {"stage": "sample", "name": "generated", "sane": "sane", "zoo": "zoo",
             "sample": {"n_candidates": 20, "n_keep": 5, "n_anchors": 3}},
            {"stage": "eval", "name": "eval", "models": "generated", "suite": {
                "id_tasks": ["synth-mnist"], "nood_tasks": ["synth-usps"], "food_tasks": ["synth-fmnist"]}},
            {"stage": "report", "name": "report", "eval": "eval"}
        ]
    });
    serde_json::from_value(text).expect("toy config is well-formed")
}

/// Reads the manifest of a zoo-producing stage output.
pub fn stage_manifest(out_dir: &Path, stage: &str) -> Result<String> {
    let p = out_dir.join(stage).join(MANIFEST_FILE);
    fs::read_to_string(&p).map_err(|e| Error::storage(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(k: &str) -> Option<String> {
        (k == "ROOT").then(|| "/data".to_string())
    }

    #[test]
    fn interpolation() {
        assert_eq!(interpolate("${ROOT}/x", &env).unwrap(), "/data/x");
        assert_eq!(interpolate("${NOPE:-d}", &env).unwrap(), "d");
        assert_eq!(interpolate("plain", &env).unwrap(), "plain");
        assert!(interpolate("${NOPE}", &env).unwrap_err().to_string().contains("NOPE"));
        assert!(interpolate("${ROOT", &env).is_err());
    }

    #[test]
    fn zero_stages_produce_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("out");
        let cfg = PipelineConfig::from_json_with_env(
            &format!(r#"{{"out_dir": "{}", "data_root": "${{ROOT}}"}}"#, out.display()),
            &env,
        )
        .unwrap();
        assert_eq!(cfg.data_root(), Some(PathBuf::from("/data")));
        let mut log = Vec::new();
        assert!(run_pipeline(&cfg, &mut log).unwrap().is_empty());
        assert!(!out.exists());
    }

    #[test]
    fn schema_errors_name_the_field() {
        let bad = r#"{"out_dir": "o", "stages": [{"stage": "train", "name": "t", "zoos": ["x"],
            "sane": {"d_model": 64, "bogus": 1}}]}"#;
        let e = PipelineConfig::from_json_with_env(bad, &env).unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        let bad = r#"{"out_dir": "o", "stages": [{"stage": "zoogen", "name": "z", "population":
            {"zoo_id": "z", "arch": "small_cnn", "dataset_tag": "synth-mnist", "n_models": "many",
             "epochs": 1, "seed_base": 0}}]}"#;
        let e = PipelineConfig::from_json_with_env(bad, &env).unwrap_err().to_string();
        assert!(e.contains("stages[0].population.n_models"), "{e}");
        let dangling = r#"{"out_dir": "o", "stages": [{"stage": "report", "name": "r", "eval": "missing-eval"}]}"#;
        let e = PipelineConfig::from_json_with_env(dangling, &env).unwrap_err().to_string();
        assert!(e.contains("missing-eval"), "{e}");
        let wrong_kind = r#"{"out_dir": "o", "stages": [
            {"stage": "zoogen", "name": "z", "population": {"zoo_id": "z", "arch": "small_cnn",
             "dataset_tag": "synth-mnist", "n_models": 1, "epochs": 1, "seed_base": 0}},
            {"stage": "report", "name": "r", "eval": "z"}]}"#;
        assert!(PipelineConfig::from_json_with_env(wrong_kind, &env).is_err());
    }

    #[test]
    fn global_seed_reaches_every_stochastic_stage() {
        let cfg = toy_config("o", 7);
        let a = cfg.resolved_stages();
        let b = toy_config("o", 8).resolved_stages();
        for (x, y) in a.iter().zip(&b) {
            match (x, y) {
                (Stage::Eval(EvalStage { .. }), _) | (Stage::Report(ReportStage { .. }), _) => assert_eq!(x, y),
                _ => assert_ne!(x, y, "{}", x.name()),
            }
        }
        assert_eq!(a, toy_config("o", 7).resolved_stages());
    }

    #[test]
    fn zoogen_then_soup_resumes() {
        let tmp = tempfile::tempdir().unwrap();
        let text = format!(
            r#"{{"out_dir": "{}", "data": {{"n_train": 64, "n_val": 16, "n_test": 32}}, "stages": [
            {{"stage": "zoogen", "name": "z", "population": {{"zoo_id": "z", "arch": "small_cnn",
              "dataset_tag": "synth-mnist", "n_models": 2, "epochs": 1, "seed_base": 0}}}},
            {{"stage": "soup", "name": "s", "zoo": "z", "options": {{"ks": [1, 2], "repeats": 1}}}}]}}"#,
            tmp.path().display()
        );
        let cfg = PipelineConfig::from_json_with_env(&text, &env).unwrap();
        let mut log = Vec::new();
        let first = run_pipeline(&cfg, &mut log).unwrap();
        assert!(first.iter().all(|r| r.status == StageStatus::Ran));
        let second = run_pipeline(&cfg, &mut log).unwrap();
        assert!(second.iter().all(|r| r.status == StageStatus::Skipped));
        // Tampering with an output forces that stage and its dependents to rerun.
        let manifest = tmp.path().join("z").join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest).unwrap();
        fs::write(&manifest, text + " ").unwrap();
        let third = run_pipeline(&cfg, &mut log).unwrap();
        assert_eq!(third[0].status, StageStatus::Ran);
        let log = String::from_utf8(log).unwrap();
        assert!(log.contains("[s] soup: skipped"));
    }
}
