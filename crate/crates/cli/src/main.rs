use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use weightgen::arch::{self, ArchitectureDescriptor};
use weightgen::baselines::{rebasin_align, soup_curve, SoupOptions};
use weightgen::data::{load_task, DataConfig};
use weightgen::evalharness::{evaluate_models, parse_report, render_report, EvalOptions, ReportFormat, TaskSuite};
use weightgen::pipeline::{
    execute_stage, run_pipeline, PipelineConfig, SampleOptions, SampleStage, Stage, StageEnv, TrainStage, ZoogenStage,
};
use weightgen::sane_model::SaneConfig;
use weightgen::tokenizer::sequence_layout;
use weightgen::zoo_store::{read_zoo, write_zoo, Split, ZooManifest};
use weightgen::zoogen::PopulationSpec;

#[derive(Parser)]
#[command(name = "weightgen", version, about = "Weight-space learning on model zoos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset root; tags not found there fall back to the built-in generators.
    #[arg(long = "data", env = "WEIGHTGEN_DATA_ROOT")]
    root: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

impl DataArgs {
    fn config(&self) -> DataConfig {
        let d = DataConfig::default();
        DataConfig {
            n_train: self.n_train.unwrap_or(d.n_train),
            n_val: self.n_val.unwrap_or(d.n_val),
            n_test: self.n_test.unwrap_or(d.n_test),
            seed: d.seed,
        }
    }

    fn env(&self) -> StageEnv {
        StageEnv {
            data_root: self.root.clone(),
            data: self.config(),
            inputs: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Text => ReportFormat::Text,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a population of classifiers and write it as a zoo.
    Zoogen {
        /// PopulationSpec JSON.
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overrides seed_base.
        #[arg(long, env = "WEIGHTGEN_SEED")]
        seed: Option<u64>,
    },
    /// Print the token layout of an architecture.
    Layout {
        /// small_cnn, mini_resnet, or a descriptor JSON file.
        #[arg(long, default_value = "small_cnn")]
        arch: String,
        /// Input shape as C,H,W.
        #[arg(long, default_value = "1,28,28", value_delimiter = ',', num_args = 3)]
        input: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long = "d-t", default_value_t = 289)]
        d_t: usize,
        #[arg(long)]
        json: bool,
    },
    /// Train a sequence autoencoder on one or more zoos.
    Train {
        /// SaneConfig JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        zoos: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, env = "WEIGHTGEN_SEED")]
        seed: Option<u64>,
    },
    /// Generate, condition and select models; write the survivors as a zoo.
    Sample {
        #[arg(long)]
        sane: PathBuf,
        /// Zoo supplying the anchors.
        #[arg(long)]
        zoo: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// SampleOptions JSON; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Conditioning and selection task; defaults to the zoo's dataset.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        keep: Option<usize>,
        #[arg(long)]
        anchors: Option<usize>,
        #[arg(long)]
        anchor_epoch: Option<u32>,
        #[arg(long, env = "WEIGHTGEN_SEED")]
        seed: Option<u64>,
    },
    /// Accuracy of weight-averaged soups against subset size.
    Soup {
        #[arg(long)]
        zoo: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ks: Vec<usize>,
        /// Align every member to the subset's first model before averaging.
        #[arg(long)]
        align: bool,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        task: Option<String>,
        /// Snapshot epoch; defaults to the latest.
        #[arg(long)]
        epoch: Option<u32>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, env = "WEIGHTGEN_SEED")]
        seed: Option<u64>,
    },
    /// Permute a target checkpoint's hidden units onto a reference.
    Rebasin {
        #[arg(long)]
        zoo: PathBuf,
        #[arg(long)]
        reference: String,
        #[arg(long)]
        target: String,
        /// Zoo directory receiving the aligned target.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
    },
    /// Evaluate a zoo on an ID / NOOD / FOOD suite.
    Eval {
        #[arg(long)]
        models: PathBuf,
        /// TaskSuite JSON, or one of: synthetic, cnn, resnet.
        #[arg(long, default_value = "synthetic")]
        suite: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        epoch: Option<u32>,
    },
    /// Render a structured report as a table.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a declarative pipeline config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "WEIGHTGEN_SEED")]
        seed: Option<u64>,
        #[arg(long = "data", env = "WEIGHTGEN_DATA_ROOT")]
        data_root: Option<String>,
        #[arg(long)]
        out: Option<String>,
        /// Validate the config and exit.
        #[arg(long)]
        check: bool,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn resolve_arch(name: &str, input: &[usize], classes: usize) -> Result<ArchitectureDescriptor> {
    let [c, h, w] = input else {
        bail!("--input takes C,H,W");
    };
    if Path::new(name).is_file() {
        let d: ArchitectureDescriptor = read_json(Path::new(name))?;
        d.validate()?;
        return Ok(d);
    }
    Ok(arch::by_name(name, [*c, *h, *w], classes)?)
}

fn suite_from(arg: &str) -> Result<TaskSuite> {
    Ok(match arg {
        "synthetic" => TaskSuite::synthetic(),
        "cnn" => TaskSuite::cnn_track(),
        "resnet" => TaskSuite::resnet_track(),
        path => read_json(Path::new(path))?,
    })
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Zoogen { spec, data, out, seed } => {
            let mut population: PopulationSpec = read_json(&spec)?;
            if let Some(s) = seed {
                population.seed_base = s;
            }
            let stage = Stage::Zoogen(ZoogenStage {
                name: population.zoo_id.clone(),
                population,
            });
            execute_stage(&data.env(), &stage, &out)?;
            let zoo = read_zoo(&out)?;
            println!(
                "wrote {} checkpoints ({} models) to {}",
                zoo.manifest.checkpoints.len(),
                zoo.manifest.split_model_counts().iter().sum::<usize>(),
                out.display()
            );
        }
        Command::Layout {
            arch,
            input,
            classes,
            d_t,
            json,
        } => {
            let a = resolve_arch(&arch, &input, classes)?;
            let layout = sequence_layout(&a, d_t)?;
            if json {
                let layers: Vec<_> = layout
                    .layers
                    .iter()
                    .map(|l| {
                        serde_json::json!({
                            "layer": l.layer_index, "name": l.name, "rows": l.rows,
                            "row_len": l.row_len, "tokens_per_row": l.tokens_per_row,
                            "offset": l.offset, "count": l.count,
                        })
                    })
                    .collect();
                let v = serde_json::json!({
                    "arch_id": a.arch_id, "params": a.num_params(), "d_t": d_t,
                    "tokens": layout.total, "layers": layers,
                });
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                println!("{}  params={}  d_t={}  tokens={}", a.arch_id, a.num_params(), d_t, layout.total);
                println!("{:>3}  {:<16} {:>5} {:>7} {:>6} {:>6} {:>6}", "l", "name", "rows", "row_len", "tok/r", "offset", "count");
                for l in &layout.layers {
                    println!(
                        "{:>3}  {:<16} {:>5} {:>7} {:>6} {:>6} {:>6}",
                        l.layer_index, l.name, l.rows, l.row_len, l.tokens_per_row, l.offset, l.count
                    );
                }
            }
        }
        Command::Train {
            config,
            zoos,
            out,
            split,
            epochs,
            seed,
        } => {
            let mut sane: SaneConfig = read_json(&config)?;
            if let Some(s) = seed {
                sane.seed = s;
            }
            if let Some(e) = epochs {
                sane.epochs = e;
            }
            let stage = Stage::Train(TrainStage {
                name: "train".into(),
                zoos: zoos.iter().map(|z| z.to_string_lossy().into_owned()).collect(),
                sane,
                split: split.into(),
            });
            execute_stage(&StageEnv::default(), &stage, &out)?;
            println!("saved model to {}", out.display());
        }
        Command::Sample {
            sane,
            zoo,
            data,
            out,
            config,
            task,
            candidates,
            keep,
            anchors,
            anchor_epoch,
            seed,
        } => {
            let mut opts: SampleOptions = match config {
                Some(p) => read_json(&p)?,
                None => SampleOptions::default(),
            };
            opts.n_candidates = candidates.unwrap_or(opts.n_candidates);
            opts.n_keep = keep.unwrap_or(opts.n_keep);
            opts.n_anchors = anchors.unwrap_or(opts.n_anchors);
            opts.anchor_epoch = anchor_epoch.or(opts.anchor_epoch);
            opts.seed = seed.unwrap_or(opts.seed);
            let name = out
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "generated".into());
            let stage = Stage::Sample(SampleStage {
                name,
                sane: sane.to_string_lossy().into_owned(),
                zoo: zoo.to_string_lossy().into_owned(),
                task,
                sample: opts,
            });
            execute_stage(&data.env(), &stage, &out)?;
            println!("wrote selected models to {}", out.display());
        }
        Command::Soup {
            zoo,
            ks,
            align,
            repeats,
            task,
            epoch,
            data,
            report,
            seed,
        } => {
            let zoo = read_zoo(&zoo)?;
            let epoch = epoch.or_else(|| zoo.manifest.checkpoints.iter().map(|e| e.meta.epoch).max());
            let models = zoo
                .manifest
                .checkpoints
                .iter()
                .filter(|e| Some(e.meta.epoch) == epoch)
                .map(|e| zoo.load(&e.id))
                .collect::<weightgen::Result<Vec<_>>>()?;
            if models.is_empty() {
                bail!("zoo has no checkpoints at epoch {epoch:?}");
            }
            let tag = task.unwrap_or_else(|| zoo.manifest.dataset_tag.clone());
            let task = load_task(data.root.as_deref(), &tag, &data.config())?.adapt(models[0].arch.input_shape)?;
            let d = SoupOptions::default();
            let opts = SoupOptions {
                ks,
                aligned: align,
                repeats: repeats.unwrap_or(d.repeats),
                seed: seed.unwrap_or(d.seed),
                ..d
            };
            let curve = soup_curve(&models, &task, &opts)?;
            for p in &curve.points {
                println!("k={:<3} acc={:.2}±{:.2}", p.k, p.mean * 100.0, p.std * 100.0);
            }
            write_out(&report, &serde_json::to_string_pretty(&curve)?)?;
        }
        Command::Rebasin {
            zoo,
            reference,
            target,
            out,
            max_iters,
        } => {
            let zoo = read_zoo(&zoo)?;
            let a = zoo.load(&reference)?;
            let b = zoo.load(&target)?;
            let al = rebasin_align(&a, &b, max_iters)?;
            for (i, d) in al.distances.iter().enumerate() {
                println!("sweep {i}: squared distance {d:.6}");
            }
            let mut manifest = ZooManifest::new(
                format!("{}-aligned", zoo.manifest.zoo_id),
                zoo.manifest.dataset_tag.as_str(),
                zoo.manifest.seed,
            );
            let entry = zoo.manifest.entry(&target).context("target not in manifest")?;
            manifest.add_checkpoint(&entry.model_id, &al.aligned)?;
            write_zoo(&out, &manifest, &[al.aligned])?;
        }
        Command::Eval {
            models,
            suite,
            data,
            report,
            format,
            split,
            epoch,
        } => {
            let zoo = read_zoo(&models)?;
            let epoch = epoch.or_else(|| zoo.manifest.checkpoints.iter().map(|e| e.meta.epoch).max());
            let split: Option<Split> = split.map(Into::into);
            let ms = zoo
                .manifest
                .checkpoints
                .iter()
                .filter(|e| Some(e.meta.epoch) == epoch && split.is_none_or(|s| e.split == s))
                .map(|e| zoo.load(&e.id))
                .collect::<weightgen::Result<Vec<_>>>()?;
            let opts = EvalOptions {
                data: data.config(),
                ..EvalOptions::default()
            };
            let mut r = evaluate_models(&ms, &suite_from(&suite)?, data.root.as_deref(), &opts)?;
            r.provenance.insert("models".into(), zoo.manifest.zoo_id.clone());
            r.provenance.insert("n_models".into(), ms.len().to_string());
            print!("{}", render_report(&r, ReportFormat::Text));
            write_out(&report, &render_report(&r, format.into()))?;
        }
        Command::Report { input, format, out } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let rendered = render_report(&parse_report(&text)?, format.into());
            match out {
                Some(p) => write_out(&p, &rendered)?,
                None => print!("{rendered}"),
            }
        }
        Command::Pipeline {
            config,
            seed,
            data_root,
            out,
            check,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            cfg.seed = seed.or(cfg.seed);
            cfg.data_root = data_root.or(cfg.data_root);
            cfg.out_dir = out.unwrap_or(cfg.out_dir);
            if check {
                println!("{} stages ok", cfg.stages.len());
                return Ok(());
            }
            let records = run_pipeline(&cfg, &mut std::io::stderr())?;
            let ran = records.iter().filter(|r| r.status == weightgen::pipeline::StageStatus::Ran).count();
            println!("{} stages, {ran} ran, {} skipped", records.len(), records.len() - ran);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Die quietly when stdout is closed early (`weightgen layout | head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
