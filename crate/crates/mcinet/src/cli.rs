//! `mcinet` subcommands.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mcinet_core::data::{self, DatasetManifest, NormStats, SplitResult, SubjectRecord, SynthParams};
use mcinet_core::gradcheck::{self, CheckedLayer};
use mcinet_core::graph::ModelGraph;
use mcinet_core::train::{self, EvalReport, PreparedData, Sample, TrainHistory};
use mcinet_core::zoo::{self, ArchitectureId, ZooConfig};
use mcinet_core::{rng, Error as CoreError, Shape2D, Tensor};

use crate::config::RunConfig;
use crate::error::{self, AppError, Result};
use crate::{formats, imageio, manifest, report, synth};

/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(
    name = "mcinet",
    version,
    about = "MCI vs normal MRI slice classification with classic CNNs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic PGM corpus and its manifest.
    Synth(SynthArgs),
    /// Subject-level train/test split of a manifest.
    Split(SplitArgs),
    /// Transfer-train one architecture and save the model.
    Train(TrainArgs),
    /// Evaluate a saved model on a test manifest.
    Eval(EvalArgs),
    /// Train and evaluate several architectures on one split.
    Compare(CompareArgs),
    /// Classify one image with a saved model.
    Predict(PredictArgs),
    /// Print an architecture's census and per-node shapes.
    Inspect(InspectArgs),
    /// Finite-difference check of every layer's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 210)]
    pub per_class: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

/// Overrides applied on top of defaults and `--config`.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON file with any subset of the configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Node id to freeze through, `backbone`, or `none`.
    #[arg(long)]
    pub freeze: Option<String>,
    /// Sets the split, shuffle, init and dropout seeds together.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub dropout_seed: Option<u64>,
    /// Train fraction of each class.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Square network input; native size when absent.
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub width_divisor: Option<usize>,
    #[arg(long)]
    pub source_classes: Option<usize>,
    /// Record zero seconds so every output file is reproducible.
    #[arg(long)]
    pub no_timing: bool,
    /// Recompute frozen-prefix activations every epoch.
    #[arg(long)]
    pub no_feature_cache: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $field:expr) => {
                if let Some(v) = self.$flag {
                    $field = v;
                }
            };
        }
        set!(lr => c.learning_rate);
        set!(momentum => c.momentum);
        set!(weight_decay => c.weight_decay);
        set!(epochs => c.epochs);
        set!(batch_size => c.batch_size);
        if let Some(s) = self.seed {
            c.seeds = train::Seeds {
                split: s,
                shuffle: s,
                init: s,
                dropout: s,
            };
        }
        set!(split_seed => c.seeds.split);
        set!(shuffle_seed => c.seeds.shuffle);
        set!(init_seed => c.seeds.init);
        set!(dropout_seed => c.seeds.dropout);
        set!(fraction => c.split_fraction);
        set!(width_divisor => c.width_divisor);
        set!(source_classes => c.source_classes);
        if let Some(size) = self.input_size {
            c.input_size = Some(size);
        }
        if let Some(f) = &self.freeze {
            c.freeze_boundary = (f != "none").then(|| f.clone());
        }
        if self.no_timing {
            c.timing = false;
        }
        if self.no_feature_cache {
            c.cache_frozen_features = false;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Either one manifest split by subject, or explicit train and test manifests.
#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long, conflicts_with_all = ["train", "test"], required_unless_present = "train")]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "test")]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub arch: ArchitectureId,
    /// Manifest whose train side is used, after the subject split.
    #[arg(long, conflicts_with = "train")]
    pub manifest: Option<PathBuf>,
    /// Manifest used whole for training.
    #[arg(long, required_unless_present = "manifest")]
    pub train: Option<PathBuf>,
    /// NWTS weights for the source network, loaded before the head swap.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "alexnet,vgg16,googlenet,resnet18")]
    pub archs: Vec<ArchitectureId>,
    /// `ARCH=PATH` source weights, repeatable.
    #[arg(long, value_parser = parse_pretrained)]
    pub pretrained: Vec<(ArchitectureId, PathBuf)>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub arch: ArchitectureId,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub width_divisor: usize,
    #[arg(long, default_value_t = 1000)]
    pub classes: usize,
    /// Print the graph summary as JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check every layer type (the default).
    #[arg(long, conflicts_with = "layer")]
    pub all: bool,
    /// Check one layer type by name.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

fn parse_pretrained(s: &str) -> std::result::Result<(ArchitectureId, PathBuf), String> {
    let (arch, path) = s.split_once('=').ok_or("expected ARCH=PATH")?;
    Ok((arch.parse().map_err(|e| format!("{e}"))?, PathBuf::from(path)))
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub architecture: ArchitectureId,
    pub zoo: ZooConfig,
    pub stats: NormStats,
    pub config: RunConfig,
}

impl ModelCard {
    fn input_size(&self) -> usize {
        self.zoo.input_size.unwrap_or(self.architecture.native_input())
    }
}

pub const MODEL_WEIGHTS: &str = "model.nwts";
pub const MODEL_CARD: &str = "model.json";

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Split(a) => cmd_split(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
    .map(|()| 0)
}

fn announce(config: &impl Serialize) {
    eprintln!(
        "effective config: {}",
        serde_json::to_string(config).expect("config serializes")
    );
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let params = SynthParams {
        size: a.size,
        ..SynthParams::default()
    };
    #[derive(Serialize)]
    struct Effective<'a> {
        per_class: usize,
        seed: u64,
        params: &'a SynthParams,
    }
    announce(&Effective {
        per_class: a.per_class,
        seed: a.seed,
        params: &params,
    });
    let m = synth::synth_dataset(a.per_class, a.seed, &a.out, &params)?;
    say!(
        "wrote {} records ({}) to {}",
        m.len(),
        m.class_summary(),
        a.out.display()
    );
    Ok(())
}

fn cmd_split(a: &SplitArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    announce(&cfg);
    let m = manifest::load_manifest(&a.manifest)?;
    let split = data::subject_split(&m, cfg.split_fraction, cfg.seeds.split)?;
    manifest::write_manifest(&a.out.join("train.csv"), &split.train)?;
    manifest::write_manifest(&a.out.join("test.csv"), &split.test)?;
    say!(
        "train {} subjects ({}), test {} subjects ({}), fingerprint {:016x}",
        split.train.subjects().len(),
        split.train.class_summary(),
        split.test.subjects().len(),
        split.test.class_summary(),
        split.fingerprint()
    );
    Ok(())
}

/// Raw image for a record as 1×C×H×W in [0, 1].
fn load_record(r: &SubjectRecord) -> Result<Tensor> {
    imageio::decode_image(Path::new(&r.image_path))
}

/// Adapts the IO loader to the core callback; the first IO failure is kept
/// so its path survives into the message.
fn with_loader<T>(
    f: impl FnOnce(&mut dyn FnMut(&SubjectRecord) -> mcinet_core::Result<Tensor>) -> mcinet_core::Result<T>,
) -> Result<T> {
    let mut failure = None;
    let mut load = |r: &SubjectRecord| {
        load_record(r).map_err(|e| {
            let msg = e.to_string();
            failure.get_or_insert(e);
            CoreError::Dataset(msg)
        })
    };
    let out = f(&mut load);
    match (out, failure) {
        (Ok(v), _) => Ok(v),
        (Err(_), Some(e)) => Err(e),
        (Err(e), None) => Err(e.into()),
    }
}

fn timer(enabled: bool) -> Box<dyn FnMut() -> f64> {
    if enabled {
        let start = Instant::now();
        Box::new(move || start.elapsed().as_secs_f64())
    } else {
        Box::new(train::no_clock())
    }
}

fn load_split(d: &DataArgs, cfg: &RunConfig) -> Result<SplitResult> {
    match (&d.manifest, &d.train, &d.test) {
        (Some(m), _, _) => Ok(data::subject_split(
            &manifest::load_manifest(m)?,
            cfg.split_fraction,
            cfg.seeds.split,
        )?),
        (None, Some(train), Some(test)) => Ok(SplitResult {
            train: manifest::load_manifest(train)?,
            test: manifest::load_manifest(test)?,
            seed: cfg.seeds.split,
        }),
        _ => Err(AppError::Usage("give --manifest, or both --train and --test".into())),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    announce(&cfg);
    let train_side = match (&a.manifest, &a.train) {
        (Some(m), _) => data::subject_split(&manifest::load_manifest(m)?, cfg.split_fraction, cfg.seeds.split)?.train,
        (None, Some(t)) => manifest::load_manifest(t)?,
        (None, None) => return Err(AppError::Usage("give --manifest or --train".into())),
    };
    let split = SplitResult {
        train: train_side,
        test: DatasetManifest::new(Vec::new())?,
        seed: cfg.seeds.split,
    };
    let size = cfg.input_size.unwrap_or(a.arch.native_input());
    let prepared = with_loader(|load| PreparedData::from_split(&split, size, load))?;
    let opts = cfg.compare_options();
    let mut g = zoo::build(
        a.arch,
        &ZooConfig {
            class_count: opts.source_classes,
            input_size: opts.input_size,
            width_divisor: opts.width_divisor,
            seed: cfg.seeds.init,
        },
    )?;
    if let Some(path) = &a.pretrained {
        formats::load_weights(&mut g, path)?;
    }
    g.replace_head(2, rng::derive_seed(cfg.seeds.init, 0x4ead))?;
    let mut train_cfg = cfg.train_config();
    train_cfg.freeze_boundary = train_cfg.resolved_boundary(a.arch);
    let history = train::train(&mut g, &prepared.train, &train_cfg, &mut *timer(cfg.timing))?;

    let card = ModelCard {
        architecture: a.arch,
        zoo: ZooConfig {
            class_count: 2,
            input_size: opts.input_size,
            width_divisor: opts.width_divisor,
            seed: cfg.seeds.init,
        },
        stats: prepared.stats.clone(),
        config: cfg.clone(),
    };
    formats::save_weights(&g, &a.out.join(MODEL_WEIGHTS))?;
    error::write(&a.out.join(MODEL_CARD), &report::to_json(&card))?;
    error::write(
        &a.out.join("history.json"),
        &report::to_json(&report::WithConfig {
            config: &cfg,
            body: &history,
        }),
    )?;
    print_history(&history);
    say!("model written to {}", a.out.display());
    Ok(())
}

fn print_history(h: &TrainHistory) {
    if let Some(last) = h.last() {
        say!(
            "epochs {} final loss {:.6} train accuracy {:.4} seconds {:.1}",
            h.epochs.len(),
            last.mean_loss,
            last.train_accuracy,
            h.total_seconds()
        );
    }
}

/// Rebuilds a model saved by `train`.
pub fn load_model(dir: &Path) -> Result<(ModelGraph, ModelCard)> {
    let card_path = dir.join(MODEL_CARD);
    let card: ModelCard =
        serde_json::from_slice(&error::read(&card_path)?).map_err(|e| AppError::format(&card_path, e.to_string()))?;
    let mut g = zoo::build(card.architecture, &card.zoo)?;
    formats::load_weights(&mut g, &dir.join(MODEL_WEIGHTS))?;
    Ok((g, card))
}

fn network_input(img: &Tensor, size: usize, stats: &NormStats) -> Result<Tensor> {
    let x = data::to_network_input(img, Shape2D::square(size)?, stats)?;
    let dims = x.shape().to_vec();
    Ok(x.reshape(&[1, dims[0], dims[1], dims[2]])?)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (g, card) = load_model(&a.model)?;
    announce(&card.config);
    let m = manifest::load_manifest(&a.test)?;
    let size = card.input_size();
    let samples = m
        .records()
        .iter()
        .map(|r| {
            Ok(Sample {
                subject_id: r.subject_id.clone(),
                label: r.label,
                plane: r.plane,
                input: network_input(&load_record(r)?, size, &card.stats)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let eval = train::evaluate(&g, &samples)?;
    error::write(
        &a.out.join("eval.json"),
        &report::to_json(&report::WithConfig {
            config: &card.config,
            body: &eval,
        }),
    )?;
    print_eval(card.architecture, &eval);
    Ok(())
}

fn print_eval(arch: ArchitectureId, e: &EvalReport) {
    say!(
        "{arch}: subject accuracy {:.4} ({} subjects), slice accuracy {:.4} ({} slices), confusion {:?}",
        e.subject_accuracy,
        e.subject_count,
        e.slice_accuracy,
        e.slice_count,
        e.confusion_matrix
    );
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    announce(&cfg);
    let split = load_split(&a.data, &cfg)?;
    let mut pretrained = BTreeMap::new();
    for (arch, path) in &a.pretrained {
        pretrained.insert(*arch, formats::read_weights(path)?);
    }
    let mut stash: Option<AppError> = None;
    let mut load = |size: usize| {
        with_loader(|load| PreparedData::from_split(&split, size, load)).map_err(|e| {
            let msg = e.to_string();
            stash.get_or_insert(e);
            CoreError::Dataset(msg)
        })
    };
    let outcome = train::compare(
        &a.archs,
        &cfg.compare_options(),
        &cfg.train_config(),
        &pretrained,
        &mut load,
        &mut *timer(cfg.timing),
    );
    let (report, runs) = match (outcome, stash) {
        (Ok(v), _) => v,
        (Err(_), Some(e)) => return Err(e),
        (Err(e), None) => return Err(e.into()),
    };
    for run in &runs {
        let name = run.row.architecture.name();
        error::write(
            &a.out.join(format!("history_{name}.json")),
            &report::to_json(&report::WithConfig {
                config: &cfg,
                body: &run.history,
            }),
        )?;
        error::write(
            &a.out.join(format!("eval_{name}.json")),
            &report::to_json(&report::WithConfig {
                config: &cfg,
                body: &run.eval,
            }),
        )?;
        print_eval(run.row.architecture, &run.eval);
    }
    error::write(
        &a.out.join("comparison.json"),
        &report::to_json(&report::WithConfig {
            config: &cfg,
            body: &report,
        }),
    )?;
    error::write(
        &a.out.join("comparison.csv"),
        report::comparison_csv(&report).as_bytes(),
    )?;
    error::write(&a.out.join("figure.svg"), report::comparison_svg(&report).as_bytes())?;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(report::comparison_csv(&report).as_bytes());
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let (g, card) = load_model(&a.model)?;
    let img = imageio::decode_image(&a.image)?;
    let x = network_input(&img, card.input_size(), &card.stats)?;
    let (label, p) = train::predict(&g, &x)?;
    say!("{} {label} {p:.6}", a.image.display());
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let cfg = ZooConfig {
        class_count: a.classes,
        input_size: a.input_size,
        width_divisor: a.width_divisor,
        seed: 0,
    };
    let g = zoo::build(a.arch, &cfg)?;
    if a.json {
        let mut out = std::io::stdout().lock();
        let _ = out.write_all(&report::to_json(&g.summary()));
        return Ok(());
    }
    let census = g.census();
    say!(
        "{} census: conv={} fc={} params={} trainable={}",
        a.arch,
        census.conv(),
        census.fc(),
        census.total_params,
        census.trainable_params
    );
    if let Some(note) = a.arch.census_note() {
        say!("note: {note}");
    }
    for module in zoo::inception_modules(&g) {
        say!("inception {module}: kernels {:?}", zoo::inception_kernels(&g, &module));
    }
    for n in g.summary().nodes {
        say!("{:<22} {:<16} {:?} params={}", n.id, n.kind.name(), n.shape, n.params);
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let layers: Vec<CheckedLayer> = match &a.layer {
        Some(name) => vec![CheckedLayer::ALL
            .into_iter()
            .find(|l| l.name() == name)
            .ok_or_else(|| {
                let names: Vec<&str> = CheckedLayer::ALL.iter().map(|l| l.name()).collect();
                AppError::Usage(format!("unknown layer `{name}`; one of {}", names.join(", ")))
            })?],
        None => CheckedLayer::ALL.to_vec(),
    };
    if a.instances == 0 {
        return Err(AppError::Usage("--instances must be positive".into()));
    }
    let rows = gradcheck::gradient_suite(a.instances, a.seed)?;
    let mut ok = true;
    for row in rows.iter().filter(|r| layers.contains(&r.layer)) {
        say!("{}", gradcheck::describe(row));
        ok &= row.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(AppError::Numeric("gradient check failed".into()))
    }
}
