//! Command-line front end.
//!
//! Exit codes: 0 success or accepted match, 1 operational error, 2 negative
//! decision (rejected by threshold or empty database).
//!
//! `--config <file>` reads TOML whose keys are the long flag names of the
//! chosen subcommand (either at top level or in a table named after the
//! subcommand). Flags given on the command line win. `--dump-config` prints
//! the effective flags in the same format and exits.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::augmentation::{
    builtin_templates, derive_seed, expand_dataset, load_bundle, run_pipeline, write_bundle, KeypointSource,
    MaskTemplate, PipelineConfig, StageToggles, TemplateChoice, UnderwaterParams, STAGE_NAMES,
};
use crate::embedding::{
    train_embedding, ArcMargin, Composition, Embedding, EmbeddingConfig, EmbeddingModel, LabeledFace, Preprocess,
    TrainOptions,
};
use crate::evalkit::{
    build_assets, emit_scatter, evaluate, pca_fit, run_experiment, sweep, write_loss_csv, write_sweep_csv,
    ExperimentConfig, Fingerprint, Query, Strategy, SweepAxes,
};
use crate::identity::{sha256_hex, Decision, EnrollMeta, IdentityDatabase};
use crate::imaging::FaceImage;
use crate::keypoints::{continue_training, load_keypoint_csv, train_keypoints, KeypointRegressor, KeypointSet, KeypointTrainConfig};
use crate::synth::{keypoint_samples, write_keypoint_csv, Cohort};

#[derive(Parser, Debug)]
#[command(name = "diverid", version, about = "Diver face augmentation, embedding training and identification")]
pub struct Cli {
    /// Master seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// TOML file of flag values; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Expand regular faces into diver faces (every mask × snorkel pair).
    Augment(AugmentArgs),
    /// Train the landmark regressor on a 15-keypoint CSV.
    TrainKeypoints(TrainKeypointsArgs),
    /// Train the embedding network on a labeled image tree.
    TrainEmbed(TrainEmbedArgs),
    /// Add a subject's embeddings to a database.
    Enroll(EnrollArgs),
    /// Identify the subject in a query image.
    Identify(IdentifyArgs),
    /// Top-1 accuracy of a database against a labeled query tree.
    Eval(EvalArgs),
    /// Seeded synthetic experiment comparing matching strategies.
    Experiment(ExperimentArgs),
    /// Train and evaluate one model per configuration cell.
    Sweep(SweepArgs),
    /// Project database embeddings to 2-D and write scatter data.
    Pca(PcaArgs),
    /// Time embedding extraction plus identification.
    Bench(BenchArgs),
    /// Enroll embeddings from a JSON export.
    ImportEmbeddings(ImportArgs),
    /// Write a database as JSON.
    Export(ExportArgs),
    /// Render a synthetic cohort of face photos with landmarks.
    Synth(SynthArgs),
    /// Write the built-in mask and snorkel templates.
    MakeTemplates(MakeTemplatesArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Augment(_) => "augment",
            Command::TrainKeypoints(_) => "train-keypoints",
            Command::TrainEmbed(_) => "train-embed",
            Command::Enroll(_) => "enroll",
            Command::Identify(_) => "identify",
            Command::Eval(_) => "eval",
            Command::Experiment(_) => "experiment",
            Command::Sweep(_) => "sweep",
            Command::Pca(_) => "pca",
            Command::Bench(_) => "bench",
            Command::ImportEmbeddings(_) => "import-embeddings",
            Command::Export(_) => "export",
            Command::Synth(_) => "synth",
            Command::MakeTemplates(_) => "make-templates",
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct PipelineFlags {
    /// Stage letters to skip (a frontalize, b auto-crop, c color-correct,
    /// d mask, e colorize, f fisheye, g tight-crop).
    #[arg(long, default_value = "")]
    pub skip_stages: String,
    #[arg(long, default_value_t = 0.25)]
    pub fisheye_k: f64,
    #[arg(long, default_value_t = 0.35)]
    pub tight_margin: f64,
    #[arg(long, default_value_t = 0.45)]
    pub auto_crop_margin: f64,
    /// Relative jitter of depth, veil weight and fisheye strength.
    #[arg(long, default_value_t = 0.15)]
    pub jitter: f64,
    #[arg(long, default_value_t = 3.0)]
    pub depth: f64,
    #[arg(long, default_value_t = 0.25)]
    pub beta: f64,
    /// Per-channel attenuation R,G,B.
    #[arg(long, value_delimiter = ',', default_values_t = [0.60, 0.20, 0.08])]
    pub attenuation: Vec<f64>,
    /// Veiling light R,G,B.
    #[arg(long, value_delimiter = ',', default_values_t = [8.0, 110.0, 130.0])]
    pub veil: Vec<f64>,
}

impl PipelineFlags {
    pub fn to_config(&self) -> Result<PipelineConfig> {
        let mut stages = StageToggles::all(true);
        for c in self.skip_stages.chars() {
            let flag = match c {
                'a' => &mut stages.frontalize,
                'b' => &mut stages.auto_crop,
                'c' => &mut stages.color_correct,
                'd' => &mut stages.mask,
                'e' => &mut stages.colorize,
                'f' => &mut stages.fisheye,
                'g' => &mut stages.tight_crop,
                ',' | ' ' => continue,
                _ => bail!(
                    "unknown stage {c:?}; stages are {}",
                    STAGE_NAMES.iter().map(|(l, n)| format!("{l} ({n})")).collect::<Vec<_>>().join(", ")
                ),
            };
            *flag = false;
        }
        let three = |v: &[f64], name: &str| -> Result<[f64; 3]> {
            v.try_into().map_err(|_| anyhow!("--{name} takes three comma-separated values"))
        };
        Ok(PipelineConfig {
            stages,
            underwater: UnderwaterParams {
                attenuation: three(&self.attenuation, "attenuation")?,
                depth: self.depth,
                veil: three(&self.veil, "veil")?,
                beta: self.beta,
            },
            fisheye_k: self.fisheye_k,
            tight_margin: self.tight_margin,
            auto_crop_margin: self.auto_crop_margin,
            jitter: self.jitter,
            mask: TemplateChoice::Random,
            snorkel: TemplateChoice::Random,
        })
    }
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Directory of face images (and one level of subdirectories).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Template bundle directory; the built-in set when omitted.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Landmark regressor used when an image has no `.kps.json` sidecar.
    #[arg(long)]
    pub keypoints_model: Option<PathBuf>,
    /// Also write every stage of the first variant.
    #[arg(long)]
    pub keep_stages: bool,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Args, Debug)]
pub struct TrainKeypointsArgs {
    /// Keypoint CSV (30 coordinate columns plus Image).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Continue from this checkpoint, keeping its optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Loss history CSV; `<out>.loss.csv` when omitted.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainEmbedArgs {
    /// `<data>/<subject>/*.png`; files named `*.orig.png` are regular faces,
    /// all others diver faces.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
    #[arg(long, default_value = "toy-cnn")]
    pub backbone: String,
    #[arg(long, default_value_t = 112)]
    pub input_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub margin: f64,
    #[arg(long, default_value_t = 64.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// diver-only or diver-and-regular.
    #[arg(long, default_value = "diver-and-regular", value_parser = parse_composition)]
    pub composition: Composition,
    /// Frontalize before embedding (needs `.kps.json` sidecars).
    #[arg(long)]
    pub frontalize: bool,
    #[arg(long)]
    pub no_center_crop: bool,
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EnrollArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub subject: String,
    /// Regular face photos of the subject.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub images: Vec<PathBuf>,
    /// JSON array of embedding vectors, instead of images.
    #[arg(long, conflicts_with = "images")]
    pub embeddings: Option<PathBuf>,
    /// Embedding checkpoint (needed with --images).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Embed the images as they are, without diver augmentation.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub keypoints_model: Option<PathBuf>,
    /// Enrollment time in Unix seconds (default: SOURCE_DATE_EPOCH or now).
    #[arg(long)]
    pub timestamp: Option<u64>,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Args, Debug)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub keypoints_model: Option<PathBuf>,
    /// Reject matches whose cosine similarity is below this value.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// `<queries>/<subject>/*.png`
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub keypoints_model: Option<PathBuf>,
    /// Per-sample CSV output.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub subjects: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
    #[arg(long, default_value_t = 2024)]
    pub cohort_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "diver-diver,regular-diver")]
    pub strategies: Vec<Strategy>,
    /// `<dir>/<subject>/*.png` converted queries for regular-demasked.
    #[arg(long)]
    pub demasked: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "128,512")]
    pub dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "false")]
    pub frontalization: Vec<bool>,
    #[arg(long, value_delimiter = ',', default_value = "diver-only", value_parser = parse_composition)]
    pub compositions: Vec<Composition>,
    #[arg(long, value_delimiter = ',', default_value = "toy-cnn")]
    pub backbones: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub subjects: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2024)]
    pub cohort_seed: u64,
}

#[derive(Args, Debug)]
pub struct PcaArgs {
    #[arg(long, required_unless_present = "embeddings")]
    pub db: Option<PathBuf>,
    /// JSON export (as written by `export`) instead of a database.
    #[arg(long, conflicts_with = "db")]
    pub embeddings: Option<PathBuf>,
    /// Scatter CSV (`subject,x,y`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// JSON export (as written by `export`).
    #[arg(long)]
    pub file: PathBuf,
    /// Rescale vectors to unit norm instead of rejecting them.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub subjects: usize,
    #[arg(long, default_value_t = 4)]
    pub photos: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Also write `keypoints.csv` with this many 96×96 samples.
    #[arg(long, default_value_t = 0)]
    pub keypoint_samples: usize,
}

#[derive(Args, Debug)]
pub struct MakeTemplatesArgs {
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_composition(s: &str) -> Result<Composition, String> {
    match s {
        "diver-only" | "diver" => Ok(Composition::DiverOnly),
        "diver-and-regular" | "diver+regular" => Ok(Composition::DiverAndRegular),
        _ => Err(format!("unknown composition {s:?} (diver-only or diver-and-regular)")),
    }
}

/// Negative decisions map to exit code 2.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Negative,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (cli, dump) = match parse(&args) {
        Ok(v) => v,
        Err(e) => {
            if let Some(ce) = e.downcast_ref::<clap::Error>() {
                let code = match ce.kind() {
                    clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                    _ => 1,
                };
                let _ = ce.print();
                return code;
            }
            eprintln!("error: {e:#}");
            return 1;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    if let Some(text) = dump {
        print!("{text}");
        return 0;
    }
    match run(cli) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::Negative) => 2,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

const META_FLAGS: [&str; 5] = ["config", "dump_config", "verbose", "help", "version"];

/// Command-line parse with the config file merged in underneath. Returns
/// the dump text when `--dump-config` was given.
fn parse(args: &[OsString]) -> Result<(Cli, Option<String>)> {
    let mut cmd = Cli::command();
    cmd.build();
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let sub_pos = strs
        .iter()
        .skip(1)
        .position(|a| cmd.find_subcommand(a).is_some())
        .map(|p| p + 1);
    let config = strs.iter().enumerate().skip(1).find_map(|(i, a)| {
        a.strip_prefix("--config=")
            .map(str::to_string)
            .or_else(|| (a == "--config").then(|| strs.get(i + 1).cloned()).flatten())
    });
    let mut argv = args.to_vec();
    if let (Some(path), Some(pos)) = (config, sub_pos) {
        let sub_name = strs[pos].clone();
        let sub_cmd = cmd.find_subcommand(&sub_name).expect("known subcommand").clone();
        let given: Vec<&str> = strs[1..]
            .iter()
            .filter_map(|a| a.strip_prefix("--"))
            .map(|a| a.split('=').next().unwrap_or(a))
            .collect();
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
        let table: toml::Table = text.parse().with_context(|| format!("parsing config {path}"))?;
        let subcommands: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_string()).collect();
        let mut flat = BTreeMap::new();
        for (k, v) in &table {
            match v {
                toml::Value::Table(t) if *k == sub_name => {
                    for (k2, v2) in t {
                        flat.insert(k2.clone(), v2.clone());
                    }
                }
                toml::Value::Table(_) if subcommands.contains(k) => {}
                _ => {
                    flat.entry(k.clone()).or_insert_with(|| v.clone());
                }
            }
        }
        let mut injected: Vec<OsString> = Vec::new();
        for (key, value) in flat {
            let arg = sub_cmd
                .get_arguments()
                .find(|a| a.get_long() == Some(key.as_str()))
                .ok_or_else(|| anyhow!("config key {key:?} is not a flag of {sub_name}"))?;
            if META_FLAGS.contains(&arg.get_id().as_str()) {
                bail!("config key {key:?} cannot be set from a config file");
            }
            if given.contains(&key.as_str()) {
                continue;
            }
            let flag = format!("--{key}");
            match (&value, arg.get_action()) {
                (toml::Value::Boolean(b), ArgAction::SetTrue) => {
                    if *b {
                        injected.push(flag.into());
                    }
                }
                (v, _) => {
                    injected.push(format!("{flag}={}", toml_to_arg(v).with_context(|| format!("config key {key}"))?).into());
                }
            }
        }
        argv.splice(pos + 1..pos + 1, injected);
    }
    let matches = cmd.clone().try_get_matches_from(&argv)?;
    let cli = Cli::from_arg_matches(&matches)?;
    let dump = if cli.dump_config {
        let (name, sub_m) = matches.subcommand().expect("subcommand is required");
        let sub_cmd = cmd.find_subcommand(name).expect("known subcommand");
        Some(dump_config(sub_cmd, sub_m, cli.seed)?)
    } else {
        None
    };
    Ok((cli, dump))
}

fn toml_to_arg(v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(a) => a.iter().map(toml_to_arg).collect::<Result<Vec<_>>>()?.join(","),
        _ => bail!("unsupported value {v}"),
    })
}

fn scalar_to_toml(s: &str) -> toml::Value {
    if let Ok(i) = s.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(b) = s.parse::<bool>() {
        toml::Value::Boolean(b)
    } else if let Some(f) = s.parse::<f64>().ok().filter(|f| f.is_finite()) {
        toml::Value::Float(f)
    } else {
        toml::Value::String(s.to_string())
    }
}

fn dump_config(sub: &clap::Command, m: &ArgMatches, seed: u64) -> Result<String> {
    let mut t = toml::Table::new();
    t.insert("seed".into(), toml::Value::Integer(seed as i64));
    for arg in sub.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if META_FLAGS.contains(&id) || id == "seed" {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            t.insert(long.into(), toml::Value::Boolean(m.get_flag(id)));
            continue;
        }
        let Some(raw) = m.get_raw(id) else { continue };
        let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
        let multi = arg.get_value_delimiter().is_some() || arg.get_num_args().is_some_and(|n| n.max_values() > 1);
        let value = if multi {
            let items: Vec<String> = vals.iter().flat_map(|v| v.split(',').map(str::to_string)).filter(|s| !s.is_empty()).collect();
            toml::Value::Array(items.iter().map(|s| scalar_to_toml(s)).collect())
        } else {
            let v = vals.concat();
            let is_path = arg.get_value_hint() == clap::ValueHint::AnyPath || long == "skip-stages" || long == "subject" || long == "backbone";
            if is_path || matches!(long, "db" | "model" | "image" | "out" | "data" | "input") {
                toml::Value::String(v)
            } else {
                scalar_to_toml(&v)
            }
        };
        t.insert(long.into(), value);
    }
    Ok(toml::to_string(&t)?)
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let seed = cli.seed;
    log::debug!("running {}", cli.command.name());
    match cli.command {
        Command::Augment(a) => cmd_augment(a, seed),
        Command::TrainKeypoints(a) => cmd_train_keypoints(a, seed),
        Command::TrainEmbed(a) => cmd_train_embed(a, seed),
        Command::Enroll(a) => cmd_enroll(a, seed),
        Command::Identify(a) => cmd_identify(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Experiment(a) => cmd_experiment(a, seed),
        Command::Sweep(a) => cmd_sweep(a, seed),
        Command::Pca(a) => cmd_pca(a),
        Command::Bench(a) => cmd_bench(a),
        Command::ImportEmbeddings(a) => cmd_import(a),
        Command::Export(a) => cmd_export(a),
        Command::Synth(a) => cmd_synth(a, seed),
        Command::MakeTemplates(a) => {
            for p in write_bundle(&a.out)? {
                println!("{}", p.display());
            }
            Ok(Outcome::Success)
        }
    }
}

fn is_image(p: &Path) -> bool {
    p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| matches!(e, "png" | "ppm" | "pgm"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Images directly in `dir` and in its immediate subdirectories, as paths
/// relative to `dir`.
fn collect_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in sorted_entries(dir)? {
        if is_image(&p) {
            out.push(p.strip_prefix(dir).expect("child").to_path_buf());
        } else if p.is_dir() {
            for q in sorted_entries(&p)? {
                if is_image(&q) {
                    out.push(q.strip_prefix(dir).expect("child").to_path_buf());
                }
            }
        }
    }
    Ok(out)
}

/// `<stem>.kps.json` beside an image.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("kps.json")
}

fn load_sidecar(image: &Path) -> Result<Option<KeypointSet>> {
    let p = sidecar_path(image);
    if p.exists() {
        Ok(Some(KeypointSet::load_json(&p).with_context(|| format!("reading {}", p.display()))?))
    } else {
        Ok(None)
    }
}

fn load_templates(dir: Option<&Path>) -> Result<Vec<MaskTemplate>> {
    match dir {
        Some(d) => load_bundle(d).with_context(|| format!("loading templates from {}", d.display())),
        None => Ok(builtin_templates()),
    }
}

fn load_regressor(path: Option<&Path>) -> Result<Option<KeypointRegressor>> {
    path.map(|p| KeypointRegressor::load(p).with_context(|| format!("loading keypoint model {}", p.display())))
        .transpose()
}

fn keypoints_for(image_path: &Path, img: &FaceImage, reg: Option<&KeypointRegressor>) -> Result<Option<KeypointSet>> {
    if let Some(k) = load_sidecar(image_path)? {
        return Ok(Some(k));
    }
    reg.map(|r| r.predict(img).map_err(anyhow::Error::from)).transpose()
}

fn cmd_augment(a: AugmentArgs, seed: u64) -> Result<Outcome> {
    let cfg = a.pipeline.to_config()?;
    let templates = load_templates(a.templates.as_deref())?;
    let reg = load_regressor(a.keypoints_model.as_deref())?;
    let inputs = collect_images(&a.input)?;
    if inputs.is_empty() {
        bail!("no images in {}", a.input.display());
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut manifest = csv::Writer::from_path(a.out.join("manifest.csv"))?;
    manifest.write_record(["output", "source", "mask", "snorkel", "seed"])?;
    let mut failed = 0;
    for (i, rel) in inputs.iter().enumerate() {
        let item_seed = derive_seed(seed, i as u64);
        let result = (|| -> Result<Vec<[String; 5]>> {
            let src = a.input.join(rel);
            let img = FaceImage::load(&src)?;
            let kps = load_sidecar(&src)?;
            let source = match (&kps, &reg) {
                (Some(k), _) => KeypointSource::Given(k),
                (None, Some(r)) => KeypointSource::Regressor(r),
                (None, None) => KeypointSource::Unavailable,
            };
            let samples = expand_dataset(&[(img.clone(), source)], &templates, &cfg, item_seed)?;
            let dir = a.out.join(rel.parent().unwrap_or(Path::new("")));
            std::fs::create_dir_all(&dir)?;
            let stem = rel.file_stem().expect("image file").to_string_lossy().into_owned();
            let mut rows = Vec::new();
            for s in samples {
                let (name, mask, snorkel) = match &s.variant {
                    None => (format!("{stem}.orig.png"), String::new(), String::new()),
                    Some((m, n)) => (format!("{stem}.{m}.{n}.png"), m.clone(), n.clone()),
                };
                let out = dir.join(&name);
                s.image.save(&out)?;
                if let Some(k) = &s.keypoints {
                    k.save_json(&sidecar_path(&out))?;
                }
                let rel_out = out.strip_prefix(&a.out).expect("under out").display().to_string();
                rows.push([rel_out, rel.display().to_string(), mask, snorkel, item_seed.to_string()]);
            }
            if a.keep_stages {
                let first = PipelineConfig {
                    mask: TemplateChoice::Index(0),
                    snorkel: TemplateChoice::Index(0),
                    ..cfg.clone()
                };
                let r = run_pipeline(&img, source, &templates, &first, derive_seed(derive_seed(item_seed, 0), 0), true)?;
                r.write_stages(&dir, &stem)?;
            }
            Ok(rows)
        })();
        match result {
            Ok(rows) => {
                for r in rows {
                    manifest.write_record(&r)?;
                }
            }
            Err(e) => {
                failed += 1;
                eprintln!("error: {}: {e:#}", rel.display());
            }
        }
    }
    manifest.flush()?;
    println!("augmented {} of {} images into {}", inputs.len() - failed, inputs.len(), a.out.display());
    if failed > 0 {
        bail!("{failed} of {} inputs failed", inputs.len());
    }
    Ok(Outcome::Success)
}

fn history_path(out: &Path, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".loss.csv");
        PathBuf::from(s)
    })
}

fn check_history(history: &[f64]) -> Result<()> {
    if let Some(i) = history.iter().position(|v| !v.is_finite()) {
        bail!("training loss became non-finite at epoch {i}");
    }
    Ok(())
}

fn cmd_train_keypoints(a: TrainKeypointsArgs, seed: u64) -> Result<Outcome> {
    let load = load_keypoint_csv(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    if load.dropped > 0 {
        log::warn!("dropped {} rows with missing keypoints", load.dropped);
    }
    let cfg = KeypointTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed,
    };
    let (reg, history) = match &a.resume {
        Some(p) => {
            let reg = KeypointRegressor::load(p).with_context(|| format!("loading {}", p.display()))?;
            continue_training(reg, &load.dataset, &cfg)?
        }
        None => train_keypoints(&load.dataset, &cfg)?,
    };
    check_history(&history)?;
    reg.save(&a.out)?;
    let hp = history_path(&a.out, a.history);
    write_loss_csv(&hp, &history)?;
    let step = reg.optimizer.as_ref().map_or(0, |o| o.step);
    println!(
        "trained on {} samples; final mse {:.6}; optimizer step {step}; wrote {}",
        load.dataset.len(),
        history.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(Outcome::Success)
}

/// Subject directories become labels in sorted order.
fn load_labeled_tree(dir: &Path) -> Result<(Vec<String>, Vec<LabeledFace>)> {
    let mut subjects = Vec::new();
    let mut faces = Vec::new();
    for sub in sorted_entries(dir)? {
        if !sub.is_dir() {
            continue;
        }
        let label = subjects.len();
        let mut any = false;
        for f in sorted_entries(&sub)? {
            if !is_image(&f) {
                continue;
            }
            let image = FaceImage::load(&f).with_context(|| format!("loading {}", f.display()))?;
            let diver = !f.to_string_lossy().ends_with(".orig.png");
            faces.push(LabeledFace {
                keypoints: load_sidecar(&f)?,
                image,
                label,
                diver,
            });
            any = true;
        }
        if any {
            subjects.push(sub.file_name().expect("dir name").to_string_lossy().into_owned());
        }
    }
    if faces.is_empty() {
        bail!("no labeled images under {}", dir.display());
    }
    Ok((subjects, faces))
}

fn cmd_train_embed(a: TrainEmbedArgs, seed: u64) -> Result<Outcome> {
    let (subjects, faces) = load_labeled_tree(&a.data)?;
    let cfg = EmbeddingConfig {
        dim: a.dim,
        arc: ArcMargin {
            margin: a.margin,
            scale: a.scale,
        },
        classes: subjects.len(),
        input_size: a.input_size,
        backbone: a.backbone.clone(),
        preprocess: Preprocess {
            center_crop: !a.no_center_crop,
            frontalize: a.frontalize,
        },
    };
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed,
    };
    let selected = a.composition.select(&faces);
    let out = train_embedding(&selected, &cfg, &opts)?;
    check_history(&out.history)?;
    out.model.save(&a.out)?;
    write_loss_csv(&history_path(&a.out, a.history), &out.history)?;
    println!(
        "trained {} subjects on {} images; final loss {:.5}; wrote {}",
        subjects.len(),
        selected.len(),
        out.history.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(Outcome::Success)
}

fn now_or_env(explicit: Option<u64>) -> u64 {
    explicit
        .or_else(|| std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()))
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

fn open_db(path: &Path, dim: usize) -> Result<IdentityDatabase> {
    if path.exists() {
        let db = IdentityDatabase::load(path).with_context(|| format!("loading {}", path.display()))?;
        if db.dim() != dim {
            bail!("{} holds {}-D embeddings, got {dim}-D", path.display(), db.dim());
        }
        Ok(db)
    } else {
        Ok(IdentityDatabase::new(dim))
    }
}

fn load_model(path: &Path) -> Result<EmbeddingModel> {
    EmbeddingModel::load(path).with_context(|| format!("loading embedding model {}", path.display()))
}

fn cmd_enroll(a: EnrollArgs, seed: u64) -> Result<Outcome> {
    let enrolled_at = now_or_env(a.timestamp);
    let mut failed = 0;
    let (embeddings, hashes, source) = if let Some(file) = &a.embeddings {
        let bytes = std::fs::read(file).with_context(|| format!("reading {}", file.display()))?;
        let vecs: Vec<Vec<f32>> = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", file.display()))?;
        let embs = vecs.into_iter().map(Embedding::new).collect::<Result<Vec<_>, _>>()?;
        (embs, vec![sha256_hex(&bytes)], "embedding-file".to_string())
    } else {
        if a.images.is_empty() {
            bail!("enroll needs --images or --embeddings");
        }
        let model = load_model(a.model.as_deref().ok_or_else(|| anyhow!("--model is required with --images"))?)?;
        let cfg = a.pipeline.to_config()?;
        let templates = load_templates(a.templates.as_deref())?;
        let reg = load_regressor(a.keypoints_model.as_deref())?;
        let mut embs = Vec::new();
        let mut hashes = Vec::new();
        for (i, path) in a.images.iter().enumerate() {
            let r = (|| -> Result<(Embedding, String)> {
                let bytes = std::fs::read(path)?;
                let img = FaceImage::load(path)?;
                let kps = keypoints_for(path, &img, reg.as_ref())?;
                let (img, kps) = if a.raw {
                    (img, kps)
                } else {
                    let source = kps.as_ref().map_or(KeypointSource::Unavailable, KeypointSource::Given);
                    let out = run_pipeline(&img, source, &templates, &cfg, derive_seed(seed, i as u64), false)?;
                    (out.image, out.keypoints)
                };
                Ok((model.extract(&img, kps.as_ref())?, sha256_hex(&bytes)))
            })();
            match r {
                Ok((e, h)) => {
                    embs.push(e);
                    hashes.push(h);
                }
                Err(e) => {
                    failed += 1;
                    eprintln!("error: {}: {e:#}", path.display());
                }
            }
        }
        let source = if a.raw { "raw" } else { "augmentation-pipeline" };
        (embs, hashes, source.to_string())
    };
    if embeddings.is_empty() {
        bail!("no embeddings to enroll for {}", a.subject);
    }
    let mut db = open_db(&a.db, embeddings[0].dim())?;
    let outcome = db.enroll(
        &a.subject,
        embeddings,
        Some(EnrollMeta {
            source_hashes: hashes,
            enrolled_at,
            source,
        }),
    )?;
    db.save(&a.db)?;
    println!("{}: {} embedding(s) in {}", a.subject, outcome.total, a.db.display());
    if outcome.under_enrolled {
        eprintln!("warning: {} has fewer than 2 embeddings", a.subject);
    }
    if failed > 0 {
        bail!("{failed} image(s) could not be enrolled");
    }
    Ok(Outcome::Success)
}

fn cmd_identify(a: IdentifyArgs) -> Result<Outcome> {
    let db = IdentityDatabase::load(&a.db).with_context(|| format!("loading {}", a.db.display()))?;
    let model = load_model(&a.model)?;
    let reg = load_regressor(a.keypoints_model.as_deref())?;
    let img = FaceImage::load(&a.image).with_context(|| format!("loading {}", a.image.display()))?;
    let kps = if model.config.preprocess.frontalize {
        keypoints_for(&a.image, &img, reg.as_ref())?
    } else {
        None
    };
    let q = model.extract(&img, kps.as_ref())?;
    let m = db.identify(&q, a.threshold)?;
    let decision = match m.decision {
        Decision::Accepted => "accepted",
        Decision::RejectedByThreshold => "rejected",
        Decision::NoEntries => "no-entries",
    };
    if a.json {
        let scores: BTreeMap<&str, f64> = m.scores.iter().map(|(s, v)| (s.as_str(), *v)).collect();
        let v = serde_json::json!({
            "subject": m.best.as_ref().map(|b| &b.0),
            "similarity": m.best.as_ref().map(|b| b.1),
            "decision": decision,
            "threshold": a.threshold,
            "scores": scores,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        match &m.best {
            Some((s, cs)) => println!("{s}\t{cs:.6}\t{decision}"),
            None => println!("-\t-\t{decision}"),
        }
    }
    Ok(if m.decision == Decision::Accepted {
        Outcome::Success
    } else {
        Outcome::Negative
    })
}

fn cmd_eval(a: EvalArgs) -> Result<Outcome> {
    let db = IdentityDatabase::load(&a.db).with_context(|| format!("loading {}", a.db.display()))?;
    let model = load_model(&a.model)?;
    let reg = load_regressor(a.keypoints_model.as_deref())?;
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for rel in collect_images(&a.queries)? {
        let Some(subject) = rel.parent().and_then(|p| p.file_name()) else {
            log::warn!("{} is not inside a subject directory; skipped", rel.display());
            continue;
        };
        let path = a.queries.join(&rel);
        let img = FaceImage::load(&path).with_context(|| format!("loading {}", path.display()))?;
        let kps = if model.config.preprocess.frontalize {
            keypoints_for(&path, &img, reg.as_ref())?
        } else {
            None
        };
        labels.push((rel.display().to_string(), subject.to_string_lossy().into_owned()));
        items.push((img, kps));
    }
    let embs = model.extract_batch(&items)?;
    let queries: Vec<Query> = labels
        .into_iter()
        .zip(embs)
        .map(|((id, subject), embedding)| Query { id, subject, embedding })
        .collect();
    let c = &model.config;
    let fp = Fingerprint {
        strategy: "database".into(),
        dim: c.dim,
        frontalization: c.preprocess.frontalize,
        composition: String::new(),
        backbone: c.backbone.clone(),
        epochs: 0,
    };
    let report = evaluate(&db, &queries, fp)?;
    if let Some(p) = &a.records {
        report.write_records_csv(p)?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("accuracy {:.4} ({}/{})", report.accuracy, report.n_correct, report.n_total);
    }
    Ok(Outcome::Success)
}

fn cmd_experiment(a: ExperimentArgs, seed: u64) -> Result<Outcome> {
    let mut cfg = ExperimentConfig {
        subjects: a.subjects,
        cohort_seed: a.cohort_seed,
        demasked_dir: a.demasked.clone(),
        ..Default::default()
    };
    cfg.embedding.dim = a.dim;
    cfg.train.epochs = a.epochs;
    cfg.train.seed = seed;
    let t0 = Instant::now();
    let r = run_experiment(&cfg, &a.strategies, Some(&a.out))?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r.reports)?);
    } else {
        for rep in &r.reports {
            println!("{:<18} accuracy {:.4} ({}/{})", rep.fingerprint.strategy, rep.accuracy, rep.n_correct, rep.n_total);
        }
        println!("artifacts in {} ({:.1?})", a.out.display(), t0.elapsed());
    }
    Ok(Outcome::Success)
}

fn cmd_sweep(a: SweepArgs, seed: u64) -> Result<Outcome> {
    let mut cfg = ExperimentConfig {
        subjects: a.subjects,
        cohort_seed: a.cohort_seed,
        ..Default::default()
    };
    cfg.train.epochs = a.epochs;
    cfg.train.seed = seed;
    let assets = build_assets(&cfg, &builtin_templates())?;
    let axes = SweepAxes {
        dims: a.dims,
        frontalization: a.frontalization,
        compositions: a.compositions,
        backbones: a.backbones,
    };
    let rows = sweep(&assets, &cfg, &axes, &a.out)?;
    let path = a.out.join("sweep.csv");
    write_sweep_csv(&path, &rows)?;
    print!("{}", std::fs::read_to_string(&path)?);
    Ok(Outcome::Success)
}

/// Subject-labeled vectors from a database or its JSON export.
fn labeled_vectors(db: Option<&Path>, export: Option<&Path>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    if let Some(p) = db {
        let db = IdentityDatabase::load(p).with_context(|| format!("loading {}", p.display()))?;
        for r in db.records() {
            for e in &r.embeddings {
                labels.push(r.subject.clone());
                data.push(e.as_slice().iter().map(|&v| v as f64).collect());
            }
        }
    } else if let Some(p) = export {
        for (s, vecs) in read_export(p)? {
            for v in vecs {
                labels.push(s.clone());
                data.push(v.into_iter().map(|x| x as f64).collect());
            }
        }
    }
    Ok((labels, data))
}

fn read_export(path: &Path) -> Result<Vec<(String, Vec<Vec<f32>>)>> {
    #[derive(serde::Deserialize)]
    struct Subject {
        id: String,
        embeddings: Vec<Vec<f32>>,
    }
    #[derive(serde::Deserialize)]
    struct Export {
        subjects: Vec<Subject>,
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let e: Export = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(e.subjects.into_iter().map(|s| (s.id, s.embeddings)).collect())
}

fn cmd_pca(a: PcaArgs) -> Result<Outcome> {
    let (labels, data) = labeled_vectors(a.db.as_deref(), a.embeddings.as_deref())?;
    let model = pca_fit(&data, 2)?;
    emit_scatter(&model, &data, &labels, &a.out)?;
    println!(
        "{} embeddings; explained variance {:.4}, {:.4}; wrote {}",
        data.len(),
        model.explained[0],
        model.explained[1],
        a.out.display()
    );
    Ok(Outcome::Success)
}

fn cmd_bench(a: BenchArgs) -> Result<Outcome> {
    if a.n == 0 {
        bail!("--n must be positive");
    }
    let db = IdentityDatabase::load(&a.db).with_context(|| format!("loading {}", a.db.display()))?;
    let model = load_model(&a.model)?;
    let img = FaceImage::load(&a.image).with_context(|| format!("loading {}", a.image.display()))?;
    let kps = load_sidecar(&a.image)?;
    let mut ms = Vec::with_capacity(a.n);
    for _ in 0..a.n {
        let t = Instant::now();
        let q = model.extract(&img, kps.as_ref())?;
        std::hint::black_box(db.identify(&q, None)?);
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = ms.clone();
    sorted.sort_by(f64::total_cmp);
    let pick = |q: f64| sorted[((q * (a.n - 1) as f64).round() as usize).min(a.n - 1)];
    let mean = ms.iter().sum::<f64>() / a.n as f64;
    if a.json {
        let v = serde_json::json!({ "runs": a.n, "median_ms": pick(0.5), "p95_ms": pick(0.95), "mean_ms": mean, "min_ms": sorted[0], "max_ms": sorted[a.n - 1] });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!(
            "{} runs: median {:.3} ms, p95 {:.3} ms, mean {:.3} ms, min {:.3} ms",
            a.n,
            pick(0.5),
            pick(0.95),
            mean,
            sorted[0]
        );
    }
    Ok(Outcome::Success)
}

fn cmd_import(a: ImportArgs) -> Result<Outcome> {
    let subjects = read_export(&a.file)?;
    let dim = subjects
        .iter()
        .flat_map(|(_, v)| v.first())
        .map(Vec::len)
        .next()
        .ok_or_else(|| anyhow!("{} holds no embeddings", a.file.display()))?;
    let mut db = open_db(&a.db, dim)?;
    let hash = sha256_hex(&std::fs::read(&a.file)?);
    let mut n = 0;
    for (id, vecs) in subjects {
        let embs = vecs
            .into_iter()
            .map(|v| {
                if a.normalize {
                    Embedding::normalized(&v.iter().map(|&x| x as f64).collect::<Vec<_>>())
                } else {
                    Embedding::new(v)
                }
            })
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("subject {id}"))?;
        n += embs.len();
        db.enroll(
            &id,
            embs,
            Some(EnrollMeta {
                source_hashes: vec![hash.clone()],
                enrolled_at: now_or_env(None),
                source: "import".into(),
            }),
        )?;
    }
    db.save(&a.db)?;
    println!("imported {n} embeddings; {} subjects in {}", db.len(), a.db.display());
    Ok(Outcome::Success)
}

fn cmd_export(a: ExportArgs) -> Result<Outcome> {
    let db = IdentityDatabase::load(&a.db).with_context(|| format!("loading {}", a.db.display()))?;
    let text = serde_json::to_string_pretty(&db.export_json())?;
    match &a.out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(Outcome::Success)
}

fn cmd_synth(a: SynthArgs, seed: u64) -> Result<Outcome> {
    let cohort = Cohort::new(a.subjects, a.size, seed);
    for s in 0..a.subjects {
        let dir = a.out.join(Cohort::subject_id(s));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for k in 0..a.photos {
            let (img, kps) = cohort.photo(s, k)?;
            let p = dir.join(format!("p{k:02}.png"));
            img.save(&p)?;
            kps.save_json(&sidecar_path(&p))?;
        }
    }
    if a.keypoint_samples > 0 {
        let samples = keypoint_samples(a.keypoint_samples, seed)?;
        write_keypoint_csv(&a.out.join("keypoints.csv"), &samples)?;
    }
    println!("wrote {} subjects × {} photos to {}", a.subjects, a.photos, a.out.display());
    Ok(Outcome::Success)
}
