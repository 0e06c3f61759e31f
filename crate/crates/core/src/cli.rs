//! The `kdseg` command line: data generation, training, distillation,
//! inference, evaluation, benchmarking and checkpoint inspection.
//!
//! Every artifact-producing run writes `manifest.txt` into its output
//! directory. The manifest records the canonical argument list (inputs as
//! absolute paths), the resolved configuration, and SHA-256 hashes of inputs
//! and deterministic outputs; `kdseg --manifest FILE` replays it and checks
//! that the outputs hash identically.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::bench::{bench, BenchConfig, BenchModel};
use crate::error::{Error, Result};
use crate::infer::{predict, SlidingWindowConfig};
use crate::kd::DistillConfig;
use crate::manifest::{sha256_hex, Manifest};
use crate::metrics::{evaluate, EvalConfig, MetricsReport, SurfaceSpec};
use crate::nifti::{encode_for_path, read_labelmap, read_volume, write_labelmap, write_volume};
use crate::train::{
    generate_dataset_with, train_with_callback, Dataset, Sample, ShapeFamily, SyntheticTaskSpec,
    TrainLog, TrainRunConfig,
};
use crate::unet::plan::parse_triple;
use crate::unet::{
    capacity, checkpoint_hash, load_checkpoint, save_checkpoint, Network, NetworkPlan, Scale,
};
use crate::volume::Volume;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";

#[derive(Parser, Debug)]
#[command(
    name = "kdseg",
    version,
    about = "Channel-scaled 3D segmentation networks with knowledge distillation"
)]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Replay the run recorded in this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,

    /// Output directory for a replay (defaults to the recorded one).
    #[arg(long, requires = "manifest")]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labelled dataset as NIfTI files.
    GenData(GenDataArgs),
    /// Train a network from scratch with the segmentation loss.
    Train(TrainArgs),
    /// Train a channel-scaled student against a frozen teacher checkpoint.
    Distill(DistillArgs),
    /// Sliding-window inference on one volume or a directory of volumes.
    Infer(InferArgs),
    /// Score predicted label maps against references.
    Eval(EvalArgs),
    /// Measure inference latency and memory of one or more checkpoints.
    Bench(BenchArgs),
    /// Print a checkpoint's plan, capacity and lineage.
    Inspect(InspectArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Distill(_) => "distill",
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
            Command::Bench(_) => "bench",
            Command::Inspect(_) => "inspect",
        }
    }
}

#[derive(Args, Debug, Clone)]
struct GenDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "nested-ellipsoids")]
    family: String,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Volume size, `N` or `DxHxW`.
    #[arg(long, default_value = "64")]
    size: String,
    #[arg(long, default_value_t = 8)]
    num_train: usize,
    #[arg(long, default_value_t = 4)]
    num_val: usize,
    #[arg(long, default_value_t = 0.35)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    iters: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Validate every N epochs (0 disables validation).
    #[arg(long, default_value_t = 1)]
    val_every: usize,
    /// Window overlap used for validation inference.
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long, default_value_t = 0.5)]
    fg_fraction: f64,
    #[arg(long)]
    no_flip: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl OptimArgs {
    fn apply(&self, run: &mut TrainRunConfig) {
        run.epochs = self.epochs;
        run.iterations_per_epoch = self.iters;
        run.batch_size = self.batch;
        run.learning_rate = self.lr;
        run.momentum = self.momentum;
        run.seed = self.seed;
        run.val_every = self.val_every;
        run.val_overlap = self.overlap;
        run.foreground_fraction = self.fg_fraction;
        run.flip_augment = !self.no_flip;
    }

    fn to_args(&self, out: &mut Vec<String>) {
        push(out, "--epochs", self.epochs);
        push(out, "--iters", self.iters);
        push(out, "--batch", self.batch);
        push(out, "--lr", self.lr);
        push(out, "--momentum", self.momentum);
        push(out, "--seed", self.seed);
        push(out, "--val-every", self.val_every);
        push(out, "--overlap", self.overlap);
        push(out, "--fg-fraction", self.fg_fraction);
        if self.no_flip {
            out.push("--no-flip".into());
        }
        push(out, "--threads", self.threads);
    }
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Channel scale of the trained network, e.g. `1`, `1/2`, `0.25`.
    #[arg(long, default_value = "1")]
    alpha: String,
    #[arg(long, default_value_t = 4)]
    stages: usize,
    #[arg(long, default_value_t = 16)]
    base_width: usize,
    #[arg(long, default_value_t = 128)]
    max_width: usize,
    #[arg(long, default_value_t = 2)]
    convs: usize,
    #[arg(long, default_value = "64")]
    patch: String,
    /// Number of classes; read from the dataset manifest or labels when absent.
    #[arg(long)]
    classes: Option<usize>,
    /// Mark the saved checkpoint frozen (for use as a teacher).
    #[arg(long)]
    freeze: bool,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug, Clone)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "1/2")]
    alpha: String,
    #[arg(long, default_value_t = 2.0)]
    tau: f32,
    #[arg(long, default_value_t = 1.0)]
    lambda: f32,
    /// Training patch; defaults to the teacher's.
    #[arg(long)]
    patch: Option<String>,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug, Clone)]
struct WindowArgs {
    /// Window size; defaults to the checkpoint's training patch.
    #[arg(long)]
    patch: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long, default_value = "gaussian")]
    blend: String,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl WindowArgs {
    fn config(&self, plan: &NetworkPlan) -> Result<SlidingWindowConfig> {
        let patch = match &self.patch {
            Some(p) => parse_triple(p)?,
            None => plan.patch_size,
        };
        let mut cfg = SlidingWindowConfig::new(patch);
        cfg.overlap = self.overlap;
        cfg.blend = self.blend.parse()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn to_args(&self, out: &mut Vec<String>) {
        if let Some(p) = &self.patch {
            push(out, "--patch", p);
        }
        push(out, "--overlap", self.overlap);
        push(out, "--blend", &self.blend);
        push(out, "--threads", self.threads);
    }
}

#[derive(Args, Debug, Clone)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A NIfTI volume or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Args, Debug, Clone)]
struct EvalArgs {
    /// Predicted label map, or a directory of them.
    #[arg(long)]
    pred: PathBuf,
    /// Reference label map, or a directory with matching file names.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    nsd_tol_mm: f64,
    #[arg(long)]
    include_background: bool,
    #[arg(long)]
    classes: Option<usize>,
    /// Write metrics.tsv and a manifest here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct BenchArgs {
    /// `PATH` or `NAME=PATH`; repeat for several models.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<String>,
    /// NIfTI volumes or directories; repeatable.
    #[arg(long = "volumes")]
    volumes: Vec<PathBuf>,
    /// Benchmark on one synthetic noise volume of this size instead.
    #[arg(long, conflicts_with = "volumes")]
    synthetic: Option<String>,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[command(flatten)]
    window: WindowArgs,
    /// Write bench.tsv and a manifest here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn push(out: &mut Vec<String>, flag: &str, v: impl ToString) {
    out.push(flag.to_string());
    out.push(v.to_string());
}

fn path_arg(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Absolute form of an existing input path.
fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
}

fn absolute_out(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        Ok(p.to_path_buf())
    } else {
        Ok(std::env::current_dir()?.join(p))
    }
}

fn read_file(p: &Path) -> Result<Vec<u8>> {
    fs::read(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(p, bytes)?;
    Ok(())
}

fn is_nifti(p: &Path) -> bool {
    let name = p
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn nifti_stem(p: &Path) -> String {
    let name = p
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz")
        .trim_end_matches(".nii")
        .to_string()
}

/// Sorted NIfTI files of a directory, or the file itself.
fn nifti_files(p: &Path) -> Result<Vec<PathBuf>> {
    if p.is_dir() {
        let mut out: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|q| q.is_file() && is_nifti(q))
            .collect();
        out.sort();
        if out.is_empty() {
            return Err(Error::Data(format!(
                "{} contains no NIfTI files",
                p.display()
            )));
        }
        Ok(out)
    } else if p.is_file() {
        Ok(vec![p.to_path_buf()])
    } else {
        Err(Error::Data(format!(
            "{}: no such file or directory",
            p.display()
        )))
    }
}

fn read_checkpoint(p: &Path) -> Result<(Network, Vec<u8>)> {
    let bytes = read_file(p)?;
    let net = load_checkpoint(&bytes)?;
    Ok((net, bytes))
}

/// What a finished run reports back for its manifest.
#[derive(Default)]
struct RunRecord {
    /// Canonical arguments after the subcommand name.
    args: Vec<String>,
    out_dir: Option<PathBuf>,
    config: Manifest,
    inputs: Vec<PathBuf>,
    /// Deterministic outputs, relative to `out_dir`.
    outputs: Vec<PathBuf>,
    /// Named digests of deterministic views of non-deterministic outputs.
    checks: Vec<(String, String)>,
}

fn record_manifest(command: &str, rec: &RunRecord, out_dir: &Path) -> Result<Manifest> {
    let mut m = rec.config.clone();
    m.set("kdseg.version", env!("CARGO_PKG_VERSION"));
    m.set("command", command);
    for (i, a) in rec.args.iter().enumerate() {
        m.set(format!("argv.{i:03}"), a);
    }
    for (i, p) in rec.inputs.iter().enumerate() {
        m.set(format!("input.{i:03}.path"), path_arg(p));
        m.set(format!("input.{i:03}.sha256"), sha256_hex(&read_file(p)?));
    }
    for (i, p) in rec.outputs.iter().enumerate() {
        m.set(format!("output.{i:03}.path"), path_arg(p));
        m.set(
            format!("output.{i:03}.sha256"),
            sha256_hex(&read_file(&out_dir.join(p))?),
        );
    }
    for (k, v) in &rec.checks {
        m.set(format!("check.{k}"), v);
    }
    Ok(m)
}

fn indexed(m: &Manifest, prefix: &str) -> Vec<(String, String)> {
    m.entries()
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k[prefix.len()..].to_string(), v.clone()))
        .collect()
}

fn dispatch(command: Command) -> Result<RunRecord> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    }
}

fn run_command(command: Command) -> Result<(RunRecord, Option<Manifest>)> {
    let name = command.name();
    let rec = dispatch(command)?;
    let manifest = match &rec.out_dir {
        Some(dir) => {
            let m = record_manifest(name, &rec, dir)?;
            write_file(&dir.join(MANIFEST_FILE), m.render().as_bytes())?;
            println!("wrote {}", dir.join(MANIFEST_FILE).display());
            Some(m)
        }
        None => None,
    };
    Ok((rec, manifest))
}

fn replay(path: &Path, out_dir: Option<PathBuf>) -> std::result::Result<(), (i32, String)> {
    let data_err = |e: Error| (exit_code(&e), e.to_string());
    let text =
        fs::read_to_string(path).map_err(|e| (EXIT_DATA, format!("{}: {e}", path.display())))?;
    let recorded = Manifest::parse(&text).map_err(|e| (EXIT_DATA, e.to_string()))?;
    let command = recorded
        .require("command")
        .map_err(|e| (EXIT_DATA, e.to_string()))?
        .to_string();

    for (key, p) in indexed(&recorded, "input.")
        .into_iter()
        .filter(|(k, _)| k.ends_with(".path"))
    {
        let want = recorded
            .require(&format!("input.{}.sha256", key.trim_end_matches(".path")))
            .map_err(|e| (EXIT_DATA, e.to_string()))?;
        let got = sha256_hex(&read_file(Path::new(&p)).map_err(data_err)?);
        if got != want {
            return Err((
                EXIT_DATA,
                format!("input {p} changed since the run was recorded"),
            ));
        }
    }

    let mut argv: Vec<String> = vec!["kdseg".into(), command.clone()];
    argv.extend(indexed(&recorded, "argv.").into_iter().map(|(_, v)| v));
    if let Some(dir) = &out_dir {
        match argv.iter().position(|a| a == "--out-dir") {
            Some(i) if i + 1 < argv.len() => argv[i + 1] = path_arg(dir),
            _ => {
                return Err((
                    EXIT_USAGE,
                    format!("{command} runs have no output directory"),
                ))
            }
        }
    }
    let cli =
        Cli::try_parse_from(&argv).map_err(|e| (EXIT_DATA, format!("manifest arguments: {e}")))?;
    let Some(cmd) = cli.command else {
        return Err((EXIT_DATA, "manifest names no command".into()));
    };
    let (_, fresh) = run_command(cmd).map_err(data_err)?;
    let Some(fresh) = fresh else { return Ok(()) };

    let mut mismatches = Vec::new();
    let mut checked = 0;
    for (k, v) in recorded.entries() {
        let compare =
            (k.starts_with("output.") && k.ends_with(".sha256")) || k.starts_with("check.");
        if compare {
            checked += 1;
            if fresh.get(k) != Some(v.as_str()) {
                mismatches.push(k.clone());
            }
        }
    }
    if mismatches.is_empty() {
        println!("replay: {checked} recorded digests reproduced");
        Ok(())
    } else {
        Err((
            EXIT_INTERNAL,
            format!("replay diverged: {}", mismatches.join(", ")),
        ))
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Shape(_)
        | Error::Checkpoint(_)
        | Error::Nifti(_)
        | Error::Data(_)
        | Error::Io(_) => EXIT_DATA,
        Error::Frozen | Error::NonFiniteLoss { .. } => EXIT_INTERNAL,
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match (cli.command, cli.manifest) {
        (Some(cmd), None) => run_command(cmd)
            .map(|_| ())
            .map_err(|e| (exit_code(&e), e.to_string())),
        (None, Some(path)) => replay(&path, cli.out_dir),
        _ => Err((
            EXIT_USAGE,
            "expected a subcommand or --manifest FILE (see --help)".into(),
        )),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}

fn init_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("--threads must be at least 1"));
    }
    // the global pool can only be built once per process; later calls keep it
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

// ---------------------------------------------------------------- gen-data

const IMAGES_TR: &str = "imagesTr";
const LABELS_TR: &str = "labelsTr";
const IMAGES_VAL: &str = "imagesVal";
const LABELS_VAL: &str = "labelsVal";
const DATA_MANIFEST: &str = "dataset.txt";

fn gen_data(a: GenDataArgs) -> Result<RunRecord> {
    init_threads(a.threads)?;
    let spec = SyntheticTaskSpec {
        volume_size: parse_triple(&a.size)?,
        num_classes: a.classes,
        num_train: a.num_train,
        num_val: a.num_val,
        shape_family: a.family.parse::<ShapeFamily>()?,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    spec.validate()?;
    let data = generate_dataset_with(&spec, a.threads > 1)?;
    let out = absolute_out(&a.out_dir)?;
    let mut outputs = Vec::new();
    for (split, samples, img_dir, lab_dir) in [
        ("train", &data.train, IMAGES_TR, LABELS_TR),
        ("val", &data.val, IMAGES_VAL, LABELS_VAL),
    ] {
        for (i, s) in samples.iter().enumerate() {
            let name = format!("{split}_{i:03}.nii.gz");
            let img = Path::new(img_dir).join(&name);
            let lab = Path::new(lab_dir).join(&name);
            write_file(
                &out.join(&img),
                &encode_for_path(&img, write_volume(&s.image)?),
            )?;
            write_file(
                &out.join(&lab),
                &encode_for_path(&lab, write_labelmap(&s.labels)?),
            )?;
            outputs.push(img);
            outputs.push(lab);
        }
    }
    let mut desc = Manifest::new();
    for (k, v) in spec.to_manifest() {
        desc.set(k, v);
    }
    desc.set("data.sha256", data.fingerprint());
    write_file(&out.join(DATA_MANIFEST), desc.render().as_bytes())?;
    outputs.push(DATA_MANIFEST.into());
    print!("{}", data.prevalence_report());
    println!(
        "wrote {} volumes to {}",
        data.train.len() + data.val.len(),
        out.display()
    );

    let mut args = vec![];
    push(&mut args, "--out-dir", path_arg(&out));
    push(&mut args, "--family", &a.family);
    push(&mut args, "--classes", a.classes);
    push(&mut args, "--size", &a.size);
    push(&mut args, "--num-train", a.num_train);
    push(&mut args, "--num-val", a.num_val);
    push(&mut args, "--noise", a.noise);
    push(&mut args, "--seed", a.seed);
    push(&mut args, "--threads", a.threads);
    Ok(RunRecord {
        args,
        out_dir: Some(out),
        config: desc,
        outputs,
        ..Default::default()
    })
}

// ---------------------------------------------------------------- datasets

fn load_split(
    root: &Path,
    img_dir: &str,
    lab_dir: &str,
    inputs: &mut Vec<PathBuf>,
) -> Result<Vec<Sample>> {
    let images = root.join(img_dir);
    if !images.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for img_path in nifti_files(&images)? {
        let name = img_path.file_name().expect("listed files have names");
        let lab_path = root.join(lab_dir).join(name);
        if !lab_path.is_file() {
            return Err(Error::Data(format!(
                "{} has no label map {}",
                img_path.display(),
                lab_path.display()
            )));
        }
        let image = read_volume(&read_file(&img_path)?)?;
        let labels = read_labelmap(&read_file(&lab_path)?)?;
        if image.dims() != labels.dims() {
            return Err(Error::Data(format!(
                "{}: image and label grids differ",
                img_path.display()
            )));
        }
        inputs.push(img_path.clone());
        inputs.push(lab_path);
        out.push(Sample { image, labels });
    }
    Ok(out)
}

/// Loads `imagesTr/labelsTr` (+ optional `imagesVal/labelsVal`) from `root`.
fn load_dataset(root: &Path, classes: Option<usize>) -> Result<(Dataset, Vec<PathBuf>)> {
    let mut inputs = Vec::new();
    let train = load_split(root, IMAGES_TR, LABELS_TR, &mut inputs)?;
    if train.is_empty() {
        return Err(Error::Data(format!(
            "{} has no {IMAGES_TR} volumes",
            root.display()
        )));
    }
    let val = load_split(root, IMAGES_VAL, LABELS_VAL, &mut inputs)?;
    let recorded = root.join(DATA_MANIFEST);
    let num_classes = match classes {
        Some(c) => c,
        None if recorded.is_file() => {
            inputs.push(recorded.clone());
            Manifest::parse(&fs::read_to_string(&recorded)?)?.parse_value("data.num_classes")?
        }
        None => {
            let max = train
                .iter()
                .chain(&val)
                .map(|s| s.labels.max_label())
                .max()
                .unwrap_or(0);
            max as usize + 1
        }
    };
    for s in train.iter().chain(&val) {
        s.labels
            .check_classes(num_classes)
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok((
        Dataset {
            num_classes,
            train,
            val,
        },
        inputs,
    ))
}

// ---------------------------------------------------------------- train / distill

fn run_training(
    run: &TrainRunConfig,
    data: &Dataset,
    teacher: Option<&Network>,
    out: &Path,
    freeze: bool,
) -> Result<TrainLog> {
    fs::create_dir_all(out)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    fs::write(
        &log_path,
        format!("{}\n", crate::train::EpochRecord::HEADER),
    )?;
    let started = Instant::now();
    let outcome = train_with_callback(run, data, teacher, &mut |rec, net| {
        use std::io::Write;
        let mut f = fs::OpenOptions::new().append(true).open(&log_path)?;
        writeln!(f, "{}", rec.to_line())?;
        fs::write(&ckpt_path, save_checkpoint(net))?;
        println!("{}", rec.to_line());
        Ok(())
    })?;
    let diverged = outcome.diverged_at;
    let mut net = outcome.network;
    if freeze {
        net.freeze();
    }
    fs::write(&ckpt_path, save_checkpoint(&net))?;
    println!(
        "trained {} epochs in {:.1}s; checkpoint {} (sha256 {})",
        outcome.log.records.len(),
        started.elapsed().as_secs_f64(),
        ckpt_path.display(),
        checkpoint_hash(&net)
    );
    if let Some(epoch) = diverged {
        eprintln!("training diverged at epoch {epoch}; kept the last finite checkpoint");
        return Err(Error::NonFiniteLoss { epoch });
    }
    Ok(outcome.log)
}

fn train_cmd(a: TrainArgs) -> Result<RunRecord> {
    init_threads(a.optim.threads)?;
    let data_root = absolute(&a.data)?;
    let (data, inputs) = load_dataset(&data_root, a.classes)?;
    let plan = NetworkPlan {
        num_classes: data.num_classes,
        input_channels: 1,
        num_stages: a.stages,
        base_width: a.base_width,
        max_width: a.max_width,
        scale: a.alpha.parse::<Scale>()?,
        convs_per_stage: a.convs,
        patch_size: parse_triple(&a.patch)?,
    };
    plan.validate()?;
    let mut run = TrainRunConfig::new(plan);
    a.optim.apply(&mut run);
    run.validate()?;
    let out = absolute_out(&a.out_dir)?;
    let log = run_training(&run, &data, None, &out, a.freeze)?;

    let mut args = vec![];
    push(&mut args, "--data", path_arg(&data_root));
    push(&mut args, "--out-dir", path_arg(&out));
    push(&mut args, "--alpha", &a.alpha);
    push(&mut args, "--stages", a.stages);
    push(&mut args, "--base-width", a.base_width);
    push(&mut args, "--max-width", a.max_width);
    push(&mut args, "--convs", a.convs);
    push(&mut args, "--patch", &a.patch);
    if let Some(c) = a.classes {
        push(&mut args, "--classes", c);
    }
    if a.freeze {
        args.push("--freeze".into());
    }
    a.optim.to_args(&mut args);
    let mut config = run.to_manifest();
    config.set("data.fingerprint", data.fingerprint());
    Ok(RunRecord {
        args,
        out_dir: Some(out),
        config,
        inputs,
        outputs: vec![CHECKPOINT_FILE.into()],
        checks: vec![(
            "train_log_sha256".into(),
            sha256_hex(log.without_timing().to_tsv().as_bytes()),
        )],
    })
}

fn distill_cmd(a: DistillArgs) -> Result<RunRecord> {
    init_threads(a.optim.threads)?;
    let teacher_path = absolute(&a.teacher)?;
    let (mut teacher, _) = read_checkpoint(&teacher_path)?;
    teacher.freeze();
    let data_root = absolute(&a.data)?;
    let (data, mut inputs) = load_dataset(&data_root, Some(teacher.plan().num_classes))?;
    inputs.insert(0, teacher_path.clone());

    let mut plan = teacher.plan().with_scale(a.alpha.parse::<Scale>()?);
    if let Some(p) = &a.patch {
        plan = plan.with_patch(parse_triple(p)?);
    }
    let mut run = TrainRunConfig::new(plan);
    a.optim.apply(&mut run);
    run.distill = Some(DistillConfig {
        temperature: a.tau,
        kd_weight: a.lambda,
        ..DistillConfig::default()
    });
    run.teacher_checkpoint = Some(checkpoint_hash(&teacher));
    run.validate()?;
    let out = absolute_out(&a.out_dir)?;
    let log = run_training(&run, &data, Some(&teacher), &out, false)?;

    let mut args = vec![];
    push(&mut args, "--teacher", path_arg(&teacher_path));
    push(&mut args, "--data", path_arg(&data_root));
    push(&mut args, "--out-dir", path_arg(&out));
    push(&mut args, "--alpha", &a.alpha);
    push(&mut args, "--tau", a.tau);
    push(&mut args, "--lambda", a.lambda);
    if let Some(p) = &a.patch {
        push(&mut args, "--patch", p);
    }
    a.optim.to_args(&mut args);
    let mut config = run.to_manifest();
    config.set("data.fingerprint", data.fingerprint());
    Ok(RunRecord {
        args,
        out_dir: Some(out),
        config,
        inputs,
        outputs: vec![CHECKPOINT_FILE.into()],
        checks: vec![(
            "train_log_sha256".into(),
            sha256_hex(log.without_timing().to_tsv().as_bytes()),
        )],
    })
}

// ---------------------------------------------------------------- infer

fn infer_cmd(a: InferArgs) -> Result<RunRecord> {
    init_threads(a.window.threads)?;
    let ckpt = absolute(&a.checkpoint)?;
    let input = absolute(&a.input)?;
    let (net, _) = read_checkpoint(&ckpt)?;
    let cfg = a.window.config(net.plan())?;
    let out = absolute_out(&a.out_dir)?;
    let mut inputs = vec![ckpt.clone()];
    let mut outputs = Vec::new();
    for path in nifti_files(&input)? {
        let vol = read_volume(&read_file(&path)?)?;
        let started = Instant::now();
        let (mut labels, _) = predict(&net, &vol, &cfg)?;
        labels.orientation = vol.orientation;
        let rel = PathBuf::from(format!("{}.nii.gz", nifti_stem(&path)));
        write_file(
            &out.join(&rel),
            &encode_for_path(&rel, write_labelmap(&labels)?),
        )?;
        println!(
            "{} -> {} ({:.2}s)",
            path.display(),
            out.join(&rel).display(),
            started.elapsed().as_secs_f64()
        );
        inputs.push(path);
        outputs.push(rel);
    }

    let mut args = vec![];
    push(&mut args, "--checkpoint", path_arg(&ckpt));
    push(&mut args, "--input", path_arg(&input));
    push(&mut args, "--out-dir", path_arg(&out));
    a.window.to_args(&mut args);
    let mut config = Manifest::new();
    config.extend(&net.plan().to_manifest());
    config
        .set("infer.patch", format!("{:?}", cfg.patch_size))
        .set("infer.overlap", cfg.overlap)
        .set("infer.blend", cfg.blend)
        .set("infer.gaussian_sigma_scale", cfg.gaussian_sigma_scale)
        .set("infer.checkpoint_sha256", checkpoint_hash(&net));
    Ok(RunRecord {
        args,
        out_dir: Some(out),
        config,
        inputs,
        outputs,
        checks: vec![],
    })
}

// ---------------------------------------------------------------- eval

fn eval_cmd(a: EvalArgs) -> Result<RunRecord> {
    let pred_root = absolute(&a.pred)?;
    let ref_root = absolute(&a.reference)?;
    let pairs: Vec<(PathBuf, PathBuf)> = if pred_root.is_dir() {
        let refs = nifti_files(&ref_root)?;
        nifti_files(&pred_root)?
            .into_iter()
            .map(|p| {
                let stem = nifti_stem(&p);
                refs.iter()
                    .find(|r| nifti_stem(r) == stem)
                    .map(|r| (p.clone(), r.clone()))
                    .ok_or_else(|| Error::Data(format!("no reference for {}", p.display())))
            })
            .collect::<Result<_>>()?
    } else {
        vec![(pred_root.clone(), ref_root.clone())]
    };
    let cfg = EvalConfig {
        surface: SurfaceSpec {
            nsd_tolerance_mm: a.nsd_tol_mm,
            ..SurfaceSpec::default()
        },
        include_background: a.include_background,
        num_classes: a.classes,
    };
    cfg.surface.validate()?;
    let mut inputs = Vec::new();
    let mut reports: Vec<(String, MetricsReport)> = Vec::new();
    for (p, r) in &pairs {
        let pred = read_labelmap(&read_file(p)?)?;
        let reference = read_labelmap(&read_file(r)?)?;
        let report = evaluate(&pred, &reference, &cfg).map_err(|e| match e {
            Error::InvalidArgument(m) | Error::Shape(m) => {
                Error::Data(format!("{}: {m}", p.display()))
            }
            other => other,
        })?;
        reports.push((nifti_stem(p), report));
        inputs.push(p.clone());
        inputs.push(r.clone());
    }
    let mut text = String::new();
    let mut tsv = String::new();
    for (name, rep) in &reports {
        if reports.len() > 1 {
            text.push_str(&format!("== {name}\n"));
            tsv.push_str(&format!("#case={name}\n"));
        }
        text.push_str(&rep.to_text());
        tsv.push_str(&rep.to_tsv());
    }
    if reports.len() > 1 {
        let mean = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
            let vals: Vec<f64> = reports.iter().filter_map(|(_, r)| f(r)).collect();
            if vals.is_empty() {
                "UNDEFINED".to_string()
            } else {
                format!("{:.6}", vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let line = format!(
            "cases {}: mean dice {} nsd {} hd95_mm {}\n",
            reports.len(),
            mean(&|r| r.mean_dice.value),
            mean(&|r| r.mean_nsd.value),
            mean(&|r| r.mean_hd95.value)
        );
        text.push_str(&line);
        tsv.push_str(&format!("#{}", line));
    }
    print!("{text}");

    let mut args = vec![];
    push(&mut args, "--pred", path_arg(&pred_root));
    push(&mut args, "--ref", path_arg(&ref_root));
    push(&mut args, "--nsd-tol-mm", a.nsd_tol_mm);
    if a.include_background {
        args.push("--include-background".into());
    }
    if let Some(c) = a.classes {
        push(&mut args, "--classes", c);
    }
    let mut config = Manifest::new();
    if let Some((_, r)) = reports.first() {
        for (k, v) in r.metadata() {
            config.set(format!("eval.{k}"), v);
        }
    }
    let out_dir = match &a.out_dir {
        Some(d) => {
            let d = absolute_out(d)?;
            write_file(&d.join("metrics.tsv"), tsv.as_bytes())?;
            push(&mut args, "--out-dir", path_arg(&d));
            Some(d)
        }
        None => None,
    };
    Ok(RunRecord {
        args,
        out_dir,
        config,
        inputs,
        outputs: vec!["metrics.tsv".into()],
        checks: vec![],
    })
}

// ---------------------------------------------------------------- bench

fn bench_cmd(a: BenchArgs) -> Result<RunRecord> {
    let mut models = Vec::new();
    let mut inputs = Vec::new();
    let mut ckpt_args = Vec::new();
    for spec in &a.checkpoints {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => (
                nifti_stem(Path::new(spec))
                    .trim_end_matches(".ckpt")
                    .to_string(),
                PathBuf::from(spec),
            ),
        };
        let path = absolute(&path)?;
        let (network, _) = read_checkpoint(&path)?;
        ckpt_args.push(format!("{name}={}", path_arg(&path)));
        inputs.push(path);
        models.push(BenchModel { name, network });
    }
    let first_plan = models[0].network.plan().clone();
    let window = a.window.config(&first_plan)?;
    let mut volumes = Vec::new();
    let mut vol_args = Vec::new();
    if let Some(size) = &a.synthetic {
        let dims = parse_triple(size)?;
        volumes.push(noise_volume(dims)?);
    } else {
        if a.volumes.is_empty() {
            return Err(Error::invalid("bench needs --volumes or --synthetic"));
        }
        for v in &a.volumes {
            let v = absolute(v)?;
            for f in nifti_files(&v)? {
                volumes.push(read_volume(&read_file(&f)?)?);
                inputs.push(f);
            }
            vol_args.push(v);
        }
    }
    let mut cfg = BenchConfig::new(window);
    cfg.warmup = a.warmup;
    cfg.runs = a.runs;
    cfg.threads = a.window.threads;
    let report = bench(&models, &volumes, &cfg)?;
    print!("{}", report.to_text());

    let mut args = vec![];
    for c in ckpt_args {
        push(&mut args, "--checkpoint", c);
    }
    for v in vol_args {
        push(&mut args, "--volumes", path_arg(&v));
    }
    if let Some(s) = &a.synthetic {
        push(&mut args, "--synthetic", s);
    }
    push(&mut args, "--warmup", a.warmup);
    push(&mut args, "--runs", a.runs);
    a.window.to_args(&mut args);
    let mut config = Manifest::new();
    config
        .set("bench.cpu_model", &report.machine.cpu_model)
        .set("bench.logical_cores", report.machine.logical_cores)
        .set("bench.threads", report.machine.threads);
    let out_dir = match &a.out_dir {
        Some(d) => {
            let d = absolute_out(d)?;
            write_file(&d.join("bench.tsv"), report.to_tsv().as_bytes())?;
            push(&mut args, "--out-dir", path_arg(&d));
            Some(d)
        }
        None => None,
    };
    Ok(RunRecord {
        args,
        out_dir,
        config,
        inputs,
        outputs: vec![],
        checks: vec![(
            "analytic_sha256".into(),
            sha256_hex(report.analytic_tsv().as_bytes()),
        )],
    })
}

/// Deterministic standard-normal volume with unit spacing.
fn noise_volume(dims: [usize; 3]) -> Result<Volume> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let n = dims.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Volume::new(
        crate::Tensor::new(vec![1, dims[0], dims[1], dims[2]], data)?,
        [1.0; 3],
    )
}

// ---------------------------------------------------------------- inspect

fn inspect_cmd(a: InspectArgs) -> Result<RunRecord> {
    let (net, bytes) = read_checkpoint(&a.checkpoint)?;
    let plan = net.plan();
    let cap = capacity(plan)?;
    println!("checkpoint   {}", a.checkpoint.display());
    println!("file_sha256  {}", sha256_hex(&bytes));
    println!("model_sha256 {}", checkpoint_hash(&net));
    println!("alpha        {}", plan.scale);
    println!("widths       {:?}", plan.widths());
    println!("params       {}", cap.params);
    println!("gflops/patch {:.4}", cap.gflops());
    println!(
        "peak_act_mb  {:.2}",
        cap.peak_activation_bytes as f64 / (1 << 20) as f64
    );
    println!("frozen       {}", net.is_frozen());
    println!("init_seed    {}", net.seed());
    for (k, v) in plan.to_manifest() {
        println!("{k}={v}");
    }
    for (k, v) in net.lineage() {
        println!("{k}={v}");
    }
    Ok(RunRecord::default())
}
