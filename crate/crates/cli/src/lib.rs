//! The `geoflow` command-line tool: synthetic data generation, training,
//! inference, evaluation and gradient verification.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use geoflow::autodiff::gradcheck::GradCheckOptions;
use geoflow::eval::{
    appearance_shifted_pairs, evaluate_pairs, frechet_distance, run_ablation, run_removal, run_transfer,
    stack_images, train_attribute_classifier, AblationConfig, FixedEmbedder, VariantMetrics,
};
use geoflow::io::{read_landmarks, read_manifest, read_png, write_landmarks, write_manifest, write_png, write_tensor, ManifestEntry};
use geoflow::losses::LossTerms;
use geoflow::synthdata::{generate_dataset_with, sample_rng, Dataset, FaceSpec, Sample, Split};
use geoflow::training::{load_checkpoint, train_loop, DirHooks, TrainData, TrainHooks, TrainState};
use geoflow::verify::{gradient_suite, GRADCHECK_TOLERANCE};
use geoflow::warpblend::{apply_transfer, AppearanceResidual, AttentionMask, FlowField, TransferMaps};
use geoflow::Tensor;
use serde::Serialize;

pub use config::Config;

/// Failure of a command, carrying its exit code class.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    #[error("{0}")]
    Usage(String),
    /// I/O, compatibility or numerical failure; exit code 2.
    #[error(transparent)]
    Runtime(geoflow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<geoflow::Error> for CliError {
    fn from(e: geoflow::Error) -> Self {
        match e {
            geoflow::Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "geoflow", version, about = "Geometry-aware flow attribute transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic two-domain face dataset to PNG, landmark sidecars and manifests.
    SynthGen(SynthGenArgs),
    /// Train the transfer, removal and discriminator networks.
    Train(TrainArgs),
    /// Transfer the attribute of a source face onto a target face.
    Transfer(TransferArgs),
    /// Remove the attribute from one image.
    Remove(RemoveArgs),
    /// Metric sanity checks, checkpoint metrics and the variant ablation.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient (float64).
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Configuration file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set train.learning_rate=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SynthGenArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output dataset directory (`data.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Images per domain (`data.n_per_domain`).
    #[arg(long)]
    pub n: Option<usize>,
    /// Image side length (`train.image_size`).
    #[arg(long)]
    pub size: Option<usize>,
    /// Generator seed (`data.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// mustache, eyeglasses or goatee (`data.attribute`).
    #[arg(long)]
    pub attribute: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset directory (`data.dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory (`output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Total optimizer steps (`train.total_steps`).
    #[arg(long)]
    pub steps: Option<u64>,
    /// `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from `<out>/checkpoints/latest.ckpt`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Target image `a` (the face that receives the attribute).
    #[arg(long)]
    pub target: PathBuf,
    /// Landmark sidecar of the target; defaults to the image path with a `.txt` extension.
    #[arg(long)]
    pub target_landmarks: Option<PathBuf>,
    /// Source image `b_y` (the face that has the attribute).
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub source_landmarks: Option<PathBuf>,
    /// High-resolution target; the transfer maps are re-applied at its resolution.
    #[arg(long, requires = "hires_source")]
    pub hires_target: Option<PathBuf>,
    #[arg(long, requires = "hires_target")]
    pub hires_source: Option<PathBuf>,
    /// Also write the warped source, mask, residual and raw maps.
    #[arg(long)]
    pub intermediates: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RemoveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score a trained checkpoint on validation and shifted test pairs.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Train and score every configured variant × seed.
    #[arg(long)]
    pub ablation: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates probed per tensor.
    #[arg(long, default_value_t = 24)]
    pub max_coords: usize,
    #[arg(long, default_value_t = GRADCHECK_TOLERANCE)]
    pub tolerance: f64,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        GradcheckArgs {
            seed: 0,
            max_coords: 24,
            tolerance: GRADCHECK_TOLERANCE,
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::SynthGen(a) => cmd_synth_gen(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Transfer(a) => cmd_transfer(&a).map(|_| ()),
        Command::Remove(a) => cmd_remove(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(geoflow::Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn domain_dir(label: u8) -> &'static str {
    if label == 0 {
        "a"
    } else {
        "b"
    }
}

fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.txt", split.name()))
}

/// Writes the dataset; returns the number of images written.
pub fn cmd_synth_gen(args: &SynthGenArgs) -> CliResult<usize> {
    let mut overrides = args.cfg.overrides.clone();
    if let Some(p) = &args.out {
        overrides.push(format!("data.dir={}", toml::Value::String(p.display().to_string())));
    }
    if let Some(n) = args.n {
        overrides.push(format!("data.n_per_domain={n}"));
    }
    if let Some(s) = args.size {
        overrides.push(format!("train.image_size={s}"));
    }
    if let Some(s) = args.seed {
        overrides.push(format!("data.seed={s}"));
    }
    if let Some(a) = &args.attribute {
        overrides.push(format!("data.attribute={}", toml::Value::String(a.clone())));
    }
    let cfg = Config::load(args.cfg.config.as_deref(), &overrides)?;
    cfg.validate()?;
    let dir = cfg.data.dir.clone();
    let size = cfg.train.image_size;
    let data = generate_dataset_with(cfg.data.seed, cfg.data.n_per_domain, size, cfg.data.attribute);
    cfg.echo_into(&dir)?;
    let mut written = 0;
    for split in Split::ALL {
        let mut entries = Vec::new();
        for label in [0u8, 1] {
            let rel = PathBuf::from("images").join(split.name()).join(domain_dir(label));
            create_dir(&dir.join(&rel))?;
            let n = data.domain(label).len();
            for idx in split.range(n) {
                let s = &data.domain(label)[idx];
                let path = rel.join(format!("{idx:05}.png"));
                write_png(&dir.join(&path), &s.image)?;
                write_landmarks(&dir.join(path.with_extension("txt")), &s.landmarks)?;
                written += 1;
                entries.push(ManifestEntry {
                    path,
                    label,
                    landmarks: s.landmarks.clone(),
                });
            }
        }
        write_manifest(&manifest_path(&dir, split), &entries)?;
    }
    println!("wrote {written} images to {}", dir.display());
    Ok(written)
}

/// Loads a dataset written by `synth-gen`. Generation parameters from the
/// directory's `config.toml`, when present, restore each sample's face
/// description (used to pick appearance-shifted pairs); otherwise samples
/// get neutral descriptions.
pub fn load_dataset(dir: &Path, image_size: usize) -> CliResult<Dataset> {
    let gen_cfg = dir.join("config.toml");
    let gen = if gen_cfg.exists() {
        Some(Config::load(Some(&gen_cfg), &[])?.data)
    } else {
        None
    };
    let mut data = Dataset { a: Vec::new(), b: Vec::new() };
    let mut counts = Vec::new();
    for split in Split::ALL {
        let entries = read_manifest(&manifest_path(dir, split))?;
        let mut per = [0usize; 2];
        for e in entries {
            let image = read_png(&e.path)?;
            let s = image.shape();
            if s.h() != image_size || s.w() != image_size {
                return Err(CliError::Usage(format!(
                    "{}: image is {}×{}, configured image size is {image_size}",
                    e.path.display(),
                    s.h(),
                    s.w()
                )));
            }
            e.landmarks.check_bounds(s.h(), s.w(), "manifest")?;
            let index = e.path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<usize>().ok());
            let spec = match (&gen, index) {
                (Some(g), Some(i)) => FaceSpec::sample(&mut sample_rng(g.seed, e.label, i), e.label == 1, g.attribute),
                _ => FaceSpec::neutral(e.label == 1),
            };
            per[e.label.min(1) as usize] += 1;
            let sample = Sample {
                image,
                landmarks: e.landmarks,
                label: e.label,
                spec,
            };
            if e.label == 0 {
                data.a.push(sample);
            } else {
                data.b.push(sample);
            }
        }
        counts.push((split, per));
    }
    for (split, per) in counts {
        for label in [0u8, 1] {
            let expect = split.range(data.domain(label).len()).len();
            if per[label as usize] != expect {
                return Err(CliError::Usage(format!(
                    "{}: {} images of domain {} in split {}, expected {expect} for an 80/10/10 split",
                    dir.display(),
                    per[label as usize],
                    domain_dir(label),
                    split.name()
                )));
            }
        }
    }
    Ok(data)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub format: String,
    pub step: u64,
    /// Moving averages of the objective terms.
    pub averages: std::collections::BTreeMap<String, f64>,
    /// Mean L1 of `F(G(a, b_y))` against `a` over validation pairs.
    pub val_cycle_l1: f64,
    pub val_pairs: usize,
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainReport> {
    let mut overrides = args.cfg.overrides.clone();
    if let Some(p) = &args.data {
        overrides.push(format!("data.dir={}", toml::Value::String(p.display().to_string())));
    }
    if let Some(p) = &args.out {
        overrides.push(format!("output.dir={}", toml::Value::String(p.display().to_string())));
    }
    if let Some(s) = args.steps {
        overrides.push(format!("train.total_steps={s}"));
    }
    if let Some(s) = args.seed {
        overrides.push(format!("train.seed={s}"));
    }
    let cfg = Config::load(args.cfg.config.as_deref(), &overrides)?;
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    let latest = DirHooks::latest_checkpoint(&out);
    let mut state = if args.resume {
        let mut st = load_checkpoint(&latest)?;
        cfg.train.check_compatible(&st.config)?;
        st.config.total_steps = cfg.train.total_steps;
        st.config.checkpoint_interval = cfg.train.checkpoint_interval;
        st.config.eval_interval = cfg.train.eval_interval;
        st
    } else {
        TrainState::new(cfg.train.clone())?
    };
    let data = load_dataset(&cfg.data.dir, cfg.train.image_size)?;
    cfg.echo_into(&out)?;
    let mut hooks = DirHooks::new(&out)?;
    let train = TrainData {
        a: data.split(0, Split::Train),
        b: data.split(1, Split::Train),
    };
    let start = state.step;
    let mut progress = Progress {
        inner: &mut hooks,
        every: (state.config.total_steps / 20).max(1),
    };
    train_loop(&mut state, &train, &mut progress)?;

    let (va, vb) = (data.split(0, Split::Val), data.split(1, Split::Val));
    let pairs = va.len().min(vb.len());
    let val_cycle_l1 = if pairs > 0 {
        let ia = stack_images(&va[..pairs])?;
        let ib = stack_images(&vb[..pairs])?;
        let inf = run_transfer(&state.nets, &ia, &ib)?;
        geoflow::eval::mean_abs_diff(&inf.cycled, &ia)
    } else {
        f64::NAN
    };
    let report = TrainReport {
        format: "geoflow-train-report v1".into(),
        step: state.step,
        averages: LossTerms::NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(state.averages.as_array())
            .collect(),
        val_cycle_l1,
        val_pairs: pairs,
    };
    write_text(&out.join("report.toml"), &toml::to_string(&report).expect("report serializes"))?;
    println!(
        "trained steps {start}..{} into {} (validation cycle L1 {val_cycle_l1:.4})",
        state.step,
        out.display()
    );
    Ok(report)
}

/// Prints a line every `every` steps and forwards to the run directory hooks.
struct Progress<'a> {
    inner: &'a mut DirHooks,
    every: u64,
}

impl TrainHooks for Progress<'_> {
    fn on_step(&mut self, state: &TrainState, log: &geoflow::training::StepLog) -> geoflow::Result<()> {
        if log.step.is_multiple_of(self.every) {
            let t = log.terms;
            println!(
                "step {:>6}/{} rec {:.4} lm {:.3} adv_g {:.3} cls_f {:.3} ({:.0}s)",
                log.step, state.config.total_steps, t.rec, t.lm, t.adv_g, t.cls_f, log.wall_secs
            );
        }
        self.inner.on_step(state, log)
    }
    fn on_eval(&mut self, state: &TrainState) -> geoflow::Result<()> {
        self.inner.on_eval(state)
    }
    fn on_checkpoint(&mut self, state: &TrainState) -> geoflow::Result<()> {
        self.inner.on_checkpoint(state)
    }
    fn on_failure(&mut self, state: &TrainState, a: &geoflow::training::Batch, b: &geoflow::training::Batch, err: &geoflow::Error) {
        self.inner.on_failure(state, a, b, err)
    }
}

fn sidecar(image: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| image.with_extension("txt"))
}

fn read_image_sized(path: &Path, size: usize) -> CliResult<Tensor<f32>> {
    let img = read_png(path)?;
    let s = img.shape();
    if s.h() != size || s.w() != size {
        return Err(CliError::Runtime(geoflow::Error::Incompatible(format!(
            "{}: image is {}×{}, checkpoint was trained at {size}×{size}",
            path.display(),
            s.h(),
            s.w()
        ))));
    }
    Ok(img)
}

fn echo_checkpoint_config(state: &TrainState, dir: &Path) -> CliResult<()> {
    let cfg = Config {
        train: state.config.clone(),
        ..Config::default()
    };
    cfg.echo_into(dir)
}

/// Outputs of one transfer, as written to disk (before quantization).
#[derive(Debug, Clone)]
pub struct TransferOutput {
    pub transferred: Tensor<f32>,
    pub hires: Option<Tensor<f32>>,
}

pub fn cmd_transfer(args: &TransferArgs) -> CliResult<TransferOutput> {
    let state = load_checkpoint(&args.checkpoint)?;
    let size = state.config.image_size;
    let a = read_image_sized(&args.target, size)?;
    let b = read_image_sized(&args.source, size)?;
    let lm_a = read_landmarks(&sidecar(&args.target, &args.target_landmarks))?;
    let lm_b = read_landmarks(&sidecar(&args.source, &args.source_landmarks))?;
    if lm_a.len() != lm_b.len() {
        return Err(CliError::Runtime(geoflow::Error::Incompatible(format!(
            "target has {} landmarks, source has {}",
            lm_a.len(),
            lm_b.len()
        ))));
    }
    lm_a.check_bounds(size, size, "transfer target")?;
    lm_b.check_bounds(size, size, "transfer source")?;

    let inf = run_transfer(&state.nets, &a, &b)?;
    create_dir(&args.out)?;
    echo_checkpoint_config(&state, &args.out)?;
    write_png(&args.out.join("transferred.png"), &inf.transferred)?;
    if args.intermediates {
        write_png(&args.out.join("warped.png"), &inf.warped)?;
        write_png(&args.out.join("mask.png"), &inf.mask.map(|m| 2.0 * m - 1.0))?;
        write_png(&args.out.join("residual.png"), &inf.residual)?;
        write_tensor(&args.out.join("flow.gft"), &inf.flow)?;
        write_tensor(&args.out.join("mask.gft"), &inf.mask)?;
        write_tensor(&args.out.join("residual.gft"), &inf.residual)?;
        write_landmarks(&args.out.join("target_landmarks.txt"), &lm_a)?;
    }

    let hires = match (&args.hires_target, &args.hires_source) {
        (Some(ht), Some(hs)) => {
            let (ta, sb) = (read_png(ht)?, read_png(hs)?);
            if ta.shape() != sb.shape() {
                return Err(CliError::Runtime(geoflow::Error::Incompatible(format!(
                    "high-resolution pair differs in size: {} vs {}",
                    ta.shape(),
                    sb.shape()
                ))));
            }
            let maps = TransferMaps {
                flow: FlowField::new(inf.flow.clone())?,
                mask: AttentionMask::new(inf.mask.clone())?,
                residual: AppearanceResidual::new(inf.residual.clone(), state.nets.transfer.alpha)?,
            };
            let out = apply_transfer(&ta, &sb, &maps)?;
            write_png(&args.out.join("transferred_hires.png"), &out)?;
            Some(out)
        }
        _ => None,
    };
    println!("wrote transfer results to {}", args.out.display());
    Ok(TransferOutput {
        transferred: inf.transferred,
        hires,
    })
}

pub fn cmd_remove(args: &RemoveArgs) -> CliResult<Tensor<f32>> {
    let state = load_checkpoint(&args.checkpoint)?;
    let img = read_image_sized(&args.input, state.config.image_size)?;
    let out = run_removal(&state.nets, &img)?;
    create_dir(&args.out)?;
    echo_checkpoint_config(&state, &args.out)?;
    write_png(&args.out.join("removed.png"), &out)?;
    println!("wrote {}", args.out.join("removed.png").display());
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SanityMetrics {
    /// Fréchet distance between validation and training images of domain A.
    pub fid_a_val_a_train: f64,
    /// Fréchet distance between domain-A validation and domain-B training images.
    pub fid_a_val_b_train: f64,
    pub classifier_val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointMetrics {
    pub step: u64,
    /// Validation pairs `(a_i, b_i)`.
    pub val_pairs: usize,
    pub val: VariantMetrics,
    /// Test pairs whose skin tints differ by at least `eval.min_tint_gap`.
    pub shifted_pairs: usize,
    pub shifted: Option<VariantMetrics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub format: String,
    pub sanity: SanityMetrics,
    pub checkpoint: Option<CheckpointMetrics>,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let mut overrides = args.cfg.overrides.clone();
    if let Some(p) = &args.data {
        overrides.push(format!("data.dir={}", toml::Value::String(p.display().to_string())));
    }
    if let Some(p) = &args.out {
        overrides.push(format!("output.dir={}", toml::Value::String(p.display().to_string())));
    }
    let cfg = Config::load(args.cfg.config.as_deref(), &overrides)?;
    cfg.validate()?;
    let ckpt = match &args.checkpoint {
        Some(p) => {
            let st = load_checkpoint(p)?;
            if st.config.image_size != cfg.train.image_size {
                return Err(CliError::Runtime(geoflow::Error::Incompatible(format!(
                    "checkpoint image size {} but configured image size {}",
                    st.config.image_size, cfg.train.image_size
                ))));
            }
            Some(st)
        }
        None => None,
    };
    let data = load_dataset(&cfg.data.dir, cfg.train.image_size)?;
    let out = cfg.output.dir.clone();
    cfg.echo_into(&out)?;

    let embedder = FixedEmbedder::default();
    let a_val = stack_images(data.split(0, Split::Val))?;
    let a_train = stack_images(data.split(0, Split::Train))?;
    let b_train = stack_images(data.split(1, Split::Train))?;
    let classifier = train_attribute_classifier(&data, cfg.eval.classifier_steps, cfg.eval.classifier_seed)?;
    let sanity = SanityMetrics {
        fid_a_val_a_train: frechet_distance(&embedder, &a_val, &a_train)?,
        fid_a_val_b_train: frechet_distance(&embedder, &a_val, &b_train)?,
        classifier_val_accuracy: classifier.val_accuracy,
    };
    println!(
        "sanity: FID(A_val, A_train) {:.4}  FID(A_val, B_train) {:.4}  classifier val accuracy {:.4}",
        sanity.fid_a_val_a_train, sanity.fid_a_val_b_train, sanity.classifier_val_accuracy
    );

    let checkpoint = match &ckpt {
        Some(st) => {
            let (va, vb) = (data.split(0, Split::Val), data.split(1, Split::Val));
            let val_pairs: Vec<(usize, usize)> = (0..va.len().min(vb.len())).map(|i| (i, i)).collect();
            let reference = stack_images(data.split(1, Split::Test))?;
            let attr = cfg.data.attribute;
            let val = evaluate_pairs(&st.nets, va, vb, &val_pairs, &reference, &classifier, &embedder, attr)?;
            let (ta, tb) = (data.split(0, Split::Test), data.split(1, Split::Test));
            let shifted_pairs = appearance_shifted_pairs(ta, tb, cfg.eval.min_tint_gap);
            let shifted = if shifted_pairs.is_empty() {
                None
            } else {
                Some(evaluate_pairs(&st.nets, ta, tb, &shifted_pairs, &reference, &classifier, &embedder, attr)?)
            };
            println!(
                "checkpoint step {}: validation accuracy {:.4}, cycle L1 {:.4}, faithfulness {:.4}, FID {:.4}",
                st.step, val.accuracy, val.cycle_l1, val.faithfulness, val.fid
            );
            Some(CheckpointMetrics {
                step: st.step,
                val_pairs: val_pairs.len(),
                val,
                shifted_pairs: shifted_pairs.len(),
                shifted,
            })
        }
        None => None,
    };

    let report = EvalReport {
        format: "geoflow-eval v1".into(),
        sanity,
        checkpoint,
    };
    write_text(&out.join("eval.toml"), &toml::to_string(&report).expect("report serializes"))?;

    if args.ablation {
        let acfg = AblationConfig {
            train: cfg.train.clone(),
            seeds: cfg.eval.seeds.clone(),
            variants: cfg.eval.variants.clone(),
            attribute: cfg.data.attribute,
            min_tint_gap: cfg.eval.min_tint_gap,
        };
        let runs = out.join("runs");
        let mut hooks = |v: geoflow::networks::Variant, seed: u64| -> Box<dyn TrainHooks> {
            println!("ablation: training {} seed {seed}", v.name());
            match DirHooks::new(&runs.join(format!("{}_seed{seed}", v.name()))) {
                Ok(h) => Box::new(h),
                Err(_) => Box::new(geoflow::training::NoHooks),
            }
        };
        let ablation = run_ablation(&acfg, &data, &classifier, &mut hooks)?;
        write_text(&out.join("ablation.tsv"), &ablation.to_tsv())?;
        write_text(&out.join("ablation.toml"), &ablation.to_toml())?;
        for s in &ablation.summary {
            println!(
                "{:<10} faithfulness {:.4} ± {:.4}  accuracy {:.4} ± {:.4}  FID {:.4} ± {:.4}",
                s.variant, s.faithfulness_mean, s.faithfulness_std, s.accuracy_mean, s.accuracy_std, s.fid_mean, s.fid_std
            );
        }
    }
    Ok(report)
}

/// Runs the suite; returns the worst relative error.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<f64> {
    let opts = GradCheckOptions {
        seed: args.seed,
        max_coords: args.max_coords,
        ..GradCheckOptions::default()
    };
    let reports = gradient_suite(opts)?;
    let mut worst = (0.0f64, String::new());
    for r in &reports {
        let e = r.max_rel_error();
        let at = r.worst().map(|t| t.name.clone()).unwrap_or_default();
        println!("{:<24} {:>10.3e}  {at}", r.label, e);
        if e > worst.0 || e.is_nan() {
            worst = (e, format!("{}/{at}", r.label));
        }
    }
    println!("worst relative error {:.3e} ({}), tolerance {:.0e}", worst.0, worst.1, args.tolerance);
    if !(worst.0 <= args.tolerance) {
        return Err(CliError::Runtime(geoflow::Error::Metric(format!(
            "gradient check failed: {:.3e} > {:.0e}",
            worst.0, args.tolerance
        ))));
    }
    Ok(worst.0)
}
