//! Command-line surface: one subcommand per pipeline stage, file artifacts
//! in, file artifacts out. Exit codes: 0 success, 1 usage error, 2 data or
//! IO error, 3 divergence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis;
use crate::dataset::{self, ImageRef, Label, Manifest, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{self, CurveSummary, MetricsReport};
use crate::model::{self, BackboneParams, HeadParams};
use crate::rng::mix_seed;
use crate::scenegen::{self, SceneSpec};
use crate::train::{self, TrainConfig, TrainState};

/// Environment variable naming the default output root.
pub const RUN_DIR_ENV: &str = "VIGIL_RUN_DIR";

fn run_dir() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Parse argv and run the selected subcommand, returning the process exit
/// code instead of exiting (so the dispatcher is testable in-process).
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version land here too; those print to stdout
            // and exit 0, real parse errors go to stderr with exit 1
            let code = i32::from(err.use_stderr());
            let _ = err.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Usage(_) => 1,
                Error::Divergence { .. } => 3,
                _ => 2,
            }
        }
    }
}

#[derive(Parser)]
#[command(name = "vigil", version, about = "Abandoned-object scene classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with its manifest
    Gen(GenArgs),
    /// Index a directory of labeled frames into a manifest
    Ingest(IngestArgs),
    /// Re-draw the video-level train/val/test assignment of a manifest
    Split(SplitArgs),
    /// Expand a manifest 4x with the flip/grayscale variants
    Augment(AugmentArgs),
    /// Train the classifier and save weights, curves, and checkpoints
    Train(TrainArgs),
    /// Evaluate saved weights on one split of a manifest
    Eval(EvalArgs),
    /// Combine evaluation reports and curves into a comparison table
    Compare(CompareArgs),
    /// Evaluate one model at home and on a foreign scene
    CrossScene(CrossSceneArgs),
    /// Render the saliency map of a single frame
    Saliency(SaliencyArgs),
    /// Write misclassified frames and their saliency maps
    Gallery(GalleryArgs),
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(args) => run_gen(args),
        Command::Ingest(args) => run_ingest(args),
        Command::Split(args) => run_split(args),
        Command::Augment(args) => run_augment(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Compare(args) => run_compare(args),
        Command::CrossScene(args) => run_cross_scene(args),
        Command::Saliency(args) => run_saliency(args),
        Command::Gallery(args) => run_gallery(args),
    }
}

/// Refuse to clobber an existing artifact unless --force was given.
fn guard(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::WouldOverwrite(path.to_path_buf()));
    }
    Ok(())
}

fn parse_ratios(text: &str) -> Result<SplitSpec> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Usage(format!("--ratios expects three numbers, got {text:?}")))?;
    let [train, val, test] = parts[..] else {
        return Err(Error::Usage(format!(
            "--ratios expects train,val,test, got {} value(s)",
            parts.len()
        )));
    };
    let spec = SplitSpec {
        ratios: [train, val, test],
        seed: 0,
    };
    spec.validate()
        .map_err(|e| Error::Usage(format!("--ratios: {e}")))?;
    Ok(spec)
}

fn parse_split(text: &str) -> Result<Split> {
    Split::parse(text).ok_or_else(|| {
        Error::Usage(format!("--split must be train, val, or test, got {text:?}"))
    })
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

/// Rewrite relative image refs so the manifest can be saved under
/// `out_path` without breaking them: refs stay relative when the directory
/// does not change, and are absolutized against the old base otherwise.
fn rebase_for_save(manifest: &mut Manifest, out_path: &Path) -> Result<()> {
    let Some(base) = manifest.base_dir.clone() else {
        return Ok(());
    };
    let out_dir = out_path.parent().unwrap_or(Path::new("."));
    if absolute(out_dir)? == absolute(&base)? {
        return Ok(());
    }
    for record in &mut manifest.records {
        if let ImageRef::Path(p) = &mut record.image_ref {
            if p.is_relative() {
                *p = absolute(&base.join(&p))?;
            }
        }
    }
    Ok(())
}

#[derive(Args)]
struct GenArgs {
    /// Number of distinct scenes
    #[arg(long, default_value_t = 2)]
    scenes: usize,
    /// Scene id prefix; scene i is named "<prefix><i>". Give separate gen
    /// runs distinct prefixes so their corpora can be mixed or compared.
    #[arg(long, default_value = "s")]
    scene_prefix: String,
    /// Events (videos) per scene
    #[arg(long, default_value_t = 10)]
    events: usize,
    /// Frames per event
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for frames/ and manifest.tsv [default: $VIGIL_RUN_DIR/corpus]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Video-level train,val,test ratios
    #[arg(long, default_value = "0.7,0.15,0.15")]
    ratios: String,
    /// Overwrite existing outputs
    #[arg(long)]
    force: bool,
}

fn run_gen(args: GenArgs) -> Result<()> {
    let out = args.out.unwrap_or_else(|| run_dir().join("corpus"));
    let manifest_path = out.join("manifest.tsv");
    guard(&manifest_path, args.force)?;
    let mut spec = parse_ratios(&args.ratios)?;
    spec.seed = args.seed;

    let scenes: Vec<SceneSpec> = (0..args.scenes)
        .map(|i| {
            let scene_id = format!("{}{i}", args.scene_prefix);
            let background_seed = mix_seed(args.seed, &scene_id);
            SceneSpec::desk(scene_id, background_seed)
        })
        .collect();
    let corpus = scenegen::generate_corpus(&scenes, args.events, args.frames, args.seed)?;
    let frames_dir = out.join("frames");
    let mut records = scenegen::write_frames(&corpus.frames, &frames_dir)?;
    for record in &mut records {
        if let ImageRef::Path(p) = &mut record.image_ref {
            *p = Path::new("frames").join(&p);
        }
    }
    let manifest = dataset::split_by_video(records, &spec)?.with_events(corpus.events)?;
    dataset::save_manifest(&manifest, &manifest_path)?;
    println!("frames={}", manifest.records.len());
    println!("videos={}", manifest.assignment.len());
    println!("manifest={}", manifest_path.display());
    Ok(())
}

#[derive(Args)]
struct IngestArgs {
    /// Directory holding one subdirectory per label
    #[arg(long)]
    dir: PathBuf,
    /// Subdirectory-to-label mapping, e.g. bags=abandoned (repeatable)
    #[arg(long = "map")]
    maps: Vec<String>,
    /// Video-level train,val,test ratios
    #[arg(long, default_value = "0.7,0.15,0.15")]
    ratios: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output manifest path [default: $VIGIL_RUN_DIR/manifest.tsv]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn run_ingest(args: IngestArgs) -> Result<()> {
    let out = args.out.unwrap_or_else(|| run_dir().join("manifest.tsv"));
    guard(&out, args.force)?;
    let mut spec = parse_ratios(&args.ratios)?;
    spec.seed = args.seed;

    let mut rule = BTreeMap::new();
    if args.maps.is_empty() {
        rule.insert("abandoned".to_string(), Label::Abandoned);
        rule.insert("background".to_string(), Label::Background);
    }
    for map in &args.maps {
        let parsed = map
            .split_once('=')
            .and_then(|(dir, label)| Label::parse(label).map(|l| (dir.to_string(), l)));
        let Some((dir, label)) = parsed else {
            return Err(Error::Usage(format!(
                "--map expects <subdir>=abandoned|background, got {map:?}"
            )));
        };
        rule.insert(dir, label);
    }

    let ingest = scenegen::ingest_frames_dir(&args.dir, &rule)?;
    for (path, reason) in &ingest.skipped {
        eprintln!("skipped {}: {reason}", path.display());
    }
    // absolutize refs so the manifest works from any directory
    let mut records = ingest.records;
    for record in &mut records {
        if let ImageRef::Path(p) = &mut record.image_ref {
            if p.is_relative() {
                *p = absolute(p)?;
            }
        }
    }
    let frames = records.len();
    let manifest = dataset::split_by_video(records, &spec)?;
    dataset::save_manifest(&manifest, &out)?;
    println!("frames={frames}");
    println!("skipped={}", ingest.skipped.len());
    println!("videos={}", manifest.assignment.len());
    println!("manifest={}", out.display());
    Ok(())
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Video-level train,val,test ratios
    #[arg(long, default_value = "0.7,0.15,0.15")]
    ratios: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output manifest path [default: next to the input]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn run_split(args: SplitArgs) -> Result<()> {
    let out = args
        .out
        .unwrap_or_else(|| args.manifest.with_file_name("manifest-split.tsv"));
    guard(&out, args.force)?;
    let mut spec = parse_ratios(&args.ratios)?;
    spec.seed = args.seed;

    let source = dataset::load_manifest(&args.manifest)?;
    let events = source.events.clone();
    let base_dir = source.base_dir.clone();
    let mut manifest = dataset::split_by_video(source.records, &spec)?;
    if let Some(events) = events {
        manifest = manifest.with_events(events)?;
    }
    manifest.base_dir = base_dir;
    rebase_for_save(&mut manifest, &out)?;
    dataset::save_manifest(&manifest, &out)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split}={}", manifest.videos_of(split).len());
    }
    println!("manifest={}", out.display());
    Ok(())
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output manifest path [default: next to the input]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn run_augment(args: AugmentArgs) -> Result<()> {
    let out = args
        .out
        .unwrap_or_else(|| args.manifest.with_file_name("manifest-aug.tsv"));
    guard(&out, args.force)?;
    let source = dataset::load_manifest(&args.manifest)?;
    let mut manifest = dataset::augment_manifest(&source)?;
    rebase_for_save(&mut manifest, &out)?;
    dataset::save_manifest(&manifest, &out)?;
    println!("records={}", manifest.records.len());
    println!("manifest={}", out.display());
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Total optimization steps
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    /// Initial learning rate
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Learning-rate decay factor
    #[arg(long, default_value_t = 0.16)]
    decay: f64,
    /// Steps between decay applications
    #[arg(long, default_value_t = 500)]
    decay_interval: u64,
    /// Batch size
    #[arg(long, default_value_t = 100)]
    batch: usize,
    /// Steps between curve points
    #[arg(long, default_value_t = 50)]
    eval_interval: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Update the backbone too instead of keeping it frozen
    #[arg(long)]
    fine_tune: bool,
    /// Weights output [default: $VIGIL_RUN_DIR/weights.bin]
    #[arg(long)]
    out_weights: Option<PathBuf>,
    /// Curves CSV output [default: $VIGIL_RUN_DIR/curves.csv]
    #[arg(long)]
    out_curves: Option<PathBuf>,
    /// Resume from this checkpoint instead of initializing fresh
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Save the final state as a checkpoint
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn run_train(args: TrainArgs) -> Result<()> {
    let weights_path = args
        .out_weights
        .unwrap_or_else(|| run_dir().join("weights.bin"));
    let curves_path = args
        .out_curves
        .unwrap_or_else(|| run_dir().join("curves.csv"));
    guard(&weights_path, args.force)?;
    guard(&curves_path, args.force)?;
    if let Some(ckpt) = &args.checkpoint_out {
        guard(ckpt, args.force)?;
    }

    let manifest = dataset::load_manifest(&args.manifest)?;
    let config = TrainConfig {
        total_steps: args.steps,
        initial_lr: args.lr,
        lr_decay: args.decay,
        decay_interval_steps: args.decay_interval,
        batch_size: args.batch,
        eval_interval_steps: args.eval_interval,
        seed: args.seed,
        freeze_backbone: !args.fine_tune,
    };
    let state = match &args.resume {
        Some(ckpt) => train::resume(ckpt, &config, &manifest)?,
        None => {
            let records = manifest.records_of(Split::Train);
            let first = records
                .first()
                .ok_or_else(|| Error::EmptySplit("train".into()))?;
            let probe = first.decode(manifest.base_dir.as_deref())?;
            let backbone = BackboneParams::tiny_v1_with_input(
                mix_seed(args.seed, "backbone"),
                probe.height(),
                probe.width(),
            );
            let head = HeadParams::zeros(backbone.embedding_dim);
            TrainState::new(&config, backbone, head)
        }
    };
    let (state, curves) = train::continue_training(state, &config, &manifest, Some(&curves_path))?;
    model::save_weights(&state.backbone, &state.head, &weights_path)?;
    if let Some(ckpt) = &args.checkpoint_out {
        train::save_checkpoint(&state, &config, ckpt)?;
        println!("checkpoint={}", ckpt.display());
    }
    println!("steps={}", state.step);
    println!("curve_points={}", curves.len());
    if let Some(last) = curves.last() {
        println!("final_train_loss={}", last.train_loss);
        println!("final_val_loss={}", last.val_loss);
        println!("final_train_acc={}", last.train_accuracy);
        println!("final_val_acc={}", last.val_accuracy);
    }
    println!("weights={}", weights_path.display());
    println!("curves={}", curves_path.display());
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Dataset name in the report [default: manifest file stem]
    #[arg(long)]
    dataset: Option<String>,
    /// Also write the report to this file
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    if let Some(out) = &args.out {
        guard(out, args.force)?;
    }
    let dataset_name = args.dataset.clone().unwrap_or_else(|| {
        args.manifest
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let manifest = dataset::load_manifest(&args.manifest)?;
    let (backbone, head) = model::load_weights(&args.weights)?;
    let report = eval::evaluate(&backbone, &head, &manifest, split, &dataset_name)?;
    print!("{}", report.to_kv());
    if let Some(out) = &args.out {
        fs::write(out, report.to_kv()).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

#[derive(Args)]
struct CompareArgs {
    /// Evaluation report (key=value file); repeat per dataset
    #[arg(long = "report", required = true)]
    reports: Vec<PathBuf>,
    /// Curves CSV paired with each --report, in order
    #[arg(long = "curves", required = true)]
    curves: Vec<PathBuf>,
    /// Also write the table as CSV
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn run_compare(args: CompareArgs) -> Result<()> {
    if args.reports.len() != args.curves.len() {
        return Err(Error::Usage(format!(
            "{} --report flag(s) but {} --curves flag(s); pass one of each per dataset",
            args.reports.len(),
            args.curves.len()
        )));
    }
    if let Some(out) = &args.out_csv {
        guard(out, args.force)?;
    }
    let mut reports = Vec::new();
    let mut summaries = Vec::new();
    for (report_path, curves_path) in args.reports.iter().zip(&args.curves) {
        let text = fs::read_to_string(report_path).map_err(|e| Error::io(report_path, e))?;
        reports.push(MetricsReport::parse_kv(&text)?);
        let curves = train::load_curves(curves_path)?;
        summaries.push(CurveSummary::from_curves(&curves).ok_or_else(|| {
            Error::InvalidArgument(format!("{} holds no curve points", curves_path.display()))
        })?);
    }
    let table = eval::comparison_table(&reports, &summaries)?;
    print!("{}", table.to_text());
    if let Some(out) = &args.out_csv {
        fs::write(out, table.to_csv()).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

#[derive(Args)]
struct CrossSceneArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Manifest the model was trained on
    #[arg(long)]
    home: PathBuf,
    /// Manifest of the unseen scene
    #[arg(long)]
    foreign: PathBuf,
    /// Skip the scene-contamination check
    #[arg(long)]
    allow_overlap: bool,
    /// Also write the paired report to this file
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn run_cross_scene(args: CrossSceneArgs) -> Result<()> {
    if let Some(out) = &args.out {
        guard(out, args.force)?;
    }
    let home = dataset::load_manifest(&args.home)?;
    let foreign = dataset::load_manifest(&args.foreign)?;
    let (backbone, head) = model::load_weights(&args.weights)?;
    let report = eval::cross_scene_report(&backbone, &head, &home, &foreign, args.allow_overlap)?;
    print!("{}", report.to_kv());
    if let Some(out) = &args.out {
        fs::write(out, report.to_kv()).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Video the frame belongs to
    #[arg(long)]
    video: String,
    /// Frame index within the video
    #[arg(long)]
    frame: usize,
    /// Variant of the frame
    #[arg(long, default_value = "orig-color")]
    variant: String,
    /// Output PNG [default: $VIGIL_RUN_DIR/saliency.png]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn run_saliency(args: SaliencyArgs) -> Result<()> {
    let out = args.out.unwrap_or_else(|| run_dir().join("saliency.png"));
    guard(&out, args.force)?;
    let variant = dataset::Variant::parse(&args.variant).ok_or_else(|| {
        Error::Usage(format!(
            "--variant must be orig-color, orig-gray, flip-color, or flip-gray, got {:?}",
            args.variant
        ))
    })?;
    let manifest = dataset::load_manifest(&args.manifest)?;
    let (backbone, head) = model::load_weights(&args.weights)?;
    let record = manifest
        .records
        .iter()
        .find(|r| r.video_id == args.video && r.frame_index == args.frame && r.variant == variant)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no record for video {} frame {} variant {}",
                args.video,
                args.frame,
                variant.as_str()
            ))
        })?;
    let image = record.decode(manifest.base_dir.as_deref())?;
    let map = analysis::saliency(&backbone, &head, &image)?;
    map.save_png(&out)?;
    println!("video={}", args.video);
    println!("frame={}", args.frame);
    println!("variant={}", variant.as_str());
    println!("predicted={}", map.target_class.as_str());
    println!("map={}", out.display());
    Ok(())
}

#[derive(Args)]
struct GalleryArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output directory [default: $VIGIL_RUN_DIR/gallery]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also slice false negatives by the near-furniture flag
    #[arg(long)]
    occlusion: bool,
    #[arg(long)]
    force: bool,
}

fn run_gallery(args: GalleryArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let out = args.out.unwrap_or_else(|| run_dir().join("gallery"));
    guard(&out.join(analysis::GALLERY_SUMMARY), args.force)?;
    let manifest = dataset::load_manifest(&args.manifest)?;
    let (backbone, head) = model::load_weights(&args.weights)?;
    let gallery = analysis::build_error_gallery(&backbone, &head, &manifest, split, &out)?;
    println!("false_positives={}", gallery.false_positives.len());
    println!("false_negatives={}", gallery.false_negatives.len());
    println!("gallery={}", out.display());
    if args.occlusion {
        let slice = analysis::occlusion_slice(&gallery, &manifest)?;
        print!("{}", slice.to_kv());
    }
    Ok(())
}
