use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use motionstack::embed::{
    embed_tracklets, group_by_identity, load_net, mine_triplets, propose_merges, read_triplets, resolve_triplets,
    save_net, separation_metrics, tracklet_centroids, train, EmbeddingNet, FeatureMatrix, Pca2, TrainConfig,
    Triplet, DEFAULT_HIDDEN, DEFAULT_MARGIN, DEFAULT_MERGE_THRESHOLD,
};
use motionstack::frames::{build_dataset, FrameSource, InputConfig, Variant};
use motionstack::metrics::{evaluate, read_detections, read_ground_truth, write_jsonl, BBox};
use motionstack::roi::{extract_features, FeatureMap, DEFAULT_OUTPUT_SIZE, DEFAULT_SAMPLING_RATIO};
use motionstack::surgery::{load_weights, random_init_first_layer, replicate_init, save_weights};
use motionstack::synth::{perturb_detections, Background, IdSwitch, PerturbConfig, Scene, SceneConfig};
use motionstack::tensor::{read_tensor, write_tensor};
use motionstack::tracklets::{filter_min_length, IdentityMap, TrackletSet, DEFAULT_MIN_LEN};
use motionstack::{Error, ErrorClass};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

const THREADS_ENV: &str = "MOTIONSTACK_THREADS";
const REPORT_FILE: &str = "report.json";

/// Temporal frame stacking, weight surgery, detection metrics and tracklet
/// re-identification.
///
/// Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 I/O
/// error. Set MOTIONSTACK_THREADS to cap the number of worker threads.
#[derive(Debug, Parser)]
#[command(name = "motionstack", version, about, long_about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build stacked-input tensors for every frame of a sequence.
    Stack(StackArgs),
    /// Widen a first convolution layer for stacked inputs.
    Surgery(SurgeryArgs),
    /// Evaluate detections against ground truth (mAP, precision, recall).
    Eval(EvalArgs),
    /// Pool one appearance vector per box from a feature map.
    Features(FeaturesArgs),
    /// Mine triplets from temporally overlapping tracklets.
    Mine(MineArgs),
    /// Train the embedding network on mined triplets.
    Train(TrainArgs),
    /// Propose same-individual tracklet pairs from trained embeddings.
    Reid(ReidArgs),
    /// Project tracklet frame embeddings to 2-d (PCA) and export CSV.
    Project(ProjectArgs),
    /// Generate a synthetic scene and simulated detections.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct StackArgs {
    /// Directory of binary PPM frames; the frame index is the last number in each file stem.
    #[arg(long)]
    frames: PathBuf,
    /// Input variant.
    #[arg(long, value_enum)]
    variant: VariantArg,
    /// Frames per stack for rgb-seq and diff-seq.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Frame interval for rgb-int and diff-int.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    delta: u64,
    /// Optional directory of per-frame label files, copied next to each stack.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output directory (stacks, manifest.json, report.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    RgbSeq,
    RgbInt,
    DiffSeq,
    DiffInt,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::RgbSeq => Variant::RgbSeq,
            VariantArg::RgbInt => Variant::RgbInt,
            VariantArg::DiffSeq => Variant::DiffSeq,
            VariantArg::DiffInt => Variant::DiffInt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SurgeryMode {
    Replicate,
    Random,
}

#[derive(Debug, Args)]
struct SurgeryArgs {
    /// First-layer weights, MTENSOR f32 [c_out, c_in, kh, kw]. A sidecar <stem>.json and bias <stem>.bias.mten are read when present.
    #[arg(long)]
    weights: PathBuf,
    /// replicate: tile the filters n times scaled by 1/n; random: fresh fan-in uniform layer.
    #[arg(long, value_enum)]
    mode: SurgeryMode,
    /// Number of stacked frames.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Seed for random mode.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output weights (.mten); sidecar and bias are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Report path [default: <out>.report.json].
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Detections, JSON lines {"frame","bbox","score","class"}.
    #[arg(long)]
    dets: PathBuf,
    /// Ground truth, JSON lines {"frame","bbox","class"}.
    #[arg(long)]
    gt: PathBuf,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    /// Feature map, MTENSOR f32 [C, H, W].
    #[arg(long)]
    map: PathBuf,
    /// Feature pixels per image pixel (e.g. 0.0625 for stride 16).
    #[arg(long)]
    scale: f64,
    /// Boxes in image coordinates, JSON lines with a "bbox" field.
    #[arg(long)]
    boxes: PathBuf,
    /// RoIAlign output grid size.
    #[arg(long, default_value_t = DEFAULT_OUTPUT_SIZE as u64, value_parser = clap::value_parser!(u64).range(1..))]
    output_size: u64,
    /// Bilinear samples per bin along each axis.
    #[arg(long, default_value_t = DEFAULT_SAMPLING_RATIO as u64, value_parser = clap::value_parser!(u64).range(1..))]
    sampling_ratio: u64,
    /// Output features, MTENSOR f32 [num_boxes, C].
    #[arg(long)]
    out: PathBuf,
    /// Report path [default: <out>.report.json].
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MineArgs {
    /// Tracklet file.
    #[arg(long)]
    tracklets: PathBuf,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Triplets drawn per anchor frame.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    per_anchor: u64,
    /// Tracklets shorter than this are discarded first.
    #[arg(long, default_value_t = DEFAULT_MIN_LEN as u64)]
    min_len: u64,
    /// Output triplets, JSON lines {"a":[id,frame],"p":[id,frame],"n":[id,frame]}.
    #[arg(long)]
    out: PathBuf,
    /// Report path [default: <out>.report.json].
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Feature matrix, MTENSOR f32 [T, D].
    #[arg(long)]
    features: PathBuf,
    /// Tracklet file with feature_rows.
    #[arg(long)]
    tracklets: PathBuf,
    /// Cached triplets; mined on the fly (with --seed and --per-anchor) when omitted.
    #[arg(long)]
    triplets: Option<PathBuf>,
    /// Tracklets shorter than this are discarded before mining.
    #[arg(long, default_value_t = DEFAULT_MIN_LEN as u64)]
    min_len: u64,
    /// Triplets per anchor when mining.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    per_anchor: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    /// Triplet loss margin.
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    margin: f64,
    /// Seed for shuffling and mining.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed for weight initialization.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HIDDEN.to_vec())]
    hidden: Vec<usize>,
    /// L2-normalize output embeddings.
    #[arg(long)]
    normalize: bool,
    /// Output directory (layer tensors, manifest.json, report.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReidArgs {
    /// Trained network directory.
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    tracklets: PathBuf,
    /// Known identity groups; enables recovery scoring and identity-level separation.
    #[arg(long)]
    identity_map: Option<PathBuf>,
    /// Maximum centroid distance for a proposed merge.
    #[arg(long, default_value_t = DEFAULT_MERGE_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_LEN as u64)]
    min_len: u64,
    /// Report path (merge proposals and separation metrics).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    tracklets: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MIN_LEN as u64)]
    min_len: u64,
    /// Output CSV "id,frame,x,y".
    #[arg(long)]
    out: PathBuf,
    /// Report path [default: <out>.report.json].
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    objects: usize,
    #[arg(long, default_value_t = 5.0)]
    radius_min: f64,
    #[arg(long, default_value_t = 10.0)]
    radius_max: f64,
    /// Minimum speed in pixels per frame.
    #[arg(long, default_value_t = 0.5)]
    speed_min: f64,
    #[arg(long, default_value_t = 3.0)]
    speed_max: f64,
    /// ID switch as OBJECT:FRAME (repeatable).
    #[arg(long = "id-switch", value_name = "OBJECT:FRAME")]
    id_switches: Vec<IdSwitch>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "flat")]
    background: BackgroundArg,
    #[arg(long, default_value_t = motionstack::synth::DEFAULT_FEATURE_DIM)]
    feature_dim: usize,
    /// Standard deviation of the per-frame appearance noise.
    #[arg(long, default_value_t = 0.05)]
    feature_noise: f64,
    /// Probability of dropping each ground-truth box from the detections.
    #[arg(long, default_value_t = 0.0)]
    drop_rate: f64,
    /// Uniform corner jitter in pixels.
    #[arg(long, default_value_t = 0.0)]
    jitter_px: f64,
    /// Probability that a frame receives one false positive.
    #[arg(long, default_value_t = 0.0)]
    fp_rate: f64,
    /// True detections score in [score-min, 1]; false positives below it.
    #[arg(long, default_value_t = 1.0)]
    score_min: f64,
    /// Seed for detection perturbation.
    #[arg(long, default_value_t = 0)]
    det_seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackgroundArg {
    Flat,
    Textured,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage(e: Error) -> Failure {
    Failure::Usage(e.root().to_string())
}

#[derive(Serialize)]
struct Envelope<'a, R: Serialize> {
    tool_version: &'static str,
    command: &'a str,
    inputs: Value,
    results: R,
}

fn write_report(path: &Path, command: &str, inputs: Value, results: impl Serialize) -> CliResult {
    let env = Envelope { tool_version: env!("CARGO_PKG_VERSION"), command, inputs, results };
    let text = serde_json::to_string_pretty(&env).map_err(Error::from)? + "\n";
    write_file(path, text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::from(e).in_file(parent))?;
    }
    fs::write(path, bytes).map_err(|e| Error::from(e).in_file(path))?;
    Ok(())
}

fn sibling_report(out: &Path, report: Option<&PathBuf>) -> PathBuf {
    report.cloned().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".report.json");
        PathBuf::from(s)
    })
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = configure_threads().and_then(|_| run(cli.command));
    match outcome {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Data => 2,
                ErrorClass::Io => 3,
            })
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot configure {n} worker threads: {e}")))
}

fn run(command: Command) -> CliResult<String> {
    match command {
        Command::Stack(a) => stack(a),
        Command::Surgery(a) => surgery(a),
        Command::Eval(a) => eval(a),
        Command::Features(a) => features(a),
        Command::Mine(a) => mine(a),
        Command::Train(a) => train_cmd(a),
        Command::Reid(a) => reid(a),
        Command::Project(a) => project(a),
        Command::Synth(a) => synth(a),
    }
}

fn stack(a: StackArgs) -> CliResult<String> {
    let config = InputConfig::new(a.variant.into(), a.n as usize, a.delta as usize).map_err(usage)?;
    let source = FrameSource::from_dir(&a.frames)?;
    let manifest = build_dataset(&source, &config, &a.out, a.labels.as_deref())?;
    let inputs = json!({
        "frames": path_str(&a.frames),
        "labels": a.labels.as_deref().map(path_str),
        "variant": config.variant.name(),
        "n": config.n,
        "delta": config.delta,
    });
    let results = json!({
        "config": manifest.config,
        "stacks": manifest.items.len(),
        "first_index": manifest.items.first().map(|i| i.index),
        "last_index": manifest.items.last().map(|i| i.index),
    });
    write_report(&a.out.join(REPORT_FILE), "stack", inputs, results)?;
    let mut s = format!(
        "wrote {} stacks ({}, {} channels) to {}\n",
        manifest.items.len(),
        config.variant.name(),
        config.channels(),
        a.out.display()
    );
    if config.outside_evaluated_range() {
        s.push_str("note: parameters lie outside the evaluated range\n");
    }
    Ok(s)
}

fn surgery(a: SurgeryArgs) -> CliResult<String> {
    let n = a.n as usize;
    let input = load_weights(&a.weights)?;
    let output = match a.mode {
        SurgeryMode::Replicate => replicate_init(&input, n)?,
        SurgeryMode::Random => {
            let mut w = random_init_first_layer(input.c_out, input.c_in * n, input.kh, input.kw, a.seed)?;
            if input.bias.is_none() {
                w.bias = None;
            }
            w
        }
    };
    save_weights(&output, &a.out)?;
    let inputs = json!({ "weights": path_str(&a.weights), "mode": a.mode, "n": n, "seed": a.seed });
    let results = json!({ "input": input.meta(), "output": output.meta() });
    write_report(&sibling_report(&a.out, a.report.as_ref()), "surgery", inputs, results)?;
    Ok(format!(
        "{:?} init: [{}, {}, {}, {}] -> [{}, {}, {}, {}] written to {}\n",
        a.mode,
        input.c_out,
        input.c_in,
        input.kh,
        input.kw,
        output.c_out,
        output.c_in,
        output.kh,
        output.kw,
        a.out.display()
    ))
}

fn eval(a: EvalArgs) -> CliResult<String> {
    let dets = read_detections(&a.dets)?;
    let gts = read_ground_truth(&a.gt)?;
    let report = evaluate(&dets, &gts);
    let inputs = json!({ "dets": path_str(&a.dets), "gt": path_str(&a.gt), "detections": dets.len(), "ground_truth": gts.len() });
    write_report(&a.out, "eval", inputs, &report)?;
    Ok(format!(
        "P {:.3}  R {:.3}  mAP@0.5 {:.3}  mAP@0.5:0.95 {:.3}\n",
        report.precision, report.recall, report.map50, report.map5095
    ))
}

#[derive(Deserialize)]
struct BoxRecord {
    bbox: BBox,
}

fn read_boxes(path: &Path) -> CliResult<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: BoxRecord = serde_json::from_str(line)
            .map_err(|e| Error::Record { line: i + 1, message: e.to_string() }.in_file(path))?;
        boxes.push(r.bbox);
    }
    if boxes.is_empty() {
        return Err(Error::Validation("no boxes".into()).in_file(path).into());
    }
    Ok(boxes)
}

fn features(a: FeaturesArgs) -> CliResult<String> {
    if !(a.scale > 0.0 && a.scale.is_finite()) {
        return Err(Failure::Usage(format!("--scale must be positive, got {}", a.scale)));
    }
    let map = FeatureMap::new(&read_tensor(&a.map)?, a.scale).map_err(|e| e.in_file(&a.map))?;
    let boxes = read_boxes(&a.boxes)?;
    let feats = extract_features(&map, &boxes, a.output_size as usize, a.sampling_ratio as usize)
        .map_err(|e| e.in_file(&a.boxes))?;
    write_tensor(&feats, &a.out)?;
    let inputs = json!({
        "map": path_str(&a.map),
        "boxes": path_str(&a.boxes),
        "scale": a.scale,
        "output_size": a.output_size,
        "sampling_ratio": a.sampling_ratio,
    });
    let results = json!({ "shape": feats.shape(), "output": path_str(&a.out) });
    write_report(&sibling_report(&a.out, a.report.as_ref()), "features", inputs, results)?;
    Ok(format!("pooled {} boxes x {} channels into {}\n", feats.shape()[0], feats.shape()[1], a.out.display()))
}

fn load_filtered(path: &Path, min_len: u64) -> CliResult<(TrackletSet, usize)> {
    let all = TrackletSet::load(path)?;
    Ok((filter_min_length(&all, min_len as usize), all.len()))
}

fn mine(a: MineArgs) -> CliResult<String> {
    let (set, total) = load_filtered(&a.tracklets, a.min_len)?;
    let triplets = mine_triplets(&set, a.seed, a.per_anchor as usize);
    write_jsonl(&triplets, &a.out)?;
    let anchors: BTreeSet<_> = triplets.iter().map(|t| t.anchor).collect();
    let inputs = json!({
        "tracklets": path_str(&a.tracklets),
        "seed": a.seed,
        "per_anchor": a.per_anchor,
        "min_len": a.min_len,
    });
    let results = json!({
        "tracklets_total": total,
        "tracklets_kept": set.len(),
        "anchor_frames": anchors.len(),
        "skipped_anchor_frames": set.total_frames() - anchors.len(),
        "triplets": triplets.len(),
    });
    write_report(&sibling_report(&a.out, a.report.as_ref()), "mine", inputs, results)?;
    Ok(format!(
        "mined {} triplets from {} of {} tracklets into {}\n",
        triplets.len(),
        set.len(),
        total,
        a.out.display()
    ))
}

fn load_features(path: &Path) -> CliResult<FeatureMatrix> {
    Ok(FeatureMatrix::from_tensor(&read_tensor(path)?).map_err(|e| e.in_file(path))?)
}

fn train_cmd(a: TrainArgs) -> CliResult<String> {
    let config = TrainConfig {
        margin: a.margin,
        learning_rate: a.lr,
        epochs: a.epochs as usize,
        batch_size: a.batch_size as usize,
        seed: a.seed,
        triplets_per_anchor: a.per_anchor as usize,
    };
    config.validate().map_err(usage)?;
    if a.hidden.contains(&0) {
        return Err(Failure::Usage("--hidden widths must be positive".into()));
    }
    let features = load_features(&a.features)?;
    let (set, _) = load_filtered(&a.tracklets, a.min_len)?;
    let triplets: Vec<Triplet> = match &a.triplets {
        Some(p) => read_triplets(p)?,
        None => mine_triplets(&set, a.seed, config.triplets_per_anchor),
    };
    let rows = match &a.triplets {
        Some(p) => resolve_triplets(&set, &triplets, &features).map_err(|e| e.in_file(p))?,
        None => resolve_triplets(&set, &triplets, &features).map_err(|e| e.in_file(&a.tracklets))?,
    };
    let mut net = EmbeddingNet::with_hidden(features.dim(), &a.hidden, a.init_seed)?;
    net.normalize_output = a.normalize;
    let (trained, trace) = train(&net, &features, &rows, &config).map_err(|e| e.in_file(&a.features))?;
    save_net(&trained, &a.out)?;
    let inputs = json!({
        "features": path_str(&a.features),
        "tracklets": path_str(&a.tracklets),
        "triplets": a.triplets.as_deref().map(path_str),
        "min_len": a.min_len,
        "init_seed": a.init_seed,
        "hidden": a.hidden,
        "normalize": a.normalize,
        "config": config,
    });
    let results = json!({
        "layer_dims": trained.layer_dims(),
        "parameters": trained.parameter_count(),
        "triplets": rows.len(),
        "loss_trace": trace,
    });
    write_report(&a.out.join(REPORT_FILE), "train", inputs, results)?;
    let first = trace.first().copied().unwrap_or(0.0);
    let last = trace.last().copied().unwrap_or(0.0);
    Ok(format!(
        "trained {} epochs on {} triplets: loss {first:.4} -> {last:.4}; network in {}\n",
        trace.len(),
        rows.len(),
        a.out.display()
    ))
}

fn reid(a: ReidArgs) -> CliResult<String> {
    if !(a.threshold >= 0.0 && a.threshold.is_finite()) {
        return Err(Failure::Usage(format!("--threshold must be non-negative, got {}", a.threshold)));
    }
    let net = load_net(&a.net)?;
    let features = load_features(&a.features)?;
    let (set, total) = load_filtered(&a.tracklets, a.min_len)?;
    let identities = a.identity_map.as_deref().map(IdentityMap::load).transpose()?;
    let embeddings = embed_tracklets(&net, &set, &features).map_err(|e| e.in_file(&a.tracklets))?;
    let centroids = tracklet_centroids(&net, &set, &features).map_err(|e| e.in_file(&a.tracklets))?;
    let merges = propose_merges(&centroids, &set, a.threshold);

    let identity_of = |id: u64| identities.as_ref().map_or(id, |m| m.identity_of(id));
    let groups = group_by_identity(&embeddings, identity_of);
    let separation = if groups.len() >= 2 { Some(separation_metrics(&groups)?) } else { None };

    let recovery = identities.as_ref().map(|m| {
        let kept: BTreeSet<u64> = set.ids().collect();
        let expected: BTreeSet<(u64, u64)> =
            m.pairs().into_iter().filter(|(x, y)| kept.contains(x) && kept.contains(y)).collect();
        let proposed: BTreeSet<(u64, u64)> = merges.iter().map(|p| (p.a, p.b)).collect();
        let recovered: Vec<_> = expected.intersection(&proposed).copied().collect();
        let missed: Vec<_> = expected.difference(&proposed).copied().collect();
        let false_pairs: Vec<_> = proposed.difference(&expected).copied().collect();
        json!({ "expected": expected, "recovered": recovered, "missed": missed, "false_pairs": false_pairs })
    });

    let inputs = json!({
        "net": path_str(&a.net),
        "features": path_str(&a.features),
        "tracklets": path_str(&a.tracklets),
        "identity_map": a.identity_map.as_deref().map(path_str),
        "threshold": a.threshold,
        "min_len": a.min_len,
    });
    let results = json!({
        "tracklets_total": total,
        "tracklets_kept": set.len(),
        "merges": merges,
        "separation": separation,
        "recovery": recovery,
    });
    write_report(&a.out, "reid", inputs, &results)?;
    let mut s = format!("{} merge proposals at threshold {}\n", merges.len(), a.threshold);
    for m in &merges {
        let _ = writeln!(s, "  {} ~ {}  (distance {:.4})", m.a, m.b, m.distance);
    }
    if let Some(sep) = separation {
        let _ = writeln!(s, "separation: intra {:.4}, inter {:.4}, ratio {:.4}", sep.intra_mean, sep.inter_mean, sep.ratio);
    }
    Ok(s)
}

fn project(a: ProjectArgs) -> CliResult<String> {
    let net = load_net(&a.net)?;
    let features = load_features(&a.features)?;
    let (set, _) = load_filtered(&a.tracklets, a.min_len)?;
    let embeddings = embed_tracklets(&net, &set, &features).map_err(|e| e.in_file(&a.tracklets))?;
    let points: Vec<Vec<f32>> = embeddings.iter().map(|(_, e)| e.clone()).collect();
    let pca = Pca2::fit(&points).map_err(|e| e.in_file(&a.tracklets))?;
    let mut csv = String::from("id,frame,x,y\n");
    for ((r, _), p) in embeddings.iter().zip(&points) {
        let [x, y] = pca.project(p);
        let _ = writeln!(csv, "{},{},{},{}", r.id, r.frame, x, y);
    }
    write_file(&a.out, csv.as_bytes())?;
    let inputs = json!({
        "net": path_str(&a.net),
        "features": path_str(&a.features),
        "tracklets": path_str(&a.tracklets),
        "min_len": a.min_len,
    });
    let results = json!({ "points": points.len(), "variances": pca.variances, "output": path_str(&a.out) });
    write_report(&sibling_report(&a.out, a.report.as_ref()), "project", inputs, results)?;
    Ok(format!("projected {} embeddings to {}\n", points.len(), a.out.display()))
}

fn synth(a: SynthArgs) -> CliResult<String> {
    let config = SceneConfig {
        width: a.width,
        height: a.height,
        num_frames: a.frames,
        num_objects: a.objects,
        radius_min: a.radius_min,
        radius_max: a.radius_max,
        speed_min: a.speed_min,
        speed_max: a.speed_max,
        id_switches: a.id_switches.clone(),
        seed: a.seed,
        background: match a.background {
            BackgroundArg::Flat => Background::Flat,
            BackgroundArg::Textured => Background::Textured,
        },
        feature_dim: a.feature_dim,
        feature_noise: a.feature_noise,
    };
    config.validate().map_err(usage)?;
    let perturb = PerturbConfig {
        drop_rate: a.drop_rate,
        jitter_px: a.jitter_px,
        fp_rate: a.fp_rate,
        score_min: a.score_min,
        seed: a.det_seed,
    };
    perturb.validate().map_err(usage)?;
    let scene = Scene::generate(&config)?;
    scene.write(&a.out)?;
    let dets = perturb_detections(&scene.gt, config.width, config.height, &perturb)?;
    write_jsonl(&dets, a.out.join("detections.jsonl"))?;
    let inputs = json!({ "scene": config, "detections": perturb });
    let results = json!({
        "frames": config.num_frames,
        "ground_truth": scene.gt.len(),
        "detections": dets.len(),
        "tracklets": scene.tracklets.len(),
        "feature_rows": scene.features.rows(),
        "identity_groups": scene.identity_map.groups,
    });
    write_report(&a.out.join(REPORT_FILE), "synth", inputs, results)?;
    Ok(format!(
        "generated {} frames, {} objects, {} tracklets in {}\n",
        config.num_frames,
        config.num_objects,
        scene.tracklets.len(),
        a.out.display()
    ))
}
