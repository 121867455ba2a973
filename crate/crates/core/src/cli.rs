//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code: 0 on success, 1 on usage
//! errors, 2 on data errors. Results go to stdout as JSON and to stderr as
//! a small table.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::diffusion::{
    self, assemble, build_mask, load_latent, outpaint_chain, outpaint_neighborhood, repaint, save_latent, ChannelGroup,
    Denoiser, Direction, ExternalDenoiser, GaussianDenoiser, LatentGrid, MaskSpec, NoiseSchedule, OutpaintBlock,
    RepaintParams, Side,
};
use crate::error::Error;
use crate::generative::{
    featurize_map, frechet_distance, load_features, load_moments, precision_recall, sample_refs_fps,
    sample_refs_threshold, save_features, save_moments, FeatureSet, Moments, PoseTrack,
};
use crate::matching::{ground_loss_rasters, object_loss, LossWeightTable};
use crate::raster::{export_mesh, rasterize_ground, render_semantic_map, save_raster, scene_mesh, MeshFormat};
use crate::scene::{
    apply_edit, label_name, load_layout, save_layout, synth_scene, DensityLabel, Edit, GroundClass, SceneLayout,
    SynthConfig, NUM_CLASSES,
};
use crate::voxel::{self, memory_footprint, save_voxels, voxelize, MiouClasses, Representation, VoxelSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "primscene", version, about = "Primitive-based semantic scene layouts")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "PRIMSCENE_THREADS")]
    threads: Option<usize>,
    /// JSON file with default values for seeds, grids and schedules.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Increase log verbosity.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic street layouts.
    Synth(SynthArgs),
    /// Ray-cast ground polygons into the BEV height/occupancy raster.
    Rasterize(InOut),
    /// Voxelize a layout into a semantic grid.
    Voxelize(VoxelizeArgs),
    /// Export the reconstructed scene mesh (OBJ or PLY).
    ExportMesh(MeshArgs),
    /// Render a top-down semantic map as PGM.
    RenderBev(InOut),
    /// Compare reconstructed layouts with ground truth.
    EvalRecon(EvalReconArgs),
    /// Precision/recall and Fréchet distance between feature sets.
    EvalGen(EvalGenArgs),
    /// Translate, rotate or scale one object instance.
    Edit(EditArgs),
    /// Sample a latent from the diffusion engine.
    Sample(SampleArgs),
    /// Masked resampling of a latent.
    Inpaint(InpaintArgs),
    /// Sliding-window extension of a latent.
    Outpaint(OutpaintArgs),
    /// Memory footprint of a scene representation.
    Stats(StatsArgs),
    /// Baseline features of rendered semantic maps.
    Featurize(FeaturizeArgs),
}

#[derive(Debug, Args)]
struct InOut {
    /// Input layout (JSON).
    layout: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Output file, or directory when `--scenes` is given.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes; scene `i` uses seed `seed + i`.
    #[arg(long)]
    scenes: Option<usize>,
    /// Fill every category to its full query count.
    #[arg(long)]
    full: bool,
}

#[derive(Debug, Args)]
struct VoxelizeArgs {
    layout: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Grid size in voxels, x,y,z.
    #[arg(long, value_parser = parse_dims3)]
    dims: Option<[usize; 3]>,
    /// Voxel edge in meters.
    #[arg(long)]
    voxel: Option<f64>,
}

#[derive(Debug, Args)]
struct MeshArgs {
    layout: PathBuf,
    /// Output path; the format follows the extension.
    #[arg(long)]
    out: PathBuf,
    /// Longitude segments of ellipsoid meshes.
    #[arg(long)]
    segments: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ClassSet {
    Truth,
    Either,
}

#[derive(Debug, Args)]
struct EvalReconArgs {
    /// Ground-truth layout file or directory of layouts.
    truth: PathBuf,
    /// Predicted layout file or directory, paired with the truth by order.
    pred: PathBuf,
    #[arg(long, value_parser = parse_dims3)]
    dims: Option<[usize; 3]>,
    #[arg(long)]
    voxel: Option<f64>,
    /// Classes averaged by mIoU.
    #[arg(long, value_enum, default_value = "truth")]
    miou_classes: ClassSet,
    /// Loss weight table (JSON).
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalGenArgs {
    /// Features of real samples.
    #[arg(long)]
    real: Option<PathBuf>,
    /// Features of generated samples.
    #[arg(long)]
    generated: Option<PathBuf>,
    /// Neighbourhood size for precision/recall.
    #[arg(long)]
    k: Option<usize>,
    /// Moments of real samples (overrides those of `--real`).
    #[arg(long)]
    real_moments: Option<PathBuf>,
    /// Moments of generated samples (overrides those of `--generated`).
    #[arg(long)]
    generated_moments: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("edit").required(true).args(["translate", "rotate", "scale"])))]
struct EditArgs {
    layout: PathBuf,
    #[arg(long)]
    id: u32,
    /// Offset dx,dy,dz in meters.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    translate: Option<[f64; 3]>,
    /// Axis and angle ax,ay,az,radians.
    #[arg(long, value_parser = parse_vec4, allow_hyphen_values = true)]
    rotate: Option<[f64; 4]>,
    /// Factors for the principal scales.
    #[arg(long, value_parser = parse_vec3)]
    scale: Option<[f64; 3]>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LabelArg {
    Low,
    Medium,
    High,
}

impl From<LabelArg> for DensityLabel {
    fn from(l: LabelArg) -> Self {
        match l {
            LabelArg::Low => DensityLabel::Low,
            LabelArg::Medium => DensityLabel::Medium,
            LabelArg::High => DensityLabel::High,
        }
    }
}

#[derive(Debug, Args)]
struct DiffusionArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Reverse steps, uniformly strided over the 1000-step schedule.
    #[arg(long)]
    steps: Option<usize>,
    /// Density label passed to the denoiser.
    #[arg(long, value_enum)]
    label: Option<LabelArg>,
    /// `host:port` of an external denoiser; the analytic Gaussian one is
    /// used otherwise.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    /// Mean of the analytic Gaussian denoiser.
    #[arg(long, allow_hyphen_values = true)]
    mean: Option<f64>,
    /// Variance of the analytic Gaussian denoiser.
    #[arg(long)]
    variance: Option<f64>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    out: PathBuf,
    /// Latent shape h,w,c.
    #[arg(long, value_parser = parse_dims3)]
    shape: Option<[usize; 3]>,
    #[command(flatten)]
    diffusion: DiffusionArgs,
}

#[derive(Debug, Args)]
struct ResampleArgs {
    /// Jump length of the resampling schedule.
    #[arg(long)]
    jump: Option<usize>,
    /// Passes per jump window.
    #[arg(long)]
    resample: Option<usize>,
}

#[derive(Debug, Args)]
struct InpaintArgs {
    #[arg(long)]
    latent: PathBuf,
    /// Region to synthesize: half:left|right|top|bottom,
    /// channels:ground|object, or rect:row0,row1,col0,col1.
    #[arg(long, value_parser = parse_mask)]
    mask: MaskSpec,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    diffusion: DiffusionArgs,
    #[command(flatten)]
    resampling: ResampleArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    Right,
    Left,
    Down,
    Up,
}

#[derive(Debug, Args)]
struct OutpaintArgs {
    #[arg(long)]
    latent: PathBuf,
    /// Extend in one direction; without it the full 3×3 neighbourhood is
    /// generated.
    #[arg(long, value_enum)]
    direction: Option<DirectionArg>,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    /// Directory for block latents and the assembled canvas.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    diffusion: DiffusionArgs,
    #[command(flatten)]
    resampling: ResampleArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReprArg {
    Voxel,
    Primitives,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long, value_enum)]
    repr: ReprArg,
    /// Voxel grid size x,y,z.
    #[arg(long, value_parser = parse_dims3)]
    dims: Option<[usize; 3]>,
    /// Raster size nx,ny for the primitive representation.
    #[arg(long, value_parser = parse_dims2)]
    raster: Option<[usize; 2]>,
    /// Number of primitives.
    #[arg(long)]
    primitives: Option<usize>,
}

#[derive(Debug, Args)]
struct FeaturizeArgs {
    /// Layout files or directories.
    #[arg(required = true)]
    layouts: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write feature moments here.
    #[arg(long)]
    moments: Option<PathBuf>,
    /// Pose track (JSON) used to pick reference layouts by pose id.
    #[arg(long)]
    track: Option<PathBuf>,
    /// Farthest-point sample this many poses from the track.
    #[arg(long, requires = "track", conflicts_with = "min_distance")]
    fps: Option<usize>,
    /// Keep poses at least this far apart along the track.
    #[arg(long, requires = "track")]
    min_distance: Option<f64>,
}

/// Defaults read from `--config`; flags take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    steps: Option<usize>,
    jump: Option<usize>,
    resample: Option<usize>,
    dims: Option<[usize; 3]>,
    voxel: Option<f64>,
    k: Option<usize>,
    segments: Option<usize>,
    weights: Option<PathBuf>,
    latent_shape: Option<[usize; 3]>,
    mean: Option<f64>,
    variance: Option<f64>,
    timeout_ms: Option<u64>,
    synth: Option<SynthConfig>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = Result<T, CliError>;

struct Output {
    json: String,
    table: Vec<(String, String)>,
}

impl Output {
    fn new(value: Value, table: Vec<(String, String)>) -> Self {
        Self {
            json: serde_json::to_string_pretty(&value).expect("JSON values serialize"),
            table,
        }
    }
}

fn row(k: impl Into<String>, v: impl ToString) -> (String, String) {
    (k.into(), v.to_string())
}

// ---------------------------------------------------------------------------
// Argument parsers

fn parse_list<const N: usize, T: std::str::FromStr>(s: &str) -> Result<[T; N], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated values, got {}", parts.len()));
    }
    let values = parts
        .iter()
        .map(|p| p.parse::<T>().map_err(|_| format!("cannot parse {p:?}")))
        .collect::<Result<Vec<T>, String>>()?;
    values.try_into().map_err(|_| "wrong length".to_string())
}

fn parse_dims3(s: &str) -> Result<[usize; 3], String> {
    parse_list(s)
}

fn parse_dims2(s: &str) -> Result<[usize; 2], String> {
    parse_list(s)
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    parse_list(s)
}

fn parse_vec4(s: &str) -> Result<[f64; 4], String> {
    parse_list(s)
}

fn parse_mask(s: &str) -> Result<MaskSpec, String> {
    let (kind, arg) = s.split_once(':').ok_or("expected kind:argument")?;
    Ok(match (kind, arg) {
        ("half", "left") => MaskSpec::Half(Side::Left),
        ("half", "right") => MaskSpec::Half(Side::Right),
        ("half", "top") => MaskSpec::Half(Side::Top),
        ("half", "bottom") => MaskSpec::Half(Side::Bottom),
        ("channels", "ground") => MaskSpec::Channels(ChannelGroup::Ground),
        ("channels", "object") => MaskSpec::Channels(ChannelGroup::Object),
        ("rect", r) => {
            let [r0, r1, c0, c1] = parse_list::<4, usize>(r)?;
            MaskSpec::Rect {
                rows: [r0, r1],
                cols: [c0, c1],
            }
        }
        _ => return Err(format!("unknown mask {s:?}")),
    })
}

// ---------------------------------------------------------------------------
// Helpers

fn require_seed(flag: Option<u64>, cfg: &FileConfig) -> CliResult<u64> {
    flag.or(cfg.seed)
        .ok_or_else(|| CliError::Usage("this command is stochastic and needs --seed".into()))
}

/// A layout file, or every `.json` file of a directory in name order.
fn layout_paths(path: &Path) -> CliResult<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if p.extension().is_some_and(|e| e == "json") {
            paths.push(p);
        }
    }
    paths.sort();
    Ok(paths)
}

fn load_layouts(path: &Path) -> CliResult<Vec<SceneLayout>> {
    Ok(layout_paths(path)?
        .iter()
        .map(load_layout)
        .collect::<Result<Vec<_>, _>>()?)
}

fn voxel_spec(dims: Option<[usize; 3]>, voxel: Option<f64>, cfg: &FileConfig) -> CliResult<VoxelSpec> {
    let mut spec = VoxelSpec::default();
    if let Some(d) = dims.or(cfg.dims) {
        spec.dims = d;
    }
    if let Some(v) = voxel.or(cfg.voxel) {
        spec.voxel = v;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(spec)
}

fn label_counts(labels: &[u8]) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::new();
    for l in 1..=NUM_CLASSES {
        let n = labels.iter().filter(|v| **v == l).count();
        if n > 0 {
            counts.insert(label_name(l), n);
        }
    }
    counts
}

fn base_schedule(steps: Option<usize>, cfg: &FileConfig) -> CliResult<(NoiseSchedule, NoiseSchedule)> {
    let base = NoiseSchedule::default_linear();
    let steps = steps.or(cfg.steps).unwrap_or(250);
    let sched = base.respaced(steps).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((base, sched))
}

fn denoiser(
    args: &DiffusionArgs,
    shape: (usize, usize, usize),
    base: &NoiseSchedule,
    cfg: &FileConfig,
) -> CliResult<Box<dyn Denoiser>> {
    if let Some(endpoint) = &args.endpoint {
        let ms = args.timeout_ms.or(cfg.timeout_ms).unwrap_or(30_000);
        return Ok(Box::new(ExternalDenoiser::new(
            endpoint.clone(),
            Duration::from_millis(ms),
        )));
    }
    let mean = args.mean.or(cfg.mean).unwrap_or(0.0);
    let variance = args.variance.or(cfg.variance).unwrap_or(1.0);
    let mu = LatentGrid::filled(shape.0, shape.1, shape.2, mean);
    Ok(Box::new(GaussianDenoiser::new(mu, variance, base.clone())?))
}

fn repaint_params(args: &ResampleArgs, cfg: &FileConfig) -> RepaintParams {
    let d = RepaintParams::default();
    RepaintParams {
        jump: args.jump.or(cfg.jump).unwrap_or(d.jump),
        resample: args.resample.or(cfg.resample).unwrap_or(d.resample),
    }
}

fn latent_summary(z: &LatentGrid) -> Value {
    let n = z.data.len().max(1) as f64;
    let mean = z.data.iter().sum::<f64>() / n;
    let var = z.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    json!({ "shape": [z.h, z.w, z.c], "mean": mean, "variance": var })
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_synth(a: &SynthArgs, cfg: &FileConfig) -> CliResult<Output> {
    let seed = require_seed(a.seed, cfg)?;
    let mut config = cfg.synth.clone().unwrap_or_default();
    if a.full {
        config.counts = SynthConfig::full().counts;
    }
    let mut files = Vec::new();
    let mut counts = Vec::new();
    match a.scenes {
        None => {
            let layout = synth_scene(seed, &config)?;
            save_layout(&layout, &a.out)?;
            files.push(a.out.clone());
            counts.push(layout.real_primitives().count());
        }
        Some(n) => {
            std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            for i in 0..n {
                let mut c = config.clone();
                c.pose_id = config.pose_id + i as u64;
                let layout = synth_scene(seed.wrapping_add(i as u64), &c)?;
                let path = a.out.join(format!("scene_{i:04}.json"));
                save_layout(&layout, &path)?;
                files.push(path);
                counts.push(layout.real_primitives().count());
            }
        }
    }
    let total: usize = counts.iter().sum();
    Ok(Output::new(
        json!({ "files": files, "primitives": counts }),
        vec![row("scenes", files.len()), row("primitives", total)],
    ))
}

fn cmd_rasterize(a: &InOut) -> CliResult<Output> {
    let layout = load_layout(&a.layout)?;
    let raster = rasterize_ground(&layout)?;
    save_raster(&raster, &a.out)?;
    let occupied: BTreeMap<String, usize> = GroundClass::ALL
        .iter()
        .map(|c| (format!("{c:?}").to_lowercase(), raster.occupied_count(*c)))
        .collect();
    let table = occupied.iter().map(|(k, v)| row(k.clone(), v)).collect();
    Ok(Output::new(json!({ "occupied": occupied }), table))
}

fn cmd_voxelize(a: &VoxelizeArgs, cfg: &FileConfig) -> CliResult<Output> {
    let spec = voxel_spec(a.dims, a.voxel, cfg)?;
    let layout = load_layout(&a.layout)?;
    let grid = voxelize(&layout, spec)?;
    save_voxels(&grid, &a.out)?;
    let counts = label_counts(&grid.labels);
    let mut table = vec![row("occupied", grid.occupied())];
    table.extend(counts.iter().map(|(k, v)| row(*k, v)));
    Ok(Output::new(
        json!({ "dims": spec.dims, "voxel": spec.voxel, "occupied": grid.occupied(), "counts": counts }),
        table,
    ))
}

fn cmd_export_mesh(a: &MeshArgs, cfg: &FileConfig) -> CliResult<Output> {
    let format = MeshFormat::from_extension(&a.out)
        .ok_or_else(|| CliError::Usage(format!("{} needs an .obj or .ply extension", a.out.display())))?;
    let segments = a.segments.or(cfg.segments).unwrap_or(16);
    if segments < 3 {
        return Err(CliError::Usage("at least 3 segments".into()));
    }
    let layout = load_layout(&a.layout)?;
    let mesh = scene_mesh(&layout, segments)?;
    export_mesh(&mesh, &a.out, format)?;
    Ok(Output::new(
        json!({ "vertices": mesh.vertices.len(), "triangles": mesh.triangles.len() }),
        vec![
            row("vertices", mesh.vertices.len()),
            row("triangles", mesh.triangles.len()),
        ],
    ))
}

fn cmd_render_bev(a: &InOut) -> CliResult<Output> {
    let layout = load_layout(&a.layout)?;
    let map = render_semantic_map(&layout)?;
    std::fs::write(&a.out, map.to_pgm()).map_err(|e| Error::io(&a.out, e))?;
    let counts = label_counts(&map.labels);
    let table = counts.iter().map(|(k, v)| row(*k, v)).collect();
    Ok(Output::new(
        json!({ "size": [map.spec.nx, map.spec.ny], "counts": counts }),
        table,
    ))
}

fn cmd_eval_recon(a: &EvalReconArgs, cfg: &FileConfig) -> CliResult<Output> {
    let spec = voxel_spec(a.dims, a.voxel, cfg)?;
    let table = match a.weights.as_ref().or(cfg.weights.as_ref()) {
        Some(p) => LossWeightTable::load(p)?,
        None => LossWeightTable::default(),
    };
    let truth = load_layouts(&a.truth)?;
    let pred = load_layouts(&a.pred)?;
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(CliError::Usage(format!(
            "need equally many truth and predicted layouts (got {} and {})",
            truth.len(),
            pred.len()
        )));
    }
    let classes = match a.miou_classes {
        ClassSet::Truth => MiouClasses::PresentInTruth,
        ClassSet::Either => MiouClasses::PresentInEither,
    };
    let (mut iou, mut miou, mut obj, mut ground) = (0.0, 0.0, 0.0, 0.0);
    for (g, p) in truth.iter().zip(&pred) {
        let r = voxel::iou(&voxelize(g, spec)?, &voxelize(p, spec)?, classes)?;
        iou += r.iou;
        miou += r.miou;
        obj += object_loss(&g.padded([0.0; 3]), &p.padded([0.0; 3]), &table)?.total;
        ground += ground_loss_rasters(&rasterize_ground(g)?, &rasterize_ground(p)?, &table)?;
    }
    let n = truth.len() as f64;
    let ap = crate::detection::ap3d_mean(&truth, &pred)?;
    let value = json!({
        "scenes": truth.len(),
        "iou": iou / n,
        "miou": miou / n,
        "ap": ap.mean,
        "ap25": ap.ap25,
        "ap50": ap.ap50,
        "ap_per_threshold": ap.per_threshold,
        "object_loss": obj / n,
        "ground_loss": ground / n,
    });
    let rows = vec![
        row("scenes", truth.len()),
        row("IoU", format!("{:.2}", iou / n)),
        row("mIoU", format!("{:.2}", miou / n)),
        row("AP3D", format!("{:.2}", ap.mean)),
        row("AP@0.25", format!("{:.2}", ap.ap25)),
        row("AP@0.50", format!("{:.2}", ap.ap50)),
        row("object loss", format!("{:.6}", obj / n)),
        row("ground loss", format!("{:.6}", ground / n)),
    ];
    Ok(Output::new(value, rows))
}

fn cmd_eval_gen(a: &EvalGenArgs, cfg: &FileConfig) -> CliResult<Output> {
    let real = a.real.as_ref().map(load_features).transpose()?;
    let generated = a.generated.as_ref().map(load_features).transpose()?;
    let mut value = serde_json::Map::new();
    let mut rows = Vec::new();
    if let (Some(r), Some(g)) = (&real, &generated) {
        let k = a.k.or(cfg.k).unwrap_or(3);
        let pr = precision_recall(r, g, k)?;
        value.insert("k".into(), json!(k));
        value.insert("precision".into(), json!(pr.precision));
        value.insert("recall".into(), json!(pr.recall));
        rows.push(row("precision", format!("{:.4}", pr.precision)));
        rows.push(row("recall", format!("{:.4}", pr.recall)));
    }
    let moments = |file: &Option<PathBuf>, feats: &Option<FeatureSet>| -> CliResult<Option<Moments>> {
        match (file, feats) {
            (Some(p), _) => Ok(Some(load_moments(p)?)),
            (None, Some(f)) => Ok(Some(Moments::from_features(f)?)),
            (None, None) => Ok(None),
        }
    };
    if let (Some(mr), Some(mg)) = (
        moments(&a.real_moments, &real)?,
        moments(&a.generated_moments, &generated)?,
    ) {
        let fd = frechet_distance(&mr, &mg)?;
        value.insert("frechet".into(), json!(fd));
        rows.push(row("Fréchet", format!("{fd:.6}")));
    }
    if value.is_empty() {
        return Err(CliError::Usage(
            "give --real and --generated features, or moments for both sides".into(),
        ));
    }
    Ok(Output::new(Value::Object(value), rows))
}

fn cmd_edit(a: &EditArgs) -> CliResult<Output> {
    let edit = match (a.translate, a.rotate, a.scale) {
        (Some(t), None, None) => Edit::Translate(t),
        (None, Some([x, y, z, angle]), None) => Edit::Rotate { axis: [x, y, z], angle },
        (None, None, Some(s)) => Edit::Scale(s),
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --translate, --rotate, --scale".into(),
            ))
        }
    };
    let layout = load_layout(&a.layout)?;
    let edited = apply_edit(&layout, a.id, edit)?;
    save_layout(&edited, &a.out)?;
    let p = edited.find(a.id).expect("edited instance exists");
    Ok(Output::new(
        json!({ "instance": a.id, "center": p.center, "cholesky": p.cholesky.0 }),
        vec![row("instance", a.id), row("center", format!("{:?}", p.center))],
    ))
}

const DEFAULT_LATENT: [usize; 3] = [32, 32, 64];

fn cmd_sample(a: &SampleArgs, cfg: &FileConfig) -> CliResult<Output> {
    let seed = require_seed(a.diffusion.seed, cfg)?;
    let [h, w, c] = a.shape.or(cfg.latent_shape).unwrap_or(DEFAULT_LATENT);
    let (base, sched) = base_schedule(a.diffusion.steps, cfg)?;
    let model = denoiser(&a.diffusion, (h, w, c), &base, cfg)?;
    let label = a.diffusion.label.map(DensityLabel::from);
    let z = diffusion::sample(model.as_ref(), (h, w, c), label, &sched, seed)?;
    save_latent(&z, &a.out)?;
    let summary = latent_summary(&z);
    Ok(Output::new(
        summary.clone(),
        vec![row("mean", &summary["mean"]), row("variance", &summary["variance"])],
    ))
}

fn cmd_inpaint(a: &InpaintArgs, cfg: &FileConfig) -> CliResult<Output> {
    let seed = require_seed(a.diffusion.seed, cfg)?;
    let known = load_latent(&a.latent)?;
    let mask = build_mask(a.mask, known.h, known.w, known.c, known.split)?;
    let (base, sched) = base_schedule(a.diffusion.steps, cfg)?;
    let model = denoiser(&a.diffusion, known.shape(), &base, cfg)?;
    let label = a.diffusion.label.map(DensityLabel::from);
    let params = repaint_params(&a.resampling, cfg);
    let z = repaint(model.as_ref(), &known, &mask, label, &sched, params, seed)?;
    save_latent(&z, &a.out)?;
    let mut summary = latent_summary(&z);
    summary["unknown"] = json!(mask.unknown_count());
    Ok(Output::new(
        summary,
        vec![
            row("unknown entries", mask.unknown_count()),
            row("output", a.out.display()),
        ],
    ))
}

fn cmd_outpaint(a: &OutpaintArgs, cfg: &FileConfig) -> CliResult<Output> {
    let seed = require_seed(a.diffusion.seed, cfg)?;
    let start = load_latent(&a.latent)?;
    let (base, sched) = base_schedule(a.diffusion.steps, cfg)?;
    let model = denoiser(&a.diffusion, start.shape(), &base, cfg)?;
    let label = a.diffusion.label.map(DensityLabel::from);
    let params = repaint_params(&a.resampling, cfg);
    let blocks = match a.direction {
        Some(d) => {
            let d = match d {
                DirectionArg::Right => Direction::Right,
                DirectionArg::Left => Direction::Left,
                DirectionArg::Down => Direction::Down,
                DirectionArg::Up => Direction::Up,
            };
            outpaint_chain(model.as_ref(), &start, d, a.blocks, label, &sched, params, seed)?
        }
        None => outpaint_neighborhood(model.as_ref(), &start, label, &sched, params, seed)?,
    };
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut files = Vec::new();
    for b in &blocks {
        let path = a.out_dir.join(format!("block_{}_{}.latent", b.offset.0, b.offset.1));
        save_latent(&b.latent, &path)?;
        files.push(path);
    }
    let mut all = vec![OutpaintBlock {
        offset: (0, 0),
        latent: start,
    }];
    all.extend(blocks.iter().cloned());
    let (canvas, origin) = assemble(&all)?;
    let canvas_path = a.out_dir.join("canvas.latent");
    save_latent(&canvas, &canvas_path)?;
    Ok(Output::new(
        json!({
            "blocks": files,
            "offsets": blocks.iter().map(|b| [b.offset.0, b.offset.1]).collect::<Vec<_>>(),
            "canvas": canvas_path,
            "canvas_shape": [canvas.h, canvas.w, canvas.c],
            "canvas_origin": [origin.0, origin.1],
        }),
        vec![
            row("blocks", blocks.len()),
            row("canvas", format!("{}x{}", canvas.h, canvas.w)),
        ],
    ))
}

fn cmd_stats(a: &StatsArgs, cfg: &FileConfig) -> CliResult<Output> {
    let repr = match a.repr {
        ReprArg::Voxel => Representation::Voxel(a.dims.or(cfg.dims).unwrap_or(VoxelSpec::default().dims)),
        ReprArg::Primitives => {
            let Representation::Primitives { raster, primitives } = Representation::primscene_default() else {
                unreachable!("default is a primitive representation")
            };
            Representation::Primitives {
                raster: a.raster.unwrap_or(raster),
                primitives: a.primitives.unwrap_or(primitives),
            }
        }
    };
    let report = memory_footprint(repr);
    let mut rows = vec![row("representation", &report.name), row("bytes", report.bytes)];
    let mut parts = vec![
        format!("  \"name\": {}", serde_json::to_string(&report.name).expect("string")),
        format!("  \"bytes\": {}", report.bytes),
        format!("  \"mib\": {}", report.mib_2dp()),
    ];
    if let Representation::Primitives { raster, primitives } = repr {
        let r = memory_footprint(Representation::Primitives { raster, primitives: 0 });
        let p = memory_footprint(Representation::Primitives {
            raster: [0, 0],
            primitives,
        });
        parts.push(format!("  \"raster_mib\": {}", r.mib_2dp()));
        parts.push(format!("  \"primitives_mib\": {}", p.mib_2dp()));
        rows.push(row("raster MiB", r.mib_2dp()));
        rows.push(row("primitives MiB", p.mib_2dp()));
    }
    rows.push(row("MiB", report.mib_2dp()));
    // Hand-written so MiB keep their two decimals.
    Ok(Output {
        json: format!("{{\n{}\n}}", parts.join(",\n")),
        table: rows,
    })
}

fn cmd_featurize(a: &FeaturizeArgs) -> CliResult<Output> {
    let mut paths = Vec::new();
    for p in &a.layouts {
        paths.extend(layout_paths(p)?);
    }
    let mut layouts = paths.iter().map(load_layout).collect::<Result<Vec<_>, _>>()?;
    if let Some(track_path) = &a.track {
        let text = std::fs::read_to_string(track_path).map_err(|e| Error::io(track_path, e))?;
        let track: PoseTrack = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let keep = match (a.fps, a.min_distance) {
            (Some(n), _) => sample_refs_fps(&track, n)?,
            (None, Some(d)) => sample_refs_threshold(&track, d)?,
            (None, None) => track.poses.iter().map(|p| p.0).collect(),
        };
        layouts.retain(|l| keep.contains(&l.pose_id));
    }
    if layouts.is_empty() {
        return Err(CliError::Usage("no layouts selected".into()));
    }
    let rows = layouts
        .iter()
        .map(|l| Ok(featurize_map(&render_semantic_map(l)?)))
        .collect::<Result<Vec<_>, Error>>()?;
    let features = FeatureSet::from_rows(&rows)?;
    save_features(&features, &a.out)?;
    let mut value = json!({ "samples": features.n, "dim": features.d, "pose_ids": layouts.iter().map(|l| l.pose_id).collect::<Vec<_>>() });
    if let Some(m) = &a.moments {
        save_moments(&Moments::from_features(&features)?, m)?;
        value["moments"] = json!(m);
    }
    Ok(Output::new(
        value,
        vec![row("samples", features.n), row("dim", features.d)],
    ))
}

fn load_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Data(Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    })
}

fn execute(cli: &Cli) -> CliResult<Output> {
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &cfg),
        Command::Rasterize(a) => cmd_rasterize(a),
        Command::Voxelize(a) => cmd_voxelize(a, &cfg),
        Command::ExportMesh(a) => cmd_export_mesh(a, &cfg),
        Command::RenderBev(a) => cmd_render_bev(a),
        Command::EvalRecon(a) => cmd_eval_recon(a, &cfg),
        Command::EvalGen(a) => cmd_eval_gen(a, &cfg),
        Command::Edit(a) => cmd_edit(a),
        Command::Sample(a) => cmd_sample(a, &cfg),
        Command::Inpaint(a) => cmd_inpaint(a, &cfg),
        Command::Outpaint(a) => cmd_outpaint(a, &cfg),
        Command::Stats(a) => cmd_stats(a, &cfg),
        Command::Featurize(a) => cmd_featurize(a),
    }
}

/// Runs the command line `args` (including the program name) and returns
/// the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    match execute(&cli) {
        Ok(out) => {
            println!("{}", out.json);
            let width = out.table.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
            for (k, v) in &out.table {
                eprintln!("{k:<width$}  {v}");
            }
            EXIT_OK
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}
