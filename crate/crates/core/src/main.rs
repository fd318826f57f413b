use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use sdfrecon::dataset::Dataset;
use sdfrecon::error::{Error, Result};
use sdfrecon::geometry::CameraModel;
use sdfrecon::image::RgbImage;
use sdfrecon::io;
use sdfrecon::meshing_eval::{eval_metrics, sample_mesh_surface, MetricsReport};
use sdfrecon::pipeline::{ablation_table, evaluate_mesh, extract_mesh, run_ablation, synthetic_room, EvalSettings, SynthSetup};
use sdfrecon::plane_seg::{felzenszwalb_segment, filter_large_planes, PlaneMask, SegmentParams};
use sdfrecon::rendering::{render_view, RenderSettings};
use sdfrecon::sparse_depth::{correspondences_for_views, triangulate_matches};
use sdfrecon::training::{Ablation, Preset, Supervision, TrainConfig, TrainObserver, TrainState};

#[derive(Parser)]
#[command(name = "sdfrecon", version, about = "Neural SDF reconstruction of indoor scenes from posed images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic room into a dataset directory.
    Synth(SynthArgs),
    /// Detect corners and match them between nearby views.
    Match(MatchArgs),
    /// Triangulate matches into per-view sparse depth.
    Triangulate(TriangulateArgs),
    /// Segment every image and keep large planar regions.
    Segment(SegmentArgs),
    /// Train the fields into a run directory.
    Train(TrainArgs),
    /// Extract a mesh from a run's latest checkpoint.
    Mesh(MeshArgs),
    /// Score a mesh against a reference point cloud.
    Eval(EvalArgs),
    /// Render colour, depth and normals from a checkpoint.
    Render(RenderArgs),
    /// Train and score baseline, geo, plane and full configurations.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Surface points projected into nearby views as matches (0 disables).
    #[arg(long, default_value_t = 600)]
    match_points: usize,
    #[arg(long, default_value_t = 0.5)]
    pixel_noise: f64,
    #[arg(long, default_value_t = 20_000)]
    gt_points: usize,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    data: PathBuf,
    /// Defaults to `<data>/matches.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Views are matched with the next `window` views.
    #[arg(long, default_value_t = 2)]
    window: usize,
    #[arg(long, default_value_t = 200)]
    max_points: usize,
    #[arg(long, default_value_t = 3)]
    nms_radius: usize,
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
}

#[derive(Args)]
struct TriangulateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Defaults to `<data>/matches.txt`.
    #[arg(long)]
    matches: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Largest accepted ray gap as a fraction of the scene diagonal.
    #[arg(long, default_value_t = 0.005)]
    max_gap_fraction: f64,
    #[arg(long, default_value_t = 1.5)]
    half_extent: f64,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    sigma: f64,
    #[arg(long, default_value_t = 500.0)]
    k: f64,
    #[arg(long, default_value_t = 20)]
    min_size: usize,
    #[arg(long, default_value_t = 0.01)]
    min_fraction: f64,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Flat `key = value` file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match self.preset.parse::<Preset>()? {
            Preset::Desk => TrainConfig::desk(),
            Preset::Full => TrainConfig::full(),
        };
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::parse_over(base, &io::read_text(p)?).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                other => other,
            })?,
            None => base,
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(n) = self.iterations {
            cfg.iterations = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SupervisionArgs {
    /// Precomputed sparse depth directory (`sparse_<i>.txt`); otherwise the
    /// dataset's matches are triangulated.
    #[arg(long)]
    sparse: Option<PathBuf>,
    /// Precomputed plane masks (`mask_<i>.pgm`); otherwise images are segmented.
    #[arg(long)]
    masks: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    supervision: SupervisionArgs,
    /// Which loss terms to keep: baseline, geo, plane or full.
    #[arg(long, default_value = "full")]
    ablation: String,
    /// Continue from the run's latest checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    run: PathBuf,
    /// Defaults to the run's latest checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 96)]
    resolution: usize,
    /// Defaults to `<run>/mesh.obj`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory; its `mesh.obj` is scored and `metrics.csv` written there.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long)]
    gt: PathBuf,
    /// Dataset whose depth maps restrict scoring to observed surface.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset view indices to render.
    #[arg(long, value_delimiter = ',')]
    views: Vec<usize>,
    /// Extra poses (same format as poses.txt) rendered with view 0's intrinsics.
    #[arg(long)]
    poses: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    supervision: SupervisionArgs,
    #[arg(long, value_delimiter = ',', default_value = "baseline,geo,plane,full")]
    only: Vec<String>,
    #[arg(long, default_value_t = 96)]
    resolution: usize,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Domain(_) | Error::Data { .. } | Error::Io { .. } => 2,
        Error::Numerical(_) => 3,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SDFRECON_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SDFRECON_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Match(a) => match_cmd(a),
        Command::Triangulate(a) => triangulate(a),
        Command::Segment(a) => segment(a),
        Command::Train(a) => train(a),
        Command::Mesh(a) => mesh(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let setup = SynthSetup {
        match_points: a.match_points,
        pixel_noise: a.pixel_noise,
        gt_points: a.gt_points,
        seed: a.seed,
        ..SynthSetup::default()
    };
    let (ds, _) = synthetic_room(&setup)?;
    io::write_dataset(&a.out, &ds)?;
    info!(
        "wrote {} views, {} matches and {} reference points to {}",
        ds.num_views(),
        ds.matches.as_ref().map_or(0, Vec::len),
        ds.gt_points.as_ref().map_or(0, Vec::len),
        a.out.display()
    );
    Ok(())
}

fn match_cmd(a: MatchArgs) -> Result<()> {
    let ds = io::load_dataset(&a.data)?;
    let grays: Vec<_> = ds.images.iter().map(RgbImage::to_gray).collect();
    let m = correspondences_for_views(&grays, a.window, a.max_points, a.nms_radius, a.ratio);
    let out = a.out.unwrap_or_else(|| a.data.join("matches.txt"));
    io::write_text(&out, &io::matches_text(&m))?;
    info!("{} matches written to {}", m.len(), out.display());
    Ok(())
}

fn triangulate(a: TriangulateArgs) -> Result<()> {
    let ds = io::load_dataset(&a.data)?;
    let path = a.matches.unwrap_or_else(|| a.data.join("matches.txt"));
    let matches = io::parse_matches(&path, &io::read_text(&path)?)?;
    let diag = 2.0 * a.half_extent * 3f64.sqrt();
    let map = triangulate_matches(&matches, &ds.cameras, a.max_gap_fraction * diag)?;
    io::write_sparse_depth(&a.out, &map)?;
    let s = map.stats;
    info!(
        "accepted {}, rejected by gap {}, behind camera {}, parallel {}",
        s.accepted, s.gap_rejected, s.behind_camera, s.parallel
    );
    Ok(())
}

fn segment(a: SegmentArgs) -> Result<()> {
    let ds = io::load_dataset(&a.data)?;
    let params = SegmentParams {
        sigma: a.sigma,
        k: a.k,
        min_size: a.min_size,
    };
    for (i, img) in ds.images.iter().enumerate() {
        let labels = felzenszwalb_segment(img, &params)?;
        let mask = filter_large_planes(&labels, a.min_fraction)?;
        io::write_label_pgm(&a.out.join(format!("labels_{i}.pgm")), &labels)?;
        io::write_mask_pgm(&a.out.join(format!("mask_{i}.pgm")), &mask)?;
        io::write_text(&a.out.join(format!("segments_{i}.txt")), &io::segments_text(&labels, &mask))?;
        let kept = mask.mask.iter().filter(|&&m| m).count();
        info!("view {i}: {} segments, {kept} pixels on large planes", labels.num_segments());
    }
    Ok(())
}

fn load_supervision(ds: &Dataset, cfg: &TrainConfig, a: &SupervisionArgs) -> Result<Supervision> {
    let mut sup = Supervision::prepare(ds, cfg)?;
    if let Some(dir) = &a.sparse {
        sup.sparse = Some(io::read_sparse_depth(dir, ds.num_views())?);
    }
    if let Some(dir) = &a.masks {
        let masks = (0..ds.num_views())
            .map(|i| {
                let p = dir.join(format!("mask_{i}.pgm"));
                let (width, height, mask) = io::read_mask_pgm(&p)?;
                let cam = &ds.cameras[i];
                if (width, height) != (cam.width, cam.height) {
                    return Err(Error::data(&p, format!("mask is {width}x{height}, view is {}x{}", cam.width, cam.height)));
                }
                Ok(PlaneMask {
                    width,
                    height,
                    mask,
                    kept: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        sup.masks = Some(masks);
    }
    if let Some(s) = &sup.sparse {
        info!("{} sparse depth samples", s.total());
    } else {
        warn!("dataset has no matches; geometry loss is inactive");
    }
    Ok(sup)
}

fn train(a: TrainArgs) -> Result<()> {
    let ablation: Ablation = a.ablation.parse()?;
    let ds = io::load_dataset(&a.data)?;
    let config = ablation.apply(&a.config.resolve()?);
    let sup = load_supervision(&ds, &config, &a.supervision)?;
    let state = if a.resume {
        let ck = io::read_checkpoint(&io::latest_checkpoint(&a.out)?)?;
        TrainState::from_checkpoint(&config, &ck)?
    } else {
        TrainState::new(&config)?
    };
    let mut writer = io::RunWriter::create(&a.out, &config, a.resume)?;
    info!("training {} ({}) for {} iterations into {}", ablation.name(), config.preset, config.iterations, a.out.display());
    let outcome = sdfrecon::training::train_from(state, &ds, &sup, &config, &mut writer)?;
    info!("finished at step {}", outcome.state.step);
    Ok(())
}

fn mesh(a: MeshArgs) -> Result<()> {
    let (config, state) = io::load_run(&a.run, a.checkpoint.as_deref())?;
    let mesh = extract_mesh(&state.fields, config.scene_half_extent, a.resolution)?;
    let out = a.out.unwrap_or_else(|| a.run.join("mesh.obj"));
    io::write_text(&out, &io::obj_text(&mesh))?;
    info!("{} vertices, {} triangles written to {}", mesh.vertices.len(), mesh.triangles.len(), out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mesh_path = match (&a.mesh, &a.run) {
        (Some(m), _) => m.clone(),
        (None, Some(r)) => r.join("mesh.obj"),
        (None, None) => return Err(Error::Config("eval needs --mesh or --run".into())),
    };
    let mesh = io::read_obj(&mesh_path)?;
    let gt = io::read_xyz(&a.gt)?;
    let settings = EvalSettings {
        samples: a.samples,
        tau: a.tau,
        seed: a.seed,
        ..EvalSettings::default()
    };
    let report: MetricsReport = match &a.data {
        Some(d) => {
            let mut ds = io::load_dataset(d)?;
            ds.gt_points = Some(gt);
            evaluate_mesh(&mesh, &ds, &settings)?
        }
        None => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
            let pts = sample_mesh_surface(&mesh, a.samples, &mut rng)?;
            eval_metrics(&pts, &gt, a.tau)?
        }
    };
    let csv = format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_line());
    let out = a.out.or_else(|| a.run.as_ref().map(|r| r.join("metrics.csv")));
    if let Some(out) = out {
        io::write_text(&out, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let (config, state) = io::load_run(&a.run, a.checkpoint.as_deref())?;
    let ds = io::load_dataset(&a.data)?;
    let mut cams: Vec<(String, CameraModel)> = Vec::new();
    for &v in &a.views {
        let cam = ds
            .cameras
            .get(v)
            .ok_or_else(|| Error::Config(format!("view {v} out of range ({} views)", ds.num_views())))?;
        cams.push((format!("view_{v}"), cam.clone()));
    }
    if let Some(p) = &a.poses {
        let base = &ds.cameras[0];
        for (i, pose) in io::parse_poses(p, &io::read_text(p)?)?.into_iter().enumerate() {
            let cam = CameraModel::new(base.fx, base.fy, base.cx, base.cy, base.width, base.height, pose)?;
            cams.push((format!("pose_{i}"), cam));
        }
    }
    if cams.is_empty() {
        return Err(Error::Config("render needs --views or --poses".into()));
    }
    let settings = RenderSettings {
        n_samples: a.samples.unwrap_or(config.samples_per_ray),
        orientation: config.density_orientation,
        with_plane: true,
    };
    let bounds = config.bounds();
    for (name, cam) in &cams {
        let r = render_view(&state.fields, cam, &bounds, &settings, a.seed)?;
        let (w, h) = (r.width, r.height);
        io::write_ppm(&a.out.join(format!("{name}_color.ppm")), &RgbImage::from_data(w, h, r.color.clone())?)?;
        let depth: Vec<Option<f64>> = r.depth.iter().zip(&r.opacity).map(|(&d, &o)| (o > 0.5).then_some(d)).collect();
        io::write_depth_pgm(&a.out.join(format!("{name}_depth.pgm")), w, h, &depth)?;
        let normals = r.normal.iter().map(|n| [0.5 * n.x + 0.5, 0.5 * n.y + 0.5, 0.5 * n.z + 0.5]).collect();
        io::write_ppm(&a.out.join(format!("{name}_normal.ppm")), &RgbImage::from_data(w, h, normals)?)?;
        info!("rendered {name}");
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let which = a.only.iter().map(|s| s.parse()).collect::<Result<Vec<Ablation>>>()?;
    let ds = io::load_dataset(&a.data)?;
    let base = a.config.resolve()?;
    let sup = load_supervision(&ds, &base, &a.supervision)?;
    let eval = EvalSettings {
        resolution: a.resolution,
        tau: a.tau,
        ..EvalSettings::default()
    };
    let mut err = None;
    let runs = run_ablation(&ds, &sup, &base, &eval, &which, &mut |ab| {
        info!("training {}", ab.name());
        match io::RunWriter::create(&a.out.join(ab.name()), &ab.apply(&base), false) {
            Ok(w) => Box::new(w) as Box<dyn TrainObserver>,
            Err(e) => {
                err = Some(e);
                Box::new(sdfrecon::training::NoObserver)
            }
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    let mut csv = format!("config,{}\n", MetricsReport::CSV_HEADER);
    for r in &runs {
        csv += &format!("{},{}\n", r.ablation.name(), r.metrics.csv_line());
        let mesh = extract_mesh(&r.outcome.state.fields, base.scene_half_extent, a.resolution)?;
        io::write_text(&a.out.join(r.ablation.name()).join("mesh.obj"), &io::obj_text(&mesh))?;
    }
    let table = ablation_table(&runs);
    io::write_text(&a.out.join("ablation.csv"), &csv)?;
    io::write_text(&a.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}
