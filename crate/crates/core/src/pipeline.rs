//! End-to-end helpers: synthetic room datasets, mesh extraction from trained
//! fields, metric evaluation, the ablation grid, and post-training probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fields::SceneFields;
use crate::geometry::Vec3;
use crate::meshing_eval::{cull_to_observed, eval_metrics, marching_cubes, sample_mesh_surface, GridBounds, MetricsReport, TriangleMesh};
use crate::nn::Tape;
use crate::rendering::{render_rays, RenderSettings};
use crate::synth::{build_dataset, default_cameras, make_correspondences, GtView, SceneSpec};
use crate::training::{train, Ablation, LogRow, Supervision, TrainConfig, TrainObserver, TrainOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSetup {
    /// Surface points projected into view pairs to form matches.
    pub match_points: usize,
    pub pixel_noise: f64,
    pub max_view_gap: usize,
    pub gt_points: usize,
    pub seed: u64,
}

impl Default for SynthSetup {
    fn default() -> Self {
        Self {
            match_points: 600,
            pixel_noise: 0.5,
            max_view_gap: 2,
            gt_points: 20_000,
            seed: 7,
        }
    }
}

/// The default room seen by the default camera ring, with matches.
pub fn synthetic_room(setup: &SynthSetup) -> Result<(Dataset, Vec<GtView>)> {
    let scene = SceneSpec::default_room();
    let cams = default_cameras();
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let m = make_correspondences(&scene, &cams, setup.match_points, setup.pixel_noise, setup.max_view_gap, &mut rng);
    build_dataset(&scene, &cams, setup.gt_points, (setup.match_points > 0).then_some(&m), &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub resolution: usize,
    pub samples: usize,
    pub tau: f64,
    /// Points farther than this behind every reference depth are dropped.
    pub cull_margin: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            resolution: 96,
            samples: 20_000,
            tau: 0.05,
            cull_margin: 0.05,
            seed: 11,
        }
    }
}

pub fn extract_mesh(fields: &SceneFields, half_extent: f64, resolution: usize) -> Result<TriangleMesh> {
    marching_cubes(|p: &[Vec3]| fields.sdf_values(p), GridBounds::cube(half_extent)?, resolution)
}

/// Samples the mesh, culls to what the dataset's views observe (when depth is
/// available) and scores against the dataset's reference cloud.
pub fn evaluate_mesh(mesh: &TriangleMesh, dataset: &Dataset, eval: &EvalSettings) -> Result<MetricsReport> {
    let gt = dataset
        .gt_points
        .as_ref()
        .ok_or_else(|| Error::Domain("dataset has no reference point cloud".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(eval.seed);
    let mut pts = sample_mesh_surface(mesh, eval.samples, &mut rng)?;
    if let Some(d) = &dataset.depths {
        pts = cull_to_observed(&pts, &dataset.cameras, d, eval.cull_margin)?;
    }
    if pts.is_empty() {
        return Err(Error::Domain("no reconstructed surface is observed by any view".into()));
    }
    eval_metrics(&pts, gt, eval.tau)
}

pub fn evaluate_fields(fields: &SceneFields, config: &TrainConfig, dataset: &Dataset, eval: &EvalSettings) -> Result<(TriangleMesh, MetricsReport)> {
    let mesh = extract_mesh(fields, config.scene_half_extent, eval.resolution)?;
    let report = evaluate_mesh(&mesh, dataset, eval)?;
    Ok((mesh, report))
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub ablation: Ablation,
    pub outcome: TrainOutcome,
    pub metrics: MetricsReport,
}

/// Trains and scores each requested configuration of the ablation grid.
pub fn run_ablation(
    dataset: &Dataset,
    supervision: &Supervision,
    base: &TrainConfig,
    eval: &EvalSettings,
    which: &[Ablation],
    observer: &mut dyn FnMut(Ablation) -> Box<dyn TrainObserver>,
) -> Result<Vec<AblationRun>> {
    which
        .iter()
        .map(|&a| {
            let cfg = a.apply(base);
            let mut obs = observer(a);
            let outcome = train(dataset, supervision, &cfg, obs.as_mut())?;
            let (_, metrics) = evaluate_fields(&outcome.state.fields, &cfg, dataset, eval)?;
            Ok(AblationRun {
                ablation: a,
                outcome,
                metrics,
            })
        })
        .collect()
}

/// Text table of the grid, one row per configuration.
pub fn ablation_table(runs: &[AblationRun]) -> String {
    let mut s = format!("{:<10} {:>9} {:>9} {:>9} {:>9} {:>9}\n", "config", "Acc", "Comp", "Prec", "Recall", "F-score");
    for r in runs {
        let m = &r.metrics;
        s += &format!(
            "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
            r.ablation.name(),
            m.accuracy,
            m.completeness,
            m.precision,
            m.recall,
            m.f_score
        );
    }
    s
}

/// Reference surface points pushed off the surface by isotropic Gaussian noise.
pub fn near_surface_probes(dataset: &Dataset, n: usize, sigma: f64, seed: u64) -> Result<Vec<Vec3>> {
    let gt = dataset
        .gt_points
        .as_ref()
        .filter(|g| !g.is_empty())
        .ok_or_else(|| Error::Domain("dataset has no reference point cloud".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let p = gt[rng.random_range(0..gt.len())];
            let d: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            p + Vec3::from_array(d) * sigma
        })
        .collect())
}

/// Mean `|‖∇f‖ − 1|` over `points`.
pub fn mean_eikonal_deviation(fields: &SceneFields, points: &[Vec3]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Domain("no probe points".into()));
    }
    let g = fields.sdf_and_gradients(points)?;
    Ok(g.iter().map(|(_, g)| (g.norm() - 1.0).abs()).sum::<f64>() / g.len() as f64)
}

/// Angles (degrees) between rendered and reference normals at `n` random
/// pixels showing flat-albedo room faces (walls and ceiling).
pub fn flat_wall_normal_errors(
    fields: &SceneFields,
    config: &TrainConfig,
    dataset: &Dataset,
    views: &[GtView],
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let scene = SceneSpec::default_room();
    let room = scene.room();
    let room_idx = scene.primitives.iter().position(|p| p.hollow);
    let mut candidates = Vec::new();
    for (vi, v) in views.iter().enumerate() {
        for (pi, hit) in v.primitive.iter().enumerate() {
            if hit.is_some() && *hit == room_idx {
                if let Some(d) = v.depth[pi] {
                    let cam = &v.camera;
                    let ray = cam.pixel_center_ray(pi % cam.width, pi / cam.width);
                    let p = ray.at(d);
                    if room.is_flat_at(p) {
                        candidates.push((vi, pi));
                    }
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Domain("no flat wall pixels in the reference views".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(usize, usize)> = (0..n).map(|_| candidates[rng.random_range(0..candidates.len())]).collect();
    let bounds = config.bounds();
    let queries = picks
        .iter()
        .map(|&(vi, pi)| {
            let cam = &dataset.cameras[vi];
            bounds
                .query(cam.pixel_center_ray(pi % cam.width, pi / cam.width))
                .ok_or_else(|| Error::Domain("probe ray misses the scene bounds".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let settings = RenderSettings {
        n_samples: config.samples_per_ray,
        orientation: config.density_orientation,
        with_plane: false,
    };
    let mut out = Vec::with_capacity(n);
    for (chunk_q, chunk_p) in queries.chunks(64).zip(picks.chunks(64)) {
        let mut tape = Tape::new();
        let r = render_rays(fields, &mut tape, chunk_q, &settings, &mut rng)?;
        for (rv, &(vi, pi)) in r.iter().zip(chunk_p) {
            let nrm = rv.values(&tape).normal;
            let gt = views[vi].normal[pi].ok_or_else(|| Error::Domain("reference normal missing".into()))?;
            out.push(nrm.dot(gt).clamp(-1.0, 1.0).acos().to_degrees());
        }
    }
    Ok(out)
}

/// Observer that forwards log rows to a closure.
pub struct LogFn<F: FnMut(&LogRow)>(pub F);

impl<F: FnMut(&LogRow)> TrainObserver for LogFn<F> {
    fn on_log(&mut self, row: &LogRow) -> Result<()> {
        (self.0)(row);
        Ok(())
    }
}
