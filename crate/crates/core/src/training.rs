//! Loss assembly, ray batch sampling and the optimisation loop.
//!
//! Every loss is a sum over its own rays or points. A step renders the batch
//! in fixed-size ray chunks, each on its own tape, then evaluates the Eikonal
//! term; chunk gradients are reduced in chunk order so a run is bit-for-bit
//! repeatable at any thread count.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fields::{FieldsConfig, SceneFields};
use crate::geometry::Vec3;
use crate::nn::{adam_step, AdamState, Tape, Var};
use crate::plane_seg::{felzenszwalb_segment, filter_large_planes, joint_loss, plane_loss, PlaneMask, ProbabilityTerm, SegmentParams};
use crate::rendering::{render_rays_at, sample_ray, DensityOrientation, RayQuery, RenderSettings, SceneBounds};
use crate::sparse_depth::{geometry_loss, triangulate_matches, SparseDepthMap};

/// Direction the plane constraint treats as "up".
pub const FLOOR_NORMAL: Vec3 = Vec3::Z;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

impl Preset {
    pub fn fields(self) -> FieldsConfig {
        match self {
            Preset::Desk => FieldsConfig::desk(),
            Preset::Full => FieldsConfig::full(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::Config(format!("unknown preset '{s}' (expected desk or full)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub lambda_c: f64,
    pub lambda_geo_start: f64,
    pub lambda_geo_end: f64,
    pub lambda_j: f64,
    pub lambda_eik: f64,
    pub iterations: usize,
    pub batch_rays: usize,
    pub samples_per_ray: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub matched_fraction_start: f64,
    pub matched_fraction_end: f64,
    /// Share of the run over which λ_geo and the matched fraction decay.
    pub schedule_fraction: f64,
    pub eikonal_uniform: usize,
    /// Perturbed ray samples per step, drawn from the batch's rendering weights.
    pub eikonal_near: usize,
    /// Perturbation scale as a fraction of the bounding-box diagonal.
    pub eikonal_noise: f64,
    pub near: f64,
    pub scene_half_extent: f64,
    pub init_beta: f64,
    pub checkpoint_interval: usize,
    pub chunk_rays: usize,
    pub deterministic: bool,
    pub density_orientation: DensityOrientation,
    pub probability_term: ProbabilityTerm,
    /// Triangulation gap threshold as a fraction of the bounding-box diagonal.
    pub max_gap_fraction: f64,
    pub segment_sigma: f64,
    pub segment_k: f64,
    pub segment_min_size: usize,
    pub plane_min_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            lambda_c: 1.0,
            lambda_geo_start: 1.0,
            lambda_geo_end: 0.05,
            lambda_j: 0.05,
            lambda_eik: 0.1,
            iterations: 5000,
            batch_rays: 512,
            samples_per_ray: 64,
            learning_rate: 5e-4,
            seed: 0,
            matched_fraction_start: 0.5,
            matched_fraction_end: 0.1,
            schedule_fraction: 0.5,
            eikonal_uniform: 512,
            eikonal_near: 512,
            eikonal_noise: 0.01,
            near: 0.05,
            scene_half_extent: 1.5,
            init_beta: 0.1,
            checkpoint_interval: 1000,
            chunk_rays: 64,
            deterministic: true,
            density_orientation: DensityOrientation::Corrected,
            probability_term: ProbabilityTerm::PositiveOnly,
            max_gap_fraction: 0.005,
            segment_sigma: 0.8,
            segment_k: 500.0,
            segment_min_size: 20,
            plane_min_fraction: 0.01,
        }
    }

    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            iterations: 50_000,
            batch_rays: 1024,
            eikonal_near: 1024,
            checkpoint_interval: 5000,
            ..Self::desk()
        }
    }

    pub fn fields_config(&self) -> FieldsConfig {
        FieldsConfig {
            init_beta: self.init_beta,
            ..self.preset.fields()
        }
    }

    pub fn bounds(&self) -> SceneBounds {
        SceneBounds::cube(self.scene_half_extent, self.near)
    }

    pub fn diagonal(&self) -> f64 {
        2.0 * self.scene_half_extent * 3f64.sqrt()
    }

    pub fn segment_params(&self) -> SegmentParams {
        SegmentParams {
            sigma: self.segment_sigma,
            k: self.segment_k,
            min_size: self.segment_min_size,
        }
    }

    fn decay(&self, iteration: usize, start: f64, end: f64) -> f64 {
        let window = self.schedule_fraction * self.iterations.saturating_sub(1) as f64;
        let f = if window > 0.0 { (iteration as f64 / window).min(1.0) } else { 1.0 };
        start * (1.0 - f) + end * f
    }

    /// λ_geo at `iteration`: linear from start to end over the schedule window, then flat.
    pub fn lambda_geo(&self, iteration: usize) -> f64 {
        self.decay(iteration, self.lambda_geo_start, self.lambda_geo_end)
    }

    pub fn matched_fraction(&self, iteration: usize) -> f64 {
        self.decay(iteration, self.matched_fraction_start, self.matched_fraction_end)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_geo_start", self.lambda_geo_start),
            ("lambda_geo_end", self.lambda_geo_end),
            ("lambda_j", self.lambda_j),
            ("lambda_eik", self.lambda_eik),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                bad.push(format!("{name} must be a finite value >= 0 (got {v})"));
            }
        }
        for (name, v) in [("iterations", self.iterations), ("batch_rays", self.batch_rays), ("samples_per_ray", self.samples_per_ray), ("chunk_rays", self.chunk_rays)] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("matched_fraction_start", self.matched_fraction_start),
            ("matched_fraction_end", self.matched_fraction_end),
            ("schedule_fraction", self.schedule_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bad.push(format!("{name} must lie in [0, 1] (got {v})"));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("scene_half_extent", self.scene_half_extent),
            ("init_beta", self.init_beta),
            ("max_gap_fraction", self.max_gap_fraction),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                bad.push(format!("{name} must be positive (got {v})"));
            }
        }
        if !(self.near >= 0.0) || !(self.eikonal_noise >= 0.0) {
            bad.push("near and eikonal_noise must be >= 0".into());
        }
        if !(self.plane_min_fraction > 0.0 && self.plane_min_fraction < 1.0) {
            bad.push(format!("plane_min_fraction must lie in (0, 1) (got {})", self.plane_min_fraction));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("preset", self.preset.to_string()),
            ("lambda_c", self.lambda_c.to_string()),
            ("lambda_geo_start", self.lambda_geo_start.to_string()),
            ("lambda_geo_end", self.lambda_geo_end.to_string()),
            ("lambda_j", self.lambda_j.to_string()),
            ("lambda_eik", self.lambda_eik.to_string()),
            ("iterations", self.iterations.to_string()),
            ("batch_rays", self.batch_rays.to_string()),
            ("samples_per_ray", self.samples_per_ray.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("seed", self.seed.to_string()),
            ("matched_fraction_start", self.matched_fraction_start.to_string()),
            ("matched_fraction_end", self.matched_fraction_end.to_string()),
            ("schedule_fraction", self.schedule_fraction.to_string()),
            ("eikonal_uniform", self.eikonal_uniform.to_string()),
            ("eikonal_near", self.eikonal_near.to_string()),
            ("eikonal_noise", self.eikonal_noise.to_string()),
            ("near", self.near.to_string()),
            ("scene_half_extent", self.scene_half_extent.to_string()),
            ("init_beta", self.init_beta.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("chunk_rays", self.chunk_rays.to_string()),
            ("deterministic", self.deterministic.to_string()),
            (
                "density_orientation",
                match self.density_orientation {
                    DensityOrientation::Corrected => "corrected",
                    DensityOrientation::AsPrinted => "as_printed",
                }
                .into(),
            ),
            (
                "probability_term",
                match self.probability_term {
                    ProbabilityTerm::PositiveOnly => "positive",
                    ProbabilityTerm::FullCrossEntropy => "full",
                }
                .into(),
            ),
            ("max_gap_fraction", self.max_gap_fraction.to_string()),
            ("segment_sigma", self.segment_sigma.to_string()),
            ("segment_k", self.segment_k.to_string()),
            ("segment_min_size", self.segment_min_size.to_string()),
            ("plane_min_fraction", self.plane_min_fraction.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for key '{key}'")))
        }
        match key {
            "preset" => self.preset = value.parse()?,
            "lambda_c" => self.lambda_c = num(key, value)?,
            "lambda_geo_start" => self.lambda_geo_start = num(key, value)?,
            "lambda_geo_end" => self.lambda_geo_end = num(key, value)?,
            "lambda_j" => self.lambda_j = num(key, value)?,
            "lambda_eik" => self.lambda_eik = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "batch_rays" => self.batch_rays = num(key, value)?,
            "samples_per_ray" => self.samples_per_ray = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "matched_fraction_start" => self.matched_fraction_start = num(key, value)?,
            "matched_fraction_end" => self.matched_fraction_end = num(key, value)?,
            "schedule_fraction" => self.schedule_fraction = num(key, value)?,
            "eikonal_uniform" => self.eikonal_uniform = num(key, value)?,
            "eikonal_near" => self.eikonal_near = num(key, value)?,
            "eikonal_noise" => self.eikonal_noise = num(key, value)?,
            "near" => self.near = num(key, value)?,
            "scene_half_extent" => self.scene_half_extent = num(key, value)?,
            "init_beta" => self.init_beta = num(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            "chunk_rays" => self.chunk_rays = num(key, value)?,
            "deterministic" => self.deterministic = num(key, value)?,
            "density_orientation" => {
                self.density_orientation = match value {
                    "corrected" => DensityOrientation::Corrected,
                    "as_printed" => DensityOrientation::AsPrinted,
                    _ => return Err(Error::Config(format!("bad value '{value}' for key '{key}'"))),
                }
            }
            "probability_term" => {
                self.probability_term = match value {
                    "positive" => ProbabilityTerm::PositiveOnly,
                    "full" => ProbabilityTerm::FullCrossEntropy,
                    _ => return Err(Error::Config(format!("bad value '{value}' for key '{key}'"))),
                }
            }
            "max_gap_fraction" => self.max_gap_fraction = num(key, value)?,
            "segment_sigma" => self.segment_sigma = num(key, value)?,
            "segment_k" => self.segment_k = num(key, value)?,
            "segment_min_size" => self.segment_min_size = num(key, value)?,
            "plane_min_fraction" => self.plane_min_fraction = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text over `base`. `#` starts a comment.
    /// A `preset` line, if any, resets the defaults before the other keys apply.
    pub fn parse_over(base: TrainConfig, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{}'", n + 1, raw.trim())))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = base;
        if let Some((_, _, v)) = pairs.iter().find(|(_, k, _)| k == "preset") {
            cfg = match v.parse::<Preset>()? {
                Preset::Desk => TrainConfig::desk(),
                Preset::Full => TrainConfig::full(),
            };
        }
        for (n, k, v) in &pairs {
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {n}: {m}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(TrainConfig::desk(), text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// The four loss configurations of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Colour and Eikonal terms only.
    Baseline,
    Geo,
    Plane,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::Geo, Ablation::Plane, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Geo => "geo",
            Ablation::Plane => "plane",
            Ablation::Full => "full",
        }
    }

    pub fn uses_geo(self) -> bool {
        matches!(self, Ablation::Geo | Ablation::Full)
    }

    pub fn uses_plane(self) -> bool {
        matches!(self, Ablation::Plane | Ablation::Full)
    }

    /// `base` with the disabled terms zeroed. Without the depth term no
    /// matched-pixel bias is applied either.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if !self.uses_geo() {
            c.lambda_geo_start = 0.0;
            c.lambda_geo_end = 0.0;
            c.matched_fraction_start = 0.0;
            c.matched_fraction_end = 0.0;
        }
        if !self.uses_plane() {
            c.lambda_j = 0.0;
        }
        c
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

/// Sparse depth and plane masks derived from a dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Supervision {
    pub sparse: Option<SparseDepthMap>,
    pub masks: Option<Vec<PlaneMask>>,
}

impl Supervision {
    /// Triangulates the dataset's matches (if any) and segments every image.
    pub fn prepare(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        let sparse = match &dataset.matches {
            Some(m) => Some(triangulate_matches(m, &dataset.cameras, config.max_gap_fraction * config.diagonal())?),
            None => None,
        };
        let params = config.segment_params();
        let masks = dataset
            .images
            .par_iter()
            .map(|img| filter_large_planes(&felzenszwalb_segment(img, &params)?, config.plane_min_fraction))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sparse,
            masks: Some(masks),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRay {
    pub view: usize,
    pub u: f64,
    pub v: f64,
    pub query: RayQuery,
    pub color: [f64; 3],
    pub d_app: Option<f64>,
    pub plane: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<BatchRay>,
    pub n_matched: usize,
}

fn make_ray(dataset: &Dataset, masks: Option<&[PlaneMask]>, bounds: &SceneBounds, view: usize, u: f64, v: f64, d_app: Option<f64>) -> Result<BatchRay> {
    let cam = &dataset.cameras[view];
    let ray = cam.pixel_to_ray(u, v)?;
    let query = bounds
        .query(ray)
        .ok_or_else(|| Error::Domain(format!("pixel ({u}, {v}) of view {view} misses the scene bounds")))?;
    let plane = masks.is_some_and(|m| {
        let m = &m[view];
        let (x, y) = ((u as usize).min(m.width - 1), (v as usize).min(m.height - 1));
        m.mask[y * m.width + x]
    });
    Ok(BatchRay {
        view,
        u,
        v,
        query,
        color: dataset.images[view].bilinear(u, v),
        d_app,
        plane,
    })
}

/// Draws a batch: a scheduled share from pixels with approximate depth, the
/// rest uniformly over all pixels of all views.
pub fn sample_batch(
    dataset: &Dataset,
    sparse: Option<&SparseDepthMap>,
    masks: Option<&[PlaneMask]>,
    config: &TrainConfig,
    iteration: usize,
    rng: &mut impl Rng,
) -> Result<RayBatch> {
    if dataset.num_views() == 0 {
        return Err(Error::Domain("cannot sample rays from an empty dataset".into()));
    }
    if let Some(m) = masks {
        if m.len() != dataset.num_views() {
            return Err(Error::Domain(format!("{} plane masks for {} views", m.len(), dataset.num_views())));
        }
    }
    let pool: Vec<(usize, usize)> = sparse
        .map(|s| {
            s.views
                .iter()
                .enumerate()
                .flat_map(|(v, list)| (0..list.len()).map(move |k| (v, k)))
                .collect()
        })
        .unwrap_or_default();
    let wanted = (config.matched_fraction(iteration) * config.batch_rays as f64).round() as usize;
    let n_matched = if pool.is_empty() {
        if wanted > 0 {
            log::warn!("no matched pixels available; sampling all rays uniformly");
        }
        0
    } else {
        wanted
    };
    let bounds = config.bounds();
    let mut rays = Vec::with_capacity(config.batch_rays);
    for _ in 0..n_matched {
        let (view, k) = pool[rng.random_range(0..pool.len())];
        let s = &sparse.unwrap().views[view][k];
        rays.push(make_ray(dataset, masks, &bounds, view, s.u, s.v, Some(s.d_app))?);
    }
    let per_view = dataset.pixels_per_view();
    for _ in n_matched..config.batch_rays {
        let view = rng.random_range(0..dataset.num_views());
        let p = rng.random_range(0..per_view);
        let w = dataset.cameras[view].width;
        let (x, y) = (p % w, p / w);
        rays.push(make_ray(dataset, masks, &bounds, view, x as f64 + 0.5, y as f64 + 0.5, None)?);
    }
    Ok(RayBatch { rays, n_matched })
}

/// `Σ_r ‖Ĉ(r) − C(r)‖₁`.
pub fn color_loss_value(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    pred.iter()
        .zip(gt)
        .map(|(p, g)| (0..3).map(|c| (p[c] - g[c]).abs()).sum::<f64>())
        .sum()
}

pub fn color_loss(tape: &mut Tape, pred: &[[Var; 3]], gt: &[[f64; 3]]) -> Result<Var> {
    if pred.len() != gt.len() {
        return Err(Error::Domain("predicted and reference colour lists differ in length".into()));
    }
    let mut terms = Vec::with_capacity(3 * pred.len());
    for (p, g) in pred.iter().zip(gt) {
        for c in 0..3 {
            let d = tape.add_const(p[c], -g[c]);
            terms.push(tape.abs(d));
        }
    }
    Ok(tape.sum(&terms))
}

/// `Σ (‖∇f‖ − 1)²` over gradients already on the tape.
pub fn eikonal_from_gradients(tape: &mut Tape, grads: &[[Var; 3]]) -> Var {
    let terms: Vec<Var> = grads
        .iter()
        .map(|g| {
            let n = tape.norm3(*g);
            let d = tape.add_const(n, -1.0);
            tape.square(d)
        })
        .collect();
    tape.sum(&terms)
}

/// Eikonal loss of `fields` at explicit points.
pub fn eikonal_loss_at(fields: &SceneFields, tape: &mut Tape, points: &[Vec3]) -> Result<Var> {
    let g: Vec<[Var; 3]> = fields.sdf_gradient(tape, points)?.into_iter().map(|(_, g)| g).collect();
    Ok(eikonal_from_gradients(tape, &g))
}

/// Uniform points in the bounds plus Gaussian-perturbed copies of `near_points`.
pub fn eikonal_points(config: &TrainConfig, near_points: &[Vec3], n_uniform: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let h = config.scene_half_extent;
    let sigma = config.eikonal_noise * config.diagonal();
    let mut pts: Vec<Vec3> = (0..n_uniform)
        .map(|_| Vec3::new(rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h)))
        .collect();
    for &p in near_points {
        let n: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        pts.push(p + Vec3::from_array(n) * sigma);
    }
    pts
}

/// Eikonal loss value on `n_uniform` box samples and `n_near` perturbed copies of `anchors`.
pub fn eikonal_loss(fields: &SceneFields, config: &TrainConfig, anchors: &[Vec3], n_uniform: usize, n_near: usize, rng: &mut impl Rng) -> Result<f64> {
    let near: Vec<Vec3> = if anchors.is_empty() {
        Vec::new()
    } else {
        (0..n_near).map(|_| anchors[rng.random_range(0..anchors.len())]).collect()
    };
    let pts = eikonal_points(config, &near, n_uniform, rng);
    Ok(fields
        .sdf_and_gradients(&pts)?
        .iter()
        .map(|(_, g)| (g.norm() - 1.0).powi(2))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_geo: f64,
    pub l_j: f64,
    pub l_eik: f64,
    pub total: f64,
    pub lambda_geo: f64,
    pub n_rays: usize,
    pub n_geo: usize,
    pub n_plane: usize,
    pub n_eik: usize,
}

impl LossBreakdown {
    /// Fills `total` from the components.
    pub fn assemble(mut self, config: &TrainConfig) -> Self {
        self.total = config.lambda_c * self.l_c + self.lambda_geo * self.l_geo + config.lambda_j * self.l_j + config.lambda_eik * self.l_eik;
        self
    }

    /// Names the first non-finite term.
    pub fn check_finite(&self, iteration: usize) -> Result<()> {
        for (name, v) in [("L_c", self.l_c), ("L_geo", self.l_geo), ("L_j", self.l_j), ("L_eik", self.l_eik), ("total", self.total)] {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("{name} became {v} at iteration {iteration}")));
            }
        }
        Ok(())
    }
}

/// Weighted total of the four component losses for `iteration`.
pub fn total_loss(l_c: f64, l_geo: f64, l_j: f64, l_eik: f64, config: &TrainConfig, iteration: usize) -> Result<LossBreakdown> {
    let b = LossBreakdown {
        l_c,
        l_geo,
        l_j,
        l_eik,
        lambda_geo: config.lambda_geo(iteration),
        ..Default::default()
    }
    .assemble(config);
    b.check_finite(iteration)?;
    Ok(b)
}

/// Everything random about one step, drawn up front so the loss is a plain
/// function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSamples {
    pub batch: RayBatch,
    pub ts: Vec<Vec<f64>>,
    pub eik_uniform: Vec<Vec3>,
    /// Per near-surface point: a uniform draw that picks the ray sample by weight, and the offset.
    pub eik_near: Vec<(usize, f64, Vec3)>,
}

pub fn draw_step_samples(
    dataset: &Dataset,
    supervision: &Supervision,
    config: &TrainConfig,
    iteration: usize,
    rng: &mut impl Rng,
) -> Result<StepSamples> {
    let batch = sample_batch(dataset, supervision.sparse.as_ref(), supervision.masks.as_deref(), config, iteration, rng)?;
    let ts = batch
        .rays
        .iter()
        .map(|r| sample_ray(r.query.near, r.query.far, config.samples_per_ray, rng))
        .collect::<Result<Vec<_>>>()?;
    let eik_uniform = eikonal_points(config, &[], config.eikonal_uniform, rng);
    let sigma = config.eikonal_noise * config.diagonal();
    let eik_near = (0..config.eikonal_near)
        .map(|_| {
            let ray = rng.random_range(0..batch.rays.len());
            let u: f64 = rng.random();
            let n: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            (ray, u, Vec3::from_array(n) * sigma)
        })
        .collect();
    Ok(StepSamples {
        batch,
        ts,
        eik_uniform,
        eik_near,
    })
}

struct ChunkResult {
    l_c: f64,
    l_geo: f64,
    l_j: f64,
    n_geo: usize,
    n_plane: usize,
    weights: Vec<Vec<f64>>,
    grad: Option<Vec<f64>>,
}

fn render_chunk(
    fields: &SceneFields,
    rays: &[BatchRay],
    ts: &[Vec<f64>],
    config: &TrainConfig,
    lambda_geo: f64,
    with_grad: bool,
) -> Result<ChunkResult> {
    let mut tape = Tape::new();
    let settings = RenderSettings {
        n_samples: config.samples_per_ray,
        orientation: config.density_orientation,
        with_plane: config.lambda_j > 0.0,
    };
    let queries: Vec<RayQuery> = rays.iter().map(|r| r.query).collect();
    let out = render_rays_at(fields, &mut tape, &queries, ts, &settings)?;
    let colors: Vec<[Var; 3]> = out.iter().map(|o| o.color).collect();
    let gt: Vec<[f64; 3]> = rays.iter().map(|r| r.color).collect();
    let l_c = color_loss(&mut tape, &colors, &gt)?;
    let mut terms = vec![tape.scale(l_c, config.lambda_c)];

    let (mut depths, mut d_app) = (Vec::new(), Vec::new());
    for (o, r) in out.iter().zip(rays) {
        if let Some(d) = r.d_app {
            depths.push(o.depth);
            d_app.push(d);
        }
    }
    let l_geo = if lambda_geo > 0.0 && !depths.is_empty() {
        let l = geometry_loss(&mut tape, &depths, &d_app)?;
        terms.push(tape.scale(l, lambda_geo));
        Some(l)
    } else {
        None
    };

    let mask: Vec<bool> = rays.iter().map(|r| r.plane).collect();
    let n_plane = mask.iter().filter(|&&m| m).count();
    let l_j = if config.lambda_j > 0.0 {
        let p_hat: Vec<Var> = out.iter().map(|o| o.plane_prob).collect();
        let l_pla: Vec<Var> = out.iter().map(|o| plane_loss(&mut tape, o.normal, FLOOR_NORMAL)).collect();
        let l = joint_loss(&mut tape, &p_hat, &l_pla, &mask, config.probability_term)?;
        terms.push(tape.scale(l, config.lambda_j));
        Some(l)
    } else {
        None
    };

    let loss = tape.sum(&terms);
    let grad = with_grad.then(|| tape.backward(loss, fields.params.values()));
    Ok(ChunkResult {
        l_c: tape.value(l_c),
        l_geo: l_geo.map_or(0.0, |l| tape.value(l)),
        l_j: l_j.map_or(0.0, |l| tape.value(l)),
        n_geo: if l_geo.is_some() { depths.len() } else { 0 },
        n_plane,
        weights: out.iter().map(|o| o.weights.iter().map(|&w| tape.value(w)).collect()).collect(),
        grad,
    })
}

/// Index of the sample whose cumulative normalised weight first exceeds `u`.
fn pick_by_weight(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return ((u * weights.len() as f64) as usize).min(weights.len() - 1);
    }
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w / total;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Losses (and optionally the gradient of the total) for one set of step samples.
pub fn evaluate_step(
    fields: &SceneFields,
    samples: &StepSamples,
    config: &TrainConfig,
    iteration: usize,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    let lambda_geo = config.lambda_geo(iteration);
    let rays = &samples.batch.rays;
    let chunk = config.chunk_rays.max(1);
    let starts: Vec<usize> = (0..rays.len()).step_by(chunk).collect();
    let run = |&s: &usize| {
        let e = (s + chunk).min(rays.len());
        render_chunk(fields, &rays[s..e], &samples.ts[s..e], config, lambda_geo, with_grad)
    };
    let chunks: Vec<ChunkResult> = if config.deterministic {
        starts.par_iter().map(run).collect::<Result<_>>()?
    } else {
        // Completion order decides the reduction order here.
        let (tx, rx) = std::sync::mpsc::channel();
        starts.par_iter().try_for_each_with(tx, |tx, s| run(s).map(|c| tx.send(c).unwrap()))?;
        let mut v: Vec<ChunkResult> = rx.into_iter().collect();
        v.reverse();
        v
    };

    let mut b = LossBreakdown {
        lambda_geo,
        n_rays: rays.len(),
        ..Default::default()
    };
    let mut grad = with_grad.then(|| vec![0.0; fields.params.len()]);
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(rays.len());
    for c in &chunks {
        b.l_c += c.l_c;
        b.l_geo += c.l_geo;
        b.l_j += c.l_j;
        b.n_geo += c.n_geo;
        b.n_plane += c.n_plane;
        if let (Some(acc), Some(g)) = (grad.as_mut(), c.grad.as_ref()) {
            add_into(acc, g);
        }
    }
    if !config.deterministic {
        // Chunk order was arbitrary; weights are only needed by position.
        for s in &starts {
            let e = (s + chunk).min(rays.len());
            weights.extend(render_chunk(fields, &rays[*s..e], &samples.ts[*s..e], config, lambda_geo, false)?.weights);
        }
    } else {
        for c in chunks {
            weights.extend(c.weights);
        }
    }

    if config.lambda_eik > 0.0 {
        let mut pts = samples.eik_uniform.clone();
        for &(r, u, off) in &samples.eik_near {
            let k = pick_by_weight(&weights[r], u);
            pts.push(rays[r].query.ray.at(samples.ts[r][k]) + off);
        }
        let eik_chunk = 1024;
        let parts: Vec<(f64, Option<Vec<f64>>)> = pts
            .par_chunks(eik_chunk)
            .map(|p| {
                let mut tape = Tape::new();
                let l = eikonal_loss_at(fields, &mut tape, p)?;
                let g = with_grad.then(|| {
                    let scaled = tape.scale(l, config.lambda_eik);
                    tape.backward(scaled, fields.params.values())
                });
                Ok((tape.value(l), g))
            })
            .collect::<Result<_>>()?;
        for (l, g) in parts {
            b.l_eik += l;
            if let (Some(acc), Some(g)) = (grad.as_mut(), g.as_ref()) {
                add_into(acc, g);
            }
        }
        b.n_eik = pts.len();
    }
    let b = b.assemble(config);
    b.check_finite(iteration)?;
    Ok((b, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub l_c: f64,
    pub l_geo: f64,
    pub l_j: f64,
    pub l_eik: f64,
    pub total: f64,
    pub beta: f64,
    pub lambda_geo: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iter,L_c,L_geo,L_j,L_eik,total,beta,lambda_geo";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, self.l_c, self.l_geo, self.l_j, self.l_eik, self.total, self.beta, self.lambda_geo
        )
    }
}

/// Snapshot of the optimiser state between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec_hash: String,
    /// Number of completed steps.
    pub step: usize,
    pub log_beta: f64,
    pub params: Vec<f64>,
    pub adam: AdamState,
}

/// Hex digest identifying the network layout, so checkpoints are never
/// loaded into a different architecture.
pub fn architecture_hash(config: &FieldsConfig, param_count: usize) -> String {
    let mut h = Sha256::new();
    h.update(format!("{config:?}/{param_count}").as_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub fields: SceneFields,
    pub adam: AdamState,
    pub step: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let fields = SceneFields::new(config.fields_config(), config.seed)?;
        let adam = AdamState::new(fields.params.len());
        Ok(Self { fields, adam, step: 0 })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec_hash: architecture_hash(&self.fields.config, self.fields.params.len()),
            step: self.step,
            log_beta: self.fields.params.values()[self.fields.log_beta_index()],
            params: self.fields.params.values().to_vec(),
            adam: self.adam.clone(),
        }
    }

    pub fn from_checkpoint(config: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let fc = config.fields_config();
        let fields = SceneFields::from_values(fc, ck.params.clone())?;
        let expect = architecture_hash(&fields.config, fields.params.len());
        if expect != ck.spec_hash {
            return Err(Error::Config(format!("checkpoint layout {} does not match config layout {expect}", ck.spec_hash)));
        }
        if ck.adam.m.len() != ck.params.len() || ck.adam.v.len() != ck.params.len() {
            return Err(Error::Config("checkpoint moments do not match parameter count".into()));
        }
        Ok(Self {
            fields,
            adam: ck.adam.clone(),
            step: ck.step,
        })
    }
}

/// Callbacks between steps.
pub trait TrainObserver {
    fn on_log(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _ck: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;
impl TrainObserver for NoObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

/// Per-iteration RNG, so a resumed run draws the same samples.
pub fn step_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

/// One optimisation step; parameters are untouched when it fails.
pub fn train_step(state: &mut TrainState, dataset: &Dataset, supervision: &Supervision, config: &TrainConfig) -> Result<LogRow> {
    let it = state.step;
    let mut rng = step_rng(config.seed, it);
    let samples = draw_step_samples(dataset, supervision, config, it, &mut rng)?;
    let (b, grad) = evaluate_step(&state.fields, &samples, config, it, true)?;
    let grad = grad.unwrap();
    let mut params = state.fields.params.values().to_vec();
    let mut adam = state.adam.clone();
    adam_step(&mut params, &grad, &mut adam, config.learning_rate)
        .map_err(|e| Error::Numerical(format!("iteration {it}: {e}")))?;
    let beta = params[state.fields.log_beta_index()].exp();
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Numerical(format!("beta left (0, inf) at iteration {it}: {beta}")));
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::Numerical(format!("parameter {i} became non-finite at iteration {it}")));
    }
    state.fields.params.values_mut().copy_from_slice(&params);
    state.adam = adam;
    state.step += 1;
    Ok(LogRow {
        iter: it,
        l_c: b.l_c,
        l_geo: b.l_geo,
        l_j: b.l_j,
        l_eik: b.l_eik,
        total: b.total,
        beta,
        lambda_geo: b.lambda_geo,
    })
}

/// Runs `state` up to `config.iterations` steps. On a numerical failure the
/// last good state is handed to the observer as a checkpoint before the error
/// is returned.
pub fn train_from(
    mut state: TrainState,
    dataset: &Dataset,
    supervision: &Supervision,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    let mut log = Vec::with_capacity(config.iterations.saturating_sub(state.step));
    while state.step < config.iterations {
        let row = match train_step(&mut state, dataset, supervision, config) {
            Ok(r) => r,
            Err(e @ Error::Numerical(_)) => {
                observer.on_checkpoint(&state.checkpoint())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        observer.on_log(&row)?;
        log.push(row);
        if config.checkpoint_interval > 0 && state.step.is_multiple_of(config.checkpoint_interval) && state.step < config.iterations {
            observer.on_checkpoint(&state.checkpoint())?;
        }
    }
    observer.on_checkpoint(&state.checkpoint())?;
    Ok(TrainOutcome { state, log })
}

pub fn train(dataset: &Dataset, supervision: &Supervision, config: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    config.validate()?;
    train_from(TrainState::new(config)?, dataset, supervision, config, observer)
}
