//! Differentiable volume rendering of the scene fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{normalize_guarded, SampleVars, SceneFields};
use crate::geometry::{CameraModel, Ray, Vec3};
use crate::nn::{Tape, Var};

/// Terminal interval floor for the last sample on a ray.
pub const TERMINAL_DELTA: f64 = 1e-4;

/// Which side of the surface carries density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DensityOrientation {
    /// Density saturates where the signed distance is negative.
    #[default]
    Corrected,
    /// Literal form: density saturates where the signed distance is positive.
    AsPrinted,
}

/// `σ`, `∂σ/∂s` and `∂σ/∂β` for the corrected orientation.
fn laplace_density(s: f64, beta: f64) -> (f64, f64, f64) {
    if s >= 0.0 {
        let e = (-s / beta).exp();
        let sigma = e / (2.0 * beta);
        (sigma, -sigma / beta, sigma * (s - beta) / (beta * beta))
    } else {
        let e = (s / beta).exp();
        let sigma = (1.0 - 0.5 * e) / beta;
        let ds = -e / (2.0 * beta * beta);
        let db = -sigma / beta + s * e / (2.0 * beta * beta * beta);
        (sigma, ds, db)
    }
}

fn density_parts(s: f64, beta: f64, orientation: DensityOrientation) -> (f64, f64, f64) {
    match orientation {
        DensityOrientation::Corrected => laplace_density(s, beta),
        DensityOrientation::AsPrinted => {
            let (sigma, ds, db) = laplace_density(-s, beta);
            (sigma, -ds, db)
        }
    }
}

pub fn density_from_sdf(s: f64, beta: f64) -> Result<f64> {
    density_with_orientation(s, beta, DensityOrientation::Corrected)
}

pub fn density_with_orientation(s: f64, beta: f64, orientation: DensityOrientation) -> Result<f64> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    if s.is_nan() {
        return Err(Error::Domain("signed distance is NaN".into()));
    }
    Ok(density_parts(s, beta, orientation).0)
}

/// Density recorded on the tape, differentiable in both `s` and `β`.
pub fn density_var(tape: &mut Tape, s: Var, beta: Var, orientation: DensityOrientation) -> Var {
    let (sigma, ds, db) = density_parts(tape.value(s), tape.value(beta), orientation);
    tape.binary(s, beta, sigma, ds, db)
}

fn check_bounds(near: f64, far: f64, n: usize) -> Result<()> {
    if !(near >= 0.0 && far > near && far.is_finite()) {
        return Err(Error::Domain(format!("invalid ray bounds [{near}, {far}]")));
    }
    if n < 2 {
        return Err(Error::Domain("at least two samples per ray are required".into()));
    }
    Ok(())
}

/// Stratified sampling with draws from `draw` (each in `[0, 1)`).
pub fn sample_ray_with(near: f64, far: f64, n: usize, mut draw: impl FnMut() -> f64) -> Result<Vec<f64>> {
    check_bounds(near, far, n)?;
    let step = (far - near) / n as f64;
    let mut t: Vec<f64> = (0..n).map(|i| near + (i as f64 + draw()) * step).collect();
    // a draw of exactly 0 next to a draw of 1-ε can tie in floating point
    for i in 1..n {
        if t[i] <= t[i - 1] {
            t[i] = next_up(t[i - 1]);
        }
    }
    Ok(t)
}

pub fn sample_ray(near: f64, far: f64, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    sample_ray_with(near, far, n, || rng.random::<f64>())
}

fn next_up(x: f64) -> f64 {
    if x >= 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        f64::from_bits(x.to_bits() - 1)
    }
}

/// Sample spacings; the last one reaches `far`, floored at `TERMINAL_DELTA`.
pub fn deltas(t: &[f64], far: f64) -> Vec<f64> {
    let n = t.len();
    (0..n)
        .map(|i| {
            if i + 1 < n {
                t[i + 1] - t[i]
            } else {
                (far - t[i]).max(TERMINAL_DELTA)
            }
        })
        .collect()
}

/// Transmittance and weights of the discrete compositing quadrature.
pub fn compute_weights(sigma: &[f64], delta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if sigma.len() != delta.len() {
        return Err(Error::Domain("sigma and delta lengths differ".into()));
    }
    let mut trans = Vec::with_capacity(sigma.len());
    let mut weights = Vec::with_capacity(sigma.len());
    let mut acc = 0.0f64;
    for (&s, &d) in sigma.iter().zip(delta) {
        let t = (-acc).exp();
        let od = s * d;
        trans.push(t);
        weights.push(t * -(-od).exp_m1());
        acc += od;
    }
    Ok((trans, weights))
}

/// Anything that can be queried like the scene fields.
pub trait RadianceField {
    fn beta_var(&self, tape: &mut Tape) -> Var;
    fn query(&self, tape: &mut Tape, points: &[Vec3], dirs: &[Vec3], with_plane: bool) -> Result<Vec<SampleVars>>;
}

impl RadianceField for SceneFields {
    fn beta_var(&self, tape: &mut Tape) -> Var {
        SceneFields::beta_var(self, tape)
    }

    fn query(&self, tape: &mut Tape, points: &[Vec3], dirs: &[Vec3], with_plane: bool) -> Result<Vec<SampleVars>> {
        SceneFields::query(self, tape, points, dirs, with_plane)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub n_samples: usize,
    pub orientation: DensityOrientation,
    pub with_plane: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            n_samples: 64,
            orientation: DensityOrientation::Corrected,
            with_plane: true,
        }
    }
}

/// One ray with its integration interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayQuery {
    pub ray: Ray,
    pub near: f64,
    pub far: f64,
}

/// Rendered quantities recorded on a tape.
#[derive(Debug, Clone)]
pub struct RenderVars {
    pub color: [Var; 3],
    pub depth: Var,
    pub normal: [Var; 3],
    pub plane_prob: Var,
    pub opacity: Var,
    pub t: Vec<f64>,
    pub weights: Vec<Var>,
    pub transmittance: Vec<Var>,
    pub normal_degenerate: bool,
}

/// Plain values of a rendered ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutputs {
    pub color: [f64; 3],
    pub depth: f64,
    pub normal: Vec3,
    pub plane_prob: f64,
    pub opacity: f64,
    pub t: Vec<f64>,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
}

impl RenderVars {
    pub fn values(&self, tape: &Tape) -> RenderOutputs {
        let v = |x: Var| tape.value(x);
        RenderOutputs {
            color: self.color.map(v),
            depth: v(self.depth),
            normal: Vec3::from_array(self.normal.map(v)),
            plane_prob: v(self.plane_prob),
            opacity: v(self.opacity),
            t: self.t.clone(),
            weights: self.weights.iter().map(|&w| v(w)).collect(),
            transmittance: self.transmittance.iter().map(|&w| v(w)).collect(),
        }
    }
}

/// Composites field samples along rays already placed at `t`.
pub fn composite(
    tape: &mut Tape,
    samples: &[SampleVars],
    t: &[f64],
    far: f64,
    beta: Var,
    orientation: DensityOrientation,
) -> RenderVars {
    let n = t.len();
    let delta = deltas(t, far);
    let zero = tape.constant(0.0);
    let mut acc = zero;
    let mut color = [zero; 3];
    let mut normal_sum = [zero; 3];
    let mut depth = zero;
    let mut plane = zero;
    let mut opacity = zero;
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    for i in 0..n {
        let s = &samples[i];
        let sigma = density_var(tape, s.sdf, beta, orientation);
        let od = tape.scale(sigma, delta[i]);
        let a = tape.value(acc);
        let trans = tape.unary(acc, (-a).exp(), -(-a).exp());
        let o = tape.value(od);
        let alpha = tape.unary(od, -(-o).exp_m1(), (-o).exp());
        let w = tape.mul(trans, alpha);
        acc = tape.add(acc, od);
        for c in 0..3 {
            let wc = tape.mul(w, s.color[c]);
            color[c] = tape.add(color[c], wc);
            let wn = tape.mul(w, s.normal[c]);
            normal_sum[c] = tape.add(normal_sum[c], wn);
        }
        let wt = tape.scale(w, t[i]);
        depth = tape.add(depth, wt);
        let p = tape.sigmoid(s.plane_logit);
        let wp = tape.mul(w, p);
        plane = tape.add(plane, wp);
        opacity = tape.add(opacity, w);
        weights.push(w);
        transmittance.push(trans);
    }
    let (normal, normal_degenerate) = normalize_guarded(tape, normal_sum);
    RenderVars {
        color,
        depth,
        normal,
        plane_prob: plane,
        opacity,
        t: t.to_vec(),
        weights,
        transmittance,
        normal_degenerate,
    }
}

/// Renders a batch of rays on one tape; field queries are batched across rays.
pub fn render_rays(
    field: &impl RadianceField,
    tape: &mut Tape,
    rays: &[RayQuery],
    settings: &RenderSettings,
    rng: &mut impl Rng,
) -> Result<Vec<RenderVars>> {
    let ts = rays
        .iter()
        .map(|q| sample_ray(q.near, q.far, settings.n_samples, rng))
        .collect::<Result<Vec<_>>>()?;
    render_rays_at(field, tape, rays, &ts, settings)
}

/// Like [`render_rays`] with the sample distances of each ray given.
pub fn render_rays_at(
    field: &impl RadianceField,
    tape: &mut Tape,
    rays: &[RayQuery],
    ts: &[Vec<f64>],
    settings: &RenderSettings,
) -> Result<Vec<RenderVars>> {
    if ts.len() != rays.len() {
        return Err(Error::Config(format!("{} sample lists for {} rays", ts.len(), rays.len())));
    }
    let total: usize = ts.iter().map(Vec::len).sum();
    let mut points = Vec::with_capacity(total);
    let mut dirs = Vec::with_capacity(total);
    for (q, t) in rays.iter().zip(ts) {
        if t.is_empty() {
            return Err(Error::Domain("ray without samples".into()));
        }
        for &ti in t {
            points.push(q.ray.at(ti));
            dirs.push(q.ray.direction);
        }
    }
    let samples = field.query(tape, &points, &dirs, settings.with_plane)?;
    let beta = field.beta_var(tape);
    let mut start = 0;
    Ok(rays
        .iter()
        .zip(ts)
        .map(|(q, t)| {
            let out = composite(tape, &samples[start..start + t.len()], t, q.far, beta, settings.orientation);
            start += t.len();
            out
        })
        .collect())
}

pub fn render_ray(
    field: &impl RadianceField,
    ray: &Ray,
    near: f64,
    far: f64,
    n_samples: usize,
    rng: &mut impl Rng,
    tape: &mut Tape,
) -> Result<RenderVars> {
    let settings = RenderSettings {
        n_samples,
        ..RenderSettings::default()
    };
    let q = RayQuery { ray: *ray, near, far };
    Ok(render_rays(field, tape, &[q], &settings, rng)?.remove(0))
}

/// Axis-aligned box that bounds ray integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBounds {
    pub min: Vec3,
    pub max: Vec3,
    pub near: f64,
}

impl SceneBounds {
    pub fn cube(half: f64, near: f64) -> Self {
        Self {
            min: Vec3::new(-half, -half, -half),
            max: Vec3::new(half, half, half),
            near,
        }
    }

    /// Box around the camera centres padded by `radius`.
    pub fn around_cameras(centres: &[Vec3], radius: f64, near: f64) -> Self {
        let mut min = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut max = -min;
        for c in centres {
            min = Vec3::new(min.x.min(c.x), min.y.min(c.y), min.z.min(c.z));
            max = Vec3::new(max.x.max(c.x), max.y.max(c.y), max.z.max(c.z));
        }
        let pad = Vec3::new(radius, radius, radius);
        Self {
            min: min - pad,
            max: max + pad,
            near,
        }
    }

    /// `[near, far]` where `far` is the exit distance from the box, if the ray meets it.
    pub fn interval(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let d = ray.direction[a];
            let o = ray.origin[a];
            if d.abs() < 1e-15 {
                if o < self.min[a] || o > self.max[a] {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((self.min[a] - o) / d, (self.max[a] - o) / d);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        let near = t0.max(self.near);
        (t1 > near).then_some((near, t1))
    }

    pub fn query(&self, ray: Ray) -> Option<RayQuery> {
        self.interval(&ray).map(|(near, far)| RayQuery { ray, near, far })
    }
}

/// Per-pixel rendering of a whole view (row-major, `width * height`).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub normal: Vec<Vec3>,
    pub plane_prob: Vec<f64>,
    pub opacity: Vec<f64>,
}

/// Renders every pixel centre of `camera`. Each image row uses its own RNG
/// stream derived from `seed`, so the result does not depend on thread count.
pub fn render_view(
    fields: &SceneFields,
    camera: &CameraModel,
    bounds: &SceneBounds,
    settings: &RenderSettings,
    seed: u64,
) -> Result<RenderedView> {
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<RenderOutputs>> = (0..h)
        .into_par_iter()
        .map(|j| -> Result<Vec<RenderOutputs>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut out = Vec::with_capacity(w);
            let mut tape = Tape::new();
            let queries: Vec<Option<RayQuery>> = (0..w).map(|i| bounds.query(camera.pixel_center_ray(i, j))).collect();
            let valid: Vec<RayQuery> = queries.iter().flatten().copied().collect();
            let rendered = render_rays(fields, &mut tape, &valid, settings, &mut rng)?;
            let mut it = rendered.iter();
            for q in &queries {
                out.push(match q {
                    Some(_) => it.next().unwrap().values(&tape),
                    None => RenderOutputs {
                        color: [0.0; 3],
                        depth: 0.0,
                        normal: Vec3::ZERO,
                        plane_prob: 0.0,
                        opacity: 0.0,
                        t: vec![],
                        weights: vec![],
                        transmittance: vec![],
                    },
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let flat: Vec<RenderOutputs> = rows.into_iter().flatten().collect();
    Ok(RenderedView {
        width: w,
        height: h,
        color: flat.iter().map(|o| o.color).collect(),
        depth: flat.iter().map(|o| o.depth).collect(),
        normal: flat.iter().map(|o| o.normal).collect(),
        plane_prob: flat.iter().map(|o| o.plane_prob).collect(),
        opacity: flat.iter().map(|o| o.opacity).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Field with analytic signed distance and constant colour / normal / logit.
    struct Stub<F: Fn(Vec3) -> f64> {
        sdf: F,
        color: [f64; 3],
        beta: f64,
    }

    impl<F: Fn(Vec3) -> f64> RadianceField for Stub<F> {
        fn beta_var(&self, tape: &mut Tape) -> Var {
            tape.constant(self.beta)
        }
        fn query(&self, tape: &mut Tape, points: &[Vec3], _dirs: &[Vec3], _p: bool) -> Result<Vec<SampleVars>> {
            Ok(points
                .iter()
                .map(|&p| SampleVars {
                    sdf: tape.constant((self.sdf)(p)),
                    normal: [tape.constant(0.0), tape.constant(0.0), tape.constant(1.0)],
                    color: self.color.map(|c| tape.constant(c)),
                    plane_logit: tape.constant(0.0),
                })
                .collect())
        }
    }

    #[test]
    fn density_examples() {
        assert_eq!(density_from_sdf(0.0, 0.1).unwrap(), 5.0);
        let out = density_from_sdf(1.0, 0.1).unwrap();
        assert!((out - 5.0 * (-10f64).exp()).abs() < 1e-15 && (out - 2.27e-4).abs() < 1e-6);
        let inside = density_from_sdf(-1.0, 0.1).unwrap();
        assert!((inside - 10.0 * (1.0 - 0.5 * (-10f64).exp())).abs() < 1e-12);
        assert!(density_from_sdf(0.3, 0.0).is_err());
        assert!(density_from_sdf(0.3, -1.0).is_err());
    }

    #[test]
    fn printed_orientation_mirrors_corrected() {
        for s in [-0.7, -0.01, 0.0, 0.02, 1.5] {
            let a = density_with_orientation(s, 0.2, DensityOrientation::AsPrinted).unwrap();
            let b = density_from_sdf(-s, 0.2).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn density_partials_match_finite_differences() {
        for orient in [DensityOrientation::Corrected, DensityOrientation::AsPrinted] {
            for &(s, b) in &[(0.3, 0.1), (-0.2, 0.05), (0.01, 0.3), (-1.0, 0.7)] {
                let (_, ds, db) = density_parts(s, b, orient);
                let h = 1e-7;
                let f = |s: f64, b: f64| density_parts(s, b, orient).0;
                let fd_s = (f(s + h, b) - f(s - h, b)) / (2.0 * h);
                let fd_b = (f(s, b + h) - f(s, b - h)) / (2.0 * h);
                assert!((fd_s - ds).abs() < 1e-5 * (1.0 + ds.abs()), "{s} {b}: {fd_s} vs {ds}");
                assert!((fd_b - db).abs() < 1e-5 * (1.0 + db.abs()), "{s} {b}: {fd_b} vs {db}");
            }
        }
    }

    #[test]
    fn stratum_midpoints() {
        let t = sample_ray_with(0.0, 1.0, 4, || 0.5).unwrap();
        assert_eq!(t, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(sample_ray_with(1.0, 1.0, 4, || 0.5).is_err());
        assert!(sample_ray_with(0.1, 1.0, 1, || 0.5).is_err());
        assert!(sample_ray_with(-0.1, 1.0, 4, || 0.5).is_err());
    }

    #[test]
    fn samples_stay_in_bounds_and_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let near = rng.random_range(0.01..1.0);
            let far = near + rng.random_range(0.01..5.0);
            let t = sample_ray(near, far, 16, &mut rng).unwrap();
            assert!(t.windows(2).all(|w| w[1] > w[0]));
            assert!(t.iter().all(|&x| x >= near && x <= far));
        }
        let t = sample_ray_with(0.5, 0.5 + 1e-12, 2, {
            let mut k = 0;
            move || {
                k += 1;
                if k == 1 { 1.0 - f64::EPSILON } else { 0.0 }
            }
        })
        .unwrap();
        assert!(t[1] > t[0]);
    }

    #[test]
    fn weights_closed_forms() {
        let (t, w) = compute_weights(&[2f64.ln()], &[1.0]).unwrap();
        assert_eq!(t[0], 1.0);
        assert!((w[0] - 0.5).abs() < 1e-15);
        let (t, w) = compute_weights(&[0.0; 5], &[0.1; 5]).unwrap();
        assert!(t.iter().all(|&x| x == 1.0) && w.iter().all(|&x| x == 0.0));
        assert!(compute_weights(&[1.0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn terminal_delta_is_floored() {
        let d = deltas(&[0.1, 0.4, 0.99999999], 1.0);
        assert!((d[0] - 0.3).abs() < 1e-15);
        assert_eq!(d[2], TERMINAL_DELTA);
        let d = deltas(&[0.1, 0.5], 1.0);
        assert!((d[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn opaque_slab_renders_its_colour_and_depth() {
        // surface at t = 2 along +x; tiny beta makes one sample take all weight
        let stub = Stub {
            sdf: |p: Vec3| 2.0 - p.x,
            color: [1.0, 0.0, 0.0],
            beta: 1e-4,
        };
        let ray = Ray::new(Vec3::ZERO, Vec3::X);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = render_ray(&stub, &ray, 0.5, 3.5, 64, &mut rng, &mut tape).unwrap().values(&tape);
        let w: f64 = r.weights.iter().sum();
        assert!((w - r.opacity).abs() < 1e-12);
        assert!(w > 0.999);
        assert!((r.color[0] - w).abs() < 1e-12 && r.color[1] == 0.0 && r.color[2] == 0.0);
        assert!((r.depth - 2.0 * w).abs() < 3.0 / 64.0, "{}", r.depth);
        assert!((r.normal - Vec3::Z).norm() < 1e-12);
        assert!((r.plane_prob - 0.5 * w).abs() < 1e-12);
    }

    #[test]
    fn vacuum_renders_black_at_zero_depth() {
        let stub = Stub {
            sdf: |_p: Vec3| 1e6,
            color: [0.3, 0.6, 0.9],
            beta: 1e-3,
        };
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = render_ray(&stub, &Ray::new(Vec3::ZERO, Vec3::Y), 0.1, 4.0, 32, &mut rng, &mut tape)
            .unwrap()
            .values(&tape);
        assert_eq!(r.opacity, 0.0);
        assert_eq!(r.depth, 0.0);
        assert_eq!(r.color, [0.0; 3]);
        assert!(r.normal.is_finite());
    }

    #[test]
    fn rendered_transmittance_matches_plain_quadrature() {
        let stub = Stub {
            sdf: |p: Vec3| 0.8 - p.norm(),
            color: [0.2, 0.4, 0.6],
            beta: 0.05,
        };
        let ray = Ray::new(Vec3::new(-0.2, 0.1, 0.0), Vec3::new(1.0, 0.3, -0.2));
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = render_ray(&stub, &ray, 0.05, 2.0, 48, &mut rng, &mut tape).unwrap().values(&tape);
        let sigma: Vec<f64> = r.t.iter().map(|&t| density_from_sdf(0.8 - ray.at(t).norm(), 0.05).unwrap()).collect();
        let (tr, w) = compute_weights(&sigma, &deltas(&r.t, 2.0)).unwrap();
        for i in 0..r.t.len() {
            assert!((tr[i] - r.transmittance[i]).abs() < 1e-12);
            assert!((w[i] - r.weights[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn box_interval_from_inside_and_outside() {
        let b = SceneBounds::cube(1.0, 0.05);
        let (n, f) = b.interval(&Ray::new(Vec3::ZERO, Vec3::X)).unwrap();
        assert_eq!((n, f), (0.05, 1.0));
        let (n, f) = b.interval(&Ray::new(Vec3::new(-3.0, 0.0, 0.0), Vec3::X)).unwrap();
        assert_eq!((n, f), (2.0, 4.0));
        assert!(b.interval(&Ray::new(Vec3::new(-3.0, 0.0, 0.0), -Vec3::X)).is_none());
        assert!(b.interval(&Ray::new(Vec3::new(0.0, 5.0, 0.0), Vec3::X)).is_none());
        let cams = SceneBounds::around_cameras(&[Vec3::new(0.5, 0.0, 0.0), Vec3::new(-0.5, 0.2, 0.1)], 1.0, 0.05);
        assert_eq!(cams.min, Vec3::new(-1.5, -1.0, -1.0));
        assert_eq!(cams.max, Vec3::new(1.5, 1.2, 1.1));
    }
}
