//! Sparse depth from cross-view correspondences: Harris corners, NCC
//! matching, midpoint triangulation and the depth supervision loss.

use log::warn;

use crate::error::{Error, Result};
use crate::geometry::{closest_points_between_rays, CameraModel, RayPair};
use crate::image::{convolve_separable, gaussian_kernel, GrayImage};
use crate::nn::{Tape, Var};

pub const PATCH_RADIUS: usize = 5;
pub const DESCRIPTOR_LEN: usize = (2 * PATCH_RADIUS + 1) * (2 * PATCH_RADIUS + 1);
const HARRIS_K: f64 = 0.04;
/// Responses below this (or below 0.5% of the strongest) are ignored.
const MIN_RESPONSE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePoint {
    /// Continuous pixel coordinates (pixel centres at `i + 0.5`).
    pub u: f64,
    pub v: f64,
    pub response: f64,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub view_a: usize,
    pub view_b: usize,
    pub ua: f64,
    pub va: f64,
    pub ub: f64,
    pub vb: f64,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthSample {
    pub u: f64,
    pub v: f64,
    pub d_app: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TriangulationStats {
    pub accepted: usize,
    pub gap_rejected: usize,
    pub behind_camera: usize,
    pub parallel: usize,
}

/// Per-view approximate depths along each matched pixel's ray.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseDepthMap {
    pub views: Vec<Vec<DepthSample>>,
    pub stats: TriangulationStats,
}

impl SparseDepthMap {
    pub fn total(&self) -> usize {
        self.views.iter().map(Vec::len).sum()
    }
}

/// Harris response with a Gaussian-weighted (σ = 1) structure tensor.
pub fn harris_response(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let gx = 0.5 * (img.get_clamped(xi + 1, yi) - img.get_clamped(xi - 1, yi));
            let gy = 0.5 * (img.get_clamped(xi, yi + 1) - img.get_clamped(xi, yi - 1));
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let k = gaussian_kernel(1.0);
    let sxx = convolve_separable(&ixx, w, h, &k);
    let syy = convolve_separable(&iyy, w, h, &k);
    let sxy = convolve_separable(&ixy, w, h, &k);
    (0..w * h)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - HARRIS_K * tr * tr
        })
        .collect()
}

/// Zero-mean unit-norm patch centred on pixel `(x, y)`; `None` if flat.
pub fn patch_descriptor(img: &GrayImage, x: usize, y: usize) -> Option<Vec<f64>> {
    let r = PATCH_RADIUS as isize;
    let mut d = Vec::with_capacity(DESCRIPTOR_LEN);
    for dy in -r..=r {
        for dx in -r..=r {
            d.push(img.get_clamped(x as isize + dx, y as isize + dy));
        }
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter_mut().for_each(|v| *v -= mean);
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    d.iter_mut().for_each(|v| *v /= norm);
    Some(d)
}

fn subpixel_offset(l: f64, c: f64, r: f64) -> f64 {
    let den = l - 2.0 * c + r;
    if den.abs() < 1e-300 {
        0.0
    } else {
        (0.5 * (l - r) / den).clamp(-0.5, 0.5)
    }
}

pub fn detect_corners(img: &GrayImage, max_points: usize, nms_radius: usize) -> Vec<FeaturePoint> {
    let (w, h) = (img.width, img.height);
    let side = 2 * PATCH_RADIUS + 1;
    if w < side || h < side {
        warn!("image {w}x{h} smaller than the {side}x{side} descriptor patch");
        return Vec::new();
    }
    let resp = harris_response(img);
    let peak = resp.iter().copied().fold(0.0f64, f64::max);
    let threshold = MIN_RESPONSE.max(0.005 * peak);
    let rad = nms_radius as isize;
    let mut cands = Vec::new();
    for y in PATCH_RADIUS..h - PATCH_RADIUS {
        for x in PATCH_RADIUS..w - PATCH_RADIUS {
            let r0 = resp[y * w + x];
            if r0 <= threshold {
                continue;
            }
            // strict maximum against earlier neighbours, non-strict against later ones
            let mut is_max = true;
            'nb: for dy in -rad..=rad {
                for dx in -rad..=rad {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let rn = resp[ny as usize * w + nx as usize];
                    let earlier = (dy, dx) < (0, 0);
                    if rn > r0 || (earlier && rn == r0) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                cands.push((x, y, r0));
            }
        }
    }
    cands.sort_by(|a, b| b.2.total_cmp(&a.2));
    cands
        .into_iter()
        .filter_map(|(x, y, r0)| {
            let at = |dx: isize, dy: isize| resp[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
            let ox = subpixel_offset(at(-1, 0), r0, at(1, 0));
            let oy = subpixel_offset(at(0, -1), r0, at(0, 1));
            patch_descriptor(img, x, y).map(|descriptor| FeaturePoint {
                u: x as f64 + 0.5 + ox,
                v: y as f64 + 0.5 + oy,
                response: r0,
                descriptor,
            })
        })
        .take(max_points)
        .collect()
}

pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mutual-best NCC matches passing the distance ratio test.
/// Returns `(index in a, index in b, ncc)`.
pub fn match_features(a: &[FeaturePoint], b: &[FeaturePoint], ratio: f64) -> Vec<(usize, usize, f64)> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let scores: Vec<Vec<f64>> = a.iter().map(|p| b.iter().map(|q| ncc(&p.descriptor, &q.descriptor)).collect()).collect();
    let best_in_row = |i: usize| -> (usize, f64, f64) {
        let (mut bi, mut best, mut second) = (0, f64::INFINITY, f64::INFINITY);
        for (j, &s) in scores[i].iter().enumerate() {
            let d = 1.0 - s;
            if d < best {
                second = best;
                best = d;
                bi = j;
            } else if d < second {
                second = d;
            }
        }
        (bi, best, second)
    };
    let best_in_col = |j: usize| -> usize {
        let mut bi = 0;
        for i in 1..a.len() {
            if scores[i][j] > scores[bi][j] {
                bi = i;
            }
        }
        bi
    };
    let mut out = Vec::new();
    for i in 0..a.len() {
        let (j, best, second) = best_in_row(i);
        if best_in_col(j) != i {
            continue;
        }
        let passes = if second.is_infinite() { true } else { best < ratio * second };
        if passes {
            out.push((i, j, scores[i][j]));
        }
    }
    out
}

/// Detects and matches features for every view pair within `window` indices.
pub fn correspondences_for_views(
    grays: &[GrayImage],
    window: usize,
    max_points: usize,
    nms_radius: usize,
    ratio: f64,
) -> Vec<Correspondence> {
    use rayon::prelude::*;
    let feats: Vec<Vec<FeaturePoint>> = grays.par_iter().map(|g| detect_corners(g, max_points, nms_radius)).collect();
    let pairs: Vec<(usize, usize)> =
        (0..grays.len()).flat_map(|a| (a + 1..grays.len().min(a + window + 1)).map(move |b| (a, b))).collect();
    pairs
        .par_iter()
        .map(|&(a, b)| {
            match_features(&feats[a], &feats[b], ratio)
                .into_iter()
                .map(|(i, j, s)| Correspondence {
                    view_a: a,
                    view_b: b,
                    ua: feats[a][i].u,
                    va: feats[a][i].v,
                    ub: feats[b][j].u,
                    vb: feats[b][j].v,
                    score: Some(s),
                })
                .collect::<Vec<_>>()
        })
        .flatten()
        .collect()
}

pub fn triangulate_matches(matches: &[Correspondence], cams: &[CameraModel], max_gap: f64) -> Result<SparseDepthMap> {
    let mut map = SparseDepthMap {
        views: vec![Vec::new(); cams.len()],
        stats: TriangulationStats::default(),
    };
    for m in matches {
        let (ca, cb) = match (cams.get(m.view_a), cams.get(m.view_b)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Domain(format!(
                    "match references view {} or {} but only {} cameras exist",
                    m.view_a,
                    m.view_b,
                    cams.len()
                )))
            }
        };
        let ra = ca.pixel_to_ray(m.ua, m.va)?;
        let rb = cb.pixel_to_ray(m.ub, m.vb)?;
        match closest_points_between_rays(&ra, &rb) {
            RayPair::Parallel => map.stats.parallel += 1,
            RayPair::BehindCamera(_) => map.stats.behind_camera += 1,
            RayPair::Intersection(x) => {
                if x.gap > max_gap {
                    map.stats.gap_rejected += 1;
                } else {
                    map.stats.accepted += 1;
                    map.views[m.view_a].push(DepthSample { u: m.ua, v: m.va, d_app: x.t1, gap: x.gap });
                    map.views[m.view_b].push(DepthSample { u: m.ub, v: m.vb, d_app: x.t2, gap: x.gap });
                }
            }
        }
    }
    Ok(map)
}

/// `Σ |D̂ − D_app|` recorded on the tape; zero for an empty set.
pub fn geometry_loss(tape: &mut Tape, rendered: &[Var], d_app: &[f64]) -> Result<Var> {
    if rendered.len() != d_app.len() {
        return Err(Error::Domain("rendered and approximate depth lists differ in length".into()));
    }
    let terms: Vec<Var> = rendered
        .iter()
        .zip(d_app)
        .map(|(&d, &a)| {
            let diff = tape.add_const(d, -a);
            tape.abs(diff)
        })
        .collect();
    Ok(tape.sum(&terms))
}

pub fn geometry_loss_value(rendered: &[f64], d_app: &[f64]) -> f64 {
    rendered.iter().zip(d_app).map(|(d, a)| (d - a).abs()).sum()
}
