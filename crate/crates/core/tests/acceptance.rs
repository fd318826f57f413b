//! Acceptance harness: one PASS/FAIL line per criterion.
//! `SDFRECON_ACCEPTANCE_ONLY=1,4,7` runs a subset; `SDFRECON_ACCEPTANCE_STRICT=1`
//! turns any FAIL into a nonzero exit.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdfrecon::geometry::{closest_points_between_rays, Ray, RayPair, Vec3};
use sdfrecon::image::RgbImage;
use sdfrecon::meshing_eval::{eval_metrics, f_score, marching_cubes, GridBounds};
use sdfrecon::nn::Tape;
use sdfrecon::pipeline::{
    flat_wall_normal_errors, mean_eikonal_deviation, near_surface_probes, run_ablation, synthetic_room, AblationRun,
    EvalSettings, SynthSetup,
};
use sdfrecon::plane_seg::{felzenszwalb_segment, plane_loss_value, SegmentLabelMap, SegmentParams};
use sdfrecon::rendering::{compute_weights, density_from_sdf, render_rays_at, sample_ray_with, RenderSettings};
use sdfrecon::sparse_depth::triangulate_matches;
use sdfrecon::synth::{default_cameras, make_correspondences, GtView, SceneSpec};
use sdfrecon::training::{
    draw_step_samples, evaluate_step, step_rng, train, train_step, Ablation, NoObserver, Supervision, TrainConfig,
    TrainObserver, TrainState,
};
use sdfrecon::dataset::Dataset;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---- 1: autodiff ----

fn autodiff() -> Outcome {
    let (ds, _) = synthetic_room(&SynthSetup::default()).unwrap();
    let mut c = TrainConfig::desk();
    c.batch_rays = 16;
    c.samples_per_ray = 16;
    c.eikonal_uniform = 16;
    c.eikonal_near = 16;
    c.iterations = 100;
    let sup = Supervision::prepare(&ds, &c).unwrap();
    let mut st = TrainState::new(&c).unwrap();
    for _ in 0..5 {
        train_step(&mut st, &ds, &sup, &c).unwrap();
    }
    let it = st.step;
    let samples = draw_step_samples(&ds, &sup, &c, it, &mut step_rng(99, it)).unwrap();
    let (b, g) = evaluate_step(&st.fields, &samples, &c, it, true).unwrap();
    let g = g.unwrap();
    let active = b.l_c > 0.0 && b.n_geo > 0 && b.n_plane > 0 && b.l_eik > 0.0 && b.lambda_geo > 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = st.fields.params.len();
    let mut probes: Vec<usize> = (0..99).map(|_| rng.random_range(0..n)).collect();
    probes.push(st.fields.log_beta_index());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &k in &probes {
        let mut f = st.fields.clone();
        let x = f.params.values()[k];
        f.params.values_mut()[k] = x + h;
        let lp = evaluate_step(&f, &samples, &c, it, false).unwrap().0.total;
        f.params.values_mut()[k] = x - h;
        let lm = evaluate_step(&f, &samples, &c, it, false).unwrap().0.total;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6));
    }
    outcome(
        active && worst < 1e-3,
        format!(
            "worst relative error {worst:.2e} over {} probes; terms active: {active} (geo rays {}, plane rays {})",
            probes.len(),
            b.n_geo,
            b.n_plane
        ),
    )
}

// ---- 2: density laws ----

fn density_laws() -> Outcome {
    let beta = 0.1;
    let eps = 1e-300;
    let left = density_from_sdf(-eps, beta).unwrap();
    let right = density_from_sdf(eps, beta).unwrap();
    let at0 = density_from_sdf(0.0, beta).unwrap();
    let continuous = (left - right).abs() < 1e-12;
    let exact0 = at0 == 1.0 / (2.0 * beta);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut monotone = true;
    for _ in 0..10_000 {
        let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if lo < hi && density_from_sdf(lo, beta).unwrap() < density_from_sdf(hi, beta).unwrap() {
            monotone = false;
        }
    }
    // Scale-free deviations at |s| = 20 beta: beta*sigma against 1 and 0.
    let mut worst_limit: f64 = 0.0;
    for &b in &[0.01, 0.1, 1.0] {
        let inside = density_from_sdf(-20.0 * b, b).unwrap() * b;
        let outside = density_from_sdf(20.0 * b, b).unwrap() * b;
        worst_limit = worst_limit.max((inside - 1.0).abs()).max(outside);
    }
    let limits = worst_limit < 1e-9;
    outcome(
        continuous && exact0 && monotone && limits,
        format!(
            "jump {:.1e}, sigma(0) exact {exact0}, monotone {monotone}, worst limit gap at 20 beta {worst_limit:.4e} \
             (closed form exp(-20)/2 = {:.4e})",
            (left - right).abs(),
            0.5 * (-20f64).exp()
        ),
    )
}

// ---- 3: quadrature ----

fn quadrature() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..80);
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..30.0)).collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(1e-4..0.2)).collect();
        let (_, w) = compute_weights(&sigma, &delta).unwrap();
        let od: f64 = sigma.iter().zip(&delta).map(|(s, d)| s * d).sum();
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - (1.0 - (-od).exp())).abs());
    }

    // Smooth field: the sphere-initialised networks seen from inside the room.
    let cfg = TrainConfig::desk();
    let fields = TrainState::new(&cfg).unwrap().fields;
    let bounds = cfg.bounds();
    let cams = default_cameras();
    let rays: Vec<_> = (0..64)
        .map(|i| bounds.query(cams[i % cams.len()].pixel_center_ray((i * 7) % 64, (i * 13) % 64)).unwrap())
        .collect();
    let render = |n: usize| {
        let ts: Vec<Vec<f64>> = rays.iter().map(|q| sample_ray_with(q.near, q.far, n, || 0.5).unwrap()).collect();
        let mut tape = Tape::new();
        let s = RenderSettings {
            n_samples: n,
            ..RenderSettings::default()
        };
        let out = render_rays_at(&fields, &mut tape, &rays, &ts, &s).unwrap();
        out.iter().map(|o| o.values(&tape).color).collect::<Vec<_>>()
    };
    let (c1, c2) = (render(64), render(128));
    let worst_change = c1
        .iter()
        .zip(&c2)
        .map(|(a, b)| {
            let diff: f64 = (0..3).map(|k| (a[k] - b[k]).abs()).sum();
            let norm: f64 = b.iter().map(|v| v.abs()).sum();
            diff / norm
        })
        .fold(0.0, f64::max);
    outcome(
        worst_sum < 1e-12 && worst_change < 0.01,
        format!("|sum w - opacity| {worst_sum:.1e}; colour change 64->128 samples {:.3}%", 100.0 * worst_change),
    )
}

// ---- 4: triangulation ----

fn brute_force_gap(r1: &Ray, r2: &Ray) -> f64 {
    let dist = |a: f64, b: f64| (r1.at(a) - r2.at(b)).norm();
    let (mut c1, mut c2, mut span) = (0.0, 0.0, 20.0);
    let k = 10;
    for _ in 0..80 {
        let step = span / k as f64;
        let mut best = (f64::INFINITY, c1, c2);
        for i in -k..=k {
            for j in -k..=k {
                let (a, b) = (c1 + i as f64 * step, c2 + j as f64 * step);
                let d = dist(a, b);
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        c1 = best.1;
        c2 = best.2;
        span *= 0.6;
    }
    dist(c1, c2)
}

fn triangulation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let unit = |rng: &mut ChaCha8Rng| loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() <= 1.0 {
            return v.normalized();
        }
    };
    let mut worst: f64 = 0.0;
    let mut tested = 0;
    while tested < 10_000 {
        let o1 = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let o2 = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (d1, d2) = (unit(&mut rng), unit(&mut rng));
        let (r1, r2) = (Ray::new(o1, d1), Ray::new(o2, d2));
        let gap = match closest_points_between_rays(&r1, &r2) {
            RayPair::Intersection(h) | RayPair::BehindCamera(h) => h.gap,
            RayPair::Parallel => continue,
        };
        // Closest approaches beyond the search window are skipped, not failed.
        if d1.dot(d2).abs() > 0.95 {
            continue;
        }
        worst = worst.max((gap - brute_force_gap(&r1, &r2)).abs());
        tested += 1;
    }

    let scene = SceneSpec::default_room();
    let cams = default_cameras();
    let m = make_correspondences(&scene, &cams, 400, 0.0, 2, &mut ChaCha8Rng::seed_from_u64(5));
    let mut exact = 0;
    for (c, &(da, db)) in m.matches.iter().zip(&m.depths) {
        let map = triangulate_matches(std::slice::from_ref(c), &cams, 1e-6).unwrap();
        let (a, b) = (map.views[c.view_a].first(), map.views[c.view_b].first());
        if let (Some(a), Some(b)) = (a, b) {
            if (a.d_app - da).abs() < 1e-6 && (b.d_app - db).abs() < 1e-6 {
                exact += 1;
            }
        }
    }
    outcome(
        worst < 1e-6 && exact == m.matches.len(),
        format!("worst gap mismatch {worst:.1e} on {tested} pairs; noiseless D_app exact {exact}/{}", m.matches.len()),
    )
}

// ---- 5: plane loss ----

fn plane_loss() -> Outcome {
    let f = Vec3::Z;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let lattice = plane_loss_value(Vec3::Z, f) == 0.0
        && plane_loss_value(Vec3::X, f) == 0.0
        && plane_loss_value(-Vec3::Z, f) == 0.0
        && (plane_loss_value(Vec3::new(0.0, s, s), f) - 0.2929).abs() < 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bounded = true;
    let mut symmetric = true;
    for _ in 0..10_000 {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() < 1e-3 {
            continue;
        }
        let n = v.normalized();
        let l = plane_loss_value(n, f);
        bounded &= (0.0..=0.5).contains(&l);
        symmetric &= l == plane_loss_value(-n, f);
    }
    outcome(lattice && bounded && symmetric, format!("lattice {lattice}, bound {bounded}, sign symmetry {symmetric}"))
}

// ---- 6: segmentation ----

fn four_connected(l: &SegmentLabelMap) -> bool {
    let (w, h) = (l.width, l.height);
    let mut seen = vec![false; w * h];
    let mut starts = HashSet::new();
    for i in 0..w * h {
        if seen[i] {
            continue;
        }
        if !starts.insert(l.labels[i]) {
            return false;
        }
        let mut stack = vec![i];
        seen[i] = true;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            let mut push = |q: usize| {
                if !seen[q] && l.labels[q] == l.labels[p] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
    }
    true
}

fn segmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut invariants = true;
    let mut deterministic = true;
    for _ in 0..50 {
        let (w, h) = (rng.random_range(8..40), rng.random_range(8..40));
        let blocks = rng.random_range(1..6);
        let palette: Vec<[f64; 3]> = (0..blocks * blocks).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let noise: Vec<f64> = (0..w * h).map(|_| rng.random_range(-0.03..0.03)).collect();
        let img = RgbImage::from_fn(w, h, |x, y| {
            let c = palette[(y * blocks / h) * blocks + x * blocks / w];
            c.map(|v| (v + noise[y * w + x]).clamp(0.0, 1.0))
        });
        let p = SegmentParams::default();
        let a = felzenszwalb_segment(&img, &p).unwrap();
        invariants &= a.labels.len() == w * h
            && a.sizes.iter().sum::<usize>() == w * h
            && a.sizes.iter().all(|&s| s > 0)
            && a.labels.iter().all(|&l| (l as usize) < a.num_segments())
            && four_connected(&a);
        deterministic &= a == felzenszwalb_segment(&img, &p).unwrap();
    }
    let uniform = felzenszwalb_segment(&RgbImage::from_fn(32, 24, |_, _| [0.3, 0.6, 0.2]), &SegmentParams::default())
        .unwrap()
        .num_segments();
    let two_tone = RgbImage::from_fn(32, 24, |x, _| if x < 16 { [0.9, 0.1, 0.1] } else { [0.1, 0.2, 0.9] });
    let sharp = SegmentParams {
        sigma: 0.0,
        ..SegmentParams::default()
    };
    let two = felzenszwalb_segment(&two_tone, &sharp).unwrap().num_segments();
    outcome(
        invariants && deterministic && uniform == 1 && two == 2,
        format!("partition+4-connectivity {invariants}, deterministic {deterministic}, uniform -> {uniform}, two-tone -> {two}"),
    )
}

// ---- 7: marching cubes and metrics ----

fn brute_metrics(pred: &[Vec3], gt: &[Vec3], tau: f64) -> (f64, f64, f64, f64, f64) {
    let nn = |a: &[Vec3], b: &[Vec3]| -> Vec<f64> {
        a.iter()
            .map(|p| b.iter().map(|q| p.distance(*q)).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let (dp, dg) = (nn(pred, gt), nn(gt, pred));
    let acc = dp.iter().sum::<f64>() / dp.len() as f64;
    let comp = dg.iter().sum::<f64>() / dg.len() as f64;
    let prec = dp.iter().filter(|&&d| d < tau).count() as f64 / dp.len() as f64;
    let rec = dg.iter().filter(|&&d| d < tau).count() as f64 / dg.len() as f64;
    (acc, comp, prec, rec, f_score(prec, rec))
}

fn meshing_metrics() -> Outcome {
    let res = 64;
    let h = 2.0 / (res - 1) as f64;
    let mesh = marching_cubes(
        |p: &[Vec3]| Ok(p.iter().map(|x| x.norm() - 0.5).collect()),
        GridBounds::cube(1.0).unwrap(),
        res,
    )
    .unwrap();
    let worst_r = mesh.vertices.iter().map(|v| (v.norm() - 0.5).abs()).fold(0.0, f64::max);
    let radius_ok = !mesh.vertices.is_empty() && worst_r <= 2.0 * h;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut exact = true;
    for _ in 0..200 {
        let n = rng.random_range(1..=100);
        let m = rng.random_range(1..=100);
        let cloud = |rng: &mut ChaCha8Rng, k: usize| -> Vec<Vec3> {
            (0..k).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()
        };
        let (a, b) = (cloud(&mut rng, n), cloud(&mut rng, m));
        let tau = rng.random_range(0.02..0.5);
        let r = eval_metrics(&a, &b, tau).unwrap();
        exact &= (r.accuracy, r.completeness, r.precision, r.recall, r.f_score) == brute_metrics(&a, &b, tau);
    }
    let pts: Vec<Vec3> = (0..50).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
    let far: Vec<Vec3> = pts.iter().map(|p| *p + Vec3::new(0.0, 10.0, 0.0)).collect();
    let same = eval_metrics(&pts, &pts, 0.05).unwrap().f_score;
    let disjoint = eval_metrics(&pts, &far, 0.05).unwrap().f_score;
    outcome(
        radius_ok && exact && same == 1.0 && disjoint == 0.0,
        format!("max |r-0.5| {worst_r:.4} (bound {:.4}); brute-force equal {exact}; F identical {same}, disjoint {disjoint}", 2.0 * h),
    )
}

// ---- 8-10: end to end ----

/// Reduced desk preset for a single CPU core (see README).
fn e2e_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.iterations = env_usize("SDFRECON_ACCEPTANCE_ITERS").unwrap_or(2000);
    c.batch_rays = 128;
    c.samples_per_ray = 32;
    c.seed = 0;
    c
}

fn env_usize(k: &str) -> Option<usize> {
    std::env::var(k).ok().and_then(|v| v.parse().ok())
}

struct EndToEnd {
    runs: Vec<AblationRun>,
    dataset: Dataset,
    views: Vec<GtView>,
    config: TrainConfig,
    seconds: f64,
}

fn end_to_end() -> EndToEnd {
    let t = Instant::now();
    let (dataset, views) = synthetic_room(&SynthSetup::default()).unwrap();
    let config = e2e_config();
    let sup = Supervision::prepare(&dataset, &config).unwrap();
    let runs = run_ablation(&dataset, &sup, &config, &EvalSettings::default(), &Ablation::ALL, &mut |a| {
        eprintln!("  training {} for {} iterations", a.name(), config.iterations);
        Box::new(NoObserver) as Box<dyn TrainObserver>
    })
    .unwrap();
    EndToEnd {
        runs,
        dataset,
        views,
        config,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn f_of(e: &EndToEnd, a: Ablation) -> f64 {
    e.runs.iter().find(|r| r.ablation == a).unwrap().metrics.f_score
}

fn trend(e: &EndToEnd) -> Outcome {
    let (b, g, p, f) = (f_of(e, Ablation::Baseline), f_of(e, Ablation::Geo), f_of(e, Ablation::Plane), f_of(e, Ablation::Full));
    let pass = f > g.max(p) && g.min(p) > b && f - b >= 0.05;
    outcome(
        pass,
        format!(
            "F baseline {b:.4}, geo {g:.4}, plane {p:.4}, full {f:.4}; {} iterations x 4 in {:.0} s",
            e.config.iterations, e.seconds
        ),
    )
}

fn fields_of(e: &EndToEnd, a: Ablation) -> &sdfrecon::fields::SceneFields {
    &e.runs.iter().find(|r| r.ablation == a).unwrap().outcome.state.fields
}

fn eikonal(e: &EndToEnd) -> Outcome {
    let probes = near_surface_probes(&e.dataset, 10_000, 0.01 * e.config.diagonal(), 13).unwrap();
    let dev = mean_eikonal_deviation(fields_of(e, Ablation::Full), &probes).unwrap();
    outcome(dev < 0.1, format!("mean | |grad f| - 1 | = {dev:.4} over 10^4 near-surface probes"))
}

fn wall_normals(e: &EndToEnd) -> Outcome {
    let share = |a: Ablation| {
        let cfg = a.apply(&e.config);
        let errs = flat_wall_normal_errors(fields_of(e, a), &cfg, &e.dataset, &e.views, 2000, 17).unwrap();
        errs.iter().filter(|&&d| d < 10.0).count() as f64 / errs.len() as f64
    };
    let (full, base) = (share(Ablation::Full), share(Ablation::Baseline));
    outcome(
        full >= 0.8 && base < full,
        format!("within 10 deg: full {:.1}%, baseline {:.1}%", 100.0 * full, 100.0 * base),
    )
}

// ---- 11: reproducibility ----

fn reproducibility() -> Outcome {
    let (ds, _) = synthetic_room(&SynthSetup::default()).unwrap();
    let mut c = e2e_config();
    c.iterations = 20;
    c.deterministic = true;
    let sup = Supervision::prepare(&ds, &c).unwrap();
    let a = train(&ds, &sup, &c, &mut NoObserver).unwrap().state.checkpoint();
    let b = train(&ds, &sup, &c, &mut NoObserver).unwrap().state.checkpoint();
    let same = a == b && a.params.iter().zip(&b.params).all(|(x, y)| x.to_bits() == y.to_bits());
    outcome(same, format!("two {}-step runs, seed {}: bit-identical {same}", c.iterations, c.seed))
}

fn main() {
    let only: Option<HashSet<usize>> = std::env::var("SDFRECON_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // libtest flags (e.g. --nocapture, a name filter) are accepted and ignored
    let wanted = |k: usize| only.as_ref().is_none_or(|s| s.contains(&k));

    type Check = fn() -> Outcome;
    let unit: [(usize, &str, Check); 8] = [
        (1, "autodiff vs finite differences", autodiff),
        (2, "density transform laws", density_laws),
        (3, "quadrature", quadrature),
        (4, "triangulation oracle", triangulation),
        (5, "plane loss", plane_loss),
        (6, "segmentation", segmentation),
        (7, "marching cubes and metrics", meshing_metrics),
        (11, "reproducibility", reproducibility),
    ];
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    for (k, name, f) in unit {
        if wanted(k) {
            let t = Instant::now();
            let o = f();
            results.push((k, name, o, t.elapsed().as_secs_f64()));
        }
    }
    if wanted(8) || wanted(9) || wanted(10) {
        let t = Instant::now();
        let e = end_to_end();
        let base = t.elapsed().as_secs_f64();
        let e2e: [(usize, &str, fn(&EndToEnd) -> Outcome); 3] = [
            (8, "end-to-end ablation trend", trend),
            (9, "Eikonal outcome", eikonal),
            (10, "plane-constraint outcome", wall_normals),
        ];
        for (k, name, f) in e2e {
            if wanted(k) {
                let t = Instant::now();
                let o = f(&e);
                let secs = t.elapsed().as_secs_f64() + if k == 8 { base } else { 0.0 };
                results.push((k, name, o, secs));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    println!();
    for (k, name, o, secs) in &results {
        println!(
            "criterion {k:>2} {} {name}: {} ({secs:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if !failed.is_empty() {
        println!("failed criteria: {failed:?} (analysis in README)");
        if std::env::var_os("SDFRECON_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
