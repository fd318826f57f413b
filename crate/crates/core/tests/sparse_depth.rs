use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdfrecon::sparse_depth::triangulate_matches;
use sdfrecon::synth::{default_cameras, make_correspondences, SceneSpec};
use sdfrecon::training::TrainConfig;

fn max_gap() -> f64 {
    let c = TrainConfig::desk();
    c.max_gap_fraction * c.diagonal()
}

/// Pairs each accepted depth sample with the true ray distance, by matching
/// the sample's pixel back to the correspondence it came from.
fn errors(pixel_noise: f64, seed: u64, gap: f64) -> (Vec<f64>, usize) {
    let scene = SceneSpec::default_room();
    let cams = default_cameras();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = make_correspondences(&scene, &cams, 400, pixel_noise, 2, &mut rng);
    let mut errs = Vec::new();
    for (c, &(da, db)) in m.matches.iter().zip(&m.depths) {
        let map = triangulate_matches(std::slice::from_ref(c), &cams, gap).unwrap();
        if let (Some(a), Some(b)) = (map.views[c.view_a].first(), map.views[c.view_b].first()) {
            errs.push((a.d_app - da).abs());
            errs.push((b.d_app - db).abs());
        }
    }
    (errs, m.matches.len())
}

#[test]
fn noiseless_matches_recover_true_depth() {
    let (errs, n) = errors(0.0, 3, max_gap());
    assert!(n > 1000, "{n}");
    assert_eq!(errs.len(), 2 * n, "every noiseless match is accepted");
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn half_pixel_noise_keeps_median_error_small() {
    let diameter = 2.0 * 3f64.sqrt();
    let (mut errs, _) = errors(0.5, 5, max_gap());
    assert!(errs.len() > 500, "{}", errs.len());
    errs.sort_by(|a, b| a.total_cmp(b));
    let median = errs[errs.len() / 2];
    assert!(median < 0.02 * diameter, "median {median} vs {}", 0.02 * diameter);
}

#[test]
fn swapping_views_exchanges_depths() {
    let scene = SceneSpec::default_room();
    let cams = default_cameras();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = make_correspondences(&scene, &cams, 50, 0.5, 2, &mut rng);
    for c in m.matches.iter().take(200) {
        let mut s = *c;
        std::mem::swap(&mut s.view_a, &mut s.view_b);
        std::mem::swap(&mut s.ua, &mut s.ub);
        std::mem::swap(&mut s.va, &mut s.vb);
        let a = triangulate_matches(&[*c], &cams, f64::INFINITY).unwrap();
        let b = triangulate_matches(&[s], &cams, f64::INFINITY).unwrap();
        let (x, y) = (&a.views[c.view_a], &b.views[c.view_a]);
        assert_eq!(x.len(), y.len());
        for (p, q) in x.iter().zip(y) {
            assert!((p.d_app - q.d_app).abs() < 1e-9 && (p.gap - q.gap).abs() < 1e-9);
        }
    }
}

#[test]
fn corrupted_match_is_discarded() {
    let scene = SceneSpec::default_room();
    let cams = default_cameras();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = make_correspondences(&scene, &cams, 20, 0.0, 1, &mut rng);
    let mut bad = m.matches[0];
    bad.vb = (bad.vb + 12.0).min(63.0).max(bad.vb - 12.0);
    if (bad.vb - m.matches[0].vb).abs() < 1.0 {
        bad.vb -= 12.0;
    }
    let map = triangulate_matches(&[bad], &cams, max_gap()).unwrap();
    assert_eq!(map.total(), 0);
    assert_eq!(map.stats.gap_rejected + map.stats.behind_camera, 1);
}
