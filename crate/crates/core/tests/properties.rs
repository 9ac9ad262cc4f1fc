mod common;

use cinesync::align::{dtw, sync_group, warp, AlignmentPath};
use cinesync::data::{KeyframeKind, Manifest, Split};
use cinesync::eval::{
    fit_linear, keyframe_stats, match_keyframes, one_shot_keyframes, pca_1d, KeyframeMatch,
};
use cinesync::synth::{generate_dataset, generate_pair, unwrap_phase, SynthConfig};
use common::{normal_equations, power_iteration, random_matrix, read_all, rng};
use ndarray::Axis;
use rand::Rng;

#[test]
fn nearest_phase_correspondence_is_strictly_monotone() {
    let pair = generate_pair(&SynthConfig::default(), 0).unwrap();
    let pa = unwrap_phase(pair.a.latent_phase.as_ref().unwrap());
    let pb = unwrap_phase(pair.b.latent_phase.as_ref().unwrap());
    // Brute force over every frame pair, from the shorter cine to the longer.
    let (short, long) = if pa.len() <= pb.len() {
        (&pa, &pb)
    } else {
        (&pb, &pa)
    };
    let matches: Vec<usize> = short
        .iter()
        .map(|&x| {
            (0..long.len())
                .min_by(|&i, &j| (x - long[i]).abs().total_cmp(&(x - long[j]).abs()))
                .unwrap()
        })
        .collect();
    assert!(
        matches.windows(2).all(|w| w[0] < w[1]),
        "correspondence {matches:?}"
    );
}

#[test]
fn dataset_counts_and_regeneration() {
    let cfg = SynthConfig::default();
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, 10, [0.6, 0.2, 0.2], dir.path()).unwrap();
    let m = Manifest::load(&dir.path().join("manifest.json")).unwrap();
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| m.split(s).count());
    assert_eq!(counts, [6, 2, 2]);
    let files = read_all(dir.path());
    let cines = files
        .iter()
        .filter(|(n, _)| n.ends_with(".json") && n != "manifest.json");
    assert_eq!(cines.count(), 20);

    let again = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, 10, [0.6, 0.2, 0.2], again.path()).unwrap();
    assert_eq!(files, read_all(again.path()));

    let single = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, 1, [1.0, 0.0, 0.0], single.path()).unwrap();
    let m = Manifest::load(&single.path().join("manifest.json")).unwrap();
    assert_eq!(m.split(Split::Train).count(), 1);
    assert_eq!(
        m.split(Split::Val).count() + m.split(Split::Test).count(),
        0
    );
}

#[test]
fn ols_matches_normal_equations() {
    let mut r = rng(11);
    for _ in 0..10 {
        let n = r.random_range(8..30);
        let d = r.random_range(1..5);
        let x = random_matrix(&mut r, n, d, 1.0);
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let model = fit_linear(x.view(), &y, 0.0).unwrap();
        let oracle = normal_equations(x.view(), &y);
        assert!((model.intercept - oracle[0]).abs() < 1e-8);
        for (w, o) in model.weights.iter().zip(&oracle[1..]) {
            assert!((w - o).abs() < 1e-8, "{w} vs {o}");
        }
    }
}

#[test]
fn pca_variance_is_top_eigenvalue() {
    let mut r = rng(12);
    for _ in 0..10 {
        let e = random_matrix(&mut r, 10, 6, 1.0);
        let proj = pca_1d(e.view()).unwrap();
        let n = proj.len() as f64;
        let mean = proj.iter().sum::<f64>() / n;
        let var = proj.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
        let centered = &e - &e.mean_axis(Axis(0)).unwrap();
        let cov = centered.t().dot(&centered) / n;
        let top = power_iteration(&cov, 5000);
        assert!((var - top).abs() < 1e-8 * top.max(1.0), "{var} vs {top}");
        assert!(proj[0] <= proj[proj.len() - 1]);
    }
}

#[test]
fn keyframe_stats_match_recomputation() {
    let mut r = rng(13);
    let ms = 31.25;
    let matches: Vec<KeyframeMatch> = (0..40)
        .map(|i| KeyframeMatch {
            kind: if i % 2 == 0 {
                KeyframeKind::ED
            } else {
                KeyframeKind::ES
            },
            predicted: r.random_range(0..40),
            truth: r.random_range(0..40),
            frame_time_ms: ms,
        })
        .collect();
    let stats = keyframe_stats(&matches).unwrap();
    for (kind, summary) in [(KeyframeKind::ED, stats.ed), (KeyframeKind::ES, stats.es)] {
        let errs: Vec<f64> = matches
            .iter()
            .filter(|m| m.kind == kind)
            .map(|m| m.predicted as f64 - m.truth as f64)
            .collect();
        let n = errs.len() as f64;
        let mae = errs.iter().map(|e| e.abs()).sum::<f64>() / n;
        let mean = errs.iter().sum::<f64>() / n;
        let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert_eq!(summary.n, errs.len());
        assert!((summary.mae_frames - mae).abs() < 1e-12);
        assert!((summary.std_frames - std).abs() < 1e-12);
        assert!((summary.mae_ms - mae * ms).abs() < 1e-9);
        assert!((summary.std_ms - std * ms).abs() < 1e-9);
    }
}

#[test]
fn one_shot_identity_and_slow_motion() {
    let pair = generate_pair(&SynthConfig::default(), 3).unwrap();
    let reference = &pair.a;
    let emb = reference.frames.clone();

    let same = one_shot_keyframes(reference, emb.view(), emb.view()).unwrap();
    assert_eq!(same, reference.keyframes);

    let slow = emb.select(
        Axis(0),
        &(0..2 * emb.nrows()).map(|i| i / 2).collect::<Vec<_>>(),
    );
    let pred = one_shot_keyframes(reference, emb.view(), slow.view()).unwrap();
    for (p, k) in pred.iter().zip(&reference.keyframes) {
        assert_eq!(p.kind, k.kind);
        assert!(
            p.index.abs_diff(2 * k.index) <= 1,
            "{} vs 2*{}",
            p.index,
            k.index
        );
    }
    let matches = match_keyframes(&same, &reference.keyframes, reference.frame_time_ms);
    let stats = keyframe_stats(&matches).unwrap();
    assert_eq!(
        stats.ed.mae_frames + stats.es.mae_frames + stats.ed.std_ms,
        0.0
    );
}

#[test]
fn sync_group_identity_and_independent_targets() {
    let mut r = rng(14);
    let reference = random_matrix(&mut r, 9, 3, 1.0);
    let out = sync_group(reference.view(), &[reference.view()]).unwrap();
    assert_eq!(out[0].warp, (0..9).collect::<Vec<_>>());
    assert_eq!(out[0].path.total_cost, 0.0);

    let t1 = random_matrix(&mut r, 7, 3, 1.0);
    let t2 = random_matrix(&mut r, 12, 3, 1.0);
    let out = sync_group(reference.view(), &[t1.view(), t2.view()]).unwrap();
    for (res, t) in out.iter().zip([&t1, &t2]) {
        res.path.validate(9, t.nrows()).unwrap();
        assert_eq!(res.path, dtw(reference.view(), t.view()).unwrap());
        assert_eq!(res.warp, warp(&res.path, 9).unwrap());
    }
}

#[test]
fn warp_of_random_paths_is_monotone_and_total() {
    let mut r = rng(15);
    for _ in 0..200 {
        let (mut i, mut j) = (0, 0);
        let (n, m) = (r.random_range(1..15), r.random_range(1..15));
        let mut pairs = vec![(0, 0)];
        while (i, j) != (n - 1, m - 1) {
            match r.random_range(0..3) {
                0 if i + 1 < n && j + 1 < m => (i, j) = (i + 1, j + 1),
                1 if i + 1 < n => i += 1,
                _ if j + 1 < m => j += 1,
                _ => i += 1,
            }
            pairs.push((i, j));
        }
        let path = AlignmentPath {
            pairs,
            total_cost: 0.0,
        };
        path.validate(n, m).unwrap();
        let w = warp(&path, n).unwrap();
        assert_eq!(w.len(), n);
        assert!(w.windows(2).all(|x| x[0] <= x[1]));
        assert!(w.iter().all(|&x| x < m));
    }
}

#[test]
fn phase_labels_track_synthetic_keyframes() {
    let pair = generate_pair(&SynthConfig::default(), 5).unwrap();
    let labels = pair.a.phase_labels().unwrap();
    for k in &pair.a.keyframes {
        let want = if k.kind == KeyframeKind::ED { 1.0 } else { 0.0 };
        assert_eq!(labels[k.index], Some(want));
    }
}
