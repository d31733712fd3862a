//! Loss values against naive scalar loops and closed forms.

use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use setsim_core::numgrad::{finite_diff_check, Graph};
use setsim_core::objectives::{
    combined_loss, contrastive_infonce, diversity_regularizer, global_discriminative,
    intra_set_divergence, mmd_gaussian, triplet_hardest, triplet_hardest_node, Bandwidth,
    BatchEmbeddings, LossConfig,
};
use setsim_core::simset::{batch_similarity, EmbeddingSet, SimilarityKind};
use setsim_core::Matrix;

fn unit_sets(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize) -> Vec<EmbeddingSet> {
    (0..n)
        .map(|_| {
            EmbeddingSet::normalized(Matrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0)))
                .unwrap()
        })
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn gd_loop(sets: &[EmbeddingSet], globals: &Matrix, margin: f64, s: f64) -> f64 {
    let mut acc = 0.0;
    let mut count = 0.0;
    for (i, set) in sets.iter().enumerate() {
        for r in 0..set.k() {
            acc += (s * (cos(set.elements().row(r), globals.row(i)) - margin)).exp();
            count += 1.0;
        }
    }
    acc / count
}

fn isd_loop(a: &[EmbeddingSet], b: &[EmbeddingSet], margin: f64, s: f64) -> f64 {
    let mut total = 0.0;
    for (va, vb) in a.iter().zip(b) {
        let m = va.k();
        let mut per = 0.0;
        for j in 0..m {
            for k in j + 1..m {
                per += (s * (cos(va.elements().row(j), va.elements().row(k)) - margin)).exp();
                per += (s * (cos(vb.elements().row(j), vb.elements().row(k)) - margin)).exp();
            }
        }
        total += 2.0 / (m * (m - 1)) as f64 * per;
    }
    total / a.len() as f64
}

fn div_loop(residual: &[Matrix]) -> f64 {
    let mut total = 0.0;
    for r in residual {
        for i in 0..r.rows() {
            for j in 0..r.rows() {
                let target = if i == j { 1.0 } else { 0.0 };
                total += (cos(r.row(i), r.row(j)) - target).powi(2);
            }
        }
    }
    total / residual.len() as f64
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize) -> BatchEmbeddings {
    let mut m = |r: usize| Matrix::from_fn(r, d, |_, _| rng.random_range(-1.0..1.0));
    let image_globals = m(n);
    let text_globals = m(n);
    let image_residual = (0..n).map(|_| m(k)).collect();
    let text_residual = (0..n).map(|_| m(k)).collect();
    BatchEmbeddings {
        image_sets: unit_sets(rng, n, k, d),
        text_sets: unit_sets(rng, n, k, d),
        image_globals,
        text_globals,
        image_residual,
        text_residual,
    }
}

#[test]
fn gd_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random_batch(&mut rng, 5, 4, 6);
    let got = global_discriminative(
        &[
            (&b.image_sets, &b.image_globals),
            (&b.text_sets, &b.text_globals),
        ],
        0.6,
        0.5,
    )
    .unwrap();
    let want = 0.5
        * (gd_loop(&b.image_sets, &b.image_globals, 0.6, 0.5)
            + gd_loop(&b.text_sets, &b.text_globals, 0.6, 0.5));
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn isd_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = random_batch(&mut rng, 5, 4, 6);
    let got = intra_set_divergence(&b.image_sets, &b.text_sets, 0.6, 0.5).unwrap();
    assert!((got - isd_loop(&b.image_sets, &b.text_sets, 0.6, 0.5)).abs() < 1e-12);
}

#[test]
fn diversity_matches_gram_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = random_batch(&mut rng, 5, 4, 6);
    let got = diversity_regularizer(&b.image_residual).unwrap();
    assert!((got - div_loop(&b.image_residual)).abs() < 1e-12);
}

#[test]
fn mmd_separates_shifted_samples() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |shift: f64| {
            Matrix::from_fn(30, 3, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z + shift
            })
        };
        let (x, y, z) = (gauss(0.0), gauss(0.0), gauss(1.5));
        let same = mmd_gaussian(&x, &y, Bandwidth::MedianHeuristic).unwrap();
        let shifted = mmd_gaussian(&x, &z, Bandwidth::MedianHeuristic).unwrap();
        assert!(same < shifted, "seed {seed}: {same} vs {shifted}");
    }
}

#[test]
fn infonce_closed_forms() {
    let sharp = Matrix::identity(4).map(|v| v * 20.0 * 0.05);
    assert!(contrastive_infonce(&sharp, 0.05).unwrap() < 1e-7);
    for n in [1, 3, 7] {
        let got = contrastive_infonce(&Matrix::filled(n, n, 0.3), 0.05).unwrap();
        assert!((got - (n as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn combined_equals_weighted_sum_of_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = random_batch(&mut rng, 4, 3, 5);
    let cfg = LossConfig {
        lambda_mmd: 0.0,
        lambda_div: 0.0,
        ..LossConfig::default()
    };
    let kind = SimilarityKind::MaxMatch;
    let got = combined_loss(&b, &cfg, kind).unwrap();
    let sim = batch_similarity(&b.image_sets, &b.text_sets, kind).unwrap();
    let tri = triplet_hardest(&sim, cfg.triplet_margin).unwrap();
    let gd = global_discriminative(
        &[
            (&b.image_sets, &b.image_globals),
            (&b.text_sets, &b.text_globals),
        ],
        cfg.gd_margin,
        cfg.exp_scale,
    )
    .unwrap();
    let isd =
        intra_set_divergence(&b.image_sets, &b.text_sets, cfg.isd_margin, cfg.exp_scale).unwrap();
    assert!((got.total - (tri + 0.1 * gd + 0.1 * isd)).abs() < 1e-12);
    assert_eq!(got.mmd, None);

    let bare = combined_loss(&b, &LossConfig::triplet_only(cfg.triplet_margin), kind).unwrap();
    assert_eq!(bare.total, tri);
}

#[test]
fn isd_collapse_ratio_is_at_least_exp_s() {
    let s = 0.5;
    let margin = 0.6;
    let collapsed = vec![EmbeddingSet::new(Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]])).unwrap()];
    let orthogonal = vec![EmbeddingSet::new(Matrix::identity(2)).unwrap()];
    let hi = intra_set_divergence(&collapsed, &collapsed, margin, s).unwrap();
    let lo = intra_set_divergence(&orthogonal, &orthogonal, margin, s).unwrap();
    assert!(hi / lo >= s.exp() - 1e-12);
}

#[test]
fn triplet_gradient_only_on_active_hinges() {
    let sim = Matrix::from_rows(&[[0.9, 0.1, 0.2], [0.3, 0.8, 0.75], [0.0, 0.2, 0.9]]);
    let mut g = Graph::new();
    let s = g.param(sim.clone());
    let l = triplet_hardest_node(&mut g, s, 0.2).unwrap();
    let grad = g.backward(l).unwrap().wrt(s);
    // Active: row 1 (0.75 + 0.2 > 0.8) and column 2 (0.75 + 0.2 > 0.9).
    for i in 0..3 {
        for j in 0..3 {
            let involved = (i == 1 && (j == 1 || j == 2)) || (j == 2 && (i == 1 || i == 2));
            assert_eq!(grad[(i, j)] != 0.0, involved, "({i},{j})");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_loss_is_nonnegative(seed in any::<u64>(), n in 2usize..5, k in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_batch(&mut rng, n, k, 4);
        let cfg = LossConfig { lambda_con: 0.3, ..LossConfig::default() };
        for kind in [SimilarityKind::Mil, SimilarityKind::smooth_chamfer(), SimilarityKind::MaxMatch] {
            let br = combined_loss(&b, &cfg, kind).unwrap();
            prop_assert!(br.triplet >= 0.0);
            for t in [br.gd, br.isd, br.mmd, br.div, br.con].into_iter().flatten() {
                prop_assert!(t >= -1e-12, "{br:?}");
            }
        }
    }

    #[test]
    fn gd_monotone_in_margin_and_cosine(seed in any::<u64>(), m in 0.0f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_batch(&mut rng, 3, 2, 4);
        let gd = |sets: &[EmbeddingSet], margin: f64| {
            global_discriminative(&[(sets, &b.image_globals)], margin, 0.5).unwrap()
        };
        prop_assert!(gd(&b.image_sets, m + 0.1) < gd(&b.image_sets, m));
        // Pull one slot towards its global: its cosine rises, so does the loss.
        let mut moved = b.image_sets.clone();
        let e = moved[0].elements();
        let pulled = Matrix::from_fn(e.rows(), e.cols(), |r, c| {
            if r == 0 { 0.5 * e[(r, c)] + 0.5 * b.image_globals[(0, c)] } else { e[(r, c)] }
        });
        let before = cos(e.row(0), b.image_globals.row(0));
        moved[0] = EmbeddingSet::normalized(pulled).unwrap();
        let after = cos(moved[0].elements().row(0), b.image_globals.row(0));
        prop_assume!(after > before + 1e-9);
        prop_assert!(gd(&moved, m) > gd(&b.image_sets, m));
    }

    #[test]
    fn triplet_gradient_matches_finite_differences(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sim = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let err = finite_diff_check(|g, p| triplet_hardest_node(g, p[0], 0.2), &[sim], 1e-6).unwrap();
        prop_assert!(err < 1e-5);
    }
}
