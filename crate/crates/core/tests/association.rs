mod oracles;

use ndarray::Array2;
use panotrack::assignment::min_cost_assignment;
use panotrack::association::{
    hybrid_cost, solve_assignment, staged_associate, AssociationConfig, AssociationStats, CostMatrix,
    APPEARANCE_GATE,
};
use panotrack::feedback::FlexiTrackInstance;
use panotrack::{Detection, PanoBox, TrackId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| panotrack::rng::normal(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn scene(
    rng: &mut impl Rng,
    n_tracks: usize,
    n_dets: usize,
) -> (Vec<FlexiTrackInstance>, Vec<Detection>) {
    let tracks: Vec<FlexiTrackInstance> = (0..n_tracks)
        .map(|i| {
            FlexiTrackInstance::new(
                TrackId(i as u64 + 1),
                unit(rng, 6),
                oracles::random_box(rng, 0.05, 0.3),
                0.9,
            )
        })
        .collect();
    let dets = (0..n_dets)
        .map(|j| {
            let b = if j < n_tracks && rng.random_bool(0.7) {
                let a = tracks[j].anchor;
                PanoBox::new(a.cu() + rng.random_range(-0.02..0.02), a.cv(), a.w(), a.h()).unwrap()
            } else {
                oracles::random_box(rng, 0.05, 0.3)
            };
            Detection::new(b, rng.random_range(0.0..1.0), unit(rng, 6))
        })
        .collect();
    (tracks, dets)
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn square_totals_equal_permutation_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 1..=7 {
        for _ in 0..40 {
            let c = Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..1.0));
            let a = min_cost_assignment(&c);
            let pairs: Vec<(usize, usize)> =
                a.iter().enumerate().map(|(i, j)| (i, j.expect("square is complete"))).collect();
            assert_eq!(oracles::row_order_total(&c, &pairs), oracles::brute_min_cost(&c));
        }
    }
}

#[test]
fn integer_costs_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(2..=6);
        let c = Array2::from_shape_fn((n, n), |_| rng.random_range(0..4) as f64);
        let a = min_cost_assignment(&c);
        let pairs: Vec<(usize, usize)> = a.iter().enumerate().map(|(i, j)| (i, j.unwrap())).collect();
        assert_eq!(oracles::row_order_total(&c, &pairs), oracles::brute_min_cost(&c));
    }
}

#[test]
fn masked_rectangular_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..300 {
        let rows = rng.random_range(0..=5);
        let cols = rng.random_range(0..=5);
        let costs = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..1.0));
        let mask = Array2::from_shape_fn((rows, cols), |_| rng.random_bool(0.3));
        let max_cost = rng.random_range(0.3..1.0);
        let r = solve_assignment(&CostMatrix::new(costs.clone(), mask.clone()).unwrap(), max_cost);
        let best = oracles::best_matching(rows, cols, &|i, j| !mask[(i, j)], &|i, j| costs[(i, j)]);
        let want: Vec<(usize, usize)> =
            best.into_iter().filter(|&(i, j)| costs[(i, j)] <= max_cost).collect();
        assert_eq!(r.matches, want);
    }
}

#[test]
fn hybrid_cost_matches_per_cell_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = AssociationConfig::default();
    for _ in 0..50 {
        let (tracks, dets) = scene(&mut rng, 4, 6);
        let c = hybrid_cost(&tracks, &dets, &cfg);
        assert_eq!((c.rows(), c.cols()), (4, 6));
        for i in 0..4 {
            for j in 0..6 {
                let iou = oracles::analytic_iou(&tracks[i].anchor, &dets[j].bbox);
                let cos = oracle_cosine(&tracks[i].feature, &dets[j].embedding);
                let want = cfg.w_iou * (1.0 - iou) + cfg.w_app * (1.0 - cos) / 2.0;
                assert!((c.costs[(i, j)] - want).abs() < 1e-9);
                assert_eq!(c.gate_mask[(i, j)], iou == 0.0 && cos < APPEARANCE_GATE);
            }
        }
    }
}

#[test]
fn staged_matches_two_stage_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = AssociationConfig::default();
    for _ in 0..200 {
        let nt = rng.random_range(0..=4);
        let nd = rng.random_range(0..=5);
        let (tracks, dets) = scene(&mut rng, nt, nd);
        let r = staged_associate(&tracks, &dets, &cfg, &mut AssociationStats::default());

        let high: Vec<usize> = (0..nd).filter(|&j| dets[j].score >= cfg.tau_split).collect();
        let low: Vec<usize> = (0..nd).filter(|&j| dets[j].score < cfg.tau_split).collect();
        let hc = hybrid_cost(&tracks, &dets, &cfg);
        let first: Vec<(usize, usize)> = oracles::best_matching(
            nt,
            high.len(),
            &|i, k| !hc.gate_mask[(i, high[k])],
            &|i, k| hc.costs[(i, high[k])],
        )
        .into_iter()
        .map(|(i, k)| (i, high[k]))
        .filter(|&(i, j)| hc.costs[(i, j)] <= cfg.max_cost)
        .collect();
        let rest: Vec<usize> = (0..nt).filter(|i| !first.iter().any(|m| m.0 == *i)).collect();
        let iou = |i: usize, j: usize| oracles::analytic_iou(&tracks[i].anchor, &dets[j].bbox);
        let second: Vec<(usize, usize)> = oracles::best_matching(
            rest.len(),
            low.len(),
            &|a, k| iou(rest[a], low[k]) > 0.0,
            &|a, k| 1.0 - iou(rest[a], low[k]),
        )
        .into_iter()
        .map(|(a, k)| (rest[a], low[k]))
        .filter(|&(i, j)| 1.0 - iou(i, j) <= cfg.max_cost_low)
        .collect();
        let mut want = [first, second].concat();
        want.sort_unstable();
        assert_eq!(r.matches, want);
    }
}

#[test]
fn occluded_track_recovered_in_second_stage() {
    let b = |cu: f64| PanoBox::new(cu, 0.5, 0.06, 0.2).unwrap();
    let e = |k: usize| {
        let mut v = vec![0.0; 4];
        v[k] = 1.0;
        v
    };
    let tracks: Vec<FlexiTrackInstance> = (0..3)
        .map(|i| FlexiTrackInstance::new(TrackId(i + 1), e(i as usize), b(0.2 + 0.3 * i as f64), 0.9))
        .collect();
    let dets = vec![
        Detection::new(b(0.205), 0.9, e(0)),
        Detection::new(b(0.5), 0.85, e(1)),
        Detection::new(b(0.81), 0.3, e(3)),
        Detection::new(b(0.95), 0.2, e(3)),
    ];
    let cfg = AssociationConfig::default();
    let mut stats = AssociationStats::default();
    let r = staged_associate(&tracks, &dets, &cfg, &mut stats);
    assert_eq!(r.matches, vec![(0, 0), (1, 1), (2, 2)]);
    assert!(r.unmatched_tracks.is_empty());
    assert_eq!(r.unmatched_detections, vec![3]);
    assert_eq!(stats.cost_matrices, 2);
}

proptest! {
    #[test]
    fn result_is_a_partition(seed in any::<u64>(), nt in 0usize..6, nd in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tracks, dets) = scene(&mut rng, nt, nd);
        let r = staged_associate(&tracks, &dets, &AssociationConfig::default(), &mut AssociationStats::default());
        prop_assert_eq!(r.matches.len() + r.unmatched_tracks.len(), nt);
        prop_assert_eq!(r.matches.len() + r.unmatched_detections.len(), nd);
        let mut ti: Vec<usize> = r.matches.iter().map(|m| m.0).chain(r.unmatched_tracks.iter().copied()).collect();
        let mut dj: Vec<usize> = r.matches.iter().map(|m| m.1).chain(r.unmatched_detections.iter().copied()).collect();
        ti.sort_unstable();
        dj.sort_unstable();
        prop_assert_eq!(ti, (0..nt).collect::<Vec<_>>());
        prop_assert_eq!(dj, (0..nd).collect::<Vec<_>>());
    }

    #[test]
    fn hybrid_cost_is_permutation_equivariant(seed in any::<u64>(), nt in 1usize..6, nd in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tracks, dets) = scene(&mut rng, nt, nd);
        let mut pt: Vec<usize> = (0..nt).collect();
        let mut pd: Vec<usize> = (0..nd).collect();
        oracles::shuffle(&mut rng, &mut pt);
        oracles::shuffle(&mut rng, &mut pd);
        let t2: Vec<FlexiTrackInstance> = pt.iter().map(|&i| tracks[i].clone()).collect();
        let d2: Vec<Detection> = pd.iter().map(|&j| dets[j].clone()).collect();
        let cfg = AssociationConfig::default();
        let c = hybrid_cost(&tracks, &dets, &cfg);
        let c2 = hybrid_cost(&t2, &d2, &cfg);
        for i in 0..nt {
            for j in 0..nd {
                prop_assert_eq!(c2.costs[(i, j)], c.costs[(pt[i], pd[j])]);
                prop_assert_eq!(c2.gate_mask[(i, j)], c.gate_mask[(pt[i], pd[j])]);
            }
        }
    }

    #[test]
    fn zero_split_is_single_stage(seed in any::<u64>(), nt in 0usize..6, nd in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tracks, dets) = scene(&mut rng, nt, nd);
        let cfg = AssociationConfig { tau_split: 0.0, ..AssociationConfig::default() };
        let mut stats = AssociationStats::default();
        let staged = staged_associate(&tracks, &dets, &cfg, &mut stats);
        let single = solve_assignment(&hybrid_cost(&tracks, &dets, &cfg), cfg.max_cost);
        prop_assert_eq!(staged, single);
        prop_assert_eq!(stats.cost_matrices, 1);
    }
}
