use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadnext::evaluation::{
    acc_at_k, example_auc, mean_roc_auc, mrr, paired_bootstrap, perturb_coordinates, perturb_poi, rank_of_index,
    rank_of_label, summarize_robustness, CohortMetrics, PerturbationKind, RobustnessRow,
};
use roadnext::features::{build_descriptors, FeatureParams};
use roadnext::testkit::{gen_city, simulate_walkers, CitySpec, WalkerPolicy};
use roadnext::NodeId;

/// A random score table; integer scores make ties common.
fn table(rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let c = rng.random_range(1..8);
    let ties = rng.random_bool(0.5);
    let scores = (0..c)
        .map(|_| if ties { rng.random_range(0..3) as f64 } else { rng.random_range(-5.0..5.0) })
        .collect();
    (scores, rng.random_range(0..c))
}

/// Rank by sorting: the label goes after every candidate it ties with.
fn sorted_rank(scores: &[f64], label: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then((a == label).cmp(&(b == label)))
    });
    order.iter().position(|&i| i == label).unwrap() + 1
}

/// AUC over explicit (positive, negative) pairs in integer halves.
fn pair_auc(scores: &[f64], label: usize) -> Option<f64> {
    if scores.len() < 2 {
        return None;
    }
    let halves: u64 = (0..scores.len())
        .filter(|&j| j != label)
        .map(|j| match scores[label].partial_cmp(&scores[j]).unwrap() {
            std::cmp::Ordering::Greater => 2,
            std::cmp::Ordering::Equal => 1,
            std::cmp::Ordering::Less => 0,
        })
        .sum();
    Some(halves as f64 / (2 * (scores.len() - 1)) as f64)
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tables: Vec<(Vec<f64>, usize)> = (0..10_000).map(|_| table(&mut rng)).collect();
    let ranks: Vec<usize> = tables.iter().map(|(s, l)| rank_of_index(s, *l).unwrap()).collect();
    for ((s, l), r) in tables.iter().zip(&ranks) {
        assert_eq!(*r, sorted_rank(s, *l), "{s:?} label {l}");
        let auc = example_auc(s, *l);
        match (auc, pair_auc(s, *l)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
            (a, b) => assert_eq!(a, b),
        }
    }
    for k in [1, 3, 5] {
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        assert_eq!(acc_at_k(&ranks, k).unwrap(), hits as f64 / ranks.len() as f64);
    }
    let recip: f64 = ranks.iter().map(|&r| 1.0 / r as f64).sum();
    assert_eq!(mrr(&ranks).unwrap(), recip / ranks.len() as f64);
    let pairs: Vec<f64> = tables.iter().filter_map(|(s, l)| pair_auc(s, *l)).collect();
    let mean = mean_roc_auc(tables.iter().map(|(s, l)| (s.as_slice(), *l))).unwrap();
    assert!((mean - pairs.iter().sum::<f64>() / pairs.len() as f64).abs() < 1e-12);
}

#[test]
fn metric_edge_cases() {
    assert_eq!(rank_of_index(&[1.0, 1.0, 1.0], 0).unwrap(), 3);
    assert_eq!(rank_of_index(&[3.0, 1.0, 2.0], 0).unwrap(), 1);
    assert!(rank_of_index(&[1.0], 1).is_err());
    let ids = [NodeId(4), NodeId(9)];
    assert_eq!(rank_of_label(&[0.1, 0.7], &ids, NodeId(9)).unwrap(), 1);
    assert!(rank_of_label(&[0.1, 0.7], &ids, NodeId(5)).is_err());
    assert!(acc_at_k(&[], 1).is_err());
    assert!(mrr(&[]).is_err());
    assert_eq!(example_auc(&[2.0], 0), None);
    assert!(mean_roc_auc(std::iter::once((&[1.0][..], 0usize))).is_err());
    let m = CohortMetrics::from_ranks(&[1, 2, 4, 6]).unwrap();
    assert_eq!((m.acc1, m.acc3, m.acc5, m.n), (0.25, 0.5, 0.75, 4));
}

#[test]
fn bootstrap_recovers_a_known_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2000;
    let a: Vec<usize> = (0..n).map(|_| if rng.random_bool(0.7) { 1 } else { 2 }).collect();
    let b: Vec<usize> = (0..n).map(|_| if rng.random_bool(0.5) { 1 } else { 2 }).collect();
    let boot = paired_bootstrap(&a, &b, 2000, 1).unwrap();
    assert!(boot.ci.0 < boot.delta && boot.delta < boot.ci.1);
    assert!(boot.ci.0 > 0.1 && boot.ci.1 < 0.3);
    assert!(boot.p_value < 0.01);
    let same = paired_bootstrap(&a, &a, 500, 1).unwrap();
    assert_eq!((same.delta, same.ci), (0.0, (0.0, 0.0)));
    assert_eq!(same.p_value, 1.0);
    assert_eq!(paired_bootstrap(&a, &b, 2000, 1).unwrap(), boot);
    assert!(paired_bootstrap(&a, &b[..10], 10, 1).is_err());
}

#[test]
fn coordinate_noise_has_rayleigh_displacement() {
    let city = gen_city(&CitySpec::default(), 1).unwrap();
    let sim = simulate_walkers(&city, &WalkerPolicy::default(), 20, 50, 2).unwrap();
    let sigma = 10.0;
    let noisy = perturb_coordinates(&sim.streams, sigma, 5);
    let disp: Vec<f64> = sim
        .streams
        .iter()
        .zip(&noisy)
        .flat_map(|(a, b)| a.samples.iter().zip(&b.samples).map(|(x, y)| x.pos.dist(&y.pos)))
        .collect();
    let mean = disp.iter().sum::<f64>() / disp.len() as f64;
    let want = sigma * (std::f64::consts::PI / 2.0).sqrt();
    assert!((mean - want).abs() < 0.05 * want, "{mean} vs {want}");
    assert_eq!(perturb_coordinates(&sim.streams, 0.0, 5), sim.streams);
    assert_eq!(perturb_coordinates(&sim.streams, sigma, 5), noisy);
}

#[test]
fn poi_noise_conserves_sector_mass() {
    let city = gen_city(&CitySpec::default(), 1).unwrap();
    let table = build_descriptors(&city.graph, &city.pois, &FeatureParams::default(), &city.categories).unwrap();
    assert_eq!(perturb_poi(&table, 0.0, 1), table);
    let noisy = perturb_poi(&table, 0.25, 1);
    let layout = table.layout;
    let mut changed = false;
    for (a, b) in table.rows.iter().zip(&noisy.rows) {
        for c in 0..layout.categories {
            let r = layout.sector_range(c);
            let (ma, mb): (f64, f64) = (a.x[r.clone()].iter().sum(), b.x[r.clone()].iter().sum());
            assert!((ma - mb).abs() <= 1e-12 * ma.max(1.0));
            assert!(b.x[r.clone()].iter().all(|&v| v >= 0.0));
            let off = layout.category_offset(c);
            assert_eq!(a.x[off..off + 5], b.x[off..off + 5]);
            assert_eq!(a.x[layout.presence_slot(c)], b.x[layout.presence_slot(c)]);
            changed |= a.x[r] != b.x[layout.sector_range(c)];
        }
        assert_eq!(a.mask, b.mask);
    }
    assert!(changed);
}

#[test]
fn robustness_summary_skips_empty_trials() {
    let row = |level: f64, acc1: f64| RobustnessRow {
        kind: PerturbationKind::Coordinate,
        level,
        trial: 0,
        acc1,
        acc3: acc1,
        acc5: acc1,
        mrr: acc1,
    };
    let s = summarize_robustness(&[row(0.0, 0.5), row(10.0, 0.4), row(10.0, 0.2), row(10.0, f64::NAN)]);
    assert_eq!(s.len(), 2);
    assert_eq!(s[0], (0.0, 0.5, 0.0));
    assert!((s[1].1 - 0.3).abs() < 1e-12 && (s[1].2 - 0.1).abs() < 1e-12);
    assert_eq!(PerturbationKind::Poi.default_levels().len(), 6);
    assert!("gps".parse::<PerturbationKind>().is_err());
}

proptest! {
    #[test]
    fn rank_and_auc_are_consistent(scores in prop::collection::vec(-3i32..3, 2..9), pick in 0usize..8) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let l = pick % s.len();
        let r = rank_of_index(&s, l).unwrap();
        let auc = example_auc(&s, l).unwrap();
        prop_assert!(r >= 1 && r <= s.len());
        prop_assert!((0.0..=1.0).contains(&auc));
        // a unique maximum ranks first with AUC 1
        let unique_max = s.iter().enumerate().all(|(j, v)| j == l || *v < s[l]);
        prop_assert_eq!(unique_max, r == 1 && auc == 1.0);
    }
}
