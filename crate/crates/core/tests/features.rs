use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadnext::features::{
    aggregate_node, build_descriptors, circular_stats, coverage_report, fit_normalizer, read_feature_cache,
    sector_area, sector_counts, sector_densities, sector_index, write_feature_cache, Categories, FeatureLayout,
    FeatureParams, Normalizer,
};
use roadnext::testkit::{gen_city, CitySpec};
use roadnext::{NodeId, PlanarPoint, Poi, RoadGraph};

/// Neumaier-compensated sum.
fn exact_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300) || (a - b).abs() < 1e-15
}

fn scene(rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let n = rng.random_range(1..60);
    (0..n)
        .map(|_| (rng.random_range(0.0..150.0), rng.random_range(-PI..PI)))
        .collect()
}

#[test]
fn circular_stats_match_compensated_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let pois = scene(&mut rng);
        let n = pois.len() as f64;
        let mu = exact_sum(pois.iter().map(|p| p.0)) / n;
        let var = exact_sum(pois.iter().map(|p| (p.0 - mu) * (p.0 - mu))) / n;
        let mc = exact_sum(pois.iter().map(|p| p.1.cos())) / n;
        let ms = exact_sum(pois.iter().map(|p| p.1.sin())) / n;
        let s = circular_stats(&pois);
        assert!(close(s.mu_d, mu, 1e-9));
        assert!(close(s.var_d, var, 1e-9));
        assert!(close(s.m_c, mc, 1e-9));
        assert!(close(s.m_s, ms, 1e-9));
        assert!(close(s.r, mc.hypot(ms), 1e-9));
    }
}

#[test]
fn sector_densities_times_area_recover_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let pois = scene(&mut rng);
        for s in [2, 4, 8, 16] {
            let h = sector_densities(&pois, s, 150.0);
            let total: f64 = h.iter().map(|x| x * sector_area(s, 150.0)).sum();
            assert_eq!(total.round(), pois.len() as f64);
            assert!((total - pois.len() as f64).abs() < 1e-9);
            assert_eq!(sector_counts(&pois, s).iter().sum::<usize>(), pois.len());
        }
    }
}

#[test]
fn sector_boundaries() {
    assert_eq!(sector_index(PI, 8), 7);
    assert_eq!(sector_index(-PI + 1e-12, 8), 0);
    assert_eq!(sector_index(0.0, 4), 1);
    assert_eq!(sector_index(1e-12, 4), 2);
    assert_eq!(sector_index(PI / 2.0, 4), 2);
}

#[test]
fn layout_lengths() {
    for s in [2, 4, 8, 16] {
        assert_eq!(FeatureLayout::new(s, 12).dim(), (5 + s + 1) * 12);
    }
    assert_eq!(FeatureLayout::new(8, 12).dim(), 168);
}

fn one_node() -> RoadGraph {
    RoadGraph::new(
        (0.0, 0.0),
        vec![(NodeId(1), PlanarPoint::new(0.0, 0.0)), (NodeId(2), PlanarPoint::new(400.0, 0.0))],
        &[(NodeId(1), NodeId(2))],
    )
    .unwrap()
}

#[test]
fn descriptor_slots_and_masks() {
    let g = one_node();
    let cats = Categories::default();
    let params = FeatureParams::default();
    let layout = FeatureLayout::new(8, 12);
    let pois = vec![
        Poi { id: 1, category: 3, pos: PlanarPoint::new(0.0, 100.0) },
        Poi { id: 2, category: 3, pos: PlanarPoint::new(0.0, -100.0) },
        Poi { id: 3, category: 0, pos: PlanarPoint::new(149.0, 0.0) },
        Poi { id: 4, category: 5, pos: PlanarPoint::new(151.0, 0.0) },
    ];
    let d = aggregate_node(&g, NodeId(1), &pois, &params, &cats).unwrap();
    assert_eq!(d.x.len(), 168);
    // two opposed POIs cancel on the circle
    let off = layout.category_offset(3);
    assert!((d.x[off] - 100.0).abs() < 1e-12);
    assert!(d.x[off + 1].abs() < 1e-12);
    assert!(d.x[off + 4] < 1e-12);
    assert_eq!(d.x[layout.presence_slot(3)], 1.0);
    // out of radius: the whole block is absent
    let off5 = layout.category_offset(5);
    assert!(d.x[off5..off5 + layout.per_category()].iter().all(|&v| v == 0.0));
    assert!(d.mask[off5..off5 + layout.per_category()].iter().all(|&m| !m));
    // masks mark exactly the populated sectors
    let occupied: Vec<bool> = layout.sector_range(0).map(|k| d.mask[k]).collect();
    assert_eq!(occupied.iter().filter(|&&m| m).count(), 1);
    assert_eq!(d.geo[0], 1.0 / 8.0);
}

#[test]
fn poi_order_does_not_matter() {
    let g = one_node();
    let cats = Categories::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pois: Vec<Poi> = (0..40)
        .map(|i| Poi {
            id: i,
            category: rng.random_range(0..12),
            pos: PlanarPoint::new(rng.random_range(-150.0..150.0), rng.random_range(-150.0..150.0)),
        })
        .collect();
    let a = aggregate_node(&g, NodeId(1), &pois, &FeatureParams::default(), &cats).unwrap();
    pois.reverse();
    let b = aggregate_node(&g, NodeId(1), &pois, &FeatureParams::default(), &cats).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_params_and_unknown_nodes() {
    let g = one_node();
    let cats = Categories::default();
    let bad = FeatureParams { radius: 0.0, sectors: 8 };
    assert!(aggregate_node(&g, NodeId(1), &[], &bad, &cats).is_err());
    assert!(aggregate_node(&g, NodeId(9), &[], &FeatureParams::default(), &cats).is_err());
}

#[test]
fn normalizer_zero_mean_unit_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|_| vec![rng.random_range(0.0..10.0), 3.0, rng.random_range(-1.0..1.0)])
        .collect();
    let n = Normalizer::fit(&rows).unwrap();
    let z: Vec<Vec<f64>> = rows.iter().map(|r| n.apply(r)).collect();
    for c in [0, 2] {
        let mean = z.iter().map(|r| r[c]).sum::<f64>() / 200.0;
        let var = z.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / 200.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }
    // constant columns stay finite
    assert!(z.iter().all(|r| r[1] == 0.0));
    assert!(Normalizer::fit(&rows[..1]).is_err());
}

#[test]
fn city_descriptors_cache_round_trip() {
    let city = gen_city(&CitySpec::default(), 11).unwrap();
    let table = build_descriptors(&city.graph, &city.pois, &FeatureParams::default(), &city.categories).unwrap();
    assert_eq!(table.rows.len(), city.graph.node_count());
    assert_eq!(table.dim(), 168);
    for row in &table.rows {
        for (v, m) in row.x.iter().zip(&row.mask) {
            assert!(v.is_finite());
            if !m {
                assert_eq!(*v, 0.0);
            }
        }
    }
    let refs: Vec<_> = table.rows.iter().collect();
    fit_normalizer(&refs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    write_feature_cache(&table, &path).unwrap();
    assert_eq!(read_feature_cache(&path).unwrap(), table);
    let threads = |n: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| build_descriptors(&city.graph, &city.pois, &FeatureParams::default(), &city.categories).unwrap())
    };
    assert_eq!(threads(1), threads(3));
}

#[test]
fn coverage_matches_scan_and_is_monotone() {
    let city = gen_city(&CitySpec::default(), 12).unwrap();
    let radii = [50.0, 100.0, 150.0, 200.0, 250.0, 300.0];
    let rows = coverage_report(&city.graph, &city.pois, &radii).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].coverage >= w[0].coverage);
    }
    for row in &rows {
        let counts: Vec<usize> = city
            .pois
            .iter()
            .map(|p| {
                (0..city.graph.node_count())
                    .filter(|&i| city.graph.position_at(i).dist2(&p.pos) <= row.radius * row.radius)
                    .count()
            })
            .collect();
        let covered = counts.iter().filter(|&&c| c > 0).count();
        assert!((row.coverage - covered as f64 / city.pois.len() as f64).abs() < 1e-12);
        assert!(row.marginal_gain >= 0.0 && row.marginal_gain <= 1.0);
    }
    assert!(coverage_report(&city.graph, &[], &radii).is_err());
    assert!(coverage_report(&city.graph, &city.pois, &[100.0, 50.0]).is_err());
}

proptest! {
    #[test]
    fn resultant_length_in_unit_interval(angles in prop::collection::vec(-PI..PI, 1..40)) {
        let pois: Vec<(f64, f64)> = angles.iter().map(|&a| (10.0, a)).collect();
        let s = circular_stats(&pois);
        prop_assert!(s.r >= 0.0 && s.r <= 1.0);
        prop_assert!(s.var_d.abs() < 1e-9);
    }

    #[test]
    fn rotation_shifts_circular_mean(angles in prop::collection::vec(-PI..PI, 1..20), rot in -PI..PI) {
        let a: Vec<(f64, f64)> = angles.iter().map(|&t| (1.0, t)).collect();
        let b: Vec<(f64, f64)> = angles.iter().map(|&t| (1.0, t + rot)).collect();
        let (sa, sb) = (circular_stats(&a), circular_stats(&b));
        prop_assert!((sa.r - sb.r).abs() < 1e-9);
        let (c, s) = (rot.cos(), rot.sin());
        prop_assert!((sb.m_c - (sa.m_c * c - sa.m_s * s)).abs() < 1e-9);
        prop_assert!((sb.m_s - (sa.m_c * s + sa.m_s * c)).abs() < 1e-9);
    }

    #[test]
    fn sector_index_matches_floor(theta in -PI..PI, s in prop::sample::select(vec![2usize, 4, 8, 16])) {
        let k = sector_index(theta, s);
        let width = 2.0 * PI / s as f64;
        let lo = -PI + k as f64 * width;
        prop_assert!(theta > lo - 1e-12 && theta <= lo + width + 1e-12);
    }
}
