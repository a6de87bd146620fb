use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadnext::features::Categories;
use roadnext::graph::{
    assign_pois, bearing, load_graph, load_pois, project_coords, save_graph, save_pois, unproject_coords, wrap_angle,
};
use roadnext::testkit::{gen_city, CitySpec};
use roadnext::{Error, NodeId, PlanarPoint, Poi, RoadGraph};

fn pt(x: f64, y: f64) -> PlanarPoint {
    PlanarPoint::new(x, y)
}

fn grid(n: usize, spacing: f64) -> RoadGraph {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let id = (r * n + c) as u64;
            nodes.push((NodeId(id), pt(c as f64 * spacing, r as f64 * spacing)));
            if c + 1 < n {
                edges.push((NodeId(id), NodeId(id + 1)));
            }
            if r + 1 < n {
                edges.push((NodeId(id), NodeId(id + n as u64)));
            }
        }
    }
    RoadGraph::new((0.0, 0.0), nodes, &edges).unwrap()
}

#[test]
fn two_node_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    std::fs::write(
        &path,
        r#"{"nodes":[{"id":10,"lat":39.9,"lon":116.4},{"id":11,"lat":39.901,"lon":116.4}],"edges":[[10,11]]}"#,
    )
    .unwrap();
    let g = load_graph(&path).unwrap();
    assert_eq!(g.node_count(), 2);
    assert_eq!(g.edge_count(), 1);
    assert_eq!(g.neighbors(NodeId(10)), vec![NodeId(11)]);
    assert_eq!(g.neighbors(NodeId(11)), vec![NodeId(10)]);
}

#[test]
fn dangling_endpoint_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    std::fs::write(
        &path,
        r#"{"nodes":[{"id":1,"lat":0,"lon":0},{"id":2,"lat":0,"lon":0.001}],"edges":[[1,3]]}"#,
    )
    .unwrap();
    let err = load_graph(&path).unwrap_err();
    assert!(matches!(err, Error::DanglingEndpoint { missing: NodeId(3), .. }));
    assert!(err.to_string().contains("dangling endpoint"));
}

#[test]
fn self_loop_rejected() {
    let err = RoadGraph::new((0.0, 0.0), vec![(NodeId(1), pt(0.0, 0.0))], &[(NodeId(1), NodeId(1))]).unwrap_err();
    assert!(matches!(err, Error::SelfLoop { .. }));
}

#[test]
fn synthetic_grid_file_round_trip() {
    let city = gen_city(&CitySpec::default(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("graph.json");
    save_graph(&city.graph, &path).unwrap();
    let g = load_graph(&path).unwrap();
    // an n x n grid has 2n(n - 1) edges
    assert_eq!(g.node_count(), 400);
    assert_eq!(g.edge_count(), 2 * 20 * 19);
    for (a, b) in g.ids().iter().zip(city.graph.ids()) {
        assert_eq!(a, b);
        assert!(g.position(*a).unwrap().dist(&city.graph.position(*b).unwrap()) < 1e-6);
    }
}

#[test]
fn poi_file_round_trip_and_unknown_category() {
    let cats = Categories::default();
    let origin = (39.9, 116.4);
    let pois = vec![
        Poi { id: 1, category: 0, pos: pt(12.5, -40.0) },
        Poi { id: 2, category: 11, pos: pt(-300.0, 77.0) },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pois.csv");
    save_pois(&pois, &cats, origin, &path).unwrap();
    let back = load_pois(&path, &cats, origin).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in pois.iter().zip(&back) {
        assert_eq!((a.id, a.category), (b.id, b.category));
        assert!(a.pos.dist(&b.pos) < 1e-6);
    }
    std::fs::write(&path, "id,category,lat,lon\n1,casino,39.9,116.4\n").unwrap();
    let err = load_pois(&path, &cats, origin).unwrap_err();
    assert!(err.to_string().contains("casino"), "{err}");
}

fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let r = 6_371_008.8;
    let (la1, lo1) = (a.0.to_radians(), a.1.to_radians());
    let (la2, lo2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * r * h.sqrt().asin()
}

#[test]
fn planar_distance_tracks_great_circle_at_5km() {
    let origin = (39.9, 116.4);
    for k in 0..32 {
        let a = k as f64 * PI / 16.0;
        let p = pt(5000.0 * a.cos(), 5000.0 * a.sin());
        let (lat, lon) = unproject_coords(p, origin);
        let q = project_coords(lat, lon, origin).unwrap();
        assert!(p.dist(&q) < 1e-6);
        // the spherical model and the per-degree constants disagree by < 1%
        let err = (haversine(origin, (lat, lon)) - 5000.0).abs();
        assert!(err < 50.0, "angle {a}: {err} m");
    }
}

#[test]
fn assignment_matches_brute_force() {
    let g = grid(12, 100.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pois: Vec<Poi> = (0..1000)
        .map(|i| Poi {
            id: i,
            category: rng.random_range(0..12),
            pos: pt(rng.random_range(-150.0..1250.0), rng.random_range(-150.0..1250.0)),
        })
        .collect();
    // exact ties on cell midlines
    pois.push(Poi { id: 5000, category: 0, pos: pt(50.0, 0.0) });
    pois.push(Poi { id: 5001, category: 0, pos: pt(350.0, 250.0) });
    let got = assign_pois(&g, &pois);
    let mut want: std::collections::BTreeMap<NodeId, Vec<u64>> = g.ids().iter().map(|id| (*id, vec![])).collect();
    for p in &pois {
        let best = g
            .ids()
            .iter()
            .min_by(|a, b| {
                let da = g.position(**a).unwrap().dist2(&p.pos);
                let db = g.position(**b).unwrap().dist2(&p.pos);
                da.total_cmp(&db).then(a.cmp(b))
            })
            .unwrap();
        want.get_mut(best).unwrap().push(p.id);
    }
    let got: std::collections::BTreeMap<NodeId, Vec<u64>> =
        got.into_iter().map(|(k, v)| (k, v.iter().map(|p| p.id).collect())).collect();
    assert_eq!(got, want);
    assert_eq!(want[&NodeId(0)].last(), Some(&5000));
}

proptest! {
    #[test]
    fn wrap_angle_range(a in -100.0..100.0f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        let turns = (a - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn bearing_matches_atan2(x in -1e3..1e3f64, y in -1e3..1e3f64) {
        prop_assume!(x != 0.0 || y != 0.0);
        let b = bearing(pt(0.0, 0.0), pt(x, y)).unwrap();
        prop_assert!((b.cos() - x / x.hypot(y)).abs() < 1e-12);
        prop_assert!((b.sin() - y / x.hypot(y)).abs() < 1e-12);
    }

    #[test]
    fn spatial_queries_match_scan(x in -200.0..1000.0f64, y in -200.0..1000.0f64, r in 1.0..300.0f64) {
        let g = grid(8, 110.0);
        let p = pt(x, y);
        let (ix, d) = g.nearest_node(p).unwrap();
        let best = (0..g.node_count()).map(|i| g.position_at(i).dist(&p)).fold(f64::INFINITY, f64::min);
        prop_assert!((d - best).abs() < 1e-9);
        prop_assert!((g.position_at(ix).dist(&p) - best).abs() < 1e-9);
        let mut within = g.nodes_within(p, r);
        within.sort_unstable();
        let scan: Vec<usize> = (0..g.node_count()).filter(|&i| g.position_at(i).dist2(&p) <= r * r).collect();
        prop_assert_eq!(within, scan);
    }

    #[test]
    fn adjacency_symmetric(n in 2usize..7) {
        let g = grid(n, 50.0);
        for id in g.ids() {
            for nb in g.neighbors(*id) {
                prop_assert!(g.neighbors(nb).contains(id));
                prop_assert!(g.has_edge(nb, *id));
            }
        }
        prop_assert_eq!(g.edge_count(), 2 * n * (n - 1));
    }
}
