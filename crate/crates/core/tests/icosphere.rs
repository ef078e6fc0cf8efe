use std::collections::HashSet;

use icosr::icosphere::{build_grid, IcosphereGrid, SpherePoint, Vec3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unique_edges(g: &IcosphereGrid) -> usize {
    let mut edges = HashSet::new();
    for f in g.faces() {
        let [a, b, c] = f.vertices;
        for (u, v) in [(a, b), (b, c), (c, a)] {
            edges.insert((u.min(v), u.max(v)));
        }
    }
    edges.len()
}

fn brute_face(g: &IcosphereGrid, d: &Vec3) -> u32 {
    (0..g.num_faces() as u32)
        .find(|&f| {
            let [a, b, c] = g.face_vertex_positions(f);
            [(a, b), (b, c), (c, a)].iter().all(|(u, v)| u.cross(v).dot(d) >= 0.0)
        })
        .unwrap()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n < 1.0 {
            return v / n;
        }
    }
}

#[test]
fn closed_form_counts() {
    for level in 0..=6u32 {
        let g = build_grid(level).unwrap();
        let n = 4usize.pow(level);
        assert_eq!(g.num_faces(), 20 * n);
        assert_eq!(g.num_vertices(), 10 * n + 2);
        let e = unique_edges(&g);
        assert_eq!(e, g.num_edges());
        assert_eq!(g.num_vertices() as i64 - e as i64 + g.num_faces() as i64, 2);
    }
}

#[test]
fn vertices_are_unit_and_incidence_is_consistent() {
    let g = build_grid(3).unwrap();
    let mut pentagons = 0;
    for v in 0..g.num_vertices() as u32 {
        assert!((g.vertex(v).norm() - 1.0).abs() < 1e-12);
        let inc = g.incident_faces(v);
        assert!(inc.len() == 5 || inc.len() == 6);
        pentagons += (inc.len() == 5) as usize;
        assert_eq!(inc[0], *inc.iter().min().unwrap());
        for &f in inc {
            assert!(g.face(f).vertices.contains(&v));
        }
    }
    assert_eq!(pentagons, 12);
}

#[test]
fn point_location_matches_brute_force() {
    let g = build_grid(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..10_000 {
        let d = random_unit(&mut rng);
        assert_eq!(g.locate(&d).unwrap(), brute_face(&g, &d));
    }
}

#[test]
fn shared_vertices_resolve_to_lowest_face() {
    let g = build_grid(2).unwrap();
    for v in 0..g.num_vertices() as u32 {
        let p = SpherePoint::from_direction(g.vertex(v)).unwrap();
        assert_eq!(g.face_of_point(&p), g.incident_faces(v)[0]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn barycentric_weights_reconstruct_the_point(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, level in 0u32..5) {
        let d = Vec3::new(x, y, z);
        prop_assume!(d.norm() > 1e-3);
        let g = build_grid(level).unwrap();
        let p = SpherePoint::from_direction(d / d.norm()).unwrap();
        let f = g.face_of_point(&p);
        let w = g.barycentric(f, &p).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|&v| v >= -1e-9));
    }
}
