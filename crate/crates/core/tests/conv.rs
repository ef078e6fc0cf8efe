use std::sync::Arc;

use icosr::conv::{backward, expand_kernel, forward, reference_conv, ConvLayer};
use icosr::icosphere::build_grid;
use icosr::layout::{build_calltable, build_layout, pad, Footprint, LayoutMap, SphereTensor, PANELS};
use ndarray::Array1;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor<F: icosr::Real>(l: &Arc<LayoutMap>, c: usize, rng: &mut ChaCha8Rng) -> SphereTensor<F> {
    let mut t = SphereTensor::zeros(l.clone(), c);
    t.data_mut().mapv_inplace(|_| F::of(rng.gen_range(-1.0..1.0)));
    t
}

fn random_layer<F: icosr::Real>(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> ConvLayer<F> {
    let mut l = ConvLayer::random(cin, cout, rng);
    l.bias = Array1::from_shape_simple_fn(cout, || F::of(rng.gen_range(-0.5..0.5)));
    l
}

#[test]
fn layout_conv_matches_call_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for level in 2..=4 {
        let g = build_grid(level).unwrap();
        let l = Arc::new(build_layout(&g));
        let t = build_calltable(&g, &Footprint::GA_CONV);
        let x = random_tensor::<f32>(&l, 5, &mut rng);
        let layer = random_layer::<f32>(5, 4, &mut rng);
        let fast = forward(&x, &layer).unwrap().face_values();
        let slow = reference_conv(&x.face_values(), &t, &layer, &g).unwrap();
        let d = (&fast - &slow).mapv(f32::abs).fold(0f32, |m, &v| m.max(v));
        assert!(d < 1e-5, "level {level}: {d}");
    }
}

#[test]
fn constant_input_reference() {
    let g = build_grid(2).unwrap();
    let t = build_calltable(&g, &Footprint::GA_CONV);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = random_layer::<f64>(1, 1, &mut rng);
    let x = ndarray::Array2::from_elem((1, g.num_faces()), 2.0);
    let y = reference_conv(&x, &t, &layer, &g).unwrap();
    let s: f64 = layer.weights.sum();
    for v in y.iter() {
        assert!((v - (2.0 * s + layer.bias[0])).abs() < 1e-12);
    }
}

#[test]
fn all_ones_input_gives_kernel_sum() {
    let g = build_grid(3).unwrap();
    let l = Arc::new(build_layout(&g));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = ConvLayer::<f64>::random(2, 3, &mut rng);
    let mut x = SphereTensor::<f64>::zeros(l.clone(), 2);
    x.data_mut().fill(1.0);
    let y = forward(&x, &layer).unwrap();
    let k = expand_kernel(&layer);
    for o in 0..3 {
        let up: f64 = k.up.index_axis(ndarray::Axis(0), o).sum();
        let down: f64 = k.down.index_axis(ndarray::Axis(0), o).sum();
        for kk in 0..PANELS {
            for r in 0..l.panel_height() {
                let want = if r % 2 == 0 { up } else { down };
                for c in 0..l.panel_width() {
                    assert!((y.data()[[o, kk, r, c]] - want).abs() < 1e-12);
                }
            }
        }
    }
}

/// Imaginary-pixel oracle written directly on padded panels: vertex values are
/// built as the mean of their four surrounding faces and weighted by the
/// corresponding conceptual tap.
fn imaginary_pixel_conv(x: &SphereTensor<f64>, layer: &ConvLayer<f64>) -> ndarray::Array4<f64> {
    // (tap, row offset, col offset) of face taps, and four-face vertex taps
    let ring = [(0, 0, 0), (1, 0, -1), (2, 0, 1), (3, -2, 0), (4, -2, 1), (5, 2, -1), (6, 2, 0)];
    let up_faces = [(7, 1, -1), (8, 1, 0), (9, -1, 0)];
    let up_verts = [(10, [(-1, 0), (1, -1), (0, -1), (-2, 0)]), (11, [(-1, 0), (1, 0), (0, 1), (-2, 1)]), (12, [(1, -1), (1, 0), (2, -1), (2, 0)])];
    let down_faces = [(10, -1, 0), (11, -1, 1), (12, 1, 0)];
    let down_verts = [(7, [(1, 0), (-1, 0), (0, -1), (2, -1)]), (8, [(1, 0), (-1, 1), (0, 1), (2, 0)]), (9, [(-1, 0), (-1, 1), (-2, 0), (-2, 1)])];
    let p = pad(x);
    let l = x.layout();
    let (h, w) = (l.panel_height(), l.panel_width());
    let mut y = ndarray::Array4::zeros((layer.out_channels(), PANELS, h, w));
    for o in 0..layer.out_channels() {
        for k in 0..PANELS {
            for r in 0..h {
                for c in 0..w {
                    let at = |ci: usize, dr: i32, dc: i32| p[[ci, k, (r as i32 + 2 + dr) as usize, (c as i32 + 1 + dc) as usize]];
                    let (faces, verts) = if r % 2 == 0 { (&up_faces, &up_verts) } else { (&down_faces, &down_verts) };
                    let mut acc = layer.bias[o];
                    for ci in 0..layer.in_channels() {
                        let wt = |t: usize| layer.weights[[o, ci, t]];
                        for &(t, dr, dc) in ring.iter().chain(faces.iter()) {
                            acc += wt(t) * at(ci, dr, dc);
                        }
                        for (t, four) in verts.iter() {
                            let v: f64 = four.iter().map(|&(dr, dc)| at(ci, dr, dc)).sum::<f64>() / 4.0;
                            acc += wt(*t) * v;
                        }
                    }
                    y[[o, k, r, c]] = acc;
                }
            }
        }
    }
    y
}

#[test]
fn equivalent_kernel_matches_imaginary_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for level in 1..=3 {
        let l = Arc::new(build_layout(&build_grid(level).unwrap()));
        let x = random_tensor::<f64>(&l, 3, &mut rng);
        let layer = random_layer::<f64>(3, 2, &mut rng);
        let y = forward(&x, &layer).unwrap();
        let d = (y.data() - &imaginary_pixel_conv(&x, &layer)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(d < 1e-6, "{d}");
    }
}

fn loss(x: &SphereTensor<f64>, layer: &ConvLayer<f64>, probe: &SphereTensor<f64>) -> f64 {
    (forward(x, layer).unwrap().data() * probe.data()).sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let l = Arc::new(build_layout(&build_grid(1).unwrap()));
    let x = random_tensor::<f64>(&l, 2, &mut rng);
    let mut layer = random_layer::<f64>(2, 2, &mut rng);
    let probe = random_tensor::<f64>(&l, 2, &mut rng);
    let g = backward(&x, &layer, &probe).unwrap();
    let h = 1e-3;

    for idx in 0..layer.weights.len() {
        let orig = layer.weights.as_slice().unwrap()[idx];
        layer.weights.as_slice_mut().unwrap()[idx] = orig + h;
        let up = loss(&x, &layer, &probe);
        layer.weights.as_slice_mut().unwrap()[idx] = orig - h;
        let dn = loss(&x, &layer, &probe);
        layer.weights.as_slice_mut().unwrap()[idx] = orig;
        let fd = (up - dn) / (2.0 * h);
        assert!(rel_err(g.weights.as_slice().unwrap()[idx], fd) < 1e-3, "weight {idx}");
    }
    for o in 0..2 {
        let orig = layer.bias[o];
        layer.bias[o] = orig + h;
        let up = loss(&x, &layer, &probe);
        layer.bias[o] = orig - h;
        let dn = loss(&x, &layer, &probe);
        layer.bias[o] = orig;
        assert!(rel_err(g.bias[o], (up - dn) / (2.0 * h)) < 1e-3);
    }
    let mut xp = x.clone();
    for idx in 0..x.data().len() {
        let orig = x.data().as_slice().unwrap()[idx];
        xp.data_mut().as_slice_mut().unwrap()[idx] = orig + h;
        let up = loss(&xp, &layer, &probe);
        xp.data_mut().as_slice_mut().unwrap()[idx] = orig - h;
        let dn = loss(&xp, &layer, &probe);
        xp.data_mut().as_slice_mut().unwrap()[idx] = orig;
        assert!(rel_err(g.input.data().as_slice().unwrap()[idx], (up - dn) / (2.0 * h)) < 1e-3, "input {idx}");
    }
}

#[test]
fn single_tap_gradient_support() {
    let g = build_grid(2).unwrap();
    let l = Arc::new(build_layout(&g));
    let mut layer = ConvLayer::<f64>::zeros(1, 1);
    layer.weights[[0, 0, 1]] = 1.0; // W neighbor
    let x = SphereTensor::<f64>::zeros(l.clone(), 1);
    let mut up = SphereTensor::<f64>::zeros(l.clone(), 1);
    let target = l.cell_to_face(icosr::layout::CellPos { panel: 2, row: 6, col: 2 });
    up.flat_mut()[[0, l.face_to_flat(target)]] = 1.0;
    let grads = backward(&x, &layer, &up).unwrap();
    let nz: Vec<u32> = (0..g.num_faces() as u32).filter(|&f| grads.input.face_value(0, f) != 0.0).collect();
    let west = l.cell_to_face(icosr::layout::CellPos { panel: 2, row: 6, col: 1 });
    assert_eq!(nz, vec![west]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn forward_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = Arc::new(build_layout(&build_grid(1).unwrap()));
        let x = random_tensor::<f64>(&l, 2, &mut rng);
        let y = random_tensor::<f64>(&l, 2, &mut rng);
        let layer = ConvLayer::<f64>::random(2, 2, &mut rng);
        let mut mix = x.clone();
        *mix.data_mut() = x.data() * a + y.data() * b;
        let lhs = forward(&mix, &layer).unwrap();
        let rhs = forward(&x, &layer).unwrap().data() * a + forward(&y, &layer).unwrap().data() * b;
        let d = (lhs.data() - &rhs).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        prop_assert!(d < 1e-10);
    }
}
