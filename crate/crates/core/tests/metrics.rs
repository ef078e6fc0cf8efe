use std::sync::Arc;

use icosr::icosphere::build_grid;
use icosr::layout::{build_layout, SphereTensor};
use icosr::metrics::{
    build_mask, feature_loss, l1_multiscale, l1_multiscale_grad, masked_l1, psnr, psnr_with_row_weights, ssim,
    ssim_with_row_weights, ws_psnr, ws_ssim, FeatureMask,
};
use icosr::projection::ProjectionSpec;
use icosr::sliif::convert_features;
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random3(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.gen_range(0.0..1.0))
}

#[test]
fn l1_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Array2::<f64>::from_shape_simple_fn((500, 3), || rng.gen_range(-1.0..1.0));
    let b = Array2::<f64>::from_shape_simple_fn((500, 3), || rng.gen_range(-1.0..1.0));
    let mut s = 0.0f64;
    for i in 0..500 {
        let mut q = 0.0;
        for c in 0..3 {
            q += (a[[i, c]] - b[[i, c]]).abs();
        }
        s += q;
    }
    assert!((l1_multiscale(a.view(), b.view()).unwrap() - s / 500.0).abs() < 1e-7);
    let g = l1_multiscale_grad(a.view(), b.view());
    let h = 1e-7;
    let mut ap = a.clone();
    ap[[3, 1]] += h;
    let fd = (l1_multiscale(ap.view(), b.view()).unwrap() - l1_multiscale(a.view(), b.view()).unwrap()) / h;
    assert!((fd - g[[3, 1]]).abs() < 1e-6);
}

#[test]
fn mask_matches_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w, c) = (6, 9, 5);
    let sr = random3((h, w, 3), &mut rng);
    let gt = random3((h, w, 3), &mut rng);
    let feats = random3((c, h, w), &mut rng);
    let m = build_mask(sr.view(), gt.view(), feats.view()).unwrap();
    let mut spatial = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            spatial[[y, x]] = (0..3).map(|k| (sr[[y, x, k]] - gt[[y, x, k]]).abs()).sum::<f64>() / 3.0;
        }
    }
    let peak = spatial.iter().cloned().fold(0.0, f64::max);
    for (a, b) in m.spatial.iter().zip(spatial.iter()) {
        assert!((a - b / peak).abs() < 1e-7);
    }
    let means: Vec<f64> = (0..c).map(|k| feats.index_axis(ndarray::Axis(0), k).mean().unwrap()).collect();
    let z: f64 = means.iter().map(|v| v.exp()).sum();
    for k in 0..c {
        assert!((m.channel[k] - means[k].exp() / z).abs() < 1e-7);
    }
    assert!((m.channel.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn feature_loss_matches_brute_force() {
    let g = build_grid(3).unwrap();
    let layout = Arc::new(build_layout(&g));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = 4;
    let vals = Array2::from_shape_simple_fn((c, g.num_faces()), || rng.gen_range(-1.0..1.0));
    let sphere = SphereTensor::from_face_values(layout, vals.view()).unwrap();
    let spec = ProjectionSpec::erp(16, 32);
    let target = random3((c, 16, 32), &mut rng);
    let mask = FeatureMask {
        spatial: Array2::from_shape_simple_fn((16, 32), || rng.gen_range(0.0..1.0)),
        channel: Array1::from(vec![0.1, 0.2, 0.3, 0.4]),
    };
    let got = feature_loss(&sphere, &g, &spec, target.view(), &mask).unwrap();
    let conv = convert_features(&sphere, &g, &spec).unwrap();
    let mut s = 0.0;
    for k in 0..c {
        for y in 0..16 {
            for x in 0..32 {
                s += mask.channel[k] * mask.spatial[[y, x]] * (conv[[k, y, x]] - target[[k, y, x]]).abs();
            }
        }
    }
    assert!((got - s / (c * 16 * 32) as f64).abs() < 1e-7);
    assert_eq!(feature_loss(&sphere, &g, &spec, conv.view(), &mask).unwrap(), 0.0);
    let zero = FeatureMask { spatial: Array2::zeros((16, 32)), channel: mask.channel.clone() };
    assert_eq!(feature_loss(&sphere, &g, &spec, target.view(), &zero).unwrap(), 0.0);
    assert!(feature_loss(&sphere, &g, &ProjectionSpec::erp(8, 16), target.view(), &mask).is_err());
}

#[test]
fn uniform_weights_reduce_to_plain_psnr() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let a = random3((32, 64, 3), &mut rng);
        let b = random3((32, 64, 3), &mut rng);
        let u = psnr_with_row_weights(a.view(), b.view(), &[0.37; 32]).unwrap();
        assert!((u - psnr(a.view(), b.view()).unwrap()).abs() < 1e-9);
        assert!(ws_psnr(a.view(), b.view()).unwrap().is_finite());
    }
}

/// SSIM straight from the definition with an explicit 2D window.
fn ssim_oracle(a: &Array3<f64>, b: &Array3<f64>, weights: &[f64]) -> f64 {
    let (h, w, c) = a.dim();
    let mut win = [[0.0; 11]; 11];
    let mut tot = 0.0;
    for i in 0..11 {
        for j in 0..11 {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i][j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            tot += win[i][j];
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..c {
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = win[i][j] / tot;
                        let (p, q) = (a[[y + i, x + j, k]], b[[y + i, x + j, k]]);
                        mx += g * p;
                        my += g * q;
                        xx += g * p * p;
                        yy += g * q * q;
                        xy += g * p * q;
                    }
                }
                let (sx, sy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                let v = (2.0 * mx * my + c1) * (2.0 * sxy + c2) / ((mx * mx + my * my + c1) * (sx + sy + c2));
                num += weights[y + 5] * v;
                den += weights[y + 5];
            }
        }
    }
    num / den
}

#[test]
fn ssim_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random3((20, 40, 2), &mut rng);
    let noise = random3((20, 40, 2), &mut rng);
    let b = &a * 0.8 + &noise * 0.2;
    let ws = icosr::metrics::erp_row_weights(20);
    assert!((ssim(a.view(), b.view()).unwrap() - ssim_oracle(&a, &b, &[1.0; 20])).abs() < 1e-10);
    assert!((ws_ssim(a.view(), b.view()).unwrap() - ssim_oracle(&a, &b, &ws)).abs() < 1e-10);
    let u = ssim_with_row_weights(a.view(), b.view(), &[2.0; 20]).unwrap();
    assert!((u - ssim(a.view(), b.view()).unwrap()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masked_l1_is_nonnegative_and_lipschitz(seed in 0u64..1000, eps in -0.5f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random3((3, 5, 7), &mut rng);
        let t = random3((3, 5, 7), &mut rng);
        let mask = FeatureMask {
            spatial: Array2::from_shape_simple_fn((5, 7), || rng.gen_range(0.0..1.0)),
            channel: Array1::from(vec![0.5, 0.3, 0.2]),
        };
        let (l0, _) = masked_l1(a.view(), t.view(), &mask).unwrap();
        prop_assert!(l0 >= 0.0);
        let shifted = &a + eps;
        let (l1, _) = masked_l1(shifted.view(), t.view(), &mask).unwrap();
        prop_assert!((l1 - l0).abs() <= eps.abs() + 1e-12);
    }
}
