use dentgan::network::ConvGeom;
use dentgan::rng::Rng;
use dentgan::Tensor;
use dentgan_testkit::conv::{conv2d, deconv2d, engine_conv, engine_deconv};
use dentgan_testkit::{max_abs_diff, random_tensor};

#[test]
fn ramp_with_hand_kernel() {
    let x = Tensor::from_vec(&[1, 1, 8, 8], (0..64).map(|v| v as f64).collect());
    let mut k = vec![0.0; 25];
    k[12] = 1.0; // centre tap
    k[0] = -1.0; // top-left tap
    let w = Tensor::from_vec(&[1, 1, 5, 5], k);
    let out = engine_conv(&x, &w, &[0.5], ConvGeom::HALVING);
    assert_eq!(out.shape(), &[1, 1, 4, 4]);
    // output (oy, ox) reads centre (2oy, 2ox) and top-left (2oy-2, 2ox-2)
    for oy in 0..4 {
        for ox in 0..4 {
            let c = (16 * oy + 2 * ox) as f64;
            let tl = if oy > 0 && ox > 0 { (16 * (oy - 1) + 2 * (ox - 1)) as f64 } else { 0.0 };
            assert_eq!(out.data()[oy * 4 + ox], c - tl + 0.5);
        }
    }
    assert_eq!(out, conv2d(&x, &w, &[0.5], 2, 2));
}

#[test]
fn random_convolutions_match_direct_sum() {
    let mut rng = Rng::new(41);
    for trial in 0..40 {
        let h = rng.int_range(8, 16) as usize;
        let w = rng.int_range(8, 16) as usize;
        let (cin, cout) = (rng.int_range(1, 3) as usize, rng.int_range(1, 4) as usize);
        let g = if trial % 2 == 0 { ConvGeom::HALVING } else { ConvGeom { kernel: 3, stride: 1, pad: 1 } };
        let x = random_tensor(&mut rng, &[2, cin, h, w], 1.0);
        let wt = random_tensor(&mut rng, &[cout, cin, g.kernel, g.kernel], 1.0);
        let b: Vec<f64> = (0..cout).map(|_| rng.range(-1.0, 1.0)).collect();
        let got = engine_conv(&x, &wt, &b, g);
        let want = conv2d(&x, &wt, &b, g.stride, g.pad);
        assert_eq!(got.shape(), want.shape());
        assert!(max_abs_diff(got.data(), want.data()) < 1e-10, "trial {trial}");
    }
}

#[test]
fn random_transposed_convolutions_match_scatter() {
    let mut rng = Rng::new(42);
    for trial in 0..40 {
        let h = rng.int_range(4, 8) as usize;
        let w = rng.int_range(4, 8) as usize;
        let (cin, cout) = (rng.int_range(1, 3) as usize, rng.int_range(1, 4) as usize);
        let g = ConvGeom::HALVING;
        let x = random_tensor(&mut rng, &[2, cin, h, w], 1.0);
        let wt = random_tensor(&mut rng, &[cin, cout, 5, 5], 1.0);
        let b: Vec<f64> = (0..cout).map(|_| rng.range(-1.0, 1.0)).collect();
        let got = engine_deconv(&x, &wt, &b, g, 1);
        assert_eq!(got.shape(), &[2, cout, 2 * h, 2 * w]);
        let want = deconv2d(&x, &wt, &b, 2, 2, 1);
        assert!(max_abs_diff(got.data(), want.data()) < 1e-10, "trial {trial}");
    }
}

#[test]
fn deconv_is_adjoint_of_conv() {
    let mut rng = Rng::new(43);
    let g = ConvGeom::HALVING;
    let x = random_tensor(&mut rng, &[1, 2, 12, 12], 1.0);
    let y = random_tensor(&mut rng, &[1, 3, 6, 6], 1.0);
    let w = random_tensor(&mut rng, &[3, 2, 5, 5], 1.0);
    let cx = engine_conv(&x, &w, &[0.0; 3], g);
    let dy = engine_deconv(&y, &w, &[0.0; 2], g, 1);
    let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}
