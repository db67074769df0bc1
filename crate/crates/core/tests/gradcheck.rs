use dentgan::network::{build_discriminator, build_generator, ArchConfig, Graph, GraphBuilder, Mode};
use dentgan::rng::Rng;
use dentgan::Tensor;
use dentgan_testkit::fd::{check_graph, primitive_cases, randomize, run_case, SMALL};
use dentgan_testkit::random_tensor;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-7;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = Rng::new(1);
    let cases = primitive_cases(11);
    assert!(cases.len() >= 14);
    for mut case in cases {
        let report = run_case(&mut case, &mut rng, H, FLOOR);
        for (name, err) in &report.entries {
            assert!(*err < TOL, "{}: {name} relative error {err:e}", case.label);
        }
    }
}

fn single(cin: usize, f: impl FnOnce(&mut GraphBuilder, usize) -> usize) -> Graph {
    let mut b = GraphBuilder::new(cin);
    let x = b.input();
    f(&mut b, x);
    b.finish()
}

#[test]
fn parameter_off_the_loss_path_gets_zero() {
    let mut g = single(1, |b, x| {
        b.conv(x, 2, SMALL, "unused");
        b.conv(x, 2, SMALL, "used")
    });
    let mut rng = Rng::new(8);
    randomize(&mut g, &mut rng);
    let x = random_tensor(&mut rng, &[1, 1, 4, 4], 1.0);
    let (_, grads) = g
        .gradients(&x, Mode::Train, 0, |o| (o.data().iter().sum(), Tensor::full(o.shape(), 1.0)))
        .unwrap();
    assert!(grads["unused.weight"].data().iter().all(|&v| v == 0.0));
    assert!(grads["unused.bias"].data().iter().all(|&v| v == 0.0));
    assert!(grads["used.weight"].data().iter().any(|&v| v != 0.0));
}

#[test]
fn mean_loss_bias_gradient_on_zero_network() {
    let mut g = single(2, |b, x| b.pixel_affine(x, 3, "p"));
    let x = Tensor::full(&[2, 2, 4, 4], 0.7);
    let (_, grads) = g
        .gradients(&x, Mode::Eval, 0, |o| {
            let n = o.len() as f64;
            (o.mean(), Tensor::full(o.shape(), 1.0 / n))
        })
        .unwrap();
    let expect = 1.0 / (2 * 3 * 4 * 4) as f64 * (2 * 4 * 4) as f64;
    for &v in grads["p.bias"].data() {
        assert!((v - expect).abs() < 1e-15);
    }
    g.params_mut()[1].tensor.fill(1.0);
    assert_eq!(g.forward(&x, Mode::Eval, 0).unwrap().output().mean(), 1.0);
}

#[test]
fn composite_networks_small() {
    let cfg = ArchConfig { image_size: 8, depth: 3, base_width: 2, ..ArchConfig::default() };
    let mut rng = Rng::new(9);
    for net in [build_generator(&cfg).unwrap(), build_discriminator(&ArchConfig { image_size: 16, ..cfg.clone() }).unwrap()] {
        let mut g = net.graph;
        g.init_weights(3);
        for p in g.params_mut() {
            for v in p.tensor.data_mut() {
                *v += rng.range(-0.2, 0.2);
            }
        }
        let c = g.input_channels();
        let side = if c == 1 { 8 } else { 16 };
        let x = random_tensor(&mut rng, &[2, c, side, side], 1.0);
        let out = g.forward(&x, Mode::Eval, 1).unwrap().into_output();
        let probe: Vec<f64> = (0..out.len()).map(|_| rng.range(-1.0, 1.0)).collect();
        // Eval mode keeps the composite smooth except at activation kinks; a
        // small step keeps kink crossings out of the difference quotient.
        let report = check_graph(&mut g, &x, &probe, Mode::Eval, 1, 1e-6, 1e-6);
        for (name, err) in &report.entries {
            assert!(*err < 1e-3, "{name}: {err:e}");
        }
    }
}
