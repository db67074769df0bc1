use dentgan::network::arch::{build_discriminator, build_generator, infer_shapes, ArchConfig};
use dentgan::network::graph::Mode;
use dentgan::rng::Rng;
use dentgan_testkit::random_tensor;
use proptest::prelude::*;

#[test]
fn zero_parameters_give_zero_generator_output() {
    let mut g = build_generator(&ArchConfig::tiny()).unwrap();
    for p in g.graph.params_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = random_tensor(&mut Rng::new(1), &[1, 1, 64, 64], 1.0);
    let y = g.predict(&x, Mode::Eval, 0).unwrap();
    assert_eq!(y.shape(), &[1, 3, 64, 64]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn eval_forward_is_deterministic_and_seed_free() {
    let mut g = build_generator(&ArchConfig::tiny()).unwrap();
    g.init_weights(4);
    let x = random_tensor(&mut Rng::new(2), &[2, 1, 64, 64], 1.0);
    let a = g.predict(&x, Mode::Eval, 0).unwrap();
    let b = g.predict(&x, Mode::Eval, 99).unwrap();
    assert_eq!(a, b);
    let t1 = g.predict(&x, Mode::Train, 5).unwrap();
    let t2 = g.predict(&x, Mode::Train, 5).unwrap();
    assert_eq!(t1, t2);
    assert_ne!(t1, g.predict(&x, Mode::Train, 6).unwrap());
}

#[test]
fn discriminator_emits_probabilities() {
    let mut d = build_discriminator(&ArchConfig::tiny()).unwrap();
    d.init_weights(5);
    let x = random_tensor(&mut Rng::new(3), &[3, 4, 64, 64], 1.0);
    let p = d.predict(&x, Mode::Eval, 0).unwrap();
    assert_eq!(p.len(), 3);
    assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn paper_generator_shapes() {
    let g = build_generator(&ArchConfig::default()).unwrap();
    let shapes = infer_shapes(&g, (1, 256, 256)).unwrap();
    assert_eq!(shapes.last(), Some(&(3, 256, 256)));
    assert!(shapes.contains(&(512, 1, 1)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generator_output_in_tanh_range(seed in any::<u64>()) {
        let mut g = build_generator(&ArchConfig::tiny()).unwrap();
        g.init_weights(seed);
        let x = random_tensor(&mut Rng::new(seed ^ 1), &[1, 1, 64, 64], 3.0);
        let y = g.predict(&x, Mode::Eval, 0).unwrap();
        prop_assert!(y.data().iter().all(|v| v.abs() <= 1.0));
    }
}
