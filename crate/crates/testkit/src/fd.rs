//! Central finite-difference gradient checks against a graph's backward pass.

use dentgan::network::{ActKind, ConvGeom, Graph, GraphBuilder, Mode};
use dentgan::rng::Rng;
use dentgan::Tensor;

use crate::random_tensor;

#[derive(Debug, Clone)]
pub struct FdReport {
    /// `(name, max relative error)` per parameter, then `"input"`.
    pub entries: Vec<(String, f64)>,
}

impl FdReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

fn weighted_sum(out: &Tensor, probe: &[f64]) -> f64 {
    out.data().iter().zip(probe).map(|(a, b)| a * b).sum()
}

/// Compares analytic gradients of `sum(output * probe)` with central
/// differences of step `h`, over every parameter entry and every input entry.
pub fn check_graph(graph: &mut Graph, input: &Tensor, probe: &[f64], mode: Mode, seed: u64, h: f64, floor: f64) -> FdReport {
    let tape = graph.forward(input, mode, seed).expect("forward");
    assert_eq!(tape.output().len(), probe.len());
    let dout = Tensor::from_vec(tape.output().shape(), probe.to_vec());
    let grads = graph.backward(&tape, &dout, true);
    let pgrads = grads.params.expect("parameter gradients");
    let loss = |g: &Graph, x: &Tensor| weighted_sum(&g.forward(x, mode, seed).expect("forward").into_output(), probe);

    let mut entries = Vec::new();
    let names: Vec<String> = graph.params().iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let n = graph.params()[pi].tensor.len();
        let mut numeric = Vec::with_capacity(n);
        for k in 0..n {
            let orig = graph.params()[pi].tensor.data()[k];
            graph.params_mut()[pi].tensor.data_mut()[k] = orig + h;
            let lp = loss(graph, input);
            graph.params_mut()[pi].tensor.data_mut()[k] = orig - h;
            let lm = loss(graph, input);
            graph.params_mut()[pi].tensor.data_mut()[k] = orig;
            numeric.push((lp - lm) / (2.0 * h));
        }
        entries.push((name.clone(), crate::max_rel_error(pgrads[pi].data(), &numeric, floor)));
    }
    let mut x = input.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = x.data()[k];
        x.data_mut()[k] = orig + h;
        let lp = loss(graph, &x);
        x.data_mut()[k] = orig - h;
        let lm = loss(graph, &x);
        x.data_mut()[k] = orig;
        numeric.push((lp - lm) / (2.0 * h));
    }
    entries.push(("input".into(), crate::max_rel_error(grads.input.data(), &numeric, floor)));
    FdReport { entries }
}

/// One primitive layer at toy size, ready for [`check_graph`].
pub struct FdCase {
    pub label: String,
    pub graph: Graph,
    pub input: Tensor,
    pub mode: Mode,
}

/// Values in `±[0.05, 1]`, clear of activation kinks at the FD step.
pub fn off_kink(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| {
                let m = rng.range(0.05, 1.0);
                if rng.bernoulli(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
}

pub fn randomize(g: &mut Graph, rng: &mut Rng) {
    for p in g.params_mut() {
        for v in p.tensor.data_mut() {
            *v = rng.range(-0.5, 0.5) + if p.name.ends_with("scale") { 1.0 } else { 0.0 };
        }
    }
}

fn single(cin: usize, f: impl FnOnce(&mut GraphBuilder, usize) -> usize) -> Graph {
    let mut b = GraphBuilder::new(cin);
    let x = b.input();
    f(&mut b, x);
    b.finish()
}

pub const SMALL: ConvGeom = ConvGeom { kernel: 3, stride: 2, pad: 1 };

/// Every layer primitive the networks are built from.
pub fn primitive_cases(seed: u64) -> Vec<FdCase> {
    let mut rng = Rng::new(seed);
    let mut cases = Vec::new();
    let mut push = |label: String, graph: Graph, input: Tensor, mode: Mode| {
        cases.push(FdCase { label, graph, input, mode });
    };
    for (i, geom) in [ConvGeom::HALVING, SMALL].into_iter().enumerate() {
        let mut g = single(2, |b, x| b.conv(x, 3, geom, "c"));
        randomize(&mut g, &mut rng);
        push(format!("conv#{i}"), g, random_tensor(&mut rng, &[2, 2, 6, 6], 1.0), Mode::Train);
    }
    for (i, (geom, op)) in [(ConvGeom::HALVING, 1), (SMALL, 1), (SMALL, 0)].into_iter().enumerate() {
        let mut g = single(2, |b, x| b.deconv(x, 3, geom, op, "d"));
        randomize(&mut g, &mut rng);
        push(format!("deconv#{i}"), g, random_tensor(&mut rng, &[2, 2, 3, 3], 1.0), Mode::Train);
    }
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = single(3, |b, x| b.batch_norm(x, "bn"));
        randomize(&mut g, &mut rng);
        for buf in g.buffers_mut() {
            for v in buf.tensor.data_mut() {
                *v = if buf.name.ends_with("var") { rng.range(0.5, 2.0) } else { rng.range(-0.3, 0.3) };
            }
        }
        push(format!("batch_norm/{mode:?}"), g, random_tensor(&mut rng, &[3, 3, 4, 4], 1.0), mode);
    }
    for kind in [ActKind::LeakyRelu(0.2), ActKind::Relu, ActKind::Tanh, ActKind::Sigmoid] {
        let g = single(2, |b, x| b.act(x, kind));
        push(format!("{kind:?}"), g, off_kink(&mut rng, &[2, 2, 3, 3]), Mode::Train);
    }
    let g = single(2, |b, x| b.dropout(x, 0.5));
    push("dropout".into(), g, random_tensor(&mut rng, &[2, 2, 4, 4], 1.0), Mode::Train);

    let mut g = single(3, |b, x| b.pixel_affine(x, 2, "p"));
    randomize(&mut g, &mut rng);
    push("pixel_affine".into(), g, random_tensor(&mut rng, &[2, 3, 3, 3], 1.0), Mode::Train);
    let mut g = single(2, |b, x| {
        let f = b.flatten(x, 2 * 3 * 3);
        b.dense(f, 18, 4, "fc")
    });
    randomize(&mut g, &mut rng);
    push("dense".into(), g, random_tensor(&mut rng, &[2, 2, 3, 3], 1.0), Mode::Train);

    let mut g = single(2, |b, x| {
        let a = b.conv(x, 2, SMALL, "a");
        let c = b.conv(x, 3, SMALL, "b");
        b.concat(a, c)
    });
    randomize(&mut g, &mut rng);
    push("concat".into(), g, random_tensor(&mut rng, &[2, 2, 4, 4], 1.0), Mode::Train);
    cases
}

/// Runs [`check_graph`] on a case with a random probe; returns the worst relative error.
pub fn run_case(case: &mut FdCase, rng: &mut Rng, h: f64, floor: f64) -> FdReport {
    let out = case.graph.forward(&case.input, case.mode, 99).expect("forward").into_output();
    let probe: Vec<f64> = (0..out.len()).map(|_| rng.range(-1.0, 1.0)).collect();
    check_graph(&mut case.graph, &case.input, &probe, case.mode, 99, h, floor)
}
