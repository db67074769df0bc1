//! Static layer graph with forward evaluation and reverse-mode gradients.

use std::collections::BTreeMap;

use super::kernels::{self, ConvDims, ConvGeom};
use super::NetworkError;
use crate::rng::{derive_seed, hash_str, Rng};
use crate::tensor::Tensor;

pub type NodeId = usize;

pub const BN_EPSILON: f64 = 1e-5;
/// Fraction of the previous running statistic kept at each update.
pub const BN_MOMENTUM: f64 = 0.9;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActKind {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Input,
    Conv { geom: ConvGeom, weight: usize, bias: usize },
    Deconv { geom: ConvGeom, output_pad: usize, weight: usize, bias: usize },
    /// Per-pixel affine map across channels (a 1x1 convolution).
    PixelAffine { weight: usize, bias: usize },
    Dense { weight: usize, bias: usize },
    BatchNorm { gamma: usize, beta: usize, mean: usize, var: usize },
    Act(ActKind),
    Dropout { rate: f64 },
    Concat,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Table row this node belongs to.
    pub layer: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Node graph plus its trainable parameters and batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) params: Vec<Param>,
    pub(crate) buffers: Vec<Param>,
    input_channels: usize,
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { mask: Vec<f64> },
}

/// Batch statistics observed by a train-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct StatsUpdate {
    mean_buf: usize,
    var_buf: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Recorded intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    values: Vec<Tensor>,
    caches: Vec<Cache>,
    mode: Mode,
    stats: Vec<StatsUpdate>,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("graph has an input node")
    }

    pub fn into_output(mut self) -> Tensor {
        self.values.pop().expect("graph has an input node")
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

pub struct Grads {
    /// One gradient per trainable parameter, or `None` when not requested.
    pub params: Option<Vec<Tensor>>,
    pub input: Tensor,
}

/// Incremental graph construction; channel counts are tracked per node.
pub struct GraphBuilder {
    graph: Graph,
    layer: usize,
}

impl GraphBuilder {
    pub fn new(input_channels: usize) -> Self {
        let input = Node { op: Op::Input, inputs: vec![], layer: 0, channels: input_channels };
        Self {
            graph: Graph { nodes: vec![input], params: vec![], buffers: vec![], input_channels },
            layer: 0,
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn set_layer(&mut self, layer: usize) {
        self.layer = layer;
    }

    pub fn channels(&self, node: NodeId) -> usize {
        self.graph.nodes[node].channels
    }

    fn param(&mut self, name: String, role: ParamRole, shape: &[usize]) -> usize {
        let value = if role == ParamRole::Scale { 1.0 } else { 0.0 };
        let p = Param { name, role, tensor: Tensor::full(shape, value) };
        if matches!(role, ParamRole::RunningMean | ParamRole::RunningVar) {
            let mut p = p;
            if role == ParamRole::RunningVar {
                p.tensor.fill(1.0);
            }
            self.graph.buffers.push(p);
            self.graph.buffers.len() - 1
        } else {
            self.graph.params.push(p);
            self.graph.params.len() - 1
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.graph.nodes.push(Node { op, inputs, layer: self.layer, channels });
        self.graph.nodes.len() - 1
    }

    pub fn conv(&mut self, x: NodeId, cout: usize, geom: ConvGeom, name: &str) -> NodeId {
        let cin = self.channels(x);
        let k = geom.kernel;
        let weight = self.param(format!("{name}.weight"), ParamRole::Weight, &[cout, cin, k, k]);
        let bias = self.param(format!("{name}.bias"), ParamRole::Bias, &[cout]);
        self.push(Op::Conv { geom, weight, bias }, vec![x], cout)
    }

    pub fn deconv(&mut self, x: NodeId, cout: usize, geom: ConvGeom, output_pad: usize, name: &str) -> NodeId {
        let cin = self.channels(x);
        let k = geom.kernel;
        let weight = self.param(format!("{name}.weight"), ParamRole::Weight, &[cin, cout, k, k]);
        let bias = self.param(format!("{name}.bias"), ParamRole::Bias, &[cout]);
        self.push(Op::Deconv { geom, output_pad, weight, bias }, vec![x], cout)
    }

    pub fn pixel_affine(&mut self, x: NodeId, cout: usize, name: &str) -> NodeId {
        let cin = self.channels(x);
        let weight = self.param(format!("{name}.weight"), ParamRole::Weight, &[cout, cin]);
        let bias = self.param(format!("{name}.bias"), ParamRole::Bias, &[cout]);
        self.push(Op::PixelAffine { weight, bias }, vec![x], cout)
    }

    /// Fully connected layer over `in_features` flattened inputs.
    pub fn dense(&mut self, x: NodeId, in_features: usize, out: usize, name: &str) -> NodeId {
        let weight = self.param(format!("{name}.weight"), ParamRole::Weight, &[out, in_features]);
        let bias = self.param(format!("{name}.bias"), ParamRole::Bias, &[out]);
        self.push(Op::Dense { weight, bias }, vec![x], out)
    }

    pub fn batch_norm(&mut self, x: NodeId, name: &str) -> NodeId {
        let c = self.channels(x);
        let gamma = self.param(format!("{name}.bn.scale"), ParamRole::Scale, &[c]);
        let beta = self.param(format!("{name}.bn.shift"), ParamRole::Shift, &[c]);
        let mean = self.param(format!("{name}.bn.running_mean"), ParamRole::RunningMean, &[c]);
        let var = self.param(format!("{name}.bn.running_var"), ParamRole::RunningVar, &[c]);
        self.push(Op::BatchNorm { gamma, beta, mean, var }, vec![x], c)
    }

    pub fn act(&mut self, x: NodeId, kind: ActKind) -> NodeId {
        let c = self.channels(x);
        self.push(Op::Act(kind), vec![x], c)
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        let c = self.channels(x);
        self.push(Op::Dropout { rate }, vec![x], c)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let c = self.channels(a) + self.channels(b);
        self.push(Op::Concat, vec![a, b], c)
    }

    /// Flattens to `features` values per sample.
    pub fn flatten(&mut self, x: NodeId, features: usize) -> NodeId {
        self.push(Op::Flatten, vec![x], features)
    }

    pub fn finish(self) -> Graph {
        self.graph
    }
}

fn check_finite(t: &Tensor, layer: usize) -> Result<(), NetworkError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NetworkError::NonFiniteActivation { layer })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Param] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Param] {
        &mut self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Zero-mean Gaussian weights with std 0.02, zero biases and shifts, unit scales.
    pub fn init_weights(&mut self, seed: u64) {
        for p in &mut self.params {
            match p.role {
                ParamRole::Weight => {
                    let mut rng = Rng::new(derive_seed(seed, &[hash_str(&p.name)]));
                    p.tensor.data_mut().iter_mut().for_each(|v| *v = INIT_STD * rng.normal());
                }
                ParamRole::Scale => p.tensor.fill(1.0),
                _ => p.tensor.fill(0.0),
            }
        }
        for b in &mut self.buffers {
            b.tensor.fill(if b.role == ParamRole::RunningVar { 1.0 } else { 0.0 });
        }
    }

    /// Per-node `(channels, height, width)` for one sample of the given shape.
    pub fn node_shapes(&self, input: (usize, usize, usize)) -> Result<Vec<(usize, usize, usize)>, NetworkError> {
        let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let mismatch = |detail: String| NetworkError::ShapeMismatch { layer: node.layer, detail };
            let s = match node.op {
                Op::Input => {
                    if input.0 != self.input_channels {
                        return Err(mismatch(format!(
                            "input has {} channels, network expects {}",
                            input.0, self.input_channels
                        )));
                    }
                    if input.1 == 0 || input.2 == 0 {
                        return Err(mismatch("empty spatial input".into()));
                    }
                    input
                }
                Op::Conv { geom, .. } => {
                    let (_, h, w) = shapes[node.inputs[0]];
                    match (geom.conv_out(h), geom.conv_out(w)) {
                        (Some(oh), Some(ow)) => (node.channels, oh, ow),
                        _ => return Err(mismatch(format!("{h}x{w} too small for convolution"))),
                    }
                }
                Op::Deconv { geom, output_pad, .. } => {
                    let (_, h, w) = shapes[node.inputs[0]];
                    match (geom.deconv_out(h, output_pad), geom.deconv_out(w, output_pad)) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (node.channels, oh, ow),
                        _ => return Err(mismatch(format!("{h}x{w} too small for transposed convolution"))),
                    }
                }
                Op::Dense { weight, .. } => {
                    let (c, h, w) = shapes[node.inputs[0]];
                    let want = self.params[weight].tensor.shape()[1];
                    if c * h * w != want {
                        return Err(mismatch(format!("dense layer expects {want} features, got {}", c * h * w)));
                    }
                    (node.channels, 1, 1)
                }
                Op::Flatten => {
                    let (c, h, w) = shapes[node.inputs[0]];
                    if c * h * w != node.channels {
                        return Err(mismatch(format!(
                            "flatten expects {} features, got {c}x{h}x{w}",
                            node.channels
                        )));
                    }
                    (c * h * w, 1, 1)
                }
                Op::Concat => {
                    let (ca, ha, wa) = shapes[node.inputs[0]];
                    let (cb, hb, wb) = shapes[node.inputs[1]];
                    if (ha, wa) != (hb, wb) {
                        return Err(mismatch(format!("cannot concatenate {ha}x{wa} with {hb}x{wb}")));
                    }
                    (ca + cb, ha, wa)
                }
                Op::PixelAffine { .. } => {
                    let (_, h, w) = shapes[node.inputs[0]];
                    (node.channels, h, w)
                }
                Op::BatchNorm { .. } | Op::Act(_) | Op::Dropout { .. } => shapes[node.inputs[0]],
            };
            debug_assert!(i == 0 || s.0 == node.channels || matches!(node.op, Op::Flatten));
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Evaluates the graph. Train mode draws dropout masks from `seed` and
    /// normalizes with batch statistics; the observed statistics are kept in
    /// the tape for [`Graph::apply_running_stats`].
    #[allow(clippy::needless_range_loop)]
    pub fn forward(&self, input: &Tensor, mode: Mode, seed: u64) -> Result<Tape, NetworkError> {
        let (n, c, h, w) = input.dims4();
        self.node_shapes((c, h, w))?;
        if n == 0 {
            return Err(NetworkError::ShapeMismatch { layer: 0, detail: "empty batch".into() });
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        let mut stats = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let (out, cache) = match node.op {
                Op::Input => (input.clone(), Cache::None),
                Op::Conv { geom, weight, bias } => {
                    let x = &values[node.inputs[0]];
                    let (n, cin, h, w) = x.dims4();
                    let (oh, ow) = (geom.conv_out(h).unwrap(), geom.conv_out(w).unwrap());
                    let cout = node.channels;
                    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
                    let d = ConvDims { n, cin, h, w, cout, oh, ow };
                    kernels::conv_forward(
                        x.data(),
                        self.params[weight].tensor.data(),
                        self.params[bias].tensor.data(),
                        d,
                        geom,
                        out.data_mut(),
                    );
                    (out, Cache::None)
                }
                Op::Deconv { geom, output_pad, weight, bias } => {
                    let x = &values[node.inputs[0]];
                    let (n, cin, h, w) = x.dims4();
                    let oh = geom.deconv_out(h, output_pad).unwrap();
                    let ow = geom.deconv_out(w, output_pad).unwrap();
                    let cout = node.channels;
                    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
                    let d = ConvDims { n, cin, h, w, cout, oh, ow };
                    kernels::deconv_forward(
                        x.data(),
                        self.params[weight].tensor.data(),
                        self.params[bias].tensor.data(),
                        d,
                        geom,
                        out.data_mut(),
                    );
                    (out, Cache::None)
                }
                Op::PixelAffine { weight, bias } => {
                    let x = &values[node.inputs[0]];
                    let (n, cin, h, w) = x.dims4();
                    let cout = node.channels;
                    let plane = h * w;
                    let mut out = Tensor::zeros(&[n, cout, h, w]);
                    let wt = self.params[weight].tensor.data();
                    let b = self.params[bias].tensor.data();
                    for s in 0..n {
                        let os = &mut out.data_mut()[s * cout * plane..(s + 1) * cout * plane];
                        for (o, chunk) in os.chunks_mut(plane).enumerate() {
                            chunk.fill(b[o]);
                        }
                        let xs = &x.data()[s * cin * plane..(s + 1) * cin * plane];
                        kernels::gemm(cout, cin, plane, wt, false, xs, false, os, 1.0);
                    }
                    (out, Cache::None)
                }
                Op::Dense { weight, bias } => {
                    let x = &values[node.inputs[0]];
                    let n = x.shape()[0];
                    let f = x.len() / n;
                    let out_f = node.channels;
                    let b = self.params[bias].tensor.data();
                    let mut out = Tensor::zeros(&[n, out_f, 1, 1]);
                    for s in 0..n {
                        out.data_mut()[s * out_f..(s + 1) * out_f].copy_from_slice(b);
                    }
                    kernels::gemm(n, f, out_f, x.data(), false, self.params[weight].tensor.data(), true, out.data_mut(), 1.0);
                    (out, Cache::None)
                }
                Op::BatchNorm { gamma, beta, mean, var } => {
                    let x = &values[node.inputs[0]];
                    let (n, c, h, w) = x.dims4();
                    let plane = h * w;
                    let m = (n * plane) as f64;
                    let g = self.params[gamma].tensor.data();
                    let bt = self.params[beta].tensor.data();
                    let mut out = Tensor::zeros(x.shape());
                    let mut xhat = vec![0.0; x.len()];
                    let mut inv_std = vec![0.0; c];
                    let mut batch_mean = vec![0.0; c];
                    let mut batch_var = vec![0.0; c];
                    for ch in 0..c {
                        let idx = |s: usize| (s * c + ch) * plane;
                        let (mu, var_c) = match mode {
                            Mode::Train => {
                                let mut sum = 0.0;
                                for s in 0..n {
                                    sum += x.data()[idx(s)..idx(s) + plane].iter().sum::<f64>();
                                }
                                let mu = sum / m;
                                let mut sq = 0.0;
                                for s in 0..n {
                                    sq += x.data()[idx(s)..idx(s) + plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                                }
                                batch_mean[ch] = mu;
                                batch_var[ch] = if m > 1.0 { sq / (m - 1.0) } else { 0.0 };
                                (mu, sq / m)
                            }
                            Mode::Eval => (self.buffers[mean].tensor.data()[ch], self.buffers[var].tensor.data()[ch]),
                        };
                        let inv = 1.0 / (var_c + BN_EPSILON).sqrt();
                        inv_std[ch] = inv;
                        for s in 0..n {
                            let base = idx(s);
                            for i in base..base + plane {
                                let xh = (x.data()[i] - mu) * inv;
                                xhat[i] = xh;
                                out.data_mut()[i] = g[ch] * xh + bt[ch];
                            }
                        }
                    }
                    if mode == Mode::Train {
                        stats.push(StatsUpdate { mean_buf: mean, var_buf: var, mean: batch_mean, var: batch_var });
                    }
                    (out, Cache::BatchNorm { xhat, inv_std })
                }
                Op::Act(kind) => {
                    let mut out = values[node.inputs[0]].clone();
                    let f: fn(f64, f64) -> f64 = match kind {
                        ActKind::LeakyRelu(_) => |v, a| if v > 0.0 { v } else { a * v },
                        ActKind::Relu => |v, _| v.max(0.0),
                        ActKind::Tanh => |v, _| v.tanh(),
                        ActKind::Sigmoid => |v, _| sigmoid(v),
                    };
                    let slope = if let ActKind::LeakyRelu(a) = kind { a } else { 0.0 };
                    out.data_mut().iter_mut().for_each(|v| *v = f(*v, slope));
                    (out, Cache::None)
                }
                Op::Dropout { rate } => {
                    let x = &values[node.inputs[0]];
                    if mode == Mode::Eval || rate == 0.0 {
                        (x.clone(), Cache::None)
                    } else {
                        let mut rng = Rng::new(derive_seed(seed, &[idx as u64]));
                        let keep = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..x.len()).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect();
                        let mut out = x.clone();
                        out.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                        (out, Cache::Dropout { mask })
                    }
                }
                Op::Concat => (
                    Tensor::concat_channels(&values[node.inputs[0]], &values[node.inputs[1]]),
                    Cache::None,
                ),
                Op::Flatten => {
                    let x = &values[node.inputs[0]];
                    let n = x.shape()[0];
                    let f = x.len() / n;
                    (x.clone().reshape(&[n, f, 1, 1]), Cache::None)
                }
            };
            check_finite(&out, node.layer)?;
            values.push(out);
            caches.push(cache);
        }
        Ok(Tape { values, caches, mode, stats })
    }

    /// Folds the batch statistics recorded in a train-mode tape into the running buffers.
    pub fn apply_running_stats(&mut self, tape: &Tape) {
        for st in &tape.stats {
            let m = self.buffers[st.mean_buf].tensor.data_mut();
            for (r, b) in m.iter_mut().zip(&st.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            let v = self.buffers[st.var_buf].tensor.data_mut();
            for (r, b) in v.iter_mut().zip(&st.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    /// Reverse pass from `grad_output` (same shape as the tape's output).
    #[allow(clippy::needless_range_loop)]
    pub fn backward(&self, tape: &Tape, grad_output: &Tensor, with_params: bool) -> Grads {
        assert_eq!(grad_output.shape(), tape.output().shape(), "gradient shape must match output");
        let count = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; count];
        grads[count - 1] = Some(grad_output.clone());
        let mut pgrads: Option<Vec<Tensor>> =
            with_params.then(|| self.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect());

        let accumulate = |grads: &mut Vec<Option<Tensor>>, node: NodeId, g: Tensor| match &mut grads[node] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };

        for idx in (1..count).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let x = &tape.values[node.inputs[0]];
            match node.op {
                Op::Input => unreachable!(),
                Op::Conv { geom, weight, bias } => {
                    let (n, cin, h, w) = x.dims4();
                    let (_, cout, oh, ow) = dy.dims4();
                    let d = ConvDims { n, cin, h, w, cout, oh, ow };
                    let dx = match pgrads.as_mut() {
                        Some(pg) => {
                            let (dw, db) = two_mut(pg, weight, bias);
                            kernels::conv_backward(x.data(), self.params[weight].tensor.data(), dy.data(), d, geom, Some((dw.data_mut(), db.data_mut())))
                        }
                        None => kernels::conv_backward(x.data(), self.params[weight].tensor.data(), dy.data(), d, geom, None),
                    };
                    accumulate(&mut grads, node.inputs[0], Tensor::from_vec(x.shape(), dx));
                }
                Op::Deconv { geom, weight, bias, .. } => {
                    let (n, cin, h, w) = x.dims4();
                    let (_, cout, oh, ow) = dy.dims4();
                    let d = ConvDims { n, cin, h, w, cout, oh, ow };
                    let dx = match pgrads.as_mut() {
                        Some(pg) => {
                            let (dw, db) = two_mut(pg, weight, bias);
                            kernels::deconv_backward(x.data(), self.params[weight].tensor.data(), dy.data(), d, geom, Some((dw.data_mut(), db.data_mut())))
                        }
                        None => kernels::deconv_backward(x.data(), self.params[weight].tensor.data(), dy.data(), d, geom, None),
                    };
                    accumulate(&mut grads, node.inputs[0], Tensor::from_vec(x.shape(), dx));
                }
                Op::PixelAffine { weight, bias } => {
                    let (n, cin, h, w) = x.dims4();
                    let cout = node.channels;
                    let plane = h * w;
                    let wt = self.params[weight].tensor.data();
                    let mut dx = Tensor::zeros(x.shape());
                    for s in 0..n {
                        let dys = &dy.data()[s * cout * plane..(s + 1) * cout * plane];
                        let xs = &x.data()[s * cin * plane..(s + 1) * cin * plane];
                        if let Some(pg) = pgrads.as_mut() {
                            let (dw, db) = two_mut(pg, weight, bias);
                            kernels::gemm(cout, plane, cin, dys, false, xs, true, dw.data_mut(), 1.0);
                            for (o, chunk) in dys.chunks(plane).enumerate() {
                                db.data_mut()[o] += chunk.iter().sum::<f64>();
                            }
                        }
                        let dxs = &mut dx.data_mut()[s * cin * plane..(s + 1) * cin * plane];
                        kernels::gemm(cin, cout, plane, wt, true, dys, false, dxs, 0.0);
                    }
                    accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::Dense { weight, bias } => {
                    let n = x.shape()[0];
                    let f = x.len() / n;
                    let out_f = node.channels;
                    if let Some(pg) = pgrads.as_mut() {
                        let (dw, db) = two_mut(pg, weight, bias);
                        kernels::gemm(out_f, n, f, dy.data(), true, x.data(), false, dw.data_mut(), 1.0);
                        for s in 0..n {
                            for o in 0..out_f {
                                db.data_mut()[o] += dy.data()[s * out_f + o];
                            }
                        }
                    }
                    let mut dx = Tensor::zeros(x.shape());
                    kernels::gemm(n, out_f, f, dy.data(), false, self.params[weight].tensor.data(), false, dx.data_mut(), 0.0);
                    accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::BatchNorm { gamma, beta, .. } => {
                    let Cache::BatchNorm { xhat, inv_std } = &tape.caches[idx] else { unreachable!() };
                    let (n, c, h, w) = x.dims4();
                    let plane = h * w;
                    let m = (n * plane) as f64;
                    let g = self.params[gamma].tensor.data();
                    let mut dx = Tensor::zeros(x.shape());
                    for ch in 0..c {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for s in 0..n {
                            let base = (s * c + ch) * plane;
                            for i in base..base + plane {
                                sum_dy += dy.data()[i];
                                sum_dy_xhat += dy.data()[i] * xhat[i];
                            }
                        }
                        if let Some(pg) = pgrads.as_mut() {
                            pg[gamma].data_mut()[ch] += sum_dy_xhat;
                            pg[beta].data_mut()[ch] += sum_dy;
                        }
                        let k = g[ch] * inv_std[ch];
                        for s in 0..n {
                            let base = (s * c + ch) * plane;
                            for i in base..base + plane {
                                dx.data_mut()[i] = match tape.mode {
                                    Mode::Train => k * (dy.data()[i] - sum_dy / m - xhat[i] * sum_dy_xhat / m),
                                    Mode::Eval => k * dy.data()[i],
                                };
                            }
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::Act(kind) => {
                    let y = &tape.values[idx];
                    let mut dx = dy;
                    match kind {
                        ActKind::LeakyRelu(a) => dx.data_mut().iter_mut().zip(x.data()).for_each(|(d, &v)| if v <= 0.0 { *d *= a }),
                        ActKind::Relu => dx.data_mut().iter_mut().zip(x.data()).for_each(|(d, &v)| if v <= 0.0 { *d = 0.0 }),
                        ActKind::Tanh => dx.data_mut().iter_mut().zip(y.data()).for_each(|(d, &t)| *d *= 1.0 - t * t),
                        ActKind::Sigmoid => dx.data_mut().iter_mut().zip(y.data()).for_each(|(d, &s)| *d *= s * (1.0 - s)),
                    }
                    accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::Dropout { .. } => {
                    let mut dx = dy;
                    if let Cache::Dropout { mask } = &tape.caches[idx] {
                        dx.data_mut().iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                    }
                    accumulate(&mut grads, node.inputs[0], dx);
                }
                Op::Concat => {
                    let first = tape.values[node.inputs[0]].shape()[1];
                    let (a, b) = dy.split_channels(first);
                    accumulate(&mut grads, node.inputs[0], a);
                    accumulate(&mut grads, node.inputs[1], b);
                }
                Op::Flatten => accumulate(&mut grads, node.inputs[0], dy.reshape(x.shape())),
            }
        }
        let input = grads[0].take().unwrap_or_else(|| Tensor::zeros(tape.values[0].shape()));
        Grads { params: pgrads, input }
    }

    /// Gradients of a scalar loss of the output with respect to every
    /// trainable parameter, keyed by parameter name. `loss` returns the loss
    /// value and its gradient with respect to the output.
    pub fn gradients<F>(&self, input: &Tensor, mode: Mode, seed: u64, loss: F) -> Result<(f64, BTreeMap<String, Tensor>), NetworkError>
    where
        F: FnOnce(&Tensor) -> (f64, Tensor),
    {
        let tape = self.forward(input, mode, seed)?;
        let (value, dout) = loss(tape.output());
        let grads = self.backward(&tape, &dout, true);
        let named = self
            .params
            .iter()
            .zip(grads.params.expect("parameter gradients requested"))
            .map(|(p, g)| (p.name.clone(), g))
            .collect();
        Ok((value, named))
    }
}

fn two_mut(v: &mut [Tensor], a: usize, b: usize) -> (&mut Tensor, &mut Tensor) {
    assert!(a < b, "weight is registered before bias");
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
