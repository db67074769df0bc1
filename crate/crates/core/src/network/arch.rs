//! Layer tables for the U-Net generator and the paired-image discriminator.

use std::fmt::Write as _;

use super::graph::{ActKind, Graph, GraphBuilder, Grads, Mode, NodeId, Tape};
use super::kernels::ConvGeom;
use super::NetworkError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub image_size: usize,
    /// Number of encoder layers.
    pub depth: usize,
    pub base_width: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    pub skip_connections: bool,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            depth: 8,
            base_width: 64,
            input_channels: 1,
            output_channels: 3,
            skip_connections: true,
            leaky_slope: 0.2,
        }
    }
}

impl ArchConfig {
    /// Desk-scale configuration: 64x64 inputs, width 8, six encoder layers.
    pub fn tiny() -> Self {
        Self { image_size: 64, depth: 6, base_width: 8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::InvalidConfig(m));
        if !self.image_size.is_power_of_two() || self.image_size < 2 {
            return bad(format!("image_size {} must be a power of two >= 2", self.image_size));
        }
        let max_depth = self.image_size.trailing_zeros() as usize;
        if self.depth < 1 || self.depth > max_depth {
            return bad(format!("depth {} must be in 1..={max_depth} for image_size {}", self.depth, self.image_size));
        }
        if self.base_width < 1 || self.input_channels < 1 || self.output_channels < 1 {
            return bad("base_width and channel counts must be >= 1".into());
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky_slope {} must be finite and >= 0", self.leaky_slope));
        }
        Ok(())
    }

    /// Output channels of encoder layer `k` (1-based).
    pub fn encoder_channels(&self, k: usize) -> usize {
        self.base_width * (1usize << (k - 1).min(3))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
    FullyConnected,
    /// Reshape to a feature vector; listed as a fully connected row in the tables.
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
    None,
}

impl Activation {
    pub fn label(self) -> &'static str {
        match self {
            Activation::LeakyRelu => "Leaky ReLU",
            Activation::Relu => "ReLU",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "Sigmoid",
            Activation::None => "-",
        }
    }
}

/// One row of a layer table.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: Option<(usize, usize)>,
    pub stride: Option<(usize, usize)>,
    pub out_channels: usize,
    /// Width of the encoder activation concatenated onto this row's output.
    pub concat_channels: Option<usize>,
    pub batch_norm: bool,
    pub activation: Activation,
    pub dropout: f64,
    /// 1-based index of the encoder layer feeding the skip concatenation.
    pub skip_source: Option<usize>,
    /// Flatten rows: `(height, width, channels)` of the flattened map.
    pub flatten_dims: Option<(usize, usize, usize)>,
}

impl LayerSpec {
    fn conv_like(name: String, kind: LayerKind, out_channels: usize, batch_norm: bool, activation: Activation) -> Self {
        Self {
            name,
            kind,
            kernel: Some((5, 5)),
            stride: Some((2, 2)),
            out_channels,
            concat_channels: None,
            batch_norm,
            activation,
            dropout: 0.0,
            skip_source: None,
            flatten_dims: None,
        }
    }

    /// Channel column as printed in the tables (`512+512`, `16*16*512`).
    pub fn channel_label(&self) -> String {
        match (self.flatten_dims, self.concat_channels) {
            (Some((h, w, c)), _) => format!("{h}*{w}*{c}"),
            (None, Some(extra)) => format!("{}+{extra}", self.out_channels),
            (None, None) => self.out_channels.to_string(),
        }
    }

    /// Channels leaving this row, including any concatenated skip.
    pub fn total_channels(&self) -> usize {
        self.out_channels + self.concat_channels.unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetRole {
    Generator,
    Discriminator,
}

/// Layer table plus the compiled graph that realizes it.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub role: NetRole,
    pub config: ArchConfig,
    pub layers: Vec<LayerSpec>,
    pub graph: Graph,
}

impl NetworkGraph {
    pub fn forward(&self, input: &Tensor, mode: Mode, seed: u64) -> Result<Tape, NetworkError> {
        self.graph.forward(input, mode, seed)
    }

    pub fn predict(&self, input: &Tensor, mode: Mode, seed: u64) -> Result<Tensor, NetworkError> {
        Ok(self.graph.forward(input, mode, seed)?.into_output())
    }

    pub fn backward(&self, tape: &Tape, grad_output: &Tensor, with_params: bool) -> Grads {
        self.graph.backward(tape, grad_output, with_params)
    }

    pub fn init_weights(&mut self, seed: u64) {
        self.graph.init_weights(seed);
    }

    pub fn input_channels(&self) -> usize {
        self.graph.input_channels()
    }
}

pub fn build_generator(cfg: &ArchConfig) -> Result<NetworkGraph, NetworkError> {
    cfg.validate()?;
    let depth = cfg.depth;
    let geom = ConvGeom::HALVING;
    let mut b = GraphBuilder::new(cfg.input_channels);
    let mut layers = Vec::with_capacity(2 * depth + 1);

    let mut encoder: Vec<NodeId> = Vec::with_capacity(depth);
    let mut x = b.input();
    for k in 1..=depth {
        let name = format!("e{k}");
        let cout = cfg.encoder_channels(k);
        b.set_layer(layers.len());
        layers.push(LayerSpec::conv_like(name.clone(), LayerKind::Conv, cout, true, Activation::LeakyRelu));
        x = b.conv(x, cout, geom, &name);
        x = b.batch_norm(x, &name);
        x = b.act(x, ActKind::LeakyRelu(cfg.leaky_slope));
        encoder.push(x);
    }

    for k in 1..=depth {
        let name = format!("d{k}");
        b.set_layer(layers.len());
        let last = k == depth;
        let cout = if last { cfg.output_channels } else { cfg.encoder_channels(depth - k) };
        let mut spec = if last {
            LayerSpec::conv_like(name.clone(), LayerKind::Deconv, cout, false, Activation::None)
        } else {
            LayerSpec::conv_like(name.clone(), LayerKind::Deconv, cout, true, Activation::Relu)
        };
        x = b.deconv(x, cout, geom, 1, &name);
        if !last {
            x = b.batch_norm(x, &name);
            x = b.act(x, ActKind::Relu);
            if k <= 3 {
                spec.dropout = 0.5;
                x = b.dropout(x, 0.5);
            }
            if cfg.skip_connections {
                let src = depth - k;
                spec.skip_source = Some(src);
                spec.concat_channels = Some(cfg.encoder_channels(src));
                x = b.concat(x, encoder[src - 1]);
            }
        }
        layers.push(spec);
    }

    b.set_layer(layers.len());
    layers.push(LayerSpec {
        name: "out".into(),
        kind: LayerKind::FullyConnected,
        kernel: None,
        stride: None,
        out_channels: cfg.output_channels,
        concat_channels: None,
        batch_norm: false,
        activation: Activation::Tanh,
        dropout: 0.0,
        skip_source: None,
        flatten_dims: None,
    });
    x = b.pixel_affine(x, cfg.output_channels, "out");
    b.act(x, ActKind::Tanh);

    Ok(NetworkGraph { role: NetRole::Generator, config: cfg.clone(), layers, graph: b.finish() })
}

pub const DISCRIMINATOR_CONVS: usize = 4;

pub fn build_discriminator(cfg: &ArchConfig) -> Result<NetworkGraph, NetworkError> {
    cfg.validate()?;
    let reduce = 1usize << DISCRIMINATOR_CONVS;
    if cfg.image_size < reduce {
        return Err(NetworkError::InvalidConfig(format!(
            "discriminator needs image_size >= {reduce}, got {}",
            cfg.image_size
        )));
    }
    let geom = ConvGeom::HALVING;
    let mut b = GraphBuilder::new(cfg.input_channels + cfg.output_channels);
    let mut layers = Vec::with_capacity(DISCRIMINATOR_CONVS + 2);
    let mut x = b.input();
    for k in 0..DISCRIMINATOR_CONVS {
        let name = format!("h{k}");
        let cout = cfg.base_width << k;
        b.set_layer(layers.len());
        layers.push(LayerSpec::conv_like(name.clone(), LayerKind::Conv, cout, true, Activation::LeakyRelu));
        x = b.conv(x, cout, geom, &name);
        x = b.batch_norm(x, &name);
        x = b.act(x, ActKind::LeakyRelu(cfg.leaky_slope));
    }
    let side = cfg.image_size / reduce;
    let channels = cfg.base_width << (DISCRIMINATOR_CONVS - 1);
    let features = side * side * channels;
    b.set_layer(layers.len());
    layers.push(LayerSpec {
        name: format!("h{DISCRIMINATOR_CONVS}"),
        kind: LayerKind::Flatten,
        kernel: None,
        stride: None,
        out_channels: features,
        concat_channels: None,
        batch_norm: false,
        activation: Activation::None,
        dropout: 0.0,
        skip_source: None,
        flatten_dims: Some((side, side, channels)),
    });
    x = b.flatten(x, features);
    b.set_layer(layers.len());
    layers.push(LayerSpec {
        name: "fc".into(),
        kind: LayerKind::FullyConnected,
        kernel: None,
        stride: None,
        out_channels: 1,
        concat_channels: None,
        batch_norm: false,
        activation: Activation::Sigmoid,
        dropout: 0.0,
        skip_source: None,
        flatten_dims: None,
    });
    x = b.dense(x, features, 1, "fc");
    b.act(x, ActKind::Sigmoid);

    Ok(NetworkGraph { role: NetRole::Discriminator, config: cfg.clone(), layers, graph: b.finish() })
}

/// Output `(channels, height, width)` of every table row for one input sample.
pub fn infer_shapes(net: &NetworkGraph, input: (usize, usize, usize)) -> Result<Vec<(usize, usize, usize)>, NetworkError> {
    let node_shapes = net.graph.node_shapes(input)?;
    let mut rows = vec![None; net.layers.len()];
    for (node, shape) in net.graph.nodes().iter().zip(node_shapes).skip(1) {
        rows[node.layer] = Some(shape);
    }
    Ok(rows.into_iter().map(|s| s.expect("every row owns at least one node")).collect())
}

pub fn count_parameters(graph: &Graph) -> usize {
    graph.parameter_count()
}

/// Renders the layer table in the column layout of the published tables.
pub fn render_layer_table(net: &NetworkGraph) -> String {
    let mut out = String::new();
    let title = match net.role {
        NetRole::Generator => "Generator",
        NetRole::Discriminator => "Discriminator",
    };
    let _ = writeln!(out, "{title}");
    let _ = writeln!(
        out,
        "{:<22} {:<6} {:<6} {:<12} {:<5} {:<11} remark",
        "operation", "kernel", "stride", "filters", "norm", "activation"
    );
    for l in &net.layers {
        let op = match l.kind {
            LayerKind::Conv => format!("{}: conv", l.name),
            LayerKind::Deconv => format!("{}: deconv", l.name),
            LayerKind::Flatten => format!("{}: fully-connected", l.name),
            LayerKind::FullyConnected if l.name.starts_with('h') => format!("{}: fully-connected", l.name),
            LayerKind::FullyConnected => "fully-connected".to_string(),
        };
        let dims = |d: Option<(usize, usize)>| d.map_or("-".to_string(), |(a, b)| format!("{a}x{b}"));
        let norm = match (l.kind, l.batch_norm) {
            (_, true) => "yes",
            (LayerKind::Conv | LayerKind::Deconv, false) => "-",
            (_, false) if net.role == NetRole::Discriminator => "no",
            _ => "-",
        };
        let mut remark = Vec::new();
        if let Some(src) = l.skip_source {
            remark.push(format!("concat[{},e{src}]", l.name));
        }
        if l.dropout > 0.0 {
            remark.push(format!("dropout:{}", l.dropout));
        }
        let remark = if remark.is_empty() { "-".to_string() } else { remark.join(" ") };
        let _ = writeln!(
            out,
            "{:<22} {:<6} {:<6} {:<12} {:<5} {:<11} {}",
            op,
            dims(l.kernel),
            dims(l.stride),
            l.channel_label(),
            norm,
            l.activation.label(),
            remark
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_generator_table() {
        let g = build_generator(&ArchConfig::default()).unwrap();
        assert_eq!(g.layers.len(), 17);
        let enc: Vec<_> = g.layers[..8].iter().map(|l| l.out_channels).collect();
        assert_eq!(enc, [64, 128, 256, 512, 512, 512, 512, 512]);
        let dec: Vec<_> = g.layers[8..15].iter().map(|l| l.channel_label()).collect();
        assert_eq!(dec, ["512+512", "512+512", "512+512", "512+512", "256+256", "128+128", "64+64"]);
        let drop: Vec<_> = g.layers.iter().filter(|l| l.dropout > 0.0).map(|l| l.name.as_str()).collect();
        assert_eq!(drop, ["d1", "d2", "d3"]);
        assert!(g.layers.iter().all(|l| l.dropout == 0.0 || l.dropout == 0.5));
        assert_eq!(g.layers[8].skip_source, Some(7));
        assert_eq!(g.layers[14].skip_source, Some(1));
        assert_eq!(g.layers[15].channel_label(), "3");
        assert!(!g.layers[15].batch_norm);
        assert_eq!(g.layers[16].activation, Activation::Tanh);
        for l in &g.layers[..16] {
            assert_eq!((l.kernel, l.stride), (Some((5, 5)), Some((2, 2))));
        }
    }

    #[test]
    fn shape_chain() {
        let g = build_generator(&ArchConfig::default()).unwrap();
        let shapes = infer_shapes(&g, (1, 256, 256)).unwrap();
        for k in 1..=8 {
            assert_eq!((shapes[k - 1].1, shapes[k - 1].2), (256 >> k, 256 >> k));
        }
        assert_eq!(shapes[7], (512, 1, 1));
        assert_eq!(shapes[8], (1024, 2, 2));
        assert_eq!(*shapes.last().unwrap(), (3, 256, 256));

        let cfg = ArchConfig { skip_connections: false, ..ArchConfig::default() };
        let plain = build_generator(&cfg).unwrap();
        let ps = infer_shapes(&plain, (1, 256, 256)).unwrap();
        assert_eq!(plain.layers[8].channel_label(), "512");
        for (a, b) in shapes.iter().zip(&ps) {
            assert_eq!((a.1, a.2), (b.1, b.2));
        }
    }

    #[test]
    fn discriminator_shapes() {
        let d = build_discriminator(&ArchConfig::default()).unwrap();
        assert_eq!(d.layers.len(), 6);
        assert_eq!(d.layers[4].channel_label(), "16*16*512");
        let s = infer_shapes(&d, (4, 256, 256)).unwrap();
        assert_eq!(&s[..4], &[(64, 128, 128), (128, 64, 64), (256, 32, 32), (512, 16, 16)]);
        assert_eq!(s[4], (16 * 16 * 512, 1, 1));
        assert_eq!(s[5], (1, 1, 1));

        let small = build_discriminator(&ArchConfig::tiny()).unwrap();
        assert_eq!(small.layers[4].flatten_dims, Some((4, 4, 64)));
    }

    #[test]
    fn shape_errors() {
        let g = build_generator(&ArchConfig::tiny()).unwrap();
        assert!(matches!(infer_shapes(&g, (3, 64, 64)), Err(NetworkError::ShapeMismatch { layer: 0, .. })));
        // 48 is not a power of two; the skip concat fails somewhere in the decoder.
        assert!(matches!(infer_shapes(&g, (1, 48, 48)), Err(NetworkError::ShapeMismatch { .. })));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            ArchConfig { image_size: 100, ..ArchConfig::default() },
            ArchConfig { depth: 9, ..ArchConfig::default() },
            ArchConfig { depth: 0, ..ArchConfig::default() },
            ArchConfig { base_width: 0, ..ArchConfig::default() },
        ] {
            assert!(matches!(build_generator(&cfg), Err(NetworkError::InvalidConfig(_))));
        }
        let cfg = ArchConfig { image_size: 8, depth: 3, ..ArchConfig::default() };
        assert!(build_discriminator(&cfg).is_err());
    }

    #[test]
    fn parameter_counts() {
        let d = build_discriminator(&ArchConfig::default()).unwrap();
        assert_eq!(d.graph.param("fc.weight").unwrap().len() + d.graph.param("fc.bias").unwrap().len(), 131_073);
        assert_eq!(count_parameters(&GraphBuilder::new(1).finish()), 0);

        let mut b = GraphBuilder::new(1);
        let x = b.input();
        b.conv(x, 64, ConvGeom::HALVING, "c");
        assert_eq!(count_parameters(&b.finish()), 1664);

        // every generator conv/deconv: k*k*in*out + out, plus 2*out for batch norm
        let cfg = ArchConfig::tiny();
        let g = build_generator(&cfg).unwrap();
        let shapes = infer_shapes(&g, (1, 64, 64)).unwrap();
        let mut expected = 0;
        let mut cin = 1;
        for (l, s) in g.layers.iter().zip(&shapes) {
            let k = l.kernel.map_or(1, |(a, _)| a);
            expected += k * k * cin * l.out_channels + l.out_channels;
            if l.batch_norm {
                expected += 2 * l.out_channels;
            }
            cin = s.0;
        }
        assert_eq!(count_parameters(&g.graph), expected);
    }

    #[test]
    fn table_text() {
        let g = build_generator(&ArchConfig::default()).unwrap();
        let t = render_layer_table(&g);
        assert!(t.contains("e1: conv"));
        assert!(t.lines().any(|l| l.starts_with("d1: deconv") && l.contains("512+512") && l.contains("concat[d1,e7] dropout:0.5")));
    }
}
