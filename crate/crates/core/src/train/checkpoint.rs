//! Binary checkpoint container with a SHA-256 payload checksum.
//!
//! Layout: magic, format version (u32), payload length (u64), payload,
//! digest of the payload. All integers little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AdamState, TrainConfig, TrainError, TrainState};
use crate::network::{build_discriminator, build_generator, Graph, NetworkGraph};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DGANCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Named parameter and buffer tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
}

impl NetState {
    fn capture(g: &Graph) -> Self {
        Self {
            params: g.params().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
            buffers: g.buffers().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
        }
    }

    fn restore(&self, g: &mut Graph) -> Result<(), TrainError> {
        let mismatch = || TrainError::VersionMismatch("network layout differs from checkpoint".into());
        if self.params.len() != g.params().len() || self.buffers.len() != g.buffers().len() {
            return Err(mismatch());
        }
        for (dst, (name, t)) in g.params_mut().iter_mut().zip(&self.params) {
            if &dst.name != name || dst.tensor.shape() != t.shape() {
                return Err(mismatch());
            }
            dst.tensor = t.clone();
        }
        for (dst, (name, t)) in g.buffers_mut().iter_mut().zip(&self.buffers) {
            if &dst.name != name || dst.tensor.shape() != t.shape() {
                return Err(mismatch());
            }
            dst.tensor = t.clone();
        }
        Ok(())
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub epoch: u64,
    pub config: TrainConfig,
    /// Base seed of every derived random stream.
    pub rng_seed: u64,
    pub generator: NetState,
    pub discriminator: NetState,
    pub g_adam: AdamState,
    pub d_adam: AdamState,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &TrainConfig) -> Self {
        Self {
            step: state.step,
            epoch: state.epoch,
            config: config.clone(),
            rng_seed: config.seed,
            generator: NetState::capture(&state.generator.graph),
            discriminator: NetState::capture(&state.discriminator.graph),
            g_adam: state.g_adam.clone(),
            d_adam: state.d_adam.clone(),
        }
    }

    /// Rebuilds the training state; the architecture must match `config`.
    pub fn into_state(self, config: &TrainConfig) -> Result<TrainState, TrainError> {
        if self.config.arch != config.arch {
            return Err(TrainError::VersionMismatch(format!(
                "checkpoint architecture {:?} differs from configured {:?}",
                self.config.arch, config.arch
            )));
        }
        let mut generator = build_generator(&config.arch)?;
        let mut discriminator = build_discriminator(&config.arch)?;
        self.generator.restore(&mut generator.graph)?;
        self.discriminator.restore(&mut discriminator.graph)?;
        check_moments(&self.g_adam, &generator)?;
        check_moments(&self.d_adam, &discriminator)?;
        Ok(TrainState {
            generator,
            discriminator,
            g_adam: self.g_adam,
            d_adam: self.d_adam,
            step: self.step,
            epoch: self.epoch,
        })
    }

    /// Generator only, for inference.
    pub fn generator(&self) -> Result<NetworkGraph, TrainError> {
        let mut g = build_generator(&self.config.arch)?;
        self.generator.restore(&mut g.graph)?;
        Ok(g)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        put_str(&mut p, &self.config.to_config_text());
        for v in [self.step, self.epoch, self.rng_seed, self.g_adam.t, self.d_adam.t] {
            p.extend_from_slice(&v.to_le_bytes());
        }
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        for (prefix, net, adam) in
            [("G", &self.generator, &self.g_adam), ("D", &self.discriminator, &self.d_adam)]
        {
            for (n, t) in &net.params {
                named.push((format!("{prefix}/param/{n}"), t));
            }
            for (n, t) in &net.buffers {
                named.push((format!("{prefix}/buffer/{n}"), t));
            }
            for (i, (n, _)) in net.params.iter().enumerate() {
                named.push((format!("{prefix}/adam_m/{n}"), &adam.m[i]));
                named.push((format!("{prefix}/adam_v/{n}"), &adam.v[i]));
            }
        }
        p.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            put_str(&mut p, &name);
            p.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                p.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                p.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(p.len() + 52);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(&p);
        out.extend_from_slice(&Sha256::digest(&p));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let corrupt = |m: &str| TrainError::CorruptChecksum(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(TrainError::VersionMismatch(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() != 20 + len + 32 {
            return Err(corrupt("length does not match header"));
        }
        let payload = &bytes[20..20 + len];
        if Sha256::digest(payload).as_slice() != &bytes[20 + len..] {
            return Err(corrupt("payload digest mismatch"));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let config = TrainConfig::from_config_text(&r.string()?)
            .map_err(|e| corrupt(&format!("config snapshot: {e}")))?;
        let (step, epoch, rng_seed, g_t, d_t) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let count = r.u32()? as usize;
        let mut nets = [
            (NetState { params: vec![], buffers: vec![] }, Vec::new(), Vec::new()),
            (NetState { params: vec![], buffers: vec![] }, Vec::new(), Vec::new()),
        ];
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            let t = Tensor::from_vec(&shape, data);
            let mut parts = name.splitn(3, '/');
            let (net, kind, local) = (parts.next(), parts.next(), parts.next());
            let slot = match net {
                Some("G") => &mut nets[0],
                Some("D") => &mut nets[1],
                _ => return Err(corrupt("bad tensor name")),
            };
            let local = local.ok_or_else(|| corrupt("bad tensor name"))?.to_string();
            match kind {
                Some("param") => slot.0.params.push((local, t)),
                Some("buffer") => slot.0.buffers.push((local, t)),
                Some("adam_m") => slot.1.push(t),
                Some("adam_v") => slot.2.push(t),
                _ => return Err(corrupt("bad tensor name")),
            }
        }
        if r.pos != payload.len() {
            return Err(corrupt("trailing bytes"));
        }
        let [(generator, gm, gv), (discriminator, dm, dv)] = nets;
        Ok(Self {
            step,
            epoch,
            config,
            rng_seed,
            generator,
            discriminator,
            g_adam: AdamState { t: g_t, m: gm, v: gv },
            d_adam: AdamState { t: d_t, m: dm, v: dv },
        })
    }
}

fn check_moments(a: &AdamState, net: &NetworkGraph) -> Result<(), TrainError> {
    let ok = a.m.len() == net.graph.params().len()
        && a.v.len() == a.m.len()
        && net.graph.params().iter().zip(a.m.iter().zip(&a.v)).all(|(p, (m, v))| {
            p.tensor.shape() == m.shape() && p.tensor.shape() == v.shape()
        });
    if ok {
        Ok(())
    } else {
        Err(TrainError::VersionMismatch("optimizer state does not match network".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::CorruptChecksum("payload ends early".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, TrainError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| TrainError::CorruptChecksum("invalid utf-8".into()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
