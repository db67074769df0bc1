//! `key = value` run configuration shared by every subcommand.
//!
//! One key per line, `#` starts a comment, unknown keys are errors. Keys are
//! the field names of the training, architecture, augmentation and phantom
//! settings; phantom fields that would collide carry a `phantom_` prefix.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::network::ArchConfig;
use crate::phantom::PhantomSpec;
use crate::pipeline::AugmentSpec;
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}")]
    InvalidValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::InvalidValue { key: key.into(), value: value.into() })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::InvalidValue { key: key.into(), value: value.into() }),
    }
}

/// Splits config text into `(line, key, value)` triples.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub const ARCH_KEYS: [&str; 7] =
    ["image_size", "depth", "base_width", "input_channels", "output_channels", "skip_connections", "leaky_slope"];
pub const TRAIN_KEYS: [&str; 10] = [
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "batch_size",
    "epochs",
    "lambda_l1",
    "seed",
    "checkpoint_every",
    "target_scale",
];
pub const AUGMENT_KEYS: [&str; 7] = [
    "rotation_degrees",
    "allow_hflip",
    "allow_vflip",
    "flip_probability",
    "max_translate",
    "intensity_delta",
    "expansion_factor",
];
pub const PHANTOM_KEYS: [&str; 9] = [
    "phantom_image_size",
    "teeth_min",
    "teeth_max",
    "caries_probability",
    "crown_probability",
    "restoration_probability",
    "root_canal_probability",
    "noise_sigma",
    "blur_radius",
];
pub const PATH_KEYS: [&str; 2] = ["data", "out"];

/// Returns `Ok(false)` when the key is not an architecture key.
pub fn set_arch_key(a: &mut ArchConfig, key: &str, value: &str) -> Result<bool, ConfigError> {
    match key {
        "image_size" => a.image_size = parse(key, value)?,
        "depth" => a.depth = parse(key, value)?,
        "base_width" => a.base_width = parse(key, value)?,
        "input_channels" => a.input_channels = parse(key, value)?,
        "output_channels" => a.output_channels = parse(key, value)?,
        "skip_connections" => a.skip_connections = parse_bool(key, value)?,
        "leaky_slope" => a.leaky_slope = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn set_train_key(t: &mut TrainConfig, key: &str, value: &str) -> Result<bool, ConfigError> {
    match key {
        "learning_rate" => t.learning_rate = parse(key, value)?,
        "beta1" => t.beta1 = parse(key, value)?,
        "beta2" => t.beta2 = parse(key, value)?,
        "epsilon" => t.epsilon = parse(key, value)?,
        "batch_size" => t.batch_size = parse(key, value)?,
        "epochs" => t.epochs = parse(key, value)?,
        "lambda_l1" => t.lambda_l1 = parse(key, value)?,
        "seed" => t.seed = parse(key, value)?,
        "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
        "target_scale" => t.target_scale = parse(key, value)?,
        _ => return set_arch_key(&mut t.arch, key, value),
    }
    Ok(true)
}

fn set_augment_key(s: &mut AugmentSpec, key: &str, value: &str) -> Result<bool, ConfigError> {
    match key {
        "rotation_degrees" => {
            s.rotation_degrees = value
                .split(',')
                .map(|v| parse::<f64>(key, v.trim()))
                .collect::<Result<_, _>>()?;
        }
        "allow_hflip" => s.allow_hflip = parse_bool(key, value)?,
        "allow_vflip" => s.allow_vflip = parse_bool(key, value)?,
        "flip_probability" => s.flip_probability = parse(key, value)?,
        "max_translate" => s.max_translate = parse(key, value)?,
        "intensity_delta" => s.intensity_delta = parse(key, value)?,
        "expansion_factor" => s.expansion_factor = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_phantom_key(p: &mut PhantomSpec, key: &str, value: &str) -> Result<bool, ConfigError> {
    let probs = &mut p.class_probabilities;
    match key {
        "phantom_image_size" => p.image_size = parse(key, value)?,
        "teeth_min" => p.teeth_count_range.0 = parse(key, value)?,
        "teeth_max" => p.teeth_count_range.1 = parse(key, value)?,
        "caries_probability" => probs.caries = parse(key, value)?,
        "crown_probability" => probs.crown = parse(key, value)?,
        "restoration_probability" => probs.restoration = parse(key, value)?,
        "root_canal_probability" => probs.root_canal = parse(key, value)?,
        "noise_sigma" => p.noise_sigma = parse(key, value)?,
        "blur_radius" => p.blur_radius = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn render_arch(out: &mut String, a: &ArchConfig) {
    let _ = writeln!(out, "image_size = {}", a.image_size);
    let _ = writeln!(out, "depth = {}", a.depth);
    let _ = writeln!(out, "base_width = {}", a.base_width);
    let _ = writeln!(out, "input_channels = {}", a.input_channels);
    let _ = writeln!(out, "output_channels = {}", a.output_channels);
    let _ = writeln!(out, "skip_connections = {}", a.skip_connections);
    let _ = writeln!(out, "leaky_slope = {}", a.leaky_slope);
}

pub fn render_train(out: &mut String, t: &TrainConfig) {
    let _ = writeln!(out, "learning_rate = {}", t.learning_rate);
    let _ = writeln!(out, "beta1 = {}", t.beta1);
    let _ = writeln!(out, "beta2 = {}", t.beta2);
    let _ = writeln!(out, "epsilon = {}", t.epsilon);
    let _ = writeln!(out, "batch_size = {}", t.batch_size);
    let _ = writeln!(out, "epochs = {}", t.epochs);
    let _ = writeln!(out, "lambda_l1 = {}", t.lambda_l1);
    let _ = writeln!(out, "seed = {}", t.seed);
    let _ = writeln!(out, "checkpoint_every = {}", t.checkpoint_every);
    let _ = writeln!(out, "target_scale = {}", t.target_scale);
    render_arch(out, &t.arch);
}

impl TrainConfig {
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        render_train(&mut s, self);
        s
    }

    /// Parses text containing only training and architecture keys.
    pub fn from_config_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = TrainConfig::default();
        for (_, k, v) in parse_lines(text)? {
            if !set_train_key(&mut cfg, &k, &v)? {
                return Err(ConfigError::UnknownKey(k));
            }
        }
        Ok(cfg)
    }
}

/// Every setting a subcommand may need, with paper values as defaults.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub augment: AugmentSpec,
    pub phantom: PhantomSpec,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Small-scale settings: [`TrainConfig::tiny`] and [`PhantomSpec::tiny`].
    pub fn tiny() -> Self {
        let mut c = Self { train: TrainConfig::tiny(), phantom: PhantomSpec::tiny(), ..Self::default() };
        c.augment.max_translate = 4;
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if set_train_key(&mut self.train, key, value)?
            || set_augment_key(&mut self.augment, key, value)?
            || set_phantom_key(&mut self.phantom, key, value)?
        {
            return Ok(());
        }
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies config text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (_, k, v) in parse_lines(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: 0, text: assignment.to_string() })?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.phantom.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Fully resolved configuration, parseable by [`RunConfig::apply_text`].
    pub fn render(&self) -> String {
        let mut s = String::from("# training\n");
        render_train(&mut s, &self.train);
        let a = &self.augment;
        s.push_str("# augmentation\n");
        let rot: Vec<String> = a.rotation_degrees.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "rotation_degrees = {}", rot.join(","));
        let _ = writeln!(s, "allow_hflip = {}", a.allow_hflip);
        let _ = writeln!(s, "allow_vflip = {}", a.allow_vflip);
        let _ = writeln!(s, "flip_probability = {}", a.flip_probability);
        let _ = writeln!(s, "max_translate = {}", a.max_translate);
        let _ = writeln!(s, "intensity_delta = {}", a.intensity_delta);
        let _ = writeln!(s, "expansion_factor = {}", a.expansion_factor);
        let p = &self.phantom;
        s.push_str("# phantoms\n");
        let _ = writeln!(s, "phantom_image_size = {}", p.image_size);
        let _ = writeln!(s, "teeth_min = {}", p.teeth_count_range.0);
        let _ = writeln!(s, "teeth_max = {}", p.teeth_count_range.1);
        let _ = writeln!(s, "caries_probability = {}", p.class_probabilities.caries);
        let _ = writeln!(s, "crown_probability = {}", p.class_probabilities.crown);
        let _ = writeln!(s, "restoration_probability = {}", p.class_probabilities.restoration);
        let _ = writeln!(s, "root_canal_probability = {}", p.class_probabilities.root_canal);
        let _ = writeln!(s, "noise_sigma = {}", p.noise_sigma);
        let _ = writeln!(s, "blur_radius = {}", p.blur_radius);
        if self.data.is_some() || self.out.is_some() {
            s.push_str("# paths\n");
        }
        if let Some(d) = &self.data {
            let _ = writeln!(s, "data = {}", d.display());
        }
        if let Some(o) = &self.out {
            let _ = writeln!(s, "out = {}", o.display());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_paper_values() {
        let c = RunConfig::default();
        assert_eq!(c.train.learning_rate, 2e-4);
        assert_eq!((c.train.beta1, c.train.beta2, c.train.epsilon), (0.5, 0.999, 1e-8));
        assert_eq!((c.train.batch_size, c.train.epochs), (2, 20));
        assert_eq!(c.train.lambda_l1, 100.0);
        assert_eq!(c.train.arch, ArchConfig::default());
        assert_eq!(c.augment.expansion_factor, 360);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nlearning_rate = 0.001  # trailing\n\nskip_connections = false\nrotation_degrees = 0, 90\nteeth_max = 5\n")
            .unwrap();
        assert_eq!(c.train.learning_rate, 0.001);
        assert!(!c.train.arch.skip_connections);
        assert_eq!(c.augment.rotation_degrees, vec![0.0, 90.0]);
        assert_eq!(c.phantom.teeth_count_range.1, 5);
        c.apply_override("depth=6").unwrap();
        assert_eq!(c.train.arch.depth, 6);
    }

    #[test]
    fn errors() {
        let mut c = RunConfig::default();
        assert_eq!(c.apply_text("bogus = 1"), Err(ConfigError::UnknownKey("bogus".into())));
        assert!(matches!(c.apply_text("no equals sign"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(c.apply_text("depth = x"), Err(ConfigError::InvalidValue { .. })));
        assert!(TrainConfig::from_config_text("noise_sigma = 3").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::tiny();
        c.train.seed = 12345;
        c.train.learning_rate = 3.3e-5;
        c.out = Some("runs/a".into());
        let mut back = RunConfig::default();
        back.apply_text(&c.render()).unwrap();
        assert_eq!(back, c);
        let t = TrainConfig::from_config_text(&c.train.to_config_text()).unwrap();
        assert_eq!(t, c.train);
    }
}
