//! Alternating discriminator/generator training.

mod adam;
mod checkpoint;

use std::path::PathBuf;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NetState, FORMAT_VERSION, MAGIC};

use crate::codec::{mask_to_planes, normalize_gray, ClassPalette};
use crate::losses::{bce_batch_grad, d_loss, g_total_loss, l1_grad, GeneratorLoss, LossWeights};
use crate::network::{build_discriminator, build_generator, ArchConfig, Mode, NetworkError, NetworkGraph};
use crate::phantom::SamplePair;
use crate::pipeline::Dataset;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const TAG_INIT: u64 = 0x494e_4954;
const TAG_DROPOUT: u64 = 0x4452_4f50;
const TAG_SHUFFLE: u64 = 0x5348_5546;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_l1: f64,
    pub seed: u64,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Multiplier on the `[-1, 1]` target colors; below 1 keeps the tanh output off its asymptotes.
    pub target_scale: f64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 2,
            epochs: 20,
            lambda_l1: 100.0,
            seed: 0,
            checkpoint_every: 1000,
            target_scale: 1.0,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset on [`ArchConfig::tiny`].
    pub fn tiny() -> Self {
        Self { learning_rate: 5e-4, target_scale: 0.8, arch: ArchConfig::tiny(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return bad("lambda_l1 must be non-negative");
        }
        if !(self.target_scale > 0.0 && self.target_scale <= 1.0) {
            return bad("target_scale must lie in (0, 1]");
        }
        self.arch.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    fn weights(&self) -> LossWeights {
        LossWeights { lambda_l1: self.lambda_l1 }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset of {pairs} pairs is smaller than batch size {batch}")]
    DatasetTooSmall { pairs: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("incompatible checkpoint: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptChecksum(String),
    #[error("step {step} {phase} phase: {source}")]
    Step {
        step: u64,
        phase: Phase,
        #[source]
        source: NetworkError,
    },
    #[error("step {step}: {net} parameters changed during the {phase} phase")]
    FreezeViolation { step: u64, net: &'static str, phase: Phase },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Generator,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Discriminator => "discriminator",
            Phase::Generator => "generator",
        })
    }
}

/// Network inputs and targets of one mini-batch, NCHW in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SamplePair], palette: &ClassPalette) -> Self {
        assert!(!pairs.is_empty());
        let (w, h) = (pairs[0].width(), pairs[0].height());
        let n = pairs.len();
        let mut x = Vec::with_capacity(n * w * h);
        let mut y = Vec::with_capacity(3 * n * w * h);
        for p in pairs {
            assert_eq!((p.width(), p.height()), (w, h), "batch pairs differ in size");
            x.extend(normalize_gray(&p.radiograph));
            y.extend(mask_to_planes(&p.mask, palette));
        }
        Self { x: Tensor::from_vec(&[n, 1, h, w], x), y: Tensor::from_vec(&[n, 3, h, w], y) }
    }

    pub fn scale_targets(mut self, factor: f64) -> Self {
        if factor != 1.0 {
            self.y.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub g_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: u64,
    pub mean_d_loss: f64,
    pub mean_g_adv: f64,
    pub mean_g_l1: f64,
    pub mean_g_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "step,d_loss,g_adv,g_l1,g_total";

    /// One CSV row, without the line break.
    pub fn csv_line(r: &StepRecord) -> String {
        format!("{},{},{},{},{}", r.step, r.d_loss, r.g_adv, r.g_l1, r.g_total)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.steps {
            s.push_str(&Self::csv_line(r));
            s.push('\n');
        }
        s
    }

    fn summarize(epoch: u64, records: &[StepRecord]) -> EpochSummary {
        let n = records.len().max(1) as f64;
        let mean = |f: fn(&StepRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        EpochSummary {
            epoch,
            steps: records.len() as u64,
            mean_d_loss: mean(|r| r.d_loss),
            mean_g_adv: mean(|r| r.g_adv),
            mean_g_l1: mean(|r| r.g_l1),
            mean_g_total: mean(|r| r.g_total),
        }
    }
}

/// Networks, optimizer moments and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generator: NetworkGraph,
    pub discriminator: NetworkGraph,
    pub g_adam: AdamState,
    pub d_adam: AdamState,
    /// Completed global steps.
    pub step: u64,
    /// Epoch the next step belongs to.
    pub epoch: u64,
}

impl TrainState {
    /// Freshly initialized networks with zeroed moments.
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut generator = build_generator(&cfg.arch)?;
        let mut discriminator = build_discriminator(&cfg.arch)?;
        generator.init_weights(derive_seed(cfg.seed, &[TAG_INIT, 0]));
        discriminator.init_weights(derive_seed(cfg.seed, &[TAG_INIT, 1]));
        let g_adam = AdamState::new(&generator.graph);
        let d_adam = AdamState::new(&discriminator.graph);
        Ok(Self { generator, discriminator, g_adam, d_adam, step: 0, epoch: 0 })
    }
}

pub fn dropout_seed(seed: u64, step: u64, phase: Phase) -> u64 {
    derive_seed(seed, &[TAG_DROPOUT, step, phase as u64])
}

pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(derive_seed(seed, &[TAG_SHUFFLE, epoch])).shuffle(&mut order);
    order
}

pub fn steps_per_epoch(pairs: usize, batch_size: usize) -> usize {
    pairs / batch_size
}

fn step_err(step: u64, phase: Phase) -> impl Fn(NetworkError) -> TrainError {
    move |source| TrainError::Step { step, phase, source }
}

/// Phase 1: one Adam update of the discriminator on real and generated pairs.
pub fn discriminator_phase(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let step = state.step + 1;
    let err = step_err(step, Phase::Discriminator);
    let seed = dropout_seed(cfg.seed, step, Phase::Discriminator);
    let fake = state.generator.predict(&batch.x, Mode::Train, seed).map_err(&err)?;
    let real_in = Tensor::concat_channels(&batch.x, &batch.y);
    let fake_in = Tensor::concat_channels(&batch.x, &fake);
    let d = &state.discriminator;
    let real_tape = d.forward(&real_in, Mode::Train, derive_seed(seed, &[1])).map_err(&err)?;
    let fake_tape = d.forward(&fake_in, Mode::Train, derive_seed(seed, &[2])).map_err(&err)?;
    let (pr, pf) = (real_tape.output(), fake_tape.output());
    let loss = d_loss(pr.data(), pf.data());
    let gr = Tensor::from_vec(pr.shape(), bce_batch_grad(pr.data(), 1.0));
    let gf = Tensor::from_vec(pf.shape(), bce_batch_grad(pf.data(), 0.0));
    let mut grads = d.backward(&real_tape, &gr, true).params.expect("param grads requested");
    let fake_grads = d.backward(&fake_tape, &gf, true).params.expect("param grads requested");
    for (a, b) in grads.iter_mut().zip(&fake_grads) {
        a.add_assign(b);
    }
    state.d_adam.update(&mut state.discriminator.graph, &grads, &cfg.adam());
    state.discriminator.graph.apply_running_stats(&real_tape);
    state.discriminator.graph.apply_running_stats(&fake_tape);
    Ok(loss)
}

/// Phase 2: one Adam update of the generator through the frozen discriminator.
pub fn generator_phase(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<GeneratorLoss, TrainError> {
    let step = state.step + 1;
    let err = step_err(step, Phase::Generator);
    let seed = dropout_seed(cfg.seed, step, Phase::Generator);
    let g_tape = state.generator.forward(&batch.x, Mode::Train, seed).map_err(&err)?;
    let fake = g_tape.output();
    let fake_in = Tensor::concat_channels(&batch.x, fake);
    let d_tape = state
        .discriminator
        .forward(&fake_in, Mode::Train, derive_seed(seed, &[1]))
        .map_err(&err)?;
    let pf = d_tape.output();
    let losses = g_total_loss(pf.data(), &batch.y, fake, cfg.weights())
        .expect("generator output matches target shape");
    let gp = Tensor::from_vec(pf.shape(), bce_batch_grad(pf.data(), 1.0));
    let d_in = state.discriminator.backward(&d_tape, &gp, false).input;
    let (_, mut grad_fake) = d_in.split_channels(batch.x.shape()[1]);
    let mut l1 = l1_grad(&batch.y, fake).expect("generator output matches target shape");
    l1.scale(cfg.lambda_l1);
    grad_fake.add_assign(&l1);
    let grads = state.generator.backward(&g_tape, &grad_fake, true).params.expect("param grads requested");
    state.g_adam.update(&mut state.generator.graph, &grads, &cfg.adam());
    state.generator.graph.apply_running_stats(&g_tape);
    Ok(losses)
}

/// One global step: a discriminator update followed by a generator update.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<StepRecord, TrainError> {
    let d = discriminator_phase(state, batch, cfg)?;
    let g = generator_phase(state, batch, cfg)?;
    state.step += 1;
    Ok(StepRecord { step: state.step, d_loss: d, g_adv: g.adv, g_l1: g.l1, g_total: g.total })
}

/// [`train_step`] that also verifies each phase leaves the other network untouched.
pub fn train_step_checked(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<StepRecord, TrainError> {
    let step = state.step + 1;
    let g_before = state.generator.graph.params().to_vec();
    let d = discriminator_phase(state, batch, cfg)?;
    if state.generator.graph.params() != g_before.as_slice() {
        return Err(TrainError::FreezeViolation { step, net: "generator", phase: Phase::Discriminator });
    }
    let d_before = state.discriminator.graph.clone();
    let g = generator_phase(state, batch, cfg)?;
    if state.discriminator.graph != d_before {
        return Err(TrainError::FreezeViolation { step, net: "discriminator", phase: Phase::Generator });
    }
    state.step += 1;
    Ok(StepRecord { step, d_loss: d, g_adv: g.adv, g_l1: g.l1, g_total: g.total })
}

/// Hooks and limits for [`fit`].
#[derive(Default)]
pub struct FitOptions<'a> {
    /// Directory receiving `ckpt-<step>.bin` files.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once this many global steps are complete.
    pub max_steps: Option<u64>,
    /// Run every step through [`train_step_checked`].
    pub check_freeze: bool,
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord)>,
}

pub struct FitOutcome {
    pub state: TrainState,
    pub report: TrainReport,
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("ckpt-{step}.bin")
}

/// Trains for `cfg.epochs` epochs over seed-shuffled mini-batches, resuming
/// from `resume` when given.
pub fn fit(
    dataset: &Dataset,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    opts: &mut FitOptions<'_>,
) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if dataset.input_size != cfg.arch.image_size {
        return Err(TrainError::InvalidConfig(format!(
            "dataset prepared at {} px but the network expects {} px",
            dataset.input_size, cfg.arch.image_size
        )));
    }
    let spe = steps_per_epoch(dataset.len(), cfg.batch_size) as u64;
    if spe == 0 && cfg.epochs > 0 {
        return Err(TrainError::DatasetTooSmall { pairs: dataset.len(), batch: cfg.batch_size });
    }
    let mut state = match resume {
        Some(ckpt) => ckpt.into_state(cfg)?,
        None => TrainState::new(cfg)?,
    };
    let palette = crate::codec::default_palette();
    let mut report = TrainReport::default();
    let save = |state: &TrainState, opts: &FitOptions<'_>| -> Result<(), TrainError> {
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(checkpoint_file_name(state.step));
            save_checkpoint(&path, &Checkpoint::from_state(state, cfg))?;
        }
        Ok(())
    };
    let total = spe * cfg.epochs as u64;
    'outer: while state.step < total {
        let epoch = state.step / spe;
        state.epoch = epoch;
        let order = epoch_order(cfg.seed, epoch, dataset.len());
        let mut records = Vec::new();
        for b in (state.step % spe)..spe {
            if opts.max_steps.is_some_and(|m| state.step >= m) {
                if !records.is_empty() {
                    report.epochs.push(TrainReport::summarize(epoch, &records));
                }
                break 'outer;
            }
            let idx = &order[b as usize * cfg.batch_size..(b as usize + 1) * cfg.batch_size];
            let pairs: Vec<&SamplePair> = idx.iter().map(|&i| &dataset.pairs[i]).collect();
            let batch = Batch::from_pairs(&pairs, &palette).scale_targets(cfg.target_scale);
            let rec = if opts.check_freeze {
                train_step_checked(&mut state, &batch, cfg)?
            } else {
                train_step(&mut state, &batch, cfg)?
            };
            if let Some(f) = opts.on_step.as_mut() {
                f(&rec);
            }
            records.push(rec);
            report.steps.push(rec);
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < total {
                state.epoch = state.step / spe;
                save(&state, opts)?;
                state.epoch = epoch;
            }
        }
        report.epochs.push(TrainReport::summarize(epoch, &records));
    }
    if let Some(epoch) = state.step.checked_div(spe) {
        state.epoch = epoch;
    }
    save(&state, opts)?;
    Ok(FitOutcome { state, report })
}
