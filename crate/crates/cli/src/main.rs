//! `dentgan`: phantom generation, augmentation, training, inference and evaluation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use dentgan::codec::default_palette;
use dentgan::config::RunConfig;
use dentgan::infer::predict_mask;
use dentgan::metrics::{evaluate_dataset, render_report, EvalPair, ReportFormat};
use dentgan::network::{build_discriminator, build_generator, infer_shapes, render_layer_table, NetworkGraph};
use dentgan::phantom::generate_dataset;
use dentgan::pipeline::{expand_dataset, load_pairs, png_names, read_gray, read_mask, save_pairs, write_mask, Dataset};
use dentgan::train::{fit, load_checkpoint, FitOptions, StepRecord, TrainReport};

const CONFIG_ECHO: &str = "config.txt";
const LOSSES_FILE: &str = "losses.csv";

#[derive(Parser, Debug)]
#[command(name = "dentgan", version, about = "Conditional-GAN segmentation of dental bitewing radiographs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Base settings before the config file and overrides.
    #[arg(long, value_enum, default_value_t = Preset::Paper, global = true)]
    preset: Preset,
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Paper,
    Tiny,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic radiograph/mask pairs to <out>/images and <out>/masks.
    GenPhantoms {
        #[arg(long, default_value_t = 40)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a dataset directory with random geometric and intensity transforms.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output pairs per input pair (overrides `expansion_factor`).
        #[arg(long)]
        factor: Option<usize>,
    },
    /// Train the generator and discriminator.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many global steps.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Check after every step that each phase left the other network untouched.
        #[arg(long)]
        check_freeze: bool,
    },
    /// Segment every PNG in a directory with a trained generator.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted masks against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Add an accuracy column, (tp + tn) / total.
        #[arg(long)]
        accuracy: bool,
    },
    /// Print the generator and discriminator layer tables.
    InspectArch {
        /// Print each row's output shape instead of the tables.
        #[arg(long)]
        shapes: bool,
    },
}

/// Failures that count as bad invocations rather than runtime errors.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("run `dentgan --help` for usage");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match common.preset {
        Preset::Paper => RunConfig::default(),
        Preset::Tiny => RunConfig::tiny(),
    };
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    for o in &common.overrides {
        cfg.apply_override(o).map_err(|e| usage(format!("--set {o}: {e}")))?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn write_echo(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, cfg.render()).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::GenPhantoms { n, out } => gen_phantoms(&cfg, n, &out),
        Command::Augment { data, out, factor } => {
            if let Some(f) = factor {
                cfg.augment.expansion_factor = f;
            }
            augment(&cfg, &data, &out)
        }
        Command::Train { data, out, resume, max_steps, check_freeze } => {
            if data.is_some() {
                cfg.data = data;
            }
            if out.is_some() {
                cfg.out = out;
            }
            train(&cfg, resume.as_deref(), max_steps, check_freeze)
        }
        Command::Infer { checkpoint, images, out } => infer(&checkpoint, &images, &out),
        Command::Evaluate { pred, gt, format, out, accuracy } => evaluate(&pred, &gt, format, out.as_deref(), accuracy),
        Command::InspectArch { shapes } => inspect_arch(&cfg, shapes),
    }
}

fn gen_phantoms(cfg: &RunConfig, n: usize, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let pairs = generate_dataset(cfg.train.seed, &cfg.phantom, n)?;
    save_pairs(out, &pairs, &default_palette())?;
    write_echo(out, cfg)?;
    println!("wrote {n} phantom pairs to {}", out.display());
    Ok(())
}

fn load_dir(data: &Path) -> Result<Vec<dentgan::SamplePair>> {
    let pairs = load_pairs(&data.join("images"), &data.join("masks"), &default_palette())
        .with_context(|| format!("loading dataset from {}", data.display()))?;
    if pairs.is_empty() {
        bail!("no images found in {}", data.join("images").display());
    }
    Ok(pairs)
}

fn augment(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let pairs = load_dir(data)?;
    let ds = expand_dataset(&pairs, &cfg.augment, cfg.train.seed)?;
    save_pairs(out, &ds.pairs, &default_palette())?;
    write_echo(out, cfg)?;
    println!("wrote {} pairs to {}", ds.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, resume: Option<&Path>, max_steps: Option<u64>, check_freeze: bool) -> Result<()> {
    let data = cfg.data.as_deref().ok_or_else(|| usage("train needs --data (or `data` in the config)"))?;
    let out = cfg.out.as_deref().ok_or_else(|| usage("train needs --out (or `out` in the config)"))?;
    let pairs = load_dir(data)?;
    let dataset = Dataset::prepare(&pairs, cfg.train.arch.image_size);
    let resume = match resume {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    write_echo(out, cfg)?;

    let losses = out.join(LOSSES_FILE);
    let append = resume.is_some() && losses.is_file();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&losses)
        .with_context(|| format!("opening {}", losses.display()))?;
    if !append {
        writeln!(file, "{}", TrainReport::CSV_HEADER)?;
    }
    let mut write_err = None;
    let mut on_step = |r: &StepRecord| {
        if write_err.is_none() {
            if let Err(e) = writeln!(file, "{}", TrainReport::csv_line(r)) {
                write_err = Some(e);
            }
        }
    };
    let mut opts = FitOptions {
        checkpoint_dir: Some(out.to_path_buf()),
        max_steps,
        check_freeze,
        on_step: Some(&mut on_step),
    };
    let outcome = fit(&dataset, &cfg.train, resume, &mut opts)?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", losses.display()));
    }
    if let Some(e) = outcome.report.epochs.last() {
        println!(
            "epoch {} steps {} d_loss {:.4} g_adv {:.4} g_l1 {:.4}",
            e.epoch, e.steps, e.mean_d_loss, e.mean_g_adv, e.mean_g_l1
        );
    }
    println!("finished at step {}; outputs in {}", outcome.state.step, out.display());
    Ok(())
}

fn infer(checkpoint: &Path, images: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let generator = ckpt.generator()?;
    let names = png_names(images)?;
    if names.is_empty() {
        bail!("no PNG images in {}", images.display());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let echo = RunConfig { train: ckpt.config.clone(), ..RunConfig::default() };
    fs::write(out.join(CONFIG_ECHO), echo.render())?;
    let palette = default_palette();
    for name in &names {
        let img = read_gray(&images.join(name))?;
        let mask = predict_mask(&generator, &img, &palette).with_context(|| format!("segmenting {name}"))?;
        write_mask(&out.join(name), &mask, &palette)?;
    }
    println!("wrote {} masks to {}", names.len(), out.display());
    Ok(())
}

fn evaluate(pred: &Path, gt: &Path, format: Format, out: Option<&Path>, accuracy: bool) -> Result<()> {
    let palette = default_palette();
    let names = png_names(gt)?;
    if names.is_empty() {
        bail!("no ground-truth masks in {}", gt.display());
    }
    let mut pairs = Vec::with_capacity(names.len());
    for name in &names {
        let pred_path = pred.join(name);
        if !pred_path.is_file() {
            bail!("missing prediction {}", pred_path.display());
        }
        pairs.push(EvalPair {
            id: name.trim_end_matches(".png").to_string(),
            pred: read_mask(&pred_path, &palette)?,
            gt: read_mask(&gt.join(name), &palette)?,
        });
    }
    let report = evaluate_dataset(&pairs, &palette)?;
    let format = match format {
        Format::Text => ReportFormat::Text,
        Format::Csv => ReportFormat::Csv,
    };
    let text = render_report(&report, format, accuracy);
    match out {
        Some(path) => fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn inspect_arch(cfg: &RunConfig, shapes: bool) -> Result<()> {
    let arch = &cfg.train.arch;
    let g = build_generator(arch)?;
    let d = build_discriminator(arch)?;
    if shapes {
        print_shapes(&g, (arch.input_channels, arch.image_size, arch.image_size))?;
        let pair = arch.input_channels + arch.output_channels;
        print_shapes(&d, (pair, arch.image_size, arch.image_size))?;
    } else {
        print!("{}", render_layer_table(&g));
        println!();
        print!("{}", render_layer_table(&d));
    }
    Ok(())
}

fn print_shapes(net: &NetworkGraph, input: (usize, usize, usize)) -> Result<()> {
    println!("{:?} input {}x{}x{}", net.role, input.1, input.2, input.0);
    for (layer, (c, h, w)) in net.layers.iter().zip(infer_shapes(net, input)?) {
        println!("{:<4} {h}x{w}x{c}", layer.name);
    }
    Ok(())
}
