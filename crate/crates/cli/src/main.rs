//! `medianet`: classic median filtering experiments and median-layer
//! denoising networks from the command line.
//!
//! Every subcommand prints its resolved settings as `key = value` lines
//! before doing any work, and all randomness comes from `--seed` (or the
//! seeds in a settings file). Output directories default to
//! `$MEDIANET_OUT_DIR`, or `medianet_out` when it is unset.

mod experiment;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use medianet::checkpoint::load_checkpoint;
use medianet::config::{parse_list, KvFile};
use medianet::eval::{ablation_arms, ablation_compare, evaluate_model, AblationSetup, Denoiser, Identity};
use medianet::filters::{median_filter_2d, parse_schedule, steps_to_csv, SineDemo};
use medianet::gradcheck::{check_network_gradients, GradCheckOptions};
use medianet::image::{read_image, write_image, ImageBuffer, ImageFormat};
use medianet::median::Border;
use medianet::metrics::{self, format_db};
use medianet::network::{build_network, NetworkConfig};
use medianet::noise::{apply_salt_pepper, ChannelMode, NoiseSpec};
use medianet::train::{train_loop, TrainState};
use medianet::Shape4;

use experiment::{load_dataset, resolve_ablation, resolve_train, EvalFlags, ExperimentFlags};

#[derive(Parser, Debug)]
#[command(name = "medianet", version, about = "Salt-and-pepper denoising with median filters and median-layer networks")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contaminate an image with salt-and-pepper noise.
    AddNoise(AddNoiseArgs),
    /// Apply a median filter repeatedly, optionally scoring every iterate.
    Filter(FilterArgs),
    /// Alternate median and Gaussian filters on a noisy sine.
    #[command(name = "demo-1d")]
    Demo1d(DemoArgs),
    /// Train a denoising network, writing checkpoints and a loss log.
    Train(TrainArgs),
    /// Denoise one image with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Score a checkpoint (or the noisy input itself) on a dataset.
    Evaluate(EvaluateArgs),
    /// Train paired networks with and without median layers and compare.
    Ablation(AblationArgs),
    /// Compare autodiff gradients of a small network with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "MEDIANET_OUT_DIR", default_value = "medianet_out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct AddNoiseArgs {
    input: PathBuf,
    output: PathBuf,
    /// Fraction of contaminated units, in (0, 1).
    #[arg(long)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// per_channel (independent per sample) or per_pixel (all channels of a pixel at once).
    #[arg(long, default_value = "per_channel")]
    channel_mode: ChannelMode,
}

#[derive(Args, Debug)]
struct FilterArgs {
    /// Image to filter.
    input: PathBuf,
    /// Median window side (odd, >= 3).
    #[arg(long, default_value_t = 5)]
    median: usize,
    /// Number of passes; one image is written per pass.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Clean reference; enables the PSNR trajectory CSV.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Border policy: reflect or zero.
    #[arg(long, default_value = "reflect")]
    border: Border,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args, Debug)]
struct DemoArgs {
    /// Comma-separated filters, each `median` or `gaussian`.
    #[arg(long, default_value = "median,gaussian,median,gaussian")]
    schedule: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = SineDemo::default().samples)]
    samples: usize,
    #[arg(long, default_value_t = SineDemo::default().level)]
    level: f64,
    /// Window of both filters.
    #[arg(long, default_value_t = SineDemo::default().window)]
    window: usize,
    #[arg(long, default_value_t = SineDemo::default().sigma)]
    sigma: f64,
    /// CSV path; defaults to `<out-dir>/demo_1d.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    out_dir: OutDir,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: ExperimentFlags,
    /// Remove every median layer.
    #[arg(long)]
    no_medians: bool,
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("model").required(true).args(["checkpoint", "identity"])))]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score the noisy images themselves.
    #[arg(long)]
    identity: bool,
    /// Images: a directory or a manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    levels: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Channels for `--identity` (a checkpoint fixes its own).
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Resize target `WIDTHxHEIGHT` applied on load.
    #[arg(long)]
    resize: Option<String>,
    #[arg(long, default_value = "per_channel")]
    channel_mode: ChannelMode,
    /// CSV path; defaults to `<out-dir>/eval.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    out_dir: OutDir,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[command(flatten)]
    flags: ExperimentFlags,
    #[command(flatten)]
    eval: EvalFlags,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 4)]
    features: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    median_kernel: usize,
    /// Input height and width.
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    threshold: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = GradCheckOptions::default().step)]
    step: f64,
    /// Minimum gap between a window's median and its sorted neighbours.
    #[arg(long, default_value_t = GradCheckOptions::default().median_gap)]
    median_gap: f64,
}

fn print_settings(command: &str, kv: &KvFile) {
    println!("# medianet {command}: resolved settings");
    print!("{kv}");
    println!();
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn require_file(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("{}: no such file or directory", path.display());
    }
    Ok(())
}

fn add_noise(a: &AddNoiseArgs) -> Result<()> {
    let spec = NoiseSpec::new(a.level, a.seed)?.with_channel_mode(a.channel_mode);
    require_file(&a.input)?;
    let mut kv = KvFile::new();
    kv.push("input", a.input.display());
    kv.push("output", a.output.display());
    kv.push("level", a.level);
    kv.push("seed", a.seed);
    kv.push("channel_mode", a.channel_mode);
    print_settings("add-noise", &kv);

    let img = read_image(&a.input)?;
    let noisy = apply_salt_pepper(&img.to_normalized::<f64>(), &spec);
    let out = ImageBuffer::from_normalized(&noisy, 0)?;
    let psnr = metrics::psnr(&out.to_levels::<f64>(), &img.to_levels::<f64>())?;
    write_image(&out, &a.output)?;
    println!("psnr = {} dB", format_db(psnr));
    Ok(())
}

fn filter(a: &FilterArgs) -> Result<()> {
    medianet::median::MedianLayerSpec::new(a.median)?;
    require_file(&a.input)?;
    if let Some(r) = &a.reference {
        require_file(r)?;
    }
    let dir = &a.out.out_dir;
    let mut kv = KvFile::new();
    kv.push("input", a.input.display());
    kv.push("median", a.median);
    kv.push("repeat", a.repeat);
    kv.push("ref", a.reference.as_ref().map_or("none".to_string(), |p| p.display().to_string()));
    kv.push("border", a.border);
    kv.push("out_dir", dir.display());
    print_settings("filter", &kv);

    let img = read_image(&a.input)?;
    let reference = match &a.reference {
        Some(p) => {
            let r = read_image(p)?;
            if (r.width(), r.height(), r.channels()) != (img.width(), img.height(), img.channels()) {
                bail!(
                    "reference {} is {}x{}x{}, input is {}x{}x{}",
                    p.display(),
                    r.width(),
                    r.height(),
                    r.channels(),
                    img.width(),
                    img.height(),
                    img.channels()
                );
            }
            Some(r.to_levels::<f64>())
        }
        None => None,
    };
    create_dir(dir)?;
    let ext = match ImageFormat::from_path(&a.input) {
        ImageFormat::Png => "png".to_string(),
        ImageFormat::Netpbm => if img.channels() == 1 { "pgm" } else { "ppm" }.to_string(),
    };
    let digits = a.repeat.max(1).to_string().len().max(2);
    let mut current = img.to_levels::<f64>();
    let mut psnr = Vec::new();
    if let Some(r) = &reference {
        psnr.push(metrics::psnr(&current, r)?);
    }
    for i in 1..=a.repeat {
        current = median_filter_2d(&current, a.median, a.border)?;
        write_image(&ImageBuffer::from_levels(&current, 0)?, dir.join(format!("iter_{i:0digits$}.{ext}")))?;
        if let Some(r) = &reference {
            psnr.push(metrics::psnr(&current, r)?);
        }
    }
    if reference.is_some() {
        let mut csv = String::from("iteration,psnr\n");
        for (i, p) in psnr.iter().enumerate() {
            csv.push_str(&format!("{i},{}\n", format_db(*p)));
        }
        write_text(&dir.join("psnr.csv"), &csv)?;
        print!("{csv}");
        let best = psnr
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &p)| if p > b.1 { (i, p) } else { b });
        println!("best iteration = {} ({} dB)", best.0, format_db(best.1));
    }
    println!("wrote {} images to {}", a.repeat, dir.display());
    Ok(())
}

fn demo_1d(a: &DemoArgs) -> Result<()> {
    let schedule = parse_schedule(&a.schedule)?;
    if schedule.is_empty() {
        bail!("invalid value for `schedule`: needs at least one filter");
    }
    let demo = SineDemo {
        samples: a.samples,
        level: a.level,
        window: a.window,
        sigma: a.sigma,
    };
    let out = a.out.clone().unwrap_or_else(|| a.out_dir.out_dir.join("demo_1d.csv"));
    let mut kv = KvFile::new();
    kv.push("schedule", &a.schedule);
    kv.push("seed", a.seed);
    kv.push("samples", a.samples);
    kv.push("level", a.level);
    kv.push("window", a.window);
    kv.push("sigma", a.sigma);
    kv.push("out", out.display());
    print_settings("demo-1d", &kv);

    let csv = steps_to_csv(&demo.run(&schedule, a.seed)?);
    write_text(&out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut e = resolve_train(&a.flags)?;
    if a.no_medians {
        e.network.median_half = false;
    }
    e.network.validate()?;
    let dir = &a.out.out_dir;
    let mut kv = e.to_kv();
    kv.push("out_dir", dir.display());
    kv.push("resume", a.resume);
    print_settings("train", &kv);

    let mut state = if a.resume {
        let s = TrainState::resume(dir)?;
        if s.model.config() != &e.network {
            bail!("checkpoint in {} was trained with a different network configuration", dir.display());
        }
        if s.optimizer.config != e.train.optimizer {
            bail!("checkpoint in {} was trained with different optimizer settings", dir.display());
        }
        println!("resuming from step {}", s.step);
        s
    } else {
        TrainState::new(build_network(&e.network)?, e.train.optimizer)?
    };
    let source = e.data.source(e.network.channels, &e.train)?;
    let validation = e.data.validation(e.network.channels, &e.train.levels)?;
    train_loop(&mut state, source.as_ref(), &validation, &e.train, Some(dir))?;
    let last = state.log.last();
    println!(
        "finished at step {}; last loss {}",
        state.step,
        last.map_or("n/a".to_string(), |r| format!("{:.6}", r.loss))
    );
    if let Some(v) = state.log.iter().rev().find_map(|r| r.val_psnr) {
        println!("last validation psnr = {} dB", format_db(v));
    }
    Ok(())
}

fn denoise(a: &DenoiseArgs) -> Result<()> {
    require_file(&a.checkpoint)?;
    require_file(&a.input)?;
    let mut kv = KvFile::new();
    kv.push("checkpoint", a.checkpoint.display());
    kv.push("input", a.input.display());
    kv.push("output", a.output.display());
    print_settings("denoise", &kv);

    let ck = load_checkpoint::<f32>(&a.checkpoint)?;
    let img = read_image(&a.input)?;
    let channels = ck.model.config().channels;
    let x = img.with_channels(channels)?.to_normalized::<f32>();
    let y = ck.model.infer(&x)?;
    let out = ImageBuffer::from_normalized(&y, 0)?.with_channels(img.channels())?;
    write_image(&out, &a.output)?;
    println!("wrote {}x{} image to {}", out.width(), out.height(), a.output.display());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let levels: Vec<f64> = parse_list("levels", &a.levels)?;
    for &p in &levels {
        NoiseSpec::new(p, 0)?;
    }
    let resize = a.resize.as_deref().map(medianet::dataset::parse_size).transpose()?;
    if a.channels != 1 && a.channels != 3 {
        bail!("invalid value for `channels`: must be 1 or 3, got {}", a.channels);
    }
    let out = a.out.clone().unwrap_or_else(|| a.out_dir.out_dir.join("eval.csv"));
    let model = match &a.checkpoint {
        Some(p) => {
            require_file(p)?;
            Some(load_checkpoint::<f32>(p)?.model)
        }
        None => None,
    };
    let channels = model.as_ref().map_or(a.channels, |m| m.config().channels);
    let mut kv = KvFile::new();
    match &a.checkpoint {
        Some(p) => kv.push("checkpoint", p.display()),
        None => kv.push("model", "identity"),
    }
    kv.push("data", a.data.display());
    kv.push("levels", &a.levels);
    kv.push("seed", a.seed);
    kv.push("channels", channels);
    kv.push("resize", a.resize.as_deref().unwrap_or("none"));
    kv.push("channel_mode", a.channel_mode);
    kv.push("out", out.display());
    print_settings("evaluate", &kv);

    let images = load_dataset(&a.data, channels, resize)?;
    let (denoiser, label): (&dyn Denoiser, String) = match &model {
        Some(m) => (m, a.checkpoint.as_ref().expect("model implies checkpoint").display().to_string()),
        None => (&Identity, "identity".to_string()),
    };
    let report = evaluate_model(
        denoiser,
        &images,
        &levels,
        a.seed,
        a.channel_mode,
        &a.data.display().to_string(),
        &label,
    )?;
    write_text(&out, &report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn ablation(a: &AblationArgs) -> Result<()> {
    let (e, ev) = resolve_ablation(&a.flags, &a.eval)?;
    let dir = &a.out.out_dir;
    let mut kv = e.to_kv();
    ev.write_kv(&mut kv);
    kv.push("out_dir", dir.display());
    print_settings("ablation", &kv);

    let (with, without) = ablation_arms(&e.network);
    with.validate()?;
    without.validate()?;
    let source = e.data.source(e.network.channels, &e.train)?;
    let validation = e.data.validation(e.network.channels, &e.train.levels)?;
    let eval_images = load_dataset(&ev.eval, e.network.channels, None)?;
    let dataset = ev.eval.display().to_string();
    let setup = AblationSetup {
        train: &e.train,
        source: source.as_ref(),
        validation: &validation,
        eval_images: &eval_images,
        eval_levels: &ev.levels,
        eval_seed: ev.seed,
        dataset: &dataset,
        smoothing_window: ev.smoothing_window,
        out_dir: Some(dir),
    };
    let report = ablation_compare(&with, &without, &setup)?;
    for arm in [&report.with_medians, &report.without_medians] {
        write_text(&dir.join(&arm.label).join("eval.csv"), &arm.report.to_csv())?;
    }
    write_text(&dir.join("ablation.csv"), &report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn grad_check(a: &GradCheckArgs) -> Result<bool> {
    let cfg = NetworkConfig {
        blocks: a.blocks,
        features: a.features,
        channels: a.channels,
        median_kernel: a.median_kernel,
        seed: a.seed,
        ..NetworkConfig::default()
    };
    cfg.validate()?;
    if a.size == 0 || a.batch == 0 {
        bail!("invalid value for `size`/`batch`: both must be at least 1");
    }
    let opts = GradCheckOptions {
        step: a.step,
        median_gap: a.median_gap,
        ..GradCheckOptions::default()
    };
    let mut kv = cfg.to_kv();
    kv.push("input", Shape4::new(a.batch, a.channels, a.size, a.size));
    kv.push("step", a.step);
    kv.push("median_gap", a.median_gap);
    kv.push("threshold", a.threshold);
    print_settings("grad-check", &kv);

    let r = check_network_gradients(&cfg, Shape4::new(a.batch, a.channels, a.size, a.size), a.seed, &opts)?;
    println!("input seed = {} (after {} attempts)", r.input_seed, r.attempts);
    println!("checked = {} gradient entries", r.checked);
    println!("max relative error = {:e} (in {})", r.max_rel_error, r.worst);
    let ok = r.max_rel_error < a.threshold;
    println!("{}", if ok { "PASS" } else { "FAIL: above threshold" });
    Ok(ok)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::AddNoise(a) => add_noise(a)?,
        Command::Filter(a) => filter(a)?,
        Command::Demo1d(a) => demo_1d(a)?,
        Command::Train(a) => train(a)?,
        Command::Denoise(a) => denoise(a)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Ablation(a) => ablation(a)?,
        Command::GradCheck(a) => return grad_check(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
