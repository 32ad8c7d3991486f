//! `swinhdr` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use swinhdr::data::io::{read_hdr_image, write_pfm, write_ppm};
use swinhdr::data::synth::{render_scene, DEFAULT_STOPS, RADIANCE_MAX};
use swinhdr::data::{build_input, extract_patches, load_dataset, Manifest};
use swinhdr::loss::{mu_law_clamped, Metrics, SsimConfig, DEFAULT_MU};
use swinhdr::model::{predict, ModelConfig};
use swinhdr::train::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, EpochLog, LrSchedule, TrainOptions, Trainer,
};
use swinhdr::{selftest, GatingMode};

#[derive(Parser)]
#[command(name = "swinhdr", version, about = "Multi-exposure HDR fusion with a gated Swin transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic exposure stacks with ground truth.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Fuse one exposure stack into an HDR image.
    Infer(InferArgs),
    /// Compare a predicted HDR image with its ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of the full loss gradient (tiny config).
    Gradcheck(GradcheckArgs),
    /// Run the built-in reference checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// key=value model config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: full, desk or tiny.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the config's gating mode.
    #[arg(long, value_parser = parse_gating)]
    gating: Option<GatingMode>,
    #[arg(long, default_value_t = swinhdr::train::DEFAULT_EPOCHS)]
    epochs: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Samples per forward/backward pass (gradient accumulation).
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    lr_decayed: f64,
    #[arg(long, default_value_t = 20)]
    decay_epoch: u64,
    /// Train on square patches of this size instead of whole images.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long, default_value_t = 64)]
    stride: usize,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the per-epoch CSV log here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a tone-mapped 8-bit preview.
    #[arg(long)]
    out_tm: Option<PathBuf>,
    /// Require the checkpoint to match this config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Divide the ground truth by this before comparing.
    #[arg(long, default_value_t = 1.0)]
    gt_scale: f64,
    #[arg(long, default_value_t = DEFAULT_MU)]
    mu: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random elements checked per parameter tensor.
    #[arg(long, default_value_t = 3)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run the end-to-end gradient check.
    #[arg(long)]
    gradcheck: bool,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{s}` is not HxW"))?;
    let h = h.parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w = w.parse().map_err(|_| format!("bad width in `{s}`"))?;
    Ok((h, w))
}

fn parse_gating(s: &str) -> Result<GatingMode, String> {
    s.parse().map_err(|e: swinhdr::Error| e.to_string())
}

/// Seed of scene `i` of a synth run.
fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

fn synth(a: SynthArgs) -> Result<()> {
    let (h, w) = a.size;
    println!("synth: out={} count={} size={h}x{w} seed={}", a.out.display(), a.count, a.seed);
    println!("stops={DEFAULT_STOPS:?} scale={RADIANCE_MAX}");
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for i in 0..a.count {
        let scene = render_scene(scene_seed(a.seed, i), h, w)?;
        let dir = a.out.join(format!("scene_{i:04}"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let names = ["ldr_0.ppm", "ldr_1.ppm", "ldr_2.ppm"];
        for (img, name) in scene.sample.stack.images.iter().zip(names) {
            write_ppm(dir.join(name), img, 8)?;
        }
        write_pfm(dir.join("gt.pfm"), &scene.radiance)?;
        let manifest = Manifest {
            images: names.map(PathBuf::from),
            stops: DEFAULT_STOPS,
            gt: Some("gt.pfm".into()),
            scale: RADIANCE_MAX,
            base: dir.clone(),
        };
        let path = dir.join(swinhdr::data::manifest::MANIFEST_NAME);
        fs::write(&path, manifest.to_text()).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} scenes", a.count);
    Ok(())
}

fn resolve_config(config: Option<&Path>, preset: Option<&str>) -> Result<ModelConfig> {
    Ok(match (config, preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ModelConfig::from_text(&text)?
        }
        (None, Some(p)) => ModelConfig::preset(p)?,
        (None, None) => ModelConfig::default(),
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let options = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch,
        micro_batch: a.micro_batch,
        seed: a.seed,
        schedule: LrSchedule {
            initial: a.lr,
            decayed: a.lr_decayed,
            decay_epoch: a.decay_epoch,
        },
        augment: !a.no_augment,
        max_steps: a.max_steps,
        ..TrainOptions::default()
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.config.is_some() || a.preset.is_some() || a.gating.is_some() {
                bail!("--resume takes the model config from the checkpoint");
            }
            Trainer::resume(load_checkpoint(path)?, options)?
        }
        None => {
            let mut cfg = resolve_config(a.config.as_deref(), a.preset.as_deref())?;
            if let Some(g) = a.gating {
                cfg.gating = g;
            }
            cfg.validate()?;
            Trainer::new(cfg, options)?
        }
    };
    print!("{}", trainer.cfg.to_text());
    println!("parameters={}", trainer.params.num_elements());
    let s = trainer.options.schedule;
    println!(
        "schedule: lr={:e} for epochs < {}, lr={:e} from epoch {}",
        s.initial, s.decay_epoch, s.decayed, s.decay_epoch
    );
    println!(
        "epochs={} batch={} seed={} augment={}",
        a.epochs, a.batch, trainer.options.seed, trainer.options.augment
    );

    let mut data = load_dataset(&a.data, trainer.cfg.gamma)?;
    if let Some(size) = a.patch {
        let mut patches = Vec::new();
        for s in &data {
            patches.extend(extract_patches(s, size, a.stride)?);
        }
        data = patches;
    }
    println!("samples={}", data.len());

    save_checkpoint(&a.out, &trainer.checkpoint())?;
    let mut csv = String::from(EpochLog::CSV_HEADER);
    csv.push('\n');
    println!("{}", EpochLog::CSV_HEADER);
    let out = a.out.clone();
    let log_path = a.log.clone();
    trainer.train(&data, |log, t| {
        println!("{}", log.csv_row());
        csv.push_str(&log.csv_row());
        csv.push('\n');
        if let Some(p) = &log_path {
            fs::write(p, &csv).map_err(|e| swinhdr::Error::Io {
                path: p.clone(),
                source: e,
            })?;
        }
        save_checkpoint(&out, &t.checkpoint())
    })?;
    if let Some(p) = &log_path {
        fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("checkpoint={} step={}", a.out.display(), trainer.state.step);
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let ckpt = match &a.config {
        Some(path) => load_checkpoint_for(&a.ckpt, &resolve_config(Some(path), None)?)?,
        None => load_checkpoint(&a.ckpt)?,
    };
    print!("{}", ckpt.config.to_text());
    let stack = Manifest::load(&a.stack)?.load_stack(ckpt.config.gamma)?;
    let (x, x2) = build_input(&stack)?;
    let y = predict(&ckpt.params, &ckpt.config, &x, &x2)?;
    write_pfm(&a.out, &y)?;
    println!("wrote {}", a.out.display());
    if let Some(tm) = &a.out_tm {
        write_ppm(tm, &mu_law_clamped(&y, ckpt.config.mu)?, 8)?;
        println!("wrote {}", tm.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    println!(
        "eval: pred={} gt={} gt_scale={} mu={}",
        a.pred.display(),
        a.gt.display(),
        a.gt_scale,
        a.mu
    );
    let pred = read_hdr_image(&a.pred)?;
    let inv = (1.0 / a.gt_scale) as f32;
    let gt = read_hdr_image(&a.gt)?.map(|v| v * inv);
    let m = Metrics::evaluate(&pred, &gt, a.mu, &SsimConfig::default())?;
    print!("{m}");
    println!("{}", Metrics::CSV_HEADER);
    println!("{}", m.csv_row());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    println!("gradcheck: config=tiny batch=2x18x32x32 samples={} seed={}", a.samples, a.seed);
    let report = selftest::model_gradient_check(a.samples, a.seed)?;
    println!("checked={}", report.checked);
    println!("max_rel_error={:e}", report.max_rel_error);
    println!("max_abs_error={:e}", report.max_abs_error);
    for f in report.failures.iter().take(20) {
        println!(
            "FAIL {} {:?}: analytic {:e} numeric {:e}",
            f.input, f.index, f.analytic, f.numeric
        );
    }
    println!("failures={}", report.failures.len());
    Ok(report.passed())
}

fn run_selftest(a: SelftestArgs) -> Result<bool> {
    println!("selftest: seed={} gradcheck={}", a.seed, a.gradcheck);
    let mut ok = true;
    for c in selftest::run_all(a.seed) {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    if a.gradcheck {
        ok &= gradcheck(GradcheckArgs {
            samples: 3,
            seed: a.seed,
        })?;
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Infer(a) => infer(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Selftest(a) => run_selftest(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error[check]: one or more checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            let kind = e.downcast_ref::<swinhdr::Error>().map_or("cli", |e| e.kind());
            eprintln!("error[{kind}]: {e:#}");
            ExitCode::FAILURE
        }
    }
}
