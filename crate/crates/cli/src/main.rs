use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use skyclear::checkpoint;
use skyclear::data::{list_images, load_manifest, make_dataset, procedural_scene, read_manifest, scene_label, DatasetSpec, SCENE_LABELS};
use skyclear::eval::evaluate;
use skyclear::train::{train, TrainOutput};
use skyclear::{CaptionMetadata, Config, Embedder, Image, ImageRestorer, Preset, Restorer};

#[derive(Parser)]
#[command(name = "skyclear", version, about = "Two-pass prompt-conditioned restoration of rain, fog and snow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade clean images into a paired dataset with train/val/test manifests.
    Synth(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Restore an image or a directory of images with a checkpoint.
    Infer(InferArgs),
    /// Score a checkpoint on a manifest and write a JSON report.
    Eval(EvalArgs),
    /// Print the resolved configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of clean PNG images.
    #[arg(long, required_unless_present = "procedural")]
    clean_dir: Option<PathBuf>,
    /// Generate this many procedural clean scenes instead of reading a directory.
    #[arg(long, conflicts_with = "clean_dir")]
    procedural: Option<usize>,
    /// Side length of procedural scenes.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Degradation mix as `kind:weight[:resample]` items, e.g. `rain:1,fog:1,rain+fog:1,snow:1`.
    #[arg(long, default_value = "rain:1,fog:1,rain+fog:1,snow:1")]
    mix: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train/val/test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    split: Vec<f64>,
    /// Intensity range as `low,high` within [0, 1].
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 1.0])]
    intensity: Vec<f64>,
}

#[derive(Args)]
struct ConfigSource {
    /// Named base configuration: desk, paper or tiny.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// TOML overrides applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigSource {
    fn resolve(&self) -> Result<Config> {
        let base = Preset::from_name(&self.preset)?.config();
        let cfg = match &self.config {
            Some(path) => Config::load(path, &base).with_context(|| format!("loading {}", path.display()))?,
            None => base,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Training manifest (TSV) written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.iterations`.
    #[arg(long)]
    iterations: Option<usize>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A PNG image or a directory of PNG images.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output PNG for a single image, or a directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write the first-pass restoration as `<name>_first.png`.
    #[arg(long)]
    both_iterations: bool,
    /// Scene word for the caption; defaults to the file name's label.
    #[arg(long)]
    scene: Option<String>,
    /// Weather phrase for the caption, e.g. "rain", "fog", "rain and fog", "snow".
    #[arg(long)]
    weather: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output JSON report.
    #[arg(long)]
    report: PathBuf,
    /// Also score the first-pass restoration.
    #[arg(long)]
    both_iterations: bool,
}

#[derive(Args)]
struct ConfigArgs {
    #[command(flatten)]
    source: ConfigSource,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => run_eval(a),
        Command::Config(a) => {
            print!("{}", a.source.resolve()?.to_toml());
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    ensure!(a.split.len() == 3, "--split takes three fractions, e.g. 0.8,0.1,0.1");
    ensure!(a.intensity.len() == 2, "--intensity takes a range, e.g. 0.3,1.0");
    let spec = DatasetSpec {
        mix: DatasetSpec::parse_mix(&a.mix)?,
        split: [a.split[0], a.split[1], a.split[2]],
        intensity: (a.intensity[0], a.intensity[1]),
    };
    let clean_dir = match (a.clean_dir, a.procedural) {
        (Some(dir), _) => dir,
        (None, Some(n)) => {
            ensure!(n > 0, "--procedural needs at least one scene");
            let dir = a.out.join("clean");
            std::fs::create_dir_all(&dir)?;
            for i in 0..n {
                let label = SCENE_LABELS[i % SCENE_LABELS.len()];
                let img = procedural_scene(label, a.size, a.size, a.seed.wrapping_add(i as u64));
                img.save_png(&dir.join(format!("{label}_{i:04}.png")))?;
            }
            info!("generated {n} procedural scenes in {}", dir.display());
            dir
        }
        (None, None) => bail!("either --clean-dir or --procedural is required"),
    };
    let ds = make_dataset(&clean_dir, &spec, a.seed, &a.out)?;
    println!("train {} / val {} / test {} entries written to {}", ds.train.len(), ds.val.len(), ds.test.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.source.resolve()?;
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let data = load_manifest(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let embedder = Embedder::from_config(&cfg.embedder)?;
    info!("training on {} pairs for {} iterations", data.len(), cfg.train.iterations);
    let start = Instant::now();
    let out = TrainOutput { dir: Some(a.out.clone()) };
    let (_, log) = train(&cfg, &data, &embedder, &out, |s| {
        info!("step {:>7}  lr {:.3e}  loss {:.5}  ({:.0?})", s.step, s.lr, s.loss, start.elapsed());
    })?;
    let last = log.last().map_or(f64::NAN, |s| s.loss);
    println!("final loss {last:.5}; checkpoint {}", a.out.join(skyclear::train::FINAL_CHECKPOINT).display());
    Ok(())
}

fn load_restorer(path: &Path) -> Result<Restorer> {
    let (model, meta) = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    info!("loaded {} ({} parameters, step {})", path.display(), model.num_parameters(), meta.step);
    let embedder = Embedder::from_config(&model.config.embedder)?;
    Ok(Restorer::new(model, embedder))
}

fn infer(a: InferArgs) -> Result<()> {
    let restorer = load_restorer(&a.ckpt)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        std::fs::create_dir_all(&a.out)?;
        list_images(&a.input)?
            .into_iter()
            .map(|p| {
                let out = a.out.join(p.file_name().expect("listed files have names"));
                (p, out)
            })
            .collect()
    } else {
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        vec![(a.input.clone(), a.out.clone())]
    };
    let captioned = restorer.model.config.embedder.captioner.is_some();
    for (input, output) in jobs {
        let img = Image::load_png(&input)?;
        let meta = match (&a.weather, captioned) {
            (Some(w), _) => Some(CaptionMetadata { scene: a.scene.clone().unwrap_or_else(|| scene_label(&input)), weather: w.clone() }),
            (None, true) => None,
            (None, false) => bail!("--weather is required when the checkpoint has no external captioner"),
        };
        let out = restorer.restore(&img, meta.as_ref()).with_context(|| format!("restoring {}", input.display()))?;
        out.second.save_png(&output)?;
        if a.both_iterations {
            let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("restored");
            out.first.save_png(&output.with_file_name(format!("{stem}_first.png")))?;
        }
        info!("{} -> {}", input.display(), output.display());
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let restorer = load_restorer(&a.ckpt)?;
    let entries = read_manifest(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let report = evaluate(&restorer, &entries, a.both_iterations, Some(restorer.model.config.clone()))?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.report, report.to_json()?)?;
    let agg = &report.aggregate;
    println!("{} samples: PSNR {:.2} dB, SSIM {:.4}", agg.count, agg.restored.psnr.0, agg.restored.ssim);
    if let Some(first) = &agg.first_pass {
        println!("first pass: PSNR {:.2} dB, SSIM {:.4}", first.psnr.0, first.ssim);
    }
    Ok(())
}
