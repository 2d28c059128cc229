//! Command-line surface.
//!
//! Subcommands: `train`, `eval`, `predict`, `decompose`, `synth`, `ablate`.
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure. Training
//! hyperparameters come from a flat key=value config file; unknown keys are
//! rejected. The environment variable `CRACKNEX_SEED` provides a seed for
//! commands with a `--seed` flag when the flag is absent (the flag wins).

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::data::{self, CrackStyle, SplitTag};
use crate::engine::{self, AblationRow, TrainConfig};
use crate::error::{Error, Result};
use crate::imgmath;
use crate::retinex;
use crate::rng::{self, Stream};

#[derive(Parser)]
#[command(
    name = "cracknex",
    about = "Reflectance-guided few-shot crack segmentation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Segment one query image given annotated support images.
    Predict(PredictArgs),
    /// Split images into reflectance and illumination.
    Decompose(DecomposeArgs),
    /// Generate a synthetic crack dataset.
    Synth(SynthArgs),
    /// Train and evaluate the four component-ablation variants.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Dataset root with images/ and masks/.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Support images per episode.
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// Number of evaluation episodes.
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    /// Episode sampling seed (falls back to CRACKNEX_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the report JSON.
    #[arg(long)]
    json: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Support pair as "image.png,mask.png"; repeat for more shots.
    #[arg(long, required = true)]
    support: Vec<String>,
    /// Query image to segment.
    #[arg(long)]
    query: PathBuf,
    /// Output mask PNG (0 background, 255 crack).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecomposeArgs {
    /// A PNG file or a directory of PNG files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Smoothing sigma; defaults to min(H, W)/16 per image.
    #[arg(long)]
    sigma: Option<f32>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of image/mask pairs.
    #[arg(long)]
    count: usize,
    /// Height and width (multiples of 8).
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    size: Vec<usize>,
    /// Base seed (falls back to CRACKNEX_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write a darkened copy under <out>/lowlight, parameters as
    /// "gamma,gain,sigma".
    #[arg(long)]
    lowlight: Option<String>,
    /// Crack thickness in pixels.
    #[arg(long, default_value_t = 3)]
    crack_width: usize,
    /// Crack darkening factor in (0, 1].
    #[arg(long, default_value_t = 0.6)]
    contrast: f32,
    /// Background texture lattice spacing in pixels.
    #[arg(long, default_value_t = 8.0)]
    texture_scale: f32,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "train-data")]
    train_data: PathBuf,
    #[arg(long = "test-data")]
    test_data: PathBuf,
    /// Where to write the 4-row table JSON.
    #[arg(long)]
    out: PathBuf,
    /// Evaluation episodes per variant and shot setting.
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
}

/// Entry point used by `main` and by tests; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Decompose(args) => cmd_decompose(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

// ---------------------------------------------------------------------------
// config file
// ---------------------------------------------------------------------------

/// Parse the flat key=value training configuration. Absent keys keep their
/// defaults; unknown keys are a hard error.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            continue; // optional single section header
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::ConfigValue {
                key: format!("line {}", lineno + 1),
                message: format!("expected key=value, got \"{line}\""),
            });
        };
        let key = key.trim();
        let value = value.trim();
        apply_key(&mut config, key, value)?;
    }
    config.validate()?;
    Ok(config)
}

fn apply_key(config: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value.parse().map_err(|_| Error::ConfigValue {
            key: key.to_string(),
            message: format!("cannot parse \"{value}\""),
        })
    }
    fn parse_bool(key: &str, value: &str) -> Result<bool> {
        match value {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(Error::ConfigValue {
                key: key.to_string(),
                message: format!("expected a boolean, got \"{value}\""),
            }),
        }
    }
    match key {
        "iterations" => config.iterations = parse(key, value)?,
        "batch_episodes" => config.batch_episodes = parse(key, value)?,
        "lr0" => config.lr0 = parse(key, value)?,
        "momentum" => config.momentum = parse(key, value)?,
        "decay_every" => config.decay_every = parse(key, value)?,
        "decay_factor" => config.decay_factor = parse(key, value)?,
        "shots" => config.shot_count = parse(key, value)?,
        "seed" => config.seed = parse(key, value)?,
        "lambda1" => config.weights.lambda1 = parse(key, value)?,
        "lambda2" => config.weights.lambda2 = parse(key, value)?,
        "use_reflectance" => config.toggles.use_reflectance = parse_bool(key, value)?,
        "use_pfm" => config.toggles.use_pfm = parse_bool(key, value)?,
        "use_aspp" => config.toggles.use_aspp = parse_bool(key, value)?,
        "temperature" => config.temperature = parse(key, value)?,
        "channels" => config.channels = parse(key, value)?,
        "image_height" => config.image_size.0 = parse(key, value)?,
        "image_width" => config.image_size.1 = parse(key, value)?,
        "tau_fg" => config.ssp.tau_fg = parse(key, value)?,
        "tau_bg" => config.ssp.tau_bg = parse(key, value)?,
        "blend" => config.ssp.blend = parse(key, value)?,
        "smoothing_sigma" => config.smoothing_sigma = Some(parse(key, value)?),
        other => return Err(Error::UnknownConfigKey(other.to_string())),
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn seed_or_env(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("CRACKNEX_SEED") {
        Ok(text) => text.parse().map_err(|_| Error::ConfigValue {
            key: "CRACKNEX_SEED".into(),
            message: format!("cannot parse \"{text}\" as a seed"),
        }),
        Err(_) => Ok(0),
    }
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let dataset = data::load_dataset(&args.data, config.image_size, SplitTag::Base)?;
    let stdout = std::io::stdout();
    let mut log = stdout.lock();
    let checkpoint = engine::train(&config, &dataset, &mut log)?;
    engine::save_checkpoint(&checkpoint, &args.out)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let seed = seed_or_env(args.seed)?;
    let checkpoint = engine::load_checkpoint(&args.checkpoint)?;
    let dataset = data::load_dataset(&args.data, checkpoint.config.image_size, SplitTag::Novel)?;
    let report = engine::evaluate(&checkpoint, &dataset, args.shots, args.episodes, seed)?;
    let json = serde_json::to_string(&report)?;
    std::fs::write(&args.json, &json).map_err(|e| Error::io(&args.json, e))?;
    println!("mIoU={}", report.miou);
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let checkpoint = engine::load_checkpoint(&args.checkpoint)?;
    let (th, tw) = checkpoint.config.image_size;

    let mut supports = Vec::with_capacity(args.support.len());
    for (i, pair) in args.support.iter().enumerate() {
        let (img_path, mask_path) = pair.split_once(',').ok_or_else(|| {
            Error::InvalidArgument(format!(
                "--support needs \"image.png,mask.png\", got \"{pair}\" (missing mask)"
            ))
        })?;
        let image = read_image_resized(Path::new(img_path), th, tw)?;
        let mask = read_mask_resized(Path::new(mask_path), th, tw)?;
        supports.push(data::ImageSample::new(format!("support_{i}"), image, mask)?);
    }

    let query_png = image::open(&args.query).map_err(|e| Error::ImageDecode {
        path: args.query.clone(),
        source: e,
    })?;
    let (orig_w, orig_h) = (query_png.width() as usize, query_png.height() as usize);
    let query_resized = imgmath::rgb_to_array(
        &query_png
            .resize_exact(tw as u32, th as u32, image::imageops::FilterType::Triangle)
            .to_rgb8(),
    );
    let query = data::ImageSample::new("query", query_resized, Array2::zeros((th, tw)))?;

    let shot_count = supports.len();
    let episode = data::Episode {
        support: supports,
        query,
        shot_count,
    };
    let forward = engine::forward_episode(&episode, &checkpoint.params, &checkpoint.config)?;
    let prob_native = imgmath::resize_bilinear(&forward.prediction, orig_h, orig_w);
    let mask = engine::binarize(&prob_native, 0.5);
    imgmath::mask_to_gray(&mask)
        .save(&args.out)
        .map_err(|e| Error::ImageEncode {
            path: args.out.clone(),
            source: e,
        })?;
    Ok(())
}

fn cmd_decompose(args: DecomposeArgs) -> Result<()> {
    if let Some(s) = args.sigma {
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "--sigma must be > 0, got {s}"
            )));
        }
    }
    let inputs: Vec<PathBuf> = if args.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&args.input)
            .map_err(|e| Error::io(&args.input, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        v.sort();
        v
    } else {
        vec![args.input.clone()]
    };
    if inputs.is_empty() {
        return Err(Error::EmptyDataset {
            path: args.input.clone(),
        });
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for path in inputs {
        let img = image::open(&path)
            .map_err(|e| Error::ImageDecode {
                path: path.clone(),
                source: e,
            })?
            .to_rgb8();
        let array = imgmath::rgb_to_array(&img);
        let (h, w, _) = array.dim();
        let sigma = args.sigma.unwrap_or_else(|| retinex::default_sigma(h, w));
        let decomposition = retinex::decompose(&array, sigma)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        let refl_path = args.out.join(format!("{stem}_reflectance.png"));
        let illum_path = args.out.join(format!("{stem}_illumination.png"));
        imgmath::array_to_rgb(&decomposition.reflectance)
            .save(&refl_path)
            .map_err(|e| Error::ImageEncode {
                path: refl_path.clone(),
                source: e,
            })?;
        imgmath::array_to_gray(&decomposition.illumination)
            .save(&illum_path)
            .map_err(|e| Error::ImageEncode {
                path: illum_path.clone(),
                source: e,
            })?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    if args.count == 0 {
        return Err(Error::InvalidArgument("--count must be >= 1".into()));
    }
    let [h, w] = args.size[..] else {
        return Err(Error::InvalidArgument(
            "--size needs exactly two values".into(),
        ));
    };
    let seed = seed_or_env(args.seed)?;
    let lowlight = args
        .lowlight
        .as_deref()
        .map(|spec| -> Result<(f32, f32, f32)> {
            let parts: Vec<&str> = spec.split(',').collect();
            let [g, gn, s] = parts[..] else {
                return Err(Error::InvalidArgument(format!(
                    "--lowlight needs \"gamma,gain,sigma\", got \"{spec}\""
                )));
            };
            let parse = |what: &str, v: &str| -> Result<f32> {
                v.trim().parse().map_err(|_| {
                    Error::InvalidArgument(format!("--lowlight {what} \"{v}\" is not a number"))
                })
            };
            Ok((parse("gamma", g)?, parse("gain", gn)?, parse("sigma", s)?))
        })
        .transpose()?;

    let style = CrackStyle {
        crack_width_px: args.crack_width,
        contrast: args.contrast,
        texture_scale: args.texture_scale,
    };
    let write_pair = |root: &Path,
                      stem: &str,
                      image: &ndarray::Array3<f32>,
                      mask: &Array2<u8>|
     -> Result<()> {
        let images = root.join("images");
        let masks = root.join("masks");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
        let ipath = images.join(format!("{stem}.png"));
        let mpath = masks.join(format!("{stem}.png"));
        imgmath::array_to_rgb(image)
            .save(&ipath)
            .map_err(|e| Error::ImageEncode {
                path: ipath.clone(),
                source: e,
            })?;
        imgmath::mask_to_gray(mask)
            .save(&mpath)
            .map_err(|e| Error::ImageEncode {
                path: mpath.clone(),
                source: e,
            })?;
        Ok(())
    };

    for i in 0..args.count {
        let sample =
            data::generate_synthetic_crack(h, w, rng::derive(seed, Stream::Synth, i as u64), &style)?;
        let stem = format!("{i:05}");
        write_pair(&args.out, &stem, &sample.image, &sample.mask)?;
        if let Some((gamma, gain, sigma)) = lowlight {
            let dark = data::synthesize_lowlight(
                &sample.image,
                gamma,
                gain,
                sigma,
                rng::derive(seed, Stream::Noise, i as u64),
            )?;
            write_pair(&args.out.join("lowlight"), &stem, &dark, &sample.mask)?;
        }
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let train_ds = data::load_dataset(&args.train_data, config.image_size, SplitTag::Base)?;
    let test_ds = data::load_dataset(&args.test_data, config.image_size, SplitTag::Novel)?;
    let stdout = std::io::stdout();
    let mut log = stdout.lock();
    let rows = engine::run_ablation(&config, &train_ds, &test_ds, args.episodes, &mut log)?;
    let json = serde_json::to_string_pretty(&rows)?;
    std::fs::write(&args.out, &json).map_err(|e| Error::io(&args.out, e))?;
    print_ablation_table(&rows);
    Ok(())
}

fn print_ablation_table(rows: &[AblationRow]) {
    println!(
        "{:<12} {:<6} {:<6} {:>10} {:>10}",
        "reflectance", "pfm", "aspp", "1-shot", "5-shot"
    );
    for row in rows {
        let tick = |b: bool| if b { "x" } else { "" };
        println!(
            "{:<12} {:<6} {:<6} {:>10.4} {:>10.4}",
            tick(row.reflectance),
            tick(row.pfm),
            tick(row.aspp),
            row.one_shot.miou,
            row.five_shot.miou
        );
    }
}

fn read_image_resized(path: &Path, th: usize, tw: usize) -> Result<ndarray::Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            source: e,
        })?
        .resize_exact(tw as u32, th as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    Ok(imgmath::rgb_to_array(&img))
}

fn read_mask_resized(path: &Path, th: usize, tw: usize) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            source: e,
        })?
        .resize_exact(tw as u32, th as u32, image::imageops::FilterType::Nearest)
        .to_luma8();
    Ok(imgmath::gray_to_mask(&img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let config = parse_config("").unwrap();
        assert_eq!(config.iterations, 6000);
        assert_eq!(config.batch_episodes, 4);
        assert!((config.lr0 - 1e-3).abs() < 1e-15);
        assert!((config.weights.lambda2 - 0.2).abs() < 1e-15);
        assert_eq!(config.image_size, (400, 400));

        let text = "\
# comment
[cracknex]
iterations = 12
lr0 = 0.05
use_aspp = false
image_height = 64
image_width = 48
tau_fg = 0.8
";
        let config = parse_config(text).unwrap();
        assert_eq!(config.iterations, 12);
        assert!((config.lr0 - 0.05).abs() < 1e-15);
        assert!(!config.toggles.use_aspp);
        assert_eq!(config.image_size, (64, 48));
        assert!((config.ssp.tau_fg - 0.8).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        match parse_config("learning_rate = 0.1") {
            Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "learning_rate"),
            other => panic!("expected UnknownConfigKey, got {other:?}"),
        }
        assert!(parse_config("iterations = soon").is_err());
        assert!(parse_config("use_pfm = maybe").is_err());
        assert!(parse_config("no equals sign here").is_err());
        // values must satisfy the config invariants too
        assert!(parse_config("decay_factor = 1.5").is_err());
        assert!(parse_config("image_height = 63").is_err());
    }

    #[test]
    fn usage_errors_map_to_exit_one() {
        assert_eq!(run(["cracknex", "train"]), 1); // missing required flags
        assert_eq!(run(["cracknex", "no-such-command"]), 1);
        assert_eq!(run(["cracknex", "--help"]), 0);
    }
}
