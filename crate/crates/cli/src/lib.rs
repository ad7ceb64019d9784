//! `vton` command line: every pipeline stage as a subcommand driven by one
//! config file plus flags.

pub mod ablation;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use vton_core::checkpoint::Checkpoint;
use vton_core::codec::Codec;
use vton_core::config::DiffusionConfig;
use vton_core::data::{all_images, build_dataset, load_dataset};
use vton_core::diffusion::NoiseSchedule;
use vton_core::metrics::{evaluate, EvalMode};
use vton_core::sampler::Model;
use vton_core::trainer::{log_csv, LatentCache, Trainer};
use vton_core::{Error, Image, PipelineConfig, Result};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Debug, Parser)]
#[command(name = "vton", version, about = "Parser-free virtual try-on with latent diffusion")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Config file (`[section]` headers, `key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for every stage (data, codec, train, sample, eval).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the effective config with all defaults and exit.
    #[arg(long, global = true)]
    pub print_defaults: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset and its pseudo-inputs.
    GenData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the latent codec on a dataset, then freeze it.
    TrainCodec {
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the diffusion network on codec latents.
    Train {
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Frozen codec checkpoint.
        #[arg(long)]
        codec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a diffusion checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate a try-on image from a person image and a garment image.
    Sample {
        /// Person image (PPM).
        #[arg(long)]
        person: PathBuf,
        /// Garment image (PPM).
        #[arg(long)]
        garment: PathBuf,
        /// Diffusion checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Guidance scale (default: `sample.guidance_scale`).
        #[arg(long = "s")]
        scale: Option<f64>,
        /// Output image (PPM).
        #[arg(long)]
        out: PathBuf,
        /// Also write person | garment | result side by side.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Score generations on a dataset split and write a JSON report.
    Eval {
        /// Diffusion checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// `paired` or `unpaired`.
        #[arg(long, default_value = "paired")]
        mode: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write the generated images.
        #[arg(long)]
        save_images: bool,
    },
    /// Write the noise schedule as CSV.
    ScheduleDump {
        /// Number of steps, with endpoints rescaled from the 1000-step
        /// schedule (default: the config's schedule).
        #[arg(long = "T")]
        timesteps: Option<usize>,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the four-row ablation grid.
    Ablate {
        /// Training split.
        #[arg(long)]
        data: PathBuf,
        /// Held-out split, scored in unpaired mode.
        #[arg(long)]
        eval_data: PathBuf,
        /// Frozen codec checkpoint.
        #[arg(long)]
        codec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Training and sampling seeds, one replicate each.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

/// Parses `argv` and runs it. Exit codes: 0 success, 1 usage error, 2
/// runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.global.verbose);
    match execute(&cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn init_logging(verbose: bool) {
    let level = if verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn set_overrides(g: &GlobalArgs) -> CliResult<Vec<(String, String)>> {
    g.overrides
        .iter()
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn seed_overrides(g: &GlobalArgs, sections: &[&str]) -> Vec<(String, String)> {
    match g.seed {
        Some(seed) => sections.iter().map(|s| (format!("{s}.seed"), seed.to_string())).collect(),
        None => Vec::new(),
    }
}

/// Config from `--config`, then `--set`, then `--seed`.
pub fn resolve_config(g: &GlobalArgs) -> CliResult<PipelineConfig> {
    let text = match &g.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = set_overrides(g)?;
    overrides.extend(seed_overrides(g, &["data", "codec", "train", "sample", "eval"]));
    Ok(PipelineConfig::from_toml_with_overrides(&text, &overrides)?)
}

/// Checkpoint config with flag overrides. Only `sample.*` and `eval.*` keys
/// may change, since the rest is fixed by the trained weights.
fn checkpoint_config(g: &GlobalArgs, ckpt: &Checkpoint) -> CliResult<PipelineConfig> {
    if g.config.is_some() {
        return Err(CliError::Usage("--config does not apply to a trained checkpoint; use --set sample.*".into()));
    }
    let mut overrides = set_overrides(g)?;
    if let Some((k, _)) = overrides.iter().find(|(k, _)| !(k.starts_with("sample.") || k.starts_with("eval."))) {
        return Err(CliError::Usage(format!("{k} is fixed by the checkpoint; only sample.* and eval.* can be set")));
    }
    overrides.extend(seed_overrides(g, &["sample", "eval"]));
    Ok(PipelineConfig::from_toml_with_overrides(&ckpt.config.to_toml(), &overrides)?)
}

fn write_effective(dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(EFFECTIVE_CONFIG), cfg.to_toml())?;
    Ok(())
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    if g.print_defaults {
        print!("{}", resolve_config(g)?.to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Usage("no subcommand given (see --help)".into()));
    };
    match command {
        Command::GenData { out } => {
            let cfg = resolve_config(g)?;
            let manifest = build_dataset(&cfg.data, out)?;
            write_effective(out, &cfg)?;
            println!("wrote {} samples to {}", manifest.samples.len(), out.display());
        }
        Command::TrainCodec { data, out } => {
            let cfg = resolve_config(g)?;
            let (_, samples) = load_dataset(data)?;
            let mut codec = Codec::new(&cfg.codec)?;
            let report = codec.train(&all_images(&samples))?;
            std::fs::create_dir_all(out)?;
            codec.to_checkpoint(&cfg).save(out.join("codec.ckpt"))?;
            let mut csv = String::from("step,total,l1,kl\n");
            for (i, l) in report.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{:.9e},{:.9e},{:.9e}\n", l.total, l.l1, l.kl));
            }
            std::fs::write(out.join("codec_log.csv"), csv)?;
            write_effective(out, &cfg)?;
            println!("codec latent scale {:.6}, wrote {}", codec.latent_scale(), out.join("codec.ckpt").display());
        }
        Command::Train { data, codec, out, resume } => {
            let mut cfg = resolve_config(g)?;
            let codec = Codec::from_checkpoint(&Checkpoint::load(codec)?)?;
            if !codec.is_frozen() {
                return Err(CliError::Usage("codec checkpoint is not frozen; run train-codec first".into()));
            }
            cfg.codec = codec.config().clone();
            let (_, samples) = load_dataset(data)?;
            let cache = LatentCache::build(&codec, &samples)?;
            let mut trainer = match resume {
                Some(path) => {
                    let mut ckpt = Checkpoint::load(path)?;
                    ckpt.config.train.steps = cfg.train.steps;
                    cfg = ckpt.config.clone();
                    Trainer::from_checkpoint(&ckpt)?
                }
                None => Trainer::new(&cfg)?,
            };
            std::fs::create_dir_all(out)?;
            let every = cfg.train.checkpoint_every;
            let logs = trainer.fit(&cache, |log, t| {
                if every > 0 && t.step() % every == 0 {
                    t.to_checkpoint(&codec).save(out.join(format!("model_step{:06}.ckpt", t.step())))?;
                }
                if log.step % 100 == 0 {
                    info!("step {} mse {:.5}", log.step, log.loss_mse);
                }
                Ok(())
            })?;
            trainer.to_checkpoint(&codec).save(out.join("model.ckpt"))?;
            std::fs::write(out.join("train_log.csv"), log_csv(&logs))?;
            write_effective(out, &cfg)?;
            println!("trained to step {}, wrote {}", trainer.step(), out.join("model.ckpt").display());
        }
        Command::Sample {
            person,
            garment,
            ckpt,
            scale,
            out,
            grid,
        } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let mut cfg = checkpoint_config(g, &ckpt)?;
            if let Some(s) = scale {
                cfg.sample.guidance_scale = *s;
            }
            let model = Model::from_checkpoint(&ckpt)?;
            let p = Image::read_ppm(person)?;
            let gi = Image::read_ppm(garment)?;
            let result = model.generate(&p, &gi, cfg.sample.guidance_scale, cfg.sample.seed)?;
            result.write_ppm(out)?;
            if let Some(grid) = grid {
                Image::hstack(&[&p, &gi, &result])?.write_ppm(grid)?;
            }
            write_effective(parent_dir(out), &cfg)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            ckpt,
            data,
            mode,
            out,
            save_images,
        } => {
            let mode: EvalMode = mode.parse()?;
            let ckpt = Checkpoint::load(ckpt)?;
            let cfg = checkpoint_config(g, &ckpt)?;
            let model = Model::from_checkpoint(&ckpt)?;
            let (_, mut samples) = load_dataset(data)?;
            if cfg.eval.max_samples > 0 {
                samples.truncate(cfg.eval.max_samples);
            }
            let (report, images) = evaluate(&model, &samples, mode, cfg.sample.guidance_scale, cfg.eval.seed, ablation::EVAL_BATCH)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("report.json"), report.to_json()?)?;
            if *save_images {
                for (i, im) in images.iter().enumerate() {
                    im.write_ppm(out.join(format!("gen_{i:04}.ppm")))?;
                }
            }
            write_effective(out, &cfg)?;
            println!("{}", report.to_json()?);
        }
        Command::ScheduleDump { timesteps, out } => {
            let mut cfg = resolve_config(g)?;
            if let Some(t) = timesteps {
                cfg.diffusion = DiffusionConfig {
                    eq6_literal: cfg.diffusion.eq6_literal,
                    ..DiffusionConfig::rescaled(*t)
                };
            }
            let csv = NoiseSchedule::from_config(&cfg.diffusion)?.to_csv();
            match out {
                Some(path) => {
                    std::fs::write(path, csv)?;
                    write_effective(parent_dir(path), &cfg)?;
                }
                None => print!("{csv}"),
            }
        }
        Command::Ablate {
            data,
            eval_data,
            codec,
            out,
            seeds,
        } => {
            let mut cfg = resolve_config(g)?;
            let codec = Codec::from_checkpoint(&Checkpoint::load(codec)?)?;
            cfg.codec = codec.config().clone();
            let (_, train) = load_dataset(data)?;
            let (_, held) = load_dataset(eval_data)?;
            let table = ablation::run_ablation(&cfg, &codec, &train, &held, seeds)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("ablation.csv"), table.to_csv())?;
            std::fs::write(out.join("ablation_runs.csv"), table.runs_csv())?;
            write_effective(out, &cfg)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}
