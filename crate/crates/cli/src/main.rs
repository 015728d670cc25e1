use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use probcodec::codec::ingest::{self, Source};
use probcodec::codec::{self, Container};
use probcodec::model::{Model, ModelConfig};
use probcodec::sampler::SampleSpec;
use probcodec::train::{self, StepRecord, TrainConfig, Trainer};

mod selftest;

/// Worker-thread count for batch jobs and training.
pub const THREADS_ENV: &str = "PCODEC_THREADS";

#[derive(Parser)]
#[command(name = "probcodec", version, about = "Lossy image codec with probabilistic decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress PNG images into containers.
    Encode(EncodeArgs),
    /// Deterministic (alpha = 0) reconstruction of containers.
    Decode(DecodeArgs),
    /// Draw reconstructions at several temperatures from one container.
    Sample(SampleArgs),
    /// Train a model, or write a fresh one with `--steps 0`.
    Train(TrainArgs),
    /// MSE and PSNR of candidates against a reference, as JSON.
    Metrics(MetricsArgs),
    /// Dump the posterior scale of every subband as PGM images.
    Inspect(InspectArgs),
    /// Build a training directory of cropped PNG files.
    Ingest(IngestArgs),
    /// Run quick built-in consistency checks.
    Selftest,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output file; only valid with a single input.
    #[arg(short, long, conflicts_with = "out_dir")]
    output: Option<PathBuf>,
    /// Directory receiving `<stem>.pcbs` for each input.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short, long, conflicts_with = "out_dir")]
    output: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    input: PathBuf,
    /// Sampling temperature; repeat for a sweep.
    #[arg(long = "alpha", required = true)]
    alphas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draws per temperature, with seeds `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out_dir: PathBuf,
    /// Original image; adds MSE and PSNR to the report.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 8.0)]
    lambda: f64,
    /// Total steps, warm start included.
    #[arg(long, default_value_t = 25_000)]
    steps: usize,
    #[arg(long, default_value_t = 5_000)]
    warmstart_steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    patch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model file to continue from; its `.adam` sidecar must exist.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 1_000)]
    checkpoint_every: usize,
    /// Per-step CSV; defaults to `<out-model>.csv`.
    #[arg(long)]
    metrics_csv: Option<PathBuf>,
    /// Decomposition depth of a fresh model.
    #[arg(long, default_value_t = 4)]
    levels: usize,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(required = true)]
    candidates: Vec<PathBuf>,
    /// Container whose bit rate is reported.
    #[arg(long)]
    container: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Directory of images; repeatable.
    #[arg(long)]
    source_dir: Vec<PathBuf>,
    /// Text file with one image URL per line; repeatable.
    #[arg(long)]
    url_list: Vec<PathBuf>,
    /// Number of procedural images to generate.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 64)]
    synthetic_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Crops are multiples of `2^levels`.
    #[arg(long, default_value_t = 4)]
    levels: usize,
}

/// Invalid flag combinations detected after parsing.
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

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<probcodec::Error>() {
            return if e.is_model_mismatch() { 4 } else { 3 };
        }
    }
    3
}

pub fn threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Sample(a) => sample(a),
        Command::Train(a) => train_cmd(a),
        Command::Metrics(a) => metrics(a),
        Command::Inspect(a) => inspect(a),
        Command::Ingest(a) => ingest_cmd(a),
        Command::Selftest => selftest::run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| probcodec::Error::io(format!("reading {}", path.display()), e))?;
    Container::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned())
}

/// Output path per input: the explicit file, or `<dir>/<stem>.<ext>`.
fn outputs(inputs: &[PathBuf], output: Option<PathBuf>, out_dir: Option<PathBuf>, ext: &str) -> Result<Vec<PathBuf>> {
    match (output, out_dir) {
        (Some(o), None) if inputs.len() == 1 => Ok(vec![o]),
        (Some(_), None) => Err(usage("--output takes a single input; use --out-dir for several")),
        (None, Some(d)) => {
            std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
            Ok(inputs.iter().map(|p| d.join(format!("{}.{ext}", stem(p)))).collect())
        }
        (None, None) => Err(usage("one of --output or --out-dir is required")),
        (Some(_), Some(_)) => Err(usage("--output and --out-dir are exclusive")),
    }
}

/// Runs `job` over all index pairs on the configured number of workers and
/// returns the first error.
fn parallel<T: Sync>(items: &[T], job: impl Fn(&T) -> Result<()> + Sync) -> Result<()> {
    let n = threads().min(items.len()).max(1);
    if n == 1 {
        return items.iter().try_for_each(&job);
    }
    let job = &job;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|w| s.spawn(move || items.iter().skip(w).step_by(n).try_for_each(job)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect::<Result<Vec<()>>>()
    })?;
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let outs = outputs(&a.inputs, a.output, a.out_dir, "pcbs")?;
    let jobs: Vec<(&PathBuf, &PathBuf)> = a.inputs.iter().zip(&outs).collect();
    parallel(&jobs, |(input, out)| {
        let img = codec::load_image(input)?;
        let c = codec::encode(&img, &model).with_context(|| format!("encoding {}", input.display()))?;
        std::fs::write(out, c.to_bytes()).map_err(|e| probcodec::Error::io(format!("writing {}", out.display()), e))?;
        println!("{} -> {} ({:.4} bpp)", input.display(), out.display(), c.bpp());
        Ok(())
    })
}

fn decode(a: DecodeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let outs = outputs(&a.inputs, a.output, a.out_dir, "png")?;
    let jobs: Vec<(&PathBuf, &PathBuf)> = a.inputs.iter().zip(&outs).collect();
    let spec = [SampleSpec::new(0.0, 0, 1)?];
    parallel(&jobs, |(input, out)| {
        let c = read_container(input)?;
        let img = codec::decode(&c, &model, &spec).with_context(|| format!("decoding {}", input.display()))?;
        codec::save_png(out, &img[0])?;
        println!("{} -> {}", input.display(), out.display());
        Ok(())
    })
}

fn sample(a: SampleArgs) -> Result<()> {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let specs =
        a.alphas.iter().map(|&alpha| SampleSpec::new(alpha, a.seed, a.count)).collect::<Result<Vec<_>, _>>()?;
    let model = load_model(&a.model)?;
    let bytes = std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let c = Container::from_bytes(&bytes).map_err(anyhow::Error::from)?;
    let reference = a.reference.as_deref().map(codec::load_image).transpose()?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let fields = codec::decode_fields(&c, &model)?;
    let (w, h) = (c.width as usize, c.height as usize);
    let base = stem(&a.input);
    let mut rows = Vec::new();
    for s in &specs {
        for i in 0..s.count {
            let seed = s.seed.wrapping_add(i as u64);
            let img = codec::reconstruct(&fields, &model, s.alpha, seed, w, h)?;
            let name = format!("{base}_a{}_s{seed}.png", s.alpha);
            codec::save_png(&a.out_dir.join(&name), &img)?;
            let mut row = serde_json::json!({ "alpha": s.alpha, "seed": seed, "file": name });
            if let Some(r) = &reference {
                let m = codec::mse(r, &img)?;
                row["mse"] = serde_json::json!(m);
                row["psnr"] = codec::psnr_json(codec::psnr(m));
            }
            rows.push(row);
        }
    }
    let report = serde_json::json!({
        "container_sha256": codec::sha256_hex(&bytes),
        "bpp": c.bpp(),
        "samples": rows,
    });
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(a.out_dir.join("report.json"), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn training_planes(dir: &Path) -> Result<Vec<probcodec::pyramid::Plane<f64>>> {
    let mut planes = Vec::new();
    for path in ingest::list_images(dir)? {
        let img = codec::load_image(&path)?;
        for c in 0..img.channels {
            planes.push(img.plane(c).map(|v| v - codec::PIXEL_OFFSET));
        }
    }
    if planes.is_empty() {
        bail!(probcodec::Error::Invalid(format!("no PNG images in {}", dir.display())));
    }
    Ok(planes)
}

fn save_checkpoint(trainer: &Trainer, out: &Path) -> Result<(), probcodec::Error> {
    trainer.model.save(out)?;
    let side = train::optimizer_path(out);
    std::fs::write(&side, trainer.optimizer_bytes()?)
        .map_err(|e| probcodec::Error::io(format!("writing {}", side.display()), e))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        lambda: a.lambda,
        steps: a.steps,
        warmstart_steps: a.warmstart_steps,
        batch: a.batch,
        patch: a.patch,
        lr: a.lr,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        threads: threads(),
        ..TrainConfig::default()
    };
    let (model, adam) = match &a.resume {
        Some(path) => {
            let model = load_model(path)?;
            let side = train::optimizer_path(path);
            let bytes = std::fs::read(&side).with_context(|| format!("reading {}", side.display()))?;
            let adam = train::optimizer_from_bytes(&model.store, &bytes)?;
            (model, Some(adam))
        }
        None => (Model::new(ModelConfig { levels: a.levels, ..ModelConfig::default() }, a.seed)?, None),
    };
    if a.steps == 0 && a.resume.is_none() {
        config.validate(model.levels())?;
        let mut model = model;
        model.config_hash = config.hash();
        model.save(&a.out_model)?;
        println!("wrote untrained model {}", a.out_model.display());
        return Ok(());
    }
    let dir = a.data_dir.as_deref().ok_or_else(|| usage("--data-dir is required for training"))?;
    let data = training_planes(dir)?;
    let mut trainer = match adam {
        Some(adam) => Trainer::resume(model, adam, config, data)?,
        None => Trainer::new(model, config, data)?,
    };
    let csv_path = a.metrics_csv.clone().unwrap_or_else(|| {
        let mut s = a.out_model.as_os_str().to_owned();
        s.push(".csv");
        s.into()
    });
    let fresh = trainer.step_count() == 0 || !csv_path.exists();
    let mut csv = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&csv_path)
            .with_context(|| format!("opening {}", csv_path.display()))?,
    );
    use std::io::Write;
    if fresh {
        writeln!(csv, "{}", StepRecord::CSV_HEADER)?;
    }
    let out = a.out_model.clone();
    let csv = std::cell::RefCell::new(csv);
    let checkpoints = trainer.run(
        |r| writeln!(csv.borrow_mut(), "{}", r.csv_row()).map_err(|e| probcodec::Error::io("writing metrics", e)),
        |t, c| {
            println!("step {} trailing loss {:.6}", c.step, c.trailing_loss);
            csv.borrow_mut().flush().map_err(|e| probcodec::Error::io("writing metrics", e))?;
            save_checkpoint(t, &out)
        },
    )?;
    csv.borrow_mut().flush()?;
    if checkpoints.is_empty() {
        save_checkpoint(&trainer, &out)?;
    }
    println!("wrote {}", a.out_model.display());
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let reference = codec::load_image(&a.reference)?;
    let candidates = a.candidates.iter().map(|p| codec::load_image(p)).collect::<Result<Vec<_>, _>>()?;
    let container = a.container.as_deref().map(read_container).transpose()?;
    let report = codec::metrics(&reference, &candidates, container.as_ref())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let c = read_container(&a.input)?;
    let fields = codec::decode_fields(&c, &model)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut bands = Vec::new();
    for (ch, f) in fields.iter().enumerate() {
        for (b, s) in f.scale.bands.iter().enumerate() {
            let name = format!("scale_c{ch}_b{b:02}.pgm");
            codec::write_pgm(&a.out_dir.join(&name), &codec::scale_image(s))?;
            let mean = s.data.iter().sum::<f64>() / s.len() as f64;
            bands.push(serde_json::json!({ "channel": ch, "band": b, "file": name, "mean_scale": mean }));
        }
    }
    println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "bands": bands }))?);
    Ok(())
}

fn ingest_cmd(a: IngestArgs) -> Result<()> {
    let mut sources: Vec<Source> = a.source_dir.into_iter().map(Source::Dir).collect();
    sources.extend(a.url_list.into_iter().map(Source::UrlList));
    if let Some(count) = a.synthetic {
        sources.push(Source::Synthetic { seed: a.seed, count, width: a.synthetic_size, height: a.synthetic_size });
    }
    if sources.is_empty() {
        return Err(usage("give at least one of --source-dir, --url-list or --synthetic"));
    }
    if a.levels > 16 {
        return Err(usage("--levels is too large"));
    }
    let m = ingest::ingest(&sources, &a.out_dir, 1 << a.levels)?;
    println!("{} images written to {}, {} skipped", m.entries.len(), a.out_dir.display(), m.skipped.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&usage("x")), 2);
        assert_eq!(exit_code(&anyhow::Error::from(probcodec::Error::ModelMismatch).context("decoding")), 4);
        assert_eq!(exit_code(&anyhow::Error::from(probcodec::Error::Truncated)), 3);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 3);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
