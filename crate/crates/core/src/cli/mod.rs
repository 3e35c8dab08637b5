//! Command-line front end. Exit codes: 0 success, 1 usage, 2 runtime failure.

mod verify;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use hiervid::analysis::{alpha_csv, alpha_stats, attention_summaries};
use hiervid::generate::{hierarchical_generate, Decoding, Sampler};
use hiervid::kv::KvMap;
use hiervid::masks::WindowConfig;
use hiervid::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use hiervid::numkernel::Rng;
use hiervid::scheduler::{build_schedule, frame_swin_mask, verify_schedule};
use hiervid::sequence::Layout;
use hiervid::synthvid::{reconstruct_frame, MotionSpec};
use hiervid::trainer::{make_batch, make_dataset, pretrain_spatial, ClipSpec, Stage, TrainConfig, Trainer};
use hiervid::Error;

const MANIFEST_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "hiervid", version, about = "Hierarchical text-to-video token generation on synthetic clips")]
struct Cli {
    /// Output directory. The HIERVID_OUT environment variable takes precedence.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Flat `key = value` file overriding model and training defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print every configuration key with its default and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic clips into token sequences with previews.
    MakeData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
        /// Sequences whose frames are also written as PGM images.
        #[arg(long, default_value_t = 4)]
        previews: usize,
    },
    /// Train the spatial backbone on single frames, then freeze it.
    PretrainSpatial {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the temporal parameters of a key-frame or interpolation model.
    Train {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
        #[arg(long)]
        steps: Option<usize>,
        /// Start from the weights of a checkpoint, e.g. a pretrained backbone.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue from a checkpoint including its optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate key frames and interpolate them.
    Generate {
        #[arg(long)]
        seed: u64,
        /// Key-frame model checkpoint; a fresh model when absent.
        #[arg(long)]
        key: Option<PathBuf>,
        /// Interpolation model checkpoint; a fresh model when absent.
        #[arg(long)]
        interp: Option<PathBuf>,
        /// Motion caption as `shape,direction,speed`.
        #[arg(long, default_value = "square,right,1")]
        caption: MotionSpec,
        #[arg(long, default_value_t = 1.0)]
        base_fps: f64,
        #[arg(long, default_value_t = 0)]
        rounds: usize,
        #[arg(long, value_enum, default_value_t = SamplerKind::Topk)]
        sampler: SamplerKind,
        #[arg(long, default_value_t = 8)]
        top_k: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, value_enum, default_value_t = DecodingKind::Wavefront)]
        decoding: DecodingKind,
    },
    /// Build and check the wavefront decoding schedule.
    Schedule {
        #[arg(long, default_value_t = 8)]
        x: usize,
        #[arg(long, default_value_t = 8)]
        y: usize,
        #[arg(long, default_value_t = 2)]
        ax: usize,
        #[arg(long, default_value_t = 2)]
        ay: usize,
        #[arg(long, default_value_t = 5)]
        ts: usize,
    },
    /// Frame-to-frame attention mass per layer, head and channel.
    Analyze {
        /// Model checkpoint; a fresh model when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "square,right,1")]
        caption: MotionSpec,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Key-frame rate of the probe clip; the lowest trained rate when absent.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Run the invariant suite and print a pass/fail table.
    Verify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SamplerKind {
    Greedy,
    Topk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DecodingKind {
    Sequential,
    Wavefront,
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return 1;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Effective configuration of a run.
struct Settings {
    model: ModelConfig,
    train: TrainConfig,
    /// Whether a config file supplied the model keys.
    from_file: bool,
}

impl Settings {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self { model: ModelConfig::default(), train: TrainConfig::default(), from_file: false });
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let usage = |e: Error| CliError::Usage(format!("config {}: {e}", path.display()));
        let map = KvMap::parse(&text).map_err(usage)?;
        let known: Vec<&str> = ModelConfig::keys().iter().chain(TrainConfig::keys()).copied().collect();
        map.reject_unknown(&known).map_err(usage)?;
        let model = ModelConfig::from_kv(&map).map_err(usage)?;
        let train = TrainConfig::from_kv(&map).map_err(usage)?;
        Ok(Self { model, train, from_file: true })
    }
}

fn config_text(model: &ModelConfig, train: &TrainConfig) -> String {
    format!("# model\n{}# training\n{}", model.to_kv(), train.to_kv())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Run directory: `HIERVID_OUT` when set and non-empty, else `--out`.
fn out_dir(flag: &Path) -> PathBuf {
    match std::env::var_os("HIERVID_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.to_path_buf(),
    }
}

struct Run {
    dir: PathBuf,
    command: &'static str,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(dir: PathBuf, command: &'static str) -> CliResult<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, command, outputs: Vec::new() })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn record(&mut self, path: &Path) {
        self.outputs.push(path.strip_prefix(&self.dir).unwrap_or(path).to_path_buf());
    }

    fn write(&mut self, rel: &str, contents: &str) -> CliResult<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, contents)?;
        self.record(&p);
        Ok(())
    }

    /// Writes `config.txt` and `manifest.json`; the manifest carries no timestamps.
    fn finish(mut self, seed: Option<u64>, model: &ModelConfig, train: &TrainConfig, extra: Value) -> CliResult<()> {
        let config = config_text(model, train);
        self.write("config.txt", &config)?;
        let mut outputs: Vec<String> = self.outputs.iter().map(|p| p.to_string_lossy().replace('\\', "/")).collect();
        outputs.sort();
        let manifest = json!({
            "command": self.command,
            "seed": seed,
            "config_hash": sha256_hex(config.as_bytes()),
            "versions": {
                "hiervid": env!("CARGO_PKG_VERSION"),
                "manifest": MANIFEST_VERSION,
            },
            "outputs": outputs,
            "details": extra,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(self.path("manifest.json"), text + "\n")?;
        Ok(())
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    if cli.dump_defaults {
        print!("{}", config_text(&ModelConfig::default(), &TrainConfig::default()));
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no subcommand given".into()));
    };
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    if rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global().is_err() {
        warn!("thread pool already initialized");
    }
    let settings = Settings::load(cli.config.as_deref())?;
    let dir = out_dir(&cli.out);
    match command {
        Command::MakeData { seed, count, stage, previews } => make_data(settings, dir, seed, count, stage, previews),
        Command::PretrainSpatial { seed, steps } => pretrain(settings, dir, seed, steps),
        Command::Train { seed, stage, steps, init, resume } => train(settings, dir, seed, stage, steps, init, resume),
        Command::Generate { seed, key, interp, caption, base_fps, rounds, sampler, top_k, temperature, decoding } => {
            let sampler = match sampler {
                SamplerKind::Greedy => Sampler::Greedy,
                SamplerKind::Topk => Sampler::TopK { k: top_k, temperature, seed },
            };
            let decoding = match decoding {
                DecodingKind::Sequential => Decoding::Sequential,
                DecodingKind::Wavefront => Decoding::Wavefront,
            };
            generate(settings, dir, seed, key, interp, caption, base_fps, rounds, sampler, decoding)
        }
        Command::Schedule { x, y, ax, ay, ts } => schedule(settings, dir, x, y, ax, ay, ts),
        Command::Analyze { checkpoint, caption, seed, rate } => analyze(settings, dir, checkpoint, caption, seed, rate),
        Command::Verify => {
            let run = Run::new(dir, "verify")?;
            verify::run(run, &settings)
        }
    }
}

fn stage_arg(stage: Option<u8>, cfg: Stage) -> CliResult<Stage> {
    stage.map_or(Ok(cfg), |s| Stage::from_number(s).map_err(|e| CliError::Usage(e.to_string())))
}

/// Model from a checkpoint, or freshly initialized from the configuration.
/// A config file must agree with the checkpoint's configuration.
fn load_model(settings: &Settings, path: Option<&Path>, role: &str) -> CliResult<(Model, Option<hiervid::numkernel::AdamState>)> {
    match path {
        Some(p) => {
            let ck = load_checkpoint(p, settings.from_file.then_some(&settings.model))?;
            Ok((ck.model, ck.optimizer))
        }
        None => {
            warn!("no {role} checkpoint given; using a freshly initialized model");
            Ok((Model::new(settings.model.clone())?, None))
        }
    }
}

fn make_data(settings: Settings, dir: PathBuf, seed: Option<u64>, count: usize, stage: Option<u8>, previews: usize) -> CliResult<()> {
    let mut train = settings.train.clone();
    train.seed = seed.unwrap_or(train.seed);
    train.stage = stage_arg(stage, train.stage)?;
    let model = &settings.model;
    let layout = Layout::new(model.ts, model.side, model.n_text)?;
    let mut run = Run::new(dir, "make-data")?;
    let specs = make_dataset(count, train.stage, model.ts, &model.vocab.rates, &train, train.seed);
    let mut index = String::from("index,shape,direction,speed,duration_s,clip_seed,rate\n");
    let mut written = 0;
    for (i, spec) in specs.iter().enumerate() {
        let clip = spec.render(&train)?;
        let mut rng = Rng::derived(train.seed, i as u64);
        let seq = match make_batch(&[clip], train.stage, &train, &model.vocab, layout, &mut rng) {
            Ok(mut v) => v.remove(0),
            Err(Error::EmptyBatch) => continue,
            Err(e) => return Err(e.into()),
        };
        let m = spec.motion;
        index.push_str(&format!("{i},{},{},{},{:?},{},{:?}\n", m.shape, m.direction, m.speed, spec.duration_s, spec.seed, seq.rate));
        run.write(&format!("sequences/seq_{i:05}.txt"), &seq.to_text())?;
        if i < previews {
            for t in 0..layout.ts {
                let p = run.path(&format!("previews/seq_{i:05}_frame_{t}.pgm"));
                fs::create_dir_all(p.parent().unwrap_or(&run.dir))?;
                reconstruct_frame(&seq.frame_grid(t), train.frame_px, train.frame_px, train.palette_bits)?.write_pgm(&p)?;
                run.record(&p);
            }
        }
        written += 1;
    }
    run.write("clips.csv", &index)?;
    info!("wrote {written} of {count} sequences");
    let details = json!({ "requested": count, "written": written, "stage": train.stage.number() });
    run.finish(Some(train.seed), model, &train, details)
}

fn log_file(run: &mut Run, rel: &str) -> CliResult<BufWriter<File>> {
    let p = run.path(rel);
    run.record(&p);
    Ok(BufWriter::new(File::create(p)?))
}

fn pretrain(settings: Settings, dir: PathBuf, seed: Option<u64>, steps: Option<usize>) -> CliResult<()> {
    let mut train = settings.train.clone();
    train.seed = seed.unwrap_or(train.seed);
    let steps = steps.unwrap_or(train.steps);
    let mut run = Run::new(dir, "pretrain-spatial")?;
    let model = Model::new(settings.model.clone())?;
    let mut log = log_file(&mut run, "pretrain_log.csv")?;
    let (model, rows) = pretrain_spatial(model, train.clone(), steps, Some(&mut log))?;
    log.flush()?;
    let ck = run.path("backbone.ckpt");
    save_checkpoint(&model, None, &ck)?;
    run.record(&ck);
    let details = json!({
        "steps": steps,
        "first_loss": rows.first().map(|r| r.loss),
        "final_loss": rows.last().map(|r| r.loss),
    });
    run.finish(Some(train.seed), &model.config, &train, details)
}

#[allow(clippy::too_many_arguments)]
fn train(
    settings: Settings,
    dir: PathBuf,
    seed: u64,
    stage: Option<u8>,
    steps: Option<usize>,
    init: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> CliResult<()> {
    let mut cfg = settings.train.clone();
    cfg.seed = seed;
    cfg.stage = stage_arg(stage, cfg.stage)?;
    let steps = steps.unwrap_or(cfg.steps);
    let mut run = Run::new(dir, "train")?;
    let (model, optimizer) = match (&init, &resume) {
        (_, Some(p)) => {
            let (m, opt) = load_model(&settings, Some(p), "resume")?;
            let opt = opt.ok_or_else(|| Error::Checkpoint(format!("{} holds no optimizer state", p.display())))?;
            (m, Some(opt))
        }
        (Some(p), None) => (load_model(&settings, Some(p), "init")?.0, None),
        (None, None) => (Model::new(settings.model.clone())?, None),
    };
    let mut trainer = Trainer::new(model, cfg.clone())?;
    if let Some(opt) = optimizer {
        trainer.opt = opt;
    }
    let start_step = trainer.opt.step;
    let mut log = log_file(&mut run, "train_log.csv")?;
    let rows = trainer.run(steps, Some(&mut log))?;
    log.flush()?;
    let ck = run.path("model.ckpt");
    save_checkpoint(&trainer.model, Some(&trainer.opt), &ck)?;
    run.record(&ck);
    let details = json!({
        "stage": cfg.stage.number(),
        "start_step": start_step,
        "steps": steps,
        "first_loss": rows.first().map(|r| r.loss),
        "final_loss": rows.last().map(|r| r.loss),
        "frozen_hash": trainer.model.store.frozen_hash(),
        "init": init.map(|p| p.display().to_string()),
        "resume": resume.map(|p| p.display().to_string()),
    });
    run.finish(Some(seed), &trainer.model.config, &cfg, details)
}

#[allow(clippy::too_many_arguments)]
fn generate(
    settings: Settings,
    dir: PathBuf,
    seed: u64,
    key: Option<PathBuf>,
    interp: Option<PathBuf>,
    caption: MotionSpec,
    base_fps: f64,
    rounds: usize,
    sampler: Sampler,
    decoding: Decoding,
) -> CliResult<()> {
    if !(base_fps > 0.0) {
        return Err(CliError::Usage("--base-fps must be positive".into()));
    }
    let mut run = Run::new(dir, "generate")?;
    let (key_model, _) = load_model(&settings, key.as_deref(), "key-frame")?;
    let interp_model = if rounds == 0 { key_model.clone() } else { load_model(&settings, interp.as_deref(), "interpolation")?.0 };
    let video = hierarchical_generate(&caption.caption(), base_fps, rounds, &key_model, &interp_model, &sampler, decoding)?;
    let train = &settings.train;
    for p in video.write_frames(&run.path("frames"), train.frame_px, train.palette_bits)? {
        run.record(&p);
    }
    for (i, g) in video.frames.iter().enumerate() {
        run.write(&format!("frames/frame_{i:04}.csv"), &g.to_csv())?;
    }
    let provenance: Vec<String> = video.provenance.iter().map(ToString::to_string).collect();
    let details = json!({
        "caption": caption.to_string(),
        "rounds": rounds,
        "frames": video.frames.len(),
        "fps": video.fps,
        "provenance": provenance,
        "sampler": format!("{sampler:?}"),
        "decoding": format!("{decoding:?}"),
        "key_checkpoint": key.map(|p| p.display().to_string()),
        "interp_checkpoint": interp.map(|p| p.display().to_string()),
    });
    info!("{} frames at {} fps", video.frames.len(), video.fps);
    run.finish(Some(seed), &key_model.config, train, details)
}

fn schedule(settings: Settings, dir: PathBuf, x: usize, y: usize, ax: usize, ay: usize, ts: usize) -> CliResult<()> {
    let w = WindowConfig::new(ax, ay, x, y).map_err(|e| CliError::Usage(e.to_string()))?;
    if ts == 0 {
        return Err(CliError::Usage("--ts must be at least 1".into()));
    }
    let mut run = Run::new(dir, "schedule")?;
    let s = build_schedule(w, ts);
    let violations = verify_schedule(&s, &frame_swin_mask(w, ts));
    let summary = format!("{}violations = {}\n", s.summary(), violations.len());
    print!("{summary}");
    run.write("schedule.csv", &s.to_csv())?;
    run.write("summary.txt", &summary)?;
    let details = json!({
        "x": x, "y": y, "ax": ax, "ay": ay, "ts": ts,
        "steps": s.steps.len(),
        "peak_parallelism": s.peak_parallelism(),
        "violations": violations.len(),
    });
    run.finish(None, &settings.model, &settings.train, details)?;
    if let Some(v) = violations.first() {
        return Err(Error::Numeric(format!("schedule violates a dependency: {v:?}")).into());
    }
    Ok(())
}

fn analyze(settings: Settings, dir: PathBuf, checkpoint: Option<PathBuf>, caption: MotionSpec, seed: u64, rate: Option<f64>) -> CliResult<()> {
    let mut run = Run::new(dir, "analyze")?;
    let (model, _) = load_model(&settings, checkpoint.as_deref(), "analysis")?;
    let c = &model.config;
    let rate = rate.unwrap_or(c.vocab.rates[0]);
    if !c.vocab.rates.contains(&rate) {
        return Err(CliError::Usage(format!("--rate {rate} is not one of the trained rates {:?}", c.vocab.rates)));
    }
    let train = &settings.train;
    let spec = ClipSpec { motion: caption, duration_s: (c.ts - 1) as f64 / rate, seed };
    let layout = Layout::new(c.ts, c.side, c.n_text)?;
    let mut rng = Rng::new(seed);
    let seq = make_batch(&[spec.render(train)?], Stage::KeyFrames, train, &c.vocab, layout, &mut rng)?.remove(0);
    run.write("sequence.txt", &seq.to_text())?;
    for s in attention_summaries(&model, &seq)? {
        let stem = format!("attention/layer{}_head{}_{}", s.layer, s.head, s.channel);
        run.write(&format!("{stem}.csv"), &s.to_csv())?;
        let p = run.path(&format!("{stem}.pgm"));
        s.write_pgm(&p, 16)?;
        run.record(&p);
    }
    run.write("alpha.csv", &alpha_csv(&alpha_stats(&model)))?;
    let details = json!({
        "caption": caption.to_string(),
        "rate": seq.rate,
        "checkpoint": checkpoint.map(|p| p.display().to_string()),
    });
    run.finish(Some(seed), &model.config, train, details)
}
