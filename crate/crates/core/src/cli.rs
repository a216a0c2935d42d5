//! The `llflow` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric abort,
//! 3 partial I/O failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, ContentMode, SynthSpec};
use crate::error::{Error, Result};
use crate::inference::{self, EnhanceOptions};
use crate::selftest;
use crate::training::{TrainOutputs, Trainer};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERIC: u8 = 2;
pub const EXIT_PARTIAL_IO: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "llflow", version, about = "Low-light enhancement with a conditional normalizing flow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes checkpoint.llf, loss.csv and config.toml.
    Train(TrainArgs),
    /// Enhance one image or every PNG of a directory.
    Enhance(EnhanceArgs),
    /// PSNR/SSIM/NLL over a paired dataset.
    Eval(EvalArgs),
    /// Negative log-likelihood of a candidate given a low-light image.
    Score(ScoreArgs),
    /// Gradient activation map of a candidate, as a grayscale PNG.
    Gradmap(GradmapArgs),
    /// Generate a synthetic paired corpus.
    Synth(SynthArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Dataset root; overrides `data.train_root`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EnhanceFlags {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub z_offset: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Mode {
    Mean,
    Sample,
}

impl EnhanceFlags {
    fn resolve(&self, cfg: &RunConfig) -> EnhanceOptions {
        let mut o = EnhanceOptions::from(cfg.inference.clone());
        if let Some(m) = self.mode {
            o.mode = match m {
                Mode::Mean => "mean",
                Mode::Sample => "sample",
            }
            .into();
        }
        if let Some(k) = self.samples {
            o.samples = k;
        }
        if let Some(t) = self.temperature {
            o.temperature = t;
        }
        if let Some(z) = self.z_offset {
            o.z_offset = z;
        }
        if let Some(s) = self.seed {
            o.seed = s;
        }
        o
    }
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A PNG file or a directory of PNGs.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub flags: EnhanceFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Score these images (matched by file name) instead of enhancing.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Per-image CSV path; defaults to `eval.csv` next to the checkpoint.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub flags: EnhanceFlags,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub low: PathBuf,
    #[arg(long)]
    pub candidate: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub low: PathBuf,
    #[arg(long)]
    pub candidate: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Content {
    Gradients,
    Shapes,
    Tiles,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "shapes")]
    pub content: Content,
    /// Source directory for `--content tiles`.
    #[arg(long)]
    pub tiles_dir: Option<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub gamma: Option<Vec<f64>>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub factor: Option<Vec<f64>>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub sigma: Option<Vec<f64>>,
}

/// Parses arguments and runs the command, returning the exit code.
pub fn main_with_args<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Enhance(a) => cmd_enhance(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Gradmap(a) => cmd_gradmap(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Selftest => Ok(cmd_selftest()),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<u8> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::invalid(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = a.overrides.clone();
    if let Some(d) = &a.data {
        overrides.push(format!("data.train_root={}", toml_string(&d.display().to_string())));
    }
    let mut trainer = match &a.resume {
        Some(ck) => {
            let mut t = Trainer::load(ck)?;
            if !overrides.is_empty() {
                t.config = RunConfig::parse(&t.config.canonical(), &overrides)?;
            }
            t
        }
        None => Trainer::new(RunConfig::parse(&text, &overrides)?)?,
    };
    let root = PathBuf::from(&trainer.config.data.train_root);
    if trainer.config.data.train_root.is_empty() {
        return Err(Error::invalid("no dataset: pass --data or set data.train_root"));
    }
    let pairs = data::load_pair_dataset(&root)?;
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("{} holds no image pairs", root.display())));
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), trainer.config.canonical())?;
    let outputs = TrainOutputs {
        loss_csv: Some(a.out.join("loss.csv")),
        checkpoint: Some(a.out.join("checkpoint.llf")),
    };
    let summary = trainer.train(&pairs, &outputs)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "trained {} iterations: loss {:.4} -> {:.4} nats/dim; checkpoint {}",
        summary.iters,
        summary.first_loss,
        summary.last_loss,
        a.out.join("checkpoint.llf").display()
    );
    Ok(EXIT_OK)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn enhanced_name(input: &Path) -> String {
    format!("{}_enhanced.png", input.file_stem().unwrap_or_default().to_string_lossy())
}

fn cmd_enhance(a: &EnhanceArgs) -> Result<u8> {
    let (cfg, model) = checkpoint::load_model(&a.checkpoint)?;
    let opts = a.flags.resolve(&cfg);
    let inputs = if a.input.is_dir() { data::list_pngs(&a.input)? } else { vec![a.input.clone()] };
    fs::create_dir_all(&a.output)?;
    let mut failed = 0;
    for input in &inputs {
        let result = data::read_png(input)
            .and_then(|x| inference::enhance(&model, &x, &opts))
            .and_then(|y| data::write_png(&a.output.join(enhanced_name(input)), &y));
        match result {
            Ok(()) => println!("{} -> {}", input.display(), a.output.join(enhanced_name(input)).display()),
            Err(e @ Error::NonFinite(_)) => return Err(e),
            Err(e) => {
                failed += 1;
                eprintln!("error: {}: {e}", input.display());
            }
        }
    }
    let manifest = serde_json::json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "config": cfg.canonical(),
        "mode": opts.mode,
        "samples": opts.samples,
        "temperature": opts.temperature,
        "z_offset": opts.z_offset,
        "seed": opts.seed,
        "inputs": inputs.len(),
        "failed": failed,
    });
    fs::write(a.output.join("manifest.json"), format!("{manifest:#}\n"))?;
    Ok(if failed > 0 { EXIT_PARTIAL_IO } else { EXIT_OK })
}

fn cmd_eval(a: &EvalArgs) -> Result<u8> {
    let (cfg, model) = checkpoint::load_model(&a.checkpoint)?;
    let opts = a.flags.resolve(&cfg);
    let pairs = data::load_pair_dataset(&a.data)?;
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("{} holds no image pairs", a.data.display())));
    }
    let candidates = match &a.candidates {
        Some(dir) => Some(
            pairs
                .iter()
                .map(|p| data::read_png(&dir.join(format!("{}.png", p.id))))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let rows = inference::evaluate(&model, &pairs, &opts, candidates.as_deref())?;
    let csv_path = a
        .csv
        .clone()
        .unwrap_or_else(|| a.checkpoint.with_file_name("eval.csv"));
    let mut f = std::io::BufWriter::new(fs::File::create(&csv_path)?);
    writeln!(f, "image_id,psnr_db,ssim,nll_per_dim")?;
    for r in &rows {
        writeln!(f, "{},{:.6},{:.6},{:.6}", r.id, r.psnr_db, r.ssim, r.nll_per_dim)?;
    }
    f.flush()?;
    let n = rows.len() as f64;
    let mean = |f: fn(&inference::EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    println!(
        "images {} psnr_db {:.4} ssim {:.4} nll_per_dim {:.4} (psnr on RGB, capped at 99 dB; ssim on Rec.601 luminance)",
        rows.len(),
        mean(|r| r.psnr_db),
        mean(|r| r.ssim),
        mean(|r| r.nll_per_dim)
    );
    Ok(EXIT_OK)
}

fn cmd_score(a: &ScoreArgs) -> Result<u8> {
    let (_, model) = checkpoint::load_model(&a.checkpoint)?;
    let low = data::read_png(&a.low)?;
    let cand = data::read_png(&a.candidate)?;
    let s = inference::score_nll(&model, &low, &cand)?;
    println!("nll {:.6} nll_per_dim {:.6}", s.total, s.per_dim);
    Ok(EXIT_OK)
}

fn cmd_gradmap(a: &GradmapArgs) -> Result<u8> {
    let (_, model) = checkpoint::load_model(&a.checkpoint)?;
    let low = data::read_png(&a.low)?;
    let cand = data::read_png(&a.candidate)?;
    let g = inference::grad_activation_map(&model, &low, &cand)?;
    data::write_png(&a.output, &g)?;
    println!("{}", a.output.display());
    Ok(EXIT_OK)
}

fn range(v: &Option<Vec<f64>>, default: (f64, f64)) -> (f64, f64) {
    v.as_ref().map_or(default, |r| (r[0], r[1]))
}

fn cmd_synth(a: &SynthArgs) -> Result<u8> {
    let base = SynthSpec::default();
    let content = match a.content {
        Content::Gradients => ContentMode::Gradients,
        Content::Shapes => ContentMode::Shapes,
        Content::Tiles => ContentMode::TilesFromDirectory(
            a.tiles_dir
                .clone()
                .ok_or_else(|| Error::invalid("--content tiles needs --tiles-dir"))?,
        ),
    };
    let spec = SynthSpec {
        count: a.count,
        size: a.size,
        gamma: range(&a.gamma, base.gamma),
        factor: range(&a.factor, base.factor),
        sigma: range(&a.sigma, base.sigma),
        seed: a.seed,
        content,
    };
    let pairs = data::synth_generate(&spec, &a.out)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(EXIT_OK)
}

fn cmd_selftest() -> u8 {
    let results = selftest::run_all();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if results.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_USAGE
    }
}

/// Caps the rayon pool from `LLFLOW_THREADS`.
pub fn init_threads() {
    if let Some(n) = std::env::var("LLFLOW_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}
