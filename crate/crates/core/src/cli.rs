//! Command implementations behind the `sapnet` binary.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numeric failure (gradient check or non-finite training state).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checks::{full_model_check, op_suite, sap_path_check, CheckOutcome};
use crate::config::RunConfig;
use crate::data::{generate_splits, load_dataset, load_image, save_splits, Domain, MANIFEST};
use crate::error::Error;
use crate::export::export_attention;
use crate::sap::{PoolingKind, PyramidConfig};
use crate::train::{evaluate, split_domains, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "sapnet",
    version,
    about = "Spatial attention pyramid domain adaptation on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Mask branch without the task-guided map.
    Gm,
    /// Equal-weight fusion instead of channel attention.
    Ca,
    /// Global average pooling instead of the attention pyramid.
    Sa,
    /// Max pooling pyramid.
    Maxpool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Source,
    Target,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Target => "target",
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a two-domain dataset with train/ and test/ splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training images per domain.
        #[arg(long, default_value_t = 400)]
        count: usize,
        /// Test images per domain.
        #[arg(long, default_value_t = 100)]
        test_count: usize,
        /// Target noise sigma and haze alpha, as `sigma,alpha`.
        #[arg(long)]
        severity: Option<String>,
        /// Scene keys (`scene.*`) are read from this run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Source-only pretraining followed by adversarial adaptation.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root written by gen-data (or a directory with a manifest).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum)]
        ablation: Vec<Ablation>,
        /// Pyramid level count; picks a pooling size set that fits the map.
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
        /// Train on source labels only for the whole schedule.
        #[arg(long)]
        source_only: bool,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Segmentation and domain metrics of a checkpoint on a test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        split: Split,
        /// Report file; defaults to `eval_<split>.txt` next to the checkpoint.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Also check the whole network end to end.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the attention masks and level weights for one image.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::TargetTaskLoss => EXIT_USAGE,
            Error::Io { .. } | Error::Data { .. } | Error::Tensor(_) => EXIT_DATA,
            Error::NonFinite(_) | Error::NonScalarLoss(_) => EXIT_NUMERIC,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: msg.into(),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenData {
            out,
            seed,
            count,
            test_count,
            severity,
            config,
        } => gen_data(
            &out,
            seed,
            count,
            test_count,
            severity.as_deref(),
            config.as_deref(),
        ),
        Command::Train {
            config,
            data,
            out,
            lambda,
            ablation,
            levels,
            seed,
            iters,
            source_only,
            sets,
        } => {
            let run = build_run_config(
                config.as_deref(),
                lambda,
                &ablation,
                levels,
                seed,
                iters,
                source_only,
                &sets,
            )?;
            train(run, &data, &out)
        }
        Command::Eval {
            ckpt,
            data,
            split,
            report,
        } => eval(&ckpt, &data, split, report.as_deref()),
        Command::Gradcheck { full, seed } => gradcheck(full, seed),
        Command::ExportAttention { ckpt, image, out } => export(&ckpt, &image, &out),
    }
}

fn parse_severity(s: &str) -> Result<(f64, f64), CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    let parsed: Option<Vec<f64>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
    match parsed.as_deref() {
        Some(&[sigma, alpha]) => Ok((sigma, alpha)),
        _ => Err(usage(format!("--severity expects sigma,alpha, got {s:?}"))),
    }
}

fn gen_data(
    out: &Path,
    seed: u64,
    count: usize,
    test_count: usize,
    severity: Option<&str>,
    config: Option<&Path>,
) -> CmdResult {
    if count == 0 || test_count == 0 {
        return Err(usage("--count and --test-count must be >= 1"));
    }
    let mut scene = match config {
        Some(p) => RunConfig::load(p)?.scene,
        None => RunConfig::default().scene,
    };
    if let Some(s) = severity {
        let (sigma, alpha) = parse_severity(s)?;
        scene.severity.noise_sigma = sigma;
        scene.severity.haze_alpha = alpha;
    }
    scene.validate()?;
    let (train, test) = generate_splits(&scene, seed, count, test_count);
    save_splits(out, &train, &test)?;
    println!(
        "wrote {} train and {} test images per domain to {}",
        count,
        test_count,
        out.display()
    );
    Ok(())
}

/// Config file, then flag overrides, then `--set` overrides.
#[allow(clippy::too_many_arguments)]
pub fn build_run_config(
    config: Option<&Path>,
    lambda: Option<f64>,
    ablations: &[Ablation],
    levels: Option<usize>,
    seed: Option<u64>,
    iters: Option<usize>,
    source_only: bool,
    sets: &[String],
) -> Result<RunConfig, CliError> {
    let mut run = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(l) = lambda {
        run.train.lambda = l;
    }
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(n) = iters {
        let t = &mut run.train;
        // keep the schedule's proportions
        let scale = n as f64 / t.iters as f64;
        t.milestones = t
            .milestones
            .iter()
            .map(|&m| (m as f64 * scale).round() as usize)
            .collect();
        t.milestones.retain(|&m| m < n);
        t.milestones.dedup();
        t.pretrain_iters = ((t.pretrain_iters as f64 * scale).round() as usize).min(n);
        t.iters = n;
    }
    if let Some(n) = levels {
        let side = run.model.feature_side();
        run.model.pyramid.pool_sizes = PyramidConfig::preset_sizes(n, side)?;
    }
    for a in ablations {
        let p = &mut run.model.pyramid;
        match a {
            Ablation::Gm => p.use_guided_map = false,
            Ablation::Ca => p.use_channel_attention = false,
            Ablation::Sa => p.use_spatial_attention = false,
            Ablation::Maxpool => p.pooling = PoolingKind::Max,
        }
    }
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects key=value, got {kv:?}")))?;
        run.apply_text(&format!("{} = {}", k.trim(), v.trim()))?;
    }
    if source_only {
        run.train = run.train.clone().source_only();
    }
    run.validate()?;
    Ok(run)
}

/// `dir/<sub>` when it holds a manifest, else `dir` itself.
fn dataset_dir(dir: &Path, sub: &str) -> PathBuf {
    let nested = dir.join(sub);
    if nested.join(MANIFEST).is_file() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn train(run: RunConfig, data: &Path, out: &Path) -> CmdResult {
    let samples = load_dataset(&dataset_dir(data, "train"))?;
    let (source, target) = split_domains(samples)?;
    let adversarial = run.train.pretrain_iters < run.train.iters;
    if source.is_empty() || (adversarial && target.is_empty()) {
        return Err(Error::data(data, "training needs source and target images").into());
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, run.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let mut trainer = Trainer::new(run)?;
    trainer.run(&source, &target, out, |r| eprintln!("{}", r.csv()))?;
    println!(
        "trained {} iterations; wrote {} and {}",
        trainer.iter,
        out.join("final.sapc").display(),
        out.join("metrics.csv").display()
    );
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, split: Split, report: Option<&Path>) -> CmdResult {
    let mut trainer = Trainer::load(ckpt)?;
    let domain = match split {
        Split::Source => Domain::Source,
        Split::Target => Domain::Target,
    };
    let samples: Vec<_> = load_dataset(&dataset_dir(data, "test"))?
        .into_iter()
        .filter(|s| s.domain == domain)
        .collect();
    if samples.is_empty() || samples.iter().any(|s| s.labels.is_none()) {
        return Err(Error::data(
            data,
            format!("no labelled {} samples to evaluate", split.name()),
        )
        .into());
    }
    let r = evaluate(&mut trainer.net, &samples, true)?;
    print!("{}", r.table());
    let path = report.map(Path::to_path_buf).unwrap_or_else(|| {
        ckpt.parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}.txt", split.name()))
    });
    let text = format!(
        "checkpoint={}\nsplit={}\n{}",
        ckpt.display(),
        split.name(),
        r.to_kv()
    );
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn gradcheck(full: bool, seed: u64) -> CmdResult {
    let mut outcomes: Vec<CheckOutcome> = op_suite(seed)?;
    outcomes.push(sap_path_check(seed)?);
    if full {
        outcomes.extend(full_model_check(seed)?);
    }
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    if failed > 0 {
        return Err(CliError {
            code: EXIT_NUMERIC,
            message: format!("{failed} gradient check(s) failed"),
        });
    }
    println!("all {} gradient checks passed", outcomes.len());
    Ok(())
}

fn export(ckpt: &Path, image: &Path, out: &Path) -> CmdResult {
    let mut trainer = Trainer::load(ckpt)?;
    let img = load_image(image)?.to_tensor();
    let state = trainer.net.attention(&img)?;
    let pool = trainer.net.cfg.pyramid.pool_sizes.clone();
    let files = export_attention(&state, &pool, out)?;
    println!(
        "wrote {} masks and weights.txt to {}",
        files.len(),
        out.display()
    );
    Ok(())
}
