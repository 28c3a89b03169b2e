//! `tilestyle` command-line tool.
//!
//! Exit codes: 0 success, 1 other failure (including a failed gradcheck),
//! 2 usage error, 3 numeric failure, 4 format error.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde::Serialize;
use tilestyle::localized::{gradient_check, GridParams};
use tilestyle::pipeline::{make_schedule, recommended_scales, Progress};
use tilestyle::{
    identity_test, multiscale_transfer, stats_pass, texture_synthesize, DType, Error, Executor, Image, Mode, Network,
};

use config::{build_extractor, NetArgs, RunArgs, Settings};

/// Shorter side of the first scale that the default scale count aims for.
const FIRST_SCALE_TARGET: usize = 200;

/// A user mistake that is not a library error (bad config file, missing flag).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Returned when gradcheck finds an error above tolerance.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Parser, Debug)]
#[command(
    name = "tilestyle",
    version,
    about = "Block-wise neural style transfer and texture synthesis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Restyle CONTENT with the statistics of STYLE.
    Transfer {
        content: PathBuf,
        style: PathBuf,
        out: PathBuf,
        /// Continue from a checkpoint (`scale<N>.json` or `scale<N>.png`).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Synthesise a texture the size of STYLE from seeded noise.
    Synth {
        style: PathBuf,
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Transfer STYLE onto itself and write a JSON quality report.
    Identity {
        style: PathBuf,
        report: PathBuf,
        /// Also append a row to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also save the reconstructed image.
        #[arg(long)]
        image: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare the block-wise gradient with a whole-image evaluation on random images.
    Gradcheck {
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [160, 160])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        block: usize,
        #[arg(long, default_value_t = 16)]
        margin: usize,
        #[command(flatten)]
        net: NetArgs,
        #[arg(long, default_value = "f64")]
        dtype: DType,
        /// Largest accepted relative L2 error [default: 1e-10 for f64, 1e-5 for f32].
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Print the per-tap style statistics of IMAGE as JSON.
    Stats {
        image: PathBuf,
        #[arg(long, default_value_t = 512)]
        block: usize,
        #[arg(long, default_value_t = 256)]
        margin: usize,
        #[command(flatten)]
        net: NetArgs,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Print the iteration counts (first line) and history sizes (second line) per scale.
    Schedule {
        #[arg(long)]
        scales: usize,
        #[arg(long, default_value = "fast")]
        mode: Mode,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("error: bad arguments");
            eprintln!("{first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", one_line(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

fn one_line(err: &anyhow::Error) -> String {
    err.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Open { .. } | Error::Config(_) | Error::Geometry(_) | Error::Shape(_) | Error::Key(_)) => 2,
        Some(Error::NonFinite { .. } | Error::Empty(_)) => 3,
        Some(Error::Format(_)) => 4,
        _ => 1,
    }
}

fn load(path: &Path, what: &'static str) -> Result<Image> {
    Image::load(path).map_err(|e| match e {
        Error::Open { path, source, .. } => Error::Open { what, path, source }.into(),
        other => other.into(),
    })
}

/// Resolves and logs the effective config. Texture synthesis has no content
/// term, so its content weight is pinned to zero before hashing.
fn settings(run: &RunArgs, dims: (usize, usize), synth: bool) -> Result<Settings> {
    let mut s = Settings::resolve(run, recommended_scales(dims.0, dims.1, FIRST_SCALE_TARGET))?;
    if synth {
        s.content_weight = 0.0;
    }
    log::info!("effective config sha256 {}", s.hash());
    for line in s.to_toml().lines() {
        log::info!("  {line}");
    }
    Ok(s)
}

fn log_progress(p: &Progress) {
    log::debug!(
        "scale {} iter {} loss {:e} |g|inf {:e}",
        p.scale,
        p.iter,
        p.loss,
        p.grad_norm
    );
}

fn log_scales(scales: &[tilestyle::pipeline::ScaleReport]) {
    for s in scales {
        log::info!(
            "scale {} {}x{}: {} iterations, loss {:e} -> {:e}",
            s.scale,
            s.dims.0,
            s.dims.1,
            s.trace.len(),
            s.initial_loss,
            s.final_loss
        );
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Transfer {
            content,
            style,
            out,
            resume,
            run,
        } => {
            let v = load(&style, "style")?;
            let u = load(&content, "content")?;
            let s = settings(&run, u.dims(), false)?;
            let start = Instant::now();
            let outcome = multiscale_transfer(
                &u,
                &v,
                &s.extractor()?,
                &s.run_config(),
                resume.as_deref(),
                &mut log_progress,
            )?;
            log_scales(&outcome.scales);
            outcome.image.save(&out, &s.png_text())?;
            log::info!("wrote {} in {:.1}s", out.display(), start.elapsed().as_secs_f64());
        }
        Command::Synth {
            style,
            out,
            resume,
            run,
        } => {
            let v = load(&style, "style")?;
            let s = settings(&run, v.dims(), true)?;
            let start = Instant::now();
            let outcome = texture_synthesize(
                &v,
                &s.extractor()?,
                &s.run_config(),
                resume.as_deref(),
                &mut log_progress,
            )?;
            log_scales(&outcome.scales);
            outcome.image.save(&out, &s.png_text())?;
            log::info!("wrote {} in {:.1}s", out.display(), start.elapsed().as_secs_f64());
        }
        Command::Identity {
            style,
            report,
            csv,
            image,
            run,
        } => {
            let v = load(&style, "style")?;
            let s = settings(&run, v.dims(), false)?;
            let (r, outcome) = identity_test(&v, &s.extractor()?, &s.run_config(), &mut log_progress)?;
            log_scales(&outcome.scales);
            let line = r.to_json_line();
            std::fs::write(&report, format!("{line}\n"))?;
            println!("{line}");
            if let Some(csv) = csv {
                let id = style.file_stem().and_then(|s| s.to_str()).unwrap_or("style");
                r.append_csv(csv, id)?;
            }
            if let Some(path) = image {
                outcome.image.save(path, &s.png_text())?;
            }
        }
        Command::Gradcheck {
            size,
            block,
            margin,
            net,
            dtype,
            tol,
            seed,
            threads,
        } => {
            let spec = build_extractor(
                net.net.unwrap_or(config::NetKind::Tiny),
                net.weights_file.as_deref(),
                net.net_seed.unwrap_or(0),
            )?;
            let params = GridParams { block, margin };
            let dims = (size[0], size[1]);
            let err = match dtype {
                DType::F32 => gradient_check::<f32>(&spec, dims, params, seed, threads)?,
                DType::F64 => gradient_check::<f64>(&spec, dims, params, seed, threads)?,
            };
            let tol = tol.unwrap_or(match dtype {
                DType::F32 => 1e-5,
                DType::F64 => 1e-10,
            });
            println!("relative_error {err:e}");
            if err.is_nan() || err > tol {
                return Err(CheckFailed(format!("relative error {err:e} above tolerance {tol:e}")).into());
            }
        }
        Command::Stats {
            image,
            block,
            margin,
            net,
            threads,
        } => {
            let x = load(&image, "image")?;
            let spec = build_extractor(
                net.net.unwrap_or(config::NetKind::Tiny),
                net.weights_file.as_deref(),
                net.net_seed.unwrap_or(0),
            )?;
            let net = Network::<f64>::new(&spec)?;
            let stats = stats_pass(
                &net,
                &x.to_tensor::<f64>(),
                GridParams { block, margin },
                &Executor::new(threads)?,
            )?;
            let out: BTreeMap<&str, TapStats> = stats
                .iter()
                .map(|(tap, s)| {
                    (
                        tap.as_str(),
                        TapStats {
                            channels: s.channels,
                            n_p: s.n_p,
                            mean: &s.mean,
                            std: &s.std,
                            gram: &s.gram,
                        },
                    )
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Schedule { scales, mode } => {
            let s = make_schedule(scales, mode)?;
            let join = |v: &[usize]| v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" ");
            println!("{}", join(&s.iters));
            println!("{}", join(&s.histories));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TapStats<'a> {
    channels: usize,
    n_p: u64,
    mean: &'a [f64],
    std: &'a [f64],
    gram: &'a [f64],
}
