//! Run settings: command-line flags layered over an optional TOML file
//! layered over built-in defaults.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tilestyle::extractor::{load_weights, tinynet, vgg19};
use tilestyle::layers::PoolKind;
use tilestyle::localized::GridParams;
use tilestyle::{DType, ExtractorSpec, Mode, Residency, RunConfig, WeightConfig};

use crate::Usage;

/// Feature extractor architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    /// Small seeded network, needs no weight file.
    Tiny,
    /// VGG-19 with average pooling; weights come from `--weights-file`.
    #[value(alias = "file")]
    Vgg19,
}

/// Flags shared by every command that runs the optimiser.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Flat TOML file with any of the settings below (dashes become underscores).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of pyramid scales [default: closest first scale to 200 px].
    #[arg(long)]
    pub scales: Option<usize>,
    /// Iteration schedule [default: fast].
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Comma-separated iteration counts, one per scale; overrides --mode.
    #[arg(long, value_delimiter = ',')]
    pub iters: Option<Vec<usize>>,
    /// Inner block side in pixels [default: 512].
    #[arg(long)]
    pub block: Option<usize>,
    /// Context margin around each block in pixels [default: 256].
    #[arg(long)]
    pub margin: Option<usize>,
    #[command(flatten)]
    pub net: NetArgs,
    /// Seed for noise initialisation [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Arithmetic precision [default: f32].
    #[arg(long)]
    pub dtype: Option<DType>,
    /// Where the optimiser history lives [default: host].
    #[arg(long)]
    pub residency: Option<Residency>,
    /// Content loss weight [default: 1].
    #[arg(long)]
    pub content_weight: Option<f64>,
    /// Gram loss weight [default: 1].
    #[arg(long)]
    pub style_weight: Option<f64>,
    /// Mean loss weight relative to the Gram weight [default: 1000].
    #[arg(long)]
    pub mean_weight: Option<f64>,
    /// Std loss weight relative to the Gram weight [default: 1000].
    #[arg(long)]
    pub std_weight: Option<f64>,
    /// Stop a scale early once the largest gradient entry is below this [default: 0].
    #[arg(long)]
    pub grad_tol: Option<f64>,
    /// Block worker threads; 0 uses every core [default: 0].
    #[arg(long)]
    pub threads: Option<usize>,
    /// Accepted for scripts; block results are always merged in a fixed order.
    #[arg(long)]
    pub deterministic: bool,
    /// Write a checkpoint after every scale into this directory.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Cache style statistics in this directory.
    #[arg(long)]
    pub stats_cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct NetArgs {
    /// Feature extractor [default: tiny].
    #[arg(long)]
    pub net: Option<NetKind>,
    /// NSTW1 weight file; required for vgg19, replaces the seeded weights for tiny.
    #[arg(long)]
    pub weights_file: Option<PathBuf>,
    /// Seed of the tiny network's weights [default: 0].
    #[arg(long)]
    pub net_seed: Option<u64>,
}

/// The config file: every key optional, unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    scales: Option<usize>,
    mode: Option<Mode>,
    iters: Option<Vec<usize>>,
    block: Option<usize>,
    margin: Option<usize>,
    net: Option<NetKind>,
    weights_file: Option<PathBuf>,
    net_seed: Option<u64>,
    seed: Option<u64>,
    dtype: Option<DType>,
    residency: Option<Residency>,
    content_weight: Option<f64>,
    style_weight: Option<f64>,
    mean_weight: Option<f64>,
    std_weight: Option<f64>,
    grad_tol: Option<f64>,
    threads: Option<usize>,
    deterministic: Option<bool>,
    checkpoint_dir: Option<PathBuf>,
    stats_cache_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Usage(format!("cannot open config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Usage(format!("bad config {}: {e}", path.display())).into())
    }
}

/// Fully resolved settings. Serialised as the effective config.
#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub scales: usize,
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters: Option<Vec<usize>>,
    pub block: usize,
    pub margin: usize,
    pub net: NetKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_file: Option<PathBuf>,
    pub net_seed: u64,
    pub seed: u64,
    pub dtype: DType,
    pub residency: Residency,
    pub content_weight: f64,
    pub style_weight: f64,
    pub mean_weight: f64,
    pub std_weight: f64,
    pub grad_tol: f64,
    pub threads: usize,
    pub deterministic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats_cache_dir: Option<PathBuf>,
}

impl Settings {
    /// Flags win over the file, the file wins over defaults. `default_scales`
    /// is used when neither names a scale count.
    pub fn resolve(args: &RunArgs, default_scales: usize) -> anyhow::Result<Self> {
        let file = match &args.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let grid = GridParams::default();
        let weights = WeightConfig::default();
        let run = RunConfig::default();
        Ok(Settings {
            scales: args.scales.or(file.scales).unwrap_or(default_scales),
            mode: args.mode.or(file.mode).unwrap_or(run.mode),
            iters: args.iters.clone().or(file.iters),
            block: args.block.or(file.block).unwrap_or(grid.block),
            margin: args.margin.or(file.margin).unwrap_or(grid.margin),
            net: args.net.net.or(file.net).unwrap_or(NetKind::Tiny),
            weights_file: args.net.weights_file.clone().or(file.weights_file),
            net_seed: args.net.net_seed.or(file.net_seed).unwrap_or(0),
            seed: args.seed.or(file.seed).unwrap_or(run.seed),
            dtype: args.dtype.or(file.dtype).unwrap_or(run.dtype),
            residency: args.residency.or(file.residency).unwrap_or(run.residency),
            content_weight: args.content_weight.or(file.content_weight).unwrap_or(weights.content),
            style_weight: args.style_weight.or(file.style_weight).unwrap_or(weights.style),
            mean_weight: args.mean_weight.or(file.mean_weight).unwrap_or(weights.mean),
            std_weight: args.std_weight.or(file.std_weight).unwrap_or(weights.std),
            grad_tol: args.grad_tol.or(file.grad_tol).unwrap_or(run.grad_tol),
            threads: args.threads.or(file.threads).unwrap_or(run.threads),
            deterministic: args.deterministic || file.deterministic.unwrap_or(false),
            checkpoint_dir: args.checkpoint_dir.clone().or(file.checkpoint_dir),
            stats_cache_dir: args.stats_cache_dir.clone().or(file.stats_cache_dir),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialise to TOML")
    }

    /// SHA-256 of the effective config text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            n_scales: self.scales,
            mode: self.mode,
            weights: WeightConfig {
                content: self.content_weight,
                style: self.style_weight,
                mean: self.mean_weight,
                std: self.std_weight,
            },
            grid: GridParams {
                block: self.block,
                margin: self.margin,
            },
            seed: self.seed,
            dtype: self.dtype,
            residency: self.residency,
            grad_tol: self.grad_tol,
            iters: self.iters.clone(),
            threads: self.threads,
            checkpoint_dir: self.checkpoint_dir.clone(),
            stats_cache_dir: self.stats_cache_dir.clone(),
            ..RunConfig::default()
        }
    }

    pub fn extractor(&self) -> anyhow::Result<ExtractorSpec> {
        build_extractor(self.net, self.weights_file.as_deref(), self.net_seed)
    }

    /// Text chunks embedded in output PNGs.
    pub fn png_text(&self) -> Vec<(String, String)> {
        vec![
            ("tilestyle:config".into(), self.to_toml()),
            ("tilestyle:config-sha256".into(), self.hash()),
        ]
    }
}

pub fn build_extractor(net: NetKind, weights_file: Option<&Path>, net_seed: u64) -> anyhow::Result<ExtractorSpec> {
    let arch = match net {
        NetKind::Tiny => tinynet(net_seed),
        NetKind::Vgg19 => vgg19(PoolKind::Avg),
    };
    match weights_file {
        Some(path) => Ok(load_weights(path, &arch)?),
        None if net == NetKind::Vgg19 => Err(Usage("--net vgg19 needs --weights-file".into()).into()),
        None => Ok(arch),
    }
}
