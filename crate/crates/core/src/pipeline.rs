//! Coarse-to-fine driver for style transfer and texture synthesis.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, Record};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorSpec, Network};
use crate::image::{downscaled_dims, resize_down, resize_up2, Image};
use crate::localized::{stats_pass, ContentStore, Executor, GridParams, TransferProblem};
use crate::optim::{minimize, IterInfo, LbfgsConfig, LineSearch, Residency};
use crate::stats::{stats_from_records, stats_to_records, LayerStats, WeightConfig};
use crate::tensor::{DType, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// 600 iterations at the first scale, 300 at every later one.
    Baseline,
    /// Divide the iteration count by 3 from one scale to the next, never
    /// going below 30.
    #[default]
    Fast,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "fast" => Ok(Mode::Fast),
            _ => Err(Error::Config(format!("unknown mode {s:?} (baseline|fast)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Fast => "fast",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub n_scales: usize,
    pub mode: Mode,
    pub iters: Vec<usize>,
    pub histories: Vec<usize>,
}

pub const FIRST_SCALE_ITERS: usize = 600;
pub const BASELINE_ITERS: usize = 300;
pub const FAST_MIN_ITERS: usize = 30;
pub const FIRST_SCALE_HISTORY: usize = 100;
pub const LATER_HISTORY: usize = 10;

pub fn make_schedule(n_scales: usize, mode: Mode) -> Result<Schedule> {
    if n_scales == 0 {
        return Err(Error::Config("n_scales must be at least 1".into()));
    }
    let mut iters = vec![FIRST_SCALE_ITERS];
    for s in 1..n_scales {
        iters.push(match mode {
            Mode::Baseline => BASELINE_ITERS,
            Mode::Fast => (iters[s - 1] / 3).max(FAST_MIN_ITERS),
        });
    }
    let histories = (0..n_scales)
        .map(|s| if s == 0 { FIRST_SCALE_HISTORY } else { LATER_HISTORY })
        .collect();
    Ok(Schedule {
        n_scales,
        mode,
        iters,
        histories,
    })
}

/// Per-scale dims: scale `s` (1-based) is the full image shrunk by
/// `2^(n_scales - s)` with ceiling division.
pub fn scale_dims(h: usize, w: usize, n_scales: usize) -> Vec<(usize, usize)> {
    (1..=n_scales)
        .map(|s| downscaled_dims(h, w, 1 << (n_scales - s)))
        .collect()
}

/// Scale count that brings the shorter side of the first scale closest to
/// `target` pixels.
pub fn recommended_scales(h: usize, w: usize, target: usize) -> usize {
    let side = h.min(w) as f64;
    let mut best = (1, f64::INFINITY);
    for n in 1..=16usize {
        let s = side / (1u64 << (n - 1)) as f64;
        let d = (s - target as f64).abs();
        if d < best.1 {
            best = (n, d);
        }
        if s < 1.0 {
            break;
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_scales: usize,
    pub mode: Mode,
    pub weights: WeightConfig,
    pub grid: GridParams,
    pub seed: u64,
    pub dtype: DType,
    pub residency: Residency,
    pub line_search: LineSearch,
    pub grad_tol: f64,
    /// Replaces the schedule's iteration counts when set.
    pub iters: Option<Vec<usize>>,
    /// Worker threads for block sweeps; 0 means all cores.
    #[serde(skip)]
    pub threads: usize,
    /// Per-scale checkpoints are written here when set.
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Style statistics are cached here when set.
    #[serde(skip)]
    pub stats_cache_dir: Option<PathBuf>,
    #[serde(skip)]
    pub spill_budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_scales: 1,
            mode: Mode::Fast,
            weights: WeightConfig::default(),
            grid: GridParams::default(),
            seed: 0,
            dtype: DType::F32,
            residency: Residency::Host,
            line_search: LineSearch::default(),
            grad_tol: 0.0,
            iters: None,
            threads: 0,
            checkpoint_dir: None,
            stats_cache_dir: None,
            spill_budget: ContentStore::<f32>::DEFAULT_BUDGET,
        }
    }
}

impl RunConfig {
    pub fn schedule(&self) -> Result<Schedule> {
        let mut s = make_schedule(self.n_scales, self.mode)?;
        if let Some(it) = &self.iters {
            if it.len() != self.n_scales {
                return Err(Error::Config(format!(
                    "{} iteration counts given for {} scales",
                    it.len(),
                    self.n_scales
                )));
            }
            s.iters = it.clone();
        }
        Ok(s)
    }

    fn check_weights(&self) -> Result<()> {
        let w = &self.weights;
        for v in [w.content, w.style, w.mean, w.std] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weights must be finite and >= 0, got {v}")));
            }
        }
        if w.content == 0.0 && w.style == 0.0 {
            return Err(Error::Config(
                "at least one of the content and style weights must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One progress event, emitted after every optimiser iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Progress {
    pub scale: usize,
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScaleReport {
    pub scale: usize,
    pub dims: (usize, usize),
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trace: Vec<IterInfo>,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub image: Image,
    /// Starting point of the last optimised scale.
    pub last_init: Image,
    pub scales: Vec<ScaleReport>,
    pub run_hash: String,
}

/// Checkpoint sidecar written next to each per-scale image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub scale: usize,
    pub n_scales: usize,
    pub iteration: usize,
    pub config_hash: String,
    pub height: usize,
    pub width: usize,
}

pub fn checkpoint_paths(dir: &Path, scale: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("scale{scale}.png")),
        dir.join(format!("scale{scale}.json")),
        dir.join(format!("scale{scale}.nstw")),
    )
}

fn write_checkpoint(dir: &Path, meta: &CheckpointMeta, x: &Image) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (png, json, exact) = checkpoint_paths(dir, meta.scale);
    x.save_png16(&png, &[("config_hash".into(), meta.config_hash.clone())])?;
    let rec = Record::new("x", DType::F64, &[3, x.height(), x.width()], x.data().to_vec());
    container::write(&exact, &[rec])?;
    std::fs::write(&json, serde_json::to_string_pretty(meta).expect("meta serializes"))?;
    Ok(())
}

/// Loads a checkpoint given its sidecar, image or exact-tensor path. The
/// exact tensor is preferred; the 16-bit PNG is the fallback.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Image)> {
    let json = path.with_extension("json");
    let text = std::fs::read_to_string(&json).map_err(|source| Error::Open {
        what: "checkpoint",
        path: json.clone(),
        source,
    })?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    let exact = path.with_extension("nstw");
    let img = if exact.exists() {
        let recs = container::read(&exact)?;
        let r = recs
            .iter()
            .find(|r| r.name == "x")
            .ok_or_else(|| Error::Format("checkpoint tensor has no x record".into()))?;
        if r.shape != [3, meta.height, meta.width] {
            return Err(Error::Format("checkpoint tensor dims disagree with sidecar".into()));
        }
        Image::new(meta.height, meta.width, r.data.clone())?
    } else {
        Image::load(path.with_extension("png"))?
    };
    Ok((meta, img))
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    spec: &'a ExtractorSpec,
    run_hash: String,
    exec: Executor,
}

fn run_hash(cfg: &RunConfig, spec: &ExtractorSpec, content: Option<&Image>, style: &Image, kind: &str) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(spec.digest().as_bytes());
    if let Some(u) = content {
        h.update(u.digest().as_bytes());
    }
    h.update(style.digest().as_bytes());
    hex::encode(h.finalize())
}

fn style_stats_cached<T: Real>(
    ctx: &Ctx,
    net: &Network<T>,
    style: &Image,
    scale: usize,
) -> Result<BTreeMap<String, LayerStats>> {
    let taps = net.spec.style_tap_names();
    let key = {
        let mut h = Sha256::new();
        h.update(style.digest().as_bytes());
        h.update((scale as u64).to_le_bytes());
        h.update(ctx.spec.digest().as_bytes());
        h.update(serde_json::to_vec(&ctx.cfg.grid).expect("grid serializes"));
        h.update([T::DTYPE.tag()]);
        hex::encode(h.finalize())
    };
    let path = ctx.cfg.stats_cache_dir.as_ref().map(|d| d.join(format!("{key}.nstw")));
    if let Some(p) = &path {
        if p.exists() {
            match container::read(p).and_then(|r| stats_from_records(&r, &taps)) {
                Ok(s) => {
                    log::debug!("style statistics for scale {scale} loaded from {}", p.display());
                    return Ok(s);
                }
                Err(e) => log::warn!("ignoring unreadable stats cache {}: {e}", p.display()),
            }
        }
    }
    let stats = stats_pass(net, &style.to_tensor::<T>(), ctx.cfg.grid, &ctx.exec)?;
    if let Some(p) = &path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        container::write(p, &stats_to_records(&stats))?;
    }
    Ok(stats)
}

#[allow(clippy::too_many_arguments)]
fn optimise_scale<T: Real>(
    ctx: &Ctx,
    net: &Arc<Network<T>>,
    scale: usize,
    x0: &Image,
    content: Option<&Image>,
    style: &Image,
    schedule: &Schedule,
    progress: &mut dyn FnMut(&Progress),
) -> Result<(Image, ScaleReport)> {
    let (h, w) = x0.dims();
    let style_stats = style_stats_cached(ctx, net, style, scale)?;
    let chans: Vec<usize> = net
        .spec
        .style_tap_names()
        .iter()
        .map(|t| net.geometry(t).map(|g| g.channels))
        .collect::<Result<_>>()?;
    let cg = net.geometry(&net.spec.content_tap.name)?;
    let grid = ctx.cfg.grid.grid_for(h, w, net.deepest_stride())?;
    let content_numel = cg.channels * (grid.image_h / cg.stride) * (grid.image_w / cg.stride);
    let weights = ctx.cfg.weights.resolve(&chans, content_numel)?;
    let u = content.map(|c| c.to_tensor::<T>());
    let problem = TransferProblem::new(
        net.clone(),
        style_stats,
        weights,
        (h, w),
        u.as_ref(),
        ctx.cfg.grid,
        ctx.exec.clone(),
        ctx.cfg.spill_budget,
    )?;
    let lbfgs = LbfgsConfig {
        history_size: schedule.histories[scale - 1],
        max_iters: schedule.iters[scale - 1],
        line_search: ctx.cfg.line_search,
        grad_tol: ctx.cfg.grad_tol,
        residency: ctx.cfg.residency,
    };
    let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let xt = Tensor::from_vec(&[3, h, w], x.iter().map(|&v| T::from_f64(v)).collect())?;
        let r = problem.loss_grad(&xt)?;
        Ok((r.loss, r.grad.data().iter().map(|v| v.to_f64()).collect()))
    };
    let result = minimize(objective, x0.data().to_vec(), &lbfgs, |info, _| {
        log::debug!(
            "scale {scale} iter {} loss {:.6e} |g| {:.3e}",
            info.iter,
            info.loss,
            info.grad_norm
        );
        progress(&Progress {
            scale,
            iter: info.iter,
            loss: info.loss,
            grad_norm: info.grad_norm,
        })
    })?;
    let report = ScaleReport {
        scale,
        dims: (h, w),
        initial_loss: result.initial_loss,
        final_loss: result.loss,
        trace: result.trace,
    };
    Ok((Image::new(h, w, result.x)?, report))
}

enum Init<'a> {
    Content,
    Noise(u64),
    Resume(&'a Path),
}

fn run<T: Real>(
    cfg: &RunConfig,
    spec: &ExtractorSpec,
    content: Option<&Image>,
    style: &Image,
    init: Init,
    kind: &str,
    progress: &mut dyn FnMut(&Progress),
) -> Result<Outcome> {
    let schedule = cfg.schedule()?;
    let net = Arc::new(Network::<T>::new(spec)?);
    let ctx = Ctx {
        cfg,
        spec,
        run_hash: run_hash(cfg, spec, content, style, kind),
        exec: Executor::new(cfg.threads)?,
    };
    let n = cfg.n_scales;
    let (fh, fw) = content.map(|u| u.dims()).unwrap_or(style.dims());
    let dims = scale_dims(fh, fw, n);
    let stride = net.deepest_stride();
    let (h1, w1) = dims[0];
    let (sh1, sw1) = downscaled_dims(style.height(), style.width(), 1 << (n - 1));
    if h1.min(w1).min(sh1).min(sw1) < stride {
        return Err(Error::Config(format!(
            "scale 1 is {h1}x{w1} (style {sh1}x{sw1}), smaller than one feature pixel (stride {stride}); use fewer scales"
        )));
    }

    let (mut first, mut x) = match init {
        Init::Content => (
            1,
            resize_down(content.expect("content init needs content"), 1 << (n - 1)),
        ),
        Init::Noise(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                1,
                Image::new(h1, w1, (0..3 * h1 * w1).map(|_| rng.gen::<f64>()).collect())?,
            )
        }
        Init::Resume(path) => {
            let (meta, img) = load_checkpoint(path)?;
            if meta.config_hash != ctx.run_hash {
                return Err(Error::Config(format!(
                    "checkpoint {} was written by a different configuration",
                    path.display()
                )));
            }
            if meta.n_scales != n || meta.scale == 0 || meta.scale > n || img.dims() != dims[meta.scale - 1] {
                return Err(Error::Config("checkpoint geometry does not match this run".into()));
            }
            log::info!("resuming after scale {} of {n}", meta.scale);
            let next = meta.scale + 1;
            let x = if next <= n {
                resize_up2(&img, Some(dims[next - 1]))
            } else {
                img
            };
            (next, x)
        }
    };
    let mut last_init = x.clone();
    let mut scales = Vec::new();
    while first <= n {
        let s = first;
        let factor = 1 << (n - s);
        let u_s = content.map(|u| resize_down(u, factor));
        let v_s = resize_down(style, factor);
        last_init = x.clone();
        let (xs, report) = optimise_scale::<T>(&ctx, &net, s, &x, u_s.as_ref(), &v_s, &schedule, progress)?;
        log::info!(
            "scale {s}/{n} {}x{}: loss {:.6e} -> {:.6e} in {} iterations",
            report.dims.0,
            report.dims.1,
            report.initial_loss,
            report.final_loss,
            report.trace.len()
        );
        if let Some(dir) = &cfg.checkpoint_dir {
            let meta = CheckpointMeta {
                scale: s,
                n_scales: n,
                iteration: report.trace.len(),
                config_hash: ctx.run_hash.clone(),
                height: xs.height(),
                width: xs.width(),
            };
            write_checkpoint(dir, &meta, &xs)?;
        }
        scales.push(report);
        x = if s < n { resize_up2(&xs, Some(dims[s])) } else { xs };
        first += 1;
    }
    Ok(Outcome {
        image: x,
        last_init,
        scales,
        run_hash: ctx.run_hash,
    })
}

/// Multiscale style transfer of content `u` towards style `v`.
pub fn multiscale_transfer(
    u: &Image,
    v: &Image,
    spec: &ExtractorSpec,
    cfg: &RunConfig,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&Progress),
) -> Result<Outcome> {
    cfg.check_weights()?;
    let init = resume.map(Init::Resume).unwrap_or(Init::Content);
    match cfg.dtype {
        DType::F32 => run::<f32>(cfg, spec, Some(u), v, init, "transfer", progress),
        DType::F64 => run::<f64>(cfg, spec, Some(u), v, init, "transfer", progress),
    }
}

/// Texture synthesis from exemplar `v`, starting from uniform noise. The
/// content weight is forced to zero.
pub fn texture_synthesize(
    v: &Image,
    spec: &ExtractorSpec,
    cfg: &RunConfig,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&Progress),
) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    if cfg.weights.content != 0.0 {
        log::warn!(
            "texture synthesis has no content image; ignoring content weight {}",
            cfg.weights.content
        );
        cfg.weights.content = 0.0;
    }
    cfg.check_weights()?;
    let init = resume.map(Init::Resume).unwrap_or(Init::Noise(cfg.seed));
    match cfg.dtype {
        DType::F32 => run::<f32>(&cfg, spec, None, v, init, "synth", progress),
        DType::F64 => run::<f64>(&cfg, spec, None, v, init, "synth", progress),
    }
}
