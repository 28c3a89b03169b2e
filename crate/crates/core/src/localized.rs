//! Blockwise evaluation of the transfer loss and its exact pixel gradient.
//!
//! Pass 1 sweeps the block grid without saving activations and merges the
//! per-block statistics of every style tap in block order. Pass 2 sweeps
//! again with saved activations, injects feature gradients computed from the
//! global statistics at every feature position of the padded block,
//! backpropagates, and keeps only the gradient of the block's inner pixels.
//! [`TransferProblem::loss_grad_global`] evaluates the same objective in one
//! pass and serves as the reference for small images.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::extractor::{ExtractorSpec, Forward, Network};
use crate::fixtures;
use crate::stats::{
    content_grad, content_loss, style_layer_loss, LayerStats, LossWeights, StatsAccumulator, StyleGradOp, WeightConfig,
};
use crate::tensor::{rel_l2, Real, Tensor};
use crate::tiling::{feature_inner_crop, stride_padded_dims, Block, BlockGrid, Rect};

/// Block size and margin in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GridParams {
    pub block: usize,
    pub margin: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            block: BlockGrid::DEFAULT_BLOCK,
            margin: BlockGrid::DEFAULT_MARGIN,
        }
    }
}

impl GridParams {
    /// Grid over the stride-padded version of an `h x w` image.
    pub fn grid_for(&self, h: usize, w: usize, stride: usize) -> Result<BlockGrid> {
        let (ph, pw) = stride_padded_dims(h, w, stride);
        BlockGrid::new(ph, pw, self.block, self.margin, stride)
    }
}

/// Worker pool for block sweeps. Per-block results are always collected in
/// block order and reduced sequentially, so results do not depend on the
/// thread count.
#[derive(Clone)]
pub struct Executor {
    pool: Arc<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("threads", &self.threads()).finish()
    }
}

impl Executor {
    /// `threads == 0` uses every available core.
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Executor { pool: Arc::new(pool) })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    fn map_ordered<R, F>(&self, n: usize, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> Result<R> + Sync + Send,
    {
        if self.threads() == 1 {
            return (0..n).map(f).collect();
        }
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}

impl Default for Executor {
    fn default() -> Self {
        Executor::new(0).expect("default worker pool")
    }
}

fn pad_input<T: Real>(x: &Tensor<T>, grid: &BlockGrid) -> Result<Tensor<T>> {
    x.pad_replicate(grid.image_h, grid.image_w)
}

/// Style statistics of `x` computed block by block.
pub fn stats_pass<T: Real>(
    net: &Network<T>,
    x: &Tensor<T>,
    params: GridParams,
    exec: &Executor,
) -> Result<BTreeMap<String, LayerStats>> {
    let (_, h, w) = x.dims3()?;
    let grid = params.grid_for(h, w, net.deepest_stride())?;
    let padded = pad_input(x, &grid)?;
    stats_pass_padded(net, &padded, &grid, exec)
}

fn stats_pass_padded<T: Real>(
    net: &Network<T>,
    padded: &Tensor<T>,
    grid: &BlockGrid,
    exec: &Executor,
) -> Result<BTreeMap<String, LayerStats>> {
    let taps = net.spec.style_tap_names();
    let per_block = exec.map_ordered(grid.len(), |i| {
        let b = grid.block(i);
        let fwd = net.forward_taps(&padded.crop(b.padded)?, Some(&taps), false)?;
        block_accumulators(net, &fwd, &b)
    })?;
    merge_block_stats(net, &per_block)
}

/// Statistics of the inner part of one block's style tap features.
fn block_accumulators<T: Real>(net: &Network<T>, fwd: &Forward<T>, b: &Block) -> Result<Vec<StatsAccumulator>> {
    net.spec
        .style_tap_names()
        .iter()
        .map(|t| {
            let g = net.geometry(t)?;
            let mut acc = StatsAccumulator::new(g.channels);
            acc.accumulate(&fwd.tap(t)?.crop(feature_inner_crop(b, &g)?)?)?;
            Ok(acc)
        })
        .collect()
}

/// Merges per-block accumulators in block order.
fn merge_block_stats<T: Real>(
    net: &Network<T>,
    per_block: &[Vec<StatsAccumulator>],
) -> Result<BTreeMap<String, LayerStats>> {
    let taps = net.spec.style_tap_names();
    let mut merged: Vec<StatsAccumulator> = taps
        .iter()
        .map(|t| Ok(StatsAccumulator::new(net.geometry(t)?.channels)))
        .collect::<Result<_>>()?;
    for accs in per_block {
        for (m, a) in merged.iter_mut().zip(accs) {
            m.merge(a)?;
        }
    }
    taps.iter()
        .zip(&merged)
        .map(|(t, a)| Ok((t.clone(), a.finalize()?)))
        .collect()
}

/// Style statistics from a single whole-image forward pass.
pub fn global_stats<T: Real>(net: &Network<T>, x: &Tensor<T>) -> Result<BTreeMap<String, LayerStats>> {
    let (_, h, w) = x.dims3()?;
    let (ph, pw) = stride_padded_dims(h, w, net.deepest_stride());
    let taps = net.spec.style_tap_names();
    let fwd = net.forward_taps(&x.pad_replicate(ph, pw)?, Some(&taps), false)?;
    taps.iter()
        .map(|t| Ok((t.clone(), LayerStats::of(fwd.tap(t)?)?)))
        .collect()
}

/// Per-block content feature tiles, kept in memory up to a byte budget and
/// spilled to an anonymous temporary file beyond it.
pub struct ContentStore<T> {
    tiles: Vec<Tile<T>>,
    spill: Option<Mutex<File>>,
}

enum Tile<T> {
    Mem(Tensor<T>),
    Disk { offset: u64, shape: Vec<usize> },
}

impl<T: Real> ContentStore<T> {
    pub const DEFAULT_BUDGET: usize = 1 << 30;

    fn build(tiles: Vec<Tensor<T>>, budget: usize) -> Result<Self> {
        let mut used = 0usize;
        let mut spill: Option<File> = None;
        let mut offset = 0u64;
        let mut out = Vec::with_capacity(tiles.len());
        for t in tiles {
            if used + t.nbytes() <= budget {
                used += t.nbytes();
                out.push(Tile::Mem(t));
                continue;
            }
            let f = match &mut spill {
                Some(f) => f,
                None => spill.insert(tempfile::tempfile()?),
            };
            let mut bytes = Vec::with_capacity(t.nbytes());
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            f.write_all(&bytes)?;
            out.push(Tile::Disk {
                offset,
                shape: t.shape().to_vec(),
            });
            offset += bytes.len() as u64;
        }
        Ok(ContentStore {
            tiles: out,
            spill: spill.map(Mutex::new),
        })
    }

    pub fn spilled_tiles(&self) -> usize {
        self.tiles.iter().filter(|t| matches!(t, Tile::Disk { .. })).count()
    }

    fn get(&self, i: usize) -> Result<std::borrow::Cow<'_, Tensor<T>>> {
        match &self.tiles[i] {
            Tile::Mem(t) => Ok(std::borrow::Cow::Borrowed(t)),
            Tile::Disk { offset, shape } => {
                let n: usize = shape.iter().product();
                let size = T::DTYPE.size();
                let mut bytes = vec![0u8; n * size];
                {
                    let mut f = self.spill.as_ref().expect("spill file exists").lock().unwrap();
                    f.seek(SeekFrom::Start(*offset))?;
                    f.read_exact(&mut bytes)?;
                }
                let data = bytes.chunks_exact(size).map(T::read_le).collect();
                Ok(std::borrow::Cow::Owned(Tensor::from_vec(shape, data)?))
            }
        }
    }
}

/// Output of one loss/gradient evaluation.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub style_loss: f64,
    pub content_loss: f64,
    /// Gradient with respect to the unpadded image, `(3, h, w)`.
    pub grad: Tensor<T>,
    /// Style channels whose std was too small to differentiate.
    pub degenerate_channels: usize,
}

/// Everything needed to evaluate the transfer objective for one image size.
pub struct TransferProblem<T: Real> {
    pub net: Arc<Network<T>>,
    pub style_stats: BTreeMap<String, LayerStats>,
    pub weights: LossWeights,
    pub grid: BlockGrid,
    image_h: usize,
    image_w: usize,
    content: Option<ContentStore<T>>,
    /// Stride-padded content image, kept only for the global reference.
    content_image: Option<Tensor<T>>,
    exec: Executor,
}

impl<T: Real> TransferProblem<T> {
    /// `content` is the `(3, h, w)` content image; pass `None` (with a zero
    /// content weight) for pure texture synthesis of an `h x w` image.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        net: Arc<Network<T>>,
        style_stats: BTreeMap<String, LayerStats>,
        weights: LossWeights,
        dims: (usize, usize),
        content: Option<&Tensor<T>>,
        params: GridParams,
        exec: Executor,
        spill_budget: usize,
    ) -> Result<Self> {
        weights.validate()?;
        let taps = net.spec.style_tap_names();
        if weights.layers.len() != taps.len() {
            return Err(Error::Config(format!(
                "{} style layer weights for {} style taps",
                weights.layers.len(),
                taps.len()
            )));
        }
        for t in &taps {
            let st = style_stats
                .get(t)
                .ok_or_else(|| Error::Config(format!("missing style statistics for tap {t}")))?;
            let c = net.geometry(t)?.channels;
            if st.channels != c {
                return Err(Error::Config(format!(
                    "style statistics for {t} have {} channels, extractor has {c}",
                    st.channels
                )));
            }
        }
        let (h, w) = dims;
        let grid = params.grid_for(h, w, net.deepest_stride())?;
        let (content, content_image) = match content {
            Some(u) if weights.content > 0.0 => {
                let (_, uh, uw) = u.dims3()?;
                if (uh, uw) != dims {
                    return Err(Error::Config(format!("content image is {uh}x{uw}, problem is {h}x{w}")));
                }
                let padded = pad_input(u, &grid)?;
                let tap = vec![net.spec.content_tap.name.clone()];
                let tiles = exec.map_ordered(grid.len(), |i| {
                    let fwd = net.forward_taps(&padded.crop(grid.block(i).padded)?, Some(&tap), false)?;
                    Ok(fwd.tap(&tap[0])?.clone())
                })?;
                (Some(ContentStore::build(tiles, spill_budget)?), Some(padded))
            }
            None if weights.content > 0.0 => {
                return Err(Error::Config(
                    "content weight is positive but no content image was given".into(),
                ))
            }
            _ => (None, None),
        };
        Ok(TransferProblem {
            net,
            style_stats,
            weights,
            grid,
            image_h: h,
            image_w: w,
            content,
            content_image,
            exec,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.image_h, self.image_w)
    }

    pub fn content_store(&self) -> Option<&ContentStore<T>> {
        self.content.as_ref()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = x.dims3()?;
        if c != 3 || (h, w) != (self.image_h, self.image_w) {
            return Err(Error::Config(format!(
                "input is {c}x{h}x{w}, problem expects 3x{}x{}",
                self.image_h, self.image_w
            )));
        }
        pad_input(x, &self.grid)
    }

    fn style_ops(&self, cur: &BTreeMap<String, LayerStats>) -> Result<(f64, Vec<(String, StyleGradOp)>)> {
        let mut loss = 0.0;
        let mut ops = Vec::new();
        for (t, w) in self.net.spec.style_tap_names().into_iter().zip(&self.weights.layers) {
            let target = &self.style_stats[&t];
            loss += style_layer_loss(&cur[&t], target, w)?;
            ops.push((t.clone(), StyleGradOp::new(&cur[&t], target, w)?));
        }
        Ok((loss, ops))
    }

    fn taps_for_backward(&self) -> Vec<String> {
        let mut taps = self.net.spec.style_tap_names();
        if self.content.is_some() {
            let c = self.net.spec.content_tap.name.clone();
            if !taps.contains(&c) {
                taps.push(c);
            }
        }
        taps
    }

    /// Style statistics of `x` (pass 1 only).
    pub fn stats_pass(&self, x: &Tensor<T>) -> Result<BTreeMap<String, LayerStats>> {
        let padded = self.check_input(x)?;
        stats_pass_padded(&self.net, &padded, &self.grid, &self.exec)
    }

    /// Loss and exact gradient, block by block.
    pub fn loss_grad(&self, x: &Tensor<T>) -> Result<LossGrad<T>> {
        let padded = self.check_input(x)?;
        if self.weights.is_all_zero() {
            return Ok(self.zero_result());
        }
        let taps = self.taps_for_backward();
        let net = &self.net;

        // A single block needs only one forward: its saved activations
        // serve both passes, with the same arithmetic as two sweeps.
        let (style_loss, ops, per_block) = if self.grid.len() == 1 {
            let b = self.grid.block(0);
            let fwd = net.forward_taps(&padded.crop(b.padded)?, Some(&taps), true)?;
            let cur = merge_block_stats(net, &[block_accumulators(net, &fwd, &b)?])?;
            let (style_loss, ops) = self.style_ops(&cur)?;
            let r = self.block_grad(fwd, &b, &ops)?;
            (style_loss, ops, vec![r])
        } else {
            let cur = stats_pass_padded(net, &padded, &self.grid, &self.exec)?;
            let (style_loss, ops) = self.style_ops(&cur)?;
            let per_block = self.exec.map_ordered(self.grid.len(), |i| {
                let b = self.grid.block(i);
                let fwd = net.forward_taps(&padded.crop(b.padded)?, Some(&taps), true)?;
                self.block_grad(fwd, &b, &ops)
            })?;
            (style_loss, ops, per_block)
        };

        let mut grad = Tensor::zeros(&[3, self.grid.image_h, self.grid.image_w]);
        let mut content_loss_total = 0.0;
        for (i, (g, closs)) in per_block.iter().enumerate() {
            let b = self.grid.block(i);
            grad.paste(g, b.inner.x, b.inner.y)?;
            content_loss_total += closs;
        }
        Ok(LossGrad {
            loss: style_loss + content_loss_total,
            style_loss,
            content_loss: content_loss_total,
            grad: grad.unpad_replicate_adjoint(self.image_h, self.image_w)?,
            degenerate_channels: ops.iter().map(|(_, o)| o.degenerate_channels).sum(),
        })
    }

    /// Pass 2 for one block: inject feature gradients everywhere in the
    /// padded block, backpropagate, keep the inner pixels.
    fn block_grad(&self, fwd: Forward<T>, b: &Block, ops: &[(String, StyleGradOp)]) -> Result<(Tensor<T>, f64)> {
        let net = &self.net;
        let content_tap = &net.spec.content_tap.name;
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (t, op) in ops {
            grads.insert(t.clone(), op.apply(fwd.tap(t)?)?);
        }
        let mut closs = 0.0;
        if let Some(store) = &self.content {
            let v = fwd.tap(content_tap)?;
            let u = store.get(b.index)?;
            let crop = feature_inner_crop(b, &net.geometry(content_tap)?)?;
            closs = content_loss(&v.crop(crop)?, &u.crop(crop)?, self.weights.content)?;
            let g = content_grad(v, &u, self.weights.content)?;
            match grads.get_mut(content_tap) {
                Some(existing) => existing.add_assign(&g)?,
                None => {
                    grads.insert(content_tap.clone(), g);
                }
            }
        }
        let gx = net.backward(fwd, &grads)?;
        Ok((inner_part(&gx, b)?, closs))
    }

    /// The same objective evaluated in one whole-image pass. Only feasible
    /// when all activations of the image fit in memory.
    pub fn loss_grad_global(&self, x: &Tensor<T>) -> Result<LossGrad<T>> {
        let padded = self.check_input(x)?;
        if self.weights.is_all_zero() {
            return Ok(self.zero_result());
        }
        let taps = self.taps_for_backward();
        let fwd = self.net.forward_taps(&padded, Some(&taps), true)?;
        let cur: BTreeMap<String, LayerStats> = self
            .net
            .spec
            .style_tap_names()
            .into_iter()
            .map(|t| Ok((t.clone(), LayerStats::of(fwd.tap(&t)?)?)))
            .collect::<Result<_>>()?;
        let (style_loss, ops) = self.style_ops(&cur)?;
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (t, op) in &ops {
            grads.insert(t.clone(), op.apply(fwd.tap(t)?)?);
        }
        let mut closs = 0.0;
        if let Some(u) = &self.content_image {
            let c = &self.net.spec.content_tap.name;
            let uf = self.net.forward_taps(u, Some(std::slice::from_ref(c)), false)?;
            let v = fwd.tap(c)?;
            closs = content_loss(v, uf.tap(c)?, self.weights.content)?;
            let g = content_grad(v, uf.tap(c)?, self.weights.content)?;
            match grads.get_mut(c) {
                Some(existing) => existing.add_assign(&g)?,
                None => {
                    grads.insert(c.clone(), g);
                }
            }
        }
        let gx = self.net.backward(fwd, &grads)?;
        Ok(LossGrad {
            loss: style_loss + closs,
            style_loss,
            content_loss: closs,
            grad: gx.unpad_replicate_adjoint(self.image_h, self.image_w)?,
            degenerate_channels: ops.iter().map(|(_, o)| o.degenerate_channels).sum(),
        })
    }

    fn zero_result(&self) -> LossGrad<T> {
        LossGrad {
            loss: 0.0,
            style_loss: 0.0,
            content_loss: 0.0,
            grad: Tensor::zeros(&[3, self.image_h, self.image_w]),
            degenerate_channels: 0,
        }
    }
}

/// Relative L2 distance between the block-wise and whole-image gradients of
/// the transfer loss with default weights on seeded noise images: the
/// iterate comes from `seed`, the style image from `seed + 1` and the content
/// image from `seed + 2`.
pub fn gradient_check<T: Real>(
    spec: &ExtractorSpec,
    (h, w): (usize, usize),
    params: GridParams,
    seed: u64,
    threads: usize,
) -> Result<f64> {
    let net = Arc::new(Network::<T>::new(spec)?);
    let exec = Executor::new(threads)?;
    let style = fixtures::noise(h, w, seed.wrapping_add(1)).to_tensor::<T>();
    let style_stats = stats_pass(&net, &style, params, &exec)?;
    let channels = spec
        .style_tap_names()
        .iter()
        .map(|t| net.geometry(t).map(|g| g.channels))
        .collect::<Result<Vec<_>>>()?;
    let grid = params.grid_for(h, w, net.deepest_stride())?;
    let cg = net.geometry(&spec.content_tap.name)?;
    let content_numel = cg.channels * (grid.image_h / cg.stride) * (grid.image_w / cg.stride);
    let weights = WeightConfig::default().resolve(&channels, content_numel)?;
    let content = fixtures::noise(h, w, seed.wrapping_add(2)).to_tensor::<T>();
    let problem = TransferProblem::new(
        net,
        style_stats,
        weights,
        (h, w),
        Some(&content),
        params,
        exec,
        usize::MAX,
    )?;
    let x = fixtures::noise(h, w, seed).to_tensor::<T>();
    let local = problem.loss_grad(&x)?;
    let global = problem.loss_grad_global(&x)?;
    Ok(rel_l2(local.grad.data(), global.grad.data()))
}

/// Gradient of a block's inner pixels, cut out of its padded-block gradient.
fn inner_part<T: Real>(g: &Tensor<T>, b: &Block) -> Result<Tensor<T>> {
    g.crop(Rect::new(
        b.present_margin.left,
        b.present_margin.top,
        b.inner.w,
        b.inner.h,
    ))
}
