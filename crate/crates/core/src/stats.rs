//! Per-layer feature statistics (Gram matrix, channel mean and standard
//! deviation), their mergeable accumulators, and the loss terms built on
//! them together with their gradients with respect to the features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::container::Record;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{DType, Real, Tensor};

/// Standard deviations below this are treated as degenerate: the std term
/// then contributes no gradient for that channel.
pub const STD_EPS: f64 = 1e-8;

/// Running f64 sums over feature pixels. Accumulators over disjoint pixel
/// sets merge exactly (up to f64 rounding), so blockwise statistics equal
/// whole-image statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsAccumulator {
    channels: usize,
    sum_outer: Vec<f64>,
    sum: Vec<f64>,
    count: u64,
}

impl StatsAccumulator {
    pub fn new(channels: usize) -> Self {
        StatsAccumulator {
            channels,
            sum_outer: vec![0.0; channels * channels],
            sum: vec![0.0; channels],
            count: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Adds every pixel of a `(C, h, w)` feature map.
    pub fn accumulate<T: Real>(&mut self, feat: &Tensor<T>) -> Result<()> {
        let (c, h, w) = feat.dims3()?;
        if c != self.channels {
            return shape_err(format!("accumulator has {} channels, features have {c}", self.channels));
        }
        let n = h * w;
        let planes: Vec<Vec<f64>> = (0..c)
            .map(|ch| feat.plane(ch).iter().map(|v| v.to_f64()).collect())
            .collect();
        for a in 0..c {
            let pa = &planes[a];
            self.sum[a] += pa.iter().sum::<f64>();
            for (b, pb) in planes.iter().enumerate().skip(a) {
                let d = dot(pa, pb);
                self.sum_outer[a * c + b] += d;
                if a != b {
                    self.sum_outer[b * c + a] += d;
                }
            }
        }
        self.count += n as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &StatsAccumulator) -> Result<()> {
        if other.channels != self.channels {
            return shape_err("cannot merge accumulators with different channel counts");
        }
        for (a, b) in self.sum_outer.iter_mut().zip(&other.sum_outer) {
            *a += b;
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn finalize(&self) -> Result<LayerStats> {
        if self.count == 0 {
            return Err(Error::Empty("no feature pixels were accumulated".into()));
        }
        let n = self.count as f64;
        let c = self.channels;
        let gram: Vec<f64> = self.sum_outer.iter().map(|v| v / n).collect();
        let mean: Vec<f64> = self.sum.iter().map(|v| v / n).collect();
        let std = (0..c)
            .map(|j| (gram[j * c + j] - mean[j] * mean[j]).max(0.0).sqrt())
            .collect();
        Ok(LayerStats {
            channels: c,
            gram,
            mean,
            std,
            n_p: self.count,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub channels: usize,
    /// Row-major `C x C`, normalised by `n_p`.
    pub gram: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_p: u64,
}

impl LayerStats {
    /// Statistics of a whole `(C, h, w)` feature map.
    pub fn of<T: Real>(feat: &Tensor<T>) -> Result<Self> {
        let mut acc = StatsAccumulator::new(feat.dims3()?.0);
        acc.accumulate(feat)?;
        acc.finalize()
    }

    pub fn to_records(&self, tap: &str) -> Vec<Record> {
        let c = self.channels;
        vec![
            Record::new(format!("{tap}.gram"), DType::F64, &[c, c], self.gram.clone()),
            Record::new(format!("{tap}.mean"), DType::F64, &[c], self.mean.clone()),
            Record::new(format!("{tap}.std"), DType::F64, &[c], self.std.clone()),
            Record::new(format!("{tap}.n_p"), DType::F64, &[1], vec![self.n_p as f64]),
        ]
    }

    pub fn from_records(records: &[Record], tap: &str) -> Result<Self> {
        let get = |suffix: &str| {
            let key = format!("{tap}.{suffix}");
            records
                .iter()
                .find(|r| r.name == key)
                .ok_or_else(|| Error::Format(format!("missing record {key}")))
        };
        let gram = get("gram")?;
        let c = gram.shape.first().copied().unwrap_or(0);
        if gram.shape != [c, c] {
            return Err(Error::Format(format!("{tap}.gram is not square: {:?}", gram.shape)));
        }
        let mean = get("mean")?;
        let std = get("std")?;
        let n_p = get("n_p")?;
        if mean.shape != [c] || std.shape != [c] || n_p.shape != [1] {
            return Err(Error::Format(format!("{tap}: inconsistent statistics shapes")));
        }
        Ok(LayerStats {
            channels: c,
            gram: gram.data.clone(),
            mean: mean.data.clone(),
            std: std.data.clone(),
            n_p: n_p.data[0] as u64,
        })
    }
}

/// Serialises a tap-name -> statistics map.
pub fn stats_to_records(stats: &BTreeMap<String, LayerStats>) -> Vec<Record> {
    stats.iter().flat_map(|(tap, s)| s.to_records(tap)).collect()
}

pub fn stats_from_records(records: &[Record], taps: &[String]) -> Result<BTreeMap<String, LayerStats>> {
    taps.iter()
        .map(|t| Ok((t.clone(), LayerStats::from_records(records, t)?)))
        .collect()
}

/// Weights of one style layer: Gram, mean and std terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub gram: f64,
    pub mean: f64,
    pub std: f64,
}

/// Fully resolved loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub content: f64,
    /// One entry per style tap, in tap order.
    pub layers: Vec<LayerWeights>,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.content).chain(self.layers.iter().flat_map(|l| [l.gram, l.mean, l.std]));
        for v in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weights must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_all_zero(&self) -> bool {
        self.content == 0.0
            && self
                .layers
                .iter()
                .all(|l| l.gram == 0.0 && l.mean == 0.0 && l.std == 0.0)
    }
}

/// User-facing multipliers from which [`LossWeights`] are derived.
///
/// The Gram weight of a layer with `C` channels is `style / C^2`; the mean
/// and std weights are `mean` and `std` times that. The content weight is
/// `content` divided by the number of content feature values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub content: f64,
    pub style: f64,
    pub mean: f64,
    pub std: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            content: 1.0,
            style: 1.0,
            mean: 1e3,
            std: 1e3,
        }
    }
}

impl WeightConfig {
    pub fn resolve(&self, style_channels: &[usize], content_numel: usize) -> Result<LossWeights> {
        let w = LossWeights {
            content: if content_numel == 0 {
                0.0
            } else {
                self.content / content_numel as f64
            },
            layers: style_channels
                .iter()
                .map(|&c| {
                    let g = self.style / (c * c) as f64;
                    LayerWeights {
                        gram: g,
                        mean: self.mean * g,
                        std: self.std * g,
                    }
                })
                .collect(),
        };
        w.validate()?;
        Ok(w)
    }
}

/// Style loss of one layer given current and target statistics.
pub fn style_layer_loss(cur: &LayerStats, target: &LayerStats, w: &LayerWeights) -> Result<f64> {
    check_compatible(cur, target)?;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    Ok(w.gram * sq(&cur.gram, &target.gram) + w.mean * sq(&cur.mean, &target.mean) + w.std * sq(&cur.std, &target.std))
}

fn check_compatible(cur: &LayerStats, target: &LayerStats) -> Result<()> {
    if cur.channels != target.channels {
        return shape_err(format!(
            "statistics channel mismatch: {} vs {}",
            cur.channels, target.channels
        ));
    }
    Ok(())
}

/// Linear-plus-offset map from features to their style-loss gradient.
///
/// With `G`, `m`, `s` the global statistics over `n_p` pixels, the gradient
/// at pixel `k` is `A v_k + b` where
/// `A = w (4/n_p)(G - G_ref) + diag(c)`, `c_j = w'' 2 (s_j - sigma_j) / (n_p s_j)`,
/// `b_j = w' 2 (m_j - mu_j) / n_p - c_j m_j`.
/// Because it depends only on global statistics, it can be applied to any
/// block of features independently.
#[derive(Clone, Debug)]
pub struct StyleGradOp {
    channels: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    /// Channels whose std fell below [`STD_EPS`].
    pub degenerate_channels: usize,
}

impl StyleGradOp {
    pub fn new(cur: &LayerStats, target: &LayerStats, w: &LayerWeights) -> Result<Self> {
        check_compatible(cur, target)?;
        let c = cur.channels;
        let n = cur.n_p as f64;
        let mut a: Vec<f64> = cur
            .gram
            .iter()
            .zip(&target.gram)
            .map(|(g, r)| w.gram * 4.0 / n * (g - r))
            .collect();
        let mut b = vec![0.0; c];
        let mut degenerate = 0;
        for j in 0..c {
            let s = cur.std[j];
            let cj = if s < STD_EPS {
                degenerate += 1;
                0.0
            } else {
                w.std * 2.0 * (s - target.std[j]) / (n * s)
            };
            a[j * c + j] += cj;
            b[j] = w.mean * 2.0 * (cur.mean[j] - target.mean[j]) / n - cj * cur.mean[j];
        }
        Ok(StyleGradOp {
            channels: c,
            a,
            b,
            degenerate_channels: degenerate,
        })
    }

    /// Gradient for a `(C, h, w)` block of features.
    pub fn apply<T: Real>(&self, feat: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = feat.dims3()?;
        if c != self.channels {
            return shape_err(format!("operator has {} channels, features have {c}", self.channels));
        }
        let n = h * w;
        let mut out = Tensor::zeros(&[c, h, w]);
        for j in 0..c {
            let row = &self.a[j * c..(j + 1) * c];
            let dst = out.plane_mut(j);
            let bj = T::from_f64(self.b[j]);
            dst.iter_mut().for_each(|v| *v = bj);
            for (i, &aji) in row.iter().enumerate() {
                if aji == 0.0 {
                    continue;
                }
                let aji = T::from_f64(aji);
                let src = &feat.data()[i * n..(i + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += aji * s;
                }
            }
        }
        Ok(out)
    }
}

/// Content loss `lambda * ||v - v_ref||^2` over a feature map.
pub fn content_loss<T: Real>(feat: &Tensor<T>, reference: &Tensor<T>, lambda: f64) -> Result<f64> {
    if feat.shape() != reference.shape() {
        return shape_err("content features and reference differ in shape");
    }
    Ok(lambda
        * feat
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| {
                let d = a.to_f64() - b.to_f64();
                d * d
            })
            .sum::<f64>())
}

/// Gradient `2 lambda (v - v_ref)`.
pub fn content_grad<T: Real>(feat: &Tensor<T>, reference: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    if feat.shape() != reference.shape() {
        return shape_err("content features and reference differ in shape");
    }
    let k = T::from_f64(2.0 * lambda);
    let data = feat
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| k * (a - b))
        .collect();
    Tensor::from_vec(feat.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feat(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.gen_range(-1.0..2.0)).collect()).unwrap()
    }

    /// Direct definitions, independent of the accumulator.
    fn naive_stats(f: &Tensor<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (c, h, w) = f.dims3().unwrap();
        let n = (h * w) as f64;
        let mut g = vec![0.0; c * c];
        for a in 0..c {
            for b in 0..c {
                g[a * c + b] = (0..h * w).map(|p| f.plane(a)[p] * f.plane(b)[p]).sum::<f64>() / n;
            }
        }
        let m: Vec<f64> = (0..c).map(|a| f.plane(a).iter().sum::<f64>() / n).collect();
        let s = (0..c)
            .map(|a| (f.plane(a).iter().map(|v| (v - m[a]) * (v - m[a])).sum::<f64>() / n).sqrt())
            .collect();
        (g, m, s)
    }

    #[test]
    fn stats_match_direct_definitions() {
        let f = random_feat(5, 7, 9, 1);
        let st = LayerStats::of(&f).unwrap();
        let (g, m, s) = naive_stats(&f);
        for (a, b) in st
            .gram
            .iter()
            .zip(&g)
            .chain(st.mean.iter().zip(&m))
            .chain(st.std.iter().zip(&s))
        {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(st.n_p, 63);
    }

    #[test]
    fn merged_blocks_equal_whole() {
        let f = random_feat(4, 12, 10, 2);
        let whole = LayerStats::of(&f).unwrap();
        let mut acc = StatsAccumulator::new(4);
        for (y, h) in [(0, 5), (5, 7)] {
            for (x, w) in [(0, 3), (3, 7)] {
                let mut part = StatsAccumulator::new(4);
                part.accumulate(&f.crop(crate::tiling::Rect::new(x, y, w, h)).unwrap())
                    .unwrap();
                acc.merge(&part).unwrap();
            }
        }
        let merged = acc.finalize().unwrap();
        assert_eq!(merged.n_p, whole.n_p);
        for (a, b) in merged.gram.iter().zip(&whole.gram) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_permutation_leaves_stats_unchanged() {
        let f = random_feat(3, 6, 6, 3);
        let (c, h, w) = f.dims3().unwrap();
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.reverse();
        perm.swap(3, 17);
        let mut g = f.clone();
        for ch in 0..c {
            let src = f.plane(ch).to_vec();
            for (k, &p) in perm.iter().enumerate() {
                g.plane_mut(ch)[k] = src[p];
            }
        }
        let (a, b) = (LayerStats::of(&f).unwrap(), LayerStats::of(&g).unwrap());
        for (x, y) in a.gram.iter().zip(&b.gram).chain(a.std.iter().zip(&b.std)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_accumulator_is_an_error() {
        assert!(matches!(StatsAccumulator::new(3).finalize(), Err(Error::Empty(_))));
    }

    #[test]
    fn constant_channel_has_zero_std_and_no_std_gradient() {
        let mut f = random_feat(3, 4, 4, 4);
        f.plane_mut(1).iter_mut().for_each(|v| *v = 0.25);
        let st = LayerStats::of(&f).unwrap();
        assert!(st.std[1] < 1e-7);
        let target = LayerStats::of(&random_feat(3, 4, 4, 5)).unwrap();
        let w = LayerWeights {
            gram: 0.0,
            mean: 0.0,
            std: 1.0,
        };
        let op = StyleGradOp::new(&st, &target, &w).unwrap();
        assert_eq!(op.degenerate_channels, 1);
        let g = op.apply(&f).unwrap();
        assert!(g.plane(1).iter().all(|&v| v == 0.0));
        assert!(g.plane(0).iter().any(|&v| v != 0.0));
    }

    fn loss_of(f: &Tensor<f64>, target: &LayerStats, w: &LayerWeights) -> f64 {
        style_layer_loss(&LayerStats::of(f).unwrap(), target, w).unwrap()
    }

    #[test]
    fn style_gradient_matches_finite_differences() {
        let f = random_feat(4, 5, 6, 6);
        let target = LayerStats::of(&random_feat(4, 3, 3, 7)).unwrap();
        let w = LayerWeights {
            gram: 0.7,
            mean: 1.3,
            std: 2.1,
        };
        let op = StyleGradOp::new(&LayerStats::of(&f).unwrap(), &target, &w).unwrap();
        let g = op.apply(&f).unwrap();
        let h = 1e-6;
        for idx in [0, 7, 33, 59, 100, 119] {
            let mut fp = f.clone();
            fp.data_mut()[idx] += h;
            let mut fm = f.clone();
            fm.data_mut()[idx] -= h;
            let num = (loss_of(&fp, &target, &w) - loss_of(&fm, &target, &w)) / (2.0 * h);
            let ana = g.data()[idx];
            assert!(
                (num - ana).abs() <= 1e-6 * ana.abs().max(1e-3),
                "idx {idx}: {num} vs {ana}"
            );
        }
    }

    #[test]
    fn content_gradient_matches_finite_differences() {
        let f = random_feat(2, 3, 4, 8);
        let r = random_feat(2, 3, 4, 9);
        let g = content_grad(&f, &r, 0.3).unwrap();
        let h = 1e-6;
        for idx in 0..f.len() {
            let mut fp = f.clone();
            fp.data_mut()[idx] += h;
            let mut fm = f.clone();
            fm.data_mut()[idx] -= h;
            let num = (content_loss(&fp, &r, 0.3).unwrap() - content_loss(&fm, &r, 0.3).unwrap()) / (2.0 * h);
            assert!((num - g.data()[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_stats_give_zero_loss_and_gradient() {
        let f = random_feat(3, 4, 5, 10);
        let st = LayerStats::of(&f).unwrap();
        let w = LayerWeights {
            gram: 1.0,
            mean: 1.0,
            std: 1.0,
        };
        assert_eq!(style_layer_loss(&st, &st, &w).unwrap(), 0.0);
        let g = StyleGradOp::new(&st, &st, &w).unwrap().apply(&f).unwrap();
        assert!(g.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn weights_validation_and_defaults() {
        let w = WeightConfig::default().resolve(&[8, 16], 100).unwrap();
        assert_eq!(w.layers[1].gram, 1.0 / 256.0);
        assert_eq!(w.layers[1].mean, 1e3 / 256.0);
        assert_eq!(w.content, 0.01);
        let bad = WeightConfig {
            std: -1.0,
            ..Default::default()
        };
        assert!(matches!(bad.resolve(&[4], 1), Err(Error::Config(_))));
        let nan = WeightConfig {
            content: f64::NAN,
            ..Default::default()
        };
        assert!(matches!(nan.resolve(&[4], 1), Err(Error::Config(_))));
    }

    #[test]
    fn records_round_trip() {
        let st = LayerStats::of(&random_feat(3, 4, 4, 11)).unwrap();
        let mut map = BTreeMap::new();
        map.insert("relu1_1".to_string(), st.clone());
        let recs = stats_to_records(&map);
        let back = stats_from_records(&recs, &["relu1_1".to_string()]).unwrap();
        assert_eq!(back["relu1_1"], st);
        assert!(stats_from_records(&recs, &["relu9_9".to_string()]).is_err());
    }

    proptest! {
        #[test]
        fn gram_is_symmetric_psd(seed in 0u64..1000, c in 1usize..6, n in 1usize..20) {
            let f = random_feat(c, 1, n, seed);
            let st = LayerStats::of(&f).unwrap();
            for a in 0..c {
                for b in 0..c {
                    prop_assert_eq!(st.gram[a * c + b], st.gram[b * c + a]);
                }
            }
            // x^T G x >= 0 for a few deterministic probe vectors.
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for _ in 0..5 {
                let x: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let q: f64 = (0..c).map(|a| (0..c).map(|b| x[a] * st.gram[a * c + b] * x[b]).sum::<f64>()).sum();
                prop_assert!(q >= -1e-12);
            }
            prop_assert!(st.std.iter().all(|s| *s >= 0.0));
        }
    }
}
