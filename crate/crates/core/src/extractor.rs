//! Layered convolutional feature extractor with named taps.
//!
//! An [`ExtractorSpec`] describes the architecture, the style and content
//! taps, the input preprocessing and (once bound) the convolution weights.
//! A [`Network`] is a spec materialised in a compute dtype; it evaluates tap
//! features and backpropagates tap gradients to the input pixels.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, Record};
use crate::error::{shape_err, Error, Result};
use crate::layers::{layer_backward_input, layer_forward, ConvParams, Layer, LayerKind, LayerSpec, PoolKind};
use crate::memtrack::Tracked;
use crate::tensor::{DType, Real, Tensor};

/// Per-channel input normalisation: `out[c] = (in[order[c]] - mean[c]) * scale[c]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    pub order: [usize; 3],
}

impl Preprocess {
    pub const HEADER_RECORD: &'static str = "__preprocess__";

    pub fn identity() -> Self {
        Preprocess {
            mean: [0.0; 3],
            scale: [1.0; 3],
            order: [0, 1, 2],
        }
    }

    /// Caffe-style VGG convention: BGR order, ImageNet mean, 0..255 range.
    pub fn caffe_vgg() -> Self {
        Preprocess {
            mean: [103.939 / 255.0, 116.779 / 255.0, 123.68 / 255.0],
            scale: [255.0; 3],
            order: [2, 1, 0],
        }
    }

    fn to_record(&self) -> Record {
        let mut data = Vec::with_capacity(9);
        data.extend_from_slice(&self.mean);
        data.extend_from_slice(&self.scale);
        data.extend(self.order.iter().map(|&o| o as f64));
        Record::new(Self::HEADER_RECORD, DType::F64, &[3, 3], data)
    }

    fn from_record(r: &Record) -> Result<Self> {
        if r.shape != [3, 3] {
            return Err(Error::Format(format!(
                "{} record must be 3x3, got {:?}",
                Self::HEADER_RECORD,
                r.shape
            )));
        }
        let d = &r.data;
        let mut order = [0usize; 3];
        for (c, o) in order.iter_mut().enumerate() {
            let v = d[6 + c];
            if !(v == 0.0 || v == 1.0 || v == 2.0) {
                return Err(Error::Format(format!("bad channel order entry {v}")));
            }
            *o = v as usize;
        }
        Ok(Preprocess {
            mean: [d[0], d[1], d[2]],
            scale: [d[3], d[4], d[5]],
            order,
        })
    }

    fn forward<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = x.dims3()?;
        if c != 3 {
            return shape_err(format!("extractor input must have 3 channels, got {c}"));
        }
        let mut out = Tensor::zeros(&[3, h, w]);
        for ch in 0..3 {
            let m = T::from_f64(self.mean[ch]);
            let s = T::from_f64(self.scale[ch]);
            let src = x.plane(self.order[ch]);
            for (o, &v) in out.plane_mut(ch).iter_mut().zip(src) {
                *o = (v - m) * s;
            }
        }
        Ok(out)
    }

    fn backward<T: Real>(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, h, w) = g.dims3()?;
        let mut out = Tensor::zeros(&[3, h, w]);
        for ch in 0..3 {
            let s = T::from_f64(self.scale[ch]);
            let src = g.plane(ch);
            for (o, &v) in out.plane_mut(self.order[ch]).iter_mut().zip(src) {
                *o += v * s;
            }
        }
        Ok(out)
    }
}

/// A named tap: the output of layer `layer`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tap {
    pub name: String,
    pub layer: usize,
}

/// Stride and receptive field of a tap, in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapGeometry {
    pub stride: usize,
    pub rf_radius: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct ExtractorSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub style_taps: Vec<Tap>,
    pub content_tap: Tap,
    pub preprocess: Preprocess,
    /// One entry per layer; `Some` for bound convolutions.
    pub weights: Vec<Option<ConvParams<f64>>>,
}

impl ExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.layers.len() {
            return Err(Error::Config("weights table length differs from layer count".into()));
        }
        let mut ch = 3;
        for l in &self.layers {
            l.validate()?;
            if let LayerKind::Conv { in_ch, out_ch, .. } = l.kind {
                if in_ch != ch {
                    return Err(Error::Config(format!(
                        "layer {} expects {in_ch} channels but receives {ch}",
                        l.name
                    )));
                }
                ch = out_ch;
            }
        }
        if self.style_taps.is_empty() {
            return Err(Error::Config("extractor has no style taps".into()));
        }
        for t in self.style_taps.iter().chain(std::iter::once(&self.content_tap)) {
            match self.layers.get(t.layer) {
                Some(l) if l.kind == LayerKind::Relu => {}
                _ => return Err(Error::Config(format!("tap {} must point at a relu layer", t.name))),
            }
        }
        Ok(())
    }

    /// Layer index of a style or content tap.
    pub fn tap(&self, name: &str) -> Result<&Tap> {
        self.style_taps
            .iter()
            .chain(std::iter::once(&self.content_tap))
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Key(format!("no tap named {name:?}")))
    }

    pub fn style_tap_names(&self) -> Vec<String> {
        self.style_taps.iter().map(|t| t.name.clone()).collect()
    }

    /// Receptive-field recurrence: `radius += jump * (k - 1) / 2` for
    /// convolutions, `jump *= stride` for strided layers. A `k x k` pool
    /// with stride `k` adds no radius beyond the stride cell.
    pub fn tap_geometry(&self, name: &str) -> Result<TapGeometry> {
        let tap = self.tap(name)?;
        let (mut jump, mut radius, mut channels) = (1usize, 0usize, 3usize);
        for l in &self.layers[..=tap.layer] {
            match l.kind {
                LayerKind::Conv { out_ch, k, stride, .. } => {
                    radius += jump * (k - 1) / 2;
                    jump *= stride;
                    channels = out_ch;
                }
                LayerKind::Relu => {}
                LayerKind::Pool { k, .. } => jump *= k,
            }
        }
        Ok(TapGeometry {
            stride: jump,
            rf_radius: radius,
            channels,
        })
    }

    fn all_tap_names(&self) -> impl Iterator<Item = &str> {
        self.style_taps
            .iter()
            .chain(std::iter::once(&self.content_tap))
            .map(|t| t.name.as_str())
    }

    /// Largest stride over all taps; the block grid aligns to this.
    pub fn deepest_stride(&self) -> usize {
        self.all_tap_names()
            .map(|n| self.tap_geometry(n).map(|g| g.stride).unwrap_or(1))
            .max()
            .unwrap_or(1)
    }

    pub fn max_rf_radius(&self) -> usize {
        self.all_tap_names()
            .map(|n| self.tap_geometry(n).map(|g| g.rf_radius).unwrap_or(0))
            .max()
            .unwrap_or(0)
    }

    pub fn is_bound(&self) -> bool {
        self.layers
            .iter()
            .zip(&self.weights)
            .all(|(l, w)| !matches!(l.kind, LayerKind::Conv { .. }) || w.is_some())
    }

    /// Digest of architecture, taps, preprocessing and weights.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update(serde_json::to_vec(&self.layers).expect("layers serialize"));
        h.update(serde_json::to_vec(&self.style_taps).expect("taps serialize"));
        h.update(serde_json::to_vec(&self.content_tap).expect("tap serializes"));
        h.update(serde_json::to_vec(&self.preprocess).expect("preprocess serializes"));
        for p in self.weights.iter().flatten() {
            for v in p.weight.data().iter().chain(p.bias.data()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn weight_records(&self, dtype: DType) -> Vec<Record> {
        let mut recs = vec![self.preprocess.to_record()];
        for (l, w) in self.layers.iter().zip(&self.weights) {
            if let Some(p) = w {
                let mut wr = Record::from_tensor(format!("{}.weight", l.name), &p.weight);
                let mut br = Record::from_tensor(format!("{}.bias", l.name), &p.bias);
                wr.dtype = dtype;
                br.dtype = dtype;
                recs.push(wr);
                recs.push(br);
            }
        }
        recs
    }
}

/// Writes the extractor's weights (and preprocessing header) to an `NSTW1` file.
pub fn save_weights(path: impl AsRef<Path>, spec: &ExtractorSpec, dtype: DType) -> Result<()> {
    if !spec.is_bound() {
        return Err(Error::Config("cannot save an extractor without weights".into()));
    }
    container::write(path, &spec.weight_records(dtype))
}

/// Binds weights from an `NSTW1` file to `spec`, shape-checking every conv.
pub fn load_weights(path: impl AsRef<Path>, spec: &ExtractorSpec) -> Result<ExtractorSpec> {
    let records = container::read(path)?;
    bind_weights(&records, spec)
}

pub fn bind_weights(records: &[Record], spec: &ExtractorSpec) -> Result<ExtractorSpec> {
    let by_name: BTreeMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
    let mut out = spec.clone();
    if let Some(r) = by_name.get(Preprocess::HEADER_RECORD) {
        out.preprocess = Preprocess::from_record(r)?;
    }
    for (i, l) in spec.layers.iter().enumerate() {
        let LayerKind::Conv { in_ch, out_ch, k, .. } = l.kind else {
            continue;
        };
        let fetch = |suffix: &str, want: &[usize]| -> Result<Tensor<f64>> {
            let key = format!("{}.{suffix}", l.name);
            let r = by_name
                .get(key.as_str())
                .ok_or_else(|| Error::Format(format!("layer {}: missing record {key}", l.name)))?;
            if r.shape != want {
                return Err(Error::Format(format!(
                    "layer {}: {suffix} has dims {:?}, expected {:?}",
                    l.name, r.shape, want
                )));
            }
            Ok(r.to_tensor())
        };
        out.weights[i] = Some(ConvParams {
            weight: fetch("weight", &[out_ch, in_ch, k, k])?,
            bias: fetch("bias", &[out_ch])?,
        });
    }
    out.validate()?;
    Ok(out)
}

/// Small three-group network whose whole test surface runs in milliseconds.
///
/// conv3x3(3->8), relu1_1, avgpool2, conv3x3(8->16), relu2_1, avgpool2,
/// conv3x3(16->32), relu3_1. Style taps are the three relus; the content tap
/// is relu2_1. Weights are He-uniform from a seeded generator.
pub fn tinynet(seed: u64) -> ExtractorSpec {
    let layers = vec![
        LayerSpec::conv("conv1_1", 3, 8, 3),
        LayerSpec::relu("relu1_1"),
        LayerSpec::pool("pool1", PoolKind::Avg, 2),
        LayerSpec::conv("conv2_1", 8, 16, 3),
        LayerSpec::relu("relu2_1"),
        LayerSpec::pool("pool2", PoolKind::Avg, 2),
        LayerSpec::conv("conv3_1", 16, 32, 3),
        LayerSpec::relu("relu3_1"),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::Conv { in_ch, out_ch, k, .. } => {
                let fan_in = (in_ch * k * k) as f64;
                let a = (6.0 / fan_in).sqrt();
                let w: Vec<f64> = (0..out_ch * in_ch * k * k).map(|_| rng.gen_range(-a..a)).collect();
                let b: Vec<f64> = (0..out_ch).map(|_| rng.gen_range(-0.05..0.05)).collect();
                Some(ConvParams {
                    weight: Tensor::from_vec(&[out_ch, in_ch, k, k], w).unwrap(),
                    bias: Tensor::from_vec(&[out_ch], b).unwrap(),
                })
            }
            _ => None,
        })
        .collect();
    ExtractorSpec {
        name: "tinynet".into(),
        layers,
        style_taps: vec![
            Tap {
                name: "relu1_1".into(),
                layer: 1,
            },
            Tap {
                name: "relu2_1".into(),
                layer: 4,
            },
            Tap {
                name: "relu3_1".into(),
                layer: 7,
            },
        ],
        content_tap: Tap {
            name: "relu2_1".into(),
            layer: 4,
        },
        preprocess: Preprocess::identity(),
        weights,
    }
}

/// VGG19 convolutional trunk up to `relu5_4`, without weights.
pub fn vgg19(pool: PoolKind) -> ExtractorSpec {
    let groups: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];
    let mut layers = Vec::new();
    let mut style_taps = Vec::new();
    let mut content_tap = None;
    let mut ch = 3;
    for (g, &(width, n)) in groups.iter().enumerate() {
        let g = g + 1;
        if g > 1 {
            layers.push(LayerSpec::pool(format!("pool{}", g - 1), pool, 2));
        }
        for i in 1..=n {
            layers.push(LayerSpec::conv(format!("conv{g}_{i}"), ch, width, 3));
            ch = width;
            let relu = format!("relu{g}_{i}");
            layers.push(LayerSpec::relu(relu.clone()));
            let idx = layers.len() - 1;
            if i == 1 {
                style_taps.push(Tap {
                    name: relu.clone(),
                    layer: idx,
                });
            }
            if g == 4 && i == 2 {
                content_tap = Some(Tap { name: relu, layer: idx });
            }
        }
    }
    let n = layers.len();
    ExtractorSpec {
        name: "vgg19".into(),
        layers,
        style_taps,
        content_tap: content_tap.expect("group 4 has two convs"),
        preprocess: Preprocess::caffe_vgg(),
        weights: vec![None; n],
    }
}

/// A bound extractor materialised in dtype `T`.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub spec: ExtractorSpec,
    layers: Vec<Layer<T>>,
    geometry: BTreeMap<String, TapGeometry>,
}

/// Activations of one forward evaluation.
pub struct Forward<T: Real> {
    /// `acts[0]` is the preprocessed input, `acts[i + 1]` the output of layer
    /// `i`. Entries are `None` when they were not kept.
    acts: Vec<Option<Tracked<T>>>,
    taps: BTreeMap<String, usize>,
    saved: bool,
}

impl<T: Real> Forward<T> {
    pub fn tap(&self, name: &str) -> Result<&Tensor<T>> {
        let idx = self
            .taps
            .get(name)
            .ok_or_else(|| Error::Key(format!("tap {name:?} was not evaluated")))?;
        Ok(self.acts[*idx].as_deref().expect("tap activations are kept"))
    }

    pub fn tap_names(&self) -> impl Iterator<Item = &str> {
        self.taps.keys().map(|s| s.as_str())
    }

    /// Clones every tap into a plain map.
    pub fn into_taps(self) -> BTreeMap<String, Tensor<T>> {
        self.taps
            .iter()
            .map(|(n, &i)| (n.clone(), (**self.acts[i].as_ref().unwrap()).clone()))
            .collect()
    }
}

impl<T: Real> Network<T> {
    pub fn new(spec: &ExtractorSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .zip(&spec.weights)
            .map(|(l, w)| Layer::new(l, w.as_ref().map(|p| p.cast::<T>())))
            .collect::<Result<Vec<_>>>()?;
        let mut geometry = BTreeMap::new();
        for name in spec.all_tap_names() {
            geometry.insert(name.to_string(), spec.tap_geometry(name)?);
        }
        Ok(Network {
            spec: spec.clone(),
            layers,
            geometry,
        })
    }

    pub fn geometry(&self, tap: &str) -> Result<TapGeometry> {
        self.geometry
            .get(tap)
            .copied()
            .ok_or_else(|| Error::Key(format!("no tap named {tap:?}")))
    }

    pub fn deepest_stride(&self) -> usize {
        self.spec.deepest_stride()
    }

    /// Evaluates the requested taps (all taps when `taps` is `None`). With
    /// `save_for_backward`, every layer input is retained for [`Network::backward`].
    pub fn forward_taps(&self, x: &Tensor<T>, taps: Option<&[String]>, save_for_backward: bool) -> Result<Forward<T>> {
        let (_, h, w) = x.dims3()?;
        let names: Vec<String> = match taps {
            Some(t) => t.to_vec(),
            None => self.geometry.keys().cloned().collect(),
        };
        let mut tap_idx = BTreeMap::new();
        let mut depth = 0;
        for n in &names {
            let g = self.geometry(n)?;
            if h < g.stride || w < g.stride {
                return Err(Error::Geometry(format!(
                    "input {h}x{w} is smaller than one feature pixel of tap {n} (stride {})",
                    g.stride
                )));
            }
            let layer = self.spec.tap(n)?.layer;
            tap_idx.insert(n.clone(), layer + 1);
            depth = depth.max(layer + 1);
        }
        let keep = |i: usize| save_for_backward || tap_idx.values().any(|&t| t == i);
        let mut acts: Vec<Option<Tracked<T>>> = Vec::with_capacity(depth + 1);
        let mut cur = Tracked::new(self.spec.preprocess.forward(x)?);
        for (i, layer) in self.layers[..depth].iter().enumerate() {
            let next = Tracked::new(layer_forward(&cur, layer)?);
            if next.is_empty() {
                return Err(Error::Geometry(format!(
                    "layer {} produced an empty map for a {h}x{w} input",
                    self.spec.layers[i].name
                )));
            }
            acts.push(if keep(i) { Some(cur) } else { None });
            cur = next;
        }
        acts.push(Some(cur));
        Ok(Forward {
            acts,
            taps: tap_idx,
            saved: save_for_backward,
        })
    }

    /// Backpropagates tap gradients to the input image. Consumes the
    /// forward record; activations are released as the sweep passes them.
    pub fn backward(&self, fwd: Forward<T>, tap_grads: &BTreeMap<String, Tensor<T>>) -> Result<Tensor<T>> {
        if !fwd.saved {
            return Err(Error::Config(
                "backward needs a forward pass with saved activations".into(),
            ));
        }
        let mut grads_at: BTreeMap<usize, Vec<&Tensor<T>>> = BTreeMap::new();
        for (name, g) in tap_grads {
            let idx = *fwd
                .taps
                .get(name)
                .ok_or_else(|| Error::Key(format!("gradient for unevaluated tap {name:?}")))?;
            grads_at.entry(idx).or_default().push(g);
        }
        let Forward { mut acts, .. } = fwd;
        let depth = acts.len() - 1;
        let seed_grad = |idx: usize, like: &Tensor<T>| -> Result<Tracked<T>> {
            let mut g = Tracked::new(Tensor::zeros(like.shape()));
            if let Some(list) = grads_at.get(&idx) {
                for t in list {
                    g.add_assign(t)?;
                }
            }
            Ok(g)
        };
        let mut g = seed_grad(depth, acts[depth].as_deref().unwrap())?;
        acts[depth] = None;
        for i in (0..depth).rev() {
            let input = acts[i].take().expect("saved activation");
            let gin = layer_backward_input(&g, &input, &self.layers[i])?;
            drop(g);
            g = Tracked::new(gin);
            if let Some(list) = grads_at.get(&i) {
                for t in list {
                    g.add_assign(t)?;
                }
            }
        }
        self.spec.preprocess.backward(&g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn tinynet_geometry() {
        let spec = tinynet(0);
        let strides: Vec<_> = spec
            .style_tap_names()
            .iter()
            .map(|n| spec.tap_geometry(n).unwrap().stride)
            .collect();
        assert_eq!(strides, vec![1, 2, 4]);
        let deep = spec.tap_geometry("relu3_1").unwrap();
        assert_eq!(deep.rf_radius, 1 + 2 + 4);
        assert_eq!(deep.channels, 32);
        assert_eq!(spec.content_tap.name, "relu2_1");
        assert!(matches!(spec.tap_geometry("nope"), Err(Error::Key(_))));
    }

    #[test]
    fn single_conv_geometry() {
        let mut spec = tinynet(0);
        spec.layers.truncate(2);
        spec.weights.truncate(2);
        spec.style_taps.truncate(1);
        spec.content_tap = spec.style_taps[0].clone();
        let g = spec.tap_geometry("relu1_1").unwrap();
        assert_eq!((g.stride, g.rf_radius), (1, 1));
    }

    #[test]
    fn conv_pool_conv_geometry() {
        let spec = tinynet(0);
        let g = spec.tap_geometry("relu2_1").unwrap();
        assert_eq!((g.stride, g.rf_radius), (2, 3));
    }

    #[test]
    fn vgg19_taps() {
        let spec = vgg19(PoolKind::Avg);
        spec.validate().unwrap();
        let chans: Vec<_> = spec
            .style_tap_names()
            .iter()
            .map(|n| spec.tap_geometry(n).unwrap().channels)
            .collect();
        assert_eq!(chans, vec![64, 128, 256, 512, 512]);
        assert_eq!(
            spec.style_tap_names(),
            ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"]
        );
        assert_eq!(spec.content_tap.name, "relu4_2");
        assert_eq!(spec.tap_geometry("relu5_1").unwrap().stride, 16);
        assert!(!spec.is_bound());
        assert!(Network::<f32>::new(&spec).is_err());
    }

    #[test]
    fn tinynet_is_deterministic() {
        assert_eq!(tinynet(5).weights, tinynet(5).weights);
        assert_ne!(tinynet(5).weights, tinynet(6).weights);
    }

    #[test]
    fn tinynet_activation_scale() {
        let net = Network::<f64>::new(&tinynet(0)).unwrap();
        let x = random_image(64, 64, 1);
        let fwd = net.forward_taps(&x, None, false).unwrap();
        for name in ["relu1_1", "relu2_1", "relu3_1"] {
            let t = fwd.tap(name).unwrap();
            let n = t.len() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let std = (t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            assert!((0.1..=10.0).contains(&std), "{name} std {std}");
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn zero_image_hand_evaluation() {
        let spec = tinynet(3);
        let net = Network::<f64>::new(&spec).unwrap();
        let x = Tensor::zeros(&[3, 32, 32]);
        let fwd = net.forward_taps(&x, None, false).unwrap();
        let b1 = spec.weights[0].as_ref().unwrap().bias.data().to_vec();
        let r1: Vec<f64> = b1.iter().map(|&b| b.max(0.0)).collect();
        let t1 = fwd.tap("relu1_1").unwrap();
        for c in 0..8 {
            assert!(t1.plane(c).iter().all(|&v| v == r1[c]));
        }
        // relu2_1 at (y, x) sums the 3x3 taps that fall inside the 16x16 map.
        let p2 = spec.weights[3].as_ref().unwrap();
        let t2 = fwd.tap("relu2_1").unwrap();
        for &(y, x) in &[(0usize, 0usize), (0, 7), (7, 7), (15, 15), (15, 3)] {
            for o in 0..16 {
                let mut s = p2.bias.data()[o];
                for i in 0..8 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if (0..16).contains(&iy) && (0..16).contains(&ix) {
                                s += p2.weight.data()[((o * 8 + i) * 3 + ky) * 3 + kx] * r1[i];
                            }
                        }
                    }
                }
                let got = t2.plane(o)[y * 16 + x];
                assert!((got - s.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_small_input_is_geometry_error() {
        let net = Network::<f32>::new(&tinynet(0)).unwrap();
        let x = Tensor::zeros(&[3, 3, 16]);
        assert!(matches!(net.forward_taps(&x, None, false), Err(Error::Geometry(_))));
    }

    #[test]
    fn embedding_in_zero_canvas_preserves_interior_features() {
        let spec = tinynet(1);
        let net = Network::<f64>::new(&spec).unwrap();
        let x = random_image(32, 40, 2);
        let (oy, ox) = (8, 12); // multiples of the deepest stride
        let mut big = Tensor::zeros(&[3, 64, 72]);
        big.paste(&x, ox, oy).unwrap();
        let small = net.forward_taps(&x, None, false).unwrap();
        let large = net.forward_taps(&big, None, false).unwrap();
        for name in spec.style_tap_names() {
            let g = spec.tap_geometry(&name).unwrap();
            let a = small.tap(&name).unwrap();
            let b = large.tap(&name).unwrap();
            let (c, h, w) = a.dims3().unwrap();
            let (_, _, bw) = b.dims3().unwrap();
            let guard = g.rf_radius.div_ceil(g.stride) + 1;
            for ch in 0..c {
                for y in guard..h - guard {
                    for xx in guard..w - guard {
                        let va = a.plane(ch)[y * w + xx];
                        let vb = b.plane(ch)[(y + oy / g.stride) * bw + xx + ox / g.stride];
                        assert_eq!(va, vb);
                    }
                }
            }
        }
    }

    #[test]
    fn single_pixel_probe_stays_within_receptive_field() {
        let spec = tinynet(4);
        let net = Network::<f64>::new(&spec).unwrap();
        let x = random_image(48, 48, 5);
        let base = net.forward_taps(&x, None, false).unwrap();
        let (py, px) = (23usize, 30usize);
        let mut xp = x.clone();
        xp.data_mut()[py * 48 + px] += 0.5;
        let pert = net.forward_taps(&xp, None, false).unwrap();
        for name in spec.style_tap_names() {
            let g = spec.tap_geometry(&name).unwrap();
            let reach = (g.rf_radius.div_ceil(g.stride) + 1) as isize;
            let a = base.tap(&name).unwrap();
            let b = pert.tap(&name).unwrap();
            let (c, h, w) = a.dims3().unwrap();
            let (my, mx) = ((py / g.stride) as isize, (px / g.stride) as isize);
            let mut changed = 0;
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let i = y * w + xx;
                        if a.plane(ch)[i] != b.plane(ch)[i] {
                            changed += 1;
                            assert!((y as isize - my).abs() <= reach && (xx as isize - mx).abs() <= reach);
                        }
                    }
                }
            }
            assert!(changed > 0, "{name}: perturbation had no effect");
        }
    }

    #[test]
    fn weight_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tinynet(9);
        let path = dir.path().join("tiny.nstw");
        save_weights(&path, &spec, DType::F64).unwrap();
        let mut unbound = spec.clone();
        unbound.weights = vec![None; spec.layers.len()];
        let loaded = load_weights(&path, &unbound).unwrap();
        assert_eq!(loaded.weights, spec.weights);
        assert_eq!(loaded.preprocess, spec.preprocess);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_weights(&path, &unbound), Err(Error::Format(_))));

        // Swap in/out dims of conv2_1.
        let mut recs = spec.weight_records(DType::F32);
        let r = recs.iter_mut().find(|r| r.name == "conv2_1.weight").unwrap();
        r.shape = vec![8, 16, 3, 3];
        container::write(&path, &recs).unwrap();
        match load_weights(&path, &unbound) {
            Err(Error::Format(msg)) => assert!(msg.contains("conv2_1"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Network::<f64>::new(&tinynet(2)).unwrap();
        let x = random_image(16, 20, 3);
        let fwd = net.forward_taps(&x, None, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut grads = BTreeMap::new();
        for n in fwd.tap_names() {
            let t = fwd.tap(n).unwrap();
            grads.insert(
                n.to_string(),
                Tensor::from_vec(t.shape(), (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            );
        }
        let gx = net.backward(fwd, &grads).unwrap();
        let d = random_image(16, 20, 5);
        let objective = |s: f64| {
            let mut xs = x.clone();
            for (a, &b) in xs.data_mut().iter_mut().zip(d.data()) {
                *a += s * b;
            }
            let f = net.forward_taps(&xs, None, false).unwrap();
            grads
                .iter()
                .map(|(n, g)| f.tap(n).unwrap().dot(g).unwrap())
                .sum::<f64>()
        };
        let t = 1e-6;
        let numeric = (objective(t) - objective(-t)) / (2.0 * t);
        let analytic = gx.dot(&d).unwrap();
        assert!((numeric - analytic).abs() <= 1e-6 * analytic.abs());
    }
}
