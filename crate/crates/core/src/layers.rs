//! Forward and input-gradient kernels for convolution, ReLU and pooling.
//!
//! Convolution is cross-correlation (no kernel flip). Only gradients with
//! respect to layer inputs are provided; weights are fixed.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    /// `k x k` window with stride `k`.
    Pool {
        kind: PoolKind,
        k: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    /// "Same" 3x3-style convolution: odd `k`, stride 1, pad `(k-1)/2`.
    pub fn conv(name: impl Into<String>, in_ch: usize, out_ch: usize, k: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv {
                in_ch,
                out_ch,
                k,
                stride: 1,
                pad: (k - 1) / 2,
            },
        }
    }

    pub fn relu(name: impl Into<String>) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Relu,
        }
    }

    pub fn pool(name: impl Into<String>, kind: PoolKind, k: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Pool { kind, k },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                k,
                stride,
                pad,
            } => {
                if k % 2 == 0 || pad != (k - 1) / 2 || stride == 0 || in_ch == 0 || out_ch == 0 {
                    return Err(Error::Geometry(format!(
                        "layer {}: conv needs odd k, pad (k-1)/2 and nonzero stride/channels",
                        self.name
                    )));
                }
            }
            LayerKind::Pool { k: 0, .. } => {
                return Err(Error::Geometry(format!("layer {}: pool k = 0", self.name)));
            }
            _ => {}
        }
        Ok(())
    }

    /// Output `(h, w)` for an input of `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv { k, stride, pad, .. } => {
                let f = |n: usize| (n + 2 * pad).saturating_sub(k) / stride + 1;
                (f(h), f(w))
            }
            LayerKind::Relu => (h, w),
            LayerKind::Pool { k, .. } => (h / k, w / k),
        }
    }
}

/// Convolution weights bound to a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `(out, in, k, k)`
    pub weight: Tensor<T>,
    /// `(out)`
    pub bias: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// A layer ready to evaluate.
#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv { spec: LayerSpec, params: ConvParams<T> },
    Relu,
    Pool { kind: PoolKind, k: usize },
}

impl<T: Real> Layer<T> {
    pub fn new(spec: &LayerSpec, params: Option<ConvParams<T>>) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            LayerKind::Conv { in_ch, out_ch, k, .. } => {
                let params =
                    params.ok_or_else(|| Error::Config(format!("conv layer {} has no weights bound", spec.name)))?;
                if params.weight.shape() != [out_ch, in_ch, k, k] || params.bias.shape() != [out_ch] {
                    return shape_err(format!(
                        "layer {}: weight {:?} / bias {:?} do not match conv({in_ch}->{out_ch}, k={k})",
                        spec.name,
                        params.weight.shape(),
                        params.bias.shape()
                    ));
                }
                Layer::Conv {
                    spec: spec.clone(),
                    params,
                }
            }
            LayerKind::Relu => Layer::Relu,
            LayerKind::Pool { kind, k } => Layer::Pool { kind, k },
        })
    }
}

pub fn layer_forward<T: Real>(input: &Tensor<T>, layer: &Layer<T>) -> Result<Tensor<T>> {
    match layer {
        Layer::Conv { spec, params } => conv_forward(input, spec, params),
        Layer::Relu => Ok(input.map(|v| if v > T::ZERO { v } else { T::ZERO })),
        Layer::Pool { kind, k } => pool_forward(input, *kind, *k),
    }
}

/// Gradient of `<grad_out, layer_forward(input)>` with respect to `input`,
/// where `saved_input` is the input the forward pass saw.
pub fn layer_backward_input<T: Real>(
    grad_out: &Tensor<T>,
    saved_input: &Tensor<T>,
    layer: &Layer<T>,
) -> Result<Tensor<T>> {
    match layer {
        Layer::Conv { spec, params } => conv_backward(grad_out, saved_input, spec, params),
        Layer::Relu => {
            if grad_out.shape() != saved_input.shape() {
                return shape_err(format!(
                    "relu backward: grad {:?} vs input {:?}",
                    grad_out.shape(),
                    saved_input.shape()
                ));
            }
            let data = grad_out
                .data()
                .iter()
                .zip(saved_input.data())
                .map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO })
                .collect();
            Tensor::from_vec(grad_out.shape(), data)
        }
        Layer::Pool { kind, k } => pool_backward(grad_out, saved_input, *kind, *k),
    }
}

fn conv_geometry(spec: &LayerSpec) -> (usize, usize, usize, usize, usize) {
    match spec.kind {
        LayerKind::Conv {
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        } => (in_ch, out_ch, k, stride, pad),
        _ => unreachable!("conv geometry of a non-conv layer"),
    }
}

/// Range of output indices `o` for which `o*stride + tap - pad` lands in `[0, n)`.
#[inline]
fn valid_range(n: usize, out_n: usize, tap: usize, pad: usize, stride: usize) -> (usize, usize) {
    // o*stride + tap >= pad  and  o*stride + tap < n + pad
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi_excl = if n + pad > tap {
        (n + pad - tap).div_ceil(stride)
    } else {
        0
    };
    (lo, hi_excl.min(out_n).max(lo))
}

fn conv_forward<T: Real>(input: &Tensor<T>, spec: &LayerSpec, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    let (in_ch, out_ch, k, stride, pad) = conv_geometry(spec);
    if c != in_ch {
        return shape_err(format!("layer {}: expected {in_ch} input channels, got {c}", spec.name));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return shape_err(format!("layer {}: input {h}x{w} smaller than kernel", spec.name));
    }
    let (oh, ow) = spec.output_hw(h, w);
    let wt = params.weight.data();
    let bias = params.bias.data();
    let mut out = Tensor::zeros(&[out_ch, oh, ow]);
    for o in 0..out_ch {
        let oplane = out.plane_mut(o);
        oplane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..in_ch {
            let iplane = input.plane(i);
            for ky in 0..k {
                let (ys, ye) = valid_range(h, oh, ky, pad, stride);
                for kx in 0..k {
                    let wv = wt[((o * in_ch + i) * k + ky) * k + kx];
                    let (xs, xe) = valid_range(w, ow, kx, pad, stride);
                    if xs >= xe {
                        continue;
                    }
                    for y in ys..ye {
                        let iy = y * stride + ky - pad;
                        let orow = &mut oplane[y * ow + xs..y * ow + xe];
                        let ix0 = xs * stride + kx - pad;
                        if stride == 1 {
                            let irow = &iplane[iy * w + ix0..iy * w + ix0 + (xe - xs)];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        } else {
                            let irow = &iplane[iy * w..(iy + 1) * w];
                            for (j, ov) in orow.iter_mut().enumerate() {
                                *ov += wv * irow[ix0 + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv_backward<T: Real>(
    grad_out: &Tensor<T>,
    saved_input: &Tensor<T>,
    spec: &LayerSpec,
    params: &ConvParams<T>,
) -> Result<Tensor<T>> {
    let (c, h, w) = saved_input.dims3()?;
    let (in_ch, out_ch, k, stride, pad) = conv_geometry(spec);
    let (oh, ow) = spec.output_hw(h, w);
    if c != in_ch || grad_out.shape() != [out_ch, oh, ow] {
        return shape_err(format!(
            "layer {}: grad {:?} does not match forward output [{out_ch}, {oh}, {ow}]",
            spec.name,
            grad_out.shape()
        ));
    }
    let wt = params.weight.data();
    let mut gin = Tensor::zeros(&[in_ch, h, w]);
    for i in 0..in_ch {
        let gplane = gin.plane_mut(i);
        for o in 0..out_ch {
            let goplane = grad_out.plane(o);
            for ky in 0..k {
                let (ys, ye) = valid_range(h, oh, ky, pad, stride);
                for kx in 0..k {
                    let wv = wt[((o * in_ch + i) * k + ky) * k + kx];
                    let (xs, xe) = valid_range(w, ow, kx, pad, stride);
                    if xs >= xe {
                        continue;
                    }
                    for y in ys..ye {
                        let iy = y * stride + ky - pad;
                        let grow = &goplane[y * ow + xs..y * ow + xe];
                        let ix0 = xs * stride + kx - pad;
                        if stride == 1 {
                            let irow = &mut gplane[iy * w + ix0..iy * w + ix0 + (xe - xs)];
                            for (iv, &gv) in irow.iter_mut().zip(grow) {
                                *iv += wv * gv;
                            }
                        } else {
                            let irow = &mut gplane[iy * w..(iy + 1) * w];
                            for (j, &gv) in grow.iter().enumerate() {
                                irow[ix0 + j * stride] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gin)
}

fn pool_forward<T: Real>(input: &Tensor<T>, kind: PoolKind, k: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = (h / k, w / k);
    if oh == 0 || ow == 0 {
        return shape_err(format!("pool {k}x{k} on {h}x{w} input gives an empty map"));
    }
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let ip = input.plane(ch);
        let op = out.plane_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = match kind {
                    PoolKind::Avg => T::ZERO,
                    PoolKind::Max => ip[oy * k * w + ox * k],
                };
                for dy in 0..k {
                    let row = &ip[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                    for &v in row {
                        match kind {
                            PoolKind::Avg => acc += v,
                            PoolKind::Max => {
                                if v > acc {
                                    acc = v
                                }
                            }
                        }
                    }
                }
                op[oy * ow + ox] = match kind {
                    PoolKind::Avg => acc * inv,
                    PoolKind::Max => acc,
                };
            }
        }
    }
    Ok(out)
}

fn pool_backward<T: Real>(
    grad_out: &Tensor<T>,
    saved_input: &Tensor<T>,
    kind: PoolKind,
    k: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = saved_input.dims3()?;
    let (oh, ow) = (h / k, w / k);
    if grad_out.shape() != [c, oh, ow] {
        return shape_err(format!(
            "pool backward: grad {:?} does not match [{c}, {oh}, {ow}]",
            grad_out.shape()
        ));
    }
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let mut gin = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let gp = grad_out.plane(ch);
        let ip = saved_input.plane(ch);
        let dp = gin.plane_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gp[oy * ow + ox];
                match kind {
                    PoolKind::Avg => {
                        let share = g * inv;
                        for dy in 0..k {
                            let base = (oy * k + dy) * w + ox * k;
                            dp[base..base + k].iter_mut().for_each(|v| *v += share);
                        }
                    }
                    PoolKind::Max => {
                        // First maximum in row-major scan order.
                        let mut best = (oy * k) * w + ox * k;
                        for dy in 0..k {
                            for dx in 0..k {
                                let idx = (oy * k + dy) * w + ox * k + dx;
                                if ip[idx] > ip[best] {
                                    best = idx;
                                }
                            }
                        }
                        dp[best] += g;
                    }
                }
            }
        }
    }
    Ok(gin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn conv_layer(in_ch: usize, out_ch: usize, k: usize, rng: &mut ChaCha8Rng) -> Layer<f64> {
        let spec = LayerSpec::conv("c", in_ch, out_ch, k);
        let params = ConvParams {
            weight: random(&[out_ch, in_ch, k, k], rng),
            bias: random(&[out_ch], rng),
        };
        Layer::new(&spec, Some(params)).unwrap()
    }

    /// Direct nested-loop cross-correlation with zero padding.
    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (c, h, w) = x.dims3().unwrap();
        let (o, k) = (wt.shape()[0], wt.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[o, oh, ow]);
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += wt.data()[((oc * c + ic) * k + ky) * k + kx]
                                    * x.data()[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[(oc * oh + y) * ow + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn relu_forward_clamps_negatives() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![-1.0f32, 2.0, 0.0, -3.0]).unwrap();
        let y = layer_forward(&x, &Layer::Relu).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_1x1_conv_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 5, 4], &mut rng);
        let mut wt = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            wt.data_mut()[c * 3 + c] = 1.0;
        }
        let layer = Layer::new(
            &LayerSpec::conv("id", 3, 3, 1),
            Some(ConvParams {
                weight: wt,
                bias: Tensor::zeros(&[3]),
            }),
        )
        .unwrap();
        assert_eq!(layer_forward(&x, &layer).unwrap(), x);
    }

    #[test]
    fn conv3x3_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[3, 8, 8], &mut rng);
        let layer = conv_layer(3, 5, 3, &mut rng);
        let Layer::Conv { params, .. } = &layer else {
            unreachable!()
        };
        let expect = naive_conv(&x, &params.weight, &params.bias, 1, 1);
        let got = layer_forward(&x, &layer).unwrap();
        assert_eq!(got.shape(), expect.shape());
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn strided_conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 9, 7], &mut rng);
        let spec = LayerSpec {
            name: "s".into(),
            kind: LayerKind::Conv {
                in_ch: 2,
                out_ch: 3,
                k: 3,
                stride: 2,
                pad: 1,
            },
        };
        let params = ConvParams {
            weight: random(&[3, 2, 3, 3], &mut rng),
            bias: random(&[3], &mut rng),
        };
        let expect = naive_conv(&x, &params.weight, &params.bias, 2, 1);
        let layer = Layer::new(&spec, Some(params)).unwrap();
        let got = layer_forward(&x, &layer).unwrap();
        assert_eq!(got.shape(), expect.shape());
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = conv_layer(3, 4, 3, &mut rng);
        let x = random(&[2, 6, 6], &mut rng);
        assert!(matches!(layer_forward(&x, &layer), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_backward_kills_dead_units() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![-1.0f64, -2.0, -0.5, -3.0]).unwrap();
        let g = Tensor::full(&[1, 2, 2], 5.0);
        let gi = layer_backward_input(&g, &x, &Layer::Relu).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn avg_pool_backward_splits_uniformly() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2]);
        let g = Tensor::from_vec(&[1, 1, 1], vec![4.0]).unwrap();
        let gi = layer_backward_input(
            &g,
            &x,
            &Layer::Pool {
                kind: PoolKind::Avg,
                k: 2,
            },
        )
        .unwrap();
        assert_eq!(gi.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0f64, 3.0, 3.0, 2.0]).unwrap();
        let layer = Layer::Pool {
            kind: PoolKind::Max,
            k: 2,
        };
        assert_eq!(layer_forward(&x, &layer).unwrap().data(), &[3.0]);
        let g = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let gi = layer_backward_input(&g, &x, &layer).unwrap();
        assert_eq!(gi.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    /// Central finite difference of `<g, forward(x + t d)>` at t = 0.
    fn fd_check(layer: &Layer<f64>, shape: &[usize], seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(shape, &mut rng);
        let y = layer_forward(&x, layer).unwrap();
        let g = random(y.shape(), &mut rng);
        let d = random(shape, &mut rng);
        let analytic = layer_backward_input(&g, &x, layer).unwrap().dot(&d).unwrap();
        let t = 1e-6;
        let shift = |s: f64| {
            let mut xs = x.clone();
            for (a, &b) in xs.data_mut().iter_mut().zip(d.data()) {
                *a += s * b;
            }
            layer_forward(&xs, layer).unwrap().dot(&g).unwrap()
        };
        let numeric = (shift(t) - shift(-t)) / (2.0 * t);
        (analytic - numeric).abs() / analytic.abs().max(1e-12)
    }

    #[test]
    fn backward_matches_finite_differences_for_every_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let conv = conv_layer(3, 4, 3, &mut rng);
        assert!(fd_check(&conv, &[3, 6, 6], 1) <= 1e-6);
        assert!(fd_check(&Layer::Relu, &[2, 6, 6], 2) <= 1e-6);
        assert!(
            fd_check(
                &Layer::Pool {
                    kind: PoolKind::Avg,
                    k: 2
                },
                &[2, 6, 6],
                3
            ) <= 1e-6
        );
        assert!(
            fd_check(
                &Layer::Pool {
                    kind: PoolKind::Max,
                    k: 2
                },
                &[2, 6, 6],
                4
            ) <= 1e-6
        );
        let strided = Layer::new(
            &LayerSpec {
                name: "s".into(),
                kind: LayerKind::Conv {
                    in_ch: 2,
                    out_ch: 2,
                    k: 3,
                    stride: 2,
                    pad: 1,
                },
            },
            Some(ConvParams {
                weight: random(&[2, 2, 3, 3], &mut rng),
                bias: random(&[2], &mut rng),
            }),
        )
        .unwrap();
        assert!(fd_check(&strided, &[2, 7, 6], 5) <= 1e-6);
    }

    #[test]
    fn odd_pool_input_drops_remainder() {
        let x = Tensor::<f64>::full(&[1, 5, 5], 1.0);
        let y = layer_forward(
            &x,
            &Layer::Pool {
                kind: PoolKind::Avg,
                k: 2,
            },
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
    }
}
