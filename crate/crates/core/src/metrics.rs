//! Image fidelity metrics (PSNR, SSIM), the blockwise Gram style distance,
//! and the identity-test runner.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::extractor::{ExtractorSpec, Network};
use crate::image::Image;
use crate::localized::{stats_pass, Executor, GridParams};
use crate::pipeline::{multiscale_transfer, Outcome, Progress, RunConfig};

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return shape_err(format!("image dims differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all channels; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering with the SSIM window.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, t) in taps.iter().enumerate() {
            let r = &rows[(y + i) * ow..(y + i + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(r) {
                *o += t * v;
            }
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of the Rec. 601 luma planes, 11x11 Gaussian window
/// (sigma 1.5), `K1 = 0.01`, `K2 = 0.03`, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return shape_err(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let (ya, yb) = (a.luma(), b.luma());
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let (mu_a, _, _) = filter_valid(&ya, h, w, &taps);
    let (mu_b, _, _) = filter_valid(&yb, h, w, &taps);
    let (saa, _, _) = filter_valid(&prod(&ya, &ya), h, w, &taps);
    let (sbb, _, _) = filter_valid(&prod(&yb, &yb), h, w, &taps);
    let (sab, _, _) = filter_valid(&prod(&ya, &yb), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len() as f64;
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GramDistance {
    /// `sum_L w_L |G_L(x) - G_L(v)|_F^2` with `w_L = style / C_L^2`.
    pub weighted: f64,
    /// Same sum with `w_L = 1`.
    pub unweighted: f64,
}

/// Gram style distance between `x` and `v`, using blockwise statistics.
pub fn gram_distance(
    x: &Image,
    v: &Image,
    spec: &ExtractorSpec,
    grid: GridParams,
    style_weight: f64,
    exec: &Executor,
) -> Result<GramDistance> {
    let net = Network::<f64>::new(spec)?;
    let sx = stats_pass(&net, &x.to_tensor::<f64>(), grid, exec)?;
    let sv = stats_pass(&net, &v.to_tensor::<f64>(), grid, exec)?;
    let mut d = GramDistance {
        weighted: 0.0,
        unweighted: 0.0,
    };
    for (tap, a) in &sx {
        let b = &sv[tap];
        let sq: f64 = a.gram.iter().zip(&b.gram).map(|(p, q)| (p - q) * (p - q)).sum();
        d.unweighted += sq;
        d.weighted += style_weight / (a.channels * a.channels) as f64 * sq;
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentityReport {
    /// `+inf` when the output equals the original exactly.
    pub psnr: f64,
    pub ssim: f64,
    pub gram_distance: GramDistance,
    /// Gram distance of the last scale's starting point.
    pub initial_gram_distance: GramDistance,
    pub wall_time: f64,
    pub config_hash: String,
}

impl IdentityReport {
    /// Single-line JSON; an infinite PSNR is written as the string `"inf"`.
    pub fn to_json_line(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v["psnr"] = if self.psnr.is_infinite() {
            serde_json::Value::from("inf")
        } else {
            serde_json::Value::from(self.psnr)
        };
        v.to_string()
    }

    /// Appends one CSV row, writing the header when the file is new.
    pub fn append_csv(&self, path: impl AsRef<Path>, style_id: &str) -> Result<()> {
        let path = path.as_ref();
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "style_id,psnr,ssim,gram,seconds,config_hash")?;
        }
        writeln!(
            f,
            "{},{},{},{},{},{}",
            style_id.replace(',', "_"),
            if self.psnr.is_infinite() {
                "inf".to_string()
            } else {
                self.psnr.to_string()
            },
            self.ssim,
            self.gram_distance.weighted,
            self.wall_time,
            self.config_hash
        )?;
        Ok(())
    }
}

/// Runs transfer with the style image as both content and style and
/// measures how faithfully it is reproduced.
pub fn identity_test(
    style: &Image,
    spec: &ExtractorSpec,
    cfg: &RunConfig,
    progress: &mut dyn FnMut(&Progress),
) -> Result<(IdentityReport, Outcome)> {
    let start = Instant::now();
    let out = multiscale_transfer(style, style, spec, cfg, None, progress)?;
    let wall_time = start.elapsed().as_secs_f64();
    let exec = Executor::new(cfg.threads)?;
    let report = IdentityReport {
        psnr: psnr(&out.image, style)?,
        ssim: ssim(&out.image, style)?,
        gram_distance: gram_distance(&out.image, style, spec, cfg.grid, cfg.weights.style, &exec)?,
        initial_gram_distance: gram_distance(&out.last_init, style, spec, cfg.grid, cfg.weights.style, &exec)?,
        wall_time,
        config_hash: out.run_hash.clone(),
    };
    Ok((report, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::extractor::tinynet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..3 * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(8, 9, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let a = Image::constant(5, 5, 0.4).unwrap();
        let b = Image::constant(5, 5, 0.5).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(psnr(&a, &random_image(5, 6, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn psnr_matches_pixel_loop() {
        let (a, b) = (random_image(13, 17, 3), random_image(13, 17, 4));
        let mut se = 0.0;
        let mut n = 0.0;
        for c in 0..3 {
            for y in 0..13 {
                for x in 0..17 {
                    let d = a.plane(c)[y * 17 + x] - b.plane(c)[y * 17 + x];
                    se += d * d;
                    n += 1.0;
                }
            }
        }
        let want = 10.0 * (1.0 / (se / n)).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-9);
    }

    /// Direct per-window evaluation with a 2-D kernel.
    fn ssim_direct(a: &Image, b: &Image) -> f64 {
        let (h, w) = a.dims();
        let (ya, yb) = (a.luma(), b.luma());
        let k = 11;
        let mut kern = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                kern[i * k + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let s: f64 = kern.iter().sum();
        kern.iter_mut().for_each(|v| *v /= s);
        let mut total = 0.0;
        let mut count = 0.0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wgt = kern[i * k + j];
                        let (p, q) = (ya[(y + i) * w + x + j], yb[(y + i) * w + x + j]);
                        ma += wgt * p;
                        mb += wgt * q;
                        saa += wgt * p * p;
                        sbb += wgt * q * q;
                        sab += wgt * p * q;
                    }
                }
                let (c1, c2) = (0.0001, 0.0009);
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn ssim_matches_direct_implementation() {
        let (a, b) = (random_image(20, 24, 5), random_image(20, 24, 6));
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_direct(&a, &b)).abs() < 1e-6);
        assert!((got - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_inverse_and_size() {
        let a = random_image(16, 16, 7);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bin: Vec<f64> = (0..16 * 16)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
            .collect();
        let data: Vec<f64> = bin.iter().chain(&bin).chain(&bin).copied().collect();
        let a = Image::new(16, 16, data.clone()).unwrap();
        let inv = Image::new(16, 16, data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 0.0);
        let small = random_image(10, 30, 9);
        assert!(matches!(ssim(&small, &small), Err(Error::Shape(_))));
    }

    #[test]
    fn gram_distance_properties() {
        let spec = tinynet(0);
        let exec = Executor::new(1).unwrap();
        let grid = GridParams { block: 16, margin: 16 };
        let (x, v) = (random_image(32, 40, 10), random_image(36, 28, 11));
        assert_eq!(gram_distance(&x, &x, &spec, grid, 1.0, &exec).unwrap().unweighted, 0.0);
        let a = gram_distance(&x, &v, &spec, grid, 1.0, &exec).unwrap();
        let b = gram_distance(&v, &x, &spec, grid, 1.0, &exec).unwrap();
        assert!(a.weighted > 0.0);
        assert!((a.weighted - b.weighted).abs() <= 1e-6 * a.weighted);
        assert!(a.unweighted > a.weighted);
    }

    #[test]
    fn report_serialisation() {
        let r = IdentityReport {
            psnr: f64::INFINITY,
            ssim: 1.0,
            gram_distance: GramDistance {
                weighted: 0.0,
                unweighted: 0.0,
            },
            initial_gram_distance: GramDistance {
                weighted: 0.0,
                unweighted: 0.0,
            },
            wall_time: 0.5,
            config_hash: "abc".into(),
        };
        let line = r.to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["psnr"], "inf");
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("r.csv");
        r.append_csv(&csv, "a").unwrap();
        r.append_csv(&csv, "b").unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("style_id,psnr,ssim,gram,seconds,config_hash\n"));
    }

    #[test]
    fn zero_iteration_identity_is_exact() {
        let img = random_image(32, 32, 12);
        let cfg = RunConfig {
            iters: Some(vec![0]),
            dtype: crate::tensor::DType::F64,
            ..Default::default()
        };
        let (r, _) = identity_test(&img, &tinynet(0), &cfg, &mut |_| {}).unwrap();
        assert_eq!(r.psnr, f64::INFINITY);
        assert_eq!(r.ssim, 1.0);
    }
}
