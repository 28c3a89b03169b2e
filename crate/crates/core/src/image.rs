//! RGB images in `[0, 1]`, codecs, and the two resamplers used between scales.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Planar RGB image, values nominally in `[0, 1]`.
///
/// Values are kept in f64 so that iterates carried between scales survive
/// an f32 or f64 pipeline unchanged. Clamping happens only on encode.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return shape_err(format!("image must be at least 1x1, got {height}x{width}"));
        }
        if data.len() != 3 * height * width {
            return shape_err(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                3 * height * width,
                data.len()
            ));
        }
        Ok(Image { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Image::new(height, width, vec![value; 3 * height * width])
    }

    /// Builds from interleaved `HWC` values.
    pub fn from_interleaved(height: usize, width: usize, hwc: &[f64]) -> Result<Self> {
        if hwc.len() != 3 * height * width {
            return shape_err("interleaved buffer length does not match dims");
        }
        let n = height * width;
        let mut data = vec![0.0; 3 * n];
        for (p, px) in hwc.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + p] = px[c];
            }
        }
        Image::new(height, width, data)
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(3 * n);
        for p in 0..n {
            for c in 0..3 {
                out.push(self.data[c * n + p]);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Planar `CHW` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[3, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("image dims are consistent")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return shape_err(format!("image tensor must have 3 channels, got {c}"));
        }
        Image::new(h, w, t.data().iter().map(|v| v.to_f64()).collect())
    }

    /// Rec. 601 luma plane.
    pub fn luma(&self) -> Vec<f64> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    /// Stable content digest (dims + raw f64 bits).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Decodes a PNG or JPEG. 8-bit samples map to `v / 255`, 16-bit to `v / 65535`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| Error::Open {
            what: "image",
            path: path.to_path_buf(),
            source,
        })?;
        let reader = image::ImageReader::new(std::io::BufReader::new(file))
            .with_guessed_format()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let img = reader
            .decode()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let hwc: Vec<f64> = match img.color() {
            image::ColorType::Rgb16 | image::ColorType::Rgba16 | image::ColorType::L16 | image::ColorType::La16 => img
                .to_rgb16()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 65535.0)
                .collect(),
            _ => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        };
        Image::from_interleaved(h, w, &hwc)
    }

    /// 8-bit encode; clamps to `[0, 1]`. `.jpg`/`.jpeg` paths are JPEG
    /// (quality 95, text chunks dropped), anything else is PNG.
    pub fn save(&self, path: impl AsRef<Path>, text: &[(String, String)]) -> Result<()> {
        let path = path.as_ref();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        let bytes: Vec<u8> = self
            .to_interleaved()
            .into_iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        if matches!(ext.as_deref(), Some("jpg") | Some("jpeg")) {
            let out = BufWriter::new(File::create(path)?);
            let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(out, 95);
            enc.encode(
                &bytes,
                self.width as u32,
                self.height as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| Error::Format(e.to_string()))?;
            return Ok(());
        }
        self.write_png(path, png::BitDepth::Eight, &bytes, text)
    }

    /// 16-bit PNG encode (checkpoints); clamps to `[0, 1]`.
    pub fn save_png16(&self, path: impl AsRef<Path>, text: &[(String, String)]) -> Result<()> {
        let mut bytes = Vec::with_capacity(6 * self.height * self.width);
        for v in self.to_interleaved() {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            bytes.extend_from_slice(&q.to_be_bytes());
        }
        self.write_png(path.as_ref(), png::BitDepth::Sixteen, &bytes, text)
    }

    fn write_png(&self, path: &Path, depth: png::BitDepth, bytes: &[u8], text: &[(String, String)]) -> Result<()> {
        let out = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(depth);
        for (k, v) in text {
            enc.add_text_chunk(k.clone(), v.clone())
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(bytes)
            .map_err(|e| Error::Format(e.to_string()))?;
        writer.finish().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}

/// Reads the `tEXt` chunks of a PNG file.
pub fn read_png_text(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    let reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|c| (c.keyword.clone(), c.text.clone()))
        .collect())
}

/// Output dims of [`resize_down`].
pub fn downscaled_dims(h: usize, w: usize, factor: usize) -> (usize, usize) {
    (h.div_ceil(factor), w.div_ceil(factor))
}

/// Area-average downscale: output dims are `ceil(dim / factor)` and each
/// output pixel is the mean of the source pixels in its box (boxes on the
/// right/bottom edge may be partial).
pub fn resize_down(img: &Image, factor: usize) -> Image {
    assert!(factor >= 1, "downscale factor must be >= 1");
    if factor == 1 {
        return img.clone();
    }
    let (h, w) = img.dims();
    let (oh, ow) = downscaled_dims(h, w, factor);
    let mut data = vec![0.0; 3 * oh * ow];
    for c in 0..3 {
        let src = img.plane(c);
        let dst = &mut data[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = (oy * factor, ((oy + 1) * factor).min(h));
            for ox in 0..ow {
                let (x0, x1) = (ox * factor, ((ox + 1) * factor).min(w));
                let mut s = 0.0;
                for y in y0..y1 {
                    s += src[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                dst[oy * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Image::new(oh, ow, data).expect("dims are consistent")
}

/// Bilinear upscale with half-pixel-centred sampling. `target` defaults to
/// `(2h, 2w)`; pass the next scale's exact dims to absorb ceil rounding.
pub fn resize_up2(img: &Image, target: Option<(usize, usize)>) -> Image {
    let (h, w) = img.dims();
    let (oh, ow) = target.unwrap_or((2 * h, 2 * w));
    assert!(oh >= 1 && ow >= 1, "target dims must be positive");
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut data = vec![0.0; 3 * oh * ow];
    for c in 0..3 {
        let src = img.plane(c);
        let dst = &mut data[c * oh * ow..(c + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Image::new(oh, ow, data).expect("dims are consistent")
}
