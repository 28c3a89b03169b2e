//! Python bindings: images, run configuration, the transfer and synthesis
//! drivers, gradient checking, style statistics and quality metrics.
//!
//! Images cross the boundary as flat lists of floats in `[0, 1]`, planar
//! `(3, height, width)` order, plus their dims.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use tilestyle::extractor::tinynet;
use tilestyle::localized::gradient_check as gradient_check_impl;
use tilestyle::pipeline::recommended_scales as recommended_scales_impl;
use tilestyle::{fixtures, DType, Error, Executor, GridParams, Mode, Network, WeightConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Open { .. } | Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

/// An RGB image with values in `[0, 1]`.
#[pyclass(name = "Image", module = "tilestyle_py", skip_from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: tilestyle::Image,
}

#[pymethods]
impl PyImage {
    /// `data` holds `3 * height * width` floats in planar channel order.
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyImage {
            inner: tilestyle::Image::new(height, width, data).map_err(to_py)?,
        })
    }

    /// Builds an image from `height * width * 3` floats in row-major RGB order.
    #[staticmethod]
    fn from_interleaved(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyImage {
            inner: tilestyle::Image::from_interleaved(height, width, &data).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyImage {
            inner: tilestyle::Image::load(path).map_err(to_py)?,
        })
    }

    /// Saves as 8-bit PNG, or JPEG for `.jpg`/`.jpeg` paths.
    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path, &[]).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Planar `(3, height, width)` values.
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    /// Row-major RGB values.
    fn to_interleaved(&self) -> Vec<f64> {
        self.inner.to_interleaved()
    }

    fn __eq__(&self, other: &PyImage) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Image(height={}, width={})", self.inner.height(), self.inner.width())
    }
}

/// Seeded uniform noise image.
#[pyfunction]
fn noise(height: usize, width: usize, seed: u64) -> PyImage {
    PyImage {
        inner: fixtures::noise(height, width, seed),
    }
}

/// Seeded smooth image made of low-frequency waves.
#[pyfunction]
fn smooth(height: usize, width: usize, seed: u64) -> PyImage {
    PyImage {
        inner: fixtures::smooth(height, width, seed),
    }
}

/// Seeded painting-like image with colour blobs and brush strokes.
#[pyfunction]
fn painting(height: usize, width: usize, seed: u64) -> PyImage {
    PyImage {
        inner: fixtures::painting(height, width, seed),
    }
}

/// Settings of a transfer, synthesis or identity run on the built-in
/// extractor.
#[pyclass(name = "RunConfig", module = "tilestyle_py", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    n_scales: usize,
    mode: String,
    iters: Option<Vec<usize>>,
    block: usize,
    margin: usize,
    seed: u64,
    dtype: String,
    threads: usize,
    content_weight: f64,
    style_weight: f64,
    mean_weight: f64,
    std_weight: f64,
    net_seed: u64,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (
        n_scales = 1, mode = "fast", iters = None, block = 512, margin = 256, seed = 0, dtype = "f32",
        threads = 0, content_weight = 1.0, style_weight = 1.0, mean_weight = 1e3, std_weight = 1e3, net_seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_scales: usize,
        mode: &str,
        iters: Option<Vec<usize>>,
        block: usize,
        margin: usize,
        seed: u64,
        dtype: &str,
        threads: usize,
        content_weight: f64,
        style_weight: f64,
        mean_weight: f64,
        std_weight: f64,
        net_seed: u64,
    ) -> PyResult<Self> {
        parse::<Mode>(mode)?;
        parse::<DType>(dtype)?;
        Ok(PyRunConfig {
            n_scales,
            mode: mode.to_string(),
            iters,
            block,
            margin,
            seed,
            dtype: dtype.to_string(),
            threads,
            content_weight,
            style_weight,
            mean_weight,
            std_weight,
            net_seed,
        })
    }

    /// Iteration counts per scale after applying `iters`.
    fn schedule(&self) -> PyResult<Vec<usize>> {
        Ok(self.to_core()?.schedule().map_err(to_py)?.iters)
    }
}

impl PyRunConfig {
    fn to_core(&self) -> PyResult<tilestyle::RunConfig> {
        Ok(tilestyle::RunConfig {
            n_scales: self.n_scales,
            mode: parse(&self.mode)?,
            iters: self.iters.clone(),
            grid: GridParams {
                block: self.block,
                margin: self.margin,
            },
            seed: self.seed,
            dtype: parse(&self.dtype)?,
            threads: self.threads,
            weights: WeightConfig {
                content: self.content_weight,
                style: self.style_weight,
                mean: self.mean_weight,
                std: self.std_weight,
            },
            ..Default::default()
        })
    }
}

fn config_or_default(config: Option<PyRunConfig>) -> PyResult<PyRunConfig> {
    match config {
        Some(c) => Ok(c),
        None => PyRunConfig::new(1, "fast", None, 512, 256, 0, "f32", 0, 1.0, 1.0, 1e3, 1e3, 0),
    }
}

/// Iteration counts and history sizes per scale.
#[pyfunction]
#[pyo3(signature = (n_scales, mode = "fast"))]
fn schedule(n_scales: usize, mode: &str) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let s = tilestyle::make_schedule(n_scales, parse(mode)?).map_err(to_py)?;
    Ok((s.iters, s.histories))
}

/// Scale count whose first scale has its shorter side closest to `target`.
#[pyfunction]
#[pyo3(signature = (height, width, target = 200))]
fn recommended_scales(height: usize, width: usize, target: usize) -> usize {
    recommended_scales_impl(height, width, target)
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    tilestyle::psnr(&a.inner, &b.inner).map_err(to_py)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    tilestyle::ssim(&a.inner, &b.inner).map_err(to_py)
}

/// Relative L2 error between block-wise and whole-image gradients on seeded
/// noise images, using the built-in extractor.
#[pyfunction]
#[pyo3(signature = (height, width, block = 64, margin = 16, dtype = "f64", seed = 0, threads = 0, net_seed = 0))]
#[allow(clippy::too_many_arguments)]
fn gradient_check(
    py: Python<'_>,
    height: usize,
    width: usize,
    block: usize,
    margin: usize,
    dtype: &str,
    seed: u64,
    threads: usize,
    net_seed: u64,
) -> PyResult<f64> {
    let dtype: DType = parse(dtype)?;
    let spec = tinynet(net_seed);
    let params = GridParams { block, margin };
    py.detach(|| match dtype {
        DType::F32 => gradient_check_impl::<f32>(&spec, (height, width), params, seed, threads),
        DType::F64 => gradient_check_impl::<f64>(&spec, (height, width), params, seed, threads),
    })
    .map_err(to_py)
}

/// Statistics of one style tap.
#[pyclass(name = "LayerStats", module = "tilestyle_py", get_all)]
struct PyLayerStats {
    channels: usize,
    n_p: u64,
    mean: Vec<f64>,
    std: Vec<f64>,
    /// Row-major `channels x channels`.
    gram: Vec<f64>,
}

/// Block-wise style statistics of `image` for every style tap.
#[pyfunction]
#[pyo3(signature = (image, block = 512, margin = 256, threads = 0, net_seed = 0))]
fn style_stats(
    py: Python<'_>,
    image: &PyImage,
    block: usize,
    margin: usize,
    threads: usize,
    net_seed: u64,
) -> PyResult<BTreeMap<String, PyLayerStats>> {
    let x = image.inner.to_tensor::<f64>();
    let stats = py
        .detach(|| {
            let net = Network::<f64>::new(&tinynet(net_seed))?;
            tilestyle::stats_pass(&net, &x, GridParams { block, margin }, &Executor::new(threads)?)
        })
        .map_err(to_py)?;
    Ok(stats
        .into_iter()
        .map(|(tap, s)| {
            (
                tap,
                PyLayerStats {
                    channels: s.channels,
                    n_p: s.n_p,
                    mean: s.mean,
                    std: s.std,
                    gram: s.gram,
                },
            )
        })
        .collect())
}

/// Multiscale style transfer of `content` towards `style`.
#[pyfunction]
#[pyo3(signature = (content, style, config = None))]
fn transfer(py: Python<'_>, content: &PyImage, style: &PyImage, config: Option<PyRunConfig>) -> PyResult<PyImage> {
    let config = config_or_default(config)?;
    let cfg = config.to_core()?;
    let spec = tinynet(config.net_seed);
    let (u, v) = (content.inner.clone(), style.inner.clone());
    let out = py
        .detach(|| tilestyle::multiscale_transfer(&u, &v, &spec, &cfg, None, &mut |_| {}))
        .map_err(to_py)?;
    Ok(PyImage { inner: out.image })
}

/// Texture synthesis from `style`, starting from seeded noise. The content
/// weight is ignored.
#[pyfunction]
#[pyo3(signature = (style, config = None))]
fn synthesize(py: Python<'_>, style: &PyImage, config: Option<PyRunConfig>) -> PyResult<PyImage> {
    let mut config = config_or_default(config)?;
    config.content_weight = 0.0;
    let cfg = config.to_core()?;
    let spec = tinynet(config.net_seed);
    let v = style.inner.clone();
    let out = py
        .detach(|| tilestyle::texture_synthesize(&v, &spec, &cfg, None, &mut |_| {}))
        .map_err(to_py)?;
    Ok(PyImage { inner: out.image })
}

/// Transfers `style` onto itself. Returns the quality report as a dict and
/// the reconstructed image.
#[pyfunction]
#[pyo3(signature = (style, config = None))]
fn identity<'py>(
    py: Python<'py>,
    style: &PyImage,
    config: Option<PyRunConfig>,
) -> PyResult<(Bound<'py, PyDict>, PyImage)> {
    let config = config_or_default(config)?;
    let cfg = config.to_core()?;
    let spec = tinynet(config.net_seed);
    let v = style.inner.clone();
    let (r, out) = py
        .detach(|| tilestyle::identity_test(&v, &spec, &cfg, &mut |_| {}))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("psnr", r.psnr)?;
    d.set_item("ssim", r.ssim)?;
    d.set_item("gram_distance", r.gram_distance.weighted)?;
    d.set_item("gram_distance_unweighted", r.gram_distance.unweighted)?;
    d.set_item("initial_gram_distance", r.initial_gram_distance.weighted)?;
    d.set_item("wall_time", r.wall_time)?;
    d.set_item("config_hash", r.config_hash)?;
    Ok((d, PyImage { inner: out.image }))
}

#[pymodule]
fn tilestyle_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyLayerStats>()?;
    m.add_function(wrap_pyfunction!(noise, m)?)?;
    m.add_function(wrap_pyfunction!(smooth, m)?)?;
    m.add_function(wrap_pyfunction!(painting, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(recommended_scales, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(style_stats, m)?)?;
    m.add_function(wrap_pyfunction!(transfer, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(identity, m)?)?;
    Ok(())
}
