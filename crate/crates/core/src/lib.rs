//! Out-of-core neural style transfer and texture synthesis.
//!
//! Style statistics and their gradients are computed block by block over a
//! stride-aligned grid, yet the loss gradient equals the one a whole-image
//! evaluation would produce. Memory therefore scales with the block size,
//! not with the image.
//!
//! ```no_run
//! use tilestyle::{extractor::tinynet, Image, RunConfig, multiscale_transfer};
//!
//! let content = Image::load("content.png")?;
//! let style = Image::load("style.png")?;
//! let cfg = RunConfig { n_scales: 2, ..Default::default() };
//! let out = multiscale_transfer(&content, &style, &tinynet(0), &cfg, None, &mut |_| {})?;
//! out.image.save("out.png", &[])?;
//! # Ok::<(), tilestyle::Error>(())
//! ```

pub mod container;
pub mod error;
pub mod extractor;
pub mod fixtures;
pub mod image;
pub mod layers;
pub mod localized;
pub mod memtrack;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod stats;
pub mod tensor;
pub mod tiling;

pub use error::{Error, Result};
pub use extractor::{ExtractorSpec, Network, TapGeometry};
pub use image::Image;
pub use localized::{stats_pass, Executor, GridParams, LossGrad, TransferProblem};
pub use metrics::{gram_distance, identity_test, psnr, ssim, IdentityReport};
pub use optim::{minimize, LbfgsConfig, Residency};
pub use pipeline::{make_schedule, multiscale_transfer, texture_synthesize, Mode, RunConfig, Schedule};
pub use stats::{LayerStats, LossWeights, WeightConfig};
pub use tensor::{DType, Real, Tensor};
pub use tiling::{BlockGrid, Rect};
