//! Block partition of an image and the image-to-feature crop arithmetic.
//!
//! The grid is laid over an image whose dimensions are already a multiple
//! of the deepest tap stride (see [`stride_padded_dims`]). Inner rectangles
//! tile that image exactly; each block is evaluated on its inner rectangle
//! grown by `margin` on every side, clipped to the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::TapGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.w <= self.x + self.w
            && other.y + other.h <= self.y + self.h
    }
}

/// Context pixels actually present on each side of a block's inner rect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Margins {
    pub left: usize,
    pub top: usize,
    pub right: usize,
    pub bottom: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub index: usize,
    pub inner: Rect,
    pub padded: Rect,
    pub present_margin: Margins,
}

/// Image dims rounded up to a multiple of `stride`.
pub fn stride_padded_dims(h: usize, w: usize, stride: usize) -> (usize, usize) {
    (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGrid {
    pub image_h: usize,
    pub image_w: usize,
    pub block: usize,
    pub margin: usize,
    /// Deepest tap stride the grid is aligned to.
    pub stride: usize,
}

impl BlockGrid {
    pub const DEFAULT_BLOCK: usize = 512;
    pub const DEFAULT_MARGIN: usize = 256;

    pub fn new(image_h: usize, image_w: usize, block: usize, margin: usize, stride: usize) -> Result<Self> {
        if image_h == 0 || image_w == 0 {
            return Err(Error::Geometry(format!("empty image {image_h}x{image_w}")));
        }
        if stride == 0 || block < stride || !block.is_multiple_of(stride) || !margin.is_multiple_of(stride) {
            return Err(Error::Geometry(format!(
                "block {block} and margin {margin} must be multiples of the deepest stride {stride} (block >= stride)"
            )));
        }
        Ok(BlockGrid {
            image_h,
            image_w,
            block,
            margin,
            stride,
        })
    }

    pub fn rows(&self) -> usize {
        self.image_h.div_ceil(self.block)
    }

    pub fn cols(&self) -> usize {
        self.image_w.div_ceil(self.block)
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self, index: usize) -> Block {
        let (r, c) = (index / self.cols(), index % self.cols());
        let x = c * self.block;
        let y = r * self.block;
        let inner = Rect::new(x, y, self.block.min(self.image_w - x), self.block.min(self.image_h - y));
        let left = self.margin.min(inner.x);
        let top = self.margin.min(inner.y);
        let right = self.margin.min(self.image_w - (inner.x + inner.w));
        let bottom = self.margin.min(self.image_h - (inner.y + inner.h));
        Block {
            index,
            inner,
            padded: Rect::new(
                inner.x - left,
                inner.y - top,
                inner.w + left + right,
                inner.h + top + bottom,
            ),
            present_margin: Margins {
                left,
                top,
                right,
                bottom,
            },
        }
    }

    /// Blocks in row-major order.
    pub fn partition(&self) -> Vec<Block> {
        (0..self.len()).map(|i| self.block(i)).collect()
    }
}

/// Where a block's inner rect lands in the block's own feature map at a tap.
pub fn feature_inner_crop(b: &Block, g: &TapGeometry) -> Result<Rect> {
    let s = g.stride;
    let m = b.present_margin;
    if !m.left.is_multiple_of(s)
        || !m.top.is_multiple_of(s)
        || !b.inner.x.is_multiple_of(s)
        || !b.inner.y.is_multiple_of(s)
    {
        return Err(Error::Geometry(format!(
            "block {} margin/offset not aligned to tap stride {s}",
            b.index
        )));
    }
    Ok(Rect::new(
        m.left / s,
        m.top / s,
        b.inner.w.div_ceil(s),
        b.inner.h.div_ceil(s),
    ))
}
