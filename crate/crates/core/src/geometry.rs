//! Boxes, grayscale images, area-factor crops and patch-grid token masks.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Axis-aligned box; `(x, y)` is the top-left corner, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        debug_assert!(w >= 0.0 && h >= 0.0, "negative box size");
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn from_corners(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], (c[2] - c[0]).max(0.0), (c[3] - c[1]).max(0.0))
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x, self.y, self.x + self.w, self.y + self.h]
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let h = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        let a = self.corners();
        let b = other.corners();
        BBox::from_corners([
            a[0].min(b[0]),
            a[1].min(b[1]),
            a[2].max(b[2]),
            a[3].max(b[3]),
        ])
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if a.area() <= 0.0 && b.area() <= 0.0 {
        return Err(Error::DegenerateBox(format!("iou of {a:?} and {b:?}")));
    }
    let inter = a.intersection_area(b);
    Ok(inter / (a.area() + b.area() - inter))
}

/// Generalized IoU: `IoU − (|hull| − |union|) / |hull|`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    let i = iou(a, b)?;
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    Ok(i - (hull - union) / hull)
}

/// Single-channel image, row-major, intensities nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("image", &[height, width], &[data.len()]));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel value with zero padding outside the image.
    pub fn get_padded(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    /// Bilinear sample at continuous coordinates where pixel centers sit on
    /// integers; samples outside the image blend with zero.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut v = 0.0;
        if (1.0 - fx) * (1.0 - fy) != 0.0 {
            v += (1.0 - fx) * (1.0 - fy) * self.get_padded(x0, y0);
        }
        if fx * (1.0 - fy) != 0.0 {
            v += fx * (1.0 - fy) * self.get_padded(x0 + 1, y0);
        }
        if (1.0 - fx) * fy != 0.0 {
            v += (1.0 - fx) * fy * self.get_padded(x0, y0 + 1);
        }
        if fx * fy != 0.0 {
            v += fx * fy * self.get_padded(x0 + 1, y0 + 1);
        }
        v
    }
}

/// Maps between source-image pixels and a square crop of `out_size` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    /// Top-left corner of the source window.
    pub origin_x: f64,
    pub origin_y: f64,
    /// Source pixels per crop pixel.
    pub scale: f64,
    pub out_size: usize,
}

impl CropTransform {
    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x - self.origin_x) / self.scale,
            (b.y - self.origin_y) / self.scale,
            b.w / self.scale,
            b.h / self.scale,
        )
    }

    pub fn to_image(&self, b: &BBox) -> BBox {
        BBox::new(
            b.x * self.scale + self.origin_x,
            b.y * self.scale + self.origin_y,
            b.w * self.scale,
            b.h * self.scale,
        )
    }

    /// Side of the source window in pixels.
    pub fn window(&self) -> f64 {
        self.scale * self.out_size as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub image: GrayImage,
    /// The input box expressed in crop pixels.
    pub bbox: BBox,
    pub transform: CropTransform,
}

/// Square window of side `factor·sqrt(w·h)` centered on `bbox`, resampled
/// bilinearly to `out_size × out_size` with zero padding.
pub fn crop_with_area_factor(
    image: &GrayImage,
    bbox: &BBox,
    factor: f64,
    out_size: usize,
) -> Result<Crop> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(Error::DegenerateBox(format!("{bbox:?}")));
    }
    if !(factor > 0.0) || out_size == 0 {
        return Err(Error::Config(format!(
            "crop factor {factor}, size {out_size}"
        )));
    }
    let side = factor * (bbox.w * bbox.h).sqrt();
    let (cx, cy) = bbox.center();
    let transform = CropTransform {
        origin_x: cx - side / 2.0,
        origin_y: cy - side / 2.0,
        scale: side / out_size as f64,
        out_size,
    };
    Ok(Crop {
        image: resample(image, &transform),
        bbox: transform.to_crop(bbox),
        transform,
    })
}

/// Renders the crop described by `t`.
pub fn resample(image: &GrayImage, t: &CropTransform) -> GrayImage {
    GrayImage::from_fn(t.out_size, t.out_size, |u, v| {
        let sx = t.origin_x + (u as f64 + 0.5) * t.scale - 0.5;
        let sy = t.origin_y + (v as f64 + 0.5) * t.scale - 0.5;
        image.sample_bilinear(sx, sy)
    })
}

/// Square patch tiling of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || width % patch_size != 0 || height % patch_size != 0 {
            return Err(Error::Config(format!(
                "{width}x{height} frame is not tiled by {patch_size}px patches"
            )));
        }
        Ok(Self {
            patch_size,
            rows: height / patch_size,
            cols: width / patch_size,
        })
    }

    pub fn square(size: usize, patch_size: usize) -> Result<Self> {
        Self::new(size, size, patch_size)
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_size
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_size
    }

    /// Pixel rectangle of token `j` (row-major).
    pub fn patch_rect(&self, j: usize) -> BBox {
        let (r, c) = (j / self.cols, j % self.cols);
        let p = self.patch_size as f64;
        BBox::new(c as f64 * p, r as f64 * p, p, p)
    }

    /// Flattened patches, one row per token, `patch_size²` columns.
    pub fn patches(&self, image: &GrayImage) -> Result<Tensor> {
        if image.width() != self.width() || image.height() != self.height() {
            return Err(Error::shape(
                "patches",
                &[image.height(), image.width()],
                &[self.height(), self.width()],
            ));
        }
        let p = self.patch_size;
        let mut data = Vec::with_capacity(self.tokens() * p * p);
        for r in 0..self.rows {
            for c in 0..self.cols {
                for y in 0..p {
                    for x in 0..p {
                        data.push(image.get(c * p + x, r * p + y));
                    }
                }
            }
        }
        Tensor::matrix(self.tokens(), p * p, data)
    }
}

/// One bit per token of a frame: set when the token's patch touches the target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    pub bits: Vec<bool>,
}

impl TokenMask {
    pub fn ones(n: usize) -> Self {
        Self {
            bits: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Bit `j` is set iff patch `j` overlaps `bbox` with positive area.
pub fn token_mask(grid: &PatchGrid, bbox: &BBox) -> TokenMask {
    token_mask_with_overlap(grid, bbox, 0.0)
}

/// Like [`token_mask`] but requires the overlap to exceed `min_fraction` of
/// the patch area.
pub fn token_mask_with_overlap(grid: &PatchGrid, bbox: &BBox, min_fraction: f64) -> TokenMask {
    let patch_area = (grid.patch_size * grid.patch_size) as f64;
    let bits = (0..grid.tokens())
        .map(|j| {
            let a = grid.patch_rect(j).intersection_area(bbox);
            a > 0.0 && a > min_fraction * patch_area
        })
        .collect();
    TokenMask { bits }
}
