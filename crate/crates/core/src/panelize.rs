//! Page images and the page ↔ panel-stack algebra.
//!
//! A page is split into full-page panel images that are white (1.0) outside
//! their box; composing takes the per-pixel minimum, for which white is the
//! identity.

use std::path::Path;

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// H×W×3 intensities in `[0, 1]`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct PageImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PageImage {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        PageImage {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width * 3],
        }
    }

    pub fn white(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1.0)
    }

    /// Builds an image from raw values, clamping into `[0, 1]`.
    pub fn from_vec(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(PageImage {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v.clamp(0.0, 1.0);
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, v: f64) {
        for c in 0..3 {
            self.set(y, x, c, v);
        }
    }

    /// Mean of the three channels at a pixel.
    pub fn gray(&self, y: usize, x: usize) -> f64 {
        let i = (y * self.width + x) * 3;
        (self.data[i] + self.data[i + 1] + self.data[i + 2]) / 3.0
    }

    pub fn fill_box(&mut self, b: &BBox, v: f64) {
        for y in b.ymin as usize..(b.ymax as usize).min(self.height) {
            for x in b.xmin as usize..(b.xmax as usize).min(self.width) {
                self.set_rgb(y, x, v);
            }
        }
    }

    /// Copy of the page that is white outside the union of `boxes`.
    pub fn whitened(&self, boxes: &[BBox]) -> PageImage {
        let mut out = PageImage::white(self.height, self.width);
        for b in boxes {
            copy_box(self, &mut out, b);
        }
        out
    }

    /// Fraction of pixels whose every channel exceeds `threshold`.
    pub fn white_fraction(&self, threshold: f64) -> f64 {
        let n = self.height * self.width;
        if n == 0 {
            return 1.0;
        }
        let white = self
            .data
            .chunks_exact(3)
            .filter(|px| px.iter().all(|&v| v > threshold))
            .count();
        white as f64 / n as f64
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            for c in 0..3 {
                px.0[c] = (self.data[i * 3 + c] * 255.0).round() as u8;
            }
        }
        img
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img
            .as_raw()
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        PageImage {
            height: img.height() as usize,
            width: img.width() as usize,
            data,
        }
    }

    /// Writes an 8-bit PNG; intensities map linearly onto 0..=255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Encoded PNG bytes, as sent to captioning clients.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}

fn copy_box(src: &PageImage, dst: &mut PageImage, b: &BBox) {
    let w = src.width;
    for y in b.ymin as usize..b.ymax as usize {
        let row = (y * w + b.xmin as usize) * 3..(y * w + b.xmax as usize) * 3;
        dst.data[row.clone()].copy_from_slice(&src.data[row]);
    }
}

/// K full-page panel images and the boxes they were cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelImageStack {
    pub images: Vec<PageImage>,
    /// Source boxes; `None` for generated or padded panels.
    pub boxes: Vec<Option<BBox>>,
}

impl PanelImageStack {
    pub fn from_images(images: Vec<PageImage>) -> Self {
        let boxes = vec![None; images.len()];
        PanelImageStack { images, boxes }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Cuts one full-page image per box, white outside the box, in box order.
pub fn split_page(page: &PageImage, boxes: &[BBox]) -> Result<PanelImageStack> {
    let mut images = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        if !b.is_valid() || !b.fits_in(page.width as u32, page.height as u32) {
            return Err(Error::InvalidArgument(format!(
                "panel box {i} {b} outside the {}x{} page",
                page.width, page.height
            )));
        }
        let mut img = PageImage::white(page.height, page.width);
        copy_box(page, &mut img, b);
        images.push(img);
    }
    Ok(PanelImageStack {
        images,
        boxes: boxes.iter().copied().map(Some).collect(),
    })
}

/// Per-pixel, per-channel minimum over the stack.
pub fn compose_page(stack: &PanelImageStack) -> Result<PageImage> {
    let first = stack
        .images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot compose an empty panel stack".into()))?;
    let (h, w) = (first.height, first.width);
    let mut out = first.clone();
    for (k, img) in stack.images.iter().enumerate().skip(1) {
        if img.height != h || img.width != w {
            return Err(Error::Shape(format!(
                "panel {k} is {}x{}, expected {h}x{w}",
                img.height, img.width
            )));
        }
        for (o, &v) in out.data.iter_mut().zip(&img.data) {
            *o = o.min(v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_page_full_box() {
        let page = PageImage::filled(4, 6, 0.0);
        let stack = split_page(&page, &[BBox::new(0, 0, 6, 4)]).unwrap();
        assert_eq!(stack.len(), 1);
        assert!(stack.images[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gray_page_left_half() {
        let page = PageImage::filled(4, 6, 0.5);
        let stack = split_page(&page, &[BBox::new(0, 0, 3, 4)]).unwrap();
        let img = &stack.images[0];
        for y in 0..4 {
            for x in 0..6 {
                let want = if x < 3 { 0.5 } else { 1.0 };
                assert_eq!(img.get(y, x, 1), want);
            }
        }
    }

    #[test]
    fn disjoint_boxes_have_one_owner_per_pixel() {
        let page = PageImage::filled(10, 10, 0.25);
        let boxes = [BBox::new(0, 0, 5, 10), BBox::new(5, 0, 10, 10)];
        let stack = split_page(&page, &boxes).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                let owners = stack
                    .images
                    .iter()
                    .filter(|img| img.get(y, x, 0) < 1.0)
                    .count();
                assert_eq!(owners, 1);
            }
        }
    }

    #[test]
    fn box_outside_page_is_rejected() {
        let page = PageImage::white(4, 4);
        assert!(split_page(&page, &[BBox::new(0, 0, 5, 4)]).is_err());
    }

    #[test]
    fn all_white_stack_composes_white() {
        let stack = PanelImageStack::from_images(vec![PageImage::white(3, 3); 4]);
        assert_eq!(compose_page(&stack).unwrap(), PageImage::white(3, 3));
    }

    #[test]
    fn white_is_the_identity() {
        let mut a = PageImage::white(2, 2);
        a.set(0, 1, 2, 0.3);
        let stack = PanelImageStack::from_images(vec![a.clone(), PageImage::white(2, 2)]);
        assert_eq!(compose_page(&stack).unwrap(), a);
    }

    #[test]
    fn mismatched_dimensions_error() {
        let stack =
            PanelImageStack::from_images(vec![PageImage::white(2, 2), PageImage::white(2, 3)]);
        assert!(matches!(compose_page(&stack), Err(Error::Shape(_))));
        assert!(compose_page(&PanelImageStack::from_images(vec![])).is_err());
    }

    #[test]
    fn values_are_clamped() {
        let img = PageImage::from_vec(1, 1, vec![-0.5, 0.5, 1.5]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn png_round_trip_on_8bit_lattice() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let mut img = PageImage::white(3, 5);
        img.set(1, 2, 0, 17.0 / 255.0);
        img.set(2, 4, 2, 0.0);
        img.save_png(&path).unwrap();
        assert_eq!(PageImage::load_png(&path).unwrap(), img);
    }
}
