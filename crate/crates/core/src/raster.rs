//! Raster containers, inspection images and PNG I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorCode, Result};

/// Row-major 2-D buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Raster {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::new(
                ErrorCode::InvalidImage,
                format!("buffer of {} values for {width}x{height}", data.len()),
            ));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Raster {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the sub-rectangle `b`, which must lie inside the raster.
    pub fn crop(&self, b: BBox) -> Raster<T> {
        assert!(b.right() <= self.width && b.bottom() <= self.height, "crop out of bounds");
        let mut data = Vec::with_capacity(b.width * b.height);
        for y in b.y..b.bottom() {
            data.extend_from_slice(&self.data[y * self.width + b.x..y * self.width + b.right()]);
        }
        Raster {
            width: b.width,
            height: b.height,
            data,
        }
    }

    /// Copies the first `width` columns.
    pub fn left_columns(&self, width: usize) -> Raster<T> {
        self.crop(BBox::new(0, 0, width.min(self.width), self.height))
    }
}

impl Raster<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Axis-aligned pixel box, half-open on the right and bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl BBox {
    pub const fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        BBox {
            x,
            y,
            width,
            height,
        }
    }

    pub fn right(&self) -> usize {
        self.x + self.width
    }

    pub fn bottom(&self) -> usize {
        self.y + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.width as f64 / 2.0,
            self.y as f64 + self.height as f64 / 2.0,
        )
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.right() <= width && self.bottom() <= height
    }

    pub fn intersection_area(&self, o: &BBox) -> usize {
        let w = self.right().min(o.right()).saturating_sub(self.x.max(o.x));
        let h = self.bottom().min(o.bottom()).saturating_sub(self.y.max(o.y));
        w * h
    }

    pub fn intersects(&self, o: &BBox) -> bool {
        self.intersection_area(o) > 0
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let i = self.intersection_area(o) as f64;
        let u = (self.area() + o.area()) as f64 - i;
        if u <= 0.0 {
            0.0
        } else {
            i / u
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64 && x < self.right() as f64 && y >= self.y as f64 && y < self.bottom() as f64
    }

    pub fn contains_box(&self, o: &BBox) -> bool {
        o.x >= self.x && o.y >= self.y && o.right() <= self.right() && o.bottom() <= self.bottom()
    }

    pub fn union(&self, o: &BBox) -> BBox {
        let x = self.x.min(o.x);
        let y = self.y.min(o.y);
        BBox::new(x, y, self.right().max(o.right()) - x, self.bottom().max(o.bottom()) - y)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: String,
    pub product_id: String,
    pub layer_id: String,
    #[serde(default)]
    pub captured_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Pixels {
    Gray(Raster<u8>),
    Rgb(Raster<[u8; 3]>),
}

/// A gray or RGB inspection image plus its product/layer metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct InspectionImage {
    pub pixels: Pixels,
    pub meta: ImageMeta,
}

#[inline]
pub fn luma(p: [u8; 3]) -> u8 {
    // exact integer form of round(0.299R + 0.587G + 0.114B)
    ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000) as u8
}

impl InspectionImage {
    pub fn new(pixels: Pixels, meta: ImageMeta) -> Result<Self> {
        let img = InspectionImage { pixels, meta };
        if img.width() < 2 || img.height() < 2 {
            return Err(Error::new(
                ErrorCode::InvalidImage,
                format!("image {}x{} is below 2x2", img.width(), img.height()),
            ));
        }
        Ok(img)
    }

    pub fn gray(raster: Raster<u8>) -> Result<Self> {
        Self::new(Pixels::Gray(raster), ImageMeta::default())
    }

    pub fn rgb(raster: Raster<[u8; 3]>) -> Result<Self> {
        Self::new(Pixels::Rgb(raster), ImageMeta::default())
    }

    pub fn with_meta(mut self, meta: ImageMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn width(&self) -> usize {
        match &self.pixels {
            Pixels::Gray(r) => r.width(),
            Pixels::Rgb(r) => r.width(),
        }
    }

    pub fn height(&self) -> usize {
        match &self.pixels {
            Pixels::Gray(r) => r.height(),
            Pixels::Rgb(r) => r.height(),
        }
    }

    /// Gray plane with fixed luma weights.
    pub fn to_gray(&self) -> Raster<u8> {
        match &self.pixels {
            Pixels::Gray(r) => r.clone(),
            Pixels::Rgb(r) => r.map(luma),
        }
    }

    pub fn to_rgb(&self) -> Raster<[u8; 3]> {
        match &self.pixels {
            Pixels::Gray(r) => r.map(|v| [v, v, v]),
            Pixels::Rgb(r) => r.clone(),
        }
    }

    /// Adds `delta` to every channel of every pixel, saturating at 0 and 255.
    pub fn shifted(&self, delta: i32) -> InspectionImage {
        let f = |v: u8| (v as i32 + delta).clamp(0, 255) as u8;
        let pixels = match &self.pixels {
            Pixels::Gray(r) => Pixels::Gray(r.map(f)),
            Pixels::Rgb(r) => Pixels::Rgb(r.map(|p| [f(p[0]), f(p[1]), f(p[2])])),
        };
        InspectionImage {
            pixels,
            meta: self.meta.clone(),
        }
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let dynimg = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::new(ErrorCode::InvalidImage, format!("png decode: {e}")))?;
        Self::from_dynamic(dynimg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let dynimg = image::open(path)
            .map_err(|e| Error::new(ErrorCode::InvalidImage, format!("{}: {e}", path.display())))?;
        let mut img = Self::from_dynamic(dynimg)?;
        img.meta.image_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(img)
    }

    fn from_dynamic(dynimg: image::DynamicImage) -> Result<Self> {
        use image::DynamicImage;
        match dynimg {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Self::gray(Raster::from_vec(w as usize, h as usize, g.into_raw())?)
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                let data = rgb.into_raw().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
                Self::rgb(Raster::from_vec(w as usize, h as usize, data)?)
            }
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        let w = self.width() as u32;
        let h = self.height() as u32;
        let res = match &self.pixels {
            Pixels::Gray(r) => image::GrayImage::from_raw(w, h, r.data().to_vec())
                .expect("dims")
                .write_to(&mut out, image::ImageFormat::Png),
            Pixels::Rgb(r) => image::RgbImage::from_raw(w, h, r.data().iter().flatten().copied().collect())
                .expect("dims")
                .write_to(&mut out, image::ImageFormat::Png),
        };
        res.map_err(|e| Error::io("png encode", e))?;
        Ok(out.into_inner())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path.display(), e))
    }
}

/// Writes a boolean mask as an 8-bit PNG (0 / 255).
pub fn save_mask_png(mask: &Raster<bool>, path: &Path) -> Result<()> {
    let data = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data).expect("dims");
    img.save(path).map_err(|e| Error::io(path.display(), e))
}

pub fn load_mask_png(path: &Path) -> Result<Raster<bool>> {
    let img = InspectionImage::load(path)?;
    Ok(img.to_gray().map(|v| v > 127))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_is_rounded_weighted_sum() {
        assert_eq!(luma([255, 255, 255]), 255);
        assert_eq!(luma([0, 0, 0]), 0);
        // 0.299*100 + 0.587*50 + 0.114*200 = 82.15
        assert_eq!(luma([100, 50, 200]), 82);
    }

    #[test]
    fn rejects_tiny_images() {
        let r = Raster::filled(1, 5, 0u8);
        assert_eq!(InspectionImage::gray(r).unwrap_err().code, ErrorCode::InvalidImage);
    }

    #[test]
    fn png_round_trip_keeps_pixels() {
        let r = Raster::from_fn(7, 5, |x, y| [(x * 30) as u8, (y * 40) as u8, 9]);
        let img = InspectionImage::rgb(r).unwrap();
        let back = InspectionImage::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back.to_rgb(), img.to_rgb());
    }

    #[test]
    fn corrupt_png_is_invalid_image() {
        let err = InspectionImage::decode_png(b"not a png").unwrap_err();
        assert_eq!(err.code, ErrorCode::InvalidImage);
    }

    #[test]
    fn bbox_iou_and_union() {
        let a = BBox::new(0, 0, 10, 10);
        let b = BBox::new(5, 0, 10, 10);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(a.union(&b), BBox::new(0, 0, 15, 10));
        assert!(!a.intersects(&BBox::new(10, 0, 3, 3)));
    }
}
