//! RGB frames and clips, stored channel-first as `f64` in `[0, 255]`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Three-channel image, channel-major (`C, H, W`), values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "{} values for a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self { height, width, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// Rounds to 8-bit and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [0, 1, 2].map(|c| self.get(c, y, x).round().clamp(0.0, 255.0) as u8);
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| Error::format(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::format(path, e))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(h, w, [0.0; 3]);
        for (x, y, px) in img.enumerate_pixels() {
            out.set_rgb(y as usize, x as usize, px.0.map(f64::from));
        }
        Ok(out)
    }

    /// The image quantized the same way [`Image::save_png`] stores it.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.round().clamp(0.0, 255.0)).collect(),
        }
    }
}

/// Ordered frames of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<Image>,
}

impl VideoClip {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if frames.iter().any(|f| f.dims() != first.dims()) {
                return Err(Error::Shape("clip frames differ in size".into()));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(Image::dims)
    }

    /// Writes `frame_00000.png`, `frame_00001.png`, … into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, f) in self.frames.iter().enumerate() {
            f.save_png(&dir.join(format!("frame_{i:05}.png")))?;
        }
        Ok(())
    }

    /// Loads every `.png` in `dir`, ordered by file name.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let frames = paths.iter().map(|p| Image::load_png(p)).collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }
}
