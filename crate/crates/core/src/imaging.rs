//! Image containers and pixel/patch geometry.
//!
//! Pixel coordinates are `(u, v)` = (column, row) with the origin at the
//! top-left corner. Patches are indexed `(row, col)` and flattened
//! row-major: `k = row * grid_w + col`.

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB image with values in `[0, 1]`, stored row-major with interleaved
/// channels (`data[(v * width + u) * 3 + c]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Geometry("image must be non-empty".into()));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Parameter(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "expected {} bytes for a {height}x{width} RGB image, got {}",
                height * width * CHANNELS,
                bytes.len()
            )));
        }
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self { height, width, data })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&x| (x * 255.0).round() as u8).collect()
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

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let i = (v * self.width + u) * CHANNELS;
        for c in 0..CHANNELS {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchGeometry {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGeometry {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::Geometry("patch size must be at least 1".into()));
        }
        if height == 0 || width == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
            return Err(Error::Geometry(format!(
                "{height}x{width} is not a positive multiple of patch size {patch_size}"
            )));
        }
        Ok(Self {
            patch_size,
            grid_h: height / patch_size,
            grid_w: width / patch_size,
        })
    }

    /// Total number of patches.
    pub fn k(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn height(&self) -> usize {
        self.grid_h * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.grid_w * self.patch_size
    }

    pub fn flat(&self, p: PatchIndex) -> usize {
        p.row * self.grid_w + p.col
    }

    pub fn unflat(&self, k: usize) -> PatchIndex {
        PatchIndex {
            row: k / self.grid_w,
            col: k % self.grid_w,
        }
    }

    /// Center of a patch in pixel coordinates.
    pub fn patch_center(&self, p: PatchIndex) -> PixelPoint {
        let ps = self.patch_size as f64;
        PixelPoint {
            u: (p.col as f64 + 0.5) * ps,
            v: (p.row as f64 + 0.5) * ps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn in_frame(&self, geom: &PatchGeometry) -> bool {
        self.u >= 0.0
            && self.v >= 0.0
            && self.u < geom.width() as f64
            && self.v < geom.height() as f64
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchIndex {
    pub row: usize,
    pub col: usize,
}

impl PatchIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

pub fn patchify(img: &Image, patch_size: usize) -> Result<PatchGeometry> {
    PatchGeometry::new(img.height(), img.width(), patch_size)
}

pub fn pixel_to_patch(geom: &PatchGeometry, p: PixelPoint) -> Result<PatchIndex> {
    if !p.in_frame(geom) {
        return Err(Error::OutOfFrame {
            u: p.u,
            v: p.v,
            width: geom.width(),
            height: geom.height(),
        });
    }
    let ps = geom.patch_size as f64;
    // The clamp guards u = width - ulp style rounding at the right edge.
    let row = ((p.v / ps).floor() as usize).min(geom.grid_h - 1);
    let col = ((p.u / ps).floor() as usize).min(geom.grid_w - 1);
    Ok(PatchIndex { row, col })
}

/// The `side x side` window around `center`, slid inward at the borders so
/// it always holds exactly `side^2` patches. Row-major order.
pub fn patch_window(geom: &PatchGeometry, center: PatchIndex, side: usize) -> Result<Vec<PatchIndex>> {
    if side.is_multiple_of(2) {
        return Err(Error::Parameter(format!("window side {side} must be odd")));
    }
    if side > geom.grid_h.min(geom.grid_w) {
        return Err(Error::Parameter(format!(
            "window side {side} exceeds the {}x{} patch grid",
            geom.grid_h, geom.grid_w
        )));
    }
    if center.row >= geom.grid_h || center.col >= geom.grid_w {
        return Err(Error::Geometry(format!(
            "center ({}, {}) outside the {}x{} grid",
            center.row, center.col, geom.grid_h, geom.grid_w
        )));
    }
    let half = side / 2;
    let start = |c: usize, n: usize| c.saturating_sub(half).min(n - side);
    let r0 = start(center.row, geom.grid_h);
    let c0 = start(center.col, geom.grid_w);
    Ok((r0..r0 + side)
        .flat_map(|row| (c0..c0 + side).map(move |col| PatchIndex { row, col }))
        .collect())
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&img.to_rgb8())
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "expected 8-bit RGB, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    Image::from_rgb8(info.height as usize, info.width as usize, &buf[..info.buffer_size()])
}
