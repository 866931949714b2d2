//! Heatmap colouring and binary PPM (P6) encoding.

use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The classic blue-cyan-yellow-red ramp for `v` in `[0, 1]`.
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |centre: f64| to_byte(1.5 - (4.0 * v - centre).abs());
    [ch(3.0), ch(2.0), ch(1.0)]
}

impl Rgb {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::arg(format!("{width}x{height} raster needs {} bytes, got {}", width * height * 3, data.len())));
        }
        Ok(Rgb { width, height, data })
    }

    pub fn filled(width: usize, height: usize, colour: [u8; 3]) -> Self {
        Rgb {
            width,
            height,
            data: colour.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    /// Jet-coloured `[H, W]` map with values in `[0, 1]`.
    pub fn heatmap(values: &Tensor) -> Result<Self> {
        let [h, w] = values.dims2()?;
        Rgb::new(w, h, values.data().iter().flat_map(|&v| jet(v)).collect())
    }

    pub fn from_image(image: &Image) -> Self {
        Rgb {
            width: image.width(),
            height: image.height(),
            data: image.tensor().data().iter().map(|&v| to_byte(v)).collect(),
        }
    }

    /// Heatmap blended over the image with weight `alpha`. Pixels whose
    /// value is below `floor * max` show the bare image.
    pub fn overlay(image: &Image, values: &Tensor, alpha: f64, floor: f64) -> Result<Self> {
        let heat = Rgb::heatmap(values)?;
        let base = Rgb::from_image(image);
        if (heat.width, heat.height) != (base.width, base.height) {
            return Err(Error::shape(&[base.height, base.width], values.shape()));
        }
        let cut = floor * values.max();
        let mut data = base.data.clone();
        for ((px, hp), &v) in data.chunks_mut(3).zip(heat.data.chunks(3)).zip(values.data()) {
            if v < cut {
                continue;
            }
            for (b, &h) in px.iter_mut().zip(hp) {
                *b = (f64::from(*b) * (1.0 - alpha) + f64::from(h) * alpha).round() as u8;
            }
        }
        Rgb::new(base.width, base.height, data)
    }

    /// Signed map: red for positive, blue for negative, white at zero,
    /// scaled by the largest magnitude.
    pub fn signed(values: &Tensor) -> Result<Self> {
        let [h, w] = values.dims2()?;
        let scale = values.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let data = values
            .data()
            .iter()
            .flat_map(|&v| {
                let t = if scale > 0.0 { v.abs() / scale } else { 0.0 };
                let fade = to_byte(1.0 - t);
                if v > 0.0 {
                    [255, fade, fade]
                } else if v < 0.0 {
                    [fade, fade, 255]
                } else {
                    [255, 255, 255]
                }
            })
            .collect();
        Rgb::new(w, h, data)
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        let (w, h) = (self.width * factor, self.height * factor);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let o = ((y / factor) * self.width + x / factor) * 3;
                data.extend_from_slice(&self.data[o..o + 3]);
            }
        }
        Rgb { width: w, height: h, data }
    }

    /// Copies `other` with its top-left corner at `(x, y)`, clipping at
    /// the edges.
    pub fn blit(&mut self, other: &Rgb, x: usize, y: usize) {
        for row in 0..other.height.min(self.height.saturating_sub(y)) {
            let n = other.width.min(self.width.saturating_sub(x)) * 3;
            let dst = ((y + row) * self.width + x) * 3;
            let src = row * other.width * 3;
            self.data[dst..dst + n].copy_from_slice(&other.data[src..src + n]);
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Reads the P6 files this module writes (no comments in the header).
    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Format("not a binary PPM".into());
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad());
        }
        let width: usize = fields[1].parse().map_err(|_| bad())?;
        let height: usize = fields[2].parse().map_err(|_| bad())?;
        let data = bytes.get(pos..).ok_or_else(bad)?.to_vec();
        Rgb::new(width, height, data).map_err(|_| bad())
    }
}

/// Lays the tiles out row by row, `columns` wide, each in a cell the size
/// of the largest tile plus a `gap`-pixel margin.
pub fn gallery(tiles: &[Rgb], columns: usize, gap: usize) -> Result<Rgb> {
    if tiles.is_empty() || columns == 0 {
        return Err(Error::arg("gallery needs at least one tile and one column"));
    }
    let cw = tiles.iter().map(|t| t.width).max().unwrap_or(1) + gap;
    let ch = tiles.iter().map(|t| t.height).max().unwrap_or(1) + gap;
    let cols = columns.min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let mut out = Rgb::filled(cols * cw + gap, rows * ch + gap, [32, 32, 32]);
    for (i, t) in tiles.iter().enumerate() {
        out.blit(t, gap + (i % cols) * cw, gap + (i / cols) * ch);
    }
    Ok(out)
}
