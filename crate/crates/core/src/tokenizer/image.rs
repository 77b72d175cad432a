//! 8-bit binary PGM (P5) and PPM (P6) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height×width×channels` image with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}×{width}×{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("{channels} channels (1 or 3 supported)")));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated image header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(Error::Format(format!("unsupported image magic `{m}` (P5 or P6 expected)"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad header field `{s}`")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("maxval {maxval} (8-bit images only)")));
        }
        let n = width * height * channels;
        let body = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Format(format!("image body has {} of {n} bytes", bytes.len().saturating_sub(pos))))?;
        let data = body.iter().map(|&b| b as f32 / maxval as f32).collect();
        Image::new(height, width, channels, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Channel-major copy, `[c][y][x]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, channels: usize, chw: &[f32]) -> Result<Self> {
        let mut data = vec![0.0; height * width * channels];
        for ch in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data[(y * width + x) * channels + ch] = chw[(ch * height + y) * width + x];
                }
            }
        }
        Image::new(height, width, channels, data)
    }

    /// Side-by-side tiling of equally sized images.
    pub fn tile_row(images: &[Image]) -> Result<Image> {
        let first = images.first().ok_or_else(|| Error::Shape("nothing to tile".into()))?;
        if images
            .iter()
            .any(|i| i.height != first.height || i.channels != first.channels)
        {
            return Err(Error::Shape("tiled images differ in height or channels".into()));
        }
        let width: usize = images.iter().map(|i| i.width).sum();
        let c = first.channels;
        let mut data = Vec::with_capacity(first.height * width * c);
        for y in 0..first.height {
            for img in images {
                data.extend_from_slice(&img.data[y * img.width * c..(y + 1) * img.width * c]);
            }
        }
        Image::new(first.height, width, c, data)
    }
}

/// Renders a token grid as flat `patch×patch` blocks, token `j` at gray
/// level `j/(K−1)`.
pub fn render_tokens(tokens: &[usize], grid_height: usize, grid_width: usize, codebook_size: usize, patch: usize) -> Result<Image> {
    if tokens.len() != grid_height * grid_width {
        return Err(Error::Shape(format!("{} tokens for a {grid_height}×{grid_width} grid", tokens.len())));
    }
    let (h, w) = (grid_height * patch, grid_width * patch);
    let scale = (codebook_size.max(2) - 1) as f32;
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let t = tokens[(y / patch) * grid_width + x / patch];
            data[y * w + x] = (t as f32 / scale).min(1.0);
        }
    }
    Image::new(h, w, 1, data)
}

/// Binary mask as black (false) / white (true) pixels, `patch×patch` per
/// cell.
pub fn render_mask(mask: &[bool], grid_height: usize, grid_width: usize, patch: usize) -> Result<Image> {
    let tokens: Vec<usize> = mask.iter().map(|&m| m as usize).collect();
    render_tokens(&tokens, grid_height, grid_width, 2, patch)
}
