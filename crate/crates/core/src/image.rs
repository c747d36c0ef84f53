//! Intensity images and the 16-bit PGM + sidecar dump format.
//!
//! A dump is `name.pgm` (binary P5, big-endian, maxval 65535) next to
//! `name.sidecar`, a `key = value` text file holding the linear rescale
//! `value = offset + scale · pixel` and the acquisition metadata. Floats are
//! written in shortest round-trip form, so loading a dump reproduces the
//! dequantized image bit for bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::optics::{AberrationState, Coefficient};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageMeta {
    pub state: Option<AberrationState>,
    pub seed: Option<u64>,
    pub dose: Option<f64>,
}

/// Row-major 2D intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    /// nm per pixel
    pub pixel_size: f64,
    pub meta: ImageMeta,
}

impl Image {
    /// Builds an image, rejecting negative or non-finite values.
    pub fn new(width: usize, height: usize, data: Vec<f64>, pixel_size: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image must be non-empty"));
        }
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "expected {} pixels for {width}×{height}, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("pixel value {v} is not a finite non-negative number")));
        }
        Ok(Self::from_raw(width, height, data, pixel_size))
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>, pixel_size: f64) -> Self {
        Self {
            width,
            height,
            data,
            pixel_size,
            meta: ImageMeta::default(),
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        pixel_size: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data, pixel_size)
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    /// Population standard deviation.
    pub fn std_dev(&self) -> f64 {
        let mean = self.mean();
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.len() as f64;
        var.sqrt()
    }

    pub fn quantize(&self) -> QuantizedImage {
        QuantizedImage::from_image(self)
    }
}

/// 16-bit readout of an [`Image`] with its linear rescale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
    pub scale: f64,
    pub offset: f64,
    pub pixel_size: f64,
    pub meta: ImageMeta,
}

impl QuantizedImage {
    /// Integer-valued images that fit in 16 bits are stored exactly
    /// (scale 1, offset 0); anything else is stretched over the full range.
    pub fn from_image(image: &Image) -> Self {
        let min = image.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = image.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exact = min >= 0.0 && max <= u16::MAX as f64 && image.data.iter().all(|v| v.fract() == 0.0);
        let (scale, offset) = if exact {
            (1.0, 0.0)
        } else if max > min {
            ((max - min) / u16::MAX as f64, min)
        } else {
            (1.0, min)
        };
        let pixels = image
            .data
            .iter()
            .map(|v| ((v - offset) / scale).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        Self {
            width: image.width,
            height: image.height,
            pixels,
            scale,
            offset,
            pixel_size: image.pixel_size,
            meta: image.meta.clone(),
        }
    }

    pub fn dequantize(&self) -> Image {
        let data = self
            .pixels
            .iter()
            .map(|&q| (self.offset + self.scale * q as f64).max(0.0))
            .collect();
        let mut image = Image::from_raw(self.width, self.height, data, self.pixel_size);
        image.meta = self.meta.clone();
        image
    }
}

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("sidecar")
}

/// Writes `path` (PGM) and its sidecar.
pub fn write_dump(path: &Path, image: &QuantizedImage) -> Result<()> {
    let mut pgm = Vec::with_capacity(32 + 2 * image.pixels.len());
    write!(pgm, "P5\n{} {}\n65535\n", image.width, image.height)?;
    for p in &image.pixels {
        pgm.extend_from_slice(&p.to_be_bytes());
    }
    fs::write(path, pgm)?;

    let mut side = String::new();
    let mut kv = |k: &str, v: String| {
        side.push_str(k);
        side.push_str(" = ");
        side.push_str(&v);
        side.push('\n');
    };
    kv("format", "stemtune-image/1".into());
    kv("width", image.width.to_string());
    kv("height", image.height.to_string());
    kv("pixel_size_nm", format!("{:?}", image.pixel_size));
    kv("scale", format!("{:?}", image.scale));
    kv("offset", format!("{:?}", image.offset));
    kv("dose", image.meta.dose.map_or("none".into(), |d| format!("{d:?}")));
    kv("seed", image.meta.seed.map_or("none".into(), |s| s.to_string()));
    if let Some(state) = &image.meta.state {
        for c in Coefficient::ALL {
            kv(c.name(), format!("{:?}", state.get(c)));
        }
    }
    fs::write(sidecar_path(path), side)?;
    Ok(())
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("truncated PGM header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::format("non-ASCII PGM header"))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(format!("cannot parse {what} from '{s}'")))
}

/// Reads a dump written by [`write_dump`].
pub fn read_dump(path: &Path) -> Result<QuantizedImage> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    if next_token(&bytes, &mut pos)? != "P5" {
        return Err(Error::format(format!("{} is not a binary PGM", path.display())));
    }
    let width: usize = parse_num(next_token(&bytes, &mut pos)?, "width")?;
    let height: usize = parse_num(next_token(&bytes, &mut pos)?, "height")?;
    let maxval: u32 = parse_num(next_token(&bytes, &mut pos)?, "maxval")?;
    if maxval != 65535 {
        return Err(Error::format(format!("expected maxval 65535, got {maxval}")));
    }
    pos += 1;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 2 * width * height {
        return Err(Error::format(format!(
            "{}: expected {} bytes of pixel data, found {}",
            path.display(),
            2 * width * height,
            body.len()
        )));
    }
    let pixels = body
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();

    let side_path = sidecar_path(path);
    let side = fs::read_to_string(&side_path)?;
    let mut fields = std::collections::HashMap::new();
    for line in side.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad sidecar line '{line}'")))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::format(format!("{} is missing '{k}'", side_path.display())))
    };
    if get("format")? != "stemtune-image/1" {
        return Err(Error::Schema(format!("unknown image format '{}'", get("format")?)));
    }
    if parse_num::<usize>(get("width")?, "width")? != width
        || parse_num::<usize>(get("height")?, "height")? != height
    {
        return Err(Error::format("sidecar dimensions disagree with the PGM header"));
    }
    let optional = |k: &str| -> Result<Option<&str>> {
        Ok(match fields.get(k).map(String::as_str) {
            None | Some("none") => None,
            Some(v) => Some(v),
        })
    };
    let dose = optional("dose")?.map(|v| parse_num(v, "dose")).transpose()?;
    let seed = optional("seed")?.map(|v| parse_num(v, "seed")).transpose()?;
    let state = if fields.contains_key("c10") {
        let mut values = [0.0; 7];
        for c in Coefficient::ALL {
            values[c.index()] = parse_num(get(c.name())?, c.name())?;
        }
        Some(AberrationState::from_values(values)?)
    } else {
        None
    };
    Ok(QuantizedImage {
        width,
        height,
        pixels,
        scale: parse_num(get("scale")?, "scale")?,
        offset: parse_num(get("offset")?, "offset")?,
        pixel_size: parse_num(get("pixel_size_nm")?, "pixel_size_nm")?,
        meta: ImageMeta { state, seed, dose },
    })
}
