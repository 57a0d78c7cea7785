//! Row-major image grids and their file formats: 8-bit PNG for color, 1-bit
//! PNG for binary masks, PFM for float maps and `.npy` for latent tensors.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type RgbImage = Grid<[f64; 3]>;
pub type ScalarImage = Grid<f64>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
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

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Grid<T> {
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }
}

/// Channel-first tensor, used for latent-space noise predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data.iter().flat_map(|p| p.map(to_u8)).collect();
    enc.write_header()
        .and_then(|mut w| w.write_image_data(&bytes))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn decode_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let fmt = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut reader = dec.read_info().map_err(fmt)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub fn read_png_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let (info, buf) = decode_png(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Format(format!("{}: unexpanded palette", path.display())))
        }
    };
    let data = buf
        .chunks_exact(channels)
        .map(|px| {
            let f = |v: u8| f64::from(v) / 255.0;
            if channels < 3 {
                [f(px[0]); 3]
            } else {
                [f(px[0]), f(px[1]), f(px[2])]
            }
        })
        .collect();
    Ok(Grid {
        width: w,
        height: h,
        data,
    })
}

/// Writes a binary mask as a 1-bit grayscale PNG.
pub fn write_png_mask(mask: &Grid<bool>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), mask.width as u32, mask.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let stride = mask.width.div_ceil(8);
    let mut bytes = vec![0u8; stride * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if *mask.get(x, y) {
                bytes[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    enc.write_header()
        .and_then(|mut w| w.write_image_data(&bytes))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_png_mask(path: impl AsRef<Path>) -> Result<Grid<bool>> {
    let rgb = read_png_rgb(path)?;
    Ok(rgb.map(|p| p[0] >= 0.5))
}

/// Writes a PFM (`Pf` for one channel, `PF` for three), little-endian,
/// rows stored bottom to top.
pub fn write_pfm(channels: usize, width: usize, height: usize, data: &[f32], path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let magic = if channels == 3 { "PF" } else { "Pf" };
    write!(w, "{magic}\n{width} {height}\n-1.0\n").map_err(io)?;
    for y in (0..height).rev() {
        for v in &data[y * width * channels..(y + 1) * width * channels] {
            w.write_f32::<LittleEndian>(*v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn write_pfm_scalar(img: &ScalarImage, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<f32> = img.data.iter().map(|&v| v as f32).collect();
    write_pfm(1, img.width, img.height, &data, path.as_ref())
}

pub fn write_pfm_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<f32> = img.data.iter().flat_map(|p| p.map(|v| v as f32)).collect();
    write_pfm(3, img.width, img.height, &data, path.as_ref())
}

/// Returns `(channels, width, height, data)` with rows top to bottom.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let fmt = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut line = || -> Result<String> {
        let mut s = String::new();
        r.read_line(&mut s).map_err(|e| Error::io(path, e))?;
        Ok(s.trim().to_string())
    };
    let channels = match line()?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(fmt(&format!("bad PFM magic '{other}'"))),
    };
    let dims = line()?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (width, height) = match (it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h))) => (w, h),
        _ => return Err(fmt("bad PFM dimensions")),
    };
    let scale: f64 = line()?.parse().map_err(|_| fmt("bad PFM scale"))?;
    let mut raw = vec![0f32; channels * width * height];
    if scale < 0.0 {
        r.read_f32_into::<LittleEndian>(&mut raw)
    } else {
        r.read_f32_into::<byteorder::BigEndian>(&mut raw)
    }
    .map_err(|_| fmt("truncated PFM data"))?;
    let row = channels * width;
    let mut data = Vec::with_capacity(raw.len());
    for y in (0..height).rev() {
        data.extend_from_slice(&raw[y * row..(y + 1) * row]);
    }
    Ok((channels, width, height, data))
}

pub fn read_pfm_scalar(path: impl AsRef<Path>) -> Result<ScalarImage> {
    let path = path.as_ref();
    let (c, w, h, data) = read_pfm(path)?;
    if c != 1 {
        return Err(Error::Format(format!("{}: expected 1-channel PFM", path.display())));
    }
    Ok(Grid {
        width: w,
        height: h,
        data: data.into_iter().map(f64::from).collect(),
    })
}

pub fn read_pfm_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let (c, w, h, data) = read_pfm(path)?;
    if c != 3 {
        return Err(Error::Format(format!("{}: expected 3-channel PFM", path.display())));
    }
    Ok(Grid {
        width: w,
        height: h,
        data: data
            .chunks_exact(3)
            .map(|p| [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])])
            .collect(),
    })
}

/// Writes a `(C, H, W)` float32 tensor in NumPy `.npy` v1.0 format.
pub fn write_npy(t: &Tensor3, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        t.channels, t.height, t.width
    );
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat(unpadded.next_multiple_of(64) - unpadded));
    header.push('\n');
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(b"\x93NUMPY\x01\x00").map_err(io)?;
    w.write_u16::<LittleEndian>(header.len() as u16).map_err(io)?;
    w.write_all(header.as_bytes()).map_err(io)?;
    for v in &t.data {
        w.write_f32::<LittleEndian>(*v as f32).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<Tensor3> {
    let path = path.as_ref();
    let fmt = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated npy"))?;
    if &magic[..6] != b"\x93NUMPY" {
        return Err(fmt("bad npy magic"));
    }
    let header_len = if magic[6] == 1 {
        r.read_u16::<LittleEndian>().map(usize::from)
    } else {
        r.read_u32::<LittleEndian>().map(|v| v as usize)
    }
    .map_err(|_| fmt("truncated npy"))?;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(|_| fmt("truncated npy"))?;
    let header = String::from_utf8_lossy(&header);
    if !header.contains("'<f4'") || header.contains("'fortran_order': True") {
        return Err(fmt("only little-endian float32 C-order arrays are supported"));
    }
    let shape_start = header.find("'shape': (").ok_or_else(|| fmt("missing shape"))? + 10;
    let shape_end = shape_start + header[shape_start..].find(')').ok_or_else(|| fmt("bad shape"))?;
    let dims: Vec<usize> = header[shape_start..shape_end]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| fmt("bad shape entry")))
        .collect::<Result<_>>()?;
    let (channels, height, width) = match dims.as_slice() {
        [c, h, w] => (*c, *h, *w),
        [h, w] => (1, *h, *w),
        _ => return Err(fmt("expected a 2-D or 3-D array")),
    };
    let mut raw = vec![0f32; channels * height * width];
    r.read_f32_into::<LittleEndian>(&mut raw)
        .map_err(|_| fmt("truncated npy data"))?;
    Ok(Tensor3 {
        channels,
        height,
        width,
        data: raw.into_iter().map(f64::from).collect(),
    })
}

/// Peak signal-to-noise ratio in dB over the pixels where `region` is true
/// (all pixels when `region` is `None`), with unit peak.
pub fn psnr(a: &RgbImage, b: &RgbImage, region: Option<&Grid<bool>>) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for (i, (pa, pb)) in a.data.iter().zip(&b.data).enumerate() {
        if region.is_some_and(|m| !m.data[i]) {
            continue;
        }
        se += (0..3).map(|c| (pa[c] - pb[c]).powi(2)).sum::<f64>();
        n += 3;
    }
    if n == 0 {
        return f64::INFINITY;
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}
