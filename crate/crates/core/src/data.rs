//! Image sources: a seeded procedural corpus and PPM/PGM directories.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageSource {
    /// `count` generated images (gradients, checkerboards, band-limited noise).
    Procedural { count: usize },
    /// Every `.ppm`/`.pgm`/`.pnm` file in a directory, sorted by name.
    Directory { path: PathBuf },
}

impl Default for ImageSource {
    fn default() -> Self {
        ImageSource::Procedural { count: 512 }
    }
}

/// In-memory image set, each image `[c, h, w]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    dims: [usize; 3],
    pixels: Vec<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_images(dims: [usize; 3], images: &[Vec<f64>]) -> Result<Self> {
        let len = dims.iter().product::<usize>();
        let mut pixels = Vec::with_capacity(len * images.len());
        for (i, img) in images.iter().enumerate() {
            if img.len() != len {
                return Err(Error::Validation(format!(
                    "image {i} has {} values, expected {len}",
                    img.len()
                )));
            }
            if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!(
                    "image {i} has values outside [0, 1]"
                )));
            }
            pixels.extend(img.iter().map(|&v| T::lit(v)));
        }
        Ok(Self { dims, pixels })
    }

    /// Generated corpus; the same `(dims, count, seed)` always yields the same images.
    pub fn procedural(dims: [usize; 3], count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<Vec<f64>> = (0..count)
            .map(|i| procedural_image(dims, i % 3, &mut rng))
            .collect();
        Self::from_images(dims, &images).expect("generated images are in range")
    }

    pub fn load(source: &ImageSource, dims: [usize; 3], seed: u64) -> Result<Self> {
        match source {
            ImageSource::Procedural { count } => {
                if *count == 0 {
                    return Err(Error::Config("procedural source needs count > 0".into()));
                }
                Ok(Self::procedural(dims, *count, seed))
            }
            ImageSource::Directory { path } => load_directory(path, dims),
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn image_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn image(&self, i: usize) -> &[T] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Stacks the listed images into `[B, c, h, w]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Validation(format!(
                    "image index {i} out of range ({} images)",
                    self.len()
                )));
            }
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.dims;
        Ok(Tensor::new(vec![indices.len(), c, h, w], data)?)
    }

    /// Same images in a seeded random order.
    pub fn shuffled(&self, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for i in order {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            dims: self.dims,
            pixels,
        }
    }

    /// First `n` images and the rest.
    pub fn split(&self, n: usize) -> (Self, Self) {
        let cut = n.min(self.len()) * self.image_len();
        (
            Self {
                dims: self.dims,
                pixels: self.pixels[..cut].to_vec(),
            },
            Self {
                dims: self.dims,
                pixels: self.pixels[cut..].to_vec(),
            },
        )
    }
}

fn random_color<R: Rng>(rng: &mut R, c: usize) -> Vec<f64> {
    (0..c).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// `kind`: 0 gradient, 1 checkerboard, 2 band-limited noise.
fn procedural_image<R: Rng>(dims: [usize; 3], kind: usize, rng: &mut R) -> Vec<f64> {
    let [c, h, w] = dims;
    let mut img = vec![0.0; c * h * w];
    let at = |ch: usize, y: usize, x: usize| (ch * h + y) * w + x;
    match kind {
        0 => {
            let theta = rng.random_range(0.0..2.0 * PI);
            let (a, b) = (random_color(rng, c), random_color(rng, c));
            let (dy, dx) = theta.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let u = (y as f64 / h as f64 - 0.5) * dy + (x as f64 / w as f64 - 0.5) * dx;
                    let t = (u / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
                    for ch in 0..c {
                        img[at(ch, y, x)] = a[ch] + (b[ch] - a[ch]) * t;
                    }
                }
            }
        }
        1 => {
            let period = rng.random_range(2..=(h.min(w) / 2).max(2));
            let (oy, ox) = (rng.random_range(0..period), rng.random_range(0..period));
            let (a, b) = (random_color(rng, c), random_color(rng, c));
            for y in 0..h {
                for x in 0..w {
                    let odd = ((y + oy) / period + (x + ox) / period) % 2 == 1;
                    for ch in 0..c {
                        img[at(ch, y, x)] = if odd { b[ch] } else { a[ch] };
                    }
                }
            }
        }
        _ => {
            for ch in 0..c {
                let waves: Vec<(f64, f64, f64, f64)> = (0..4)
                    .map(|_| {
                        (
                            rng.random_range(-3.0..3.0),
                            rng.random_range(-3.0..3.0),
                            rng.random_range(0.0..2.0 * PI),
                            rng.random_range(0.2..1.0),
                        )
                    })
                    .collect();
                let norm: f64 = waves.iter().map(|w| w.3).sum();
                for y in 0..h {
                    for x in 0..w {
                        let (yy, xx) = (y as f64 / h as f64, x as f64 / w as f64);
                        let s: f64 = waves
                            .iter()
                            .map(|&(fy, fx, ph, amp)| {
                                amp * (2.0 * PI * (fy * yy + fx * xx) + ph).sin()
                            })
                            .sum();
                        img[at(ch, y, x)] = 0.5 + 0.5 * s / norm;
                    }
                }
            }
        }
    }
    img
}

/// Decoded Netpbm raster: `channels` is 1 or 3, values normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// interleaved, row-major
    pub pixels: Vec<f64>,
}

/// Parses binary (P5/P6) and plain (P2/P3) PGM/PPM.
pub fn parse_netpbm(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<&[u8], String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(&bytes[start..pos])
    };
    let magic = token()?.to_vec();
    let (channels, binary) = match magic.as_slice() {
        b"P2" => (1, false),
        b"P3" => (3, false),
        b"P5" => (1, true),
        b"P6" => (3, true),
        m => {
            return Err(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(m)
            ))
        }
    };
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad {what} {:?}", String::from_utf8_lossy(t)))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err("zero-sized image".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    let n = width * height * channels;
    let mut pixels = Vec::with_capacity(n);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        if bytes.len() < start + need {
            return Err(format!(
                "truncated raster: {} of {need} bytes",
                bytes.len().saturating_sub(start)
            ));
        }
        let raw = &bytes[start..start + need];
        for i in 0..n {
            let v = if wide {
                u16::from_be_bytes([raw[2 * i], raw[2 * i + 1]]) as usize
            } else {
                raw[i] as usize
            };
            pixels.push(v);
        }
    } else {
        for _ in 0..n {
            pixels.push(number("sample")?);
        }
    }
    if let Some(v) = pixels.iter().find(|&&v| v > maxval) {
        return Err(format!("sample {v} exceeds maxval {maxval}"));
    }
    Ok(Raster {
        width,
        height,
        channels,
        pixels: pixels
            .into_iter()
            .map(|v| v as f64 / maxval as f64)
            .collect(),
    })
}

/// Center-crops to the target aspect ratio, resizes by nearest neighbour
/// and converts gray/color to `c` planes.
pub fn fit_raster(r: &Raster, dims: [usize; 3]) -> std::result::Result<Vec<f64>, String> {
    let [c, h, w] = dims;
    if c != 1 && c != 3 {
        return Err(format!("cannot produce {c} channels"));
    }
    // largest centered crop with aspect w:h
    let (cw, ch) = if r.width * h > r.height * w {
        (r.height * w / h, r.height)
    } else {
        (r.width, r.width * h / w)
    };
    let (cw, ch) = (cw.max(1), ch.max(1));
    let (x0, y0) = ((r.width - cw) / 2, (r.height - ch) / 2);
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        let sy = y0 + (y * ch + ch / 2) / h;
        for x in 0..w {
            let sx = x0 + (x * cw + cw / 2) / w;
            let base = (sy * r.width + sx) * r.channels;
            let px = &r.pixels[base..base + r.channels];
            for k in 0..c {
                out[(k * h + y) * w + x] = match (r.channels, c) {
                    (1, _) => px[0],
                    (3, 3) => px[k],
                    _ => (px[0] + px[1] + px[2]) / 3.0,
                };
            }
        }
    }
    Ok(out)
}

fn is_netpbm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "pgm" | "pnm"))
}

/// Loads every Netpbm file of a directory in name order. Any unreadable or
/// malformed file fails the whole load.
pub fn load_directory<T: Scalar>(dir: &Path, dims: [usize; 3]) -> Result<Dataset<T>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_netpbm(&path) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Ingest {
            path: dir.to_path_buf(),
            reason: "no .ppm/.pgm/.pnm files".into(),
        });
    }
    let mut images = Vec::with_capacity(paths.len());
    for path in paths {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let img = parse_netpbm(&bytes)
            .and_then(|r| fit_raster(&r, dims))
            .map_err(|reason| Error::Ingest {
                path: path.clone(),
                reason,
            })?;
        images.push(img);
    }
    Dataset::from_images(dims, &images)
}

/// Encodes a planar `[c, h, w]` image (`c` = 1 or 3, values in `[0, 1]`)
/// as binary PGM/PPM with 8-bit samples.
pub fn encode_netpbm<T: Scalar>(dims: [usize; 3], pixels: &[T]) -> Result<Vec<u8>> {
    let [c, h, w] = dims;
    if !(c == 1 || c == 3) || pixels.len() != c * h * w {
        return Err(Error::Validation(format!(
            "cannot encode {} values as {dims:?} netpbm",
            pixels.len()
        )));
    }
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = pixels[(ch * h + y) * w + x].as_f64().clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}
