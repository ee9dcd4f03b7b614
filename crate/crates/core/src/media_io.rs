//! Netpbm codec, half-scale resampling, dataset manifests and synthetic covers.
//!
//! Only binary P5 (gray) and P6 (RGB) with maxval 255 are accepted. P6 input is
//! converted to luma with Rec.601 weights on decode.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Errors produced while decoding Netpbm data.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PnmError {
    #[error("not a binary Netpbm P5/P6 stream")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// 8-bit grayscale raster, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Image8 {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl fmt::Debug for Image8 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image8")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Image8 {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimensions {
                width,
                height,
                reason: "image must be non-empty",
            });
        }
        if pixels.len() != width * height {
            return Err(Error::Dimensions {
                width,
                height,
                reason: "pixel count does not match dimensions",
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Pixels as 64-bit reals, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p)).collect()
    }

    pub fn mirrored_horizontally(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks_exact(self.width) {
            pixels.extend(row.iter().rev());
        }
        Self {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self, field: &str) -> Result<u32, PnmError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PnmError::MalformedHeader(format!("missing {field}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| PnmError::MalformedHeader(format!("{field} out of range")))
    }
}

/// Decoded Netpbm raster before any gray conversion.
enum Pnm<'a> {
    Gray {
        width: usize,
        height: usize,
        data: &'a [u8],
    },
    Rgb {
        width: usize,
        height: usize,
        data: &'a [u8],
    },
}

fn parse_pnm(bytes: &[u8]) -> Result<Pnm<'_>, PnmError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(PnmError::BadMagic);
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return Err(PnmError::BadMagic),
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    if cur.pos < bytes.len() && !bytes[cur.pos].is_ascii_whitespace() && bytes[cur.pos] != b'#' {
        return Err(PnmError::BadMagic);
    }
    let width = cur.read_uint("width")? as usize;
    let height = cur.read_uint("height")? as usize;
    let maxval = cur.read_uint("maxval")?;
    if width == 0 || height == 0 {
        return Err(PnmError::MalformedHeader("zero dimension".into()));
    }
    if maxval != 255 {
        return Err(PnmError::UnsupportedMaxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        Some(_) => {
            return Err(PnmError::MalformedHeader(
                "missing whitespace after maxval".into(),
            ))
        }
        None => {
            return Err(PnmError::Truncated {
                expected: width * height * channels,
                found: 0,
            })
        }
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| PnmError::MalformedHeader("dimensions overflow".into()))?;
    let data = &bytes[cur.pos..];
    if data.len() < expected {
        return Err(PnmError::Truncated {
            expected,
            found: data.len(),
        });
    }
    let data = &data[..expected];
    Ok(if channels == 1 {
        Pnm::Gray {
            width,
            height,
            data,
        }
    } else {
        Pnm::Rgb {
            width,
            height,
            data,
        }
    })
}

/// Decodes a P5 stream, or a P6 stream converted to gray via [`rgb_to_gray`].
pub fn read_pgm(bytes: &[u8]) -> Result<Image8> {
    match parse_pnm(bytes)? {
        Pnm::Gray {
            width,
            height,
            data,
        } => Image8::new(width, height, data.to_vec()),
        Pnm::Rgb {
            width,
            height,
            data,
        } => {
            let n = width * height;
            let mut r = Vec::with_capacity(n);
            let mut g = Vec::with_capacity(n);
            let mut b = Vec::with_capacity(n);
            for px in data.chunks_exact(3) {
                r.push(px[0]);
                g.push(px[1]);
                b.push(px[2]);
            }
            rgb_to_gray(
                &Image8::new(width, height, r)?,
                &Image8::new(width, height, g)?,
                &Image8::new(width, height, b)?,
            )
        }
    }
}

/// Canonical P5 header for the given dimensions.
pub fn pgm_header(width: usize, height: usize) -> String {
    format!("P5\n{width} {height}\n255\n")
}

/// Number of bytes [`write_pgm`] emits for an image of these dimensions.
pub fn pgm_encoded_len(width: usize, height: usize) -> usize {
    pgm_header(width, height).len() + width * height
}

pub fn write_pgm(img: &Image8) -> Vec<u8> {
    let header = pgm_header(img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.pixels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&img.pixels);
    out
}

pub fn load_pgm(path: &Path) -> Result<Image8> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pgm(&bytes)
}

pub fn save_pgm(path: &Path, img: &Image8) -> Result<()> {
    std::fs::write(path, write_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Rec.601 luma, rounded half away from zero.
pub fn rgb_to_gray(r: &Image8, g: &Image8, b: &Image8) -> Result<Image8> {
    for other in [g, b] {
        if other.dims() != r.dims() {
            return Err(Error::DimensionMismatch {
                left: r.dims(),
                right: other.dims(),
            });
        }
    }
    let pixels = r
        .pixels
        .iter()
        .zip(&g.pixels)
        .zip(&b.pixels)
        .map(|((&r, &g), &b)| {
            let y = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Image8::new(r.width, r.height, pixels)
}

fn require_even(img: &Image8) -> Result<()> {
    if img.width % 2 != 0 || img.height % 2 != 0 {
        return Err(Error::Dimensions {
            width: img.width,
            height: img.height,
            reason: "width and height must be even",
        });
    }
    Ok(())
}

/// Half-scale bilinear resampling with aligned sample positions: every output
/// pixel is the round-half-up mean of its 2×2 source block.
pub fn resize_half_bilinear(img: &Image8) -> Result<Image8> {
    require_even(img)?;
    let (w, h) = (img.width / 2, img.height / 2);
    let mut pixels = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let sum = u32::from(img.get(2 * r, 2 * c))
                + u32::from(img.get(2 * r, 2 * c + 1))
                + u32::from(img.get(2 * r + 1, 2 * c))
                + u32::from(img.get(2 * r + 1, 2 * c + 1));
            pixels.push(((sum + 2) / 4) as u8);
        }
    }
    Image8::new(w, h, pixels)
}

pub fn crop_bottom_right_quarter(img: &Image8) -> Result<Image8> {
    require_even(img)?;
    let (w, h) = (img.width / 2, img.height / 2);
    let mut pixels = Vec::with_capacity(w * h);
    for r in h..img.height {
        let start = r * img.width + w;
        pixels.extend_from_slice(&img.pixels[start..start + w]);
    }
    Image8::new(w, h, pixels)
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

fn blur_separable(plane: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let radius = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for r in 0..height {
        for c in 0..width {
            tmp[r * width + c] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[r * width + reflect(c as isize + k as isize - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for r in 0..height {
        for c in 0..width {
            out[r * width + c] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[reflect(r as isize + k as isize - radius, height) * width + c])
                .sum();
        }
    }
    out
}

/// Amplitude of the white noise before blurring, in intensity units.
const SYNTH_NOISE_AMPLITUDE: f64 = 120.0;
/// Maximum intensity swing of the random linear gradient across the image.
const SYNTH_GRADIENT_SWING: f64 = 60.0;

/// Deterministic pseudo-natural cover: seeded uniform noise blurred by a
/// separable Gaussian with standard deviation `smoothness`, plus a random
/// linear gradient, quantized to 8 bits.
pub fn synth_cover(seed: u64, width: usize, height: usize, smoothness: f64) -> Result<Image8> {
    if width == 0 || height == 0 {
        return Err(Error::Dimensions {
            width,
            height,
            reason: "image must be non-empty",
        });
    }
    if !(smoothness >= 0.0 && smoothness.is_finite()) {
        return Err(Error::param("smoothness", "must be a finite value >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..width * height)
        .map(|_| rng.gen_range(-1.0..1.0) * SYNTH_NOISE_AMPLITUDE)
        .collect();
    let texture = if smoothness > 0.0 {
        blur_separable(&noise, width, height, &gaussian_taps(smoothness))
    } else {
        noise
    };
    let base = rng.gen_range(80.0..176.0);
    let gx = rng.gen_range(-1.0..1.0) * SYNTH_GRADIENT_SWING / width as f64;
    let gy = rng.gen_range(-1.0..1.0) * SYNTH_GRADIENT_SWING / height as f64;
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let pixels = texture
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (r, c) = ((i / width) as f64, (i % width) as f64);
            let v = base + gx * (c - cx) + gy * (r - cy) + t;
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Image8::new(width, height, pixels)
}

/// Where a manifest entry's pixels come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntrySource {
    Path(PathBuf),
    Synth(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: EntrySource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    pub split_seed: u64,
    pub split_ratio: f64,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, split_seed: u64, split_ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&split_ratio) {
            return Err(Error::param("split_ratio", "must lie in [0, 1]"));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Config(format!("duplicate manifest id `{}`", e.id)));
            }
        }
        Ok(Self {
            entries,
            split_seed,
            split_ratio,
        })
    }

    /// `count` synthetic entries named `synth-0000`, ... with seeds `base_seed + i`.
    pub fn synthetic(count: usize, base_seed: u64, split_seed: u64, split_ratio: f64) -> Result<Self> {
        let entries = (0..count)
            .map(|i| ManifestEntry {
                id: format!("synth-{i:04}"),
                source: EntrySource::Synth(base_seed.wrapping_add(i as u64)),
            })
            .collect();
        Self::new(entries, split_seed, split_ratio)
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Parses the tab-separated manifest format, `<id>\t<path-or-synth:SEED>` per line.
    /// Relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path, split_seed: u64, split_ratio: f64) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, src) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("manifest line {}: expected `<id>\\t<source>`", lineno + 1))
            })?;
            let source = match src.strip_prefix("synth:") {
                Some(seed) => EntrySource::Synth(seed.trim().parse().map_err(|_| {
                    Error::Config(format!("manifest line {}: bad synth seed", lineno + 1))
                })?),
                None => EntrySource::Path(base_dir.join(src)),
            };
            entries.push(ManifestEntry {
                id: id.to_string(),
                source,
            });
        }
        Self::new(entries, split_seed, split_ratio)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.id);
            out.push('\t');
            match &e.source {
                EntrySource::Path(p) => out.push_str(&p.to_string_lossy()),
                EntrySource::Synth(seed) => out.push_str(&format!("synth:{seed}")),
            }
            out.push('\n');
        }
        out
    }
}

/// Seeded shuffle followed by a split with `round(ratio * n)` training entries.
pub fn split_manifest(m: &DatasetManifest) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    if m.entries.is_empty() {
        return Err(Error::Empty("manifest has no entries"));
    }
    let mut shuffled = m.entries.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(m.split_seed));
    let n_train = (m.split_ratio * shuffled.len() as f64).round() as usize;
    let val = shuffled.split_off(n_train.min(shuffled.len()));
    Ok((shuffled, val))
}

/// Synthetic-source parameters used when materializing `synth:` entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub smoothness: f64,
}

pub fn load_entry(entry: &ManifestEntry, synth: &SynthSpec) -> Result<Image8> {
    match &entry.source {
        EntrySource::Path(p) => load_pgm(p),
        EntrySource::Synth(seed) => synth_cover(*seed, synth.width, synth.height, synth.smoothness),
    }
}
