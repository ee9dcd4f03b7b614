//! Daubechies-8 directional filter bank and undecimated first-level residuals.
//!
//! All arithmetic is in `f64`. Convolutions use full output support with
//! whole-sample symmetric (non-repeating edge) extension of the input.

use crate::media_io::Image8;
use crate::{Error, Result};

/// Dense row-major 2D array of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::Dimensions {
                width,
                height,
                reason: "plane data length does not match dimensions",
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_image(img: &Image8) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.to_f64(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Orthogonal wavelet decomposition filters.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPair {
    pub lowpass: Vec<f64>,
    pub highpass: Vec<f64>,
}

/// Daubechies-8 decomposition lowpass taps (16 taps, 8 vanishing moments),
/// minimum-phase spectral factor rounded to the nearest `f64`.
const DB8_LOWPASS: [f64; 16] = [
    -0.00011747678412476953,
    0.0006754494064505693,
    -0.00039174037337694705,
    -0.004870352993451574,
    0.008746094047405777,
    0.013981027917398282,
    -0.044088253930794755,
    -0.017369301001807547,
    0.12874742662047847,
    0.0004724845739132828,
    -0.2840155429615469,
    -0.015829105256349306,
    0.5853546836542067,
    0.6756307362972898,
    0.31287159091429995,
    0.05441584224310401,
];

pub fn daubechies8_filters() -> FilterPair {
    let lowpass = DB8_LOWPASS.to_vec();
    let n = lowpass.len();
    // Quadrature mirror: highpass[k] = (-1)^k * lowpass[n-1-k].
    let highpass = (0..n)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * lowpass[n - 1 - k]
        })
        .collect();
    FilterPair { lowpass, highpass }
}

/// Separable 2D kernel `K[i][j] = vertical[i] * horizontal[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableKernel {
    pub vertical: Vec<f64>,
    pub horizontal: Vec<f64>,
}

impl SeparableKernel {
    pub fn to_plane(&self) -> Plane {
        let mut data = Vec::with_capacity(self.vertical.len() * self.horizontal.len());
        for v in &self.vertical {
            data.extend(self.horizontal.iter().map(|h| v * h));
        }
        Plane {
            width: self.horizontal.len(),
            height: self.vertical.len(),
            data,
        }
    }

    /// Kernel of absolute tap values, still separable.
    pub fn abs(&self) -> Self {
        Self {
            vertical: self.vertical.iter().map(|v| v.abs()).collect(),
            horizontal: self.horizontal.iter().map(|v| v.abs()).collect(),
        }
    }

    /// Kernel mirrored left-to-right.
    pub fn mirrored_horizontally(&self) -> Self {
        Self {
            vertical: self.vertical.clone(),
            horizontal: self.horizontal.iter().rev().copied().collect(),
        }
    }
}

/// The LH, HL and HH directional kernels as outer products of the filter pair.
pub fn directional_kernels(fp: &FilterPair) -> [SeparableKernel; 3] {
    let k = |v: &[f64], h: &[f64]| SeparableKernel {
        vertical: v.to_vec(),
        horizontal: h.to_vec(),
    };
    [
        k(&fp.lowpass, &fp.highpass),
        k(&fp.highpass, &fp.lowpass),
        k(&fp.highpass, &fp.highpass),
    ]
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

fn check_support(pw: usize, ph: usize, kw: usize, kh: usize) -> Result<()> {
    if pw < kw || ph < kh {
        return Err(Error::Dimensions {
            width: pw,
            height: ph,
            reason: "plane is smaller than the kernel support",
        });
    }
    Ok(())
}

/// Full 2D convolution of a symmetrically extended plane.
///
/// Output is `(h + kh - 1) x (w + kw - 1)`; entry `(u, v)` is
/// `sum_{a,b} K[a][b] * X[u - a][v - b]` with out-of-range indices reflected.
pub fn conv2_mirror(plane: &Plane, kernel: &Plane) -> Result<Plane> {
    check_support(plane.width, plane.height, kernel.width, kernel.height)?;
    let (kh, kw) = (kernel.height, kernel.width);
    let (oh, ow) = (plane.height + kh - 1, plane.width + kw - 1);
    let mut out = Plane::zeros(ow, oh);
    for u in 0..oh {
        for v in 0..ow {
            let mut acc = 0.0;
            for a in 0..kh {
                let r = reflect(u as isize - a as isize, plane.height);
                let row = &plane.data[r * plane.width..(r + 1) * plane.width];
                for b in 0..kw {
                    let c = reflect(v as isize - b as isize, plane.width);
                    acc += kernel.data[a * kw + b] * row[c];
                }
            }
            out.data[u * ow + v] = acc;
        }
    }
    Ok(out)
}

/// [`conv2_mirror`] for a separable kernel, done as two 1D passes.
pub fn conv2_mirror_separable(plane: &Plane, kernel: &SeparableKernel) -> Result<Plane> {
    let (kh, kw) = (kernel.vertical.len(), kernel.horizontal.len());
    check_support(plane.width, plane.height, kw, kh)?;
    let (oh, ow) = (plane.height + kh - 1, plane.width + kw - 1);
    // Horizontal pass over the original rows.
    let mut tmp = vec![0.0; plane.height * ow];
    for r in 0..plane.height {
        let row = &plane.data[r * plane.width..(r + 1) * plane.width];
        for v in 0..ow {
            tmp[r * ow + v] = kernel
                .horizontal
                .iter()
                .enumerate()
                .map(|(b, k)| k * row[reflect(v as isize - b as isize, plane.width)])
                .sum();
        }
    }
    // Vertical pass; the extension commutes with the horizontal filter.
    let mut out = Plane::zeros(ow, oh);
    for u in 0..oh {
        for (a, k) in kernel.vertical.iter().enumerate() {
            let r = reflect(u as isize - a as isize, plane.height);
            let src = &tmp[r * ow..(r + 1) * ow];
            let dst = &mut out.data[u * ow..(u + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
    Ok(out)
}

/// Valid-mode correlation with a separable kernel:
/// `out[i][j] = sum_{a,b} K[a][b] * X[i + a][j + b]`.
pub fn correlate_valid_separable(plane: &Plane, kernel: &SeparableKernel) -> Result<Plane> {
    let (kh, kw) = (kernel.vertical.len(), kernel.horizontal.len());
    check_support(plane.width, plane.height, kw, kh)?;
    let (oh, ow) = (plane.height - kh + 1, plane.width - kw + 1);
    let mut tmp = vec![0.0; plane.height * ow];
    for r in 0..plane.height {
        let row = &plane.data[r * plane.width..(r + 1) * plane.width];
        for j in 0..ow {
            tmp[r * ow + j] = kernel
                .horizontal
                .iter()
                .zip(&row[j..j + kw])
                .map(|(k, x)| k * x)
                .sum();
        }
    }
    let mut out = Plane::zeros(ow, oh);
    for i in 0..oh {
        for (a, k) in kernel.vertical.iter().enumerate() {
            let src = &tmp[(i + a) * ow..(i + a + 1) * ow];
            let dst = &mut out.data[i * ow..(i + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
    Ok(out)
}

/// LH, HL and HH undecimated residuals of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub planes: [Plane; 3],
}

/// Residuals of a real-valued plane under the given directional kernels.
pub fn residuals_of_plane(plane: &Plane, kernels: &[SeparableKernel; 3]) -> Result<ResidualSet> {
    Ok(ResidualSet {
        planes: [
            conv2_mirror_separable(plane, &kernels[0])?,
            conv2_mirror_separable(plane, &kernels[1])?,
            conv2_mirror_separable(plane, &kernels[2])?,
        ],
    })
}

pub fn wavelet_residuals(img: &Image8) -> Result<ResidualSet> {
    residuals_of_plane(
        &Plane::from_image(img),
        &directional_kernels(&daubechies8_filters()),
    )
}
