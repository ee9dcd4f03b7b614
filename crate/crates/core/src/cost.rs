//! Parametric S-UNIWARD cost maps.
//!
//! The additive cost of a ±1 change at pixel `(i, j)` is
//! `sum_k sum_{a,b} |K_k[a][b]| / (sigma + |W_k[i + a][j + b]|)`, where `W_k` are
//! the full-support directional residuals of the cover. The inner sum is a
//! valid-mode correlation of `1 / (sigma + |W_k|)` with `|K_k|`, evaluated
//! separably.

use std::io::{Read, Write};

use crate::media_io::Image8;
use crate::wavelet::{
    correlate_valid_separable, daubechies8_filters, directional_kernels, residuals_of_plane,
    Plane, ResidualSet, SeparableKernel,
};
use crate::{Error, Result};

/// Base stabilizer before `sigma_mult` is applied.
pub const BASE_SIGMA: f64 = 1.0;
/// Base wet cost before `wetcost_mult` is applied.
pub const BASE_WET_COST: f64 = 1e8;

/// Multipliers applied to the base σ, ε and wet cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterTriple {
    pub sigma_mult: f64,
    pub epsilon_mult: f64,
    pub wetcost_mult: f64,
}

impl Default for ParameterTriple {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl ParameterTriple {
    /// Unmodified S-UNIWARD.
    pub const DEFAULT: Self = Self {
        sigma_mult: 1.0,
        epsilon_mult: 1.0,
        wetcost_mult: 1.0,
    };

    pub fn new(sigma_mult: f64, epsilon_mult: f64, wetcost_mult: f64) -> Result<Self> {
        let p = Self {
            sigma_mult,
            epsilon_mult,
            wetcost_mult,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_mult", self.sigma_mult),
            ("epsilon_mult", self.epsilon_mult),
            ("wetcost_mult", self.wetcost_mult),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.sigma_mult, self.epsilon_mult, self.wetcost_mult]
    }

    pub fn from_array(v: [f64; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }
}

/// Per-pixel costs of +1 and −1 changes. Entries at or above `wet_threshold`
/// are wet and must never be modified.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    width: usize,
    height: usize,
    rho_plus: Vec<f64>,
    rho_minus: Vec<f64>,
    wet_threshold: f64,
}

impl CostMap {
    pub fn new(
        width: usize,
        height: usize,
        rho_plus: Vec<f64>,
        rho_minus: Vec<f64>,
        wet_threshold: f64,
    ) -> Result<Self> {
        if rho_plus.len() != width * height || rho_minus.len() != width * height {
            return Err(Error::Dimensions {
                width,
                height,
                reason: "cost plane length does not match dimensions",
            });
        }
        if !(wet_threshold > 0.0 && wet_threshold.is_finite()) {
            return Err(Error::param("wet_threshold", "must be finite and > 0"));
        }
        let mut map = Self {
            width,
            height,
            rho_plus,
            rho_minus,
            wet_threshold,
        };
        for rho in map.rho_plus.iter_mut().chain(map.rho_minus.iter_mut()) {
            if rho.is_nan() || *rho < 0.0 {
                return Err(Error::NonFinite {
                    what: "cost entry (negative or NaN)".into(),
                });
            }
            if *rho >= wet_threshold {
                *rho = wet_threshold;
            }
        }
        Ok(map)
    }

    /// Uniform symmetric costs, no wet pixels.
    pub fn uniform(width: usize, height: usize, rho: f64) -> Result<Self> {
        let n = width * height;
        Self::new(width, height, vec![rho; n], vec![rho; n], BASE_WET_COST)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.rho_plus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho_plus.is_empty()
    }

    pub fn rho_plus(&self) -> &[f64] {
        &self.rho_plus
    }

    pub fn rho_minus(&self) -> &[f64] {
        &self.rho_minus
    }

    pub fn wet_threshold(&self) -> f64 {
        self.wet_threshold
    }

    #[inline]
    pub fn is_wet_plus(&self, idx: usize) -> bool {
        self.rho_plus[idx] >= self.wet_threshold
    }

    #[inline]
    pub fn is_wet_minus(&self, idx: usize) -> bool {
        self.rho_minus[idx] >= self.wet_threshold
    }

    /// Both directions wet.
    pub fn is_wet(&self, idx: usize) -> bool {
        self.is_wet_plus(idx) && self.is_wet_minus(idx)
    }

    /// Marks both directions of a pixel wet.
    pub fn mark_wet(&mut self, idx: usize) {
        self.rho_plus[idx] = self.wet_threshold;
        self.rho_minus[idx] = self.wet_threshold;
    }

    /// Pixels with at least one embeddable direction.
    pub fn embeddable_pixels(&self) -> usize {
        (0..self.len()).filter(|&i| !self.is_wet(i)).count()
    }

    /// Writes the `SUNWCOST` debug raster: magic, `u32` width and height,
    /// `f64` wet threshold, then ρ+ and ρ− row-major, all little-endian.
    pub fn write_dump(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(COST_DUMP_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&self.wet_threshold.to_le_bytes())?;
        for v in self.rho_plus.iter().chain(&self.rho_minus) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(mut r: impl Read) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("cost dump: {msg}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != COST_DUMP_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        let mut f64buf = [0u8; 8];
        let mut read_u32 = |r: &mut dyn Read| -> Result<usize> {
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(u32buf) as usize)
        };
        let width = read_u32(&mut r)?;
        let height = read_u32(&mut r)?;
        r.read_exact(&mut f64buf).map_err(|_| bad("truncated header"))?;
        let wet = f64::from_le_bytes(f64buf);
        let n = width * height;
        let mut vals = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            r.read_exact(&mut f64buf).map_err(|_| bad("truncated raster"))?;
            vals.push(f64::from_le_bytes(f64buf));
        }
        let minus = vals.split_off(n);
        Self::new(width, height, vals, minus, wet)
    }
}

pub const COST_DUMP_MAGIC: &[u8; 8] = b"SUNWCOST";

/// Parameter-independent state of a cover: its directional residuals and
/// absolute kernels. Reuse it to evaluate many parameter triples cheaply.
#[derive(Debug, Clone)]
pub struct CostContext {
    cover: Image8,
    residuals: ResidualSet,
    abs_kernels: [SeparableKernel; 3],
}

impl CostContext {
    pub fn new(cover: &Image8) -> Result<Self> {
        Self::with_kernels(cover, directional_kernels(&daubechies8_filters()))
    }

    pub fn with_kernels(cover: &Image8, kernels: [SeparableKernel; 3]) -> Result<Self> {
        let residuals = residuals_of_plane(&Plane::from_image(cover), &kernels)?;
        let abs_kernels = [kernels[0].abs(), kernels[1].abs(), kernels[2].abs()];
        Ok(Self {
            cover: cover.clone(),
            residuals,
            abs_kernels,
        })
    }

    pub fn cover(&self) -> &Image8 {
        &self.cover
    }

    pub fn residuals(&self) -> &ResidualSet {
        &self.residuals
    }

    pub fn cost_map(&self, p: &ParameterTriple) -> Result<CostMap> {
        p.validate()?;
        let sigma = BASE_SIGMA * p.sigma_mult;
        let wet = BASE_WET_COST * p.wetcost_mult;
        let (w, h) = self.cover.dims();
        let mut rho = vec![0.0; w * h];
        for (plane, kernel) in self.residuals.planes.iter().zip(&self.abs_kernels) {
            let inv = plane.map(|v| 1.0 / (sigma + v.abs()));
            let part = correlate_valid_separable(&inv, kernel)?;
            for (acc, v) in rho.iter_mut().zip(part.data()) {
                *acc += v;
            }
        }
        for v in rho.iter_mut() {
            if !(v.is_finite() && *v < wet) {
                *v = wet;
            }
        }
        let mut rho_plus = rho.clone();
        let mut rho_minus = rho;
        for (i, &px) in self.cover.pixels().iter().enumerate() {
            if px == 255 {
                rho_plus[i] = wet;
            }
            if px == 0 {
                rho_minus[i] = wet;
            }
        }
        CostMap::new(w, h, rho_plus, rho_minus, wet)
    }
}

pub fn compute_cost_map(cover: &Image8, p: &ParameterTriple) -> Result<CostMap> {
    CostContext::new(cover)?.cost_map(p)
}

/// Coefficient of variation (population std / mean) of all non-wet costs.
pub fn cost_contrast(c: &CostMap) -> Result<f64> {
    let vals: Vec<f64> = c
        .rho_plus
        .iter()
        .chain(&c.rho_minus)
        .copied()
        .filter(|&v| v < c.wet_threshold)
        .collect();
    if vals.is_empty() {
        return Err(Error::AllWet);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media_io::synth_cover;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image8 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image8::new(w, h, (0..w * h).map(|_| rng.gen_range(1..255)).collect()).unwrap()
    }

    /// Textbook double sum: residuals by direct convolution, then for every
    /// pixel the sum over every coefficient its change touches.
    pub(crate) fn direct_cost_oracle(img: &Image8, sigma: f64) -> Vec<f64> {
        let fp = daubechies8_filters();
        let taps = [
            (fp.lowpass.clone(), fp.highpass.clone()),
            (fp.highpass.clone(), fp.lowpass.clone()),
            (fp.highpass.clone(), fp.highpass.clone()),
        ];
        let (w, h) = (img.width() as isize, img.height() as isize);
        let ext = |i: isize, n: isize| -> isize {
            if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            }
        };
        let mut rho = vec![0.0; (w * h) as usize];
        for (vert, horiz) in &taps {
            let k = |a: usize, b: usize| vert[a] * horiz[b];
            let (ow, oh) = (w + 15, h + 15);
            let mut coef = vec![0.0; (ow * oh) as usize];
            for u in 0..oh {
                for v in 0..ow {
                    let mut s = 0.0;
                    for a in 0..16 {
                        for b in 0..16 {
                            let r = ext(u - a as isize, h);
                            let c = ext(v - b as isize, w);
                            s += k(a, b) * f64::from(img.get(r as usize, c as usize));
                        }
                    }
                    coef[(u * ow + v) as usize] = s;
                }
            }
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0;
                    for a in 0..16 {
                        for b in 0..16 {
                            let wc = coef[((i + a) * ow + j + b as isize) as usize];
                            s += k(a as usize, b as usize).abs() / (sigma + wc.abs());
                        }
                    }
                    rho[(i * w + j) as usize] += s;
                }
            }
        }
        rho
    }

    #[test]
    fn matches_direct_double_sum() {
        for seed in 0..3 {
            let img = random_image(seed, 16, 16);
            for sigma in [1.0, 1.4] {
                let p = ParameterTriple::new(sigma, 1.0, 1.0).unwrap();
                let fast = compute_cost_map(&img, &p).unwrap();
                let slow = direct_cost_oracle(&img, sigma);
                for (a, b) in fast.rho_plus().iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn constant_image_has_equal_interior_costs() {
        let flat = Image8::filled(48, 48, 128).unwrap();
        let c = compute_cost_map(&flat, &ParameterTriple::DEFAULT).unwrap();
        let centre = c.rho_plus()[24 * 48 + 24];
        assert!(centre.is_finite() && centre > 0.0);
        for i in 16..32 {
            for j in 16..32 {
                assert!((c.rho_plus()[i * 48 + j] - centre).abs() < 1e-9);
            }
        }
        assert_eq!(c.rho_plus(), c.rho_minus());
    }

    #[test]
    fn larger_sigma_lowers_every_cost() {
        for seed in 0..20 {
            let img = random_image(100 + seed, 64, 64);
            let ctx = CostContext::new(&img).unwrap();
            let base = ctx.cost_map(&ParameterTriple::DEFAULT).unwrap();
            let wide = ctx.cost_map(&ParameterTriple::new(1.4, 1.0, 1.0).unwrap()).unwrap();
            for i in 0..base.len() {
                if !base.is_wet_plus(i) {
                    assert!(wide.rho_plus()[i] <= base.rho_plus()[i]);
                }
            }
        }
    }

    #[test]
    fn range_boundaries_are_wet() {
        let mut img = synth_cover(3, 32, 32, 1.0).unwrap();
        img.pixels_mut()[5] = 255;
        img.pixels_mut()[6] = 0;
        let p = ParameterTriple::new(1.0, 1.0, 3.0).unwrap();
        let c = compute_cost_map(&img, &p).unwrap();
        assert!(c.rho_plus()[5] >= 1e8 * 3.0);
        assert!(c.rho_minus()[5] < c.wet_threshold());
        assert!(c.rho_minus()[6] >= 1e8 * 3.0);
        assert!(c.rho_plus()[6] < c.wet_threshold());
    }

    #[test]
    fn wetcost_scales_threshold_only() {
        let img = synth_cover(8, 32, 32, 2.0).unwrap();
        let ctx = CostContext::new(&img).unwrap();
        let a = ctx.cost_map(&ParameterTriple::DEFAULT).unwrap();
        let b = ctx.cost_map(&ParameterTriple::new(1.0, 1.0, 2.5).unwrap()).unwrap();
        assert_eq!(b.wet_threshold(), a.wet_threshold() * 2.5);
        for i in 0..a.len() {
            if !a.is_wet_plus(i) {
                assert_eq!(a.rho_plus()[i], b.rho_plus()[i]);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let img = synth_cover(1, 32, 32, 1.0).unwrap();
        assert!(compute_cost_map(&img, &ParameterTriple { sigma_mult: 0.0, ..Default::default() }).is_err());
        assert!(compute_cost_map(&img, &ParameterTriple { wetcost_mult: -1.0, ..Default::default() }).is_err());
        assert!(compute_cost_map(&Image8::filled(12, 40, 3).unwrap(), &ParameterTriple::DEFAULT).is_err());
    }

    #[test]
    fn mirrored_cover_with_mirrored_kernels_mirrors_interior() {
        let img = synth_cover(21, 48, 40, 1.5).unwrap();
        let kernels = directional_kernels(&daubechies8_filters());
        let mirrored_kernels = [
            kernels[0].mirrored_horizontally(),
            kernels[1].mirrored_horizontally(),
            kernels[2].mirrored_horizontally(),
        ];
        let a = CostContext::with_kernels(&img, kernels).unwrap().cost_map(&ParameterTriple::DEFAULT).unwrap();
        let b = CostContext::with_kernels(&img.mirrored_horizontally(), mirrored_kernels)
            .unwrap()
            .cost_map(&ParameterTriple::DEFAULT)
            .unwrap();
        let w = 48;
        for r in 16..24 {
            for c in 16..32 {
                let lhs = a.rho_plus()[r * w + c];
                let rhs = b.rho_plus()[r * w + (w - 1 - c)];
                assert!((lhs - rhs).abs() < 1e-9, "({r},{c}) {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn contrast_behaviour() {
        let flat = CostMap::uniform(16, 16, 2.0).unwrap();
        assert!(cost_contrast(&flat).unwrap().abs() < 1e-12);
        let mut wet = flat.clone();
        (0..wet.len()).for_each(|i| wet.mark_wet(i));
        assert!(matches!(cost_contrast(&wet), Err(Error::AllWet)));
        for seed in 0..20 {
            let ctx = CostContext::new(&synth_cover(seed, 64, 64, 1.0).unwrap()).unwrap();
            let c1 = cost_contrast(&ctx.cost_map(&ParameterTriple::DEFAULT).unwrap()).unwrap();
            let c15 = cost_contrast(&ctx.cost_map(&ParameterTriple::new(1.5, 1.0, 1.0).unwrap()).unwrap()).unwrap();
            assert!(c15 <= c1, "seed {seed}: {c15} > {c1}");
        }
    }

    #[test]
    fn dump_round_trip_and_determinism() {
        let img = synth_cover(2, 24, 24, 1.0).unwrap();
        let c = compute_cost_map(&img, &ParameterTriple::DEFAULT).unwrap();
        assert_eq!(c, compute_cost_map(&img, &ParameterTriple::DEFAULT).unwrap());
        let mut buf = Vec::new();
        c.write_dump(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"SUNWCOST");
        assert_eq!(buf.len(), 8 + 8 + 8 + 2 * 8 * 576);
        assert_eq!(CostMap::read_dump(&buf[..]).unwrap(), c);
    }
}
