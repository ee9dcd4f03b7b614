//! Payload-limited ternary embedding simulator.
//!
//! Costs become change probabilities through the Gibbs form
//! `p± = exp(-λρ±) / (1 + exp(-λρ+) + exp(-λρ-))`, with λ found by bisection so
//! that the ternary entropy matches the requested payload. Changes are then
//! drawn from a seeded stream, one uniform per pixel in raster order.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::{CostContext, CostMap, ParameterTriple};
use crate::media_io::Image8;
use crate::{Error, Result};

/// Base probability snap tolerance before `epsilon_mult` is applied.
pub const BASE_EPSILON: f64 = 1e-10;

/// Relative payload tolerance of [`solve_lambda`].
pub const PAYLOAD_TOLERANCE: f64 = 1e-3;
const MAX_BISECTIONS: usize = 90;
const MAX_DOUBLINGS: usize = 200;

/// Per-pixel ternary change probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    p_plus: Vec<f64>,
    p_minus: Vec<f64>,
    lambda: f64,
}

impl ProbMap {
    pub fn new(
        width: usize,
        height: usize,
        p_plus: Vec<f64>,
        p_minus: Vec<f64>,
        lambda: f64,
    ) -> Result<Self> {
        if p_plus.len() != width * height || p_minus.len() != width * height {
            return Err(Error::Dimensions {
                width,
                height,
                reason: "probability plane length does not match dimensions",
            });
        }
        for (&p, &m) in p_plus.iter().zip(&p_minus) {
            if !(p >= 0.0 && m >= 0.0 && p + m <= 1.0 + 1e-12) {
                return Err(Error::param("probmap", format!("invalid pair ({p}, {m})")));
            }
        }
        Ok(Self {
            width,
            height,
            p_plus,
            p_minus,
            lambda,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            p_plus: vec![0.0; width * height],
            p_minus: vec![0.0; width * height],
            lambda: 0.0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.p_plus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_plus.is_empty()
    }

    pub fn p_plus(&self) -> &[f64] {
        &self.p_plus
    }

    pub fn p_minus(&self) -> &[f64] {
        &self.p_minus
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Expected number of changed pixels.
    pub fn expected_changes(&self) -> f64 {
        self.p_plus.iter().zip(&self.p_minus).map(|(p, m)| p + m).sum()
    }
}

pub fn ternary_probs(c: &CostMap, lambda: f64) -> Result<ProbMap> {
    if !(lambda >= 0.0) || lambda.is_infinite() {
        return Err(Error::param("lambda", format!("must be finite and >= 0, got {lambda}")));
    }
    let n = c.len();
    let mut p_plus = Vec::with_capacity(n);
    let mut p_minus = Vec::with_capacity(n);
    for i in 0..n {
        let ep = if c.is_wet_plus(i) {
            0.0
        } else {
            (-lambda * c.rho_plus()[i]).exp()
        };
        let em = if c.is_wet_minus(i) {
            0.0
        } else {
            (-lambda * c.rho_minus()[i]).exp()
        };
        let z = 1.0 + ep + em;
        p_plus.push(ep / z);
        p_minus.push(em / z);
    }
    Ok(ProbMap {
        width: c.width(),
        height: c.height(),
        p_plus,
        p_minus,
        lambda,
    })
}

#[inline]
fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.log2()
    } else {
        0.0
    }
}

/// Total ternary Shannon entropy in bits.
pub fn payload_entropy(pm: &ProbMap) -> f64 {
    pm.p_plus
        .iter()
        .zip(&pm.p_minus)
        .map(|(&p, &m)| plogp(p) + plogp(m) + plogp((1.0 - p - m).max(0.0)))
        .sum()
}

/// Maximum payload the map can carry: `log2(1 + allowed directions)` per pixel.
pub fn capacity_bits(c: &CostMap) -> f64 {
    (0..c.len())
        .map(|i| match (c.is_wet_plus(i), c.is_wet_minus(i)) {
            (false, false) => 3f64.log2(),
            (true, true) => 0.0,
            _ => 1.0,
        })
        .sum()
}

/// Finds λ such that the ternary entropy matches `payload_bits` within
/// [`PAYLOAD_TOLERANCE`] (relative), by doubling then bisection.
pub fn solve_lambda(c: &CostMap, payload_bits: f64) -> Result<ProbMap> {
    if !(payload_bits > 0.0 && payload_bits.is_finite()) {
        return Err(Error::param("payload_bits", "must be finite and > 0"));
    }
    let capacity = capacity_bits(c);
    if capacity == 0.0 {
        return Err(Error::AllWet);
    }
    if payload_bits > capacity * (1.0 + 1e-12) {
        return Err(Error::PayloadExceedsCapacity {
            requested: payload_bits,
            capacity,
        });
    }
    let rel_err = |h: f64| (h - payload_bits).abs() / payload_bits;

    let at_zero = ternary_probs(c, 0.0)?;
    let h0 = payload_entropy(&at_zero);
    if h0 <= payload_bits || rel_err(h0) < PAYLOAD_TOLERANCE {
        return Ok(at_zero);
    }

    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut best = loop_bracket(c, payload_bits, &mut lo, &mut hi)?;
    if rel_err(payload_entropy(&best)) < PAYLOAD_TOLERANCE {
        return Ok(best);
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let pm = ternary_probs(c, mid)?;
        let h = payload_entropy(&pm);
        let err = rel_err(h);
        if err < rel_err(payload_entropy(&best)) {
            best = pm;
        }
        if err < PAYLOAD_TOLERANCE {
            break;
        }
        if h > payload_bits {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

/// Grows `hi` until the entropy falls below the target; returns the map at `hi`.
fn loop_bracket(c: &CostMap, payload_bits: f64, lo: &mut f64, hi: &mut f64) -> Result<ProbMap> {
    for _ in 0..MAX_DOUBLINGS {
        let pm = ternary_probs(c, *hi)?;
        if payload_entropy(&pm) <= payload_bits {
            return Ok(pm);
        }
        *lo = *hi;
        *hi *= 2.0;
    }
    Err(Error::param(
        "payload_bits",
        "could not bracket lambda (costs do not reduce entropy)",
    ))
}

/// Snaps probabilities within `1e-10 * epsilon_mult` of 0 or 1.
pub fn round_probs(pm: &ProbMap, epsilon_mult: f64) -> Result<ProbMap> {
    if !(epsilon_mult > 0.0 && epsilon_mult.is_finite()) {
        return Err(Error::param("epsilon_mult", "must be finite and > 0"));
    }
    let eps = BASE_EPSILON * epsilon_mult;
    if eps >= 0.5 {
        return Err(Error::param("epsilon_mult", format!("tolerance {eps} is degenerate (>= 0.5)")));
    }
    let snap = |p: f64| {
        if p < eps {
            0.0
        } else if p > 1.0 - eps {
            1.0
        } else {
            p
        }
    };
    let mut out = pm.clone();
    for (p, m) in out.p_plus.iter_mut().zip(out.p_minus.iter_mut()) {
        *p = snap(*p);
        *m = snap(*m);
        if *p == 1.0 {
            *m = 0.0;
        } else if *m == 1.0 {
            *p = 0.0;
        }
    }
    Ok(out)
}

/// A simulated stego image.
#[derive(Debug, Clone, PartialEq)]
pub struct StegoImage {
    pub pixels: Image8,
    pub change_count: usize,
    pub params: ParameterTriple,
    pub seed: u64,
}

impl StegoImage {
    /// One-line sidecar record describing how the image was produced.
    pub fn sidecar_line(&self, rate_bpp: f64) -> String {
        format!(
            "seed={} sigma_mult={} epsilon_mult={} wetcost_mult={} rate={} changes={}\n",
            self.seed,
            self.params.sigma_mult,
            self.params.epsilon_mult,
            self.params.wetcost_mult,
            rate_bpp,
            self.change_count
        )
    }
}

fn simulate(cover: &Image8, pm: &ProbMap, seed: u64, params: ParameterTriple) -> Result<StegoImage> {
    if (pm.width, pm.height) != cover.dims() {
        return Err(Error::DimensionMismatch {
            left: cover.dims(),
            right: (pm.width, pm.height),
        });
    }
    for (i, &px) in cover.pixels().iter().enumerate() {
        if (px == 255 && pm.p_plus[i] > 0.0) || (px == 0 && pm.p_minus[i] > 0.0) {
            return Err(Error::param(
                "probmap",
                format!("pixel {i} allows a change outside [0, 255]"),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = cover.pixels().to_vec();
    let mut changes = 0;
    for (i, px) in pixels.iter_mut().enumerate() {
        let u: f64 = rng.gen();
        if u < pm.p_plus[i] {
            *px += 1;
            changes += 1;
        } else if u < pm.p_plus[i] + pm.p_minus[i] {
            *px -= 1;
            changes += 1;
        }
    }
    Ok(StegoImage {
        pixels: Image8::new(cover.width(), cover.height(), pixels)?,
        change_count: changes,
        params,
        seed,
    })
}

/// Draws one ternary change per pixel. The uniform for pixel `i` is the
/// `i`-th draw of a ChaCha8 stream keyed by `seed`.
pub fn simulate_embedding(cover: &Image8, pm: &ProbMap, seed: u64) -> Result<StegoImage> {
    simulate(cover, pm, seed, ParameterTriple::DEFAULT)
}

/// Diagnostics from one [`embed`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedStats {
    pub lambda: f64,
    pub target_bits: f64,
    /// Entropy after λ calibration.
    pub calibrated_bits: f64,
    /// Entropy after ε rounding; the difference is the rounding perturbation.
    pub rounded_bits: f64,
}

fn check_rate(rate_bpp: f64) -> Result<()> {
    if !(rate_bpp > 0.0 && rate_bpp <= 3f64.log2()) {
        return Err(Error::param("rate_bpp", format!("must lie in (0, log2 3], got {rate_bpp}")));
    }
    Ok(())
}

/// Calibrated and ε-rounded probabilities for one parameter triple.
pub fn calibrated_probs(
    ctx: &CostContext,
    p: &ParameterTriple,
    rate_bpp: f64,
) -> Result<(ProbMap, EmbedStats)> {
    check_rate(rate_bpp)?;
    let costs = ctx.cost_map(p)?;
    let target = rate_bpp * costs.len() as f64;
    let calibrated = solve_lambda(&costs, target)?;
    let rounded = round_probs(&calibrated, p.epsilon_mult)?;
    let stats = EmbedStats {
        lambda: calibrated.lambda,
        target_bits: target,
        calibrated_bits: payload_entropy(&calibrated),
        rounded_bits: payload_entropy(&rounded),
    };
    Ok((rounded, stats))
}

/// Embedding with a precomputed cost context.
pub fn embed_with_context(
    ctx: &CostContext,
    p: &ParameterTriple,
    rate_bpp: f64,
    seed: u64,
) -> Result<(StegoImage, EmbedStats)> {
    let (pm, stats) = calibrated_probs(ctx, p, rate_bpp)?;
    Ok((simulate(ctx.cover(), &pm, seed, *p)?, stats))
}

/// Cost map, λ calibration, ε rounding and simulated embedding in one step.
pub fn embed(cover: &Image8, p: &ParameterTriple, rate_bpp: f64, seed: u64) -> Result<StegoImage> {
    check_rate(rate_bpp)?;
    Ok(embed_with_context(&CostContext::new(cover)?, p, rate_bpp, seed)?.0)
}

/// ±1 matching at `round(rate * n)` uniformly chosen pixels.
pub fn lsb_match_baseline(cover: &Image8, rate_bpp: f64, seed: u64) -> Result<StegoImage> {
    if !(0.0..=1.0).contains(&rate_bpp) {
        return Err(Error::param("rate_bpp", format!("must lie in [0, 1], got {rate_bpp}")));
    }
    let n = cover.len();
    let k = (rate_bpp * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = cover.pixels().to_vec();
    for i in index::sample(&mut rng, n, k) {
        let up = match pixels[i] {
            0 => true,
            255 => false,
            _ => rng.gen_bool(0.5),
        };
        if up {
            pixels[i] += 1;
        } else {
            pixels[i] -= 1;
        }
    }
    Ok(StegoImage {
        pixels: Image8::new(cover.width(), cover.height(), pixels)?,
        change_count: k,
        params: ParameterTriple::DEFAULT,
        seed,
    })
}

/// `clamp(128 + factor * (stego - cover), 0, 255)` per pixel.
pub fn amplify_diff(cover: &Image8, stego: &Image8, factor: u32) -> Result<Image8> {
    if cover.dims() != stego.dims() {
        return Err(Error::DimensionMismatch {
            left: cover.dims(),
            right: stego.dims(),
        });
    }
    if factor == 0 {
        return Err(Error::param("factor", "must be positive"));
    }
    let pixels = cover
        .pixels()
        .iter()
        .zip(stego.pixels())
        .map(|(&c, &s)| {
            let d = i64::from(s) - i64::from(c);
            (128 + i64::from(factor) * d).clamp(0, 255) as u8
        })
        .collect();
    Image8::new(cover.width(), cover.height(), pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::compute_cost_map;
    use crate::media_io::synth_cover;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn gibbs_limits() {
        let c = CostMap::uniform(8, 8, 1.0).unwrap();
        let uniform = ternary_probs(&c, 0.0).unwrap();
        assert!(uniform.p_plus().iter().all(|&p| p == 1.0 / 3.0));
        assert_eq!(uniform.p_plus(), uniform.p_minus());
        let frozen = ternary_probs(&c, 1e6).unwrap();
        assert!(frozen.p_plus().iter().all(|&p| p < 1e-6));
        assert!(ternary_probs(&c, -1.0).is_err());
    }

    #[test]
    fn wet_entries_get_zero_probability() {
        let mut c = CostMap::uniform(4, 4, 1.0).unwrap();
        c.mark_wet(3);
        let pm = ternary_probs(&c, 0.0).unwrap();
        assert_eq!((pm.p_plus()[3], pm.p_minus()[3]), (0.0, 0.0));
    }

    #[test]
    fn entropy_examples() {
        let n = 10;
        let third = ProbMap::new(n, 1, vec![1.0 / 3.0; n], vec![1.0 / 3.0; n], 0.0).unwrap();
        assert_close(payload_entropy(&third), n as f64 * 3f64.log2(), 1e-9);
        assert_eq!(payload_entropy(&ProbMap::zeros(n, 1)), 0.0);
        let one = ProbMap::new(1, 1, vec![0.25], vec![0.25], 0.0).unwrap();
        assert_close(payload_entropy(&one), 1.5, 1e-12);
    }

    #[test]
    fn entropy_decreases_with_lambda() {
        let c = compute_cost_map(&synth_cover(4, 32, 32, 1.0).unwrap(), &ParameterTriple::DEFAULT).unwrap();
        let h: Vec<f64> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&l| payload_entropy(&ternary_probs(&c, l).unwrap()))
            .collect();
        assert!(h[0] > h[1] && h[1] > h[2], "{h:?}");
    }

    #[test]
    fn solve_hits_capacity_endpoint() {
        let c = CostMap::uniform(16, 16, 3.0).unwrap();
        let pm = solve_lambda(&c, 256.0 * 3f64.log2()).unwrap();
        for (&p, &m) in pm.p_plus().iter().zip(pm.p_minus()) {
            assert_close(p, 1.0 / 3.0, 1e-6);
            assert_close(m, 1.0 / 3.0, 1e-6);
        }
    }

    #[test]
    fn solve_at_point_four_bpp() {
        let cover = synth_cover(17, 64, 64, 2.0).unwrap();
        let c = compute_cost_map(&cover, &ParameterTriple::DEFAULT).unwrap();
        let pm = solve_lambda(&c, 1638.4).unwrap();
        assert!((payload_entropy(&pm) - 1638.4).abs() / 1638.4 < 1e-3);
        assert!(pm.lambda() > 0.0);
    }

    #[test]
    fn solve_rejects_impossible_requests() {
        let c = CostMap::uniform(4, 4, 1.0).unwrap();
        assert!(matches!(
            solve_lambda(&c, 16.0 * 1.6),
            Err(Error::PayloadExceedsCapacity { .. })
        ));
        let mut wet = c.clone();
        (0..16).for_each(|i| wet.mark_wet(i));
        assert!(matches!(solve_lambda(&wet, 1.0), Err(Error::AllWet)));
        let free = CostMap::uniform(4, 4, 0.0).unwrap();
        assert!(solve_lambda(&free, 5.0).is_err());
    }

    #[test]
    fn rounding_tolerance() {
        let pm = ProbMap::new(3, 1, vec![1e-12, 1.2e-10, 0.5], vec![0.0, 0.3, 0.5], 1.0).unwrap();
        assert_eq!(round_probs(&pm, 1.0).unwrap().p_plus()[0], 0.0);
        assert_eq!(round_probs(&pm, 1e-3).unwrap().p_plus()[0], 1e-12);
        let r = round_probs(&pm, 1.4).unwrap();
        assert_eq!(r.p_plus()[1], 0.0);
        assert_eq!(r.p_plus()[2], 0.5);
        let sure = ProbMap::new(1, 1, vec![1.0 - 1e-13], vec![1e-13], 1.0).unwrap();
        let s = round_probs(&sure, 1.0).unwrap();
        assert_eq!((s.p_plus()[0], s.p_minus()[0]), (1.0, 0.0));
        assert!(round_probs(&pm, 5e9).is_err());
    }

    #[test]
    fn simulation_contracts() {
        let cover = synth_cover(5, 32, 32, 1.0).unwrap();
        let same = simulate_embedding(&cover, &ProbMap::zeros(32, 32), 1).unwrap();
        assert_eq!(same.pixels, cover);
        assert_eq!(same.change_count, 0);
        let c = compute_cost_map(&cover, &ParameterTriple::DEFAULT).unwrap();
        let pm = solve_lambda(&c, 0.4 * 1024.0).unwrap();
        let a = simulate_embedding(&cover, &pm, 9).unwrap();
        assert_eq!(a, simulate_embedding(&cover, &pm, 9).unwrap());
        assert!(simulate_embedding(&cover, &ProbMap::zeros(16, 16), 1).is_err());
        let bad = Image8::filled(32, 32, 255).unwrap();
        assert!(simulate_embedding(&bad, &pm, 1).is_err());
    }

    #[test]
    fn change_rate_concentrates() {
        let cover = synth_cover(6, 64, 64, 2.0).unwrap();
        let c = compute_cost_map(&cover, &ParameterTriple::DEFAULT).unwrap();
        let pm = solve_lambda(&c, 1638.4).unwrap();
        let n = 4096.0;
        let expected: f64 = pm.expected_changes() / n;
        let var: f64 = pm
            .p_plus()
            .iter()
            .zip(pm.p_minus())
            .map(|(p, m)| (p + m) * (1.0 - p - m))
            .sum::<f64>()
            / (n * n);
        for seed in 0..100 {
            let rate = simulate_embedding(&cover, &pm, seed).unwrap().change_count as f64 / n;
            assert!((rate - expected).abs() <= 3.0 * var.sqrt() + 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn embed_contracts() {
        let cover = synth_cover(7, 64, 64, 2.0).unwrap();
        let s = embed(&cover, &ParameterTriple::DEFAULT, 0.05, 3).unwrap();
        assert!(s.change_count >= 1);
        for (&a, &b) in cover.pixels().iter().zip(s.pixels.pixels()) {
            assert!((i16::from(a) - i16::from(b)).abs() <= 1);
        }
        assert!(embed(&cover, &ParameterTriple::DEFAULT, 1.6, 3).is_err());
        let (_, stats) = embed_with_context(
            &CostContext::new(&Image8::filled(256, 256, 0).unwrap()).unwrap(),
            &ParameterTriple::DEFAULT,
            0.4,
            1,
        )
        .unwrap();
        assert_close(stats.target_bits, 26214.4, 1e-9);
        assert!(s.sidecar_line(0.05).starts_with("seed=3 sigma_mult=1 epsilon_mult=1 wetcost_mult=1 rate=0.05 changes="));
    }

    #[test]
    fn different_seeds_change_different_pixels() {
        let cover = synth_cover(8, 64, 64, 2.0).unwrap();
        let ctx = CostContext::new(&cover).unwrap();
        for s in 0..10u64 {
            let a = embed_with_context(&ctx, &ParameterTriple::DEFAULT, 0.4, 2 * s).unwrap().0;
            let b = embed_with_context(&ctx, &ParameterTriple::DEFAULT, 0.4, 2 * s + 1).unwrap().0;
            assert_ne!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn lsb_matching() {
        let cover = synth_cover(2, 64, 64, 2.0).unwrap();
        assert_eq!(lsb_match_baseline(&cover, 0.0, 1).unwrap().pixels, cover);
        let full = lsb_match_baseline(&cover, 1.0, 1).unwrap();
        let changed = cover.pixels().iter().zip(full.pixels.pixels()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 4096);
        assert!(cover
            .pixels()
            .iter()
            .zip(full.pixels.pixels())
            .all(|(&a, &b)| (i16::from(a) - i16::from(b)).abs() == 1));
        let edges = Image8::new(2, 1, vec![0, 255]).unwrap();
        assert_eq!(lsb_match_baseline(&edges, 1.0, 4).unwrap().pixels.pixels(), &[1, 254]);
        assert!(lsb_match_baseline(&cover, 1.5, 1).is_err());
    }

    #[test]
    fn amplified_differences() {
        let cover = Image8::filled(4, 4, 100).unwrap();
        assert!(amplify_diff(&cover, &cover, 8).unwrap().pixels().iter().all(|&p| p == 128));
        let mut stego = cover.clone();
        stego.pixels_mut()[0] = 101;
        stego.pixels_mut()[1] = 99;
        let d = amplify_diff(&cover, &stego, 8).unwrap();
        assert_eq!(&d.pixels()[..3], &[136, 120, 128]);
        assert!(amplify_diff(&cover, &Image8::filled(2, 2, 0).unwrap(), 8).is_err());
    }
}
