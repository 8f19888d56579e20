//! Synthetic two-domain ultrasound-like data with simulated boundary gaze.
//!
//! Both domains draw the same family of rotated elliptical annuli (a
//! myocardium-like ring). The source renders it with additive Gaussian noise;
//! the target applies multiplicative Rayleigh speckle, Gaussian blur, a gamma
//! remap and an intensity offset. Setting a shift parameter to its neutral
//! value (0 speckle, 0 blur, gamma 1, offset 0) switches that factor off.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{normalize_image, DomainDataset, DomainRole, GazeSample, GazeTrajectory, SegMask};
use crate::error::{Error, Result};
use crate::eval::surface;
use crate::scalar::Scalar;

pub const GAZE_PERIOD_MS: f64 = 200.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Max offset of the ring center from the image center, as a fraction of the size.
    pub center_jitter: f64,
    /// Outer semi-axis range, as a fraction of the size.
    pub axis_min: f64,
    pub axis_max: f64,
    /// Wall thickness range in pixels.
    pub wall_min: f64,
    pub wall_max: f64,
    /// Accepted foreground fraction of the frame.
    pub area_min: f64,
    pub area_max: f64,
    pub background: f64,
    pub foreground: f64,
    pub source_noise: f64,
    /// Mixing weight of unit-mean Rayleigh speckle, `I · ((1 − s) + s · R)`.
    pub speckle: f64,
    pub blur_sigma: f64,
    pub gamma: f64,
    pub offset: f64,
    /// Additive Gaussian noise after the target shift.
    pub target_noise: f64,
    pub gaze_samples: usize,
    /// Std of the gaze jitter around boundary pixels, in pixels.
    pub gaze_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            n_source: 100,
            n_target: 100,
            center_jitter: 0.08,
            axis_min: 0.2,
            axis_max: 0.32,
            wall_min: 4.0,
            wall_max: 7.0,
            area_min: 0.05,
            area_max: 0.35,
            background: 0.15,
            foreground: 0.75,
            source_noise: 0.08,
            speckle: 1.0,
            blur_sigma: 1.0,
            gamma: 3.0,
            offset: 0.1,
            target_noise: 0.07,
            gaze_samples: 15,
            gaze_jitter: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::DegenerateShapeConfig(m));
        let s = self.image_size as f64;
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::InvalidConfig("n_source and n_target must be >= 1".into()));
        }
        for (name, v) in [
            ("source_noise", self.source_noise),
            ("speckle", self.speckle),
            ("blur_sigma", self.blur_sigma),
            ("offset", self.offset),
            ("target_noise", self.target_noise),
            ("gaze_jitter", self.gaze_jitter),
            ("center_jitter", self.center_jitter),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.speckle <= 1.0) {
            return Err(Error::InvalidConfig(format!("speckle must lie in [0,1], got {}", self.speckle)));
        }
        if !(0.0 <= self.background && self.background < self.foreground && self.foreground <= 1.0) {
            return bad(format!("need 0 <= background < foreground <= 1, got {} / {}", self.background, self.foreground));
        }
        if !(0.0 < self.axis_min && self.axis_min <= self.axis_max) {
            return bad(format!("axis range [{}, {}] is empty", self.axis_min, self.axis_max));
        }
        if !(1.0 <= self.wall_min && self.wall_min <= self.wall_max) {
            return bad(format!("wall range [{}, {}] is empty", self.wall_min, self.wall_max));
        }
        if self.axis_min * s <= self.wall_max + 1.0 {
            return bad("walls as thick as the smallest ring leave no cavity".into());
        }
        if (0.5 + self.center_jitter + self.axis_max) * s > s - 1.0 {
            return bad("largest ring can leave the frame".into());
        }
        if !(0.0 <= self.area_min && self.area_min < self.area_max && self.area_max <= 1.0) {
            return bad(format!("area range [{}, {}] is empty", self.area_min, self.area_max));
        }
        Ok(())
    }
}

/// Independent stream per (seed, role, item, purpose).
fn item_rng(seed: u64, role: DomainRole, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut z = seed
        ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ match role {
            DomainRole::Source => 0x5352_4300,
            DomainRole::Target => 0x5447_5400,
        };
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

#[derive(Clone, Copy, Debug)]
struct Ring {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    wall: f64,
}

impl Ring {
    fn inside(&self, y: f64, x: f64, shrink: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let (a, b) = (self.a - shrink, self.b - shrink);
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }

    fn mask(&self, size: usize) -> SegMask {
        SegMask::from_fn(size, size, |y, x| {
            let (yf, xf) = (y as f64, x as f64);
            self.inside(yf, xf, 0.0) && !self.inside(yf, xf, self.wall)
        })
    }
}

fn sample_ring(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(Ring, SegMask)> {
    let s = cfg.image_size as f64;
    let c = (s - 1.0) / 2.0;
    for _ in 0..1000 {
        let ring = Ring {
            cx: c + rng.gen_range(-1.0..=1.0) * cfg.center_jitter * s,
            cy: c + rng.gen_range(-1.0..=1.0) * cfg.center_jitter * s,
            a: rng.gen_range(cfg.axis_min..=cfg.axis_max) * s,
            b: rng.gen_range(cfg.axis_min..=cfg.axis_max) * s,
            theta: rng.gen_range(0.0..PI),
            wall: rng.gen_range(cfg.wall_min..=cfg.wall_max),
        };
        let mask = ring.mask(cfg.image_size);
        let frac = mask.count() as f64 / (s * s);
        if frac >= cfg.area_min && frac <= cfg.area_max {
            return Ok((ring, mask));
        }
    }
    Err(Error::DegenerateShapeConfig(
        "no ring within the area range after 1000 draws".into(),
    ))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img[y * w + (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[(y as isize + i as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
    out
}

fn render(cfg: &SynthConfig, mask: &SegMask, role: DomainRole, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cfg.image_size;
    let clean: Vec<f64> = mask
        .pixels()
        .iter()
        .map(|&m| if m == 1 { cfg.foreground } else { cfg.background })
        .collect();
    match role {
        DomainRole::Source => {
            let noise = Normal::new(0.0, cfg.source_noise.max(f64::MIN_POSITIVE)).expect("valid std");
            clean
                .into_iter()
                .map(|v| {
                    let e = if cfg.source_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                    (v + e).clamp(0.0, 1.0)
                })
                .collect()
        }
        DomainRole::Target => {
            // unit-mean Rayleigh: scale σ = sqrt(2/π)
            let scale = (2.0 / PI).sqrt();
            let speckled: Vec<f64> = clean
                .into_iter()
                .map(|v| {
                    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let r = scale * (-2.0 * u.ln()).sqrt();
                    v * ((1.0 - cfg.speckle) + cfg.speckle * r)
                })
                .collect();
            let blurred = gaussian_blur(&speckled, n, n, cfg.blur_sigma);
            let noise = Normal::new(0.0, cfg.target_noise.max(f64::MIN_POSITIVE)).expect("valid std");
            blurred
                .into_iter()
                .map(|v| {
                    let e = if cfg.target_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                    (v.clamp(0.0, 1.0).powf(cfg.gamma) + cfg.offset + e).clamp(0.0, 1.0)
                })
                .collect()
        }
    }
}

/// Gaze samples on the mask boundary with Gaussian jitter, 200 ms apart.
pub fn synthesize_gaze(gt: &SegMask, cfg: &SynthConfig, rng: &mut impl Rng, frame_id: &str) -> Result<GazeTrajectory> {
    let boundary = surface(gt);
    if boundary.is_empty() {
        return Err(Error::NoStructureToGazeAt);
    }
    let (h, w) = (gt.height() as f64, gt.width() as f64);
    let jitter = Normal::new(0.0, cfg.gaze_jitter.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut samples = Vec::with_capacity(cfg.gaze_samples);
    for i in 0..cfg.gaze_samples {
        let (py, px) = boundary[rng.gen_range(0..boundary.len())];
        let (mut y, mut x) = (py as f64, px as f64);
        if cfg.gaze_jitter > 0.0 {
            y += jitter.sample(rng);
            x += jitter.sample(rng);
        }
        samples.push(GazeSample {
            t_ms: GAZE_PERIOD_MS * i as f64,
            x: x.clamp(0.0, w - 1.0) / (w - 1.0),
            y: y.clamp(0.0, h - 1.0) / (h - 1.0),
        });
    }
    GazeTrajectory::new(frame_id, samples)
}

/// Generates one domain; target items carry gaze and evaluation-only masks.
pub fn generate_domain<T: Scalar>(cfg: &SynthConfig, role: DomainRole) -> Result<DomainDataset<T>> {
    cfg.validate()?;
    let n = cfg.image_size;
    match role {
        DomainRole::Source => {
            let mut items = Vec::with_capacity(cfg.n_source);
            for i in 0..cfg.n_source {
                let mut rng = item_rng(cfg.seed, role, i, 0);
                let (_, mask) = sample_ring(cfg, &mut rng)?;
                let raw = render(cfg, &mask, role, &mut rng);
                items.push((format!("src_{i:04}"), normalize_image(n, n, &raw)?, mask));
            }
            DomainDataset::source(items)
        }
        DomainRole::Target => {
            let mut items = Vec::with_capacity(cfg.n_target);
            for i in 0..cfg.n_target {
                let id = format!("tgt_{i:04}");
                let mut rng = item_rng(cfg.seed, role, i, 0);
                let (_, mask) = sample_ring(cfg, &mut rng)?;
                let raw = render(cfg, &mask, role, &mut rng);
                let mut gaze_rng = item_rng(cfg.seed, role, i, 1);
                let gaze = synthesize_gaze(&mask, cfg, &mut gaze_rng, &id)?;
                items.push((id, normalize_image(n, n, &raw)?, Some(gaze), Some(mask)));
            }
            DomainDataset::target(items)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_source: 6,
            n_target: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = small();
        let a: DomainDataset<f32> = generate_domain(&cfg, DomainRole::Target).unwrap();
        let b: DomainDataset<f32> = generate_domain(&cfg, DomainRole::Target).unwrap();
        assert_eq!(a, b);
        let c: DomainDataset<f32> = generate_domain(&SynthConfig { seed: 1, ..cfg }, DomainRole::Target).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn masks_respect_area_range_and_images_are_normalized() {
        let cfg = small();
        for role in [DomainRole::Source, DomainRole::Target] {
            let ds: DomainDataset<f64> = generate_domain(&cfg, role).unwrap();
            for i in 0..ds.len() {
                let m = ds.eval_mask(i).unwrap();
                let frac = m.count() as f64 / (64.0 * 64.0);
                assert!(frac >= cfg.area_min && frac <= cfg.area_max, "{frac}");
                assert!(ds.image(i).pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn zero_jitter_gaze_lands_on_boundary() {
        let cfg = SynthConfig {
            gaze_jitter: 0.0,
            gaze_samples: 10,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, mask) = sample_ring(&cfg, &mut rng).unwrap();
        let g = synthesize_gaze(&mask, &cfg, &mut rng, "f").unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g.samples().last().unwrap().t_ms, 1800.0);
        let edge = surface(&mask);
        for s in g.samples() {
            let p = ((s.y * 63.0).round() as usize, (s.x * 63.0).round() as usize);
            assert!(edge.contains(&p));
        }
    }

    /// Pooled within-class variance: noise around each class mean, so the
    /// gamma-compressed contrast of the target does not mask its speckle.
    fn within_class_variance(ds: &DomainDataset<f64>) -> f64 {
        let mut groups = [Vec::new(), Vec::new()];
        for i in 0..ds.len() {
            for (&p, &m) in ds.image(i).pixels().iter().zip(ds.eval_mask(i).unwrap().pixels()) {
                groups[m as usize].push(p);
            }
        }
        let n: usize = groups.iter().map(Vec::len).sum();
        groups
            .iter()
            .map(|g| {
                let m = g.iter().sum::<f64>() / g.len() as f64;
                g.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn target_is_noisier_than_source() {
        let cfg = SynthConfig {
            n_source: 100,
            n_target: 100,
            ..SynthConfig::default()
        };
        let src = within_class_variance(&generate_domain(&cfg, DomainRole::Source).unwrap());
        let tgt = within_class_variance(&generate_domain(&cfg, DomainRole::Target).unwrap());
        assert!(tgt / src > 1.0, "{tgt} / {src}");
    }

    #[test]
    fn gaze_distance_matches_folded_gaussian() {
        // Perpendicular offset to a locally straight boundary is |N(0, σ)|,
        // whose mean is σ·sqrt(2/π).
        let cfg = SynthConfig {
            gaze_samples: 1000,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (_, mask) = sample_ring(&cfg, &mut rng).unwrap();
        let g = synthesize_gaze(&mask, &cfg, &mut rng, "f").unwrap();
        let edge = surface(&mask);
        let mean = g
            .samples()
            .iter()
            .map(|s| {
                let (y, x) = (s.y * 63.0, s.x * 63.0);
                edge.iter()
                    .map(|&(py, px)| ((py as f64 - y).powi(2) + (px as f64 - x).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / 1000.0;
        let expect = cfg.gaze_jitter * (2.0 / PI).sqrt();
        assert!((mean - expect).abs() < 0.2 * expect, "{mean} vs {expect}");
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let cfg = SynthConfig {
            axis_min: 0.3,
            axis_max: 0.2,
            ..small()
        };
        assert!(matches!(
            generate_domain::<f32>(&cfg, DomainRole::Source),
            Err(Error::DegenerateShapeConfig(_))
        ));
        let cfg = SynthConfig {
            area_min: 0.9,
            area_max: 0.95,
            ..small()
        };
        assert!(matches!(
            generate_domain::<f32>(&cfg, DomainRole::Source),
            Err(Error::DegenerateShapeConfig(_))
        ));
        assert!(matches!(
            synthesize_gaze(&SegMask::zeros(16, 16), &small(), &mut ChaCha8Rng::seed_from_u64(0), "f"),
            Err(Error::NoStructureToGazeAt)
        ));
    }
}
