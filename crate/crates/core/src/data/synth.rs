//! Procedural live/spoof image generator.
//!
//! Live images are a smooth face-like oval (shading, eyes, mouth, low
//! frequency texture) on a plain background. Spoof images add a medium
//! artifact on top: a halftone dot grid for `print`, moiré bands plus
//! specular blobs for `replay`. The reflection ground truth of a spoof is
//! the artifact intensity envelope scaled to a peak of one, so it is zero
//! exactly where no artifact was injected.
//!
//! Domains are capture conditions applied after the artifact: a colour
//! transform, an illumination ramp and a domain-specific noise spectrum.

use std::f32::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AttackType, Class, Sample};
use crate::error::{DcnError, Result};
use crate::seed::{self, Rng};
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub num_domains: usize,
    pub version: u32,
}

impl GeneratorConfig {
    pub fn new(height: usize, width: usize, num_domains: usize) -> Self {
        GeneratorConfig {
            height,
            width,
            num_domains,
            version: GENERATOR_VERSION,
        }
    }
}

/// Capture conditions of one synthetic subdomain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainStyle {
    pub gain: [f32; 3],
    pub bias: [f32; 3],
    pub saturation: f32,
    pub illum_angle: f32,
    pub illum_strength: f32,
    pub noise_std: f32,
    /// Box-blur radius applied to the noise field; larger means lower frequency.
    pub noise_blur: usize,
}

impl DomainStyle {
    pub fn for_domain(domain_id: usize) -> DomainStyle {
        match domain_id {
            0 => DomainStyle {
                gain: [1.05, 0.97, 0.92],
                bias: [0.02, 0.0, -0.02],
                saturation: 1.0,
                illum_angle: 0.0,
                illum_strength: 0.15,
                noise_std: 0.02,
                noise_blur: 1,
            },
            1 => DomainStyle {
                gain: [0.92, 1.0, 1.08],
                bias: [-0.02, 0.01, 0.03],
                saturation: 0.85,
                illum_angle: 0.5 * PI,
                illum_strength: 0.2,
                noise_std: 0.015,
                noise_blur: 0,
            },
            2 => DomainStyle {
                gain: [1.12, 1.04, 0.82],
                bias: [0.04, 0.0, -0.05],
                saturation: 1.15,
                illum_angle: 0.75 * PI,
                illum_strength: 0.3,
                noise_std: 0.03,
                noise_blur: 2,
            },
            d => {
                let mut rng = seed::rng(seed::derive(0xD0_0A11, d as u64));
                DomainStyle {
                    gain: [
                        rng.gen_range(0.8..1.2),
                        rng.gen_range(0.8..1.2),
                        rng.gen_range(0.8..1.2),
                    ],
                    bias: [
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.05..0.05),
                    ],
                    saturation: rng.gen_range(0.8..1.2),
                    illum_angle: rng.gen_range(0.0..2.0 * PI),
                    illum_strength: rng.gen_range(0.1..0.3),
                    noise_std: rng.gen_range(0.01..0.035),
                    noise_blur: rng.gen_range(0..=2),
                }
            }
        }
    }
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f32>,
}

impl Canvas {
    fn plane(&mut self, c: usize) -> &mut [f32] {
        let n = self.h * self.w;
        &mut self.rgb[c * n..(c + 1) * n]
    }
}

fn paint_live(rng: &mut Rng, h: usize, w: usize) -> Canvas {
    let skin = [
        0.78 + rng.gen_range(-0.06..0.06),
        0.58 + rng.gen_range(-0.06..0.06),
        0.47 + rng.gen_range(-0.06..0.06),
    ];
    let bg: [f32; 3] = [
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
    ];
    let cx: f32 = 0.5 + rng.gen_range(-0.06..0.06);
    let cy: f32 = 0.5 + rng.gen_range(-0.04..0.06);
    let rx: f32 = rng.gen_range(0.26..0.34);
    let ry: f32 = rng.gen_range(0.34..0.42);
    let waves: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();

    let eyes = [(cx - 0.4 * rx, cy - 0.2 * ry), (cx + 0.4 * rx, cy - 0.2 * ry)];
    let eye_r = 0.12 * rx;
    let mouth = (cx, cy + 0.45 * ry, 0.35 * rx, 0.07 * ry);

    let mut canvas = Canvas {
        h,
        w,
        rgb: vec![0.0; 3 * h * w],
    };
    for y in 0..h {
        let v = (y as f32 + 0.5) / h as f32;
        for x in 0..w {
            let u = (x as f32 + 0.5) / w as f32;
            let r = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
            let face = clamp01((1.0 - r) / 0.08);
            let shade = 0.65 + 0.35 * (1.0 - r.min(1.0).powi(2));
            let mut dark = 0.0f32;
            for (ex, ey) in eyes {
                let d = (((u - ex).powi(2) + (v - ey).powi(2)).sqrt()) / eye_r;
                dark = dark.max(0.35 * clamp01((1.0 - d) / 0.3));
            }
            let dm = (((u - mouth.0) / mouth.2).powi(2) + ((v - mouth.1) / mouth.3).powi(2)).sqrt();
            dark = dark.max(0.3 * clamp01((1.0 - dm) / 0.3));
            let tex: f32 = waves
                .iter()
                .map(|&(fx, fy, ph)| (2.0 * PI * (fx * u + fy * v) + ph).sin())
                .sum::<f32>()
                * 0.01;
            let i = y * w + x;
            for c in 0..3 {
                let skin_px = skin[c] * shade * (1.0 - dark);
                canvas.rgb[c * h * w + i] = bg[c] * (1.0 - face) + face * skin_px + tex;
            }
        }
    }
    canvas
}

/// Soft-edged rectangle covering part of the image; exactly zero outside.
fn artifact_region(rng: &mut Rng, h: usize, w: usize) -> Vec<f32> {
    let cx: f32 = rng.gen_range(0.35..0.65);
    let cy: f32 = rng.gen_range(0.35..0.65);
    let sx: f32 = rng.gen_range(0.25..0.5);
    let sy: f32 = rng.gen_range(0.25..0.5);
    let amp: f32 = rng.gen_range(0.6..1.0);
    let (fx, fy, ph): (f32, f32, f32) = (
        rng.gen_range(0.5..1.5),
        rng.gen_range(0.5..1.5),
        rng.gen_range(0.0..2.0 * PI),
    );
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let v = (y as f32 + 0.5) / h as f32;
        for x in 0..w {
            let u = (x as f32 + 0.5) / w as f32;
            let d = ((u - cx).abs() / sx).max((v - cy).abs() / sy);
            let edge = clamp01((1.0 - d) / 0.1);
            let swell = 0.75 + 0.25 * (2.0 * PI * (fx * u + fy * v) + ph).cos();
            out[y * w + x] = edge * amp * swell;
        }
    }
    out
}

fn rotated(x: f32, y: f32, angle: f32) -> (f32, f32) {
    let (s, c) = angle.sin_cos();
    (c * x + s * y, -s * x + c * y)
}

/// Applies a print artifact; returns the intensity envelope.
fn paint_print(rng: &mut Rng, canvas: &mut Canvas) -> Vec<f32> {
    let (h, w) = (canvas.h, canvas.w);
    let envelope = artifact_region(rng, h, w);
    let period: f32 = rng.gen_range(3.0..5.0);
    let angle: f32 = rng.gen_range(0.0..PI);
    let depth: f32 = rng.gen_range(0.12..0.2);
    for c in 0..3 {
        let plane = canvas.plane(c);
        for y in 0..h {
            for x in 0..w {
                let e = envelope[y * w + x];
                if e == 0.0 {
                    continue;
                }
                let (xr, yr) = rotated(x as f32, y as f32, angle);
                let dots = (2.0 * PI * xr / period).cos() * (2.0 * PI * yr / period).cos();
                let px = &mut plane[y * w + x];
                *px = *px * (1.0 - 0.15 * e) + depth * e * dots;
            }
        }
    }
    envelope
}

/// Applies a replay artifact; returns the intensity envelope.
fn paint_replay(rng: &mut Rng, canvas: &mut Canvas) -> Vec<f32> {
    let (h, w) = (canvas.h, canvas.w);
    let region = artifact_region(rng, h, w);
    let k1: f32 = 1.0 / rng.gen_range(4.0..7.0);
    let k2: f32 = k1 * (1.0 + rng.gen_range(0.08..0.15));
    let angle: f32 = rng.gen_range(0.0..PI);
    let skew: f32 = rng.gen_range(0.03..0.08);
    let depth: f32 = rng.gen_range(0.1..0.18);

    let inside: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| region[i] > 0.5)
        .map(|i| (i / w, i % w))
        .collect();
    let n_blobs = rng.gen_range(1..=3);
    let blobs: Vec<(f32, f32, f32, f32)> = (0..n_blobs)
        .map(|_| {
            let (by, bx) = inside[rng.gen_range(0..inside.len())];
            let sigma = rng.gen_range(0.04..0.1) * w as f32;
            let peak = rng.gen_range(0.5..0.9);
            (bx as f32, by as f32, sigma, peak)
        })
        .collect();

    let mut envelope = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let e = region[i];
            if e == 0.0 {
                continue;
            }
            let mut spec = 0.0f32;
            for &(bx, by, s, peak) in &blobs {
                let d2 = (x as f32 - bx).powi(2) + (y as f32 - by).powi(2);
                let g = peak * (-d2 / (2.0 * s * s)).exp();
                if g > 0.01 {
                    spec += g;
                }
            }
            let (xa, _) = rotated(x as f32, y as f32, angle);
            let (xb, _) = rotated(x as f32, y as f32, angle + skew);
            let bands = 0.5 * ((2.0 * PI * k1 * xa).cos() + (2.0 * PI * k2 * xb).cos());
            for c in 0..3 {
                let tint = if c == 2 { 0.05 * e } else { 0.0 };
                let px = &mut canvas.rgb[c * h * w + i];
                *px += depth * e * bands + 0.5 * spec + tint;
            }
            envelope[i] = (0.7 * e + spec).min(1.0);
        }
    }
    envelope
}

fn apply_domain(rng: &mut Rng, canvas: &mut Canvas, style: &DomainStyle) {
    let (h, w) = (canvas.h, canvas.w);
    let n = h * w;
    let (sin_a, cos_a) = style.illum_angle.sin_cos();
    for i in 0..n {
        let (y, x) = (i / w, i % w);
        let u = (x as f32 + 0.5) / w as f32 - 0.5;
        let v = (y as f32 + 0.5) / h as f32 - 0.5;
        let illum = 1.0 + style.illum_strength * (u * cos_a + v * sin_a);
        let rgb = [canvas.rgb[i], canvas.rgb[n + i], canvas.rgb[2 * n + i]];
        let lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
        for (c, &value) in rgb.iter().enumerate() {
            let sat = style.saturation * value + (1.0 - style.saturation) * lum;
            canvas.rgb[c * n + i] = (style.gain[c] * sat + style.bias[c]) * illum;
        }
    }

    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let r = style.noise_blur;
    // Box blur shrinks the std of white noise by the window side; undo that.
    let rescale = style.noise_std * (2 * r + 1) as f32;
    for c in 0..3 {
        let white: Vec<f32> = (0..n).map(|_| normal.sample(rng)).collect();
        let plane = canvas.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                let mut count = 0usize;
                for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                        acc += white[yy * w + xx];
                        count += 1;
                    }
                }
                plane[y * w + x] += acc / count as f32 * rescale;
            }
        }
        plane.iter_mut().for_each(|v| *v = clamp01(*v));
    }
}

/// Generates one sample and also returns the raw (unnormalised) artifact
/// envelope, which is all zeros for live samples.
pub fn generate_sample_with_mask(
    config: &GeneratorConfig,
    seed: u64,
    domain_id: usize,
    class: Class,
    attack_type: AttackType,
) -> Result<(Sample, Tensor<f32>)> {
    if domain_id >= config.num_domains {
        return Err(DcnError::config(format!(
            "domain {domain_id} outside [0, {})",
            config.num_domains
        )));
    }
    match (class, attack_type) {
        (Class::Live, AttackType::None) | (Class::Spoof, AttackType::Print | AttackType::Replay) => {}
        (Class::Live, other) => {
            return Err(DcnError::config(format!(
                "live samples take attack type none, got {}",
                other.name()
            )))
        }
        (Class::Spoof, AttackType::None) => {
            return Err(DcnError::config(
                "spoof samples need a print or replay attack type",
            ))
        }
    }
    let (h, w) = (config.height, config.width);
    if h < 4 || w < 4 {
        return Err(DcnError::config(format!("image extent {h}×{w} too small")));
    }

    let mut rng = seed::rng(seed::derive(seed, 0x5EED_0000 ^ config.version as u64));
    let mut canvas = paint_live(&mut rng, h, w);
    let envelope = match attack_type {
        AttackType::None => vec![0.0; h * w],
        AttackType::Print => paint_print(&mut rng, &mut canvas),
        AttackType::Replay => paint_replay(&mut rng, &mut canvas),
    };
    apply_domain(&mut rng, &mut canvas, &DomainStyle::for_domain(domain_id));

    let peak = envelope.iter().copied().fold(0.0f32, f32::max);
    let reflection: Vec<f32> = if peak > 0.0 {
        envelope.iter().map(|&e| e / peak).collect()
    } else {
        vec![0.0; h * w]
    };

    let sample = Sample {
        image: Tensor::new(&[3, h, w], canvas.rgb)?,
        reflection_gt: Tensor::new(&[1, h, w], reflection)?,
        class,
        domain_id,
        attack_type,
        sample_id: seed,
    };
    Ok((sample, Tensor::new(&[1, h, w], envelope)?))
}

/// Deterministic in `(seed, domain_id, class, attack_type, config.version)`.
/// The returned sample's `sample_id` is `seed`; split generation overwrites it.
pub fn generate_sample(
    config: &GeneratorConfig,
    seed: u64,
    domain_id: usize,
    class: Class,
    attack_type: AttackType,
) -> Result<Sample> {
    generate_sample_with_mask(config, seed, domain_id, class, attack_type).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GeneratorConfig {
        GeneratorConfig::new(48, 48, 3)
    }

    #[test]
    fn live_reflection_is_all_zero() {
        for d in 0..3 {
            let s = generate_sample(&cfg(), 11 + d as u64, d, Class::Live, AttackType::None).unwrap();
            assert!(s.reflection_gt.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn spoof_reflection_has_positive_peak() {
        for attack in [AttackType::Print, AttackType::Replay] {
            let s = generate_sample(&cfg(), 3, 1, Class::Spoof, attack).unwrap();
            assert_eq!(s.reflection_gt.max(), 1.0);
            assert!(s.reflection_gt.min() >= 0.0);
        }
    }

    #[test]
    fn images_stay_in_unit_range() {
        for (i, attack) in [AttackType::None, AttackType::Print, AttackType::Replay]
            .into_iter()
            .enumerate()
        {
            let class = if attack == AttackType::None {
                Class::Live
            } else {
                Class::Spoof
            };
            let s = generate_sample(&cfg(), 100 + i as u64, 2, class, attack).unwrap();
            assert!(s.image.min() >= 0.0 && s.image.max() <= 1.0);
        }
    }

    #[test]
    fn same_inputs_give_identical_samples() {
        let a = generate_sample(&cfg(), 42, 0, Class::Spoof, AttackType::Replay).unwrap();
        let b = generate_sample(&cfg(), 42, 0, Class::Spoof, AttackType::Replay).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn version_changes_output() {
        let mut v2 = cfg();
        v2.version += 1;
        let a = generate_sample(&cfg(), 42, 0, Class::Live, AttackType::None).unwrap();
        let b = generate_sample(&v2, 42, 0, Class::Live, AttackType::None).unwrap();
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn rejects_bad_combinations() {
        assert!(generate_sample(&cfg(), 1, 3, Class::Live, AttackType::None).is_err());
        assert!(generate_sample(&cfg(), 1, 0, Class::Live, AttackType::Print).is_err());
        assert!(generate_sample(&cfg(), 1, 0, Class::Spoof, AttackType::None).is_err());
    }

    #[test]
    fn reflection_support_inside_artifact_mask() {
        for seed in 0..10u64 {
            let attack = if seed % 2 == 0 {
                AttackType::Print
            } else {
                AttackType::Replay
            };
            let (s, mask) = generate_sample_with_mask(&cfg(), seed, 0, Class::Spoof, attack).unwrap();
            let support = s.reflection_gt.data().iter().filter(|&&v| v > 0.0).count();
            let overlap = s
                .reflection_gt
                .data()
                .iter()
                .zip(mask.data())
                .filter(|(&r, &m)| r > 0.0 && m > 0.0)
                .count();
            assert!(support > 0);
            assert_eq!(overlap as f64 / support as f64, 1.0);
        }
    }
}
