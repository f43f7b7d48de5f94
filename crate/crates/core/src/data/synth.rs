//! Seeded synthetic datasets for fast deterministic experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Isotropic unit-variance gaussian blobs around seeded centers whose norm is
/// `separation`. Samples are grouped by class.
pub fn synth_blobs(classes: usize, per_class: usize, dims: usize, separation: f32, seed: u64) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dims == 0 || !(separation > 0.0) {
        return Err(Error::Config("blob parameters must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let v: Vec<f32> = (0..dims).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
            v.into_iter().map(|x| x / norm * separation).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|&m| m + rng.sample::<f32, _>(StandardNormal)));
            labels.push(c);
        }
    }
    Dataset::new(vec![dims], data, labels, classes)
}

/// Stroke-glyph images: a handwritten-digit-like stand-in with one
/// grayscale channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphConfig {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    /// Line segments per class prototype.
    #[serde(default = "default_strokes")]
    pub strokes: usize,
    /// Maximum translation in pixels applied per sample.
    #[serde(default = "default_shift")]
    pub max_shift: i32,
    /// Per-stroke endpoint jitter in pixels.
    #[serde(default = "default_jitter")]
    pub jitter: f32,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f32,
    pub seed: u64,
}

impl GlyphConfig {
    /// Default stroke count, jitter and noise.
    pub fn new(classes: usize, per_class: usize, side: usize, seed: u64) -> Self {
        GlyphConfig {
            classes,
            per_class,
            side,
            strokes: default_strokes(),
            max_shift: default_shift(),
            jitter: default_jitter(),
            noise: default_noise(),
            seed,
        }
    }
}

fn default_strokes() -> usize {
    3
}
fn default_shift() -> i32 {
    1
}
fn default_jitter() -> f32 {
    1.0
}
fn default_noise() -> f32 {
    0.2
}

type Stroke = [(f32, f32); 2];

fn draw(canvas: &mut [f32], side: usize, stroke: &Stroke, dx: f32, dy: f32) {
    let [(x0, y0), (x1, y1)] = *stroke;
    let steps = ((x1 - x0).hypot(y1 - y0) * 3.0).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f32 / steps as f32;
        let (cx, cy) = (x0 + t * (x1 - x0) + dx, y0 + t * (y1 - y0) + dy);
        let (ix, iy) = (cx.round() as i64, cy.round() as i64);
        for yy in iy - 1..=iy + 1 {
            for xx in ix - 1..=ix + 1 {
                if xx < 0 || yy < 0 || xx >= side as i64 || yy >= side as i64 {
                    continue;
                }
                let d2 = (xx as f32 - cx).powi(2) + (yy as f32 - cy).powi(2);
                let v = (-d2 / 0.8).exp();
                let px = &mut canvas[yy as usize * side + xx as usize];
                *px = px.max(v);
            }
        }
    }
}

/// Generates `per_class` jittered, shifted, noisy renderings of a random
/// stroke prototype per class. Images have shape `[1, side, side]` and
/// values clamped to `[0, 1]`. Samples are grouped by class.
pub fn synth_glyphs(cfg: &GlyphConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.per_class == 0 || cfg.side < 4 || cfg.strokes == 0 {
        return Err(Error::Config("glyph parameters must be positive (side >= 4)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let margin = 1.0 + cfg.max_shift as f32;
    let hi = cfg.side as f32 - 1.0 - margin;
    let prototypes: Vec<Vec<Stroke>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.strokes)
                .map(|_| {
                    [
                        (rng.random_range(margin..hi), rng.random_range(margin..hi)),
                        (rng.random_range(margin..hi), rng.random_range(margin..hi)),
                    ]
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0f32, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = Normal::new(0.0f32, cfg.jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let px = cfg.side * cfg.side;
    let mut data = Vec::with_capacity(cfg.classes * cfg.per_class * px);
    let mut labels = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (c, proto) in prototypes.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let dx = rng.random_range(-cfg.max_shift..=cfg.max_shift) as f32;
            let dy = rng.random_range(-cfg.max_shift..=cfg.max_shift) as f32;
            let mut canvas = vec![0.0f32; px];
            for stroke in proto {
                let mut s = *stroke;
                for p in &mut s {
                    p.0 = (p.0 + jitter.sample(&mut rng)).clamp(0.0, cfg.side as f32 - 1.0);
                    p.1 = (p.1 + jitter.sample(&mut rng)).clamp(0.0, cfg.side as f32 - 1.0);
                }
                draw(&mut canvas, cfg.side, &s, dx, dy);
            }
            for v in &mut canvas {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            data.extend_from_slice(&canvas);
            labels.push(c);
        }
    }
    Dataset::new(vec![1, cfg.side, cfg.side], data, labels, cfg.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_deterministic() {
        let a = synth_blobs(3, 10, 4, 5.0, 11).unwrap();
        let b = synth_blobs(3, 10, 4, 5.0, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label_histogram(), vec![10, 10, 10]);
        let bits_a: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn glyphs_in_range_and_deterministic() {
        let cfg = GlyphConfig {
            classes: 4,
            per_class: 5,
            side: 12,
            strokes: 3,
            max_shift: 1,
            jitter: 0.5,
            noise: 0.1,
            seed: 2,
        };
        let a = synth_glyphs(&cfg).unwrap();
        assert_eq!(a, synth_glyphs(&cfg).unwrap());
        assert_eq!(a.len(), 20);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bad_parameters() {
        assert!(synth_blobs(0, 1, 1, 1.0, 0).is_err());
        assert!(synth_blobs(1, 1, 1, 0.0, 0).is_err());
    }
}
