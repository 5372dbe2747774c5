use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, LabeledImage, MIN_SIDE};
use crate::error::{invalid, Result};
use crate::rng::{stream, Stream};

/// Parameters of the synthetic image generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub counts: Vec<usize>,
    pub side: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            counts: vec![321, 224, 90, 8],
            side: 32,
            seed: 0,
        }
    }
}

/// Generate a deterministic, class-imbalanced set of scan-like images.
///
/// Every image is a bright elliptical disc with a dark central cavity and an
/// angular texture. The cavity grows and the disc thins with the class index,
/// and each sample jitters size, position, orientation and noise, so
/// neighbouring classes overlap.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<LabeledDataset> {
    if cfg.side < MIN_SIDE {
        return Err(invalid(format!("side {} is below the minimum {MIN_SIDE}", cfg.side)));
    }
    if cfg.classes == 0 || cfg.counts.len() != cfg.classes {
        return Err(invalid(format!(
            "{} counts given for {} classes",
            cfg.counts.len(),
            cfg.classes
        )));
    }
    let mut rng = stream(cfg.seed, Stream::Data);
    let names = (0..cfg.classes).map(|k| format!("c{k}")).collect();
    let mut images = Vec::with_capacity(cfg.counts.iter().sum());
    for (label, &count) in cfg.counts.iter().enumerate() {
        for _ in 0..count {
            let id = images.len();
            let px = render(label, cfg.classes, cfg.side, &mut rng);
            images.push(LabeledImage::new(id, cfg.side, cfg.side, px, label)?);
        }
    }
    LabeledDataset::new(names, images)
}

fn render(class: usize, classes: usize, side: usize, rng: &mut impl Rng) -> Vec<f64> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let s = side as f64;
    // 0 for the first class, 1 for the last
    let t = if classes > 1 {
        class as f64 / (classes - 1) as f64
    } else {
        0.0
    };
    let cx = s / 2.0 + 0.8 * unit.sample(rng);
    let cy = s / 2.0 + 0.8 * unit.sample(rng);
    let theta = rng.random_range(-0.4..0.4);
    let (sin, cos) = f64::sin_cos(theta);
    let outer = s * (0.40 - 0.04 * t) * (1.0 + 0.05 * unit.sample(rng));
    let aspect = 1.15 + 0.05 * unit.sample(rng);
    let cavity = s * (0.08 + 0.13 * t) * (1.0 + 0.15 * unit.sample(rng)).max(0.5);
    let brightness = 0.70 + 0.05 * unit.sample(rng);
    let freq = 5.0 + rng.random_range(0.0..3.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = 0.04;

    let mut px = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = cos * dx + sin * dy;
            let v = (-sin * dx + cos * dy) / aspect;
            let r = (u * u + v * v).sqrt();
            let angle = v.atan2(u);
            let mut val = 0.05;
            if r < outer {
                let texture = 0.08 * (freq * angle + phase).sin() * (r / outer);
                val = brightness + texture;
                // soft edge
                val *= ((outer - r) / 1.5).min(1.0);
                if r < cavity {
                    val *= 0.25;
                } else if r < cavity + 1.0 {
                    val *= 0.25 + 0.75 * (r - cavity);
                }
            }
            val += noise * unit.sample(rng);
            px.push(val.clamp(0.0, 1.0));
        }
    }
    px
}
