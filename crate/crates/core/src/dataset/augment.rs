use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledImage, Origin};
use crate::error::{invalid, Result};

/// Magnitudes for the augmentation chain. Every step is skipped when its
/// magnitude is zero (or `crop_fraction` is 1), except the coin-flip mirror.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub noise_sigma: f64,
    pub saturation_delta: f64,
    pub rotation_max_deg: f64,
    pub crop_fraction: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            noise_sigma: 0.01,
            saturation_delta: 0.1,
            rotation_max_deg: 10.0,
            crop_fraction: 0.9,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.noise_sigma,
            self.saturation_delta,
            self.rotation_max_deg,
            self.crop_fraction,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(format!("augment params must be finite and non-negative: {self:?}")));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(invalid(format!("crop_fraction {} outside (0, 1]", self.crop_fraction)));
        }
        Ok(())
    }
}

/// Apply noise, contrast scaling, a random horizontal flip, a small rotation
/// and a center crop (resized back), in that order.
///
/// The result keeps `img.id`; callers assign fresh ids. `source_id` is set
/// to `img.id` and the origin to augmented.
pub fn augment_image(img: &LabeledImage, p: &AugmentParams, rng: &mut impl Rng) -> Result<LabeledImage> {
    img.validate()?;
    p.validate()?;
    let (h, w) = (img.height, img.width);
    let mut px = img.pixels.clone();

    if p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, p.noise_sigma).map_err(|e| invalid(e.to_string()))?;
        for v in &mut px {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }

    if p.saturation_delta > 0.0 {
        let factor = 1.0 + rng.random_range(-p.saturation_delta..=p.saturation_delta);
        let mean = px.iter().sum::<f64>() / px.len() as f64;
        for v in &mut px {
            *v = (mean + (*v - mean) * factor).clamp(0.0, 1.0);
        }
    }

    if rng.random_bool(0.5) {
        for row in px.chunks_mut(w) {
            row.reverse();
        }
    }

    if p.rotation_max_deg > 0.0 {
        let deg = rng.random_range(-p.rotation_max_deg..=p.rotation_max_deg);
        if deg != 0.0 {
            px = rotate(&px, h, w, deg.to_radians());
        }
    }

    if p.crop_fraction < 1.0 {
        px = center_crop_resize(&px, h, w, p.crop_fraction);
    }

    let mut out = img.clone();
    out.pixels = px;
    out.origin = Origin::Augmented;
    out.source_id = Some(img.id);
    Ok(out)
}

/// Bilinear sample with coordinates clamped to the image.
fn sample(px: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = px[y0 * w + x0] * (1.0 - fx) + px[y0 * w + x1] * fx;
    let bottom = px[y1 * w + x0] * (1.0 - fx) + px[y1 * w + x1] * fx;
    (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
}

fn rotate(px: &[f64], h: usize, w: usize, angle: f64) -> Vec<f64> {
    let (sin, cos) = angle.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(px.len());
    for y in 0..h {
        for x in 0..w {
            // inverse map from output to source
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            out.push(sample(px, h, w, sy, sx));
        }
    }
    out
}

fn center_crop_resize(px: &[f64], h: usize, w: usize, fraction: f64) -> Vec<f64> {
    let ch = (h as f64 * fraction).max(1.0);
    let cw = (w as f64 * fraction).max(1.0);
    let y0 = (h as f64 - ch) / 2.0;
    let x0 = (w as f64 - cw) / 2.0;
    let mut out = Vec::with_capacity(px.len());
    for y in 0..h {
        for x in 0..w {
            // pixel centres of the output spread evenly over the crop window
            let sy = y0 + (y as f64 + 0.5) * ch / h as f64 - 0.5;
            let sx = x0 + (x as f64 + 0.5) * cw / w as f64 - 0.5;
            out.push(sample(px, h, w, sy, sx));
        }
    }
    out
}
