use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Image, Sample};
use crate::geometry::BBox;

/// Training-time augmentation. Steps run in a fixed order: color jitter,
/// flip, scale jitter, crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub color_jitter: bool,
    /// Chance of applying brightness, and independently contrast.
    pub jitter_prob: f64,
    pub jitter_range: [f64; 2],
    pub flip_prob: f64,
    pub scale: bool,
    /// Shortest side after rescaling, inclusive range in pixels.
    pub scale_range: [usize; 2],
    /// Cap on the longest side.
    pub max_size: usize,
    pub crop: bool,
    pub crop_prob: f64,
    /// Smallest crop side as a fraction of the image side.
    pub crop_min_fraction: f64,
    pub crop_retries: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            color_jitter: true,
            jitter_prob: 0.5,
            jitter_range: [0.8, 1.2],
            flip_prob: 0.5,
            scale: true,
            scale_range: [64, 128],
            max_size: 160,
            crop: true,
            crop_prob: 0.5,
            crop_min_fraction: 0.5,
            crop_retries: 10,
        }
    }
}

impl AugmentConfig {
    /// Nothing at all; `augment` returns the input unchanged.
    pub fn identity() -> Self {
        Self {
            color_jitter: false,
            flip_prob: 0.0,
            scale: false,
            crop: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if !prob(self.jitter_prob) {
            return Err(("jitter_prob", format!("{} is not a probability", self.jitter_prob)));
        }
        if !(self.jitter_range[0] > 0.0 && self.jitter_range[0] <= self.jitter_range[1]) {
            return Err(("jitter_range", format!("{:?} must be positive and increasing", self.jitter_range)));
        }
        if !prob(self.flip_prob) {
            return Err(("flip_prob", format!("{} is not a probability", self.flip_prob)));
        }
        if self.scale_range[0] < 16 || self.scale_range[0] > self.scale_range[1] {
            return Err(("scale_range", format!("{:?} must be increasing with minimum >= 16", self.scale_range)));
        }
        if self.max_size < self.scale_range[1] {
            return Err(("max_size", format!("{} is below the scale range maximum", self.max_size)));
        }
        if !prob(self.crop_prob) {
            return Err(("crop_prob", format!("{} is not a probability", self.crop_prob)));
        }
        if !(self.crop_min_fraction > 0.0 && self.crop_min_fraction <= 1.0) {
            return Err(("crop_min_fraction", format!("{} must be in (0, 1]", self.crop_min_fraction)));
        }
        Ok(())
    }
}

/// Pixel crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Crop to `rect`. A pair survives only if both of its boxes keep a positive
/// area inside the window; survivors are clipped and renormalized.
pub fn crop_sample(sample: &Sample, rect: CropRect) -> Sample {
    let (iw, ih) = (sample.image.width() as f64, sample.image.height() as f64);
    let (x0, y0, x1, y1) = (rect.x as f64, rect.y as f64, (rect.x + rect.w) as f64, (rect.y + rect.h) as f64);
    let clip = |b: &BBox| -> Option<BBox> {
        let c = b.to_corners();
        let nx1 = (c.x1 * iw).max(x0);
        let ny1 = (c.y1 * ih).max(y0);
        let nx2 = (c.x2 * iw).min(x1);
        let ny2 = (c.y2 * ih).min(y1);
        (nx2 > nx1 && ny2 > ny1).then(|| {
            BBox::from_corners(
                (nx1 - x0) / rect.w as f64,
                (ny1 - y0) / rect.h as f64,
                (nx2 - x0) / rect.w as f64,
                (ny2 - y0) / rect.h as f64,
            )
        })
    };
    let hois = sample
        .hois
        .iter()
        .filter_map(|h| {
            let human_box = clip(&h.human_box)?;
            let object_box = clip(&h.object_box)?;
            Some(crate::matching::GroundTruthHoi {
                human_box,
                object_box,
                ..h.clone()
            })
        })
        .collect();
    Sample {
        id: sample.id.clone(),
        image: sample.image.crop(rect.x, rect.y, rect.w, rect.h),
        hois,
    }
}

fn jitter(image: &mut Image, brightness: Option<f64>, contrast: Option<f64>) {
    if let Some(f) = brightness {
        for p in image.pixels_mut() {
            *p = (*p * f).clamp(0.0, 1.0);
        }
    }
    if let Some(f) = contrast {
        let px = image.pixels();
        let mean = px.iter().sum::<f64>() / px.len() as f64;
        for p in image.pixels_mut() {
            *p = ((*p - mean) * f + mean).clamp(0.0, 1.0);
        }
    }
}

fn scaled_size(w: usize, h: usize, short: usize, max_size: usize) -> (usize, usize) {
    let mut f = short as f64 / w.min(h) as f64;
    if w.max(h) as f64 * f > max_size as f64 {
        f = max_size as f64 / w.max(h) as f64;
    }
    (((w as f64 * f).round() as usize).max(1), ((h as f64 * f).round() as usize).max(1))
}

fn random_resize<R: Rng>(sample: Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let short = rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1]);
    let (w, h) = scaled_size(sample.image.width(), sample.image.height(), short, cfg.max_size);
    // normalized boxes are unaffected by a resize
    Sample {
        image: sample.image.resize(w, h),
        ..sample
    }
}

/// Apply the augmentation chain. Never fails.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R, cfg: &AugmentConfig) -> Sample {
    let mut out = sample.clone();
    if cfg.color_jitter {
        let [lo, hi] = cfg.jitter_range;
        let b = rng.gen_bool(cfg.jitter_prob).then(|| rng.gen_range(lo..=hi));
        let c = rng.gen_bool(cfg.jitter_prob).then(|| rng.gen_range(lo..=hi));
        jitter(&mut out.image, b, c);
    }
    if rng.gen_bool(cfg.flip_prob) {
        out.image = out.image.hflip();
        for h in &mut out.hois {
            h.human_box = h.human_box.hflip();
            h.object_box = h.object_box.hflip();
        }
    }
    if cfg.scale {
        out = random_resize(out, cfg, rng);
    }
    if cfg.crop && rng.gen_bool(cfg.crop_prob) {
        let (w, h) = (out.image.width(), out.image.height());
        let min_w = ((w as f64 * cfg.crop_min_fraction).ceil() as usize).clamp(1, w);
        let min_h = ((h as f64 * cfg.crop_min_fraction).ceil() as usize).clamp(1, h);
        for _ in 0..cfg.crop_retries {
            let cw = rng.gen_range(min_w..=w);
            let ch = rng.gen_range(min_h..=h);
            let rect = CropRect {
                x: rng.gen_range(0..=w - cw),
                y: rng.gen_range(0..=h - ch),
                w: cw,
                h: ch,
            };
            let cropped = crop_sample(&out, rect);
            // a crop that erases every label teaches nothing
            if cropped.hois.is_empty() && !out.hois.is_empty() {
                continue;
            }
            out = if cfg.scale {
                random_resize(cropped, cfg, rng)
            } else {
                Sample {
                    image: cropped.image.resize(w, h),
                    ..cropped
                }
            };
            break;
        }
    }
    out
}
