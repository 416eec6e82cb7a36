//! Flat-shaded rendering of a label image into an RGB picture.

use humansense_autodiff::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::raster::LabelImage;
use crate::error::{Error, Result};
use crate::skeleton::BACKGROUND;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Background {
    Flat { level: f64 },
    /// Random base color plus a few random sinusoidal gratings per channel.
    Textured { amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderStyle {
    /// Half-width of the uniform per-channel pixel noise.
    pub noise: f64,
    pub background: Background,
    /// Upper bound on the number of distractor ellipses painted on the
    /// background.
    pub distractors: usize,
    pub saturation: f64,
    pub value: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            noise: 0.03,
            background: Background::Textured { amplitude: 0.08 },
            distractors: 3,
            saturation: 0.75,
            value: 0.9,
        }
    }
}

impl RenderStyle {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let bg_ok = match self.background {
            Background::Flat { level } => unit(level),
            Background::Textured { amplitude } => unit(amplitude),
        };
        if !(unit(self.noise) && unit(self.saturation) && unit(self.value) && bg_ok) {
            return Err(Error::Config("render style values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Base color of part `label` (golden-ratio hue walk).
    pub fn part_color(&self, label: u8) -> [f64; 3] {
        let hue = (label as f64 * 0.618_033_988_749_895).fract();
        hsv_to_rgb(hue, self.saturation, self.value)
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).min(5.999_999);
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Interleaved 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[H, W, 3]` with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn([self.height, self.width, 3], |i| self.data[i] as f64 / 255.0)
    }

    pub fn from_unit(height: usize, width: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), height * width * 3);
        Self {
            height,
            width,
            data: values.iter().map(|&v| quantize(v)).collect(),
        }
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders parts in their base colors over a background with optional
/// distractors, adds uniform noise and quantizes to 8 bits.
pub fn render_image<R: Rng + ?Sized>(labels: &LabelImage, rng: &mut R, style: &RenderStyle) -> RgbImage {
    let (h, w) = (labels.height, labels.width);
    let mut px = vec![0.0; h * w * 3];

    match style.background {
        Background::Flat { level } => px.iter_mut().for_each(|v| *v = level),
        Background::Textured { amplitude } => {
            let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
            let gratings: Vec<[f64; 4]> = (0..9)
                .map(|_| {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let freq = rng.random_range(0.05..0.3) * std::f64::consts::TAU;
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    [freq * angle.cos(), freq * angle.sin(), phase, amplitude]
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let mut v = base[c];
                        for g in &gratings[c * 3..c * 3 + 3] {
                            v += g[3] * (g[0] * x as f64 + g[1] * y as f64 + g[2]).sin();
                        }
                        px[(y * w + x) * 3 + c] = v;
                    }
                }
            }
        }
    }

    if style.distractors > 0 {
        let count = rng.random_range(0..=style.distractors);
        let max_axis = (h.min(w) as f64 / 6.0).max(2.0);
        for _ in 0..count {
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let a = rng.random_range(1.0..=max_axis);
            let b = rng.random_range(1.0..=max_axis);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let (s, co) = theta.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    if labels.get(x, y) != BACKGROUND {
                        continue;
                    }
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let u = dx * co + dy * s;
                    let v = -dx * s + dy * co;
                    if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                        px[(y * w + x) * 3..][..3].copy_from_slice(&color);
                    }
                }
            }
        }
    }

    for (i, &l) in labels.data.iter().enumerate() {
        if l != BACKGROUND {
            px[i * 3..][..3].copy_from_slice(&style.part_color(l));
        }
    }

    if style.noise > 0.0 {
        for v in px.iter_mut() {
            *v += rng.random_range(-style.noise..=style.noise);
        }
    }
    RgbImage::from_unit(h, w, &px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-9);
    }

    #[test]
    fn part_colors_are_distinct_after_quantization() {
        let style = RenderStyle::default();
        let mut seen: Vec<[u8; 3]> = (1..=40).map(|l| style.part_color(l).map(quantize)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 40);
    }
}
