//! Gaussian belief-map targets.

use humansense_autodiff::Tensor;

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 2.0;

/// Belief-map targets and a per-joint flag telling whether the joint fell
/// inside the map.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmaps {
    pub maps: Tensor,
    pub in_range: Vec<bool>,
}

/// Map coordinate of image coordinate `u` for a map with the given stride:
/// map cell `i` covers pixels `stride*i .. stride*(i+1)-1`.
pub fn image_to_map(u: f64, stride: usize) -> f64 {
    (u - (stride as f64 - 1.0) / 2.0) / stride as f64
}

pub fn map_to_image(m: f64, stride: usize) -> f64 {
    m * stride as f64 + (stride as f64 - 1.0) / 2.0
}

/// Image-space `[x, y]` of the maximum of every channel of `[h', w', K]`
/// maps; ties go to the first cell in row-major order.
pub fn heatmap_peaks(maps: &Tensor, stride: usize) -> Result<Vec<[f64; 2]>> {
    let (_, w, k) = maps.hwc()?;
    let mut best = vec![(f64::NEG_INFINITY, 0usize); k];
    for (cell, px) in maps.data().chunks(k).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            if v > best[c].0 {
                best[c] = (v, cell);
            }
        }
    }
    Ok(best
        .iter()
        .map(|&(_, cell)| {
            [
                map_to_image((cell % w) as f64, stride),
                map_to_image((cell / w) as f64, stride),
            ]
        })
        .collect())
}

/// Channel `k` is `exp(-d^2 / (2 sigma^2))` of the distance to joint `k`,
/// cut to zero beyond `3 sigma`. Points are `[x, y]` in map coordinates;
/// a point outside the map yields an all-zero channel.
pub fn make_joint_heatmaps(points: &[[f64; 2]], sigma: f64, height: usize, width: usize) -> Result<Heatmaps> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let n = points.len();
    let mut data = vec![0.0; height * width * n];
    let cutoff = 3.0 * sigma;
    let in_range: Vec<bool> = points
        .iter()
        .map(|p| {
            p[0].is_finite()
                && p[1].is_finite()
                && p[0] >= -0.5
                && p[1] >= -0.5
                && p[0] <= width as f64 - 0.5
                && p[1] <= height as f64 - 0.5
        })
        .collect();
    for (k, p) in points.iter().enumerate() {
        if !in_range[k] {
            continue;
        }
        for y in 0..height {
            for x in 0..width {
                let d2 = (x as f64 - p[0]).powi(2) + (y as f64 - p[1]).powi(2);
                if d2 <= cutoff * cutoff {
                    data[(y * width + x) * n + k] = (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    Ok(Heatmaps {
        maps: Tensor::new([height, width, n], data)?,
        in_range,
    })
}

/// Targets at feature resolution for image-space joints.
pub fn heatmaps_for_image(joints2d: &[[f64; 2]], stride: usize, sigma: f64, height: usize, width: usize) -> Result<Heatmaps> {
    let points: Vec<[f64; 2]> = joints2d
        .iter()
        .map(|p| [image_to_map(p[0], stride), image_to_map(p[1], stride)])
        .collect();
    make_joint_heatmaps(&points, sigma, height, width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_and_one_sigma() {
        let h = make_joint_heatmaps(&[[3.0, 4.0]], 2.0, 8, 8).unwrap();
        assert_eq!(h.maps.data()[4 * 8 + 3], 1.0);
        assert!((h.maps.data()[4 * 8 + 5] - (-0.5f64).exp()).abs() < 1e-15);
        assert!(h.in_range[0]);
    }

    #[test]
    fn outside_joint_gives_zero_channel() {
        let h = make_joint_heatmaps(&[[-3.0, 4.0], [1.0, 1.0]], 2.0, 8, 8).unwrap();
        assert_eq!(h.in_range, vec![false, true]);
        assert!(h.maps.data().iter().step_by(2).all(|&v| v == 0.0));
    }

    #[test]
    fn cell_centers_map_to_integers() {
        assert_eq!(image_to_map(3.5, 8), 0.0);
        assert_eq!(image_to_map(11.5, 8), 1.0);
    }
}
