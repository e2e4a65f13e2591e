//! Desk-scale stand-in for radiographs: a smooth low-frequency background
//! with pixel noise; sick images additionally carry one bright blob in the
//! lower half of the image.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ArtifactSpec, DiseaseLabel};
use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub mean: f64,
    /// Standard deviation of each random cosine component.
    pub wave_amplitude: f64,
    pub waves: usize,
    /// Highest spatial frequency, in cycles per image.
    pub max_frequency: u32,
    pub noise_std: f64,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self { mean: 0.5, wave_amplitude: 0.03, waves: 6, max_frequency: 2, noise_std: 0.05 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    #[default]
    BrightBlob,
}

/// Geometry is in fractions of the image side so one spec serves any size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseaseMarkerSpec {
    #[serde(default)]
    pub kind: MarkerKind,
    pub center_row: (f64, f64),
    pub center_col: (f64, f64),
    pub radius: (f64, f64),
    /// Brightness added on the blob plateau.
    pub delta: (f64, f64),
}

impl Default for DiseaseMarkerSpec {
    fn default() -> Self {
        Self {
            kind: MarkerKind::BrightBlob,
            center_row: (0.68, 0.84),
            center_col: (0.2, 0.8),
            radius: (0.07, 0.11),
            delta: (0.10, 0.18),
        }
    }
}

impl DiseaseMarkerSpec {
    /// True when no blob can touch the artifact disk at this resolution.
    pub fn clear_of(&self, side: usize, artifact: &ArtifactSpec) -> bool {
        let (cy, cx) = artifact.center_for(side);
        let r_art = artifact.radius as f64;
        let s = side as f64;
        let r_max = self.radius.1 * s;
        let rows = (self.center_row.0 * s, self.center_row.1 * s);
        let cols = (self.center_col.0 * s, self.center_col.1 * s);
        // nearest point of the centre box to the artifact centre
        let ny = (cy as f64).clamp(rows.0, rows.1);
        let nx = (cx as f64).clamp(cols.0, cols.1);
        let gap = ((ny - cy as f64).powi(2) + (nx - cx as f64).powi(2)).sqrt();
        gap > r_max + r_art
    }

    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("center_row", self.center_row),
            ("center_col", self.center_col),
            ("radius", self.radius),
            ("delta", self.delta),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return Err(Error::Config(format!("marker {name} range ({lo}, {hi}) is invalid")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub side: usize,
    #[serde(default)]
    pub background: BackgroundSpec,
    #[serde(default)]
    pub marker: DiseaseMarkerSpec,
}

impl SceneSpec {
    pub fn desk(side: usize) -> Self {
        Self { side, background: BackgroundSpec::default(), marker: DiseaseMarkerSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::Config(format!("image side {} is too small", self.side)));
        }
        self.marker.validate()
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Plateau out to half the radius, cosine-squared falloff to zero at the rim.
fn blob_profile(d: f64, r: f64) -> f64 {
    let inner = 0.5 * r;
    if d <= inner {
        1.0
    } else if d >= r {
        0.0
    } else {
        0.5 * (1.0 + (PI * (d - inner) / (r - inner)).cos())
    }
}

/// Draws one image. The background is drawn before the blob parameters, so
/// healthy and sick images from equal rng states share their background.
pub fn synthesize_base_image<R: Rng + ?Sized>(rng: &mut R, label: DiseaseLabel, scene: &SceneSpec) -> Image {
    let side = scene.side;
    let bg = &scene.background;
    let s = side as f64;
    let fmax = bg.max_frequency as i32;
    let waves: Vec<(f64, f64, f64, f64)> = (0..bg.waves)
        .map(|_| {
            let (mut fy, mut fx) = (0, 0);
            while fy == 0 && fx == 0 {
                fy = rng.random_range(-fmax..=fmax);
                fx = rng.random_range(-fmax..=fmax);
            }
            let amp: f64 = StandardNormal.sample(rng);
            let phase = rng.random_range(0.0..2.0 * PI);
            (fy as f64, fx as f64, amp * bg.wave_amplitude, phase)
        })
        .collect();
    let noise = Normal::new(0.0, bg.noise_std.max(0.0)).expect("valid noise std");
    let mut field = vec![0.0f64; side * side];
    for y in 0..side {
        for x in 0..side {
            let mut v = bg.mean;
            for &(fy, fx, a, ph) in &waves {
                v += a * (2.0 * PI * (fy * y as f64 + fx * x as f64) / s + ph).cos();
            }
            field[y * side + x] = v + noise.sample(rng);
        }
    }
    if label == DiseaseLabel::Sick {
        let m = &scene.marker;
        let cy = uniform(rng, m.center_row) * s;
        let cx = uniform(rng, m.center_col) * s;
        let r = uniform(rng, m.radius) * s;
        let delta = uniform(rng, m.delta);
        for y in 0..side {
            for x in 0..side {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                field[y * side + x] += delta * blob_profile(d, r);
            }
        }
    }
    Image::from_fn(side, |y, x| field[y * side + x] as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_window_mean(values: &[f64], side: usize, w: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for y in 0..=side - w {
            for x in 0..=side - w {
                let mut acc = 0.0;
                for dy in 0..w {
                    for dx in 0..w {
                        acc += values[(y + dy) * side + x + dx];
                    }
                }
                best = best.max(acc / (w * w) as f64);
            }
        }
        best
    }

    #[test]
    fn same_seed_gives_bit_identical_images() {
        let scene = SceneSpec::desk(64);
        for label in [DiseaseLabel::Healthy, DiseaseLabel::Sick] {
            let a = synthesize_base_image(&mut ChaCha8Rng::seed_from_u64(0), label, &scene);
            let b = synthesize_base_image(&mut ChaCha8Rng::seed_from_u64(0), label, &scene);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sick_blob_raises_local_mean_by_at_least_min_delta() {
        let scene = SceneSpec::desk(64);
        let healthy = synthesize_base_image(&mut ChaCha8Rng::seed_from_u64(0), DiseaseLabel::Healthy, &scene);
        let sick = synthesize_base_image(&mut ChaCha8Rng::seed_from_u64(0), DiseaseLabel::Sick, &scene);
        let diff: Vec<f64> = sick.pixels().iter().zip(healthy.pixels()).map(|(a, b)| (a - b) as f64).collect();
        // window inscribed in the smallest plateau (radius r_min/2)
        let plateau = 0.5 * scene.marker.radius.0 * 64.0;
        let w = (plateau * std::f64::consts::SQRT_2).floor() as usize;
        assert!(w >= 2);
        assert!(max_window_mean(&diff, 64, w) >= scene.marker.delta.0 - 1e-6);
        let changed_rows: Vec<usize> = (0..64 * 64).filter(|&i| diff[i] != 0.0).map(|i| i / 64).collect();
        assert!(changed_rows.iter().all(|&r| r > 32), "blob must stay in the lower half");
    }

    #[test]
    fn healthy_background_has_no_blob_sized_bright_region() {
        let scene = SceneSpec::desk(64);
        let healthy = synthesize_base_image(&mut ChaCha8Rng::seed_from_u64(0), DiseaseLabel::Healthy, &scene);
        let values: Vec<f64> = healthy.pixels().iter().map(|&v| v as f64).collect();
        let w = (scene.marker.radius.1 * 64.0) as usize;
        // local brightening relative to the background level stays below the blob threshold
        let bump = max_window_mean(&values, 64, w) - scene.background.mean;
        assert!(bump < scene.marker.delta.1, "{bump}");
    }

    #[test]
    fn default_marker_is_clear_of_centre_dot() {
        let m = DiseaseMarkerSpec::default();
        assert!(m.clear_of(64, &ArtifactSpec::disk(3)));
        assert!(m.clear_of(512, &ArtifactSpec::disk(9)));
        let low = DiseaseMarkerSpec { center_row: (0.45, 0.6), ..m };
        assert!(!low.clear_of(64, &ArtifactSpec::disk(3)));
    }
}
