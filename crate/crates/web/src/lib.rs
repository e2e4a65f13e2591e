//! wasm-bindgen surface for the static demo in `www/`.
//!
//! Every export is a plain function over numbers and byte buffers; images
//! cross the boundary as row-major 8-bit grayscale.

use cfdebias::classifier::{dro_weight_update, GroupWeights};
use cfdebias::counterfactual::{difference_heatmap, region_mass, CounterfactualPair, Direction};
use cfdebias::forge::{inject_artifact, synthesize_base_image, ArtifactSpec, DiseaseLabel, SceneSpec};
use cfdebias::metrics::{actionability, ssim};
use cfdebias::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn draw(seed: u32, label: DiseaseLabel, side: usize) -> Result<Image, String> {
    let scene = SceneSpec::desk(side);
    scene.validate().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    Ok(synthesize_base_image(&mut rng, label, &scene))
}

fn artifact(radius: u32, intensity: f32) -> ArtifactSpec {
    ArtifactSpec { intensity, ..ArtifactSpec::disk(radius) }
}

#[wasm_bindgen]
pub struct ForgePreview {
    side: usize,
    base: Vec<u8>,
    injected: Vec<u8>,
    mask: Vec<u8>,
}

#[wasm_bindgen]
impl ForgePreview {
    #[wasm_bindgen(getter)]
    pub fn side(&self) -> usize {
        self.side
    }

    #[wasm_bindgen(getter)]
    pub fn base(&self) -> Vec<u8> {
        self.base.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn injected(&self) -> Vec<u8> {
        self.injected.clone()
    }

    /// 255 where the artifact was painted.
    #[wasm_bindgen(getter)]
    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }
}

/// One synthetic image before and after artifact injection.
#[wasm_bindgen]
pub fn forge_preview(seed: u32, sick: bool, side: usize, radius: u32, intensity: f32) -> Result<ForgePreview, String> {
    let label = if sick { DiseaseLabel::Sick } else { DiseaseLabel::Healthy };
    let base = draw(seed, label, side)?;
    let spec = artifact(radius, intensity);
    let injected = inject_artifact(&base, &spec).map_err(err)?;
    let mask = spec.mask(side).map_err(err)?.into_iter().map(|m| if m { 255 } else { 0 }).collect();
    Ok(ForgePreview { side, base: base.quantize(), injected: injected.quantize(), mask })
}

#[wasm_bindgen]
pub struct Trajectory {
    groups: usize,
    weights: Vec<f64>,
    losses: Vec<f64>,
}

#[wasm_bindgen]
impl Trajectory {
    #[wasm_bindgen(getter)]
    pub fn groups(&self) -> usize {
        self.groups
    }

    #[wasm_bindgen(getter)]
    pub fn steps(&self) -> usize {
        self.weights.len() / self.groups - 1
    }

    /// `(steps + 1) x groups`, row-major.
    #[wasm_bindgen(getter)]
    pub fn weights(&self) -> Vec<f64> {
        self.weights.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }
}

/// Group weights under repeated exponentiated-gradient updates. Each step a
/// group's loss shrinks by `fit_rate * q_g`, a stand-in for the model fitting
/// whichever groups currently carry the most weight.
#[wasm_bindgen]
pub fn dro_trajectory(initial_losses: Vec<f64>, eta_q: f64, steps: usize, fit_rate: f64) -> Result<Trajectory, String> {
    if initial_losses.is_empty() {
        return Err("need at least one group".into());
    }
    if !(0.0..=1.0).contains(&fit_rate) {
        return Err(format!("fit rate {fit_rate} outside [0, 1]"));
    }
    let groups = initial_losses.len();
    let mut q = GroupWeights::uniform(groups);
    let mut l = initial_losses;
    let mut weights = q.as_slice().to_vec();
    let mut losses = l.clone();
    for _ in 0..steps {
        q = dro_weight_update(&q, &l, eta_q).map_err(err)?;
        for (li, qi) in l.iter_mut().zip(q.as_slice()) {
            *li *= 1.0 - fit_rate * qi;
        }
        weights.extend_from_slice(q.as_slice());
        losses.extend_from_slice(&l);
    }
    Ok(Trajectory { groups, weights, losses })
}

#[wasm_bindgen]
pub struct Comparison {
    side: usize,
    factual: Vec<u8>,
    counterfactual: Vec<u8>,
    heatmap: Vec<u8>,
    ssim: f64,
    actionability: f64,
    region_mass: f64,
}

#[wasm_bindgen]
impl Comparison {
    #[wasm_bindgen(getter)]
    pub fn side(&self) -> usize {
        self.side
    }

    #[wasm_bindgen(getter)]
    pub fn factual(&self) -> Vec<u8> {
        self.factual.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn counterfactual(&self) -> Vec<u8> {
        self.counterfactual.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn heatmap(&self) -> Vec<u8> {
        self.heatmap.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }

    #[wasm_bindgen(getter)]
    pub fn actionability(&self) -> f64 {
        self.actionability
    }

    /// Share of heatmap mass inside the artifact disk.
    #[wasm_bindgen(getter)]
    pub fn region_mass(&self) -> f64 {
        self.region_mass
    }
}

/// Hand-made counterfactual for a sick image carrying the artifact: erase a
/// fraction of the artifact and of the disease blob, then score the edit.
/// A classifier that latched onto the artifact would produce edits with a
/// high `artifact_removal`; a debiased one edits the blob.
#[wasm_bindgen]
pub fn compare_edit(
    seed: u32,
    side: usize,
    radius: u32,
    intensity: f32,
    artifact_removal: f32,
    marker_removal: f32,
) -> Result<Comparison, String> {
    for (name, v) in [("artifact removal", artifact_removal), ("marker removal", marker_removal)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("{name} {v} outside [0, 1]"));
        }
    }
    let sick = draw(seed, DiseaseLabel::Sick, side)?;
    let twin = draw(seed, DiseaseLabel::Healthy, side)?;
    let spec = artifact(radius, intensity);
    let mask = spec.mask(side).map_err(err)?;
    let factual = inject_artifact(&sick, &spec).map_err(err)?;
    let cf = Image::from_fn(side, |y, x| {
        let i = y * side + x;
        let s = sick.get(y, x);
        let v = s - marker_removal * (s - twin.get(y, x));
        if mask[i] {
            intensity + artifact_removal * (v - intensity)
        } else {
            v
        }
    });
    // round-trip through 8 bits, the same precision the pipeline stores
    let factual = Image::from_gray8(side, &factual.quantize()).map_err(err)?;
    let cf = Image::from_gray8(side, &cf.quantize()).map_err(err)?;
    let ssim_v = ssim(&factual, &cf).map_err(err)?;
    let act = actionability(&factual, &cf).map_err(err)?;
    let pair = CounterfactualPair {
        factual,
        counterfactual: cf,
        direction: Direction::SickToHealthy,
        f_x: f64::NAN,
        f_x_cf: f64::NAN,
    };
    let heat = difference_heatmap(&pair);
    let mass = region_mass(&heat, &mask).map_err(err)?;
    Ok(Comparison {
        side,
        factual: pair.factual.quantize(),
        counterfactual: pair.counterfactual.quantize(),
        heatmap: heat.quantize(),
        ssim: ssim_v,
        actionability: act,
        region_mass: mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preview_paints_only_the_mask() {
        let p = forge_preview(3, true, 32, 3, 1.0).unwrap();
        assert_eq!(p.base().len(), 32 * 32);
        for i in 0..32 * 32 {
            if p.mask()[i] == 255 {
                assert_eq!(p.injected()[i], 255);
            } else {
                assert_eq!(p.injected()[i], p.base()[i]);
            }
        }
        assert!(forge_preview(3, true, 32, 40, 1.0).is_err());
    }

    #[test]
    fn trajectory_stays_on_simplex_and_favors_the_worst_group() {
        let t = dro_trajectory(vec![0.1, 0.2, 1.5, 0.3], 0.5, 50, 0.0).unwrap();
        assert_eq!((t.groups(), t.steps()), (4, 50));
        for row in t.weights().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let last = &t.weights()[50 * 4..];
        assert!(last[2] > last[0] && last[2] > 0.9);
        assert!(dro_trajectory(vec![], 0.1, 3, 0.0).is_err());
    }

    #[test]
    fn artifact_only_edit_puts_mass_in_the_disk() {
        let artifact_edit = compare_edit(1, 64, 4, 1.0, 1.0, 0.0).unwrap();
        let marker_edit = compare_edit(1, 64, 4, 1.0, 0.0, 1.0).unwrap();
        assert!((artifact_edit.region_mass() - 1.0).abs() < 1e-9);
        assert!(marker_edit.region_mass() < 1e-9);
        assert!(artifact_edit.ssim() > 90.0 && marker_edit.ssim() > 90.0);
        let none = compare_edit(1, 64, 4, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(none.actionability(), 0.0);
    }
}
