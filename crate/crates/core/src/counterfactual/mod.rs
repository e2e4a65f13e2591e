//! Classifier-supervised cycle-GAN: two U-Net generators (sick→healthy and
//! healthy→sick), two patch critics, and a frozen classifier whose decision
//! the generators must flip.

mod losses;
mod train;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::classifier::BinaryClassifier;
use crate::error::{Error, Result};
use crate::forge::{derive_seed, DiseaseLabel};
use crate::nn::{Critic, CriticArch, GeneratorArch, ImageMap, UNet};
use crate::raster::Image;

pub use losses::{
    adversarial_loss, classifier_consistency_loss, cycle_loss, identity_loss, l1_loss, lsgan_grad, lsgan_value,
    PROB_CLAMP,
};
pub use train::{generator_grads, train_counterfactual_gan, GanEpochLog, GeneratorGrads, ProbeStats};

pub const BUNDLE_KIND: &str = "counterfactual_bundle";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub cyc: f64,
    pub id: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adv: 1.0, cyc: 10.0, id: 5.0, cls: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub generator: GeneratorArch,
    pub critic: CriticArch,
    #[serde(default)]
    pub weights: LossWeights,
    pub epochs: usize,
    /// Optimisation steps per epoch; 0 means one pass over the larger domain.
    #[serde(default)]
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_critic: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    pub seed: u64,
    /// Images per domain used to track cycle error and flip rate each epoch.
    #[serde(default = "default_probe")]
    pub probe_size: usize,
}

fn default_beta1() -> f64 {
    0.5
}

fn default_probe() -> usize {
    64
}

impl GanConfig {
    pub fn desk(side: usize, seed: u64) -> Self {
        Self {
            generator: GeneratorArch::desk(side),
            critic: CriticArch::desk(side),
            weights: LossWeights::default(),
            epochs: 3,
            steps_per_epoch: 100,
            batch_size: 8,
            lr_generator: 1e-3,
            lr_critic: 1e-3,
            beta1: default_beta1(),
            seed,
            probe_size: default_probe(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.adv, w.cyc, w.id, w.cls].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {w:?}")));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("GAN epochs and batch size must be positive".into()));
        }
        if !(self.lr_generator > 0.0 && self.lr_critic > 0.0) {
            return Err(Error::Config("GAN learning rates must be positive".into()));
        }
        if self.generator.side != self.critic.side {
            return Err(Error::Config("generator and critic image sides differ".into()));
        }
        UNet::new(self.generator.clone()).map_err(Error::Config)?;
        Critic::new(self.critic.clone()).map_err(Error::Config)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    SickToHealthy,
    HealthyToSick,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::SickToHealthy => "sick_to_healthy",
            Direction::HealthyToSick => "healthy_to_sick",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualPair {
    pub factual: Image,
    pub counterfactual: Image,
    pub direction: Direction,
    pub f_x: f64,
    pub f_x_cf: f64,
}

/// Generators, critics, loss weights and the frozen supervising classifier.
#[derive(Clone, Debug)]
pub struct CounterfactualBundle {
    generator: UNet,
    critic: Critic,
    pub g_sh: Vec<f32>,
    pub g_hs: Vec<f32>,
    pub d_h: Vec<f32>,
    pub d_s: Vec<f32>,
    classifier: BinaryClassifier,
    classifier_checksum: String,
    pub config: GanConfig,
    pub history: Vec<GanEpochLog>,
}

impl CounterfactualBundle {
    /// Freshly initialised networks around `classifier`.
    pub fn initialize(classifier: &BinaryClassifier, config: &GanConfig) -> Result<Self> {
        config.validate()?;
        if config.generator.side != classifier.side() {
            return Err(Error::Shape {
                expected: format!("{0}x{0} classifier", config.generator.side),
                got: format!("{0}x{0}", classifier.side()),
            });
        }
        let generator = UNet::new(config.generator.clone()).map_err(Error::Config)?;
        let critic = Critic::new(config.critic.clone()).map_err(Error::Config)?;
        let rng = |k: u64| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, k));
        Ok(Self {
            g_sh: generator.initialize(&mut rng(1)),
            g_hs: generator.initialize(&mut rng(2)),
            d_h: critic.layout().initialize(&mut rng(3)),
            d_s: critic.layout().initialize(&mut rng(4)),
            generator,
            critic,
            classifier_checksum: classifier.checksum(),
            classifier: classifier.clone(),
            config: config.clone(),
            history: Vec::new(),
        })
    }

    /// Both generators return their input unchanged.
    pub fn identity(classifier: &BinaryClassifier, config: &GanConfig) -> Result<Self> {
        let arch = GeneratorArch { head_scale: 0.0, mask_bias: -1e4, ..config.generator.clone() };
        let config = GanConfig { generator: arch, ..config.clone() };
        Self::initialize(classifier, &config)
    }

    pub fn generator(&self) -> &UNet {
        &self.generator
    }

    pub fn critic(&self) -> &Critic {
        &self.critic
    }

    pub fn classifier(&self) -> &BinaryClassifier {
        &self.classifier
    }

    pub fn classifier_checksum(&self) -> &str {
        &self.classifier_checksum
    }

    pub fn verify_classifier(&self) -> Result<()> {
        let actual = self.classifier.checksum();
        if actual != self.classifier_checksum {
            return Err(Error::Checksum { expected: self.classifier_checksum.clone(), actual });
        }
        Ok(())
    }

    /// Classifier-consistency loss of `x_cf` against `target` under the
    /// supervising classifier, refusing to score if it has changed.
    pub fn consistency_loss(&self, x_cf: &[&Image], target: DiseaseLabel) -> Result<f64> {
        self.verify_classifier()?;
        if x_cf.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let x = Image::to_tensor(x_cf);
        let (loss, _) = classifier_consistency_loss(self.classifier.net(), self.classifier.params(), &x, target.target());
        Ok(loss as f64)
    }

    fn params_for(&self, direction: Direction) -> &[f32] {
        match direction {
            Direction::SickToHealthy => &self.g_sh,
            Direction::HealthyToSick => &self.g_hs,
        }
    }

    /// Applies one generator to a batch, bypassing the routing rule.
    pub fn translate(&self, direction: Direction, images: &[&Image]) -> Result<Vec<Image>> {
        let side = self.config.generator.side;
        if let Some(bad) = images.iter().find(|i| i.side() != side) {
            return Err(Error::Shape { expected: format!("{side}x{side} images"), got: format!("{0}x{0}", bad.side()) });
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let y = self.generator.apply(self.params_for(direction), &Image::to_tensor(chunk));
            out.extend(Image::from_tensor(&y));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            BUNDLE_KIND,
            json!({
                "config": self.config,
                "loss_weights": self.config.weights,
                "classifier_sha256": self.classifier_checksum,
                "classifier_arch": self.classifier.arch(),
                "classifier_method": self.classifier.method(),
                "history": self.history,
            }),
        )
        .with_tensor("g_sh", self.g_sh.clone())
        .with_tensor("g_hs", self.g_hs.clone())
        .with_tensor("d_h", self.d_h.clone())
        .with_tensor("d_s", self.d_s.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Loads a bundle and re-attaches `classifier`, which must be the exact
    /// classifier the bundle was trained against.
    pub fn load(path: &Path, classifier: &BinaryClassifier) -> Result<Self> {
        let ck = Checkpoint::load_kind(path, BUNDLE_KIND)?;
        let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let stored = ck.meta["classifier_sha256"].as_str().ok_or_else(|| bad("missing classifier checksum".into()))?;
        if stored != classifier.checksum() {
            return Err(Error::Checksum { expected: stored.to_string(), actual: classifier.checksum() });
        }
        let config: GanConfig = serde_json::from_value(ck.meta["config"].clone()).map_err(|e| bad(e.to_string()))?;
        let mut bundle = Self::initialize(classifier, &config)?;
        for (name, slot) in [
            ("g_sh", &mut bundle.g_sh),
            ("g_hs", &mut bundle.g_hs),
            ("d_h", &mut bundle.d_h),
            ("d_s", &mut bundle.d_s),
        ] {
            let t = ck.tensor(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.len() != slot.len() {
                return Err(bad(format!("tensor {name} has {} values, expected {}", t.len(), slot.len())));
            }
            slot.copy_from_slice(t);
        }
        bundle.history = serde_json::from_value(ck.meta["history"].clone()).map_err(|e| bad(e.to_string()))?;
        Ok(bundle)
    }
}

/// Routes each image through `G_SH` when the classifier calls it sick and
/// through `G_HS` otherwise, recording both classifier outputs.
pub fn generate_counterfactuals(bundle: &CounterfactualBundle, images: &[&Image]) -> Result<Vec<CounterfactualPair>> {
    bundle.verify_classifier()?;
    let f = bundle.classifier();
    let p = f.predict_proba(images)?;
    let mut out: Vec<Option<CounterfactualPair>> = vec![None; images.len()];
    for dir in [Direction::SickToHealthy, Direction::HealthyToSick] {
        let idx: Vec<usize> =
            (0..images.len()).filter(|&i| f.decide(p[i]) == (dir == Direction::SickToHealthy)).collect();
        if idx.is_empty() {
            continue;
        }
        let sel: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
        let cfs = bundle.translate(dir, &sel)?;
        let refs: Vec<&Image> = cfs.iter().collect();
        let p_cf = f.predict_proba(&refs)?;
        for ((&i, cf), pc) in idx.iter().zip(cfs).zip(p_cf) {
            out[i] = Some(CounterfactualPair {
                factual: images[i].clone(),
                counterfactual: cf,
                direction: dir,
                f_x: p[i],
                f_x_cf: pc,
            });
        }
    }
    Ok(out.into_iter().map(|p| p.expect("every image is routed")).collect())
}

pub fn generate_counterfactual(bundle: &CounterfactualBundle, image: &Image) -> Result<CounterfactualPair> {
    Ok(generate_counterfactuals(bundle, &[image])?.remove(0))
}

/// `|x − x_cf|` scaled so its maximum is 1; all zeros when nothing changed.
pub fn difference_heatmap(pair: &CounterfactualPair) -> Image {
    let diff: Vec<f32> =
        pair.factual.pixels().iter().zip(pair.counterfactual.pixels()).map(|(a, b)| (a - b).abs()).collect();
    let max = diff.iter().cloned().fold(0.0f32, f32::max);
    let side = pair.factual.side();
    if max > 0.0 {
        Image::new(side, diff.iter().map(|d| d / max).collect()).expect("normalised into [0, 1]")
    } else {
        Image::filled(side, 0.0)
    }
}

/// Share of heatmap mass inside `mask`; 0 for an all-zero heatmap.
pub fn region_mass(heatmap: &Image, mask: &[bool]) -> Result<f64> {
    if mask.len() != heatmap.pixels().len() {
        return Err(Error::Shape { expected: format!("{} mask entries", heatmap.pixels().len()), got: mask.len().to_string() });
    }
    let total: f64 = heatmap.pixels().iter().map(|&v| v as f64).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = heatmap.pixels().iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64).sum();
    Ok(inside / total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSidecar {
    pub id: String,
    pub direction: Direction,
    pub f_x: f64,
    pub f_x_cf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_x_cf: Option<f64>,
}

/// Writes `<id>_factual.png`, `<id>_counterfactual.png`, `<id>_heatmap.png`
/// and `<id>.json`.
pub fn write_pair(dir: &Path, id: &str, pair: &CounterfactualPair, detector: Option<(f64, f64)>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    pair.factual.save_png(&dir.join(format!("{id}_factual.png")))?;
    pair.counterfactual.save_png(&dir.join(format!("{id}_counterfactual.png")))?;
    difference_heatmap(pair).save_png(&dir.join(format!("{id}_heatmap.png")))?;
    let side = PairSidecar {
        id: id.to_string(),
        direction: pair.direction,
        f_x: pair.f_x,
        f_x_cf: pair.f_x_cf,
        d_x: detector.map(|d| d.0),
        d_x_cf: detector.map(|d| d.1),
    };
    let path = dir.join(format!("{id}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&path, e))
}
