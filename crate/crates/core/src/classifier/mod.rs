//! Disease classifiers trained by ERM or group DRO, and the artifact
//! detector used to score counterfactuals.

mod dro;
mod eval;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{param_checksum, Checkpoint};
use crate::error::{Error, Result};
use crate::forge::{ImageRecord, Subgroup};
use crate::nn::{sigmoid, ClassifierArch, ClassifierNet, LogitModel, Tensor};
use crate::raster::Image;

pub use dro::{bce_with_logit, dro_weight_update, group_mean_losses, weighted_group_loss, GroupWeights};
pub use eval::{auc, evaluate_predictions, GroupMetrics, SubgroupPerformance};
pub use train::{fit, score, EpochLog, FitOutcome, Objective, Selection, TrainingData};

pub const CLASSIFIER_KIND: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ClassifierArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Step size of the group-weight update; ignored outside DRO.
    #[serde(default = "default_eta_q")]
    pub eta_q: f64,
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[serde(default)]
    pub patience: usize,
    /// Subgroups DRO optimises over; all four when absent.
    #[serde(default)]
    pub groups: Option<Vec<Subgroup>>,
}

fn default_eta_q() -> f64 {
    0.01
}

fn default_threshold() -> f64 {
    0.5
}

impl TrainConfig {
    pub fn desk(side: usize, seed: u64) -> Self {
        Self {
            arch: ClassifierArch::desk(side),
            epochs: 25,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            eta_q: default_eta_q(),
            seed,
            threshold: default_threshold(),
            patience: 0,
            groups: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.eta_q >= 0.0 && self.eta_q.is_finite()) {
            return bad(format!("eta_q {} must be non-negative", self.eta_q));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if let Some(g) = &self.groups {
            let mut seen = g.clone();
            seen.sort();
            seen.dedup();
            if seen.len() < 2 || seen.len() != g.len() {
                return bad("DRO needs at least two distinct groups".into());
            }
        }
        ClassifierNet::new(self.arch.clone()).map_err(Error::Config)?;
        Ok(())
    }

    fn dro_groups(&self) -> Vec<Subgroup> {
        self.groups.clone().unwrap_or_else(|| Subgroup::ALL.to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Dro,
    Detector,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Dro => "dro",
            Method::Detector => "detector",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "erm" => Ok(Method::Erm),
            "dro" => Ok(Method::Dro),
            "detector" => Ok(Method::Detector),
            other => Err(format!("unknown method `{other}` (expected erm, dro or detector)")),
        }
    }
}

/// How a classifier came to be; absent for untrained networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub method: Method,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_val_score: f64,
    pub history: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_q: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dro_groups: Option<Vec<Subgroup>>,
}

/// Image → probability model with a fixed decision threshold.
#[derive(Clone, Debug)]
pub struct BinaryClassifier {
    net: ClassifierNet,
    params: Vec<f32>,
    threshold: f64,
    summary: Option<TrainingSummary>,
}

impl BinaryClassifier {
    /// Freshly initialised, untrained network.
    pub fn untrained(arch: ClassifierArch, seed: u64) -> Result<Self> {
        let net = ClassifierNet::new(arch).map_err(Error::Config)?;
        let params = net.layout().initialize(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { net, params, threshold: 0.5, summary: None })
    }

    pub fn from_params(arch: ClassifierArch, params: Vec<f32>, threshold: f64) -> Result<Self> {
        let net = ClassifierNet::new(arch).map_err(Error::Config)?;
        let expected = LogitModel::<f32>::num_params(&net);
        if params.len() != expected {
            return Err(Error::Shape { expected: format!("{expected} parameters"), got: params.len().to_string() });
        }
        Ok(Self { net, params, threshold, summary: None })
    }

    pub fn net(&self) -> &ClassifierNet {
        &self.net
    }

    pub fn arch(&self) -> &ClassifierArch {
        self.net.arch()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn summary(&self) -> Option<&TrainingSummary> {
        self.summary.as_ref()
    }

    pub fn is_trained(&self) -> bool {
        self.summary.is_some()
    }

    pub fn method(&self) -> Option<Method> {
        self.summary.as_ref().map(|s| s.method)
    }

    pub fn side(&self) -> usize {
        self.net.arch().side()
    }

    /// SHA-256 over the parameter bytes; any update changes it.
    pub fn checksum(&self) -> String {
        param_checksum(&self.params)
    }

    fn check_images(&self, images: &[&Image]) -> Result<()> {
        if let Some(bad) = images.iter().find(|i| i.side() != self.side()) {
            return Err(Error::Shape {
                expected: format!("{0}x{0} images", self.side()),
                got: format!("{0}x{0}", bad.side()),
            });
        }
        Ok(())
    }

    pub fn logits_tensor(&self, x: &Tensor<f32>) -> Vec<f32> {
        train::predict_logits(&self.net, &self.params, x)
    }

    pub fn predict_logits(&self, images: &[&Image]) -> Result<Vec<f32>> {
        self.check_images(images)?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.logits_tensor(&Image::to_tensor(images)))
    }

    pub fn predict_proba(&self, images: &[&Image]) -> Result<Vec<f64>> {
        Ok(self.predict_logits(images)?.into_iter().map(|z| sigmoid(z as f64)).collect())
    }

    pub fn prob(&self, image: &Image) -> Result<f64> {
        Ok(self.predict_proba(&[image])?[0])
    }

    pub fn decide(&self, p: f64) -> bool {
        p >= self.threshold
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            CLASSIFIER_KIND,
            json!({
                "arch": self.net.arch(),
                "arch_tag": self.net.arch().tag(),
                "threshold": self.threshold,
                "param_sha256": self.checksum(),
                "training": self.summary,
            }),
        )
        .with_tensor("params", self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, String> {
        let meta = &ck.meta;
        let arch: ClassifierArch = serde_json::from_value(meta["arch"].clone()).map_err(|e| e.to_string())?;
        let threshold = meta["threshold"].as_f64().ok_or("missing threshold")?;
        let stored = meta["param_sha256"].as_str().ok_or("missing parameter checksum")?;
        let params = ck.tensor("params").ok_or("missing params tensor")?.to_vec();
        let mut clf = Self::from_params(arch, params, threshold).map_err(|e| e.to_string())?;
        if clf.checksum() != stored {
            return Err(format!("parameter checksum {} does not match stored {stored}", clf.checksum()));
        }
        clf.summary = serde_json::from_value(meta["training"].clone()).map_err(|e| e.to_string())?;
        Ok(clf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load_kind(path, CLASSIFIER_KIND)?;
        Self::from_checkpoint(&ck).map_err(|reason| Error::Checkpoint { path: path.to_path_buf(), reason })
    }
}

pub fn predict_proba(classifier: &BinaryClassifier, images: &[&Image]) -> Result<Vec<f64>> {
    classifier.predict_proba(images)
}

fn stack(records: &[ImageRecord]) -> Tensor<f32> {
    let imgs: Vec<&Image> = records.iter().map(|r| &r.image).collect();
    Image::to_tensor(&imgs)
}

fn disease_data(records: &[ImageRecord], group_of: impl Fn(&ImageRecord) -> usize, n_groups: usize) -> TrainingData {
    TrainingData::new(
        stack(records),
        records.iter().map(|r| r.disease_label.target()).collect(),
        records.iter().map(group_of).collect(),
        n_groups,
    )
}

fn check_both(records: &[ImageRecord], pred: impl Fn(&ImageRecord) -> bool, what: &str) -> Result<()> {
    let pos = records.iter().filter(|r| pred(r)).count();
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if pos == 0 || pos == records.len() {
        return Err(Error::Training(format!("training set has a single {what} class")));
    }
    Ok(())
}

fn check_side(records: &[ImageRecord], cfg: &TrainConfig) -> Result<()> {
    let side = cfg.arch.side();
    if let Some(r) = records.iter().find(|r| r.image.side() != side) {
        return Err(Error::Shape { expected: format!("{side}x{side} images"), got: format!("{0}x{0} ({1})", r.image.side(), r.id) });
    }
    Ok(())
}

fn finish(cfg: &TrainConfig, method: Method, out: FitOutcome, dro_groups: Option<Vec<Subgroup>>) -> Result<BinaryClassifier> {
    let mut clf = BinaryClassifier::from_params(cfg.arch.clone(), out.params, cfg.threshold)?;
    clf.summary = Some(TrainingSummary {
        method,
        config: cfg.clone(),
        best_epoch: out.best_epoch,
        best_val_score: out.best_score,
        history: out.history,
        final_q: out.final_q.map(|q| q.as_slice().to_vec()),
        dro_groups,
    });
    Ok(clf)
}

fn init_params(cfg: &TrainConfig) -> Result<(ClassifierNet, Vec<f32>)> {
    let net = ClassifierNet::new(cfg.arch.clone()).map_err(Error::Config)?;
    let p = net.layout().initialize(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    Ok((net, p))
}

/// Plain empirical risk minimisation; the checkpoint with the best overall
/// validation accuracy is returned.
pub fn train_erm(train: &[ImageRecord], val: &[ImageRecord], cfg: &TrainConfig) -> Result<BinaryClassifier> {
    cfg.validate()?;
    check_both(train, |r| r.disease_label.target() > 0.5, "disease")?;
    check_side(train, cfg)?;
    check_side(val, cfg)?;
    let (net, init) = init_params(cfg)?;
    let tr = disease_data(train, |_| 0, 1);
    let va = disease_data(val, |_| 0, 1);
    let out = fit(&net, init, &tr, &va, cfg, Objective::Erm, Selection::Accuracy)?;
    finish(cfg, Method::Erm, out, None)
}

/// Online group DRO over the configured subgroups; the checkpoint with the
/// best worst-group validation accuracy is returned.
pub fn train_group_dro(train: &[ImageRecord], val: &[ImageRecord], cfg: &TrainConfig) -> Result<BinaryClassifier> {
    cfg.validate()?;
    check_both(train, |r| r.disease_label.target() > 0.5, "disease")?;
    check_side(train, cfg)?;
    check_side(val, cfg)?;
    let groups = cfg.dro_groups();
    for g in &groups {
        if !train.iter().any(|r| r.subgroup() == *g) {
            return Err(Error::Training(format!("configured group {g} has no training samples")));
        }
    }
    let index = |r: &ImageRecord| groups.iter().position(|g| *g == r.subgroup());
    if let Some(r) = train.iter().find(|r| index(r).is_none()) {
        return Err(Error::Training(format!("record {} belongs to unconfigured group {}", r.id, r.subgroup())));
    }
    let (net, init) = init_params(cfg)?;
    let tr = disease_data(train, |r| index(r).unwrap(), groups.len());
    // validation records outside the configured groups still count, as their own slice
    let val_group = |r: &ImageRecord| index(r).unwrap_or(groups.len() + r.subgroup().index());
    let va = disease_data(val, val_group, groups.len() + 4);
    let out = fit(&net, init, &tr, &va, cfg, Objective::GroupDro { eta_q: cfg.eta_q }, Selection::WorstGroupAccuracy)?;
    finish(cfg, Method::Dro, out, Some(groups))
}

/// Classifier for `p(artifact | image)`.
pub fn train_artifact_detector(train: &[ImageRecord], val: &[ImageRecord], cfg: &TrainConfig) -> Result<BinaryClassifier> {
    cfg.validate()?;
    check_both(train, |r| r.artifact_present, "artifact")?;
    check_side(train, cfg)?;
    check_side(val, cfg)?;
    let (net, init) = init_params(cfg)?;
    let data = |rs: &[ImageRecord]| {
        TrainingData::new(stack(rs), rs.iter().map(|r| r.artifact_present as u8 as f32).collect(), vec![0; rs.len()], 1)
    };
    let out = fit(&net, init, &data(train), &data(val), cfg, Objective::Erm, Selection::Accuracy)?;
    finish(cfg, Method::Detector, out, None)
}

/// Disease-prediction quality per subgroup.
pub fn evaluate_by_subgroup(classifier: &BinaryClassifier, records: &[ImageRecord]) -> Result<SubgroupPerformance> {
    let imgs: Vec<&Image> = records.iter().map(|r| &r.image).collect();
    let probs = classifier.predict_proba(&imgs)?;
    let labels: Vec<bool> = records.iter().map(|r| r.disease_label.target() > 0.5).collect();
    let groups: Vec<Subgroup> = records.iter().map(|r| r.subgroup()).collect();
    evaluate_predictions(&probs, &labels, &groups, classifier.threshold()).ok_or(Error::EmptyDataset)
}

/// Artifact-detection AUC of `detector` on `records`.
pub fn detector_auc(detector: &BinaryClassifier, records: &[ImageRecord]) -> Result<f64> {
    let imgs: Vec<&Image> = records.iter().map(|r| &r.image).collect();
    let probs = detector.predict_proba(&imgs)?;
    let labels: Vec<bool> = records.iter().map(|r| r.artifact_present).collect();
    auc(&probs, &labels).ok_or_else(|| Error::Training("AUC needs records with and without the artifact".into()))
}
