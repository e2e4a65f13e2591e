use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DatasetSource, ExperimentConfig};
use super::report::emit_report;
use super::{read_json, write_json, VERSION};
use crate::classifier::{
    detector_auc, evaluate_by_subgroup, train_artifact_detector, train_erm, train_group_dro, BinaryClassifier, Method,
};
use crate::counterfactual::{
    difference_heatmap, generate_counterfactuals, region_mass, train_counterfactual_gan, write_pair,
    CounterfactualBundle,
};
use crate::error::{Error, Result};
use crate::forge::{ingest_corpus, load_manifest, write_manifest, DiseaseLabel, ImageRecord, Split, MANIFEST_FILE};
use crate::metrics::{aggregate, GroupKey, PairMetrics};
use crate::raster::Image;

pub const DONE_FILE: &str = "DONE";
pub const CONFIG_FILE: &str = "config.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const BUNDLE_FILE: &str = "bundle.ckpt";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const AGGREGATE_BY_SUBGROUP_FILE: &str = "aggregate_by_subgroup.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVALUATION_FILE: &str = "evaluation.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Forge,
    ClassifierErm,
    ClassifierDro,
    Detector,
    CfErm,
    CfDro,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Forge,
        Stage::ClassifierErm,
        Stage::ClassifierDro,
        Stage::Detector,
        Stage::CfErm,
        Stage::CfDro,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Forge => "forge",
            Stage::ClassifierErm => "classifier_erm",
            Stage::ClassifierDro => "classifier_dro",
            Stage::Detector => "detector",
            Stage::CfErm => "cf_erm",
            Stage::CfDro => "cf_dro",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn for_classifier(method: Method) -> Stage {
        match method {
            Method::Erm => Stage::ClassifierErm,
            Method::Dro => Stage::ClassifierDro,
            Method::Detector => Stage::Detector,
        }
    }

    /// Counterfactual stage supervised by a classifier of `method`.
    pub fn for_counterfactual(method: Method) -> Result<Stage> {
        match method {
            Method::Erm => Ok(Stage::CfErm),
            Method::Dro => Ok(Stage::CfDro),
            Method::Detector => Err(Error::Config("the artifact detector cannot supervise counterfactuals".into())),
        }
    }

    pub fn inputs(self) -> &'static [Stage] {
        match self {
            Stage::Forge => &[],
            Stage::ClassifierErm | Stage::ClassifierDro | Stage::Detector => &[Stage::Forge],
            Stage::CfErm => &[Stage::Forge, Stage::ClassifierErm],
            Stage::CfDro => &[Stage::Forge, Stage::ClassifierDro],
            Stage::Evaluate => &[Stage::Forge, Stage::Detector, Stage::CfErm, Stage::CfDro],
            Stage::Report => &[Stage::Forge, Stage::ClassifierErm, Stage::ClassifierDro, Stage::Evaluate],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Contents of a stage's completion marker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: Stage,
    pub config_hash: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seconds: f64,
    /// True when the stage was skipped because its outputs already existed.
    pub resumed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub deterministic: bool,
    pub stages: Vec<StageRecord>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn missing_artifacts(&self, root: &Path) -> Vec<String> {
        self.artifacts
            .iter()
            .filter(|(_, p)| !root.join(p).exists())
            .map(|(k, p)| format!("{k} ({})", p.display()))
            .collect()
    }
}

/// Per-pair evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub subgroup: crate::forge::Subgroup,
    pub direction: crate::counterfactual::Direction,
    pub f_x: f64,
    pub f_x_cf: f64,
    pub d_x: f64,
    pub d_x_cf: f64,
    pub metrics: PairMetrics,
    pub artifact_region_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub pairs: usize,
    pub flip_rate: f64,
    pub mean_scls: f64,
    pub mean_cpg: f64,
    pub mean_ssim: f64,
    pub mean_actionability: f64,
    /// Mean heatmap share inside the artifact mask over majority_S test pairs.
    pub majority_s_region_mass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub detector_auc: f64,
    pub classifiers: BTreeMap<String, ClassifierSummary>,
}

pub fn pairs_file(method: Method) -> String {
    format!("{}_pairs.json", method.as_str())
}

pub struct Pipeline {
    config: ExperimentConfig,
    root: PathBuf,
    hash: String,
}

fn records_of(records: &[ImageRecord], split: Split) -> Vec<ImageRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl Pipeline {
    /// Opens `root` as the run directory for `config`. A directory already
    /// holding a different configuration is rejected.
    pub fn new(config: ExperimentConfig, root: &Path) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let hash = config.hash();
        let path = root.join(CONFIG_FILE);
        if path.exists() {
            let existing = ExperimentConfig::load(&path)?;
            if existing.hash() != hash {
                return Err(Error::Config(format!(
                    "{} was produced by a different configuration (hash {}); use a fresh output directory",
                    root.display(),
                    existing.hash()
                )));
            }
        } else {
            config.save(&path)?;
        }
        Ok(Self { config, root: root.to_path_buf(), hash })
    }

    /// Opens an existing run directory using its stored configuration.
    pub fn open(root: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(&root.join(CONFIG_FILE))?;
        Self::new(config, root)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.as_str())
    }

    pub fn marker(&self, stage: Stage) -> Option<StageMarker> {
        let path = self.stage_dir(stage).join(DONE_FILE);
        read_json(&path).ok()
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.marker(stage).is_some_and(|m| m.config_hash == self.hash)
    }

    fn require(&self, stage: Stage) -> Result<()> {
        let missing: Vec<String> =
            stage.inputs().iter().filter(|s| !self.is_done(**s)).map(|s| s.as_str().to_string()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingOutputs(missing))
        }
    }

    /// Runs one stage even if it already completed.
    pub fn rerun_stage(&self, stage: Stage) -> Result<StageRecord> {
        self.execute(stage, || self.run_inner(stage))
    }

    /// Runs one stage unless its completion marker is already present.
    pub fn run_stage(&self, stage: Stage) -> Result<StageRecord> {
        if let Some(m) = self.marker(stage).filter(|m| m.config_hash == self.hash) {
            return Ok(StageRecord { stage, seconds: m.seconds, resumed: true });
        }
        self.execute(stage, || self.run_inner(stage))
    }

    fn execute(&self, stage: Stage, work: impl FnOnce() -> Result<()>) -> Result<StageRecord> {
        let wrap = |e: Error| e.in_stage(stage.as_str());
        self.require(stage).map_err(wrap)?;
        let dir = self.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
        }
        fs::create_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
        let start = Instant::now();
        work().map_err(wrap)?;
        let seconds = start.elapsed().as_secs_f64();
        let marker = StageMarker { stage, config_hash: self.hash.clone(), seconds };
        write_json(&dir.join(DONE_FILE), &marker).map_err(wrap)?;
        Ok(StageRecord { stage, seconds, resumed: false })
    }

    fn run_inner(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Forge => self.forge(),
            Stage::ClassifierErm => self.train_classifier(Method::Erm),
            Stage::ClassifierDro => self.train_classifier(Method::Dro),
            Stage::Detector => self.train_classifier(Method::Detector),
            Stage::CfErm => self.train_cf(&self.classifier_path(Method::Erm)),
            Stage::CfDro => self.train_cf(&self.classifier_path(Method::Dro)),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => emit_report(&self.root).map(|_| ()),
        }
    }

    /// Trains a counterfactual bundle against an arbitrary classifier
    /// checkpoint; the stage is chosen from the checkpoint's method.
    pub fn run_counterfactual_with(&self, checkpoint: &Path) -> Result<StageRecord> {
        let f = BinaryClassifier::load(checkpoint).map_err(|e| e.in_stage("train-cf"))?;
        let method = f.method().ok_or_else(|| {
            Error::Config(format!("{} holds an untrained classifier", checkpoint.display())).in_stage("train-cf")
        })?;
        let stage = Stage::for_counterfactual(method).map_err(|e| e.in_stage("train-cf"))?;
        let checkpoint = checkpoint.to_path_buf();
        self.execute(stage, || self.train_cf(&checkpoint))
    }

    pub fn classifier_path(&self, method: Method) -> PathBuf {
        self.stage_dir(Stage::for_classifier(method)).join(MODEL_FILE)
    }

    pub fn bundle_path(&self, method: Method) -> Result<PathBuf> {
        Ok(self.stage_dir(Stage::for_counterfactual(method)?).join(BUNDLE_FILE))
    }

    pub fn load_records(&self) -> Result<Vec<ImageRecord>> {
        load_manifest(&self.stage_dir(Stage::Forge))
    }

    fn forge(&self) -> Result<()> {
        let records = match &self.config.dataset {
            DatasetSource::Synthetic(s) => s.build()?,
            DatasetSource::External(c) => ingest_corpus(c)?,
        };
        write_manifest(&records, &self.stage_dir(Stage::Forge))
    }

    fn train_classifier(&self, method: Method) -> Result<()> {
        let records = self.load_records()?;
        let (train, val, test) =
            (records_of(&records, Split::Train), records_of(&records, Split::Val), records_of(&records, Split::Test));
        let cfg = match method {
            Method::Erm => &self.config.erm,
            Method::Dro => &self.config.dro,
            Method::Detector => &self.config.detector,
        };
        let model = match method {
            Method::Erm => train_erm(&train, &val, cfg)?,
            Method::Dro => train_group_dro(&train, &val, cfg)?,
            Method::Detector => train_artifact_detector(&train, &val, cfg)?,
        };
        model.save(&self.classifier_path(method))?;
        let dir = self.stage_dir(Stage::for_classifier(method));
        if let Some(s) = model.summary() {
            write_json(&dir.join("training.json"), s)?;
        }
        if method == Method::Detector {
            let auc = detector_auc(&model, &test)?;
            write_json(&dir.join(EVALUATION_FILE), &serde_json::json!({ "auc": auc }))
        } else {
            write_json(&dir.join(EVALUATION_FILE), &evaluate_by_subgroup(&model, &test)?)
        }
    }

    fn train_cf(&self, classifier: &Path) -> Result<()> {
        let f = BinaryClassifier::load(classifier)?;
        let method = f.method().ok_or_else(|| Error::Config("classifier is untrained".into()))?;
        let stage = Stage::for_counterfactual(method)?;
        let records = self.load_records()?;
        let train = records_of(&records, Split::Train);
        let domain = |label| train.iter().filter(|r| r.disease_label == label).map(|r| &r.image).collect::<Vec<_>>();
        let (healthy, sick) = (domain(DiseaseLabel::Healthy), domain(DiseaseLabel::Sick));
        let dir = self.stage_dir(stage);
        let bundle = train_counterfactual_gan(&healthy, &sick, &f, &self.config.gan, Some(&dir.join("epochs")))?;
        bundle.save(&dir.join(BUNDLE_FILE))?;
        write_json(&dir.join("history.json"), &bundle.history)
    }

    fn evaluate(&self) -> Result<()> {
        let records = self.load_records()?;
        let test = records_of(&records, Split::Test);
        if test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dir = self.stage_dir(Stage::Evaluate);
        let detector = BinaryClassifier::load(&self.classifier_path(Method::Detector))?;
        let images: Vec<&Image> = test.iter().map(|r| &r.image).collect();
        let d_x = detector.predict_proba(&images)?;
        let mask = self.config.dataset.artifact().mask(self.config.dataset.side())?;
        let dataset = self.config.dataset.name().to_string();

        let mut keyed: Vec<(GroupKey, PairMetrics)> = Vec::new();
        let mut summary = EvaluationSummary { detector_auc: detector_auc(&detector, &test)?, classifiers: BTreeMap::new() };
        for method in [Method::Erm, Method::Dro] {
            let name = method.as_str().to_string();
            let f = BinaryClassifier::load(&self.classifier_path(method))?;
            let bundle = CounterfactualBundle::load(&self.bundle_path(method)?, &f)?;
            let pairs = generate_counterfactuals(&bundle, &images)?;
            let cfs: Vec<&Image> = pairs.iter().map(|p| &p.counterfactual).collect();
            let d_cf = detector.predict_proba(&cfs)?;
            let pair_dir = dir.join("counterfactuals").join(&name);
            let mut rows = Vec::with_capacity(pairs.len());
            for (i, (r, p)) in test.iter().zip(&pairs).enumerate() {
                write_pair(&pair_dir, &r.id, p, Some((d_x[i], d_cf[i])))?;
                let metrics = PairMetrics::compute(&p.factual, &p.counterfactual, (p.f_x, p.f_x_cf), (d_x[i], d_cf[i]))?;
                let artifact_region_mass = region_mass(&difference_heatmap(p), &mask)?;
                rows.push(PairRecord {
                    id: r.id.clone(),
                    subgroup: r.subgroup(),
                    direction: p.direction,
                    f_x: p.f_x,
                    f_x_cf: p.f_x_cf,
                    d_x: d_x[i],
                    d_x_cf: d_cf[i],
                    metrics,
                    artifact_region_mass,
                });
            }
            let maj: Vec<f64> = rows
                .iter()
                .filter(|r| r.subgroup == crate::forge::Subgroup::MajorityS)
                .map(|r| r.artifact_region_mass)
                .collect();
            summary.classifiers.insert(
                name.clone(),
                ClassifierSummary {
                    pairs: rows.len(),
                    flip_rate: mean(rows.iter().map(|r| (f.decide(r.f_x) != f.decide(r.f_x_cf)) as u8 as f64)),
                    mean_scls: mean(rows.iter().map(|r| r.metrics.scls)),
                    mean_cpg: mean(rows.iter().map(|r| r.metrics.cpg)),
                    mean_ssim: mean(rows.iter().map(|r| r.metrics.ssim)),
                    mean_actionability: mean(rows.iter().map(|r| r.metrics.actionability)),
                    majority_s_region_mass: (!maj.is_empty()).then(|| mean(maj.into_iter())),
                },
            );
            for r in &rows {
                let overall = GroupKey { classifier: name.clone(), dataset: dataset.clone(), subgroup: None };
                let by_group = GroupKey { subgroup: Some(r.subgroup.as_str().to_string()), ..overall.clone() };
                keyed.push((overall, r.metrics.clone()));
                keyed.push((by_group, r.metrics.clone()));
            }
            write_json(&dir.join(pairs_file(method)), &rows)?;
        }
        let overall = aggregate(keyed.iter().filter(|(k, _)| k.subgroup.is_none()).map(|(k, m)| (k, m)));
        let by_group = aggregate(keyed.iter().filter(|(k, _)| k.subgroup.is_some()).map(|(k, m)| (k, m)));
        overall.write_csv(&dir.join(AGGREGATE_FILE))?;
        by_group.write_csv(&dir.join(AGGREGATE_BY_SUBGROUP_FILE))?;
        write_json(&dir.join(SUMMARY_FILE), &summary)
    }

    fn artifacts(&self) -> BTreeMap<String, PathBuf> {
        let rel = |stage: Stage, file: &str| PathBuf::from(stage.as_str()).join(file);
        let mut a = BTreeMap::new();
        a.insert("manifest".into(), rel(Stage::Forge, MANIFEST_FILE));
        a.insert("classifier_erm".into(), rel(Stage::ClassifierErm, MODEL_FILE));
        a.insert("classifier_dro".into(), rel(Stage::ClassifierDro, MODEL_FILE));
        a.insert("detector".into(), rel(Stage::Detector, MODEL_FILE));
        a.insert("bundle_erm".into(), rel(Stage::CfErm, BUNDLE_FILE));
        a.insert("bundle_dro".into(), rel(Stage::CfDro, BUNDLE_FILE));
        a.insert("aggregate".into(), rel(Stage::Evaluate, AGGREGATE_FILE));
        a.insert("aggregate_by_subgroup".into(), rel(Stage::Evaluate, AGGREGATE_BY_SUBGROUP_FILE));
        a.insert("evaluation_summary".into(), rel(Stage::Evaluate, SUMMARY_FILE));
        for (k, v) in super::report::report_files() {
            a.insert(format!("report_{k}"), rel(Stage::Report, v));
        }
        a
    }

    fn write_manifest(&self, stages: Vec<StageRecord>) -> Result<RunManifest> {
        let manifest = RunManifest {
            version: VERSION.to_string(),
            config_hash: self.hash.clone(),
            deterministic: self.config.deterministic,
            stages,
            artifacts: self.artifacts(),
        };
        write_json(&self.root.join(RUN_MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    /// Runs every stage in order, resuming completed ones.
    pub fn run_all(&self) -> Result<RunManifest> {
        let mut records = Vec::new();
        for stage in Stage::ALL {
            records.push(self.run_stage(stage)?);
        }
        let manifest = self.write_manifest(records)?;
        let missing = manifest.missing_artifacts(&self.root);
        if !missing.is_empty() {
            return Err(Error::MissingOutputs(missing).in_stage("run-all"));
        }
        Ok(manifest)
    }
}

/// Runs the full pipeline for `config` in `root`.
pub fn run_pipeline(config: &ExperimentConfig, root: &Path) -> Result<RunManifest> {
    Pipeline::new(config.clone(), root)?.run_all()
}
