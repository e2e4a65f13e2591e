use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::TrainConfig;
use crate::counterfactual::GanConfig;
use crate::error::{Error, Result};
use crate::forge::{derive_seed, ArtifactSpec, ExternalCorpus, SyntheticDataset};
use crate::nn::{ClassifierArch, CriticArch, GeneratorArch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticDataset),
    External(ExternalCorpus),
}

impl DatasetSource {
    pub fn side(&self) -> usize {
        match self {
            DatasetSource::Synthetic(s) => s.scene.side,
            DatasetSource::External(c) => c.side,
        }
    }

    pub fn artifact(&self) -> &ArtifactSpec {
        match self {
            DatasetSource::Synthetic(s) => &s.artifact,
            DatasetSource::External(c) => &c.artifact,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetSource::Synthetic(_) => "synthetic",
            DatasetSource::External(_) => "external",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Cases drawn from each of majority_S and minority_H for the panels.
    pub panel_cases: usize,
    pub panel_seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { panel_cases: 4, panel_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub erm: TrainConfig,
    pub dro: TrainConfig,
    pub detector: TrainConfig,
    pub gan: GanConfig,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub report: ReportConfig,
}

impl ExperimentConfig {
    /// 64×64 synthetic data, ~2000/300/600 split, full training budgets.
    pub fn desk(seed: u64) -> Self {
        let side = 64;
        let base = TrainConfig::desk(side, 0);
        let mut cfg = Self {
            name: "desk".into(),
            seed,
            dataset: DatasetSource::Synthetic(SyntheticDataset::desk(0)),
            erm: base.clone(),
            dro: base.clone(),
            detector: TrainConfig { epochs: 3, ..base },
            gan: GanConfig::desk(side, 0),
            deterministic: false,
            output_dir: None,
            report: ReportConfig::default(),
        };
        cfg.set_seed(seed);
        cfg
    }

    /// Tiny 16×16 run that exercises every stage in seconds.
    pub fn smoke(seed: u64) -> Self {
        let side = 16;
        let mut data = SyntheticDataset::desk(0);
        data.scene = crate::forge::SceneSpec::desk(side);
        data.artifact = ArtifactSpec::disk(1);
        data.plan = crate::forge::SubgroupPlan::prevalence(0.9, 0.1, 60, 60, 0);
        let clf = TrainConfig {
            arch: ClassifierArch::Cnn { side, widths: vec![4, 8], pooling: Default::default() },
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::desk(side, 0)
        };
        let gan = GanConfig {
            generator: GeneratorArch { base_width: 4, depth: 2, ..GeneratorArch::desk(side) },
            critic: CriticArch { side, widths: vec![4, 8] },
            epochs: 1,
            steps_per_epoch: 2,
            batch_size: 4,
            probe_size: 8,
            ..GanConfig::desk(side, 0)
        };
        let mut cfg = Self {
            name: "smoke".into(),
            seed,
            dataset: DatasetSource::Synthetic(data),
            erm: clf.clone(),
            dro: clf.clone(),
            detector: clf,
            gan,
            deterministic: false,
            output_dir: None,
            report: ReportConfig { panel_cases: 2, panel_seed: 0 },
        };
        cfg.set_seed(seed);
        cfg
    }

    /// Sets the experiment seed and derives every per-stage seed from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        match &mut self.dataset {
            DatasetSource::Synthetic(s) => s.plan.seed = seed,
            DatasetSource::External(c) => c.plan.seed = seed,
        }
        self.erm.seed = derive_seed(seed, 1);
        self.dro.seed = derive_seed(seed, 2);
        self.detector.seed = derive_seed(seed, 3);
        self.gan.seed = derive_seed(seed, 4);
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => s.validate()?,
            DatasetSource::External(c) => {
                for p in [&c.images_dir, &c.labels_csv] {
                    if !p.exists() {
                        return Err(Error::Config(format!("path does not exist: {}", p.display())));
                    }
                }
                c.plan.validate()?;
                c.artifact.check_bounds(c.side)?;
            }
        }
        let side = self.dataset.side();
        for (name, t) in [("erm", &self.erm), ("dro", &self.dro), ("detector", &self.detector)] {
            t.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
            if t.arch.side() != side {
                return Err(Error::Config(format!("{name} classifier side {} != image side {side}", t.arch.side())));
            }
        }
        self.gan.validate()?;
        if self.gan.generator.side != side {
            return Err(Error::Config(format!("GAN side {} != image side {side}", self.gan.generator.side)));
        }
        if self.report.panel_cases == 0 {
            return Err(Error::Config("report.panel_cases must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs are written.
    pub fn hash(&self) -> String {
        let canonical = Self { output_dir: None, ..self.clone() };
        let bytes = serde_json::to_vec(&canonical).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }
}
