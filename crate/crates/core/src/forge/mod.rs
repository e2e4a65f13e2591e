//! Datasets with a controllable spurious correlation: four subgroups formed
//! by crossing the disease label with the presence of an injected artifact.

mod ingest;
mod manifest;
mod scene;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

pub use ingest::{ingest_corpus, ExternalCorpus};
pub use manifest::{load_manifest, write_manifest, MANIFEST_FILE, MANIFEST_HEADER};
pub use scene::{synthesize_base_image, BackgroundSpec, DiseaseMarkerSpec, MarkerKind, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiseaseLabel {
    Healthy,
    Sick,
}

impl DiseaseLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            DiseaseLabel::Healthy => "healthy",
            DiseaseLabel::Sick => "sick",
        }
    }

    /// Binary target: sick = 1.
    pub fn target(self) -> f32 {
        match self {
            DiseaseLabel::Healthy => 0.0,
            DiseaseLabel::Sick => 1.0,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            DiseaseLabel::Healthy => DiseaseLabel::Sick,
            DiseaseLabel::Sick => DiseaseLabel::Healthy,
        }
    }
}

impl FromStr for DiseaseLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "healthy" | "0" => Ok(DiseaseLabel::Healthy),
            "sick" | "1" => Ok(DiseaseLabel::Sick),
            other => Err(format!("unknown disease label `{other}`")),
        }
    }
}

/// The four cells of the disease × artifact table, in the column order used
/// by the reported subgroup counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subgroup {
    #[serde(rename = "majority_S")]
    MajorityS,
    #[serde(rename = "minority_S")]
    MinorityS,
    #[serde(rename = "minority_H")]
    MinorityH,
    #[serde(rename = "majority_H")]
    MajorityH,
}

impl Subgroup {
    pub const ALL: [Subgroup; 4] =
        [Subgroup::MajorityS, Subgroup::MinorityS, Subgroup::MinorityH, Subgroup::MajorityH];

    pub fn of(label: DiseaseLabel, artifact_present: bool) -> Self {
        match (label, artifact_present) {
            (DiseaseLabel::Sick, true) => Subgroup::MajorityS,
            (DiseaseLabel::Sick, false) => Subgroup::MinorityS,
            (DiseaseLabel::Healthy, true) => Subgroup::MinorityH,
            (DiseaseLabel::Healthy, false) => Subgroup::MajorityH,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> DiseaseLabel {
        match self {
            Subgroup::MajorityS | Subgroup::MinorityS => DiseaseLabel::Sick,
            Subgroup::MinorityH | Subgroup::MajorityH => DiseaseLabel::Healthy,
        }
    }

    pub fn has_artifact(self) -> bool {
        matches!(self, Subgroup::MajorityS | Subgroup::MinorityH)
    }

    pub fn is_majority(self) -> bool {
        matches!(self, Subgroup::MajorityS | Subgroup::MajorityH)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subgroup::MajorityS => "majority_S",
            Subgroup::MinorityS => "minority_S",
            Subgroup::MinorityH => "minority_H",
            Subgroup::MajorityH => "majority_H",
        }
    }
}

impl fmt::Display for Subgroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subgroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Subgroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown subgroup `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

/// One grayscale image with its labels. The subgroup is derived from
/// `(disease_label, artifact_present)` and therefore cannot disagree with them.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub image: Image,
    pub disease_label: DiseaseLabel,
    pub artifact_present: bool,
    pub split: Split,
}

impl ImageRecord {
    pub fn subgroup(&self) -> Subgroup {
        Subgroup::of(self.disease_label, self.artifact_present)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactShape {
    #[default]
    Disk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    #[serde(default)]
    pub shape: ArtifactShape,
    pub radius: u32,
    /// `(row, col)`; the image centre when absent.
    #[serde(default)]
    pub center: Option<(usize, usize)>,
    #[serde(default)]
    pub intensity: f32,
    /// Treat radius 0 as "no artifact" instead of painting the centre pixel.
    #[serde(default)]
    pub zero_radius_noop: bool,
}

impl ArtifactSpec {
    pub fn disk(radius: u32) -> Self {
        Self { shape: ArtifactShape::Disk, radius, center: None, intensity: 0.0, zero_radius_noop: false }
    }

    pub fn center_for(&self, side: usize) -> (usize, usize) {
        self.center.unwrap_or((side / 2, side / 2))
    }

    pub fn check_bounds(&self, side: usize) -> Result<()> {
        let (cy, cx) = self.center_for(side);
        let r = self.radius as usize;
        if cy < r || cx < r || cy + r >= side || cx + r >= side {
            return Err(Error::Bounds(format!(
                "disk of radius {r} at ({cy}, {cx}) does not fit a {side}x{side} image"
            )));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::Bounds(format!("artifact intensity {} outside [0, 1]", self.intensity)));
        }
        Ok(())
    }

    fn is_noop(&self) -> bool {
        self.radius == 0 && self.zero_radius_noop
    }

    /// Pixels painted by [`inject_artifact`], row-major.
    pub fn mask(&self, side: usize) -> Result<Vec<bool>> {
        self.check_bounds(side)?;
        let (cy, cx) = self.center_for(side);
        let r2 = (self.radius as i64).pow(2);
        let noop = self.is_noop();
        Ok((0..side * side)
            .map(|i| {
                let (dy, dx) = ((i / side) as i64 - cy as i64, (i % side) as i64 - cx as i64);
                !noop && dy * dy + dx * dx <= r2
            })
            .collect())
    }
}

/// Paints every pixel within Euclidean distance `radius` of the centre with
/// the artifact intensity; all other pixels are copied unchanged.
pub fn inject_artifact(image: &Image, spec: &ArtifactSpec) -> Result<Image> {
    let mask = spec.mask(image.side())?;
    let mut out = image.clone();
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        out.set(i / image.side(), i % image.side(), spec.intensity);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PlanMode {
    /// Exact subgroup sizes, in `[majority_S, minority_S, minority_H, majority_H]` order.
    Counts { counts: [usize; 4] },
    /// Artifact prevalence within each class plus class totals.
    Prevalence {
        p_artifact_given_sick: f64,
        p_artifact_given_healthy: f64,
        n_sick: usize,
        n_healthy: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupPlan {
    #[serde(flatten)]
    pub mode: PlanMode,
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

impl SubgroupPlan {
    pub fn counts(counts: [usize; 4], seed: u64) -> Self {
        Self { mode: PlanMode::Counts { counts }, split_fractions: default_fractions(), seed }
    }

    pub fn prevalence(p_sick: f64, p_healthy: f64, n_sick: usize, n_healthy: usize, seed: u64) -> Self {
        Self {
            mode: PlanMode::Prevalence {
                p_artifact_given_sick: p_sick,
                p_artifact_given_healthy: p_healthy,
                n_sick,
                n_healthy,
            },
            split_fractions: default_fractions(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_fractions(&self.split_fractions)?;
        if let PlanMode::Prevalence { p_artifact_given_sick: ps, p_artifact_given_healthy: ph, .. } = self.mode {
            for p in [ps, ph] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Plan(format!("prevalence {p} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// `(n_sick, n_healthy)` implied by the plan.
    pub fn class_totals(&self) -> (usize, usize) {
        match self.mode {
            PlanMode::Counts { counts } => (counts[0] + counts[1], counts[2] + counts[3]),
            PlanMode::Prevalence { n_sick, n_healthy, .. } => (n_sick, n_healthy),
        }
    }

    /// Number of artifact-bearing images per class, `(sick, healthy)`, for the
    /// given class sizes. Prevalence mode rounds half to even.
    pub fn artifact_counts(&self, n_sick: usize, n_healthy: usize) -> Result<(usize, usize)> {
        match self.mode {
            PlanMode::Counts { counts } => {
                let [maj_s, min_s, min_h, maj_h] = counts;
                for (label, planned, available) in
                    [("sick", maj_s + min_s, n_sick), ("healthy", min_h + maj_h, n_healthy)]
                {
                    if planned > available {
                        return Err(Error::Plan(format!(
                            "plan needs {planned} {label} images but only {available} are available"
                        )));
                    }
                    if planned < available {
                        return Err(Error::Plan(format!(
                            "plan covers {planned} {label} images but {available} were given"
                        )));
                    }
                }
                Ok((maj_s, min_h))
            }
            PlanMode::Prevalence { p_artifact_given_sick, p_artifact_given_healthy, .. } => Ok((
                (p_artifact_given_sick * n_sick as f64).round_ties_even() as usize,
                (p_artifact_given_healthy * n_healthy as f64).round_ties_even() as usize,
            )),
        }
    }
}

pub fn validate_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Plan(format!("split fractions must be non-negative, got {f:?}")));
    }
    if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Plan(format!("split fractions {f:?} do not sum to 1")));
    }
    Ok(())
}

/// Decides which images carry the artifact. Within each class the chosen
/// images are a uniformly random subset of the planned size.
pub fn assign_subgroups(
    labels: &[DiseaseLabel],
    plan: &SubgroupPlan,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(bool, Subgroup)>> {
    plan.validate()?;
    let sick: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == DiseaseLabel::Sick).collect();
    let healthy: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == DiseaseLabel::Healthy).collect();
    let (k_sick, k_healthy) = plan.artifact_counts(sick.len(), healthy.len())?;
    let mut artifact = vec![false; labels.len()];
    for (mut members, k) in [(sick, k_sick), (healthy, k_healthy)] {
        members.shuffle(rng);
        for &i in members.iter().take(k) {
            artifact[i] = true;
        }
    }
    Ok(labels.iter().zip(artifact).map(|(&l, a)| (a, Subgroup::of(l, a))).collect())
}

/// Largest-remainder apportionment of `n` items over the split fractions.
/// Every split with a positive fraction receives at least one item when
/// `n >= 3`.
pub fn split_sizes(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = quotas[i].floor() as usize;
    }
    // larger remainder first; remainders equal up to rounding noise go to the earlier split
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        if (ra - rb).abs() <= 1e-9 {
            a.cmp(&b)
        } else {
            rb.partial_cmp(&ra).unwrap()
        }
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    if n >= 3 {
        for i in 0..3 {
            if fractions[i] > 0.0 && sizes[i] == 0 {
                let donor = (0..3)
                    .filter(|&j| sizes[j] >= 2)
                    .max_by(|&a, &b| {
                        let (sa, sb) = (sizes[a] as f64 - quotas[a], sizes[b] as f64 - quotas[b]);
                        sa.partial_cmp(&sb).unwrap().then(b.cmp(&a))
                    })
                    .expect("n >= 3 leaves a split with two items");
                sizes[donor] -= 1;
                sizes[i] = 1;
            }
        }
    }
    sizes
}

/// Stratified random split: each subgroup is shuffled and apportioned
/// separately so every subgroup is represented in every split.
pub fn split_dataset(mut records: Vec<ImageRecord>, fractions: &[f64; 3], seed: u64) -> Result<Vec<ImageRecord>> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    validate_fractions(fractions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for group in Subgroup::ALL {
        let mut members: Vec<usize> = (0..records.len()).filter(|&i| records[i].subgroup() == group).collect();
        members.shuffle(&mut rng);
        let [n_train, n_val, _] = split_sizes(members.len(), fractions);
        for (rank, &i) in members.iter().enumerate() {
            records[i].split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(records)
}

/// Mixes a base seed with an index into an independent per-item seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub scene: SceneSpec,
    pub artifact: ArtifactSpec,
    pub plan: SubgroupPlan,
}

impl SyntheticDataset {
    /// Desk-scale default: 64×64 images, 1500 per class, artifact prevalence
    /// 0.9 among sick and 0.1 among healthy images, radius-3 centre dot.
    pub fn desk(seed: u64) -> Self {
        Self {
            scene: SceneSpec::desk(64),
            artifact: ArtifactSpec::disk(3),
            plan: SubgroupPlan::prevalence(0.9, 0.1, 1500, 1500, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.artifact.check_bounds(self.scene.side)?;
        self.scene.validate()?;
        if !self.scene.marker.clear_of(self.scene.side, &self.artifact) {
            return Err(Error::Config("disease marker region overlaps the artifact region".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Vec<ImageRecord>> {
        self.validate()?;
        let (n_sick, n_healthy) = self.plan.class_totals();
        let labels: Vec<DiseaseLabel> = std::iter::repeat_n(DiseaseLabel::Sick, n_sick)
            .chain(std::iter::repeat_n(DiseaseLabel::Healthy, n_healthy))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.plan.seed, u64::MAX));
        let groups = assign_subgroups(&labels, &self.plan, &mut rng)?;
        let records = labels
            .iter()
            .zip(groups)
            .enumerate()
            .map(|(i, (&label, (artifact, _)))| {
                let mut img_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.plan.seed, i as u64));
                let base = synthesize_base_image(&mut img_rng, label, &self.scene);
                let image = if artifact { inject_artifact(&base, &self.artifact)? } else { base };
                Ok(ImageRecord {
                    id: format!("img{i:05}"),
                    image,
                    disease_label: label,
                    artifact_present: artifact,
                    split: Split::Train,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        split_dataset(records, &self.plan.split_fractions, self.plan.seed)
    }
}
