//! Artifact injection for external corpora: any directory of PNGs plus a
//! labels CSV with header `file,disease_label`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assign_subgroups, derive_seed, inject_artifact, split_dataset, ArtifactSpec, DiseaseLabel, ImageRecord, Split, SubgroupPlan};
use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalCorpus {
    pub images_dir: PathBuf,
    pub labels_csv: PathBuf,
    /// Images are resampled to this side length.
    pub side: usize,
    pub artifact: ArtifactSpec,
    pub plan: SubgroupPlan,
}

#[derive(Deserialize)]
struct LabelRow {
    file: String,
    disease_label: String,
}

pub fn ingest_corpus(corpus: &ExternalCorpus) -> Result<Vec<ImageRecord>> {
    corpus.artifact.check_bounds(corpus.side)?;
    let text = fs::read_to_string(&corpus.labels_csv).map_err(|e| Error::io(&corpus.labels_csv, e))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut entries = Vec::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row?;
        let label: DiseaseLabel = row
            .disease_label
            .parse()
            .map_err(|e: String| Error::Config(format!("{}: {e}", row.file)))?;
        entries.push((row.file, label));
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut images = Vec::with_capacity(entries.len());
    let mut failed = Vec::new();
    for (file, _) in &entries {
        match Image::load_png(&corpus.images_dir.join(file)) {
            Ok(img) => images.push(img.resized(corpus.side)),
            Err(e) => failed.push((file.clone(), e.to_string())),
        }
    }
    if !failed.is_empty() {
        return Err(Error::Load {
            ids: failed.iter().map(|(f, _)| f.clone()).collect(),
            detail: failed.iter().map(|(f, e)| format!("{f}: {e}")).collect::<Vec<_>>().join("; "),
        });
    }
    let labels: Vec<DiseaseLabel> = entries.iter().map(|(_, l)| *l).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(corpus.plan.seed, u64::MAX));
    let groups = assign_subgroups(&labels, &corpus.plan, &mut rng)?;
    let records = entries
        .into_iter()
        .zip(images)
        .zip(groups)
        .map(|(((file, label), img), (artifact, _))| {
            let image = if artifact { inject_artifact(&img, &corpus.artifact)? } else { img };
            Ok(ImageRecord {
                id: stem(&file),
                image,
                disease_label: label,
                artifact_present: artifact,
                split: Split::Train,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    split_dataset(records, &corpus.plan.split_fractions, corpus.plan.seed)
}

fn stem(file: &str) -> String {
    Path::new(file)
        .file_stem()
        .map(|s| s.to_string_lossy().replace(|c: char| !c.is_ascii_alphanumeric() && c != '_' && c != '-', "_"))
        .unwrap_or_else(|| file.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::Subgroup;

    #[test]
    fn ingests_directory_and_injects_per_plan() {
        let dir = tempfile::tempdir().unwrap();
        let mut csv = String::from("file,disease_label\n");
        for i in 0..20 {
            let img = Image::filled(40, 0.7);
            img.save_png(&dir.path().join(format!("x{i}.png"))).unwrap();
            csv.push_str(&format!("x{i}.png,{}\n", if i < 10 { "sick" } else { "healthy" }));
        }
        fs::write(dir.path().join("labels.csv"), csv).unwrap();
        let corpus = ExternalCorpus {
            images_dir: dir.path().to_path_buf(),
            labels_csv: dir.path().join("labels.csv"),
            side: 32,
            artifact: ArtifactSpec::disk(3),
            plan: SubgroupPlan::counts([9, 1, 2, 8], 7),
        };
        let records = ingest_corpus(&corpus).unwrap();
        assert_eq!(records.len(), 20);
        assert_eq!(records.iter().filter(|r| r.subgroup() == Subgroup::MinorityH).count(), 2);
        for r in &records {
            assert_eq!(r.image.side(), 32);
            assert_eq!(r.image.get(16, 16) == 0.0, r.artifact_present);
        }
    }

    #[test]
    fn missing_files_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("labels.csv"), "file,disease_label\nnope.png,sick\n").unwrap();
        let corpus = ExternalCorpus {
            images_dir: dir.path().to_path_buf(),
            labels_csv: dir.path().join("labels.csv"),
            side: 32,
            artifact: ArtifactSpec::disk(3),
            plan: SubgroupPlan::counts([1, 0, 0, 0], 0),
        };
        let err = ingest_corpus(&corpus).unwrap_err();
        assert!(err.to_string().contains("nope.png"));
    }
}
