use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DiseaseLabel, ImageRecord, Split, Subgroup};
use crate::error::{Error, Result};
use crate::raster::Image;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "id,path,disease_label,artifact_present,subgroup,split";

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    path: String,
    disease_label: DiseaseLabel,
    artifact_present: bool,
    subgroup: Subgroup,
    split: Split,
}

/// Writes `manifest.csv` plus one 8-bit grayscale PNG per record under
/// `images/`.
pub fn write_manifest(records: &[ImageRecord], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let path = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for r in records {
        let rel = format!("images/{}.png", r.id);
        r.image.save_png(&dir.join(&rel))?;
        w.serialize(Row {
            id: r.id.clone(),
            path: rel,
            disease_label: r.disease_label,
            artifact_present: r.artifact_present,
            subgroup: r.subgroup(),
            split: r.split,
        })?;
    }
    if records.is_empty() {
        w.write_record(MANIFEST_HEADER.split(','))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Loads every record listed in the manifest. All unreadable images are
/// collected and reported together.
pub fn load_manifest(dir: &Path) -> Result<Vec<ImageRecord>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header = text.lines().next().unwrap_or_default();
    if header.trim_end() != MANIFEST_HEADER {
        return Err(Error::Config(format!(
            "{}: header `{header}` differs from `{MANIFEST_HEADER}`",
            path.display()
        )));
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut records = Vec::new();
    let mut failed = Vec::new();
    let mut details = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row?;
        if Subgroup::of(row.disease_label, row.artifact_present) != row.subgroup {
            failed.push(row.id.clone());
            details.push(format!("{}: subgroup {} contradicts its labels", row.id, row.subgroup));
            continue;
        }
        match Image::load_png(&dir.join(&row.path)) {
            Ok(image) => records.push(ImageRecord {
                id: row.id,
                image,
                disease_label: row.disease_label,
                artifact_present: row.artifact_present,
                split: row.split,
            }),
            Err(e) => {
                details.push(format!("{}: {e}", row.id));
                failed.push(row.id);
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::Load { ids: failed, detail: details.join("; ") });
    }
    Ok(records)
}
