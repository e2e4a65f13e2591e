use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::ExperimentConfig;
use super::pipeline::{pairs_file, PairRecord, Stage, CONFIG_FILE, EVALUATION_FILE, SUMMARY_FILE};
use super::{read_json, write_json, VERSION};
use crate::classifier::{Method, SubgroupPerformance};
use crate::error::{Error, Result};
use crate::forge::Subgroup;
use crate::metrics::{
    aggregate, mean_std, AggregateReport, GroupKey, ACTIONABILITY_DEFINITION, CPG_DEFINITION, SCLS_DEFINITION,
    SSIM_DEFINITION,
};

pub const TABLE_FILE: &str = "table.csv";
pub const SUBGROUP_CSV_FILE: &str = "subgroup_performance.csv";
pub const SUBGROUP_CHART_FILE: &str = "subgroup_performance.png";
pub const PANELS_DIR: &str = "panels";
pub const PANEL_GRID_FILE: &str = "panel_grid.png";
pub const SCLS_GAP_FILE: &str = "scls_gap.txt";
pub const PROVENANCE_FILE: &str = "provenance.json";

pub const HEATMAP_DEFINITION: &str = "per-pixel |x - x_cf| divided by its maximum; all zeros when x_cf = x";
pub const REGION_MASS_DEFINITION: &str = "heatmap sum inside the artifact mask / heatmap sum over the image; 0 when empty";

pub const PANEL_COLUMNS: [&str; 5] = ["factual", "erm_cf", "erm_heatmap", "dro_cf", "dro_heatmap"];

const METHODS: [Method; 2] = [Method::Erm, Method::Dro];

pub(crate) fn report_files() -> Vec<(&'static str, &'static str)> {
    vec![
        ("table", TABLE_FILE),
        ("subgroup_csv", SUBGROUP_CSV_FILE),
        ("subgroup_chart", SUBGROUP_CHART_FILE),
        ("panels", PANELS_DIR),
        ("panel_grid", PANEL_GRID_FILE),
        ("scls_gap", SCLS_GAP_FILE),
        ("provenance", PROVENANCE_FILE),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SclsGap {
    pub erm_mean: f64,
    pub erm_std: f64,
    pub dro_mean: f64,
    pub dro_std: f64,
    pub pairs: usize,
    pub gap: f64,
}

impl SclsGap {
    pub fn line(&self) -> String {
        format!(
            "SCLS gap (ERM - DRO): {:.4} | ERM {:.4} +/- {:.4} | DRO {:.4} +/- {:.4} | pairs {}",
            self.gap, self.erm_mean, self.erm_std, self.dro_mean, self.dro_std, self.pairs
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutputs {
    pub dir: PathBuf,
    pub table: AggregateReport,
    pub scls_gap: SclsGap,
    pub panel_files: Vec<PathBuf>,
}

fn required_inputs(root: &Path) -> Vec<PathBuf> {
    let eval = root.join(Stage::Evaluate.as_str());
    let mut paths = vec![root.join(CONFIG_FILE), eval.join(SUMMARY_FILE)];
    for m in METHODS {
        paths.push(eval.join(pairs_file(m)));
        paths.push(root.join(Stage::for_classifier(m).as_str()).join(EVALUATION_FILE));
        paths.push(eval.join("counterfactuals").join(m.as_str()));
    }
    paths
}

fn pair_png(root: &Path, method: Method, id: &str, kind: &str) -> PathBuf {
    root.join(Stage::Evaluate.as_str()).join("counterfactuals").join(method.as_str()).join(format!("{id}_{kind}.png"))
}

/// Picks up to `n` ids per panel subgroup with a seeded draw, in id order.
pub fn sample_panel_cases(pairs: &[PairRecord], n: usize, seed: u64) -> Vec<(Subgroup, String)> {
    let mut out = Vec::new();
    for (k, group) in [Subgroup::MajorityS, Subgroup::MinorityH].into_iter().enumerate() {
        let mut ids: Vec<&str> = pairs.iter().filter(|p| p.subgroup == group).map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::forge::derive_seed(seed, k as u64));
        let mut pick = rand::seq::index::sample(&mut rng, ids.len(), n.min(ids.len())).into_vec();
        pick.sort_unstable();
        out.extend(pick.into_iter().map(|i| (group, ids[i].to_string())));
    }
    out
}

fn subgroup_csv(perf: &[(Method, SubgroupPerformance)]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("classifier,subgroup,support,accuracy,precision,recall,f1\n");
    for (m, p) in perf {
        for g in Subgroup::ALL {
            match p.subgroups.get(&g).and_then(|x| x.as_ref()) {
                Some(gm) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{}",
                        m.as_str(),
                        g.as_str(),
                        gm.support,
                        gm.accuracy,
                        opt(gm.precision),
                        opt(gm.recall),
                        opt(gm.f1)
                    );
                }
                None => {
                    let _ = writeln!(s, "{},{},0,,,,", m.as_str(), g.as_str());
                }
            }
        }
    }
    s
}

/// Grouped bar chart: one group per subgroup, ERM bar then DRO bar, height
/// proportional to accuracy, with gridlines at 0.25 steps.
fn bar_chart(perf: &[(Method, SubgroupPerformance)]) -> RgbImage {
    let (w, h, margin) = (360u32, 200u32, 20u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let plot_h = h - 2 * margin;
    for q in 0..=4 {
        let y = h - margin - plot_h * q / 4;
        for x in margin..w - margin {
            img.put_pixel(x, y, Rgb([210, 210, 210]));
        }
    }
    let colors = [Rgb([230, 120, 40]), Rgb([50, 110, 200])];
    let group_w = (w - 2 * margin) / Subgroup::ALL.len() as u32;
    let bar_w = group_w / 3;
    for (gi, g) in Subgroup::ALL.into_iter().enumerate() {
        for (mi, (_, p)) in perf.iter().enumerate() {
            let acc = p.accuracy(g).unwrap_or(0.0).clamp(0.0, 1.0);
            let bar_h = (acc * plot_h as f64).round() as u32;
            let x0 = margin + gi as u32 * group_w + bar_w / 2 + mi as u32 * bar_w;
            for x in x0..x0 + bar_w - 2 {
                for y in (h - margin - bar_h)..(h - margin) {
                    img.put_pixel(x, y, colors[mi % colors.len()]);
                }
            }
        }
    }
    for x in margin..w - margin {
        img.put_pixel(x, h - margin, Rgb([0, 0, 0]));
    }
    for y in margin..=h - margin {
        img.put_pixel(margin, y, Rgb([0, 0, 0]));
    }
    img
}

fn panel_grid(rows: &[Vec<GrayImage>]) -> GrayImage {
    let side = rows.first().and_then(|r| r.first()).map_or(1, |i| i.width());
    let gap = 2;
    let cols = PANEL_COLUMNS.len() as u32;
    let mut out = GrayImage::from_pixel(
        cols * (side + gap) + gap,
        rows.len() as u32 * (side + gap) + gap,
        image::Luma([255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            image::imageops::replace(
                &mut out,
                tile,
                (gap + c as u32 * (side + gap)) as i64,
                (gap + r as u32 * (side + gap)) as i64,
            );
        }
    }
    out
}

fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)?.to_luma8())
}

/// Writes the report for a finished run directory into `<root>/report`.
/// Only evaluation outputs are read, so no model is retrained.
pub fn emit_report(root: &Path) -> Result<ReportOutputs> {
    let missing: Vec<String> =
        required_inputs(root).into_iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingOutputs(missing));
    }
    let config = ExperimentConfig::load(&root.join(CONFIG_FILE))?;
    let eval_dir = root.join(Stage::Evaluate.as_str());
    let mut pairs = Vec::new();
    for m in METHODS {
        let rows: Vec<PairRecord> = read_json(&eval_dir.join(pairs_file(m)))?;
        if rows.is_empty() {
            return Err(Error::EmptyDataset.in_stage(Stage::Report.as_str()));
        }
        pairs.push((m, rows));
    }
    let dataset = config.dataset.name().to_string();
    let keyed: Vec<(GroupKey, crate::metrics::PairMetrics)> = pairs
        .iter()
        .flat_map(|(m, rows)| {
            let key = GroupKey { classifier: m.as_str().to_string(), dataset: dataset.clone(), subgroup: None };
            rows.iter().map(move |r| (key.clone(), r.metrics))
        })
        .collect();
    let table = aggregate(keyed.iter().map(|(k, m)| (k, m)));

    let dir = root.join(Stage::Report.as_str());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    table.write_csv(&dir.join(TABLE_FILE))?;

    let mut perf = Vec::new();
    for m in METHODS {
        let p: SubgroupPerformance = read_json(&root.join(Stage::for_classifier(m).as_str()).join(EVALUATION_FILE))?;
        perf.push((m, p));
    }
    let csv_path = dir.join(SUBGROUP_CSV_FILE);
    fs::write(&csv_path, subgroup_csv(&perf)).map_err(|e| Error::io(&csv_path, e))?;
    bar_chart(&perf).save(dir.join(SUBGROUP_CHART_FILE))?;

    let panel_dir = dir.join(PANELS_DIR);
    if panel_dir.exists() {
        fs::remove_dir_all(&panel_dir).map_err(|e| Error::io(&panel_dir, e))?;
    }
    fs::create_dir_all(&panel_dir).map_err(|e| Error::io(&panel_dir, e))?;
    let cases = sample_panel_cases(&pairs[0].1, config.report.panel_cases, config.report.panel_seed);
    let mut panel_files = Vec::new();
    let mut grid_rows = Vec::new();
    for (group, id) in &cases {
        let sources = [
            pair_png(root, Method::Erm, id, "factual"),
            pair_png(root, Method::Erm, id, "counterfactual"),
            pair_png(root, Method::Erm, id, "heatmap"),
            pair_png(root, Method::Dro, id, "counterfactual"),
            pair_png(root, Method::Dro, id, "heatmap"),
        ];
        let mut row = Vec::new();
        for (k, (src, col)) in sources.iter().zip(PANEL_COLUMNS).enumerate() {
            let tile = load_gray(src)?;
            let dst = panel_dir.join(format!("{}_{id}_{}_{col}.png", group.as_str(), k + 1));
            tile.save(&dst)?;
            panel_files.push(dst);
            row.push(tile);
        }
        grid_rows.push(row);
    }
    panel_grid(&grid_rows).save(dir.join(PANEL_GRID_FILE))?;

    let scls = |m: Method| {
        let v: Vec<f64> = pairs.iter().find(|(k, _)| *k == m).map(|(_, r)| r.iter().map(|p| p.metrics.scls).collect()).unwrap_or_default();
        mean_std(&v).unwrap_or((0.0, 0.0))
    };
    let ((erm_mean, erm_std), (dro_mean, dro_std)) = (scls(Method::Erm), scls(Method::Dro));
    let scls_gap = SclsGap { erm_mean, erm_std, dro_mean, dro_std, pairs: pairs[0].1.len(), gap: erm_mean - dro_mean };
    let gap_path = dir.join(SCLS_GAP_FILE);
    fs::write(&gap_path, scls_gap.line() + "\n").map_err(|e| Error::io(&gap_path, e))?;

    let w = config.gan.weights;
    write_json(
        &dir.join(PROVENANCE_FILE),
        &json!({
            "version": VERSION,
            "config_hash": config.hash(),
            "experiment": config.name,
            "seed": config.seed,
            "dataset": dataset,
            "loss_weights": { "adv": w.adv, "cyc": w.cyc, "id": w.id, "cls": w.cls },
            "normalization": {
                "actionability": ACTIONABILITY_DEFINITION,
                "ssim": SSIM_DEFINITION,
                "cpg": CPG_DEFINITION,
                "scls": SCLS_DEFINITION,
                "heatmap": HEATMAP_DEFINITION,
                "region_mass": REGION_MASS_DEFINITION,
            },
            "panel_cases": cases.iter().map(|(g, id)| json!({ "subgroup": g.as_str(), "id": id })).collect::<Vec<_>>(),
        }),
    )?;
    Ok(ReportOutputs { dir, table, scls_gap, panel_files })
}
