use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::*;
use crate::classifier::{evaluate_predictions, Method};
use crate::counterfactual::Direction;
use crate::forge::Subgroup;
use crate::metrics::PairMetrics;
use crate::raster::Image;

fn smoke_run(dir: &Path) -> RunManifest {
    run_pipeline(&ExperimentConfig::smoke(5), dir).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn smoke_pipeline_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let m = smoke_run(tmp.path());
    assert!(m.missing_artifacts(tmp.path()).is_empty());
    assert_eq!(m.stages.len(), Stage::ALL.len());
    for s in Stage::ALL {
        assert!(tmp.path().join(s.as_str()).join(DONE_FILE).exists(), "{s}");
    }
    let csv = fs::read_to_string(tmp.path().join("evaluate").join(AGGREGATE_FILE)).unwrap();
    assert_eq!(csv.lines().next(), Some("classifier,dataset,metric,mean,std,count"));
    assert_eq!(csv.lines().count(), 1 + 2 * PairMetrics::NAMES.len());
    let panels = fs::read_dir(tmp.path().join("report").join(PANELS_DIR)).unwrap().count();
    let pairs: Vec<PairRecord> =
        read_json(&tmp.path().join("evaluate").join(pairs_file(Method::Erm))).unwrap();
    let cfg = ExperimentConfig::smoke(5);
    let cases = sample_panel_cases(&pairs, cfg.report.panel_cases, cfg.report.panel_seed);
    assert!(!cases.is_empty() && cases.len() <= 2 * cfg.report.panel_cases);
    assert_eq!(panels, PANEL_COLUMNS.len() * cases.len());
    let provenance = fs::read_to_string(tmp.path().join("report").join(PROVENANCE_FILE)).unwrap();
    assert!(provenance.contains(&ExperimentConfig::smoke(5).hash()));
    assert!(provenance.contains("\"cyc\": 10.0"));
}

#[test]
fn rerun_resumes_and_report_is_regenerated_without_training() {
    let tmp = tempfile::tempdir().unwrap();
    smoke_run(tmp.path());
    let before = snapshot(tmp.path());
    fs::remove_dir_all(tmp.path().join("report")).unwrap();
    let m = smoke_run(tmp.path());
    for r in &m.stages {
        assert_eq!(r.resumed, r.stage != Stage::Report, "{:?}", r.stage);
    }
    let after = snapshot(tmp.path());
    for (k, v) in &before {
        if k.starts_with("report") && !k.ends_with(DONE_FILE) {
            assert_eq!(after.get(k), Some(v), "{k}");
        }
    }
}

#[test]
fn deterministic_runs_match_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = ExperimentConfig::smoke(9);
    cfg.deterministic = true;
    run_pipeline(&cfg, a.path()).unwrap();
    run_pipeline(&cfg, b.path()).unwrap();
    let read = |d: &Path| fs::read(d.join("evaluate").join(AGGREGATE_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn report_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    smoke_run(tmp.path());
    emit_report(tmp.path()).unwrap();
    let first = snapshot(&tmp.path().join("report"));
    emit_report(tmp.path()).unwrap();
    assert_eq!(first, snapshot(&tmp.path().join("report")));
}

#[test]
fn report_lists_missing_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    ExperimentConfig::smoke(1).save(&tmp.path().join(CONFIG_FILE)).unwrap();
    match emit_report(tmp.path()) {
        Err(crate::Error::MissingOutputs(list)) => {
            assert!(list.iter().any(|p| p.contains("erm_pairs.json")), "{list:?}");
            assert!(list.iter().any(|p| p.contains("summary.json")), "{list:?}");
        }
        other => panic!("expected missing outputs, got {other:?}"),
    }
}

#[test]
fn stage_requires_its_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(ExperimentConfig::smoke(2), tmp.path()).unwrap();
    let err = p.run_stage(Stage::ClassifierErm).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("classifier_erm") && msg.contains("forge"), "{msg}");
    assert!(!tmp.path().join("classifier_erm").join(DONE_FILE).exists());
}

#[test]
fn foreign_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    Pipeline::new(ExperimentConfig::smoke(2), tmp.path()).unwrap();
    assert!(Pipeline::new(ExperimentConfig::smoke(3), tmp.path()).is_err());
}

#[test]
fn invalid_config_fails_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::smoke(2);
    cfg.gan.batch_size = 0;
    assert!(run_pipeline(&cfg, &tmp.path().join("run")).is_err());
    assert!(!tmp.path().join("run").exists());
    let text = serde_json::to_string(&ExperimentConfig::smoke(2)).unwrap().replacen("{", "{\"bogus\":1,", 1);
    fs::write(tmp.path().join("c.json"), text).unwrap();
    assert!(ExperimentConfig::load(&tmp.path().join("c.json")).is_err());
}

#[test]
fn config_round_trips_and_seed_propagates() {
    let cfg = ExperimentConfig::desk(3);
    let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let other = ExperimentConfig::desk(4);
    assert_ne!(other.hash(), cfg.hash());
    assert_ne!(other.gan.seed, cfg.gan.seed);
    assert_ne!(other.erm.seed, other.dro.seed);
    cfg.validate().unwrap();
}

fn pair(id: &str, subgroup: Subgroup, m: [f64; 4]) -> PairRecord {
    PairRecord {
        id: id.into(),
        subgroup,
        direction: Direction::SickToHealthy,
        f_x: 0.9,
        f_x_cf: 0.1,
        d_x: 0.5,
        d_x_cf: 0.5,
        metrics: PairMetrics { actionability: m[0], ssim: m[1], cpg: m[2], scls: m[3] },
        artifact_region_mass: 0.0,
    }
}

/// Run directory holding only what the report reads, with dyadic metric
/// values so the expected table can be written out by hand.
fn fixture(dir: &Path, erm: Vec<PairRecord>, dro: Vec<PairRecord>) {
    ExperimentConfig::smoke(1).save(&dir.join(CONFIG_FILE)).unwrap();
    let eval = dir.join("evaluate");
    fs::create_dir_all(&eval).unwrap();
    fs::write(eval.join(SUMMARY_FILE), "{}").unwrap();
    let perf = evaluate_predictions(&[0.9, 0.1], &[true, false], &[Subgroup::MajorityS, Subgroup::MajorityH], 0.5).unwrap();
    for (m, rows) in [(Method::Erm, &erm), (Method::Dro, &dro)] {
        fs::write(eval.join(pairs_file(m)), serde_json::to_vec(rows).unwrap()).unwrap();
        let cdir = dir.join(format!("classifier_{}", m.as_str()));
        fs::create_dir_all(&cdir).unwrap();
        fs::write(cdir.join(EVALUATION_FILE), serde_json::to_vec(&perf).unwrap()).unwrap();
        let pdir = eval.join("counterfactuals").join(m.as_str());
        fs::create_dir_all(&pdir).unwrap();
        for r in rows.iter() {
            for kind in ["factual", "counterfactual", "heatmap"] {
                Image::filled(4, 0.5).save_png(&pdir.join(format!("{}_{kind}.png", r.id))).unwrap();
            }
        }
    }
}

#[test]
fn fixture_report_matches_hand_computed_table() {
    let tmp = tempfile::tempdir().unwrap();
    let erm = vec![
        pair("a", Subgroup::MajorityS, [1.0, 90.0, 0.5, 0.75]),
        pair("b", Subgroup::MinorityH, [3.0, 96.0, 0.75, 0.25]),
    ];
    let dro = vec![
        pair("a", Subgroup::MajorityS, [2.0, 92.0, 1.0, 0.125]),
        pair("b", Subgroup::MinorityH, [2.0, 94.0, 0.5, 0.125]),
    ];
    fixture(tmp.path(), erm, dro);
    let out = emit_report(tmp.path()).unwrap();
    let expected = "\
classifier,dataset,metric,mean,std,count
dro,synthetic,actionability,2.000000,0.000000,2
dro,synthetic,ssim,93.000000,1.000000,2
dro,synthetic,cpg,0.750000,0.250000,2
dro,synthetic,scls,0.125000,0.000000,2
erm,synthetic,actionability,2.000000,1.000000,2
erm,synthetic,ssim,93.000000,3.000000,2
erm,synthetic,cpg,0.625000,0.125000,2
erm,synthetic,scls,0.500000,0.250000,2
";
    assert_eq!(fs::read_to_string(out.dir.join(TABLE_FILE)).unwrap(), expected);
    assert_eq!(out.scls_gap.gap, 0.375);
    let line = fs::read_to_string(out.dir.join(SCLS_GAP_FILE)).unwrap();
    assert!(line.starts_with("SCLS gap (ERM - DRO): 0.3750"), "{line}");
    assert_eq!(out.panel_files.len(), 5 * 2);
}

#[test]
fn report_with_zero_pairs_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path(), vec![], vec![]);
    assert!(emit_report(tmp.path()).is_err());
    assert!(!tmp.path().join("report").join(TABLE_FILE).exists());
}

#[test]
fn panel_sampling_is_seeded_and_sized() {
    let rows: Vec<PairRecord> = (0..20)
        .map(|i| pair(&format!("p{i:02}"), Subgroup::ALL[i % 4], [0.0; 4]))
        .collect();
    let a = sample_panel_cases(&rows, 4, 7);
    assert_eq!(a, sample_panel_cases(&rows, 4, 7));
    assert_eq!(a.iter().filter(|(g, _)| *g == Subgroup::MajorityS).count(), 4);
    assert_eq!(a.iter().filter(|(g, _)| *g == Subgroup::MinorityH).count(), 4);
    assert_eq!(sample_panel_cases(&rows, 10, 7).len(), 10);
}
