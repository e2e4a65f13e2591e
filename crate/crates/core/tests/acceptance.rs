//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails at the
//! end if any criterion failed.
//!
//! Set `CFDEBIAS_ACCEPTANCE_DIR` to keep the desk runs; a later invocation
//! with the same directory resumes finished stages.

use std::cell::Cell;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cfdebias::classifier::{
    bce_with_logit, dro_weight_update, fit, BinaryClassifier, GroupWeights, Objective, Selection, SubgroupPerformance,
    TrainConfig, TrainingData,
};
use cfdebias::counterfactual::{
    cycle_loss, difference_heatmap, generator_grads, identity_loss, region_mass, train_counterfactual_gan,
    CounterfactualPair, Direction, GanConfig, LossWeights,
};
use cfdebias::experiment::{run_pipeline, EvaluationSummary, ExperimentConfig, AGGREGATE_FILE, EVALUATION_FILE, SUMMARY_FILE};
use cfdebias::metrics::{actionability, aggregate, ssim, GroupKey, PairMetrics};
use cfdebias::nn::{
    cast_params, ClassifierArch, ClassifierNet, Critic, CriticArch, GeneratorArch, ImageMap, LogitModel, Pooling, Tensor,
    UNet,
};
use cfdebias::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    lines: Vec<String>,
    failed: usize,
}

impl Outcome {
    fn record(&mut self, id: u32, name: &str, pass: bool, detail: String, started: Instant) {
        let line = format!(
            "[{}] criterion {id} {name}: {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
        // written past the test harness capture so the lines show on success too
        let mut out = std::io::stdout();
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
        self.failed += !pass as usize;
        self.lines.push(line);
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn noise(side: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(side, |_, _| rng.random_range(0.0..1.0))
}

// ---------------------------------------------------------------- desk runs

struct DeskRun {
    erm: SubgroupPerformance,
    dro: SubgroupPerformance,
    summary: EvaluationSummary,
    classifier_seconds: f64,
}

fn read<T: serde::de::DeserializeOwned>(p: PathBuf) -> T {
    serde_json::from_slice(&std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

fn desk_run(root: &Path, seed: u64) -> DeskRun {
    let dir = root.join(format!("desk_seed{seed}"));
    let manifest = run_pipeline(&ExperimentConfig::desk(seed), &dir).expect("desk run");
    let classifier_seconds = manifest
        .stages
        .iter()
        .filter(|s| s.stage.as_str().starts_with("classifier_"))
        .map(|s| s.seconds)
        .sum();
    DeskRun {
        erm: read(dir.join("classifier_erm").join(EVALUATION_FILE)),
        dro: read(dir.join("classifier_dro").join(EVALUATION_FILE)),
        summary: read(dir.join("evaluate").join(SUMMARY_FILE)),
        classifier_seconds,
    }
}

fn desk_criteria(out: &mut Outcome, root: &Path) {
    let started = Instant::now();
    let runs: Vec<DeskRun> = SEEDS.iter().map(|&s| desk_run(root, s)).collect();
    let per_seed = |f: &dyn Fn(&DeskRun) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    let cls = |r: &DeskRun, m: &str| r.summary.classifiers[m].clone();

    let erm_wg = per_seed(&|r| r.erm.worst_group_accuracy.unwrap_or(0.0));
    let dro_wg = per_seed(&|r| r.dro.worst_group_accuracy.unwrap_or(0.0));
    let erm_maj = per_seed(&|r| r.erm.majority_accuracy().unwrap_or(0.0));
    let gap = mean(&dro_wg) - mean(&erm_wg);
    let secs: f64 = runs.iter().map(|r| r.classifier_seconds).sum();
    out.record(
        1,
        "worst-group generalization",
        gap >= 0.10 && mean(&erm_maj) >= 0.90 && secs <= 15.0 * 60.0,
        format!(
            "DRO-ERM worst-group {gap:+.3} (DRO {}, ERM {}), ERM majority {:.3}, classifier training {secs:.0}s",
            fmt(&dro_wg),
            fmt(&erm_wg),
            mean(&erm_maj)
        ),
        started,
    );

    let t = Instant::now();
    let erm_scls = per_seed(&|r| cls(r, "erm").mean_scls);
    let dro_scls = per_seed(&|r| cls(r, "dro").mean_scls);
    let scls_gap = mean(&erm_scls) - mean(&dro_scls);
    out.record(
        2,
        "SCLS separation",
        scls_gap >= 0.3 && mean(&dro_scls) <= 0.35,
        format!("ERM-DRO {scls_gap:.3} (ERM {}, DRO {})", fmt(&erm_scls), fmt(&dro_scls)),
        t,
    );

    let t = Instant::now();
    let cpg = |m: &str| mean(&per_seed(&|r| cls(r, m).mean_cpg));
    let sim = |m: &str| mean(&per_seed(&|r| cls(r, m).mean_ssim));
    let act = |m: &str| mean(&per_seed(&|r| cls(r, m).mean_actionability));
    let ratio = act("erm").max(act("dro")) / act("erm").min(act("dro"));
    out.record(
        3,
        "counterfactual validity",
        cpg("erm") >= 0.6 && cpg("dro") >= 0.6 && sim("erm") >= 90.0 && sim("dro") >= 90.0 && ratio <= 3.0,
        format!(
            "CPG {:.3}/{:.3}, SSIM {:.2}/{:.2}, actionability {:.3}/{:.3} ratio {ratio:.2} (ERM/DRO)",
            cpg("erm"),
            cpg("dro"),
            sim("erm"),
            sim("dro"),
            act("erm"),
            act("dro")
        ),
        t,
    );

    let t = Instant::now();
    let aucs = per_seed(&|r| r.summary.detector_auc);
    out.record(
        4,
        "artifact detector",
        aucs.iter().all(|&a| a >= 0.99),
        format!("AUC {}", fmt(&aucs)),
        t,
    );

    let t = Instant::now();
    let mass = |m: &str| mean(&per_seed(&|r| cls(r, m).majority_s_region_mass.unwrap_or(f64::NAN)));
    let (e, d) = (mass("erm"), mass("dro"));
    out.record(
        5,
        "spatial latching",
        e >= 3.0 * d,
        format!("majority_S artifact region mass ERM {e:.4} vs DRO {d:.4} ({:.1}x)", e / d),
        t,
    );
}

// ----------------------------------------------------------- metric oracles

fn ssim_pixel_loop(a: &Image, b: &Image) -> f64 {
    let (s, k) = (a.side(), 11usize);
    let mut w = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            w[i * k + j] = (-(di * di + dj * dj) / 4.5).exp();
        }
    }
    let tot: f64 = w.iter().sum();
    let mut acc = 0.0;
    for y in 0..=s - k {
        for x in 0..=s - k {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = w[i * k + j] / tot;
                    let (p, q) = (a.get(y + i, x + j) as f64, b.get(y + i, x + j) as f64);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let num = (2.0 * ma * mb + 1e-4) * (2.0 * (sab - ma * mb) + 9e-4);
            let den = (ma * ma + mb * mb + 1e-4) * (saa - ma * ma + sbb - mb * mb + 9e-4);
            acc += num / den;
        }
    }
    100.0 * acc / ((s - k + 1) * (s - k + 1)) as f64
}

fn pattern_a(side: usize) -> Image {
    Image::from_fn(side, |y, x| (((x * 7 + y * 13) % 17) as f32 / 16.0) * 0.8 + 0.1)
}

fn pattern_b(side: usize) -> Image {
    Image::from_fn(side, |y, x| {
        let v = 0.5 + 0.3 * ((x as f32 * 0.4).sin() * (y as f32 * 0.3).cos()) + 0.05 * ((x * y) % 5) as f32 / 4.0;
        v.clamp(0.0, 1.0)
    })
}

// skimage structural_similarity (gaussian weights, sigma 1.5, population
// covariance, data_range 1) on the patterns, cropped to valid positions, x100
const SKIMAGE_A_B: f64 = 0.850360344849907;
const SKIMAGE_B_BLUR: f64 = 98.6965786535141;

fn metric_oracles(out: &mut Outcome) {
    let t = Instant::now();
    let mut worst_pixel = 0.0f64;

    for seed in 0..5 {
        let (a, b) = (noise(64, seed), noise(64, seed + 100));
        let mut s = 0.0;
        for y in 0..64 {
            for x in 0..64 {
                s += (a.get(y, x) as f64 - b.get(y, x) as f64).abs();
            }
        }
        worst_pixel = worst_pixel.max((actionability(&a, &b).unwrap() - 100.0 * s / 4096.0).abs());

        let pair = CounterfactualPair {
            factual: a.clone(),
            counterfactual: b.clone(),
            direction: Direction::SickToHealthy,
            f_x: 0.9,
            f_x_cf: 0.1,
        };
        let heat = difference_heatmap(&pair);
        let mut max = 0.0f64;
        for y in 0..64 {
            for x in 0..64 {
                max = max.max((a.get(y, x) as f64 - b.get(y, x) as f64).abs());
            }
        }
        let mask: Vec<bool> = (0..4096).map(|i| (i / 64 + i % 64) % 3 == 0).collect();
        let (mut inside, mut total) = (0.0, 0.0);
        for y in 0..64 {
            for x in 0..64 {
                let v = (a.get(y, x) as f64 - b.get(y, x) as f64).abs() / max;
                worst_pixel = worst_pixel.max((heat.get(y, x) as f64 - v).abs());
                total += v;
                if mask[y * 64 + x] {
                    inside += v;
                }
            }
        }
        worst_pixel = worst_pixel.max((region_mass(&heat, &mask).unwrap() - inside / total).abs());
    }

    // cycle and identity losses through a generator with a random head
    let gen = UNet::new(GeneratorArch { base_width: 4, depth: 2, head_scale: 1.0, ..GeneratorArch::desk(16) }).unwrap();
    let p1: Vec<f64> = cast_params(&gen.initialize(&mut ChaCha8Rng::seed_from_u64(1)));
    let p2: Vec<f64> = cast_params(&gen.initialize(&mut ChaCha8Rng::seed_from_u64(2)));
    let imgs = [noise(16, 7), noise(16, 8)];
    let refs: Vec<&Image> = imgs.iter().collect();
    let x: Tensor<f64> = Image::to_tensor(&refs).cast();
    let fwd = gen.apply(&p1, &x);
    let rec = gen.apply(&p2, &fwd);
    let same = gen.apply(&p1, &x);
    let (mut cyc, mut id) = (0.0, 0.0);
    for i in 0..x.data().len() {
        cyc += (rec.data()[i] - x.data()[i]).abs();
        id += (same.data()[i] - x.data()[i]).abs();
    }
    let n = x.data().len() as f64;
    worst_pixel = worst_pixel.max((cycle_loss(&gen, &p1, &gen, &p2, &x) - cyc / n).abs());
    worst_pixel = worst_pixel.max((identity_loss(&gen, &p1, &x) - id / n).abs());

    let mut worst_ssim = 0.0f64;
    for seed in 0..3 {
        let (a, b) = (noise(32, seed), noise(32, seed + 50));
        worst_ssim = worst_ssim.max((ssim(&a, &b).unwrap() - ssim_pixel_loop(&a, &b)).abs());
    }
    let (a, b) = (pattern_a(32), pattern_b(32));
    let blurred = Image::from_fn(32, |y, x| {
        (b.get(y, x.saturating_sub(1)) + b.get(y, x) + b.get(y, (x + 1).min(31))) / 3.0
    });
    worst_ssim = worst_ssim.max((ssim(&a, &b).unwrap() - SKIMAGE_A_B).abs());
    worst_ssim = worst_ssim.max((ssim(&b, &blurred).unwrap() - SKIMAGE_B_BLUR).abs());

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let keys = [
        GroupKey { classifier: "erm".into(), dataset: "desk".into(), subgroup: None },
        GroupKey { classifier: "dro".into(), dataset: "desk".into(), subgroup: None },
    ];
    let rows: Vec<(usize, PairMetrics)> = (0..300)
        .map(|i| {
            let v = |r: &mut ChaCha8Rng, hi: f64| r.random_range(0.0..hi);
            (i % 2, PairMetrics { actionability: v(&mut rng, 5.0), ssim: v(&mut rng, 100.0), cpg: v(&mut rng, 1.0), scls: v(&mut rng, 1.0) })
        })
        .collect();
    let report = aggregate(rows.iter().map(|(k, m)| (&keys[*k], m)));
    let mut worst_agg = 0.0f64;
    for (k, key) in keys.iter().enumerate() {
        for (j, name) in PairMetrics::NAMES.iter().enumerate() {
            let vals: Vec<f64> = rows.iter().filter(|(g, _)| *g == k).map(|(_, m)| m.values()[j]).collect();
            let mut mu = 0.0;
            for v in &vals {
                mu += v;
            }
            mu /= vals.len() as f64;
            let mut var = 0.0;
            for v in &vals {
                var += (v - mu) * (v - mu);
            }
            let sd = (var / vals.len() as f64).sqrt();
            let row = report.get(&key.classifier, None, name).unwrap();
            worst_agg = worst_agg.max((row.mean - mu).abs()).max((row.std - sd).abs());
            assert_eq!(row.count, vals.len());
        }
    }
    out.record(
        6,
        "metric oracles",
        worst_pixel <= 1e-6 && worst_ssim <= 1e-4 && worst_agg <= 1e-9 && t.elapsed().as_secs() <= 60,
        format!("pixel-loop max err {worst_pixel:.2e}, SSIM max err {worst_ssim:.2e}, aggregate max err {worst_agg:.2e}"),
        t,
    );
}

// -------------------------------------------------------------- DRO suite

const GROUP_A: [(f64, f64, usize); 4] = [(1.0, 1.0, 4), (1.0, 0.0, 1), (0.0, 0.0, 4), (0.0, 1.0, 1)];
const GROUP_B: [(f64, f64, usize); 4] = [(1.0, 0.0, 6), (1.0, 1.0, 2), (0.0, 1.0, 5), (0.0, 0.0, 3)];

fn group_loss(rows: &[(f64, f64, usize)], w: f64, b: f64) -> f64 {
    let n: usize = rows.iter().map(|r| r.2).sum();
    rows.iter().map(|&(x, y, c)| c as f64 * bce_with_logit(w * x + b, y)).sum::<f64>() / n as f64
}

fn dro_suite(out: &mut Outcome) {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let e = std::f64::consts::E;
    let q = dro_weight_update(&GroupWeights::uniform(2), &[1.0, 0.0], 1.0).unwrap();
    worst = worst.max((q.as_slice()[0] - e / (e + 1.0)).abs()).max((q.as_slice()[1] - 1.0 / (e + 1.0)).abs());
    let start = GroupWeights::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let same = dro_weight_update(&start, &[3.0, 1.0, 4.0, 1.5], 0.0).unwrap();
    for (a, b) in same.as_slice().iter().zip(start.as_slice()) {
        worst = worst.max((a - b).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let q = GroupWeights::new(raw.iter().map(|v| v / z).collect()).unwrap();
        let losses: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..10.0)).collect();
        let eta = rng.random_range(0.0..2.0);
        let next = dro_weight_update(&q, &losses, eta).unwrap();
        let closed: Vec<f64> = q.as_slice().iter().zip(&losses).map(|(w, l)| w * (eta * l).exp()).collect();
        let zc: f64 = closed.iter().sum();
        worst = worst.max((next.as_slice().iter().sum::<f64>() - 1.0).abs());
        for (a, b) in next.as_slice().iter().zip(&closed) {
            worst = worst.max((a - b / zc).abs());
        }
    }

    let mut grid = (0.0, 0.0, f64::INFINITY);
    for i in 0..=1200 {
        for j in 0..=1200 {
            let (w, b) = (-3.0 + i as f64 * 0.005, -3.0 + j as f64 * 0.005);
            let v = group_loss(&GROUP_A, w, b).max(group_loss(&GROUP_B, w, b));
            if v < grid.2 {
                grid = (w, b, v);
            }
        }
    }
    let (mut px, mut y, mut g) = (Vec::new(), Vec::new(), Vec::new());
    for (gi, rows) in [GROUP_A, GROUP_B].iter().enumerate() {
        for &(x, t, c) in rows {
            for _ in 0..c {
                px.push(x as f32);
                y.push(t as f32);
                g.push(gi);
            }
        }
    }
    let data = TrainingData::new(Tensor::new([px.len(), 1, 1, 1], px), y, g, 2);
    let arch = ClassifierArch::Linear { side: 1 };
    let cfg = TrainConfig {
        arch: arch.clone(),
        epochs: 4000,
        batch_size: data.len(),
        learning_rate: 0.01,
        weight_decay: 0.0,
        eta_q: 0.05,
        seed: 0,
        threshold: 0.5,
        patience: 0,
        groups: None,
    };
    let net = ClassifierNet::new(arch).unwrap();
    let fitted = fit(&net, vec![0.0, 0.0], &data, &data, &cfg, Objective::GroupDro { eta_q: cfg.eta_q }, Selection::WorstGroupLoss)
        .unwrap();
    let (w, b) = (fitted.params[0] as f64, fitted.params[1] as f64);
    let got = group_loss(&GROUP_A, w, b).max(group_loss(&GROUP_B, w, b));
    let toy_ok = (got - grid.2).abs() < 1e-3 && (w - grid.0).abs() < 0.05 && (b - grid.1).abs() < 0.05;
    out.record(
        7,
        "DRO suite",
        worst <= 1e-9 && toy_ok && t.elapsed().as_secs() <= 120,
        format!(
            "closed-form max err {worst:.2e}; toy minimax {got:.5} at ({w:.3}, {b:.3}) vs grid {:.5} at ({:.3}, {:.3})",
            grid.2, grid.0, grid.1
        ),
        t,
    );
}

// ---------------------------------------------------- freeze and gradients

/// Real classifier network that counts requests for parameter gradients.
struct Watched {
    net: ClassifierNet,
    param_grad_requests: Cell<usize>,
}

impl LogitModel<f64> for Watched {
    type Cache = <ClassifierNet as LogitModel<f64>>::Cache;

    fn num_params(&self) -> usize {
        LogitModel::<f64>::num_params(&self.net)
    }

    fn forward(&self, params: &[f64], x: &Tensor<f64>) -> (Vec<f64>, Self::Cache) {
        self.net.forward(params, x)
    }

    fn backward(
        &self,
        params: &[f64],
        cache: Self::Cache,
        dlogits: &[f64],
        grad: Option<&mut [f64]>,
        need_input_grad: bool,
    ) -> Option<Tensor<f64>> {
        if grad.is_some() {
            self.param_grad_requests.set(self.param_grad_requests.get() + 1);
        }
        self.net.backward(params, cache, dlogits, grad, need_input_grad)
    }
}

fn batch(side: usize, seeds: &[u64]) -> Tensor<f64> {
    let imgs: Vec<Image> = seeds.iter().map(|&s| noise(side, s)).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    Image::to_tensor(&refs).cast()
}

fn freeze_and_gradients(out: &mut Outcome) {
    let t = Instant::now();
    let side = 16;
    let arch = ClassifierArch::Cnn { side, widths: vec![4, 8], pooling: Pooling::default() };
    let f = BinaryClassifier::untrained(arch.clone(), 5).unwrap();
    let healthy: Vec<Image> = (0..12).map(|i| noise(side, 200 + i)).collect();
    let sick: Vec<Image> = (0..12).map(|i| noise(side, 300 + i)).collect();
    let cfg = GanConfig {
        generator: GeneratorArch { side, base_width: 4, depth: 2, ..GeneratorArch::desk(side) },
        critic: CriticArch { side, widths: vec![4, 8] },
        epochs: 2,
        steps_per_epoch: 3,
        batch_size: 4,
        probe_size: 8,
        ..GanConfig::desk(side, 3)
    };
    let (before, params) = (f.checksum(), f.params().to_vec());
    let h: Vec<&Image> = healthy.iter().collect();
    let s: Vec<&Image> = sick.iter().collect();
    let trained = train_counterfactual_gan(&h, &s, &f, &cfg, None);
    let frozen = trained.is_ok() && f.checksum() == before && f.params() == params.as_slice();

    let watched = Watched { net: ClassifierNet::new(arch).unwrap(), param_grad_requests: Cell::new(0) };
    let fp: Vec<f64> = cast_params(f.params());
    let gen = UNet::new(GeneratorArch { base_width: 2, depth: 2, head_scale: 0.3, ..GeneratorArch::desk(side) }).unwrap();
    let critic = Critic::new(CriticArch { side, widths: vec![2, 4] }).unwrap();
    let rng = |k| ChaCha8Rng::seed_from_u64(k);
    let p_sh: Vec<f64> = cast_params(&gen.initialize(&mut rng(1)));
    let p_hs: Vec<f64> = cast_params(&gen.initialize(&mut rng(2)));
    let d_h: Vec<f64> = cast_params(&critic.layout().initialize(&mut rng(3)));
    let d_s: Vec<f64> = cast_params(&critic.layout().initialize(&mut rng(4)));
    let (hb, sb) = (batch(side, &[10, 11]), batch(side, &[20, 21]));
    let w = LossWeights::default();
    let total = |a: &[f64], b: &[f64]| generator_grads(&gen, &critic, &watched, &fp, a, b, &d_h, &d_s, &hb, &sb, &w);
    let g = total(&p_sh, &p_hs);
    let fp_after = fp.clone();
    let step = 1e-6;
    let mut worst = 0.0f64;
    for i in (0..p_sh.len()).step_by(7) {
        for which in 0..2 {
            let (mut a, mut b, mut a2, mut b2) = (p_sh.clone(), p_hs.clone(), p_sh.clone(), p_hs.clone());
            let analytic = if which == 0 {
                a[i] += step;
                a2[i] -= step;
                g.grad_sh[i]
            } else {
                b[i] += step;
                b2[i] -= step;
                g.grad_hs[i]
            };
            let fd = (total(&a, &b).total - total(&a2, &b2).total) / (2.0 * step);
            worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3));
        }
    }
    let requests = watched.param_grad_requests.get();
    out.record(
        8,
        "freeze and gradients",
        frozen && requests == 0 && fp_after == fp && worst <= 1e-4,
        format!(
            "checksum unchanged {frozen}, classifier parameter-gradient requests {requests}, generator FD max rel err {worst:.2e}"
        ),
        t,
    );
}

// ------------------------------------------------------------ determinism

fn determinism(out: &mut Outcome, root: &Path) {
    let t = Instant::now();
    let mut cfg = ExperimentConfig::smoke(17);
    cfg.deterministic = true;
    let csv = |name: &str| {
        let dir = root.join(name);
        let _ = std::fs::remove_dir_all(&dir);
        run_pipeline(&cfg, &dir).expect("deterministic run");
        std::fs::read(dir.join("evaluate").join(AGGREGATE_FILE)).unwrap()
    };
    let (a, b) = (csv("det_a"), csv("det_b"));
    out.record(
        9,
        "determinism",
        a == b && !a.is_empty(),
        format!("aggregate CSVs {} bytes, identical {}", a.len(), a == b),
        t,
    );
}

#[test]
fn acceptance() {
    let started = Instant::now();
    let kept = std::env::var_os("CFDEBIAS_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = kept.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    let mut out = Outcome { lines: Vec::new(), failed: 0 };

    metric_oracles(&mut out);
    dro_suite(&mut out);
    freeze_and_gradients(&mut out);
    determinism(&mut out, &root);
    desk_criteria(&mut out, &root);

    out.lines.sort_by_key(|l| l.split("criterion ").nth(1).and_then(|s| s.split(' ').next()?.parse::<u32>().ok()));
    let mut stdout = std::io::stdout();
    writeln!(stdout, "acceptance summary ({:.0}s):", started.elapsed().as_secs_f64()).unwrap();
    for l in &out.lines {
        writeln!(stdout, "  {l}").unwrap();
    }
    assert_eq!(out.failed, 0, "{} acceptance criteria failed", out.failed);
}
