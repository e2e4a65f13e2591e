//! Counterfactual quality metrics and their aggregation.
//!
//! * Actionability: `100 · mean |x − x_cf|` over pixels of `[0, 1]` images.
//! * SSIM: 11×11 Gaussian window (σ = 1.5), `C1 = 0.01²`, `C2 = 0.03²`,
//!   dynamic range 1, averaged over valid window positions, reported ×100.
//! * CPG: `|f(x) − f(x_cf)|` on disease probabilities.
//! * SCLS: `|d(x) − d(x_cf)|` on artifact-detector probabilities.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{BinaryClassifier, Method};
use crate::error::{Error, Result};
use crate::raster::Image;

pub const ACTIONABILITY_DEFINITION: &str = "100 * mean absolute per-pixel difference on [0,1] images";
pub const SSIM_DEFINITION: &str =
    "SSIM x100, 11x11 Gaussian window sigma 1.5, C1=(0.01*L)^2, C2=(0.03*L)^2, L=1, mean over valid window positions";
pub const CPG_DEFINITION: &str = "|f(x) - f(x_cf)| on classifier probabilities";
pub const SCLS_DEFINITION: &str = "|d(x) - d(x_cf)| on artifact detector probabilities";

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

pub fn actionability(x: &Image, x_cf: &Image) -> Result<f64> {
    x.same_shape(x_cf)?;
    let sum: f64 = x.pixels().iter().zip(x_cf.pixels()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
    Ok(100.0 * sum / x.pixels().len() as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of a `side × side` plane.
fn filter_valid(plane: &[f64], side: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let out = side + 1 - k;
    let mut rows = vec![0.0; side * out];
    for y in 0..side {
        for x in 0..out {
            rows[y * out + x] = (0..k).map(|i| w[i] * plane[y * side + x + i]).sum();
        }
    }
    let mut res = vec![0.0; out * out];
    for y in 0..out {
        for x in 0..out {
            res[y * out + x] = (0..k).map(|i| w[i] * rows[(y + i) * out + x]).sum();
        }
    }
    res
}

pub fn ssim(x: &Image, x_cf: &Image) -> Result<f64> {
    x.same_shape(x_cf)?;
    let side = x.side();
    if side < SSIM_WINDOW {
        return Err(Error::Shape { expected: format!("side >= {SSIM_WINDOW}"), got: side.to_string() });
    }
    let a: Vec<f64> = x.pixels().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = x_cf.pixels().iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let w = gaussian_window();
    let mu_a = filter_valid(&a, side, &w);
    let mu_b = filter_valid(&b, side, &w);
    let aa = filter_valid(&prod(&a, &a), side, &w);
    let bb = filter_valid(&prod(&b, &b), side, &w);
    let ab = filter_valid(&prod(&a, &b), side, &w);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(100.0 * total / n as f64)
}

pub fn prob_gap(p: f64, p_cf: f64) -> f64 {
    (p - p_cf).abs()
}

pub fn cpg(f: &BinaryClassifier, x: &Image, x_cf: &Image) -> Result<f64> {
    x.same_shape(x_cf)?;
    let p = f.predict_proba(&[x, x_cf])?;
    Ok(prob_gap(p[0], p[1]))
}

/// Errors unless `d` is a trained artifact detector.
pub fn check_detector(d: &BinaryClassifier) -> Result<()> {
    match d.method() {
        Some(Method::Detector) => Ok(()),
        Some(m) => Err(Error::Config(format!("SCLS needs an artifact detector, got a {} classifier", m.as_str()))),
        None => Err(Error::Config("SCLS needs a trained artifact detector".into())),
    }
}

pub fn scls(d: &BinaryClassifier, x: &Image, x_cf: &Image) -> Result<f64> {
    check_detector(d)?;
    x.same_shape(x_cf)?;
    let p = d.predict_proba(&[x, x_cf])?;
    Ok(prob_gap(p[0], p[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub actionability: f64,
    pub ssim: f64,
    pub cpg: f64,
    pub scls: f64,
}

impl PairMetrics {
    pub const NAMES: [&'static str; 4] = ["actionability", "ssim", "cpg", "scls"];

    pub fn values(&self) -> [f64; 4] {
        [self.actionability, self.ssim, self.cpg, self.scls]
    }

    /// Image metrics from the pixels, CPG and SCLS from precomputed
    /// probabilities.
    pub fn compute(x: &Image, x_cf: &Image, f: (f64, f64), d: (f64, f64)) -> Result<Self> {
        Ok(Self { actionability: actionability(x, x_cf)?, ssim: ssim(x, x_cf)?, cpg: prob_gap(f.0, f.1), scls: prob_gap(d.0, d.1) })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub classifier: String,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub classifier: String,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<String>,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub rows: Vec<AggregateRow>,
}

/// Exact-order-free mean and population standard deviation: values are
/// sorted before summation so any permutation gives identical bits.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    dev.sort_by(f64::total_cmp);
    Some((mean, (dev.iter().sum::<f64>() / n).sqrt()))
}

/// Mean ± population std of every metric per grouping key.
pub fn aggregate<'a>(pairs: impl IntoIterator<Item = (&'a GroupKey, &'a PairMetrics)>) -> AggregateReport {
    let mut by: BTreeMap<&GroupKey, Vec<[f64; 4]>> = BTreeMap::new();
    for (k, m) in pairs {
        by.entry(k).or_default().push(m.values());
    }
    let mut rows = Vec::new();
    for (k, vals) in by {
        for (j, name) in PairMetrics::NAMES.iter().enumerate() {
            let col: Vec<f64> = vals.iter().map(|v| v[j]).collect();
            let (mean, std) = mean_std(&col).expect("non-empty group");
            rows.push(AggregateRow {
                classifier: k.classifier.clone(),
                dataset: k.dataset.clone(),
                subgroup: k.subgroup.clone(),
                metric: name.to_string(),
                mean,
                std,
                count: col.len(),
            });
        }
    }
    AggregateReport { rows }
}

impl AggregateReport {
    pub fn get(&self, classifier: &str, subgroup: Option<&str>, metric: &str) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.classifier == classifier && r.subgroup.as_deref() == subgroup && r.metric == metric)
    }

    /// `classifier,dataset,metric,mean,std,count`, plus a leading `subgroup`
    /// column after `dataset` when any row carries one.
    pub fn to_csv(&self) -> String {
        let with_sub = self.rows.iter().any(|r| r.subgroup.is_some());
        let mut out = Vec::new();
        if with_sub {
            writeln!(out, "classifier,dataset,subgroup,metric,mean,std,count").unwrap();
        } else {
            writeln!(out, "classifier,dataset,metric,mean,std,count").unwrap();
        }
        for r in &self.rows {
            let sub = if with_sub { format!("{},", r.subgroup.as_deref().unwrap_or("all")) } else { String::new() };
            writeln!(out, "{},{},{}{},{:.6},{:.6},{}", r.classifier, r.dataset, sub, r.metric, r.mean, r.std, r.count)
                .unwrap();
        }
        String::from_utf8(out).unwrap()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(side, |_, _| rng.random_range(0.0..1.0))
    }

    /// Deterministic patterns shared with the frozen reference values below.
    fn pattern_a(side: usize) -> Image {
        Image::from_fn(side, |y, x| (((x * 7 + y * 13) % 17) as f32 / 16.0) * 0.8 + 0.1)
    }

    fn pattern_b(side: usize) -> Image {
        Image::from_fn(side, |y, x| {
            let v = 0.5 + 0.3 * ((x as f32 * 0.4).sin() * (y as f32 * 0.3).cos()) + 0.05 * ((x * y) % 5) as f32 / 4.0;
            v.clamp(0.0, 1.0)
        })
    }

    #[test]
    fn actionability_extremes_and_oracle() {
        let z = Image::filled(8, 0.0);
        let o = Image::filled(8, 1.0);
        assert_eq!(actionability(&z, &z).unwrap(), 0.0);
        assert_eq!(actionability(&z, &o).unwrap(), 100.0);
        let (a, b) = (noise(16, 1), noise(16, 2));
        let mut s = 0.0;
        for y in 0..16 {
            for x in 0..16 {
                s += (a.get(y, x) as f64 - b.get(y, x) as f64).abs();
            }
        }
        assert!((actionability(&a, &b).unwrap() - 100.0 * s / 256.0).abs() < 1e-6);
        assert!(actionability(&a, &Image::filled(8, 0.0)).is_err());
    }

    /// Brute force: every 11×11 window position, weights from the 2-D
    /// Gaussian formula directly.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let s = a.side();
        let k = 11usize;
        let mut w2 = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                w2[i * k + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let tot: f64 = w2.iter().sum();
        w2.iter_mut().for_each(|v| *v /= tot);
        let mut acc = 0.0;
        let mut n = 0;
        for y in 0..=s - k {
            for x in 0..=s - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let w = w2[i * k + j];
                        let (p, q) = (a.get(y + i, x + j) as f64, b.get(y + i, x + j) as f64);
                        ma += w * p;
                        mb += w * q;
                        saa += w * p * p;
                        sbb += w * q * q;
                        sab += w * p * q;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                let num = (2.0 * ma * mb + c1) * (2.0 * (sab - ma * mb) + c2);
                let den = (ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2);
                acc += num / den;
                n += 1;
            }
        }
        100.0 * acc / n as f64
    }

    #[test]
    fn ssim_identity_and_constant_offset() {
        let a = noise(20, 3);
        assert!((ssim(&a, &a).unwrap() - 100.0).abs() < 1e-9);
        let (c, d) = (0.4f64, 0.55f64);
        let got = ssim(&Image::filled(16, c as f32), &Image::filled(16, d as f32)).unwrap();
        // flat images: only the luminance term differs from 1
        let (c, d) = (c as f32 as f64, d as f32 as f64);
        let closed = 100.0 * (2.0 * c * d + 1e-4) / (c * c + d * d + 1e-4);
        assert!((got - closed).abs() < 1e-4, "{got} vs {closed}");
        assert!(ssim(&Image::filled(10, 0.5), &Image::filled(10, 0.5)).is_err());
    }

    #[test]
    fn ssim_matches_brute_force_oracle() {
        for seed in 0..3 {
            let (a, b) = (noise(24, seed), noise(24, seed + 10));
            assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);
        }
        let a = pattern_a(32);
        let b = pattern_b(32);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn ssim_matches_frozen_reference_values() {
        // skimage.metrics.structural_similarity(gaussian_weights=True, sigma=1.5,
        // use_sample_covariance=False, data_range=1.0) on the f32 pattern images,
        // cropped to valid window positions, ×100
        let a = pattern_a(32);
        let b = pattern_b(32);
        let blurred = Image::from_fn(32, |y, x| {
            let l = b.get(y, x.saturating_sub(1));
            let r = b.get(y, (x + 1).min(31));
            (l + b.get(y, x) + r) / 3.0
        });
        for (got, want) in [(ssim(&a, &b).unwrap(), REF_A_B), (ssim(&b, &blurred).unwrap(), REF_B_BLUR)] {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    const REF_A_B: f64 = 0.850360344849907;
    const REF_B_BLUR: f64 = 98.6965786535141;

    #[test]
    fn probability_gaps() {
        assert_eq!(prob_gap(0.3, 0.3), 0.0);
        assert!((prob_gap(0.95, 0.04) - 0.91).abs() < 1e-12);
        assert_eq!(prob_gap(0.04, 0.95), prob_gap(0.95, 0.04));
    }

    #[test]
    fn scls_needs_a_trained_detector() {
        let d = BinaryClassifier::untrained(crate::nn::ClassifierArch::Linear { side: 4 }, 0).unwrap();
        let x = Image::filled(4, 0.5);
        assert!(scls(&d, &x, &x).is_err());
    }

    #[test]
    fn aggregate_small_cases() {
        let k = GroupKey { classifier: "erm".into(), dataset: "desk".into(), subgroup: None };
        let m = |v: f64| PairMetrics { actionability: v, ssim: v, cpg: v, scls: v };
        let one = aggregate([(&k, &m(0.3))]);
        assert_eq!(one.rows.len(), 4);
        assert!(one.rows.iter().all(|r| r.std == 0.0 && r.count == 1 && r.mean == 0.3));
        let (a, b) = (m(0.0), m(1.0));
        let two = aggregate([(&k, &a), (&k, &b)]);
        let r = two.get("erm", None, "scls").unwrap();
        assert_eq!((r.mean, r.std, r.count), (0.5, 0.5, 2));
        assert_eq!(two.to_csv().lines().next().unwrap(), "classifier,dataset,metric,mean,std,count");
    }

    #[test]
    fn aggregate_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..100.0)).collect();
        let n = vals.len() as f64;
        let mut mean = 0.0;
        for v in &vals {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0;
        for v in &vals {
            var += (v - mean) * (v - mean);
        }
        let std = (var / n).sqrt();
        let (m, s) = mean_std(&vals).unwrap();
        assert!((m - mean).abs() < 1e-9 && (s - std).abs() < 1e-9);
    }

    fn arb_image(side: usize) -> impl Strategy<Value = Image> {
        prop::collection::vec(0.0f32..=1.0, side * side).prop_map(move |p| Image::new(side, p).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn image_metrics_are_symmetric_and_bounded(a in arb_image(12), b in arb_image(12)) {
            let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((s1 - s2).abs() < 1e-9);
            prop_assert!(s1 <= 100.0 + 1e-9);
            prop_assert_eq!(actionability(&a, &b).unwrap(), actionability(&b, &a).unwrap());
            prop_assert!(actionability(&a, &b).unwrap() >= 0.0);
            if a != b {
                prop_assert!(actionability(&a, &b).unwrap() > 0.0);
            }
        }

        #[test]
        fn more_perturbed_pixels_never_lower_actionability(base in arb_image(8), k in 0usize..64, delta in 0.01f32..0.5) {
            let bump = |n: usize| Image::from_fn(8, |y, x| {
                let v = base.get(y, x);
                if y * 8 + x < n { if v > 0.5 { v - delta } else { v + delta } } else { v }
            });
            let (a1, a2) = (actionability(&base, &bump(k)).unwrap(), actionability(&base, &bump(k + 1)).unwrap());
            prop_assert!(a2 >= a1);
        }

        #[test]
        fn aggregation_is_permutation_invariant(mut vals in prop::collection::vec(0.0f64..1.0, 1..50), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let before = mean_std(&vals).unwrap();
            vals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(mean_std(&vals).unwrap(), before);
        }
    }
}
