use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{classifier_consistency_loss, l1_loss, lsgan_grad, lsgan_value};
use super::{CounterfactualBundle, Direction, GanConfig, LossWeights};
use crate::classifier::BinaryClassifier;
use crate::error::{Error, Result};
use crate::forge::derive_seed;
use crate::nn::{Adam, Critic, ImageMap, LogitModel, Scalar, Tensor, UNet};
use crate::raster::Image;

/// Cycle error and flip rate on a fixed probe set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    /// Mean L1 of `G_HS(G_SH(s)) − s` and `G_SH(G_HS(h)) − h`, averaged.
    pub cycle_error: f64,
    /// Share of probe images whose classifier decision flips.
    pub flip_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpochLog {
    pub epoch: usize,
    /// Weighted generator objective, mean over steps.
    #[serde(default)]
    pub g_total: f64,
    pub g_adv: f64,
    pub g_cyc: f64,
    pub g_id: f64,
    pub g_cls: f64,
    pub d_loss: f64,
    pub probe: ProbeStats,
}

fn scaled<T: Scalar>(t: &Tensor<T>, k: T) -> Tensor<T> {
    Tensor::new(t.shape(), t.data().iter().map(|&v| v * k).collect())
}

fn probe(bundle: &CounterfactualBundle, healthy: &[&Image], sick: &[&Image]) -> Result<ProbeStats> {
    let f = bundle.classifier();
    let mut cyc = 0.0;
    let mut flips = 0usize;
    for (imgs, fwd, bwd, target_sick) in [
        (sick, Direction::SickToHealthy, Direction::HealthyToSick, false),
        (healthy, Direction::HealthyToSick, Direction::SickToHealthy, true),
    ] {
        let moved = bundle.translate(fwd, imgs)?;
        let moved_refs: Vec<&Image> = moved.iter().collect();
        let back = bundle.translate(bwd, &moved_refs)?;
        let err: f64 = imgs
            .iter()
            .zip(&back)
            .flat_map(|(a, b)| a.pixels().iter().zip(b.pixels()).map(|(p, q)| (p - q).abs() as f64))
            .sum();
        cyc += err / (imgs.len() * imgs[0].pixels().len()) as f64;
        flips += f.predict_proba(&moved_refs)?.into_iter().filter(|&p| f.decide(p) == target_sick).count();
    }
    Ok(ProbeStats { cycle_error: cyc / 2.0, flip_rate: flips as f64 / (healthy.len() + sick.len()) as f64 })
}

struct Optimisers {
    g_sh: Adam,
    g_hs: Adam,
    d_h: Adam,
    d_s: Adam,
}

#[derive(Default)]
struct StepLosses {
    total: f64,
    adv: f64,
    cyc: f64,
    id: f64,
    cls: f64,
    d: f64,
}

/// Generator objective `λ_adv·adv + λ_cyc·cyc + λ_id·id + λ_cls·cls` for both
/// directions and its gradients with respect to each generator. The critics and
/// the classifier are only differentiated with respect to their inputs.
pub struct GeneratorGrads<T> {
    pub total: T,
    pub parts: [T; 4],
    pub grad_sh: Vec<T>,
    pub grad_hs: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn generator_grads<T: Scalar, F: LogitModel<T>>(
    gen: &UNet,
    critic: &Critic,
    f: &F,
    fp: &[T],
    p_sh: &[T],
    p_hs: &[T],
    d_h: &[T],
    d_s: &[T],
    h: &Tensor<T>,
    s: &Tensor<T>,
    w: &LossWeights,
) -> GeneratorGrads<T> {
    let k = |v: f64| T::of(v);
    let mut grad_sh = vec![T::zero(); p_sh.len()];
    let mut grad_hs = vec![T::zero(); p_hs.len()];
    let (fake_h, c_fake_h) = gen.forward(p_sh, s);
    let (fake_s, c_fake_s) = gen.forward(p_hs, h);
    let mut parts = [T::zero(); 4];

    let mut d_fake_h = Tensor::zeros(fake_h.shape());
    let mut d_fake_s = Tensor::zeros(fake_s.shape());
    if w.adv > 0.0 {
        for (fake, dp, dfake) in [(&fake_h, d_h, &mut d_fake_h), (&fake_s, d_s, &mut d_fake_s)] {
            let (sc, cache) = critic.forward(dp, fake);
            parts[0] = parts[0] + lsgan_value(&sc, T::one());
            dfake.add_assign(&critic.backward(dp, cache, &lsgan_grad(&sc, T::one(), k(w.adv)), None));
        }
    }
    if w.cls > 0.0 {
        let (lh, dh) = classifier_consistency_loss(f, fp, &fake_h, T::zero());
        let (ls, ds) = classifier_consistency_loss(f, fp, &fake_s, T::one());
        parts[3] = lh + ls;
        d_fake_h.add_assign(&scaled(&dh, k(w.cls)));
        d_fake_s.add_assign(&scaled(&ds, k(w.cls)));
    }
    if w.cyc > 0.0 {
        let (rec_s, c_rec_s) = gen.forward(p_hs, &fake_h);
        let (ls, dls) = l1_loss(&rec_s, s);
        d_fake_h.add_assign(&gen.backward(p_hs, c_rec_s, &scaled(&dls, k(w.cyc)), Some(&mut grad_hs)));
        let (rec_h, c_rec_h) = gen.forward(p_sh, &fake_s);
        let (lh, dlh) = l1_loss(&rec_h, h);
        d_fake_s.add_assign(&gen.backward(p_sh, c_rec_h, &scaled(&dlh, k(w.cyc)), Some(&mut grad_sh)));
        parts[1] = ls + lh;
    }
    gen.backward(p_sh, c_fake_h, &d_fake_h, Some(&mut grad_sh));
    gen.backward(p_hs, c_fake_s, &d_fake_s, Some(&mut grad_hs));
    if w.id > 0.0 {
        for (x, p, grad) in [(h, p_sh, &mut grad_sh), (s, p_hs, &mut grad_hs)] {
            let (y, cache) = gen.forward(p, x);
            let (l, dl) = l1_loss(&y, x);
            parts[2] = parts[2] + l;
            gen.backward(p, cache, &scaled(&dl, k(w.id)), Some(grad));
        }
    }
    let total = k(w.adv) * parts[0] + k(w.cyc) * parts[1] + k(w.id) * parts[2] + k(w.cls) * parts[3];
    GeneratorGrads { total, parts, grad_sh, grad_hs }
}

/// One generator update followed by one critic update on paired batches.
fn step(bundle: &mut CounterfactualBundle, opt: &mut Optimisers, h: &Tensor<f32>, s: &Tensor<f32>) -> StepLosses {
    let w = bundle.config.weights;
    let (gen, critic) = (&bundle.generator, &bundle.critic);
    let g = generator_grads(
        gen,
        critic,
        bundle.classifier.net(),
        bundle.classifier.params(),
        &bundle.g_sh,
        &bundle.g_hs,
        &bundle.d_h,
        &bundle.d_s,
        h,
        s,
        &w,
    );
    let fake_h = gen.apply(&bundle.g_sh, s);
    let fake_s = gen.apply(&bundle.g_hs, h);
    opt.g_sh.step(&mut bundle.g_sh, &g.grad_sh);
    opt.g_hs.step(&mut bundle.g_hs, &g.grad_hs);
    let [adv, cyc, id, cls] = g.parts.map(|v| v as f64);
    let mut out = StepLosses { total: g.total as f64, adv, cyc, id, cls, d: 0.0 };

    if w.adv > 0.0 {
        let critic = bundle.critic.clone();
        for (real, fake, dp, adam) in
            [(h, &fake_h, &mut bundle.d_h, &mut opt.d_h), (s, &fake_s, &mut bundle.d_s, &mut opt.d_s)]
        {
            let mut grad = vec![0.0f32; dp.len()];
            let (sr, cr) = critic.forward(dp, real);
            let (sf, cf) = critic.forward(dp, fake);
            out.d += 0.5 * (lsgan_value(&sr, 1.0) + lsgan_value(&sf, 0.0)) as f64;
            critic.backward(dp, cr, &lsgan_grad(&sr, 1.0, 0.5), Some(&mut grad));
            critic.backward(dp, cf, &lsgan_grad(&sf, 0.0, 0.5), Some(&mut grad));
            adam.step(dp, &grad);
        }
    }
    out
}

/// Trains both translation directions against a frozen classifier.
///
/// When `checkpoint_dir` is given, the bundle is written after every epoch as
/// `epoch_<k>.ckpt`. The classifier checksum is re-verified after each epoch
/// and training aborts if it has changed.
pub fn train_counterfactual_gan(
    healthy: &[&Image],
    sick: &[&Image],
    classifier: &BinaryClassifier,
    config: &GanConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<CounterfactualBundle> {
    if healthy.is_empty() || sick.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut bundle = CounterfactualBundle::initialize(classifier, config)?;
    let side = config.generator.side;
    if let Some(bad) = healthy.iter().chain(sick).find(|i| i.side() != side) {
        return Err(Error::Shape { expected: format!("{side}x{side} images"), got: format!("{0}x{0}", bad.side()) });
    }
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let probe_h = &healthy[..healthy.len().min(config.probe_size.max(1))];
    let probe_s = &sick[..sick.len().min(config.probe_size.max(1))];

    let adam = |n: usize, lr: f64| Adam::new(n, lr, config.beta1, 0.999, 0.0);
    let mut opt = Optimisers {
        g_sh: adam(bundle.g_sh.len(), config.lr_generator),
        g_hs: adam(bundle.g_hs.len(), config.lr_generator),
        d_h: adam(bundle.d_h.len(), config.lr_critic),
        d_s: adam(bundle.d_s.len(), config.lr_critic),
    };
    let b = config.batch_size;
    let steps = if config.steps_per_epoch > 0 {
        config.steps_per_epoch
    } else {
        healthy.len().max(sick.len()).div_ceil(b)
    };

    bundle.history.push(GanEpochLog {
        epoch: 0,
        g_total: 0.0,
        g_adv: 0.0,
        g_cyc: 0.0,
        g_id: 0.0,
        g_cls: 0.0,
        d_loss: 0.0,
        probe: probe(&bundle, probe_h, probe_s)?,
    });

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1000 + epoch as u64));
        let mut ih: Vec<usize> = (0..healthy.len()).collect();
        let mut is: Vec<usize> = (0..sick.len()).collect();
        ih.shuffle(&mut rng);
        is.shuffle(&mut rng);
        let mut sum = StepLosses::default();
        for k in 0..steps {
            let pick = |imgs: &[&Image], order: &[usize]| -> Tensor<f32> {
                let sel: Vec<&Image> = (0..b).map(|j| imgs[order[(k * b + j) % order.len()]]).collect();
                Image::to_tensor(&sel)
            };
            let l = step(&mut bundle, &mut opt, &pick(healthy, &ih), &pick(sick, &is));
            sum.total += l.total;
            sum.adv += l.adv;
            sum.cyc += l.cyc;
            sum.id += l.id;
            sum.cls += l.cls;
            sum.d += l.d;
        }
        let all = bundle.g_sh.iter().chain(&bundle.g_hs).chain(&bundle.d_h).chain(&bundle.d_s);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("GAN parameters after epoch {epoch}")));
        }
        if classifier.checksum() != bundle.classifier_checksum {
            return Err(Error::Checksum { expected: bundle.classifier_checksum.clone(), actual: classifier.checksum() });
        }
        bundle.verify_classifier()?;
        let n = steps as f64;
        bundle.history.push(GanEpochLog {
            epoch,
            g_total: sum.total / n,
            g_adv: sum.adv / n,
            g_cyc: sum.cyc / n,
            g_id: sum.id / n,
            g_cls: sum.cls / n,
            d_loss: sum.d / n,
            probe: probe(&bundle, probe_h, probe_s)?,
        });
        if let Some(dir) = checkpoint_dir {
            bundle.save(&dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        }
    }
    Ok(bundle)
}
