use crate::classifier::bce_with_logit;
use crate::nn::{sigmoid, ImageMap, LogitModel, Scalar, Tensor};

/// Probability clamp used by the classifier-consistency cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean absolute difference and its gradient with respect to `a`.
pub fn l1_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> (T, Tensor<T>) {
    assert_eq!(a.shape(), b.shape(), "l1 operands differ in shape");
    let n = T::of(a.data().len() as f64);
    let mut grad = Tensor::zeros(a.shape());
    let mut sum = T::zero();
    for ((g, &p), &q) in grad.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        let d = p - q;
        sum = sum + d.abs();
        *g = if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        };
    }
    (sum / n, grad)
}

/// Mean L1 distance between `g_bwd(g_fwd(x))` and `x`.
pub fn cycle_loss<T: Scalar, F: ImageMap<T>, B: ImageMap<T>>(
    g_fwd: &F,
    p_fwd: &[T],
    g_bwd: &B,
    p_bwd: &[T],
    x: &Tensor<T>,
) -> T {
    let rec = g_bwd.apply(p_bwd, &g_fwd.apply(p_fwd, x));
    l1_loss(&rec, x).0
}

/// Mean L1 distance between `g(x)` and `x` for `x` already in `g`'s target domain.
pub fn identity_loss<T: Scalar, G: ImageMap<T>>(g: &G, params: &[T], x: &Tensor<T>) -> T {
    l1_loss(&g.apply(params, x), x).0
}

/// Binary cross-entropy of `f(x_cf)` against `target` on the logit,
/// averaged over the batch, with the gradient with respect to `x_cf`. Each
/// sample's loss is floored at `−ln(1 − PROB_CLAMP)`; below the floor the
/// sample contributes no gradient. A confidently wrong sample keeps its full
/// gradient. `f` is only ever differentiated with respect to its input; no
/// parameter gradient is formed.
pub fn classifier_consistency_loss<T: Scalar, F: LogitModel<T>>(
    f: &F,
    f_params: &[T],
    x_cf: &Tensor<T>,
    target: T,
) -> (T, Tensor<T>) {
    let (logits, cache) = f.forward(f_params, x_cf);
    let n = T::of(logits.len() as f64);
    let floor = T::of(-(-PROB_CLAMP).ln_1p());
    let mut loss = T::zero();
    let mut dz = Vec::with_capacity(logits.len());
    for &z in &logits {
        let l = bce_with_logit(z, target);
        if l > floor {
            loss = loss + l;
            dz.push((sigmoid(z) - target) / n);
        } else {
            loss = loss + floor;
            dz.push(T::zero());
        }
    }
    let dx = f.backward(f_params, cache, &dz, None, true).expect("input gradient requested");
    (loss / n, dx)
}

/// Least-squares GAN losses from critic scores:
/// `(½·mean[(D(real)−1)²] + ½·mean[D(fake)²], mean[(D(fake)−1)²])`.
pub fn adversarial_loss<T: Scalar>(real: &[T], fake: &[T]) -> (T, T) {
    let mean = |v: &[T], f: &dyn Fn(T) -> T| v.iter().map(|&s| f(s)).sum::<T>() / T::of(v.len() as f64);
    let half = T::of(0.5);
    let d = half * mean(real, &|s| (s - T::one()).powi(2)) + half * mean(fake, &|s| s * s);
    let g = mean(fake, &|s| (s - T::one()).powi(2));
    (d, g)
}

/// Gradient of `mean[(s − target)²]` with respect to the scores.
pub fn lsgan_grad<T: Scalar>(scores: &Tensor<T>, target: T, scale: T) -> Tensor<T> {
    let n = T::of(scores.data().len() as f64);
    Tensor::new(
        scores.shape(),
        scores.data().iter().map(|&s| scale * T::of(2.0) * (s - target) / n).collect(),
    )
}

pub fn lsgan_value<T: Scalar>(scores: &Tensor<T>, target: T) -> T {
    let n = T::of(scores.data().len() as f64);
    scores.data().iter().map(|&s| (s - target).powi(2)).sum::<T>() / n
}
