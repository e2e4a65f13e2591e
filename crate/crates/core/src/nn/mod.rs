//! Minimal CPU neural-network toolkit: NCHW tensors, im2col convolutions,
//! hand-written backward passes and Adam.
//!
//! Every layer is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks. Parameters of
//! a network live in one flat buffer described by a [`ParamLayout`]; layers
//! only hold offsets into it.

mod classifier_net;
mod critic;
mod layers;
mod unet;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use classifier_net::{ClassifierArch, ClassifierCache, ClassifierNet, Pooling};
pub use critic::{Critic, CriticArch, CriticCache};
pub use layers::{Conv2d, Linear};
pub use unet::{GeneratorArch, GeneratorHead, UNet, UNetCache};

/// Negative slope used by every leaky ReLU in the toolkit.
pub const LEAK: f64 = 0.1;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + 'static
{
    /// `c (+)= op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of
    /// shape `k×n`, all row-major. `a_t`/`b_t` mark operands stored
    /// transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe dense
                // row-major (or transposed row-major) storage.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense `[batch, channels, height, width]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::new(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self, i: usize) -> &[T] {
        let len = self.item_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    /// Selects batch items by index, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let len = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        Self::new([indices.len(), self.shape[1], self.shape[2], self.shape[3]], data)
    }

    /// Concatenates along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Self {
        let first = parts.first().expect("at least one tensor").shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            assert_eq!(p.shape[1..], first[1..], "stack shape mismatch");
            data.extend_from_slice(&p.data);
            n += p.shape[0];
        }
        Self::new([n, first[1], first[2], first[3]], data)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

pub fn leaky_relu<T: Scalar>(x: &mut Tensor<T>) {
    let leak = T::of(LEAK);
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = *v * leak;
        }
    }
}

/// Multiplies `grad` in place by the leaky-ReLU derivative, read off the
/// activation output (sign is preserved by the activation).
pub fn leaky_relu_backward<T: Scalar>(grad: &mut Tensor<T>, out: &Tensor<T>) {
    let leak = T::of(LEAK);
    for (g, &y) in grad.data_mut().iter_mut().zip(out.data()) {
        if y < T::zero() {
            *g = *g * leak;
        }
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    let src = dy.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h2 * w2..(plane + 1) * h2 * w2];
        let d = &mut dst[plane * h * w..(plane + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                d[(y / 2) * w + xx / 2] = d[(y / 2) * w + xx / 2] + s[y * w2 + xx];
            }
        }
    }
    out
}

/// Channel concatenation `[a; b]`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::new([n, ca + cb, h, w], data)
}

/// Inverse of [`concat_channels`] for gradients: splits after `first` channels.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * (c - first) * plane);
    for i in 0..n {
        let item = x.item(i);
        a.extend_from_slice(&item[..first * plane]);
        b.extend_from_slice(&item[first * plane..]);
    }
    (
        Tensor::new([n, first, h, w], a),
        Tensor::new([n, c - first, h, w], b),
    )
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum ParamInit {
    /// He-normal scaled by `gain`, using the given fan-in.
    HeNormal { fan_in: usize, gain: f64 },
    Constant(f64),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub init: ParamInit,
}

/// Names, shapes and offsets of every parameter tensor in a flat buffer.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, init: ParamInit) -> usize {
        let len = shape.iter().product();
        let offset = self.total;
        self.entries.push(ParamEntry { name: name.into(), shape, offset, len, init });
        self.total += len;
        offset
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Conv2d {
        let fan_in = cin * kernel * kernel;
        let weight = self.push(
            format!("{name}.weight"),
            vec![cout, cin, kernel, kernel],
            ParamInit::HeNormal { fan_in, gain: 1.0 },
        );
        let bias = self.push(format!("{name}.bias"), vec![cout], ParamInit::Constant(0.0));
        Conv2d { cin, cout, kernel, stride, padding, weight, bias }
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Linear {
        let weight = self.push(
            format!("{name}.weight"),
            vec![fout, fin],
            ParamInit::HeNormal { fan_in: fin, gain: 1.0 },
        );
        let bias = self.push(format!("{name}.bias"), vec![fout], ParamInit::Constant(0.0));
        Linear { fin, fout, weight, bias }
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    /// Draws initial values in layout order; deterministic given the rng state.
    pub fn initialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        let mut params = vec![0.0f32; self.total];
        for e in &self.entries {
            let slot = &mut params[e.offset..e.offset + e.len];
            match e.init {
                ParamInit::HeNormal { fan_in, gain } => {
                    let std = gain * (2.0 / ((1.0 + LEAK * LEAK) * fan_in as f64)).sqrt();
                    for v in slot {
                        let z: f64 = StandardNormal.sample(rng);
                        *v = (z * std) as f32;
                    }
                }
                ParamInit::Constant(c) => slot.fill(c as f32),
            }
        }
        params
    }
}

/// A differentiable image→image map (generators, patch critics).
pub trait ImageMap<T: Scalar> {
    type Cache;

    fn num_params(&self) -> usize;

    fn forward(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, Self::Cache);

    /// Backpropagates `dy`. Parameter gradients are accumulated into `grad`
    /// when given; the gradient with respect to the input is returned.
    fn backward(
        &self,
        params: &[T],
        cache: Self::Cache,
        dy: &Tensor<T>,
        grad: Option<&mut [T]>,
    ) -> Tensor<T>;

    fn apply(&self, params: &[T], x: &Tensor<T>) -> Tensor<T> {
        self.forward(params, x).0
    }
}

/// A differentiable image→logit map (disease classifiers, artifact detectors).
pub trait LogitModel<T: Scalar> {
    type Cache;

    fn num_params(&self) -> usize;

    fn forward(&self, params: &[T], x: &Tensor<T>) -> (Vec<T>, Self::Cache);

    /// Backpropagates per-sample logit gradients. Parameter gradients are
    /// accumulated into `grad` when given; the input gradient is computed
    /// only when `need_input_grad` is set.
    fn backward(
        &self,
        params: &[T],
        cache: Self::Cache,
        dlogits: &[T],
        grad: Option<&mut [T]>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>>;

    fn logits(&self, params: &[T], x: &Tensor<T>) -> Vec<T> {
        self.forward(params, x).0
    }
}

/// Adam with optional coupled L2 weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = (self.lr * bc2.sqrt() / bc1) as f32;
        let eps = (self.eps * bc2.sqrt()) as f32;
        let wd = self.weight_decay as f32;
        for i in 0..params.len() {
            let g = grad[i] + wd * params[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

pub fn cast_params<T: Scalar>(params: &[f32]) -> Vec<T> {
    params.iter().map(|&v| T::of(v as f64)).collect()
}
