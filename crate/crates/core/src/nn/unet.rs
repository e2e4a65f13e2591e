use serde::{Deserialize, Serialize};

use super::{
    concat_channels, leaky_relu, leaky_relu_backward, sigmoid, split_channels, upsample2,
    upsample2_backward, Conv2d, ImageMap, ParamInit, ParamLayout, Scalar, Tensor,
};

/// How the generator turns its last feature map into an image.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorHead {
    /// `clamp(x + r, 0, 1)` with one predicted residual channel `r`.
    #[default]
    Residual,
    /// A blend mask `m` and fill value `v`: `x·(1−m) + v·m`. The mask only
    /// opens where `v` already differs from `x`, so darkening a mid-grey
    /// region from a closed mask gets almost no gradient.
    Blend,
}

/// U-Net generator topology.
///
/// The head is initialised with shrunken weights (and, for the blend head,
/// a strongly negative mask bias), so an untrained generator is close to
/// the identity map.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorArch {
    pub side: usize,
    pub base_width: usize,
    pub depth: usize,
    #[serde(default)]
    pub head: GeneratorHead,
    /// Feed row and column coordinates in `[-1, 1]` as two extra input
    /// channels, so the generator can paint at a fixed position.
    #[serde(default)]
    pub coords: bool,
    /// Blend head only.
    #[serde(default = "default_mask_bias")]
    pub mask_bias: f64,
    #[serde(default = "default_head_scale")]
    pub head_scale: f64,
}

fn default_mask_bias() -> f64 {
    -4.0
}

fn default_head_scale() -> f64 {
    0.01
}

impl GeneratorArch {
    pub fn desk(side: usize) -> Self {
        Self { side, base_width: 8, depth: 3, head: GeneratorHead::Residual, coords: true, mask_bias: default_mask_bias(), head_scale: default_head_scale() }
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth)
            .map(|i| self.base_width << i.min(self.depth.saturating_sub(1)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    arch: GeneratorArch,
    layout: ParamLayout,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    head: Conv2d,
}

pub struct UNetCache<T> {
    input: Tensor<T>,
    enc: Vec<Tensor<T>>,
    dec_in: Vec<Tensor<T>>,
    dec_out: Vec<Tensor<T>>,
    mask: Tensor<T>,
    value: Tensor<T>,
}

impl UNet {
    pub fn new(arch: GeneratorArch) -> Result<Self, String> {
        if arch.base_width == 0 {
            return Err("generator base width must be positive".into());
        }
        if arch.side == 0 || arch.side % (1 << arch.depth) != 0 {
            return Err(format!(
                "generator side {} must be a positive multiple of 2^{}",
                arch.side, arch.depth
            ));
        }
        let widths = arch.widths();
        let mut layout = ParamLayout::default();
        let cin = if arch.coords { 3 } else { 1 };
        let mut enc = vec![layout.conv("enc0", cin, widths[0], 3, 1, 1)];
        for i in 1..=arch.depth {
            enc.push(layout.conv(&format!("enc{i}"), widths[i - 1], widths[i], 3, 2, 1));
        }
        // dec[j] consumes upsample(level j+1) ++ skip(level j) and emits widths[j].
        let mut dec = Vec::new();
        for j in 0..arch.depth {
            let cin = widths[j + 1] + widths[j];
            dec.push(layout.conv(&format!("dec{j}"), cin, widths[j], 3, 1, 1));
        }
        let head_channels = match arch.head {
            GeneratorHead::Residual => 1,
            GeneratorHead::Blend => 2,
        };
        let head = layout.conv("head", widths[0], head_channels, 1, 1, 0);
        let fan_in = widths[0];
        layout.entry_mut("head.weight").unwrap().init =
            ParamInit::HeNormal { fan_in, gain: arch.head_scale };
        // bias layout is [mask, value]; only the mask channel gets the offset
        layout.entry_mut("head.bias").unwrap().init = ParamInit::Constant(0.0);
        Ok(Self { arch, layout, enc, dec, head })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn initialize<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        let mut p = self.layout.initialize(rng);
        if self.arch.head == GeneratorHead::Blend {
            p[self.head.bias] = self.arch.mask_bias as f32;
        }
        p
    }

    fn network_input<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        if !self.arch.coords {
            return x.clone();
        }
        let [n, _, h, w] = x.shape();
        let scale = |i: usize, len: usize| T::of(if len > 1 { 2.0 * i as f64 / (len - 1) as f64 - 1.0 } else { 0.0 });
        let mut grid = Vec::with_capacity(n * 2 * h * w);
        for _ in 0..n {
            grid.extend((0..h * w).map(|p| scale(p / w, h)));
            grid.extend((0..h * w).map(|p| scale(p % w, w)));
        }
        concat_channels(x, &Tensor::new([n, 2, h, w], grid))
    }
}

impl<T: Scalar> ImageMap<T> for UNet {
    type Cache = UNetCache<T>;

    fn num_params(&self) -> usize {
        self.layout.len()
    }

    fn forward(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, Self::Cache) {
        assert_eq!(x.channels(), 1, "generator expects grayscale input");
        let xin = self.network_input(x);
        let mut enc = Vec::with_capacity(self.enc.len());
        for (i, conv) in self.enc.iter().enumerate() {
            let mut h = conv.forward(params, if i == 0 { &xin } else { &enc[i - 1] });
            leaky_relu(&mut h);
            enc.push(h);
        }
        let mut dec_in = vec![Tensor::zeros([0, 0, 0, 0]); self.dec.len()];
        let mut dec_out = vec![Tensor::zeros([0, 0, 0, 0]); self.dec.len()];
        let mut cur = enc[self.arch.depth].clone();
        for j in (0..self.dec.len()).rev() {
            let cat = concat_channels(&upsample2(&cur), &enc[j]);
            let mut h = self.dec[j].forward(params, &cat);
            leaky_relu(&mut h);
            dec_in[j] = cat;
            dec_out[j] = h.clone();
            cur = h;
        }
        let head = self.head.forward(params, &cur);
        let [n, _, hh, ww] = x.shape();
        let plane = hh * ww;
        let mut out = Tensor::zeros([n, 1, hh, ww]);
        let (mask, value) = match self.arch.head {
            GeneratorHead::Residual => {
                for (o, (&xi, &r)) in out.data_mut().iter_mut().zip(x.data().iter().zip(head.data())) {
                    *o = (xi + r).max(T::zero()).min(T::one());
                }
                (Tensor::zeros([0, 0, 0, 0]), head)
            }
            GeneratorHead::Blend => {
                let mut mask = Tensor::zeros([n, 1, hh, ww]);
                let mut value = Tensor::zeros([n, 1, hh, ww]);
                for i in 0..n {
                    let hi = head.item(i);
                    let xi = x.item(i);
                    for p in 0..plane {
                        let m = sigmoid(hi[p]);
                        let v = sigmoid(hi[plane + p]);
                        mask.item_mut(i)[p] = m;
                        value.item_mut(i)[p] = v;
                        out.item_mut(i)[p] = xi[p] * (T::one() - m) + v * m;
                    }
                }
                (mask, value)
            }
        };
        let cache = UNetCache { input: x.clone(), enc, dec_in, dec_out, mask, value };
        (out, cache)
    }

    fn backward(
        &self,
        params: &[T],
        cache: Self::Cache,
        dy: &Tensor<T>,
        mut grad: Option<&mut [T]>,
    ) -> Tensor<T> {
        let UNetCache { input, mut enc, dec_in, dec_out, mask, value } = cache;
        let [n, _, hh, ww] = input.shape();
        let plane = hh * ww;
        let mut dx = Tensor::zeros(input.shape());
        let dhead = match self.arch.head {
            GeneratorHead::Residual => {
                // `value` holds the raw residual; the clamp passes gradient
                // only strictly inside the unit interval
                let mut dhead = Tensor::zeros([n, 1, hh, ww]);
                for (k, (&x, &r)) in input.data().iter().zip(value.data()).enumerate() {
                    let y = x + r;
                    let g = if y > T::zero() && y < T::one() { dy.data()[k] } else { T::zero() };
                    dx.data_mut()[k] = g;
                    dhead.data_mut()[k] = g;
                }
                dhead
            }
            GeneratorHead::Blend => {
                let mut dhead = Tensor::zeros([n, 2, hh, ww]);
                for i in 0..n {
                    for p in 0..plane {
                        let g = dy.item(i)[p];
                        let (m, v, x) = (mask.item(i)[p], value.item(i)[p], input.item(i)[p]);
                        dx.item_mut(i)[p] = g * (T::one() - m);
                        dhead.item_mut(i)[p] = g * (v - x) * m * (T::one() - m);
                        dhead.item_mut(i)[plane + p] = g * m * v * (T::one() - v);
                    }
                }
                dhead
            }
        };
        let top = if dec_out.is_empty() { &enc[0] } else { &dec_out[0] };
        let mut d = self.head.backward(params, top, &dhead, grad.as_deref_mut(), true).unwrap();
        let mut denc: Vec<Option<Tensor<T>>> = vec![None; enc.len()];
        for j in 0..self.dec.len() {
            leaky_relu_backward(&mut d, &dec_out[j]);
            let dcat = self.dec[j].backward(params, &dec_in[j], &d, grad.as_deref_mut(), true).unwrap();
            let up_channels = dec_in[j].channels() - enc[j].channels();
            let (dup, dskip) = split_channels(&dcat, up_channels);
            accumulate(&mut denc[j], dskip);
            d = upsample2_backward(&dup);
        }
        accumulate(&mut denc[self.arch.depth], d);
        let xin = self.network_input(&input);
        for i in (0..self.enc.len()).rev() {
            let mut g = denc[i].take().expect("every encoder level receives gradient");
            let out = enc.pop().unwrap();
            leaky_relu_backward(&mut g, &out);
            let src = if i == 0 { &xin } else { &enc[i - 1] };
            let din = self.enc[i].backward(params, src, &g, grad.as_deref_mut(), true).unwrap();
            if i == 0 {
                dx.add_assign(&split_channels(&din, 1).0);
            } else {
                accumulate(&mut denc[i - 1], din);
            }
        }
        dx
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
