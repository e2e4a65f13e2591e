use serde::{Deserialize, Serialize};

use super::{
    leaky_relu, leaky_relu_backward, Conv2d, Linear, LogitModel, ParamLayout, Scalar, Tensor,
};

/// How the last conv feature map reaches the linear head.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Flatten,
    /// Per-channel spatial mean.
    GlobalAverage,
}

/// Topology of a binary image classifier.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierArch {
    /// Stride-2 3×3 conv stack (one layer per width) then a linear head on
    /// the flattened feature map.
    Cnn {
        side: usize,
        widths: Vec<usize>,
        #[serde(default)]
        pooling: Pooling,
    },
    /// Logistic regression on raw pixels.
    Linear { side: usize },
}

impl ClassifierArch {
    /// Desk-scale default: four conv layers, ~100k parameters at 64×64.
    pub fn desk(side: usize) -> Self {
        ClassifierArch::Cnn { side, widths: vec![16, 32, 64, 128], pooling: Pooling::Flatten }
    }

    pub fn side(&self) -> usize {
        match self {
            ClassifierArch::Cnn { side, .. } | ClassifierArch::Linear { side } => *side,
        }
    }

    pub fn tag(&self) -> String {
        match self {
            ClassifierArch::Cnn { widths, pooling, .. } => format!(
                "cnn-{}{}",
                widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-"),
                if *pooling == Pooling::GlobalAverage { "-gap" } else { "" }
            ),
            ClassifierArch::Linear { .. } => "linear".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierNet {
    arch: ClassifierArch,
    layout: ParamLayout,
    convs: Vec<Conv2d>,
    pooling: Pooling,
    head: Linear,
}

/// Activations kept for the backward pass: the input followed by each conv
/// layer's post-activation output.
pub struct ClassifierCache<T> {
    acts: Vec<Tensor<T>>,
}

impl ClassifierNet {
    pub fn new(arch: ClassifierArch) -> Result<Self, String> {
        let side = arch.side();
        let mut layout = ParamLayout::default();
        let mut convs = Vec::new();
        let (mut channels, mut size) = (1, side);
        let mut pooling = Pooling::Flatten;
        if let ClassifierArch::Cnn { widths, pooling: p, .. } = &arch {
            pooling = *p;
            if widths.is_empty() {
                return Err("cnn classifier needs at least one conv width".into());
            }
            for (i, &w) in widths.iter().enumerate() {
                if size < 2 {
                    return Err(format!("image side {side} too small for {} conv layers", widths.len()));
                }
                let conv = layout.conv(&format!("conv{i}"), channels, w, 3, 2, 1);
                size = conv.out_size(size);
                convs.push(conv);
                channels = w;
            }
        }
        if side == 0 {
            return Err("image side must be positive".into());
        }
        let fin = match pooling {
            Pooling::Flatten => channels * size * size,
            Pooling::GlobalAverage => channels,
        };
        let head = layout.linear("head", fin, 1);
        Ok(Self { arch, layout, convs, pooling, head })
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }
}

impl<T: Scalar> LogitModel<T> for ClassifierNet {
    type Cache = ClassifierCache<T>;

    fn num_params(&self) -> usize {
        self.layout.len()
    }

    fn forward(&self, params: &[T], x: &Tensor<T>) -> (Vec<T>, Self::Cache) {
        let mut acts = vec![x.clone()];
        for conv in &self.convs {
            let mut h = conv.forward(params, acts.last().unwrap());
            leaky_relu(&mut h);
            acts.push(h);
        }
        let feats = acts.last().unwrap();
        let logits = match self.pooling {
            Pooling::Flatten => self.head.forward(params, feats),
            Pooling::GlobalAverage => self.head.forward(params, &global_average(feats)),
        };
        (logits, ClassifierCache { acts })
    }

    fn backward(
        &self,
        params: &[T],
        cache: Self::Cache,
        dlogits: &[T],
        mut grad: Option<&mut [T]>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let mut acts = cache.acts;
        let features = acts.pop().unwrap();
        let need_head_dx = need_input_grad || !self.convs.is_empty();
        let mut d = match self.pooling {
            Pooling::Flatten => self.head.backward(params, &features, dlogits, grad.as_deref_mut(), need_head_dx)?,
            Pooling::GlobalAverage => {
                let pooled = global_average(&features);
                let dp = self.head.backward(params, &pooled, dlogits, grad.as_deref_mut(), need_head_dx)?;
                global_average_backward(&dp, features.shape())
            }
        };
        let mut out = features;
        for (i, conv) in self.convs.iter().enumerate().rev() {
            leaky_relu_backward(&mut d, &out);
            let input = acts.pop().unwrap();
            let need_dx = i > 0 || need_input_grad;
            match conv.backward(params, &input, &d, grad.as_deref_mut(), need_dx) {
                Some(dx) => d = dx,
                None => return None,
            }
            out = input;
        }
        Some(d)
    }
}

fn global_average<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let scale = T::of(1.0 / plane as f64);
    let mut out = Vec::with_capacity(n * c);
    for chunk in x.data().chunks(plane) {
        out.push(chunk.iter().copied().sum::<T>() * scale);
    }
    Tensor::new([n, c, 1, 1], out)
}

fn global_average_backward<T: Scalar>(dp: &Tensor<T>, shape: [usize; 4]) -> Tensor<T> {
    let plane = shape[2] * shape[3];
    let scale = T::of(1.0 / plane as f64);
    let mut out = Vec::with_capacity(shape.iter().product());
    for &g in dp.data() {
        out.extend(std::iter::repeat_n(g * scale, plane));
    }
    Tensor::new(shape, out)
}
