use serde::{Deserialize, Serialize};

use super::{leaky_relu, leaky_relu_backward, Conv2d, ImageMap, ParamLayout, Scalar, Tensor};

/// Patch discriminator: stride-2 convs followed by a 1×1 scoring conv, one
/// realness score per output patch.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CriticArch {
    pub side: usize,
    pub widths: Vec<usize>,
}

impl CriticArch {
    pub fn desk(side: usize) -> Self {
        Self { side, widths: vec![8, 16, 32] }
    }
}

#[derive(Clone, Debug)]
pub struct Critic {
    arch: CriticArch,
    layout: ParamLayout,
    convs: Vec<Conv2d>,
    head: Conv2d,
}

pub struct CriticCache<T> {
    acts: Vec<Tensor<T>>,
}

impl Critic {
    pub fn new(arch: CriticArch) -> Result<Self, String> {
        if arch.widths.is_empty() {
            return Err("critic needs at least one conv width".into());
        }
        let mut layout = ParamLayout::default();
        let (mut channels, mut size) = (1, arch.side);
        let mut convs = Vec::new();
        for (i, &w) in arch.widths.iter().enumerate() {
            if size < 2 {
                return Err(format!("critic input side {} too small", arch.side));
            }
            let conv = layout.conv(&format!("conv{i}"), channels, w, 3, 2, 1);
            size = conv.out_size(size);
            convs.push(conv);
            channels = w;
        }
        let head = layout.conv("head", channels, 1, 1, 1, 0);
        Ok(Self { arch, layout, convs, head })
    }

    pub fn arch(&self) -> &CriticArch {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }
}

impl<T: Scalar> ImageMap<T> for Critic {
    type Cache = CriticCache<T>;

    fn num_params(&self) -> usize {
        self.layout.len()
    }

    fn forward(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, Self::Cache) {
        let mut acts = vec![x.clone()];
        for conv in &self.convs {
            let mut h = conv.forward(params, acts.last().unwrap());
            leaky_relu(&mut h);
            acts.push(h);
        }
        let scores = self.head.forward(params, acts.last().unwrap());
        (scores, CriticCache { acts })
    }

    fn backward(
        &self,
        params: &[T],
        cache: Self::Cache,
        dy: &Tensor<T>,
        mut grad: Option<&mut [T]>,
    ) -> Tensor<T> {
        let mut acts = cache.acts;
        let mut out = acts.pop().unwrap();
        let mut d = self.head.backward(params, &out, dy, grad.as_deref_mut(), true).unwrap();
        for conv in self.convs.iter().rev() {
            leaky_relu_backward(&mut d, &out);
            let input = acts.pop().unwrap();
            d = conv.backward(params, &input, &d, grad.as_deref_mut(), true).unwrap();
            out = input;
        }
        d
    }
}
