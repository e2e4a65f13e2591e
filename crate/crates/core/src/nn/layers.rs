use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

/// 2-D convolution over NCHW tensors. `weight`/`bias` are offsets into the
/// owning network's flat parameter buffer; the weight is stored as
/// `[cout, cin·k·k]`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Conv2d {
    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], h: usize, w: usize, col: &mut [T]) {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let k = self.kernel;
        let plane = ho * wo;
        for c in 0..self.cin {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= w as isize { T::zero() } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let k = self.kernel;
        let plane = ho * wo;
        for c in 0..self.cin {
            let dst = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] = drow[ix as usize] + src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let plane = ho * wo;
        let weight = &params[self.weight..self.weight + self.cout * self.patch_len()];
        let bias = &params[self.bias..self.bias + self.cout];
        let mut out = Tensor::zeros([n, self.cout, ho, wo]);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); self.patch_len() * plane] };
        for i in 0..n {
            let y = out.item_mut(i);
            for (o, b) in bias.iter().enumerate() {
                y[o * plane..(o + 1) * plane].fill(*b);
            }
            let input: &[T] = if self.is_pointwise() {
                x.item(i)
            } else {
                self.im2col(x.item(i), h, w, &mut col);
                &col
            };
            T::gemm(self.cout, self.patch_len(), plane, weight, false, input, false, y, true);
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad` (if given) and returns
    /// the input gradient when `need_dx`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        x: &Tensor<T>,
        dy: &Tensor<T>,
        mut grad: Option<&mut [T]>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let [n, _, h, w] = x.shape();
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let plane = ho * wo;
        let kk = self.patch_len();
        let weight = &params[self.weight..self.weight + self.cout * kk];
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let mut col = vec![T::zero(); kk * plane];
        let mut dcol = vec![T::zero(); kk * plane];
        for i in 0..n {
            let g = dy.item(i);
            if let Some(grad) = grad.as_deref_mut() {
                let input: &[T] = if self.is_pointwise() {
                    x.item(i)
                } else {
                    self.im2col(x.item(i), h, w, &mut col);
                    &col
                };
                let (gw, gb) = grad.split_at_mut(self.bias);
                let gw = &mut gw[self.weight..self.weight + self.cout * kk];
                T::gemm(self.cout, plane, kk, g, false, input, true, gw, true);
                for (o, b) in gb[..self.cout].iter_mut().enumerate() {
                    *b = *b + g[o * plane..(o + 1) * plane].iter().copied().sum();
                }
            }
            if let Some(dx) = dx.as_mut() {
                if self.is_pointwise() {
                    T::gemm(kk, self.cout, plane, weight, true, g, false, dx.item_mut(i), true);
                } else {
                    T::gemm(kk, self.cout, plane, weight, true, g, false, &mut dcol, false);
                    self.col2im(&dcol, h, w, dx.item_mut(i));
                }
            }
        }
        dx
    }
}

/// Fully connected layer on flattened batch items; weight stored `[fout, fin]`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Linear {
    pub fin: usize,
    pub fout: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    /// Returns `[batch, fout]` row-major outputs.
    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Vec<T> {
        assert_eq!(x.item_len(), self.fin, "linear input width");
        let weight = &params[self.weight..self.weight + self.fout * self.fin];
        let bias = &params[self.bias..self.bias + self.fout];
        let mut out = Vec::with_capacity(x.batch() * self.fout);
        // Per-item products keep each output independent of batch composition.
        for i in 0..x.batch() {
            let mut y = bias.to_vec();
            T::gemm(self.fout, self.fin, 1, weight, false, x.item(i), false, &mut y, true);
            out.extend(y);
        }
        out
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        x: &Tensor<T>,
        dy: &[T],
        mut grad: Option<&mut [T]>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let weight = &params[self.weight..self.weight + self.fout * self.fin];
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        for i in 0..x.batch() {
            let g = &dy[i * self.fout..(i + 1) * self.fout];
            if let Some(grad) = grad.as_deref_mut() {
                let xi = x.item(i);
                for (o, &go) in g.iter().enumerate() {
                    let row = &mut grad[self.weight + o * self.fin..self.weight + (o + 1) * self.fin];
                    for (r, &xv) in row.iter_mut().zip(xi) {
                        *r = *r + go * xv;
                    }
                    grad[self.bias + o] = grad[self.bias + o] + go;
                }
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(self.fin, self.fout, 1, weight, true, g, false, dx.item_mut(i), true);
            }
        }
        dx
    }
}
