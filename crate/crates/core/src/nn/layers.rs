use rand::Rng;

use super::Param;
use crate::tensor::{gemm, Tensor};

/// Patch geometry shared by convolution and its transpose: an image of `channels x h x w`
/// is covered by a `grid_h x grid_w` grid of `k x k` patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PatchGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGeom {
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let grid_h = (h + 2 * pad - k) / stride + 1;
        let grid_w = (w + 2 * pad - k) / stride + 1;
        PatchGeom { channels, h, w, k, stride, pad, grid_h, grid_w }
    }

    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Copies patches of `img` into columns `[col_off, col_off + patches)` of `cols`
    /// (row-major with leading dimension `ld`).
    pub fn im2col(&self, img: &[f32], cols: &mut [f32], ld: usize, col_off: usize) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        for c in 0..self.channels {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ld + col_off..row * ld + col_off + self.patches()];
                    for gy in 0..self.grid_h {
                        let iy = gy as isize * s - p + ki as isize;
                        let out = &mut dst[gy * self.grid_w..(gy + 1) * self.grid_w];
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (gx, o) in out.iter_mut().enumerate() {
                            let ix = gx as isize * s - p + kj as isize;
                            *o = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`PatchGeom::im2col`]: accumulates columns back into `img`.
    pub fn col2im(&self, cols: &[f32], ld: usize, col_off: usize, img: &mut [f32]) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        for c in 0..self.channels {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ld + col_off..row * ld + col_off + self.patches()];
                    for gy in 0..self.grid_h {
                        let iy = gy as isize * s - p + ki as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for gx in 0..self.grid_w {
                            let ix = gx as isize * s - p + kj as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[gy * self.grid_w + gx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Param {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let value = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Param::new(shape.to_vec(), value)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: uniform_init(rng, &[out_features, in_features], in_features),
            bias: uniform_init(rng, &[out_features], in_features),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let b = x.batch();
        assert_eq!(x.row_len(), self.in_features, "linear input width");
        let mut y = vec![0.0; b * self.out_features];
        for row in y.chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            b,
            self.in_features,
            self.out_features,
            x.data(),
            false,
            &self.weight.value,
            true,
            &mut y,
            1.0,
            1.0,
        );
        Tensor::new(vec![b, self.out_features], y).expect("linear output shape")
    }

    /// Returns the input gradient; accumulates parameter gradients when `accumulate`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, accumulate: bool) -> Tensor {
        let b = x.batch();
        if accumulate {
            gemm(
                self.out_features,
                b,
                self.in_features,
                dy.data(),
                true,
                x.data(),
                false,
                &mut self.weight.grad,
                1.0,
                1.0,
            );
            for row in dy.data().chunks(self.out_features) {
                for (g, v) in self.bias.grad.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        self.input_grad(x.shape(), dy)
    }

    pub fn input_grad(&self, x_shape: &[usize], dy: &Tensor) -> Tensor {
        let b = dy.batch();
        let mut dx = vec![0.0; b * self.in_features];
        gemm(
            b,
            self.out_features,
            self.in_features,
            dy.data(),
            false,
            &self.weight.value,
            false,
            &mut dx,
            1.0,
            0.0,
        );
        Tensor::new(x_shape.to_vec(), dx).expect("linear grad shape")
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Square-kernel 2-D convolution, NCHW.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: uniform_init(rng, &[out_channels, in_channels, kernel, kernel], fan_in),
            bias: uniform_init(rng, &[out_channels], fan_in),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let g = self.geom(h, w);
        (g.grid_h, g.grid_w)
    }

    pub(crate) fn geom(&self, h: usize, w: usize) -> PatchGeom {
        PatchGeom::new(self.in_channels, h, w, self.kernel, self.stride, self.pad)
    }

    /// Returns the output and the column buffer needed by the backward pass.
    pub fn forward(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv input must be NCHW");
        assert_eq!(s[1], self.in_channels, "conv input channels");
        let (b, h, w) = (s[0], s[2], s[3]);
        let g = self.geom(h, w);
        let p = g.patches();
        let ld = b * p;
        let mut cols = vec![0.0; g.rows() * ld];
        for i in 0..b {
            g.im2col(x.row(i), &mut cols, ld, i * p);
        }
        let mut out = vec![0.0; self.out_channels * ld];
        gemm(self.out_channels, g.rows(), ld, &self.weight.value, false, &cols, false, &mut out, 1.0, 0.0);
        let mut y = vec![0.0; b * self.out_channels * p];
        for i in 0..b {
            for co in 0..self.out_channels {
                let bias = self.bias.value[co];
                let src = &out[co * ld + i * p..co * ld + (i + 1) * p];
                let dst = &mut y[(i * self.out_channels + co) * p..(i * self.out_channels + co + 1) * p];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        let y = Tensor::new(vec![b, self.out_channels, g.grid_h, g.grid_w], y).expect("conv out");
        (y, cols)
    }

    pub fn backward(&mut self, in_shape: &[usize], cols: &[f32], dy: &Tensor, accumulate: bool) -> Tensor {
        let (b, h, w) = (in_shape[0], in_shape[2], in_shape[3]);
        let g = self.geom(h, w);
        let ld = b * g.patches();
        let dy_r = channel_major(dy, self.out_channels, g.patches());
        if accumulate {
            gemm(self.out_channels, ld, g.rows(), &dy_r, false, cols, true, &mut self.weight.grad, 1.0, 1.0);
            for co in 0..self.out_channels {
                self.bias.grad[co] += dy_r[co * ld..(co + 1) * ld].iter().sum::<f32>();
            }
        }
        self.grad_from_channel_major(in_shape, &dy_r)
    }

    /// Input gradient only; parameters are not touched.
    pub fn input_grad(&self, in_shape: &[usize], dy: &Tensor) -> Tensor {
        let dy_r = channel_major(dy, self.out_channels, dy.shape()[2] * dy.shape()[3]);
        self.grad_from_channel_major(in_shape, &dy_r)
    }

    fn grad_from_channel_major(&self, in_shape: &[usize], dy_r: &[f32]) -> Tensor {
        let (b, h, w) = (in_shape[0], in_shape[2], in_shape[3]);
        let g = self.geom(h, w);
        let p = g.patches();
        let ld = b * p;
        let mut dcols = vec![0.0; g.rows() * ld];
        gemm(g.rows(), self.out_channels, ld, &self.weight.value, true, dy_r, false, &mut dcols, 1.0, 0.0);
        let mut dx = Tensor::zeros(in_shape);
        for i in 0..b {
            g.col2im(&dcols, ld, i * p, dx.row_mut(i));
        }
        dx
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`] in its data argument). Weight layout is
/// `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = out_channels * kernel * kernel;
        ConvTranspose2d {
            weight: uniform_init(rng, &[in_channels, out_channels, kernel, kernel], fan_in),
            bias: uniform_init(rng, &[out_channels], fan_in),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.kernel - 2 * self.pad,
            (w - 1) * self.stride + self.kernel - 2 * self.pad,
        )
    }

    fn geom(&self, h: usize, w: usize) -> PatchGeom {
        let (oh, ow) = self.output_size(h, w);
        let g = PatchGeom::new(self.out_channels, oh, ow, self.kernel, self.stride, self.pad);
        debug_assert_eq!((g.grid_h, g.grid_w), (h, w));
        g
    }

    /// Returns the output and the channel-major input needed by the backward pass.
    pub fn forward(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        let s = x.shape();
        assert_eq!(s.len(), 4, "transposed conv input must be NCHW");
        assert_eq!(s[1], self.in_channels, "transposed conv input channels");
        let (b, h, w) = (s[0], s[2], s[3]);
        let g = self.geom(h, w);
        let p = h * w;
        let ld = b * p;
        let x_r = channel_major(x, self.in_channels, p);
        let mut cols = vec![0.0; g.rows() * ld];
        gemm(g.rows(), self.in_channels, ld, &self.weight.value, true, &x_r, false, &mut cols, 1.0, 0.0);
        let mut y = Tensor::zeros(&[b, self.out_channels, g.h, g.w]);
        let plane = g.h * g.w;
        for i in 0..b {
            let img = y.row_mut(i);
            for (co, chunk) in img.chunks_mut(plane).enumerate() {
                chunk.fill(self.bias.value[co]);
            }
            g.col2im(&cols, ld, i * p, img);
        }
        (y, x_r)
    }

    pub fn backward(&mut self, in_shape: &[usize], x_r: &[f32], dy: &Tensor, accumulate: bool) -> Tensor {
        let (b, h, w) = (in_shape[0], in_shape[2], in_shape[3]);
        let g = self.geom(h, w);
        let ld = b * h * w;
        let dcols = self.dy_columns(&g, b, dy);
        if accumulate {
            gemm(self.in_channels, ld, g.rows(), x_r, false, &dcols, true, &mut self.weight.grad, 1.0, 1.0);
            let plane = g.h * g.w;
            for i in 0..b {
                for (co, chunk) in dy.row(i).chunks(plane).enumerate() {
                    self.bias.grad[co] += chunk.iter().sum::<f32>();
                }
            }
        }
        self.grad_from_columns(in_shape, &dcols)
    }

    /// Input gradient only; parameters are not touched.
    pub fn input_grad(&self, in_shape: &[usize], dy: &Tensor) -> Tensor {
        let g = self.geom(in_shape[2], in_shape[3]);
        let dcols = self.dy_columns(&g, in_shape[0], dy);
        self.grad_from_columns(in_shape, &dcols)
    }

    fn dy_columns(&self, g: &PatchGeom, b: usize, dy: &Tensor) -> Vec<f32> {
        let p = g.patches();
        let ld = b * p;
        let mut dcols = vec![0.0; g.rows() * ld];
        for i in 0..b {
            g.im2col(dy.row(i), &mut dcols, ld, i * p);
        }
        dcols
    }

    fn grad_from_columns(&self, in_shape: &[usize], dcols: &[f32]) -> Tensor {
        let (b, h, w) = (in_shape[0], in_shape[2], in_shape[3]);
        let g = self.geom(h, w);
        let p = h * w;
        let ld = b * p;
        let mut dx_r = vec![0.0; self.in_channels * ld];
        gemm(self.in_channels, g.rows(), ld, &self.weight.value, false, dcols, false, &mut dx_r, 1.0, 0.0);
        let mut dx = Tensor::zeros(in_shape);
        for i in 0..b {
            let row = dx.row_mut(i);
            for c in 0..self.in_channels {
                row[c * p..(c + 1) * p].copy_from_slice(&dx_r[c * ld + i * p..c * ld + (i + 1) * p]);
            }
        }
        dx
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// `[B, C, P]` -> `[C, B * P]`.
fn channel_major(x: &Tensor, channels: usize, p: usize) -> Vec<f32> {
    let b = x.batch();
    let ld = b * p;
    let mut out = vec![0.0; channels * ld];
    for i in 0..b {
        let row = x.row(i);
        for c in 0..channels {
            out[c * ld + i * p..c * ld + (i + 1) * p].copy_from_slice(&row[c * p..(c + 1) * p]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, k, s, p) in [(7, 3, 2, 1), (8, 4, 2, 1), (28, 4, 2, 1), (5, 3, 1, 0)] {
            let g = PatchGeom::new(2, h, h, k, s, p);
            let img = rand_tensor(&mut rng, &[2 * h * h]);
            let cols = rand_tensor(&mut rng, &[g.rows() * g.patches()]);
            let mut a = vec![0.0; g.rows() * g.patches()];
            g.im2col(img.data(), &mut a, g.patches(), 0);
            let mut back = vec![0.0; 2 * h * h];
            g.col2im(cols.data(), g.patches(), 0, &mut back);
            let lhs = dot(&a, cols.data());
            let rhs = dot(img.data(), &back);
            assert!((lhs - rhs).abs() < 1e-3 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::new(2, 3, 4, 2, 1, &mut rng);
        let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
        let (y, _) = conv.forward(&x);
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        let wv = &conv.weight.value;
        for b in 0..2 {
            for co in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut s = conv.bias.value[co];
                        for ci in 0..2 {
                            for ki in 0..4 {
                                for kj in 0..4 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if (0..6).contains(&iy) && (0..6).contains(&ix) {
                                        s += wv[((co * 2 + ci) * 4 + ki) * 4 + kj]
                                            * x.data()[((b * 2 + ci) * 6 + iy as usize) * 6 + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((b * 3 + co) * 3 + oy) * 3 + ox];
                        assert!((got - s).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv_without_bias() {
        // <conv(x), y> == <x, convT(y)> when the two layers share a weight tensor.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = Conv2d::new(3, 4, 4, 2, 1, &mut rng);
        conv.bias.value.fill(0.0);
        let mut convt = ConvTranspose2d::new(4, 3, 4, 2, 1, &mut rng);
        convt.bias.value.fill(0.0);
        // conv weight [out=4, in=3, k, k] is exactly convT weight [in=4, out=3, k, k].
        convt.weight.value = conv.weight.value.clone();
        let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
        let y = rand_tensor(&mut rng, &[2, 4, 4, 4]);
        let (cx, _) = conv.forward(&x);
        let (ty, _) = convt.forward(&y);
        assert_eq!(ty.shape(), x.shape());
        let lhs = dot(cx.data(), y.data());
        let rhs = dot(x.data(), ty.data());
        assert!((lhs - rhs).abs() < 1e-3 * (1.0 + lhs.abs()));
    }
}
