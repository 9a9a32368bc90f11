//! Convolution, pooling and dense layers with hand-written backward passes.
//!
//! Every layer processes one sample at a time. Convolutions lower to an
//! im2col buffer followed by a single GEMM per group.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use crate::tensor::Tensor3;

/// Declarative layer description used by the backbone registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
}

impl LayerSpec {
    pub const fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            groups: 1,
        }
    }

    /// Output shape for a given input shape, or `None` if the layer does not fit.
    pub fn output_shape(&self, [c, h, w]: [usize; 3]) -> Option<[usize; 3]> {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                groups,
            } => {
                if groups == 0 || c % groups != 0 || out_channels % groups != 0 || stride == 0 {
                    return None;
                }
                let hp = h + 2 * padding;
                let wp = w + 2 * padding;
                if hp < kernel || wp < kernel {
                    return None;
                }
                Some([out_channels, (hp - kernel) / stride + 1, (wp - kernel) / stride + 1])
            }
            LayerSpec::Relu => Some([c, h, w]),
            LayerSpec::MaxPool { kernel, stride } => {
                if h < kernel || w < kernel || stride == 0 {
                    return None;
                }
                Some([c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::GlobalAvgPool => Some([c, 1, 1]),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    GlobalAvgPool,
}

#[derive(Debug)]
pub(crate) enum Cache {
    Conv { cols: Vec<f32>, in_shape: [usize; 3] },
    Relu { active: Vec<bool> },
    MaxPool { argmax: Vec<u32>, in_shape: [usize; 3] },
    GlobalAvgPool { in_shape: [usize; 3] },
}

impl Conv2d {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor3, ho: usize, wo: usize) -> Vec<f32> {
        let k = self.kernel;
        let n = ho * wo;
        let mut cols = vec![0.0f32; x.channels * k * k * n];
        for c in 0..x.channels {
            let plane = x.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let row = &mut cols[r * n..(r + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < x.width {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn forward(&self, params: &ParamStore, x: &Tensor3) -> (Tensor3, Vec<f32>) {
        let (ho, wo) = self.out_hw(x.height, x.width);
        let n = ho * wo;
        let cols = self.im2col(x, ho, wo);
        let weight = params.data(self.weight);
        let bias = params.data(self.bias);
        let cpg = self.in_channels / self.groups;
        let opg = self.out_channels / self.groups;
        let rg = cpg * self.kernel * self.kernel;
        let mut out = vec![0.0f32; self.out_channels * n];
        for g in 0..self.groups {
            let w = ArrayView2::from_shape((opg, rg), &weight[g * opg * rg..(g + 1) * opg * rg]).expect("weight block");
            let col = ArrayView2::from_shape((rg, n), &cols[g * rg * n..(g + 1) * rg * n]).expect("column block");
            let mut o =
                ArrayViewMut2::from_shape((opg, n), &mut out[g * opg * n..(g + 1) * opg * n]).expect("output block");
            general_mat_mul(1.0, &w, &col, 0.0, &mut o);
        }
        for (row, &b) in out.chunks_exact_mut(n).zip(bias) {
            row.iter_mut().for_each(|v| *v += b);
        }
        (Tensor3::from_vec(self.out_channels, ho, wo, out), cols)
    }

    fn backward(
        &self,
        params: &ParamStore,
        cols: &[f32],
        in_shape: [usize; 3],
        dout: &Tensor3,
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<Tensor3> {
        let (ho, wo) = (dout.height, dout.width);
        let n = ho * wo;
        let cpg = self.in_channels / self.groups;
        let opg = self.out_channels / self.groups;
        let k = self.kernel;
        let rg = cpg * k * k;

        {
            let dw = grads.get_mut(self.weight);
            for g in 0..self.groups {
                let d =
                    ArrayView2::from_shape((opg, n), &dout.data[g * opg * n..(g + 1) * opg * n]).expect("dout block");
                let col = ArrayView2::from_shape((rg, n), &cols[g * rg * n..(g + 1) * rg * n]).expect("column block");
                let mut dwg = ArrayViewMut2::from_shape((opg, rg), &mut dw[g * opg * rg..(g + 1) * opg * rg])
                    .expect("weight grad block");
                general_mat_mul(1.0, &d, &col.t(), 1.0, &mut dwg);
            }
        }
        {
            let db = grads.get_mut(self.bias);
            for (b, row) in db.iter_mut().zip(dout.data.chunks_exact(n)) {
                *b += row.iter().sum::<f32>();
            }
        }
        if !need_input_grad {
            return None;
        }

        let weight = params.data(self.weight);
        let mut dcols = vec![0.0f32; cols.len()];
        for g in 0..self.groups {
            let w = ArrayView2::from_shape((opg, rg), &weight[g * opg * rg..(g + 1) * opg * rg]).expect("weight block");
            let d = ArrayView2::from_shape((opg, n), &dout.data[g * opg * n..(g + 1) * opg * n]).expect("dout block");
            let mut dc = ArrayViewMut2::from_shape((rg, n), &mut dcols[g * rg * n..(g + 1) * rg * n])
                .expect("column grad block");
            general_mat_mul(1.0, &w.t(), &d, 0.0, &mut dc);
        }

        let [c_in, h, w] = in_shape;
        let mut dx = Tensor3::zeros(c_in, h, w);
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let row = &dcols[r * n..(r + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (c * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dx.data[base + ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

impl Layer {
    pub(crate) fn forward(&self, params: &ParamStore, x: Tensor3) -> (Tensor3, Cache) {
        match self {
            Layer::Conv(conv) => {
                let in_shape = x.shape();
                let (y, cols) = conv.forward(params, &x);
                (y, Cache::Conv { cols, in_shape })
            }
            Layer::Relu => {
                let mut y = x;
                let active: Vec<bool> = y
                    .data
                    .iter_mut()
                    .map(|v| {
                        if *v > 0.0 {
                            true
                        } else {
                            *v = 0.0;
                            false
                        }
                    })
                    .collect();
                (y, Cache::Relu { active })
            }
            Layer::MaxPool { kernel, stride } => {
                let in_shape = x.shape();
                let ho = (x.height - kernel) / stride + 1;
                let wo = (x.width - kernel) / stride + 1;
                let mut y = Tensor3::zeros(x.channels, ho, wo);
                let mut argmax = Vec::with_capacity(y.data.len());
                for c in 0..x.channels {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_i = 0;
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    let i = x.index(c, oy * stride + ky, ox * stride + kx);
                                    if x.data[i] > best {
                                        best = x.data[i];
                                        best_i = i;
                                    }
                                }
                            }
                            y.set(c, oy, ox, best);
                            argmax.push(best_i as u32);
                        }
                    }
                }
                (y, Cache::MaxPool { argmax, in_shape })
            }
            Layer::GlobalAvgPool => {
                let in_shape = x.shape();
                let hw = (x.height * x.width) as f32;
                let data = (0..x.channels).map(|c| x.channel(c).iter().sum::<f32>() / hw).collect();
                (
                    Tensor3::from_vec(x.channels, 1, 1, data),
                    Cache::GlobalAvgPool { in_shape },
                )
            }
        }
    }

    pub(crate) fn backward(
        &self,
        params: &ParamStore,
        cache: &Cache,
        dout: Tensor3,
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<Tensor3> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv { cols, in_shape }) => {
                conv.backward(params, cols, *in_shape, &dout, grads, need_input_grad)
            }
            (Layer::Relu, Cache::Relu { active }) => {
                let mut dx = dout;
                for (v, &a) in dx.data.iter_mut().zip(active) {
                    if !a {
                        *v = 0.0;
                    }
                }
                Some(dx)
            }
            (Layer::MaxPool { .. }, Cache::MaxPool { argmax, in_shape }) => {
                let [c, h, w] = *in_shape;
                let mut dx = Tensor3::zeros(c, h, w);
                for (&i, &g) in argmax.iter().zip(&dout.data) {
                    dx.data[i as usize] += g;
                }
                Some(dx)
            }
            (Layer::GlobalAvgPool, Cache::GlobalAvgPool { in_shape }) => {
                let [c, h, w] = *in_shape;
                let hw = h * w;
                let mut dx = Tensor3::zeros(c, h, w);
                for (ch, &g) in dout.data.iter().enumerate() {
                    let v = g / hw as f32;
                    dx.data[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d = v);
                }
                Some(dx)
            }
            _ => unreachable!("cache does not belong to this layer"),
        }
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored row-major `[out, in]`.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Dense {
    pub(crate) fn forward(&self, params: &ParamStore, x: &[f32]) -> Vec<f32> {
        let w = params.data(self.weight);
        let b = params.data(self.bias);
        debug_assert_eq!(b.len(), self.out_features);
        w.chunks_exact(self.in_features)
            .zip(b)
            .map(|(row, &bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>())
            .collect()
    }

    /// Accumulates parameter gradients; adds `W^T dout` into `dx`.
    pub(crate) fn backward(&self, params: &ParamStore, x: &[f32], dout: &[f32], grads: &mut Grads, dx: &mut [f32]) {
        {
            let dw = grads.get_mut(self.weight);
            for (row, &g) in dw.chunks_exact_mut(self.in_features).zip(dout) {
                if g != 0.0 {
                    row.iter_mut().zip(x).for_each(|(d, &xi)| *d += g * xi);
                }
            }
        }
        {
            let db = grads.get_mut(self.bias);
            db.iter_mut().zip(dout).for_each(|(d, &g)| *d += g);
        }
        let w = params.data(self.weight);
        for (row, &g) in w.chunks_exact(self.in_features).zip(dout) {
            if g != 0.0 {
                dx.iter_mut().zip(row).for_each(|(d, &wi)| *d += g * wi);
            }
        }
    }
}
