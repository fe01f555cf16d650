//! Minimal double-precision layers with hand-written backward passes.
//!
//! Every layer works on one sample at a time: a planar `channels x height x
//! width` [`Tensor`]. Batches are plain slices of samples and are reduced by
//! the callers in a fixed order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{reflect_index, Image};

/// Planar feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            channels: img.channels(),
            height: img.height(),
            width: img.width(),
            data: img.as_slice().to_vec(),
        }
    }

    pub fn to_image(&self) -> Image {
        Image::from_planar(self.height, self.width, self.channels, self.data.clone())
            .expect("tensor dimensions are non-zero")
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Stack tensors of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concatenating zero tensors".into()))?;
        let (h, w) = (first.height, first.width);
        if parts.iter().any(|p| p.height != h || p.width != w) {
            return Err(Error::Shape("channel concatenation of unequal spatial sizes".into()));
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(channels, h, w, data)
    }
}

/// A named, shaped parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of parameters. Gradients use the same layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a parameter and return its index.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.params[i].data
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.params[i].data
    }

    /// Mutable access to two distinct parameters, `i < j`.
    pub fn pair_mut(&mut self, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
        assert!(i < j, "pair_mut needs i < j");
        let (lo, hi) = self.params.split_at_mut(j);
        (&mut lo[i].data, &mut hi[0].data)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![0.0; p.data.len()],
                })
                .collect(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) {
        debug_assert_eq!(self.params.len(), other.params.len());
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += alpha * y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.params
            .iter_mut()
            .for_each(|p| p.data.iter_mut().for_each(|v| *v *= s));
    }

    pub fn norm_sq(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.data.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// All scalars concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Locate flat index `i` as `(param, offset)`.
    pub fn locate(&self, mut i: usize) -> Option<(usize, usize)> {
        for (k, p) in self.params.iter().enumerate() {
            if i < p.data.len() {
                return Some((k, i));
            }
            i -= p.data.len();
        }
        None
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Zero,
    Reflect,
}

/// Square "same" convolution, stride 1, padding `k / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub ksize: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub fn new(in_channels: usize, out_channels: usize, ksize: usize, padding: Padding) -> Self {
        Self {
            in_channels,
            out_channels,
            ksize,
            padding,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.ksize * self.ksize
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.ksize, self.ksize]
    }

    /// Length of one output channel's filter slice.
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.ksize * self.ksize
    }
}

fn pad(x: &Tensor, r: usize, mode: Padding) -> Tensor {
    if r == 0 {
        return x.clone();
    }
    let (h, w) = (x.height, x.width);
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = Tensor::zeros(x.channels, ph, pw);
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        match mode {
            Padding::Zero => {
                for y in 0..h {
                    dst[(y + r) * pw + r..(y + r) * pw + r + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
            Padding::Reflect => {
                for py in 0..ph {
                    let sy = reflect_index(py as isize - r as isize, h);
                    for px in 0..pw {
                        dst[py * pw + px] = src[sy * w + reflect_index(px as isize - r as isize, w)];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad`]: fold a padded gradient back onto the source grid.
fn unpad_adjoint(g: &Tensor, r: usize, mode: Padding) -> Tensor {
    if r == 0 {
        return g.clone();
    }
    let (ph, pw) = (g.height, g.width);
    let (h, w) = (ph - 2 * r, pw - 2 * r);
    let mut out = Tensor::zeros(g.channels, h, w);
    for c in 0..g.channels {
        let src = g.plane(c);
        let dst = out.plane_mut(c);
        match mode {
            Padding::Zero => {
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[(y + r) * pw + r..(y + r) * pw + r + w]);
                }
            }
            Padding::Reflect => {
                for py in 0..ph {
                    let sy = reflect_index(py as isize - r as isize, h);
                    for px in 0..pw {
                        dst[sy * w + reflect_index(px as isize - r as isize, w)] += src[py * pw + px];
                    }
                }
            }
        }
    }
    out
}

/// Saved state for [`conv_backward`]: the unfolded input patches.
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f64>,
    padded_hw: (usize, usize),
}

// cols[(ic*k + ky)*k + kx][y*w + x] = pad(x)[ic][y + ky][x + kx]
fn im2col(xp: &Tensor, k: usize, h: usize, w: usize) -> Vec<f64> {
    let pw = xp.width;
    let n = h * w;
    let mut cols = vec![0.0; xp.channels * k * k * n];
    for ic in 0..xp.channels {
        let src = xp.plane(ic);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ic * k + ky) * k + kx) * n..][..n];
                for y in 0..h {
                    let s = (y + ky) * pw + kx;
                    row[y * w..(y + 1) * w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], channels: usize, k: usize, h: usize, w: usize, ph: usize, pw: usize) -> Tensor {
    let n = h * w;
    let mut out = Tensor::zeros(channels, ph, pw);
    for ic in 0..channels {
        let dst = out.plane_mut(ic);
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ic * k + ky) * k + kx) * n..][..n];
                for y in 0..h {
                    let d = (y + ky) * pw + kx;
                    dst[d..d + w].iter_mut().zip(&row[y * w..(y + 1) * w]).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    out
}

/// `c (m x n) = alpha * op(a) * op(b) + beta * c`, row-major, with the
/// transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
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

/// `y[oc] = b[oc] + sum_ic w[oc, ic] * pad(x)[ic]` (correlation).
pub fn conv_forward(x: &Tensor, weight: &[f64], bias: &[f64], g: &ConvGeom) -> (Tensor, ConvCache) {
    debug_assert_eq!(x.channels, g.in_channels);
    debug_assert_eq!(weight.len(), g.weight_len());
    debug_assert_eq!(bias.len(), g.out_channels);
    let k = g.ksize;
    let xp = pad(x, k / 2, g.padding);
    let (h, w) = (x.height, x.width);
    let cols = im2col(&xp, k, h, w);
    let mut y = Tensor::zeros(g.out_channels, h, w);
    for oc in 0..g.out_channels {
        y.plane_mut(oc).iter_mut().for_each(|v| *v = bias[oc]);
    }
    gemm(g.out_channels, g.filter_len(), h * w, weight, false, &cols, false, 1.0, &mut y.data);
    (
        y,
        ConvCache {
            cols,
            padded_hw: (xp.height, xp.width),
        },
    )
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_input` is set.
pub fn conv_backward(
    cache: &ConvCache,
    weight: &[f64],
    gy: &Tensor,
    g: &ConvGeom,
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Option<Tensor> {
    let k = g.ksize;
    let (h, w) = (gy.height, gy.width);
    let n = h * w;
    for (oc, b) in gb.iter_mut().enumerate() {
        *b += gy.plane(oc).iter().sum::<f64>();
    }
    gemm(g.out_channels, n, g.filter_len(), &gy.data, false, &cache.cols, true, 1.0, gw);
    if !want_input {
        return None;
    }
    let mut gcols = vec![0.0; g.filter_len() * n];
    gemm(g.filter_len(), g.out_channels, n, weight, true, &gy.data, false, 0.0, &mut gcols);
    let (ph, pw) = cache.padded_hw;
    let gxp = col2im(&gcols, g.in_channels, k, h, w, ph, pw);
    Some(unpad_adjoint(&gxp, k / 2, g.padding))
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient through ReLU given the forward *output*.
pub fn relu_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let mut g = gy.clone();
    g.data
        .iter_mut()
        .zip(&y.data)
        .for_each(|(gv, yv)| {
            if *yv <= 0.0 {
                *gv = 0.0
            }
        });
    g
}

/// 2x2 average pooling, stride 2; an odd trailing row or column is dropped.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut y = Tensor::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = y.plane_mut(c);
        for yy in 0..oh {
            for xx in 0..ow {
                let i = 2 * yy * x.width + 2 * xx;
                dst[yy * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + x.width] + src[i + x.width + 1]);
            }
        }
    }
    y
}

pub fn avg_pool2_backward(gy: &Tensor, in_height: usize, in_width: usize) -> Tensor {
    let mut gx = Tensor::zeros(gy.channels, in_height, in_width);
    for c in 0..gy.channels {
        let src = gy.plane(c);
        let dst = gx.plane_mut(c);
        for yy in 0..gy.height {
            for xx in 0..gy.width {
                let v = 0.25 * src[yy * gy.width + xx];
                let i = 2 * yy * in_width + 2 * xx;
                dst[i] += v;
                dst[i + 1] += v;
                dst[i + in_width] += v;
                dst[i + in_width + 1] += v;
            }
        }
    }
    gx
}

/// Spatial mean per channel.
pub fn global_avg(x: &Tensor) -> Vec<f64> {
    let n = x.plane_len() as f64;
    (0..x.channels).map(|c| x.plane(c).iter().sum::<f64>() / n).collect()
}

pub fn global_avg_backward(g: &[f64], height: usize, width: usize) -> Tensor {
    let n = (height * width) as f64;
    let mut gx = Tensor::zeros(g.len(), height, width);
    for (c, gv) in g.iter().enumerate() {
        gx.plane_mut(c).iter_mut().for_each(|v| *v = gv / n);
    }
    gx
}

/// Depth-to-space: `out[c][y r + i][x r + j] = in[c r^2 + i r + j][y][x]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Tensor {
    let c_out = x.channels / (r * r);
    let (h, w) = (x.height, x.width);
    let (oh, ow) = (h * r, w * r);
    let mut y = Tensor::zeros(c_out, oh, ow);
    for c in 0..c_out {
        for i in 0..r {
            for j in 0..r {
                let src = x.plane(c * r * r + i * r + j);
                let dst = y.plane_mut(c);
                for yy in 0..h {
                    for xx in 0..w {
                        dst[(yy * r + i) * ow + xx * r + j] = src[yy * w + xx];
                    }
                }
            }
        }
    }
    y
}

/// Adjoint (and inverse) of [`pixel_shuffle`].
pub fn pixel_unshuffle(y: &Tensor, r: usize) -> Tensor {
    let (h, w) = (y.height / r, y.width / r);
    let ow = y.width;
    let mut x = Tensor::zeros(y.channels * r * r, h, w);
    for c in 0..y.channels {
        let src = y.plane(c).to_vec();
        for i in 0..r {
            for j in 0..r {
                let dst = x.plane_mut(c * r * r + i * r + j);
                for yy in 0..h {
                    for xx in 0..w {
                        dst[yy * w + xx] = src[(yy * r + i) * ow + xx * r + j];
                    }
                }
            }
        }
    }
    x
}

/// `y = A x + b` with `A` stored row-major `[out][in]`.
pub fn linear(a: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + a[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(p, q)| p * q).sum::<f64>())
        .collect()
}

/// Accumulate `dA`, `db` and return `dx` for [`linear`].
pub fn linear_backward(a: &[f64], x: &[f64], gy: &[f64], ga: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut gx = vec![0.0; n_in];
    for (o, g) in gy.iter().enumerate() {
        gb[o] += g;
        let row = &a[o * n_in..(o + 1) * n_in];
        let grow = &mut ga[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += g * x[i];
            gx[i] += g * row[i];
        }
    }
    gx
}

/// Kaiming (fan-in, ReLU gain) normal initialization.
pub fn kaiming_normal(len: usize, fan_in: usize, rng: &mut crate::seed::Rng) -> Vec<f64> {
    use rand_distr::{Distribution, Normal};
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| dist.sample(rng)).collect()
}
