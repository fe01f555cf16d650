//! Reference oracles for verifying the `cmdsr` crate.
//!
//! Everything in here is written directly from the defining formulas with
//! plain loops over `f64` slices. Nothing is shared with the production code
//! paths: this crate deliberately has no dependency on `cmdsr`, so an error in
//! a production helper (padding, indexing, normalization) cannot silently make
//! both sides of a comparison agree.

use std::fmt;

pub mod scenes;

pub use scenes::dead_leaves;

/// One coordinate of a gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradCheckReport {
    pub fn new(name: impl Into<String>, analytic: f64, numeric: f64) -> Self {
        Self {
            name: name.into(),
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: analytic={:.9e} numeric={:.9e} rel={:.3e}",
            self.name, self.analytic, self.numeric, self.rel_error
        )
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NonFiniteEvaluation {
    pub index: usize,
}

impl fmt::Display for NonFiniteEvaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "non-finite function value while perturbing coordinate {}", self.index)
    }
}

impl std::error::Error for NonFiniteEvaluation {}

/// Default relative step for central differences.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Step for ReLU networks. They are piecewise linear, so central differences
/// carry no truncation error; a large step only adds the risk of stepping over
/// an activation kink somewhere in the network.
pub const PIECEWISE_LINEAR_STEP: f64 = 1e-6;

/// Central difference along a single coordinate, with the step scaled by
/// `max(1, |x_i|)`.
pub fn central_difference_at<F>(
    f: &mut F,
    point: &[f64],
    index: usize,
    step: f64,
) -> Result<f64, NonFiniteEvaluation>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let h = step * point[index].abs().max(1.0);
    x[index] = point[index] + h;
    let plus = f(&x);
    x[index] = point[index] - h;
    let minus = f(&x);
    if !plus.is_finite() || !minus.is_finite() {
        return Err(NonFiniteEvaluation { index });
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Full central-difference gradient of `f` at `point`.
pub fn finite_difference_grad<F>(
    mut f: F,
    point: &[f64],
    step: f64,
) -> Result<Vec<f64>, NonFiniteEvaluation>
where
    F: FnMut(&[f64]) -> f64,
{
    (0..point.len())
        .map(|i| central_difference_at(&mut f, point, i, step))
        .collect()
}

fn reflect(i: isize, n: usize) -> usize {
    // Mirror without repeating the edge sample, period 2(n-1).
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Direct per-channel 2-D correlation with reflect boundary handling.
///
/// `img` is planar (`channels` planes of `height * width`), `kernel` is a
/// `ksize * ksize` row-major grid with odd `ksize`.
pub fn conv2d_reference(
    img: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    kernel: &[f64],
    ksize: usize,
) -> Vec<f64> {
    assert_eq!(img.len(), channels * height * width);
    assert_eq!(kernel.len(), ksize * ksize);
    let r = (ksize / 2) as isize;
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for ky in 0..ksize {
                    for kx in 0..ksize {
                        let sy = reflect(y as isize + ky as isize - r, height);
                        let sx = reflect(x as isize + kx as isize - r, width);
                        acc += kernel[ky * ksize + kx] * img[(c * height + sy) * width + sx];
                    }
                }
                out[(c * height + y) * width + x] = acc;
            }
        }
    }
    out
}

/// Direct multi-channel convolution layer (`out = bias + sum_ic W * in`)
/// with zero padding `pad`, stride 1. `weight` is `[oc][ic][k][k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_layer_reference(
    input: &[f64],
    in_channels: usize,
    height: usize,
    width: usize,
    weight: &[f64],
    bias: &[f64],
    out_channels: usize,
    ksize: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = height + 2 * pad - ksize + 1;
    let ow = width + 2 * pad - ksize + 1;
    let mut out = vec![0.0; out_channels * oh * ow];
    for oc in 0..out_channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..in_channels {
                    for ky in 0..ksize {
                        for kx in 0..ksize {
                            let sy = y as isize + ky as isize - pad as isize;
                            let sx = x as isize + kx as isize - pad as isize;
                            if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                                continue;
                            }
                            let w = weight[((oc * in_channels + ic) * ksize + ky) * ksize + kx];
                            acc += w * input[(ic * height + sy as usize) * width + sx as usize];
                        }
                    }
                }
                out[(oc * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

/// Unnormalized `exp(-(x^2+y^2)/(2 sigma^2))` on the integer grid, then
/// divided by its sum.
pub fn gaussian_kernel_reference(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let dy = row as f64 - r;
            let dx = col as f64 - r;
            k.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// Orientation (radians, in `(-pi/2, pi/2]`) of the major axis of the
/// second-moment matrix of a square kernel. Columns are `x`, rows are `y`.
pub fn kernel_principal_angle(kernel: &[f64], size: usize) -> f64 {
    let r = (size / 2) as f64;
    let (mut sxx, mut sxy, mut syy, mut total) = (0.0, 0.0, 0.0, 0.0);
    let (mut mx, mut my) = (0.0, 0.0);
    for row in 0..size {
        for col in 0..size {
            let w = kernel[row * size + col];
            total += w;
            mx += w * (col as f64 - r);
            my += w * (row as f64 - r);
        }
    }
    mx /= total;
    my /= total;
    for row in 0..size {
        for col in 0..size {
            let w = kernel[row * size + col] / total;
            let dx = col as f64 - r - mx;
            let dy = row as f64 - r - my;
            sxx += w * dx * dx;
            sxy += w * dx * dy;
            syy += w * dy * dy;
        }
    }
    0.5 * (2.0 * sxy).atan2(sxx - syy)
}

/// ITU-R BT.601 luma on [0,1] inputs.
pub fn bt601_luma(r: f64, g: f64, b: f64) -> f64 {
    (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
}

/// `10 log10(1/mse)`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    10.0 * (1.0 / mse).log10()
}

/// Mean squared error between two equally long slices.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean absolute error between two equally long slices.
pub fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Naive softplus, valid for moderate arguments only.
pub fn softplus_naive(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Logistic sigmoid, the analytic derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unbiased sample standard deviation.
pub fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn sample_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean inner-group and cross-group pairwise Euclidean distances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separability {
    pub mean_inner: f64,
    pub mean_cross: f64,
}

impl Separability {
    pub fn ratio(&self) -> f64 {
        self.mean_cross / self.mean_inner
    }
}

/// Brute-force all-pairs distances over labelled feature rows.
pub fn separability(rows: &[Vec<f64>], labels: &[usize]) -> Separability {
    assert_eq!(rows.len(), labels.len());
    let (mut inner, mut n_inner, mut cross, mut n_cross) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let d = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if labels[i] == labels[j] {
                inner += d;
                n_inner += 1;
            } else {
                cross += d;
                n_cross += 1;
            }
        }
    }
    Separability {
        mean_inner: inner / n_inner.max(1) as f64,
        mean_cross: cross / n_cross.max(1) as f64,
    }
}

/// Closed-form parameter count of a stack of `k x k` convolutions with bias
/// given the channel progression `widths[0] -> widths[1] -> ...`.
pub fn conv_stack_param_count(widths: &[usize], ksize: usize) -> usize {
    widths
        .windows(2)
        .map(|w| w[0] * w[1] * ksize * ksize + w[1])
        .sum()
}
