//! Reconstruction, inner-task, cross-task, task-contrastive, and combined
//! losses, each with its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Per-step loss breakdown, averaged over tasks and patches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_res: f64,
    pub l_inner: f64,
    pub l_cross: f64,
    pub l_con: f64,
    pub l_com: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_res, self.l_inner, self.l_cross, self.l_con, self.l_com]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean absolute difference over every element of every pair.
pub fn l1_reconstruction(sr: &[Tensor], hr: &[Tensor]) -> Result<f64> {
    check_pairs(sr, hr)?;
    let count: usize = sr.iter().map(|t| t.data.len()).sum();
    if count == 0 {
        return Err(Error::Shape("empty reconstruction batch".into()));
    }
    let total: f64 = sr
        .iter()
        .zip(hr)
        .map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    Ok(total / count as f64)
}

/// Subgradient of [`l1_reconstruction`] for one pair when the batch holds
/// `count` elements in total. `sign(0)` is taken as 0.
pub fn l1_grad(sr: &Tensor, hr: &Tensor, count: usize) -> Tensor {
    let inv = 1.0 / count as f64;
    let mut g = sr.clone();
    g.data.iter_mut().zip(&hr.data).for_each(|(v, t)| {
        let d = *v - t;
        *v = if d > 0.0 {
            inv
        } else if d < 0.0 {
            -inv
        } else {
            0.0
        };
    });
    g
}

fn check_pairs(sr: &[Tensor], hr: &[Tensor]) -> Result<()> {
    if sr.len() != hr.len() {
        return Err(Error::Shape(format!("{} outputs for {} targets", sr.len(), hr.len())));
    }
    for (a, b) in sr.iter().zip(hr) {
        if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
            return Err(Error::Shape(format!(
                "output {}x{}x{} vs target {}x{}x{}",
                a.channels, a.height, a.width, b.channels, b.height, b.width
            )));
        }
    }
    Ok(())
}

/// `||a - b||^2`.
pub fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("feature lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Distance between two features of the same task.
pub fn inner_task_loss(f1: &[f64], f2: &[f64]) -> Result<f64> {
    squared_distance(f1, f2)
}

/// Distance between features of two different tasks.
pub fn cross_task_loss(fi: &[f64], fj: &[f64]) -> Result<f64> {
    squared_distance(fi, fj)
}

/// Gradient of `||a - b||^2` w.r.t. `a`; the gradient w.r.t. `b` is its
/// negation.
pub fn squared_distance_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus(-l_cross) + softplus(l_inner)`.
pub fn task_contrastive_loss(l_inner: f64, l_cross: f64) -> f64 {
    softplus(-l_cross) + softplus(l_inner)
}

/// `(d/dl_inner, d/dl_cross)` of [`task_contrastive_loss`].
pub fn task_contrastive_grad(l_inner: f64, l_cross: f64) -> (f64, f64) {
    (sigmoid(l_inner), -sigmoid(-l_cross))
}

pub fn combined_loss(l_con: f64, l_res: f64, lambda: f64) -> f64 {
    l_con + lambda * l_res
}

#[cfg(test)]
mod tests {
    use super::*;
    use cmdsr_testkit as tk;

    fn t(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::from_vec(1, 1, n, data).unwrap()
    }

    #[test]
    fn l1_examples() {
        let hr = vec![t(vec![0.1, 0.5, 0.9]), t(vec![0.0, 0.2, 0.4])];
        assert_eq!(l1_reconstruction(&hr, &hr).unwrap(), 0.0);
        let shifted: Vec<Tensor> = hr
            .iter()
            .map(|x| t(x.data.iter().map(|v| v + 0.1).collect()))
            .collect();
        assert!((l1_reconstruction(&shifted, &hr).unwrap() - 0.1).abs() < 1e-15);
        let (mut sr_rev, mut hr_rev) = (shifted.clone(), hr.clone());
        sr_rev.reverse();
        hr_rev.reverse();
        assert_eq!(
            l1_reconstruction(&shifted, &hr).unwrap(),
            l1_reconstruction(&sr_rev, &hr_rev).unwrap()
        );
        assert!(l1_reconstruction(&hr[..1], &hr).is_err());
        assert!(l1_reconstruction(&[t(vec![0.0; 2])], &[t(vec![0.0; 3])]).is_err());
    }

    #[test]
    fn l1_grad_matches_differences() {
        let sr = vec![t(vec![0.3, -0.2, 0.7]), t(vec![1.0, 0.1, 0.05])];
        let hr = vec![t(vec![0.1, 0.0, 0.9]), t(vec![0.5, 0.5, 0.5])];
        let flat: Vec<f64> = sr.iter().flat_map(|x| x.data.clone()).collect();
        let num = tk::finite_difference_grad(
            |p| l1_reconstruction(&[t(p[..3].to_vec()), t(p[3..].to_vec())], &hr).unwrap(),
            &flat,
            1e-6,
        )
        .unwrap();
        let analytic: Vec<f64> = sr.iter().zip(&hr).flat_map(|(a, b)| l1_grad(a, b, 6).data).collect();
        for (a, n) in analytic.iter().zip(&num) {
            assert!((a - n).abs() < 1e-8);
        }
    }

    #[test]
    fn distance_examples() {
        for f in [inner_task_loss, cross_task_loss] {
            assert_eq!(f(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
            assert_eq!(f(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap(), 1.0);
            assert_eq!(f(&[1.0, 2.0], &[4.0, 6.0]).unwrap(), 25.0);
            assert!(f(&[1.0], &[1.0, 2.0]).is_err());
        }
    }

    #[test]
    fn contrastive_examples() {
        assert!((task_contrastive_loss(0.0, 0.0) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let oracle = tk::softplus_naive(-2.0) + tk::softplus_naive(1.0);
        assert!((task_contrastive_loss(1.0, 2.0) - oracle).abs() < 1e-12);
        assert!((task_contrastive_loss(1.0, 2.0) - 1.440190).abs() < 1e-6);
        let far = task_contrastive_loss(0.0, 1e6);
        assert!((far - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(task_contrastive_loss(1e6, 0.0).is_finite());
    }

    #[test]
    fn softplus_branches_are_continuous() {
        for x in [-30.0f64, 30.0] {
            let below = softplus(x - 1e-9);
            let above = softplus(x + 1e-9);
            assert!((below - above).abs() < 1e-8, "jump at {x}");
            assert!((softplus(x) - tk::softplus_naive(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_is_monotone_on_grid() {
        let grid: Vec<f64> = (0..40).map(|i| i as f64 * 0.5).collect();
        for &a in &grid {
            for w in grid.windows(2) {
                assert!(task_contrastive_loss(a, w[1]) < task_contrastive_loss(a, w[0]));
                assert!(task_contrastive_loss(w[1], a) > task_contrastive_loss(w[0], a));
            }
        }
    }

    #[test]
    fn contrastive_floor_is_ln2() {
        let mut lowest = f64::INFINITY;
        for i in 0..50 {
            for j in 0..50 {
                let v = task_contrastive_loss(i as f64 * 0.2, j as f64 * 2.0);
                assert!(v >= std::f64::consts::LN_2);
                lowest = lowest.min(v);
            }
        }
        assert!((lowest - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn contrastive_gradient_matches_differences() {
        for (li, lc) in [(0.0, 0.0), (1.0, 2.0), (0.3, 7.5), (4.0, 0.1), (25.0, 3.0), (0.5, 9.0)] {
            let (gi, gc) = task_contrastive_grad(li, lc);
            let num = tk::finite_difference_grad(|p| task_contrastive_loss(p[0], p[1]), &[li, lc], 1e-5).unwrap();
            assert!(tk::rel_error(gi, num[0]) < 1e-6, "inner at ({li},{lc})");
            assert!(tk::rel_error(gc, num[1]) < 1e-6, "cross at ({li},{lc})");
        }
    }

    #[test]
    fn combined_examples() {
        assert!((combined_loss(1.0, 2.0, 0.1) - 1.2).abs() < 1e-15);
        assert_eq!(combined_loss(0.7, 5.0, 0.0), 0.7);
        assert_eq!(combined_loss(0.7, 5.0, 1.0), 5.7);
    }
}
