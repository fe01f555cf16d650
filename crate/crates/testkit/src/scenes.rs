//! Seeded synthetic photographs for desk-scale training and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Luminance plus a small chroma offset, so colors are muted like those of
/// photographs.
fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let l = rng.random_range(0.1..0.9);
    [0, 1, 2].map(|_| (l + rng.random_range(-0.15..0.15f64)).clamp(0.0, 1.0))
}

/// Dead-leaves scene: occluding disks with power-law radii (density
/// `r^-3` on `[r_min, r_max]`), each with a smooth shading ramp and a faint
/// oriented grating, painted back to front until the frame is covered
/// about four times over. Planar RGB in `[0, 1]`.
pub fn dead_leaves(height: usize, width: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0; 3 * height * width];
    let side = height.max(width) as f64;
    let (r_min, r_max): (f64, f64) = (3.0, side / 3.0);
    let mut covered = 0.0;
    let background = color(&mut rng);
    for c in 0..3 {
        img[c * height * width..(c + 1) * height * width].fill(background[c]);
    }
    while covered < 4.0 * (height * width) as f64 {
        let u: f64 = rng.random();
        // inverse CDF of r^-3 truncated to [r_min, r_max]
        let a = r_min.powi(-2);
        let b = r_max.powi(-2);
        let r = (a - u * (a - b)).powf(-0.5);
        let cy = rng.random_range(-r..height as f64 + r);
        let cx = rng.random_range(-r..width as f64 + r);
        let base = color(&mut rng);
        let shade_dir = rng.random_range(0.0..std::f64::consts::TAU);
        let shade = rng.random_range(0.0..0.3) / r.max(1.0);
        let freq = rng.random_range(0.3..1.2);
        let orient = rng.random_range(0.0..std::f64::consts::PI);
        let texture = rng.random_range(0.0..0.05);
        let (sy, sx) = (shade_dir.sin(), shade_dir.cos());
        let (oy, ox) = (orient.sin(), orient.cos());
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil().max(0.0) as usize).min(height);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil().max(0.0) as usize).min(width);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if dy * dy + dx * dx > r * r {
                    continue;
                }
                let ramp = shade * (dy * sy + dx * sx);
                let grating = texture * (freq * (dy * oy + dx * ox)).sin();
                for c in 0..3 {
                    img[(c * height + y) * width + x] = (base[c] + ramp + grating).clamp(0.0, 1.0);
                }
            }
        }
        covered += std::f64::consts::PI * r * r;
    }
    img
}
