//! Geometry and image quality metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::math::Vec3;
use crate::mesh::{Bvh, Mesh};

pub const PSNR_CAP: f64 = 99.0;
pub const DEFAULT_F1_TAU: f64 = 0.01;
pub const DEFAULT_SAMPLES: usize = 100_000;

/// Area-uniform surface samples.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    let total = mesh.total_area();
    if mesh.faces().is_empty() || total <= 0.0 {
        return Err(Error::EmptyGeometry("mesh has no surface area".into()));
    }
    let mut cdf = Vec::with_capacity(mesh.faces().len());
    let mut acc = 0.0;
    for f in 0..mesh.faces().len() as u32 {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let x = rng.random::<f64>() * acc;
            let f = cdf.partition_point(|c| *c < x).min(cdf.len() - 1);
            let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            let [a, b, c] = mesh.face_vertices(f as u32);
            a + (b - a) * r1 + (c - a) * r2
        })
        .collect())
}

fn squared_distances(points: &[Vec3], mesh: &Mesh, bvh: &Bvh) -> Vec<f64> {
    points.par_iter().map(|p| bvh.closest_point(mesh, p).2).collect()
}

/// Directional squared distances `a → b` and `b → a`.
fn both_ways(a: &Mesh, b: &Mesh, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let pa = sample_surface(a, n, seed)?;
    let pb = sample_surface(b, n, seed.wrapping_add(1))?;
    let (ba, bb) = (Bvh::build(a), Bvh::build(b));
    Ok((squared_distances(&pa, b, &bb), squared_distances(&pb, a, &ba)))
}

/// Symmetric Chamfer distance: the mean of the two directional means of
/// squared nearest-surface distances.
pub fn chamfer_distance(a: &Mesh, b: &Mesh, n_samples: usize, seed: u64) -> Result<f64> {
    let (ab, ba) = both_ways(a, b, n_samples.max(1), seed)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}

/// F1 of precision (`pred` samples within `tau` of `gt`) and recall.
pub fn f1_score(pred: &Mesh, gt: &Mesh, tau: f64, n_samples: usize, seed: u64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Invalid("F1 threshold must be positive".into()));
    }
    let (pg, gp) = both_ways(pred, gt, n_samples.max(1), seed)?;
    let frac = |v: &[f64]| v.iter().filter(|d| **d <= tau * tau).count() as f64 / v.len() as f64;
    let (p, r) = (frac(&pg), frac(&gp));
    Ok(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
}

/// Scales and centers both meshes so their joint bounding box has unit
/// diagonal.
pub fn normalize_pair(a: &Mesh, b: &Mesh) -> Result<(Mesh, Mesh)> {
    let bb = a.bounds().union(&b.bounds());
    let diag = bb.diagonal();
    if !(diag > 0.0) {
        return Err(Error::EmptyGeometry("degenerate bounding box".into()));
    }
    let s = 1.0 / diag;
    let off = -bb.center() * s;
    Ok((a.transformed(s, off)?, b.transformed(s, off)?))
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// PSNR in dB on `[0, 1]`-clamped linear values, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let mut se = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        for c in 0..3 {
            let d = x[c].clamp(0.0, 1.0) - y[c].clamp(0.0, 1.0);
            se += d * d;
        }
    }
    let mse = se / (3 * a.data.len().max(1)) as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; 11] {
    let mut k = [0.0; 11];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian blur; the window is renormalized where it leaves the
/// image.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64; 11]) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (j, kv) in k.iter().enumerate() {
                    let o = j as isize - 5;
                    let (sx, sy) = if horizontal { (x as isize + o, y as isize) } else { (x as isize, y as isize + o) };
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        continue;
                    }
                    acc += kv * src[sy as usize * w + sx as usize];
                    norm += kv;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Mean SSIM over pixels and channels with an 11×11 Gaussian window
/// (σ = 1.5) and the usual stabilizers for unit dynamic range.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (w, h) = (a.width, a.height);
    if w == 0 || h == 0 {
        return Err(Error::ShapeMismatch("empty image".into()));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data.iter().map(|p| p[c].clamp(0.0, 1.0)).collect();
        let y: Vec<f64> = b.data.iter().map(|p| p[c].clamp(0.0, 1.0)).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = blur(&x, w, h, &k);
        let my = blur(&y, w, h, &k);
        let sxx = blur(&prod(&x, &x), w, h, &k);
        let syy = blur(&prod(&y, &y), w, h, &k);
        let sxy = blur(&prod(&x, &y), w, h, &k);
        for i in 0..x.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (3 * w * h) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rgb;
    use crate::scenegen::{make_icosphere, make_slab};

    fn plane(z: f64) -> Mesh {
        Mesh::new(
            vec![Vec3::new(-1.0, -1.0, z), Vec3::new(1.0, -1.0, z), Vec3::new(1.0, 1.0, z), Vec3::new(-1.0, 1.0, z)],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn chamfer_identical_is_zero() {
        let m = make_icosphere(1.0, 2);
        assert!(chamfer_distance(&m, &m, 5000, 1).unwrap() < 1e-8);
        assert_eq!(f1_score(&m, &m, 0.01, 5000, 1).unwrap(), 1.0);
    }

    #[test]
    fn chamfer_parallel_planes() {
        let d = 0.3;
        let cd = chamfer_distance(&plane(0.0), &plane(d), 2000, 4).unwrap();
        assert!((cd - d * d).abs() < 1e-12);
    }

    #[test]
    fn f1_planes() {
        let tau = 0.1;
        assert_eq!(f1_score(&plane(0.0), &plane(tau / 2.0), tau, 2000, 2).unwrap(), 1.0);
        assert_eq!(f1_score(&plane(0.0), &plane(3.0 * tau), tau, 2000, 2).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = make_icosphere(1.0, 2);
        let b = make_slab(0.5, 1.5);
        let ab = chamfer_distance(&a, &b, 3000, 9).unwrap();
        let ba = chamfer_distance(&b, &a, 3000, 9).unwrap();
        // Sample sets swap roles, so agreement is statistical.
        assert!((ab - ba).abs() < 0.05 * ab);
        assert!(f1_score(&a, &b, 0.05, 3000, 9).unwrap() >= 0.0);
    }

    #[test]
    fn normalize_pair_unit_diagonal() {
        let (a, b) = normalize_pair(&make_icosphere(3.0, 1), &plane(5.0)).unwrap();
        let bb = a.bounds().union(&b.bounds());
        assert!((bb.diagonal() - 1.0).abs() < 1e-12);
        assert!(bb.center().norm() < 1e-12);
    }

    #[test]
    fn psnr_cases() {
        let a = Image::new(8, 8);
        let mut b = Image::new(8, 8);
        b.data.iter_mut().for_each(|p| *p = Rgb::repeat(0.1));
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::new(4, 8)).is_err());
    }

    #[test]
    fn ssim_cases() {
        let a = Image::from_fn(24, 20, |x, y| Rgb::new(x as f64 / 24.0, y as f64 / 20.0, 0.5));
        let b = Image::from_fn(24, 20, |x, y| Rgb::new((x * y % 7) as f64 / 7.0, y as f64 / 20.0, 0.3));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b).unwrap();
        assert!(ab < 0.99);
        assert_eq!(ab, ssim(&b, &a).unwrap());
    }
}
