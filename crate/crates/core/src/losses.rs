//! Photometric losses and geometry/material regularizers, each with its
//! analytic gradient where a parameter depends on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Rgb, Vec3};
use crate::medium::AbsorptionGrid;
use crate::mesh::{vertex_normals_backward, Mesh};
use crate::tracer::GBuffer;

/// Norm below which a pair is skipped by the tone loss.
pub const TONE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub color: f64,
    pub tone: f64,
    pub mat_smooth: f64,
    pub vol: f64,
    pub mask: f64,
    pub edge: f64,
    pub laplacian: f64,
    pub area: f64,
    pub screen: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            color: 1.0,
            tone: 0.001,
            mat_smooth: 0.01,
            vol: 0.0005,
            mask: 1.0,
            edge: 0.5,
            laplacian: 0.1,
            area: 0.0,
            screen: 0.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            color: 0.0,
            tone: 0.0,
            mat_smooth: 0.0,
            vol: 0.0,
            mask: 0.0,
            edge: 0.0,
            laplacian: 0.0,
            area: 0.0,
            screen: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("color", self.color),
            ("tone", self.tone),
            ("mat_smooth", self.mat_smooth),
            ("vol", self.vol),
            ("mask", self.mask),
            ("edge", self.edge),
            ("laplacian", self.laplacian),
            ("area", self.area),
            ("screen", self.screen),
        ];
        for (k, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("losses.{k}"), "weight must be finite and ≥ 0"));
            }
        }
        Ok(())
    }
}

/// Unweighted loss values, one per term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub color: f64,
    pub tone: f64,
    pub mat_smooth: f64,
    pub vol: f64,
    pub mask: f64,
    pub edge: f64,
    pub laplacian: f64,
    pub area: f64,
    pub screen: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.color * c.color
        + w.tone * c.tone
        + w.mat_smooth * c.mat_smooth
        + w.vol * c.vol
        + w.mask * c.mask
        + w.edge * c.edge
        + w.laplacian * c.laplacian
        + w.area * c.area
        + w.screen * c.screen
}

/// Mean of `‖(ĉ − c) ∘ c‖²` over rays that are not capped, and its gradient
/// with respect to each prediction (zero for capped rays).
pub fn l_color_grad(pred: &[Rgb], target: &[Rgb], capped: &[bool]) -> Result<(f64, Vec<Rgb>)> {
    check_batch(pred, target, capped)?;
    let kept = capped.iter().filter(|c| !**c).count();
    if kept == 0 {
        return Err(Error::AllCapped);
    }
    let inv = 1.0 / kept as f64;
    let mut value = 0.0;
    let mut grads = vec![Rgb::zeros(); pred.len()];
    for i in 0..pred.len() {
        if capped[i] {
            continue;
        }
        let c = target[i];
        let diff = pred[i] - c;
        let w = diff.component_mul(&c);
        value += w.norm_squared();
        grads[i] = w.component_mul(&c) * (2.0 * inv);
    }
    Ok((value * inv, grads))
}

pub fn l_color(pred: &[Rgb], target: &[Rgb], capped: &[bool]) -> Result<f64> {
    l_color_grad(pred, target, capped).map(|(v, _)| v)
}

/// Population variance of the three channels.
pub fn channel_variance(c: &Rgb) -> f64 {
    let m = c.mean();
    c.map(|v| (v - m) * (v - m)).mean()
}

/// Mean of `(1 − cos(ĉ, c))² − var(c)` over non-capped pairs whose norms
/// exceed [`TONE_EPS`], with its gradient.
pub fn l_tone_grad(pred: &[Rgb], target: &[Rgb], capped: &[bool]) -> Result<(f64, Vec<Rgb>)> {
    check_batch(pred, target, capped)?;
    let keep: Vec<usize> = (0..pred.len())
        .filter(|&i| !capped[i] && pred[i].norm() > TONE_EPS && target[i].norm() > TONE_EPS)
        .collect();
    let mut grads = vec![Rgb::zeros(); pred.len()];
    if keep.is_empty() {
        return Ok((0.0, grads));
    }
    let inv = 1.0 / keep.len() as f64;
    let mut value = 0.0;
    for &i in &keep {
        let (p, c) = (pred[i], target[i]);
        let (np, nc) = (p.norm(), c.norm());
        let cos = p.dot(&c) / (np * nc);
        value += (1.0 - cos).powi(2) - channel_variance(&c);
        let dcos = c / (np * nc) - p * (cos / (np * np));
        grads[i] = dcos * (-2.0 * (1.0 - cos) * inv);
    }
    Ok((value * inv, grads))
}

pub fn l_tone(pred: &[Rgb], target: &[Rgb]) -> f64 {
    let capped = vec![false; pred.len()];
    l_tone_grad(pred, target, &capped).map_or(0.0, |(v, _)| v)
}

fn check_batch(pred: &[Rgb], target: &[Rgb], capped: &[bool]) -> Result<()> {
    if pred.len() != target.len() || pred.len() != capped.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch sizes differ: {} predictions, {} targets, {} flags",
            pred.len(),
            target.len(),
            capped.len()
        )));
    }
    Ok(())
}

fn sample_points(grid: &AbsorptionGrid, n: usize, seed: u64) -> (ChaCha8Rng, Vec<Vec3>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = grid.aabb();
    let axes: Vec<Uniform<f64>> = (0..3)
        .map(|k| Uniform::new_inclusive(b.min[k], b.max[k]).expect("valid bounds"))
        .collect();
    let pts = (0..n)
        .map(|_| Vec3::new(axes[0].sample(&mut rng), axes[1].sample(&mut rng), axes[2].sample(&mut rng)))
        .collect();
    (rng, pts)
}

/// Mean over seeded sample pairs `(v, v + ξ)` of `Σ_c |μ_c(v) − μ_c(v + ξ)|`,
/// `ξ ~ N(0, σ²I)`, with perturbed points clamped to the grid bounds.
/// Gradients with respect to raw values are added to `grad_raw` scaled by
/// `weight` when given.
pub fn l_mat_smooth(
    grid: &AbsorptionGrid,
    n_points: usize,
    sigma: f64,
    seed: u64,
    mut grad_raw: Option<(&mut [f64], f64)>,
) -> f64 {
    if n_points == 0 || sigma <= 0.0 {
        return 0.0;
    }
    let (mut rng, pts) = sample_points(grid, n_points, seed);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let b = grid.aabb();
    let act = grad_raw.as_ref().map(|_| grid.activation_grad());
    let inv = 1.0 / n_points as f64;
    let mut value = 0.0;
    for v in pts {
        let xi = Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
        let w = (v + xi).sup(&b.min).inf(&b.max);
        let (Some(sa), Some(sb)) = (grid.stencil(&v), grid.stencil(&w)) else {
            continue;
        };
        let diff = grid.sample_mu(&v) - grid.sample_mu(&w);
        value += diff.abs().sum();
        if let (Some((g, weight)), Some(act)) = (grad_raw.as_mut(), act.as_ref()) {
            for ch in 0..3 {
                let s = diff[ch].signum() * inv * *weight;
                if diff[ch] == 0.0 {
                    continue;
                }
                for c in 0..8 {
                    let ia = sa.corners[c] * 3 + ch;
                    let ib = sb.corners[c] * 3 + ch;
                    g[ia] += s * sa.weights[c] * act[ia];
                    g[ib] -= s * sb.weights[c] * act[ib];
                }
            }
        }
    }
    value * inv
}

/// Mean over seeded points of `Σ_c μ_c²`, with optional raw gradient.
pub fn l_vol(grid: &AbsorptionGrid, n_points: usize, seed: u64, mut grad_raw: Option<(&mut [f64], f64)>) -> f64 {
    if n_points == 0 {
        return 0.0;
    }
    let (_, pts) = sample_points(grid, n_points, seed);
    let act = grad_raw.as_ref().map(|_| grid.activation_grad());
    let inv = 1.0 / n_points as f64;
    let mut value = 0.0;
    for v in pts {
        let Some(s) = grid.stencil(&v) else { continue };
        let mu = grid.sample_mu(&v);
        value += mu.norm_squared();
        if let (Some((g, weight)), Some(act)) = (grad_raw.as_mut(), act.as_ref()) {
            for ch in 0..3 {
                let gm = 2.0 * mu[ch] * inv * *weight;
                for c in 0..8 {
                    let i = s.corners[c] * 3 + ch;
                    g[i] += gm * s.weights[c] * act[i];
                }
            }
        }
    }
    value * inv
}

/// Mean absolute difference of two masks.
pub fn l_mask(rendered: &[f64], gt: &[f64]) -> Result<f64> {
    if rendered.len() != gt.len() || rendered.is_empty() {
        return Err(Error::ShapeMismatch("mask sizes differ or are empty".into()));
    }
    Ok(rendered.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / rendered.len() as f64)
}

/// Mean over edges of `(1 − n_i · n_j)²` for explicit per-vertex normals,
/// with the gradient on the normals.
pub fn edge_loss_on_normals(edges: &[[u32; 2]], normals: &[Vec3]) -> (f64, Vec<Vec3>) {
    let mut grads = vec![Vec3::zeros(); normals.len()];
    if edges.is_empty() {
        return (0.0, grads);
    }
    let inv = 1.0 / edges.len() as f64;
    let mut value = 0.0;
    for &[a, b] in edges {
        let (na, nb) = (normals[a as usize], normals[b as usize]);
        let r = 1.0 - na.dot(&nb);
        value += r * r;
        grads[a as usize] -= nb * (2.0 * r * inv);
        grads[b as usize] -= na * (2.0 * r * inv);
    }
    (value * inv, grads)
}

pub fn l_edge(mesh: &Mesh) -> f64 {
    edge_loss_on_normals(mesh.edges(), mesh.vertex_normals()).0
}

/// [`l_edge`] and its gradient with respect to vertex positions.
pub fn l_edge_grad(mesh: &Mesh) -> (f64, Vec<Vec3>) {
    let (v, gn) = edge_loss_on_normals(mesh.edges(), mesh.vertex_normals());
    (v, vertex_normals_backward(mesh, &gn))
}

fn laplacian_deltas(mesh: &Mesh, nbrs: &[Vec<u32>]) -> Vec<Vec3> {
    let p = mesh.positions();
    nbrs.iter()
        .enumerate()
        .map(|(i, n)| {
            if n.is_empty() {
                Vec3::zeros()
            } else {
                p[i] - n.iter().map(|&j| p[j as usize]).sum::<Vec3>() / n.len() as f64
            }
        })
        .collect()
}

/// Mean over vertices of the squared uniform-Laplacian magnitude.
pub fn l_laplacian(mesh: &Mesh) -> f64 {
    let d = laplacian_deltas(mesh, &mesh.vertex_neighbors());
    d.iter().map(|v| v.norm_squared()).sum::<f64>() / d.len() as f64
}

pub fn l_laplacian_grad(mesh: &Mesh) -> (f64, Vec<Vec3>) {
    let nbrs = mesh.vertex_neighbors();
    let d = laplacian_deltas(mesh, &nbrs);
    let inv = 1.0 / d.len() as f64;
    let mut g: Vec<Vec3> = d.iter().map(|v| v * (2.0 * inv)).collect();
    for (i, n) in nbrs.iter().enumerate() {
        if n.is_empty() {
            continue;
        }
        let share = d[i] * (2.0 * inv / n.len() as f64);
        for &j in n {
            g[j as usize] -= share;
        }
    }
    (d.iter().map(|v| v.norm_squared()).sum::<f64>() * inv, g)
}

/// Mean triangle area.
pub fn l_area(mesh: &Mesh) -> f64 {
    mesh.total_area() / mesh.face_count() as f64
}

pub fn l_area_grad(mesh: &Mesh) -> (f64, Vec<Vec3>) {
    let p = mesh.positions();
    let inv = 1.0 / mesh.face_count() as f64;
    let mut g = vec![Vec3::zeros(); p.len()];
    for f in mesh.faces() {
        let [a, b, c] = f.map(|i| p[i as usize]);
        let cr = (b - a).cross(&(c - a));
        let len = cr.norm();
        if len == 0.0 {
            continue;
        }
        let u = cr / len * (0.5 * inv);
        // ∂|cr|/∂v for each vertex: u × (opposite edge).
        g[f[0] as usize] += u.cross(&(b - c)) * -1.0;
        g[f[1] as usize] += u.cross(&(c - a)) * -1.0;
        g[f[2] as usize] += u.cross(&(a - b)) * -1.0;
    }
    (l_area(mesh), g)
}

/// Screen-space smoothness: mean over in-mask pixels whose four neighbors
/// are also in the mask of `|∇d| + |∇n| + |∇²n|` (forward differences for the
/// gradients, the 5-point stencil for the Laplacian). Depth is camera-space z.
pub fn l_screen_smooth(g: &GBuffer) -> f64 {
    let (w, h) = (g.width, g.height);
    let inside = |x: usize, y: usize| g.mask[y * w + x] >= 0.5;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if !(inside(x, y) && inside(x + 1, y) && inside(x - 1, y) && inside(x, y + 1) && inside(x, y - 1)) {
                continue;
            }
            let i = y * w + x;
            let (r, l, d, u) = (i + 1, i - 1, i + w, i - w);
            let z = &g.view_depth;
            let grad_d = ((z[r] - z[i]).powi(2) + (z[d] - z[i]).powi(2)).sqrt();
            let n = &g.normal;
            let grad_n = ((n[r] - n[i]).norm_squared() + (n[d] - n[i]).norm_squared()).sqrt();
            let lap_n = (n[r] + n[l] + n[d] + n[u] - n[i] * 4.0).norm();
            sum += grad_d + grad_n + lap_n;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{softplus_inv, Aabb};
    use crate::scenegen::make_icosphere;

    #[test]
    fn color_examples() {
        let c = [Rgb::new(0.3, 0.6, 0.1)];
        assert_eq!(l_color(&c, &c, &[false]).unwrap(), 0.0);
        assert_eq!(l_color(&[Rgb::new(5.0, 1.0, 2.0)], &[Rgb::zeros()], &[false]).unwrap(), 0.0);
        let v = l_color(&[Rgb::repeat(1.1)], &[Rgb::repeat(1.0)], &[false]).unwrap();
        assert!((v - 0.03).abs() < 1e-12);
        assert!(matches!(l_color(&c, &c, &[true]), Err(Error::AllCapped)));
    }

    #[test]
    fn tone_examples() {
        let c = Rgb::new(0.2, 0.5, 0.3);
        let v = l_tone(&[c * 2.0], &[c]);
        assert!((v + channel_variance(&c)).abs() < 1e-15);
        assert!((v + 0.0156).abs() < 1e-4);
        let g = Rgb::repeat(0.4);
        assert!(l_tone(&[g], &[g]).abs() < 1e-15);
        let v = l_tone(&[Rgb::x()], &[Rgb::y()]);
        assert!((v - (1.0 - 2.0 / 9.0)).abs() < 1e-9);
    }

    #[test]
    fn tone_is_scale_invariant_and_permutation_invariant() {
        let p = [Rgb::new(0.1, 0.7, 0.2), Rgb::new(0.5, 0.5, 0.1)];
        let t = [Rgb::new(0.3, 0.2, 0.2), Rgb::new(0.1, 0.9, 0.4)];
        let base = l_tone(&p, &t);
        let scaled: Vec<Rgb> = p.iter().map(|v| v * 3.7).collect();
        assert!((l_tone(&scaled, &t) - base).abs() < 1e-12);
        let (pr, tr) = ([p[1], p[0]], [t[1], t[0]]);
        assert!((l_tone(&pr, &tr) - base).abs() < 1e-15);
    }

    #[test]
    fn photometric_gradients_match_fd() {
        let p = vec![Rgb::new(0.1, 0.7, 0.2), Rgb::new(0.5, 0.5, 0.1), Rgb::new(0.2, 0.3, 0.4)];
        let t = vec![Rgb::new(0.3, 0.2, 0.2), Rgb::new(0.1, 0.9, 0.4), Rgb::new(0.2, 0.2, 0.2)];
        let capped = vec![false, false, true];
        let (_, gc) = l_color_grad(&p, &t, &capped).unwrap();
        let (_, gt) = l_tone_grad(&p, &t, &capped).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for ch in 0..3 {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp[i][ch] += h;
                pm[i][ch] -= h;
                let fdc = (l_color_grad(&pp, &t, &capped).unwrap().0 - l_color_grad(&pm, &t, &capped).unwrap().0) / (2.0 * h);
                let fdt = (l_tone_grad(&pp, &t, &capped).unwrap().0 - l_tone_grad(&pm, &t, &capped).unwrap().0) / (2.0 * h);
                assert!((fdc - gc[i][ch]).abs() < 1e-8);
                assert!((fdt - gt[i][ch]).abs() < 1e-8);
            }
        }
    }

    fn unit_box() -> Aabb {
        Aabb::new(Vec3::repeat(-1.0), Vec3::repeat(1.0))
    }

    #[test]
    fn mat_smooth_examples() {
        let g = AbsorptionGrid::constant([4; 3], unit_box(), 0.3).unwrap();
        assert!(l_mat_smooth(&g, 100, 0.1, 1, None) < 1e-12);
        let ramp = AbsorptionGrid::from_fn([4; 3], unit_box(), |p| Rgb::new(1.0 + 0.5 * p.x, 1.0, 1.0)).unwrap();
        assert_eq!(l_mat_smooth(&ramp, 100, 0.0, 1, None), 0.0);
        // E|ξ·∇μ| = σ |∇μ| √(2/π) for the single varying channel.
        let sigma = 0.01;
        let v = l_mat_smooth(&ramp, 20_000, sigma, 2, None);
        let want = sigma * 0.5 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((v - want).abs() / want < 0.05, "{v} vs {want}");
    }

    #[test]
    fn vol_examples() {
        let z = AbsorptionGrid::constant([4; 3], unit_box(), -800.0).unwrap();
        assert_eq!(l_vol(&z, 50, 1, None), 0.0);
        let k = 0.7;
        let c = AbsorptionGrid::constant([4; 3], unit_box(), softplus_inv(k)).unwrap();
        assert!((l_vol(&c, 50, 1, None) - 3.0 * k * k).abs() < 1e-12);
    }

    #[test]
    fn regularizer_raw_gradients_match_fd() {
        let mut g = AbsorptionGrid::constant([3; 3], unit_box(), 0.0).unwrap();
        g.update_raw(|r| {
            for (i, v) in r.iter_mut().enumerate() {
                *v = ((i * 37 % 11) as f64 - 5.0) * 0.2;
            }
        });
        let mut gs = vec![0.0; g.raw().len()];
        let mut gv = vec![0.0; g.raw().len()];
        l_mat_smooth(&g, 200, 0.3, 5, Some((&mut gs, 1.0)));
        l_vol(&g, 200, 5, Some((&mut gv, 1.0)));
        let h = 1e-6;
        for i in [0, 13, 40, 77, 100] {
            let mut p = g.clone();
            p.update_raw(|r| r[i] += h);
            let mut m = g.clone();
            m.update_raw(|r| r[i] -= h);
            let fd = (l_vol(&p, 200, 5, None) - l_vol(&m, 200, 5, None)) / (2.0 * h);
            assert!((fd - gv[i]).abs() < 1e-7);
            let fd = (l_mat_smooth(&p, 200, 0.3, 5, None) - l_mat_smooth(&m, 200, 0.3, 5, None)) / (2.0 * h);
            assert!((fd - gs[i]).abs() < 1e-6, "{i}: {fd} {}", gs[i]);
        }
    }

    #[test]
    fn mask_examples() {
        let a = vec![1.0, 0.0, 1.0, 1.0];
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert_eq!(l_mask(&a, &a).unwrap(), 0.0);
        assert_eq!(l_mask(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn mask_half_overlapping_discs() {
        let (n, r) = (200usize, 40.0f64);
        let disc = |cx: f64| -> Vec<f64> {
            (0..n * n)
                .map(|i| {
                    let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
                    if (x - cx).powi(2) + (y - 100.0).powi(2) <= r * r { 1.0 } else { 0.0 }
                })
                .collect()
        };
        let d = r;
        let a = disc(100.0 - d / 2.0);
        let b = disc(100.0 + d / 2.0);
        let lens = 2.0 * r * r * (d / (2.0 * r)).acos() - d / 2.0 * (4.0 * r * r - d * d).sqrt();
        let sym = 2.0 * (std::f64::consts::PI * r * r - lens);
        let got = l_mask(&a, &b).unwrap() * (n * n) as f64;
        // One pixel of discretization along both circle perimeters.
        assert!((got - sym).abs() < 2.0 * 2.0 * std::f64::consts::PI * r, "{got} {sym}");
    }

    #[test]
    fn edge_examples() {
        let plane = Mesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::new(1.0, 1.0, 0.0)],
            vec![[0, 1, 3], [0, 3, 2]],
        )
        .unwrap();
        assert_eq!(l_edge(&plane), 0.0);
        let normals = vec![Vec3::z(), Vec3::x()];
        assert_eq!(edge_loss_on_normals(&[[0, 1]], &normals).0, 1.0);
        let e: Vec<f64> = (1..=3).map(|s| l_edge(&make_icosphere(1.0, s))).collect();
        assert!(e[0] > e[1] && e[1] > e[2]);
    }

    fn grid_mesh(n: usize) -> Mesh {
        let mut p = Vec::new();
        for j in 0..=n {
            for i in 0..=n {
                p.push(Vec3::new(i as f64, j as f64, 0.0));
            }
        }
        let id = |i: usize, j: usize| (j * (n + 1) + i) as u32;
        let mut f = Vec::new();
        for j in 0..n {
            for i in 0..n {
                f.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                f.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        Mesh::new(p, f).unwrap()
    }

    #[test]
    fn laplacian_examples() {
        let m = grid_mesh(4);
        let nbrs = m.vertex_neighbors();
        let d = laplacian_deltas(&m, &nbrs);
        let interior = |i: usize| {
            let (x, y) = (i % 5, i / 5);
            (1..4).contains(&x) && (1..4).contains(&y)
        };
        for (i, v) in d.iter().enumerate() {
            if interior(i) {
                assert!(v.norm() < 1e-15);
            }
        }
        // Displace the center vertex of the regular hexagonal 1-ring.
        let mut p = m.positions().to_vec();
        let delta = Vec3::new(0.0, 0.0, 0.3);
        p[12] += delta;
        let mut moved = m.clone();
        moved.set_positions(p).unwrap();
        let d2 = laplacian_deltas(&moved, &nbrs);
        assert!((d2[12] - delta).norm() < 1e-15);
        let oracle: f64 = d2.iter().map(|v| v.norm_squared()).sum::<f64>() / 25.0;
        assert!((l_laplacian(&moved) - oracle).abs() < 1e-15);
        let s = 2.5;
        let scaled = moved.transformed(s, Vec3::zeros()).unwrap();
        assert!((l_laplacian(&scaled) - s * s * l_laplacian(&moved)).abs() < 1e-12);
    }

    #[test]
    fn area_examples() {
        let tri = Mesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![[0, 1, 2]]).unwrap();
        assert_eq!(l_area(&tri), 0.5);
        let s = make_icosphere(1.0, 3);
        let scaled = s.transformed(1.7, Vec3::zeros()).unwrap();
        assert!((l_area(&scaled) - 1.7 * 1.7 * l_area(&s)).abs() < 1e-12);
        let total = s.total_area();
        assert!((total - 4.0 * std::f64::consts::PI).abs() / (4.0 * std::f64::consts::PI) < 0.02);
    }

    #[test]
    fn geometry_gradients_match_fd() {
        let mut m = make_icosphere(1.0, 1);
        let mut p = m.positions().to_vec();
        for (i, v) in p.iter_mut().enumerate() {
            *v *= 1.0 + 0.05 * ((i * 7 % 5) as f64 - 2.0);
        }
        m.set_positions(p).unwrap();
        let fns: [(&str, fn(&Mesh) -> (f64, Vec<Vec3>)); 3] =
            [("edge", l_edge_grad), ("lap", l_laplacian_grad), ("area", l_area_grad)];
        for (name, f) in fns {
            let (_, g) = f(&m);
            let h = 1e-6;
            for &(v, k) in &[(0usize, 0usize), (5, 1), (17, 2), (30, 0)] {
                let mut pp = m.positions().to_vec();
                pp[v][k] += h;
                let mut mp = m.clone();
                mp.set_positions(pp).unwrap();
                let mut pm = m.positions().to_vec();
                pm[v][k] -= h;
                let mut mm = m.clone();
                mm.set_positions(pm).unwrap();
                let fd = (f(&mp).0 - f(&mm).0) / (2.0 * h);
                assert!((fd - g[v][k]).abs() < 1e-7, "{name} v{v} k{k}: {fd} vs {}", g[v][k]);
            }
        }
    }

    #[test]
    fn weights_and_total() {
        let c = LossComponents {
            color: 2.0,
            tone: 3.0,
            vol: 5.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&c, &LossWeights::zero()), 0.0);
        let mut w = LossWeights::zero();
        w.tone = 0.5;
        assert_eq!(total_loss(&c, &w), 1.5);
        let d = LossWeights::default();
        assert_eq!((d.color, d.tone, d.vol), (1.0, 0.001, 0.0005));
    }
}
