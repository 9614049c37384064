//! Analytic gradients of rendered radiance by path replay.
//!
//! Each ray's recorded path tree is differentiated at fixed topology: a
//! top-down pass distributes radiance adjoints through Fresnel weights and
//! transmittances, and a bottom-up pass pushes direction and origin adjoints
//! through reflection, refraction, shading-normal interpolation and the
//! barycentric ray/triangle solve onto vertices, the IoR and grid values.

mod fd;
mod silhouette;

pub use fd::{finite_diff_check, Coord, FdEntry, FdReport};
pub use silhouette::{silhouette_mask_gradient, silhouette_edges, SilhouetteConfig, SilhouetteResult};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{l_color_grad, l_tone_grad, LossComponents, LossWeights};
use crate::math::{normalize_backward, Mat3, Ray, Rgb, Vec3};
use crate::mesh::vertex_normals_backward;
use crate::optics::{fresnel_backward, reflect_backward, refract_backward};
use crate::tracer::{render_rays, CappedPolicy, NodeKind, PathRecord, RayResult, RenderConfig, Scene, NO_CHILD};

/// Rays per accumulation chunk. Fixed so that reduction order, and hence the
/// result bits, do not depend on the worker count.
const CHUNK: usize = 256;
/// Chunks reduced per parallel wave (bounds buffer memory).
const WAVE: usize = 8;

/// Which parameter blocks are held fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Freeze {
    pub vertices: bool,
    pub ior: bool,
    pub grid: bool,
    pub env: bool,
}

impl Freeze {
    pub fn geometry() -> Self {
        Freeze {
            vertices: true,
            env: true,
            ..Default::default()
        }
    }

    pub fn all_but_env() -> Self {
        Freeze {
            env: true,
            ..Default::default()
        }
    }
}

/// Gradients for every parameter block of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub vertices: Vec<Vec3>,
    pub ior: f64,
    /// Indexed like the grid's raw values.
    pub grid: Vec<f64>,
    pub env: Option<Vec<Rgb>>,
}

impl GradientSet {
    pub fn zeros_for(scene: &Scene, with_env: bool) -> Self {
        let obj = scene.object.as_ref();
        GradientSet {
            vertices: vec![Vec3::zeros(); obj.map_or(0, |o| o.mesh().vertex_count())],
            ior: 0.0,
            grid: vec![0.0; obj.and_then(|o| o.grid.as_ref()).map_or(0, |g| g.raw().len())],
            env: with_env.then(|| vec![Rgb::zeros(); scene.env.texels().len()]),
        }
    }

    pub fn add_scaled(&mut self, other: &GradientSet, s: f64) {
        for (a, b) in self.vertices.iter_mut().zip(&other.vertices) {
            *a += b * s;
        }
        self.ior += other.ior * s;
        for (a, b) in self.grid.iter_mut().zip(&other.grid) {
            *a += b * s;
        }
        if let (Some(a), Some(b)) = (self.env.as_mut(), other.env.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y * s;
            }
        }
    }

    pub fn apply_freeze(&mut self, f: &Freeze) {
        if f.vertices {
            self.vertices.iter_mut().for_each(|v| *v = Vec3::zeros());
        }
        if f.ior {
            self.ior = 0.0;
        }
        if f.grid {
            self.grid.iter_mut().for_each(|v| *v = 0.0);
        }
        if f.env {
            self.env = None;
        }
    }

    /// Errors naming the first block holding a non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        if !self.vertices.iter().all(|v| v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFiniteGradient("vertices"));
        }
        if !self.ior.is_finite() {
            return Err(Error::NonFiniteGradient("ior"));
        }
        if !self.grid.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient("grid"));
        }
        if let Some(e) = &self.env {
            if !e.iter().all(|v| v.iter().all(|c| c.is_finite())) {
                return Err(Error::NonFiniteGradient("env"));
            }
        }
        Ok(())
    }
}

struct Accum {
    pos: Vec<Vec3>,
    vnormal: Vec<Vec3>,
    mu: Vec<f64>,
    ior: f64,
    env: Option<Vec<Rgb>>,
}

impl Accum {
    fn new(scene: &Scene, with_env: bool) -> Self {
        let g = GradientSet::zeros_for(scene, with_env);
        Accum {
            vnormal: g.vertices.clone(),
            pos: g.vertices,
            mu: g.grid,
            ior: 0.0,
            env: g.env,
        }
    }

    fn merge(&mut self, o: &Accum) {
        for (a, b) in self.pos.iter_mut().zip(&o.pos) {
            *a += b;
        }
        for (a, b) in self.vnormal.iter_mut().zip(&o.vnormal) {
            *a += b;
        }
        for (a, b) in self.mu.iter_mut().zip(&o.mu) {
            *a += b;
        }
        self.ior += o.ior;
        if let (Some(a), Some(b)) = (self.env.as_mut(), o.env.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Gradient of `Σ_r grad_radiance[r] · L_r` over recorded paths, holding
/// each path's topology fixed.
pub fn radiance_backward(
    scene: &Scene,
    records: &[&PathRecord],
    grad_radiance: &[Rgb],
    cfg: &RenderConfig,
    freeze: &Freeze,
) -> Result<GradientSet> {
    if records.len() != grad_radiance.len() {
        return Err(Error::ShapeMismatch("one radiance gradient per record is required".into()));
    }
    let with_env = !freeze.env;
    let mut total = Accum::new(scene, with_env);
    let chunks: Vec<(usize, usize)> = (0..records.len())
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(records.len())))
        .collect();
    for wave in chunks.chunks(WAVE) {
        let parts: Vec<Accum> = wave
            .par_iter()
            .map(|&(s, e)| {
                let mut acc = Accum::new(scene, with_env);
                for i in s..e {
                    if grad_radiance[i] != Rgb::zeros() {
                        record_backward(scene, records[i], &grad_radiance[i], cfg, &mut acc);
                    }
                }
                acc
            })
            .collect();
        for p in &parts {
            total.merge(p);
        }
    }
    let mut out = GradientSet {
        vertices: total.pos,
        ior: total.ior,
        grid: total.mu,
        env: total.env,
    };
    if let Some(obj) = scene.object.as_ref() {
        if total.vnormal.iter().any(|v| *v != Vec3::zeros()) {
            let from_normals = vertex_normals_backward(obj.mesh(), &total.vnormal);
            for (a, b) in out.vertices.iter_mut().zip(&from_normals) {
                *a += b;
            }
        }
        if let Some(g) = obj.grid.as_ref() {
            for (v, a) in out.grid.iter_mut().zip(g.activation_grad()) {
                *v *= a;
            }
        }
    }
    out.apply_freeze(freeze);
    out.check_finite()?;
    Ok(out)
}

fn record_backward(scene: &Scene, rec: &PathRecord, root_grad: &Rgb, cfg: &RenderConfig, acc: &mut Accum) {
    let nodes = &rec.nodes;
    let n = nodes.len();
    let mut lbar = vec![Rgb::zeros(); n];
    let mut rbar = vec![0.0; n];
    let mut parent = vec![NO_CHILD; n];
    lbar[0] = *root_grad;
    for i in 0..n {
        let node = &nodes[i];
        for &c in &node.children {
            if c != NO_CHILD {
                parent[c as usize] = i as u32;
            }
        }
        let inner_bar = lbar[i].component_mul(&node.transmittance);
        match node.kind {
            NodeKind::Split => {
                let (cr, ct) = (node.children[0] as usize, node.children[1] as usize);
                lbar[cr] = inner_bar * node.reflectance;
                lbar[ct] = inner_bar * node.transmission;
                rbar[i] = inner_bar.dot(&(nodes[cr].radiance - nodes[ct].radiance));
            }
            NodeKind::Tir => lbar[node.children[0] as usize] = inner_bar,
            NodeKind::Escaped | NodeKind::Capped => {}
        }
    }

    let obj = scene.object.as_ref();
    let mesh = obj.map(|o| o.mesh());
    let mut g_x = vec![Vec3::zeros(); n];
    let mut g_r = vec![Vec3::zeros(); n];
    let mut g_t = vec![Vec3::zeros(); n];
    for i in (0..n).rev() {
        let node = &nodes[i];
        let d = node.dir;
        let mut g_o = Vec3::zeros();
        let mut g_d = Vec3::zeros();
        let inner_bar = lbar[i].component_mul(&node.transmittance);
        let env_grad = |acc: &mut Accum, grad: &Rgb| -> Vec3 {
            match acc.env.as_mut() {
                Some(e) => {
                    let mut cb = |k: usize, v: Rgb| e[k] += v;
                    scene.env.sample_backward(&d, grad, Some(&mut cb))
                }
                None => scene.env.sample_backward(&d, grad, None),
            }
        };
        match node.kind {
            NodeKind::Escaped => {
                if lbar[i] != Rgb::zeros() {
                    g_d += env_grad(acc, &lbar[i]);
                }
            }
            NodeKind::Capped => {
                if cfg.capped_policy == CappedPolicy::Environment && inner_bar != Rgb::zeros() {
                    g_d += env_grad(acc, &inner_bar);
                }
            }
            NodeKind::Split | NodeKind::Tir => {}
        }
        if let (Some(h), Some(mesh), Some(obj)) = (node.hit.as_ref(), mesh, obj) {
            let mut g_point = g_x[i];
            let mut g_beta = [0.0; 3];
            if matches!(node.kind, NodeKind::Split | NodeKind::Tir) {
                let omega_i = -d;
                let nrm = node.normal;
                let (mut g_wi, mut g_n) = reflect_backward(&omega_i, &nrm, &g_r[i]);
                if node.kind == NodeKind::Split {
                    let [g_ci, g_ct, mut g_ei, mut g_et] =
                        fresnel_backward(node.cos_i, node.cos_t, node.eta_i, node.eta_t, rbar[i]);
                    let rg = refract_backward(&omega_i, &nrm, node.eta_i, node.eta_t, &g_t[i], g_ct);
                    g_wi += rg.omega_i;
                    g_n += rg.n;
                    g_ei += rg.eta_i;
                    g_et += rg.eta_t;
                    let dot = omega_i.dot(&nrm);
                    if dot > 0.0 && dot < 1.0 {
                        g_wi += nrm * g_ci;
                        g_n += omega_i * g_ci;
                    }
                    acc.ior += if h.entering { g_et } else { g_ei };
                }
                g_d -= g_wi;
                // Oriented shading normal s · normalize(Σ β_k n_k).
                let blend = mesh.blend_normal(h.face, &h.bary);
                if blend.norm() > 1e-12 && g_n != Vec3::zeros() {
                    let s = if nrm.dot(&h.normal) < 0.0 { -1.0 } else { 1.0 };
                    let g_m = normalize_backward(&blend, &g_n) * s;
                    let f = mesh.faces()[h.face as usize];
                    let vn = mesh.vertex_normals();
                    for k in 0..3 {
                        g_beta[k] += g_m.dot(&vn[f[k] as usize]);
                        acc.vnormal[f[k] as usize] += g_m * h.bary[k];
                    }
                }
            }
            if node.inside && lbar[i] != Rgb::zeros() {
                if let Some(grid) = obj.grid.as_ref() {
                    let g_tr = lbar[i].component_mul(&node.inner);
                    let mu = &mut acc.mu;
                    let (g0, g1) = grid.transmittance_backward(
                        &node.origin,
                        &h.point,
                        cfg.absorption_samples,
                        &g_tr,
                        |k, v| mu[k] += v,
                    );
                    g_o += g0;
                    g_point += g1;
                }
            }
            intersection_backward(mesh, &Ray::new(node.origin, d), h, &g_point, &g_beta, &mut g_o, &mut g_d, &mut acc.pos);
        }
        let p = parent[i];
        if p != NO_CHILD {
            let p = p as usize;
            g_x[p] += g_o;
            if nodes[p].children[0] == i as u32 {
                g_r[p] += g_d;
            } else {
                g_t[p] += g_d;
            }
        }
    }
}

/// Adjoint of the hit point `x = o + t d` and barycentrics `(β0, β1, β2)`
/// solved from `o + t d = v0 + β1 e1 + β2 e2`.
#[allow(clippy::too_many_arguments)]
fn intersection_backward(
    mesh: &crate::mesh::Mesh,
    ray: &Ray,
    h: &crate::mesh::HitRecord,
    g_point: &Vec3,
    g_beta: &[f64; 3],
    g_o: &mut Vec3,
    g_d: &mut Vec3,
    g_pos: &mut [Vec3],
) {
    if *g_point == Vec3::zeros() && g_beta.iter().all(|b| *b == 0.0) {
        return;
    }
    let [v0, v1, v2] = mesh.face_vertices(h.face);
    let m = Mat3::from_columns(&[-ray.dir, v1 - v0, v2 - v0]);
    *g_o += g_point;
    *g_d += g_point * h.t;
    let y_bar = Vec3::new(g_point.dot(&ray.dir), g_beta[1] - g_beta[0], g_beta[2] - g_beta[0]);
    let Some(r) = m.transpose().lu().solve(&y_bar) else {
        return;
    };
    *g_o += r;
    *g_d += r * h.t;
    let f = mesh.faces()[h.face as usize];
    for k in 0..3 {
        g_pos[f[k] as usize] -= r * h.bary[k];
    }
}

/// Options for [`backward`].
#[derive(Clone, Copy, Debug)]
pub struct BackwardConfig {
    pub render: RenderConfig,
    pub weights: LossWeights,
    pub freeze: Freeze,
}

#[derive(Clone, Debug)]
pub struct BackwardOutput {
    /// `λ_color · l_color + λ_tone · l_tone`.
    pub loss: f64,
    pub components: LossComponents,
    pub grads: GradientSet,
    pub capped_rays: usize,
    pub results: Vec<RayResult>,
}

/// Traces `rays`, evaluates the photometric losses against `targets`
/// (capped rays excluded) and returns the loss with its gradients.
pub fn backward(scene: &Scene, rays: &[Ray], targets: &[Rgb], cfg: &BackwardConfig) -> Result<BackwardOutput> {
    if rays.len() != targets.len() {
        return Err(Error::ShapeMismatch("one target per ray is required".into()));
    }
    let results = render_rays(scene, rays, &cfg.render);
    let pred: Vec<Rgb> = results.iter().map(|r| r.radiance).collect();
    let capped: Vec<bool> = results.iter().map(|r| r.capped).collect();
    let (lc, gc) = l_color_grad(&pred, targets, &capped)?;
    let (lt, gt) = l_tone_grad(&pred, targets, &capped)?;
    let w = &cfg.weights;
    let grad_rad: Vec<Rgb> = gc.iter().zip(&gt).map(|(a, b)| a * w.color + b * w.tone).collect();
    let records: Vec<&PathRecord> = results.iter().map(|r| &r.record).collect();
    let grads = radiance_backward(scene, &records, &grad_rad, &cfg.render, &cfg.freeze)?;
    Ok(BackwardOutput {
        loss: w.color * lc + w.tone * lt,
        components: LossComponents {
            color: lc,
            tone: lt,
            ..Default::default()
        },
        grads,
        capped_rays: capped.iter().filter(|c| **c).count(),
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environ::EnvMap;
    use crate::math::{softplus_grad, softplus_inv, Aabb};
    use crate::medium::AbsorptionGrid;
    use crate::scenegen::{make_icosphere, make_slab, studio_env};
    use crate::tracer::trace;

    fn sphere_scene(mu_raw: Option<f64>) -> Scene {
        let mesh = make_icosphere(1.0, 2);
        let grid = mu_raw.map(|r| AbsorptionGrid::for_object(&mesh.bounds(), 8, r).unwrap());
        Scene::new(studio_env(64, 32), mesh, 1.5, grid)
    }

    #[test]
    fn miss_has_zero_gradients() {
        let s = sphere_scene(None);
        let rays = [Ray::new(Vec3::new(5.0, 5.0, 5.0), Vec3::x())];
        let cfg = BackwardConfig {
            render: RenderConfig::train(),
            weights: LossWeights::default(),
            freeze: Freeze::all_but_env(),
        };
        let out = backward(&s, &rays, &[Rgb::repeat(0.5)], &cfg).unwrap();
        assert!(out.grads.vertices.iter().all(|v| *v == Vec3::zeros()));
        assert_eq!(out.grads.ior, 0.0);
    }

    #[test]
    fn beer_lambert_closed_form() {
        // With η = 1 the central ray crosses the sphere unbent, so
        // −log L = −log env + μ · chord and the derivative with respect to
        // a uniform raw shift is chord · softplus'(raw).
        let raw = softplus_inv(0.8);
        let mesh = make_icosphere(1.0, 3);
        let grid = AbsorptionGrid::for_object(&mesh.bounds(), 8, raw).unwrap();
        let s = Scene::new(EnvMap::constant(8, 4, Rgb::repeat(0.7)), mesh, 1.0, Some(grid));
        let ray = Ray::new(Vec3::new(0.0, 0.0, 5.0), -Vec3::z());
        let cfg = RenderConfig::train();
        let res = trace(&s, &ray, &cfg);
        let inner = &res.record.nodes[res.record.nodes[0].children[1] as usize];
        let chord = (inner.hit.unwrap().point - inner.origin).norm();
        let l = res.radiance.x;
        let g = radiance_backward(&s, &[&res.record], &[Rgb::new(-1.0 / l, 0.0, 0.0)], &cfg, &Freeze::default()).unwrap();
        let total: f64 = g.grid.iter().sum();
        assert!((total - chord * softplus_grad(raw)).abs() < 1e-4, "{total} vs {}", chord * softplus_grad(raw));
        assert!((l - 0.7 * (-0.8 * chord).exp()).abs() < 1e-12);
    }

    #[test]
    fn ior_single_ray_matches_fd() {
        let s = sphere_scene(Some(-1.0));
        let ray = Ray::new(Vec3::new(0.31, -0.22, 4.0), Vec3::new(-0.05, 0.02, -1.0).normalize());
        let cfg = RenderConfig::train();
        let res = trace(&s, &ray, &cfg);
        let w = Rgb::new(0.4, 1.0, -0.3);
        let g = radiance_backward(&s, &[&res.record], &[w], &cfg, &Freeze::geometry()).unwrap();
        let h = 1e-4;
        let eval = |d: f64| {
            let mut s2 = s.clone();
            s2.object.as_mut().unwrap().ior += d;
            let r = trace(&s2, &ray, &cfg);
            assert_eq!(r.record.topology(), res.record.topology());
            w.dot(&r.radiance)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((g.ior - fd).abs() <= 5e-3 * fd.abs().max(g.ior.abs()), "{} vs {fd}", g.ior);
    }

    #[test]
    fn frozen_blocks_are_exactly_zero() {
        let s = sphere_scene(Some(0.0));
        let rays: Vec<Ray> = (0..20).map(|k| Ray::new(Vec3::new(0.03 * k as f64 - 0.3, 0.1, 4.0), -Vec3::z())).collect();
        let targets = vec![Rgb::new(0.3, 0.2, 0.1); 20];
        let mut cfg = BackwardConfig {
            render: RenderConfig::train(),
            weights: LossWeights::default(),
            freeze: Freeze::geometry(),
        };
        let out = backward(&s, &rays, &targets, &cfg).unwrap();
        assert!(out.grads.vertices.iter().all(|v| *v == Vec3::zeros()));
        assert!(out.grads.ior != 0.0);
        assert!(out.grads.grid.iter().any(|v| *v != 0.0));
        cfg.freeze = Freeze {
            ior: true,
            grid: true,
            env: true,
            vertices: false,
        };
        let out = backward(&s, &rays, &targets, &cfg).unwrap();
        assert_eq!(out.grads.ior, 0.0);
        assert!(out.grads.grid.iter().all(|v| *v == 0.0));
        assert!(out.grads.vertices.iter().any(|v| *v != Vec3::zeros()));
    }

    #[test]
    fn weighted_sum_linearity() {
        let s = sphere_scene(Some(-0.5));
        let rays: Vec<Ray> = (0..30).map(|k| Ray::new(Vec3::new(0.02 * k as f64 - 0.3, -0.2, 4.0), -Vec3::z())).collect();
        let targets = vec![Rgb::new(0.3, 0.25, 0.1); 30];
        let run = |c: f64, t: f64| {
            let mut w = LossWeights::zero();
            w.color = c;
            w.tone = t;
            let cfg = BackwardConfig {
                render: RenderConfig::train(),
                weights: w,
                freeze: Freeze::all_but_env(),
            };
            backward(&s, &rays, &targets, &cfg).unwrap().grads
        };
        let both = run(2.0, 0.5);
        let mut sum = run(1.0, 0.0);
        sum.add_scaled(&sum.clone(), 1.0);
        sum.add_scaled(&run(0.0, 1.0), 0.5);
        assert!((both.ior - sum.ior).abs() < 1e-10);
        for (a, b) in both.vertices.iter().zip(&sum.vertices) {
            assert!((a - b).norm() < 1e-10);
        }
        for (a, b) in both.grid.iter().zip(&sum.grid) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn bit_identical_across_threads() {
        let s = sphere_scene(Some(-0.5));
        let rays: Vec<Ray> = (0..700)
            .map(|k| {
                let a = k as f64 * 0.37;
                Ray::new(Vec3::new(0.8 * a.sin(), 0.8 * a.cos() * (k as f64 / 700.0), 4.0), -Vec3::z())
            })
            .collect();
        let targets = vec![Rgb::new(0.3, 0.25, 0.1); rays.len()];
        let cfg = BackwardConfig {
            render: RenderConfig::train(),
            weights: LossWeights::default(),
            freeze: Freeze::all_but_env(),
        };
        let a = crate::parallel::with_threads(1, || backward(&s, &rays, &targets, &cfg).unwrap().grads);
        let b = crate::parallel::with_threads(4, || backward(&s, &rays, &targets, &cfg).unwrap().grads);
        assert_eq!(a, b);
    }

    #[test]
    fn env_gradient_matches_fd() {
        let mesh = make_slab(0.4, 3.0);
        let env = EnvMap::from_fn(16, 8, |d| Rgb::new(0.5 + 0.3 * d.x, 0.4 + 0.2 * d.y, 0.6 - 0.1 * d.z)).unwrap();
        let grid = AbsorptionGrid::constant([4; 3], Aabb::new(Vec3::repeat(-2.0), Vec3::repeat(2.0)), 0.0).unwrap();
        let s = Scene::new(env, mesh, 1.4, Some(grid));
        let ray = Ray::new(Vec3::new(0.2, 0.1, 3.0), Vec3::new(0.2, -0.1, -1.0).normalize());
        let cfg = RenderConfig::train();
        let res = trace(&s, &ray, &cfg);
        let w = Rgb::new(1.0, 0.5, 0.25);
        let g = radiance_backward(&s, &[&res.record], &[w], &cfg, &Freeze::default()).unwrap();
        let env_g = g.env.unwrap();
        let k = (0..env_g.len()).max_by(|&a, &b| env_g[a].x.total_cmp(&env_g[b].x)).unwrap();
        let h = 1e-6;
        let eval = |delta: f64| {
            let mut s2 = s.clone();
            let mut t = s2.env.texels().to_vec();
            t[k].x += delta;
            s2.env.set_texels(t).unwrap();
            w.dot(&trace(&s2, &ray, &cfg).radiance)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((fd - env_g[k].x).abs() < 1e-8, "{fd} {}", env_g[k].x);
    }
}
