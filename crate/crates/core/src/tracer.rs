//! Deterministic recursive specular ray tracer with replayable path records.
//!
//! A ray with `d` prior events is intersected against the object. A miss
//! returns the environment; a hit at `d >= max_depth` is depth-capped;
//! otherwise the hit spawns a reflected child and, unless totally internally
//! reflected, a refracted child, both at depth `d + 1`. Radiance returned
//! along a segment inside the object is attenuated by its transmittance.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::environ::EnvMap;
use crate::error::Result;
use crate::imageio::Image;
use crate::math::{Ray, Rgb, Vec3};
use crate::medium::AbsorptionGrid;
use crate::mesh::{intersect_triangle, Bvh, HitRecord, Mesh};
use crate::optics::{fresnel, reflect, refract};

pub const NO_CHILD: u32 = u32::MAX;

/// The refractive object: geometry, IoR and interior absorption.
#[derive(Clone, Debug)]
pub struct Object {
    mesh: Mesh,
    bvh: Bvh,
    diagonal: f64,
    pub ior: f64,
    pub grid: Option<AbsorptionGrid>,
}

impl Object {
    pub fn new(mesh: Mesh, ior: f64, grid: Option<AbsorptionGrid>) -> Self {
        let bvh = Bvh::build(&mesh);
        let diagonal = mesh.bounds().diagonal();
        Object {
            mesh,
            bvh,
            diagonal,
            ior,
            grid,
        }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    /// Moves the vertices and rebuilds the BVH.
    pub fn set_positions(&mut self, positions: Vec<Vec3>) -> Result<()> {
        self.mesh.set_positions(positions)?;
        self.bvh = Bvh::build(&self.mesh);
        self.diagonal = self.mesh.bounds().diagonal();
        Ok(())
    }

    pub fn set_mesh(&mut self, mesh: Mesh) {
        *self = Object::new(mesh, self.ior, self.grid.take());
    }

    pub fn mu(&self, x: &Vec3) -> Rgb {
        self.grid.as_ref().map_or(Rgb::zeros(), |g| g.sample_mu(x))
    }

    pub fn t_min(&self, scale: f64) -> f64 {
        scale * self.diagonal
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub env: EnvMap,
    pub object: Option<Object>,
}

impl Scene {
    pub fn empty(env: EnvMap) -> Self {
        Scene { env, object: None }
    }

    pub fn new(env: EnvMap, mesh: Mesh, ior: f64, grid: Option<AbsorptionGrid>) -> Self {
        Scene {
            env,
            object: Some(Object::new(mesh, ior, grid)),
        }
    }

    pub fn intersect(&self, ray: &Ray, t_min: f64) -> Option<HitRecord> {
        let obj = self.object.as_ref()?;
        obj.bvh.intersect(&obj.mesh, ray, t_min)
    }
}

/// What a depth-capped branch returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CappedPolicy {
    /// Zero radiance (training).
    Zero,
    /// Environment along the final direction (evaluation renders).
    Environment,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub max_depth: u32,
    pub absorption_samples: usize,
    /// Self-intersection offset as a fraction of the mesh bbox diagonal.
    pub t_min_scale: f64,
    pub capped_policy: CappedPolicy,
    /// A ray counts as capped when some capped branch carries more than this
    /// path throughput.
    pub capped_threshold: f64,
}

impl RenderConfig {
    pub fn train() -> Self {
        RenderConfig {
            max_depth: 4,
            absorption_samples: crate::medium::DEFAULT_SAMPLES,
            t_min_scale: 1e-4,
            capped_policy: CappedPolicy::Zero,
            capped_threshold: 1e-3,
        }
    }

    pub fn eval() -> Self {
        RenderConfig {
            max_depth: 8,
            capped_policy: CappedPolicy::Environment,
            ..Self::train()
        }
    }
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self::train()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    /// Left the scene; radiance is the environment lookup.
    Escaped,
    /// Hit the surface at the depth cap.
    Capped,
    /// Fresnel split into a reflected and a refracted child.
    Split,
    /// Total internal reflection: reflected child only.
    Tir,
}

/// One traced segment: the incoming ray, what it hit, and what it returned.
#[derive(Clone, Debug, PartialEq)]
pub struct PathNode {
    pub origin: Vec3,
    pub dir: Vec3,
    pub depth: u32,
    pub kind: NodeKind,
    pub hit: Option<HitRecord>,
    /// The segment from `origin` to the hit lies inside the object.
    pub inside: bool,
    /// The propagated inside flag disagreed with the geometric side.
    pub side_mismatch: bool,
    pub transmittance: Rgb,
    /// Shading normal oriented toward the incoming direction.
    pub normal: Vec3,
    pub eta_i: f64,
    pub eta_t: f64,
    pub cos_i: f64,
    pub cos_t: f64,
    pub reflectance: f64,
    pub transmission: f64,
    /// `[reflected, refracted]` child indices or [`NO_CHILD`].
    pub children: [u32; 2],
    /// Radiance before the segment's transmittance.
    pub inner: Rgb,
    pub radiance: Rgb,
    /// Product of Fresnel weights and transmittances above this node.
    pub throughput: f64,
}

/// Preorder tree of the segments spawned by one camera ray.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathRecord {
    pub nodes: Vec<PathNode>,
}

impl PathRecord {
    pub fn radiance(&self) -> Rgb {
        self.nodes.first().map_or(Rgb::zeros(), |n| n.radiance)
    }

    pub fn event_count(&self) -> usize {
        self.nodes.len()
    }

    /// Face sequence and node kinds; equal keys mean equal path topology.
    pub fn topology(&self) -> Vec<(u32, NodeKind, bool)> {
        self.nodes
            .iter()
            .map(|n| (n.hit.map_or(u32::MAX, |h| h.face), n.kind, n.inside))
            .collect()
    }

    pub fn first_hit(&self) -> Option<&HitRecord> {
        self.nodes.first().and_then(|n| n.hit.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct RayResult {
    pub radiance: Rgb,
    pub record: PathRecord,
    /// A capped branch carried more than the configured throughput.
    pub capped: bool,
}

struct Tracer<'a> {
    scene: &'a Scene,
    cfg: &'a RenderConfig,
    t_min: f64,
    nodes: Vec<PathNode>,
    capped: bool,
}

impl Tracer<'_> {
    fn node(&mut self, ray: Ray, depth: u32, inside_flag: bool, throughput: f64) -> u32 {
        let idx = self.nodes.len() as u32;
        let hit = self.scene.intersect(&ray, self.t_min);
        let mut node = PathNode {
            origin: ray.origin,
            dir: ray.dir,
            depth,
            kind: NodeKind::Escaped,
            hit,
            inside: false,
            side_mismatch: false,
            transmittance: Rgb::repeat(1.0),
            normal: Vec3::zeros(),
            eta_i: 1.0,
            eta_t: 1.0,
            cos_i: 0.0,
            cos_t: 0.0,
            reflectance: 0.0,
            transmission: 0.0,
            children: [NO_CHILD; 2],
            inner: Rgb::zeros(),
            radiance: Rgb::zeros(),
            throughput,
        };
        let Some(h) = hit else {
            node.radiance = self.scene.env.sample(&ray.dir);
            node.inner = node.radiance;
            self.nodes.push(node);
            return idx;
        };
        let obj = self.scene.object.as_ref().expect("hit implies an object");
        node.inside = !h.entering;
        node.side_mismatch = node.inside != inside_flag;
        if node.inside {
            if let Some(g) = &obj.grid {
                node.transmittance = g.transmittance(&ray.origin, &h.point, self.cfg.absorption_samples);
            }
        }
        let tr_weight = throughput * node.transmittance.max();
        if depth >= self.cfg.max_depth {
            node.kind = NodeKind::Capped;
            if tr_weight > self.cfg.capped_threshold {
                self.capped = true;
            }
            node.inner = match self.cfg.capped_policy {
                CappedPolicy::Zero => Rgb::zeros(),
                CappedPolicy::Environment => self.scene.env.sample(&ray.dir),
            };
            node.radiance = node.transmittance.component_mul(&node.inner);
            self.nodes.push(node);
            return idx;
        }
        let omega_i = -ray.dir;
        let n = if h.normal.dot(&omega_i) < 0.0 { -h.normal } else { h.normal };
        let (eta_i, eta_t) = if h.entering { (1.0, obj.ior) } else { (obj.ior, 1.0) };
        node.normal = n;
        node.eta_i = eta_i;
        node.eta_t = eta_t;
        node.cos_i = omega_i.dot(&n).clamp(0.0, 1.0);
        let refracted = refract(&omega_i, &n, eta_i, eta_t);
        let (r, t) = match refracted {
            Some((_, cos_t)) => {
                node.cos_t = cos_t;
                node.kind = NodeKind::Split;
                fresnel(node.cos_i, cos_t, eta_i, eta_t)
            }
            None => {
                node.kind = NodeKind::Tir;
                (1.0, 0.0)
            }
        };
        node.reflectance = r;
        node.transmission = t;
        self.nodes.push(node);

        let refl = Ray::new(h.point, reflect(&omega_i, &n));
        let c_r = self.node(refl, depth + 1, inside_flag, tr_weight * r);
        let mut inner = self.nodes[c_r as usize].radiance * r;
        let mut c_t = NO_CHILD;
        if let Some((dir_t, _)) = refracted {
            c_t = self.node(Ray::new(h.point, dir_t), depth + 1, !inside_flag, tr_weight * t);
            inner += self.nodes[c_t as usize].radiance * t;
        }
        let node = &mut self.nodes[idx as usize];
        node.children = [c_r, c_t];
        node.inner = inner;
        node.radiance = node.transmittance.component_mul(&inner);
        idx
    }
}

/// Traces one ray from outside the object.
pub fn trace(scene: &Scene, ray: &Ray, cfg: &RenderConfig) -> RayResult {
    trace_from(scene, ray, 0, false, cfg)
}

/// Traces a ray that has already undergone `depth` events, starting on the
/// side given by `inside`.
pub fn trace_from(scene: &Scene, ray: &Ray, depth: u32, inside: bool, cfg: &RenderConfig) -> RayResult {
    let t_min = scene.object.as_ref().map_or(0.0, |o| o.t_min(cfg.t_min_scale));
    let mut tracer = Tracer {
        scene,
        cfg,
        t_min,
        nodes: Vec::new(),
        capped: false,
    };
    tracer.node(*ray, depth, inside, 1.0);
    let record = PathRecord { nodes: tracer.nodes };
    RayResult {
        radiance: record.radiance(),
        record,
        capped: tracer.capped,
    }
}

/// Traces a batch; the output order matches `rays`.
pub fn render_rays(scene: &Scene, rays: &[Ray], cfg: &RenderConfig) -> Vec<RayResult> {
    rays.par_iter().map(|r| trace(scene, r, cfg)).collect()
}

/// Per-pixel render outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub radiance: Image,
    pub mask: Vec<f64>,
    /// First-hit distance; infinite where the mask is 0.
    pub depth: Vec<f64>,
    /// Camera-space z of the first hit; infinite where the mask is 0.
    pub view_depth: Vec<f64>,
    /// First-hit shading normal; zero where the mask is 0.
    pub normal: Vec<Vec3>,
    pub capped: Vec<bool>,
}

pub fn render(scene: &Scene, camera: &Camera, cfg: &RenderConfig) -> GBuffer {
    let n = camera.pixel_count();
    let results: Vec<(Rgb, Option<HitRecord>, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let r = trace(scene, &camera.pixel_ray(i), cfg);
            (r.radiance, r.record.first_hit().copied(), r.capped)
        })
        .collect();
    let mut g = GBuffer {
        width: camera.width,
        height: camera.height,
        radiance: Image::new(camera.width, camera.height),
        mask: vec![0.0; n],
        depth: vec![f64::INFINITY; n],
        view_depth: vec![f64::INFINITY; n],
        normal: vec![Vec3::zeros(); n],
        capped: vec![false; n],
    };
    for (i, (rad, hit, capped)) in results.into_iter().enumerate() {
        g.radiance.data[i] = rad;
        g.capped[i] = capped;
        if let Some(h) = hit {
            g.mask[i] = 1.0;
            g.depth[i] = h.t;
            g.view_depth[i] = camera.to_camera(&h.point).z;
            g.normal[i] = h.normal;
        }
    }
    g
}

/// First-hit occupancy only (no shading).
pub fn render_mask(scene: &Scene, camera: &Camera) -> Vec<f64> {
    let Some(obj) = scene.object.as_ref() else {
        return vec![0.0; camera.pixel_count()];
    };
    (0..camera.pixel_count())
        .into_par_iter()
        .map(|i| {
            let r = camera.pixel_ray(i);
            if obj.bvh.occluded(&obj.mesh, &r, 0.0, f64::INFINITY) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Re-evaluates a record's radiance with its topology held fixed: every hit
/// is recomputed against the recorded face, and directions, Fresnel weights
/// and transmittances are rebuilt from the current scene parameters.
pub fn replay_radiance(scene: &Scene, record: &PathRecord, cfg: &RenderConfig) -> Rgb {
    fn eval(scene: &Scene, rec: &PathRecord, cfg: &RenderConfig, idx: u32, ray: Ray) -> Rgb {
        let node = &rec.nodes[idx as usize];
        let Some(h0) = node.hit else {
            return scene.env.sample(&ray.dir);
        };
        let obj = scene.object.as_ref().expect("recorded hit implies an object");
        let [v0, v1, v2] = obj.mesh.face_vertices(h0.face);
        let (t, b1, b2) = intersect_triangle(&ray, &v0, &v1, &v2).unwrap_or((h0.t, h0.bary[1], h0.bary[2]));
        let h = obj.mesh.hit_record(&ray, h0.face, t, b1, b2);
        let tr = match (&obj.grid, node.inside) {
            (Some(g), true) => g.transmittance(&ray.origin, &h.point, cfg.absorption_samples),
            _ => Rgb::repeat(1.0),
        };
        let inner = match node.kind {
            NodeKind::Escaped => unreachable!("escaped nodes have no hit"),
            NodeKind::Capped => match cfg.capped_policy {
                CappedPolicy::Zero => Rgb::zeros(),
                CappedPolicy::Environment => scene.env.sample(&ray.dir),
            },
            NodeKind::Split | NodeKind::Tir => {
                let omega_i = -ray.dir;
                let sign = if node.normal.dot(&h.normal) < 0.0 { -1.0 } else { 1.0 };
                let n = h.normal * sign;
                let refl = Ray::new(h.point, reflect(&omega_i, &n));
                let mut inner = Rgb::zeros();
                if node.kind == NodeKind::Split {
                    let (dir_t, cos_t) = refract(&omega_i, &n, node.eta_i, node.eta_t).unwrap_or((-n, 0.0));
                    let cos_i = omega_i.dot(&n).clamp(0.0, 1.0);
                    let (r, tt) = fresnel(cos_i, cos_t, node.eta_i, node.eta_t);
                    inner += eval(scene, rec, cfg, node.children[0], refl) * r;
                    inner += eval(scene, rec, cfg, node.children[1], Ray::new(h.point, dir_t)) * tt;
                } else {
                    inner += eval(scene, rec, cfg, node.children[0], refl);
                }
                inner
            }
        };
        tr.component_mul(&inner)
    }
    match record.nodes.first() {
        Some(root) => eval(scene, record, cfg, 0, Ray::new(root.origin, root.dir)),
        None => Rgb::zeros(),
    }
}
