//! Synthetic fixtures: analytic meshes, ground-truth absorption fields,
//! procedural environments, closed-form oracles and dataset synthesis.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::dataset::{Dataset, Meta, View};
use crate::environ::EnvMap;
use crate::error::{Error, Result};
use crate::math::{Aabb, Rgb, Vec3};
use crate::medium::AbsorptionGrid;
use crate::mesh::Mesh;
use crate::tracer::{render, RenderConfig, Scene};

/// Icosahedron subdivided `subdivisions` times, vertices projected onto the
/// sphere of the given radius. Faces: `20 · 4^subdivisions`.
pub fn make_icosphere(radius: f64, subdivisions: u32) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut mid = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) / 2.0).normalize());
                verts.len() as u32 - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let verts = verts.into_iter().map(|v| v * radius).collect();
    Mesh::new(verts, faces).expect("icosphere is non-degenerate")
}

/// Axis-aligned box `[-e/2, e/2]² × [-thickness/2, thickness/2]`.
///
/// The triangulation is invariant under a half-turn about z, so the
/// interpolated normal at the center of the top and bottom faces is exactly
/// `±z`.
pub fn make_slab(thickness: f64, extent: f64) -> Mesh {
    let verts = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 == 1 { extent / 2.0 } else { -extent / 2.0 },
                if i & 2 == 2 { extent / 2.0 } else { -extent / 2.0 },
                if i & 4 == 4 { thickness / 2.0 } else { -thickness / 2.0 },
            )
        })
        .collect();
    let faces = vec![
        [4, 5, 7], [4, 7, 6], // +z
        [0, 3, 1], [0, 2, 3], // -z
        [1, 3, 7], [1, 7, 5], // +x
        [2, 0, 4], [2, 4, 6], // -x
        [2, 7, 3], [2, 6, 7], // +y
        [1, 4, 0], [1, 5, 4], // -y
    ];
    Mesh::new(verts, faces).expect("slab is non-degenerate")
}

/// Torus around the z axis with `nu` segments around the ring and `nv`
/// around the tube.
pub fn make_torus(major: f64, minor: f64, nu: usize, nv: usize) -> Mesh {
    let mut verts = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        let u = i as f64 / nu as f64 * 2.0 * PI;
        for j in 0..nv {
            let v = j as f64 / nv as f64 * 2.0 * PI;
            let r = major + minor * v.cos();
            verts.push(Vec3::new(r * u.cos(), r * u.sin(), minor * v.sin()));
        }
    }
    let id = |i: usize, j: usize| ((i % nu) * nv + (j % nv)) as u32;
    let mut faces = Vec::with_capacity(2 * nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    Mesh::new(verts, faces).expect("torus is non-degenerate")
}

/// Black upper hemisphere, constant `l0` lower hemisphere.
pub fn slab_env(l0: f64) -> EnvMap {
    EnvMap::from_fn(16, 8, |d| if d.z > 0.0 { Rgb::zeros() } else { Rgb::repeat(l0) })
        .expect("finite texels")
}

/// Smooth studio-like environment: a vertical gradient plus two soft
/// colored lights, all values within roughly [0.05, 0.9].
pub fn studio_env(width: usize, height: usize) -> EnvMap {
    let warm = Vec3::new(0.6, -0.5, 0.6).normalize();
    let cool = Vec3::new(-0.7, 0.4, 0.2).normalize();
    EnvMap::from_fn(width, height, |d| {
        let phi = d.y.atan2(d.x);
        let base = 0.3 + 0.2 * d.z + 0.05 * (3.0 * phi).sin();
        let lobe = |a: &Vec3, w: f64| (-(1.0 - d.dot(a)) / w).exp();
        let lw = lobe(&warm, 0.15);
        let lc = lobe(&cool, 0.2);
        Rgb::new(
            base + 0.45 * lw + 0.1 * lc,
            base * 0.95 + 0.3 * lw + 0.25 * lc,
            base * 0.85 + 0.1 * lw + 0.45 * lc,
        )
        .map(|c| c.max(0.0))
    })
    .expect("finite texels")
}

/// Normal-incidence slab radiance for unit back-lighting: the series
/// `Σ T² R^{2k} e^{-(2k+1)μd}` truncated at the bounce cap.
pub fn slab_transmittance_oracle(eta: f64, mu: Rgb, thickness: f64, max_depth: u32) -> Rgb {
    let r = ((eta - 1.0) / (eta + 1.0)).powi(2);
    let t = 1.0 - r;
    let mut sum = Rgb::zeros();
    if max_depth < 2 {
        return sum;
    }
    for k in 0..=((max_depth - 2) / 2) {
        let kk = 2 * k as i32;
        sum += mu.map(|m| t * t * r.powi(kk) * (-(kk as f64 + 1.0) * m * thickness).exp());
    }
    sum
}

/// Ground-truth absorption fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MuField {
    Constant { mu: [f64; 3] },
    /// `base + slope · x[axis]`, clamped at zero.
    LinearRamp { base: [f64; 3], slope: [f64; 3], axis: usize },
    /// `upper` above the plane `z = split`, `lower` below.
    TwoTone { upper: [f64; 3], lower: [f64; 3], split: f64 },
}

impl MuField {
    pub fn eval(&self, x: &Vec3) -> Rgb {
        match self {
            MuField::Constant { mu } => Rgb::from(*mu),
            MuField::LinearRamp { base, slope, axis } => {
                (Rgb::from(*base) + Rgb::from(*slope) * x[*axis]).map(|v| v.max(0.0))
            }
            MuField::TwoTone { upper, lower, split } => {
                Rgb::from(if x.z >= *split { *upper } else { *lower })
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, MuField::Constant { mu } if mu.iter().all(|m| *m == 0.0))
    }
}

/// Everything needed to synthesize a dataset.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub mesh: Mesh,
    pub ior: f64,
    pub mu: MuField,
    pub env: EnvMap,
    pub n_views: usize,
    pub resolution: usize,
    pub seed: u64,
    pub grid_resolution: usize,
    pub render: RenderConfig,
}

/// Cameras on the upper hemisphere around the mesh, sampled uniformly in
/// azimuth and in `cos(elevation)`-weighted height with a seeded generator.
pub fn sample_cameras(bounds: &Aabb, n_views: usize, resolution: usize, seed: u64) -> Result<Vec<Camera>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = bounds.center();
    let radius = bounds.diagonal() / 2.0;
    let fov = 0.7f64;
    let distance = radius / (fov / 2.0).sin() * 1.15;
    (0..n_views)
        .map(|_| {
            // Heights near the pole make `up` degenerate; keep z ≤ 0.9.
            let z: f64 = rng.random_range(0.0..0.9);
            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            let rho = (1.0 - z * z).sqrt();
            let dir = Vec3::new(rho * phi.cos(), rho * phi.sin(), z);
            Camera::look_at(center + dir * distance, center, Vec3::z(), resolution, resolution, fov)
        })
        .collect()
}

/// Ground-truth scene for a dataset spec.
pub fn ground_truth_scene(spec: &DatasetSpec) -> Result<Scene> {
    let grid = if spec.mu.is_zero() {
        None
    } else {
        let bounds = spec.mesh.bounds().inflated(crate::medium::DEFAULT_INFLATE);
        Some(AbsorptionGrid::from_fn([spec.grid_resolution; 3], bounds, |x| spec.mu.eval(x))?)
    };
    Ok(Scene::new(spec.env.clone(), spec.mesh.clone(), spec.ior, grid))
}

/// Renders views of `scene` from `cameras`; masks are exact first-hit
/// occupancy.
pub fn render_views(scene: &Scene, cameras: &[Camera], cfg: &RenderConfig) -> Vec<View> {
    cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let g = render(scene, cam, cfg);
            View {
                name: format!("{i:03}"),
                camera: cam.clone(),
                image: g.radiance,
                mask: g.mask,
            }
        })
        .collect()
}

/// Renders the dataset in memory.
pub fn synthesize_views(spec: &DatasetSpec) -> Result<Vec<View>> {
    if spec.n_views == 0 || spec.resolution == 0 {
        return Err(Error::Invalid("dataset needs at least one view and pixel".into()));
    }
    let scene = ground_truth_scene(spec)?;
    let cams = sample_cameras(&spec.mesh.bounds(), spec.n_views, spec.resolution, spec.seed)?;
    Ok(render_views(&scene, &cams, &spec.render))
}

/// Renders and writes a dataset directory.
pub fn synthesize_dataset(spec: &DatasetSpec, out: &Path) -> Result<Dataset> {
    let views = synthesize_views(spec)?;
    let meta = Meta {
        ior: spec.ior,
        mu: spec.mu.clone(),
        env: "env.pfm".into(),
        gt_mesh: "gt_mesh.obj".into(),
        seed: spec.seed,
        n_views: spec.n_views,
        resolution: spec.resolution,
    };
    Dataset::write(out, views, meta, &spec.env, &spec.mesh)
}
