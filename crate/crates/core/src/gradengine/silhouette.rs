use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::losses::l_mask;
use crate::math::Vec3;
use crate::mesh::Mesh;
use crate::tracer::{render_mask, Object, Scene};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SilhouetteConfig {
    /// Edge samples per pixel of projected edge length.
    pub samples_per_pixel: f64,
    /// Screen offset, in pixels, of the two occupancy probes.
    pub probe: f64,
    pub seed: u64,
}

impl Default for SilhouetteConfig {
    fn default() -> Self {
        SilhouetteConfig {
            samples_per_pixel: 1.0,
            probe: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SilhouetteResult {
    pub loss: f64,
    pub grads: Vec<Vec3>,
    /// Edge samples that straddled a visible silhouette.
    pub samples: usize,
    pub silhouette_vertices: Vec<u32>,
}

/// Edges separating a front-facing from a back-facing face as seen from
/// `eye`, plus boundary edges.
pub fn silhouette_edges(mesh: &Mesh, eye: &Vec3) -> Vec<[u32; 2]> {
    let facing: Vec<bool> = (0..mesh.faces().len())
        .map(|f| {
            let [a, b, c] = mesh.face_vertices(f as u32);
            mesh.face_normals()[f].dot(&((a + b + c) / 3.0 - eye)) < 0.0
        })
        .collect();
    mesh.edges()
        .iter()
        .zip(mesh.edge_faces())
        .filter(|(_, fs)| {
            fs[1] == u32::MAX || fs[0] == u32::MAX || facing[fs[0] as usize] != facing[fs[1] as usize]
        })
        .map(|(e, _)| *e)
        .collect()
}

fn occupied(obj: &Object, camera: &Camera, u: f64, v: f64) -> bool {
    obj.bvh().occluded(obj.mesh(), &camera.ray(u, v), 0.0, f64::INFINITY)
}

/// Mask loss `mean |M − M_gt|` and its vertex gradient by silhouette edge
/// sampling. Each sample on a visible silhouette edge contributes its
/// screen-space outward motion weighted by the mask error of the pixels
/// straddling it.
pub fn silhouette_mask_gradient(
    scene: &Scene,
    camera: &Camera,
    gt_mask: &[f64],
    cfg: &SilhouetteConfig,
) -> Result<SilhouetteResult> {
    if gt_mask.len() != camera.pixel_count() {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} pixels, camera has {}",
            gt_mask.len(),
            camera.pixel_count()
        )));
    }
    let rendered = render_mask(scene, camera);
    let loss = l_mask(&rendered, gt_mask)?;
    let Some(obj) = scene.object.as_ref() else {
        return Ok(SilhouetteResult {
            loss,
            grads: Vec::new(),
            samples: 0,
            silhouette_vertices: Vec::new(),
        });
    };
    let mesh = obj.mesh();
    let mut grads = vec![Vec3::zeros(); mesh.vertex_count()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (camera.width as f64, camera.height as f64);
    let inv_pixels = 1.0 / camera.pixel_count() as f64;
    let mut samples = 0;
    let mut verts = Vec::new();
    for [ia, ib] in silhouette_edges(mesh, &camera.position) {
        let (a, b) = (mesh.positions()[ia as usize], mesh.positions()[ib as usize]);
        let (Some((ua, va, za)), Some((ub, vb, zb))) = (camera.project(&a), camera.project(&b)) else {
            continue;
        };
        let dir = [ub - ua, vb - va];
        let len = dir[0].hypot(dir[1]);
        if len < 1e-12 {
            continue;
        }
        let count = (len * cfg.samples_per_pixel).ceil().max(1.0) as usize;
        let weight = len / count as f64;
        let nrm = [-dir[1] / len, dir[0] / len];
        let mut hit_edge = false;
        for k in 0..count {
            let s_screen = (k as f64 + rng.random::<f64>()) / count as f64;
            let (u, v) = (ua + s_screen * dir[0], va + s_screen * dir[1]);
            let (mut n_u, mut n_v) = (nrm[0], nrm[1]);
            let probe_in = occupied(obj, camera, u - cfg.probe * n_u, v - cfg.probe * n_v);
            let probe_out = occupied(obj, camera, u + cfg.probe * n_u, v + cfg.probe * n_v);
            match (probe_in, probe_out) {
                (true, false) => {}
                (false, true) => {
                    n_u = -n_u;
                    n_v = -n_v;
                }
                _ => continue,
            }
            let err = |du: f64, dv: f64| -> f64 {
                let (px, py) = ((u + du + 0.5).floor(), (v + dv + 0.5).floor());
                if px < 0.0 || py < 0.0 || px >= w || py >= h {
                    return 0.0;
                }
                let i = py as usize * camera.width + px as usize;
                rendered[i] - gt_mask[i]
            };
            let local = 0.5 * (err(0.5 * n_u, 0.5 * n_v) + err(-0.5 * n_u, -0.5 * n_v));
            let impulse = local * weight * inv_pixels;
            if impulse == 0.0 {
                continue;
            }
            // Perspective-correct edge parameter of the screen sample.
            let s = s_screen / zb / ((1.0 - s_screen) / za + s_screen / zb);
            let x = a + (b - a) * s;
            let Some([du, dv]) = camera.project_jacobian(&x) else {
                continue;
            };
            let g = (du * n_u + dv * n_v) * impulse;
            grads[ia as usize] += g * (1.0 - s);
            grads[ib as usize] += g * s;
            samples += 1;
            hit_edge = true;
        }
        if hit_edge {
            verts.push(ia);
            verts.push(ib);
        }
    }
    verts.sort_unstable();
    verts.dedup();
    Ok(SilhouetteResult {
        loss,
        grads,
        samples,
        silhouette_vertices: verts,
    })
}
