use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::environ::EnvMap;
use crate::error::{Error, Result};
use crate::gradengine::{silhouette_mask_gradient, SilhouetteConfig};
use crate::losses::{l_edge_grad, l_mask};
use crate::math::{Rgb, Vec3};
use crate::mesh::Mesh;
use crate::optimize::{adam_uniform_step, AdamState};
use crate::tracer::{render_mask, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub steps: usize,
    /// Step size in units of the input's bounding-box diagonal over √3.
    pub lr: f64,
    pub mask_weight: f64,
    pub edge_weight: f64,
    pub views_per_step: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            steps: 200,
            lr: 1e-3,
            mask_weight: 1.0,
            edge_weight: 0.5,
            views_per_step: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub loss_before: f64,
    pub loss_after: f64,
    /// Mask loss of each step's view batch.
    pub trajectory: Vec<f64>,
    /// The refined mesh was worse than the input and was discarded.
    pub reverted: bool,
}

fn scene_for(mesh: Mesh) -> Scene {
    Scene::new(EnvMap::constant(4, 2, Rgb::zeros()), mesh, 1.0, None)
}

/// Mean mask L1 error over all views.
pub fn mean_mask_loss(mesh: &Mesh, masks: &[&[f64]], cameras: &[Camera]) -> Result<f64> {
    let scene = scene_for(mesh.clone());
    let mut s = 0.0;
    for (m, c) in masks.iter().zip(cameras) {
        s += l_mask(&render_mask(&scene, c), m)?;
    }
    Ok(s / masks.len().max(1) as f64)
}

/// Fits the silhouettes with AdamUniform steps on
/// `mask_weight · L_mask + edge_weight · L_edge`, cycling through the views
/// a few at a time. Returns the input unchanged if the full mask loss got
/// worse.
pub fn refine_mesh_with_masks(
    mesh: &Mesh,
    masks: &[&[f64]],
    cameras: &[Camera],
    cfg: &RefineConfig,
) -> Result<(Mesh, RefineReport)> {
    if masks.len() != cameras.len() || masks.is_empty() {
        return Err(Error::ShapeMismatch("one mask per camera is required".into()));
    }
    let before = mean_mask_loss(mesh, masks, cameras)?;
    if cfg.steps == 0 {
        let report = RefineReport {
            loss_before: before,
            loss_after: before,
            trajectory: Vec::new(),
            reverted: false,
        };
        return Ok((mesh.clone(), report));
    }
    let mut scene = scene_for(mesh.clone());
    let scale = mesh.bounds().diagonal() / 3f64.sqrt();
    let mut adam = AdamState::new(mesh.vertex_count() * 3, cfg.lr * scale).with_weight_decay(0.0);
    let per = cfg.views_per_step.clamp(1, masks.len());
    let mut trajectory = Vec::with_capacity(cfg.steps);
    let mut cursor = 0;
    for step in 0..cfg.steps {
        let obj = scene.object.as_ref().expect("scene has an object");
        let mut grad = vec![Vec3::zeros(); obj.mesh().vertex_count()];
        let mut loss = 0.0;
        for _ in 0..per {
            let v = cursor % masks.len();
            cursor += 1;
            let sil = SilhouetteConfig {
                seed: cfg.seed.wrapping_add(step as u64 * 7919 + v as u64),
                ..Default::default()
            };
            let r = silhouette_mask_gradient(&scene, &cameras[v], masks[v], &sil)?;
            loss += r.loss / per as f64;
            for (g, d) in grad.iter_mut().zip(&r.grads) {
                *g += d * (cfg.mask_weight / per as f64);
            }
        }
        if cfg.edge_weight != 0.0 {
            let (_, ge) = l_edge_grad(obj.mesh());
            for (g, d) in grad.iter_mut().zip(&ge) {
                *g += d * cfg.edge_weight;
            }
        }
        trajectory.push(loss);
        let flat: Vec<f64> = grad.iter().flat_map(|g| [g.x, g.y, g.z]).collect();
        let mut params: Vec<f64> = obj.mesh().positions().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        adam_uniform_step(&mut adam, &mut params, &flat)?;
        let positions = params.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        scene.object.as_mut().expect("scene has an object").set_positions(positions)?;
    }
    let refined = scene.object.take().expect("scene has an object").mesh().clone();
    let after = mean_mask_loss(&refined, masks, cameras)?;
    let reverted = after > before;
    let report = RefineReport {
        loss_before: before,
        loss_after: if reverted { before } else { after },
        trajectory,
        reverted,
    };
    Ok((if reverted { mesh.clone() } else { refined }, report))
}
