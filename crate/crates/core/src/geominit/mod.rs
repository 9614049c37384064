//! Coarse geometry from masks: visual-hull carving, signed distances,
//! dilation, iso-surface extraction, remeshing and silhouette refinement.

mod marching;
mod refine;
mod remesh;
mod volume;

pub use marching::marching_tetrahedra;
pub use refine::{mean_mask_loss, refine_mesh_with_masks, RefineConfig, RefineReport};
pub use remesh::isotropic_remesh;
pub use volume::{carve_visual_hull, dilate_sdf, sdf_from_occupancy, Lattice, Occupancy, SdfGrid};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::math::{Aabb, Mat3, Vec3};
use crate::mesh::Mesh;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeomInitConfig {
    /// Voxels along the longest axis of the carving box.
    pub resolution: usize,
    /// SDF offset in voxels.
    pub dilation_voxels: f64,
    /// Remesh target edge as a fraction of the mesh bounding-box diagonal.
    pub remesh_edge_fraction: f64,
    pub remesh_iterations: usize,
    /// Carving box; estimated from the cameras when absent.
    pub aabb: Option<[[f64; 3]; 2]>,
    pub refine: RefineConfig,
}

impl Default for GeomInitConfig {
    fn default() -> Self {
        GeomInitConfig {
            resolution: 128,
            dilation_voxels: 1.0,
            remesh_edge_fraction: 0.015,
            remesh_iterations: 5,
            aabb: None,
            refine: RefineConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub voxel_size: f64,
    pub total_voxels: usize,
    pub occupied_voxels: usize,
    pub marching_faces: usize,
    pub remeshed_faces: usize,
    pub refine: RefineReport,
}

/// Cube around the point nearest every optical axis, sized to fit inside
/// the narrowest view.
pub fn estimate_bounds(cameras: &[Camera]) -> Result<Aabb> {
    if cameras.is_empty() {
        return Err(Error::Invalid("no cameras".into()));
    }
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for c in cameras {
        let f = c.rotation.column(2).into_owned();
        let p = Mat3::identity() - f * f.transpose();
        a += p;
        b += p * c.position;
    }
    let center = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Invalid("camera axes are parallel; pass an explicit box".into()))?;
    let half = cameras
        .iter()
        .map(|c| {
            let t = (c.cx / c.fx).min(c.cy / c.fy).min((c.width as f64 - c.cx) / c.fx).min((c.height as f64 - c.cy) / c.fy);
            (c.position - center).norm() * t
        })
        .fold(f64::INFINITY, f64::min);
    Ok(Aabb::new(center - Vec3::repeat(half), center + Vec3::repeat(half)))
}

/// Full coarse-geometry pipeline.
pub fn init_geometry(masks: &[&[f64]], cameras: &[Camera], cfg: &GeomInitConfig) -> Result<(Mesh, InitReport)> {
    let aabb = match cfg.aabb {
        Some([lo, hi]) => Aabb::new(Vec3::from(lo), Vec3::from(hi)),
        None => estimate_bounds(cameras)?,
    };
    let occ = carve_visual_hull(masks, cameras, cfg.resolution, &aabb)?;
    let voxel = occ.lattice.voxel;
    let sdf = dilate_sdf(&sdf_from_occupancy(&occ)?, cfg.dilation_voxels * voxel)?;
    // Regions only a view or two can see survive carving as separate blobs.
    let raw = marching_tetrahedra(&sdf, 0.0)?.largest_component()?;
    let target = cfg.remesh_edge_fraction * raw.bounds().diagonal();
    let remeshed = isotropic_remesh(&raw, target, cfg.remesh_iterations)?;
    let (mesh, refine) = refine_mesh_with_masks(&remeshed, masks, cameras, &cfg.refine)?;
    let report = InitReport {
        voxel_size: voxel,
        total_voxels: occ.lattice.len(),
        occupied_voxels: occ.count(),
        marching_faces: raw.face_count(),
        remeshed_faces: mesh.face_count(),
        refine,
    };
    Ok((mesh, report))
}
