//! On-disk multi-view datasets: images, masks, cameras and metadata.
//!
//! Layout: `images/NNN.pfm` (linear) and `images/NNN.png` (γ = 2.2),
//! `masks/NNN.png`, `cameras.json`, `meta.json`, `env.pfm`, `gt_mesh.obj`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::environ::EnvMap;
use crate::error::{Error, Result};
use crate::imageio::{self, Image};
use crate::mesh::{obj, Mesh};
use crate::scenegen::MuField;

#[derive(Clone, Debug)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub image: Image,
    pub mask: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub name: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_png: Option<String>,
    pub mask: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub camera_to_world: [[f64; 4]; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamerasFile {
    pub frames: Vec<FrameEntry>,
}

/// Ground-truth description written next to synthetic datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub ior: f64,
    pub mu: MuField,
    pub env: String,
    pub gt_mesh: String,
    pub seed: u64,
    pub n_views: usize,
    pub resolution: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub views: Vec<View>,
    pub meta: Option<Meta>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

impl Dataset {
    pub fn write(root: &Path, views: Vec<View>, meta: Meta, env: &EnvMap, gt_mesh: &Mesh) -> Result<Dataset> {
        for sub in ["images", "masks"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut frames = Vec::with_capacity(views.len());
        for v in &views {
            let c = &v.camera;
            let entry = FrameEntry {
                name: v.name.clone(),
                image: format!("images/{}.pfm", v.name),
                image_png: Some(format!("images/{}.png", v.name)),
                mask: format!("masks/{}.png", v.name),
                width: c.width,
                height: c.height,
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                camera_to_world: c.to_matrix(),
            };
            imageio::write_pfm(&root.join(&entry.image), &v.image)?;
            imageio::write_png(&root.join(entry.image_png.as_ref().unwrap()), &v.image)?;
            imageio::write_mask_png(&root.join(&entry.mask), c.width, c.height, &v.mask)?;
            frames.push(entry);
        }
        write_json(&root.join("cameras.json"), &CamerasFile { frames })?;
        write_json(&root.join("meta.json"), &meta)?;
        env.write(&root.join(&meta.env))?;
        obj::write_obj(&root.join(&meta.gt_mesh), gt_mesh)?;
        Ok(Dataset {
            root: root.to_path_buf(),
            views,
            meta: Some(meta),
        })
    }

    /// Loads `cameras.json` and every referenced image and mask. Images are
    /// read as linear PFM, or PNG linearized with γ = 2.2.
    pub fn load(root: &Path) -> Result<Dataset> {
        let cams: CamerasFile = read_json(&root.join("cameras.json"))?;
        if cams.frames.is_empty() {
            return Err(Error::format(root.join("cameras.json"), "no frames"));
        }
        let mut views = Vec::with_capacity(cams.frames.len());
        for f in cams.frames {
            let camera = Camera::from_matrix(f.width, f.height, [f.fx, f.fy, f.cx, f.cy], &f.camera_to_world)
                .map_err(|e| Error::format(root.join("cameras.json"), format!("frame {}: {e}", f.name)))?;
            let image_path = root.join(&f.image);
            let image = imageio::read_image(&image_path)?;
            let mask_path = root.join(&f.mask);
            let (mw, mh, mask) = imageio::read_mask_png(&mask_path)?;
            if (image.width, image.height) != (f.width, f.height) || (mw, mh) != (f.width, f.height) {
                return Err(Error::format(&image_path, "image or mask size differs from cameras.json"));
            }
            views.push(View {
                name: f.name,
                camera,
                image,
                mask,
            });
        }
        let meta_path = root.join("meta.json");
        let meta = if meta_path.exists() {
            Some(read_json(&meta_path)?)
        } else {
            None
        };
        Ok(Dataset {
            root: root.to_path_buf(),
            views,
            meta,
        })
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    pub fn images(&self) -> Vec<Image> {
        self.views.iter().map(|v| v.image.clone()).collect()
    }

    pub fn masks(&self) -> Vec<Vec<f64>> {
        self.views.iter().map(|v| v.mask.clone()).collect()
    }

    pub fn env_path(&self) -> Option<PathBuf> {
        self.meta.as_ref().map(|m| self.root.join(&m.env))
    }

    pub fn gt_mesh_path(&self) -> Option<PathBuf> {
        self.meta.as_ref().map(|m| self.root.join(&m.gt_mesh))
    }
}
