//! Layered TOML configuration. The shipped `default.toml` is the base
//! layer; a user file and `key=value` overrides are merged on top before
//! the result is deserialized and validated.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::environ::EnvMap;
use crate::error::{Error, Result};
use crate::geominit::GeomInitConfig;
use crate::math::{softplus_inv, Rgb, Vec3};
use crate::medium::{AbsorptionGrid, DEFAULT_INFLATE};
use crate::mesh::obj::read_obj;
use crate::mesh::Mesh;
use crate::optimize::StageConfig;
use crate::scenegen::{make_icosphere, make_slab, make_torus, slab_env, studio_env, DatasetSpec, MuField};
use crate::tracer::{RenderConfig, Scene};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TOML: &str = include_str!("../default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeConfig {
    Icosphere { radius: f64, subdivisions: u32 },
    Slab { thickness: f64, extent: f64 },
    Torus { major: f64, minor: f64, nu: usize, nv: usize },
    Obj { path: PathBuf },
}

impl ShapeConfig {
    pub fn build(&self) -> Result<Mesh> {
        Ok(match self {
            ShapeConfig::Icosphere { radius, subdivisions } => {
                if *subdivisions > 6 || !(*radius > 0.0) {
                    return Err(Error::config("scene.shape", "icosphere needs radius > 0 and subdivisions ≤ 6"));
                }
                make_icosphere(*radius, *subdivisions)
            }
            ShapeConfig::Slab { thickness, extent } => make_slab(*thickness, *extent),
            ShapeConfig::Torus { major, minor, nu, nv } => make_torus(*major, *minor, *nu, *nv),
            ShapeConfig::Obj { path } => read_obj(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Studio { width: usize, height: usize },
    /// Dark upper hemisphere, uniform `radiance` below.
    Slab { radiance: f64 },
    Constant { radiance: [f64; 3] },
    File { path: PathBuf },
}

impl EnvConfig {
    pub fn build(&self) -> Result<EnvMap> {
        Ok(match self {
            EnvConfig::Studio { width, height } => studio_env(*width, *height),
            EnvConfig::Slab { radiance } => slab_env(*radiance),
            EnvConfig::Constant { radiance } => EnvMap::constant(8, 4, Rgb::from(*radiance)),
            EnvConfig::File { path } => EnvMap::read(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub shape: ShapeConfig,
    pub ior: f64,
    pub mu: MuField,
    pub grid_resolution: usize,
    pub grid: Option<PathBuf>,
    pub env: EnvConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub fov_x: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraConfig {
    pub fn build(&self) -> Result<crate::camera::Camera> {
        crate::camera::Camera::look_at(
            Vec3::from(self.eye),
            Vec3::from(self.target),
            Vec3::from(self.up),
            self.width,
            self.height,
            self.fov_x,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_views: usize,
    pub resolution: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialInit {
    pub ior: f64,
    pub grid_resolution: usize,
    /// Uniform starting absorption.
    pub mu: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    pub f1_tau: f64,
    /// Scale both meshes to a unit-diagonal joint bounding box first.
    pub normalize: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub rays: usize,
    pub h: f64,
    pub ior: bool,
    pub grid_coords: usize,
    pub vertex_coords: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub seed: u64,
    pub threads: usize,
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub dataset: DatasetConfig,
    pub geometry: GeomInitConfig,
    pub material_init: MaterialInit,
    pub stage2: StageConfig,
    pub render: RenderConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config::from_layers(None, &[]).expect("shipped defaults are valid")
    }
}

/// Merges `over` into `base`. A table that names its own `kind` replaces
/// the base table outright so variant fields never mix.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `a.b.c=value` into a nested table. Values are TOML literals;
/// anything that does not parse as one is taken as a string.
pub fn parse_override(spec: &str) -> Result<toml::Table> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|p| p.is_empty()) {
        return Err(Error::config(spec, "empty key in override"));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut node = parsed;
    for part in key.rsplit('.') {
        let mut t = toml::Table::new();
        t.insert(part.to_string(), node);
        node = toml::Value::Table(t);
    }
    match node {
        toml::Value::Table(t) => Ok(t),
        _ => unreachable!("loop wraps at least once"),
    }
}

fn toml_error(origin: &str, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: PathBuf::from(origin),
        message: e.to_string().trim().to_string(),
    }
}

impl Config {
    /// Builds a config from the shipped defaults, an optional file body
    /// (with its path, for messages and relative paths) and overrides.
    pub fn from_layers(file: Option<(&str, &Path)>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(DEFAULT_TOML).map_err(|e| toml_error("default.toml", e))?;
        if let Some((text, path)) = file {
            let user: toml::Table = toml::from_str(text).map_err(|e| toml_error(&path.display().to_string(), e))?;
            merge(&mut table, user);
        }
        for o in overrides {
            merge(&mut table, parse_override(o)?);
        }
        let origin = file.map_or("default.toml".to_string(), |(_, p)| p.display().to_string());
        let mut cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e| toml_error(&origin, e))?;
        if let Some((_, path)) = file {
            cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_layers(Some((&text, path)), overrides)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ShapeConfig::Obj { path } = &mut self.scene.shape {
            fix(path);
        }
        if let EnvConfig::File { path } = &mut self.scene.env {
            fix(path);
        }
        if let Some(g) = &mut self.scene.grid {
            fix(g);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(k, m));
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if !(self.scene.ior >= 1.0) {
            return bad("scene.ior", "must be at least 1");
        }
        if self.scene.grid_resolution < 2 {
            return bad("scene.grid_resolution", "must be at least 2");
        }
        if self.dataset.n_views == 0 || self.dataset.resolution == 0 {
            return bad("dataset", "n_views and resolution must be positive");
        }
        if !(self.material_init.ior >= 1.0) {
            return bad("material_init.ior", "must be at least 1");
        }
        if self.material_init.grid_resolution < 2 {
            return bad("material_init.grid_resolution", "must be at least 2");
        }
        if !(self.material_init.mu > 0.0) {
            return bad("material_init.mu", "must be positive");
        }
        if self.geometry.resolution < 2 {
            return bad("geometry.resolution", "must be at least 2");
        }
        if !(self.eval.f1_tau > 0.0) {
            return bad("eval.f1_tau", "must be positive");
        }
        if self.eval.samples < 1000 {
            return bad("eval.samples", "must be at least 1000");
        }
        if !(self.gradcheck.h > 0.0) {
            return bad("gradcheck.h", "must be positive");
        }
        if self.render.max_depth == 0 {
            return bad("render.max_depth", "must be positive");
        }
        self.stage2.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::Config {
                key: format!("stage2.{key}"),
                message,
            },
            e => e,
        })
    }

    /// Ground-truth absorption grid for `mesh`, or `None` for a clear medium.
    pub fn scene_grid(&self, mesh: &Mesh) -> Result<Option<AbsorptionGrid>> {
        if let Some(path) = &self.scene.grid {
            return AbsorptionGrid::read_checkpoint(path).map(Some);
        }
        if self.scene.mu.is_zero() {
            return Ok(None);
        }
        let bounds = mesh.bounds().inflated(DEFAULT_INFLATE);
        AbsorptionGrid::from_fn([self.scene.grid_resolution; 3], bounds, |x| self.scene.mu.eval(x)).map(Some)
    }

    pub fn build_scene(&self) -> Result<Scene> {
        let mesh = self.scene.shape.build()?;
        let grid = self.scene_grid(&mesh)?;
        Ok(Scene::new(self.scene.env.build()?, mesh, self.scene.ior, grid))
    }

    /// Dataset description for `make-dataset`; views are rendered with the
    /// `[render]` settings.
    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            mesh: self.scene.shape.build()?,
            ior: self.scene.ior,
            mu: self.scene.mu.clone(),
            env: self.scene.env.build()?,
            n_views: self.dataset.n_views,
            resolution: self.dataset.resolution,
            seed: self.seed,
            grid_resolution: self.scene.grid_resolution,
            render: self.render,
        })
    }

    /// Stage-2 starting scene around an initial mesh.
    pub fn initial_scene(&self, mesh: Mesh, env: EnvMap) -> Result<Scene> {
        let m = &self.material_init;
        let grid = AbsorptionGrid::for_object(&mesh.bounds(), m.grid_resolution, softplus_inv(m.mu))?;
        Ok(Scene::new(env, mesh, m.ior, Some(grid)))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| toml_error("config", e))
    }
}
