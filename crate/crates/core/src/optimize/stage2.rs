use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, adam_uniform_step, AdamState};
use crate::dataset::View;
use crate::error::{Error, Result};
use crate::gradengine::{backward, silhouette_mask_gradient, BackwardConfig, Freeze, SilhouetteConfig};
use crate::losses::{l_edge_grad, l_laplacian_grad, l_mat_smooth, l_vol, LossWeights};
use crate::math::{Ray, Rgb, Vec3};
use crate::mesh::obj::write_obj;
use crate::tracer::{RenderConfig, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeriodicWeights {
    pub mask: f64,
    pub edge: f64,
    pub laplacian: f64,
}

impl Default for PeriodicWeights {
    fn default() -> Self {
        PeriodicWeights {
            mask: 1.0,
            edge: 0.5,
            laplacian: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub iterations: usize,
    /// Geometry stays fixed for the first `freeze_iterations`.
    pub freeze_iterations: usize,
    pub batch_rays: usize,
    pub lr_material: f64,
    pub lr_ior_frozen: f64,
    pub lr_ior_joint: f64,
    /// Vertex step in units of the mesh bounding-box diagonal over √3.
    pub lr_vertices: f64,
    pub weight_decay: f64,
    pub ior_min: f64,
    pub ior_max: f64,
    /// Iterations between mask/edge/Laplacian passes (0 disables them).
    pub periodic_interval: usize,
    pub periodic_steps: usize,
    pub periodic_views_per_step: usize,
    pub periodic_weights: PeriodicWeights,
    pub weights: LossWeights,
    pub mat_smooth_samples: usize,
    pub mat_smooth_sigma: f64,
    pub vol_samples: usize,
    pub render: RenderConfig,
    /// Iterations between checkpoints (0: final only).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            iterations: 1000,
            freeze_iterations: 300,
            batch_rays: 5000,
            lr_material: 3e-3,
            lr_ior_frozen: 1e-4,
            lr_ior_joint: 1e-3,
            lr_vertices: 1e-3,
            weight_decay: super::adam::WEIGHT_DECAY,
            ior_min: 1.0,
            ior_max: 3.0,
            periodic_interval: 100,
            periodic_steps: 200,
            periodic_views_per_step: 4,
            periodic_weights: PeriodicWeights::default(),
            weights: LossWeights::default(),
            mat_smooth_samples: 1024,
            mat_smooth_sigma: 0.02,
            vol_samples: 1024,
            render: RenderConfig::train(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(key, msg));
        if self.freeze_iterations > self.iterations {
            return bad("freeze_iterations", "must not exceed iterations");
        }
        if self.batch_rays == 0 {
            return bad("batch_rays", "must be positive");
        }
        for (k, v) in [
            ("lr_material", self.lr_material),
            ("lr_ior_frozen", self.lr_ior_frozen),
            ("lr_ior_joint", self.lr_ior_joint),
            ("lr_vertices", self.lr_vertices),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(k, "learning rates must be positive");
            }
        }
        if !(self.ior_min >= 1.0 && self.ior_max > self.ior_min) {
            return bad("ior_min", "clamp window must satisfy 1 ≤ ior_min < ior_max");
        }
        if self.render.max_depth == 0 {
            return bad("render.max_depth", "must be positive");
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub phase: String,
    pub loss: f64,
    pub color: f64,
    pub tone: f64,
    pub mat_smooth: f64,
    pub vol: f64,
    pub mask: f64,
    pub edge: f64,
    pub laplacian: f64,
    pub ior: f64,
    pub capped_rays: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub iteration: usize,
    pub ior: f64,
    pub grid: AdamState,
    pub ior_state: AdamState,
    pub vertices: Option<AdamState>,
}

pub struct Stage2Output {
    pub scene: Scene,
    pub log: Vec<LogEntry>,
}

fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflatten(v: &[f64]) -> Vec<Vec3> {
    v.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Writes mesh, grid, IoR and optimizer state under `dir`.
pub fn write_checkpoint(dir: &Path, scene: &Scene, state: &OptimizerState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let obj = scene.object.as_ref().ok_or_else(|| Error::EmptyGeometry("scene has no object".into()))?;
    write_obj(&dir.join("mesh.obj"), obj.mesh())?;
    if let Some(g) = &obj.grid {
        g.write_checkpoint(&dir.join("grid.bin"))?;
    }
    let p = dir.join("state.json");
    let json = serde_json::to_string(state).map_err(|e| Error::format(&p, e.to_string()))?;
    fs::write(&p, json).map_err(|e| Error::io(&p, e))
}

struct Batch {
    rays: Vec<Ray>,
    targets: Vec<Rgb>,
}

fn sample_batch(views: &[View], n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let mut rays = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let v = &views[rng.random_range(0..views.len())];
        let i = rng.random_range(0..v.camera.pixel_count());
        rays.push(v.camera.pixel_ray(i));
        targets.push(v.image.data[i]);
    }
    Batch { rays, targets }
}

/// Mask, edge and Laplacian descent on the vertices alone.
fn periodic_pass(scene: &mut Scene, views: &[View], cfg: &StageConfig, iteration: usize, entry: &mut LogEntry) -> Result<()> {
    let w = cfg.periodic_weights;
    let obj = scene.object.as_ref().ok_or_else(|| Error::EmptyGeometry("scene has no object".into()))?;
    let scale = obj.mesh().bounds().diagonal() / 3f64.sqrt();
    let mut adam = AdamState::new(obj.mesh().vertex_count() * 3, cfg.lr_vertices * scale).with_weight_decay(0.0);
    let per = cfg.periodic_views_per_step.clamp(1, views.len());
    let mut cursor = 0;
    for step in 0..cfg.periodic_steps {
        let obj = scene.object.as_ref().expect("checked above");
        let mut grad = vec![Vec3::zeros(); obj.mesh().vertex_count()];
        let mut mask = 0.0;
        for _ in 0..per {
            let v = cursor % views.len();
            cursor += 1;
            let sil = SilhouetteConfig {
                seed: cfg.seed ^ ((iteration as u64) << 20) ^ (step as u64 * 131 + v as u64),
                ..Default::default()
            };
            let r = silhouette_mask_gradient(scene, &views[v].camera, &views[v].mask, &sil)?;
            mask += r.loss / per as f64;
            for (g, d) in grad.iter_mut().zip(&r.grads) {
                *g += d * (w.mask / per as f64);
            }
        }
        let (le, ge) = l_edge_grad(obj.mesh());
        let (ll, gl) = l_laplacian_grad(obj.mesh());
        for ((g, a), b) in grad.iter_mut().zip(&ge).zip(&gl) {
            *g += a * w.edge + b * w.laplacian;
        }
        let mut params = flatten(obj.mesh().positions());
        adam_uniform_step(&mut adam, &mut params, &flatten(&grad))?;
        scene.object.as_mut().expect("checked above").set_positions(unflatten(&params))?;
        entry.mask = mask;
        entry.edge = le;
        entry.laplacian = ll;
    }
    Ok(())
}

/// Joint refinement of the absorption grid, IoR and (after the freeze
/// phase) vertices against the views' photographs. Progress goes to
/// `out/log.jsonl` and checkpoints to `out/checkpoint_NNNNNN` when `out`
/// is given.
pub fn run_stage2(scene: Scene, views: &[View], cfg: &StageConfig, out: Option<&Path>) -> Result<Stage2Output> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::Invalid("no training views".into()));
    }
    for v in views {
        if v.image.data.len() != v.camera.pixel_count() || v.mask.len() != v.camera.pixel_count() {
            return Err(Error::ShapeMismatch(format!("view {} does not match its camera", v.name)));
        }
    }
    let mut scene = scene;
    let obj = scene.object.as_mut().ok_or_else(|| Error::EmptyGeometry("scene has no object".into()))?;
    let grid_len = obj
        .grid
        .as_ref()
        .ok_or_else(|| Error::Invalid("stage 2 needs an absorption grid".into()))?
        .raw()
        .len();
    obj.ior = obj.ior.clamp(cfg.ior_min, cfg.ior_max);
    let scale = obj.mesh().bounds().diagonal() / 3f64.sqrt();
    let mut state = OptimizerState {
        iteration: 0,
        ior: obj.ior,
        grid: AdamState::new(grid_len, cfg.lr_material).with_weight_decay(cfg.weight_decay),
        ior_state: AdamState::new(1, cfg.lr_ior_frozen).with_weight_decay(cfg.weight_decay),
        vertices: None,
    };
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("log.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let joint = it >= cfg.freeze_iterations;
        let mut entry = LogEntry {
            iteration: it,
            phase: if joint { "joint" } else { "frozen" }.into(),
            ..Default::default()
        };
        if joint && cfg.periodic_interval > 0 && it > cfg.freeze_iterations && it % cfg.periodic_interval == 0 {
            periodic_pass(&mut scene, views, cfg, it, &mut entry)?;
        }
        let batch = sample_batch(views, cfg.batch_rays, &mut rng);
        let bcfg = BackwardConfig {
            render: cfg.render,
            weights: cfg.weights,
            freeze: Freeze {
                vertices: !joint,
                ior: false,
                grid: false,
                env: true,
            },
        };
        let out_b = match backward(&scene, &batch.rays, &batch.targets, &bcfg) {
            Err(Error::AllCapped) => {
                log::warn!("iteration {it}: every ray was capped, skipping");
                continue;
            }
            r => r?,
        };
        let mut grads = out_b.grads;
        let obj = scene.object.as_mut().expect("checked above");
        let grid = obj.grid.as_ref().expect("checked above");
        let reg_seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(it as u64);
        entry.mat_smooth = l_mat_smooth(
            grid,
            cfg.mat_smooth_samples,
            cfg.mat_smooth_sigma,
            reg_seed,
            Some((&mut grads.grid, cfg.weights.mat_smooth)),
        );
        entry.vol = l_vol(grid, cfg.vol_samples, reg_seed ^ 1, Some((&mut grads.grid, cfg.weights.vol)));
        grads.check_finite()?;

        let mut raw = grid.raw().to_vec();
        adam_step(&mut state.grid, &mut raw, &grads.grid)?;
        obj.grid.as_mut().expect("checked above").set_raw(raw)?;
        state.ior_state.lr = if joint { cfg.lr_ior_joint } else { cfg.lr_ior_frozen };
        let mut ior = [obj.ior];
        adam_step(&mut state.ior_state, &mut ior, &[grads.ior])?;
        obj.ior = ior[0].clamp(cfg.ior_min, cfg.ior_max);
        if joint {
            let vs = state
                .vertices
                .get_or_insert_with(|| AdamState::new(obj.mesh().vertex_count() * 3, cfg.lr_vertices * scale).with_weight_decay(0.0));
            if vs.m.len() != obj.mesh().vertex_count() * 3 {
                *vs = AdamState::new(obj.mesh().vertex_count() * 3, cfg.lr_vertices * scale).with_weight_decay(0.0);
            }
            let mut params = flatten(obj.mesh().positions());
            adam_uniform_step(vs, &mut params, &flatten(&grads.vertices))?;
            obj.set_positions(unflatten(&params))?;
        }
        state.iteration = it + 1;
        state.ior = obj.ior;

        entry.color = out_b.components.color;
        entry.tone = out_b.components.tone;
        entry.loss = out_b.loss + cfg.weights.mat_smooth * entry.mat_smooth + cfg.weights.vol * entry.vol;
        entry.ior = obj.ior;
        entry.capped_rays = out_b.capped_rays;
        entry.seconds = start.elapsed().as_secs_f64();
        log::debug!("iter {it} loss {:.6} ior {:.4}", entry.loss, entry.ior);
        if let Some((f, p)) = log_file.as_mut() {
            let line = serde_json::to_string(&entry).map_err(|e| Error::format(p.as_path(), e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        log.push(entry);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iterations {
                write_checkpoint(&dir.join(format!("checkpoint_{:06}", it + 1)), &scene, &state)?;
            }
        }
    }
    if let Some(dir) = out {
        write_checkpoint(&dir.join(format!("checkpoint_{:06}", cfg.iterations)), &scene, &state)?;
    }
    Ok(Stage2Output { scene, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::AbsorptionGrid;
    use crate::scenegen::{make_icosphere, synthesize_views, studio_env, DatasetSpec, MuField};

    fn fixture() -> (Scene, Vec<View>) {
        let mesh = make_icosphere(1.0, 1);
        let spec = DatasetSpec {
            mesh: mesh.clone(),
            ior: 1.5,
            mu: MuField::Constant { mu: [0.3, 0.5, 0.8] },
            env: studio_env(32, 16),
            n_views: 4,
            resolution: 20,
            seed: 2,
            grid_resolution: 8,
            render: RenderConfig::train(),
        };
        let views = synthesize_views(&spec).unwrap();
        let grid = AbsorptionGrid::for_object(&mesh.bounds(), 6, 0.0).unwrap();
        (Scene::new(spec.env.clone(), mesh, 1.4, Some(grid)), views)
    }

    fn small(iterations: usize, freeze: usize) -> StageConfig {
        StageConfig {
            iterations,
            freeze_iterations: freeze,
            batch_rays: 300,
            periodic_interval: 3,
            periodic_steps: 2,
            mat_smooth_samples: 64,
            vol_samples: 64,
            ..Default::default()
        }
    }

    #[test]
    fn frozen_geometry_is_bit_identical() {
        let (scene, views) = fixture();
        let before = scene.object.as_ref().unwrap().mesh().positions().to_vec();
        let out = run_stage2(scene, &views, &small(6, 6), None).unwrap();
        assert_eq!(out.scene.object.as_ref().unwrap().mesh().positions(), &before[..]);
        assert_eq!(out.log.len(), 6);
        assert!(out.log.iter().all(|e| e.phase == "frozen"));
    }

    #[test]
    fn joint_phase_moves_vertices_and_stays_in_window() {
        let (scene, views) = fixture();
        let before = scene.object.as_ref().unwrap().mesh().positions().to_vec();
        let mut cfg = small(8, 2);
        cfg.lr_ior_joint = 0.5;
        let out = run_stage2(scene, &views, &cfg, None).unwrap();
        assert_ne!(out.scene.object.as_ref().unwrap().mesh().positions(), &before[..]);
        assert!(out.log.iter().all(|e| (1.0..=3.0).contains(&e.ior)));
        assert!(out.log.iter().any(|e| e.mask > 0.0));
    }

    #[test]
    fn reproducible_with_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        for d in [&a, &b] {
            let (scene, views) = fixture();
            run_stage2(scene, &views, &StageConfig { checkpoint_every: 2, ..small(4, 2) }, Some(d)).unwrap();
        }
        for f in ["checkpoint_000002/mesh.obj", "checkpoint_000004/grid.bin", "checkpoint_000004/state.json"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
        let log = fs::read_to_string(a.join("log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 4);
    }

    #[test]
    fn invalid_config_names_key() {
        let (scene, views) = fixture();
        let cfg = StageConfig { freeze_iterations: 10, iterations: 5, ..Default::default() };
        let err = run_stage2(scene, &views, &cfg, None).err().unwrap();
        assert!(err.to_string().contains("freeze_iterations"));
    }
}
