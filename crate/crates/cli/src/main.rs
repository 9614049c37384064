use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use refrax_core::config::{Config, EnvConfig, ShapeConfig};
use refrax_core::dataset::Dataset;
use refrax_core::environ::{fit_env_from_views, EnvMap};
use refrax_core::geominit::init_geometry;
use refrax_core::gradengine::{finite_diff_check, Coord};
use refrax_core::imageio::{write_pfm, write_png, Image};
use refrax_core::mesh::obj::{read_obj, write_obj};
use refrax_core::metrics::{chamfer_distance, f1_score, normalize_pair};
use refrax_core::optimize::run_stage2;
use refrax_core::parallel::{resolve_threads, with_threads};
use refrax_core::scenegen::synthesize_dataset;
use refrax_core::tracer::{render, Scene};

#[derive(Parser)]
#[command(name = "refrax", version, about = "Reconstruct transparent objects from posed images")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration layered over the shipped defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed and every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (falls back to DIFFTRANS_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override, e.g. `--set stage2.batch_rays=2000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view dataset from the `[scene]` section.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: carve, dilate, extract and remesh an initial mesh.
    InitGeometry {
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for `mesh.obj` and `report.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an environment map from background pixels.
    FitEnv {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Output PFM.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: joint refinement of absorption, IoR and vertices.
    Optimize {
        #[arg(long)]
        dataset: PathBuf,
        /// Initial mesh (stage-1 output).
        #[arg(long)]
        mesh: PathBuf,
        /// Environment map; fitted from the dataset when omitted.
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        stage: StageFlags,
    },
    /// Render the configured scene from `[camera]`.
    Render {
        #[command(flatten)]
        scene: SceneFlags,
        /// `.png` writes 8-bit sRGB-like output; anything else writes PFM.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the configured scene under a different environment map.
    Relight {
        #[command(flatten)]
        scene: SceneFlags,
        /// New environment; the configured one when omitted.
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        scene: SceneFlags,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Chamfer distance and F1 between two meshes.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// JSON report path; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SceneFlags {
    /// Mesh replacing `scene.shape`.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Absorption checkpoint replacing `scene.mu`.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    ior: Option<f64>,
}

#[derive(Args)]
struct StageFlags {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    freeze_iterations: Option<usize>,
    #[arg(long)]
    batch_rays: Option<usize>,
    #[arg(long)]
    lr_material: Option<f64>,
    #[arg(long)]
    lr_ior_frozen: Option<f64>,
    #[arg(long)]
    lr_ior_joint: Option<f64>,
    #[arg(long)]
    lr_vertices: Option<f64>,
    #[arg(long)]
    periodic_interval: Option<usize>,
    #[arg(long)]
    periodic_steps: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl StageFlags {
    fn overrides(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut push = |k: &str, val: Option<String>| {
            if let Some(val) = val {
                v.push(format!("stage2.{k}={val}"));
            }
        };
        let f = |x: Option<f64>| x.map(|x| format!("{x:e}"));
        let u = |x: Option<usize>| x.map(|x| x.to_string());
        push("iterations", u(self.iterations));
        push("freeze_iterations", u(self.freeze_iterations));
        push("batch_rays", u(self.batch_rays));
        push("lr_material", f(self.lr_material));
        push("lr_ior_frozen", f(self.lr_ior_frozen));
        push("lr_ior_joint", f(self.lr_ior_joint));
        push("lr_vertices", f(self.lr_vertices));
        push("periodic_interval", u(self.periodic_interval));
        push("periodic_steps", u(self.periodic_steps));
        push("checkpoint_every", u(self.checkpoint_every));
        v
    }
}

fn load_config(g: &Global, extra: Vec<String>) -> Result<Config> {
    let mut overrides = g.set.clone();
    if let Some(s) = g.seed {
        for k in ["seed", "stage2.seed", "geometry.refine.seed"] {
            overrides.push(format!("{k}={s}"));
        }
    }
    overrides.extend(extra);
    let cfg = match &g.config {
        Some(p) => Config::load(p, &overrides)?,
        None => Config::from_layers(None, &overrides)?,
    };
    Ok(cfg)
}

fn apply_scene_flags(cfg: &mut Config, f: &SceneFlags) {
    if let Some(m) = &f.mesh {
        cfg.scene.shape = ShapeConfig::Obj { path: m.clone() };
    }
    if let Some(g) = &f.grid {
        cfg.scene.grid = Some(g.clone());
    }
    if let Some(i) = f.ior {
        cfg.scene.ior = i;
    }
}

fn write_image(path: &Path, img: &Image) -> Result<()> {
    let png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if png {
        write_png(path, img)?;
    } else {
        write_pfm(path, img)?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn render_scene(cfg: &Config, scene: &Scene, out: &Path) -> Result<()> {
    let camera = cfg.camera.build()?;
    let g = render(scene, &camera, &cfg.render);
    write_image(out, &g.radiance)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    chamfer: f64,
    f1: f64,
    tau: f64,
    samples: usize,
    normalized: bool,
}

fn gradcheck(cfg: &Config, out: Option<&Path>) -> Result<()> {
    let mut scene = cfg.build_scene()?;
    let obj = scene.object.as_mut().context("scene has no object")?;
    if obj.grid.is_none() && cfg.gradcheck.grid_coords > 0 {
        // A clear medium has no grid to probe; check a faintly absorbing one.
        let mut c = cfg.clone();
        c.scene.mu = refrax_core::scenegen::MuField::Constant { mu: [0.2, 0.4, 0.8] };
        obj.grid = c.scene_grid(obj.mesh())?;
    }
    let camera = cfg.camera.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_rays = cfg.gradcheck.rays.min(camera.pixel_count());
    let rays: Vec<_> = sample(&mut rng, camera.pixel_count(), n_rays)
        .into_iter()
        .map(|i| camera.pixel_ray(i))
        .collect();
    let mut coords = Vec::new();
    if cfg.gradcheck.ior {
        coords.push(Coord::Ior);
    }
    if let Some(g) = &obj.grid {
        let n = cfg.gradcheck.grid_coords.min(g.raw().len());
        coords.extend(sample(&mut rng, g.raw().len(), n).into_iter().map(Coord::Grid));
    }
    let nv = obj.mesh().vertex_count();
    let n = cfg.gradcheck.vertex_coords.min(nv * 3);
    coords.extend(sample(&mut rng, nv * 3, n).into_iter().map(|i| Coord::Vertex(i / 3, i % 3)));
    let report = finite_diff_check(&scene, &rays, &coords, cfg.gradcheck.h, &cfg.stage2.render)?;
    let table = report.table();
    print!("{table}");
    println!(
        "max rel err {:.3e}  median {:.3e}  excluded rays {:.2}%",
        report.max_rel_err(),
        report.median_rel_err(),
        100.0 * report.excluded_fraction()
    );
    if let Some(p) = out {
        fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let extra = match &cli.command {
        Command::Optimize { stage, .. } => stage.overrides(),
        _ => Vec::new(),
    };
    let mut cfg = load_config(&cli.global, extra)?;
    let threads = match resolve_threads(cli.global.threads) {
        0 => cfg.threads,
        t => t,
    };
    with_threads(threads, move || match cli.command {
        Command::MakeDataset { out } => {
            let ds = synthesize_dataset(&cfg.dataset_spec()?, &out)?;
            println!("{} views written to {}", ds.views.len(), out.display());
            Ok(())
        }
        Command::InitGeometry { dataset, out } => {
            let ds = Dataset::load(&dataset)?;
            let masks = ds.masks();
            let refs: Vec<&[f64]> = masks.iter().map(|m| m.as_slice()).collect();
            let (mesh, report) = init_geometry(&refs, &ds.cameras(), &cfg.geometry)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_obj(&out.join("mesh.obj"), &mesh)?;
            write_json(&out.join("report.json"), &report)?;
            println!(
                "{} faces, mask loss {:.5} -> {:.5}",
                mesh.face_count(),
                report.refine.loss_before,
                report.refine.loss_after
            );
            Ok(())
        }
        Command::FitEnv { dataset, width, height, out } => {
            let ds = Dataset::load(&dataset)?;
            let fit = fit_env_from_views(&ds.images(), &ds.masks(), &ds.cameras(), width, height)?;
            fit.env.write(&out)?;
            let covered = fit.coverage.iter().filter(|c| **c > 0).count();
            println!("{covered}/{} texels observed", fit.coverage.len());
            Ok(())
        }
        Command::Optimize { dataset, mesh, env, out, .. } => {
            let ds = Dataset::load(&dataset)?;
            let env = match env {
                Some(p) => EnvMap::read(&p)?,
                None => {
                    let (w, h) = match cfg.scene.env {
                        EnvConfig::Studio { width, height } => (width, height),
                        _ => (128, 64),
                    };
                    fit_env_from_views(&ds.images(), &ds.masks(), &ds.cameras(), w, h)?.env
                }
            };
            let scene = cfg.initial_scene(read_obj(&mesh)?, env)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let result = run_stage2(scene, &ds.views, &cfg.stage2, Some(&out))?;
            let obj = result.scene.object.as_ref().context("scene lost its object")?;
            println!("ior {:.4}, {} iterations, output in {}", obj.ior, result.log.len(), out.display());
            Ok(())
        }
        Command::Render { scene, out } => {
            apply_scene_flags(&mut cfg, &scene);
            render_scene(&cfg, &cfg.build_scene()?, &out)
        }
        Command::Relight { scene, env, out } => {
            apply_scene_flags(&mut cfg, &scene);
            let mut s = cfg.build_scene()?;
            if let Some(p) = env {
                s.env = EnvMap::read(&p)?;
            }
            render_scene(&cfg, &s, &out)
        }
        Command::Gradcheck { scene, out } => {
            apply_scene_flags(&mut cfg, &scene);
            gradcheck(&cfg, out.as_deref())
        }
        Command::Eval { pred, gt, out } => {
            let (a, b) = (read_obj(&pred)?, read_obj(&gt)?);
            let (a, b) = if cfg.eval.normalize { normalize_pair(&a, &b)? } else { (a, b) };
            let report = EvalReport {
                chamfer: chamfer_distance(&a, &b, cfg.eval.samples, cfg.seed)?,
                f1: f1_score(&a, &b, cfg.eval.f1_tau, cfg.eval.samples, cfg.seed)?,
                tau: cfg.eval.f1_tau,
                samples: cfg.eval.samples,
                normalized: cfg.eval.normalize,
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
