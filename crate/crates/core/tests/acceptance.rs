//! End-to-end acceptance checks. Run with
//! `cargo test -p refrax-core --test acceptance -- --nocapture`
//! to see one PASS/FAIL line per criterion.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refrax_core::config::Config;
use refrax_core::dataset::View;
use refrax_core::environ::EnvMap;
use refrax_core::geominit::{dilate_sdf, init_geometry, marching_tetrahedra, GeomInitConfig, Lattice, SdfGrid};
use refrax_core::gradengine::{finite_diff_check, Coord};
use refrax_core::imageio::write_pfm;
use refrax_core::losses::{l_area, l_color, l_mask, l_tone, LossWeights};
use refrax_core::math::{softplus_inv, Aabb, Ray, Rgb, Vec3};
use refrax_core::medium::AbsorptionGrid;
use refrax_core::mesh::Mesh;
use refrax_core::metrics::{chamfer_distance, f1_score, normalize_pair, psnr};
use refrax_core::optics::{fresnel, refract};
use refrax_core::optimize::{run_stage2, StageConfig};
use refrax_core::parallel::with_threads;
use refrax_core::scenegen::{
    ground_truth_scene, make_icosphere, make_slab, render_views, sample_cameras, slab_env, slab_transmittance_oracle,
    studio_env, synthesize_dataset, synthesize_views, DatasetSpec, MuField,
};
use refrax_core::tracer::{render, render_mask, trace, RenderConfig, Scene};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn criterion_optics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_sum, mut worst_snell) = (0.0f64, 0.0f64);
    let mut refractions = 0;
    for _ in 0..100_000 {
        let n = random_unit(&mut rng);
        let mut w = random_unit(&mut rng);
        if w.dot(&n) < 0.0 {
            w = -w;
        }
        let eta_i = rng.random_range(1.0..2.5);
        let eta_t = rng.random_range(1.0..2.5);
        let cos_i = w.dot(&n);
        match refract(&w, &n, eta_i, eta_t) {
            Some((t, cos_t)) => {
                refractions += 1;
                let (r, tr) = fresnel(cos_i, cos_t, eta_i, eta_t);
                worst_sum = worst_sum.max((r + tr - 1.0).abs());
                let sin_i = (w - w.dot(&n) * n).norm();
                let sin_t = (t - t.dot(&n) * n).norm();
                worst_snell = worst_snell.max((eta_i * sin_i - eta_t * sin_t).abs());
            }
            None => {
                // Total internal reflection reflects everything; R + T = 1 + 0.
                let (r, tr) = (1.0, 0.0);
                worst_sum = worst_sum.max((r + tr - 1.0f64).abs());
            }
        }
    }
    // Critical angle for every ordered pair on a coarse grid of indices.
    let mut worst_tir = 0.0f64;
    let mut tir_ok = true;
    let n = Vec3::z();
    for i in 0..20 {
        for j in 0..i {
            let eta_i = 1.0 + 0.1 * i as f64;
            let eta_t = 1.0 + 0.1 * j as f64;
            let crit = (eta_t / eta_i).asin();
            let dir = |th: f64| Vec3::new(th.sin(), 0.0, th.cos());
            let below = refract(&dir(crit - 1e-9), &n, eta_i, eta_t).is_some();
            let above = refract(&dir(crit + 1e-9), &n, eta_i, eta_t).is_none();
            tir_ok &= below && above;
            // Bisect the detected boundary.
            let (mut lo, mut hi) = (crit - 1e-6, crit + 1e-6);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if refract(&dir(mid), &n, eta_i, eta_t).is_some() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            worst_tir = worst_tir.max((0.5 * (lo + hi) - crit).abs());
        }
    }
    let (r0, _) = fresnel(1.0, 1.0, 1.0, 1.5);
    let pass = worst_sum < 1e-12 && worst_snell < 1e-12 && tir_ok && worst_tir < 1e-9 && (r0 - 0.04).abs() < 1e-12;
    outcome(
        pass,
        format!(
            "1e5 configs ({refractions} refracted): |R+T-1| {worst_sum:.1e}, Snell {worst_snell:.1e}, TIR boundary {worst_tir:.1e}, R0 {r0}"
        ),
    )
}

fn criterion_transport() -> Outcome {
    let down = Ray::new(Vec3::new(0.0, 0.0, 5.0), -Vec3::z());
    let mut worst = 0.0f64;
    for eta in [1.3, 1.5] {
        for mu in [0.0, 0.5, 2.0] {
            for d in [2, 4, 8] {
                let mesh = make_slab(0.5, 4.0);
                let grid = (mu > 0.0)
                    .then(|| AbsorptionGrid::constant([4; 3], mesh.bounds().inflated(0.05), softplus_inv(mu)).unwrap());
                let scene = Scene::new(slab_env(1.0), mesh, eta, grid);
                let cfg = RenderConfig { max_depth: d, ..RenderConfig::train() };
                let got = trace(&scene, &down, &cfg).radiance;
                let want = slab_transmittance_oracle(eta, Rgb::repeat(mu), 0.5, d);
                worst = worst.max((got - want).abs().max());
            }
        }
    }
    let mu = 0.8;
    let mesh = make_icosphere(1.0, 3);
    let grid = AbsorptionGrid::constant([8; 3], Aabb::new(Vec3::repeat(-1.2), Vec3::repeat(1.2)), softplus_inv(mu)).unwrap();
    let scene = Scene::new(EnvMap::constant(8, 4, Rgb::repeat(1.0)), mesh, 1.5, Some(grid));
    let rec = trace(&scene, &down, &RenderConfig::train()).record;
    let inner = &rec.nodes[rec.nodes[0].children[1] as usize];
    let chord_err = (inner.transmittance.x - (-2.0 * mu).exp()).abs();
    outcome(
        worst < 1e-6 && chord_err < 1e-4,
        format!("slab max |tracer-oracle| {worst:.1e} over 18 cases, sphere chord |T-e^-2mu| {chord_err:.1e}"),
    )
}

fn gradcheck_scene() -> Scene {
    let mesh = make_icosphere(1.0, 2);
    let grid = AbsorptionGrid::from_fn([8; 3], mesh.bounds().inflated(0.05), |x| {
        Rgb::new(0.4 + 0.2 * x.x, 0.8 + 0.3 * x.z, 1.2 - 0.2 * x.y)
    })
    .unwrap();
    Scene::new(studio_env(64, 32), mesh, 1.45, Some(grid))
}

fn gradcheck_rays(n: usize, seed: u64) -> Vec<Ray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let o = Vec3::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), 3.0);
            let target = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0);
            Ray::new(o, (target - o).normalize())
        })
        .collect()
}

fn criterion_gradients() -> Outcome {
    let scene = gradcheck_scene();
    let rays = gradcheck_rays(300, 9);
    let cfg = RenderConfig::train();
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let obj = scene.object.as_ref().unwrap();
    let grid = obj.grid.as_ref().unwrap();
    let [nx, ny, nz] = grid.resolution();
    // Corners inside the object, where rays actually sample the field.
    let inner: Vec<usize> = (0..=nx)
        .flat_map(|i| (0..=ny).flat_map(move |j| (0..=nz).map(move |k| (i, j, k))))
        .filter(|&(i, j, k)| grid.corner_position(i, j, k).norm() < 0.8)
        .map(|(i, j, k)| grid.corner_index(i, j, k))
        .collect();
    let mut material = vec![Coord::Ior];
    for _ in 0..50 {
        material.push(Coord::Grid(inner[rng.random_range(0..inner.len())] * 3 + rng.random_range(0..3)));
    }
    let mat = finite_diff_check(&scene, &rays, &material, h, &cfg).unwrap();

    let base = refrax_core::tracer::render_rays(&scene, &rays, &cfg);
    let mut touched: Vec<usize> = base
        .iter()
        .flat_map(|r| r.record.nodes.iter().filter_map(|n| n.hit.map(|h| h.face)))
        .flat_map(|f| obj.mesh().faces()[f as usize].map(|v| v as usize))
        .collect();
    touched.sort_unstable();
    touched.dedup();
    let vertex: Vec<Coord> = (0..30)
        .map(|_| Coord::Vertex(touched[rng.random_range(0..touched.len())], rng.random_range(0..3)))
        .collect();
    let vert = finite_diff_check(&scene, &rays, &vertex, h, &cfg).unwrap();

    let one = with_threads(1, || refrax_core::gradengine::finite_diff_check(&scene, &rays, &material[..6], h, &cfg).unwrap());
    let four = with_threads(4, || refrax_core::gradengine::finite_diff_check(&scene, &rays, &material[..6], h, &cfg).unwrap());
    let deterministic = one == four;
    let pass = mat.max_rel_err() < 1e-3
        && vert.max_rel_err() < 5e-3
        && vert.excluded_fraction() < 0.1
        && mat.excluded_fraction() < 0.1
        && deterministic;
    if !pass {
        println!("{}\n{}", mat.table(), vert.table());
    }
    outcome(
        pass,
        format!(
            "IoR+50 grid max rel {:.1e}; 30 vertex max rel {:.1e}, {:.1}% rays excluded; 1 vs 4 threads identical: {deterministic}",
            mat.max_rel_err(),
            vert.max_rel_err(),
            100.0 * vert.excluded_fraction()
        ),
    )
}

fn stage1_inputs(mesh: &Mesh, n: usize, res: usize, seed: u64) -> (Vec<refrax_core::camera::Camera>, Vec<Vec<f64>>) {
    let cams = sample_cameras(&mesh.bounds(), n, res, seed).unwrap();
    let s = Scene::new(EnvMap::constant(4, 2, Rgb::zeros()), mesh.clone(), 1.0, None);
    let masks = cams.iter().map(|c| render_mask(&s, c)).collect();
    (cams, masks)
}

fn stage1(views: &[View], cfg: &GeomInitConfig) -> (Mesh, f64) {
    let masks: Vec<&[f64]> = views.iter().map(|v| v.mask.as_slice()).collect();
    let cams: Vec<_> = views.iter().map(|v| v.camera.clone()).collect();
    let (m, rep) = init_geometry(&masks, &cams, cfg).unwrap();
    (m, rep.voxel_size)
}

fn criterion_stage1() -> Outcome {
    let gt = make_icosphere(1.0, 4);
    let (cams, masks) = stage1_inputs(&gt, 20, 128, 7);
    let refs: Vec<&[f64]> = masks.iter().map(|m| m.as_slice()).collect();
    let (mesh, rep) = init_geometry(&refs, &cams, &GeomInitConfig::default()).unwrap();
    let cd = chamfer_distance(&mesh, &gt, 100_000, 1).unwrap();
    let bound = (2.0 * rep.voxel_size).powi(2);
    let (a, b) = normalize_pair(&mesh, &gt).unwrap();
    let f1 = f1_score(&a, &b, 0.01, 100_000, 1).unwrap();

    // Two spheres with a gap of 0.1 merge once the level set moves by ε = 0.06.
    let lat = Lattice::covering(&Aabb::new(Vec3::new(-1.0, -0.6, -0.6), Vec3::new(1.0, 0.6, 0.6)), 96).unwrap();
    let (c1, c2) = (Vec3::new(-0.45, 0.0, 0.0), Vec3::new(0.45, 0.0, 0.0));
    let sdf = SdfGrid::from_fn(lat, |p| ((p - c1).norm() - 0.4).min((p - c2).norm() - 0.4));
    let apart = marching_tetrahedra(&sdf, 0.0).unwrap().connected_components();
    let merged = marching_tetrahedra(&dilate_sdf(&sdf, 0.06).unwrap(), 0.0).unwrap().connected_components();
    outcome(
        cd < bound && f1 > 0.95 && apart == 2 && merged == 1,
        format!(
            "CD {cd:.2e} < (2 voxel)^2 {bound:.2e}, F1 {f1:.4}, two-sphere components {apart} -> {merged} after dilation"
        ),
    )
}

fn criterion_losses() -> Outcome {
    let tone = l_tone(&[Rgb::new(1.0, 0.0, 0.0)], &[Rgb::new(0.0, 1.0, 0.0)]);
    let color = l_color(&[Rgb::repeat(1.1)], &[Rgb::repeat(1.0)], &[false]).unwrap();
    let tri = Mesh::new(
        vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
        vec![[0, 1, 2]],
    )
    .unwrap();
    let area = l_area(&tri);
    let mask = l_mask(&[1.0, 0.0, 1.0, 0.0], &[0.0, 1.0, 0.0, 1.0]).unwrap();
    let pass = (tone - (1.0 - 2.0 / 9.0)).abs() < 1e-9 && (color - 0.03).abs() < 1e-12 && area == 0.5 && mask == 1.0;
    outcome(pass, format!("l_tone {tone:.12}, l_color {color:.15}, l_area {area}, l_mask {mask}"))
}

fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "log.jsonl") {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        mesh: make_icosphere(1.0, 2),
        ior: 1.5,
        mu: MuField::TwoTone { upper: [0.2, 0.5, 0.9], lower: [0.8, 0.3, 0.1], split: 0.1 },
        env: studio_env(64, 32),
        n_views: 4,
        resolution: 32,
        seed: 21,
        grid_resolution: 12,
        render: RenderConfig::eval(),
    };
    let runs = [(1, "a"), (3, "b"), (1, "c")];
    let mut datasets = Vec::new();
    for (threads, tag) in runs {
        let p = dir.path().join(format!("data_{tag}"));
        with_threads(threads, || synthesize_dataset(&spec, &p).unwrap());
        datasets.push(snapshot(&p));
    }
    let dataset_same = datasets.windows(2).all(|w| w[0] == w[1]);

    let views = synthesize_views(&spec).unwrap();
    let cfg = StageConfig {
        iterations: 8,
        freeze_iterations: 3,
        batch_rays: 400,
        periodic_interval: 5,
        periodic_steps: 3,
        checkpoint_every: 4,
        mat_smooth_samples: 128,
        vol_samples: 128,
        seed: 4,
        ..Default::default()
    };
    let mut checkpoints = Vec::new();
    for (threads, tag) in runs {
        let p = dir.path().join(format!("opt_{tag}"));
        let grid = AbsorptionGrid::for_object(&spec.mesh.bounds(), 8, softplus_inv(0.05)).unwrap();
        let scene = Scene::new(spec.env.clone(), make_icosphere(1.05, 2), 1.4, Some(grid));
        with_threads(threads, || run_stage2(scene, &views, &cfg, Some(&p)).unwrap());
        checkpoints.push(snapshot(&p));
    }
    let checkpoints_same = checkpoints.windows(2).all(|w| w[0] == w[1]) && checkpoints[0].len() >= 6;

    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/tests/fixtures");
    let golden = fs::read(fixture.join("slab_golden.pfm")).unwrap();
    let slab = Config::load(&fixture.join("slab.toml"), &[]).unwrap();
    let mut golden_same = true;
    for threads in [1, 3] {
        let img = with_threads(threads, || render(&slab.build_scene().unwrap(), &slab.camera.build().unwrap(), &slab.render));
        let p = dir.path().join(format!("slab_{threads}.pfm"));
        write_pfm(&p, &img.radiance).unwrap();
        golden_same &= fs::read(&p).unwrap() == golden;
    }
    outcome(
        dataset_same && checkpoints_same && golden_same,
        format!(
            "dataset identical over 3 runs (1/3/1 threads): {dataset_same}; checkpoints: {checkpoints_same}; golden slab: {golden_same}"
        ),
    )
}

struct Recovery {
    scene: Scene,
    spec: DatasetSpec,
}

fn recovery_stage(iterations: usize, freeze: usize) -> StageConfig {
    StageConfig {
        iterations,
        freeze_iterations: freeze,
        seed: 17,
        ..Default::default()
    }
}

fn criterion_ior() -> Outcome {
    let spec = DatasetSpec {
        mesh: make_icosphere(1.0, 2),
        ior: 1.5,
        mu: MuField::Constant { mu: [0.0; 3] },
        env: studio_env(128, 64),
        n_views: 20,
        resolution: 128,
        seed: 1,
        grid_resolution: 16,
        render: RenderConfig::train(),
    };
    let views = synthesize_views(&spec).unwrap();
    let (mesh, _) = stage1(&views, &GeomInitConfig::default());
    let grid = AbsorptionGrid::for_object(&mesh.bounds(), 16, softplus_inv(0.01)).unwrap();
    let scene = Scene::new(spec.env.clone(), mesh, 1.3, Some(grid));
    let out = run_stage2(scene, &views, &recovery_stage(1000, 100), None).unwrap();
    let eta = out.scene.object.as_ref().unwrap().ior;
    outcome(
        (eta - 1.5).abs() <= 0.02,
        format!("320-face icosphere, 1.3 -> {eta:.4} (target 1.5 +- 0.02)"),
    )
}

/// Geometry is the generating sphere, frozen for the whole run, so only the
/// grid and η move. The studio env is scaled to HDR-like levels and the
/// material block runs a dense-grid learning rate with the priors off.
fn absorbing_recovery() -> Recovery {
    let base = studio_env(128, 64);
    let env = EnvMap::new(128, 64, base.texels().iter().map(|t| t * 10.0).collect()).unwrap();
    let spec = DatasetSpec {
        mesh: make_icosphere(1.0, 2),
        ior: 1.5,
        mu: MuField::Constant { mu: [0.5, 1.0, 2.0] },
        env,
        n_views: 20,
        resolution: 128,
        seed: 2,
        grid_resolution: 16,
        render: RenderConfig::train(),
    };
    let views = synthesize_views(&spec).unwrap();
    let mesh = spec.mesh.clone();
    let grid = AbsorptionGrid::for_object(&mesh.bounds(), 16, softplus_inv(0.05)).unwrap();
    let scene = Scene::new(spec.env.clone(), mesh, 1.5, Some(grid));
    let cfg = StageConfig {
        lr_material: 0.05,
        weights: LossWeights { mat_smooth: 0.0, vol: 0.0, ..Default::default() },
        ..recovery_stage(1000, 1000)
    };
    let out = run_stage2(scene, &views, &cfg, None).unwrap();
    Recovery { scene: out.scene, spec }
}

/// Mean of μ̂ over a regular lattice of points inside the true sphere.
fn interior_mean(scene: &Scene) -> Rgb {
    let grid = scene.object.as_ref().unwrap().grid.as_ref().unwrap();
    let mut sum = Rgb::zeros();
    let mut n = 0.0;
    let steps = 40;
    for i in 0..steps {
        for j in 0..steps {
            for k in 0..steps {
                let c = |t: usize| -1.0 + 2.0 * (t as f64 + 0.5) / steps as f64;
                let p = Vec3::new(c(i), c(j), c(k));
                if p.norm() < 0.95 {
                    sum += grid.sample_mu(&p);
                    n += 1.0;
                }
            }
        }
    }
    sum / n
}

fn criterion_absorption(rec: &Recovery) -> Outcome {
    let mean = interior_mean(&rec.scene);
    let want = Rgb::new(0.5, 1.0, 2.0);
    let rel = (mean - want).component_div(&want).abs();
    let ranked = mean.x < mean.y && mean.y < mean.z;
    let eta = rec.scene.object.as_ref().unwrap().ior;
    outcome(
        rel.max() <= 0.1 && ranked,
        format!(
            "mean mu ({:.3}, {:.3}, {:.3}) vs (0.5, 1, 2), rel err ({:.1}%, {:.1}%, {:.1}%), rank ok {ranked}, eta {eta:.4}",
            mean.x,
            mean.y,
            mean.z,
            100.0 * rel.x,
            100.0 * rel.y,
            100.0 * rel.z
        ),
    )
}

fn criterion_novel_views(rec: &Recovery) -> Outcome {
    let gt = ground_truth_scene(&rec.spec).unwrap();
    let cams = sample_cameras(&rec.spec.mesh.bounds(), 5, 128, 991).unwrap();
    let cfg = RenderConfig::eval();
    let truth = render_views(&gt, &cams, &cfg);
    let pred = render_views(&rec.scene, &cams, &cfg);
    let scores: Vec<f64> = truth.iter().zip(&pred).map(|(a, b)| psnr(&b.image, &a.image).unwrap()).collect();
    let worst = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut list = String::new();
    for s in &scores {
        let _ = write!(list, "{s:.1} ");
    }
    outcome(worst > 30.0, format!("held-out PSNR [{}] dB, min {worst:.2}", list.trim_end()))
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    let mut run = |id: usize, name: &str, limit_s: f64, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        let pass = o.pass && secs < limit_s;
        let line = format!(
            "criterion {id} {name:<22} {} ({}; {secs:.1} s, limit {limit_s:.0} s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
        println!("{line}");
        lines.push((pass, line));
    };
    run(1, "optics", 5.0, &mut criterion_optics);
    run(2, "transport oracle", 30.0, &mut criterion_transport);
    run(3, "gradients", 300.0, &mut criterion_gradients);
    run(4, "ior recovery", 900.0, &mut criterion_ior);
    let t = Instant::now();
    let rec = absorbing_recovery();
    let fit_secs = t.elapsed().as_secs_f64();
    run(5, "absorption recovery", 1800.0 - fit_secs, &mut || {
        let mut o = criterion_absorption(&rec);
        o.detail += &format!("; fit {fit_secs:.0} s");
        o
    });
    run(6, "stage-1 geometry", 120.0, &mut criterion_stage1);
    run(7, "loss unit values", 1.0, &mut criterion_losses);
    run(8, "determinism", 600.0, &mut criterion_determinism);
    run(9, "novel views", 600.0, &mut || criterion_novel_views(&rec));
    println!();
    for (_, l) in &lines {
        println!("{l}");
    }
    let failed: Vec<&String> = lines.iter().filter(|(p, _)| !p).map(|(_, l)| l).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("\n"));
}
