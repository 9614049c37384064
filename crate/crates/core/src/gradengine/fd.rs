use std::fmt;

use super::{radiance_backward, Freeze};
use crate::error::{Error, Result};
use crate::math::{Ray, Rgb};
use crate::tracer::{render_rays, PathRecord, RenderConfig, Scene};

/// Relative-error denominator floor.
const REL_FLOOR: f64 = 1e-8;
/// One-sided differences of a stable ray agree to this fraction.
const KINK_TOL: f64 = 0.01;

/// One scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coord {
    Ior,
    /// Raw grid value by flat index.
    Grid(usize),
    /// Vertex index and axis.
    Vertex(usize, usize),
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coord::Ior => write!(f, "ior"),
            Coord::Grid(i) => write!(f, "grid[{i}]"),
            Coord::Vertex(v, a) => write!(f, "v{v}.{}", ["x", "y", "z"][*a]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdEntry {
    pub coord: Coord,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
    /// Rays whose topology changed under ±h, or whose one-sided
    /// differences disagree (a kink or near-critical Fresnel inside the stencil).
    pub excluded_rays: usize,
}

impl FdEntry {
    pub fn excluded(&self) -> bool {
        self.excluded_rays > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub total_rays: usize,
    pub h: f64,
}

impl FdReport {
    /// Mean over coordinates of the excluded ray fraction.
    pub fn excluded_fraction(&self) -> f64 {
        if self.entries.is_empty() || self.total_rays == 0 {
            return 0.0;
        }
        let s: usize = self.entries.iter().map(|e| e.excluded_rays).sum();
        s as f64 / (self.entries.len() * self.total_rays) as f64
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn median_rel_err(&self) -> f64 {
        let mut v: Vec<f64> = self.entries.iter().map(|e| e.rel_err).collect();
        if v.is_empty() {
            return 0.0;
        }
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    /// Plain-text table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>14} {:>14} {:>10} excluded\n",
            "coord", "analytic", "fd", "rel_err"
        );
        for e in &self.entries {
            s += &format!(
                "{:<14} {:>14.6e} {:>14.6e} {:>10.3e} {}\n",
                e.coord.to_string(),
                e.analytic,
                e.fd,
                e.rel_err,
                if e.excluded() { format!("yes ({})", e.excluded_rays) } else { "no".into() }
            );
        }
        s += &format!(
            "rays {}  h {:e}  max_rel {:.3e}  median_rel {:.3e}  excluded {:.2}%\n",
            self.total_rays,
            self.h,
            self.max_rel_err(),
            self.median_rel_err(),
            100.0 * self.excluded_fraction()
        );
        s
    }
}

fn perturbed(scene: &Scene, coord: Coord, delta: f64) -> Result<Scene> {
    let mut s = scene.clone();
    let obj = s.object.as_mut().ok_or_else(|| Error::EmptyGeometry("scene has no object".into()))?;
    match coord {
        Coord::Ior => obj.ior += delta,
        Coord::Grid(i) => {
            let g = obj.grid.as_mut().ok_or_else(|| Error::Invalid("scene has no absorption grid".into()))?;
            if i >= g.raw().len() {
                return Err(Error::Invalid(format!("grid index {i} out of range")));
            }
            g.update_raw(|raw| raw[i] += delta);
        }
        Coord::Vertex(v, a) => {
            let mut p = obj.mesh().positions().to_vec();
            if v >= p.len() || a > 2 {
                return Err(Error::Invalid(format!("vertex coordinate {v}.{a} out of range")));
            }
            p[v][a] += delta;
            obj.set_positions(p)?;
        }
    }
    Ok(s)
}

fn channel_sum(r: &Rgb) -> f64 {
    r.x + r.y + r.z
}

/// Compares analytic gradients of the mean radiance channel-sum against
/// central differences, one coordinate at a time. Rays whose path topology
/// differs at `+h` or `−h` are dropped from both estimates for that
/// coordinate.
pub fn finite_diff_check(
    scene: &Scene,
    rays: &[Ray],
    coords: &[Coord],
    h: f64,
    cfg: &RenderConfig,
) -> Result<FdReport> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    if coords.len() > 200 {
        return Err(Error::Invalid("at most 200 coordinates per check".into()));
    }
    if rays.is_empty() {
        return Err(Error::Invalid("no rays to check".into()));
    }
    let base = render_rays(scene, rays, cfg);
    let topo: Vec<_> = base.iter().map(|r| r.record.topology()).collect();
    let n = rays.len() as f64;
    let mut entries = Vec::with_capacity(coords.len());
    for &coord in coords {
        let plus = render_rays(&perturbed(scene, coord, h)?, rays, cfg);
        let minus = render_rays(&perturbed(scene, coord, -h)?, rays, cfg);
        let mut fd = 0.0;
        let mut records: Vec<&PathRecord> = Vec::new();
        let mut excluded = 0;
        for i in 0..rays.len() {
            if plus[i].record.topology() != topo[i] || minus[i].record.topology() != topo[i] {
                excluded += 1;
                continue;
            }
            let f0 = channel_sum(&base[i].radiance);
            let (up, down) = (channel_sum(&plus[i].radiance) - f0, f0 - channel_sum(&minus[i].radiance));
            if (up - down).abs() > KINK_TOL * (up.abs() + down.abs()) + 1e-12 {
                excluded += 1;
                continue;
            }
            fd += up + down;
            records.push(&base[i].record);
        }
        fd /= 2.0 * h * n;
        let grads = radiance_backward(scene, &records, &vec![Rgb::repeat(1.0 / n); records.len()], cfg, &Freeze {
            env: true,
            ..Default::default()
        })?;
        let analytic = match coord {
            Coord::Ior => grads.ior,
            Coord::Grid(i) => grads.grid[i],
            Coord::Vertex(v, a) => grads.vertices[v][a],
        };
        let rel_err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_FLOOR);
        entries.push(FdEntry {
            coord,
            analytic,
            fd,
            rel_err,
            excluded_rays: excluded,
        });
    }
    Ok(FdReport {
        entries,
        total_rays: rays.len(),
        h,
    })
}
