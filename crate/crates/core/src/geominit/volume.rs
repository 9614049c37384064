use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};

/// Cubic-voxel lattice over a box. Values live at voxel centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub dims: [usize; 3],
    /// Center of voxel (0, 0, 0).
    pub origin: Vec3,
    pub voxel: f64,
}

impl Lattice {
    /// `resolution` voxels along the longest axis of `aabb`; the other axes
    /// are rounded up and the lattice is centered on the box.
    pub fn covering(aabb: &Aabb, resolution: usize) -> Result<Self> {
        if resolution < 2 || aabb.is_empty() {
            return Err(Error::Invalid("lattice needs a non-empty box and resolution ≥ 2".into()));
        }
        let e = aabb.extent();
        let voxel = e.max() / resolution as f64;
        if !(voxel > 0.0) {
            return Err(Error::Invalid("lattice box has zero extent".into()));
        }
        let dims = [0, 1, 2].map(|a| ((e[a] / voxel).ceil() as usize).max(1));
        let span = Vec3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * voxel;
        let origin = aabb.center() - span * 0.5 + Vec3::repeat(0.5 * voxel);
        Ok(Lattice { dims, origin, voxel })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        [i, j, idx / (self.dims[0] * self.dims[1])]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.voxel
    }

    pub fn bounds(&self) -> Aabb {
        let h = Vec3::repeat(0.5 * self.voxel);
        let [a, b, c] = self.dims;
        Aabb::new(self.origin - h, self.center(a - 1, b - 1, c - 1) + h)
    }

    /// The same lattice grown by `n` voxels on every side.
    pub fn padded(&self, n: usize) -> Lattice {
        Lattice {
            dims: self.dims.map(|d| d + 2 * n),
            origin: self.origin - Vec3::repeat(n as f64 * self.voxel),
            voxel: self.voxel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Occupancy {
    pub lattice: Lattice,
    pub cells: Vec<bool>,
}

impl Occupancy {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn from_fn(lattice: Lattice, f: impl Fn(&Vec3) -> bool + Sync) -> Self {
        let cells = (0..lattice.len())
            .into_par_iter()
            .map(|idx| {
                let [i, j, k] = lattice.coords(idx);
                f(&lattice.center(i, j, k))
            })
            .collect();
        Occupancy { lattice, cells }
    }
}

/// Signed distances at voxel centers, negative inside. Dilation is kept as
/// a separate offset so that repeated offsets compose exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfGrid {
    pub lattice: Lattice,
    base: Vec<f64>,
    offset: f64,
}

impl SdfGrid {
    pub fn new(lattice: Lattice, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a lattice of {}",
                values.len(),
                lattice.len()
            )));
        }
        Ok(SdfGrid {
            lattice,
            base: values,
            offset: 0.0,
        })
    }

    pub fn from_fn(lattice: Lattice, f: impl Fn(&Vec3) -> f64 + Sync) -> Self {
        let base = (0..lattice.len())
            .into_par_iter()
            .map(|idx| {
                let [i, j, k] = lattice.coords(idx);
                f(&lattice.center(i, j, k))
            })
            .collect();
        SdfGrid {
            lattice,
            base,
            offset: 0.0,
        }
    }

    pub fn value(&self, idx: usize) -> f64 {
        self.base[idx] - self.offset
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.value(self.lattice.index(i, j, k))
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.base.len()).map(|i| self.value(i)).collect()
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }
}

/// Lowers every value by `epsilon`, growing the zero level set outward.
pub fn dilate_sdf(sdf: &SdfGrid, epsilon: f64) -> Result<SdfGrid> {
    if !(epsilon >= 0.0) {
        return Err(Error::Invalid("dilation must be non-negative".into()));
    }
    let mut out = sdf.clone();
    out.offset += epsilon;
    Ok(out)
}

fn dilate_mask(mask: &[f64], w: usize, h: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] < 0.5 {
                continue;
            }
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    out[yy * w + xx] = true;
                }
            }
        }
    }
    out
}

/// Keeps voxels whose center lands inside the 1-px-dilated mask of every
/// view that sees it. Voxels no view sees are dropped.
pub fn carve_visual_hull(masks: &[&[f64]], cameras: &[Camera], resolution: usize, aabb: &Aabb) -> Result<Occupancy> {
    if masks.len() != cameras.len() {
        return Err(Error::ShapeMismatch("one mask per camera is required".into()));
    }
    if cameras.len() < 3 {
        return Err(Error::Invalid("carving needs at least 3 views".into()));
    }
    for (m, c) in masks.iter().zip(cameras) {
        if m.len() != c.pixel_count() {
            return Err(Error::ShapeMismatch("mask size differs from its camera".into()));
        }
    }
    let lattice = Lattice::covering(aabb, resolution)?;
    let dilated: Vec<Vec<bool>> = masks
        .iter()
        .zip(cameras)
        .map(|(m, c)| dilate_mask(m, c.width, c.height))
        .collect();
    let occ = Occupancy::from_fn(lattice, |p| {
        let mut seen = false;
        for (m, c) in dilated.iter().zip(cameras) {
            if let Some((x, y)) = c.pixel_of(p) {
                seen = true;
                if !m[y * c.width + x] {
                    return false;
                }
            }
        }
        seen
    });
    if occ.count() == 0 {
        return Err(Error::EmptyHull);
    }
    Ok(occ)
}

/// 1-D squared distance transform of `f` (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first = 0;
    while first < n && !f[first].is_finite() {
        first += 1;
    }
    if first == n {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    v[0] = first;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere.
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared voxel-unit distance from every voxel to the nearest `true` one.
fn squared_edt(dims: [usize; 3], seeds: &[bool]) -> Vec<f64> {
    let mut g: Vec<f64> = seeds.iter().map(|s| if *s { 0.0 } else { f64::INFINITY }).collect();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let lines: Vec<usize> = (0..g.len())
            .filter(|&idx| {
                let c = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])];
                c[axis] == 0
            })
            .collect();
        let results: Vec<(usize, Vec<f64>)> = lines
            .par_iter()
            .map(|&start| {
                let f: Vec<f64> = (0..n).map(|q| g[start + q * stride]).collect();
                let mut out = vec![0.0; n];
                let mut v = vec![0usize; n];
                let mut z = vec![0.0; n + 1];
                edt_1d(&f, &mut out, &mut v, &mut z);
                (start, out)
            })
            .collect();
        for (start, out) in results {
            for (q, val) in out.into_iter().enumerate() {
                g[start + q * stride] = val;
            }
        }
    }
    g
}

/// Exact Euclidean signed distance to the occupancy boundary. The grid is
/// padded by one empty voxel per side so the surface is always closed;
/// a voxel's value is its center distance to the nearest voxel of the
/// other kind minus half a voxel, so a lone occupied voxel reads
/// `−voxel/2`.
pub fn sdf_from_occupancy(occ: &Occupancy) -> Result<SdfGrid> {
    if occ.cells.len() != occ.lattice.len() {
        return Err(Error::ShapeMismatch("occupancy size differs from its lattice".into()));
    }
    if occ.count() == 0 {
        return Err(Error::EmptyHull);
    }
    let lat = occ.lattice.padded(1);
    let mut inside = vec![false; lat.len()];
    for (idx, c) in occ.cells.iter().enumerate() {
        if *c {
            let [i, j, k] = occ.lattice.coords(idx);
            inside[lat.index(i + 1, j + 1, k + 1)] = true;
        }
    }
    let outside: Vec<bool> = inside.iter().map(|c| !c).collect();
    let d_in = squared_edt(lat.dims, &inside);
    let d_out = squared_edt(lat.dims, &outside);
    let h = lat.voxel;
    let values = inside
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if *c {
                -(d_out[i].sqrt() - 0.5) * h
            } else {
                (d_in[i].sqrt() - 0.5) * h
            }
        })
        .collect();
    SdfGrid::new(lat, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(res: usize) -> Lattice {
        Lattice::covering(&Aabb::new(Vec3::repeat(-1.0), Vec3::repeat(1.0)), res).unwrap()
    }

    #[test]
    fn edt_matches_brute_force() {
        let dims = [7, 5, 6];
        let n = dims[0] * dims[1] * dims[2];
        let seeds: Vec<bool> = (0..n).map(|i| (i * 7919) % 13 == 0).collect();
        let d = squared_edt(dims, &seeds);
        let c = |i: usize| [i % 7, (i / 7) % 5, i / 35];
        for i in 0..n {
            let best = (0..n)
                .filter(|j| seeds[*j])
                .map(|j| {
                    let (a, b) = (c(i), c(j));
                    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(d[i], best);
        }
    }

    #[test]
    fn single_voxel_is_radial() {
        let lat = cube(9);
        let mut cells = vec![false; lat.len()];
        cells[lat.index(4, 4, 4)] = true;
        let sdf = sdf_from_occupancy(&Occupancy { lattice: lat, cells }).unwrap();
        let h = lat.voxel;
        // Padded by one voxel.
        assert!((sdf.at(5, 5, 5) + h / 2.0).abs() < 1e-12);
        let min = sdf.values().into_iter().fold(f64::INFINITY, f64::min);
        assert_eq!(min, sdf.at(5, 5, 5));
        assert!((sdf.at(8, 5, 5) - 2.5 * h).abs() < 1e-12);
        assert!((sdf.at(7, 7, 5) - (8f64.sqrt() - 0.5) * h).abs() < 1e-12);
    }

    #[test]
    fn half_space_is_planar() {
        let lat = cube(16);
        let occ = Occupancy::from_fn(lat, |p| p.z < 0.0);
        let sdf = sdf_from_occupancy(&occ).unwrap();
        let pl = sdf.lattice;
        for k in 0..pl.dims[2] {
            let c = pl.center(8, 8, k);
            if c.z.abs() > 0.45 {
                continue;
            }
            // Exact up to rounding the plane to the voxel face.
            assert!((sdf.at(8, 8, k) - c.z).abs() < 1e-9, "{} vs {}", sdf.at(8, 8, k), c.z);
        }
    }

    #[test]
    fn all_occupied_is_non_positive() {
        let lat = cube(6);
        let occ = Occupancy { lattice: lat, cells: vec![true; lat.len()] };
        let sdf = sdf_from_occupancy(&occ).unwrap();
        for (idx, v) in sdf.values().iter().enumerate() {
            let [i, j, k] = sdf.lattice.coords(idx);
            let interior = (1..7).contains(&i) && (1..7).contains(&j) && (1..7).contains(&k);
            if interior {
                assert!(*v <= 0.0);
            }
        }
    }

    #[test]
    fn dilation_composes_exactly() {
        let lat = cube(8);
        let s = SdfGrid::from_fn(lat, |p| p.norm() - 0.5);
        assert_eq!(dilate_sdf(&s, 0.0).unwrap().values(), s.values());
        let a = dilate_sdf(&dilate_sdf(&s, 0.1).unwrap(), 0.07).unwrap();
        let b = dilate_sdf(&s, 0.1 + 0.07).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(dilate_sdf(&s, -1.0).is_err());
    }

    #[test]
    fn lipschitz_bound_holds() {
        let lat = cube(12);
        let occ = Occupancy::from_fn(lat, |p| (p - Vec3::new(0.2, 0.0, 0.1)).norm() < 0.6 || p.x.abs() + p.y.abs() < 0.3);
        let sdf = sdf_from_occupancy(&occ).unwrap();
        let l = sdf.lattice;
        let diag = l.voxel * 3f64.sqrt();
        for a in (0..l.len()).step_by(37) {
            for b in (0..l.len()).step_by(53) {
                let (ca, cb) = (l.coords(a), l.coords(b));
                let d = (l.center(ca[0], ca[1], ca[2]) - l.center(cb[0], cb[1], cb[2])).norm();
                assert!((sdf.value(a) - sdf.value(b)).abs() <= d + 2.0 * diag + 1e-12);
            }
        }
    }
}
