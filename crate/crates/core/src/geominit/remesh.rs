use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mesh::{sorted_edge, Bvh, Mesh};

/// Mutable triangle soup with vertex→face incidence.
struct Work {
    pos: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    face_alive: Vec<bool>,
    vert_alive: Vec<bool>,
    vf: Vec<Vec<u32>>,
}

impl Work {
    fn new(mesh: &Mesh) -> Self {
        let mut vf = vec![Vec::new(); mesh.vertex_count()];
        for (i, f) in mesh.faces().iter().enumerate() {
            for &v in f {
                vf[v as usize].push(i as u32);
            }
        }
        Work {
            pos: mesh.positions().to_vec(),
            faces: mesh.faces().to_vec(),
            face_alive: vec![true; mesh.face_count()],
            vert_alive: vec![true; mesh.vertex_count()],
            vf,
        }
    }

    fn edge_faces(&self, a: u32, b: u32) -> Vec<u32> {
        self.vf[a as usize]
            .iter()
            .copied()
            .filter(|&f| self.face_alive[f as usize] && self.faces[f as usize].contains(&b))
            .collect()
    }

    fn neighbors(&self, v: u32) -> Vec<u32> {
        let mut n: Vec<u32> = self.vf[v as usize]
            .iter()
            .flat_map(|&f| self.faces[f as usize])
            .filter(|&x| x != v)
            .collect();
        n.sort_unstable();
        n.dedup();
        n
    }

    fn edges(&self) -> Vec<[u32; 2]> {
        let mut set = HashSet::new();
        for (f, alive) in self.faces.iter().zip(&self.face_alive) {
            if *alive {
                for k in 0..3 {
                    set.insert(sorted_edge(f[k], f[(k + 1) % 3]));
                }
            }
        }
        let mut e: Vec<[u32; 2]> = set.into_iter().collect();
        e.sort_unstable();
        e
    }

    fn is_boundary_vertex(&self, v: u32) -> bool {
        self.neighbors(v).iter().any(|&n| self.edge_faces(v, n).len() == 1)
    }

    fn len(&self, a: u32, b: u32) -> f64 {
        (self.pos[a as usize] - self.pos[b as usize]).norm()
    }

    fn normal(&self, f: &[u32; 3]) -> Vec3 {
        let [a, b, c] = f.map(|v| self.pos[v as usize]);
        (b - a).cross(&(c - a))
    }

    fn vertex_normal(&self, v: u32) -> Vec3 {
        let n: Vec3 = self.vf[v as usize].iter().map(|&f| self.normal(&self.faces[f as usize])).sum();
        n.try_normalize(1e-300).unwrap_or_else(Vec3::z)
    }

    fn split(&mut self, a: u32, b: u32) {
        let fs = self.edge_faces(a, b);
        if fs.is_empty() {
            return;
        }
        let m = self.pos.len() as u32;
        self.pos.push((self.pos[a as usize] + self.pos[b as usize]) * 0.5);
        self.vert_alive.push(true);
        self.vf.push(Vec::new());
        for f in fs {
            let face = self.faces[f as usize];
            let r = (0..3).find(|&k| face[k] != a && face[k] != b).unwrap();
            let (x, y, z) = (face[(r + 1) % 3], face[(r + 2) % 3], face[r]);
            // face = [z, x, y] in order; split edge x→y.
            self.faces[f as usize] = [z, x, m];
            let nf = self.faces.len() as u32;
            self.faces.push([z, m, y]);
            self.face_alive.push(true);
            self.vf[y as usize].retain(|&g| g != f);
            self.vf[y as usize].push(nf);
            self.vf[z as usize].push(nf);
            self.vf[m as usize].push(f);
            self.vf[m as usize].push(nf);
        }
    }

    fn try_collapse(&mut self, a: u32, b: u32, hi: f64) -> bool {
        let fs = self.edge_faces(a, b);
        if fs.len() != 2 {
            return false;
        }
        // A boundary endpoint stays where it is and absorbs the other one.
        let (a, b) = match (self.is_boundary_vertex(a), self.is_boundary_vertex(b)) {
            (true, true) => return false,
            (false, true) => (b, a),
            _ => (a, b),
        };
        let keep_a = self.is_boundary_vertex(a);
        let (na, nb) = (self.neighbors(a), self.neighbors(b));
        let common: Vec<u32> = na.iter().copied().filter(|x| nb.contains(x)).collect();
        if common.len() != 2 {
            return false;
        }
        if common.iter().any(|&c| self.neighbors(c).len() <= 3) {
            return false;
        }
        if na.len() + nb.len() - 2 <= 4 {
            return false;
        }
        let m = if keep_a { self.pos[a as usize] } else { (self.pos[a as usize] + self.pos[b as usize]) * 0.5 };
        for &n in na.iter().chain(&nb) {
            if n != a && n != b && (self.pos[n as usize] - m).norm() > hi {
                return false;
            }
        }
        // Reject collapses that flip or crush any surviving face.
        for &v in &[a, b] {
            for &f in &self.vf[v as usize] {
                if fs.contains(&f) {
                    continue;
                }
                let face = self.faces[f as usize];
                let before = self.normal(&face);
                let moved = face.map(|x| if x == a || x == b { m } else { self.pos[x as usize] });
                let after = (moved[1] - moved[0]).cross(&(moved[2] - moved[0]));
                if after.dot(&before) <= 0.2 * before.norm() * after.norm() || after.norm() < 1e-14 {
                    return false;
                }
            }
        }
        self.pos[a as usize] = m;
        for &f in &fs {
            self.face_alive[f as usize] = false;
            for v in self.faces[f as usize] {
                self.vf[v as usize].retain(|&g| g != f);
            }
        }
        let moved: Vec<u32> = std::mem::take(&mut self.vf[b as usize]);
        for f in moved {
            for x in self.faces[f as usize].iter_mut() {
                if *x == b {
                    *x = a;
                }
            }
            self.vf[a as usize].push(f);
        }
        self.vert_alive[b as usize] = false;
        true
    }

    fn try_flip(&mut self, a: u32, b: u32) -> bool {
        let fs = self.edge_faces(a, b);
        if fs.len() != 2 {
            return false;
        }
        let (f1, f2) = (fs[0], fs[1]);
        let orient = |face: [u32; 3]| -> Option<u32> {
            (0..3).find_map(|k| (face[k] == a && face[(k + 1) % 3] == b).then(|| face[(k + 2) % 3]))
        };
        let (c, d, f1, f2) = match (orient(self.faces[f1 as usize]), orient(self.faces[f2 as usize])) {
            (Some(c), None) => (c, self.faces[f2 as usize].iter().copied().find(|&x| x != a && x != b).unwrap(), f1, f2),
            (None, Some(c)) => (c, self.faces[f1 as usize].iter().copied().find(|&x| x != a && x != b).unwrap(), f2, f1),
            _ => return false,
        };
        if c == d || self.edge_faces(c, d).len() > 0 || self.neighbors(c).contains(&d) {
            return false;
        }
        let target = |v: u32, s: &Work| if s.is_boundary_vertex(v) { 4 } else { 6 };
        let val = |v: u32| self.neighbors(v).len() as i64;
        let (va, vb, vc, vd) = (val(a), val(b), val(c), val(d));
        if va <= 3 || vb <= 3 {
            return false;
        }
        let dev = |x: i64, t: i64| (x - t).abs();
        let (ta, tb, tc, td) = (target(a, self), target(b, self), target(c, self), target(d, self));
        let before = dev(va, ta) + dev(vb, tb) + dev(vc, tc) + dev(vd, td);
        let after = dev(va - 1, ta) + dev(vb - 1, tb) + dev(vc + 1, tc) + dev(vd + 1, td);
        if after >= before {
            return false;
        }
        // f1 = a→b→c, f2 = b→a→d; new faces a→d→c and d→b→c.
        let n_old = self.normal(&self.faces[f1 as usize]) + self.normal(&self.faces[f2 as usize]);
        let (g1, g2) = ([a, d, c], [d, b, c]);
        let (n1, n2) = (self.normal(&g1), self.normal(&g2));
        if n1.dot(&n_old) <= 0.0 || n2.dot(&n_old) <= 0.0 || n1.dot(&n2) <= 0.0 {
            return false;
        }
        self.faces[f1 as usize] = g1;
        self.faces[f2 as usize] = g2;
        self.vf[b as usize].retain(|&g| g != f1);
        self.vf[a as usize].retain(|&g| g != f2);
        self.vf[d as usize].push(f1);
        self.vf[c as usize].push(f2);
        true
    }

    fn into_mesh(self) -> Result<Mesh> {
        let faces: Vec<[u32; 3]> = self
            .faces
            .iter()
            .zip(&self.face_alive)
            .filter(|(_, a)| **a)
            .map(|(f, _)| *f)
            .collect();
        Mesh::new(self.pos, faces)?.compacted()
    }
}

fn check_manifold(mesh: &Mesh) -> Result<()> {
    let mut count: HashMap<[u32; 2], usize> = HashMap::new();
    let mut directed: HashSet<(u32, u32)> = HashSet::new();
    for f in mesh.faces() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            *count.entry(sorted_edge(a, b)).or_default() += 1;
            if !directed.insert((a, b)) {
                return Err(Error::NonManifold(format!("edge {a}-{b} is used twice in the same direction")));
            }
        }
    }
    if let Some((e, n)) = count.iter().find(|(_, n)| **n > 2) {
        return Err(Error::NonManifold(format!("edge {}-{} has {n} faces", e[0], e[1])));
    }
    Ok(())
}

/// Isotropic remeshing toward edge length `target`: per iteration, split
/// edges longer than 4/3·target, collapse edges shorter than 4/5·target,
/// flip edges to even out valences, then relax vertices tangentially and
/// project them back onto the input surface. Boundary vertices stay put.
pub fn isotropic_remesh(mesh: &Mesh, target: f64, iterations: usize) -> Result<Mesh> {
    if !(target > 0.0) {
        return Err(Error::Invalid("remesh target edge length must be positive".into()));
    }
    check_manifold(mesh)?;
    let reference = mesh.clone();
    let bvh = Bvh::build(&reference);
    let (hi, lo) = (4.0 / 3.0 * target, 4.0 / 5.0 * target);
    let mut w = Work::new(mesh);
    for _ in 0..iterations {
        for _ in 0..8 {
            let long: Vec<[u32; 2]> = w.edges().into_iter().filter(|e| w.len(e[0], e[1]) > hi).collect();
            if long.is_empty() {
                break;
            }
            for [a, b] in long {
                w.split(a, b);
            }
        }
        let short: Vec<[u32; 2]> = w.edges().into_iter().filter(|e| w.len(e[0], e[1]) < lo).collect();
        for [a, b] in short {
            if w.vert_alive[a as usize] && w.vert_alive[b as usize] && w.len(a, b) < lo {
                w.try_collapse(a, b, hi);
            }
        }
        for [a, b] in w.edges() {
            w.try_flip(a, b);
        }
        let boundary: Vec<bool> = (0..w.pos.len() as u32)
            .map(|v| w.vert_alive[v as usize] && w.is_boundary_vertex(v))
            .collect();
        let mut next = w.pos.clone();
        for v in 0..w.pos.len() as u32 {
            if !w.vert_alive[v as usize] || boundary[v as usize] || w.vf[v as usize].is_empty() {
                continue;
            }
            let nb = w.neighbors(v);
            let q = nb.iter().map(|&n| w.pos[n as usize]).sum::<Vec3>() / nb.len() as f64;
            let p = w.pos[v as usize];
            let n = w.vertex_normal(v);
            let moved = q + n * n.dot(&(p - q));
            next[v as usize] = bvh.closest_point(&reference, &moved).1;
        }
        w.pos = next;
    }
    w.into_mesh()
}
