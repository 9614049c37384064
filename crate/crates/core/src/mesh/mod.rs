//! Indexed triangle meshes with cached normals and edges, BVH acceleration and
//! differentiable intersection quantities.

mod bvh;
pub mod obj;

pub use bvh::{Bvh, TraversalStats};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::math::{Aabb, Ray, Vec3};

/// Relative area threshold below which a triangle counts as degenerate.
const DEGENERATE_REL: f64 = 1e-14;

/// Barycentric slack accepted by the triangle test, so rays through a shared
/// edge never fall between the two faces.
pub const BARY_SLACK: f64 = 1e-12;

/// Fallback normal for isolated vertices and degenerate blends.
pub const PLACEHOLDER_NORMAL: Vec3 = Vec3::new(0.0, 0.0, 1.0);

#[derive(Clone, Debug)]
pub struct Mesh {
    positions: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    face_normals: Vec<Vec3>,
    vertex_normals: Vec<Vec3>,
    edges: Vec<[u32; 2]>,
}

/// A ray–mesh intersection.
///
/// `bary` holds the raw barycentric weights of the face's three vertices; they
/// may undershoot zero by at most [`BARY_SLACK`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HitRecord {
    pub t: f64,
    pub face: u32,
    pub bary: [f64; 3],
    pub point: Vec3,
    /// Unit interpolated shading normal (not oriented toward the ray).
    pub normal: Vec3,
    /// True when the geometric normal faces the ray origin.
    pub entering: bool,
}

impl Mesh {
    /// Builds a mesh, dropping degenerate faces (repeated indices or zero area).
    pub fn new(positions: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = positions.len();
        if let Some(p) = positions.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {p} is not finite")));
        }
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {i} references a vertex outside 0..{n}"
                )));
            }
        }
        let kept: Vec<[u32; 3]> = faces
            .into_iter()
            .filter(|f| !is_degenerate(&positions, f))
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyGeometry(
                "every face is degenerate or the face list is empty".into(),
            ));
        }
        let mut mesh = Mesh {
            positions,
            faces: kept,
            face_normals: Vec::new(),
            vertex_normals: Vec::new(),
            edges: Vec::new(),
        };
        mesh.edges = unique_edges(&mesh.faces);
        mesh.refresh_normals();
        Ok(mesh)
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn face_normals(&self) -> &[Vec3] {
        &self.face_normals
    }

    pub fn vertex_normals(&self) -> &[Vec3] {
        &self.vertex_normals
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> &[[u32; 2]] {
        &self.edges
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Replaces vertex positions (same count) and recomputes normals.
    /// Faces are kept even if they become degenerate.
    pub fn set_positions(&mut self, positions: Vec<Vec3>) -> Result<()> {
        if positions.len() != self.positions.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} vertices, got {}",
                self.positions.len(),
                positions.len()
            )));
        }
        self.positions = positions;
        self.refresh_normals();
        Ok(())
    }

    fn refresh_normals(&mut self) {
        self.face_normals = self
            .faces
            .iter()
            .map(|f| {
                let c = face_cross(&self.positions, f);
                let len = c.norm();
                if len > 0.0 {
                    c / len
                } else {
                    PLACEHOLDER_NORMAL
                }
            })
            .collect();
        self.vertex_normals = vertex_normals(&self.positions, &self.faces, &self.face_normals);
    }

    pub fn face_vertices(&self, face: u32) -> [Vec3; 3] {
        let f = self.faces[face as usize];
        [
            self.positions[f[0] as usize],
            self.positions[f[1] as usize],
            self.positions[f[2] as usize],
        ]
    }

    pub fn face_area(&self, face: u32) -> f64 {
        0.5 * face_cross(&self.positions, &self.faces[face as usize]).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len() as u32).map(|f| self.face_area(f)).sum()
    }

    /// Signed enclosed volume via the divergence theorem (positive for
    /// outward-oriented closed meshes).
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.positions[i as usize]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(self.positions.iter())
    }

    /// Parametric self-intersection offset: `scale` × bbox diagonal.
    pub fn t_min(&self, scale: f64) -> f64 {
        scale * self.bounds().diagonal()
    }

    /// Normalized barycentric blend of the face's vertex normals, falling back
    /// to the geometric normal when the blend vanishes.
    pub fn interpolate_normal(&self, face: u32, bary: &[f64; 3]) -> Vec3 {
        let m = self.blend_normal(face, bary);
        let len = m.norm();
        if len > 1e-12 {
            m / len
        } else {
            self.face_normals[face as usize]
        }
    }

    /// Unnormalized barycentric blend of the face's vertex normals.
    pub fn blend_normal(&self, face: u32, bary: &[f64; 3]) -> Vec3 {
        let f = self.faces[face as usize];
        (0..3).fold(Vec3::zeros(), |acc, k| {
            acc + self.vertex_normals[f[k] as usize] * bary[k]
        })
    }

    /// Ray/face test without any `t` range check; returns `(t, b1, b2)`.
    pub fn intersect_face(&self, ray: &Ray, face: u32) -> Option<(f64, f64, f64)> {
        let [v0, v1, v2] = self.face_vertices(face);
        intersect_triangle(ray, &v0, &v1, &v2)
    }

    /// Builds a hit record for a known face and parametric solution.
    pub fn hit_record(&self, ray: &Ray, face: u32, t: f64, b1: f64, b2: f64) -> HitRecord {
        let bary = [1.0 - b1 - b2, b1, b2];
        let [v0, v1, v2] = self.face_vertices(face);
        let point = v0 * bary[0] + v1 * bary[1] + v2 * bary[2];
        HitRecord {
            t,
            face,
            bary,
            point,
            normal: self.interpolate_normal(face, &bary),
            entering: self.face_normals[face as usize].dot(&ray.dir) < 0.0,
        }
    }

    /// Closest hit by testing every face. Reference path for the BVH.
    pub fn intersect_brute_force(&self, ray: &Ray, t_min: f64) -> Option<HitRecord> {
        let mut best: Option<(f64, u32, f64, f64)> = None;
        for face in 0..self.faces.len() as u32 {
            if let Some((t, b1, b2)) = self.intersect_face(ray, face) {
                if t > t_min && best.map_or(true, |(bt, bf, _, _)| (t, face) < (bt, bf)) {
                    best = Some((t, face, b1, b2));
                }
            }
        }
        best.map(|(t, face, b1, b2)| self.hit_record(ray, face, t, b1, b2))
    }

    /// Faces adjacent to each unique edge (second slot `u32::MAX` for
    /// boundary edges). Edges with more than two faces keep the first two.
    pub fn edge_faces(&self) -> Vec<[u32; 2]> {
        let index: HashMap<[u32; 2], usize> = self
            .edges
            .iter()
            .enumerate()
            .map(|(i, e)| (*e, i))
            .collect();
        let mut out = vec![[u32::MAX; 2]; self.edges.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let e = sorted_edge(f[k], f[(k + 1) % 3]);
                let slot = &mut out[index[&e]];
                if slot[0] == u32::MAX {
                    slot[0] = fi as u32;
                } else if slot[1] == u32::MAX {
                    slot[1] = fi as u32;
                }
            }
        }
        out
    }

    /// Sorted one-ring neighbor lists.
    pub fn vertex_neighbors(&self) -> Vec<Vec<u32>> {
        let mut nbrs = vec![Vec::new(); self.positions.len()];
        for e in &self.edges {
            nbrs[e[0] as usize].push(e[1]);
            nbrs[e[1] as usize].push(e[0]);
        }
        for n in &mut nbrs {
            n.sort_unstable();
        }
        nbrs
    }

    /// Euler characteristic V − E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.positions.len()];
        for f in &self.faces {
            for &v in f {
                used[v as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edges.len() as i64 + self.faces.len() as i64
    }

    /// Union-find root of every vertex over the edge graph.
    fn component_roots(&self) -> Vec<usize> {
        let mut parent: Vec<usize> = (0..self.positions.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for e in &self.edges {
            let a = find(&mut parent, e[0] as usize);
            let b = find(&mut parent, e[1] as usize);
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        (0..parent.len()).map(|v| find(&mut parent, v)).collect()
    }

    /// Number of face-connected components.
    pub fn connected_components(&self) -> usize {
        let roots = self.component_roots();
        let mut used: Vec<usize> = self.faces.iter().map(|f| roots[f[0] as usize]).collect();
        used.sort_unstable();
        used.dedup();
        used.len()
    }

    /// The component with the largest surface area.
    pub fn largest_component(&self) -> Result<Mesh> {
        let roots = self.component_roots();
        let mut area: HashMap<usize, f64> = HashMap::new();
        for (i, f) in self.faces.iter().enumerate() {
            *area.entry(roots[f[0] as usize]).or_default() += self.face_area(i as u32);
        }
        let best = area
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(r, _)| *r)
            .ok_or_else(|| Error::EmptyGeometry("mesh has no faces".into()))?;
        let faces = self.faces.iter().copied().filter(|f| roots[f[0] as usize] == best).collect();
        Mesh::new(self.positions.clone(), faces)?.compacted()
    }

    /// Drops unreferenced vertices and renumbers faces.
    pub fn compacted(&self) -> Result<Mesh> {
        let mut remap = vec![u32::MAX; self.positions.len()];
        let mut positions = Vec::new();
        for f in &self.faces {
            for &v in f {
                if remap[v as usize] == u32::MAX {
                    remap[v as usize] = positions.len() as u32;
                    positions.push(self.positions[v as usize]);
                }
            }
        }
        let faces = self
            .faces
            .iter()
            .map(|f| f.map(|v| remap[v as usize]))
            .collect();
        Mesh::new(positions, faces)
    }

    /// Applies `p -> p * scale + offset` to every vertex.
    pub fn transformed(&self, scale: f64, offset: Vec3) -> Result<Mesh> {
        let positions = self.positions.iter().map(|p| p * scale + offset).collect();
        Mesh::new(positions, self.faces.clone())
    }
}

pub fn sorted_edge(a: u32, b: u32) -> [u32; 2] {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

fn face_cross(positions: &[Vec3], f: &[u32; 3]) -> Vec3 {
    let v0 = positions[f[0] as usize];
    (positions[f[1] as usize] - v0).cross(&(positions[f[2] as usize] - v0))
}

fn is_degenerate(positions: &[Vec3], f: &[u32; 3]) -> bool {
    if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
        return true;
    }
    let [a, b, c] = f.map(|i| positions[i as usize]);
    let longest = (b - a)
        .norm_squared()
        .max((c - b).norm_squared())
        .max((a - c).norm_squared());
    let cross = (b - a).cross(&(c - a)).norm();
    !(cross > DEGENERATE_REL * longest)
}

fn unique_edges(faces: &[[u32; 3]]) -> Vec<[u32; 2]> {
    let mut edges: Vec<[u32; 2]> = faces
        .iter()
        .flat_map(|f| (0..3).map(move |k| sorted_edge(f[k], f[(k + 1) % 3])))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Normalized unweighted mean of incident unit face normals.
pub fn vertex_normals(positions: &[Vec3], faces: &[[u32; 3]], face_normals: &[Vec3]) -> Vec<Vec3> {
    let mut sums = vec![Vec3::zeros(); positions.len()];
    for (f, n) in faces.iter().zip(face_normals) {
        for &v in f {
            sums[v as usize] += n;
        }
    }
    sums.into_iter()
        .map(|s| {
            let len = s.norm();
            if len > 1e-12 {
                s / len
            } else {
                PLACEHOLDER_NORMAL
            }
        })
        .collect()
}

/// Propagates gradients on vertex normals back to vertex positions through
/// the face-normal average. `grad_normals` is indexed like the vertices.
pub fn vertex_normals_backward(mesh: &Mesh, grad_normals: &[Vec3]) -> Vec<Vec3> {
    use crate::math::{cross_backward, normalize_backward};
    let positions = mesh.positions();
    let mut sums = vec![Vec3::zeros(); positions.len()];
    for (f, n) in mesh.faces().iter().zip(mesh.face_normals()) {
        for &v in f {
            sums[v as usize] += n;
        }
    }
    let grad_sums: Vec<Vec3> = sums
        .iter()
        .zip(grad_normals)
        .map(|(s, g)| {
            if s.norm() > 1e-12 && g.iter().any(|c| *c != 0.0) {
                normalize_backward(s, g)
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    let mut grad_pos = vec![Vec3::zeros(); positions.len()];
    for f in mesh.faces() {
        let gn = grad_sums[f[0] as usize] + grad_sums[f[1] as usize] + grad_sums[f[2] as usize];
        if gn.iter().all(|c| *c == 0.0) {
            continue;
        }
        let [v0, v1, v2] = f.map(|i| positions[i as usize]);
        let e1 = v1 - v0;
        let e2 = v2 - v0;
        let c = e1.cross(&e2);
        if c.norm() == 0.0 {
            continue;
        }
        let gc = normalize_backward(&c, &gn);
        let (g1, g2) = cross_backward(&e1, &e2, &gc);
        grad_pos[f[1] as usize] += g1;
        grad_pos[f[2] as usize] += g2;
        grad_pos[f[0] as usize] -= g1 + g2;
    }
    grad_pos
}

/// Möller–Trumbore test returning `(t, b1, b2)` for any `t`, accepting
/// barycentrics down to `-BARY_SLACK`.
pub fn intersect_triangle(ray: &Ray, v0: &Vec3, v1: &Vec3, v2: &Vec3) -> Option<(f64, f64, f64)> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let p = ray.dir.cross(&e2);
    let det = e1.dot(&p);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - v0;
    let b1 = s.dot(&p) * inv;
    if b1 < -BARY_SLACK || b1 > 1.0 + BARY_SLACK {
        return None;
    }
    let q = s.cross(&e1);
    let b2 = ray.dir.dot(&q) * inv;
    if b2 < -BARY_SLACK || b1 + b2 > 1.0 + BARY_SLACK {
        return None;
    }
    let t = e2.dot(&q) * inv;
    Some((t, b1, b2))
}
