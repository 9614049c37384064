//! Median-split bounding volume hierarchy over mesh faces.

use super::{HitRecord, Mesh};
use crate::math::{Aabb, Ray, Vec3};

const LEAF_SIZE: usize = 4;
/// Face boxes are padded by this fraction of the mesh diagonal so grazing
/// rays are never culled by rounding in the slab test.
const BOX_PAD_REL: f64 = 1e-9;

#[derive(Clone, Debug)]
struct Node {
    aabb: Aabb,
    /// Leaf: first index into `order`. Interior: index of the left child
    /// (right child is `start + 1`).
    start: u32,
    /// Number of faces for leaves, 0 for interior nodes.
    count: u32,
}

/// Bounding volume hierarchy. Immutable once built; rebuilt after vertex
/// updates.
#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    face_boxes: Vec<Aabb>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TraversalStats {
    pub nodes_visited: usize,
    pub leaves_visited: usize,
}

impl Bvh {
    pub fn build(mesh: &Mesh) -> Bvh {
        let pad = BOX_PAD_REL * mesh.bounds().diagonal().max(1e-300);
        let face_boxes: Vec<Aabb> = (0..mesh.face_count() as u32)
            .map(|f| Aabb::from_points(mesh.face_vertices(f).iter()).padded(pad))
            .collect();
        let centroids: Vec<Vec3> = face_boxes.iter().map(|b| b.center()).collect();
        let mut order: Vec<u32> = (0..mesh.face_count() as u32).collect();
        let mut nodes = vec![Node {
            aabb: Aabb::empty(),
            start: 0,
            count: 0,
        }];
        // (node index, range start, range end)
        let mut stack = vec![(0usize, 0usize, order.len())];
        while let Some((node, lo, hi)) = stack.pop() {
            let aabb = order[lo..hi]
                .iter()
                .fold(Aabb::empty(), |b, &f| b.union(&face_boxes[f as usize]));
            nodes[node].aabb = aabb;
            if hi - lo <= LEAF_SIZE {
                nodes[node].start = lo as u32;
                nodes[node].count = (hi - lo) as u32;
                continue;
            }
            let cbox = Aabb::from_points(order[lo..hi].iter().map(|&f| &centroids[f as usize]));
            let axis = cbox.largest_axis();
            let mid = lo + (hi - lo) / 2;
            order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
                centroids[a as usize][axis]
                    .total_cmp(&centroids[b as usize][axis])
                    .then(a.cmp(&b))
            });
            let left = nodes.len();
            nodes.push(Node {
                aabb: Aabb::empty(),
                start: 0,
                count: 0,
            });
            nodes.push(Node {
                aabb: Aabb::empty(),
                start: 0,
                count: 0,
            });
            nodes[node].start = left as u32;
            stack.push((left + 1, mid, hi));
            stack.push((left, lo, mid));
        }
        Bvh {
            nodes,
            order,
            face_boxes,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.count > 0).count()
    }

    pub fn root_bounds(&self) -> Aabb {
        self.nodes[0].aabb
    }

    /// Checks that every leaf face box lies inside its leaf's box and every
    /// child box inside its parent's.
    pub fn check_containment(&self) -> bool {
        self.nodes.iter().all(|n| {
            if n.count > 0 {
                let s = n.start as usize;
                self.order[s..s + n.count as usize]
                    .iter()
                    .all(|&f| n.aabb.contains_box(&self.face_boxes[f as usize]))
            } else {
                let l = &self.nodes[n.start as usize];
                let r = &self.nodes[n.start as usize + 1];
                n.aabb.contains_box(&l.aabb) && n.aabb.contains_box(&r.aabb)
            }
        })
    }

    /// Closest hit with `t > t_min`. Ties in `t` resolve to the lower face id.
    pub fn intersect(&self, mesh: &Mesh, ray: &Ray, t_min: f64) -> Option<HitRecord> {
        self.intersect_counting(mesh, ray, t_min, &mut TraversalStats::default())
    }

    pub fn intersect_counting(
        &self,
        mesh: &Mesh,
        ray: &Ray,
        t_min: f64,
        stats: &mut TraversalStats,
    ) -> Option<HitRecord> {
        let inv = ray.dir.map(|c| 1.0 / c);
        let mut best: Option<(f64, u32, f64, f64)> = None;
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        if self.nodes[0].aabb.hit(ray, &inv, t_min, f64::INFINITY).is_some() {
            stack.push(0);
        }
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            stats.nodes_visited += 1;
            let t_max = best.map_or(f64::INFINITY, |b| b.0);
            if node.count > 0 {
                stats.leaves_visited += 1;
                let s = node.start as usize;
                for &face in &self.order[s..s + node.count as usize] {
                    if let Some((t, b1, b2)) = mesh.intersect_face(ray, face) {
                        if t > t_min && best.map_or(true, |(bt, bf, _, _)| (t, face) < (bt, bf)) {
                            best = Some((t, face, b1, b2));
                        }
                    }
                }
                continue;
            }
            let l = node.start;
            let r = node.start + 1;
            let hl = self.nodes[l as usize].aabb.hit(ray, &inv, t_min, t_max);
            let hr = self.nodes[r as usize].aabb.hit(ray, &inv, t_min, t_max);
            match (hl, hr) {
                (Some((tl, _)), Some((tr, _))) => {
                    // Push the farther child first so the nearer one pops next.
                    if tl <= tr {
                        stack.push(r);
                        stack.push(l);
                    } else {
                        stack.push(l);
                        stack.push(r);
                    }
                }
                (Some(_), None) => stack.push(l),
                (None, Some(_)) => stack.push(r),
                (None, None) => {}
            }
        }
        best.map(|(t, face, b1, b2)| mesh.hit_record(ray, face, t, b1, b2))
    }

    /// True when any face is hit with `t` in `(t_min, t_max)`.
    pub fn occluded(&self, mesh: &Mesh, ray: &Ray, t_min: f64, t_max: f64) -> bool {
        let inv = ray.dir.map(|c| 1.0 / c);
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if node.aabb.hit(ray, &inv, t_min, t_max).is_none() {
                continue;
            }
            if node.count > 0 {
                let s = node.start as usize;
                for &face in &self.order[s..s + node.count as usize] {
                    if let Some((t, _, _)) = mesh.intersect_face(ray, face) {
                        if t > t_min && t < t_max {
                            return true;
                        }
                    }
                }
            } else {
                stack.push(node.start);
                stack.push(node.start + 1);
            }
        }
        false
    }

    /// Every hit with `t > t_min`, sorted by `(t, face)`.
    pub fn intersect_all(&self, mesh: &Mesh, ray: &Ray, t_min: f64) -> Vec<HitRecord> {
        let inv = ray.dir.map(|c| 1.0 / c);
        let mut hits = Vec::new();
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if node.aabb.hit(ray, &inv, t_min, f64::INFINITY).is_none() {
                continue;
            }
            if node.count > 0 {
                let s = node.start as usize;
                for &face in &self.order[s..s + node.count as usize] {
                    if let Some((t, b1, b2)) = mesh.intersect_face(ray, face) {
                        if t > t_min {
                            hits.push(mesh.hit_record(ray, face, t, b1, b2));
                        }
                    }
                }
            } else {
                stack.push(node.start);
                stack.push(node.start + 1);
            }
        }
        hits.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.face.cmp(&b.face)));
        hits
    }

    /// Closest surface point to `p`: `(face, point, squared distance)`.
    pub fn closest_point(&self, mesh: &Mesh, p: &Vec3) -> (u32, Vec3, f64) {
        let mut best = (u32::MAX, Vec3::zeros(), f64::INFINITY);
        let mut stack = vec![(0u32, self.nodes[0].aabb.distance_squared(p))];
        while let Some((ni, d2)) = stack.pop() {
            if d2 > best.2 {
                continue;
            }
            let node = &self.nodes[ni as usize];
            if node.count > 0 {
                let s = node.start as usize;
                for &face in &self.order[s..s + node.count as usize] {
                    let [a, b, c] = mesh.face_vertices(face);
                    let q = closest_point_on_triangle(p, &a, &b, &c);
                    let dq = (q - p).norm_squared();
                    if dq < best.2 || (dq == best.2 && face < best.0) {
                        best = (face, q, dq);
                    }
                }
                continue;
            }
            let l = node.start;
            let r = node.start + 1;
            let dl = self.nodes[l as usize].aabb.distance_squared(p);
            let dr = self.nodes[r as usize].aabb.distance_squared(p);
            if dl <= dr {
                stack.push((r, dr));
                stack.push((l, dl));
            } else {
                stack.push((l, dl));
                stack.push((r, dr));
            }
        }
        best
    }
}

/// Closest point on triangle `abc` to `p` (Voronoi-region method).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}
