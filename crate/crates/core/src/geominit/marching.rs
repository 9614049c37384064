use std::collections::HashMap;

use super::volume::SdfGrid;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mesh::Mesh;

/// Edge-crossing parameter is kept this far from either lattice point so
/// that no two output vertices coincide.
const T_CLAMP: f64 = 1e-3;

/// Six tetrahedra sharing the cube diagonal 0–7 (corner bits x=1, y=2,
/// z=4). Neighbouring cubes split their shared faces identically.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Extracts the `iso` level set by marching tetrahedra. Values below `iso`
/// are inside; faces are wound outward.
pub fn marching_tetrahedra(sdf: &SdfGrid, iso: f64) -> Result<Mesh> {
    let lat = sdf.lattice;
    let vals: Vec<f64> = sdf.values().iter().map(|v| v - iso).collect();
    let any_in = vals.iter().any(|v| *v < 0.0);
    let any_out = vals.iter().any(|v| *v >= 0.0);
    if !any_in || !any_out {
        return Err(Error::NoSignChange);
    }
    let [nx, ny, nz] = lat.dims;
    let mut positions: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    let mut vertex_on = |a: usize, b: usize, pa: &Vec3, pb: &Vec3, va: f64, vb: f64, positions: &mut Vec<Vec3>| -> u32 {
        let key = if a < b { (a, b) } else { (b, a) };
        *edge_vertex.entry(key).or_insert_with(|| {
            let t = (va / (va - vb)).clamp(T_CLAMP, 1.0 - T_CLAMP);
            positions.push(pa + (pb - pa) * t);
            (positions.len() - 1) as u32
        })
    };
    for k in 0..nz.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx.saturating_sub(1) {
                let corner = |c: usize| (i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                let ids: [usize; 8] = std::array::from_fn(|c| {
                    let (a, b, d) = corner(c);
                    lat.index(a, b, d)
                });
                let v: [f64; 8] = ids.map(|id| vals[id]);
                if v.iter().all(|x| *x < 0.0) || v.iter().all(|x| *x >= 0.0) {
                    continue;
                }
                let p: [Vec3; 8] = std::array::from_fn(|c| {
                    let (a, b, d) = corner(c);
                    lat.center(a, b, d)
                });
                for tet in &TETS {
                    let (ins, outs): (Vec<usize>, Vec<usize>) = tet.iter().partition(|&&c| v[c] < 0.0);
                    if ins.is_empty() || outs.is_empty() {
                        continue;
                    }
                    let mut cut = |a: usize, b: usize, positions: &mut Vec<Vec3>| {
                        vertex_on(ids[a], ids[b], &p[a], &p[b], v[a], v[b], positions)
                    };
                    let mut tris: Vec<[u32; 3]> = Vec::new();
                    match ins.len() {
                        1 => tris.push([
                            cut(ins[0], outs[0], &mut positions),
                            cut(ins[0], outs[1], &mut positions),
                            cut(ins[0], outs[2], &mut positions),
                        ]),
                        3 => tris.push([
                            cut(ins[0], outs[0], &mut positions),
                            cut(ins[1], outs[0], &mut positions),
                            cut(ins[2], outs[0], &mut positions),
                        ]),
                        _ => {
                            let q = [
                                cut(ins[0], outs[0], &mut positions),
                                cut(ins[0], outs[1], &mut positions),
                                cut(ins[1], outs[1], &mut positions),
                                cut(ins[1], outs[0], &mut positions),
                            ];
                            tris.push([q[0], q[1], q[2]]);
                            tris.push([q[0], q[2], q[3]]);
                        }
                    }
                    let cin = ins.iter().map(|&c| p[c]).sum::<Vec3>() / ins.len() as f64;
                    let cout = outs.iter().map(|&c| p[c]).sum::<Vec3>() / outs.len() as f64;
                    let outward = cout - cin;
                    for t in tris {
                        let [a, b, c] = t.map(|x| positions[x as usize]);
                        let n = (b - a).cross(&(c - a));
                        faces.push(if n.dot(&outward) < 0.0 { [t[0], t[2], t[1]] } else { t });
                    }
                }
            }
        }
    }
    Mesh::new(positions, faces)?.compacted()
}
