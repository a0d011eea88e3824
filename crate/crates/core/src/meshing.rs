//! Marching-cubes isosurface extraction and chamfer distances.
//!
//! The 256-entry triangle table is built once from the cube's face
//! structure: on every face the crossing edges are paired into segments
//! (on a face with four crossings, each inside corner is cut off on its
//! own), segments are chained into loops around the inside region, and each
//! loop is fanned into triangles. Pairing depends only on the four values of
//! the face, so neighboring cells agree and closed surfaces come out
//! watertight.

use std::collections::HashMap;
use std::io::Write;
use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{contract, domain, Result};
use crate::fields::FieldBundle;
use crate::geometry::Aabb;
use crate::volume::VolumeStack;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        0.5 * norm(cross(u, v))
    }

    /// Every undirected edge is used by exactly two triangles, once in each
    /// direction.
    pub fn is_watertight(&self) -> bool {
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        !self.triangles.is_empty()
            && directed
                .iter()
                .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// `v x y z` lines, then 1-based `f i j k` lines.
    pub fn write_obj<W: Write>(&self, w: &mut W) -> Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }
}

fn cross(u: [f64; 3], v: [f64; 3]) -> [f64; 3] {
    [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Corner `i` of the unit cube sits at `(i & 1, (i >> 1) & 1, (i >> 2) & 1)`.
fn corner(i: usize) -> [f64; 3] {
    [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]
}

/// The 12 cube edges as corner pairs, grouped by axis.
pub const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

fn edge_index(a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == key).expect("cube edge")
}

/// Triangles (as cube-edge triples) for each inside-corner mask.
pub fn case_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(build_case))
}

fn build_case(mask: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| mask >> c & 1 == 1;
    let mid = |e: usize| {
        let (a, b) = EDGES[e];
        let (pa, pb) = (corner(a), corner(b));
        [
            0.5 * (pa[0] + pb[0]),
            0.5 * (pa[1] + pb[1]),
            0.5 * (pa[2] + pb[2]),
        ]
    };
    // next[e] = edge that follows e along its loop
    let mut next = [usize::MAX; 12];
    for axis in 0..3 {
        for side in 0..2 {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let base = side << axis;
            let cyc = [base, base | 1 << u, base | 1 << u | 1 << v, base | 1 << v];
            let mut normal = [0.0; 3];
            normal[axis] = if side == 1 { 1.0 } else { -1.0 };
            let crossing: Vec<usize> = (0..4)
                .filter(|&k| inside(cyc[k]) != inside(cyc[(k + 1) % 4]))
                .collect();
            // (edge a, edge b, inside reference point)
            let mut segments = Vec::new();
            match crossing.len() {
                0 => {}
                2 => {
                    let ins: Vec<[f64; 3]> = cyc
                        .iter()
                        .filter(|&&c| inside(c))
                        .map(|&c| corner(c))
                        .collect();
                    let m = ins.iter().fold([0.0; 3], |acc, p| {
                        [acc[0] + p[0], acc[1] + p[1], acc[2] + p[2]]
                    });
                    let m = m.map(|x| x / ins.len() as f64);
                    let e = |k: usize| edge_index(cyc[k], cyc[(k + 1) % 4]);
                    segments.push((e(crossing[0]), e(crossing[1]), m));
                }
                4 => {
                    for k in 0..4 {
                        if inside(cyc[k]) {
                            let before = edge_index(cyc[(k + 3) % 4], cyc[k]);
                            let after = edge_index(cyc[k], cyc[(k + 1) % 4]);
                            segments.push((before, after, corner(cyc[k])));
                        }
                    }
                }
                _ => unreachable!("a closed square has an even number of sign changes"),
            }
            for (a, b, m) in segments {
                let (pa, pb) = (mid(a), mid(b));
                let dir = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
                let left = cross(normal, dir);
                let side_of_inside =
                    left[0] * (m[0] - pa[0]) + left[1] * (m[1] - pa[1]) + left[2] * (m[2] - pa[2]);
                let (from, to) = if side_of_inside > 0.0 { (a, b) } else { (b, a) };
                debug_assert_eq!(next[from], usize::MAX);
                next[from] = to;
            }
        }
    }
    let mut used = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || used[start] {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = start;
        while !used[e] {
            used[e] = true;
            lp.push(e as u8);
            e = next[e];
        }
        for k in 1..lp.len() - 1 {
            // Reversed fan: loops run clockwise seen from outside the
            // inside region, so this order puts normals toward positive.
            tris.push([lp[0], lp[k + 1], lp[k]]);
        }
    }
    tris
}

/// Marching cubes over `resolution^3` lattice points spanning `bounds`.
/// Corners with `value < iso` are inside; triangle normals (right-hand
/// rule) point toward larger values.
pub fn extract_mesh_fn<F>(
    bounds: &Aabb,
    resolution: usize,
    iso: f64,
    field: F,
) -> Result<TriangleMesh>
where
    F: Fn(&[f64; 3]) -> f64 + Sync,
{
    if resolution < 2 {
        return Err(domain(format!(
            "marching cubes needs resolution >= 2, got {resolution}"
        )));
    }
    let r = resolution;
    let step: [f64; 3] = std::array::from_fn(|k| (bounds.max[k] - bounds.min[k]) / (r - 1) as f64);
    let point = |i: usize, j: usize, k: usize| {
        [
            bounds.min[0] + i as f64 * step[0],
            bounds.min[1] + j as f64 * step[1],
            bounds.min[2] + k as f64 * step[2],
        ]
    };
    let id = |i: usize, j: usize, k: usize| (i * r + j) * r + k;
    let values: Vec<f64> = (0..r * r * r)
        .into_par_iter()
        .map(|n| field(&point(n / (r * r), n / r % r, n % r)))
        .collect();
    let table = case_table();
    let mut mesh = TriangleMesh::default();
    let mut cache: HashMap<(usize, usize), u32> = HashMap::new();
    for i in 0..r - 1 {
        for j in 0..r - 1 {
            for k in 0..r - 1 {
                let lattice: [(usize, usize, usize); 8] =
                    std::array::from_fn(|c| (i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1)));
                let val = lattice.map(|(a, b, c)| values[id(a, b, c)]);
                let mask = (0..8).filter(|&c| val[c] < iso).fold(0, |m, c| m | 1 << c);
                for tri in &table[mask] {
                    let vs = tri.map(|e| {
                        let (ca, cb) = EDGES[e as usize];
                        let (la, lb) = (lattice[ca], lattice[cb]);
                        let key = (id(la.0, la.1, la.2), id(lb.0, lb.1, lb.2));
                        *cache.entry(key).or_insert_with(|| {
                            let t = (iso - val[ca]) / (val[cb] - val[ca]);
                            let (pa, pb) = (point(la.0, la.1, la.2), point(lb.0, lb.1, lb.2));
                            mesh.vertices
                                .push(std::array::from_fn(|d| pa[d] + t * (pb[d] - pa[d])));
                            (mesh.vertices.len() - 1) as u32
                        })
                    });
                    if mesh.triangle_area(&vs) > 1e-12 {
                        mesh.triangles.push(vs);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// Zero level set of a learned SDF over the volume's bounds.
pub fn extract_mesh(
    volume: &VolumeStack,
    bundle: &FieldBundle,
    resolution: usize,
    iso: f64,
) -> Result<TriangleMesh> {
    let bounds = volume.bounds();
    let mesh = extract_mesh_fn(&bounds, resolution, iso, |p| {
        bundle.sdf_at(volume, p).unwrap_or(f64::NAN)
    })?;
    if mesh.vertices.iter().flatten().any(|v| !v.is_finite()) {
        return Err(contract("SDF evaluation failed while meshing"));
    }
    Ok(mesh)
}

/// Mean nearest-neighbor distance from each point of `from` to `to`.
fn mean_nn(from: &[[f64; 3]], to_sorted: &[[f64; 3]]) -> f64 {
    let total: f64 = from
        .par_iter()
        .map(|p| {
            let start = to_sorted.partition_point(|q| q[0] < p[0]);
            let mut best = f64::INFINITY;
            for q in to_sorted[start..].iter() {
                if (q[0] - p[0]).powi(2) >= best {
                    break;
                }
                best = best.min(dist2(p, q));
            }
            for q in to_sorted[..start].iter().rev() {
                if (q[0] - p[0]).powi(2) >= best {
                    break;
                }
                best = best.min(dist2(p, q));
            }
            best.sqrt()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    total / from.len() as f64
}

/// `(mean a -> b, mean b -> a)` nearest-neighbor distances.
pub fn chamfer_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(contract("chamfer needs two non-empty point sets"));
    }
    let sorted = |s: &[[f64; 3]]| {
        let mut v = s.to_vec();
        v.sort_by(|p, q| p[0].total_cmp(&q[0]));
        v
    };
    Ok((mean_nn(a, &sorted(b)), mean_nn(b, &sorted(a))))
}

/// Area-uniform samples on the mesh surface (its vertices if it has no area).
pub fn sample_surface<R: Rng + ?Sized>(
    mesh: &TriangleMesh,
    count: usize,
    rng: &mut R,
) -> Vec<[f64; 3]> {
    let areas: Vec<f64> = mesh
        .triangles
        .iter()
        .map(|t| mesh.triangle_area(t))
        .collect();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) {
        return mesh.vertices.clone();
    }
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a;
        cdf.push(acc);
    }
    (0..count)
        .map(|_| {
            let x = rng.gen::<f64>() * total;
            let ti = cdf.partition_point(|&c| c < x).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangles[ti].map(|i| mesh.vertices[i as usize]);
            let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
            if u + v > 1.0 {
                (u, v) = (1.0 - u, 1.0 - v);
            }
            std::array::from_fn(|d| a[d] + u * (b[d] - a[d]) + v * (c[d] - a[d]))
        })
        .collect()
}

/// Chamfer between `count` area samples of the mesh and a reference set.
pub fn chamfer<R: Rng + ?Sized>(
    mesh: &TriangleMesh,
    reference: &[[f64; 3]],
    count: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if mesh.vertices.is_empty() {
        return Err(contract("chamfer of an empty mesh"));
    }
    chamfer_points(&sample_surface(mesh, count, rng), reference)
}
