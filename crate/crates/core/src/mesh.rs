//! Marching-cubes surface extraction from a density field.
//!
//! The 256-case triangle table is generated at first use by tracing, for each
//! corner configuration, the iso-segments on the six cube faces into closed
//! loops. Ambiguous faces separate the above-threshold corners, a rule that two
//! cells sharing a face always agree on, so the surface is crack-free.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::binio::write_atomic;
use crate::error::{Error, Result};
use crate::field::{softplus, Assignment, SceneField};
use crate::geometry::{Aabb, Vec3};
use crate::layout::SceneLayout;

/// Slightly above the density of an untrained grid (`softplus(0)`).
pub fn default_threshold() -> f64 {
    softplus(0.0) + 1.0
}

pub trait DensitySource: Sync {
    fn density(&self, p: &Vec3) -> f64;
    fn color(&self, _p: &Vec3) -> Option<[f64; 3]> {
        None
    }
}

/// A scene field restricted to its layout: density is zero outside every
/// instance and wherever the owning grid has not been spawned.
pub struct FieldDensity<'a> {
    pub field: &'a SceneField,
    pub layout: &'a SceneLayout,
}

impl FieldDensity<'_> {
    fn query(&self, p: &Vec3) -> Option<(f64, [f64; 3])> {
        self.layout.owner_at(p)?;
        match self.field.assign_point(self.layout, p) {
            Assignment::SpawnRequired(_) => None,
            a => self.field.query(p, a).ok(),
        }
    }
}

impl DensitySource for FieldDensity<'_> {
    fn density(&self, p: &Vec3) -> f64 {
        self.query(p).map_or(0.0, |q| q.0)
    }

    fn color(&self, p: &Vec3) -> Option<[f64; 3]> {
        self.query(p).map(|q| q.1)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for (i, v) in self.vertices.iter().enumerate() {
            match &self.colors {
                Some(c) => {
                    let c = c[i];
                    writeln!(s, "v {} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2]).unwrap();
                }
                None => writeln!(s, "v {} {} {}", v[0], v[1], v[2]).unwrap(),
            }
        }
        for t in &self.triangles {
            writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
        }
        s
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_obj().as_bytes())
    }
}

fn corner_pos(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as corner pairs; edge `4a + k` runs along axis `a`.
fn cube_edges() -> [(usize, usize); 12] {
    let mut out = [(0, 0); 12];
    for a in 0..3 {
        let (u, v) = ((a + 1) % 3, (a + 2) % 3);
        for k in 0..4 {
            let base = ((k & 1) << u) | (((k >> 1) & 1) << v);
            out[4 * a + k] = (base, base | (1 << a));
        }
    }
    out
}

fn edge_between(edges: &[(usize, usize); 12], a: usize, b: usize) -> usize {
    edges
        .iter()
        .position(|&(p, q)| (p, q) == (a, b) || (p, q) == (b, a))
        .expect("corners are adjacent")
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Triangles (as edge triples) for one corner configuration. Triangles are
/// wound so that their right-hand normal points toward lower density.
fn build_case(case: usize, edges: &[(usize, usize); 12]) -> Vec<[u8; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mid = |e: usize| {
        let (p, q) = (corner_pos(edges[e].0), corner_pos(edges[e].1));
        [0, 1, 2].map(|i| 0.5 * (p[i] + q[i]) as f64)
    };
    let pos = |c: usize| corner_pos(c).map(|v| v as f64);
    let mut next = [usize::MAX; 12];
    for a in 0..3 {
        let (u, v) = ((a + 1) % 3, (a + 2) % 3);
        for side in 0..2 {
            let fixed = side << a;
            let cyc = [fixed, fixed | 1 << u, fixed | 1 << u | 1 << v, fixed | 1 << v];
            let mut normal = [0.0; 3];
            normal[a] = if side == 1 { 1.0 } else { -1.0 };
            let cut: Vec<usize> = (0..4).filter(|&k| inside(cyc[k]) != inside(cyc[(k + 1) % 4])).collect();
            let e = |k: usize| edge_between(edges, cyc[k], cyc[(k + 1) % 4]);
            let mut segments: Vec<(usize, usize, Vec<usize>)> = Vec::new();
            match cut.len() {
                0 => {}
                2 => {
                    let ins: Vec<usize> = (0..4).filter(|&k| inside(cyc[k])).map(|k| cyc[k]).collect();
                    segments.push((e(cut[0]), e(cut[1]), ins));
                }
                4 => {
                    for k in (0..4).filter(|&k| inside(cyc[k])) {
                        segments.push((e((k + 3) % 4), e(k), vec![cyc[k]]));
                    }
                }
                _ => unreachable!("a face has an even number of sign changes"),
            }
            for (p, q, ins) in segments {
                let (mp, mq) = (mid(p), mid(q));
                let centre = [0, 1, 2].map(|i| 0.5 * (mp[i] + mq[i]));
                let mut inner = [0.0; 3];
                for &c in &ins {
                    let pc = pos(c);
                    (0..3).for_each(|i| inner[i] += pc[i] / ins.len() as f64);
                }
                let w = sub(centre, inner);
                let t = cross(w, normal);
                let (from, to) = if dot(sub(mq, mp), t) >= 0.0 { (p, q) } else { (q, p) };
                debug_assert_eq!(next[from], usize::MAX);
                next[from] = to;
            }
        }
    }
    let mut tris = Vec::new();
    let mut seen = [false; 12];
    for start in 0..12 {
        if next[start] == usize::MAX || seen[start] {
            continue;
        }
        let mut ring = vec![start];
        seen[start] = true;
        let mut cur = next[start];
        while cur != start {
            seen[cur] = true;
            ring.push(cur);
            cur = next[cur];
        }
        for i in 1..ring.len() - 1 {
            tris.push([ring[0] as u8, ring[i] as u8, ring[i + 1] as u8]);
        }
    }
    tris
}

struct Tables {
    edges: [(usize, usize); 12],
    cases: Vec<Vec<[u8; 3]>>,
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let edges = cube_edges();
        let cases = (0..256).map(|c| build_case(c, &edges)).collect();
        Tables { edges, cases }
    })
}

/// Number of triangles each of the 256 cases emits.
pub fn case_triangle_counts() -> Vec<usize> {
    tables().cases.iter().map(|c| c.len()).collect()
}

struct Lattice {
    origin: Vec3,
    voxel: f64,
    n: [usize; 3],
    values: Vec<f64>,
}

impl Lattice {
    fn sample(src: &dyn DensitySource, region: &Aabb, voxel: f64) -> Result<Self> {
        if !(voxel > 0.0) || !voxel.is_finite() {
            return Err(Error::validation("voxel size must be positive"));
        }
        if !region.is_valid() {
            return Err(Error::validation("mesh region must be finite and non-empty"));
        }
        let n = [0, 1, 2].map(|a| ((region.max[a] - region.min[a]) / voxel).ceil() as usize + 1);
        if n.iter().product::<usize>() > 64 << 20 {
            return Err(Error::validation("mesh lattice too large; increase the voxel size"));
        }
        let origin = region.min_v();
        let values = (0..n[2])
            .into_par_iter()
            .flat_map_iter(|z| {
                let origin = origin;
                (0..n[1]).flat_map(move |y| {
                    (0..n[0]).map(move |x| src.density(&(origin + Vec3::new(x as f64, y as f64, z as f64) * voxel)))
                })
            })
            .collect();
        Ok(Self { origin, voxel, n, values })
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[(z * self.n[1] + y) * self.n[0] + x]
    }

    fn point(&self, p: [usize; 3]) -> Vec3 {
        self.origin + Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64) * self.voxel
    }
}

/// Lattice points with density strictly above `threshold`.
pub fn count_above(src: &dyn DensitySource, region: &Aabb, voxel: f64, threshold: f64) -> Result<usize> {
    Ok(Lattice::sample(src, region, voxel)?.values.iter().filter(|&&v| v > threshold).count())
}

/// Marching cubes over `region` at spacing `voxel`; a corner is inside when its
/// density exceeds `threshold`.
pub fn extract_mesh(src: &dyn DensitySource, region: &Aabb, voxel: f64, threshold: f64) -> Result<TriangleMesh> {
    let lat = Lattice::sample(src, region, voxel)?;
    let t = tables();
    let mut mesh = TriangleMesh::default();
    let mut index: HashMap<([usize; 3], usize), u32> = HashMap::new();
    let [nx, ny, nz] = lat.n;
    for z in 0..nz.saturating_sub(1) {
        for y in 0..ny.saturating_sub(1) {
            for x in 0..nx.saturating_sub(1) {
                let mut vals = [0.0; 8];
                let mut case = 0;
                for (c, v) in vals.iter_mut().enumerate() {
                    let p = corner_pos(c);
                    *v = lat.at(x + p[0], y + p[1], z + p[2]);
                    if *v > threshold {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                for tri in &t.cases[case] {
                    let mut ids = [0u32; 3];
                    for (k, &e) in tri.iter().enumerate() {
                        let (c0, c1) = t.edges[e as usize];
                        let (p0, p1) = (corner_pos(c0), corner_pos(c1));
                        let g0 = [x + p0[0], y + p0[1], z + p0[2]];
                        let axis = e as usize / 4;
                        let id = *index.entry((g0, axis)).or_insert_with(|| {
                            let (d0, d1) = (vals[c0], vals[c1]);
                            let s = ((threshold - d0) / (d1 - d0)).clamp(0.0, 1.0);
                            let a = lat.point(g0);
                            let b = lat.point([x + p1[0], y + p1[1], z + p1[2]]);
                            let v = a + (b - a) * s;
                            mesh.vertices.push([v.x, v.y, v.z]);
                            (mesh.vertices.len() - 1) as u32
                        });
                        ids[k] = id;
                    }
                    let [a, b, c] = ids.map(|i| mesh.vertices[i as usize]);
                    let area = 0.5 * dot(cross(sub(b, a), sub(c, a)), cross(sub(b, a), sub(c, a))).sqrt();
                    if area > 1e-12 {
                        mesh.triangles.push(ids);
                    }
                }
            }
        }
    }
    // Drop vertices only referenced by discarded degenerate triangles.
    let mut used = vec![false; mesh.vertices.len()];
    mesh.triangles.iter().flatten().for_each(|&i| used[i as usize] = true);
    if used.iter().any(|u| !u) {
        let mut remap = vec![u32::MAX; used.len()];
        let mut verts = Vec::new();
        for (i, &u) in used.iter().enumerate() {
            if u {
                remap[i] = verts.len() as u32;
                verts.push(mesh.vertices[i]);
            }
        }
        mesh.vertices = verts;
        mesh.triangles.iter_mut().for_each(|t| *t = t.map(|i| remap[i as usize]));
    }
    let colors: Vec<Option<[f64; 3]>> = mesh.vertices.par_iter().map(|v| src.color(&Vec3::from(*v))).collect();
    if !colors.is_empty() && colors.iter().all(Option::is_some) {
        mesh.colors = Some(colors.into_iter().map(Option::unwrap).collect());
    }
    Ok(mesh)
}
