//! Marching cubes over a dense scalar grid.
//!
//! Uses the classic 256-configuration case table with linear edge
//! interpolation. The table is derived once at first use by contour-tracing
//! each configuration on the cube faces; the ambiguous (two diagonal corners
//! inside) faces are resolved by always separating the inside corners, which
//! keeps adjacent cells consistent and the output watertight.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::{GeometryError, Mesh};

/// Corner i sits at offset (i&1, (i>>1)&1, (i>>2)&1).
#[inline]
fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as (corner, corner) pairs, low corner first.
fn edge_list() -> [[usize; 2]; 12] {
    let mut edges = [[0usize; 2]; 12];
    let mut n = 0;
    for c in 0..8 {
        for a in 0..3 {
            if c & (1 << a) == 0 {
                edges[n] = [c, c | (1 << a)];
                n += 1;
            }
        }
    }
    debug_assert_eq!(n, 12);
    edges
}

/// Triangles (as edge-index triples) for each of the 256 corner-sign
/// configurations.
fn case_table() -> &'static [Vec<[usize; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[usize; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(build_case_table)
}

fn build_case_table() -> [Vec<[usize; 3]>; 256] {
    let edges = edge_list();
    // edge index lookup by corner pair
    let mut edge_of = HashMap::new();
    for (e, [a, b]) in edges.iter().enumerate() {
        edge_of.insert((*a, *b), e);
        edge_of.insert((*b, *a), e);
    }
    // 6 faces: axis a fixed at side s; 4 corners each
    let mut faces: Vec<[usize; 4]> = Vec::new();
    for a in 0..3 {
        for s in 0..2 {
            let mut cs: Vec<usize> = (0..8).filter(|c| (c >> a) & 1 == s).collect();
            // order the 4 corners around the face perimeter
            let (u, v) = match a {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            cs.sort_by_key(|&c| {
                let uu = (c >> u) & 1;
                let vv = (c >> v) & 1;
                // perimeter order: (0,0) (1,0) (1,1) (0,1)
                match (uu, vv) {
                    (0, 0) => 0,
                    (1, 0) => 1,
                    (1, 1) => 2,
                    _ => 3,
                }
            });
            faces.push([cs[0], cs[1], cs[2], cs[3]]);
        }
    }

    std::array::from_fn(|config| triangles_for_config(config as u8, &edges, &edge_of, &faces))
}

fn triangles_for_config(
    config: u8,
    edges: &[[usize; 2]; 12],
    edge_of: &HashMap<(usize, usize), usize>,
    faces: &[[usize; 4]],
) -> Vec<[usize; 3]> {
    let inside = |c: usize| config & (1 << c) != 0;
    let crossed: Vec<usize> = (0..12)
        .filter(|&e| inside(edges[e][0]) != inside(edges[e][1]))
        .collect();
    if crossed.is_empty() {
        return Vec::new();
    }

    // Partner map: for every crossed edge, its paired edge on each adjacent
    // face. Each crossed edge lies on exactly two faces, so it gets exactly
    // two partners, which chains the crossings into closed loops.
    let mut partners: HashMap<usize, Vec<usize>> = HashMap::new();
    for f in faces {
        // face edges in perimeter order
        let fe = [
            edge_of[&(f[0], f[1])],
            edge_of[&(f[1], f[2])],
            edge_of[&(f[2], f[3])],
            edge_of[&(f[3], f[0])],
        ];
        let fc: Vec<usize> = fe
            .iter()
            .copied()
            .filter(|e| crossed.contains(e))
            .collect();
        match fc.len() {
            0 => {}
            2 => {
                partners.entry(fc[0]).or_default().push(fc[1]);
                partners.entry(fc[1]).or_default().push(fc[0]);
            }
            4 => {
                // ambiguous face: two diagonal inside corners; separate them,
                // pairing each inside corner's adjacent crossings together
                for (i, &c) in f.iter().enumerate() {
                    if inside(c) {
                        let ea = edge_of[&(f[(i + 3) % 4], c)];
                        let eb = edge_of[&(c, f[(i + 1) % 4])];
                        partners.entry(ea).or_default().push(eb);
                        partners.entry(eb).or_default().push(ea);
                    }
                }
            }
            _ => unreachable!("a face has 0, 2, or 4 crossings"),
        }
    }

    // Midpoint geometry for orientation decisions.
    let pos = |e: usize| -> [f64; 3] {
        let a = corner_offset(edges[e][0]);
        let b = corner_offset(edges[e][1]);
        [
            0.5 * (a[0] + b[0]) as f64,
            0.5 * (a[1] + b[1]) as f64,
            0.5 * (a[2] + b[2]) as f64,
        ]
    };

    let mut triangles = Vec::new();
    let mut used: Vec<usize> = Vec::new();
    for &start in &crossed {
        if used.contains(&start) {
            continue;
        }
        // walk the loop
        let mut cycle = vec![start];
        let mut prev = start;
        let mut cur = partners[&start][0];
        while cur != start {
            cycle.push(cur);
            let p = &partners[&cur];
            let next = if p[0] == prev { p[1] } else { p[0] };
            prev = cur;
            cur = next;
        }
        used.extend(cycle.iter().copied());

        // orient: polygon normal should point from inside toward outside
        let verts: Vec<[f64; 3]> = cycle.iter().map(|&e| pos(e)).collect();
        let mut normal = [0.0f64; 3];
        for i in 0..verts.len() {
            let a = verts[i];
            let b = verts[(i + 1) % verts.len()];
            normal[0] += (a[1] - b[1]) * (a[2] + b[2]);
            normal[1] += (a[2] - b[2]) * (a[0] + b[0]);
            normal[2] += (a[0] - b[0]) * (a[1] + b[1]);
        }
        let mut outward = [0.0f64; 3];
        for &e in &cycle {
            let (a, b) = (edges[e][0], edges[e][1]);
            let (i, o) = if inside(a) { (a, b) } else { (b, a) };
            let pi = corner_offset(i);
            let po = corner_offset(o);
            for ax in 0..3 {
                outward[ax] += po[ax] as f64 - pi[ax] as f64;
            }
        }
        let d: f64 = (0..3).map(|ax| normal[ax] * outward[ax]).sum();
        let mut cycle = cycle;
        if d < 0.0 {
            cycle.reverse();
        }
        for t in 1..cycle.len() - 1 {
            triangles.push([cycle[0], cycle[t], cycle[t + 1]]);
        }
    }
    triangles
}

/// Scalar values on an `r^3` lattice, `[x][y][z]` row-major, together with the
/// model-space position of lattice point (0,0,0) and the lattice spacing.
#[derive(Debug, Clone)]
pub struct ScalarGrid {
    pub resolution: usize,
    pub values: Vec<f64>,
    pub origin: [f64; 3],
    pub spacing: f64,
}

impl ScalarGrid {
    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(i * self.resolution + j) * self.resolution + k]
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing,
            self.origin[1] + j as f64 * self.spacing,
            self.origin[2] + k as f64 * self.spacing,
        ]
    }
}

/// Extract the `iso` level set as a triangle mesh. A field with no crossings
/// yields an empty mesh.
pub fn marching_cubes(field: &ScalarGrid, iso: f64) -> Result<Mesh, GeometryError> {
    let r = field.resolution;
    if r < 2 {
        return Err(GeometryError::Invalid(
            "marching cubes needs resolution >= 2".into(),
        ));
    }
    if field.values.len() != r * r * r {
        return Err(GeometryError::Invalid(format!(
            "field length {} does not match resolution {r}^3",
            field.values.len()
        )));
    }
    let table = case_table();
    let edges = edge_list();

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    // global edge key -> vertex index; key = (lattice point of low corner, axis)
    let mut vertex_of: HashMap<(usize, usize, usize, usize), usize> = HashMap::new();

    for ci in 0..r - 1 {
        for cj in 0..r - 1 {
            for ck in 0..r - 1 {
                let corner_val = |c: usize| {
                    let o = corner_offset(c);
                    field.at(ci + o[0], cj + o[1], ck + o[2])
                };
                let mut config = 0u16;
                for c in 0..8 {
                    if corner_val(c) > iso {
                        config |= 1 << c;
                    }
                }
                let tris = &table[config as usize];
                if tris.is_empty() {
                    continue;
                }
                let mut edge_vertex = [usize::MAX; 12];
                for tri in tris {
                    for &e in tri {
                        if edge_vertex[e] != usize::MAX {
                            continue;
                        }
                        let [a, b] = edges[e];
                        let oa = corner_offset(a);
                        let ob = corner_offset(b);
                        let axis = (0..3).find(|&ax| oa[ax] != ob[ax]).unwrap();
                        let key = (ci + oa[0], cj + oa[1], ck + oa[2], axis);
                        let idx = *vertex_of.entry(key).or_insert_with(|| {
                            let fa = corner_val(a);
                            let fb = corner_val(b);
                            let t = (iso - fa) / (fb - fa);
                            let pa = field.point(ci + oa[0], cj + oa[1], ck + oa[2]);
                            let pb = field.point(ci + ob[0], cj + ob[1], ck + ob[2]);
                            vertices.push([
                                pa[0] + t * (pb[0] - pa[0]),
                                pa[1] + t * (pb[1] - pa[1]),
                                pa[2] + t * (pb[2] - pa[2]),
                            ]);
                            vertices.len() - 1
                        });
                        edge_vertex[e] = idx;
                    }
                    faces.push([edge_vertex[tri[0]], edge_vertex[tri[1]], edge_vertex[tri[2]]]);
                }
            }
        }
    }
    Ok(Mesh { vertices, faces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn sphere_grid(r: usize, radius: f64) -> ScalarGrid {
        // occupancy-style: 1 inside, 0 outside, smooth ramp via distance
        let origin = [-0.55; 3];
        let spacing = 1.1 / (r - 1) as f64;
        let mut values = Vec::with_capacity(r * r * r);
        for i in 0..r {
            for j in 0..r {
                for k in 0..r {
                    let p = [
                        origin[0] + i as f64 * spacing,
                        origin[1] + j as f64 * spacing,
                        origin[2] + k as f64 * spacing,
                    ];
                    let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                    // logistic in distance so that iso 0.5 sits exactly at radius
                    values.push(1.0 / (1.0 + ((d - radius) / 0.02).exp()));
                }
            }
        }
        ScalarGrid {
            resolution: r,
            values,
            origin,
            spacing,
        }
    }

    #[test]
    fn sphere_vertices_near_radius() {
        let g = sphere_grid(64, 0.4);
        let m = marching_cubes(&g, 0.5).unwrap();
        assert!(!m.is_empty());
        let tol = 2.0 * g.spacing * 3f64.sqrt();
        for v in &m.vertices {
            let d = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((d - 0.4).abs() < tol, "vertex at distance {d}");
        }
    }

    #[test]
    fn all_positive_field_empty() {
        let g = ScalarGrid {
            resolution: 8,
            values: vec![1.0; 512],
            origin: [0.0; 3],
            spacing: 0.1,
        };
        let m = marching_cubes(&g, 0.5).unwrap();
        assert!(m.vertices.is_empty() && m.faces.is_empty());
    }

    #[test]
    fn plane_field_exact() {
        // f(x) = x - 0.5: iso 0 surface at x = 0.5, linear interpolation exact
        let r = 9;
        let origin = [0.0; 3];
        let spacing = 1.0 / (r - 1) as f64;
        let mut values = Vec::new();
        for i in 0..r {
            for _j in 0..r {
                for _k in 0..r {
                    values.push(origin[0] + i as f64 * spacing - 0.5);
                }
            }
        }
        let g = ScalarGrid {
            resolution: r,
            values,
            origin,
            spacing,
        };
        let m = marching_cubes(&g, 0.0).unwrap();
        assert!(!m.is_empty());
        for v in &m.vertices {
            assert!((v[0] - 0.5).abs() < 1e-12, "x = {}", v[0]);
        }
    }

    #[test]
    fn vertex_field_values_equal_iso() {
        // trilinear interpolation of the field at every output vertex == iso
        let g = sphere_grid(24, 0.35);
        let iso = 0.5;
        let m = marching_cubes(&g, iso).unwrap();
        assert!(!m.is_empty());
        for v in &m.vertices {
            let val = trilinear(&g, *v);
            assert!((val - iso).abs() < 1e-5, "field at vertex = {val}");
        }
    }

    #[test]
    fn closed_surface_edge_parity() {
        // For a closed iso-surface, every undirected edge is used by exactly
        // two triangles, with opposite orientations.
        let g = sphere_grid(20, 0.3);
        let m = marching_cubes(&g, 0.5).unwrap();
        let mut count: HashMap<(usize, usize), i64> = HashMap::new();
        for f in &m.faces {
            for t in 0..3 {
                let a = f[t];
                let b = f[(t + 1) % 3];
                // signed count: +1 for (min,max) order, -1 otherwise
                let key = (a.min(b), a.max(b));
                *count.entry(key).or_insert(0) += if a < b { 1 } else { -1 };
            }
        }
        for (edge, c) in &count {
            assert_eq!(*c, 0, "edge {edge:?} not used by two opposed triangles");
        }
    }

    #[test]
    fn random_fields_watertight() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for _ in 0..20 {
            let r = 6;
            // random field, forced negative on the boundary so the surface closes
            let mut values = vec![0.0; r * r * r];
            for i in 0..r {
                for j in 0..r {
                    for k in 0..r {
                        let boundary = i == 0 || j == 0 || k == 0 || i == r - 1 || j == r - 1 || k == r - 1;
                        values[(i * r + j) * r + k] = if boundary {
                            -1.0
                        } else {
                            rng.gen_range(-1.0..1.0)
                        };
                    }
                }
            }
            let g = ScalarGrid {
                resolution: r,
                values,
                origin: [0.0; 3],
                spacing: 1.0,
            };
            let m = marching_cubes(&g, 0.0).unwrap();
            let mut count: HashMap<(usize, usize), i64> = HashMap::new();
            for f in &m.faces {
                for t in 0..3 {
                    let a = f[t];
                    let b = f[(t + 1) % 3];
                    let key = (a.min(b), a.max(b));
                    *count.entry(key).or_insert(0) += if a < b { 1 } else { -1 };
                }
            }
            for (_, c) in &count {
                assert_eq!(*c, 0, "random field surface not watertight");
            }
        }
    }

    #[test]
    fn sphere_normals_point_outward() {
        let g = sphere_grid(32, 0.35);
        let m = marching_cubes(&g, 0.5).unwrap();
        let mut out = 0usize;
        for (f, _) in m.faces.iter().enumerate() {
            let [a, b, c] = m.faces[f];
            let centroid = [
                (m.vertices[a][0] + m.vertices[b][0] + m.vertices[c][0]) / 3.0,
                (m.vertices[a][1] + m.vertices[b][1] + m.vertices[c][1]) / 3.0,
                (m.vertices[a][2] + m.vertices[b][2] + m.vertices[c][2]) / 3.0,
            ];
            if let Some(n) = m.face_normal(f) {
                let d = n[0] * centroid[0] + n[1] * centroid[1] + n[2] * centroid[2];
                if d > 0.0 {
                    out += 1;
                }
            }
        }
        assert!(
            out as f64 > 0.99 * m.faces.len() as f64,
            "{out}/{} faces outward",
            m.faces.len()
        );
    }

    fn trilinear(g: &ScalarGrid, p: [f64; 3]) -> f64 {
        let f = |a: usize| (p[a] - g.origin[a]) / g.spacing;
        let (x, y, z) = (f(0), f(1), f(2));
        let (i, j, k) = (
            (x.floor() as usize).min(g.resolution - 2),
            (y.floor() as usize).min(g.resolution - 2),
            (z.floor() as usize).min(g.resolution - 2),
        );
        let (u, v, w) = (x - i as f64, y - j as f64, z - k as f64);
        let mut acc = 0.0;
        for (di, fu) in [(0, 1.0 - u), (1, u)] {
            for (dj, fv) in [(0, 1.0 - v), (1, v)] {
                for (dk, fw) in [(0, 1.0 - w), (1, w)] {
                    acc += fu * fv * fw * g.at(i + di, j + dj, k + dk);
                }
            }
        }
        acc
    }
}
