//! Mesh and point-cloud primitives.
//!
//! Everything here is a pure function of its inputs; no shared mutable state.

mod marching;
mod meshio;
mod sample;
mod voxel;

pub use marching::{marching_cubes, ScalarGrid};
pub use meshio::{load_mesh, write_obj};
pub use sample::{
    default_k_for_resolution, sample_occupancy_points, sample_surface_points,
    sample_surface_points_with_faces,
};
pub use voxel::voxelize;

use thiserror::Error;

/// Side length of the sampling cube that normalized shapes live in.
/// A unit-diagonal bounding box fits in [-0.5, 0.5]^3; the extra 10%
/// keeps the surface away from the grid boundary.
pub const GRID_HALF_EXTENT: f64 = 0.55;

/// Default bounding-box diagonal after [`normalize_shape`].
pub const DEFAULT_TARGET_DIAG: f64 = 1.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("degenerate shape: {0}")]
    Degenerate(String),
    #[error("mesh extends outside the voxel grid cube (half extent {half_extent})")]
    OutOfBounds { half_extent: f64 },
    #[error("empty point set")]
    EmptyPointSet,
    #[error("undefined normal: spatial gradient norm {0:.3e} below threshold")]
    UndefinedNormal(f64),
    #[error("{0}")]
    Invalid(String),
}

/// Triangle mesh in unitless model coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        let mesh = Mesh { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Face indices in range, no repeated vertex index within a face,
    /// all coordinates finite.
    pub fn validate(&self) -> Result<(), GeometryError> {
        for v in &self.vertices {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(GeometryError::Invalid("non-finite vertex".into()));
            }
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&ix| ix >= self.vertices.len()) {
                return Err(GeometryError::Invalid(format!(
                    "face {i} references vertex out of range"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(GeometryError::Invalid(format!(
                    "face {i} repeats a vertex index"
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty() || self.faces.is_empty()
    }

    /// Tight axis-aligned bounding box, `(min, max)`.
    pub fn bbox(&self) -> Option<([f64; 3], [f64; 3])> {
        if self.vertices.is_empty() {
            return None;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [i, j, k] = self.faces[f];
        let a = self.vertices[i];
        let b = self.vertices[j];
        let c = self.vertices[k];
        let u = sub(b, a);
        let v = sub(c, a);
        0.5 * norm(cross(u, v))
    }

    /// Unit outward face normal (right-hand winding); zero-area faces give `None`.
    pub fn face_normal(&self, f: usize) -> Option<[f64; 3]> {
        let [i, j, k] = self.faces[f];
        let u = sub(self.vertices[j], self.vertices[i]);
        let v = sub(self.vertices[k], self.vertices[i]);
        let n = cross(u, v);
        let len = norm(n);
        if len < 1e-300 {
            None
        } else {
            Some([n[0] / len, n[1] / len, n[2] / len])
        }
    }
}

/// `n` oriented points sampled from a surface.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSamples {
    /// n x 3 positions.
    pub points: Vec<[f64; 3]>,
    /// n x 3 unit normals, when available.
    pub normals: Option<Vec<[f64; 3]>>,
}

impl SurfaceSamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Dense binary occupancy on an r^3 grid over the normalized cube.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: usize,
    /// Row-major `[x][y][z]`, length r^3, values 0 or 1.
    pub occupancy: Vec<u8>,
    /// Model-space coordinate of the grid corner (voxel (0,0,0) corner).
    pub origin: [f64; 3],
    /// Edge length of one voxel.
    pub voxel_size: f64,
}

impl OccupancyGrid {
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution + j) * self.resolution + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.occupancy[self.index(i, j, k)]
    }

    /// Voxel center in model coordinates.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (j as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (k as f64 + 0.5) * self.voxel_size,
        ]
    }

    /// Grid coordinates of the voxel containing `p`, clamped to the grid.
    pub fn containing_voxel(&self, p: [f64; 3]) -> [usize; 3] {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let t = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            out[a] = (t.max(0.0) as usize).min(self.resolution - 1);
        }
        out
    }

    /// Occupancy label of the voxel containing `p`.
    pub fn label_at(&self, p: [f64; 3]) -> u8 {
        let [i, j, k] = self.containing_voxel(p);
        self.get(i, j, k)
    }

    pub fn inside_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o == 1).count()
    }
}

/// K spatial query points with binary inside/outside labels.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancySamples {
    pub points: Vec<[f64; 3]>,
    pub labels: Vec<u8>,
    /// Grid resolution the labels were taken at.
    pub resolution: usize,
}

impl OccupancySamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }
}

/// Uniformly scale and translate so the tight bounding-box diagonal equals
/// `target_diag` and the box center sits at the origin.
pub fn normalize_shape(mesh: &Mesh, target_diag: f64) -> Result<Mesh, GeometryError> {
    if mesh.is_empty() {
        return Err(GeometryError::Degenerate("empty mesh".into()));
    }
    let (lo, hi) = mesh.bbox().unwrap();
    let diag = norm(sub(hi, lo));
    if diag == 0.0 {
        return Err(GeometryError::Degenerate(
            "all vertices identical (zero-extent bounding box)".into(),
        ));
    }
    let scale = target_diag / diag;
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| {
            [
                (v[0] - center[0]) * scale,
                (v[1] - center[1]) * scale,
                (v[2] - center[2]) * scale,
            ]
        })
        .collect();
    Ok(Mesh {
        vertices,
        faces: mesh.faces.clone(),
    })
}

/// Indices of all points within `radius` (closed ball) of `points[center_index]`,
/// excluding the center index itself. Ascending index order.
pub fn ball_query(points: &[[f64; 3]], center_index: usize, radius: f64) -> Vec<usize> {
    let c = points[center_index];
    let r2 = radius * radius;
    points
        .iter()
        .enumerate()
        .filter(|(i, p)| *i != center_index && dist2(**p, c) <= r2)
        .map(|(i, _)| i)
        .collect()
}

/// Index and distance of the point nearest to `query`; ties broken by
/// smallest index.
pub fn nearest_neighbor(query: [f64; 3], points: &[[f64; 3]]) -> Result<(usize, f64), GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyPointSet);
    }
    let mut best = 0usize;
    let mut best_d2 = dist2(query, points[0]);
    for (i, p) in points.iter().enumerate().skip(1) {
        let d2 = dist2(query, *p);
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    Ok((best, best_d2.sqrt()))
}

/// Nearest index in `points` for every query, brute force.
pub fn nearest_indices(queries: &[[f64; 3]], points: &[[f64; 3]]) -> Vec<usize> {
    queries
        .iter()
        .map(|q| nearest_neighbor(*q, points).expect("non-empty point set").0)
        .collect()
}

#[inline]
pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

#[inline]
pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    dist2(a, b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cube() -> Mesh {
        // 8 vertices, 12 triangles, outward winding.
        crate::synth::axis_box([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
    }

    #[test]
    fn normalize_unit_cube_diag() {
        let m = unit_cube();
        let n = normalize_shape(&m, 1.0).unwrap();
        let (lo, hi) = n.bbox().unwrap();
        let diag = norm(sub(hi, lo));
        assert!((diag - 1.0).abs() < 1e-12);
        // scale is 1/sqrt(3) for the unit cube
        let extent = hi[0] - lo[0];
        assert!((extent - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        // centered
        assert!(lo[0] + hi[0] < 1e-12);
    }

    #[test]
    fn normalize_idempotent() {
        let m = unit_cube();
        let n1 = normalize_shape(&m, 1.0).unwrap();
        let n2 = normalize_shape(&n1, 1.0).unwrap();
        for (a, b) in n1.vertices.iter().zip(&n2.vertices) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_random_mesh_diag_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let vertices: Vec<[f64; 3]> = (0..30)
                .map(|_| {
                    [
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    ]
                })
                .collect();
            let faces = (0..10).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
            let m = Mesh { vertices, faces };
            let n = normalize_shape(&m, 1.0).unwrap();
            let (lo, hi) = n.bbox().unwrap();
            assert!((norm(sub(hi, lo)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_degenerate_mesh_errors() {
        let m = Mesh {
            vertices: vec![[1.0, 1.0, 1.0]; 4],
            faces: vec![[0, 1, 2]],
        };
        assert!(matches!(
            normalize_shape(&m, 1.0),
            Err(GeometryError::Degenerate(_))
        ));
    }

    #[test]
    fn ball_query_colinear_closed_ball() {
        // exactly representable spacing 1/16; radius 1/8 reaches two points
        // either side, the boundary point at exactly the radius included
        let points: Vec<[f64; 3]> = (0..9).map(|i| [i as f64 / 16.0, 0.0, 0.0]).collect();
        let got = ball_query(&points, 4, 0.125);
        assert_eq!(got, vec![2, 3, 5, 6]);
    }

    #[test]
    fn ball_query_isolated_point_empty() {
        let points = vec![[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        assert!(ball_query(&points, 0, 0.1).is_empty());
    }

    #[test]
    fn ball_query_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.gen_range(1..40);
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
                .collect();
            let c = rng.gen_range(0..n);
            let r = rng.gen_range(0.01..0.8);
            let got = ball_query(&pts, c, r);
            let want: Vec<usize> = (0..n)
                .filter(|&i| i != c && dist(pts[i], pts[c]) <= r)
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn nearest_neighbor_exact_and_ties() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let (i, d) = nearest_neighbor([1.0, 0.0, 0.0], &pts).unwrap();
        assert_eq!(i, 1); // tie between 1 and 2 -> smallest index
        assert_eq!(d, 0.0);
        let (i, _) = nearest_neighbor([0.5, 0.0, 0.0], &pts).unwrap();
        assert_eq!(i, 0); // equidistant 0 and 1 -> smallest index
    }

    #[test]
    fn nearest_neighbor_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let n = rng.gen_range(1..50);
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
                .collect();
            let q = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let (i, d) = nearest_neighbor(q, &pts).unwrap();
            let mut bi = 0;
            let mut bd = f64::INFINITY;
            for (j, p) in pts.iter().enumerate() {
                let dj = dist(q, *p);
                if dj < bd {
                    bd = dj;
                    bi = j;
                }
            }
            assert_eq!(i, bi);
            assert_eq!(d, bd);
        }
    }

    #[test]
    fn nearest_neighbor_empty_errors() {
        assert!(nearest_neighbor([0.0; 3], &[]).is_err());
    }
}
