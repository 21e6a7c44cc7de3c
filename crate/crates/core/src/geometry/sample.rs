//! Point sampling: area-weighted surface sampling and near-surface biased
//! occupancy sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::voxel::is_mixed;
use super::{GeometryError, Mesh, OccupancyGrid, OccupancySamples, SurfaceSamples};

/// Fraction of occupancy samples drawn near the surface; the rest are uniform
/// over the grid cube.
pub const NEAR_SURFACE_FRACTION: f64 = 0.8;

/// Sample `n` points uniformly by area over the mesh triangles.
/// Each point carries its face normal. Deterministic under `seed`.
pub fn sample_surface_points(
    mesh: &Mesh,
    n: usize,
    seed: u64,
) -> Result<SurfaceSamples, GeometryError> {
    assert!(n > 0, "n must be positive");
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0f64;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(GeometryError::Degenerate("zero-area mesh".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.gen::<f64>() * total;
        let f = match cumulative.binary_search_by(|c| c.partial_cmp(&t).unwrap()) {
            Ok(i) => i,
            Err(i) => i.min(mesh.faces.len() - 1),
        };
        let [i, j, k] = mesh.faces[f];
        let (a, b, c) = (mesh.vertices[i], mesh.vertices[j], mesh.vertices[k]);
        // uniform barycentric via the sqrt trick
        let r1 = rng.gen::<f64>().sqrt();
        let r2 = rng.gen::<f64>();
        let w0 = 1.0 - r1;
        let w1 = r1 * (1.0 - r2);
        let w2 = r1 * r2;
        points.push([
            w0 * a[0] + w1 * b[0] + w2 * c[0],
            w0 * a[1] + w1 * b[1] + w2 * c[1],
            w0 * a[2] + w1 * b[2] + w2 * c[2],
        ]);
        normals.push(mesh.face_normal(f).unwrap_or([0.0, 1.0, 0.0]));
    }
    Ok(SurfaceSamples {
        points,
        normals: Some(normals),
    })
}

/// Like [`sample_surface_points`] but also returns the face index of each
/// sample, which the synthetic generator uses to assign part labels.
pub fn sample_surface_points_with_faces(
    mesh: &Mesh,
    n: usize,
    seed: u64,
) -> Result<(SurfaceSamples, Vec<usize>), GeometryError> {
    assert!(n > 0, "n must be positive");
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0f64;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(GeometryError::Degenerate("zero-area mesh".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut face_ids = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.gen::<f64>() * total;
        let f = match cumulative.binary_search_by(|c| c.partial_cmp(&t).unwrap()) {
            Ok(i) => i,
            Err(i) => i.min(mesh.faces.len() - 1),
        };
        let [i, j, k] = mesh.faces[f];
        let (a, b, c) = (mesh.vertices[i], mesh.vertices[j], mesh.vertices[k]);
        let r1 = rng.gen::<f64>().sqrt();
        let r2 = rng.gen::<f64>();
        let w0 = 1.0 - r1;
        let w1 = r1 * (1.0 - r2);
        let w2 = r1 * r2;
        points.push([
            w0 * a[0] + w1 * b[0] + w2 * c[0],
            w0 * a[1] + w1 * b[1] + w2 * c[1],
            w0 * a[2] + w1 * b[2] + w2 * c[2],
        ]);
        normals.push(mesh.face_normal(f).unwrap_or([0.0, 1.0, 0.0]));
        face_ids.push(f);
    }
    Ok((
        SurfaceSamples {
            points,
            normals: Some(normals),
        },
        face_ids,
    ))
}

/// Sample `k` spatial points with occupancy labels: 80% jittered inside
/// mixed-neighborhood (near-surface) voxels, 20% uniform over the cube.
/// The label of each point is the occupancy of its containing voxel.
pub fn sample_occupancy_points(grid: &OccupancyGrid, k: usize, seed: u64) -> OccupancySamples {
    assert!(k > 0, "K must be positive");
    let r = grid.resolution;
    let mut mixed: Vec<(usize, usize, usize)> = Vec::new();
    for i in 0..r {
        for j in 0..r {
            for kk in 0..r {
                if is_mixed(grid, i, j, kk) {
                    mixed.push((i, j, kk));
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let near = if mixed.is_empty() {
        0
    } else {
        (k as f64 * NEAR_SURFACE_FRACTION).round() as usize
    };
    let h = grid.voxel_size;
    let full = grid.resolution as f64 * h;
    let mut points = Vec::with_capacity(k);
    let mut labels = Vec::with_capacity(k);
    for t in 0..k {
        let p = if t < near {
            let (i, j, kk) = mixed[rng.gen_range(0..mixed.len())];
            let c = grid.voxel_center(i, j, kk);
            // half-voxel jitter keeps the point inside the chosen voxel
            [
                c[0] + (rng.gen::<f64>() - 0.5) * h,
                c[1] + (rng.gen::<f64>() - 0.5) * h,
                c[2] + (rng.gen::<f64>() - 0.5) * h,
            ]
        } else {
            [
                grid.origin[0] + rng.gen::<f64>() * full,
                grid.origin[1] + rng.gen::<f64>() * full,
                grid.origin[2] + rng.gen::<f64>() * full,
            ]
        };
        labels.push(grid.label_at(p));
        points.push(p);
    }
    OccupancySamples {
        points,
        labels,
        resolution: r,
    }
}

/// The paper's per-resolution sample-count schedule.
pub fn default_k_for_resolution(resolution: usize) -> usize {
    match resolution {
        16 => 4096,
        32 => 8192,
        64 => 32768,
        r => r * r * r / 8,
    }
}
