//! Watertight voxelization: conservative triangle rasterization followed by a
//! 6-connected flood fill from the grid boundary. Voxels the fill cannot reach
//! are inside; voxels on the rasterized surface shell are classified by a
//! signed ray-crossing test of their center, so the occupied volume tracks
//! true containment instead of bulging by one shell.

use std::collections::VecDeque;

use super::{cross, dot, sub, GeometryError, Mesh, OccupancyGrid, GRID_HALF_EXTENT};

/// Voxelize a normalized mesh into an `r^3` occupancy grid over the cube
/// `[-GRID_HALF_EXTENT, GRID_HALF_EXTENT]^3`.
pub fn voxelize(mesh: &Mesh, resolution: usize) -> Result<OccupancyGrid, GeometryError> {
    assert!(resolution >= 4, "resolution must be at least 4");
    let (lo, hi) = mesh
        .bbox()
        .ok_or_else(|| GeometryError::Degenerate("empty mesh".into()))?;
    let half = GRID_HALF_EXTENT;
    if lo.iter().any(|&c| c < -half) || hi.iter().any(|&c| c > half) {
        return Err(GeometryError::OutOfBounds { half_extent: half });
    }

    let r = resolution;
    let origin = [-half; 3];
    let h = 2.0 * half / r as f64;
    let mut surface = vec![0u8; r * r * r];
    let idx = |i: usize, j: usize, k: usize| (i * r + j) * r + k;

    // Conservative rasterization: exact triangle/box overlap per candidate voxel.
    for f in &mesh.faces {
        let tri = [
            mesh.vertices[f[0]],
            mesh.vertices[f[1]],
            mesh.vertices[f[2]],
        ];
        let mut tlo = [f64::INFINITY; 3];
        let mut thi = [f64::NEG_INFINITY; 3];
        for v in &tri {
            for a in 0..3 {
                tlo[a] = tlo[a].min(v[a]);
                thi[a] = thi[a].max(v[a]);
            }
        }
        // widen the candidate window by one voxel: the floor() is not exact
        // for faces sitting on lattice planes, and the SAT test is cheap
        let cell_range = |a: usize| {
            let i0 = ((tlo[a] - origin[a]) / h).floor() as isize - 1;
            let i1 = ((thi[a] - origin[a]) / h).floor() as isize + 1;
            (
                i0.clamp(0, r as isize - 1) as usize,
                i1.clamp(0, r as isize - 1) as usize,
            )
        };
        let (i0, i1) = cell_range(0);
        let (j0, j1) = cell_range(1);
        let (k0, k1) = cell_range(2);
        for i in i0..=i1 {
            for j in j0..=j1 {
                for k in k0..=k1 {
                    if surface[idx(i, j, k)] == 1 {
                        continue;
                    }
                    let center = [
                        origin[0] + (i as f64 + 0.5) * h,
                        origin[1] + (j as f64 + 0.5) * h,
                        origin[2] + (k as f64 + 0.5) * h,
                    ];
                    if tri_box_overlap(center, 0.5 * h, &tri) {
                        surface[idx(i, j, k)] = 1;
                    }
                }
            }
        }
    }

    // Flood fill outside air from every boundary voxel.
    let mut outside = vec![0u8; r * r * r];
    let mut queue: VecDeque<(usize, usize, usize)> = VecDeque::new();
    let try_push =
        |i: usize, j: usize, k: usize, outside: &mut Vec<u8>, queue: &mut VecDeque<_>| {
            let t = idx(i, j, k);
            if surface[t] == 0 && outside[t] == 0 {
                outside[t] = 1;
                queue.push_back((i, j, k));
            }
        };
    for i in 0..r {
        for j in 0..r {
            try_push(i, j, 0, &mut outside, &mut queue);
            try_push(i, j, r - 1, &mut outside, &mut queue);
            try_push(i, 0, j, &mut outside, &mut queue);
            try_push(i, r - 1, j, &mut outside, &mut queue);
            try_push(0, i, j, &mut outside, &mut queue);
            try_push(r - 1, i, j, &mut outside, &mut queue);
        }
    }
    while let Some((i, j, k)) = queue.pop_front() {
        let neighbors = [
            (i.wrapping_sub(1), j, k),
            (i + 1, j, k),
            (i, j.wrapping_sub(1), k),
            (i, j + 1, k),
            (i, j, k.wrapping_sub(1)),
            (i, j, k + 1),
        ];
        for (ni, nj, nk) in neighbors {
            if ni < r && nj < r && nk < r {
                let t = idx(ni, nj, nk);
                if surface[t] == 0 && outside[t] == 0 {
                    outside[t] = 1;
                    queue.push_back((ni, nj, nk));
                }
            }
        }
    }

    // Interior = unreachable and off the shell. Shell voxels get the
    // containment of their center (winding of a generic ray).
    let mut occupancy = vec![0u8; r * r * r];
    for i in 0..r {
        for j in 0..r {
            for k in 0..r {
                let t = idx(i, j, k);
                occupancy[t] = if surface[t] == 1 {
                    let center = [
                        origin[0] + (i as f64 + 0.5) * h,
                        origin[1] + (j as f64 + 0.5) * h,
                        origin[2] + (k as f64 + 0.5) * h,
                    ];
                    u8::from(winding_nonzero(mesh, center))
                } else {
                    u8::from(outside[t] == 0)
                };
            }
        }
    }

    Ok(OccupancyGrid {
        resolution: r,
        occupancy,
        origin,
        voxel_size: h,
    })
}

/// Signed ray-crossing count along a fixed generic direction; nonzero means
/// the point is enclosed (handles self-intersecting unions of closed parts).
fn winding_nonzero(mesh: &Mesh, p: [f64; 3]) -> bool {
    // (1, 2, 3)/sqrt(14): not aligned with any box face or lattice plane
    const DIR: [f64; 3] = [0.2672612419124244, 0.5345224838248488, 0.8017837257372732];
    let mut winding = 0i64;
    for f in &mesh.faces {
        let a = mesh.vertices[f[0]];
        let b = mesh.vertices[f[1]];
        let c = mesh.vertices[f[2]];
        // Moller-Trumbore
        let e1 = sub(b, a);
        let e2 = sub(c, a);
        let pv = cross(DIR, e2);
        let det = dot(e1, pv);
        if det.abs() < 1e-14 {
            continue;
        }
        let inv = 1.0 / det;
        let tv = sub(p, a);
        let u = dot(tv, pv) * inv;
        if !(0.0..=1.0).contains(&u) {
            continue;
        }
        let qv = cross(tv, e1);
        let v = dot(DIR, qv) * inv;
        if v < 0.0 || u + v > 1.0 {
            continue;
        }
        let t = dot(e2, qv) * inv;
        if t > 1e-12 {
            winding += if det > 0.0 { 1 } else { -1 };
        }
    }
    winding != 0
}

/// Separating-axis triangle vs axis-aligned cube test (cube given by center
/// and half width). The box is padded by a relative epsilon so that exact
/// face-on-lattice touches register on both sides despite rounding.
fn tri_box_overlap(center: [f64; 3], half: f64, tri: &[[f64; 3]; 3]) -> bool {
    let half = half * (1.0 + 1e-9);
    let v0 = sub(tri[0], center);
    let v1 = sub(tri[1], center);
    let v2 = sub(tri[2], center);

    // 1. box axes
    for a in 0..3 {
        let lo = v0[a].min(v1[a]).min(v2[a]);
        let hi = v0[a].max(v1[a]).max(v2[a]);
        if lo > half || hi < -half {
            return false;
        }
    }

    // 2. triangle plane
    let e0 = sub(v1, v0);
    let e1 = sub(v2, v1);
    let n = cross(e0, e1);
    let d = dot(n, v0);
    let rad = half * (n[0].abs() + n[1].abs() + n[2].abs());
    if d.abs() > rad {
        return false;
    }

    // 3. nine cross-product axes
    let e2 = sub(v0, v2);
    let edges = [e0, e1, e2];
    for e in &edges {
        for a in 0..3 {
            let mut axis = [0.0; 3];
            axis[(a + 1) % 3] = -e[(a + 2) % 3];
            axis[(a + 2) % 3] = e[(a + 1) % 3];
            let p0 = dot(axis, v0);
            let p1 = dot(axis, v1);
            let p2 = dot(axis, v2);
            let lo = p0.min(p1).min(p2);
            let hi = p0.max(p1).max(p2);
            let rad = half * (axis[0].abs() + axis[1].abs() + axis[2].abs());
            if lo > rad || hi < -rad {
                return false;
            }
        }
    }
    true
}

/// True when the voxel has at least one 6-neighbor with the opposite
/// occupancy (treating out-of-grid as outside).
pub(crate) fn is_mixed(grid: &OccupancyGrid, i: usize, j: usize, k: usize) -> bool {
    let r = grid.resolution;
    let own = grid.get(i, j, k);
    let neighbors = [
        (i.wrapping_sub(1), j, k),
        (i + 1, j, k),
        (i, j.wrapping_sub(1), k),
        (i, j + 1, k),
        (i, j, k.wrapping_sub(1)),
        (i, j, k + 1),
    ];
    for (ni, nj, nk) in neighbors {
        let nb = if ni < r && nj < r && nk < r {
            grid.get(ni, nj, nk)
        } else {
            0
        };
        if nb != own {
            return true;
        }
    }
    false
}
