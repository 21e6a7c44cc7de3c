//! Procedural chair/table families with ground-truth dense correspondence.
//!
//! Shapes are unions of axis-aligned boxes, which keeps the correspondence
//! oracle closed-form (part-local box coordinates) and the meshes trivially
//! watertight under voxelization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    self, default_k_for_resolution, normalize_shape, sample_occupancy_points,
    sample_surface_points_with_faces, voxelize, GeometryError, Mesh, OccupancySamples,
    SurfaceSamples,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("query point is {0:.4} away from the labeled surface (limit {1})")]
    NotOnSurface(f64, f64),
    #[error("invalid family spec: {0}")]
    InvalidSpec(String),
}

/// Distance limit for oracle queries: points must sit this close to a
/// labeled surface sample (2% of the unit bounding-box diagonal).
pub const ORACLE_SURFACE_TOL: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Chair,
    Table,
}

/// Part label values for the chair family.
pub mod chair_parts {
    pub const SEAT: u8 = 0;
    pub const BACK: u8 = 1;
    pub const LEG: u8 = 2;
    pub const ARM: u8 = 3;
    pub const NAMES: [&str; 4] = ["seat", "back", "leg", "arm"];
}

/// Part label values for the table family.
pub mod table_parts {
    pub const TOP: u8 = 0;
    pub const LEG: u8 = 1;
    pub const NAMES: [&str; 2] = ["top", "leg"];
}

/// Inclusive parameter range.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }
}

/// Parametric family description: ranges, count, seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilySpec {
    pub family: Family,
    pub count: usize,
    pub seed: u64,
    /// Seat (or table-top) width range, x extent.
    pub seat_width: Range,
    /// Seat depth range, z extent.
    pub seat_depth: Range,
    /// Leg length range, y extent below the seat.
    pub seat_height: Range,
    /// Seat/top slab thickness range.
    pub seat_thickness: Range,
    /// Leg cross-section side range.
    pub leg_thickness: Range,
    /// Back height above the seat (chairs only).
    pub back_height: Range,
    /// Back slab thickness (chairs only).
    pub back_thickness: Range,
    /// Probability that a chair has both arms.
    pub arm_probability: f64,
    /// Arm height above the seat, as an absolute range (chairs only).
    pub arm_height: Range,
    /// Arm rail thickness.
    pub arm_thickness: Range,
    /// Surface points per shape.
    pub n_surface: usize,
    /// Voxel resolutions to prepare.
    pub resolutions: Vec<usize>,
    /// Occupancy samples per resolution; when empty, the default schedule
    /// (4096/8192/32768 at 16/32/64) applies.
    pub k_per_resolution: Vec<usize>,
    /// Additive Gaussian jitter applied to surface points (0 disables).
    pub noise_sigma: f64,
}

impl FamilySpec {
    pub fn chairs(count: usize, seed: u64, arm_probability: f64) -> Self {
        FamilySpec {
            family: Family::Chair,
            count,
            seed,
            seat_width: Range::new(0.8, 1.3),
            seat_depth: Range::new(0.8, 1.2),
            seat_height: Range::new(0.6, 1.0),
            seat_thickness: Range::new(0.10, 0.18),
            leg_thickness: Range::new(0.08, 0.16),
            back_height: Range::new(0.7, 1.2),
            back_thickness: Range::new(0.08, 0.16),
            arm_probability,
            arm_height: Range::new(0.30, 0.50),
            arm_thickness: Range::new(0.07, 0.12),
            n_surface: 8192,
            resolutions: vec![16, 32, 64],
            k_per_resolution: vec![],
            noise_sigma: 0.0,
        }
    }

    pub fn tables(count: usize, seed: u64) -> Self {
        FamilySpec {
            family: Family::Table,
            arm_probability: 0.0,
            ..FamilySpec::chairs(count, seed, 0.0)
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.count == 0 {
            return Err(SynthError::InvalidSpec("count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.arm_probability) {
            return Err(SynthError::InvalidSpec(
                "arm_probability must lie in [0, 1]".into(),
            ));
        }
        for (name, r) in [
            ("seat_width", self.seat_width),
            ("seat_depth", self.seat_depth),
            ("seat_height", self.seat_height),
            ("seat_thickness", self.seat_thickness),
            ("leg_thickness", self.leg_thickness),
            ("back_height", self.back_height),
            ("back_thickness", self.back_thickness),
            ("arm_height", self.arm_height),
            ("arm_thickness", self.arm_thickness),
        ] {
            if r.lo <= 0.0 || r.hi < r.lo {
                return Err(SynthError::InvalidSpec(format!(
                    "range {name} must be positive and ordered"
                )));
            }
        }
        if self.n_surface == 0 {
            return Err(SynthError::InvalidSpec("n_surface must be positive".into()));
        }
        if self.resolutions.is_empty() {
            return Err(SynthError::InvalidSpec(
                "at least one resolution required".into(),
            ));
        }
        if !self.k_per_resolution.is_empty() && self.k_per_resolution.len() != self.resolutions.len()
        {
            return Err(SynthError::InvalidSpec(
                "k_per_resolution must match resolutions".into(),
            ));
        }
        Ok(())
    }
}

/// One axis-aligned box with its part identity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PartBox {
    pub part: u8,
    /// Distinguishes instances sharing a part label (the four legs, two arms).
    /// Matched instances across shapes carry the same value.
    pub instance: u8,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Generator parameters of one shape plus its (normalized) part boxes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeParams {
    pub family: Family,
    pub theta: Vec<f64>,
    pub has_arms: bool,
    pub boxes: Vec<PartBox>,
}

/// A fully prepared synthetic shape.
#[derive(Debug, Clone)]
pub struct ShapeRecord {
    pub id: String,
    pub mesh: Mesh,
    pub surface: SurfaceSamples,
    /// One entry per requested resolution, ascending.
    pub occupancy: Vec<OccupancySamples>,
    /// Part label per surface point.
    pub labels: Vec<u8>,
    pub params: ShapeParams,
    pub seed: u64,
}

/// Axis-aligned box mesh, 8 vertices, 12 outward-wound triangles.
pub fn axis_box(min: [f64; 3], max: [f64; 3]) -> Mesh {
    let v = |i: usize| {
        [
            if i & 1 == 0 { min[0] } else { max[0] },
            if i & 2 == 0 { min[1] } else { max[1] },
            if i & 4 == 0 { min[2] } else { max[2] },
        ]
    };
    let vertices: Vec<[f64; 3]> = (0..8).map(v).collect();
    // two triangles per face, right-hand winding facing out
    let faces = vec![
        // -x
        [0, 4, 6],
        [0, 6, 2],
        // +x
        [1, 3, 7],
        [1, 7, 5],
        // -y
        [0, 1, 5],
        [0, 5, 4],
        // +y
        [2, 6, 7],
        [2, 7, 3],
        // -z
        [0, 2, 3],
        [0, 3, 1],
        // +z
        [4, 5, 7],
        [4, 7, 6],
    ];
    Mesh { vertices, faces }
}

/// How deep attached boxes sink into their support, avoiding coplanar faces.
const EMBED: f64 = 0.02;

fn chair_boxes(rng: &mut impl Rng, spec: &FamilySpec) -> (Vec<PartBox>, Vec<f64>, bool) {
    let w = spec.seat_width.sample(rng);
    let d = spec.seat_depth.sample(rng);
    let h = spec.seat_height.sample(rng);
    let st = spec.seat_thickness.sample(rng);
    let lt = spec.leg_thickness.sample(rng);
    let bh = spec.back_height.sample(rng);
    let bt = spec.back_thickness.sample(rng);
    let arm_draw = rng.gen::<f64>();
    let has_arms = arm_draw < spec.arm_probability;
    let ah = spec.arm_height.sample(rng);
    let at = spec.arm_thickness.sample(rng);

    let mut boxes = Vec::new();
    // seat slab: top surface at y = h + st
    boxes.push(PartBox {
        part: chair_parts::SEAT,
        instance: 0,
        min: [-w / 2.0, h, -d / 2.0],
        max: [w / 2.0, h + st, d / 2.0],
    });
    // legs at the four corners, embedded into the seat underside
    let leg_positions = [
        (-w / 2.0, -d / 2.0),
        (w / 2.0 - lt, -d / 2.0),
        (-w / 2.0, d / 2.0 - lt),
        (w / 2.0 - lt, d / 2.0 - lt),
    ];
    for (i, (lx, lz)) in leg_positions.iter().enumerate() {
        boxes.push(PartBox {
            part: chair_parts::LEG,
            instance: i as u8,
            min: [*lx, 0.0, *lz],
            max: [*lx + lt, h + EMBED, *lz + lt],
        });
    }
    // back slab along the rear edge, embedded into the seat top
    boxes.push(PartBox {
        part: chair_parts::BACK,
        instance: 0,
        min: [-w / 2.0, h + st - EMBED, -d / 2.0],
        max: [w / 2.0, h + st + bh, -d / 2.0 + bt],
    });
    if has_arms {
        for (i, side) in [(-w / 2.0), (w / 2.0 - at)].iter().enumerate() {
            boxes.push(PartBox {
                part: chair_parts::ARM,
                instance: i as u8,
                min: [*side, h + st - EMBED, -d / 2.0 + bt * 0.5],
                max: [*side + at, h + st + ah, d / 2.0 - 0.05 * d],
            });
        }
    }
    let theta = vec![w, d, h, st, lt, bh, bt, ah, at, arm_draw];
    (boxes, theta, has_arms)
}

fn table_boxes(rng: &mut impl Rng, spec: &FamilySpec) -> (Vec<PartBox>, Vec<f64>, bool) {
    let w = spec.seat_width.sample(rng);
    let d = spec.seat_depth.sample(rng);
    let h = spec.seat_height.sample(rng);
    let st = spec.seat_thickness.sample(rng);
    let lt = spec.leg_thickness.sample(rng);
    let mut boxes = Vec::new();
    boxes.push(PartBox {
        part: table_parts::TOP,
        instance: 0,
        min: [-w / 2.0, h, -d / 2.0],
        max: [w / 2.0, h + st, d / 2.0],
    });
    let leg_positions = [
        (-w / 2.0, -d / 2.0),
        (w / 2.0 - lt, -d / 2.0),
        (-w / 2.0, d / 2.0 - lt),
        (w / 2.0 - lt, d / 2.0 - lt),
    ];
    for (i, (lx, lz)) in leg_positions.iter().enumerate() {
        boxes.push(PartBox {
            part: table_parts::LEG,
            instance: i as u8,
            min: [*lx, 0.0, *lz],
            max: [*lx + lt, h + EMBED, *lz + lt],
        });
    }
    let theta = vec![w, d, h, st, lt];
    (boxes, theta, false)
}

/// Build the union mesh of the part boxes, tracking each face's owning box.
fn union_mesh(boxes: &[PartBox]) -> (Mesh, Vec<usize>) {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut face_boxes = Vec::new();
    for (bi, b) in boxes.iter().enumerate() {
        let m = axis_box(b.min, b.max);
        let base = vertices.len();
        vertices.extend(m.vertices);
        for f in m.faces {
            faces.push([f[0] + base, f[1] + base, f[2] + base]);
            face_boxes.push(bi);
        }
    }
    (Mesh { vertices, faces }, face_boxes)
}

fn transform_boxes(boxes: &[PartBox], center: [f64; 3], scale: f64) -> Vec<PartBox> {
    boxes
        .iter()
        .map(|b| PartBox {
            part: b.part,
            instance: b.instance,
            min: [
                (b.min[0] - center[0]) * scale,
                (b.min[1] - center[1]) * scale,
                (b.min[2] - center[2]) * scale,
            ],
            max: [
                (b.max[0] - center[0]) * scale,
                (b.max[1] - center[1]) * scale,
                (b.max[2] - center[2]) * scale,
            ],
        })
        .collect()
}

/// Generate one shape of the family; `index` selects the RNG stream, so
/// shapes can be generated independently and in parallel.
pub fn generate_shape(spec: &FamilySpec, index: usize) -> Result<ShapeRecord, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let (boxes, theta, has_arms) = match spec.family {
        Family::Chair => chair_boxes(&mut rng, spec),
        Family::Table => table_boxes(&mut rng, spec),
    };
    let (raw_mesh, face_boxes) = union_mesh(&boxes);
    let mesh = normalize_shape(&raw_mesh, geometry::DEFAULT_TARGET_DIAG)?;
    // replicate the normalization transform on the boxes
    let (lo, hi) = raw_mesh.bbox().unwrap();
    let diag = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt();
    let scale = geometry::DEFAULT_TARGET_DIAG / diag;
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let boxes = transform_boxes(&boxes, center, scale);

    let surf_seed = rng.gen::<u64>();
    let (mut surface, face_ids) =
        sample_surface_points_with_faces(&mesh, spec.n_surface, surf_seed)?;
    let labels: Vec<u8> = face_ids.iter().map(|&f| boxes[face_boxes[f]].part).collect();
    if spec.noise_sigma > 0.0 {
        let mut jrng = ChaCha8Rng::seed_from_u64(surf_seed ^ 0x6e6f_6973);
        for p in surface.points.iter_mut() {
            for c in p.iter_mut() {
                *c += gaussian(&mut jrng) * spec.noise_sigma;
            }
        }
    }

    let mut occupancy = Vec::new();
    for (ri, &r) in spec.resolutions.iter().enumerate() {
        let grid = voxelize(&mesh, r)?;
        let k = if spec.k_per_resolution.is_empty() {
            default_k_for_resolution(r)
        } else {
            spec.k_per_resolution[ri]
        };
        let occ_seed = rng.gen::<u64>();
        occupancy.push(sample_occupancy_points(&grid, k, occ_seed));
    }

    Ok(ShapeRecord {
        id: format!("{:04}", index),
        mesh,
        surface,
        occupancy,
        labels,
        params: ShapeParams {
            family: spec.family,
            theta,
            has_arms,
            boxes,
        },
        seed: spec.seed,
    })
}

/// Generate the whole family. Deterministic under `spec.seed`.
pub fn generate_family(spec: &FamilySpec) -> Result<Vec<ShapeRecord>, SynthError> {
    spec.validate()?;
    (0..spec.count).map(|i| generate_shape(spec, i)).collect()
}

/// Box-Muller standard normal.
pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Ground-truth correspondence for a point `p` on shape A: map through
/// part-local normalized box coordinates into B's matching box. `None` when
/// B lacks the part.
pub fn gt_correspondence(
    rec_a: &ShapeRecord,
    rec_b: &ShapeRecord,
    p: [f64; 3],
) -> Result<Option<[f64; 3]>, SynthError> {
    let (idx, d) = geometry::nearest_neighbor(p, &rec_a.surface.points)?;
    if d > ORACLE_SURFACE_TOL {
        return Err(SynthError::NotOnSurface(d, ORACLE_SURFACE_TOL));
    }
    let part = rec_a.labels[idx];
    // pick the instance by proximity among A's boxes of that part
    let candidates: Vec<&PartBox> = rec_a
        .params
        .boxes
        .iter()
        .filter(|b| b.part == part)
        .collect();
    debug_assert!(!candidates.is_empty());
    let box_a = candidates
        .iter()
        .min_by(|x, y| {
            box_distance(p, x)
                .partial_cmp(&box_distance(p, y))
                .unwrap()
        })
        .unwrap();
    let box_b = match rec_b
        .params
        .boxes
        .iter()
        .find(|b| b.part == part && b.instance == box_a.instance)
    {
        Some(b) => b,
        None => return Ok(None),
    };
    let mut q = [0.0f64; 3];
    for a in 0..3 {
        let t = (p[a] - box_a.min[a]) / (box_a.max[a] - box_a.min[a]);
        q[a] = box_b.min[a] + t * (box_b.max[a] - box_b.min[a]);
    }
    Ok(Some(q))
}

fn box_distance(p: [f64; 3], b: &PartBox) -> f64 {
    let mut d2 = 0.0;
    for a in 0..3 {
        let d = (b.min[a] - p[a]).max(0.0).max(p[a] - b.max[a]);
        d2 += d * d;
    }
    d2.sqrt()
}
