//! Seeded random phantoms: a soft-tissue ellipsoid, long bones with
//! cortical shell and marrow, and metal implants anchored to bone.

use rand::Rng;
use rand_distr::{Distribution, UnitSphere};

use super::project::{project_shapes, render_metal_mask};
use super::{Geometry, Shape, ShapeKind, Volume};
use crate::error::{Error, Result};
use crate::metal::MetalMask;
use crate::params::rng_for;
use crate::tensor::Tensor;

/// Ranges and attenuations for random scene generation. Counts are
/// inclusive (min, max) ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub grid_n: usize,
    pub voxel_mm: f64,
    pub bones: (usize, usize),
    pub implants: (usize, usize),
    pub mu_tissue: f64,
    pub mu_bone: f64,
    pub mu_marrow: f64,
    pub mu_metal: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid_n: 64,
            voxel_mm: 2.0,
            bones: (1, 2),
            implants: (1, 3),
            mu_tissue: 0.02,
            mu_bone: 0.05,
            mu_marrow: 0.03,
            mu_metal: 0.3,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n == 0 || self.voxel_mm <= 0.0 {
            return Err(Error::invalid("phantom: empty grid".to_string()));
        }
        if self.bones.0 > self.bones.1 || self.bones.1 == 0 {
            return Err(Error::invalid(format!("phantom: bad bone range {:?}", self.bones)));
        }
        if self.implants.0 > self.implants.1 {
            return Err(Error::invalid(format!("phantom: bad implant range {:?}", self.implants)));
        }
        if self.mu_tissue <= 0.0 || self.mu_bone <= self.mu_tissue || self.mu_metal <= self.mu_bone
        {
            return Err(Error::invalid(
                "phantom: attenuations must order tissue < bone < metal".to_string(),
            ));
        }
        Ok(())
    }
}

/// One synthetic subject: anatomy and implants kept separate so that
/// metal-free ground truth and metal-only masks come from the same scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Tissue and bone, in override order.
    pub anatomy_shapes: Vec<Shape>,
    /// Metal only.
    pub implant_shapes: Vec<Shape>,
    /// Anatomy voxelized on the scene grid.
    pub anatomy: Volume,
    /// Implants voxelized on the same grid; zero where there is no metal.
    pub implants: Volume,
}

impl Scene {
    /// Anatomy with implants written over it, the object a real scan
    /// would see.
    pub fn combined_volume(&self) -> Volume {
        let mut shapes = self.anatomy_shapes.clone();
        shapes.extend(self.implant_shapes.iter().cloned());
        Volume::from_shapes(&shapes, self.anatomy.n, self.anatomy.voxel_mm)
    }

    /// Metal-free line integrals, the inpainting ground truth.
    pub fn anatomy_projections(&self, geom: &Geometry) -> Result<Vec<Tensor<f64>>> {
        project_shapes(&self.anatomy_shapes, geom)
    }

    /// Per-view binary metal shadows.
    pub fn metal_masks(&self, geom: &Geometry) -> Result<Vec<MetalMask>> {
        render_metal_mask(&self.implant_shapes, geom)
    }
}

fn cylinder(center: [f64; 3], dir: [f64; 3], half_len: f64, radius: f64, mu: f64) -> Shape {
    let a = [center[0] - half_len * dir[0], center[1] - half_len * dir[1], center[2] - half_len * dir[2]];
    let b = [center[0] + half_len * dir[0], center[1] + half_len * dir[1], center[2] + half_len * dir[2]];
    Shape { kind: ShapeKind::Cylinder { a, b, radius }, mu }
}

/// Axis-aligned voxel index bounds covering a shape, clamped to the grid.
fn shape_voxel_bounds(shape: &Shape, n: usize, voxel: f64) -> [(usize, usize); 3] {
    let (lo, hi) = match &shape.kind {
        ShapeKind::Ellipsoid { center, semi } => (
            [center[0] - semi[0], center[1] - semi[1], center[2] - semi[2]],
            [center[0] + semi[0], center[1] + semi[1], center[2] + semi[2]],
        ),
        ShapeKind::Cylinder { a, b, radius } => (
            [a[0].min(b[0]) - radius, a[1].min(b[1]) - radius, a[2].min(b[2]) - radius],
            [a[0].max(b[0]) + radius, a[1].max(b[1]) + radius, a[2].max(b[2]) + radius],
        ),
        ShapeKind::Slab { center, half } => (
            [center[0] - half[0], center[1] - half[1], center[2] - half[2]],
            [center[0] + half[0], center[1] + half[1], center[2] + half[2]],
        ),
    };
    let half_extent = n as f64 * voxel / 2.0;
    let clamp_idx = |w: f64| (((w + half_extent) / voxel).floor().max(0.0) as usize).min(n - 1);
    [0, 1, 2].map(|ax| (clamp_idx(lo[ax]), clamp_idx(hi[ax])))
}

/// Count implant voxel centers on the grid and how many of them fall
/// inside bone.
fn implant_overlap(implant: &Shape, bones: &[Shape], n: usize, voxel: f64) -> (usize, usize) {
    let probe = Volume::zeros([n, n, n], voxel);
    let bounds = shape_voxel_bounds(implant, n, voxel);
    let mut inside = 0usize;
    let mut in_bone = 0usize;
    for z in bounds[2].0..=bounds[2].1 {
        for y in bounds[1].0..=bounds[1].1 {
            for x in bounds[0].0..=bounds[0].1 {
                let p = probe.center(x, y, z);
                if implant.contains(p) {
                    inside += 1;
                    if bones.iter().any(|b| b.contains(p)) {
                        in_bone += 1;
                    }
                }
            }
        }
    }
    (inside, in_bone)
}

const PLACEMENT_RETRIES: usize = 20;

/// Generate a scene: ellipsoidal soft tissue, 1-2 tilted long bones
/// (cortical shell around marrow), and implants that must land inside the
/// grid and intersect bone. Placement resamples up to 20 times per
/// implant before failing. Deterministic in the seed.
pub fn build_scene(spec: &PhantomSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = rng_for(seed, "scene");
    let half = spec.grid_n as f64 * spec.voxel_mm / 2.0;

    let semi = [
        rng.random_range(0.55..0.75) * half,
        rng.random_range(0.55..0.75) * half,
        rng.random_range(0.70..0.90) * half,
    ];
    let mut anatomy =
        vec![Shape { kind: ShapeKind::Ellipsoid { center: [0.0; 3], semi }, mu: spec.mu_tissue }];

    let n_bones = rng.random_range(spec.bones.0..=spec.bones.1);
    let mut bone_shells = Vec::with_capacity(n_bones);
    for _ in 0..n_bones {
        let center = [
            rng.random_range(-0.35..0.35) * semi[0],
            rng.random_range(-0.35..0.35) * semi[1],
            0.0,
        ];
        let tilt: [f64; 2] = [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)];
        let norm = (tilt[0] * tilt[0] + tilt[1] * tilt[1] + 1.0).sqrt();
        let dir = [tilt[0] / norm, tilt[1] / norm, 1.0 / norm];
        let half_len = 0.75 * semi[2];
        let r_out = rng.random_range(0.11..0.19) * half;
        let shell = cylinder(center, dir, half_len, r_out, spec.mu_bone);
        let marrow = cylinder(center, dir, half_len, 0.55 * r_out, spec.mu_marrow);
        bone_shells.push(shell.clone());
        anatomy.push(shell);
        anatomy.push(marrow);
    }

    let n_implants = rng.random_range(spec.implants.0..=spec.implants.1);
    let mut implants = Vec::with_capacity(n_implants);
    for k in 0..n_implants {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let bone = &bone_shells[rng.random_range(0..bone_shells.len())];
            let (a, b) = match &bone.kind {
                ShapeKind::Cylinder { a, b, .. } => (*a, *b),
                _ => unreachable!("bones are cylinders"),
            };
            let s = rng.random_range(0.2..0.8);
            let anchor =
                [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), a[2] + s * (b[2] - a[2])];
            let candidate = if rng.random_range(0.0..1.0) < 0.6 {
                let dir: [f64; 3] = UnitSphere.sample(&mut rng);
                let radius = rng.random_range(0.03..0.055) * half;
                let half_len = rng.random_range(0.15..0.30) * half;
                cylinder(anchor, dir, half_len, radius, spec.mu_metal)
            } else {
                let half_dims = [
                    rng.random_range(0.02..0.04) * half,
                    rng.random_range(0.06..0.12) * half,
                    rng.random_range(0.15..0.28) * half,
                ];
                Shape {
                    kind: ShapeKind::Slab { center: anchor, half: half_dims },
                    mu: spec.mu_metal,
                }
            };
            let (inside, in_bone) =
                implant_overlap(&candidate, &bone_shells, spec.grid_n, spec.voxel_mm);
            if inside > 0 && in_bone > 0 {
                implants.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "phantom: implant {k} found no bone-intersecting placement in {PLACEMENT_RETRIES} attempts"
            )));
        }
    }

    let n3 = [spec.grid_n; 3];
    Ok(Scene {
        anatomy: Volume::from_shapes(&anatomy, n3, spec.voxel_mm),
        implants: Volume::from_shapes(&implants, n3, spec.voxel_mm),
        anatomy_shapes: anatomy,
        implant_shapes: implants,
    })
}

/// Independent per-scene generator streams, so scan N is reproducible
/// without generating scans 0..N-1.
pub fn scene_seed(base_seed: u64, index: usize) -> u64 {
    base_seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}
