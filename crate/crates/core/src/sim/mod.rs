//! Scan synthesis: cone-beam geometry, analytic phantoms with metal
//! implants, forward projection, mask rendering, and FDK reconstruction.

pub mod fdk;
pub mod io;
pub mod phantom;
pub mod project;

pub use fdk::{fdk_reconstruct, hu_from_mu, MU_WATER};
pub use io::ProjectionSet;
pub use phantom::{build_scene, PhantomSpec, Scene};
pub use project::{forward_project, project_shapes, render_metal_mask};

use crate::error::{Error, Result};

/// Circular cone-beam scan geometry with a flat detector.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    /// Source-to-detector distance (mm).
    pub sdd: f64,
    /// Source-to-isocenter distance (mm).
    pub sid: f64,
    pub n_views: usize,
    /// Angular increment between views (degrees).
    pub step_deg: f64,
    /// Detector columns.
    pub nu: usize,
    /// Detector rows.
    pub nv: usize,
    /// Detector pixel pitch (mm).
    pub pixel_mm: f64,
}

impl Geometry {
    /// Full-scale scan: 512x512 detector at 0.580 mm pitch, 60 views over
    /// 360 degrees.
    pub fn full_scale() -> Self {
        Geometry {
            sdd: 1164.0,
            sid: 622.0,
            n_views: 60,
            step_deg: 6.0,
            nu: 512,
            nv: 512,
            pixel_mm: 0.580,
        }
    }

    /// Same distances, angular sampling and physical detector size as
    /// [`Geometry::full_scale`], binned to 64x64 pixels.
    pub fn desk() -> Self {
        Geometry { nu: 64, nv: 64, pixel_mm: 0.580 * 8.0, ..Geometry::full_scale() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sdd > self.sid && self.sid > 0.0) {
            return Err(Error::invalid(format!(
                "geometry: need sdd > sid > 0, got sdd {} sid {}",
                self.sdd, self.sid
            )));
        }
        if self.n_views == 0 || self.step_deg <= 0.0 {
            return Err(Error::invalid(format!(
                "geometry: need views and a positive step, got {} views step {}",
                self.n_views, self.step_deg
            )));
        }
        if self.n_views as f64 * self.step_deg > 360.0 + 1e-9 {
            return Err(Error::invalid(format!(
                "geometry: {} views x {} deg exceeds a full turn",
                self.n_views, self.step_deg
            )));
        }
        if self.nu == 0 || self.nv == 0 || self.pixel_mm <= 0.0 {
            return Err(Error::invalid("geometry: empty detector".to_string()));
        }
        Ok(())
    }

    /// View angle in radians.
    pub fn angle(&self, view: usize) -> f64 {
        view as f64 * self.step_deg.to_radians()
    }

    /// X-ray source position at a view.
    pub fn source(&self, view: usize) -> [f64; 3] {
        let b = self.angle(view);
        [-self.sid * b.cos(), -self.sid * b.sin(), 0.0]
    }

    /// Center of detector pixel (iu column, iv row) in world coordinates.
    pub fn pixel_center(&self, view: usize, iu: usize, iv: usize) -> [f64; 3] {
        let b = self.angle(view);
        let r = [b.cos(), b.sin(), 0.0];
        let u = [-b.sin(), b.cos(), 0.0];
        let du = (iu as f64 + 0.5 - self.nu as f64 / 2.0) * self.pixel_mm;
        let dv = (iv as f64 + 0.5 - self.nv as f64 / 2.0) * self.pixel_mm;
        let c = self.sdd - self.sid;
        [c * r[0] + du * u[0], c * r[1] + du * u[1], dv]
    }

    /// Where a world point lands on the detector of a view, in fractional
    /// pixel coordinates (iu, iv); `None` behind the source.
    pub fn project_point(&self, view: usize, p: [f64; 3]) -> Option<(f64, f64)> {
        let b = self.angle(view);
        let depth = p[0] * b.cos() + p[1] * b.sin() + self.sid;
        if depth <= 0.0 {
            return None;
        }
        let lateral = -p[0] * b.sin() + p[1] * b.cos();
        let mag = self.sdd / depth;
        let iu = lateral * mag / self.pixel_mm + self.nu as f64 / 2.0 - 0.5;
        let iv = p[2] * mag / self.pixel_mm + self.nv as f64 / 2.0 - 0.5;
        Some((iu, iv))
    }
}

/// Cubic voxel grid of attenuation values (mm^-1), centered on the
/// isocenter. `data[(z * ny + y) * nx + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub n: [usize; 3],
    pub voxel_mm: f64,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(n: [usize; 3], voxel_mm: f64) -> Self {
        Volume { n, voxel_mm, data: vec![0.0; n[0] * n[1] * n[2]] }
    }

    pub fn numel(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[(z * self.n[1] + y) * self.n[0] + x]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        self.data[(z * self.n[1] + y) * self.n[0] + x] = v;
    }

    /// World position of a voxel center.
    pub fn center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let c = |i: usize, n: usize| (i as f64 + 0.5 - n as f64 / 2.0) * self.voxel_mm;
        [c(x, self.n[0]), c(y, self.n[1]), c(z, self.n[2])]
    }

    /// Half-extent of the grid along each axis (mm).
    pub fn half_extent(&self) -> [f64; 3] {
        self.n.map(|n| n as f64 * self.voxel_mm / 2.0)
    }

    /// Radius of the bounding sphere (mm).
    pub fn bounding_radius(&self) -> f64 {
        let h = self.half_extent();
        (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt()
    }

    /// Voxelize shapes at voxel centers; the last shape containing a center
    /// wins, so implants listed after anatomy override it.
    pub fn from_shapes(shapes: &[Shape], n: [usize; 3], voxel_mm: f64) -> Self {
        let mut vol = Volume::zeros(n, voxel_mm);
        for z in 0..n[2] {
            for y in 0..n[1] {
                for x in 0..n[0] {
                    let p = vol.center(x, y, z);
                    if let Some(mu) = mu_at(shapes, p) {
                        vol.set(x, y, z, mu);
                    }
                }
            }
        }
        vol
    }
}

/// Attenuation at a point under last-shape-wins composition.
pub fn mu_at(shapes: &[Shape], p: [f64; 3]) -> Option<f64> {
    shapes.iter().rev().find(|s| s.contains(p)).map(|s| s.mu)
}

/// A convex solid with uniform attenuation.
#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub mu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ShapeKind {
    Ellipsoid { center: [f64; 3], semi: [f64; 3] },
    /// Finite cylinder with flat caps, axis from `a` to `b`.
    Cylinder { a: [f64; 3], b: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Slab { center: [f64; 3], half: [f64; 3] },
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match &self.kind {
            ShapeKind::Ellipsoid { center, semi } => {
                let d = sub3(p, *center);
                let q = |i: usize| d[i] / semi[i];
                q(0) * q(0) + q(1) * q(1) + q(2) * q(2) <= 1.0
            }
            ShapeKind::Cylinder { a, b, radius } => {
                let axis = sub3(*b, *a);
                let len2 = dot3(axis, axis);
                let d = sub3(p, *a);
                let t = dot3(d, axis) / len2;
                if !(0.0..=1.0).contains(&t) {
                    return false;
                }
                let perp = [d[0] - t * axis[0], d[1] - t * axis[1], d[2] - t * axis[2]];
                dot3(perp, perp) <= radius * radius
            }
            ShapeKind::Slab { center, half } => {
                let d = sub3(p, *center);
                d[0].abs() <= half[0] && d[1].abs() <= half[1] && d[2].abs() <= half[2]
            }
        }
    }

    /// Parameter interval of the ray `s + t d` inside the shape, clipped to
    /// nothing when the ray misses.
    pub fn ray_interval(&self, s: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
        match &self.kind {
            ShapeKind::Ellipsoid { center, semi } => {
                let o = sub3(s, *center);
                let os = [o[0] / semi[0], o[1] / semi[1], o[2] / semi[2]];
                let ds = [d[0] / semi[0], d[1] / semi[1], d[2] / semi[2]];
                let a = dot3(ds, ds);
                let b = 2.0 * dot3(os, ds);
                let c = dot3(os, os) - 1.0;
                quadratic_interval(a, b, c)
            }
            ShapeKind::Cylinder { a: pa, b: pb, radius } => {
                let axis = sub3(*pb, *pa);
                let len2 = dot3(axis, axis);
                let o = sub3(s, *pa);
                // Components perpendicular to the axis.
                let od = dot3(o, axis) / len2;
                let dd = dot3(d, axis) / len2;
                let op = [o[0] - od * axis[0], o[1] - od * axis[1], o[2] - od * axis[2]];
                let dp = [d[0] - dd * axis[0], d[1] - dd * axis[1], d[2] - dd * axis[2]];
                let a = dot3(dp, dp);
                let b = 2.0 * dot3(op, dp);
                let c = dot3(op, op) - radius * radius;
                let tube = if a.abs() < 1e-30 {
                    if c > 0.0 {
                        return None;
                    }
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    quadratic_interval(a, b, c)?
                };
                // Axial slab: 0 <= od + t dd <= 1.
                let caps = if dd.abs() < 1e-30 {
                    if !(0.0..=1.0).contains(&od) {
                        return None;
                    }
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    let (t0, t1) = ((0.0 - od) / dd, (1.0 - od) / dd);
                    (t0.min(t1), t0.max(t1))
                };
                intersect_intervals(tube, caps)
            }
            ShapeKind::Slab { center, half } => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for ax in 0..3 {
                    let o = s[ax] - center[ax];
                    if d[ax].abs() < 1e-30 {
                        if o.abs() > half[ax] {
                            return None;
                        }
                        continue;
                    }
                    let (t0, t1) = ((-half[ax] - o) / d[ax], (half[ax] - o) / d[ax]);
                    lo = lo.max(t0.min(t1));
                    hi = hi.min(t0.max(t1));
                }
                if lo < hi {
                    Some((lo, hi))
                } else {
                    None
                }
            }
        }
    }
}

fn quadratic_interval(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - 4.0 * a * c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (t0, t1) = ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a));
    Some((t0.min(t1), t0.max(t1)))
}

fn intersect_intervals(a: (f64, f64), b: (f64, f64)) -> Option<(f64, f64)> {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo < hi {
        Some((lo, hi))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_preserves_full_scale_ratios() {
        let full = Geometry::full_scale();
        let desk = Geometry::desk();
        full.validate().unwrap();
        desk.validate().unwrap();
        assert_eq!(desk.sdd, full.sdd);
        assert_eq!(desk.sid, full.sid);
        assert_eq!(desk.n_views, 60);
        assert_eq!(desk.step_deg, 6.0);
        let full_width = full.nu as f64 * full.pixel_mm;
        let desk_width = desk.nu as f64 * desk.pixel_mm;
        assert!((full_width - desk_width).abs() < 1e-9);
    }

    #[test]
    fn geometry_validation_rejects_nonsense() {
        let mut g = Geometry::desk();
        g.sid = 1200.0;
        assert!(g.validate().is_err());
        let mut g = Geometry::desk();
        g.n_views = 61;
        assert!(g.validate().is_err());
        let mut g = Geometry::desk();
        g.pixel_mm = 0.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn source_detector_and_point_projection_agree() {
        let g = Geometry::desk();
        for view in [0, 7, 33] {
            let s = g.source(view);
            assert!((dot3(s, s).sqrt() - g.sid).abs() < 1e-9);
            // The isocenter projects to the detector center.
            let (iu, iv) = g.project_point(view, [0.0, 0.0, 0.0]).unwrap();
            assert!((iu - (g.nu as f64 / 2.0 - 0.5)).abs() < 1e-9);
            assert!((iv - (g.nv as f64 / 2.0 - 0.5)).abs() < 1e-9);
            // A pixel center projects onto its own coordinates.
            let p = g.pixel_center(view, 11, 40);
            let (iu, iv) = g.project_point(view, p).unwrap();
            assert!((iu - 11.0).abs() < 1e-9);
            assert!((iv - 40.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_intervals_match_containment() {
        let shapes = [
            Shape {
                kind: ShapeKind::Ellipsoid { center: [5.0, -2.0, 1.0], semi: [20.0, 15.0, 30.0] },
                mu: 1.0,
            },
            Shape {
                kind: ShapeKind::Cylinder { a: [0.0, 0.0, -25.0], b: [5.0, 3.0, 25.0], radius: 8.0 },
                mu: 1.0,
            },
            Shape { kind: ShapeKind::Slab { center: [-4.0, 6.0, 0.0], half: [10.0, 5.0, 12.0] }, mu: 1.0 },
        ];
        let s = [-600.0, 13.0, -7.0];
        let d = [1200.0, -20.0, 11.0];
        for shape in &shapes {
            match shape.ray_interval(s, d) {
                Some((t0, t1)) => {
                    assert!(t0 < t1);
                    let mid = (t0 + t1) / 2.0;
                    let at = |t: f64| [s[0] + t * d[0], s[1] + t * d[1], s[2] + t * d[2]];
                    assert!(shape.contains(at(mid)), "{shape:?} midpoint outside");
                    assert!(!shape.contains(at(t0 - 1e-6)), "{shape:?} before entry");
                    assert!(!shape.contains(at(t1 + 1e-6)), "{shape:?} after exit");
                }
                None => {
                    // Sample along the ray: no point may be inside.
                    for k in 0..200 {
                        let t = k as f64 / 199.0;
                        let p = [s[0] + t * d[0], s[1] + t * d[1], s[2] + t * d[2]];
                        assert!(!shape.contains(p));
                    }
                }
            }
        }
    }

    #[test]
    fn voxelization_applies_override_order() {
        let shapes = [
            Shape { kind: ShapeKind::Slab { center: [0.0; 3], half: [20.0; 3] }, mu: 0.02 },
            Shape {
                kind: ShapeKind::Cylinder { a: [0.0, 0.0, -15.0], b: [0.0, 0.0, 15.0], radius: 6.0 },
                mu: 0.3,
            },
        ];
        let vol = Volume::from_shapes(&shapes, [16, 16, 16], 4.0);
        assert!((vol.get(8, 8, 8) - 0.3).abs() < 1e-12, "cylinder overrides slab");
        assert!((vol.get(3, 8, 8) - 0.02).abs() < 1e-12, "slab outside cylinder");
        assert_eq!(vol.get(0, 0, 0), 0.0, "corner outside both");
    }
}
