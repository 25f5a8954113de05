//! Forward projection: exact line integrals through voxel grids
//! (parametric voxel walking) and through analytic shapes (interval
//! partition with last-shape-wins override).

use rayon::prelude::*;

use super::{Geometry, Shape, Volume};
use crate::error::{Error, Result};
use crate::metal::MetalMask;
use crate::tensor::Tensor;

/// Integral of mu along the segment from `s` to `p` through a voxel grid.
/// Exact for piecewise-constant voxels: accumulates mu times the chord
/// length of every voxel the segment crosses.
pub fn ray_integral(vol: &Volume, s: [f64; 3], p: [f64; 3]) -> f64 {
    let d = [p[0] - s[0], p[1] - s[1], p[2] - s[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let half = vol.half_extent();

    // Clip the segment parameter to the grid bounding box.
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for ax in 0..3 {
        if d[ax].abs() < 1e-30 {
            if s[ax].abs() > half[ax] {
                return 0.0;
            }
            continue;
        }
        let ta = (-half[ax] - s[ax]) / d[ax];
        let tb = (half[ax] - s[ax]) / d[ax];
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    if t0 >= t1 {
        return 0.0;
    }

    // Entry voxel and per-axis crossing parameters.
    let mut idx = [0isize; 3];
    let mut step = [0isize; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for ax in 0..3 {
        let entry = s[ax] + t0 * d[ax];
        let i = (((entry + half[ax]) / vol.voxel_mm).floor() as isize)
            .clamp(0, vol.n[ax] as isize - 1);
        idx[ax] = i;
        if d[ax].abs() < 1e-30 {
            continue;
        }
        step[ax] = if d[ax] > 0.0 { 1 } else { -1 };
        t_delta[ax] = vol.voxel_mm / d[ax].abs();
        let next_plane = -half[ax] + (i + if d[ax] > 0.0 { 1 } else { 0 }) as f64 * vol.voxel_mm;
        t_next[ax] = (next_plane - s[ax]) / d[ax];
        if t_next[ax] < t0 {
            t_next[ax] += t_delta[ax];
        }
    }

    let mut acc = 0.0f64;
    let mut t = t0;
    loop {
        let tn = t_next[0].min(t_next[1]).min(t_next[2]).min(t1);
        if tn > t {
            let mu = vol.get(idx[0] as usize, idx[1] as usize, idx[2] as usize);
            acc += mu * (tn - t) * len;
            t = tn;
        }
        if t >= t1 {
            return acc;
        }
        let ax = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        idx[ax] += step[ax];
        if idx[ax] < 0 || idx[ax] >= vol.n[ax] as isize {
            return acc;
        }
        t_next[ax] += t_delta[ax];
    }
}

/// Integral of mu along the segment from `s` to `p` through overlapping
/// shapes. Overlaps resolve to the last listed shape, matching
/// [`Volume::from_shapes`], so an implant drawn after bone attenuates as
/// metal where they intersect.
pub fn shapes_ray_integral(shapes: &[Shape], s: [f64; 3], p: [f64; 3]) -> f64 {
    let d = [p[0] - s[0], p[1] - s[1], p[2] - s[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();

    let mut spans: Vec<(f64, f64, usize)> = Vec::with_capacity(shapes.len());
    let mut cuts: Vec<f64> = Vec::with_capacity(2 * shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        if let Some((t0, t1)) = shape.ray_interval(s, d) {
            let (t0, t1) = (t0.max(0.0), t1.min(1.0));
            if t0 < t1 {
                spans.push((t0, t1, i));
                cuts.push(t0);
                cuts.push(t1);
            }
        }
    }
    if spans.is_empty() {
        return 0.0;
    }
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();

    let mut acc = 0.0f64;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let mid = 0.5 * (lo + hi);
        // Highest-index shape covering the midpoint wins the segment.
        let mu = spans
            .iter()
            .filter(|&&(t0, t1, _)| t0 <= mid && mid <= t1)
            .max_by_key(|&&(_, _, i)| i)
            .map(|&(_, _, i)| shapes[i].mu);
        if let Some(mu) = mu {
            acc += mu * (hi - lo) * len;
        }
    }
    acc
}

fn view_image<F: Fn(usize, usize) -> f64 + Sync>(geom: &Geometry, f: F) -> Tensor<f64> {
    let mut data = vec![0.0f64; geom.nv * geom.nu];
    data.par_chunks_mut(geom.nu).enumerate().for_each(|(iv, row)| {
        for (iu, px) in row.iter_mut().enumerate() {
            *px = f(iu, iv);
        }
    });
    Tensor::from_vec(&[geom.nv, geom.nu], data).expect("projection image shape")
}

/// Cone-beam projections of a voxel grid, one `[nv, nu]` image of line
/// integrals per view. Linear in the volume values.
pub fn forward_project(vol: &Volume, geom: &Geometry) -> Result<Vec<Tensor<f64>>> {
    geom.validate()?;
    if vol.numel() == 0 {
        return Err(Error::invalid("forward_project: empty volume".to_string()));
    }
    if geom.sid <= vol.bounding_radius() {
        return Err(Error::invalid(format!(
            "forward_project: source orbit radius {} is inside the volume (bounding radius {})",
            geom.sid,
            vol.bounding_radius()
        )));
    }
    Ok((0..geom.n_views)
        .map(|view| {
            let s = geom.source(view);
            view_image(geom, |iu, iv| ray_integral(vol, s, geom.pixel_center(view, iu, iv)))
        })
        .collect())
}

/// Cone-beam projections of analytic shapes; exact chords, so oracle
/// phantoms (balls, slabs) project without voxelization error.
pub fn project_shapes(shapes: &[Shape], geom: &Geometry) -> Result<Vec<Tensor<f64>>> {
    geom.validate()?;
    Ok((0..geom.n_views)
        .map(|view| {
            let s = geom.source(view);
            view_image(geom, |iu, iv| {
                shapes_ray_integral(shapes, s, geom.pixel_center(view, iu, iv))
            })
        })
        .collect())
}

/// Threshold above which an implant-only line integral marks a pixel as
/// metal.
pub const METAL_TRACE_EPS: f64 = 1e-6;

/// Per-view binary metal masks: a pixel is metal iff the ray through it
/// crosses implant material. Depends only on the implants, never on
/// anatomy.
pub fn render_metal_mask(implants: &[Shape], geom: &Geometry) -> Result<Vec<MetalMask>> {
    geom.validate()?;
    if geom.nu != geom.nv {
        return Err(Error::invalid(format!(
            "render_metal_mask: detector must be square, got {}x{}",
            geom.nu, geom.nv
        )));
    }
    let projs = project_shapes(implants, geom)?;
    projs
        .iter()
        .map(|p| {
            let data = p.data().iter().map(|&v| u8::from(v > METAL_TRACE_EPS)).collect();
            MetalMask::new(geom.nu, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::super::ShapeKind;
    use super::*;

    fn ball(center: [f64; 3], r: f64, mu: f64) -> Shape {
        Shape { kind: ShapeKind::Ellipsoid { center, semi: [r, r, r] }, mu }
    }

    /// Impact-parameter chord formula, independent of the quadratic solver
    /// used by `ray_interval`.
    fn ball_chord(center: [f64; 3], r: f64, s: [f64; 3], p: [f64; 3]) -> f64 {
        let d = [p[0] - s[0], p[1] - s[1], p[2] - s[2]];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let n = [d[0] / len, d[1] / len, d[2] / len];
        let o = [center[0] - s[0], center[1] - s[1], center[2] - s[2]];
        let along = o[0] * n[0] + o[1] * n[1] + o[2] * n[2];
        let perp2 = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]) - along * along;
        if perp2 >= r * r {
            0.0
        } else {
            2.0 * (r * r - perp2).sqrt()
        }
    }

    #[test]
    fn ball_projection_matches_chord_formula_everywhere() {
        let geom = Geometry::desk();
        let (c, r, mu) = ([7.0, -11.0, 5.0], 40.0, 0.02);
        let projs = project_shapes(&[ball(c, r, mu)], &geom).unwrap();
        let mut checked = 0usize;
        for (view, img) in projs.iter().enumerate() {
            let s = geom.source(view);
            for iv in 0..geom.nv {
                for iu in 0..geom.nu {
                    let chord = ball_chord(c, r, s, geom.pixel_center(view, iu, iv));
                    let got = img.data()[iv * geom.nu + iu];
                    if chord == 0.0 {
                        assert_eq!(got, 0.0, "view {view} pixel ({iu},{iv}) misses the ball");
                    } else {
                        let rel = (got - mu * chord).abs() / (mu * chord);
                        assert!(rel <= 1e-3, "view {view} pixel ({iu},{iv}) rel err {rel}");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 10_000, "ball should cover many pixels, got {checked}");
    }

    #[test]
    fn central_ray_through_cube_gives_mu_times_side() {
        let geom = Geometry::desk();
        let (side, mu) = (80.0, 0.02);
        let cube = Shape { kind: ShapeKind::Slab { center: [0.0; 3], half: [side / 2.0; 3] }, mu };
        // Pixels adjacent to the detector center at view 0; the ray is
        // nearly axial, so the chord is the side length over cos of the
        // tiny fan angle, still within 1e-3 of side for the desk geometry.
        let img = &project_shapes(&[cube], &geom).unwrap()[0];
        for (iu, iv) in [(31, 31), (32, 31), (31, 32), (32, 32)] {
            let got = img.data()[iv * geom.nu + iu];
            let rel = (got - mu * side).abs() / (mu * side);
            assert!(rel <= 1e-3, "pixel ({iu},{iv}) rel err {rel}");
        }
    }

    #[test]
    fn voxel_walk_is_exact_on_a_voxel_aligned_slab() {
        let geom = Geometry::desk();
        // A full uniform grid is exactly the slab covering its extent.
        let mut vol = Volume::zeros([32, 32, 32], 4.0);
        vol.data.fill(0.05);
        let slab =
            Shape { kind: ShapeKind::Slab { center: [0.0; 3], half: vol.half_extent() }, mu: 0.05 };
        let grid = forward_project(&vol, &geom).unwrap();
        let exact = project_shapes(&[slab], &geom).unwrap();
        for view in 0..geom.n_views {
            for (g, e) in grid[view].data().iter().zip(exact[view].data()) {
                let tol = 1e-9 * (1.0 + e.abs());
                assert!((g - e).abs() <= tol, "view {view}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn voxel_walk_approximates_ball_to_within_voxelization_error() {
        let geom = Geometry::desk();
        let (r, mu) = (40.0, 0.02);
        let c = [0.0; 3];
        let shapes = [ball(c, r, mu)];
        let vol = Volume::from_shapes(&shapes, [64, 64, 64], 2.0);
        let img = &forward_project(&vol, &geom).unwrap()[0];
        let exact = &project_shapes(&shapes, &geom).unwrap()[0];
        // The voxelized surface sits within half a voxel diagonal of the
        // sphere; a ray crossing it at angle costheta to the normal picks
        // up a chord error of about diag / costheta per endpoint, where
        // costheta = chord / 2r. Grazing rays are excluded via the chord.
        let diag = vol.voxel_mm * 3.0f64.sqrt();
        let mut sum_err = 0.0f64;
        let mut hits = 0usize;
        let mut interior_worst = 0.0f64;
        for iv in 0..geom.nv {
            for iu in 0..geom.nu {
                let i = iv * geom.nu + iu;
                let err = (img.data()[i] - exact.data()[i]).abs();
                let chord = exact.data()[i] / mu;
                if chord > 0.0 {
                    sum_err += err;
                    hits += 1;
                }
                if chord >= r {
                    let bound = mu * 2.0 * diag * (2.0 * r) / chord;
                    assert!(err <= bound, "pixel ({iu},{iv}) err {err} > {bound}");
                    interior_worst = interior_worst.max(err);
                }
            }
        }
        let mean = sum_err / hits as f64;
        assert!(hits > 500);
        assert!(interior_worst > 0.0, "interior rays must exist");
        assert!(
            mean <= 0.75 * vol.voxel_mm * mu,
            "mean voxelization error {mean} is worse than 3/4 voxel"
        );
    }

    #[test]
    fn source_inside_volume_is_rejected() {
        let vol = Volume::zeros([64, 64, 64], 30.0);
        let err = forward_project(&vol, &Geometry::desk()).unwrap_err();
        assert!(err.to_string().contains("inside the volume"));
    }

    #[test]
    fn quarter_turn_of_a_symmetric_phantom_repeats_projections() {
        let geom = Geometry::desk();
        // A centered voxelized ball is invariant under 90 degree rotation
        // of the grid, so views a quarter turn apart must agree.
        let vol = Volume::from_shapes(&[ball([0.0; 3], 40.0, 0.02)], [64, 64, 64], 2.0);
        let projs = forward_project(&vol, &geom).unwrap();
        let quarter = 90.0 / geom.step_deg;
        assert_eq!(quarter.fract(), 0.0);
        for view in [0usize, 3, 11] {
            let a = projs[view].data();
            let b = projs[view + quarter as usize].data();
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn metal_mask_ignores_anatomy_and_tracks_implant_size() {
        let geom = Geometry::desk();
        let screw = |r: f64| Shape {
            kind: ShapeKind::Cylinder { a: [-5.0, 3.0, -12.0], b: [9.0, -4.0, 14.0], radius: r },
            mu: 0.3,
        };
        let small = render_metal_mask(&[screw(2.5)], &geom).unwrap();
        let large = render_metal_mask(&[screw(4.0)], &geom).unwrap();
        assert_eq!(small.len(), geom.n_views);
        let mut total = 0usize;
        for view in 0..geom.n_views {
            total += small[view].count();
            for i in 0..geom.nu * geom.nv {
                assert!(
                    large[view].data()[i] >= small[view].data()[i],
                    "growing the screw cleared a mask pixel at view {view}"
                );
            }
        }
        assert!(total > 0, "a metal screw must shadow some pixels");
        assert!(render_metal_mask(&[], &geom).unwrap().iter().all(|m| !m.any()));
    }

    #[test]
    fn convex_implant_casts_one_connected_shadow_per_view() {
        let geom = Geometry::desk();
        let screw = Shape {
            kind: ShapeKind::Cylinder { a: [0.0, -6.0, -15.0], b: [4.0, 7.0, 12.0], radius: 3.0 },
            mu: 0.3,
        };
        let masks = render_metal_mask(&[screw], &geom).unwrap();
        for (view, mask) in masks.iter().enumerate() {
            let side = mask.side();
            let mut seen = vec![false; mask.data().len()];
            let start = mask.data().iter().position(|&v| v == 1).expect("nonempty shadow");
            let mut stack = vec![start];
            seen[start] = true;
            let mut filled = 0usize;
            while let Some(i) = stack.pop() {
                filled += 1;
                let (r, c) = (i / side, i % side);
                let mut push = |rr: isize, cc: isize| {
                    if rr >= 0 && cc >= 0 && (rr as usize) < side && (cc as usize) < side {
                        let j = rr as usize * side + cc as usize;
                        if mask.data()[j] == 1 && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                };
                push(r as isize - 1, c as isize);
                push(r as isize + 1, c as isize);
                push(r as isize, c as isize - 1);
                push(r as isize, c as isize + 1);
            }
            assert_eq!(filled, mask.count(), "view {view}: metal shadow is disconnected");
        }
    }

    fn small_geom() -> Geometry {
        Geometry { nu: 12, nv: 12, pixel_mm: 24.0, n_views: 4, step_deg: 90.0, ..Geometry::desk() }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn projection_is_linear_in_the_volume(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let geom = small_geom();
            let n = [8, 8, 8];
            let mut v1 = Volume::zeros(n, 8.0);
            let mut v2 = Volume::zeros(n, 8.0);
            for v in v1.data.iter_mut() { *v = rng.random_range(0.0..0.1); }
            for v in v2.data.iter_mut() { *v = rng.random_range(0.0..0.1); }
            let (a, b) = (rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0));
            let mut combo = Volume::zeros(n, 8.0);
            for i in 0..combo.data.len() {
                combo.data[i] = a * v1.data[i] + b * v2.data[i];
            }
            let p1 = forward_project(&v1, &geom).unwrap();
            let p2 = forward_project(&v2, &geom).unwrap();
            let pc = forward_project(&combo, &geom).unwrap();
            for view in 0..geom.n_views {
                for i in 0..geom.nu * geom.nv {
                    let want = a * p1[view].data()[i] + b * p2[view].data()[i];
                    let got = pc[view].data()[i];
                    prop_assert!(
                        (want - got).abs() <= 1e-9 * (1.0 + want.abs()),
                        "view {} px {}: {} vs {}", view, i, got, want
                    );
                }
            }
        }
    }
}
