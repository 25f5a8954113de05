//! Filtered backprojection for the circular cone-beam orbit: cosine
//! weighting, ramp filtering of detector rows, and distance-weighted
//! backprojection onto a voxel grid.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{Geometry, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Attenuation of water (mm^-1) at the simulated beam quality; the zero
/// point of the Hounsfield scale.
pub const MU_WATER: f64 = 0.02;

/// Hounsfield units from attenuation.
pub fn hu_from_mu(mu: f64) -> f64 {
    1000.0 * (mu - MU_WATER) / MU_WATER
}

/// Ramp filter sampled in the spatial domain: 1/(4 du^2) at the center,
/// -1/(pi n du)^2 at odd offsets, zero at even offsets. Band-limits the
/// ideal ramp at the detector Nyquist frequency, which smooths the
/// response instead of amplifying sampling noise.
fn ramp_kernel(n: usize, du: f64) -> Vec<f64> {
    let mut h = vec![0.0f64; n];
    h[0] = 1.0 / (4.0 * du * du);
    let mut k = 1usize;
    while k < n {
        let v = -1.0 / (std::f64::consts::PI * k as f64 * du).powi(2);
        h[k] = v;
        k += 2;
    }
    h
}

struct RowFilter {
    len: usize,
    kernel_fft: Vec<Complex64>,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl RowFilter {
    fn new(nu: usize, du: f64) -> Self {
        // Zero-pad to at least 2 nu so circular convolution equals linear
        // convolution over the detector row.
        let len = (2 * nu).next_power_of_two();
        let h = ramp_kernel(nu, du);
        let mut kern = vec![Complex64::new(0.0, 0.0); len];
        kern[0] = Complex64::new(h[0], 0.0);
        for k in 1..nu {
            kern[k] = Complex64::new(h[k], 0.0);
            kern[len - k] = Complex64::new(h[k], 0.0);
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        fwd.process(&mut kern);
        RowFilter { len, kernel_fft: kern, fwd, inv }
    }

    /// Convolve one detector row with the ramp kernel, scaled by the
    /// sample spacing so the discrete sum approximates the continuous
    /// filter.
    fn apply(&self, row: &[f64], du: f64, out: &mut [f64]) {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.len];
        for (b, &v) in buf.iter_mut().zip(row) {
            b.re = v;
        }
        self.fwd.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel_fft) {
            *b *= k;
        }
        self.inv.process(&mut buf);
        let scale = du / self.len as f64;
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re * scale;
        }
    }
}

/// Reconstruct a voxel grid of attenuation values from a full-circle set
/// of cone-beam projections. Needs at least 8 views covering the whole
/// turn; the result is exact only in the central plane and approximate
/// away from it, as is inherent to the circular orbit.
pub fn fdk_reconstruct(
    projections: &[Tensor<f64>],
    geom: &Geometry,
    n: [usize; 3],
    voxel_mm: f64,
) -> Result<Volume> {
    geom.validate()?;
    if projections.len() != geom.n_views {
        return Err(Error::invalid(format!(
            "fdk: got {} projections for {} views",
            projections.len(),
            geom.n_views
        )));
    }
    if geom.n_views < 8 {
        return Err(Error::invalid(format!(
            "fdk: {} views cannot support reconstruction, need at least 8",
            geom.n_views
        )));
    }
    let coverage = geom.n_views as f64 * geom.step_deg;
    if coverage < 360.0 - 1e-6 {
        return Err(Error::invalid(format!(
            "fdk: views cover {coverage} degrees, need a full turn"
        )));
    }
    for (i, p) in projections.iter().enumerate() {
        if p.shape() != [geom.nv, geom.nu] {
            return Err(Error::shape(
                "fdk",
                format!("projection {i} is {:?}, expected [{}, {}]", p.shape(), geom.nv, geom.nu),
            ));
        }
    }
    if n.iter().any(|&k| k == 0) || voxel_mm <= 0.0 {
        return Err(Error::invalid("fdk: empty output grid".to_string()));
    }

    // Detector coordinates rescaled to the isocenter plane.
    let du = geom.pixel_mm * geom.sid / geom.sdd;
    let filter = RowFilter::new(geom.nu, du);
    let u_at = |iu: usize| (iu as f64 + 0.5 - geom.nu as f64 / 2.0) * du;
    let v_at = |iv: usize| (iv as f64 + 0.5 - geom.nv as f64 / 2.0) * du;

    // Cosine-weight and ramp-filter every row of every view.
    let filtered: Vec<Vec<f64>> = (0..geom.n_views)
        .into_par_iter()
        .map(|view| {
            let p = projections[view].data();
            let mut out = vec![0.0f64; geom.nv * geom.nu];
            let mut row = vec![0.0f64; geom.nu];
            for iv in 0..geom.nv {
                let v = v_at(iv);
                for iu in 0..geom.nu {
                    let u = u_at(iu);
                    let w = geom.sid / (geom.sid * geom.sid + u * u + v * v).sqrt();
                    row[iu] = p[iv * geom.nu + iu] * w;
                }
                filter.apply(&row, du, &mut out[iv * geom.nu..(iv + 1) * geom.nu]);
            }
            out
        })
        .collect();

    let trig: Vec<(f64, f64)> = (0..geom.n_views)
        .map(|view| {
            let b = geom.angle(view);
            (b.cos(), b.sin())
        })
        .collect();
    let half_step = 0.5 * geom.step_deg.to_radians();

    let mut vol = Volume::zeros(n, voxel_mm);
    let centers = |i: usize, k: usize| (i as f64 + 0.5 - k as f64 / 2.0) * voxel_mm;
    let slice = n[0] * n[1];
    let (nu, nv) = (geom.nu as isize, geom.nv as isize);
    vol.data.par_chunks_mut(slice).enumerate().for_each(|(z, plane)| {
        let pz = centers(z, n[2]);
        for y in 0..n[1] {
            let py = centers(y, n[1]);
            for x in 0..n[0] {
                let px = centers(x, n[0]);
                let mut acc = 0.0f64;
                for view in 0..geom.n_views {
                    let (cb, sb) = trig[view];
                    let depth = geom.sid + px * cb + py * sb;
                    if depth <= 0.0 {
                        continue;
                    }
                    let mag = geom.sid / depth;
                    let iu = (-px * sb + py * cb) * mag / du + geom.nu as f64 / 2.0 - 0.5;
                    let iv = pz * mag / du + geom.nv as f64 / 2.0 - 0.5;
                    if iu < 0.0 || iu > (nu - 1) as f64 || iv < 0.0 || iv > (nv - 1) as f64 {
                        continue;
                    }
                    let (u0, v0) = (iu.floor(), iv.floor());
                    let (fu, fv) = (iu - u0, iv - v0);
                    let (u0, v0) = (u0 as usize, v0 as usize);
                    let u1 = (u0 + 1).min(geom.nu - 1);
                    let v1 = (v0 + 1).min(geom.nv - 1);
                    let q = &filtered[view];
                    let sample = (1.0 - fv)
                        * ((1.0 - fu) * q[v0 * geom.nu + u0] + fu * q[v0 * geom.nu + u1])
                        + fv * ((1.0 - fu) * q[v1 * geom.nu + u0] + fu * q[v1 * geom.nu + u1]);
                    acc += mag * mag * sample;
                }
                plane[y * n[0] + x] = acc * half_step;
            }
        }
    });
    Ok(vol)
}
