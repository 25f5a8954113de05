//! On-disk projection sets and 8-bit image export.
//!
//! A set is a directory: `geometry.txt` (key=value), `proj_###.mtns` (f32
//! line integrals, one per view) and `mask_###.mtns` (u8 metal masks).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::Geometry;
use crate::error::{Error, Result};
use crate::metal::MetalMask;
use crate::tensor::io as tio;
use crate::tensor::Tensor;

/// Display window for projection line integrals.
pub const PROJ_WINDOW: (f64, f64) = (2.5, 5.0);
/// Display window for reconstructed Hounsfield values.
pub const HU_WINDOW: (f64, f64) = (-1000.0, 1000.0);

/// A complete scan on disk or in memory: geometry, per-view line
/// integrals (f32, unnormalized), per-view metal masks, and the scale
/// that maps line integrals into the network's [0, 1] input range.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub geom: Geometry,
    pub norm_scale: f64,
    pub projections: Vec<Tensor<f32>>,
    pub masks: Vec<MetalMask>,
}

impl ProjectionSet {
    pub fn new(
        geom: Geometry,
        norm_scale: f64,
        projections: Vec<Tensor<f32>>,
        masks: Vec<MetalMask>,
    ) -> Result<Self> {
        geom.validate()?;
        if geom.nu != geom.nv {
            return Err(Error::invalid(format!(
                "projection set: detector must be square, got {}x{}",
                geom.nu, geom.nv
            )));
        }
        if !(norm_scale > 0.0) {
            return Err(Error::invalid(format!("projection set: norm_scale {norm_scale}")));
        }
        if projections.len() != geom.n_views || masks.len() != geom.n_views {
            return Err(Error::invalid(format!(
                "projection set: {} projections and {} masks for {} views",
                projections.len(),
                masks.len(),
                geom.n_views
            )));
        }
        for (i, p) in projections.iter().enumerate() {
            if p.shape() != [geom.nv, geom.nu] {
                return Err(Error::shape(
                    "projection set",
                    format!("view {i} is {:?}, expected [{}, {}]", p.shape(), geom.nv, geom.nu),
                ));
            }
        }
        for (i, m) in masks.iter().enumerate() {
            if m.side() != geom.nu {
                return Err(Error::shape(
                    "projection set",
                    format!("mask {i} side {} does not match detector {}", m.side(), geom.nu),
                ));
            }
        }
        Ok(ProjectionSet { geom, norm_scale, projections, masks })
    }

    /// Build from freshly simulated f64 projections, rounding to the f32
    /// storage width so in-memory and on-disk values agree exactly.
    pub fn from_simulation(
        geom: Geometry,
        norm_scale: f64,
        projections: &[Tensor<f64>],
        masks: Vec<MetalMask>,
    ) -> Result<Self> {
        let projections = projections
            .iter()
            .map(|p| {
                Tensor::from_vec(p.shape(), p.data().iter().map(|&v| v as f32).collect())
                    .expect("same element count")
            })
            .collect();
        ProjectionSet::new(geom, norm_scale, projections, masks)
    }

    /// Projection `view` scaled into the network input range.
    pub fn normalized(&self, view: usize) -> Tensor<f32> {
        let p = &self.projections[view];
        let s = self.norm_scale as f32;
        Tensor::from_vec(p.shape(), p.data().iter().map(|&v| v / s).collect())
            .expect("same element count")
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = String::new();
        let g = &self.geom;
        let _ = writeln!(text, "sdd={:?}", g.sdd);
        let _ = writeln!(text, "sid={:?}", g.sid);
        let _ = writeln!(text, "n_views={}", g.n_views);
        let _ = writeln!(text, "step_deg={:?}", g.step_deg);
        let _ = writeln!(text, "nu={}", g.nu);
        let _ = writeln!(text, "nv={}", g.nv);
        let _ = writeln!(text, "pixel_mm={:?}", g.pixel_mm);
        let _ = writeln!(text, "norm_scale={:?}", self.norm_scale);
        fs::write(dir.join("geometry.txt"), text)?;
        for (i, p) in self.projections.iter().enumerate() {
            tio::write_tensor(&dir.join(format!("proj_{i:03}.mtns")), p)?;
        }
        for (i, m) in self.masks.iter().enumerate() {
            tio::write_u8(
                &dir.join(format!("mask_{i:03}.mtns")),
                &[m.side(), m.side()],
                m.data(),
            )?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("geometry.txt"))?;
        let (geom, norm_scale) = parse_geometry_text(&text)?;
        let mut projections = Vec::with_capacity(geom.n_views);
        let mut masks = Vec::with_capacity(geom.n_views);
        for i in 0..geom.n_views {
            let p = tio::read(&dir.join(format!("proj_{i:03}.mtns")))?.into_f32()?;
            let (shape, data) = tio::read(&dir.join(format!("mask_{i:03}.mtns")))?.into_u8()?;
            if shape.len() != 2 || shape[0] != shape[1] {
                return Err(Error::format(
                    "projection set",
                    format!("mask {i} has shape {shape:?}, expected square"),
                ));
            }
            projections.push(p);
            masks.push(MetalMask::new(shape[0], data)?);
        }
        ProjectionSet::new(geom, norm_scale, projections, masks)
    }
}

fn parse_geometry_text(text: &str) -> Result<(Geometry, f64)> {
    let mut sdd = None;
    let mut sid = None;
    let mut n_views = None;
    let mut step_deg = None;
    let mut nu = None;
    let mut nv = None;
    let mut pixel_mm = None;
    let mut norm_scale = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format("geometry.txt", format!("line {}: no '='", ln + 1)))?;
        let fval = || {
            value.trim().parse::<f64>().map_err(|_| {
                Error::format("geometry.txt", format!("{key}: bad number {value:?}"))
            })
        };
        let ival = || {
            value.trim().parse::<usize>().map_err(|_| {
                Error::format("geometry.txt", format!("{key}: bad integer {value:?}"))
            })
        };
        let slot: &mut Option<f64> = match key.trim() {
            "sdd" => &mut sdd,
            "sid" => &mut sid,
            "step_deg" => &mut step_deg,
            "pixel_mm" => &mut pixel_mm,
            "norm_scale" => &mut norm_scale,
            "n_views" => {
                set_once(&mut n_views, ival()? as f64, "n_views")?;
                continue;
            }
            "nu" => {
                set_once(&mut nu, ival()? as f64, "nu")?;
                continue;
            }
            "nv" => {
                set_once(&mut nv, ival()? as f64, "nv")?;
                continue;
            }
            other => {
                return Err(Error::format("geometry.txt", format!("unknown key {other:?}")));
            }
        };
        set_once(slot, fval()?, key.trim())?;
    }
    let need = |v: Option<f64>, key: &str| {
        v.ok_or_else(|| Error::format("geometry.txt", format!("missing key {key:?}")))
    };
    let geom = Geometry {
        sdd: need(sdd, "sdd")?,
        sid: need(sid, "sid")?,
        n_views: need(n_views, "n_views")? as usize,
        step_deg: need(step_deg, "step_deg")?,
        nu: need(nu, "nu")? as usize,
        nv: need(nv, "nv")? as usize,
        pixel_mm: need(pixel_mm, "pixel_mm")?,
    };
    Ok((geom, need(norm_scale, "norm_scale")?))
}

fn set_once(slot: &mut Option<f64>, v: f64, key: &str) -> Result<()> {
    if slot.replace(v).is_some() {
        return Err(Error::format("geometry.txt", format!("duplicate key {key:?}")));
    }
    Ok(())
}

fn window_to_bytes<T: crate::tensor::Scalar>(img: &Tensor<T>, lo: f64, hi: f64) -> Result<(usize, usize, Vec<u8>)> {
    if img.rank() != 2 {
        return Err(Error::shape("image export", format!("rank {} image", img.rank())));
    }
    if !(hi > lo) {
        return Err(Error::invalid(format!("image export: window [{lo}, {hi}]")));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let bytes = img
        .data()
        .iter()
        .map(|&v| {
            let t = ((v.to_f64() - lo) / (hi - lo)).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect();
    Ok((h, w, bytes))
}

/// 8-bit binary PGM with values windowed to `[lo, hi]`.
pub fn write_pgm<T: crate::tensor::Scalar>(
    path: &Path,
    img: &Tensor<T>,
    lo: f64,
    hi: f64,
) -> Result<()> {
    let (h, w, bytes) = window_to_bytes(img, lo, hi)?;
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// 8-bit grayscale PNG with values windowed to `[lo, hi]`.
pub fn write_png<T: crate::tensor::Scalar>(
    path: &Path,
    img: &Tensor<T>,
    lo: f64,
    hi: f64,
) -> Result<()> {
    let (h, w, bytes) = window_to_bytes(img, lo, hi)?;
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::format("png", e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny_set(seed: u64) -> ProjectionSet {
        let geom = Geometry { nu: 8, nv: 8, pixel_mm: 37.12, n_views: 10, step_deg: 36.0, ..Geometry::desk() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projections = (0..geom.n_views)
            .map(|_| {
                Tensor::from_vec(
                    &[8, 8],
                    (0..64).map(|_| rng.random_range(0.0f32..5.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let masks = (0..geom.n_views)
            .map(|_| {
                MetalMask::new(8, (0..64).map(|_| u8::from(rng.random_range(0.0..1.0) < 0.2)).collect())
                    .unwrap()
            })
            .collect();
        ProjectionSet::new(geom, 5.0, projections, masks).unwrap()
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        entries
            .into_iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect()
    }

    #[test]
    fn directory_roundtrip_preserves_everything() {
        let set = tiny_set(3);
        let dir = tempfile::tempdir().unwrap();
        set.write_dir(dir.path()).unwrap();
        let back = ProjectionSet::read_dir(dir.path()).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn writing_twice_is_byte_identical() {
        let set = tiny_set(4);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        set.write_dir(d1.path()).unwrap();
        set.write_dir(d2.path()).unwrap();
        assert_eq!(dir_bytes(d1.path()), dir_bytes(d2.path()));
    }

    #[test]
    fn geometry_text_rejects_unknown_duplicate_and_missing_keys() {
        let set = tiny_set(5);
        let dir = tempfile::tempdir().unwrap();
        set.write_dir(dir.path()).unwrap();
        let path = dir.path().join("geometry.txt");
        let good = fs::read_to_string(&path).unwrap();

        fs::write(&path, format!("{good}wombats=3\n")).unwrap();
        let err = ProjectionSet::read_dir(dir.path()).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");

        fs::write(&path, format!("{good}sdd=9.0\n")).unwrap();
        let err = ProjectionSet::read_dir(dir.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        let trimmed: String =
            good.lines().filter(|l| !l.starts_with("norm_scale")).map(|l| format!("{l}\n")).collect();
        fs::write(&path, trimmed).unwrap();
        let err = ProjectionSet::read_dir(dir.path()).unwrap_err();
        assert!(err.to_string().contains("norm_scale"), "{err}");
    }

    #[test]
    fn missing_view_file_fails_the_read() {
        let set = tiny_set(6);
        let dir = tempfile::tempdir().unwrap();
        set.write_dir(dir.path()).unwrap();
        fs::remove_file(dir.path().join("proj_007.mtns")).unwrap();
        assert!(ProjectionSet::read_dir(dir.path()).is_err());
    }

    #[test]
    fn normalization_divides_by_the_stored_scale() {
        let set = tiny_set(7);
        let n = set.normalized(2);
        for (a, b) in n.data().iter().zip(set.projections[2].data()) {
            assert_eq!(*a, b / 5.0);
        }
    }

    #[test]
    fn pgm_export_windows_and_clamps() {
        let img = Tensor::<f64>::from_vec(&[2, 2], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, &img, 0.0, 1.0).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8, 0, 128, 255]);
    }

    #[test]
    fn png_export_roundtrips_through_the_decoder() {
        let img = Tensor::<f32>::from_vec(&[2, 3], vec![2.5, 3.0, 3.75, 5.0, 6.0, 2.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        write_png(&path, &img, PROJ_WINDOW.0, PROJ_WINDOW.1).unwrap();
        let back = image::open(&path).unwrap().into_luma8();
        assert_eq!(back.dimensions(), (3, 2));
        assert_eq!(back.as_raw(), &vec![0u8, 51, 128, 255, 255, 0]);
    }
}
