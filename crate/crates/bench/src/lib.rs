//! Deterministic fixtures shared by the benchmark targets.

use mcfill_core::sim::phantom::{build_scene, PhantomSpec, Scene};
use mcfill_core::train::Sample;
use mcfill_core::{EncoderConfig, Geometry, ModelConfig, Tensor, Variant};

/// Desk-scale scene used by every benchmark.
pub fn bench_scene() -> Scene {
    build_scene(&PhantomSpec::default(), 42).expect("seed 42 places implants")
}

/// Desk-scale network at the given stage-1 width.
pub fn bench_model(embed_dim: usize) -> ModelConfig {
    ModelConfig::new(
        EncoderConfig { embed_dim, ..EncoderConfig::default() },
        Variant::Neighborhood { window: 16 },
    )
}

/// First view of the bench scene as a normalized training sample.
pub fn bench_sample() -> Sample<f32> {
    let geom = Geometry::desk();
    let scene = bench_scene();
    let proj = &scene.anatomy_projections(&geom).expect("projects")[0];
    let mask = scene.metal_masks(&geom).expect("renders masks").remove(0);
    let side = geom.nu;
    let data = proj.data().iter().map(|&v| (v / 5.0) as f32).collect();
    let proj = Tensor::from_vec(&[side, side, 1], data).expect("same element count");
    Sample::new(proj, mask).expect("shapes agree")
}
