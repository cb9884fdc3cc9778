//! Fixtures shared by the benchmarks in `benches/`.

use patchfield::attack::{initial_patches, AttackConfig};
use patchfield::detector::{Detector, DetectorConfig};
use patchfield::frame::Frame;
use patchfield::placement::Patch;
use patchfield::scenegen::{SceneSpec, Split};

/// A randomly initialized default-size detector.
pub fn detector() -> Detector {
    Detector::random(DetectorConfig::default(), 1).expect("default detector config is valid")
}

/// Default-scene test frames with both screens visible.
pub fn frames(n: usize) -> Vec<Frame> {
    let scene = SceneSpec {
        frames_per_degree: 0.5,
        ..SceneSpec::default()
    };
    scene
        .generate_dataset(Split::Test, 1)
        .expect("default scene renders")
        .into_iter()
        .filter(|f| f.screens.len() == 2)
        .take(n)
        .collect()
}

pub fn patches() -> Vec<Patch> {
    initial_patches(2, &AttackConfig::default())
}
