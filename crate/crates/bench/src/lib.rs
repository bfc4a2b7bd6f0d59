//! Shared fixtures for the benches under `benches/`.

use facemotion::ar::{ArConfig, ArModel, FeatureNorm};
use facemotion::codec::{CodecConfig, CodecModel};
use facemotion::dataset::{synth_generate, SynthClip, SynthConfig};

/// Untrained desk-scale models; latency does not depend on the weights.
pub fn desk_models(seed: u64) -> (CodecModel, ArModel) {
    let cc = CodecConfig::desk();
    let codec = CodecModel::new(&cc, seed).expect("desk codec config is valid");
    let mut ar = ArModel::new(&ArConfig::desk(), &cc, seed + 1).expect("desk AR config is valid");
    ar.norm = FeatureNorm::identity(ar.config().feat_dim);
    (codec, ar)
}

/// One synthetic clip of `seconds` seconds.
pub fn clip(seconds: f64) -> SynthClip {
    let frames = (seconds * 25.0).round() as usize;
    synth_generate(3, 1, frames, &SynthConfig::default()).expect("synthetic clip").remove(0)
}
