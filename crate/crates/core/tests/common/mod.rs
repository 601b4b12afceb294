#![allow(dead_code)]

use pointfuse_core::degrade::{make_pair, synth_scene, DegradationSpec, SamplePair, SceneKind};
use pointfuse_core::model::{Model, ModelConfig, PreparedInput};
use pointfuse_tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        c1: 3,
        c2: 3,
        c_local: 4,
        z_dim: 4,
        d_k: 3,
        local_widths: [4, 4],
        widths: [5, 5, 5],
        ..ModelConfig::default()
    }
}

pub fn scene_pair(
    kind: SceneKind,
    n_gt: usize,
    image: usize,
    spec: &DegradationSpec,
) -> SamplePair {
    let (gt, img, cam) = synth_scene(kind, n_gt, 7, image).unwrap();
    make_pair(&gt, &img, &cam, spec).unwrap()
}

pub fn toy_model(cfg: &ModelConfig, seed: u64) -> (Model, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(cfg, &mut store, &mut rng).unwrap();
    (model, store)
}

/// Replaces every parameter with N(0, 0.5²) so no path is trivially zero.
pub fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.tensors_mut() {
        let n = t.numel();
        let vals: Vec<f32> = pointfuse_tensor::rng::standard_normal(&mut rng, n);
        t.data_mut()
            .iter_mut()
            .zip(vals)
            .for_each(|(d, v)| *d = 0.5 * v);
    }
}

pub fn prepared(cfg: &ModelConfig, pair: &SamplePair) -> PreparedInput {
    PreparedInput::new(cfg, &pair.input, &pair.image, &pair.camera).unwrap()
}
