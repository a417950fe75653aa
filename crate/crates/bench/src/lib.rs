//! Fixtures shared by the benchmarks: a default-size model and random
//! frame matrices at target lengths given in seconds.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylebook_core::diffusion::standard_normal;
use stylebook_core::memory::KNN_FRAME_RATE;
use stylebook_core::model::{Model, ModelConfig};

/// Frames in `seconds` of audio at the corpus frame rate.
pub fn frames_for(seconds: f64) -> usize {
    (seconds * KNN_FRAME_RATE).round() as usize
}

pub fn random_frames(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    standard_normal((rows, cols), &mut rng)
}

/// Unit ids cycling through the codebook.
pub fn unit_sequence(len: usize, num_units: usize) -> Vec<usize> {
    (0..len).map(|i| (i * 7 + i / 5) % num_units).collect()
}

pub fn default_model() -> Model<f32> {
    Model::new(&ModelConfig::default(), 0).expect("default config is valid")
}
