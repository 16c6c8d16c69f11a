// quick probe-skill sanity: codes = pose + small noise
use dismo::eval::{leakage_metric, LeakageProtocol};
use dismo::latent::EmbeddingTable;
use dismo::data::{sample_factors, DatasetSpec, SamplingMode};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

fn main() {
    let spec = DatasetSpec { n_images: 256, image_size: 32, content_sampling: SamplingMode::Normal, n_domains: 1, seed: 42 };
    let factors: Vec<_> = (0..256).map(|i| sample_factors(&spec, i)).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    // content = [x, y, rot, noise...] scaled arbitrarily
    let content = Array2::from_shape_fn((256, 16), |(i, j)| match j {
        0 => factors[i].x * 7.0,
        1 => factors[i].y * 7.0,
        2 => factors[i].rot,
        _ => rng.random::<f32>() - 0.5,
    });
    let style = Array2::from_shape_fn((256, 8), |_| rng.random::<f32>() - 0.5);
    let table = EmbeddingTable { content, style };
    let mae_c = leakage_metric(&table, &factors, LeakageProtocol::RegressPoseFromContent, 7).unwrap();
    let mae_s = leakage_metric(&table, &factors, LeakageProtocol::RegressPoseFromStyle, 7).unwrap();
    println!("pose from oracle content: {mae_c:.4}; from noise style: {mae_s:.4}");
}
