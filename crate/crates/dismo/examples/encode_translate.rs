//! Amortized inference: after latent optimization, train convolutional
//! encoders to regress images onto their optimized codes, then translate
//! one image's content into another image's style.
//!
//! ```bash
//! cargo run --example encode_translate
//! ```

use dismo::data::{array_to_image, generate_dataset, load_dataset, DatasetSpec, SamplingMode};
use dismo::encoders::{encoder_l1, train_encoders, translate, zero_predictor_l1};
use dismo::generator::GeneratorSpec;
use dismo::objectives::LossWeights;
use dismo::trainer::{train, TrainConfig};
use dismo::Result;

fn main() -> Result<()> {
    let out = std::path::PathBuf::from("target/example_out/encode_translate");
    let data_dir = out.join("data");
    let spec = DatasetSpec {
        n_images: 48,
        image_size: 32,
        content_sampling: SamplingMode::Uniform,
        n_domains: 1,
        seed: 6,
    };
    generate_dataset(&spec, &data_dir)?;
    let dataset = load_dataset(&data_dir)?;

    let mut config = TrainConfig {
        steps: 300,
        batch_size: 8,
        seed: 6,
        weights: LossWeights::cs_only(),
        ..TrainConfig::default()
    };
    config.generator = GeneratorSpec {
        out_resolution: 32,
        channels: vec![32, 32, 16, 8],
        ..GeneratorSpec::default()
    };
    let (checkpoint, _) = train(config, &dataset, None)?;
    let gen = checkpoint.generator()?;
    let table = checkpoint.embeddings()?;

    // post-hoc encoder regression against the frozen tables
    let enc = train_encoders(&dataset, &table, 600, 2e-3, 16, 6)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let zero = zero_predictor_l1(&table, &all)?;
    let fitted = encoder_l1(&enc, &dataset, &table)?;
    println!("zero-predictor L1 {zero:.4}; trained encoder L1 {fitted:.4}");
    assert!(fitted < zero, "encoders must beat the trivial baseline");

    // held-out style of translation: content of image 0, style of image 1
    std::fs::create_dir_all(&out).map_err(|e| dismo::DismoError::io(&out, e))?;
    let result = translate(&gen, &enc, &dataset.images[0], &dataset.images[1])?;
    let path = out.join("translation.png");
    array_to_image(&result)
        .save(&path)
        .map_err(dismo::DismoError::Image)?;
    println!("wrote {}", path.display());

    // self-translation approximates reconstruction
    let selft = translate(&gen, &enc, &dataset.images[0], &dataset.images[0])?;
    let err = (&selft - &dataset.images[0]).mapv(|v| v * v).mean().unwrap();
    println!("self-translation pixel MSE against the original: {err:.4}");
    Ok(())
}
