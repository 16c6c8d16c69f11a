//! Render a content-by-style analogy grid from a quickly trained model:
//! row r, column c shows the generator driven by column c's content code
//! and row r's style code, with the source images on the margins.
//!
//! ```bash
//! cargo run --example analogy_grid
//! ```

use dismo::data::{array_to_image, generate_dataset, load_dataset, DatasetSpec, SamplingMode};
use dismo::eval::analogy_grid;
use dismo::generator::GeneratorSpec;
use dismo::objectives::LossWeights;
use dismo::trainer::{train, TrainConfig};
use dismo::Result;

fn main() -> Result<()> {
    let out = std::path::PathBuf::from("target/example_out/analogy_grid");
    let data_dir = out.join("data");
    let spec = DatasetSpec {
        n_images: 48,
        image_size: 32,
        content_sampling: SamplingMode::Uniform,
        n_domains: 1,
        seed: 3,
    };
    generate_dataset(&spec, &data_dir)?;
    let dataset = load_dataset(&data_dir)?;

    let mut config = TrainConfig {
        steps: 300,
        batch_size: 8,
        seed: 3,
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
    let canvas = analogy_grid(&gen, &table, &dataset, &[0, 1, 2, 3], &[4, 5, 6])?;
    let path = out.join("analogy.png");
    std::fs::create_dir_all(&out).map_err(|e| dismo::DismoError::io(&out, e))?;
    array_to_image(&canvas)
        .save(&path)
        .map_err(dismo::DismoError::Image)?;
    println!(
        "wrote a {}x{} analogy canvas to {}",
        canvas.shape()[2],
        canvas.shape()[1],
        path.display()
    );
    println!("columns share content (pose), rows share style (shape and color)");
    Ok(())
}
