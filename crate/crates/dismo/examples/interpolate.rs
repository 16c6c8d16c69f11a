//! Interpolate between two images in code space and write the frames as a
//! strip: along the content axis the sprite moves, along the style axis
//! its identity morphs while the pose stays put.
//!
//! ```bash
//! cargo run --example interpolate
//! ```

use dismo::data::{array_to_image, generate_dataset, load_dataset, DatasetSpec, SamplingMode};
use dismo::eval::{interpolate, strip_canvas, InterpolationAxis};
use dismo::generator::GeneratorSpec;
use dismo::objectives::LossWeights;
use dismo::trainer::{train, TrainConfig};
use dismo::Result;

fn main() -> Result<()> {
    let out = std::path::PathBuf::from("target/example_out/interpolate");
    let data_dir = out.join("data");
    let spec = DatasetSpec {
        n_images: 48,
        image_size: 32,
        content_sampling: SamplingMode::Uniform,
        n_domains: 1,
        seed: 4,
    };
    generate_dataset(&spec, &data_dir)?;
    let dataset = load_dataset(&data_dir)?;

    let mut config = TrainConfig {
        steps: 300,
        batch_size: 8,
        seed: 4,
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

    std::fs::create_dir_all(&out).map_err(|e| dismo::DismoError::io(&out, e))?;
    for (axis, name) in [
        (InterpolationAxis::Content, "content"),
        (InterpolationAxis::Style, "style"),
        (InterpolationAxis::Both, "both"),
    ] {
        let frames = interpolate(&gen, &table, (0, 5), axis, 8)?;
        let strip = strip_canvas(&frames)?;
        let path = out.join(format!("interp_{name}.png"));
        array_to_image(&strip)
            .save(&path)
            .map_err(dismo::DismoError::Image)?;
        println!("wrote {}", path.display());
    }
    println!("each strip blends image 0 toward image 5 along one latent axis");
    Ok(())
}
