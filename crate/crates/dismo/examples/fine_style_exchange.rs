//! The multiple framework modulates the generator at every resolution
//! stage. Swapping only the last (finest) site's style code changes
//! appearance statistics such as color while the pose — the content —
//! stays where it is.
//!
//! ```bash
//! cargo run --example fine_style_exchange
//! ```

use dismo::data::{generate_dataset, load_dataset, DatasetSpec, SamplingMode};
use dismo::dismo::Framework;
use dismo::eval::frame_centroids;
use dismo::generator::GeneratorSpec;
use dismo::objectives::LossWeights;
use dismo::trainer::{train, TrainConfig};
use dismo::Result;
use ndarray::Axis;

fn main() -> Result<()> {
    let out = std::path::PathBuf::from("target/example_out/fine_style_exchange");
    let data_dir = out.join("data");
    let spec = DatasetSpec {
        n_images: 48,
        image_size: 32,
        content_sampling: SamplingMode::Uniform,
        n_domains: 1,
        seed: 11,
    };
    generate_dataset(&spec, &data_dir)?;
    let dataset = load_dataset(&data_dir)?;

    let mut config = TrainConfig {
        steps: 300,
        batch_size: 8,
        seed: 11,
        weights: LossWeights::cs_only(),
        ..TrainConfig::default()
    };
    config.dismo.framework = Framework::Multiple;
    config.generator = GeneratorSpec {
        framework: Framework::Multiple,
        out_resolution: 32,
        channels: vec![32, 32, 16, 8],
        ..GeneratorSpec::default()
    };
    let (checkpoint, _) = train(config, &dataset, None)?;
    let gen = checkpoint.generator()?;
    let table = checkpoint.embeddings()?;

    let sites = checkpoint.config.generator.channels.len() - 1;
    let (c, s_own) = table.lookup(&[0])?;
    let (_, s_other) = table.lookup(&[1])?;

    let base_styles = vec![s_own.clone(); sites];
    let mut swapped_styles = base_styles.clone();
    swapped_styles[sites - 1] = s_other; // exchange only the finest site

    let base = gen.generate_mixed(&c, &base_styles)?;
    let swapped = gen.generate_mixed(&c, &swapped_styles)?;

    let mean_rgb = |img: &ndarray::ArrayD<f32>| -> Vec<f32> {
        (0..3)
            .map(|ch| img.index_axis(Axis(0), 0).index_axis(Axis(0), ch).mean().unwrap())
            .collect()
    };
    let rgb_a = mean_rgb(&base);
    let rgb_b = mean_rgb(&swapped);
    println!("mean RGB with own style:      {rgb_a:?}");
    println!("mean RGB with swapped finest: {rgb_b:?}");
    let color_shift: f32 = rgb_a
        .iter()
        .zip(&rgb_b)
        .map(|(a, b)| (a - b).abs())
        .sum();
    println!("total mean-color shift: {color_shift:.4}");

    let cen_a = frame_centroids(&base)?[0];
    let cen_b = frame_centroids(&swapped)?[0];
    match (cen_a, cen_b) {
        (Some((ax, ay)), Some((bx, by))) => {
            let moved = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
            println!("foreground centroid moved {moved:.2} px — content held still");
        }
        _ => println!("foreground too faint at this tiny budget to locate a centroid"),
    }
    Ok(())
}
