//! Nearest-neighbour retrieval in the learned code spaces: neighbours in
//! content space share pose, neighbours in style space share shape and
//! color, which the known factors let us check directly.
//!
//! ```bash
//! cargo run --example retrieval
//! ```

use dismo::data::{generate_dataset, load_dataset, DatasetSpec, SamplingMode};
use dismo::eval::{retrieve, RetrievalSpace};
use dismo::generator::GeneratorSpec;
use dismo::objectives::LossWeights;
use dismo::trainer::{train, TrainConfig};
use dismo::Result;

fn main() -> Result<()> {
    let out = std::path::PathBuf::from("target/example_out/retrieval");
    let data_dir = out.join("data");
    let spec = DatasetSpec {
        n_images: 64,
        image_size: 32,
        content_sampling: SamplingMode::Uniform,
        n_domains: 1,
        seed: 5,
    };
    generate_dataset(&spec, &data_dir)?;
    let dataset = load_dataset(&data_dir)?;

    let mut config = TrainConfig {
        steps: 400,
        batch_size: 8,
        seed: 5,
        weights: LossWeights::cs_only(),
        ..TrainConfig::default()
    };
    config.generator = GeneratorSpec {
        out_resolution: 32,
        channels: vec![32, 32, 16, 8],
        ..GeneratorSpec::default()
    };
    let (checkpoint, _) = train(config, &dataset, None)?;
    let table = checkpoint.embeddings()?;
    let factors = dataset.factors_required()?;

    let query = 0;
    let qf = &factors[query];
    println!(
        "query {query}: pose ({:.2}, {:.2}), shape {}, color {}",
        qf.x, qf.y, qf.shape_id, qf.color_id
    );
    for (space, name) in [
        (RetrievalSpace::Content, "content"),
        (RetrievalSpace::Style, "style"),
    ] {
        let hits = retrieve(&table, query, space, 5)?;
        println!("top-5 in {name} space:");
        for &h in &hits {
            let f = &factors[h];
            let pose_dist = ((f.x - qf.x).powi(2) + (f.y - qf.y).powi(2)).sqrt();
            println!(
                "  image {h:>3}: pose distance {pose_dist:.3}, shape {}, color {}",
                f.shape_id, f.color_id
            );
        }
    }
    Ok(())
}
