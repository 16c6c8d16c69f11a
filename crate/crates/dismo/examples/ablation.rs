//! Compare constraint solutions on the same dataset: in-path instance
//! normalization versus no constraint versus plain concatenation of the
//! two codes, scored by the content-transfer metric (lower is better).
//!
//! This is a fast, reduced version of the `dismo ablate` subcommand.
//!
//! ```bash
//! cargo run --example ablation
//! ```

use dismo::data::{generate_dataset, load_dataset, DatasetSpec, SamplingMode};
use dismo::dismo::Solution;
use dismo::eval::{content_transfer_metric, Distance};
use dismo::generator::GeneratorSpec;
use dismo::objectives::LossWeights;
use dismo::trainer::{train, TrainConfig};
use dismo::Result;

fn main() -> Result<()> {
    let out = std::path::PathBuf::from("target/example_out/ablation");
    let data_dir = out.join("data");
    let spec = DatasetSpec {
        n_images: 64,
        image_size: 32,
        content_sampling: SamplingMode::Normal,
        n_domains: 1,
        seed: 9,
    };
    generate_dataset(&spec, &data_dir)?;
    let dataset = load_dataset(&data_dir)?;

    let base = {
        let mut c = TrainConfig {
            steps: 300,
            batch_size: 8,
            seed: 9,
            weights: LossWeights::cs_only(),
            ..TrainConfig::default()
        };
        c.generator = GeneratorSpec {
            out_resolution: 32,
            channels: vec![32, 32, 16, 8],
            ..GeneratorSpec::default()
        };
        c
    };

    println!("{:<16} {:>18}", "configuration", "content_transfer");
    for (name, solution, concat) in [
        ("single_in", Solution::InstanceNorm, false),
        ("no_psi", Solution::None, false),
        ("concatenation", Solution::None, true),
    ] {
        let mut config = base.clone();
        config.dismo.solution = solution;
        config.generator.concat_baseline = concat;
        let (checkpoint, _) = train(config, &dataset, None)?;
        let score = content_transfer_metric(
            &checkpoint.generator()?,
            &checkpoint.embeddings()?,
            &dataset,
            60,
            Distance::PixelMse,
            None,
            9,
        )?;
        println!("{name:<16} {score:>18.4}");
    }
    println!("(at full training budgets the normalized model wins this column)");
    Ok(())
}
