// audit: are backbone features pose-sensitive and color-invariant?
use dismo::data::{image_to_array, load_dataset, render_sprite, sample_factors, DatasetSpec, SamplingMode};

use dismo::objectives::{pretrain_backbone, Augment};
use ndarray::{Array2, Axis};
use std::path::Path;

fn main() {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(150);
    let batch: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let ds = load_dataset(Path::new("/tmp/exp/data_normal")).unwrap();
    let bb = pretrain_backbone(&ds, &Augment::default(), 0.1, steps, batch, 7).unwrap();

    let spec = DatasetSpec { n_images: 512, image_size: 32, content_sampling: SamplingMode::Normal, n_domains: 1, seed: 500 };
    // pairs: same identity, different pose VS same pose, different identity
    let mut same_pose_diff_id = 0.0f64;
    let mut same_id_diff_pose = 0.0f64;
    let mut n = 0;
    for i in 0..100 {
        let a = sample_factors(&spec, i * 2);
        let b = sample_factors(&spec, i * 2 + 1);
        // x = pose from a, identity from a; y = pose of a with identity of b; z = pose of b with identity of a
        let y = a.with_style_of(&b);
        let mut z = b.clone();
        z = z.with_style_of(&a);
        let f = |fr| {
            let img = image_to_array(&render_sprite(&fr, 32).unwrap());
            let x = img.insert_axis(Axis(0)).into_dyn();
            let feats: Array2<f32> = bb.features(&x).unwrap();
            feats.row(0).to_owned()
        };
        let fx = f(a.clone());
        let fy = f(y);
        let fz = f(z);
        let cos = |p: &ndarray::Array1<f32>, q: &ndarray::Array1<f32>| p.dot(q);
        same_pose_diff_id += cos(&fx, &fy) as f64; // want HIGH (color-invariant)
        same_id_diff_pose += cos(&fx, &fz) as f64; // want LOW (pose-sensitive)
        n += 1;
    }
    println!(
        "steps {steps} batch {batch}: cos(same pose, diff identity) {:.3}; cos(diff pose, same identity) {:.3}",
        same_pose_diff_id / n as f64,
        same_id_diff_pose / n as f64
    );
}
