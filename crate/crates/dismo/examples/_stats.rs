use dismo::trainer::Checkpoint;
use std::path::Path;

fn main() {
    let arg = std::env::args().nth(1).unwrap();
    let ck = Checkpoint::load(Path::new(&arg)).unwrap();
    let t = ck.embeddings().unwrap();
    let ms = |a: &ndarray::Array2<f32>| a.mapv(|v| v * v).mean().unwrap();
    println!("content ms {:.4} style ms {:.4}", ms(&t.content), ms(&t.style));
    let gen = ck.generator().unwrap();
    for (name, d) in gen.params.iter() {
        let rms = (d.mapv(|v| v * v).mean().unwrap()).sqrt();
        println!("{name}: rms {rms:.4}");
    }
}
