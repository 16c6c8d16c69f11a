// calibrate transfer numbers: constant predictor vs model, plus recon
use dismo::data::{load_dataset, BACKGROUND};
use dismo::eval::{constant_predictor_transfer, content_transfer_metric, content_transfer_pairs, Distance};
use dismo::trainer::Checkpoint;
use ndarray::Array3;
use std::path::Path;

fn main() {
    let ds = load_dataset(Path::new("/tmp/exp/data_normal")).unwrap();
    let bgv = BACKGROUND[0] as f32 / 127.5 - 1.0;
    let bg = Array3::from_elem((3, 32, 32), bgv);
    let cp = constant_predictor_transfer(&ds, &bg, 200, 99).unwrap();
    println!("constant-background transfer: {cp:.4}");
    let mean = {
        let mut m = Array3::<f32>::zeros((3, 32, 32));
        for img in &ds.images { m = m + img; }
        m / ds.images.len() as f32
    };
    let cp2 = constant_predictor_transfer(&ds, &mean, 200, 99).unwrap();
    println!("constant-mean-image transfer: {cp2:.4}");
    for arm in ["b_n_instance-norm", "b_n_none", "b_n_concat"] {
        let ck = Checkpoint::load(Path::new(&format!("/tmp/exp/{arm}/checkpoint.cbor"))).unwrap();
        let gen = ck.generator().unwrap();
        let table = ck.embeddings().unwrap();
        let t = content_transfer_metric(&gen, &table, &ds, 200, Distance::PixelMse, None, 99).unwrap();
        // identity pairs = pure reconstruction measured on the same scale
        let idp: Vec<(usize, usize)> = (0..200).map(|i| (i % ds.len(), i % ds.len())).collect();
        let r = content_transfer_pairs(&gen, &table, &ds, &idp, Distance::PixelMse, None).unwrap();
        println!("{arm}: transfer {t:.4}, identity-pair recon {r:.4}");
    }
}
