//! Amortized inference: convolutional encoders regressed onto the
//! optimized code tables, enabling encode/translate on held-out images.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DismoError, Result};
use crate::generator::GeneratorState;
use crate::graph::{Graph, Tensor};
use crate::latent::EmbeddingTable;
use crate::nn::{Adam, Binding, Conv2d, Linear, ParamId, ParamSet, TensorData};
use crate::objectives::stack_images;

/// Strided convolutional regressor from an image to a code vector. The
/// final projection starts at zero so an untrained encoder predicts the
/// zero code.
pub struct ConvEncoder {
    pub params: ParamSet,
    convs: Vec<Conv2d>,
    proj: Linear,
    pub out_dim: usize,
    pub image_size: usize,
}

fn encoder_channels(image_size: usize) -> Vec<usize> {
    // one stride-2 stage per halving down to 4 px
    let stages = ((image_size as f32 / 4.0).log2() as usize).max(1);
    let full = [16usize, 32, 64, 64, 64, 64];
    full[..stages.min(full.len())].to_vec()
}

impl ConvEncoder {
    pub fn new(image_size: usize, out_dim: usize, name: &str, seed: u64) -> ConvEncoder {
        let channels = encoder_channels(image_size);
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (k, &c_out) in channels.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut params,
                &mut rng,
                &format!("{name}.conv{k}"),
                c_in,
                c_out,
                2,
            ));
            c_in = c_out;
        }
        let proj = Linear::new(&mut params, &mut rng, &format!("{name}.proj"), c_in, out_dim);
        // zero the head: untrained output is exactly the zero code
        params.get_mut(proj.w).fill(0.0);
        params.get_mut(proj.b).fill(0.0);
        ConvEncoder {
            params,
            convs,
            proj,
            out_dim,
            image_size,
        }
    }

    pub fn forward_graph(&self, g: &mut Graph, bind: &Binding, x: Tensor) -> Result<Tensor> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(DismoError::Shape(format!(
                "encoder expects [N,3,{0},{0}] input, got {shape:?}",
                self.image_size
            )));
        }
        if shape[2] != self.image_size || shape[3] != self.image_size {
            return Err(DismoError::Shape(format!(
                "encoder trained at {} px, got {}x{}",
                self.image_size, shape[2], shape[3]
            )));
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, bind, h)?;
            h = g.leaky_relu(h, 0.2);
        }
        let pooled = g.mean_spatial(h)?;
        self.proj.forward(g, bind, pooled)
    }

    /// Codes for a batch of images, outside any graph.
    pub fn forward(&self, imgs: &ArrayD<f32>) -> Result<Array2<f32>> {
        let mut g = Graph::new();
        let bind = self.params.bind_const(&mut g);
        let x = g.constant(imgs.clone());
        let out = self.forward_graph(&mut g, &bind, x)?;
        let d = g.data(out);
        let rows = d.shape()[0];
        Ok(d
            .clone()
            .into_shape_with_order((rows, self.out_dim))
            .expect("code shape"))
    }
}

/// Trained content and style encoders for one checkpoint.
pub struct EncoderState {
    pub e_content: ConvEncoder,
    pub e_style: ConvEncoder,
    pub image_size: usize,
}

pub const ENCODERS_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct StoredEncoders {
    pub version: u32,
    pub image_size: usize,
    pub d_content: usize,
    pub d_style: usize,
    pub content_params: Vec<(String, TensorData)>,
    pub style_params: Vec<(String, TensorData)>,
}

fn restore_params(target: &mut ParamSet, stored: Vec<(String, TensorData)>) -> Result<()> {
    let loaded = ParamSet::from_stored(stored)?;
    if loaded.len() != target.len() {
        return Err(DismoError::Corrupt {
            path: "<encoders>".into(),
            message: "parameter count mismatch".into(),
        });
    }
    for i in 0..loaded.len() {
        let id = ParamId(i);
        if loaded.name(id) != target.name(id) || loaded.get(id).shape() != target.get(id).shape() {
            return Err(DismoError::Corrupt {
                path: "<encoders>".into(),
                message: format!("parameter {} mismatch", loaded.name(id)),
            });
        }
        *target.get_mut(id) = loaded.get(id).clone();
    }
    Ok(())
}

impl EncoderState {
    pub fn to_stored(&self) -> StoredEncoders {
        StoredEncoders {
            version: ENCODERS_VERSION,
            image_size: self.image_size,
            d_content: self.e_content.out_dim,
            d_style: self.e_style.out_dim,
            content_params: self.e_content.params.to_stored(),
            style_params: self.e_style.params.to_stored(),
        }
    }

    pub fn from_stored(stored: StoredEncoders) -> Result<EncoderState> {
        if stored.version != ENCODERS_VERSION {
            return Err(DismoError::Version {
                found: stored.version,
                expected: ENCODERS_VERSION,
            });
        }
        let mut e_content = ConvEncoder::new(stored.image_size, stored.d_content, "e_content", 0);
        let mut e_style = ConvEncoder::new(stored.image_size, stored.d_style, "e_style", 0);
        restore_params(&mut e_content.params, stored.content_params)?;
        restore_params(&mut e_style.params, stored.style_params)?;
        Ok(EncoderState {
            e_content,
            e_style,
            image_size: stored.image_size,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| DismoError::io(path, e))?;
        let mut w = BufWriter::new(file);
        ciborium::into_writer(&self.to_stored(), &mut w).map_err(|e| DismoError::Corrupt {
            path: path.to_path_buf(),
            message: format!("write failed: {e}"),
        })?;
        w.flush().map_err(|e| DismoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EncoderState> {
        let file = File::open(path).map_err(|e| DismoError::io(path, e))?;
        let stored: StoredEncoders =
            ciborium::from_reader(BufReader::new(file)).map_err(|e| DismoError::Corrupt {
                path: path.to_path_buf(),
                message: format!("unreadable encoder file: {e}"),
            })?;
        EncoderState::from_stored(stored)
    }

    /// Codes for a batch of images [N,3,H,W].
    pub fn encode_batch(&self, imgs: &ArrayD<f32>) -> Result<(Array2<f32>, Array2<f32>)> {
        Ok((self.e_content.forward(imgs)?, self.e_style.forward(imgs)?))
    }

    /// Codes for one image; rows of shape [1, d].
    pub fn encode(&self, img: &Array3<f32>) -> Result<(Array2<f32>, Array2<f32>)> {
        let batch = img.clone().insert_axis(Axis(0)).into_dyn();
        self.encode_batch(&batch)
    }
}

/// Mean L1 distance between encoder outputs and the table rows — the
/// training objective itself, evaluated over the whole dataset.
pub fn encoder_l1(enc: &EncoderState, dataset: &Dataset, table: &EmbeddingTable) -> Result<f32> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let imgs = stack_images(&dataset.images);
    let (c_hat, s_hat) = enc.encode_batch(&imgs)?;
    let (c, s) = table.lookup(&all)?;
    let l1 = |a: &Array2<f32>, b: &Array2<f32>| (a - b).mapv(f32::abs).mean().unwrap();
    Ok(l1(&c_hat, &c) + l1(&s_hat, &s))
}

/// L1 of always predicting the zero code, for reference.
pub fn zero_predictor_l1(table: &EmbeddingTable, indices: &[usize]) -> Result<f32> {
    let (c, s) = table.lookup(indices)?;
    Ok(c.mapv(f32::abs).mean().unwrap() + s.mapv(f32::abs).mean().unwrap())
}

/// Regress both encoders onto the frozen tables with an L1 objective.
pub fn train_encoders(
    dataset: &Dataset,
    table: &EmbeddingTable,
    steps: usize,
    lr: f32,
    batch_size: usize,
    seed: u64,
) -> Result<EncoderState> {
    if table.n() != dataset.len() {
        return Err(DismoError::Dataset(format!(
            "table has {} rows, dataset {} images",
            table.n(),
            dataset.len()
        )));
    }
    if steps < 1 || !(lr > 0.0) || batch_size < 1 {
        return Err(DismoError::config(
            "encoders",
            "steps >= 1, lr > 0 and batch_size >= 1 required",
        ));
    }
    let batch_size = batch_size.min(dataset.len());
    let mut enc = EncoderState {
        e_content: ConvEncoder::new(dataset.image_size, table.d_content(), "e_content", seed),
        e_style: ConvEncoder::new(dataset.image_size, table.d_style(), "e_style", seed ^ 0x57),
        image_size: dataset.image_size,
    };
    let mut opt_c = Adam::new(&enc.e_content.params, lr);
    let mut opt_s = Adam::new(&enc.e_style.params, lr);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xE6C0);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..steps {
        order.shuffle(&mut rng);
        let idx = &order[..batch_size];
        let batch: Vec<Array3<f32>> = idx.iter().map(|&i| dataset.images[i].clone()).collect();
        let imgs = stack_images(&batch);
        let (c_rows, s_rows) = table.lookup(idx)?;

        let mut g = Graph::new();
        let bind_c = enc.e_content.params.bind(&mut g);
        let bind_s = enc.e_style.params.bind(&mut g);
        let x = g.constant(imgs);
        let c_hat = enc.e_content.forward_graph(&mut g, &bind_c, x)?;
        let s_hat = enc.e_style.forward_graph(&mut g, &bind_s, x)?;
        let ct = g.constant(c_rows.into_dyn());
        let st = g.constant(s_rows.into_dyn());
        let dc = g.sub(c_hat, ct)?;
        let ac = g.abs(dc);
        let lc = g.mean_all(ac);
        let ds = g.sub(s_hat, st)?;
        let as_ = g.abs(ds);
        let ls = g.mean_all(as_);
        let loss = g.add(lc, ls)?;
        let mut grads = g.backward(loss)?;
        opt_c.step(&mut enc.e_content.params, &bind_c, &mut grads);
        opt_s.step(&mut enc.e_style.params, &bind_s, &mut grads);
    }
    Ok(enc)
}

/// G(E_c(content image), E_s(style image)); every modulation site reads
/// the same style code.
pub fn translate(
    gen: &GeneratorState,
    enc: &EncoderState,
    content_image: &Array3<f32>,
    style_image: &Array3<f32>,
) -> Result<Array3<f32>> {
    let (c, _) = enc.encode(content_image)?;
    let (_, s) = enc.encode(style_image)?;
    let out = gen.generate(&c, &s)?;
    out.index_axis_move(Axis(0), 0)
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| DismoError::Shape(e.to_string()))
}
