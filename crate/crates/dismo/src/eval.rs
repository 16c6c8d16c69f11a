//! Disentanglement probes: content-transfer distance against rendered
//! ground truth, frozen-probe leakage metrics, analogy grids,
//! interpolation strips, retrieval, and the canonical-view score.

use ndarray::{s, Array2, Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    array_to_image, foreground_centroid, image_to_array, render_sprite, Dataset, FactorRecord,
};
use crate::error::{DismoError, Result};
use crate::generator::GeneratorState;
use crate::graph::Graph;
use crate::latent::EmbeddingTable;
use crate::nn::{mean_sq_diff, sample_standard_normal, Adam, Linear, ParamSet};
use crate::objectives::Backbone;
#[cfg(test)]
use crate::objectives::stack_images;

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Quantities of one evaluation pass over a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean distance between cross-transfers and rendered ground truth.
    pub content_transfer: f32,
    /// Probe accuracy predicting the shape class from content codes.
    pub style_from_content_accuracy: f32,
    /// Probe accuracy predicting the pose quadrant from style codes.
    pub content_from_style_accuracy: f32,
    /// Probe mean absolute error regressing (x, y) from style codes.
    pub pose_from_style_mae: f32,
    /// Probe mean absolute error regressing (x, y) from content codes.
    pub pose_from_content_mae: f32,
    /// Mean centroid deviation of zero-content generations, in pixels.
    pub canonical_deviation: Option<f32>,
    /// Zero-content generations with empty foreground, excluded above.
    pub canonical_excluded: usize,
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
}

/// Distance used by the content-transfer metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    PixelMse,
    /// Squared distance between frozen backbone features.
    Perceptual,
}

// ---------------------------------------------------------------------------
// Content transfer
// ---------------------------------------------------------------------------

fn pair_distance(
    generated: &ArrayD<f32>,
    truth: &ArrayD<f32>,
    distance: Distance,
    backbone: Option<&Backbone>,
) -> Result<f32> {
    match distance {
        Distance::PixelMse => Ok(mean_sq_diff(generated, truth)),
        Distance::Perceptual => {
            let b = backbone.ok_or_else(|| {
                DismoError::Invalid("perceptual distance requires a backbone".into())
            })?;
            let fg = b.features(generated)?;
            let ft = b.features(truth)?;
            Ok(mean_sq_diff(
                &fg.into_dyn(),
                &ft.into_dyn(),
            ))
        }
    }
}

/// Transfer distance over explicit (content_index, style_index) pairs:
/// generate with a's content code and b's style code, compare against the
/// exact re-render of a's pose in b's appearance.
pub fn content_transfer_pairs(
    gen: &GeneratorState,
    table: &EmbeddingTable,
    dataset: &Dataset,
    pairs: &[(usize, usize)],
    distance: Distance,
    backbone: Option<&Backbone>,
) -> Result<f32> {
    let factors = dataset.factors_required()?;
    if pairs.is_empty() {
        return Err(DismoError::Invalid("no transfer pairs given".into()));
    }
    let mut total = 0.0f64;
    for &(a, b) in pairs {
        if a >= dataset.len() || b >= dataset.len() {
            return Err(DismoError::Invalid(format!(
                "transfer pair ({a}, {b}) out of range"
            )));
        }
        let (c, _) = table.lookup(&[a])?;
        let (_, s) = table.lookup(&[b])?;
        let generated = gen.generate(&c, &s)?;
        let target_factors = factors[a].with_style_of(&factors[b]);
        let truth = image_to_array(&render_sprite(&target_factors, dataset.image_size)?);
        let truth = truth.insert_axis(Axis(0)).into_dyn();
        total += pair_distance(&generated, &truth, distance, backbone)? as f64;
    }
    Ok((total / pairs.len() as f64) as f32)
}

/// Mean transfer distance over `n_pairs` random (a, b) pairs.
pub fn content_transfer_metric(
    gen: &GeneratorState,
    table: &EmbeddingTable,
    dataset: &Dataset,
    n_pairs: usize,
    distance: Distance,
    backbone: Option<&Backbone>,
    seed: u64,
) -> Result<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let pairs: Vec<(usize, usize)> = (0..n_pairs)
        .map(|_| {
            (
                rng.random_range(0..dataset.len()),
                rng.random_range(0..dataset.len()),
            )
        })
        .collect();
    content_transfer_pairs(gen, table, dataset, &pairs, distance, backbone)
}

/// Distance a predictor that always emits one constant image would score
/// on the same protocol; the untrained-model sanity reference.
pub fn constant_predictor_transfer(
    dataset: &Dataset,
    constant: &Array3<f32>,
    n_pairs: usize,
    seed: u64,
) -> Result<f32> {
    let factors = dataset.factors_required()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let constant = constant.clone().into_dyn();
    let mut total = 0.0f64;
    for _ in 0..n_pairs {
        let a = rng.random_range(0..dataset.len());
        let b = rng.random_range(0..dataset.len());
        let target_factors = factors[a].with_style_of(&factors[b]);
        let truth = image_to_array(&render_sprite(&target_factors, dataset.image_size)?).into_dyn();
        total += mean_sq_diff(&constant, &truth) as f64;
    }
    Ok((total / n_pairs as f64) as f32)
}

// ---------------------------------------------------------------------------
// Leakage probes
// ---------------------------------------------------------------------------

/// What the frozen probe tries to recover, and from which code table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakageProtocol {
    /// Shape class from content codes (accuracy; low = little leakage).
    ClassifyStyleFromContent,
    /// Pose quadrant from style codes (accuracy; low = little leakage).
    ClassifyContentFromStyle,
    /// (x, y) regression from style codes (MAE; high = little leakage).
    RegressPoseFromStyle,
    /// (x, y) regression from content codes (MAE; low expected).
    RegressPoseFromContent,
}

const PROBE_HIDDEN: usize = 64;
const PROBE_STEPS: usize = 3000;
const PROBE_LR: f32 = 1e-2;

struct Probe {
    params: ParamSet,
    layers: Vec<Linear>,
}

impl Probe {
    fn new(d_in: usize, d_out: usize, seed: u64) -> Probe {
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let layers = vec![
            Linear::new(&mut params, &mut rng, "probe.h0", d_in, PROBE_HIDDEN),
            Linear::new(&mut params, &mut rng, "probe.h1", PROBE_HIDDEN, PROBE_HIDDEN),
            Linear::new(&mut params, &mut rng, "probe.out", PROBE_HIDDEN, d_out),
        ];
        Probe { params, layers }
    }

    fn forward(&self, g: &mut Graph, bind: &crate::nn::Binding, x: crate::graph::Tensor) -> Result<crate::graph::Tensor> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, bind, h)?;
            if i < last {
                h = g.leaky_relu(h, 0.2);
            }
        }
        Ok(h)
    }

    fn predict(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        let mut g = Graph::new();
        let bind = self.params.bind_const(&mut g);
        let xt = g.constant(x.clone().into_dyn());
        let out = self.forward(&mut g, &bind, xt)?;
        let d = g.data(out);
        let rows = d.shape()[0];
        let cols = d.shape()[1];
        Ok(d.clone().into_shape_with_order((rows, cols)).expect("2d"))
    }
}

fn pose_quadrant(f: &FactorRecord) -> usize {
    (if f.x >= 0.0 { 1 } else { 0 }) + (if f.y >= 0.0 { 2 } else { 0 })
}

fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5917);
    order.shuffle(&mut rng);
    let cut = (n * 4) / 5;
    (order[..cut].to_vec(), order[cut..].to_vec())
}

fn gather(rows: &Array2<f32>, idx: &[usize]) -> Array2<f32> {
    let mut out = Array2::zeros((idx.len(), rows.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&rows.row(i));
    }
    out
}

/// Standardize probe inputs per dimension using train-split statistics, so
/// probe quality is invariant to the arbitrary scale/offset of a learned
/// code table. Returns (train, test) standardized.
fn standardize_split(
    codes: &Array2<f32>,
    train: &[usize],
    test: &[usize],
) -> (Array2<f32>, Array2<f32>) {
    let x_train = gather(codes, train);
    let mean = x_train.mean_axis(Axis(0)).expect("nonempty train split");
    let std = x_train.std_axis(Axis(0), 0.0).mapv(|v| v.max(1e-6));
    let apply = |x: Array2<f32>| (x - &mean) / &std;
    (apply(x_train), apply(gather(codes, test)))
}

fn train_classifier_probe(
    codes: &Array2<f32>,
    labels: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<f32> {
    let n = codes.nrows();
    let (train, test) = split_indices(n, seed);
    // every class needs at least two training examples for a meaningful fit
    for k in 0..n_classes {
        if train.iter().filter(|&&i| labels[i] == k).count() < 2 {
            return Err(DismoError::Dataset(format!(
                "class {k} has fewer than 2 training examples"
            )));
        }
    }
    let probe = Probe::new(codes.ncols(), n_classes, seed ^ 0x9A0B);
    let mut probe = probe;
    let mut opt = Adam::new(&probe.params, PROBE_LR);
    let (x_train, x_test) = standardize_split(codes, &train, &test);
    let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    for _ in 0..PROBE_STEPS {
        let mut g = Graph::new();
        let bind = probe.params.bind(&mut g);
        let x = g.constant(x_train.clone().into_dyn());
        let logits = probe.forward(&mut g, &bind, x)?;
        let lse = g.logsumexp_rows(logits)?;
        let picked = g.pick_cols(logits, &y_train)?;
        let per = g.sub(lse, picked)?;
        let loss = g.mean_all(per);
        let mut grads = g.backward(loss)?;
        opt.step(&mut probe.params, &bind, &mut grads);
    }
    let pred = probe.predict(&x_test)?;
    let mut correct = 0usize;
    for (r, &i) in test.iter().enumerate() {
        let row = pred.row(r);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap();
        if argmax == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f32 / test.len() as f32)
}

fn train_regressor_probe(codes: &Array2<f32>, targets: &Array2<f32>, seed: u64) -> Result<f32> {
    let n = codes.nrows();
    let (train, test) = split_indices(n, seed);
    let mut probe = Probe::new(codes.ncols(), targets.ncols(), seed ^ 0x9A0B);
    let mut opt = Adam::new(&probe.params, PROBE_LR);
    let (x_train, x_test) = standardize_split(codes, &train, &test);
    let y_train = gather(targets, &train);
    for _ in 0..PROBE_STEPS {
        let mut g = Graph::new();
        let bind = probe.params.bind(&mut g);
        let x = g.constant(x_train.clone().into_dyn());
        let y = g.constant(y_train.clone().into_dyn());
        let out = probe.forward(&mut g, &bind, x)?;
        let d = g.sub(out, y)?;
        let sq = g.square(d);
        let loss = g.mean_all(sq);
        let mut grads = g.backward(loss)?;
        opt.step(&mut probe.params, &bind, &mut grads);
    }
    let y_test = gather(targets, &test);
    let pred = probe.predict(&x_test)?;
    let mae = (&pred - &y_test).mapv(f32::abs).mean().unwrap();
    Ok(mae)
}

/// Train a fixed-capacity probe on frozen embeddings and report test
/// accuracy (classification) or mean absolute error in factor units
/// (regression). The embeddings are never modified.
pub fn leakage_metric(
    table: &EmbeddingTable,
    factors: &[FactorRecord],
    protocol: LeakageProtocol,
    split_seed: u64,
) -> Result<f32> {
    if factors.len() != table.n() {
        return Err(DismoError::Dataset(format!(
            "{} factor records for {} embedding rows",
            factors.len(),
            table.n()
        )));
    }
    let pose: Array2<f32> =
        Array2::from_shape_fn((factors.len(), 2), |(i, j)| {
            if j == 0 {
                factors[i].x
            } else {
                factors[i].y
            }
        });
    match protocol {
        LeakageProtocol::ClassifyStyleFromContent => {
            let labels: Vec<usize> = factors.iter().map(|f| f.shape_id).collect();
            let n_classes = labels.iter().max().unwrap() + 1;
            train_classifier_probe(&table.content, &labels, n_classes, split_seed)
        }
        LeakageProtocol::ClassifyContentFromStyle => {
            let labels: Vec<usize> = factors.iter().map(pose_quadrant).collect();
            train_classifier_probe(&table.style, &labels, 4, split_seed)
        }
        LeakageProtocol::RegressPoseFromStyle => {
            train_regressor_probe(&table.style, &pose, split_seed)
        }
        LeakageProtocol::RegressPoseFromContent => {
            train_regressor_probe(&table.content, &pose, split_seed)
        }
    }
}

// ---------------------------------------------------------------------------
// Qualitative probes
// ---------------------------------------------------------------------------

/// (|styles|+1) x (|contents|+1) analogy canvas: source images on the
/// margins, cell (r, c) generated from column c's content code and row
/// r's style code. Top-left corner stays blank.
pub fn analogy_grid(
    gen: &GeneratorState,
    table: &EmbeddingTable,
    dataset: &Dataset,
    content_indices: &[usize],
    style_indices: &[usize],
) -> Result<Array3<f32>> {
    if content_indices.is_empty() || style_indices.is_empty() {
        return Err(DismoError::Invalid("empty analogy index list".into()));
    }
    for &i in content_indices.iter().chain(style_indices) {
        if i >= dataset.len() {
            return Err(DismoError::Invalid(format!("analogy index {i} out of range")));
        }
    }
    let size = dataset.image_size;
    let rows = style_indices.len() + 1;
    let cols = content_indices.len() + 1;
    let mut canvas = Array3::<f32>::from_elem((3, rows * size, cols * size), -1.0);
    for (col, &ci) in content_indices.iter().enumerate() {
        let x0 = (col + 1) * size;
        canvas
            .slice_mut(s![.., 0..size, x0..x0 + size])
            .assign(&dataset.images[ci]);
    }
    for (row, &si) in style_indices.iter().enumerate() {
        let y0 = (row + 1) * size;
        canvas
            .slice_mut(s![.., y0..y0 + size, 0..size])
            .assign(&dataset.images[si]);
        for (col, &ci) in content_indices.iter().enumerate() {
            let (c, _) = table.lookup(&[ci])?;
            let (_, s) = table.lookup(&[si])?;
            let img = gen.generate(&c, &s)?;
            let x0 = (col + 1) * size;
            canvas
                .slice_mut(s![.., y0..y0 + size, x0..x0 + size])
                .assign(&img.index_axis(Axis(0), 0));
        }
    }
    Ok(canvas)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationAxis {
    Content,
    Style,
    Both,
}

/// Linear interpolation between the codes of images i and j along the
/// chosen axis; the other code stays at i's value. Returns `steps` frames
/// as [steps, 3, H, W].
pub fn interpolate(
    gen: &GeneratorState,
    table: &EmbeddingTable,
    endpoints: (usize, usize),
    axis: InterpolationAxis,
    steps: usize,
) -> Result<ArrayD<f32>> {
    if steps < 2 {
        return Err(DismoError::Invalid("interpolation needs steps >= 2".into()));
    }
    let (i, j) = endpoints;
    let (ci, si) = table.lookup(&[i])?;
    let (cj, sj) = table.lookup(&[j])?;
    let mut frames = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f32 / (steps - 1) as f32;
        let c = match axis {
            InterpolationAxis::Content | InterpolationAxis::Both => &ci * (1.0 - t) + &cj * t,
            InterpolationAxis::Style => ci.clone(),
        };
        let s = match axis {
            InterpolationAxis::Style | InterpolationAxis::Both => &si * (1.0 - t) + &sj * t,
            InterpolationAxis::Content => si.clone(),
        };
        frames.push(gen.generate(&c, &s)?);
    }
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::concatenate(Axis(0), &views)
        .map_err(|e| DismoError::Shape(format!("interpolation stack: {e}")))
}

/// Lay interpolation frames side by side into one strip canvas.
pub fn strip_canvas(frames: &ArrayD<f32>) -> Result<Array3<f32>> {
    let shape = frames.shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(DismoError::Shape(format!("expected [N,3,H,W], got {shape:?}")));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let mut canvas = Array3::<f32>::zeros((3, h, n * w));
    for k in 0..n {
        canvas
            .slice_mut(s![.., .., k * w..(k + 1) * w])
            .assign(&frames.index_axis(Axis(0), k));
    }
    Ok(canvas)
}

/// Code space searched by [`retrieve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalSpace {
    Content,
    Style,
}

/// k nearest rows to the query by cosine distance, query excluded.
pub fn retrieve(
    table: &EmbeddingTable,
    query: usize,
    space: RetrievalSpace,
    k: usize,
) -> Result<Vec<usize>> {
    let rows = match space {
        RetrievalSpace::Content => &table.content,
        RetrievalSpace::Style => &table.style,
    };
    let n = rows.nrows();
    if query >= n {
        return Err(DismoError::Invalid(format!("query {query} out of range")));
    }
    if k >= n {
        return Err(DismoError::Invalid(format!(
            "k = {k} must be below the table size {n}"
        )));
    }
    let q = rows.row(query);
    let qn = q.dot(&q).sqrt().max(1e-12);
    let mut scored: Vec<(usize, f32)> = (0..n)
        .filter(|&i| i != query)
        .map(|i| {
            let r = rows.row(i);
            let rn = r.dot(&r).sqrt().max(1e-12);
            (i, 1.0 - q.dot(&r) / (qn * rn))
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(i, _)| i).collect())
}

// ---------------------------------------------------------------------------
// Canonical view
// ---------------------------------------------------------------------------

/// Mean foreground-centroid distance to the image center over a batch of
/// generated images, plus the count of empty-foreground frames excluded.
pub fn centroid_stats(images: &ArrayD<f32>) -> Result<(Option<f32>, usize)> {
    let shape = images.shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(DismoError::Shape(format!("expected [N,3,H,W], got {shape:?}")));
    }
    let center = (shape[2] as f32 - 1.0) / 2.0;
    let mut total = 0.0f64;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for k in 0..shape[0] {
        let frame = images.index_axis(Axis(0), k).to_owned();
        let frame3 = frame
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| DismoError::Shape(e.to_string()))?;
        match foreground_centroid(&array_to_image(&frame3)) {
            Some((cx, cy)) => {
                total += (((cx - center).powi(2) + (cy - center).powi(2)) as f64).sqrt();
                used += 1;
            }
            None => excluded += 1,
        }
    }
    let mean = if used > 0 {
        Some((total / used as f64) as f32)
    } else {
        None
    };
    Ok((mean, excluded))
}

/// Centroid deviation of zero-content generations for the given styles.
pub fn canonical_view_score(
    gen: &GeneratorState,
    table: &EmbeddingTable,
    style_indices: &[usize],
) -> Result<(Option<f32>, usize)> {
    if style_indices.is_empty() {
        return Err(DismoError::Invalid("no style indices given".into()));
    }
    let (_, s) = table.lookup(style_indices)?;
    let c = Array2::<f32>::zeros((style_indices.len(), table.d_content()));
    let images = gen.generate(&c, &s)?;
    centroid_stats(&images)
}

/// Reference for the canonical score: centroid deviation when content
/// codes are drawn at random instead of zeroed.
pub fn random_content_score(
    gen: &GeneratorState,
    table: &EmbeddingTable,
    style_indices: &[usize],
    seed: u64,
) -> Result<(Option<f32>, usize)> {
    if style_indices.is_empty() {
        return Err(DismoError::Invalid("no style indices given".into()));
    }
    let (_, s) = table.lookup(style_indices)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let c = Array2::from_shape_fn((style_indices.len(), table.d_content()), |_| {
        sample_standard_normal(&mut rng)
    });
    let images = gen.generate(&c, &s)?;
    centroid_stats(&images)
}

/// Centroid of each frame of a [N,3,H,W] batch; `None` for empty frames.
pub fn frame_centroids(images: &ArrayD<f32>) -> Result<Vec<Option<(f32, f32)>>> {
    let shape = images.shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(DismoError::Shape(format!("expected [N,3,H,W], got {shape:?}")));
    }
    let mut out = Vec::with_capacity(shape[0]);
    for k in 0..shape[0] {
        let frame3 = images
            .index_axis(Axis(0), k)
            .to_owned()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| DismoError::Shape(e.to_string()))?;
        out.push(foreground_centroid(&array_to_image(&frame3)));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Full report
// ---------------------------------------------------------------------------

/// Run every quantitative probe and assemble a [`MetricReport`].
#[allow(clippy::too_many_arguments)]
pub fn compute_report(
    gen: &GeneratorState,
    table: &EmbeddingTable,
    dataset: &Dataset,
    n_pairs: usize,
    distance: Distance,
    backbone: Option<&Backbone>,
    seed: u64,
    step: u64,
    config_hash: String,
) -> Result<MetricReport> {
    let factors = dataset.factors_required()?.to_vec();
    let content_transfer =
        content_transfer_metric(gen, table, dataset, n_pairs, distance, backbone, seed)?;
    let style_from_content_accuracy = leakage_metric(
        table,
        &factors,
        LeakageProtocol::ClassifyStyleFromContent,
        seed,
    )?;
    let content_from_style_accuracy = leakage_metric(
        table,
        &factors,
        LeakageProtocol::ClassifyContentFromStyle,
        seed,
    )?;
    let pose_from_style_mae =
        leakage_metric(table, &factors, LeakageProtocol::RegressPoseFromStyle, seed)?;
    let pose_from_content_mae = leakage_metric(
        table,
        &factors,
        LeakageProtocol::RegressPoseFromContent,
        seed,
    )?;
    let style_sample: Vec<usize> = (0..dataset.len().min(32)).collect();
    let (canonical_deviation, canonical_excluded) =
        canonical_view_score(gen, table, &style_sample)?;
    Ok(MetricReport {
        content_transfer,
        style_from_content_accuracy,
        content_from_style_accuracy,
        pose_from_style_mae,
        pose_from_content_mae,
        canonical_deviation,
        canonical_excluded,
        seed,
        step,
        config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_factors, DatasetSpec, SamplingMode, BACKGROUND};
    use crate::dismo::{DisMoConfig, Framework};
    use crate::generator::{build_generator, GeneratorSpec};
    use crate::latent::{init_embeddings, InitScheme};
    use std::path::PathBuf;

    fn toy_dataset(n: usize, size: usize, seed: u64) -> Dataset {
        let spec = DatasetSpec {
            n_images: n,
            image_size: size,
            content_sampling: SamplingMode::Uniform,
            n_domains: 1,
            seed,
        };
        let factors: Vec<_> = (0..n).map(|i| sample_factors(&spec, i)).collect();
        let images = factors
            .iter()
            .map(|f| image_to_array(&render_sprite(f, size).unwrap()))
            .collect();
        Dataset {
            images,
            factors: Some(factors),
            image_size: size,
            root: PathBuf::new(),
        }
    }

    fn toy_model(d: usize, size: usize) -> GeneratorState {
        let stages = (size as f32 / 4.0).log2() as usize;
        let spec = GeneratorSpec {
            framework: Framework::Single,
            base_resolution: 4,
            out_resolution: size,
            channels: vec![8; stages + 1],
            concat_baseline: false,
        };
        build_generator(&spec, d, d, &DisMoConfig::default(), 3).unwrap()
    }

    #[test]
    fn identity_pairs_equal_reconstruction_distance_and_lower_bound_random() {
        let ds = toy_dataset(10, 16, 1);
        let gen = toy_model(6, 16);
        let table =
            init_embeddings(10, 6, 6, InitScheme::Gaussian { std: 0.5 }, 2).unwrap();
        let identity: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
        let id_metric =
            content_transfer_pairs(&gen, &table, &ds, &identity, Distance::PixelMse, None).unwrap();
        // direct reconstruction distance over the same indices
        let mut direct = 0.0f64;
        for i in 0..10 {
            let (c, s) = table.lookup(&[i]).unwrap();
            let out = gen.generate(&c, &s).unwrap();
            let truth = ds.images[i].clone().insert_axis(Axis(0)).into_dyn();
            direct += mean_sq_diff(&out, &truth) as f64;
        }
        assert!((id_metric - (direct / 10.0) as f32).abs() < 1e-5);
        // the lower bound is statistical; allow sampling slack on the
        // random-pair estimate
        let random =
            content_transfer_metric(&gen, &table, &ds, 200, Distance::PixelMse, None, 7).unwrap();
        assert!(id_metric <= random * 1.05, "{id_metric} vs {random}");
    }

    #[test]
    fn untrained_model_scores_near_constant_predictor() {
        let ds = toy_dataset(12, 16, 2);
        let gen = toy_model(6, 16);
        let table = init_embeddings(12, 6, 6, InitScheme::Gaussian { std: 0.1 }, 3).unwrap();
        let metric =
            content_transfer_metric(&gen, &table, &ds, 40, Distance::PixelMse, None, 5).unwrap();
        // reference: always predict the untrained model's (nearly constant)
        // first output
        let (c, s) = table.lookup(&[0]).unwrap();
        let constant = gen
            .generate(&c, &s)
            .unwrap()
            .index_axis_move(Axis(0), 0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let baseline = constant_predictor_transfer(&ds, &constant, 40, 5).unwrap();
        assert!(
            metric / baseline > 0.5 && metric / baseline < 2.0,
            "metric {metric} vs constant baseline {baseline}"
        );
    }

    #[test]
    fn leakage_probe_is_chance_on_random_codes_and_shuffled_labels() {
        let spec = DatasetSpec {
            n_images: 160,
            image_size: 16,
            content_sampling: SamplingMode::Uniform,
            n_domains: 1,
            seed: 4,
        };
        let mut factors: Vec<_> = (0..160).map(|i| sample_factors(&spec, i)).collect();
        // random codes carry no information about shape
        let table = init_embeddings(160, 8, 8, InitScheme::Gaussian { std: 1.0 }, 6).unwrap();
        let acc = leakage_metric(
            &table,
            &factors,
            LeakageProtocol::ClassifyStyleFromContent,
            11,
        )
        .unwrap();
        assert!((0.05..=0.5).contains(&acc), "accuracy {acc} not near 1/4");
        // destroying the labels also destroys any accidental signal
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mut shapes: Vec<usize> = factors.iter().map(|f| f.shape_id).collect();
        shapes.shuffle(&mut rng);
        for (f, s) in factors.iter_mut().zip(shapes) {
            f.shape_id = s;
        }
        let shuffled = leakage_metric(
            &table,
            &factors,
            LeakageProtocol::ClassifyStyleFromContent,
            11,
        )
        .unwrap();
        assert!((0.05..=0.5).contains(&shuffled), "accuracy {shuffled}");
    }

    #[test]
    fn leakage_probe_learns_pose_planted_in_codes() {
        // content codes literally contain (x, y): regression should nail it
        let spec = DatasetSpec {
            n_images: 120,
            image_size: 16,
            content_sampling: SamplingMode::Uniform,
            n_domains: 1,
            seed: 5,
        };
        let factors: Vec<_> = (0..120).map(|i| sample_factors(&spec, i)).collect();
        let mut table = init_embeddings(120, 4, 4, InitScheme::Zeros, 0).unwrap();
        for (i, f) in factors.iter().enumerate() {
            table.content[[i, 0]] = f.x;
            table.content[[i, 1]] = f.y;
        }
        let content_err = leakage_metric(
            &table,
            &factors,
            LeakageProtocol::RegressPoseFromContent,
            21,
        )
        .unwrap();
        let style_err =
            leakage_metric(&table, &factors, LeakageProtocol::RegressPoseFromStyle, 21).unwrap();
        assert!(content_err < 0.1, "content MAE {content_err}");
        assert!(
            style_err > 3.0 * content_err,
            "style MAE {style_err} vs content {content_err}"
        );
    }

    #[test]
    fn leakage_rejects_tiny_classes_and_mismatched_tables() {
        let spec = DatasetSpec {
            n_images: 20,
            image_size: 16,
            content_sampling: SamplingMode::Uniform,
            n_domains: 1,
            seed: 6,
        };
        let mut factors: Vec<_> = (0..20).map(|i| sample_factors(&spec, i)).collect();
        for f in factors.iter_mut() {
            f.shape_id = 0;
        }
        factors[0].shape_id = 1; // class 1 has a single example
        let table = init_embeddings(20, 4, 4, InitScheme::Zeros, 0).unwrap();
        assert!(leakage_metric(
            &table,
            &factors,
            LeakageProtocol::ClassifyStyleFromContent,
            1
        )
        .is_err());
        let small = init_embeddings(5, 4, 4, InitScheme::Zeros, 0).unwrap();
        assert!(leakage_metric(
            &small,
            &factors,
            LeakageProtocol::RegressPoseFromContent,
            1
        )
        .is_err());
    }

    #[test]
    fn analogy_grid_layout_and_determinism() {
        let ds = toy_dataset(6, 16, 7);
        let gen = toy_model(6, 16);
        let table = init_embeddings(6, 6, 6, InitScheme::Gaussian { std: 0.3 }, 8).unwrap();
        let grid = analogy_grid(&gen, &table, &ds, &[0, 1, 2], &[3, 4, 5]).unwrap();
        assert_eq!(grid.dim(), (3, 4 * 16, 4 * 16));
        // margins hold the source images
        assert_eq!(
            grid.slice(s![.., 0..16, 16..32]).to_owned(),
            ds.images[0]
        );
        assert_eq!(grid.slice(s![.., 16..32, 0..16]).to_owned(), ds.images[3]);
        // a cell equals the direct generation for (content col, style row)
        let (c, _) = table.lookup(&[1]).unwrap();
        let (_, s) = table.lookup(&[4]).unwrap();
        let direct = gen.generate(&c, &s).unwrap();
        assert_eq!(
            grid.slice(s![.., 32..48, 32..48]).to_owned().into_dyn(),
            direct.index_axis(Axis(0), 0).to_owned().into_dyn()
        );
        let again = analogy_grid(&gen, &table, &ds, &[0, 1, 2], &[3, 4, 5]).unwrap();
        assert_eq!(grid, again);
        assert!(analogy_grid(&gen, &table, &ds, &[9], &[0]).is_err());
    }

    #[test]
    fn interpolation_endpoints_match_generations() {
        let gen = toy_model(6, 16);
        let table = init_embeddings(5, 6, 6, InitScheme::Gaussian { std: 0.5 }, 9).unwrap();
        for axis in [
            InterpolationAxis::Content,
            InterpolationAxis::Style,
            InterpolationAxis::Both,
        ] {
            let frames = interpolate(&gen, &table, (0, 3), axis, 5).unwrap();
            assert_eq!(frames.shape(), &[5, 3, 16, 16]);
            let (c0, s0) = table.lookup(&[0]).unwrap();
            let start = gen.generate(&c0, &s0).unwrap();
            assert_eq!(
                frames.index_axis(Axis(0), 0).to_owned().into_dyn(),
                start.index_axis(Axis(0), 0).to_owned().into_dyn()
            );
            let (c3, s3) = table.lookup(&[3]).unwrap();
            let (ce, se) = match axis {
                InterpolationAxis::Content => (c3, s0.clone()),
                InterpolationAxis::Style => (c0.clone(), s3),
                InterpolationAxis::Both => (c3, s3),
            };
            let end = gen.generate(&ce, &se).unwrap();
            assert_eq!(
                frames.index_axis(Axis(0), 4).to_owned().into_dyn(),
                end.index_axis(Axis(0), 0).to_owned().into_dyn()
            );
        }
        assert!(interpolate(&gen, &table, (0, 1), InterpolationAxis::Both, 1).is_err());
        let strip = strip_canvas(
            &interpolate(&gen, &table, (0, 3), InterpolationAxis::Both, 4).unwrap(),
        )
        .unwrap();
        assert_eq!(strip.dim(), (3, 16, 64));
    }

    #[test]
    fn retrieval_excludes_query_and_sorts_all() {
        let mut table = init_embeddings(5, 3, 3, InitScheme::Zeros, 0).unwrap();
        // content rows along one axis with increasing angle from the query
        let rows = [
            [1.0, 0.0, 0.0],
            [0.9, 0.1, 0.0],
            [0.5, 0.5, 0.0],
            [0.0, 1.0, 0.0],
            [-1.0, 0.0, 0.0],
        ];
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                table.content[[i, j]] = *v;
            }
        }
        let got = retrieve(&table, 0, RetrievalSpace::Content, 4).unwrap();
        assert_eq!(got, vec![1, 2, 3, 4]);
        assert!(!retrieve(&table, 0, RetrievalSpace::Content, 2)
            .unwrap()
            .contains(&0));
        assert!(retrieve(&table, 0, RetrievalSpace::Content, 5).is_err());
        assert!(retrieve(&table, 9, RetrievalSpace::Content, 2).is_err());
    }

    #[test]
    fn centroid_stats_match_renderer_geometry_and_flag_empty_frames() {
        // a sprite rendered at the exact center scores ~0
        let spec = DatasetSpec {
            n_images: 4,
            image_size: 32,
            content_sampling: SamplingMode::Uniform,
            n_domains: 1,
            seed: 10,
        };
        let mut f = sample_factors(&spec, 0);
        f.x = 0.0;
        f.y = 0.0;
        let centered = image_to_array(&render_sprite(&f, 32).unwrap());
        let batch = stack_images(&[centered]);
        let (mean, excluded) = centroid_stats(&batch).unwrap();
        assert_eq!(excluded, 0);
        assert!(mean.unwrap() < 1.0, "deviation {:?}", mean);
        // pure background counts as empty and is excluded
        let bg: Array3<f32> = Array3::from_shape_fn((3, 32, 32), |(c, _, _)| {
            BACKGROUND[c] as f32 / 127.5 - 1.0
        });
        let batch = stack_images(&[bg]);
        let (mean, excluded) = centroid_stats(&batch).unwrap();
        assert_eq!((mean, excluded), (None, 1));
    }

    #[test]
    fn canonical_and_random_scores_run_on_untrained_model() {
        let gen = toy_model(6, 16);
        let table = init_embeddings(6, 6, 6, InitScheme::Gaussian { std: 0.3 }, 11).unwrap();
        let (score, _) = canonical_view_score(&gen, &table, &[0, 1, 2]).unwrap();
        let (reference, _) = random_content_score(&gen, &table, &[0, 1, 2], 12).unwrap();
        // untrained: both are just reported, no ordering claim
        if let (Some(a), Some(b)) = (score, reference) {
            assert!(a.is_finite() && b.is_finite());
        }
        assert!(canonical_view_score(&gen, &table, &[]).is_err());
    }
}
