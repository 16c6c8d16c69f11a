//! Loss terms: reconstruction + distribution penalty, instance
//! discrimination against a frozen backbone, a norm-capacity information
//! bottleneck, and their weighted combination.

use ndarray::{Array2, Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dismo::Discriminator;
use crate::error::{DismoError, Result};
use crate::generator::GeneratorState;
use crate::graph::{Graph, Tensor};
use crate::nn::{Adam, Binding, Conv2d, Linear, ParamSet, TensorData};

// ---------------------------------------------------------------------------
// Config types
// ---------------------------------------------------------------------------

/// Weights of the full objective: w_cs * reconstruction-plus-penalty
/// + w_ib * bottleneck + w_id * instance discrimination.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_cs: f32,
    pub w_ib: f32,
    pub w_id: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_cs: 1.0,
            w_ib: 0.05,
            w_id: 0.1,
        }
    }
}

impl LossWeights {
    /// Reconstruction-only setting: auxiliary terms switched off.
    pub fn cs_only() -> Self {
        LossWeights {
            w_cs: 1.0,
            w_ib: 0.0,
            w_id: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_cs > 0.0) {
            return Err(DismoError::config("weights.w_cs", "must be > 0"));
        }
        if self.w_ib < 0.0 || self.w_id < 0.0 {
            return Err(DismoError::config("weights", "w_ib and w_id must be >= 0"));
        }
        Ok(())
    }
}

/// Capacity targets for the embedding-norm bottleneck. The per-dimension
/// mean square of each table is pulled toward a target that ramps linearly
/// from zero over `anneal_steps`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CapacitySchedule {
    pub c_content_target: f32,
    pub c_style_target: f32,
    pub anneal_steps: u64,
}

impl Default for CapacitySchedule {
    fn default() -> Self {
        CapacitySchedule {
            c_content_target: 1.0,
            c_style_target: 1.0,
            anneal_steps: 1000,
        }
    }
}

impl CapacitySchedule {
    pub fn validate(&self) -> Result<()> {
        if self.anneal_steps < 1 {
            return Err(DismoError::config("capacity.anneal_steps", "must be >= 1"));
        }
        if self.c_content_target < 0.0 || self.c_style_target < 0.0 {
            return Err(DismoError::config("capacity", "targets must be >= 0"));
        }
        Ok(())
    }

    /// Linear ramp from 0 to `target` over `anneal_steps`, then flat.
    pub fn capacity(&self, target: f32, step: u64) -> f32 {
        let frac = (step as f64 / self.anneal_steps as f64).min(1.0) as f32;
        target * frac
    }
}

/// Reconstruction distance between decoded and target images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMode {
    PixelL1,
    PixelL2,
    /// Feature-space distance through a fixed convolutional extractor.
    Perceptual,
}

// ---------------------------------------------------------------------------
// Reconstruction
// ---------------------------------------------------------------------------

/// Fixed feature extractor for the perceptual reconstruction mode. Each
/// returned layer carries its own weight; parameters must be bound without
/// gradient.
pub trait FeatureExtractor {
    fn features(&self, g: &mut Graph, x: Tensor) -> Result<Vec<(Tensor, f32)>>;
}

/// Single identity layer; makes perceptual mode coincide with pixel_l2.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, _g: &mut Graph, x: Tensor) -> Result<Vec<(Tensor, f32)>> {
        Ok(vec![(x, 1.0)])
    }
}

pub fn reconstruction_loss(
    g: &mut Graph,
    pred: Tensor,
    target: Tensor,
    mode: ReconMode,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<Tensor> {
    if g.shape(pred) != g.shape(target) {
        return Err(DismoError::Shape(format!(
            "reconstruction: pred {:?} vs target {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    match mode {
        ReconMode::PixelL1 => {
            let d = g.sub(pred, target)?;
            let a = g.abs(d);
            Ok(g.mean_all(a))
        }
        ReconMode::PixelL2 => {
            let d = g.sub(pred, target)?;
            let sq = g.square(d);
            Ok(g.mean_all(sq))
        }
        ReconMode::Perceptual => {
            let ex = extractor.ok_or_else(|| {
                DismoError::Invalid("perceptual mode requires a feature extractor".into())
            })?;
            let fp = ex.features(g, pred)?;
            let ft = ex.features(g, target)?;
            let mut total: Option<Tensor> = None;
            for ((p, w), (t, _)) in fp.into_iter().zip(ft) {
                let d = g.sub(p, t)?;
                let sq = g.square(d);
                let m = g.mean_all(sq);
                let term = g.mul_scalar(m, w);
                total = Some(match total {
                    None => term,
                    Some(acc) => g.add(acc, term)?,
                });
            }
            total.ok_or_else(|| DismoError::Invalid("extractor returned no layers".into()))
        }
    }
}

// ---------------------------------------------------------------------------
// Reconstruction + distribution penalty
// ---------------------------------------------------------------------------

/// Decoded image plus the separate terms of the core loss.
pub struct CsTerms {
    pub total: Tensor,
    pub recon: Tensor,
    pub penalty: Tensor,
    pub image: Tensor,
}

/// Core loss of the method: reconstruction of the target batch from the
/// given codes plus the distribution penalty delivered by the configured
/// constraint solution.
#[allow(clippy::too_many_arguments)]
pub fn cs_loss(
    g: &mut Graph,
    gen: &GeneratorState,
    bind: &Binding,
    c: Tensor,
    s: Tensor,
    target: Tensor,
    mode: ReconMode,
    extractor: Option<&dyn FeatureExtractor>,
    disc: Option<&Discriminator>,
) -> Result<CsTerms> {
    let (image, penalty) = gen.forward(g, bind, c, s, disc)?;
    let recon = reconstruction_loss(g, image, target, mode, extractor)?;
    let total = g.add(recon, penalty)?;
    Ok(CsTerms {
        total,
        recon,
        penalty,
        image,
    })
}

// ---------------------------------------------------------------------------
// Backbone + instance discrimination
// ---------------------------------------------------------------------------

/// Small strided convolutional encoder producing unit-norm feature rows.
/// The coarse spatial map is flattened (not pooled) before projection so
/// the features keep track of where things are, not just what they are.
pub struct Backbone {
    pub params: ParamSet,
    convs: Vec<Conv2d>,
    proj: Linear,
    pub feat_dim: usize,
    channels: Vec<usize>,
    image_size: usize,
}

impl Backbone {
    pub fn new(channels: &[usize], feat_dim: usize, image_size: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (k, &c_out) in channels.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut params,
                &mut rng,
                &format!("backbone.conv{k}"),
                c_in,
                c_out,
                2,
            ));
            c_in = c_out;
        }
        let spatial = (image_size >> channels.len()).max(1);
        let proj = Linear::new(
            &mut params,
            &mut rng,
            "backbone.proj",
            c_in * spatial * spatial,
            feat_dim,
        );
        Backbone {
            params,
            convs,
            proj,
            feat_dim,
            channels: channels.to_vec(),
            image_size,
        }
    }

    /// Feature rows on the graph: strided convs, flattened spatial map,
    /// projection, unit normalization.
    pub fn features_graph(&self, g: &mut Graph, bind: &Binding, x: Tensor) -> Result<Tensor> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, bind, h)?;
            h = g.leaky_relu(h, 0.2);
        }
        let sh = g.shape(h).to_vec();
        let flat = g.reshape(h, &[sh[0], sh[1] * sh[2] * sh[3]])?;
        let proj = self.proj.forward(g, bind, flat)?;
        g.l2_norm_rows(proj, 1e-8)
    }

    /// Frozen feature rows for a batch of images, outside any graph.
    pub fn features(&self, imgs: &ArrayD<f32>) -> Result<Array2<f32>> {
        let mut g = Graph::new();
        let bind = self.params.bind_const(&mut g);
        let x = g.constant(imgs.clone());
        let f = self.features_graph(&mut g, &bind, x)?;
        let d = g.data(f);
        let b = d.shape()[0];
        Ok(d
            .clone()
            .into_shape_with_order((b, self.feat_dim))
            .expect("feature shape"))
    }

    pub fn to_stored(&self) -> StoredBackbone {
        StoredBackbone {
            channels: self.channels.clone(),
            feat_dim: self.feat_dim,
            image_size: self.image_size,
            params: self.params.to_stored(),
        }
    }

    pub fn from_stored(stored: StoredBackbone) -> Result<Backbone> {
        let mut b = Backbone::new(&stored.channels, stored.feat_dim, stored.image_size, 0);
        let loaded = ParamSet::from_stored(stored.params)?;
        if loaded.len() != b.params.len() {
            return Err(DismoError::Corrupt {
                path: "<backbone>".into(),
                message: "parameter count mismatch".into(),
            });
        }
        for i in 0..loaded.len() {
            let id = crate::nn::ParamId(i);
            if loaded.name(id) != b.params.name(id)
                || loaded.get(id).shape() != b.params.get(id).shape()
            {
                return Err(DismoError::Corrupt {
                    path: "<backbone>".into(),
                    message: format!("parameter {} mismatch", loaded.name(id)),
                });
            }
            *b.params.get_mut(id) = loaded.get(id).clone();
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredBackbone {
    pub channels: Vec<usize>,
    pub feat_dim: usize,
    pub image_size: usize,
    pub params: Vec<(String, TensorData)>,
}

impl FeatureExtractor for Backbone {
    fn features(&self, g: &mut Graph, x: Tensor) -> Result<Vec<(Tensor, f32)>> {
        let bind = self.params.bind_const(g);
        Ok(vec![(self.features_graph(g, &bind, x)?, 1.0)])
    }
}

/// Random augmentations for instance-discrimination pretraining.
///
/// The augmentation set decides which image properties the pretrained
/// features ignore. The defaults perturb only appearance (global
/// brightness and independent per-channel gains) and leave geometry
/// untouched, so the features stay sensitive to where things are while
/// becoming indifferent to coloring — the invariance the swap objective
/// relies on.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Augment {
    /// Maximum translation as a fraction of the image side.
    pub max_shift_frac: f32,
    pub flip: bool,
    /// Brightness scale drawn from [1 - j, 1 + j].
    pub brightness_jitter: f32,
    /// Independent per-channel gain drawn from [1 - j, 1 + j].
    pub channel_jitter: f32,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            max_shift_frac: 0.0,
            flip: false,
            brightness_jitter: 0.3,
            channel_jitter: 0.6,
        }
    }
}

/// Apply a random shift / flip / brightness change; out-of-frame pixels
/// take the corner (background) value.
pub fn augment_image(img: &Array3<f32>, aug: &Augment, rng: &mut ChaCha20Rng) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let max_shift = ((h as f32) * aug.max_shift_frac).round() as i64;
    let dy = if max_shift > 0 {
        rng.random_range(-max_shift..=max_shift)
    } else {
        0
    };
    let dx = if max_shift > 0 {
        rng.random_range(-max_shift..=max_shift)
    } else {
        0
    };
    let flip = aug.flip && rng.random_bool(0.5);
    let scale = 1.0 + aug.brightness_jitter * (rng.random::<f32>() * 2.0 - 1.0);
    let gains: Vec<f32> = (0..c)
        .map(|_| scale * (1.0 + aug.channel_jitter * (rng.random::<f32>() * 2.0 - 1.0)))
        .collect();
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        let fill = img[[ci, 0, 0]];
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x } as i64 - dx;
                let sy = y as i64 - dy;
                let v = if sx >= 0 && sx < w as i64 && sy >= 0 && sy < h as i64 {
                    img[[ci, sy as usize, sx as usize]]
                } else {
                    fill
                };
                // jitter in [0, 1] space, then back to [-1, 1]
                let bright = ((v + 1.0) * 0.5 * gains[ci]).clamp(0.0, 1.0) * 2.0 - 1.0;
                out[[ci, y, x]] = bright;
            }
        }
    }
    out
}

/// Contrastive loss over unit-norm feature rows: candidate i is the
/// positive for anchor i, all others are negatives.
pub fn infonce(g: &mut Graph, anchors: Tensor, candidates: Tensor, temperature: f32) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(DismoError::config("temperature", "must be > 0"));
    }
    let b = g.shape(anchors)[0];
    if b < 2 {
        return Err(DismoError::Invalid(
            "contrastive loss needs batch size >= 2 (no negatives otherwise)".into(),
        ));
    }
    let sims = g.matmul_nt(anchors, candidates)?;
    let logits = g.mul_scalar(sims, 1.0 / temperature);
    let lse = g.logsumexp_rows(logits)?;
    let diag: Vec<usize> = (0..b).collect();
    let pos = g.pick_cols(logits, &diag)?;
    let per_row = g.sub(lse, pos)?;
    Ok(g.mean_all(per_row))
}

pub fn stack_images(batch: &[Array3<f32>]) -> ArrayD<f32> {
    let views: Vec<_> = batch.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views)
        .expect("stack")
        .into_dyn()
}

/// Pretrain a backbone with instance discrimination: two augmented views
/// of the same image attract, views of different images repel.
pub fn pretrain_backbone(
    dataset: &Dataset,
    aug: &Augment,
    temperature: f32,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Backbone> {
    if dataset.len() == 0 {
        return Err(DismoError::Dataset("empty dataset".into()));
    }
    if temperature <= 0.0 {
        return Err(DismoError::config("temperature", "must be > 0"));
    }
    let batch_size = batch_size.min(dataset.len()).max(2);
    let backbone = backbone_for(dataset.image_size, seed);
    let mut backbone = backbone;
    let mut opt = Adam::new(&backbone.params, 1e-3);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5851_F42D_4C95_7F2D);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..steps {
        order.shuffle(&mut rng);
        let idx = &order[..batch_size];
        let mut view_a = Vec::with_capacity(batch_size);
        let mut view_b = Vec::with_capacity(batch_size);
        for &i in idx {
            view_a.push(augment_image(&dataset.images[i], aug, &mut rng));
            view_b.push(augment_image(&dataset.images[i], aug, &mut rng));
        }
        let mut g = Graph::new();
        let bind = backbone.params.bind(&mut g);
        let xa = g.constant(stack_images(&view_a));
        let xb = g.constant(stack_images(&view_b));
        let fa = backbone.features_graph(&mut g, &bind, xa)?;
        let fb = backbone.features_graph(&mut g, &bind, xb)?;
        let loss = infonce(&mut g, fa, fb, temperature)?;
        let mut grads = g.backward(loss)?;
        opt.step(&mut backbone.params, &bind, &mut grads);
    }
    Ok(backbone)
}

/// Default backbone size for a given image resolution.
pub fn backbone_for(image_size: usize, seed: u64) -> Backbone {
    let channels: &[usize] = if image_size >= 64 {
        &[16, 32, 32]
    } else {
        &[8, 16]
    };
    Backbone::new(channels, 32, image_size, seed)
}

/// Fraction of sampled triples where two views of one image are closer in
/// feature space than a view of a different image.
pub fn triplet_audit(
    backbone: &Backbone,
    dataset: &Dataset,
    aug: &Augment,
    n_triples: usize,
    seed: u64,
) -> Result<f32> {
    if dataset.len() < 2 {
        return Err(DismoError::Dataset("audit needs at least 2 images".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n_triples {
        let i = rng.random_range(0..dataset.len());
        let mut j = rng.random_range(0..dataset.len());
        while j == i {
            j = rng.random_range(0..dataset.len());
        }
        let a1 = augment_image(&dataset.images[i], aug, &mut rng);
        let a2 = augment_image(&dataset.images[i], aug, &mut rng);
        let b = augment_image(&dataset.images[j], aug, &mut rng);
        let feats = backbone.features(&stack_images(&[a1, a2, b]))?;
        let pos: f32 = feats.row(0).dot(&feats.row(1));
        let neg: f32 = feats.row(0).dot(&feats.row(2));
        if pos > neg {
            hits += 1;
        }
    }
    Ok(hits as f32 / n_triples as f32)
}

/// Contrastive term over a frozen backbone's feature space. Anchors are
/// real images; candidate i must be generated from anchor i's content code
/// (with some other style), so gradients flow only through the generated
/// images.
pub fn instance_discrimination_loss(
    g: &mut Graph,
    backbone: &Backbone,
    anchors: Tensor,
    generated: Tensor,
    temperature: f32,
) -> Result<Tensor> {
    if g.shape(anchors) != g.shape(generated) {
        return Err(DismoError::Shape(format!(
            "anchors {:?} vs generated {:?}",
            g.shape(anchors),
            g.shape(generated)
        )));
    }
    let bind = backbone.params.bind_const(g);
    let fa = backbone.features_graph(g, &bind, anchors)?;
    let fa = g.detach(fa);
    let fc = backbone.features_graph(g, &bind, generated)?;
    infonce(g, fa, fc, temperature)
}

// ---------------------------------------------------------------------------
// Information bottleneck
// ---------------------------------------------------------------------------

/// Pull the per-dimension mean square of each code batch toward its
/// annealed capacity target.
pub fn information_bottleneck_loss(
    g: &mut Graph,
    c: Tensor,
    s: Tensor,
    schedule: &CapacitySchedule,
    step: u64,
) -> Result<Tensor> {
    schedule.validate()?;
    let cap_c = schedule.capacity(schedule.c_content_target, step);
    let cap_s = schedule.capacity(schedule.c_style_target, step);
    let c_sq = g.square(c);
    let c_ms = g.mean_all(c_sq);
    let c_dev = g.add_scalar(c_ms, -cap_c);
    let c_term = g.abs(c_dev);
    let s_sq = g.square(s);
    let s_ms = g.mean_all(s_sq);
    let s_dev = g.add_scalar(s_ms, -cap_s);
    let s_term = g.abs(s_dev);
    g.add(c_term, s_term)
}

// ---------------------------------------------------------------------------
// Full objective
// ---------------------------------------------------------------------------

/// Weighted sum of the three terms; rejects non-finite components, naming
/// the offending term.
pub fn total_loss(
    g: &mut Graph,
    l_cs: Tensor,
    l_ib: Tensor,
    l_id: Tensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    weights.validate()?;
    for (name, t) in [("L_CS", l_cs), ("L_IB", l_ib), ("L_ID", l_id)] {
        if !g.value(t).is_finite() {
            return Err(DismoError::NonFinite(name.into()));
        }
    }
    let a = g.mul_scalar(l_cs, weights.w_cs);
    let b = g.mul_scalar(l_ib, weights.w_ib);
    let c = g.mul_scalar(l_id, weights.w_id);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_sprite, sample_factors, DatasetSpec, SamplingMode};
    use crate::dismo::{DisMoConfig, Framework, PsiForm, Solution};
    use crate::generator::{build_generator, GeneratorSpec};
    use crate::nn::sample_standard_normal;
    use approx::assert_relative_eq;
    use ndarray::IxDyn;
    use std::path::PathBuf;

    fn toy_dataset(n: usize, size: usize) -> Dataset {
        let spec = DatasetSpec {
            n_images: n,
            image_size: size,
            content_sampling: SamplingMode::Uniform,
            n_domains: 1,
            seed: 77,
        };
        let images = (0..n)
            .map(|i| {
                let f = sample_factors(&spec, i);
                crate::data::image_to_array(&render_sprite(&f, size).unwrap())
            })
            .collect();
        Dataset {
            images,
            factors: None,
            image_size: size,
            root: PathBuf::new(),
        }
    }

    fn rand2(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f32> {
        Array2::from_shape_fn((r, c), |_| sample_standard_normal(rng))
    }

    fn small_gen(solution: Solution, psi: PsiForm) -> GeneratorState {
        let spec = GeneratorSpec {
            framework: Framework::Single,
            base_resolution: 4,
            out_resolution: 16,
            channels: vec![8, 8, 8],
            concat_baseline: false,
        };
        let cfg = DisMoConfig {
            solution,
            psi_form: psi,
            ..Default::default()
        };
        build_generator(&spec, 6, 6, &cfg, 42).unwrap()
    }

    #[test]
    fn weight_and_schedule_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            w_cs: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            w_id: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(CapacitySchedule {
            anneal_steps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn reconstruction_zero_on_identical_and_exact_on_constant_gap() {
        let mut g = Graph::new();
        let a = g.constant(ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), 0.25));
        let b = g.constant(ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), 0.75));
        for mode in [ReconMode::PixelL1, ReconMode::PixelL2] {
            let same = reconstruction_loss(&mut g, a, a, mode, None).unwrap();
            assert_eq!(g.value(same), 0.0);
        }
        let l1 = reconstruction_loss(&mut g, a, b, ReconMode::PixelL1, None).unwrap();
        let l2 = reconstruction_loss(&mut g, a, b, ReconMode::PixelL2, None).unwrap();
        assert_relative_eq!(g.value(l1), 0.5, max_relative = 1e-6);
        assert_relative_eq!(g.value(l2), 0.25, max_relative = 1e-6);
    }

    #[test]
    fn perceptual_with_identity_extractor_equals_pixel_l2() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let pred = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 4]), |_| sample_standard_normal(&mut rng));
        let tgt = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 4]), |_| sample_standard_normal(&mut rng));
        let mut g = Graph::new();
        let p = g.constant(pred);
        let t = g.constant(tgt);
        let l2 = reconstruction_loss(&mut g, p, t, ReconMode::PixelL2, None).unwrap();
        let perc =
            reconstruction_loss(&mut g, p, t, ReconMode::Perceptual, Some(&IdentityExtractor))
                .unwrap();
        assert_relative_eq!(g.value(l2), g.value(perc), max_relative = 1e-6);
        assert!(reconstruction_loss(&mut g, p, t, ReconMode::Perceptual, None).is_err());
    }

    #[test]
    fn cs_loss_instance_norm_is_reconstruction_only() {
        let gen = small_gen(Solution::InstanceNorm, PsiForm::StandardNormal);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let c = rand2(&mut rng, 2, 6);
        let s = rand2(&mut rng, 2, 6);
        let target = gen.generate(&c, &s).unwrap();
        let mut g = Graph::new();
        let bind = gen.params.bind(&mut g);
        let ct = g.constant(c.into_dyn());
        let st = g.constant(s.into_dyn());
        let tt = g.constant(target);
        let terms =
            cs_loss(&mut g, &gen, &bind, ct, st, tt, ReconMode::PixelL2, None, None).unwrap();
        assert_eq!(g.value(terms.penalty), 0.0);
        assert_eq!(g.value(terms.total), g.value(terms.recon));
        // target was produced by the same codes: perfect reconstruction
        assert_eq!(g.value(terms.recon), 0.0);
    }

    #[test]
    fn cs_loss_nll_at_mean_equals_log_normalizer() {
        let gen = small_gen(
            Solution::Nll,
            PsiForm::Normal {
                mu: 0.3,
                log_sigma: 0.0,
            },
        );
        let c = Array2::from_elem((2, 6), 0.3);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let s = rand2(&mut rng, 2, 6);
        let target = gen.generate(&c, &s).unwrap();
        let mut g = Graph::new();
        let bind = gen.params.bind(&mut g);
        let ct = g.constant(c.into_dyn());
        let st = g.constant(s.into_dyn());
        let tt = g.constant(target);
        let terms =
            cs_loss(&mut g, &gen, &bind, ct, st, tt, ReconMode::PixelL2, None, None).unwrap();
        // quadratic part vanishes at the mean; only log(sqrt(2 pi)) remains
        assert_relative_eq!(g.value(terms.penalty), 0.918_938_5, max_relative = 1e-5);
    }

    #[test]
    fn cs_loss_gradient_matches_finite_differences() {
        let gen = small_gen(Solution::InstanceNorm, PsiForm::StandardNormal);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let c = rand2(&mut rng, 2, 6);
        let s = rand2(&mut rng, 2, 6);
        let target = gen
            .generate(&rand2(&mut rng, 2, 6), &rand2(&mut rng, 2, 6))
            .unwrap();
        let eval = |c: &Array2<f32>| -> f32 {
            let mut g = Graph::new();
            let bind = gen.params.bind(&mut g);
            let ct = g.constant(c.clone().into_dyn());
            let st = g.constant(s.clone().into_dyn());
            let tt = g.constant(target.clone());
            let terms =
                cs_loss(&mut g, &gen, &bind, ct, st, tt, ReconMode::PixelL2, None, None).unwrap();
            g.value(terms.total)
        };
        let mut g = Graph::new();
        let bind = gen.params.bind(&mut g);
        let ct = g.leaf(c.clone().into_dyn(), true);
        let st = g.constant(s.clone().into_dyn());
        let tt = g.constant(target.clone());
        let terms =
            cs_loss(&mut g, &gen, &bind, ct, st, tt, ReconMode::PixelL2, None, None).unwrap();
        let grads = g.backward(terms.total).unwrap();
        let analytic = grads.get(ct).unwrap();
        let h = 1e-2f32;
        for &(i, j) in &[(0usize, 0usize), (1, 3), (0, 5)] {
            let mut plus = c.clone();
            plus[[i, j]] += h;
            let mut minus = c.clone();
            minus[[i, j]] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic[[i, j]];
            let denom = an.abs().max(fd.abs()).max(1e-2);
            assert!(
                (an - fd).abs() / denom < 1e-1,
                "grad mismatch at ({i},{j}): analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn infonce_matches_brute_force_softmax() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let b = 4;
        let d = 6;
        let fa = rand2(&mut rng, b, d);
        let fb = rand2(&mut rng, b, d);
        let tau = 0.3f32;
        let mut g = Graph::new();
        let at = g.constant(fa.clone().into_dyn());
        let bt = g.constant(fb.clone().into_dyn());
        let loss = infonce(&mut g, at, bt, tau).unwrap();
        // independent reimplementation from the similarity matrix
        let mut expected = 0.0f64;
        for i in 0..b {
            let logits: Vec<f64> = (0..b)
                .map(|j| (fa.row(i).dot(&fb.row(j)) / tau) as f64)
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            expected += lse - logits[i];
        }
        expected /= b as f64;
        assert_relative_eq!(g.value(loss), expected as f32, max_relative = 1e-4);
    }

    #[test]
    fn infonce_limit_cases() {
        // one-hot anchors matching candidates: loss vanishes at small temperature
        let eye = Array2::<f32>::eye(4);
        let mut g = Graph::new();
        let a = g.constant(eye.clone().into_dyn());
        let b = g.constant(eye.into_dyn());
        let tight = infonce(&mut g, a, b, 0.05).unwrap();
        assert!(g.value(tight) < 0.01, "got {}", g.value(tight));
        // identical features everywhere: uniform softmax, loss = ln(batch)
        let flat = Array2::<f32>::ones((4, 3));
        let fa = g.constant(flat.clone().into_dyn());
        let fb = g.constant(flat.into_dyn());
        let uniform = infonce(&mut g, fa, fb, 0.5).unwrap();
        assert_relative_eq!(g.value(uniform), (4.0f32).ln(), max_relative = 1e-5);
        // degenerate batch rejected
        let one = g.constant(Array2::<f32>::ones((1, 3)).into_dyn());
        assert!(infonce(&mut g, one, one, 0.5).is_err());
        assert!(infonce(&mut g, fa, fb, 0.0).is_err());
    }

    #[test]
    fn instance_discrimination_freezes_backbone_and_reaches_codes() {
        let backbone = Backbone::new(&[8], 16, 16, 6);
        let gen = small_gen(Solution::InstanceNorm, PsiForm::StandardNormal);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let c = rand2(&mut rng, 3, 6);
        let s = rand2(&mut rng, 3, 6);
        let anchors = gen.generate(&c, &s).unwrap();
        let mut g = Graph::new();
        let bind = gen.params.bind(&mut g);
        let ct = g.leaf(c.into_dyn(), true);
        let st = g.constant(s.into_dyn());
        let (img, _) = gen.forward(&mut g, &bind, ct, st, None).unwrap();
        let at = g.constant(anchors);
        let before = backbone.params.to_stored();
        let loss = instance_discrimination_loss(&mut g, &backbone, at, img, 0.1).unwrap();
        let grads = g.backward(loss).unwrap();
        let cg = grads.get(ct).expect("content grad through generated images");
        assert!(cg.iter().any(|&v| v != 0.0));
        // backbone was bound as constants: parameters unchanged, no grads kept
        let after = backbone.params.to_stored();
        assert_eq!(before.len(), after.len());
        for ((na, da), (nb, db)) in before.iter().zip(after.iter()) {
            assert_eq!(na, nb);
            assert_eq!(da.data, db.data);
        }
    }

    #[test]
    fn identical_images_give_log_batch_id_loss() {
        let backbone = Backbone::new(&[8], 16, 16, 8);
        let one = Array3::<f32>::from_elem((3, 16, 16), 0.2);
        let batch = stack_images(&[one.clone(), one.clone(), one.clone(), one]);
        let mut g = Graph::new();
        let a = g.constant(batch.clone());
        let b = g.constant(batch);
        let loss = instance_discrimination_loss(&mut g, &backbone, a, b, 0.2).unwrap();
        assert_relative_eq!(g.value(loss), (4.0f32).ln(), max_relative = 1e-4);
    }

    #[test]
    fn pretraining_beats_chance_on_triplet_audit() {
        let ds = toy_dataset(24, 16);
        let aug = Augment::default();
        let untrained = backbone_for(16, 9);
        let base = triplet_audit(&untrained, &ds, &aug, 200, 11).unwrap();
        let trained = pretrain_backbone(&ds, &aug, 0.1, 120, 8, 9).unwrap();
        let audited = triplet_audit(&trained, &ds, &aug, 200, 11).unwrap();
        assert!(
            audited >= 0.9,
            "trained audit {audited} (untrained was {base})"
        );
        assert!(audited > base);
        assert!(pretrain_backbone(&ds, &aug, 0.0, 1, 4, 0).is_err());
        let empty = Dataset {
            images: vec![],
            factors: None,
            image_size: 16,
            root: PathBuf::new(),
        };
        assert!(pretrain_backbone(&empty, &aug, 0.1, 1, 4, 0).is_err());
    }

    #[test]
    fn bottleneck_loss_matches_hand_computation() {
        let sched = CapacitySchedule {
            c_content_target: 1.0,
            c_style_target: 0.5,
            anneal_steps: 100,
        };
        // step 0, zero embeddings
        let mut g = Graph::new();
        let zc = g.constant(ArrayD::zeros(IxDyn(&[2, 4])));
        let zs = g.constant(ArrayD::zeros(IxDyn(&[2, 3])));
        let l0 = information_bottleneck_loss(&mut g, zc, zs, &sched, 0).unwrap();
        assert_eq!(g.value(l0), 0.0);
        // past annealing, style exactly at target: style term vanishes
        let s_at = Array2::from_elem((2, 3), (0.5f32).sqrt());
        let st = g.constant(s_at.into_dyn());
        let l1 = information_bottleneck_loss(&mut g, zc, st, &sched, 500).unwrap();
        assert_relative_eq!(g.value(l1), 1.0, max_relative = 1e-5); // content term only
        // random batch against the formula, mid-ramp
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let c = rand2(&mut rng, 3, 4);
        let s = rand2(&mut rng, 3, 5);
        let step = 40u64;
        let expect = (c.mapv(|v| v * v).mean().unwrap() - 0.4).abs()
            + (s.mapv(|v| v * v).mean().unwrap() - 0.2).abs();
        let ct = g.constant(c.into_dyn());
        let st2 = g.constant(s.into_dyn());
        let l2 = information_bottleneck_loss(&mut g, ct, st2, &sched, step).unwrap();
        assert_relative_eq!(g.value(l2), expect, max_relative = 1e-4);
    }

    #[test]
    fn total_loss_arithmetic_and_nan_guard() {
        let mut g = Graph::new();
        let cs = g.scalar(2.0);
        let ib = g.scalar(3.0);
        let id = g.scalar(5.0);
        let w = LossWeights {
            w_cs: 1.0,
            w_ib: 0.1,
            w_id: 0.01,
        };
        let total = total_loss(&mut g, cs, ib, id, &w).unwrap();
        assert_relative_eq!(g.value(total), 2.35, max_relative = 1e-6);
        let only_cs = total_loss(&mut g, cs, ib, id, &LossWeights::cs_only()).unwrap();
        assert_relative_eq!(g.value(only_cs), 2.0, max_relative = 1e-6);
        let bad = g.scalar(f32::NAN);
        let err = total_loss(&mut g, cs, bad, id, &w).unwrap_err();
        assert!(err.to_string().contains("L_IB"), "{err}");
    }

    #[test]
    fn backbone_round_trip_preserves_features() {
        let backbone = Backbone::new(&[8, 16], 16, 16, 15);
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let imgs = ArrayD::from_shape_fn(IxDyn(&[2, 3, 16, 16]), |_| sample_standard_normal(&mut rng));
        let before = backbone.features(&imgs).unwrap();
        let restored = Backbone::from_stored(backbone.to_stored()).unwrap();
        let after = restored.features(&imgs).unwrap();
        assert_eq!(before, after);
        // feature rows come out unit-norm
        for row in before.rows() {
            assert_relative_eq!(row.dot(&row).sqrt(), 1.0, max_relative = 1e-4);
        }
    }

    #[test]
    fn augmentation_preserves_shape_and_range() {
        let ds = toy_dataset(1, 16);
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let out = augment_image(&ds.images[0], &Augment::default(), &mut rng);
        assert_eq!(out.dim(), (3, 16, 16));
        assert!(out.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
}
