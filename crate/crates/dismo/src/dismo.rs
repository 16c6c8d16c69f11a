//! The content-style disentanglement module: shared-distribution
//! constraints on content codes and style-conditioned affine modulation.
//!
//! Content codes are pushed toward a shared distribution `psi` by one of
//! three interchangeable solutions: in-path normalization (instance norm
//! for a standard normal, L2 norm for the uniform sphere), a Gaussian
//! negative log-likelihood penalty, or an adversarial embedding
//! discriminator. The style code then scales and shifts the constrained
//! content through two fully connected heads: z = f_sigma(s) * c + f_mu(s).

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DismoError, Result};
use crate::graph::{Graph, Tensor};
use crate::nn::{sample_standard_normal, Adam, Binding, Linear, ParamSet};

pub const LOG_SQRT_TAU: f32 = 0.918_938_5; // log(2*pi)/2

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "form")]
pub enum PsiForm {
    StandardNormal,
    UniformSphere,
    Normal { mu: f32, log_sigma: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solution {
    InstanceNorm,
    L2Norm,
    Nll,
    Discriminator,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    Single,
    Multiple,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DisMoConfig {
    pub psi_form: PsiForm,
    pub solution: Solution,
    pub framework: Framework,
    pub eps: f32,
    /// Make the NLL mean / log-sigma learnable instead of fixed.
    pub nll_learnable: bool,
    /// Hidden widths of the embedding discriminator.
    pub disc_hidden: Vec<usize>,
}

impl Default for DisMoConfig {
    fn default() -> Self {
        DisMoConfig {
            psi_form: PsiForm::StandardNormal,
            solution: Solution::InstanceNorm,
            framework: Framework::Single,
            eps: 1e-5,
            nll_learnable: false,
            disc_hidden: vec![64, 64],
        }
    }
}

impl DisMoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps <= 0.0 {
            return Err(DismoError::config("dismo.eps", "must be positive"));
        }
        let ok = match self.solution {
            Solution::InstanceNorm => matches!(self.psi_form, PsiForm::StandardNormal),
            Solution::L2Norm => matches!(self.psi_form, PsiForm::UniformSphere),
            Solution::Nll => matches!(self.psi_form, PsiForm::Normal { .. }),
            // all three forms are samplable
            Solution::Discriminator => true,
            Solution::None => true,
        };
        if !ok {
            return Err(DismoError::config(
                "dismo.solution",
                format!(
                    "solution {:?} incompatible with psi form {:?}",
                    self.solution, self.psi_form
                ),
            ));
        }
        if let PsiForm::Normal { log_sigma, .. } = self.psi_form {
            if !log_sigma.is_finite() {
                return Err(DismoError::config("dismo.psi_form", "log_sigma not finite"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pure reference math (also used by the training graph builders below).
// ---------------------------------------------------------------------------

/// Zero-mean, unit population variance per row.
pub fn instance_normalize(c: &Array1<f32>, eps: f32) -> Result<Array1<f32>> {
    if c.len() < 2 {
        return Err(DismoError::Invalid(
            "instance normalization needs dimension >= 2".into(),
        ));
    }
    let m = c.mean().unwrap();
    let centered = c.mapv(|v| v - m);
    let var = centered.mapv(|v| v * v).mean().unwrap();
    Ok(centered.mapv(|v| v / (var + eps).sqrt()))
}

/// Unit L2 norm; the zero vector maps to itself (degenerate).
pub fn l2_normalize(c: &Array1<f32>, eps: f32) -> Result<Array1<f32>> {
    if c.len() < 2 {
        return Err(DismoError::Invalid("l2 normalization needs dimension >= 2".into()));
    }
    let n = c.mapv(|v| v * v).sum().sqrt();
    Ok(c.mapv(|v| v / (n + eps)))
}

/// Mean Gaussian negative log-density over batch and dimensions:
/// log(2*pi)/2 + log_sigma + (c - mu)^2 / (2 sigma^2).
pub fn nll_penalty(c_batch: &Array2<f32>, mu: f32, log_sigma: f32) -> Result<f32> {
    if !c_batch.iter().all(|v| v.is_finite()) {
        return Err(DismoError::Invalid("non-finite content batch".into()));
    }
    if !log_sigma.is_finite() {
        return Err(DismoError::Invalid("log_sigma must be finite".into()));
    }
    let inv_two_var = 0.5 * (-2.0 * log_sigma).exp();
    let acc: f64 = c_batch
        .iter()
        .map(|&v| {
            (LOG_SQRT_TAU + log_sigma) as f64 + ((v - mu) * (v - mu) * inv_two_var) as f64
        })
        .sum();
    Ok((acc / c_batch.len() as f64) as f32)
}

/// i.i.d. draws from a samplable psi form.
pub fn sample_psi(form: PsiForm, n: usize, d: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Array2::from_shape_fn((n, d), |_| sample_standard_normal(&mut rng));
    match form {
        PsiForm::StandardNormal => {}
        PsiForm::UniformSphere => {
            for mut row in out.rows_mut() {
                let norm = row.mapv(|v| v * v).sum().sqrt();
                if norm > 0.0 {
                    row.mapv_inplace(|v| v / norm);
                }
            }
        }
        PsiForm::Normal { mu, log_sigma } => {
            let sigma = log_sigma.exp();
            out.mapv_inplace(|v| mu + sigma * v);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Affine modulation heads (Eq. z = f_sigma(s) * c + f_mu(s)).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineHeads {
    pub f_sigma: Linear,
    pub f_mu: Linear,
    pub width: usize,
}

impl AffineHeads {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        d_style: usize,
        width: usize,
    ) -> Self {
        let f_sigma = Linear::new(params, rng, &format!("{name}.f_sigma"), d_style, width);
        let f_mu = Linear::new(params, rng, &format!("{name}.f_mu"), d_style, width);
        AffineHeads {
            f_sigma,
            f_mu,
            width,
        }
    }

    /// Scale head output, biased so an untrained head starts near identity.
    fn scale(&self, g: &mut Graph, bind: &Binding, s: Tensor) -> Result<Tensor> {
        let raw = self.f_sigma.forward(g, bind, s)?;
        Ok(g.add_scalar(raw, 1.0))
    }

    /// Vector carrier: c and the head outputs are [B, width].
    pub fn modulate_vec(
        &self,
        g: &mut Graph,
        bind: &Binding,
        c: Tensor,
        s: Tensor,
    ) -> Result<Tensor> {
        if g.shape(c) != [g.shape(s)[0], self.width] {
            return Err(DismoError::Shape(format!(
                "modulation width {} vs carrier {:?}",
                self.width,
                g.shape(c)
            )));
        }
        let sigma = self.scale(g, bind, s)?;
        let mu = self.f_mu.forward(g, bind, s)?;
        let scaled = g.mul(sigma, c)?;
        g.add(scaled, mu)
    }

    /// Feature-map carrier: c is [B, C, H, W], heads emit per-channel scalars.
    pub fn modulate_map(
        &self,
        g: &mut Graph,
        bind: &Binding,
        c: Tensor,
        s: Tensor,
    ) -> Result<Tensor> {
        if g.shape(c)[1] != self.width {
            return Err(DismoError::Shape(format!(
                "modulation width {} vs {} channels",
                self.width,
                g.shape(c)[1]
            )));
        }
        let sigma = self.scale(g, bind, s)?;
        let mu = self.f_mu.forward(g, bind, s)?;
        let scaled = g.mul_channels(c, sigma)?;
        g.add_channels(scaled, mu)
    }
}

// ---------------------------------------------------------------------------
// Embedding discriminator (adversarial psi constraint).
// ---------------------------------------------------------------------------

/// Small MLP classifying embeddings as psi samples (real) vs content codes
/// (fake). Trained one step per generator step.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub params: ParamSet,
    layers: Vec<Linear>,
    opt: Adam,
    pub d_in: usize,
}

impl Discriminator {
    pub fn new(d_in: usize, hidden: &[usize], lr: f32, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut prev = d_in;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(&mut params, &mut rng, &format!("disc.h{i}"), prev, h));
            prev = h;
        }
        layers.push(Linear::new(&mut params, &mut rng, "disc.out", prev, 1));
        let opt = Adam::new(&params, lr);
        Discriminator {
            params,
            layers,
            opt,
            d_in,
        }
    }

    fn logits(&self, g: &mut Graph, bind: &Binding, x: Tensor) -> Result<Tensor> {
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

    /// One adversarial step: trains the discriminator on (psi real, content
    /// fake) with the content batch detached, and reports both the
    /// discriminator BCE and the non-saturating generator-side loss.
    pub fn step(&mut self, c_batch: &Array2<f32>, psi: &Array2<f32>) -> Result<(f32, f32)> {
        if c_batch.ncols() != self.d_in || psi.ncols() != self.d_in {
            return Err(DismoError::Shape(format!(
                "discriminator expects width {}, got {} / {}",
                self.d_in,
                c_batch.ncols(),
                psi.ncols()
            )));
        }
        if c_batch.nrows() == 0 || psi.nrows() == 0 {
            return Err(DismoError::Invalid("empty discriminator batch".into()));
        }
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g);
        let real = g.constant(psi.clone().into_dyn());
        let fake = g.constant(c_batch.clone().into_dyn());
        let lr = self.logits(&mut g, &bind, real)?;
        let lf = self.logits(&mut g, &bind, fake)?;
        // BCE with logits: real labeled 1, fake labeled 0.
        let neg_lr = g.mul_scalar(lr, -1.0);
        let sp_real = g.softplus(neg_lr);
        let sp_fake = g.softplus(lf);
        let m_real = g.mean_all(sp_real);
        let m_fake = g.mean_all(sp_fake);
        let sum = g.add(m_real, m_fake)?;
        let disc_loss = g.mul_scalar(sum, 0.5);
        let mut grads = g.backward(disc_loss)?;
        let loss_val = g.value(disc_loss);

        // Generator-side value under the pre-update discriminator.
        let neg_lf = g.mul_scalar(lf, -1.0);
        let sp_gen = g.softplus(neg_lf);
        let gen_val = g.data(sp_gen).mean().unwrap();

        self.opt.step(&mut self.params, &bind, &mut grads);
        if !loss_val.is_finite() || !gen_val.is_finite() {
            return Err(DismoError::NonFinite("discriminator".into()));
        }
        Ok((loss_val, gen_val))
    }

    /// Differentiable non-saturating penalty -log D(c) on a live graph;
    /// discriminator weights enter as constants so no gradient reaches them.
    pub fn gen_penalty(&self, g: &mut Graph, c: Tensor) -> Result<Tensor> {
        let mut const_params = ParamSet::new();
        for (name, data) in self.params.iter() {
            const_params.add(name, data.clone());
        }
        let frozen: Vec<Tensor> = const_params
            .iter()
            .map(|(_, d)| g.constant(d.clone()))
            .collect();
        let bind = BindingFromTensors(frozen);
        let mut h = c;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = bind.0[layer.w.0];
            let b = bind.0[layer.b.0];
            let y = g.matmul(h, w)?;
            h = g.add_row(y, b)?;
            if i < last {
                h = g.leaky_relu(h, 0.2);
            }
        }
        let neg = g.mul_scalar(h, -1.0);
        let sp = g.softplus(neg);
        Ok(g.mean_all(sp))
    }

    /// Fraction of correct real/fake calls at threshold 0.5.
    pub fn accuracy(&self, c_batch: &Array2<f32>, psi: &Array2<f32>) -> Result<f32> {
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g);
        let real = g.constant(psi.clone().into_dyn());
        let fake = g.constant(c_batch.clone().into_dyn());
        let lr = self.logits(&mut g, &bind, real)?;
        let lf = self.logits(&mut g, &bind, fake)?;
        let correct = g.data(lr).iter().filter(|&&v| v > 0.0).count()
            + g.data(lf).iter().filter(|&&v| v <= 0.0).count();
        Ok(correct as f32 / (psi.nrows() + c_batch.nrows()) as f32)
    }

    pub fn to_stored(&self) -> StoredDiscriminator {
        let hidden = self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| self.params.get(l.w).shape()[1])
            .collect();
        StoredDiscriminator {
            d_in: self.d_in,
            hidden,
            params: self.params.to_stored(),
            opt: self.opt.clone(),
        }
    }

    pub fn from_stored(stored: StoredDiscriminator) -> Result<Discriminator> {
        let mut d = Discriminator::new(stored.d_in, &stored.hidden, stored.opt.lr, 0);
        let loaded = ParamSet::from_stored(stored.params)?;
        if loaded.len() != d.params.len() {
            return Err(DismoError::Corrupt {
                path: "<discriminator>".into(),
                message: "parameter count mismatch".into(),
            });
        }
        for i in 0..loaded.len() {
            let id = crate::nn::ParamId(i);
            if loaded.get(id).shape() != d.params.get(id).shape() {
                return Err(DismoError::Corrupt {
                    path: "<discriminator>".into(),
                    message: format!("parameter {} shape mismatch", loaded.name(id)),
                });
            }
            *d.params.get_mut(id) = loaded.get(id).clone();
        }
        d.opt = stored.opt;
        Ok(d)
    }
}

/// Serializable snapshot of a [`Discriminator`], optimizer state included.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredDiscriminator {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub params: Vec<(String, crate::nn::TensorData)>,
    pub opt: Adam,
}

struct BindingFromTensors(Vec<Tensor>);

// ---------------------------------------------------------------------------
// Psi-solution dispatch for a live graph.
// ---------------------------------------------------------------------------

/// Optional learnable NLL parameters bound into the current graph.
pub struct NllParams {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

/// Transform a content batch per the configured solution and return the
/// in-path carrier plus the scalar penalty term.
///
/// Normalization solutions transform in path with zero penalty; NLL and
/// discriminator pass the codes through and return a penalty; `none` is the
/// ablation identity.
pub fn apply_psi_solution(
    g: &mut Graph,
    c: Tensor,
    config: &DisMoConfig,
    nll_params: Option<&NllParams>,
    disc: Option<&Discriminator>,
) -> Result<(Tensor, Tensor)> {
    config.validate()?;
    let zero = g.scalar(0.0);
    match config.solution {
        Solution::None => Ok((c, zero)),
        Solution::InstanceNorm => Ok((g.norm_rows(c, config.eps)?, zero)),
        Solution::L2Norm => Ok((g.l2_norm_rows(c, config.eps)?, zero)),
        Solution::Nll => {
            let penalty = match (config.psi_form, nll_params) {
                (_, Some(p)) => nll_penalty_graph_learnable(g, c, p)?,
                (PsiForm::Normal { mu, log_sigma }, None) => {
                    nll_penalty_graph(g, c, mu, log_sigma)?
                }
                _ => unreachable!("validated"),
            };
            Ok((c, penalty))
        }
        Solution::Discriminator => match disc {
            // Adversarial constraint during training; the carrier itself is
            // untransformed, so inference without discriminator state is
            // plain pass-through.
            Some(d) => {
                let penalty = d.gen_penalty(g, c)?;
                Ok((c, penalty))
            }
            None => Ok((c, zero)),
        },
    }
}

/// Graph version of [`nll_penalty`] with fixed scalar parameters.
pub fn nll_penalty_graph(g: &mut Graph, c: Tensor, mu: f32, log_sigma: f32) -> Result<Tensor> {
    let centered = g.add_scalar(c, -mu);
    let sq = g.square(centered);
    let mean_sq = g.mean_all(sq);
    let inv_two_var = 0.5 * (-2.0 * log_sigma).exp();
    let quad = g.mul_scalar(mean_sq, inv_two_var);
    Ok(g.add_scalar(quad, LOG_SQRT_TAU + log_sigma))
}

/// Learnable variant: mu and log_sigma are [d_c] vectors on the graph.
pub fn nll_penalty_graph_learnable(g: &mut Graph, c: Tensor, p: &NllParams) -> Result<Tensor> {
    let neg_mu = g.mul_scalar(p.mu, -1.0);
    let centered = g.add_row(c, neg_mu)?;
    let sq = g.square(centered);
    let neg2ls = g.mul_scalar(p.log_sigma, -2.0);
    let inv_var = g.exp(neg2ls);
    let weighted = g.mul_row(sq, inv_var)?;
    let quad = g.mean_all(weighted);
    let quad = g.mul_scalar(quad, 0.5);
    let ls_mean = g.mean_all(p.log_sigma);
    let sum = g.add(quad, ls_mean)?;
    Ok(g.add_scalar(sum, LOG_SQRT_TAU))
}
