//! Convolutional decoder from modulated latents to images.
//!
//! Two arrangements: the single framework constrains and modulates the
//! content code once before decoding; the multiple framework re-normalizes
//! and re-modulates the content carrier before every stage, each site with
//! its own affine heads reading a (possibly different) style code. A
//! concatenation mode with no modulation at all serves as the
//! entanglement baseline.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dismo::{
    apply_psi_solution, AffineHeads, DisMoConfig, Discriminator, Framework, NllParams,
};
use crate::error::{DismoError, Result};
use crate::graph::{Graph, Tensor};
use crate::nn::{init_gaussian, Binding, Conv2d, Linear, ParamId, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub framework: Framework,
    pub base_resolution: usize,
    pub out_resolution: usize,
    /// One entry per resolution from base to output; length = stages + 1.
    pub channels: Vec<usize>,
    /// Decode [c; s] directly with no modulation (entanglement baseline).
    pub concat_baseline: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::default_for(64)
    }
}

impl GeneratorSpec {
    pub fn default_for(out_resolution: usize) -> Self {
        let stages = (out_resolution as f32 / 4.0).log2() as usize;
        let full = [128usize, 128, 64, 32, 16, 8];
        GeneratorSpec {
            framework: Framework::Single,
            base_resolution: 4,
            out_resolution,
            channels: full[..=stages].to_vec(),
            concat_baseline: false,
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_resolution < 2 {
            return Err(DismoError::config("generator.base_resolution", "too small"));
        }
        let expected = self.base_resolution << self.stages();
        if expected != self.out_resolution {
            return Err(DismoError::config(
                "generator.channels",
                format!(
                    "out_resolution {} != base {} * 2^{} stages",
                    self.out_resolution,
                    self.base_resolution,
                    self.stages()
                ),
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(DismoError::config("generator.channels", "zero channel count"));
        }
        if self.concat_baseline && self.framework != Framework::Single {
            return Err(DismoError::config(
                "generator.concat_baseline",
                "concatenation baseline requires the single framework",
            ));
        }
        Ok(())
    }
}

pub struct GeneratorState {
    pub spec: GeneratorSpec,
    pub dismo: DisMoConfig,
    pub d_c: usize,
    pub d_s: usize,
    pub params: ParamSet,
    input_map: Linear,
    stage_convs: Vec<Conv2d>,
    to_rgb: Conv2d,
    pub heads: Vec<AffineHeads>,
    /// Learnable NLL constraint parameters, when enabled.
    nll_ids: Option<(ParamId, ParamId)>,
}

/// Deterministically construct generator parameters.
pub fn build_generator(
    spec: &GeneratorSpec,
    d_c: usize,
    d_s: usize,
    dismo: &DisMoConfig,
    seed: u64,
) -> Result<GeneratorState> {
    spec.validate()?;
    dismo.validate()?;
    if spec.framework != dismo.framework {
        return Err(DismoError::config(
            "generator.framework",
            format!(
                "generator framework {:?} disagrees with dismo.framework {:?}",
                spec.framework, dismo.framework
            ),
        ));
    }
    let mut params = ParamSet::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let base = spec.base_resolution;
    let c0 = spec.channels[0];
    let d_in = if spec.concat_baseline { d_c + d_s } else { d_c };
    let input_map = Linear::new(&mut params, &mut rng, "gen.input", d_in, c0 * base * base);
    let mut stage_convs = Vec::new();
    for k in 0..spec.stages() {
        stage_convs.push(Conv2d::new(
            &mut params,
            &mut rng,
            &format!("gen.stage{k}"),
            spec.channels[k],
            spec.channels[k + 1],
            1,
        ));
    }
    let to_rgb = Conv2d::new(
        &mut params,
        &mut rng,
        "gen.to_rgb",
        *spec.channels.last().unwrap(),
        3,
        1,
    );
    let mut heads = Vec::new();
    if !spec.concat_baseline {
        match spec.framework {
            Framework::Single => {
                heads.push(AffineHeads::new(&mut params, &mut rng, "gen.site0", d_s, d_c));
            }
            Framework::Multiple => {
                heads.push(AffineHeads::new(&mut params, &mut rng, "gen.site0", d_s, d_c));
                for k in 1..spec.stages() {
                    heads.push(AffineHeads::new(
                        &mut params,
                        &mut rng,
                        &format!("gen.site{k}"),
                        d_s,
                        spec.channels[k],
                    ));
                }
            }
        }
    }
    let nll_ids = if dismo.nll_learnable {
        let mu = params.add("gen.nll_mu", init_gaussian(&mut rng, &[d_c], 0.0));
        let ls = params.add("gen.nll_log_sigma", init_gaussian(&mut rng, &[d_c], 0.0));
        Some((mu, ls))
    } else {
        None
    };
    Ok(GeneratorState {
        spec: spec.clone(),
        dismo: dismo.clone(),
        d_c,
        d_s,
        params,
        input_map,
        stage_convs,
        to_rgb,
        heads,
        nll_ids,
    })
}

impl GeneratorState {
    pub fn n_sites(&self) -> usize {
        self.heads.len()
    }

    fn nll_params(&self, g_bind: &Binding) -> Option<NllParams> {
        self.nll_ids.map(|(mu, ls)| NllParams {
            mu: g_bind.tensor(mu),
            log_sigma: g_bind.tensor(ls),
        })
    }

    fn decode_base(&self, g: &mut Graph, bind: &Binding, z: Tensor) -> Result<Tensor> {
        let b = g.shape(z)[0];
        let base = self.spec.base_resolution;
        let mapped = self.input_map.forward(g, bind, z)?;
        g.reshape(mapped, &[b, self.spec.channels[0], base, base])
    }

    fn decode_stages(
        &self,
        g: &mut Graph,
        bind: &Binding,
        mut h: Tensor,
        styles: Option<&[Tensor]>,
        trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        let mut stage_outputs = Vec::new();
        for (k, conv) in self.stage_convs.iter().enumerate() {
            if k > 0 {
                if let Some(styles) = styles {
                    let normed = g.norm_channels(h, self.dismo.eps)?;
                    h = self.heads[k].modulate_map(g, bind, normed, styles[k])?;
                }
            }
            h = g.upsample_nearest2(h)?;
            h = conv.forward(g, bind, h)?;
            h = g.leaky_relu(h, 0.2);
            stage_outputs.push(h);
        }
        let rgb = self.to_rgb.forward(g, bind, h)?;
        if let Some(t) = trace {
            *t = stage_outputs;
        }
        Ok(g.tanh(rgb))
    }

    /// Single-framework decode; returns the image and the psi penalty.
    pub fn forward_single(
        &self,
        g: &mut Graph,
        bind: &Binding,
        c: Tensor,
        s: Tensor,
        disc: Option<&Discriminator>,
    ) -> Result<(Tensor, Tensor)> {
        if self.spec.concat_baseline {
            return Err(DismoError::Invalid(
                "state was built as the concatenation baseline".into(),
            ));
        }
        if self.spec.framework != Framework::Single {
            return Err(DismoError::Invalid("state uses the multiple framework".into()));
        }
        self.check_widths(g, c, s)?;
        let nll = self.nll_params(bind);
        let (constrained, penalty) = apply_psi_solution(g, c, &self.dismo, nll.as_ref(), disc)?;
        let z = self.heads[0].modulate_vec(g, bind, constrained, s)?;
        let h = self.decode_base(g, bind, z)?;
        let img = self.decode_stages(g, bind, h, None, None)?;
        Ok((img, penalty))
    }

    /// Multiple-framework decode with one style code per site.
    pub fn forward_multiple(
        &self,
        g: &mut Graph,
        bind: &Binding,
        c: Tensor,
        styles: &[Tensor],
        disc: Option<&Discriminator>,
    ) -> Result<(Tensor, Tensor)> {
        if self.spec.framework != Framework::Multiple {
            return Err(DismoError::Invalid("state uses the single framework".into()));
        }
        if styles.len() != self.n_sites() {
            return Err(DismoError::Invalid(format!(
                "expected {} style codes (one per site), got {}",
                self.n_sites(),
                styles.len()
            )));
        }
        for &s in styles {
            self.check_widths(g, c, s)?;
        }
        let nll = self.nll_params(bind);
        let (constrained, penalty) = apply_psi_solution(g, c, &self.dismo, nll.as_ref(), disc)?;
        let z0 = self.heads[0].modulate_vec(g, bind, constrained, styles[0])?;
        let h = self.decode_base(g, bind, z0)?;
        let img = self.decode_stages(g, bind, h, Some(styles), None)?;
        Ok((img, penalty))
    }

    /// Entanglement baseline: decode [c; s] without any modulation.
    pub fn forward_concat(
        &self,
        g: &mut Graph,
        bind: &Binding,
        c: Tensor,
        s: Tensor,
    ) -> Result<Tensor> {
        if !self.spec.concat_baseline {
            return Err(DismoError::Invalid(
                "state was not built with the concatenation flag".into(),
            ));
        }
        self.check_widths(g, c, s)?;
        let z = g.concat_cols(c, s)?;
        let h = self.decode_base(g, bind, z)?;
        self.decode_stages(g, bind, h, None, None)
    }

    /// Dispatch by framework, feeding every site the same style code.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        c: Tensor,
        s: Tensor,
        disc: Option<&Discriminator>,
    ) -> Result<(Tensor, Tensor)> {
        if self.spec.concat_baseline {
            let img = self.forward_concat(g, bind, c, s)?;
            let zero = g.scalar(0.0);
            return Ok((img, zero));
        }
        match self.spec.framework {
            Framework::Single => self.forward_single(g, bind, c, s, disc),
            Framework::Multiple => {
                let styles = vec![s; self.n_sites()];
                self.forward_multiple(g, bind, c, &styles, disc)
            }
        }
    }

    /// Decode a batch outside any training step.
    pub fn generate(&self, c: &Array2<f32>, s: &Array2<f32>) -> Result<ndarray::ArrayD<f32>> {
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g);
        let ct = g.constant(c.clone().into_dyn());
        let st = g.constant(s.clone().into_dyn());
        let (img, _) = self.forward(&mut g, &bind, ct, st, None)?;
        Ok(g.data(img).clone())
    }

    /// Multiple-framework decode with per-site styles, outside training.
    pub fn generate_mixed(&self, c: &Array2<f32>, styles: &[Array2<f32>]) -> Result<ndarray::ArrayD<f32>> {
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g);
        let ct = g.constant(c.clone().into_dyn());
        let sts: Vec<Tensor> = styles
            .iter()
            .map(|s| g.constant(s.clone().into_dyn()))
            .collect();
        let (img, _) = self.forward_multiple(&mut g, &bind, ct, &sts, None)?;
        Ok(g.data(img).clone())
    }

    fn check_widths(&self, g: &Graph, c: Tensor, s: Tensor) -> Result<()> {
        if g.shape(c)[1] != self.d_c || g.shape(s)[1] != self.d_s {
            return Err(DismoError::Shape(format!(
                "expected widths (d_c = {}, d_s = {}), got ({}, {})",
                self.d_c,
                self.d_s,
                g.shape(c)[1],
                g.shape(s)[1]
            )));
        }
        Ok(())
    }

    pub fn to_stored(&self) -> StoredGenerator {
        StoredGenerator {
            spec: self.spec.clone(),
            dismo: self.dismo.clone(),
            d_c: self.d_c,
            d_s: self.d_s,
            params: self.params.to_stored(),
        }
    }

    pub fn from_stored(stored: StoredGenerator) -> Result<GeneratorState> {
        let mut state = build_generator(&stored.spec, stored.d_c, stored.d_s, &stored.dismo, 0)?;
        let loaded = ParamSet::from_stored(stored.params)?;
        if loaded.len() != state.params.len() {
            return Err(DismoError::Corrupt {
                path: "<generator>".into(),
                message: format!(
                    "parameter count {} != expected {}",
                    loaded.len(),
                    state.params.len()
                ),
            });
        }
        for i in 0..loaded.len() {
            let id = ParamId(i);
            if loaded.name(id) != state.params.name(id)
                || loaded.get(id).shape() != state.params.get(id).shape()
            {
                return Err(DismoError::Corrupt {
                    path: "<generator>".into(),
                    message: format!("parameter {} mismatch", loaded.name(id)),
                });
            }
            *state.params.get_mut(id) = loaded.get(id).clone();
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredGenerator {
    pub spec: GeneratorSpec,
    pub dismo: DisMoConfig,
    pub d_c: usize,
    pub d_s: usize,
    pub params: Vec<(String, crate::nn::TensorData)>,
}
