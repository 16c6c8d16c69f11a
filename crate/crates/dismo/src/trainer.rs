//! Joint latent optimization: per-image codes and generator parameters
//! trained together, with checkpointing and a fully seed-derived schedule
//! so interrupted runs resume bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Ix2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{array_to_image, Dataset};
use crate::dismo::{sample_psi, DisMoConfig, Discriminator, Solution, StoredDiscriminator};
use crate::error::{DismoError, Result};
use crate::generator::{build_generator, GeneratorState, GeneratorSpec, StoredGenerator};
use crate::graph::Graph;
use crate::latent::{init_embeddings, EmbeddingTable, InitScheme};
use crate::nn::{Adam, RowAdam, TensorData};
use crate::objectives::{
    cs_loss, information_bottleneck_loss, instance_discrimination_loss,
    pretrain_backbone, stack_images, total_loss, Augment, Backbone, CapacitySchedule, LossWeights,
    ReconMode, StoredBackbone,
};

pub const CHECKPOINT_VERSION: u32 = 1;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Everything a training run needs beyond the dataset itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_embeddings: f32,
    pub lr_generator: f32,
    pub lr_discriminator: f32,
    pub seed: u64,
    /// Write a sample grid every this many steps; 0 disables.
    pub eval_every: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub d_content: usize,
    pub d_style: usize,
    pub init: InitScheme,
    /// Decoupled weight decay on looked-up embedding rows; 0 disables.
    pub weight_decay_embeddings: f32,
    pub dismo: DisMoConfig,
    pub generator: GeneratorSpec,
    pub weights: LossWeights,
    pub capacity: CapacitySchedule,
    pub recon_mode: ReconMode,
    /// Contrastive temperature shared by backbone pretraining and the
    /// instance-discrimination term.
    pub temperature: f32,
    /// Positives for the contrastive term share the anchor's content code
    /// (true) or its style code (false).
    pub id_same_content: bool,
    pub backbone_steps: usize,
    pub backbone_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            lr_embeddings: 1e-2,
            lr_generator: 1e-3,
            lr_discriminator: 1e-3,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            d_content: 16,
            d_style: 16,
            init: InitScheme::Gaussian { std: 0.1 },
            weight_decay_embeddings: 0.0,
            dismo: DisMoConfig::default(),
            generator: GeneratorSpec::default_for(64),
            weights: LossWeights::default(),
            capacity: CapacitySchedule::default(),
            recon_mode: ReconMode::PixelL2,
            temperature: 0.1,
            id_same_content: true,
            backbone_steps: 400,
            backbone_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(DismoError::config("train.steps", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(DismoError::config(
                "train.batch_size",
                "must be >= 2 (the contrastive term needs negatives)",
            ));
        }
        for (name, lr) in [
            ("train.lr_embeddings", self.lr_embeddings),
            ("train.lr_generator", self.lr_generator),
            ("train.lr_discriminator", self.lr_discriminator),
        ] {
            if !(lr > 0.0) {
                return Err(DismoError::config(name, "must be > 0"));
            }
        }
        if self.d_content < 1 || self.d_style < 1 {
            return Err(DismoError::config("train.d_content", "dims must be >= 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(DismoError::config("train.temperature", "must be > 0"));
        }
        if self.weight_decay_embeddings < 0.0 {
            return Err(DismoError::config(
                "train.weight_decay_embeddings",
                "must be >= 0",
            ));
        }
        self.dismo.validate()?;
        self.generator.validate()?;
        if self.generator.framework != self.dismo.framework {
            return Err(DismoError::config(
                "generator.framework / dismo.framework",
                format!(
                    "{:?} vs {:?} must agree",
                    self.generator.framework, self.dismo.framework
                ),
            ));
        }
        self.weights.validate()?;
        self.capacity.validate()?;
        Ok(())
    }

    fn needs_backbone(&self) -> bool {
        self.weights.w_id > 0.0 || self.recon_mode == ReconMode::Perceptual
    }
}

/// One structured log line per optimization step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub total: f32,
    pub recon: f32,
    pub penalty: f32,
    pub l_ib: f32,
    pub l_id: f32,
    pub disc_loss: Option<f32>,
}

/// Serializable snapshot of a full training state.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub n_images: usize,
    pub image_size: usize,
    pub generator: StoredGenerator,
    pub content: TensorData,
    pub style: TensorData,
    pub opt_content: RowAdam,
    pub opt_style: RowAdam,
    pub opt_generator: Adam,
    pub discriminator: Option<StoredDiscriminator>,
    pub backbone: Option<StoredBackbone>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| DismoError::io(path, e))?;
        let mut w = BufWriter::new(file);
        ciborium::into_writer(self, &mut w).map_err(|e| DismoError::Corrupt {
            path: path.to_path_buf(),
            message: format!("write failed: {e}"),
        })?;
        w.flush().map_err(|e| DismoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| DismoError::io(path, e))?;
        let ck: Checkpoint =
            ciborium::from_reader(BufReader::new(file)).map_err(|e| DismoError::Corrupt {
                path: path.to_path_buf(),
                message: format!("unreadable checkpoint: {e}"),
            })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(DismoError::Version {
                found: ck.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(ck)
    }

    /// Rebuild the generator from this snapshot.
    pub fn generator(&self) -> Result<GeneratorState> {
        GeneratorState::from_stored(self.generator.clone())
    }

    pub fn embeddings(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::from_stored(self.content.clone(), self.style.clone())
    }

    pub fn backbone(&self) -> Result<Option<Backbone>> {
        self.backbone
            .clone()
            .map(Backbone::from_stored)
            .transpose()
    }
}

/// Live training state.
pub struct Trainer {
    pub config: TrainConfig,
    pub gen: GeneratorState,
    pub table: EmbeddingTable,
    pub opt_content: RowAdam,
    pub opt_style: RowAdam,
    pub opt_generator: Adam,
    pub disc: Option<Discriminator>,
    pub backbone: Option<Backbone>,
    pub step: u64,
    pub n_images: usize,
    pub image_size: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Trainer> {
        config.validate()?;
        if dataset.len() == 0 {
            return Err(DismoError::Dataset("empty dataset".into()));
        }
        if config.batch_size > dataset.len() {
            return Err(DismoError::config(
                "train.batch_size",
                format!(
                    "batch {} exceeds dataset size {}",
                    config.batch_size,
                    dataset.len()
                ),
            ));
        }
        if config.generator.out_resolution != dataset.image_size {
            return Err(DismoError::config(
                "generator.out_resolution",
                format!(
                    "generator emits {} px but dataset images are {} px",
                    config.generator.out_resolution, dataset.image_size
                ),
            ));
        }
        let gen = build_generator(
            &config.generator,
            config.d_content,
            config.d_style,
            &config.dismo,
            config.seed,
        )?;
        let table = init_embeddings(
            dataset.len(),
            config.d_content,
            config.d_style,
            config.init,
            config.seed ^ GOLDEN,
        )?;
        let disc = if config.dismo.solution == Solution::Discriminator {
            Some(Discriminator::new(
                config.d_content,
                &config.dismo.disc_hidden,
                config.lr_discriminator,
                config.seed ^ 0xD15C,
            ))
        } else {
            None
        };
        let backbone = if config.needs_backbone() {
            Some(pretrain_backbone(
                dataset,
                &Augment::default(),
                config.temperature,
                config.backbone_steps,
                config.backbone_batch,
                config.seed ^ 0xBAC0,
            )?)
        } else {
            None
        };
        let opt_content = RowAdam::new(dataset.len(), config.d_content, config.lr_embeddings);
        let opt_style = RowAdam::new(dataset.len(), config.d_style, config.lr_embeddings);
        let opt_generator = Adam::new(&gen.params, config.lr_generator);
        Ok(Trainer {
            config,
            gen,
            table,
            opt_content,
            opt_style,
            opt_generator,
            disc,
            backbone,
            step: 0,
            n_images: dataset.len(),
            image_size: dataset.image_size,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, dataset: &Dataset) -> Result<Trainer> {
        if ck.n_images != dataset.len() || ck.image_size != dataset.image_size {
            return Err(DismoError::Dataset(format!(
                "checkpoint trained on {} images at {} px, dataset has {} at {} px",
                ck.n_images,
                ck.image_size,
                dataset.len(),
                dataset.image_size
            )));
        }
        let gen = ck.generator()?;
        let table = ck.embeddings()?;
        let backbone = ck.backbone()?;
        let disc = ck
            .discriminator
            .clone()
            .map(Discriminator::from_stored)
            .transpose()?;
        Ok(Trainer {
            config: ck.config,
            gen,
            table,
            opt_content: ck.opt_content,
            opt_style: ck.opt_style,
            opt_generator: ck.opt_generator,
            disc,
            backbone,
            step: ck.step,
            n_images: ck.n_images,
            image_size: ck.image_size,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (content, style) = self.table.to_stored();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.config.clone(),
            n_images: self.n_images,
            image_size: self.image_size,
            generator: self.gen.to_stored(),
            content,
            style,
            opt_content: self.opt_content.clone(),
            opt_style: self.opt_style.clone(),
            opt_generator: self.opt_generator.clone(),
            discriminator: self.disc.as_ref().map(|d| d.to_stored()),
            backbone: self.backbone.as_ref().map(|b| b.to_stored()),
        }
    }

    /// Minibatch for a given step, derived purely from (seed, step):
    /// each epoch is a fresh without-replacement shuffle, consumed in
    /// batch-size slices.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.n_images;
        let batch = self.config.batch_size;
        let per_epoch = (n / batch).max(1) as u64;
        let epoch = step / per_epoch;
        let slot = (step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha20Rng::seed_from_u64(self.config.seed ^ epoch.wrapping_mul(GOLDEN) ^ 0xE9EC);
        order.shuffle(&mut rng);
        order[slot * batch..(slot + 1) * batch].to_vec()
    }

    /// Cyclic in-batch derangement offset for style swapping, drawn from
    /// the per-step stream.
    fn derangement_shift(&self, step: u64) -> usize {
        let mut rng =
            ChaCha20Rng::seed_from_u64(self.config.seed ^ step.wrapping_mul(GOLDEN) ^ 0xD30A);
        rng.random_range(1..self.config.batch_size)
    }

    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepRecord> {
        let idx = self.batch_indices(self.step);
        let batch: Vec<Array3<f32>> = idx.iter().map(|&i| dataset.images[i].clone()).collect();
        let targets = stack_images(&batch);

        // Adversarial constraint: one discriminator update on detached codes
        // before the generator-side pass.
        let mut disc_loss = None;
        if let Some(disc) = self.disc.as_mut() {
            let (cb, _) = self.table.lookup(&idx)?;
            let psi = sample_psi(
                self.config.dismo.psi_form,
                idx.len(),
                self.config.d_content,
                self.config.seed ^ self.step.wrapping_mul(GOLDEN) ^ 0x51D3,
            );
            let (dl, _) = disc.step(&cb, &psi)?;
            disc_loss = Some(dl);
        }

        let mut g = Graph::new();
        let bind = self.gen.params.bind(&mut g);
        let content_leaf = g.leaf(self.table.content.clone().into_dyn(), true);
        let style_leaf = g.leaf(self.table.style.clone().into_dyn(), true);
        let c = g.gather_rows(content_leaf, &idx)?;
        let s = g.gather_rows(style_leaf, &idx)?;
        let tt = g.constant(targets);

        let extractor: Option<&dyn crate::objectives::FeatureExtractor> =
            if self.config.recon_mode == ReconMode::Perceptual {
                Some(self.backbone.as_ref().expect("validated") as _)
            } else {
                None
            };
        let terms = cs_loss(
            &mut g,
            &self.gen,
            &bind,
            c,
            s,
            tt,
            self.config.recon_mode,
            extractor,
            self.disc.as_ref(),
        )?;

        let l_ib = if self.config.weights.w_ib > 0.0 {
            information_bottleneck_loss(&mut g, c, s, &self.config.capacity, self.step)?
        } else {
            g.scalar(0.0)
        };

        let mut touched_content = idx.clone();
        let mut touched_style = idx.clone();
        let l_id = if self.config.weights.w_id > 0.0 {
            let shift = self.derangement_shift(self.step);
            let partner: Vec<usize> = (0..idx.len())
                .map(|i| idx[(i + shift) % idx.len()])
                .collect();
            let backbone = self.backbone.as_ref().expect("validated");
            let regen = if self.config.id_same_content {
                // same content, borrowed style
                let s2 = g.gather_rows(style_leaf, &partner)?;
                touched_style.extend_from_slice(&partner);
                self.gen.forward(&mut g, &bind, c, s2, self.disc.as_ref())?.0
            } else {
                // same style, borrowed content
                let c2 = g.gather_rows(content_leaf, &partner)?;
                touched_content.extend_from_slice(&partner);
                self.gen.forward(&mut g, &bind, c2, s, self.disc.as_ref())?.0
            };
            instance_discrimination_loss(&mut g, backbone, tt, regen, self.config.temperature)?
        } else {
            g.scalar(0.0)
        };

        let total = total_loss(&mut g, terms.total, l_ib, l_id, &self.config.weights)?;
        let record = StepRecord {
            step: self.step,
            total: g.value(total),
            recon: g.value(terms.recon),
            penalty: g.value(terms.penalty),
            l_ib: g.value(l_ib),
            l_id: g.value(l_id),
            disc_loss,
        };

        let mut grads = g.backward(total)?;
        if let Some(gc) = grads.take(content_leaf) {
            let gc: Array2<f32> = to2(gc)?;
            self.opt_content
                .step_rows(&mut self.table.content, &gc, &touched_content);
        }
        if let Some(gs) = grads.take(style_leaf) {
            let gs: Array2<f32> = to2(gs)?;
            self.opt_style
                .step_rows(&mut self.table.style, &gs, &touched_style);
        }
        let wd = self.config.weight_decay_embeddings;
        if wd > 0.0 {
            let shrink = 1.0 - self.config.lr_embeddings * wd;
            for &r in touched_content.iter() {
                self.table.content.row_mut(r).mapv_inplace(|v| v * shrink);
            }
            for &r in touched_style.iter() {
                self.table.style.row_mut(r).mapv_inplace(|v| v * shrink);
            }
        }
        self.opt_generator
            .step(&mut self.gen.params, &bind, &mut grads);

        self.step += 1;
        Ok(record)
    }

    /// Run to `config.steps`, writing logs / grids / checkpoints under
    /// `out` when given. Returns the per-step records of this invocation.
    pub fn run(&mut self, dataset: &Dataset, out: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| DismoError::io(dir, e))?;
                let path = dir.join("train_log.jsonl");
                let file = File::options()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| DismoError::io(&path, e))?;
                Some(BufWriter::new(file))
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.step < self.config.steps {
            let record = self.train_step(dataset)?;
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(&record)
                    .map_err(|e| DismoError::Invalid(format!("log serialization: {e}")))?;
                writeln!(w, "{line}").map_err(|e| DismoError::io("train_log.jsonl", e))?;
            }
            let done = self.step;
            if let Some(dir) = out {
                if self.config.eval_every > 0 && done % self.config.eval_every == 0 {
                    self.write_sample_grid(dataset, &dir.join(format!("samples_{done:06}.png")))?;
                }
                if self.config.checkpoint_every > 0 && done % self.config.checkpoint_every == 0 {
                    self.checkpoint()
                        .save(&dir.join(format!("checkpoint_{done:06}.cbor")))?;
                }
            }
            history.push(record);
        }
        if let Some(w) = log.as_mut() {
            w.flush().map_err(|e| DismoError::io("train_log.jsonl", e))?;
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join("checkpoint.cbor"))?;
        }
        Ok(history)
    }

    /// Two-row panel: targets on top, current reconstructions below.
    pub fn write_sample_grid(&self, dataset: &Dataset, path: &Path) -> Result<()> {
        let k = dataset.len().min(8);
        let idx: Vec<usize> = (0..k).collect();
        let (c, s) = self.table.lookup(&idx)?;
        let recon = self.gen.generate(&c, &s)?;
        let size = self.image_size;
        let mut canvas = Array3::<f32>::from_elem((3, 2 * size, k * size), -1.0);
        for (col, &i) in idx.iter().enumerate() {
            let x0 = col * size;
            canvas
                .slice_mut(ndarray::s![.., 0..size, x0..x0 + size])
                .assign(&dataset.images[i]);
            canvas
                .slice_mut(ndarray::s![.., size..2 * size, x0..x0 + size])
                .assign(&recon.index_axis(ndarray::Axis(0), col));
        }
        array_to_image(&canvas)
            .save(path)
            .map_err(DismoError::Image)
    }
}

fn to2(a: ArrayD<f32>) -> Result<Array2<f32>> {
    a.into_dimensionality::<Ix2>()
        .map_err(|e| DismoError::Shape(format!("expected matrix gradient: {e}")))
}

/// Train from scratch; convenience wrapper over [`Trainer`].
pub fn train(
    config: TrainConfig,
    dataset: &Dataset,
    out: Option<&Path>,
) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let mut t = Trainer::new(config, dataset)?;
    let history = t.run(dataset, out)?;
    Ok((t.checkpoint(), history))
}
