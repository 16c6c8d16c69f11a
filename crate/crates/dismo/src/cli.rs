//! Command-line entry point: dataset generation, training (including the
//! fixed ablation suite), evaluation, qualitative probes, and amortized
//! encoding/translation. One command per process; exit code 0 on
//! success, 2 on validation failure, 3 on runtime or numerical abort.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array3;

use crate::config::{fnv1a, RunConfig};
use crate::data::{
    array_to_image, generate_dataset, image_to_array, load_dataset, Dataset, DatasetSpec,
    SamplingMode,
};
use crate::dismo::{Framework, PsiForm, Solution};
use crate::encoders::{train_encoders, translate, EncoderState};
use crate::error::{DismoError, Result};
use crate::eval::{
    analogy_grid, canonical_view_score, compute_report, content_transfer_metric, interpolate,
    leakage_metric, random_content_score, retrieve, strip_canvas, Distance, InterpolationAxis,
    LeakageProtocol, RetrievalSpace,
};
use crate::trainer::{train, Checkpoint, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "dismo",
    version,
    about = "Unsupervised content-style disentanglement via latent optimization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistArg {
    Normal,
    Uniform,
}

impl From<DistArg> for SamplingMode {
    fn from(d: DistArg) -> SamplingMode {
        match d {
            DistArg::Normal => SamplingMode::Normal,
            DistArg::Uniform => SamplingMode::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolutionArg {
    InstanceNorm,
    L2Norm,
    Nll,
    Discriminator,
    None,
}

impl From<SolutionArg> for Solution {
    fn from(s: SolutionArg) -> Solution {
        match s {
            SolutionArg::InstanceNorm => Solution::InstanceNorm,
            SolutionArg::L2Norm => Solution::L2Norm,
            SolutionArg::Nll => Solution::Nll,
            SolutionArg::Discriminator => Solution::Discriminator,
            SolutionArg::None => Solution::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FrameworkArg {
    Single,
    Multiple,
}

impl From<FrameworkArg> for Framework {
    fn from(f: FrameworkArg) -> Framework {
        match f {
            FrameworkArg::Single => Framework::Single,
            FrameworkArg::Multiple => Framework::Multiple,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Content,
    Style,
    Both,
}

impl From<AxisArg> for InterpolationAxis {
    fn from(a: AxisArg) -> InterpolationAxis {
        match a {
            AxisArg::Content => InterpolationAxis::Content,
            AxisArg::Style => InterpolationAxis::Style,
            AxisArg::Both => InterpolationAxis::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Content,
    Style,
}

impl From<SpaceArg> for RetrievalSpace {
    fn from(s: SpaceArg) -> RetrievalSpace {
        match s {
            SpaceArg::Content => RetrievalSpace::Content,
            SpaceArg::Style => RetrievalSpace::Style,
        }
    }
}

/// Training settings given on the command line; they override the config
/// file, which overrides the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub solution: Option<SolutionArg>,
    #[arg(long)]
    pub framework: Option<FrameworkArg>,
    #[arg(long)]
    pub lr_embeddings: Option<f32>,
    #[arg(long)]
    pub lr_generator: Option<f32>,
    #[arg(long)]
    pub w_ib: Option<f32>,
    #[arg(long)]
    pub w_id: Option<f32>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub d_content: Option<usize>,
    #[arg(long)]
    pub d_style: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
            cfg.dataset.seed = v;
        }
        if let Some(v) = self.solution {
            t.dismo.solution = v.into();
            t.dismo.psi_form = psi_for(t.dismo.solution, t.dismo.psi_form);
        }
        if let Some(v) = self.framework {
            t.dismo.framework = v.into();
            t.generator.framework = v.into();
        }
        if let Some(v) = self.lr_embeddings {
            t.lr_embeddings = v;
        }
        if let Some(v) = self.lr_generator {
            t.lr_generator = v;
        }
        if let Some(v) = self.w_ib {
            t.weights.w_ib = v;
        }
        if let Some(v) = self.w_id {
            t.weights.w_id = v;
        }
        if let Some(v) = self.eval_every {
            t.eval_every = v;
        }
        if let Some(v) = self.checkpoint_every {
            t.checkpoint_every = v;
        }
        if let Some(v) = self.d_content {
            t.d_content = v;
        }
        if let Some(v) = self.d_style {
            t.d_style = v;
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sprite dataset with a factor manifest.
    GenData {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_enum, default_value_t = DistArg::Normal)]
        content_dist: DistArg,
        #[arg(long, default_value_t = 1)]
        domains: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize embeddings and generator on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Compute quantitative metrics for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of {content_transfer, leakage, canonical},
        /// or "all".
        #[arg(long, default_value = "all")]
        metrics: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a content-by-style analogy grid.
    Analogy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated image indices whose content forms the columns.
        #[arg(long)]
        contents: String,
        /// Comma-separated image indices whose style forms the rows.
        #[arg(long)]
        styles: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a latent interpolation strip between two images.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Endpoint image indices as "i,j".
        #[arg(long)]
        pair: String,
        #[arg(long, value_enum, default_value_t = AxisArg::Content)]
        axis: AxisArg,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest neighbours of an image in code space.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: usize,
        #[arg(long, value_enum, default_value_t = SpaceArg::Content)]
        space: SpaceArg,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Infer content and style codes for an image file.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Encoder file; trained and written here first if absent
        /// (requires --data).
        #[arg(long)]
        encoders: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1500)]
        encoder_steps: usize,
    },
    /// Generate with one image's content and another's style.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        encoders: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1500)]
        encoder_steps: usize,
    },
    /// Train the fixed comparison suite and emit a results table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100)]
        n_pairs: usize,
        /// Keep the auxiliary losses on instead of the
        /// reconstruction-plus-penalty objective alone.
        #[arg(long, default_value_t = false)]
        full_objective: bool,
    },
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

pub fn parse_index_list(text: &str) -> Result<Vec<usize>> {
    let out: std::result::Result<Vec<usize>, _> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse::<usize>)
        .collect();
    let out = out.map_err(|e| DismoError::Invalid(format!("index list '{text}': {e}")))?;
    if out.is_empty() {
        return Err(DismoError::Invalid(format!("empty index list '{text}'")));
    }
    Ok(out)
}

fn parse_pair(text: &str) -> Result<(usize, usize)> {
    let v = parse_index_list(text)?;
    if v.len() != 2 {
        return Err(DismoError::Invalid(format!(
            "'{text}' must be exactly two indices"
        )));
    }
    Ok((v[0], v[1]))
}

/// The canonical carrier distribution for a solution, keeping whatever
/// compatible form was already configured.
fn psi_for(solution: Solution, current: PsiForm) -> PsiForm {
    match solution {
        Solution::InstanceNorm => PsiForm::StandardNormal,
        Solution::L2Norm => PsiForm::UniformSphere,
        Solution::Nll => match current {
            PsiForm::Normal { .. } => current,
            _ => PsiForm::Normal {
                mu: 0.0,
                log_sigma: 0.0,
            },
        },
        Solution::Discriminator | Solution::None => current,
    }
}

/// Stable hash of a training config, for run metadata.
pub fn train_config_hash(cfg: &TrainConfig) -> Result<String> {
    let text = toml::to_string(cfg)
        .map_err(|e| DismoError::Invalid(format!("config serialization: {e}")))?;
    Ok(format!("{:016x}", fnv1a(text.as_bytes())))
}

/// Read an image file, resize it to the model resolution, map to [-1, 1].
pub fn load_image(path: &Path, size: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(DismoError::Image)?;
    let resized = image::imageops::resize(
        &img.to_rgb8(),
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    Ok(image_to_array(&resized))
}

fn save_canvas(canvas: &Array3<f32>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| DismoError::io(parent, e))?;
        }
    }
    array_to_image(canvas).save(path).map_err(DismoError::Image)
}

fn load_or_train_encoders(
    encoders_path: &Path,
    ck: &Checkpoint,
    data: Option<&Path>,
    steps: usize,
) -> Result<EncoderState> {
    if encoders_path.exists() {
        return EncoderState::load(encoders_path);
    }
    let data = data.ok_or_else(|| {
        DismoError::config(
            "encoders",
            format!(
                "{} does not exist; pass --data to train encoders first",
                encoders_path.display()
            ),
        )
    })?;
    let dataset = load_dataset(data)?;
    let table = ck.embeddings()?;
    let enc = train_encoders(&dataset, &table, steps, 1e-3, 32, ck.config.seed)?;
    enc.save(encoders_path)?;
    Ok(enc)
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

fn cmd_gen_data(
    n: usize,
    size: usize,
    dist: DistArg,
    domains: u8,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let spec = DatasetSpec {
        n_images: n,
        image_size: size,
        content_sampling: dist.into(),
        n_domains: domains,
        seed,
    };
    spec.validate()?;
    let rows = generate_dataset(&spec, out)?;
    let spec_text = toml::to_string_pretty(&spec)
        .map_err(|e| DismoError::Invalid(format!("spec serialization: {e}")))?;
    let spec_path = out.join("config_resolved.toml");
    fs::write(&spec_path, &spec_text).map_err(|e| DismoError::io(&spec_path, e))?;
    let hash_path = out.join("config_hash.txt");
    fs::write(&hash_path, format!("{:016x}\n", fnv1a(spec_text.as_bytes())))
        .map_err(|e| DismoError::io(&hash_path, e))?;
    println!("wrote {} images to {}", rows.len(), out.display());
    Ok(())
}

fn resolve_train_config(
    config: Option<&Path>,
    overrides: &TrainOverrides,
    dataset: &Dataset,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg);
    // the dataset on disk wins over whatever the file says about it
    cfg.dataset.n_images = dataset.len();
    cfg.dataset.image_size = dataset.image_size;
    if cfg.train.generator.out_resolution != dataset.image_size {
        return Err(DismoError::config(
            "generator.out_resolution",
            format!(
                "generator renders {} px but the dataset is {} px; \
                 set [train.generator] out_resolution and channels to match",
                cfg.train.generator.out_resolution, dataset.image_size
            ),
        ));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    overrides: &TrainOverrides,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let cfg = resolve_train_config(config, overrides, &dataset)?;
    let hash = cfg.write_resolved(out)?;
    let (ck, history) = train(cfg.train.clone(), &dataset, Some(out))?;
    let last = history.last().map(|r| r.total).unwrap_or(f32::NAN);
    println!(
        "trained {} steps (config {hash}); final loss {last:.4}; checkpoint at {}",
        ck.step,
        out.join("checkpoint.cbor").display()
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    metrics: &str,
    out: &Path,
    n_pairs: usize,
    seed: u64,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let dataset = load_dataset(data)?;
    let gen = ck.generator()?;
    let table = ck.embeddings()?;
    let hash = train_config_hash(&ck.config)?;

    let requested: Vec<&str> = metrics.split(',').map(str::trim).collect();
    let known = ["all", "content_transfer", "leakage", "canonical"];
    for m in &requested {
        if !known.contains(m) {
            return Err(DismoError::config(
                "metrics",
                format!("unknown metric '{m}'; choose from {known:?}"),
            ));
        }
    }
    let want = |name: &str| requested.contains(&"all") || requested.contains(&name);

    let report = if want("content_transfer") && want("leakage") && want("canonical") {
        let full = compute_report(
            &gen,
            &table,
            &dataset,
            n_pairs,
            Distance::PixelMse,
            None,
            seed,
            ck.step,
            hash.clone(),
        )?;
        serde_json::to_value(&full)
            .map_err(|e| DismoError::Invalid(format!("report serialization: {e}")))?
    } else {
        let mut obj = serde_json::Map::new();
        obj.insert("seed".into(), seed.into());
        obj.insert("step".into(), ck.step.into());
        obj.insert("config_hash".into(), hash.clone().into());
        if want("content_transfer") {
            let v =
                content_transfer_metric(&gen, &table, &dataset, n_pairs, Distance::PixelMse, None, seed)?;
            obj.insert("content_transfer".into(), (v as f64).into());
        }
        if want("leakage") {
            let factors = dataset.factors_required()?.to_vec();
            for (key, protocol) in [
                ("style_from_content_accuracy", LeakageProtocol::ClassifyStyleFromContent),
                ("content_from_style_accuracy", LeakageProtocol::ClassifyContentFromStyle),
                ("pose_from_style_mae", LeakageProtocol::RegressPoseFromStyle),
                ("pose_from_content_mae", LeakageProtocol::RegressPoseFromContent),
            ] {
                let v = leakage_metric(&table, &factors, protocol, seed)?;
                obj.insert(key.into(), (v as f64).into());
            }
        }
        if want("canonical") {
            let styles: Vec<usize> = (0..dataset.len().min(32)).collect();
            let (dev, excl) = canonical_view_score(&gen, &table, &styles)?;
            let (rand_dev, _) = random_content_score(&gen, &table, &styles, seed)?;
            obj.insert("canonical_deviation".into(), dev.map(|v| v as f64).into());
            obj.insert("canonical_excluded".into(), excl.into());
            obj.insert(
                "random_content_deviation".into(),
                rand_dev.map(|v| v as f64).into(),
            );
        }
        serde_json::Value::Object(obj)
    };

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| DismoError::io(parent, e))?;
        }
    }
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| DismoError::Invalid(format!("report serialization: {e}")))?;
    fs::write(out, &text).map_err(|e| DismoError::io(out, e))?;
    println!("{text}");
    Ok(())
}

fn cmd_ablate(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    steps: Option<u64>,
    seed: Option<u64>,
    n_pairs: usize,
    full_objective: bool,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let overrides = TrainOverrides {
        steps,
        seed,
        ..TrainOverrides::default()
    };
    let mut base = resolve_train_config(config, &overrides, &dataset)?;
    if !full_objective {
        base.train.weights = crate::objectives::LossWeights::cs_only();
    }

    let suite: Vec<(&str, Box<dyn Fn(&mut TrainConfig)>)> = vec![
        (
            "concatenation",
            Box::new(|t| {
                t.generator.concat_baseline = true;
                t.dismo.solution = Solution::None;
            }),
        ),
        ("no_psi", Box::new(|t| t.dismo.solution = Solution::None)),
        (
            "single_in",
            Box::new(|t| t.dismo.solution = Solution::InstanceNorm),
        ),
        (
            "single_l2",
            Box::new(|t| {
                t.dismo.solution = Solution::L2Norm;
                t.dismo.psi_form = psi_for(Solution::L2Norm, t.dismo.psi_form);
            }),
        ),
        (
            "single_nll",
            Box::new(|t| {
                t.dismo.solution = Solution::Nll;
                t.dismo.psi_form = psi_for(Solution::Nll, t.dismo.psi_form);
            }),
        ),
        (
            "single_disc",
            Box::new(|t| t.dismo.solution = Solution::Discriminator),
        ),
        (
            "multiple_in",
            Box::new(|t| {
                t.dismo.solution = Solution::InstanceNorm;
                t.dismo.framework = Framework::Multiple;
                t.generator.framework = Framework::Multiple;
            }),
        ),
    ];

    fs::create_dir_all(out).map_err(|e| DismoError::io(out, e))?;
    let factors = dataset.factors_required()?.to_vec();
    let seed = base.train.seed;
    let mut rows = Vec::new();
    for (name, mutate) in &suite {
        let mut cfg = base.clone();
        mutate(&mut cfg.train);
        cfg.validate()?;
        let run_dir = out.join(name);
        cfg.write_resolved(&run_dir)?;
        let (ck, _) = train(cfg.train.clone(), &dataset, Some(&run_dir))?;
        let gen = ck.generator()?;
        let table = ck.embeddings()?;
        let transfer =
            content_transfer_metric(&gen, &table, &dataset, n_pairs, Distance::PixelMse, None, seed)?;
        let sfc = leakage_metric(
            &table,
            &factors,
            LeakageProtocol::ClassifyStyleFromContent,
            seed,
        )?;
        let pfs = leakage_metric(&table, &factors, LeakageProtocol::RegressPoseFromStyle, seed)?;
        let pfc = leakage_metric(
            &table,
            &factors,
            LeakageProtocol::RegressPoseFromContent,
            seed,
        )?;
        rows.push(serde_json::json!({
            "configuration": name,
            "content_transfer": transfer,
            "style_from_content_accuracy": sfc,
            "pose_from_style_mae": pfs,
            "pose_from_content_mae": pfc,
        }));
        println!("finished {name}: content_transfer {transfer:.4}");
    }

    let json_path = out.join("ablation.json");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&rows)
            .map_err(|e| DismoError::Invalid(format!("table serialization: {e}")))?,
    )
    .map_err(|e| DismoError::io(&json_path, e))?;

    let mut table_text = format!(
        "{:<16} {:>16} {:>24} {:>20} {:>22}\n",
        "configuration", "content_transfer", "style_from_content_acc", "pose_from_style_mae",
        "pose_from_content_mae"
    );
    for r in &rows {
        table_text.push_str(&format!(
            "{:<16} {:>16.4} {:>24.4} {:>20.4} {:>22.4}\n",
            r["configuration"].as_str().unwrap(),
            r["content_transfer"].as_f64().unwrap(),
            r["style_from_content_accuracy"].as_f64().unwrap(),
            r["pose_from_style_mae"].as_f64().unwrap(),
            r["pose_from_content_mae"].as_f64().unwrap(),
        ));
    }
    let table_path = out.join("ablation_table.txt");
    fs::write(&table_path, &table_text).map_err(|e| DismoError::io(&table_path, e))?;
    print!("{table_text}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            n,
            size,
            content_dist,
            domains,
            seed,
            out,
        } => cmd_gen_data(n, size, content_dist, domains, seed, &out),
        Command::Train {
            config,
            data,
            out,
            overrides,
        } => cmd_train(config.as_deref(), &data, &out, &overrides),
        Command::Eval {
            checkpoint,
            data,
            metrics,
            out,
            n_pairs,
            seed,
        } => cmd_eval(&checkpoint, &data, &metrics, &out, n_pairs, seed),
        Command::Analogy {
            checkpoint,
            data,
            contents,
            styles,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let canvas = analogy_grid(
                &ck.generator()?,
                &ck.embeddings()?,
                &dataset,
                &parse_index_list(&contents)?,
                &parse_index_list(&styles)?,
            )?;
            save_canvas(&canvas, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Interpolate {
            checkpoint,
            pair,
            axis,
            steps,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let frames = interpolate(
                &ck.generator()?,
                &ck.embeddings()?,
                parse_pair(&pair)?,
                axis.into(),
                steps,
            )?;
            save_canvas(&strip_canvas(&frames)?, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Retrieve {
            checkpoint,
            query,
            space,
            k,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let hits = retrieve(&ck.embeddings()?, query, space.into(), k)?;
            println!(
                "{}",
                serde_json::json!({ "query": query, "neighbours": hits })
            );
            Ok(())
        }
        Command::Encode {
            checkpoint,
            encoders,
            image,
            data,
            encoder_steps,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let enc = load_or_train_encoders(&encoders, &ck, data.as_deref(), encoder_steps)?;
            let img = load_image(&image, ck.image_size)?;
            let (c, s) = enc.encode(&img)?;
            println!(
                "{}",
                serde_json::json!({
                    "content": c.row(0).to_vec(),
                    "style": s.row(0).to_vec(),
                })
            );
            Ok(())
        }
        Command::Translate {
            checkpoint,
            encoders,
            content,
            style,
            out,
            data,
            encoder_steps,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let enc = load_or_train_encoders(&encoders, &ck, data.as_deref(), encoder_steps)?;
            let gen = ck.generator()?;
            let content_img = load_image(&content, ck.image_size)?;
            let style_img = load_image(&style, ck.image_size)?;
            let result = translate(&gen, &enc, &content_img, &style_img)?;
            save_canvas(&result, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Ablate {
            config,
            data,
            out,
            steps,
            seed,
            n_pairs,
            full_objective,
        } => cmd_ablate(
            config.as_deref(),
            &data,
            &out,
            steps,
            seed,
            n_pairs,
            full_objective,
        ),
    }
}

/// 2 for anything a user can fix in the invocation or config, 3 for
/// aborts at runtime (I/O, corrupt artifacts, non-finite losses).
pub fn error_exit_code(e: &DismoError) -> i32 {
    match e {
        DismoError::NonFinite(_)
        | DismoError::Io { .. }
        | DismoError::Image(_)
        | DismoError::Corrupt { .. } => 3,
        _ => 2,
    }
}

/// Run the CLI on explicit arguments; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap uses 0 for --help/--version and 2 for usage errors
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            error_exit_code(&e)
        }
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}
