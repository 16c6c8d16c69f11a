//! Acceptance suite: one pass/fail line per criterion, with pinned
//! tolerances. Criteria that need trained models share a reduced budget
//! (small sprite set, few hundred steps) sized for a single CPU core;
//! the claims checked are orderings and margins, not absolute scores.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{array, Array2, Array3, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use dismo::data::{
    generate_dataset, image_to_array, render_sprite, sample_factors, DatasetSpec, Dataset,
    SamplingMode,
};
use dismo::dismo::{
    instance_normalize, l2_normalize, nll_penalty, AffineHeads, DisMoConfig, Framework, PsiForm,
    Solution,
};
use dismo::encoders::{encoder_l1, train_encoders, translate, zero_predictor_l1};
use dismo::eval::{
    canonical_view_score, content_transfer_metric, frame_centroids, leakage_metric,
    random_content_score, Distance, LeakageProtocol,
};
use dismo::generator::{build_generator, GeneratorSpec, GeneratorState};
use dismo::graph::Graph;
use dismo::latent::EmbeddingTable;
use dismo::nn::ParamId;
use dismo::objectives::{cs_loss, LossWeights, ReconMode};
use dismo::trainer::{train, Checkpoint, TrainConfig, Trainer};

// ---------------------------------------------------------------------------
// Shared reduced budget (single CPU core; see repository docs)
// ---------------------------------------------------------------------------

const N_IMAGES: usize = 256;
const IMG: usize = 32;
const STEPS: u64 = 600;
const SEEDS: [u64; 3] = [0, 1, 2];
const N_PAIRS: usize = 100;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) -> bool {
    println!(
        "criterion {criterion} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn make_dataset(mode: SamplingMode, seed: u64) -> Dataset {
    let spec = DatasetSpec {
        n_images: N_IMAGES,
        image_size: IMG,
        content_sampling: mode,
        n_domains: 1,
        seed,
    };
    let factors: Vec<_> = (0..N_IMAGES).map(|i| sample_factors(&spec, i)).collect();
    let images = factors
        .iter()
        .map(|f| image_to_array(&render_sprite(f, IMG).unwrap()))
        .collect();
    Dataset {
        images,
        factors: Some(factors),
        image_size: IMG,
        root: PathBuf::new(),
    }
}

fn arm_config(solution: Solution, framework: Framework, concat: bool, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        steps: STEPS,
        batch_size: 16,
        seed,
        weights: LossWeights::cs_only(),
        ..TrainConfig::default()
    };
    cfg.dismo.solution = solution;
    cfg.dismo.psi_form = match solution {
        Solution::L2Norm => PsiForm::UniformSphere,
        Solution::Nll => PsiForm::Normal {
            mu: 0.0,
            log_sigma: 0.0,
        },
        _ => PsiForm::StandardNormal,
    };
    cfg.dismo.framework = framework;
    cfg.generator = GeneratorSpec {
        framework,
        out_resolution: IMG,
        channels: vec![32, 32, 16, 8],
        concat_baseline: concat,
        ..GeneratorSpec::default()
    };
    cfg.validate().expect("arm config must validate");
    cfg
}

struct Arm {
    gen: GeneratorState,
    table: EmbeddingTable,
    final_recon: f32,
}

fn train_arm(dataset: &Dataset, cfg: TrainConfig) -> Arm {
    let (ck, history) = train(cfg, dataset, None).expect("training run");
    let tail: Vec<f32> = history
        .iter()
        .rev()
        .take(20)
        .map(|r| r.recon)
        .collect();
    let final_recon = tail.iter().sum::<f32>() / tail.len() as f32;
    Arm {
        gen: ck.generator().unwrap(),
        table: ck.embeddings().unwrap(),
        final_recon,
    }
}

fn transfer(arm: &Arm, dataset: &Dataset) -> f32 {
    content_transfer_metric(
        &arm.gen,
        &arm.table,
        dataset,
        N_PAIRS,
        Distance::PixelMse,
        None,
        777,
    )
    .unwrap()
}

fn median3(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

// ---------------------------------------------------------------------------
// Criterion 1: math unit suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_math_unit_suite() {
    let t0 = Instant::now();
    let mut ok = true;
    let eps = 1e-5f32;

    // instance normalization: zero mean, unit variance, idempotent,
    // invariant to affine transformations of its input
    let c = array![2.0f32, -1.0, 0.5, 4.0, -3.0];
    let n = instance_normalize(&c, eps).unwrap();
    let mean = n.mean().unwrap();
    let var = n.mapv(|v| v * v).mean().unwrap();
    ok &= mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3;
    let twice = instance_normalize(&n, eps).unwrap();
    ok &= n
        .iter()
        .zip(twice.iter())
        .all(|(a, b)| (a - b).abs() < 1e-4);
    let affine = c.mapv(|v| 3.0 * v + 7.0);
    let n_affine = instance_normalize(&affine, eps).unwrap();
    ok &= n
        .iter()
        .zip(n_affine.iter())
        .all(|(a, b)| (a - b).abs() < 1e-3);

    // l2 normalization: unit norm, scale invariance
    let l = l2_normalize(&c, eps).unwrap();
    let norm: f32 = l.mapv(|v| v * v).sum().sqrt();
    ok &= (norm - 1.0).abs() < 1e-4;
    let l_scaled = l2_normalize(&c.mapv(|v| 5.0 * v), eps).unwrap();
    ok &= l
        .iter()
        .zip(l_scaled.iter())
        .all(|(a, b)| (a - b).abs() < 1e-4);

    // affine modulation: identity when heads emit (1, 0); arithmetic case
    let mut g = Graph::new();
    let mut params = dismo::nn::ParamSet::new();
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let heads = AffineHeads::new(&mut params, &mut rng, "acc", 3, 4);
    for id in [heads.f_sigma.w, heads.f_sigma.b, heads.f_mu.w, heads.f_mu.b] {
        params.get_mut(id).fill(0.0); // raw 0 => scale 1, shift 0
    }
    let bind = params.bind(&mut g);
    let cv = array![[1.0f32, -2.0, 0.5, 3.0]];
    let ct = g.constant(cv.clone().into_dyn());
    let st = g.constant(Array2::<f32>::zeros((1, 3)).into_dyn());
    let z = heads.modulate_vec(&mut g, &bind, ct, st).unwrap();
    ok &= g
        .data(z)
        .iter()
        .zip(cv.iter())
        .all(|(a, b)| (a - b).abs() < 1e-6);
    params.get_mut(heads.f_sigma.b).fill(1.0); // scale 2
    params.get_mut(heads.f_mu.b).fill(-0.5); // shift -0.5
    let mut g = Graph::new();
    let bind = params.bind(&mut g);
    let ct = g.constant(cv.clone().into_dyn());
    let st = g.constant(Array2::<f32>::zeros((1, 3)).into_dyn());
    let z = heads.modulate_vec(&mut g, &bind, ct, st).unwrap();
    ok &= g
        .data(z)
        .iter()
        .zip(cv.iter())
        .all(|(a, b)| (a - (2.0 * b - 0.5)).abs() < 1e-5);

    // negative log likelihood penalty: closed form at the mean, convex in
    // the codes, finite-difference gradient at relative tolerance 1e-4
    let at_mean = nll_penalty(&Array2::from_elem((4, 6), 0.3), 0.3, 0.0).unwrap();
    ok &= (at_mean - 0.918_938_5).abs() < 1e-5;
    let f = |x: f32| nll_penalty(&Array2::from_elem((1, 1), x), 0.0, 0.0).unwrap();
    for x in [-1.0f32, -0.2, 0.4, 1.3] {
        let h = 0.05f32;
        let second = (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
        ok &= second > 0.0; // convexity in the code
    }
    // backward-pass gradient against the closed-form derivative
    // (c - mu) / sigma^2 averaged over rows, relative tolerance 1e-4
    {
        let c0 = array![[0.7f32, -0.4, 1.1], [0.2, 0.9, -1.3]];
        let (mu, log_sigma) = (0.1f32, 0.2f32);
        let mut g = Graph::new();
        let leaf = g.leaf(c0.clone().into_dyn(), true);
        let pen = dismo::dismo::nll_penalty_graph(&mut g, leaf, mu, log_sigma).unwrap();
        let grads = g.backward(pen).unwrap();
        let an = grads.get(leaf).unwrap();
        // the penalty is the per-element mean of the negative log density
        let count = c0.len() as f32;
        for (idx, &a) in an.iter().enumerate() {
            let x = c0.as_slice().unwrap()[idx];
            let expected = (x - mu) / (2.0 * log_sigma).exp() / count;
            let pass = (a - expected).abs() / expected.abs().max(1e-6) < 1e-4;
            if !pass {
                eprintln!("nll grad[{idx}]: analytic {a} vs closed form {expected}");
            }
            ok &= pass;
        }
    }

    let elapsed = t0.elapsed();
    ok &= elapsed.as_secs() < 60;
    assert!(report(
        1,
        "math unit suite",
        ok,
        &format!("norms, modulation and density oracles in {elapsed:.2?}")
    ));
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient reach
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_gradient_reach() {
    let t0 = Instant::now();
    let mut ok = true;
    let mut detail = String::new();
    for framework in [Framework::Single, Framework::Multiple] {
        let dismo_cfg = DisMoConfig {
            solution: Solution::InstanceNorm,
            framework,
            ..DisMoConfig::default()
        };
        let spec = GeneratorSpec {
            framework,
            out_resolution: 16,
            channels: vec![16, 16, 8],
            ..GeneratorSpec::default()
        };
        let state = build_generator(&spec, 8, 8, &dismo_cfg, 1).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let c_data = Array2::from_shape_fn((2, 8), |_| rng.random_range(-1.0f32..1.0));
        let s_data = Array2::from_shape_fn((2, 8), |_| rng.random_range(-1.0f32..1.0));
        let target: ArrayD<f32> =
            ArrayD::from_shape_fn(vec![2, 3, 16, 16], |_| rng.random_range(-1.0f32..1.0));

        let mut g = Graph::new();
        let bind = state.params.bind(&mut g);
        let c = g.leaf(c_data.into_dyn(), true);
        let s = g.leaf(s_data.into_dyn(), true);
        let tt = g.constant(target);
        let terms = cs_loss(
            &mut g,
            &state,
            &bind,
            c,
            s,
            tt,
            ReconMode::PixelL2,
            None,
            None,
        )
        .unwrap();
        let grads = g.backward(terms.total).unwrap();
        for t in [c, s] {
            ok &= grads
                .get(t)
                .map(|gr| gr.iter().any(|&v| v != 0.0))
                .unwrap_or(false);
        }
        let mut nonzero = 0usize;
        for i in 0..state.params.len() {
            let id = ParamId(i);
            let has = grads
                .get(bind.tensor(id))
                .map(|gr| gr.iter().any(|&v| v != 0.0))
                .unwrap_or(false);
            if has {
                nonzero += 1;
            } else {
                ok = false;
            }
        }
        detail.push_str(&format!(
            "{framework:?}: {nonzero}/{} params reached; ",
            state.params.len()
        ));
    }
    let elapsed = t0.elapsed();
    ok &= elapsed.as_secs() < 60;
    assert!(report(
        2,
        "gradient reach",
        ok,
        &format!("{detail}{elapsed:.2?}")
    ));
}

// ---------------------------------------------------------------------------
// Criterion 8: reproducibility
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_reproducibility() {
    let mut ok = true;

    // identical manifests
    let tmp = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        n_images: 24,
        image_size: 32,
        content_sampling: SamplingMode::Normal,
        n_domains: 1,
        seed: 5,
    };
    generate_dataset(&spec, &tmp.path().join("a")).unwrap();
    generate_dataset(&spec, &tmp.path().join("b")).unwrap();
    let ma = std::fs::read(tmp.path().join("a/manifest.jsonl")).unwrap();
    let mb = std::fs::read(tmp.path().join("b/manifest.jsonl")).unwrap();
    ok &= ma == mb;

    // identical minibatch sequences under identical config + seed
    let dataset = make_dataset(SamplingMode::Uniform, 5);
    let cfg = arm_config(Solution::InstanceNorm, Framework::Single, false, 9);
    let t1 = Trainer::new(cfg.clone(), &dataset).unwrap();
    let t2 = Trainer::new(cfg.clone(), &dataset).unwrap();
    for step in 0..64 {
        ok &= t1.batch_indices(step) == t2.batch_indices(step);
    }

    // checkpoint round trip: forward outputs bit-exact
    let mut short = cfg;
    short.steps = 30;
    let mut tr = Trainer::new(short, &dataset).unwrap();
    tr.run(&dataset, None).unwrap();
    let path = tmp.path().join("ck.cbor");
    tr.checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let gen = ck.generator().unwrap();
    let table = ck.embeddings().unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let (c, s) = table.lookup(&idx).unwrap();
    let (c0, s0) = tr.table.lookup(&idx).unwrap();
    ok &= c == c0 && s == s0;
    ok &= gen.generate(&c, &s).unwrap() == tr.gen.generate(&c0, &s0).unwrap();

    assert!(report(
        8,
        "reproducibility",
        ok,
        "manifests, minibatch schedule and checkpoint round trip bit-exact"
    ));
}

// ---------------------------------------------------------------------------
// Criteria 3-7 and 9: trained-model criteria sharing one reduced budget
// ---------------------------------------------------------------------------

#[test]
fn criteria_3_to_7_and_9_trained_models() {
    let mut failures: Vec<u32> = Vec::new();
    let normal = make_dataset(SamplingMode::Normal, 42);
    let uniform = make_dataset(SamplingMode::Uniform, 43);

    // --- train all arms ---
    let mut in_normal = Vec::new();
    let mut nll_normal = Vec::new();
    let mut nopsi_normal = Vec::new();
    let mut concat_normal = Vec::new();
    let mut l2_normal = Vec::new();
    for &seed in &SEEDS {
        in_normal.push(train_arm(
            &normal,
            arm_config(Solution::InstanceNorm, Framework::Single, false, seed),
        ));
        nll_normal.push(train_arm(
            &normal,
            arm_config(Solution::Nll, Framework::Single, false, seed),
        ));
        nopsi_normal.push(train_arm(
            &normal,
            arm_config(Solution::None, Framework::Single, false, seed),
        ));
        concat_normal.push(train_arm(
            &normal,
            arm_config(Solution::None, Framework::Single, true, seed),
        ));
        l2_normal.push(train_arm(
            &normal,
            arm_config(Solution::L2Norm, Framework::Single, false, seed),
        ));
    }
    let mut in_uniform = Vec::new();
    let mut l2_uniform = Vec::new();
    for &seed in &SEEDS {
        in_uniform.push(train_arm(
            &uniform,
            arm_config(Solution::InstanceNorm, Framework::Single, false, seed),
        ));
        l2_uniform.push(train_arm(
            &uniform,
            arm_config(Solution::L2Norm, Framework::Single, false, seed),
        ));
    }
    let score =
        |arms: &[Arm], ds: &Dataset| median3(arms.iter().map(|a| transfer(a, ds)).collect());
    let t_in = score(&in_normal, &normal);
    let t_nll = score(&nll_normal, &normal);
    let t_nopsi = score(&nopsi_normal, &normal);
    let t_concat = score(&concat_normal, &normal);
    let t_l2 = score(&l2_normal, &normal);
    let u_in = score(&in_uniform, &uniform);
    let u_l2 = score(&l2_uniform, &uniform);

    // --- criterion 3: ablation ordering with >= 10% relative margins ---
    {
        let margin_ok = |better: f32, worse: f32| better <= 0.9 * worse;
        let ok = margin_ok(t_in, t_nll) && margin_ok(t_in, t_nopsi) && margin_ok(t_in, t_concat);
        if !report(
            3,
            "ablation ordering",
            ok,
            &format!(
                "median transfer: in {t_in:.4} vs nll {t_nll:.4}, no-constraint {t_nopsi:.4}, \
                 concat {t_concat:.4} (margin >= 10%)"
            ),
        ) {
            failures.push(3);
        }
    }

    // --- criterion 4: normalization matching the content distribution ---
    {
        let ok = t_in < t_l2 && u_l2 < u_in;
        if !report(
            4,
            "distribution-matched normalization",
            ok,
            &format!(
                "normal mode: in {t_in:.4} < l2 {t_l2:.4}; uniform mode: l2 {u_l2:.4} < in {u_in:.4}"
            ),
        ) {
            failures.push(4);
        }
    }

    // criteria 5-7 read the median-seed instance-norm normal-mode run
    let probe_arm = &in_normal[1];
    let factors = normal.factors_required().unwrap().to_vec();

    // --- criterion 5: leakage ---
    {
        let acc = leakage_metric(
            &probe_arm.table,
            &factors,
            LeakageProtocol::ClassifyStyleFromContent,
            7,
        )
        .unwrap();
        let mae_style = leakage_metric(
            &probe_arm.table,
            &factors,
            LeakageProtocol::RegressPoseFromStyle,
            7,
        )
        .unwrap();
        let mae_content = leakage_metric(
            &probe_arm.table,
            &factors,
            LeakageProtocol::RegressPoseFromContent,
            7,
        )
        .unwrap();
        let chance = 0.25; // four shape classes
        let ok = acc <= chance + 0.15 && mae_style >= 3.0 * mae_content;
        if !report(
            5,
            "leakage",
            ok,
            &format!(
                "shape-from-content acc {acc:.3} (<= {:.2}); pose MAE style {mae_style:.3} \
                 vs content {mae_content:.3} (>= 3x)",
                chance + 0.15
            ),
        ) {
            failures.push(5);
        }
    }

    // --- criterion 6: canonical view ---
    {
        let styles: Vec<usize> = (0..64).collect();
        let (canon, _) = canonical_view_score(&probe_arm.gen, &probe_arm.table, &styles).unwrap();
        let (rand, _) =
            random_content_score(&probe_arm.gen, &probe_arm.table, &styles, 11).unwrap();
        let (canon, rand) = (canon.unwrap(), rand.unwrap());
        let ok = canon * 2.0 <= rand;
        if !report(
            6,
            "canonical view",
            ok,
            &format!("zero-content deviation {canon:.2} px vs random-content {rand:.2} px (>= 2x)"),
        ) {
            failures.push(6);
        }
    }

    // --- criterion 7: encoder inference on a held-out 10% split ---
    {
        let n_train = N_IMAGES * 9 / 10;
        let train_split = Dataset {
            images: normal.images[..n_train].to_vec(),
            factors: Some(factors[..n_train].to_vec()),
            image_size: IMG,
            root: PathBuf::new(),
        };
        let sub_table = EmbeddingTable {
            content: probe_arm
                .table
                .content
                .slice(ndarray::s![..n_train, ..])
                .to_owned(),
            style: probe_arm
                .table
                .style
                .slice(ndarray::s![..n_train, ..])
                .to_owned(),
        };
        let enc = train_encoders(&train_split, &sub_table, 1500, 2e-3, 32, 7).unwrap();
        let fitted = encoder_l1(&enc, &train_split, &sub_table).unwrap();
        let all: Vec<usize> = (0..n_train).collect();
        let zero = zero_predictor_l1(&sub_table, &all).unwrap();

        let mut held_l2 = 0.0f64;
        let held = &normal.images[n_train..];
        for img in held {
            let out = translate(&probe_arm.gen, &enc, img, img).unwrap();
            held_l2 += (&out - img).mapv(|v| v * v).mean().unwrap() as f64;
        }
        let held_l2 = (held_l2 / held.len() as f64) as f32;

        let ok = fitted * 4.0 <= zero && held_l2 <= 2.0 * probe_arm.final_recon;
        if !report(
            7,
            "encoder inference",
            ok,
            &format!(
                "encoder L1 {fitted:.4} vs zero predictor {zero:.4} (>= 4x); held-out \
                 self-translation {held_l2:.4} vs train reconstruction {:.4} (<= 2x)",
                probe_arm.final_recon
            ),
        ) {
            failures.push(7);
        }
    }

    // --- criterion 9: fine-style exchange in the multiple framework ---
    {
        let arm = train_arm(
            &normal,
            arm_config(Solution::InstanceNorm, Framework::Multiple, false, 0),
        );
        let sites = arm.gen.spec.channels.len() - 1;
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let mut centroid_moves = Vec::new();
        let mut color_shifts = Vec::new();
        for _ in 0..50 {
            let i = rng.random_range(0..N_IMAGES);
            let mut j = rng.random_range(0..N_IMAGES);
            while j == i {
                j = rng.random_range(0..N_IMAGES);
            }
            let (c, si) = arm.table.lookup(&[i]).unwrap();
            let (_, sj) = arm.table.lookup(&[j]).unwrap();
            let own = vec![si.clone(); sites];
            let mut swapped = own.clone();
            swapped[sites - 1] = sj;
            let a = arm.gen.generate_mixed(&c, &own).unwrap();
            let b = arm.gen.generate_mixed(&c, &swapped).unwrap();
            let mean_rgb = |img: &ArrayD<f32>| -> [f32; 3] {
                let frame = img.index_axis(Axis(0), 0);
                [0, 1, 2].map(|ch| frame.index_axis(Axis(0), ch).mean().unwrap())
            };
            let ra = mean_rgb(&a);
            let rb = mean_rgb(&b);
            color_shifts.push(
                ra.iter()
                    .zip(rb.iter())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f32>(),
            );
            if let (Some((ax, ay)), Some((bx, by))) =
                (frame_centroids(&a).unwrap()[0], frame_centroids(&b).unwrap()[0])
            {
                centroid_moves.push(((ax - bx).powi(2) + (ay - by).powi(2)).sqrt());
            }
        }
        let mean_move =
            centroid_moves.iter().sum::<f32>() / centroid_moves.len().max(1) as f32;
        let mean_shift = color_shifts.iter().sum::<f32>() / color_shifts.len() as f32;
        let ok = !centroid_moves.is_empty() && mean_move < 2.0 && mean_shift > 0.01;
        if !report(
            9,
            "fine-style exchange",
            ok,
            &format!(
                "over 50 pairs: mean centroid move {mean_move:.2} px (< 2), mean color shift \
                 {mean_shift:.4} (> 0.01), {} pairs with located foreground",
                centroid_moves.len()
            ),
        ) {
            failures.push(9);
        }
    }

    assert!(
        failures.is_empty(),
        "failed acceptance criteria: {failures:?}"
    );
}

// keep an unused-import-free compile when helpers shift
#[allow(dead_code)]
fn _unused(_: &Array3<f32>, _: PsiForm) {}
