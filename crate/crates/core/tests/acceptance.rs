//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::collections::HashSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{gradients, random_images, random_vec, tiny_model_config, toy_dataset, REL_TOL};
use fewshot_core::augment::{rotate90, AugmentSpec, Image, RotationLabel};
use fewshot_core::data::LabeledDataset;
use fewshot_core::eval::{
    evaluate, evaluate_embeddings, extract_embeddings, mean_and_ci95, sample_episode,
    BaseLearnerOptions, EpisodeSpec, EvalReport,
};
use fewshot_core::io::{generate_toy_corpus, DatasetManifest, RunWriter, ToyCorpusSpec};
use fewshot_core::model::{
    build_views, byol_regression_loss, total_loss, total_loss_on_views, HeadsConfig, ModelConfig,
    MultiTaskModel, Pipelines, TaskSet, TaskWeights, ViewPolicy,
};
use fewshot_core::nn::{EncoderConfig, Module};
use fewshot_core::rng::{stream, stream_rng};
use fewshot_core::tensor::no_grad;
use fewshot_core::trainer::{train, train_step, MemorySink, Sgd, TrainConfig};
use fewshot_core::{Error, Parameter, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fmt_err(e: Error) -> String {
    e.to_string()
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let mut cases = gradients::elementwise_and_linear_algebra();
    cases.extend(gradients::losses_and_normalization());
    cases.extend(gradients::convolution_pooling_and_batch_norm());
    cases.extend(gradients::composed_losses());
    let elapsed = start.elapsed();
    let (name, worst) = cases.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let failing: Vec<String> = cases
        .iter()
        .filter(|c| c.1.is_nan() || c.1 > REL_TOL)
        .map(|c| format!("{} {:.2e}", c.0, c.1))
        .collect();
    ensure(failing.is_empty(), || {
        format!("relative error above {REL_TOL:e}: {}", failing.join(", "))
    })?;
    ensure(elapsed < Duration::from_secs(60), || {
        format!("took {elapsed:.1?}")
    })?;
    Ok(format!(
        "{} checks, worst {worst:.2e} ({name}), {elapsed:.1?}",
        cases.len()
    ))
}

fn byol_identity() -> Verdict {
    let mut r = stream_rng(7, &[1]);
    let mut worst = 0.0f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..1000 {
        let dim = r.gen_range(2..64);
        let p = random_vec(&mut r, dim);
        let t = random_vec(&mut r, dim);
        let v = pair_loss(&p, &t).map_err(|e| format!("pair {i}: {e}"))?;
        worst = worst.max((v - (2.0 - 2.0 * cosine(&p, &t))).abs());
        lo = lo.min(v);
        hi = hi.max(v);
    }
    ensure(worst <= 1e-6, || {
        format!("max |loss - (2 - 2cos)| = {worst:e}")
    })?;
    ensure(lo >= 0.0 && hi <= 4.0, || {
        format!("loss range [{lo}, {hi}]")
    })?;

    // Parallel and antiparallel pairs reach the bounds up to rounding.
    let mut edge = 0.0f64;
    for i in 0..20 {
        let p = random_vec(&mut r, 16);
        let (scale, bound) = if i % 2 == 0 { (0.5, 0.0) } else { (-2.5, 4.0) };
        let t: Vec<f64> = p.iter().map(|v| scale * v).collect();
        edge = edge.max((pair_loss(&p, &t)? - bound).abs());
    }
    ensure(edge <= 1e-12, || format!("bound pairs off by {edge:e}"))?;

    // Through the full model the target encoder and projector stay gradient-free.
    let m = MultiTaskModel::<f64>::new(&tiny_model_config(true), &mut stream_rng(7, &[2]))
        .map_err(fmt_err)?;
    let a = fewshot_core::augment::stack::<f64>(&random_images(1, 6, 16));
    let b = fewshot_core::augment::stack::<f64>(&random_images(2, 6, 16));
    m.byol_loss(&a, &b)
        .map_err(fmt_err)?
        .backward()
        .map_err(|e| e.to_string())?;
    let target_norm: f64 = m
        .target_parameters()
        .iter()
        .filter_map(|p| p.value.grad())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    ensure(target_norm == 0.0, || {
        format!("target network gradient norm {target_norm:e}")
    })?;
    Ok(format!("1000 pairs, max deviation {worst:.1e}, range [{lo:.3}, {hi:.3}], bounds reached to {edge:.0e}, target grad norm 0"))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (norm(a) * norm(b))
}

/// Single-pair loss with the target computed under `no_grad`; fails if the
/// target receives any gradient.
fn pair_loss(p: &[f64], t: &[f64]) -> Result<f64, String> {
    let pt = Tensor::<f64>::parameter(p.to_vec(), &[1, p.len()]).map_err(|e| e.to_string())?;
    let tt = Tensor::<f64>::parameter(t.to_vec(), &[1, t.len()]).map_err(|e| e.to_string())?;
    let target = no_grad(|| fewshot_core::tensor::scale(&tt, 1.0));
    let loss = byol_regression_loss(&pt, &target).map_err(fmt_err)?;
    loss.backward().map_err(|e| e.to_string())?;
    let tgrad: f64 = tt.grad().map_or(0.0, |g| g.iter().map(|x| x * x).sum());
    ensure(tgrad == 0.0, || format!("target gradient norm^2 {tgrad:e}"))?;
    ensure(pt.grad().is_some(), || "prediction got no gradient".into())?;
    Ok(loss.item())
}

fn ema_pipes() -> Pipelines {
    Pipelines {
        supervised: AugmentSpec::default_pipeline(16, 2),
        rotation: AugmentSpec::default_pipeline(16, 2),
        byol: AugmentSpec::hard(16),
    }
}

fn one_byol_step(tau: f64) -> Result<(Vec<Vec<f32>>, MultiTaskModel<f32>), String> {
    let data = toy_dataset(3, 4, 16, 9);
    let mut m = MultiTaskModel::<f32>::new(&tiny_model_config(false), &mut stream_rng(4, &[1]))
        .map_err(fmt_err)?;
    m.set_tau(tau).map_err(fmt_err)?;
    let cfg = TrainConfig {
        batch_size: 4,
        tau,
        active_tasks: "sup,byol".parse().unwrap(),
        view_policy: ViewPolicy::Shared,
        decay_epochs: vec![],
        ..TrainConfig::preset_supervised()
    };
    let old = m
        .target_parameters()
        .iter()
        .map(|p| p.value.to_vec())
        .collect();
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    train_step(
        &cfg,
        &ema_pipes(),
        &data,
        &mut m,
        &mut sgd,
        &[0, 3, 6, 9],
        0,
    )
    .map_err(fmt_err)?;
    Ok((old, m))
}

fn ema_exactness() -> Verdict {
    let (old, m) = one_byol_step(0.99)?;
    let mut checked = 0;
    for ((target, online), old) in m.ema_pairs().into_iter().zip(&old) {
        let online = online.value.to_vec();
        ensure(online.iter().zip(old).any(|(o, t)| o != t), || {
            format!("{} did not move", target.name)
        })?;
        let expected: Vec<u32> = old
            .iter()
            .zip(&online)
            .map(|(&t, &o)| (0.99f32 * t + (1.0f32 - 0.99f32) * o).to_bits())
            .collect();
        let got: Vec<u32> = target.value.to_vec().iter().map(|v| v.to_bits()).collect();
        ensure(got == expected, || {
            format!("{} differs from 0.99*old + 0.01*online", target.name)
        })?;
        checked += got.len();
    }
    let (_, again) = one_byol_step(0.99)?;
    let bits = |m: &MultiTaskModel<f32>| -> Vec<Vec<u32>> {
        m.target_parameters()
            .iter()
            .map(|p| p.value.to_vec().iter().map(|v| v.to_bits()).collect())
            .collect()
    };
    ensure(bits(&m) == bits(&again), || {
        "repeated step gave different target bits".into()
    })?;

    let (_, copy) = one_byol_step(0.0)?;
    for (target, online) in copy.ema_pairs() {
        ensure(target.value.to_vec() == online.value.to_vec(), || {
            format!("tau=0: {} is not a copy", target.name)
        })?;
    }
    Ok(format!(
        "{checked} target values bitwise, repeatable; tau=0 copies exactly"
    ))
}

fn grads(params: &[&Parameter<f64>]) -> Vec<f64> {
    params
        .iter()
        .flat_map(|p| p.value.grad().unwrap_or_else(|| vec![0.0; p.value.numel()]))
        .collect()
}

const ALL: TaskSet = TaskSet {
    supervised: true,
    rotation: true,
    byol: true,
};
const SINGLE: [TaskSet; 3] = [
    TaskSet::SUPERVISED,
    TaskSet {
        supervised: false,
        rotation: true,
        byol: false,
    },
    TaskSet {
        supervised: false,
        rotation: false,
        byol: true,
    },
];

fn loss_additivity() -> Verdict {
    let batch = random_images(1, 6, 16);
    let ids: Vec<u64> = (0..6).collect();
    let labels = [0, 1, 2, 0, 1, 2];
    let w = TaskWeights::default();
    let (mut worst_loss, mut worst_grad) = (0.0f64, 0.0f64);
    for policy in [
        ViewPolicy::Separate,
        ViewPolicy::Shared,
        ViewPolicy::TwoView,
    ] {
        let m = MultiTaskModel::<f64>::new(&tiny_model_config(true), &mut stream_rng(11, &[1]))
            .map_err(fmt_err)?;
        let enc = m.encoder.parameters();
        let views = build_views(ALL, policy, &ema_pipes(), &batch, &ids, 5, 0).map_err(fmt_err)?;
        let joint = total_loss_on_views(&m, &views, &labels, ALL, &w).map_err(fmt_err)?;
        joint.total.backward().map_err(|e| e.to_string())?;
        let joint_grads = grads(&enc);
        m.zero_grad();

        let mut sum = 0.0;
        let mut summed = vec![0.0; joint_grads.len()];
        for task in SINGLE {
            let l = total_loss_on_views(&m, &views, &labels, task, &w).map_err(fmt_err)?;
            sum += l.total.item();
            l.total.backward().map_err(|e| e.to_string())?;
            summed
                .iter_mut()
                .zip(grads(&enc))
                .for_each(|(a, g)| *a += g);
            m.zero_grad();
        }
        worst_loss = worst_loss.max((joint.total.item() - sum).abs());
        worst_grad = joint_grads
            .iter()
            .zip(&summed)
            .map(|(a, b)| (a - b).abs())
            .fold(worst_grad, f64::max);
    }

    // With separate views each task can also build its own inputs from the seed alone.
    let m = MultiTaskModel::<f64>::new(&tiny_model_config(true), &mut stream_rng(11, &[1]))
        .map_err(fmt_err)?;
    let run = |tasks| {
        total_loss(
            &m,
            &batch,
            &labels,
            &ids,
            tasks,
            ViewPolicy::Separate,
            &ema_pipes(),
            &w,
            5,
            0,
        )
        .map(|r| r.0.total.item())
    };
    let joint = run(ALL).map_err(fmt_err)?;
    let mut independent = 0.0;
    for task in SINGLE {
        independent += run(task).map_err(fmt_err)?;
    }
    worst_loss = worst_loss.max((joint - independent).abs());

    ensure(worst_loss <= 1e-7, || {
        format!("loss sum off by {worst_loss:e}")
    })?;
    ensure(worst_grad <= 1e-6, || {
        format!("encoder gradient sum off by {worst_grad:e}")
    })?;
    Ok(format!(
        "3 view policies, loss gap {worst_loss:.1e}, encoder grad gap {worst_grad:.1e}"
    ))
}

fn episodic_protocol() -> Verdict {
    let start = Instant::now();
    let data = toy_dataset(20, 20, 8, 3);
    let by_class = data.indices_by_class();
    let spec = EpisodeSpec {
        n_way: 5,
        k_shot: 5,
        q_query: 15,
        n_episodes: 10_000,
        seed: 0,
    };
    let mut picked = [0usize; 20];
    for i in 0..spec.n_episodes {
        let ep = sample_episode(
            &by_class,
            &spec,
            &mut stream_rng(spec.seed, &[stream::EPISODES, i as u64]),
        )
        .map_err(fmt_err)?;
        ensure(ep.support.len() == 25 && ep.query.len() == 75, || {
            format!("episode {i}: {}/{}", ep.support.len(), ep.query.len())
        })?;
        let s: HashSet<usize> = ep.support.iter().copied().collect();
        let q: HashSet<usize> = ep.query.iter().copied().collect();
        ensure(s.len() == 25 && q.len() == 75 && s.is_disjoint(&q), || {
            format!("episode {i}: support/query overlap")
        })?;
        let classes: HashSet<usize> = ep.class_map.iter().copied().collect();
        ensure(classes.len() == 5, || {
            format!("episode {i}: repeated class")
        })?;
        for (&x, &l) in ep
            .support
            .iter()
            .zip(&ep.support_labels)
            .chain(ep.query.iter().zip(&ep.query_labels))
        {
            ensure(data.labels[x] == ep.class_map[l], || {
                format!("episode {i}: row {x} mislabeled")
            })?;
        }
        for &c in &ep.class_map {
            picked[c] += 1;
        }
    }
    let freq: Vec<f64> = picked
        .iter()
        .map(|&c| c as f64 / spec.n_episodes as f64)
        .collect();
    let (fmin, fmax) = freq
        .iter()
        .fold((1.0f64, 0.0f64), |(a, b), &f| (a.min(f), b.max(f)));
    ensure(fmin >= 0.24 && fmax <= 0.26, || {
        format!("class frequencies in [{fmin}, {fmax}]")
    })?;
    // Counts of a 5-of-20 draw have variance 15/19 of the multinomial one, so
    // the rescaled statistic is chi-square with 19 degrees of freedom; 43.82
    // is its 0.999 quantile.
    let expected = spec.n_episodes as f64 / 4.0;
    let chi2 = picked
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum::<f64>()
        * 19.0
        / 15.0;
    ensure(chi2 < 43.82, || {
        format!("class counts fail uniformity: chi2 {chi2:.1}")
    })?;

    // mean 80, s = sqrt(250), 1.96 * sqrt(250 / 5) = 1.96 * sqrt(50)
    let (mean, ci) = mean_and_ci95(&[60.0, 70.0, 80.0, 90.0, 100.0]);
    let ci = ci.ok_or("no interval for five values")?;
    ensure(
        (mean - 80.0).abs() <= 1e-9 && (ci - 13.859_292_911_256_33).abs() <= 1e-9,
        || format!("mean {mean}, ci {ci}"),
    )?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || {
        format!("took {elapsed:.1?}")
    })?;
    Ok(format!("10000 episodes, class frequency [{fmin:.4}, {fmax:.4}], chi2 {chi2:.1}/19 df, ci {ci:.12}, {elapsed:.1?}"))
}

fn desk_model(num_classes: usize, seed: u64) -> Result<MultiTaskModel<f32>, String> {
    let config = ModelConfig {
        encoder: EncoderConfig::desk(),
        heads: HeadsConfig::default(),
        num_classes,
        tau: 0.99,
    };
    MultiTaskModel::new(&config, &mut stream_rng(seed, &[stream::INIT])).map_err(fmt_err)
}

fn eval_spec(seed: u64) -> EpisodeSpec {
    EpisodeSpec {
        n_way: 5,
        k_shot: 5,
        q_query: 15,
        n_episodes: 250,
        seed,
    }
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn chance_baseline() -> Verdict {
    // Uniform noise images with arbitrary labels: no input carries class information.
    let (classes, per, size) = (10, 30, 32);
    let mut r = stream_rng(23, &[1]);
    let images: Vec<f32> = (0..classes * per * 3 * size * size)
        .map(|_| r.gen())
        .collect();
    let labels: Vec<usize> = (0..classes * per).map(|i| i / per).collect();
    let names = (0..classes).map(|c| format!("noise{c:02}")).collect();
    let data = LabeledDataset::new("test", 3, size, images, labels, names).map_err(fmt_err)?;
    let model = desk_model(8, 5)?;
    let emb = extract_embeddings(&model.encoder, &data, 64).map_err(fmt_err)?;
    let report = evaluate_embeddings(
        &emb,
        &eval_spec(31),
        &BaseLearnerOptions::default(),
        threads(),
    )
    .map_err(fmt_err)?;
    let ci = report.ci95.ok_or("undefined interval")?;
    let m = report.mean_accuracy;
    ensure((m - 20.0).abs() <= ci, || {
        format!("mean {m:.2} +- {ci:.2} excludes 20")
    })?;
    Ok(format!(
        "fresh encoder on label-free noise: {m:.2} +- {ci:.2} over 250 5-way episodes"
    ))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn desk_train_config(tasks: &str, policy: ViewPolicy) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 32,
        lr: 0.05,
        decay_epochs: vec![8],
        tau: 0.99,
        active_tasks: tasks.parse().unwrap(),
        view_policy: policy,
        seed: 2,
        ..TrainConfig::preset_supervised()
    }
}

fn desk_pipes() -> Pipelines {
    Pipelines {
        supervised: AugmentSpec::default_pipeline(32, 4),
        rotation: AugmentSpec::default_pipeline(32, 4),
        byol: AugmentSpec::hard(32),
    }
}

/// Median per-step seconds of supervised and shared-view BYOL steps, run
/// alternately on the same batches so machine load affects both alike.
fn interleaved_step_times(data: &LabeledDataset) -> Result<(f64, f64), String> {
    let sup_cfg = desk_train_config("sup", ViewPolicy::Separate);
    let byol_cfg = desk_train_config("sup,byol", ViewPolicy::Shared);
    let mut sup = desk_model(data.num_classes(), 9)?;
    let mut byol = desk_model(data.num_classes(), 9)?;
    let (mut sgd_a, mut sgd_b) = (Sgd::new(0.05, 0.9, 5e-4), Sgd::new(0.05, 0.9, 5e-4));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream_rng(9, &[stream::SHUFFLE]));
    let (mut ts, mut tb) = (Vec::new(), Vec::new());
    for (i, batch) in order.chunks_exact(32).cycle().take(45).enumerate() {
        let t = Instant::now();
        train_step(
            &sup_cfg,
            &desk_pipes(),
            data,
            &mut sup,
            &mut sgd_a,
            batch,
            0,
        )
        .map_err(fmt_err)?;
        let a = t.elapsed().as_secs_f64();
        let t = Instant::now();
        train_step(
            &byol_cfg,
            &desk_pipes(),
            data,
            &mut byol,
            &mut sgd_b,
            batch,
            0,
        )
        .map_err(fmt_err)?;
        let b = t.elapsed().as_secs_f64();
        if i >= 5 {
            ts.push(a);
            tb.push(b);
        }
    }
    Ok((median(ts), median(tb)))
}

fn train_and_eval(
    cfg: &TrainConfig,
    train_set: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<(EvalReport, f64, f64), String> {
    let mut model = desk_model(train_set.num_classes(), cfg.seed)?;
    let mut sink = MemorySink::default();
    let start = Instant::now();
    train(cfg, &desk_pipes(), train_set, &mut model, &mut sink).map_err(fmt_err)?;
    let wall = start.elapsed().as_secs_f64();
    let finite = sink.steps.iter().all(|s| s.loss_total.is_finite());
    ensure(finite, || "non-finite step loss".into())?;
    let step = median(sink.steps.iter().map(|s| s.seconds).collect());
    let report = evaluate(
        &model.encoder,
        test,
        &train_set.class_names,
        &eval_spec(41),
        &BaseLearnerOptions::default(),
    )
    .map_err(fmt_err)?;
    Ok((report, wall, step))
}

fn end_to_end() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = generate_toy_corpus(&ToyCorpusSpec::new(8, 2, 6, 50, 32, 1), dir.path())
        .map_err(fmt_err)?;
    let manifest = DatasetManifest::load(&manifest).map_err(fmt_err)?;
    let train_set = manifest.ingest("train").map_err(fmt_err)?;
    let test = manifest.ingest("test").map_err(fmt_err)?;

    let fresh = desk_model(train_set.num_classes(), 2)?;
    let base = evaluate(
        &fresh.encoder,
        &test,
        &train_set.class_names,
        &eval_spec(41),
        &BaseLearnerOptions::default(),
    )
    .map_err(fmt_err)?;
    let (sup, sup_wall, sup_step) = train_and_eval(
        &desk_train_config("sup", ViewPolicy::Separate),
        &train_set,
        &test,
    )?;
    let (byol, _, byol_step) = train_and_eval(
        &desk_train_config("sup,byol", ViewPolicy::Shared),
        &train_set,
        &test,
    )?;
    let (t_sup, t_byol) = interleaved_step_times(&train_set)?;
    let ratio = t_byol / t_sup;

    let ci = |r: &EvalReport| r.ci95.unwrap_or(f64::NAN);
    let detail = format!(
        "untrained {:.2}+-{:.2}, sup {:.2}+-{:.2} ({sup_wall:.0}s), sup+byol shared {:.2}+-{:.2}; \
         step median {:.1}ms vs {:.1}ms, ratio {ratio:.2} (in-run medians {:.1}ms vs {:.1}ms)",
        base.mean_accuracy,
        ci(&base),
        sup.mean_accuracy,
        ci(&sup),
        byol.mean_accuracy,
        ci(&byol),
        1e3 * t_sup,
        1e3 * t_byol,
        1e3 * sup_step,
        1e3 * byol_step,
    );
    ensure(sup_wall < 600.0, || {
        format!("supervised training took {sup_wall:.0}s; {detail}")
    })?;
    ensure(sup.mean_accuracy >= 60.0, || {
        format!("supervised accuracy below 60; {detail}")
    })?;
    ensure(
        sup.mean_accuracy - ci(&sup) > base.mean_accuracy + ci(&base),
        || format!("no lift over the untrained encoder; {detail}"),
    )?;
    ensure(byol.mean_accuracy >= sup.mean_accuracy - ci(&sup), || {
        format!("byol lowered accuracy beyond the interval; {detail}")
    })?;
    ensure(ratio <= 1.6, || {
        format!("step-time ratio above 1.6; {detail}")
    })?;
    Ok(detail)
}

fn rotation_group() -> Verdict {
    let labels: Vec<RotationLabel> = (0..4).map(|i| RotationLabel::new(i).unwrap()).collect();
    let mut r = stream_rng(5, &[1]);
    for n in 0..8 {
        let (h, w) = (r.gen_range(2..9), r.gen_range(2..9));
        let img = Image::new(3, h, w, (0..3 * h * w).map(|_| r.gen()).collect());
        ensure(rotate90(&img, labels[0]) == img, || {
            "0 turns changed the image".into()
        })?;
        for &a in &labels {
            if a.index() > 0 {
                ensure(rotate90(&img, a) != img, || {
                    format!("image {n}: {} turns left it unchanged", a.index())
                })?;
            }
            for &b in &labels {
                let c = a.compose(b);
                ensure(c.index() == (a.index() + b.index()) % 4, || {
                    format!("{} + {} -> {}", a.index(), b.index(), c.index())
                })?;
                ensure(rotate90(&rotate90(&img, a), b) == rotate90(&img, c), || {
                    format!(
                        "image {n} ({h}x{w}): rotating by {} then {} differs from {}",
                        a.index(),
                        b.index(),
                        c.index()
                    )
                })?;
            }
        }
    }

    let tasks = TaskSet {
        supervised: false,
        rotation: true,
        byol: false,
    };
    let pipes = Pipelines {
        supervised: AugmentSpec::none(16),
        rotation: AugmentSpec::none(16),
        byol: AugmentSpec::hard(16),
    };
    let batch = vec![Image::filled(3, 16, 16, 0.5); 400];
    let ids: Vec<u64> = (0..400).collect();
    let mut counts = [0usize; 4];
    for counter in 0..100 {
        let views = build_views(
            tasks,
            ViewPolicy::Separate,
            &pipes,
            &batch,
            &ids,
            13,
            counter,
        )
        .map_err(fmt_err)?;
        for l in views.rotation.ok_or("no rotation view")?.1 {
            counts[l.index()] += 1;
        }
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / 40_000.0).collect();
    ensure(freq.iter().all(|f| (0.24..=0.26).contains(f)), || {
        format!("label frequencies {freq:?}")
    })?;
    Ok(format!(
        "16-entry table on 8 images; label frequencies {freq:.4?}"
    ))
}

fn csv_without_timing(path: &Path) -> Result<String, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    Ok(text
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n"))
}

struct RunArtifacts {
    checkpoints: Vec<(String, Vec<u8>)>,
    curves: Vec<String>,
    report: EvalReport,
}

fn determinism_run() -> Result<RunArtifacts, String> {
    let data = toy_dataset(3, 12, 16, 4);
    let held_out = toy_dataset(6, 20, 16, 5);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        decay_epochs: vec![2],
        active_tasks: "sup,rot,byol".parse().unwrap(),
        view_policy: ViewPolicy::Separate,
        checkpoint_every: 1,
        seed: 8,
        ..TrainConfig::preset_supervised()
    };
    let mut model = MultiTaskModel::<f32>::new(
        &tiny_model_config(true),
        &mut stream_rng(8, &[stream::INIT]),
    )
    .map_err(fmt_err)?;
    let mut writer = RunWriter::create(dir.path(), cfg.checkpoint_every).map_err(fmt_err)?;
    train(&cfg, &ema_pipes(), &data, &mut model, &mut writer).map_err(fmt_err)?;
    drop(writer);
    let mut checkpoints = Vec::new();
    for e in fs::read_dir(dir.path()).map_err(|e| e.to_string())? {
        let p = e.map_err(|e| e.to_string())?.path();
        if p.extension().is_some_and(|x| x == "ckpt") {
            checkpoints.push((
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).map_err(|e| e.to_string())?,
            ));
        }
    }
    checkpoints.sort();
    let curves = vec![
        csv_without_timing(&dir.path().join("metrics.csv"))?,
        csv_without_timing(&dir.path().join("steps.csv"))?,
    ];
    let emb = extract_embeddings(&model.encoder, &held_out, 64).map_err(fmt_err)?;
    let spec = EpisodeSpec {
        n_way: 5,
        k_shot: 1,
        q_query: 15,
        n_episodes: 40,
        seed: 3,
    };
    let report = evaluate_embeddings(&emb, &spec, &BaseLearnerOptions::default(), threads())
        .map_err(fmt_err)?;
    Ok(RunArtifacts {
        checkpoints,
        curves,
        report,
    })
}

fn determinism() -> Verdict {
    let (a, b) = (determinism_run()?, determinism_run()?);
    ensure(a.checkpoints.len() == 4, || {
        format!("{} checkpoints", a.checkpoints.len())
    })?;
    ensure(a.checkpoints == b.checkpoints, || {
        "checkpoint bytes differ".into()
    })?;
    ensure(a.curves == b.curves, || "loss curves differ".into())?;
    let bits = |r: &EvalReport| {
        r.per_episode_accuracies
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    ensure(
        bits(&a.report) == bits(&b.report)
            && a.report.mean_accuracy.to_bits() == b.report.mean_accuracy.to_bits(),
        || "episode accuracies differ".into(),
    )?;
    ensure(
        a.report == b.report && a.report.to_json() == b.report.to_json(),
        || "eval reports differ".into(),
    )?;
    Ok(format!(
        "{} checkpoints, {} step rows and a {}-episode report identical",
        a.checkpoints.len(),
        a.curves[1].lines().count() - 2,
        a.report.n_episodes
    ))
}

fn unaugmented_supervised_with_byol() -> Verdict {
    let data = toy_dataset(3, 16, 16, 6);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 8,
        decay_epochs: vec![],
        active_tasks: "sup,byol".parse().unwrap(),
        view_policy: ViewPolicy::Separate,
        seed: 6,
        ..TrainConfig::preset_supervised()
    };
    let pipes = Pipelines {
        supervised: AugmentSpec::none(16),
        rotation: AugmentSpec::none(16),
        byol: AugmentSpec::hard(16),
    };
    let mut model = MultiTaskModel::<f32>::new(
        &tiny_model_config(false),
        &mut stream_rng(6, &[stream::INIT]),
    )
    .map_err(fmt_err)?;
    let mut writer = RunWriter::create(dir.path(), 0).map_err(fmt_err)?;
    let outcome = train(&cfg, &pipes, &data, &mut model, &mut writer);
    drop(writer);
    let aborted = match outcome {
        Ok(_) => false,
        Err(Error::NonFinite(_)) => true,
        Err(e) => return Err(e.to_string()),
    };

    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).map_err(|e| e.to_string())?;
    let mut sup = Vec::new();
    let mut byol = Vec::new();
    for row in metrics.lines().skip(2) {
        let cols: Vec<&str> = row.split(',').collect();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| format!("unparseable loss {s:?} in {row:?}"))
        };
        sup.push(parse(cols[3])?);
        byol.push(parse(cols[5])?);
    }
    ensure(aborted || sup.len() == cfg.epochs, || {
        format!("{} epoch rows for {} epochs", sup.len(), cfg.epochs)
    })?;
    ensure(sup.iter().chain(&byol).all(|v| v.is_finite()), || {
        "logged a non-finite loss".into()
    })?;
    let curve = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok(format!(
        "{}; sup [{}], byol [{}]",
        if aborted {
            "aborted on non-finite loss"
        } else {
            "completed"
        },
        curve(&sup),
        curve(&byol)
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient oracle", gradient_oracle),
        ("byol loss identity", byol_identity),
        ("ema exactness", ema_exactness),
        ("loss additivity", loss_additivity),
        ("episodic protocol", episodic_protocol),
        ("chance-level baseline", chance_baseline),
        ("end-to-end learning signal", end_to_end),
        ("rotation group", rotation_group),
        ("determinism", determinism),
        (
            "unaugmented supervised + byol",
            unaugmented_supervised_with_byol,
        ),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {:>2} {name} [{secs:.1}s]: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{secs:.1}s]: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
