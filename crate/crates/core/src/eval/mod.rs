//! N-way K-shot evaluation on frozen embeddings with a per-episode linear learner.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Encoder, Mode};
use crate::rng::{stream, stream_rng};
use crate::tensor::{self, no_grad, Element, Parameter, Tensor};
use crate::trainer::Sgd;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    #[serde(default = "default_q_query")]
    pub q_query: usize,
    pub n_episodes: usize,
    pub seed: u64,
}

fn default_q_query() -> usize {
    15
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            q_query: 15,
            n_episodes: 250,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.q_query == 0 || self.n_episodes == 0 {
            return Err(Error::Config(format!(
                "episode spec needs n_way >= 2 and positive k_shot, q_query, n_episodes: {self:?}"
            )));
        }
        Ok(())
    }

    /// Checks the split can supply every episode.
    pub fn check_against(&self, by_class: &[Vec<usize>]) -> Result<()> {
        self.validate()?;
        let need = self.k_shot + self.q_query;
        if let Some(short) = by_class.iter().position(|c| c.len() < need) {
            return Err(Error::Eval(format!(
                "class {short} has {} examples, an episode needs {need}",
                by_class[short].len()
            )));
        }
        if by_class.len() < self.n_way {
            return Err(Error::Eval(format!(
                "{}-way episodes need {} classes, split has {}",
                self.n_way,
                self.n_way,
                by_class.len()
            )));
        }
        Ok(())
    }
}

/// One task: dataset indices with episode-local labels in `0..n_way`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
    /// `class_map[local] = global class`.
    pub class_map: Vec<usize>,
}

/// Draws `n_way` distinct classes, then `k_shot + q_query` distinct examples
/// per class; the first `k_shot` form the support set.
pub fn sample_episode<R: Rng + ?Sized>(
    by_class: &[Vec<usize>],
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    spec.check_against(by_class)?;
    let classes = sample(rng, by_class.len(), spec.n_way).into_vec();
    let per = spec.k_shot + spec.q_query;
    let mut ep = Episode {
        support: Vec::with_capacity(spec.n_way * spec.k_shot),
        support_labels: Vec::with_capacity(spec.n_way * spec.k_shot),
        query: Vec::with_capacity(spec.n_way * spec.q_query),
        query_labels: Vec::with_capacity(spec.n_way * spec.q_query),
        class_map: classes.clone(),
    };
    for (local, &c) in classes.iter().enumerate() {
        let members = &by_class[c];
        let picks = sample(rng, members.len(), per).into_vec();
        for (j, &p) in picks.iter().enumerate() {
            if j < spec.k_shot {
                ep.support.push(members[p]);
                ep.support_labels.push(local);
            } else {
                ep.query.push(members[p]);
                ep.query_labels.push(local);
            }
        }
    }
    Ok(ep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseLearnerOptions {
    pub max_steps: usize,
    /// Stop once the mean support cross-entropy falls below this.
    pub loss_threshold: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for BaseLearnerOptions {
    fn default() -> Self {
        Self {
            max_steps: 300,
            loss_threshold: 0.01,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Linear classifier `x W + b`, `W` stored `[dim, classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub dim: usize,
    pub classes: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Gradient steps taken.
    pub steps: usize,
    /// Support loss when fitting stopped.
    pub final_loss: f64,
}

impl LinearClassifier {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weight[i * self.classes..(i + 1) * self.classes];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        (0..l.len()).fold(0, |best, j| if l[j] > l[best] { j } else { best })
    }

    /// Fraction of rows of `x` (`[n, dim]`) classified as `labels`.
    pub fn accuracy(&self, x: &[f64], labels: &[usize]) -> f64 {
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| self.predict(&x[i * self.dim..(i + 1) * self.dim]) == l)
            .count();
        hits as f64 / labels.len() as f64
    }
}

/// Fits a freshly zero-initialized linear layer on `support` (`[n, dim]`)
/// with full-batch SGD, checking the loss before each step.
pub fn fit_base_learner(
    support: &[f64],
    dim: usize,
    labels: &[usize],
    classes: usize,
    opts: &BaseLearnerOptions,
) -> Result<LinearClassifier> {
    let n = labels.len();
    if n == 0 || support.len() != n * dim {
        return Err(Error::Eval(format!(
            "support has {} values for {n} rows of dim {dim}",
            support.len()
        )));
    }
    let x = Tensor::from_vec(support.to_vec(), &[n, dim])?;
    let w = Parameter::new(
        "base.weight",
        Tensor::parameter(vec![0.0f64; dim * classes], &[dim, classes])?,
        true,
    );
    let b = Parameter::new(
        "base.bias",
        Tensor::parameter(vec![0.0f64; classes], &[classes])?,
        false,
    );
    let mut sgd = Sgd::new(opts.lr, opts.momentum, opts.weight_decay);
    let mut steps = 0;
    let final_loss = loop {
        let logits = tensor::add(&tensor::matmul(&x, &w.value)?, &b.value)?;
        let loss = tensor::softmax_cross_entropy(&logits, labels)?;
        let value = loss.item();
        if value < opts.loss_threshold || value.is_nan() || steps >= opts.max_steps {
            break value;
        }
        loss.backward()?;
        sgd.step(&[&w, &b])?;
        steps += 1;
    };
    Ok(LinearClassifier {
        dim,
        classes,
        weight: w.value.to_vec(),
        bias: b.value.to_vec(),
        steps,
        final_loss,
    })
}

/// Row-major embedding matrix for every example of a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub rows: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Embeddings {
    pub fn new(dim: usize, rows: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if rows.len() != labels.len() * dim || labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::Eval(format!(
                "{} values for {} rows of dim {dim}",
                rows.len(),
                labels.len()
            )));
        }
        Ok(Self {
            dim,
            rows,
            labels,
            num_classes,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    fn gather(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .flat_map(|&i| self.row(i).iter().copied())
            .collect()
    }

    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }
}

/// Encodes every image of `data` in eval mode without recording gradients.
pub fn extract_embeddings<E: Element>(
    encoder: &Encoder<E>,
    data: &LabeledDataset,
    batch_size: usize,
) -> Result<Embeddings> {
    let dim = encoder.embedding_dim();
    let per = data.pixels_per_image();
    let mut rows = Vec::with_capacity(data.len() * dim);
    no_grad(|| -> Result<()> {
        for start in (0..data.len()).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(data.len());
            let pixels = data.images[start * per..end * per]
                .iter()
                .map(|&v| E::from_f32(v).unwrap())
                .collect();
            let x = Tensor::from_vec(
                pixels,
                &[end - start, data.channels, data.image_size, data.image_size],
            )?;
            let e = encoder.encode(&x, Mode::Eval)?;
            rows.extend(e.data().iter().map(|v| v.to_f64_lossy()));
        }
        Ok(())
    })?;
    Embeddings::new(dim, rows, data.labels.clone(), data.num_classes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    /// Query accuracy in percent.
    pub accuracy: f64,
    pub base_learner_steps: usize,
    pub support_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub n_episodes: usize,
    pub seed: u64,
    pub checkpoint_id: Option<String>,
    /// Percent.
    pub mean_accuracy: f64,
    /// Half-width in percentage points; `None` with fewer than two episodes.
    pub ci95: Option<f64>,
    pub ci95_defined: bool,
    pub per_episode_accuracies: Vec<f64>,
    #[serde(skip)]
    pub episodes: Vec<EpisodeResult>,
}

/// Mean and `1.96 * s / sqrt(n)` with the sample standard deviation `s`.
pub fn mean_and_ci95(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(1.96 * var.sqrt() / n.sqrt()))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn episodes_csv(&self) -> String {
        let mut s = String::from(
            "# fewshot episodes v1\nepisode,accuracy,base_learner_steps,support_loss\n",
        );
        for e in &self.episodes {
            writeln!(
                s,
                "{},{:e},{},{:e}",
                e.episode, e.accuracy, e.base_learner_steps, e.support_loss
            )
            .unwrap();
        }
        s
    }
}

fn run_episode(
    emb: &Embeddings,
    by_class: &[Vec<usize>],
    spec: &EpisodeSpec,
    opts: &BaseLearnerOptions,
    i: usize,
) -> Result<EpisodeResult> {
    let mut rng = stream_rng(spec.seed, &[stream::EPISODES, i as u64]);
    let ep = sample_episode(by_class, spec, &mut rng)?;
    let clf = fit_base_learner(
        &emb.gather(&ep.support),
        emb.dim,
        &ep.support_labels,
        spec.n_way,
        opts,
    )?;
    let acc = clf.accuracy(&emb.gather(&ep.query), &ep.query_labels);
    Ok(EpisodeResult {
        episode: i,
        accuracy: 100.0 * acc,
        base_learner_steps: clf.steps,
        support_loss: clf.final_loss,
    })
}

/// Runs `spec.n_episodes` episodes over precomputed embeddings.
///
/// Episode `i` draws from its own stream, so the report does not depend on
/// how episodes are spread over `threads`.
pub fn evaluate_embeddings(
    emb: &Embeddings,
    spec: &EpisodeSpec,
    opts: &BaseLearnerOptions,
    threads: usize,
) -> Result<EvalReport> {
    let by_class = emb.indices_by_class();
    spec.check_against(&by_class)?;
    let threads = threads.clamp(1, spec.n_episodes);
    let mut results: Vec<Option<Result<EpisodeResult>>> =
        (0..spec.n_episodes).map(|_| None).collect();
    std::thread::scope(|s| {
        for (t, slot) in results
            .chunks_mut(spec.n_episodes.div_ceil(threads))
            .enumerate()
        {
            let by_class = &by_class;
            let base = t * spec.n_episodes.div_ceil(threads);
            s.spawn(move || {
                for (j, r) in slot.iter_mut().enumerate() {
                    *r = Some(run_episode(emb, by_class, spec, opts, base + j));
                }
            });
        }
    });
    let episodes: Vec<EpisodeResult> = results
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect::<Result<_>>()?;
    let accs: Vec<f64> = episodes.iter().map(|e| e.accuracy).collect();
    let (mean, ci) = mean_and_ci95(&accs);
    Ok(EvalReport {
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        q_query: spec.q_query,
        n_episodes: spec.n_episodes,
        seed: spec.seed,
        checkpoint_id: None,
        mean_accuracy: mean,
        ci95: ci,
        ci95_defined: ci.is_some(),
        per_episode_accuracies: accs,
        episodes,
    })
}

/// Fails when a class name appears in both lists.
pub fn check_disjoint(train_classes: &[String], eval_classes: &[String]) -> Result<()> {
    let train: BTreeSet<&String> = train_classes.iter().collect();
    let shared: Vec<&str> = eval_classes
        .iter()
        .filter(|c| train.contains(c))
        .map(String::as_str)
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Eval(format!(
            "classes shared between training and evaluation splits: {}",
            shared.join(", ")
        )))
    }
}

/// Extracts frozen embeddings of `data` and evaluates `spec` on them.
pub fn evaluate<E: Element>(
    encoder: &Encoder<E>,
    data: &LabeledDataset,
    train_classes: &[String],
    spec: &EpisodeSpec,
    opts: &BaseLearnerOptions,
) -> Result<EvalReport> {
    check_disjoint(train_classes, &data.class_names)?;
    let emb = extract_embeddings(encoder, data, 64)?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    evaluate_embeddings(&emb, spec, opts, threads)
}

/// Statistics of several independent runs' mean accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub run_means: Vec<f64>,
    pub mean_accuracy: f64,
    /// Across-run 95% half-width; `None` for a single run.
    pub ci95: Option<f64>,
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<RunAggregate> {
    if reports.is_empty() {
        return Err(Error::Eval("no runs to aggregate".into()));
    }
    let run_means: Vec<f64> = reports.iter().map(|r| r.mean_accuracy).collect();
    let (mean, ci) = mean_and_ci95(&run_means);
    Ok(RunAggregate {
        runs: reports.len(),
        run_means,
        mean_accuracy: mean,
        ci95: ci,
    })
}
