//! Meta-training and meta-testing loops: momentum SGD over episode batches,
//! a stepped learning-rate schedule, frozen-encoder enforcement, seeded
//! multi-run aggregation, and run-directory artifacts.
//!
//! One epoch is `train_tasks / (batch_size * max_epochs)` optimizer steps, so
//! the total number of sampled tasks over a full run equals `train_tasks`.
//! Evaluation draws a fixed number of meta-test episodes and never updates
//! parameters; there is no model selection on test classes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::episodes::{
    load_episode, sample_episode, DatasetManifest, EpisodeMode, FoldSpec, LoadOptions,
    LoadedEpisode, Split,
};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::{self, ConfusionAccumulator, RunScores};
use crate::model::{EpisodeInputs, Model, ModelConfig, ModelParams};
use crate::rng;
use crate::scalar::Scalar;
use crate::semantics::{self, EmbeddingProvider, WordEmbedding};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// The learning rate is multiplied by `decay_factor` after each listed
    /// epoch (1-based), so epoch 36 runs at `lr * decay_factor` when 35 is
    /// listed.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Total episodes sampled over a full training run.
    pub train_tasks: usize,
    /// Episodes per evaluation pass.
    pub eval_tasks: usize,
    pub seeds: Vec<u64>,
    /// Square input side during training and evaluation.
    pub train_size: usize,
    pub test_size: usize,
    pub k: usize,
    pub query_count: usize,
    pub mode: EpisodeMode,
    /// Flip/crop supports during training.
    pub augment: bool,
    /// Episode-loading threads; 1 keeps everything on the training thread.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_static()
    }
}

impl TrainConfig {
    /// Full-scale settings for static image benchmarks.
    pub fn full_static() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            decay_epochs: vec![35, 40, 45],
            decay_factor: 0.1,
            weight_decay: 5e-4,
            batch_size: 4,
            max_epochs: 50,
            train_tasks: 12_000,
            eval_tasks: 5_000,
            seeds: vec![1, 2, 3, 4, 5],
            train_size: 321,
            test_size: 500,
            k: 1,
            query_count: 1,
            mode: EpisodeMode::Static,
            augment: true,
            workers: 1,
        }
    }

    /// Full-scale settings for the video benchmark: fewer epochs, episode
    /// supports drawn from first frames.
    pub fn full_video() -> Self {
        TrainConfig {
            max_epochs: 20,
            mode: EpisodeMode::TosflInstance,
            ..Self::full_static()
        }
    }

    /// Minutes-scale preset used with the tiny encoder and synthetic shapes.
    pub fn desk() -> Self {
        TrainConfig {
            max_epochs: 3,
            train_tasks: 300,
            eval_tasks: 60,
            seeds: vec![1],
            train_size: 64,
            test_size: 64,
            ..Self::full_static()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("decay_factor", self.decay_factor),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("train_tasks", self.train_tasks),
            ("eval_tasks", self.eval_tasks),
            ("train_size", self.train_size),
            ("test_size", self.test_size),
            ("k", self.k),
            ("query_count", self.query_count),
            ("workers", self.workers),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay epochs must be strictly increasing".into()));
        }
        if self.decay_epochs.iter().any(|&e| e == 0) {
            return Err(Error::Config("decay epochs are 1-based".into()));
        }
        if self.steps_per_epoch() == 0 {
            return Err(Error::Config(format!(
                "train_tasks {} cannot fill batch_size {} times max_epochs {}",
                self.train_tasks, self.batch_size, self.max_epochs
            )));
        }
        Ok(())
    }

    /// Steps per epoch, chosen so all epochs together consume `train_tasks`
    /// episodes (remainders are dropped).
    pub fn steps_per_epoch(&self) -> usize {
        self.train_tasks / (self.batch_size * self.max_epochs)
    }

    /// Learning rate during the given 1-based epoch: decayed once for every
    /// scheduled epoch already completed.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e < epoch).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }
}

/// Momentum SGD with L2 regularization. Parameters without a gradient (the
/// final stage's support-side heads feed nothing downstream) still decay.
#[derive(Debug)]
pub struct Sgd<S: Scalar> {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// One update over all parameters in registry order. `grads` must be in
    /// the same order; `None` entries contribute a zero gradient.
    pub fn step(&mut self, params: &mut ModelParams<S>, grads: &[Option<Tensor<S>>], lr: f64) {
        let mu = S::from_f64(self.momentum);
        let wd = S::from_f64(self.weight_decay);
        let lr = S::from_f64(lr);
        if self.velocity.is_empty() {
            params.visit(&mut |_, p| self.velocity.push(Tensor::zeros(p.dims().to_vec())));
        }
        assert_eq!(self.velocity.len(), grads.len(), "gradient list length");
        let mut i = 0;
        let velocity = &mut self.velocity;
        params.visit_mut(&mut |name, p| {
            let v = &mut velocity[i];
            assert_eq!(v.dims(), p.dims(), "state shape for {name}");
            let g = grads[i].as_ref();
            if let Some(g) = g {
                assert_eq!(g.dims(), p.dims(), "gradient shape for {name}");
            }
            let vd = v.data_mut();
            for (j, pv) in p.data_mut().iter_mut().enumerate() {
                let gv = g.map_or(S::zero(), |t| t.data()[j]) + wd * *pv;
                let nv = mu * vd[j] + gv;
                vd[j] = nv;
                *pv = *pv - lr * nv;
            }
            i += 1;
        });
        assert_eq!(i, grads.len(), "parameter count changed between steps");
    }
}

/// Mean loss over the batch plus summed-then-averaged gradients in registry
/// order. The loss may be non-finite; the caller decides how to fail.
pub fn batch_gradients<S: Scalar>(
    model: &Model<S>,
    batch: &[(EpisodeInputs<S>, Vec<Mask>)],
) -> Result<(f64, Vec<Option<Tensor<S>>>)> {
    assert!(!batch.is_empty(), "empty batch");
    let mut total: Vec<Option<Tensor<S>>> = Vec::new();
    let mut loss_sum = 0.0;
    for (inputs, targets) in batch {
        let graph = model.training_graph(inputs, targets)?;
        loss_sum += graph.tape.value(graph.loss).data()[0].to_f64();
        let mut grads = graph.tape.backward(graph.loss);
        if total.is_empty() {
            total = (0..graph.param_vars.len()).map(|_| None).collect();
        }
        for (slot, var) in total.iter_mut().zip(&graph.param_vars) {
            if let Some(g) = grads.take(*var) {
                match slot {
                    Some(t) => t.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
    }
    let inv = S::from_f64(1.0 / batch.len() as f64);
    for slot in total.iter_mut() {
        if let Some(t) = slot.take() {
            *slot = Some(t.scale(inv));
        }
    }
    Ok((loss_sum / batch.len() as f64, total))
}

/// Splits a loaded episode into network inputs and loss targets.
pub fn to_training_example<S: Scalar>(
    loaded: LoadedEpisode<S>,
    embedding: Option<WordEmbedding>,
) -> (EpisodeInputs<S>, Vec<Mask>) {
    (
        EpisodeInputs {
            class_label: loaded.class_label,
            embedding,
            support_images: loaded.support_images,
            query_images: loaded.query_images,
        },
        loaded.query_masks,
    )
}

/// Where a training run went non-finite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergencePoint {
    pub epoch: usize,
    pub step: usize,
}

/// Everything one seeded run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub final_scores: Option<EvalSummary>,
    /// Checkpoint path relative to the run directory.
    pub checkpoint: Option<String>,
    pub diverged: Option<DivergencePoint>,
}

/// Evaluation over a batch of meta-test episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub scores: RunScores,
    /// Mean and standard error of the per-episode foreground IoU; the
    /// standard error shrinks with more episodes.
    pub episode_fg_iou_mean: f64,
    pub episode_fg_iou_stderr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: f64,
    pub ci95: f64,
}

/// Multi-seed report: one record per seed plus aggregates over the final
/// scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub runs: Vec<RunRecord>,
    pub failures: Vec<String>,
    pub aggregate_miou: Option<AggregateStat>,
    pub aggregate_biou: Option<AggregateStat>,
}

/// Shared context for training and evaluation over one dataset and fold.
pub struct TrainSession<'a> {
    pub manifest: &'a DatasetManifest,
    pub fold: &'a FoldSpec,
    pub config: &'a TrainConfig,
    /// Word vectors for semantic variants; visual-only runs pass `None`.
    pub embeddings: Option<&'a dyn EmbeddingProvider>,
    /// Artifact directory; `None` keeps everything in memory.
    pub run_dir: Option<&'a Path>,
}

impl<'a> TrainSession<'a> {
    fn embedding_for<S: Scalar>(&self, model: &Model<S>, class: &str) -> Result<Option<WordEmbedding>> {
        if !model.config().variant.uses_semantics() {
            return Ok(None);
        }
        let provider = self.embeddings.ok_or_else(|| {
            Error::Config("semantic variant needs an embedding provider".into())
        })?;
        semantics::lookup(provider, class).map(Some)
    }

    /// Streams `n` loaded episodes in index order. Worker t draws episodes
    /// t, t+w, t+2w... from its own generator seeded with `seed + t`, so the
    /// stream is a pure function of (seed, workers).
    fn for_each_episode<S: Scalar>(
        &self,
        split: Split,
        options: LoadOptions,
        n: usize,
        seed: u64,
        mut consume: impl FnMut(usize, LoadedEpisode<S>) -> Result<()>,
    ) -> Result<()> {
        let workers = self.config.workers.max(1);
        let draw = |index: usize, rng: &mut rng::Rng| -> Result<LoadedEpisode<S>> {
            let _ = index;
            let episode = sample_episode(
                self.manifest,
                self.fold,
                split,
                self.config.mode,
                self.config.k,
                self.config.query_count,
                rng,
            )?;
            load_episode(self.manifest, &episode, options, rng)
        };

        if workers == 1 {
            let mut rng = rng::seeded(seed);
            for i in 0..n {
                consume(i, draw(i, &mut rng)?)?;
            }
            return Ok(());
        }

        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<(usize, Result<LoadedEpisode<S>>)>(workers * 4);
            for t in 0..workers {
                let tx = tx.clone();
                let draw = &draw;
                scope.spawn(move || {
                    let mut rng = rng::seeded(seed + t as u64);
                    let mut i = t;
                    while i < n {
                        let item = draw(i, &mut rng);
                        // A closed channel means the consumer gave up.
                        if tx.send((i, item)).is_err() {
                            return;
                        }
                        i += workers;
                    }
                });
            }
            drop(tx);
            let mut pending: BTreeMap<usize, Result<LoadedEpisode<S>>> = BTreeMap::new();
            let mut next = 0usize;
            while next < n {
                while !pending.contains_key(&next) {
                    let (i, item) = rx
                        .recv()
                        .map_err(|_| Error::Config("episode worker stopped early".into()))?;
                    pending.insert(i, item);
                }
                let item = pending.remove(&next).expect("key checked above")?;
                consume(next, item)?;
                next += 1;
            }
            Ok(())
        })
    }

    fn write_record(&self, record: &RunRecord) -> Result<()> {
        if let Some(dir) = self.run_dir {
            fs::create_dir_all(dir)?;
            let path = dir.join(format!("run_seed{}.json", record.seed));
            fs::write(path, to_json_pretty(record)?)?;
        }
        Ok(())
    }

    /// Optimizes the projection, interaction, and decoder parameters with
    /// momentum SGD; the encoder never changes. Episodes come exclusively
    /// from the fold's meta-train classes. On a non-finite loss the partial
    /// record is persisted and the run aborts.
    pub fn meta_train<S: Scalar>(&self, model: &mut Model<S>, seed: u64) -> Result<RunRecord> {
        self.config.validate()?;
        model.config().validate()?;
        let encoder_before = model.encoder().weights_digest();
        let steps_per_epoch = self.config.steps_per_epoch();
        let batch_size = self.config.batch_size;
        let total_steps = steps_per_epoch * self.config.max_epochs;
        let options = LoadOptions {
            image_size: self.config.train_size,
            augment_supports: self.config.augment,
        };

        let mut optimizer = Sgd::new(self.config.momentum, self.config.weight_decay);
        let mut record = RunRecord {
            seed,
            epoch_losses: Vec::with_capacity(self.config.max_epochs),
            final_scores: None,
            checkpoint: None,
            diverged: None,
        };
        let mut batch: Vec<(EpisodeInputs<S>, Vec<Mask>)> = Vec::with_capacity(batch_size);
        let mut epoch_sum = 0.0;
        let mut failure: Option<Error> = None;

        let outcome = self.for_each_episode(
            Split::MetaTrain,
            options,
            total_steps * batch_size,
            seed,
            |i, loaded| {
                assert!(
                    !self.fold.test_classes.contains(&loaded.class_label),
                    "meta-test class {} leaked into a training batch",
                    loaded.class_label
                );
                let embedding = self.embedding_for(model, &loaded.class_label)?;
                batch.push(to_training_example(loaded, embedding));
                if batch.len() < batch_size {
                    return Ok(());
                }
                let step = i / batch_size;
                let epoch = step / steps_per_epoch + 1;
                let (loss, grads) = batch_gradients(model, &batch)?;
                batch.clear();
                if !loss.is_finite() {
                    let at = DivergencePoint {
                        epoch,
                        step: step % steps_per_epoch + 1,
                    };
                    record.diverged = Some(at);
                    failure = Some(Error::DivergenceDetected {
                        epoch: at.epoch,
                        step: at.step,
                    });
                    return Err(Error::DivergenceDetected {
                        epoch: at.epoch,
                        step: at.step,
                    });
                }
                optimizer.step(model.params_mut(), &grads, self.config.lr_at_epoch(epoch));
                epoch_sum += loss;
                if (step + 1) % steps_per_epoch == 0 {
                    record.epoch_losses.push(epoch_sum / steps_per_epoch as f64);
                    epoch_sum = 0.0;
                }
                Ok(())
            },
        );

        let encoder_after = model.encoder().weights_digest();
        assert_eq!(encoder_before, encoder_after, "frozen encoder changed during training");

        if let Err(e) = outcome {
            self.write_record(&record)?;
            return Err(failure.unwrap_or(e));
        }
        if let Some(dir) = self.run_dir {
            let rel = format!("checkpoints/seed{seed}.ckpt");
            let path = dir.join(&rel);
            fs::create_dir_all(path.parent().expect("checkpoint path has a parent"))?;
            model.save(&path)?;
            record.checkpoint = Some(rel);
        }
        self.write_record(&record)?;
        Ok(record)
    }

    /// Scores `eval_tasks` meta-test episodes with fixed parameters. Every
    /// episode's class comes from the fold's held-out set.
    pub fn meta_test<S: Scalar>(&self, model: &Model<S>, seed: u64) -> Result<EvalSummary> {
        self.config.validate()?;
        let options = LoadOptions {
            image_size: self.config.test_size,
            augment_supports: false,
        };
        let mut accumulator = ConfusionAccumulator::new();
        let mut episode_ious = Vec::with_capacity(self.config.eval_tasks);
        self.for_each_episode(
            Split::MetaTest,
            options,
            self.config.eval_tasks,
            seed,
            |_, loaded| {
                assert!(
                    self.fold.test_classes.contains(&loaded.class_label),
                    "evaluation sampled a non-test class {}",
                    loaded.class_label
                );
                let embedding = self.embedding_for(model, &loaded.class_label)?;
                let class = loaded.class_label.clone();
                let gt = loaded.query_masks.clone();
                let (inputs, _) = to_training_example(loaded, embedding);
                let forward = model.forward(&inputs)?;
                let mut inter = 0u64;
                let mut union = 0u64;
                for (output, target) in forward.outputs.iter().zip(&gt) {
                    let pred = output.predicted_mask();
                    accumulator.accumulate(&class, &pred, target)?;
                    for (p, g) in pred.data().iter().zip(target.data()) {
                        if *g == crate::mask::IGNORE {
                            continue;
                        }
                        let (p, g) = (*p == 1, *g == 1);
                        inter += u64::from(p && g);
                        union += u64::from(p || g);
                    }
                }
                episode_ious.push(if union == 0 {
                    1.0
                } else {
                    inter as f64 / union as f64
                });
                Ok(())
            },
        )?;
        let n = episode_ious.len();
        let mean = episode_ious.iter().sum::<f64>() / n as f64;
        let stderr = if n < 2 {
            0.0
        } else {
            let var = episode_ious.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        };
        Ok(EvalSummary {
            episodes: n,
            scores: accumulator.summarize(&self.fold.test_classes)?,
            episode_fg_iou_mean: mean,
            episode_fg_iou_stderr: stderr,
        })
    }

    /// Trains and evaluates one model per configured seed. With
    /// `allow_partial`, failed runs become entries in `failures` instead of
    /// aborting the report.
    pub fn multi_seed<S: Scalar>(
        &self,
        base: &ModelConfig,
        allow_partial: bool,
    ) -> Result<MultiSeedReport> {
        self.config.validate()?;
        let mut report = MultiSeedReport {
            runs: Vec::new(),
            failures: Vec::new(),
            aggregate_miou: None,
            aggregate_biou: None,
        };
        for &seed in &self.config.seeds {
            let run = (|| -> Result<RunRecord> {
                let mut model = Model::<S>::init(base.clone(), seed)?;
                let mut record = self.meta_train(&mut model, seed)?;
                record.final_scores = Some(self.meta_test(&model, seed)?);
                self.write_record(&record)?;
                Ok(record)
            })();
            match run {
                Ok(record) => report.runs.push(record),
                Err(e) if allow_partial => report.failures.push(format!("seed {seed}: {e}")),
                Err(e) => return Err(e),
            }
        }
        let finals: Vec<&EvalSummary> = report
            .runs
            .iter()
            .filter_map(|r| r.final_scores.as_ref())
            .collect();
        if finals.len() >= 2 {
            let miou: Vec<f64> = finals.iter().map(|s| s.scores.miou).collect();
            let biou: Vec<f64> = finals.iter().map(|s| s.scores.biou).collect();
            let (mean, ci95) = metrics::aggregate_runs(&miou)?;
            report.aggregate_miou = Some(AggregateStat { mean, ci95 });
            let (mean, ci95) = metrics::aggregate_runs(&biou)?;
            report.aggregate_biou = Some(AggregateStat { mean, ci95 });
        }
        if let Some(dir) = self.run_dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("metrics.json"), to_json_pretty(&report)?)?;
        }
        Ok(report)
    }
}

/// Stable pretty JSON with a trailing newline.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Reads a report or record back from a run directory.
pub fn from_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Run-directory layout helper shared with the command-line tool.
pub fn checkpoint_path(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("checkpoints/seed{seed}.ckpt"))
}
