//! Toy temporal tasks and a plain gradient-descent trainer with stage
//! freeze masks.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Branch, RunConfig, Stage, TaskKind};
use crate::encoder::{Event, SyntheticVideoSpec};
use crate::error::{Error, Result};
use crate::params::HeadParams;
use crate::pipeline::{forward_video, TextInput, VidCompress};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::text::TextPrompt;

/// Signal ids of the two toy events.
pub const SIGNAL_A: usize = 0;
pub const SIGNAL_B: usize = 1;

/// Fixed instruction used for every toy example.
pub fn task_prompt(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Order => "did a appear before b",
        TaskKind::Gap => "were a and b close in time",
        TaskKind::Presence => "did a appear",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub frames: usize,
    pub dim: usize,
    pub grid: usize,
    /// Patches lit by one event, chosen at random; `grid²` covers the frame.
    pub event_patches: usize,
    /// Inclusive range of frame distances between the two events (order task).
    pub order_gap: (usize, usize),
    /// Threshold G for the gap task.
    pub gap: usize,
    pub noise_scale: f64,
    pub signal_scale: f64,
}

impl ToyTask {
    /// Order gaps are drawn from (T_c, 3·T_c], clipped to the video length.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let task = Self {
            kind: cfg.task,
            frames: cfg.frames,
            dim: cfg.d,
            grid: cfg.grid,
            event_patches: cfg.event_patches.unwrap_or(cfg.grid * cfg.grid),
            order_gap: (cfg.clip_size + 1, (3 * cfg.clip_size).min(cfg.frames.saturating_sub(1))),
            gap: cfg.gap,
            noise_scale: cfg.noise_scale,
            signal_scale: cfg.signal_scale,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.event_patches == 0 || self.event_patches > self.grid * self.grid {
            return Err(Error::Config(format!(
                "event_patches must lie in 1..={}",
                self.grid * self.grid
            )));
        }
        if self.dim < 2 {
            return Err(Error::Config("toy tasks need d ≥ 2 for two signal directions".into()));
        }
        match self.kind {
            TaskKind::Order if self.order_gap.0 > self.order_gap.1 => Err(Error::Config(format!(
                "{} frames leave no room for an order gap in {}..={}",
                self.frames, self.order_gap.0, self.order_gap.1
            ))),
            TaskKind::Gap if self.gap == 0 || self.gap + 1 >= self.frames => Err(Error::Config(
                format!("gap {} must lie in 1..{} for {} frames", self.gap, self.frames - 1, self.frames),
            )),
            TaskKind::Presence if self.frames < 2 => {
                Err(Error::Config("presence needs at least 2 frames".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn num_classes(&self) -> usize {
        2
    }

    fn event(&self, frame: usize, signal: usize, rng: &mut impl Rng) -> Vec<Event> {
        rand::seq::index::sample(rng, self.grid * self.grid, self.event_patches)
            .into_iter()
            .map(|patch| Event { frame, patch, signal })
            .collect()
    }

    /// Events for one example of class `label`.
    fn events(&self, label: usize, rng: &mut impl Rng) -> Vec<Event> {
        let t = self.frames;
        match self.kind {
            TaskKind::Order => {
                let gap = rng.random_range(self.order_gap.0..=self.order_gap.1);
                let first = rng.random_range(0..t - gap);
                let (a, b) = if label == 1 { (first, first + gap) } else { (first + gap, first) };
                [self.event(a, SIGNAL_A, rng), self.event(b, SIGNAL_B, rng)].concat()
            }
            TaskKind::Gap => {
                let dist = if label == 1 {
                    rng.random_range(1..=self.gap)
                } else {
                    rng.random_range(self.gap + 1..t)
                };
                let first = rng.random_range(0..t - dist);
                let (a, b) = if rng.random_bool(0.5) { (first, first + dist) } else { (first + dist, first) };
                [self.event(a, SIGNAL_A, rng), self.event(b, SIGNAL_B, rng)].concat()
            }
            TaskKind::Presence => {
                let mut ev = self.event(rng.random_range(0..t), SIGNAL_B, rng);
                if label == 1 {
                    ev.extend(self.event(rng.random_range(0..t), SIGNAL_A, rng));
                }
                ev
            }
        }
    }

    /// Exactly balanced labelled examples (an odd count has one extra 0).
    pub fn dataset(&self, count: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..count).map(|i| i % 2).collect();
        labels.shuffle(&mut rng);
        labels
            .into_iter()
            .map(|label| {
                let mut spec = SyntheticVideoSpec::new(self.frames, self.dim, rng.random());
                spec.grid = self.grid;
                spec.noise_scale = self.noise_scale;
                spec.signal_scale = self.signal_scale;
                spec.events = self.events(label, &mut rng);
                Example { spec, label }
            })
            .collect()
    }
}

/// A labelled video, stored as its generator recipe.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Example {
    pub spec: SyntheticVideoSpec,
    pub label: usize,
}

/// Mean-pools the token sequence and applies a linear layer; (1, C) logits.
pub fn head_logits<T: Real>(g: &mut Graph<T>, head: &HeadParams<Var>, tokens: Var) -> Result<Var> {
    let pooled = g.mean_rows(tokens)?;
    let logits = g.matmul(pooled, head.w)?;
    g.add_bias(logits, head.b)
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub log_every: usize,
    pub stage: Stage,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            steps: cfg.steps,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            warmup_ratio: cfg.warmup_ratio,
            log_every: cfg.log_every.max(1),
            stage: cfg.stage,
            seed: cfg.seed,
        }
    }

    /// Linear warmup over the first `warmup_ratio` of steps, then cosine
    /// decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = (self.warmup_ratio * self.steps as f64).ceil() as usize;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let progress = (step - warm) as f64 / span;
        self.lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    /// Mean training loss over the steps since the previous row.
    pub loss: f64,
    /// Training accuracy over the same window.
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<MetricRow>,
    pub initial_loss: f64,
    pub test_accuracy: f64,
    pub wall_time_s: f64,
}

/// Divergence rule: loss above 10× the first step's loss for this many
/// consecutive steps aborts training.
pub const DIVERGENCE_WINDOW: usize = 50;

/// Loss, correctness and (optionally) parameter gradients for one example.
fn example_step<T: Real>(
    model: &VidCompress<T>,
    example: &Example,
    prompt: &TextPrompt,
    stage: Option<Stage>,
) -> Result<(f64, bool, Option<Vec<Option<Tensor<T>>>>)> {
    let video = example.spec.generate::<T>()?.into_tensor();
    let mut g = Graph::new();
    let p = model.bind(&mut g, |n| stage.is_some_and(|s| s.trains(n)));
    let mut state = model.fresh_state();
    let fwd = forward_video(
        &mut g,
        model.config(),
        &p,
        &video,
        TextInput::Prompt(prompt),
        &mut state,
    )?;
    let logits = head_logits(&mut g, &p.head, fwd.tokens)?;
    let label = example.label;
    let row = g.value(logits).data().to_vec();
    let predicted = (0..row.len())
        .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or(0);
    let loss = g.cross_entropy(logits, label)?;
    let loss_value = g.value(loss).item()?.to_f64().unwrap_or(f64::NAN);
    let grads = match stage {
        Some(_) => {
            let grads = g.backward(loss)?;
            Some(
                p.named("")
                    .into_iter()
                    .map(|(_, &v)| grads.get(v).cloned())
                    .collect(),
            )
        }
        None => None,
    };
    Ok((loss_value, predicted == label, grads))
}

/// Test-set accuracy without gradients.
fn evaluate<T: Real>(model: &VidCompress<T>, data: &[Example], prompt: &TextPrompt) -> Result<f64> {
    let mut correct = 0;
    for ex in data {
        correct += example_step(model, ex, prompt, None)?.1 as usize;
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Trains `model` in place on `train`, then scores it on `test`.
pub fn train_toy<T: Real>(
    model: &mut VidCompress<T>,
    task: &ToyTask,
    train: &[Example],
    test: &[Example],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let start = Instant::now();
    if train.is_empty() || opts.steps == 0 || opts.batch_size == 0 {
        return Err(Error::Config("training needs examples, steps and a batch size".into()));
    }
    let prompt = model.prompt(task_prompt(task.kind))?;

    let names: Vec<String> = model.params().named("").into_iter().map(|(n, _)| n).collect();
    let trainable: Vec<bool> = names.iter().map(|n| opts.stage.trains(n)).collect();
    let frozen_before: Vec<Tensor<T>> = model
        .params()
        .named("")
        .into_iter()
        .zip(&trainable)
        .filter(|(_, &t)| !t)
        .map(|((_, t), _)| t.clone())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7EA1);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let (mut window_loss, mut window_correct, mut window_count) = (0.0, 0usize, 0usize);
    let mut initial_loss = None;
    let mut over = 0usize;

    for step in 0..opts.steps {
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; names.len()];
        let mut batch_loss = 0.0;
        for _ in 0..opts.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled above");
            let (loss, correct, grads) = example_step(model, &train[i], &prompt, Some(opts.stage))?;
            batch_loss += loss;
            window_correct += correct as usize;
            for (slot, grad) in acc.iter_mut().zip(grads.unwrap_or_default()) {
                if let Some(grad) = grad {
                    let dst = slot.get_or_insert_with(|| vec![0.0; grad.numel()]);
                    for (d, v) in dst.iter_mut().zip(grad.data()) {
                        *d += v.to_f64().unwrap_or(f64::NAN);
                    }
                }
            }
        }
        batch_loss /= opts.batch_size as f64;
        window_loss += batch_loss;
        window_count += 1;

        let initial = *initial_loss.get_or_insert(batch_loss);
        if !batch_loss.is_finite() || batch_loss > 10.0 * initial {
            over += 1;
            if over >= DIVERGENCE_WINDOW || !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: batch_loss,
                    initial,
                    window: over,
                });
            }
        } else {
            over = 0;
        }

        let lr = opts.lr_at(step) / opts.batch_size as f64;
        let mut k = 0;
        model.params_mut().visit_mut("", &mut |_, t| {
            if let (true, Some(g)) = (trainable[k], acc[k].as_ref()) {
                for (w, gv) in t.data_mut().iter_mut().zip(g) {
                    *w = *w - T::lit(lr * gv);
                }
            }
            k += 1;
        });

        if (step + 1) % opts.log_every == 0 || step + 1 == opts.steps {
            log.push(MetricRow {
                step: step + 1,
                loss: window_loss / window_count as f64,
                accuracy: window_correct as f64 / (window_count * opts.batch_size) as f64,
            });
            (window_loss, window_correct, window_count) = (0.0, 0, 0);
        }
    }

    let frozen_after = model
        .params()
        .named("")
        .into_iter()
        .zip(&trainable)
        .filter(|(_, &t)| !t)
        .map(|((n, t), _)| (n, t));
    for (before, (name, after)) in frozen_before.iter().zip(frozen_after) {
        if !before.bit_eq(after) {
            return Err(Error::Contract(format!("frozen tensor `{name}` changed during training")));
        }
    }

    let test_accuracy = if test.is_empty() { f64::NAN } else { evaluate(model, test, &prompt)? };
    Ok(TrainReport {
        log,
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        test_accuracy,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Model, task and datasets built from one run configuration.
pub struct Experiment<T> {
    pub model: VidCompress<T>,
    pub task: ToyTask,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub options: TrainOptions,
}

impl<T: Real> Experiment<T> {
    /// Data seeds derive from `cfg.seed` only, so runs that differ in model
    /// settings see the same examples.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let task = ToyTask::from_config(cfg)?;
        let train = task.dataset(cfg.train_examples, cfg.seed.wrapping_mul(2).wrapping_add(1));
        let test = task.dataset(cfg.test_examples, cfg.seed.wrapping_mul(2).wrapping_add(2));
        Ok(Self {
            model: VidCompress::new(cfg.model(), cfg.seed)?,
            task,
            train,
            test,
            options: TrainOptions::from_config(cfg),
        })
    }

    pub fn run(&mut self) -> Result<TrainReport> {
        train_toy(&mut self.model, &self.task, &self.train, &self.test, &self.options)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: Branch,
    pub task: TaskKind,
    pub accuracy: f64,
    pub tokens_per_frame: usize,
    pub wall_time_s: f64,
}

/// Trains one model per branch mode with shared seed and data.
pub fn run_ablation<T: Real>(base: &RunConfig, modes: &[Branch]) -> Result<Vec<AblationRow>> {
    modes
        .iter()
        .map(|&mode| {
            let cfg = RunConfig {
                branch: mode,
                ..base.clone()
            };
            let report = Experiment::<T>::new(&cfg)?.run()?;
            Ok(AblationRow {
                mode,
                task: cfg.task,
                accuracy: report.test_accuracy,
                tokens_per_frame: mode.tokens_per_frame(),
                wall_time_s: report.wall_time_s,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ClipSize,
    MemorySize,
}

impl SweepAxis {
    pub fn values(self) -> &'static [usize] {
        match self {
            SweepAxis::ClipSize => &[4, 8, 16],
            SweepAxis::MemorySize => &[3, 5, 7],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::ClipSize => "clip_size",
            SweepAxis::MemorySize => "memory_size",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip_size" | "clip-size" => Ok(SweepAxis::ClipSize),
            "memory_size" | "memory-size" => Ok(SweepAxis::MemorySize),
            _ => Err(Error::Config(format!(
                "unknown sweep axis `{s}` (expected clip_size or memory_size)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: usize,
    pub accuracy: f64,
    /// Inference frames per second on the test set.
    pub throughput_fps: f64,
    pub tokens_per_video: usize,
}

pub fn run_sweep<T: Real>(base: &RunConfig, axis: SweepAxis) -> Result<Vec<SweepRow>> {
    axis.values()
        .iter()
        .map(|&value| {
            let mut cfg = base.clone();
            match axis {
                SweepAxis::ClipSize => cfg.clip_size = value,
                SweepAxis::MemorySize => cfg.memory_size = value,
            }
            let mut exp = Experiment::<T>::new(&cfg)?;
            let report = exp.run()?;
            let prompt = exp.model.prompt(task_prompt(cfg.task))?;
            let timed = exp.test.iter().take(4).collect::<Vec<_>>();
            let clock = Instant::now();
            let mut tokens = 0;
            for ex in &timed {
                let video = ex.spec.generate::<T>()?;
                tokens = exp.model.run_video_streaming(&video, &prompt)?.sequence.len();
            }
            let elapsed = clock.elapsed().as_secs_f64().max(1e-9);
            Ok(SweepRow {
                axis: axis.as_str().to_string(),
                value,
                accuracy: report.test_accuracy,
                throughput_fps: (timed.len() * cfg.frames) as f64 / elapsed,
                tokens_per_video: tokens,
            })
        })
        .collect()
}
