//! Finite-difference verification of every tape op and every parameter
//! group of a small model instance.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

use crate::config::{Branch, RunConfig};
use crate::encoder::random_video;
use crate::error::{Error, Result};
use crate::params::{Group, ModelParams};
use crate::pipeline::{forward_video, TextInput, VidCompress};
use crate::tensor::{
    finite_diff_check, DType, GradCheckOptions, GradCheckReport, Graph, OpKind, PoolConfig, Tensor, Var,
};
use crate::text::TextPrompt;
use crate::train::head_logits;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Frames in the checked video.
pub const CHECK_FRAMES: usize = 8;

const CHECK_PROMPT: &str = "which event came first";

/// Gaussian noise added to every initial weight before checking. At the
/// plain initialisation the averaging pool kernels shrink pooled q/k so far
/// that some attention gradients sit near the finite-difference noise floor.
pub const PARAM_JITTER: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Op,
    Group,
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckKind::Op => "op",
            CheckKind::Group => "group",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub kind: CheckKind,
    /// Op name or parameter group.
    pub name: String,
    /// Input or parameter tensor holding the worst coordinate.
    pub worst_tensor: String,
    pub max_rel_err: f64,
    /// Analytic and finite-difference derivative at the worst coordinate.
    pub analytic: f64,
    pub numeric: f64,
    pub coords: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    /// The first failing op check if any (later op checks reuse earlier
    /// ops in their readout), otherwise the worst group row.
    pub fn culprit(&self) -> Option<&CheckRow> {
        let first_op = self.rows.iter().find(|r| r.kind == CheckKind::Op && !r.passed());
        first_op.or_else(|| {
            self.rows
                .iter()
                .filter(|r| !r.passed())
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        })
    }
}

/// The fixed small configuration checked for a run config: only the
/// branch, layout, seed and text settings are taken from `base`.
pub fn check_instance(base: &RunConfig) -> RunConfig {
    RunConfig {
        precision: DType::F64,
        frames: CHECK_FRAMES,
        d: 16,
        n_q: 4,
        d_out: 8,
        clip_size: 4,
        memory_size: 1,
        grid: 8,
        num_blocks: 3,
        num_heads: 1,
        cache_detached: false,
        ..base.clone()
    }
}

/// Parameter groups checked for a branch.
pub fn checked_groups(branch: Branch) -> &'static [Group] {
    match branch {
        Branch::Mem => &[Group::Mem, Group::Adapter],
        Branch::Txt => &[Group::QFormer, Group::Adapter],
        Branch::Full => &[Group::Mem, Group::QFormer, Group::Fusion, Group::Adapter, Group::Head],
    }
}

fn worst_of(kind: CheckKind, name: &str, rows: Vec<(String, GradCheckReport)>) -> CheckRow {
    let coords = rows.iter().map(|(_, r)| r.coords_checked).sum();
    let (worst_tensor, r) = rows
        .into_iter()
        .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
        .unwrap_or_default();
    CheckRow {
        kind,
        name: name.to_string(),
        worst_tensor,
        max_rel_err: r.max_rel_err,
        analytic: r.analytic_at_worst,
        numeric: r.numeric_at_worst,
        coords,
    }
}

type OpBuilder = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Each entry: op, input shapes, forward builder. The readout of every
/// non-scalar output is `sum(reshape(y, (1, n)) · r)`.
fn op_cases() -> Vec<(OpKind, Vec<Vec<usize>>, OpBuilder)> {
    vec![
        (OpKind::Sum, vec![vec![3, 4]], |g, x| g.sum(x[0])),
        (OpKind::Reshape, vec![vec![2, 6]], |g, x| {
            let y = g.reshape(x[0], &[3, 4])?;
            g.sum(y)
        }),
        (OpKind::MatMul, vec![vec![3, 4], vec![4, 5]], |g, x| {
            let y = g.matmul(x[0], x[1])?;
            g.sum(y)
        }),
        (OpKind::MatMulNT, vec![vec![3, 4], vec![5, 4]], |g, x| g.matmul_nt(x[0], x[1])),
        (OpKind::Add, vec![vec![3, 4], vec![3, 4]], |g, x| g.add(x[0], x[1])),
        (OpKind::AddBias, vec![vec![3, 4], vec![4]], |g, x| g.add_bias(x[0], x[1])),
        (OpKind::Scale, vec![vec![3, 4]], |g, x| g.scale(x[0], 0.7)),
        (OpKind::Softmax, vec![vec![3, 5]], |g, x| g.softmax_rows(x[0])),
        (OpKind::LayerNorm, vec![vec![3, 6], vec![6], vec![6]], |g, x| {
            g.layer_norm(x[0], x[1], x[2])
        }),
        (OpKind::Gelu, vec![vec![3, 4]], |g, x| g.gelu(x[0])),
        (OpKind::Conv3dPool, vec![vec![3, 4, 4, 2], vec![3, 3, 3, 2]], |g, x| {
            g.conv3d_pool(x[0], x[1], PoolConfig::HALVE_SPATIAL)
        }),
        (OpKind::ConcatRows, vec![vec![2, 3], vec![3, 3]], |g, x| g.concat_rows(&[x[0], x[1]])),
        (OpKind::SliceRows, vec![vec![5, 3]], |g, x| g.slice_rows(x[0], 1, 3)),
        (OpKind::ConcatCols, vec![vec![3, 2], vec![3, 4]], |g, x| g.concat_cols(&[x[0], x[1]])),
        (OpKind::SliceCols, vec![vec![3, 5]], |g, x| g.slice_cols(x[0], 2, 2)),
        (OpKind::MeanRows, vec![vec![4, 3]], |g, x| g.mean_rows(x[0])),
        (OpKind::Embedding, vec![vec![6, 4]], |g, x| g.embedding(x[0], &[1, 3, 3, 0])),
        (OpKind::CrossEntropy, vec![vec![1, 5]], |g, x| g.cross_entropy(x[0], 2)),
    ]
}

/// Scalar loss of one op case; `y` outputs that are already scalar are
/// returned unchanged.
fn op_loss(g: &mut Graph<f64>, y: Var, readout: &Tensor<f64>) -> Result<Var> {
    if g.value(y).numel() == 1 && g.value(y).rank() == 0 {
        return Ok(y);
    }
    let n = g.value(y).numel();
    let flat = g.reshape(y, &[1, n])?;
    let r = g.constant(readout.clone().reshape(&[n, 1])?);
    let dot = g.matmul(flat, r)?;
    g.sum(dot)
}

/// Gradient checks of each tape op on random inputs in [-2, 2].
pub fn check_ops(fault: Option<OpKind>, opts: &GradCheckOptions) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (i, (kind, shapes, build)) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| Tensor::rand_uniform(s, -2.0, 2.0, &mut rng))
            .collect();
        let probe_out = {
            let mut g = Graph::new();
            let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let y = build(&mut g, &xs)?;
            g.value(y).numel()
        };
        let readout = Tensor::rand_uniform(&[probe_out], -1.0, 1.0, &mut rng);

        let eval = |xs_val: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let xs: Vec<Var> = xs_val.iter().map(|t| g.constant(t.clone())).collect();
            let y = build(&mut g, &xs)?;
            let loss = op_loss(&mut g, y, &readout)?;
            g.value(loss).item()
        };

        let mut g = Graph::new();
        g.inject_backward_fault(fault);
        let xs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = build(&mut g, &xs)?;
        let loss = op_loss(&mut g, y, &readout)?;
        let grads = g.backward(loss)?;

        let mut reports = Vec::new();
        for (j, x) in xs.iter().enumerate() {
            let analytic = grads
                .get(*x)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[j].shape()));
            let report = finite_diff_check(
                |probe| {
                    let mut vals = inputs.clone();
                    vals[j] = probe.clone();
                    eval(&vals)
                },
                &inputs[j],
                &analytic,
                opts,
            )?;
            reports.push((format!("input{j}"), report));
        }
        rows.push(worst_of(CheckKind::Op, kind.name(), reports));
    }
    Ok(rows)
}

struct ModelInstance {
    model: VidCompress<f64>,
    video: Tensor<f64>,
    prompt: TextPrompt,
    label: usize,
}

impl ModelInstance {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let mut model = VidCompress::<f64>::new(cfg.model(), cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6C0D);
        let noise = Normal::new(0.0, PARAM_JITTER).expect("positive std");
        model.params_mut().visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v += noise.sample(&mut rng);
            }
        });
        let video = random_video::<f64>(cfg.frames, cfg.grid * cfg.grid, cfg.d, &mut rng)?.into_tensor();
        let prompt = model.prompt(CHECK_PROMPT)?;
        Ok(Self {
            model,
            video,
            prompt,
            label: 1,
        })
    }

    fn loss(&self, g: &mut Graph<f64>, p: &ModelParams<Var>) -> Result<Var> {
        let mut state = self.model.fresh_state();
        let fwd = forward_video(
            g,
            self.model.config(),
            p,
            &self.video,
            TextInput::Prompt(&self.prompt),
            &mut state,
        )?;
        let logits = head_logits(g, &p.head, fwd.tokens)?;
        g.cross_entropy(logits, self.label)
    }

    fn loss_with(&self, name: &str, probe: &Tensor<f64>) -> Result<f64> {
        let mut params = self.model.params().clone();
        params.visit_mut("", &mut |n, t| {
            if n == name {
                *t = probe.clone();
            }
        });
        let mut g = Graph::new();
        let p = params.map("", |_, t| g.constant(t.clone()));
        let loss = self.loss(&mut g, &p)?;
        g.value(loss).item()
    }

    fn check(
        &self,
        groups: &[Group],
        fault: Option<OpKind>,
        opts: &GradCheckOptions,
    ) -> Result<Vec<CheckRow>> {
        let mut g = Graph::new();
        g.inject_backward_fault(fault);
        let p = self.model.bind(&mut g, |_| true);
        let loss = self.loss(&mut g, &p)?;
        let grads = g.backward(loss)?;

        let mut per_group: BTreeMap<usize, Vec<(String, GradCheckReport)>> = BTreeMap::new();
        let bound = p.named("");
        for (name, value) in self.model.params().named("") {
            let Some(gi) = Group::of(&name).and_then(|gr| groups.iter().position(|&x| x == gr)) else {
                continue;
            };
            let var = bound
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, &v)| v)
                .ok_or_else(|| Error::Contract(format!("`{name}` was not bound")))?;
            let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
            let report = finite_diff_check(|probe| self.loss_with(&name, probe), value, &analytic, opts)?;
            per_group.entry(gi).or_default().push((name, report));
        }
        Ok(per_group
            .into_iter()
            .map(|(gi, reports)| worst_of(CheckKind::Group, groups[gi].as_str(), reports))
            .collect())
    }
}

/// Group checks of the small model instance for `base`'s branch. With the
/// full branch and parameter-free fusion, a second instance with learned
/// fusion checks the fusion weights.
pub fn check_model(base: &RunConfig, fault: Option<OpKind>, opts: &GradCheckOptions) -> Result<Vec<CheckRow>> {
    let cfg = check_instance(base);
    let groups: Vec<Group> = checked_groups(cfg.branch)
        .iter()
        .copied()
        .filter(|&g| g != Group::Fusion || cfg.learned_fusion)
        .collect();
    let mut rows = ModelInstance::new(&cfg)?.check(&groups, fault, opts)?;
    if cfg.branch == Branch::Full && !cfg.learned_fusion {
        let fused = RunConfig {
            learned_fusion: true,
            ..cfg.clone()
        };
        rows.extend(ModelInstance::new(&fused)?.check(&[Group::Fusion], fault, opts)?);
        rows.sort_by_key(|r| Group::ALL.iter().position(|g| g.as_str() == r.name));
    }
    Ok(rows)
}

/// Op checks followed by group checks.
pub fn run_gradcheck(base: &RunConfig, fault: Option<OpKind>) -> Result<CheckReport> {
    let opts = GradCheckOptions {
        seed: base.seed,
        ..GradCheckOptions::default()
    };
    let mut rows = check_ops(fault, &opts)?;
    rows.extend(check_model(base, fault, &opts)?);
    Ok(CheckReport { rows })
}
