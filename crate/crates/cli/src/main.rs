mod alloc;
mod bench;

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vidcompress::check::{run_gradcheck, CheckKind, TOLERANCE};
use vidcompress::encoder::{read_feature, write_feature};
use vidcompress::tensor::OpKind;
use vidcompress::train::{run_ablation, run_sweep, Experiment, SweepAxis};
use vidcompress::{Branch, DType, Error, Layout, Real, RunConfig, Stage, TaskKind, VidCompress};

#[global_allocator]
static ALLOC: alloc::CountingAlloc = alloc::CountingAlloc;

#[derive(Parser)]
#[command(name = "vidcompress", version, about = "Compress video features into a short token sequence")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    precision: Option<DType>,
    #[arg(long, global = true)]
    branch: Option<Branch>,
    #[arg(long, global = true)]
    clip_size: Option<usize>,
    #[arg(long, global = true)]
    memory_size: Option<usize>,
    #[arg(long, global = true)]
    layout: Option<Layout>,
    /// Output file; CSV commands write to stdout without it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a feature file into a token file.
    Compress {
        input: PathBuf,
        #[arg(long, default_value = "describe the video")]
        prompt: String,
        /// Load weights from a checkpoint instead of initialising from the seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every op and parameter group (always 64-bit).
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train on a toy temporal task; writes step,loss,accuracy rows.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        stage: Option<Stage>,
        /// Save the trained weights here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train once per branch mode on the same data.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', default_value = "mem,txt,full")]
        modes: Vec<Branch>,
    },
    /// Train over the clip-size or memory-size values.
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        axis: SweepAxis,
    },
    /// Stream synthetic videos and report per-clip time and peak heap use.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "64,512")]
        lengths: Vec<usize>,
    },
}

fn load_config(args: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io { path: path.clone(), source: e })?;
            RunConfig::from_json(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.precision {
        cfg.precision = v;
    }
    if let Some(v) = args.branch {
        cfg.branch = v;
    }
    if let Some(v) = args.clip_size {
        cfg.clip_size = v;
    }
    if let Some(v) = args.memory_size {
        cfg.memory_size = v;
    }
    if let Some(v) = args.layout {
        cfg.layout = v;
    }
    Ok(cfg)
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.task {
            cfg.task = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
    }
}

fn write_csv<R: Serialize>(out: Option<&Path>, rows: &[R]) -> anyhow::Result<()> {
    let sink: Box<dyn Write> = match out {
        Some(path) => Box::new(File::create(path).map_err(|e| Error::Io { path: path.into(), source: e })?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn compress<T: Real>(cfg: &RunConfig, input: &Path, prompt: &str, ckpt: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let start = Instant::now();
    let video = read_feature::<T>(input)?;
    let model = match ckpt {
        Some(path) => VidCompress::<T>::load(path)?,
        None => VidCompress::<T>::new(cfg.model(), cfg.seed)?,
    };
    let prompt = model.prompt(prompt)?;
    let result = model.run_video_streaming(&video, &prompt)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| input.with_extension("tokens.vcft"));
    write_feature(&out, &result.sequence.to_feature()?)?;
    println!(
        "T={}: {} clips, {} tokens in {:.3} s -> {}",
        video.frames(),
        result.clips,
        result.sequence.len(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

/// Returns whether every check passed.
fn gradcheck(cfg: &RunConfig, fault: Option<&str>) -> anyhow::Result<bool> {
    let fault = match fault {
        Some(name) => match OpKind::from_name(name) {
            Some(kind) => Some(kind),
            None => bail!(Error::Config(format!("unknown op `{name}`"))),
        },
        None => None,
    };
    let report = run_gradcheck(cfg, fault)?;
    for row in &report.rows {
        if row.kind == CheckKind::Op && row.passed() {
            continue;
        }
        println!(
            "{:5} {:14} max_rel_err {:.3e}  worst {} ({} coords) {}",
            row.kind.to_string(),
            row.name,
            row.max_rel_err,
            row.worst_tensor,
            row.coords,
            if row.passed() { "ok" } else { "FAIL" }
        );
    }
    let ops = report.rows.iter().filter(|r| r.kind == CheckKind::Op).count();
    match report.culprit() {
        None => {
            println!("gradcheck passed: {ops} ops and every group below {TOLERANCE:e}");
            Ok(true)
        }
        Some(row) => {
            let what = match row.kind {
                CheckKind::Op => format!("op `{}`", row.name),
                CheckKind::Group => format!("tensor `{}`", row.worst_tensor),
            };
            eprintln!(
                "gradcheck failed: worst {what}, relative error {:.3e} (analytic {:e}, numeric {:e})",
                row.max_rel_err, row.analytic, row.numeric
            );
            Ok(false)
        }
    }
}

fn train<T: Real>(cfg: &RunConfig, ckpt: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let mut exp = Experiment::<T>::new(cfg)?;
    let report = exp.run()?;
    write_csv(out, &report.log)?;
    eprintln!(
        "{} {} steps, stage {}: test accuracy {:.3} in {:.1} s",
        cfg.task, cfg.steps, cfg.stage, report.test_accuracy, report.wall_time_s
    );
    if let Some(path) = ckpt {
        exp.model.save(path)?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let mut cfg = load_config(&cli.global)?;
    let out = cli.global.out.as_deref();
    macro_rules! by_precision {
        ($($f:ident)::+($($arg:expr),*)) => {
            match cfg.precision {
                DType::F32 => $($f)::+::<f32>($($arg),*),
                DType::F64 => $($f)::+::<f64>($($arg),*),
            }
        };
    }
    match &cli.command {
        Command::Compress { input, prompt, checkpoint } => {
            cfg.validate()?;
            by_precision!(compress(&cfg, input, prompt, checkpoint.as_deref(), out))?;
        }
        Command::Gradcheck { inject_fault } => {
            cfg.validate()?;
            return gradcheck(&cfg, inject_fault.as_deref());
        }
        Command::Train { train: args, stage, checkpoint } => {
            args.apply(&mut cfg);
            if let Some(s) = stage {
                cfg.stage = *s;
            }
            by_precision!(train(&cfg, checkpoint.as_deref(), out))?;
        }
        Command::Ablate { train: args, modes } => {
            args.apply(&mut cfg);
            let rows = by_precision!(run_ablation(&cfg, modes))?;
            write_csv(out, &rows)?;
        }
        Command::Sweep { train: args, axis } => {
            args.apply(&mut cfg);
            let rows = by_precision!(run_sweep(&cfg, *axis))?;
            write_csv(out, &rows)?;
        }
        Command::Bench { lengths } => {
            cfg.validate()?;
            let rows = by_precision!(bench::run(&cfg, lengths))?;
            write_csv(out, &rows)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            // a diverged training run is a failed check, not a usage error
            let diverged = matches!(e.downcast_ref::<Error>(), Some(Error::Diverged { .. }));
            ExitCode::from(if diverged { 1 } else { 2 })
        }
    }
}
